//! Block-structured classifiers with per-block feature taps.
//!
//! Two builders: a four-block toy CNN for desk-scale work and a
//! ResNet18-style residual network with a CIFAR stem. Both expose their
//! `k = 4` intermediate block outputs as taps; taps are views of the
//! inference path, so enabling them never changes the classifier output.

use crate::error::{Result, TorsdError};
use crate::graph::{Graph, NodeId};
use crate::nn::{BatchNorm2d, Binding, Conv2d, ForwardMode, Linear, ParamStore};
use crate::tensor::{shape_str, Element};
use rand_chacha::ChaCha8Rng;

/// Geometry of one backbone block's output.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    /// 1-based depth index.
    pub index: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Which backbone architecture a bundle carries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    /// Plain conv-relu stack; `widths` are the four block channel counts.
    ToyCnn { widths: [usize; 4] },
    /// ResNet18-style residual network, CIFAR stem.
    Resnet18Like,
}

impl BackboneKind {
    pub const TOY_WIDTHS: [usize; 4] = [8, 16, 32, 64];
    /// Sub-10k-parameter widths for finite-difference work.
    pub const TINY_WIDTHS: [usize; 4] = [2, 4, 8, 16];

    pub fn toy() -> Self {
        BackboneKind::ToyCnn {
            widths: Self::TOY_WIDTHS,
        }
    }

    pub fn id(&self) -> String {
        match self {
            BackboneKind::ToyCnn { widths } if *widths == Self::TOY_WIDTHS => "toy_cnn".into(),
            BackboneKind::ToyCnn { widths } => format!(
                "toy_cnn:{},{},{},{}",
                widths[0], widths[1], widths[2], widths[3]
            ),
            BackboneKind::Resnet18Like => "resnet18_like".into(),
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        if id == "toy_cnn" {
            return Ok(BackboneKind::toy());
        }
        if id == "resnet18_like" {
            return Ok(BackboneKind::Resnet18Like);
        }
        if let Some(rest) = id.strip_prefix("toy_cnn:") {
            let parts: Vec<usize> = rest
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| TorsdError::Argument(format!("bad backbone id `{id}`")))?;
            if parts.len() == 4 && parts.iter().all(|w| *w > 0) {
                return Ok(BackboneKind::ToyCnn {
                    widths: [parts[0], parts[1], parts[2], parts[3]],
                });
            }
        }
        Err(TorsdError::Argument(format!(
            "unknown backbone `{id}` (expected toy_cnn, toy_cnn:w1,w2,w3,w4 or resnet18_like)"
        )))
    }
}

/// Toy backbone: four conv(3x3, stride 2) + relu blocks, then global
/// average pooling and one linear head.
pub struct ToyCnn {
    blocks: Vec<Conv2d>,
    head: Linear,
    widths: [usize; 4],
    num_classes: usize,
}

/// One residual basic block: two 3x3 convs with batch norm, optional
/// strided 1x1 projection on the skip path.
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::new_no_bias(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new_no_bias(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch);
        let down = if stride != 1 || in_ch != out_ch {
            let dc = Conv2d::new_no_bias(store, &format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, rng);
            let db = BatchNorm2d::new(store, &format!("{name}.down.bn"), out_ch);
            Some((dc, db))
        } else {
            None
        };
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
        }
    }

    fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        store: &mut ParamStore<E>,
        x: NodeId,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let y = self.conv1.forward(g, bind, x)?;
        let y = self.bn1.forward(g, bind, store, y, mode)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, bind, y)?;
        let y = self.bn2.forward(g, bind, store, y, mode)?;
        let skip = match &self.down {
            Some((dc, db)) => {
                let s = dc.forward(g, bind, x)?;
                db.forward(g, bind, store, s, mode)?
            }
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

/// ResNet18-style backbone: 3x3 stem (no max-pool), four two-block stages
/// of widths 64/128/256/512, global average pooling, one linear head.
pub struct Resnet18Like {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
    num_classes: usize,
}

/// A backbone plus its tap geometry.
pub enum Backbone {
    Toy(ToyCnn),
    Resnet(Resnet18Like),
}

/// Input geometry both builders expect.
pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_HW: usize = 32;

/// Builds the toy CNN. Blocks halve the spatial size each: 32 → 16 → 8 →
/// 4 → 2 with channels `widths`.
pub fn build_toy_cnn<E: Element>(
    store: &mut ParamStore<E>,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Backbone> {
    build_toy_cnn_scaled(store, num_classes, BackboneKind::TOY_WIDTHS, rng)
}

/// Toy CNN with custom block widths (tiny variants for gradient checks).
pub fn build_toy_cnn_scaled<E: Element>(
    store: &mut ParamStore<E>,
    num_classes: usize,
    widths: [usize; 4],
    rng: &mut ChaCha8Rng,
) -> Result<Backbone> {
    if num_classes < 2 {
        return Err(TorsdError::Argument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut blocks = Vec::with_capacity(4);
    let mut in_ch = INPUT_CHANNELS;
    for (i, out_ch) in widths.into_iter().enumerate() {
        blocks.push(Conv2d::new(
            store,
            &format!("backbone.block{}.conv", i + 1),
            in_ch,
            out_ch,
            3,
            2,
            1,
            rng,
        ));
        in_ch = out_ch;
    }
    let head = Linear::new(store, "backbone.head.fc", widths[3], num_classes, rng);
    Ok(Backbone::Toy(ToyCnn {
        blocks,
        head,
        widths,
        num_classes,
    }))
}

/// Builds the ResNet18-style backbone (k = 4 stages, CIFAR stem).
pub fn build_resnet18_like<E: Element>(
    store: &mut ParamStore<E>,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Backbone> {
    if num_classes < 2 {
        return Err(TorsdError::Argument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let stem_conv = Conv2d::new_no_bias(store, "backbone.stem.conv", 3, 64, 3, 1, 1, rng);
    let stem_bn = BatchNorm2d::new(store, "backbone.stem.bn", 64);
    let widths = [64usize, 128, 256, 512];
    let mut stages = Vec::with_capacity(4);
    let mut in_ch = 64;
    for (s, out_ch) in widths.into_iter().enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        let mut blocks = Vec::with_capacity(2);
        for b in 0..2 {
            let name = format!("backbone.stage{}.block{}", s + 1, b + 1);
            let st = if b == 0 { stride } else { 1 };
            blocks.push(BasicBlock::new(store, &name, in_ch, out_ch, st, rng));
            in_ch = out_ch;
        }
        stages.push(blocks);
    }
    let head = Linear::new(store, "backbone.head.fc", 512, num_classes, rng);
    Ok(Backbone::Resnet(Resnet18Like {
        stem_conv,
        stem_bn,
        stages,
        head,
        num_classes,
    }))
}

/// Builds a backbone from its serialized kind id.
pub fn build_backbone<E: Element>(
    kind: &BackboneKind,
    store: &mut ParamStore<E>,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Backbone> {
    match kind {
        BackboneKind::ToyCnn { widths } => build_toy_cnn_scaled(store, num_classes, *widths, rng),
        BackboneKind::Resnet18Like => build_resnet18_like(store, num_classes, rng),
    }
}

impl Backbone {
    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Toy(t) => BackboneKind::ToyCnn { widths: t.widths },
            Backbone::Resnet(_) => BackboneKind::Resnet18Like,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Backbone::Toy(t) => t.num_classes,
            Backbone::Resnet(r) => r.num_classes,
        }
    }

    /// Number of tapped blocks (k).
    pub fn depth_count(&self) -> usize {
        4
    }

    /// Output geometry of every tapped block for the standard input size.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        match self {
            Backbone::Toy(t) => {
                let mut hw = INPUT_HW;
                t.widths
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        hw /= 2;
                        BlockSpec {
                            index: i + 1,
                            out_channels: *w,
                            height: hw,
                            width: hw,
                        }
                    })
                    .collect()
            }
            Backbone::Resnet(_) => {
                let widths = [64usize, 128, 256, 512];
                let mut hw = INPUT_HW;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        if i > 0 {
                            hw /= 2;
                        }
                        BlockSpec {
                            index: i + 1,
                            out_channels: *w,
                            height: hw,
                            width: hw,
                        }
                    })
                    .collect()
            }
        }
    }

    fn check_input<E: Element>(&self, g: &Graph<E>, x: NodeId) -> Result<()> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || s[2] != INPUT_HW || s[3] != INPUT_HW {
            return Err(TorsdError::shape(
                format!("[N, {}, {}, {}]", INPUT_CHANNELS, INPUT_HW, INPUT_HW),
                shape_str(s),
            ));
        }
        Ok(())
    }

    /// Forward pass returning all block taps and the classifier logits.
    /// The logits path runs through the same tap nodes, so taps are free.
    pub fn forward_taps<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        store: &mut ParamStore<E>,
        x: NodeId,
        mode: ForwardMode,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        self.check_input(g, x)?;
        match self {
            Backbone::Toy(t) => {
                let mut taps = Vec::with_capacity(4);
                let mut h = x;
                for conv in &t.blocks {
                    let y = conv.forward(g, bind, h)?;
                    h = g.relu(y);
                    taps.push(h);
                }
                let pooled = g.global_avg_pool(h)?;
                let logits = t.head.forward(g, bind, pooled)?;
                Ok((taps, logits))
            }
            Backbone::Resnet(r) => {
                let y = r.stem_conv.forward(g, bind, x)?;
                let y = r.stem_bn.forward(g, bind, store, y, mode)?;
                let mut h = g.relu(y);
                let mut taps = Vec::with_capacity(4);
                for stage in &r.stages {
                    for block in stage {
                        h = block.forward(g, bind, store, h, mode)?;
                    }
                    taps.push(h);
                }
                let pooled = g.global_avg_pool(h)?;
                let logits = r.head.forward(g, bind, pooled)?;
                Ok((taps, logits))
            }
        }
    }

    /// Classifier logits only (the inference path).
    pub fn forward_logits<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        store: &mut ParamStore<E>,
        x: NodeId,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let (_, logits) = self.forward_taps(g, bind, store, x, mode)?;
        Ok(logits)
    }
}

/// Per-depth features of each triplet role plus the backbone logits, as
/// graph nodes. Role views are stride-3 slices of the triple-major batch.
pub struct TappedFeatures {
    /// Raw block outputs for the whole `3T`-image batch, depth-ordered.
    pub taps: Vec<NodeId>,
    pub f_o: Vec<NodeId>,
    pub f_p: Vec<NodeId>,
    pub f_n: Vec<NodeId>,
    /// `[3T, num_classes]` logits for the whole batch.
    pub logits: NodeId,
    pub logits_o: NodeId,
    pub logits_p: NodeId,
    pub logits_n: NodeId,
}

/// Runs the backbone over a triple-major batch and splits every tap and
/// the logits into anchor/positive/negative views.
pub fn forward_tapped<E: Element>(
    backbone: &Backbone,
    g: &mut Graph<E>,
    bind: &Binding,
    store: &mut ParamStore<E>,
    images: NodeId,
    mode: ForwardMode,
) -> Result<TappedFeatures> {
    let n = g.value(images).shape()[0];
    if n % 3 != 0 {
        return Err(TorsdError::shape(
            "leading dim divisible by 3",
            format!("{}", n),
        ));
    }
    let (taps, logits) = backbone.forward_taps(g, bind, store, images, mode)?;
    let mut f_o = Vec::with_capacity(taps.len());
    let mut f_p = Vec::with_capacity(taps.len());
    let mut f_n = Vec::with_capacity(taps.len());
    for tap in &taps {
        f_o.push(g.select_stride(*tap, 0, 3)?);
        f_p.push(g.select_stride(*tap, 1, 3)?);
        f_n.push(g.select_stride(*tap, 2, 3)?);
    }
    let logits_o = g.select_stride(logits, 0, 3)?;
    let logits_p = g.select_stride(logits, 1, 3)?;
    let logits_n = g.select_stride(logits, 2, 3)?;
    Ok(TappedFeatures {
        taps,
        f_o,
        f_p,
        f_n,
        logits,
        logits_o,
        logits_p,
        logits_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Binding;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn forward_shapes(kind: &BackboneKind) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = build_backbone(kind, &mut store, 10, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 3, 32, 32]));
        let bind = Binding::frozen(&mut g, &store);
        let (taps, logits) = bb
            .forward_taps(&mut g, &bind, &mut store, x, ForwardMode::EVAL)
            .unwrap();
        (
            taps.iter().map(|t| g.value(*t).shape().to_vec()).collect(),
            g.value(logits).shape().to_vec(),
        )
    }

    #[test]
    fn toy_cnn_tap_shapes_match_stride_arithmetic() {
        let (taps, logits) = forward_shapes(&BackboneKind::toy());
        assert_eq!(
            taps,
            vec![
                vec![3, 8, 16, 16],
                vec![3, 16, 8, 8],
                vec![3, 32, 4, 4],
                vec![3, 64, 2, 2]
            ]
        );
        assert_eq!(logits, vec![3, 10]);
    }

    #[test]
    fn toy_cnn_param_count_closed_form() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_toy_cnn(&mut store, 10, &mut rng).unwrap();
        // conv i: in*out*9 + out; head: 64*10 + 10
        let widths = [8usize, 16, 32, 64];
        let mut expected = 0usize;
        let mut in_ch = 3usize;
        for w in widths {
            expected += in_ch * w * 9 + w;
            in_ch = w;
        }
        expected += 64 * 10 + 10;
        assert_eq!(store.trainable_count(), expected);
    }

    #[test]
    fn resnet18_like_has_4_taps_with_standard_widths() {
        let (taps, _) = forward_shapes(&BackboneKind::Resnet18Like);
        assert_eq!(
            taps,
            vec![
                vec![3, 64, 32, 32],
                vec![3, 128, 16, 16],
                vec![3, 256, 8, 8],
                vec![3, 512, 4, 4]
            ]
        );
    }

    #[test]
    fn resnet18_like_param_count_near_11_2m() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_resnet18_like(&mut store, 100, &mut rng).unwrap();
        // Known closed-form count for a CIFAR-stem ResNet18, 100 classes.
        assert_eq!(store.trainable_count(), 11_220_132);
    }

    #[test]
    fn identical_seeds_identical_weights() {
        let build = |seed: u64| {
            let mut store: ParamStore<f32> = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_resnet18_like(&mut store, 10, &mut rng).unwrap();
            store
        };
        let a = build(3);
        let b = build(3);
        let c = build(4);
        let wa = a.find("backbone.stage2.block1.conv1.weight").unwrap();
        assert_eq!(a.value(wa).data(), b.value(wa).data());
        assert_ne!(a.value(wa).data(), c.value(wa).data());
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = build_toy_cnn(&mut store, 10, &mut rng).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 3, 28, 28]));
        let bind = Binding::frozen(&mut g, &store);
        let err = bb
            .forward_taps(&mut g, &bind, &mut store, x, ForwardMode::EVAL)
            .unwrap_err();
        assert!(matches!(err, TorsdError::Shape { .. }));
    }

    #[test]
    fn role_views_are_stride_slices() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = build_toy_cnn(&mut store, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let data: Vec<f64> = (0..6 * 3 * 32 * 32).map(|i| (i % 97) as f64 / 97.0).collect();
        let x = g.constant(Tensor::from_vec(&[6, 3, 32, 32], data));
        let bind = Binding::frozen(&mut g, &store);
        let feats = forward_tapped(&bb, &mut g, &bind, &mut store, x, ForwardMode::EVAL).unwrap();
        assert_eq!(feats.f_o.len(), 4);
        for d in 0..4 {
            assert_eq!(g.value(feats.f_o[d]).shape()[0], 2);
        }
        // Role view row r equals full tap row 3r (+offset).
        let tap = g.value(feats.taps[0]).clone();
        let row = tap.len() / 6;
        let f_p = g.value(feats.f_p[0]);
        assert_eq!(&f_p.data()[0..row], &tap.data()[row..2 * row]);
        assert_eq!(g.value(feats.logits).shape(), &[6, 4]);
        assert_eq!(g.value(feats.logits_n).shape(), &[2, 4]);
    }

    #[test]
    fn taps_are_passive_for_the_classifier() {
        // forward_logits and forward_taps produce bit-identical logits.
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = build_toy_cnn(&mut store, 5, &mut rng).unwrap();
        let data: Vec<f32> = (0..3 * 3 * 32 * 32).map(|i| ((i * 31) % 101) as f32 / 101.0).collect();

        let mut g1 = Graph::new();
        let x1 = g1.constant(Tensor::from_vec(&[3, 3, 32, 32], data.clone()));
        let bind1 = Binding::frozen(&mut g1, &store);
        let l1 = bb
            .forward_logits(&mut g1, &bind1, &mut store, x1, ForwardMode::EVAL)
            .unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::from_vec(&[3, 3, 32, 32], data));
        let bind2 = Binding::frozen(&mut g2, &store);
        let (_taps, l2) = bb
            .forward_taps(&mut g2, &bind2, &mut store, x2, ForwardMode::EVAL)
            .unwrap();

        assert_eq!(g1.value(l1).data(), g2.value(l2).data());
    }

    #[test]
    fn forward_values_stay_finite() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = build_resnet18_like(&mut store, 10, &mut rng).unwrap();
        let mut g = Graph::new();
        let data: Vec<f32> = (0..3 * 3 * 32 * 32).map(|i| ((i * 17) % 255) as f32 / 255.0).collect();
        let x = g.constant(Tensor::from_vec(&[3, 3, 32, 32], data));
        let bind = Binding::frozen(&mut g, &store);
        let (taps, logits) = bb
            .forward_taps(&mut g, &bind, &mut store, x, ForwardMode::TRAIN)
            .unwrap();
        for t in taps {
            assert!(g.value(t).all_finite());
        }
        assert!(g.value(logits).all_finite());
    }
}
