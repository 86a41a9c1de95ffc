//! The trainable bundle: backbone plus whatever training-time heads the
//! config enables, all parameters in one named store.
//!
//! Relation networks, auxiliary classifiers, and the logit relation head
//! exist only while training. [`ModelBundle::strip_for_inference`] returns
//! a backbone-only bundle whose forward logits are bit-identical to the
//! full bundle's backbone path.

use crate::backbone::{build_backbone, forward_tapped, Backbone, BackboneKind, TappedFeatures};
use crate::config::TorsdConfig;
use crate::error::{Result, TorsdError};
use crate::graph::{Graph, NodeId, TeacherCache};
use crate::heads::{forward_relations, AuxClassifierPair, LogitRib, RelationBundle, RelationNetwork};
use crate::losses::{total_loss, LossBreakdown, LossInputs};
use crate::nn::{Binding, ForwardMode, ParamStore};
use crate::data::TripletBatch;
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Backbone, optional training heads, and their parameter store.
pub struct ModelBundle<E: Element> {
    pub store: ParamStore<E>,
    pub backbone: Backbone,
    pub relation_nets: Vec<RelationNetwork>,
    pub aux_heads: Vec<AuxClassifierPair>,
    pub logit_rib: Option<LogitRib>,
    pub num_classes: usize,
    pub embed_dim: usize,
}

/// One forward pass worth of graph state, ready for backward.
pub struct StepGraph<E: Element> {
    pub graph: Graph<E>,
    pub binding: Binding,
    pub root: NodeId,
    pub breakdown: LossBreakdown,
}

impl<E: Element> ModelBundle<E> {
    /// Builds a bundle for `kind` with heads according to the toggles in
    /// `cfg`. All initialization draws from one seeded stream, backbone
    /// first, so identical seeds give identical weights.
    pub fn new(kind: &BackboneKind, num_classes: usize, cfg: &TorsdConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = build_backbone(kind, &mut store, num_classes, &mut rng)?;
        let specs = backbone.block_specs();

        let mut relation_nets = Vec::new();
        if cfg.enable_rn {
            for spec in &specs {
                relation_nets.push(RelationNetwork::new(
                    &mut store,
                    spec.index,
                    spec.out_channels,
                    spec.height,
                    spec.width,
                    cfg.embed_dim,
                    &mut rng,
                ));
            }
        }
        let mut aux_heads = Vec::new();
        if cfg.enable_ac {
            if !cfg.enable_rn {
                return Err(TorsdError::config(
                    "enable_ac",
                    "auxiliary classifiers consume projected pair features; requires enable_rn=true",
                ));
            }
            for spec in &specs {
                aux_heads.push(AuxClassifierPair::new(
                    &mut store,
                    spec.index,
                    cfg.embed_dim,
                    num_classes,
                    &mut rng,
                ));
            }
        }
        let logit_rib = if cfg.enable_ld {
            Some(LogitRib::new(&mut store, num_classes, &mut rng))
        } else {
            None
        };

        Ok(ModelBundle {
            store,
            backbone,
            relation_nets,
            aux_heads,
            logit_rib,
            num_classes,
            embed_dim: cfg.embed_dim,
        })
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Backbone-only copy of this bundle: same weights, same forward
    /// path, nothing else.
    pub fn strip_for_inference(&self) -> Result<ModelBundle<E>> {
        let mut cfg = TorsdConfig {
            enable_rn: false,
            enable_ac: false,
            enable_ld: false,
            enable_handcrafted_rd: false,
            ..crate::config::default_paper_config()
        };
        cfg.embed_dim = self.embed_dim;
        let mut stripped = ModelBundle::new(&self.backbone.kind(), self.num_classes, &cfg)?;
        stripped.store.load_values_from(&self.store)?;
        Ok(stripped)
    }

    /// Eval-mode classifier logits for a plain image batch.
    pub fn eval_logits(&mut self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let bind = Binding::frozen(&mut g, &self.store);
        let logits =
            self.backbone
                .forward_logits(&mut g, &bind, &mut self.store, x, ForwardMode::EVAL)?;
        Ok(g.value(logits).clone())
    }

    /// Forward pass over a triplet batch plus the full objective.
    /// `teachers` decides whether detached branches are recorded or
    /// replayed; `mode` selects training math and whether batch-norm
    /// statistics move.
    pub fn training_loss(
        &mut self,
        batch: &TripletBatch<E>,
        cfg: &TorsdConfig,
        teachers: &mut TeacherCache<E>,
        mode: ForwardMode,
    ) -> Result<StepGraph<E>> {
        batch.validate()?;
        let mut g = Graph::new();
        let binding = Binding::trainable(&mut g, &self.store);
        let images = g.constant(batch.images.clone());
        let features: TappedFeatures = forward_tapped(
            &self.backbone,
            &mut g,
            &binding,
            &mut self.store,
            images,
            mode,
        )?;
        let bundle: RelationBundle = forward_relations(
            &mut g,
            &binding,
            &features,
            &self.relation_nets,
            self.logit_rib.as_ref(),
        )?;
        let inputs = LossInputs {
            features: &features,
            bundle: &bundle,
            aux: &self.aux_heads,
            y_o: &batch.y_o,
            y_p: &batch.y_p,
            y_n: &batch.y_n,
            num_classes: self.num_classes,
        };
        let (root, breakdown) = total_loss(&mut g, &binding, &inputs, cfg, teachers)?;
        Ok(StepGraph {
            graph: g,
            binding,
            root,
            breakdown,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_paper_config;
    use crate::data::{assemble_batches, make_synthetic, sample_epoch_triplets, Augmentor};

    fn tiny_cfg() -> TorsdConfig {
        let mut cfg = default_paper_config();
        cfg.embed_dim = 8;
        cfg.seed = 1;
        cfg
    }

    fn synth_batch(num_classes: usize) -> TripletBatch<f32> {
        let ds = make_synthetic(num_classes, 4, 32, 32, 3, 0.2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = sample_epoch_triplets(&ds, &mut rng).unwrap();
        let aug = Augmentor::identity(32, 32, 3);
        assemble_batches::<f32>(
            &sample.triplets,
            &ds,
            6,
            &aug,
            false,
            ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
    }

    #[test]
    fn full_bundle_runs_and_every_term_is_finite() {
        let cfg = tiny_cfg();
        let mut bundle =
            ModelBundle::<f32>::new(&BackboneKind::toy(), 3, &cfg).unwrap();
        let batch = synth_batch(3);
        let mut teachers = TeacherCache::record();
        let step = bundle
            .training_loss(&batch, &cfg, &mut teachers, ForwardMode::TRAIN)
            .unwrap();
        assert!(step.breakdown.is_finite());
        assert!(step.breakdown.task > 0.0);
        assert!(step.breakdown.pat > 0.0);
        assert!(step.breakdown.pld >= 0.0);
        // 4 depths x 2 pairs x 2 signs of relations existed; total sums terms
        let b = step.breakdown;
        let sum = b.task + b.triplet + b.rd + b.pat + b.pld + b.nat + b.nld + b.logit_cal;
        assert!((sum - b.total).abs() < 1e-5);
    }

    #[test]
    fn disabled_terms_are_exactly_zero() {
        let mut cfg = tiny_cfg();
        cfg.enable_rn = false;
        cfg.enable_ac = false;
        cfg.enable_ld = false;
        let mut bundle =
            ModelBundle::<f32>::new(&BackboneKind::toy(), 3, &cfg).unwrap();
        let batch = synth_batch(3);
        let mut teachers = TeacherCache::record();
        let step = bundle
            .training_loss(&batch, &cfg, &mut teachers, ForwardMode::TRAIN)
            .unwrap();
        let b = step.breakdown;
        assert_eq!(b.triplet, 0.0);
        assert_eq!(b.rd, 0.0);
        assert_eq!(b.pat, 0.0);
        assert_eq!(b.pld, 0.0);
        assert_eq!(b.nat, 0.0);
        assert_eq!(b.nld, 0.0);
        assert_eq!(b.logit_cal, 0.0);
        assert_eq!(b.handcrafted_rd, 0.0);
        assert_eq!(b.task, b.total, "baseline total must BE the task loss");
    }

    #[test]
    fn stripping_keeps_logits_bit_identical() {
        let cfg = tiny_cfg();
        let mut bundle =
            ModelBundle::<f32>::new(&BackboneKind::toy(), 4, &cfg).unwrap();
        let mut stripped = bundle.strip_for_inference().unwrap();
        assert!(stripped.param_count() < bundle.param_count());

        // fresh backbone of the same spec has the same parameter count
        let mut off = tiny_cfg();
        off.enable_rn = false;
        off.enable_ac = false;
        off.enable_ld = false;
        let fresh = ModelBundle::<f32>::new(&BackboneKind::toy(), 4, &off).unwrap();
        assert_eq!(stripped.param_count(), fresh.param_count());

        let ds = make_synthetic(4, 3, 32, 32, 3, 0.3, 5);
        for i in 0..ds.len() {
            let mut img = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
            let raw = ds.image(i);
            for y in 0..32 {
                for x in 0..32 {
                    for ch in 0..3 {
                        img.data_mut()[(ch * 32 + y) * 32 + x] = raw[(y * 32 + x) * 3 + ch];
                    }
                }
            }
            let a = bundle.eval_logits(&img).unwrap();
            let b = stripped.eval_logits(&img).unwrap();
            assert_eq!(a.data(), b.data(), "logit mismatch on sample {i}");
        }
    }

    #[test]
    fn stripping_is_idempotent() {
        let cfg = tiny_cfg();
        let bundle = ModelBundle::<f32>::new(&BackboneKind::toy(), 3, &cfg).unwrap();
        let s1 = bundle.strip_for_inference().unwrap();
        let s2 = s1.strip_for_inference().unwrap();
        assert_eq!(s1.param_count(), s2.param_count());
        for (id, p) in s1.store.iter() {
            let q = s2.store.find(&p.name).unwrap();
            assert_eq!(s1.store.value(id).data(), s2.store.value(q).data());
        }
    }

    #[test]
    fn ac_without_rn_is_rejected_at_build() {
        let mut cfg = tiny_cfg();
        cfg.enable_rn = false;
        cfg.enable_ac = true;
        let err = match ModelBundle::<f32>::new(&BackboneKind::toy(), 3, &cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected a validation error"),
        };
        assert!(matches!(err, TorsdError::ConfigValidation { .. }));
    }

    #[test]
    fn head_parameters_use_the_documented_names() {
        let cfg = tiny_cfg();
        let bundle = ModelBundle::<f32>::new(&BackboneKind::toy(), 3, &cfg).unwrap();
        for prefix in [
            "rn.1.fpl.",
            "rn.4.rib.",
            "aux.1.pos.",
            "aux.4.neg.",
            "logit_rib.",
            "backbone.",
        ] {
            assert!(
                bundle.store.iter().any(|(_, p)| p.name.starts_with(prefix)),
                "no parameter named {prefix}*"
            );
        }
    }
}
