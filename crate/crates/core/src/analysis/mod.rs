//! Feature-space separability analysis, 2-D embedding export, and the
//! finite-difference gradient checker.

pub mod tsne;

pub use tsne::{embed_2d, Embedding2d, TsneOptions};

use crate::config::TorsdConfig;
use crate::data::{channel_stats, Augmentor, LabeledDataset, TripletBatch};
use crate::error::{Result, TorsdError};
use crate::graph::TeacherCache;
use crate::model::ModelBundle;
use crate::nn::{Binding, ForwardMode};
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Global-average-pooled block-`depth` features of every sample.
#[derive(Clone, Debug)]
pub struct DepthFeatureSet {
    /// 1-based depth index.
    pub depth: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Runs the backbone in eval mode and pools the block-`depth` output of
/// every sample.
pub fn extract_depth_features<E: Element>(
    bundle: &mut ModelBundle<E>,
    ds: &LabeledDataset,
    depth: usize,
) -> Result<DepthFeatureSet> {
    let k = bundle.backbone.depth_count();
    if depth == 0 || depth > k {
        return Err(TorsdError::Argument(format!(
            "depth {depth} out of range 1..={k}"
        )));
    }
    let stats = channel_stats(ds);
    let aug = Augmentor::new(stats, ds.h, ds.w, ds.c);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval path draws nothing
    let mut features = Vec::with_capacity(ds.len());
    let chunk = 300usize;
    let mut i = 0;
    while i < ds.len() {
        let hi = (i + chunk).min(ds.len());
        let n = hi - i;
        let mut images = Tensor::<E>::zeros(&[n, ds.c, ds.h, ds.w]);
        for (r, idx) in (i..hi).enumerate() {
            let hwc = aug.augment(ds.image(idx), false, &mut rng)?;
            for y in 0..ds.h {
                for x in 0..ds.w {
                    for ch in 0..ds.c {
                        images.data_mut()[((r * ds.c + ch) * ds.h + y) * ds.w + x] =
                            E::from_f64(hwc[(y * ds.w + x) * ds.c + ch] as f64);
                    }
                }
            }
        }
        let mut g = crate::graph::Graph::new();
        let x = g.constant(images);
        let bind = Binding::frozen(&mut g, &bundle.store);
        let (taps, _logits) =
            bundle
                .backbone
                .forward_taps(&mut g, &bind, &mut bundle.store, x, ForwardMode::EVAL)?;
        let pooled = g.global_avg_pool(taps[depth - 1])?;
        let val = g.value(pooled);
        let c = val.shape()[1];
        for r in 0..n {
            features.push(
                val.data()[r * c..(r + 1) * c]
                    .iter()
                    .map(|v| v.to_f64())
                    .collect(),
            );
        }
        i = hi;
    }
    Ok(DepthFeatureSet {
        depth,
        features,
        labels: ds.labels().collect(),
    })
}

/// Within-class scatter, between-class scatter, and their ratio.
///
/// `SSE = sum_c sum_{x: y=c} ||x - mu_c||^2`,
/// `SSB = sum_c n_c ||mu_c - mu||^2`, ratio `SSE/SSB`. Smaller ratios mean
/// denser, better separated classes. Their sum must reproduce the total
/// scatter; that decomposition is asserted on every call.
pub fn sse_ssb(set: &DepthFeatureSet) -> Result<(f64, f64, f64)> {
    let n = set.features.len();
    if n == 0 {
        return Err(TorsdError::Argument("no features".into()));
    }
    let dim = set.features[0].len();
    let classes: Vec<usize> = {
        let mut c = set.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(TorsdError::Degenerate(
            "separability needs at least two classes present".into(),
        ));
    }

    let mut global = vec![0.0f64; dim];
    for f in &set.features {
        for (g, v) in global.iter_mut().zip(f) {
            *g += v;
        }
    }
    for g in &mut global {
        *g /= n as f64;
    }

    let mut sse = 0.0;
    let mut ssb = 0.0;
    for &c in &classes {
        let members: Vec<&Vec<f64>> = set
            .features
            .iter()
            .zip(&set.labels)
            .filter(|(_, l)| **l == c)
            .map(|(f, _)| f)
            .collect();
        let nc = members.len() as f64;
        let mut mu = vec![0.0f64; dim];
        for f in &members {
            for (m, v) in mu.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= nc;
        }
        for f in &members {
            sse += f
                .iter()
                .zip(&mu)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>();
        }
        ssb += nc
            * mu.iter()
                .zip(&global)
                .map(|(m, g)| (m - g) * (m - g))
                .sum::<f64>();
    }

    // classical decomposition self-check: SSE + SSB = total scatter
    let total: f64 = set
        .features
        .iter()
        .map(|f| {
            f.iter()
                .zip(&global)
                .map(|(v, g)| (v - g) * (v - g))
                .sum::<f64>()
        })
        .sum();
    let denom = total.abs().max(1.0);
    assert!(
        ((sse + ssb) - total).abs() / denom < 1e-6,
        "scatter decomposition violated: {sse} + {ssb} != {total}"
    );

    if ssb == 0.0 {
        return Err(TorsdError::Degenerate(
            "between-class scatter is zero; ratio undefined".into(),
        ));
    }
    Ok((sse, ssb, sse / ssb))
}

/// One row of the separability report.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityRow {
    pub depth: usize,
    pub sse: f64,
    pub ssb: f64,
    pub ratio: f64,
}

/// Per-depth separability of a trained model on a dataset.
pub fn separability_report<E: Element>(
    bundle: &mut ModelBundle<E>,
    ds: &LabeledDataset,
) -> Result<Vec<SeparabilityRow>> {
    let mut rows = Vec::new();
    for depth in 1..=bundle.backbone.depth_count() {
        let set = extract_depth_features(bundle, ds, depth)?;
        let (sse, ssb, ratio) = sse_ssb(&set)?;
        rows.push(SeparabilityRow {
            depth,
            sse,
            ssb,
            ratio,
        });
    }
    Ok(rows)
}

// ---- gradient checking -------------------------------------------------

/// Worst relative error of one named parameter group.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub group: String,
    pub max_rel_err: f64,
}

/// Outcome of a finite-difference sweep over every trainable parameter.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
    /// Parameters whose analytic gradient was non-finite (reported, not
    /// thrown).
    pub nonfinite: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.nonfinite.is_empty() && self.max_rel_err < tolerance
    }
}

/// Central-difference check of the full objective's analytic gradients.
///
/// The recorded detached-teacher values are replayed during perturbed
/// evaluations, so finite differences measure exactly the function the
/// analytic gradient differentiates. Only models below 10^4 parameters
/// are accepted; use double precision.
///
/// Parameters are jittered (seeded, restored afterwards) before checking:
/// zero-initialized biases put preactivations exactly on rectifier kinks
/// wherever an input patch is all zero, and no finite difference is
/// meaningful at a kink.
pub fn gradcheck(
    bundle: &mut ModelBundle<f64>,
    cfg: &TorsdConfig,
    batch: &TripletBatch<f64>,
) -> Result<GradcheckReport> {
    let n_params = bundle.param_count();
    if n_params >= 10_000 {
        return Err(TorsdError::Argument(format!(
            "gradcheck needs a model under 10^4 parameters, got {n_params}"
        )));
    }

    use rand::Rng;
    let mut jitter = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x6A77));
    let saved: Vec<(crate::nn::ParamId, Tensor<f64>)> = bundle
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.clone()))
        .collect();
    for (id, _) in &saved {
        for v in bundle.store.value_mut(*id).data_mut() {
            *v += jitter.gen_range(-0.01..0.01);
        }
    }
    let report = gradcheck_at_current_point(bundle, cfg, batch);
    for (id, value) in saved {
        *bundle.store.value_mut(id) = value;
    }
    report
}

fn gradcheck_at_current_point(
    bundle: &mut ModelBundle<f64>,
    cfg: &TorsdConfig,
    batch: &TripletBatch<f64>,
) -> Result<GradcheckReport> {
    // Analytic pass, recording teacher values.
    let mut cache = TeacherCache::record();
    let mut step = bundle.training_loss(batch, cfg, &mut cache, ForwardMode::TRAIN_FROZEN)?;
    step.graph.backward(step.root);
    let trainable: Vec<crate::nn::ParamId> = bundle
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut analytic = Vec::with_capacity(trainable.len());
    let mut nonfinite = Vec::new();
    for id in &trainable {
        let node = step.binding.node(*id);
        let g = step
            .graph
            .grad(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(bundle.store.value(*id).shape()));
        if !g.all_finite() {
            nonfinite.push(bundle.store.get(*id).name.clone());
        }
        analytic.push(g);
    }
    let teachers = cache.into_recorded();
    drop(step);

    let eval = |bundle: &mut ModelBundle<f64>| -> Result<(f64, u64)> {
        let mut replay = TeacherCache::replay(teachers.clone());
        let s = bundle.training_loss(batch, cfg, &mut replay, ForwardMode::TRAIN_FROZEN)?;
        Ok((s.breakdown.total, s.graph.relu_gate_hash()))
    };
    let (_, base_gates) = eval(bundle)?;

    let mut groups: Vec<GroupError> = Vec::new();
    let mut overall: f64 = 0.0;
    for (pi, id) in trainable.iter().enumerate() {
        let name = bundle.store.get(*id).name.clone();
        let group_name = name.rsplit_once('.').map(|(g, _)| g.to_string()).unwrap_or(name);
        let len = bundle.store.value(*id).len();
        let mut group_max: f64 = 0.0;
        for j in 0..len {
            let orig = bundle.store.value(*id).data()[j];
            // Shrink the step whenever the perturbation flips a rectifier
            // gate; finite differences are only meaningful on one linear
            // piece.
            let mut h = 1e-5 * orig.abs().max(1.0);
            let mut fd = f64::NAN;
            for _attempt in 0..4 {
                bundle.store.value_mut(*id).data_mut()[j] = orig + h;
                let (up, gates_up) = eval(bundle)?;
                bundle.store.value_mut(*id).data_mut()[j] = orig - h;
                let (down, gates_down) = eval(bundle)?;
                bundle.store.value_mut(*id).data_mut()[j] = orig;
                fd = (up - down) / (2.0 * h);
                if gates_up == base_gates && gates_down == base_gates {
                    break;
                }
                h /= 32.0;
            }
            let an = analytic[pi].data()[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            group_max = group_max.max(rel);
        }
        overall = overall.max(group_max);
        match groups.iter_mut().find(|g| g.group == group_name) {
            Some(g) => g.max_rel_err = g.max_rel_err.max(group_max),
            None => groups.push(GroupError {
                group: group_name,
                max_rel_err: group_max,
            }),
        }
    }
    Ok(GradcheckReport {
        groups,
        max_rel_err: overall,
        nonfinite,
    })
}

// ---- report emission ---------------------------------------------------

/// Writes `separability.csv`, one embedding CSV and scatter plot per
/// depth, the ratio-vs-depth line plot, and (when given) the evaluation
/// history. Re-running on identical inputs overwrites byte-identical
/// files.
pub fn emit_report(
    rows: &[SeparabilityRow],
    embeddings: &[(usize, Embedding2d)],
    eval_history: Option<&[(u64, f64, f64)]>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| TorsdError::io(out_dir, e))?;

    let mut sep = String::from("depth,sse,ssb,ratio\n");
    for r in rows {
        let _ = writeln!(sep, "{},{},{},{}", r.depth, r.sse, r.ssb, r.ratio);
    }
    let sep_path = out_dir.join("separability.csv");
    std::fs::write(&sep_path, sep).map_err(|e| TorsdError::io(&sep_path, e))?;

    let line_points: Vec<[f64; 2]> = rows
        .iter()
        .map(|r| [r.depth as f64, r.ratio])
        .collect();
    write_line_svg(
        &out_dir.join("separability_ratio.svg"),
        &line_points,
        "depth",
        "sse/ssb",
    )?;

    for (depth, emb) in embeddings {
        let csv_path = out_dir.join(format!("embeddings_depth{depth}.csv"));
        let mut text = String::from("x,y,label\n");
        for (pt, l) in emb.points.iter().zip(&emb.labels) {
            let _ = writeln!(text, "{},{},{}", pt[0], pt[1], l);
        }
        std::fs::write(&csv_path, text).map_err(|e| TorsdError::io(&csv_path, e))?;
        write_scatter_svg(
            &out_dir.join(format!("embeddings_depth{depth}.svg")),
            &emb.points,
            &emb.labels,
        )?;
    }

    if let Some(history) = eval_history {
        let path = out_dir.join("eval_history.csv");
        let mut text = String::from("epoch,top1,loss\n");
        for (e, acc, loss) in history {
            let _ = writeln!(text, "{e},{acc},{loss}");
        }
        std::fs::write(&path, text).map_err(|e| TorsdError::io(&path, e))?;
        let pts: Vec<[f64; 2]> = history.iter().map(|(e, a, _)| [*e as f64, *a]).collect();
        write_line_svg(&out_dir.join("accuracy.svg"), &pts, "epoch", "top1")?;
    }
    Ok(())
}

const SVG_SIZE: f64 = 480.0;
const SVG_MARGIN: f64 = 40.0;
const PALETTE: [&str; 10] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c",
    "#008080", "#9a6324",
];

fn svg_scale(points: &[[f64; 2]]) -> impl Fn(&[f64; 2]) -> (f64, f64) {
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p[0]);
        xmax = xmax.max(p[0]);
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    if !xmin.is_finite() || xmax - xmin < 1e-12 {
        xmin -= 1.0;
        xmax += 1.0;
    }
    if !ymin.is_finite() || ymax - ymin < 1e-12 {
        ymin -= 1.0;
        ymax += 1.0;
    }
    move |p: &[f64; 2]| {
        let x = SVG_MARGIN + (p[0] - xmin) / (xmax - xmin) * (SVG_SIZE - 2.0 * SVG_MARGIN);
        let y = SVG_SIZE - SVG_MARGIN - (p[1] - ymin) / (ymax - ymin) * (SVG_SIZE - 2.0 * SVG_MARGIN);
        (x, y)
    }
}

fn svg_header() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n<rect width=\"{0}\" height=\"{0}\" fill=\"white\"/>\n",
        SVG_SIZE
    )
}

fn write_scatter_svg(path: &Path, points: &[[f64; 2]], labels: &[usize]) -> Result<()> {
    let scale = svg_scale(points);
    let mut svg = svg_header();
    for (p, l) in points.iter().zip(labels) {
        let (x, y) = scale(p);
        let color = PALETTE[l % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.8\"/>"
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| TorsdError::io(path, e))
}

fn write_line_svg(path: &Path, points: &[[f64; 2]], xlabel: &str, ylabel: &str) -> Result<()> {
    let scale = svg_scale(points);
    let mut svg = svg_header();
    let mut d = String::new();
    for (i, p) in points.iter().enumerate() {
        let (x, y) = scale(p);
        let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
    }
    let _ = writeln!(
        svg,
        "<path d=\"{}\" stroke=\"#4363d8\" stroke-width=\"2\" fill=\"none\"/>",
        d.trim_end()
    );
    for p in points {
        let (x, y) = scale(p);
        let _ = writeln!(svg, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#4363d8\"/>");
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\">{}</text>",
        SVG_SIZE / 2.0,
        SVG_SIZE - 8.0,
        xlabel
    );
    let _ = writeln!(
        svg,
        "<text x=\"8\" y=\"{:.0}\" font-size=\"12\" transform=\"rotate(-90 12 {:.0})\">{}</text>",
        SVG_SIZE / 2.0,
        SVG_SIZE / 2.0,
        ylabel
    );
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| TorsdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use crate::config::default_paper_config;
    use crate::data::make_synthetic;

    fn feature_set(features: Vec<Vec<f64>>, labels: Vec<usize>) -> DepthFeatureSet {
        DepthFeatureSet {
            depth: 1,
            features,
            labels,
        }
    }

    #[test]
    fn worked_example_sse_4_ssb_100() {
        let set = feature_set(
            vec![
                vec![0.0, 0.0],
                vec![2.0, 0.0],
                vec![10.0, 0.0],
                vec![12.0, 0.0],
            ],
            vec![0, 0, 1, 1],
        );
        let (sse, ssb, ratio) = sse_ssb(&set).unwrap();
        assert_eq!(sse, 4.0);
        assert_eq!(ssb, 100.0);
        assert_eq!(ratio, 0.04);
    }

    #[test]
    fn samples_at_class_means_give_zero_ratio() {
        let set = feature_set(
            vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![5.0, 5.0]],
            vec![0, 0, 1],
        );
        let (sse, _, ratio) = sse_ssb(&set).unwrap();
        assert_eq!(sse, 0.0);
        assert_eq!(ratio, 0.0);
    }

    #[test]
    fn translation_invariance() {
        let base = vec![
            vec![0.3, -1.0],
            vec![0.5, -0.7],
            vec![4.0, 3.2],
            vec![4.4, 2.9],
        ];
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|f| f.iter().map(|v| v + 17.5).collect())
            .collect();
        let labels = vec![0, 0, 1, 1];
        let a = sse_ssb(&feature_set(base, labels.clone())).unwrap();
        let b = sse_ssb(&feature_set(shifted, labels)).unwrap();
        assert!((a.2 - b.2).abs() < 1e-9);
    }

    #[test]
    fn relabeling_permutation_invariance() {
        let feats = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![10.0, 0.0],
            vec![12.0, 0.0],
        ];
        let a = sse_ssb(&feature_set(feats.clone(), vec![0, 0, 1, 1])).unwrap();
        let b = sse_ssb(&feature_set(feats, vec![1, 1, 0, 0])).unwrap();
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn single_class_is_degenerate() {
        let set = feature_set(vec![vec![0.0], vec![1.0]], vec![0, 0]);
        assert!(matches!(sse_ssb(&set), Err(TorsdError::Degenerate(_))));
    }

    #[test]
    fn decomposition_holds_on_random_sets() {
        // the assert inside sse_ssb is the check; sweep it
        let mut state = 0xABCDu64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 10.0 - 5.0
        };
        for trial in 0..1000 {
            let n = 4 + (trial % 13);
            let dim = 1 + (trial % 5);
            let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| next()).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let _ = sse_ssb(&feature_set(feats, labels)).unwrap();
        }
    }

    #[test]
    fn depth_feature_extraction_shapes_and_determinism() {
        let ds = make_synthetic(3, 5, 32, 32, 3, 0.2, 1);
        let mut cfg = default_paper_config();
        cfg.embed_dim = 8;
        let mut bundle = ModelBundle::<f32>::new(&BackboneKind::toy(), 3, &cfg).unwrap();
        let set = extract_depth_features(&mut bundle, &ds, 4).unwrap();
        assert_eq!(set.features.len(), 15);
        assert_eq!(set.features[0].len(), 64);
        let again = extract_depth_features(&mut bundle, &ds, 4).unwrap();
        assert_eq!(set.features, again.features);
        assert!(matches!(
            extract_depth_features(&mut bundle, &ds, 5),
            Err(TorsdError::Argument(_))
        ));
    }

    #[test]
    fn emit_report_writes_documented_files_deterministically() {
        let rows = vec![
            SeparabilityRow { depth: 1, sse: 4.0, ssb: 100.0, ratio: 0.04 },
            SeparabilityRow { depth: 2, sse: 2.0, ssb: 100.0, ratio: 0.02 },
        ];
        let emb = Embedding2d {
            points: vec![[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]],
            labels: vec![0, 1, 1],
        };
        let dir = tempfile::tempdir().unwrap();
        let embeddings = vec![(1usize, emb.clone()), (2usize, emb)];
        emit_report(&rows, &embeddings, Some(&[(1, 0.5, 1.2)]), dir.path()).unwrap();
        let sep = std::fs::read_to_string(dir.path().join("separability.csv")).unwrap();
        assert!(sep.starts_with("depth,sse,ssb,ratio\n"));
        let e1 = std::fs::read_to_string(dir.path().join("embeddings_depth1.csv")).unwrap();
        assert!(e1.starts_with("x,y,label\n"));
        assert!(dir.path().join("embeddings_depth2.svg").exists());
        assert!(dir.path().join("separability_ratio.svg").exists());

        // byte-identical on rerun
        emit_report(&rows, &embeddings, Some(&[(1, 0.5, 1.2)]), dir.path()).unwrap();
        let sep2 = std::fs::read_to_string(dir.path().join("separability.csv")).unwrap();
        assert_eq!(sep, sep2);
    }
}
