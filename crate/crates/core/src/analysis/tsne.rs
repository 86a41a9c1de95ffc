//! Exact (O(n^2)) t-SNE for the feature-space visualizations.
//!
//! Standard recipe: per-point bandwidths from a binary search matching the
//! target perplexity, symmetrized affinities, early exaggeration for the
//! first quarter of the run, gradient descent with momentum switching
//! 0.5 -> 0.8. Layouts are seeded and deterministic; only their clustering
//! quality is contractual, never exact coordinates.

use crate::error::{Result, TorsdError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// 2-D layout of one depth's features.
#[derive(Clone, Debug)]
pub struct Embedding2d {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

/// t-SNE hyperparameters. Defaults: perplexity 30, 1000 iterations.
#[derive(Clone, Debug)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
        }
    }
}

/// Embeds feature vectors into 2-D. Needs at least 5 samples; the
/// perplexity is clamped to what the sample count supports.
pub fn embed_2d(
    features: &[Vec<f64>],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    opts: &TsneOptions,
) -> Result<Embedding2d> {
    let n = features.len();
    if n < 5 {
        return Err(TorsdError::Argument(format!(
            "t-SNE needs at least 5 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(TorsdError::shape(
            format!("{n} labels"),
            format!("{}", labels.len()),
        ));
    }
    let perplexity = opts.perplexity.min(((n - 1) as f64) / 3.0).max(1.0);

    // Pairwise squared distances in feature space.
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut s = 0.0;
            for (a, b) in features[i].iter().zip(&features[j]) {
                let d = a - b;
                s += d * d;
            }
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }

    // Conditional affinities via per-point bandwidth search.
    let target_entropy = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let (mut lo, mut hi) = (1e-20f64, 1e20f64);
        let mut beta = 1.0f64;
        for _ in 0..64 {
            let mut sum = 0.0;
            for j in 0..n {
                if j != i {
                    p[i * n + j] = (-beta * d2[i * n + j]).exp();
                    sum += p[i * n + j];
                }
            }
            let sum = sum.max(1e-300);
            let mut entropy = 0.0;
            for j in 0..n {
                if j != i {
                    let pij = p[i * n + j] / sum;
                    if pij > 1e-300 {
                        entropy -= pij * pij.ln();
                    }
                    p[i * n + j] = pij;
                }
            }
            if (entropy - target_entropy).abs() < 1e-5 {
                break;
            }
            if entropy > target_entropy {
                lo = beta;
                beta = if hi >= 1e20 { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = if lo <= 1e-20 { beta / 2.0 } else { (beta + lo) / 2.0 };
            }
        }
    }

    // Symmetrize and floor.
    let mut pj = vec![0.0f64; n * n];
    let mut psum = 0.0;
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = (p[i * n + j] + p[j * n + i]) / (2.0 * n as f64);
            psum += pj[i * n + j];
        }
    }
    for v in &mut pj {
        *v = (*v / psum).max(1e-12);
    }

    // Gradient descent on the layout.
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0) * 1e-4,
                rng.gen_range(-1.0..1.0) * 1e-4,
            ]
        })
        .collect();
    let mut vel = vec![[0.0f64; 2]; n];
    let exaggeration_until = opts.iterations / 4;
    let mut q = vec![0.0f64; n * n];
    for iter in 0..opts.iterations {
        let exaggeration = if iter < exaggeration_until { 12.0 } else { 1.0 };
        let momentum = if iter < exaggeration_until { 0.5 } else { 0.8 };

        let mut qsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = w;
                q[j * n + i] = w;
                qsum += 2.0 * w;
            }
        }
        let qsum = qsum.max(1e-300);

        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let qij = (w / qsum).max(1e-12);
                let coeff = 4.0 * (exaggeration * pj[i * n + j] - qij) * w;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                vel[i][k] = momentum * vel[i][k] - opts.learning_rate * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        // keep the layout centered
        let (mut cx, mut cy) = (0.0, 0.0);
        for pt in &y {
            cx += pt[0];
            cy += pt[1];
        }
        let (cx, cy) = (cx / n as f64, cy / n as f64);
        for pt in &mut y {
            pt[0] -= cx;
            pt[1] -= cy;
        }
    }

    Ok(Embedding2d {
        points: y,
        labels: labels.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Mean silhouette score of a labeled 2-D layout.
    fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
        let n = points.len();
        let dist = |a: &[f64; 2], b: &[f64; 2]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        let classes: Vec<usize> = {
            let mut c: Vec<usize> = labels.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        };
        let mut total = 0.0;
        for i in 0..n {
            let mut within = Vec::new();
            let mut best_other = f64::INFINITY;
            for &c in &classes {
                let ds: Vec<f64> = (0..n)
                    .filter(|j| *j != i && labels[*j] == c)
                    .map(|j| dist(&points[i], &points[j]))
                    .collect();
                if ds.is_empty() {
                    continue;
                }
                let mean = ds.iter().sum::<f64>() / ds.len() as f64;
                if c == labels[i] {
                    within.push(mean);
                } else {
                    best_other = best_other.min(mean);
                }
            }
            let a = within.first().copied().unwrap_or(0.0);
            let b = best_other;
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    fn blob(cx: f64, cy: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                vec![
                    cx + rng.gen_range(-0.5..0.5),
                    cy + rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect()
    }

    #[test]
    fn cardinality_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut feats = blob(0.0, 0.0, 6, &mut rng);
        feats.extend(blob(5.0, 5.0, 6, &mut rng));
        let labels = vec![0; 6].into_iter().chain(vec![1; 6]).collect::<Vec<_>>();
        let emb = embed_2d(
            &feats,
            &labels,
            &mut ChaCha8Rng::seed_from_u64(1),
            &TsneOptions::default(),
        )
        .unwrap();
        assert_eq!(emb.points.len(), 12);
    }

    #[test]
    fn fixed_seed_fixed_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = blob(0.0, 0.0, 8, &mut rng);
        let labels = vec![0usize; 8];
        let opts = TsneOptions {
            iterations: 200,
            ..TsneOptions::default()
        };
        let a = embed_2d(&feats, &labels, &mut ChaCha8Rng::seed_from_u64(9), &opts).unwrap();
        let b = embed_2d(&feats, &labels, &mut ChaCha8Rng::seed_from_u64(9), &opts).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn too_few_samples_rejected() {
        let feats = vec![vec![0.0; 3]; 4];
        let labels = vec![0usize; 4];
        assert!(embed_2d(
            &feats,
            &labels,
            &mut ChaCha8Rng::seed_from_u64(0),
            &TsneOptions::default()
        )
        .is_err());
    }

    #[test]
    fn far_blobs_recover_with_high_silhouette() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut feats = blob(0.0, 0.0, 20, &mut rng);
        feats.extend(blob(20.0, 20.0, 20, &mut rng));
        let labels: Vec<usize> = vec![0; 20].into_iter().chain(vec![1; 20]).collect();
        let emb = embed_2d(
            &feats,
            &labels,
            &mut ChaCha8Rng::seed_from_u64(7),
            &TsneOptions::default(),
        )
        .unwrap();
        let s = silhouette(&emb.points, &emb.labels);
        assert!(s > 0.5, "silhouette {s}");
    }
}
