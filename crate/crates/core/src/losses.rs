//! The complete training objective: triplet reinforcement on relation
//! values, deepest-to-shallow relation distillation, positive/negative
//! auxiliary task and logit-distillation losses, logit calibration, the
//! base classification loss, and the handcrafted-L2 ablation variant.
//!
//! Distillation teachers (the deepest depth) are detached through a
//! [`TeacherCache`], so no gradient reaches depth `k` through Eq-style
//! distillation terms. Per-depth sums reduce over pairs by mean, keeping
//! loss scale batch-size invariant.

use crate::config::TorsdConfig;
use crate::error::{Result, TorsdError};
use crate::graph::{softmax_rows, Graph, NodeId, TeacherCache};
use crate::heads::{AuxClassifierPair, RelationBundle};
use crate::backbone::TappedFeatures;
use crate::nn::Binding;
use crate::tensor::{Element, Tensor};

/// Every loss term of one training step (already weighted), plus their
/// sum. Disabled terms are exactly zero.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub triplet: f64,
    pub rd: f64,
    pub pat: f64,
    pub pld: f64,
    pub nat: f64,
    pub nld: f64,
    pub logit_cal: f64,
    pub handcrafted_rd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.task,
            self.triplet,
            self.rd,
            self.pat,
            self.pld,
            self.nat,
            self.nld,
            self.logit_cal,
            self.handcrafted_rd,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Column names of the metrics log.
    pub const CSV_HEADER: &'static str =
        "step,lr,task,triplet,rd,pat,pld,nat,nld,logit_cal,handcrafted_rd,total";

    pub fn csv_row(&self, step: u64, lr: f64) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            step,
            lr,
            self.task,
            self.triplet,
            self.rd,
            self.pat,
            self.pld,
            self.nat,
            self.nld,
            self.logit_cal,
            self.handcrafted_rd,
            self.total
        )
    }
}

/// Probability vector target mixing the anchor and negative labels
/// half-and-half.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Soft label of a negative pair: 0.5 at the anchor class, 0.5 at the
/// negative class.
pub fn make_soft_label(y_o: usize, y_n: usize, num_classes: usize) -> Result<SoftLabel> {
    if y_o >= num_classes || y_n >= num_classes {
        return Err(TorsdError::Argument(format!(
            "labels ({y_o}, {y_n}) out of range for {num_classes} classes"
        )));
    }
    if y_o == y_n {
        return Err(TorsdError::InvalidTriplet(format!(
            "negative shares the anchor label {y_o}"
        )));
    }
    let mut probs = vec![0.0; num_classes];
    probs[y_o] = 0.5;
    probs[y_n] = 0.5;
    Ok(SoftLabel { probs })
}

/// One-hot target table for a label slice.
pub fn one_hot_table<E: Element>(labels: &[usize], num_classes: usize) -> Result<Tensor<E>> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (r, l) in labels.iter().enumerate() {
        if *l >= num_classes {
            return Err(TorsdError::Argument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        t.data_mut()[r * num_classes + l] = E::ONE;
    }
    Ok(t)
}

/// Soft-label table for negative pairs.
pub fn soft_label_table<E: Element>(
    y_o: &[usize],
    y_n: &[usize],
    num_classes: usize,
) -> Result<Tensor<E>> {
    let mut t = Tensor::zeros(&[y_o.len(), num_classes]);
    for r in 0..y_o.len() {
        let sl = make_soft_label(y_o[r], y_n[r], num_classes)?;
        for (c, p) in sl.probs().iter().enumerate() {
            t.data_mut()[r * num_classes + c] = E::from_f64(*p);
        }
    }
    Ok(t)
}

/// Anchor/positive/negative labels in triple-major batch order.
pub fn interleave_labels(y_o: &[usize], y_p: &[usize], y_n: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(3 * y_o.len());
    for t in 0..y_o.len() {
        out.push(y_o[t]);
        out.push(y_p[t]);
        out.push(y_n[t]);
    }
    out
}

/// Soft-target cross entropy, mean over rows.
pub fn cross_entropy_soft<E: Element>(
    g: &mut Graph<E>,
    logits: NodeId,
    target: &Tensor<E>,
) -> Result<NodeId> {
    g.cross_entropy_soft(logits, target)
}

/// KL divergence `D(p_T || q_T)` with the teacher detached and both sides
/// softened by `temperature`; mean over rows.
pub fn kl_divergence<E: Element>(
    g: &mut Graph<E>,
    student_logits: NodeId,
    teacher_logits: NodeId,
    temperature: f64,
    teachers: &mut TeacherCache<E>,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(TorsdError::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let t_node = teachers.detach(g, teacher_logits);
    let probs = softmax_rows(g.value(t_node), E::from_f64(1.0 / temperature));
    g.kl_mean(student_logits, &probs, E::from_f64(temperature))
}

/// Triplet hinge on relation values:
/// `alpha * sum_i mean_pairs max(R_p^i - R_n^i + margin, 0)`.
pub fn triplet_loss<E: Element>(
    g: &mut Graph<E>,
    bundle: &RelationBundle,
    alpha: f64,
    margin: f64,
) -> Result<NodeId> {
    if bundle.depth_count() == 0 {
        return Err(TorsdError::State(
            "triplet loss needs relation values; the bundle is empty".into(),
        ));
    }
    let mut terms = Vec::with_capacity(bundle.depth_count());
    for d in 0..bundle.depth_count() {
        let diff = g.sub(bundle.r_p[d], bundle.r_n[d])?;
        let shifted = g.affine(diff, E::ONE, E::from_f64(margin));
        let hinge = g.relu(shifted);
        terms.push((g.mean_all(hinge), E::from_f64(alpha)));
    }
    Ok(g.weighted_sum(&terms))
}

/// Relation distillation from the deepest depth to each shallow depth:
/// `beta * sum_{i<k} mean_pairs [(R_p^i - R_p^k)^2 + (R_n^i - R_n^k)^2]`
/// with the depth-k relations detached.
pub fn relation_distill_loss<E: Element>(
    g: &mut Graph<E>,
    bundle: &RelationBundle,
    beta: f64,
    teachers: &mut TeacherCache<E>,
) -> Result<NodeId> {
    let k = bundle.depth_count();
    if k < 2 {
        return Err(TorsdError::config(
            "enable_rn",
            format!("relation distillation needs k >= 2 depths, have {k}"),
        ));
    }
    let teach_p = teachers.detach(g, bundle.r_p[k - 1]);
    let teach_n = teachers.detach(g, bundle.r_n[k - 1]);
    let w = E::from_f64(beta);
    let mut terms = Vec::with_capacity(2 * (k - 1));
    for d in 0..k - 1 {
        let dp = g.sub(bundle.r_p[d], teach_p)?;
        let sp = g.mul(dp, dp)?;
        terms.push((g.mean_all(sp), w));
        let dn = g.sub(bundle.r_n[d], teach_n)?;
        let sn = g.mul(dn, dn)?;
        terms.push((g.mean_all(sn), w));
    }
    Ok(g.weighted_sum(&terms))
}

/// Positive auxiliary task loss over all k depths:
/// `gamma_p (1-lambda) * sum_i mean_pairs CE(pos_head_i(Z_p^i), y_p)`.
pub fn pat_loss<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    z_p: &[NodeId],
    aux: &[AuxClassifierPair],
    y_p: &[usize],
    num_classes: usize,
    gamma_p: f64,
    lambda_mix: f64,
) -> Result<NodeId> {
    check_aux_inputs(z_p, aux)?;
    let target = one_hot_table::<E>(y_p, num_classes)?;
    let w = E::from_f64(gamma_p * (1.0 - lambda_mix));
    let mut terms = Vec::with_capacity(z_p.len());
    for (z, pair) in z_p.iter().zip(aux) {
        let logits = pair.pos.forward(g, bind, *z)?;
        terms.push((g.cross_entropy_soft(logits, &target)?, w));
    }
    Ok(g.weighted_sum(&terms))
}

/// Positive logit distillation: shallow positive auxiliary outputs chase
/// the detached deepest output.
/// `gamma_p lambda * sum_{i<k} D_KL(aux_i, aux_k)`.
#[allow(clippy::too_many_arguments)]
pub fn pld_loss<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    z_p: &[NodeId],
    aux: &[AuxClassifierPair],
    gamma_p: f64,
    lambda_mix: f64,
    temperature: f64,
    teachers: &mut TeacherCache<E>,
) -> Result<NodeId> {
    check_aux_inputs(z_p, aux)?;
    let k = z_p.len();
    if k < 2 {
        return Err(TorsdError::config(
            "enable_ac",
            format!("logit distillation needs k >= 2 depths, have {k}"),
        ));
    }
    let teacher = aux[k - 1].pos.forward(g, bind, z_p[k - 1])?;
    let w = E::from_f64(gamma_p * lambda_mix);
    let mut terms = Vec::with_capacity(k - 1);
    for d in 0..k - 1 {
        let student = aux[d].pos.forward(g, bind, z_p[d])?;
        terms.push((kl_divergence(g, student, teacher, temperature, teachers)?, w));
    }
    Ok(g.weighted_sum(&terms))
}

/// Negative auxiliary task loss against the half/half soft label:
/// `gamma_n (1-lambda) * sum_i mean_pairs CE(neg_head_i(Z_n^i), y*_n)`.
#[allow(clippy::too_many_arguments)]
pub fn nat_loss<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    z_n: &[NodeId],
    aux: &[AuxClassifierPair],
    y_o: &[usize],
    y_n: &[usize],
    num_classes: usize,
    gamma_n: f64,
    lambda_mix: f64,
) -> Result<NodeId> {
    check_aux_inputs(z_n, aux)?;
    let target = soft_label_table::<E>(y_o, y_n, num_classes)?;
    let w = E::from_f64(gamma_n * (1.0 - lambda_mix));
    let mut terms = Vec::with_capacity(z_n.len());
    for (z, pair) in z_n.iter().zip(aux) {
        let logits = pair.neg.forward(g, bind, *z)?;
        terms.push((g.cross_entropy_soft(logits, &target)?, w));
    }
    Ok(g.weighted_sum(&terms))
}

/// Negative logit distillation, mirroring [`pld_loss`] on negative heads:
/// `gamma_n lambda * sum_{i<k} D_KL(aux_i, aux_k)`.
#[allow(clippy::too_many_arguments)]
pub fn nld_loss<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    z_n: &[NodeId],
    aux: &[AuxClassifierPair],
    gamma_n: f64,
    lambda_mix: f64,
    temperature: f64,
    teachers: &mut TeacherCache<E>,
) -> Result<NodeId> {
    check_aux_inputs(z_n, aux)?;
    let k = z_n.len();
    if k < 2 {
        return Err(TorsdError::config(
            "enable_ac",
            format!("logit distillation needs k >= 2 depths, have {k}"),
        ));
    }
    let teacher = aux[k - 1].neg.forward(g, bind, z_n[k - 1])?;
    let w = E::from_f64(gamma_n * lambda_mix);
    let mut terms = Vec::with_capacity(k - 1);
    for d in 0..k - 1 {
        let student = aux[d].neg.forward(g, bind, z_n[d])?;
        terms.push((kl_divergence(g, student, teacher, temperature, teachers)?, w));
    }
    Ok(g.weighted_sum(&terms))
}

/// Logit calibration: pushes intra-class logit relations below
/// inter-class ones, literally
/// `sigma * mean_pairs (rel(o,p) - rel(o,n))`. Sign-unconstrained.
pub fn logit_calibration_loss<E: Element>(
    g: &mut Graph<E>,
    bundle: &RelationBundle,
    sigma: f64,
) -> Result<NodeId> {
    let (rp, rn) = match (bundle.logit_r_p, bundle.logit_r_n) {
        (Some(p), Some(n)) => (p, n),
        _ => {
            return Err(TorsdError::State(
                "logit calibration needs logit relations in the bundle".into(),
            ))
        }
    };
    let diff = g.sub(rp, rn)?;
    let m = g.mean_all(diff);
    Ok(g.affine(m, E::from_f64(sigma), E::ZERO))
}

/// Base classification loss: mean cross entropy of every image in the
/// batch (all three roles) against its own hard label.
pub fn task_loss<E: Element>(
    g: &mut Graph<E>,
    logits: NodeId,
    labels: &[usize],
    num_classes: usize,
) -> Result<NodeId> {
    let shape = g.value(logits).shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != num_classes {
        return Err(TorsdError::shape(
            format!("[{}, {}]", labels.len(), num_classes),
            format!("{:?}", shape),
        ));
    }
    let target = one_hot_table::<E>(labels, num_classes)?;
    g.cross_entropy_soft(logits, &target)
}

/// Handcrafted relation distillation: relations are L2 distances between
/// global-average-pooled features, distilled deepest-to-shallow like
/// [`relation_distill_loss`]. The relation-network-free ablation.
pub fn handcrafted_rd_loss<E: Element>(
    g: &mut Graph<E>,
    features: &TappedFeatures,
    beta: f64,
    teachers: &mut TeacherCache<E>,
) -> Result<NodeId> {
    let k = features.taps.len();
    if k < 2 {
        return Err(TorsdError::config(
            "enable_handcrafted_rd",
            format!("relation distillation needs k >= 2 depths, have {k}"),
        ));
    }
    let mut r_p = Vec::with_capacity(k);
    let mut r_n = Vec::with_capacity(k);
    for d in 0..k {
        let gap_o = g.global_avg_pool(features.f_o[d])?;
        let gap_p = g.global_avg_pool(features.f_p[d])?;
        let gap_n = g.global_avg_pool(features.f_n[d])?;
        r_p.push(l2_rows(g, gap_o, gap_p)?);
        r_n.push(l2_rows(g, gap_o, gap_n)?);
    }
    let teach_p = teachers.detach(g, r_p[k - 1]);
    let teach_n = teachers.detach(g, r_n[k - 1]);
    let w = E::from_f64(beta);
    let mut terms = Vec::with_capacity(2 * (k - 1));
    for d in 0..k - 1 {
        let dp = g.sub(r_p[d], teach_p)?;
        let sp = g.mul(dp, dp)?;
        terms.push((g.mean_all(sp), w));
        let dn = g.sub(r_n[d], teach_n)?;
        let sn = g.mul(dn, dn)?;
        terms.push((g.mean_all(sn), w));
    }
    Ok(g.weighted_sum(&terms))
}

/// Row-wise L2 distance between two `[P, C]` tables -> `[P]`.
fn l2_rows<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let rs = g.row_sum(sq)?;
    Ok(g.sqrt(rs))
}

fn check_aux_inputs(z: &[NodeId], aux: &[AuxClassifierPair]) -> Result<()> {
    if z.is_empty() {
        return Err(TorsdError::config(
            "enable_ac",
            "auxiliary losses need projected embeddings; enable_rn must be on",
        ));
    }
    if z.len() != aux.len() {
        return Err(TorsdError::config(
            "enable_ac",
            format!("{} embeddings vs {} auxiliary heads", z.len(), aux.len()),
        ));
    }
    Ok(())
}

/// Batch-level inputs for assembling the full objective.
pub struct LossInputs<'a> {
    pub features: &'a TappedFeatures,
    pub bundle: &'a RelationBundle,
    pub aux: &'a [AuxClassifierPair],
    pub y_o: &'a [usize],
    pub y_p: &'a [usize],
    pub y_n: &'a [usize],
    pub num_classes: usize,
}

/// Assembles the total objective according to the toggles:
/// `task + [rn](triplet + rd) + [ac](pat + pld + nat + nld) +
/// [ld] logit_cal + [hrd] handcrafted_rd`. Disabled terms are skipped
/// entirely (not computed and zeroed), so the breakdown records exact
/// zeros for them.
pub fn total_loss<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    inputs: &LossInputs<'_>,
    cfg: &TorsdConfig,
    teachers: &mut TeacherCache<E>,
) -> Result<(NodeId, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let labels = interleave_labels(inputs.y_o, inputs.y_p, inputs.y_n);
    let task = task_loss(g, inputs.features.logits, &labels, inputs.num_classes)?;
    breakdown.task = g.scalar(task).to_f64();
    let mut terms: Vec<(NodeId, E)> = vec![(task, E::ONE)];

    if cfg.enable_rn {
        let triplet = triplet_loss(g, inputs.bundle, cfg.alpha, cfg.margin)?;
        breakdown.triplet = g.scalar(triplet).to_f64();
        terms.push((triplet, E::ONE));
        let rd = relation_distill_loss(g, inputs.bundle, cfg.beta, teachers)?;
        breakdown.rd = g.scalar(rd).to_f64();
        terms.push((rd, E::ONE));
    }
    if cfg.enable_ac {
        let pat = pat_loss(
            g,
            bind,
            &inputs.bundle.z_p,
            inputs.aux,
            inputs.y_p,
            inputs.num_classes,
            cfg.gamma_p,
            cfg.lambda_mix,
        )?;
        breakdown.pat = g.scalar(pat).to_f64();
        terms.push((pat, E::ONE));
        let pld = pld_loss(
            g,
            bind,
            &inputs.bundle.z_p,
            inputs.aux,
            cfg.gamma_p,
            cfg.lambda_mix,
            cfg.kl_temperature,
            teachers,
        )?;
        breakdown.pld = g.scalar(pld).to_f64();
        terms.push((pld, E::ONE));
        let nat = nat_loss(
            g,
            bind,
            &inputs.bundle.z_n,
            inputs.aux,
            inputs.y_o,
            inputs.y_n,
            inputs.num_classes,
            cfg.gamma_n,
            cfg.lambda_mix,
        )?;
        breakdown.nat = g.scalar(nat).to_f64();
        terms.push((nat, E::ONE));
        let nld = nld_loss(
            g,
            bind,
            &inputs.bundle.z_n,
            inputs.aux,
            cfg.gamma_n,
            cfg.lambda_mix,
            cfg.kl_temperature,
            teachers,
        )?;
        breakdown.nld = g.scalar(nld).to_f64();
        terms.push((nld, E::ONE));
    }
    if cfg.enable_ld {
        let cal = logit_calibration_loss(g, inputs.bundle, cfg.sigma)?;
        breakdown.logit_cal = g.scalar(cal).to_f64();
        terms.push((cal, E::ONE));
    }
    if cfg.enable_handcrafted_rd {
        let hrd = handcrafted_rd_loss(g, inputs.features, cfg.beta, teachers)?;
        breakdown.handcrafted_rd = g.scalar(hrd).to_f64();
        terms.push((hrd, E::ONE));
    }

    // With everything off the total IS the task node, bit for bit.
    let total = if terms.len() == 1 {
        terms[0].0
    } else {
        g.weighted_sum(&terms)
    };
    breakdown.total = g.scalar(total).to_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TeacherCache;
    use crate::heads::RelationBundle;

    fn bundle_from_scalars(
        g: &mut Graph<f64>,
        r_p: &[Vec<f64>],
        r_n: &[Vec<f64>],
    ) -> RelationBundle {
        let mut b = RelationBundle::empty();
        for (p, n) in r_p.iter().zip(r_n) {
            b.r_p.push(g.leaf(Tensor::from_vec(&[p.len()], p.clone())));
            b.r_n.push(g.leaf(Tensor::from_vec(&[n.len()], n.clone())));
        }
        b
    }

    #[test]
    fn triplet_hinge_inactive_when_separated() {
        let mut g = Graph::new();
        let b = bundle_from_scalars(&mut g, &[vec![0.2]], &[vec![1.5]]);
        let l = triplet_loss(&mut g, &b, 1.0, 1.0).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn triplet_hinge_arithmetic() {
        let mut g = Graph::new();
        let b = bundle_from_scalars(&mut g, &[vec![1.0]], &[vec![0.5]]);
        let l = triplet_loss(&mut g, &b, 0.01, 1.0).unwrap();
        assert!((g.scalar(l) - 0.015).abs() < 1e-12);
    }

    #[test]
    fn triplet_equal_relations_leave_margin() {
        let mut g = Graph::new();
        let b = bundle_from_scalars(&mut g, &[vec![0.7, -2.0]], &[vec![0.7, -2.0]]);
        let l = triplet_loss(&mut g, &b, 1.0, 1.0).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_empty_bundle_is_state_error() {
        let mut g: Graph<f64> = Graph::new();
        let b = RelationBundle::empty();
        assert!(matches!(
            triplet_loss(&mut g, &b, 1.0, 1.0),
            Err(TorsdError::State(_))
        ));
    }

    #[test]
    fn rd_zero_when_depths_agree() {
        let mut g = Graph::new();
        let b = bundle_from_scalars(
            &mut g,
            &[vec![1.0, 2.0], vec![1.0, 2.0]],
            &[vec![0.3, 0.4], vec![0.3, 0.4]],
        );
        let mut cache = TeacherCache::record();
        let l = relation_distill_loss(&mut g, &b, 0.01, &mut cache).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn rd_arithmetic_and_nonnegativity() {
        let mut g = Graph::new();
        let b = bundle_from_scalars(&mut g, &[vec![1.0], vec![2.0]], &[vec![0.0], vec![0.0]]);
        let mut cache = TeacherCache::record();
        let l = relation_distill_loss(&mut g, &b, 0.01, &mut cache).unwrap();
        assert!((g.scalar(l) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn rd_gradient_stops_at_the_teacher() {
        // d/dR_p^1 = 2*beta*(R_p^1 - R_p^k); d/dR_p^k = 0 exactly.
        let beta = 0.25;
        let (rp1, rpk) = (1.5f64, -0.5f64);
        let mut g = Graph::new();
        let b = bundle_from_scalars(&mut g, &[vec![rp1], vec![rpk]], &[vec![0.0], vec![0.0]]);
        let mut cache = TeacherCache::record();
        let l = relation_distill_loss(&mut g, &b, beta, &mut cache).unwrap();
        g.backward(l);
        let g1 = g.grad(b.r_p[0]).unwrap().item();
        assert!((g1 - 2.0 * beta * (rp1 - rpk)).abs() < 1e-12);
        assert!(g.grad(b.r_p[1]).is_none(), "teacher leaf must get no gradient");

        // Finite differences with the teacher replayed: perturbing the
        // deepest relation leaves the loss unchanged.
        let teachers = cache.into_recorded();
        let eval = |rpk: f64| {
            let mut g = Graph::new();
            let b = bundle_from_scalars(&mut g, &[vec![rp1], vec![rpk]], &[vec![0.0], vec![0.0]]);
            let mut replay = TeacherCache::replay(teachers.clone());
            let l = relation_distill_loss(&mut g, &b, beta, &mut replay).unwrap();
            g.scalar(l)
        };
        let h = 1e-5;
        let fd = (eval(rpk + h) - eval(rpk - h)) / (2.0 * h);
        assert!(fd.abs() < 1e-8, "teacher-path FD gradient {fd}");
    }

    #[test]
    fn soft_label_is_half_half() {
        let sl = make_soft_label(2, 5, 10).unwrap();
        assert_eq!(sl.probs()[2], 0.5);
        assert_eq!(sl.probs()[5], 0.5);
        assert_eq!(sl.probs().iter().sum::<f64>(), 1.0);
        assert!(matches!(
            make_soft_label(3, 3, 10),
            Err(TorsdError::InvalidTriplet(_))
        ));
    }

    #[test]
    fn kl_detaches_its_teacher() {
        let mut g = Graph::new();
        let student = g.leaf(Tensor::from_vec(&[1, 2], vec![0.1, -0.2]));
        let teacher = g.leaf(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]));
        let mut cache = TeacherCache::record();
        let kl = kl_divergence(&mut g, student, teacher, 1.0, &mut cache).unwrap();
        g.backward(kl);
        assert!(g.grad(student).is_some());
        assert!(g.grad(teacher).is_none());
    }

    #[test]
    fn kl_value_against_hand_computation() {
        // teacher probs (0.5,0.5), student probs (0.25,0.75), T=1
        let mut g = Graph::new();
        let student = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, (3.0f64).ln()]));
        let teacher = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let mut cache = TeacherCache::record();
        let kl = kl_divergence(&mut g, student, teacher, 1.0, &mut cache).unwrap();
        let expect = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((g.scalar(kl) - expect).abs() < 1e-12);
        assert!((expect - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_nonnegative_over_random_pairs() {
        let mut state = 0x1234_5678_u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0
        };
        for _ in 0..1000 {
            let s: Vec<f64> = (0..5).map(|_| next()).collect();
            let t: Vec<f64> = (0..5).map(|_| next()).collect();
            let mut g = Graph::new();
            let sn = g.constant(Tensor::from_vec(&[1, 5], s));
            let tn = g.constant(Tensor::from_vec(&[1, 5], t));
            let mut cache = TeacherCache::record();
            let kl = kl_divergence(&mut g, sn, tn, 2.0, &mut cache).unwrap();
            assert!(g.scalar(kl) >= -1e-12);
        }
    }

    #[test]
    fn prefactors_from_the_best_setting() {
        let cfg = crate::config::default_paper_config();
        let pat_w = cfg.gamma_p * (1.0 - cfg.lambda_mix);
        let pld_w = cfg.gamma_p * cfg.lambda_mix;
        let nat_w = cfg.gamma_n * (1.0 - cfg.lambda_mix);
        let nld_w = cfg.gamma_n * cfg.lambda_mix;
        assert!((pat_w - 0.04).abs() < 1e-12);
        assert!((pld_w - 0.16).abs() < 1e-12);
        assert!((nat_w - 0.01).abs() < 1e-12);
        assert!((nld_w - 0.04).abs() < 1e-12);
        // lambda trades task against distillation at total weight gamma
        assert!((pat_w + pld_w - cfg.gamma_p).abs() < 1e-12);
        assert!((nat_w + nld_w - cfg.gamma_n).abs() < 1e-12);
    }

    #[test]
    fn task_loss_uniform_logits_is_ln_classes() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(&[6, 10]));
        let labels = vec![0usize, 1, 2, 3, 4, 5];
        let l = task_loss(&mut g, logits, &labels, 10).unwrap();
        assert!((g.scalar(l) - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn task_loss_permutation_invariant() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let labels = [2usize, 0, 1];
        let eval = |perm: &[usize]| {
            let mut g = Graph::new();
            let mut rows = Vec::new();
            for &p in perm {
                rows.extend_from_slice(&data[p * 4..(p + 1) * 4]);
            }
            let logits = g.constant(Tensor::from_vec(&[3, 4], rows));
            let lab: Vec<usize> = perm.iter().map(|p| labels[*p]).collect();
            let l = task_loss(&mut g, logits, &lab, 4).unwrap();
            g.scalar(l)
        };
        assert!((eval(&[0, 1, 2]) - eval(&[2, 0, 1])).abs() < 1e-12);
    }

    #[test]
    fn task_loss_peaked_logits_near_zero() {
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[2, 3]);
        t.data_mut()[0] = 50.0;
        t.data_mut()[3 + 2] = 50.0;
        let logits = g.constant(t);
        let l = task_loss(&mut g, logits, &[0, 2], 3).unwrap();
        assert!(g.scalar(l) < 1e-9);
    }

    #[test]
    fn logit_calibration_antisymmetry_and_zero() {
        let mut g = Graph::new();
        let mut b = RelationBundle::empty();
        let p = g.leaf(Tensor::from_vec(&[2], vec![0.4, -0.3]));
        let n = g.leaf(Tensor::from_vec(&[2], vec![-0.1, 0.9]));
        b.logit_r_p = Some(p);
        b.logit_r_n = Some(n);
        let l = logit_calibration_loss(&mut g, &b, 0.01).unwrap();
        let v = g.scalar(l);
        // swapped
        let mut b2 = RelationBundle::empty();
        b2.logit_r_p = Some(n);
        b2.logit_r_n = Some(p);
        let l2 = logit_calibration_loss(&mut g, &b2, 0.01).unwrap();
        assert!((v + g.scalar(l2)).abs() < 1e-12);
        // identical inputs -> 0
        let mut b3 = RelationBundle::empty();
        b3.logit_r_p = Some(p);
        b3.logit_r_n = Some(p);
        let l3 = logit_calibration_loss(&mut g, &b3, 0.01).unwrap();
        assert_eq!(g.scalar(l3), 0.0);
    }
}
