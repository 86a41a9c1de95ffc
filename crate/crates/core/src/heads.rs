//! Training-time relation machinery: per-depth relation networks
//! (feature projection + relational interaction), auxiliary classifier
//! pairs on the projected embeddings, and the logit-level relation head.
//!
//! Every head is depth-independent with its own parameters and is dropped
//! wholesale at inference.

use crate::backbone::TappedFeatures;
use crate::error::{Result, TorsdError};
use crate::graph::{Graph, NodeId};
use crate::nn::{Binding, Conv2d, Linear, ParamStore};
use crate::tensor::Element;
use rand_chacha::ChaCha8Rng;

/// Channel-concatenates two same-shape feature maps as `[f_a; f_b]`.
/// Anchor-first ordering is part of the contract.
pub fn concat_pair<E: Element>(g: &mut Graph<E>, f_a: NodeId, f_b: NodeId) -> Result<NodeId> {
    g.concat_axis1(f_a, f_b)
}

/// Two fully connected layers mapping an embedding to one scalar
/// relation value per row.
pub struct Rib {
    fc1: Linear,
    fc2: Linear,
}

impl Rib {
    fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = (in_dim / 2).max(1);
        Rib {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, 1, rng),
        }
    }

    /// `[P, in_dim] -> [P]` scalar relations.
    fn forward<E: Element>(&self, g: &mut Graph<E>, bind: &Binding, z: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, bind, z)?;
        let h = g.relu(h);
        let out = self.fc2.forward(g, bind, h)?;
        let rows = g.value(out).shape()[0];
        g.reshape(out, &[rows])
    }
}

/// One depth's relation network: a convolutional feature projection
/// (stride-2 stack collapsing the pair map to a D-vector) followed by the
/// relational interaction block.
pub struct RelationNetwork {
    /// 1-based depth index.
    pub depth: usize,
    fpl_convs: Vec<Conv2d>,
    fpl_proj: Conv2d,
    rib: Rib,
    pair_channels: usize,
    embed_dim: usize,
}

impl RelationNetwork {
    /// `channels`/`height`/`width` describe one block feature map (the
    /// pair map doubles the channels).
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        depth: usize,
        channels: usize,
        height: usize,
        width: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pair_channels = 2 * channels;
        let mut convs = Vec::new();
        let (mut h, mut w) = (height, width);
        let mut idx = 0;
        while h.min(w) > 2 {
            convs.push(Conv2d::new(
                store,
                &format!("rn.{depth}.fpl.conv{idx}"),
                pair_channels,
                pair_channels,
                3,
                2,
                1,
                rng,
            ));
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
            idx += 1;
        }
        let fpl_proj = Conv2d::new(
            store,
            &format!("rn.{depth}.fpl.proj"),
            pair_channels,
            embed_dim,
            1,
            1,
            0,
            rng,
        );
        let rib = Rib::new(store, &format!("rn.{depth}.rib"), embed_dim, rng);
        RelationNetwork {
            depth,
            fpl_convs: convs,
            fpl_proj,
            rib,
            pair_channels,
            embed_dim,
        }
    }

    /// Feature projection: pair map `[P, 2C, H, W]` to embeddings `[P, D]`.
    pub fn project<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        pair: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(pair).shape();
        if shape.len() != 4 || shape[1] != self.pair_channels {
            return Err(TorsdError::shape(
                format!("[P, {}, h, w]", self.pair_channels),
                format!("{:?}", shape),
            ));
        }
        let mut h = pair;
        for conv in &self.fpl_convs {
            let y = conv.forward(g, bind, h)?;
            h = g.relu(y);
        }
        let projected = self.fpl_proj.forward(g, bind, h)?;
        g.global_avg_pool(projected)
    }

    /// Relation calculation: embeddings `[P, D]` to scalars `[P]`.
    pub fn relate<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        z: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(z).shape();
        if shape.len() != 2 || shape[1] != self.embed_dim {
            return Err(TorsdError::shape(
                format!("[P, {}]", self.embed_dim),
                format!("{:?}", shape),
            ));
        }
        self.rib.forward(g, bind, z)
    }
}

/// Positive and negative auxiliary classifiers for one depth; each is a
/// single linear map from the projected embedding to class logits.
pub struct AuxClassifierPair {
    pub pos: Linear,
    pub neg: Linear,
}

impl AuxClassifierPair {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        depth: usize,
        embed_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AuxClassifierPair {
            pos: Linear::new(store, &format!("aux.{depth}.pos"), embed_dim, num_classes, rng),
            neg: Linear::new(store, &format!("aux.{depth}.neg"), embed_dim, num_classes, rng),
        }
    }
}

/// Auxiliary class logits: `logits = W z + b`, no hidden layers.
pub fn aux_logits<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    head: &Linear,
    z: NodeId,
) -> Result<NodeId> {
    head.forward(g, bind, z)
}

/// Relation head over stacked backbone logits, with its own parameters.
pub struct LogitRib {
    rib: Rib,
    num_classes: usize,
}

impl LogitRib {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        LogitRib {
            rib: Rib::new(store, "logit_rib", 2 * num_classes, rng),
            num_classes,
        }
    }

    /// Scalar relation per row of the stacked logits
    /// `[logits_a; logits_b]`.
    pub fn relation<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        logits_a: NodeId,
        logits_b: NodeId,
    ) -> Result<NodeId> {
        let (sa, sb) = (g.value(logits_a).shape(), g.value(logits_b).shape());
        if sa.len() != 2 || sa[1] != self.num_classes || sa != sb {
            return Err(TorsdError::shape(
                format!("two [P, {}] logit tables", self.num_classes),
                format!("{:?} and {:?}", sa, sb),
            ));
        }
        let stacked = g.concat_axis1(logits_a, logits_b)?;
        self.rib.forward(g, bind, stacked)
    }
}

/// Scalar relation between two logit vectors through the logit head.
pub fn logit_relation<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    lrib: &LogitRib,
    logits_a: NodeId,
    logits_b: NodeId,
) -> Result<NodeId> {
    lrib.relation(g, bind, logits_a, logits_b)
}

/// Everything the relation stack saw in one step: per-depth projected
/// embeddings, scalar relations, and (when logit calibration is on) the
/// logit-level relations. Empty vectors when relation networks are
/// disabled.
pub struct RelationBundle {
    pub z_p: Vec<NodeId>,
    pub z_n: Vec<NodeId>,
    pub r_p: Vec<NodeId>,
    pub r_n: Vec<NodeId>,
    pub logit_r_p: Option<NodeId>,
    pub logit_r_n: Option<NodeId>,
}

impl RelationBundle {
    pub fn empty() -> Self {
        RelationBundle {
            z_p: Vec::new(),
            z_n: Vec::new(),
            r_p: Vec::new(),
            r_n: Vec::new(),
            logit_r_p: None,
            logit_r_n: None,
        }
    }

    pub fn depth_count(&self) -> usize {
        self.r_p.len()
    }
}

/// Runs every relation network over the tapped pair features and, when a
/// logit head is supplied, the logit relations. Projected embeddings are
/// computed once and shared between relation scoring and the auxiliary
/// classifiers.
pub fn forward_relations<E: Element>(
    g: &mut Graph<E>,
    bind: &Binding,
    features: &TappedFeatures,
    relation_nets: &[RelationNetwork],
    logit_rib: Option<&LogitRib>,
) -> Result<RelationBundle> {
    if !relation_nets.is_empty() && relation_nets.len() != features.taps.len() {
        return Err(TorsdError::config(
            "enable_rn",
            format!(
                "backbone exposes {} depths but {} relation networks were built",
                features.taps.len(),
                relation_nets.len()
            ),
        ));
    }
    let mut bundle = RelationBundle::empty();
    for (d, rn) in relation_nets.iter().enumerate() {
        let pair_p = concat_pair(g, features.f_o[d], features.f_p[d])?;
        let pair_n = concat_pair(g, features.f_o[d], features.f_n[d])?;
        let z_p = rn.project(g, bind, pair_p)?;
        let z_n = rn.project(g, bind, pair_n)?;
        let r_p = rn.relate(g, bind, z_p)?;
        let r_n = rn.relate(g, bind, z_n)?;
        bundle.z_p.push(z_p);
        bundle.z_n.push(z_n);
        bundle.r_p.push(r_p);
        bundle.r_n.push(r_n);
    }
    if let Some(lrib) = logit_rib {
        bundle.logit_r_p = Some(lrib.relation(g, bind, features.logits_o, features.logits_p)?);
        bundle.logit_r_n = Some(lrib.relation(g, bind, features.logits_o, features.logits_n)?);
    }
    Ok(bundle)
}
