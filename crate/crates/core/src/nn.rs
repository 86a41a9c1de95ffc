//! Named parameter storage and the layer primitives built on [`Graph`].
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names
//! (`backbone.block1.conv.weight`, `rn.2.rib.fc1.bias`, ...). Layers hold
//! [`ParamId`]s into the store; each training step binds the store into a
//! fresh graph and layers forward through the bound nodes.

use crate::error::{Result, TorsdError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter (or buffer) in a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// One named tensor. Buffers (`trainable == false`) are state such as
/// batch-norm running statistics: serialized with checkpoints, never
/// touched by the optimizer.
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

/// Flat, insertion-ordered collection of all model tensors.
pub struct ParamStore<E: Element> {
    params: Vec<Param<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies values (by name) from another store. Every parameter of
    /// `self` must exist in `src`.
    pub fn load_values_from(&mut self, src: &ParamStore<E>) -> Result<()> {
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let sid = src.find(&name).ok_or_else(|| TorsdError::CorruptBlob {
                param: name.clone(),
                message: "missing in source store".into(),
            })?;
            if src.value(sid).shape() != self.params[i].value.shape() {
                return Err(TorsdError::CorruptBlob {
                    param: name,
                    message: "shape mismatch".into(),
                });
            }
            self.params[i].value = src.value(sid).clone();
        }
        Ok(())
    }
}

/// Per-step binding of trainable parameters to graph leaves.
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
}

impl Binding {
    /// Binds every trainable parameter as a gradient leaf. Buffers are not
    /// bound; layers that need them read the store directly.
    pub fn trainable<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>) -> Self {
        let nodes = store
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    Some(g.leaf(p.value.clone()))
                } else {
                    None
                }
            })
            .collect();
        Binding { nodes }
    }

    /// Binds every trainable parameter as a constant (evaluation path).
    pub fn frozen<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>) -> Self {
        let nodes = store
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    Some(g.constant(p.value.clone()))
                } else {
                    None
                }
            })
            .collect();
        Binding { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0].expect("buffer bound as parameter")
    }
}

/// Execution mode threaded through layer forwards.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub training: bool,
    /// Whether batch-norm running statistics are updated. Off during
    /// finite-difference passes, which must not mutate state.
    pub update_stats: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        training: true,
        update_stats: true,
    };
    /// Training-mode math without side effects (gradient checking).
    pub const TRAIN_FROZEN: ForwardMode = ForwardMode {
        training: true,
        update_stats: false,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        training: false,
        update_stats: false,
    };
}

/// Draws from N(0, std) via Box–Muller on the given generator.
fn normal<E: Element>(rng: &mut ChaCha8Rng, std: f64) -> E {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    E::from_f64(z * std)
}

/// Fan-in-scaled normal init (He): std = sqrt(2 / fan_in).
fn he_tensor<E: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal::<E>(rng, std)).collect();
    Tensor::from_vec(shape, data)
}

/// 2-D convolution; bias is optional (batch-normalized stacks omit it).
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Conv2d {
            weight,
            bias: Some(bias),
            stride,
            pad,
        }
    }

    /// Bias-free variant for convolutions followed by batch norm.
    #[allow(clippy::too_many_arguments)]
    pub fn new_no_bias<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        Conv2d {
            weight,
            bias: None,
            stride,
            pad,
        }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        g.conv2d(
            x,
            bind.node(self.weight),
            self.bias.map(|b| bind.node(b)),
            self.stride,
            self.pad,
        )
    }

    pub fn param_count<E: Element>(&self, store: &ParamStore<E>) -> usize {
        store.value(self.weight).len() + self.bias.map_or(0, |b| store.value(b).len())
    }
}

/// Fully connected layer with bias.
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_tensor(&[out_dim, in_dim], in_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { weight, bias }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        g.linear(x, bind.node(self.weight), bind.node(self.bias))
    }

    pub fn param_count<E: Element>(&self, store: &ParamStore<E>) -> usize {
        store.value(self.weight).len() + store.value(self.bias).len()
    }
}

/// Batch normalization with affine transform and running statistics.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], E::ONE));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean =
            store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(
            format!("{name}.running_var"),
            Tensor::full(&[channels], E::ONE),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        store: &mut ParamStore<E>,
        x: NodeId,
        mode: ForwardMode,
    ) -> Result<NodeId> {
        let mut rm = store.value(self.running_mean).clone();
        let mut rv = store.value(self.running_var).clone();
        let y = g.batch_norm(
            x,
            bind.node(self.gamma),
            bind.node(self.beta),
            &mut rm,
            &mut rv,
            mode.training,
            mode.update_stats,
            E::from_f64(self.momentum),
            E::from_f64(self.eps),
        )?;
        if mode.training && mode.update_stats {
            *store.value_mut(self.running_mean) = rm;
            *store.value_mut(self.running_var) = rv;
        }
        Ok(y)
    }

    pub fn param_count<E: Element>(&self, store: &ParamStore<E>) -> usize {
        store.value(self.gamma).len() + store.value(self.beta).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut s1: ParamStore<f32> = ParamStore::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let c1 = Conv2d::new(&mut s1, "c", 3, 8, 3, 1, 1, &mut r1);

        let mut s2: ParamStore<f32> = ParamStore::new();
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let c2 = Conv2d::new(&mut s2, "c", 3, 8, 3, 1, 1, &mut r2);

        assert_eq!(s1.value(c1.weight).data(), s2.value(c2.weight).data());
        assert_eq!(s1.value(c1.bias.unwrap()).data(), s2.value(c2.bias.unwrap()).data());
    }

    #[test]
    fn trainable_count_excludes_buffers() {
        let mut s: ParamStore<f32> = ParamStore::new();
        let bn = BatchNorm2d::new(&mut s, "bn", 4);
        assert_eq!(s.trainable_count(), 8);
        assert!(!s.get(bn.running_mean).trainable);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn load_values_by_name() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut src: ParamStore<f32> = ParamStore::new();
        let _ = Linear::new(&mut src, "fc", 4, 2, &mut r);

        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let mut dst: ParamStore<f32> = ParamStore::new();
        let _ = Linear::new(&mut dst, "fc", 4, 2, &mut r2);

        dst.load_values_from(&src).unwrap();
        let a = src.find("fc.weight").unwrap();
        let b = dst.find("fc.weight").unwrap();
        assert_eq!(src.value(a).data(), dst.value(b).data());
    }
}
