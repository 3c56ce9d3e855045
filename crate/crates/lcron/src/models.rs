//! Toy differentiable scorers with manual backprop, plus Adam.
//!
//! Two architectures stand in for the production retrieval/ranking pair,
//! deliberately asymmetric in capacity:
//!
//! - [`TwoTowerParams`]: user and item MLP towers meeting in a dot product.
//!   Can only express factorized score surfaces.
//! - [`MlpParams`]: one MLP over `[user, item, user ⊙ item]`, which sees
//!   cross features directly.
//!
//! Hidden layers are ReLU (subgradient 0 at the kink), output layers are
//! linear. Stages never share parameters. Gradients mirror the parameter
//! structure exactly; [`flatten_params`] / [`write_back_params`] give Adam a
//! flat view in a deterministic order.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One dense layer `y = W x + b`, optionally ReLU-activated.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`, row-major.
    pub weight: Matrix,
    pub bias: Vector,
    pub relu: bool,
}

impl DenseLayer {
    pub fn zeros_like(&self) -> DenseLayer {
        DenseLayer {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: Vector::zeros(self.bias.len()),
            relu: self.relu,
        }
    }

    fn forward(&self, x: &Vector) -> (Vector, Vector) {
        let out = self.weight.rows();
        let mut pre = Vector::zeros(out);
        for i in 0..out {
            let row = self.weight.row(i);
            let mut acc = self.bias[i];
            for j in 0..x.len() {
                acc += row[j] * x[j];
            }
            pre[i] = acc;
        }
        let post = if self.relu {
            Vector::from_fn(out, |i| pre[i].max(0.0))
        } else {
            pre.clone()
        };
        (pre, post)
    }
}

/// He-style fan-in initialization: weights ~ N(0, 2/fan_in), zero biases.
/// Hidden layers get ReLU, the final layer stays linear.
pub fn init_layers(seed: u64, dims: &[usize]) -> Vec<DenseLayer> {
    assert!(dims.len() >= 2, "need input and output dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng));
        layers.push(DenseLayer {
            weight,
            bias: Vector::zeros(fan_out),
            relu: l + 1 < dims.len() - 1,
        });
    }
    layers
}

/// Activations recorded during one tower/MLP pass.
pub struct TowerCache {
    /// Input of each layer.
    inputs: Vec<Vector>,
    /// Pre-activation of each layer.
    preacts: Vec<Vector>,
    /// Final output.
    output: Vector,
}

fn forward_tower(layers: &[DenseLayer], x: &Vector) -> TowerCache {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut preacts = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        inputs.push(cur.clone());
        let (pre, post) = layer.forward(&cur);
        preacts.push(pre);
        cur = post;
    }
    TowerCache {
        inputs,
        preacts,
        output: cur,
    }
}

/// Backward through one tower; accumulates parameter gradients into `grads`
/// and returns dL/d(input).
fn backward_tower(
    layers: &[DenseLayer],
    cache: &TowerCache,
    mut dout: Vector,
    grads: &mut [DenseLayer],
) -> Vector {
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let pre = &cache.preacts[l];
        let input = &cache.inputs[l];
        // ReLU subgradient, 0 at the kink
        let dz = if layer.relu {
            Vector::from_fn(dout.len(), |i| if pre[i] > 0.0 { dout[i] } else { 0.0 })
        } else {
            dout
        };
        let g = &mut grads[l];
        for i in 0..layer.weight.rows() {
            let gb = dz[i];
            g.bias[i] += gb;
            let grow = g.weight.row_mut(i);
            for j in 0..input.len() {
                grow[j] += gb * input[j];
            }
        }
        let mut dx = Vector::zeros(input.len());
        for i in 0..layer.weight.rows() {
            let row = layer.weight.row(i);
            let gz = dz[i];
            for j in 0..input.len() {
                dx[j] += row[j] * gz;
            }
        }
        dout = dx;
    }
    dout
}

/// Dot-product retrieval scorer: user tower and item tower into a shared
/// embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerParams {
    pub user_tower: Vec<DenseLayer>,
    pub item_tower: Vec<DenseLayer>,
}

pub struct TwoTowerCache {
    user: TowerCache,
    items: Vec<TowerCache>,
}

impl TwoTowerParams {
    /// `dims` runs input → hiddens → embedding and applies to both towers.
    pub fn init(seed: u64, dims: &[usize]) -> Self {
        Self {
            user_tower: init_layers(seed ^ 0x7577, dims),
            item_tower: init_layers(seed ^ 0x6974, dims),
        }
    }

    pub fn forward(&self, user: &Vector, items: &[Vector]) -> Result<(Vector, TwoTowerCache)> {
        check_dims(&self.user_tower, user, "user features")?;
        let user_cache = forward_tower(&self.user_tower, user);
        let mut scores = Vector::zeros(items.len());
        let mut item_caches = Vec::with_capacity(items.len());
        for (j, item) in items.iter().enumerate() {
            check_dims(&self.item_tower, item, "item features")?;
            let c = forward_tower(&self.item_tower, item);
            scores[j] = user_cache.output.dot(&c.output);
            item_caches.push(c);
        }
        Ok((
            scores,
            TwoTowerCache {
                user: user_cache,
                items: item_caches,
            },
        ))
    }

    /// Exact parameter gradients for `sum_j upstream[j] * score_j`.
    pub fn backward(&self, cache: &TwoTowerCache, upstream: &Vector) -> Result<TwoTowerParams> {
        if upstream.len() != cache.items.len() {
            return Err(Error::invalid(format!(
                "upstream length {} != {} scored items",
                upstream.len(),
                cache.items.len()
            )));
        }
        let mut grads = TwoTowerParams {
            user_tower: self.user_tower.iter().map(DenseLayer::zeros_like).collect(),
            item_tower: self.item_tower.iter().map(DenseLayer::zeros_like).collect(),
        };
        let emb = cache.user.output.len();
        let mut d_user_emb = Vector::zeros(emb);
        for (j, item_cache) in cache.items.iter().enumerate() {
            let g = upstream[j];
            if g != 0.0 {
                for k in 0..emb {
                    d_user_emb[k] += g * item_cache.output[k];
                }
            }
            let d_item_emb = cache.user.output.scale(g);
            backward_tower(&self.item_tower, item_cache, d_item_emb, &mut grads.item_tower);
        }
        backward_tower(&self.user_tower, &cache.user, d_user_emb, &mut grads.user_tower);
        Ok(grads)
    }
}

/// Cross-feature ranking scorer over `[user, item, user ⊙ item]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

pub struct MlpCache {
    items: Vec<TowerCache>,
    /// The assembled `[u, v, u ⊙ v]` inputs, needed to split input grads.
    user_dim: usize,
}

impl MlpParams {
    /// `dims[0]` must equal `3 * feature_dim`; the final dim must be 1.
    pub fn init(seed: u64, dims: &[usize]) -> Self {
        assert_eq!(*dims.last().unwrap(), 1, "ranking head is scalar");
        Self {
            layers: init_layers(seed ^ 0x6d6c70, dims),
        }
    }

    fn assemble(user: &Vector, item: &Vector) -> Vector {
        let d = user.len();
        Vector::from_fn(3 * d, |i| match i / d {
            0 => user[i % d],
            1 => item[i % d],
            _ => user[i % d] * item[i % d],
        })
    }

    pub fn forward(&self, user: &Vector, items: &[Vector]) -> Result<(Vector, MlpCache)> {
        let mut scores = Vector::zeros(items.len());
        let mut caches = Vec::with_capacity(items.len());
        for (j, item) in items.iter().enumerate() {
            if item.len() != user.len() {
                return Err(Error::invalid("user/item feature dims differ"));
            }
            let x = Self::assemble(user, item);
            check_dims(&self.layers, &x, "assembled features")?;
            let c = forward_tower(&self.layers, &x);
            scores[j] = c.output[0];
            caches.push(c);
        }
        Ok((
            scores,
            MlpCache {
                items: caches,
                user_dim: user.len(),
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, upstream: &Vector) -> Result<MlpParams> {
        if upstream.len() != cache.items.len() {
            return Err(Error::invalid(format!(
                "upstream length {} != {} scored items",
                upstream.len(),
                cache.items.len()
            )));
        }
        let _ = cache.user_dim;
        let mut grads = MlpParams {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        };
        for (j, item_cache) in cache.items.iter().enumerate() {
            let dout = Vector::new(vec![upstream[j]]).expect("scalar head");
            backward_tower(&self.layers, item_cache, dout, &mut grads.layers);
        }
        Ok(grads)
    }
}

fn check_dims(layers: &[DenseLayer], x: &Vector, what: &str) -> Result<()> {
    let expect = layers
        .first()
        .map(|l| l.weight.cols())
        .unwrap_or(x.len());
    if x.len() != expect {
        return Err(Error::invalid(format!(
            "{what} has dim {} but the first layer expects {expect}",
            x.len()
        )));
    }
    Ok(())
}

/// One funnel stage's scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum StageModel {
    TwoTower(TwoTowerParams),
    Mlp(MlpParams),
}

pub enum StageCache {
    TwoTower(TwoTowerCache),
    Mlp(MlpCache),
}

impl StageModel {
    pub fn forward(&self, user: &Vector, items: &[Vector]) -> Result<(Vector, StageCache)> {
        match self {
            StageModel::TwoTower(p) => {
                let (s, c) = p.forward(user, items)?;
                Ok((s, StageCache::TwoTower(c)))
            }
            StageModel::Mlp(p) => {
                let (s, c) = p.forward(user, items)?;
                Ok((s, StageCache::Mlp(c)))
            }
        }
    }

    /// Chains dL/d(scores) into parameter gradients, flattened in the same
    /// order as [`StageModel::flatten`].
    pub fn backward_flat(&self, cache: &StageCache, upstream: &Vector) -> Result<Vec<f64>> {
        match (self, cache) {
            (StageModel::TwoTower(p), StageCache::TwoTower(c)) => {
                let g = p.backward(c, upstream)?;
                Ok(StageModel::TwoTower(g).flatten())
            }
            (StageModel::Mlp(p), StageCache::Mlp(c)) => {
                let g = p.backward(c, upstream)?;
                Ok(StageModel::Mlp(g).flatten())
            }
            _ => Err(Error::invalid("cache does not match model kind")),
        }
    }

    fn layer_groups(&self) -> Vec<(&'static str, &Vec<DenseLayer>)> {
        match self {
            StageModel::TwoTower(p) => {
                vec![("user_tower", &p.user_tower), ("item_tower", &p.item_tower)]
            }
            StageModel::Mlp(p) => vec![("mlp", &p.layers)],
        }
    }

    fn layer_groups_mut(&mut self) -> Vec<&mut Vec<DenseLayer>> {
        match self {
            StageModel::TwoTower(p) => vec![&mut p.user_tower, &mut p.item_tower],
            StageModel::Mlp(p) => vec![&mut p.layers],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layer_groups()
            .iter()
            .flat_map(|(_, ls)| ls.iter())
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Parameters in a fixed order: groups, then layers, then weights
    /// row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, layers) in self.layer_groups() {
            for l in layers {
                for i in 0..l.weight.rows() {
                    out.extend_from_slice(l.weight.row(i));
                }
                out.extend_from_slice(l.bias.as_slice());
            }
        }
        out
    }

    pub fn write_back(&mut self, flat: &[f64]) {
        let mut k = 0;
        for layers in self.layer_groups_mut() {
            for l in layers.iter_mut() {
                let w = l.weight.as_mut_slice();
                w.copy_from_slice(&flat[k..k + w.len()]);
                k += w.len();
                let b = l.bias.as_mut_slice();
                b.copy_from_slice(&flat[k..k + b.len()]);
                k += b.len();
            }
        }
        debug_assert_eq!(k, flat.len());
    }

    /// Named tensors in flatten order, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (group, layers) in self.layer_groups() {
            for (i, l) in layers.iter().enumerate() {
                let mut w = Vec::with_capacity(l.weight.rows() * l.weight.cols());
                for r in 0..l.weight.rows() {
                    w.extend_from_slice(l.weight.row(r));
                }
                out.push((
                    format!("{group}/{i}/weight"),
                    vec![l.weight.rows(), l.weight.cols()],
                    w,
                ));
                out.push((
                    format!("{group}/{i}/bias"),
                    vec![l.bias.len()],
                    l.bias.as_slice().to_vec(),
                ));
            }
        }
        out
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(num_params: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            hyper,
        }
    }
}

/// One Adam update in place. Moments decay even where the gradient is zero.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let h = state.hyper;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - h.beta1.powf(t);
    let bc2 = 1.0 - h.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    }
}
