//! Dense ReLU networks with hand-written reverse mode, Adam, and the
//! parameter container exchanged during federation.
//!
//! Parameters are kept in one flat `Vec<f64>` per network (row-major
//! weights then biases, layer by layer) so the optimizer, the federated
//! averaging and the binary format can all treat a model as a plain vector.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Layer inputs recorded by the forward pass: `inputs[0]` is the network
/// input, `inputs[l]` the ReLU output feeding layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(
            sizes.len() >= 2,
            "an MLP needs at least an input and an output layer"
        );
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    /// He-style uniform fan-in initialization with zero biases. The output
    /// layer is additionally scaled by `output_scale`.
    pub fn new_seeded<R: Rng + ?Sized>(sizes: &[usize], output_scale: f64, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(sizes);
        let layers = mlp.layer_count();
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit =
                (6.0 / fan_in as f64).sqrt() * if l + 1 == layers { output_scale } else { 1.0 };
            for w in &mut mlp.params[off..off + fan_in * fan_out] {
                *w = limit * (2.0 * rng.random::<f64>() - 1.0);
            }
            off += fan_in * fan_out + fan_out;
        }
        mlp
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(NnError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(&sizes) {
            return Err(NnError::Shape(format!(
                "{} parameters for sizes {sizes:?}, expected {}",
                params.len(),
                param_count(&sizes)
            )));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("nonempty sizes")
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let w_len = self.sizes[l] * self.sizes[l + 1];
        (off, off + w_len)
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, b) = self.layer_offsets(l);
        ArrayView2::from_shape((self.sizes[l + 1], self.sizes[l]), &self.params[w..b])
            .expect("layout")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(l);
        &self.params[b..b + self.sizes[l + 1]]
    }

    /// Forward pass over a batch (one row per sample).
    pub fn forward_batch(
        &self,
        input: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, ForwardCache), NnError> {
        if input.ncols() != self.input_size() {
            return Err(NnError::Shape(format!(
                "input width {} != {}",
                input.ncols(),
                self.input_size()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layer_count());
        let mut x = input.to_owned();
        for l in 0..self.layer_count() {
            let mut z = x.dot(&self.weights(l).t());
            let bias = self.bias(l);
            let last = l + 1 == self.layer_count();
            for mut row in z.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if !last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            inputs.push(x);
            x = z;
        }
        Ok((x, ForwardCache { inputs }))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let (out, cache) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, cache))
    }

    /// Output only, for inference.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Reverse-mode gradient of `Σ_rows <grad_out_row, output_row>` with
    /// respect to every parameter, in the flat layout of [`Mlp::params`].
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>, NnError> {
        if grad_out.ncols() != self.output_size() || grad_out.nrows() != cache.batch_size() {
            return Err(NnError::Shape(format!(
                "output gradient {:?} does not match batch {} x {}",
                grad_out.dim(),
                cache.batch_size(),
                self.output_size()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..self.layer_count()).rev() {
            let a = &cache.inputs[l];
            let (w_off, b_off) = self.layer_offsets(l);
            let gw = delta.t().dot(a);
            grads[w_off..b_off].copy_from_slice(gw.as_slice().expect("standard layout"));
            let gb = delta.sum_axis(Axis(0));
            grads[b_off..b_off + self.sizes[l + 1]]
                .copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                let mut prev = delta.dot(&self.weights(l));
                prev.zip_mut_with(a, |d, &act| {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        Ok(grads)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Per-episode exponential decay of the learning rate.
pub fn scheduled_lr(initial: f64, decay: f64, episode: usize) -> f64 {
    initial * decay.powi(episode as i32)
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Actor and critic parameters of one agent: the unit of federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub actor: Mlp,
    pub critic: Mlp,
    /// Federation round this model belongs to.
    pub version: u64,
}

const MAGIC: &[u8; 4] = b"FCMP";
const FORMAT_VERSION: u32 = 1;

impl ModelParams {
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.actor.same_shape(&other.actor) && self.critic.same_shape(&other.critic)
    }

    pub fn param_count(&self) -> usize {
        self.actor.params.len() + self.critic.params.len()
    }

    /// Binary layout: `FCMP`, format version (u32), round (u64), then for
    /// actor and critic: layer-count+1 (u32), sizes (u32 each), parameter
    /// count (u64), parameters (f64). All little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        for net in [&self.actor, &self.critic] {
            w.write_all(&(net.sizes.len() as u32).to_le_bytes())?;
            for &s in &net.sizes {
                w.write_all(&(s as u32).to_le_bytes())?;
            }
            w.write_all(&(net.params.len() as u64).to_le_bytes())?;
            for &p in &net.params {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + 8 * self.param_count());
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let format = read_u32(&mut r)?;
        if format != FORMAT_VERSION {
            return Err(NnError::Format(format!(
                "unsupported format version {format}"
            )));
        }
        let version = read_u64(&mut r)?;
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = read_u32(&mut r)? as usize;
            if !(2..=64).contains(&n) {
                return Err(NnError::Format(format!("implausible layer count {n}")));
            }
            let sizes = (0..n)
                .map(|_| read_u32(&mut r).map(|s| s as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count = read_u64(&mut r)? as usize;
            if count != param_count(&sizes) {
                return Err(NnError::Format(format!(
                    "parameter count {count} does not match sizes {sizes:?}"
                )));
            }
            let mut params = vec![0.0; count];
            let mut b = [0u8; 8];
            for p in &mut params {
                r.read_exact(&mut b)?;
                *p = f64::from_le_bytes(b);
            }
            nets.push(Mlp::from_parts(sizes, params)?);
        }
        let critic = nets.pop().expect("two nets");
        let actor = nets.pop().expect("two nets");
        Ok(Self {
            actor,
            critic,
            version,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        Self::read_from(bytes)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn check_weights(weights: &[f64]) -> Result<(), NnError> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(NnError::Weights(sum));
    }
    Ok(())
}

/// Coordinate-wise weighted sum. Each coordinate is clamped to the range of
/// its inputs, so rounding never leaves their convex hull and identical
/// inputs reproduce exactly.
fn combine_vectors(inputs: &[&[f64]], weights: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (v, &w) in inputs.iter().zip(weights) {
            let x = v[i];
            acc += w * x;
            lo = lo.min(x);
            hi = hi.max(x);
        }
        *o = acc.clamp(lo, hi);
    }
}

/// Convex combination of models with identical shapes.
pub fn combine(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams, NnError> {
    let first = *models
        .first()
        .ok_or_else(|| NnError::Shape("no models to combine".into()))?;
    if models.len() != weights.len() {
        return Err(NnError::Shape(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if let Some(bad) = models.iter().find(|m| !m.same_shape(first)) {
        return Err(NnError::Shape(format!(
            "model shapes differ: {:?}/{:?} vs {:?}/{:?}",
            bad.actor.sizes, bad.critic.sizes, first.actor.sizes, first.critic.sizes
        )));
    }
    check_weights(weights)?;
    let mut out = first.clone();
    let actors: Vec<&[f64]> = models.iter().map(|m| m.actor.params.as_slice()).collect();
    combine_vectors(&actors, weights, &mut out.actor.params);
    let critics: Vec<&[f64]> = models.iter().map(|m| m.critic.params.as_slice()).collect();
    combine_vectors(&critics, weights, &mut out.critic.params);
    out.version = models.iter().map(|m| m.version).max().unwrap_or(0);
    Ok(out)
}
