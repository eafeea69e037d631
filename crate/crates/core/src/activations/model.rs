//! Desk-scale decoder-only transformer with gated (GLU) feed-forward blocks.
//!
//! Pre-norm residual stack:
//!
//! ```text
//! h ← h + Attn(RMSNorm(h))
//! h ← h + W_down (σ(W_gate x) ⊙ W_up x)      x = RMSNorm(h)
//! ```
//!
//! Attention is causal multi-head with rotary position encoding on adjacent
//! pairs of each head's query/key dimensions. Weights are stored `out x in`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::ablation::AblationSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Real;
use crate::tensorstore::{Checkpoint, DType, TensorRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    #[serde(alias = "SiLU", alias = "SILU")]
    Silu,
    /// tanh approximation.
    #[serde(alias = "GELU")]
    Gelu,
    #[serde(alias = "ReLU", alias = "RELU")]
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Gelu => {
                let c = T::of((2.0 / std::f64::consts::PI).sqrt());
                let half = T::of(0.5);
                half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
            }
            Activation::Relu => x.max(T::zero()),
        }
    }
}

fn default_rope_theta() -> f64 {
    10000.0
}

fn default_rmsnorm_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_rmsnorm_eps")]
    pub rmsnorm_eps: f64,
    #[serde(default)]
    pub tied_embeddings: bool,
    /// Generation stops after emitting this id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_token_id: Option<u32>,
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Model(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Model(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.rmsnorm_eps >= 0.0) {
            return Err(Error::Model("rope_theta must be > 0 and rmsnorm_eps >= 0".into()));
        }
        if let Some(eos) = self.eos_token_id {
            if eos as usize >= self.vocab_size {
                return Err(Error::Model(format!("eos_token_id {eos} >= vocab_size")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every tensor the model reads, with its shape.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            (names::EMBED.to_owned(), vec![v, d]),
            (names::FINAL_NORM.to_owned(), vec![d]),
        ];
        if !self.tied_embeddings {
            out.push((names::OUTPUT.to_owned(), vec![v, d]));
        }
        for l in 0..self.n_layers {
            out.push((names::attn_norm(l), vec![d]));
            out.push((names::wq(l), vec![d, d]));
            out.push((names::wk(l), vec![d, d]));
            out.push((names::wv(l), vec![d, d]));
            out.push((names::wo(l), vec![d, d]));
            out.push((names::ffn_norm(l), vec![d]));
            out.push((names::w_gate(l), vec![f, d]));
            out.push((names::w_up(l), vec![f, d]));
            out.push((names::w_down(l), vec![d, f]));
        }
        out
    }
}

/// Tensor names of the toy layout (the `toy` component-map preset).
pub mod names {
    pub const EMBED: &str = "tok_embeddings.weight";
    pub const FINAL_NORM: &str = "norm.weight";
    pub const OUTPUT: &str = "output.weight";

    pub fn attn_norm(l: usize) -> String {
        format!("layers.{l}.attn_norm.weight")
    }
    pub fn ffn_norm(l: usize) -> String {
        format!("layers.{l}.ffn_norm.weight")
    }
    pub fn wq(l: usize) -> String {
        format!("layers.{l}.attn.wq")
    }
    pub fn wk(l: usize) -> String {
        format!("layers.{l}.attn.wk")
    }
    pub fn wv(l: usize) -> String {
        format!("layers.{l}.attn.wv")
    }
    pub fn wo(l: usize) -> String {
        format!("layers.{l}.attn.wo")
    }
    pub fn w_gate(l: usize) -> String {
        format!("layers.{l}.ffn.w_gate")
    }
    pub fn w_up(l: usize) -> String {
        format!("layers.{l}.ffn.w_up")
    }
    pub fn w_down(l: usize) -> String {
        format!("layers.{l}.ffn.w_down")
    }
}

/// Random weights for a spec: projections ~ N(0, 1/fan_in), norms = 1.
pub fn random_checkpoint(spec: &ToyModelSpec, seed: u64, dtype: DType) -> Result<Checkpoint> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ckpt = Checkpoint::new();
    for (name, shape) in spec.tensor_shapes() {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = if shape.len() == 1 {
            vec![1.0; n]
        } else {
            let scale = 1.0 / (shape[1] as f64).sqrt();
            (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * scale
                })
                .collect()
        };
        ckpt.insert(TensorRecord::from_values(name, dtype, shape, &values)?)?;
    }
    Ok(ckpt)
}

struct Layer<T> {
    attn_norm: Vec<T>,
    wq: Matrix<T>,
    wk: Matrix<T>,
    wv: Matrix<T>,
    wo: Matrix<T>,
    ffn_norm: Vec<T>,
    w_gate: Matrix<T>,
    w_up: Matrix<T>,
    w_down: Matrix<T>,
}

pub struct ToyModel<T> {
    spec: ToyModelSpec,
    embed: Matrix<T>,
    final_norm: Vec<T>,
    output: Option<Matrix<T>>,
    layers: Vec<Layer<T>>,
    /// cos/sin per (position, pair) are computed on the fly from these.
    inv_freq: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub ablation: Option<&'a AblationSet>,
    /// Drop every FFN block (attention-only variant).
    pub skip_ffn: bool,
    /// Keep each FFN block's output vector in the result.
    pub record_ffn_output: bool,
}

/// Gate activations `A = σ(W_gate x)` after ablation, `[layer][token][neuron]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    pub layers: Vec<Vec<Vec<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    /// `[position][vocab]`.
    pub logits: Vec<Vec<T>>,
    pub trace: ActivationTrace<T>,
    /// `[layer][token][d_model]`, when requested.
    pub ffn_output: Option<Vec<Vec<Vec<T>>>>,
}

fn take_matrix<T: Real>(ckpt: &Checkpoint, name: &str, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let rec = ckpt.require(name)?;
    if rec.shape() != [rows, cols] {
        return Err(Error::Model(format!(
            "tensor {name:?} has shape {:?}, expected [{rows}, {cols}]",
            rec.shape()
        )));
    }
    rec.to_matrix()
}

fn take_vector<T: Real>(ckpt: &Checkpoint, name: &str, len: usize) -> Result<Vec<T>> {
    let rec = ckpt.require(name)?;
    if rec.shape() != [len] {
        return Err(Error::Model(format!(
            "tensor {name:?} has shape {:?}, expected [{len}]",
            rec.shape()
        )));
    }
    Ok(rec.values())
}

impl<T: Real> ToyModel<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint, spec: &ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let (d, f, v) = (spec.d_model, spec.d_ff, spec.vocab_size);
        let layers = (0..spec.n_layers)
            .map(|l| {
                Ok(Layer {
                    attn_norm: take_vector(ckpt, &names::attn_norm(l), d)?,
                    wq: take_matrix(ckpt, &names::wq(l), d, d)?,
                    wk: take_matrix(ckpt, &names::wk(l), d, d)?,
                    wv: take_matrix(ckpt, &names::wv(l), d, d)?,
                    wo: take_matrix(ckpt, &names::wo(l), d, d)?,
                    ffn_norm: take_vector(ckpt, &names::ffn_norm(l), d)?,
                    w_gate: take_matrix(ckpt, &names::w_gate(l), f, d)?,
                    w_up: take_matrix(ckpt, &names::w_up(l), f, d)?,
                    w_down: take_matrix(ckpt, &names::w_down(l), d, f)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = if spec.tied_embeddings {
            None
        } else {
            Some(take_matrix(ckpt, names::OUTPUT, v, d)?)
        };
        let hd = spec.head_dim();
        let inv_freq = (0..hd / 2)
            .map(|i| spec.rope_theta.powf(-(2.0 * i as f64) / hd as f64))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            embed: take_matrix(ckpt, names::EMBED, v, d)?,
            final_norm: take_vector(ckpt, names::FINAL_NORM, d)?,
            output,
            layers,
            inv_freq,
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    fn rms_norm(&self, x: &[T], weight: &[T]) -> Vec<T> {
        let n = T::of(x.len() as f64);
        let ms = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / n;
        let inv = T::one() / (ms + T::of(self.spec.rmsnorm_eps)).sqrt();
        x.iter().zip(weight).map(|(&v, &w)| v * inv * w).collect()
    }

    fn rope(&self, v: &mut [T], pos: usize) {
        let hd = self.spec.head_dim();
        for head in v.chunks_mut(hd) {
            for (i, &f) in self.inv_freq.iter().enumerate() {
                let angle = pos as f64 * f;
                let (s, c) = (T::of(angle.sin()), T::of(angle.cos()));
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    fn attention(&self, layer: &Layer<T>, xs: &[Vec<T>]) -> Vec<Vec<T>> {
        let (nh, hd) = (self.spec.n_heads, self.spec.head_dim());
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut qs = Vec::with_capacity(xs.len());
        let mut ks = Vec::with_capacity(xs.len());
        let mut vs = Vec::with_capacity(xs.len());
        for (pos, x) in xs.iter().enumerate() {
            let mut q = layer.wq.matvec(x);
            let mut k = layer.wk.matvec(x);
            self.rope(&mut q, pos);
            self.rope(&mut k, pos);
            qs.push(q);
            ks.push(k);
            vs.push(layer.wv.matvec(x));
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut scores = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let mut mixed = vec![T::zero(); self.spec.d_model];
            for h in 0..nh {
                let span = h * hd..(h + 1) * hd;
                let q = &qs[t][span.clone()];
                scores.clear();
                for k in &ks[..=t] {
                    let s = q
                        .iter()
                        .zip(&k[span.clone()])
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    scores.push(s * scale);
                }
                let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut denom = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom = denom + *s;
                }
                for (s, v) in scores.iter().zip(&vs[..=t]) {
                    let w = *s / denom;
                    for (o, &x) in mixed[span.clone()].iter_mut().zip(&v[span.clone()]) {
                        *o = *o + w * x;
                    }
                }
            }
            out.push(layer.wo.matvec(&mixed));
        }
        out
    }

    pub fn forward(&self, tokens: &[u32], opts: ForwardOptions<'_>) -> Result<ForwardOutput<T>> {
        let spec = &self.spec;
        if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= spec.vocab_size) {
            return Err(Error::Model(format!(
                "token id {t} at position {i} out of range for vocab_size {}",
                spec.vocab_size
            )));
        }
        let masks = match opts.ablation {
            Some(set) => Some(set.masks(spec.n_layers, spec.d_ff)?),
            None => None,
        };
        let mut hs: Vec<Vec<T>> = tokens.iter().map(|&t| self.embed.row(t as usize).to_vec()).collect();
        let mut trace = Vec::with_capacity(spec.n_layers);
        let mut ffn_record = opts.record_ffn_output.then(Vec::new);

        for (l, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<T>> = hs.iter().map(|h| self.rms_norm(h, &layer.attn_norm)).collect();
            let attn = self.attention(layer, &normed);
            for (h, a) in hs.iter_mut().zip(attn) {
                for (x, y) in h.iter_mut().zip(a) {
                    *x = *x + y;
                }
            }

            let mut layer_trace = Vec::with_capacity(hs.len());
            let mut layer_out = Vec::new();
            for h in hs.iter_mut() {
                let x = self.rms_norm(h, &layer.ffn_norm);
                let mut a: Vec<T> = layer
                    .w_gate
                    .matvec(&x)
                    .into_iter()
                    .map(|g| spec.activation.apply(g))
                    .collect();
                if let Some(m) = &masks {
                    for (aj, &off) in a.iter_mut().zip(&m[l]) {
                        if off {
                            *aj = T::zero();
                        }
                    }
                }
                if !opts.skip_ffn {
                    let up = layer.w_up.matvec(&x);
                    let inner: Vec<T> = a.iter().zip(&up).map(|(&g, &u)| g * u).collect();
                    let y = layer.w_down.matvec(&inner);
                    for (hv, &yv) in h.iter_mut().zip(&y) {
                        *hv = *hv + yv;
                    }
                    if ffn_record.is_some() {
                        layer_out.push(y);
                    }
                } else if ffn_record.is_some() {
                    layer_out.push(vec![T::zero(); spec.d_model]);
                }
                layer_trace.push(a);
            }
            trace.push(layer_trace);
            if let Some(rec) = ffn_record.as_mut() {
                rec.push(layer_out);
            }
        }

        let head = self.output.as_ref().unwrap_or(&self.embed);
        let logits = hs
            .iter()
            .map(|h| head.matvec(&self.rms_norm(h, &self.final_norm)))
            .collect();
        Ok(ForwardOutput {
            logits,
            trace: ActivationTrace { layers: trace },
            ffn_output: ffn_record,
        })
    }

    /// Greedy decoding: append the argmax token (lowest id on ties) until
    /// `max_new` tokens or the EOS id.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize, ablation: Option<&AblationSet>) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Model("cannot decode from an empty prompt".into()));
        }
        let mut seq = prompt.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            let out = self.forward(
                &seq,
                ForwardOptions {
                    ablation,
                    ..Default::default()
                },
            )?;
            let last = out.logits.last().expect("non-empty sequence");
            let next = argmax(last)? as u32;
            generated.push(next);
            seq.push(next);
            if Some(next) == self.spec.eos_token_id {
                break;
            }
        }
        Ok(generated)
    }

    /// Logits at the final prompt position.
    pub fn next_token_logits(&self, prompt: &[u32], ablation: Option<&AblationSet>) -> Result<Vec<T>> {
        if prompt.is_empty() {
            return Err(Error::Model("empty prompt".into()));
        }
        let out = self.forward(
            prompt,
            ForwardOptions {
                ablation,
                ..Default::default()
            },
        )?;
        Ok(out.logits.last().cloned().expect("non-empty"))
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax<T: Real>(v: &[T]) -> Result<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in v.iter().enumerate() {
        if x.is_nan() {
            return Err(Error::NonFinite("logits".into()));
        }
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Model("argmax of empty vector".into()))
}
