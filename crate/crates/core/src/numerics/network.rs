use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{Error, Result};
use crate::par::Exec;

/// Probabilities leaving the network are clamped to `[PROB_EPS, 1 - PROB_EPS]`
/// so every downstream `log` stays finite.
pub const PROB_EPS: f64 = 1e-7;

const LEAKY_SLOPE: f64 = 0.01;
/// Batches at least this tall are split across threads.
const PAR_MIN_ROWS: usize = 256;

/// Affine layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Tensor2::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Uniform fan-in (He) initialisation, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut layer = Dense::zeros(fan_in, fan_out);
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Tensor2, exec: Exec) -> Result<Tensor2> {
        x.affine(&self.weight, &self.bias, exec)
    }

    /// Returns (parameter gradient, gradient w.r.t. the layer input).
    fn backward(&self, x: &Tensor2, dy: &Tensor2, want_dx: bool) -> Result<(Dense, Option<Tensor2>)> {
        let grad = Dense {
            weight: x.t_matmul(dy)?,
            bias: dy.col_sums(),
        };
        let dx = if want_dx {
            Some(dy.matmul_t(&self.weight)?)
        } else {
            None
        };
        Ok((grad, dx))
    }
}

/// Every trainable tensor of a [`Network`]. Also used, with the same layout,
/// for gradients and optimizer velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub extractor: Vec<Dense>,
    pub q_head: Dense,
    pub pu_head: Dense,
}

pub type Gradients = ParamSet;

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        let z = |d: &Dense| Dense::zeros(d.fan_in(), d.fan_out());
        ParamSet {
            extractor: other.extractor.iter().map(z).collect(),
            q_head: z(&other.q_head),
            pu_head: z(&other.pu_head),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.q_head))
            .chain(std::iter::once(&self.pu_head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.q_head))
            .chain(std::iter::once(&mut self.pu_head))
    }

    /// Flat views of each tensor: for every layer its weight, then its bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &ParamSet) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() || src.iter().zip(&dst).any(|(s, d)| s.len() != d.len()) {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

/// Shared feature extractor (affine + LeakyReLU blocks) feeding a C-way
/// softmax head `q` and a bank of sigmoid PU heads `f`.
///
/// Column `c` of the PU head is the binary "known class c vs rest" scorer.
/// With a single PU head the bank has one column that scores "any known".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub params: ParamSet,
}

/// Intermediates recorded by [`Network::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    layer_inputs: Vec<Tensor2>,
    pre_activations: Vec<Tensor2>,
    features: Tensor2,
    q_softmax: Tensor2,
    pu_sigmoid: Tensor2,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `n × C`, rows sum to one (up to clamping).
    pub q_probs: Tensor2,
    /// `n × H`, each entry strictly inside (0, 1).
    pub pu_probs: Tensor2,
    pub cache: ActivationCache,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    let cols = out.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl Network {
    /// `hidden` lists the extractor widths; the last one is the feature width.
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        hidden: &[usize],
        n_classes: usize,
        n_pu_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_in == 0 || n_classes == 0 || n_pu_heads == 0 || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "network dimensions must be positive (d_in={d_in}, hidden={hidden:?}, C={n_classes}, heads={n_pu_heads})"
            )));
        }
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut width = d_in;
        for &h in hidden {
            extractor.push(Dense::he_uniform(width, h, rng));
            width = h;
        }
        let q_head = Dense::he_uniform(width, n_classes, rng);
        let pu_head = Dense::he_uniform(width, n_pu_heads, rng);
        Ok(Network {
            params: ParamSet {
                extractor,
                q_head,
                pu_head,
            },
        })
    }

    /// All-zero parameters with the given layout.
    pub fn zeros(d_in: usize, hidden: &[usize], n_classes: usize, n_pu_heads: usize) -> Self {
        let mut extractor = Vec::new();
        let mut width = d_in;
        for &h in hidden {
            extractor.push(Dense::zeros(width, h));
            width = h;
        }
        Network {
            params: ParamSet {
                extractor,
                q_head: Dense::zeros(width, n_classes),
                pu_head: Dense::zeros(width, n_pu_heads),
            },
        }
    }

    pub fn d_in(&self) -> usize {
        self.params
            .extractor
            .first()
            .unwrap_or(&self.params.q_head)
            .fan_in()
    }

    pub fn n_classes(&self) -> usize {
        self.params.q_head.fan_out()
    }

    pub fn n_pu_heads(&self) -> usize {
        self.params.pu_head.fan_out()
    }

    /// Checks that consecutive layers chain and both heads read the feature width.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.d_in();
        for (i, l) in self.params.extractor.iter().enumerate() {
            if l.fan_in() != width || l.bias.len() != l.fan_out() {
                return Err(Error::Shape(format!("extractor layer {i} does not chain")));
            }
            width = l.fan_out();
        }
        for (name, head) in [("q", &self.params.q_head), ("pu", &self.params.pu_head)] {
            if head.fan_in() != width || head.bias.len() != head.fan_out() {
                return Err(Error::Shape(format!("{name} head does not read the feature width")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor2) -> Result<Forward> {
        let exec = if batch.rows() >= PAR_MIN_ROWS {
            Exec::Parallel
        } else {
            Exec::Sequential
        };
        self.forward_with(batch, exec)
    }

    pub fn forward_with(&self, batch: &Tensor2, exec: Exec) -> Result<Forward> {
        if batch.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "batch has {} bands, network expects {}",
                batch.cols(),
                self.d_in()
            )));
        }
        if !batch.is_finite() {
            return Err(Error::Input("batch contains non-finite values".into()));
        }
        let mut layer_inputs = Vec::with_capacity(self.params.extractor.len());
        let mut pre_activations = Vec::with_capacity(self.params.extractor.len());
        let mut h = batch.clone();
        for layer in &self.params.extractor {
            let z = layer.forward(&h, exec)?;
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = leaky(*v));
            layer_inputs.push(std::mem::replace(&mut h, a));
            pre_activations.push(z);
        }
        let q_logits = self.params.q_head.forward(&h, exec)?;
        let pu_logits = self.params.pu_head.forward(&h, exec)?;
        let q_softmax = softmax_rows(&q_logits);
        let mut pu_sigmoid = pu_logits;
        pu_sigmoid.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut q_probs = q_softmax.clone();
        q_probs.data_mut().iter_mut().for_each(|v| *v = clamp_prob(*v));
        let mut pu_probs = pu_sigmoid.clone();
        pu_probs.data_mut().iter_mut().for_each(|v| *v = clamp_prob(*v));

        Ok(Forward {
            q_probs,
            pu_probs,
            cache: ActivationCache {
                layer_inputs,
                pre_activations,
                features: h,
                q_softmax,
                pu_sigmoid,
            },
        })
    }

    /// Reverse pass given upstream gradients w.r.t. the output probabilities.
    ///
    /// The output clamp is treated as the identity here, so heads saturated
    /// at the clamp still receive a (tiny) gradient.
    pub fn backward(&self, cache: &ActivationCache, dl_dq: &Tensor2, dl_dpu: &Tensor2) -> Result<Gradients> {
        let n = cache.features.rows();
        if cache.layer_inputs.len() != self.params.extractor.len()
            || cache.features.cols() != self.params.q_head.fan_in()
        {
            return Err(Error::Usage("activation cache does not belong to this network".into()));
        }
        if dl_dq.shape() != (n, self.n_classes()) || dl_dpu.shape() != (n, self.n_pu_heads()) {
            return Err(Error::Shape(format!(
                "upstream gradients {:?}/{:?} do not match outputs ({n}x{}, {n}x{})",
                dl_dq.shape(),
                dl_dpu.shape(),
                self.n_classes(),
                self.n_pu_heads()
            )));
        }

        // softmax Jacobian: dz_i = s_i (g_i - Σ_j g_j s_j)
        let c = self.n_classes();
        let mut dz_q = Tensor2::zeros(n, c);
        for r in 0..n {
            let s = cache.q_softmax.row(r);
            let g = dl_dq.row(r);
            let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
            for (k, out) in dz_q.row_mut(r).iter_mut().enumerate() {
                *out = s[k] * (g[k] - dot);
            }
        }
        let mut dz_pu = dl_dpu.clone();
        for (d, &s) in dz_pu.data_mut().iter_mut().zip(cache.pu_sigmoid.data()) {
            *d *= s * (1.0 - s);
        }

        let (q_grad, dh_q) = self.params.q_head.backward(&cache.features, &dz_q, true)?;
        let (pu_grad, dh_pu) = self.params.pu_head.backward(&cache.features, &dz_pu, true)?;
        let mut dh = dh_q.expect("requested");
        for (a, b) in dh.data_mut().iter_mut().zip(dh_pu.expect("requested").data()) {
            *a += b;
        }

        let mut extractor = Vec::with_capacity(self.params.extractor.len());
        for (i, layer) in self.params.extractor.iter().enumerate().rev() {
            let mut dz = dh;
            for (d, &z) in dz.data_mut().iter_mut().zip(cache.pre_activations[i].data()) {
                *d *= leaky_grad(z);
            }
            let (g, dx) = layer.backward(&cache.layer_inputs[i], &dz, i > 0)?;
            extractor.push(g);
            dh = dx.unwrap_or_else(|| Tensor2::zeros(0, 0));
        }
        extractor.reverse();

        Ok(ParamSet {
            extractor,
            q_head: q_grad,
            pu_head: pu_grad,
        })
    }
}
