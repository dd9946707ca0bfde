//! The four per-face decoders and their reverse-mode tape.
//!
//! Each decoder is `head(W2 * act(W1 * x + b1) + b2)` with a 128-wide hidden
//! layer. The geometry decoders use GELU, the texture decoders ReLU. Input
//! rows are `[feature_i | encode(face center_i)]`; rows are independent so a
//! batch is just a stack of single-row evaluations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gma::{ModelConfig, OffsetMode, UvdCoord};

pub const HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Two-layer perceptron weights. `w1` is `hidden x in`, `w2` is `out x hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

/// Gradients w.r.t. [`MlpWeights`], same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate values of one (batched) forward pass.
#[derive(Clone, Debug)]
pub struct GradTape {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl MlpWeights {
    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
            activation,
        }
    }

    /// Fan-in scaled normal init (`std = sqrt(2 / fan_in)`); the output layer
    /// is further scaled by `output_gain` so a fresh decoder starts near its
    /// head's neutral point. Biases start at zero.
    pub fn init(input: usize, output: usize, activation: Activation, output_gain: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("std");
        let n2 = Normal::new(0.0, output_gain * (2.0 / HIDDEN as f64).sqrt()).expect("std");
        let w1 = Array2::from_shape_simple_fn((HIDDEN, input), || n1.sample(&mut rng));
        let w2 = Array2::from_shape_simple_fn((output, HIDDEN), || n2.sample(&mut rng));
        Self {
            w1,
            b1: Array1::zeros(HIDDEN),
            w2,
            b2: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    /// Parameter slices in a fixed order: w1, b1, w2, b2.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("contiguous"),
            self.b1.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("contiguous"),
            self.b2.as_slice_mut().expect("contiguous"),
        ]
    }

    pub fn params(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Batched forward: one input row per face. Returns the pre-head output.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, GradTape)> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "decoder expects input width {}, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        let mut pre = input.dot(&self.w1.t());
        pre += &self.b1;
        let act = self.activation;
        let hidden = pre.mapv(|v| act.apply(v));
        let mut out = hidden.dot(&self.w2.t());
        out += &self.b2;
        let out = if out.is_standard_layout() { out } else { out.as_standard_layout().into_owned() };
        Ok((
            out,
            GradTape {
                input: input.to_owned(),
                pre,
                hidden,
            },
        ))
    }

    /// Backward through a recorded pass. Accumulates weight gradients into
    /// `grads` and returns the gradient w.r.t. the input rows.
    pub fn backward_batch(&self, tape: &GradTape, grad_out: ArrayView2<f64>, grads: &mut MlpGrads) -> Array2<f64> {
        grads.w2 += &grad_out.t().dot(&tape.hidden);
        grads.b2 += &grad_out.sum_axis(Axis(0));
        let mut d_pre = grad_out.dot(&self.w2);
        let act = self.activation;
        d_pre.zip_mut_with(&tape.pre, |d, &p| *d *= act.derivative(p));
        grads.w1 += &d_pre.t().dot(&tape.input);
        grads.b1 += &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.w1)
    }
}

impl MlpGrads {
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
        ]
    }
}

/// Single-input forward pass.
pub fn mlp_forward(w: &MlpWeights, input: &[f64]) -> Result<(Vec<f64>, GradTape)> {
    let view = ArrayView2::from_shape((1, input.len()), input).expect("row view");
    let (out, tape) = w.forward_batch(view)?;
    Ok((out.into_raw_vec_and_offset().0, tape))
}

/// Single-input backward pass; returns (weight grads, input grad).
pub fn mlp_backward(w: &MlpWeights, tape: &GradTape, grad_out: &[f64]) -> (MlpGrads, Vec<f64>) {
    let mut grads = w.zero_grads();
    let g = ArrayView2::from_shape((1, grad_out.len()), grad_out).expect("row view");
    let dx = w.backward_batch(tape, g, &mut grads);
    (grads, dx.into_raw_vec_and_offset().0)
}

/// The four decoders of an avatar.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoders {
    pub coarse: MlpWeights,
    pub fine: MlpWeights,
    pub color: MlpWeights,
    pub scale: MlpWeights,
}

/// Output gain of the last layer at initialization.
const OUTPUT_GAIN: f64 = 0.1;

impl Decoders {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d_in = cfg.decoder_input_dim();
        Self {
            coarse: MlpWeights::init(d_in, cfg.offset_mode.dim(), Activation::Gelu, OUTPUT_GAIN, seed ^ 0x11),
            fine: MlpWeights::init(d_in, 3 * cfg.n_k, Activation::Gelu, OUTPUT_GAIN, seed ^ 0x22),
            color: MlpWeights::init(d_in, 3 * cfg.n_k, Activation::Relu, OUTPUT_GAIN, seed ^ 0x33),
            scale: MlpWeights::init(d_in, 2 * cfg.n_k, Activation::Relu, OUTPUT_GAIN, seed ^ 0x44),
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let d_in = cfg.decoder_input_dim();
        let expect = [
            ("coarse", &self.coarse, cfg.offset_mode.dim(), Activation::Gelu),
            ("fine", &self.fine, 3 * cfg.n_k, Activation::Gelu),
            ("color", &self.color, 3 * cfg.n_k, Activation::Relu),
            ("scale", &self.scale, 2 * cfg.n_k, Activation::Relu),
        ];
        for (name, w, out, act) in expect {
            if w.input_dim() != d_in || w.output_dim() != out || w.hidden_dim() != HIDDEN || w.activation != act {
                return Err(Error::Shape(format!(
                    "decoder {name}: expected {d_in}->{HIDDEN}->{out} ({}), got {}->{}->{} ({})",
                    act.tag(),
                    w.input_dim(),
                    w.hidden_dim(),
                    w.output_dim(),
                    w.activation.tag()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Heads. Each maps raw decoder outputs to a bounded quantity and has an
// explicit backward.

/// `max_offset * tanh(raw)`, elementwise.
pub fn coarse_head(raw: &[f64], max_offset: f64) -> Vec<f64> {
    raw.iter().map(|r| max_offset * r.tanh()).collect()
}

pub fn coarse_head_backward(raw: &[f64], grad: &[f64], max_offset: f64) -> Vec<f64> {
    raw.iter()
        .zip(grad)
        .map(|(r, g)| {
            let t = r.tanh();
            g * max_offset * (1.0 - t * t)
        })
        .collect()
}

/// Three raw values per surfel: two logits (the third is fixed at 0) whose
/// softmax gives `(u, v, 1-u-v)`, and `d = max_d * tanh(raw)`.
pub fn fine_head(raw: &[f64], max_d: f64) -> Vec<UvdCoord> {
    raw.chunks_exact(3)
        .map(|r| {
            let (u, v, _) = softmax3(r[0], r[1]);
            UvdCoord {
                u,
                v,
                d: max_d * r[2].tanh(),
            }
        })
        .collect()
}

fn softmax3(a: f64, b: f64) -> (f64, f64, f64) {
    let m = a.max(b).max(0.0);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let ec = (-m).exp();
    let s = ea + eb + ec;
    (ea / s, eb / s, ec / s)
}

/// Backward of [`fine_head`]; `grad` holds `(du, dv, dd)` per surfel.
pub fn fine_head_backward(raw: &[f64], grad: &[[f64; 3]], max_d: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for (r, g) in raw.chunks_exact(3).zip(grad) {
        let (u, v, _) = softmax3(r[0], r[1]);
        // d softmax_i / d logit_j = p_i (delta_ij - p_j)
        let da = g[0] * u * (1.0 - u) + g[1] * (-v * u);
        let db = g[0] * (-u * v) + g[1] * v * (1.0 - v);
        let t = r[2].tanh();
        out.extend([da, db, g[2] * max_d * (1.0 - t * t)]);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn color_head(raw: &[f64]) -> Vec<[f64; 3]> {
    raw.chunks_exact(3)
        .map(|r| [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])])
        .collect()
}

pub fn color_head_backward(raw: &[f64], grad: &[[f64; 3]]) -> Vec<f64> {
    raw.chunks_exact(3)
        .zip(grad)
        .flat_map(|(r, g)| {
            (0..3).map(move |c| {
                let s = sigmoid(r[c]);
                g[c] * s * (1.0 - s)
            })
        })
        .collect()
}

/// Scale factor `exp(c * tanh(raw / c))`, `c = ln(max_factor)`: equals
/// `exp(raw)` near zero and stays inside `[1/max_factor, max_factor]`.
pub fn scale_head(raw: &[f64], max_factor: f64) -> Vec<[f64; 2]> {
    let c = max_factor.ln();
    raw.chunks_exact(2)
        .map(|r| [(c * (r[0] / c).tanh()).exp(), (c * (r[1] / c).tanh()).exp()])
        .collect()
}

pub fn scale_head_backward(raw: &[f64], grad: &[[f64; 2]], max_factor: f64) -> Vec<f64> {
    let c = max_factor.ln();
    raw.chunks_exact(2)
        .zip(grad)
        .flat_map(|(r, g)| {
            (0..2).map(move |i| {
                let t = (r[i] / c).tanh();
                let f = (c * t).exp();
                g[i] * f * (1.0 - t * t)
            })
        })
        .collect()
}

/// Coarse surfel color: mean of a face's fine colors.
pub fn coarse_color(fine_colors: &[[f64; 3]]) -> [f64; 3] {
    let n = fine_colors.len() as f64;
    let mut c = [0.0; 3];
    for fc in fine_colors {
        for i in 0..3 {
            c[i] += fc[i];
        }
    }
    c.map(|v| v / n)
}

/// Build the decoder input row `[feature | encoding]`.
pub fn input_row(feature: &[f64], encoding: &[f64]) -> Vec<f64> {
    feature.iter().chain(encoding).copied().collect()
}

/// Scalar normal offset of one face.
pub fn decode_coarse(w: &MlpWeights, f_geo: &[f64], mu_hat: &[f64], max_offset: f64) -> Result<Vec<f64>> {
    let (raw, _) = mlp_forward(w, &input_row(f_geo, mu_hat))?;
    Ok(coarse_head(&raw, max_offset))
}

pub fn decode_fine(w: &MlpWeights, f_geo: &[f64], mu_hat: &[f64], max_d: f64) -> Result<Vec<UvdCoord>> {
    let (raw, _) = mlp_forward(w, &input_row(f_geo, mu_hat))?;
    Ok(fine_head(&raw, max_d))
}

pub fn decode_color(w: &MlpWeights, f_tex: &[f64], mu_hat: &[f64]) -> Result<Vec<[f64; 3]>> {
    let (raw, _) = mlp_forward(w, &input_row(f_tex, mu_hat))?;
    Ok(color_head(&raw))
}

pub fn decode_scale(w: &MlpWeights, f_tex: &[f64], mu_hat: &[f64], max_factor: f64) -> Result<Vec<[f64; 2]>> {
    let (raw, _) = mlp_forward(w, &input_row(f_tex, mu_hat))?;
    Ok(scale_head(&raw, max_factor))
}

/// Offset mode helper used where the coarse head dimension matters.
pub fn coarse_dim(mode: OffsetMode) -> usize {
    mode.dim()
}
