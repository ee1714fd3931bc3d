//! Segment anomaly scorer.
//!
//! ```text
//! x -> FC1 -> ReLU -> dropout -> (* softmax(Att1 .)) -> FC2 -> ReLU -> dropout
//!   -> (* softmax(Att2 .)) -> Out -> sigmoid
//! ```
//!
//! Each attention layer is a square linear map followed by a softmax over the
//! feature dimension; its output gates the backbone activation element-wise.
//! With [`Gate::Scaled`] (the default) the gate is `n * softmax`, so uniform
//! attention passes the activation through unchanged instead of shrinking it
//! by `1/n`.
//! Parameters live in one flat `f32` vector (see [`Layout`]); all arithmetic
//! runs in `f64`.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::rng;

pub const HIDDEN1: usize = 512;
pub const HIDDEN2: usize = 32;
pub const SCORE_CLAMP: f64 = 1e-7;

const MODEL_MAGIC: &[u8; 4] = b"FVAD";
const MODEL_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("feature width mismatch: model expects {expected}, got {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("parameter layout mismatch: expected {expected} values, got {found}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("batch is empty or labels do not match rows")]
    BadBatch,
    #[error("model file: {0}")]
    Format(String),
    #[error("model file i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Shape of the network. Parameter order: FC1 weights, FC1 bias, Att1
/// weights, Att1 bias, FC2 weights, FC2 bias, Att2 weights, Att2 bias, output
/// weights, output bias. Weight matrices are row-major `[out][in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub gate: Gate,
}

/// How an attention distribution multiplies the activation of width `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gate {
    /// `h * softmax(u)`
    Plain,
    /// `h * n * softmax(u)`
    #[default]
    Scaled,
}

impl Gate {
    fn factor(self, n: usize) -> f64 {
        match self {
            Gate::Plain => 1.0,
            Gate::Scaled => n as f64,
        }
    }
}

/// One parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: &'static str,
    pub range: Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_weight: bool,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    fc1_w: usize,
    fc1_b: usize,
    att1_w: usize,
    att1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    att2_w: usize,
    att2_b: usize,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    pub fn new(dim: usize) -> Self {
        Self::with_widths(dim, HIDDEN1, HIDDEN2)
    }

    pub fn with_widths(dim: usize, hidden1: usize, hidden2: usize) -> Self {
        assert!(dim > 0 && hidden1 > 0 && hidden2 > 0, "layer widths must be positive");
        Self {
            dim,
            hidden1,
            hidden2,
            gate: Gate::default(),
        }
    }

    pub fn with_gate(self, gate: Gate) -> Self {
        Self { gate, ..self }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let (d, h1, h2) = (self.dim, self.hidden1, self.hidden2);
        let shapes: [(&'static str, usize, usize, bool); 10] = [
            ("fc1.weight", d, h1, true),
            ("fc1.bias", d, h1, false),
            ("att1.weight", h1, h1, true),
            ("att1.bias", h1, h1, false),
            ("fc2.weight", h1, h2, true),
            ("fc2.bias", h1, h2, false),
            ("att2.weight", h2, h2, true),
            ("att2.bias", h2, h2, false),
            ("out.weight", h2, 1, true),
            ("out.bias", h2, 1, false),
        ];
        let mut start = 0;
        shapes
            .iter()
            .map(|&(name, fan_in, fan_out, is_weight)| {
                let len = if is_weight { fan_in * fan_out } else { fan_out };
                let t = Tensor {
                    name,
                    range: start..start + len,
                    fan_in,
                    fan_out,
                    is_weight,
                };
                start += len;
                t
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let (d, h1, h2) = (self.dim, self.hidden1, self.hidden2);
        d * h1 + h1 + h1 * h1 + h1 + h1 * h2 + h2 + h2 * h2 + h2 + h2 + 1
    }

    fn offsets(&self) -> Offsets {
        let t = self.tensors();
        Offsets {
            fc1_w: t[0].range.start,
            fc1_b: t[1].range.start,
            att1_w: t[2].range.start,
            att1_b: t[3].range.start,
            fc2_w: t[4].range.start,
            fc2_b: t[5].range.start,
            att2_w: t[6].range.start,
            att2_b: t[7].range.start,
            out_w: t[8].range.start,
            out_b: t[9].range.start,
        }
    }
}

/// Parameter count of the default architecture for feature width `d`.
pub fn param_count(d: usize) -> usize {
    Layout::new(d).param_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub layout: Layout,
    pub values: Vec<f32>,
}

/// A flat update vector with the same layout as [`DetectorParams`]. Used both
/// for loss gradients and for the `theta_k - theta` deltas sent to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDelta {
    pub values: Vec<f32>,
}

impl GradientDelta {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    /// `after - before`, element-wise.
    pub fn between(after: &DetectorParams, before: &DetectorParams) -> Result<Self, DetectorError> {
        check_len(before.values.len(), after.values.len())?;
        Ok(Self {
            values: after
                .values
                .iter()
                .zip(&before.values)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)) as f32)
                .collect(),
        })
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), DetectorError> {
    if expected == found {
        Ok(())
    } else {
        Err(DetectorError::LayoutMismatch { expected, found })
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(d: usize, seed: u64) -> DetectorParams {
    init_params_with(Layout::new(d), seed)
}

pub fn init_params_with(layout: Layout, seed: u64) -> DetectorParams {
    let mut r = rng::stream(&[seed, rng::tag::INIT]);
    let mut values = vec![0.0f32; layout.param_count()];
    for t in layout.tensors().iter().filter(|t| t.is_weight) {
        let limit = (6.0 / (t.fan_in + t.fan_out) as f64).sqrt();
        for v in &mut values[t.range.clone()] {
            *v = r.random_range(-limit..limit) as f32;
        }
    }
    DetectorParams { layout, values }
}

impl DetectorParams {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.param_count()],
        }
    }

    pub fn wide(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    /// Writes the model file: `FVAD`, version, `d`, `hidden1`, `hidden2` and
    /// the gate kind (0 plain, 1 scaled) as little-endian `u32`, the
    /// parameter count as `u64`, then the `f32` parameters.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), DetectorError> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        buf.extend_from_slice(MODEL_MAGIC);
        let gate = match self.layout.gate {
            Gate::Plain => 0u32,
            Gate::Scaled => 1,
        };
        let l = &self.layout;
        for v in [MODEL_VERSION, l.dim as u32, l.hidden1 as u32, l.hidden2 as u32, gate] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, DetectorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN || &bytes[..4] != MODEL_MAGIC {
            return Err(DetectorError::Format("bad magic or truncated header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if u32_at(4) != MODEL_VERSION {
            return Err(DetectorError::Format(format!("unsupported version {}", u32_at(4))));
        }
        let (d, h1, h2) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        if d == 0 || h1 == 0 || h2 == 0 {
            return Err(DetectorError::Format("zero layer width".into()));
        }
        let gate = match u32_at(20) {
            0 => Gate::Plain,
            1 => Gate::Scaled,
            g => return Err(DetectorError::Format(format!("unknown gate kind {g}"))),
        };
        let layout = Layout::with_widths(d, h1, h2).with_gate(gate);
        let count = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        check_len(layout.param_count(), count)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * count {
            return Err(DetectorError::Format(format!(
                "expected {} parameter bytes, found {}",
                4 * count,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { layout, values })
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Forward pass mode. Dropout is only active in training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Row-major `B x d`.
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[b] = W in[b] + bias` for row-major `W: [n_out][n_in]`. Loops over
/// weight rows outermost so each row is reused across the batch.
fn linear(w: &[f64], bias: &[f64], input: &[f64], n_in: usize, out: &mut [f64]) {
    let n_out = bias.len();
    let rows = input.len() / n_in;
    for (k, wk) in w.chunks_exact(n_in).enumerate() {
        let mut b = 0;
        while b + 4 <= rows {
            let xs = [0, 1, 2, 3].map(|i| &input[(b + i) * n_in..(b + i + 1) * n_in]);
            let d = dot4(wk, xs);
            for i in 0..4 {
                out[(b + i) * n_out + k] = bias[k] + d[i];
            }
            b += 4;
        }
        for b in b..rows {
            out[b * n_out + k] = bias[k] + dot(wk, &input[b * n_in..(b + 1) * n_in]);
        }
    }
}

/// Four [`dot`]s sharing `w`, with the same accumulation order as `dot`.
#[inline]
fn dot4(w: &[f64], xs: [&[f64]; 4]) -> [f64; 4] {
    let n = w.len();
    let body = n - n % 8;
    let mut acc = [[0.0f64; 8]; 4];
    let mut j = 0;
    while j < body {
        let wj = &w[j..j + 8];
        for (a, x) in acc.iter_mut().zip(&xs) {
            let xj = &x[j..j + 8];
            for k in 0..8 {
                a[k] += wj[k] * xj[k];
            }
        }
        j += 8;
    }
    let mut out = [0.0; 4];
    for ((o, a), x) in out.iter_mut().zip(&acc).zip(&xs) {
        let tail: f64 = w[body..].iter().zip(&x[body..]).map(|(p, q)| p * q).sum();
        *o = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail;
    }
    out
}

/// Accumulates weight, bias and input gradients of [`linear`].
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    w: &[f64],
    input: &[f64],
    d_out: &[f64],
    n_in: usize,
    n_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut d_in: Option<&mut [f64]>,
) {
    for k in 0..n_out {
        let dwk = &mut dw[k * n_in..(k + 1) * n_in];
        let wk = &w[k * n_in..(k + 1) * n_in];
        for (b, x) in input.chunks_exact(n_in).enumerate() {
            let gk = d_out[b * n_out + k];
            db[k] += gk;
            if gk != 0.0 {
                axpy(dwk, gk, x);
                if let Some(d_in) = d_in.as_deref_mut() {
                    axpy(&mut d_in[b * n_in..(b + 1) * n_in], gk, wk);
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax over each row of width `n`.
fn softmax_rows(u: &mut [f64], n: usize) {
    for row in u.chunks_exact_mut(n) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    batch: usize,
    x: Vec<f64>,
    z1: Vec<f64>,
    mask1: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    g1: Vec<f64>,
    z2: Vec<f64>,
    mask2: Vec<f64>,
    h2: Vec<f64>,
    a2: Vec<f64>,
    g2: Vec<f64>,
    scores: Vec<f64>,
}

fn dropout_masks(mode: Mode, b: usize, h1: usize, h2: usize) -> (Vec<f64>, Vec<f64>) {
    match mode {
        Mode::Train { dropout, seed } if dropout > 0.0 => {
            let keep = 1.0 - dropout;
            let scale = 1.0 / keep;
            let mut r = rng::stream(&[seed]);
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| if r.random::<f64>() < keep { scale } else { 0.0 })
                    .collect()
            };
            let m1 = draw(b * h1);
            let m2 = draw(b * h2);
            (m1, m2)
        }
        _ => (vec![1.0; b * h1], vec![1.0; b * h2]),
    }
}

fn run_forward(layout: &Layout, p: &[f64], x: Vec<f64>, mode: Mode) -> Trace {
    let Layout { dim, hidden1: n1, hidden2: n2, gate } = *layout;
    let o = layout.offsets();
    let b = x.len() / dim;
    let (mask1, mask2) = dropout_masks(mode, b, n1, n2);

    let mut z1 = vec![0.0; b * n1];
    linear(&p[o.fc1_w..o.fc1_b], &p[o.fc1_b..o.att1_w], &x, dim, &mut z1);
    let h1: Vec<f64> = z1.iter().zip(&mask1).map(|(&z, &m)| z.max(0.0) * m).collect();
    let mut a1 = vec![0.0; b * n1];
    linear(&p[o.att1_w..o.att1_b], &p[o.att1_b..o.fc2_w], &h1, n1, &mut a1);
    softmax_rows(&mut a1, n1);
    let c1 = gate.factor(n1);
    let g1: Vec<f64> = h1.iter().zip(&a1).map(|(h, a)| c1 * h * a).collect();

    let mut z2 = vec![0.0; b * n2];
    linear(&p[o.fc2_w..o.fc2_b], &p[o.fc2_b..o.att2_w], &g1, n1, &mut z2);
    let h2: Vec<f64> = z2.iter().zip(&mask2).map(|(&z, &m)| z.max(0.0) * m).collect();
    let mut a2 = vec![0.0; b * n2];
    linear(&p[o.att2_w..o.att2_b], &p[o.att2_b..o.out_w], &h2, n2, &mut a2);
    softmax_rows(&mut a2, n2);
    let c2 = gate.factor(n2);
    let g2: Vec<f64> = h2.iter().zip(&a2).map(|(h, a)| c2 * h * a).collect();

    let mut logits = vec![0.0; b];
    linear(&p[o.out_w..o.out_b], &p[o.out_b..o.out_b + 1], &g2, n2, &mut logits);
    let scores = logits.into_iter().map(sigmoid).collect();

    Trace {
        batch: b,
        x,
        z1,
        mask1,
        h1,
        a1,
        g1,
        z2,
        mask2,
        h2,
        a2,
        g2,
        scores,
    }
}

fn widen(features: &[f32]) -> Vec<f64> {
    features.iter().map(|&v| f64::from(v)).collect()
}

fn check_width(layout: &Layout, features: &[f32]) -> Result<(), DetectorError> {
    if !features.len().is_multiple_of(layout.dim) {
        return Err(DetectorError::WidthMismatch {
            expected: layout.dim,
            found: features.len() % layout.dim,
        });
    }
    Ok(())
}

/// Scores in `[0, 1]` for each row of `features` (row-major `B x d`).
pub fn forward(params: &DetectorParams, features: &[f32], mode: Mode) -> Result<Vec<f64>, DetectorError> {
    forward_wide(&params.layout, &params.wide(), features, mode)
}

/// [`forward`] with parameters already widened to `f64`.
pub fn forward_wide(layout: &Layout, params: &[f64], features: &[f32], mode: Mode) -> Result<Vec<f64>, DetectorError> {
    check_width(layout, features)?;
    check_len(layout.param_count(), params.len())?;
    Ok(run_forward(layout, params, widen(features), mode).scores)
}

/// Attention distributions of both gates for each row, for inspection.
pub fn attention_maps(params: &DetectorParams, features: &[f32]) -> Result<(Vec<f64>, Vec<f64>), DetectorError> {
    check_width(&params.layout, features)?;
    let t = run_forward(&params.layout, &params.wide(), widen(features), Mode::Eval);
    Ok((t.a1, t.a2))
}

/// Mean binary cross-entropy plus `l2_coeff * sum(w^2)` over weight tensors
/// (biases excluded), and its gradient.
pub fn loss_and_grad(
    params: &DetectorParams,
    batch: &TrainBatch,
    l2_coeff: f64,
    mode: Mode,
) -> Result<(f64, GradientDelta), DetectorError> {
    let (loss, grad) = loss_and_grad_wide(&params.layout, &params.wide(), batch, l2_coeff, mode)?;
    Ok((
        loss,
        GradientDelta {
            values: grad.into_iter().map(|g| g as f32).collect(),
        },
    ))
}

/// [`loss_and_grad`] over `f64` parameters, returning an `f64` gradient.
pub fn loss_and_grad_wide(
    layout: &Layout,
    p: &[f64],
    batch: &TrainBatch,
    l2_coeff: f64,
    mode: Mode,
) -> Result<(f64, Vec<f64>), DetectorError> {
    check_width(layout, &batch.features)?;
    check_len(layout.param_count(), p.len())?;
    let bsz = batch.features.len() / layout.dim;
    if bsz == 0 || bsz != batch.labels.len() {
        return Err(DetectorError::BadBatch);
    }
    let Layout { dim, hidden1: n1, hidden2: n2, gate } = *layout;
    let o = layout.offsets();
    let t = run_forward(layout, p, widen(&batch.features), mode);

    let mut grad = vec![0.0f64; p.len()];
    let mut loss = 0.0;
    let mut d_logit = vec![0.0; bsz];
    for ((s, &y), dl) in t.scores.iter().zip(&batch.labels).zip(d_logit.iter_mut()) {
        let y = f64::from(y);
        let sc = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        loss -= y * sc.ln() + (1.0 - y) * (1.0 - sc).ln();
        // d/dlogit of BCE(sigmoid) is s - y; zero where the clamp is active
        if sc == *s {
            *dl = (s - y) / bsz as f64;
        }
    }
    loss /= bsz as f64;

    let (g_fc1, rest) = grad.split_at_mut(o.att1_w);
    let (g_att1, rest) = rest.split_at_mut(o.fc2_w - o.att1_w);
    let (g_fc2, rest) = rest.split_at_mut(o.att2_w - o.fc2_w);
    let (g_att2, g_out) = rest.split_at_mut(o.out_w - o.att2_w);
    let (g_fc1_w, g_fc1_b) = g_fc1.split_at_mut(o.fc1_b);
    let (g_att1_w, g_att1_b) = g_att1.split_at_mut(o.att1_b - o.att1_w);
    let (g_fc2_w, g_fc2_b) = g_fc2.split_at_mut(o.fc2_b - o.fc2_w);
    let (g_att2_w, g_att2_b) = g_att2.split_at_mut(o.att2_b - o.att2_w);
    let (g_out_w, g_out_b) = g_out.split_at_mut(o.out_b - o.out_w);

    // output layer
    let mut d_g2 = vec![0.0; bsz * n2];
    linear_backward(&p[o.out_w..o.out_b], &t.g2, &d_logit, n2, 1, g_out_w, g_out_b, Some(&mut d_g2));

    // gate 2: g2 = h2 * a2
    let (d_h2, d_u2) = gate_backward(&d_g2, &t.h2, &t.a2, n2, gate.factor(n2));
    let mut d_h2 = d_h2;
    linear_backward(&p[o.att2_w..o.att2_b], &t.h2, &d_u2, n2, n2, g_att2_w, g_att2_b, Some(&mut d_h2));
    let d_z2: Vec<f64> = d_h2
        .iter()
        .zip(&t.mask2)
        .zip(&t.z2)
        .map(|((g, m), z)| if *z > 0.0 { g * m } else { 0.0 })
        .collect();

    let mut d_g1 = vec![0.0; bsz * n1];
    linear_backward(&p[o.fc2_w..o.fc2_b], &t.g1, &d_z2, n1, n2, g_fc2_w, g_fc2_b, Some(&mut d_g1));

    // gate 1
    let (d_h1, d_u1) = gate_backward(&d_g1, &t.h1, &t.a1, n1, gate.factor(n1));
    let mut d_h1 = d_h1;
    linear_backward(&p[o.att1_w..o.att1_b], &t.h1, &d_u1, n1, n1, g_att1_w, g_att1_b, Some(&mut d_h1));
    let d_z1: Vec<f64> = d_h1
        .iter()
        .zip(&t.mask1)
        .zip(&t.z1)
        .map(|((g, m), z)| if *z > 0.0 { g * m } else { 0.0 })
        .collect();
    linear_backward(&p[o.fc1_w..o.fc1_b], &t.x, &d_z1, dim, n1, g_fc1_w, g_fc1_b, None);
    debug_assert_eq!(t.batch, bsz);

    if l2_coeff != 0.0 {
        for tensor in layout.tensors().iter().filter(|t| t.is_weight) {
            let r = tensor.range.clone();
            loss += l2_coeff * p[r.clone()].iter().map(|w| w * w).sum::<f64>();
            for (g, w) in grad[r.clone()].iter_mut().zip(&p[r]) {
                *g += 2.0 * l2_coeff * w;
            }
        }
    }
    Ok((loss, grad))
}

/// Backward through `g = c * h * softmax(u)`: returns `(dL/dh, dL/du)`, where
/// `dL/dh` still lacks the contribution flowing back through `u`.
fn gate_backward(d_g: &[f64], h: &[f64], a: &[f64], n: usize, c: f64) -> (Vec<f64>, Vec<f64>) {
    let d_h: Vec<f64> = d_g.iter().zip(a).map(|(g, a)| c * g * a).collect();
    let mut d_u = vec![0.0; d_g.len()];
    for (((dg, h), a), du) in d_g
        .chunks_exact(n)
        .zip(h.chunks_exact(n))
        .zip(a.chunks_exact(n))
        .zip(d_u.chunks_exact_mut(n))
    {
        // da = c * dg * h; du = a * (da - <da, a>)
        let inner: f64 = dg.iter().zip(h).zip(a).map(|((g, h), a)| c * g * h * a).sum();
        for k in 0..n {
            du[k] = a[k] * (c * dg[k] * h[k] - inner);
        }
    }
    (d_h, d_u)
}

/// `params - eta * grad`, element-wise.
pub fn sgd_step(params: &DetectorParams, grad: &GradientDelta, eta: f64) -> Result<DetectorParams, DetectorError> {
    check_len(params.values.len(), grad.values.len())?;
    if eta == 0.0 {
        return Ok(params.clone());
    }
    Ok(DetectorParams {
        layout: params.layout,
        values: params
            .values
            .iter()
            .zip(&grad.values)
            .map(|(&p, &g)| (f64::from(p) - eta * f64::from(g)) as f32)
            .collect(),
    })
}

/// [`sgd_step`] in place on an `f64` gradient, avoiding a rounding of the
/// gradient to `f32` first.
pub fn sgd_step_wide(params: &mut DetectorParams, grad: &[f64], eta: f64) -> Result<(), DetectorError> {
    check_len(params.values.len(), grad.len())?;
    if eta == 0.0 {
        return Ok(());
    }
    for (p, &g) in params.values.iter_mut().zip(grad) {
        *p = (f64::from(*p) - eta * g) as f32;
    }
    Ok(())
}
