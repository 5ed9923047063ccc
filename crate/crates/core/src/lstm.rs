//! Single-layer LSTM with a ReLU input transform, constant dropout masks and a
//! linear output head, with gradients by backpropagation through time.
//!
//! All parameters live in one flat buffer. The canonical order is
//!
//! ```text
//! w_xx (d_in x d_raw), b_xx (d_in),
//! w_fx, w_ix, w_gx, w_ox (each H x d_in),
//! w_fh, w_ih, w_gh, w_oh (each H x H),
//! b_f, b_i, b_g, b_o (each H),
//! w_hy (H), b_y (1)
//! ```
//!
//! with every matrix row-major (one row per output unit).

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmDims {
    /// Raw input width (forcings plus attributes).
    pub input_raw: usize,
    /// Width after the input transform.
    pub input: usize,
    pub hidden: usize,
}

impl LstmDims {
    pub fn new(input_raw: usize, input: usize, hidden: usize) -> Result<Self> {
        if input_raw == 0 || input == 0 || hidden == 0 {
            return Err(Error::InvalidInput(format!(
                "dimensions must be positive, got ({input_raw}, {input}, {hidden})"
            )));
        }
        Ok(Self {
            input_raw,
            input,
            hidden,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(*self)
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each parameter group inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub w_xx: Range<usize>,
    pub b_xx: Range<usize>,
    /// `[w_fx; w_ix; w_gx; w_ox]`, `4H x d_in`.
    pub w_gx: Range<usize>,
    /// `[w_fh; w_ih; w_gh; w_oh]`, `4H x H`.
    pub w_gh: Range<usize>,
    /// `[b_f; b_i; b_g; b_o]`.
    pub b_g: Range<usize>,
    pub w_hy: Range<usize>,
    pub b_y: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(d: LstmDims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let h4 = 4 * d.hidden;
        let w_xx = take(d.input * d.input_raw);
        let b_xx = take(d.input);
        let w_gx = take(h4 * d.input);
        let w_gh = take(h4 * d.hidden);
        let b_g = take(h4);
        let w_hy = take(d.hidden);
        let b_y = take(1);
        Self {
            w_xx,
            b_xx,
            w_gx,
            w_gh,
            b_g,
            w_hy,
            b_y,
            total: at,
        }
    }

    /// Named groups in canonical order, the four gates split out.
    pub fn named_groups(&self, d: LstmDims) -> Vec<(&'static str, Range<usize>)> {
        let h = d.hidden;
        let split = |r: &Range<usize>, block: usize, names: [&'static str; 4]| {
            names
                .into_iter()
                .enumerate()
                .map(|(k, n)| (n, r.start + k * block..r.start + (k + 1) * block))
                .collect::<Vec<_>>()
        };
        let mut out = vec![("w_xx", self.w_xx.clone()), ("b_xx", self.b_xx.clone())];
        out.extend(split(&self.w_gx, h * d.input, ["w_fx", "w_ix", "w_gx", "w_ox"]));
        out.extend(split(&self.w_gh, h * h, ["w_fh", "w_ih", "w_gh", "w_oh"]));
        out.extend(split(&self.b_g, h, ["b_f", "b_i", "b_g", "b_o"]));
        out.push(("w_hy", self.w_hy.clone()));
        out.push(("b_y", self.b_y.clone()));
        out
    }
}

/// Trainable parameters; also used as the shape of a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub dims: LstmDims,
    pub params: Vec<f64>,
}

impl LstmWeights {
    pub fn zeros(dims: LstmDims) -> Self {
        Self {
            dims,
            params: vec![0.0; dims.n_params()],
        }
    }

    pub fn from_params(dims: LstmDims, params: Vec<f64>) -> Result<Self> {
        if params.len() != dims.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                dims.n_params(),
                params.len()
            )));
        }
        Ok(Self { dims, params })
    }

    pub fn layout(&self) -> Layout {
        self.dims.layout()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.params.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &LstmWeights) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape("weights of different dimensions".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
        Ok(())
    }
}

/// Weight initialization: gate and recurrent matrices uniform in
/// `±1/sqrt(H)`, input transform uniform in `±1/sqrt(d_raw)`, head uniform in
/// `±1/sqrt(H)`, all biases zero.
pub fn init_weights(dims: LstmDims, seed: u64) -> LstmWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = LstmWeights::zeros(dims);
    let l = w.layout();
    let in_scale = 1.0 / (dims.input_raw as f64).sqrt();
    let h_scale = 1.0 / (dims.hidden as f64).sqrt();
    for (range, scale) in [
        (l.w_xx.clone(), in_scale),
        (l.w_gx.clone(), h_scale),
        (l.w_gh.clone(), h_scale),
        (l.w_hy.clone(), h_scale),
    ] {
        for v in &mut w.params[range] {
            *v = rng.random_range(-scale..=scale);
        }
    }
    w
}

/// Init scale bound for parameter index `i`.
pub fn init_bound(dims: LstmDims, i: usize) -> f64 {
    let l = dims.layout();
    if l.w_xx.contains(&i) {
        1.0 / (dims.input_raw as f64).sqrt()
    } else if l.w_gx.contains(&i) || l.w_gh.contains(&i) || l.w_hy.contains(&i) {
        1.0 / (dims.hidden as f64).sqrt()
    } else {
        0.0
    }
}

/// Per-sequence dropout masks, constant over every timestep. Kept entries
/// carry the inverted-dropout scale `1 / (1 - p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl DropoutMasks {
    pub fn ones(dims: LstmDims) -> Self {
        Self {
            input: vec![1.0; dims.input],
            hidden: vec![1.0; dims.hidden],
        }
    }

    pub fn sample<R: Rng + ?Sized>(dims: LstmDims, p: f64, rng: &mut R) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0, 1)");
        let keep = 1.0 / (1.0 - p);
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect::<Vec<_>>()
        };
        let input = draw(dims.input);
        let hidden = draw(dims.hidden);
        Self { input, hidden }
    }
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub len: usize,
    /// Raw inputs, `T x d_raw`.
    pub x0: Vec<f64>,
    /// Post-ReLU cell inputs, `T x d_in`, before dropout.
    pub x: Vec<f64>,
    /// Gate activations `[f, i, g, o]`, `T x 4H`.
    pub gates: Vec<f64>,
    /// Cell states, `T x H`.
    pub s: Vec<f64>,
    pub tanh_s: Vec<f64>,
    /// Hidden states, `T x H`.
    pub h: Vec<f64>,
    pub y: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(weights: &LstmWeights, masks: Option<&DropoutMasks>, raw_len: usize) -> Result<usize> {
    let d = weights.dims;
    if weights.params.len() != d.n_params() {
        return Err(Error::Shape("parameter buffer does not match dimensions".into()));
    }
    if raw_len == 0 || !raw_len.is_multiple_of(d.input_raw) {
        return Err(Error::Shape(format!(
            "raw input of {raw_len} values is not a non-empty multiple of {}",
            d.input_raw
        )));
    }
    if let Some(m) = masks {
        if m.input.len() != d.input || m.hidden.len() != d.hidden {
            return Err(Error::Shape("dropout masks do not match dimensions".into()));
        }
    }
    Ok(raw_len / d.input_raw)
}

/// Runs the network over a `T x d_raw` row-major input from zero initial state.
///
/// With `masks = None` dropout is disabled.
pub fn forward(
    weights: &LstmWeights,
    masks: Option<&DropoutMasks>,
    raw_inputs: &[f64],
) -> Result<(Vec<f64>, ForwardTrace)> {
    let t_len = check_inputs(weights, masks, raw_inputs.len())?;
    let d = weights.dims;
    let (h, din, draw) = (d.hidden, d.input, d.input_raw);
    let l = weights.layout();
    let p = &weights.params;
    let (w_xx, b_xx) = (&p[l.w_xx.clone()], &p[l.b_xx.clone()]);
    let (w_gx, w_gh, b_g) = (&p[l.w_gx.clone()], &p[l.w_gh.clone()], &p[l.b_g.clone()]);
    let (w_hy, b_y) = (&p[l.w_hy.clone()], p[l.b_y.start]);

    let mut tr = ForwardTrace {
        len: t_len,
        x0: raw_inputs.to_vec(),
        x: vec![0.0; t_len * din],
        gates: vec![0.0; t_len * 4 * h],
        s: vec![0.0; t_len * h],
        tanh_s: vec![0.0; t_len * h],
        h: vec![0.0; t_len * h],
        y: vec![0.0; t_len],
    };
    let mut xd = vec![0.0; din];
    let mut hd = vec![0.0; h];
    let mut a = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];

    for t in 0..t_len {
        let x0 = &raw_inputs[t * draw..(t + 1) * draw];
        let x = &mut tr.x[t * din..(t + 1) * din];
        for j in 0..din {
            let z = dot(&w_xx[j * draw..(j + 1) * draw], x0) + b_xx[j];
            x[j] = z.max(0.0);
        }
        match masks {
            Some(m) => xd.iter_mut().zip(x.iter()).zip(&m.input).for_each(|((o, v), k)| *o = v * k),
            None => xd.copy_from_slice(x),
        }
        let h_prev = if t == 0 { &zeros[..] } else { &tr.h[(t - 1) * h..t * h] };
        match masks {
            Some(m) => hd.iter_mut().zip(h_prev).zip(&m.hidden).for_each(|((o, v), k)| *o = v * k),
            None => hd.copy_from_slice(h_prev),
        }
        for r in 0..4 * h {
            a[r] = dot(&w_gx[r * din..(r + 1) * din], &xd) + dot(&w_gh[r * h..(r + 1) * h], &hd) + b_g[r];
        }
        let gates = &mut tr.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            gates[k] = sigmoid(a[k]);
            gates[h + k] = sigmoid(a[h + k]);
            gates[2 * h + k] = a[2 * h + k].tanh();
            gates[3 * h + k] = sigmoid(a[3 * h + k]);
        }
        let (s_done, s_rest) = tr.s.split_at_mut(t * h);
        let s_prev = if t == 0 { &zeros[..] } else { &s_done[(t - 1) * h..] };
        let s = &mut s_rest[..h];
        let tanh_s = &mut tr.tanh_s[t * h..(t + 1) * h];
        let h_out = &mut tr.h[t * h..(t + 1) * h];
        for k in 0..h {
            s[k] = gates[k] * s_prev[k] + gates[h + k] * gates[2 * h + k];
            tanh_s[k] = s[k].tanh();
            h_out[k] = tanh_s[k] * gates[3 * h + k];
        }
        let y = dot(w_hy, h_out) + b_y;
        if !y.is_finite() || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { timestep: t });
        }
        tr.y[t] = y;
    }
    Ok((tr.y.clone(), tr))
}

/// Gradient of a loss with `dL/dy = loss_gradient` with respect to every
/// parameter, accumulated into `grad`.
pub fn backward_into(
    weights: &LstmWeights,
    masks: Option<&DropoutMasks>,
    trace: &ForwardTrace,
    loss_gradient: &[f64],
    grad: &mut LstmWeights,
) -> Result<()> {
    let t_len = check_inputs(weights, masks, trace.x0.len())?;
    if t_len != trace.len || loss_gradient.len() != t_len {
        return Err(Error::Shape(format!(
            "trace length {} / loss gradient length {} / input length {t_len} disagree",
            trace.len,
            loss_gradient.len()
        )));
    }
    if grad.dims != weights.dims || grad.params.len() != weights.params.len() {
        return Err(Error::Shape("gradient buffer does not match weights".into()));
    }
    let d = weights.dims;
    let (h, din, draw) = (d.hidden, d.input, d.input_raw);
    let l = weights.layout();
    let p = &weights.params;
    let (w_gx, w_gh, w_hy) = (&p[l.w_gx.clone()], &p[l.w_gh.clone()], &p[l.w_hy.clone()]);

    let (g_wxx, rest) = grad.params.split_at_mut(l.b_xx.start);
    let (g_bxx, rest) = rest.split_at_mut(l.w_gx.start - l.b_xx.start);
    let (g_wgx, rest) = rest.split_at_mut(l.w_gh.start - l.w_gx.start);
    let (g_wgh, rest) = rest.split_at_mut(l.b_g.start - l.w_gh.start);
    let (g_bg, rest) = rest.split_at_mut(l.w_hy.start - l.b_g.start);
    let (g_why, g_by) = rest.split_at_mut(h);

    let mut dh_next = vec![0.0; h];
    let mut ds_next = vec![0.0; h];
    let mut dh = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    let mut xd = vec![0.0; din];
    let mut hd = vec![0.0; h];
    let mut dxd = vec![0.0; din];
    let mut dhd = vec![0.0; h];
    let zeros = vec![0.0; h];

    for t in (0..t_len).rev() {
        let dy = loss_gradient[t];
        let h_t = &trace.h[t * h..(t + 1) * h];
        g_by[0] += dy;
        axpy(dy, h_t, g_why);
        for k in 0..h {
            dh[k] = w_hy[k] * dy + dh_next[k];
        }

        let gates = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        let tanh_s = &trace.tanh_s[t * h..(t + 1) * h];
        let s_prev = if t == 0 { &zeros[..] } else { &trace.s[(t - 1) * h..t * h] };
        for k in 0..h {
            let (f, i, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            let ts = tanh_s[k];
            let ds = dh[k] * o * (1.0 - ts * ts) + ds_next[k];
            da[k] = ds * s_prev[k] * f * (1.0 - f);
            da[h + k] = ds * g * i * (1.0 - i);
            da[2 * h + k] = ds * i * (1.0 - g * g);
            da[3 * h + k] = dh[k] * ts * o * (1.0 - o);
            ds_next[k] = ds * f;
        }

        let x = &trace.x[t * din..(t + 1) * din];
        match masks {
            Some(m) => xd.iter_mut().zip(x).zip(&m.input).for_each(|((o, v), k)| *o = v * k),
            None => xd.copy_from_slice(x),
        }
        let h_prev = if t == 0 { &zeros[..] } else { &trace.h[(t - 1) * h..t * h] };
        match masks {
            Some(m) => hd.iter_mut().zip(h_prev).zip(&m.hidden).for_each(|((o, v), k)| *o = v * k),
            None => hd.copy_from_slice(h_prev),
        }

        dxd.iter_mut().for_each(|v| *v = 0.0);
        dhd.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..4 * h {
            let a = da[r];
            g_bg[r] += a;
            if a == 0.0 {
                continue;
            }
            axpy(a, &xd, &mut g_wgx[r * din..(r + 1) * din]);
            axpy(a, &hd, &mut g_wgh[r * h..(r + 1) * h]);
            axpy(a, &w_gx[r * din..(r + 1) * din], &mut dxd);
            axpy(a, &w_gh[r * h..(r + 1) * h], &mut dhd);
        }
        match masks {
            Some(m) => {
                for k in 0..h {
                    dh_next[k] = dhd[k] * m.hidden[k];
                }
                for j in 0..din {
                    dxd[j] *= m.input[j];
                }
            }
            None => dh_next.copy_from_slice(&dhd),
        }

        let x0 = &trace.x0[t * draw..(t + 1) * draw];
        for j in 0..din {
            if x[j] > 0.0 && dxd[j] != 0.0 {
                g_bxx[j] += dxd[j];
                axpy(dxd[j], x0, &mut g_wxx[j * draw..(j + 1) * draw]);
            }
        }
    }
    Ok(())
}

/// Convenience wrapper around [`backward_into`] with a fresh gradient buffer.
pub fn backward(
    weights: &LstmWeights,
    masks: Option<&DropoutMasks>,
    trace: &ForwardTrace,
    loss_gradient: &[f64],
) -> Result<LstmWeights> {
    let mut grad = LstmWeights::zeros(weights.dims);
    backward_into(weights, masks, trace, loss_gradient, &mut grad)?;
    Ok(grad)
}

pub const CHECKPOINT_FORMAT: &str = "damflow-lstm";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk weight container. Parameter groups appear in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: LstmDims,
    pub seed: u64,
    pub epoch: usize,
    pub groups: Vec<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn new(weights: &LstmWeights, seed: u64, epoch: usize) -> Self {
        let groups = weights
            .layout()
            .named_groups(weights.dims)
            .into_iter()
            .map(|(name, r)| ParamGroup {
                name: name.to_string(),
                values: weights.params[r].to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: weights.dims,
            seed,
            epoch,
            groups,
        }
    }

    pub fn weights(&self) -> Result<LstmWeights> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let expected = self.dims.layout().named_groups(self.dims);
        if expected.len() != self.groups.len() {
            return Err(Error::Shape("checkpoint has the wrong number of groups".into()));
        }
        let mut params = Vec::with_capacity(self.dims.n_params());
        for ((name, r), g) in expected.iter().zip(&self.groups) {
            if *name != g.name || r.len() != g.values.len() {
                return Err(Error::Shape(format!(
                    "checkpoint group {} does not match expected {name} of length {}",
                    g.name,
                    r.len()
                )));
            }
            params.extend_from_slice(&g.values);
        }
        let w = LstmWeights::from_params(self.dims, params)?;
        if !w.is_finite() {
            return Err(Error::InvalidInput("checkpoint contains non-finite weights".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}
