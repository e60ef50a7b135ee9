//! Slice-wise spatial message passing.
//!
//! A C×H×W tensor is cut into slices along rows (downward/upward) or columns
//! (rightward/leftward). Walking the slices in propagation order, every slice
//! after the first receives `ReLU(conv1d(previous slice))` as a residual:
//!
//! ```text
//! out[i, t, p] = x[i, t, p] + relu( Σ_m Σ_n src[m, t-1, p + n - w/2] · K[m, i, n] )
//! ```
//!
//! where `src` is the already-updated output (sequential scheme) or the
//! original input (parallel scheme). The first slice is copied unchanged.
//! Taps falling outside the slice read zero.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Precision, Tensor3, TensorError, KERNEL_MAGIC};

#[derive(Debug, Error)]
pub enum ScnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Down,
    Up,
    Right,
    Left,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Down,
        Direction::Up,
        Direction::Right,
        Direction::Left,
    ];

    pub fn letter(self) -> char {
        match self {
            Direction::Down => 'D',
            Direction::Up => 'U',
            Direction::Right => 'R',
            Direction::Left => 'L',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'D' => Some(Direction::Down),
            'U' => Some(Direction::Up),
            'R' => Some(Direction::Right),
            'L' => Some(Direction::Left),
            _ => None,
        }
    }

    /// Parses an order string such as `"DURL"`.
    pub fn parse_order(s: &str) -> Option<Vec<Direction>> {
        s.chars().map(Direction::from_letter).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sequential,
    Parallel,
}

/// Direction and scheme of one pass. The nonlinearity is always ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub direction: Direction,
    pub scheme: Scheme,
}

impl PropagationConfig {
    pub fn new(direction: Direction, scheme: Scheme) -> Self {
        Self { direction, scheme }
    }
}

/// C×C×w weights; `weight(m, i, n)` links source channel `m` to target
/// channel `i` at window tap `n` (offset `n - w/2`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScnnKernel {
    c: usize,
    w: usize,
    weights: Vec<f64>,
}

impl ScnnKernel {
    pub fn zeros(c: usize, w: usize) -> Result<Self, ScnnError> {
        Self::from_vec(c, w, vec![0.0; c * c * w])
    }

    pub fn from_vec(c: usize, w: usize, weights: Vec<f64>) -> Result<Self, ScnnError> {
        if c == 0 {
            return Err(ScnnError::Config("kernel needs at least one channel".into()));
        }
        if w == 0 || w.is_multiple_of(2) {
            return Err(ScnnError::Config(format!("kernel width must be odd, got {w}")));
        }
        if weights.len() != c * c * w {
            return Err(ScnnError::Shape(format!(
                "kernel {c}x{c}x{w} needs {} weights, got {}",
                c * c * w,
                weights.len()
            )));
        }
        Ok(Self { c, w, weights })
    }

    /// Uniform init in `[-b, b]`, `b = 1/sqrt(C·w)`.
    pub fn random_init<R: Rng + ?Sized>(c: usize, w: usize, rng: &mut R) -> Result<Self, ScnnError> {
        let mut k = Self::zeros(c, w)?;
        let b = 1.0 / ((c * w) as f64).sqrt();
        for v in &mut k.weights {
            *v = rng.random_range(-b..=b);
        }
        Ok(k)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn index(&self, m: usize, i: usize, n: usize) -> usize {
        (m * self.c + i) * self.w + n
    }

    pub fn weight(&self, m: usize, i: usize, n: usize) -> f64 {
        self.weights[self.index(m, i, n)]
    }

    pub fn set_weight(&mut self, m: usize, i: usize, n: usize, v: f64) {
        let idx = self.index(m, i, n);
        self.weights[idx] = v;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        tensor::encode(KERNEL_MAGIC, [self.c, self.c, self.w], precision, &self.weights)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScnnError> {
        let (dims, _, data) = tensor::decode(KERNEL_MAGIC, bytes)?;
        if dims[0] != dims[1] {
            return Err(ScnnError::Shape(format!(
                "kernel file has non-square channel dims {}x{}",
                dims[0], dims[1]
            )));
        }
        Self::from_vec(dims[0], dims[2], data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScnnError> {
        std::fs::write(path, self.to_bytes(Precision::F64)).map_err(TensorError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScnnError> {
        let bytes = std::fs::read(path).map_err(TensorError::from)?;
        Self::from_bytes(&bytes)
    }
}

/// Counts spatial messages: one per (receiving pixel, window tap), channel
/// independent. Taps landing in zero padding, and the first slice's taps
/// against the zero boundary before it, are tallied separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MessageCounter {
    pub in_bounds: u64,
    pub padded: u64,
}

impl MessageCounter {
    pub fn total(&self) -> u64 {
        self.in_bounds + self.padded
    }
}

/// Maps propagation order onto tensor offsets for one direction.
#[derive(Debug, Clone, Copy)]
struct Slicing {
    c: usize,
    n_slices: usize,
    len: usize,
    chan_stride: usize,
    slice_stride: usize,
    pos_stride: usize,
    reverse: bool,
}

impl Slicing {
    fn new(shape: (usize, usize, usize), direction: Direction) -> Self {
        let (c, h, w) = shape;
        let vertical = matches!(direction, Direction::Down | Direction::Up);
        let reverse = matches!(direction, Direction::Up | Direction::Left);
        if vertical {
            Slicing {
                c,
                n_slices: h,
                len: w,
                chan_stride: h * w,
                slice_stride: w,
                pos_stride: 1,
                reverse,
            }
        } else {
            Slicing {
                c,
                n_slices: w,
                len: h,
                chan_stride: h * w,
                slice_stride: 1,
                pos_stride: w,
                reverse,
            }
        }
    }

    #[inline]
    fn base(&self, t: usize) -> usize {
        let s = if self.reverse { self.n_slices - 1 - t } else { t };
        s * self.slice_stride
    }

    fn gather(&self, data: &[f64], t: usize, buf: &mut [f64]) {
        let base = self.base(t);
        for ch in 0..self.c {
            let row = &mut buf[ch * self.len..(ch + 1) * self.len];
            let o = base + ch * self.chan_stride;
            if self.pos_stride == 1 {
                row.copy_from_slice(&data[o..o + self.len]);
            } else {
                for (p, v) in row.iter_mut().enumerate() {
                    *v = data[o + p * self.pos_stride];
                }
            }
        }
    }

    fn scatter(&self, data: &mut [f64], t: usize, buf: &[f64]) {
        let base = self.base(t);
        for ch in 0..self.c {
            let row = &buf[ch * self.len..(ch + 1) * self.len];
            let o = base + ch * self.chan_stride;
            for (p, v) in row.iter().enumerate() {
                data[o + p * self.pos_stride] = *v;
            }
        }
    }

    fn scatter_add(&self, data: &mut [f64], t: usize, buf: &[f64]) {
        let base = self.base(t);
        for ch in 0..self.c {
            let row = &buf[ch * self.len..(ch + 1) * self.len];
            let o = base + ch * self.chan_stride;
            for (p, v) in row.iter().enumerate() {
                data[o + p * self.pos_stride] += *v;
            }
        }
    }
}

/// Valid target range `[lo, hi)` for tap offset `d` on a slice of length `len`.
#[inline]
fn tap_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// z[i, p] = Σ_m Σ_n src[m, p + n - w/2] · K[m, i, n], accumulated with `m`
/// outermost and `n` innermost for every target position.
fn message(
    k: &ScnnKernel,
    src: &[f64],
    len: usize,
    z: &mut [f64],
    counter: Option<&mut MessageCounter>,
    threaded: bool,
) {
    let (c, w) = (k.c, k.w);
    let half = (w / 2) as isize;
    z.fill(0.0);
    if let Some(counter) = counter {
        for n in 0..w {
            let (lo, hi) = tap_range(n as isize - half, len);
            counter.in_bounds += (hi - lo) as u64;
            counter.padded += (len - (hi - lo)) as u64;
        }
    }
    let row = |(i, zi): (usize, &mut [f64])| {
        for m in 0..c {
            let sm = &src[m * len..(m + 1) * len];
            for n in 0..w {
                let wt = k.weights[k.index(m, i, n)];
                let d = n as isize - half;
                let (lo, hi) = tap_range(d, len);
                if lo >= hi {
                    continue;
                }
                let off = (lo as isize + d) as usize;
                for (zp, sp) in zi[lo..hi].iter_mut().zip(&sm[off..off + (hi - lo)]) {
                    *zp += wt * sp;
                }
            }
        }
    };
    if threaded {
        z.par_chunks_mut(len).enumerate().for_each(row);
    } else {
        z.chunks_mut(len).enumerate().for_each(row);
    }
}

/// Forward intermediates kept for the backward pass: for each slice t ≥ 1 in
/// propagation order, the message source and the pre-activation.
struct Trace {
    src: Vec<f64>,
    pre: Vec<f64>,
}

fn validate(x: &Tensor3, k: &ScnnKernel) -> Result<(), ScnnError> {
    if x.channels() != k.c {
        return Err(ScnnError::Shape(format!(
            "tensor has {} channels, kernel expects {}",
            x.channels(),
            k.c
        )));
    }
    if k.w.is_multiple_of(2) {
        return Err(ScnnError::Config(format!("kernel width must be odd, got {}", k.w)));
    }
    Ok(())
}

fn propagate(
    x: &Tensor3,
    k: &ScnnKernel,
    cfg: PropagationConfig,
    mut trace: Option<&mut Trace>,
    mut counter: Option<&mut MessageCounter>,
    threaded: bool,
) -> Result<Tensor3, ScnnError> {
    validate(x, k)?;
    let sl = Slicing::new(x.shape(), cfg.direction);
    let n = sl.c * sl.len;
    let mut out = x.clone();
    let mut src = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut cur = vec![0.0; n];

    if let Some(counter) = counter.as_deref_mut() {
        // first slice: messages from the zero boundary, always zero
        counter.padded += (sl.len * k.w) as u64;
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.src = vec![0.0; n * sl.n_slices.saturating_sub(1)];
        tr.pre = vec![0.0; n * sl.n_slices.saturating_sub(1)];
    }

    sl.gather(x.data(), 0, &mut src);
    for t in 1..sl.n_slices {
        if cfg.scheme == Scheme::Parallel {
            sl.gather(x.data(), t - 1, &mut src);
        }
        message(k, &src, sl.len, &mut z, counter.as_deref_mut(), threaded);
        sl.gather(x.data(), t, &mut cur);
        for (c, zv) in cur.iter_mut().zip(&z) {
            *c += zv.max(0.0);
        }
        sl.scatter(out.data_mut(), t, &cur);
        if let Some(tr) = trace.as_deref_mut() {
            tr.src[(t - 1) * n..t * n].copy_from_slice(&src);
            tr.pre[(t - 1) * n..t * n].copy_from_slice(&z);
        }
        if cfg.scheme == Scheme::Sequential {
            std::mem::swap(&mut src, &mut cur);
        }
    }
    Ok(out)
}

pub fn scnn_forward(x: &Tensor3, k: &ScnnKernel, cfg: PropagationConfig) -> Result<Tensor3, ScnnError> {
    propagate(x, k, cfg, None, None, false)
}

/// [`scnn_forward`] with target channels of each slice computed on the rayon pool.
pub fn scnn_forward_threaded(x: &Tensor3, k: &ScnnKernel, cfg: PropagationConfig) -> Result<Tensor3, ScnnError> {
    propagate(x, k, cfg, None, None, true)
}

/// Forward pass that also tallies every spatial message it evaluates.
pub fn scnn_forward_counted(
    x: &Tensor3,
    k: &ScnnKernel,
    cfg: PropagationConfig,
    counter: &mut MessageCounter,
) -> Result<Tensor3, ScnnError> {
    propagate(x, k, cfg, None, Some(counter), false)
}

/// Pre-activations of every updated slice, in propagation order
/// (`(n_slices - 1) · C · slice_len` values).
pub fn scnn_preactivations(x: &Tensor3, k: &ScnnKernel, cfg: PropagationConfig) -> Result<Vec<f64>, ScnnError> {
    let mut tr = Trace {
        src: Vec::new(),
        pre: Vec::new(),
    };
    propagate(x, k, cfg, Some(&mut tr), None, false)?;
    Ok(tr.pre)
}

/// Reverse-mode gradients of `⟨grad_out, scnn_forward(x, k, cfg)⟩`.
/// The ReLU derivative at exactly zero is taken as zero.
pub fn scnn_backward(
    x: &Tensor3,
    k: &ScnnKernel,
    cfg: PropagationConfig,
    grad_out: &Tensor3,
) -> Result<(Tensor3, ScnnKernel), ScnnError> {
    if grad_out.shape() != x.shape() {
        return Err(ScnnError::Shape(format!(
            "grad_out shape {:?} differs from input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let mut tr = Trace {
        src: Vec::new(),
        pre: Vec::new(),
    };
    propagate(x, k, cfg, Some(&mut tr), None, false)?;

    let sl = Slicing::new(x.shape(), cfg.direction);
    let (c, w, len) = (k.c, k.w, sl.len);
    let half = (w / 2) as isize;
    let n = c * len;
    let mut acc = grad_out.clone();
    let mut grad_k = ScnnKernel::zeros(c, w)?;
    let mut gz = vec![0.0; n];
    let mut gsrc = vec![0.0; n];

    for t in (1..sl.n_slices).rev() {
        let from = match cfg.scheme {
            Scheme::Sequential => acc.data(),
            Scheme::Parallel => grad_out.data(),
        };
        sl.gather(from, t, &mut gz);
        let pre = &tr.pre[(t - 1) * n..t * n];
        let src = &tr.src[(t - 1) * n..t * n];
        for (g, z) in gz.iter_mut().zip(pre) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        gsrc.fill(0.0);
        for i in 0..c {
            let gi = &gz[i * len..(i + 1) * len];
            if gi.iter().all(|v| *v == 0.0) {
                continue;
            }
            for m in 0..c {
                let sm = &src[m * len..(m + 1) * len];
                let gm = &mut gsrc[m * len..(m + 1) * len];
                for tap in 0..w {
                    let d = tap as isize - half;
                    let (lo, hi) = tap_range(d, len);
                    if lo >= hi {
                        continue;
                    }
                    let off = (lo as isize + d) as usize;
                    let idx = k.index(m, i, tap);
                    let wt = k.weights[idx];
                    let mut dk = 0.0;
                    for (gp, (sp, gs)) in gi[lo..hi]
                        .iter()
                        .zip(sm[off..off + (hi - lo)].iter().zip(gm[off..off + (hi - lo)].iter_mut()))
                    {
                        dk += gp * sp;
                        *gs += wt * gp;
                    }
                    grad_k.weights[idx] += dk;
                }
            }
        }
        sl.scatter_add(acc.data_mut(), t - 1, &gsrc);
    }
    Ok((acc, grad_k))
}

/// Directional passes applied in list order, each with its own kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScnnStack {
    layers: Vec<(PropagationConfig, ScnnKernel)>,
}

impl ScnnStack {
    pub fn new(layers: Vec<(PropagationConfig, ScnnKernel)>) -> Result<Self, ScnnError> {
        let Some(first) = layers.first() else {
            return Err(ScnnError::Config("stack needs at least one pass".into()));
        };
        let c = first.1.c;
        if let Some((_, bad)) = layers.iter().find(|(_, k)| k.c != c) {
            return Err(ScnnError::Shape(format!(
                "stack mixes {c}-channel and {}-channel kernels",
                bad.c
            )));
        }
        Ok(Self { layers })
    }

    /// One zero kernel per direction, in the given order.
    pub fn zeros(c: usize, w: usize, order: &[Direction], scheme: Scheme) -> Result<Self, ScnnError> {
        let layers = order
            .iter()
            .map(|&d| Ok((PropagationConfig::new(d, scheme), ScnnKernel::zeros(c, w)?)))
            .collect::<Result<Vec<_>, ScnnError>>()?;
        Self::new(layers)
    }

    pub fn random_init<R: Rng + ?Sized>(
        c: usize,
        w: usize,
        order: &[Direction],
        scheme: Scheme,
        rng: &mut R,
    ) -> Result<Self, ScnnError> {
        let layers = order
            .iter()
            .map(|&d| Ok((PropagationConfig::new(d, scheme), ScnnKernel::random_init(c, w, rng)?)))
            .collect::<Result<Vec<_>, ScnnError>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[(PropagationConfig, ScnnKernel)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(PropagationConfig, ScnnKernel)] {
        &mut self.layers
    }

    pub fn channels(&self) -> usize {
        self.layers[0].1.c
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(_, k)| k.weights.len()).sum()
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3, ScnnError> {
        let mut cur = x.clone();
        for (cfg, k) in &self.layers {
            cur = scnn_forward(&cur, k, *cfg)?;
        }
        Ok(cur)
    }

    /// Forward pass returning the input of every pass plus the final output.
    pub fn forward_trace(&self, x: &Tensor3) -> Result<Vec<Tensor3>, ScnnError> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (cfg, k) in &self.layers {
            let next = scnn_forward(acts.last().unwrap(), k, *cfg)?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Gradients w.r.t. the stack input and each kernel, given the
    /// activations from [`forward_trace`](Self::forward_trace).
    pub fn backward(&self, acts: &[Tensor3], grad_out: &Tensor3) -> Result<(Tensor3, Vec<ScnnKernel>), ScnnError> {
        if acts.len() != self.layers.len() + 1 {
            return Err(ScnnError::Shape("activation trace length mismatch".into()));
        }
        let mut g = grad_out.clone();
        let mut grads = vec![None; self.layers.len()];
        for (idx, (cfg, k)) in self.layers.iter().enumerate().rev() {
            let (gx, gk) = scnn_backward(&acts[idx], k, *cfg, &g)?;
            g = gx;
            grads[idx] = Some(gk);
        }
        Ok((g, grads.into_iter().map(Option::unwrap).collect()))
    }
}

pub fn scnn_stack_forward(x: &Tensor3, stack: &ScnnStack) -> Result<Tensor3, ScnnError> {
    stack.forward(x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err_x: f64,
    pub max_rel_err_k: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;
const KINK_MARGIN: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central-difference check of [`scnn_backward`] on a random instance.
///
/// The loss is `⟨r, scnn_forward(x, k)⟩` for a random weighting `r`. Inputs
/// are redrawn until every pre-activation sits at least 1e-3 from the ReLU
/// kink, so finite differences never straddle it.
pub fn gradcheck(
    c: usize,
    h: usize,
    w: usize,
    kw: usize,
    cfg: PropagationConfig,
    seed: u64,
) -> Result<GradCheckReport, ScnnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Result<(Tensor3, ScnnKernel), ScnnError> {
        let x = Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))?;
        let mut k = ScnnKernel::zeros(c, kw)?;
        for v in k.weights_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        Ok((x, k))
    };
    let (mut x, mut k) = draw(&mut rng)?;
    for _ in 0..100 {
        let pre = scnn_preactivations(&x, &k, cfg)?;
        if pre.iter().all(|z| z.abs() >= KINK_MARGIN) {
            break;
        }
        (x, k) = draw(&mut rng)?;
    }
    let r = Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))?;
    let (gx, gk) = scnn_backward(&x, &k, cfg, &r)?;

    let directional = |plus: &Tensor3, minus: &Tensor3| -> f64 {
        plus.data()
            .iter()
            .zip(minus.data())
            .zip(r.data())
            .map(|((p, m), rv)| rv * (p - m))
            .sum::<f64>()
            / (2.0 * GRADCHECK_STEP)
    };

    let mut max_x = 0.0f64;
    for e in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[e] += GRADCHECK_STEP;
        let mut xm = x.clone();
        xm.data_mut()[e] -= GRADCHECK_STEP;
        let num = directional(&scnn_forward(&xp, &k, cfg)?, &scnn_forward(&xm, &k, cfg)?);
        max_x = max_x.max(relative_error(gx.data()[e], num));
    }
    let mut max_k = 0.0f64;
    for e in 0..k.weights.len() {
        let mut kp = k.clone();
        kp.weights[e] += GRADCHECK_STEP;
        let mut km = k.clone();
        km.weights[e] -= GRADCHECK_STEP;
        let num = directional(&scnn_forward(&x, &kp, cfg)?, &scnn_forward(&x, &km, cfg)?);
        max_k = max_k.max(relative_error(gk.weights[e], num));
    }
    let max_rel_err = max_x.max(max_k);
    Ok(GradCheckReport {
        max_rel_err_x: max_x,
        max_rel_err_k: max_k,
        max_rel_err,
        checked: x.len() + k.weights.len(),
        pass: max_rel_err < GRADCHECK_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor3 {
        Tensor3::from_vec(1, v.len(), 1, v.to_vec()).unwrap()
    }

    fn down(scheme: Scheme) -> PropagationConfig {
        PropagationConfig::new(Direction::Down, scheme)
    }

    #[test]
    fn unit_kernel_recurrences() {
        let k = ScnnKernel::from_vec(1, 1, vec![1.0]).unwrap();
        let x = col(&[1.0, 1.0, 1.0]);
        let seq = scnn_forward(&x, &k, down(Scheme::Sequential)).unwrap();
        assert_eq!(seq.data(), &[1.0, 2.0, 3.0]);
        let par = scnn_forward(&x, &k, down(Scheme::Parallel)).unwrap();
        assert_eq!(par.data(), &[1.0, 2.0, 2.0]);
        let neg = scnn_forward(&col(&[-1.0, 0.0, 0.0]), &k, down(Scheme::Sequential)).unwrap();
        assert_eq!(neg.data(), &[-1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_kernel_is_identity() {
        let x = Tensor3::from_fn(2, 3, 4, |i, j, k| (i + 2 * j) as f64 - 1.7 * k as f64).unwrap();
        let k = ScnnKernel::zeros(2, 3).unwrap();
        for d in Direction::ALL {
            for s in [Scheme::Sequential, Scheme::Parallel] {
                assert_eq!(scnn_forward(&x, &k, PropagationConfig::new(d, s)).unwrap(), x);
            }
        }
    }

    #[test]
    fn config_and_shape_errors() {
        assert!(matches!(ScnnKernel::zeros(2, 2), Err(ScnnError::Config(_))));
        assert!(matches!(ScnnKernel::from_vec(2, 3, vec![0.0; 5]), Err(ScnnError::Shape(_))));
        let x = Tensor3::zeros(3, 2, 2).unwrap();
        let k = ScnnKernel::zeros(2, 1).unwrap();
        assert!(matches!(
            scnn_forward(&x, &k, down(Scheme::Sequential)),
            Err(ScnnError::Shape(_))
        ));
        let k3 = ScnnKernel::zeros(3, 1).unwrap();
        let g = Tensor3::zeros(3, 2, 3).unwrap();
        assert!(matches!(
            scnn_backward(&x, &k3, down(Scheme::Sequential), &g),
            Err(ScnnError::Shape(_))
        ));
        assert!(ScnnStack::new(vec![]).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor3::from_fn(2, 4, 3, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let k = ScnnKernel::random_init(2, 3, &mut rng).unwrap();
        let g = Tensor3::zeros(2, 4, 3).unwrap();
        let (gx, gk) = scnn_backward(&x, &k, down(Scheme::Sequential), &g).unwrap();
        assert!(gx.data().iter().all(|v| *v == 0.0));
        assert!(gk.weights().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_kernel_backward_is_identity_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor3::from_fn(2, 4, 3, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let g = Tensor3::from_fn(2, 4, 3, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let k = ScnnKernel::zeros(2, 3).unwrap();
        for d in Direction::ALL {
            let (gx, gk) = scnn_backward(&x, &k, PropagationConfig::new(d, Scheme::Sequential), &g).unwrap();
            assert_eq!(gx, g);
            // every pre-activation is exactly 0, where the ReLU derivative is 0
            assert!(gk.weights().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn counter_matches_formula() {
        let x = Tensor3::zeros(1, 3, 3).unwrap();
        let k = ScnnKernel::zeros(1, 3).unwrap();
        let mut counter = MessageCounter::default();
        scnn_forward_counted(&x, &k, down(Scheme::Sequential), &mut counter).unwrap();
        assert_eq!(counter.total(), 27);
        // two border taps padded per interior slice, plus the boundary slice
        assert_eq!(counter.padded, 2 * 2 + 9);
    }

    #[test]
    fn kernel_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = ScnnKernel::random_init(3, 5, &mut rng).unwrap();
        let bytes = k.to_bytes(Precision::F64);
        assert_eq!(&bytes[0..4], b"SCNK");
        assert_eq!(ScnnKernel::from_bytes(&bytes).unwrap(), k);
        let t = Tensor3::zeros(1, 1, 1).unwrap().to_bytes();
        assert!(ScnnKernel::from_bytes(&t).is_err());
    }

    #[test]
    fn gradcheck_examples() {
        let cases = [
            (2, 5, 4, 3, PropagationConfig::new(Direction::Down, Scheme::Sequential), 1),
            (1, 3, 1, 1, PropagationConfig::new(Direction::Down, Scheme::Parallel), 2),
            (3, 4, 6, 5, PropagationConfig::new(Direction::Left, Scheme::Sequential), 3),
        ];
        for (c, h, w, kw, cfg, seed) in cases {
            let rep = gradcheck(c, h, w, kw, cfg, seed).unwrap();
            assert!(rep.pass, "{cfg:?}: {rep:?}");
        }
        let rep = gradcheck(2, 5, 4, 3, down(Scheme::Sequential), 1).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn order_parsing() {
        assert_eq!(
            Direction::parse_order("DURL").unwrap(),
            vec![Direction::Down, Direction::Up, Direction::Right, Direction::Left]
        );
        assert!(Direction::parse_order("DX").is_none());
    }
}
