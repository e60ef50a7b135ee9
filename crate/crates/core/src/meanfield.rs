//! Mean-field message passing over class-score maps, used as the dense
//! baseline against slice-wise propagation.
//!
//! Each iteration: softmax over channels, channel-wise s×s convolution
//! (zero padded), 1×1 compatibility transform, then add the unaries back.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{Tensor3, TensorError};

#[derive(Debug, Error)]
pub enum MeanFieldError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const DEFAULT_ITERATIONS: usize = 10;
/// 20 would not center; one pixel larger keeps the window symmetric.
pub const DEFAULT_KERNEL_SIZE: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldConfig {
    classes: usize,
    n_iter: usize,
    size: usize,
    /// `compat[l * classes + l2]` scales the message of class `l2` into class `l`.
    compat: Vec<f64>,
    /// `kernel[(c * size + a) * size + b]`
    kernel: Vec<f64>,
}

impl MeanFieldConfig {
    /// Gaussian message kernel (σ = s/4, unit sum per channel) and a Potts
    /// compatibility (0 on the diagonal, −1 elsewhere).
    pub fn new(classes: usize, n_iter: usize, size: usize) -> Result<Self, MeanFieldError> {
        check_params(classes, n_iter, size)?;
        let sigma = size as f64 / 4.0;
        let r = (size / 2) as f64;
        let mut bump: Vec<f64> = (0..size * size)
            .map(|idx| {
                let (a, b) = ((idx / size) as f64 - r, (idx % size) as f64 - r);
                (-(a * a + b * b) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = bump.iter().sum();
        bump.iter_mut().for_each(|v| *v /= total);
        let kernel = (0..classes).flat_map(|_| bump.iter().copied()).collect();
        let compat = (0..classes * classes)
            .map(|idx| if idx / classes == idx % classes { 0.0 } else { -1.0 })
            .collect();
        Ok(Self {
            classes,
            n_iter,
            size,
            compat,
            kernel,
        })
    }

    pub fn from_parts(
        classes: usize,
        n_iter: usize,
        size: usize,
        compat: Vec<f64>,
        kernel: Vec<f64>,
    ) -> Result<Self, MeanFieldError> {
        check_params(classes, n_iter, size)?;
        if compat.len() != classes * classes {
            return Err(MeanFieldError::Shape(format!(
                "compatibility needs {} entries, got {}",
                classes * classes,
                compat.len()
            )));
        }
        if kernel.len() != classes * size * size {
            return Err(MeanFieldError::Shape(format!(
                "message kernel needs {} entries, got {}",
                classes * size * size,
                kernel.len()
            )));
        }
        Ok(Self {
            classes,
            n_iter,
            size,
            compat,
            kernel,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_iter(&self) -> usize {
        self.n_iter
    }

    pub fn kernel_size(&self) -> usize {
        self.size
    }

    pub fn compat(&self) -> &[f64] {
        &self.compat
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut [f64] {
        &mut self.kernel
    }

    pub fn compat_mut(&mut self) -> &mut [f64] {
        &mut self.compat
    }
}

fn check_params(classes: usize, n_iter: usize, size: usize) -> Result<(), MeanFieldError> {
    if classes == 0 {
        return Err(MeanFieldError::Config("need at least one class".into()));
    }
    if n_iter == 0 {
        return Err(MeanFieldError::Config("n_iter must be at least 1".into()));
    }
    if size.is_multiple_of(2) {
        return Err(MeanFieldError::Config(format!("kernel size must be odd, got {size}")));
    }
    Ok(())
}

/// Per-pixel softmax across channels, max-subtracted.
pub fn softmax_channels(u: &Tensor3) -> Tensor3 {
    let (c, h, w) = u.shape();
    let plane = h * w;
    let mut out = u.clone();
    let src = u.data();
    let dst = out.data_mut();
    for p in 0..plane {
        let mx = (0..c).map(|i| src[i * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..c {
            let e = (src[i * plane + p] - mx).exp();
            dst[i * plane + p] = e;
            sum += e;
        }
        for i in 0..c {
            dst[i * plane + p] /= sum;
        }
    }
    out
}

/// Zero-padded s×s convolution of one H×W plane.
fn convolve_plane(src: &[f64], h: usize, w: usize, kern: &[f64], size: usize, dst: &mut [f64]) {
    let r = (size / 2) as isize;
    dst.fill(0.0);
    for a in 0..size {
        let da = a as isize - r;
        let (jlo, jhi) = span(da, h);
        for b in 0..size {
            let wt = kern[a * size + b];
            if wt == 0.0 {
                continue;
            }
            let db = b as isize - r;
            let (klo, khi) = span(db, w);
            if klo >= khi {
                continue;
            }
            for j in jlo..jhi {
                let sj = (j as isize + da) as usize;
                let drow = &mut dst[j * w + klo..j * w + khi];
                let so = sj * w + (klo as isize + db) as usize;
                for (d, s) in drow.iter_mut().zip(&src[so..so + (khi - klo)]) {
                    *d += wt * s;
                }
            }
        }
    }
}

/// Target indices `[lo, hi)` whose source `idx + d` stays inside `[0, n)`.
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Number of (receiver, sender) pixel pairs inside the image that an s×s
/// window connects.
fn window_pairs(h: usize, w: usize, size: usize) -> u64 {
    let r = (size / 2) as isize;
    let rows: u64 = (0..size)
        .map(|a| {
            let (lo, hi) = span(a as isize - r, h);
            (hi - lo) as u64
        })
        .sum();
    let cols: u64 = (0..size)
        .map(|b| {
            let (lo, hi) = span(b as isize - r, w);
            (hi - lo) as u64
        })
        .sum();
    rows * cols
}

fn message_pass(q: &Tensor3, cfg: &MeanFieldConfig, threaded: bool) -> Tensor3 {
    let (_, h, w) = q.shape();
    let plane = h * w;
    let ksq = cfg.size * cfg.size;
    let mut m = q.clone();
    let work = |(c, dst): (usize, &mut [f64])| {
        convolve_plane(
            &q.data()[c * plane..(c + 1) * plane],
            h,
            w,
            &cfg.kernel[c * ksq..(c + 1) * ksq],
            cfg.size,
            dst,
        )
    };
    if threaded {
        m.data_mut().par_chunks_mut(plane).enumerate().for_each(work);
    } else {
        m.data_mut().chunks_mut(plane).enumerate().for_each(work);
    }
    m
}

fn compat_transform(m: &Tensor3, cfg: &MeanFieldConfig) -> Tensor3 {
    let (c, h, w) = m.shape();
    let plane = h * w;
    let mut out = Tensor3::zeros(c, h, w).expect("shape already validated");
    for l in 0..c {
        let dst = &mut out.data_mut()[l * plane..(l + 1) * plane];
        for l2 in 0..c {
            let wt = cfg.compat[l * c + l2];
            if wt == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(&m.data()[l2 * plane..(l2 + 1) * plane]) {
                *d += wt * s;
            }
        }
    }
    out
}

fn run(
    unary: &Tensor3,
    cfg: &MeanFieldConfig,
    threaded: bool,
    mut counter: Option<&mut u64>,
) -> Result<Tensor3, MeanFieldError> {
    if unary.channels() != cfg.classes {
        return Err(MeanFieldError::Shape(format!(
            "unary has {} channels, config expects {}",
            unary.channels(),
            cfg.classes
        )));
    }
    let (_, h, w) = unary.shape();
    let mut state = unary.clone();
    for _ in 0..cfg.n_iter {
        let q = softmax_channels(&state);
        let m = message_pass(&q, cfg, threaded);
        if let Some(c) = counter.as_deref_mut() {
            *c += window_pairs(h, w, cfg.size);
        }
        let p = compat_transform(&m, cfg);
        for ((s, u), pv) in state.data_mut().iter_mut().zip(unary.data()).zip(p.data()) {
            *s = u + pv;
        }
    }
    Ok(state)
}

/// Runs `n_iter` mean-field rounds and returns the final (pre-softmax) potentials.
pub fn mf_iterate(unary: &Tensor3, cfg: &MeanFieldConfig) -> Result<Tensor3, MeanFieldError> {
    run(unary, cfg, false, None)
}

/// Same as [`mf_iterate`] with message passing fanned out across channels.
pub fn mf_iterate_threaded(unary: &Tensor3, cfg: &MeanFieldConfig) -> Result<Tensor3, MeanFieldError> {
    run(unary, cfg, true, None)
}

/// [`mf_iterate`] that also counts in-image (receiver, sender) pixel pairs.
/// With a window of at least `2·max(H, W) − 1` every pixel reaches every
/// other and the count is dense.
pub fn mf_iterate_counted(
    unary: &Tensor3,
    cfg: &MeanFieldConfig,
    counter: &mut u64,
) -> Result<Tensor3, MeanFieldError> {
    run(unary, cfg, false, Some(counter))
}

/// Messages exchanged by dense mean field: every pixel pair, every iteration.
pub fn count_messages_dense(h: u64, w: u64, n_iter: u64) -> u64 {
    n_iter * w * w * h * h
}

/// Messages exchanged by slice-wise propagation: `w` taps per pixel per direction.
pub fn count_messages_scnn(h: u64, w: u64, kernel_width: u64, n_dir: u64) -> u64 {
    n_dir * w * h * kernel_width
}
