//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use scnn_core::scnn::{Direction, ScnnKernel, Scheme};
use scnn_core::Tensor3;

/// Maps (slice index in propagation order, position within slice) to (row, col).
fn cell(dir: Direction, h: usize, w: usize, s: usize, p: usize) -> (usize, usize) {
    match dir {
        Direction::Down => (s, p),
        Direction::Up => (h - 1 - s, p),
        Direction::Right => (p, s),
        Direction::Left => (p, w - 1 - s),
    }
}

/// Slice-by-slice evaluation of the propagation recurrence. `kernels[s - 1]`
/// drives the transition into slice `s`, so passing one kernel per
/// transition lets tests perturb a single transition.
pub fn propagate_ref(x: &Tensor3, kernels: &[&ScnnKernel], dir: Direction, scheme: Scheme) -> Tensor3 {
    let (c, h, w) = x.shape();
    let (slices, len) = match dir {
        Direction::Down | Direction::Up => (h, w),
        Direction::Right | Direction::Left => (w, h),
    };
    let mut out = x.clone();
    for s in 1..slices {
        let k = kernels[(s - 1).min(kernels.len() - 1)];
        let kw = k.width();
        let half = (kw / 2) as isize;
        for i in 0..c {
            for p in 0..len {
                let mut acc = 0.0;
                for m in 0..c {
                    for n in 0..kw {
                        let q = p as isize + n as isize - half;
                        if q < 0 || q >= len as isize {
                            continue;
                        }
                        let (sj, sk) = cell(dir, h, w, s - 1, q as usize);
                        let src = match scheme {
                            Scheme::Sequential => out.get(m, sj, sk).unwrap(),
                            Scheme::Parallel => x.get(m, sj, sk).unwrap(),
                        };
                        acc += src * k.weight(m, i, n);
                    }
                }
                let (j, kk) = cell(dir, h, w, s, p);
                let v = x.get(i, j, kk).unwrap() + if acc > 0.0 { acc } else { 0.0 };
                out.set(i, j, kk, v).unwrap();
            }
        }
    }
    out
}

pub fn random_tensor<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn random_kernel<R: Rng>(rng: &mut R, c: usize, w: usize) -> ScnnKernel {
    ScnnKernel::from_vec(c, w, (0..c * c * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Natural cubic spline through `(x, y)` knots by a dense linear solve for
/// the second derivatives, evaluated with the textbook moment form. Outside
/// the knot range the end tangent is extended linearly.
pub struct DenseSpline {
    ys: Vec<f64>,
    xs: Vec<f64>,
    m: Vec<f64>,
}

impl DenseSpline {
    pub fn fit(points: &[(f64, f64)]) -> Self {
        let n = points.len();
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let mut a = vec![vec![0.0; n + 1]; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let h0 = ys[i] - ys[i - 1];
            let h1 = ys[i + 1] - ys[i];
            a[i][i - 1] = h0 / 6.0;
            a[i][i] = (h0 + h1) / 3.0;
            a[i][i + 1] = h1 / 6.0;
            a[i][n] = (xs[i + 1] - xs[i]) / h1 - (xs[i] - xs[i - 1]) / h0;
        }
        // Gaussian elimination with partial pivoting
        for col in 0..n {
            let piv = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    if f != 0.0 {
                        for cc in col..=n {
                            a[r][cc] -= f * a[col][cc];
                        }
                    }
                }
            }
        }
        let m = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        Self { ys, xs, m }
    }

    fn slope(&self, i: usize, y: f64) -> f64 {
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let h = y1 - y0;
        -self.m[i] * (y1 - y).powi(2) / (2.0 * h) + self.m[i + 1] * (y - y0).powi(2) / (2.0 * h)
            + (self.xs[i + 1] - self.xs[i]) / h
            - (self.m[i + 1] - self.m[i]) * h / 6.0
    }

    pub fn eval(&self, y: f64) -> f64 {
        let n = self.ys.len();
        if y <= self.ys[0] {
            return self.xs[0] + self.slope(0, self.ys[0]) * (y - self.ys[0]);
        }
        if y >= self.ys[n - 1] {
            return self.xs[n - 1] + self.slope(n - 2, self.ys[n - 1]) * (y - self.ys[n - 1]);
        }
        let i = (0..n - 1).find(|&i| y <= self.ys[i + 1]).unwrap();
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let h = y1 - y0;
        self.m[i] * (y1 - y).powi(3) / (6.0 * h)
            + self.m[i + 1] * (y - y0).powi(3) / (6.0 * h)
            + (self.xs[i] / h - self.m[i] * h / 6.0) * (y1 - y)
            + (self.xs[i + 1] / h - self.m[i + 1] * h / 6.0) * (y - y0)
    }
}

/// Best (total IoU, pair count) over every one-to-one matching restricted
/// to pairs with IoU strictly above `threshold`, by exhaustive enumeration.
pub fn brute_force_best(ious: &[Vec<f64>], threshold: f64) -> (f64, usize) {
    fn rec(ious: &[Vec<f64>], thr: f64, row: usize, used: &mut Vec<bool>, sum: f64, count: usize, best: &mut (f64, usize)) {
        if row == ious.len() {
            if sum > best.0 + 1e-12 || ((sum - best.0).abs() <= 1e-12 && count > best.1) {
                *best = (sum, count);
            }
            return;
        }
        rec(ious, thr, row + 1, used, sum, count, best);
        for g in 0..used.len() {
            if !used[g] && ious[row][g] > thr {
                used[g] = true;
                rec(ious, thr, row + 1, used, sum + ious[row][g], count + 1, best);
                used[g] = false;
            }
        }
    }
    let n_gt = ious.first().map_or(0, |r| r.len());
    let mut best = (0.0, 0);
    rec(ious, threshold, 0, &mut vec![false; n_gt], 0.0, 0, &mut best);
    best
}
