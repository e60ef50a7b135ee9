//! Probability maps to lane curves: existence gating, row sampling, peak
//! picking and natural cubic spline fitting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor3;

pub const DEFAULT_ROW_STEP: usize = 20;
pub const DEFAULT_EXIST_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RESPONSE_FLOOR: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("need at least 2 points for a curve, got {0}")]
    Degenerate(usize),
    #[error("knot y values must be strictly increasing (index {0})")]
    NotIncreasing(usize),
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("curve file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Natural cubic spline `x(y)`; on `[y_i, y_{i+1}]`,
/// `x = a_i + b_i t + c_i t² + d_i t³` with `t = y − y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    ys: Vec<f64>,
    xs: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl CubicSpline {
    /// Fits through `(x, y)` knots whose `y` is strictly increasing.
    pub fn fit(points: &[(f64, f64)]) -> Result<Self, CurveError> {
        let n = points.len();
        if n < 2 {
            return Err(CurveError::Degenerate(n));
        }
        for (i, (x, y)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(CurveError::NonFinite(i));
            }
            if i > 0 && *y <= points[i - 1].1 {
                return Err(CurveError::NotIncreasing(i));
            }
        }
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let h: Vec<f64> = ys.windows(2).map(|w| w[1] - w[0]).collect();

        // Second derivatives m[0..n]; m[0] = m[n-1] = 0. Thomas algorithm on
        // the interior rows.
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for r in 0..k {
                let i = r + 1;
                diag[r] = 2.0 * (h[i - 1] + h[i]);
                rhs[r] = 6.0 * ((xs[i + 1] - xs[i]) / h[i] - (xs[i] - xs[i - 1]) / h[i - 1]);
            }
            for r in 1..k {
                let sub = h[r];
                let f = sub / diag[r - 1];
                diag[r] -= f * h[r];
                rhs[r] -= f * rhs[r - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for r in (0..k - 1).rev() {
                m[r + 1] = (rhs[r] - h[r + 1] * m[r + 2]) / diag[r];
            }
        }

        let mut b = Vec::with_capacity(n - 1);
        let mut c = Vec::with_capacity(n - 1);
        let mut d = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            b.push((xs[i + 1] - xs[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0);
            c.push(m[i] / 2.0);
            d.push((m[i + 1] - m[i]) / (6.0 * h[i]));
        }
        Ok(Self { ys, xs, b, c, d })
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.ys[0], *self.ys.last().unwrap())
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    /// Evaluates `x(y)`; outside the knot range the end tangents are extended.
    pub fn eval(&self, y: f64) -> f64 {
        let n = self.ys.len();
        let (y0, yn) = self.y_range();
        if y <= y0 {
            return self.xs[0] + self.b[0] * (y - y0);
        }
        if y >= yn {
            let i = n - 2;
            let h = yn - self.ys[i];
            let slope = self.b[i] + 2.0 * self.c[i] * h + 3.0 * self.d[i] * h * h;
            return self.xs[n - 1] + slope * (y - yn);
        }
        let i = self.ys.partition_point(|&k| k <= y) - 1;
        let t = y - self.ys[i];
        self.xs[i] + t * (self.b[i] + t * (self.c[i] + t * self.d[i]))
    }

    /// Second derivative from the left (`left = true`) or right of `y`.
    pub fn second_derivative(&self, y: f64, left: bool) -> f64 {
        let n = self.ys.len();
        let mut i = self.ys.partition_point(|&k| k < y).min(n - 1);
        if left || i == n - 1 {
            i = i.saturating_sub(1);
        }
        let t = y - self.ys[i];
        2.0 * self.c[i] + 6.0 * self.d[i] * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneCurve {
    pub id: usize,
    pub exists: bool,
    /// Knots ordered by strictly increasing `y`.
    pub points: Vec<(f64, f64)>,
    pub spline: Option<CubicSpline>,
}

impl LaneCurve {
    pub fn missing(id: usize) -> Self {
        Self {
            id,
            exists: false,
            points: Vec::new(),
            spline: None,
        }
    }

    pub fn fit(id: usize, points: Vec<(f64, f64)>) -> Result<Self, CurveError> {
        let spline = CubicSpline::fit(&points)?;
        Ok(Self {
            id,
            exists: true,
            points,
            spline: Some(spline),
        })
    }
}

/// Fits a natural spline through `points` (≥ 2, `y` strictly increasing).
pub fn fit_spline(points: &[(f64, f64)]) -> Result<LaneCurve, CurveError> {
    LaneCurve::fit(0, points.to_vec())
}

/// Samples rows `H−1, H−1−step, …` of one H×W map and returns the leftmost
/// argmax of each row whose peak reaches `response_floor`, ordered by `y`.
pub fn extract_points(map: &[f64], h: usize, w: usize, row_step: usize, response_floor: f64) -> Vec<(f64, f64)> {
    assert_eq!(map.len(), h * w, "map is not {h}x{w}");
    let step = row_step.max(1);
    let mut pts = Vec::new();
    if h == 0 || w == 0 {
        return pts;
    }
    let mut j = h - 1;
    loop {
        let row = &map[j * w..(j + 1) * w];
        let (mut best_k, mut best) = (0, row[0]);
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_k = k;
            }
        }
        if best >= response_floor {
            pts.push((best_k as f64, j as f64));
        }
        if j < step {
            break;
        }
        j -= step;
    }
    pts.reverse();
    pts
}

/// Best mean over `window` consecutive pixels of `row`, windows kept inside
/// the row (a row shorter than the window is averaged whole, still divided
/// by `window`). Returns the leftmost best start and its mean.
pub fn row_window_max(row: &[f64], window: usize) -> (usize, f64) {
    let window = window.max(1);
    if row.len() <= window {
        return (0, row.iter().sum::<f64>() / window as f64);
    }
    let mut sum: f64 = row[..window].iter().sum();
    let (mut best, mut best_sum) = (0, sum);
    for start in 1..=row.len() - window {
        sum += row[start + window - 1] - row[start - 1];
        if sum > best_sum {
            best = start;
            best_sum = sum;
        }
    }
    (best, row[best..best + window].iter().sum::<f64>() / window as f64)
}

/// Existence score per lane channel: the mean over rows of the best
/// `window`-wide average in that row. With `window = 1` this is the row
/// maximum. A lane spanning the image scores near its peak probability; a
/// missing lane or an isolated spike scores near the background level.
pub fn existence_scores(probmaps: &Tensor3, lanes: usize, window: usize) -> Vec<f64> {
    let (c, h, w) = probmaps.shape();
    let first = c.saturating_sub(lanes);
    (first..c)
        .map(|ch| {
            let plane = probmaps.channel(ch);
            (0..h).map(|j| row_window_max(&plane[j * w..(j + 1) * w], window).1).sum::<f64>() / h as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub row_step: usize,
    pub exist_threshold: f64,
    pub response_floor: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            row_step: DEFAULT_ROW_STEP,
            exist_threshold: DEFAULT_EXIST_THRESHOLD,
            response_floor: DEFAULT_RESPONSE_FLOOR,
        }
    }
}

/// Decodes `existence.len()` lanes. Lane `l` (1-based) reads channel
/// `C − L + l − 1`, so a leading background channel is skipped.
pub fn decode(probmaps: &Tensor3, existence: &[f64], params: &DecodeParams) -> Vec<LaneCurve> {
    let (c, h, w) = probmaps.shape();
    let lanes = existence.len();
    existence
        .iter()
        .enumerate()
        .map(|(idx, &score)| {
            let id = idx + 1;
            if score <= params.exist_threshold || c + idx < lanes {
                return LaneCurve::missing(id);
            }
            let ch = c + idx - lanes;
            let pts = extract_points(probmaps.channel(ch), h, w, params.row_step, params.response_floor);
            LaneCurve::fit(id, pts).unwrap_or_else(|_| LaneCurve::missing(id))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    pub id: usize,
    pub exists: bool,
    pub points: Vec<(f64, f64)>,
}

/// JSON curve file; coordinates are pixels in the `image_width × image_height`
/// raster, origin top-left, `y` downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFile {
    pub image_width: usize,
    pub image_height: usize,
    pub lanes: Vec<LaneRecord>,
}

impl CurveFile {
    pub fn from_curves(image_width: usize, image_height: usize, curves: &[LaneCurve]) -> Self {
        Self {
            image_width,
            image_height,
            lanes: curves
                .iter()
                .map(|c| LaneRecord {
                    id: c.id,
                    exists: c.exists,
                    points: c.points.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds curves; lanes flagged present but with unusable points come
    /// back as missing.
    pub fn curves(&self) -> Vec<LaneCurve> {
        self.lanes
            .iter()
            .map(|r| {
                if r.exists {
                    LaneCurve::fit(r.id, r.points.clone()).unwrap_or_else(|_| LaneCurve::missing(r.id))
                } else {
                    LaneCurve::missing(r.id)
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("curve file serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CurveError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CurveError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CurveError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_peak() {
        // 41 rows: sampling from the bottom visits rows 40, 20 and 0
        let (h, w) = (41, 30);
        let mut map = vec![0.0; h * w];
        map[40 * w + 17] = 1.0;
        let pts = extract_points(&map, h, w, 20, 0.3);
        assert_eq!(pts, vec![(17.0, 40.0)]);
        assert!(extract_points(&vec![0.0; h * w], h, w, 20, 0.3).is_empty());
    }

    #[test]
    fn ties_pick_leftmost() {
        let w = 8;
        let mut map = vec![0.0; 3 * w];
        map[2 * w + 2] = 0.9;
        map[2 * w + 6] = 0.9;
        let pts = extract_points(&map, 3, w, 1, 0.3);
        assert_eq!(pts, vec![(2.0, 2.0)]);
    }

    #[test]
    fn two_point_spline_is_linear() {
        let c = fit_spline(&[(10.0, 0.0), (30.0, 20.0)]).unwrap();
        let s = c.spline.unwrap();
        assert!((s.eval(10.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_stay_on_line() {
        let s = CubicSpline::fit(&[(1.0, 0.0), (3.0, 1.0), (5.0, 2.0)]).unwrap();
        for i in 0..=40 {
            let y = i as f64 * 0.05;
            assert!((s.eval(y) - (1.0 + 2.0 * y)).abs() < 1e-9);
        }
    }

    #[test]
    fn spline_errors() {
        assert!(matches!(fit_spline(&[(1.0, 1.0)]), Err(CurveError::Degenerate(1))));
        assert!(matches!(
            fit_spline(&[(1.0, 1.0), (2.0, 1.0)]),
            Err(CurveError::NotIncreasing(1))
        ));
        assert!(matches!(
            fit_spline(&[(f64::NAN, 1.0), (2.0, 2.0)]),
            Err(CurveError::NonFinite(0))
        ));
    }

    #[test]
    fn natural_ends_and_c2_interior() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (((i * 7) % 5) as f64, i as f64 * 3.0 + (i % 2) as f64)).collect();
        let s = CubicSpline::fit(&pts).unwrap();
        assert!(s.second_derivative(pts[0].1, false).abs() < 1e-12);
        assert!(s.second_derivative(pts[5].1, true).abs() < 1e-12);
        for p in &pts[1..5] {
            let l = s.second_derivative(p.1, true);
            let r = s.second_derivative(p.1, false);
            assert!((l - r).abs() < 1e-9, "{l} vs {r}");
        }
        for p in &pts {
            assert!((s.eval(p.1) - p.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_gates() {
        let probs = Tensor3::from_fn(3, 40, 20, |c, _, k| match (c, k) {
            (1, 5) | (2, 14) => 0.9,
            _ => 0.05,
        })
        .unwrap();
        let curves = decode(&probs, &[0.0, 0.0], &DecodeParams::default());
        assert!(curves.iter().all(|c| !c.exists && c.points.is_empty()));
        let curves = decode(&probs, &[0.9, 0.1], &DecodeParams::default());
        assert_eq!(curves.iter().filter(|c| c.exists).count(), 1);
        assert_eq!(curves[0].id, 1);
        assert_eq!(curves[0].points, vec![(5.0, 19.0), (5.0, 39.0)]);
    }

    #[test]
    fn decode_single_sample_row_is_missing() {
        let probs = Tensor3::from_fn(2, 10, 10, |c, _, k| if c == 1 && k == 3 { 1.0 } else { 0.0 }).unwrap();
        let curves = decode(&probs, &[1.0], &DecodeParams::default());
        assert!(!curves[0].exists);
    }

    #[test]
    fn existence_row_max_mean() {
        let probs = Tensor3::from_fn(2, 4, 3, |c, j, k| if c == 1 && k == 1 && j < 2 { 0.8 } else { 0.1 }).unwrap();
        let e = existence_scores(&probs, 1, 1);
        assert!((e[0] - (0.8 * 2.0 + 0.1 * 2.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn windowed_existence_discounts_spikes() {
        let spike = Tensor3::from_fn(2, 4, 30, |c, _, k| if c == 1 && k == 29 { 1.0 } else { 0.0 }).unwrap();
        let band = Tensor3::from_fn(2, 4, 30, |c, _, k| if c == 1 && (10..20).contains(&k) { 1.0 } else { 0.0 }).unwrap();
        assert!((existence_scores(&spike, 1, 10)[0] - 0.1).abs() < 1e-15);
        assert!((existence_scores(&band, 1, 10)[0] - 1.0).abs() < 1e-15);
        assert_eq!(row_window_max(&[0.0, 1.0, 1.0, 0.0, 1.0, 1.0], 2), (1, 1.0));
        assert_eq!(row_window_max(&[0.5, 0.5], 4), (0, 0.25));
    }

    #[test]
    fn curve_file_json() {
        let curves = vec![
            LaneCurve::fit(1, vec![(1.25, 0.0), (3.5, 10.0)]).unwrap(),
            LaneCurve::missing(2),
        ];
        let f = CurveFile::from_curves(64, 32, &curves);
        let json = f.to_json();
        assert_eq!(
            json,
            r#"{"image_width":64,"image_height":32,"lanes":[{"id":1,"exists":true,"points":[[1.25,0.0],[3.5,10.0]]},{"id":2,"exists":false,"points":[]}]}"#
        );
        let back = CurveFile::from_json(&json).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.curves(), curves);
    }
}
