//! IoU-based lane detection scoring.
//!
//! Curves are drawn as fixed-width strokes, predictions and ground truths are
//! paired one-to-one by maximum total IoU over pairs above the threshold, and
//! the resulting TP/FP/FN counts give precision, recall and F-measure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lanepost::{CurveError, CurveFile, LaneCurve};

pub const DEFAULT_STROKE_WIDTH: f64 = 30.0;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary H×W raster of a thickened curve.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeMask {
    h: usize,
    w: usize,
    width: f64,
    bits: Vec<bool>,
}

impl StrokeMask {
    pub fn empty(h: usize, w: usize, width: f64) -> Self {
        Self {
            h,
            w,
            width,
            bits: vec![false; h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn get(&self, j: usize, k: usize) -> bool {
        self.bits[j * self.w + k]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Sets every pixel whose center lies within `width / 2` of the segment.
    fn stroke_segment(&mut self, p: (f64, f64), q: (f64, f64)) {
        let r = self.width / 2.0;
        let r2 = r * r;
        let kmin = (p.0.min(q.0) - r).ceil().max(0.0);
        let kmax = (p.0.max(q.0) + r).floor().min(self.w as f64 - 1.0);
        let jmin = (p.1.min(q.1) - r).ceil().max(0.0);
        let jmax = (p.1.max(q.1) + r).floor().min(self.h as f64 - 1.0);
        if kmin > kmax || jmin > jmax {
            return;
        }
        let (dx, dy) = (q.0 - p.0, q.1 - p.1);
        let len2 = dx * dx + dy * dy;
        for j in jmin as usize..=jmax as usize {
            for k in kmin as usize..=kmax as usize {
                let (px, py) = (k as f64 - p.0, j as f64 - p.1);
                let t = if len2 > 0.0 {
                    ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (px - t * dx, py - t * dy);
                if ex * ex + ey * ey <= r2 {
                    self.bits[j * self.w + k] = true;
                }
            }
        }
    }
}

/// Polyline through the spline evaluated at both ends and every integer `y`
/// between them.
pub fn densify(curve: &LaneCurve) -> Vec<(f64, f64)> {
    let Some(spline) = curve.spline.as_ref().filter(|_| curve.exists) else {
        return Vec::new();
    };
    let (y0, y1) = spline.y_range();
    let mut ys = vec![y0];
    let mut y = y0.floor() + 1.0;
    while y < y1 {
        ys.push(y);
        y += 1.0;
    }
    ys.push(y1);
    ys.into_iter().map(|y| (spline.eval(y), y)).collect()
}

/// Strokes `curve` into an `h × w` mask at the given width.
pub fn rasterize(curve: &LaneCurve, h: usize, w: usize, width: f64) -> StrokeMask {
    let mut mask = StrokeMask::empty(h, w, width);
    let poly = densify(curve);
    for seg in poly.windows(2) {
        mask.stroke_segment(seg[0], seg[1]);
    }
    mask
}

/// `|a ∧ b| / |a ∨ b|`, and 0 when both masks are empty.
pub fn iou(a: &StrokeMask, b: &StrokeMask) -> Result<f64, EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(a.shape(), b.shape()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// One-to-one pairing of rows (predictions) with columns (ground truths)
/// that maximizes total IoU over pairs strictly above `threshold`. Ties in
/// the total prefer more pairs. Returns `(pred, gt)` index pairs.
pub fn optimal_assignment(ious: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let n_pred = ious.len();
    let n_gt = ious.first().map_or(0, Vec::len);
    if n_pred == 0 || n_gt == 0 {
        return Vec::new();
    }
    assert!(n_gt < 20, "exact assignment limited to < 20 ground truths");
    let states = 1usize << n_gt;
    // best[i][mask]: best (total, pairs) for predictions i.. given used gts `mask`
    let mut best = vec![vec![(0.0f64, 0usize); states]; n_pred + 1];
    let better = |a: (f64, usize), b: (f64, usize)| a.0 > b.0 || (a.0 == b.0 && a.1 > b.1);
    for i in (0..n_pred).rev() {
        for mask in 0..states {
            let mut cand = best[i + 1][mask];
            for g in 0..n_gt {
                let v = ious[i][g];
                if mask & (1 << g) == 0 && v > threshold {
                    let rest = best[i + 1][mask | (1 << g)];
                    let opt = (v + rest.0, rest.1 + 1);
                    if better(opt, cand) {
                        cand = opt;
                    }
                }
            }
            best[i][mask] = cand;
        }
    }
    let mut pairs = Vec::new();
    let mut mask = 0usize;
    for i in 0..n_pred {
        let target = best[i][mask];
        if best[i + 1][mask] == target {
            continue;
        }
        for g in 0..n_gt {
            let v = ious[i][g];
            if mask & (1 << g) == 0 && v > threshold {
                let rest = best[i + 1][mask | (1 << g)];
                if (v + rest.0, rest.1 + 1) == target {
                    pairs.push((i, g));
                    mask |= 1 << g;
                    break;
                }
            }
        }
    }
    pairs
}

/// Pairwise IoU of existing predictions (rows) against existing ground truths.
pub fn iou_matrix(preds: &[LaneCurve], gts: &[LaneCurve], h: usize, w: usize, width: f64) -> Vec<Vec<f64>> {
    let pm: Vec<StrokeMask> = preds
        .iter()
        .filter(|c| c.exists)
        .map(|c| rasterize(c, h, w, width))
        .collect();
    let gm: Vec<StrokeMask> = gts
        .iter()
        .filter(|c| c.exists)
        .map(|c| rasterize(c, h, w, width))
        .collect();
    pm.iter()
        .map(|p| gm.iter().map(|g| iou(p, g).expect("same raster")).collect())
        .collect()
}

/// TP/FP/FN for one image. Curves flagged missing are ignored.
pub fn match_and_score(
    preds: &[LaneCurve],
    gts: &[LaneCurve],
    h: usize,
    w: usize,
    width: f64,
    iou_threshold: f64,
) -> MatchCounts {
    let n_pred = preds.iter().filter(|c| c.exists).count();
    let n_gt = gts.iter().filter(|c| c.exists).count();
    let tp = optimal_assignment(&iou_matrix(preds, gts, h, w, width), iou_threshold).len();
    MatchCounts {
        tp,
        fp: n_pred - tp,
        fn_: n_gt - tp,
    }
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: MatchCounts) -> f64 {
    ratio_or_one(c.tp, c.tp + c.fp)
}

pub fn recall(c: MatchCounts) -> f64 {
    ratio_or_one(c.tp, c.tp + c.fn_)
}

/// `(1+β²)·P·R / (β²·P + R)`; 0/0 ratios count as 1 and `P + R = 0` gives 0.
pub fn fmeasure(tp: usize, fp: usize, fn_: usize, beta: f64) -> f64 {
    let c = MatchCounts { tp, fp, fn_ };
    let (p, r) = (precision(c), recall(c));
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (b2 * p + r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

impl CategoryReport {
    pub fn new(c: MatchCounts, fp_only: bool) -> Self {
        let (p, r, f) = if fp_only {
            (None, None, None)
        } else {
            (Some(precision(c)), Some(recall(c)), Some(fmeasure(c.tp, c.fp, c.fn_, 1.0)))
        };
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: p,
            recall: r,
            f1: f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub width: f64,
    pub categories: BTreeMap<String, CategoryReport>,
    pub total: CategoryReport,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub width: f64,
    /// Categories without annotated lanes, reported by FP count only.
    pub fp_only: Vec<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            width: DEFAULT_STROKE_WIDTH,
            fp_only: vec!["crossroad".to_string()],
        }
    }
}

/// Per-image inputs for [`evaluate_entries`].
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub category: String,
    pub pred: CurveFile,
    pub gt: CurveFile,
}

/// Scores one entry in the ground truth's raster; predictions given at a
/// different resolution are rescaled into it first.
pub fn score_entry(entry: &CorpusEntry, opts: &EvalOptions) -> MatchCounts {
    let (h, w) = (entry.gt.image_height, entry.gt.image_width);
    let sx = w as f64 / entry.pred.image_width.max(1) as f64;
    let sy = h as f64 / entry.pred.image_height.max(1) as f64;
    let mut pred = entry.pred.clone();
    if sx != 1.0 || sy != 1.0 {
        for lane in &mut pred.lanes {
            for p in &mut lane.points {
                *p = (p.0 * sx, p.1 * sy);
            }
        }
    }
    match_and_score(&pred.curves(), &entry.gt.curves(), h, w, opts.width, opts.iou_threshold)
}

pub fn evaluate_entries(entries: &[CorpusEntry], opts: &EvalOptions) -> EvalReport {
    let counts: Vec<MatchCounts> = entries.par_iter().map(|e| score_entry(e, opts)).collect();
    let mut per_cat: BTreeMap<String, MatchCounts> = BTreeMap::new();
    let mut total = MatchCounts::default();
    for (e, c) in entries.iter().zip(counts) {
        *per_cat.entry(e.category.clone()).or_default() += c;
        total += c;
    }
    EvalReport {
        threshold: opts.iou_threshold,
        width: opts.width,
        categories: per_cat
            .into_iter()
            .map(|(name, c)| {
                let fp_only = opts.fp_only.iter().any(|f| f == &name);
                (name, CategoryReport::new(c, fp_only))
            })
            .collect(),
        total: CategoryReport::new(total, false),
    }
}

/// Reads `<pred_path> <gt_path> <category>` lines (paths relative to the
/// list file) and scores them. Lines that cannot be read are returned as
/// diagnostics and left out of the report.
pub fn evaluate_corpus(list_file: &Path, opts: &EvalOptions) -> Result<(EvalReport, Vec<EvalError>), EvalError> {
    let text = std::fs::read_to_string(list_file)?;
    let base = list_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 3 {
            errors.push(EvalError::Line {
                line,
                msg: format!("expected `<pred> <gt> <category>`, got {} fields", fields.len()),
            });
            continue;
        }
        let load = |p: &str| {
            CurveFile::load(resolve(p)).map_err(|e| EvalError::Line {
                line,
                msg: format!("{p}: {e}"),
            })
        };
        match (load(fields[0]), load(fields[1])) {
            (Ok(pred), Ok(gt)) => entries.push(CorpusEntry {
                category: fields[2].to_string(),
                pred,
                gt,
            }),
            (Err(e), _) | (_, Err(e)) => errors.push(e),
        }
    }
    Ok((evaluate_entries(&entries, opts), errors))
}
