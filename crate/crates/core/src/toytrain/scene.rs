//! Synthetic road scenes: near-parallel curved lanes, rectangular occluders
//! drawn over them, and per-pixel lane labels that ignore the occluders.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lanepost::LaneCurve;
use crate::tensor::Tensor3;

pub const TARGET_STROKE: f64 = 16.0;
const MIN_SIDE: usize = 64;
const MARKING_HALF_WIDTH: f64 = 2.5;
const BACKGROUND: f64 = 0.3;
/// Marking brightness of the first and last lane; lanes in between are spaced evenly.
const MARKING_BRIGHT: f64 = 1.0;
const MARKING_DIM: f64 = 0.65;
const NOISE_SIGMA: f64 = 0.08;
const GT_ROW_STEP: usize = 10;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("image {0}x{1} is smaller than {MIN_SIDE}x{MIN_SIDE}")]
    TooSmall(usize, usize),
    #[error("occlusion rate {0} outside [0, 1]")]
    Rate(f64),
    #[error("{lanes} lanes need {need:.0} px of lateral spacing each, only {have:.1} available")]
    Crowded { lanes: usize, need: f64, have: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub lanes: usize,
    pub occlusion_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 160,
            lanes: 2,
            occlusion_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// 1×H×W grayscale.
    pub image: Tensor3,
    /// H×W, 0 = background, `l` = lane `l`.
    pub labels: Vec<u8>,
    pub existence: Vec<bool>,
    /// H×W, true under an occluder.
    pub occlusion: Vec<bool>,
    /// Lane centerline `x` at every row, one vector per lane.
    pub centerlines: Vec<Vec<f64>>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.rows()
    }

    pub fn width(&self) -> usize {
        self.image.cols()
    }

    pub fn lanes(&self) -> usize {
        self.existence.len()
    }

    /// Fraction of labeled lane pixels hidden by occluders.
    pub fn covered_fraction(&self) -> f64 {
        let lane = self.labels.iter().filter(|l| **l > 0).count();
        if lane == 0 {
            return 0.0;
        }
        let hidden = self
            .labels
            .iter()
            .zip(&self.occlusion)
            .filter(|(l, o)| **l > 0 && **o)
            .count();
        hidden as f64 / lane as f64
    }

    /// Ground-truth curves sampled every 10 rows plus the bottom row.
    pub fn gt_curves(&self) -> Vec<LaneCurve> {
        let h = self.height();
        let mut rows: Vec<usize> = (0..h).step_by(GT_ROW_STEP).collect();
        if *rows.last().unwrap() != h - 1 {
            rows.push(h - 1);
        }
        self.centerlines
            .iter()
            .enumerate()
            .map(|(l, xs)| {
                let pts = rows.iter().map(|&j| (xs[j], j as f64)).collect();
                LaneCurve::fit(l + 1, pts).expect("rows strictly increase")
            })
            .collect()
    }
}

/// Each lane has its own marking brightness, so a small neighbourhood is
/// enough to tell lanes apart wherever the marking is visible.
pub fn marking_intensity(lane: usize, lanes: usize) -> f64 {
    if lanes <= 1 {
        return MARKING_BRIGHT;
    }
    MARKING_BRIGHT - (MARKING_BRIGHT - MARKING_DIM) * lane as f64 / (lanes - 1) as f64
}

pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene, SceneError> {
    let SceneConfig {
        height: h,
        width: w,
        lanes,
        occlusion_rate,
    } = *cfg;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(SceneError::TooSmall(h, w));
    }
    if !(0.0..=1.0).contains(&occlusion_rate) {
        return Err(SceneError::Rate(occlusion_rate));
    }
    let spacing = w as f64 / (lanes + 1) as f64;
    let need = 2.0 * TARGET_STROKE;
    if lanes > 0 && spacing < need {
        return Err(SceneError::Crowded {
            lanes,
            need,
            have: spacing,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hf = (h - 1) as f64;
    // shared geometry keeps the lanes near-parallel
    let slope = rng.random_range(-0.15..0.15);
    let bend = rng.random_range(-0.12..0.12) * hf;
    let centerlines: Vec<Vec<f64>> = (0..lanes)
        .map(|l| {
            let base = spacing * (l + 1) as f64 + rng.random_range(-0.12..0.12) * spacing;
            let own = rng.random_range(-0.04..0.04);
            (0..h)
                .map(|j| {
                    let up = (hf - j as f64) / hf;
                    base + (slope + own) * (hf - j as f64) + bend * up * up
                })
                .collect()
        })
        .collect();

    let mut image = vec![BACKGROUND; h * w];
    let mut labels = vec![0u8; h * w];
    let half = TARGET_STROKE / 2.0;
    for j in 0..h {
        for k in 0..w {
            let mut nearest: Option<(usize, f64)> = None;
            for (l, xs) in centerlines.iter().enumerate() {
                let d = (k as f64 - xs[j]).abs();
                if nearest.is_none_or(|(_, best)| d < best) {
                    nearest = Some((l, d));
                }
            }
            if let Some((l, d)) = nearest {
                if d <= half {
                    labels[j * w + k] = (l + 1) as u8;
                }
                if d <= MARKING_HALF_WIDTH {
                    image[j * w + k] = marking_intensity(l, lanes);
                }
            }
        }
    }

    let mut occlusion = vec![false; h * w];
    let lane_pixels = labels.iter().filter(|l| **l > 0).count();
    if occlusion_rate > 0.0 && lane_pixels > 0 {
        let mut hidden = 0usize;
        for _ in 0..500 {
            if hidden as f64 >= occlusion_rate * lane_pixels as f64 {
                break;
            }
            let l = rng.random_range(0..lanes);
            let rh = rng.random_range(h / 8..=h / 3);
            let top = rng.random_range(0..=h - rh);
            let mid = centerlines[l][top + rh / 2];
            let left = (mid - half - rng.random_range(2.0..12.0)).floor().max(0.0) as usize;
            let right = ((mid + half + rng.random_range(2.0..12.0)).ceil() as usize).min(w - 1);
            let shade = rng.random_range(0.0..0.5);
            for j in top..top + rh {
                for k in left..=right {
                    let idx = j * w + k;
                    if !occlusion[idx] && labels[idx] > 0 {
                        hidden += 1;
                    }
                    occlusion[idx] = true;
                    image[idx] = shade;
                }
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for v in &mut image {
        *v += noise.sample(&mut rng);
    }

    Ok(SyntheticScene {
        image: Tensor3::from_vec(1, h, w, image).expect("dims checked"),
        labels,
        existence: vec![true; lanes],
        occlusion,
        centerlines,
    })
}
