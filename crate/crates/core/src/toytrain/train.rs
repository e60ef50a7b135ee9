//! SGD with momentum, weight decay and a poly learning-rate schedule over
//! freshly generated scenes, plus held-out F1 evaluation.

use std::io::Write;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{InitOptions, LossWeights, NetConfig, TinyNet};
use super::scene::{gen_scene, SceneConfig, SyntheticScene, TARGET_STROKE};
use super::TrainError;
use crate::lanepost::{decode, DecodeParams};
use crate::laneval::{fmeasure, match_and_score, MatchCounts};

const TRAIN_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub scene: SceneConfig,
    pub steps: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub loss: LossWeights,
    /// Rescales the batch gradient to at most this global L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub init: InitOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            scene: SceneConfig::default(),
            steps: 2000,
            batch: 4,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            loss: LossWeights::default(),
            grad_clip: None,
            seed: 0,
            init: InitOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("base_lr", self.base_lr),
            ("poly_power", self.poly_power),
            ("background weight", self.loss.background),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.loss.existence >= 0.0 && self.loss.existence.is_finite()) {
            return Err(TrainError::Config(format!(
                "existence weight must be non-negative, got {}",
                self.loss.existence
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive".into()));
        }
        if self.net.lanes != self.scene.lanes {
            return Err(TrainError::Config(format!(
                "net predicts {} lanes but scenes have {}",
                self.net.lanes, self.scene.lanes
            )));
        }
        Ok(())
    }
}

/// `base · (1 − iter/max_iter)^power`, clamped at zero past the end.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: TinyNet,
    pub history: Vec<StepMetrics>,
}

fn scene_seed(seed: u64, stream: u64, idx: u64) -> u64 {
    (seed << 32) ^ (stream << 62) ^ idx
}

/// Trains a fresh net. Each step draws `batch` new scenes; gradients are
/// computed per scene in parallel and summed in scene order, so results
/// do not depend on the thread count. When `log` is given, every step is
/// written to it as one JSON line.
pub fn train(cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = TinyNet::new(cfg.net.clone(), cfg.init, &mut rng)?;
    let mut velocity = net.zero_grads();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let scenes = (0..cfg.batch)
            .map(|b| gen_scene(scene_seed(cfg.seed, TRAIN_STREAM, (step * cfg.batch + b) as u64), &cfg.scene))
            .collect::<Result<Vec<_>, _>>()?;
        let per_scene = scenes
            .par_iter()
            .map(|s| {
                let mut g = net.zero_grads();
                let l = net.loss_and_grad(s, cfg.loss, &mut g)?;
                Ok((l, g))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;

        let mut grads = net.zero_grads();
        let mut loss = 0.0;
        for (l, g) in &per_scene {
            loss += l;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += p;
                }
            }
        }
        let mut scale = 1.0 / cfg.batch as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = scale * grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            if norm > clip {
                scale *= clip / norm;
            }
        }

        let lr = poly_lr(cfg.base_lr, step, cfg.steps, cfg.poly_power);
        for ((param, grad), vel) in net.param_slices_mut().into_iter().zip(&grads).zip(&mut velocity) {
            for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let d = g * scale + cfg.weight_decay * *p;
                *v = cfg.momentum * *v - lr * d;
                *p += *v;
            }
        }
        if net.param_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Diverged { step });
        }

        let m = StepMetrics { step, lr, loss };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        }
        history.push(m);
    }
    Ok(TrainRun { net, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub iou_threshold: f64,
    pub counts: MatchCounts,
    pub f1: f64,
}

/// Decodes the net's output on `scenes` held-out scenes (a seed stream
/// disjoint from training) and scores the curves against the ground truth
/// with the training stroke width.
pub fn evaluate(
    net: &TinyNet,
    scene_cfg: &SceneConfig,
    seed: u64,
    scenes: usize,
    params: &DecodeParams,
    iou_threshold: f64,
) -> Result<EvalSummary, TrainError> {
    let per_scene = (0..scenes)
        .into_par_iter()
        .map(|i| {
            let s: SyntheticScene = gen_scene(scene_seed(seed, EVAL_STREAM, i as u64), scene_cfg)?;
            let out = net.forward(&s.image)?;
            let preds = decode(&out.probmaps, &out.existence, params);
            Ok(match_and_score(
                &preds,
                &s.gt_curves(),
                s.height(),
                s.width(),
                TARGET_STROKE,
                iou_threshold,
            ))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut counts = MatchCounts::default();
    for c in per_scene {
        counts += c;
    }
    Ok(EvalSummary {
        scenes,
        iou_threshold,
        counts,
        f1: fmeasure(counts.tp, counts.fp, counts.fn_, 1.0),
    })
}
