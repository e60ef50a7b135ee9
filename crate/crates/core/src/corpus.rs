//! Synthetic evaluation corpora: probability maps painted from generated
//! scenes, their ground-truth curve files, and batch curve extraction.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::lanepost::{decode, existence_scores, CurveError, CurveFile, DecodeParams};
use crate::tensor::{Tensor3, TensorError};
use crate::toytrain::scene::{gen_scene, SceneConfig, SceneError, SyntheticScene, TARGET_STROKE};

const VISIBLE_PEAK: f64 = 0.95;
const OCCLUDED_PEAK: f64 = 0.55;
/// Scenes with more than this fraction of lane pixels hidden are listed as "occluded".
pub const OCCLUDED_CATEGORY_CUTOFF: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Probability maps a well-trained net might produce for `scene`: each lane
/// channel peaks on the centerline and falls off linearly to the label
/// edge, weaker under occluders; channel 0 takes the remaining mass.
pub fn paint_probmaps(scene: &SyntheticScene) -> Tensor3 {
    let (h, w, lanes) = (scene.height(), scene.width(), scene.lanes());
    let half = TARGET_STROKE / 2.0;
    let mut t = Tensor3::zeros(lanes + 1, h, w).expect("scene dims are positive");
    for j in 0..h {
        for k in 0..w {
            let p = j * w + k;
            let lab = scene.labels[p] as usize;
            let mut lane_mass = 0.0;
            if lab > 0 {
                let d = (k as f64 - scene.centerlines[lab - 1][j]).abs();
                let peak = if scene.occlusion[p] { OCCLUDED_PEAK } else { VISIBLE_PEAK };
                let v = peak * (1.0 - d / (half + 1.0));
                t.set(lab, j, k, v).expect("in range");
                lane_mass = v;
            }
            t.set(0, j, k, 1.0 - lane_mass).expect("in range");
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub images: usize,
    pub list: PathBuf,
    pub categories: Vec<String>,
}

fn corpus_seed(seed: u64, idx: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ idx as u64
}

/// Writes `probmaps/NNN.scnt`, `gt/NNN.json` and `list.txt` (lines
/// `pred/NNN.json gt/NNN.json <category>`) under `out`.
pub fn gen_corpus(out: &Path, n: usize, seed: u64, scene: &SceneConfig) -> Result<CorpusSummary, CorpusError> {
    for sub in ["probmaps", "gt", "pred"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut list = String::new();
    let mut categories = Vec::with_capacity(n);
    for i in 0..n {
        let s = gen_scene(corpus_seed(seed, i), scene)?;
        paint_probmaps(&s).save(out.join(format!("probmaps/{i:03}.scnt")))?;
        CurveFile::from_curves(s.width(), s.height(), &s.gt_curves()).save(out.join(format!("gt/{i:03}.json")))?;
        let cat = if s.covered_fraction() > OCCLUDED_CATEGORY_CUTOFF {
            "occluded"
        } else {
            "normal"
        };
        list.push_str(&format!("pred/{i:03}.json gt/{i:03}.json {cat}\n"));
        categories.push(cat.to_string());
    }
    let list_path = out.join("list.txt");
    std::fs::write(&list_path, list).map_err(io_err(&list_path))?;
    Ok(CorpusSummary {
        images: n,
        list: list_path,
        categories,
    })
}

/// How [`extract`] turns probability maps into curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtractOptions {
    pub decode: DecodeParams,
    /// Lane channels to decode; `None` means every channel after the first.
    pub lanes: Option<usize>,
    pub exist_window: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            lanes: None,
            exist_window: 1,
        }
    }
}

pub fn extract(probmaps: &Tensor3, opts: &ExtractOptions) -> CurveFile {
    let (c, h, w) = probmaps.shape();
    let lanes = opts.lanes.unwrap_or(c.saturating_sub(1)).min(c);
    let existence = existence_scores(probmaps, lanes, opts.exist_window);
    CurveFile::from_curves(w, h, &decode(probmaps, &existence, &opts.decode))
}

pub fn extract_file(probmap: &Path, out: &Path, opts: &ExtractOptions) -> Result<CurveFile, CorpusError> {
    let curves = extract(&Tensor3::load(probmap)?, opts);
    curves.save(out)?;
    Ok(curves)
}

/// Extracts every `probmaps/*.scnt` under `dir` into `pred/*.json`, in
/// file-name order. Returns the written paths.
pub fn extract_dir(dir: &Path, opts: &ExtractOptions) -> Result<Vec<PathBuf>, CorpusError> {
    let src = dir.join("probmaps");
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(&src)
        .map_err(io_err(&src))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scnt"))
        .collect();
    inputs.sort();
    let dst = dir.join("pred");
    std::fs::create_dir_all(&dst).map_err(io_err(&dst))?;
    let mut written = Vec::with_capacity(inputs.len());
    for input in inputs {
        let stem = input.file_stem().expect("filtered by extension").to_string_lossy().into_owned();
        let out = dst.join(format!("{stem}.json"));
        extract_file(&input, &out, opts)?;
        written.push(out);
    }
    Ok(written)
}
