//! A small fully convolutional lane segmenter with an optional slice-wise
//! propagation stack, plus its loss and hand-written backward pass.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use super::TrainError;
use crate::lanepost::row_window_max;
use crate::scnn::{Direction, PropagationConfig, ScnnKernel, ScnnStack, Scheme};
use crate::tensor::Tensor3;

/// Where the propagation stack sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    /// After the last hidden ReLU, on `hidden` channels.
    TopHidden,
    /// After the 1×1 classifier, on the `lanes + 1` logits.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub insertion: Insertion,
    pub kernel_width: usize,
    pub order: Vec<Direction>,
    pub scheme: Scheme,
}

impl StackConfig {
    pub fn new(insertion: Insertion) -> Self {
        Self {
            insertion,
            kernel_width: 9,
            order: vec![Direction::Down, Direction::Up, Direction::Right, Direction::Left],
            scheme: Scheme::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of 3×3 conv + ReLU layers.
    pub layers: usize,
    pub hidden: usize,
    pub lanes: usize,
    pub stack: Option<StackConfig>,
    /// Width of the row window averaged by the existence head.
    #[serde(default = "default_exist_window")]
    pub exist_window: usize,
}

fn default_exist_window() -> usize {
    EXIST_WINDOW
}

/// One pixel short of the target stroke so the window fits inside a label band.
pub const EXIST_WINDOW: usize = 15;

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 16,
            lanes: 2,
            stack: None,
            exist_window: EXIST_WINDOW,
        }
    }
}

impl NetConfig {
    pub fn stack_channels(&self) -> usize {
        match self.stack.as_ref().map(|s| s.insertion) {
            Some(Insertion::Output) => self.lanes + 1,
            _ => self.hidden,
        }
    }
}

/// How freshly created parameters are filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InitOptions {
    pub zero_classifier: bool,
    pub zero_stack: bool,
}

/// 3×3 convolution, stride 1, zero padding. `weight[((o * cin + i) * 3 + a) * 3 + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

impl Conv3x3 {
    fn forward_relu(&self, x: &Tensor3) -> Tensor3 {
        let (_, h, w) = x.shape();
        let plane = h * w;
        let mut out = Tensor3::zeros(self.cout, h, w).expect("positive dims");
        let src = x.data();
        for o in 0..self.cout {
            let dst = &mut out.data_mut()[o * plane..(o + 1) * plane];
            dst.fill(self.bias[o]);
            for i in 0..self.cin {
                let si = &src[i * plane..(i + 1) * plane];
                for a in 0..3 {
                    let da = a as isize - 1;
                    let (jlo, jhi) = span(da, h);
                    for b in 0..3 {
                        let db = b as isize - 1;
                        let (klo, khi) = span(db, w);
                        let wt = self.weight[((o * self.cin + i) * 3 + a) * 3 + b];
                        for j in jlo..jhi {
                            let sj = (j as isize + da) as usize;
                            let so = sj * w + (klo as isize + db) as usize;
                            for (d, s) in dst[j * w + klo..j * w + khi].iter_mut().zip(&si[so..so + khi - klo]) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
            for v in dst.iter_mut() {
                *v = v.max(0.0);
            }
        }
        out
    }

    /// `gout` is the gradient w.r.t. the pre-ReLU output, already gated.
    fn backward(&self, x: &Tensor3, gout: &Tensor3, gw: &mut [f64], gb: &mut [f64], need_input: bool) -> Option<Tensor3> {
        let (_, h, w) = x.shape();
        let plane = h * w;
        let src = x.data();
        let mut gin = need_input.then(|| Tensor3::zeros(self.cin, h, w).expect("positive dims"));
        for o in 0..self.cout {
            let go = &gout.data()[o * plane..(o + 1) * plane];
            gb[o] += go.iter().sum::<f64>();
            for i in 0..self.cin {
                let si = &src[i * plane..(i + 1) * plane];
                for a in 0..3 {
                    let da = a as isize - 1;
                    let (jlo, jhi) = span(da, h);
                    for b in 0..3 {
                        let db = b as isize - 1;
                        let (klo, khi) = span(db, w);
                        let widx = ((o * self.cin + i) * 3 + a) * 3 + b;
                        let wt = self.weight[widx];
                        let mut acc = 0.0;
                        for j in jlo..jhi {
                            let sj = (j as isize + da) as usize;
                            let so = sj * w + (klo as isize + db) as usize;
                            let grow = &go[j * w + klo..j * w + khi];
                            acc += grow.iter().zip(&si[so..so + khi - klo]).map(|(g, s)| g * s).sum::<f64>();
                            if let Some(gin) = gin.as_mut() {
                                let gi = &mut gin.data_mut()[i * plane + so..i * plane + so + khi - klo];
                                for (d, g) in gi.iter_mut().zip(grow) {
                                    *d += wt * g;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        gin
    }
}

/// 1×1 classifier `logits[c] = bias[c] + Σ_i weight[c * cin + i] · x[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Classifier {
    fn forward(&self, x: &Tensor3) -> Tensor3 {
        let (_, h, w) = x.shape();
        let plane = h * w;
        let mut out = Tensor3::zeros(self.cout, h, w).expect("positive dims");
        for c in 0..self.cout {
            let dst = &mut out.data_mut()[c * plane..(c + 1) * plane];
            dst.fill(self.bias[c]);
            for i in 0..self.cin {
                let wt = self.weight[c * self.cin + i];
                for (d, s) in dst.iter_mut().zip(&x.data()[i * plane..(i + 1) * plane]) {
                    *d += wt * s;
                }
            }
        }
        out
    }

    fn backward(&self, x: &Tensor3, gout: &Tensor3, gw: &mut [f64], gb: &mut [f64]) -> Tensor3 {
        let (_, h, w) = x.shape();
        let plane = h * w;
        let mut gin = Tensor3::zeros(self.cin, h, w).expect("positive dims");
        for c in 0..self.cout {
            let go = &gout.data()[c * plane..(c + 1) * plane];
            gb[c] += go.iter().sum::<f64>();
            for i in 0..self.cin {
                let xi = &x.data()[i * plane..(i + 1) * plane];
                gw[c * self.cin + i] += go.iter().zip(xi).map(|(g, s)| g * s).sum::<f64>();
                let wt = self.weight[c * self.cin + i];
                for (d, g) in gin.data_mut()[i * plane..(i + 1) * plane].iter_mut().zip(go) {
                    *d += wt * g;
                }
            }
        }
        gin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub config: NetConfig,
    pub convs: Vec<Conv3x3>,
    pub stack: Option<ScnnStack>,
    pub classifier: Classifier,
}

/// Network outputs: per-pixel class probabilities (channel 0 = background)
/// and one existence score per lane.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub probmaps: Tensor3,
    pub existence: Vec<f64>,
}

struct Cache {
    /// acts[0] is the image, acts[l + 1] the output of conv layer l.
    acts: Vec<Tensor3>,
    stack_acts: Option<Vec<Tensor3>>,
    classifier_in: Tensor3,
    classifier_out: Tensor3,
    /// Start of each row's best existence window, per lane.
    row_argmax: Vec<Vec<usize>>,
}

impl TinyNet {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, init: InitOptions, rng: &mut R) -> Result<Self, TrainError> {
        if config.layers == 0 || config.hidden == 0 || config.lanes == 0 {
            return Err(TrainError::Config("layers, hidden and lanes must be positive".into()));
        }
        let mut convs = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let cin = if l == 0 { 1 } else { config.hidden };
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            convs.push(Conv3x3 {
                cin,
                cout: config.hidden,
                weight: (0..config.hidden * cin * 9).map(|_| normal.sample(rng)).collect(),
                bias: vec![0.0; config.hidden],
            });
        }
        let classes = config.lanes + 1;
        let cls_std = (1.0 / config.hidden as f64).sqrt();
        let cls_normal = Normal::new(0.0, cls_std).expect("valid std");
        let classifier = Classifier {
            cin: config.hidden,
            cout: classes,
            weight: (0..classes * config.hidden)
                .map(|_| if init.zero_classifier { 0.0 } else { cls_normal.sample(rng) })
                .collect(),
            bias: vec![0.0; classes],
        };
        let stack = match &config.stack {
            None => None,
            Some(sc) => {
                let c = config.stack_channels();
                Some(if init.zero_stack {
                    ScnnStack::zeros(c, sc.kernel_width, &sc.order, sc.scheme)?
                } else {
                    ScnnStack::random_init(c, sc.kernel_width, &sc.order, sc.scheme, rng)?
                })
            }
        };
        Ok(Self {
            config,
            convs,
            stack,
            classifier,
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter blocks in a fixed order shared with gradients and optimizer state.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        if let Some(s) = &self.stack {
            for (_, k) in s.layers() {
                v.push(k.weights());
            }
        }
        v.push(&self.classifier.weight);
        v.push(&self.classifier.bias);
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        if let Some(s) = &mut self.stack {
            for (_, k) in s.layers_mut() {
                v.push(k.weights_mut());
            }
        }
        v.push(&mut self.classifier.weight);
        v.push(&mut self.classifier.bias);
        v
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.param_slices().iter().map(|s| vec![0.0; s.len()]).collect()
    }

    fn forward_cached(&self, image: &Tensor3) -> Result<(NetOutput, Cache), TrainError> {
        if image.channels() != 1 {
            return Err(TrainError::Shape(format!(
                "expected a single-channel image, got {} channels",
                image.channels()
            )));
        }
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        acts.push(image.clone());
        for conv in &self.convs {
            let next = conv.forward_relu(acts.last().unwrap());
            acts.push(next);
        }
        let insertion = self.config.stack.as_ref().map(|s| s.insertion);
        let mut stack_acts = None;
        let classifier_in = match (insertion, &self.stack) {
            (Some(Insertion::TopHidden), Some(stack)) => {
                let trace = stack.forward_trace(acts.last().unwrap())?;
                let top = trace.last().unwrap().clone();
                stack_acts = Some(trace);
                top
            }
            _ => acts.last().unwrap().clone(),
        };
        let classifier_out = self.classifier.forward(&classifier_in);
        let logits = match (insertion, &self.stack) {
            (Some(Insertion::Output), Some(stack)) => {
                let trace = stack.forward_trace(&classifier_out)?;
                let top = trace.last().unwrap().clone();
                stack_acts = Some(trace);
                top
            }
            _ => classifier_out.clone(),
        };
        let probmaps = crate::meanfield::softmax_channels(&logits);
        let (_, h, w) = probmaps.shape();
        let mut existence = Vec::with_capacity(self.config.lanes);
        let mut row_argmax = Vec::with_capacity(self.config.lanes);
        for l in 1..=self.config.lanes {
            let plane = probmaps.channel(l);
            let mut starts = Vec::with_capacity(h);
            let mut sum = 0.0;
            for j in 0..h {
                let (start, mean) = row_window_max(&plane[j * w..(j + 1) * w], self.config.exist_window);
                starts.push(start);
                sum += mean;
            }
            existence.push(sum / h as f64);
            row_argmax.push(starts);
        }
        Ok((
            NetOutput { probmaps, existence },
            Cache {
                acts,
                stack_acts,
                classifier_in,
                classifier_out,
                row_argmax,
            },
        ))
    }

    pub fn forward(&self, image: &Tensor3) -> Result<NetOutput, TrainError> {
        Ok(self.forward_cached(image)?.0)
    }

    /// Loss of one scene and its gradient, accumulated into `grads`
    /// (laid out as [`param_slices`](Self::param_slices)).
    pub fn loss_and_grad(
        &self,
        scene: &SyntheticScene,
        weights: LossWeights,
        grads: &mut [Vec<f64>],
    ) -> Result<f64, TrainError> {
        let (out, cache) = self.forward_cached(&scene.image)?;
        let value = loss(&out.probmaps, &out.existence, scene, weights)?;
        let glogits = loss_logit_grad(&out, &cache.row_argmax, self.config.exist_window, scene, weights);
        self.backward(&cache, &glogits, grads)?;
        Ok(value)
    }

    fn backward(&self, cache: &Cache, glogits: &Tensor3, grads: &mut [Vec<f64>]) -> Result<(), TrainError> {
        let n_conv = self.convs.len();
        let n_stack = self.stack.as_ref().map_or(0, |s| s.layers().len());
        let cls_w = 2 * n_conv + n_stack;
        let insertion = self.config.stack.as_ref().map(|s| s.insertion);

        let mut stack_grads = None;
        let gcls_out = match (insertion, &self.stack, &cache.stack_acts) {
            (Some(Insertion::Output), Some(stack), Some(trace)) => {
                let (g, gk) = stack.backward(trace, glogits)?;
                stack_grads = Some(gk);
                g
            }
            _ => glogits.clone(),
        };
        debug_assert_eq!(gcls_out.shape(), cache.classifier_out.shape());
        let (gw, rest) = grads[cls_w..].split_at_mut(1);
        let gtop = self
            .classifier
            .backward(&cache.classifier_in, &gcls_out, &mut gw[0], &mut rest[0]);
        let mut g = match (insertion, &self.stack, &cache.stack_acts) {
            (Some(Insertion::TopHidden), Some(stack), Some(trace)) => {
                let (g, gk) = stack.backward(trace, &gtop)?;
                stack_grads = Some(gk);
                g
            }
            _ => gtop,
        };
        if let Some(gk) = stack_grads {
            for (idx, k) in gk.iter().enumerate() {
                for (d, s) in grads[2 * n_conv + idx].iter_mut().zip(k.weights()) {
                    *d += s;
                }
            }
        }
        for l in (0..n_conv).rev() {
            let out = &cache.acts[l + 1];
            for (gv, a) in g.data_mut().iter_mut().zip(out.data()) {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            }
            let (gw, gb) = grads[2 * l..2 * l + 2].split_at_mut(1);
            match self.convs[l].backward(&cache.acts[l], &g, &mut gw[0], &mut gb[0], l > 0) {
                Some(gin) => g = gin,
                None => break,
            }
        }
        Ok(())
    }

    /// Writes `layer{idx}.weight`/`.bias`, `scnn.{D|U|R|L}.kernel`,
    /// `classifier.weight`/`.bias` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        for (idx, c) in self.convs.iter().enumerate() {
            Tensor3::from_vec(c.cout, c.cin, 9, c.weight.clone())?.save(dir.join(format!("layer{idx}.weight")))?;
            Tensor3::from_vec(1, 1, c.cout, c.bias.clone())?.save(dir.join(format!("layer{idx}.bias")))?;
        }
        if let Some(stack) = &self.stack {
            for (cfg, k) in stack.layers() {
                k.save(dir.join(format!("scnn.{}.kernel", cfg.direction.letter())))?;
            }
        }
        let cls = &self.classifier;
        Tensor3::from_vec(cls.cout, cls.cin, 1, cls.weight.clone())?.save(dir.join("classifier.weight"))?;
        Tensor3::from_vec(1, 1, cls.cout, cls.bias.clone())?.save(dir.join("classifier.bias"))?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.config).expect("config serializes"),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let config: NetConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| TrainError::Config(format!("manifest: {e}")))?;
        let expect = |t: Tensor3, shape: (usize, usize, usize), name: &str| -> Result<Vec<f64>, TrainError> {
            if t.shape() != shape {
                return Err(TrainError::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            Ok(t.into_vec())
        };
        let mut convs = Vec::new();
        for idx in 0..config.layers {
            let cin = if idx == 0 { 1 } else { config.hidden };
            let wname = format!("layer{idx}.weight");
            let bname = format!("layer{idx}.bias");
            convs.push(Conv3x3 {
                cin,
                cout: config.hidden,
                weight: expect(Tensor3::load(dir.join(&wname))?, (config.hidden, cin, 9), &wname)?,
                bias: expect(Tensor3::load(dir.join(&bname))?, (1, 1, config.hidden), &bname)?,
            });
        }
        let stack = match &config.stack {
            None => None,
            Some(sc) => {
                let layers = sc
                    .order
                    .iter()
                    .map(|d| {
                        let k = ScnnKernel::load(dir.join(format!("scnn.{}.kernel", d.letter())))?;
                        Ok((PropagationConfig::new(*d, sc.scheme), k))
                    })
                    .collect::<Result<Vec<_>, TrainError>>()?;
                Some(ScnnStack::new(layers)?)
            }
        };
        let classes = config.lanes + 1;
        let classifier = Classifier {
            cin: config.hidden,
            cout: classes,
            weight: expect(Tensor3::load(dir.join("classifier.weight"))?, (classes, config.hidden, 1), "classifier.weight")?,
            bias: expect(Tensor3::load(dir.join("classifier.bias"))?, (1, 1, classes), "classifier.bias")?,
        };
        Ok(Self {
            config,
            convs,
            stack,
            classifier,
        })
    }
}

const PROB_FLOOR: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Multiplies the cross-entropy of background pixels.
    pub background: f64,
    /// Multiplies the existence binary cross-entropy.
    pub existence: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            background: 0.4,
            existence: 0.1,
        }
    }
}

/// Weighted pixel cross-entropy (background terms down-weighted, averaged
/// over all pixels) plus weighted binary cross-entropy of the existence
/// scores averaged over lanes.
pub fn loss(probmaps: &Tensor3, existence: &[f64], scene: &SyntheticScene, weights: LossWeights) -> Result<f64, TrainError> {
    let (c, h, w) = probmaps.shape();
    if h != scene.height() || w != scene.width() || c != scene.lanes() + 1 || existence.len() != scene.lanes() {
        return Err(TrainError::Shape(format!(
            "outputs {c}x{h}x{w} with {} existence scores do not match the scene",
            existence.len()
        )));
    }
    let plane = h * w;
    let mut ce = 0.0;
    for (p, &lab) in scene.labels.iter().enumerate() {
        let weight = if lab == 0 { weights.background } else { 1.0 };
        let prob = probmaps.data()[lab as usize * plane + p].max(PROB_FLOOR);
        ce -= weight * prob.ln();
    }
    ce /= plane as f64;
    let bce = if existence.is_empty() {
        0.0
    } else {
        existence
            .iter()
            .zip(&scene.existence)
            .map(|(&e, &t)| {
                let e = clamp_prob(e);
                if t {
                    -e.ln()
                } else {
                    -(1.0 - e).ln()
                }
            })
            .sum::<f64>()
            / existence.len() as f64
    };
    Ok(ce + weights.existence * bce)
}

/// Gradient of [`loss`] w.r.t. the pre-softmax logits.
fn loss_logit_grad(
    out: &NetOutput,
    row_argmax: &[Vec<usize>],
    window: usize,
    scene: &SyntheticScene,
    weights: LossWeights,
) -> Tensor3 {
    let probs = &out.probmaps;
    let (c, h, w) = probs.shape();
    let plane = h * w;
    let n = plane as f64;
    let mut g = probs.clone();
    for p in 0..plane {
        let lab = scene.labels[p] as usize;
        let weight = if lab == 0 { weights.background } else { 1.0 };
        for ch in 0..c {
            let onehot = if ch == lab { 1.0 } else { 0.0 };
            g.data_mut()[ch * plane + p] = weight * (probs.data()[ch * plane + p] - onehot) / n;
        }
    }
    let lanes = out.existence.len();
    for (l, cols) in row_argmax.iter().enumerate() {
        let e = clamp_prob(out.existence[l]);
        let de = if scene.existence[l] { -1.0 / e } else { 1.0 / (1.0 - e) } * weights.existence / lanes as f64;
        let ch = l + 1;
        let window = window.max(1);
        let gp = de / (h * window) as f64;
        for (j, &start) in cols.iter().enumerate() {
            for k in start..(start + window).min(w) {
                let p = j * w + k;
                let pc = probs.data()[ch * plane + p];
                for m in 0..c {
                    let pm = probs.data()[m * plane + p];
                    let jac = if m == ch { pc * (1.0 - pc) } else { -pc * pm };
                    g.data_mut()[m * plane + p] += gp * jac;
                }
            }
        }
    }
    g
}
