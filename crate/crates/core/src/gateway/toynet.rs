//! A small fully-convolutional person detector with hand-written backward.
//!
//! Seven 3×3/1×1 convolutions take a 64×64 image to an 8×8 grid; each cell
//! predicts person objectness plus a box relative to a single anchor.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{clip_backward, clip_in_region, ClipPlan};
use super::Normalization;
use crate::model::{BoundingBox, ImagePlane, Tensor3};
use crate::optim::Adam;
use crate::toyworld::{generate_scenes, ToyScene, WorldConfig};

/// `(in, out, kernel, stride)` per layer; the last layer is the linear head.
const ARCH: [(usize, usize, usize, usize); 7] = [
    (3, 8, 3, 1),
    (8, 16, 3, 2),
    (16, 24, 3, 2),
    (24, 32, 3, 2),
    (32, 32, 3, 1),
    (32, 32, 3, 1),
    (32, 5, 1, 1),
];
const ARCH_TAG: &str = "toynet-v1";
pub const HEAD_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    relu: bool,
    w_off: usize,
    b_off: usize,
}

impl ConvLayer {
    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    layers: Vec<ConvLayer>,
    params: Vec<f64>,
    /// Anchor `(width, height)` in input pixels.
    pub anchor: (f64, f64),
    pub input_size: usize,
    pub normalization: Normalization,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Input of each layer; `inputs[0]` is the normalized image and
    /// `inputs[l + 1]` the (filtered) output of layer `l`.
    pub inputs: Vec<Tensor3>,
    /// Output of layer `l` before clipping, when a clip ran there.
    pub pre_clip: Vec<Option<Tensor3>>,
    pub head: Tensor3,
}

impl Forward {
    /// Unfiltered activations of the tapped levels.
    pub fn level_outputs(&self) -> Vec<Tensor3> {
        (0..self.pre_clip.len())
            .map(|l| self.pre_clip[l].clone().unwrap_or_else(|| self.inputs[l + 1].clone()))
            .collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_forward(x: &Tensor3, l: &ConvLayer, p: &[f64]) -> Tensor3 {
    let (h, w, cin) = (x.height(), x.width(), x.channels());
    debug_assert_eq!(cin, l.cin);
    let (oh, ow) = l.out_dims(h, w);
    let (k, cout, s) = (l.k, l.cout, l.stride);
    let pad = (k / 2) as isize;
    let wt = &p[l.w_off..l.w_off + k * k * cin * cout];
    let b = &p[l.b_off..l.b_off + cout];
    let mut out = Tensor3::zeros(oh, ow, cout);
    let xd = x.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut od[(oy * ow + ox) * cout..][..cout];
            acc.copy_from_slice(b);
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xin = &xd[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wb = &wt[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in xin.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wr = &wb[ci * cout..][..cout];
                        for (a, &wv) in acc.iter_mut().zip(wr) {
                            *a += v * wv;
                        }
                    }
                }
            }
            if l.relu {
                for a in acc.iter_mut() {
                    if *a < 0.0 {
                        *a = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// `gout` is the gradient with respect to the pre-activation output.
fn conv_backward(x: &Tensor3, l: &ConvLayer, p: &[f64], gout: &Tensor3, dparams: Option<&mut [f64]>, want_dx: bool) -> Option<Tensor3> {
    let (h, w, cin) = (x.height(), x.width(), x.channels());
    let (oh, ow) = (gout.height(), gout.width());
    let (k, cout, s) = (l.k, l.cout, l.stride);
    let pad = (k / 2) as isize;
    let wt = &p[l.w_off..l.w_off + k * k * cin * cout];
    let mut dx = want_dx.then(|| Tensor3::zeros(h, w, cin));
    let mut dp = dparams;
    let xd = x.data();
    let gd = gout.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &gd[(oy * ow + ox) * cout..][..cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            if let Some(dp) = dp.as_deref_mut() {
                for (d, &gv) in dp[l.b_off..l.b_off + cout].iter_mut().zip(g) {
                    *d += gv;
                }
            }
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * cin;
                    let woff = (ky * k + kx) * cin * cout;
                    if let Some(dp) = dp.as_deref_mut() {
                        let xin = &xd[base..base + cin];
                        let dw = &mut dp[l.w_off + woff..][..cin * cout];
                        for (ci, &v) in xin.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dw[ci * cout..][..cout].iter_mut().zip(g) {
                                *d += v * gv;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wb = &wt[woff..woff + cin * cout];
                        let dxs = &mut dx.data_mut()[base..base + cin];
                        for (ci, d) in dxs.iter_mut().enumerate() {
                            let wr = &wb[ci * cout..][..cout];
                            let mut acc = 0.0;
                            for (&wv, &gv) in wr.iter().zip(g) {
                                acc += wv * gv;
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-cell regression target `(fx, fy, ln(w/aw), ln(h/ah))`.
pub type CellTarget = Option<[f64; 4]>;

impl ToyNet {
    pub fn new(seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut off = 0;
        for (i, &(cin, cout, k, stride)) in ARCH.iter().enumerate() {
            let w_off = off;
            off += k * k * cin * cout;
            let b_off = off;
            off += cout;
            layers.push(ConvLayer {
                cin,
                cout,
                k,
                stride,
                relu: i + 1 < ARCH.len(),
                w_off,
                b_off,
            });
        }
        let mut params = vec![0.0; off];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let fan_in = (l.k * l.k * l.cin) as f64;
            let gain = if l.relu { (2.0 / fan_in).sqrt() } else { (1.0 / fan_in).sqrt() * 0.1 };
            let dist = Normal::new(0.0, gain).expect("positive std");
            for v in &mut params[l.w_off..l.w_off + l.k * l.k * l.cin * l.cout] {
                *v = dist.sample(&mut rng);
            }
        }
        // start with low objectness so empty scenes are quiet from the outset
        let head = layers.last().expect("non-empty arch");
        params[head.b_off] = -4.0;
        Self {
            layers,
            params,
            anchor: (15.0, 36.0),
            input_size: 64,
            normalization: Normalization {
                mean: [0.5; 3],
                std: [0.25; 3],
            },
        }
    }

    /// Number of tapped levels (all layers but the head).
    pub fn levels(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn level_name(l: usize) -> String {
        format!("conv{}", l + 1)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn grid(&self) -> usize {
        self.input_size.div_ceil(self.stride())
    }

    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(ARCH_TAG.as_bytes());
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn normalize(&self, x: &Tensor3) -> Tensor3 {
        let mut t = x.clone();
        let n = &self.normalization;
        for px in t.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - n.mean[c]) / n.std[c];
            }
        }
        t
    }

    /// Chain rule through [`Self::normalize`].
    pub fn denormalize_grad(&self, g: &mut Tensor3) {
        let n = &self.normalization;
        for px in g.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] /= n.std[c];
            }
        }
    }

    /// Forward pass over a normalized input.
    ///
    /// `replace` swaps the output of one level for the given tensor (a
    /// written feature tap); the backward pass treats it as a constant.
    pub fn forward(&self, input: Tensor3, plan: Option<&ClipPlan>, replace: Option<(usize, &Tensor3)>) -> Forward {
        let levels = self.levels();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_clip = vec![None; levels];
        inputs.push(input);
        for (l, layer) in self.layers[..levels].iter().enumerate() {
            let mut out = conv_forward(inputs.last().expect("input"), layer, &self.params);
            if let Some((rl, t)) = replace {
                if rl == l {
                    assert!(t.same_shape(&out), "replacement tap shape");
                    out = t.clone();
                }
            }
            if let Some(clip) = plan.and_then(|p| p.level(l)) {
                let clipped = clip_in_region(&out, clip.tau, clip.region.as_deref());
                pre_clip[l] = Some(out);
                out = clipped;
            }
            inputs.push(out);
        }
        let head = conv_forward(inputs.last().expect("input"), &self.layers[levels], &self.params);
        Forward { inputs, pre_clip, head }
    }

    /// Backward pass. Returns parameter and normalized-input gradients as
    /// requested.
    pub fn backward(
        &self,
        fwd: &Forward,
        plan: Option<&ClipPlan>,
        grad_head: &Tensor3,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<Tensor3>) {
        let mut dparams = want_params.then(|| vec![0.0; self.params.len()]);
        let n = self.layers.len();
        let mut g = grad_head.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if l < n - 1 {
                // g is the gradient on this layer's (filtered) output
                if let (Some(pre), Some(clip)) = (&fwd.pre_clip[l], plan.and_then(|p| p.level(l))) {
                    g = clip_backward(pre, clip.tau, clip.region.as_deref(), &g);
                }
                let act = fwd.pre_clip[l].as_ref().unwrap_or(&fwd.inputs[l + 1]);
                for (gv, &a) in g.data_mut().iter_mut().zip(act.data()) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let need_dx = l > 0 || want_input;
            match conv_backward(&fwd.inputs[l], layer, &self.params, &g, dparams.as_deref_mut(), need_dx) {
                Some(dx) => g = dx,
                None => break,
            }
        }
        (dparams, want_input.then_some(g))
    }

    /// Maximum objectness probability and the cell attaining it.
    pub fn person_score(&self, head: &Tensor3) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, v) in head.data().chunks_exact(HEAD_CHANNELS).enumerate() {
            if v[0] > best.0 {
                best = (v[0], i);
            }
        }
        (sigmoid(best.0), best.1)
    }

    /// Gradient on the head of [`Self::person_score`].
    pub fn person_score_head_grad(&self, head: &Tensor3) -> (f64, Tensor3) {
        let (s, cell) = self.person_score(head);
        let mut g = Tensor3::zeros_like(head);
        g.data_mut()[cell * HEAD_CHANNELS] = s * (1.0 - s);
        (s, g)
    }

    /// Candidate boxes in network coordinates with their confidence.
    pub fn decode(&self, head: &Tensor3, threshold: f64) -> Vec<(BoundingBox, f64)> {
        let stride = self.stride() as f64;
        let gw = head.width();
        let mut out = Vec::new();
        for (i, v) in head.data().chunks_exact(HEAD_CHANNELS).enumerate() {
            let conf = sigmoid(v[0]);
            if conf < threshold {
                continue;
            }
            let (gy, gx) = ((i / gw) as f64, (i % gw) as f64);
            let cx = (gx + sigmoid(v[1])) * stride;
            let cy = (gy + sigmoid(v[2])) * stride;
            let w = self.anchor.0 * v[3].clamp(-4.0, 4.0).exp();
            let h = self.anchor.1 * v[4].clamp(-4.0, 4.0).exp();
            out.push((BoundingBox::from_center(cx, cy, w, h), conf));
        }
        out
    }

    /// Assigns each box (network coordinates) to the cell holding its center.
    pub fn targets(&self, boxes: &[BoundingBox]) -> Vec<CellTarget> {
        let g = self.grid();
        let stride = self.stride() as f64;
        let mut t = vec![None; g * g];
        for b in boxes {
            let (cx, cy) = b.center();
            let gx = ((cx / stride).floor() as isize).clamp(0, g as isize - 1) as usize;
            let gy = ((cy / stride).floor() as isize).clamp(0, g as isize - 1) as usize;
            let cell = gy * g + gx;
            if t[cell].is_none() {
                t[cell] = Some([
                    (cx / stride - gx as f64).clamp(0.0, 1.0),
                    (cy / stride - gy as f64).clamp(0.0, 1.0),
                    (b.width() / self.anchor.0).ln(),
                    (b.height() / self.anchor.1).ln(),
                ]);
            }
        }
        t
    }

    /// Detection training loss on the head and its gradient.
    pub fn detection_loss(&self, head: &Tensor3, targets: &[CellTarget], cfg: &ToyTrainConfig) -> (f64, Tensor3) {
        let mut g = Tensor3::zeros_like(head);
        let cells = targets.len() as f64;
        let npos = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
        let mut loss = 0.0;
        let gd = g.data_mut();
        for (i, (v, t)) in head.data().chunks_exact(HEAD_CHANNELS).zip(targets).enumerate() {
            let p = sigmoid(v[0]);
            let base = i * HEAD_CHANNELS;
            match t {
                Some(t) => {
                    loss += -cfg.pos_weight * p.max(1e-12).ln() / cells;
                    gd[base] = cfg.pos_weight * (p - 1.0) / cells;
                    let sx = sigmoid(v[1]);
                    let sy = sigmoid(v[2]);
                    let r = [sx - t[0], sy - t[1], v[3] - t[2], v[4] - t[3]];
                    let k = cfg.reg_weight / npos;
                    loss += k * r.iter().map(|x| x * x).sum::<f64>();
                    gd[base + 1] = k * 2.0 * r[0] * sx * (1.0 - sx);
                    gd[base + 2] = k * 2.0 * r[1] * sy * (1.0 - sy);
                    gd[base + 3] = k * 2.0 * r[2];
                    gd[base + 4] = k * 2.0 * r[3];
                }
                None => {
                    loss += -(1.0 - p).max(1e-12).ln() / cells;
                    gd[base] = p / cells;
                }
            }
        }
        (loss, g)
    }

    /// Loss and parameter gradient on one image already at network size.
    fn sample_grad(&self, image: &Tensor3, targets: &[CellTarget], cfg: &ToyTrainConfig) -> (f64, Vec<f64>) {
        let fwd = self.forward(self.normalize(image), None, None);
        let (loss, gh) = self.detection_loss(&fwd.head, targets, cfg);
        let (dp, _) = self.backward(&fwd, None, &gh, true, false);
        (loss, dp.expect("param grads requested"))
    }

    /// Loss gradient with respect to the (unnormalized) image.
    pub fn loss_input_grad(&self, image: &Tensor3, targets: &[CellTarget], cfg: &ToyTrainConfig) -> (f64, Tensor3) {
        let fwd = self.forward(self.normalize(image), None, None);
        let (loss, gh) = self.detection_loss(&fwd.head, targets, cfg);
        let (_, gi) = self.backward(&fwd, None, &gh, false, true);
        let mut gi = gi.expect("input grads requested");
        self.denormalize_grad(&mut gi);
        (loss, gi)
    }

    /// ℓ∞ PGD that maximizes the detection loss, random start, step ε/4.
    pub fn pgd<R: Rng + ?Sized>(&self, image: &Tensor3, targets: &[CellTarget], cfg: &ToyTrainConfig, epsilon: f64, steps: usize, rng: &mut R) -> Tensor3 {
        if epsilon <= 0.0 {
            return image.clone();
        }
        let step = epsilon / 4.0;
        let x0 = image.data();
        let mut x = image.clone();
        for (v, &o) in x.data_mut().iter_mut().zip(x0) {
            *v = (o + rng.gen_range(-epsilon..=epsilon)).clamp(0.0, 1.0);
        }
        for _ in 0..steps {
            let (_, g) = self.loss_input_grad(&x, targets, cfg);
            for ((v, &o), &gv) in x.data_mut().iter_mut().zip(x0).zip(g.data()) {
                let moved = *v + step * gv.signum();
                *v = moved.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
            }
        }
        x
    }

    /// Trains on `scenes` (canvas must equal the input size).
    pub fn train(&mut self, cfg: &ToyTrainConfig, scenes: &[ToyScene]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut opt = Adam::new(cfg.lr, self.params.len());
        let targets: Vec<Vec<CellTarget>> = scenes
            .iter()
            .map(|s| self.targets(&s.truth.person_boxes().copied().collect::<Vec<_>>()))
            .collect();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            // step decay for the final epochs
            opt.lr = if epoch * 4 >= cfg.epochs * 3 { cfg.lr * 0.2 } else { cfg.lr };
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch.max(1)) {
                let mut grad = vec![0.0; self.params.len()];
                for &i in batch {
                    let img = scenes[i].image.as_tensor();
                    let (loss, g) = match &cfg.adversarial {
                        Some(pgd) => {
                            let adv = self.pgd(img, &targets[i], cfg, pgd.epsilon, pgd.steps, &mut rng);
                            self.sample_grad(&adv, &targets[i], cfg)
                        }
                        None => self.sample_grad(img, &targets[i], cfg),
                    };
                    total += loss;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b / batch.len() as f64;
                    }
                }
                opt.step(&mut self.params, &grad);
            }
            history.push(total / scenes.len() as f64);
        }
        history
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(ARCH_TAG.as_bytes())?;
            f.write_all(&(self.params.len() as u64).to_le_bytes())?;
            for p in &self.params {
                f.write_all(&p.to_le_bytes())?;
            }
            f.flush()?;
        }
        std::fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut tag = vec![0u8; ARCH_TAG.len()];
        f.read_exact(&mut tag)?;
        if tag != ARCH_TAG.as_bytes() {
            return Err(bad("unknown weights format"));
        }
        let mut n = [0u8; 8];
        f.read_exact(&mut n)?;
        let mut net = Self::new(0);
        if u64::from_le_bytes(n) as usize != net.params.len() {
            return Err(bad("parameter count mismatch"));
        }
        let mut b = [0u8; 8];
        for p in &mut net.params {
            f.read_exact(&mut b)?;
            *p = f64::from_le_bytes(b);
        }
        Ok(net)
    }
}

/// PGD settings for adversarial training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdTrainConfig {
    pub epsilon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub world: WorldConfig,
    pub scenes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub pos_weight: f64,
    pub reg_weight: f64,
    #[serde(default)]
    pub adversarial: Option<PgdTrainConfig>,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            scenes: 1500,
            epochs: 8,
            batch: 16,
            lr: 3e-3,
            seed: 7,
            pos_weight: 8.0,
            reg_weight: 1.0,
            adversarial: None,
        }
    }
}

impl ToyTrainConfig {
    /// Stable key for caching trained weights.
    pub fn cache_key(&self, init: Option<&str>) -> String {
        let mut h = Sha256::new();
        h.update(ARCH_TAG.as_bytes());
        h.update(serde_json::to_vec(self).expect("config serializes"));
        if let Some(i) = init {
            h.update(i.as_bytes());
        }
        format!("{:x}", h.finalize())[..20].to_string()
    }
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("toynet-{key}.bin"))
}

/// Trains a fresh network, reusing cached weights when available.
pub fn train_toy(cfg: &ToyTrainConfig, cache: Option<&Path>) -> ToyNet {
    train_from(cfg, None, cache)
}

/// Fine-tunes `init` (or trains from scratch) under `cfg`, with caching.
pub fn train_from(cfg: &ToyTrainConfig, init: Option<&ToyNet>, cache: Option<&Path>) -> ToyNet {
    let key = cfg.cache_key(init.map(|n| n.weights_hash()).as_deref());
    if let Some(dir) = cache {
        if let Ok(net) = ToyNet::load(&cache_path(dir, &key)) {
            return net;
        }
    }
    let scenes = generate_scenes(&cfg.world, cfg.scenes, cfg.seed, "train");
    let mut net = init.cloned().unwrap_or_else(|| ToyNet::new(cfg.seed));
    net.train(cfg, &scenes);
    if let Some(dir) = cache {
        // a failed cache write only costs a retrain next time
        let _ = net.save(&cache_path(dir, &key));
    }
    net
}

/// Detection helper used by tests: objectness grid of an image.
pub fn objectness_map(net: &ToyNet, image: &ImagePlane) -> Vec<f64> {
    let fwd = net.forward(net.normalize(image.as_tensor()), None, None);
    fwd.head.data().chunks_exact(HEAD_CHANNELS).map(|v| sigmoid(v[0])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::new(64, 64, 3, (0..64 * 64 * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn output_grid_is_eight_by_eight() {
        let net = ToyNet::new(1);
        let f = net.forward(net.normalize(&image(0)), None, None);
        assert_eq!((f.head.height(), f.head.width(), f.head.channels()), (8, 8, 5));
        assert_eq!(net.stride(), 8);
    }

    #[test]
    fn param_gradient_matches_finite_difference() {
        let net = ToyNet::new(3);
        let cfg = ToyTrainConfig::default();
        let img = image(1);
        let targets = net.targets(&[BoundingBox::new(20.0, 10.0, 36.0, 50.0).unwrap()]);
        let (_, g) = net.sample_grad(&img, &targets, &cfg);
        let loss = |n: &ToyNet| {
            let f = n.forward(n.normalize(&img), None, None);
            n.detection_loss(&f.head, &targets, &cfg).0
        };
        let mut checked = 0;
        for &i in &[5usize, 300, 2000, 9000, 20000, net.params.len() - 3] {
            let h = 1e-5;
            let mut p = net.clone();
            let mut m = net.clone();
            p.params[i] += h;
            m.params[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            if fd.abs() < 1e-9 && g[i].abs() < 1e-9 {
                continue;
            }
            assert!((fd - g[i]).abs() <= 1e-4 * (fd.abs() + 1e-6).max(1e-3), "param {i}: fd {fd} vs {}", g[i]);
            checked += 1;
        }
        assert!(checked >= 3);
    }

    #[test]
    fn save_load_round_trip() {
        let net = ToyNet::new(9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        net.save(&p).unwrap();
        let back = ToyNet::load(&p).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.weights_hash(), net.weights_hash());
    }

    #[test]
    fn pgd_with_zero_epsilon_is_identity() {
        let net = ToyNet::new(2);
        let img = image(4);
        let t = net.targets(&[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(net.pgd(&img, &t, &ToyTrainConfig::default(), 0.0, 3, &mut rng), img);
    }

    #[test]
    fn pgd_stays_in_the_ball() {
        let net = ToyNet::new(2);
        let img = image(4);
        let t = net.targets(&[BoundingBox::new(20.0, 10.0, 36.0, 50.0).unwrap()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = 4.0 / 255.0;
        let adv = net.pgd(&img, &t, &ToyTrainConfig::default(), eps, 3, &mut rng);
        assert!(adv.max_abs_diff(&img) <= eps + 1e-12);
    }
}
