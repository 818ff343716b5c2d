//! Fixed-configuration U-Net segmenter: foreground-oversampled patch
//! training, sliding-window inference with 50% overlap and uniform window
//! weighting, and a softmax-averaging ensemble across checkpoints.

mod loss;
mod unet;

pub use loss::dice_ce_loss;
pub use unet::{UNet2d, UNet3d};

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::nn::{Adam, Param};
use crate::rng::SeedStream;
use crate::volume::{LabelMask, Volume};
use ndarray::{s, Array3, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    TwoD,
    ThreeD,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegConfig {
    pub mode: SegMode,
    pub base_width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Patch extent (z, y, x); `z` must be 1 in 2D mode.
    pub patch_size: [usize; 3],
    pub seed: u64,
    pub n_classes: usize,
    /// Patch draws per training case per epoch.
    pub iters_per_case: usize,
}

impl SegConfig {
    pub fn default_2d() -> Self {
        SegConfig {
            mode: SegMode::TwoD,
            base_width: 8,
            depth: 2,
            epochs: 10,
            lr: 1e-3,
            patch_size: [1, 48, 48],
            seed: 0,
            n_classes: 3,
            iters_per_case: 8,
        }
    }

    pub fn default_3d() -> Self {
        SegConfig {
            mode: SegMode::ThreeD,
            base_width: 6,
            depth: 2,
            epochs: 10,
            lr: 1e-3,
            patch_size: [16, 16, 16],
            seed: 0,
            n_classes: 3,
            iters_per_case: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0
            || self.depth == 0
            || !(self.lr > 0.0)
            || self.n_classes < 2
            || self.iters_per_case == 0
        {
            return Err(Error::ConfigInvalid(format!("{self:?}")));
        }
        let stride = 1usize << self.depth;
        let [pz, py, px] = self.patch_size;
        let ok = match self.mode {
            SegMode::TwoD => pz == 1 && py % stride == 0 && px % stride == 0 && py > 0 && px > 0,
            SegMode::ThreeD => {
                pz % stride == 0 && py % stride == 0 && px % stride == 0 && pz > 0
            }
        };
        if !ok {
            return Err(Error::ConfigInvalid(format!(
                "patch {:?} incompatible with mode {:?} at depth {}",
                self.patch_size, self.mode, self.depth
            )));
        }
        Ok(())
    }

    fn kind(&self) -> &'static str {
        match self.mode {
            SegMode::TwoD => "seg2d",
            SegMode::ThreeD => "seg3d",
        }
    }
}

enum Net {
    Two(UNet2d),
    Three(UNet3d),
}

impl Net {
    fn build(cfg: &SegConfig, rng: &mut SeedStream) -> Net {
        match cfg.mode {
            SegMode::TwoD => Net::Two(UNet2d::new(
                "unet",
                1,
                cfg.n_classes,
                cfg.base_width,
                cfg.depth,
                rng,
            )),
            SegMode::ThreeD => Net::Three(UNet3d::new(
                "unet",
                1,
                cfg.n_classes,
                cfg.base_width,
                cfg.depth,
                rng,
            )),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Net::Two(n) => n.params_mut(),
            Net::Three(n) => n.params_mut(),
        }
    }
}

/// Foreground-oversampling patch origins: every other draw is centred on a
/// random foreground voxel (when the case has any), the rest are uniform.
pub(crate) struct PatchSampler {
    pub patch: [usize; 3],
}

impl PatchSampler {
    /// `fg`: flattened foreground voxel coordinates for the chosen case.
    pub(crate) fn origin(
        &self,
        rng: &mut SeedStream,
        dims: [usize; 3],
        fg: &[[usize; 3]],
        force_fg: bool,
    ) -> [usize; 3] {
        let clamp = |center: usize, patch: usize, dim: usize| -> usize {
            let half = patch / 2;
            center.saturating_sub(half).min(dim - patch)
        };
        if force_fg && !fg.is_empty() {
            let v = fg[rng.below(fg.len())];
            [
                clamp(v[0], self.patch[0], dims[0]),
                clamp(v[1], self.patch[1], dims[1]),
                clamp(v[2], self.patch[2], dims[2]),
            ]
        } else {
            [
                rng.below(dims[0] - self.patch[0] + 1),
                rng.below(dims[1] - self.patch[1] + 1),
                rng.below(dims[2] - self.patch[2] + 1),
            ]
        }
    }
}

struct PreparedCase {
    data: Array3<f64>,
    labels: Array3<u8>,
    fg: Vec<[usize; 3]>,
}

fn prepare_cases(cases: &[(Volume, LabelMask)], cfg: &SegConfig) -> Result<Vec<PreparedCase>> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset("segmenter training cases".into()));
    }
    let mut out = Vec::with_capacity(cases.len());
    for (i, (vol, mask)) in cases.iter().enumerate() {
        if vol.shape() != mask.shape() {
            return Err(Error::ShapeMismatch(format!(
                "case {i}: volume {:?} vs mask {:?}",
                vol.shape(),
                mask.shape()
            )));
        }
        let dims = vol.shape();
        for a in 0..3 {
            if cfg.patch_size[a] > dims[a] {
                return Err(Error::ShapeMismatch(format!(
                    "case {i}: patch {:?} exceeds volume {:?}",
                    cfg.patch_size, dims
                )));
            }
        }
        let mut fg = Vec::new();
        for ((z, y, x), &l) in mask.data.indexed_iter() {
            if l > 0 {
                fg.push([z, y, x]);
            }
        }
        out.push(PreparedCase {
            data: vol.data.mapv(|v| v as f64),
            labels: mask.data.clone(),
            fg,
        });
    }
    Ok(out)
}

struct SegTrainer {
    cfg: SegConfig,
    net: Net,
    opt: Adam,
    rng: SeedStream,
    epoch: usize,
    loss_history: Vec<BTreeMap<String, f64>>,
}

impl SegTrainer {
    fn new(cfg: &SegConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = SeedStream::derived(cfg.seed, "seg/init");
        Ok(SegTrainer {
            cfg: cfg.clone(),
            net: Net::build(cfg, &mut init),
            // nnUNet-style betas rather than the GAN (0.5, 0.999).
            opt: Adam::with_betas(cfg.lr, 0.9, 0.999),
            rng: SeedStream::derived(cfg.seed, "seg/train"),
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    fn to_checkpoint(&mut self) -> Checkpoint {
        debug_assert!(self.rng.is_word_aligned());
        let mut ck = Checkpoint::new(
            self.cfg.kind(),
            serde_json::to_value(&self.cfg).expect("config serializes"),
            RngState::from_parts(self.rng.seed(), self.rng.word_pos()),
        );
        ck.manifest.epoch = self.epoch;
        ck.manifest.loss_history = self.loss_history.clone();
        for p in self.net.params_mut() {
            ck.put_array(&p.name, &p.w);
        }
        for (name, (m, v)) in &self.opt.slots {
            ck.put_array(&format!("adam.{name}.m"), m);
            ck.put_array(&format!("adam.{name}.v"), v);
        }
        ck.manifest
            .extra
            .insert("adam.t".to_string(), serde_json::json!(self.opt.t));
        ck
    }

    fn quantize(&mut self) {
        for p in self.net.params_mut() {
            p.quantize_f32();
        }
        self.opt.quantize_f32();
    }

    fn step(&mut self, x: &Array4<f64>, labels: &ArrayD<u8>) -> Result<f64> {
        let lv = match &mut self.net {
            Net::Two(net) => {
                let (_, pz, py, px) = x.dim();
                debug_assert_eq!(pz, 1);
                let x2 = x.view().into_shape_with_order((1, py, px)).unwrap().to_owned();
                let (logits, cache) = net.forward(&x2);
                let lv = dice_ce_loss(&logits.clone().into_dyn(), labels)?;
                for p in net.params_mut() {
                    p.zero_grad();
                }
                net.backward(
                    &cache,
                    &lv.grads["logits"].clone().into_dimensionality().unwrap(),
                );
                lv
            }
            Net::Three(net) => {
                let (logits, cache) = net.forward(x);
                let lv = dice_ce_loss(&logits.clone().into_dyn(), labels)?;
                for p in net.params_mut() {
                    p.zero_grad();
                }
                net.backward(
                    &cache,
                    &lv.grads["logits"].clone().into_dimensionality().unwrap(),
                );
                lv
            }
        };
        let mut params = self.net.params_mut();
        self.opt.step(&mut params, 1.0);
        Ok(lv.value)
    }

    fn train(&mut self, cases: &[PreparedCase]) -> Result<()> {
        let sampler = PatchSampler {
            patch: self.cfg.patch_size,
        };
        let mut last_finite = self.to_checkpoint();
        let iters = (cases.len() * self.cfg.iters_per_case).max(1);
        while self.epoch < self.cfg.epochs {
            let mut sum = 0.0;
            let mut diverged = false;
            for it in 0..iters {
                let case = &cases[self.rng.below(cases.len())];
                let dims = [
                    case.data.dim().0,
                    case.data.dim().1,
                    case.data.dim().2,
                ];
                let origin =
                    sampler.origin(&mut self.rng, dims, &case.fg, it % 2 == 0);
                let [pz, py, px] = self.cfg.patch_size;
                let [oz, oy, ox] = origin;
                let patch = case
                    .data
                    .slice(s![oz..oz + pz, oy..oy + py, ox..ox + px])
                    .to_owned();
                let x = patch.into_shape_with_order((1, pz, py, px)).unwrap();
                let labels: ArrayD<u8> = match self.cfg.mode {
                    SegMode::TwoD => case
                        .labels
                        .slice(s![oz, oy..oy + py, ox..ox + px])
                        .to_owned()
                        .into_dyn(),
                    SegMode::ThreeD => case
                        .labels
                        .slice(s![oz..oz + pz, oy..oy + py, ox..ox + px])
                        .to_owned()
                        .into_dyn(),
                };
                match self.step(&x, &labels) {
                    Ok(v) => sum += v,
                    Err(Error::NonFiniteInput(_)) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let mean = sum / iters as f64;
            let mut map = BTreeMap::new();
            map.insert("dice_ce".to_string(), mean);
            self.loss_history.push(map);
            self.epoch += 1;
            if diverged || !mean.is_finite() {
                return Err(Error::DivergenceDetected {
                    epoch: self.epoch - 1,
                    last_finite: Box::new(last_finite),
                });
            }
            self.quantize();
            last_finite = self.to_checkpoint();
        }
        Ok(())
    }
}

/// Train a segmenter on (pseudo-)target volumes with labels.
pub fn train_segmenter(cases: &[(Volume, LabelMask)], cfg: &SegConfig) -> Result<Checkpoint> {
    let prepared = prepare_cases(cases, cfg)?;
    let mut t = SegTrainer::new(cfg)?;
    t.train(&prepared)?;
    Ok(t.to_checkpoint())
}

fn net_from_checkpoint(ck: &Checkpoint) -> Result<(Net, SegConfig)> {
    if ck.manifest.kind != "seg2d" && ck.manifest.kind != "seg3d" {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected a segmenter checkpoint, got {:?}",
            ck.manifest.kind
        )));
    }
    let cfg: SegConfig = serde_json::from_value(ck.manifest.config_json.clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("config: {e}")))?;
    let mut init = SeedStream::new(0);
    let mut net = Net::build(&cfg, &mut init);
    for p in net.params_mut() {
        let arr = ck.get_array(&p.name)?;
        if arr.shape() != p.w.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "array {:?}: shape {:?} vs {:?}",
                p.name,
                arr.shape(),
                p.w.shape()
            )));
        }
        p.w = arr;
    }
    Ok((net, cfg))
}

fn softmax_channels(logits: &Array4<f64>) -> Array4<f64> {
    let (c, d, h, w) = logits.dim();
    let mut out = Array4::zeros((c, d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(logits[[k, z, y, x]]);
                }
                let mut s = 0.0;
                for k in 0..c {
                    let e = (logits[[k, z, y, x]] - m).exp();
                    out[[k, z, y, x]] = e;
                    s += e;
                }
                for k in 0..c {
                    out[[k, z, y, x]] /= s;
                }
            }
        }
    }
    out
}

/// Window start offsets covering `dim` with 50% overlap; the final window is
/// clamped so it always fits.
fn window_starts(dim: usize, window: usize) -> Vec<usize> {
    if window >= dim {
        return vec![0];
    }
    let step = (window / 2).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + window >= dim {
            starts.push(dim - window);
            break;
        }
        starts.push(s);
        s += step;
    }
    starts.dedup();
    starts
}

/// Mean softmax field over sliding windows, `(classes, z, y, x)`, computed
/// in a fixed window order so stitching is deterministic.
pub fn predict_softmax(ck: &Checkpoint, vol: &Volume) -> Result<Array4<f64>> {
    let (net, cfg) = net_from_checkpoint(ck)?;
    let [nz, ny, nx] = vol.shape();
    let [pz, py, px] = cfg.patch_size;
    // Zero-pad up to the window extent (0 is the normalized background).
    let (dz, dy, dx) = (nz.max(pz), ny.max(py), nx.max(px));
    let mut data = Array3::<f64>::zeros((dz, dy, dx));
    for ((z, y, x), &v) in vol.data.indexed_iter() {
        data[[z, y, x]] = v as f64;
    }
    let c = cfg.n_classes;
    let mut sums = Array4::<f64>::zeros((c, dz, dy, dx));
    let mut counts = Array3::<f64>::zeros((dz, dy, dx));
    for &oz in &window_starts(dz, pz) {
        for &oy in &window_starts(dy, py) {
            for &ox in &window_starts(dx, px) {
                let patch = data
                    .slice(s![oz..oz + pz, oy..oy + py, ox..ox + px])
                    .to_owned();
                let logits: Array4<f64> = match &net {
                    Net::Two(n) => {
                        let x2 = patch.into_shape_with_order((1, py, px)).unwrap();
                        let (l, _) = n.forward(&x2);
                        let (cc, hh, ww) = l.dim();
                        l.into_shape_with_order((cc, 1, hh, ww)).unwrap()
                    }
                    Net::Three(n) => {
                        let x3 = patch.into_shape_with_order((1, pz, py, px)).unwrap();
                        n.forward(&x3).0
                    }
                };
                let soft = softmax_channels(&logits);
                for k in 0..c {
                    let mut dst =
                        sums.slice_mut(s![k, oz..oz + pz, oy..oy + py, ox..ox + px]);
                    dst += &soft.slice(s![k, .., .., ..]);
                }
                let mut cnt = counts.slice_mut(s![oz..oz + pz, oy..oy + py, ox..ox + px]);
                cnt += 1.0;
            }
        }
    }
    for k in 0..c {
        let mut plane = sums.slice_mut(s![k, .., .., ..]);
        plane.zip_mut_with(&counts, |p, &n| *p /= n);
    }
    Ok(sums.slice(s![.., ..nz, ..ny, ..nx]).to_owned())
}

/// Argmax with ties broken toward the lower label, plus max-softmax
/// confidence.
pub(crate) fn argmax_with_confidence(soft: &Array4<f64>) -> (Array3<u8>, Array3<f32>) {
    let (c, d, h, w) = soft.dim();
    let mut mask = Array3::<u8>::zeros((d, h, w));
    let mut conf = Array3::<f32>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_p = soft[[0, z, y, x]];
                for k in 1..c {
                    let p = soft[[k, z, y, x]];
                    if p > best_p {
                        best_p = p;
                        best = k;
                    }
                }
                mask[[z, y, x]] = best as u8;
                conf[[z, y, x]] = best_p as f32;
            }
        }
    }
    (mask, conf)
}

/// Sliding-window prediction: label mask plus per-voxel confidence.
pub fn predict(ck: &Checkpoint, vol: &Volume) -> Result<(LabelMask, Array3<f32>)> {
    let soft = predict_softmax(ck, vol)?;
    let (mask, conf) = argmax_with_confidence(&soft);
    Ok((LabelMask::new(mask, vol.spacing)?, conf))
}

/// Average the members' softmax fields, then argmax (ties toward the lower
/// label index).
pub fn ensemble_predict(cks: &[&Checkpoint], vol: &Volume) -> Result<LabelMask> {
    if cks.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut acc = predict_softmax(cks[0], vol)?;
    for ck in &cks[1..] {
        let soft = predict_softmax(ck, vol)?;
        if soft.dim() != acc.dim() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "ensemble member field {:?} vs {:?}",
                soft.dim(),
                acc.dim()
            )));
        }
        acc += &soft;
    }
    acc /= cks.len() as f64;
    let (mask, _) = argmax_with_confidence(&acc);
    LabelMask::new(mask, vol.spacing)
}
