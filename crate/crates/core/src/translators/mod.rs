//! The two unpaired slice translators behind a common harness: a
//! cycle-consistency trainer (two generators, two discriminators, image
//! history pools) and a query-selected contrastive trainer (one generator,
//! one discriminator, attention-routed patch NCE). Both are deterministic
//! given the config seed, checkpoint at epoch granularity, and resume
//! bit-compatibly on the same platform.

mod nets;

pub use nets::{NetKind, NetSpec, PatchDiscriminator, ResnetGenerator};

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::losses::{adversarial_loss, cycle_loss};
use crate::nn::{Adam, Param};
use crate::qsattn::{nce_loss_with_grads, FeatureMap};
use crate::rng::{derive_seed, SeedStream};
use crate::volume::{merge_slices, slice_axial, Volume};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SToT,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_cycle: f64,
    pub lambda_nce: f64,
    pub tau: f64,
    pub image_pool_size: usize,
    pub seed: u64,
    pub image_size: usize,
    /// CUT-style identity NCE term on target images (QS-Attn trainer).
    pub identity_nce: bool,
    /// Identity-mapping L1 term (cycle trainer), off by default.
    pub identity_loss: bool,
    /// Negatives per patch set; clamped to k-1 per layer.
    pub n_neg: usize,
    /// Fraction of positions kept as queries (k = HW * query_frac).
    pub query_frac: f64,
    pub gen: NetSpec,
    pub dis: NetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 1,
            lr: 2e-4,
            lambda_cycle: 10.0,
            lambda_nce: 1.0,
            tau: 0.07,
            image_pool_size: 50,
            seed: 0,
            image_size: 48,
            identity_nce: true,
            identity_loss: false,
            n_neg: 63,
            query_frac: 0.25,
            gen: NetSpec::generator(16, 2, 2),
            dis: NetSpec::discriminator(16),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || !(self.lr > 0.0)
            || !(self.tau > 0.0)
            || self.image_size < 4
            || !(self.query_frac > 0.0 && self.query_frac <= 1.0)
        {
            return Err(Error::ConfigInvalid(format!("{self:?}")));
        }
        let stride = 1usize << self.gen.n_down;
        if self.image_size % stride != 0 {
            return Err(Error::ConfigInvalid(format!(
                "image_size {} must be divisible by 2^n_down = {stride}",
                self.image_size
            )));
        }
        self.gen.validate()?;
        self.dis.validate()
    }
}

/// CycleGAN-style history buffer for discriminator inputs.
pub struct ImagePool {
    capacity: usize,
    store: Vec<Array2<f64>>,
    rng: SeedStream,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ImagePool {
            capacity,
            store: Vec::new(),
            rng: SeedStream::new(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

/// Push an image into the pool. While filling, the image is stored and
/// returned as-is. Afterwards, with probability 0.5 the input is returned
/// untouched; otherwise it swaps places with a uniformly drawn stored image
/// and the old image is returned.
pub fn image_pool_push(pool: &mut ImagePool, img: &Array2<f64>) -> Array2<f64> {
    if pool.capacity == 0 {
        return img.clone();
    }
    if pool.store.len() < pool.capacity {
        pool.store.push(img.clone());
        return img.clone();
    }
    if pool.rng.uniform() < 0.5 {
        img.clone()
    } else {
        let idx = pool.rng.below(pool.capacity);
        let out = pool.store[idx].clone();
        pool.store[idx] = img.clone();
        out
    }
}

fn lr_scale(epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let half = total / 2;
    if epoch < half {
        1.0
    } else {
        ((total.saturating_sub(epoch)) as f64 / (total - half) as f64).max(0.0)
    }
}

fn check_dataset(slices: &[Array2<f64>], cfg: &TrainConfig, name: &str) -> Result<()> {
    if slices.is_empty() {
        return Err(Error::EmptyDataset(name.into()));
    }
    for (i, s) in slices.iter().enumerate() {
        if s.dim() != (cfg.image_size, cfg.image_size) {
            return Err(Error::ShapeMismatch(format!(
                "{name}[{i}] is {:?}, expected {}x{}",
                s.dim(),
                cfg.image_size,
                cfg.image_size
            )));
        }
    }
    Ok(())
}

fn with_channel(img: &Array2<f64>) -> Array3<f64> {
    let (h, w) = img.dim();
    img.clone().into_shape_with_order((1, h, w)).unwrap()
}

fn drop_channel(img: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = img.dim();
    img.clone().into_shape_with_order((h, w)).unwrap()
}

/// Mean-L1 with gradient w.r.t. the first argument (identity term).
fn l1_mean_grad(a: &Array3<f64>, b: &Array3<f64>) -> (f64, Array3<f64>) {
    let n = a.len() as f64;
    let mut grad = Array3::zeros(a.dim());
    let mut total = 0.0;
    ndarray::Zip::from(&mut grad).and(a).and(b).for_each(|g, &x, &y| {
        let d = x - y;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    });
    (total / n, grad)
}

fn store_params(ck: &mut Checkpoint, params: Vec<&mut Param>) {
    for p in params {
        ck.put_array(&p.name, &p.w);
    }
}

fn store_adam(ck: &mut Checkpoint, tag: &str, opt: &Adam) {
    for (name, (m, v)) in &opt.slots {
        ck.put_array(&format!("{tag}.{name}.m"), m);
        ck.put_array(&format!("{tag}.{name}.v"), v);
    }
    ck.manifest
        .extra
        .insert(format!("{tag}.t"), serde_json::json!(opt.t));
}

fn load_params(ck: &Checkpoint, params: Vec<&mut Param>) -> Result<()> {
    for p in params {
        let arr = ck.get_array(&p.name)?;
        if arr.shape() != p.w.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "array {:?} has shape {:?}, net expects {:?}",
                p.name,
                arr.shape(),
                p.w.shape()
            )));
        }
        p.w = arr;
        p.zero_grad();
    }
    Ok(())
}

fn load_adam(ck: &Checkpoint, tag: &str, opt: &mut Adam, param_names: &[String]) -> Result<()> {
    opt.t = ck
        .manifest
        .extra
        .get(&format!("{tag}.t"))
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    opt.slots.clear();
    for name in param_names {
        let m_name = format!("{tag}.{name}.m");
        if ck.has_array(&m_name) {
            let m = ck.get_array(&m_name)?;
            let v = ck.get_array(&format!("{tag}.{name}.v"))?;
            opt.slots.insert(name.clone(), (m, v));
        }
    }
    Ok(())
}

fn store_pool(ck: &mut Checkpoint, tag: &str, pool: &ImagePool) {
    for (i, img) in pool.store.iter().enumerate() {
        ck.put_array(&format!("{tag}.{i}"), &img.clone().into_dyn());
    }
    ck.manifest
        .extra
        .insert(format!("{tag}.len"), serde_json::json!(pool.store.len()));
    let pos = pool.rng.word_pos();
    ck.manifest.extra.insert(
        format!("{tag}.rng_lo"),
        serde_json::json!(pos as u64),
    );
    ck.manifest.extra.insert(
        format!("{tag}.rng_hi"),
        serde_json::json!((pos >> 64) as u64),
    );
}

fn load_pool(ck: &Checkpoint, tag: &str, capacity: usize, seed: u64) -> Result<ImagePool> {
    let len = ck
        .manifest
        .extra
        .get(&format!("{tag}.len"))
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as usize;
    let mut store = Vec::with_capacity(len);
    for i in 0..len {
        let arr = ck.get_array(&format!("{tag}.{i}"))?;
        store.push(arr.into_dimensionality().map_err(|e| {
            Error::IncompatibleCheckpoint(format!("pool image {i}: {e}"))
        })?);
    }
    let lo = ck
        .manifest
        .extra
        .get(&format!("{tag}.rng_lo"))
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    let hi = ck
        .manifest
        .extra
        .get(&format!("{tag}.rng_hi"))
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    let pos = (hi as u128) << 64 | lo as u128;
    let mut pool = ImagePool::new(capacity, seed);
    pool.rng = SeedStream::restore(seed, pos);
    pool.store = store;
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Cycle-consistency trainer
// ---------------------------------------------------------------------------

pub struct CycleGanTrainer {
    pub cfg: TrainConfig,
    g_s2t: ResnetGenerator,
    g_t2s: ResnetGenerator,
    d_t: PatchDiscriminator,
    d_s: PatchDiscriminator,
    opt_g: Adam,
    opt_d: Adam,
    pool_t: ImagePool,
    pool_s: ImagePool,
    rng: SeedStream,
    epoch: usize,
    loss_history: Vec<BTreeMap<String, f64>>,
}

impl CycleGanTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = SeedStream::derived(cfg.seed, "cyclegan/init");
        Ok(CycleGanTrainer {
            cfg: cfg.clone(),
            g_s2t: ResnetGenerator::new("g_s2t", &cfg.gen, &mut init)?,
            g_t2s: ResnetGenerator::new("g_t2s", &cfg.gen, &mut init)?,
            d_t: PatchDiscriminator::new("d_t", &cfg.dis, &mut init)?,
            d_s: PatchDiscriminator::new("d_s", &cfg.dis, &mut init)?,
            opt_g: Adam::new(cfg.lr),
            opt_d: Adam::new(cfg.lr),
            pool_t: ImagePool::new(cfg.image_pool_size, derive_seed(cfg.seed, "cyclegan/pool_t")),
            pool_s: ImagePool::new(cfg.image_pool_size, derive_seed(cfg.seed, "cyclegan/pool_s")),
            rng: SeedStream::derived(cfg.seed, "cyclegan/train"),
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != "cyclegan" {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a cyclegan checkpoint, got {:?}",
                ck.manifest.kind
            )));
        }
        let cfg: TrainConfig = serde_json::from_value(ck.manifest.config_json.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("config: {e}")))?;
        let mut t = CycleGanTrainer::new(&cfg)?;
        load_params(ck, t.g_s2t.params_mut())?;
        load_params(ck, t.g_t2s.params_mut())?;
        load_params(ck, t.d_t.params_mut())?;
        load_params(ck, t.d_s.params_mut())?;
        let g_names: Vec<String> = t
            .g_s2t
            .params_mut()
            .iter()
            .chain(t.g_t2s.params_mut().iter())
            .map(|p| p.name.clone())
            .collect();
        let d_names: Vec<String> = t
            .d_t
            .params_mut()
            .iter()
            .chain(t.d_s.params_mut().iter())
            .map(|p| p.name.clone())
            .collect();
        load_adam(ck, "adam_g", &mut t.opt_g, &g_names)?;
        load_adam(ck, "adam_d", &mut t.opt_d, &d_names)?;
        t.pool_t = load_pool(
            ck,
            "pool_t",
            cfg.image_pool_size,
            derive_seed(cfg.seed, "cyclegan/pool_t"),
        )?;
        t.pool_s = load_pool(
            ck,
            "pool_s",
            cfg.image_pool_size,
            derive_seed(cfg.seed, "cyclegan/pool_s"),
        )?;
        t.rng = SeedStream::restore(ck.manifest.rng.seed, ck.manifest.rng.word_pos());
        t.epoch = ck.manifest.epoch;
        t.loss_history = ck.manifest.loss_history.clone();
        Ok(t)
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        debug_assert!(self.rng.is_word_aligned());
        let mut ck = Checkpoint::new(
            "cyclegan",
            serde_json::to_value(&self.cfg).expect("config serializes"),
            RngState::from_parts(self.rng.seed(), self.rng.word_pos()),
        );
        ck.manifest.epoch = self.epoch;
        ck.manifest.loss_history = self.loss_history.clone();
        store_params(&mut ck, self.g_s2t.params_mut());
        store_params(&mut ck, self.g_t2s.params_mut());
        store_params(&mut ck, self.d_t.params_mut());
        store_params(&mut ck, self.d_s.params_mut());
        store_adam(&mut ck, "adam_g", &self.opt_g);
        store_adam(&mut ck, "adam_d", &self.opt_d);
        store_pool(&mut ck, "pool_t", &self.pool_t);
        store_pool(&mut ck, "pool_s", &self.pool_s);
        ck
    }

    fn quantize(&mut self) {
        for p in self.g_s2t.params_mut() {
            p.quantize_f32();
        }
        for p in self.g_t2s.params_mut() {
            p.quantize_f32();
        }
        for p in self.d_t.params_mut() {
            p.quantize_f32();
        }
        for p in self.d_s.params_mut() {
            p.quantize_f32();
        }
        self.opt_g.quantize_f32();
        self.opt_d.quantize_f32();
        // Pool contents cross the f32 checkpoint boundary too.
        for img in self.pool_t.store.iter_mut().chain(self.pool_s.store.iter_mut()) {
            img.mapv_inplace(|v| v as f32 as f64);
        }
    }

    fn zero_g(&mut self) {
        for p in self.g_s2t.params_mut() {
            p.zero_grad();
        }
        for p in self.g_t2s.params_mut() {
            p.zero_grad();
        }
    }

    fn zero_d(&mut self) {
        for p in self.d_t.params_mut() {
            p.zero_grad();
        }
        for p in self.d_s.params_mut() {
            p.zero_grad();
        }
    }

    /// Run training until `target_epochs` epochs are complete.
    pub fn train_until(
        &mut self,
        slices_s: &[Array2<f64>],
        slices_t: &[Array2<f64>],
        target_epochs: usize,
    ) -> Result<()> {
        check_dataset(slices_s, &self.cfg, "slices_s")?;
        check_dataset(slices_t, &self.cfg, "slices_t")?;
        let mut last_finite = self.to_checkpoint();
        while self.epoch < target_epochs {
            let scale = lr_scale(self.epoch, self.cfg.epochs.max(target_epochs));
            let sums = match self.run_epoch(slices_s, slices_t, scale) {
                Ok(s) => s,
                // Non-finite activations mid-epoch are a divergence, not a
                // caller error.
                Err(Error::NonFiniteInput(_)) => {
                    return Err(Error::DivergenceDetected {
                        epoch: self.epoch,
                        last_finite: Box::new(last_finite),
                    })
                }
                Err(e) => return Err(e),
            };
            let finite = sums.values().all(|v| v.is_finite());
            self.loss_history.push(sums);
            self.epoch += 1;
            if !finite {
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

    fn run_epoch(
        &mut self,
        slices_s: &[Array2<f64>],
        slices_t: &[Array2<f64>],
        scale: f64,
    ) -> Result<BTreeMap<String, f64>> {
        let n = slices_s.len().max(slices_t.len());
        let mut order_s: Vec<usize> = (0..slices_s.len()).collect();
        let mut order_t: Vec<usize> = (0..slices_t.len()).collect();
        self.rng.shuffle(&mut order_s);
        self.rng.shuffle(&mut order_t);

        let mut sum_cycle = 0.0;
        let mut sum_adv_g = 0.0;
        let mut sum_adv_d = 0.0;
        let mut sum_idt = 0.0;
        let batch = self.cfg.batch_size;
        let inv_b = 1.0 / batch as f64;
        let mut pending = 0usize;
        self.zero_g();

        for i in 0..n {
            let x_s = with_channel(&slices_s[order_s[i % order_s.len()]]);
            let x_t = with_channel(&slices_t[order_t[i % order_t.len()]]);

            // --- generator pass -------------------------------------------------
            let (fake_t, cache_g1) = self.g_s2t.forward(&x_s);
            let (rec_s, cache_f1) = self.g_t2s.forward(&fake_t);
            let (fake_s, cache_f2) = self.g_t2s.forward(&x_t);
            let (rec_t, cache_g2) = self.g_s2t.forward(&fake_s);

            let (dt_out, cache_dt) = self.d_t.forward(&fake_t);
            let adv_t = adversarial_loss(&dt_out.clone().into_dyn(), true)?;
            let (ds_out, cache_ds) = self.d_s.forward(&fake_s);
            let adv_s = adversarial_loss(&ds_out.clone().into_dyn(), true)?;
            let cyc = cycle_loss(
                &x_s.clone().into_dyn(),
                &x_t.clone().into_dyn(),
                &rec_s.clone().into_dyn(),
                &rec_t.clone().into_dyn(),
            )?;
            sum_adv_g += adv_t.value + adv_s.value;
            sum_cycle += cyc.value;

            let lc = self.cfg.lambda_cycle * inv_b;
            let d_rec_s: Array3<f64> = cyc.grads["fg_xs"].mapv(|v| v * lc).into_dimensionality().unwrap();
            let d_rec_t: Array3<f64> = cyc.grads["gf_xt"].mapv(|v| v * lc).into_dimensionality().unwrap();

            // adv grads flow through the (grad-polluted, later re-zeroed) D nets
            let d_fake_t_adv = self.d_t.backward(
                &cache_dt,
                &adv_t.grads["d_out"].mapv(|v| v * inv_b).into_dimensionality().unwrap(),
            );
            let d_fake_s_adv = self.d_s.backward(
                &cache_ds,
                &adv_s.grads["d_out"].mapv(|v| v * inv_b).into_dimensionality().unwrap(),
            );

            // rec_t = G(fake_s): grads into G, then the cycle path into F.
            let d_fake_s_cyc = self.g_s2t.backward(&cache_g2, &d_rec_t, None);
            let d_fake_s_total = d_fake_s_cyc + &d_fake_s_adv;
            self.g_t2s.backward(&cache_f2, &d_fake_s_total, None);

            // rec_s = F(fake_t): grads into F, then into G.
            let d_fake_t_cyc = self.g_t2s.backward(&cache_f1, &d_rec_s, None);
            let d_fake_t_total = d_fake_t_cyc + &d_fake_t_adv;
            self.g_s2t.backward(&cache_g1, &d_fake_t_total, None);

            if self.cfg.identity_loss {
                // G should leave target-domain images untouched (and F source
                // images), weighted at half the cycle weight.
                let w = 0.5 * self.cfg.lambda_cycle * inv_b;
                let (idt_t, cache_it) = self.g_s2t.forward(&x_t);
                let (v1, g1) = l1_mean_grad(&idt_t, &x_t);
                self.g_s2t.backward(&cache_it, &g1.mapv(|v| v * w), None);
                let (idt_s, cache_is) = self.g_t2s.forward(&x_s);
                let (v2, g2) = l1_mean_grad(&idt_s, &x_s);
                self.g_t2s.backward(&cache_is, &g2.mapv(|v| v * w), None);
                sum_idt += v1 + v2;
            }

            pending += 1;
            if pending == batch || i == n - 1 {
                let mut params = self.g_s2t.params_mut();
                params.extend(self.g_t2s.params_mut());
                self.opt_g.step(&mut params, scale);
                self.zero_g();
                pending = 0;
            }

            // --- discriminator pass ---------------------------------------------
            self.zero_d();
            let pooled_t = image_pool_push(&mut self.pool_t, &drop_channel(&fake_t));
            let pooled_s = image_pool_push(&mut self.pool_s, &drop_channel(&fake_s));

            let mut d_loss = 0.0;
            for (dis, real, fake) in [
                (&mut self.d_t, &x_t, with_channel(&pooled_t)),
                (&mut self.d_s, &x_s, with_channel(&pooled_s)),
            ] {
                let (out_r, c_r) = dis.forward(real);
                let lv_r = adversarial_loss(&out_r.into_dyn(), true)?;
                dis.backward(
                    &c_r,
                    &lv_r.grads["d_out"].mapv(|v| 0.5 * v).into_dimensionality().unwrap(),
                );
                let (out_f, c_f) = dis.forward(&fake);
                let lv_f = adversarial_loss(&out_f.into_dyn(), false)?;
                dis.backward(
                    &c_f,
                    &lv_f.grads["d_out"].mapv(|v| 0.5 * v).into_dimensionality().unwrap(),
                );
                d_loss += 0.5 * (lv_r.value + lv_f.value);
            }
            sum_adv_d += d_loss;
            let mut params = self.d_t.params_mut();
            params.extend(self.d_s.params_mut());
            self.opt_d.step(&mut params, scale);
        }

        let nf = n as f64;
        let mut map = BTreeMap::new();
        map.insert("cycle".to_string(), sum_cycle / nf);
        map.insert("adv_g".to_string(), sum_adv_g / nf);
        map.insert("adv_d".to_string(), sum_adv_d / nf);
        if self.cfg.identity_loss {
            map.insert("idt".to_string(), sum_idt / nf);
        }
        Ok(map)
    }
}

/// Train the cycle-consistency translator from scratch.
pub fn train_cyclegan(
    slices_s: &[Array2<f64>],
    slices_t: &[Array2<f64>],
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let mut t = CycleGanTrainer::new(cfg)?;
    t.train_until(slices_s, slices_t, cfg.epochs)?;
    Ok(t.to_checkpoint())
}

/// Continue a checkpointed run until `target_epochs` total epochs.
pub fn resume_cyclegan(
    ck: &Checkpoint,
    slices_s: &[Array2<f64>],
    slices_t: &[Array2<f64>],
    target_epochs: usize,
) -> Result<Checkpoint> {
    let mut t = CycleGanTrainer::from_checkpoint(ck)?;
    t.train_until(slices_s, slices_t, target_epochs)?;
    Ok(t.to_checkpoint())
}

// ---------------------------------------------------------------------------
// Query-selected contrastive trainer
// ---------------------------------------------------------------------------

pub struct QsAttnTrainer {
    pub cfg: TrainConfig,
    g: ResnetGenerator,
    d: PatchDiscriminator,
    opt_g: Adam,
    opt_d: Adam,
    rng: SeedStream,
    epoch: usize,
    loss_history: Vec<BTreeMap<String, f64>>,
}

impl QsAttnTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = SeedStream::derived(cfg.seed, "qsattn/init");
        Ok(QsAttnTrainer {
            cfg: cfg.clone(),
            g: ResnetGenerator::new("g_s2t", &cfg.gen, &mut init)?,
            d: PatchDiscriminator::new("d_t", &cfg.dis, &mut init)?,
            opt_g: Adam::new(cfg.lr),
            opt_d: Adam::new(cfg.lr),
            rng: SeedStream::derived(cfg.seed, "qsattn/train"),
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != "qsattn" {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a qsattn checkpoint, got {:?}",
                ck.manifest.kind
            )));
        }
        let cfg: TrainConfig = serde_json::from_value(ck.manifest.config_json.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("config: {e}")))?;
        let mut t = QsAttnTrainer::new(&cfg)?;
        load_params(ck, t.g.params_mut())?;
        load_params(ck, t.d.params_mut())?;
        let g_names: Vec<String> = t.g.params_mut().iter().map(|p| p.name.clone()).collect();
        let d_names: Vec<String> = t.d.params_mut().iter().map(|p| p.name.clone()).collect();
        load_adam(ck, "adam_g", &mut t.opt_g, &g_names)?;
        load_adam(ck, "adam_d", &mut t.opt_d, &d_names)?;
        t.rng = SeedStream::restore(ck.manifest.rng.seed, ck.manifest.rng.word_pos());
        t.epoch = ck.manifest.epoch;
        t.loss_history = ck.manifest.loss_history.clone();
        Ok(t)
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        debug_assert!(self.rng.is_word_aligned());
        let mut ck = Checkpoint::new(
            "qsattn",
            serde_json::to_value(&self.cfg).expect("config serializes"),
            RngState::from_parts(self.rng.seed(), self.rng.word_pos()),
        );
        ck.manifest.epoch = self.epoch;
        ck.manifest.loss_history = self.loss_history.clone();
        store_params(&mut ck, self.g.params_mut());
        store_params(&mut ck, self.d.params_mut());
        store_adam(&mut ck, "adam_g", &self.opt_g);
        store_adam(&mut ck, "adam_d", &self.opt_d);
        ck
    }

    fn quantize(&mut self) {
        for p in self.g.params_mut() {
            p.quantize_f32();
        }
        for p in self.d.params_mut() {
            p.quantize_f32();
        }
        self.opt_g.quantize_f32();
        self.opt_d.quantize_f32();
    }

    /// One NCE term between already-computed source-side encoder features
    /// and a re-encode of `out_img`. The re-encode backward runs here
    /// (gradients into the encoder params and into `out_img`); the
    /// source-side tap gradients are returned for the caller to inject into
    /// the original generator backward.
    fn nce_term(
        &mut self,
        feats_src: &[Array3<f64>],
        out_img: &Array3<f64>,
        weight: f64,
    ) -> Result<(f64, Array3<f64>, Vec<Array3<f64>>)> {
        let (feats_out, enc_cache) = self.g.encode(out_img);
        let n_layers = feats_src.len();
        let mut value = 0.0;
        let mut d_src: Vec<Array3<f64>> = Vec::with_capacity(n_layers);
        let mut d_out: Vec<Array3<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let f_src = FeatureMap::new(feats_src[l].clone(), l)?;
            let f_out = FeatureMap::new(feats_out[l].clone(), l)?;
            let hw = f_src.hw();
            let k = ((hw as f64 * self.cfg.query_frac).round() as usize).clamp(2, hw);
            let n_neg = self.cfg.n_neg.min(k - 1).max(1);
            let seed = self.rng.next_u64();
            let block = nce_loss_with_grads(&f_src, &f_out, k, self.cfg.tau, n_neg, seed)?;
            let lw = weight / n_layers as f64;
            value += block.value / n_layers as f64;
            d_src.push(block.d_feat_src.mapv(|v| v * lw));
            d_out.push(block.d_feat_trans.mapv(|v| v * lw));
        }
        let d_out_img = self.g.encoder_backward(&enc_cache, &d_out);
        Ok((value, d_out_img, d_src))
    }

    pub fn train_until(
        &mut self,
        slices_s: &[Array2<f64>],
        slices_t: &[Array2<f64>],
        target_epochs: usize,
    ) -> Result<()> {
        check_dataset(slices_s, &self.cfg, "slices_s")?;
        check_dataset(slices_t, &self.cfg, "slices_t")?;
        let mut last_finite = self.to_checkpoint();
        while self.epoch < target_epochs {
            let scale = lr_scale(self.epoch, self.cfg.epochs.max(target_epochs));
            let sums = match self.run_epoch(slices_s, slices_t, scale) {
                Ok(s) => s,
                Err(Error::NonFiniteInput(_)) => {
                    return Err(Error::DivergenceDetected {
                        epoch: self.epoch,
                        last_finite: Box::new(last_finite),
                    })
                }
                Err(e) => return Err(e),
            };
            let finite = sums.values().all(|v| v.is_finite());
            self.loss_history.push(sums);
            self.epoch += 1;
            if !finite {
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

    fn run_epoch(
        &mut self,
        slices_s: &[Array2<f64>],
        slices_t: &[Array2<f64>],
        scale: f64,
    ) -> Result<BTreeMap<String, f64>> {
        let n = slices_s.len().max(slices_t.len());
        let mut order_s: Vec<usize> = (0..slices_s.len()).collect();
        let mut order_t: Vec<usize> = (0..slices_t.len()).collect();
        self.rng.shuffle(&mut order_s);
        self.rng.shuffle(&mut order_t);

        let mut sum_adv_g = 0.0;
        let mut sum_adv_d = 0.0;
        let mut sum_nce = 0.0;
        let mut sum_nce_idt = 0.0;
        let batch = self.cfg.batch_size;
        let inv_b = 1.0 / batch as f64;
        let mut pending = 0usize;
        for p in self.g.params_mut() {
            p.zero_grad();
        }

        // With the identity term on, both NCE terms carry half the weight.
        let nce_w = if self.cfg.identity_nce {
            0.5 * self.cfg.lambda_nce
        } else {
            self.cfg.lambda_nce
        };

        for i in 0..n {
            let x_s = with_channel(&slices_s[order_s[i % order_s.len()]]);
            let x_t = with_channel(&slices_t[order_t[i % order_t.len()]]);

            // --- generator + NCE -------------------------------------------------
            let (fake_t, feats_s, cache_g) = self.g.forward_with_feats(&x_s);
            let (d_out, cache_d) = self.d.forward(&fake_t);
            let adv = adversarial_loss(&d_out.into_dyn(), true)?;
            sum_adv_g += adv.value;
            let d_fake_adv = self.d.backward(
                &cache_d,
                &adv.grads["d_out"].mapv(|v| v * inv_b).into_dimensionality().unwrap(),
            );

            let (nce_value, d_fake_nce, d_taps_s) =
                self.nce_term(&feats_s, &fake_t, nce_w * inv_b)?;
            sum_nce += nce_value;

            let d_fake_total = d_fake_adv + &d_fake_nce;
            self.g.backward(&cache_g, &d_fake_total, Some(&d_taps_s));

            if self.cfg.identity_nce {
                let (idt_out, feats_t, cache_idt) = self.g.forward_with_feats(&x_t);
                let (idt_value, d_idt, d_taps_t) =
                    self.nce_term(&feats_t, &idt_out, nce_w * inv_b)?;
                sum_nce_idt += idt_value;
                self.g.backward(&cache_idt, &d_idt, Some(&d_taps_t));
            }

            pending += 1;
            if pending == batch || i == n - 1 {
                let mut params = self.g.params_mut();
                self.opt_g.step(&mut params, scale);
                for p in params {
                    p.zero_grad();
                }
                pending = 0;
            }

            // --- discriminator ----------------------------------------------------
            for p in self.d.params_mut() {
                p.zero_grad();
            }
            let (out_r, c_r) = self.d.forward(&x_t);
            let lv_r = adversarial_loss(&out_r.into_dyn(), true)?;
            self.d.backward(
                &c_r,
                &lv_r.grads["d_out"].mapv(|v| 0.5 * v).into_dimensionality().unwrap(),
            );
            let (out_f, c_f) = self.d.forward(&fake_t);
            let lv_f = adversarial_loss(&out_f.into_dyn(), false)?;
            self.d.backward(
                &c_f,
                &lv_f.grads["d_out"].mapv(|v| 0.5 * v).into_dimensionality().unwrap(),
            );
            sum_adv_d += 0.5 * (lv_r.value + lv_f.value);
            let mut params = self.d.params_mut();
            self.opt_d.step(&mut params, scale);
        }

        let nf = n as f64;
        let mut map = BTreeMap::new();
        map.insert("adv_g".to_string(), sum_adv_g / nf);
        map.insert("adv_d".to_string(), sum_adv_d / nf);
        map.insert("nce".to_string(), sum_nce / nf);
        if self.cfg.identity_nce {
            map.insert("nce_idt".to_string(), sum_nce_idt / nf);
        }
        Ok(map)
    }
}

/// Train the query-selected contrastive translator from scratch.
pub fn train_qsattn(
    slices_s: &[Array2<f64>],
    slices_t: &[Array2<f64>],
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let mut t = QsAttnTrainer::new(cfg)?;
    t.train_until(slices_s, slices_t, cfg.epochs)?;
    Ok(t.to_checkpoint())
}

pub fn resume_qsattn(
    ck: &Checkpoint,
    slices_s: &[Array2<f64>],
    slices_t: &[Array2<f64>],
    target_epochs: usize,
) -> Result<Checkpoint> {
    let mut t = QsAttnTrainer::from_checkpoint(ck)?;
    t.train_until(slices_s, slices_t, target_epochs)?;
    Ok(t.to_checkpoint())
}

/// Rebuild the S->T generator from a translator checkpoint.
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<(ResnetGenerator, TrainConfig)> {
    if ck.manifest.kind != "cyclegan" && ck.manifest.kind != "qsattn" {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint kind {:?} has no S->T generator",
            ck.manifest.kind
        )));
    }
    let cfg: TrainConfig = serde_json::from_value(ck.manifest.config_json.clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("config: {e}")))?;
    let mut init = SeedStream::new(0);
    let mut g = ResnetGenerator::new("g_s2t", &cfg.gen, &mut init)?;
    load_params(ck, g.params_mut())?;
    Ok((g, cfg))
}

/// Translate a preprocessed volume slice by slice through the checkpointed
/// S->T generator and merge back to the input geometry.
pub fn translate_volume(ck: &Checkpoint, vol: &Volume, _direction: Direction) -> Result<Volume> {
    let (g, cfg) = generator_from_checkpoint(ck)?;
    let slices = slice_axial(vol);
    let mut out_slices = Vec::with_capacity(slices.len());
    for mut s in slices {
        let (h, w) = s.data.dim();
        if h != cfg.image_size || w != cfg.image_size {
            return Err(Error::IncompatibleCheckpoint(format!(
                "volume slice is {h}x{w} but the checkpoint expects {0}x{0}; preprocess first",
                cfg.image_size
            )));
        }
        let x = with_channel(&s.data.mapv(|v| v as f64));
        let (y, _) = g.forward(&x);
        s.data = drop_channel(&y).mapv(|v| v as f32);
        out_slices.push(s);
    }
    merge_slices(&out_slices, &vol.meta())
}

#[cfg(test)]
mod tests;
