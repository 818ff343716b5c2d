//! End-to-end orchestration: phantom generation, preprocessing, the two
//! translators, per-arm self-trained segmentation, evaluation, and report
//! emission. Stages communicate exclusively through files under the output
//! root; every stage's artifacts are content-hashed into an experiment
//! manifest, so interrupted runs resume and completed stages are verified
//! rather than recomputed. Identical configs produce byte-identical
//! manifests and metrics CSVs.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_cases, ResultsTable};
use crate::phantom::{generate_dataset, DatasetManifest, PhantomParams};
use crate::report::{metrics_csv, significance_csv, write_montage_pgm, Comparison, Montage};
use crate::rng::derive_seed;
use crate::segmenter::{ensemble_predict, SegConfig};
use crate::selftrain::self_train;
use crate::translators::{
    train_cyclegan, train_qsattn, translate_volume, Direction, TrainConfig,
};
use crate::volume::{
    center_crop_resize, load_mask, load_volume, normalize_intensity, resample, resample_mask,
    save_mask, save_volume, slice_axial, Interp, LabelMask, Volume,
};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Cyclegan,
    Qsattn,
    Multiview,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Cyclegan => "cyclegan",
            Arm::Qsattn => "qsattn",
            Arm::Multiview => "multiview",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        match s {
            "cyclegan" => Ok(Arm::Cyclegan),
            "qsattn" => Ok(Arm::Qsattn),
            "multiview" => Ok(Arm::Multiview),
            other => Err(Error::ConfigInvalid(format!("unknown arm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataCounts {
    pub n_train_s: usize,
    pub n_train_t: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreprocessCfg {
    pub target_spacing: [f64; 3],
    /// Square centred crop applied per axial slice (clamped to the plane).
    pub crop: usize,
    /// Output side length fed to the networks.
    pub image_size: usize,
    /// Percentile clip + affine map to [-1, 1]; phantoms are already
    /// normalized, so this defaults to off.
    #[serde(default)]
    pub normalize: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegPairCfg {
    pub twod: SegConfig,
    pub threed: SegConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelfTrainCfg {
    pub rounds: usize,
    pub confidence_floor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalCfg {
    pub montage_cases: usize,
}

/// Whole-experiment configuration. The master seed derives every stage's
/// sub-seed (`derive_seed(master, stage_tag)`); nested `seed` fields are
/// overwritten by the pipeline and may be left at 0 in config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub master_seed: u64,
    #[serde(default)]
    pub out_root: Option<PathBuf>,
    pub data: DataCounts,
    pub phantom: PhantomParams,
    pub preprocess: PreprocessCfg,
    pub translation: TrainConfig,
    pub segmentation: SegPairCfg,
    pub self_training: SelfTrainCfg,
    pub eval: EvalCfg,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::IoFailure(format!("{}: {e}", path.as_ref().display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != 1 {
            return Err(Error::ConfigInvalid(format!(
                "unsupported config_version {}",
                self.config_version
            )));
        }
        if self.data.n_val == 0 {
            return Err(Error::ConfigInvalid("need at least one validation case".into()));
        }
        if self.preprocess.image_size != self.translation.image_size {
            return Err(Error::ConfigInvalid(format!(
                "preprocess.image_size {} != translation.image_size {}",
                self.preprocess.image_size, self.translation.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.self_training.confidence_floor) {
            return Err(Error::ConfigInvalid(format!(
                "confidence_floor {}",
                self.self_training.confidence_floor
            )));
        }
        self.translation.validate()?;
        self.segmentation.twod.validate()?;
        self.segmentation.threed.validate()?;
        Ok(())
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct PhaseDice {
    pub wo_st: f64,
    pub w_st: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct OrderingReport {
    /// Strict Table-1-style orderings, reported but not gated.
    pub multiview_gt_singles_wo_st: Option<bool>,
    pub st_improves_every_arm: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Summary {
    /// Mean validation Dice per arm at both phases.
    pub dice_mean: BTreeMap<String, PhaseDice>,
    pub ordering: OrderingReport,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub arms: Vec<String>,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub summary: Option<Summary>,
}

impl ExperimentManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::IoFailure(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::IoFailure(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| Error::IoFailure(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------------------
// Preprocessing helpers
// ---------------------------------------------------------------------------

/// Resample, optionally normalize, then center-crop/resize every axial
/// slice and stack the result into a translator-ready volume. In-plane
/// spacing is rescaled by the crop-to-output ratio.
pub fn preprocess_volume(vol: &Volume, pp: &PreprocessCfg) -> Result<Volume> {
    let res = resample(vol, pp.target_spacing, Interp::Linear)?;
    let res = match pp.normalize {
        Some((lo, hi)) => normalize_intensity(&res, lo, hi),
        None => res,
    };
    let [_, ny, nx] = res.shape();
    let crop = pp.crop.min(ny).min(nx);
    let slices = slice_axial(&res);
    let out_side = pp.image_size;
    let mut data = Array3::<f32>::zeros((slices.len(), out_side, out_side));
    for (z, s) in slices.iter().enumerate() {
        let c = center_crop_resize(s, (crop, crop), (out_side, out_side), Interp::Linear)?;
        data.index_axis_mut(ndarray::Axis(0), z).assign(&c.data);
    }
    let spacing = [
        pp.target_spacing[0],
        pp.target_spacing[1] * crop as f64 / out_side as f64,
        pp.target_spacing[2] * crop as f64 / out_side as f64,
    ];
    Volume::new(data, spacing, vol.origin_id.clone())
}

/// Same geometry path as `preprocess_volume`, nearest everywhere.
pub fn preprocess_mask(mask: &LabelMask, pp: &PreprocessCfg) -> Result<LabelMask> {
    let res = resample_mask(mask, pp.target_spacing)?;
    let dims = res.shape();
    let crop = pp.crop.min(dims[1]).min(dims[2]);
    let out_side = pp.image_size;
    // Route the u8 planes through the f32 slice ops; labels {0,1,2} are
    // exactly representable.
    let as_vol = Volume::new(res.data.mapv(|v| v as f32), res.spacing, "mask")?;
    let slices = slice_axial(&as_vol);
    let mut data = Array3::<u8>::zeros((dims[0], out_side, out_side));
    for (z, s) in slices.iter().enumerate() {
        let c = center_crop_resize(s, (crop, crop), (out_side, out_side), Interp::Nearest)?;
        for y in 0..out_side {
            for x in 0..out_side {
                data[[z, y, x]] = c.data[[y, x]] as u8;
            }
        }
    }
    let spacing = [
        pp.target_spacing[0],
        pp.target_spacing[1] * crop as f64 / out_side as f64,
        pp.target_spacing[2] * crop as f64 / out_side as f64,
    ];
    LabelMask::new(data, spacing)
}

fn volume_slices_f64(vol: &Volume) -> Vec<Array2<f64>> {
    slice_axial(vol)
        .into_iter()
        .map(|s| s.data.mapv(|v| v as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// The staged runner
// ---------------------------------------------------------------------------

struct Ctx {
    cfg: ExperimentConfig,
    arms: BTreeSet<Arm>,
    root: PathBuf,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    fn pre_dir(&self) -> PathBuf {
        self.root.join("preprocessed")
    }
    fn translators_dir(&self) -> PathBuf {
        self.root.join("translators")
    }
    fn translated_dir(&self, translator: &str) -> PathBuf {
        self.root.join("translated").join(translator)
    }
    fn arm_dir(&self, arm: Arm, mode: &str) -> PathBuf {
        self.root.join("arms").join(arm.name()).join(mode)
    }
    fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn translators_needed(&self) -> Vec<&'static str> {
        let mut need = BTreeSet::new();
        for arm in &self.arms {
            match arm {
                Arm::Cyclegan => {
                    need.insert("cyclegan");
                }
                Arm::Qsattn => {
                    need.insert("qsattn");
                }
                Arm::Multiview => {
                    need.insert("cyclegan");
                    need.insert("qsattn");
                }
            }
        }
        need.into_iter()
            .map(|n| if n == "cyclegan" { "cyclegan" } else { "qsattn" })
            .collect()
    }

    fn dataset_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(self.data_dir().join("manifest.json"))
    }
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .to_string_lossy()
        .into_owned()
}

// Stage implementations -------------------------------------------------------

fn stage_phantom(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let mut params = ctx.cfg.phantom.clone();
    params.seed = derive_seed(ctx.cfg.master_seed, "phantom");
    let dir = ctx.data_dir();
    let manifest = generate_dataset(
        &params,
        ctx.cfg.data.n_train_s,
        ctx.cfg.data.n_train_t,
        ctx.cfg.data.n_val,
        &dir,
    )?;
    let mut files = vec![dir.join("manifest.json")];
    for e in &manifest.entries {
        for name in [&e.volume_s, &e.volume_t, &e.mask].into_iter().flatten() {
            files.push(dir.join(name));
            files.push(dir.join(format!("{name}.raw")));
        }
    }
    Ok(files)
}

fn stage_preprocess(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let src = ctx.data_dir();
    let dst = ctx.pre_dir();
    std::fs::create_dir_all(&dst)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", dst.display())))?;
    let manifest = ctx.dataset_manifest()?;
    let pp = &ctx.cfg.preprocess;
    let mut files = Vec::new();
    for e in &manifest.entries {
        for name in [&e.volume_s, &e.volume_t].into_iter().flatten() {
            let vol = load_volume(src.join(name))?;
            let out = preprocess_volume(&vol, pp)?;
            save_volume(&out, dst.join(name))?;
            files.push(dst.join(name));
            files.push(dst.join(format!("{name}.raw")));
        }
        if let Some(name) = &e.mask {
            let mask = load_mask(src.join(name))?;
            let out = preprocess_mask(&mask, pp)?;
            save_mask(&out, dst.join(name))?;
            files.push(dst.join(name));
            files.push(dst.join(format!("{name}.raw")));
        }
    }
    let mpath = dst.join("manifest.json");
    manifest.save(&mpath)?;
    files.push(mpath);
    Ok(files)
}

fn load_training_slices(ctx: &Ctx) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let dir = ctx.pre_dir();
    let manifest = DatasetManifest::load(dir.join("manifest.json"))?;
    let mut s = Vec::new();
    for e in manifest.entries_with_role("train_s") {
        let vol = load_volume(dir.join(e.volume_s.as_ref().unwrap()))?;
        s.extend(volume_slices_f64(&vol));
    }
    let mut t = Vec::new();
    for e in manifest.entries_with_role("train_t") {
        let vol = load_volume(dir.join(e.volume_t.as_ref().unwrap()))?;
        t.extend(volume_slices_f64(&vol));
    }
    Ok((s, t))
}

fn stage_train_translator(ctx: &Ctx, which: &str) -> Result<Vec<PathBuf>> {
    let (s, t) = load_training_slices(ctx)?;
    let mut cfg = ctx.cfg.translation.clone();
    cfg.seed = derive_seed(ctx.cfg.master_seed, &format!("translate/{which}"));
    let ck = match which {
        "cyclegan" => train_cyclegan(&s, &t, &cfg)?,
        _ => train_qsattn(&s, &t, &cfg)?,
    };
    let dir = ctx.translators_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{which}.ckpt"));
    ck.save(&path)?;
    Ok(vec![path])
}

fn stage_translate(ctx: &Ctx, which: &str) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(ctx.translators_dir().join(format!("{which}.ckpt")))?;
    let pre = ctx.pre_dir();
    let manifest = DatasetManifest::load(pre.join("manifest.json"))?;
    let dir = ctx.translated_dir(which);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in manifest.entries_with_role("train_s") {
        let vol = load_volume(pre.join(e.volume_s.as_ref().unwrap()))?;
        let out = translate_volume(&ck, &vol, Direction::SToT)?;
        let name = format!("{}_pseudo_t.vvol", e.case_id);
        save_volume(&out, dir.join(&name))?;
        files.push(dir.join(&name));
        files.push(dir.join(format!("{name}.raw")));
    }
    Ok(files)
}

/// Labeled training cases for one arm: its translator outputs (or both,
/// for the multi-view union) paired with the source labels.
fn arm_labeled_cases(ctx: &Ctx, arm: Arm) -> Result<Vec<(Volume, LabelMask)>> {
    let pre = ctx.pre_dir();
    let manifest = DatasetManifest::load(pre.join("manifest.json"))?;
    let translators: Vec<&str> = match arm {
        Arm::Cyclegan => vec!["cyclegan"],
        Arm::Qsattn => vec!["qsattn"],
        Arm::Multiview => vec!["cyclegan", "qsattn"],
    };
    let mut cases = Vec::new();
    for tr in translators {
        let dir = ctx.translated_dir(tr);
        for e in manifest.entries_with_role("train_s") {
            let vol = load_volume(dir.join(format!("{}_pseudo_t.vvol", e.case_id)))?;
            let mask = load_mask(pre.join(e.mask.as_ref().unwrap()))?;
            cases.push((vol, mask));
        }
    }
    Ok(cases)
}

fn unlabeled_volumes(ctx: &Ctx) -> Result<Vec<Volume>> {
    let pre = ctx.pre_dir();
    let manifest = DatasetManifest::load(pre.join("manifest.json"))?;
    manifest
        .entries_with_role("train_t")
        .map(|e| load_volume(pre.join(e.volume_t.as_ref().unwrap())))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoundFileRecord {
    round: usize,
    checkpoint: String,
    pseudo_labels: Vec<(String, String)>, // (case origin id, path)
}

fn stage_selftrain(ctx: &Ctx, arm: Arm, mode: &str) -> Result<Vec<PathBuf>> {
    let labeled = arm_labeled_cases(ctx, arm)?;
    let unlabeled = unlabeled_volumes(ctx)?;
    let mut seg = match mode {
        "2d" => ctx.cfg.segmentation.twod.clone(),
        _ => ctx.cfg.segmentation.threed.clone(),
    };
    seg.seed = derive_seed(
        ctx.cfg.master_seed,
        &format!("seg/{}/{}", arm.name(), mode),
    );
    let (_, records) = self_train(
        &labeled,
        &unlabeled,
        &seg,
        ctx.cfg.self_training.rounds,
        ctx.cfg.self_training.confidence_floor,
    )?;
    let dir = ctx.arm_dir(arm, mode);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    let mut round_records = Vec::new();
    for rec in &records {
        let ck_name = format!("round{}.ckpt", rec.round);
        rec.checkpoint.save(dir.join(&ck_name))?;
        files.push(dir.join(&ck_name));
        let mut pseudo_paths = Vec::new();
        for (origin, mask) in &rec.pseudo_labels {
            let name = format!("round{}_pseudo_{}.vvol", rec.round, origin);
            save_mask(mask, dir.join(&name))?;
            files.push(dir.join(&name));
            files.push(dir.join(format!("{name}.raw")));
            pseudo_paths.push((origin.clone(), name));
        }
        round_records.push(RoundFileRecord {
            round: rec.round,
            checkpoint: ck_name,
            pseudo_labels: pseudo_paths,
        });
    }
    let rpath = dir.join("records.json");
    let text = serde_json::to_string_pretty(&round_records)
        .map_err(|e| Error::IoFailure(e.to_string()))?;
    std::fs::write(&rpath, text)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", rpath.display())))?;
    files.push(rpath);
    Ok(files)
}

fn val_cases(ctx: &Ctx) -> Result<Vec<(String, Volume, Volume, LabelMask)>> {
    let pre = ctx.pre_dir();
    let manifest = DatasetManifest::load(pre.join("manifest.json"))?;
    let mut out = Vec::new();
    for e in manifest.entries_with_role("val") {
        out.push((
            e.case_id.clone(),
            load_volume(pre.join(e.volume_s.as_ref().unwrap()))?,
            load_volume(pre.join(e.volume_t.as_ref().unwrap()))?,
            load_mask(pre.join(e.mask.as_ref().unwrap()))?,
        ));
    }
    Ok(out)
}

fn arm_phase_table(
    ctx: &Ctx,
    arm: Arm,
    round: usize,
    vals: &[(String, Volume, Volume, LabelMask)],
) -> Result<ResultsTable> {
    let ck2 = Checkpoint::load(ctx.arm_dir(arm, "2d").join(format!("round{round}.ckpt")))?;
    let ck3 = Checkpoint::load(ctx.arm_dir(arm, "3d").join(format!("round{round}.ckpt")))?;
    let preds: Vec<LabelMask> = vals
        .iter()
        .map(|(_, _, vol_t, _)| ensemble_predict(&[&ck2, &ck3], vol_t))
        .collect::<Result<_>>()?;
    let gts: Vec<LabelMask> = vals.iter().map(|(_, _, _, m)| m.clone()).collect();
    let spacing = gts[0].spacing;
    let mut table = evaluate_cases(&preds, &gts, spacing)?;
    for (row, (id, _, _, _)) in table.rows.iter_mut().zip(vals.iter()) {
        row.case_id = id.clone();
    }
    Ok(table)
}

fn stage_evaluate(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let dir = ctx.eval_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", dir.display())))?;
    let vals = val_cases(ctx)?;
    let rounds = ctx.cfg.self_training.rounds;
    let mut files = Vec::new();

    let mut tables: BTreeMap<(Arm, &'static str), ResultsTable> = BTreeMap::new();
    for &arm in &ctx.arms {
        for (phase, round) in [("wo_st", 0usize), ("w_st", rounds)] {
            let table = arm_phase_table(ctx, arm, round, &vals)?;
            let p = dir.join(format!("metrics_{}_{phase}.csv", arm.name()));
            std::fs::write(&p, metrics_csv(&table))
                .map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
            files.push(p);
            tables.insert((arm, phase), table);
        }
    }

    // Combined cross-arm table (the headline comparison artifact).
    let mut combined = String::from(
        "arm,phase,case_id,dice_vs,dice_cochlea,dice_mean,assd_vs,assd_cochlea\n",
    );
    for ((arm, phase), table) in &tables {
        for line in metrics_csv(table).lines().skip(1) {
            combined.push_str(arm.name());
            combined.push(',');
            combined.push_str(phase);
            combined.push(',');
            combined.push_str(line);
            combined.push('\n');
        }
    }
    let p = dir.join("metrics.csv");
    std::fs::write(&p, combined)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
    files.push(p);

    // Paired t-tests between arms (without self-training) and per arm
    // across the self-training phases.
    let mut comparisons = Vec::new();
    let arms: Vec<Arm> = ctx.arms.iter().copied().collect();
    for i in 0..arms.len() {
        for j in i + 1..arms.len() {
            let a = &tables[&(arms[i], "wo_st")];
            let b = &tables[&(arms[j], "wo_st")];
            for (metric, get) in [
                ("dice_vs", (|r: &crate::metrics::CaseMetrics| r.dice_vs) as fn(_) -> f64),
                ("dice_cochlea", |r: &crate::metrics::CaseMetrics| r.dice_cochlea),
                ("dice_mean", |r: &crate::metrics::CaseMetrics| r.dice_mean),
            ] {
                comparisons.push(Comparison {
                    name: format!("{}-vs-{}/wo_st", arms[i].name(), arms[j].name()),
                    metric: metric.to_string(),
                    xs: a.rows.iter().map(|r| get(r)).collect(),
                    ys: b.rows.iter().map(|r| get(r)).collect(),
                });
            }
        }
    }
    for &arm in &arms {
        let a = &tables[&(arm, "w_st")];
        let b = &tables[&(arm, "wo_st")];
        comparisons.push(Comparison {
            name: format!("{}/st-effect", arm.name()),
            metric: "dice_mean".to_string(),
            xs: a.rows.iter().map(|r| r.dice_mean).collect(),
            ys: b.rows.iter().map(|r| r.dice_mean).collect(),
        });
    }
    if !comparisons.is_empty() && vals.len() >= 2 {
        let p = dir.join("significance.csv");
        std::fs::write(&p, significance_csv(&comparisons)?)
            .map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
        files.push(p);
    }

    // Summary with the ordering report.
    let mut summary = Summary::default();
    for &arm in &arms {
        summary.dice_mean.insert(
            arm.name().to_string(),
            PhaseDice {
                wo_st: tables[&(arm, "wo_st")].agg_mean.dice_mean,
                w_st: tables[&(arm, "w_st")].agg_mean.dice_mean,
            },
        );
    }
    if ctx.arms.contains(&Arm::Multiview)
        && ctx.arms.contains(&Arm::Cyclegan)
        && ctx.arms.contains(&Arm::Qsattn)
    {
        let mv = summary.dice_mean["multiview"].wo_st;
        let cg = summary.dice_mean["cyclegan"].wo_st;
        let qs = summary.dice_mean["qsattn"].wo_st;
        summary.ordering.multiview_gt_singles_wo_st = Some(mv > cg && mv > qs);
    }
    summary.ordering.st_improves_every_arm = Some(
        summary
            .dice_mean
            .values()
            .all(|p| p.w_st > p.wo_st),
    );
    let p = dir.join("summary.json");
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::IoFailure(e.to_string()))?;
    std::fs::write(&p, text)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
    files.push(p);
    Ok(files)
}

fn stage_report(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let dir = ctx.report_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", dir.display())))?;
    let vals = val_cases(ctx)?;
    let n = ctx.cfg.eval.montage_cases.min(vals.len());
    let translators = ctx.translators_needed();
    let mut cks = Vec::new();
    for tr in &translators {
        cks.push((
            *tr,
            Checkpoint::load(ctx.translators_dir().join(format!("{tr}.ckpt")))?,
        ));
    }
    let mut col_labels = vec!["SOURCE".to_string()];
    col_labels.extend(cks.iter().map(|(n, _)| n.to_uppercase()));
    col_labels.push("TARGET".to_string());
    let mut rows = Vec::new();
    for (_, vol_s, vol_t, _) in vals.iter().take(n) {
        let mid = vol_s.shape()[0] / 2;
        let mut row = vec![vol_s.data.index_axis(ndarray::Axis(0), mid).to_owned()];
        for (_, ck) in &cks {
            let tr = translate_volume(ck, vol_s, Direction::SToT)?;
            row.push(tr.data.index_axis(ndarray::Axis(0), mid).to_owned());
        }
        row.push(vol_t.data.index_axis(ndarray::Axis(0), mid).to_owned());
        rows.push(row);
    }
    let montage = Montage { col_labels, rows };
    let p = write_montage_pgm(&montage, dir.join("montage.pgm"))?;
    Ok(vec![p])
}

// Runner ----------------------------------------------------------------------

fn stage_list(ctx: &Ctx) -> Vec<String> {
    let mut stages = vec!["phantom".to_string(), "preprocess".to_string()];
    for tr in ctx.translators_needed() {
        stages.push(format!("train-translate:{tr}"));
    }
    for tr in ctx.translators_needed() {
        stages.push(format!("translate:{tr}"));
    }
    for arm in &ctx.arms {
        for mode in ["2d", "3d"] {
            stages.push(format!("selftrain:{}:{}", arm.name(), mode));
        }
    }
    stages.push("evaluate".to_string());
    stages.push("report".to_string());
    stages
}

fn run_stage(ctx: &Ctx, name: &str) -> Result<Vec<PathBuf>> {
    if let Some(tr) = name.strip_prefix("train-translate:") {
        return stage_train_translator(ctx, tr);
    }
    if let Some(tr) = name.strip_prefix("translate:") {
        return stage_translate(ctx, tr);
    }
    if let Some(rest) = name.strip_prefix("selftrain:") {
        let (arm, mode) = rest
            .split_once(':')
            .ok_or_else(|| Error::ConfigInvalid(format!("bad stage {name:?}")))?;
        return stage_selftrain(ctx, Arm::parse(arm)?, mode);
    }
    match name {
        "phantom" => stage_phantom(ctx),
        "preprocess" => stage_preprocess(ctx),
        "evaluate" => stage_evaluate(ctx),
        "report" => stage_report(ctx),
        other => Err(Error::ConfigInvalid(format!("unknown stage {other:?}"))),
    }
}

fn verify_stage(root: &Path, rec: &StageRecord) -> Result<()> {
    for a in &rec.artifacts {
        let p = root.join(&a.path);
        if !p.exists() {
            return Err(Error::HashMismatch {
                path: p,
                expected: a.sha256.clone(),
                actual: "<missing>".into(),
            });
        }
        let actual = hash_file(&p)?;
        if actual != a.sha256 {
            return Err(Error::HashMismatch {
                path: p,
                expected: a.sha256.clone(),
                actual,
            });
        }
    }
    Ok(())
}

/// Run the pipeline (or continue a partial run) in `out_root`, executing
/// stages up to and including `until` (all stages when `None`).
pub fn run_pipeline_until(
    cfg: &ExperimentConfig,
    arms: &BTreeSet<Arm>,
    out_root: &Path,
    until: Option<&str>,
) -> Result<ExperimentManifest> {
    cfg.validate()?;
    if arms.is_empty() {
        return Err(Error::ConfigInvalid("no arms requested".into()));
    }
    std::fs::create_dir_all(out_root)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", out_root.display())))?;
    let ctx = Ctx {
        cfg: cfg.clone(),
        arms: arms.clone(),
        root: out_root.to_path_buf(),
    };

    let config_path = out_root.join("config.json");
    let manifest_path = out_root.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        let m = ExperimentManifest::load(&manifest_path)?;
        if m.config_hash != cfg.hash() {
            return Err(Error::ConfigInvalid(
                "output directory holds a run with a different config".into(),
            ));
        }
        m
    } else {
        std::fs::write(&config_path, cfg.canonical_json())
            .map_err(|e| Error::IoFailure(format!("{}: {e}", config_path.display())))?;
        ExperimentManifest {
            format_version: 1,
            config_hash: cfg.hash(),
            arms: arms.iter().map(|a| a.name().to_string()).collect(),
            stages: Vec::new(),
            summary: None,
        }
    };

    // Completed stages must be intact before we build on them.
    for rec in &manifest.stages {
        verify_stage(out_root, rec)?;
    }

    for name in stage_list(&ctx) {
        if manifest.stage(&name).is_none() {
            eprintln!("[xmoda] running stage {name}");
            let artifacts = run_stage(&ctx, &name)?;
            let mut records = Vec::with_capacity(artifacts.len());
            for p in &artifacts {
                records.push(ArtifactRecord {
                    path: rel(out_root, p),
                    sha256: hash_file(p)?,
                });
            }
            manifest.stages.push(StageRecord {
                name: name.clone(),
                artifacts: records,
            });
            if name == "evaluate" {
                let text = std::fs::read_to_string(ctx.eval_dir().join("summary.json"))?;
                manifest.summary = Some(
                    serde_json::from_str(&text)
                        .map_err(|e| Error::ConfigInvalid(e.to_string()))?,
                );
            }
            manifest.save(&manifest_path)?;
        }
        if Some(name.as_str()) == until {
            break;
        }
    }
    Ok(manifest)
}

/// Run every stage of the experiment.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    arms: &BTreeSet<Arm>,
    out_root: &Path,
) -> Result<ExperimentManifest> {
    run_pipeline_until(cfg, arms, out_root, None)
}

/// Continue the experiment recorded in a manifest: verify every completed
/// stage's artifacts, then run whatever is missing.
pub fn resume(manifest_path: &Path) -> Result<ExperimentManifest> {
    let manifest = ExperimentManifest::load(manifest_path)?;
    let root = manifest_path
        .parent()
        .ok_or_else(|| Error::ConfigInvalid("manifest has no parent directory".into()))?;
    let cfg = ExperimentConfig::load(root.join("config.json"))?;
    let arms: BTreeSet<Arm> = manifest
        .arms
        .iter()
        .map(|a| Arm::parse(a))
        .collect::<Result<_>>()?;
    run_pipeline(&cfg, &arms, root)
}

/// A desk-scale configuration: small volumes, short schedules.
pub fn smoke_config(master_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        config_version: 1,
        master_seed,
        out_root: None,
        data: DataCounts {
            n_train_s: 8,
            n_train_t: 8,
            n_val: 4,
        },
        phantom: PhantomParams::default(),
        preprocess: PreprocessCfg {
            target_spacing: [1.5, 1.0, 1.0],
            crop: 48,
            image_size: 48,
            normalize: None,
        },
        translation: TrainConfig {
            epochs: 5,
            seed: 0,
            image_size: 48,
            ..Default::default()
        },
        segmentation: SegPairCfg {
            twod: SegConfig::default_2d(),
            threed: SegConfig::default_3d(),
        },
        self_training: SelfTrainCfg {
            rounds: 1,
            confidence_floor: 0.0,
        },
        eval: EvalCfg { montage_cases: 2 },
    }
}
