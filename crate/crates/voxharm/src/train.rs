//! Two-phase training: autoencoder pre-training on patches from all sites,
//! then frozen-encoder style-transfer training on alternating cross-site
//! pairs. Includes the dataset splitter, the decoupled-weight-decay
//! optimizer, the validation-plateau learning-rate schedule, and run logs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{self, LossWeights};
use crate::model::{
    adain, save_checkpoint, CheckpointMeta, Model, ModelError, Parameter,
};
use crate::phantom::{resolve_path, ManifestEntry, PhantomError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::volume::{crop_patch, read_volume, PatchSpec, Volume, VolumeError};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-8;
pub const ADAM_WEIGHT_DECAY: f32 = 0.01;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("split has no {0} entries")]
    EmptySplit(&'static str),
    #[error("site {site} has only {n} volumes; phase 2 needs at least 3")]
    SiteTooSmall { site: String, n: usize },
    #[error("phase 2 trains on exactly two sites, found {0}")]
    NeedTwoSites(usize),
    #[error("held-out site {0} appeared in a training pair")]
    HeldOutLeak(String),
    #[error("volume {path} is not normalized")]
    NotNormalized { path: PathBuf },
    #[error("volumes have mixed dims: {0:?} vs {1:?}")]
    MixedDims((usize, usize, usize), (usize, usize, usize)),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("run log line {line} is malformed: {reason}")]
    BadRunLogLine { line: usize, reason: String },
}

/// Everything one training run needs. Paper-scale values are the documented
/// defaults; `desk()` shrinks them to laptop size.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub phase: u8,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub plateau_factor: f32,
    pub plateau_patience: usize,
    pub plateau_min_delta: f32,
    pub patch_size: usize,
    pub base_width: usize,
    /// Patches drawn per training volume per epoch.
    pub patches_per_volume: usize,
    pub seed: u64,
    /// Site excluded from phase-2 training; defaults to the
    /// lexicographically last site when unset.
    pub held_out_site: Option<String>,
}

impl TrainConfig {
    /// Paper-scale settings: batch 48 (phase 1) or 32 (phase 2), 1000
    /// epochs, 64³ patches, base width 64.
    pub fn paper(phase: u8) -> TrainConfig {
        TrainConfig {
            phase,
            learning_rate: 1e-4,
            batch_size: if phase == 1 { 48 } else { 32 },
            epochs: 1000,
            weights: LossWeights::default(),
            plateau_factor: 0.8,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            patch_size: 64,
            base_width: 64,
            patches_per_volume: 4,
            seed: 0,
            held_out_site: None,
        }
    }

    /// Desk-scale settings: 16³ patches, base width 8, 200 epochs.
    pub fn desk(phase: u8) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 200,
            patch_size: 16,
            base_width: 8,
            ..TrainConfig::paper(phase)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phase != 1 && self.phase != 2 {
            return Err(TrainError::BadConfig(format!("phase must be 1 or 2, got {}", self.phase)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(TrainError::BadConfig("plateau_factor must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patches_per_volume == 0 {
            return Err(TrainError::BadConfig("batch_size, epochs and patches_per_volume must be positive".into()));
        }
        if self.patch_size < 8 || self.patch_size % 8 != 0 {
            return Err(TrainError::BadConfig(format!(
                "patch_size must be a positive multiple of 8, got {}",
                self.patch_size
            )));
        }
        if self.base_width == 0 {
            return Err(TrainError::BadConfig("base_width must be positive".into()));
        }
        if !self.weights.validate() {
            return Err(TrainError::BadConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

// ── dataset splits ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Default)]
pub struct SiteSplit {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub phase: u8,
    pub sites: BTreeMap<String, SiteSplit>,
    pub held_out: Option<String>,
}

impl DatasetSplit {
    pub fn train_entries(&self) -> Vec<&ManifestEntry> {
        self.sites.values().flat_map(|s| s.train.iter()).collect()
    }

    pub fn val_entries(&self) -> Vec<&ManifestEntry> {
        self.sites.values().flat_map(|s| s.val.iter()).collect()
    }
}

fn site_hash(site: &str) -> u64 {
    // FNV-1a; stable across runs and platforms
    let mut h = 0xcbf29ce484222325u64;
    for b in site.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Deterministic per-site shuffle followed by a ratio split: 80:20 for
/// phase 1, 70:20:10 for phase 2 with the held-out site fully reserved for
/// testing.
pub fn split_dataset(
    manifest: &[ManifestEntry],
    phase: u8,
    seed: u64,
    held_out: Option<&str>,
) -> Result<DatasetSplit, TrainError> {
    if manifest.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let mut by_site: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
    for e in manifest {
        by_site.entry(e.site_id.clone()).or_default().push(e.clone());
    }

    let held_out = match phase {
        2 => Some(
            held_out
                .map(str::to_string)
                .unwrap_or_else(|| by_site.keys().last().expect("nonempty").clone()),
        ),
        _ => None,
    };

    let mut sites = BTreeMap::new();
    for (site, mut entries) in by_site {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ site_hash(&site));
        shuffle(&mut entries, &mut rng);
        let n = entries.len();
        let split = if held_out.as_deref() == Some(site.as_str()) {
            SiteSplit {
                train: Vec::new(),
                val: Vec::new(),
                test: entries,
            }
        } else if phase == 1 {
            let val = if n >= 2 { ((n as f64 * 0.2) as usize).max(1) } else { 0 };
            let train = n - val;
            SiteSplit {
                train: entries[..train].to_vec(),
                val: entries[train..].to_vec(),
                test: Vec::new(),
            }
        } else {
            if n < 3 {
                return Err(TrainError::SiteTooSmall { site, n });
            }
            let val = ((n as f64 * 0.2) as usize).max(1);
            let test = (n - (n as f64 * 0.7) as usize - val).max(1);
            let train = n - val - test;
            SiteSplit {
                train: entries[..train].to_vec(),
                val: entries[train..train + val].to_vec(),
                test: entries[train + val..].to_vec(),
            }
        };
        sites.insert(site, split);
    }

    Ok(DatasetSplit {
        phase,
        sites,
        held_out,
    })
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Decoupled-weight-decay adaptive-moment state for a fixed parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    pub weight_decay: f32,
}

impl OptimizerState {
    pub fn new(params: &[&Parameter], weight_decay: f32) -> OptimizerState {
        OptimizerState {
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            step: 0,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked_parameters(&self) -> usize {
        self.m.len()
    }
}

/// One update with bias-corrected moments:
/// `p -= lr · (m̂ / (√v̂ + ε) + decay · p)`.
pub fn adamw_step(
    params: &mut [&mut Parameter],
    grads: &[Option<&[f32]>],
    state: &mut OptimizerState,
    lr: f32,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), state.m.len(), "optimizer bound to a different parameter list");
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (ADAM_BETA1 as f64).powf(t);
    let bc2 = 1.0 - (ADAM_BETA2 as f64).powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].ok_or_else(|| TrainError::MissingGradient(p.name.clone()))?;
        if g.len() != p.value.numel() {
            return Err(TrainError::MissingGradient(p.name.clone()));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = p.value.data_mut();
        for j in 0..data.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1 as f32;
            let v_hat = v[j] / bc2 as f32;
            data[j] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPSILON) + state.weight_decay * data[j]);
        }
    }
    Ok(())
}

// ── run log and plateau schedule ────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f32,
    pub train_components: Vec<f32>,
    pub val_total: f32,
    pub lr: f32,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .filter(|e| e.checkpoint.is_some())
            .min_by(|a, b| a.val_total.partial_cmp(&b.val_total).expect("finite"))
    }

    /// `epoch<TAB>train_total<TAB>components<TAB>val_total<TAB>lr<TAB>checkpoint_or_dash`
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let comps: Vec<String> = e.train_components.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch,
                e.train_total,
                comps.join(","),
                e.val_total,
                e.lr,
                e.checkpoint.as_deref().unwrap_or("-")
            ));
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunLog, TrainError> {
        let mut epochs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| TrainError::BadRunLogLine {
                line: i + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 tab-separated fields"));
            }
            epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                train_total: f[1].parse().map_err(|_| bad("bad train total"))?,
                train_components: f[2]
                    .split(',')
                    .map(|c| c.parse().map_err(|_| bad("bad component")))
                    .collect::<Result<_, _>>()?,
                val_total: f[3].parse().map_err(|_| bad("bad val total"))?,
                lr: f[4].parse().map_err(|_| bad("bad lr"))?,
                checkpoint: match f[5] {
                    "-" => None,
                    s => Some(s.to_string()),
                },
            });
        }
        Ok(RunLog { epochs })
    }
}

/// Learning rate implied by the validation history: every time the best
/// validation loss fails to improve by `min_delta` for `patience`
/// consecutive epochs, the rate decays by `factor` and the counter resets.
pub fn lr_plateau(
    log: &RunLog,
    initial_lr: f32,
    patience: usize,
    factor: f32,
    min_delta: f32,
) -> f32 {
    let mut lr = initial_lr;
    let mut best = f32::INFINITY;
    let mut since = 0usize;
    for e in &log.epochs {
        if e.val_total < best - min_delta {
            best = e.val_total;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                lr *= factor;
                since = 0;
            }
        }
    }
    lr
}

// ── shared training machinery ───────────────────────────────────────────

struct LoadedEntry {
    volume: Volume,
    site_id: String,
}

fn load_entries(
    manifest_path: &Path,
    entries: &[&ManifestEntry],
) -> Result<Vec<LoadedEntry>, TrainError> {
    let mut out = Vec::with_capacity(entries.len());
    let mut dims: Option<(usize, usize, usize)> = None;
    for e in entries {
        let path = resolve_path(manifest_path, &e.volume_path);
        let volume = read_volume(&path)?;
        if volume.norm.is_none() {
            return Err(TrainError::NotNormalized { path });
        }
        match dims {
            None => dims = Some(volume.dims),
            Some(d) if d != volume.dims => {
                return Err(TrainError::MixedDims(d, volume.dims));
            }
            _ => {}
        }
        out.push(LoadedEntry {
            volume,
            site_id: e.site_id.clone(),
        });
    }
    Ok(out)
}

/// Stacks single-patch tensors into one `[n, 1, s, s, s]` batch.
fn stack_patches(patches: &[Tensor]) -> Tensor {
    let s = patches[0].shape()[2];
    let mut data = Vec::with_capacity(patches.len() * s * s * s);
    for p in patches {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![patches.len(), 1, s, s, s], data).expect("uniform patch shapes")
}

fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ── phase 1 ─────────────────────────────────────────────────────────────

/// Result of a training run: where the best checkpoint went plus the log.
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub runlog_path: PathBuf,
    pub log: RunLog,
}

/// Autoencoder pre-training: random patches from every site, reconstruction
/// objective, best-validation checkpointing, plateau-decayed learning rate.
pub fn pretrain_phase1(
    manifest_path: &Path,
    split: &DatasetSplit,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if config.phase != 1 {
        return Err(TrainError::BadConfig("pretrain_phase1 needs a phase-1 config".into()));
    }
    let train = load_entries(manifest_path, &split.train_entries())?;
    let val = load_entries(manifest_path, &split.val_entries())?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    fs::create_dir_all(out_dir)?;

    let mut model = Model::new(config.base_width, config.seed);
    let mut opt = OptimizerState::new(&model.parameters(), ADAM_WEIGHT_DECAY);

    // fixed validation plan, reused every epoch
    let mut val_rng = derive_rng(config.seed, 1);
    let val_plan: Vec<(usize, PatchSpec)> = (0..val.len() * config.patches_per_volume)
        .map(|i| {
            let vol = i % val.len();
            let spec = PatchSpec::random(val[vol].volume.dims, config.patch_size, &mut val_rng)?;
            Ok((vol, spec))
        })
        .collect::<Result<_, VolumeError>>()?;

    let mut train_rng = derive_rng(config.seed, 2);
    let mut log = RunLog::default();
    let mut best_val = f32::INFINITY;
    let checkpoint_path = out_dir.join("phase1_best.hckp");

    for epoch in 1..=config.epochs {
        let lr = lr_plateau(
            &log,
            config.learning_rate,
            config.plateau_patience,
            config.plateau_factor,
            config.plateau_min_delta,
        );

        // one pass: every training volume contributes patches_per_volume crops
        let mut items: Vec<usize> = (0..train.len())
            .flat_map(|v| std::iter::repeat(v).take(config.patches_per_volume))
            .collect();
        shuffle(&mut items, &mut train_rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in items.chunks(config.batch_size).enumerate() {
            let patches: Vec<Tensor> = chunk
                .iter()
                .map(|&v| {
                    let spec =
                        PatchSpec::random(train[v].volume.dims, config.patch_size, &mut train_rng)?;
                    crop_patch(&train[v].volume, &spec)
                })
                .collect::<Result<_, VolumeError>>()?;
            let batch = stack_patches(&patches);

            let mut tape = Tape::new();
            let enc = model.encoder.bind(&mut tape, true);
            let dec = model.decoder.bind(&mut tape, true);
            let x = tape.leaf(batch);
            let pyr = enc.forward(&mut tape, x)?;
            let pred = dec.forward(&mut tape, pyr.top())?;
            let loss = losses::reconstruction_loss(&mut tape, pred, x)?;
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            tape.backward(loss)?;

            let bindings: Vec<_> = enc.layers.iter().chain(dec.layers.iter()).collect();
            let grads: Vec<Option<&[f32]>> = bindings
                .iter()
                .flat_map(|l| [tape.grad(l.weight), tape.grad(l.bias)])
                .collect();
            let mut params = model.parameters_mut();
            adamw_step(&mut params, &grads, &mut opt, lr)?;

            epoch_loss += loss_val as f64;
            batches += 1;
        }
        let train_total = (epoch_loss / batches as f64) as f32;

        let val_total = validate_phase1(&model, &val, &val_plan, config)?;
        let mut record = EpochRecord {
            epoch,
            train_total,
            train_components: vec![train_total],
            val_total,
            lr,
            checkpoint: None,
        };
        if val_total < best_val {
            best_val = val_total;
            let meta = CheckpointMeta {
                phase: 1,
                base: config.base_width as u32,
                patch_size: config.patch_size as u32,
                weights: config.weights,
            };
            save_checkpoint(&model, &meta, &checkpoint_path)?;
            record.checkpoint = Some(checkpoint_path.display().to_string());
        }
        log.epochs.push(record);
    }

    let runlog_path = out_dir.join("phase1_runlog.tsv");
    log.write_to(&runlog_path)?;
    Ok(TrainOutcome {
        checkpoint_path,
        runlog_path,
        log,
    })
}

fn validate_phase1(
    model: &Model,
    val: &[LoadedEntry],
    plan: &[(usize, PatchSpec)],
    config: &TrainConfig,
) -> Result<f32, TrainError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in plan.chunks(config.batch_size) {
        let patches: Vec<Tensor> = chunk
            .iter()
            .map(|(v, spec)| crop_patch(&val[*v].volume, spec))
            .collect::<Result<_, VolumeError>>()?;
        let batch = stack_patches(&patches);
        let mut tape = Tape::new();
        let enc = model.encoder.bind(&mut tape, false);
        let dec = model.decoder.bind(&mut tape, false);
        let x = tape.leaf(batch);
        let pyr = enc.forward(&mut tape, x)?;
        let pred = dec.forward(&mut tape, pyr.top())?;
        let loss = losses::reconstruction_loss(&mut tape, pred, x)?;
        total += tape.scalar_value(loss) as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((total / count as f64) as f32)
}

// ── phase 2 ─────────────────────────────────────────────────────────────

/// A phase-2 training instance: input from one site, target from the other,
/// both cropped at the same location.
struct PairPlan {
    src: usize, // index into the source site's volume list
    dst: usize,
    forward: bool, // true: first→second site, false: reverse
    spec: PatchSpec,
}

/// Style-transfer training with the phase-1 encoder frozen. Batch instances
/// alternate direction between the two training sites; each instance pairs
/// randomly sampled cross-site volumes cropped at a shared location.
pub fn train_phase2(
    manifest_path: &Path,
    split: &DatasetSplit,
    phase1_checkpoint: &Path,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if config.phase != 2 {
        return Err(TrainError::BadConfig("train_phase2 needs a phase-2 config".into()));
    }
    let held_out = split.held_out.clone();
    let training_sites: Vec<&String> = split
        .sites
        .iter()
        .filter(|(site, s)| {
            Some(site.as_str()) != held_out.as_deref() && !s.train.is_empty()
        })
        .map(|(site, _)| site)
        .collect();
    if training_sites.len() != 2 {
        return Err(TrainError::NeedTwoSites(training_sites.len()));
    }
    let (site_a, site_b) = (training_sites[0].clone(), training_sites[1].clone());
    for site in [&site_a, &site_b] {
        if held_out.as_deref() == Some(site.as_str()) {
            return Err(TrainError::HeldOutLeak(site.clone()));
        }
    }

    let refs_a: Vec<&ManifestEntry> = split.sites[&site_a].train.iter().collect();
    let refs_b: Vec<&ManifestEntry> = split.sites[&site_b].train.iter().collect();
    let train_a = load_entries(manifest_path, &refs_a)?;
    let train_b = load_entries(manifest_path, &refs_b)?;
    let val_a = load_entries(
        manifest_path,
        &split.sites[&site_a].val.iter().collect::<Vec<_>>(),
    )?;
    let val_b = load_entries(
        manifest_path,
        &split.sites[&site_b].val.iter().collect::<Vec<_>>(),
    )?;
    if train_a.is_empty() || train_b.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_a.is_empty() || val_b.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    fs::create_dir_all(out_dir)?;

    let (mut model, _phase1_meta) = crate::model::load_checkpoint(phase1_checkpoint)?;
    let encoder_before: Vec<Vec<u32>> = model
        .encoder_parameters()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut opt = OptimizerState::new(
        &model.decoder.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect::<Vec<_>>(),
        ADAM_WEIGHT_DECAY,
    );

    let dims = train_a[0].volume.dims;
    let mut val_rng = derive_rng(config.seed, 3);
    let n_val_pairs = (val_a.len() + val_b.len()) * config.patches_per_volume;
    let val_plan: Vec<PairPlan> = (0..n_val_pairs.max(2))
        .map(|i| {
            let forward = i % 2 == 0;
            let (src_pool, dst_pool) = if forward {
                (val_a.len(), val_b.len())
            } else {
                (val_b.len(), val_a.len())
            };
            Ok(PairPlan {
                src: val_rng.random_range(0..src_pool),
                dst: val_rng.random_range(0..dst_pool),
                forward,
                spec: PatchSpec::random(dims, config.patch_size, &mut val_rng)?,
            })
        })
        .collect::<Result<_, VolumeError>>()?;

    let mut train_rng = derive_rng(config.seed, 4);
    let mut log = RunLog::default();
    let mut best_val = f32::INFINITY;
    let checkpoint_path = out_dir.join("phase2_best.hckp");

    let steps_per_epoch =
        ((train_a.len() + train_b.len()) * config.patches_per_volume).div_ceil(config.batch_size);

    for epoch in 1..=config.epochs {
        let lr = lr_plateau(
            &log,
            config.learning_rate,
            config.plateau_patience,
            config.plateau_factor,
            config.plateau_min_delta,
        );

        let mut sums = [0.0f64; 4]; // total, content, style, consistency
        for batch_idx in 0..steps_per_epoch {
            let plan: Vec<PairPlan> = (0..config.batch_size)
                .map(|i| {
                    let forward = i % 2 == 0;
                    let (src_pool, dst_pool) = if forward {
                        (train_a.len(), train_b.len())
                    } else {
                        (train_b.len(), train_a.len())
                    };
                    Ok(PairPlan {
                        src: train_rng.random_range(0..src_pool),
                        dst: train_rng.random_range(0..dst_pool),
                        forward,
                        spec: PatchSpec::random(dims, config.patch_size, &mut train_rng)?,
                    })
                })
                .collect::<Result<_, VolumeError>>()?;

            let (loss_vals, tape, dec) = phase2_forward(
                &model,
                &plan,
                &train_a,
                &train_b,
                config,
                held_out.as_deref(),
                true,
            )?;
            let dec = dec.expect("trainable decoder binding");
            if !loss_vals[0].is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads: Vec<Option<&[f32]>> = dec
                .iter()
                .flat_map(|l| [tape.grad(l.weight), tape.grad(l.bias)])
                .collect();
            let mut params = model.decoder_parameters_mut();
            adamw_step(&mut params, &grads, &mut opt, lr)?;

            for (s, v) in sums.iter_mut().zip(&loss_vals) {
                *s += *v as f64;
            }
        }
        let train_total = (sums[0] / steps_per_epoch as f64) as f32;
        let components: Vec<f32> = sums[1..]
            .iter()
            .map(|s| (*s / steps_per_epoch as f64) as f32)
            .collect();

        let (val_vals, _, _) = phase2_forward(
            &model,
            &val_plan,
            &val_a,
            &val_b,
            config,
            held_out.as_deref(),
            false,
        )?;
        let val_total = val_vals[0];

        let mut record = EpochRecord {
            epoch,
            train_total,
            train_components: components,
            val_total,
            lr,
            checkpoint: None,
        };
        if val_total < best_val {
            best_val = val_total;
            let meta = CheckpointMeta {
                phase: 2,
                base: config.base_width as u32,
                patch_size: config.patch_size as u32,
                weights: config.weights,
            };
            save_checkpoint(&model, &meta, &checkpoint_path)?;
            record.checkpoint = Some(checkpoint_path.display().to_string());
        }
        log.epochs.push(record);
    }

    // frozen-encoder contract
    let encoder_after: Vec<Vec<u32>> = model
        .encoder_parameters()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(encoder_before, encoder_after, "encoder changed during phase 2");

    let runlog_path = out_dir.join("phase2_runlog.tsv");
    log.write_to(&runlog_path)?;
    Ok(TrainOutcome {
        checkpoint_path,
        runlog_path,
        log,
    })
}

type Phase2Bindings = Option<Vec<crate::model::BoundConv>>;

/// Runs one phase-2 forward pass over a batch plan and returns
/// `[total, content, style, consistency]` means plus the tape and decoder
/// bindings (for the backward pass) when training.
fn phase2_forward(
    model: &Model,
    plan: &[PairPlan],
    pool_a: &[LoadedEntry],
    pool_b: &[LoadedEntry],
    config: &TrainConfig,
    held_out: Option<&str>,
    train: bool,
) -> Result<([f32; 4], Tape, Phase2Bindings), TrainError> {
    let mut inputs = Vec::with_capacity(plan.len());
    let mut targets = Vec::with_capacity(plan.len());
    for p in plan {
        let (src_entry, dst_entry) = if p.forward {
            (&pool_a[p.src], &pool_b[p.dst])
        } else {
            (&pool_b[p.src], &pool_a[p.dst])
        };
        for entry in [src_entry, dst_entry] {
            if Some(entry.site_id.as_str()) == held_out {
                return Err(TrainError::HeldOutLeak(entry.site_id.clone()));
            }
        }
        debug_assert_ne!(src_entry.site_id, dst_entry.site_id);
        inputs.push(crop_patch(&src_entry.volume, &p.spec)?);
        targets.push(crop_patch(&dst_entry.volume, &p.spec)?);
    }
    let input_batch = stack_patches(&inputs);
    let target_batch = stack_patches(&targets);

    let mut tape = Tape::new();
    let enc = model.encoder.bind(&mut tape, false);
    let dec = model.decoder.bind(&mut tape, train);
    let x = tape.leaf(input_batch);
    let t = tape.leaf(target_batch);
    let pyr_in = enc.forward(&mut tape, x)?;
    let pyr_tgt = enc.forward(&mut tape, t)?;
    let translated = adain(&mut tape, pyr_in.top(), pyr_tgt.top())?;
    let pred = dec.forward(&mut tape, translated)?;
    let pyr_pred = enc.forward(&mut tape, pred)?;
    let loss = losses::phase2_total(
        &mut tape,
        pred,
        x,
        &pyr_pred,
        &pyr_tgt,
        translated,
        &config.weights,
    )?;
    let vals = [
        tape.scalar_value(loss.total),
        tape.scalar_value(loss.content),
        tape.scalar_value(loss.style),
        tape.scalar_value(loss.consistency),
    ];
    if train {
        tape.backward(loss.total)?;
        Ok((vals, tape, Some(dec.layers)))
    } else {
        Ok((vals, tape, None))
    }
}
