//! Training loop: P x K batches, joint objective, SGD with decoupled weight
//! groups, warmup plus cosine learning-rate schedule, checkpoints and
//! ablation sweeps.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Model, ModelConfig};
use crate::data::{
    augment, load_manifest, normalize_gray, plan_batches, AugmentConfig, ImageCache, Manifest, Modality, Split,
    SyntheticDataset,
};
use crate::dfl::{orth_loss, FusionMode, HeadConfig};
use crate::error::{Error, Result};
use crate::eval::{embed_all, evaluate_protocol, Protocol, ProtocolReport};
use crate::losses::{joint_loss, smoothed_cross_entropy, weighted_triplet, LossBreakdown, LossWeights};
use crate::scl::{build_prototypes, describe, struct_loss};
use crate::tensor::{read_container, write_container, BoundParams, Container, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity in a batch, half optical and half SAR.
    pub k: usize,
    pub seed: u64,
    pub scl_on: bool,
    pub dfl_on: bool,
    pub fusion: FusionMode,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 0.05,
            weight_decay: 1e-4,
            momentum: 0.0,
            epochs: 30,
            warmup_epochs: 3,
            p: 4,
            k: 4,
            seed: 0,
            scl_on: true,
            dfl_on: true,
            fusion: FusionMode::Additive,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            model: ModelConfig::desk(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr_base >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config("lr_base and weight_decay must be >= 0, momentum in [0, 1)".into()));
        }
        if self.p == 0 || self.k == 0 || !self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("need P >= 1 and even K, got P={} K={}", self.p, self.k)));
        }
        Ok(())
    }

    pub fn heads(&self) -> HeadConfig {
        HeadConfig {
            dfl_on: self.dfl_on,
            fusion: self.fusion,
        }
    }

    /// Loss weights with switched-off modules zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_orth: if self.dfl_on { self.loss.lambda_orth } else { 0.0 },
            lambda_struct: if self.scl_on { self.loss.lambda_struct } else { 0.0 },
            ..self.loss
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Linear warmup from `lr_base / 100` to `lr_base`, then cosine decay back
/// to `lr_base / 100` at the final epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let base = cfg.lr_base;
    let floor = base / 100.0;
    if epoch < cfg.warmup_epochs {
        return floor + (base - floor) * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let span = cfg.epochs.saturating_sub(1).saturating_sub(cfg.warmup_epochs);
    if span == 0 {
        return base;
    }
    let t = ((epoch - cfg.warmup_epochs) as f64 / span as f64).min(1.0);
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Forward pass and joint objective for one batch.
///
/// With `scl_on = false` the structural branch is not built at all; with DFL
/// off the model has no decoupling heads and the orthogonality term is 0.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective<'t, T: Scalar>(
    model: &Model<T>,
    p: &BoundParams<'t, T>,
    images: Var<'t, T>,
    labels: &[usize],
    modality: &[Modality],
    weights: &LossWeights,
    scl_on: bool,
) -> Result<(Var<'t, T>, LossBreakdown)> {
    let tape = images.tape();
    let out = model.forward(p, images, modality)?;
    let mut weights = *weights;
    let l_struct = if scl_on {
        let desc = describe(out.grid)?;
        let pairs = build_prototypes(desc.f_hat, labels, modality)?;
        struct_loss(tape, &pairs)?
    } else {
        weights.lambda_struct = 0.0;
        tape.scalar(T::zero())
    };
    let l_orth = match (out.shared, out.specific) {
        (Some(sh), Some(sp)) => orth_loss(sh, sp)?,
        _ => {
            weights.lambda_orth = 0.0;
            tape.scalar(T::zero())
        }
    };
    let logits = model.logits(p, out.feature)?;
    let l_ce = smoothed_cross_entropy(logits, labels, weights.label_smoothing)?;
    let l_tri = weighted_triplet(out.feature, labels)?;
    joint_loss(l_ce, l_tri, l_orth, l_struct, &weights)
}

/// Plain SGD with optional momentum; weight decay only on [`Model::decays`] parameters.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `w -= lr * (g + wd * w)` (the bracket replaced by the velocity when
    /// momentum is on).
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        }
        let lr = T::from_f64_lossy(lr);
        let mu = T::from_f64_lossy(self.momentum);
        for (param, vel) in params.iter_mut().zip(&mut self.velocity) {
            let wd = if Model::<T>::decays(&param.name) {
                T::from_f64_lossy(self.weight_decay)
            } else {
                T::zero()
            };
            let grad = param.tensor.grad().map(<[T]>::to_vec);
            let data = param.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + wd * data[i];
                let step = if self.momentum > 0.0 {
                    vel[i] = mu * vel[i] + g;
                    vel[i]
                } else {
                    g
                };
                data[i] -= lr * step;
            }
        }
    }
}

/// One optimisation step on a batch; returns the loss breakdown.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    images: &Tensor<T>,
    labels: &[usize],
    modality: &[Modality],
    weights: &LossWeights,
    scl_on: bool,
    lr: f64,
) -> Result<LossBreakdown> {
    model.params.zero_grad();
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let (loss, breakdown) = joint_objective(model, &bound, tape.constant(images), labels, modality, weights, scl_on)?;
    let grads = tape.backward(loss)?;
    model.params.absorb_grads(&bound, &grads)?;
    drop(bound);
    if let Some(bad) = model
        .params
        .iter()
        .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::Numeric(format!(
            "non-finite gradient for `{}` (losses: {breakdown:?})",
            bad.name
        )));
    }
    opt.step(&mut model.params, lr);
    Ok(breakdown)
}

/// Manifest plus its images, loaded once.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub manifest: Manifest,
    pub cache: ImageCache,
}

impl TrainData {
    /// Reads `<dir>/manifest.jsonl` and every referenced image.
    pub fn load(dir: &Path, height: usize, width: usize) -> Result<Self> {
        let manifest = load_manifest(&dir.join("manifest.jsonl"))?;
        let cache = ImageCache::load(dir, &manifest, height, width)?;
        Ok(Self { manifest, cache })
    }

    /// Uses in-memory synthetic images directly (same pixels as on disk).
    pub fn from_synthetic(data: &SyntheticDataset) -> Self {
        let images = data.images.iter().map(|img| normalize_gray(&img.pixels)).collect();
        Self {
            manifest: data.manifest.clone(),
            cache: ImageCache::from_images(data.config.canvas_h, data.config.canvas_w, images),
        }
    }

    /// Records of one split with their images, in manifest order.
    pub fn subset(&self, split: Split) -> (Manifest, ImageCache) {
        let idx = self.manifest.indices(split);
        let manifest = Manifest::new(idx.iter().map(|&i| self.manifest.records[i].clone()).collect());
        let images = idx.iter().map(|&i| self.cache.get(i).to_vec()).collect();
        (manifest, ImageCache::from_images(self.cache.height, self.cache.width, images))
    }

    /// Sorted distinct identities of the train split; position = class label.
    pub fn train_identities(&self) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Trained (or initial) weights with everything needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Dataset identity of each classifier row.
    pub identities: Vec<usize>,
    /// Epochs completed.
    pub epoch: usize,
    pub params: Vec<(String, Tensor<f32>)>,
}

const CHECKPOINT_KIND: &str = "shipreid-checkpoint";

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, config: &TrainConfig, identities: &[usize], epoch: usize) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            identities: identities.to_vec(),
            epoch,
            params: model.params.iter().map(|p| (p.name.clone(), p.tensor.clone().with_requires_grad(false))).collect(),
        }
    }

    pub fn to_container(&self) -> Container {
        let ids: Vec<String> = self.identities.iter().map(|i| i.to_string()).collect();
        Container {
            meta: vec![
                ("kind".into(), CHECKPOINT_KIND.into()),
                ("epoch".into(), self.epoch.to_string()),
                // Sampler and augmentation streams are derived from (seed, epoch).
                ("rng_seed".into(), self.config.seed.to_string()),
                ("rng_next_epoch".into(), self.epoch.to_string()),
                ("identities".into(), ids.join(",")),
                ("config".into(), serde_json::to_string(&self.config).expect("config serialises")),
            ],
            tensors: self.params.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta_value("kind") != Some(CHECKPOINT_KIND) {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let field = |k: &str| c.meta_value(k).ok_or_else(|| Error::Format(format!("missing `{k}`")));
        let epoch = field("epoch")?
            .parse()
            .map_err(|_| Error::Format("bad epoch".into()))?;
        let identities = field("identities")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad identity `{s}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let config: TrainConfig = serde_json::from_str(field("config")?)?;
        Ok(Self {
            config,
            identities,
            epoch,
            params: c.tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_container(&mut out, &self.to_container()).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(read_container(bytes)?)
    }

    /// Writes the container, plus `model.toml` (the model config as plain
    /// key = value lines) in the same directory.
    pub fn save(&self, path: &Path) -> Result<Vec<PathBuf>> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let cfg_path = path.with_file_name("model.toml");
        let text = toml::to_string(&self.config.model).expect("model config serialises");
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(vec![path.to_path_buf(), cfg_path])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and copies the stored weights into it.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model.clone(), self.config.heads(), self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            let param = model
                .params
                .by_name_mut(name)
                .ok_or_else(|| Error::Dimension(format!("unexpected tensor `{name}`")))?;
            if param.tensor.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "`{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    param.tensor.shape()
                )));
            }
            param.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model<f32>,
    /// JSON-lines log: one record per step and one per epoch.
    pub log: Vec<String>,
    /// Mean total loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Files written under the output directory.
    pub files: Vec<PathBuf>,
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + purpose);
    rng
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
        Error::Usage(m) => Error::Usage(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        Error::Validation(m) => Error::Validation(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Trains from scratch on the train split. When `out` is given, the log,
/// periodic checkpoints and the final checkpoint are written there.
pub fn run_training(cfg: &TrainConfig, data: &TrainData, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let identities = data.train_identities();
    if identities.is_empty() {
        return Err(Error::Validation("manifest has no training records".into()));
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_identities = identities.len();
    if (data.cache.height, data.cache.width) != (model_cfg.image_h, model_cfg.image_w) {
        return Err(Error::Dimension(format!(
            "images are {}x{} but the model expects {}x{}",
            data.cache.height, data.cache.width, model_cfg.image_h, model_cfg.image_w
        )));
    }
    let mut model = Model::<f32>::new(model_cfg, cfg.heads(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let weights = cfg.effective_weights();
    let (h, w, ch) = (model.config.image_h, model.config.image_w, model.config.in_channels);
    let per = ch * h * w;

    let mut log = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut files = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let ctx = format!("epoch {}", epoch + 1);
        let plan = plan_batches(&data.manifest, cfg.p, cfg.k, &mut epoch_rng(cfg.seed, epoch, 0))
            .map_err(|e| with_context(e, &ctx))?;
        let mut aug_rng = epoch_rng(cfg.seed, epoch, 1);
        let mut totals = Vec::with_capacity(plan.batches.len());
        for batch in &plan.batches {
            let mut pixels = Vec::with_capacity(batch.len() * per);
            for &i in batch {
                pixels.extend(augment(data.cache.get(i), h, w, &cfg.augment, &mut aug_rng));
            }
            let images = Tensor::new(&[batch.len(), ch, h, w], pixels)?;
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| {
                    identities
                        .binary_search(&data.manifest.records[i].identity)
                        .expect("train identity")
                })
                .collect();
            let modality: Vec<Modality> = batch.iter().map(|&i| data.manifest.records[i].modality).collect();
            let bd = train_step(&mut model, &mut opt, &images, &labels, &modality, &weights, cfg.scl_on, lr)
                .map_err(|e| with_context(e, &format!("{ctx} step {}", step + 1)))?;
            totals.push(bd.total);
            log.push(
                json!({
                    "type": "step", "epoch": epoch + 1, "step": step + 1, "lr": lr,
                    "l_id": bd.l_id, "l_ce": bd.l_ce, "l_tri": bd.l_tri,
                    "l_orth": bd.l_orth, "l_struct": bd.l_struct, "total": bd.total,
                })
                .to_string(),
            );
            step += 1;
        }
        let mean = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
        epoch_loss.push(mean);
        log.push(
            json!({"type": "epoch", "epoch": epoch + 1, "lr": lr, "steps": totals.len(), "mean_total": mean})
                .to_string(),
        );
        info!("epoch {}/{}: lr {lr:.3e}, mean loss {mean:.4}", epoch + 1, cfg.epochs);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                let path = dir.join(format!("checkpoint_epoch{:03}.srck", epoch + 1));
                files.extend(Checkpoint::from_model(&model, cfg, &identities, epoch + 1).save(&path)?);
            }
        }
    }
    let checkpoint = Checkpoint::from_model(&model, cfg, &identities, cfg.epochs);
    if let Some(dir) = out {
        files.extend(checkpoint.save(&dir.join("checkpoint_final.srck"))?);
        let log_path = dir.join("train_log.jsonl");
        let mut text = log.join("\n");
        text.push('\n');
        std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
        files.push(log_path);
    }
    Ok(TrainOutcome {
        checkpoint,
        model,
        log,
        epoch_loss,
        files,
    })
}

/// Embeds the test split and scores each protocol.
pub fn evaluate(model: &Model<f32>, data: &TrainData, protocols: &[Protocol]) -> Result<Vec<ProtocolReport>> {
    let (manifest, cache) = data.subset(Split::Test);
    let emb = embed_all(model, &manifest, &cache, 64)?;
    protocols
        .iter()
        .map(|p| evaluate_protocol(&emb, &manifest, &p.spec()))
        .collect()
}

/// One configuration of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub scl_on: bool,
    pub dfl_on: bool,
    pub fusion: FusionMode,
    pub struct_layer: usize,
}

impl AblationCell {
    pub fn of(cfg: &TrainConfig) -> Self {
        Self {
            scl_on: cfg.scl_on,
            dfl_on: cfg.dfl_on,
            fusion: cfg.fusion,
            struct_layer: cfg.model.struct_layer,
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.scl_on = self.scl_on;
        cfg.dfl_on = self.dfl_on;
        cfg.fusion = self.fusion;
        cfg.model.struct_layer = self.struct_layer;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    /// Reports for every protocol, or the failure message of this cell.
    pub result: std::result::Result<Vec<ProtocolReport>, String>,
}

/// Trains and evaluates every (cell, seed) pair; a failing cell is recorded
/// and the sweep continues.
pub fn run_ablation(
    base: &TrainConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    data: &TrainData,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation grid is empty".into()));
    }
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let cfg = cell.apply(base, seed);
            let result = run_training(&cfg, data, None)
                .and_then(|o| evaluate(&o.model, data, &Protocol::ALL))
                .map_err(|e| e.to_string());
            if let Err(msg) = &result {
                log::warn!("ablation cell {cell:?} seed {seed} failed: {msg}");
            }
            rows.push(AblationRow { cell: *cell, seed, result });
        }
    }
    Ok(rows)
}

/// CSV with one row per (cell, seed): module switches, then mAP / Rank-1
/// per protocol and the cross-modal mean.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "scl_on,dfl_on,fusion,struct_layer,seed,status,all_mAP,all_rank1,opt2sar_mAP,opt2sar_rank1,sar2opt_mAP,sar2opt_rank1,cross_mAP\n",
    );
    for r in rows {
        let c = r.cell;
        out.push_str(&format!("{},{},{},{},{},", c.scl_on, c.dfl_on, c.fusion, c.struct_layer, r.seed));
        match &r.result {
            Ok(reports) => {
                out.push_str("ok");
                for p in Protocol::ALL {
                    match reports.iter().find(|x| x.protocol == p) {
                        Some(x) => out.push_str(&format!(",{:.6},{:.6}", x.map, x.rank1)),
                        None => out.push_str(",,"),
                    }
                }
                match crate::eval::cross_modal_map(reports) {
                    Some(v) => out.push_str(&format!(",{v:.6}\n")),
                    None => out.push_str(",\n"),
                }
            }
            Err(msg) => out.push_str(&format!("failed: {},,,,,,,\n", msg.replace([',', '\n'], ";"))),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            lr_base: 5e-4,
            epochs: 100,
            warmup_epochs: 10,
            ..TrainConfig::default()
        };
        assert!((lr_schedule(0, &cfg) - 5e-6).abs() < 1e-18);
        assert_eq!(lr_schedule(10, &cfg), 5e-4);
        assert!((lr_schedule(99, &cfg) - 5e-6).abs() < 1e-12);
        for e in 1..100 {
            if e <= 10 {
                assert!(lr_schedule(e, &cfg) >= lr_schedule(e - 1, &cfg));
            } else {
                assert!(lr_schedule(e, &cfg) <= lr_schedule(e - 1, &cfg));
            }
        }
    }

    #[test]
    fn config_toml_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let err = TrainConfig::from_toml("lr_bass = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lr_bass"));
        let bad = TrainConfig {
            warmup_epochs: 30,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn effective_weights_follow_switches() {
        let cfg = TrainConfig {
            scl_on: false,
            dfl_on: false,
            ..TrainConfig::default()
        };
        let w = cfg.effective_weights();
        assert_eq!((w.lambda_orth, w.lambda_struct), (0.0, 0.0));
    }
}
