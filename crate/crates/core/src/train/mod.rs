//! Optimization loop, augmentation, instance ordering and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::Dataset;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Scores};
use crate::geometry::{indicator, polygon_area, PointMode};
use crate::model::{Bound, LossOptions, ModelConfig, TransmissionPolicy, Weights};
use crate::pipeline::evaluate_weights;
use crate::seqcodec::{build_ordered, to_npts, usable_instances, BuildConfig, EncodedSample, TextInstance, Vocab};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, Transform};
pub use checkpoint::Checkpoint;
pub use optim::{AdamW, Schedule};

/// Loss above this multiple of the first step's loss counts toward divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive diverging steps before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderPolicy {
    /// Fresh shuffle for every epoch and augmented copy.
    #[default]
    Random,
    /// Largest polygon first.
    Area,
    /// By indicator y, then x.
    Topdown,
    /// By indicator distance from the image origin.
    Dist2ori,
}

impl std::str::FromStr for OrderPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "area" => Ok(Self::Area),
            "topdown" => Ok(Self::Topdown),
            "dist2ori" => Ok(Self::Dist2ori),
            o => Err(format!("unknown order policy `{}` (random|area|topdown|dist2ori)", o)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    /// Augment each image at all.
    pub augment: bool,
    /// Two independent augmentations per image per step.
    pub dual_augment: bool,
    pub augmentation: AugmentConfig,
    pub order: OrderPolicy,
    /// Overrides the model's transmission policy when set.
    pub transmission: Option<TransmissionPolicy>,
    /// Overrides the model's decoder sharing when set.
    pub share_decoder: Option<bool>,
    pub mask_pad: bool,
    pub point_mode: PointMode,
    pub npts: bool,
    /// Evaluate every this many epochs when an eval set is given; 0 disables.
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: Schedule::default(),
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            dual_augment: true,
            augmentation: AugmentConfig::default(),
            order: OrderPolicy::Random,
            transmission: None,
            share_decoder: None,
            mask_pad: false,
            point_mode: PointMode::Central,
            npts: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.peak > 0.0 && self.lr.floor >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let a = &self.augmentation;
        if !(a.scale[0] > 0.0 && a.scale[0] <= a.scale[1] && a.rotation >= 0.0) {
            return Err(Error::Config("augmentation ranges".into()));
        }
        Ok(())
    }

    /// Model configuration with this run's overrides applied.
    pub fn resolve_model(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if let Some(t) = self.transmission {
            m.transmission = t;
        }
        if let Some(s) = self.share_decoder {
            m.share_decoder = s;
        }
        m
    }

    pub fn copies(&self) -> usize {
        if self.augment && self.dual_augment {
            2
        } else {
            1
        }
    }
}

/// SplitMix64 finalizer over a running state, for deriving per-use seeds.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TAG_EPOCH: u64 = 1;
const TAG_AUG: u64 = 2;
const TAG_ORDER: u64 = 3;

/// Order over the usable instances (indices into [`usable_instances`]).
pub fn instance_order(
    instances: &[TextInstance],
    usable: &[(usize, String)],
    policy: OrderPolicy,
    point_mode: PointMode,
    seed: u64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let point = |u: usize| {
        let orig = usable[u].0;
        indicator(&instances[orig].polygon, point_mode, seed.wrapping_add(orig as u64))
    };
    match policy {
        OrderPolicy::Random => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        OrderPolicy::Area => {
            let area: Vec<f64> = usable.iter().map(|(o, _)| polygon_area(&instances[*o].polygon)).collect();
            order.sort_by(|&a, &b| area[b].total_cmp(&area[a]));
        }
        OrderPolicy::Topdown => {
            let pts: Vec<_> = (0..usable.len()).map(point).collect();
            order.sort_by(|&a, &b| pts[a][1].total_cmp(&pts[b][1]).then(pts[a][0].total_cmp(&pts[b][0])));
        }
        OrderPolicy::Dist2ori => {
            let d: Vec<f64> = (0..usable.len()).map(|u| point(u)).map(|p| p[0].hypot(p[1])).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        }
    }
    order
}

/// Training sequence for one (possibly augmented) example, or `None` when it
/// has nothing to supervise.
pub fn encode_example(
    instances: &[TextInstance],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Option<EncodedSample>> {
    let vocab: Vocab = model.vocab();
    let usable = usable_instances(instances, &vocab);
    if usable.is_empty() {
        return Ok(None);
    }
    let order = instance_order(instances, &usable, cfg.order, cfg.point_mode, seed);
    let bc = BuildConfig {
        point_mode: cfg.point_mode,
        max_chars: model.max_chars,
        max_instances: model.max_instances,
        image_side: model.image_side as f64,
        n_bins: model.n_bins,
    };
    let mut s = build_ordered(instances, &vocab, &bc, &order, seed)?;
    if cfg.npts {
        to_npts(&mut s, &vocab);
    }
    Ok(Some(s))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    /// Mean over supervised examples; 0 when none.
    pub loss: f64,
    pub iad_loss: f64,
    pub prd_loss: f64,
    pub lr: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Scores>,
}

pub struct EvalSet<'a> {
    pub data: &'a Dataset,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub eval: Option<EvalSet<'a>>,
    /// Checkpoints and `metrics.jsonl` go here.
    pub out_dir: Option<PathBuf>,
    /// Stop after this global step even if epochs remain.
    pub max_steps: Option<u64>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub weights: Weights<f32>,
    pub opt: AdamW,
    pub step: u64,
    first_loss: Option<f64>,
    diverging: usize,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.resolve_model(model);
        let weights = Weights::init(&model, cfg.seed)?;
        let params: Vec<Tensor<f32>> = weights.store.iter().map(|(_, _, t)| t.clone()).collect();
        let decay = weights.store.iter().map(|(_, _, t)| t.rank() >= 2).collect();
        let opt = AdamW::new(&params, decay, cfg.weight_decay as f32);
        Ok(Self { cfg, weights, opt, step: 0, first_loss: None, diverging: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let cfg = ck.train.ok_or_else(|| Error::checkpoint("train", "checkpoint has no training state"))?;
        let opt = ck.optimizer.ok_or_else(|| Error::checkpoint("optimizer", "checkpoint has no optimizer state"))?;
        Ok(Self { cfg, weights: ck.weights, opt, step: ck.step, first_loss: None, diverging: 0 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            weights: self.weights.clone(),
            train: Some(self.cfg.clone()),
            optimizer: Some(self.opt.clone()),
            step: self.step,
            seed: self.cfg.seed,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.cfg.epochs * self.steps_per_epoch(n)) as u64
    }

    /// Dataset indices of the batch at global step `step`.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(n).max(1);
        let epoch = step as usize / spe;
        let within = step as usize % spe;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, &[TAG_EPOCH, epoch as u64])));
        let b = self.cfg.batch_size;
        perm[within * b..((within + 1) * b).min(n)].to_vec()
    }

    /// Per-copy augmentation and ordering seeds for dataset item `idx` at `epoch`.
    pub fn example_seeds(&self, epoch: usize, idx: usize, copy: usize) -> (u64, u64) {
        let key = [epoch as u64, idx as u64, copy as u64];
        let s = self.cfg.seed;
        (mix(s, &[TAG_AUG, key[0], key[1], key[2]]), mix(s, &[TAG_ORDER, key[0], key[1], key[2]]))
    }

    pub fn epoch_of(&self, n: usize, step: u64) -> usize {
        step as usize / self.steps_per_epoch(n).max(1)
    }

    /// One optimization step on the batch for the current global step.
    pub fn step(&mut self, data: &Dataset) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let n = data.len();
        let epoch = self.epoch_of(n, self.step);
        let lr = self.cfg.lr.lr(self.step as usize, self.total_steps(n) as usize);
        let opts = LossOptions { mask_pad: self.cfg.mask_pad, ..Default::default() };
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; self.weights.store.len()];
        let (mut loss, mut iad, mut prd, mut count) = (0.0, 0.0, 0.0, 0usize);
        for idx in self.batch_indices(n, self.step) {
            let s = &data.samples[idx];
            for copy in 0..self.cfg.copies() {
                let (aug_seed, order_seed) = self.example_seeds(epoch, idx, copy);
                let (image, instances) = if self.cfg.augment {
                    augment(&s.image, &s.instances, &self.cfg.augmentation, aug_seed)
                } else {
                    (s.image.clone(), s.instances.clone())
                };
                let Some(sample) = encode_example(&instances, &self.weights.config, &self.cfg, order_seed)? else {
                    log::debug!("{}: no supervisable instances, skipped", s.name);
                    continue;
                };
                let mut g = Graph::<f32>::new();
                let p = Bound::trainable(&mut g, &self.weights.store);
                let out = self.weights.forward_train(&mut g, &p, &image, &sample, opts)?;
                let gr = g.backward(out.loss)?;
                for (slot, &v) in grads.iter_mut().zip(p.vars()) {
                    if let Some(t) = gr.get(v) {
                        match slot {
                            Some(acc) => acc.add_assign(t),
                            None => *slot = Some(t.clone()),
                        }
                    }
                }
                loss += g.value(out.loss).data()[0] as f64;
                iad += g.value(out.iad_loss).data()[0] as f64;
                prd += g.value(out.prd_loss).data()[0] as f64;
                count += 1;
            }
        }
        if count > 0 {
            let inv = 1.0 / count as f32;
            grads.iter_mut().flatten().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
            self.opt.step(self.weights.store.tensors_mut(), &grads, lr as f32);
            let c = count as f64;
            (loss, iad, prd) = (loss / c, iad / c, prd / c);
            self.watch_divergence(loss)?;
        }
        let stats = StepStats { step: self.step, epoch, loss, iad_loss: iad, prd_loss: prd, lr, examples: count };
        self.step += 1;
        Ok(stats)
    }

    fn watch_divergence(&mut self, loss: f64) -> Result<()> {
        let first = *self.first_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * first {
            self.diverging += 1;
            if self.diverging >= DIVERGENCE_PATIENCE {
                return Err(Error::Training(format!(
                    "loss {:.4} above {}x the initial {:.4} for {} consecutive steps",
                    loss, DIVERGENCE_FACTOR, first, self.diverging
                )));
            }
        } else {
            self.diverging = 0;
        }
        Ok(())
    }

    /// Run to the configured epoch count (or `max_steps`), evaluating and
    /// checkpointing as configured. Returns every step's stats.
    pub fn fit(&mut self, data: &Dataset, opts: &FitOptions<'_>) -> Result<Vec<StepStats>> {
        let n = data.len();
        let spe = self.steps_per_epoch(n) as u64;
        let total = opts.max_steps.map_or(self.total_steps(n), |m| m.min(self.total_steps(n)));
        let mut metrics = match &opts.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                // A fresh run starts a fresh log; a resumed one continues it.
                let fresh = self.step == 0;
                let f = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(fresh)
                    .append(!fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut all = Vec::new();
        let mut epoch_loss = (0.0, 0usize);
        while self.step < total {
            let st = self.step(data)?;
            log::debug!("step {} epoch {} loss {:.5} lr {:.2e}", st.step, st.epoch, st.loss, st.lr);
            if st.examples > 0 {
                epoch_loss.0 += st.loss;
                epoch_loss.1 += 1;
            }
            let epoch_done = self.step % spe == 0 || self.step == total;
            if epoch_done {
                let epoch = st.epoch + 1;
                let want_eval = self.cfg.eval_every > 0 && (epoch % self.cfg.eval_every == 0 || self.step == total);
                let eval = match (&opts.eval, want_eval) {
                    (Some(es), true) => {
                        let report = evaluate_weights(&self.weights, es.data, &es.decode, &es.eval)?.0;
                        log::info!("epoch {} eval hmean {:.4}", epoch, report.hmean);
                        Some(Scores { precision: report.precision, recall: report.recall, hmean: report.hmean })
                    }
                    _ => None,
                };
                let rec = EpochRecord {
                    epoch,
                    step: self.step,
                    loss: if epoch_loss.1 > 0 { epoch_loss.0 / epoch_loss.1 as f64 } else { 0.0 },
                    lr: st.lr,
                    eval,
                };
                log::info!("epoch {} step {} loss {:.5} lr {:.2e}", rec.epoch, rec.step, rec.loss, rec.lr);
                epoch_loss = (0.0, 0);
                if let Some((f, path)) = metrics.as_mut() {
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    writeln!(f, "{}", line).map_err(|e| Error::io(path.as_path(), e))?;
                }
                if let Some(dir) = &opts.out_dir {
                    if self.cfg.checkpoint_every > 0 && epoch % self.cfg.checkpoint_every == 0 {
                        checkpoint::save(&self.checkpoint(), &dir.join(format!("epoch-{:04}", epoch)))?;
                    }
                }
            }
            all.push(st);
        }
        if let Some(dir) = &opts.out_dir {
            checkpoint::save(&self.checkpoint(), &dir.join("final"))?;
        }
        Ok(all)
    }
}

/// Directory of the final checkpoint written by [`Trainer::fit`].
pub fn final_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("final")
}
