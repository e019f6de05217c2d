//! Alternating adversarial optimization, checkpoints, whole-volume
//! prediction and participant-level cross-validation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data_pipeline::{
    aggregate_patches, augment_sample, crop_at, normalize_to_signed_unit, plan_patch_layout, CropSpec, FoldSplit,
    PatchLayout, Sample, SamplePair, StudyLoader, StudyRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, fmt_metric, summarize, MetricReport, MetricSummary};
use crate::models::{Discriminator, DiscriminatorConfig, DiscriminatorVariant, Generator, GeneratorConfig};
use crate::nn::Mode;
use crate::objectives::{
    class_cross_entropy_logits, gan_discriminator_loss_logits, generator_adversarial_logits, l1_term, GeneratorMode,
    LossWeights,
};
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::params::{Entry, EntryKind};
use crate::tensor::{Element, Tensor};
use crate::time_conditioning::{class_from_time_lag, normalize_time_lag, time_seed, ClassLabel, TimeLag};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    GtGan,
    DtGan,
    Acgan,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Unet, Arch::GtGan, Arch::DtGan, Arch::Acgan];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::GtGan => "gt_gan",
            Arch::DtGan => "dt_gan",
            Arch::Acgan => "acgan",
        }
    }

    pub fn discriminator(self) -> Option<DiscriminatorVariant> {
        match self {
            Arch::Unet => None,
            Arch::GtGan => Some(DiscriminatorVariant::Plain),
            Arch::DtGan => Some(DiscriminatorVariant::TimeConditioned),
            Arch::Acgan => Some(DiscriminatorVariant::Acgan),
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Arch::Unet => 7e-5,
            _ => 2e-4,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown arch {s:?} (valid: {})",
                Arch::ALL.map(Arch::name).join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub batch_size: usize,
    pub epochs_const: usize,
    pub epochs_decay: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub generator_mode: GeneratorMode,
    /// Number of whole-year classes for the auxiliary classifier.
    pub n_classes: usize,
    /// Random rotation and scaling of every training item.
    pub augment: bool,
    /// Assemble batches on a helper thread. Results are identical either way.
    pub prefetch: bool,
    /// Stop after this many optimizer steps, finishing with validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn paper_scale(arch: Arch) -> Self {
        TrainConfig {
            arch,
            batch_size: 3,
            epochs_const: 150,
            epochs_decay: 50,
            lr_g: arch.default_lr(),
            lr_d: arch.default_lr(),
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 7e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            generator_mode: GeneratorMode::NonSaturating,
            n_classes: 5,
            augment: true,
            prefetch: false,
            max_steps: None,
        }
    }

    pub fn desk_scale(arch: Arch) -> Self {
        TrainConfig {
            epochs_const: 20,
            epochs_decay: 10,
            ..Self::paper_scale(arch)
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_const + self.epochs_decay
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0) || !(self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.total_epochs() == 0 || self.epochs_const == 0 && self.epochs_decay == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        self.adam().validate()?;
        self.loss_weights.validate()
    }
}

/// Constant for the first `epochs_const` epochs, then linear decay reaching
/// exactly zero at the last epoch. Epochs are 1-based.
pub fn lr_at_epoch(e: usize, base_lr: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs();
    if e < 1 || e > total {
        return Err(Error::invalid(format!("epoch {e} outside 1..={total}")));
    }
    if e <= cfg.epochs_const {
        return Ok(base_lr);
    }
    let into = (e - cfg.epochs_const) as f64;
    Ok(base_lr * (1.0 - into / cfg.epochs_decay as f64))
}

/// Network architecture for every arch; the discriminator variant is
/// taken from the arch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn desk_scale() -> Self {
        ModelConfig {
            generator: GeneratorConfig::desk_scale(),
            discriminator: DiscriminatorConfig::desk_scale(DiscriminatorVariant::Plain),
        }
    }

    pub fn paper_scale() -> Self {
        ModelConfig {
            generator: GeneratorConfig::paper_scale(),
            discriminator: DiscriminatorConfig::paper_scale(DiscriminatorVariant::Plain),
        }
    }

    pub fn patch_side(&self) -> usize {
        self.generator.patch_side
    }

    fn discriminator_for(&self, arch: Arch, n_classes: usize) -> Option<DiscriminatorConfig> {
        arch.discriminator().map(|variant| DiscriminatorConfig {
            variant,
            n_classes,
            patch_side: self.generator.patch_side,
            ..self.discriminator.clone()
        })
    }
}

/// Generator plus the discriminator of adversarial archs.
#[derive(Clone, Debug)]
pub struct ModelBundle<T: Element> {
    pub arch: Arch,
    pub generator: Generator<T>,
    pub discriminator: Option<Discriminator<T>>,
}

impl<T: Element> ModelBundle<T> {
    pub fn new(arch: Arch, cfg: &ModelConfig, n_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(cfg.generator.clone(), &mut rng)?;
        let discriminator = match cfg.discriminator_for(arch, n_classes) {
            Some(dc) => Some(Discriminator::new(dc, &mut rng)?),
            None => None,
        };
        Ok(ModelBundle {
            arch,
            generator,
            discriminator,
        })
    }
}

/// Patches of several samples stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct Batch<T: Element> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub lags: Vec<TimeLag>,
    pub classes: Vec<ClassLabel>,
}

impl<T: Element> Batch<T> {
    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }
}

fn volume_to_tensor<T: Element>(vols: &[&Volume]) -> Result<Tensor<T>> {
    let shape = vols[0].shape();
    let mut data = Vec::with_capacity(vols.len() * vols[0].len());
    for v in vols {
        if v.shape() != shape {
            return Err(Error::shape("channel volumes differ in shape"));
        }
        data.extend(v.data().iter().map(|&x| T::lit(x as f64)));
    }
    Tensor::from_vec(&[1, vols.len(), shape[0], shape[1], shape[2]], data)
}

fn tensor_to_volume<T: Element>(t: &Tensor<T>, spacing: [f64; 3]) -> Result<Volume> {
    let s = t.shape();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 {
        return Err(Error::shape(format!("expected [1, 1, X, Y, Z], got {:?}", s)));
    }
    let data = t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
    Volume::new([s[2], s[3], s[4]], spacing, data)
}

/// Source and target patches of one sample at one patch origin.
pub fn sample_patch<T: Element>(s: &Sample, origin: [usize; 3], patch: [usize; 3]) -> Result<(Tensor<T>, Tensor<T>)> {
    let src: Vec<Volume> = s.source.iter().map(|v| crop_at(v, origin, patch)).collect::<Result<_>>()?;
    let tgt = crop_at(&s.target, origin, patch)?;
    Ok((volume_to_tensor(&src.iter().collect::<Vec<_>>())?, volume_to_tensor(&[&tgt])?))
}

pub fn make_batch<T: Element>(items: &[(&Sample, [usize; 3])], patch: [usize; 3], n_classes: Option<usize>) -> Result<Batch<T>> {
    let mut sources = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    let mut lags = Vec::with_capacity(items.len());
    let mut classes = Vec::new();
    for (s, origin) in items {
        let (x, y) = sample_patch(s, *origin, patch)?;
        sources.push(x);
        targets.push(y);
        lags.push(s.time_lag());
        if let Some(k) = n_classes {
            classes.push(match s.class_label {
                Some(c) => c,
                None => class_from_time_lag(s.time_lag_days, k)?,
            });
        }
    }
    Ok(Batch {
        source: Tensor::stack(&sources)?,
        target: Tensor::stack(&targets)?,
        lags,
        classes,
    })
}

/// Loss components of one optimizer step.
pub type StepRecord = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Cumulative optimizer steps.
    pub steps: usize,
    /// Passes over all patches (this trainer's epoch).
    pub patch_epochs: usize,
    /// The same progress counted as single-patch-per-volume passes.
    pub volume_epochs: usize,
    /// Mean of each loss component over the epoch's steps.
    pub train: BTreeMap<String, f64>,
    /// Whole-volume L1 on aggregated validation predictions.
    pub val_l1: Option<f64>,
}

fn scalar<T: Element>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

fn check_finite(v: f64, epoch: usize, batch: usize, component: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            batch,
            component: component.to_string(),
        })
    }
}

/// Assembles one batch; augmentation randomness is keyed by epoch and item
/// so batches do not depend on which thread builds them.
fn build_batch<T: Element>(
    cfg: &TrainConfig,
    n_classes: Option<usize>,
    samples: &[Sample],
    layout: &PatchLayout,
    chunk: &[(usize, usize)],
    epoch: usize,
    first_item: usize,
) -> Result<Batch<T>> {
    let origins = layout.origins();
    let augmented: Vec<Sample> = chunk
        .iter()
        .enumerate()
        .map(|(i, &(s, _))| {
            if cfg.augment {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((epoch as u64) << 32) | (first_item + i) as u64 | 1 << 63);
                augment_sample(&samples[s], &mut rng)
            } else {
                samples[s].clone()
            }
        })
        .collect();
    let items: Vec<(&Sample, [usize; 3])> = augmented.iter().zip(chunk).map(|(s, &(_, p))| (s, origins[p])).collect();
    make_batch(&items, layout.patch_shape, n_classes)
}

pub struct Trainer<T: Element> {
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    crop: CropSpec,
    bundle: ModelBundle<T>,
    opt_g: Adam<T>,
    opt_d: Option<Adam<T>>,
    epoch: usize,
    steps: usize,
    rng: ChaCha8Rng,
    fold: Option<usize>,
}

impl<T: Element> Trainer<T> {
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig, crop: CropSpec) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::new(cfg.arch, &model_cfg, cfg.n_classes, cfg.seed)?;
        let opt_g = Adam::new(cfg.adam(), bundle.generator.store());
        let opt_d = bundle.discriminator.as_ref().map(|d| Adam::new(cfg.adam(), d.store()));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            cfg,
            model_cfg,
            crop,
            bundle,
            opt_g,
            opt_d,
            epoch: 0,
            steps: 0,
            rng,
            fold: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn crop(&self) -> &CropSpec {
        &self.crop
    }

    pub fn bundle(&self) -> &ModelBundle<T> {
        &self.bundle
    }

    pub fn bundle_mut(&mut self) -> &mut ModelBundle<T> {
        &mut self.bundle
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set_fold(&mut self, fold: Option<usize>) {
        self.fold = fold;
    }

    fn n_classes(&self) -> Option<usize> {
        (self.cfg.arch == Arch::Acgan).then_some(self.cfg.n_classes)
    }

    /// One D update (GAN archs) followed by one G update.
    pub fn train_step(&mut self, batch: &Batch<T>, epoch: usize, batch_index: usize) -> Result<StepRecord> {
        let lr_g = lr_at_epoch(epoch, self.cfg.lr_g, &self.cfg)?;
        let lr_d = lr_at_epoch(epoch, self.cfg.lr_d, &self.cfg)?;
        let w = self.cfg.loss_weights.clone();
        let mut rec = StepRecord::new();
        let seed_t: Tensor<T> = time_seed(&batch.lags);

        let mut g = Graph::new();
        let x = g.constant(batch.source.clone());
        let y = g.constant(batch.target.clone());
        let seed = g.constant(seed_t.clone());
        let fake = self.bundle.generator.forward(&mut g, x, seed, Mode::TRAIN)?;
        let g_l1 = l1_term(&mut g, fake, y)?;

        let Some(disc) = self.bundle.discriminator.as_mut() else {
            let v = scalar(&g, g_l1);
            check_finite(v, epoch, batch_index, "g_l1")?;
            rec.insert("g_l1".into(), v);
            let grads = g.backward(g_l1).for_store(&g, self.bundle.generator.store());
            self.opt_g.step(self.bundle.generator.store_mut(), &grads, lr_g)?;
            self.steps += 1;
            return Ok(rec);
        };
        let time_d = disc.config().variant == DiscriminatorVariant::TimeConditioned;
        let acgan = disc.config().variant == DiscriminatorVariant::Acgan;

        // discriminator update on the real pair and a detached fake
        {
            let mut gd = Graph::new();
            let x = gd.constant(batch.source.clone());
            let real = gd.constant(batch.target.clone());
            let fake_c = gd.constant(g.value(fake).clone());
            let seed = time_d.then(|| gd.constant(seed_t.clone()));
            let out_r = disc.forward(&mut gd, x, real, seed, Mode::TRAIN)?;
            let out_f = disc.forward(&mut gd, x, fake_c, seed, Mode::TRAIN)?;
            let mut d_loss = gan_discriminator_loss_logits(&mut gd, out_r.logits, out_f.logits, &w)?;
            if acgan {
                let (cr, cf) = (out_r.class_logits.expect("acgan head"), out_f.class_logits.expect("acgan head"));
                let ce_r = class_cross_entropy_logits(&mut gd, cr, &batch.classes)?;
                let ce_f = class_cross_entropy_logits(&mut gd, cf, &batch.classes)?;
                rec.insert("d_cls_real".into(), scalar(&gd, ce_r));
                rec.insert("d_cls_fake".into(), scalar(&gd, ce_f));
                let ce = gd.add(ce_r, ce_f)?;
                let ce = gd.scale(ce, w.lambda_cls);
                d_loss = gd.add(d_loss, ce)?;
            }
            rec.insert("d_loss".into(), scalar(&gd, d_loss));
            for (k, v) in &rec {
                check_finite(*v, epoch, batch_index, k)?;
            }
            let grads = gd.backward(d_loss).for_store(&gd, disc.store());
            let opt_d = self.opt_d.as_mut().expect("optimizer for discriminator");
            opt_d.step(disc.store_mut(), &grads, lr_d)?;
        }

        // generator update through the frozen discriminator
        let seed_d = time_d.then(|| g.constant(seed_t.clone()));
        let out = disc.forward(&mut g, x, fake, seed_d, Mode::FROZEN)?;
        let g_adv = generator_adversarial_logits(&mut g, out.logits, self.cfg.generator_mode);
        let weighted_l1 = g.scale(g_l1, w.lambda_l1);
        let mut total = g.add(g_adv, weighted_l1)?;
        rec.insert("g_adv".into(), scalar(&g, g_adv));
        rec.insert("g_l1".into(), scalar(&g, g_l1));
        if acgan {
            let ce = class_cross_entropy_logits(&mut g, out.class_logits.expect("acgan head"), &batch.classes)?;
            rec.insert("g_cls".into(), scalar(&g, ce));
            let ce = g.scale(ce, w.lambda_cls);
            total = g.add(total, ce)?;
        }
        rec.insert("g_total".into(), scalar(&g, total));
        for (k, v) in &rec {
            check_finite(*v, epoch, batch_index, k)?;
        }
        let grads = g.backward(total).for_store(&g, self.bundle.generator.store());
        self.opt_g.step(self.bundle.generator.store_mut(), &grads, lr_g)?;
        self.steps += 1;
        Ok(rec)
    }

    /// Shuffled (sample, patch) items of one epoch.
    fn plan_epoch(&mut self, n_samples: usize, n_patches: usize) -> Vec<(usize, usize)> {
        let mut items: Vec<(usize, usize)> = (0..n_samples).flat_map(|s| (0..n_patches).map(move |p| (s, p))).collect();
        items.shuffle(&mut self.rng);
        items
    }

    /// Runs one epoch (1-based). Returns `None` when `max_steps` was already
    /// reached.
    pub fn train_epoch(&mut self, train: &[Sample], epoch: usize) -> Result<Option<BTreeMap<String, f64>>> {
        if self.cfg.max_steps.is_some_and(|m| self.steps >= m) {
            return Ok(None);
        }
        let layout = self.layout_for(train)?;
        let items = self.plan_epoch(train.len(), layout.len());
        let bs = self.cfg.batch_size;
        let n_batches = items.len().div_ceil(bs);
        let budget = self.cfg.max_steps.map_or(n_batches, |m| (m - self.steps).min(n_batches));
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut done = 0usize;
        let cfg = self.cfg.clone();
        let n_classes = self.n_classes();
        let chunk_of = |b: usize| &items[b * bs..((b + 1) * bs).min(items.len())];
        if cfg.prefetch {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch<T>>>(2);
            std::thread::scope(|scope| -> Result<()> {
                let (cfg, layout) = (&cfg, &layout);
                scope.spawn(move || {
                    for b in 0..budget {
                        let batch = build_batch(cfg, n_classes, train, layout, chunk_of(b), epoch, b * bs);
                        if tx.send(batch).is_err() {
                            break;
                        }
                    }
                });
                for b in 0..budget {
                    let batch = rx.recv().map_err(|_| Error::invalid("prefetch thread stopped early"))??;
                    let rec = self.train_step(&batch, epoch, b)?;
                    for (k, v) in rec {
                        *sums.entry(k).or_default() += v;
                    }
                    done += 1;
                }
                Ok(())
            })?;
        } else {
            for b in 0..budget {
                let batch = build_batch(&cfg, n_classes, train, &layout, chunk_of(b), epoch, b * bs)?;
                let rec = self.train_step(&batch, epoch, b)?;
                for (k, v) in rec {
                    *sums.entry(k).or_default() += v;
                }
                done += 1;
            }
        }
        for v in sums.values_mut() {
            *v /= done.max(1) as f64;
        }
        Ok(Some(sums))
    }

    fn layout_for(&self, samples: &[Sample]) -> Result<PatchLayout> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty sample split"))?;
        let p = self.model_cfg.patch_side();
        plan_patch_layout(first.shape(), [p; 3])
    }

    /// Mean whole-volume L1 of aggregated predictions.
    pub fn validation_l1(&mut self, val: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in val {
            let pred = predict_sample(&mut self.bundle.generator, s)?;
            total += pred.data().iter().zip(s.target.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
                / pred.len() as f64;
        }
        Ok(total / val.len().max(1) as f64)
    }

    /// Trains for all configured epochs (or until `max_steps`), validating
    /// after each. With an output directory, writes `metrics.jsonl` and the
    /// `best` and `final` checkpoints.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out_dir: Option<&Path>) -> Result<FitOutcome> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("training and validation splits must be non-empty"));
        }
        let overlap = train.iter().find(|t| val.iter().any(|v| v.participant_id == t.participant_id));
        if let Some(t) = overlap {
            return Err(Error::invalid(format!(
                "participant {} appears in both training and validation",
                t.participant_id
            )));
        }
        let n_patches = self.layout_for(train)?.len();
        let mut log_file = match out_dir {
            Some(d) => {
                let p = d.join("metrics.jsonl");
                Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
            }
            None => None,
        };
        let mut log = Vec::new();
        let initial = EpochRecord {
            epoch: 0,
            lr_g: 0.0,
            lr_d: 0.0,
            steps: self.steps,
            patch_epochs: 0,
            volume_epochs: 0,
            train: BTreeMap::new(),
            val_l1: Some(self.validation_l1(val)?),
        };
        let mut best = (initial.val_l1.unwrap(), 0usize);
        let mut emit = |rec: &EpochRecord, log: &mut Vec<EpochRecord>| -> Result<()> {
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(p.as_path(), e))?;
                f.flush().map_err(|e| Error::io(p.as_path(), e))?;
            }
            log.push(rec.clone());
            Ok(())
        };
        emit(&initial, &mut log)?;
        for epoch in self.epoch + 1..=self.cfg.total_epochs() {
            let Some(train_means) = self.train_epoch(train, epoch)? else {
                break;
            };
            self.epoch = epoch;
            let val_l1 = self.validation_l1(val)?;
            let rec = EpochRecord {
                epoch,
                lr_g: lr_at_epoch(epoch, self.cfg.lr_g, &self.cfg)?,
                lr_d: lr_at_epoch(epoch, self.cfg.lr_d, &self.cfg)?,
                steps: self.steps,
                patch_epochs: epoch,
                volume_epochs: epoch * n_patches,
                train: train_means,
                val_l1: Some(val_l1),
            };
            emit(&rec, &mut log)?;
            if val_l1 < best.0 {
                best = (val_l1, epoch);
                if let Some(d) = out_dir {
                    self.save_checkpoint(&d.join("best"), Some(val_l1))?;
                }
            }
        }
        if let Some(d) = out_dir {
            self.save_checkpoint(&d.join("final"), Some(best.0))?;
            if best.1 == 0 {
                self.save_checkpoint(&d.join("best"), Some(best.0))?;
            }
        }
        Ok(FitOutcome {
            log,
            best_epoch: best.1,
            best_val_l1: best.0,
        })
    }

    pub fn save_checkpoint(&self, stem: &Path, best_val_l1: Option<f64>) -> Result<()> {
        let mut blob = Vec::new();
        blob.extend_from_slice(CKPT_MAGIC);
        write_entries(&mut blob, self.bundle.generator.store().entries());
        write_moments(&mut blob, &self.opt_g.state());
        if let (Some(d), Some(o)) = (&self.bundle.discriminator, &self.opt_d) {
            write_entries(&mut blob, d.store().entries());
            write_moments(&mut blob, &o.state());
        }
        let meta = CheckpointMeta {
            format: 1,
            dtype: T::DTYPE.to_string(),
            arch: self.cfg.arch,
            train: self.cfg.clone(),
            model: self.model_cfg.clone(),
            crop: self.crop.clone(),
            epoch: self.epoch,
            steps: self.steps,
            fold: self.fold,
            rng: self.rng.clone(),
            best_val_l1,
            generator_checksum: format!("{:016x}", self.bundle.generator.store().checksum()),
            discriminator_checksum: self.bundle.discriminator.as_ref().map(|d| format!("{:016x}", d.store().checksum())),
            blob_checksum: format!("{:016x}", fnv1a(&blob)),
        };
        let bin = stem.with_extension("ckpt");
        std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
        let side = stem.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
    }

    /// Restores a trainer from `<stem>.ckpt` and `<stem>.json`.
    pub fn load_checkpoint(stem: &Path) -> Result<Self> {
        let side = stem.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.dtype != T::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {} values, expected {}", meta.dtype, T::DTYPE)));
        }
        let bin = stem.with_extension("ckpt");
        let mut bytes = Vec::new();
        File::open(&bin)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin, e))?;
        if format!("{:016x}", fnv1a(&bytes)) != meta.blob_checksum {
            return Err(Error::Format(format!("{}: checksum mismatch, file is corrupt", bin.display())));
        }
        let mut r = ByteReader::new(&bytes, &bin);
        if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(Error::Format(format!("{}: not a checkpoint", bin.display())));
        }
        let mut t = Trainer::<T>::new(meta.train.clone(), meta.model.clone(), meta.crop.clone())?;
        t.bundle.generator.store_mut().load_from(&read_entries(&mut r)?)?;
        t.opt_g.load_state(read_moments(&mut r)?)?;
        if let (Some(d), Some(o)) = (t.bundle.discriminator.as_mut(), t.opt_d.as_mut()) {
            d.store_mut().load_from(&read_entries(&mut r)?)?;
            o.load_state(read_moments(&mut r)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{}: trailing bytes", bin.display())));
        }
        if format!("{:016x}", t.bundle.generator.store().checksum()) != meta.generator_checksum {
            return Err(Error::Format(format!("{}: generator checksum mismatch", bin.display())));
        }
        t.epoch = meta.epoch;
        t.steps = meta.steps;
        t.fold = meta.fold;
        t.rng = meta.rng;
        Ok(t)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Epoch 0 holds the validation loss before training.
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_l1: f64,
}

impl FitOutcome {
    pub fn initial_val_l1(&self) -> f64 {
        self.log[0].val_l1.unwrap_or(f64::NAN)
    }

    pub fn final_val_l1(&self) -> f64 {
        self.log.last().and_then(|r| r.val_l1).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub dtype: String,
    pub arch: Arch,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub crop: CropSpec,
    pub epoch: usize,
    pub steps: usize,
    pub fold: Option<usize>,
    pub rng: ChaCha8Rng,
    pub best_val_l1: Option<f64>,
    pub generator_checksum: String,
    pub discriminator_checksum: Option<String>,
    /// Digest of the whole `.ckpt` file, optimizer moments included.
    pub blob_checksum: String,
}

const CKPT_MAGIC: &[u8] = b"LFCKPT01";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_entries<T: Element>(out: &mut Vec<u8>, entries: &[Entry<T>]) {
    put_u64(out, entries.len() as u64);
    for e in entries {
        put_u64(out, e.name.len() as u64);
        out.extend_from_slice(e.name.as_bytes());
        out.push(matches!(e.kind, EntryKind::Buffer) as u8);
        put_u64(out, e.value.shape().len() as u64);
        for &d in e.value.shape() {
            put_u64(out, d as u64);
        }
        out.extend(T::to_le_bytes_vec(e.value.data()));
    }
}

fn write_moments<T: Element>(out: &mut Vec<u8>, s: &AdamState<T>) {
    put_u64(out, s.steps);
    put_u64(out, s.m.len() as u64);
    for t in s.m.iter().chain(&s.v) {
        match t {
            Some(v) => {
                put_u64(out, v.len() as u64 + 1);
                out.extend(T::to_le_bytes_vec(v));
            }
            None => put_u64(out, 0),
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("{}: truncated checkpoint", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values<T: Element>(&mut self, n: usize) -> Result<Vec<T>> {
        let width = std::mem::size_of::<T>();
        Ok(T::from_le_bytes_slice(self.take(n * width)?))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_entries<T: Element>(r: &mut ByteReader) -> Result<Vec<Entry<T>>> {
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let kind = if r.take(1)?[0] == 1 { EntryKind::Buffer } else { EntryKind::Param };
        let ndim = r.u64()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let values = r.values::<T>(shape.iter().product())?;
        out.push(Entry {
            name,
            kind,
            value: Tensor::from_vec(&shape, values)?,
        });
    }
    Ok(out)
}

fn read_moments<T: Element>(r: &mut ByteReader) -> Result<AdamState<T>> {
    let steps = r.u64()?;
    let n = r.u64()? as usize;
    let mut all = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        let len = r.u64()? as usize;
        all.push(if len == 0 { None } else { Some(r.values::<T>(len - 1)?) });
    }
    let v = all.split_off(n);
    Ok(AdamState { steps, m: all, v })
}

/// Patchwise prediction with an arbitrary patch function, aggregated over
/// the overlap. `sources` are preprocessed volumes in channel order.
pub fn predict_patchwise<T: Element>(
    sources: &[Volume],
    patch_side: usize,
    mut f: impl FnMut(Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Volume> {
    let first = sources.first().ok_or_else(|| Error::invalid("no source volumes"))?;
    let layout = plan_patch_layout(first.shape(), [patch_side; 3])?;
    let mut patches = Vec::with_capacity(layout.len());
    for origin in layout.origins() {
        let crops: Vec<Volume> = sources.iter().map(|v| crop_at(v, origin, layout.patch_shape)).collect::<Result<_>>()?;
        let x = volume_to_tensor(&crops.iter().collect::<Vec<_>>())?;
        patches.push(tensor_to_volume(&f(x)?, first.spacing())?);
    }
    aggregate_patches(&patches, &layout)
}

/// Prediction for a preprocessed sample.
pub fn predict_sample<T: Element>(g: &mut Generator<T>, s: &Sample) -> Result<Volume> {
    let lag = s.time_lag();
    let side = g.config().patch_side;
    predict_patchwise(&s.source, side, |x| g.predict(&x, &[lag]))
}

/// Crop, normalize, predict each patch at the given lag and aggregate.
pub fn predict_volume<T: Element>(g: &mut Generator<T>, raw_sources: &[Volume], crop: &CropSpec, time_lag_days: i64) -> Result<Volume> {
    let lag = normalize_time_lag(time_lag_days)?;
    let sources: Vec<Volume> = raw_sources
        .iter()
        .map(|v| normalize_to_signed_unit(&crop.apply(v)?))
        .collect::<Result<_>>()?;
    let side = g.config().patch_side;
    predict_patchwise(&sources, side, |x| g.predict(&x, &[lag]))
}

pub fn load_samples(loader: &mut StudyLoader, pairs: &[&SamplePair]) -> Result<Vec<Sample>> {
    pairs.iter().map(|p| loader.load_sample(p)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub participants: Vec<String>,
    pub summary: MetricSummary,
    pub samples: Vec<MetricReport>,
    pub best_epoch: usize,
    pub best_val_l1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub arch: Arch,
    pub folds: Vec<FoldReport>,
    pub pooled: MetricSummary,
}

impl CrossvalReport {
    pub const CSV_HEADER: [&'static str; 8] =
        ["fold", "n", "psnr_mean", "psnr_sd", "nmse_mean", "nmse_sd", "ssim_mean", "ssim_sd"];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(Self::CSV_HEADER).map_err(err)?;
        let row = |label: String, s: &MetricSummary| {
            vec![
                label,
                s.n.to_string(),
                fmt_metric(s.psnr_db.mean),
                fmt_metric(s.psnr_db.sd),
                fmt_metric(s.nmse.mean),
                fmt_metric(s.nmse.sd),
                fmt_metric(s.ssim.mean),
                fmt_metric(s.ssim.sd),
            ]
        };
        for f in &self.folds {
            w.write_record(row(f.fold.to_string(), &f.summary)).map_err(err)?;
        }
        w.write_record(row("pooled".into(), &self.pooled)).map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    /// Writes `crossval.csv` and `crossval.json`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv_path = dir.join("crossval.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("crossval.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

/// Trains one model per fold on the other folds and evaluates every
/// held-out sample on its aggregated prediction.
pub fn run_crossval(
    records: &[StudyRecord],
    split: &FoldSplit,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    crop: &CropSpec,
    out_dir: Option<&Path>,
) -> Result<CrossvalReport> {
    if split.k < 2 {
        return Err(Error::invalid(format!("cross-validation needs k >= 2, got {}", split.k)));
    }
    let pairs = crate::data_pipeline::build_sample_pairs(records);
    let n_classes = (train_cfg.arch == Arch::Acgan).then_some(train_cfg.n_classes);
    let mut loader = StudyLoader::new(crop.clone(), n_classes, true);
    let mut folds = Vec::with_capacity(split.k);
    for fold in 0..split.k {
        let run = |loader: &mut StudyLoader| -> Result<FoldReport> {
            let (train_p, val_p) = split.split_pairs(&pairs, fold);
            let train = load_samples(loader, &train_p)?;
            let val = load_samples(loader, &val_p)?;
            let fold_dir = match out_dir {
                Some(d) => {
                    let fd = d.join(format!("fold_{fold}"));
                    std::fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
                    Some(fd)
                }
                None => None,
            };
            let mut trainer = Trainer::<f32>::new(train_cfg.clone(), model_cfg.clone(), crop.clone())?;
            trainer.set_fold(Some(fold));
            let outcome = trainer.fit(&train, &val, fold_dir.as_deref())?;
            let mut samples = Vec::with_capacity(val.len());
            for s in &val {
                let pred = predict_sample(&mut trainer.bundle.generator, s)?;
                samples.push(evaluate_pair(&s.id, &pred, &s.target)?);
            }
            Ok(FoldReport {
                fold,
                participants: split.participants_in(fold).into_iter().map(String::from).collect(),
                summary: summarize(&samples),
                samples,
                best_epoch: outcome.best_epoch,
                best_val_l1: outcome.best_val_l1,
            })
        };
        let report = run(&mut loader).map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?;
        log::info!("fold {fold}: {} samples", report.samples.len());
        folds.push(report);
    }
    let all: Vec<MetricReport> = folds.iter().flat_map(|f| f.samples.iter().cloned()).collect();
    let report = CrossvalReport {
        k: split.k,
        arch: train_cfg.arch,
        pooled: summarize(&all),
        folds,
    };
    if let Some(d) = out_dir {
        report.write(d)?;
    }
    Ok(report)
}
