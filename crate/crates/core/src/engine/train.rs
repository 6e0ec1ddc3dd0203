use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{EpochSummary, MetricRecord, MetricsLog};
use crate::data::{Dataset, PatchSampler, Role, PATCH_SIZE};
use crate::losses::{
    extract_gt_for_plan, loss_m_batch, LevelLosses, loss_phi_levels, loss_phi_total, LossSchedule, Normalizer, SimilarityPatch,
    SimilarityScheme, StageWeights, NORMALIZER_WARMUP,
};
use crate::model::{assemble_input, stack_batch, Mode, Model, ModelConfig, Outputs, SizePlan};
use crate::netcore::checkpoint::{Checkpoint, Record};
use crate::netcore::{derive_seed, seeded_rng, Adam, Real, Tape, Tensor, Var};
use crate::volume::{Dims, ExtractPatch, Volume3};
use crate::{Error, Result};

const TAG_TRAIN_PATCHES: u64 = 11;
const TAG_VAL_PATCHES: u64 = 12;
const TAG_SHUFFLE: u64 = 13;

pub const CHECKPOINT_FORMAT: &str = "regnet-model-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub stage1: StageWeights,
    pub stage2: StageWeights,
    pub seed: u64,
    /// Train on the displacement loss alone.
    pub no_similarity: bool,
    /// Plain U-Net arm; the model must have gap filling and hierarchical heads off.
    pub plain_unet: bool,
    pub similarity_scheme: SimilarityScheme,
    /// Add the gradient-magnitude term to the similarity loss.
    pub similarity_gradient: bool,
    /// Training patches drawn from each sample; drawn once, reshuffled every epoch.
    pub patches_per_sample: usize,
    pub val_patches_per_sample: usize,
    pub normalizer_warmup: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 5,
            epochs_stage2: 5,
            lr_stage1: 1e-3,
            lr_stage2: 1e-8,
            batch_size: 4,
            stage1: StageWeights { alpha: 0.8, beta: 0.2 },
            stage2: StageWeights { alpha: 0.5, beta: 0.5 },
            seed: 0,
            no_similarity: false,
            plain_unet: false,
            similarity_scheme: SimilarityScheme::Analytic,
            similarity_gradient: true,
            patches_per_sample: 5,
            val_patches_per_sample: 8,
            normalizer_warmup: NORMALIZER_WARMUP,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(Error::Config("each stage needs at least one epoch".into()));
        }
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.patches_per_sample == 0 {
            return Err(Error::Config("batch_size and patches_per_sample must be at least 1".into()));
        }
        StageWeights::new(self.stage1.alpha, self.stage1.beta)?;
        StageWeights::new(self.stage2.alpha, self.stage2.beta)?;
        if self.normalizer_warmup == 0 {
            return Err(Error::Config("normalizer_warmup must be at least 1".into()));
        }
        Ok(())
    }

    /// Ablation flags must agree with the architecture they are paired with.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.plain_unet && (model.gap_fill || model.hierarchical) {
            return Err(Error::Config("plain_unet needs gap_fill = false and hierarchical = false".into()));
        }
        Ok(())
    }

    /// Apply the architecture side of the ablation flags.
    pub fn apply_ablation(&self, model: &mut ModelConfig) {
        if self.plain_unet {
            model.gap_fill = false;
            model.hierarchical = false;
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }

    pub fn schedule(&self) -> LossSchedule {
        let s = LossSchedule {
            stage1: self.stage1,
            stage2: self.stage2,
            stage1_epochs: self.epochs_stage1,
            normalizer: Normalizer::new(self.normalizer_warmup),
        };
        if self.no_similarity {
            s.without_similarity()
        } else {
            s
        }
    }

    /// Learning rate of a 1-based epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.epochs_stage1 {
            self.lr_stage1
        } else {
            self.lr_stage2
        }
    }
}

/// A training patch kept in single precision: the subject window and the
/// supervision at every output level. The template window is cut from the shared
/// template on demand.
#[derive(Clone, Debug)]
struct CachedPatch {
    sample: Arc<str>,
    origin: Dims,
    subject: Vec<f32>,
    levels: [Vec<f32>; 3],
}

fn cache_patches(dataset: &Dataset, role: Role, per_sample: usize, seed: u64, tag: u64) -> Result<Vec<CachedPatch>> {
    let sampler = PatchSampler::new(&dataset.template, PATCH_SIZE)?;
    let size = [PATCH_SIZE; 3];
    let mut out = Vec::new();
    for (idx, entry) in dataset.entries(role).into_iter().enumerate() {
        let pair = dataset.load(entry)?;
        let id: Arc<str> = Arc::from(entry.id.as_str());
        for origin in sampler.origins(per_sample, derive_seed(seed, tag, idx as u64))? {
            let gt = pair.supervision().extract_patch(origin, size)?;
            let lv = extract_gt_for_plan(&gt, sampler.plan())?;
            let f32s = |s: &[f64]| s.iter().map(|&v| v as f32).collect::<Vec<f32>>();
            out.push(CachedPatch {
                sample: id.clone(),
                origin,
                subject: f32s(pair.subject.extract_patch(origin, size)?.as_slice()),
                levels: [f32s(lv.high.as_slice()), f32s(lv.mid.as_slice()), f32s(lv.low.as_slice())],
            });
        }
    }
    Ok(out)
}

struct Batch<T: Real> {
    input: Tensor<T>,
    gt: [Tensor<T>; 3],
    similarity: Vec<SimilarityPatch>,
}

/// Losses of one batch, as plain numbers.
#[derive(Clone, Copy, Debug)]
struct BatchLosses {
    phi: [Option<f64>; 3],
    m: f64,
}

impl BatchLosses {
    fn phi_total(&self) -> f64 {
        self.phi.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub precision: String,
    pub model: ModelConfig,
    pub train: Option<TrainState>,
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub iteration: usize,
    pub schedule: LossSchedule,
    pub log: MetricsLog,
    pub adam_steps: Vec<u64>,
}

impl CheckpointHeader {
    pub fn parse(ck: &Checkpoint) -> Result<Self> {
        let h: Self = serde_json::from_str(&ck.header)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint header: {e}")))?;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format `{}`", h.format)));
        }
        Ok(h)
    }
}

/// Write a model with no training state.
pub fn save_model<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    model_checkpoint(model, None)?.write(path)
}

/// Read a checkpoint and rebuild its model at precision `T`.
pub fn load_model<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let ck = Checkpoint::read(path)?;
    let h = CheckpointHeader::parse(&ck)?;
    if h.precision != T::NAME {
        return Err(Error::Checkpoint(format!("checkpoint holds {} parameters, expected {}", h.precision, T::NAME)));
    }
    Ok((Model::from_checkpoint(h.model.clone(), &ck)?, h))
}

fn model_checkpoint<T: Real>(model: &Model<T>, state: Option<TrainState>) -> Result<Checkpoint> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        precision: T::NAME.into(),
        model: model.config().clone(),
        train: state,
    };
    let mut ck = Checkpoint::new(serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?);
    for r in model.records()? {
        ck.push(r);
    }
    Ok(ck)
}

/// Where a training run writes its per-epoch artefacts.
pub struct RunOutputs {
    pub dir: PathBuf,
}

impl RunOutputs {
    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.dnck"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.dnck")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub schedule: LossSchedule,
    pub log: MetricsLog,
    pub epochs_done: usize,
    pub iteration: usize,
    /// Wall-clock seconds per epoch; not part of the checkpointed state.
    pub epoch_seconds: Vec<Option<f64>>,
    template: Arc<Volume3>,
    plan: SizePlan,
    train: Vec<CachedPatch>,
    val: Vec<CachedPatch>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        config.check_model(model.config())?;
        let schedule = config.schedule();
        Self::assemble(model, config, schedule, MetricsLog::default(), 0, 0, dataset)
    }

    /// Continue a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, dataset: &Dataset) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let h = CheckpointHeader::parse(&ck)?;
        if h.precision != T::NAME {
            return Err(Error::Checkpoint(format!("checkpoint holds {} parameters, expected {}", h.precision, T::NAME)));
        }
        let state = h.train.ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let mut model = Model::<T>::from_checkpoint(h.model, &ck)?;
        if state.adam_steps.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match the architecture".into()));
        }
        for (p, &step) in model.params_mut().iter_mut().zip(&state.adam_steps) {
            p.step = step;
            for (slot, kind) in [(&mut p.m, "m"), (&mut p.v, "v")] {
                let r = ck.require(&format!("adam.{kind}.{}", p.name))?;
                let data = T::from_record(&r.data)
                    .filter(|d| d.len() == slot.len())
                    .ok_or_else(|| Error::Checkpoint(format!("bad optimizer record for `{}`", p.name)))?;
                *slot = data;
            }
        }
        let mut t = Self::assemble(
            model,
            state.config,
            state.schedule,
            state.log,
            state.epochs_done,
            state.iteration,
            dataset,
        )?;
        t.epoch_seconds = vec![None; t.epochs_done];
        Ok(t)
    }

    fn assemble(
        model: Model<T>,
        config: TrainConfig,
        schedule: LossSchedule,
        log: MetricsLog,
        epochs_done: usize,
        iteration: usize,
        dataset: &Dataset,
    ) -> Result<Self> {
        let train = cache_patches(dataset, Role::Train, config.patches_per_sample, config.seed, TAG_TRAIN_PATCHES)?;
        if train.is_empty() {
            return Err(Error::Manifest("dataset has no training samples".into()));
        }
        let val = cache_patches(dataset, Role::Validation, config.val_patches_per_sample, config.seed, TAG_VAL_PATCHES)?;
        let sampler = PatchSampler::new(&dataset.template, PATCH_SIZE)?;
        Ok(Self {
            model,
            config,
            schedule,
            log,
            epochs_done,
            iteration,
            epoch_seconds: Vec::new(),
            template: dataset.template.clone(),
            plan: *sampler.plan(),
            train,
            val,
        })
    }

    pub fn train_patch_count(&self) -> usize {
        self.train.len()
    }

    pub fn val_patch_count(&self) -> usize {
        self.val.len()
    }

    pub fn finished(&self) -> bool {
        self.epochs_done >= self.config.total_epochs()
    }

    fn batch(&self, items: &[&CachedPatch]) -> Result<Batch<T>> {
        let size = [PATCH_SIZE; 3];
        let (o1, o2, o3) = self.plan.outputs();
        let mut inputs = Vec::with_capacity(items.len());
        let mut gts: [Vec<Tensor<T>>; 3] = Default::default();
        let mut similarity = Vec::with_capacity(items.len());
        for p in items {
            let subject = Volume3::new(size, p.subject.iter().map(|&v| v as f64).collect())?;
            let template = self.template.extract_patch(p.origin, size)?;
            inputs.push(assemble_input::<T>(&subject, &template, &self.model.config().input_channels)?);
            for (l, n) in [o1, o2, o3].into_iter().enumerate() {
                gts[l].push(Tensor::new([1, 3, n, n, n], p.levels[l].iter().map(|&v| T::of(v as f64)).collect())?);
            }
            similarity.push(SimilarityPatch::new(subject, template, self.config.similarity_gradient)?);
        }
        let [g1, g2, g3] = gts;
        Ok(Batch { input: stack_batch(&inputs)?, gt: [stack_batch(&g1)?, stack_batch(&g2)?, stack_batch(&g3)?], similarity })
    }

    fn provenance(items: &[&CachedPatch]) -> String {
        items.iter().map(|p| format!("{}@{:?}", p.sample, p.origin)).collect::<Vec<_>>().join(", ")
    }

    /// Forward pass and both losses. Training mode leaves the tape ready for backward.
    fn losses(&self, tape: &mut Tape<T>, batch: &Batch<T>, mode: Mode) -> Result<(BatchLosses, LevelLosses, Outputs, Var)> {
        let x = tape.constant(batch.input.clone());
        let out = self.model.forward(tape, x, mode)?;
        let lv = loss_phi_levels(
            tape,
            (out.high, out.mid, out.low),
            (&batch.gt[0], out.mid.map(|_| &batch.gt[1]), out.low.map(|_| &batch.gt[2])),
        )?;
        let (m, _) = loss_m_batch(tape, out.high, &batch.similarity, self.config.similarity_scheme)?;
        let val = |v: Var| tape.value(v).item().f64();
        let losses = BatchLosses { phi: [Some(val(lv.high)), lv.mid.map(val), lv.low.map(val)], m: val(m) };
        Ok((losses, lv, out, m))
    }

    fn record(&self, epoch: usize, losses: &BatchLosses, combined: f64, split: Role) -> MetricRecord {
        let w = self.schedule.weights(epoch);
        MetricRecord {
            iteration: self.iteration,
            epoch,
            stage: self.schedule.stage(epoch),
            alpha: w.alpha,
            beta: w.beta,
            lr: self.config.lr(epoch),
            loss_phi_high: losses.phi[0].unwrap_or(f64::NAN),
            loss_phi_mid: losses.phi[1],
            loss_phi_low: losses.phi[2],
            loss_m: losses.m,
            combined,
            split,
        }
    }

    fn step(&mut self, epoch: usize, items: &[&CachedPatch]) -> Result<MetricRecord> {
        let batch = self.batch(items)?;
        let mut tape = Tape::new();
        let (losses, lv, out, m) = self.losses(&mut tape, &batch, Mode::Train)?;
        if !(losses.phi_total().is_finite() && losses.m.is_finite()) {
            return Err(Error::NonFiniteLoss(format!(
                "epoch {epoch}, iteration {}: loss_phi {}, loss_m {}; batch {}",
                self.iteration + 1,
                losses.phi_total(),
                losses.m,
                Self::provenance(items)
            )));
        }
        self.schedule.normalizer.observe(losses.phi_total(), losses.m);
        let phi = loss_phi_total(&mut tape, &lv)?;
        let total = self.schedule.combine(&mut tape, phi, m, epoch)?;
        let combined = tape.value(total).item().f64();
        tape.backward(total)?;
        let grads = out
            .param_vars
            .iter()
            .map(|&v| tape.grad(v).ok_or_else(|| Error::NotInitialized("parameter gradient missing".into())))
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(self.config.lr(epoch));
        adam.step(self.model.params_mut(), &grads)?;
        self.model.update_running_stats(&out.stats)?;
        self.iteration += 1;
        Ok(self.record(epoch, &losses, combined, Role::Train))
    }

    /// Mean validation losses under the weights of `epoch`, or `None` without validation data.
    fn validate(&self, epoch: usize) -> Result<Option<MetricRecord>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut sums = BatchLosses { phi: [None; 3], m: 0.0 };
        let n = self.val.len() as f64;
        for chunk in self.val.chunks(self.config.batch_size) {
            let items: Vec<&CachedPatch> = chunk.iter().collect();
            let batch = self.batch(&items)?;
            let mut tape = Tape::new();
            let (l, ..) = self.losses(&mut tape, &batch, Mode::Eval)?;
            let w = chunk.len() as f64 / n;
            for (s, v) in sums.phi.iter_mut().zip(l.phi) {
                if let Some(v) = v {
                    *s = Some(s.unwrap_or(0.0) + w * v);
                }
            }
            sums.m += w * l.m;
        }
        let combined = self.schedule.combine_values(sums.phi_total(), sums.m, epoch)?;
        Ok(Some(self.record(epoch, &sums, combined, Role::Validation)))
    }

    /// One full pass over the shuffled training patches, then validation.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.finished() {
            return Err(Error::InvalidInput("all configured epochs are done".into()));
        }
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seeded_rng(derive_seed(self.config.seed, TAG_SHUFFLE, epoch as u64)));
        let mut rows = Vec::new();
        for idx in order.chunks(self.config.batch_size) {
            let patches = std::mem::take(&mut self.train);
            let items: Vec<&CachedPatch> = idx.iter().map(|&i| &patches[i]).collect();
            let r = self.step(epoch, &items);
            self.train = patches;
            let r = r?;
            self.log.records.push(r.clone());
            rows.push(r);
        }
        let val = self.validate(epoch)?;
        if let Some(v) = &val {
            self.log.records.push(v.clone());
        }
        let k = rows.len() as f64;
        let mean = |f: &dyn Fn(&MetricRecord) -> f64| rows.iter().map(f).sum::<f64>() / k;
        let summary = EpochSummary {
            epoch,
            stage: self.schedule.stage(epoch),
            iterations: self.iteration,
            train_loss_phi: mean(&|r| r.loss_phi()),
            train_loss_m: mean(&|r| r.loss_m),
            train_combined: mean(&|r| r.combined),
            val_loss_phi: val.as_ref().map(|v| v.loss_phi()),
            val_loss_m: val.as_ref().map(|v| v.loss_m),
            val_combined: val.as_ref().map(|v| v.combined),
        };
        self.log.epochs.push(summary.clone());
        self.epochs_done = epoch;
        self.epoch_seconds.push(Some(start.elapsed().as_secs_f64()));
        Ok(summary)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.config.clone(),
            epochs_done: self.epochs_done,
            iteration: self.iteration,
            schedule: self.schedule.clone(),
            log: self.log.clone(),
            adam_steps: self.model.params().iter().map(|p| p.step).collect(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&self.model, Some(self.state()))?;
        for p in self.model.params() {
            let dims = p.value.shape().to_vec();
            ck.push(Record::new(format!("adam.m.{}", p.name), dims.clone(), T::to_record(&p.m))?);
            ck.push(Record::new(format!("adam.v.{}", p.name), dims, T::to_record(&p.v))?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.write(path)
    }

    /// Write the epoch checkpoint, the latest-model checkpoint, the metrics CSV and the summary.
    pub fn write_outputs(&self, out: &RunOutputs) -> Result<()> {
        std::fs::create_dir_all(&out.dir)?;
        let ck = self.checkpoint()?;
        ck.write(&out.checkpoint(self.epochs_done))?;
        ck.write(&out.final_checkpoint())?;
        std::fs::write(out.metrics(), self.log.to_csv())?;
        let summary = RunSummary {
            precision: T::NAME.into(),
            parameters: self.model.parameter_count(),
            train_patches: self.train.len(),
            val_patches: self.val.len(),
            epochs_done: self.epochs_done,
            iterations: self.iteration,
            normalizer: self.schedule.normalizer.constants().ok(),
            epochs: self.log.epochs.clone(),
            epoch_seconds: self.epoch_seconds.clone(),
        };
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(out.summary(), json + "\n")?;
        Ok(())
    }

    /// Train until `epochs` epochs are done in total (capped at the configured count),
    /// writing outputs after every epoch when `out` is given.
    pub fn run_until(&mut self, epochs: usize, out: Option<&RunOutputs>, mut report: impl FnMut(&EpochSummary)) -> Result<()> {
        let target = epochs.min(self.config.total_epochs());
        while self.epochs_done < target {
            let s = self.run_epoch()?;
            if let Some(o) = out {
                self.write_outputs(o)?;
            }
            report(&s);
        }
        Ok(())
    }

    pub fn run(&mut self, out: Option<&RunOutputs>, report: impl FnMut(&EpochSummary)) -> Result<()> {
        self.run_until(self.config.total_epochs(), out, report)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub precision: String,
    pub parameters: usize,
    pub train_patches: usize,
    pub val_patches: usize,
    pub epochs_done: usize,
    pub iterations: usize,
    /// `(c_phi, c_m)` once observed.
    pub normalizer: Option<(f64, f64)>,
    pub epochs: Vec<EpochSummary>,
    pub epoch_seconds: Vec<Option<f64>>,
}

/// Build a model for `config`, train it on `dataset` for every configured epoch and
/// return the trained state.
pub fn train<T: Real>(model: ModelConfig, dataset: &Dataset, config: TrainConfig, out: Option<&RunOutputs>) -> Result<Trainer<T>> {
    let mut t = Trainer::new(Model::build(model)?, config, dataset)?;
    t.run(out, |_| {})?;
    Ok(t)
}
