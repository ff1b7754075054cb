//! Optimizer, the teacher and student training loops, checkpoints and
//! per-step metrics.
//!
//! One step draws from every stream, runs a single train-mode forward pass
//! over the concatenated crops (triplet images, then labeled, then
//! unlabeled), slices each head's rows for its loss, backpropagates the
//! weighted total once and updates every parameter together.

mod checkpoint;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{ArrayData, CheckpointFile, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{sgd_nesterov_step, OptimConfig};

use crate::data::{BatchSizes, Draw, SamplerState, StreamSampler, StreamState, TrainingData};
use crate::distill::{assemble_distill_batch, TeacherEnsemble};
use crate::error::{FeverError, Result};
use crate::losses::{
    cross_entropy_loss, fec_triplet_loss, rkd_angle_loss, rkd_distance_loss, student_total,
    teacher_total, LossWeights, TripletLossConfig,
};
use crate::models::{FeverNet, ModelConfig};
use crate::ndgrad::{Array, Float, Graph, Mode};

/// Rng stream id of the dropout generator; the sampler uses 0..3.
const DROPOUT_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub n_steps: Option<usize>,
    pub batch: BatchSizes,
    pub weights: LossWeights,
    pub triplet: TripletLossConfig,
    pub optim: OptimConfig,
    /// Seeds the sampler and dropout; model initialisation is seeded separately.
    pub seed: u64,
    pub drop_last: bool,
}

impl TrainConfig {
    /// Full-scale schedule: 13 epochs of 64 triplets and 64 labeled images.
    pub fn full_teacher() -> Self {
        TrainConfig {
            epochs: 13,
            n_steps: None,
            batch: BatchSizes {
                triplets: 64,
                labeled: 64,
                unlabeled: 0,
            },
            weights: LossWeights::default(),
            triplet: TripletLossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            drop_last: true,
        }
    }

    /// Full-scale schedule: 18 epochs of 36 triplets, 16 labeled and 16 unlabeled images.
    pub fn full_student() -> Self {
        TrainConfig {
            epochs: 18,
            batch: BatchSizes {
                triplets: 36,
                labeled: 16,
                unlabeled: 16,
            },
            ..Self::full_teacher()
        }
    }

    /// Small batches sized for one CPU core.
    pub fn desk_teacher() -> Self {
        TrainConfig {
            epochs: 5,
            batch: BatchSizes {
                triplets: 8,
                labeled: 16,
                unlabeled: 0,
            },
            ..Self::full_teacher()
        }
    }

    pub fn desk_student() -> Self {
        TrainConfig {
            epochs: 5,
            batch: BatchSizes {
                triplets: 8,
                labeled: 8,
                unlabeled: 8,
            },
            ..Self::full_teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps.is_none() && self.epochs == 0 {
            return Err(FeverError::config("epochs", "must be > 0"));
        }
        if self.n_steps == Some(0) {
            return Err(FeverError::config("n_steps", "must be > 0"));
        }
        if self.batch.triplets == 0 {
            return Err(FeverError::config("batch_triplets", "must be > 0"));
        }
        if self.batch.labeled == 0 {
            return Err(FeverError::config("batch_labeled", "must be > 0"));
        }
        if !(self.triplet.margin >= 0.0 && self.triplet.margin.is_finite()) {
            return Err(FeverError::config("margin", "must be a finite value >= 0"));
        }
        self.weights.validate()?;
        self.optim.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_fec: f64,
    pub l_aff: f64,
    pub l_rkd_d: f64,
    pub l_rkd_a: f64,
    pub total: f64,
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let file = File::create(path).map_err(|e| FeverError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| FeverError::Invariant(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| FeverError::io(path, e))?;
    }
    w.flush().map_err(|e| FeverError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| FeverError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FeverError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Metadata stored in the checkpoint's config blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    role: Role,
    dtype: String,
    model: ModelConfig,
    /// Absent for bare networks written by [`save_net`].
    train: Option<TrainConfig>,
    step: usize,
    sampler_epoch: u64,
    ensemble_checksum: Option<u64>,
}

/// Resumable training state for one network.
pub struct Trainer<T> {
    role: Role,
    cfg: TrainConfig,
    net: FeverNet<T>,
    velocity: Vec<Array<T>>,
    sampler: StreamSampler,
    dropout_rng: ChaCha8Rng,
    step: usize,
    ensemble: Option<TeacherEnsemble<T>>,
    ensemble_checksum: Option<u64>,
}

impl<T: Float> Trainer<T> {
    /// Trainer optimising the triplet and classification losses. Any network
    /// works, including one with a distillation head, which then stays idle.
    pub fn teacher(cfg: TrainConfig, data: &TrainingData, net: FeverNet<T>) -> Result<Self> {
        if cfg.batch.unlabeled != 0 {
            return Err(FeverError::config(
                "batch_unlabeled",
                "teacher training does not draw unlabeled batches; set it to 0",
            ));
        }
        Self::build(Role::Teacher, cfg, data, net, None)
    }

    pub fn student(
        cfg: TrainConfig,
        data: &TrainingData,
        net: FeverNet<T>,
        ensemble: TeacherEnsemble<T>,
    ) -> Result<Self> {
        match net.config().distill_dim {
            Some(d) if d == ensemble.target_dim() => {}
            other => {
                return Err(FeverError::config(
                    "distill_dim",
                    format!("student head width {other:?} must equal ensemble target width {}", ensemble.target_dim()),
                ))
            }
        }
        if net.config().input_shape != ensemble.input_shape() {
            return Err(FeverError::InvalidArgument(
                "student and teachers disagree on input shape".into(),
            ));
        }
        Self::build(Role::Student, cfg, data, net, Some(ensemble))
    }

    fn build(
        role: Role,
        cfg: TrainConfig,
        data: &TrainingData,
        net: FeverNet<T>,
        ensemble: Option<TeacherEnsemble<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if data.image_shape() != net.config().input_shape {
            return Err(FeverError::Data(format!(
                "data images {:?} do not match model input {:?}",
                data.image_shape(),
                net.config().input_shape
            )));
        }
        if data.labeled.num_classes != net.config().num_classes {
            return Err(FeverError::Data(format!(
                "labeled data has {} classes, model has {}",
                data.labeled.num_classes,
                net.config().num_classes
            )));
        }
        let sampler = StreamSampler::new(data, cfg.batch, cfg.drop_last, cfg.seed)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        let velocity = net.params().iter().map(|p| Array::zeros(p.value.shape())).collect();
        let ensemble_checksum = ensemble.as_ref().map(|e| e.checksum());
        Ok(Trainer {
            role,
            cfg,
            net,
            velocity,
            sampler,
            dropout_rng,
            step: 0,
            ensemble,
            ensemble_checksum,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &FeverNet<T> {
        &self.net
    }

    pub fn into_net(self) -> FeverNet<T> {
        self.net
    }

    pub fn ensemble(&self) -> Option<&TeacherEnsemble<T>> {
        self.ensemble.as_ref()
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.sampler.epoch()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.steps_per_epoch()
    }

    /// Planned length of the run: `n_steps`, or `epochs` full epochs.
    pub fn total_steps(&self) -> usize {
        self.cfg
            .n_steps
            .unwrap_or(self.cfg.epochs * self.sampler.steps_per_epoch())
    }

    /// Changes the planned length, e.g. to extend a resumed run.
    pub fn set_run_length(&mut self, epochs: usize, n_steps: Option<usize>) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.epochs = epochs;
        cfg.n_steps = n_steps;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    /// Fails if any teacher parameter changed since the trainer was built.
    pub fn verify_ensemble(&self) -> Result<()> {
        match (&self.ensemble, self.ensemble_checksum) {
            (Some(e), Some(c)) if e.checksum() != c => Err(FeverError::Invariant(
                "teacher ensemble changed during student training".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Runs one optimizer step and returns its losses.
    pub fn step(&mut self, data: &TrainingData) -> Result<StepMetrics> {
        let draw = self.sampler.next_batches(data)?;
        let step = self.step + 1;
        let m = self.step_on(&draw, step).map_err(|e| match e {
            FeverError::Numeric { .. } => FeverError::StepNumeric {
                step,
                source: Box::new(e),
            },
            other => other,
        })?;
        self.verify_ensemble()?;
        self.step = step;
        Ok(m)
    }

    fn step_on(&mut self, draw: &Draw, step: usize) -> Result<StepMetrics> {
        let (x, layout) = assemble_distill_batch(&draw.triplets, &draw.labeled, &draw.unlabeled)?;
        let x: Array<T> = x.cast();
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x.clone());
        let (fv, stats) = self.net.forward(&mut g, xv, &mut self.dropout_rng)?;
        let v_fec = g.slice_rows(fv.v, layout.fec.start, layout.fec.end)?;
        let l_fec = fec_triplet_loss(&mut g, v_fec, &draw.triplets.pairs, &self.cfg.triplet)?;
        let logits_aff = g.slice_rows(fv.logits, layout.aff.start, layout.aff.end)?;
        let l_aff = cross_entropy_loss(&mut g, logits_aff, &draw.labeled.labels)?;
        let w = &self.cfg.weights;
        let (total, rkd) = match (self.role, &self.ensemble) {
            (Role::Teacher, _) => (teacher_total(&mut g, l_fec, l_aff, w)?, None),
            (Role::Student, Some(ens)) => {
                let target = ens.build_distill_target(&x)?;
                let z = fv
                    .z
                    .ok_or_else(|| FeverError::Invariant("student has no distillation head".into()))?;
                let d = rkd_distance_loss(&mut g, z, &target)?;
                let a = rkd_angle_loss(&mut g, z, &target)?;
                (student_total(&mut g, l_fec, l_aff, d, a, w)?, Some((d, a)))
            }
            (Role::Student, None) => return Err(FeverError::Invariant("student trainer without ensemble".into())),
        };
        let mut grads = g.backward(total)?;
        let grads: Vec<Array<T>> = fv.params.iter().map(|&p| grads.take(p)).collect();

        let mut params: Vec<Array<T>> = self
            .net
            .params_mut()
            .iter_mut()
            .map(|p| std::mem::replace(&mut p.value, Array::zeros(&[0])))
            .collect();
        let res = sgd_nesterov_step(&mut params, &grads, &mut self.velocity, &self.cfg.optim);
        for (p, v) in self.net.params_mut().iter_mut().zip(params) {
            p.value = v;
        }
        res?;
        self.net.apply_bn_updates(&stats)?;

        let val = |v| g.value(v).item().as_f64();
        let (l_rkd_d, l_rkd_a) = rkd.map_or((0.0, 0.0), |(d, a)| (val(d), val(a)));
        Ok(StepMetrics {
            step,
            l_fec: val(l_fec),
            l_aff: val(l_aff),
            l_rkd_d,
            l_rkd_a,
            total: val(total),
        })
    }

    /// Runs `n` steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &TrainingData,
        n: usize,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let m = self.step(data)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// Runs until [`Trainer::total_steps`] steps have been taken in total.
    pub fn run_to_end(&mut self, data: &TrainingData, on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let left = self.total_steps().saturating_sub(self.step);
        self.run(data, left, on_step)
    }

    /// Everything needed to resume: parameters, velocity, batch-norm
    /// statistics, sampler and dropout rng state, and the step counter.
    pub fn to_checkpoint(&self) -> Result<CheckpointFile> {
        let meta = CheckpointMeta {
            role: self.role,
            dtype: format!("{:?}", T::DTYPE).to_lowercase(),
            model: self.net.config().clone(),
            train: Some(self.cfg.clone()),
            step: self.step,
            sampler_epoch: self.sampler.epoch(),
            ensemble_checksum: self.ensemble_checksum,
        };
        let mut arrays = net_arrays(&self.net);
        for (p, v) in self.net.params().iter().zip(&self.velocity) {
            arrays.push(NamedArray::float(format!("velocity/{}", p.name), v));
        }
        let state = self.sampler.state();
        for (i, s) in state.streams.iter().enumerate() {
            arrays.push(NamedArray::u64s(format!("sampler/{i}/order"), s.order.clone()));
            arrays.push(NamedArray::u64s(
                format!("sampler/{i}/cursor"),
                vec![s.pos, s.passes, s.rng_stream, s.rng_word_pos as u64, (s.rng_word_pos >> 64) as u64],
            ));
            arrays.push(NamedArray::bytes(format!("sampler/{i}/seed"), s.rng_seed.to_vec()));
        }
        let wp = self.dropout_rng.get_word_pos();
        arrays.push(NamedArray::bytes("rng/dropout/seed", self.dropout_rng.get_seed().to_vec()));
        arrays.push(NamedArray::u64s(
            "rng/dropout/cursor",
            vec![self.dropout_rng.get_stream(), wp as u64, (wp >> 64) as u64],
        ));
        Ok(CheckpointFile {
            config: serde_json::to_value(&meta).map_err(|e| FeverError::Checkpoint(e.to_string()))?,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuilds a trainer from a checkpoint. Students must be given the same
    /// ensemble they were trained against.
    pub fn from_checkpoint(
        ckpt: &CheckpointFile,
        data: &TrainingData,
        ensemble: Option<TeacherEnsemble<T>>,
    ) -> Result<Self> {
        let meta = read_meta::<T>(ckpt)?;
        let net = net_from_checkpoint::<T>(ckpt)?;
        let train = meta
            .train
            .ok_or_else(|| FeverError::Checkpoint("checkpoint holds a bare network, not a training state".into()))?;
        let mut trainer = match (meta.role, ensemble) {
            (Role::Teacher, None) => Self::teacher(train, data, net)?,
            (Role::Student, Some(ens)) => {
                if Some(ens.checksum()) != meta.ensemble_checksum {
                    return Err(FeverError::Checkpoint(
                        "ensemble differs from the one this student was trained against".into(),
                    ));
                }
                Self::student(train, data, net, ens)?
            }
            (Role::Teacher, Some(_)) => {
                return Err(FeverError::InvalidArgument("teacher checkpoints take no ensemble".into()))
            }
            (Role::Student, None) => {
                return Err(FeverError::InvalidArgument("student checkpoints need their ensemble".into()))
            }
        };
        for (p, v) in trainer.net.params().iter().zip(trainer.velocity.iter_mut()) {
            let a = ckpt.get(&format!("velocity/{}", p.name))?.to_array::<T>()?;
            if a.shape() != p.value.shape() {
                return Err(FeverError::Checkpoint(format!("velocity of `{}` has the wrong shape", p.name)));
            }
            *v = a;
        }
        let mut streams = Vec::new();
        for i in 0..3 {
            let c = ckpt.u64s(&format!("sampler/{i}/cursor"))?;
            let seed = ckpt.bytes(&format!("sampler/{i}/seed"))?;
            if c.len() != 5 || seed.len() != 32 {
                return Err(FeverError::Checkpoint(format!("sampler stream {i} state is malformed")));
            }
            streams.push(StreamState {
                order: ckpt.u64s(&format!("sampler/{i}/order"))?.to_vec(),
                pos: c[0],
                passes: c[1],
                rng_seed: seed.try_into().unwrap(),
                rng_stream: c[2],
                rng_word_pos: c[3] as u128 | (c[4] as u128) << 64,
            });
        }
        trainer.sampler.restore(&SamplerState {
            streams,
            epoch: meta.sampler_epoch,
        })?;
        let seed = ckpt.bytes("rng/dropout/seed")?;
        let c = ckpt.u64s("rng/dropout/cursor")?;
        if seed.len() != 32 || c.len() != 3 {
            return Err(FeverError::Checkpoint("dropout rng state is malformed".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(seed.try_into().unwrap());
        rng.set_stream(c[0]);
        rng.set_word_pos(c[1] as u128 | (c[2] as u128) << 64);
        trainer.dropout_rng = rng;
        trainer.step = meta.step;
        Ok(trainer)
    }

    pub fn load(path: &Path, data: &TrainingData, ensemble: Option<TeacherEnsemble<T>>) -> Result<Self> {
        Self::from_checkpoint(&CheckpointFile::load(path)?, data, ensemble)
    }
}

fn net_arrays<T: Float>(net: &FeverNet<T>) -> Vec<NamedArray> {
    let mut arrays = Vec::new();
    for p in net.params() {
        arrays.push(NamedArray::float(format!("param/{}", p.name), &p.value));
    }
    for b in net.bn_buffers() {
        arrays.push(NamedArray::float(format!("bn/{}/mean", b.name), &b.stats.mean));
        arrays.push(NamedArray::float(format!("bn/{}/var", b.name), &b.stats.var));
    }
    arrays
}

fn read_meta<T: Float>(ckpt: &CheckpointFile) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| FeverError::Checkpoint(format!("config blob: {e}")))?;
    let want = format!("{:?}", T::DTYPE).to_lowercase();
    if meta.dtype != want {
        return Err(FeverError::Checkpoint(format!(
            "checkpoint stores {} parameters, expected {want}",
            meta.dtype
        )));
    }
    Ok(meta)
}

/// Writes a bare network (no optimizer or sampler state).
pub fn save_net<T: Float>(net: &FeverNet<T>, role: Role, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        role,
        dtype: format!("{:?}", T::DTYPE).to_lowercase(),
        model: net.config().clone(),
        train: None,
        step: 0,
        sampler_epoch: 0,
        ensemble_checksum: None,
    };
    CheckpointFile {
        config: serde_json::to_value(&meta).map_err(|e| FeverError::Checkpoint(e.to_string()))?,
        arrays: net_arrays(net),
    }
    .save(path)
}

/// Network parameters and running statistics from any checkpoint. Every
/// array is checked against the shapes implied by the stored model config.
pub fn net_from_checkpoint<T: Float>(ckpt: &CheckpointFile) -> Result<FeverNet<T>> {
    let meta = read_meta::<T>(ckpt)?;
    let mut net = FeverNet::<T>::init(meta.model, 0)?;
    for p in net.params_mut() {
        let a = ckpt.get(&format!("param/{}", p.name))?.to_array::<T>()?;
        if a.shape() != p.value.shape() {
            return Err(FeverError::Checkpoint(format!(
                "parameter `{}` has shape {:?}, config implies {:?}",
                p.name,
                a.shape(),
                p.value.shape()
            )));
        }
        p.value = a;
    }
    for b in net.bn_buffers_mut() {
        for (suffix, dst) in [("mean", &mut b.stats.mean), ("var", &mut b.stats.var)] {
            let a = ckpt.get(&format!("bn/{}/{suffix}", b.name))?.to_array::<T>()?;
            if a.shape() != dst.shape() {
                return Err(FeverError::Checkpoint(format!("running {suffix} of `{}` has the wrong shape", b.name)));
            }
            *dst = a;
        }
    }
    Ok(net)
}

pub fn load_net<T: Float>(path: &Path) -> Result<FeverNet<T>> {
    net_from_checkpoint(&CheckpointFile::load(path)?)
}

/// Trains a teacher for its configured length.
pub fn train_teacher<T: Float>(
    cfg: TrainConfig,
    data: &TrainingData,
    net: FeverNet<T>,
) -> Result<(FeverNet<T>, Vec<StepMetrics>)> {
    let mut t = Trainer::teacher(cfg, data, net)?;
    let log = t.run_to_end(data, |_| {})?;
    Ok((t.into_net(), log))
}

/// Distils an ensemble into a student for its configured length.
pub fn train_student<T: Float>(
    cfg: TrainConfig,
    data: &TrainingData,
    ensemble: TeacherEnsemble<T>,
    net: FeverNet<T>,
) -> Result<(FeverNet<T>, Vec<StepMetrics>)> {
    let mut t = Trainer::student(cfg, data, net, ensemble)?;
    let log = t.run_to_end(data, |_| {})?;
    Ok((t.into_net(), log))
}

#[cfg(test)]
mod tests;
