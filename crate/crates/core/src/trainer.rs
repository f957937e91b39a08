//! AdamW with cosine decay, periodic evaluation and checkpointing.

use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::analysis::{encode_batch, evaluate, AnalysisError, MetricRow};
use crate::engine::{EngineError, Graph, Scalar};
use crate::model::{
    init_model, save_checkpoint_with_meta, CheckpointError, Metadata, ModelConfig, ModelError, ModelParams,
};
use crate::rng::{stream_rng, Stream};
use crate::taskgen::{
    make_eval_set, make_train_set, Example, Procedure, TaskError, TaskKind, TaskSpec, TrainPlan, TrainSet,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

/// `lr_base · ½(1 + cos(π·step/total))`, no restarts.
pub fn cosine_lr(step: u64, total_steps: u64, lr_base: f64) -> f64 {
    if total_steps == 0 {
        return lr_base;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            grad_clip: None,
        }
    }
}

/// AdamW moments for every parameter tensor, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub config: OptimConfig,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>, config: OptimConfig) -> Self {
        let zeros = || params.params.iter().map(|p| vec![T::ZERO; p.tensor.numel()]).collect();
        OptimState { m: zeros(), v: zeros(), t: 0, config }
    }
}

/// One decoupled-decay Adam update. Decay touches only tensors whose kind decays.
pub fn adamw_step<T: Scalar>(params: &mut ModelParams<T>, grads: &[Vec<T>], state: &mut OptimState<T>, lr: f64) {
    assert_eq!(grads.len(), params.params.len(), "one gradient per parameter");
    state.t += 1;
    let c = &state.config;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let step = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(c.eps);
    for (i, p) in params.params.iter_mut().enumerate() {
        let decay = if p.kind.decays() { T::from_f64(1.0 - lr * c.weight_decay) } else { T::ONE };
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        assert_eq!(g.len(), m.len(), "gradient shape for {}", p.name);
        for (((w, m), v), &g) in p.tensor.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + ob1 * g;
            *v = b2 * *v + ob2 * g * g;
            *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

/// Epoch count, evaluation cadence and checkpoint cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub eval_every: usize,
    /// First-operand lengths evaluated at every evaluation.
    pub eval_lengths: Vec<usize>,
    /// Examples per evaluation length.
    pub eval_count: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 100,
            eval_every: 25,
            eval_lengths: Vec::new(),
            eval_count: 1000,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Loss became NaN or infinite; parameters are left as of the last finite step.
    Diverged {
        step: u64,
        epoch: u64,
        loss: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub model_config: ModelConfig,
    pub plan: TrainPlan,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    /// Learning rate used at each optimizer step.
    pub lr_trace: Vec<f64>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub first_loss: Option<f64>,
    pub steps: u64,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// Equality of everything except wall-clock time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        RunRecord { wall_clock_secs: 0.0, ..self.clone() } == RunRecord { wall_clock_secs: 0.0, ..other.clone() }
    }

    /// Rows recorded for one evaluation length, in step order.
    pub fn rows_at(&self, length: usize) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.length == length).collect()
    }
}

/// Checkpoint metadata describing the task a model was trained on.
pub fn task_metadata(task: &TaskSpec, n_train: usize) -> Metadata {
    let mut m = Metadata::new();
    m.insert("task.kind".into(), task.kind.to_string());
    m.insert("task.n_test".into(), task.n_test.to_string());
    m.insert("task.n2_max".into(), task.n2_max.to_string());
    if let Some(c) = task.modulus {
        m.insert("task.modulus".into(), c.to_string());
    }
    m.insert("task.n_train".into(), n_train.to_string());
    m
}

/// Inverse of [`task_metadata`]: the task geometry and training length.
pub fn task_from_metadata(meta: &Metadata) -> Result<(TaskSpec, usize), TrainError> {
    fn field<V: std::str::FromStr>(meta: &Metadata, key: &str) -> Result<V, TrainError> {
        meta.get(key)
            .ok_or_else(|| TrainError::Invalid(format!("checkpoint metadata lacks {key}")))?
            .parse()
            .map_err(|_| TrainError::Invalid(format!("checkpoint metadata has a bad {key}")))
    }
    let kind: TaskKind = field::<String>(meta, "task.kind")?.parse()?;
    let modulus = meta.contains_key("task.modulus").then(|| field(meta, "task.modulus")).transpose()?;
    let task = TaskSpec::new(kind, field(meta, "task.n_test")?, field(meta, "task.n2_max")?, modulus)?;
    Ok((task, field(meta, "task.n_train")?))
}

/// Called after every epoch with the epoch number, mean loss and any rows just recorded.
pub type Observer<'o> = dyn FnMut(u64, f64, &[MetricRow]) + 'o;

/// Where each epoch's examples come from.
pub enum Data<'d> {
    /// Main phase of a plan: regenerated short examples plus fixed priming examples.
    Online(&'d TrainSet),
    /// The same examples every epoch, reshuffled.
    Fixed { examples: &'d [Example], seed: u64 },
}

impl Data<'_> {
    fn epoch(&self, e: u64) -> Vec<Example> {
        match self {
            Data::Online(set) => set.epoch(e).into_iter().map(|x| x.0).collect(),
            Data::Fixed { examples, seed } => {
                use rand::seq::SliceRandom;
                let mut v = examples.to_vec();
                v.shuffle(&mut stream_rng(*seed, Stream::Epoch(e)));
                v
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::Online(set) => set.epoch_len(),
            Data::Fixed { examples, .. } => examples.len(),
        }
    }
}

fn check_geometry<T: Scalar>(model: &ModelParams<T>, task: &TaskSpec) -> Result<(), TrainError> {
    let c = &model.config;
    if c.n_out != task.n_out() {
        return Err(TrainError::Geometry(format!("model n_out {} vs task n_out {}", c.n_out, task.n_out())));
    }
    if task.input_len() < c.n_out {
        return Err(TrainError::Geometry(format!("input length {} < n_out {}", task.input_len(), c.n_out)));
    }
    if c.pe_kind == crate::model::PeKind::Ape && task.input_len() > c.max_positions {
        return Err(TrainError::Geometry(format!(
            "input length {} exceeds position table {}",
            task.input_len(),
            c.max_positions
        )));
    }
    Ok(())
}

/// Fixed per-run evaluation sets, one per length.
fn eval_sets(
    task: &TaskSpec,
    lengths: &[usize],
    count: usize,
    n_train: usize,
    seed: u64,
) -> Vec<(usize, Vec<Example>)> {
    lengths
        .iter()
        .map(|&n| {
            let mut rng = stream_rng(seed, Stream::Eval { step: 0, length: n as u64 });
            (n, make_eval_set(task, n, count, n_train, &mut rng).examples)
        })
        .collect()
}

/// Mean cross-entropy and parameter gradients of one batch.
pub fn batch_gradients<T: Scalar>(
    model: &ModelParams<T>,
    task: &TaskSpec,
    batch: &[Example],
    dropout_seed: Option<(u64, u64)>,
) -> Result<(f64, Vec<Vec<T>>), TrainError> {
    let (ids, targets) = encode_batch(batch, task)?;
    let targets: Vec<usize> = targets.into_iter().map(usize::from).collect();
    let mut g = Graph::new();
    let mut rng = dropout_seed.map(|(seed, step)| stream_rng(seed, Stream::Dropout(step)));
    let out = model.forward(&mut g, &ids, batch.len(), rng.as_mut())?;
    let loss = g.cross_entropy(out.logits, &targets)?;
    let value = g.value(loss)[0].to_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = out
        .params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| vec![T::ZERO; p.tensor.numel()]))
        .collect();
    Ok((value, grads))
}

fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g.to_f64() * g.to_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

struct Loop<'a> {
    task: TaskSpec,
    n_train: usize,
    optim: &'a OptimConfig,
    schedule: &'a Schedule,
    seed: u64,
}

struct LoopOutcome {
    rows: Vec<MetricRow>,
    lr_trace: Vec<f64>,
    epoch_losses: Vec<f64>,
    first_loss: Option<f64>,
    steps: u64,
    status: RunStatus,
    final_checkpoint: Option<PathBuf>,
}

impl Loop<'_> {
    fn evaluate_all<T: Scalar>(
        &self,
        model: &ModelParams<T>,
        sets: &[(usize, Vec<Example>)],
        step: u64,
        epoch: u64,
    ) -> Result<Vec<MetricRow>, TrainError> {
        sets.iter().map(|(n, ex)| Ok(evaluate(model, &self.task, ex, *n, step, epoch)?.row)).collect()
    }

    fn checkpoint<T: Scalar>(&self, model: &ModelParams<T>, name: &str) -> Result<Option<PathBuf>, TrainError> {
        let Some(dir) = &self.schedule.checkpoint_dir else { return Ok(None) };
        std::fs::create_dir_all(dir).map_err(CheckpointError::from)?;
        let path = dir.join(name);
        save_checkpoint_with_meta(model, &task_metadata(&self.task, self.n_train), &path)?;
        Ok(Some(path))
    }

    fn run<T: Scalar>(
        &self,
        model: &mut ModelParams<T>,
        data: &Data<'_>,
        observer: &mut Observer<'_>,
    ) -> Result<LoopOutcome, TrainError> {
        let (sched, optim) = (self.schedule, self.optim);
        if optim.batch_size == 0 || sched.eval_every == 0 {
            return Err(TrainError::Invalid("batch_size and eval_every must be positive".into()));
        }
        check_geometry(model, &self.task)?;
        if let Some(&n) = sched.eval_lengths.iter().find(|&&n| n == 0 || n > self.task.n_test) {
            return Err(TrainError::Geometry(format!("evaluation length {n} outside 1..={}", self.task.n_test)));
        }
        let sets = eval_sets(&self.task, &sched.eval_lengths, sched.eval_count, self.n_train, self.seed);
        let steps_per_epoch = data.len().div_ceil(optim.batch_size) as u64;
        let total_steps = sched.epochs as u64 * steps_per_epoch;
        let mut state = OptimState::new(model, optim.clone());
        let dropout = (model.config.dropout > 0.0).then_some(self.seed);

        let mut out = LoopOutcome {
            rows: self.evaluate_all(model, &sets, 0, 0)?,
            lr_trace: Vec::with_capacity(total_steps as usize),
            epoch_losses: Vec::with_capacity(sched.epochs),
            first_loss: None,
            steps: 0,
            status: RunStatus::Completed,
            final_checkpoint: None,
        };
        observer(0, f64::NAN, &out.rows);
        if data.len() == 0 {
            out.final_checkpoint = self.checkpoint(model, "final.ckpt")?;
            return Ok(out);
        }

        for epoch in 1..=sched.epochs as u64 {
            let examples = data.epoch(epoch);
            let mut loss_sum = 0.0;
            for batch in examples.chunks(optim.batch_size) {
                let (loss, mut grads) = batch_gradients(model, &self.task, batch, dropout.map(|s| (s, out.steps)))?;
                if !loss.is_finite() {
                    out.status = RunStatus::Diverged { step: out.steps, epoch, loss };
                    return Ok(out);
                }
                out.first_loss.get_or_insert(loss);
                if let Some(c) = optim.grad_clip {
                    clip_gradients(&mut grads, c);
                }
                let lr = cosine_lr(out.steps, total_steps, optim.lr);
                adamw_step(model, &grads, &mut state, lr);
                out.lr_trace.push(lr);
                out.steps += 1;
                loss_sum += loss * batch.len() as f64;
            }
            let mean = loss_sum / examples.len() as f64;
            out.epoch_losses.push(mean);
            let mut fresh = Vec::new();
            if epoch % sched.eval_every as u64 == 0 || epoch == sched.epochs as u64 {
                fresh = self.evaluate_all(model, &sets, out.steps, epoch)?;
                out.rows.extend(fresh.iter().cloned());
            }
            if let Some(every) = sched.checkpoint_every {
                if every > 0 && epoch % every as u64 == 0 && epoch != sched.epochs as u64 {
                    self.checkpoint(model, &format!("epoch-{epoch}.ckpt"))?;
                }
            }
            observer(epoch, mean, &fresh);
        }
        out.final_checkpoint = self.checkpoint(model, "final.ckpt")?;
        Ok(out)
    }
}

fn record(
    model_config: ModelConfig,
    plan: &TrainPlan,
    optim: &OptimConfig,
    schedule: &Schedule,
    out: LoopOutcome,
    started: Instant,
) -> RunRecord {
    RunRecord {
        model_config,
        plan: plan.clone(),
        optim: optim.clone(),
        schedule: schedule.clone(),
        seed: plan.seed,
        rows: out.rows,
        lr_trace: out.lr_trace,
        epoch_losses: out.epoch_losses,
        first_loss: out.first_loss,
        steps: out.steps,
        status: out.status,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        final_checkpoint: out.final_checkpoint,
    }
}

/// Trains a fresh model under a standard or priming plan.
pub fn train<T: Scalar>(
    plan: &TrainPlan,
    model_config: &ModelConfig,
    optim: &OptimConfig,
    schedule: &Schedule,
    observer: &mut Observer<'_>,
) -> Result<(RunRecord, ModelParams<T>), TrainError> {
    let started = Instant::now();
    if plan.procedure == Procedure::FineTune {
        return Err(TrainError::Invalid("fine-tune plans run through fine_tune".into()));
    }
    let set = make_train_set(plan)?;
    let mut model = init_model::<T>(model_config, plan.seed)?;
    let lp = Loop { task: plan.task, n_train: plan.n_train, optim, schedule, seed: plan.seed };
    let out = lp.run(&mut model, &Data::Online(&set), observer)?;
    Ok((record(model_config.clone(), plan, optim, schedule, out, started), model))
}

/// Trains a fresh model on a fixed example list, reshuffled each epoch.
pub fn train_fixed<T: Scalar>(
    task: &TaskSpec,
    examples: &[Example],
    model_config: &ModelConfig,
    optim: &OptimConfig,
    schedule: &Schedule,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<(RunRecord, ModelParams<T>), TrainError> {
    let started = Instant::now();
    let n_train = examples.iter().map(|e| e.x1.len()).max().unwrap_or(1);
    let plan = TrainPlan { pool_size: examples.len(), ..TrainPlan::standard(*task, n_train, examples.len(), seed) };
    let mut model = init_model::<T>(model_config, seed)?;
    let lp = Loop { task: *task, n_train, optim, schedule, seed };
    let out = lp.run(&mut model, &Data::Fixed { examples, seed }, observer)?;
    Ok((record(model_config.clone(), &plan, optim, schedule, out, started), model))
}

/// Continues training an existing model on the plan's fixed long-operand set only.
///
/// Evaluation always covers the source length `plan.n_train` and the target length,
/// in addition to any lengths in the schedule.
pub fn fine_tune<T: Scalar>(
    mut model: ModelParams<T>,
    plan: &TrainPlan,
    optim: &OptimConfig,
    schedule: &Schedule,
    observer: &mut Observer<'_>,
) -> Result<(RunRecord, ModelParams<T>), TrainError> {
    let started = Instant::now();
    let target = plan
        .fine_tune
        .filter(|_| plan.procedure == Procedure::FineTune)
        .ok_or_else(|| TrainError::Invalid("fine_tune needs a fine-tune plan".into()))?;
    check_geometry(&model, &plan.task)?;
    let set = make_train_set(plan)?;
    let mut sched = schedule.clone();
    for n in [plan.n_train, target.n_target] {
        if !sched.eval_lengths.contains(&n) {
            sched.eval_lengths.push(n);
        }
    }
    sched.eval_lengths.sort_unstable();
    let lp = Loop { task: plan.task, n_train: plan.n_train, optim, schedule: &sched, seed: plan.seed };
    let data = Data::Fixed { examples: &set.fine, seed: plan.seed ^ 0x5eed_f1e7 };
    let out = lp.run(&mut model, &data, observer)?;
    Ok((record(model.config.clone(), plan, optim, &sched, out, started), model))
}

/// No-op observer.
pub fn quiet() -> impl FnMut(u64, f64, &[MetricRow]) {
    |_, _, _| {}
}
