//! Minibatch Adam training with step decay and validation-based checkpoint
//! selection, plus the loss-comparison and unit-count experiments.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{AvailabilityMode, ContextBlock};
use crate::error::{Error, Result};
use crate::layers::{adam_step, clip_global_norm, AdamConfig, AdamState, LrSchedule};
use crate::model::{Model, NetworkConfig, PsRnnNetwork};
use crate::rng::SeedStreams;
use crate::satd::{residue, satd, satd_loss_grad, SatdConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Satd,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Satd => "satd",
            Self::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "satd" => Ok(Self::Satd),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

/// Loss of one block and its gradient with respect to the prediction.
/// SATD works on `prediction - target`; MSE is the mean squared error.
pub fn loss_and_grad<T: Real>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    kind: LossKind,
    satd_cfg: &SatdConfig,
) -> Result<(f64, Tensor<f64>)> {
    let d = residue(prediction, target)?;
    match kind {
        LossKind::Satd => Ok((satd(&d, satd_cfg)?, satd_loss_grad(&d, satd_cfg)?)),
        LossKind::Mse => {
            let n = d.len() as f64;
            let loss = d.data().iter().map(|v| v * v).sum::<f64>() / n;
            let grad = d.data().iter().map(|v| 2.0 * v / n).collect();
            Ok((loss, Tensor::new(d.shape(), grad)?))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub total_iters: usize,
    /// `None` scales the reference milestones to `total_iters`.
    pub milestones: Option<Vec<usize>>,
    pub base_lr: f64,
    pub decay_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Final fraction of iterations searched for the best checkpoint.
    pub selection_window: f64,
    pub satd: SatdConfig,
    pub pu_size: usize,
    /// Restricts training to one availability condition; `None` uses every sample.
    pub availability: Option<AvailabilityMode>,
    pub grad_clip: Option<f64>,
    pub threads: usize,
    /// `None` checkpoints every `total_iters / 50` iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Satd,
            total_iters: 5000,
            milestones: None,
            base_lr: 1e-3,
            decay_ratio: 0.1,
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.01,
            selection_window: 0.2,
            satd: SatdConfig::default(),
            pu_size: 8,
            availability: None,
            grad_clip: Some(5.0),
            threads: 1,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// The full-length reference regime.
    pub fn full() -> Self {
        Self {
            total_iters: LrSchedule::FULL_TOTAL,
            milestones: Some(LrSchedule::FULL_MILESTONES.to_vec()),
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        let total = self.total_iters.max(1);
        let milestones = match &self.milestones {
            Some(m) => m.clone(),
            None => LrSchedule::scaled(total).milestones,
        };
        LrSchedule::new(self.base_lr, self.decay_ratio, milestones, total)
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or(self.total_iters / 50).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.satd.validate()?;
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("batch_size and threads must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.selection_window) {
            return Err(Error::Config("selection_window must lie in [0, 1]".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    /// Mean minibatch loss since the previous row.
    pub train_loss: f64,
    /// Validation loss in the training loss kind.
    pub val_loss: f64,
    pub val_satd: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "iteration,lr,train_loss,val_loss";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{:.9e},{:.9e}\n", r.iteration, r.lr, r.train_loss, r.val_loss));
        }
        s
    }

    /// Both validation metrics per checkpoint, whatever the training loss.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("iteration,val_satd,val_mse\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.9e},{:.9e}\n", r.iteration, r.val_satd, r.val_mse));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Checkpoint with the lowest validation loss inside the selection window.
    pub model: M,
    pub log: TrainingLog,
    pub best_iteration: usize,
    pub best_val_loss: f64,
}

impl<M> TrainOutcome<M> {
    pub fn initial(&self) -> &LogRow {
        &self.log.rows[0]
    }

    pub fn best(&self) -> &LogRow {
        self.log
            .rows
            .iter()
            .find(|r| r.iteration == self.best_iteration)
            .expect("best row is logged")
    }
}

/// Mean losses of a model over a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationMetrics {
    pub satd: f64,
    pub mse: f64,
}

impl ValidationMetrics {
    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Satd => self.satd,
            LossKind::Mse => self.mse,
        }
    }
}

fn pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Maps `f` over `items`, in parallel when a pool is given; output order is
/// always the input order.
fn map_ordered<I: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &[I],
    f: impl Fn(&I) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

fn check_block<M: Model<f32>>(model: &M, b: &ContextBlock) -> Result<()> {
    if b.n != model.pu_size() {
        return Err(Error::Shape(format!(
            "sample for N={} given to a model for N={}",
            b.n,
            model.pu_size()
        )));
    }
    Ok(())
}

pub fn validation_metrics<M: Model<f32>>(
    model: &M,
    samples: &[ContextBlock],
    satd_cfg: &SatdConfig,
    threads: usize,
) -> Result<ValidationMetrics> {
    let pool = pool(threads)?;
    validation_with(model, samples, satd_cfg, pool.as_ref())
}

fn validation_with<M: Model<f32>>(
    model: &M,
    samples: &[ContextBlock],
    satd_cfg: &SatdConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<ValidationMetrics> {
    if samples.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let per = map_ordered(pool, samples, |b| {
        check_block(model, b)?;
        let pred = model.predict(&b.context)?;
        let d = residue(&pred, &b.target)?;
        let mse = d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        Ok((satd(&d, satd_cfg)?, mse))
    })?;
    let n = samples.len() as f64;
    Ok(ValidationMetrics {
        satd: per.iter().map(|p| p.0).sum::<f64>() / n,
        mse: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// Deterministic validation split: a shuffled `fraction` (at least one sample)
/// goes to validation.
pub fn split_validation(samples: &[ContextBlock], fraction: f64, seed: u64) -> Result<(Vec<ContextBlock>, Vec<ContextBlock>)> {
    if samples.len() < 2 {
        return Err(Error::Usage("need at least two samples to split off validation".into()));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut SeedStreams::new(seed).stream("split"));
    let n_val = ((samples.len() as f64 * fraction).ceil() as usize).clamp(1, samples.len() - 1);
    let val = idx[..n_val].iter().map(|&i| samples[i].clone()).collect();
    let mut train_idx = idx[n_val..].to_vec();
    train_idx.sort_unstable();
    Ok((train_idx.iter().map(|&i| samples[i].clone()).collect(), val))
}

fn filter_mode(samples: &[ContextBlock], mode: Option<AvailabilityMode>) -> Vec<ContextBlock> {
    samples
        .iter()
        .filter(|b| mode.is_none_or(|m| b.mode == m))
        .cloned()
        .collect()
}

/// Splits off validation, then trains.
pub fn train<M: Model<f32>>(model: M, samples: &[ContextBlock], cfg: &TrainConfig) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    let samples = filter_mode(samples, cfg.availability);
    if samples.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    let (tr, val) = split_validation(&samples, cfg.validation_fraction, cfg.seed)?;
    train_split(model, &tr, &val, cfg)
}

/// Mean loss and summed gradient (already divided by the batch size) of one minibatch.
fn batch_step<M: Model<f32>>(
    model: &M,
    batch: &[&ContextBlock],
    cfg: &TrainConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let scale = 1.0 / batch.len() as f64;
    let one = |b: &&ContextBlock| -> Result<(f64, Vec<Tensor<f64>>)> {
        let (pred, cache) = model.forward(&b.context)?;
        let (loss, g) = loss_and_grad(&pred, &b.target, cfg.loss, &cfg.satd)?;
        let g = Tensor::new(g.shape(), g.data().iter().map(|v| (v * scale) as f32).collect())?;
        Ok((loss, model.backward(&cache, &g)?))
    };
    let mut total: Option<Vec<Tensor<f64>>> = None;
    let mut loss = 0.0;
    let mut add = |(l, g): (f64, Vec<Tensor<f64>>)| {
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    for (p, q) in a.data_mut().iter_mut().zip(x.data()) {
                        *p += q;
                    }
                }
            }
        }
    };
    match pool {
        // Per-sample results come back in batch order and are summed in that order.
        Some(_) => map_ordered(pool, batch, one)?.into_iter().for_each(&mut add),
        None => {
            for b in batch {
                add(one(b)?);
            }
        }
    }
    Ok((loss * scale, total.expect("non-empty batch")))
}

/// Trains on `train_set`, checkpointing against `val_set`.
pub fn train_split<M: Model<f32>>(
    mut model: M,
    train_set: &[ContextBlock],
    val_set: &[ContextBlock],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training and validation sets must be non-empty".into()));
    }
    for b in train_set.iter().chain(val_set) {
        check_block(&model, b)?;
    }
    let pool = pool(cfg.threads)?;
    let pool = pool.as_ref();
    let sched = cfg.schedule()?;
    let total = cfg.total_iters;
    let every = cfg.checkpoint_interval();
    let window_start = total - (total as f64 * cfg.selection_window).round() as usize;
    let mut adam = AdamState::new(AdamConfig::default(), model.trainable().iter().map(|(_, t)| t.len()))?;
    let mut batch_rng = SeedStreams::new(cfg.seed).stream("batches");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut next_batch = || -> Vec<&ContextBlock> {
        (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                cursor += 1;
                &train_set[order[cursor - 1]]
            })
            .collect()
    };

    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, M)> = None;
    let mut checkpoint = |model: &M, iteration: usize, train_loss: f64, rows: &mut Vec<LogRow>| -> Result<()> {
        let m = validation_with(model, val_set, &cfg.satd, pool)?;
        let val_loss = m.get(cfg.loss);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        rows.push(LogRow {
            iteration,
            lr: sched.lr_at(iteration.min(sched.total_iters - 1))?,
            train_loss,
            val_loss,
            val_satd: m.satd,
            val_mse: m.mse,
        });
        let eligible = iteration >= window_start && (iteration > 0 || total == 0);
        if eligible && best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, iteration, model.clone()));
        }
        Ok(())
    };

    // The first row reports the untrained model.
    let probe: Vec<&ContextBlock> = train_set.iter().take(cfg.batch_size).collect();
    let first = map_ordered(pool, &probe, |b| {
        let pred = model.predict(&b.context)?;
        Ok(loss_and_grad(&pred, &b.target, cfg.loss, &cfg.satd)?.0)
    })?;
    checkpoint(&model, 0, first.iter().sum::<f64>() / first.len() as f64, &mut rows)?;

    let (mut acc, mut count) = (0.0, 0usize);
    for it in 0..total {
        let batch = next_batch();
        let (loss, mut grads) = batch_step(&model, &batch, cfg, pool)?;
        let finite = loss.is_finite() && grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Divergence { iteration: it });
        }
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = sched.lr_at(it)?;
        let mut params: Vec<&mut Tensor<f32>> = model.trainable_mut().into_iter().map(|(_, t)| t).collect();
        adam_step(&mut params, &grads, &mut adam, lr)?;
        acc += loss;
        count += 1;
        let done = it + 1;
        if done % every == 0 || done == total {
            checkpoint(&model, done, acc / count as f64, &mut rows)?;
            acc = 0.0;
            count = 0;
        }
    }
    let (best_val_loss, best_iteration, model) = best.expect("at least one eligible checkpoint");
    Ok(TrainOutcome {
        model,
        log: TrainingLog { rows },
        best_iteration,
        best_val_loss,
    })
}

/// Fresh network for `config` with weights drawn from the seed's init stream.
pub fn init_network(config: NetworkConfig, seed: u64) -> Result<PsRnnNetwork<f32>> {
    PsRnnNetwork::init(config, &mut SeedStreams::new(seed).stream("init"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComparisonRow {
    pub seed: u64,
    pub satd_model: ValidationMetrics,
    pub mse_model: ValidationMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossComparison {
    pub rows: Vec<LossComparisonRow>,
    /// Median over seeds of val SATD (MSE-trained) minus val SATD (SATD-trained).
    pub median_gap: f64,
    pub median_satd_of_satd: f64,
    pub median_satd_of_mse: f64,
}

impl LossComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,satd_model_val_satd,satd_model_val_mse,mse_model_val_satd,mse_model_val_mse\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                r.seed, r.satd_model.satd, r.satd_model.mse, r.mse_model.satd, r.mse_model.mse
            ));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains an SATD and an MSE model per seed from the same initial weights on
/// the same batches and compares them on the same validation set.
/// `arms` overrides the two loss kinds, e.g. for a same-loss control.
pub fn compare_losses(
    samples: &[ContextBlock],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    arms: (LossKind, LossKind),
) -> Result<LossComparison> {
    if seeds.len() < 3 {
        return Err(Error::Usage("loss comparison needs at least three seeds".into()));
    }
    let samples = filter_mode(samples, cfg.availability);
    let (tr, val) = split_validation(&samples, cfg.validation_fraction, cfg.seed)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let init = init_network(net.clone(), seed)?;
        let run = |loss: LossKind| -> Result<ValidationMetrics> {
            let c = TrainConfig { loss, seed, ..cfg.clone() };
            let out = train_split(init.clone(), &tr, &val, &c)?;
            validation_metrics(&out.model, &val, &cfg.satd, cfg.threads)
        };
        let satd_model = run(arms.0)?;
        let mse_model = run(arms.1)?;
        rows.push(LossComparisonRow { seed, satd_model, mse_model });
    }
    Ok(LossComparison {
        median_gap: median(rows.iter().map(|r| r.mse_model.satd - r.satd_model.satd).collect()),
        median_satd_of_satd: median(rows.iter().map(|r| r.satd_model.satd).collect()),
        median_satd_of_mse: median(rows.iter().map(|r| r.mse_model.satd).collect()),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub units: usize,
    pub params: usize,
    pub val_satd: f64,
    pub val_mse: f64,
    pub model: PsRnnNetwork<f32>,
}

/// One model per unit count under the same budget and data.
pub fn ablate_units(samples: &[ContextBlock], counts: &[usize], net: &NetworkConfig, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Config("unit count must be at least 1".into()));
    }
    let samples = filter_mode(samples, cfg.availability);
    let (tr, val) = split_validation(&samples, cfg.validation_fraction, cfg.seed)?;
    counts
        .iter()
        .map(|&units| {
            let model = init_network(net.clone().with_units(units), cfg.seed)?;
            let out = train_split(model, &tr, &val, cfg)?;
            let m = validation_metrics(&out.model, &val, &cfg.satd, cfg.threads)?;
            Ok(AblationRow {
                units,
                params: out.model.param_count(),
                val_satd: m.satd,
                val_mse: m.mse,
                model: out.model,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_corpus, CorpusSpec};

    #[test]
    fn loss_examples() {
        let p = Tensor::<f64>::full(&[4, 4], 0.5).unwrap();
        let t = Tensor::<f64>::zeros(&[4, 4]).unwrap();
        let (l, _) = loss_and_grad(&p, &t, LossKind::Mse, &SatdConfig::default()).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        for kind in [LossKind::Satd, LossKind::Mse] {
            let (l, g) = loss_and_grad(&p, &p, kind, &SatdConfig::default()).unwrap();
            assert_eq!(l, 0.0);
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        let bad = Tensor::<f64>::zeros(&[4, 8]).unwrap();
        assert!(matches!(loss_and_grad(&p, &bad, LossKind::Mse, &SatdConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_iterations_keep_the_model() {
        let data = synthetic_corpus(&CorpusSpec::new(4, 40), 1).unwrap();
        let net = init_network(NetworkConfig::with_pu_size(4), 3).unwrap();
        let cfg = TrainConfig { total_iters: 0, pu_size: 4, validation_fraction: 0.1, ..TrainConfig::default() };
        let out = train(net.clone(), &data, &cfg).unwrap();
        assert_eq!(out.model, net);
        assert_eq!(out.log.rows.len(), 1);
        assert!(out.log.to_csv().starts_with("iteration,lr,train_loss,val_loss\n"));
    }

    #[test]
    fn short_run_is_reproducible_and_thread_invariant() {
        let data = synthetic_corpus(&CorpusSpec::new(4, 120), 2).unwrap();
        let net = init_network(NetworkConfig::with_pu_size(4), 5).unwrap();
        let cfg = TrainConfig { total_iters: 20, batch_size: 4, pu_size: 4, validation_fraction: 0.1, ..TrainConfig::default() };
        let a = train(net.clone(), &data, &cfg).unwrap();
        let b = train(net.clone(), &data, &cfg).unwrap();
        let c = train(net, &data, &TrainConfig { threads: 3, ..cfg.clone() }).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, c.log);
        assert_eq!(a.model, c.model);
        assert_eq!(a.log.rows.len(), 21);
        let last = a.log.rows.last().unwrap();
        assert!(a.best_val_loss <= last.val_loss);
        assert!(a.best_iteration >= 16);
    }

    #[test]
    fn rejects_empty_data_and_zero_units() {
        let net = init_network(NetworkConfig::with_pu_size(4), 5).unwrap();
        let cfg = TrainConfig { pu_size: 4, ..TrainConfig::default() };
        assert!(matches!(train(net, &[], &cfg), Err(Error::Usage(_))));
        assert!(matches!(
            ablate_units(&[], &[0, 1], &NetworkConfig::with_pu_size(4), &cfg),
            Err(Error::Config(_))
        ));
    }
}
