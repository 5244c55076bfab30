//! Loss, scheduled sampling, the optimisation loop and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cms_tensor::{Tape, Tensor, Var};

use crate::cells::{CmsModel, Teacher};
use crate::checkpoint;
use crate::config::{RunConfig, SamplingSchedule};
use crate::data::{BatchOrder, Dataset, SequenceBatch};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::MetricReport;
use crate::nn::{AdamW, ParamStore};
use crate::seed::unit;

pub const CONFIG_FILE: &str = "run.cfg";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cmsl";

/// `mean(|d| + d²)` with `d = pred - target`.
pub fn loss_l1_l2<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let d = pred.sub(target)?;
    Ok(d.abs().add(d.mul(d)?)?.mean())
}

/// Scheduled-sampling mask `[batch][t_out - 1]`: `true` feeds ground truth.
/// Entry `(b, t)` is an independent Bernoulli(ε(iteration)) draw keyed by
/// `(seed, iteration, b, t)`.
pub fn sample_mask(
    schedule: &SamplingSchedule,
    iteration: usize,
    t_out: usize,
    batch: usize,
    seed: u64,
) -> Vec<Vec<bool>> {
    let eps = schedule.epsilon(iteration);
    (0..batch)
        .map(|b| {
            (0..t_out.saturating_sub(1))
                .map(|t| unit(seed, &[iteration as u64, b as u64, t as u64]) < eps)
                .collect()
        })
        .collect()
}

/// Checks that a dataset's geometry matches the run.
pub fn check_dataset(config: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &config.model;
    let expect = (
        config.t_in + config.t_out,
        m.frame_channels,
        m.frame_height,
        m.frame_width,
    );
    let found = (data.frames, data.channels, data.height, data.width);
    if expect != found {
        return Err(Error::Invalid(format!(
            "dataset holds (T, C, H, W) = {found:?} but the run expects {expect:?}"
        )));
    }
    Ok(())
}

/// One log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub epsilon: f64,
    pub elapsed_ms: u128,
}

pub fn log_csv(rows: &[LogRow]) -> Result<Vec<u8>> {
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "loss", "epsilon", "elapsed_ms"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.epsilon),
            r.elapsed_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Invalid(format!("csv: {e}")))
}

pub struct TrainOutcome {
    pub model: CmsModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub log: Vec<LogRow>,
}

/// Forward, loss and backward for one batch, one sample at a time so that
/// peak memory does not grow with the batch. Gradients of the batch-mean
/// loss are summed into `store` in sample order. Returns the batch loss.
pub fn accumulate_batch(
    model: &CmsModel,
    store: &mut ParamStore,
    batch: &SequenceBatch,
    mask: &[Vec<bool>],
) -> Result<f64> {
    let observed = batch.observed();
    let future = batch.future();
    let n = observed.shape()[0];
    let mut total = 0.0;
    for b in 0..n {
        let obs = sample(&observed, b)?;
        let fut = sample(&future, b)?;
        let tape = Tape::new();
        let p = store.bind(&tape);
        let teacher = Teacher {
            future: &fut,
            mask: &mask[b..b + 1],
        };
        let rollout = model.forward(&p, &obs, batch.t_out, Some(teacher), false)?;
        let loss =
            loss_l1_l2(rollout.predictions, tape.constant(fut.clone()))?.scale(1.0 / n as f64);
        total += loss.value().item();
        let mut grads = tape.backward(loss)?;
        store.accumulate(&p, &mut grads)?;
    }
    Ok(total)
}

/// Sample `b` of a `[B, ...]` tensor, keeping a unit batch axis.
fn sample(t: &Tensor, b: usize) -> Result<Tensor> {
    let mut shape = t.shape().to_vec();
    let per = t.len() / shape[0];
    shape[0] = 1;
    Ok(Tensor::new(
        &shape,
        t.data()[b * per..(b + 1) * per].to_vec(),
    )?)
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }
}

/// Runs the configured number of iterations. With an output directory the
/// run writes its config, a CSV log and a checkpoint every
/// [`RunConfig::checkpoint_interval`] iterations and after the last one.
pub fn train(
    config: &RunConfig,
    data: &Dataset,
    out: Option<&RunDir>,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, data)?;
    let (model, mut store) = CmsModel::build(&config.model, config.init_seed)?;
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let schedule = config.sampling();
    let mut order = BatchOrder::new(data.len, config.shuffle_seed);
    let interval = config.checkpoint_interval();
    if let Some(dir) = out {
        write_atomic(&dir.config(), config.to_text().as_bytes())?;
    }
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.iters);
    for iteration in 0..config.iters {
        let indices = order.next_batch(config.batch);
        let batch = data.batch(&indices, config.t_in)?;
        let mask = sample_mask(
            &schedule,
            iteration,
            config.t_out,
            config.batch,
            config.sampling_seed,
        );
        let loss = accumulate_batch(&model, &mut store, &batch, &mask)?;
        if !loss.is_finite() {
            store.zero_grads();
            return Err(Error::NonFiniteLoss { iteration });
        }
        opt.step(&mut store)?;
        let row = LogRow {
            iteration,
            loss,
            epsilon: schedule.epsilon(iteration),
            elapsed_ms: start.elapsed().as_millis(),
        };
        on_step(&row);
        log.push(row);
        if let Some(dir) = out {
            if (iteration + 1) % interval == 0 || iteration + 1 == config.iters {
                checkpoint::save(&store, &opt, &dir.checkpoint())?;
                write_atomic(&dir.log(), &log_csv(&log)?)?;
            }
        }
    }
    if let (Some(dir), 0) = (out, config.iters) {
        checkpoint::save(&store, &opt, &dir.checkpoint())?;
        write_atomic(&dir.log(), &log_csv(&log)?)?;
    }
    Ok(TrainOutcome {
        model,
        store,
        opt,
        log,
    })
}

/// Autoregressive predictions `[T_out, C, H, W]` for sequence `index`. Only
/// the observed frames reach the model.
pub fn predict(
    model: &CmsModel,
    store: &ParamStore,
    data: &Dataset,
    index: usize,
    t_in: usize,
) -> Result<Tensor> {
    let batch = data.batch(&[index], t_in)?;
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let rollout = model.forward(&p, &batch.observed(), batch.t_out, None, false)?;
    let s = rollout.predictions.shape();
    Ok(rollout.predictions.value().reshape(&s[1..])?)
}

/// Metrics of pure autoregressive rollouts over every sequence of `data`.
pub fn evaluate(
    model: &CmsModel,
    store: &ParamStore,
    data: &Dataset,
    t_in: usize,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for i in 0..data.len {
        let pred = predict(model, store, data, i, t_in)?;
        let target = data.batch(&[i], t_in)?.future();
        let s = target.shape();
        report.add_sequence(i, &pred, &target.reshape(&s[1..])?)?;
    }
    Ok(report)
}

/// Loads a checkpoint and rebuilds the model described by `config`,
/// failing on the first parameter whose name or shape disagrees.
pub fn load_model(config: &RunConfig, path: &Path) -> Result<(CmsModel, ParamStore, AdamW)> {
    let (store, opt) = checkpoint::load(path)?;
    let model = CmsModel::for_store(&config.model, &store)?;
    Ok((model, store, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cms_tensor::FiniteDiff;

    #[test]
    fn loss_reference_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 0.25));
        assert_eq!(loss_l1_l2(a, a).unwrap().value().item(), 0.0);
        let b = tape.constant(Tensor::full(&[2, 3], 0.75));
        assert_eq!(loss_l1_l2(b, a).unwrap().value().item(), 0.75);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let pred = Tensor::from_fn(&[2, 5], |i| 0.1 * i as f64);
        let target = Tensor::from_fn(&[2, 5], |i| 0.37 + 0.05 * (i % 3) as f64);
        let errs = FiniteDiff::default()
            .relative_errors(&[pred, target], |_, v| loss_l1_l2(v[0], v[1]))
            .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }

    #[test]
    fn mask_schedule_extremes_and_determinism() {
        let s = SamplingSchedule {
            eps0: 1.0,
            eps_min: 0.0,
            decay_iters: 100,
        };
        assert!(sample_mask(&s, 0, 10, 4, 1).iter().flatten().all(|&m| m));
        assert!(sample_mask(&s, 100, 10, 4, 1).iter().flatten().all(|&m| !m));
        let mid = sample_mask(&s, 50, 10, 8, 1);
        assert_eq!(mid, sample_mask(&s, 50, 10, 8, 1));
        assert_eq!(mid.len(), 8);
        assert!(mid.iter().all(|r| r.len() == 9));
        let frac = mid.iter().flatten().filter(|&&m| m).count() as f64 / 72.0;
        assert!((0.25..0.75).contains(&frac), "{frac}");
        assert_ne!(mid, sample_mask(&s, 50, 10, 8, 2));
    }

    #[test]
    fn epsilon_is_monotone() {
        let s = SamplingSchedule {
            eps0: 1.0,
            eps_min: 0.1,
            decay_iters: 7,
        };
        let e: Vec<f64> = (0..20).map(|i| s.epsilon(i)).collect();
        assert!(e.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(e[19], 0.1);
    }
}
