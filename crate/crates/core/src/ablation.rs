//! CE/SE ablation sweeps over a shared dataset.

use std::time::Instant;

use crate::cells::CmsModel;
use crate::checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::data::{build_dataset, Dataset, Geometry};
use crate::error::Result;
use crate::seed::derive;
use crate::train::{self, accumulate_batch, evaluate, sample_mask, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// CE and SE enabled.
    Cms,
    CeOnly,
    SeOnly,
    /// Plain ConvLSTM, widened to roughly the parameter count of [`Variant::Cms`].
    Plain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Cms,
        Variant::CeOnly,
        Variant::SeOnly,
        Variant::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cms => "cms",
            Variant::CeOnly => "ce-only",
            Variant::SeOnly => "se-only",
            Variant::Plain => "convlstm",
        }
    }

    pub fn model(self, base: &ModelConfig) -> ModelConfig {
        let (ce, se) = match self {
            Variant::Cms => (true, true),
            Variant::CeOnly => (true, false),
            Variant::SeOnly => (false, true),
            Variant::Plain => (false, false),
        };
        let cfg = ModelConfig {
            enable_ce: ce,
            enable_se: se,
            ..base.clone()
        };
        if self == Variant::Plain {
            let target = Variant::Cms.model(base).parameter_count();
            ModelConfig {
                hidden: matched_hidden(&cfg, target),
                ..cfg
            }
        } else {
            cfg
        }
    }
}

/// Hidden width whose parameter count is closest to `target`.
pub fn matched_hidden(cfg: &ModelConfig, target: usize) -> usize {
    let count = |h: usize| {
        ModelConfig {
            hidden: h,
            ..cfg.clone()
        }
        .parameter_count()
    };
    let mut h = 1;
    while count(h + 1) <= target {
        h += 1;
    }
    if target.abs_diff(count(h + 1)) < target.abs_diff(count(h)) {
        h + 1
    } else {
        h
    }
}

/// Dataset and run settings shared by every variant and seed.
#[derive(Clone, Debug)]
pub struct Protocol {
    pub geometry: Geometry,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub base: RunConfig,
    pub seeds: Vec<u64>,
}

impl Protocol {
    /// 32×32 frames, two shapes, 10→10, 2000/200 sequences; two layers of
    /// 16 hidden channels with 5×5 kernels and scales {1, 2}; 2000
    /// iterations at batch 8 and learning rate 1e-3; seeds 1, 2, 3.
    pub fn desk_scale() -> Self {
        let base = RunConfig {
            model: ModelConfig {
                layers: 2,
                hidden: 16,
                kernel: 5,
                frame_height: 32,
                frame_width: 32,
                se_scales: vec![1, 2],
                ..ModelConfig::default()
            },
            t_in: 10,
            t_out: 10,
            lr: 1e-3,
            batch: 8,
            iters: 2000,
            ..RunConfig::default()
        };
        Self {
            geometry: Geometry {
                frame_size: 32,
                shapes: 2,
                frames: 20,
            },
            n_train: 2000,
            n_test: 200,
            data_seed: 0,
            base,
            seeds: vec![1, 2, 3],
        }
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        build_dataset(self.data_seed, self.n_train, self.n_test, &self.geometry)
    }

    /// The run configuration of `variant` under `seed`.
    pub fn run_config(&self, variant: Variant, seed: u64) -> RunConfig {
        RunConfig {
            model: variant.model(&self.base.model),
            init_seed: derive(seed, &[1]),
            shuffle_seed: derive(seed, &[2]),
            sampling_seed: derive(seed, &[3]),
            ..self.base.clone()
        }
    }

    /// Seconds for one training sample (forward and backward) of `variant`,
    /// the faster of two timings.
    pub fn time_sample(&self, variant: Variant, data: &Dataset) -> Result<f64> {
        let cfg = self.run_config(variant, self.seeds[0]);
        let (model, mut store) = CmsModel::build(&cfg.model, cfg.init_seed)?;
        let batch = data.batch(&[0], cfg.t_in)?;
        let mask = sample_mask(&cfg.sampling(), 0, cfg.t_out, 1, cfg.sampling_seed);
        let mut best = f64::INFINITY;
        for _ in 0..2 {
            let start = Instant::now();
            accumulate_batch(&model, &mut store, &batch, &mask)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        Ok(best)
    }

    /// Projected seconds to train `runs` models of `variant` and evaluate
    /// each on the test split, from a measured per-sample time.
    pub fn projected_seconds(&self, sample_seconds: f64, runs: usize) -> f64 {
        let train = (self.base.iters * self.base.batch) as f64 * sample_seconds;
        // Evaluation runs the forward pass only, about a third of a step.
        let eval = self.n_test as f64 * sample_seconds / 3.0;
        runs as f64 * (train + eval)
    }
}

pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub test_mse: f64,
    pub checkpoint: Vec<u8>,
    pub outcome: TrainOutcome,
}

impl RunResult {
    /// Mean of the first `k` losses against the mean of the last `k`.
    pub fn loss_drop(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (
            mean(&self.losses[..k]),
            mean(&self.losses[self.losses.len() - k..]),
        )
    }
}

pub fn run_variant(
    protocol: &Protocol,
    variant: Variant,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<RunResult> {
    let cfg = protocol.run_config(variant, seed);
    let outcome = train::train(&cfg, train_set, None, |_| {})?;
    let report = evaluate(&outcome.model, &outcome.store, test_set, cfg.t_in)?;
    Ok(RunResult {
        variant,
        seed,
        losses: outcome.log.iter().map(|r| r.loss).collect(),
        test_mse: report.aggregate().mse,
        checkpoint: checkpoint::encode(&outcome.store, &outcome.opt),
        outcome,
    })
}
