//! Finite-difference verification of every differentiable primitive and of
//! the full cell in each ablation mode.

use cms_tensor::{FiniteDiff, OpKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cells::{CellState, CmsCell};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Bound, ParamBuilder};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    /// Largest relative error over the case's inputs.
    pub worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.worst < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.worst).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results
            .iter()
            .filter(|r| r.worst.is_nan() || r.worst >= self.tolerance)
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub tolerance: f64,
    pub seed: u64,
    /// Backward rule to corrupt, for checking that the suite notices.
    pub fault: Option<OpKind>,
    /// Block settings for the cell cases; geometry is always replaced by
    /// the small [`cell_config`] one.
    pub template: ModelConfig,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            fault: None,
            template: ModelConfig::default(),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Weighted sum with fixed random weights, so every output entry carries a
/// distinct gradient.
fn probe<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(randn(&mut rng, &out.shape()));
    Ok(out.mul(w)?.sum())
}

fn worst<F>(fd: &FiniteDiff, inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(fd
        .relative_errors(inputs, f)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Worst relative error for the primitive `kind` on random inputs.
pub fn check_primitive(kind: OpKind, fd: &FiniteDiff, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut r = |s: &[usize]| randn(rng, s);
    let img = [2, 3, 6, 6];
    match kind {
        OpKind::Conv2d => worst(fd, &[r(&img), r(&[2, 3, 3, 3]), r(&[2])], |t, v| {
            probe(t, v[0].conv2d(v[1], Some(v[2]))?, 1)
        }),
        OpKind::Add => worst(fd, &[r(&[2, 3]), r(&[2, 3])], |t, v| {
            probe(t, v[0].add(v[1])?, 2)
        }),
        OpKind::Sub => worst(fd, &[r(&[2, 3]), r(&[2, 3])], |t, v| {
            probe(t, v[0].sub(v[1])?, 2)
        }),
        OpKind::Hadamard => worst(fd, &[r(&img), r(&img)], |t, v| probe(t, v[0].mul(v[1])?, 3)),
        OpKind::Scale => worst(fd, &[r(&[2, 3])], |t, v| probe(t, v[0].scale(-1.7), 4)),
        OpKind::AddScalar => worst(fd, &[r(&[2, 3])], |t, v| probe(t, v[0].add_scalar(0.3), 4)),
        OpKind::Sigmoid => worst(fd, &[r(&img)], |t, v| probe(t, v[0].sigmoid(), 5)),
        OpKind::Tanh => worst(fd, &[r(&img)], |t, v| probe(t, v[0].tanh(), 5)),
        OpKind::Abs => {
            // Stay clear of the kink at zero.
            let x = r(&[2, 3]).map(|v| if v.abs() < 0.1 { 0.5f64.copysign(v) } else { v });
            worst(fd, &[x], |t, v| probe(t, v[0].abs(), 6))
        }
        OpKind::SoftmaxRows => worst(fd, &[r(&[4, 5])], |t, v| probe(t, v[0].softmax_rows(), 7)),
        OpKind::MatMul => {
            let plain = worst(fd, &[r(&[3, 4]), r(&[4, 2])], |t, v| {
                probe(t, v[0].matmul(v[1])?, 8)
            })?;
            let batched = worst(fd, &[r(&[2, 4, 3]), r(&[2, 5, 4])], |t, v| {
                probe(t, v[0].matmul_t(v[1], true, true)?, 8)
            })?;
            Ok(plain.max(batched))
        }
        OpKind::Concat => worst(fd, &[r(&[2, 2]), r(&[2, 3])], |t, v| {
            probe(t, t.concat(&[v[0], v[1]], 1)?, 9)
        }),
        OpKind::Split => worst(fd, &[r(&[2, 5])], |t, v| {
            let parts = v[0].split(&[2, 3], 1)?;
            Ok(probe(t, parts[0], 10)?.add(probe(t, parts[1], 11)?)?)
        }),
        OpKind::Reshape => worst(fd, &[r(&[2, 6])], |t, v| {
            probe(t, v[0].reshape(&[3, 4])?, 12)
        }),
        OpKind::ExtractPatches => worst(fd, &[r(&[2, 2, 4, 4])], |t, v| {
            probe(t, v[0].extract_patches(2)?, 13)
        }),
        OpKind::RestorePatches => worst(fd, &[r(&[8, 2, 2, 2])], |t, v| {
            probe(t, v[0].restore_patches(2)?, 14)
        }),
        OpKind::LayerNorm => worst(fd, &[r(&img), r(&[3]), r(&[3])], |t, v| {
            probe(t, v[0].layer_norm(v[1], v[2], 1e-5)?, 15)
        }),
        OpKind::Sum => worst(fd, &[r(&[2, 3])], |_, v| Ok(v[0].sum().scale(0.7))),
        OpKind::Mean => worst(fd, &[r(&[2, 3])], |_, v| Ok(v[0].mean().scale(0.7))),
    }
}

/// The cell configuration the suite differentiates: one sample, one input
/// channel, two hidden channels, 4×4 states, scales {1, 2}.
pub fn cell_config(template: &ModelConfig, enable_ce: bool, enable_se: bool) -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 2,
        frame_channels: 1,
        frame_height: 4,
        frame_width: 4,
        enable_ce,
        enable_se,
        se_scales: vec![1, 2],
        ..template.clone()
    }
}

pub fn cell_case_name(enable_ce: bool, enable_se: bool) -> String {
    let sign = |b| if b { '+' } else { '-' };
    format!("cell[{}ce{}se]", sign(enable_ce), sign(enable_se))
}

/// Worst relative error of `d sum(ĥ) / d(x, h, c, every parameter)`.
pub fn check_cell(cfg: &ModelConfig, fd: &FiniteDiff, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut b = ParamBuilder::new(rng.gen());
    let cell = CmsCell::register(&mut b, "cell", cfg.frame_channels, cfg);
    let store = b.finish();
    let (hh, ww, c) = (cfg.frame_height, cfg.frame_width, cfg.hidden);
    let mut inputs = vec![
        randn(rng, &[1, cfg.frame_channels, hh, ww]),
        randn(rng, &[1, c, hh, ww]),
        randn(rng, &[1, c, hh, ww]),
    ];
    // Perturb the initial values so that zero biases and unit gains are
    // not special points.
    for (_, e) in store.iter() {
        let noise = randn(rng, e.value.shape()).scale(0.1);
        inputs.push(e.value.add(&noise)?);
    }
    worst(fd, &inputs, |tape, v| {
        let params = Bound::from_vars(tape, v[3..].to_vec());
        let out = cell.step(&params, v[0], CellState { h: v[1], c: v[2] })?;
        Ok(out.state.h.sum())
    })
}

/// Every primitive followed by the four cell modes.
pub fn run(opts: &Options) -> Result<GradcheckReport> {
    let fd = FiniteDiff {
        step: 1e-5,
        fault: opts.fault,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = Vec::new();
    for kind in OpKind::ALL {
        results.push(CheckResult {
            name: kind.name().to_string(),
            worst: check_primitive(kind, &fd, &mut rng)?,
        });
    }
    for (ce, se) in [(false, false), (true, false), (false, true), (true, true)] {
        results.push(CheckResult {
            name: cell_case_name(ce, se),
            worst: check_cell(&cell_config(&opts.template, ce, se), &fd, &mut rng)?,
        });
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        results,
    })
}
