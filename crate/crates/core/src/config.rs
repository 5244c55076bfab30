//! Experiment configuration and its line-based `key=value` file format.
//!
//! ```text
//! # comments start with '#'
//! layers=2
//! hidden=16
//! se_scales=1,2
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key, so a
//! saved file fully describes the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Network topology and block switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub frame_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub enable_ce: bool,
    pub ce_iterations: usize,
    pub ce_scale: f64,
    pub enable_se: bool,
    pub se_scales: Vec<usize>,
    /// One Q/K/V projection set shared by all scales instead of one per scale.
    pub share_qkv: bool,
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            kernel: 5,
            frame_channels: 1,
            frame_height: 32,
            frame_width: 32,
            enable_ce: true,
            ce_iterations: 2,
            ce_scale: 2.0,
            enable_se: true,
            se_scales: vec![1, 2, 4],
            share_qkv: false,
            layer_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.hidden == 0 || self.frame_channels == 0 {
            return fail("hidden and frame_channels must be positive".into());
        }
        if self.frame_height == 0 || self.frame_width == 0 {
            return fail("frame size must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel size {} must be odd", self.kernel));
        }
        if self.enable_ce {
            if self.ce_iterations == 0 {
                return fail("ce_iterations must be at least 1".into());
            }
            if !(self.ce_scale > 0.0 && self.ce_scale.is_finite()) {
                return fail(format!("ce_scale {} must be positive", self.ce_scale));
            }
        }
        if self.enable_se {
            if self.se_scales.is_empty() {
                return fail("se_scales must list at least one grid factor".into());
            }
            for &g in &self.se_scales {
                if g == 0
                    || !self.frame_height.is_multiple_of(g)
                    || !self.frame_width.is_multiple_of(g)
                {
                    return fail(format!(
                        "SE scale {g} does not divide the {}x{} state",
                        self.frame_height, self.frame_width
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of scalar parameters, evaluated in closed form from the layer
    /// inventory (it does not build the model).
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let c = self.hidden;
        let conv = |cin: usize, cout: usize, kk: usize, bias: bool| {
            cin * cout * kk + if bias { cout } else { 0 }
        };
        let mut total = 0;
        for layer in 0..self.layers {
            let cin = if layer == 0 { self.frame_channels } else { c };
            if self.enable_ce {
                total += conv(c, cin, k2, true) + conv(cin, c, k2, true);
            }
            total += 4 * (conv(cin, c, k2, true) + conv(c, c, k2, false));
            if self.layer_norm {
                total += 4 * 2 * c;
            }
            if self.enable_se {
                let n = self.se_scales.len();
                let sets = if self.share_qkv { 1 } else { n };
                total += sets * 3 * conv(2 * c, 2 * c, 1, true);
                total += conv(2 * n * c, 2 * c, k2, true);
                total += 3 * (conv(2 * c, c, k2, true) + conv(c, c, k2, false));
            }
        }
        total + conv(c, self.frame_channels, 1, true)
    }
}

/// Scheduled-sampling shape: probability of feeding ground truth decays
/// linearly from 1 to `eps_min` over `decay_iters` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingSchedule {
    pub eps0: f64,
    pub eps_min: f64,
    pub decay_iters: usize,
}

impl SamplingSchedule {
    pub fn epsilon(&self, iteration: usize) -> f64 {
        if self.decay_iters == 0 {
            return self.eps_min;
        }
        let linear = self.eps0 - iteration as f64 / self.decay_iters as f64;
        linear.max(self.eps_min)
    }
}

/// Complete description of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub t_in: usize,
    pub t_out: usize,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub weight_decay: f64,
    pub eps_min: f64,
    /// `None` means half of `iters`.
    pub sampling_decay_iters: Option<usize>,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub sampling_seed: u64,
    /// `None` means every 10% of `iters`.
    pub checkpoint_every: Option<usize>,
    /// Reserved; only `0` (disabled) is accepted.
    pub grad_clip: f64,
    pub dataset: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            t_in: 10,
            t_out: 10,
            lr: 1e-3,
            batch: 8,
            iters: 2000,
            weight_decay: 1e-4,
            eps_min: 0.0,
            sampling_decay_iters: None,
            init_seed: 1,
            shuffle_seed: 2,
            sampling_seed: 3,
            checkpoint_every: None,
            grad_clip: 0.0,
            dataset: None,
        }
    }
}

const KEYS: &[&str] = &[
    "layers",
    "hidden",
    "kernel",
    "frame_channels",
    "frame_height",
    "frame_width",
    "enable_ce",
    "ce_iterations",
    "ce_scale",
    "enable_se",
    "se_scales",
    "share_qkv",
    "layer_norm",
    "t_in",
    "t_out",
    "lr",
    "batch",
    "iters",
    "weight_decay",
    "eps_min",
    "sampling_decay_iters",
    "init_seed",
    "shuffle_seed",
    "sampling_seed",
    "checkpoint_every",
    "grad_clip",
    "dataset",
];

impl RunConfig {
    pub fn sampling(&self) -> SamplingSchedule {
        SamplingSchedule {
            eps0: 1.0,
            eps_min: self.eps_min,
            decay_iters: self.sampling_decay_iters.unwrap_or(self.iters / 2),
        }
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every
            .unwrap_or((self.iters / 10).max(1))
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(Error::Invalid(m.into()));
        if self.t_in == 0 || self.t_out == 0 {
            return fail("t_in and t_out must be positive");
        }
        if self.batch == 0 {
            return fail("batch must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be a non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.eps_min) {
            return fail("eps_min must lie in [0, 1]");
        }
        if self.grad_clip != 0.0 {
            return fail("grad_clip is reserved and must be 0");
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config { line: line_no, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "layers" => m.layers = num(key, value)?,
            "hidden" => m.hidden = num(key, value)?,
            "kernel" => m.kernel = num(key, value)?,
            "frame_channels" => m.frame_channels = num(key, value)?,
            "frame_height" => m.frame_height = num(key, value)?,
            "frame_width" => m.frame_width = num(key, value)?,
            "enable_ce" => m.enable_ce = flag(key, value)?,
            "ce_iterations" => m.ce_iterations = num(key, value)?,
            "ce_scale" => m.ce_scale = num(key, value)?,
            "enable_se" => m.enable_se = flag(key, value)?,
            "se_scales" => {
                m.se_scales = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "share_qkv" => m.share_qkv = flag(key, value)?,
            "layer_norm" => m.layer_norm = flag(key, value)?,
            "t_in" => self.t_in = num(key, value)?,
            "t_out" => self.t_out = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "eps_min" => self.eps_min = num(key, value)?,
            "sampling_decay_iters" => self.sampling_decay_iters = auto(key, value)?,
            "init_seed" => self.init_seed = num(key, value)?,
            "shuffle_seed" => self.shuffle_seed = num(key, value)?,
            "sampling_seed" => self.sampling_seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = auto(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "dataset" => {
                self.dataset = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let scales: Vec<String> = m.se_scales.iter().map(|g| g.to_string()).collect();
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let lines: [(&str, String); 27] = [
            ("layers", m.layers.to_string()),
            ("hidden", m.hidden.to_string()),
            ("kernel", m.kernel.to_string()),
            ("frame_channels", m.frame_channels.to_string()),
            ("frame_height", m.frame_height.to_string()),
            ("frame_width", m.frame_width.to_string()),
            ("enable_ce", m.enable_ce.to_string()),
            ("ce_iterations", m.ce_iterations.to_string()),
            ("ce_scale", fmt_f64(m.ce_scale)),
            ("enable_se", m.enable_se.to_string()),
            ("se_scales", scales.join(",")),
            ("share_qkv", m.share_qkv.to_string()),
            ("layer_norm", m.layer_norm.to_string()),
            ("t_in", self.t_in.to_string()),
            ("t_out", self.t_out.to_string()),
            ("lr", fmt_f64(self.lr)),
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("weight_decay", fmt_f64(self.weight_decay)),
            ("eps_min", fmt_f64(self.eps_min)),
            ("sampling_decay_iters", opt(self.sampling_decay_iters)),
            ("init_seed", self.init_seed.to_string()),
            ("shuffle_seed", self.shuffle_seed.to_string()),
            ("sampling_seed", self.sampling_seed.to_string()),
            ("checkpoint_every", opt(self.checkpoint_every)),
            ("grad_clip", fmt_f64(self.grad_clip)),
            (
                "dataset",
                self.dataset
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
        ];
        debug_assert_eq!(lines.len(), KEYS.len());
        for (k, v) in lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

/// Shortest representation that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got {value:?}")),
    }
}

fn auto(key: &str, value: &str) -> std::result::Result<Option<usize>, String> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}
