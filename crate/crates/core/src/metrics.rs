//! Frame quality metrics.
//!
//! MSE and MAE follow the per-frame pixel-sum convention on the 0-255 scale:
//! `mse = Σ (255·d)²`, `mae = Σ |255·d|`, averaged over frames when
//! aggregated. PSNR uses the mean squared error on the `[0, 1]` scale and
//! is capped at [`PSNR_CAP`] dB for identical frames. SSIM is the standard
//! single-scale index with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
//! K2 = 0.03, dynamic range 1, averaged over valid window positions.

use std::path::Path;

use cms_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pixel-summed squared error on the 0-255 scale.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = 255.0 * (p - t);
            d * d
        })
        .sum())
}

/// Pixel-summed absolute error on the 0-255 scale.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (255.0 * (p - t)).abs())
        .sum())
}

/// `10·log10(max² / mse)` with `mse` the mean squared error on the input
/// scale.
pub fn psnr(pred: &Tensor, target: &Tensor, max_value: f64) -> Result<f64> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    let m = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(m, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g[y] * g[x] / (total * total);
        }
    }
    w
}

/// SSIM of two single-channel `h × w` planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    let (va, vb) = (a[i], b[i]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * (va * va);
                    sbb += k * (vb * vb);
                    sab += k * (va * vb);
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of `[C, H, W]` (or `[H, W]`) frames, averaged over channels.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let s = pred.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 => (s[1], s[2]),
        _ => {
            return Err(Error::Invalid(format!(
                "SSIM expects [C, H, W] frames, got {s:?}"
            )))
        }
    };
    let plane = h * w;
    let channels = pred.len() / plane;
    let mut acc = 0.0;
    for c in 0..channels {
        let r = c * plane..(c + 1) * plane;
        acc += ssim_plane(&pred.data()[r.clone()], &target.data()[r], h, w)?;
    }
    Ok(acc / channels as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl FrameMetrics {
    pub fn of(pred: &Tensor, target: &Tensor) -> Result<Self> {
        Ok(Self {
            mse: mse(pred, target)?,
            mae: mae(pred, target)?,
            psnr: psnr(pred, target, 1.0)?,
            ssim: ssim(pred, target)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub sequence: usize,
    pub frame: usize,
    pub metrics: FrameMetrics,
}

/// Per-frame metrics with a mean over all frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<FrameRow>,
}

impl MetricReport {
    /// Adds one row per frame of `pred` and `target`, both `[T, C, H, W]`.
    pub fn add_sequence(&mut self, sequence: usize, pred: &Tensor, target: &Tensor) -> Result<()> {
        same_shape(pred, target)?;
        let s = pred.shape();
        if s.len() != 4 {
            return Err(Error::Invalid(format!(
                "expected [T, C, H, W] frames, got {s:?}"
            )));
        }
        let per = s[1] * s[2] * s[3];
        let frame_shape = [s[1], s[2], s[3]];
        for t in 0..s[0] {
            let r = t * per..(t + 1) * per;
            let p = Tensor::new(&frame_shape, pred.data()[r.clone()].to_vec())?;
            let q = Tensor::new(&frame_shape, target.data()[r].to_vec())?;
            self.rows.push(FrameRow {
                sequence,
                frame: t,
                metrics: FrameMetrics::of(&p, &q)?,
            });
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.rows.len()
    }

    /// Mean of every metric over all frames.
    pub fn aggregate(&self) -> FrameMetrics {
        let n = self.rows.len().max(1) as f64;
        let sum =
            |f: fn(&FrameMetrics) -> f64| self.rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        FrameMetrics {
            mse: sum(|m| m.mse),
            mae: sum(|m| m.mae),
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
        }
    }

    /// `sequence,frame,mse,mae,psnr,ssim`, one row per frame, then the
    /// aggregate row with sequence `all` and the frame count.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        w.write_record(["sequence", "frame", "mse", "mae", "psnr", "ssim"])
            .map_err(csv_err)?;
        let record = |seq: String, frame: String, m: &FrameMetrics| {
            [
                seq,
                frame,
                m.mse.to_string(),
                m.mae.to_string(),
                m.psnr.to_string(),
                m.ssim.to_string(),
            ]
        };
        for r in &self.rows {
            w.write_record(record(
                r.sequence.to_string(),
                r.frame.to_string(),
                &r.metrics,
            ))
            .map_err(csv_err)?;
        }
        w.write_record(record(
            "all".into(),
            self.frames().to_string(),
            &self.aggregate(),
        ))
        .map_err(csv_err)?;
        w.into_inner()
            .map_err(|e| Error::Invalid(format!("csv: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}
