//! Binary PGM images: frame exports and weight-map diagnostics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cms_tensor::{Tape, Tensor};

use crate::cells::CmsModel;
use crate::data::{quantize, Dataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::ParamStore;

pub const MAPS_SIDECAR: &str = "maps.txt";

/// `P5` image bytes: header `P5\n{W} {H}\n255\n`, then row-major pixels.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses the `P5` layout written by [`pgm_bytes`]; returns `(W, H, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Malformed {
        what: "pgm",
        offset: 0,
        msg: msg.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("incomplete header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(bad("pixel count does not match the header"));
    }
    Ok((w, h, body.to_vec()))
}

/// Quantises a `[C, H, W]` frame (channel mean when `C > 1`) with
/// `round(255·v)`.
pub fn frame_pixels(frame: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!(
            "expected a [C, H, W] frame, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let pixels = (0..plane)
        .map(|i| quantize((0..c).map(|ci| frame.data()[ci * plane + i]).sum::<f64>() / c as f64))
        .collect();
    Ok((w, h, pixels))
}

pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let (w, h, px) = frame_pixels(frame)?;
    write_atomic(path, &pgm_bytes(w, h, &px))
}

/// Per-image min-max scaling to `0..=255`; a constant image maps to 128.
pub fn normalize_minmax(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let px = if max > min {
        values
            .iter()
            .map(|v| ((v - min) / (max - min) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; values.len()]
    };
    (px, min, max)
}

fn channel_mean(map: &Tensor) -> Vec<f64> {
    let s = map.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    (0..plane)
        .map(|i| (0..c).map(|ci| map.data()[ci * plane + i]).sum::<f64>() / c as f64)
        .collect()
}

/// Writes observed, ground-truth and predicted frames of sequence `index`
/// as `t{t}_in.pgm`, `t{t}_gt.pgm` and `t{t}_pred.pgm`, `t` being the frame
/// index within the sequence.
pub fn export_prediction(
    model: &CmsModel,
    store: &ParamStore,
    data: &Dataset,
    index: usize,
    t_in: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let seq = data.sequence(index)?;
    let pred = crate::train::predict(model, store, data, index, t_in)?;
    let s = seq.shape();
    let per = s[1] * s[2] * s[3];
    let frame =
        |t: &Tensor, i: usize| Tensor::new(&s[1..], t.data()[i * per..(i + 1) * per].to_vec());
    let mut written = Vec::new();
    for t in 0..s[0] {
        let kind = if t < t_in { "in" } else { "gt" };
        let path = out_dir.join(format!("t{t}_{kind}.pgm"));
        write_frame(&path, &frame(&seq, t)?)?;
        written.push(path);
        if t >= t_in {
            let path = out_dir.join(format!("t{t}_pred.pgm"));
            write_frame(&path, &frame(&pred, t - t_in)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, Default)]
pub struct MapExport {
    pub written: Vec<PathBuf>,
    /// Raw `(min, max)` per written image, in write order.
    pub ranges: Vec<(String, f64, f64)>,
    /// Blocks absent from the model, reported rather than treated as errors.
    pub notices: Vec<String>,
}

/// Exports final-layer diagnostics for every predicted frame of sequence
/// `index`: both CE weight maps of the last CE iteration (channel mean) and
/// the attention mass received per position at each SE scale. Raw ranges go
/// to `maps.txt`; raw attention mass also goes to one CSV per image.
pub fn export_maps(
    model: &CmsModel,
    store: &ParamStore,
    data: &Dataset,
    index: usize,
    t_in: usize,
    out_dir: &Path,
) -> Result<MapExport> {
    let mut export = MapExport::default();
    let last = model.cells.last().expect("at least one layer");
    if last.ce.is_none() {
        export
            .notices
            .push("model has no CE block; CE weight maps skipped".into());
    }
    if last.se.is_none() {
        export
            .notices
            .push("model has no SE block; attention maps skipped".into());
    }
    if last.ce.is_none() && last.se.is_none() {
        return Ok(export);
    }
    let batch = data.batch(&[index], t_in)?;
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let rollout = model.forward(&p, &batch.observed(), batch.t_out, None, true)?;
    let (h, w) = (data.height, data.width);
    let image = |name: String, values: &[f64], export: &mut MapExport| -> Result<()> {
        let (px, min, max) = normalize_minmax(values);
        let path = out_dir.join(&name);
        write_atomic(&path, &pgm_bytes(w, h, &px))?;
        export.written.push(path);
        export.ranges.push((name, min, max));
        Ok(())
    };
    for (k, d) in rollout.diagnostics.iter().enumerate() {
        let t = t_in + k;
        if let (Some(input), Some(context)) = (&d.ce_input, &d.ce_context) {
            image(
                format!("t{t}_ce_input.pgm"),
                &channel_mean(input),
                &mut export,
            )?;
            image(
                format!("t{t}_ce_context.pgm"),
                &channel_mean(context),
                &mut export,
            )?;
        }
        for (g, mass) in &d.attention_mass {
            image(format!("t{t}_attn_g{g}.pgm"), mass.data(), &mut export)?;
            let mut csv = String::new();
            for row in mass.data().chunks(w) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(csv, "{}", line.join(","));
            }
            let path = out_dir.join(format!("t{t}_attn_g{g}.csv"));
            write_atomic(&path, csv.as_bytes())?;
            export.written.push(path);
        }
    }
    let mut sidecar = String::from("# image min max\n");
    for (name, min, max) in &export.ranges {
        let _ = writeln!(sidecar, "{name} {min:?} {max:?}");
    }
    let path = out_dir.join(MAPS_SIDECAR);
    write_atomic(&path, sidecar.as_bytes())?;
    export.written.push(path);
    Ok(export)
}

/// Population variance of each CE weight map (channel mean) over every
/// predicted frame of sequence `index`, input maps then context maps.
pub fn ce_map_variances(
    model: &CmsModel,
    store: &ParamStore,
    data: &Dataset,
    index: usize,
    t_in: usize,
) -> Result<Vec<f64>> {
    let batch = data.batch(&[index], t_in)?;
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let rollout = model.forward(&p, &batch.observed(), batch.t_out, None, true)?;
    let variance = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
    };
    let mut out = Vec::new();
    for d in &rollout.diagnostics {
        for map in [&d.ce_input, &d.ce_context].into_iter().flatten() {
            out.push(variance(&channel_mean(map)));
        }
    }
    Ok(out)
}
