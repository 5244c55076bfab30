//! The stacked multi-layer model and its sequence-to-sequence rollout.

use cms_tensor::{Tape, Tensor, Var};

use super::ce::CeBlock;
use super::gates::Gates;
use super::se::{attention_mass, SeBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvLayer, ParamBuilder, ParamStore};

/// Recurrent pair carried from one time step to the next.
#[derive(Clone, Copy)]
pub struct CellState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

pub struct CellOutput<'t> {
    pub state: CellState<'t>,
    /// `(input map, context map)` per CE iteration; empty when CE is off.
    pub ce_maps: Vec<(Var<'t>, Var<'t>)>,
    /// Attention matrices per SE scale; empty when SE is off.
    pub attention: Vec<Var<'t>>,
}

/// One CMS layer: optional CE, ConvLSTM gates, optional SE.
#[derive(Clone, Debug)]
pub struct CmsCell {
    pub ce: Option<CeBlock>,
    pub gates: Gates,
    pub se: Option<SeBlock>,
    pub cin: usize,
    pub hidden: usize,
}

impl CmsCell {
    pub fn register(b: &mut ParamBuilder, name: &str, cin: usize, cfg: &ModelConfig) -> Self {
        let (c, k) = (cfg.hidden, cfg.kernel);
        let ce = cfg.enable_ce.then(|| {
            CeBlock::register(
                b,
                &format!("{name}.ce"),
                cin,
                c,
                k,
                cfg.ce_scale,
                cfg.ce_iterations,
            )
        });
        let gates = Gates::register(b, &format!("{name}.gates"), cin, c, k, cfg.layer_norm);
        let se = cfg.enable_se.then(|| {
            SeBlock::register(
                b,
                &format!("{name}.se"),
                c,
                k,
                &cfg.se_scales,
                cfg.share_qkv,
            )
        });
        Self {
            ce,
            gates,
            se,
            cin,
            hidden: c,
        }
    }

    pub fn step<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        state: CellState<'t>,
    ) -> Result<CellOutput<'t>> {
        let (mut x, mut h_prev) = (x, state.h);
        let mut ce_maps = Vec::new();
        if let Some(ce) = &self.ce {
            let out = ce.forward(p, x, h_prev)?;
            x = out.x;
            h_prev = out.h;
            ce_maps = out.maps;
        }
        let (mut h, mut c) = self.gates.forward(p, x, h_prev, state.c)?;
        let mut attention = Vec::new();
        if let Some(se) = &self.se {
            let out = se.forward(p, h, c)?;
            h = out.h;
            c = out.c;
            attention = out.attention;
        }
        Ok(CellOutput {
            state: CellState { h, c },
            ce_maps,
            attention,
        })
    }
}

/// Ground-truth frames and the per-step choice of feeding them during the
/// prediction phase.
pub struct Teacher<'a> {
    /// `[B, T_out, C, H, W]`.
    pub future: &'a Tensor,
    /// `mask[b][j]`: feed ground truth (true) or the previous prediction
    /// (false) at prediction step `j + 1`; `T_out - 1` entries per sample.
    pub mask: &'a [Vec<bool>],
}

/// Final-layer maps for one emitted frame, batch dimension kept.
#[derive(Clone, Debug, Default)]
pub struct FrameDiagnostics {
    /// Weight map applied to the input, last CE iteration, `[B, Cin, H, W]`.
    pub ce_input: Option<Tensor>,
    /// Weight map applied to the hidden state, last CE iteration, `[B, C, H, W]`.
    pub ce_context: Option<Tensor>,
    /// Attention mass received per position, one `[B, 1, H, W]` map per scale.
    pub attention_mass: Vec<(usize, Tensor)>,
}

pub struct Rollout<'t> {
    /// `[B, T_out, C, H, W]`, every entry in `[0, 1]`.
    pub predictions: Var<'t>,
    /// One entry per emitted frame when diagnostics were requested.
    pub diagnostics: Vec<FrameDiagnostics>,
}

#[derive(Clone, Debug)]
pub struct CmsModel {
    pub config: ModelConfig,
    pub cells: Vec<CmsCell>,
    /// 1×1 projection from the top hidden state to a frame.
    pub head: ConvLayer,
}

impl CmsModel {
    /// Builds the layer inventory and a freshly initialised parameter store.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut b = ParamBuilder::new(seed);
        let cells = (0..config.layers)
            .map(|l| {
                let cin = if l == 0 {
                    config.frame_channels
                } else {
                    config.hidden
                };
                CmsCell::register(&mut b, &format!("layer{l}"), cin, config)
            })
            .collect();
        let head = ConvLayer::register(
            &mut b,
            "head",
            config.hidden,
            config.frame_channels,
            1,
            true,
        );
        let model = Self {
            config: config.clone(),
            cells,
            head,
        };
        Ok((model, b.finish()))
    }

    /// Builds the model and checks `store` against its expected layout.
    pub fn for_store(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, expected) = Self::build(config, 0)?;
        expected.check_same_layout(store)?;
        Ok(model)
    }

    fn frame_shape(&self, batch: usize) -> [usize; 4] {
        let c = &self.config;
        [batch, c.frame_channels, c.frame_height, c.frame_width]
    }

    fn check_sequence(&self, what: &str, t: &Tensor, batch: Option<usize>) -> Result<()> {
        let s = t.shape();
        let want = self.frame_shape(s.first().copied().unwrap_or(0));
        let ok = s.len() == 5
            && s[0] >= 1
            && s[1] >= 1
            && s[2..] == want[1..]
            && batch.is_none_or(|b| b == s[0]);
        if !ok {
            return Err(Error::Invalid(format!(
                "{what} frames have shape {s:?}, expected [B, T, {}, {}, {}]",
                want[1], want[2], want[3]
            )));
        }
        Ok(())
    }

    /// Runs `T_in + T_out - 1` recurrent steps.
    ///
    /// Steps `0..T_in` consume observed frames. Each later step consumes the
    /// ground-truth frame where the teacher mask says so and the previous
    /// prediction otherwise; with no teacher the rollout is purely
    /// autoregressive and never sees future frames.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        observed: &Tensor,
        t_out: usize,
        teacher: Option<Teacher<'_>>,
        diagnostics: bool,
    ) -> Result<Rollout<'t>> {
        self.check_sequence("observed", observed, None)?;
        let (batch, t_in) = (observed.shape()[0], observed.shape()[1]);
        if t_out == 0 {
            return Err(Error::Invalid("t_out must be at least 1".into()));
        }
        if let Some(t) = &teacher {
            self.check_sequence("future", t.future, Some(batch))?;
            if t.future.shape()[1] != t_out {
                return Err(Error::Invalid(format!(
                    "future holds {} frames, expected {t_out}",
                    t.future.shape()[1]
                )));
            }
            if t.mask.len() != batch || t.mask.iter().any(|m| m.len() != t_out - 1) {
                return Err(Error::Invalid(format!(
                    "sampling mask must be {batch} x {}",
                    t_out - 1
                )));
            }
        }
        let tape = p.tape();
        let c = self.config.hidden;
        let state_shape = [batch, c, self.config.frame_height, self.config.frame_width];
        let mut states: Vec<CellState<'t>> = (0..self.cells.len())
            .map(|_| CellState {
                h: tape.constant(Tensor::zeros(&state_shape)),
                c: tape.constant(Tensor::zeros(&state_shape)),
            })
            .collect();
        let frame_dims = self.frame_shape(batch);

        let mut predictions: Vec<Var<'t>> = Vec::with_capacity(t_out);
        let mut diags = Vec::new();
        for t in 0..t_in + t_out - 1 {
            let x = if t < t_in {
                tape.constant(frame_at(observed, t)?)
            } else {
                let previous = *predictions
                    .last()
                    .expect("a prediction precedes every output step");
                match &teacher {
                    None => previous,
                    Some(teach) => mix(tape, teach, t - t_in, previous, &frame_dims)?,
                }
            };
            let mut input = x;
            let last = self.cells.len() - 1;
            let mut top = None;
            for (l, cell) in self.cells.iter().enumerate() {
                let out = cell.step(p, input, states[l])?;
                states[l] = out.state;
                input = out.state.h;
                if l == last {
                    top = Some(out);
                }
            }
            if t + 1 >= t_in {
                let frame = self.head.forward(p, input)?.sigmoid();
                predictions.push(frame);
                if diagnostics {
                    diags.push(self.diagnose(top.as_ref().expect("at least one layer"))?);
                }
            }
        }
        let mut shaped = Vec::with_capacity(t_out);
        let seq_frame = [
            frame_dims[0],
            1,
            frame_dims[1],
            frame_dims[2],
            frame_dims[3],
        ];
        for f in predictions {
            shaped.push(f.reshape(&seq_frame)?);
        }
        Ok(Rollout {
            predictions: tape.concat(&shaped, 1)?,
            diagnostics: diags,
        })
    }

    fn diagnose(&self, out: &CellOutput<'_>) -> Result<FrameDiagnostics> {
        let mut d = FrameDiagnostics::default();
        if let Some(&(input_map, context_map)) = out.ce_maps.last() {
            d.ce_input = Some((*input_map.value()).clone());
            d.ce_context = Some((*context_map.value()).clone());
        }
        if let Some(se) = &self.cells.last().and_then(|c| c.se.as_ref()) {
            let (hh, ww) = (self.config.frame_height, self.config.frame_width);
            for (&g, att) in se.scales.iter().zip(&out.attention) {
                d.attention_mass
                    .push((g, attention_mass(&att.value(), hh / g, ww / g, g)?));
            }
        }
        Ok(d)
    }
}

/// Frame `t` of a `[B, T, C, H, W]` sequence as `[B, C, H, W]`.
pub fn frame_at(seq: &Tensor, t: usize) -> Result<Tensor> {
    let s = seq.shape();
    let per = s[2] * s[3] * s[4];
    let mut data = Vec::with_capacity(s[0] * per);
    for b in 0..s[0] {
        let start = (b * s[1] + t) * per;
        data.extend_from_slice(&seq.data()[start..start + per]);
    }
    Ok(Tensor::new(&[s[0], s[2], s[3], s[4]], data)?)
}

/// Input for prediction step `j + 1`: ground truth frame `j` of `future`
/// where the mask is set, `previous` elsewhere.
fn mix<'t>(
    tape: &'t Tape,
    teach: &Teacher<'_>,
    j: usize,
    previous: Var<'t>,
    dims: &[usize; 4],
) -> Result<Var<'t>> {
    let truth = frame_at(teach.future, j)?;
    let column: Vec<bool> = teach.mask.iter().map(|m| m[j]).collect();
    if column.iter().all(|&m| m) {
        return Ok(tape.constant(truth));
    }
    if column.iter().all(|&m| !m) {
        return Ok(previous);
    }
    let per = dims[1] * dims[2] * dims[3];
    let keep = Tensor::from_fn(dims, |i| if column[i / per] { 0.0 } else { 1.0 });
    let chosen = Tensor::from_fn(dims, |i| {
        if column[i / per] {
            truth.data()[i]
        } else {
            0.0
        }
    });
    Ok(previous
        .mul(tape.constant(keep))?
        .add(tape.constant(chosen))?)
}
