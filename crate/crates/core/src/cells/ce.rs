//! Context embedding: iterated mutual re-weighting of the input and the
//! previous hidden state.

use cms_tensor::Var;

use crate::error::Result;
use crate::nn::{Bound, ConvLayer, ParamBuilder};

/// One weight-shared parameter set applied `iterations` times.
#[derive(Clone, Debug)]
pub struct CeBlock {
    /// Hidden state (C channels) to an input weight map (Cin channels).
    pub conv_h: ConvLayer,
    /// Re-weighted input (Cin channels) to a hidden weight map (C channels).
    pub conv_x: ConvLayer,
    pub scale: f64,
    pub iterations: usize,
}

pub struct CeOutput<'t> {
    pub x: Var<'t>,
    pub h: Var<'t>,
    /// `(input map, context map)` for every iteration, both already scaled.
    pub maps: Vec<(Var<'t>, Var<'t>)>,
}

impl CeBlock {
    pub fn register(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        hidden: usize,
        k: usize,
        scale: f64,
        iterations: usize,
    ) -> Self {
        Self {
            conv_h: ConvLayer::register(b, &format!("{name}.conv_h"), hidden, cin, k, true),
            conv_x: ConvLayer::register(b, &format!("{name}.conv_x"), cin, hidden, k, true),
            scale,
            iterations,
        }
    }

    /// `x <- s·σ(W_H ⋆ h + b_H) ∘ x`, then `h <- s·σ(W_X ⋆ x + b_X) ∘ h` with
    /// the freshly updated `x`, repeated with the same weights.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, h: Var<'t>) -> Result<CeOutput<'t>> {
        let (mut x, mut h) = (x, h);
        let mut maps = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let input_map = self.conv_h.forward(p, h)?.sigmoid().scale(self.scale);
            x = input_map.mul(x)?;
            let context_map = self.conv_x.forward(p, x)?.sigmoid().scale(self.scale);
            h = context_map.mul(h)?;
            maps.push((input_map, context_map));
        }
        Ok(CeOutput { x, h, maps })
    }
}
