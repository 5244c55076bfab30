//! ConvLSTM gate stage with per-gate layer normalisation.

use cms_tensor::Var;

use crate::error::Result;
use crate::nn::{Bound, ConvLayer, LayerNorm, ParamBuilder};

const GATES: [&str; 4] = ["g", "i", "f", "o"];

/// Gate convolutions in `g, i, f, o` order. Gate biases live in the input
/// convolutions; the hidden convolutions have none.
#[derive(Clone, Debug)]
pub struct Gates {
    pub conv_x: [ConvLayer; 4],
    pub conv_h: [ConvLayer; 4],
    pub norm: Option<[LayerNorm; 4]>,
}

impl Gates {
    pub fn register(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        hidden: usize,
        k: usize,
        layer_norm: bool,
    ) -> Self {
        let conv_x =
            GATES.map(|g| ConvLayer::register(b, &format!("{name}.x_{g}"), cin, hidden, k, true));
        let conv_h = GATES
            .map(|g| ConvLayer::register(b, &format!("{name}.h_{g}"), hidden, hidden, k, false));
        let norm = layer_norm
            .then(|| GATES.map(|g| LayerNorm::register(b, &format!("{name}.ln_{g}"), hidden)));
        Self {
            conv_x,
            conv_h,
            norm,
        }
    }

    fn preactivation<'t>(
        &self,
        p: &Bound<'t>,
        gate: usize,
        x: Var<'t>,
        h: Var<'t>,
    ) -> Result<Var<'t>> {
        let sum = self.conv_x[gate]
            .forward(p, x)?
            .add(self.conv_h[gate].forward(p, h)?)?;
        match &self.norm {
            Some(norm) => norm[gate].forward(p, sum),
            None => Ok(sum),
        }
    }

    /// Returns the new `(h, c)` pair.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        h_prev: Var<'t>,
        c_prev: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let g = self.preactivation(p, 0, x, h_prev)?.tanh();
        let i = self.preactivation(p, 1, x, h_prev)?.sigmoid();
        let f = self.preactivation(p, 2, x, h_prev)?.sigmoid();
        let c = f.mul(c_prev)?.add(i.mul(g)?)?;
        let o = self.preactivation(p, 3, x, h_prev)?.sigmoid();
        let h = o.mul(c.tanh())?;
        Ok((h, c))
    }
}
