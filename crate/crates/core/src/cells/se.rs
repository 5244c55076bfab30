//! Multi-scale spatiotemporal expression: patch self-attention over the
//! stacked `(h, c)` pair at several grid scales, scale fusion, and a gated
//! state update.

use cms_tensor::{kernels, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvLayer, ParamBuilder};

/// 1×1 projections producing queries, keys and values.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub q: ConvLayer,
    pub k: ConvLayer,
    pub v: ConvLayer,
}

impl Qkv {
    pub fn register(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self {
            q: ConvLayer::register(b, &format!("{name}.q"), channels, channels, 1, true),
            k: ConvLayer::register(b, &format!("{name}.k"), channels, channels, 1, true),
            v: ConvLayer::register(b, &format!("{name}.v"), channels, channels, 1, true),
        }
    }
}

/// Self-attention over the positions of each patch, plus a residual.
///
/// `z` is `[P, C2, h, w]`. With `N = h·w`, queries/keys/values are viewed as
/// `[P, C2, N]`, the attention matrix is `softmax_rows(Qᵀ K)` of shape
/// `[P, N, N]` (row = receiving position), and the output at every position
/// is a convex combination of value vectors: `V Aᵀ`. Returns the output and
/// the attention matrix.
pub fn bam<'t>(p: &Bound<'t>, qkv: &Qkv, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = z.shape();
    if shape.len() != 4 {
        return Err(cms_tensor::TensorError::Rank {
            op: "bam",
            expected: 4,
            shape,
        }
        .into());
    }
    let (np, c2, n) = (shape[0], shape[1], shape[2] * shape[3]);
    let flat = [np, c2, n];
    let q = qkv.q.forward(p, z)?.reshape(&flat)?;
    let k = qkv.k.forward(p, z)?.reshape(&flat)?;
    let v = qkv.v.forward(p, z)?.reshape(&flat)?;
    let attention = q.matmul_t(k, true, false)?.softmax_rows();
    let mixed = v.matmul_t(attention, false, true)?.reshape(&shape)?;
    Ok((mixed.add(z)?, attention))
}

/// Attention mass received by each position, laid out spatially:
/// `[P, N, N]` attention for grid `g` becomes `[B, 1, H, W]`.
pub fn attention_mass(
    attention: &Tensor,
    patch_h: usize,
    patch_w: usize,
    grid: usize,
) -> Result<Tensor> {
    let s = attention.shape();
    let (np, n) = (s[0], s[1]);
    let mut mass = vec![0.0; np * n];
    for (pi, block) in attention.data().chunks(n * n).enumerate() {
        for row in block.chunks(n) {
            for (j, &a) in row.iter().enumerate() {
                mass[pi * n + j] += a;
            }
        }
    }
    let patches = Tensor::new(&[np, 1, patch_h, patch_w], mass)?;
    Ok(kernels::restore_patches(&patches, grid)?)
}

#[derive(Clone, Debug)]
pub struct SeBlock {
    pub scales: Vec<usize>,
    /// One set per scale, or a single set shared by all scales.
    pub qkv: Vec<Qkv>,
    /// `2·n·C -> 2C`, producing `[A_H, A_C]`.
    pub fuse: ConvLayer,
    /// `W_A*` in `i, g, o` order, `2C -> C`, carrying the gate biases.
    pub conv_a: [ConvLayer; 3],
    /// `W_h*` in `i, g, o` order, `C -> C`.
    pub conv_h: [ConvLayer; 3],
}

pub struct SeOutput<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
    /// Update gate `i` and candidate `g`.
    pub input_gate: Var<'t>,
    pub candidate: Var<'t>,
    /// Attention matrices `[B·g², N, N]`, one per scale.
    pub attention: Vec<Var<'t>>,
}

impl SeBlock {
    pub fn register(
        b: &mut ParamBuilder,
        name: &str,
        hidden: usize,
        k: usize,
        scales: &[usize],
        share_qkv: bool,
    ) -> Self {
        let c2 = 2 * hidden;
        let qkv = if share_qkv {
            vec![Qkv::register(b, &format!("{name}.qkv"), c2)]
        } else {
            scales
                .iter()
                .map(|g| Qkv::register(b, &format!("{name}.qkv{g}"), c2))
                .collect()
        };
        let fuse = ConvLayer::register(b, &format!("{name}.fuse"), c2 * scales.len(), c2, k, true);
        let conv_a = ["i", "g", "o"]
            .map(|g| ConvLayer::register(b, &format!("{name}.a_{g}"), c2, hidden, k, true));
        let conv_h = ["i", "g", "o"]
            .map(|g| ConvLayer::register(b, &format!("{name}.h_{g}"), hidden, hidden, k, false));
        Self {
            scales: scales.to_vec(),
            qkv,
            fuse,
            conv_a,
            conv_h,
        }
    }

    fn qkv_for(&self, scale_index: usize) -> &Qkv {
        &self.qkv[scale_index.min(self.qkv.len() - 1)]
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>, c: Var<'t>) -> Result<SeOutput<'t>> {
        let shape = h.shape();
        let (height, width) = (shape[2], shape[3]);
        if let Some(&g) = self
            .scales
            .iter()
            .find(|&&g| height % g != 0 || width % g != 0)
        {
            return Err(Error::Invalid(format!(
                "SE scale {g} does not divide the {height}x{width} state"
            )));
        }
        let tape = h.tape();
        let z = tape.concat(&[h, c], 1)?;
        let mut restored = Vec::with_capacity(self.scales.len());
        let mut attention = Vec::with_capacity(self.scales.len());
        for (si, &g) in self.scales.iter().enumerate() {
            let patches = z.extract_patches(g)?;
            let (out, att) = bam(p, self.qkv_for(si), patches)?;
            restored.push(out.restore_patches(g)?);
            attention.push(att);
        }
        let stacked = tape.concat(&restored, 1)?;
        // The fuse output is the channel concatenation [A_H, A_C].
        let fused = self.fuse.forward(p, stacked)?;
        let gate = |j: usize| -> Result<Var<'t>> {
            Ok(self.conv_a[j]
                .forward(p, fused)?
                .add(self.conv_h[j].forward(p, h)?)?)
        };
        let i = gate(0)?.sigmoid();
        let g = gate(1)?.tanh();
        let o = gate(2)?.sigmoid();
        let c_new = i.one_minus().mul(c)?.add(i.mul(g)?)?;
        let h_new = o.mul(c_new)?;
        Ok(SeOutput {
            h: h_new,
            c: c_new,
            input_gate: i,
            candidate: g,
            attention,
        })
    }
}
