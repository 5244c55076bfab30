//! Forward and backward compute kernels.
//!
//! Everything here is a pure function over [`Tensor`] values. The tape in
//! [`crate::tape`] records which kernel produced a value and calls the
//! matching backward kernel during reverse accumulation.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Strided matrix view used to describe gemm operands.
#[derive(Clone, Copy)]
struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl MatView {
    fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a·b + beta·c` over strided views.
fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, beta: f64, c: &mut [f64], cv: MatView) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(av.rows, cv.rows);
    debug_assert_eq!(bv.cols, cv.cols);
    // Bounds: every operand view must fit inside its slice.
    debug_assert!(extent(av) <= a.len());
    debug_assert!(extent(bv) <= b.len());
    debug_assert!(extent(cv) <= c.len());
    if av.rows == 0 || bv.cols == 0 {
        return;
    }
    // SAFETY: views were checked to lie within the slices, and `c` does not
    // alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

fn extent(v: MatView) -> usize {
    if v.rows == 0 || v.cols == 0 {
        return 0;
    }
    ((v.rows - 1) as isize * v.rs + (v.cols - 1) as isize * v.cs) as usize + 1
}

// ---------------------------------------------------------------------------
// convolution

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        input.expect_rank(4, "conv2d")?;
        kernel.expect_rank(4, "conv2d")?;
        let (b, cin, h, w) = dims4(input);
        let (cout, kcin, kh, kw) = dims4(kernel);
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::Kernel(kh.max(kw)));
        }
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: bias.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            batch: b,
            cin,
            cout,
            height: h,
            width: w,
            k: kh,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*k*k, h*w]` with zero padding.
fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, k) = (g.height, g.width, g.k);
    let p = (k / 2) as isize;
    let plane = h * w;
    for c in 0..g.cin {
        let src = &img[c * plane..(c + 1) * plane];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let oy = dy as isize - p;
                let ox = dx as isize - p;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, out) in line.iter_mut().enumerate() {
                        let sx = x as isize + ox;
                        *out = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[cin*k*k, h*w]` columns back onto an image, accumulating overlaps.
fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (h, w, k) = (g.height, g.width, g.k);
    let p = (k / 2) as isize;
    let plane = h * w;
    for c in 0..g.cin {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let src = &cols[row * plane..(row + 1) * plane];
                let oy = dy as isize - p;
                let ox = dx as isize - p;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let sline = &src[y * w..(y + 1) * w];
                    for (x, &v) in sline.iter().enumerate() {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            drow[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 cross-correlation.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, bias)?;
    let plane = g.plane();
    let plen = g.patch_len();
    let mut out = vec![0.0; g.batch * g.cout * plane];
    let mut cols = if g.k == 1 {
        Vec::new()
    } else {
        vec![0.0; plen * plane]
    };
    let kv = MatView::row_major(g.cout, plen);
    let cv = MatView::row_major(plen, plane);
    let ov = MatView::row_major(g.cout, plane);
    for b in 0..g.batch {
        let img = &input.data()[b * g.cin * plane..(b + 1) * g.cin * plane];
        let dst = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[o]);
            }
        }
        if g.k == 1 {
            gemm(kernel.data(), kv, img, cv, 1.0, dst, ov);
        } else {
            im2col(img, &g, &mut cols);
            gemm(kernel.data(), kv, &cols, cv, 1.0, dst, ov);
        }
    }
    Ok(Tensor::from_parts(
        vec![g.batch, g.cout, g.height, g.width],
        out,
    ))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    has_bias: bool,
    grad_out: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let g = ConvGeom::new(input, kernel, None).expect("validated in forward");
    let plane = g.plane();
    let plen = g.patch_len();
    let mut dx = need[0].then(|| vec![0.0; input.len()]);
    let mut dw = need[1].then(|| vec![0.0; kernel.len()]);
    let mut db = (need[2] && has_bias).then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; plen * plane];
    let mut dcols = vec![0.0; plen * plane];
    let kv = MatView::row_major(g.cout, plen);
    let cv = MatView::row_major(plen, plane);
    let ov = MatView::row_major(g.cout, plane);
    for b in 0..g.batch {
        let gout = &grad_out.data()[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in gout.chunks(plane).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        let img = &input.data()[b * g.cin * plane..(b + 1) * g.cin * plane];
        if let Some(dw) = dw.as_mut() {
            // dW[cout, plen] += gout[cout, plane] · colsᵀ[plane, plen]
            let src: &[f64] = if g.k == 1 {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            gemm(gout, ov, src, cv.t(), 1.0, dw, kv);
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * g.cin * plane..(b + 1) * g.cin * plane];
            if g.k == 1 {
                gemm(kernel.data(), kv.t(), gout, ov, 1.0, dimg, cv);
            } else {
                gemm(kernel.data(), kv.t(), gout, ov, 0.0, &mut dcols, cv);
                col2im(&dcols, &g, dimg);
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        kernel: dw.map(|d| Tensor::from_parts(kernel.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![g.cout], d)),
    }
}

// ---------------------------------------------------------------------------
// matrix products

pub(crate) struct MatmulGeom {
    pub batch: Option<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

/// Checks operands of `op(a)·op(b)` where `op` optionally transposes the
/// trailing two axes. Rank 2 and batched rank 3 are supported.
pub(crate) fn matmul_geom(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<MatmulGeom> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() != b.rank() || !(a.rank() == 2 || a.rank() == 3) {
        return Err(mismatch());
    }
    let r = a.rank();
    let (ar, ac) = (a.shape()[r - 2], a.shape()[r - 1]);
    let (br, bc) = (b.shape()[r - 2], b.shape()[r - 1]);
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(mismatch());
    }
    let batch = if r == 3 {
        if a.shape()[0] != b.shape()[0] {
            return Err(mismatch());
        }
        Some(a.shape()[0])
    } else {
        None
    };
    Ok(MatmulGeom { batch, m, k: ka, n })
}

pub fn matmul_t(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let g = matmul_geom(a, b, ta, tb)?;
    let p = g.batch.unwrap_or(1);
    let av = stored_view(g.m, g.k, ta);
    let bv = stored_view(g.k, g.n, tb);
    let cv = MatView::row_major(g.m, g.n);
    let mut out = vec![0.0; p * g.m * g.n];
    for i in 0..p {
        gemm(
            &a.data()[i * g.m * g.k..(i + 1) * g.m * g.k],
            av,
            &b.data()[i * g.k * g.n..(i + 1) * g.k * g.n],
            bv,
            0.0,
            &mut out[i * g.m * g.n..(i + 1) * g.m * g.n],
            cv,
        );
    }
    let shape = match g.batch {
        Some(p) => vec![p, g.m, g.n],
        None => vec![g.m, g.n],
    };
    Ok(Tensor::from_parts(shape, out))
}

/// View of `op(X)` (logical `rows × cols`) over the stored buffer of `X`.
fn stored_view(rows: usize, cols: usize, transposed: bool) -> MatView {
    if transposed {
        MatView::row_major(cols, rows).t()
    } else {
        MatView::row_major(rows, cols)
    }
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    grad_out: &Tensor,
    need: [bool; 2],
) -> (Option<Tensor>, Option<Tensor>) {
    let g = matmul_geom(a, b, ta, tb).expect("validated in forward");
    let p = g.batch.unwrap_or(1);
    let av = stored_view(g.m, g.k, ta);
    let bv = stored_view(g.k, g.n, tb);
    let cv = MatView::row_major(g.m, g.n);
    let (sa, sb, sc) = (g.m * g.k, g.k * g.n, g.m * g.n);
    let da = need[0].then(|| {
        // d op(a) = dC · op(b)ᵀ, written through the (possibly transposed) view of a.
        let mut da = vec![0.0; a.len()];
        for i in 0..p {
            gemm(
                &grad_out.data()[i * sc..(i + 1) * sc],
                cv,
                &b.data()[i * sb..(i + 1) * sb],
                bv.t(),
                0.0,
                &mut da[i * sa..(i + 1) * sa],
                av,
            );
        }
        Tensor::from_parts(a.shape().to_vec(), da)
    });
    let db = need[1].then(|| {
        let mut db = vec![0.0; b.len()];
        for i in 0..p {
            gemm(
                &a.data()[i * sa..(i + 1) * sa],
                av.t(),
                &grad_out.data()[i * sc..(i + 1) * sc],
                cv,
                0.0,
                &mut db[i * sb..(i + 1) * sb],
                bv,
            );
        }
        Tensor::from_parts(b.shape().to_vec(), db)
    });
    (da, db)
}

// ---------------------------------------------------------------------------
// pointwise

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let cols = *y.shape().last().expect("rank >= 1");
    let mut dx = vec![0.0; y.len()];
    for ((dst, yr), gr) in dx
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(grad_out.data().chunks(cols))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// layout: concat / slice / patches

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Empty("concat"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::Axis { axis, rank });
    }
    let mut total = 0;
    for p in parts {
        let same = p.rank() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !same {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, inner) = outer_inner(&shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let rank = x.rank();
    if axis >= rank {
        return Err(TensorError::Axis { axis, rank });
    }
    let dim = x.shape()[axis];
    if len == 0 || start + len > dim {
        return Err(TensorError::Split {
            sizes: vec![start, len],
            len: dim,
        });
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adds `grad` into the `[start, start+len)` window of `dst` along `axis`.
pub(crate) fn slice_scatter_add(dst: &mut Tensor, grad: &Tensor, axis: usize, start: usize) {
    let dim = dst.shape()[axis];
    let len = grad.shape()[axis];
    let (outer, inner) = outer_inner(dst.shape(), axis);
    let d = dst.data_mut();
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        let src = &grad.data()[o * len * inner..(o + 1) * len * inner];
        for (a, b) in d[base..base + len * inner].iter_mut().zip(src) {
            *a += b;
        }
    }
}

pub(crate) fn patch_dims(shape: &[usize], grid: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = match shape.len() {
        3 => (1, shape[0], shape[1], shape[2]),
        4 => (shape[0], shape[1], shape[2], shape[3]),
        _ => {
            return Err(TensorError::Rank {
                op: "extract_patches",
                expected: 4,
                shape: shape.to_vec(),
            })
        }
    };
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(TensorError::PatchGrid {
            grid,
            height: h,
            width: w,
        });
    }
    Ok((b, c, h, w))
}

/// `[B, C, H, W]` (or `[C, H, W]`) to `[B*g*g, C, H/g, W/g]`.
///
/// Tiles are ordered batch-major, then row-major over the tile grid.
pub fn extract_patches(x: &Tensor, grid: usize) -> Result<Tensor> {
    let (b, c, h, w) = patch_dims(x.shape(), grid)?;
    let (ph, pw) = (h / grid, w / grid);
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    let mut idx = 0;
    for bi in 0..b {
        for ty in 0..grid {
            for tx in 0..grid {
                for ci in 0..c {
                    for y in 0..ph {
                        let row = ((bi * c + ci) * h + ty * ph + y) * w + tx * pw;
                        out[idx..idx + pw].copy_from_slice(&src[row..row + pw]);
                        idx += pw;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b * grid * grid, c, ph, pw], out))
}

/// Inverse of [`extract_patches`]: `[B*g*g, C, h, w]` to `[B, C, h*g, w*g]`.
pub fn restore_patches(x: &Tensor, grid: usize) -> Result<Tensor> {
    x.expect_rank(4, "restore_patches")?;
    let (n, c, ph, pw) = dims4(x);
    if grid == 0 || n % (grid * grid) != 0 {
        return Err(TensorError::PatchGrid {
            grid,
            height: ph,
            width: pw,
        });
    }
    let b = n / (grid * grid);
    let (h, w) = (ph * grid, pw * grid);
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    let mut idx = 0;
    for bi in 0..b {
        for ty in 0..grid {
            for tx in 0..grid {
                for ci in 0..c {
                    for y in 0..ph {
                        let row = ((bi * c + ci) * h + ty * ph + y) * w + tx * pw;
                        out[row..row + pw].copy_from_slice(&src[idx..idx + pw]);
                        idx += pw;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

// ---------------------------------------------------------------------------
// layer norm

pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Per-sample normalisation over `(C, H, W)` followed by a per-channel affine map.
pub(crate) fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    x.expect_rank(4, "layer_norm")?;
    let (b, c, h, w) = dims4(x);
    for p in [gain, bias] {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let plane = h * w;
    let n = c * plane;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(b),
        rstd: Vec::with_capacity(b),
    };
    for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        // A constant sample normalises to exact zeros despite summation error.
        let mean = if src.iter().all(|&v| v == src[0]) {
            src[0]
        } else {
            src.iter().sum::<f64>() / n as f64
        };
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for ci in 0..c {
            let (gc, bc) = (gain.data()[ci], bias.data()[ci]);
            for i in ci * plane..(ci + 1) * plane {
                dst[i] = (src[i] - mean) * rstd * gc + bc;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

pub(crate) fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    stats: &NormStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (_, c, h, w) = dims4(x);
    let plane = h * w;
    let n = c * plane;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    let mut dxhat = vec![0.0; n];
    let mut xhat = vec![0.0; n];
    for (bi, ((src, gsrc), dst)) in x
        .data()
        .chunks(n)
        .zip(grad_out.data().chunks(n))
        .zip(dx.chunks_mut(n))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[bi], stats.rstd[bi]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ci in 0..c {
            let gc = gain.data()[ci];
            for i in ci * plane..(ci + 1) * plane {
                xhat[i] = (src[i] - mean) * rstd;
                dgain[ci] += gsrc[i] * xhat[i];
                dbias[ci] += gsrc[i];
                dxhat[i] = gsrc[i] * gc;
                sum_dxhat += dxhat[i];
                sum_dxhat_xhat += dxhat[i] * xhat[i];
            }
        }
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            dst[i] = rstd * (dxhat[i] - inv_n * sum_dxhat - xhat[i] * inv_n * sum_dxhat_xhat);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgain),
        Tensor::from_parts(vec![c], dbias),
    )
}

pub(crate) fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
