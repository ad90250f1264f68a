//! Raw forward/backward kernels on flat NCHW buffers.

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// `c = a · b` (with optional transposes) via `matrixmultiply`.
///
/// `a` is `m×k` after transposition, `b` is `k×n`, `c` is `m×n` row-major.
/// With `accumulate` the product is added to the existing contents of `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee that every strided access stays
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` into a `(C·KH·KW) × (N·HO·WO)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * cols_n];
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    let dst = &mut dst_row[n * out_plane..(n + 1) * out_plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        let drow = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = srow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols_n = g.col_cols();
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    let src = &src_row[n * out_plane..(n + 1) * out_plane];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                drow[iw as usize] += src[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the NCHW output and the unfolded input.
pub(crate) fn conv_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let k = g.col_rows();
    let cn = g.col_cols();
    let mut out_mat = vec![0.0; g.o * cn];
    gemm(g.o, k, cn, weight, false, &cols, false, &mut out_mat, false);
    let out_plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.o * out_plane];
    for o in 0..g.o {
        let b = bias.map_or(0.0, |b| b[o]);
        for n in 0..g.n {
            let src = &out_mat[o * cn + n * out_plane..o * cn + (n + 1) * out_plane];
            let dst = &mut out[(n * g.o + o) * out_plane..(n * g.o + o + 1) * out_plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

/// Convolution backward: returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward(
    gout: &[f64],
    weight: &[f64],
    cols: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = g.col_rows();
    let cn = g.col_cols();
    let out_plane = g.ho * g.wo;
    let mut gmat = vec![0.0; g.o * cn];
    let mut dbias = vec![0.0; g.o];
    for o in 0..g.o {
        for n in 0..g.n {
            let src = &gout[(n * g.o + o) * out_plane..(n * g.o + o + 1) * out_plane];
            gmat[o * cn + n * out_plane..o * cn + (n + 1) * out_plane].copy_from_slice(src);
            dbias[o] += src.iter().sum::<f64>();
        }
    }
    let mut dweight = vec![0.0; g.o * k];
    gemm(g.o, cn, k, &gmat, false, cols, true, &mut dweight, false);
    let mut dcols = vec![0.0; k * cn];
    gemm(k, g.o, cn, weight, true, &gmat, false, &mut dcols, false);
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    col2im(&dcols, g, &mut dx);
    (dx, dweight, dbias)
}

/// Half-open source range `[start, end)` of adaptive pooling bin `i`.
pub(crate) fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Source index of nearest-neighbour resampling.
pub(crate) fn nearest_source(dst: usize, input: usize, output: usize) -> usize {
    (dst * input / output).min(input - 1)
}
