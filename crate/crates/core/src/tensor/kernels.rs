//! Slice-level numeric kernels.
//!
//! Every kernel accumulates each output element in a fixed index order that
//! does not depend on the number of rows processed, so evaluating one row at
//! a time reproduces a full-batch evaluation bit for bit.

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_acc_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_acc_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv1d_transpose_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    ((len - 1) * stride + kernel).checked_sub(2 * padding).filter(|&l| l > 0)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Input position read by output `t` through tap `j`, if inside the signal.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        (t * self.stride + j)
            .checked_sub(self.padding)
            .filter(|&s| s < self.len_in)
    }
}

/// Cross-correlation; `x: [B, Cin, Lin]`, `w: [Cout, Cin, k]`, `out: [B, Cout, Lout]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], out: &mut [f64], g: &ConvGeom) {
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let out_row = &mut out[(b * g.c_out + o) * g.len_out..][..g.len_out];
            for c in 0..g.c_in {
                let x_row = &x[(b * g.c_in + c) * g.len_in..][..g.len_in];
                let w_row = &w[(o * g.c_in + c) * g.kernel..][..g.kernel];
                for (t, acc) in out_row.iter_mut().enumerate() {
                    for (j, &wv) in w_row.iter().enumerate() {
                        if let Some(s) = g.src(t, j) {
                            *acc += wv * x_row[s];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv1d_forward`] given the output gradient `go`.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    go: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    g: &ConvGeom,
) {
    if let Some(gx) = gx {
        for b in 0..g.batch {
            for o in 0..g.c_out {
                let go_row = &go[(b * g.c_out + o) * g.len_out..][..g.len_out];
                for c in 0..g.c_in {
                    let w_row = &w[(o * g.c_in + c) * g.kernel..][..g.kernel];
                    let gx_row = &mut gx[(b * g.c_in + c) * g.len_in..][..g.len_in];
                    for (t, &gv) in go_row.iter().enumerate() {
                        for (j, &wv) in w_row.iter().enumerate() {
                            if let Some(s) = g.src(t, j) {
                                gx_row[s] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..g.batch {
            for o in 0..g.c_out {
                let go_row = &go[(b * g.c_out + o) * g.len_out..][..g.len_out];
                for c in 0..g.c_in {
                    let x_row = &x[(b * g.c_in + c) * g.len_in..][..g.len_in];
                    let gw_row = &mut gw[(o * g.c_in + c) * g.kernel..][..g.kernel];
                    for (t, &gv) in go_row.iter().enumerate() {
                        for (j, gwv) in gw_row.iter_mut().enumerate() {
                            if let Some(s) = g.src(t, j) {
                                *gwv += x_row[s] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution; `x: [B, Cin, Lin]`, `w: [Cin, Cout, k]`, `out: [B, Cout, Lout]`.
///
/// Here `len_in`/`len_out` in the geometry refer to the transposed op's own
/// input and output, so the scatter target is `t·stride + j − padding`.
pub fn conv1d_transpose_forward(x: &[f64], w: &[f64], out: &mut [f64], g: &ConvGeom) {
    for b in 0..g.batch {
        for c in 0..g.c_in {
            let x_row = &x[(b * g.c_in + c) * g.len_in..][..g.len_in];
            for o in 0..g.c_out {
                let w_row = &w[(c * g.c_out + o) * g.kernel..][..g.kernel];
                let out_row = &mut out[(b * g.c_out + o) * g.len_out..][..g.len_out];
                for (t, &xv) in x_row.iter().enumerate() {
                    for (j, &wv) in w_row.iter().enumerate() {
                        if let Some(d) = scatter_dst(t, j, g) {
                            out_row[d] += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn scatter_dst(t: usize, j: usize, g: &ConvGeom) -> Option<usize> {
    (t * g.stride + j)
        .checked_sub(g.padding)
        .filter(|&d| d < g.len_out)
}

pub fn conv1d_transpose_backward(
    x: &[f64],
    w: &[f64],
    go: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    g: &ConvGeom,
) {
    if let Some(gx) = gx {
        for b in 0..g.batch {
            for c in 0..g.c_in {
                let gx_row = &mut gx[(b * g.c_in + c) * g.len_in..][..g.len_in];
                for o in 0..g.c_out {
                    let w_row = &w[(c * g.c_out + o) * g.kernel..][..g.kernel];
                    let go_row = &go[(b * g.c_out + o) * g.len_out..][..g.len_out];
                    for (t, gxv) in gx_row.iter_mut().enumerate() {
                        for (j, &wv) in w_row.iter().enumerate() {
                            if let Some(d) = scatter_dst(t, j, g) {
                                *gxv += wv * go_row[d];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..g.batch {
            for c in 0..g.c_in {
                let x_row = &x[(b * g.c_in + c) * g.len_in..][..g.len_in];
                for o in 0..g.c_out {
                    let gw_row = &mut gw[(c * g.c_out + o) * g.kernel..][..g.kernel];
                    let go_row = &go[(b * g.c_out + o) * g.len_out..][..g.len_out];
                    for (t, &xv) in x_row.iter().enumerate() {
                        for (j, gwv) in gw_row.iter_mut().enumerate() {
                            if let Some(d) = scatter_dst(t, j, g) {
                                *gwv += xv * go_row[d];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalizes one row to zero mean / unit variance; returns `1/σ`.
pub fn standardize_row(row: &[f64], out: &mut [f64], eps: f64) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mean) * rstd;
    }
    rstd
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape and gather map of an axis permutation:
/// `out[i] = x[map[i]]`.
pub fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let moved_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&moved_strides).map(|(i, s)| i * s).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}
