//! Raw kernels behind the graph ops: strided GEMM and im2col convolution.

use crate::par;

/// Samples per conv work chunk. Fixed so that chunked reductions are
/// independent of the thread count.
pub const CONV_CHUNK: usize = 16;

/// `C = alpha * A * B + beta * C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if m > 0 && n > 0 {
        let need_c = (m - 1) * c_rs + (n - 1) * c_cs + 1;
        assert!(c.len() >= need_c, "gemm: C too small");
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs, "gemm: A too small");
        assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs, "gemm: B too small");
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub batch: usize,
    pub len: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn chunks(&self) -> usize {
        self.batch.div_ceil(CONV_CHUNK)
    }

    fn chunk_range(&self, c: usize) -> (usize, usize) {
        let b0 = c * CONV_CHUNK;
        (b0, (b0 + CONV_CHUNK).min(self.batch))
    }
}

/// im2col for items `b0..b1` of a channel-major `[c_in, batch, len]` input.
/// Output is `[c_in * kernel, (b1 - b0) * len]`.
fn im2col(x: &[f64], d: &ConvDims, b0: usize, b1: usize) -> Vec<f64> {
    let nb = b1 - b0;
    let cols_n = nb * d.len;
    let pad = d.pad() as isize;
    let mut cols = vec![0.0; d.c_in * d.kernel * cols_n];
    for ci in 0..d.c_in {
        for k in 0..d.kernel {
            let row = &mut cols[(ci * d.kernel + k) * cols_n..(ci * d.kernel + k + 1) * cols_n];
            let shift = k as isize - pad;
            for j in 0..nb {
                let src = &x[ci * d.batch * d.len + (b0 + j) * d.len..][..d.len];
                let dst = &mut row[j * d.len..(j + 1) * d.len];
                let lo = (-shift).max(0) as usize;
                let hi = ((d.len as isize) - shift).min(d.len as isize).max(0) as usize;
                for t in lo..hi {
                    dst[t] = src[(t as isize + shift) as usize];
                }
            }
        }
    }
    cols
}

/// Adds a `[c_in * kernel, nb * len]` column buffer back into a `[c_in, nb, len]` chunk.
fn col2im_add(cols: &[f64], d: &ConvDims, nb: usize, dx_chunk: &mut [f64]) {
    // dx_chunk is [c_in, nb, len]
    let cols_n = nb * d.len;
    let pad = d.pad() as isize;
    for ci in 0..d.c_in {
        for k in 0..d.kernel {
            let row = &cols[(ci * d.kernel + k) * cols_n..(ci * d.kernel + k + 1) * cols_n];
            let shift = k as isize - pad;
            for j in 0..nb {
                let src = &row[j * d.len..(j + 1) * d.len];
                let dst = &mut dx_chunk[ci * nb * d.len + j * d.len..][..d.len];
                let lo = (-shift).max(0) as usize;
                let hi = ((d.len as isize) - shift).min(d.len as isize).max(0) as usize;
                for t in lo..hi {
                    dst[(t as isize + shift) as usize] += src[t];
                }
            }
        }
    }
}

/// Same-padded stride-1 cross-correlation. `x` is `[c_in, batch, len]`,
/// `w` is `[c_out, c_in, kernel]`, `bias` is `[c_out]`; returns `[c_out, batch, len]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let ck = d.c_in * d.kernel;
    let parts = par::map_indexed(d.chunks(), |c| {
        let (b0, b1) = d.chunk_range(c);
        let n = (b1 - b0) * d.len;
        let cols = im2col(x, d, b0, b1);
        let mut out = vec![0.0; d.c_out * n];
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        gemm(d.c_out, ck, n, 1.0, w, ck, 1, &cols, n, 1, 1.0, &mut out, n, 1);
        out
    });
    let mut y = vec![0.0; d.c_out * d.batch * d.len];
    for (c, part) in parts.iter().enumerate() {
        let (b0, b1) = d.chunk_range(c);
        let n = (b1 - b0) * d.len;
        for co in 0..d.c_out {
            y[co * d.batch * d.len + b0 * d.len..][..n].copy_from_slice(&part[co * n..(co + 1) * n]);
        }
    }
    y
}

pub struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub fn conv1d_backward(x: &[f64], w: &[f64], dy: &[f64], d: &ConvDims) -> ConvGrads {
    let ck = d.c_in * d.kernel;
    let parts = par::map_indexed(d.chunks(), |c| {
        let (b0, b1) = d.chunk_range(c);
        let nb = b1 - b0;
        let n = nb * d.len;
        let cols = im2col(x, d, b0, b1);
        // dy chunk viewed in place: rows co with stride batch*len, starting at b0*len.
        let dy_off = b0 * d.len;
        let dy_view = &dy[dy_off..];
        let mut dw = vec![0.0; d.c_out * ck];
        // dW = dY_chunk [c_out, n] * cols^T [n, ck]
        gemm(d.c_out, n, ck, 1.0, dy_view, d.batch * d.len, 1, &cols, 1, n, 0.0, &mut dw, ck, 1);
        // dcols = W^T [ck, c_out] * dY_chunk [c_out, n]
        let mut dcols = vec![0.0; ck * n];
        gemm(ck, d.c_out, n, 1.0, w, 1, ck, dy_view, d.batch * d.len, 1, 0.0, &mut dcols, n, 1);
        let mut dx_chunk = vec![0.0; d.c_in * n];
        col2im_add(&dcols, d, nb, &mut dx_chunk);
        let mut db = vec![0.0; d.c_out];
        for (co, slot) in db.iter_mut().enumerate() {
            *slot = dy[co * d.batch * d.len + dy_off..][..n].iter().sum();
        }
        (dx_chunk, dw, db)
    });
    let mut dx = vec![0.0; d.c_in * d.batch * d.len];
    let mut dw = vec![0.0; d.c_out * ck];
    let mut db = vec![0.0; d.c_out];
    for (c, (dx_chunk, dw_c, db_c)) in parts.into_iter().enumerate() {
        let (b0, b1) = d.chunk_range(c);
        let n = (b1 - b0) * d.len;
        for ci in 0..d.c_in {
            dx[ci * d.batch * d.len + b0 * d.len..][..n].copy_from_slice(&dx_chunk[ci * n..(ci + 1) * n]);
        }
        for (a, b) in dw.iter_mut().zip(&dw_c) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&db_c) {
            *a += b;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Naive reference convolution used by tests and the bench suite.
pub fn conv1d_naive(x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let pad = d.pad() as isize;
    let mut y = vec![0.0; d.c_out * d.batch * d.len];
    for co in 0..d.c_out {
        for b in 0..d.batch {
            for t in 0..d.len {
                let mut acc = bias[co];
                for ci in 0..d.c_in {
                    for k in 0..d.kernel {
                        let s = t as isize + k as isize - pad;
                        if s >= 0 && (s as usize) < d.len {
                            acc += w[(co * d.c_in + ci) * d.kernel + k]
                                * x[ci * d.batch * d.len + b * d.len + s as usize];
                        }
                    }
                }
                y[co * d.batch * d.len + b * d.len + t] = acc;
            }
        }
    }
    y
}
