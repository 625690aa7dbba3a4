//! Dense double-precision arrays: a spatial grid of pixels with `k` channels
//! each (`ChannelStack`) and a plain row-major `Matrix`, plus the elementwise
//! and linear-algebra operations the decoder needs.
//!
//! A `ChannelStack` with `p = height * width` pixels is laid out pixel-major,
//! channel-minor, so its data is exactly a `p x channels` row-major matrix
//! with one row per pixel. Channel mixing is then an ordinary matrix product.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `height x width` grid of pixels, each carrying `channels` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelStack {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ChannelStack {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ChannelStack {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(ChannelStack {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial dimensions `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of pixels (`height * width`).
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    /// The channel vector of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Extract one channel as a `height x width` plane.
    pub fn channel_plane(&self, channel: usize) -> Vec<f64> {
        let mut plane = Vec::with_capacity(self.pixels());
        plane.extend(
            self.data[channel..]
                .iter()
                .step_by(self.channels)
                .copied(),
        );
        plane
    }

    /// Overwrite one channel from a `height x width` plane.
    pub fn set_channel_plane(&mut self, channel: usize, plane: &[f64]) {
        assert_eq!(plane.len(), self.pixels());
        for (dst, &src) in self.data[channel..]
            .iter_mut()
            .step_by(self.channels)
            .zip(plane)
        {
            *dst = src;
        }
    }
}

/// Plain row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mix channels: each output pixel's channel vector is that pixel's input
/// channel vector times `c`. Treating the stack as a `pixels x channels`
/// matrix this is the product `B * C`.
pub fn matmul_channels(b: &ChannelStack, c: &Matrix) -> Result<ChannelStack> {
    if b.channels != c.rows {
        return Err(Error::shape(format!(
            "stack has {} channels but matrix has {} rows",
            b.channels, c.rows
        )));
    }
    let mut out = ChannelStack::zeros(b.height, b.width, c.cols);
    gemm_nn(b.pixels(), b.channels, c.cols, &b.data, &c.data, &mut out.data);
    Ok(out)
}

/// Elementwise `max(x, 0)`.
pub fn relu(b: &ChannelStack) -> ChannelStack {
    b.map(|v| v.max(0.0))
}

pub(crate) fn relu_in_place(data: &mut [f64]) {
    for v in data {
        *v = v.max(0.0);
    }
}

/// Elementwise logistic function `1 / (1 + exp(-x))`.
pub fn sigmoid(b: &ChannelStack) -> ChannelStack {
    b.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_in_place(data: &mut [f64]) {
    for v in data {
        *v = sigmoid_scalar(*v);
    }
}

// ---------------------------------------------------------------------------
// gemm kernels
//
// All heavy products go through matrixmultiply's dgemm. The pixel dimension is
// split into fixed-size row chunks processed in parallel; chunk boundaries do
// not depend on the thread count and reductions combine partial results in
// chunk order, so outputs are bit-identical run to run.
// ---------------------------------------------------------------------------

const ROW_CHUNK: usize = 4096;
const PAR_THRESHOLD: usize = 1 << 20;

fn dgemm_chunk(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m x n] = a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    if m * k * n < PAR_THRESHOLD || m <= ROW_CHUNK {
        dgemm_chunk(m, k, n, a, b, out);
        return;
    }
    out.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(out_chunk, a_chunk)| {
            let rows = a_chunk.len() / k;
            dgemm_chunk(rows, k, n, a_chunk, b, out_chunk);
        });
}

/// `out[m x n] = a[m x k] * b[n x k]^T`, all row-major.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(b.len(), n * k);
    let run = |m_c: usize, a_c: &[f64], out_c: &mut [f64]| unsafe {
        matrixmultiply::dgemm(
            m_c,
            k,
            n,
            1.0,
            a_c.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            out_c.as_mut_ptr(),
            n as isize,
            1,
        );
    };
    if m * k * n < PAR_THRESHOLD || m <= ROW_CHUNK {
        run(m, a, out);
        return;
    }
    out.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(out_chunk, a_chunk)| run(a_chunk.len() / k, a_chunk, out_chunk));
}

/// `out[m x n] = a[p x m]^T * b[p x n]`, reducing over the (large) `p`
/// dimension. Partial products per row chunk are summed in chunk order.
pub(crate) fn gemm_tn(p: usize, m: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    let run = |p_c: usize, a_c: &[f64], b_c: &[f64], out_c: &mut [f64]| unsafe {
        matrixmultiply::dgemm(
            m,
            p_c,
            n,
            1.0,
            a_c.as_ptr(),
            1,
            m as isize,
            b_c.as_ptr(),
            n as isize,
            1,
            0.0,
            out_c.as_mut_ptr(),
            n as isize,
            1,
        );
    };
    if p * m * n < PAR_THRESHOLD || p <= ROW_CHUNK {
        run(p, a, b, out);
        return;
    }
    let partials: Vec<Vec<f64>> = a
        .par_chunks(ROW_CHUNK * m)
        .zip(b.par_chunks(ROW_CHUNK * n))
        .map(|(a_chunk, b_chunk)| {
            let mut partial = vec![0.0; m * n];
            run(a_chunk.len() / m, a_chunk, b_chunk, &mut partial);
            partial
        })
        .collect();
    out.fill(0.0);
    for partial in &partials {
        for (o, v) in out.iter_mut().zip(partial) {
            *o += v;
        }
    }
}

/// Per-chunk partial sums over pixel rows, combined in chunk order.
/// `f` accumulates one row (a `channels`-long slice) into the accumulator.
pub(crate) fn row_chunked_sums<F>(data: &[f64], channels: usize, acc_len: usize, f: F) -> Vec<f64>
where
    F: Fn(&mut [f64], &[f64]) + Sync,
{
    debug_assert_eq!(data.len() % channels, 0);
    if data.len() < PAR_THRESHOLD {
        let mut acc = vec![0.0; acc_len];
        for row in data.chunks_exact(channels) {
            f(&mut acc, row);
        }
        return acc;
    }
    let partials: Vec<Vec<f64>> = data
        .par_chunks(ROW_CHUNK * channels)
        .map(|chunk| {
            let mut acc = vec![0.0; acc_len];
            for row in chunk.chunks_exact(channels) {
                f(&mut acc, row);
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0; acc_len];
    for partial in &partials {
        for (a, v) in acc.iter_mut().zip(partial) {
            *a += v;
        }
    }
    acc
}

/// Like [`row_chunked_sums`] but folds two equally-shaped buffers at once.
pub(crate) fn row_chunked_sums2<F>(
    a: &[f64],
    b: &[f64],
    channels: usize,
    acc_len: usize,
    f: F,
) -> Vec<f64>
where
    F: Fn(&mut [f64], &[f64], &[f64]) + Sync,
{
    debug_assert_eq!(a.len(), b.len());
    if a.len() < PAR_THRESHOLD {
        let mut acc = vec![0.0; acc_len];
        for (ra, rb) in a.chunks_exact(channels).zip(b.chunks_exact(channels)) {
            f(&mut acc, ra, rb);
        }
        return acc;
    }
    let partials: Vec<Vec<f64>> = a
        .par_chunks(ROW_CHUNK * channels)
        .zip(b.par_chunks(ROW_CHUNK * channels))
        .map(|(ca, cb)| {
            let mut acc = vec![0.0; acc_len];
            for (ra, rb) in ca.chunks_exact(channels).zip(cb.chunks_exact(channels)) {
                f(&mut acc, ra, rb);
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0; acc_len];
    for partial in &partials {
        for (x, v) in acc.iter_mut().zip(partial) {
            *x += v;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_scalar_scaling() {
        let b = ChannelStack::constant(2, 2, 1, 1.0);
        let c = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let out = matmul_channels(&b, &c).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_identity() {
        let b = ChannelStack::from_vec(2, 1, 3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 9.0]).unwrap();
        let out = matmul_channels(&b, &Matrix::identity(3)).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_hand_product() {
        // channels [1, 2] at every pixel, c = [[1, 0], [1, 1]] -> [3, 2]
        let b = ChannelStack::from_vec(2, 2, 2, vec![[1.0, 2.0]; 4].concat()).unwrap();
        let c = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let out = matmul_channels(&b, &c).unwrap();
        for r in 0..2 {
            for col in 0..2 {
                assert_eq!(out.pixel(r, col), &[3.0, 2.0]);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let b = ChannelStack::zeros(2, 2, 3);
        let c = Matrix::zeros(2, 2);
        assert!(matches!(matmul_channels(&b, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_examples() {
        let b = ChannelStack::from_vec(1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&b).data(), &[0.0, 0.0, 2.0]);
        let pos = ChannelStack::from_vec(1, 3, 1, vec![0.5, 1.0, 7.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let neg = ChannelStack::from_vec(1, 3, 1, vec![-0.5, -1.0, -7.0]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_examples() {
        let b = ChannelStack::from_vec(1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(sigmoid(&b).data()[0], 0.5);
        let b = ChannelStack::from_vec(1, 1, 1, vec![3.0_f64.ln()]).unwrap();
        assert!((sigmoid(&b).data()[0] - 0.75).abs() < 1e-15);
        // 1 - sigmoid(-x) symmetry on sampled points
        for x in [-5.0, -1.3, 0.0, 0.7, 4.2] {
            let s = sigmoid_scalar(x);
            let t = 1.0 - sigmoid_scalar(-x);
            assert!((s - t).abs() < 1e-15, "x={x}: {s} vs {t}");
        }
    }

    #[test]
    fn gemm_tn_matches_naive() {
        // forced through the chunked path by a large pixel count
        let p = 10_000;
        let m = 3;
        let n = 2;
        let a: Vec<f64> = (0..p * m).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let b: Vec<f64> = (0..p * n).map(|i| ((i * 61 % 89) as f64) / 40.0 - 1.0).collect();
        let mut out = vec![0.0; m * n];
        gemm_tn(p, m, n, &a, &b, &mut out);
        let mut naive = vec![0.0; m * n];
        for r in 0..p {
            for i in 0..m {
                for j in 0..n {
                    naive[i * n + j] += a[r * m + i] * b[r * n + j];
                }
            }
        }
        for (x, y) in out.iter().zip(&naive) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    proptest! {
        // matmul is linear in the matrix argument
        #[test]
        fn matmul_linear_in_matrix(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            c1 in proptest::collection::vec(-5.0f64..5.0, 6),
            c2 in proptest::collection::vec(-5.0f64..5.0, 6),
            alpha in -3.0f64..3.0,
        ) {
            let b = ChannelStack::from_vec(2, 2, 3, vals).unwrap();
            let m1 = Matrix::from_vec(3, 2, c1.clone()).unwrap();
            let m2 = Matrix::from_vec(3, 2, c2.clone()).unwrap();
            let combo = Matrix::from_vec(
                3, 2,
                c1.iter().zip(&c2).map(|(a, b)| alpha * a + b).collect(),
            ).unwrap();
            let lhs = matmul_channels(&b, &combo).unwrap();
            let r1 = matmul_channels(&b, &m1).unwrap();
            let r2 = matmul_channels(&b, &m2).unwrap();
            for i in 0..lhs.len() {
                let rhs = alpha * r1.data()[i] + r2.data()[i];
                let scale = lhs.data()[i].abs().max(rhs.abs()).max(1e-9);
                prop_assert!((lhs.data()[i] - rhs).abs() / scale < 1e-12);
            }
        }

        // relu and sigmoid are monotone; sigmoid stays in (0,1)
        #[test]
        // |x| <= 36: beyond that the logistic value rounds to exactly 0 or 1 in f64
        fn monotone_elementwise(a in -36.0f64..36.0, b in -36.0f64..36.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(lo.max(0.0) <= hi.max(0.0));
            let (sl, sh) = (sigmoid_scalar(lo), sigmoid_scalar(hi));
            prop_assert!(sl <= sh);
            prop_assert!(sl > 0.0 && sh < 1.0);
        }
    }
}
