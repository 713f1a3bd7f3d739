//! Dense tensor primitives shared by every stage of the network.
//!
//! Layout: a [`FeatureMap`] stores its scalars row-major over pixels with the
//! channels of one pixel contiguous, i.e. element `(y, x, c)` lives at
//! `(y * width + x) * channels + c`. All arithmetic is `f32`, and every
//! reduction accumulates in a fixed order so results are reproducible
//! bit-for-bit.
//!
//! Bilinear sampling uses the cell-center convention: grid cell `(i, j)` sits
//! at continuous coordinate `(x = j, y = i)`. Coordinates outside the grid are
//! clamped to the border (edge replication), so sampling never fails.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} needs {} scalars, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a map by evaluating `f(y, x, c)` on every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// All channels of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear sample of every channel at continuous position `(x, y)`.
    pub fn bilinear_sample(&self, x: f32, y: f32) -> Vec<f32> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_sample_into(x, y, &mut out);
        out
    }

    /// Like [`FeatureMap::bilinear_sample`] but writes into `out`, which must
    /// hold exactly `channels` scalars.
    #[inline]
    pub fn bilinear_sample_into(&self, x: f32, y: f32, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.channels);
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        // NaN coordinates fall through `clamp` unchanged; pin them to the origin.
        let xc = if x.is_nan() { 0.0 } else { x.clamp(0.0, max_x) };
        let yc = if y.is_nan() { 0.0 } else { y.clamp(0.0, max_y) };
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let p00 = self.pixel(y0, x0);
        let p01 = self.pixel(y0, x1);
        let p10 = self.pixel(y1, x0);
        let p11 = self.pixel(y1, x1);
        // lerp form: exact on constant neighbourhoods and at grid points
        for c in 0..self.channels {
            let top = p00[c] + fx * (p01[c] - p00[c]);
            let bottom = p10[c] + fx * (p11[c] - p10[c]);
            out[c] = top + fy * (bottom - top);
        }
    }
}

/// Convolution parameters, weights laid out `[out][in][kh][kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Kernel2D {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(Error::shape(format!(
                "kernel {out_channels}x{in_channels}x{kh}x{kw} got {} weights",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(format!(
                "kernel with {out_channels} outputs got {} biases",
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kh + ky) * self.kw + kx]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Repacks the weights as `[kh][kw][in][out]` so the inner loop of the
    /// convolution walks output channels contiguously.
    fn packed(&self) -> Vec<f32> {
        let mut packed = vec![0.0; self.weights.len()];
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let dst = ((ky * self.kw + kx) * self.in_channels + i) * self.out_channels + o;
                        packed[dst] = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        packed
    }
}

/// Cross-correlation with zero padding.
///
/// Each output cell starts from the bias and accumulates taps in
/// `(ky, kx, in_channel)` order.
pub fn conv2d(input: &FeatureMap, kernel: &Kernel2D, stride: usize, padding: usize) -> Result<FeatureMap> {
    if input.channels != kernel.in_channels {
        return Err(Error::config(format!(
            "conv2d expects {} input channels, map has {}",
            kernel.in_channels, input.channels
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv2d stride must be at least 1"));
    }
    let padded_h = input.height + 2 * padding;
    let padded_w = input.width + 2 * padding;
    if padded_h < kernel.kh || padded_w < kernel.kw {
        return Err(Error::shape(format!(
            "conv2d output would be empty ({}x{} input, {}x{} kernel, padding {padding})",
            input.height, input.width, kernel.kh, kernel.kw
        )));
    }
    let out_h = (padded_h - kernel.kh) / stride + 1;
    let out_w = (padded_w - kernel.kw) / stride + 1;
    let co = kernel.out_channels;
    let ci = kernel.in_channels;
    let packed = kernel.packed();
    let mut out = FeatureMap::zeros(out_h, out_w, co);

    for oy in 0..out_h {
        for ox in 0..out_w {
            let base = (oy * out_w + ox) * co;
            let acc = &mut out.data[base..base + co];
            acc.copy_from_slice(&kernel.bias);
            for ky in 0..kernel.kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= input.height as isize {
                    continue;
                }
                for kx in 0..kernel.kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= input.width as isize {
                        continue;
                    }
                    let px = input.pixel(iy as usize, ix as usize);
                    let tap = &packed[(ky * kernel.kw + kx) * ci * co..(ky * kernel.kw + kx + 1) * ci * co];
                    for (i, &v) in px.iter().enumerate() {
                        let w = &tap[i * co..(i + 1) * co];
                        for (a, &wv) in acc.iter_mut().zip(w) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Block mean over non-overlapping `factor × factor` windows.
pub fn avg_pool(input: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 || !input.height.is_multiple_of(factor) || !input.width.is_multiple_of(factor) {
        return Err(Error::shape(format!(
            "avg_pool factor {factor} does not divide {}x{}",
            input.height, input.width
        )));
    }
    let oh = input.height / factor;
    let ow = input.width / factor;
    let c = input.channels;
    let scale = 1.0 / (factor * factor) as f32;
    let mut out = FeatureMap::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * c;
            let acc = &mut out.data[base..base + c];
            for dy in 0..factor {
                for dx in 0..factor {
                    let px = input.pixel(oy * factor + dy, ox * factor + dx);
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a += v;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a *= scale;
            }
        }
    }
    Ok(out)
}

/// Sub-pixel shuffle: channel `c·r² + dy·r + dx` of input cell `(y, x)` moves
/// to output cell `(r·y + dy, r·x + dx)`, channel `c`.
pub fn pixel_shuffle(input: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || !input.channels.is_multiple_of(r * r) {
        return Err(Error::shape(format!(
            "pixel_shuffle: {} channels not divisible by {}",
            input.channels,
            r * r
        )));
    }
    let oc = input.channels / (r * r);
    let mut out = FeatureMap::zeros(input.height * r, input.width * r, oc);
    for y in 0..input.height {
        for x in 0..input.width {
            let px = input.pixel(y, x);
            for c in 0..oc {
                for dy in 0..r {
                    for dx in 0..r {
                        out.set(r * y + dy, r * x + dx, c, px[c * r * r + dy * r + dx]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn relu_inplace(map: &mut FeatureMap) {
    relu_slice(&mut map.data);
}

#[inline]
pub fn relu_slice(values: &mut [f32]) {
    for v in values {
        *v = v.max(0.0);
    }
}

pub fn relu(values: &[f32]) -> Vec<f32> {
    values.iter().map(|v| v.max(0.0)).collect()
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} scalars, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }
}

/// Descriptor rows, one per keypoint.
pub type DescriptorMatrix = Matrix;

/// Dot product with eight interleaved partial sums combined in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let ca = &a[k * 8..k * 8 + 8];
        let cb = &b[k * 8..k * 8 + 8];
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}

/// Normalizes every row to unit Euclidean norm. Rows with zero norm stay zero
/// and their indices are returned.
pub fn l2_normalize_rows(m: &mut Matrix) -> Vec<usize> {
    let mut flagged = Vec::new();
    for i in 0..m.rows {
        if !normalize_row(m.row_mut(i)) {
            flagged.push(i);
        }
    }
    flagged
}

/// Returns false (leaving the row zeroed) when the norm is zero.
#[inline]
pub(crate) fn normalize_row(row: &mut [f32]) -> bool {
    let mut ss = 0.0f32;
    for v in row.iter() {
        ss += v * v;
    }
    let norm = ss.sqrt();
    if norm > 0.0 && norm.is_finite() {
        let inv = 1.0 / norm;
        for v in row.iter_mut() {
            *v *= inv;
        }
        true
    } else {
        row.iter_mut().for_each(|v| *v = 0.0);
        false
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_inplace(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Fully connected map `y = W x + b` with `W` stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl AffineMap {
    pub fn new(out_dim: usize, in_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != out_dim * in_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "affine map {out_dim}x{in_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weights,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weights transposed to `[in][out]`.
    pub fn transposed_weights(&self) -> Vec<f32> {
        let mut t = vec![0.0; self.weights.len()];
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                t[i * self.out_dim + o] = self.weights[o * self.in_dim + i];
            }
        }
        t
    }

    /// `y[o] = b[o] + Σ_i W[o][i]·x[i]`, terms added in ascending `i`.
    pub fn apply(&self, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for o in 0..self.out_dim {
            let w = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (wv, xv) in w.iter().zip(x) {
                acc += wv * xv;
            }
            y[o] = acc;
        }
    }
}

/// `y += Σ_i x[i]·wt[i]` over rows of a `[in][out]` weight block, in ascending
/// `i`. Produces the same per-element sums as [`AffineMap::apply`] when `y`
/// starts at the bias.
#[inline]
pub(crate) fn accumulate_transposed(wt: &[f32], x: &[f32], y: &mut [f32]) {
    let out = y.len();
    for (i, &xv) in x.iter().enumerate() {
        let w = &wt[i * out..(i + 1) * out];
        for (a, &wv) in y.iter_mut().zip(w) {
            *a += wv * xv;
        }
    }
}
