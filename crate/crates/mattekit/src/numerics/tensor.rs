//! Dense row-major tensors (rank 1..=4) and the forward kernels the model
//! needs: row softmax, same-padded convolution, bilinear resize, matmul.
//!
//! Everything is f64. Public entry points validate their inputs and return
//! errors; the `*_raw` kernels assume shapes were already checked and are
//! shared with the autodiff tape.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Validating constructor: rank 1..=4, positive dims, finite values.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!("rank must be 1..=4, got {}", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} expect {n} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite value in tensor".to_string()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    /// Rank-2 tensor from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("no rows".to_string()));
        }
        let w = rows[0].len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::shape("ragged rows".to_string()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(&[rows.len(), w], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bit-level equality, used by determinism checks.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn get3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.dims[1] + i) * self.dims[2] + j]
    }

    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let w = self.dims[2];
        let h = self.dims[1];
        self.data[(c * h + i) * w + j] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Row-wise softmax with per-row max subtraction.
///
/// Each output row is nonnegative and sums to 1 within 1e-6 for any finite
/// input, including rows with very large spread.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "softmax_rows expects rank 2, got {:?}",
            logits.dims()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("softmax_rows: non-finite logits".to_string()));
    }
    Ok(softmax_rows_raw(logits))
}

pub(crate) fn softmax_rows_raw(logits: &Tensor) -> Tensor {
    let (r, c) = (logits.dims[0], logits.dims[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
    Tensor::from_parts(vec![r, c], out)
}

/// Same-padded stride-1 convolution: input CxHxW, kernel OxCxKxK (K odd),
/// bias O, output OxHxW.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 || kernel.rank() != 4 || bias.rank() != 1 {
        return Err(Error::shape(format!(
            "conv2d expects input rank 3 / kernel rank 4 / bias rank 1, got {:?}/{:?}/{:?}",
            input.dims(),
            kernel.dims(),
            bias.dims()
        )));
    }
    let (c_in, _h, _w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (o, kc, kh, kw) = (
        kernel.dims[0],
        kernel.dims[1],
        kernel.dims[2],
        kernel.dims[3],
    );
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {c_in}, kernel {kc}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel must be odd square, got {kh}x{kw}")));
    }
    if bias.dims[0] != o {
        return Err(Error::shape(format!(
            "conv2d bias length {} != output channels {o}",
            bias.dims[0]
        )));
    }
    Ok(conv2d_raw(input, kernel, bias))
}

pub(crate) fn conv2d_raw(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (c_in, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (o_ch, _, k, _) = (
        kernel.dims[0],
        kernel.dims[1],
        kernel.dims[2],
        kernel.dims[3],
    );
    let r = (k - 1) / 2;
    let mut out = vec![0.0; o_ch * h * w];
    for o in 0..o_ch {
        let kbase = o * c_in * k * k;
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.data[o];
                for c in 0..c_in {
                    let ibase = c * h * w;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - r as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + (c * k + ky) * k;
                        for kx in 0..k {
                            let ix = x as isize + kx as isize - r as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernel.data[krow + kx] * input.data[irow + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::from_parts(vec![o_ch, h, w], out)
}

/// Gradients of conv2d_raw w.r.t. input, kernel and bias.
pub(crate) fn conv2d_bwd(
    input: &Tensor,
    kernel: &Tensor,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (o_ch, _, k, _) = (
        kernel.dims[0],
        kernel.dims[1],
        kernel.dims[2],
        kernel.dims[3],
    );
    let r = (k - 1) / 2;
    let mut gin = vec![0.0; c_in * h * w];
    let mut gk = vec![0.0; o_ch * c_in * k * k];
    let mut gb = vec![0.0; o_ch];
    for o in 0..o_ch {
        let kbase = o * c_in * k * k;
        for y in 0..h {
            for x in 0..w {
                let g = gout.data[(o * h + y) * w + x];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for c in 0..c_in {
                    let ibase = c * h * w;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - r as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + (c * k + ky) * k;
                        for kx in 0..k {
                            let ix = x as isize + kx as isize - r as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gin[irow + ix as usize] += kernel.data[krow + kx] * g;
                            gk[krow + kx] += input.data[irow + ix as usize] * g;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![c_in, h, w], gin),
        Tensor::from_parts(vec![o_ch, c_in, k, k], gk),
        Tensor::from_parts(vec![o_ch], gb),
    )
}

/// Bilinear resize with the align-corners=false convention: source sample
/// centers at (i + 0.5) * scale - 0.5, clamped to the grid. Accepts rank-2
/// (HxW) or rank-3 (CxHxW) input and preserves the rank.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize: zero output dims".to_string()));
    }
    match input.rank() {
        2 => {
            let view = Tensor::from_parts(
                vec![1, input.dims[0], input.dims[1]],
                input.data.clone(),
            );
            let out = bilinear_raw(&view, out_h, out_w);
            Ok(Tensor::from_parts(vec![out_h, out_w], out.data))
        }
        3 => Ok(bilinear_raw(input, out_h, out_w)),
        r => Err(Error::shape(format!("bilinear_resize expects rank 2 or 3, got {r}"))),
    }
}

pub(crate) fn bilinear_raw(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c_ch, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![0.0; c_ch * out_h * out_w];
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    for i in 0..out_h {
        let fy = (i as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0c = clamp(y0 as isize, h);
        let y1c = clamp(y0 as isize + 1, h);
        for j in 0..out_w {
            let fx = (j as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0c = clamp(x0 as isize, w);
            let x1c = clamp(x0 as isize + 1, w);
            for c in 0..c_ch {
                let base = c * h * w;
                let v00 = input.data[base + y0c * w + x0c];
                let v01 = input.data[base + y0c * w + x1c];
                let v10 = input.data[base + y1c * w + x0c];
                let v11 = input.data[base + y1c * w + x1c];
                // lerp form keeps constant fields exactly constant
                let top = v00 + tx * (v01 - v00);
                let bot = v10 + tx * (v11 - v10);
                out[(c * out_h + i) * out_w + j] = top + ty * (bot - top);
            }
        }
    }
    Tensor::from_parts(vec![c_ch, out_h, out_w], out)
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.dims[0], a.dims[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// 2x2 average pooling on CxHxW (H, W even).
pub(crate) fn avg_pool2_raw(input: &Tensor) -> Tensor {
    let (c_ch, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c_ch * oh * ow];
    for c in 0..c_ch {
        for i in 0..oh {
            for j in 0..ow {
                let base = c * h * w;
                let s = input.data[base + (2 * i) * w + 2 * j]
                    + input.data[base + (2 * i) * w + 2 * j + 1]
                    + input.data[base + (2 * i + 1) * w + 2 * j]
                    + input.data[base + (2 * i + 1) * w + 2 * j + 1];
                out[(c * oh + i) * ow + j] = s * 0.25;
            }
        }
    }
    Tensor::from_parts(vec![c_ch, oh, ow], out)
}
