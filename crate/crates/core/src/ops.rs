//! Forward and backward kernels for the primitives the tape records.
//!
//! Every function here is pure: the tape decides what to keep for the
//! backward pass, and inference calls the forward kernels directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = a · b (+ beta · c)` where `a` is logically `m × k` and `b` is `k × n`,
/// all row-major. `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element the strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        _ => return Err(mismatch("matmul", a, b)),
    };
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Returns `(da, db)` for `c = a · b` given `dc`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![0.0; m * k];
    gemm(m, n, k, dc.data(), false, b.data(), true, 0.0, &mut da);
    let mut db = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, dc.data(), false, 0.0, &mut db);
    (
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    )
}

/// Adds `bias[f]` to every element of channel `f` (axis 1).
pub fn bias_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 || bias.ndim() != 1 || bias.len() != x.shape()[1] {
        return Err(mismatch("bias_add", x, bias));
    }
    let channels = bias.len();
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = x.data().to_vec();
    for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
        let b = bias.data()[chunk_idx % channels];
        for v in chunk {
            *v += b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn bias_add_backward(dy: &Tensor, channels: usize) -> Tensor {
    let inner: usize = dy.shape()[2..].iter().product();
    let mut db = vec![0.0; channels];
    for (chunk_idx, chunk) in dy.data().chunks(inner).enumerate() {
        db[chunk_idx % channels] += chunk.iter().sum::<f64>();
    }
    Tensor::from_parts(vec![channels], db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, kernel: &Tensor) -> Result<Self> {
        match (x.shape(), kernel.shape()) {
            ([n, c, h, w], [f, c2, kh, kw]) if c == c2 && kh <= h && kw <= w => Ok(Self {
                batch: *n,
                in_ch: *c,
                height: *h,
                width: *w,
                filters: *f,
                kh: *kh,
                kw: *kw,
            }),
            _ => Err(mismatch("conv2d", x, kernel)),
        }
    }

    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }

    /// Rows of the unfolded patch matrix (`C·KH·KW`).
    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn sample_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }
}

fn im2col(geo: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let positions = oh * ow;
    let mut row = 0;
    for c in 0..geo.in_ch {
        let plane = &sample[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let src = &plane[(oy + i) * geo.width + j..(oy + i) * geo.width + j + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(geo: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    let positions = oh * ow;
    let mut row = 0;
    for c in 0..geo.in_ch {
        let plane = &mut sample[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let dst = &mut plane[(oy + i) * geo.width + j..(oy + i) * geo.width + j + ow];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid-padding, unit-stride 2-D convolution (cross-correlation).
///
/// With `keep_cols` the unfolded patches of every sample are returned for
/// the backward pass; otherwise a single per-sample buffer is reused.
pub fn conv2d(x: &Tensor, kernel: &Tensor, keep_cols: bool) -> Result<(Tensor, Option<Vec<f64>>)> {
    let geo = ConvGeometry::new(x, kernel)?;
    let (patch, positions) = (geo.patch(), geo.positions());
    let mut out = vec![0.0; geo.batch * geo.filters * positions];
    let mut saved = keep_cols.then(|| vec![0.0; geo.batch * patch * positions]);
    let mut scratch = if keep_cols {
        Vec::new()
    } else {
        vec![0.0; patch * positions]
    };
    for n in 0..geo.batch {
        let sample = &x.data()[n * geo.sample_len()..(n + 1) * geo.sample_len()];
        let cols: &mut [f64] = match saved.as_mut() {
            Some(all) => &mut all[n * patch * positions..(n + 1) * patch * positions],
            None => &mut scratch,
        };
        im2col(&geo, sample, cols);
        gemm(
            geo.filters,
            patch,
            positions,
            kernel.data(),
            false,
            cols,
            false,
            0.0,
            &mut out[n * geo.filters * positions..(n + 1) * geo.filters * positions],
        );
    }
    let shape = vec![geo.batch, geo.filters, geo.out_h(), geo.out_w()];
    Ok((Tensor::from_parts(shape, out), saved))
}

/// Returns `(dx, dkernel)`; `dx` is skipped when the input needs no gradient.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    cols: &[f64],
    dy: &Tensor,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let geo = ConvGeometry::new(x, kernel)?;
    let (patch, positions) = (geo.patch(), geo.positions());
    let mut dk = vec![0.0; geo.filters * patch];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dcols = vec![0.0; patch * positions];
    for n in 0..geo.batch {
        let dy_n = &dy.data()[n * geo.filters * positions..(n + 1) * geo.filters * positions];
        let cols_n = &cols[n * patch * positions..(n + 1) * patch * positions];
        gemm(geo.filters, positions, patch, dy_n, false, cols_n, true, 1.0, &mut dk);
        if let Some(dx) = dx.as_mut() {
            gemm(patch, geo.filters, positions, kernel.data(), true, dy_n, false, 0.0, &mut dcols);
            col2im_add(
                &geo,
                &dcols,
                &mut dx[n * geo.sample_len()..(n + 1) * geo.sample_len()],
            );
        }
    }
    Ok((
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    ))
}

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
/// Returns the output and, per output element, the flat input index of the
/// winning element (first maximum in scan order).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] if *h >= 2 && *w >= 2 => (*n, *c, *h, *w),
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "max_pool2 expects N×C×H×W with H, W ≥ 2".into(),
            })
        }
    };
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Collapses every axis after the leading (batch) axis.
pub fn flatten(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    Tensor::from_parts(vec![n, x.len() / n], x.data().to_vec())
}

/// Row-wise softmax of a `N × C` logit matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let c = match logits.shape() {
        [_, c] => *c,
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "softmax expects N×C logits".into(),
            })
        }
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
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
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Per-sample cross-entropy of `N × C` logits against integer labels,
/// computed through log-sum-exp.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "cross-entropy expects N×C logits".into(),
            })
        }
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &label)| {
            if label >= c {
                return Err(Error::InvalidShape {
                    shape: logits.shape().to_vec(),
                    reason: format!("label {label} out of range for {c} classes"),
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok(lse - row[label])
        })
        .collect()
}

/// Fused softmax + cross-entropy, mean over the batch.
/// Returns the scalar loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let losses = cross_entropy_per_sample(logits, labels)?;
    let loss = losses.iter().sum::<f64>() / labels.len() as f64;
    Ok((loss, softmax(logits)?))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let c = probs.shape()[1];
    let scale = upstream / labels.len() as f64;
    let mut grad = probs.data().to_vec();
    for (row, &label) in grad.chunks_mut(c).zip(labels) {
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::from_parts(probs.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = t(&[3, 3], &[1., -2., 3., 4.5, 5., 6., -7., 8., 9.25]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_small_product() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_with_unit_kernel_scales_input() {
        let data: Vec<f64> = (0..25).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = t(&[1, 1, 5, 5], &data);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let (y, _) = conv2d(&x, &k, false).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        let expected: Vec<f64> = data.iter().map(|v| v * 2.0).collect();
        assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 2 channels, 4x4 input, 2 filters of 3x3
        let x: Vec<f64> = (0..32).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..36).map(|v| ((v * 5) % 7) as f64 * 0.25 - 0.5).collect();
        let xt = t(&[1, 2, 4, 4], &x);
        let kt = t(&[2, 2, 3, 3], &k);
        let (y, cols) = conv2d(&xt, &kt, true).unwrap();
        assert!(cols.is_some());
        for f in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for i in 0..3 {
                            for j in 0..3 {
                                acc += x[c * 16 + (oy + i) * 4 + ox + j]
                                    * k[f * 18 + c * 9 + i * 3 + j];
                            }
                        }
                    }
                    let got = y.data()[f * 4 + oy * 2 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &k, false).is_err());
    }

    #[test]
    fn pool_picks_first_maximum() {
        let x = t(&[1, 1, 2, 4], &[1., 3., 5., 5., 3., 2., 5., 0.]);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[3., 5.]);
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn bias_add_broadcasts_over_channels() {
        let x = Tensor::zeros(&[2, 2, 1, 2]);
        let b = Tensor::from_vec(vec![1.0, -1.0]);
        let y = bias_add(&x, &b).unwrap();
        assert_eq!(y.data(), &[1., 1., -1., -1., 1., 1., -1., -1.]);
        assert_eq!(bias_add_backward(&y, 2).data(), &[4.0, -4.0]);
    }

    #[test]
    fn uniform_logits_loss_is_log_classes() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
