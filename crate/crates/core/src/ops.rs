//! Layer primitives with analytic gradients.
//!
//! Every forward op here is a pure function; the matching `*_backward` takes
//! the forward inputs plus the upstream gradient and returns [`LayerGrads`].

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gradients of one layer: w.r.t. its input and each of its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T: Scalar = f32> {
    pub grad_input: Tensor<T>,
    pub grad_params: Vec<Tensor<T>>,
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, in_ch, in_h, in_w) = input.dims4("conv2d")?;
        let (out_ch, w_in, k_h, k_w) = weights.dims4("conv2d")?;
        if w_in != in_ch {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "input shape {:?} has {in_ch} channels but weight shape {:?} expects {w_in}",
                    input.shape(),
                    weights.shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (out_h, out_w) = match (
            conv_out_extent(in_h, k_h, stride, pad),
            conv_out_extent(in_w, k_w, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!(
                        "kernel of weight shape {:?} does not fit input shape {:?} with pad {pad}",
                        weights.shape(),
                        input.shape()
                    ),
                ))
            }
        };
        Ok(ConvGeometry {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            k_h,
            k_w,
            out_h,
            out_w,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `lo..hi` whose kernel tap `j` lands inside the input row.
    fn valid_columns(&self, j: usize) -> (usize, usize) {
        // ox·stride + j − pad ∈ [0, in_w)
        let lo = if j >= self.pad { 0 } else { (self.pad - j).div_ceil(self.stride) };
        let hi = if self.in_w + self.pad > j {
            ((self.in_w + self.pad - j).div_ceil(self.stride)).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one image (in_ch × in_h × in_w) into a (patch_len × positions) matrix.
    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.k_h {
                for j in 0..self.k_w {
                    let row = (c * self.k_h + i) * self.k_w + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if y < 0 || y >= self.in_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.in_w..(y as usize + 1) * self.in_w];
                        let (lo, hi) = self.valid_columns(j);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let first = lo * self.stride + j - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (out, &v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *out = v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds a (patch_len × positions) gradient back onto one image, accumulating.
    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_ch {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.k_h {
                for j in 0..self.k_w {
                    let row = (c * self.k_h + i) * self.k_w + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.in_w..(y as usize + 1) * self.in_w];
                        let (lo, hi) = self.valid_columns(j);
                        let first = lo * self.stride + j - self.pad;
                        let row_src = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(self.stride).zip(row_src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is (batch, in_ch, H, W), `weights` is (out_ch, in_ch, kH, kW) and
/// `bias` has `out_ch` elements.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, weights, stride, pad)?;
    if bias.len() != g.out_ch {
        return Err(Error::shape("conv2d bias", &[g.out_ch], bias.shape()));
    }
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = Tensor::zeros(&[g.batch, g.out_ch, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..g.batch {
        g.im2col(input.outer(n), &mut cols);
        let dst = out.outer_mut(n);
        T::gemm(
            g.out_ch,
            k,
            p,
            weights.data(),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            dst,
            false,
        );
        for (o, &b) in bias.data().iter().enumerate() {
            for v in &mut dst[o * p..(o + 1) * p] {
                *v = *v + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]; `grad_params` is `[weights, bias]`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_output: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    conv2d_backward_impl(input, weights, stride, pad, grad_output, true)
}

/// Like [`conv2d_backward`] but leaves `grad_input` zero when `with_input_grad` is false.
pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_output: &Tensor<T>,
    with_input_grad: bool,
) -> Result<LayerGrads<T>> {
    let g = ConvGeometry::new(input, weights, stride, pad)?;
    let expected = [g.batch, g.out_ch, g.out_h, g.out_w];
    if grad_output.shape() != expected {
        return Err(Error::shape("conv2d_backward", &expected, grad_output.shape()));
    }
    let (k, p) = (g.patch_len(), g.positions());
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weights.shape());
    let mut grad_b = Tensor::zeros(&[g.out_ch]);
    let mut cols = vec![T::zero(); k * p];
    let mut grad_cols = vec![T::zero(); k * p];
    for n in 0..g.batch {
        let gout = grad_output.outer(n);
        g.im2col(input.outer(n), &mut cols);
        // dW += dY (O×P) · colsᵀ (P×K)
        T::gemm(
            g.out_ch,
            p,
            k,
            gout,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            grad_w.data_mut(),
            true,
        );
        for (o, db) in grad_b.data_mut().iter_mut().enumerate() {
            *db = *db + gout[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
        if !with_input_grad {
            continue;
        }
        // dcols = Wᵀ (K×O) · dY (O×P)
        T::gemm(
            k,
            g.out_ch,
            p,
            weights.data(),
            (1, k as isize),
            gout,
            (p as isize, 1),
            &mut grad_cols,
            false,
        );
        g.col2im(&grad_cols, grad_input.outer_mut(n));
    }
    Ok(LayerGrads {
        grad_input,
        grad_params: vec![grad_w, grad_b],
    })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_output.shape() {
        return Err(Error::shape("relu_backward", input.shape(), grad_output.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Spatial mean per (batch, channel): (N, C, H, W) → (N, C).
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_average_pool")?;
    let area = T::from_usize(h * w).unwrap();
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / area)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_average_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::invalid(
            "global_average_pool_backward",
            format!("expected a rank-4 input shape, got {input_shape:?}"),
        ));
    };
    if grad_output.shape() != [n, c] {
        return Err(Error::shape(
            "global_average_pool_backward",
            &[n, c],
            grad_output.shape(),
        ));
    }
    let area = T::from_usize(h * w).unwrap();
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_output.data() {
        out.extend(std::iter::repeat(g / area).take(h * w));
    }
    Tensor::new(input_shape, out)
}

/// `scores = input · weightsᵀ + bias` for input (batch, features), weights (classes, features).
pub fn linear<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, features) = input.dims2("linear")?;
    let (classes, w_features) = weights.dims2("linear")?;
    if w_features != features {
        return Err(Error::invalid(
            "linear",
            format!(
                "input shape {:?} does not match weight shape {:?}",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    if bias.len() != classes {
        return Err(Error::shape("linear bias", &[classes], bias.shape()));
    }
    let mut out = Tensor::zeros(&[batch, classes]);
    T::gemm(
        batch,
        features,
        classes,
        input.data(),
        (features as isize, 1),
        weights.data(),
        (1, features as isize),
        out.data_mut(),
        false,
    );
    for row in out.data_mut().chunks_exact_mut(classes) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Gradients of [`linear`]; `grad_params` is `[weights, bias]`.
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let (batch, features) = input.dims2("linear_backward")?;
    let (classes, _) = weights.dims2("linear_backward")?;
    if grad_output.shape() != [batch, classes] {
        return Err(Error::shape("linear_backward", &[batch, classes], grad_output.shape()));
    }
    let mut grad_input = Tensor::zeros(&[batch, features]);
    T::gemm(
        batch,
        classes,
        features,
        grad_output.data(),
        (classes as isize, 1),
        weights.data(),
        (features as isize, 1),
        grad_input.data_mut(),
        false,
    );
    let mut grad_w = Tensor::zeros(&[classes, features]);
    T::gemm(
        classes,
        batch,
        features,
        grad_output.data(),
        (1, classes as isize),
        input.data(),
        (features as isize, 1),
        grad_w.data_mut(),
        false,
    );
    let mut grad_b = Tensor::zeros(&[classes]);
    for row in grad_output.data().chunks_exact(classes) {
        for (b, &g) in grad_b.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(LayerGrads {
        grad_input,
        grad_params: vec![grad_w, grad_b],
    })
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per-class sigmoid cross-entropy, summed over classes and averaged over the batch.
///
/// Returns the loss and its gradient w.r.t. `scores`, `(σ(s) − y) / batch`.
pub fn multilabel_logistic_loss<T: Scalar>(
    scores: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    if scores.shape() != labels.shape() {
        return Err(Error::shape("multilabel_logistic_loss", scores.shape(), labels.shape()));
    }
    if let Some(bad) = labels
        .data()
        .iter()
        .find(|&&y| y != T::zero() && y != T::one())
    {
        return Err(Error::invalid(
            "multilabel_logistic_loss",
            format!("labels must be 0 or 1, found {bad:?}"),
        ));
    }
    let batch = if scores.rank() >= 2 { scores.shape()[0] } else { 1 };
    let batch_t = T::from_usize(batch).unwrap();
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(scores.shape());
    for ((g, &s), &y) in grad.data_mut().iter_mut().zip(scores.data()).zip(labels.data()) {
        let sf = s.as_f64();
        let yf = y.as_f64();
        // max(s, 0) − s·y + ln(1 + e^{−|s|})
        total += sf.max(0.0) - sf * yf + (-sf.abs()).exp().ln_1p();
        *g = (sigmoid(s) - y) / batch_t;
    }
    Ok((T::from_f64_lossy(total / batch as f64), grad))
}

fn check_mask<T: Scalar>(op: &'static str, features: &Tensor<T>, mask: &Tensor<T>) -> Result<usize> {
    let (_, _, h, w) = features.dims4(op)?;
    let (mh, mw) = mask.dims2(op)?;
    if (mh, mw) != (h, w) {
        return Err(Error::invalid(
            op,
            format!(
                "mask shape {:?} does not match spatial size of features {:?}",
                mask.shape(),
                features.shape()
            ),
        ));
    }
    Ok(h * w)
}

fn apply_mask<T: Scalar>(values: &Tensor<T>, mask: &Tensor<T>, area: usize) -> Tensor<T> {
    let mut out = values.clone();
    for plane in out.data_mut().chunks_exact_mut(area) {
        for (v, &m) in plane.iter_mut().zip(mask.data()) {
            // exact zero where suppressed, regardless of the activation's sign or finiteness
            *v = if m == T::zero() { T::zero() } else { *v * m };
        }
    }
    out
}

/// Multiplies every channel of (N, C, H, W) `features` by the (H, W) `mask`.
pub fn masked_multiply<T: Scalar>(features: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let area = check_mask("masked_multiply", features, mask)?;
    Ok(apply_mask(features, mask, area))
}

/// Upstream gradient gated by the same mask, per channel.
pub fn masked_multiply_backward<T: Scalar>(
    grad_output: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let area = check_mask("masked_multiply_backward", grad_output, mask)?;
    Ok(apply_mask(grad_output, mask, area))
}

fn lerp_clamped(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

fn source_coord(dst: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let num = dst * (in_len - 1);
    let den = out_len - 1;
    let lo = num / den;
    let frac = (num % den) as f64 / den as f64;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, frac)
}

/// Corner-aligned bilinear resize of an (H, W) map.
///
/// Output corners sample input corners exactly; results never leave the
/// input's value range.
pub fn bilinear_resize<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (in_h, in_w) = map.dims2("bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output extents must be positive"));
    }
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let src = map.data();
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, out_w, in_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = source_coord(y, out_h, in_h);
        for &(x0, x1, tx) in &cols {
            let at = |r: usize, c: usize| src[r * in_w + c].as_f64();
            let top = lerp_clamped(at(y0, x0), at(y0, x1), tx);
            let bottom = lerp_clamped(at(y1, x0), at(y1, x1), tx);
            out.push(T::from_f64_lossy(lerp_clamped(top, bottom, ty)));
        }
    }
    Tensor::new(&[out_h, out_w], out)
}
