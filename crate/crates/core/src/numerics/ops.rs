use crate::error::{shape_err, Error, Result};

use super::macs;
use super::scalar::Scalar;
use super::tensor::Tensor;

fn check_2d<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected 2-D operand, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
///
/// Each output element is accumulated from zero in increasing `k` order, so
/// results are bit-identical to a textbook triple loop.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_2d(a, "matmul")?;
    let (k2, n) = check_2d(b, "matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    macs::add(m * k * n);
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_2d(a, "matmul_nt")?;
    let (n, k2) = check_2d(b, "matmul_nt")?;
    if k != k2 {
        return Err(shape_err("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            od[i * n + j] = dot(arow, b.row(j));
        }
    }
    out.ensure_finite("matmul_nt")?;
    Ok(out)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = check_2d(a, "matmul_tn")?;
    let (k2, n) = check_2d(b, "matmul_tn")?;
    if k != k2 {
        return Err(shape_err("matmul_tn", format!("[{k}x{m}]^T x [{k2}x{n}]")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &api) in arow.iter().enumerate() {
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    macs::add(m * k * n);
    out.ensure_finite("matmul_tn")?;
    Ok(out)
}

/// Left-to-right dot product of two equal-length slices.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    macs::add(a.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `dst += alpha * src`.
#[inline]
pub fn axpy_slice<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// In-place softmax of one slice with max subtraction.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax over an empty axis".into()));
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax"));
    }
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
    Ok(())
}

/// Softmax over the last axis.
pub fn softmax<T: Scalar>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    if scores.cols() == 0 {
        return Err(Error::InvalidArgument("softmax over an empty axis".into()));
    }
    let mut out = scores.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r))?;
    }
    Ok(out)
}

/// Gradient of softmax: `dz = p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward_slice<T: Scalar>(p: &[T], dp: &[T], dz: &mut [T]) {
    let inner = p.iter().zip(dp).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    for ((z, &pi), &dpi) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (dpi - inner);
    }
}

/// Root-mean-square normalization of each row followed by a per-feature gain.
///
/// Returns the normalized tensor and the per-row reciprocal RMS needed by
/// [`rms_norm_backward`].
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("rms_norm eps must be > 0, got {eps}")));
    }
    let d = x.cols();
    if gain.len() != d {
        return Err(shape_err("rms_norm", format!("gain has {} entries for width {d}", gain.len())));
    }
    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) * inv_d;
        let scale = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = *v * scale * g;
        }
        inv.push(scale);
    }
    out.ensure_finite("rms_norm")?;
    Ok((out, inv))
}

/// Backward pass of [`rms_norm`]; accumulates into `dgain` when given.
pub fn rms_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    inv_rms: &[T],
    dy: &Tensor<T>,
    dgain: Option<&mut Tensor<T>>,
) -> Tensor<T> {
    let d = x.cols();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let g = gain.data();
    let mut dg_acc = dgain;
    for r in 0..x.rows() {
        let (xr, dyr, scale) = (x.row(r), dy.row(r), inv_rms[r]);
        let mut proj = T::zero();
        for j in 0..d {
            proj += dyr[j] * g[j] * xr[j];
        }
        let coef = scale * scale * scale * inv_d * proj;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            dxr[j] = scale * dyr[j] * g[j] - xr[j] * coef;
        }
        if let Some(dg) = dg_acc.as_deref_mut() {
            for (j, v) in dg.data_mut().iter_mut().enumerate() {
                *v += dyr[j] * xr[j] * scale;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selector() {
        let a = Tensor::<f32>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = Tensor::<f32>::from_f64(&[1, 2], &[1., 0.]).unwrap();
        let c = Tensor::<f32>::from_f64(&[2, 1], &[0., 5.]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a: Tensor<f64> = rng.normal_tensor(&[5, 7], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[7, 3], 1.0);
        let want = triple_loop(a.data(), b.data(), 5, 7, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
        // Same accumulation order means exact agreement, too.
        assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn transposed_variants_agree_bitwise() {
        let mut rng = Rng::new(4);
        let a: Tensor<f32> = rng.normal_tensor(&[4, 6], 1.0);
        let b: Tensor<f32> = rng.normal_tensor(&[5, 6], 1.0);
        let c: Tensor<f32> = rng.normal_tensor(&[4, 5], 1.0);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &b.transpose().unwrap()).unwrap());
        assert_eq!(matmul_tn(&a, &c).unwrap(), matmul(&a.transpose().unwrap(), &c).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::<f64>::from_f64(&[2], &[0., 0.]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f32>::from_f64(&[2], &[1e30, 0.]).unwrap()).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
        assert!(softmax(&Tensor::<f32>::zeros(&[3, 0])).is_err());

        let mut rng = Rng::new(9);
        let v: Tensor<f64> = rng.normal_tensor(&[11], 2.0);
        let z: f64 = v.data().iter().map(|x| x.exp()).sum();
        let s = softmax(&v).unwrap();
        for (p, x) in s.data().iter().zip(v.data()) {
            assert!((p - x.exp() / z).abs() < 1e-6);
        }
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rms_norm_cases() {
        let eps = 1e-5;
        let x = Tensor::<f64>::ones(&[1, 4]);
        let (y, _) = rms_norm(&x, &Tensor::ones(&[4]), eps).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / (1.0f64 + eps).sqrt()).abs() < 1e-12);
        }
        let (y, _) = rms_norm(&x, &Tensor::zeros(&[4]), eps).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(rms_norm(&x, &Tensor::ones(&[4]), 0.0).is_err());

        let mut rng = Rng::new(1);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 6], 1.0);
        let g: Tensor<f64> = rng.normal_tensor(&[6], 1.0);
        let ms: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 6.0;
        let (y, _) = rms_norm(&x, &g, eps).unwrap();
        for j in 0..6 {
            let want = x.data()[j] / (ms + eps).sqrt() * g.data()[j];
            assert!((y.data()[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn mac_counter_tracks_matmul() {
        let a = Tensor::<f32>::zeros(&[3, 4]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let (_, n) = macs::measure(|| matmul(&a, &b).unwrap());
        assert_eq!(n, 60);
    }
}
