//! Response statistics and a cyclic Jacobi eigensolver for symmetric matrices.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sweep budget of the Jacobi solver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence threshold on `‖offdiag‖_F / ‖M‖_F`.
pub const JACOBI_TOL: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest magnitude are set to zero.
pub const EIG_CLAMP: f64 = 1e-9;

/// Mean-centered response samples, one column per sample.
#[derive(Clone, Debug)]
pub struct ResponseMatrix<T> {
    /// `[c_out, n]`, each row summing to ~0.
    pub centered: Tensor<T>,
    /// `[c_out]`.
    pub mean: Tensor<T>,
    pub n: usize,
}

impl<T: Scalar> ResponseMatrix<T> {
    pub fn channels(&self) -> usize {
        self.centered.shape()[0]
    }
}

/// Eigenvectors on the columns of `vectors`, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct EigenPair<T> {
    pub vectors: Tensor<T>,
    pub values: Tensor<T>,
}

/// Subtract the per-row mean of a `[c, n]` sample matrix.
pub fn center_responses<T: Scalar>(samples: &Tensor<T>) -> Result<ResponseMatrix<T>> {
    let (c, n) = samples.dims2("center_responses")?;
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 response samples, got {n}")));
    }
    let d = samples.data();
    let mut mean = vec![T::zero(); c];
    let mut centered = vec![T::zero(); c * n];
    // Accumulate in f64 so f32 rows of thousands of samples stay centered.
    for r in 0..c {
        let row = &d[r * n..(r + 1) * n];
        let m = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
        let mt = T::c(m);
        mean[r] = mt;
        for (dst, &v) in centered[r * n..(r + 1) * n].iter_mut().zip(row) {
            *dst = v - mt;
        }
    }
    Ok(ResponseMatrix {
        centered: Tensor::new([c, n], centered)?,
        mean: Tensor::new([c], mean)?,
        n,
    })
}

/// `(1/n)·Y·Yᵀ`.
pub fn covariance<T: Scalar>(y: &ResponseMatrix<T>) -> Result<Tensor<T>> {
    let (c, n) = y.centered.dims2("covariance")?;
    let mut out = vec![T::zero(); c * c];
    crate::tensor::gemm(
        c,
        n,
        c,
        y.centered.data(),
        false,
        y.centered.data(),
        true,
        &mut out,
        false,
    );
    let inv = T::one() / T::from_usize(n).unwrap();
    // Symmetrize exactly; GEMM blocking can differ in the last bit.
    for i in 0..c {
        for j in i..c {
            let v = (out[i * c + j] + out[j * c + i]) * T::c(0.5) * inv;
            out[i * c + j] = v;
            out[j * c + i] = v;
        }
    }
    Tensor::new([c, c], out)
}

/// Symmetric eigendecomposition `M = U·diag(S)·Uᵀ`.
///
/// Eigenvectors are normalized so that the largest-magnitude entry of each is
/// positive (ties go to the lowest index).
pub fn sym_eig<T: Scalar>(m: &Tensor<T>) -> Result<EigenPair<T>> {
    sym_eig_traced(m).map(|(pair, _)| pair)
}

/// [`sym_eig`] that also returns the off-diagonal Frobenius norm before the
/// first sweep and after every sweep.
pub fn sym_eig_traced<T: Scalar>(m: &Tensor<T>) -> Result<(EigenPair<T>, Vec<f64>)> {
    let (r, c) = m.dims2("sym_eig")?;
    if r != c {
        return Err(Error::shape("sym_eig", format!("matrix is {r}x{c}")));
    }
    let n = r;
    let src = m.data();
    let mut a: Vec<f64> = src.iter().map(|v| v.f64()).collect();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (a[i * n + j] - a[j * n + i]).abs() >= 1e-5 * scale.max(1.0) {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a[i * n + j],
                    a[j * n + i]
                )));
            }
            let avg = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = avg;
            a[j * n + i] = avg;
        }
    }
    let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut trace = vec![off_norm(&a)];
    let target = JACOBI_TOL * frob;
    let mut sweeps = 0;
    while *trace.last().unwrap() > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off_norm: *trace.last().unwrap(),
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                // A ← Jᵀ A J on rows/cols p, q.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
        sweeps += 1;
        trace.push(off_norm(&a));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps index order among equal eigenvalues.
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let max_abs = order.iter().fold(0.0f64, |m, &i| m.max(a[i * n + i].abs()));
    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![T::zero(); n * n];
    for (col, &src_col) in order.iter().enumerate() {
        let mut lambda = a[src_col * n + src_col];
        if lambda.abs() < EIG_CLAMP * max_abs {
            lambda = 0.0;
        }
        values.push(T::c(lambda));
        let mut pivot = 0;
        for k in 1..n {
            if v[k * n + src_col].abs() > v[pivot * n + src_col].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot * n + src_col] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[k * n + col] = T::c(sign * v[k * n + src_col]);
        }
    }
    Ok((
        EigenPair {
            vectors: Tensor::new([n, n], vectors)?,
            values: Tensor::new([n], values)?,
        },
        trace,
    ))
}
