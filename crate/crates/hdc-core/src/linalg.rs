//! Kernel evaluation, Gram matrices, trace normalization, Hadamard
//! products, and a cyclic Jacobi eigensolver for the small symmetric
//! matrices this crate cares about (batch-order Grams, b <= 64).
//!
//! Everything here is a pure function; the differentiable Gram path lives
//! on the tape but shares `gram_into`/`gram_backward` from this module.

use crate::error::{HdcError, Result};
use crate::exec;
use crate::tensor::{Real, Tensor};

/// Kernel family with an unresolved bandwidth rule.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Linear,
    Rbf { bandwidth: Bandwidth },
    Polynomial { degree: u32, offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median of pairwise distances, recomputed per batch.
    Median,
    Fixed(f64),
}

impl KernelSpec {
    pub fn rbf_median() -> Self {
        KernelSpec::Rbf { bandwidth: Bandwidth::Median }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(s) } if *s <= 0.0 => {
                Err(HdcError::contract(format!("rbf bandwidth must be > 0, got {s}")))
            }
            KernelSpec::Polynomial { degree: 0, .. } => {
                Err(HdcError::contract("polynomial kernel degree must be >= 1"))
            }
            KernelSpec::Polynomial { offset, .. } if *offset < 0.0 => {
                Err(HdcError::contract(format!("polynomial offset must be >= 0, got {offset}")))
            }
            _ => Ok(()),
        }
    }

    /// Resolve the bandwidth rule against a concrete feature batch. The
    /// resolved value is treated as a constant thereafter (no gradient
    /// through the bandwidth).
    pub fn resolve<T: Real>(&self, z: &Tensor<T>) -> Result<ResolvedKernel> {
        self.validate()?;
        Ok(match self {
            KernelSpec::Linear => ResolvedKernel::Linear,
            KernelSpec::Polynomial { degree, offset } => {
                ResolvedKernel::Polynomial { degree: *degree as i32, offset: *offset }
            }
            KernelSpec::Rbf { bandwidth } => {
                let sigma = match bandwidth {
                    Bandwidth::Fixed(s) => *s,
                    Bandwidth::Median => {
                        let s = z.shape();
                        median_bandwidth(z.data(), s[0], s[1])?
                    }
                };
                ResolvedKernel::Rbf { sigma }
            }
        })
    }
}

/// Kernel with all parameters pinned to numbers.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedKernel {
    Linear,
    Rbf { sigma: f64 },
    Polynomial { degree: i32, offset: f64 },
}

/// Median of the pairwise Euclidean distances of the rows of a `b x d`
/// matrix (even counts average the two middle values). Falls back to 1.0
/// when the median distance is zero.
pub fn median_bandwidth<T: Real>(z: &[T], b: usize, d: usize) -> Result<f64> {
    if b < 2 {
        return Err(HdcError::contract(format!("median bandwidth needs b >= 2, got {b}")));
    }
    let mut dists: Vec<f64> = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in i + 1..b {
            let mut acc = 0.0;
            for k in 0..d {
                let c = (z[i * d + k] - z[j * d + k]).to_f64();
                acc += c * c;
            }
            dists.push(acc.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = dists.len();
    let med = if n % 2 == 1 { dists[n / 2] } else { 0.5 * (dists[n / 2 - 1] + dists[n / 2]) };
    Ok(if med == 0.0 { 1.0 } else { med })
}

#[inline]
fn kernel_eval<T: Real>(k: &ResolvedKernel, zi: &[T], zj: &[T]) -> T {
    match k {
        ResolvedKernel::Linear => crate::ops::dot(zi, zj),
        ResolvedKernel::Rbf { sigma } => {
            let mut acc = T::ZERO;
            for i in 0..zi.len() {
                let c = zi[i] - zj[i];
                acc = c.mul_add(c, acc);
            }
            let s2 = T::from_f64(2.0 * sigma * sigma);
            (-acc / s2).exp()
        }
        ResolvedKernel::Polynomial { degree, offset } => {
            (crate::ops::dot(zi, zj) + T::from_f64(*offset)).powi(*degree)
        }
    }
}

/// Fill `out` (b x b) with the Gram matrix of the rows of `z` (b x d).
/// Symmetric by construction: entries are computed once and mirrored.
pub fn gram_into<T: Real>(z: &[T], b: usize, d: usize, k: &ResolvedKernel, out: &mut [T]) {
    for i in 0..b {
        let zi = &z[i * d..(i + 1) * d];
        for j in i..b {
            let v = kernel_eval(k, zi, &z[j * d..(j + 1) * d]);
            out[i * b + j] = v;
            out[j * b + i] = v;
        }
    }
}

/// Accumulate d(loss)/dZ into `gz` given the upstream gradient `gk` on the
/// Gram matrix. `kv` is the forward Gram value. The kernel bandwidth is a
/// constant; only the feature dependence is differentiated.
pub fn gram_backward<T: Real>(
    z: &[T],
    b: usize,
    d: usize,
    kernel: &ResolvedKernel,
    kv: &[T],
    gk: &[T],
    gz: &mut [T],
) {
    match kernel {
        ResolvedKernel::Linear => {
            // K = Z Z^T, gZ += (G + G^T) Z
            for i in 0..b {
                for j in 0..b {
                    let g = gk[i * b + j] + gk[j * b + i];
                    if g == T::ZERO {
                        continue;
                    }
                    let zj = &z[j * d..(j + 1) * d];
                    crate::ops::axpy(g, zj, &mut gz[i * d..(i + 1) * d]);
                }
            }
        }
        ResolvedKernel::Rbf { sigma } => {
            // dK_ij/dz_i = K_ij (z_j - z_i) / sigma^2
            let inv_s2 = T::from_f64(1.0 / (sigma * sigma));
            for i in 0..b {
                for j in 0..b {
                    if i == j {
                        continue;
                    }
                    let g = (gk[i * b + j] + gk[j * b + i]) * kv[i * b + j] * inv_s2;
                    if g == T::ZERO {
                        continue;
                    }
                    for t in 0..d {
                        gz[i * d + t] += g * (z[j * d + t] - z[i * d + t]);
                    }
                }
            }
        }
        ResolvedKernel::Polynomial { degree, offset } => {
            // dK_ij/dz_i = p (<z_i, z_j> + c)^{p-1} z_j
            let p = T::from_f64(f64::from(*degree));
            let c = T::from_f64(*offset);
            for i in 0..b {
                for j in 0..b {
                    let g = gk[i * b + j] + gk[j * b + i];
                    if g == T::ZERO {
                        continue;
                    }
                    let zi = &z[i * d..(i + 1) * d];
                    let zj = &z[j * d..(j + 1) * d];
                    let base = crate::ops::dot(zi, zj) + c;
                    let coef = g * p * base.powi(degree - 1);
                    crate::ops::axpy(coef, zj, &mut gz[i * d..(i + 1) * d]);
                }
            }
        }
    }
}

/// Batch Gram matrix of feature rows (plain, non-tape path).
pub fn gram_matrix<T: Real>(z: &Tensor<T>, spec: &KernelSpec) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 2 || s[0] < 1 || s[1] < 1 {
        return Err(HdcError::contract(format!("gram_matrix expects b x d with b,d >= 1, got {s:?}")));
    }
    if !z.all_finite() {
        return Err(HdcError::numeric("gram_matrix: non-finite features"));
    }
    let resolved = spec.resolve(z)?;
    let (b, d) = (s[0], s[1]);
    let mut out = Tensor::zeros(vec![b, b]);
    gram_into(z.data(), b, d, &resolved, out.data_mut());
    Ok(out)
}

/// Divide a square matrix by its trace. Errors when the trace is not
/// strictly positive.
pub fn trace_normalize(k: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = square_order(k)?;
    let tr: f64 = (0..n).map(|i| k.data()[i * n + i]).sum();
    if tr <= 0.0 {
        return Err(HdcError::numeric(format!("trace_normalize: trace {tr} <= 0")));
    }
    Ok(k.map(|v| v / tr))
}

/// Entrywise product of two same-order matrices, then trace-normalized.
pub fn hadamard_normalized(k1: &Tensor<f64>, k2: &Tensor<f64>) -> Result<Tensor<f64>> {
    if k1.shape() != k2.shape() {
        return Err(HdcError::contract(format!(
            "hadamard: order mismatch {:?} vs {:?}",
            k1.shape(),
            k2.shape()
        )));
    }
    let prod: Vec<f64> = k1.data().iter().zip(k2.data()).map(|(&a, &b)| a * b).collect();
    trace_normalize(&Tensor::new(k1.shape().to_vec(), prod)?)
}

fn square_order<T: Real>(m: &Tensor<T>) -> Result<usize> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(HdcError::contract(format!("expected square matrix, got {s:?}")));
    }
    Ok(s[0])
}

const SYMMETRY_TOL: f64 = 1e-9;
const JACOBI_OFF_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix in descending order, via cyclic
/// Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Tensor<f64>) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(m)?.0)
}

/// Full symmetric eigendecomposition `(eigenvalues desc, eigenvectors)`.
/// Column `k` of the returned `n x n` matrix is the eigenvector for the
/// k-th eigenvalue, so `M = V diag(l) V^T`.
pub fn symmetric_eigen(m: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    let n = square_order(m)?;
    for i in 0..n {
        for j in i + 1..n {
            if (m.data()[i * n + j] - m.data()[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(HdcError::contract(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    m.data()[i * n + j],
                    m.data()[j * n + i]
                )));
            }
        }
    }

    let mut a = m.data().to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if (2.0 * off).sqrt() < JACOBI_OFF_TOL {
            converged = true;
            break;
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
                // Stable rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1))
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        // Final check after the last sweep.
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if (2.0 * off).sqrt() >= JACOBI_OFF_TOL {
            return Err(HdcError::numeric(format!(
                "jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {off:.3e})"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).expect("finite eigenvalues"));
    let evals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = Tensor::zeros(vec![n, n]);
    for (newc, &oldc) in order.iter().enumerate() {
        for r in 0..n {
            vecs.data_mut()[r * n + newc] = v[r * n + oldc];
        }
    }
    Ok((evals, vecs))
}

/// Maximum reconstruction error `|M - V diag(l) V^T|` entrywise.
pub fn reconstruction_error(m: &Tensor<f64>, evals: &[f64], vecs: &Tensor<f64>) -> f64 {
    let n = m.shape()[0];
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs.data()[i * n + k] * evals[k] * vecs.data()[j * n + k];
            }
            worst = worst.max((acc - m.data()[i * n + j]).abs());
        }
    }
    worst
}

/// Minimum eigenvalue; used for PSD assertions.
pub fn min_eigenvalue(m: &Tensor<f64>) -> Result<f64> {
    let evals = symmetric_eigenvalues(m)?;
    Ok(*evals.last().expect("non-empty"))
}

/// Random trace-1 PSD matrix via a random feature Gram (testing helper).
pub fn random_normalized_psd(rng: &mut crate::rng::SeededRng, b: usize, d: usize) -> Tensor<f64> {
    let z: Vec<f64> = (0..b * d).map(|_| rng.normal()).collect();
    let zt = Tensor::new(vec![b, d], z).expect("shape");
    let g = gram_matrix(&zt, &KernelSpec::rbf_median()).expect("gram");
    trace_normalize(&g).expect("normalize")
}

/// Evaluate a function over many seeds in parallel (verification sweeps).
pub fn sweep_seeds<R: Send>(seeds: &[u64], f: impl Fn(u64) -> R + Sync) -> Vec<R> {
    exec::map_indexed(seeds.len(), |i| f(seeds[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn linear_kernel_orthonormal_rows_give_identity() {
        let z = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let k = gram_matrix(&z, &KernelSpec::Linear).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((k.data()[i * 3 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rbf_identical_rows_give_all_ones() {
        let z = Tensor::new(vec![3, 2], vec![0.4, -1.0, 0.4, -1.0, 0.4, -1.0]).unwrap();
        let k = gram_matrix(&z, &KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(0.7) }).unwrap();
        assert!(k.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rbf_two_point_value() {
        // z = [[0],[1]], sigma = 1: off-diagonal = exp(-1/2)
        let z = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let k = gram_matrix(&z, &KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(1.0) }).unwrap();
        let e = (-0.5f64).exp();
        assert!((k.data()[1] - e).abs() < 1e-12);
        assert!((e - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn median_bandwidth_cases() {
        // single pair
        assert_eq!(median_bandwidth(&[0.0f64, 2.0], 2, 1).unwrap(), 2.0);
        // all identical -> fallback
        assert_eq!(median_bandwidth(&[0.0f64, 0.0, 0.0], 3, 1).unwrap(), 1.0);
        // {1,2,3} -> 2
        assert_eq!(median_bandwidth(&[0.0f64, 1.0, 3.0], 3, 1).unwrap(), 2.0);
        // b < 2 is a contract error
        assert!(median_bandwidth(&[0.0f64], 1, 1).is_err());
    }

    #[test]
    fn rbf_nonpositive_sigma_rejected() {
        let z = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let err = gram_matrix(&z, &KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(0.0) }).unwrap_err();
        assert!(matches!(err, HdcError::Contract(_)));
    }

    #[test]
    fn trace_normalize_examples() {
        let eye4 = {
            let mut t = Tensor::zeros(vec![4, 4]);
            for i in 0..4 {
                t.data_mut()[i * 4 + i] = 1.0;
            }
            t
        };
        let n = trace_normalize(&eye4).unwrap();
        for i in 0..4 {
            assert!((n.data()[i * 4 + i] - 0.25).abs() < 1e-15);
        }
        // idempotent on trace-1 input
        let again = trace_normalize(&n).unwrap();
        assert_eq!(again.data(), n.data());
        // diag(1,3) -> diag(0.25, 0.75)
        let d = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let nd = trace_normalize(&d).unwrap();
        assert_eq!(nd.data(), &[0.25, 0.0, 0.0, 0.75]);
    }

    #[test]
    fn trace_normalize_zero_trace_is_numeric_error() {
        let z = Tensor::zeros(vec![2, 2]);
        assert!(matches!(trace_normalize(&z), Err(HdcError::Numeric(_))));
    }

    #[test]
    fn hadamard_with_scaled_ones_recovers_other_factor() {
        let mut rng = SeededRng::new(5);
        let k2 = random_normalized_psd(&mut rng, 4, 3);
        let ones = Tensor::full(vec![4, 4], 0.25); // all-ones / b, trace 1
        let k12 = hadamard_normalized(&ones, &k2).unwrap();
        for (a, b) in k12.data().iter().zip(k2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hadamard_identity_halves() {
        let half = Tensor::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let k12 = hadamard_normalized(&half, &half).unwrap();
        assert_eq!(k12.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn hadamard_order_mismatch_rejected() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![3, 3]);
        assert!(matches!(hadamard_normalized(&a, &b), Err(HdcError::Contract(_))));
    }

    #[test]
    fn hadamard_of_random_psd_is_psd() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let k1 = random_normalized_psd(&mut rng, 5, 3);
            let k2 = random_normalized_psd(&mut rng, 5, 4);
            let k12 = hadamard_normalized(&k1, &k2).unwrap();
            assert!(min_eigenvalue(&k12).unwrap() >= -1e-8);
        }
    }

    #[test]
    fn jacobi_identity() {
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(symmetric_eigenvalues(&eye).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn jacobi_diagonal_sorted() {
        let d = Tensor::new(vec![3, 3], vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(symmetric_eigenvalues(&d).unwrap(), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn jacobi_2x2_closed_form() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 ((2-l)^2 - 1 = 0).
        let m = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = symmetric_eigenvalues(&m).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-10);
        assert!((e[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let mut rng = SeededRng::new(23);
        for n in [2usize, 3, 5, 8, 16] {
            let mut m = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                for j in i..n {
                    let v = rng.normal();
                    m.data_mut()[i * n + j] = v;
                    m.data_mut()[j * n + i] = v;
                }
            }
            let (evals, vecs) = symmetric_eigen(&m).unwrap();
            assert!(reconstruction_error(&m, &evals, &vecs) < 1e-8);
        }
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(symmetric_eigenvalues(&m), Err(HdcError::Contract(_))));
    }

    #[test]
    fn eigenvalues_permutation_equivariant() {
        let mut rng = SeededRng::new(31);
        let k = random_normalized_psd(&mut rng, 6, 3);
        let mut base = symmetric_eigenvalues(&k).unwrap();
        // random permutation
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let n = 6;
        let mut pk = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in 0..n {
                pk.data_mut()[i * n + j] = k.data()[perm[i] * n + perm[j]];
            }
        }
        let mut permuted = symmetric_eigenvalues(&pk).unwrap();
        base.sort_by(|a, b| a.partial_cmp(b).unwrap());
        permuted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gram_psd_across_kernels() {
        let mut rng = SeededRng::new(41);
        let specs = [
            KernelSpec::Linear,
            KernelSpec::rbf_median(),
            KernelSpec::Polynomial { degree: 2, offset: 1.0 },
        ];
        for spec in &specs {
            for _ in 0..10 {
                let b = 2 + rng.below(6);
                let d = 1 + rng.below(4);
                let z: Vec<f64> = (0..b * d).map(|_| rng.normal()).collect();
                let zt = Tensor::new(vec![b, d], z).unwrap();
                let k = gram_matrix(&zt, spec).unwrap();
                // symmetric
                for i in 0..b {
                    for j in 0..b {
                        assert!((k.data()[i * b + j] - k.data()[j * b + i]).abs() < 1e-12);
                    }
                }
                assert!(min_eigenvalue(&k).unwrap() >= -1e-8, "kernel {spec:?}");
            }
        }
    }

    #[test]
    fn normalized_psd_eigenvalues_are_a_distribution() {
        let mut rng = SeededRng::new(53);
        for _ in 0..20 {
            let b = 2 + rng.below(8);
            let k = random_normalized_psd(&mut rng, b, 3);
            let evals = symmetric_eigenvalues(&k).unwrap();
            let total: f64 = evals.iter().sum();
            assert!((total - 1.0).abs() < 1e-8);
            assert!(evals.iter().all(|&l| l >= -1e-8));
        }
    }
}
