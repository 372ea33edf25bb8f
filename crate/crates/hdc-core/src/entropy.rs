//! Renyi entropies and matrix mutual information.
//!
//! Two routes exist on purpose: an eigendecomposition path (analysis and
//! oracle use, not differentiable) and a closed-form alpha=2 path built
//! from traces that the training losses differentiate through. Entropies
//! are in bits throughout.

use crate::error::{HdcError, Result};
use crate::linalg;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Entropy order. `alpha == 1` selects the Shannon limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyOrder(f64);

impl EntropyOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(HdcError::contract(format!("entropy order must be > 0, got {alpha}")));
        }
        Ok(EntropyOrder(alpha))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }

    pub fn is_shannon(self) -> bool {
        self.0 == 1.0
    }
}

const PROB_TOL: f64 = 1e-6;
const EIG_CLAMP: f64 = 1e-12;
const NORMALIZED_TRACE_TOL: f64 = 1e-6;

/// Renyi entropy of a discrete distribution, in bits.
pub fn renyi_entropy_discrete(p: &[f64], order: EntropyOrder) -> Result<f64> {
    if let Some(&bad) = p.iter().find(|&&v| v < 0.0) {
        return Err(HdcError::contract(format!("negative probability {bad}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(HdcError::contract(format!("probabilities sum to {total}, not 1")));
    }
    Ok(entropy_of_weights(p, order))
}

/// Shared core over a nonnegative weight vector (assumed ~ sum 1).
fn entropy_of_weights(p: &[f64], order: EntropyOrder) -> f64 {
    if order.is_shannon() {
        -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>()
    } else {
        let a = order.alpha();
        let s: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v.powf(a)).sum();
        s.log2() / (1.0 - a)
    }
}

fn check_normalized(k: &Tensor<f64>) -> Result<usize> {
    let s = k.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(HdcError::contract(format!("expected square matrix, got {s:?}")));
    }
    let n = s[0];
    let tr: f64 = (0..n).map(|i| k.data()[i * n + i]).sum();
    if (tr - 1.0).abs() > NORMALIZED_TRACE_TOL {
        return Err(HdcError::contract(format!("matrix must be trace-normalized, trace = {tr}")));
    }
    Ok(n)
}

/// Matrix-based Renyi entropy of a trace-1 PSD matrix via its eigenvalue
/// distribution (bits). Eigenvalues below 1e-12 are clamped to zero before
/// powers and logs. Analysis/oracle path; not differentiable.
pub fn matrix_renyi_entropy(k: &Tensor<f64>, order: EntropyOrder) -> Result<f64> {
    check_normalized(k)?;
    let evals = linalg::symmetric_eigenvalues(k)?;
    let clamped: Vec<f64> = evals.iter().map(|&l| if l < EIG_CLAMP { 0.0 } else { l }).collect();
    Ok(entropy_of_weights(&clamped, order))
}

/// Closed-form alpha=2 entropy: `-log2(trace(K*K))`, which equals
/// `-log2(sum of squared entries)` for symmetric K. Plain (non-tape)
/// version.
pub fn matrix_renyi_entropy_alpha2(k: &Tensor<f64>) -> Result<f64> {
    check_normalized(k)?;
    let fro2: f64 = k.data().iter().map(|&v| v * v).sum();
    if fro2 <= 0.0 {
        return Err(HdcError::numeric(format!("trace(K^2) = {fro2} <= 0: corrupt input")));
    }
    Ok(-fro2.log2())
}

/// Differentiable alpha=2 entropy of a trace-normalized Gram built on the
/// tape: `-log2(sum(K .* K))`.
pub fn renyi_alpha2_on_tape<T: Real>(tape: &mut Tape<T>, k: Var) -> Result<Var> {
    let sq = tape.square(k)?;
    let s = tape.sum(sq)?;
    if tape.value(s).item()?.to_f64() <= 0.0 {
        return Err(HdcError::numeric("trace(K^2) <= 0 on tape: corrupt input"));
    }
    let l = tape.log2(s)?;
    tape.mul_scalar(l, -T::ONE)
}

/// Matrix mutual information `H(K1) + H(K2) - H(K1 o K2)` with the
/// Hadamard product trace-normalized. Analysis/oracle path.
pub fn matrix_mutual_information(
    k1: &Tensor<f64>,
    k2: &Tensor<f64>,
    order: EntropyOrder,
) -> Result<f64> {
    if k1.shape() != k2.shape() {
        return Err(HdcError::contract(format!(
            "mutual information: order mismatch {:?} vs {:?}",
            k1.shape(),
            k2.shape()
        )));
    }
    let h1 = matrix_renyi_entropy(k1, order)?;
    let h2 = matrix_renyi_entropy(k2, order)?;
    let k12 = linalg::hadamard_normalized(k1, k2)?;
    let h12 = matrix_renyi_entropy(&k12, order)?;
    Ok(h1 + h2 - h12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_normalized_psd;
    use crate::rng::SeededRng;

    fn order(a: f64) -> EntropyOrder {
        EntropyOrder::new(a).unwrap()
    }

    #[test]
    fn discrete_uniform_is_log2_n() {
        for n in [2usize, 4, 7] {
            let p = vec![1.0 / n as f64; n];
            for a in [0.5, 1.0, 2.0, 4.0] {
                let h = renyi_entropy_discrete(&p, order(a)).unwrap();
                assert!((h - (n as f64).log2()).abs() < 1e-10, "n={n} a={a} h={h}");
            }
        }
    }

    #[test]
    fn discrete_deterministic_is_zero() {
        let p = [1.0, 0.0, 0.0];
        for a in [0.5, 1.0, 2.0] {
            assert!(renyi_entropy_discrete(&p, order(a)).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_half_half_alpha2_is_one() {
        let h = renyi_entropy_discrete(&[0.5, 0.5], order(2.0)).unwrap();
        assert!((h - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discrete_contract_errors() {
        assert!(renyi_entropy_discrete(&[-0.1, 1.1], order(2.0)).is_err());
        assert!(renyi_entropy_discrete(&[0.4, 0.4], order(2.0)).is_err());
    }

    #[test]
    fn discrete_monotone_nonincreasing_in_alpha() {
        let mut rng = SeededRng::new(15);
        for _ in 0..20 {
            let n = 2 + rng.below(6);
            let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let hs: Vec<f64> =
                [0.5, 1.0, 2.0, 4.0].iter().map(|&a| renyi_entropy_discrete(&p, order(a)).unwrap()).collect();
            for w in hs.windows(2) {
                assert!(w[0] >= w[1] - 1e-10, "entropy must not increase with alpha: {hs:?}");
            }
        }
    }

    #[test]
    fn matrix_entropy_uniform_eigenvalues() {
        for n in [2usize, 4, 8] {
            let mut k = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                k.data_mut()[i * n + i] = 1.0 / n as f64;
            }
            for a in [0.5, 1.0, 2.0] {
                let h = matrix_renyi_entropy(&k, order(a)).unwrap();
                assert!((h - (n as f64).log2()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matrix_entropy_rank_one_is_zero() {
        let n = 4;
        let k = Tensor::full(vec![n, n], 1.0 / n as f64);
        for a in [0.5, 2.0] {
            assert!(matrix_renyi_entropy(&k, order(a)).unwrap().abs() < 1e-9);
        }
        assert!(matrix_renyi_entropy_alpha2(&k).unwrap().abs() < 1e-9);
    }

    #[test]
    fn matrix_entropy_diag_example() {
        // diag(0.75, 0.25), alpha 2 -> -log2(0.5625 + 0.0625)
        let k = Tensor::new(vec![2, 2], vec![0.75, 0.0, 0.0, 0.25]).unwrap();
        let h = matrix_renyi_entropy(&k, order(2.0)).unwrap();
        let want = -(0.5625f64 + 0.0625).log2();
        assert!((h - want).abs() < 1e-12);
        assert!((h - 0.678).abs() < 1e-3);
        assert!((matrix_renyi_entropy_alpha2(&k).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn alpha2_closed_form_matches_eigen_path() {
        let mut rng = SeededRng::new(77);
        for _ in 0..100 {
            let b = 2 + rng.below(7);
            let k = random_normalized_psd(&mut rng, b, 3);
            let via_trace = matrix_renyi_entropy_alpha2(&k).unwrap();
            let via_eigs = matrix_renyi_entropy(&k, order(2.0)).unwrap();
            assert!((via_trace - via_eigs).abs() < 1e-8, "{via_trace} vs {via_eigs}");
        }
    }

    #[test]
    fn alpha2_on_tape_matches_plain() {
        let mut rng = SeededRng::new(78);
        let k = random_normalized_psd(&mut rng, 6, 3);
        let mut tape = Tape::<f64>::new();
        let kv = tape.leaf(k.clone(), false);
        let h = renyi_alpha2_on_tape(&mut tape, kv).unwrap();
        let want = matrix_renyi_entropy_alpha2(&k).unwrap();
        assert!((tape.value(h).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn entropy_requires_normalization() {
        let k = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(matrix_renyi_entropy(&k, order(2.0)), Err(HdcError::Contract(_))));
    }

    #[test]
    fn entropy_bounds_hold() {
        let mut rng = SeededRng::new(79);
        for _ in 0..50 {
            let b = 2 + rng.below(15);
            let k = random_normalized_psd(&mut rng, b, 4);
            for a in [0.5, 1.0, 2.0, 4.0] {
                let h = matrix_renyi_entropy(&k, order(a)).unwrap();
                assert!(h >= -1e-8, "h={h}");
                assert!(h <= (b as f64).log2() + 1e-8, "h={h} b={b}");
            }
        }
    }

    #[test]
    fn shannon_limit_continuity() {
        let mut rng = SeededRng::new(80);
        let k = random_normalized_psd(&mut rng, 6, 3);
        let h1 = matrix_renyi_entropy(&k, order(1.0)).unwrap();
        let h1plus = matrix_renyi_entropy(&k, order(1.0001)).unwrap();
        assert!((h1 - h1plus).abs() < 1e-3, "{h1} vs {h1plus}");
    }

    #[test]
    fn entropy_invariant_under_permutation() {
        let mut rng = SeededRng::new(81);
        let b = 5;
        let k = random_normalized_psd(&mut rng, b, 3);
        let h = matrix_renyi_entropy(&k, order(2.0)).unwrap();
        let mut perm: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut perm);
        let mut pk = Tensor::zeros(vec![b, b]);
        for i in 0..b {
            for j in 0..b {
                pk.data_mut()[i * b + j] = k.data()[perm[i] * b + perm[j]];
            }
        }
        let hp = matrix_renyi_entropy(&pk, order(2.0)).unwrap();
        assert!((h - hp).abs() < 1e-10);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn discrete_entropy_bounded_and_monotone(
                raw in proptest::collection::vec(1e-3f64..1.0, 2..8)
            ) {
                let z: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
                let n = p.len() as f64;
                let mut prev = f64::INFINITY;
                for a in [0.5, 1.0, 2.0, 4.0] {
                    let h = renyi_entropy_discrete(&p, order(a)).unwrap();
                    prop_assert!(h >= -1e-10 && h <= n.log2() + 1e-10);
                    prop_assert!(h <= prev + 1e-10, "entropy increased with alpha");
                    prev = h;
                }
            }
        }
    }

    #[test]
    fn mutual_information_trivial_cases() {
        // b = 1: all entropies zero.
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mi = matrix_mutual_information(&one, &one, order(2.0)).unwrap();
        assert!(mi.abs() < 1e-12);

        // K1 constant (rank-1): MI = 0 + H(K2) - H(K2) = 0.
        let mut rng = SeededRng::new(82);
        let b = 5;
        let k1 = Tensor::full(vec![b, b], 1.0 / b as f64);
        let k2 = random_normalized_psd(&mut rng, b, 3);
        let mi = matrix_mutual_information(&k1, &k2, order(2.0)).unwrap();
        assert!(mi.abs() < 1e-9, "mi = {mi}");
    }

    #[test]
    fn mutual_information_matches_independent_recomputation() {
        let mut rng = SeededRng::new(83);
        let b = 5;
        let k1 = random_normalized_psd(&mut rng, b, 3);
        let k2 = random_normalized_psd(&mut rng, b, 4);
        let mi = matrix_mutual_information(&k1, &k2, order(2.0)).unwrap();

        // Recompute each entropy straight from eigenvalue lists.
        let h = |k: &Tensor<f64>| -> f64 {
            let evals = crate::linalg::symmetric_eigenvalues(k).unwrap();
            -evals.iter().map(|l| l.max(0.0) * l.max(0.0)).sum::<f64>().log2()
        };
        let k12 = crate::linalg::hadamard_normalized(&k1, &k2).unwrap();
        let want = h(&k1) + h(&k2) - h(&k12);
        assert!((mi - want).abs() < 1e-9);
    }
}
