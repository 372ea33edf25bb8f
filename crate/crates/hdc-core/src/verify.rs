//! Property suites behind the `verify` command: full-model gradient
//! checks, entropy oracles, metric oracles, EMA fixtures, and the
//! stop-gradient partition. Everything runs in double precision.

use crate::config::Settings;
use crate::entropy::{matrix_renyi_entropy, matrix_renyi_entropy_alpha2, EntropyOrder};
use crate::error::Result;
use crate::gradcheck::max_rel_error_vs_fd;
use crate::linalg::{
    hadamard_normalized, min_eigenvalue, random_normalized_psd, reconstruction_error,
    symmetric_eigen, Bandwidth, KernelSpec,
};
use crate::losses;
use crate::metrics::{asd, dice, hausdorff, BinaryMask};
use crate::model::{forward_student_with, forward_teacher, leaf_student_params, ModelState, NetworkConfig};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult { name, passed, detail }
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 20;

/// Which objective a full-model gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Supervised,
    Correlation,
    MutualInformation,
    PixelConsistency,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Supervised,
        LossKind::Correlation,
        LossKind::MutualInformation,
        LossKind::PixelConsistency,
        LossKind::Total,
    ];
}

fn get_flat(state: &ModelState<f64>) -> Vec<f64> {
    state.student_named().iter().flat_map(|(_, _, t)| t.data().iter().copied()).collect()
}

fn set_flat(state: &mut ModelState<f64>, flat: &[f64]) {
    let mut pos = 0;
    for t in state.student_tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[pos..pos + n]);
        pos += n;
    }
    debug_assert_eq!(pos, flat.len());
}

/// Frozen inputs for one gradient-check scenario: fixed batches, fixed
/// teacher outputs, and a fixed noise stream, so the loss is a pure
/// function of the parameters.
struct Scenario {
    config: NetworkConfig,
    state: ModelState<f64>,
    x_lab: Tensor<f64>,
    targets: Vec<u32>,
    x_strong: Tensor<f64>,
    yhat: Tensor<f64>,
    zt: Tensor<f64>,
    kernel: KernelSpec,
    /// Main-decoder features at the base parameters. The MI loss
    /// gradient-stops this branch, so its finite-difference oracle must
    /// hold it fixed; otherwise the oracle would differentiate a path the
    /// loss deliberately cuts.
    f1_base: Tensor<f64>,
    noise_lab: SeededRng,
    noise_strong: SeededRng,
    weights: losses::LossWeights,
}

impl Scenario {
    fn build(seed: u64) -> Result<Scenario> {
        let config = NetworkConfig { in_channels: 3, classes: 2, width: 4 };
        let state: ModelState<f64> = ModelState::<f32>::init(config, seed)?.cast();
        let mut rng = SeededRng::derive(seed, 0xF00D);
        let (b, h, w) = (4usize, 16usize, 16usize);
        let rand_batch = |rng: &mut SeededRng| -> Tensor<f64> {
            Tensor::new(vec![b, 3, h, w], (0..b * 3 * h * w).map(|_| rng.uniform()).collect()).expect("shape")
        };
        let x_lab = rand_batch(&mut rng);
        let targets: Vec<u32> = (0..b * h * w).map(|_| rng.below(config.classes) as u32).collect();
        let x_weak = rand_batch(&mut rng);
        let x_strong = rand_batch(&mut rng);
        let teacher = forward_teacher(&state, &x_weak)?;

        // Each phase gets its own frozen noise stream so every loss sees
        // the same draws whether it is evaluated alone or inside the total.
        let noise_lab = SeededRng::derive(seed, 0xA0A0);
        let noise_strong = SeededRng::derive(seed, 0xB0B0);

        // Resolve the RBF bandwidth once, from the base-point decoder
        // features; the median rule is a constant by design, so the
        // finite-difference oracle must hold it constant too.
        let mut tape = Tape::new();
        let vars = leaf_student_params(&mut tape, &state);
        let outs =
            forward_student_with(&mut tape, &config, &vars, &x_strong, 0.3, &mut noise_strong.clone())?;
        let spec = KernelSpec::rbf_median();
        let sigma1 = match spec.resolve(tape.value(outs.f1))? {
            crate::linalg::ResolvedKernel::Rbf { sigma } => sigma,
            _ => unreachable!(),
        };
        let sigma2 = match spec.resolve(tape.value(outs.f2))? {
            crate::linalg::ResolvedKernel::Rbf { sigma } => sigma,
            _ => unreachable!(),
        };
        let kernel = KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(0.5 * (sigma1 + sigma2)) };
        let f1_base = tape.value(outs.f1).clone();

        Ok(Scenario {
            config,
            state,
            x_lab,
            targets,
            x_strong,
            yhat: teacher.yhat,
            zt: teacher.zt,
            kernel,
            f1_base,
            noise_lab,
            noise_strong,
            weights: losses::LossWeights { kernel: KernelSpec::rbf_median(), ..Default::default() },
        })
    }

    /// Loss value and (optionally) the analytic parameter gradient.
    fn eval(&self, flat: &[f64], kind: LossKind, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let mut state = self.state.clone();
        set_flat(&mut state, flat);
        let mut tape = Tape::new();
        let vars = leaf_student_params(&mut tape, &state);

        let sup = if matches!(kind, LossKind::Supervised | LossKind::Total) {
            let mut noise = self.noise_lab.clone();
            let outs = forward_student_with(&mut tape, &self.config, &vars, &self.x_lab, 0.3, &mut noise)?;
            Some(losses::supervised_loss(&mut tape, outs.p1, outs.p2, &self.targets)?)
        } else {
            None
        };

        let (cg, mi, pix) = if kind != LossKind::Supervised {
            let mut noise = self.noise_strong.clone();
            let outs =
                forward_student_with(&mut tape, &self.config, &vars, &self.x_strong, 0.3, &mut noise)?;
            let cg = if matches!(kind, LossKind::Correlation | LossKind::Total) {
                let zs = tape.standardize_columns(outs.zs, crate::trainer::STANDARDIZE_EPS)?;
                let ztl = tape.leaf(self.zt.clone(), false);
                let zt = tape.standardize_columns(ztl, crate::trainer::STANDARDIZE_EPS)?;
                let c = losses::correlation_matrix(&mut tape, zs, zt)?;
                Some(losses::cg_loss(&mut tape, c, self.weights.cg_alpha, self.weights.cg_eps)?)
            } else {
                None
            };
            let mi = if matches!(kind, LossKind::MutualInformation | LossKind::Total) {
                let f1 = tape.leaf(self.f1_base.clone(), false);
                Some(losses::mi_loss(&mut tape, f1, outs.f2, &self.kernel)?)
            } else {
                None
            };
            let pix = if matches!(kind, LossKind::PixelConsistency | LossKind::Total) {
                let p1 = tape.softmax_channels(outs.p1)?;
                let p2 = tape.softmax_channels(outs.p2)?;
                let yv = tape.leaf(self.yhat.clone(), false);
                Some(losses::pixel_consistency_loss(&mut tape, p1, p2, yv)?)
            } else {
                None
            };
            (cg, mi, pix)
        } else {
            (None, None, None)
        };

        let loss = match kind {
            LossKind::Supervised => sup.expect("built"),
            LossKind::Correlation => cg.expect("built"),
            LossKind::MutualInformation => mi.expect("built"),
            LossKind::PixelConsistency => pix.expect("built"),
            LossKind::Total => {
                let terms = losses::LossTerms { sup: sup.expect("built"), cg, mi, pix };
                losses::total_loss(&mut tape, &terms, &self.weights)?
            }
        };
        let value = tape.value(loss).item()?;
        if !want_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let mut flat_grad = Vec::with_capacity(flat.len());
        for (v, (_, _, t)) in vars.flat().iter().zip(state.student_named()) {
            flat_grad.extend(grads.get_or_zeros(*v, t.shape()).into_data());
        }
        Ok((value, Some(flat_grad)))
    }
}

/// Full-model central-difference check of one loss for one seed over a
/// deterministic sample of parameter coordinates. Returns the max
/// relative error.
pub fn gradcheck_one(seed: u64, kind: LossKind, coords_per_seed: usize) -> Result<f64> {
    let scenario = Scenario::build(seed)?;
    let flat = get_flat(&scenario.state);
    let (_, grad) = scenario.eval(&flat, kind, true)?;
    let grad = grad.expect("requested");

    let mut pick = SeededRng::derive(seed, 0xC0DE);
    let coords: Vec<usize> = (0..coords_per_seed).map(|_| pick.below(flat.len())).collect();
    let mut f = |x: &[f64]| scenario.eval(x, kind, false).expect("forward eval").0;
    Ok(max_rel_error_vs_fd(&grad, &mut f, &flat, FD_STEP, &coords))
}

fn check_gradients() -> Vec<CheckResult> {
    let seeds: Vec<u64> = (0..GRADCHECK_SEEDS).collect();
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let errs = crate::linalg::sweep_seeds(&seeds, |s| gradcheck_one(s, kind, 24));
            let mut worst = 0.0f64;
            let mut failed = None;
            for (i, e) in errs.into_iter().enumerate() {
                match e {
                    Ok(v) => worst = worst.max(v),
                    Err(e) => {
                        failed = Some(format!("seed {i}: {e}"));
                        break;
                    }
                }
            }
            match failed {
                Some(msg) => CheckResult::new(gradcheck_name(kind), false, msg),
                None => CheckResult::new(
                    gradcheck_name(kind),
                    worst < FD_TOL,
                    format!("max rel err {worst:.3e} over {GRADCHECK_SEEDS} seeds (tol {FD_TOL:.0e})"),
                ),
            }
        })
        .collect()
}

fn gradcheck_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Supervised => "gradient-supervised",
        LossKind::Correlation => "gradient-correlation-guidance",
        LossKind::MutualInformation => "gradient-mutual-information",
        LossKind::PixelConsistency => "gradient-pixel-consistency",
        LossKind::Total => "gradient-total",
    }
}

fn check_entropy() -> Vec<CheckResult> {
    let order2 = EntropyOrder::new(2.0).expect("valid");
    let mut worst_gap = 0.0f64;
    let mut worst_bound = 0.0f64;
    let mut worst_eig = 0.0f64;
    let mut rng = SeededRng::new(0xE47);
    for i in 0..100 {
        let b = 2 + (i % 15);
        let k = random_normalized_psd(&mut rng, b, 3);
        let closed = matrix_renyi_entropy_alpha2(&k).expect("entropy");
        let eig = matrix_renyi_entropy(&k, order2).expect("entropy");
        worst_gap = worst_gap.max((closed - eig).abs());
        worst_bound = worst_bound.max((-closed).max(closed - (b as f64).log2()));
        let k2 = random_normalized_psd(&mut rng, b, 4);
        let had = hadamard_normalized(&k, &k2).expect("hadamard");
        worst_eig = worst_eig.min_eig_update(min_eigenvalue(&had).expect("eig"));
    }
    vec![
        CheckResult::new(
            "entropy-alpha2-closed-form",
            worst_gap < 1e-8,
            format!("max |closed-form - eigen| = {worst_gap:.3e} over 100 matrices (tol 1e-8)"),
        ),
        CheckResult::new(
            "entropy-bounds",
            worst_bound <= 1e-8,
            format!("max bound violation {worst_bound:.3e} (tol 1e-8)"),
        ),
        CheckResult::new(
            "hadamard-psd",
            worst_eig >= -1e-8,
            format!("min eigenvalue of normalized Hadamard products {worst_eig:.3e} (floor -1e-8)"),
        ),
    ]
}

trait MinEig {
    fn min_eig_update(self, v: f64) -> f64;
}

impl MinEig for f64 {
    fn min_eig_update(self, v: f64) -> f64 {
        self.min(v)
    }
}

fn check_eigen() -> CheckResult {
    let mut rng = SeededRng::new(0x1AC0B1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 2 + rng.below(15);
        let mut m = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in i..n {
                let v = rng.normal();
                m.data_mut()[i * n + j] = v;
                m.data_mut()[j * n + i] = v;
            }
        }
        match symmetric_eigen(&m) {
            Ok((evals, vecs)) => worst = worst.max(reconstruction_error(&m, &evals, &vecs)),
            Err(e) => return CheckResult::new("eigen-reconstruction", false, e.to_string()),
        }
    }
    CheckResult::new(
        "eigen-reconstruction",
        worst < 1e-8,
        format!("max |M - V diag(l) V^T| = {worst:.3e} over 50 matrices (tol 1e-8)"),
    )
}

fn check_metrics() -> CheckResult {
    let mask_from = |h: usize, w: usize, pts: &[(usize, usize)]| {
        let mut fg = vec![false; h * w];
        for &(y, x) in pts {
            fg[y * w + x] = true;
        }
        BinaryMask::new(h, w, fg)
    };
    // pinned fixtures
    let a = mask_from(8, 8, &[(0, 0)]);
    let b = mask_from(8, 8, &[(3, 4)]);
    if hausdorff(&a, &b, 100.0).expect("hd").value != 5.0 {
        return CheckResult::new("metric-oracles", false, "3-4-5 pixel pair != 5.0".into());
    }
    let l1 = mask_from(8, 8, &[(1, 2), (2, 2), (3, 2), (4, 2)]);
    let l2 = mask_from(8, 8, &[(1, 5), (2, 5), (3, 5), (4, 5)]);
    if asd(&l1, &l2).expect("asd").value != 3.0 {
        return CheckResult::new("metric-oracles", false, "parallel lines ASD != 3.0".into());
    }

    // randomized symmetry + ordering
    let mut rng = SeededRng::new(0x3E7);
    let blob = |rng: &mut SeededRng| {
        let (h, w) = (16usize, 16usize);
        let cy = rng.uniform_in(2.0, 14.0);
        let cx = rng.uniform_in(2.0, 14.0);
        let r = rng.uniform_in(1.0, 6.0);
        let mut fg = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                fg[y * w + x] = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= r;
            }
        }
        BinaryMask::new(h, w, fg)
    };
    for i in 0..1000 {
        let a = blob(&mut rng);
        let b = blob(&mut rng);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let d1 = dice(&a, &b).expect("dice");
        let d2 = dice(&b, &a).expect("dice");
        let hd = hausdorff(&a, &b, 100.0).expect("hd").value;
        let hd_r = hausdorff(&b, &a, 100.0).expect("hd").value;
        let hd95 = hausdorff(&a, &b, 95.0).expect("hd95").value;
        let s = asd(&a, &b).expect("asd").value;
        let s_r = asd(&b, &a).expect("asd").value;
        if d1 != d2 || (hd - hd_r).abs() > 1e-12 || (s - s_r).abs() > 1e-12 {
            return CheckResult::new("metric-oracles", false, format!("symmetry broken at pair {i}"));
        }
        if hd95 > hd + 1e-12 || s > hd + 1e-12 {
            return CheckResult::new("metric-oracles", false, format!("ordering broken at pair {i}"));
        }
    }
    CheckResult::new("metric-oracles", true, "fixtures exact; symmetry and HD95 <= HD on 1000 random pairs".into())
}

fn check_ema() -> CheckResult {
    let cfg = NetworkConfig { in_channels: 3, classes: 2, width: 4 };
    for decay in [0.0f32, 0.5, 0.9, 1.0] {
        let mut m = ModelState::<f32>::init(cfg, 5).expect("init");
        for v in m.encoder.stem.weight.data_mut() {
            *v += 0.25;
        }
        let teacher0 = m.t_encoder.stem.weight.clone();
        let student = m.encoder.stem.weight.clone();
        m.ema_update(f64::from(decay)).expect("ema");
        for ((t, &t0), &s) in
            m.t_encoder.stem.weight.data().iter().zip(teacher0.data()).zip(student.data())
        {
            let want = decay * t0 + (1.0 - decay) * s;
            if *t != want {
                return CheckResult::new(
                    "ema-exact",
                    false,
                    format!("decay {decay}: teacher {t} != {want} (beyond 1 ulp)"),
                );
            }
        }
    }
    CheckResult::new("ema-exact", true, "hand-computed fixtures match for decay in {0, 0.5, 0.9, 1}".into())
}

fn check_stopgrad_partition() -> CheckResult {
    let cfg = NetworkConfig { in_channels: 3, classes: 2, width: 4 };
    let state: ModelState<f64> = ModelState::<f32>::init(cfg, 21).expect("init").cast();
    let mut rng = SeededRng::new(22);
    let x = Tensor::new(vec![4, 3, 16, 16], (0..4 * 3 * 16 * 16).map(|_| rng.uniform()).collect())
        .expect("shape");
    let mut tape = Tape::new();
    let vars = leaf_student_params(&mut tape, &state);
    let outs = forward_student_with(&mut tape, &cfg, &vars, &x, 0.3, &mut rng).expect("forward");
    let loss = losses::mi_loss(&mut tape, outs.f1, outs.f2, &KernelSpec::rbf_median()).expect("loss");
    let grads = tape.backward(loss).expect("backward");

    for cv in &vars.dec_main {
        for v in [cv.weight, cv.bias] {
            if let Some(g) = grads.get(v) {
                if g.data().iter().any(|&x| x != 0.0) {
                    return CheckResult::new(
                        "stop-gradient-partition",
                        false,
                        "main decoder received MI-loss gradient".into(),
                    );
                }
            }
        }
    }
    let noisy_hit = vars
        .dec_noisy
        .iter()
        .any(|cv| grads.get(cv.weight).map(|g| g.data().iter().any(|&v| v != 0.0)).unwrap_or(false));
    let enc_hit = vars
        .encoder
        .iter()
        .any(|cv| grads.get(cv.weight).map(|g| g.data().iter().any(|&v| v != 0.0)).unwrap_or(false));
    if !noisy_hit || !enc_hit {
        return CheckResult::new(
            "stop-gradient-partition",
            false,
            format!("expected nonzero gradients (noisy: {noisy_hit}, encoder: {enc_hit})"),
        );
    }
    CheckResult::new(
        "stop-gradient-partition",
        true,
        "MI loss: main decoder gradient exactly zero; noisy decoder and encoder nonzero; teacher off-tape".into(),
    )
}

fn check_loss_limits() -> CheckResult {
    // correlation floor
    let mut tape = Tape::<f64>::new();
    let mut eye = Tensor::zeros(vec![6, 6]);
    for i in 0..6 {
        eye.data_mut()[i * 6 + i] = 1.0;
    }
    let c = tape.leaf(eye, false);
    let l = losses::cg_loss(&mut tape, c, 2, 1e-8).expect("cg");
    let got = tape.value(l).item().expect("scalar");
    if (got - 1e-8f64.log2()).abs() > 1e-9 {
        return CheckResult::new("loss-term-limits", false, format!("cg floor {got} != log2(1e-8)"));
    }

    // MI loss vanishes exactly when the main Gram is constant (rank-1):
    // identical F1 rows, RBF kernel, b = 8
    let mut rng = SeededRng::new(77);
    let f1 = Tensor::new(vec![8, 3], [0.4, -0.2, 0.9].repeat(8)).expect("shape");
    let f2 = Tensor::new(vec![8, 3], (0..24).map(|_| rng.normal()).collect()).expect("shape");
    let mut tape = Tape::<f64>::new();
    let v1 = tape.leaf(f1, false);
    let v2 = tape.leaf(f2, false);
    let l = losses::mi_loss(&mut tape, v1, v2, &KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(1.0) })
        .expect("mi");
    let got = tape.value(l).item().expect("scalar");
    if got != 0.0 {
        return CheckResult::new("loss-term-limits", false, format!("rank-1 MI loss {got} != 0"));
    }

    // pixel loss at exact agreement
    let mut tape = Tape::<f64>::new();
    let logits = Tensor::new(vec![1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).expect("shape");
    let lv = tape.leaf(logits, false);
    let p = tape.softmax_channels(lv).expect("softmax");
    let l = losses::pixel_consistency_loss(&mut tape, p, p, p).expect("pix");
    if tape.value(l).item().expect("scalar") != 0.0 {
        return CheckResult::new("loss-term-limits", false, "pixel loss nonzero at agreement".into());
    }
    CheckResult::new(
        "loss-term-limits",
        true,
        "cg floor = log2(eps); rank-1 MI loss exactly 0; pixel loss exactly 0 at agreement".into(),
    )
}

/// Run every suite; each result carries a pass flag and a one-line detail.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.extend(check_gradients());
    out.extend(check_entropy());
    out.push(check_eigen());
    out.push(check_metrics());
    out.push(check_ema());
    out.push(check_stopgrad_partition());
    out.push(check_loss_limits());
    out
}

/// Render a pass/fail table (one line per property).
pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{:<w$}  {}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail,
            w = width
        ));
    }
    out
}

/// Default settings snapshot, exposed so the CLI can print the documented
/// defaults next to verification output.
pub fn default_settings() -> Settings {
    Settings::default()
}
