//! Training loop: supervised phase on weak views, unsupervised phase with
//! teacher pseudo-labels on weak views guiding the student on strong
//! views, optimizer step with cosine-annealed learning rate, then an EMA
//! teacher update from the post-step encoder + main decoder.
//!
//! Everything runs single-threaded over one RNG stream, so fixed seeds
//! give bitwise-identical logs, and a checkpoint (parameters, optimizer
//! moments, RNG position, iteration) resumes a run exactly.

use crate::augment::{strong_augment_capped, weak_augment, Image, Mask};
use crate::config::{OptimKind, Settings};
use crate::error::{HdcError, Result};
use crate::losses::{
    cg_loss, correlation_matrix, mi_loss, pixel_consistency_loss, supervised_loss, total_loss,
    LossTerms,
};
use crate::metrics::{evaluate_model, MetricReport};
use crate::model::{
    forward_student_with, forward_teacher, leaf_student_params, ModelState,
};
use crate::rng::SeededRng;
use crate::synth::{batch_tensor, load_record, mask_targets, DatasetManifest, Split};
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::fs;
use std::path::{Path, PathBuf};

pub const STANDARDIZE_EPS: f64 = 1e-5;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub l_sup: f64,
    pub l_cg: f64,
    pub l_mi: f64,
    pub l_pix: f64,
    pub l_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "iter,l_sup,l_cg,l_mi,l_pix,l_total,lr,grad_norm";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.iter, self.l_sup, self.l_cg, self.l_mi, self.l_pix, self.l_total, self.lr, self.grad_norm
        )
    }
}

pub fn log_to_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(StepRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Cosine-annealed learning rate: `lr * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    let frac = (t as f64 / total.max(1) as f64).min(1.0);
    base * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr_base: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    /// Adam step counter (1-based after the first step).
    pub step_count: u64,
    /// SGD velocity or Adam first moment, per parameter tensor.
    pub m: Vec<Tensor<f32>>,
    /// Adam second moment (empty for SGD).
    pub v: Vec<Tensor<f32>>,
}

impl Optimizer {
    pub fn new(settings: &Settings, param_shapes: &[Vec<usize>]) -> Self {
        let t = &settings.train;
        let zeros: Vec<Tensor<f32>> = param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        Optimizer {
            kind: t.optimizer,
            lr_base: t.lr,
            momentum: t.momentum,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.resolved_weight_decay(),
            total_iters: t.iterations,
            step_count: 0,
            m: zeros.clone(),
            v: if t.optimizer == OptimKind::AdaptiveMoments { zeros } else { Vec::new() },
        }
    }

    /// Apply one update in place. `t` is the 0-based iteration index used
    /// by the cosine schedule.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], t: usize) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(HdcError::contract(format!(
                "optimizer state holds {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = cosine_lr(self.lr_base, t, self.total_iters) as f32;
        let wd = self.weight_decay as f32;
        self.step_count += 1;
        match self.kind {
            OptimKind::SgdMomentum => {
                let mu = self.momentum as f32;
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    let pd = p.data_mut();
                    let vd = vel.data_mut();
                    let gd = g.data();
                    for i in 0..pd.len() {
                        vd[i] = mu * vd[i] + gd[i];
                        pd[i] -= lr * (vd[i] + wd * pd[i]);
                    }
                }
            }
            OptimKind::AdaptiveMoments => {
                let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                let eps = self.eps as f32;
                let bc1 = (1.0 - self.beta1.powi(self.step_count as i32)) as f32;
                let bc2 = (1.0 - self.beta2.powi(self.step_count as i32)) as f32;
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let pd = p.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    let gd = g.data();
                    for i in 0..pd.len() {
                        md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                        vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        pd[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
                    }
                }
            }
        }
        Ok(f64::from(lr))
    }
}

// ── in-memory training data ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: Vec<(Image, Mask)>,
    pub unlabeled: Vec<Image>,
}

pub fn load_train_data(manifest: &DatasetManifest) -> Result<TrainData> {
    let mut labeled = Vec::new();
    for r in manifest.labeled_train() {
        let s = load_record(manifest, r)?;
        labeled.push((s.image, s.mask.expect("labeled record")));
    }
    let mut unlabeled = Vec::new();
    for r in manifest.unlabeled_train() {
        unlabeled.push(load_record(manifest, r)?.image);
    }
    if labeled.is_empty() {
        return Err(HdcError::contract("manifest has no labeled training samples"));
    }
    Ok(TrainData { labeled, unlabeled })
}

/// Distinct indices when the pool allows it, else with replacement.
fn sample_indices(rng: &mut SeededRng, pool: usize, n: usize) -> Vec<usize> {
    if pool >= n {
        let mut idx: Vec<usize> = (0..pool).collect();
        for i in 0..n {
            let j = i + rng.below(pool - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    } else {
        (0..n).map(|_| rng.below(pool)).collect()
    }
}

// ── training session ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Session {
    pub settings: Settings,
    pub state: ModelState<f32>,
    pub optimizer: Optimizer,
    pub rng: SeededRng,
    pub iteration: usize,
}

impl Session {
    pub fn new(settings: Settings) -> Result<Self> {
        settings.train.validate()?;
        settings.model.validate()?;
        settings.loss.validate()?;
        if (settings.loss.cg_active() || settings.loss.mi_active()) && settings.train.batch_unlabeled < 2 {
            return Err(HdcError::contract(
                "correlation/MI losses need train.batch_unlabeled >= 2 (batch statistics)",
            ));
        }
        let state = ModelState::init(settings.model, settings.train.seed)?;
        let shapes: Vec<Vec<usize>> =
            state.student_named().iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        let optimizer = Optimizer::new(&settings, &shapes);
        let rng = SeededRng::new(settings.train.seed);
        Ok(Session { settings, state, optimizer, rng, iteration: 0 })
    }

    fn ema_decay_now(&self) -> f64 {
        let ramp = self.settings.train.ema_ramp_iters;
        let base = self.settings.train.ema_decay;
        if ramp == 0 {
            base
        } else {
            base * (self.iteration as f64 / ramp as f64).min(1.0)
        }
    }

    /// One full training step on sampled batches.
    pub fn step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let w = self.settings.loss.clone();
        let unsup_active = w.unsupervised_active();
        let bl = self.settings.train.batch_labeled;
        let gamma = self.settings.train.fnoise_gamma;

        // supervised phase: weak views of a labeled batch
        let li = sample_indices(&mut self.rng, data.labeled.len(), bl);
        let mut aug_imgs = Vec::with_capacity(bl);
        let mut aug_masks = Vec::with_capacity(bl);
        for &i in &li {
            let (img, mask, _) = weak_augment(&data.labeled[i].0, Some(&data.labeled[i].1), &mut self.rng);
            aug_imgs.push(img);
            aug_masks.push(mask.expect("mask present"));
        }
        let x_lab: Tensor<f32> = batch_tensor(&aug_imgs.iter().collect::<Vec<_>>())?;
        let targets = mask_targets(&aug_masks.iter().collect::<Vec<_>>());

        let mut tape = Tape::new();
        let vars = leaf_student_params(&mut tape, &self.state);
        let outs_l = forward_student_with(&mut tape, &self.state.config, &vars, &x_lab, gamma, &mut self.rng)?;
        let l_sup = supervised_loss(&mut tape, outs_l.p1, outs_l.p2, &targets)?;

        // unsupervised phase: teacher on weak views, student on strong views
        let mut terms = LossTerms { sup: l_sup, cg: None, mi: None, pix: None };
        if unsup_active && !data.unlabeled.is_empty() {
            let bu = self.settings.train.batch_unlabeled;
            let ui = sample_indices(&mut self.rng, data.unlabeled.len(), bu);
            let mut weak_imgs = Vec::with_capacity(bu);
            for &i in &ui {
                let (img, _, _) = weak_augment(&data.unlabeled[i], None, &mut self.rng);
                weak_imgs.push(img);
            }
            let x_weak: Tensor<f32> = batch_tensor(&weak_imgs.iter().collect::<Vec<_>>())?;
            let teacher = forward_teacher(&self.state, &x_weak)?;

            let mut strong_imgs = Vec::with_capacity(bu);
            let cap = self.settings.train.strong_aug_max;
            for img in &weak_imgs {
                let (s, _) = strong_augment_capped(img, cap, &mut self.rng);
                strong_imgs.push(s);
            }
            let x_strong: Tensor<f32> = batch_tensor(&strong_imgs.iter().collect::<Vec<_>>())?;
            let outs_u =
                forward_student_with(&mut tape, &self.state.config, &vars, &x_strong, gamma, &mut self.rng)?;

            if w.enable_pix {
                let p1u = tape.softmax_channels(outs_u.p1)?;
                let p2u = tape.softmax_channels(outs_u.p2)?;
                let yv = tape.leaf(teacher.yhat.clone(), false);
                terms.pix = Some(pixel_consistency_loss(&mut tape, p1u, p2u, yv)?);
            }
            if w.cg_active() {
                let eps = STANDARDIZE_EPS as f32;
                let zs_std = tape.standardize_columns(outs_u.zs, eps)?;
                let ztl = tape.leaf(teacher.zt.clone(), false);
                let zt_std = tape.standardize_columns(ztl, eps)?;
                let c_st = correlation_matrix(&mut tape, zs_std, zt_std)?;
                terms.cg = Some(cg_loss(&mut tape, c_st, w.cg_alpha, w.cg_eps)?);
            }
            if w.mi_active() {
                terms.mi = Some(mi_loss(&mut tape, outs_u.f1, outs_u.f2, &w.kernel)?);
            }
        }

        let total = total_loss(&mut tape, &terms, &w)?;
        let value = |v: Option<crate::tape::Var>| -> f64 {
            v.map(|v| tape.value(v).item().expect("scalar").into()).unwrap_or(0.0)
        };
        let record_losses = (
            f64::from(tape.value(l_sup).item()?),
            value(terms.cg),
            value(terms.mi),
            value(terms.pix),
            f64::from(tape.value(total).item()?),
        );
        if !record_losses.4.is_finite() {
            return Err(HdcError::numeric(format!("non-finite total loss at iteration {}", self.iteration)));
        }

        // backward, optimizer, EMA
        let grads = tape.backward(total)?;
        let flat = vars.flat();
        let named = self.state.student_named();
        let grad_tensors: Vec<Tensor<f32>> = flat
            .iter()
            .zip(&named)
            .map(|(v, (_, _, t))| grads.get_or_zeros(*v, t.shape()))
            .collect();
        drop(named);
        let grad_norm = grad_tensors
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();

        let mut params = self.state.student_tensors_mut();
        let lr = self.optimizer.step(&mut params, &grad_tensors, self.iteration)?;
        let decay = self.ema_decay_now();
        self.state.ema_update(decay)?;

        let record = StepRecord {
            iter: self.iteration,
            l_sup: record_losses.0,
            l_cg: record_losses.1,
            l_mi: record_losses.2,
            l_pix: record_losses.3,
            l_total: record_losses.4,
            lr,
            grad_norm,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Supervised-only step on a fixed, pre-augmented batch (the
    /// overfit-one-batch oracle path).
    pub fn step_fixed_supervised(&mut self, x: &Tensor<f32>, targets: &[u32]) -> Result<StepRecord> {
        let gamma = self.settings.train.fnoise_gamma;
        let mut tape = Tape::new();
        let vars = leaf_student_params(&mut tape, &self.state);
        let outs = forward_student_with(&mut tape, &self.state.config, &vars, x, gamma, &mut self.rng)?;
        let l_sup = supervised_loss(&mut tape, outs.p1, outs.p2, targets)?;
        let l_sup_val = f64::from(tape.value(l_sup).item()?);

        let grads = tape.backward(l_sup)?;
        let flat = vars.flat();
        let shapes: Vec<Vec<usize>> =
            self.state.student_named().iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        let grad_tensors: Vec<Tensor<f32>> =
            flat.iter().zip(&shapes).map(|(v, s)| grads.get_or_zeros(*v, s)).collect();
        let grad_norm = grad_tensors
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        let mut params = self.state.student_tensors_mut();
        let lr = self.optimizer.step(&mut params, &grad_tensors, self.iteration)?;
        let decay = self.ema_decay_now();
        self.state.ema_update(decay)?;

        let record = StepRecord {
            iter: self.iteration,
            l_sup: l_sup_val,
            l_cg: 0.0,
            l_mi: 0.0,
            l_pix: 0.0,
            l_total: l_sup_val,
            lr,
            grad_norm,
        };
        self.iteration += 1;
        Ok(record)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<Session> {
        load_checkpoint(path)
    }
}

// ── experiment driver ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub final_val: MetricReport,
    pub final_test: MetricReport,
    pub log: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// Full training run with periodic validation, final test evaluation, and
/// all artifacts (effective config, logs, metrics, checkpoint) written to
/// `out_dir`.
pub fn run_experiment(
    settings: &Settings,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<ExperimentOutput> {
    fs::create_dir_all(out_dir).map_err(|e| HdcError::io(out_dir, e))?;
    fs::write(out_dir.join("effective-config"), settings.to_effective_text())
        .map_err(|e| HdcError::io(out_dir.join("effective-config"), e))?;

    let data = load_train_data(manifest)?;
    let mut session = Session::new(settings.clone())?;
    let mut log: Vec<StepRecord> = Vec::with_capacity(settings.train.iterations);
    let mut eval_rows: Vec<String> = Vec::new();

    for _ in 0..settings.train.iterations {
        match session.step(&data) {
            Ok(rec) => log.push(rec),
            Err(e @ HdcError::Numeric(_)) => {
                let tail = log.iter().rev().take(10).rev().cloned().collect::<Vec<_>>();
                let dump = out_dir.join("abort_dump.csv");
                let _ = fs::write(&dump, log_to_csv(&tail));
                return Err(HdcError::numeric(format!("{e}; last records dumped to {}", dump.display())));
            }
            Err(e) => return Err(e),
        }
        let it = session.iteration;
        if settings.train.eval_every > 0
            && it % settings.train.eval_every == 0
            && it < settings.train.iterations
        {
            let report = evaluate_model(&session.state, manifest, Split::Val)?;
            push_eval_rows(&mut eval_rows, it, &report);
        }
    }

    let final_val = evaluate_model(&session.state, manifest, Split::Val)?;
    push_eval_rows(&mut eval_rows, session.iteration, &final_val);
    let final_test = evaluate_model(&session.state, manifest, Split::Test)?;

    fs::write(out_dir.join("train_log.csv"), log_to_csv(&log))
        .map_err(|e| HdcError::io(out_dir.join("train_log.csv"), e))?;
    let mut eval_csv = format!("iter,{}\n", MetricReport::CSV_HEADER);
    for row in &eval_rows {
        eval_csv.push_str(row);
    }
    fs::write(out_dir.join("eval_log.csv"), eval_csv)
        .map_err(|e| HdcError::io(out_dir.join("eval_log.csv"), e))?;
    fs::write(out_dir.join("metrics_test.csv"), final_test.to_csv())
        .map_err(|e| HdcError::io(out_dir.join("metrics_test.csv"), e))?;
    let checkpoint = out_dir.join("checkpoint.hdc");
    session.save(&checkpoint)?;

    Ok(ExperimentOutput { final_val, final_test, log, checkpoint })
}

fn push_eval_rows(rows: &mut Vec<String>, iter: usize, report: &MetricReport) {
    for line in report.to_csv().lines().skip(1) {
        rows.push(format!("{iter},{line}\n"));
    }
}

// ── checkpointing ───────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"HDC1";
const VERSION: u32 = 1;

fn crc32(bytes: &[u8]) -> u32 {
    // CRC-32 (IEEE 802.3), bitwise reflected implementation.
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct SectionWriter {
    sections: Vec<(String, Vec<u8>)>,
}

impl SectionWriter {
    fn new() -> Self {
        SectionWriter { sections: Vec::new() }
    }

    fn add(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push((name.to_string(), payload));
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        }
        for (_, payload) in &self.sections {
            out.extend_from_slice(payload);
            out.extend_from_slice(&crc32(payload).to_le_bytes());
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HdcError::format(format!(
                "checkpoint truncated at offset {} reading {what} ({n} bytes needed)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }
}

fn encode_tensors(named: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_tensors(payload: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "tensor name")?.to_vec())
            .map_err(|_| HdcError::format("checkpoint tensor name is not utf-8"))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, "tensor payload")?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(session: &Session, path: &Path) -> Result<()> {
    let mut w = SectionWriter::new();

    let mut meta = Vec::new();
    meta.extend_from_slice(&(session.iteration as u64).to_le_bytes());
    meta.extend_from_slice(&session.rng.seed().to_le_bytes());
    meta.extend_from_slice(&session.rng.word_pos().to_le_bytes());
    meta.extend_from_slice(&session.optimizer.step_count.to_le_bytes());
    w.add("meta", meta);

    w.add("config", session.settings.to_effective_text().into_bytes());

    let student: Vec<(String, &Tensor<f32>)> =
        session.state.student_named().into_iter().map(|(n, _, t)| (n, t)).collect();
    w.add("student", encode_tensors(&student));

    let teacher: Vec<(String, &Tensor<f32>)> = session.state.teacher_named();
    w.add("teacher", encode_tensors(&teacher));

    let mut opt: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (i, t) in session.optimizer.m.iter().enumerate() {
        opt.push((format!("m.{i}"), t));
    }
    for (i, t) in session.optimizer.v.iter().enumerate() {
        opt.push((format!("v.{i}"), t));
    }
    w.add("optimizer", encode_tensors(&opt));

    fs::write(path, w.finish()).map_err(|e| HdcError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Session> {
    let bytes = fs::read(path).map_err(|e| HdcError::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(HdcError::format(format!("bad magic {magic:?} at offset 0, expected {MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HdcError::format(format!("unsupported checkpoint version {version} at offset 4")));
    }
    let n_sections = r.u32("section count")? as usize;
    let mut table = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let nlen = r.u32("section name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "section name")?.to_vec())
            .map_err(|_| HdcError::format("section name is not utf-8"))?;
        let plen = r.u64("section length")? as usize;
        table.push((name, plen));
    }
    let mut sections = std::collections::BTreeMap::new();
    for (name, plen) in table {
        let start = r.pos;
        let payload = r.take(plen, &format!("section '{name}'"))?;
        let stored = r.u32("section crc")?;
        let actual = crc32(payload);
        if stored != actual {
            return Err(HdcError::format(format!(
                "checksum mismatch in section '{name}' at offset {start}: stored {stored:#010x}, computed {actual:#010x}"
            )));
        }
        sections.insert(name, payload.to_vec());
    }
    let section = |name: &str| -> Result<&Vec<u8>> {
        sections.get(name).ok_or_else(|| HdcError::format(format!("checkpoint missing section '{name}'")))
    };

    // meta
    let meta = section("meta")?;
    let mut mr = Reader { bytes: meta, pos: 0 };
    let iteration = mr.u64("iteration")? as usize;
    let rng_seed = mr.u64("rng seed")?;
    let word_pos = mr.u128("rng position")?;
    let opt_steps = mr.u64("optimizer steps")?;

    // config -> settings
    let config_text = String::from_utf8(section("config")?.clone())
        .map_err(|_| HdcError::format("config section is not utf-8"))?;
    let settings = Settings::from_text(&config_text)?;

    let mut session = Session::new(settings)?;
    session.iteration = iteration;
    session.optimizer.step_count = opt_steps;
    let mut rng = SeededRng::new(rng_seed);
    rng.set_word_pos(word_pos);
    session.rng = rng;

    let fill = |targets: Vec<(&String, &mut Tensor<f32>)>, stored: Vec<(String, Tensor<f32>)>, what: &str| -> Result<()> {
        if targets.len() != stored.len() {
            return Err(HdcError::format(format!(
                "{what}: checkpoint holds {} tensors, model expects {}",
                stored.len(),
                targets.len()
            )));
        }
        for ((name, dst), (sname, src)) in targets.into_iter().zip(stored) {
            if *name != sname {
                return Err(HdcError::format(format!("{what}: expected tensor '{name}', found '{sname}'")));
            }
            if dst.shape() != src.shape() {
                return Err(HdcError::format(format!(
                    "{what}: tensor '{name}' shape {:?} != stored {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    };

    let student_stored = decode_tensors(section("student")?)?;
    let names: Vec<String> = session.state.student_named().iter().map(|(n, _, _)| n.clone()).collect();
    let muts = session.state.student_tensors_mut();
    fill(names.iter().zip(muts).collect(), student_stored, "student")?;

    let teacher_stored = decode_tensors(section("teacher")?)?;
    let tnames: Vec<String> = session.state.teacher_named().iter().map(|(n, _)| n.clone()).collect();
    let tmuts = session.state.teacher_tensors_mut();
    fill(tnames.iter().zip(tmuts).collect(), teacher_stored, "teacher")?;

    let opt_stored = decode_tensors(section("optimizer")?)?;
    let n_m = session.optimizer.m.len();
    let n_v = session.optimizer.v.len();
    if opt_stored.len() != n_m + n_v {
        return Err(HdcError::format(format!(
            "optimizer: checkpoint holds {} tensors, expected {}",
            opt_stored.len(),
            n_m + n_v
        )));
    }
    for (i, (name, t)) in opt_stored.into_iter().enumerate() {
        let want = if i < n_m { format!("m.{i}") } else { format!("v.{}", i - n_m) };
        if name != want {
            return Err(HdcError::format(format!("optimizer: expected '{want}', found '{name}'")));
        }
        if i < n_m {
            session.optimizer.m[i] = t;
        } else {
            session.optimizer.v[i - n_m] = t;
        }
    }
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Settings;
    use tempfile::tempdir;

    fn tiny_settings(iters: usize) -> Settings {
        let mut s = Settings::default();
        s.train.iterations = iters;
        s.train.batch_labeled = 2;
        s.train.batch_unlabeled = 4;
        s.train.eval_every = 0;
        s.model.width = 4;
        s.finalize().unwrap();
        s
    }

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        crate::synth::generate_dataset(42, 12, 0.5, 32, 32, dir).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.1, 0, 100) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn sgd_single_step_hand_case() {
        let mut s = Settings::default();
        s.apply_overrides(&[
            "train.optimizer=sgd-momentum".into(),
            "train.lr=0.1".into(),
            "train.weight_decay=0".into(),
            "train.iterations=1000000".into(), // keep cosine factor ~1 at t=0
        ])
        .unwrap();
        let mut opt = Optimizer::new(&s, &[vec![1]]);
        let mut p = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        opt.step(&mut [&mut p], &[g], 0).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7, "{}", p.data()[0]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = x^2 / 2, gradient x: |x| < 1e-3 within 500 steps at lr 0.01
        let mut s = Settings::default();
        s.apply_overrides(&[
            "train.lr=0.01".into(),
            "train.weight_decay=0".into(),
            "train.iterations=1000000".into(),
        ])
        .unwrap();
        let mut opt = Optimizer::new(&s, &[vec![1]]);
        let mut p = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        for t in 0..500 {
            let g = Tensor::new(vec![1], vec![p.data()[0]]).unwrap();
            let mut refs = [&mut p];
            opt.step(&mut refs, &[g], t).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-3, "final {}", p.data()[0]);
    }

    #[test]
    fn zero_lr_leaves_parameters_and_teacher_unchanged() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();
        let mut s = tiny_settings(10);
        s.train.lr = 1e-30; // effectively zero
        let mut session = Session::new(s).unwrap();
        let before = session.state.clone();
        session.step(&data).unwrap();
        let named_a = before.student_named();
        let named_b = session.state.student_named();
        for ((_, _, a), (_, _, b)) in named_a.iter().zip(named_b.iter()) {
            assert!(a.max_abs_diff(b) < 1e-25);
        }
    }

    #[test]
    fn supervised_only_gradient_equals_full_config_with_terms_disabled() {
        // term isolation: disabling every unsupervised loss must produce a
        // step identical to a supervised-only run, bitwise
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();

        let mut s1 = tiny_settings(5);
        s1.loss.enable_cg = false;
        s1.loss.enable_mi = false;
        s1.loss.enable_pix = false;
        let mut a = Session::new(s1).unwrap();
        let mut b = a.clone();
        let ra = a.step(&data).unwrap();
        let rb = b.step(&data).unwrap();
        assert_eq!(ra, rb);
        let na = a.state.student_named();
        let nb = b.state.student_named();
        for ((_, _, ta), (_, _, tb)) in na.iter().zip(nb.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn zero_weights_match_supervised_only_bitwise() {
        // beta_cg = beta_mi = 0 with pixel loss disabled must take exactly
        // the supervised-only step
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();

        let mut zeroed = tiny_settings(3);
        zeroed.loss.beta_cg = 0.0;
        zeroed.loss.beta_mi = 0.0;
        zeroed.loss.enable_pix = false;
        let mut sup = tiny_settings(3);
        sup.loss = crate::losses::LossWeights::supervised_only();

        let mut a = Session::new(zeroed).unwrap();
        let mut b = Session::new(sup).unwrap();
        let ra = a.step(&data).unwrap();
        let rb = b.step(&data).unwrap();
        assert_eq!(ra.l_sup, rb.l_sup);
        assert_eq!(ra.l_total, rb.l_total);
        let na = a.state.student_named();
        let nb = b.state.student_named();
        for ((_, _, ta), (_, _, tb)) in na.iter().zip(nb.iter()) {
            assert_eq!(ta.data(), tb.data(), "parameters diverged");
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();
        let run = || {
            let mut session = Session::new(tiny_settings(6)).unwrap();
            let mut log = Vec::new();
            for _ in 0..6 {
                log.push(session.step(&data).unwrap());
            }
            (log_to_csv(&log), session.state)
        };
        let (csv_a, state_a) = run();
        let (csv_b, state_b) = run();
        assert_eq!(csv_a, csv_b);
        assert_eq!(state_a, state_b);
    }

    #[test]
    fn teacher_changes_only_through_ema() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();
        let mut s = tiny_settings(5);
        // decay 1 with no ramp: EMA keeps the teacher exactly frozen, so
        // any drift would have to come from the optimizer touching it
        s.train.ema_decay = 1.0;
        s.train.ema_ramp_iters = 0;
        let mut session = Session::new(s).unwrap();
        let teacher_before: Vec<Tensor<f32>> =
            session.state.teacher_named().iter().map(|(_, t)| (*t).clone()).collect();
        for _ in 0..3 {
            session.step(&data).unwrap();
        }
        for ((_, after), before) in session.state.teacher_named().iter().zip(&teacher_before) {
            assert_eq!(after.data(), before.data());
        }
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();
        let mut session = Session::new(tiny_settings(8)).unwrap();
        for _ in 0..3 {
            session.step(&data).unwrap();
        }
        let path = dir.path().join("ck.hdc");
        session.save(&path).unwrap();
        let loaded = Session::load(&path).unwrap();
        assert_eq!(loaded.iteration, session.iteration);
        assert_eq!(loaded.state, session.state);
        assert_eq!(loaded.optimizer, session.optimizer);
        assert_eq!(loaded.rng.word_pos(), session.rng.word_pos());
        assert_eq!(loaded.settings, {
            let mut s = session.settings.clone();
            s.train.weight_decay = Some(s.train.resolved_weight_decay());
            s
        });
    }

    #[test]
    fn resume_equals_uninterrupted_run() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();

        let mut full = Session::new(tiny_settings(10)).unwrap();
        for _ in 0..10 {
            full.step(&data).unwrap();
        }

        let mut half = Session::new(tiny_settings(10)).unwrap();
        for _ in 0..5 {
            half.step(&data).unwrap();
        }
        let path = dir.path().join("half.hdc");
        half.save(&path).unwrap();
        let mut resumed = Session::load(&path).unwrap();
        for _ in 0..5 {
            resumed.step(&data).unwrap();
        }
        assert_eq!(full.state, resumed.state);
        assert_eq!(full.optimizer, resumed.optimizer);
    }

    #[test]
    fn corrupt_checkpoint_byte_detected() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();
        let mut session = Session::new(tiny_settings(3)).unwrap();
        session.step(&data).unwrap();
        let path = dir.path().join("ck.hdc");
        session.save(&path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        let err = Session::load(&path).unwrap_err();
        assert!(matches!(err, HdcError::Format(_)), "{err}");

        // truncation also reports a format error with an offset
        let whole = fs::read(&path).unwrap();
        fs::write(&path, &whole[..40]).unwrap();
        let err = Session::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("offset"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.hdc");
        fs::write(&path, b"NOPE00000000").unwrap();
        let err = Session::load(&path).unwrap_err();
        assert!(matches!(err, HdcError::Format(_)));
    }

    #[test]
    fn run_experiment_writes_artifacts() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path().join("data").as_path());
        let mut s = tiny_settings(4);
        s.train.eval_every = 2;
        let out = dir.path().join("run");
        let result = run_experiment(&s, &manifest, &out).unwrap();
        assert_eq!(result.log.len(), 4);
        for f in ["effective-config", "train_log.csv", "eval_log.csv", "metrics_test.csv", "checkpoint.hdc"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let log_text = fs::read_to_string(out.join("train_log.csv")).unwrap();
        assert!(log_text.starts_with(StepRecord::CSV_HEADER));
        assert_eq!(log_text.lines().count(), 5);
        assert!(result.final_test.mean.dsc >= 0.0);
    }

    #[test]
    fn grad_norm_stays_bounded_on_short_run() {
        let dir = tempdir().unwrap();
        let manifest = tiny_dataset(dir.path());
        let data = load_train_data(&manifest).unwrap();
        let mut session = Session::new(tiny_settings(10)).unwrap();
        for _ in 0..10 {
            let rec = session.step(&data).unwrap();
            assert!(rec.l_total.is_finite());
            assert!(rec.grad_norm < 1e4, "grad norm {}", rec.grad_norm);
        }
    }
}
