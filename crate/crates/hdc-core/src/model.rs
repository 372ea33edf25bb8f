//! Single-encoder dual-decoder student with an EMA teacher.
//!
//! The encoder is a three-stage strided-conv pyramid; each decoder mirrors
//! it with nearest upsampling, a skip concatenation, and a 3x3 conv per
//! stage, finishing in a 1x1 classifier head. The teacher copies the
//! encoder plus the main decoder and is only ever written by EMA updates.
//!
//! Feature extraction points: `Zs`/`Zt` are the global-average-pooled
//! bottleneck (dimension `4 * width`); `F1`/`F2` are the pooled
//! penultimate decoder maps (dimension `width`).

use crate::augment::f_noise_factors;
use crate::error::{HdcError, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { in_channels: 3, classes: 2, width: 16 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 {
            return Err(HdcError::contract(format!("width must be >= 4, got {}", self.width)));
        }
        if self.classes < 2 {
            return Err(HdcError::contract(format!("classes must be >= 2, got {}", self.classes)));
        }
        Ok(())
    }

    /// Bottleneck channel count; the dimension of Zs/Zt.
    pub fn feature_dim(&self) -> usize {
        4 * self.width
    }

    pub fn spatial_ok(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << DEPTH;
        if h % m != 0 || w % m != 0 {
            return Err(HdcError::contract(format!(
                "spatial dims {h}x{w} must be divisible by {m}"
            )));
        }
        Ok(())
    }
}

/// One convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParam<T> {
    fn he_init(rng: &mut SeededRng, cout: usize, cin: usize, k: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor::new(
            vec![cout, cin, k, k],
            (0..cout * cin * k * k).map(|_| T::from_f64(std * rng.normal())).collect(),
        )
        .expect("weight shape");
        ConvParam { weight, bias: Tensor::zeros(vec![cout]) }
    }

    fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub stem: ConvParam<T>,
    pub down1: ConvParam<T>,
    pub down2: ConvParam<T>,
    pub down3: ConvParam<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub up1: ConvParam<T>,
    pub up2: ConvParam<T>,
    pub up3: ConvParam<T>,
    pub head: ConvParam<T>,
}

impl<T: Real> EncoderParams<T> {
    fn init(rng: &mut SeededRng, cfg: &NetworkConfig) -> Self {
        let w = cfg.width;
        EncoderParams {
            stem: ConvParam::he_init(rng, w, cfg.in_channels, 3),
            down1: ConvParam::he_init(rng, 2 * w, w, 3),
            down2: ConvParam::he_init(rng, 4 * w, 2 * w, 3),
            down3: ConvParam::he_init(rng, 4 * w, 4 * w, 3),
        }
    }

    fn convs(&self) -> [(&'static str, &ConvParam<T>); 4] {
        [("stem", &self.stem), ("down1", &self.down1), ("down2", &self.down2), ("down3", &self.down3)]
    }

    fn convs_mut(&mut self) -> [(&'static str, &mut ConvParam<T>); 4] {
        [
            ("stem", &mut self.stem),
            ("down1", &mut self.down1),
            ("down2", &mut self.down2),
            ("down3", &mut self.down3),
        ]
    }
}

impl<T: Real> DecoderParams<T> {
    fn init(rng: &mut SeededRng, cfg: &NetworkConfig) -> Self {
        let w = cfg.width;
        DecoderParams {
            up1: ConvParam::he_init(rng, 2 * w, 8 * w, 3),
            up2: ConvParam::he_init(rng, w, 4 * w, 3),
            up3: ConvParam::he_init(rng, w, 2 * w, 3),
            head: ConvParam::he_init(rng, cfg.classes, w, 1),
        }
    }

    fn convs(&self) -> [(&'static str, &ConvParam<T>); 4] {
        [("up1", &self.up1), ("up2", &self.up2), ("up3", &self.up3), ("head", &self.head)]
    }

    fn convs_mut(&mut self) -> [(&'static str, &mut ConvParam<T>); 4] {
        [("up1", &mut self.up1), ("up2", &mut self.up2), ("up3", &mut self.up3), ("head", &mut self.head)]
    }
}

/// All parameters: student (shared encoder + two decoders) and teacher
/// (encoder + one decoder, index-aligned with the student's main branch).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: NetworkConfig,
    pub encoder: EncoderParams<T>,
    pub dec_main: DecoderParams<T>,
    pub dec_noisy: DecoderParams<T>,
    pub t_encoder: EncoderParams<T>,
    pub t_decoder: DecoderParams<T>,
}

/// Which part of the student a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    DecoderMain,
    DecoderNoisy,
}

impl<T: Real> ModelState<T> {
    /// He-initialized student; decoders draw from independent streams; the
    /// teacher starts as an exact copy of encoder + main decoder.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut enc_rng = SeededRng::derive(seed, 0x45);
        let mut d1_rng = SeededRng::derive(seed, 0xD1);
        let mut d2_rng = SeededRng::derive(seed, 0xD2);
        let encoder = EncoderParams::init(&mut enc_rng, &config);
        let dec_main = DecoderParams::init(&mut d1_rng, &config);
        let dec_noisy = DecoderParams::init(&mut d2_rng, &config);
        Ok(ModelState {
            config,
            t_encoder: encoder.clone(),
            t_decoder: dec_main.clone(),
            encoder,
            dec_main,
            dec_noisy,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.convs().iter().map(|(_, c)| c.numel()).sum::<usize>()
            + self.dec_main.convs().iter().map(|(_, c)| c.numel()).sum::<usize>()
            + self.dec_noisy.convs().iter().map(|(_, c)| c.numel()).sum::<usize>()
    }

    /// Student tensors in canonical order: encoder, main decoder, noisy
    /// decoder; weight before bias within each conv.
    pub fn student_named(&self) -> Vec<(String, ParamGroup, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, c) in self.encoder.convs() {
            out.push((format!("encoder.{name}.weight"), ParamGroup::Encoder, &c.weight));
            out.push((format!("encoder.{name}.bias"), ParamGroup::Encoder, &c.bias));
        }
        for (name, c) in self.dec_main.convs() {
            out.push((format!("dec_main.{name}.weight"), ParamGroup::DecoderMain, &c.weight));
            out.push((format!("dec_main.{name}.bias"), ParamGroup::DecoderMain, &c.bias));
        }
        for (name, c) in self.dec_noisy.convs() {
            out.push((format!("dec_noisy.{name}.weight"), ParamGroup::DecoderNoisy, &c.weight));
            out.push((format!("dec_noisy.{name}.bias"), ParamGroup::DecoderNoisy, &c.bias));
        }
        out
    }

    pub fn student_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for (_, c) in self.encoder.convs_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for (_, c) in self.dec_main.convs_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for (_, c) in self.dec_noisy.convs_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    /// Teacher tensors in the order matching the student's main branch.
    pub fn teacher_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, c) in self.t_encoder.convs() {
            out.push((format!("teacher.encoder.{name}.weight"), &c.weight));
            out.push((format!("teacher.encoder.{name}.bias"), &c.bias));
        }
        for (name, c) in self.t_decoder.convs() {
            out.push((format!("teacher.decoder.{name}.weight"), &c.weight));
            out.push((format!("teacher.decoder.{name}.bias"), &c.bias));
        }
        out
    }

    pub fn teacher_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for (_, c) in self.t_encoder.convs_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for (_, c) in self.t_decoder.convs_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    fn main_branch_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for (_, c) in self.encoder.convs() {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for (_, c) in self.dec_main.convs() {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out
    }

    /// Teacher update: `t <- decay * t + (1 - decay) * s` over the aligned
    /// encoder + main-decoder tensors. The student is untouched.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(HdcError::contract(format!("ema decay must lie in [0,1], got {decay}")));
        }
        let d = T::from_f64(decay);
        let omd = T::from_f64(1.0 - decay);
        let student: Vec<Tensor<T>> = self.main_branch_tensors().into_iter().cloned().collect();
        let mut idx = 0;
        for (_, c) in self.t_encoder.convs_mut().into_iter().chain(self.t_decoder.convs_mut()) {
            for t in [&mut c.weight, &mut c.bias] {
                let s = &student[idx];
                for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                    *tv = d * *tv + omd * sv;
                }
                idx += 1;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            encoder: cast_encoder(&self.encoder),
            dec_main: cast_decoder(&self.dec_main),
            dec_noisy: cast_decoder(&self.dec_noisy),
            t_encoder: cast_encoder(&self.t_encoder),
            t_decoder: cast_decoder(&self.t_decoder),
        }
    }
}

fn cast_conv<T: Real, U: Real>(c: &ConvParam<T>) -> ConvParam<U> {
    ConvParam { weight: c.weight.cast(), bias: c.bias.cast() }
}

fn cast_encoder<T: Real, U: Real>(e: &EncoderParams<T>) -> EncoderParams<U> {
    EncoderParams {
        stem: cast_conv(&e.stem),
        down1: cast_conv(&e.down1),
        down2: cast_conv(&e.down2),
        down3: cast_conv(&e.down3),
    }
}

fn cast_decoder<T: Real, U: Real>(d: &DecoderParams<T>) -> DecoderParams<U> {
    DecoderParams {
        up1: cast_conv(&d.up1),
        up2: cast_conv(&d.up2),
        up3: cast_conv(&d.up3),
        head: cast_conv(&d.head),
    }
}

// ── tape forward (student) ──────────────────────────────────────────────

/// Tape vars for one conv's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct StudentVars {
    pub encoder: Vec<ConvVars>,
    pub dec_main: Vec<ConvVars>,
    pub dec_noisy: Vec<ConvVars>,
}

impl StudentVars {
    /// Flat list aligned with `ModelState::student_named` order.
    pub fn flat(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.dec_main)
            .chain(&self.dec_noisy)
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct StudentOutputs {
    /// Main decoder logits, `B x C x H x W`.
    pub p1: Var,
    /// Noisy decoder logits.
    pub p2: Var,
    /// Pooled bottleneck features, `B x 4w`.
    pub zs: Var,
    /// Pooled penultimate features of the main decoder, `B x w`.
    pub f1: Var,
    /// Pooled penultimate features of the noisy decoder, `B x w`.
    pub f2: Var,
    pub params: StudentVars,
}

fn leaf_conv<T: Real>(tape: &mut Tape<T>, c: &ConvParam<T>, requires_grad: bool) -> ConvVars {
    ConvVars {
        weight: tape.leaf(c.weight.clone(), requires_grad),
        bias: tape.leaf(c.bias.clone(), requires_grad),
    }
}

fn conv_block<T: Real>(tape: &mut Tape<T>, x: Var, c: ConvVars, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, c.weight, stride, pad)?;
    let y = tape.bias_add(y, c.bias)?;
    tape.relu(y)
}

/// Decoder pass; returns (logits, penultimate feature map).
fn decode<T: Real>(
    tape: &mut Tape<T>,
    bottleneck: Var,
    skips: &[Var; 3],
    params: &[ConvVars],
) -> Result<(Var, Var)> {
    let up = tape.upsample2x(bottleneck)?;
    let cat = tape.concat_channels(up, skips[2])?;
    let c1 = conv_block(tape, cat, params[0], 1, 1)?;

    let up = tape.upsample2x(c1)?;
    let cat = tape.concat_channels(up, skips[1])?;
    let c2 = conv_block(tape, cat, params[1], 1, 1)?;

    let up = tape.upsample2x(c2)?;
    let cat = tape.concat_channels(up, skips[0])?;
    let c3 = conv_block(tape, cat, params[2], 1, 1)?;

    let logits = tape.conv2d(c3, params[3].weight, 1, 0)?;
    let logits = tape.bias_add(logits, params[3].bias)?;
    Ok((logits, c3))
}

/// Put every student parameter onto the tape once, so multiple forward
/// passes in one step share leaves and gradients accumulate across them.
pub fn leaf_student_params<T: Real>(tape: &mut Tape<T>, state: &ModelState<T>) -> StudentVars {
    StudentVars {
        encoder: state.encoder.convs().iter().map(|(_, c)| leaf_conv(tape, c, true)).collect(),
        dec_main: state.dec_main.convs().iter().map(|(_, c)| leaf_conv(tape, c, true)).collect(),
        dec_noisy: state.dec_noisy.convs().iter().map(|(_, c)| leaf_conv(tape, c, true)).collect(),
    }
}

/// Record the full student forward pass on the tape with fresh parameter
/// leaves. The noisy decoder consumes the bottleneck perturbed by
/// multiplicative uniform noise of half-range `gamma` (drawn from `rng`,
/// gradient-stopped).
pub fn forward_student<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    x: &Tensor<T>,
    gamma: f64,
    rng: &mut SeededRng,
) -> Result<StudentOutputs> {
    let vars = leaf_student_params(tape, state);
    forward_student_with(tape, &state.config, &vars, x, gamma, rng)
}

/// Student forward pass over existing parameter leaves.
pub fn forward_student_with<T: Real>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    vars: &StudentVars,
    x: &Tensor<T>,
    gamma: f64,
    rng: &mut SeededRng,
) -> Result<StudentOutputs> {
    let s = x.shape();
    if s.len() != 4 || s[1] != config.in_channels {
        return Err(HdcError::contract(format!(
            "forward expects B x {} x H x W, got {s:?}",
            config.in_channels
        )));
    }
    config.spatial_ok(s[2], s[3])?;

    let enc_vars = vars.encoder.clone();
    let d1_vars = vars.dec_main.clone();
    let d2_vars = vars.dec_noisy.clone();

    let xv = tape.leaf(x.clone(), false);
    let s0 = conv_block(tape, xv, enc_vars[0], 1, 1)?;
    let s1 = conv_block(tape, s0, enc_vars[1], 2, 1)?;
    let s2 = conv_block(tape, s1, enc_vars[2], 2, 1)?;
    let bottleneck = conv_block(tape, s2, enc_vars[3], 2, 1)?;
    let skips = [s0, s1, s2];

    let zs = tape.global_avg_pool(bottleneck)?;

    let (p1, penult1) = decode(tape, bottleneck, &skips, &d1_vars)?;
    let f1 = tape.global_avg_pool(penult1)?;

    let noisy_bottleneck = if gamma > 0.0 {
        let factors = f_noise_factors::<T>(tape.shape(bottleneck), gamma, rng)?;
        let fv = tape.leaf(factors, false);
        tape.mul(bottleneck, fv)?
    } else {
        bottleneck
    };
    let (p2, penult2) = decode(tape, noisy_bottleneck, &skips, &d2_vars)?;
    let f2 = tape.global_avg_pool(penult2)?;

    Ok(StudentOutputs {
        p1,
        p2,
        zs,
        f1,
        f2,
        params: StudentVars { encoder: enc_vars, dec_main: d1_vars, dec_noisy: d2_vars },
    })
}

// ── plain forward (teacher / evaluation) ────────────────────────────────

struct PlainMap<T> {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

fn plain_conv_block<T: Real>(x: &PlainMap<T>, b: usize, p: &ConvParam<T>, stride: usize) -> PlainMap<T> {
    let ws = p.weight.shape();
    let (cout, k) = (ws[0], ws[2]);
    let pad = if k == 3 { 1 } else { 0 };
    let oh = crate::ops::conv_out_size(x.h, k, stride, pad);
    let ow = crate::ops::conv_out_size(x.w, k, stride, pad);
    let mut out = vec![T::ZERO; b * cout * oh * ow];
    crate::ops::conv2d_fwd(&x.data, b, x.c, x.h, x.w, p.weight.data(), cout, k, k, stride, pad, &mut out);
    let mut biased = vec![T::ZERO; out.len()];
    crate::ops::bias_add_fwd(&out, p.bias.data(), cout, oh * ow, &mut biased);
    let mut act = vec![T::ZERO; biased.len()];
    crate::ops::relu_fwd(&biased, &mut act);
    PlainMap { c: cout, h: oh, w: ow, data: act }
}

fn plain_upsample<T: Real>(x: &PlainMap<T>, b: usize) -> PlainMap<T> {
    let mut out = vec![T::ZERO; b * x.c * 4 * x.h * x.w];
    crate::ops::upsample2x_fwd(&x.data, b * x.c, x.h, x.w, &mut out);
    PlainMap { c: x.c, h: 2 * x.h, w: 2 * x.w, data: out }
}

fn plain_concat<T: Real>(a: &PlainMap<T>, bmap: &PlainMap<T>, b: usize) -> PlainMap<T> {
    let plane = a.h * a.w;
    let (ca, cb) = (a.c, bmap.c);
    let mut out = vec![T::ZERO; b * (ca + cb) * plane];
    for bi in 0..b {
        let dst = &mut out[bi * (ca + cb) * plane..(bi + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data[bi * ca * plane..(bi + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&bmap.data[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    PlainMap { c: ca + cb, h: a.h, w: a.w, data: out }
}

#[allow(clippy::type_complexity)]
fn plain_encoder<T: Real>(enc: &EncoderParams<T>, x: &Tensor<T>) -> (usize, [PlainMap<T>; 3], PlainMap<T>) {
    let s = x.shape();
    let b = s[0];
    let input = PlainMap { c: s[1], h: s[2], w: s[3], data: x.data().to_vec() };
    let s0 = plain_conv_block(&input, b, &enc.stem, 1);
    let s1 = plain_conv_block(&s0, b, &enc.down1, 2);
    let s2 = plain_conv_block(&s1, b, &enc.down2, 2);
    let bot = plain_conv_block(&s2, b, &enc.down3, 2);
    (b, [s0, s1, s2], bot)
}

fn plain_decode<T: Real>(
    dec: &DecoderParams<T>,
    b: usize,
    skips: &[PlainMap<T>; 3],
    bottleneck: &PlainMap<T>,
) -> PlainMap<T> {
    let up = plain_upsample(bottleneck, b);
    let cat = plain_concat(&up, &skips[2], b);
    let c1 = plain_conv_block(&cat, b, &dec.up1, 1);
    let up = plain_upsample(&c1, b);
    let cat = plain_concat(&up, &skips[1], b);
    let c2 = plain_conv_block(&cat, b, &dec.up2, 1);
    let up = plain_upsample(&c2, b);
    let cat = plain_concat(&up, &skips[0], b);
    let c3 = plain_conv_block(&cat, b, &dec.up3, 1);

    let ws = dec.head.weight.shape();
    let cout = ws[0];
    let mut logits = vec![T::ZERO; b * cout * c3.h * c3.w];
    crate::ops::conv2d_fwd(&c3.data, b, c3.c, c3.h, c3.w, dec.head.weight.data(), cout, 1, 1, 1, 0, &mut logits);
    let mut biased = vec![T::ZERO; logits.len()];
    crate::ops::bias_add_fwd(&logits, dec.head.bias.data(), cout, c3.h * c3.w, &mut biased);
    PlainMap { c: cout, h: c3.h, w: c3.w, data: biased }
}

#[derive(Debug, Clone)]
pub struct TeacherOutputs<T> {
    /// Softmax probability map, `B x C x H x W`.
    pub yhat: Tensor<T>,
    /// Pooled bottleneck features, `B x 4w`.
    pub zt: Tensor<T>,
}

/// Gradient-free teacher pass: probabilities and pooled features. Runs the
/// same numeric kernels as the tape path, so a teacher that equals the
/// student's main branch produces bitwise-identical outputs.
pub fn forward_teacher<T: Real>(state: &ModelState<T>, x: &Tensor<T>) -> Result<TeacherOutputs<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(HdcError::contract(format!("teacher forward expects rank-4 input, got {s:?}")));
    }
    state.config.spatial_ok(s[2], s[3])?;
    let (b, skips, bot) = plain_encoder(&state.t_encoder, x);

    let mut zt = Tensor::zeros(vec![b, bot.c]);
    crate::ops::gap_fwd(&bot.data, b * bot.c, bot.h * bot.w, zt.data_mut());

    let logits = plain_decode(&state.t_decoder, b, &skips, &bot);
    let mut probs = vec![T::ZERO; logits.data.len()];
    crate::ops::softmax_channels_fwd(&logits.data, b, logits.c, logits.h * logits.w, &mut probs);
    let yhat = Tensor::new(vec![b, logits.c, logits.h, logits.w], probs)?;
    if !yhat.all_finite() || !zt.all_finite() {
        return Err(HdcError::numeric("teacher forward produced non-finite values"));
    }
    Ok(TeacherOutputs { yhat, zt })
}

/// Gradient-free student main-branch logits (evaluation path; no f-noise).
pub fn forward_main_logits<T: Real>(state: &ModelState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    state.config.spatial_ok(x.shape()[2], x.shape()[3])?;
    let (b, skips, bot) = plain_encoder(&state.encoder, x);
    let logits = plain_decode(&state.dec_main, b, &skips, &bot);
    Tensor::new(vec![b, logits.c, logits.h, logits.w], logits.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig { in_channels: 3, classes: 2, width: 4 }
    }

    fn rand_batch(rng: &mut SeededRng, b: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(vec![b, c, h, w], (0..b * c * h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = NetworkConfig { in_channels: 3, classes: 2, width: 16 };
        let m = ModelState::<f32>::init(cfg, 1).unwrap();
        let w = 16usize;
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let enc = conv(w, 3, 3) + conv(2 * w, w, 3) + conv(4 * w, 2 * w, 3) + conv(4 * w, 4 * w, 3);
        let dec = conv(2 * w, 8 * w, 3) + conv(w, 4 * w, 3) + conv(w, 2 * w, 3) + conv(2, w, 1);
        assert_eq!(m.param_count(), enc + 2 * dec);
        // desk-scale envelope for the default width
        assert!((50_000..=200_000).contains(&m.param_count()), "{}", m.param_count());
    }

    #[test]
    fn teacher_equals_main_branch_at_init() {
        let m = ModelState::<f32>::init(tiny_cfg(), 7).unwrap();
        assert_eq!(m.t_encoder, m.encoder);
        assert_eq!(m.t_decoder, m.dec_main);

        let mut rng = SeededRng::new(2);
        let x = rand_batch(&mut rng, 2, 3, 16, 16);
        let t = forward_teacher(&m, &x).unwrap();
        let logits = forward_main_logits(&m, &x).unwrap();
        let s = logits.shape().to_vec();
        let mut probs = vec![0f32; logits.numel()];
        crate::ops::softmax_channels_fwd(logits.data(), s[0], s[1], s[2] * s[3], &mut probs);
        assert_eq!(t.yhat.data(), &probs[..], "teacher must equal student main at step 0");
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let m = ModelState::<f32>::init(tiny_cfg(), 8).unwrap();
        let mut rng = SeededRng::new(3);
        let x = rand_batch(&mut rng, 2, 3, 16, 16);
        let mut tape = Tape::new();
        let out = forward_student(&mut tape, &m, &x, 0.0, &mut rng).unwrap();
        let plain = forward_main_logits(&m, &x).unwrap();
        assert_eq!(tape.value(out.p1).data(), plain.data());
    }

    #[test]
    fn decoders_differ_at_init() {
        let m = ModelState::<f32>::init(tiny_cfg(), 7).unwrap();
        let diff = m
            .dec_main
            .up1
            .weight
            .data()
            .iter()
            .zip(m.dec_noisy.up1.weight.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn forward_shapes() {
        let m = ModelState::<f32>::init(tiny_cfg(), 3).unwrap();
        let mut rng = SeededRng::new(4);
        let x = rand_batch(&mut rng, 2, 3, 16, 24);
        let mut tape = Tape::new();
        let out = forward_student(&mut tape, &m, &x, 0.3, &mut rng).unwrap();
        assert_eq!(tape.shape(out.p1), &[2, 2, 16, 24]);
        assert_eq!(tape.shape(out.p2), &[2, 2, 16, 24]);
        assert_eq!(tape.shape(out.zs), &[2, 16]);
        assert_eq!(tape.shape(out.f1), &[2, 4]);
        assert_eq!(tape.shape(out.f2), &[2, 4]);
    }

    #[test]
    fn indivisible_spatial_dims_rejected() {
        let m = ModelState::<f32>::init(tiny_cfg(), 3).unwrap();
        let mut rng = SeededRng::new(4);
        let x = rand_batch(&mut rng, 1, 3, 12, 16);
        let mut tape = Tape::new();
        assert!(forward_student(&mut tape, &m, &x, 0.0, &mut rng).is_err());
    }

    #[test]
    fn equal_decoders_and_zero_noise_give_identical_heads() {
        let mut m = ModelState::<f32>::init(tiny_cfg(), 5).unwrap();
        m.dec_noisy = m.dec_main.clone();
        let mut rng = SeededRng::new(6);
        let x = rand_batch(&mut rng, 1, 3, 16, 16);
        let mut tape = Tape::new();
        let out = forward_student(&mut tape, &m, &x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(out.p1).data(), tape.value(out.p2).data());
    }

    #[test]
    fn f_noise_separates_heads_even_with_equal_decoders() {
        let mut m = ModelState::<f32>::init(tiny_cfg(), 5).unwrap();
        m.dec_noisy = m.dec_main.clone();
        let mut rng = SeededRng::new(6);
        let x = rand_batch(&mut rng, 1, 3, 16, 16);
        let mut tape = Tape::new();
        let out = forward_student(&mut tape, &m, &x, 0.3, &mut rng).unwrap();
        let diff = tape
            .value(out.p1)
            .data()
            .iter()
            .zip(tape.value(out.p2).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn teacher_probabilities_normalized() {
        let m = ModelState::<f32>::init(tiny_cfg(), 9).unwrap();
        let mut rng = SeededRng::new(10);
        let x = rand_batch(&mut rng, 2, 3, 16, 16);
        let t = forward_teacher(&m, &x).unwrap();
        let s = t.yhat.shape().to_vec();
        let plane = s[2] * s[3];
        for bi in 0..s[0] {
            for i in 0..plane {
                let mut acc = 0f32;
                for c in 0..s[1] {
                    acc += t.yhat.data()[(bi * s[1] + c) * plane + i];
                }
                assert!((acc - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(t.zt.shape(), &[2, 16]);
    }

    #[test]
    fn ema_update_scalar_contract() {
        let mut m = ModelState::<f32>::init(tiny_cfg(), 11).unwrap();
        let teacher0 = m.t_encoder.stem.weight.clone();
        for v in m.encoder.stem.weight.data_mut() {
            *v += 1.0;
        }
        let student = m.encoder.stem.weight.clone();

        for decay in [0.0f32, 0.5, 0.9, 1.0] {
            let mut trial = m.clone();
            trial.t_encoder.stem.weight = teacher0.clone();
            trial.ema_update(f64::from(decay)).unwrap();
            for ((t, &t0), &s) in trial
                .t_encoder
                .stem
                .weight
                .data()
                .iter()
                .zip(teacher0.data())
                .zip(student.data())
            {
                let want = decay * t0 + (1.0 - decay) * s;
                assert_eq!(*t, want, "decay {decay}");
            }
        }
        // student untouched by EMA
        let before = m.encoder.stem.weight.clone();
        m.ema_update(0.7).unwrap();
        assert_eq!(m.encoder.stem.weight, before);
    }

    #[test]
    fn ema_shrinks_gap_geometrically() {
        let mut m = ModelState::<f32>::init(tiny_cfg(), 12).unwrap();
        for v in m.encoder.stem.weight.data_mut() {
            *v += 2.0;
        }
        let gap = |m: &ModelState<f32>| {
            m.encoder
                .stem
                .weight
                .data()
                .iter()
                .zip(m.t_encoder.stem.weight.data())
                .map(|(a, b)| f64::from((a - b).abs()))
                .fold(0.0, f64::max)
        };
        let g0 = gap(&m);
        let decay = 0.5f64;
        for n in 1..=4 {
            m.ema_update(decay).unwrap();
            let g = gap(&m);
            assert!((g - g0 * decay.powi(n)).abs() < 1e-5, "step {n}: {g} vs {}", g0 * decay.powi(n));
        }
    }

    #[test]
    fn ema_decay_out_of_range_rejected() {
        let mut m = ModelState::<f32>::init(tiny_cfg(), 13).unwrap();
        assert!(m.ema_update(1.5).is_err());
        assert!(m.ema_update(-0.1).is_err());
    }

    #[test]
    fn mi_only_gradient_partition() {
        // With only L_MI, the main decoder gets exactly zero gradient while
        // the noisy decoder and encoder get nonzero gradient.
        let m = ModelState::<f64>::init(tiny_cfg(), 14).unwrap();
        let mut rng = SeededRng::new(15);
        let x = rand_batch(&mut rng, 4, 3, 16, 16).cast::<f64>();
        let mut tape = Tape::new();
        let out = forward_student(&mut tape, &m, &x, 0.3, &mut rng).unwrap();
        let spec = crate::linalg::KernelSpec::rbf_median();
        let loss = crate::losses::mi_loss(&mut tape, out.f1, out.f2, &spec).unwrap();
        let grads = tape.backward(loss).unwrap();

        for cv in &out.params.dec_main {
            assert!(grads.get(cv.weight).is_none(), "main decoder weight must get no gradient");
            assert!(grads.get(cv.bias).is_none());
        }
        let noisy_nonzero = out
            .params
            .dec_noisy
            .iter()
            .any(|cv| grads.get(cv.weight).map(|g| g.data().iter().any(|&v| v != 0.0)).unwrap_or(false));
        assert!(noisy_nonzero, "noisy decoder must receive gradient");
        let encoder_nonzero = out
            .params
            .encoder
            .iter()
            .any(|cv| grads.get(cv.weight).map(|g| g.data().iter().any(|&v| v != 0.0)).unwrap_or(false));
        assert!(encoder_nonzero, "shared encoder must receive gradient through the noisy branch");
    }

    #[test]
    fn encoder_perturbation_moves_both_heads_noisy_only_moves_p2() {
        let m = ModelState::<f32>::init(tiny_cfg(), 16).unwrap();
        let mut rng = SeededRng::new(17);
        let x = rand_batch(&mut rng, 1, 3, 16, 16);

        let run = |m: &ModelState<f32>| {
            let mut tape = Tape::new();
            let mut r = SeededRng::new(99);
            let out = forward_student(&mut tape, m, &x, 0.0, &mut r).unwrap();
            (tape.value(out.p1).clone(), tape.value(out.p2).clone())
        };
        let (p1, p2) = run(&m);

        let mut enc_pert = m.clone();
        enc_pert.encoder.down2.weight.data_mut()[0] += 0.5;
        let (q1, q2) = run(&enc_pert);
        assert!(p1.max_abs_diff(&q1) > 0.0);
        assert!(p2.max_abs_diff(&q2) > 0.0);

        let mut noisy_pert = m.clone();
        noisy_pert.dec_noisy.up2.weight.data_mut()[0] += 0.5;
        let (r1, r2) = run(&noisy_pert);
        assert_eq!(p1.max_abs_diff(&r1), 0.0, "main head must not move");
        assert!(p2.max_abs_diff(&r2) > 0.0);
    }
}
