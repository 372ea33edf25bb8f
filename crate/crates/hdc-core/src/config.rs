//! Flat `key = value` configuration with dotted keys, documented defaults,
//! and strict unknown-key rejection. Precedence: command-line overrides
//! beat file values beat defaults. Every run can be reproduced from the
//! emitted effective config, which pins every key to its resolved value.

use crate::error::{HdcError, Result};
use crate::linalg::{Bandwidth, KernelSpec};
use crate::losses::LossWeights;
use crate::model::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    SgdMomentum,
    AdaptiveMoments,
}

impl OptimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::SgdMomentum => "sgd-momentum",
            OptimKind::AdaptiveMoments => "adaptive-moments",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub iterations: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// None: resolved by optimizer kind (0.05 adaptive, 1e-4 sgd).
    pub weight_decay: Option<f64>,
    pub ema_decay: f64,
    pub ema_ramp_iters: usize,
    pub fnoise_gamma: f64,
    /// Cap on the random strong-augmentation distortion strength.
    pub strong_aug_max: f64,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 0,
            iterations: 2000,
            batch_labeled: 8,
            batch_unlabeled: 8,
            optimizer: OptimKind::AdaptiveMoments,
            lr: 1e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: None,
            ema_decay: 0.99,
            ema_ramp_iters: 100,
            fnoise_gamma: 0.3,
            strong_aug_max: 1.0,
            eval_every: 200,
        }
    }
}

impl TrainSettings {
    pub fn resolved_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.optimizer {
            OptimKind::AdaptiveMoments => 0.05,
            OptimKind::SgdMomentum => 1e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(HdcError::contract("train.iterations must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(HdcError::contract(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_labeled < 1 || self.batch_unlabeled < 1 {
            return Err(HdcError::contract("batch sizes must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(HdcError::contract(format!("train.ema_decay must lie in [0,1], got {}", self.ema_decay)));
        }
        if self.fnoise_gamma < 0.0 {
            return Err(HdcError::contract("train.fnoise_gamma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.strong_aug_max) {
            return Err(HdcError::contract(format!(
                "train.strong_aug_max must lie in [0,1], got {}",
                self.strong_aug_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub train: TrainSettings,
    pub model: NetworkConfig,
    pub loss: LossWeights,
    /// Kernel knobs in raw form (re-emitted into the effective config).
    pub kernel_name: String,
    pub kernel_sigma: f64,
    pub poly_degree: u32,
    pub poly_offset: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            train: TrainSettings::default(),
            model: NetworkConfig::default(),
            loss: LossWeights::default(),
            kernel_name: "rbf".to_string(),
            kernel_sigma: 0.0,
            poly_degree: 2,
            poly_offset: 1.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "train.seed",
    "train.iterations",
    "train.batch_labeled",
    "train.batch_unlabeled",
    "train.optimizer",
    "train.lr",
    "train.momentum",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.weight_decay",
    "train.ema_decay",
    "train.ema_ramp_iters",
    "train.fnoise_gamma",
    "train.strong_aug_max",
    "train.eval_every",
    "model.width",
    "model.classes",
    "loss.beta_cg",
    "loss.beta_mi",
    "loss.cg_alpha",
    "loss.cg_eps",
    "loss.enable_cg",
    "loss.enable_mi",
    "loss.enable_pix",
    "loss.kernel",
    "loss.kernel_sigma",
    "loss.poly_degree",
    "loss.poly_offset",
];

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Up to three closest known keys, for typo diagnostics.
pub fn nearest_keys(unknown: &str) -> Vec<&'static str> {
    let mut scored: Vec<(usize, &'static str)> =
        KEYS.iter().map(|k| (levenshtein(unknown, k), *k)).collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, k)| k).collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| HdcError::contract(format!("bad value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(HdcError::contract(format!("bad boolean '{other}' for key '{key}'"))),
    }
}

impl Settings {
    /// Apply one `key = value` pair. Unknown keys error and name the
    /// nearest valid keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.iterations" => self.train.iterations = parse(key, value)?,
            "train.batch_labeled" => self.train.batch_labeled = parse(key, value)?,
            "train.batch_unlabeled" => self.train.batch_unlabeled = parse(key, value)?,
            "train.optimizer" => {
                self.train.optimizer = match value.trim() {
                    "sgd-momentum" => OptimKind::SgdMomentum,
                    "adaptive-moments" => OptimKind::AdaptiveMoments,
                    other => {
                        return Err(HdcError::contract(format!(
                            "unknown optimizer '{other}' (expected sgd-momentum or adaptive-moments)"
                        )))
                    }
                }
            }
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.adam_eps" => self.train.adam_eps = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = Some(parse(key, value)?),
            "train.ema_decay" => self.train.ema_decay = parse(key, value)?,
            "train.ema_ramp_iters" => self.train.ema_ramp_iters = parse(key, value)?,
            "train.fnoise_gamma" => self.train.fnoise_gamma = parse(key, value)?,
            "train.strong_aug_max" => self.train.strong_aug_max = parse(key, value)?,
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "model.width" => self.model.width = parse(key, value)?,
            "model.classes" => self.model.classes = parse(key, value)?,
            "loss.beta_cg" => self.loss.beta_cg = parse(key, value)?,
            "loss.beta_mi" => self.loss.beta_mi = parse(key, value)?,
            "loss.cg_alpha" => self.loss.cg_alpha = parse(key, value)?,
            "loss.cg_eps" => self.loss.cg_eps = parse(key, value)?,
            "loss.enable_cg" => self.loss.enable_cg = parse_bool(key, value)?,
            "loss.enable_mi" => self.loss.enable_mi = parse_bool(key, value)?,
            "loss.enable_pix" => self.loss.enable_pix = parse_bool(key, value)?,
            "loss.kernel" => {
                let v = value.trim();
                if !["rbf", "linear", "poly"].contains(&v) {
                    return Err(HdcError::contract(format!(
                        "unknown kernel '{v}' (expected rbf, linear, or poly)"
                    )));
                }
                self.kernel_name = v.to_string();
            }
            "loss.kernel_sigma" => self.kernel_sigma = parse(key, value)?,
            "loss.poly_degree" => self.poly_degree = parse(key, value)?,
            "loss.poly_offset" => self.poly_offset = parse(key, value)?,
            unknown => {
                return Err(HdcError::contract(format!(
                    "unknown config key '{unknown}'; nearest valid keys: {}",
                    nearest_keys(unknown).join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Rebuild the kernel spec from the raw knobs and validate everything.
    pub fn finalize(&mut self) -> Result<()> {
        self.loss.kernel = match self.kernel_name.as_str() {
            "linear" => KernelSpec::Linear,
            "poly" => KernelSpec::Polynomial { degree: self.poly_degree, offset: self.poly_offset },
            _ => KernelSpec::Rbf {
                bandwidth: if self.kernel_sigma > 0.0 {
                    Bandwidth::Fixed(self.kernel_sigma)
                } else {
                    Bandwidth::Median
                },
            },
        };
        self.train.validate()?;
        self.model.validate()?;
        self.loss.validate()
    }

    /// Parse a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Settings> {
        let mut s = Settings::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HdcError::contract(format!("config line {}: expected 'key = value', got '{raw}'", ln + 1))
            })?;
            s.apply(k.trim(), v.trim())?;
        }
        s.finalize()?;
        Ok(s)
    }

    /// Apply `key=value` override pairs (highest precedence).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| {
                HdcError::contract(format!("override '{ov}' must have the form key=value"))
            })?;
            self.apply(k.trim(), v.trim())?;
        }
        self.finalize()
    }

    /// All keys pinned to their resolved values; reruns from this text are
    /// bit-identical.
    pub fn to_effective_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        push("train.seed", self.train.seed.to_string());
        push("train.iterations", self.train.iterations.to_string());
        push("train.batch_labeled", self.train.batch_labeled.to_string());
        push("train.batch_unlabeled", self.train.batch_unlabeled.to_string());
        push("train.optimizer", self.train.optimizer.as_str().to_string());
        push("train.lr", format!("{:e}", self.train.lr));
        push("train.momentum", self.train.momentum.to_string());
        push("train.beta1", self.train.beta1.to_string());
        push("train.beta2", self.train.beta2.to_string());
        push("train.adam_eps", format!("{:e}", self.train.adam_eps));
        push("train.weight_decay", format!("{:e}", self.resolved()));
        push("train.ema_decay", self.train.ema_decay.to_string());
        push("train.ema_ramp_iters", self.train.ema_ramp_iters.to_string());
        push("train.fnoise_gamma", self.train.fnoise_gamma.to_string());
        push("train.strong_aug_max", self.train.strong_aug_max.to_string());
        push("train.eval_every", self.train.eval_every.to_string());
        push("model.width", self.model.width.to_string());
        push("model.classes", self.model.classes.to_string());
        push("loss.beta_cg", self.loss.beta_cg.to_string());
        push("loss.beta_mi", self.loss.beta_mi.to_string());
        push("loss.cg_alpha", self.loss.cg_alpha.to_string());
        push("loss.cg_eps", format!("{:e}", self.loss.cg_eps));
        push("loss.enable_cg", self.loss.enable_cg.to_string());
        push("loss.enable_mi", self.loss.enable_mi.to_string());
        push("loss.enable_pix", self.loss.enable_pix.to_string());
        push("loss.kernel", self.kernel_name.clone());
        push("loss.kernel_sigma", format!("{:e}", self.kernel_sigma));
        push("loss.poly_degree", self.poly_degree.to_string());
        push("loss.poly_offset", self.poly_offset.to_string());
        out
    }

    fn resolved(&self) -> f64 {
        self.train.resolved_weight_decay()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let mut s = Settings::default();
        s.finalize().unwrap();
        assert_eq!(s.train.iterations, 2000);
        assert_eq!(s.train.batch_labeled, 8);
        assert!((s.train.lr - 1e-4).abs() < 1e-18);
        assert!((s.train.resolved_weight_decay() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_default() {
        let s = Settings::from_text("train.optimizer = sgd-momentum\n").unwrap();
        assert!((s.train.resolved_weight_decay() - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn file_parsing_with_comments() {
        let text = "\n# a comment\ntrain.lr = 0.001   # trailing\nmodel.width = 8\nloss.enable_mi = false\n";
        let s = Settings::from_text(text).unwrap();
        assert!((s.train.lr - 0.001).abs() < 1e-15);
        assert_eq!(s.model.width, 8);
        assert!(!s.loss.enable_mi);
        assert!(s.loss.enable_cg);
    }

    #[test]
    fn unknown_key_lists_nearest() {
        let err = Settings::from_text("loss.beta_cgg = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("loss.beta_cg"), "{msg}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut s = Settings::from_text("train.lr = 0.001\n").unwrap();
        s.apply_overrides(&["train.lr=0.01".to_string()]).unwrap();
        assert!((s.train.lr - 0.01).abs() < 1e-15);
    }

    #[test]
    fn effective_text_roundtrips() {
        let mut s = Settings::from_text("train.optimizer = sgd-momentum\nloss.kernel = poly\n").unwrap();
        s.apply_overrides(&["loss.beta_cg=0.25".to_string()]).unwrap();
        let text = s.to_effective_text();
        let s2 = Settings::from_text(&text).unwrap();
        // weight decay is pinned in the effective text
        assert_eq!(s2.train.weight_decay, Some(s.train.resolved_weight_decay()));
        let mut s_pinned = s.clone();
        s_pinned.train.weight_decay = Some(s.train.resolved_weight_decay());
        assert_eq!(s_pinned, s2);
    }

    #[test]
    fn kernel_spec_resolution() {
        let s = Settings::from_text("loss.kernel = rbf\nloss.kernel_sigma = 1.5\n").unwrap();
        assert_eq!(s.loss.kernel, KernelSpec::Rbf { bandwidth: Bandwidth::Fixed(1.5) });
        let s = Settings::from_text("loss.kernel = linear\n").unwrap();
        assert_eq!(s.loss.kernel, KernelSpec::Linear);
        let s = Settings::from_text("loss.kernel = poly\nloss.poly_degree = 3\n").unwrap();
        assert_eq!(s.loss.kernel, KernelSpec::Polynomial { degree: 3, offset: 1.0 });
    }

    #[test]
    fn bad_values_are_contract_errors() {
        assert!(Settings::from_text("train.lr = banana\n").is_err());
        assert!(Settings::from_text("train.optimizer = rmsprop\n").is_err());
        assert!(Settings::from_text("loss.enable_cg = maybe\n").is_err());
        assert!(Settings::from_text("train.lr = -1\n").is_err());
    }
}
