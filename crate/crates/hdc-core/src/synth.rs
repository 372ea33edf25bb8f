//! Synthetic ultrasound-like dataset: low-contrast elliptical structures
//! under multiplicative speckle, dark shadow wedges crossing the boundary,
//! and blurred edges. Fully determined by (seed, id), so generation can
//! fan out per sample and regenerate byte-identical trees.
//!
//! On-disk formats:
//! - images and masks: binary 8-bit PGM (P5); mask pixel value == class index
//! - manifest: UTF-8 text, `key=value` header lines, then one record per
//!   line: `<split>\t<image-path>\t<mask-path|UNLABELED>`
//!
//! Masks of "unlabeled" training samples are written to a sidecar
//! directory for oracle-only diagnostics; manifest records never point
//! there, so the trainer cannot read them by construction.

use crate::augment::{Image, Mask};
use crate::error::{HdcError, Result};
use crate::exec;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const FG_INTENSITY: f64 = 0.55;
pub const BG_INTENSITY: f64 = 0.45;
pub const SPECKLE_SHAPE: u32 = 4;
pub const FG_FRACTION_RANGE: (f64, f64) = (0.03, 0.5);

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub mask: Option<Mask>,
    pub labeled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(HdcError::format(format!("unknown split tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub split: Split,
    pub image_path: PathBuf,
    /// None for unlabeled training samples.
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn records_for(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn labeled_train(&self) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == Split::Train && r.mask_path.is_some()).collect()
    }

    pub fn unlabeled_train(&self) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == Split::Train && r.mask_path.is_none()).collect()
    }
}

// ── sample generation ───────────────────────────────────────────────────

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn draw_mask(rng: &mut SeededRng, h: usize, w: usize, classes: u8) -> Vec<u8> {
    // One elliptical structure per foreground class, earliest class wins
    // on overlap; each structure's visible fraction is rejection-resampled
    // into a sane band.
    let mut mask = vec![0u8; h * w];
    let per_class_hi = FG_FRACTION_RANGE.1 / f64::from(classes - 1);
    for class in 1..classes {
        loop {
            let e = Ellipse {
                cy: rng.uniform_in(0.25 * h as f64, 0.75 * h as f64),
                cx: rng.uniform_in(0.25 * w as f64, 0.75 * w as f64),
                ry: rng.uniform_in(0.15 * h as f64, 0.40 * h as f64),
                rx: rng.uniform_in(0.15 * w as f64, 0.40 * w as f64),
                theta: rng.uniform_in(0.0, std::f64::consts::PI),
            };
            let mut visible = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if mask[y * w + x] == 0 && e.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        visible += 1;
                    }
                }
            }
            let frac = visible as f64 / (h * w) as f64;
            if (FG_FRACTION_RANGE.0..=per_class_hi).contains(&frac) {
                for y in 0..h {
                    for x in 0..w {
                        if mask[y * w + x] == 0 && e.contains(y as f64 + 0.5, x as f64 + 0.5) {
                            mask[y * w + x] = class;
                        }
                    }
                }
                break;
            }
        }
    }
    mask
}

fn box_blur3(img: &mut [f64], h: usize, w: usize) {
    // separable [1,2,1]/4 in each direction
    let mut tmp = img.to_vec();
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            tmp[y * w + x] = 0.25 * (img[y * w + xm] + 2.0 * img[y * w + x] + img[y * w + xp]);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            img[y * w + x] = 0.25 * (tmp[ym * w + x] + 2.0 * tmp[y * w + x] + tmp[yp * w + x]);
        }
    }
}

/// Deterministic ultrasound-like sample for (seed, id), two classes.
pub fn generate_sample(seed: u64, id: u64, h: usize, w: usize) -> Result<Sample> {
    generate_sample_multiclass(seed, id, h, w, 2)
}

/// Multi-class variant: one structure per foreground class, at slightly
/// increasing intensity per class.
pub fn generate_sample_multiclass(seed: u64, id: u64, h: usize, w: usize, classes: u8) -> Result<Sample> {
    if h < 32 || w < 32 || h % 8 != 0 || w % 8 != 0 {
        return Err(HdcError::contract(format!(
            "sample dims must be >= 32 and divisible by 8, got {h}x{w}"
        )));
    }
    if classes < 2 {
        return Err(HdcError::contract(format!("classes must be >= 2, got {classes}")));
    }
    let mut rng = SeededRng::derive(seed, id);
    let mask = draw_mask(&mut rng, h, w, classes);

    let mut img: Vec<f64> = mask
        .iter()
        .map(|&m| if m == 0 { BG_INTENSITY } else { FG_INTENSITY + 0.10 * f64::from(m - 1) })
        .collect();

    // multiplicative speckle
    for v in &mut img {
        *v *= rng.gamma_mean_one(SPECKLE_SHAPE);
    }

    // 0..2 dark shadow wedges crossing the structure's column range
    let (mut x_lo, mut x_hi) = (w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != 0 {
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
            }
        }
    }
    let wedges = rng.below(3);
    for _ in 0..wedges {
        let cx = rng.uniform_in(x_lo as f64, (x_hi + 1) as f64);
        let top_w = rng.uniform_in(2.0, 5.0);
        let bot_w = top_w + rng.uniform_in(2.0, 6.0);
        for y in 0..h {
            let half = 0.5 * (top_w + (bot_w - top_w) * y as f64 / h as f64);
            let lo = (cx - half).floor().max(0.0) as usize;
            let hi = ((cx + half).ceil() as usize).min(w);
            for x in lo..hi {
                img[y * w + x] *= 0.4;
            }
        }
    }

    // blurred, indistinct boundary
    let passes = 1 + rng.below(2);
    for _ in 0..passes {
        box_blur3(&mut img, h, w);
    }

    let pixels: Vec<f32> = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Sample {
        id,
        image: Image::new(h, w, pixels),
        mask: Some(Mask { h, w, classes: mask }),
        labeled: true,
    })
}

// ── PGM I/O ─────────────────────────────────────────────────────────────

/// Write binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != h * w {
        return Err(HdcError::contract(format!("pgm payload {} != {h}x{w}", bytes.len())));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(bytes);
    fs::write(path, buf).map_err(|e| HdcError::io(path, e))
}

/// Read binary PGM; returns (h, w, payload).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| HdcError::io(path, e))?;
    if raw.len() < 2 || &raw[..2] != b"P5" {
        return Err(HdcError::format(format!("{}: not a binary PGM (bad magic)", path.display())));
    }
    let mut pos = 2usize;
    let mut next_token = |raw: &[u8]| -> Result<usize> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| HdcError::format(format!("{}: bad header token", path.display())))
    };
    let w = next_token(&raw)?;
    let h = next_token(&raw)?;
    let maxval = next_token(&raw)?;
    if maxval != 255 {
        return Err(HdcError::format(format!("{}: maxval {maxval} unsupported", path.display())));
    }
    pos += 1; // single whitespace byte after maxval
    if raw.len() < pos + h * w {
        return Err(HdcError::format(format!(
            "{}: truncated payload ({} of {} bytes)",
            path.display(),
            raw.len().saturating_sub(pos),
            h * w
        )));
    }
    Ok((h, w, raw[pos..pos + h * w].to_vec()))
}

pub fn image_to_bytes(img: &Image) -> Vec<u8> {
    img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn bytes_to_image(h: usize, w: usize, bytes: &[u8]) -> Image {
    Image::new(h, w, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
}

// ── dataset generation ──────────────────────────────────────────────────

pub const DEFAULT_VAL: usize = 10;
pub const DEFAULT_TEST: usize = 50;

/// Generate a two-class dataset tree and its manifest.
///
/// `n_total` training samples are split into labeled/unlabeled once from
/// the seed; a fully labeled val split and test split are emitted on top.
pub fn generate_dataset(
    seed: u64,
    n_total: usize,
    labeled_fraction: f64,
    h: usize,
    w: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    generate_dataset_multiclass(seed, n_total, labeled_fraction, h, w, 2, out_dir)
}

/// Dataset generation with a configurable class count.
pub fn generate_dataset_multiclass(
    seed: u64,
    n_total: usize,
    labeled_fraction: f64,
    h: usize,
    w: usize,
    classes: u8,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(HdcError::contract(format!(
            "labeled fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }
    if n_total == 0 {
        return Err(HdcError::contract("n_total must be >= 1"));
    }
    let m_labeled = ((n_total as f64) * labeled_fraction).round().max(1.0) as usize;
    let m_labeled = m_labeled.min(n_total);

    for sub in ["images", "masks", "sidecar_masks"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| HdcError::io(out_dir.join(sub), e))?;
    }

    // labeled/unlabeled assignment drawn once from the seed
    let mut assign_rng = SeededRng::derive(seed, u64::MAX);
    let mut order: Vec<usize> = (0..n_total).collect();
    assign_rng.shuffle(&mut order);
    let mut labeled_flag = vec![false; n_total];
    for &i in order.iter().take(m_labeled) {
        labeled_flag[i] = true;
    }

    let n_all = n_total + DEFAULT_VAL + DEFAULT_TEST;
    let samples = exec::map_indexed(n_all, |i| generate_sample_multiclass(seed, i as u64, h, w, classes));

    let mut records = Vec::with_capacity(n_all);
    for (i, sample) in samples.into_iter().enumerate() {
        let sample = sample?;
        let split = if i < n_total {
            Split::Train
        } else if i < n_total + DEFAULT_VAL {
            Split::Val
        } else {
            Split::Test
        };
        let img_rel = PathBuf::from(format!("images/{i:05}.pgm"));
        write_pgm(&out_dir.join(&img_rel), h, w, &image_to_bytes(&sample.image))?;

        let mask = sample.mask.expect("generator always produces a mask");
        let labeled = split != Split::Train || labeled_flag[i];
        let mask_rel = if labeled {
            let rel = PathBuf::from(format!("masks/{i:05}.pgm"));
            write_pgm(&out_dir.join(&rel), h, w, &mask.classes)?;
            Some(rel)
        } else {
            // oracle-only sidecar; never referenced by the manifest
            let rel = PathBuf::from(format!("sidecar_masks/{i:05}.pgm"));
            write_pgm(&out_dir.join(&rel), h, w, &mask.classes)?;
            None
        };
        records.push(ManifestRecord { split, image_path: img_rel, mask_path: mask_rel });
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed,
        width: w,
        height: h,
        labeled: m_labeled,
        unlabeled: n_total - m_labeled,
        records,
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.txt")
}

pub fn write_manifest(m: &DatasetManifest) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("seed={}\n", m.seed));
    text.push_str(&format!("width={}\n", m.width));
    text.push_str(&format!("height={}\n", m.height));
    text.push_str(&format!("labeled={}\n", m.labeled));
    text.push_str(&format!("unlabeled={}\n", m.unlabeled));
    for r in &m.records {
        let mask = r
            .mask_path
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|| "UNLABELED".to_string());
        text.push_str(&format!("{}\t{}\t{}\n", r.split.as_str(), r.image_path.display(), mask));
    }
    let path = manifest_path(&m.root);
    fs::write(&path, text).map_err(|e| HdcError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| HdcError::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .ok_or_else(|| HdcError::format("manifest has no parent directory"))?;
    let mut header = std::collections::BTreeMap::new();
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if line.contains('\t') {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(HdcError::format(format!("manifest line {}: expected 3 fields", ln + 1)));
            }
            let mask_path =
                if parts[2] == "UNLABELED" { None } else { Some(PathBuf::from(parts[2])) };
            records.push(ManifestRecord {
                split: Split::parse(parts[0])?,
                image_path: PathBuf::from(parts[1]),
                mask_path,
            });
        } else if let Some((k, v)) = line.split_once('=') {
            header.insert(k.to_string(), v.to_string());
        } else {
            return Err(HdcError::format(format!("manifest line {}: unparseable '{line}'", ln + 1)));
        }
    }
    let get = |k: &str| -> Result<u64> {
        header
            .get(k)
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| HdcError::format(format!("manifest missing numeric header '{k}'")))
    };
    let m = DatasetManifest {
        root,
        seed: get("seed")?,
        width: get("width")? as usize,
        height: get("height")? as usize,
        labeled: get("labeled")? as usize,
        unlabeled: get("unlabeled")? as usize,
        records,
    };
    let n_lab = m.labeled_train().len();
    let n_unl = m.unlabeled_train().len();
    if n_lab != m.labeled || n_unl != m.unlabeled {
        return Err(HdcError::format(format!(
            "manifest header says {}/{} labeled/unlabeled but records hold {n_lab}/{n_unl}",
            m.labeled, m.unlabeled
        )));
    }
    for r in &m.records {
        for p in std::iter::once(&r.image_path).chain(r.mask_path.iter()) {
            let full = m.root.join(p);
            if !full.is_file() {
                return Err(HdcError::format(format!("manifest references missing file {}", full.display())));
            }
        }
    }
    Ok(m)
}

// ── loading ─────────────────────────────────────────────────────────────

/// Load one record: image in [0,1] plus the mask when present.
pub fn load_record(m: &DatasetManifest, r: &ManifestRecord) -> Result<Sample> {
    let img_path = m.root.join(&r.image_path);
    let (h, w, bytes) = read_pgm(&img_path)?;
    let image = bytes_to_image(h, w, &bytes);
    let mask = match &r.mask_path {
        Some(rel) => {
            let (mh, mw, classes) = read_pgm(&m.root.join(rel))?;
            if (mh, mw) != (h, w) {
                return Err(HdcError::format(format!(
                    "mask {} is {mh}x{mw} but image is {h}x{w}",
                    rel.display()
                )));
            }
            Some(Mask { h: mh, w: mw, classes })
        }
        None => None,
    };
    Ok(Sample { id: 0, image, mask, labeled: r.mask_path.is_some() })
}

/// Stack grayscale images into a `B x 3 x H x W` tensor (channel
/// replication) in [0,1].
pub fn batch_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(HdcError::contract("empty batch"));
    }
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.h != h || img.w != w {
            return Err(HdcError::contract("batch images must share dims"));
        }
        for _ in 0..3 {
            data.extend(img.pixels.iter().map(|&v| T::from_f64(f64::from(v))));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Flatten masks into a class-index target vector (`B*H*W`).
pub fn mask_targets(masks: &[&Mask]) -> Vec<u32> {
    masks.iter().flat_map(|m| m.classes.iter().map(|&c| u32::from(c))).collect()
}
