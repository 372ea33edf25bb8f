//! Segmentation metrics: Dice, Hausdorff distance (max and percentile),
//! and average surface distance, plus model evaluation over a dataset
//! split.
//!
//! Distances use the brute-force O(|boundary_a| * |boundary_b|) pairing;
//! at desk scale that is fast and doubles as its own oracle. Boundaries
//! are four-connected: a foreground pixel with any 4-neighbor outside the
//! foreground (the image border counts as outside).

use crate::error::{HdcError, Result};
use crate::exec;
use crate::model::{forward_main_logits, ModelState};
use crate::synth::{batch_tensor, load_record, DatasetManifest, Split};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub fg: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, fg: Vec<bool>) -> Self {
        assert_eq!(fg.len(), h * w);
        BinaryMask { h, w, fg }
    }

    pub fn from_classes(h: usize, w: usize, classes: &[u8], class: u8) -> Self {
        BinaryMask { h, w, fg: classes.iter().map(|&c| c == class).collect() }
    }

    pub fn is_empty(&self) -> bool {
        !self.fg.iter().any(|&v| v)
    }

    pub fn count(&self) -> usize {
        self.fg.iter().filter(|&&v| v).count()
    }

    /// Foreground pixels with at least one four-neighbor outside the
    /// foreground; the border counts as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.fg[y * self.w + x] {
                    continue;
                }
                let outside = y == 0
                    || x == 0
                    || y == self.h - 1
                    || x == self.w - 1
                    || !self.fg[(y - 1) * self.w + x]
                    || !self.fg[(y + 1) * self.w + x]
                    || !self.fg[y * self.w + x - 1]
                    || !self.fg[y * self.w + x + 1];
                if outside {
                    out.push((y, x));
                }
            }
        }
        out
    }

    pub fn diagonal(&self) -> f64 {
        ((self.h * self.h + self.w * self.w) as f64).sqrt()
    }
}

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(HdcError::contract(format!(
            "mask shape mismatch {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    Ok(())
}

/// Dice similarity `2|a n b| / (|a| + |b|)`; both empty counts as 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_same_shape(a, b)?;
    let inter = a.fg.iter().zip(&b.fg).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Directed distances `min_{q in to} |p - q|` for every `p` in `from`.
fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            let mut best = f64::INFINITY;
            for &(v, u) in to {
                let dy = y as f64 - v as f64;
                let dx = x as f64 - u as f64;
                let d2 = dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th order statistic.
fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Result of a boundary-distance metric; `degenerate` flags an empty mask,
/// in which case the value is the image diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceValue {
    pub value: f64,
    pub degenerate: bool,
}

/// Symmetric Hausdorff distance at a percentile (100 = classic max).
/// Empty masks yield the image diagonal and the degenerate flag.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask, percentile: f64) -> Result<DistanceValue> {
    check_same_shape(a, b)?;
    if !(0.0 < percentile && percentile <= 100.0) {
        return Err(HdcError::contract(format!("percentile must lie in (0, 100], got {percentile}")));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(DistanceValue { value: a.diagonal(), degenerate: true });
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let mut dab = directed_distances(&ba, &bb);
    let mut dba = directed_distances(&bb, &ba);
    dab.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    dba.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let v = nearest_rank(&dab, percentile).max(nearest_rank(&dba, percentile));
    Ok(DistanceValue { value: v, degenerate: false })
}

/// Average symmetric surface distance.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<DistanceValue> {
    check_same_shape(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(DistanceValue { value: a.diagonal(), degenerate: true });
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let dab = directed_distances(&ba, &bb);
    let dba = directed_distances(&bb, &ba);
    let total: f64 = dab.iter().chain(&dba).sum();
    Ok(DistanceValue { value: total / (dab.len() + dba.len()) as f64, degenerate: false })
}

// ── model evaluation ────────────────────────────────────────────────────

/// Per-class row of an evaluation report. Distances average only the
/// non-degenerate samples; `degenerate_count` tracks the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: u8,
    pub dsc: f64,
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
    pub degenerate_count: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub split: Split,
    pub classes: Vec<ClassReport>,
    /// Macro-mean over foreground classes.
    pub mean: ClassReport,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "split,class,dsc,hd,hd95,asd,degenerate_count,n";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let row = |label: String, r: &ClassReport| {
            format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                self.split.as_str(),
                label,
                r.dsc,
                r.hd,
                r.hd95,
                r.asd,
                r.degenerate_count,
                r.n
            )
        };
        for c in &self.classes {
            out.push_str(&row(c.class.to_string(), c));
        }
        out.push_str(&row("mean".to_string(), &self.mean));
        out
    }

    /// Dice of the first foreground class (the headline number for
    /// two-class problems).
    pub fn foreground_dsc(&self) -> f64 {
        self.classes.first().map(|c| c.dsc).unwrap_or(0.0)
    }
}

/// Argmax over channels of a logits tensor -> per-pixel class indices.
pub fn argmax_classes<T: Real>(logits: &crate::tensor::Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for i in 0..plane {
            let mut best = 0usize;
            let mut bv = logits.data()[bi * c * plane + i];
            for ci in 1..c {
                let v = logits.data()[(bi * c + ci) * plane + i];
                if v > bv {
                    bv = v;
                    best = ci;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Evaluate the student's main branch over a labeled split: argmax ->
/// per-class binary masks -> per-sample metrics -> per-class means and a
/// macro-mean row. Samples fan out in parallel.
pub fn evaluate_model<T: Real>(
    state: &ModelState<T>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<MetricReport> {
    let records = manifest.records_for(split);
    if records.is_empty() {
        return Err(HdcError::contract(format!("split '{}' is empty", split.as_str())));
    }
    if records.iter().any(|r| r.mask_path.is_none()) {
        return Err(HdcError::contract(format!("split '{}' is not fully labeled", split.as_str())));
    }
    let classes = state.config.classes as u8;

    struct SampleMetrics {
        per_class: Vec<(f64, Option<(f64, f64, f64)>)>, // dsc, distances if non-degenerate
    }

    let results: Vec<Result<SampleMetrics>> = exec::map_indexed(records.len(), |i| {
        let sample = load_record(manifest, records[i])?;
        let x = batch_tensor::<T>(&[&sample.image])?;
        let logits = forward_main_logits(state, &x)?;
        let pred = argmax_classes(&logits);
        let truth = sample.mask.as_ref().expect("labeled split");

        let mut per_class = Vec::new();
        for class in 1..classes {
            let pm = BinaryMask::from_classes(truth.h, truth.w, &pred, class);
            let tm = BinaryMask::from_classes(truth.h, truth.w, &truth.classes, class);
            let d = dice(&pm, &tm)?;
            let hd = hausdorff(&pm, &tm, 100.0)?;
            let hd95 = hausdorff(&pm, &tm, 95.0)?;
            let a = asd(&pm, &tm)?;
            let dist = if hd.degenerate { None } else { Some((hd.value, hd95.value, a.value)) };
            per_class.push((d, dist));
        }
        Ok(SampleMetrics { per_class })
    });

    let mut class_rows = Vec::new();
    for (ci, class) in (1..classes).enumerate() {
        let mut dsc_sum = 0.0;
        let mut dist_sums = (0.0, 0.0, 0.0);
        let mut ok = 0usize;
        let mut degenerate = 0usize;
        for r in &results {
            let r = r.as_ref().map_err(|e| HdcError::numeric(e.to_string()))?;
            let (d, dist) = &r.per_class[ci];
            dsc_sum += d;
            match dist {
                Some((hd, hd95, a)) => {
                    dist_sums.0 += hd;
                    dist_sums.1 += hd95;
                    dist_sums.2 += a;
                    ok += 1;
                }
                None => degenerate += 1,
            }
        }
        let n = results.len();
        let div = ok.max(1) as f64;
        class_rows.push(ClassReport {
            class,
            dsc: dsc_sum / n as f64,
            hd: dist_sums.0 / div,
            hd95: dist_sums.1 / div,
            asd: dist_sums.2 / div,
            degenerate_count: degenerate,
            n,
        });
    }

    let k = class_rows.len().max(1) as f64;
    let mean = ClassReport {
        class: 0,
        dsc: class_rows.iter().map(|c| c.dsc).sum::<f64>() / k,
        hd: class_rows.iter().map(|c| c.hd).sum::<f64>() / k,
        hd95: class_rows.iter().map(|c| c.hd95).sum::<f64>() / k,
        asd: class_rows.iter().map(|c| c.asd).sum::<f64>() / k,
        degenerate_count: class_rows.iter().map(|c| c.degenerate_count).sum(),
        n: results.len(),
    };
    Ok(MetricReport { split, classes: class_rows, mean })
}
