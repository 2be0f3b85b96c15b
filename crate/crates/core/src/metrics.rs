//! Per-slice segmentation metrics and median aggregation.
//!
//! Ratio metrics with a zero denominator are reported as 1.0. Hausdorff
//! distance is measured between pixel centres over all foreground pixels; a
//! one-sided empty pair scores the image diagonal and both-empty scores 0,
//! with the emptiness recorded in the record flags.

use std::fmt::Write as _;

use crate::error::{arg_err, shape_err, Result};

/// Borrowed binary slice, row-major; any nonzero value is foreground.
#[derive(Clone, Copy, Debug)]
pub struct MaskView<'a> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [u8],
}

impl<'a> MaskView<'a> {
    pub fn new(height: usize, width: usize, data: &'a [u8]) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!(
                "mask of {} values cannot be viewed as {height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    fn check_same(&self, other: &MaskView<'_>) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

pub fn confusion(pred: MaskView<'_>, gt: MaskView<'_>) -> Result<ConfusionCounts> {
    pred.check_same(&gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hausdorff {
    pub distance_mm: f64,
    pub pred_empty: bool,
    pub gt_empty: bool,
}

/// Symmetric Hausdorff distance in mm for a square pixel grid of `spacing` mm.
pub fn hausdorff(pred: MaskView<'_>, gt: MaskView<'_>, spacing: f64) -> Result<Hausdorff> {
    pred.check_same(&gt)?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(arg_err!("pixel spacing must be positive, got {spacing}"));
    }
    let (pred_empty, gt_empty) = (pred.is_empty(), gt.is_empty());
    let distance_mm = match (pred_empty, gt_empty) {
        (true, true) => 0.0,
        (true, false) | (false, true) => {
            let (h, w) = (pred.height as f64, pred.width as f64);
            spacing * (h * h + w * w).sqrt()
        }
        (false, false) => {
            let d2 = directed_sq(pred, gt).max(directed_sq(gt, pred));
            spacing * (d2 as f64).sqrt()
        }
    };
    Ok(Hausdorff {
        distance_mm,
        pred_empty,
        gt_empty,
    })
}

/// Largest squared pixel distance from a foreground pixel of `a` to the
/// nearest foreground pixel of `b` (`b` nonempty).
fn directed_sq(a: MaskView<'_>, b: MaskView<'_>) -> i64 {
    let dt = squared_distance_transform(b);
    a.data
        .iter()
        .zip(&dt)
        .filter(|(&v, _)| v != 0)
        .map(|(_, &d)| d)
        .max()
        .unwrap_or(0)
}

/// Exact squared Euclidean distance to the nearest foreground pixel, in
/// integer pixel units (separable lower-envelope transform).
pub fn squared_distance_transform(mask: MaskView<'_>) -> Vec<i64> {
    let (h, w) = (mask.height, mask.width);
    let far = (h * h + w * w) as i64 + 1;
    let mut cols = vec![far; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask.data[y * w + x] != 0 {
                last = Some(y);
            }
            if let Some(l) = last {
                cols[y * w + x] = ((y - l) * (y - l)) as i64;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if mask.data[y * w + x] != 0 {
                last = Some(y);
            }
            if let Some(l) = last {
                let d = ((l - y) * (l - y)) as i64;
                cols[y * w + x] = cols[y * w + x].min(d);
            }
        }
    }
    let mut out = vec![0; h * w];
    let mut row = vec![0i64; w];
    for y in 0..h {
        row.copy_from_slice(&cols[y * w..(y + 1) * w]);
        lower_envelope(&row, &mut out[y * w..(y + 1) * w]);
    }
    out
}

/// `out[q] = min_p f[p] + (q - p)^2`, with parabola intersections compared
/// as exact fractions.
fn lower_envelope(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    // Boundaries between envelope segments: z[k] = num/den, None = -inf.
    let mut z: Vec<Option<(i128, i128)>> = vec![None; n];
    let key = |p: usize| f[p] as i128 + (p * p) as i128;
    let cross = |q: usize, p: usize| (key(q) - key(p), 2 * (q as i128 - p as i128));
    let le = |a: (i128, i128), b: Option<(i128, i128)>| match b {
        None => false,
        Some(b) => a.0 * b.1 <= b.0 * a.1,
    };
    let mut k = 0usize;
    for q in 1..n {
        let mut s = cross(q, v[k]);
        while le(s, z[k]) {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = Some(s);
    }
    let top = k;
    let mut k = 0usize;
    for (q, slot) in out.iter_mut().enumerate() {
        while k < top && z[k + 1].is_some_and(|(num, den)| num < q as i128 * den) {
            k += 1;
        }
        let p = v[k];
        let d = q as i64 - p as i64;
        *slot = f[p] + d * d;
    }
}

/// O(|A|·|B|) reference for `hausdorff` used by tests and the acceptance suite.
pub fn hausdorff_brute_force(pred: MaskView<'_>, gt: MaskView<'_>, spacing: f64) -> Result<f64> {
    pred.check_same(&gt)?;
    let points = |m: MaskView<'_>| -> Vec<(i64, i64)> {
        (0..m.height * m.width)
            .filter(|&i| m.data[i] != 0)
            .map(|i| ((i / m.width) as i64, (i % m.width) as i64))
            .collect()
    };
    let (a, b) = (points(pred), points(gt));
    if a.is_empty() && b.is_empty() {
        return Ok(0.0);
    }
    if a.is_empty() || b.is_empty() {
        let (h, w) = (pred.height as f64, pred.width as f64);
        return Ok(spacing * (h * h + w * w).sqrt());
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> f64 {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| {
                        spacing * ((((y - v) * (y - v) + (x - u) * (x - u)) as f64).sqrt())
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Ok(directed(&a, &b).max(directed(&b, &a)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub slice_id: String,
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hausdorff_mm: f64,
    pub gt_empty: bool,
    pub pred_empty: bool,
}

impl MetricsRecord {
    pub fn compute(
        slice_id: &str,
        pred: MaskView<'_>,
        gt: MaskView<'_>,
        spacing: f64,
    ) -> Result<Self> {
        let c = confusion(pred, gt)?;
        let hd = hausdorff(pred, gt, spacing)?;
        Ok(Self {
            slice_id: slice_id.to_string(),
            dsc: dsc(&c),
            sensitivity: sensitivity(&c),
            specificity: specificity(&c),
            hausdorff_mm: hd.distance_mm,
            gt_empty: hd.gt_empty,
            pred_empty: hd.pred_empty,
        })
    }
}

/// Per-metric medians, in summary-table column order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hausdorff_mm: f64,
}

/// Median with the even-count rule (mean of the two middle values).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(arg_err!("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(arg_err!("cannot aggregate zero metric records"));
    }
    let col = |f: fn(&MetricsRecord) -> f64| median(&records.iter().map(f).collect::<Vec<_>>());
    Ok(Summary {
        dsc: col(|r| r.dsc)?,
        sensitivity: col(|r| r.sensitivity)?,
        specificity: col(|r| r.specificity)?,
        hausdorff_mm: col(|r| r.hausdorff_mm)?,
    })
}

pub const METRICS_HEADER: &str =
    "slice_id,dsc,sensitivity,specificity,hausdorff_mm,gt_empty,pred_empty";

/// Metrics CSV: one row per record plus a trailing `MEDIAN` row.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    let summary = aggregate(records)?;
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.slice_id,
            r.dsc,
            r.sensitivity,
            r.specificity,
            r.hausdorff_mm,
            u8::from(r.gt_empty),
            u8::from(r.pred_empty)
        );
    }
    let _ = writeln!(
        out,
        "MEDIAN,{:.6},{:.6},{:.6},{:.6},,",
        summary.dsc, summary.sensitivity, summary.specificity, summary.hausdorff_mm
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(h: usize, w: usize, d: &[u8]) -> MaskView<'_> {
        MaskView::new(h, w, d).unwrap()
    }

    fn single(h: usize, w: usize, y: usize, x: usize) -> Vec<u8> {
        let mut v = vec![0; h * w];
        v[y * w + x] = 1;
        v
    }

    #[test]
    fn confusion_examples() {
        let ones = [1u8; 4];
        let zeros = [0u8; 4];
        let c = confusion(view(2, 2, &ones), view(2, 2, &ones)).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 4,
                ..Default::default()
            }
        );
        let c = confusion(view(2, 2, &ones), view(2, 2, &zeros)).unwrap();
        assert_eq!(c.fp, 4);
        let c = confusion(view(2, 2, &[1, 0, 1, 0]), view(2, 2, &[1, 1, 0, 0])).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(dsc(&c), 0.5);
        assert!(confusion(view(2, 2, &ones), view(1, 4, &ones)).is_err());
    }

    #[test]
    fn ratio_metrics_and_empty_conventions() {
        let a = [1u8, 1, 0, 0];
        let c = confusion(view(2, 2, &a), view(2, 2, &a)).unwrap();
        assert_eq!((dsc(&c), sensitivity(&c)), (1.0, 1.0));
        let c = confusion(view(2, 2, &[1, 0, 0, 0]), view(2, 2, &[0, 0, 0, 1])).unwrap();
        assert_eq!(dsc(&c), 0.0);
        let empty = confusion(view(2, 2, &[0; 4]), view(2, 2, &[0; 4])).unwrap();
        assert_eq!(
            (dsc(&empty), sensitivity(&empty), specificity(&empty)),
            (1.0, 1.0, 1.0)
        );
        let full = confusion(view(2, 2, &[1; 4]), view(2, 2, &[1; 4])).unwrap();
        assert_eq!(specificity(&full), 1.0);
    }

    #[test]
    fn hausdorff_examples() {
        let a = single(5, 5, 0, 0);
        let b = single(5, 5, 3, 4);
        assert_eq!(
            hausdorff(view(5, 5, &a), view(5, 5, &b), 1.0)
                .unwrap()
                .distance_mm,
            5.0
        );
        assert_eq!(
            hausdorff(view(5, 5, &a), view(5, 5, &a), 1.0)
                .unwrap()
                .distance_mm,
            0.0
        );

        let mut p = vec![0u8; 4];
        p[0] = 1;
        p[3] = 1;
        let g = single(1, 4, 0, 1);
        assert_eq!(directed_sq(view(1, 4, &p), view(1, 4, &g)), 4);
        assert_eq!(directed_sq(view(1, 4, &g), view(1, 4, &p)), 1);
        assert_eq!(
            hausdorff(view(1, 4, &p), view(1, 4, &g), 1.0)
                .unwrap()
                .distance_mm,
            2.0
        );
        assert_eq!(
            hausdorff(view(5, 5, &a), view(5, 5, &b), 0.5)
                .unwrap()
                .distance_mm,
            2.5
        );
    }

    #[test]
    fn hausdorff_degenerate_cases() {
        let empty = vec![0u8; 12];
        let one = single(3, 4, 1, 1);
        let h = hausdorff(view(3, 4, &empty), view(3, 4, &one), 2.0).unwrap();
        assert_eq!(h.distance_mm, 10.0);
        assert!(h.pred_empty && !h.gt_empty);
        let h = hausdorff(view(3, 4, &empty), view(3, 4, &empty), 1.0).unwrap();
        assert_eq!(h.distance_mm, 0.0);
        assert!(h.pred_empty && h.gt_empty);
        assert!(hausdorff(view(3, 4, &one), view(3, 4, &one), 0.0).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let density = rng.random_range(0.02..0.6);
            let mut m: Vec<u8> = (0..h * w)
                .map(|_| u8::from(rng.random_bool(density)))
                .collect();
            m[rng.random_range(0..h * w)] = 1;
            let dt = squared_distance_transform(view(h, w, &m));
            for y in 0..h {
                for x in 0..w {
                    let best = (0..h * w)
                        .filter(|&i| m[i] != 0)
                        .map(|i| {
                            let (v, u) = ((i / w) as i64, (i % w) as i64);
                            (y as i64 - v).pow(2) + (x as i64 - u).pow(2)
                        })
                        .min()
                        .unwrap();
                    assert_eq!(dt[y * w + x], best, "{h}x{w} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn hausdorff_matches_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let d: f64 = rng.random_range(0.0..0.3);
            let a: Vec<u8> = (0..256).map(|_| u8::from(rng.random_bool(d))).collect();
            let b: Vec<u8> = (0..256).map(|_| u8::from(rng.random_bool(d))).collect();
            let (a, b) = (view(16, 16, &a), view(16, 16, &b));
            let fast = hausdorff(a, b, 0.7).unwrap().distance_mm;
            assert_eq!(fast, hausdorff_brute_force(a, b, 0.7).unwrap());
            assert_eq!(fast, hausdorff(b, a, 0.7).unwrap().distance_mm);
        }
    }

    #[test]
    fn median_and_aggregate() {
        assert_eq!(median(&[0.2, 0.6, 1.0]).unwrap(), 0.6);
        assert_eq!(median(&[0.8, 0.2, 0.6, 0.4]).unwrap(), 0.5);
        assert!(median(&[]).is_err());
        assert!(aggregate(&[]).is_err());
        let r = MetricsRecord {
            slice_id: "v0_s0".into(),
            dsc: 0.3,
            sensitivity: 0.4,
            specificity: 0.9,
            hausdorff_mm: 3.0,
            gt_empty: false,
            pred_empty: false,
        };
        let s = aggregate(std::slice::from_ref(&r)).unwrap();
        assert_eq!(
            (s.dsc, s.sensitivity, s.specificity, s.hausdorff_mm),
            (0.3, 0.4, 0.9, 3.0)
        );
        let csv = metrics_csv(&[r]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "v0_s0,0.300000,0.400000,0.900000,3.000000,0,0");
        assert!(lines[2].starts_with("MEDIAN,0.300000"));
    }
}
