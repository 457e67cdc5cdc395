//! Segmentation metrics: Dice, average perpendicular distance (APD), good
//! contours (GC) and the base/central/apex regional breakdown.
//!
//! Contours are the centers of boundary pixels: foreground pixels with at
//! least one background 4-neighbor, where the image border counts as
//! background. APD is the symmetric mean nearest-point distance between two
//! contours, in millimetres.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::Mask;

/// Default APD threshold (mm) below which a contour is "good".
pub const GC_THRESHOLD_MM: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("mask shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("no contour: the {0} mask is empty")]
    NoContour(&'static str),
    #[error("pixel spacings differ: {0} mm vs {1} mm")]
    SpacingMismatch(f64, f64),
    #[error("stack `{id}` has {pred} predicted and {truth} ground-truth slices")]
    SliceCount { id: String, pred: usize, truth: usize },
}

fn same_shape(a: &Mask, b: &Mask) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch {
            a: a.shape(),
            b: b.shape(),
        });
    }
    Ok(())
}

/// Overlap counts of one slice; the raw material of pooled Dice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub intersection: usize,
    pub pred: usize,
    pub truth: usize,
}

impl OverlapCounts {
    pub fn of(pred: &Mask, truth: &Mask) -> Result<Self, MetricError> {
        same_shape(pred, truth)?;
        let intersection = pred
            .pixels()
            .iter()
            .zip(truth.pixels())
            .filter(|(&p, &t)| p && t)
            .count();
        Ok(Self {
            intersection,
            pred: pred.count(),
            truth: truth.count(),
        })
    }

    /// `2|A∩B| / (|A|+|B|)`, or 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

impl std::ops::Add for OverlapCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            intersection: self.intersection + o.intersection,
            pred: self.pred + o.pred,
            truth: self.truth + o.truth,
        }
    }
}

impl std::iter::Sum for OverlapCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Dice index of two masks; 1.0 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64, MetricError> {
    Ok(OverlapCounts::of(a, b)?.dice())
}

/// Boundary pixels of one mask slice with their physical calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourSet {
    height: usize,
    width: usize,
    points: Vec<(usize, usize)>,
    spacing_mm: f64,
}

impl ContourSet {
    /// Boundary pixel indices `(row, col)` in row-major order.
    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.points
    }

    /// Boundary points as pixel-center coordinates.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().map(|&(r, c)| (r as f64, c as f64))
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn grid(&self) -> Vec<bool> {
        let mut g = vec![false; self.height * self.width];
        for &(r, c) in &self.points {
            g[r * self.width + c] = true;
        }
        g
    }
}

pub fn extract_contour(mask: &Mask, spacing_mm: f64) -> ContourSet {
    let (h, w) = mask.shape();
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                points.push((r, c));
            }
        }
    }
    ContourSet {
        height: h,
        width: w,
        points,
        spacing_mm,
    }
}

/// Squared distance from every grid cell to the nearest `true` cell, or
/// `None` everywhere if there is no such cell. Exact (lower envelope of
/// parabolas, separable over rows and columns).
fn squared_distance_transform(features: &[bool], height: usize, width: usize) -> Vec<Option<f64>> {
    let mut cols = vec![None; height * width];
    let mut f = vec![None; height.max(width)];
    let mut d = vec![None; height.max(width)];
    for c in 0..width {
        for r in 0..height {
            f[r] = features[r * width + c].then_some(0.0);
        }
        envelope_1d(&f[..height], &mut d[..height]);
        for r in 0..height {
            cols[r * width + c] = d[r];
        }
    }
    let mut out = vec![None; height * width];
    for r in 0..height {
        envelope_1d(&cols[r * width..(r + 1) * width], &mut out[r * width..(r + 1) * width]);
    }
    out
}

/// `d[q] = min_p (q - p)^2 + f[p]` over the finite entries of `f`.
fn envelope_1d(f: &[Option<f64>], d: &mut [Option<f64>]) {
    let sites: Vec<(f64, f64)> = f
        .iter()
        .enumerate()
        .filter_map(|(p, v)| v.map(|v| (p as f64, v)))
        .collect();
    if sites.is_empty() {
        d.fill(None);
        return;
    }
    // hull[k] is the k-th parabola of the envelope; bounds[k] where it starts.
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len());
    for &(q, fq) in &sites {
        loop {
            let Some(&(p, fp)) = hull.last() else {
                hull.push((q, fq));
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((fq + q * q) - (fp + p * p)) / (2.0 * (q - p));
            if s <= *bounds.last().unwrap() {
                hull.pop();
                bounds.pop();
            } else {
                hull.push((q, fq));
                bounds.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        let q = q as f64;
        while k + 1 < hull.len() && bounds[k + 1] < q {
            k += 1;
        }
        let (p, fp) = hull[k];
        *out = Some((q - p) * (q - p) + fp);
    }
}

/// Mean distance (pixels) from each point of `from` to the nearest point of `to`.
fn mean_nearest(from: &ContourSet, to: &ContourSet) -> f64 {
    let dt = squared_distance_transform(&to.grid(), to.height, to.width);
    let total: f64 = from
        .points
        .iter()
        .map(|&(r, c)| dt[r * to.width + c].expect("target contour is non-empty").sqrt())
        .sum();
    total / from.len() as f64
}

/// Symmetric average perpendicular distance in millimetres:
/// `½ (mean_p min_t |p-t| + mean_t min_p |t-p|) · spacing`.
pub fn apd(pred: &ContourSet, truth: &ContourSet) -> Result<f64, MetricError> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(MetricError::ShapeMismatch {
            a: (pred.height, pred.width),
            b: (truth.height, truth.width),
        });
    }
    if pred.spacing_mm != truth.spacing_mm {
        return Err(MetricError::SpacingMismatch(pred.spacing_mm, truth.spacing_mm));
    }
    if pred.is_empty() {
        return Err(MetricError::NoContour("predicted"));
    }
    if truth.is_empty() {
        return Err(MetricError::NoContour("ground-truth"));
    }
    let px = 0.5 * (mean_nearest(pred, truth) + mean_nearest(truth, pred));
    Ok(px * truth.spacing_mm)
}

/// Outcome of the good-contour rule over the evaluated slices.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodContours {
    /// `100 · good / evaluated`; `None` when nothing was evaluated.
    pub percentage: Option<f64>,
    pub flags: Vec<bool>,
}

/// Applies the good-contour rule to slices with non-empty ground truth.
/// `None` marks a slice without a predicted contour, which is never good.
/// A slice is good iff its APD is strictly below `threshold_mm`.
pub fn good_contours(apds: &[Option<f64>], threshold_mm: f64) -> GoodContours {
    let flags: Vec<bool> = apds.iter().map(|a| a.is_some_and(|a| a < threshold_mm)).collect();
    let percentage =
        (!flags.is_empty()).then(|| 100.0 * flags.iter().filter(|&&g| g).count() as f64 / flags.len() as f64);
    GoodContours { percentage, flags }
}

/// Pooled Dice per region. `base[k-1]` pools the first `k` slices of every
/// stack, `apex[k-1]` the last `k`, and `central` every slice outside
/// Base-3 and Apex-3. A region with no slices is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionalDice {
    pub base_1: Option<f64>,
    pub base_2: Option<f64>,
    pub base_3: Option<f64>,
    pub central: Option<f64>,
    pub apex_3: Option<f64>,
    pub apex_2: Option<f64>,
    pub apex_1: Option<f64>,
}

/// Region membership of a slice index `i` (0 = base) in a stack of `s` slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Within the first `k` slices.
    Base(usize),
    /// Within the last `k` slices.
    Apex(usize),
    Central,
}

impl Region {
    pub fn contains(self, i: usize, s: usize) -> bool {
        match self {
            Region::Base(k) => i < k.min(s),
            Region::Apex(k) => i + k.min(s) >= s,
            Region::Central => !Region::Base(3).contains(i, s) && !Region::Apex(3).contains(i, s),
        }
    }
}

/// Pools overlap counts of all slices in `region` across stacks.
pub fn pooled(stacks: &[Vec<OverlapCounts>], region: Region) -> Option<OverlapCounts> {
    let mut any = false;
    let mut total = OverlapCounts::default();
    for stack in stacks {
        for (i, c) in stack.iter().enumerate() {
            if region.contains(i, stack.len()) {
                any = true;
                total = total + *c;
            }
        }
    }
    any.then_some(total)
}

pub fn regional_breakdown(stacks: &[Vec<OverlapCounts>]) -> RegionalDice {
    let d = |r| pooled(stacks, r).map(|c| c.dice());
    RegionalDice {
        base_1: d(Region::Base(1)),
        base_2: d(Region::Base(2)),
        base_3: d(Region::Base(3)),
        central: d(Region::Central),
        apex_3: d(Region::Apex(3)),
        apex_2: d(Region::Apex(2)),
        apex_1: d(Region::Apex(1)),
    }
}

/// Predicted and ground-truth masks of one stack, base first.
#[derive(Debug, Clone)]
pub struct StackPrediction {
    pub id: String,
    pub spacing_mm: f64,
    pub pred: Vec<Mask>,
    pub truth: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub stack: String,
    /// 1-based slice position, 1 = base.
    pub slice: usize,
    pub dice: f64,
    pub has_truth: bool,
    pub has_prediction: bool,
    /// `None` unless both contours exist.
    pub apd_mm: Option<f64>,
    /// `None` for slices without ground truth, which are not evaluated.
    pub good: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub slices: usize,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub evaluated_slices: usize,
    pub good_slices: usize,
    pub gc_percent: Option<f64>,
    /// APD over good contours only.
    pub apd_good_mean_mm: Option<f64>,
    pub apd_good_sd_mm: Option<f64>,
    /// APD over every slice where both contours exist.
    pub apd_all_mean_mm: Option<f64>,
    pub apd_all_sd_mm: Option<f64>,
}

/// Per-slice rows, aggregate statistics and the regional table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gc_threshold_mm: f64,
    pub slices: Vec<SliceRow>,
    pub aggregate: Aggregate,
    pub regional: RegionalDice,
}

/// Mean and sample standard deviation (n - 1; 0 for a single value).
fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

/// Evaluates predictions. Dice statistics cover every slice; GC and APD
/// cover slices with non-empty ground truth.
pub fn evaluate(stacks: &[StackPrediction], gc_threshold_mm: f64) -> Result<MetricReport, MetricError> {
    let mut rows = Vec::new();
    let mut counts = Vec::with_capacity(stacks.len());
    for st in stacks {
        if st.pred.len() != st.truth.len() {
            return Err(MetricError::SliceCount {
                id: st.id.clone(),
                pred: st.pred.len(),
                truth: st.truth.len(),
            });
        }
        let mut per_stack = Vec::with_capacity(st.pred.len());
        for (i, (p, t)) in st.pred.iter().zip(&st.truth).enumerate() {
            let c = OverlapCounts::of(p, t)?;
            per_stack.push(c);
            let (pc, tc) = (extract_contour(p, st.spacing_mm), extract_contour(t, st.spacing_mm));
            let apd_mm = if pc.is_empty() || tc.is_empty() {
                None
            } else {
                Some(apd(&pc, &tc)?)
            };
            let has_truth = !tc.is_empty();
            rows.push(SliceRow {
                stack: st.id.clone(),
                slice: i + 1,
                dice: c.dice(),
                has_truth,
                has_prediction: !pc.is_empty(),
                apd_mm,
                good: has_truth.then(|| apd_mm.is_some_and(|a| a < gc_threshold_mm)),
            });
        }
        counts.push(per_stack);
    }

    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let evaluated: Vec<Option<f64>> = rows.iter().filter(|r| r.has_truth).map(|r| r.apd_mm).collect();
    let gc = good_contours(&evaluated, gc_threshold_mm);
    let apd_all: Vec<f64> = evaluated.iter().flatten().copied().collect();
    let apd_good: Vec<f64> = apd_all.iter().copied().filter(|&a| a < gc_threshold_mm).collect();
    let (dice_mean, dice_sd) = mean_sd(&dice).unwrap_or((f64::NAN, f64::NAN));
    let good = mean_sd(&apd_good);
    let all = mean_sd(&apd_all);
    Ok(MetricReport {
        gc_threshold_mm,
        aggregate: Aggregate {
            slices: rows.len(),
            dice_mean,
            dice_sd,
            evaluated_slices: evaluated.len(),
            good_slices: gc.flags.iter().filter(|&&g| g).count(),
            gc_percent: gc.percentage,
            apd_good_mean_mm: good.map(|g| g.0),
            apd_good_sd_mm: good.map(|g| g.1),
            apd_all_mean_mm: all.map(|a| a.0),
            apd_all_sd_mm: all.map(|a| a.1),
        },
        slices: rows,
        regional: regional_breakdown(&counts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, r0: usize, c0: usize, k: usize) -> Mask {
        Mask::from_fn(n, n, |r, c| (r0..r0 + k).contains(&r) && (c0..c0 + k).contains(&c))
    }

    #[test]
    fn dice_examples() {
        let a = Mask::from_bytes(2, 2, &[1, 1, 0, 0]);
        let b = Mask::from_bytes(2, 2, &[1, 0, 0, 0]);
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = Mask::from_bytes(2, 2, &[0, 0, 1, 1]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(matches!(
            dice(&a, &Mask::empty(3, 2)),
            Err(MetricError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn contour_examples() {
        let mut one = Mask::empty(5, 5);
        one.set(2, 3, true);
        assert_eq!(extract_contour(&one, 1.0).pixels(), &[(2, 3)]);

        let sq = extract_contour(&square(5, 1, 1, 3), 1.0);
        assert_eq!(sq.len(), 8);
        assert!(!sq.pixels().contains(&(2, 2)));

        let full = extract_contour(&Mask::from_fn(4, 4, |_, _| true), 1.0);
        assert_eq!(full.len(), 12);
        assert!(full.pixels().iter().all(|&(r, c)| r == 0 || c == 0 || r == 3 || c == 3));

        assert!(extract_contour(&Mask::empty(4, 4), 1.0).is_empty());
    }

    #[test]
    fn apd_examples() {
        let mut a = Mask::empty(6, 6);
        a.set(1, 1, true);
        let mut b = Mask::empty(6, 6);
        b.set(3, 1, true);
        let (ca, cb) = (extract_contour(&a, 1.0), extract_contour(&b, 1.0));
        assert_eq!(apd(&ca, &cb).unwrap(), 2.0);
        assert_eq!(apd(&ca, &ca).unwrap(), 0.0);
        let scaled = (extract_contour(&a, 2.5), extract_contour(&b, 2.5));
        assert_eq!(apd(&scaled.0, &scaled.1).unwrap(), 5.0);
        let empty = extract_contour(&Mask::empty(6, 6), 1.0);
        assert_eq!(apd(&empty, &cb), Err(MetricError::NoContour("predicted")));
        assert_eq!(apd(&ca, &empty), Err(MetricError::NoContour("ground-truth")));
    }

    #[test]
    fn gc_threshold_is_strict() {
        let gc = good_contours(&[Some(1.0), Some(4.9), Some(5.0), Some(7.2)], 5.0);
        assert_eq!(gc.percentage, Some(50.0));
        assert_eq!(gc.flags, [true, true, false, false]);
        assert_eq!(good_contours(&[Some(0.0); 3], 5.0).percentage, Some(100.0));
        assert_eq!(good_contours(&[Some(0.0), None], 5.0).flags, [true, false]);
        assert_eq!(good_contours(&[], 5.0).percentage, None);
    }

    #[test]
    fn region_membership_for_eight_slices() {
        let members = |r: Region| (0..8).filter(|&i| r.contains(i, 8)).collect::<Vec<_>>();
        assert_eq!(members(Region::Central), [3, 4]);
        assert_eq!(members(Region::Base(2)), [0, 1]);
        assert_eq!(members(Region::Apex(1)), [7]);
        assert_eq!(members(Region::Apex(3)), [5, 6, 7]);
        assert!((0..6).all(|i| !Region::Central.contains(i, 6)));
    }

    #[test]
    fn short_stacks_have_no_central_region() {
        let stacks = vec![vec![OverlapCounts::default(); 5]];
        let r = regional_breakdown(&stacks);
        assert_eq!(r.central, None);
        assert_eq!(r.base_1, Some(1.0));
    }

    #[test]
    fn oracle_report_is_perfect() {
        let truth: Vec<Mask> = (0..8).map(|i| square(16, 2, 2, 10 - i)).collect();
        let report = evaluate(
            &[StackPrediction {
                id: "s".into(),
                spacing_mm: 2.0,
                pred: truth.clone(),
                truth,
            }],
            GC_THRESHOLD_MM,
        )
        .unwrap();
        assert_eq!(report.aggregate.dice_mean, 1.0);
        assert_eq!(report.aggregate.gc_percent, Some(100.0));
        assert_eq!(report.aggregate.apd_good_mean_mm, Some(0.0));
        assert_eq!(report.regional.central, Some(1.0));
    }
}
