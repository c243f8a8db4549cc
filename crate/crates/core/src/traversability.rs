//! Step-height traversability scoring, a surface-normal baseline, and
//! precision/recall evaluation against labeled cells.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{disk_offsets, CellIndex, GridError, GridGeometry, MultiLayerGrid, TRAVERSABILITY};
use crate::scalar::GridScalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraversabilityError {
    #[error("invalid traversability parameters: {0}")]
    Params(String),
    #[error("cell ({row}, {col}) has unknown height")]
    UnknownCenter { row: usize, col: usize },
    #[error("prediction and label grids are not aligned")]
    Misaligned,
    #[error("labels must contain at least one positive and one negative cell")]
    DegenerateLabels,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraversabilityParams {
    /// Stride radius in meters.
    pub stride_radius: f64,
    /// Nominal step height in meters.
    pub step_height: f64,
    /// Minimum known cells in the stride disk, center included, to score a cell.
    pub min_support: usize,
    /// Score 0 wherever the stride disk touches an unknown or off-grid cell.
    pub unknown_is_untraversable: bool,
}

impl Default for TraversabilityParams {
    fn default() -> Self {
        Self { stride_radius: 0.20, step_height: 0.20, min_support: 3, unknown_is_untraversable: false }
    }
}

impl TraversabilityParams {
    pub fn validate(&self) -> Result<(), TraversabilityError> {
        if !(self.stride_radius > 0.0 && self.stride_radius.is_finite()) {
            return Err(TraversabilityError::Params("stride_radius must be positive".into()));
        }
        if !(self.step_height > 0.0 && self.step_height.is_finite()) {
            return Err(TraversabilityError::Params("step_height must be positive".into()));
        }
        if self.min_support == 0 {
            return Err(TraversabilityError::Params("min_support must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalsParams {
    pub fit_radius: f64,
    /// Radians.
    pub max_slope: f64,
}

impl Default for NormalsParams {
    fn default() -> Self {
        Self { fit_radius: 0.10, max_slope: 45f64.to_radians() }
    }
}

/// Scores aligned with a grid geometry; NaN marks unscored cells.
#[derive(Debug, Clone)]
pub struct TraversabilityMap<T = f64> {
    pub geometry: GridGeometry<T>,
    pub scores: Vec<T>,
}

impl<T: GridScalar> TraversabilityMap<T> {
    /// Stores the scores as the `traversability` layer of `grid`.
    pub fn write_into(&self, grid: &mut MultiLayerGrid<T>) -> Result<(), TraversabilityError> {
        if grid.geometry() != &self.geometry {
            return Err(TraversabilityError::Misaligned);
        }
        let _ = grid.remove_layer(TRAVERSABILITY);
        grid.insert_layer(TRAVERSABILITY, self.scores.clone())?;
        Ok(())
    }

    pub fn known_count(&self) -> usize {
        self.scores.iter().filter(|v| !v.is_nan()).count()
    }
}

/// Outcome of scanning the stride disk around a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScan<T> {
    /// Largest absolute height difference to a known cell in the disk.
    pub max_diff: T,
    /// Known cells in the disk, center included.
    pub support: usize,
    /// Whether the disk reached an unknown or off-grid cell.
    pub touches_unknown: bool,
}

fn scan<T: GridScalar>(grid: &MultiLayerGrid<T>, offsets: &[(isize, isize)], i: usize) -> StepScan<T> {
    let g = grid.geometry();
    let elev = grid.elevation();
    let c = g.cell_of_linear(i);
    let hi = elev[i];
    let mut out = StepScan { max_diff: T::zero(), support: 0, touches_unknown: false };
    for &(dr, dc) in offsets {
        let r = c.row as isize + dr;
        let col = c.col as isize + dc;
        if r < 0 || col < 0 || r as usize >= g.rows() || col as usize >= g.cols() {
            out.touches_unknown = true;
            continue;
        }
        let hj = elev[r as usize * g.cols() + col as usize];
        if hj.is_nan() {
            out.touches_unknown = true;
            continue;
        }
        out.support += 1;
        let d = (hj - hi).abs();
        if d > out.max_diff {
            out.max_diff = d;
        }
    }
    out
}

/// Largest height difference between cell `c` and the known cells within `stride_radius`.
pub fn max_height_diff<T: GridScalar>(
    grid: &MultiLayerGrid<T>,
    c: CellIndex,
    stride_radius: T,
) -> Result<StepScan<T>, TraversabilityError> {
    let g = grid.geometry();
    if !g.contains(c) {
        return Err(GridError::CellOutOfBounds { row: c.row, col: c.col, rows: g.rows(), cols: g.cols() }.into());
    }
    let i = g.linear(c);
    if grid.elevation()[i].is_nan() {
        return Err(TraversabilityError::UnknownCenter { row: c.row, col: c.col });
    }
    Ok(scan(grid, &disk_offsets(g.resolution(), stride_radius), i))
}

/// `1 - min(h_max / h_star, 1)`.
#[inline]
pub fn traversability_score<T: GridScalar>(h_max: T, h_star: T) -> T {
    T::one() - (h_max / h_star).min(T::one())
}

/// Step-height score for every known cell with enough support.
pub fn score_map<T: GridScalar>(
    grid: &MultiLayerGrid<T>,
    params: &TraversabilityParams,
) -> Result<TraversabilityMap<T>, TraversabilityError> {
    params.validate()?;
    let g = *grid.geometry();
    let offsets = disk_offsets(g.resolution(), T::of(params.stride_radius));
    let h_star = T::of(params.step_height);
    let scores = grid
        .elevation()
        .iter()
        .enumerate()
        .map(|(i, h)| {
            if h.is_nan() {
                return T::nan();
            }
            let s = scan(grid, &offsets, i);
            if s.support < params.min_support {
                T::nan()
            } else if params.unknown_is_untraversable && s.touches_unknown {
                T::zero()
            } else {
                traversability_score(s.max_diff, h_star)
            }
        })
        .collect();
    Ok(TraversabilityMap { geometry: g, scores })
}

/// Slope score from a least-squares plane over the cells within `fit_radius`.
///
/// The plane `z = a x + b y + c` is fit to at least three known cells; its
/// tilt `atan(sqrt(a^2 + b^2))` maps to `1 - min(tilt / max_slope, 1)`.
/// Neighborhoods whose cell centers are collinear stay unknown.
pub fn normals_baseline<T: GridScalar>(
    grid: &MultiLayerGrid<T>,
    params: &NormalsParams,
) -> Result<TraversabilityMap<T>, TraversabilityError> {
    if !(params.fit_radius > 0.0 && params.max_slope > 0.0) {
        return Err(TraversabilityError::Params("fit_radius and max_slope must be positive".into()));
    }
    let g = *grid.geometry();
    let res = g.resolution().f64();
    let offsets = disk_offsets(g.resolution(), T::of(params.fit_radius));
    let elev = grid.elevation();
    let mut scores = vec![T::nan(); g.len()];
    for (i, out) in scores.iter_mut().enumerate() {
        if elev[i].is_nan() {
            continue;
        }
        let c = g.cell_of_linear(i);
        // sums in cell units relative to the center for conditioning
        let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut sz, mut sxz, mut syz) = (0.0, 0.0, 0.0);
        let h0 = elev[i].f64();
        for &(dr, dc) in &offsets {
            let r = c.row as isize + dr;
            let col = c.col as isize + dc;
            if r < 0 || col < 0 || r as usize >= g.rows() || col as usize >= g.cols() {
                continue;
            }
            let h = elev[r as usize * g.cols() + col as usize];
            if h.is_nan() {
                continue;
            }
            let (x, y, z) = (dc as f64, dr as f64, (h.f64() - h0) / res);
            n += 1.0;
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            sz += z;
            sxz += x * z;
            syz += y * z;
        }
        if n < 3.0 {
            continue;
        }
        let det3 = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let a = [[sxx, sxy, sx], [sxy, syy, sy], [sx, sy, n]];
        let det = det3(a);
        if det.abs() < 1e-9 * n * n * n {
            continue;
        }
        let rhs = [sxz, syz, sz];
        let with_col = |k: usize| {
            let mut m = a;
            for r in 0..3 {
                m[r][k] = rhs[r];
            }
            det3(m)
        };
        let ga = with_col(0) / det;
        let gb = with_col(1) / det;
        let tilt = (ga * ga + gb * gb).sqrt().atan();
        *out = T::of(1.0 - (tilt / params.max_slope).min(1.0));
    }
    Ok(TraversabilityMap { geometry: g, scores })
}

/// Ground-truth labels aligned with a grid; `None` cells are not evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid<T = f64> {
    pub geometry: GridGeometry<T>,
    pub labels: Vec<Option<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub results: Vec<ThresholdResult>,
    pub best_threshold: f64,
    pub best_f: f64,
    /// Labeled cells with a known score; only these are counted.
    pub evaluated: usize,
    /// Labeled cells skipped because their score is unknown.
    pub unscored: usize,
}

/// Precision, recall and F-score per threshold, with traversable as the positive class.
///
/// A cell is predicted traversable when its score is at least the threshold.
/// Precision (recall) is 0 when nothing is predicted (labeled) positive.
pub fn evaluate_classification<T: GridScalar>(
    pred: &TraversabilityMap<T>,
    labels: &LabelGrid<T>,
    thresholds: &[f64],
) -> Result<ClassificationReport, TraversabilityError> {
    if pred.geometry != labels.geometry || pred.scores.len() != labels.labels.len() {
        return Err(TraversabilityError::Misaligned);
    }
    let pos = labels.labels.iter().filter(|l| **l == Some(true)).count();
    let neg = labels.labels.iter().filter(|l| **l == Some(false)).count();
    if pos == 0 || neg == 0 {
        return Err(TraversabilityError::DegenerateLabels);
    }
    let pairs: Vec<(f64, bool)> = pred
        .scores
        .iter()
        .zip(&labels.labels)
        .filter_map(|(s, l)| match l {
            Some(l) if !s.is_nan() => Some((s.f64(), *l)),
            _ => None,
        })
        .collect();
    let unscored = pos + neg - pairs.len();
    let mut results = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for &(s, l) in &pairs {
            match (s >= t, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f_score = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        results.push(ThresholdResult {
            threshold: t,
            precision,
            recall,
            f_score,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
        });
    }
    let (best_threshold, best_f) = results
        .iter()
        .fold((f64::NAN, -1.0), |acc, r| if r.f_score > acc.1 { (r.threshold, r.f_score) } else { acc });
    Ok(ClassificationReport { results, best_threshold, best_f: best_f.max(0.0), evaluated: pairs.len(), unscored })
}

/// Thresholds `0, 1/n, ..., 1`.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    (0..=n).map(|k| k as f64 / n as f64).collect()
}

/// Writes `threshold,precision,recall,f` rows.
pub fn write_report_csv<W: Write>(report: &ClassificationReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "threshold,precision,recall,f")?;
    for r in &report.results {
        writeln!(w, "{},{},{},{}", r.threshold, r.precision, r.recall, r.f_score)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::Frame;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize, res: f64, f: impl Fn(f64, f64) -> f64) -> MultiLayerGrid {
        let geom = GridGeometry::new(res, [0.0, 0.0], rows, cols).unwrap();
        let mut g = MultiLayerGrid::new(geom, Frame::Map);
        for i in 0..geom.len() {
            let w = geom.cell_to_world(geom.cell_of_linear(i)).unwrap();
            g.elevation_mut()[i] = f(w[0], w[1]);
        }
        g
    }

    /// Double loop over every cell pair, using metric distance between centers.
    fn naive_scores(g: &MultiLayerGrid, p: &TraversabilityParams) -> Vec<f64> {
        let geom = g.geometry();
        let e = g.elevation();
        let res = geom.resolution();
        let rc = p.stride_radius / res;
        (0..geom.len())
            .map(|i| {
                if e[i].is_nan() {
                    return f64::NAN;
                }
                let a = geom.cell_of_linear(i);
                let (mut m, mut n) = (0.0f64, 0);
                for j in 0..geom.len() {
                    let b = geom.cell_of_linear(j);
                    let dr = a.row as f64 - b.row as f64;
                    let dc = a.col as f64 - b.col as f64;
                    if dr * dr + dc * dc <= rc * rc * (1.0 + 1e-9) && !e[j].is_nan() {
                        n += 1;
                        m = m.max((e[j] - e[i]).abs());
                    }
                }
                if n < p.min_support {
                    f64::NAN
                } else {
                    1.0 - (m / p.step_height).min(1.0)
                }
            })
            .collect()
    }

    fn staircase(x: f64, _y: f64) -> f64 {
        // riser 0.10 m every 0.30 m starting at x = 1.0, wall of 1 m beyond x = 3.0
        if x > 3.0 {
            1.0
        } else if x < 1.0 {
            0.0
        } else {
            (((x - 1.0) / 0.3).floor() + 1.0) * 0.1
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(traversability_score(0.0, 0.2), 1.0);
        assert_eq!(traversability_score(0.3, 0.2), 0.0);
        assert_eq!(traversability_score(0.2, 0.2), 0.0);
        assert_eq!(traversability_score(0.10, 0.20), 0.5);
    }

    #[test]
    fn max_height_diff_examples() {
        let flat = grid(30, 30, 0.02, |_, _| 0.3);
        let s = max_height_diff(&flat, CellIndex::new(15, 15), 0.2).unwrap();
        assert_eq!(s.max_diff, 0.0);
        assert_eq!(s.support, 317);

        let st = grid(30, 200, 0.02, staircase);
        // tread cell 0.1 m before the second riser (x = 1.2)
        let c = st.geometry().world_to_cell([1.2, 0.3]).unwrap();
        assert!((max_height_diff(&st, c, 0.2).unwrap().max_diff - 0.1).abs() < 1e-12);
        // beside the wall
        let c = st.geometry().world_to_cell([2.96, 0.3]).unwrap();
        let d = max_height_diff(&st, c, 0.2).unwrap().max_diff;
        assert!((d - (1.0 - staircase(2.96, 0.0))).abs() < 1e-12);

        let mut holes = flat.clone();
        holes.elevation_mut()[0] = f64::NAN;
        assert_eq!(
            max_height_diff(&holes, CellIndex::new(0, 0), 0.2),
            Err(TraversabilityError::UnknownCenter { row: 0, col: 0 })
        );
    }

    #[test]
    fn staircase_scores() {
        let st = grid(30, 200, 0.02, staircase);
        let m = score_map(&st, &TraversabilityParams::default()).unwrap();
        let at = |x: f64| m.scores[st.geometry().linear(st.geometry().world_to_cell([x, 0.3]).unwrap())];
        assert_eq!(at(0.3), 1.0);
        assert!((at(1.2) - 0.5).abs() < 1e-12);
        assert!((at(0.9) - 0.5).abs() < 1e-12);
        assert_eq!(at(2.98), 0.0);
        assert_eq!(at(3.5), 1.0);
    }

    #[test]
    fn support_rule() {
        let geom = GridGeometry::new(0.1, [0.0, 0.0], 5, 5).unwrap();
        let mut g = MultiLayerGrid::<f64>::new(geom, Frame::Map);
        g.elevation_mut()[12] = 0.5;
        let p = TraversabilityParams { min_support: 2, ..Default::default() };
        assert!(score_map(&g, &p).unwrap().scores[12].is_nan());
        let p = TraversabilityParams { min_support: 1, ..Default::default() };
        assert_eq!(score_map(&g, &p).unwrap().scores[12], 1.0);
        let p = TraversabilityParams { min_support: 1, unknown_is_untraversable: true, ..Default::default() };
        assert_eq!(score_map(&g, &p).unwrap().scores[12], 0.0);
        let empty = MultiLayerGrid::<f64>::new(geom, Frame::Map);
        assert_eq!(score_map(&empty, &TraversabilityParams::default()).unwrap().known_count(), 0);
        let bad = TraversabilityParams { min_support: 0, ..Default::default() };
        assert!(score_map(&g, &bad).is_err());
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let mut g = grid(100, 100, 0.05, |_, _| 0.0);
            for v in g.elevation_mut() {
                *v = if rng.gen_bool(0.1) { f64::NAN } else { rng.gen_range(-0.3..0.3) };
            }
            let p = TraversabilityParams::default();
            let fast = score_map(&g, &p).unwrap();
            let slow = naive_scores(&g, &p);
            assert!(crate::scalar::same_values(&fast.scores, &slow));
        }
    }

    #[test]
    fn normals_examples() {
        let flat = grid(20, 20, 0.02, |_, _| 0.1);
        let n = normals_baseline(&flat, &NormalsParams::default()).unwrap();
        assert!(n.scores.iter().all(|s| (*s - 1.0).abs() < 1e-12));

        let ramp = grid(20, 20, 0.02, |x, _| x * 45f64.to_radians().tan());
        let n = normals_baseline(&ramp, &NormalsParams::default()).unwrap();
        assert!(n.scores.iter().all(|s| s.abs() < 1e-9));

        // a single row of cells is collinear
        let line = grid(1, 20, 0.02, |_, _| 0.0);
        assert_eq!(normals_baseline(&line, &NormalsParams::default()).unwrap().known_count(), 0);
    }

    #[test]
    fn normals_penalize_risers_more_than_step_height() {
        let st = grid(30, 140, 0.02, |x, y| staircase(x, y).min(0.6));
        let step = score_map(&st, &TraversabilityParams::default()).unwrap();
        let norm = normals_baseline(&st, &NormalsParams::default()).unwrap();
        let geom = st.geometry();
        let mut checked = 0;
        for riser in [1.0, 1.3, 1.6, 1.9] {
            for dx in [-0.01, 0.01] {
                let c = geom.world_to_cell([riser + dx, 0.3]).unwrap();
                let k = geom.linear(c);
                assert!(norm.scores[k] < step.scores[k], "x {} normals {} step {}", riser + dx, norm.scores[k], step.scores[k]);
                checked += 1;
            }
        }
        assert_eq!(checked, 8);
    }

    fn labels_from(geom: GridGeometry, v: &[Option<bool>]) -> LabelGrid {
        LabelGrid { geometry: geom, labels: v.to_vec() }
    }

    #[test]
    fn classification_examples() {
        let geom = GridGeometry::new(0.1, [0.0, 0.0], 2, 2).unwrap();
        let labels = labels_from(geom, &[Some(true), Some(false), Some(true), Some(false)]);
        let perfect = TraversabilityMap { geometry: geom, scores: vec![1.0, 0.0, 1.0, 0.0] };
        let r = evaluate_classification(&perfect, &labels, &[0.5]).unwrap();
        assert_eq!((r.results[0].precision, r.results[0].recall, r.results[0].f_score), (1.0, 1.0, 1.0));

        let all_pos = TraversabilityMap { geometry: geom, scores: vec![1.0; 4] };
        let r = evaluate_classification(&all_pos, &labels, &[0.5]).unwrap();
        assert_eq!(r.results[0].recall, 1.0);
        assert_eq!(r.results[0].precision, 0.5);

        let other = GridGeometry::new(0.2, [0.0, 0.0], 2, 2).unwrap();
        let misaligned = TraversabilityMap { geometry: other, scores: vec![1.0; 4] };
        assert_eq!(evaluate_classification(&misaligned, &labels, &[0.5]), Err(TraversabilityError::Misaligned));
        let one_class = labels_from(geom, &[Some(true); 4]);
        assert_eq!(evaluate_classification(&perfect, &one_class, &[0.5]), Err(TraversabilityError::DegenerateLabels));

        let mut csv = Vec::new();
        write_report_csv(&evaluate_classification(&perfect, &labels, &[0.0, 0.5]).unwrap(), &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "threshold,precision,recall,f\n0,0.5,1,0.6666666666666666\n0.5,1,1,1\n");
    }

    proptest! {
        #[test]
        fn report_matches_confusion_oracle(
            scores in proptest::collection::vec(0.0f64..1.0, 16),
            labels in proptest::collection::vec(proptest::option::of(any::<bool>()), 16),
            t in 0.0f64..1.0,
        ) {
            let geom = GridGeometry::new(0.1, [0.0, 0.0], 4, 4).unwrap();
            let pos = labels.iter().filter(|l| **l == Some(true)).count();
            let neg = labels.iter().filter(|l| **l == Some(false)).count();
            prop_assume!(pos > 0 && neg > 0);
            let pred = TraversabilityMap { geometry: geom, scores: scores.clone() };
            let r = evaluate_classification(&pred, &labels_from(geom, &labels), &[t]).unwrap().results[0];
            let mut cm = [[0usize; 2]; 2];
            for (s, l) in scores.iter().zip(&labels) {
                if let Some(l) = l {
                    cm[(*s >= t) as usize][*l as usize] += 1;
                }
            }
            prop_assert_eq!((r.true_positives, r.false_positives, r.false_negatives, r.true_negatives), (cm[1][1], cm[1][0], cm[0][1], cm[0][0]));
            if r.precision + r.recall > 0.0 {
                prop_assert!((r.f_score - 2.0 * r.precision * r.recall / (r.precision + r.recall)).abs() < 1e-15);
            }
        }

        #[test]
        fn score_monotone_in_inputs(h in 0.0f64..1.0, dh in 0.0f64..0.5, hs in 0.01f64..1.0, dhs in 0.0f64..0.5) {
            prop_assert!(traversability_score(h + dh, hs) <= traversability_score(h, hs));
            prop_assert!(traversability_score(h, hs + dhs) >= traversability_score(h, hs));
            let t = traversability_score(h, hs);
            prop_assert!((0.0..=1.0).contains(&t));
        }

        #[test]
        fn scores_shift_invariant_and_monotone_in_radius(seed in 0u64..200, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // heights on a 1/64 lattice so the shift is exact in binary
            let mut g = grid(12, 12, 0.05, |_, _| 0.0);
            for v in g.elevation_mut() {
                *v = if rng.gen_bool(0.1) { f64::NAN } else { rng.gen_range(-16..16) as f64 / 64.0 };
            }
            let shift = (shift * 64.0).round() / 64.0;
            let mut shifted = g.clone();
            for v in shifted.elevation_mut() {
                *v += shift;
            }
            let p = TraversabilityParams { min_support: 1, ..Default::default() };
            let a = score_map(&g, &p).unwrap();
            let b = score_map(&shifted, &p).unwrap();
            prop_assert!(crate::scalar::same_values(&a.scores, &b.scores));
            let wider = score_map(&g, &TraversabilityParams { stride_radius: 0.3, ..p }).unwrap();
            for (w, n) in wider.scores.iter().zip(&a.scores) {
                prop_assert!(w.is_nan() || *w <= *n);
            }
        }
    }
}
