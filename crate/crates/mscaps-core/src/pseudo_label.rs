//! Unsupervised selection of reliable training pixels from the difference
//! image via hierarchical fuzzy c-means clustering.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{err_arg, err_degenerate, Result};
use crate::fmath;
use crate::preprocessing::{box_mean, DifferenceImage};

/// Stage defaults: fuzzifier, centroid-shift tolerance, iteration cap, and
/// the membership gate above which a middle-cluster pixel is promoted.
const FCM_M: f64 = 2.0;
const FCM_TOL: f64 = 1e-6;
const FCM_MAX_ITER: usize = 100;
const PROMOTION_GATE: f64 = 0.99;

/// Per-pixel pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Unchanged,
    Changed,
    /// Ambiguous; excluded from training.
    Intermediate,
}

/// Pseudo-label per DI pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Vec<Label>,
    h: usize,
    w: usize,
}

impl LabelMap {
    /// Wraps per-pixel labels (e.g. read back from a file).
    pub fn from_labels(labels: Vec<Label>, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || labels.len() != h * w {
            return Err(err_arg!("label count {} does not match {h}x{w}", labels.len()));
        }
        Ok(LabelMap { labels, h, w })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn at(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.w + col]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// One labeled training pixel; label 1 = changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    pub center: (usize, usize),
    pub label: u8,
}

/// Balanced draw of reliable pixels, deterministic given its seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    pub seed: u64,
}

/// One fuzzy c-means run: final centroids, per-point memberships (row-major
/// n x c, rows summing to 1), and the objective value after each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FcmRun {
    pub centroids: Vec<f64>,
    pub memberships: Vec<f64>,
    pub objectives: Vec<f64>,
}

fn sorted_distinct(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    sorted.dedup();
    sorted
}

/// Membership row for one point given squared distances; a point coinciding
/// exactly with a centroid gets membership 1 at the first such cluster.
fn membership_row(dists_sq: &[f64], exponent: f64, row: &mut [f64]) {
    if let Some(hit) = dists_sq.iter().position(|&d| d == 0.0) {
        row.fill(0.0);
        row[hit] = 1.0;
        return;
    }
    for (i, &di) in dists_sq.iter().enumerate() {
        let mut denom = 0.0;
        for &dj in dists_sq {
            denom += fmath::powf(di / dj, exponent);
        }
        row[i] = 1.0 / denom;
    }
}

/// Standard alternating fuzzy c-means on scalar values, with evenly spaced
/// quantile initialization (falling back to quantiles of the distinct values
/// when the data's ties collide). Deterministic; `seed` is accepted for
/// interface stability but the 1-D initialization never needs it.
pub fn fcm_run(
    values: &[f64],
    c: usize,
    m: f64,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<FcmRun> {
    let _ = seed;
    if c < 2 {
        return Err(err_arg!("cluster count must be at least 2, got {c}"));
    }
    if !(m > 1.0) {
        return Err(err_arg!("fuzzifier must exceed 1, got {m}"));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(err_arg!("tolerance must be positive and max_iter >= 1"));
    }
    let n = values.len();
    let distinct = sorted_distinct(values);
    if distinct.len() < c {
        return Err(err_degenerate!(
            "{c} clusters need {c} distinct values, data has {}",
            distinct.len()
        ));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let quantile_mid = |data: &[f64], i: usize| {
        let idx = ((2 * i + 1) * data.len()) / (2 * c);
        data[idx.min(data.len() - 1)]
    };
    let mut centroids: Vec<f64> = (0..c).map(|i| quantile_mid(&sorted, i)).collect();
    let collided = centroids.windows(2).any(|w| w[0] == w[1]);
    if collided {
        centroids = (0..c).map(|i| quantile_mid(&distinct, i)).collect();
    }

    let exponent = 1.0 / (m - 1.0);
    let mut memberships = vec![0.0f64; n * c];
    let mut dists = vec![0.0f64; c];
    let mut objectives = Vec::new();

    for _ in 0..max_iter {
        for (k, &x) in values.iter().enumerate() {
            for (d, &v) in dists.iter_mut().zip(&centroids) {
                *d = (x - v) * (x - v);
            }
            membership_row(&dists, exponent, &mut memberships[k * c..(k + 1) * c]);
        }

        let mut num = vec![0.0f64; c];
        let mut den = vec![0.0f64; c];
        for (k, &x) in values.iter().enumerate() {
            for (i, (nu, de)) in num.iter_mut().zip(den.iter_mut()).enumerate() {
                let um = fmath::powf(memberships[k * c + i], m);
                *nu += um * x;
                *de += um;
            }
        }
        let mut shift = 0.0f64;
        for (i, v) in centroids.iter_mut().enumerate() {
            if den[i] > 0.0 {
                let next = num[i] / den[i];
                shift = shift.max((next - *v).abs());
                *v = next;
            }
        }

        let mut objective = 0.0;
        for (k, &x) in values.iter().enumerate() {
            for (i, &v) in centroids.iter().enumerate() {
                objective +=
                    fmath::powf(memberships[k * c + i], m) * (x - v) * (x - v);
            }
        }
        objectives.push(objective);

        if shift < tol {
            break;
        }
    }

    // Memberships above lag the final centroid update; re-derive them so the
    // returned pair is self-consistent (zero-distance convention included).
    for (k, &x) in values.iter().enumerate() {
        for (d, &v) in dists.iter_mut().zip(&centroids) {
            *d = (x - v) * (x - v);
        }
        membership_row(&dists, exponent, &mut memberships[k * c..(k + 1) * c]);
    }

    Ok(FcmRun { centroids, memberships, objectives })
}

/// Fuzzy c-means centroids and memberships; see [`fcm_run`] for the trace
/// variant.
pub fn fcm(
    values: &[f64],
    c: usize,
    m: f64,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let run = fcm_run(values, c, m, tol, max_iter, seed)?;
    Ok((run.centroids, run.memberships))
}

/// Cluster indices ordered by ascending centroid value.
fn order_by_centroid(centroids: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| centroids[a].partial_cmp(&centroids[b]).expect("finite"));
    order
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Two-stage clustering of the DI: a 3-cluster pass maps the extreme
/// clusters to UNCHANGED/CHANGED and sends the middle cluster to a second
/// 2-cluster pass. Pool pixels the second pass clusters with near
/// certainty (membership > 0.99) are promoted to the reliable class whose
/// stage-1 centroid is nearest (ties toward UNCHANGED); the rest stay
/// INTERMEDIATE. A DI with only two distinct values degenerates to one
/// 2-cluster pass with no INTERMEDIATE pixels.
pub fn hierarchical_label(di: &DifferenceImage) -> Result<LabelMap> {
    let (h, w) = di.dims();
    let values = di.values();
    let distinct = sorted_distinct(values);
    if distinct.len() < 2 {
        return Err(err_degenerate!("constant DI cannot be clustered"));
    }

    if distinct.len() == 2 {
        let run = fcm_run(values, 2, FCM_M, FCM_TOL, FCM_MAX_ITER, 0)?;
        let order = order_by_centroid(&run.centroids);
        let labels = values
            .iter()
            .enumerate()
            .map(|(k, _)| {
                let cluster = argmax_row(&run.memberships[k * 2..k * 2 + 2]);
                if cluster == order[0] {
                    Label::Unchanged
                } else {
                    Label::Changed
                }
            })
            .collect();
        return Ok(LabelMap { labels, h, w });
    }

    let stage1 = fcm_run(values, 3, FCM_M, FCM_TOL, FCM_MAX_ITER, 0)?;
    let order = order_by_centroid(&stage1.centroids);
    let (lo, mid, hi) = (order[0], order[1], order[2]);

    let mut labels = vec![Label::Intermediate; values.len()];
    let mut pool = Vec::new();
    for (k, &v) in values.iter().enumerate() {
        let cluster = argmax_row(&stage1.memberships[k * 3..k * 3 + 3]);
        if cluster == lo {
            labels[k] = Label::Unchanged;
        } else if cluster == hi {
            labels[k] = Label::Changed;
        } else {
            debug_assert_eq!(cluster, mid);
            pool.push((k, v));
        }
    }
    if pool.is_empty() {
        return Ok(LabelMap { labels, h, w });
    }

    let pool_values: Vec<f64> = pool.iter().map(|&(_, v)| v).collect();
    if sorted_distinct(&pool_values).len() < 2 {
        // Nothing to separate; the whole pool stays ambiguous.
        return Ok(LabelMap { labels, h, w });
    }
    let stage2 = fcm_run(&pool_values, 2, FCM_M, FCM_TOL, FCM_MAX_ITER, 0)?;
    let (c_lo, c_hi) = (stage1.centroids[lo], stage1.centroids[hi]);
    for (p, &(k, v)) in pool.iter().enumerate() {
        let row = &stage2.memberships[p * 2..p * 2 + 2];
        if row[argmax_row(row)] > PROMOTION_GATE {
            labels[k] = if (v - c_hi).abs() < (v - c_lo).abs() {
                Label::Changed
            } else {
                Label::Unchanged
            };
        }
    }
    Ok(LabelMap { labels, h, w })
}

/// Window size for the label-selection view of the DI.
pub const SELECTION_SMOOTHING: usize = 7;

/// Box-mean smoothed copy of the DI used only while picking training
/// pixels: isolated speckled values are unreliable cluster evidence, while
/// local means separate the two populations cleanly. Classifier inputs keep
/// reading the raw DI.
pub fn selection_view(di: &DifferenceImage) -> Result<DifferenceImage> {
    box_mean(di, SELECTION_SMOOTHING)
}

/// Labels every pixel by hierarchical clustering of the selection view.
pub fn select_labels(di: &DifferenceImage) -> Result<LabelMap> {
    hierarchical_label(&selection_view(di)?)
}

/// Draws `n` reliable training pixels, half per class where availability
/// allows (a short class contributes everything it has and the other class
/// fills the rest), uniformly without replacement, deterministic given
/// `seed`.
pub fn sample_training_set(labels: &LabelMap, n: usize, seed: u64) -> Result<TrainingSet> {
    if n == 0 {
        return Err(err_arg!("sample count must be positive"));
    }
    let (_, w) = labels.dims();
    let mut changed = Vec::new();
    let mut unchanged = Vec::new();
    for (k, &l) in labels.labels().iter().enumerate() {
        let pos = (k / w, k % w);
        match l {
            Label::Changed => changed.push(pos),
            Label::Unchanged => unchanged.push(pos),
            Label::Intermediate => {}
        }
    }
    if n > changed.len() + unchanged.len() {
        return Err(err_arg!(
            "requested {n} samples but only {} reliable pixels exist",
            changed.len() + unchanged.len()
        ));
    }
    let take_changed = changed.len().min(n / 2);
    let take_unchanged = unchanged.len().min(n - take_changed);
    let take_changed = n - take_unchanged;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for idx in rand::seq::index::sample(&mut rng, changed.len(), take_changed) {
        samples.push(TrainingSample { center: changed[idx], label: 1 });
    }
    for idx in rand::seq::index::sample(&mut rng, unchanged.len(), take_unchanged) {
        samples.push(TrainingSample { center: unchanged[idx], label: 0 });
    }
    Ok(TrainingSet { samples, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocessing::{log_ratio_di, synth_scene, Rect};

    #[test]
    fn two_group_data_recovers_its_centroids() {
        let values = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let (centroids, memberships) = fcm(&values, 2, 2.0, 1e-6, 100, 0).unwrap();
        let mut sorted = centroids.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(sorted[0].abs() < 1e-6, "low centroid {}", sorted[0]);
        assert!((sorted[1] - 1.0).abs() < 1e-6, "high centroid {}", sorted[1]);
        for (k, &x) in values.iter().enumerate() {
            let own = if x == 0.0 {
                centroids.iter().position(|&v| v < 0.5).unwrap()
            } else {
                centroids.iter().position(|&v| v >= 0.5).unwrap()
            };
            assert!(memberships[k * 2 + own] > 0.99);
        }
    }

    #[test]
    fn point_on_centroid_has_unit_membership() {
        // {0, 1} with c = 2 converges to centroids exactly at the points.
        let values = [0.0, 1.0];
        let (centroids, memberships) = fcm(&values, 2, 2.0, 1e-6, 100, 0).unwrap();
        for (k, &x) in values.iter().enumerate() {
            let own = centroids.iter().position(|&v| v == x).unwrap();
            assert_eq!(memberships[k * 2 + own], 1.0);
            assert_eq!(memberships[k * 2 + (1 - own)], 0.0);
        }
    }

    #[test]
    fn identical_values_are_degenerate() {
        let err = fcm(&[0.5; 8], 2, 2.0, 1e-6, 100, 0).unwrap_err();
        assert!(matches!(err, crate::Error::Degenerate(_)));
    }

    #[test]
    fn objective_never_increases_and_rows_sum_to_one() {
        let values: Vec<f64> = (0..200)
            .map(|i| ((i as f64 * 0.77).sin() * 0.5 + 0.5).clamp(0.0, 1.0))
            .collect();
        let run = fcm_run(&values, 3, 2.0, 1e-9, 100, 0).unwrap();
        for pair in run.objectives.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10, "objective rose: {pair:?}");
        }
        for row in run.memberships.chunks_exact(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn three_separated_groups_label_cleanly() {
        let mut values = vec![0.0; 30];
        values.extend(vec![0.5; 30]);
        values.extend(vec![1.0; 30]);
        let di = DifferenceImage::from_values(values, 9, 10).unwrap();
        let map = hierarchical_label(&di).unwrap();
        for k in 0..30 {
            assert_eq!(map.labels()[k], Label::Unchanged);
        }
        for k in 60..90 {
            assert_eq!(map.labels()[k], Label::Changed);
        }
        // The middle band is all one value, so stage 2 cannot split it.
        for k in 30..60 {
            assert_eq!(map.labels()[k], Label::Intermediate);
        }
    }

    #[test]
    fn two_valued_di_labels_every_pixel() {
        let values: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let di = DifferenceImage::from_values(values.clone(), 8, 8).unwrap();
        let map = hierarchical_label(&di).unwrap();
        assert_eq!(map.count(Label::Intermediate), 0);
        for (&v, &l) in values.iter().zip(map.labels()) {
            let want = if v == 0.0 { Label::Unchanged } else { Label::Changed };
            assert_eq!(l, want);
        }
    }

    #[test]
    fn constant_di_is_degenerate() {
        let di = DifferenceImage::from_values(vec![0.3; 16], 4, 4).unwrap();
        assert!(matches!(
            hierarchical_label(&di).unwrap_err(),
            crate::Error::Degenerate(_)
        ));
    }

    #[test]
    fn pixels_below_lowest_centroid_are_never_changed() {
        let mut values = Vec::new();
        for i in 0..120 {
            values.push(match i % 4 {
                0 => 0.02,
                1 => 0.05,
                2 => 0.55,
                _ => 0.95,
            });
        }
        let di = DifferenceImage::from_values(values.clone(), 10, 12).unwrap();
        let run = fcm_run(di.values(), 3, 2.0, 1e-6, 100, 0).unwrap();
        let lowest = run.centroids.iter().cloned().fold(f64::INFINITY, f64::min);
        let map = hierarchical_label(&di).unwrap();
        for (&v, &l) in values.iter().zip(map.labels()) {
            if v < lowest {
                assert_ne!(l, Label::Changed);
            }
        }
    }

    /// Pixels labeled CHANGED despite stage 1 putting them in the middle
    /// cluster, identified by re-running stage 1 independently.
    fn promoted_changed(di: &DifferenceImage, map: &LabelMap) -> Vec<usize> {
        let run = fcm_run(di.values(), 3, 2.0, 1e-6, 100, 0).unwrap();
        let order = order_by_centroid(&run.centroids);
        map.labels()
            .iter()
            .enumerate()
            .filter(|&(k, &l)| {
                l == Label::Changed
                    && argmax_row(&run.memberships[k * 3..k * 3 + 3]) == order[1]
            })
            .map(|(k, _)| k)
            .collect()
    }

    #[test]
    fn raw_labels_are_reliable_on_lightly_speckled_scenes() {
        let region = [Rect { top: 12, left: 12, bottom: 36, right: 36 }];
        for seed in [9u64, 11, 42] {
            let scene = synth_scene(seed, 48, 48, &region, 16, 6.0).unwrap();
            let di = log_ratio_di(&scene);
            let map = hierarchical_label(&di).unwrap();
            let truth = scene.truth().unwrap();
            let (mut inside, mut total) = (0usize, 0usize);
            for (k, &l) in map.labels().iter().enumerate() {
                if l == Label::Changed {
                    total += 1;
                    inside += usize::from(truth[k] == 1);
                }
            }
            assert!(total > 300, "only {total} changed labels");
            let frac = inside as f64 / total as f64;
            assert!(frac >= 0.95, "seed {seed}: purity {frac:.3}");
        }
    }

    #[test]
    fn promoted_changed_pixels_fall_inside_the_true_region() {
        let region = [Rect { top: 12, left: 12, bottom: 36, right: 36 }];
        for seed in [9u64, 11, 42] {
            let scene = synth_scene(seed, 48, 48, &region, 9, 4.0).unwrap();
            let view = selection_view(&log_ratio_di(&scene)).unwrap();
            let map = hierarchical_label(&view).unwrap();
            let promoted = promoted_changed(&view, &map);
            assert!(promoted.len() >= 20, "only {} promotions", promoted.len());
            let truth = scene.truth().unwrap();
            let inside = promoted.iter().filter(|&&k| truth[k] == 1).count();
            let frac = inside as f64 / promoted.len() as f64;
            assert!(frac >= 0.9, "seed {seed}: purity {frac:.3}");
        }
    }

    #[test]
    fn selection_labels_survive_heavy_speckle() {
        let region = [Rect { top: 12, left: 12, bottom: 36, right: 36 }];
        for seed in [9u64, 11, 42] {
            let scene = synth_scene(seed, 48, 48, &region, 4, 3.0).unwrap();
            let map = select_labels(&log_ratio_di(&scene)).unwrap();
            let truth = scene.truth().unwrap();
            let (mut inside, mut total) = (0usize, 0usize);
            for (k, &l) in map.labels().iter().enumerate() {
                if l == Label::Changed {
                    total += 1;
                    inside += usize::from(truth[k] == 1);
                }
            }
            assert!(total > 300, "only {total} changed labels");
            let frac = inside as f64 / total as f64;
            assert!(frac >= 0.95, "seed {seed}: purity {frac:.3}");
            assert!(map.count(Label::Unchanged) > 1000);
        }
    }

    /// Four exact value groups: extremes anchor stage 1, the two middle
    /// groups coincide with the stage-2 centroids (unit membership) and
    /// promote across the midpoint of the outer centroids.
    #[test]
    fn near_certain_middle_pixels_promote_toward_the_nearest_extreme() {
        let mut values = vec![0.02; 400];
        values.extend(vec![0.45; 40]);
        values.extend(vec![0.6; 40]);
        values.extend(vec![0.98; 400]);
        let di = DifferenceImage::from_values(values.clone(), 20, 44).unwrap();

        // Both middle groups must actually land in the stage-1 middle
        // cluster for the promotion path to be exercised.
        let run = fcm_run(di.values(), 3, 2.0, 1e-6, 100, 0).unwrap();
        let order = order_by_centroid(&run.centroids);
        for (k, &v) in values.iter().enumerate() {
            if v == 0.45 || v == 0.6 {
                let s1 = argmax_row(&run.memberships[k * 3..k * 3 + 3]);
                assert_eq!(s1, order[1], "value {v} escaped the middle cluster");
            }
        }

        let map = hierarchical_label(&di).unwrap();
        for (&v, &l) in values.iter().zip(map.labels()) {
            let want = if v < 0.5 { Label::Unchanged } else { Label::Changed };
            assert_eq!(l, want, "value {v}");
        }
        assert_eq!(map.count(Label::Intermediate), 0);
    }

    fn checkerboard_map(h: usize, w: usize, changed: usize) -> LabelMap {
        let mut labels = vec![Label::Unchanged; h * w];
        for k in 0..changed {
            labels[k] = Label::Changed;
        }
        LabelMap { labels, h, w }
    }

    #[test]
    fn sampling_is_balanced_and_deterministic() {
        let map = checkerboard_map(20, 20, 150);
        let set = sample_training_set(&map, 200, 5).unwrap();
        assert_eq!(set.samples.len(), 200);
        let changed = set.samples.iter().filter(|s| s.label == 1).count();
        assert_eq!(changed, 100);
        let again = sample_training_set(&map, 200, 5).unwrap();
        assert_eq!(set, again);

        let mut centers: Vec<_> = set.samples.iter().map(|s| s.center).collect();
        centers.sort_unstable();
        centers.dedup();
        assert_eq!(centers.len(), 200, "duplicate centers drawn");
    }

    #[test]
    fn short_class_fills_from_the_other() {
        let map = checkerboard_map(20, 20, 30);
        let set = sample_training_set(&map, 200, 5).unwrap();
        let changed = set.samples.iter().filter(|s| s.label == 1).count();
        assert_eq!(changed, 30);
        assert_eq!(set.samples.len(), 200);
    }

    #[test]
    fn oversized_request_is_rejected() {
        let map = checkerboard_map(4, 4, 8);
        assert!(sample_training_set(&map, 17, 5).is_err());
    }
}
