//! Full-scene inference to a binary change map and agreement metrics
//! against ground truth.

use alloc::vec::Vec;

use crate::capsnet::{network_forward, MsCapsVals};
use crate::error::{err_arg, Result};
use crate::preprocessing::{extract_patch, DifferenceImage};
use crate::runner::{BatchRunner, SequentialRunner};
use crate::tape::Tape;
use crate::training::Checkpoint;

/// Per-pixel binary decision; 1 = changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMap {
    bits: Vec<u8>,
    h: usize,
    w: usize,
}

impl ChangeMap {
    pub fn from_bits(bits: Vec<u8>, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || bits.len() != h * w {
            return Err(err_arg!("map size {} does not match {h}x{w}", bits.len()));
        }
        if !bits.iter().all(|&b| b <= 1) {
            return Err(err_arg!("change map entries must be 0 or 1"));
        }
        Ok(ChangeMap { bits, h, w })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.w + col]
    }

    pub fn count_changed(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Exact agreement tallies between a prediction and binary ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

/// Overall error, percentage correct, and kappa on the 0-100 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub oe: usize,
    pub pcc: f64,
    pub kc: f64,
}

/// Classifies every DI pixel with the checkpointed network, fanning the
/// per-pixel forward passes out through `runner`.
pub fn infer_change_map_with_runner<R: BatchRunner>(
    di: &DifferenceImage,
    ckpt: &Checkpoint,
    runner: &R,
) -> Result<ChangeMap> {
    ckpt.cfg.validate()?;
    let (h, w) = di.dims();
    let results = runner.run(h * w, &|k| -> Result<u8> {
        let tape = Tape::new();
        let vals = MsCapsVals::load(&tape, &ckpt.params);
        let patch = extract_patch(di, (k / w, k % w), ckpt.cfg.r)?;
        let out = network_forward(
            &tape,
            tape.leaf(patch.values),
            &vals,
            &ckpt.cfg.caps,
            ckpt.cfg.iters,
        )?;
        Ok(u8::from(out.class == 1))
    });
    let bits = results.into_iter().collect::<Result<Vec<u8>>>()?;
    ChangeMap::from_bits(bits, h, w)
}

/// Single-threaded inference; the bit-reproducibility reference.
pub fn infer_change_map(di: &DifferenceImage, ckpt: &Checkpoint) -> Result<ChangeMap> {
    infer_change_map_with_runner(di, ckpt, &SequentialRunner)
}

/// Tallies the map against ground truth (1 = changed). FP counts pixels
/// predicted changed but truly unchanged; FN the reverse.
pub fn confusion(map: &ChangeMap, truth: &[u8]) -> Result<ConfusionCounts> {
    let (h, w) = map.dims();
    if truth.len() != h * w {
        return Err(err_arg!(
            "truth size {} does not match {h}x{w} map",
            truth.len()
        ));
    }
    if !truth.iter().all(|&t| t <= 1) {
        return Err(err_arg!("truth entries must be 0 or 1"));
    }
    let mut c = ConfusionCounts { true_pos: 0, true_neg: 0, false_pos: 0, false_neg: 0 };
    for (&p, &t) in map.bits().iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.true_pos += 1,
            (0, 0) => c.true_neg += 1,
            (1, 0) => c.false_pos += 1,
            _ => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// OE = FP+FN; PCC = 100(N-OE)/N; KC = 100(p_o - p_e)/(1 - p_e) with the
/// usual chance-agreement p_e, and the p_e = 1 degenerate case pinned to
/// 100 when agreement is perfect, 0 otherwise.
pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let n = c.total();
    if n == 0 {
        return Err(err_arg!("empty confusion counts"));
    }
    let nf = n as f64;
    let oe = c.false_pos + c.false_neg;
    let pcc = 100.0 * (nf - oe as f64) / nf;
    let p_o = (c.true_pos + c.true_neg) as f64 / nf;
    let p_e = ((c.true_pos + c.false_pos) as f64 * (c.true_pos + c.false_neg) as f64
        + (c.true_neg + c.false_neg) as f64 * (c.true_neg + c.false_pos) as f64)
        / (nf * nf);
    let kc = if p_e == 1.0 {
        if p_o == 1.0 {
            100.0
        } else {
            0.0
        }
    } else {
        100.0 * (p_o - p_e) / (1.0 - p_e)
    };
    Ok(Metrics { oe, pcc, kc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsnet::{CapsConfig, MsCapsParams};
    use crate::pseudo_label::{TrainingSample, TrainingSet};
    use crate::training::{train, Checkpoint, TrainConfig};

    fn toy_cfg() -> TrainConfig {
        TrainConfig { caps: CapsConfig::toy(), ..TrainConfig::default() }
    }

    #[test]
    fn change_map_validates_its_bits() {
        assert!(ChangeMap::from_bits(alloc::vec![0, 1, 1, 0], 2, 2).is_ok());
        assert!(ChangeMap::from_bits(alloc::vec![0, 2, 1, 0], 2, 2).is_err());
        assert!(ChangeMap::from_bits(alloc::vec![0, 1], 2, 2).is_err());
    }

    #[test]
    fn perfect_map_has_no_errors_and_full_scores() {
        let truth = alloc::vec![0, 1, 1, 0, 1, 0];
        let map = ChangeMap::from_bits(truth.clone(), 2, 3).unwrap();
        let c = confusion(&map, &truth).unwrap();
        assert_eq!((c.false_pos, c.false_neg), (0, 0));
        let m = metrics(&c).unwrap();
        assert_eq!(m.oe, 0);
        assert_eq!(m.pcc, 100.0);
        assert_eq!(m.kc, 100.0);
    }

    #[test]
    fn inverted_map_has_no_true_counts() {
        let truth = alloc::vec![0, 1, 1, 0, 1, 0];
        let flipped: Vec<u8> = truth.iter().map(|&t| 1 - t).collect();
        let map = ChangeMap::from_bits(flipped, 2, 3).unwrap();
        let c = confusion(&map, &truth).unwrap();
        assert_eq!((c.true_pos, c.true_neg), (0, 0));
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn confusion_matches_a_naive_tally_oracle() {
        let mut seed = 99u64;
        let mut draw = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 60) & 1) as u8
        };
        let pred: Vec<u8> = (0..64).map(|_| draw()).collect();
        let truth: Vec<u8> = (0..64).map(|_| draw()).collect();
        let map = ChangeMap::from_bits(pred.clone(), 8, 8).unwrap();
        let c = confusion(&map, &truth).unwrap();
        let (mut tp, mut tn, mut fp, mut fal_n) = (0, 0, 0, 0);
        for k in 0..64 {
            match (pred[k], truth[k]) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (1, 0) => fp += 1,
                (0, 1) => fal_n += 1,
                _ => unreachable!(),
            }
        }
        assert_eq!(
            (c.true_pos, c.true_neg, c.false_pos, c.false_neg),
            (tp, tn, fp, fal_n)
        );
    }

    #[test]
    fn confusion_rejects_bad_truth() {
        let map = ChangeMap::from_bits(alloc::vec![0, 1, 1, 0], 2, 2).unwrap();
        assert!(confusion(&map, &[0, 1, 1]).is_err());
        assert!(confusion(&map, &[0, 1, 2, 0]).is_err());
    }

    // 256x256 reference tallies: OE and PCC depend only on FP/FN and N.
    #[test]
    fn published_sea_ice_tallies_reproduce() {
        let c = ConfusionCounts {
            true_pos: 6000,
            false_pos: 425,
            false_neg: 779,
            true_neg: 65536 - 6000 - 425 - 779,
        };
        let m = metrics(&c).unwrap();
        assert_eq!(m.oe, 1204);
        assert!((m.pcc - 98.16).abs() <= 0.01, "pcc {}", m.pcc);
    }

    #[test]
    fn constant_agreement_hits_the_degenerate_kappa_rule() {
        for bit in [0u8, 1] {
            let truth = alloc::vec![bit; 9];
            let map = ChangeMap::from_bits(truth.clone(), 3, 3).unwrap();
            let m = metrics(&confusion(&map, &truth).unwrap()).unwrap();
            assert_eq!(m.kc, 100.0);
            assert_eq!(m.pcc, 100.0);
        }
    }

    #[test]
    fn opposite_constant_maps_score_zero_kappa() {
        let truth = alloc::vec![0u8; 9];
        let map = ChangeMap::from_bits(alloc::vec![1; 9], 3, 3).unwrap();
        let m = metrics(&confusion(&map, &truth).unwrap()).unwrap();
        assert_eq!(m.pcc, 0.0);
        assert_eq!(m.kc, 0.0);
    }

    #[test]
    fn empty_counts_are_rejected() {
        let c = ConfusionCounts { true_pos: 0, true_neg: 0, false_pos: 0, false_neg: 0 };
        assert!(metrics(&c).is_err());
    }

    // p_o = 3/4, p_e = (3*2 + 1*2)/16 = 1/2, kappa = (0.75-0.5)/0.5.
    #[test]
    fn hand_computed_kappa_point() {
        let c = ConfusionCounts { true_pos: 2, true_neg: 1, false_pos: 1, false_neg: 0 };
        let m = metrics(&c).unwrap();
        assert!((m.kc - 50.0).abs() < 1e-12, "kc {}", m.kc);
        assert_eq!(m.oe, 1);
        assert_eq!(m.pcc, 75.0);
    }

    /// Swapping which class counts as "changed" swaps TP with TN and FP
    /// with FN; PCC and KC must not move.
    #[test]
    fn metrics_are_symmetric_under_class_swap() {
        let mut seed = 7u64;
        let mut draw = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 56) as usize + 1
        };
        for _ in 0..50 {
            let c = ConfusionCounts {
                true_pos: draw(),
                true_neg: draw(),
                false_pos: draw(),
                false_neg: draw(),
            };
            let swapped = ConfusionCounts {
                true_pos: c.true_neg,
                true_neg: c.true_pos,
                false_pos: c.false_neg,
                false_neg: c.false_pos,
            };
            let a = metrics(&c).unwrap();
            let b = metrics(&swapped).unwrap();
            assert_eq!(a.oe, b.oe);
            assert!((a.pcc - b.pcc).abs() < 1e-12);
            assert!((a.kc - b.kc).abs() < 1e-9, "{} vs {}", a.kc, b.kc);
            assert!((0.0..=100.0).contains(&a.pcc));
            assert!(a.kc <= 100.0);
        }
    }

    #[test]
    fn zero_parameters_classify_the_whole_scene_unchanged() {
        let cfg = toy_cfg();
        let ckpt = Checkpoint {
            params: MsCapsParams::zeros(cfg.r, cfg.caps).unwrap(),
            cfg,
            history: Vec::new(),
        };
        let values: Vec<f64> = (0..10 * 13).map(|k| (k % 7) as f64 / 7.0).collect();
        let di = DifferenceImage::from_values(values, 10, 13).unwrap();
        let map = infer_change_map(&di, &ckpt).unwrap();
        assert_eq!(map.dims(), (10, 13));
        assert_eq!(map.count_changed(), 0);
    }

    /// Trains on the separable halves fixture and checks the inferred map
    /// recovers the split; also pins inference determinism.
    #[test]
    fn trained_toy_model_recovers_a_separable_scene() {
        let (h, w) = (16, 24);
        let mut values = alloc::vec![0.05; h * w];
        let mut truth = alloc::vec![0u8; h * w];
        for row in 0..h {
            for col in w / 2..w {
                values[row * w + col] = 0.95;
                truth[row * w + col] = 1;
            }
        }
        let di = DifferenceImage::from_values(values, h, w).unwrap();
        let mut samples = Vec::new();
        for k in 0..8 {
            samples.push(TrainingSample { center: (k + 4, 5), label: 0 });
            samples.push(TrainingSample { center: (k + 4, 18), label: 1 });
        }
        let set = TrainingSet { samples, seed: 0 };
        let cfg = TrainConfig {
            epochs: 30,
            batch: 4,
            lr: 5e-2,
            seed: 1,
            n: 16,
            ..toy_cfg()
        };
        let ckpt = train(&di, &set, &cfg).unwrap();
        let map = infer_change_map(&di, &ckpt).unwrap();
        // Patches centered within r/2 of the split straddle both sides and
        // may fall either way; every pure-side patch must be correct.
        for row in 0..h {
            for col in 0..w {
                if col + 4 < w / 2 {
                    assert_eq!(map.at(row, col), 0, "({row},{col})");
                } else if col >= w / 2 + 4 {
                    assert_eq!(map.at(row, col), 1, "({row},{col})");
                }
            }
        }
        let m = metrics(&confusion(&map, &truth).unwrap()).unwrap();
        assert!(m.pcc > 66.0, "pcc {}", m.pcc);
        let again = infer_change_map(&di, &ckpt).unwrap();
        assert_eq!(map, again);
    }
}
