//! Difference-image generation, patch extraction, and synthetic speckled
//! scenes.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{err_arg, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Axis-aligned half-open pixel rectangle: rows [top, bottom), cols
/// [left, right).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// Two co-registered non-negative intensity images, with optional binary
/// ground truth (1 = changed).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    img1: Vec<f64>,
    img2: Vec<f64>,
    h: usize,
    w: usize,
    truth: Option<Vec<u8>>,
}

impl ScenePair {
    pub fn new(img1: Vec<f64>, img2: Vec<f64>, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(err_arg!("scene must be non-empty, got {h}x{w}"));
        }
        if img1.len() != h * w || img2.len() != h * w {
            return Err(err_arg!(
                "image sizes {} and {} do not match {h}x{w}",
                img1.len(),
                img2.len()
            ));
        }
        if !img1.iter().chain(&img2).all(|&v| v >= 0.0 && v.is_finite()) {
            return Err(err_arg!("intensities must be finite and non-negative"));
        }
        Ok(ScenePair { img1, img2, h, w, truth: None })
    }

    pub fn with_truth(mut self, truth: Vec<u8>) -> Result<Self> {
        if truth.len() != self.h * self.w {
            return Err(err_arg!("truth size {} does not match scene", truth.len()));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn img1(&self) -> &[f64] {
        &self.img1
    }

    pub fn img2(&self) -> &[f64] {
        &self.img2
    }

    /// Ground truth, 1 = changed, when the pair carries one.
    pub fn truth(&self) -> Option<&[u8]> {
        self.truth.as_deref()
    }
}

/// Per-pixel change magnitude, min-max normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceImage {
    values: Vec<f64>,
    h: usize,
    w: usize,
}

impl DifferenceImage {
    /// Wraps precomputed DI values (e.g. read back from a file); all values
    /// must already lie in [0, 1].
    pub fn from_values(values: Vec<f64>, h: usize, w: usize) -> Result<Self> {
        if values.len() != h * w || h == 0 || w == 0 {
            return Err(err_arg!("DI size {} does not match {h}x{w}", values.len()));
        }
        if !values.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(err_arg!("DI values must lie in [0, 1]"));
        }
        Ok(DifferenceImage { values, h, w })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }
}

/// An r x r x 1 window of the DI around `center`, mirror-padded at borders.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Tensor,
    pub center: (usize, usize),
    pub r: usize,
}

/// Absolute log-ratio difference image, +1-shifted to tolerate zero
/// intensities, min-max normalized over the scene (constant raw DI maps to
/// all zeros). Symmetric in the two images.
pub fn log_ratio_di(pair: &ScenePair) -> DifferenceImage {
    let (h, w) = pair.dims();
    // |ln(b+1) - ln(a+1)| rather than |ln((b+1)/(a+1))|: same value, but
    // exactly symmetric under swapping the images.
    let mut raw: Vec<f64> = pair
        .img1()
        .iter()
        .zip(pair.img2())
        .map(|(&a, &b)| fmath::abs(fmath::ln(b + 1.0) - fmath::ln(a + 1.0)))
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for v in raw.iter_mut() {
            *v = (*v - lo) * inv;
        }
    } else {
        raw.iter_mut().for_each(|v| *v = 0.0);
    }
    DifferenceImage { values: raw, h, w }
}

/// Reflects an out-of-range index back into [0, n) by mirroring about the
/// border pixels (..., 2, 1, 0, 1, 2, ... at the low edge).
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Extracts the r x r patch centered at `center`, mirroring across borders.
pub fn extract_patch(di: &DifferenceImage, center: (usize, usize), r: usize) -> Result<Patch> {
    if r % 2 == 0 {
        return Err(err_arg!("patch size must be odd, got {r}"));
    }
    if r > 31 {
        return Err(err_arg!("patch size must be at most 31, got {r}"));
    }
    let (h, w) = di.dims();
    let (row, col) = center;
    if row >= h || col >= w {
        return Err(err_arg!("patch center ({row},{col}) outside {h}x{w} image"));
    }
    let half = (r / 2) as isize;
    let mut values = Vec::with_capacity(r * r);
    for dy in -half..=half {
        let y = mirror(row as isize + dy, h);
        for dx in -half..=half {
            let x = mirror(col as isize + dx, w);
            values.push(di.at(y, x));
        }
    }
    Ok(Patch {
        values: Tensor::from_vec(&[r, r, 1], values)?,
        center,
        r,
    })
}

/// Replaces every pixel with the mean of its k x k mirrored neighborhood.
/// Output dims match the input; k must be odd.
pub fn box_mean(di: &DifferenceImage, k: usize) -> Result<DifferenceImage> {
    if k % 2 == 0 || k == 0 {
        return Err(err_arg!("box size must be odd, got {k}"));
    }
    let (h, w) = di.dims();
    let half = (k / 2) as isize;
    let norm = (k * k) as f64;
    let mut values = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut sum = 0.0;
            for dy in -half..=half {
                let y = mirror(row as isize + dy, h);
                for dx in -half..=half {
                    let x = mirror(col as isize + dx, w);
                    sum += di.at(y, x);
                }
            }
            // Exact means of in-range values stay in range; clamp the
            // last-bit float drift so the [0,1] invariant holds.
            values.push((sum / norm).clamp(0.0, 1.0));
        }
    }
    DifferenceImage::from_values(values, h, w)
}

/// Synthesizes a gamma-speckled scene pair: unit reflectivity everywhere,
/// raised to `contrast` inside `change_regions` at time 2, multiplied by
/// independent mean-1 gamma speckle with shape `looks`. Ground truth marks
/// pixels whose underlying reflectivity differs. Deterministic given `seed`.
pub fn synth_scene(
    seed: u64,
    h: usize,
    w: usize,
    change_regions: &[Rect],
    looks: u32,
    contrast: f64,
) -> Result<ScenePair> {
    if h == 0 || w == 0 {
        return Err(err_arg!("scene must be non-empty, got {h}x{w}"));
    }
    if looks < 1 {
        return Err(err_arg!("looks must be at least 1, got {looks}"));
    }
    if !(contrast >= 1.0 && contrast.is_finite()) {
        return Err(err_arg!("contrast must be a finite value >= 1, got {contrast}"));
    }
    for r in change_regions {
        if r.bottom <= r.top || r.right <= r.left || r.bottom > h || r.right > w {
            return Err(err_arg!(
                "degenerate or out-of-bounds change region {r:?} in {h}x{w} scene"
            ));
        }
    }

    let mut base2 = vec![1.0f64; h * w];
    for rect in change_regions {
        for row in rect.top..rect.bottom {
            for col in rect.left..rect.right {
                base2[row * w + col] = contrast;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(f64::from(looks), 1.0 / f64::from(looks))
        .expect("looks >= 1 gives a valid gamma");
    let img1: Vec<f64> = (0..h * w).map(|_| gamma.sample(&mut rng)).collect();
    let img2: Vec<f64> = base2.iter().map(|&b| b * gamma.sample(&mut rng)).collect();
    let truth: Vec<u8> = base2.iter().map(|&b| u8::from(b != 1.0)).collect();

    ScenePair::new(img1, img2, h, w)?.with_truth(truth)
}
