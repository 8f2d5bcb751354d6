//! Synthetic label corruption: iterated morphological erosion/dilation and
//! elastic deformation, each calibrated so the corrupted mask reaches a
//! target overlap level `alpha` (the Dice coefficient between the original
//! and the corrupted mask).

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Binary foreground mask; `true` is foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits
            .iter()
            .zip(&other.bits)
            .all(|(a, b)| !*a || *b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Erosion,
    Dilation,
    Elastic,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseKind::Erosion => write!(f, "erosion"),
            NoiseKind::Dilation => write!(f, "dilation"),
            NoiseKind::Elastic => write!(f, "elastic"),
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erosion" => Ok(NoiseKind::Erosion),
            "dilation" => Ok(NoiseKind::Dilation),
            "elastic" => Ok(NoiseKind::Elastic),
            other => Err(Error::InvalidConfig(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Requested corruption: kind, target overlap level and calibration
/// tolerance, plus the elastic field parameters (smoothing radius `sigma_e`
/// in pixels; the displacement magnitude is the searched intensity).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub alpha_target: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub sigma_e: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, alpha_target: f64, seed: u64) -> Result<Self> {
        let s = NoiseSpec {
            kind,
            alpha_target,
            tolerance: 0.03,
            seed,
            sigma_e: 3.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_target) {
            return Err(Error::InvalidConfig(format!(
                "alpha_target must lie in [0,1], got {}",
                self.alpha_target
            )));
        }
        if self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.sigma_e <= 0.0 {
            return Err(Error::InvalidConfig("sigma_e must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample corruption outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub sample_id: usize,
    pub kind: NoiseKind,
    pub alpha_target: f64,
    pub alpha_achieved: f64,
    pub corrupted: bool,
    pub infeasible: bool,
}

/// Single erosion step with a 3x3 square structuring element; pixels outside
/// the image count as background.
fn erode_once(m: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::empty(m.height, m.width);
    for y in 0..m.height {
        for x in 0..m.width {
            if !m.get(y, x) {
                continue;
            }
            let mut keep = true;
            'scan: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let ny = y as i32 + dy;
                    let nx = x as i32 + dx;
                    if ny < 0
                        || nx < 0
                        || ny >= m.height as i32
                        || nx >= m.width as i32
                        || !m.get(ny as usize, nx as usize)
                    {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            out.set(y, x, keep);
        }
    }
    out
}

fn dilate_once(m: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::empty(m.height, m.width);
    for y in 0..m.height {
        for x in 0..m.width {
            let mut any = false;
            'scan: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let ny = y as i32 + dy;
                    let nx = x as i32 + dx;
                    if ny >= 0
                        && nx >= 0
                        && ny < m.height as i32
                        && nx < m.width as i32
                        && m.get(ny as usize, nx as usize)
                    {
                        any = true;
                        break 'scan;
                    }
                }
            }
            out.set(y, x, any);
        }
    }
    out
}

/// Iterated morphological erosion (3x3 square element). The result is always
/// a subset of the input; the empty mask is a valid result.
pub fn erode(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..iterations {
        m = erode_once(&m);
    }
    m
}

/// Iterated morphological dilation (3x3 square element), clipped at borders.
pub fn dilate(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..iterations {
        m = dilate_once(&m);
    }
    m
}

/// Elastic deformation. Two per-pixel displacement fields (row field drawn
/// first, then column field, each row-major, uniform in [-1, 1]) are smoothed
/// by a truncated discrete Gaussian of radius `ceil(3 * sigma_e)` (zero
/// padding, kernel normalized by its full weight sum), scaled by `magnitude`,
/// and applied with nearest-neighbour lookup; samples that land outside the
/// image read background. Deterministic given the seed.
pub fn elastic_deform(mask: &BinaryMask, sigma_e: f64, magnitude: f64, seed: u64) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_field = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..h * w).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    };
    let row_raw = draw_field(&mut rng);
    let col_raw = draw_field(&mut rng);
    let row_disp = gaussian_smooth(&row_raw, h, w, sigma_e);
    let col_disp = gaussian_smooth(&col_raw, h, w, sigma_e);

    let mut out = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let sy = (y as f64 + magnitude * row_disp[y * w + x]).round();
            let sx = (x as f64 + magnitude * col_disp[y * w + x]).round();
            if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            out.set(y, x, mask.get(sy as usize, sx as usize));
        }
    }
    out
}

fn gaussian_smooth(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i32;
    let mut weights = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    let mut wsum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let g = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            weights.push(g);
            wsum += g;
        }
    }
    let mut out = vec![0.0; h * w];
    let k = (2 * r + 1) as usize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let ny = y as i32 + dy;
                if ny < 0 || ny >= h as i32 {
                    continue;
                }
                for dx in -r..=r {
                    let nx = x as i32 + dx;
                    if nx < 0 || nx >= w as i32 {
                        continue;
                    }
                    let wv = weights[((dy + r) as usize) * k + (dx + r) as usize];
                    acc += wv * field[ny as usize * w + nx as usize];
                }
            }
            out[y * w + x] = acc / wsum;
        }
    }
    out
}

/// Overlap level between the original and corrupted mask: the Dice
/// coefficient `2|G and M| / (|G| + |M|)`, defined as 1 when both are empty.
pub fn overlap_alpha(gt: &BinaryMask, noisy: &BinaryMask) -> Result<f64> {
    if gt.height != noisy.height || gt.width != noisy.width {
        return Err(Error::MaskDimMismatch {
            h0: gt.height,
            w0: gt.width,
            h1: noisy.height,
            w1: noisy.width,
        });
    }
    let inter = gt
        .bits
        .iter()
        .zip(&noisy.bits)
        .filter(|(a, b)| **a && **b)
        .count();
    let denom = gt.area() + noisy.area();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / denom as f64)
}

/// Calibration outcome: the corrupted mask, its achieved overlap, and
/// whether the target was reachable within tolerance.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub mask: BinaryMask,
    pub alpha_achieved: f64,
    pub feasible: bool,
}

/// Searches the kind's intensity parameter (iterations for erosion/dilation,
/// displacement magnitude for elastic deformation) until the achieved
/// overlap lands within `tolerance` of `alpha_target`, or returns the
/// closest achievable result flagged infeasible. Never silent: the flag is
/// always set for misses.
pub fn calibrate(gt: &BinaryMask, spec: &NoiseSpec) -> Result<Calibrated> {
    spec.validate()?;
    if gt.area() == 0 {
        return Err(Error::InvalidConfig(
            "calibrate requires a nonempty ground-truth mask".into(),
        ));
    }
    let target = spec.alpha_target;
    let tol = spec.tolerance;

    let mut best: Option<Calibrated> = None;
    let consider = |mask: BinaryMask, alpha: f64, best: &mut Option<Calibrated>| {
        let better = match best {
            None => true,
            Some(b) => {
                let d_new = (alpha - target).abs();
                let d_old = (b.alpha_achieved - target).abs();
                // Ties prefer the noisier candidate so a "corrupted" record
                // is actually corrupted.
                d_new < d_old - 1e-15 || (d_new <= d_old + 1e-15 && alpha < b.alpha_achieved)
            }
        };
        if better {
            *best = Some(Calibrated {
                mask,
                alpha_achieved: alpha,
                feasible: (alpha - target).abs() <= tol,
            });
        }
    };

    match spec.kind {
        NoiseKind::Erosion | NoiseKind::Dilation => {
            // The intensity is an iteration count and alpha is monotone
            // non-increasing in it, so walking the chain until alpha crosses
            // the target visits exactly the bisection bracket.
            let step = |m: &BinaryMask| -> BinaryMask {
                match spec.kind {
                    NoiseKind::Erosion => erode_once(m),
                    NoiseKind::Dilation => dilate_once(m),
                    NoiseKind::Elastic => unreachable!(),
                }
            };
            let cap = gt.height.max(gt.width);
            let mut m = gt.clone();
            let mut alpha = 1.0;
            consider(m.clone(), alpha, &mut best);
            let mut it = 0usize;
            while alpha > target && it < cap {
                let next = step(&m);
                if next == m {
                    break; // absorbing state (empty or border-saturated)
                }
                m = next;
                alpha = overlap_alpha(gt, &m)?;
                it += 1;
                consider(m.clone(), alpha, &mut best);
                if alpha <= target {
                    break;
                }
            }
        }
        NoiseKind::Elastic => {
            let eval = |mag: f64| -> Result<(BinaryMask, f64)> {
                let m = elastic_deform(gt, spec.sigma_e, mag, spec.seed);
                let a = overlap_alpha(gt, &m)?;
                Ok((m, a))
            };
            consider(gt.clone(), 1.0, &mut best);
            // Grow the bracket until alpha falls below the target, then
            // bisect the magnitude.
            let mut hi = 2.0f64;
            let mut lo = 0.0f64;
            let mut bracketed = false;
            for _ in 0..8 {
                let (m, a) = eval(hi)?;
                consider(m, a, &mut best);
                if a <= target {
                    bracketed = true;
                    break;
                }
                lo = hi;
                hi *= 2.0;
            }
            if bracketed {
                for _ in 0..30 {
                    if best.as_ref().map_or(false, |b| b.feasible) {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    let (m, a) = eval(mid)?;
                    consider(m, a, &mut best);
                    if a > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
        }
    }

    Ok(best.expect("at least the identity candidate exists"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: usize, w: usize, y0: usize, x0: usize, hh: usize, ww: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for y in y0..y0 + hh {
            for x in x0..x0 + ww {
                m.set(y, x, true);
            }
        }
        m
    }

    fn disk(size: usize, r: f64) -> BinaryMask {
        let mut m = BinaryMask::empty(size, size);
        let c = (size as f64 - 1.0) / 2.0;
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - c;
                let dx = x as f64 - c;
                if dy * dy + dx * dx <= r * r {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn erode_zero_iterations_is_identity() {
        let m = solid(5, 5, 1, 1, 3, 3);
        assert_eq!(erode(&m, 0), m);
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn erode_solid_square_to_centre() {
        // Brute-force check: every pixel of a 3x3 solid block except the
        // centre touches background (or the border) in its 3x3 window.
        let m = solid(3, 3, 0, 0, 3, 3);
        let e = erode(&m, 1);
        assert_eq!(e.area(), 1);
        assert!(e.get(1, 1));
    }

    #[test]
    fn erosion_reaches_empty_absorbing_state() {
        let m = solid(8, 8, 2, 2, 4, 4);
        let e = erode(&m, 10);
        assert_eq!(e.area(), 0);
        assert_eq!(erode(&e, 3).area(), 0);
    }

    #[test]
    fn dilate_centre_pixel_to_square() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, 1);
        assert_eq!(d, solid(5, 5, 1, 1, 3, 3));
    }

    #[test]
    fn morphology_monotone_chains() {
        let m = disk(16, 5.0);
        for i in 0..4 {
            assert!(erode(&m, i + 1).is_subset_of(&erode(&m, i)));
            assert!(dilate(&m, i).is_subset_of(&dilate(&m, i + 1)));
        }
        assert!(erode(&m, 2).is_subset_of(&m));
        assert!(m.is_subset_of(&dilate(&m, 2)));
    }

    #[test]
    fn dilation_erosion_duality_in_interior() {
        // complement(dilate(m)) == erode(complement(m)) away from borders.
        let m = disk(16, 4.0);
        let d = dilate(&m, 1);
        let mut comp = m.clone();
        for b in comp.bits.iter_mut() {
            *b = !*b;
        }
        let e = erode(&comp, 1);
        for y in 1..15 {
            for x in 1..15 {
                assert_eq!(!d.get(y, x), e.get(y, x), "at ({y},{x})");
            }
        }
    }

    #[test]
    fn elastic_zero_magnitude_is_identity_and_seeded() {
        let m = disk(16, 5.0);
        assert_eq!(elastic_deform(&m, 2.0, 0.0, 7), m);
        let a = elastic_deform(&m, 2.0, 3.0, 42);
        let b = elastic_deform(&m, 2.0, 3.0, 42);
        assert_eq!(a, b);
        let c = elastic_deform(&m, 2.0, 3.0, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn elastic_matches_pixelwise_reference() {
        // Straight-line reference: redraws the fields in the documented
        // order and resamples each pixel independently.
        let m = disk(8, 2.5);
        let (sigma, mag, seed) = (2.0, 3.0, 9u64);
        let got = elastic_deform(&m, sigma, mag, seed);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = [0.0f64; 64];
        let mut col = [0.0f64; 64];
        for v in row.iter_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        for v in col.iter_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let r = (3.0f64 * sigma).ceil() as i32;
        let smooth = |f: &[f64; 64], y: i32, x: i32| -> f64 {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let g = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                    wsum += g;
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < 8 && nx < 8 {
                        acc += g * f[(ny * 8 + nx) as usize];
                    }
                }
            }
            acc / wsum
        };
        for y in 0..8i32 {
            for x in 0..8i32 {
                let sy = (y as f64 + mag * smooth(&row, y, x)).round();
                let sx = (x as f64 + mag * smooth(&col, y, x)).round();
                let expect = if sy < 0.0 || sx < 0.0 || sy >= 8.0 || sx >= 8.0 {
                    false
                } else {
                    m.get(sy as usize, sx as usize)
                };
                assert_eq!(got.get(y as usize, x as usize), expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn overlap_alpha_cases() {
        let a = solid(6, 6, 1, 1, 2, 2);
        assert_eq!(overlap_alpha(&a, &a).unwrap(), 1.0);
        let b = solid(6, 6, 4, 4, 2, 2);
        assert_eq!(overlap_alpha(&a, &b).unwrap(), 0.0);
        // 2x2 square vs the same shifted one column: intersection 2,
        // each area 4 -> 2*2/8 = 0.5.
        let c = solid(6, 6, 1, 2, 2, 2);
        assert_eq!(overlap_alpha(&a, &c).unwrap(), 0.5);
        // Symmetry.
        assert_eq!(
            overlap_alpha(&a, &c).unwrap(),
            overlap_alpha(&c, &a).unwrap()
        );
        let e = BinaryMask::empty(6, 6);
        assert_eq!(overlap_alpha(&e, &e).unwrap(), 1.0);
        assert!(overlap_alpha(&a, &BinaryMask::empty(4, 4)).is_err());
    }

    #[test]
    fn calibrate_target_one_returns_identity() {
        let m = disk(16, 5.0);
        for kind in [NoiseKind::Erosion, NoiseKind::Dilation, NoiseKind::Elastic] {
            let spec = NoiseSpec::new(kind, 1.0, 5).unwrap();
            let out = calibrate(&m, &spec).unwrap();
            assert_eq!(out.mask, m);
            assert_eq!(out.alpha_achieved, 1.0);
            assert!(out.feasible);
        }
    }

    #[test]
    fn calibrate_erosion_on_disk() {
        let m = disk(16, 6.0);
        let spec = NoiseSpec::new(NoiseKind::Erosion, 0.85, 5).unwrap();
        let out = calibrate(&m, &spec).unwrap();
        let check = overlap_alpha(&m, &out.mask).unwrap();
        assert_eq!(check, out.alpha_achieved);
        if out.feasible {
            assert!((out.alpha_achieved - 0.85).abs() <= 0.03);
        }
        assert!(out.mask.is_subset_of(&m));
    }

    #[test]
    fn calibrate_single_pixel_is_infeasible() {
        let mut m = BinaryMask::empty(8, 8);
        m.set(4, 4, true);
        let spec = NoiseSpec::new(NoiseKind::Erosion, 0.5, 5).unwrap();
        let out = calibrate(&m, &spec).unwrap();
        assert!(!out.feasible);
    }

    #[test]
    fn calibrate_empty_mask_rejected() {
        let m = BinaryMask::empty(8, 8);
        let spec = NoiseSpec::new(NoiseKind::Erosion, 0.5, 5).unwrap();
        assert!(calibrate(&m, &spec).is_err());
    }

    #[test]
    fn calibrate_elastic_hits_targets_on_large_blobs() {
        let m = disk(48, 16.0);
        for (i, target) in [0.55, 0.68, 0.77, 0.85].into_iter().enumerate() {
            let spec = NoiseSpec::new(NoiseKind::Elastic, target, 100 + i as u64).unwrap();
            let out = calibrate(&m, &spec).unwrap();
            assert!(
                out.feasible,
                "target {target} infeasible, got {}",
                out.alpha_achieved
            );
            assert!((out.alpha_achieved - target).abs() <= 0.03);
        }
    }

    #[test]
    fn overlap_non_increasing_along_morphology_chain() {
        let m = disk(24, 8.0);
        let mut prev_e = 1.0;
        let mut prev_d = 1.0;
        for i in 0..5 {
            let ae = overlap_alpha(&m, &erode(&m, i)).unwrap();
            let ad = overlap_alpha(&m, &dilate(&m, i)).unwrap();
            assert!(ae <= prev_e + 1e-12);
            assert!(ad <= prev_d + 1e-12);
            prev_e = ae;
            prev_d = ad;
        }
    }
}
