//! Segmentation evaluation measures: overlap ratios from the pixel confusion
//! matrix, boundary distance measures (Hausdorff, average symmetric surface
//! distance, relative volume difference), and boundary Dice measures built
//! from local Dice coefficients in von Neumann neighbourhoods.

use crate::error::{Error, Result};
use crate::noise::BinaryMask;
use serde::Deserialize;

/// Pixelwise confusion counts between a predicted mask and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    check_dims(pred, gt)?;
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (p, g) in pred.bits.iter().zip(&gt.bits) {
        match (*p, *g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::MaskDimMismatch {
            h0: a.height,
            w0: a.width,
            h1: b.height,
            w1: b.width,
        });
    }
    Ok(())
}

/// 0/0 ratios are defined as 1 (perfect agreement on emptiness).
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

pub fn overlap_metrics(c: &Confusion) -> OverlapMetrics {
    OverlapMetrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// outside the image.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == mask.height - 1
                || x == mask.width - 1
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn min_dist_sq(p: (usize, usize), pts: &[(usize, usize)]) -> f64 {
    let mut best = f64::INFINITY;
    for q in pts {
        let dy = p.0 as f64 - q.0 as f64;
        let dx = p.1 as f64 - q.1 as f64;
        let d = dy * dy + dx * dx;
        if d < best {
            best = d;
        }
    }
    best
}

/// Hausdorff distance between the boundary point sets (Euclidean, pixels).
pub fn hausdorff(m: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    check_dims(m, g)?;
    let bm = boundary(m);
    let bg = boundary(g);
    if bm.is_empty() || bg.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "hausdorff",
            reason: "empty boundary",
        });
    }
    let mut worst = 0.0f64;
    for p in &bm {
        worst = worst.max(min_dist_sq(*p, &bg));
    }
    for p in &bg {
        worst = worst.max(min_dist_sq(*p, &bm));
    }
    Ok(worst.sqrt())
}

/// Average symmetric surface distance between the boundary point sets.
pub fn assd(m: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    check_dims(m, g)?;
    let bm = boundary(m);
    let bg = boundary(g);
    if bm.is_empty() || bg.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "assd",
            reason: "empty boundary",
        });
    }
    let mut total = 0.0;
    for p in &bm {
        total += min_dist_sq(*p, &bg).sqrt();
    }
    for p in &bg {
        total += min_dist_sq(*p, &bm).sqrt();
    }
    Ok(total / (bm.len() + bg.len()) as f64)
}

/// Absolute relative volume difference `||M| - |G|| / |G|`.
pub fn rvd(m: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    check_dims(m, g)?;
    let am = m.area();
    let ag = g.area();
    if ag == 0 {
        return Err(Error::UndefinedMetric {
            metric: "rvd",
            reason: "empty ground truth",
        });
    }
    Ok((am as f64 - ag as f64).abs() / ag as f64)
}

/// Dice coefficient between `m` and `g` restricted to the von Neumann
/// neighbourhood of `(y, x)` (centre plus 4-neighbours, clipped at image
/// borders); 0/0 is defined as 1.
pub fn local_dice(m: &BinaryMask, g: &BinaryMask, y: usize, x: usize) -> f64 {
    let mut inter = 0usize;
    let mut am = 0usize;
    let mut ag = 0usize;
    let h = m.height as isize;
    let w = m.width as isize;
    for (dy, dx) in [(0isize, 0isize), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        if ny < 0 || nx < 0 || ny >= h || nx >= w {
            continue;
        }
        let mv = m.get(ny as usize, nx as usize);
        let gv = g.get(ny as usize, nx as usize);
        if mv {
            am += 1;
        }
        if gv {
            ag += 1;
        }
        if mv && gv {
            inter += 1;
        }
    }
    ratio(2 * inter, am + ag)
}

/// Directed boundary Dice: the mean of local Dice values along the boundary
/// of `walk`. `dbd(G, M)` walks the ground-truth boundary, `dbd(M, G)` the
/// prediction boundary; the neighbourhood Dice itself is symmetric.
pub fn dbd(walk: &BinaryMask, other: &BinaryMask) -> Result<f64> {
    check_dims(walk, other)?;
    let b = boundary(walk);
    if b.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "dbd",
            reason: "empty boundary",
        });
    }
    let sum: f64 = b.iter().map(|&(y, x)| local_dice(walk, other, y, x)).sum();
    Ok(sum / b.len() as f64)
}

/// Symmetric boundary Dice: local Dice values summed along both boundaries,
/// divided by the total boundary pixel count.
pub fn sbd(m: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    check_dims(m, g)?;
    let bm = boundary(m);
    let bg = boundary(g);
    if bm.is_empty() || bg.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "sbd",
            reason: "empty boundary",
        });
    }
    let sum_g: f64 = bg.iter().map(|&(y, x)| local_dice(m, g, y, x)).sum();
    let sum_m: f64 = bm.iter().map(|&(y, x)| local_dice(m, g, y, x)).sum();
    Ok((sum_g + sum_m) / (bg.len() + bm.len()) as f64)
}

/// The twelve evaluation measures: six overlap ratios, three difference
/// measures, three boundary-based measures.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub hd: f64,
    pub assd: f64,
    pub rvd: f64,
    pub dbd_g: f64,
    pub dbd_m: f64,
    pub sbd: f64,
}

impl MetricReport {
    /// Full report for a single prediction/ground-truth pair. Errors if any
    /// boundary-based measure is undefined.
    pub fn compute(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let c = confusion(pred, gt)?;
        let o = overlap_metrics(&c);
        Ok(MetricReport {
            dice: o.dice,
            iou: o.iou,
            accuracy: o.accuracy,
            precision: o.precision,
            recall: o.recall,
            specificity: o.specificity,
            hd: hausdorff(pred, gt)?,
            assd: assd(pred, gt)?,
            rvd: rvd(pred, gt)?,
            dbd_g: dbd(gt, pred)?,
            dbd_m: dbd(pred, gt)?,
            sbd: sbd(pred, gt)?,
        })
    }

    /// Report of exact agreement: all ratios 1, all distances 0.
    pub fn perfect() -> Self {
        MetricReport {
            dice: 1.0,
            iou: 1.0,
            accuracy: 1.0,
            precision: 1.0,
            recall: 1.0,
            specificity: 1.0,
            hd: 0.0,
            assd: 0.0,
            rvd: 0.0,
            dbd_g: 1.0,
            dbd_m: 1.0,
            sbd: 1.0,
        }
    }

    /// Flat JSON object with the twelve fields at 4 decimal places.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"dice\":{:.4},\"iou\":{:.4},\"accuracy\":{:.4},\"precision\":{:.4},\"recall\":{:.4},\"specificity\":{:.4},\"hd\":{:.4},\"assd\":{:.4},\"rvd\":{:.4},\"dbd_g\":{:.4},\"dbd_m\":{:.4},\"sbd\":{:.4}}}\n",
            self.dice,
            self.iou,
            self.accuracy,
            self.precision,
            self.recall,
            self.specificity,
            self.hd,
            self.assd,
            self.rvd,
            self.dbd_g,
            self.dbd_m,
            self.sbd
        )
    }
}
