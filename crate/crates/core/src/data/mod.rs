//! Dataset plumbing: the manifest format, the synthetic blob dataset
//! generator, dataset corruption, and sample loading.
//!
//! All paths stored in a manifest are relative to the manifest file's
//! directory, so a regenerated pipeline is byte-identical no matter where it
//! runs.

pub mod checkpoint;
pub mod pgm;

use crate::error::{Error, Result};
use crate::noise::{calibrate, BinaryMask, CorruptionRecord, NoiseKind, NoiseSpec};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::util::derive_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// `1x1xHxW` tensor with intensities scaled to [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let shape = Shape {
            n: 1,
            c: 1,
            h: self.height,
            w: self.width,
        };
        let data = self
            .pixels
            .iter()
            .map(|p| T::from_f64(*p as f64 / 255.0))
            .collect();
        Tensor::new(shape, data).expect("pixel count matches shape")
    }
}

pub fn mask_to_pixels(mask: &BinaryMask) -> Vec<u8> {
    mask.bits.iter().map(|b| if *b { 255 } else { 0 }).collect()
}

pub fn pixels_to_mask(height: usize, width: usize, pixels: &[u8]) -> BinaryMask {
    BinaryMask {
        height,
        width,
        bits: pixels.iter().map(|p| *p > 127).collect(),
    }
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (h, w, px) = pgm::read_pgm(path)?;
    Ok(pixels_to_mask(h, w, &px))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (height, width, pixels) = pgm::read_pgm(path)?;
    Ok(Image {
        height,
        width,
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub split: Split,
    pub image_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_mask_path: Option<String>,
    #[serde(default)]
    pub corrupted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_kind: Option<NoiseKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_achieved: Option<f64>,
    #[serde(default)]
    pub alpha_infeasible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.validate(root)?;
        Ok(manifest)
    }

    /// Unique ids, referenced files present, test records never corrupted.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.sample_id) {
                return Err(Error::Manifest(format!(
                    "duplicate sample_id {}",
                    r.sample_id
                )));
            }
            if r.split == Split::Test && r.corrupted {
                return Err(Error::Manifest(format!(
                    "test sample {} is corrupted",
                    r.sample_id
                )));
            }
            let mut paths = vec![&r.image_path, &r.mask_path];
            if let Some(orig) = &r.original_mask_path {
                paths.push(orig);
            }
            for p in paths {
                if !root.join(p).is_file() {
                    return Err(Error::Manifest(format!(
                        "sample {}: missing file {p}",
                        r.sample_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Noise level and proportion implied by the corruption records of the
    /// training split: mean target level over corrupted samples and the
    /// corrupted fraction. `(1.0, 0.0)` when nothing is corrupted.
    pub fn corruption_stats(&self) -> (f64, f64) {
        let train: Vec<&SampleRecord> = self.split_records(Split::Train).collect();
        let corrupted: Vec<&&SampleRecord> = train.iter().filter(|r| r.corrupted).collect();
        if train.is_empty() || corrupted.is_empty() {
            return (1.0, 0.0);
        }
        let alpha = corrupted
            .iter()
            .filter_map(|r| r.alpha_target)
            .sum::<f64>()
            / corrupted.len() as f64;
        let beta = corrupted.len() as f64 / train.len() as f64;
        (alpha, beta)
    }
}

/// An in-memory training/evaluation sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub image: Image,
    pub mask: BinaryMask,
}

/// Loads a split. With `original_masks` the pristine ground truth is used
/// even for corrupted records (scoring); otherwise the training mask (noisy
/// when corrupted) is read.
pub fn load_samples(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    original_masks: bool,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for r in manifest.split_records(split) {
        let mask_path = if original_masks {
            r.original_mask_path.as_ref().unwrap_or(&r.mask_path)
        } else {
            &r.mask_path
        };
        out.push(Sample {
            id: r.sample_id,
            image: read_image(&root.join(&r.image_path))?,
            mask: read_mask(&root.join(mask_path))?,
        });
    }
    out.sort_by_key(|s| s.id);
    Ok(out)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

fn draw_blobs(rng: &mut ChaCha8Rng, size: usize) -> Vec<Ellipse> {
    let count = rng.gen_range(1..=3);
    (0..count)
        .map(|_| Ellipse {
            cy: rng.gen_range(0.22..0.78) * size as f64,
            cx: rng.gen_range(0.22..0.78) * size as f64,
            a: rng.gen_range(size as f64 / 10.0..size as f64 / 4.0),
            b: rng.gen_range(size as f64 / 10.0..size as f64 / 4.0),
            theta: rng.gen_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

/// Renders the exact blob support for a sample; the mask is the analytic
/// ellipse-union indicator with no intensity noise involved.
pub fn render_mask(seed: u64, sample_id: usize, size: usize) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("sample/{sample_id}")));
    loop {
        let blobs = draw_blobs(&mut rng, size);
        let mut mask = BinaryMask::empty(size, size);
        for y in 0..size {
            for x in 0..size {
                if blobs.iter().any(|e| e.contains(y, x)) {
                    mask.set(y, x, true);
                }
            }
        }
        if mask.area() * 100 >= size * size {
            // Image synthesis continues on the same stream; the texture
            // parameters come after the accepted blob draw.
            return mask;
        }
    }
}

fn render_sample(seed: u64, sample_id: usize, size: usize) -> (Image, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("sample/{sample_id}")));
    let (blobs, mask) = loop {
        let blobs = draw_blobs(&mut rng, size);
        let mut mask = BinaryMask::empty(size, size);
        for y in 0..size {
            for x in 0..size {
                if blobs.iter().any(|e| e.contains(y, x)) {
                    mask.set(y, x, true);
                }
            }
        }
        if mask.area() * 100 >= size * size {
            break (blobs, mask);
        }
    };
    let _ = blobs;

    // Additive background texture: three oriented sinusoids plus per-pixel
    // uniform noise, foreground lifted by a fixed contrast.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.35;
            for (freq, psi, phase) in &waves {
                let proj = x as f64 * psi.cos() + y as f64 * psi.sin();
                v += 0.06 * (std::f64::consts::TAU * freq * proj / size as f64 + phase).sin();
            }
            if mask.get(y, x) {
                v += 0.30;
            }
            v += rng.gen_range(-0.10..0.10);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (
        Image {
            height: size,
            width: size,
            pixels,
        },
        mask,
    )
}

/// Generates `n` synthetic grayscale images (1-3 filled random ellipses over
/// an additive texture) with exact masks, split 80/10/10 into
/// train/val/test, and writes images, masks and `manifest.json` under
/// `out_dir`.
pub fn gen_synth(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if size % 16 != 0 {
        return Err(Error::NotMultipleOf16 {
            op: "gen_synth",
            h: size,
            w: size,
        });
    }
    if n < 10 {
        return Err(Error::InvalidConfig(format!(
            "gen_synth needs at least 10 samples, got {n}"
        )));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;

    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    ids.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut split_of = vec![Split::Test; n];
    for (rank, id) in ids.iter().enumerate() {
        split_of[*id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (image, mask) = render_sample(seed, i, size);
        let image_path = format!("images/img_{i:04}.pgm");
        let mask_path = format!("masks/mask_{i:04}.pgm");
        pgm::write_pgm(&out_dir.join(&image_path), size, size, &image.pixels)?;
        pgm::write_pgm(&out_dir.join(&mask_path), size, size, &mask_to_pixels(&mask))?;
        records.push(SampleRecord {
            sample_id: i,
            split: split_of[i],
            image_path,
            mask_path,
            original_mask_path: None,
            corrupted: false,
            noise_kind: None,
            alpha_target: None,
            alpha_achieved: None,
            alpha_infeasible: false,
        });
    }
    let manifest = DatasetManifest { records };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Corrupts a proportion `beta` of the training split: each selected sample
/// gets one noise kind drawn uniformly from `specs`, calibrated to the
/// spec's target level. Noisy masks are written alongside the originals and
/// the manifest records keep `original_mask_path` for later scoring. The
/// validation and test splits are never touched.
pub fn corrupt_dataset(
    manifest: &mut DatasetManifest,
    root: &Path,
    beta: f64,
    specs: &[NoiseSpec],
    seed: u64,
) -> Result<Vec<CorruptionRecord>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::BadProportion(beta));
    }
    if specs.is_empty() {
        return Err(Error::InvalidConfig("corrupt needs at least one noise spec".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    if manifest.records.iter().any(|r| r.corrupted) {
        return Err(Error::Manifest(
            "manifest already contains corrupted records; regenerate the dataset first".into(),
        ));
    }

    let train_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let k = (beta * train_idx.len() as f64).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corrupt"));
    let mut pool = train_idx.clone();
    pool.shuffle(&mut rng);
    let mut selected: Vec<usize> = pool.into_iter().take(k).collect();
    selected.sort_unstable();

    let mut records = Vec::with_capacity(k);
    for idx in selected {
        let spec_idx = rng.gen_range(0..specs.len());
        let record = &mut manifest.records[idx];
        let mut spec = specs[spec_idx];
        spec.seed = derive_seed(seed, &format!("mask/{}", record.sample_id));
        let gt = read_mask(&root.join(&record.mask_path))?;
        let out = calibrate(&gt, &spec)?;

        let noisy_path = record.mask_path.replace(".pgm", "_noisy.pgm");
        pgm::write_pgm(
            &root.join(&noisy_path),
            out.mask.height,
            out.mask.width,
            &mask_to_pixels(&out.mask),
        )?;
        record.original_mask_path = Some(record.mask_path.clone());
        record.mask_path = noisy_path;
        record.corrupted = true;
        record.noise_kind = Some(spec.kind);
        record.alpha_target = Some(spec.alpha_target);
        record.alpha_achieved = Some(out.alpha_achieved);
        record.alpha_infeasible = !out.feasible;
        records.push(CorruptionRecord {
            sample_id: record.sample_id,
            kind: spec.kind,
            alpha_target: spec.alpha_target,
            alpha_achieved: out.alpha_achieved,
            corrupted: true,
            infeasible: !out.feasible,
        });
    }
    Ok(records)
}

#[cfg(test)]
pub(crate) mod test_support {
    /// In-memory sample synthesis for training tests.
    pub fn render(seed: u64, id: usize, size: usize) -> (super::Image, crate::noise::BinaryMask) {
        super::render_sample(seed, id, size)
    }
}
