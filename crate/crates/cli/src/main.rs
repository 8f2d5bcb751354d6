//! Command-line front end: synthetic dataset generation, label corruption,
//! training with ablation toggles, evaluation, parameter accounting and the
//! gradient verification suite.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rarunet_core::arch::{build_model, param_count, ArchConfig, Model};
use rarunet_core::data::checkpoint::load_checkpoint;
use rarunet_core::data::{
    corrupt_dataset, gen_synth, load_samples, read_mask, DatasetManifest, Split,
};
use rarunet_core::metrics::MetricReport;
use rarunet_core::noise::{NoiseKind, NoiseSpec};
use rarunet_core::tensor::op_gradient_suite;
use rarunet_core::train::{evaluate, model_grad_check, train, TrainConfig};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rarunet", version, about = "Residual/attention segmentation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset with exact masks.
    GenSynth {
        /// Number of samples (at least 10).
        #[arg(long)]
        n: usize,
        /// Image side length; must be a multiple of 16.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (images/, masks/, manifest.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a proportion of the training masks with calibrated noise.
    Corrupt {
        #[arg(long)]
        manifest: PathBuf,
        /// Proportion of training samples to corrupt, in [0, 1].
        #[arg(long)]
        beta: f64,
        /// Target overlap level between original and corrupted mask.
        #[arg(long)]
        alpha: f64,
        /// Comma-separated noise kinds: erosion,dilation,elastic.
        #[arg(long, value_delimiter = ',', default_value = "erosion,dilation,elastic")]
        kinds: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.03)]
        tolerance: f64,
        /// Elastic displacement-field smoothing radius in pixels.
        #[arg(long, default_value_t = 3.0)]
        sigma_e: f64,
    },
    /// Train a model on a manifest's training split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON config file with `arch` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        toggles: Toggles,
        /// Enable adaptive denoising (per-epoch high-loss exclusion).
        #[arg(long)]
        adl: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        base_channels: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        augment: bool,
        /// Output directory (checkpoint.bin, ledger.csv, summary.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest split and write a metric report.
    Eval {
        #[arg(long, required_unless_present = "oracle_self")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output JSON report path.
        #[arg(long)]
        report: PathBuf,
        /// Debug path: score each ground-truth mask against itself.
        #[arg(long)]
        oracle_self: bool,
    },
    /// Print the trainable parameter count for a toggle combination.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        toggles: Toggles,
        #[arg(long)]
        base_channels: Option<usize>,
        /// Print all seven ablation rows next to the reference counts.
        #[arg(long)]
        table: bool,
    },
    /// Run the finite-difference gradient suite (64-bit).
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 2)]
        base_channels: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

#[derive(Args, Default)]
struct Toggles {
    /// Residual interconnections in the downsampling blocks.
    #[arg(long)]
    residual_encoders: bool,
    /// Residual-block paths on the skip connections.
    #[arg(long)]
    residual_skips: bool,
    /// Attention refinement on the decoder levels.
    #[arg(long)]
    attention: bool,
}

/// On-disk config: both sections optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    arch: Option<ArchConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn load_file_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg: FileConfig =
                serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?;
            Ok(cfg)
        }
    }
}

fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf()
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenSynth { n, size, seed, out } => {
            let manifest = gen_synth(n, size, seed, &out)?;
            println!(
                "wrote {} samples ({} train / {} val / {} test) under {}",
                manifest.records.len(),
                manifest.split_records(Split::Train).count(),
                manifest.split_records(Split::Val).count(),
                manifest.split_records(Split::Test).count(),
                out.display()
            );
        }
        Command::Corrupt {
            manifest: manifest_path,
            beta,
            alpha,
            kinds,
            seed,
            tolerance,
            sigma_e,
        } => {
            let root = manifest_root(&manifest_path);
            let mut manifest = DatasetManifest::load(&manifest_path)?;
            let specs: Vec<NoiseSpec> = kinds
                .iter()
                .map(|k| -> anyhow::Result<NoiseSpec> {
                    let mut spec = NoiseSpec::new(k.parse::<NoiseKind>()?, alpha, seed)?;
                    spec.tolerance = tolerance;
                    spec.sigma_e = sigma_e;
                    spec.validate()?;
                    Ok(spec)
                })
                .collect::<anyhow::Result<_>>()?;
            let records = corrupt_dataset(&mut manifest, &root, beta, &specs, seed)?;
            manifest.save(&manifest_path)?;
            let infeasible = records.iter().filter(|r| r.infeasible).count();
            let mean_alpha = if records.is_empty() {
                1.0
            } else {
                records.iter().map(|r| r.alpha_achieved).sum::<f64>() / records.len() as f64
            };
            println!(
                "corrupted {} samples (target alpha {alpha}, mean achieved {mean_alpha:.4}, {infeasible} flagged infeasible)",
                records.len()
            );
        }
        Command::Train {
            manifest: manifest_path,
            config,
            toggles,
            adl,
            epochs,
            seed,
            base_channels,
            batch_size,
            learning_rate,
            augment,
            out,
        } => {
            let file = load_file_config(config.as_deref())?;
            let mut arch = file.arch.unwrap_or_default();
            let mut tc = file.train.unwrap_or_default();
            if toggles.residual_encoders {
                arch.use_residual_encoders = true;
            }
            if toggles.residual_skips {
                arch.use_residual_skips = true;
            }
            if toggles.attention {
                arch.use_attention_decoders = true;
            }
            if let Some(b) = base_channels {
                arch.base_channels = b;
            }
            if adl {
                tc.adl_enabled = true;
            }
            if augment {
                tc.augment = true;
            }
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(b) = batch_size {
                tc.batch_size = b;
            }
            if let Some(lr) = learning_rate {
                tc.learning_rate = lr;
            }
            arch.validate()?;
            tc.validate()?;
            let root = manifest_root(&manifest_path);
            let manifest = DatasetManifest::load(&manifest_path)?;
            let outcome = train(&arch, &tc, &manifest, &root, &out)?;
            println!(
                "trained {} epochs on {} samples; best val dice {:.4} at epoch {}; artifacts in {}",
                outcome.summary.epochs,
                outcome.summary.samples,
                outcome.summary.best_val_dice,
                outcome.summary.best_epoch,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest: manifest_path,
            split,
            report,
            oracle_self,
        } => {
            let root = manifest_root(&manifest_path);
            let manifest = DatasetManifest::load(&manifest_path)?;
            let split: Split = split.parse()?;
            let out = if oracle_self {
                // Ground truth scored against itself: a sanity report of
                // all-ones overlap metrics and zero distances.
                let mut acc: Option<MetricReport> = None;
                let mut count = 0usize;
                for r in manifest.split_records(split) {
                    let gt = read_mask(&root.join(
                        r.original_mask_path.as_ref().unwrap_or(&r.mask_path),
                    ))?;
                    let m = MetricReport::compute(&gt, &gt)?;
                    count += 1;
                    acc = Some(match acc {
                        None => m,
                        Some(a) => sum_reports(a, m),
                    });
                }
                let Some(total) = acc else {
                    bail!("split `{split:?}` is empty");
                };
                scale_report(total, 1.0 / count as f64)
            } else {
                let path = checkpoint.expect("clap enforces presence");
                let (header, params) = load_checkpoint(&path)?;
                let model = Model {
                    config: header.arch,
                    params,
                };
                let samples = load_samples(&manifest, &root, split, true)?;
                evaluate(&model, &samples)?
            };
            std::fs::write(&report, out.to_json())?;
            println!("dice {:.4} iou {:.4} -> {}", out.dice, out.iou, report.display());
        }
        Command::ParamCount {
            config,
            toggles,
            base_channels,
            table,
        } => {
            let file = load_file_config(config.as_deref())?;
            let mut arch = file.arch.unwrap_or_default();
            if toggles.residual_encoders {
                arch.use_residual_encoders = true;
            }
            if toggles.residual_skips {
                arch.use_residual_skips = true;
            }
            if toggles.attention {
                arch.use_attention_decoders = true;
            }
            if let Some(b) = base_channels {
                arch.base_channels = b;
            }
            arch.validate()?;
            if table {
                print_param_table(&arch)?;
            } else {
                let model: Model<f32> = build_model(&arch, 0)?;
                println!("{}", param_count(&model));
            }
        }
        Command::Gradcheck {
            epsilon,
            base_channels,
            seed,
        } => {
            let mut failed = false;
            for (name, err) in op_gradient_suite(epsilon)? {
                let ok = err < 1e-4;
                failed |= !ok;
                println!("{:30} {err:.3e}  {}", name, if ok { "ok" } else { "FAIL" });
            }
            let arch = ArchConfig {
                base_channels,
                ..ArchConfig::default()
            }
            .with_toggles(true, true, true);
            let err = model_grad_check(&arch, seed, epsilon)?;
            let ok = err < 1e-4;
            failed |= !ok;
            println!(
                "{:30} {err:.3e}  {}",
                format!("full model (base {base_channels})"),
                if ok { "ok" } else { "FAIL" }
            );
            if failed {
                bail!("gradient checks failed");
            }
        }
    }
    Ok(())
}

fn print_param_table(base: &ArchConfig) -> anyhow::Result<()> {
    // Reference counts for the base-32 single-channel configuration.
    let reference: [(bool, bool, bool, Option<u64>); 7] = [
        (false, false, false, Some(7_762_465)),
        (false, false, true, Some(7_785_157)),
        (false, true, false, Some(8_912_673)),
        (true, false, false, Some(9_899_625)),
        (true, false, true, Some(9_922_317)),
        (true, true, false, Some(11_049_833)),
        (true, true, true, Some(11_794_125)),
    ];
    println!("enc  skips  att  parameters  reference");
    for (e, s, a, r) in reference {
        let arch = base.clone().with_toggles(e, s, a);
        let model: Model<f32> = build_model(&arch, 0)?;
        let count = param_count(&model);
        match r {
            Some(r) => println!(
                "{:3}  {:5}  {:3}  {:>10}  {:>9}",
                mark(e),
                mark(s),
                mark(a),
                count,
                r
            ),
            None => println!("{:3}  {:5}  {:3}  {:>10}", mark(e), mark(s), mark(a), count),
        }
    }
    Ok(())
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

fn sum_reports(a: MetricReport, b: MetricReport) -> MetricReport {
    MetricReport {
        dice: a.dice + b.dice,
        iou: a.iou + b.iou,
        accuracy: a.accuracy + b.accuracy,
        precision: a.precision + b.precision,
        recall: a.recall + b.recall,
        specificity: a.specificity + b.specificity,
        hd: a.hd + b.hd,
        assd: a.assd + b.assd,
        rvd: a.rvd + b.rvd,
        dbd_g: a.dbd_g + b.dbd_g,
        dbd_m: a.dbd_m + b.dbd_m,
        sbd: a.sbd + b.sbd,
    }
}

fn scale_report(a: MetricReport, k: f64) -> MetricReport {
    MetricReport {
        dice: a.dice * k,
        iou: a.iou * k,
        accuracy: a.accuracy * k,
        precision: a.precision * k,
        recall: a.recall * k,
        specificity: a.specificity * k,
        hd: a.hd * k,
        assd: a.assd * k,
        rvd: a.rvd * k,
        dbd_g: a.dbd_g * k,
        dbd_m: a.dbd_m * k,
        sbd: a.sbd * k,
    }
}
