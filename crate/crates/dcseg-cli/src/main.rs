//! `dcseg`: generate phantom datasets, train, evaluate, run inference,
//! emit overlays, and verify gradients, all from one binary.
//!
//! Exits 0 only on clean completion.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use dcseg::io::{self, Split};
use dcseg::pipeline::{
    self, aggregate_seeds, evaluate_split, format_eval_report, infer, infer_with_uncertainty,
    load_checkpoint, network_from_checkpoint, Dataset, Precision, RunConfig,
};
use dcseg::tensor::opcheck::sweep_registered_ops;
use dcseg::uncertainty::ConfidenceForm;

#[derive(Parser)]
#[command(name = "dcseg", version, about = "Semi-supervised 3D lesion segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
    LabeledTrain,
}

impl SplitArg {
    fn toward(self) -> Split {
        match self {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::LabeledTrain => Split::LabeledTrain,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset (volumes, labels, manifest).
    Generate {
        /// Run config (TOML); its [data.phantom] and [data.counts]
        /// sections drive generation.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for images/, labels/ and manifest.txt.
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed; defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset for every seed in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Manifest of an existing dataset; defaults to the config's
        /// `data.manifest`, or phantoms generated in memory when empty.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory (checkpoints + logs per seed); defaults to
        /// the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Sliding-window stride.
        #[arg(long, default_value_t = 16)]
        stride: usize,
        /// Checkpoint precision.
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Sliding-window inference on one volume file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input volume (f32 .vol file).
        #[arg(long)]
        input: PathBuf,
        /// Output probability volume path.
        #[arg(long)]
        probabilities: Option<PathBuf>,
        /// Output binary mask path.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Emit per-slice contour overlays and uncertainty heat maps.
    Overlay {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input volume.
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth mask volume.
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        stride: usize,
        /// Seed for the perturbation draws behind the uncertainty maps.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
    /// Verify gradients: finite differences over every registered op
    /// and through the full training objective (f64).
    Gradcheck {
        /// Random shapes per op.
        #[arg(long, default_value_t = 50)]
        shapes: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Skip the (slower) whole-network checks.
        #[arg(long)]
        ops_only: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Generate { config, out, seed } => generate(&config, &out, seed),
        Cmd::Train {
            config,
            manifest,
            out,
        } => train(&config, manifest.as_deref(), out.as_deref()),
        Cmd::Eval {
            checkpoint,
            manifest,
            split,
            stride,
            precision,
        } => eval(&checkpoint, &manifest, split.toward(), stride, precision),
        Cmd::Infer {
            checkpoint,
            input,
            probabilities,
            mask,
            stride,
            precision,
        } => run_infer(
            &checkpoint,
            &input,
            probabilities.as_deref(),
            &mask,
            stride,
            precision,
        ),
        Cmd::Overlay {
            checkpoint,
            input,
            label,
            out,
            stride,
            seed,
            precision,
        } => overlay(&checkpoint, &input, &label, &out, stride, seed, precision),
        Cmd::Gradcheck {
            shapes,
            eps,
            seed,
            ops_only,
        } => gradcheck(shapes, eps, seed, ops_only),
    }
}

fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::from_toml_file(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let manifest = io::generate_dataset(
        &cfg.data.phantom.to_phantom(),
        cfg.data.counts.to_counts(),
        seed,
        out,
    )?;
    println!(
        "wrote {} volumes ({} labeled) under {}",
        manifest.total_images(),
        manifest.total_labeled(),
        out.display()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Dataset> {
    if let Some(path) = manifest {
        return Ok(Dataset::load(path)?);
    }
    if !cfg.data.manifest.is_empty() {
        return Ok(Dataset::load(&cfg.data.manifest)?);
    }
    println!("no manifest configured; synthesizing phantoms in memory");
    Ok(Dataset::synthesize(
        &cfg.data.phantom.to_phantom(),
        cfg.data.counts.to_counts(),
        cfg.seeds[0],
    )?)
}

fn train(config: &Path, manifest: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_toml_file(config)?;
    let data = load_data(&cfg, manifest)?;
    let out_root = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));

    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out_root.join(format!("seed_{seed}"));
        println!("training seed {seed} -> {}", seed_dir.display());
        let agg = match cfg.precision {
            Precision::F32 => train_one::<f32>(&cfg, &data, seed, &seed_dir)?,
            Precision::F64 => train_one::<f64>(&cfg, &data, seed, &seed_dir)?,
        };
        per_seed.push(agg);
    }
    if per_seed.len() > 1 {
        if let Some(seed_agg) = aggregate_seeds(&per_seed) {
            println!(
                "over {} seeds: DSC {} | Jaccard {} | ASD {}",
                seed_agg.seeds,
                seed_agg.dsc.format(),
                seed_agg.jaccard.format(),
                seed_agg
                    .asd
                    .map(|m| m.format())
                    .unwrap_or_else(|| "undefined".to_string())
            );
        }
    }
    Ok(())
}

fn train_one<E: dcseg::Element>(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    seed_dir: &Path,
) -> Result<pipeline::EvalAggregate> {
    let outcome = pipeline::train::<E>(cfg, data, seed, Some(seed_dir))?;
    println!(
        "  best validation DSC {:.2} after {} epochs{}",
        outcome.best_val_dsc,
        outcome.epochs_run,
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    );
    let net = network_from_checkpoint::<E>(&outcome.best)?;
    let (evals, agg) = evaluate_split(&net, &data.test, cfg.schedule.eval_stride)?;
    let report = format_eval_report(&evals, &agg);
    std::fs::write(seed_dir.join("test_report.txt"), &report)
        .with_context(|| format!("writing {}", seed_dir.display()))?;
    println!(
        "  test: DSC {} | Jaccard {} over {} cases",
        agg.dsc.format(),
        agg.jaccard.format(),
        agg.cases
    );
    Ok(agg)
}

fn eval(
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    stride: usize,
    precision: PrecisionArg,
) -> Result<()> {
    let data = Dataset::load(manifest)?;
    let cases = match split {
        Split::Val => &data.val,
        Split::Test => &data.test,
        Split::LabeledTrain => &data.labeled,
        Split::UnlabeledTrain => bail!("the unlabeled split has no labels to evaluate against"),
    };
    let report = match precision {
        PrecisionArg::F32 => {
            let ckpt = load_checkpoint::<f32>(checkpoint)?;
            let net = network_from_checkpoint(&ckpt)?;
            let (evals, agg) = evaluate_split(&net, cases, stride)?;
            format_eval_report(&evals, &agg)
        }
        PrecisionArg::F64 => {
            let ckpt = load_checkpoint::<f64>(checkpoint)?;
            let net = network_from_checkpoint(&ckpt)?;
            let (evals, agg) = evaluate_split(&net, cases, stride)?;
            format_eval_report(&evals, &agg)
        }
    };
    print!("{report}");
    Ok(())
}

fn run_infer(
    checkpoint: &Path,
    input: &Path,
    probabilities: Option<&Path>,
    mask_path: &Path,
    stride: usize,
    precision: PrecisionArg,
) -> Result<()> {
    let volume = io::read_volume(input)?;
    let (probs, mask) = match precision {
        PrecisionArg::F32 => {
            let ckpt = load_checkpoint::<f32>(checkpoint)?;
            infer(&network_from_checkpoint(&ckpt)?, &volume, stride)?
        }
        PrecisionArg::F64 => {
            let ckpt = load_checkpoint::<f64>(checkpoint)?;
            infer(&network_from_checkpoint(&ckpt)?, &volume, stride)?
        }
    };
    if let Some(p) = probabilities {
        io::write_volume(p, &probs)?;
        println!("wrote probabilities to {}", p.display());
    }
    io::write_mask(mask_path, &mask)?;
    println!(
        "wrote mask to {} ({} foreground voxels)",
        mask_path.display(),
        mask.foreground_count()
    );
    Ok(())
}

fn overlay(
    checkpoint: &Path,
    input: &Path,
    label: &Path,
    out: &Path,
    stride: usize,
    seed: u64,
    precision: PrecisionArg,
) -> Result<()> {
    let volume = io::read_volume(input)?;
    let gt = io::read_mask(label)?;

    let (mask, confidence, consensus) = match precision {
        PrecisionArg::F32 => overlay_maps::<f32>(checkpoint, &volume, stride, seed)?,
        PrecisionArg::F64 => overlay_maps::<f64>(checkpoint, &volume, stride, seed)?,
    };
    let files = pipeline::emit_overlays(
        &volume,
        &mask,
        &gt,
        confidence.as_deref(),
        consensus.as_deref(),
        out,
    )?;
    println!("wrote {} images under {}", files.len(), out.display());
    Ok(())
}

type OverlayMaps = (dcseg::metrics::BinaryMask, Option<Vec<f64>>, Option<Vec<f64>>);

fn overlay_maps<E: dcseg::Element>(
    checkpoint: &Path,
    volume: &io::Volume,
    stride: usize,
    seed: u64,
) -> Result<OverlayMaps> {
    let ckpt = load_checkpoint::<E>(checkpoint)?;
    let net = network_from_checkpoint(&ckpt)?;
    if net.has_aux_decoders() {
        let out = infer_with_uncertainty(
            &net,
            volume,
            stride,
            &dcseg::perturb::PerturbHyperparams::default(),
            ConfidenceForm::MeanNegLog,
            seed,
        )?;
        let conf = out.confidence.data.iter().map(|&v| v as f64).collect();
        let cons = out.consensus.data.iter().map(|&v| v as f64).collect();
        Ok((out.mask, Some(conf), Some(cons)))
    } else {
        println!("checkpoint has no auxiliary decoders; emitting contours only");
        let (_, mask) = infer(&net, volume, stride)?;
        Ok((mask, None, None))
    }
}

fn gradcheck(shapes: usize, eps: f64, seed: u64, ops_only: bool) -> Result<()> {
    println!("sweeping registered ops ({shapes} random shapes each, eps {eps})...");
    let entries = sweep_registered_ops(shapes, eps, seed)?;
    let mut failed = false;
    for e in &entries {
        let ok = e.max_rel_err < 1e-6;
        failed |= !ok;
        println!(
            "  {:<18} max rel err {:>12.3e}  {}",
            e.op,
            e.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if !ops_only {
        println!("checking Dice+CE through a 2-level network on an 8^3 patch...");
        let sup = pipeline::check_supervised_loss_gradients(seed, eps)?;
        println!("  supervised loss    max rel err {sup:>12.3e}  {}", ok_str(sup < 1e-4));
        println!("checking the full training objective (all perturbation kinds)...");
        let total = pipeline::check_total_loss_gradients(seed, eps)?;
        println!("  total loss         max rel err {total:>12.3e}  {}", ok_str(total < 1e-4));
        failed |= sup >= 1e-4 || total >= 1e-4;
    }
    if failed {
        bail!("gradient verification failed");
    }
    println!("all gradients verified");
    Ok(())
}

fn ok_str(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}
