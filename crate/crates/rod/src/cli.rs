//! Command-line interface: train, eval, infer, bench and inspect-ckpt.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numerical failure. `ROD_LOG` controls log verbosity (error/warn/info/
//! debug/trace). Every subcommand writes only under its declared output
//! paths.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_inference, BenchOptions, InputSpec};
use crate::ckpt::{load_checkpoint, save_checkpoint, CheckpointArchive};
use crate::config::{LayoutConfig, Precision, RunConfig};
use crate::data::{
    export_prediction, index_dataset, preprocess_image, DiskSamples, ExportMode,
};
use crate::error::{Result, RodError};
use crate::metrics::{evaluate_dataset, MetricReport};
use crate::model::Model;
use crate::tensor::ops::argmax_classes;
use crate::tensor::{Dtype, Elem};
use crate::training::train_loop;

#[derive(Parser, Debug)]
#[command(
    name = "rod",
    version,
    about = "RGB-only off-road freespace detection: train, evaluate, infer and benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Run configuration file (flat key = value TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: paper, desk or vit-{h,l,b,s,t}.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory for produced files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Kernel thread count (sets MATMUL_NUM_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if self.preset.is_some() {
            rc.preset.clone_from(&self.preset);
        }
        if self.out_dir.is_some() {
            rc.out_dir.clone_from(&self.out_dir);
        }
        Ok(rc)
    }

    fn out_dir(&self, rc: &RunConfig) -> Result<PathBuf> {
        let dir = rc.out_dir.clone().unwrap_or_else(|| PathBuf::from("rod_out"));
        std::fs::create_dir_all(&dir).map_err(|e| RodError::io(&dir, e))?;
        Ok(dir)
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the decoder on a dataset; the encoder stays frozen.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset split root (ORFD-style layout by default).
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        /// Dataset layout config file.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Fail on unpaired images/masks instead of skipping them.
        #[arg(long)]
        strict: bool,
    },
    /// Evaluate a checkpoint on a dataset and report metrics.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Predict masks/overlays for images.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use freshly initialized weights instead of a checkpoint.
        #[arg(long)]
        random_weights: bool,
        /// Export style: mask, overlay or both.
        #[arg(long, default_value = "mask")]
        mode: String,
        /// Input image files.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Measure per-stage inference latency.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use freshly initialized weights instead of a checkpoint.
        #[arg(long)]
        random_weights: bool,
        /// Timed iterations.
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Untimed warmup iterations.
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Benchmark against this image instead of a random frame.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Time file reading/decoding inside the preprocess stage.
        #[arg(long)]
        include_io: bool,
    },
    /// List the contents of a checkpoint archive.
    InspectCkpt {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// CLI entry point; returns the process exit code.
pub fn run<I>(argv: I) -> i32
where
    I: IntoIterator,
    I::Item: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("ROD_LOG")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            }
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn apply_threads(threads: Option<usize>, default_single: bool) {
    if let Some(n) = threads {
        std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    } else if default_single && std::env::var_os("MATMUL_NUM_THREADS").is_none() {
        std::env::set_var("MATMUL_NUM_THREADS", "1");
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            common,
            dataset_root,
            layout,
            strict,
        } => {
            apply_threads(common.threads, false);
            let mut rc = common.run_config()?;
            if dataset_root.is_some() {
                rc.dataset_root = dataset_root;
            }
            if layout.is_some() {
                rc.layout = layout;
            }
            match rc.precision()? {
                Precision::F32 => cmd_train::<f32>(&common, &rc, strict),
                Precision::F64 => cmd_train::<f64>(&common, &rc, strict),
            }
        }
        Cmd::Eval {
            common,
            checkpoint,
            dataset_root,
            layout,
            strict,
        } => {
            apply_threads(common.threads, false);
            let mut rc = common.run_config()?;
            if dataset_root.is_some() {
                rc.dataset_root = dataset_root;
            }
            if layout.is_some() {
                rc.layout = layout;
            }
            match archive_dtype(&checkpoint)? {
                Dtype::F32 => cmd_eval::<f32>(&common, &rc, &checkpoint, strict),
                Dtype::F64 => cmd_eval::<f64>(&common, &rc, &checkpoint, strict),
            }
        }
        Cmd::Infer {
            common,
            checkpoint,
            random_weights,
            mode,
            images,
        } => {
            apply_threads(common.threads, false);
            let rc = common.run_config()?;
            match model_dtype(&checkpoint, random_weights, &rc)? {
                Dtype::F32 => cmd_infer::<f32>(&common, &rc, checkpoint.as_deref(), &mode, &images),
                Dtype::F64 => cmd_infer::<f64>(&common, &rc, checkpoint.as_deref(), &mode, &images),
            }
        }
        Cmd::Bench {
            common,
            checkpoint,
            random_weights,
            iters,
            warmup,
            image,
            include_io,
        } => {
            // single-threaded by default so stage attribution is unambiguous
            apply_threads(common.threads, true);
            let rc = common.run_config()?;
            match model_dtype(&checkpoint, random_weights, &rc)? {
                Dtype::F32 => cmd_bench::<f32>(
                    &common,
                    &rc,
                    checkpoint.as_deref(),
                    iters,
                    warmup,
                    image,
                    include_io,
                ),
                Dtype::F64 => cmd_bench::<f64>(
                    &common,
                    &rc,
                    checkpoint.as_deref(),
                    iters,
                    warmup,
                    image,
                    include_io,
                ),
            }
        }
        Cmd::InspectCkpt { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn archive_dtype(path: &Path) -> Result<Dtype> {
    CheckpointArchive::read(path)?.dtype()
}

fn model_dtype(checkpoint: &Option<PathBuf>, random_weights: bool, rc: &RunConfig) -> Result<Dtype> {
    match (checkpoint, random_weights) {
        (Some(p), false) => archive_dtype(p),
        (None, true) => Ok(match rc.precision()? {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }),
        (Some(_), true) => Err(RodError::Usage(
            "--checkpoint and --random-weights are mutually exclusive".into(),
        )),
        (None, false) => Err(RodError::Usage(
            "either --checkpoint or --random-weights is required".into(),
        )),
    }
}

fn load_model<T: Elem>(
    checkpoint: Option<&Path>,
    rc: &RunConfig,
) -> Result<Model<T>> {
    match checkpoint {
        Some(p) => load_checkpoint(p),
        None => Model::new_random(rc.model_config()?, rc.seed.unwrap_or(0)),
    }
}

fn dataset_samples<T: Elem>(
    rc: &RunConfig,
    split: &str,
    strict: bool,
    input_size: usize,
) -> Result<DiskSamples<T>> {
    let root = rc
        .dataset_root
        .clone()
        .ok_or_else(|| RodError::Usage("--dataset-root (or dataset_root in the config) is required".into()))?;
    let layout = match &rc.layout {
        Some(p) => LayoutConfig::from_file(p)?,
        None => LayoutConfig::default(),
    };
    let outcome = index_dataset(&root, &layout, split, strict)?;
    if !outcome.orphans.is_empty() {
        log::warn!("skipped {} unpaired dataset entries", outcome.orphans.len());
    }
    Ok(DiskSamples::new(outcome.index, input_size, rc.preprocess_config()))
}

fn cmd_train<T: Elem>(common: &CommonArgs, rc: &RunConfig, strict: bool) -> Result<()> {
    let cfg = rc.model_config()?;
    let train_cfg = rc.train_config()?;
    let out_dir = common.out_dir(rc)?;
    let samples = dataset_samples::<T>(rc, "train", strict, cfg.input_size)?;
    let mut model = Model::<T>::new_random(cfg, train_cfg.seed)?;
    let log_path = out_dir.join("loss.csv");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| RodError::io(&log_path, e))?;
    let ckpt_dir = out_dir.clone();
    let curve = train_loop(
        &samples,
        &mut model,
        &train_cfg,
        Some(&mut log_file),
        |step, m| save_checkpoint(m, &ckpt_dir.join(format!("step{step:06}.ckpt"))),
    )?;
    let final_path = out_dir.join("model.ckpt");
    save_checkpoint(&model, &final_path)?;
    if let Some(last) = curve.last() {
        println!(
            "trained {} steps on {} samples; final loss {:.6}; checkpoint {}",
            curve.len(),
            samples.index.samples.len(),
            last.loss,
            final_path.display()
        );
    }
    Ok(())
}

fn cmd_eval<T: Elem>(common: &CommonArgs, rc: &RunConfig, checkpoint: &Path, strict: bool) -> Result<()> {
    let model: Model<T> = load_checkpoint(checkpoint)?;
    let samples = dataset_samples::<T>(rc, "test", strict, model.cfg.input_size)?;
    let outcome = evaluate_dataset(&model, &samples)?;
    println!("{}", outcome.report);
    println!();
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", outcome.report.csv_row());
    if !outcome.failures.is_empty() {
        println!("failed samples: {}", outcome.failures.len());
    }
    let out_dir = common.out_dir(rc)?;
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(
        &csv_path,
        format!("{}\n{}\n", MetricReport::CSV_HEADER, outcome.report.csv_row()),
    )
    .map_err(|e| RodError::io(&csv_path, e))?;
    Ok(())
}

fn cmd_infer<T: Elem>(
    common: &CommonArgs,
    rc: &RunConfig,
    checkpoint: Option<&Path>,
    mode: &str,
    images: &[PathBuf],
) -> Result<()> {
    let model = load_model::<T>(checkpoint, rc)?;
    let out_dir = common.out_dir(rc)?;
    let prep = rc.preprocess_config();
    let alpha = rc.overlay_alpha.unwrap_or(0.5);
    let (want_mask, want_overlay) = match mode {
        "mask" => (true, false),
        "overlay" => (false, true),
        "both" => (true, true),
        other => {
            return Err(RodError::Usage(format!(
                "unknown mode {other:?}, expected mask, overlay or both"
            )))
        }
    };
    for path in images {
        let rgb = image::open(path)
            .map_err(|e| RodError::Data(format!("cannot open {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = rgb.dimensions();
        let tensor = preprocess_image::<T>(&rgb, model.cfg.input_size, &prep)
            .insert_axis(ndarray::Axis(0));
        let logits = model.forward(&tensor, (h as usize, w as usize))?;
        let mask = argmax_classes(&logits);
        let mask2 = mask.index_axis(ndarray::Axis(0), 0).to_owned();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| RodError::Usage(format!("bad image path {}", path.display())))?;
        if want_mask {
            let out = out_dir.join(format!("{stem}_mask.png"));
            export_prediction(&mask2, None, &out, ExportMode::Mask)?;
            println!("wrote {}", out.display());
        }
        if want_overlay {
            let out = out_dir.join(format!("{stem}_overlay.png"));
            export_prediction(&mask2, Some(&rgb), &out, ExportMode::Overlay { alpha })?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench<T: Elem>(
    common: &CommonArgs,
    rc: &RunConfig,
    checkpoint: Option<&Path>,
    iters: usize,
    warmup: usize,
    image: Option<PathBuf>,
    include_io: bool,
) -> Result<()> {
    let model = load_model::<T>(checkpoint, rc)?;
    let input = match image {
        Some(p) => InputSpec::Image(p),
        None => InputSpec::Random {
            seed: rc.seed.unwrap_or(0),
            size: model.cfg.input_size,
        },
    };
    let opts = BenchOptions {
        warmup,
        iters,
        include_io,
        out_size: None,
        prep: rc.preprocess_config(),
    };
    let report = bench_inference(&model, &input, &opts)?;
    println!("{report}");
    println!();
    print!("{}", report.to_csv());
    if let Some(dir) = &rc.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| RodError::io(dir, e))?;
        let csv_path = dir.join("latency.csv");
        std::fs::write(&csv_path, report.to_csv()).map_err(|e| RodError::io(&csv_path, e))?;
    }
    let _ = common;
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let archive = CheckpointArchive::read(path)?;
    let m = &archive.manifest;
    println!(
        "format v{}, {} tensors, dtype {}",
        m.version,
        m.tensors.len(),
        archive.dtype()?.name()
    );
    println!(
        "config: input {}x{} patch {} embed {} depth {} heads {} decoder_width {} fusion_width {} classes {}",
        m.config.input_size,
        m.config.input_size,
        m.config.patch_size,
        m.config.embed_dim,
        m.config.depth,
        m.config.num_heads,
        m.config.decoder_width,
        m.config.fusion_width,
        m.config.num_classes
    );
    let mut enc = 0usize;
    let mut dec = 0usize;
    for t in &m.tensors {
        println!("{:<44} {:>4} {:?}", t.name, t.dtype.name(), t.shape);
        if t.name.starts_with("encoder.") {
            enc += 1;
        } else {
            dec += 1;
        }
    }
    println!("encoder group: {enc} tensors; decoder group: {dec} tensors");
    Ok(())
}
