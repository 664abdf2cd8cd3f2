//! Per-stage inference latency harness.
//!
//! Each timed iteration runs preprocess -> encoder -> decoder -> postprocess
//! with a monotonic clock read between stages, after a configurable number
//! of untimed warmup iterations. Disk I/O stays outside the timed region
//! unless explicitly included, mirroring a model-inference-only measurement;
//! FPS is 1000 / mean total milliseconds.
//!
//! Kernel invocation counts for the timed region are captured from the op
//! trace, which is how tests pin down that two runs with the same seed
//! execute the identical operation sequence even though wall times wander.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use image::RgbImage;
use ndarray::Axis;

use crate::config::PreprocessConfig;
use crate::data::preprocess_image;
use crate::error::{Result, RodError};
use crate::model::Model;
use crate::tensor::ops::argmax_classes;
use crate::tensor::{trace, Elem};

/// Latency statistics for one pipeline stage, in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStats {
    pub name: &'static str,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

/// Execution environment notes attached to a report.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvNotes {
    pub threads: String,
    pub precision: &'static str,
    pub clock: String,
    pub clock_resolution_ns: u64,
}

/// Full benchmark result.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub stages: Vec<StageStats>,
    pub fps: f64,
    pub warmup: usize,
    pub iters: usize,
    pub env: EnvNotes,
    /// Kernel invocation counts over the timed iterations.
    pub op_trace: trace::OpTrace,
}

impl LatencyReport {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Stable CSV schema: `stage,mean_ms,p50_ms,p95_ms,samples` rows plus a
    /// final `fps` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,mean_ms,p50_ms,p95_ms,samples\n");
        for s in &self.stages {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                s.name, s.mean_ms, s.p50_ms, s.p95_ms, s.samples
            ));
        }
        out.push_str(&format!("fps,{:.6},,,\n", self.fps));
        out
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "latency over {} iters ({} warmup), threads={}, precision={}, clock={} (~{} ns)",
            self.iters,
            self.warmup,
            self.env.threads,
            self.env.precision,
            self.env.clock,
            self.env.clock_resolution_ns
        )?;
        writeln!(f, "{:<12} {:>12} {:>12} {:>12} {:>8}", "stage", "mean_ms", "p50_ms", "p95_ms", "samples")?;
        for s in &self.stages {
            writeln!(
                f,
                "{:<12} {:>12.3} {:>12.3} {:>12.3} {:>8}",
                s.name, s.mean_ms, s.p50_ms, s.p95_ms, s.samples
            )?;
        }
        write!(f, "fps          {:>12.3}", self.fps)
    }
}

/// What the harness feeds the model.
#[derive(Debug, Clone)]
pub enum InputSpec {
    /// Deterministic random RGB frame at the given square size.
    Random { seed: u64, size: usize },
    /// A real image file.
    Image(PathBuf),
}

/// Harness settings.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub warmup: usize,
    pub iters: usize,
    /// Re-read and re-decode the image inside the preprocess stage.
    pub include_io: bool,
    /// Logit resolution; defaults to the model input size.
    pub out_size: Option<(usize, usize)>,
    pub prep: PreprocessConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 10,
            iters: 100,
            include_io: false,
            out_size: None,
            prep: PreprocessConfig::default(),
        }
    }
}

fn synth_frame(seed: u64, size: usize) -> RgbImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::new(size as u32, size as u32);
    for px in img.pixels_mut() {
        px.0 = [rng.gen(), rng.gen(), rng.gen()];
    }
    img
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // nearest-rank on an ascending sample list
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn stats(name: &'static str, samples: &[f64]) -> StageStats {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    StageStats {
        name,
        mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        p50_ms: percentile(&sorted, 50.0),
        p95_ms: percentile(&sorted, 95.0),
        samples: samples.len(),
    }
}

fn clock_resolution_ns() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as u64);
    }
    best
}

/// Runs the per-stage latency benchmark.
pub fn bench_inference<T: Elem>(
    model: &Model<T>,
    input: &InputSpec,
    opts: &BenchOptions,
) -> Result<LatencyReport> {
    if opts.iters == 0 {
        return Err(RodError::Usage("bench needs at least one iteration".into()));
    }
    let s = model.cfg.input_size;
    let out_size = opts.out_size.unwrap_or((s, s));
    let (frame, path): (RgbImage, Option<&PathBuf>) = match input {
        InputSpec::Random { seed, size } => (synth_frame(*seed, *size), None),
        InputSpec::Image(p) => {
            let img = image::open(p)
                .map_err(|e| RodError::Data(format!("cannot open {}: {e}", p.display())))?
                .to_rgb8();
            (img, Some(p))
        }
    };

    let mut pre_ms = Vec::with_capacity(opts.iters);
    let mut enc_ms = Vec::with_capacity(opts.iters);
    let mut dec_ms = Vec::with_capacity(opts.iters);
    let mut post_ms = Vec::with_capacity(opts.iters);
    let mut total_ms = Vec::with_capacity(opts.iters);

    let run_once = |timings: Option<(
        &mut Vec<f64>,
        &mut Vec<f64>,
        &mut Vec<f64>,
        &mut Vec<f64>,
        &mut Vec<f64>,
    )>|
     -> Result<()> {
        let t0 = Instant::now();
        let source = if opts.include_io {
            match path {
                Some(p) => image::open(p)
                    .map_err(|e| RodError::Data(format!("cannot open {}: {e}", p.display())))?
                    .to_rgb8(),
                None => frame.clone(),
            }
        } else {
            frame.clone()
        };
        let tensor = preprocess_image::<T>(&source, s, &opts.prep).insert_axis(Axis(0));
        let t1 = Instant::now();
        let enc = model.encode(&tensor)?;
        let t2 = Instant::now();
        let logits = model.decode(&enc, out_size)?;
        let t3 = Instant::now();
        let mask = argmax_classes(&logits);
        std::hint::black_box(&mask);
        let t4 = Instant::now();
        if let Some((pre, e, d, post, tot)) = timings {
            pre.push((t1 - t0).as_secs_f64() * 1e3);
            e.push((t2 - t1).as_secs_f64() * 1e3);
            d.push((t3 - t2).as_secs_f64() * 1e3);
            post.push((t4 - t3).as_secs_f64() * 1e3);
            tot.push((t4 - t0).as_secs_f64() * 1e3);
        }
        Ok(())
    };

    for _ in 0..opts.warmup {
        run_once(None)?;
    }
    trace::reset();
    for _ in 0..opts.iters {
        run_once(Some((
            &mut pre_ms,
            &mut enc_ms,
            &mut dec_ms,
            &mut post_ms,
            &mut total_ms,
        )))?;
    }
    let op_trace = trace::snapshot();

    let total = stats("total", &total_ms);
    let fps = 1000.0 / total.mean_ms;
    let stages = vec![
        stats("preprocess", &pre_ms),
        stats("encoder", &enc_ms),
        stats("decoder", &dec_ms),
        stats("postprocess", &post_ms),
        total,
    ];
    Ok(LatencyReport {
        stages,
        fps,
        warmup: opts.warmup,
        iters: opts.iters,
        env: EnvNotes {
            threads: std::env::var("MATMUL_NUM_THREADS").unwrap_or_else(|_| "default".into()),
            precision: T::DTYPE.name(),
            clock: "std::time::Instant (monotonic)".into(),
            clock_resolution_ns: clock_resolution_ns(),
        },
        op_trace,
    })
}
