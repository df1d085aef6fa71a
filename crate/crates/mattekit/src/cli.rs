//! Batch command-line driver: synth | train | infer | eval | bench.
//!
//! All logs are line-oriented key=value on stdout. Exit codes: 0 success,
//! 2 usage error, 3 I/O or format error, 4 numeric failure.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::data;
use crate::decoder::{AlphaGrid, Res};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::numerics::{ParamSet, SeededRng, Tensor};
use crate::pipeline::{self, TrainOptions};
use crate::regions::GuidanceMask;
use crate::scheduler::make_schedule;
use crate::sparse::{self, SparsityMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(name = "mattekit", version, about = "Mask-guided alpha matting pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic compositing dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Refinement iteration count T of the transition schedule.
        #[arg(long, default_value_t = 6)]
        t: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long = "lambda-c", default_value_t = 0.25)]
        lambda_c: f64,
        /// Refiner-fitting steps after decoder training (0 disables).
        #[arg(long = "sparse-steps", default_value_t = 100)]
        sparse_steps: usize,
        #[arg(long = "sparse-lr", default_value_t = 0.05)]
        sparse_lr: f64,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "log-every", default_value_t = 50)]
        log_every: usize,
    },
    /// Refine one image/mask pair with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Output base path: writes <out>.pgm and <out>_conf.pgm.
        #[arg(long)]
        out: PathBuf,
        /// Refinement iterations; overrides --t when given.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 6)]
        t: usize,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        /// Skip detail recovery and emit the upsampled quarter-res matte.
        #[arg(long = "no-sparse")]
        no_sparse: bool,
        /// Print a decode_calls counter line.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate predictions against dataset ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sparse-vs-dense compute comparison at fixed occupancies.
    Bench {
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Entry point used by `main` and by tests. `argv` includes the program
/// name.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            eprint!("{e}");
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape(_) | Error::Domain(_) => EXIT_USAGE,
        Error::InvalidValue(_) => EXIT_NUMERIC,
        Error::Format { .. } | Error::Io(_) | Error::Logic(_) => EXIT_IO,
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            out,
            count,
            size,
            seed,
        } => {
            data::synth_generate(&out, count, size, seed)?;
            println!("count={count} size={size} seed={seed} out={}", out.display());
            Ok(())
        }
        Cmd::Train {
            data,
            out,
            steps,
            t,
            lr,
            lambda_c,
            sparse_steps,
            sparse_lr,
            tau,
            seed,
            log_every,
        } => cmd_train(
            &data,
            &out,
            TrainOptions {
                steps,
                lr,
                lambda_c,
                sparse_steps,
                sparse_lr,
                tau,
            },
            t,
            seed,
            log_every,
        ),
        Cmd::Infer {
            ckpt,
            image,
            mask,
            out,
            steps,
            t,
            tau,
            no_sparse,
            trace,
            seed: _,
        } => cmd_infer(&ckpt, &image, &mask, &out, steps.unwrap_or(t), tau, !no_sparse, trace),
        Cmd::Eval { data, pred, seed: _ } => {
            let table = eval_dataset(&data, &pred)?;
            print!("{table}");
            Ok(())
        }
        Cmd::Bench { size, seed } => cmd_bench(size, seed),
    }
}

fn validate_run(size: usize, t: usize, tau: f64) -> Result<()> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::domain(format!("size {size} must be divisible by 8")));
    }
    if t == 0 {
        return Err(Error::domain("iteration count must be >= 1".to_string()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("tau {tau} outside [0,1]")));
    }
    Ok(())
}

fn cmd_train(
    data_dir: &Path,
    out: &Path,
    opts: TrainOptions,
    t: usize,
    seed: u64,
    log_every: usize,
) -> Result<()> {
    let ids = data::read_manifest(data_dir)?;
    if ids.is_empty() {
        return Err(Error::domain("dataset manifest is empty".to_string()));
    }
    let samples: Vec<data::Sample> = ids
        .iter()
        .map(|id| data::load_sample(data_dir, id))
        .collect::<Result<_>>()?;
    let size = samples[0].image.dims()[1];
    validate_run(size, t, opts.tau)?;
    for s in &samples {
        if s.image.dims() != [3, size, size] {
            return Err(Error::shape(format!(
                "sample {} has dims {:?}, expected 3x{size}x{size}",
                s.id,
                s.image.dims()
            )));
        }
    }

    let mut ps = pipeline::init_model_params(size, seed)?;
    let schedule = make_schedule(t)?;
    let mut rng = SeededRng::new(seed ^ 0x7261_696e); // distinct stream from init
    let every = log_every.max(1);
    pipeline::train_model(&samples, &mut ps, &schedule, &opts, &mut rng, |phase, step, loss| {
        if step % every == 0 {
            match phase {
                "train" => println!("step={step} loss={}", metrics::format_sig(loss, 6)),
                _ => println!("sparse_step={step} loss={}", metrics::format_sig(loss, 6)),
            }
        }
    })?;

    let bytes = data::save_params(&ps)?;
    std::fs::write(out, bytes)?;
    println!("checkpoint={}", out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path)?;
    let (ps, crc_ok) = data::load_params(&bytes)?;
    if !crc_ok {
        eprintln!("warning: checkpoint {} has a CRC mismatch", path.display());
    }
    Ok(ps)
}

fn read_mask(path: &Path) -> Result<GuidanceMask> {
    let t = data::pnm_read(path)?;
    if t.rank() != 2 {
        return Err(Error::shape("mask must be a P5 grayscale file".to_string()));
    }
    let bits = t.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
    GuidanceMask::new(t.dims()[0], t.dims()[1], bits)
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    ckpt: &Path,
    image_path: &Path,
    mask_path: &Path,
    out: &Path,
    t: usize,
    tau: f64,
    use_sparse: bool,
    trace: bool,
) -> Result<()> {
    let ps = load_checkpoint(ckpt)?;
    let image = data::pnm_read(image_path)?;
    if image.rank() != 3 {
        return Err(Error::shape("image must be a P6 color file".to_string()));
    }
    let size = image.dims()[1];
    validate_run(size, t, tau)?;
    let mask = read_mask(mask_path)?;
    let schedule = make_schedule(t)?;
    let result = pipeline::refine(&image, &mask, &ps, &schedule, tau, use_sparse)?;

    let alpha_path = out.with_file_name(format!(
        "{}.pgm",
        out.file_name().unwrap_or_default().to_string_lossy()
    ));
    let conf_path = out.with_file_name(format!(
        "{}_conf.pgm",
        out.file_name().unwrap_or_default().to_string_lossy()
    ));
    data::pnm_write(&alpha_path, &result.alpha.to_tensor())?;
    data::pnm_write(&conf_path, &result.error_full.to_tensor())?;
    if trace {
        println!("decode_calls={}", result.decode_calls);
    }
    println!("alpha={} conf={}", alpha_path.display(), conf_path.display());
    Ok(())
}

/// Per-sample metric lines plus the arithmetic mean: the eval subcommand's
/// entire stdout payload.
pub fn eval_dataset(data_dir: &Path, pred_dir: &Path) -> Result<String> {
    let ids = data::read_manifest(data_dir)?;
    if ids.is_empty() {
        return Err(Error::domain("dataset manifest is empty".to_string()));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let gt_t = data::pnm_read(&data_dir.join(format!("{id}_alpha.pgm")))?;
        let pred_t = data::pnm_read(&pred_dir.join(format!("{id}.pgm")))?;
        let gt = AlphaGrid::from_tensor_clamped(&gt_t, Res::Full)?;
        let pred = AlphaGrid::from_tensor_clamped(&pred_t, Res::Full)?;
        rows.push((id.clone(), MetricReport::compute(&pred, &gt)?));
    }
    Ok(report_table(&rows))
}

/// `id sad mse grad conn` per sample plus a trailing arithmetic-mean line.
pub fn report_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let fmt = |r: &MetricReport| {
        format!(
            "{} {} {} {}",
            metrics::format_sig(r.sad, 6),
            metrics::format_sig(r.mse, 6),
            metrics::format_sig(r.grad, 6),
            metrics::format_sig(r.conn, 6)
        )
    };
    for (id, r) in rows {
        out.push_str(&format!("{id} {}\n", fmt(r)));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    out.push_str(&format!("mean {}\n", fmt(&MetricReport::mean_of(&reports))));
    out
}

fn cmd_bench(size: usize, seed: u64) -> Result<()> {
    if size % 4 != 0 || size == 0 {
        return Err(Error::domain(format!("bench size {size} must be divisible by 4")));
    }
    let mut rng = SeededRng::new(seed);
    let mut ps = ParamSet::new();
    sparse::init_sparse_params(&mut ps, &mut rng)?;
    // exercise a non-identity head so both paths do the same arithmetic
    ps.get_mut("sp.head.k").unwrap().value =
        rng.normal_tensor(&[1, sparse::REFINER_WIDTH, 1, 1], 0.3);

    let q = size / 4;
    let a_l = AlphaGrid::new(
        q,
        q,
        (0..q * q).map(|_| rng.next_f64()).collect(),
        Res::Quarter,
    )?;
    let image = Tensor::from_parts(
        vec![3, size, size],
        (0..3 * size * size).map(|_| rng.next_f64()).collect(),
    );

    for occupancy in [0.01, 0.05, 0.1, 0.5, 1.0] {
        let target = ((size * size) as f64 * occupancy).round() as usize;
        // partial Fisher-Yates over the pixel index space
        let mut indices: Vec<usize> = (0..size * size).collect();
        for i in 0..target.min(size * size) {
            let j = i + rng.below(size * size - i);
            indices.swap(i, j);
        }
        let coords: Vec<(usize, usize)> = indices[..target]
            .iter()
            .map(|&idx| (idx / size, idx % size))
            .collect();
        let map = SparsityMap::from_coords(size, size, &coords)?;
        let (sparse_macs, dense_macs) = sparse::mac_count(&map, &ps);

        let sparse_ms = time_best(3, || {
            sparse::sparse_refine(&a_l, &image, &map, &ps).map(|_| ())
        })?;
        let dense_ms = time_best(1, || {
            sparse::dense_zeroed_oracle(&a_l, &image, &map, &ps).map(|_| ())
        })?;
        println!(
            "occupancy={occupancy} sparse_macs={sparse_macs} dense_macs={dense_macs} \
             sparse_ms={sparse_ms:.3} dense_ms={dense_ms:.3}"
        );
    }
    Ok(())
}

fn time_best(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = std::time::Instant::now();
        f()?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}
