mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pnp_depth::analysis::{sweep, time_inference, Benchmark, Sampling, Sweep, SweepKind};
use pnp_depth::checkpoint;
use pnp_depth::metrics::{csv_row, CSV_HEADER};
use pnp_depth::net::Model;
use pnp_depth::pnm;
use pnp_depth::refine::{refine_batch, BatchReport, RefineStatus};
use pnp_depth::scene::{generate_set, Scene};
use pnp_depth::train::{mean_depth_baseline, train};

use crate::config::{RunConfig, KEYS};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const MIN_TIMING_RUNS: usize = 30;

#[derive(Parser)]
#[command(name = "pnp", version, about = "Inference-time depth refinement from sparse observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes as PPM (rgb) and 16-bit PGM (depth, mm).
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of scenes [default: n_train from the config]
        #[arg(long)]
        n: Option<usize>,
        /// Base seed [default: seed from the config]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a depth network and write a checkpoint plus training curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by `pnp gen`; scenes are generated when omitted.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine held-out predictions and report metrics before and after.
    Refine {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the metrics CSVs and images [default: out_dir]
        #[arg(long)]
        report: Option<PathBuf>,
        /// Skip per-scene depth and improvement images.
        #[arg(long)]
        no_images: bool,
    },
    /// Sweep one setting and write a CSV row per value.
    Sweep {
        /// iters, tap, samples or lidar
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time plain inference against inference with refinement.
    Time {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = MIN_TIMING_RUNS)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List configuration keys and their defaults.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<pnp_depth::Error>(), Some(pnp_depth::Error::Numeric { .. })));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Gen { config, n, seed, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_gen(&cfg, n.unwrap_or(cfg.n_train), seed.unwrap_or(cfg.train_seed()), &out)
        }
        Command::Train { config, scenes, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_train(&cfg, scenes.as_deref(), &out)
        }
        Command::Refine {
            config,
            checkpoint,
            report,
            no_images,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let out = report.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_refine(&cfg, &checkpoint, &out, !no_images)
        }
        Command::Sweep {
            kind,
            config,
            checkpoint,
            out,
        } => {
            let kind: SweepKind = kind.parse()?;
            let cfg = RunConfig::load(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_sweep(&cfg, kind, &checkpoint, &out)
        }
        Command::Time {
            config,
            checkpoint,
            runs,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_time(&cfg, &checkpoint, runs, &out)
        }
        Command::Config => {
            for (k, v) in KEYS {
                println!("{k} = {v}");
            }
            Ok(0)
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating directory {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "index,seed,rgb,depth,rgb_crc32,depth_crc32";

fn cmd_gen(cfg: &RunConfig, n: usize, seed: u64, out: &Path) -> Result<u8> {
    create_dir(out)?;
    let scenes = generate_set(seed, n, &cfg.scene)?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, s) in scenes.iter().enumerate() {
        let rgb_name = format!("scene_{i:04}_rgb.ppm");
        let depth_name = format!("scene_{i:04}_depth.pgm");
        let rgb = pnm::rgb_to_ppm(&s.rgb)?;
        let depth = pnm::depth_to_pgm(&s.depth)?;
        write(&out.join(&rgb_name), &rgb)?;
        write(&out.join(&depth_name), &depth)?;
        manifest.push_str(&format!(
            "{i},{},{rgb_name},{depth_name},{:08x},{:08x}\n",
            s.seed,
            crc32fast::hash(&rgb),
            crc32fast::hash(&depth)
        ));
    }
    write(&out.join(MANIFEST), &manifest)?;
    print!("{manifest}");
    Ok(0)
}

fn read_scenes(dir: &Path, cfg: &RunConfig) -> Result<Vec<Scene>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let mut scenes = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            bail!("{}: line {}: expected 6 fields", manifest_path.display(), n + 1);
        }
        let seed: u64 = fields[1]
            .parse()
            .with_context(|| format!("{}: line {}: bad seed", manifest_path.display(), n + 1))?;
        let load = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            fs::read(&p).with_context(|| format!("scene file {}", p.display()))
        };
        let rgb_path = dir.join(fields[2]);
        let depth_path = dir.join(fields[3]);
        let rgb = pnm::ppm_to_rgb(&load(fields[2])?).with_context(|| format!("scene file {}", rgb_path.display()))?;
        let depth =
            pnm::pgm_to_depth(&load(fields[3])?).with_context(|| format!("scene file {}", depth_path.display()))?;
        if depth.data().iter().any(|&d| d <= 0.0) {
            bail!("scene file {}: depth must be positive", depth_path.display());
        }
        if rgb.shape()[2..] != depth.shape()[2..] {
            bail!("scene file {}: size differs from {}", rgb_path.display(), depth_path.display());
        }
        let mut params = cfg.scene;
        params.height = depth.shape()[2];
        params.width = depth.shape()[3];
        scenes.push(Scene {
            rgb,
            depth,
            seed,
            params,
            objects: Vec::new(),
        });
    }
    Ok(scenes)
}

fn cmd_train(cfg: &RunConfig, scene_dir: Option<&Path>, out: &Path) -> Result<u8> {
    let scenes = match scene_dir {
        Some(dir) => read_scenes(dir, cfg)?,
        None => generate_set(cfg.train_seed(), cfg.n_train, &cfg.scene)?,
    };
    create_dir(out)?;
    let init = Model::build(cfg.arch, cfg.input_mode, cfg.seed)?;
    let report = train(&init, &scenes, &cfg.train_config())?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{e},{l:.9e}\n"));
    }
    write(&out.join("train_curve.csv"), &curve)?;
    let ckpt = out.join("model.pnpd");
    checkpoint::save(&report.model, &ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    println!(
        "trained {} ({}) on {} scenes: {} parameters, mean-depth baseline {:.4} m",
        cfg.arch,
        cfg.input_mode.name(),
        scenes.len(),
        report.model.parameter_count(),
        mean_depth_baseline(&scenes)
    );
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        println!("loss: first epoch {first:.6}, last epoch {last:.6}");
    }
    println!("checkpoint: {}", ckpt.display());
    match report.diverged_at {
        Some(epoch) => {
            eprintln!("error: training diverged in epoch {epoch}; wrote the last finite checkpoint");
            Ok(EXIT_NUMERIC)
        }
        None => Ok(0),
    }
}

fn sampling(cfg: &RunConfig) -> Sampling {
    match cfg.lidar_preset {
        Some(p) => Sampling::Lidar(p),
        None => Sampling::Uniform(cfg.n_samples),
    }
}

fn benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    Ok(Benchmark::new(cfg.test_seed(), cfg.n_test, &cfg.scene, cfg.seed)?)
}

fn cmd_refine(cfg: &RunConfig, ckpt: &Path, out: &Path, images: bool) -> Result<u8> {
    let model = load_model(ckpt)?;
    let pnp = cfg.pnp_config(&model);
    pnp.validate()?;
    model.tap_index(&pnp.tap)?;
    let bench = benchmark(cfg)?;
    let cases = bench.cases(&model, sampling(cfg))?;
    create_dir(out)?;
    let report = refine_batch(&model, &cases, &pnp);

    let n_obs = if cases.is_empty() {
        0.0
    } else {
        cases.iter().map(|c| c.sparse.count() as f64).sum::<f64>() / cases.len() as f64
    };
    let pct = if cases.is_empty() {
        0.0
    } else {
        100.0 * cases.iter().map(|c| c.sparse.density()).sum::<f64>() / cases.len() as f64
    };
    let n_obs = n_obs.round() as usize;
    let mut table = format!("{CSV_HEADER}\n");
    if let (Some(before), Some(after)) = (report.mean_before(), report.mean_after()) {
        table.push_str(&csv_row("base", n_obs, pct, &before, None));
        table.push('\n');
        table.push_str(&csv_row("pnp", n_obs, pct, &after, Some(&before)));
        table.push('\n');
    }
    write(&out.join("metrics.csv"), &table)?;
    write(&out.join("per_scene.csv"), per_scene_csv(&bench, &report))?;
    if images {
        write_images(out, &bench, &cases, &report)?;
    }
    print!("{table}");
    println!(
        "tap {}, alpha {}, iterations {}, loss {}, rule {}; sparse loss decreased in {}/{} scenes",
        pnp.tap,
        pnp.alpha,
        pnp.iterations,
        pnp.loss,
        pnp.rule,
        report.loss_decreased(),
        cases.len()
    );
    if report.failures > 0 {
        eprintln!("error: {} of {} scenes failed numerically", report.failures, cases.len());
        return Ok(EXIT_NUMERIC);
    }
    Ok(0)
}

fn per_scene_csv(bench: &Benchmark, report: &BatchReport) -> String {
    let mut s = String::from("scene,seed,rmse_before,rmse_after,mae_before,mae_after,loss_first,loss_last,status\n");
    for (i, o) in report.outcomes.iter().enumerate() {
        let seed = bench.scenes[i].seed;
        match o {
            Some(o) => {
                let status = match o.status {
                    RefineStatus::Ok => "ok".to_string(),
                    RefineStatus::NoObservation => "no_observation".to_string(),
                    RefineStatus::NumericFailure { iteration } => format!("numeric_failure@{iteration}"),
                };
                s.push_str(&format!(
                    "{i},{seed},{:.6},{:.6},{:.6},{:.6},{:.9e},{:.9e},{status}\n",
                    o.before.rmse, o.after.rmse, o.before.mae, o.after.mae, o.loss_first, o.loss_last
                ));
            }
            None => s.push_str(&format!("{i},{seed},nan,nan,nan,nan,nan,nan,error\n")),
        }
    }
    s
}

fn write_images(
    out: &Path,
    bench: &Benchmark,
    cases: &[pnp_depth::refine::RefineCase],
    report: &BatchReport,
) -> Result<()> {
    let dir = out.join("images");
    create_dir(&dir)?;
    for (i, (case, o)) in cases.iter().zip(&report.outcomes).enumerate() {
        let Some(o) = o else { continue };
        let stem = format!("scene_{i:04}");
        write(&dir.join(format!("{stem}_base.pgm")), pnm::depth_to_pgm(&o.base)?)?;
        write(&dir.join(format!("{stem}_pnp.pgm")), pnm::depth_to_pgm(&o.refined)?)?;
        write(&dir.join(format!("{stem}_truth.pgm")), pnm::depth_to_pgm(&bench.scenes[i].depth)?)?;
        write(&dir.join(format!("{stem}_sparse.pgm")), pnm::depth_to_pgm(&case.sparse.values)?)?;
        write(&dir.join(format!("{stem}_mask.pgm")), pnm::mask_to_pgm(&case.sparse.mask)?)?;
        let map = pnm::improvement_map(&o.base, &o.refined, &case.truth)?;
        write(&dir.join(format!("{stem}_improvement.pgm")), &map.pgm)?;
        write(&dir.join(format!("{stem}_improvement.txt")), map.sidecar())?;
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, kind: SweepKind, ckpt: &Path, out: &Path) -> Result<u8> {
    let model = load_model(ckpt)?;
    let pnp = cfg.pnp_config(&model);
    model.tap_index(&pnp.tap)?;
    let bench = benchmark(cfg)?;
    create_dir(out)?;
    let result = sweep(&model, &bench, &pnp, cfg.n_samples, &Sweep::default_for(kind, &model))?;
    let csv = result.to_csv();
    write(&out.join(format!("sweep_{kind}.csv")), &csv)?;
    write(&out.join(format!("sweep_{kind}_timing.csv")), result.timing_csv())?;
    print!("{csv}");
    if kind == SweepKind::Lidar {
        let ordering = format!("coverage_ordering,{}\n", result.coverage_ordering().join(">"));
        write(&out.join("sweep_lidar_ordering.csv"), &ordering)?;
        print!("{ordering}");
    }
    let failures: usize = result.rows.iter().map(|r| r.failures).sum();
    if failures > 0 {
        eprintln!("error: {failures} refinements failed during the sweep");
        return Ok(EXIT_NUMERIC);
    }
    Ok(0)
}

fn cmd_time(cfg: &RunConfig, ckpt: &Path, runs: usize, out: &Path) -> Result<u8> {
    let model = load_model(ckpt)?;
    let pnp = cfg.pnp_config(&model);
    model.tap_index(&pnp.tap)?;
    if runs < MIN_TIMING_RUNS {
        eprintln!(
            "warning: {runs} run(s) give high-variance timings; use --runs {MIN_TIMING_RUNS} or more"
        );
    }
    let bench = Benchmark::new(cfg.test_seed(), 1, &cfg.scene, cfg.seed)?;
    let case = bench.cases(&model, sampling(cfg))?.remove(0);
    let timing = time_inference(&model, &case, &pnp, runs)?;
    create_dir(out)?;
    let csv = format!("{}\n{}\n", pnp_depth::analysis::Timing::CSV_HEADER, timing.csv_row());
    write(&out.join("timing.csv"), &csv)?;
    print!("{csv}");
    Ok(0)
}
