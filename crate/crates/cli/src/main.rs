//! `neumat`: train, render, validate, benchmark and inspect neural materials.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use neumat::harness::{bench_material, validate};
use neumat::neural::{NeuralConfig, NeuralMaterial};
use neumat::pfm::PfmImage;
use neumat::reference::{seeded_rng, ReferenceSource};
use neumat::render::{compute_metrics, render, Scene};
use neumat::trainer::{write_loss_csv, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "neumat", version, about = "Neural material baking and rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a neural material from a JSON job description.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a scene to a PFM image.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spp: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reference image; metrics against it are added to the report.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the sampler, quantization and latent-fetch checks on an archive.
    Validate {
        #[arg(long)]
        material: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Measure BRDF decoder throughput.
    Bench {
        #[arg(long)]
        material: PathBuf,
        #[arg(short = 'n', default_value_t = 100_000)]
        n: usize,
    },
    /// Print architecture and parameter histograms.
    Inspect {
        #[arg(long)]
        material: PathBuf,
    },
}

/// Training job file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    material: ReferenceSource,
    #[serde(default)]
    model: NeuralConfig,
    #[serde(default)]
    training: TrainConfig,
    output: PathBuf,
    #[serde(default)]
    loss_csv: Option<PathBuf>,
    /// Iterations between checkpoints; 0 writes only the final archive.
    #[serde(default)]
    checkpoint_every: usize,
    /// Seed for weight initialization; defaults to the training seed.
    #[serde(default)]
    init_seed: Option<u64>,
}

enum Failure {
    Input(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

fn input<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Input(format!("{ctx}: {e}"))
}

fn print_json(v: &impl Serialize) {
    use std::io::Write;
    // a closed pipe is not an error for a report printer
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("serializable report"));
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn save_state(t: &Trainer, output: &Path, csv: &Path) -> std::io::Result<()> {
    write_atomic(output, &t.material.to_archive())?;
    let opt = serde_json::to_vec(&t.optimizer_state()).expect("serializable optimizer state");
    write_atomic(&with_suffix(output, ".opt.json"), &opt)?;
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &t.history)?;
    write_atomic(csv, &buf)
}

fn cmd_train(config: &Path) -> Result<(), Failure> {
    let bytes = fs::read(config).map_err(input("reading config"))?;
    let job: TrainJob = serde_json::from_slice(&bytes).map_err(input("parsing config"))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
    let output = resolve(&job.output);
    let csv = job
        .loss_csv
        .as_deref()
        .map(resolve)
        .unwrap_or_else(|| output.with_extension("csv"));
    job.training.validate().map_err(input("training config"))?;
    let reference = job.material.resolve(Some(base)).map_err(input("material"))?;
    let mut rng = seeded_rng(job.init_seed.unwrap_or(job.training.seed));
    let material = NeuralMaterial::new(job.model.clone(), reference.param_dim(), &mut rng).map_err(input("model"))?;
    let mut trainer = Trainer::new(&reference, material, job.training.clone()).map_err(input("trainer"))?;
    let started = Instant::now();
    let mut ck_err = None;
    let result = trainer.run(job.checkpoint_every, |t| {
        log::info!(
            "iteration {}: brdf {:.5}",
            t.iteration(),
            t.history.last().map_or(f64::NAN, |r| r.brdf_l1log)
        );
        if let Err(e) = save_state(t, &output, &csv) {
            ck_err.get_or_insert(e);
        }
    });
    if let Some(e) = ck_err {
        return Err(Failure::Input(format!("writing checkpoint: {e}")));
    }
    match result {
        Ok(()) => {}
        Err(e @ TrainError::NonFinite { .. }) => {
            let dump = with_suffix(&output, ".nonfinite");
            let diag = json!({
                "error": e.to_string(),
                "iteration": trainer.iteration(),
                "history": trainer.history,
            });
            let written = fs::create_dir_all(&dump)
                .and_then(|_| fs::write(dump.join("material.nmat"), trainer.material.to_archive()))
                .and_then(|_| fs::write(dump.join("diagnostic.json"), serde_json::to_vec_pretty(&diag).unwrap()));
            let note = match written {
                Ok(()) => format!("state dumped to {}", dump.display()),
                Err(w) => format!("state dump failed: {w}"),
            };
            return Err(Failure::Numeric(format!("{e}; {note}")));
        }
        Err(e) => return Err(Failure::Input(e.to_string())),
    }
    save_state(&trainer, &output, &csv).map_err(input("writing outputs"))?;
    let last = trainer.history.last().copied();
    print_json(&json!({
        "output": output,
        "loss_csv": csv,
        "iterations": trainer.iteration(),
        "seconds": started.elapsed().as_secs_f64(),
        "final": last,
    }));
    Ok(())
}

fn cmd_render(
    scene_path: &Path,
    out: &Path,
    spp: Option<usize>,
    seed: Option<u64>,
    compare: Option<&Path>,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let (scene, desc) = Scene::load(scene_path).map_err(input("scene"))?;
    let mut cfg = desc.render.clone().unwrap_or_default();
    if let Some(s) = spp {
        cfg.spp = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(input("render config"))?;
    let reference = compare
        .map(|p| PfmImage::read(p).map_err(input("reading comparison image")))
        .transpose()?;
    let started = Instant::now();
    let img = render(&scene, &cfg).map_err(input("render"))?;
    let seconds = started.elapsed().as_secs_f64();
    if img.pixels.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Failure::Numeric("render produced non-finite pixels".into()));
    }
    img.to_pfm().write(out).map_err(input("writing image"))?;
    let metrics = match reference {
        Some(r) => {
            if r.width != img.width || r.height != img.height || r.channels != 3 {
                return Err(Failure::Input("comparison image has a different size".into()));
            }
            Some(compute_metrics(&img.values(), &r.data).map_err(input("metrics"))?)
        }
        None => None,
    };
    let rep = json!({
        "out": out,
        "width": img.width,
        "height": img.height,
        "spp": cfg.spp,
        "seed": cfg.seed,
        "seconds": seconds,
        "stats": img.stats,
        "metrics": metrics,
    });
    match report {
        Some(p) => fs::write(p, serde_json::to_vec_pretty(&rep).unwrap()).map_err(input("writing report"))?,
        None => print_json(&rep),
    }
    Ok(())
}

fn load_material(path: &Path) -> Result<NeuralMaterial, Failure> {
    NeuralMaterial::load(path).map_err(input("material archive"))
}

fn cmd_validate(path: &Path, seed: u64) -> Result<(), Failure> {
    let m = load_material(path)?;
    let rep = validate(&m, seed).map_err(input("validate"))?;
    print_json(&rep);
    if rep.passed {
        Ok(())
    } else {
        let failed: Vec<_> = rep.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Numeric(format!("failed checks: {}", failed.join(", "))))
    }
}

fn cmd_bench(path: &Path, n: usize) -> Result<(), Failure> {
    if n < 100_000 {
        return Err(Failure::Input(format!("-n must be at least 100000, got {n}")));
    }
    let m = load_material(path)?;
    let rep = bench_material(&m, n, 1).map_err(input("bench"))?;
    print_json(&rep);
    if rep.outputs_agree {
        Ok(())
    } else {
        Err(Failure::Numeric("fused and reference outputs disagree".into()))
    }
}

fn cmd_inspect(path: &Path) -> Result<(), Failure> {
    print_json(&load_material(path)?.inspect());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Render {
            scene,
            out,
            spp,
            seed,
            compare,
            report,
        } => cmd_render(scene, out, *spp, *seed, compare.as_deref(), report.as_deref()),
        Command::Validate { material, seed } => cmd_validate(material, *seed),
        Command::Bench { material, n } => cmd_bench(material, *n),
        Command::Inspect { material } => cmd_inspect(material),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(m) | Failure::Numeric(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
