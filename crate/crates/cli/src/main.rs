//! `c3dg`: synthetic data, quadrant splits, training, evaluation and theory
//! checks from the command line.
//!
//! Exit status: 0 on success, 2 for usage errors (unknown subcommands or
//! flags, required flags left out), 1 for everything that goes wrong while
//! reading, computing or writing.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use c3dg_core::cribnet::{read_model, write_model, ContextMode, CribModel};
use c3dg_core::evalcli::{
    bound_report, default_palette, entropy_report, eval_run, map_bytes, theorem1_summary, to_json, train_run,
    RunConfig, RunReport, Task,
};
use c3dg_core::hsidata::{
    bayes_oracle, quadrant_split, read_cube, read_labels, synth_generate, to_scene, write_cube, write_labels,
    DomainDataset, HsiCube, LabelMap,
};
use c3dg_core::io::write_atomic;
use c3dg_core::losses::loss_grad_suite;
use c3dg_core::numcore::{primitive_suite, GradCheckReport};
use c3dg_core::theorylab::disentangle_probe;
use c3dg_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "c3dg", version, about = "Conditional domain generalization for hyperspectral pixels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (training and synthetic data).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured context mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ContextMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene (HSIC cube + HSIL labels) and its oracle accuracies.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a scene into its four quadrant domains.
    Split {
        /// Cube file; labels are read from the same path with extension `.hsil`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the source domains and score the held-out one.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Scene cube (default: the synthetic task of the configuration).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to write the trained model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Classification map of the held-out domain (binary PPM).
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Score a trained model on the held-out domain.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Run one of the diagnostic checks.
    Check {
        #[arg(value_enum)]
        what: CheckKind,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained model (all checks except `grads`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the JSON result here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckKind {
    Grads,
    Theorem1,
    Entropy,
    Bound,
    Disentangle,
}

fn parse_mode(s: &str) -> std::result::Result<ContextMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("c3dg: usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("c3dg: error: {e}");
            ExitCode::from(1)
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn dispatch(cmd: Command) -> std::result::Result<ExitCode, Failure> {
    match cmd {
        Command::Synth { run, out } => synth(&run, &out)?,
        Command::Split { data, out } => split(&data, &out)?,
        Command::Train {
            run,
            data,
            model,
            report,
            map,
        } => train(&run, data.as_deref(), &model, report.as_deref(), map.as_deref())?,
        Command::Eval {
            run,
            data,
            model,
            report,
            map,
        } => eval(&run, data.as_deref(), &model, report.as_deref(), map.as_deref())?,
        Command::Check {
            what,
            run,
            data,
            model,
            report,
        } => {
            if what == CheckKind::Grads {
                return Ok(grads(&run)?);
            }
            let model = model.ok_or_else(|| Failure::Usage("this check needs --model".into()))?;
            check(what, &run, data.as_deref(), &model, report.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = run.mode {
        cfg.train.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn labels_path(cube: &Path) -> PathBuf {
    cube.with_extension("hsil")
}

fn read_scene(cube: &Path) -> Result<(HsiCube, LabelMap)> {
    Ok((read_cube(cube)?, read_labels(labels_path(cube))?))
}

fn load_task(cfg: &RunConfig, data: Option<&Path>) -> Result<Task> {
    match data {
        None => Task::synthetic(cfg),
        Some(path) => {
            let (cube, labels) = read_scene(path)?;
            Task::from_scene(&cube, &labels, cfg.target)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn synth(run: &RunArgs, out: &Path) -> Result<()> {
    let cfg = load_config(run)?;
    let synth = cfg.synth_config();
    let data = synth_generate(&synth)?;
    let oracle = bayes_oracle(&synth)?;
    let parts: Vec<&DomainDataset> = data.sources.iter().chain([&data.target]).collect();
    let (cube, labels) = to_scene(&parts)?;
    let oracle_json = to_json(&oracle)?;
    create_dir(out)?;
    write_cube(&cube, out.join("scene.hsic"))?;
    write_labels(&labels, out.join("scene.hsil"))?;
    write_atomic(&out.join("oracle.json"), oracle_json.as_bytes())?;
    println!(
        "scene {}x{}x{} written to {}; held-out oracle OA {:.4} without context, {:.4} with",
        cube.height,
        cube.width,
        cube.bands,
        out.display(),
        oracle.oa_no_context,
        oracle.oa_with_context
    );
    Ok(())
}

fn split(data: &Path, out: &Path) -> Result<()> {
    let (cube, labels) = read_scene(data)?;
    let parts = quadrant_split(&cube, &labels)?;
    let mut files = Vec::new();
    for (q, ds) in parts.iter().enumerate() {
        // one labeled pixel per column of a single-row strip
        let n = ds.len();
        let mut flat = Vec::with_capacity(n * ds.bands);
        for s in &ds.samples {
            flat.extend_from_slice(&s.spectrum);
        }
        let class = |c: usize| u16::try_from(c).map_err(|_| Error::Data(format!("class {c} exceeds u16")));
        let strip_labels = ds.samples.iter().map(|s| class(s.class)).collect::<Result<Vec<_>>>()?;
        if n == 0 {
            println!("quadrant {} has no labeled pixels; skipped", q + 1);
            continue;
        }
        files.push((
            q + 1,
            HsiCube::new(1, n, ds.bands, flat)?,
            LabelMap::new(1, n, strip_labels)?,
        ));
    }
    create_dir(out)?;
    for (q, c, l) in &files {
        write_cube(c, out.join(format!("domain{q}.hsic")))?;
        write_labels(l, out.join(format!("domain{q}.hsil")))?;
        println!("domain {q}: {} samples", c.width);
    }
    Ok(())
}

fn metrics_line(r: &RunReport) -> String {
    format!(
        "held-out OA {:.4}  AA {:.4}  kappa {:.4}",
        r.metrics.oa, r.metrics.aa, r.metrics.kappa
    )
}

type MapRequest<'a> = Option<(&'a Path, &'a [usize], &'a Task)>;

/// Renders the map in memory, so a bad request fails before anything is written.
fn map_for(map: MapRequest<'_>) -> Result<Option<(&Path, Vec<u8>)>> {
    let Some((path, preds, task)) = map else {
        return Ok(None);
    };
    let mask = task
        .mask
        .as_ref()
        .ok_or_else(|| Error::Data("this task has no scene layout to draw a map on".into()))?;
    Ok(Some((path, map_bytes(preds, mask, &default_palette(task.target.classes))?)))
}

fn write_outputs(model: Option<(&CribModel, &Path)>, report: &RunReport, report_path: Option<&Path>, map: MapRequest<'_>) -> Result<()> {
    let map = map_for(map)?;
    let json = report.to_json()?;
    if let Some((m, path)) = model {
        write_model(m, path)?;
    }
    if let Some(path) = report_path {
        write_atomic(path, json.as_bytes())?;
    }
    if let Some((path, bytes)) = map {
        write_atomic(path, &bytes)?;
    }
    Ok(())
}

fn train(run: &RunArgs, data: Option<&Path>, model_path: &Path, report: Option<&Path>, map: Option<&Path>) -> Result<()> {
    let cfg = load_config(run)?;
    let task = load_task(&cfg, data)?;
    let (model, rep, preds) = train_run(&cfg, &task)?;
    write_outputs(Some((&model, model_path)), &rep, report, map.map(|p| (p, &preds[..], &task)))?;
    println!("{}", metrics_line(&rep));
    Ok(())
}

fn eval(run: &RunArgs, data: Option<&Path>, model_path: &Path, report: Option<&Path>, map: Option<&Path>) -> Result<()> {
    let model = read_model(model_path)?;
    let cfg = load_config(run)?;
    let task = load_task(&cfg, data)?;
    let (rep, preds) = eval_run(&cfg, &model, &task)?;
    write_outputs(None, &rep, report, map.map(|p| (p, &preds[..], &task)))?;
    println!("{}", metrics_line(&rep));
    Ok(())
}

fn summarize(label: &str, reports: &[(String, GradCheckReport)]) -> bool {
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let skipped: usize = reports.iter().map(|(_, r)| r.skipped).sum();
    let (worst_name, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .map(|(n, r)| (n.as_str(), r.max_rel_error))
        .unwrap_or(("-", 0.0));
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed).map(|(n, _)| n.as_str()).collect();
    println!(
        "{label}: {} checks, {checked} coordinates ({skipped} at kinks skipped), max rel. error {worst:.3e} ({worst_name}) -> {}",
        reports.len(),
        if failed.is_empty() { "pass".to_string() } else { format!("FAIL {failed:?}") }
    );
    failed.is_empty()
}

fn grads(run: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(run)?;
    let seed = cfg.train.seed;
    let prim = summarize("primitives", &primitive_suite(20, seed, 1e-5)?);
    let e2e = summarize("end-to-end loss", &loss_grad_suite(20, seed, 1e-4, 4)?);
    Ok(if prim && e2e { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn check(what: CheckKind, run: &RunArgs, data: Option<&Path>, model_path: &Path, report: Option<&Path>) -> Result<()> {
    let model: CribModel = read_model(model_path)?;
    let cfg = load_config(run)?;
    let task = load_task(&cfg, data)?;
    let pooled = DomainDataset::concat(&task.sources)?;
    let json = match what {
        CheckKind::Theorem1 => to_json(&theorem1_summary(&cfg, &model, &pooled)?)?,
        CheckKind::Entropy => to_json(&entropy_report(&cfg, &model, &pooled)?)?,
        CheckKind::Bound => to_json(&bound_report(&cfg, &model, &task)?)?,
        CheckKind::Disentangle => to_json(&disentangle_probe(&model, &pooled)?)?,
        CheckKind::Grads => unreachable!("handled without a model"),
    };
    match report {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => print!("{json}"),
    }
    Ok(())
}
