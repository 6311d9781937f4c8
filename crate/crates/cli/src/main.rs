use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use shiftmatch::exec::{with_threads, Execution};
use shiftmatch::experiment::{format_summary, summarize};
use shiftmatch::{format, synth};
use shiftmatch::matching::align_clip_with;
use shiftmatch::{evaluate, generate_scene, run_sweep};
use shiftmatch::{Boundary, Error, PipelineConfig, SceneSpec, SweepSpec};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

/// Temporal feature shift with cross-frame query matching on synthetic clips.
#[derive(Parser, Debug)]
#[command(name = "shiftmatch", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory from a SceneSpec JSON file
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run the pipeline on a scene directory and write an EvalReport JSON
    Run {
        #[arg(long)]
        scene: PathBuf,
        /// PipelineConfig JSON
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the boundary policy from the config
        #[arg(long, value_parser = boundary_parser())]
        boundary: Option<Boundary>,
        /// Worker threads; 1 runs sequentially
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Align the queries of a QTN clip and write the alignment JSON
    Match {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Run a fraction x matching sweep, writing one CSV row per cell
    Sweep {
        /// SweepSpec JSON
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the first seed of the sweep
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long, value_parser = boundary_parser())]
        boundary: Option<Boundary>,
        #[arg(long)]
        parallel: Option<usize>,
    },
}

fn boundary_parser() -> impl TypedValueParser<Value = Boundary> {
    PossibleValuesParser::new(["zero", "hold"]).map(|s| match s.as_str() {
        "hold" => Boundary::Hold,
        _ => Boundary::ZeroFill,
    })
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Infeasible(_) => ExitCode::from(EXIT_INFEASIBLE),
                _ => ExitCode::from(EXIT_DATA),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            spec,
            out,
            seed_override,
        } => cmd_synth(&spec, &out, seed_override),
        Command::Run {
            scene,
            config,
            out,
            boundary,
            parallel,
        } => with_exec(parallel, |exec| cmd_run(&scene, &config, &out, boundary, exec)),
        Command::Match {
            queries,
            out,
            parallel,
        } => with_exec(parallel, |exec| cmd_match(&queries, &out, exec)),
        Command::Sweep {
            spec,
            out,
            seed_override,
            boundary,
            parallel,
        } => with_exec(parallel, |exec| {
            cmd_sweep(&spec, &out, seed_override, boundary, exec)
        }),
    }
}

fn with_exec<F>(threads: Option<usize>, f: F) -> Result<(), Failure>
where
    F: FnOnce(Execution) -> Result<(), Failure> + Send,
{
    match threads {
        Some(0) => Err(Failure::Usage("--parallel needs at least 1 thread".into())),
        Some(n) => with_threads(n, f),
        None => f(Execution::default()),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        context: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        context: path.display().to_string(),
        source,
    })
}

fn cmd_synth(spec_file: &Path, out_dir: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec: SceneSpec = read_json(spec_file)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    synth::save_scene(&scene, out_dir)?;
    Ok(())
}

fn cmd_run(
    scene_dir: &Path,
    config_file: &Path,
    report_out: &Path,
    boundary: Option<Boundary>,
    exec: Execution,
) -> Result<(), Failure> {
    let mut cfg: PipelineConfig = read_json(config_file)?;
    if let Some(b) = boundary {
        cfg.boundary = b;
    }
    cfg.validate()?;
    let scene = synth::load_scene(scene_dir)?;
    let report = evaluate(&scene, &cfg, exec)?;
    write_json(&report, report_out)?;
    Ok(())
}

fn cmd_match(queries_file: &Path, out_json: &Path, exec: Execution) -> Result<(), Failure> {
    let clip = format::load_tensor(queries_file)?;
    let alignment = align_clip_with(&clip, exec)?;
    write_json(&alignment, out_json)?;
    Ok(())
}

fn cmd_sweep(
    sweep_file: &Path,
    out_csv: &Path,
    seed: Option<u64>,
    boundary: Option<Boundary>,
    exec: Execution,
) -> Result<(), Failure> {
    let mut spec: SweepSpec = read_json(sweep_file)?;
    if let Some(seed) = seed {
        spec.scene.seed = seed;
    }
    if let Some(b) = boundary {
        spec.boundary = b;
    }
    spec.validate()?;
    let file = File::create(out_csv).map_err(|source| Error::Io {
        context: out_csv.display().to_string(),
        source,
    })?;
    let outcome = run_sweep(&spec, BufWriter::new(file), exec)?;
    let table = format_summary(&summarize(&outcome));
    let mut stdout = io::stdout().lock();
    let _ = stdout.write_all(table.as_bytes());
    Ok(())
}
