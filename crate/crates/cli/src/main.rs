//! `aibc`: detector training and evaluation, scenario simulation, sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aibc_core::analytics::{
    detect_csv, detect_matrix, generate, labels_csv, roc_csv, roc_curve, run_sweep, train_from_matrix, AnalyticsError,
    GenSpec, RocSpec, SweepSpec,
};
use aibc_core::detector::{DetectorConfig, DetectorError, DetectorModel};
use aibc_core::fusion::read_matrix_csv;
use aibc_core::netsim::output::{write_atomic, write_run};
use aibc_core::netsim::{presets, run_scenario, RunOptions, ScenarioConfig, SimError};
use clap::{Args, Parser, Subcommand};

const EXIT_VALIDATION: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "aibc",
    version,
    about = "Outlier-aware consensus: detector, simulator and sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration or spec file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress and summary lines on stderr.
    #[arg(long)]
    quiet: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data file and its ground-truth labels.
    Gen(Common),
    /// Train a detector model on a data file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training data (header of feature ids, one row per slot).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        p_fa: Option<f64>,
    },
    /// List outliers per slot of a data file.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a scenario and write its run directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Built-in scenario, used when --config is absent.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Run a parameter sweep; writes grid.csv and surface.csv.
    Sweep(Common),
    /// Detection and false-alarm rates against a threshold multiplier.
    Roc(Common),
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: m.to_string(),
        }
    }

    fn data(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.to_string(),
        }
    }

    fn internal(m: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: m.to_string(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Synth(_) => Failure::validation(e),
            SimError::Io(_) => Failure::data(e),
            _ => Failure::internal(e),
        }
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::BadEpsilon(_) | DetectorError::BadFalseAlarm(_) => Failure::validation(e),
            _ => Failure::data(e),
        }
    }
}

impl From<AnalyticsError> for Failure {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::Spec { .. } | AnalyticsError::Parse(_) | AnalyticsError::Config(_) => {
                Failure::validation(e)
            }
            AnalyticsError::Synth(_) => Failure::validation(e),
            AnalyticsError::Sim(s) => s.into(),
            AnalyticsError::Detector(d) => d.into(),
            AnalyticsError::Csv(_) | AnalyticsError::Fusion(_) | AnalyticsError::Data(_) | AnalyticsError::Io(_) => {
                Failure::data(e)
            }
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn need_config(c: &Common) -> Result<&Path> {
    c.config
        .as_deref()
        .ok_or_else(|| Failure::validation("--config is required"))
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn note(c: &Common, msg: impl AsRef<str>) {
    if !c.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Gen(c) | Command::Sweep(c) | Command::Roc(c) => c,
        Command::Train { common, .. } | Command::Detect { common, .. } | Command::Simulate { common, .. } => common,
    }
}

fn gen(c: &Common) -> Result<()> {
    let mut spec = GenSpec::from_toml(&read(need_config(c)?)?)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let out = generate(&spec)?;
    let dir = out_dir(c)?;
    write(&dir.join("data.csv"), &out.data_csv())?;
    write(&dir.join("labels.csv"), labels_csv(&out).as_bytes())?;
    note(
        c,
        format!(
            "wrote {} slots x {} features to {}",
            out.rows.len(),
            out.layout.total_dim(),
            dir.display()
        ),
    );
    Ok(())
}

fn train(c: &Common, data: &Path, epsilon: Option<f64>, p_fa: Option<f64>) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => toml::from_str::<DetectorConfig>(&read(p)?).map_err(Failure::validation)?,
        None => DetectorConfig::default(),
    };
    if let Some(e) = epsilon {
        cfg.epsilon = e;
    }
    if let Some(p) = p_fa {
        cfg.p_fa = p;
    }
    cfg.validate()?;
    let file =
        read_matrix_csv(read(data)?.as_bytes()).map_err(|e| Failure::data(format!("{}: {e}", data.display())))?;
    let model = train_from_matrix(&file, &cfg)?;
    let mut json = Vec::new();
    model.write_json(&mut json)?;
    let dir = out_dir(c)?;
    let path = dir.join("model.json");
    write(&path, &json)?;
    let mut h = model.thresholds().to_vec();
    h.sort_by(f64::total_cmp);
    println!("rank {}", model.rank());
    println!(
        "thresholds min {} median {} max {}",
        h[0],
        h[h.len() / 2],
        h[h.len() - 1]
    );
    note(c, format!("model written to {}", path.display()));
    Ok(())
}

fn detect(c: &Common, model: &Path, data: &Path) -> Result<()> {
    let model = DetectorModel::read_json(read(model)?.as_bytes()).map_err(Failure::data)?;
    let text = read(data)?;
    let csv = if text.trim().is_empty() {
        String::new()
    } else {
        let file = read_matrix_csv(text.as_bytes()).map_err(|e| Failure::data(format!("{}: {e}", data.display())))?;
        detect_csv(&detect_matrix(&model, &file)?)
    };
    match &c.out {
        Some(_) => {
            let path = out_dir(c)?.join("detect.csv");
            write(&path, csv.as_bytes())?;
            note(c, format!("wrote {}", path.display()));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn simulate(c: &Common, preset: Option<&str>) -> Result<()> {
    let mut cfg = match (&c.config, preset) {
        (Some(p), _) => ScenarioConfig::from_toml(&read(p)?).map_err(Failure::validation)?,
        (None, Some(name)) => presets::by_name(name).ok_or_else(|| {
            Failure::validation(format!(
                "unknown preset `{name}`; one of: {}",
                presets::NAMES.join(", ")
            ))
        })?,
        (None, None) => return Err(Failure::validation("--config or --preset is required")),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(Failure::validation)?;
    let run = run_scenario(&cfg, &RunOptions { trace: true })?;
    let dir = write_run(&out_dir(c)?, &run).map_err(Failure::data)?;
    let s = &run.summary;
    note(
        c,
        format!(
            "{}: {} ({}/{} slots committed) -> {}",
            s.config_hash,
            s.outcome.as_str(),
            s.successes,
            s.slots,
            dir.display()
        ),
    );
    println!("{}", dir.display());
    Ok(())
}

fn sweep(c: &Common) -> Result<()> {
    let path = need_config(c)?;
    let mut spec = SweepSpec::from_toml(&read(path)?)?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let out = run_sweep(&spec, base)?;
    let dir = out_dir(c)?;
    write(&dir.join("grid.csv"), out.grid_csv.as_bytes())?;
    write(&dir.join("surface.csv"), out.surface_csv.as_bytes())?;
    note(
        c,
        format!(
            "{} grid rows, {} surface rows -> {}",
            out.grid_csv.lines().count() - 1,
            out.surface_csv.lines().count() - 1,
            dir.display()
        ),
    );
    Ok(())
}

fn roc(c: &Common) -> Result<()> {
    let mut spec = match &c.config {
        Some(p) => RocSpec::from_toml(&read(p)?)?,
        None => RocSpec::faulty_preset(1),
    };
    if let Some(s) = c.seed {
        spec.data.seed = s;
    }
    let csv = roc_csv(&roc_curve(&spec)?);
    match &c.out {
        Some(_) => {
            let path = out_dir(c)?.join("roc.csv");
            write(&path, csv.as_bytes())?;
            note(c, format!("wrote {}", path.display()));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Train {
            common,
            data,
            epsilon,
            p_fa,
        } => train(common, data, *epsilon, *p_fa),
        Command::Detect { common, model, data } => detect(common, model, data),
        Command::Simulate { common, preset } => simulate(common, preset.as_deref()),
        Command::Sweep(c) => sweep(c),
        Command::Roc(c) => roc(c),
    }
}

#[cfg(feature = "parallel")]
fn with_threads(n: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match n {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(Failure::internal)?
            .install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads(_: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    f()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = common(&cli.command).threads;
    if threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_VALIDATION);
    }
    match with_threads(threads, || dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
