//! Run configuration: defaults, optional TOML config file, command-line
//! overrides (flags win over the file), and invariant validation.

use std::path::PathBuf;

use crate::CliError;

/// Output format for tabular artifacts: `csv` writes tables (plan entries,
/// control samples, trajectories) as separate CSV files next to the JSON
/// summary; `json` embeds them in the JSON document instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

/// Fully resolved configuration for one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: Option<PathBuf>,
    pub p: f64,
    pub grid_steps: usize,
    pub flow_tol: f64,
    pub solve_tol: f64,
    pub resid_tol: f64,
    pub rank_tol: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub format: OutputFormat,
    pub threads: Option<usize>,
}

/// Values read from an optional `--config` TOML file; every field may be
/// overridden by the corresponding flag.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    pub system: Option<PathBuf>,
    pub p: Option<f64>,
    pub grid_steps: Option<usize>,
    pub flow_tol: Option<f64>,
    pub solve_tol: Option<f64>,
    pub resid_tol: Option<f64>,
    pub rank_tol: Option<f64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub threads: Option<usize>,
}

fn toml_f64(value: &toml::Value, key: &str) -> Result<f64, CliError> {
    match value {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        other => Err(CliError::usage(format!(
            "config key '{key}' must be a number, got {}",
            other.type_str()
        ))),
    }
}

fn toml_usize(value: &toml::Value, key: &str) -> Result<usize, CliError> {
    match value {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(CliError::usage(format!(
            "config key '{key}' must be a non-negative integer, got {other}"
        ))),
    }
}

fn toml_str<'v>(value: &'v toml::Value, key: &str) -> Result<&'v str, CliError> {
    value.as_str().ok_or_else(|| {
        CliError::usage(format!("config key '{key}' must be a string"))
    })
}

impl FileConfig {
    /// Parses a config file; unknown keys are rejected to catch typos.
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let table: toml::Table = text.parse().map_err(|e| {
            CliError::usage(format!("config {}: {e}", path.display()))
        })?;
        let mut cfg = FileConfig::default();
        for (key, value) in &table {
            match key.as_str() {
                "system" => cfg.system = Some(PathBuf::from(toml_str(value, key)?)),
                "p" => cfg.p = Some(toml_f64(value, key)?),
                "grid_steps" | "gridSteps" => {
                    cfg.grid_steps = Some(toml_usize(value, key)?)
                }
                "flow_tol" | "flowTol" => cfg.flow_tol = Some(toml_f64(value, key)?),
                "solve_tol" | "solveTol" => cfg.solve_tol = Some(toml_f64(value, key)?),
                "resid_tol" | "residTol" => cfg.resid_tol = Some(toml_f64(value, key)?),
                "rank_tol" | "rankTol" => cfg.rank_tol = Some(toml_f64(value, key)?),
                "seed" => cfg.seed = Some(toml_usize(value, key)? as u64),
                "output_dir" | "outputDir" => {
                    cfg.output_dir = Some(PathBuf::from(toml_str(value, key)?))
                }
                "format" => {
                    cfg.format = Some(match toml_str(value, key)? {
                        "json" => OutputFormat::Json,
                        "csv" => OutputFormat::Csv,
                        other => {
                            return Err(CliError::usage(format!(
                                "config key 'format' must be 'json' or 'csv', got '{other}'"
                            )))
                        }
                    })
                }
                "threads" => cfg.threads = Some(toml_usize(value, key)?),
                other => {
                    return Err(CliError::usage(format!(
                        "config {}: unknown key '{other}'",
                        path.display()
                    )))
                }
            }
        }
        Ok(cfg)
    }
}

/// The global flags shared by every command (defined here so `main` can
/// flatten them into the parser).
#[derive(Debug, clap::Args)]
pub struct GlobalFlags {
    /// Optional TOML config file; explicit flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// System description file (TOML: d, n, T, M, N).
    #[arg(long, global = true)]
    pub system: Option<PathBuf>,
    /// Cost exponent p > 1.
    #[arg(long, global = true)]
    pub p: Option<f64>,
    /// Time-grid intervals (even, >= 2).
    #[arg(long, global = true)]
    pub grid_steps: Option<usize>,
    /// Flow construction/consistency tolerance.
    #[arg(long, global = true)]
    pub flow_tol: Option<f64>,
    /// Point-solver endpoint tolerance.
    #[arg(long, global = true)]
    pub solve_tol: Option<f64>,
    /// Continuity-residual tolerance (per unit C¹ norm).
    #[arg(long, global = true)]
    pub resid_tol: Option<f64>,
    /// Relative singular-value threshold for numerical rank.
    #[arg(long, global = true)]
    pub rank_tol: Option<f64>,
    /// Seed for all sampling (perturbation draws).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Tabular output style: csv (separate files) or json (embedded).
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    /// Worker-thread cap (default: CTRANS_THREADS env var, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Resolves flags > config file > environment > defaults, then checks
    /// the configuration invariants.
    pub fn resolve(flags: &GlobalFlags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let env_threads = std::env::var("CTRANS_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok());
        let cfg = RunConfig {
            system: flags.system.clone().or(file.system),
            p: flags.p.or(file.p).unwrap_or(2.0),
            grid_steps: flags.grid_steps.or(file.grid_steps).unwrap_or(1000),
            flow_tol: flags.flow_tol.or(file.flow_tol).unwrap_or(1e-8),
            solve_tol: flags.solve_tol.or(file.solve_tol).unwrap_or(1e-8),
            resid_tol: flags.resid_tol.or(file.resid_tol).unwrap_or(1e-6),
            rank_tol: flags
                .rank_tol
                .or(file.rank_tol)
                .unwrap_or(ctrans::control::DEFAULT_RANK_TOL),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            output_dir: flags
                .output_dir
                .clone()
                .or(file.output_dir)
                .unwrap_or_else(|| PathBuf::from(".")),
            format: flags.format.or(file.format).unwrap_or(OutputFormat::Csv),
            threads: flags.threads.or(file.threads).or(env_threads),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(CliError::usage(format!("p must be > 1, got {}", self.p)));
        }
        if self.grid_steps < 2 || self.grid_steps % 2 != 0 {
            return Err(CliError::usage(format!(
                "grid-steps must be even and >= 2, got {}",
                self.grid_steps
            )));
        }
        for (name, tol) in [
            ("flow-tol", self.flow_tol),
            ("solve-tol", self.solve_tol),
            ("resid-tol", self.resid_tol),
            ("rank-tol", self.rank_tol),
        ] {
            if !(tol > 0.0) || !tol.is_finite() {
                return Err(CliError::usage(format!(
                    "{name} must be positive, got {tol}"
                )));
            }
        }
        if let Some(0) = self.threads {
            return Err(CliError::usage("threads must be >= 1".into()));
        }
        Ok(())
    }

    /// The system path, required by every command.
    pub fn system_path(&self) -> Result<&std::path::Path, CliError> {
        self.system
            .as_deref()
            .ok_or_else(|| CliError::usage("--system is required (flag or config file)".into()))
    }
}
