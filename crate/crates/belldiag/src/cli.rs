//! Batch front end: simulate noisy networks, tabulate grouping maxima,
//! fit noise parameters to measurement files, re-render saved results,
//! and run synthetic self-tests.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical
//! non-convergence. Outputs are deterministic for fixed inputs and seed;
//! `BELLDIAG_THREADS` caps parallelism without affecting results.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    estimate_uncertainty, fit, render_report, standard_groupings, synthetic_selftest, FitConfig,
    FitResult, MeasurementSet, SettingsPolicy,
};
use crate::error::Error;
use crate::network::{build_network_state, NoiseModel, ParamVector, Topology};
use crate::quantum::DensityMatrix;
use crate::wwzb::{all_mabk_groupwise_maxima, Restriction, SearchConfig};

#[derive(Parser)]
#[command(
    name = "belldiag",
    version,
    about = "Bell-inequality diagnostics for entangling links in qubit networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Build the noisy network state and summarize it.
    Simulate {
        /// Topology JSON file (default: the labeled 4-qubit chain).
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Noise model: gate-failure, qubit-dephasing, hybrid; append
        /// +global for a global depolarizing layer.
        #[arg(long)]
        model: String,
        /// Comma-separated parameters in [0,1], one per model parameter.
        #[arg(long)]
        params: String,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Maximize the family value on every ideal-state grouping.
    Max {
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Measurement setting restriction: equatorial or fullsphere.
        #[arg(long, default_value = "fullsphere")]
        restriction: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Fit noise parameters to a measurements file.
    Fit {
        /// Measurements JSON file covering all eleven groupings.
        measurements: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "fullsphere")]
        restriction: String,
        /// Settings policy: frozen or reoptimized.
        #[arg(long, default_value = "frozen")]
        settings: String,
        /// Coarse grid step in (0, 0.5].
        #[arg(long, default_value_t = 0.02)]
        grid: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bootstrap resamples for uncertainties (0 disables, else >= 100).
        #[arg(long, default_value_t = 200)]
        resamples: usize,
        /// Weight each residual by 1/sigma.
        #[arg(long, default_value_t = false)]
        sigma_weighted: bool,
        /// Destination for the fit result JSON (default: stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Re-render a saved fit result.
    Report {
        /// Fit result JSON file produced by `fit --out`.
        result: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Round-trip recovery check on synthetic data.
    Selftest {
        #[arg(long)]
        model: String,
        /// True parameters; drawn uniformly from [0.6, 1] when omitted.
        #[arg(long)]
        params: Option<String>,
        /// Gaussian noise added to the synthetic observations.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        grid: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run() -> i32 {
    if let Ok(threads) = std::env::var("BELLDIAG_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: BELLDIAG_THREADS must be a positive integer");
                return 2;
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonConverged(_) | Error::SearchBudget(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Command) -> crate::Result<()> {
    match cmd {
        Command::Simulate { topology, model, params, out, format } => {
            cmd_simulate(topology.as_deref(), &model, &params, out.as_deref(), format)
        }
        Command::Max { topology, restriction, seed, out, format } => {
            cmd_max(topology.as_deref(), &restriction, seed, out.as_deref(), format)
        }
        Command::Fit {
            measurements,
            model,
            restriction,
            settings,
            grid,
            seed,
            resamples,
            sigma_weighted,
            out,
            format,
        } => cmd_fit(
            &measurements,
            &model,
            &restriction,
            &settings,
            grid,
            seed,
            resamples,
            sigma_weighted,
            out.as_deref(),
            format,
        ),
        Command::Report { result, out, format } => cmd_report(&result, out.as_deref(), format),
        Command::Selftest { model, params, sigma, seed, grid, out, format } => cmd_selftest(
            &model,
            params.as_deref(),
            sigma,
            seed,
            grid,
            out.as_deref(),
            format,
        ),
    }
}

fn load_topology(path: Option<&Path>) -> crate::Result<Topology> {
    match path {
        None => Ok(Topology::chain4()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Parse(format!("--topology {}: {e}", p.display())))?;
            Topology::from_json(&text)
        }
    }
}

fn parse_model(name: &str) -> crate::Result<NoiseModel> {
    name.parse::<NoiseModel>()
        .map_err(|e| Error::Parse(format!("--model: {e}")))
}

fn parse_restriction(name: &str) -> crate::Result<Restriction> {
    name.parse::<Restriction>()
        .map_err(|e| Error::Parse(format!("--restriction: {e}")))
}

fn parse_params(list: &str) -> crate::Result<Vec<f64>> {
    list.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("--params: {tok:?} is not a number")))
        })
        .collect()
}

/// Writes to a temporary file in the destination directory and renames,
/// so failures never leave partial output behind.
fn write_output(path: Option<&Path>, content: &str) -> crate::Result<()> {
    match path {
        None => {
            // A closed pipe (e.g. `| head`) ends the program, not the world.
            let mut stdout = std::io::stdout().lock();
            if let Err(e) = writeln!(stdout, "{content}") {
                if e.kind() == std::io::ErrorKind::BrokenPipe {
                    std::process::exit(0);
                }
                return Err(Error::Io(e));
            }
            Ok(())
        }
        Some(p) => {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let mut tmp = tempfile::Builder::new()
                .prefix(".belldiag-out")
                .tempfile_in(dir)?;
            tmp.write_all(content.as_bytes())?;
            tmp.write_all(b"\n")?;
            tmp.persist(p).map_err(|e| Error::Io(e.error))?;
            Ok(())
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SimulateSummary {
    model: String,
    params: Vec<f64>,
    n_qubits: usize,
    fidelity_to_ideal: f64,
    purity: f64,
}

fn state_overlap(a: &DensityMatrix, b: &DensityMatrix) -> f64 {
    (a.matrix() * b.matrix()).trace().re
}

fn cmd_simulate(
    topology: Option<&Path>,
    model: &str,
    params: &str,
    out: Option<&Path>,
    format: Format,
) -> crate::Result<()> {
    let top = load_topology(topology)?;
    let model = parse_model(model)?;
    let values = parse_params(params)?;
    let arity = model.arity(&top)?;
    if values.len() != arity {
        return Err(Error::Parse(format!(
            "--params: model {model} on this topology needs {arity} values, got {}",
            values.len()
        )));
    }
    let params = ParamVector::new(values.clone())
        .map_err(|e| Error::Parse(format!("--params: {e}")))?;
    let state = build_network_state(&top, &model, &params)?;
    let ideal_params = ParamVector::new(vec![1.0; arity])?;
    let ideal = build_network_state(&top, &model, &ideal_params)?;
    // The unit-parameter state is pure, so the overlap is the fidelity.
    let summary = SimulateSummary {
        model: model.to_string(),
        params: values,
        n_qubits: top.n_qubits(),
        fidelity_to_ideal: state_overlap(&ideal, &state).clamp(0.0, 1.0),
        purity: state.purity(),
    };
    let rendered = match format {
        Format::Json => serde_json::to_string_pretty(&summary).expect("summary serializes"),
        Format::Text => format!(
            "model: {}\nparams: {:?}\nqubits: {}\nfidelity to ideal: {:.6}\npurity: {:.6}",
            summary.model,
            summary.params,
            summary.n_qubits,
            summary.fidelity_to_ideal,
            summary.purity
        ),
    };
    write_output(out, &rendered)
}

#[derive(Serialize, Deserialize)]
struct MaxRow {
    grouping: String,
    value: f64,
    classical_bound: f64,
    violates: bool,
}

#[derive(Serialize, Deserialize)]
struct MaxSummary {
    restriction: String,
    seed: u64,
    starts: usize,
    rows: Vec<MaxRow>,
}

fn cmd_max(
    topology: Option<&Path>,
    restriction: &str,
    seed: u64,
    out: Option<&Path>,
    format: Format,
) -> crate::Result<()> {
    let top = load_topology(topology)?;
    let restriction = parse_restriction(restriction)?;
    let groupings = standard_groupings(&top)?;
    let ideal = crate::diagnostics::ideal_physical_state()?;
    let states = groupings
        .iter()
        .map(|g| Ok((g.id(), crate::diagnostics::extract_group_state(&ideal, g)?)))
        .collect::<crate::Result<Vec<_>>>()?;
    let search = SearchConfig { seed, ..SearchConfig::default() };
    let maxima = all_mabk_groupwise_maxima(&states, restriction, &search)?;
    let summary = MaxSummary {
        restriction: restriction.name().to_string(),
        seed,
        starts: search.starts,
        rows: maxima
            .iter()
            .map(|m| MaxRow {
                grouping: m.label.clone(),
                value: m.value.value,
                classical_bound: m.value.classical_bound,
                violates: m.value.violates(),
            })
            .collect(),
    };
    let rendered = match format {
        Format::Json => serde_json::to_string_pretty(&summary).expect("summary serializes"),
        Format::Text => {
            let mut s = format!(
                "restriction: {}  seed: {}  starts: {}\ngrouping        maximum   bound  violates\n",
                summary.restriction, summary.seed, summary.starts
            );
            for row in &summary.rows {
                s.push_str(&format!(
                    "{:<15} {:>8.3} {:>6.0}  {}\n",
                    row.grouping, row.value, row.classical_bound, row.violates
                ));
            }
            s.pop();
            s
        }
    };
    write_output(out, &rendered)
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    measurements: &Path,
    model: &str,
    restriction: &str,
    settings: &str,
    grid: f64,
    seed: u64,
    resamples: usize,
    sigma_weighted: bool,
    out: Option<&Path>,
    format: Format,
) -> crate::Result<()> {
    let text = std::fs::read_to_string(measurements)
        .map_err(|e| Error::Parse(format!("measurements {}: {e}", measurements.display())))?;
    let set = MeasurementSet::from_json(&text)?;
    let model = parse_model(model)?;
    let policy = settings
        .parse::<SettingsPolicy>()
        .map_err(|e| Error::Parse(format!("--settings: {e}")))?;
    if resamples != 0 && resamples < 100 {
        return Err(Error::Parse(format!(
            "--resamples: need 0 (disabled) or at least 100, got {resamples}"
        )));
    }
    let config = FitConfig {
        restriction: parse_restriction(restriction)?,
        settings_policy: policy,
        grid_resolution: grid,
        seed,
        sigma_weighted,
        search: SearchConfig { seed, ..SearchConfig::default() },
        ..FitConfig::new(model)
    };
    let mut result = fit(&set.observations, &config)?;
    if resamples > 0 {
        let (stds, _) = estimate_uncertainty(&set.observations, &config, resamples, seed)?;
        result.uncertainties = Some(stds);
    }
    let json = serde_json::to_string_pretty(&result).expect("fit result serializes");
    if let Some(p) = out {
        write_output(Some(p), &json)?;
    }
    let report = render_report(&result, &Topology::chain4());
    let rendered = match format {
        Format::Json => report.to_json(),
        Format::Text => {
            let mut s = report.to_text();
            s.pop();
            s
        }
    };
    write_output(None, &rendered)
}

fn cmd_report(result: &Path, out: Option<&Path>, format: Format) -> crate::Result<()> {
    let text = std::fs::read_to_string(result)
        .map_err(|e| Error::Parse(format!("result {}: {e}", result.display())))?;
    let fit: FitResult =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("result file: {e}")))?;
    let report = render_report(&fit, &Topology::chain4());
    let rendered = match format {
        Format::Json => report.to_json(),
        Format::Text => {
            let mut s = report.to_text();
            s.pop();
            s
        }
    };
    write_output(out, &rendered)
}

fn cmd_selftest(
    model: &str,
    params: Option<&str>,
    sigma: f64,
    seed: u64,
    grid: f64,
    out: Option<&Path>,
    format: Format,
) -> crate::Result<()> {
    let model = parse_model(model)?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parse(format!("--sigma: {sigma} must be >= 0")));
    }
    let top = Topology::chain4();
    let arity = model.arity(&top)?;
    let values = match params {
        Some(list) => {
            let v = parse_params(list)?;
            if v.len() != arity {
                return Err(Error::Parse(format!(
                    "--params: model {model} needs {arity} values, got {}",
                    v.len()
                )));
            }
            v
        }
        None => {
            // Separate stream so the draw never collides with the noise
            // stream used inside the self-test.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX);
            (0..arity).map(|_| rng.gen_range(0.6..=1.0)).collect()
        }
    };
    let truth = ParamVector::new(values).map_err(|e| Error::Parse(format!("--params: {e}")))?;
    let config = FitConfig {
        grid_resolution: grid,
        seed,
        search: SearchConfig { seed, ..SearchConfig::default() },
        ..FitConfig::new(model)
    };
    let report = synthetic_selftest(&truth, sigma, seed, &config)?;
    let rendered = match format {
        Format::Json => serde_json::to_string_pretty(&report).expect("report serializes"),
        Format::Text => format!(
            "true params: {:?}\nrecovered:   {:?}\nerrors:      {:?}\nmean abs error: {:.6}\nsigma: {}  seed: {}",
            report.true_params,
            report.recovered,
            report.errors,
            report.mean_abs_error,
            report.noise_sigma,
            report.seed
        ),
    };
    write_output(out, &rendered)
}
