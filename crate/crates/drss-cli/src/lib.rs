//! Command-line front end: `simulate`, `estimate-mean`, `estimate-ate` and
//! `fit-ps` subcommands over the estimation library. Flags override values
//! from an optional flat key/value config file. Exit codes: 0 success,
//! 1 usage error, 2 data or numeric error.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use drss::ate::{repeated_split_ate, AteSpecs};
use drss::data::{make_folds, SampleMode};
use drss::estimators::{run_pipeline, OutcomeSpec, PsSpec};
use drss::inference::mean_report;
use drss::io::{
    load_csv, parse_config, parse_outcome_spec, parse_ps_spec, report_json,
    DataSchema,
};
use drss::propensity::{fit_mcar, fit_offset_logistic_lasso, fit_offset_logistic_mle, OffsetLassoOptions};
use drss::sim::{run_campaign, CampaignSetting, DgpSpec, OutcomeDgp, PsDgp, RowKind};

#[derive(Parser)]
#[command(name = "drss", version, about = "Doubly robust semi-supervised estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value config file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Cross-fitting fold count.
    #[arg(long)]
    k: Option<usize>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo campaign for a named simulation setting.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Setting name: a, b, c, d, e, f or cprime.
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long = "N", alias = "n")]
        n: Option<usize>,
        #[arg(long)]
        pi: Option<f64>,
        #[arg(long)]
        reps: Option<usize>,
        /// Sparsity of the outcome signal (cprime only).
        #[arg(long)]
        s_m: Option<usize>,
        /// Sparsity of the labeling signal (cprime only).
        #[arg(long)]
        s_pi: Option<usize>,
        /// Include the kernel-ridge outcome row (slow).
        #[arg(long, default_value_t = false)]
        with_rkhs: bool,
    },
    /// Estimate the mean response from a partially labeled CSV dataset.
    EstimateMean {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Propensity estimator: constant, logistic, log-lasso, stratified.
        #[arg(long)]
        ps: Option<String>,
        /// Outcome estimator: ls, poly, poly3, lasso, poly-lasso, rkhs.
        #[arg(long)]
        m: Option<String>,
    },
    /// Estimate an average treatment effect from a fully observed CSV dataset.
    EstimateAte {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        ps: Option<String>,
        /// Treated-arm outcome estimator.
        #[arg(long)]
        m1: Option<String>,
        /// Control-arm outcome estimator.
        #[arg(long)]
        m0: Option<String>,
        /// Number of repeated fold splits aggregated by medians.
        #[arg(long)]
        b: Option<usize>,
    },
    /// Fit a propensity model and print its diagnostics.
    FitPs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Model: mcar, offset-logistic or offset-lasso.
        #[arg(long)]
        model: Option<String>,
    },
}

/// Errors split by exit code.
enum CliError {
    Usage(String),
    Data(String),
}

impl From<drss::Error> for CliError {
    fn from(e: drss::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    /// Merge the config file under the explicit flags.
    fn build(common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<Settings> {
        let mut map = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config: {e}")))?;
                parse_config(&text).map_err(|e| CliError::Usage(e.to_string()))?
            }
            None => BTreeMap::new(),
        };
        if let Some(seed) = common.seed {
            map.insert("seed".into(), seed.to_string());
        }
        if let Some(alpha) = common.alpha {
            map.insert("alpha".into(), alpha.to_string());
        }
        if let Some(k) = common.k {
            map.insert("k".into(), k.to_string());
        }
        if let Some(out) = &common.out {
            map.insert("out".into(), out.display().to_string());
        }
        for (key, value) in flags {
            if let Some(v) = value {
                map.insert((*key).to_string(), v.clone());
            }
        }
        Ok(Settings { map })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> CliResult<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required option '--{key}'")))
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("invalid value '{raw}' for '--{key}'"))),
        }
    }

    fn seed(&self) -> CliResult<u64> {
        self.parse_or("seed", 0)
    }

    fn alpha(&self) -> CliResult<f64> {
        self.parse_or("alpha", 0.05)
    }

    fn k(&self) -> CliResult<usize> {
        self.parse_or("k", 5)
    }
}

fn load_dataset(settings: &Settings, mode: SampleMode) -> CliResult<drss::SemiSupervisedSample> {
    let input = PathBuf::from(settings.require("input")?);
    let schema_path = PathBuf::from(settings.require("schema")?);
    let schema = DataSchema::from_json_file(&schema_path)?;
    Ok(load_csv(&input, &schema, mode)?)
}

fn ps_spec_from(settings: &Settings, key: &str) -> CliResult<PsSpec> {
    parse_ps_spec(settings.require(key)?).map_err(|e| CliError::Usage(e.to_string()))
}

fn outcome_spec_from(settings: &Settings, key: &str) -> CliResult<OutcomeSpec> {
    parse_outcome_spec(settings.require(key)?).map_err(|e| CliError::Usage(e.to_string()))
}

fn write_out(settings: &Settings, content: &str) -> CliResult<()> {
    if let Some(path) = settings.get("out") {
        std::fs::write(path, content)
            .map_err(|e| CliError::Data(format!("cannot write '{path}': {e}")))?;
    }
    Ok(())
}

fn default_rows(setting: &str, p: usize, with_rkhs: bool) -> Vec<RowKind> {
    let mut rows = vec![RowKind::Naive, RowKind::Oracle];
    let highdim = p > 50;
    let mut ps_list: Vec<PsSpec> = if highdim {
        vec![PsSpec::Mcar, PsSpec::OffsetLogisticLasso { lambda: None }]
    } else {
        vec![PsSpec::Mcar, PsSpec::OffsetLogisticMle]
    };
    if setting == "e" {
        ps_list.push(PsSpec::Stratified { highdim });
    }
    let mut m_list: Vec<OutcomeSpec> = if highdim {
        vec![OutcomeSpec::Lasso { degree: 1 }, OutcomeSpec::Lasso { degree: 2 }]
    } else {
        vec![
            OutcomeSpec::LeastSquares { degree: 1 },
            OutcomeSpec::LeastSquares { degree: 2 },
        ]
    };
    if with_rkhs && !highdim {
        m_list.push(OutcomeSpec::KernelRidge { bandwidth: None });
    }
    for ps in &ps_list {
        for m in &m_list {
            rows.push(RowKind::Cell {
                ps: ps.clone(),
                m: m.clone(),
                adjusted: false,
            });
        }
    }
    rows
}

fn run_simulate(settings: &Settings, with_rkhs: bool) -> CliResult<()> {
    let name = settings.require("setting")?.to_string();
    let p = settings.parse_or("p", 10usize)?;
    let n = settings.parse_or("n", 10_000usize)?;
    let pi = settings.parse_or("pi", 0.01f64)?;
    let reps = settings.parse_or("reps", if p > 50 { 100 } else { 500 })?;
    let (ps_model, outcome_model) = match name.as_str() {
        "a" => (PsDgp::P1Constant, OutcomeDgp::O1Linear),
        "b" => (PsDgp::P1Constant, OutcomeDgp::O2Quadratic),
        "c" => (PsDgp::P2OffsetLogistic, OutcomeDgp::O1Linear),
        "d" => (PsDgp::P2OffsetLogistic, OutcomeDgp::O2Quadratic),
        "e" => (PsDgp::P3Stratified, OutcomeDgp::O2Quadratic),
        "f" => (PsDgp::P2OffsetLogistic, OutcomeDgp::O3Cubic),
        "cprime" | "c'" => {
            let s_m = settings.parse_or("s_m", 3usize)?;
            let s_pi = settings.parse_or("s_pi", 15usize)?;
            (
                PsDgp::P2PrimeSparse { s_pi },
                OutcomeDgp::O1PrimeSparse { s_m },
            )
        }
        other => return Err(CliError::Usage(format!("unknown setting '{other}'"))),
    };
    let dgp = DgpSpec {
        ps_model,
        outcome_model,
        n,
        p,
        pi_n: pi,
    };
    let mut campaign = CampaignSetting::new(name.clone(), dgp, default_rows(&name, p, with_rkhs));
    campaign.k = settings.k()?;
    let tables = run_campaign(&[campaign], reps, settings.alpha()?, settings.seed()?)?;
    let table = &tables[0];
    write_out(settings, &table.to_csv_string())?;
    println!("{}", table.to_markdown());
    Ok(())
}

fn run_estimate_mean(settings: &Settings) -> CliResult<()> {
    let ps = ps_spec_from(settings, "ps")?;
    let m = outcome_spec_from(settings, "m")?;
    let sample = load_dataset(settings, SampleMode::MissingData)?;
    let seed = settings.seed()?;
    let plan = make_folds(sample.n(), settings.k()?, seed)?;
    let (preds, estimate) = run_pipeline(&sample, &plan, &m, &ps, None)?;
    let report = mean_report(&sample, &preds, &estimate, settings.alpha()?, None, None)?;
    let json = report_json(&report, &settings.map, seed)?;
    write_out(settings, &json)?;
    println!(
        "mean estimate: {:.6}  ci: ({:.6}, {:.6})  n: {}  labeled: {}  a_hat_inv: {:.3}",
        report.theta, report.ci.0, report.ci.1, report.n, report.n_labeled, report.a_hat_inv
    );
    Ok(())
}

fn run_estimate_ate(settings: &Settings) -> CliResult<()> {
    let ps = ps_spec_from(settings, "ps")?;
    let m1 = outcome_spec_from(settings, "m1")?;
    let m0 = outcome_spec_from(settings, "m0")?;
    let sample = load_dataset(settings, SampleMode::Causal)?;
    let seed = settings.seed()?;
    let b = settings.parse_or("b", 10usize)?;
    let mut specs = AteSpecs::new(m1, m0, ps);
    specs.alpha = settings.alpha()?;
    specs.floor_control_denominator = true;
    let report = repeated_split_ate(&sample, b, settings.k()?, seed, &specs, None)?;
    let json = report_json(&report, &settings.map, seed)?;
    write_out(settings, &json)?;
    println!(
        "ate: {:.6}  ci: ({:.6}, {:.6})  theta1: {:.6}  theta0: {:.6}  splits: {}",
        report.theta_ate, report.ci.0, report.ci.1, report.theta1, report.theta0, report.b
    );
    if report.clipped_rows > 0 {
        eprintln!(
            "warning: control-arm denominator floored on {} row evaluations",
            report.clipped_rows
        );
    }
    Ok(())
}

fn run_fit_ps(settings: &Settings) -> CliResult<()> {
    let model = settings.require("model")?.to_string();
    let sample = load_dataset(settings, SampleMode::MissingData)?;
    let seed = settings.seed()?;
    let summary = match model.as_str() {
        "mcar" | "constant" => {
            let fit = fit_mcar(sample.r())?;
            serde_json::json!({ "model": "mcar", "pi_hat": fit.pi_hat })
        }
        "offset-logistic" | "logistic" => {
            let fit = fit_offset_logistic_mle(sample.x(), sample.r())?;
            serde_json::json!({
                "model": "offset-logistic",
                "pi_hat_n": fit.pi_hat_n,
                "gamma": fit.gamma,
                "iterations": fit.iterations,
                "gradient_sup_norm": fit.convergence,
            })
        }
        "offset-lasso" | "log-lasso" => {
            let opts = OffsetLassoOptions {
                seed,
                ..OffsetLassoOptions::default()
            };
            let fit = fit_offset_logistic_lasso(sample.x(), sample.r(), &opts)?;
            let nonzero = fit.gamma.iter().filter(|g| **g != 0.0).count();
            serde_json::json!({
                "model": "offset-lasso",
                "pi_hat_n": fit.pi_hat_n,
                "gamma": fit.gamma,
                "penalty": fit.penalty,
                "nonzero": nonzero,
                "iterations": fit.iterations,
            })
        }
        other => return Err(CliError::Usage(format!("unknown ps model '{other}'"))),
    };
    let json = format!("{:#}\n", summary);
    write_out(settings, &json)?;
    println!("{json}");
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Simulate {
            common,
            setting,
            p,
            n,
            pi,
            reps,
            s_m,
            s_pi,
            with_rkhs,
        } => Settings::build(
            common,
            &[
                ("setting", setting.clone()),
                ("p", p.map(|v| v.to_string())),
                ("n", n.map(|v| v.to_string())),
                ("pi", pi.map(|v| v.to_string())),
                ("reps", reps.map(|v| v.to_string())),
                ("s_m", s_m.map(|v| v.to_string())),
                ("s_pi", s_pi.map(|v| v.to_string())),
            ],
        )
        .and_then(|s| run_simulate(&s, *with_rkhs)),
        Command::EstimateMean {
            common,
            input,
            schema,
            ps,
            m,
        } => Settings::build(
            common,
            &[
                ("input", input.as_ref().map(|p| p.display().to_string())),
                ("schema", schema.as_ref().map(|p| p.display().to_string())),
                ("ps", ps.clone()),
                ("m", m.clone()),
            ],
        )
        .and_then(|s| run_estimate_mean(&s)),
        Command::EstimateAte {
            common,
            input,
            schema,
            ps,
            m1,
            m0,
            b,
        } => Settings::build(
            common,
            &[
                ("input", input.as_ref().map(|p| p.display().to_string())),
                ("schema", schema.as_ref().map(|p| p.display().to_string())),
                ("ps", ps.clone()),
                ("m1", m1.clone()),
                ("m0", m0.clone()),
                ("b", b.map(|v| v.to_string())),
            ],
        )
        .and_then(|s| run_estimate_ate(&s)),
        Command::FitPs {
            common,
            input,
            schema,
            model,
        } => Settings::build(
            common,
            &[
                ("input", input.as_ref().map(|p| p.display().to_string())),
                ("schema", schema.as_ref().map(|p| p.display().to_string())),
                ("model", model.clone()),
            ],
        )
        .and_then(|s| run_fit_ps(&s)),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
