//! The `cot` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::calibration::{fit_temperature, CalibrationModel};
use crate::error::{Error, Result};
use crate::estimators::{Method, Score, DEFAULT_BATCH_SIZE};
use crate::io::{
    read_json, read_logits_csv, read_measure_csv, to_json_string, write_json, write_logits_csv,
    write_scatter_csv, Manifest, ManifestEntry,
};
use crate::metrics::EvaluationReport;
use crate::ot::solve_emd;
use crate::pipeline::{evaluate, EstimationContext, EstimationOptions, EvaluationTarget};
use crate::synth::{simulate, SimulationConfig};
use crate::types::LabelDistribution;

#[derive(Debug, Parser)]
#[command(name = "cot", version, about = "Estimate classifier error on unlabeled shifted data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a temperature on labeled validation logits.
    Calibrate {
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the error of one target.
    Estimate(EstimateArgs),
    /// Score estimators across the targets of a manifest.
    Evaluate(EvaluateArgs),
    /// Write a synthetic source split, shifted targets and a manifest.
    Simulate {
        /// Simulation config JSON.
        #[arg(long, conflicts_with = "default", required_unless_present = "default")]
        config: Option<PathBuf>,
        /// Use the built-in 15-target sweep.
        #[arg(long)]
        default: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the EMD between two `weight,x_0,...` point files.
    Emd {
        a: PathBuf,
        b: PathBuf,
        /// Also print every flow of the optimal plan.
        #[arg(long)]
        plan: bool,
    },
}

/// Source-side inputs shared by `estimate` and `evaluate`.
#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Labeled source validation logits.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Calibration JSON from `cot calibrate`; fitted on --val when absent.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Label distribution JSON `{"probs": [...]}` used instead of validation labels for COT.
    #[arg(long)]
    pub label_dist: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// COT, AC, ENTROPY, ATC_MC, ATC_NE or GDE.
    #[arg(long, default_value = "COT", value_parser = parse_method)]
    pub method: Method,
    #[arg(long)]
    pub target: PathBuf,
    /// ATC score variant (MC or NE); overrides the variant in --method.
    #[arg(long)]
    pub score: Option<String>,
    /// Second model's logits on the same target rows, for GDE.
    #[arg(long)]
    pub second_target: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated methods; defaults to every method the inputs support.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl SourceArgs {
    fn context(&self) -> Result<EstimationContext> {
        let calibration: Option<CalibrationModel> =
            self.calibration.as_deref().map(read_json).transpose()?;
        let val = self.val.as_deref().map(read_logits_csv).transpose()?;
        let label_dist: Option<LabelDistribution> = self.label_dist.as_deref().map(read_json).transpose()?;
        EstimationContext::new(
            calibration.as_ref(),
            val.as_ref(),
            label_dist,
            EstimationOptions {
                batch_size: self.batch_size,
                seed: self.seed,
            },
        )
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate { val, out } => calibrate(&val, &out),
        Command::Estimate(args) => estimate(&args),
        Command::Evaluate(args) => evaluate_cmd(&args),
        Command::Simulate {
            config,
            default,
            out_dir,
        } => {
            // clap guarantees --config or --default
            debug_assert!(config.is_some() || default);
            let config = match config {
                Some(path) => read_json(&path)?,
                None => SimulationConfig::default_sweep(),
            };
            simulate_cmd(&config, &out_dir)
        }
        Command::Emd { a, b, plan } => emd(&a, &b, plan),
    }
}

fn calibrate(val: &Path, out: &Path) -> Result<()> {
    let data = read_logits_csv(val)?;
    let model = fit_temperature(&data)?;
    write_json(out, &model)?;
    println!("temperature    {:.6}", model.temperature);
    println!("nll            {:.6} -> {:.6}", model.nll_before, model.nll_after);
    println!("ece            {:.6} -> {:.6}", model.ece_before, model.ece_after);
    println!("accuracy       {:.6}", model.accuracy);
    println!("mean conf      {:.6}", model.mean_confidence_after);
    Ok(())
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let method = match (&args.score, args.method) {
        (None, m) => m,
        (Some(score), Method::AtcMc | Method::AtcNe) => score.parse::<Score>()?.method(),
        (Some(_), m) => return Err(Error::validation(format!("--score only applies to ATC, not {m}"))),
    };
    let ctx = args.source.context()?;
    let target = read_logits_csv(&args.target)?;
    let second = match (method, &args.second_target) {
        (Method::Gde, None) => {
            return Err(Error::validation("GDE needs --second-target"));
        }
        (_, path) => path.as_deref().map(read_logits_csv).transpose()?,
    };
    if method == Method::Cot && args.source.val.is_none() && args.source.label_dist.is_none() {
        return Err(Error::validation("COT needs --val or --label-dist for the source labels"));
    }
    if matches!(method, Method::AtcMc | Method::AtcNe) && args.source.val.is_none() {
        return Err(Error::validation("ATC needs --val to fit its threshold"));
    }
    let report = ctx.estimate(method, &target, second.as_ref())?;
    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            println!("{} estimate {:.6}", report.method, report.estimate);
        }
        None => print!("{}", to_json_string(&report)?),
    }
    Ok(())
}

fn load_targets(manifest: &Manifest) -> Result<Vec<EvaluationTarget>> {
    manifest
        .targets
        .iter()
        .map(|e| {
            let true_error = e.true_error.ok_or_else(|| {
                Error::validation(format!("target {} has no true_error", e.target_id))
            })?;
            Ok(EvaluationTarget {
                target_id: e.target_id.clone(),
                data: read_logits_csv(Path::new(&e.path))?,
                second: e.second_path.as_deref().map(|p| read_logits_csv(Path::new(p))).transpose()?,
                true_error,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    temperature: f64,
    reports: &'a [EvaluationReport],
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    // check true errors before reading any logits
    if let Some(e) = manifest.targets.iter().find(|e| e.true_error.is_none()) {
        return Err(Error::validation(format!("target {} has no true_error", e.target_id)));
    }
    let ctx = args.source.context()?;
    let with_second = manifest.targets.iter().all(|e| e.second_path.is_some());
    let methods = if args.methods.is_empty() {
        ctx.available_methods(with_second)
    } else {
        args.methods.clone()
    };
    let targets = load_targets(&manifest)?;
    let result = evaluate(&ctx, &methods, &targets)?;

    let targets_dir = args.out_dir.join("targets");
    fs::create_dir_all(&targets_dir)
        .map_err(|e| Error::io(format!("creating {}", targets_dir.display()), e))?;
    for t in &result.per_target {
        write_json(&targets_dir.join(format!("{}.json", t.target_id)), t)?;
    }
    for (report, (method, records)) in result.reports.iter().zip(&result.records) {
        write_json(&args.out_dir.join(format!("{method}.json")), report)?;
        write_scatter_csv(&args.out_dir.join(format!("{method}_scatter.csv")), records)?;
    }
    write_json(
        &args.out_dir.join("summary.json"),
        &Summary {
            schema_version: 1,
            temperature: ctx.temperature(),
            reports: &result.reports,
        },
    )?;

    println!("{:<8} {:>8} {:>8} {:>8}", "method", "R2", "rho", "MAE");
    for r in &result.reports {
        let mae = r.mae.map_or_else(|| "-".to_string(), |m| format!("{m:.3}"));
        println!("{:<8} {:>8.4} {:>8.4} {:>8}", r.method.as_str(), r.r_squared, r.spearman_rho, mae);
    }
    Ok(())
}

/// Writes `source.csv`, `targets/*.csv`, `label_dist.json`, `config.json`
/// and `manifest.json` under `out_dir`.
pub fn simulate_cmd(config: &SimulationConfig, out_dir: &Path) -> Result<()> {
    let sim = simulate(config)?;
    let targets_dir = out_dir.join("targets");
    fs::create_dir_all(&targets_dir)
        .map_err(|e| Error::io(format!("creating {}", targets_dir.display()), e))?;
    write_logits_csv(&out_dir.join("source.csv"), &sim.source)?;
    write_json(&out_dir.join("label_dist.json"), &config.source.label_dist)?;
    write_json(&out_dir.join("config.json"), config)?;

    let mut entries = Vec::new();
    for t in &sim.targets {
        let rel = format!("targets/{}.csv", t.target_id);
        write_logits_csv(&out_dir.join(&rel), &t.data)?;
        entries.push(ManifestEntry {
            target_id: t.target_id.clone(),
            path: rel,
            true_error: Some(t.true_error),
            second_path: None,
        });
    }
    write_json(
        &out_dir.join("manifest.json"),
        &Manifest {
            schema_version: 1,
            targets: entries,
        },
    )?;
    println!("source   {} rows, error {:.4}", sim.source.len(), sim.source.argmax_error()?);
    for t in &sim.targets {
        println!(
            "{}  accuracy {:.2}  temperature {:.4}  true error {:.4}",
            t.target_id, t.severity.accuracy, t.severity.extra_temperature, t.true_error
        );
    }
    Ok(())
}

fn emd(a: &Path, b: &Path, show_plan: bool) -> Result<()> {
    let ma = read_measure_csv(a)?;
    let mb = read_measure_csv(b)?;
    let plan = solve_emd(&ma, &mb)?;
    println!("emd {}", plan.total_cost);
    println!("flows {} pivots {}", plan.flows.len(), plan.pivots);
    if show_plan {
        for f in &plan.flows {
            println!("{} {} {}", f.source, f.target, f.mass);
        }
    }
    Ok(())
}
