//! Command-line experiment runner.
//!
//! Default mode runs the sweep described by a JSON config (or the built-in
//! synthetic default); `--audit` switches to auditing a serialized model
//! against the dataset. Individual flags override config fields.

use anyhow::{bail, Context, Result};
use clap::Parser;
use dralign::harness::{self, DatasetSource, ExperimentConfig};
use dralign::training::{FairnessMetric, Method};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "dralign",
    about = "Fair MLP training with decision-rationale alignment: sweeps, audits, trade-off tables"
)]
struct Args {
    /// JSON experiment config; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset path (overrides the config's dataset; schema from config,
    /// or the canonical `label`/`attr` schema when none is given).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Training method: erm | oversample | fairreg | dralign.
    #[arg(long)]
    method: Option<String>,
    /// Fairness metric: dp | eo | eop | pp.
    #[arg(long)]
    metric: Option<String>,
    /// Fairness weight λ (replaces the sweep list with one value).
    #[arg(long)]
    lambda: Option<f64>,
    /// Alignment weight β (replaces the sweep list with one value).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Single seed (replaces the seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Audit this serialized model instead of running a sweep.
    #[arg(long)]
    audit: Option<PathBuf>,
    /// Top-k neurons per layer in audits.
    #[arg(long)]
    topk: Option<usize>,
    /// Subgroup row cap for exact parity audits.
    #[arg(long)]
    cap: Option<usize>,
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(match s {
        "erm" => Method::Erm,
        "oversample" => Method::Oversample,
        "fairreg" => Method::FairReg,
        "dralign" => Method::DrAlign,
        other => bail!("unknown method {other:?} (erm|oversample|fairreg|dralign)"),
    })
}

fn parse_metric(s: &str) -> Result<FairnessMetric> {
    Ok(match s {
        "dp" => FairnessMetric::Dp,
        "eo" => FairnessMetric::Eo,
        "eop" => FairnessMetric::Eop,
        "pp" => FairnessMetric::Pp,
        other => bail!("unknown metric {other:?} (dp|eo|eop|pp)"),
    })
}

fn main() -> Result<()> {
    env_logger::init();
    let args = Args::parse();

    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };

    if let Some(path) = &args.dataset {
        let schema = match &config.dataset {
            DatasetSource::Csv { schema, .. } => schema.clone(),
            _ => dralign::data::CsvSchema::canonical(),
        };
        config.dataset = DatasetSource::Csv {
            path: path.clone(),
            schema,
        };
    }
    if let Some(m) = &args.method {
        config.methods = vec![parse_method(m)?];
    }
    if let Some(m) = &args.metric {
        config.metric = parse_metric(m)?;
    }
    if let Some(l) = args.lambda {
        config.lambdas = vec![l];
    }
    if let Some(b) = args.beta {
        config.betas = vec![b];
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seeds = vec![s];
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(k) = args.topk {
        config.top_k = k;
    }
    if let Some(c) = args.cap {
        config.audit_cap = c;
    }

    if let Some(model) = &args.audit {
        let (train_t, _, _) =
            harness::prepare_data(&config.dataset, config.split, config.split_seed)?;
        let outputs = harness::audit(
            model,
            &train_t,
            config.audit_cap,
            config.top_k,
            &config.out_dir,
        )?;
        println!(
            "audit: d_F = {:.6e}, d_F(L1) = {:.6e}, sim_sum = {:.4}",
            outputs.report.d_f, outputs.report.d_f_l1, outputs.report.sim_sum
        );
        for (l, (s, ov)) in outputs
            .report
            .layer_sims
            .iter()
            .zip(&outputs.overlaps)
            .enumerate()
        {
            println!("  layer {l}: S_l = {s:.4}, top-k overlap = {ov:.4}");
        }
        println!("wrote {}", outputs.parity_csv.display());
        println!("wrote {}", outputs.overlap_csv.display());
        return Ok(());
    }

    let rows = harness::run(&config)?;
    println!(
        "completed {} runs over {} grid points; results in {}",
        rows.len(),
        config.grid().len(),
        config.out_dir.display()
    );
    for path in ["results.csv", "summary.csv", "tradeoff.csv"] {
        println!("wrote {}", config.out_dir.join(path).display());
    }
    Ok(())
}
