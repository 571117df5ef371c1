//! Experiment runner: configuration parsing, λ/β/architecture sweeps over
//! repeated seeds, parity audits of trained models, Welch's t-test, and the
//! trade-off tables behind accuracy-versus-fairness plots.
//!
//! Outputs are plain CSV/JSON files under the configured directory:
//!
//! * `results.csv`    — one row per (grid point, seed); wall-clock seconds is
//!   the last column and the only non-deterministic one
//! * `history_<run>.csv`, `model_<run>.json` — per-run epoch log and model
//! * `summary.csv`    — per-grid-point mean ± std (population σ, stated in
//!   the header)
//! * `tradeoff.csv`   — mean/std of AP and the negated fairness metric
//! * `failures.csv`   — runs that errored, with messages; the grid continues
//! * `parity_<name>.csv`, `overlap_<name>.csv` — audit outputs

use crate::data::{self, CsvSchema, DataError, DatasetTable, SubgroupView};
use crate::network::MlpParams;
use crate::rationale::{
    self, network_parity, prediction_gap, top_k_indices, top_k_overlap, RationaleError,
};
use crate::training::{
    self, evaluate_model, train, FairnessMetric, Method, Optimizer, Selection, TrainConfig,
    TrainError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("t-test needs at least 2 values per sample")]
    TooFewSamples,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rationale(#[from] RationaleError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the experiment data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
    Synth {
        n: usize,
        d: usize,
        bias: f64,
        noise: f64,
        seed: u64,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth {
            n: 10_000,
            d: 6,
            bias: 0.8,
            noise: 0.5,
            seed: 0,
        }
    }
}

fn default_fractions() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6]
}
fn default_betas() -> Vec<f64> {
    vec![0.04]
}
fn default_hidden() -> Vec<Vec<usize>> {
    vec![vec![16, 16]]
}
fn default_methods() -> Vec<Method> {
    vec![Method::FairReg]
}
fn default_epochs() -> usize {
    15
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_threshold() -> f64 {
    0.5
}
fn default_cap() -> usize {
    512
}
fn default_topk() -> usize {
    5
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_optimizer() -> Optimizer {
    Optimizer::Adam
}
fn default_metric() -> FairnessMetric {
    FairnessMetric::Dp
}

/// Full experiment description: dataset, model grid, training settings, and
/// output location. Serialized as one JSON document; individual fields can be
/// overridden from the command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default = "default_fractions")]
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_metric")]
    pub metric: FairnessMetric,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<Vec<usize>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub layer_mask: Option<usize>,
    #[serde(default)]
    pub selection: Option<Selection>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Row cap per subgroup for the exact parity audit.
    #[serde(default = "default_cap")]
    pub audit_cap: usize,
    #[serde(default = "default_topk")]
    pub top_k: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Worker threads for grid execution; 0 uses the rayon default.
    #[serde(default)]
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Grid points: λ and β lists apply only to the methods that use them.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        for method in &self.methods {
            let lambdas: Vec<f64> = match method {
                Method::Erm | Method::Oversample => vec![0.0],
                _ => self.lambdas.clone(),
            };
            let betas: Vec<f64> = match method {
                Method::DrAlign => self.betas.clone(),
                _ => vec![0.0],
            };
            for hidden in &self.hidden {
                for &lambda in &lambdas {
                    for &beta in &betas {
                        points.push(GridPoint {
                            method: *method,
                            metric: self.metric,
                            lambda,
                            beta,
                            hidden: hidden.clone(),
                        });
                    }
                }
            }
        }
        points
    }

    fn train_config(&self, p: &GridPoint, seed: u64) -> TrainConfig {
        TrainConfig {
            method: p.method,
            metric: p.metric,
            lambda: p.lambda,
            beta: p.beta,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            layer_mask: self.layer_mask,
            optimizer: self.optimizer,
            selection: self.selection.unwrap_or(Selection::LastEpoch),
        }
    }
}

/// One coordinate of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub method: Method,
    pub metric: FairnessMetric,
    pub lambda: f64,
    pub beta: f64,
    pub hidden: Vec<usize>,
}

impl GridPoint {
    pub fn tag(&self, seed: u64) -> String {
        let dims: Vec<String> = self.hidden.iter().map(|d| d.to_string()).collect();
        format!(
            "{}_{}_lam{}_beta{}_h{}_seed{}",
            self.method,
            self.metric,
            self.lambda,
            self.beta,
            dims.join("x"),
            seed
        )
    }
}

/// One result row per (grid point, seed).
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub point: GridPoint,
    pub seed: u64,
    pub ap: f64,
    pub soft_dp: f64,
    pub hard_dp: f64,
    pub soft_eo: f64,
    pub hard_eo: f64,
    pub eop_ratio: f64,
    pub pp_diff: f64,
    /// Exact network parity on capped training subgroups.
    pub d_f: f64,
    pub d_f_l1: f64,
    pub sim_sum: f64,
    pub layer_sims: Vec<f64>,
    pub wall_clock_s: f64,
}

pub const RESULTS_HEADER: &str = "method,metric,lambda,beta,hidden,seed,ap,soft_dp,hard_dp,\
soft_eo,hard_eo,eop_ratio,pp_diff,d_f,d_f_l1,sim_sum,layer_sims,wall_clock_s";

impl ResultRow {
    fn csv_line(&self) -> String {
        let dims: Vec<String> = self.point.hidden.iter().map(|d| d.to_string()).collect();
        let sims: Vec<String> = self.layer_sims.iter().map(|s| format!("{s:?}")).collect();
        format!(
            "{},{},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?}",
            self.point.method,
            self.point.metric,
            self.point.lambda,
            self.point.beta,
            dims.join("x"),
            self.seed,
            self.ap,
            self.soft_dp,
            self.hard_dp,
            self.soft_eo,
            self.hard_eo,
            self.eop_ratio,
            self.pp_diff,
            self.d_f,
            self.d_f_l1,
            self.sim_sum,
            sims.join("|"),
            self.wall_clock_s
        )
    }
}

/// Loads or synthesizes the dataset, splits it, and standardizes with
/// training-split statistics.
pub fn prepare_data(
    source: &DatasetSource,
    fractions: (f64, f64, f64),
    split_seed: u64,
) -> Result<(DatasetTable, DatasetTable, DatasetTable), HarnessError> {
    let table = match source {
        DatasetSource::Csv { path, schema } => {
            let (table, report) = data::load_csv(path, schema)?;
            if report.rows_dropped > 0 {
                log::info!(
                    "dropped {} of {} rows with missing values",
                    report.rows_dropped,
                    report.rows_read
                );
            }
            table
        }
        DatasetSource::Synth {
            n,
            d,
            bias,
            noise,
            seed,
        } => data::synth_biased(*n, *d, *bias, *noise, *seed),
    };
    let (train_t, val_t, test_t) = data::split(&table, fractions, split_seed)?;
    let standardizer = data::Standardizer::fit(&train_t);
    Ok((
        standardizer.apply(&train_t),
        standardizer.apply(&val_t),
        standardizer.apply(&test_t),
    ))
}

/// Runs every (grid point × seed) training, evaluates on the test split,
/// audits parity on capped training subgroups, and writes the result files.
/// Per-run failures are recorded in `failures.csv` and the grid continues.
pub fn run(config: &ExperimentConfig) -> Result<Vec<ResultRow>, HarnessError> {
    for p in config.grid() {
        config
            .train_config(&p, 0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let (train_t, val_t, test_t) = prepare_data(&config.dataset, config.split, config.split_seed)?;

    let jobs: Vec<(GridPoint, u64)> = config
        .grid()
        .into_iter()
        .flat_map(|p| config.seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();

    let execute = |(point, seed): &(GridPoint, u64)| -> (GridPoint, u64, Result<ResultRow, String>) {
        let started = std::time::Instant::now();
        let result = run_one(config, &train_t, &val_t, &test_t, point, *seed)
            .map(|mut row| {
                row.wall_clock_s = started.elapsed().as_secs_f64();
                row
            })
            .map_err(|e| e.to_string());
        (point.clone(), *seed, result)
    };

    let outcomes: Vec<(GridPoint, u64, Result<ResultRow, String>)> = if config.workers == 0 {
        jobs.par_iter().map(execute).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(execute).collect())
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (point, seed, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(msg) => failures.push((point.tag(seed), msg)),
        }
    }

    let mut f = std::fs::File::create(config.out_dir.join("results.csv"))?;
    writeln!(f, "{RESULTS_HEADER}")?;
    for row in &rows {
        writeln!(f, "{}", row.csv_line())?;
    }
    if !failures.is_empty() {
        let mut f = std::fs::File::create(config.out_dir.join("failures.csv"))?;
        writeln!(f, "run,error")?;
        for (tag, msg) in &failures {
            writeln!(f, "{tag},{}", msg.replace(',', ";"))?;
        }
    }
    write_summary(&rows, &config.out_dir.join("summary.csv"))?;
    emit_tradeoff_table(&rows, &config.out_dir.join("tradeoff.csv"))?;
    Ok(rows)
}

fn run_one(
    config: &ExperimentConfig,
    train_t: &DatasetTable,
    val_t: &DatasetTable,
    test_t: &DatasetTable,
    point: &GridPoint,
    seed: u64,
) -> Result<ResultRow, HarnessError> {
    let spec = crate::network::MlpSpec::new(train_t.n_cols(), point.hidden.clone());
    let cfg = config.train_config(point, seed);
    let (params, history) = train(train_t, val_t, &spec, &cfg)?;

    let tag = point.tag(seed);
    let mut hf = std::fs::File::create(config.out_dir.join(format!("history_{tag}.csv")))?;
    history.write_csv(&mut hf)?;
    params.save_json(&config.out_dir.join(format!("model_{tag}.json")))?;

    let eval = evaluate_model(&params, test_t, config.threshold);
    let g0 = train_t.subgroup(0, None)?.truncated(config.audit_cap);
    let g1 = train_t.subgroup(1, None)?.truncated(config.audit_cap);
    let parity = network_parity(&params, &g0, &g1)?;

    Ok(ResultRow {
        point: point.clone(),
        seed,
        ap: eval.ap,
        soft_dp: eval.soft_dp,
        hard_dp: eval.hard_dp,
        soft_eo: eval.soft_eo,
        hard_eo: eval.hard_eo,
        eop_ratio: eval.eop_ratio,
        pp_diff: eval.pp_diff,
        d_f: parity.d_f,
        d_f_l1: parity.d_f_l1,
        sim_sum: parity.sim_sum,
        layer_sims: parity.layer_sims,
        wall_clock_s: 0.0,
    })
}

/// Population standard deviation (σ, divisor n).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn grid_key(p: &GridPoint) -> String {
    let dims: Vec<String> = p.hidden.iter().map(|d| d.to_string()).collect();
    format!(
        "{},{},{:?},{:?},{}",
        p.method,
        p.metric,
        p.lambda,
        p.beta,
        dims.join("x")
    )
}

fn grouped(rows: &[ResultRow]) -> Vec<(GridPoint, Vec<&ResultRow>)> {
    let mut groups: Vec<(GridPoint, Vec<&ResultRow>)> = Vec::new();
    for row in rows {
        match groups.iter_mut().find(|(p, _)| *p == row.point) {
            Some((_, members)) => members.push(row),
            None => groups.push((row.point.clone(), vec![row])),
        }
    }
    groups.sort_by(|(a, _), (b, _)| {
        (a.method.to_string(), a.metric.to_string())
            .cmp(&(b.method.to_string(), b.metric.to_string()))
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.beta.total_cmp(&b.beta))
            .then(a.hidden.cmp(&b.hidden))
    });
    groups
}

fn write_summary(rows: &[ResultRow], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# std is population (divisor n)\n\
         method,metric,lambda,beta,hidden,n,ap_mean,ap_std,hard_dp_mean,hard_dp_std,\
         hard_eo_mean,hard_eo_std,d_f_mean,d_f_std,sim_sum_mean,sim_sum_std"
    )?;
    for (point, members) in grouped(rows) {
        let col = |f: fn(&ResultRow) -> f64| -> (f64, f64) {
            mean_std(&members.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        let (apm, aps) = col(|r| r.ap);
        let (dpm, dps) = col(|r| r.hard_dp);
        let (eom, eos) = col(|r| r.hard_eo);
        let (dfm, dfs) = col(|r| r.d_f);
        let (ssm, sss) = col(|r| r.sim_sum);
        writeln!(
            f,
            "{},{},{apm:?},{aps:?},{dpm:?},{dps:?},{eom:?},{eos:?},{dfm:?},{dfs:?},{ssm:?},{sss:?}",
            grid_key(&point),
            members.len()
        )?;
    }
    Ok(())
}

/// Per grid point: mean and std of AP and of the negated fairness metric,
/// sorted by (method, metric, λ); ready for plotting.
pub fn emit_tradeoff_table(rows: &[ResultRow], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# std is population (divisor n); fairness is the negated metric\n\
         method,metric,lambda,beta,hidden,n,ap_mean,ap_std,fairness_mean,fairness_std"
    )?;
    for (point, members) in grouped(rows) {
        let aps: Vec<f64> = members.iter().map(|r| r.ap).collect();
        let fair: Vec<f64> = members
            .iter()
            .map(|r| match point.metric {
                FairnessMetric::Dp => -r.hard_dp,
                FairnessMetric::Eo => -r.hard_eo,
                FairnessMetric::Eop => r.eop_ratio,
                FairnessMetric::Pp => -r.pp_diff,
            })
            .collect();
        let (apm, aps_) = mean_std(&aps);
        let (fm, fs) = mean_std(&fair);
        writeln!(
            f,
            "{},{},{apm:?},{aps_:?},{fm:?},{fs:?}",
            grid_key(&point),
            members.len()
        )?;
    }
    Ok(())
}

/// Welch's unequal-variance two-sided t-test.
///
/// Returns `(t, p)`. Zero variance in both samples with equal means gives
/// `(0, 1)` by convention; the degenerate infinite-`t` case is clamped so the
/// p-value stays in `(0, 1]`.
pub fn ttest(sample_a: &[f64], sample_b: &[f64]) -> Result<(f64, f64), HarnessError> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(HarnessError::TooFewSamples);
    }
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (ma, mb) = (mean(sample_a), mean(sample_b));
    // Sample variance (divisor n-1).
    let var = |s: &[f64], m: f64| s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
    let (va, vb) = (var(sample_a, ma), var(sample_b, mb));

    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok((0.0, 1.0));
        }
        let t = if ma > mb {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        return Ok((t, f64::MIN_POSITIVE));
    }
    let t = (ma - mb) / se2.sqrt();
    // Welch–Satterthwaite degrees of freedom.
    let dof = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).expect("dof > 0");
    let p = 2.0 * dist.cdf(-t.abs());
    Ok((t, p.clamp(f64::MIN_POSITIVE, 1.0)))
}

/// Outputs of [`audit`].
pub struct AuditOutputs {
    pub parity_csv: PathBuf,
    pub overlap_csv: PathBuf,
    pub report: rationale::ParityReport,
    pub overlaps: Vec<f64>,
}

/// Full rationale audit of a serialized model against a dataset: exact parity
/// scores (subgroups capped at `cap` rows), Taylor importances with layer
/// similarities, per-layer top-k overlaps, and prediction gaps for the top-k
/// parameters of each layer.
pub fn audit(
    model_path: &Path,
    dataset: &DatasetTable,
    cap: usize,
    top_k: usize,
    out_dir: &Path,
) -> Result<AuditOutputs, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let params = MlpParams::load_json(model_path)?;
    let name = model_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let g0 = dataset.subgroup(0, None)?.truncated(cap);
    let g1 = dataset.subgroup(1, None)?.truncated(cap);

    let report = network_parity(&params, &g0, &g1)?;
    let parity_csv = out_dir.join(format!("parity_{name}.csv"));
    let f = std::fs::File::create(&parity_csv)?;
    report.write_csv(std::io::BufWriter::new(f))?;

    let imp0 = training::taylor_importance_values(&params, &g0, "a=0")?;
    let imp1 = training::taylor_importance_values(&params, &g1, "a=1")?;
    let k_eff = |layer: usize| top_k.min(imp0.layers[layer].len());
    let overlaps: Vec<f64> = (0..imp0.layers.len())
        .map(|l| {
            let single0 = sublayer(&imp0, l);
            let single1 = sublayer(&imp1, l);
            top_k_overlap(&single0, &single1, k_eff(l)).map(|v| v[0])
        })
        .collect::<Result<_, _>>()?;

    let overlap_csv = out_dir.join(format!("overlap_{name}.csv"));
    let mut f = std::fs::File::create(&overlap_csv)?;
    writeln!(f, "layer,top_k,jaccard_overlap")?;
    for (l, ov) in overlaps.iter().enumerate() {
        writeln!(f, "{l},{},{ov:?}", k_eff(l))?;
    }
    // Prediction gaps for the top-k parameters of each layer (union of the
    // two subgroups' top sets).
    writeln!(f, "layer,param_index,prediction_gap")?;
    let ranges = params.spec.layer_ranges();
    for (l, range) in ranges.iter().enumerate() {
        let mut tops = top_k_indices(&imp0.layers[l], k_eff(l));
        for idx in top_k_indices(&imp1.layers[l], k_eff(l)) {
            if !tops.contains(&idx) {
                tops.push(idx);
            }
        }
        tops.sort_unstable();
        for local in tops {
            let k = range.start + local;
            let gap = prediction_gap(&params, k, &g0, &g1)?;
            writeln!(f, "{l},{k},{gap:?}")?;
        }
    }

    Ok(AuditOutputs {
        parity_csv,
        overlap_csv,
        report,
        overlaps,
    })
}

fn sublayer(imp: &rationale::ImportanceVector, layer: usize) -> rationale::ImportanceVector {
    rationale::ImportanceVector {
        subgroup: imp.subgroup.clone(),
        layers: vec![imp.layers[layer].clone()],
    }
}

/// Capped subgroup pair used by audits, exposed for external tooling.
pub fn capped_subgroups<'a>(
    data: &'a DatasetTable,
    cap: usize,
) -> Result<(SubgroupView<'a>, SubgroupView<'a>), HarnessError> {
    Ok((
        data.subgroup(0, None)?.truncated(cap),
        data.subgroup(1, None)?.truncated(cap),
    ))
}
