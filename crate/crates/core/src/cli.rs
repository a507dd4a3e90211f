//! The `ncodid` command line: validate, match, estimate, stratify, qq,
//! simulate and report. Every command writes deterministic artifacts into
//! `--output-dir` and records its parameters in `manifest.json` there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::balance::BalanceTable;
use crate::dataset::{
    self, load_dataset, validate_schema, CovariateSchema, Dataset, LoadReport, NcoSpec,
    DEFAULT_EVALUATION_YEAR,
};
use crate::dgp::{self, DgpConfig, EquiConfoundingMode, PopulationSample};
use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorKind, PairData};
use crate::inference::{
    self, bootstrap_ci, BootstrapParams, EffectEstimate, EstimateRow, StratumEstimate, StratumSpec, ALL_STRATA,
    DEFAULT_REPLICATES,
};
use crate::matcher::{self, MatchSpec, MatchedSample};

pub const SEED_ENV: &str = "NCODID_SEED";
pub const MANIFEST: &str = "manifest.json";
/// Post-match |SMD| above this is flagged.
pub const SMD_THRESHOLD: f64 = 0.1;
const POPULATION_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Parser)]
#[command(name = "ncodid", version, about = "NCO-debiased ATET estimation on matched samples")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Submission CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Covariate schema JSON; defaults to the built-in peer-review schema.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
    /// Year from which citation windows are judged complete.
    #[arg(long, default_value_t = DEFAULT_EVALUATION_YEAR)]
    pub evaluation_year: i32,
}

#[derive(Debug, Clone, Args)]
pub struct BootArgs {
    /// Bootstrap replicates.
    #[arg(long = "bootstrap", default_value_t = DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

impl BootArgs {
    fn params(&self) -> Result<BootstrapParams> {
        let seed = self
            .seed
            .ok_or_else(|| Error::InvalidArgument(format!("--seed (or {SEED_ENV}) is required")))?;
        Ok(BootstrapParams::new(self.replicates, self.level, seed))
    }
}

#[derive(Debug, Clone, Args)]
pub struct NcoArgs {
    /// Citation windows in years, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub nco_years: Vec<u32>,
    /// Quantiles dichotomizing the citation count, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub nco_quantile: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotFormat {
    Svg,
    None,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset against its schema.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Optimal 1:1 matching with fine balance and near-exact constraints.
    Match {
        #[command(flatten)]
        data: DataArgs,
        /// Keep only years with a complete window of this many years.
        #[arg(long)]
        nco_years: Option<u32>,
        #[arg(long)]
        caliper: Option<f64>,
    },
    /// ATET estimates with bootstrap confidence intervals.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        /// Matched pairs (JSON or CSV); defaults to matched.json in the output dir.
        #[arg(long)]
        matched: Option<PathBuf>,
        #[command(flatten)]
        nco: NcoArgs,
        #[arg(long, value_delimiter = ',', value_parser = parse_estimator, default_value = "unadj,did")]
        estimator: Vec<EstimatorKind>,
        #[command(flatten)]
        boot: BootArgs,
        /// Compute the unadjusted contrast on all units instead of the pairs.
        #[arg(long)]
        unmatched: bool,
    },
    /// Estimates within strata of a covariate.
    Stratify {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        matched: Option<PathBuf>,
        #[command(flatten)]
        nco: NcoArgs,
        #[arg(long, value_delimiter = ',', value_parser = parse_estimator, default_value = "did")]
        estimator: Vec<EstimatorKind>,
        #[command(flatten)]
        boot: BootArgs,
        /// institution, citations or a numeric covariate name.
        #[arg(long)]
        stratify_by: String,
        /// Bin edges, comma separated; required for a custom covariate.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        bins: Option<Vec<f64>>,
    },
    /// QQ curve of the control arm and the QQ ATET.
    Qq {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        matched: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        nco_years: u32,
        #[command(flatten)]
        boot: BootArgs,
        /// Points of the u grid in [0, 1].
        #[arg(long, default_value_t = 101)]
        grid: usize,
    },
    /// Draw a synthetic dataset with known ATET.
    Simulate {
        /// DGP configuration (TOML, or JSON by extension).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
        #[arg(long)]
        n_units: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EquiConfoundingMode>,
        /// Calibrate the treatment effect so the population ATET equals this.
        #[arg(long, allow_negative_numbers = true)]
        target_atet: Option<f64>,
    },
    /// Collect a run directory into report.json and forest plots.
    Report {
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = PlotFormat::Svg)]
        plot: PlotFormat,
    },
}

fn parse_estimator(s: &str) -> std::result::Result<EstimatorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<EquiConfoundingMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown mode `{s}` (use additive, qq or violated)"))
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    /// File name of the input (directories are omitted for reproducibility).
    pub input: Option<String>,
    pub input_digest: Option<String>,
    pub parameters: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<LoadReport>,
}

pub type Manifest = BTreeMap<String, CommandRecord>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelEstimate {
    pub panel: String,
    pub stratum: String,
    pub estimate: EffectEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataPanel {
    pub panel: String,
    pub estimator: EstimatorKind,
    pub strata: Vec<StratumEstimate>,
    /// Pairwise CI overlap among the strata with estimates, in `strata` order.
    pub overlap_labels: Vec<String>,
    pub overlap: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataFile {
    pub spec: StratumSpec,
    pub panels: Vec<StrataPanel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QqFile {
    pub estimate: EffectEstimate,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: DgpConfig,
    pub finite_sample_atet: f64,
    pub population_atet: f64,
    pub population_draws: usize,
    pub note: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    pub dropped_missing_publication_date: usize,
    pub zero_citation_rows: usize,
    pub clamped_low: usize,
    pub clamped_high: usize,
    pub nonconverged_fits: usize,
    pub bootstrap_failures: usize,
    pub points_outside_ci: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool: String,
    pub version: String,
    /// Input file digests by command.
    pub input_digests: BTreeMap<String, String>,
    pub commands: Manifest,
    pub estimates: Vec<PanelEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<StrataFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qq: Option<QqFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceTable>,
    pub nco_specs: Vec<NcoSpec>,
    pub diagnostics: ReportDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
    pub plots: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { data } => validate(&data),
        Command::Match {
            data,
            nco_years,
            caliper,
        } => match_cmd(&data, nco_years, caliper),
        Command::Estimate {
            data,
            matched,
            nco,
            estimator,
            boot,
            unmatched,
        } => estimate(&data, matched.as_deref(), &nco, &estimator, &boot, unmatched),
        Command::Stratify {
            data,
            matched,
            nco,
            estimator,
            boot,
            stratify_by,
            bins,
        } => stratify(&data, matched.as_deref(), &nco, &estimator, &boot, &stratify_by, bins),
        Command::Qq {
            data,
            matched,
            nco_years,
            boot,
            grid,
        } => qq(&data, matched.as_deref(), nco_years, &boot, grid),
        Command::Simulate {
            config,
            output_dir,
            seed,
            n_units,
            mode,
            target_atet,
        } => simulate(config.as_deref(), &output_dir, seed, n_units, mode, target_atet),
        Command::Report { output_dir, plot } => report(&output_dir, plot),
    }
}

struct Loaded {
    dataset: Dataset,
    report: LoadReport,
    digest: String,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_name(path: &Path) -> Option<String> {
    path.file_name().map(|n| n.to_string_lossy().into_owned())
}

fn load(data: &DataArgs) -> Result<Loaded> {
    let schema = match &data.schema {
        Some(path) => CovariateSchema::from_json_reader(fs::File::open(path)?)?,
        None => CovariateSchema::iclr_default(),
    };
    let bytes = fs::read(&data.input)?;
    let (dataset, report) = load_dataset(bytes.as_slice(), &schema)?;
    Ok(Loaded {
        dataset,
        report,
        digest: digest(&bytes),
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn record(dir: &Path, command: &str, entry: CommandRecord) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut manifest: Manifest = if path.exists() { read_json(&path)? } else { Manifest::new() };
    manifest.insert(command.to_string(), entry);
    write_json(dir, MANIFEST, &manifest)
}

fn data_record(data: &DataArgs, loaded: &Loaded, parameters: serde_json::Value) -> CommandRecord {
    CommandRecord {
        input: file_name(&data.input),
        input_digest: Some(loaded.digest.clone()),
        parameters,
        load: Some(loaded.report.clone()),
    }
}

fn output_dir(path: &Path) -> Result<&Path> {
    fs::create_dir_all(path)?;
    Ok(path)
}

fn validate(data: &DataArgs) -> Result<()> {
    let dir = output_dir(&data.output_dir)?;
    let loaded = load(data)?;
    let report = validate_schema(&loaded.dataset);
    write_json(dir, "validation.json", &report)?;
    record(
        dir,
        "validate",
        data_record(data, &loaded, json!({ "evaluation_year": data.evaluation_year })),
    )?;
    if let Some(v) = report.violations.first() {
        return Err(Error::Data {
            row: None,
            column: Some(v.column.clone()),
            message: format!(
                "{} schema violation(s); first: record `{}`: {}",
                report.violations.len(),
                v.record_id,
                v.message
            ),
        });
    }
    println!("{} records valid", loaded.dataset.len());
    Ok(())
}

fn restrict_years(dataset: &Dataset, years: u32, evaluation_year: i32) -> Dataset {
    let cutoff = evaluation_year - years as i32;
    dataset.filter(|r| dataset.year_of(r).is_some_and(|y| y <= cutoff))
}

fn match_cmd(data: &DataArgs, nco_years: Option<u32>, caliper: Option<f64>) -> Result<()> {
    let dir = output_dir(&data.output_dir)?;
    let loaded = load(data)?;
    let dataset = match nco_years {
        Some(n) => restrict_years(&loaded.dataset, n, data.evaluation_year),
        None => loaded.dataset.clone(),
    };
    let mut spec = MatchSpec::from_schema(dataset.schema());
    spec.caliper = caliper;
    let matched = matcher::match_dataset(&dataset, &spec)?;
    let balance = matcher::verify_balance(&dataset, &matched, SMD_THRESHOLD)?;

    write_json(dir, "matched.json", &matched)?;
    matched.write_csv(fs::File::create(dir.join("matched.csv"))?)?;
    write_json(dir, "balance.json", &balance)?;
    balance.table.write_csv(fs::File::create(dir.join("balance.csv"))?)?;
    fs::write(dir.join("balance.txt"), balance.table.render_text())?;
    record(
        dir,
        "match",
        data_record(
            data,
            &loaded,
            json!({
                "nco_years": nco_years,
                "caliper": caliper,
                "evaluation_year": data.evaluation_year,
                "spec": matched.spec,
            }),
        ),
    )?;
    println!(
        "{} pairs, total cost {:.6}, fine-balance deviation {}, {} covariate(s) above |SMD| {SMD_THRESHOLD}",
        matched.len(),
        matched.total_cost,
        matched.fine_balance_deviation,
        balance.flagged.len()
    );
    Ok(())
}

fn load_matched(dir: &Path, matched: Option<&Path>, dataset: &Dataset) -> Result<MatchedSample> {
    let path = matched.map(Path::to_path_buf).unwrap_or_else(|| dir.join("matched.json"));
    let sample = if path.extension().is_some_and(|e| e == "csv") {
        MatchedSample::read_csv(fs::File::open(&path)?)?
    } else {
        read_json(&path)?
    };
    for id in sample.ids() {
        if dataset.get(id).is_none() {
            return Err(Error::InvalidArgument(format!(
                "matched id `{id}` from {} is not in the dataset",
                path.display()
            )));
        }
    }
    if sample.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no pairs", path.display())));
    }
    Ok(sample)
}

/// One NCO panel: the threshold is computed on the matched records with a
/// complete window, and pairs outside that window are dropped.
struct Panel {
    label: String,
    nco: Option<NcoSpec>,
    dataset: Dataset,
    matched: MatchedSample,
}

fn panels(dataset: &Dataset, matched: &MatchedSample, nco: &NcoArgs, evaluation_year: i32) -> Result<Vec<Panel>> {
    if nco.nco_years.is_empty() {
        return Ok(vec![Panel {
            label: "primary".into(),
            nco: None,
            dataset: dataset.subset(matched.ids()),
            matched: matched.clone(),
        }]);
    }
    if nco.nco_quantile.is_empty() {
        return Err(Error::InvalidArgument("--nco-quantile needs at least one value".into()));
    }
    let mut out = Vec::new();
    for &n in &nco.nco_years {
        for &q in &nco.nco_quantile {
            let p = estimators::nco_panel(dataset, matched, n, q, evaluation_year)?;
            out.push(Panel {
                label: format!("n{n}_q{q}"),
                nco: Some(p.spec),
                dataset: p.dataset,
                matched: p.matched,
            });
        }
    }
    Ok(out)
}

fn check_estimators(kinds: &[EstimatorKind], nco: &NcoArgs) -> Result<()> {
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("no estimator requested".into()));
    }
    if nco.nco_years.is_empty() {
        if let Some(k) = kinds.iter().find(|k| k.needs_nco()) {
            return Err(Error::InvalidArgument(format!("estimator `{}` requires --nco-years", k.cli_tag())));
        }
    }
    Ok(())
}

fn estimate(
    data: &DataArgs,
    matched: Option<&Path>,
    nco: &NcoArgs,
    kinds: &[EstimatorKind],
    boot: &BootArgs,
    unmatched: bool,
) -> Result<()> {
    check_estimators(kinds, nco)?;
    let params = boot.params()?;
    let dir = output_dir(&data.output_dir)?;
    let loaded = load(data)?;
    let sample = load_matched(dir, matched, &loaded.dataset)?;

    let mut rows = Vec::new();
    for panel in panels(&loaded.dataset, &sample, nco, data.evaluation_year)? {
        for &kind in kinds {
            let estimate = if unmatched && kind == EstimatorKind::Unadjusted {
                let population = match &panel.nco {
                    Some(spec) => restrict_years(&loaded.dataset, spec.window_years, data.evaluation_year),
                    None => loaded.dataset.clone(),
                };
                inference::bootstrap_unmatched(&population, &params)?
            } else {
                inference::estimate_matched(&panel.dataset, &panel.matched, panel.nco.as_ref(), kind, &params)?
            };
            rows.push(PanelEstimate {
                panel: panel.label.clone(),
                stratum: ALL_STRATA.into(),
                estimate,
            });
        }
    }
    write_json(dir, "estimates.json", &rows)?;
    write_rows_csv(&dir.join("estimates.csv"), &rows)?;
    record(
        dir,
        "estimate",
        data_record(
            data,
            &loaded,
            json!({
                "matched": matched.and_then(file_name).unwrap_or_else(|| "matched.json".into()),
                "nco_years": nco.nco_years,
                "nco_quantile": nco.nco_quantile,
                "estimators": kinds,
                "bootstrap": params,
                "unmatched": unmatched,
                "evaluation_year": data.evaluation_year,
            }),
        ),
    )?;
    for r in &rows {
        let e = &r.estimate;
        println!(
            "{:<12} {:<13} {:+.4} [{:+.4}, {:+.4}]",
            r.panel, e.point.estimator, e.point.atet, e.ci_low, e.ci_high
        );
    }
    Ok(())
}

fn write_rows_csv(path: &Path, rows: &[PanelEstimate]) -> Result<()> {
    let rows: Vec<EstimateRow> = rows
        .iter()
        .map(|r| EstimateRow::new(&r.panel, &r.stratum, &r.estimate))
        .collect();
    inference::write_long_csv(&rows, fs::File::create(path)?)
}

fn stratum_spec(by: &str, bins: Option<Vec<f64>>) -> Result<StratumSpec> {
    let preset = match by {
        "institution" => Some(StratumSpec::institution()),
        "citations" => Some(StratumSpec::citations()),
        _ => None,
    };
    let spec = match (preset, bins) {
        (Some(p), None) => p,
        (Some(p), Some(edges)) => StratumSpec {
            dropped_covariates: p.dropped_covariates,
            ..StratumSpec::custom(&p.variable, edges)
        },
        (None, Some(edges)) => StratumSpec::custom(by, edges),
        (None, None) => {
            return Err(Error::InvalidArgument(format!("--bins is required to stratify by `{by}`")));
        }
    };
    spec.validate()?;
    Ok(spec)
}

#[allow(clippy::too_many_arguments)]
fn stratify(
    data: &DataArgs,
    matched: Option<&Path>,
    nco: &NcoArgs,
    kinds: &[EstimatorKind],
    boot: &BootArgs,
    by: &str,
    bins: Option<Vec<f64>>,
) -> Result<()> {
    check_estimators(kinds, nco)?;
    let params = boot.params()?;
    let spec = stratum_spec(by, bins)?;
    let dir = output_dir(&data.output_dir)?;
    let loaded = load(data)?;
    if loaded.dataset.schema().entry(&spec.variable).is_none() {
        return Err(Error::Schema(format!("stratification variable `{}` not in schema", spec.variable)));
    }
    let sample = load_matched(dir, matched, &loaded.dataset)?;

    let mut out = Vec::new();
    let mut rows = Vec::new();
    for panel in panels(&loaded.dataset, &sample, nco, data.evaluation_year)? {
        for &kind in kinds {
            let adjustment = if kind == EstimatorKind::DidAdjusted {
                estimators::default_adjustment(&panel.dataset)
            } else {
                Vec::new()
            };
            let strata = inference::stratified_estimates(
                &panel.matched,
                &panel.dataset,
                &spec,
                kind,
                panel.nco.as_ref(),
                &adjustment,
                &params,
            )?;
            let with_estimates: Vec<&StratumEstimate> = strata
                .iter()
                .filter(|s| s.label != ALL_STRATA && s.estimate.is_some())
                .collect();
            let estimates: Vec<EffectEstimate> =
                with_estimates.iter().map(|s| s.estimate.clone().expect("filtered")).collect();
            for s in &strata {
                if let Some(e) = &s.estimate {
                    rows.push(PanelEstimate {
                        panel: panel.label.clone(),
                        stratum: s.label.clone(),
                        estimate: e.clone(),
                    });
                }
            }
            out.push(StrataPanel {
                panel: panel.label.clone(),
                estimator: kind,
                overlap_labels: with_estimates.iter().map(|s| s.label.clone()).collect(),
                overlap: inference::overlap_report(&estimates),
                strata,
            });
        }
    }
    let file = StrataFile { spec, panels: out };
    write_json(dir, "strata.json", &file)?;
    write_rows_csv(&dir.join("strata.csv"), &rows)?;
    record(
        dir,
        "stratify",
        data_record(
            data,
            &loaded,
            json!({
                "matched": matched.and_then(file_name).unwrap_or_else(|| "matched.json".into()),
                "nco_years": nco.nco_years,
                "nco_quantile": nco.nco_quantile,
                "estimators": kinds,
                "bootstrap": params,
                "stratify_by": by,
                "stratum_spec": file.spec,
                "evaluation_year": data.evaluation_year,
            }),
        ),
    )?;
    for p in &file.panels {
        for s in &p.strata {
            match &s.estimate {
                Some(e) => println!(
                    "{:<12} {:<13} {:<10} n={:<5} {:+.4} [{:+.4}, {:+.4}]",
                    p.panel, p.estimator, s.label, s.n_treated, e.point.atet, e.ci_low, e.ci_high
                ),
                None => println!("{:<12} {:<13} {:<10} n={:<5} -", p.panel, p.estimator, s.label, s.n_treated),
            }
        }
    }
    Ok(())
}

fn qq(data: &DataArgs, matched: Option<&Path>, years: u32, boot: &BootArgs, grid: usize) -> Result<()> {
    if grid < 2 {
        return Err(Error::InvalidArgument("--grid needs at least 2 points".into()));
    }
    let params = boot.params()?;
    let dir = output_dir(&data.output_dir)?;
    let loaded = load(data)?;
    let sample = load_matched(dir, matched, &loaded.dataset)?;
    let window = restrict_years(&loaded.dataset, years, data.evaluation_year);
    let keep: Vec<usize> = (0..sample.len())
        .filter(|&i| {
            let p = &sample.pairs[i];
            window.get(&p.treated).is_some() && window.get(&p.control).is_some()
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::InvalidArgument(format!("no matched pairs with a complete {years}-year window")));
    }
    let sample = sample.select(keep);
    let pair_data = PairData::from_dataset(&sample, &window, None, Some(years), &[])?;
    let estimate = bootstrap_ci(&pair_data, EstimatorKind::Qq, &params)?;
    let (cdf_y, cdf_n) = pair_data.control_cdfs()?;
    let curve: Vec<(f64, f64)> = (0..grid)
        .map(|i| {
            let u = i as f64 / (grid - 1) as f64;
            (u, estimators::qq_transform(u, &cdf_y, &cdf_n))
        })
        .collect();

    let mut w = csv::Writer::from_writer(fs::File::create(dir.join("qq_curve.csv"))?);
    w.write_record(["u", "qq"]).map_err(dataset::csv_io)?;
    for (u, q) in &curve {
        w.write_record([u.to_string(), q.to_string()]).map_err(dataset::csv_io)?;
    }
    w.flush()?;
    let file = QqFile { estimate, curve };
    write_json(dir, "qq.json", &file)?;
    record(
        dir,
        "qq",
        data_record(
            data,
            &loaded,
            json!({
                "matched": matched.and_then(file_name).unwrap_or_else(|| "matched.json".into()),
                "nco_years": years,
                "bootstrap": params,
                "grid": grid,
                "evaluation_year": data.evaluation_year,
            }),
        ),
    )?;
    let e = &file.estimate;
    println!(
        "qq ATET {:+.4} [{:+.4}, {:+.4}], clamped {}/{}",
        e.point.atet,
        e.ci_low,
        e.ci_high,
        e.point.diagnostics.clamped_low.unwrap_or(0),
        e.point.diagnostics.clamped_high.unwrap_or(0)
    );
    Ok(())
}

fn simulate(
    config_path: Option<&Path>,
    dir: &Path,
    seed: Option<u64>,
    n_units: Option<usize>,
    mode: Option<EquiConfoundingMode>,
    target_atet: Option<f64>,
) -> Result<()> {
    let mut config = match config_path {
        Some(p) => DgpConfig::from_path(p)?,
        None => DgpConfig::default(),
    };
    match (seed, config_path) {
        (Some(s), _) => config.seed = s,
        (None, None) => {
            return Err(Error::InvalidArgument(format!(
                "--seed (or {SEED_ENV}) is required without a config file"
            )))
        }
        (None, Some(_)) => {}
    }
    if let Some(n) = n_units {
        config.n_units = n;
    }
    if let Some(m) = mode {
        config.equi_confounding_mode = m;
    }
    config.validate()?;
    let dir = output_dir(dir)?;
    let population = PopulationSample::draw(&config, dgp::POPULATION_DRAWS, config.seed ^ POPULATION_SEED_SALT)?;
    if let Some(target) = target_atet {
        config.treatment_effect = population.calibrate(target)?;
    }
    let (dataset, units) = dgp::generate(&config)?;
    let truth = Truth {
        finite_sample_atet: dgp::true_atet(&units)?,
        population_atet: population.atet(config.treatment_effect),
        population_draws: dgp::POPULATION_DRAWS,
        note: "synthetic data; all DGP parameter defaults are artifact choices".into(),
        config,
    };
    let mut bytes = Vec::new();
    dataset::write_dataset_csv(&dataset, &mut bytes)?;
    fs::write(dir.join("data.csv"), &bytes)?;
    fs::write(dir.join("schema.json"), dataset.schema().to_json()? + "\n")?;
    write_json(dir, "truth.json", &truth)?;
    record(
        dir,
        "simulate",
        CommandRecord {
            input: config_path.and_then(file_name),
            input_digest: config_path.map(fs::read).transpose()?.map(|b| digest(&b)),
            parameters: json!({ "config": truth.config, "target_atet": target_atet, "output_digest": digest(&bytes) }),
            load: None,
        },
    )?;
    println!(
        "{} units ({} treated), population ATET {:.4}, sample ATET {:.4}",
        dataset.len(),
        dataset.treated_count(),
        truth.population_atet,
        truth.finite_sample_atet
    );
    Ok(())
}

fn read_optional<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn report(dir: &Path, plot: PlotFormat) -> Result<()> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::InvalidArgument(format!("{} has no {MANIFEST}; not a run directory", dir.display())));
    }
    let commands: Manifest = read_json(&manifest_path)?;
    let estimates: Vec<PanelEstimate> = read_optional(&dir.join("estimates.json"))?.unwrap_or_default();
    let strata: Option<StrataFile> = read_optional(&dir.join("strata.json"))?;
    let qq: Option<QqFile> = read_optional(&dir.join("qq.json"))?;
    let balance: Option<matcher::BalanceReport> = read_optional(&dir.join("balance.json"))?;
    let truth: Option<Truth> = read_optional(&dir.join("truth.json"))?;

    let mut all: Vec<&EffectEstimate> = estimates.iter().map(|r| &r.estimate).collect();
    if let Some(s) = &strata {
        all.extend(s.panels.iter().flat_map(|p| p.strata.iter().filter_map(|s| s.estimate.as_ref())));
    }
    if let Some(q) = &qq {
        all.push(&q.estimate);
    }
    let mut diagnostics = ReportDiagnostics::default();
    for c in commands.values() {
        if let Some(l) = &c.load {
            diagnostics.dropped_missing_publication_date =
                diagnostics.dropped_missing_publication_date.max(l.dropped_missing_publication_date);
            diagnostics.zero_citation_rows = diagnostics.zero_citation_rows.max(l.zero_citation_rows);
        }
    }
    let mut nco_specs: Vec<NcoSpec> = Vec::new();
    for e in &all {
        let d = &e.point.diagnostics;
        diagnostics.clamped_low += d.clamped_low.unwrap_or(0);
        diagnostics.clamped_high += d.clamped_high.unwrap_or(0);
        diagnostics.nonconverged_fits += d.fits.iter().filter(|f| !f.converged && !f.degenerate).count();
        diagnostics.bootstrap_failures += e.failed;
        diagnostics.points_outside_ci += usize::from(e.point_outside_ci);
        if let Some(spec) = &e.point.nco {
            if !nco_specs.contains(spec) {
                nco_specs.push(spec.clone());
            }
        }
    }

    let mut plots = Vec::new();
    if plot == PlotFormat::Svg {
        let mut by_panel: BTreeMap<&str, Vec<ForestRow>> = BTreeMap::new();
        for r in &estimates {
            by_panel.entry(&r.panel).or_default().push(ForestRow::from_estimate(&r.estimate, None));
        }
        for (panel, rows) in by_panel {
            let name = format!("forest_{}.svg", sanitize(panel));
            fs::write(dir.join(&name), render_forest_plot(&format!("Panel {panel}"), &rows))?;
            plots.push(name);
        }
        if let Some(s) = &strata {
            for p in &s.panels {
                let rows: Vec<ForestRow> = p
                    .strata
                    .iter()
                    .filter_map(|st| st.estimate.as_ref().map(|e| ForestRow::from_estimate(e, Some(&st.label))))
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let name = format!("forest_strata_{}_{}.svg", sanitize(&p.panel), p.estimator);
                let title = format!("{} by {}, panel {}", p.estimator, s.spec.variable, p.panel);
                fs::write(dir.join(&name), render_forest_plot(&title, &rows))?;
                plots.push(name);
            }
        }
    }

    let report = AnalysisReport {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        input_digests: commands
            .iter()
            .filter_map(|(k, v)| v.input_digest.clone().map(|d| (k.clone(), d)))
            .collect(),
        commands,
        estimates,
        strata,
        qq,
        balance: balance.map(|b| b.table),
        nco_specs,
        diagnostics,
        truth,
        plots,
    };
    write_json(dir, "report.json", &report)?;
    println!("report.json with {} plot(s)", report.plots.len());
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One row of a forest plot.
#[derive(Clone, Debug, PartialEq)]
pub struct ForestRow {
    pub label: String,
    pub atet: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Drawn in red, as for unadjusted rows.
    pub highlight: bool,
}

impl ForestRow {
    pub fn from_estimate(e: &EffectEstimate, stratum: Option<&str>) -> Self {
        let name = match e.point.estimator {
            EstimatorKind::Unadjusted if e.point.diagnostics.unmatched => "Unadj (unmatched)",
            EstimatorKind::Unadjusted => "Unadj",
            EstimatorKind::DidNco => "DiD",
            EstimatorKind::DidAdjusted => "DiD-adj",
            EstimatorKind::Qq => "QQ",
        };
        ForestRow {
            label: match stratum {
                Some(s) => format!("{s} ({name})"),
                None => name.to_string(),
            },
            atet: e.point.atet,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            highlight: e.point.estimator == EstimatorKind::Unadjusted,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static SVG forest plot: one row per estimate with its CI whisker and a
/// dashed zero line. Output depends only on the rows.
pub fn render_forest_plot(title: &str, rows: &[ForestRow]) -> String {
    const LEFT: f64 = 170.0;
    const WIDTH: f64 = 360.0;
    const ROW: f64 = 28.0;
    const TOP: f64 = 40.0;
    let lo = rows.iter().map(|r| r.ci_low.min(r.atet)).fold(0.0f64, f64::min);
    let hi = rows.iter().map(|r| r.ci_high.max(r.atet)).fold(0.0f64, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |v: f64| LEFT + (v - lo) / (hi - lo) * WIDTH;
    let height = TOP + ROW * rows.len() as f64 + 40.0;
    let total_width = LEFT + WIDTH + 30.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_width:.0}" height="{height:.0}" viewBox="0 0 {total_width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="20" font-size="14">{}</text>"#, 10.0, escape(title));
    let axis_y = TOP + ROW * rows.len() as f64;
    let _ = writeln!(
        svg,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4,3"/>"#,
        x(0.0),
        TOP - 10.0,
        x(0.0),
        axis_y
    );
    for (i, r) in rows.iter().enumerate() {
        let y = TOP + ROW * i as f64 + ROW / 2.0;
        let color = if r.highlight { "#d62728" } else { "#1f1f1f" };
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" fill="{color}">{}</text>"#,
            LEFT - 10.0,
            y + 4.0,
            escape(&r.label)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/>"#,
            x(r.ci_low),
            x(r.ci_high)
        );
        for end in [r.ci_low, r.ci_high] {
            let _ = writeln!(
                svg,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{color}" stroke-width="2"/>"#,
                x(end),
                y - 5.0,
                y + 5.0
            );
        }
        let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{y:.1}" r="4" fill="{color}"/>"#, x(r.atet));
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT:.1}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}" stroke="black"/>"#,
        LEFT + WIDTH
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.1}%</text>"#,
            x(v),
            axis_y + 16.0,
            v * 100.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">ATET</text>"#,
        LEFT + WIDTH / 2.0,
        axis_y + 32.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// JSON error payload written to stderr by the binary.
pub fn error_json(e: &Error) -> String {
    let mut detail = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Data { row, column, .. } => {
            detail["row"] = json!(row);
            detail["column"] = json!(column);
        }
        Error::Infeasible { unmatched, .. } => detail["unmatched"] = json!(unmatched),
        Error::Bootstrap { failed, replicates, .. } => {
            detail["failed"] = json!(failed);
            detail["replicates"] = json!(replicates);
        }
        _ => {}
    }
    detail.to_string()
}

/// Exit status for an error: 2 for invalid input, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        1
    }
}
