//! Pair-bootstrap confidence intervals and stratified subgroup estimates.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NcoSpec};
use crate::error::{Error, Result};
use crate::estimators::{self, EffectPoint, EstimatorKind, PairData};
use crate::matcher::MatchedSample;

pub const DEFAULT_REPLICATES: usize = 2000;
pub const MIN_REPLICATES: usize = 100;
/// Share of failed replicates tolerated before the bootstrap errors out.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapParams {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl BootstrapParams {
    pub fn new(replicates: usize, level: f64, seed: u64) -> Self {
        BootstrapParams { replicates, level, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < MIN_REPLICATES {
            return Err(Error::InvalidArgument(format!(
                "at least {MIN_REPLICATES} bootstrap replicates required, got {}",
                self.replicates
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: EffectPoint,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    /// Replicates that produced an estimate.
    pub replicates: usize,
    pub failed: usize,
    pub seed: u64,
    /// The point estimate lies outside its own percentile interval.
    pub point_outside_ci: bool,
}

impl EffectEstimate {
    pub fn ci(&self) -> (f64, f64) {
        (self.ci_low, self.ci_high)
    }
}

/// Linear-interpolation quantile of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval from bootstrap draws (need not be sorted).
pub fn percentile_ci(draws: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (percentile(&sorted, alpha), percentile(&sorted, 1.0 - alpha))
}

/// Seed of replicate `b`.
pub fn replicate_seed(seed: u64, b: usize) -> u64 {
    seed ^ b as u64
}

fn summarize<F>(point: EffectPoint, params: &BootstrapParams, replicate: F) -> Result<EffectEstimate>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64> + Sync,
{
    let outcomes: Vec<Result<f64>> = (0..params.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(params.seed, b));
            replicate(&mut rng)
        })
        .collect();
    let mut draws = Vec::with_capacity(outcomes.len());
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for r in outcomes {
        match r {
            Ok(v) => draws.push(v),
            Err(e) => *failures.entry(e.to_string()).or_default() += 1,
        }
    }
    let failed = params.replicates - draws.len();
    if failed as f64 > MAX_FAILURE_RATE * params.replicates as f64 || draws.is_empty() {
        let breakdown = failures
            .iter()
            .map(|(msg, n)| format!("{n}x {msg}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Bootstrap {
            failed,
            replicates: params.replicates,
            breakdown,
        });
    }
    let (ci_low, ci_high) = percentile_ci(&draws, params.level);
    Ok(EffectEstimate {
        point_outside_ci: point.atet < ci_low || point.atet > ci_high,
        point,
        ci_low,
        ci_high,
        level: params.level,
        replicates: draws.len(),
        failed,
        seed: params.seed,
    })
}

/// Point estimate plus a percentile CI from resampling whole matched pairs.
pub fn bootstrap_ci(data: &PairData, kind: EstimatorKind, params: &BootstrapParams) -> Result<EffectEstimate> {
    params.validate()?;
    let point = data.estimate(kind, &data.all())?;
    let n = data.len();
    summarize(point, params, |rng| {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        data.estimate(kind, &idx).map(|p| p.atet)
    })
}

/// Bootstrap `kind` on a matched sample. `dataset` must carry the binary NCO
/// described by `nco` when the estimator needs one; the adjusted DiD uses the
/// default adjustment set.
pub fn estimate_matched(
    dataset: &Dataset,
    matched: &MatchedSample,
    nco: Option<&NcoSpec>,
    kind: EstimatorKind,
    params: &BootstrapParams,
) -> Result<EffectEstimate> {
    let adjustment = if kind == EstimatorKind::DidAdjusted {
        estimators::default_adjustment(dataset)
    } else {
        Vec::new()
    };
    let window = nco.map(|s| s.window_years);
    let data = PairData::from_dataset(matched, dataset, nco, window, &adjustment)?;
    bootstrap_ci(&data, kind, params)
}

/// Unadjusted contrast on the unmatched arms, resampling each arm separately.
pub fn bootstrap_unmatched(dataset: &Dataset, params: &BootstrapParams) -> Result<EffectEstimate> {
    params.validate()?;
    let point = estimators::atet_unmatched(dataset)?;
    let arm = |t: bool| -> Vec<f64> {
        dataset
            .records()
            .iter()
            .filter(|r| r.treatment == t)
            .map(|r| f64::from(u8::from(r.outcome)))
            .collect()
    };
    let (yt, yc) = (arm(true), arm(false));
    summarize(point, params, |rng| {
        let mut draw = |v: &[f64]| (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).sum::<f64>() / v.len() as f64;
        let mt = draw(&yt);
        let mc = draw(&yc);
        Ok(mt - mc)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumSpec {
    pub variable: String,
    /// Bin i covers (edge[i-1], edge[i]]; the outer bins are unbounded.
    pub bin_edges: Vec<f64>,
    pub bin_labels: Vec<String>,
    /// Covariates left out of within-stratum adjustment.
    pub dropped_covariates: Vec<String>,
}

impl StratumSpec {
    /// Minimum institution rank (log10 scale): top 10, 11 to 100, others.
    pub fn institution() -> Self {
        StratumSpec {
            variable: "log_inst_rank_min".into(),
            bin_edges: vec![1.0, 2.0],
            bin_labels: vec!["top-10".into(), "11-100".into(), "others".into()],
            dropped_covariates: vec![
                "log_inst_rank_min".into(),
                "log_inst_rank_avg".into(),
                "log_inst_rank_max".into(),
            ],
        }
    }

    /// Maximum author citation count (log10 scale): below 500, 500 to 2000, above.
    pub fn citations() -> Self {
        StratumSpec {
            variable: "log_author_cite_max".into(),
            bin_edges: vec![500f64.log10(), 2000f64.log10()],
            bin_labels: vec!["<500".into(), "500-2000".into(), ">2000".into()],
            dropped_covariates: vec![
                "log_author_cite_min".into(),
                "log_author_cite_avg".into(),
                "log_author_cite_max".into(),
            ],
        }
    }

    /// Bins on any numeric covariate; labels are generated from the edges.
    pub fn custom(variable: &str, bin_edges: Vec<f64>) -> Self {
        let mut labels = Vec::with_capacity(bin_edges.len() + 1);
        for i in 0..=bin_edges.len() {
            labels.push(match (i.checked_sub(1).map(|j| bin_edges[j]), bin_edges.get(i)) {
                (None, Some(hi)) => format!("<={hi}"),
                (Some(lo), Some(hi)) => format!("({lo},{hi}]"),
                (Some(lo), None) => format!(">{lo}"),
                (None, None) => "all".into(),
            });
        }
        StratumSpec {
            variable: variable.into(),
            bin_edges,
            bin_labels: labels,
            dropped_covariates: vec![variable.into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("bin edges must be finite".into()));
        }
        if self.bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "bin edges must be strictly increasing: {:?}",
                self.bin_edges
            )));
        }
        if self.bin_labels.len() != self.bin_edges.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} edges need {} labels, got {}",
                self.bin_edges.len(),
                self.bin_edges.len() + 1,
                self.bin_labels.len()
            )));
        }
        Ok(())
    }

    /// Index of the bin containing `x`.
    pub fn bin(&self, x: f64) -> usize {
        self.bin_edges.partition_point(|&e| e < x)
    }
}

pub const ALL_STRATA: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumEstimate {
    pub label: String,
    pub estimate: Option<EffectEstimate>,
    pub n_treated: usize,
    pub n_control: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-stratum estimates (pairs follow their treated member) and an
/// all-strata row, which comes last.
pub fn stratified_estimates(
    matched: &MatchedSample,
    dataset: &Dataset,
    spec: &StratumSpec,
    kind: EstimatorKind,
    nco: Option<&NcoSpec>,
    adjustment: &[String],
    params: &BootstrapParams,
) -> Result<Vec<StratumEstimate>> {
    spec.validate()?;
    params.validate()?;
    if dataset.schema().entry(&spec.variable).is_none() {
        return Err(Error::Schema(format!("stratification variable `{}` not in schema", spec.variable)));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.bin_labels.len()];
    for (i, p) in matched.pairs.iter().enumerate() {
        let r = dataset
            .get(&p.treated)
            .ok_or_else(|| Error::Estimation(format!("matched id `{}` not in dataset", p.treated)))?;
        let x = dataset.value(r, &spec.variable).and_then(|v| v.as_f64()).ok_or_else(|| {
            Error::data(None, Some(&spec.variable), format!("record `{}` has no numeric value", r.id))
        })?;
        members[spec.bin(x)].push(i);
    }
    let kept: Vec<String> = adjustment
        .iter()
        .filter(|a| !spec.dropped_covariates.contains(a))
        .cloned()
        .collect();
    let window = (kind == EstimatorKind::Qq).then(|| nco.map(|s| s.window_years)).flatten();

    let mut out = Vec::with_capacity(members.len() + 1);
    let labels = spec.bin_labels.iter().map(String::as_str).chain([ALL_STRATA]);
    let groups = members.into_iter().chain([(0..matched.len()).collect()]);
    for (label, idx) in labels.zip(groups) {
        let n = idx.len();
        let mut row = StratumEstimate {
            label: label.to_string(),
            estimate: None,
            n_treated: n,
            n_control: n,
            error: None,
        };
        if n > 0 {
            let sub = matched.select(idx);
            let result = PairData::from_dataset(&sub, dataset, nco, window, &kept)
                .and_then(|data| bootstrap_ci(&data, kind, params));
            match result {
                Ok(e) => row.estimate = Some(e),
                Err(e) => row.error = Some(e.to_string()),
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// overlap[i][j] iff the CIs of estimates i and j intersect.
pub fn overlap_report(estimates: &[EffectEstimate]) -> Vec<Vec<bool>> {
    estimates
        .iter()
        .map(|a| {
            estimates
                .iter()
                .map(|b| a.ci_low.max(b.ci_low) <= a.ci_high.min(b.ci_high))
                .collect()
        })
        .collect()
}

/// One line of the long-format estimates table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    /// NCO panel label, e.g. `n3_q0.5`.
    pub panel: String,
    pub stratum: String,
    pub estimator: EstimatorKind,
    pub nco_years: Option<u32>,
    pub nco_quantile: Option<f64>,
    pub nco_threshold: Option<i64>,
    pub atet: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub replicates: usize,
    pub failed: usize,
    pub n_pairs: usize,
    pub seed: u64,
}

impl EstimateRow {
    pub fn new(panel: &str, stratum: &str, e: &EffectEstimate) -> Self {
        let nco = e.point.nco.as_ref();
        EstimateRow {
            panel: panel.to_string(),
            stratum: stratum.to_string(),
            estimator: e.point.estimator,
            nco_years: nco.map(|s| s.window_years),
            nco_quantile: nco.map(|s| s.quantile),
            nco_threshold: nco.map(|s| s.threshold),
            atet: e.point.atet,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            level: e.level,
            replicates: e.replicates,
            failed: e.failed,
            n_pairs: e.point.n_pairs,
            seed: e.seed,
        }
    }
}

pub fn write_long_csv<W: Write>(rows: &[EstimateRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in rows {
        w.serialize(row).map_err(crate::dataset::csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CovariateEntry, CovariateKind, CovariateSchema, CovariateValue, Role, SubmissionRecord};
    use crate::matcher::{MatchSpec, MatchedPair};
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use std::collections::HashMap;

    fn sample(n: usize) -> MatchedSample {
        MatchedSample {
            pairs: (0..n)
                .map(|i| MatchedPair {
                    treated: format!("t{i}"),
                    control: format!("c{i}"),
                })
                .collect(),
            spec: MatchSpec::default(),
            total_cost: 0.0,
            fine_balance_deviation: 0,
        }
    }

    fn random_data(n: usize, seed: u64) -> PairData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = HashMap::new();
        let mut nco = HashMap::new();
        for i in 0..n {
            y.insert(format!("t{i}"), rng.random_bool(0.6));
            y.insert(format!("c{i}"), rng.random_bool(0.4));
            nco.insert(format!("t{i}"), rng.random_bool(0.5));
            nco.insert(format!("c{i}"), rng.random_bool(0.4));
        }
        PairData::from_maps(&sample(n), &y, Some(&nco), None).unwrap()
    }

    #[test]
    fn constant_outcomes_give_degenerate_interval() {
        let y: HashMap<String, bool> = (0..50)
            .flat_map(|i| [(format!("t{i}"), true), (format!("c{i}"), false)])
            .collect();
        let data = PairData::from_maps(&sample(50), &y, None, None).unwrap();
        let e = bootstrap_ci(&data, EstimatorKind::Unadjusted, &BootstrapParams::new(200, 0.95, 1)).unwrap();
        assert_eq!((e.ci_low, e.ci_high), (1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_deterministic_and_nested() {
        let data = random_data(80, 4);
        let p95 = BootstrapParams::new(500, 0.95, 42);
        let a = bootstrap_ci(&data, EstimatorKind::DidNco, &p95).unwrap();
        let b = bootstrap_ci(&data, EstimatorKind::DidNco, &p95).unwrap();
        assert_eq!(a.ci_low.to_bits(), b.ci_low.to_bits());
        assert_eq!(a.ci_high.to_bits(), b.ci_high.to_bits());
        let c = bootstrap_ci(&data, EstimatorKind::DidNco, &BootstrapParams { level: 0.9, ..p95 }).unwrap();
        assert!(c.ci_low >= a.ci_low && c.ci_high <= a.ci_high);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let d = pool.install(|| bootstrap_ci(&data, EstimatorKind::DidNco, &p95).unwrap());
        assert_eq!(d, a);
    }

    #[test]
    fn parameter_checks() {
        let data = random_data(10, 1);
        assert!(bootstrap_ci(&data, EstimatorKind::Unadjusted, &BootstrapParams::new(99, 0.95, 1)).is_err());
        assert!(bootstrap_ci(&data, EstimatorKind::Unadjusted, &BootstrapParams::new(100, 1.0, 1)).is_err());
    }

    #[test]
    fn failures_above_one_percent_abort() {
        // QQ without counts fails on every replicate (and on the point)
        let data = random_data(10, 1);
        assert!(bootstrap_ci(&data, EstimatorKind::Qq, &BootstrapParams::new(100, 0.95, 1)).is_err());
        let point = data.estimate(EstimatorKind::Unadjusted, &data.all()).unwrap();
        let params = BootstrapParams::new(200, 0.95, 3);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let flaky = |_: &mut ChaCha8Rng| {
            if calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < 2 {
                Err(Error::Estimation("boom".into()))
            } else {
                Ok(0.5)
            }
        };
        let e = summarize(point.clone(), &params, flaky).unwrap();
        assert_eq!((e.failed, e.replicates), (2, 198));
        calls.store(0, std::sync::atomic::Ordering::SeqCst);
        let too_flaky = |_: &mut ChaCha8Rng| {
            if calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) < 3 {
                Err(Error::Estimation("boom".into()))
            } else {
                Ok(0.5)
            }
        };
        match summarize(point, &params, too_flaky) {
            Err(Error::Bootstrap { failed, breakdown, .. }) => {
                assert_eq!(failed, 3);
                assert!(breakdown.contains("3x"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_abs_diff_eq!(percentile(&v, 0.5), 2.5);
        assert_abs_diff_eq!(percentile(&v, 0.25), 1.75);
    }

    #[test]
    fn overlap_matrix() {
        let data = random_data(10, 1);
        let point = data.estimate(EstimatorKind::Unadjusted, &data.all()).unwrap();
        let est = |lo: f64, hi: f64| EffectEstimate {
            point: point.clone(),
            ci_low: lo,
            ci_high: hi,
            level: 0.95,
            replicates: 100,
            failed: 0,
            seed: 0,
            point_outside_ci: false,
        };
        let m = overlap_report(&[est(0.0, 2.0), est(1.0, 3.0), est(2.5, 4.0)]);
        assert!(m[0][1] && m[1][0]);
        assert!(!m[0][2]);
        assert!(m[1][2]);
        assert!(m[2][2]);
    }

    #[test]
    fn stratum_bins() {
        let s = StratumSpec::institution();
        s.validate().unwrap();
        assert_eq!(s.bin(0.0), 0);
        assert_eq!(s.bin(1.0), 0);
        assert_eq!(s.bin(1.5), 1);
        assert_eq!(s.bin(2.3), 2);
        assert!(StratumSpec::custom("x", vec![2.0, 1.0]).validate().is_err());
        assert_eq!(StratumSpec::custom("x", vec![1.0]).bin_labels, vec!["<=1", ">1"]);
    }

    fn strat_dataset(n: usize) -> (Dataset, MatchedSample) {
        let schema = CovariateSchema::new(vec![CovariateEntry::new(
            "score",
            CovariateKind::Numeric,
            &[Role::StratificationOnly],
        )])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let date = NaiveDate::from_ymd_opt(2019, 5, 1).unwrap();
        let mut records = Vec::new();
        for i in 0..n {
            for (prefix, t) in [("t", true), ("c", false)] {
                records.push(SubmissionRecord {
                    id: format!("{prefix}{i}"),
                    treatment: t,
                    outcome: rng.random_bool(if t { 0.6 } else { 0.4 }),
                    covariates: vec![Some(CovariateValue::Number(rng.random::<f64>() * 3.0))],
                    publication_date: date,
                    citing_dates: vec![],
                    citation_counts: Default::default(),
                    nco: None,
                });
            }
        }
        (Dataset::new(schema, records).unwrap(), sample(n))
    }

    #[test]
    fn strata_partition_pairs() {
        let (ds, m) = strat_dataset(120);
        let params = BootstrapParams::new(200, 0.95, 5);
        let rows = stratified_estimates(
            &m,
            &ds,
            &StratumSpec::custom("score", vec![1.0, 2.0, 10.0]),
            EstimatorKind::Unadjusted,
            None,
            &[],
            &params,
        )
        .unwrap();
        assert_eq!(rows.len(), 5);
        let total: usize = rows[..4].iter().map(|r| r.n_treated).sum();
        assert_eq!(total, 120);
        // last finite bin is empty
        assert!(rows[3].estimate.is_none() && rows[3].n_treated == 0);
        assert_eq!(rows[4].label, ALL_STRATA);

        // one all-covering stratum reproduces the unstratified estimate
        let single = stratified_estimates(
            &m,
            &ds,
            &StratumSpec::custom("score", vec![]),
            EstimatorKind::Unadjusted,
            None,
            &[],
            &params,
        )
        .unwrap();
        let data = PairData::from_dataset(&m, &ds, None, None, &[]).unwrap();
        let direct = bootstrap_ci(&data, EstimatorKind::Unadjusted, &params).unwrap();
        assert_eq!(single[0].estimate.as_ref().unwrap(), &direct);
        assert_eq!(single[1].estimate.as_ref().unwrap(), &direct);
    }

    #[test]
    fn long_csv_has_header_and_rows() {
        let data = random_data(30, 2);
        let e = bootstrap_ci(&data, EstimatorKind::DidNco, &BootstrapParams::new(100, 0.95, 1)).unwrap();
        let mut buf = Vec::new();
        write_long_csv(&[EstimateRow::new("primary", ALL_STRATA, &e)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("panel,stratum,estimator,nco_years"));
        assert!(lines.next().unwrap().starts_with("primary,all,did_nco,"));
    }

    #[test]
    fn unmatched_bootstrap_runs() {
        let (ds, _) = strat_dataset(50);
        let e = bootstrap_unmatched(&ds, &BootstrapParams::new(200, 0.95, 1)).unwrap();
        assert!(e.point.diagnostics.unmatched);
        assert!(e.ci_low <= e.ci_high);
    }
}
