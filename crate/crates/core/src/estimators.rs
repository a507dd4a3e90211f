//! Point estimators of the ATET on a matched sample.
//!
//! All estimators work on a [`PairData`] table holding, for every matched
//! pair, the treated and control values of Y, the binary NCO, the raw NCO
//! count and optional adjustment covariates. The public functions taking id
//! maps are thin wrappers; the bootstrap evaluates the same code on resampled
//! pair indices.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_nco, CovariateKind, Dataset, NcoSpec, Role};
use crate::error::{Error, Result};
use crate::matcher::MatchedSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Unadjusted,
    DidNco,
    DidAdjusted,
    Qq,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Unadjusted,
        EstimatorKind::DidNco,
        EstimatorKind::DidAdjusted,
        EstimatorKind::Qq,
    ];

    /// Short tag used on the command line.
    pub fn cli_tag(self) -> &'static str {
        match self {
            EstimatorKind::Unadjusted => "unadj",
            EstimatorKind::DidNco => "did",
            EstimatorKind::DidAdjusted => "did-adj",
            EstimatorKind::Qq => "qq",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Unadjusted => "unadjusted",
            EstimatorKind::DidNco => "did_nco",
            EstimatorKind::DidAdjusted => "did_adjusted",
            EstimatorKind::Qq => "qq",
        }
    }

    pub fn needs_nco(self) -> bool {
        self != EstimatorKind::Unadjusted
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.cli_tag() == s || k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}` (use unadj, did, did-adj or qq)")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: String,
    pub converged: bool,
    pub degenerate: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Treated NCO counts below the control support, clamped to its minimum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped_low: Option<usize>,
    /// Treated NCO counts above the control support, clamped to its maximum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped_high: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fits: Vec<FitSummary>,
    /// Estimate computed on all units rather than the matched pairs.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unmatched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectPoint {
    pub estimator: EstimatorKind,
    pub atet: f64,
    pub n_pairs: usize,
    pub nco: Option<NcoSpec>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_RIDGE: f64 = 1e-6;
/// Coefficients beyond this magnitude signal (quasi-)separation.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// All responses equal: no finite MLE, predictions are the constant mean.
    pub degenerate: bool,
    pub separated: bool,
    pub response_mean: f64,
}

impl LogisticFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        if self.degenerate {
            return self.response_mean;
        }
        sigmoid(dot(&self.coefficients, row))
    }

    fn summary(&self, model: &str) -> FitSummary {
        FitSummary {
            model: model.to_string(),
            converged: self.converged,
            degenerate: self.degenerate,
            iterations: self.iterations,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of `beta` for rows of `design`.
pub fn log_likelihood(design: &[Vec<f64>], response: &[bool], beta: &[f64]) -> f64 {
    design
        .iter()
        .zip(response)
        .map(|(x, &y)| {
            let eta = dot(beta, x);
            if y {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        })
        .sum()
}

/// Gradient of [`log_likelihood`]: Xᵀ(y − p).
pub fn score(design: &[Vec<f64>], response: &[bool], beta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; beta.len()];
    for (x, &y) in design.iter().zip(response) {
        let r = f64::from(u8::from(y)) - sigmoid(dot(beta, x));
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += r * xj;
        }
    }
    g
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares. `design` rows must include the intercept column.
pub fn fit_logistic(design: &[Vec<f64>], response: &[bool]) -> Result<LogisticFit> {
    let n = design.len();
    if n == 0 || n != response.len() {
        return Err(Error::Estimation(format!(
            "design has {n} rows for {} responses",
            response.len()
        )));
    }
    let p = design[0].len();
    if p == 0 || design.iter().any(|r| r.len() != p) {
        return Err(Error::Estimation("design rows must share a nonzero width".into()));
    }
    let ones = response.iter().filter(|&&y| y).count();
    let mean = ones as f64 / n as f64;
    if ones == 0 || ones == n {
        // the MLE is at infinity; coefficients are left at zero
        return Ok(LogisticFit {
            coefficients: vec![0.0; p],
            converged: false,
            iterations: 0,
            log_likelihood: 0.0,
            degenerate: true,
            separated: false,
            response_mean: mean,
        });
    }

    let x = DMatrix::from_fn(n, p, |i, j| design[i][j]);
    let y = DVector::from_iterator(n, response.iter().map(|&b| f64::from(u8::from(b))));
    let mut beta = DVector::<f64>::zeros(p);
    let mut ll = log_likelihood(design, response, beta.as_slice());
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;

    while iterations < IRLS_MAX_ITER {
        let eta = &x * &beta;
        let prob = eta.map(sigmoid);
        let grad = x.tr_mul(&(&y - &prob));
        if grad.amax() <= IRLS_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;
        let w = prob.map(|q| q * (1.0 - q));
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let gram = x.tr_mul(&xw);
        let step = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let ridged = gram + DMatrix::identity(p, p) * IRLS_RIDGE;
                match ridged.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => break,
                }
            }
        };
        // step halving keeps the likelihood monotone
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut next_ll = log_likelihood(design, response, next.as_slice());
        while next_ll < ll - 1e-12 && t > 1e-6 {
            t *= 0.5;
            next = &beta + &step * t;
            next_ll = log_likelihood(design, response, next.as_slice());
        }
        beta = next;
        ll = next_ll;
        if beta.amax() > SEPARATION_BOUND {
            separated = true;
            break;
        }
    }
    Ok(LogisticFit {
        coefficients: beta.as_slice().to_vec(),
        converged: converged && !separated,
        iterations,
        log_likelihood: ll,
        degenerate: false,
        separated,
        response_mean: mean,
    })
}

/// Empirical distribution of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    /// Distinct support values, ascending.
    pub support: Vec<f64>,
    /// F at each support value.
    pub cumulative: Vec<f64>,
    /// Whether [`EmpiricalCdf::at`] returns mid-rank values.
    pub mid_rank: bool,
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(values: &[f64], mid_rank: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Estimation("empirical CDF of an empty sample".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Estimation("empirical CDF sample contains NaN".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut support = Vec::new();
        let mut cumulative = Vec::new();
        for (i, &v) in sorted.iter().enumerate() {
            if support.last() == Some(&v) {
                *cumulative.last_mut().unwrap() = (i + 1) as f64 / n;
            } else {
                support.push(v);
                cumulative.push((i + 1) as f64 / n);
            }
        }
        Ok(EmpiricalCdf {
            support,
            cumulative,
            mid_rank,
            sorted,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }

    /// P(X ≤ x).
    pub fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    /// (P(X < x) + P(X ≤ x)) / 2.
    pub fn mid(&self, x: f64) -> f64 {
        let below = self.sorted.partition_point(|&v| v < x);
        let upto = self.sorted.partition_point(|&v| v <= x);
        (below + upto) as f64 / (2 * self.sorted.len()) as f64
    }

    /// The CDF, or its mid-rank variant when the flag is set.
    pub fn at(&self, x: f64) -> f64 {
        if self.mid_rank {
            self.mid(x)
        } else {
            self.cdf(x)
        }
    }

    /// Generalized inverse: the smallest sample value with F ≥ u; −∞ for u ≤ 0.
    pub fn inverse(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let n = self.sorted.len();
        let k = ((u * n as f64) - 1e-12).ceil().clamp(1.0, n as f64) as usize;
        self.sorted[k - 1]
    }
}

/// qq(u) = F_Y(F_N⁻¹(u)) on the control arm, pinned to 0 and 1 at the ends.
pub fn qq_transform(u: f64, control_y: &EmpiricalCdf, control_n: &EmpiricalCdf) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        control_y.cdf(control_n.inverse(u))
    }
}

/// Per-pair values for the matched sample; index 0 is the treated member.
#[derive(Clone, Debug, Default)]
pub struct PairData {
    pub ids: Vec<(String, String)>,
    pub outcome: [Vec<f64>; 2],
    pub nco: Option<[Vec<f64>; 2]>,
    pub counts: Option<[Vec<f64>; 2]>,
    /// Adjustment covariate rows (without intercept).
    pub design: Option<[Vec<Vec<f64>>; 2]>,
    pub nco_spec: Option<NcoSpec>,
}

fn lookup<T: Copy>(map: &HashMap<String, T>, id: &str, what: &str) -> Result<T> {
    map.get(id)
        .copied()
        .ok_or_else(|| Error::Estimation(format!("no {what} for id `{id}`")))
}

fn bool_f64(b: bool) -> f64 {
    f64::from(u8::from(b))
}

impl PairData {
    pub fn from_maps(
        matched: &MatchedSample,
        outcomes: &HashMap<String, bool>,
        nco: Option<&HashMap<String, bool>>,
        counts: Option<&HashMap<String, i64>>,
    ) -> Result<Self> {
        let mut data = PairData {
            ids: matched
                .pairs
                .iter()
                .map(|p| (p.treated.clone(), p.control.clone()))
                .collect(),
            ..PairData::default()
        };
        for (side, vec) in data.outcome.iter_mut().enumerate() {
            *vec = data
                .ids
                .iter()
                .map(|ids| lookup(outcomes, side_id(ids, side), "outcome").map(bool_f64))
                .collect::<Result<_>>()?;
        }
        if let Some(map) = nco {
            let mut arms: [Vec<f64>; 2] = Default::default();
            for (side, vec) in arms.iter_mut().enumerate() {
                *vec = data
                    .ids
                    .iter()
                    .map(|ids| lookup(map, side_id(ids, side), "NCO value").map(bool_f64))
                    .collect::<Result<_>>()?;
            }
            data.nco = Some(arms);
        }
        if let Some(map) = counts {
            let mut arms: [Vec<f64>; 2] = Default::default();
            for (side, vec) in arms.iter_mut().enumerate() {
                *vec = data
                    .ids
                    .iter()
                    .map(|ids| lookup(map, side_id(ids, side), "NCO count").map(|c| c as f64))
                    .collect::<Result<_>>()?;
            }
            data.counts = Some(arms);
        }
        Ok(data)
    }

    /// Bind everything available in `dataset`: outcomes, the binary NCO if
    /// annotated, counts for the NCO window (or `count_window`), and the
    /// adjustment covariates.
    pub fn from_dataset(
        matched: &MatchedSample,
        dataset: &Dataset,
        nco: Option<&NcoSpec>,
        count_window: Option<u32>,
        adjustment: &[String],
    ) -> Result<Self> {
        let outcomes = outcome_map(dataset);
        let nco_values = nco_map(dataset);
        let window = count_window.or(nco.map(|s| s.window_years));
        let counts = window.map(|n| count_map(dataset, n));
        let mut data = PairData::from_maps(
            matched,
            &outcomes,
            (!nco_values.is_empty()).then_some(&nco_values),
            counts.as_ref().filter(|m| !m.is_empty()),
        )?;
        data.nco_spec = nco.cloned();
        if !adjustment.is_empty() {
            data.design = Some(design_rows(matched, dataset, adjustment)?);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Evaluate `kind` on the pairs listed in `idx` (repeats allowed).
    pub fn estimate(&self, kind: EstimatorKind, idx: &[usize]) -> Result<EffectPoint> {
        if idx.is_empty() {
            return Err(Error::Estimation("no matched pairs".into()));
        }
        let mut diagnostics = Diagnostics::default();
        let atet = match kind {
            EstimatorKind::Unadjusted => mean_diff(&self.outcome, idx),
            EstimatorKind::DidNco => {
                let n = self.need_nco()?;
                let (yt, yc) = (mean(&self.outcome[0], idx), mean(&self.outcome[1], idx));
                let (nt, nc) = (mean(&n[0], idx), mean(&n[1], idx));
                (yt - nt) - (yc - nc)
            }
            EstimatorKind::DidAdjusted => self.did_adjusted(idx, &mut diagnostics)?,
            EstimatorKind::Qq => self.qq(idx, &mut diagnostics)?,
        };
        if !atet.is_finite() {
            return Err(Error::Estimation(format!("{kind} estimate is not finite")));
        }
        Ok(EffectPoint {
            estimator: kind,
            atet,
            n_pairs: idx.len(),
            nco: if kind.needs_nco() { self.nco_spec.clone() } else { None },
            diagnostics,
        })
    }

    fn need_nco(&self) -> Result<&[Vec<f64>; 2]> {
        self.nco
            .as_ref()
            .ok_or_else(|| Error::Estimation("estimator needs a binary NCO".into()))
    }

    fn did_adjusted(&self, idx: &[usize], diagnostics: &mut Diagnostics) -> Result<f64> {
        let n = self.need_nco()?;
        let Some(design) = &self.design else {
            // intercept-only models reproduce the arm means
            let (yt, yc) = (mean(&self.outcome[0], idx), mean(&self.outcome[1], idx));
            let (nt, nc) = (mean(&n[0], idx), mean(&n[1], idx));
            return Ok((yt - nt) - (yc - nc));
        };
        let rows: [Vec<Vec<f64>>; 2] = [0, 1].map(|side| idx.iter().map(|&i| design[side][i].clone()).collect());
        let scaled = standardized_design(&rows);
        let params = scaled[0].first().map_or(1, Vec::len);
        for (side, arm) in ["treated", "control"].iter().enumerate() {
            if scaled[side].len() <= params {
                return Err(Error::Estimation(format!(
                    "{arm} arm has {} rows for {params} parameters",
                    scaled[side].len()
                )));
            }
        }
        let mut arm_effect = [0.0; 2];
        for side in 0..2 {
            let mut predicted = [0.0; 2];
            for (v, (values, label)) in [(&self.outcome, "Y"), (n, "N")].into_iter().enumerate() {
                let response: Vec<bool> = idx.iter().map(|&i| values[side][i] > 0.5).collect();
                let fit = fit_logistic(&scaled[side], &response)?;
                let model = format!("{label}|{}", if side == 0 { "treated" } else { "control" });
                diagnostics.fits.push(fit.summary(&model));
                if !fit.converged && !fit.degenerate {
                    return Err(Error::Estimation(format!(
                        "logistic fit for {model} did not converge (iterations {}, separated {}, coefficients {:?})",
                        fit.iterations, fit.separated, fit.coefficients
                    )));
                }
                predicted[v] = scaled[0].iter().map(|x| fit.predict(x)).sum::<f64>() / scaled[0].len() as f64;
            }
            arm_effect[side] = predicted[0] - predicted[1];
        }
        Ok(arm_effect[0] - arm_effect[1])
    }

    fn qq(&self, idx: &[usize], diagnostics: &mut Diagnostics) -> Result<f64> {
        let counts = self
            .counts
            .as_ref()
            .ok_or_else(|| Error::Estimation("QQ estimator needs raw NCO counts".into()))?;
        let control_n: Vec<f64> = idx.iter().map(|&i| counts[1][i]).collect();
        let cdf_n = EmpiricalCdf::new(&control_n, true)?;
        let p0 = idx.iter().filter(|&&i| self.outcome[1][i] < 0.5).count() as f64 / idx.len() as f64;
        let (lo, hi) = (cdf_n.min(), cdf_n.max());
        let (mut below, mut above) = (0, 0);
        let mut tilde = 0.0;
        for &i in idx {
            let mut x = counts[0][i];
            if x < lo {
                below += 1;
                x = lo;
            } else if x > hi {
                above += 1;
                x = hi;
            }
            if cdf_n.mid(x) > p0 {
                tilde += 1.0;
            }
        }
        diagnostics.clamped_low = Some(below);
        diagnostics.clamped_high = Some(above);
        Ok(mean(&self.outcome[0], idx) - tilde / idx.len() as f64)
    }

    /// Control-arm CDFs of Y and of the raw NCO count.
    pub fn control_cdfs(&self) -> Result<(EmpiricalCdf, EmpiricalCdf)> {
        let counts = self
            .counts
            .as_ref()
            .ok_or_else(|| Error::Estimation("QQ curve needs raw NCO counts".into()))?;
        Ok((EmpiricalCdf::new(&self.outcome[1], false)?, EmpiricalCdf::new(&counts[1], false)?))
    }
}

fn side_id(ids: &(String, String), side: usize) -> &str {
    if side == 0 {
        &ids.0
    } else {
        &ids.1
    }
}

fn mean(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

fn mean_diff(values: &[Vec<f64>; 2], idx: &[usize]) -> f64 {
    mean(&values[0], idx) - mean(&values[1], idx)
}

/// Prepend an intercept and z-score the covariate columns over both arms,
/// dropping columns that are constant.
fn standardized_design(rows: &[Vec<Vec<f64>>; 2]) -> [Vec<Vec<f64>>; 2] {
    let width = rows[0].first().or(rows[1].first()).map_or(0, Vec::len);
    let all: Vec<&Vec<f64>> = rows[0].iter().chain(&rows[1]).collect();
    let n = all.len() as f64;
    let mut keep = Vec::new();
    for j in 0..width {
        let m = all.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (all.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / n).sqrt();
        if sd > 1e-12 {
            keep.push((j, m, sd));
        }
    }
    rows.clone().map(|arm| {
        arm.into_iter()
            .map(|r| {
                std::iter::once(1.0)
                    .chain(keep.iter().map(|&(j, m, sd)| (r[j] - m) / sd))
                    .collect()
            })
            .collect()
    })
}

fn design_rows(matched: &MatchedSample, dataset: &Dataset, covariates: &[String]) -> Result<[Vec<Vec<f64>>; 2]> {
    let schema = dataset.schema();
    let mut idx = Vec::new();
    for name in covariates {
        let pos = schema
            .position(name)
            .ok_or_else(|| Error::Schema(format!("adjustment covariate `{name}` not in schema")))?;
        if schema.entries()[pos].kind == CovariateKind::Categorical {
            return Err(Error::Schema(format!("adjustment covariate `{name}` must be numeric or binary")));
        }
        idx.push(pos);
    }
    let row = |id: &str| -> Result<Vec<f64>> {
        let r = dataset
            .get(id)
            .ok_or_else(|| Error::Estimation(format!("matched id `{id}` not in dataset")))?;
        idx.iter()
            .map(|&k| {
                r.covariates[k]
                    .as_ref()
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| Error::Estimation(format!("record `{id}` lacks `{}`", schema.entries()[k].name)))
            })
            .collect()
    };
    let treated = matched.pairs.iter().map(|p| row(&p.treated)).collect::<Result<_>>()?;
    let control = matched.pairs.iter().map(|p| row(&p.control)).collect::<Result<_>>()?;
    Ok([treated, control])
}

/// Numeric and binary match-distance covariates, the default adjustment set.
pub fn default_adjustment(dataset: &Dataset) -> Vec<String> {
    dataset
        .schema()
        .entries()
        .iter()
        .filter(|e| e.kind != CovariateKind::Categorical && e.has_role(Role::MatchDistance))
        .map(|e| e.name.clone())
        .collect()
}

pub fn outcome_map(dataset: &Dataset) -> HashMap<String, bool> {
    dataset.records().iter().map(|r| (r.id.clone(), r.outcome)).collect()
}

/// Binary NCO of every annotated record.
pub fn nco_map(dataset: &Dataset) -> HashMap<String, bool> {
    dataset
        .records()
        .iter()
        .filter_map(|r| r.nco.map(|n| (r.id.clone(), n)))
        .collect()
}

/// CC^(n) of every record where it is defined.
pub fn count_map(dataset: &Dataset, window_years: u32) -> HashMap<String, i64> {
    dataset
        .records()
        .iter()
        .filter_map(|r| r.citations(window_years).map(|c| (r.id.clone(), c)))
        .collect()
}

pub fn atet_unadjusted(matched: &MatchedSample, outcomes: &HashMap<String, bool>) -> Result<EffectPoint> {
    let data = PairData::from_maps(matched, outcomes, None, None)?;
    data.estimate(EstimatorKind::Unadjusted, &data.all())
}

pub fn atet_did_nco(
    matched: &MatchedSample,
    outcomes: &HashMap<String, bool>,
    nco_values: &HashMap<String, bool>,
) -> Result<EffectPoint> {
    let data = PairData::from_maps(matched, outcomes, Some(nco_values), None)?;
    data.estimate(EstimatorKind::DidNco, &data.all())
}

/// Logistic-model DiD adjusting for `adjustment` covariates; `dataset`
/// records must carry the binary NCO described by `nco`.
pub fn atet_did_adjusted(
    matched: &MatchedSample,
    dataset: &Dataset,
    nco: &NcoSpec,
    adjustment: &[String],
) -> Result<EffectPoint> {
    let data = PairData::from_dataset(matched, dataset, Some(nco), None, adjustment)?;
    data.estimate(EstimatorKind::DidAdjusted, &data.all())
}

pub fn atet_qq(
    matched: &MatchedSample,
    outcomes: &HashMap<String, bool>,
    nco_continuous: &HashMap<String, i64>,
) -> Result<EffectPoint> {
    let data = PairData::from_maps(matched, outcomes, None, Some(nco_continuous))?;
    data.estimate(EstimatorKind::Qq, &data.all())
}

/// A matched sample restricted to one NCO window.
#[derive(Clone, Debug)]
pub struct NcoPanel {
    pub spec: NcoSpec,
    /// Matched records with a complete window, annotated with the binary NCO.
    pub dataset: Dataset,
    pub matched: MatchedSample,
}

/// The NCO threshold is computed on the matched records with a complete
/// `window_years` window; pairs losing either member are dropped.
pub fn nco_panel(
    dataset: &Dataset,
    matched: &MatchedSample,
    window_years: u32,
    quantile: f64,
    evaluation_year: i32,
) -> Result<NcoPanel> {
    let subset = dataset.subset(matched.ids());
    let (spec, annotated) = build_nco(&subset, window_years, quantile, evaluation_year)?;
    let keep: Vec<usize> = (0..matched.len())
        .filter(|&i| {
            let p = &matched.pairs[i];
            annotated.get(&p.treated).is_some() && annotated.get(&p.control).is_some()
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no matched pairs with a complete {window_years}-year window"
        )));
    }
    Ok(NcoPanel {
        spec,
        dataset: annotated,
        matched: matched.select(keep),
    })
}

/// ATET contrast over all treated and control units, ignoring the matching.
pub fn atet_unmatched(dataset: &Dataset) -> Result<EffectPoint> {
    let arm = |t: bool| -> Vec<f64> {
        dataset
            .records()
            .iter()
            .filter(|r| r.treatment == t)
            .map(|r| bool_f64(r.outcome))
            .collect()
    };
    let (yt, yc) = (arm(true), arm(false));
    if yt.is_empty() || yc.is_empty() {
        return Err(Error::Estimation("both arms need at least one unit".into()));
    }
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EffectPoint {
        estimator: EstimatorKind::Unadjusted,
        atet: m(&yt) - m(&yc),
        n_pairs: yt.len(),
        nco: None,
        diagnostics: Diagnostics {
            unmatched: true,
            ..Diagnostics::default()
        },
    })
}
