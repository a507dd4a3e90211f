//! Covariate standardization and balance diagnostics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{CovariateKind, Dataset, SubmissionRecord};
use crate::error::{Error, Result};
use crate::matcher::MatchedSample;

/// One column of the standardized design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizedColumn {
    pub covariate: String,
    /// Set for one-hot indicator columns of a categorical covariate.
    pub level: Option<String>,
    #[serde(with = "crate::float")]
    pub mean: f64,
    #[serde(with = "crate::float")]
    pub sd: f64,
    /// Constant columns are passed through unscaled.
    pub constant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    pub columns: Vec<StandardizedColumn>,
    /// Row-major, one row per dataset record; missing cells become NaN.
    pub values: Vec<Vec<f64>>,
}

impl Standardized {
    pub fn column_index(&self, covariate: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.covariate == covariate && c.level.is_none())
    }

    pub fn constant_columns(&self) -> impl Iterator<Item = &StandardizedColumn> {
        self.columns.iter().filter(|c| c.constant)
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = sum / n as f64;
    let var = values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Levels of a categorical covariate: the schema's list followed by any
/// extra labels observed in the data, in sorted order.
pub(crate) fn category_levels(dataset: &Dataset, idx: usize) -> Vec<String> {
    let entry = &dataset.schema().entries()[idx];
    let mut levels = entry.levels.clone();
    let known: BTreeSet<String> = levels.iter().cloned().collect();
    let extra: BTreeSet<String> = dataset
        .records()
        .iter()
        .filter_map(|r| r.covariates[idx].as_ref().map(|v| v.label()))
        .filter(|l| !known.contains(l))
        .collect();
    levels.extend(extra);
    levels
}

fn numeric(record: &SubmissionRecord, idx: usize) -> f64 {
    record.covariates[idx]
        .as_ref()
        .and_then(|v| v.as_f64())
        .unwrap_or(f64::NAN)
}

/// z-score numeric and binary covariates over the whole dataset (population
/// sd) and one-hot expand categorical ones.
pub fn standardize(dataset: &Dataset) -> Standardized {
    let mut columns = Vec::new();
    let mut per_column: Vec<Vec<f64>> = Vec::new();
    for (idx, entry) in dataset.schema().entries().iter().enumerate() {
        match entry.kind {
            CovariateKind::Numeric | CovariateKind::Binary => {
                let raw: Vec<f64> = dataset.records().iter().map(|r| numeric(r, idx)).collect();
                let (mean, sd) = mean_sd(raw.iter().copied().filter(|x| x.is_finite()));
                let constant = sd.is_nan() || sd <= 0.0;
                let scaled = if constant {
                    raw
                } else {
                    raw.into_iter().map(|x| (x - mean) / sd).collect()
                };
                columns.push(StandardizedColumn {
                    covariate: entry.name.clone(),
                    level: None,
                    mean,
                    sd,
                    constant,
                });
                per_column.push(scaled);
            }
            CovariateKind::Categorical => {
                for level in category_levels(dataset, idx) {
                    let indicator: Vec<f64> = dataset
                        .records()
                        .iter()
                        .map(|r| match &r.covariates[idx] {
                            Some(v) => f64::from(u8::from(v.label() == level)),
                            None => f64::NAN,
                        })
                        .collect();
                    let (mean, sd) = mean_sd(indicator.iter().copied().filter(|x| x.is_finite()));
                    columns.push(StandardizedColumn {
                        covariate: entry.name.clone(),
                        level: Some(level),
                        mean,
                        sd,
                        constant: sd.is_nan() || sd <= 0.0,
                    });
                    per_column.push(indicator);
                }
            }
        }
    }
    let values = (0..dataset.len())
        .map(|row| per_column.iter().map(|col| col[row]).collect())
        .collect();
    Standardized { columns, values }
}

/// Standardized mean difference `(mean_C - mean_T) / sqrt((var_T + var_C) / 2)`
/// with population variances. Returns 0 for two constant identical groups and a
/// signed infinity when the pooled sd is zero but the means differ.
pub fn smd(treated: &[f64], control: &[f64]) -> f64 {
    assert!(!treated.is_empty() && !control.is_empty(), "smd needs nonempty groups");
    let (mt, st) = mean_sd(treated.iter().copied());
    let (mc, sc) = mean_sd(control.iter().copied());
    let pooled = ((st * st + sc * sc) / 2.0).sqrt();
    let diff = mc - mt;
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Multivariate SMD between two category distributions (Mahalanobis distance
/// of the level proportions under the averaged multinomial covariance).
pub fn multinomial_smd(treated: &[usize], control: &[usize]) -> f64 {
    let nt: usize = treated.iter().sum();
    let nc: usize = control.iter().sum();
    if nt == 0 || nc == 0 {
        return f64::NAN;
    }
    let (pt, pc): (Vec<f64>, Vec<f64>) = treated
        .iter()
        .zip(control)
        .filter(|(&t, &c)| t + c > 0)
        .map(|(&t, &c)| (t as f64 / nt as f64, c as f64 / nc as f64))
        .unzip();
    let k = pt.len();
    if k <= 1 {
        return 0.0;
    }
    // drop the last level: proportions sum to one
    let m = k - 1;
    let diff = DVector::from_iterator(m, (0..m).map(|i| pc[i] - pt[i]));
    if diff.iter().all(|d| *d == 0.0) {
        return 0.0;
    }
    let cov = DMatrix::from_fn(m, m, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        (delta * pt[i] - pt[i] * pt[j] + delta * pc[i] - pc[i] * pc[j]) / 2.0
    });
    let inv = match cov.clone().try_inverse() {
        Some(inv) => inv,
        None => match cov.pseudo_inverse(1e-12) {
            Ok(inv) => inv,
            Err(_) => return f64::INFINITY,
        },
    };
    let q = (diff.transpose() * inv * &diff)[(0, 0)];
    if q <= 0.0 {
        f64::INFINITY
    } else {
        q.sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub count: Option<usize>,
    pub percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    /// `None` for the covariate summary row, else the level of an indicator row.
    pub level: Option<String>,
    pub treated: GroupStats,
    pub control: GroupStats,
    pub matched: GroupStats,
    #[serde(with = "crate::float")]
    pub smd_before: f64,
    #[serde(with = "crate::float")]
    pub smd_after: f64,
}

impl BalanceRow {
    pub fn is_summary(&self) -> bool {
        self.level.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSizes {
    pub n_treated: usize,
    pub n_control: usize,
    pub n_matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
    pub group_sizes: GroupSizes,
}

impl BalanceTable {
    pub fn summary(&self, covariate: &str) -> Option<&BalanceRow> {
        self.rows.iter().find(|r| r.is_summary() && r.covariate == covariate)
    }

    pub fn summaries(&self) -> impl Iterator<Item = &BalanceRow> {
        self.rows.iter().filter(|r| r.is_summary())
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "covariate",
            "level",
            "treated_mean",
            "treated_sd",
            "treated_count",
            "control_mean",
            "control_sd",
            "control_count",
            "matched_mean",
            "matched_sd",
            "matched_count",
            "smd_before",
            "smd_after",
        ])
        .map_err(crate::dataset::csv_io)?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let cnt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.covariate.clone(),
                r.level.clone().unwrap_or_default(),
                opt(r.treated.mean),
                opt(r.treated.sd),
                cnt(r.treated.count),
                opt(r.control.mean),
                opt(r.control.sd),
                cnt(r.control.count),
                opt(r.matched.mean),
                opt(r.matched.sd),
                cnt(r.matched.count),
                format!("{:.6}", r.smd_before),
                format!("{:.6}", r.smd_after),
            ])
            .map_err(crate::dataset::csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width text rendering in the usual "table one" layout.
    pub fn render_text(&self) -> String {
        let g = self.group_sizes;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>18} {:>18} {:>18} {:>9} {:>9}",
            "covariate",
            format!("treated (n={})", g.n_treated),
            format!("control (n={})", g.n_control),
            format!("matched (n={})", g.n_matched),
            "SMD pre",
            "SMD post"
        );
        let cell = |s: &GroupStats| match (s.mean, s.sd, s.count, s.percent) {
            (_, _, Some(c), Some(p)) => format!("{c} ({p:.1})"),
            (Some(m), Some(sd), _, _) => format!("{m:.1} ({sd:.1})"),
            _ => String::new(),
        };
        for r in &self.rows {
            let (name, pre, post) = match &r.level {
                None => (
                    r.covariate.clone(),
                    format!("{:.3}", r.smd_before),
                    format!("{:.3}", r.smd_after),
                ),
                Some(level) => (format!("  {level}"), String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{:<28} {:>18} {:>18} {:>18} {:>9} {:>9}",
                name,
                cell(&r.treated),
                cell(&r.control),
                cell(&r.matched),
                pre,
                post
            );
        }
        out
    }
}

fn numeric_stats(values: &[f64]) -> GroupStats {
    let (mean, sd) = mean_sd(values.iter().copied());
    GroupStats {
        mean: Some(mean),
        sd: Some(sd),
        count: None,
        percent: None,
    }
}

fn level_stats(count: usize, total: usize) -> GroupStats {
    let p = count as f64 / total as f64;
    GroupStats {
        mean: Some(p),
        sd: Some((p * (1.0 - p)).sqrt()),
        count: Some(count),
        percent: Some(100.0 * p),
    }
}

fn indicator_smd(ct: usize, nt: usize, cc: usize, nc: usize) -> f64 {
    let pt = ct as f64 / nt as f64;
    let pc = cc as f64 / nc as f64;
    let pooled = ((pt * (1.0 - pt) + pc * (1.0 - pc)) / 2.0).sqrt();
    let diff = pc - pt;
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Before/after matching covariate summary. "Before" compares every treated
/// record of `dataset` with every control; "after" compares the treated and
/// control members of the matched pairs.
pub fn table_one(dataset: &Dataset, matched: &MatchedSample) -> Result<BalanceTable> {
    let lookup = |id: &str| {
        dataset
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("matched id `{id}` not in dataset")))
    };
    let mut pair_treated = Vec::with_capacity(matched.pairs.len());
    let mut pair_control = Vec::with_capacity(matched.pairs.len());
    for p in &matched.pairs {
        pair_treated.push(lookup(&p.treated)?);
        pair_control.push(lookup(&p.control)?);
    }
    let treated: Vec<&SubmissionRecord> = dataset.records().iter().filter(|r| r.treatment).collect();
    let control: Vec<&SubmissionRecord> = dataset.records().iter().filter(|r| !r.treatment).collect();
    if treated.is_empty() || control.is_empty() || pair_treated.is_empty() {
        return Err(Error::InvalidArgument("balance table needs treated, control and matched units".into()));
    }

    let mut rows = Vec::new();
    for (idx, entry) in dataset.schema().entries().iter().enumerate() {
        let values = |group: &[&SubmissionRecord]| -> Vec<f64> {
            group.iter().map(|r| numeric(r, idx)).filter(|x| x.is_finite()).collect()
        };
        match entry.kind {
            CovariateKind::Numeric | CovariateKind::Binary => {
                let (t, c, m, mt) = (
                    values(&treated),
                    values(&control),
                    values(&pair_control),
                    values(&pair_treated),
                );
                if t.is_empty() || c.is_empty() || m.is_empty() || mt.is_empty() {
                    continue;
                }
                rows.push(BalanceRow {
                    covariate: entry.name.clone(),
                    level: None,
                    treated: numeric_stats(&t),
                    control: numeric_stats(&c),
                    matched: numeric_stats(&m),
                    smd_before: smd(&t, &c),
                    smd_after: smd(&mt, &m),
                });
                if entry.kind == CovariateKind::Binary {
                    for (label, target) in [("1", 1.0), ("0", 0.0)] {
                        let count = |v: &[f64]| v.iter().filter(|&&x| x == target).count();
                        rows.push(BalanceRow {
                            covariate: entry.name.clone(),
                            level: Some(label.to_string()),
                            treated: level_stats(count(&t), t.len()),
                            control: level_stats(count(&c), c.len()),
                            matched: level_stats(count(&m), m.len()),
                            smd_before: indicator_smd(count(&t), t.len(), count(&c), c.len()),
                            smd_after: indicator_smd(count(&mt), mt.len(), count(&m), m.len()),
                        });
                    }
                }
            }
            CovariateKind::Categorical => {
                let levels = category_levels(dataset, idx);
                let counts = |group: &[&SubmissionRecord]| -> Vec<usize> {
                    let mut out = vec![0usize; levels.len()];
                    for r in group {
                        if let Some(v) = &r.covariates[idx] {
                            let label = v.label();
                            if let Some(k) = levels.iter().position(|l| *l == label) {
                                out[k] += 1;
                            }
                        }
                    }
                    out
                };
                let (t, c, m, mt) = (
                    counts(&treated),
                    counts(&control),
                    counts(&pair_control),
                    counts(&pair_treated),
                );
                let (nt, nc, nm, nmt) = (
                    t.iter().sum::<usize>(),
                    c.iter().sum::<usize>(),
                    m.iter().sum::<usize>(),
                    mt.iter().sum::<usize>(),
                );
                if nt == 0 || nc == 0 || nm == 0 || nmt == 0 {
                    continue;
                }
                rows.push(BalanceRow {
                    covariate: entry.name.clone(),
                    level: None,
                    treated: GroupStats::default(),
                    control: GroupStats::default(),
                    matched: GroupStats::default(),
                    smd_before: multinomial_smd(&t, &c),
                    smd_after: multinomial_smd(&mt, &m),
                });
                for (k, level) in levels.iter().enumerate() {
                    rows.push(BalanceRow {
                        covariate: entry.name.clone(),
                        level: Some(level.clone()),
                        treated: level_stats(t[k], nt),
                        control: level_stats(c[k], nc),
                        matched: level_stats(m[k], nm),
                        smd_before: indicator_smd(t[k], nt, c[k], nc),
                        smd_after: indicator_smd(mt[k], nmt, m[k], nm),
                    });
                }
            }
        }
    }
    Ok(BalanceTable {
        rows,
        group_sizes: GroupSizes {
            n_treated: treated.len(),
            n_control: control.len(),
            n_matched: pair_control.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CovariateEntry, CovariateSchema, CovariateValue, Role};
    use crate::matcher::{MatchSpec, MatchedPair};
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    #[test]
    fn standardize_closed_form() {
        let ds = toy(&[1.0, 2.0, 3.0], &[true, false, true], &["a", "b", "c"]);
        let z = standardize(&ds);
        let col = z.column_index("x").unwrap();
        let got: Vec<f64> = z.values.iter().map(|r| r[col]).collect();
        for (g, e) in got.iter().zip([-1.224744871391589, 0.0, 1.224744871391589]) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-9);
        }
        // one-hot of the 3-level categorical
        let onehot: Vec<usize> = (0..z.columns.len()).filter(|&i| z.columns[i].level.is_some()).collect();
        assert_eq!(onehot.len(), 3);
        for row in &z.values {
            assert_eq!(onehot.iter().map(|&i| row[i]).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn constant_column_passes_through() {
        let ds = toy(&[5.0, 5.0, 5.0], &[true, false, true], &["a", "a", "a"]);
        let z = standardize(&ds);
        let col = z.column_index("x").unwrap();
        assert!(z.columns[col].constant);
        assert!(z.values.iter().all(|r| r[col] == 5.0));
        assert!(z.constant_columns().any(|c| c.covariate == "x"));
    }

    #[test]
    fn smd_examples() {
        assert_eq!(smd(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        // hand computation: mean_T = 0.5, mean_C = 1, var_T = 0.25, var_C = 0,
        // pooled = sqrt(0.125) = 0.35355..., smd = 0.5 / 0.35355... = sqrt(2)
        assert_abs_diff_eq!(smd(&[0.0, 0.0, 1.0, 1.0], &[1.0; 4]), std::f64::consts::SQRT_2, epsilon = 1e-12);
        assert_eq!(smd(&[2.0, 2.0], &[2.0]), 0.0);
        assert_eq!(smd(&[2.0, 2.0], &[3.0]), f64::INFINITY);
    }

    #[test]
    fn multinomial_smd_properties() {
        assert_eq!(multinomial_smd(&[5, 5, 5], &[10, 10, 10]), 0.0);
        let a = multinomial_smd(&[10, 20, 30], &[30, 20, 10]);
        let b = multinomial_smd(&[30, 20, 10], &[10, 20, 30]);
        assert!(a > 0.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        // two levels reduce to |indicator smd|
        let two = multinomial_smd(&[30, 70], &[50, 50]);
        assert_abs_diff_eq!(two, indicator_smd(30, 100, 50, 100).abs(), epsilon = 1e-12);
    }

    fn toy(x: &[f64], treat: &[bool], cat: &[&str]) -> Dataset {
        let schema = CovariateSchema::new(vec![
            CovariateEntry::new("x", CovariateKind::Numeric, &[Role::MatchDistance]),
            CovariateEntry::new("b", CovariateKind::Binary, &[Role::MatchDistance]),
            CovariateEntry::new("k", CovariateKind::Categorical, &[Role::FineBalance]).with_levels(["a", "b", "c"]),
        ])
        .unwrap();
        let records = x
            .iter()
            .zip(treat)
            .zip(cat)
            .enumerate()
            .map(|(i, ((&x, &t), &c))| SubmissionRecord {
                id: format!("u{i}"),
                treatment: t,
                outcome: false,
                covariates: vec![
                    Some(CovariateValue::Number(x)),
                    Some(CovariateValue::Number((i % 2) as f64)),
                    Some(CovariateValue::Level(c.into())),
                ],
                publication_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                citing_dates: vec![],
                citation_counts: Default::default(),
                nco: None,
            })
            .collect();
        Dataset::new(schema, records).unwrap()
    }

    fn sample(pairs: &[(&str, &str)]) -> MatchedSample {
        MatchedSample {
            pairs: pairs
                .iter()
                .map(|(t, c)| MatchedPair {
                    treated: t.to_string(),
                    control: c.to_string(),
                })
                .collect(),
            spec: MatchSpec::default(),
            total_cost: 0.0,
            fine_balance_deviation: 0,
        }
    }

    #[test]
    fn self_pairing_has_zero_smd_after() {
        let ds = toy(
            &[1.0, 4.0, 2.5, 0.0, 7.0, 3.0],
            &[true, false, true, false, true, false],
            &["a", "b", "c", "a", "a", "b"],
        );
        let matched = sample(&[("u0", "u0"), ("u2", "u2"), ("u4", "u4")]);
        let table = table_one(&ds, &matched).unwrap();
        assert!(table.rows.iter().all(|r| r.smd_after == 0.0), "{table:#?}");
        assert!(table.summary("x").unwrap().smd_before != 0.0);
        assert_eq!(table.group_sizes.n_matched, 3);
    }

    #[test]
    fn dangling_pair_id_is_an_error() {
        let ds = toy(&[1.0, 2.0], &[true, false], &["a", "b"]);
        assert!(table_one(&ds, &sample(&[("u0", "nope")])).is_err());
    }

    #[test]
    fn table_matches_direct_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let t: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let cats = ["a", "b", "c"];
        let c: Vec<&str> = (0..n).map(|_| cats[rng.random_range(0..3)]).collect();
        let ds = toy(&x, &t, &c);
        let treated_ids: Vec<String> = (0..n).filter(|&i| t[i]).map(|i| format!("u{i}")).collect();
        let control_ids: Vec<String> = (0..n).filter(|&i| !t[i]).map(|i| format!("u{i}")).collect();
        let k = treated_ids.len().min(control_ids.len());
        let pairs: Vec<(&str, &str)> = (0..k).map(|i| (treated_ids[i].as_str(), control_ids[i].as_str())).collect();
        let table = table_one(&ds, &sample(&pairs)).unwrap();

        // raw recomputation, population variance
        let pick = |ids: &[&str]| -> Vec<f64> {
            ids.iter().map(|id| x[id[1..].parse::<usize>().unwrap()]).collect()
        };
        let all_t: Vec<&str> = treated_ids.iter().map(String::as_str).collect();
        let all_c: Vec<&str> = control_ids.iter().map(String::as_str).collect();
        let (xt, xc) = (pick(&all_t), pick(&all_c));
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let mu = m(v);
            v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / v.len() as f64
        };
        let expected = (m(&xc) - m(&xt)) / ((var(&xt) + var(&xc)) / 2.0).sqrt();
        assert_abs_diff_eq!(table.summary("x").unwrap().smd_before, expected, epsilon = 1e-12);
        assert!(table.summaries().all(|r| r.smd_before.abs() < 0.35));

        let mt = pick(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let mc = pick(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let expected_after = (m(&mc) - m(&mt)) / ((var(&mt) + var(&mc)) / 2.0).sqrt();
        assert_abs_diff_eq!(table.summary("x").unwrap().smd_after, expected_after, epsilon = 1e-12);
    }

    #[test]
    fn table_serializes() {
        let ds = toy(&[1.0, 4.0, 2.5, 0.0], &[true, false, true, false], &["a", "b", "c", "a"]);
        let table = table_one(&ds, &sample(&[("u0", "u1"), ("u2", "u3")])).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("covariate,level"));
        assert!(table.render_text().contains("SMD post"));
        let json = serde_json::to_string(&table).unwrap();
        let back: BalanceTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows.len(), table.rows.len());
    }

    proptest! {
        #[test]
        fn smd_antisymmetric(
            t in prop::collection::vec(-50.0f64..50.0, 2..30),
            c in prop::collection::vec(-50.0f64..50.0, 2..30),
        ) {
            let ab = smd(&t, &c);
            let ba = smd(&c, &t);
            prop_assume!(ab.is_finite());
            prop_assert!((ab + ba).abs() < 1e-9);
        }

        #[test]
        fn smd_scale_invariant(
            t in prop::collection::vec(-50.0f64..50.0, 2..30),
            c in prop::collection::vec(-50.0f64..50.0, 2..30),
            a in prop_oneof![-20.0f64..-0.1, 0.1f64..20.0],
            b in -100.0f64..100.0,
        ) {
            let base = smd(&t, &c);
            prop_assume!(base.is_finite());
            let ta: Vec<f64> = t.iter().map(|x| a * x + b).collect();
            let ca: Vec<f64> = c.iter().map(|x| a * x + b).collect();
            prop_assert!((smd(&ta, &ca) - a.signum() * base).abs() < 1e-6 * (1.0 + base.abs()));
        }
    }
}
