//! Synthetic data with known ATET.
//!
//! Per unit: covariates C ~ N(0, I), latent confounder U ~ N(0, 1) (plus a
//! second latent W correlated with U in `qq` mode), treatment A from a
//! logistic model in (C, U), potential outcomes Y_a from a logistic model in
//! (C, U, a) and a negative control N that never reads A. All parameter
//! defaults are artifact choices, not fitted to any real data.

use std::f64::consts::PI;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::dataset::{CovariateEntry, CovariateKind, CovariateSchema, CovariateValue, Dataset, Role, SubmissionRecord};
use crate::error::{Error, Result};
use crate::estimators::sigmoid;

/// Treatment probabilities are clipped to this range.
pub const POSITIVITY_CLIP: (f64, f64) = (0.02, 0.98);
pub const POPULATION_DRAWS: usize = 1_000_000;
pub const SYNTHETIC_YEARS: [i32; 3] = [2018, 2019, 2020];
pub const CLUSTER_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquiConfoundingMode {
    /// N follows exactly the Y_0 model, so additive equi-confounding holds.
    Additive,
    /// N is a Poisson count driven by a second latent W exchangeable with U.
    Qq,
    /// N has its own confounding coefficients.
    Violated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_units: usize,
    pub covariate_dims: usize,
    pub intercept_a: f64,
    pub coef_c_to_a: Vec<f64>,
    pub coef_u_to_a: f64,
    pub intercept_y: f64,
    pub coef_c_to_y: Vec<f64>,
    pub coef_u_to_y: f64,
    /// Used in `violated` mode only; `additive` and `qq` reuse the Y model.
    pub intercept_n: f64,
    pub coef_c_to_n: Vec<f64>,
    pub coef_u_to_n: f64,
    /// δ, added to the Y logit of treated units.
    pub treatment_effect: f64,
    pub equi_confounding_mode: EquiConfoundingMode,
    /// Correlation of U and W in `qq` mode.
    pub copula_rho: f64,
    /// Poisson mean of the count NCO in `qq` mode.
    pub poisson_rate: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_units: 4000,
            covariate_dims: 3,
            intercept_a: -1.0,
            coef_c_to_a: vec![0.5, -0.4, 0.3],
            coef_u_to_a: 1.5,
            intercept_y: -1.0,
            coef_c_to_y: vec![0.4, 0.3, -0.3],
            coef_u_to_y: 1.5,
            intercept_n: -0.5,
            coef_c_to_n: vec![0.2, 0.5, 0.1],
            coef_u_to_n: 0.5,
            treatment_effect: 0.5,
            equi_confounding_mode: EquiConfoundingMode::Additive,
            copula_rho: 0.5,
            poisson_rate: 200.0,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::InvalidArgument("n_units must be positive".into()));
        }
        if self.covariate_dims == 0 {
            return Err(Error::InvalidArgument("covariate_dims must be positive".into()));
        }
        for (name, v) in [
            ("coef_c_to_a", &self.coef_c_to_a),
            ("coef_c_to_y", &self.coef_c_to_y),
            ("coef_c_to_n", &self.coef_c_to_n),
        ] {
            if v.len() != self.covariate_dims {
                return Err(Error::InvalidArgument(format!(
                    "{name} has {} entries for {} covariate dims",
                    v.len(),
                    self.covariate_dims
                )));
            }
        }
        if !(self.copula_rho > -1.0 && self.copula_rho < 1.0) {
            return Err(Error::InvalidArgument(format!("copula_rho {} outside (-1, 1)", self.copula_rho)));
        }
        if !(self.poisson_rate > 0.0 && self.poisson_rate.is_finite()) {
            return Err(Error::InvalidArgument("poisson_rate must be positive".into()));
        }
        Ok(())
    }

    /// Read a TOML file, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
        }
    }

    fn treatment_prob(&self, c: &[f64], latent: f64) -> f64 {
        let logit = self.intercept_a + dot(&self.coef_c_to_a, c) + self.coef_u_to_a * latent;
        sigmoid(logit).clamp(POSITIVITY_CLIP.0, POSITIVITY_CLIP.1)
    }

    /// Logit of Y_0.
    fn outcome_index(&self, c: &[f64], u: f64) -> f64 {
        self.intercept_y + dot(&self.coef_c_to_y, c) + self.coef_u_to_y * u
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUnit {
    pub record: SubmissionRecord,
    pub u: f64,
    /// Second latent, `qq` mode only.
    pub w: Option<f64>,
    pub propensity: f64,
    pub y0: bool,
    pub y1: bool,
}

struct Draw {
    c: Vec<f64>,
    u: f64,
    w: f64,
    v_a: f64,
    v_y: f64,
    v_n: f64,
}

fn draw_unit(rng: &mut ChaCha8Rng, dims: usize, rho: f64) -> Draw {
    let c = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Draw {
        c,
        u: z1,
        w: rho * z1 + (1.0 - rho * rho).sqrt() * z2,
        v_a: rng.random(),
        v_y: rng.random(),
        v_n: rng.random(),
    }
}

/// Latent entering the treatment model: U, or the normalized U + W in `qq` mode.
fn treatment_latent(config: &DgpConfig, d: &Draw) -> f64 {
    match config.equi_confounding_mode {
        EquiConfoundingMode::Qq => (d.u + d.w) / (2.0 + 2.0 * config.copula_rho).sqrt(),
        _ => d.u,
    }
}

fn logistic_quantile(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// Schema of generated datasets: numeric c0.. for the distance, a 4-level
/// `cluster` (bins of Φ(c0)) for fine balance and a `year` for near-exact matching.
pub fn synthetic_schema(dims: usize) -> CovariateSchema {
    let mut entries: Vec<CovariateEntry> = (0..dims)
        .map(|j| CovariateEntry::new(&format!("c{j}"), CovariateKind::Numeric, &[Role::MatchDistance]))
        .collect();
    entries.push(
        CovariateEntry::new("cluster", CovariateKind::Categorical, &[Role::FineBalance])
            .with_levels((0..CLUSTER_LEVELS).map(|k| format!("k{k}"))),
    );
    entries.push(
        CovariateEntry::new("year", CovariateKind::Categorical, &[Role::NearExact])
            .with_levels(SYNTHETIC_YEARS.iter().map(|y| y.to_string())),
    );
    CovariateSchema::new(entries).expect("static schema is valid")
}

/// Draw a dataset and the oracle units behind it.
pub fn generate(config: &DgpConfig) -> Result<(Dataset, Vec<SyntheticUnit>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::standard();
    let poisson = Poisson::new(config.poisson_rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let theta_norm2: f64 = config.coef_c_to_y.iter().map(|t| t * t).sum();
    let count_scale = (theta_norm2 + config.coef_u_to_y.powi(2) + PI * PI / 3.0).sqrt();
    let width = config.n_units.to_string().len();

    let mut units = Vec::with_capacity(config.n_units);
    for i in 0..config.n_units {
        let d = draw_unit(&mut rng, config.covariate_dims, config.copula_rho);
        let year = SYNTHETIC_YEARS[rng.random_range(0..SYNTHETIC_YEARS.len())];

        let propensity = config.treatment_prob(&d.c, treatment_latent(config, &d));
        let treated = d.v_a < propensity;
        let index = config.outcome_index(&d.c, d.u);
        let y0 = d.v_y < sigmoid(index);
        let y1 = d.v_y < sigmoid(index + config.treatment_effect);

        let count = match config.equi_confounding_mode {
            EquiConfoundingMode::Additive => i64::from(d.v_n < sigmoid(index)),
            EquiConfoundingMode::Violated => {
                let logit = config.intercept_n + dot(&config.coef_c_to_n, &d.c) + config.coef_u_to_n * d.u;
                i64::from(d.v_n < sigmoid(logit))
            }
            EquiConfoundingMode::Qq => {
                let latent = dot(&config.coef_c_to_y, &d.c) + config.coef_u_to_y * d.w + logistic_quantile(d.v_n);
                let p = std_normal.cdf(latent / count_scale).clamp(1e-12, 1.0 - 1e-12);
                poisson.inverse_cdf(p) as i64
            }
        };

        let cluster = ((std_normal.cdf(d.c[0]) * CLUSTER_LEVELS as f64) as usize).min(CLUSTER_LEVELS - 1);
        let mut covariates: Vec<Option<CovariateValue>> =
            d.c.iter().map(|&x| Some(CovariateValue::Number(x))).collect();
        covariates.push(Some(CovariateValue::Level(format!("k{cluster}"))));
        covariates.push(Some(CovariateValue::Level(year.to_string())));
        let record = SubmissionRecord {
            id: format!("u{i:0width$}"),
            treatment: treated,
            outcome: if treated { y1 } else { y0 },
            covariates,
            publication_date: NaiveDate::from_ymd_opt(year, 5, 1).expect("valid date"),
            citing_dates: Vec::new(),
            citation_counts: (1..=3).map(|n| (n, count)).collect(),
            nco: None,
        };
        units.push(SyntheticUnit {
            record,
            u: d.u,
            w: (config.equi_confounding_mode == EquiConfoundingMode::Qq).then_some(d.w),
            propensity,
            y0,
            y1,
        });
    }
    let dataset = Dataset::new(
        synthetic_schema(config.covariate_dims),
        units.iter().map(|u| u.record.clone()).collect(),
    )?;
    Ok((dataset, units))
}

/// Finite-sample ATET: mean of y1 − y0 over treated units.
pub fn true_atet(units: &[SyntheticUnit]) -> Result<f64> {
    let treated: Vec<&SyntheticUnit> = units.iter().filter(|u| u.record.treatment).collect();
    if treated.is_empty() {
        return Err(Error::InvalidArgument("no treated units".into()));
    }
    let sum: f64 = treated
        .iter()
        .map(|u| f64::from(u8::from(u.y1)) - f64::from(u8::from(u.y0)))
        .sum();
    Ok(sum / treated.len() as f64)
}

/// Monte-Carlo draws of the treatment probability and Y_0 logit, reusable
/// across treatment effects (common random numbers).
#[derive(Clone, Debug)]
pub struct PopulationSample {
    propensity: Vec<f64>,
    index: Vec<f64>,
}

impl PopulationSample {
    pub fn draw(config: &DgpConfig, draws: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut propensity = Vec::with_capacity(draws);
        let mut index = Vec::with_capacity(draws);
        for _ in 0..draws {
            let d = draw_unit(&mut rng, config.covariate_dims, config.copula_rho);
            propensity.push(config.treatment_prob(&d.c, treatment_latent(config, &d)));
            index.push(config.outcome_index(&d.c, d.u));
        }
        Ok(PopulationSample { propensity, index })
    }

    /// E[π(p1 − p0)] / E[π] for treatment effect `delta`.
    pub fn atet(&self, delta: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (&pi, &eta) in self.propensity.iter().zip(&self.index) {
            num += pi * (sigmoid(eta + delta) - sigmoid(eta));
            den += pi;
        }
        num / den
    }

    /// δ whose population ATET equals `target`, by bisection.
    pub fn calibrate(&self, target: f64) -> Result<f64> {
        if !(target > -1.0 && target < 1.0) {
            return Err(Error::InvalidArgument(format!("target ATET {target} outside (-1, 1)")));
        }
        let (mut lo, mut hi) = (-20.0, 20.0);
        if !(self.atet(lo) <= target && target <= self.atet(hi)) {
            return Err(Error::InvalidArgument(format!("target ATET {target} unreachable")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.atet(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Population ATET of the configuration by Monte Carlo over `draws` fresh units.
pub fn population_atet(config: &DgpConfig, draws: usize, seed: u64) -> Result<f64> {
    Ok(PopulationSample::draw(config, draws, seed)?.atet(config.treatment_effect))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{atet_did_nco, atet_unadjusted, nco_map, outcome_map};
    use crate::matcher::{MatchSpec, MatchedPair, MatchedSample};

    fn small(mode: EquiConfoundingMode, seed: u64) -> DgpConfig {
        DgpConfig {
            n_units: 2000,
            equi_confounding_mode: mode,
            seed,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small(EquiConfoundingMode::Qq, 3);
        let (a, ua) = generate(&cfg).unwrap();
        let (b, ub) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ua, ub);
        let (c, _) = generate(&DgpConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn consistency_and_positivity() {
        for mode in [EquiConfoundingMode::Additive, EquiConfoundingMode::Qq, EquiConfoundingMode::Violated] {
            let (_, units) = generate(&small(mode, 1)).unwrap();
            for u in &units {
                let observed = if u.record.treatment { u.y1 } else { u.y0 };
                assert_eq!(u.record.outcome, observed);
                assert!((POSITIVITY_CLIP.0..=POSITIVITY_CLIP.1).contains(&u.propensity));
            }
        }
    }

    #[test]
    fn nco_never_reads_treatment() {
        for mode in [EquiConfoundingMode::Additive, EquiConfoundingMode::Qq, EquiConfoundingMode::Violated] {
            let cfg = small(mode, 8);
            let flipped = DgpConfig {
                intercept_a: -cfg.intercept_a,
                coef_c_to_a: cfg.coef_c_to_a.iter().map(|c| -c).collect(),
                coef_u_to_a: -cfg.coef_u_to_a,
                ..cfg.clone()
            };
            let (a, _) = generate(&cfg).unwrap();
            let (b, _) = generate(&flipped).unwrap();
            assert!(a.records().iter().zip(b.records()).any(|(x, y)| x.treatment != y.treatment));
            for (x, y) in a.records().iter().zip(b.records()) {
                assert_eq!(x.citation_counts, y.citation_counts);
            }
        }
    }

    #[test]
    fn config_errors() {
        assert!(generate(&DgpConfig { n_units: 0, ..DgpConfig::default() }).is_err());
        assert!(generate(&DgpConfig { covariate_dims: 2, ..DgpConfig::default() }).is_err());
        let parsed: DgpConfig = toml::from_str("n_units = 10\nequi_confounding_mode = \"qq\"").unwrap();
        assert_eq!(parsed.n_units, 10);
        assert_eq!(parsed.equi_confounding_mode, EquiConfoundingMode::Qq);
        assert!(toml::from_str::<DgpConfig>("bogus = 1").is_err());
    }

    #[test]
    fn true_atet_edge_cases() {
        let (_, mut units) = generate(&small(EquiConfoundingMode::Additive, 2)).unwrap();
        for u in &mut units {
            u.y1 = u.y0;
        }
        assert_eq!(true_atet(&units).unwrap(), 0.0);
        for u in &mut units {
            u.y1 = true;
            u.y0 = false;
        }
        assert_eq!(true_atet(&units).unwrap(), 1.0);
        for u in &mut units {
            u.record.treatment = false;
        }
        assert!(true_atet(&units).is_err());
    }

    #[test]
    fn calibration_hits_target() {
        let cfg = DgpConfig::default();
        let pop = PopulationSample::draw(&cfg, 50_000, 1).unwrap();
        let delta = pop.calibrate(0.10).unwrap();
        assert!((pop.atet(delta) - 0.10).abs() < 1e-9);
        assert_eq!(pop.atet(0.0), 0.0);
    }

    /// Pair every treated unit with itself as a stand-in for the unmatched contrast.
    fn arms(ds: &Dataset) -> (MatchedSample, Dataset) {
        let treated: Vec<_> = ds.records().iter().filter(|r| r.treatment).collect();
        let controls: Vec<_> = ds.records().iter().filter(|r| !r.treatment).collect();
        let n = treated.len().min(controls.len());
        let pairs = (0..n)
            .map(|i| MatchedPair {
                treated: treated[i].id.clone(),
                control: controls[i].id.clone(),
            })
            .collect();
        let mut records = ds.records().to_vec();
        for r in &mut records {
            r.nco = Some(r.citation_counts[&1] > 0);
        }
        (
            MatchedSample {
                pairs,
                spec: MatchSpec::default(),
                total_cost: 0.0,
                fine_balance_deviation: 0,
            },
            Dataset::new(ds.schema().clone(), records).unwrap(),
        )
    }

    #[test]
    fn null_model_gives_null_contrast() {
        let cfg = DgpConfig {
            n_units: 20_000,
            treatment_effect: 0.0,
            coef_u_to_a: 0.0,
            coef_u_to_y: 0.0,
            coef_c_to_a: vec![0.0; 3],
            seed: 5,
            ..DgpConfig::default()
        };
        let (ds, _) = generate(&cfg).unwrap();
        let (m, ds) = arms(&ds);
        let est = atet_unadjusted(&m, &outcome_map(&ds)).unwrap().atet;
        let se = (0.25 / m.len() as f64 * 2.0).sqrt();
        assert!(est.abs() < 3.0 * se, "{est} vs se {se}");
    }

    #[test]
    fn confounding_biases_unadjusted_but_not_did() {
        let cfg = DgpConfig {
            n_units: 40_000,
            treatment_effect: 0.0,
            coef_c_to_a: vec![0.0; 3],
            seed: 6,
            ..DgpConfig::default()
        };
        let (ds, _) = generate(&cfg).unwrap();
        let (m, ds) = arms(&ds);
        let y = outcome_map(&ds);
        let unadj = atet_unadjusted(&m, &y).unwrap().atet;
        let did = atet_did_nco(&m, &y, &nco_map(&ds)).unwrap().atet;
        assert!(unadj > 0.1, "{unadj}");
        assert!(did.abs() < 0.03, "{did}");
    }

    fn equi_gap(mode: EquiConfoundingMode) -> f64 {
        let (_, units) = generate(&DgpConfig {
            n_units: 100_000,
            equi_confounding_mode: mode,
            seed: 9,
            ..DgpConfig::default()
        })
        .unwrap();
        let mut s = [(0.0, 0.0); 2];
        for u in &units {
            let arm = usize::from(u.record.treatment);
            s[arm].0 += f64::from(u8::from(u.y0)) - u.record.citation_counts[&1] as f64;
            s[arm].1 += 1.0;
        }
        s[1].0 / s[1].1 - s[0].0 / s[0].1
    }

    #[test]
    fn equi_confounding_switch() {
        assert!(equi_gap(EquiConfoundingMode::Additive).abs() < 0.015);
        assert!(equi_gap(EquiConfoundingMode::Violated).abs() > 0.05);
    }
}
