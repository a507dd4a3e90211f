//! Study data: covariate schema, submission records, fixed-window citation
//! counts and construction of the dichotomized negative control outcome.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Windows (in years) derived from inline citing dates at load time.
pub const DEFAULT_WINDOWS: [u32; 3] = [1, 2, 3];

/// Last year for which citations were collected in the reference study.
pub const DEFAULT_EVALUATION_YEAR: i32 = 2023;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    MatchDistance,
    NearExact,
    FineBalance,
    StratificationOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Numeric,
    Binary,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateEntry {
    pub name: String,
    pub kind: CovariateKind,
    /// Allowed levels of a categorical covariate. Empty means "any label".
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    #[serde(default)]
    pub roles: BTreeSet<Role>,
}

impl CovariateEntry {
    pub fn new(name: &str, kind: CovariateKind, roles: &[Role]) -> Self {
        CovariateEntry {
            name: name.to_string(),
            kind,
            levels: Vec::new(),
            roles: roles.iter().copied().collect(),
        }
    }

    pub fn with_levels<I, S>(mut self, levels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.levels = levels.into_iter().map(Into::into).collect();
        self
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

/// Ordered covariate definitions shared by every record of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct CovariateSchema {
    entries: Vec<CovariateEntry>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    covariates: Vec<CovariateEntry>,
}

impl TryFrom<SchemaRepr> for CovariateSchema {
    type Error = Error;

    fn try_from(repr: SchemaRepr) -> Result<Self> {
        CovariateSchema::new(repr.covariates)
    }
}

impl From<CovariateSchema> for SchemaRepr {
    fn from(schema: CovariateSchema) -> Self {
        SchemaRepr {
            covariates: schema.entries,
        }
    }
}

impl CovariateSchema {
    pub fn new(entries: Vec<CovariateEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut fine_balance = Vec::new();
        for (i, entry) in entries.iter().enumerate() {
            if entry.name.is_empty() || RESERVED_COLUMNS.contains(&entry.name.as_str()) {
                return Err(Error::Schema(format!("invalid covariate name `{}`", entry.name)));
            }
            if index.insert(entry.name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate covariate `{}`", entry.name)));
            }
            if entry.has_role(Role::FineBalance) {
                if entry.kind != CovariateKind::Categorical && entry.kind != CovariateKind::Binary {
                    return Err(Error::Schema(format!(
                        "fine-balance covariate `{}` must be categorical or binary",
                        entry.name
                    )));
                }
                fine_balance.push(entry.name.clone());
            }
            if entry.has_role(Role::MatchDistance) && entry.kind == CovariateKind::Categorical {
                return Err(Error::Schema(format!(
                    "categorical covariate `{}` cannot enter the L2 distance; use near-exact or fine-balance",
                    entry.name
                )));
            }
        }
        if fine_balance.len() > 1 {
            return Err(Error::Schema(format!(
                "at most one fine-balance covariate allowed, found {}",
                fine_balance.join(", ")
            )));
        }
        Ok(CovariateSchema { entries, index })
    }

    /// The 18 submission covariates of the ICLR early-arXiving study.
    pub fn iclr_default() -> Self {
        use CovariateKind::*;
        use Role::*;
        let d = [MatchDistance];
        let entries = vec![
            CovariateEntry::new("year", Categorical, &[NearExact])
                .with_levels(["2018", "2019", "2020", "2021", "2022"]),
            CovariateEntry::new("n_fig", Numeric, &d),
            CovariateEntry::new("n_ref", Numeric, &d),
            CovariateEntry::new("n_sec", Numeric, &d),
            CovariateEntry::new("log_text_length", Numeric, &d),
            CovariateEntry::new("text_ppl", Numeric, &d),
            CovariateEntry::new("topic_cluster", Categorical, &[FineBalance])
                .with_levels((0..20).map(|k| format!("{k:02}"))),
            CovariateEntry::new("n_author", Numeric, &[NearExact]),
            CovariateEntry::new("n_author_female", Numeric, &d),
            CovariateEntry::new("first_author_female", Binary, &d),
            CovariateEntry::new("any_author_female", Binary, &d),
            CovariateEntry::new("no_US_author", Binary, &d),
            CovariateEntry::new("log_inst_rank_min", Numeric, &d),
            CovariateEntry::new("log_inst_rank_avg", Numeric, &d),
            CovariateEntry::new("log_inst_rank_max", Numeric, &d),
            CovariateEntry::new("log_author_cite_min", Numeric, &d),
            CovariateEntry::new("log_author_cite_avg", Numeric, &d),
            CovariateEntry::new("log_author_cite_max", Numeric, &d),
        ];
        CovariateSchema::new(entries).expect("default schema is valid")
    }

    pub fn entries(&self) -> &[CovariateEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, name: &str) -> Option<&CovariateEntry> {
        self.position(name).map(|i| &self.entries[i])
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &CovariateEntry> {
        self.entries.iter().filter(move |e| e.has_role(role))
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const RESERVED_COLUMNS: [&str; 5] = ["id", "treatment", "outcome", "publication_date", "citing_dates"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Number(f64),
    Level(String),
}

impl CovariateValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CovariateValue::Number(x) => Some(*x),
            CovariateValue::Level(s) => s.trim().parse().ok(),
        }
    }

    /// Category label; numbers render through their shortest representation.
    pub fn label(&self) -> String {
        match self {
            CovariateValue::Number(x) => format!("{x}"),
            CovariateValue::Level(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub id: String,
    /// A: posted publicly before the review deadline.
    pub treatment: bool,
    /// Y: accepted.
    pub outcome: bool,
    /// Values aligned with the schema order; `None` marks a missing cell.
    pub covariates: Vec<Option<CovariateValue>>,
    pub publication_date: NaiveDate,
    #[serde(default)]
    pub citing_dates: Vec<NaiveDate>,
    /// CC^(n) keyed by window length in years.
    #[serde(default)]
    pub citation_counts: BTreeMap<u32, i64>,
    /// Dichotomized negative control outcome, set by [`build_nco`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nco: Option<bool>,
}

impl SubmissionRecord {
    /// CC^(n): the stored count, or one derived from the citing dates.
    pub fn citations(&self, window_years: u32) -> Option<i64> {
        if let Some(&c) = self.citation_counts.get(&window_years) {
            return Some(c);
        }
        if self.citation_counts.is_empty() {
            return Some(compute_citation_window(
                self.publication_date,
                &self.citing_dates,
                window_years,
            ) as i64);
        }
        None
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Dataset {
    schema: CovariateSchema,
    records: Vec<SubmissionRecord>,
    year_range: Option<(i32, i32)>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.records == other.records
    }
}

impl Dataset {
    pub fn new(schema: CovariateSchema, records: Vec<SubmissionRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.covariates.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "record `{}` has {} covariates, schema has {}",
                    r.id,
                    r.covariates.len(),
                    schema.len()
                )));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::data(None, Some("id"), format!("duplicate id `{}`", r.id)));
            }
        }
        let mut ds = Dataset {
            schema,
            records,
            year_range: None,
            index,
        };
        ds.year_range = ds
            .records
            .iter()
            .filter_map(|r| ds.year_of(r))
            .fold(None, |acc, y| match acc {
                None => Some((y, y)),
                Some((lo, hi)) => Some((lo.min(y), hi.max(y))),
            });
        Ok(ds)
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn records(&self) -> &[SubmissionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn year_range(&self) -> Option<(i32, i32)> {
        self.year_range
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&SubmissionRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    pub fn value<'a>(&self, record: &'a SubmissionRecord, name: &str) -> Option<&'a CovariateValue> {
        self.schema
            .position(name)
            .and_then(|i| record.covariates[i].as_ref())
    }

    /// Conference year: the `year` covariate when present, else the publication year.
    pub fn year_of(&self, record: &SubmissionRecord) -> Option<i32> {
        match self.schema.position("year") {
            Some(i) => record.covariates[i]
                .as_ref()
                .and_then(CovariateValue::as_f64)
                .map(|y| y.round() as i32),
            None => Some(record.publication_date.year()),
        }
    }

    pub fn filter<F>(&self, mut keep: F) -> Dataset
    where
        F: FnMut(&SubmissionRecord) -> bool,
    {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(self.schema.clone(), records).expect("subset of a valid dataset")
    }

    /// Records whose id is in `ids`, in dataset order.
    pub fn subset<'a, I>(&self, ids: I) -> Dataset
    where
        I: IntoIterator<Item = &'a str>,
    {
        let keep: BTreeSet<&str> = ids.into_iter().collect();
        self.filter(|r| keep.contains(r.id.as_str()))
    }

    pub fn treated_count(&self) -> usize {
        self.records.iter().filter(|r| r.treatment).count()
    }
}

/// Bookkeeping from [`load_dataset`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_loaded: usize,
    pub dropped_missing_publication_date: usize,
    pub dropped_ids: Vec<String>,
    /// Rows with no citation record at all; they count as zero citations.
    pub zero_citation_rows: usize,
}

enum Column {
    Id,
    Treatment,
    Outcome,
    PublicationDate,
    CitingDates,
    Count(u32),
    Covariate(usize),
}

/// Parse a study CSV against `schema`.
pub fn load_dataset<R: Read>(source: R, schema: &CovariateSchema) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| Error::data(Some(1), None, e.to_string()))?
        .clone();

    let mut columns = Vec::with_capacity(header.len());
    let mut seen = BTreeSet::new();
    for name in header.iter() {
        if !seen.insert(name.to_string()) {
            return Err(Error::data(Some(1), Some(name), "duplicate column"));
        }
        let col = match name {
            "id" => Column::Id,
            "treatment" => Column::Treatment,
            "outcome" => Column::Outcome,
            "publication_date" => Column::PublicationDate,
            "citing_dates" => Column::CitingDates,
            other => {
                if let Some(n) = other.strip_prefix("cc_").and_then(|s| s.parse::<u32>().ok()) {
                    if n == 0 {
                        return Err(Error::data(Some(1), Some(other), "window must be at least 1 year"));
                    }
                    Column::Count(n)
                } else if let Some(i) = schema.position(other) {
                    Column::Covariate(i)
                } else {
                    return Err(Error::data(Some(1), Some(other), "column not in schema"));
                }
            }
        };
        columns.push(col);
    }
    for required in ["id", "treatment", "outcome", "publication_date"] {
        if !seen.contains(required) {
            return Err(Error::data(Some(1), Some(required), "required column missing"));
        }
    }
    for entry in schema.entries() {
        if !seen.contains(&entry.name) {
            return Err(Error::data(Some(1), Some(&entry.name), "schema covariate missing from header"));
        }
    }
    let has_counts = columns.iter().any(|c| matches!(c, Column::Count(_)));
    if !has_counts && !seen.contains("citing_dates") {
        return Err(Error::data(
            Some(1),
            None,
            "need a `citing_dates` column or precomputed `cc_<n>` columns",
        ));
    }

    let mut report = LoadReport::default();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line());
            Error::data(line, None, e.to_string())
        })?;
        let line = row.position().map(|p| p.line());
        report.rows_read += 1;

        let mut id = None;
        let mut treatment = None;
        let mut outcome = None;
        let mut publication_date = None;
        let mut citing_dates = Vec::new();
        let mut citing_present = false;
        let mut counts = BTreeMap::new();
        let mut covariates = vec![None; schema.len()];

        for (col, (cell, name)) in columns.iter().zip(row.iter().zip(header.iter())) {
            match col {
                Column::Id => id = Some(cell.to_string()),
                Column::Treatment => treatment = Some(parse_flag(cell, line, name)?),
                Column::Outcome => outcome = Some(parse_flag(cell, line, name)?),
                Column::PublicationDate => {
                    if !cell.is_empty() {
                        publication_date = Some(parse_date(cell, line, name)?);
                    }
                }
                Column::CitingDates => {
                    if !cell.is_empty() {
                        citing_present = true;
                        for d in cell.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                            citing_dates.push(parse_date(d, line, name)?);
                        }
                    }
                }
                Column::Count(n) => {
                    if !cell.is_empty() {
                        let v: i64 = cell
                            .parse()
                            .map_err(|_| Error::data(line, Some(name), format!("`{cell}` is not an integer")))?;
                        counts.insert(*n, v);
                    }
                }
                Column::Covariate(i) => {
                    if !cell.is_empty() {
                        covariates[*i] = Some(parse_covariate(&schema.entries()[*i], cell, line, name)?);
                    }
                }
            }
        }

        let id = id.filter(|s| !s.is_empty()).ok_or_else(|| Error::data(line, Some("id"), "empty id"))?;
        let Some(publication_date) = publication_date else {
            report.dropped_missing_publication_date += 1;
            report.dropped_ids.push(id);
            continue;
        };
        if counts.is_empty() && !citing_present {
            report.zero_citation_rows += 1;
        }
        if counts.is_empty() {
            for n in DEFAULT_WINDOWS {
                counts.insert(n, compute_citation_window(publication_date, &citing_dates, n) as i64);
            }
        }
        records.push(SubmissionRecord {
            id,
            treatment: treatment.expect("required column"),
            outcome: outcome.expect("required column"),
            covariates,
            publication_date,
            citing_dates,
            citation_counts: counts,
            nco: None,
        });
    }
    report.rows_loaded = records.len();
    let dataset = Dataset::new(schema.clone(), records)?;
    Ok((dataset, report))
}

fn parse_flag(cell: &str, line: Option<u64>, column: &str) -> Result<bool> {
    match cell {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::data(line, Some(column), format!("expected 0 or 1, got `{other}`"))),
    }
}

fn parse_date(cell: &str, line: Option<u64>, column: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(cell, "%Y-%m-%d")
        .map_err(|_| Error::data(line, Some(column), format!("`{cell}` is not an ISO-8601 date")))
}

fn parse_covariate(entry: &CovariateEntry, cell: &str, line: Option<u64>, column: &str) -> Result<CovariateValue> {
    match entry.kind {
        CovariateKind::Categorical => Ok(CovariateValue::Level(cell.to_string())),
        CovariateKind::Numeric | CovariateKind::Binary => cell
            .parse::<f64>()
            .map(CovariateValue::Number)
            .map_err(|_| Error::data(line, Some(column), format!("`{cell}` is not a number"))),
    }
}

/// Write `dataset` in the format accepted by [`load_dataset`].
pub fn write_dataset_csv<W: Write>(dataset: &Dataset, sink: W) -> Result<()> {
    let windows: BTreeSet<u32> = dataset
        .records()
        .iter()
        .flat_map(|r| r.citation_counts.keys().copied())
        .collect();
    let with_dates = dataset.records().iter().any(|r| !r.citing_dates.is_empty());

    let mut writer = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = ["id", "treatment", "outcome", "publication_date"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if with_dates {
        header.push("citing_dates".into());
    }
    header.extend(windows.iter().map(|n| format!("cc_{n}")));
    header.extend(dataset.schema().entries().iter().map(|e| e.name.clone()));
    writer.write_record(&header).map_err(csv_io)?;

    for r in dataset.records() {
        let mut row = vec![
            r.id.clone(),
            flag(r.treatment),
            flag(r.outcome),
            r.publication_date.format("%Y-%m-%d").to_string(),
        ];
        if with_dates {
            let dates: Vec<String> = r.citing_dates.iter().map(|d| d.format("%Y-%m-%d").to_string()).collect();
            row.push(dates.join(";"));
        }
        for n in &windows {
            row.push(r.citation_counts.get(n).map(|c| c.to_string()).unwrap_or_default());
        }
        for v in &r.covariates {
            row.push(v.as_ref().map(CovariateValue::label).unwrap_or_default());
        }
        writer.write_record(&row).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// `date` moved forward by whole calendar years; Feb 29 lands on Feb 28.
pub fn shift_years(date: NaiveDate, years: u32) -> NaiveDate {
    let year = date.year() + years as i32;
    NaiveDate::from_ymd_opt(year, date.month(), date.day())
        .or_else(|| NaiveDate::from_ymd_opt(year, date.month(), 28))
        .expect("valid calendar date")
}

/// CC^(n): citing papers published in `[publication_date, publication_date + n years]`.
pub fn compute_citation_window(publication_date: NaiveDate, citing_dates: &[NaiveDate], window_years: u32) -> u64 {
    let end = shift_years(publication_date, window_years);
    citing_dates
        .iter()
        .filter(|&&d| d >= publication_date && d <= end)
        .count() as u64
}

/// Definition of the binary NCO N^(n)_q.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcoSpec {
    pub window_years: u32,
    pub quantile: f64,
    /// CC^(n)_q; a record has N = 1 iff its count is strictly above this.
    pub threshold: i64,
    pub evaluation_year: i32,
    pub eligible_year_cutoff: i32,
    /// Digest of the sorted ids the threshold was computed on.
    pub sample_id: String,
    pub sample_size: usize,
}

/// Nearest-rank empirical quantile: the smallest sample value whose
/// empirical CDF reaches `q`. `sorted` must be ascending and nonempty.
pub fn nearest_rank_quantile<T: Copy>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Digest identifying a set of record ids independent of their order.
pub fn sample_digest<'a, I: IntoIterator<Item = &'a str>>(ids: I) -> String {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(&hasher.finalize()[..8])
}

/// Restrict to years with a complete `window_years` citation window, compute
/// the q-quantile threshold over the retained records and annotate each with N.
pub fn build_nco(
    dataset: &Dataset,
    window_years: u32,
    quantile: f64,
    evaluation_year: i32,
) -> Result<(NcoSpec, Dataset)> {
    if window_years == 0 {
        return Err(Error::InvalidArgument("NCO window must be at least 1 year".into()));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile {quantile} outside (0, 1)")));
    }
    let cutoff = evaluation_year - window_years as i32;
    let retained = dataset.filter(|r| dataset.year_of(r).is_some_and(|y| y <= cutoff));
    if retained.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no records with year <= {cutoff} for a {window_years}-year window"
        )));
    }
    let mut counts = Vec::with_capacity(retained.len());
    for r in retained.records() {
        let c = r.citations(window_years).ok_or_else(|| {
            Error::data(None, Some(&format!("cc_{window_years}")), format!("record `{}` has no count", r.id))
        })?;
        counts.push(c);
    }
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let threshold = nearest_rank_quantile(&sorted, quantile);

    let spec = NcoSpec {
        window_years,
        quantile,
        threshold,
        evaluation_year,
        eligible_year_cutoff: cutoff,
        sample_id: sample_digest(retained.records().iter().map(|r| r.id.as_str())),
        sample_size: retained.len(),
    };
    let mut records = retained.records;
    for (r, c) in records.iter_mut().zip(counts) {
        r.nco = Some(c > threshold);
    }
    let annotated = Dataset::new(retained.schema, records)?;
    Ok((spec, annotated))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateCheck {
    pub name: String,
    pub kind: Option<CovariateKind>,
    pub missing: usize,
    pub kind_violations: usize,
    pub out_of_range: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub record_id: String,
    pub column: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub covariates: Vec<CovariateCheck>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every record against the schema and the citation-count invariants.
pub fn validate_schema(dataset: &Dataset) -> ValidationReport {
    let schema = dataset.schema();
    let mut checks: Vec<CovariateCheck> = schema
        .entries()
        .iter()
        .map(|e| CovariateCheck {
            name: e.name.clone(),
            kind: Some(e.kind),
            ..Default::default()
        })
        .collect();
    let mut citations = CovariateCheck {
        name: "citation_counts".into(),
        ..Default::default()
    };
    let mut violations = Vec::new();
    let mut flag = |id: &str, column: &str, message: String| {
        violations.push(Violation {
            record_id: id.to_string(),
            column: column.to_string(),
            message,
        })
    };

    for r in dataset.records() {
        for ((entry, check), value) in schema.entries().iter().zip(checks.iter_mut()).zip(&r.covariates) {
            let Some(value) = value else {
                check.missing += 1;
                flag(&r.id, &entry.name, "missing value".into());
                continue;
            };
            match entry.kind {
                CovariateKind::Numeric => match value.as_f64() {
                    Some(x) if x.is_finite() => {
                        if entry.has_role(Role::NearExact) && x.fract() != 0.0 {
                            check.out_of_range += 1;
                            flag(&r.id, &entry.name, format!("near-exact value {x} is not an integer"));
                        }
                    }
                    _ => {
                        check.kind_violations += 1;
                        flag(&r.id, &entry.name, format!("`{}` is not a finite number", value.label()));
                    }
                },
                CovariateKind::Binary => {
                    if !matches!(value.as_f64(), Some(x) if x == 0.0 || x == 1.0) {
                        check.kind_violations += 1;
                        flag(&r.id, &entry.name, format!("`{}` is not 0/1", value.label()));
                    }
                }
                CovariateKind::Categorical => {
                    let label = value.label();
                    if !entry.levels.is_empty() && !entry.levels.contains(&label) {
                        check.out_of_range += 1;
                        flag(&r.id, &entry.name, format!("level `{label}` not in schema"));
                    }
                }
            }
        }

        let mut previous: Option<(u32, i64)> = None;
        for (&n, &c) in &r.citation_counts {
            if c < 0 {
                citations.out_of_range += 1;
                flag(&r.id, &format!("cc_{n}"), format!("negative citation count {c}"));
            }
            if let Some((pn, pc)) = previous {
                if pn + 1 == n && pc > c {
                    citations.out_of_range += 1;
                    flag(&r.id, &format!("cc_{n}"), format!("cc_{pn} = {pc} exceeds cc_{n} = {c}"));
                }
            }
            if !r.citing_dates.is_empty() && c > r.citing_dates.len() as i64 {
                citations.out_of_range += 1;
                flag(&r.id, &format!("cc_{n}"), format!("count {c} exceeds {} citing dates", r.citing_dates.len()));
            }
            previous = Some((n, c));
        }
    }
    checks.push(citations);
    ValidationReport {
        records: dataset.len(),
        covariates: checks,
        violations,
    }
}
