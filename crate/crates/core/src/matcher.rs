//! Optimal 1:1 treated/control matching.
//!
//! The matching is a min-cost flow on the network
//!
//! ```text
//! source -> treated -> control -> category -> sink
//! ```
//!
//! where each category node has a zero-cost arc to the sink with capacity
//! equal to its fine-balance target and an uncapacitated overflow arc whose
//! unit cost exceeds any achievable total distance. Minimizing the flow cost
//! therefore minimizes the fine-balance deviation first and the total
//! distance second. Distances are scaled to integers (see [`COST_SCALE`]) so
//! the flow arithmetic is exact.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::balance::{self, BalanceTable};
use crate::dataset::{CovariateKind, CovariateSchema, Dataset, Role};
use crate::error::{Error, Result};

/// Distances are rounded to multiples of 1e-6 before solving.
pub const COST_SCALE: f64 = 1e6;

/// Auto penalty per near-exact mismatch, relative to the largest numeric distance.
pub const AUTO_PENALTY_FACTOR: f64 = 1000.0;

const FORBIDDEN: i64 = i64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearExact {
    pub name: String,
    /// Penalty per unit of mismatch; `None` resolves to the automatic default.
    pub penalty: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub distance_covariates: Vec<String>,
    pub near_exact: Vec<NearExact>,
    pub fine_balance: Option<String>,
    pub caliper: Option<f64>,
}

impl MatchSpec {
    /// Spec implied by the schema role flags.
    pub fn from_schema(schema: &CovariateSchema) -> Self {
        MatchSpec {
            distance_covariates: schema.with_role(Role::MatchDistance).map(|e| e.name.clone()).collect(),
            near_exact: schema
                .with_role(Role::NearExact)
                .map(|e| NearExact {
                    name: e.name.clone(),
                    penalty: None,
                })
                .collect(),
            fine_balance: schema.with_role(Role::FineBalance).map(|e| e.name.clone()).next(),
            caliper: None,
        }
    }

    pub fn validate(&self, schema: &CovariateSchema) -> Result<()> {
        for name in &self.distance_covariates {
            let entry = schema
                .entry(name)
                .ok_or_else(|| Error::Schema(format!("distance covariate `{name}` not in schema")))?;
            if entry.kind == CovariateKind::Categorical {
                return Err(Error::Schema(format!("distance covariate `{name}` must be numeric or binary")));
            }
            if entry.has_role(Role::StratificationOnly) {
                return Err(Error::Schema(format!("`{name}` is stratification-only")));
            }
        }
        for ne in &self.near_exact {
            if schema.entry(&ne.name).is_none() {
                return Err(Error::Schema(format!("near-exact covariate `{}` not in schema", ne.name)));
            }
            if let Some(p) = ne.penalty {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "near-exact penalty for `{}` must be positive, got {p}",
                        ne.name
                    )));
                }
            }
        }
        if let Some(fb) = &self.fine_balance {
            let entry = schema
                .entry(fb)
                .ok_or_else(|| Error::Schema(format!("fine-balance covariate `{fb}` not in schema")))?;
            if entry.kind == CovariateKind::Numeric {
                return Err(Error::Schema(format!("fine-balance covariate `{fb}` must be categorical")));
            }
        }
        if let Some(c) = self.caliper {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidArgument(format!("caliper must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Drop a covariate from every role of the spec.
    pub fn without(&self, name: &str) -> MatchSpec {
        MatchSpec {
            distance_covariates: self.distance_covariates.iter().filter(|n| *n != name).cloned().collect(),
            near_exact: self.near_exact.iter().filter(|n| n.name != name).cloned().collect(),
            fine_balance: self.fine_balance.clone().filter(|n| n != name),
            caliper: self.caliper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated: String,
    pub control: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedSample {
    pub pairs: Vec<MatchedPair>,
    pub spec: MatchSpec,
    #[serde(with = "crate::float")]
    pub total_cost: f64,
    /// Sum over fine-balance categories of |matched controls - target|.
    pub fine_balance_deviation: u64,
}

impl MatchedSample {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .flat_map(|p| [p.treated.as_str(), p.control.as_str()])
    }

    /// Keep the pairs selected by `keep` (indexes into `pairs`).
    pub fn select(&self, keep: impl IntoIterator<Item = usize>) -> MatchedSample {
        MatchedSample {
            pairs: keep.into_iter().map(|i| self.pairs[i].clone()).collect(),
            spec: self.spec.clone(),
            total_cost: f64::NAN,
            fine_balance_deviation: 0,
        }
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["treated_id", "control_id"]).map_err(crate::dataset::csv_io)?;
        for p in &self.pairs {
            w.write_record([&p.treated, &p.control]).map_err(crate::dataset::csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a two-column pair list; spec and cost are not recoverable from CSV.
    pub fn read_csv<R: Read>(source: R) -> Result<MatchedSample> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut pairs = Vec::new();
        for row in r.records() {
            let row = row.map_err(|e| Error::data(e.position().map(|p| p.line()), None, e.to_string()))?;
            let line = row.position().map(|p| p.line());
            if row.len() != 2 {
                return Err(Error::data(line, None, "expected treated_id,control_id"));
            }
            pairs.push(MatchedPair {
                treated: row[0].to_string(),
                control: row[1].to_string(),
            });
        }
        Ok(MatchedSample {
            pairs,
            spec: MatchSpec::default(),
            total_cost: f64::NAN,
            fine_balance_deviation: 0,
        })
    }
}

/// Treated-by-control distances plus the fine-balance category of every unit.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub treated: Vec<String>,
    pub controls: Vec<String>,
    /// Row-major; `f64::INFINITY` marks a forbidden pair.
    entries: Vec<f64>,
    pub categories: Vec<String>,
    pub treated_category: Vec<usize>,
    pub control_category: Vec<usize>,
    /// The spec with near-exact penalties resolved.
    pub spec: MatchSpec,
}

impl DistanceMatrix {
    /// Matrix without fine-balance structure, mostly for tests and callers
    /// bringing their own distances. `None` marks a forbidden pair.
    pub fn from_fn<F>(n_treated: usize, n_controls: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Option<f64>,
    {
        let mut entries = Vec::with_capacity(n_treated * n_controls);
        for t in 0..n_treated {
            for c in 0..n_controls {
                entries.push(f(t, c).unwrap_or(f64::INFINITY));
            }
        }
        DistanceMatrix {
            treated: (0..n_treated).map(|t| format!("t{t}")).collect(),
            controls: (0..n_controls).map(|c| format!("c{c}")).collect(),
            entries,
            categories: vec![String::new()],
            treated_category: vec![0; n_treated],
            control_category: vec![0; n_controls],
            spec: MatchSpec::default(),
        }
    }

    /// Attach fine-balance categories (indexes into `categories`).
    pub fn with_categories(mut self, categories: Vec<String>, treated: Vec<usize>, controls: Vec<usize>) -> Self {
        assert_eq!(treated.len(), self.treated.len());
        assert_eq!(controls.len(), self.controls.len());
        assert!(treated.iter().chain(&controls).all(|&k| k < categories.len()));
        self.categories = categories;
        self.treated_category = treated;
        self.control_category = controls;
        self
    }

    pub fn n_treated(&self) -> usize {
        self.treated.len()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn get(&self, t: usize, c: usize) -> Option<f64> {
        let d = self.entries[t * self.controls.len() + c];
        d.is_finite().then_some(d)
    }

    /// Distance in integer cost units.
    pub fn scaled(&self, t: usize, c: usize) -> Option<i64> {
        self.get(t, c).map(scale_cost)
    }

    /// Fine-balance targets equal to the treated category counts.
    pub fn default_targets(&self) -> FineBalanceTargets {
        let mut targets: FineBalanceTargets = self.categories.iter().map(|k| (k.clone(), 0)).collect();
        for &k in &self.treated_category {
            *targets.get_mut(&self.categories[k]).expect("category present") += 1;
        }
        targets
    }

    fn target_vector(&self, targets: &FineBalanceTargets) -> Result<Vec<usize>> {
        for k in targets.keys() {
            if !self.categories.contains(k) {
                return Err(Error::InvalidArgument(format!("fine-balance target for unknown category `{k}`")));
            }
        }
        Ok(self
            .categories
            .iter()
            .map(|k| targets.get(k).copied().unwrap_or(0))
            .collect())
    }

    fn scaled_matrix(&self) -> Vec<i64> {
        self.entries
            .iter()
            .map(|&d| if d.is_finite() { scale_cost(d) } else { FORBIDDEN })
            .collect()
    }
}

/// Category label -> number of matched controls wanted.
pub type FineBalanceTargets = BTreeMap<String, usize>;

fn scale_cost(d: f64) -> i64 {
    (d * COST_SCALE).round() as i64
}

/// Distances between every treated and control record of `dataset`.
pub fn build_distance(dataset: &Dataset, spec: &MatchSpec) -> Result<DistanceMatrix> {
    let schema = dataset.schema();
    spec.validate(schema)?;

    let mut used: Vec<&str> = spec.distance_covariates.iter().map(String::as_str).collect();
    used.extend(spec.near_exact.iter().map(|n| n.name.as_str()));
    used.extend(spec.fine_balance.as_deref());
    for r in dataset.records() {
        for name in &used {
            if dataset.value(r, name).is_none() {
                return Err(Error::data(None, Some(name), format!("record `{}` has a missing value", r.id)));
            }
        }
    }

    let z = balance::standardize(dataset);
    let dist_cols: Vec<usize> = spec
        .distance_covariates
        .iter()
        .map(|n| z.column_index(n).expect("numeric covariate has a column"))
        .collect();
    let treated_rows: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.records()[i].treatment).collect();
    let control_rows: Vec<usize> = (0..dataset.len()).filter(|&i| !dataset.records()[i].treatment).collect();
    let (nt, nc) = (treated_rows.len(), control_rows.len());

    let mut entries = vec![0.0; nt * nc];
    let mut max_numeric: f64 = 0.0;
    for (ti, &tr) in treated_rows.iter().enumerate() {
        let zt: Vec<f64> = dist_cols.iter().map(|&k| z.values[tr][k]).collect();
        let row = &mut entries[ti * nc..(ti + 1) * nc];
        for (slot, &cr) in row.iter_mut().zip(&control_rows) {
            let zc = &z.values[cr];
            let sq: f64 = zt.iter().zip(&dist_cols).map(|(a, &k)| (a - zc[k]) * (a - zc[k])).sum();
            *slot = sq.sqrt();
            max_numeric = max_numeric.max(*slot);
        }
    }

    let auto_penalty = if max_numeric > 0.0 {
        AUTO_PENALTY_FACTOR * max_numeric
    } else {
        AUTO_PENALTY_FACTOR
    };
    let mut resolved = spec.clone();
    for ne in &mut resolved.near_exact {
        let penalty = *ne.penalty.get_or_insert(auto_penalty);
        let idx = schema.position(&ne.name).expect("validated");
        let numeric = schema.entries()[idx].kind == CovariateKind::Numeric;
        // numeric values, or category codes compared for equality
        let mut codes: BTreeMap<String, f64> = BTreeMap::new();
        let mut key = |row: usize| {
            let v = dataset.records()[row].covariates[idx].as_ref().expect("checked");
            match (numeric, v.as_f64()) {
                (true, Some(x)) => x,
                _ => {
                    let next = codes.len() as f64;
                    *codes.entry(v.label()).or_insert(next)
                }
            }
        };
        let kt: Vec<f64> = treated_rows.iter().map(|&r| key(r)).collect();
        let kc: Vec<f64> = control_rows.iter().map(|&r| key(r)).collect();
        for (ti, &a) in kt.iter().enumerate() {
            let row = &mut entries[ti * nc..(ti + 1) * nc];
            for (slot, &b) in row.iter_mut().zip(&kc) {
                let mismatch = if numeric { (a - b).abs() } else { f64::from(u8::from(a != b)) };
                *slot += penalty * mismatch;
            }
        }
    }
    if let Some(caliper) = spec.caliper {
        for d in entries.iter_mut().filter(|d| **d > caliper) {
            *d = f64::INFINITY;
        }
    }

    let (categories, treated_category, control_category) = match &spec.fine_balance {
        Some(name) => {
            let idx = schema.position(name).expect("validated");
            let labels: Vec<String> = balance::category_levels(dataset, idx);
            let cat_of = |row: usize| {
                let label = dataset.records()[row].covariates[idx].as_ref().expect("checked").label();
                labels.iter().position(|l| *l == label).expect("observed level")
            };
            (
                labels.clone(),
                treated_rows.iter().map(|&r| cat_of(r)).collect(),
                control_rows.iter().map(|&r| cat_of(r)).collect(),
            )
        }
        None => (vec![String::new()], vec![0; nt], vec![0; nc]),
    };

    let matrix = DistanceMatrix {
        treated: treated_rows.iter().map(|&r| dataset.records()[r].id.clone()).collect(),
        controls: control_rows.iter().map(|&r| dataset.records()[r].id.clone()).collect(),
        entries,
        categories,
        treated_category,
        control_category,
        spec: resolved,
    };

    let stranded: Vec<String> = (0..nt)
        .filter(|&t| (0..nc).all(|c| matrix.get(t, c).is_none()))
        .map(|t| matrix.treated[t].clone())
        .collect();
    if !stranded.is_empty() {
        return Err(Error::Infeasible {
            reason: "no admissible control within the caliper".into(),
            unmatched: stranded,
        });
    }
    Ok(matrix)
}

/// Arcs per treated unit in the first sparse round.
const INITIAL_CANDIDATES: usize = 32;

/// Minimum-cost perfect matching of every treated unit to a distinct control,
/// minimizing fine-balance deviation first and total distance second.
///
/// The flow is first solved on each treated unit's cheapest arcs. The final
/// potentials then certify optimality on the full matrix: any excluded arc
/// with negative reduced cost is added and the flow re-solved.
pub fn solve_matching(
    distance: &DistanceMatrix,
    targets: &FineBalanceTargets,
    spec: &MatchSpec,
) -> Result<MatchedSample> {
    solve_sparse(distance, targets, spec, INITIAL_CANDIDATES)
}

fn solve_sparse(
    distance: &DistanceMatrix,
    targets: &FineBalanceTargets,
    spec: &MatchSpec,
    initial_candidates: usize,
) -> Result<MatchedSample> {
    let target = distance.target_vector(targets)?;
    let (nt, nc) = (distance.n_treated(), distance.n_controls());
    if nt == 0 {
        return Err(Error::InvalidArgument("no treated units to match".into()));
    }
    if nc < nt {
        return Err(Error::Infeasible {
            reason: format!("{nc} controls for {nt} treated units"),
            unmatched: distance.treated.clone(),
        });
    }
    let costs = distance.scaled_matrix();
    let max_cost = costs.iter().copied().filter(|&x| x != FORBIDDEN).max().unwrap_or(0);
    // one unit of overflow must outweigh any total distance
    let overflow_cost = (max_cost.max(0) + 1)
        .checked_mul(nt as i64 + 1)
        .filter(|&b| b < i64::MAX / 8)
        .ok_or_else(|| Error::InvalidArgument("distances too large for exact integer flow".into()))?;

    let row = |t: usize| &costs[t * nc..(t + 1) * nc];
    let admissible: Vec<Vec<usize>> = (0..nt)
        .map(|t| (0..nc).filter(|&c| row(t)[c] != FORBIDDEN).collect())
        .collect();
    let mut limit = initial_candidates.max(1);
    let mut extra: Vec<Vec<usize>> = vec![Vec::new(); nt];
    loop {
        let adjacency: Vec<Vec<(usize, i64)>> = (0..nt)
            .map(|t| {
                let mut chosen = admissible[t].clone();
                if chosen.len() > limit {
                    chosen.select_nth_unstable_by_key(limit - 1, |&c| (row(t)[c], c));
                    chosen.truncate(limit);
                    chosen.extend(&extra[t]);
                    chosen.sort_unstable();
                    chosen.dedup();
                }
                chosen.into_iter().map(|c| (c, row(t)[c])).collect()
            })
            .collect();
        let complete = adjacency.iter().zip(&admissible).all(|(a, b)| a.len() == b.len());

        let mut flow = FineBalanceFlow::new(&adjacency, nc, &distance.control_category, target.clone(), overflow_cost);
        flow.run();
        let unmatched: Vec<usize> = (0..nt).filter(|&t| flow.mate_t[t].is_none()).collect();
        if !unmatched.is_empty() {
            if complete {
                return Err(Error::Infeasible {
                    reason: "no complete matching respects the forbidden pairs".into(),
                    unmatched: unmatched.iter().map(|&t| distance.treated[t].clone()).collect(),
                });
            }
            limit = limit.saturating_mul(4);
            continue;
        }

        let mut violated = false;
        for t in 0..nt {
            let pt = flow.potential[flow.t_node(t)];
            for &c in &admissible[t] {
                if flow.mate_t[t] == Some(c) {
                    continue;
                }
                if row(t)[c] + pt - flow.potential[flow.c_node(c)] < 0 {
                    extra[t].push(c);
                    violated = true;
                }
            }
        }
        if !violated {
            let assignment: Vec<usize> = flow.mate_t.iter().map(|m| m.expect("matched")).collect();
            return Ok(assemble(distance, targets, spec, &assignment));
        }
    }
}

fn assemble(distance: &DistanceMatrix, targets: &FineBalanceTargets, spec: &MatchSpec, assignment: &[usize]) -> MatchedSample {
    let scaled: i64 = assignment
        .iter()
        .enumerate()
        .map(|(t, &c)| distance.scaled(t, c).expect("admissible"))
        .sum();
    let pairs = assignment
        .iter()
        .enumerate()
        .map(|(t, &c)| MatchedPair {
            treated: distance.treated[t].clone(),
            control: distance.controls[c].clone(),
        })
        .collect();
    let target = distance.target_vector(targets).expect("checked by caller");
    MatchedSample {
        pairs,
        spec: spec.clone(),
        total_cost: scaled as f64 / COST_SCALE,
        fine_balance_deviation: deviation(&category_counts(distance, assignment), &target),
    }
}

fn category_counts(distance: &DistanceMatrix, assignment: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; distance.categories.len()];
    for &c in assignment {
        counts[distance.control_category[c]] += 1;
    }
    counts
}

fn deviation(counts: &[usize], target: &[usize]) -> u64 {
    counts.iter().zip(target).map(|(&m, &t)| m.abs_diff(t) as u64).sum()
}

/// Integer-cost total of a matched sample's assignment, as minimized by the solver.
pub fn scaled_cost(distance: &DistanceMatrix, matched: &MatchedSample) -> Option<i64> {
    let tpos: BTreeMap<&str, usize> = distance.treated.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let cpos: BTreeMap<&str, usize> = distance.controls.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    matched
        .pairs
        .iter()
        .map(|p| distance.scaled(*tpos.get(p.treated.as_str())?, *cpos.get(p.control.as_str())?))
        .sum()
}

/// Successive shortest paths with Johnson potentials on the implicit
/// matching network, one treated row per augmentation. Dijkstra stops as
/// soon as the sink is settled.
struct FineBalanceFlow<'a> {
    /// Candidate (control, cost) arcs of each treated unit.
    adjacency: &'a [Vec<(usize, i64)>],
    nt: usize,
    nc: usize,
    category: &'a [usize],
    members: Vec<Vec<usize>>,
    target: Vec<usize>,
    regular: Vec<usize>,
    overflow_cost: i64,
    mate_t: Vec<Option<usize>>,
    /// Cost of each treated unit's current arc.
    mate_cost: Vec<i64>,
    mate_c: Vec<Option<usize>>,
    potential: Vec<i64>,
    dist: Vec<i64>,
    parent: Vec<usize>,
    parent_cost: Vec<i64>,
    done: Vec<bool>,
}

const NONE: usize = usize::MAX;

impl<'a> FineBalanceFlow<'a> {
    fn new(
        adjacency: &'a [Vec<(usize, i64)>],
        nc: usize,
        category: &'a [usize],
        target: Vec<usize>,
        overflow_cost: i64,
    ) -> Self {
        let nt = adjacency.len();
        let k = target.len();
        let mut members = vec![Vec::new(); k];
        for (c, &cat) in category.iter().enumerate() {
            members[cat].push(c);
        }
        let n_nodes = 2 + nt + nc + k;
        FineBalanceFlow {
            adjacency,
            nt,
            nc,
            category,
            members,
            target,
            regular: vec![0; k],
            overflow_cost,
            mate_t: vec![None; nt],
            mate_cost: vec![0; nt],
            mate_c: vec![None; nc],
            potential: vec![0; n_nodes],
            dist: vec![i64::MAX; n_nodes],
            parent: vec![NONE; n_nodes],
            parent_cost: vec![0; n_nodes],
            done: vec![false; n_nodes],
        }
    }

    // node layout: source | treated | controls | categories | sink
    fn t_node(&self, t: usize) -> usize {
        1 + t
    }
    fn c_node(&self, c: usize) -> usize {
        1 + self.nt + c
    }
    fn k_node(&self, k: usize) -> usize {
        1 + self.nt + self.nc + k
    }
    fn sink(&self) -> usize {
        self.potential.len() - 1
    }

    fn sink_cost(&self, k: usize) -> i64 {
        if self.regular[k] < self.target[k] {
            0
        } else {
            self.overflow_cost
        }
    }

    /// Add treated rows one at a time, each along a shortest augmenting
    /// path. A row that cannot reach the sink stays unmatched.
    fn run(&mut self) {
        for t in 0..self.nt {
            // free rows have no incoming residual arcs, so their potential
            // can be raised until every outgoing reduced cost is nonnegative
            let u = self.t_node(t);
            if let Some(p) = self.adjacency[t].iter().map(|&(c, cost)| self.potential[self.c_node(c)] - cost).max() {
                self.potential[u] = p;
            }
            self.augment(u);
        }
    }

    fn relax(&mut self, heap: &mut BinaryHeap<Reverse<(i64, usize)>>, u: usize, d: i64, v: usize, cost: i64) {
        if self.done[v] {
            return;
        }
        let reduced = cost + self.potential[u] - self.potential[v];
        debug_assert!(reduced >= 0, "negative reduced cost");
        let nd = d + reduced;
        if nd < self.dist[v] {
            self.dist[v] = nd;
            self.parent[v] = u;
            self.parent_cost[v] = cost;
            heap.push(Reverse((nd, v)));
        }
    }

    fn augment(&mut self, s: usize) -> bool {
        self.dist.fill(i64::MAX);
        self.parent.fill(NONE);
        self.done.fill(false);
        let mut heap = BinaryHeap::new();
        let sink = self.sink();
        self.dist[s] = 0;
        heap.push(Reverse((0i64, s)));

        let mut reached = None;
        while let Some(Reverse((d, u))) = heap.pop() {
            if self.done[u] || d > self.dist[u] {
                continue;
            }
            self.done[u] = true;
            if u == sink {
                reached = Some(d);
                break;
            }
            if u <= self.nt {
                let t = u - 1;
                let adjacency = self.adjacency;
                let mate = self.mate_t[t];
                for &(c, cost) in &adjacency[t] {
                    if mate != Some(c) {
                        self.relax(&mut heap, u, d, 1 + self.nt + c, cost);
                    }
                }
            } else if u <= self.nt + self.nc {
                let c = u - 1 - self.nt;
                match self.mate_c[c] {
                    Some(t) => self.relax(&mut heap, u, d, self.t_node(t), -self.mate_cost[t]),
                    None => self.relax(&mut heap, u, d, self.k_node(self.category[c]), 0),
                }
            } else {
                let k = u - 1 - self.nt - self.nc;
                let cost = self.sink_cost(k);
                self.relax(&mut heap, u, d, sink, cost);
                for i in 0..self.members[k].len() {
                    let c = self.members[k][i];
                    if self.mate_c[c].is_some() {
                        self.relax(&mut heap, u, d, self.c_node(c), 0);
                    }
                }
            }
        }

        let Some(limit) = reached else {
            return false;
        };
        for v in 0..self.potential.len() {
            let step = if self.done[v] { self.dist[v].min(limit) } else { limit };
            self.potential[v] += step;
        }

        // walk the path back from the sink
        let mut path = vec![sink];
        let mut v = sink;
        while v != s {
            v = self.parent[v];
            path.push(v);
        }
        path.reverse();
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let a_is_t = a >= 1 && a <= self.nt;
            let a_is_c = a > self.nt && a <= self.nt + self.nc;
            let b_is_t = b >= 1 && b <= self.nt;
            if a_is_t {
                let (t, c) = (a - 1, b - 1 - self.nt);
                self.mate_t[t] = Some(c);
                self.mate_cost[t] = self.parent_cost[b];
                self.mate_c[c] = Some(t);
            } else if a_is_c && b_is_t {
                let c = a - 1 - self.nt;
                if self.mate_c[c] == Some(b - 1) {
                    self.mate_c[c] = None;
                }
            } else if b == sink {
                let k = a - 1 - self.nt - self.nc;
                if self.regular[k] < self.target[k] {
                    self.regular[k] += 1;
                }
            }
        }
        true
    }
}

/// Largest instance accepted by [`brute_force_matching`].
pub const BRUTE_FORCE_MAX_TREATED: usize = 8;

/// Exhaustive search over injective assignments under the same lexicographic
/// objective as [`solve_matching`] (fine-balance deviation, then integer cost).
pub fn brute_force_matching(distance: &DistanceMatrix, targets: &FineBalanceTargets) -> Result<MatchedSample> {
    let (nt, nc) = (distance.n_treated(), distance.n_controls());
    if nt > BRUTE_FORCE_MAX_TREATED {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to {BRUTE_FORCE_MAX_TREATED} treated units, got {nt}"
        )));
    }
    if nt == 0 {
        return Err(Error::InvalidArgument("no treated units to match".into()));
    }
    let target = distance.target_vector(targets)?;

    struct Search<'a> {
        d: &'a DistanceMatrix,
        target: &'a [usize],
        used: Vec<bool>,
        counts: Vec<usize>,
        current: Vec<usize>,
        best: Option<(u64, i64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn excess(&self) -> u64 {
            self.counts
                .iter()
                .zip(self.target)
                .map(|(&m, &t)| m.saturating_sub(t) as u64)
                .sum()
        }

        fn visit(&mut self, t: usize, cost: i64) {
            // excess over target only grows, so it bounds the final deviation
            if let Some((best_dev, best_cost, _)) = &self.best {
                let bound = self.excess();
                if bound > *best_dev || (bound == *best_dev && cost > *best_cost) {
                    return;
                }
            }
            if t == self.d.n_treated() {
                let dev = deviation(&self.counts, self.target);
                let better = match &self.best {
                    None => true,
                    Some((bd, bc, _)) => (dev, cost) < (*bd, *bc),
                };
                if better {
                    self.best = Some((dev, cost, self.current.clone()));
                }
                return;
            }
            for c in 0..self.d.n_controls() {
                if self.used[c] {
                    continue;
                }
                let Some(step) = self.d.scaled(t, c) else { continue };
                let k = self.d.control_category[c];
                self.used[c] = true;
                self.counts[k] += 1;
                self.current.push(c);
                self.visit(t + 1, cost + step);
                self.current.pop();
                self.counts[k] -= 1;
                self.used[c] = false;
            }
        }
    }

    let mut search = Search {
        d: distance,
        target: &target,
        used: vec![false; nc],
        counts: vec![0; distance.categories.len()],
        current: Vec::with_capacity(nt),
        best: None,
    };
    search.visit(0, 0);
    match search.best {
        Some((_, _, assignment)) => Ok(assemble(distance, targets, &distance.spec, &assignment)),
        None => Err(Error::Infeasible {
            reason: "no injective assignment exists".into(),
            unmatched: distance.treated.clone(),
        }),
    }
}

/// Build distances from the spec and solve with treated-count fine-balance targets.
pub fn match_dataset(dataset: &Dataset, spec: &MatchSpec) -> Result<MatchedSample> {
    let distance = build_distance(dataset, spec)?;
    let targets = distance.default_targets();
    let resolved = distance.spec.clone();
    solve_matching(&distance, &targets, &resolved)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryBalance {
    pub category: String,
    pub treated: usize,
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub table: BalanceTable,
    pub smd_threshold: f64,
    /// Covariates whose post-match |SMD| exceeds the threshold.
    pub flagged: Vec<String>,
    pub fine_balance: Vec<CategoryBalance>,
    pub fine_balance_deviation: u64,
}

impl BalanceReport {
    pub fn is_balanced(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Recompute the balance table and flag covariates left imbalanced.
pub fn verify_balance(dataset: &Dataset, matched: &MatchedSample, smd_threshold: f64) -> Result<BalanceReport> {
    let table = balance::table_one(dataset, matched)?;
    let flagged = table
        .summaries()
        .filter(|r| r.smd_after.is_nan() || r.smd_after.abs() > smd_threshold)
        .map(|r| r.covariate.clone())
        .collect();
    let mut fine_balance = Vec::new();
    let mut deviation_total = 0;
    if let Some(name) = &matched.spec.fine_balance {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for p in &matched.pairs {
            for (id, slot) in [(&p.treated, 0), (&p.control, 1)] {
                let r = dataset
                    .get(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("matched id `{id}` not in dataset")))?;
                let label = dataset.value(r, name).map(|v| v.label()).unwrap_or_default();
                let e = counts.entry(label).or_default();
                if slot == 0 {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        for (category, (treated, matched)) in counts {
            deviation_total += treated.abs_diff(matched) as u64;
            fine_balance.push(CategoryBalance {
                category,
                treated,
                matched,
            });
        }
    }
    Ok(BalanceReport {
        table,
        smd_threshold,
        flagged,
        fine_balance,
        fine_balance_deviation: deviation_total,
    })
}
