//! Cell tables, nonparametric contrasts and the regression estimators they are
//! compared against.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::combinatorics::gcd;
use crate::error::{Error, Result, Undefined};
use crate::linalg::{ols, SeKind};
use crate::model::{assignment_count, AssignmentMode, EffectVector, EffectiveAssignment, GroupedDataset, Peers};

/// Largest neighbor count for which a saturated table is materialised.
pub const SATURATED_CAP: usize = 20;

/// Divisor used for within-cell variances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceDivisor {
    /// `N(a)`.
    #[default]
    Plugin,
    /// `N(a) - 1`; undefined for single-observation cells.
    Unbiased,
}

impl VarianceDivisor {
    pub(crate) fn denominator(self, count: usize) -> Option<f64> {
        match self {
            Self::Plugin => (count > 0).then_some(count as f64),
            Self::Unbiased => (count > 1).then(|| (count - 1) as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CellStats {
    pub count: usize,
    pub mean: Option<f64>,
    pub var: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct CellData {
    outcomes: Vec<f64>,
    groups: Vec<usize>,
}

fn mean_of(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn var_of(values: &[f64], divisor: VarianceDivisor) -> Option<f64> {
    let m = mean_of(values)?;
    let den = divisor.denominator(values.len())?;
    Some(values.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / den)
}

/// Per-assignment outcome samples with counts, means and variances.
#[derive(Clone, Debug)]
pub struct CellTable {
    n: usize,
    mode: AssignmentMode,
    groups: usize,
    divisor: VarianceDivisor,
    cells: Vec<CellData>,
}

/// Incremental construction of a [`CellTable`].
#[derive(Clone, Debug)]
pub struct CellTableBuilder {
    n: usize,
    mode: AssignmentMode,
    cells: Vec<CellData>,
    seen: HashSet<usize>,
}

impl CellTableBuilder {
    pub fn new(n: usize, mode: AssignmentMode) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidGroupSize(n));
        }
        if mode == AssignmentMode::Saturated && n > SATURATED_CAP {
            return Err(Error::EnumerationTooLarge { n, cap: SATURATED_CAP });
        }
        Ok(Self {
            n,
            mode,
            cells: vec![CellData::default(); assignment_count(n, mode)],
            seen: HashSet::new(),
        })
    }

    pub fn push(&mut self, a: &EffectiveAssignment, outcome: f64, group: usize) -> Result<()> {
        let idx = (a.mode() == self.mode)
            .then(|| a.index(self.n))
            .flatten()
            .ok_or_else(|| Error::InvalidParameter(format!("{a} is not a {} assignment for n = {}", self.mode, self.n)))?;
        self.push_index(idx, outcome, group);
        Ok(())
    }

    /// Push by canonical cell index. Panics when `index` is out of range.
    pub fn push_index(&mut self, index: usize, outcome: f64, group: usize) {
        let cell = &mut self.cells[index];
        cell.outcomes.push(outcome);
        cell.groups.push(group);
        self.seen.insert(group);
    }

    pub fn finish(self) -> CellTable {
        CellTable {
            n: self.n,
            mode: self.mode,
            groups: self.seen.len(),
            divisor: VarianceDivisor::Plugin,
            cells: self.cells,
        }
    }
}

/// Build the cell table of a single-size dataset.
///
/// In reference mode `n` is the largest declared reference-set size.
pub fn build_cell_table(ds: &GroupedDataset, mode: AssignmentMode) -> Result<CellTable> {
    let neighbors = ds.neighbors()?;
    let n = match mode {
        AssignmentMode::Reference => ds
            .groups()
            .iter()
            .filter_map(|g| g.max_reference_size())
            .max()
            .unwrap_or(0)
            .max(1),
        _ => neighbors,
    };
    let mut builder = CellTableBuilder::new(n, mode)?;
    for (gi, g) in ds.groups().iter().enumerate() {
        for (i, unit) in g.units.iter().enumerate() {
            let a = g.observed_assignment(i, mode)?;
            builder.push(&a, unit.outcome, gi)?;
        }
    }
    Ok(builder.finish())
}

impl CellTable {
    pub fn from_dataset(ds: &GroupedDataset, mode: AssignmentMode) -> Result<Self> {
        build_cell_table(ds, mode)
    }

    pub fn with_divisor(mut self, divisor: VarianceDivisor) -> Self {
        self.divisor = divisor;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> AssignmentMode {
        self.mode
    }

    pub fn divisor(&self) -> VarianceDivisor {
        self.divisor
    }

    /// Number of distinct groups contributing observations.
    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.outcomes.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn assignment(&self, index: usize) -> EffectiveAssignment {
        EffectiveAssignment::from_index(index, self.n, self.mode)
    }

    fn slot(&self, a: &EffectiveAssignment) -> Option<usize> {
        if a.mode() != self.mode {
            return None;
        }
        a.index(self.n)
    }

    pub fn outcomes(&self, a: &EffectiveAssignment) -> &[f64] {
        self.slot(a).map_or(&[], |i| self.cells[i].outcomes.as_slice())
    }

    /// Group index of every observation in the cell, aligned with [`CellTable::outcomes`].
    pub fn cell_groups(&self, a: &EffectiveAssignment) -> &[usize] {
        self.slot(a).map_or(&[], |i| self.cells[i].groups.as_slice())
    }

    pub fn count(&self, a: &EffectiveAssignment) -> usize {
        self.outcomes(a).len()
    }

    pub fn mean(&self, a: &EffectiveAssignment) -> Option<f64> {
        mean_of(self.outcomes(a))
    }

    pub fn var(&self, a: &EffectiveAssignment) -> Option<f64> {
        var_of(self.outcomes(a), self.divisor)
    }

    pub fn stats(&self, a: &EffectiveAssignment) -> CellStats {
        let y = self.outcomes(a);
        CellStats {
            count: y.len(),
            mean: mean_of(y),
            var: var_of(y, self.divisor),
        }
    }

    /// Every cell in canonical order with its statistics.
    pub fn iter(&self) -> impl Iterator<Item = (EffectiveAssignment, CellStats)> + '_ {
        (0..self.cells.len()).map(move |i| {
            let a = self.assignment(i);
            let s = self.stats(&a);
            (a, s)
        })
    }

    /// Means of the nonempty cells.
    pub fn means(&self) -> BTreeMap<EffectiveAssignment, f64> {
        self.iter().filter_map(|(a, s)| Some((a, s.mean?))).collect()
    }

    /// Population-style effect vector from the cell means; needs every
    /// exchangeable cell to be nonempty.
    pub fn effect_vector(&self) -> Result<EffectVector> {
        let table = match self.mode {
            AssignmentMode::Saturated => self.pooled()?,
            _ => self.clone(),
        };
        let means = table
            .iter()
            .filter_map(|(a, s)| Some((a.to_count(), s.mean?)))
            .collect();
        crate::model::effects_from_means(&means, self.n)
    }

    /// Pool a saturated table into exchangeable cells by neighbor popcount.
    pub fn pooled(&self) -> Result<CellTable> {
        if self.mode != AssignmentMode::Saturated {
            return Err(Error::Unsupported(format!("popcount pooling needs a saturated table, got {}", self.mode)));
        }
        let mut cells = vec![CellData::default(); assignment_count(self.n, AssignmentMode::Exchangeable)];
        for (i, cell) in self.cells.iter().enumerate() {
            let target = self.assignment(i).to_count().index(self.n).expect("popcount within range");
            cells[target].outcomes.extend_from_slice(&cell.outcomes);
            cells[target].groups.extend_from_slice(&cell.groups);
        }
        Ok(CellTable {
            n: self.n,
            mode: AssignmentMode::Exchangeable,
            groups: self.groups,
            divisor: self.divisor,
            cells,
        })
    }

    /// `(cell index, outcome, group)` for every observation, cell by cell.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.outcomes.iter().zip(&c.groups).map(move |(&y, &g)| (i, y, g)))
    }
}

/// A point estimate with its standard error and the cells it uses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub value: f64,
    pub se: f64,
    pub cells: Vec<EffectiveAssignment>,
    pub n_eff: Vec<usize>,
}

pub type Estimate = std::result::Result<EffectEstimate, Undefined>;

/// Linear combination of cell means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    terms: Vec<(EffectiveAssignment, f64)>,
}

impl Contrast {
    /// Terms on the same assignment are merged; a merged zero coefficient is
    /// kept so the cell still counts towards definedness.
    pub fn new(terms: impl IntoIterator<Item = (EffectiveAssignment, f64)>) -> Self {
        let mut merged: BTreeMap<EffectiveAssignment, f64> = BTreeMap::new();
        for (a, c) in terms {
            *merged.entry(a).or_insert(0.0) += c;
        }
        Self {
            terms: merged.into_iter().collect(),
        }
    }

    pub fn difference(a: EffectiveAssignment, b: EffectiveAssignment) -> Self {
        Self::new([(a, 1.0), (b, -1.0)])
    }

    /// `mu(1, peers) - mu(0, peers)`.
    pub fn direct(peers: Peers) -> Self {
        Self::difference(
            EffectiveAssignment { own: true, peers: peers.clone() },
            EffectiveAssignment { own: false, peers },
        )
    }

    /// `mu(own, peers) - mu(own, no treated peers)`.
    pub fn spillover(own: bool, peers: Peers) -> Self {
        let zero = untreated_like(&peers);
        Self::difference(EffectiveAssignment { own, peers }, EffectiveAssignment { own, peers: zero })
    }

    pub fn terms(&self) -> &[(EffectiveAssignment, f64)] {
        &self.terms
    }

    pub fn cells(&self) -> Vec<EffectiveAssignment> {
        self.terms.iter().map(|(a, _)| a.clone()).collect()
    }

    /// Evaluate on a table. Every cell needs more than one observation so
    /// that its variance, and hence the standard error, exists.
    pub fn evaluate(&self, table: &CellTable) -> Estimate {
        let thin: Vec<EffectiveAssignment> = self
            .terms
            .iter()
            .filter(|(a, _)| table.count(a) <= 1)
            .map(|(a, _)| a.clone())
            .collect();
        if !thin.is_empty() {
            return Err(Undefined::new(thin, "fewer than two observations in cell"));
        }
        let mut value = 0.0;
        let mut var = 0.0;
        let mut n_eff = Vec::with_capacity(self.terms.len());
        for (a, c) in &self.terms {
            let s = table.stats(a);
            let v = s.var.ok_or_else(|| Undefined::new(vec![a.clone()], "cell variance undefined"))?;
            value += c * s.mean.expect("nonempty cell");
            var += c * c * v / s.count as f64;
            n_eff.push(s.count);
        }
        Ok(EffectEstimate {
            value,
            se: var.sqrt(),
            cells: self.cells(),
            n_eff,
        })
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (a, c)) in self.terms.iter().enumerate() {
            let sign = match (i, *c < 0.0) {
                (0, true) => "-",
                (0, false) => "",
                (_, true) => " - ",
                (_, false) => " + ",
            };
            let mag = c.abs();
            if (mag - 1.0).abs() < f64::EPSILON {
                write!(f, "{sign}mu{a}")?;
            } else {
                write!(f, "{sign}{mag}*mu{a}")?;
            }
        }
        Ok(())
    }
}

fn untreated_like(peers: &Peers) -> Peers {
    match peers {
        Peers::Count(_) => Peers::Count(0),
        Peers::RefCount(_) => Peers::RefCount(0),
        Peers::Vector(bits) => Peers::Vector(vec![false; bits.len()]),
    }
}

/// Direct effects and spillover effects indexed by peer configuration.
///
/// `theta[d][0]` is the trivial zero contrast at the baseline cell.
#[derive(Clone, Debug)]
pub struct EffectEstimates {
    pub n: usize,
    pub mode: AssignmentMode,
    pub peers: Vec<Peers>,
    pub tau: Vec<Estimate>,
    pub theta: [Vec<Estimate>; 2],
}

pub fn direct_and_spillover(table: &CellTable) -> EffectEstimates {
    let half = table.len() / 2;
    let peers: Vec<Peers> = (0..half).map(|i| table.assignment(i).peers).collect();
    let tau = peers.iter().map(|p| Contrast::direct(p.clone()).evaluate(table)).collect();
    let theta = [false, true].map(|d| {
        peers
            .iter()
            .map(|p| Contrast::spillover(d, p.clone()).evaluate(table))
            .collect()
    });
    EffectEstimates {
        n: table.n(),
        mode: table.mode(),
        peers,
        tau,
        theta,
    }
}

/// Pooled spillover estimate for one bucket of treated-peer counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PooledEstimate {
    pub own: bool,
    pub bucket: Vec<usize>,
    pub estimate: EffectEstimate,
    /// Empirical share of each count of the bucket, aligned with `bucket`.
    pub weights: Vec<f64>,
}

/// `mean(Y | D = own, S in bucket) - mean(Y | D = own, S = 0)`.
pub fn pooled_spillover(table: &CellTable, own: bool, bucket: &[usize]) -> std::result::Result<PooledEstimate, Undefined> {
    let bucket: Vec<usize> = bucket.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if bucket.is_empty() || bucket.contains(&0) {
        return Err(Undefined::new(vec![], "bucket must be a nonempty set of positive counts"));
    }
    let mut pooled = Vec::new();
    let mut base = Vec::new();
    let mut by_count = vec![0usize; bucket.len()];
    let mut cells = Vec::new();
    let mut base_cells = Vec::new();
    for i in 0..table.len() {
        let a = table.assignment(i);
        if a.own != own {
            continue;
        }
        let s = a.treated_peers();
        let y = table.outcomes(&a);
        if s == 0 {
            base.extend_from_slice(y);
            base_cells.push(a);
        } else if let Ok(pos) = bucket.binary_search(&s) {
            pooled.extend_from_slice(y);
            by_count[pos] += y.len();
            cells.push(a);
        }
    }
    let mut thin = Vec::new();
    if pooled.len() <= 1 {
        thin.extend(cells.iter().cloned());
    }
    if base.len() <= 1 {
        thin.extend(base_cells.iter().cloned());
    }
    if !thin.is_empty() {
        return Err(Undefined::new(thin, "fewer than two observations in pooled cell"));
    }
    let divisor = table.divisor();
    let (m1, v1) = (mean_of(&pooled).unwrap(), var_of(&pooled, divisor).unwrap());
    let (m0, v0) = (mean_of(&base).unwrap(), var_of(&base, divisor).unwrap());
    let total = pooled.len() as f64;
    cells.extend(base_cells);
    Ok(PooledEstimate {
        own,
        weights: by_count.iter().map(|&c| c as f64 / total).collect(),
        bucket,
        estimate: EffectEstimate {
            value: m1 - m0,
            se: (v1 / pooled.len() as f64 + v0 / base.len() as f64).sqrt(),
            cells,
            n_eff: vec![pooled.len(), base.len()],
        },
    })
}

/// `mean(Y | D = 0, T = 1) - mean(Y | T = 0)` for partial-population designs.
pub fn partial_population_effect(ds: &GroupedDataset) -> Result<EffectEstimate> {
    if !ds.has_saturation() {
        return Err(Error::MissingSaturation);
    }
    let mut exposed = Vec::new();
    let mut pure = Vec::new();
    for g in ds.groups() {
        let treated_group = g.saturation == Some(true);
        for u in &g.units {
            if !treated_group {
                pure.push(u.outcome);
            } else if !u.treatment {
                exposed.push(u.outcome);
            }
        }
    }
    if exposed.len() <= 1 || pure.len() <= 1 {
        return Err(Undefined::new(
            vec![],
            format!(
                "need more than one control unit in treated groups ({}) and in control groups ({})",
                exposed.len(),
                pure.len()
            ),
        )
        .into());
    }
    let v1 = var_of(&exposed, VarianceDivisor::Plugin).unwrap();
    let v0 = var_of(&pure, VarianceDivisor::Plugin).unwrap();
    Ok(EffectEstimate {
        value: mean_of(&exposed).unwrap() - mean_of(&pure).unwrap(),
        se: (v1 / exposed.len() as f64 + v0 / pure.len() as f64).sqrt(),
        cells: vec![],
        n_eff: vec![exposed.len(), pure.len()],
    })
}

/// Named least-squares coefficients with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub nobs: usize,
    pub clusters: usize,
    pub se_kind: SeKind,
}

impl RegressionFit {
    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.position(name).map(|i| self.coef[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.position(name).map(|i| self.se[i])
    }

    pub fn estimate(&self, name: &str) -> Option<EffectEstimate> {
        let i = self.position(name)?;
        Some(EffectEstimate {
            value: self.coef[i],
            se: self.se[i],
            cells: vec![],
            n_eff: vec![self.nobs],
        })
    }
}

/// Regression design: named columns, outcomes and cluster ids.
#[derive(Clone, Debug)]
pub struct Design {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub clusters: Vec<usize>,
}

impl Design {
    fn from_rows(names: Vec<String>, rows: &[Vec<f64>], y: Vec<f64>, clusters: Vec<usize>) -> Self {
        let k = names.len();
        let x = DMatrix::from_fn(rows.len(), k, |r, c| rows[r][c]);
        Self { names, x, y, clusters }
    }

    /// Remove columns that are identically zero.
    fn drop_empty_columns(self) -> Self {
        let keep: Vec<usize> = (0..self.x.ncols())
            .filter(|&c| self.x.column(c).iter().any(|&v| v != 0.0))
            .collect();
        let x = self.x.select_columns(&keep);
        let names = keep.iter().map(|&c| self.names[c].clone()).collect();
        Self { names, x, ..self }
    }

    pub fn fit(&self, kind: SeKind) -> Result<RegressionFit> {
        let f = ols(&self.x, &self.y, &self.clusters, kind)?;
        Ok(RegressionFit {
            names: self.names.clone(),
            coef: f.coef,
            se: f.se,
            nobs: f.nobs,
            clusters: f.clusters,
            se_kind: kind,
        })
    }
}

fn peer_label(p: &Peers) -> String {
    match p {
        Peers::Count(s) => s.to_string(),
        Peers::RefCount(s) => format!("R{s}"),
        Peers::Vector(bits) => bits.iter().map(|&b| if b { '1' } else { '0' }).collect(),
    }
}

/// Fully saturated dummy regression on a cell table: intercept, own
/// treatment, and one indicator per nonzero peer configuration interacted
/// with each treatment status.
///
/// Coefficients are named `alpha`, `tau0`, `theta0[k]` and `theta1[k]`.
pub fn dummy_regression(table: &CellTable, kind: SeKind) -> Result<RegressionFit> {
    let half = table.len() / 2;
    let mut names = vec!["alpha".to_string(), "tau0".to_string()];
    for d in 0..2 {
        for k in 1..half {
            names.push(format!("theta{d}[{}]", peer_label(&table.assignment(k).peers)));
        }
    }
    let width = names.len();
    let mut rows = Vec::with_capacity(table.total());
    let mut y = Vec::with_capacity(table.total());
    let mut clusters = Vec::with_capacity(table.total());
    for (idx, outcome, group) in table.rows() {
        let d = idx / half;
        let k = idx % half;
        let mut row = vec![0.0; width];
        row[0] = 1.0;
        row[1] = d as f64;
        if k > 0 {
            row[2 + d * (half - 1) + (k - 1)] = 1.0;
        }
        rows.push(row);
        y.push(outcome);
        clusters.push(group);
    }
    Design::from_rows(names, &rows, y, clusters).drop_empty_columns().fit(kind)
}

/// Difference in mean outcomes between treated and control units, with
/// standard errors from the regression on a treatment dummy.
pub fn difference_in_means(ds: &GroupedDataset, kind: SeKind) -> Result<EffectEstimate> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut clusters = Vec::new();
    let mut arms = [0usize; 2];
    for (gi, g) in ds.groups().iter().enumerate() {
        for u in &g.units {
            arms[usize::from(u.treatment)] += 1;
            rows.push(vec![1.0, f64::from(u8::from(u.treatment))]);
            y.push(u.outcome);
            clusters.push(gi);
        }
    }
    if arms[0] == 0 || arms[1] == 0 {
        return Err(Undefined::new(vec![], "difference in means needs treated and control units").into());
    }
    let fit = Design::from_rows(vec!["alpha".into(), "beta".into()], &rows, y, clusters).fit(kind)?;
    Ok(EffectEstimate {
        value: fit.coef[1],
        se: fit.se[1],
        cells: vec![],
        n_eff: vec![arms[0], arms[1]],
    })
}

/// Linear-in-means regression of `Y` on own treatment and the share of
/// treated neighbors `S / n_g`.
///
/// Coefficients are `alpha`, `beta`, `gamma`, or with `interacted` the share
/// split by own status into `gamma0` and `gamma1`. Groups may differ in size.
pub fn lim_fit(ds: &GroupedDataset, interacted: bool, kind: SeKind) -> Result<RegressionFit> {
    let names: Vec<String> = if interacted {
        vec!["alpha".into(), "beta".into(), "gamma0".into(), "gamma1".into()]
    } else {
        vec!["alpha".into(), "beta".into(), "gamma".into()]
    };
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut clusters = Vec::new();
    for (gi, g) in ds.groups().iter().enumerate() {
        let n = g.neighbors();
        if n == 0 {
            return Err(Error::InvalidGroupSize(0));
        }
        let total = g.units.iter().filter(|u| u.treatment).count();
        for u in &g.units {
            let d = f64::from(u8::from(u.treatment));
            let share = (total - usize::from(u.treatment)) as f64 / n as f64;
            rows.push(if interacted {
                vec![1.0, d, share * (1.0 - d), share * d]
            } else {
                vec![1.0, d, share]
            });
            y.push(u.outcome);
            clusters.push(gi);
        }
    }
    Design::from_rows(names, &rows, y, clusters).fit(kind)
}

/// Saturated-mode estimates together with their popcount pooling.
#[derive(Clone, Debug)]
pub struct SaturatedFit {
    pub table: CellTable,
    pub effects: EffectEstimates,
    pub pooled: CellTable,
}

pub fn saturated_fit(ds: &GroupedDataset) -> Result<SaturatedFit> {
    if let Some(g) = ds.groups().iter().find(|g| !g.has_ranks()) {
        return Err(Error::MissingOrdering { group: g.id.clone() });
    }
    let table = build_cell_table(ds, AssignmentMode::Saturated)?;
    let effects = direct_and_spillover(&table);
    let pooled = table.pooled()?;
    Ok(SaturatedFit { table, effects, pooled })
}

pub fn pool_by_popcount(table: &CellTable) -> Result<CellTable> {
    table.pooled()
}

/// Strategy for datasets whose groups differ in size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizePolicy {
    /// One cell table per group size.
    #[default]
    Separate,
    /// Pooled dummy regression with group-size intercepts.
    SizeFixedEffects,
    /// Cells indexed by the share of treated neighbors.
    Proportion,
}

impl fmt::Display for SizePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Separate => "separate",
            Self::SizeFixedEffects => "size-fe",
            Self::Proportion => "proportion",
        })
    }
}

impl std::str::FromStr for SizePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "separate" => Ok(Self::Separate),
            "size-fe" | "size_fe" | "size-fixed-effects" => Ok(Self::SizeFixedEffects),
            "proportion" => Ok(Self::Proportion),
            other => Err(Error::InvalidParameter(format!(
                "unknown policy '{other}' (expected separate, size-fe or proportion)"
            ))),
        }
    }
}

/// Share of treated neighbors as a reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Share {
    pub num: usize,
    pub den: usize,
}

impl Share {
    pub fn new(num: usize, den: usize) -> Self {
        let g = gcd(num, den).max(1);
        if num == 0 {
            return Self { num: 0, den: 1 };
        }
        Self { num: num / g, den: den / g }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Ord for Share {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

impl PartialOrd for Share {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn unit_rows(ds: &GroupedDataset) -> Result<Vec<(usize, bool, usize, usize, f64)>> {
    let mut out = Vec::with_capacity(ds.unit_count());
    for (gi, g) in ds.groups().iter().enumerate() {
        let n = g.neighbors();
        if n == 0 {
            return Err(Error::InvalidGroupSize(0));
        }
        let total = g.units.iter().filter(|u| u.treatment).count();
        for u in &g.units {
            out.push((gi, u.treatment, total - usize::from(u.treatment), n, u.outcome));
        }
    }
    Ok(out)
}

/// Pooled dummy design with one intercept per group size, a shared own
/// treatment dummy and shared `1(S = s)` indicators by treatment status.
pub fn size_fixed_effects_design(ds: &GroupedDataset) -> Result<Design> {
    let rows = unit_rows(ds)?;
    let sizes: Vec<usize> = ds.size_summary().into_keys().collect();
    let max_n = rows.iter().map(|r| r.3).max().unwrap_or(0);
    let mut names: Vec<String> = sizes.iter().map(|s| format!("size[{s}]")).collect();
    names.push("tau0".into());
    for d in 0..2 {
        for s in 1..=max_n {
            names.push(format!("theta{d}[{s}]"));
        }
    }
    let (k, width) = (sizes.len(), names.len());
    let mut x = Vec::with_capacity(rows.len());
    for &(_, d, s, n, _) in &rows {
        let mut row = vec![0.0; width];
        row[sizes.binary_search(&(n + 1)).expect("size present")] = 1.0;
        row[k] = f64::from(u8::from(d));
        if s > 0 {
            row[k + 1 + usize::from(d) * max_n + (s - 1)] = 1.0;
        }
        x.push(row);
    }
    let y = rows.iter().map(|r| r.4).collect();
    let clusters = rows.iter().map(|r| r.0).collect();
    Ok(Design::from_rows(names, &x, y, clusters).drop_empty_columns())
}

/// Indicator design over observed treated shares: intercept, own treatment
/// dummy and `1(P = p)` by treatment status for every observed `p > 0`.
pub fn proportion_design(ds: &GroupedDataset) -> Result<Design> {
    let rows = unit_rows(ds)?;
    let levels: Vec<Share> = rows
        .iter()
        .map(|r| Share::new(r.2, r.3))
        .filter(|p| p.num > 0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut names = vec!["alpha".to_string(), "tau0".to_string()];
    for d in 0..2 {
        for p in &levels {
            names.push(format!("theta{d}[{p}]"));
        }
    }
    let (m, width) = (levels.len(), names.len());
    let mut x = Vec::with_capacity(rows.len());
    for &(_, d, s, n, _) in &rows {
        let mut row = vec![0.0; width];
        row[0] = 1.0;
        row[1] = f64::from(u8::from(d));
        let p = Share::new(s, n);
        if p.num > 0 {
            let j = levels.binary_search(&p).expect("level present");
            row[2 + usize::from(d) * m + j] = 1.0;
        }
        x.push(row);
    }
    let y = rows.iter().map(|r| r.4).collect();
    let clusters = rows.iter().map(|r| r.0).collect();
    Ok(Design::from_rows(names, &x, y, clusters).drop_empty_columns())
}

/// Estimates for one group-size stratum.
#[derive(Clone, Debug)]
pub struct StratumEstimates {
    pub size: usize,
    pub groups: usize,
    pub table: CellTable,
    pub effects: EffectEstimates,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedStratum {
    pub size: usize,
    pub groups: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub enum StratifiedEstimates {
    Separate {
        strata: BTreeMap<usize, StratumEstimates>,
        skipped: Vec<SkippedStratum>,
    },
    SizeFixedEffects(RegressionFit),
    Proportion(RegressionFit),
}

/// Estimate a dataset with possibly unequal group sizes under `policy`.
pub fn stratify_and_estimate(
    ds: &GroupedDataset,
    policy: SizePolicy,
    mode: AssignmentMode,
    kind: SeKind,
) -> Result<StratifiedEstimates> {
    match policy {
        SizePolicy::Separate => {
            let mut strata = BTreeMap::new();
            let mut skipped = Vec::new();
            for (size, sub) in ds.strata() {
                let groups = sub.groups().len();
                if groups < 2 || size < 2 {
                    skipped.push(SkippedStratum {
                        size,
                        groups,
                        reason: if size < 2 {
                            "groups without neighbors".into()
                        } else {
                            "fewer than two groups".into()
                        },
                    });
                    continue;
                }
                let table = build_cell_table(&sub, mode)?;
                let effects = direct_and_spillover(&table);
                strata.insert(size, StratumEstimates { size, groups, table, effects });
            }
            Ok(StratifiedEstimates::Separate { strata, skipped })
        }
        SizePolicy::SizeFixedEffects => Ok(StratifiedEstimates::SizeFixedEffects(size_fixed_effects_design(ds)?.fit(kind)?)),
        SizePolicy::Proportion => Ok(StratifiedEstimates::Proportion(proportion_design(ds)?.fit(kind)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, Unit};

    fn ea(d: u8, s: usize) -> EffectiveAssignment {
        EffectiveAssignment::count(d == 1, s)
    }

    fn group(id: &str, d: &[u8], y: &[f64]) -> Group {
        let units = d
            .iter()
            .zip(y)
            .enumerate()
            .map(|(i, (&d, &y))| Unit::new(format!("{id}-{i}"), d == 1, y).with_rank(i as u32 + 1))
            .collect();
        Group::new(id, units)
    }

    #[test]
    fn hand_counted_table() {
        let ds = GroupedDataset::new(vec![group("a", &[1, 0, 0], &[1.0, 0.0, 0.0])]).unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Exchangeable).unwrap();
        assert_eq!(t.stats(&ea(1, 0)), CellStats { count: 1, mean: Some(1.0), var: Some(0.0) });
        assert_eq!(t.count(&ea(0, 1)), 2);
        assert_eq!(t.mean(&ea(0, 1)), Some(0.0));
        for a in [ea(0, 0), ea(0, 2), ea(1, 1), ea(1, 2)] {
            assert_eq!(t.count(&a), 0);
            assert_eq!(t.mean(&a), None);
        }
        assert_eq!(t.total(), 3);
    }

    #[test]
    fn plugin_and_unbiased_variance() {
        let ds = GroupedDataset::new(vec![
            group("a", &[0, 0], &[1.0, 3.0]),
            group("b", &[0, 0], &[2.0, 6.0]),
        ])
        .unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Exchangeable).unwrap();
        assert!((t.var(&ea(0, 0)).unwrap() - 3.5).abs() < 1e-12);
        let t = t.with_divisor(VarianceDivisor::Unbiased);
        assert!((t.var(&ea(0, 0)).unwrap() - 14.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_sizes_need_stratification() {
        let ds = GroupedDataset::new(vec![group("a", &[1, 0], &[1.0, 0.0]), group("b", &[1, 0, 0], &[1.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(
            build_cell_table(&ds, AssignmentMode::Exchangeable),
            Err(Error::StratificationRequired { .. })
        ));
    }

    #[test]
    fn definedness_reports_thin_cells() {
        let ds = GroupedDataset::new(vec![group("a", &[1, 0, 0], &[1.0, 0.0, 0.0])]).unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Exchangeable).unwrap();
        let err = Contrast::spillover(false, Peers::Count(1)).evaluate(&t).unwrap_err();
        assert_eq!(err.cells, vec![ea(0, 0)]);
        let err = Contrast::direct(Peers::Count(0)).evaluate(&t).unwrap_err();
        assert_eq!(err.cells, vec![ea(0, 0), ea(1, 0)]);
    }

    #[test]
    fn contrast_se_from_cell_variances() {
        let ds = GroupedDataset::new(vec![
            group("a", &[0, 0], &[1.0, 3.0]),
            group("b", &[1, 1], &[2.0, 6.0]),
            group("c", &[0, 0], &[0.0, 2.0]),
            group("d", &[1, 1], &[4.0, 4.0]),
        ])
        .unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Exchangeable).unwrap();
        let e = Contrast::difference(ea(1, 1), ea(0, 0)).evaluate(&t).unwrap();
        assert!((e.value - 2.5).abs() < 1e-12);
        // var(1,1) = 2, var(0,0) = 1.25, N = 4 each
        assert!((e.se - (2.0f64 / 4.0 + 1.25 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(e.n_eff, vec![4, 4]);
    }

    #[test]
    fn contrast_merges_terms() {
        let c = Contrast::new([(ea(0, 1), 1.0), (ea(0, 0), -1.0), (ea(0, 1), 0.5)]);
        assert_eq!(c.terms(), &[(ea(0, 0), -1.0), (ea(0, 1), 1.5)]);
        assert_eq!(Contrast::difference(ea(0, 2), ea(0, 0)).to_string(), "-mu(0,0) + mu(0,2)");
    }

    #[test]
    fn deterministic_direct_effect() {
        let mut groups = Vec::new();
        for (i, d) in [[1u8, 0, 0], [0, 1, 1], [1, 1, 0], [0, 0, 0], [1, 1, 1], [1, 0, 1], [0, 0, 1], [0, 1, 0]]
            .iter()
            .cycle()
            .take(32)
            .enumerate()
        {
            let y: Vec<f64> = d.iter().map(|&v| f64::from(v)).collect();
            groups.push(group(&format!("g{i}"), d, &y));
        }
        let ds = GroupedDataset::new(groups).unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Exchangeable).unwrap();
        let eff = direct_and_spillover(&t);
        for tau in &eff.tau {
            assert_eq!(tau.as_ref().unwrap().value, 1.0);
        }
        for d in 0..2 {
            for th in &eff.theta[d] {
                assert_eq!(th.as_ref().unwrap().value, 0.0);
            }
        }
    }

    #[test]
    fn duplicated_dataset_doubles_counts() {
        let base = vec![
            group("a", &[1, 0, 0], &[1.0, 0.5, 0.2]),
            group("b", &[1, 1, 0], &[0.3, 0.9, 0.4]),
            group("c", &[0, 0, 0], &[0.1, 0.7, 0.6]),
        ];
        let mut twice = base.clone();
        twice.extend(base.iter().map(|g| Group { id: format!("{}-copy", g.id), ..g.clone() }));
        let t1 = build_cell_table(&GroupedDataset::new(base).unwrap(), AssignmentMode::Exchangeable).unwrap();
        let t2 = build_cell_table(&GroupedDataset::new(twice).unwrap(), AssignmentMode::Exchangeable).unwrap();
        for ((a, s1), (_, s2)) in t1.iter().zip(t2.iter()) {
            assert_eq!(s2.count, 2 * s1.count, "{a}");
            match (s1.mean, s2.mean) {
                (Some(m1), Some(m2)) => assert!((m1 - m2).abs() < 1e-12),
                (None, None) => {}
                _ => panic!("definedness differs at {a}"),
            }
        }
        assert_eq!(t2.group_count(), 6);
    }

    #[test]
    fn saturated_cells_and_pooling() {
        let ds = GroupedDataset::new(vec![
            group("a", &[1, 0, 0], &[1.0, 2.0, 3.0]),
            group("b", &[0, 1, 0], &[4.0, 5.0, 6.0]),
        ])
        .unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Saturated).unwrap();
        assert_eq!(t.len(), 8);
        // a-1, a-2 and b-0 all see (1, 0)
        assert_eq!(t.outcomes(&EffectiveAssignment::vector(false, vec![true, false])), &[2.0, 3.0, 4.0]);
        assert_eq!(t.outcomes(&EffectiveAssignment::vector(false, vec![false, true])), &[6.0]);
        assert_eq!(t.outcomes(&EffectiveAssignment::vector(false, vec![true, true])), &[] as &[f64]);
        let pooled = t.pooled().unwrap();
        let direct = build_cell_table(&ds, AssignmentMode::Exchangeable).unwrap();
        for ((a, p), (_, e)) in pooled.iter().zip(direct.iter()) {
            assert_eq!(p.count, e.count, "{a}");
            assert_eq!(p.mean, e.mean, "{a}");
        }
    }

    #[test]
    fn reference_mode_counts_declared_peers() {
        let units = vec![
            Unit::new("u1", true, 1.0),
            Unit::new("u2", false, 2.0).with_reference(vec!["u1".into()]),
            Unit::new("u3", true, 3.0),
        ];
        let units: Vec<Unit> = units
            .into_iter()
            .map(|u| if u.reference_set.is_none() { u.with_reference(vec![]) } else { u })
            .collect();
        let ds = GroupedDataset::new(vec![Group::new("g", units)]).unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Reference).unwrap();
        assert_eq!(t.n(), 1);
        assert_eq!(t.outcomes(&EffectiveAssignment::reference(false, 1)), &[2.0]);
        assert_eq!(t.outcomes(&EffectiveAssignment::reference(true, 0)), &[1.0, 3.0]);
    }

    #[test]
    fn pooled_bucket_weights_decompose() {
        let ds = GroupedDataset::new(vec![
            group("a", &[1, 0, 0], &[1.0, 0.2, 0.4]),
            group("b", &[1, 1, 0], &[0.3, 0.9, 0.8]),
            group("c", &[0, 0, 0], &[0.1, 0.7, 0.6]),
            group("d", &[0, 0, 0], &[0.5, 0.3, 0.2]),
            group("e", &[0, 1, 1], &[0.5, 0.3, 0.2]),
        ])
        .unwrap();
        let t = build_cell_table(&ds, AssignmentMode::Exchangeable).unwrap();
        let p = pooled_spillover(&t, false, &[1, 2]).unwrap();
        let theta = |s| t.mean(&ea(0, s)).unwrap() - t.mean(&ea(0, 0)).unwrap();
        let expected = p.weights[0] * theta(1) + p.weights[1] * theta(2);
        assert!((p.estimate.value - expected).abs() < 1e-12);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pooled_spillover(&t, false, &[]).is_err());
    }

    #[test]
    fn partial_population_requires_labels() {
        let ds = GroupedDataset::new(vec![group("a", &[1, 0, 0], &[1.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(partial_population_effect(&ds), Err(Error::MissingSaturation)));
        let ds = GroupedDataset::new(vec![
            group("a", &[1, 0, 0], &[1.0, 0.5, 0.7]).with_saturation(true),
            group("b", &[0, 0, 0], &[0.1, 0.2, 0.3]).with_saturation(false),
        ])
        .unwrap();
        let e = partial_population_effect(&ds).unwrap();
        assert!((e.value - (0.6 - 0.2)).abs() < 1e-12);
        assert_eq!(e.n_eff, vec![2, 3]);
    }

    #[test]
    fn difference_in_means_matches_arm_means() {
        let ds = GroupedDataset::new(vec![
            group("a", &[1, 0, 0], &[1.0, 0.5, 0.7]),
            group("b", &[1, 1, 0], &[0.4, 0.2, 0.3]),
        ])
        .unwrap();
        let e = difference_in_means(&ds, SeKind::Clustered).unwrap();
        assert!((e.value - (1.6 / 3.0 - 1.5 / 3.0)).abs() < 1e-12);
        let single = GroupedDataset::new(vec![group("a", &[0, 0], &[1.0, 0.5])]).unwrap();
        assert!(matches!(difference_in_means(&single, SeKind::Clustered), Err(Error::Undefined(_))));
    }

    #[test]
    fn lim_rejects_all_or_nothing_designs() {
        let ds = GroupedDataset::new(vec![
            group("a", &[1, 1, 1], &[1.0, 0.5, 0.7]),
            group("b", &[0, 0, 0], &[0.4, 0.2, 0.3]),
            group("c", &[1, 1, 1], &[0.9, 0.1, 0.3]),
        ])
        .unwrap();
        assert!(matches!(lim_fit(&ds, false, SeKind::Clustered), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn share_reduction_and_order() {
        assert_eq!(Share::new(2, 4), Share::new(1, 2));
        assert_eq!(Share::new(0, 3), Share::new(0, 5));
        assert!(Share::new(1, 3) < Share::new(1, 2));
        assert_eq!(Share::new(3, 6).to_string(), "1/2");
    }

    #[test]
    fn separate_policy_skips_singleton_strata() {
        let ds = GroupedDataset::new(vec![
            group("a", &[1, 0, 0], &[1.0, 0.5, 0.7]),
            group("b", &[0, 1, 0], &[0.4, 0.2, 0.3]),
            group("c", &[1, 0, 0, 1], &[0.9, 0.1, 0.3, 0.2]),
        ])
        .unwrap();
        match stratify_and_estimate(&ds, SizePolicy::Separate, AssignmentMode::Exchangeable, SeKind::Clustered).unwrap() {
            StratifiedEstimates::Separate { strata, skipped } => {
                assert_eq!(strata.keys().copied().collect::<Vec<_>>(), vec![3]);
                assert_eq!(strata[&3].table.len(), 6);
                assert_eq!(skipped.len(), 1);
                assert_eq!(skipped[0].size, 4);
            }
            _ => unreachable!(),
        }
    }
}
