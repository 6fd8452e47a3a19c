//! Seeded Monte Carlo harness: draw designs and outcomes, estimate a target
//! contrast, and summarise bias, variance, coverage and definedness.
//!
//! Replication `r` draws its data from stream `r` of the master seed and its
//! bootstrap weights from a seed derived from `(master, r)`, so results do not
//! depend on the number of worker threads and adding replications leaves the
//! earlier ones unchanged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CellTable, CellTableBuilder, Contrast};
use crate::inference::{normal_ci, BootstrapSpec, CiMethod, WildBootstrap};
use crate::mechanism::AssignmentMechanism;
use crate::model::{
    bits_to_index, AssignmentMode, EffectiveAssignment, Group, GroupedDataset, OutcomeModel, Peers, Unit,
};
use crate::oracle::population_mean;
use crate::rng::{derive_seed, stream_rng};

const BOOTSTRAP_TAG: u64 = 0xB007;

/// Contrast targeted by a study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Target {
    /// `theta_s(own)`; `treated = None` means all `n` neighbors treated.
    Spillover { own: bool, treated: Option<usize> },
    /// `tau_s`.
    Direct { treated: usize },
}

impl Default for Target {
    fn default() -> Self {
        Self::Spillover { own: false, treated: None }
    }
}

impl Target {
    pub fn contrast(&self, n: usize, mode: AssignmentMode) -> Result<Contrast> {
        let s = match *self {
            Self::Spillover { treated, .. } => treated.unwrap_or(n),
            Self::Direct { treated } => treated,
        };
        if s > n {
            return Err(Error::InvalidParameter(format!("target count {s} exceeds n = {n}")));
        }
        let peers = match mode {
            AssignmentMode::Exchangeable => Peers::Count(s),
            AssignmentMode::Saturated if s == 0 || s == n => Peers::Vector(vec![s == n; n]),
            AssignmentMode::Saturated => {
                return Err(Error::Unsupported(format!(
                    "a count of {s} treated neighbors names several saturated cells"
                )))
            }
            AssignmentMode::Reference => return Err(Error::Unsupported("simulation in reference mode".into())),
        };
        Ok(match *self {
            Self::Spillover { own, .. } => Contrast::spillover(own, peers),
            Self::Direct { .. } => Contrast::direct(peers),
        })
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Spillover { own, treated: None } => write!(f, "theta:d={}", u8::from(*own)),
            Self::Spillover { own, treated: Some(s) } => write!(f, "theta:d={},s={s}", u8::from(*own)),
            Self::Direct { treated } => write!(f, "tau:s={treated}"),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    /// `theta:d=0` (all neighbors treated), `theta:d=1,s=2`, `tau:s=0`.
    fn from_str(text: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("cannot parse target '{text}' (expected theta:d=0[,s=k] or tau:s=k)"));
        let (kind, rest) = text.trim().split_once(':').unwrap_or((text.trim(), ""));
        let mut own = None;
        let mut s = None;
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            match k.trim() {
                "d" => own = Some(match v.trim() {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                }),
                "s" => s = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        match kind {
            "theta" => Ok(Self::Spillover {
                own: own.unwrap_or(false),
                treated: s,
            }),
            "tau" if own.is_none() => Ok(Self::Direct { treated: s.unwrap_or(0) }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub groups: usize,
    pub n: usize,
    pub mechanism: AssignmentMechanism,
    pub model: OutcomeModel,
    pub target: Target,
    pub mode: AssignmentMode,
    pub replications: usize,
    pub bootstrap: Option<BootstrapSpec>,
    pub seed: u64,
    pub level: f64,
}

impl StudyConfig {
    pub fn new(groups: usize, n: usize, mechanism: AssignmentMechanism, model: OutcomeModel) -> Self {
        Self {
            groups,
            n,
            mechanism,
            model,
            target: Target::default(),
            mode: AssignmentMode::Exchangeable,
            replications: 10_000,
            bootstrap: None,
            seed: 0,
            level: 0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::InvalidParameter("need at least one replication".into()));
        }
        if self.groups < 2 {
            return Err(Error::InvalidParameter(format!("need G >= 2 groups, got {}", self.groups)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter(format!("level must lie in (0,1), got {}", self.level)));
        }
        if let Some(b) = &self.bootstrap {
            b.validate()?;
        }
        self.model.validate(self.n)?;
        self.mechanism.pi_min(self.n, AssignmentMode::Exchangeable)?;
        self.contrast()?;
        Ok(())
    }

    pub fn contrast(&self) -> Result<Contrast> {
        self.target.contrast(self.n, self.mode)
    }

    /// Population value of the target contrast.
    pub fn truth(&self) -> Result<f64> {
        self.contrast()?
            .terms()
            .iter()
            .map(|(a, c)| Ok(c * population_mean(&self.model, &self.mechanism, self.n, a)?))
            .sum()
    }
}

fn exchangeable_means(model: &OutcomeModel, n: usize) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * (n + 1));
    for d in [false, true] {
        for s in 0..=n {
            out.push(model.exchangeable_mean(d, s, n)?);
        }
    }
    Some(out)
}

/// Draw `groups` groups and their outcomes, calling `visit` once per unit
/// with `(group, unit, treatments, saturation, outcome)`.
fn draw_units<R, F>(mech: &AssignmentMechanism, model: &OutcomeModel, n: usize, groups: usize, rng: &mut R, mut visit: F)
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize, &[bool], Option<bool>, f64),
{
    let cached = exchangeable_means(model, n);
    let mut peers = vec![false; n];
    for g in 0..groups {
        let draw = mech.draw_group(n, rng);
        let t = &draw.treatments;
        let total = t.iter().filter(|&&x| x).count();
        for i in 0..=n {
            let own = t[i];
            let mean = match &cached {
                Some(table) => table[usize::from(own) * (n + 1) + total - usize::from(own)],
                None => {
                    let mut k = 0;
                    for (j, &x) in t.iter().enumerate() {
                        if j != i {
                            peers[k] = x;
                            k += 1;
                        }
                    }
                    model.mean(own, &peers)
                }
            };
            let y = model.sample(mean, rng);
            visit(g, i, t, draw.saturation, y);
        }
    }
}

fn observed_index(i: usize, t: &[bool], n: usize, mode: AssignmentMode) -> usize {
    let own = usize::from(t[i]);
    match mode {
        AssignmentMode::Saturated => {
            let bits: Vec<bool> = t.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &x)| x).collect();
            (own << n) | bits_to_index(&bits)
        }
        _ => {
            let total = t.iter().filter(|&&x| x).count();
            own * (n + 1) + total - own
        }
    }
}

/// Draw one replication's cell table. Neighbors are ordered by unit index.
pub fn simulate_table(cfg: &StudyConfig, index: u64) -> Result<CellTable> {
    let mut rng = stream_rng(cfg.seed, index);
    let mut builder = CellTableBuilder::new(cfg.n, cfg.mode)?;
    let (n, mode) = (cfg.n, cfg.mode);
    draw_units(&cfg.mechanism, &cfg.model, n, cfg.groups, &mut rng, |g, i, t, _, y| {
        builder.push_index(observed_index(i, t, n, mode), y, g);
    });
    Ok(builder.finish())
}

/// A simulated dataset with ids `g<k>` / `g<k>-u<j>`, neighbor ranks in unit
/// order, and saturation labels when the design has them.
pub fn simulate_dataset(
    mech: &AssignmentMechanism,
    model: &OutcomeModel,
    n: usize,
    groups: usize,
    seed: u64,
) -> Result<GroupedDataset> {
    if n < 1 {
        return Err(Error::InvalidGroupSize(n));
    }
    model.validate(n)?;
    let mut rng = stream_rng(seed, 0);
    let mut out: Vec<Group> = Vec::with_capacity(groups);
    draw_units(mech, model, n, groups, &mut rng, |g, i, t, sat, y| {
        if i == 0 {
            let mut group = Group::new(format!("g{g}"), Vec::with_capacity(n + 1));
            group.saturation = sat;
            out.push(group);
        }
        out[g]
            .units
            .push(Unit::new(format!("g{g}-u{i}"), t[i], y).with_rank(i as u32 + 1));
    });
    GroupedDataset::new(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationOutcome {
    pub index: u64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub covered_normal: Option<bool>,
    pub covered_bootstrap: Option<bool>,
    /// Observations in each contrasted cell.
    pub counts: Vec<usize>,
}

impl ReplicationOutcome {
    pub fn defined(&self) -> bool {
        self.estimate.is_some()
    }
}

fn replicate(cfg: &StudyConfig, contrast: &Contrast, truth: f64, index: u64) -> Result<ReplicationOutcome> {
    let table = simulate_table(cfg, index)?;
    let counts = contrast.terms().iter().map(|(a, _)| table.count(a)).collect();
    let est = match contrast.evaluate(&table) {
        Ok(e) => e,
        Err(_) => {
            return Ok(ReplicationOutcome {
                index,
                estimate: None,
                se: None,
                covered_normal: None,
                covered_bootstrap: None,
                counts,
            })
        }
    };
    let covered_normal = Some(normal_ci(&est, cfg.level)?.contains(truth));
    let covered_bootstrap = match &cfg.bootstrap {
        Some(spec) => {
            let spec = BootstrapSpec {
                seed: derive_seed(cfg.seed, BOOTSTRAP_TAG, index),
                ..*spec
            };
            let wb = WildBootstrap::new(&table, contrast)?;
            Some(wb.run(&spec, cfg.level)?.interval.contains(truth))
        }
        None => None,
    };
    Ok(ReplicationOutcome {
        index,
        estimate: Some(est.value),
        se: Some(est.se),
        covered_normal,
        covered_bootstrap,
        counts,
    })
}

/// One replication of the study.
pub fn run_replication(cfg: &StudyConfig, index: u64) -> Result<ReplicationOutcome> {
    cfg.validate()?;
    replicate(cfg, &cfg.contrast()?, cfg.truth()?, index)
}

/// All replications, computed in parallel and returned in index order.
pub fn run_replications(cfg: &StudyConfig) -> Result<Vec<ReplicationOutcome>> {
    cfg.validate()?;
    let contrast = cfg.contrast()?;
    let truth = cfg.truth()?;
    (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| replicate(cfg, &contrast, truth, r))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellCount {
    pub assignment: String,
    /// Mean over all replications.
    pub mean: f64,
    /// `G (n+1) pi(a)`.
    pub expected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudySummary {
    pub mechanism: String,
    pub model: String,
    pub target: String,
    pub mode: AssignmentMode,
    pub groups: usize,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub level: f64,
    pub truth: f64,
    /// `log|A_n| / (G pi_min^2)` for the design.
    pub condition_value: f64,
    pub min_expected_cell: f64,
    pub defined: usize,
    pub prop_undefined: f64,
    /// Conditional on the estimate being defined.
    pub bias: Option<f64>,
    pub bias_se: Option<f64>,
    pub variance: Option<f64>,
    pub coverage_normal: Option<f64>,
    pub coverage_bootstrap: Option<f64>,
    pub bootstrap_replications: Option<usize>,
    pub ci_method: Option<CiMethod>,
    pub cells: Vec<CellCount>,
}

/// Aggregate replication outcomes, in index order, into a summary.
pub fn summarize(cfg: &StudyConfig, outcomes: &[ReplicationOutcome]) -> Result<StudySummary> {
    let contrast = cfg.contrast()?;
    let truth = cfg.truth()?;
    let rates = cfg.mechanism.rate_diagnostics(cfg.n, cfg.groups, cfg.mode)?;
    let estimates: Vec<f64> = outcomes.iter().filter_map(|o| o.estimate).collect();
    let defined = estimates.len();
    let total = outcomes.len();
    let (bias, variance, bias_se) = if defined > 0 {
        let mean = estimates.iter().sum::<f64>() / defined as f64;
        let var = (defined > 1).then(|| estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (defined - 1) as f64);
        let se = var.map(|v| (v / defined as f64).sqrt());
        (Some(mean - truth), var, se)
    } else {
        (None, None, None)
    };
    let rate = |flags: Vec<bool>| -> Option<f64> {
        (!flags.is_empty()).then(|| flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64)
    };
    let coverage_normal = rate(outcomes.iter().filter_map(|o| o.covered_normal).collect());
    let coverage_bootstrap = rate(outcomes.iter().filter_map(|o| o.covered_bootstrap).collect());
    let units = (cfg.groups * (cfg.n + 1)) as f64;
    let cells = contrast
        .terms()
        .iter()
        .enumerate()
        .map(|(k, (a, _))| {
            let mean = outcomes.iter().map(|o| o.counts[k] as f64).sum::<f64>() / total.max(1) as f64;
            Ok(CellCount {
                assignment: a.to_string(),
                mean,
                expected: units * cfg.mechanism.pi(cfg.n, a)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StudySummary {
        mechanism: cfg.mechanism.name(),
        model: cfg.model.label().to_string(),
        target: cfg.target.to_string(),
        mode: cfg.mode,
        groups: cfg.groups,
        n: cfg.n,
        replications: total,
        seed: cfg.seed,
        level: cfg.level,
        truth,
        condition_value: rates.condition9,
        min_expected_cell: rates.min_expected_cell,
        defined,
        prop_undefined: if total == 0 { 1.0 } else { 1.0 - defined as f64 / total as f64 },
        bias,
        bias_se,
        variance,
        coverage_normal,
        coverage_bootstrap,
        bootstrap_replications: cfg.bootstrap.map(|b| b.replications),
        ci_method: cfg.bootstrap.map(|b| b.method),
        cells,
    })
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudySummary> {
    let outcomes = run_replications(cfg)?;
    summarize(cfg, &outcomes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiKind {
    Normal,
    Bootstrap,
}

impl fmt::Display for CiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Bootstrap => "bootstrap",
        })
    }
}

/// One point of a coverage curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRecord {
    pub groups: usize,
    pub n: usize,
    pub mechanism: String,
    pub ci_kind: CiKind,
    /// `None` when no replication was defined.
    pub coverage: Option<f64>,
    pub defined: usize,
    pub prop_undefined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageCurve {
    pub records: Vec<CoverageRecord>,
    pub studies: Vec<StudySummary>,
}

/// Run `base` over every `(mechanism, n)` pair, in that nesting order, and
/// collect normal and (when configured) bootstrap coverage.
pub fn coverage_curve(base: &StudyConfig, ns: &[usize], mechs: &[AssignmentMechanism]) -> Result<CoverageCurve> {
    if ns.is_empty() || mechs.is_empty() {
        return Err(Error::InvalidParameter("coverage grid is empty".into()));
    }
    let mut records = Vec::new();
    let mut studies = Vec::new();
    for mech in mechs {
        for &n in ns {
            let cfg = StudyConfig {
                n,
                mechanism: mech.clone(),
                ..base.clone()
            };
            let s = run_study(&cfg)?;
            let mut kinds = vec![(CiKind::Normal, s.coverage_normal)];
            if base.bootstrap.is_some() {
                kinds.push((CiKind::Bootstrap, s.coverage_bootstrap));
            }
            for (ci_kind, coverage) in kinds {
                records.push(CoverageRecord {
                    groups: s.groups,
                    n,
                    mechanism: s.mechanism.clone(),
                    ci_kind,
                    coverage,
                    defined: s.defined,
                    prop_undefined: s.prop_undefined,
                });
            }
            studies.push(s);
        }
    }
    Ok(CoverageCurve { records, studies })
}

/// Cell assignment of a unit drawn by the harness; exposed for fixtures.
pub fn harness_assignment(i: usize, treatments: &[bool], mode: AssignmentMode) -> EffectiveAssignment {
    let n = treatments.len() - 1;
    EffectiveAssignment::from_index(observed_index(i, treatments, n, mode), n, mode)
}
