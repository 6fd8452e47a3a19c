//! Domain types: effective assignments, grouped datasets, outcome models and
//! effect vectors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the treatment of a unit's peers is summarised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// Number of treated peers.
    Exchangeable,
    /// Full treatment vector of the peers, ordered by neighbor rank.
    Saturated,
    /// Number of treated peers inside the unit's declared reference set.
    Reference,
}

impl fmt::Display for AssignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssignmentMode::Exchangeable => "exchangeable",
            AssignmentMode::Saturated => "saturated",
            AssignmentMode::Reference => "reference",
        })
    }
}

impl FromStr for AssignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exchangeable" => Ok(AssignmentMode::Exchangeable),
            "saturated" => Ok(AssignmentMode::Saturated),
            "reference" => Ok(AssignmentMode::Reference),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode '{other}' (expected exchangeable, saturated or reference)"
            ))),
        }
    }
}

/// Peer component of an effective assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Peers {
    Count(usize),
    /// Treatment of each neighbor, first-ranked neighbor first.
    Vector(Vec<bool>),
    RefCount(usize),
}

/// A point of the assignment set: own treatment plus peer summary.
///
/// The derived ordering is the canonical one used everywhere (own treatment
/// first, then count or lexicographic bits).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EffectiveAssignment {
    pub own: bool,
    pub peers: Peers,
}

impl EffectiveAssignment {
    pub fn count(own: bool, treated_peers: usize) -> Self {
        Self {
            own,
            peers: Peers::Count(treated_peers),
        }
    }

    pub fn vector(own: bool, bits: Vec<bool>) -> Self {
        Self {
            own,
            peers: Peers::Vector(bits),
        }
    }

    pub fn reference(own: bool, treated_peers: usize) -> Self {
        Self {
            own,
            peers: Peers::RefCount(treated_peers),
        }
    }

    /// Number of treated peers (popcount for vectors).
    pub fn treated_peers(&self) -> usize {
        match &self.peers {
            Peers::Count(s) | Peers::RefCount(s) => *s,
            Peers::Vector(bits) => bits.iter().filter(|&&b| b).count(),
        }
    }

    /// Collapse to the exchangeable count representation.
    pub fn to_count(&self) -> Self {
        Self::count(self.own, self.treated_peers())
    }

    pub fn mode(&self) -> AssignmentMode {
        match self.peers {
            Peers::Count(_) => AssignmentMode::Exchangeable,
            Peers::Vector(_) => AssignmentMode::Saturated,
            Peers::RefCount(_) => AssignmentMode::Reference,
        }
    }

    /// Position of this assignment in [`enumerate_assignments`]`(n, mode)`.
    pub fn index(&self, n: usize) -> Option<usize> {
        let d = usize::from(self.own);
        match &self.peers {
            Peers::Count(s) | Peers::RefCount(s) => (*s <= n).then(|| d * (n + 1) + s),
            Peers::Vector(bits) => {
                (bits.len() == n).then(|| (d << n) | bits_to_index(bits))
            }
        }
    }

    /// Inverse of [`EffectiveAssignment::index`].
    pub fn from_index(index: usize, n: usize, mode: AssignmentMode) -> Self {
        match mode {
            AssignmentMode::Exchangeable => Self::count(index / (n + 1) == 1, index % (n + 1)),
            AssignmentMode::Reference => Self::reference(index / (n + 1) == 1, index % (n + 1)),
            AssignmentMode::Saturated => {
                let own = (index >> n) & 1 == 1;
                Self::vector(own, index_to_bits(index & ((1 << n) - 1), n))
            }
        }
    }
}

impl fmt::Display for EffectiveAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = u8::from(self.own);
        match &self.peers {
            Peers::Count(s) => write!(f, "({d},{s})"),
            Peers::RefCount(s) => write!(f, "({d},R{s})"),
            Peers::Vector(bits) => {
                let b: String = bits.iter().map(|&x| if x { '1' } else { '0' }).collect();
                write!(f, "({d},[{b}])")
            }
        }
    }
}

/// Most significant bit is the first-ranked neighbor.
pub(crate) fn bits_to_index(bits: &[bool]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | usize::from(b))
}

pub(crate) fn index_to_bits(index: usize, n: usize) -> Vec<bool> {
    (0..n).map(|j| (index >> (n - 1 - j)) & 1 == 1).collect()
}

/// Number of cells in the assignment set for `n` neighbors.
pub fn assignment_count(n: usize, mode: AssignmentMode) -> usize {
    match mode {
        AssignmentMode::Exchangeable | AssignmentMode::Reference => 2 * (n + 1),
        AssignmentMode::Saturated => 1 << (n + 1),
    }
}

/// Enumerate the set of effective assignments in canonical order.
///
/// Exchangeable (and reference) mode yields `2(n+1)` points ordered by own
/// treatment then count; saturated mode yields `2^(n+1)` points in
/// lexicographic bit order. In reference mode `n` is the reference-set size.
pub fn enumerate_assignments(n: usize, mode: AssignmentMode) -> Result<Vec<EffectiveAssignment>> {
    if n < 1 {
        return Err(Error::InvalidGroupSize(n));
    }
    if mode == AssignmentMode::Saturated && n >= usize::BITS as usize - 1 {
        return Err(Error::EnumerationTooLarge { n, cap: usize::BITS as usize - 2 });
    }
    Ok((0..assignment_count(n, mode))
        .map(|i| EffectiveAssignment::from_index(i, n, mode))
        .collect())
}

/// Observed effective assignment of unit `unit` given its group's treatments.
///
/// `ranks` orders the group's units (any distinct integers, ascending = first
/// neighbor) and is required in saturated mode. `reference` lists the indices
/// of the units that can affect `unit`, required in reference mode.
pub fn observed_assignment(
    unit: usize,
    treatments: &[bool],
    mode: AssignmentMode,
    ranks: Option<&[u32]>,
    reference: Option<&[usize]>,
) -> Result<EffectiveAssignment> {
    if unit >= treatments.len() {
        return Err(Error::InvalidParameter(format!(
            "unit index {unit} outside group of size {}",
            treatments.len()
        )));
    }
    let own = treatments[unit];
    match mode {
        AssignmentMode::Exchangeable => {
            let total = treatments.iter().filter(|&&d| d).count();
            Ok(EffectiveAssignment::count(own, total - usize::from(own)))
        }
        AssignmentMode::Saturated => {
            let ranks = ranks.ok_or_else(|| Error::MissingOrdering {
                group: String::from("<unnamed>"),
            })?;
            if ranks.len() != treatments.len() {
                return Err(Error::InvalidParameter(
                    "neighbor ranks must cover every unit of the group".into(),
                ));
            }
            let mut others: Vec<usize> = (0..treatments.len()).filter(|&j| j != unit).collect();
            others.sort_by_key(|&j| ranks[j]);
            Ok(EffectiveAssignment::vector(
                own,
                others.into_iter().map(|j| treatments[j]).collect(),
            ))
        }
        AssignmentMode::Reference => {
            let reference = reference.ok_or_else(|| Error::MissingReferenceSet {
                group: String::from("<unnamed>"),
                unit: unit.to_string(),
            })?;
            let mut s = 0;
            for &j in reference {
                if j >= treatments.len() || j == unit {
                    return Err(Error::InvalidParameter(format!(
                        "reference index {j} invalid for unit {unit}"
                    )));
                }
                s += usize::from(treatments[j]);
            }
            Ok(EffectiveAssignment::reference(own, s))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub treatment: bool,
    pub outcome: f64,
    pub neighbor_rank: Option<u32>,
    pub reference_set: Option<Vec<String>>,
}

impl Unit {
    pub fn new(id: impl Into<String>, treatment: bool, outcome: f64) -> Self {
        Self {
            id: id.into(),
            treatment,
            outcome,
            neighbor_rank: None,
            reference_set: None,
        }
    }

    pub fn with_rank(mut self, rank: u32) -> Self {
        self.neighbor_rank = Some(rank);
        self
    }

    pub fn with_reference(mut self, ids: Vec<String>) -> Self {
        self.reference_set = Some(ids);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    /// Group-level saturation label `T_g` of partial-population designs.
    pub saturation: Option<bool>,
    pub units: Vec<Unit>,
}

impl Group {
    pub fn new(id: impl Into<String>, units: Vec<Unit>) -> Self {
        Self {
            id: id.into(),
            saturation: None,
            units,
        }
    }

    pub fn with_saturation(mut self, t: bool) -> Self {
        self.saturation = Some(t);
        self
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }

    /// Number of neighbors of each unit.
    pub fn neighbors(&self) -> usize {
        self.units.len().saturating_sub(1)
    }

    pub fn treatments(&self) -> Vec<bool> {
        self.units.iter().map(|u| u.treatment).collect()
    }

    pub fn ranks(&self) -> Option<Vec<u32>> {
        self.units.iter().map(|u| u.neighbor_rank).collect()
    }

    pub fn has_ranks(&self) -> bool {
        self.units.iter().all(|u| u.neighbor_rank.is_some())
    }

    fn reference_indices(&self, unit: usize) -> Option<Vec<usize>> {
        let ids = self.units[unit].reference_set.as_ref()?;
        Some(
            ids.iter()
                .filter_map(|id| self.units.iter().position(|u| &u.id == id))
                .collect(),
        )
    }

    /// Largest declared reference-set size in the group, if any unit has one.
    pub fn max_reference_size(&self) -> Option<usize> {
        self.units
            .iter()
            .filter_map(|u| u.reference_set.as_ref().map(Vec::len))
            .max()
    }

    pub fn observed_assignment(&self, unit: usize, mode: AssignmentMode) -> Result<EffectiveAssignment> {
        let treatments = self.treatments();
        let ranks = self.ranks();
        let reference = self.reference_indices(unit);
        if mode == AssignmentMode::Saturated && ranks.is_none() {
            return Err(Error::MissingOrdering {
                group: self.id.clone(),
            });
        }
        if mode == AssignmentMode::Reference && reference.is_none() {
            return Err(Error::MissingReferenceSet {
                group: self.id.clone(),
                unit: self.units[unit].id.clone(),
            });
        }
        observed_assignment(unit, &treatments, mode, ranks.as_deref(), reference.as_deref())
    }

    fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::Dataset(format!("group {} has no units", self.id)));
        }
        let mut ids = HashSet::new();
        for u in &self.units {
            if !ids.insert(u.id.as_str()) {
                return Err(Error::Dataset(format!(
                    "duplicate unit id '{}' in group {}",
                    u.id, self.id
                )));
            }
            if !u.outcome.is_finite() {
                return Err(Error::Dataset(format!(
                    "non-finite outcome for unit {} in group {}",
                    u.id, self.id
                )));
            }
        }
        let ranked = self.units.iter().filter(|u| u.neighbor_rank.is_some()).count();
        if ranked > 0 {
            if ranked != self.units.len() {
                return Err(Error::Dataset(format!(
                    "group {}: neighbor_rank present for some units only",
                    self.id
                )));
            }
            let mut ranks: Vec<u32> = self.units.iter().filter_map(|u| u.neighbor_rank).collect();
            ranks.sort_unstable();
            if ranks.iter().enumerate().any(|(i, &r)| r as usize != i + 1) {
                return Err(Error::Dataset(format!(
                    "group {}: neighbor_rank must be a permutation of 1..{}",
                    self.id,
                    self.units.len()
                )));
            }
        }
        for u in &self.units {
            if let Some(refs) = &u.reference_set {
                let mut seen = HashSet::new();
                for r in refs {
                    if r == &u.id {
                        return Err(Error::Dataset(format!(
                            "unit {} lists itself in its reference set",
                            u.id
                        )));
                    }
                    if !ids.contains(r.as_str()) {
                        return Err(Error::Dataset(format!(
                            "reference '{}' of unit {} is not in group {}",
                            r, u.id, self.id
                        )));
                    }
                    if !seen.insert(r.as_str()) {
                        return Err(Error::Dataset(format!(
                            "duplicate reference '{}' for unit {}",
                            r, u.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Units nested in groups. Construction validates the identity and ordering
/// invariants; the contents are immutable afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    groups: Vec<Group>,
}

impl GroupedDataset {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        let mut ids = HashSet::new();
        for g in &groups {
            if !ids.insert(g.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate group id '{}'", g.id)));
            }
            g.validate()?;
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn into_groups(self) -> Vec<Group> {
        self.groups
    }

    pub fn unit_count(&self) -> usize {
        self.groups.iter().map(Group::size).sum()
    }

    /// Number of groups of each size (units per group).
    pub fn size_summary(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for g in &self.groups {
            *out.entry(g.size()).or_insert(0) += 1;
        }
        out
    }

    /// Common group size, if all groups share one.
    pub fn uniform_size(&self) -> Option<usize> {
        let mut sizes = self.groups.iter().map(Group::size);
        let first = sizes.next()?;
        sizes.all(|s| s == first).then_some(first)
    }

    /// Common number of neighbors, or a stratification error.
    pub fn neighbors(&self) -> Result<usize> {
        match self.uniform_size() {
            Some(size) if size >= 2 => Ok(size - 1),
            Some(size) => Err(Error::InvalidGroupSize(size.saturating_sub(1))),
            None if self.groups.is_empty() => Err(Error::Dataset("dataset has no groups".into())),
            None => Err(Error::StratificationRequired {
                sizes: self.size_summary().into_keys().collect(),
            }),
        }
    }

    /// Split into one dataset per group size, keyed by size.
    pub fn strata(&self) -> BTreeMap<usize, GroupedDataset> {
        let mut map: BTreeMap<usize, Vec<Group>> = BTreeMap::new();
        for g in &self.groups {
            map.entry(g.size()).or_default().push(g.clone());
        }
        map.into_iter()
            .map(|(k, groups)| (k, GroupedDataset { groups }))
            .collect()
    }

    pub fn has_saturation(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.saturation.is_some())
    }

    pub fn has_ranks(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(Group::has_ranks)
    }
}

type ExchangeableMean = Arc<dyn Fn(bool, usize, usize) -> f64 + Send + Sync>;
type SaturatedMean = Arc<dyn Fn(bool, &[bool]) -> f64 + Send + Sync>;

/// Mean potential outcome as a function of the assignment.
#[derive(Clone)]
pub enum MeanFunction {
    /// `(own, treated peers, n) -> mean`.
    Exchangeable(ExchangeableMean),
    /// `(own, neighbor vector) -> mean`.
    Saturated(SaturatedMean),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    /// Outcome is 0/1 with success probability equal to the mean.
    Bernoulli,
    /// Mean plus Gaussian noise; `sd = 0` is a point mass.
    Gaussian { sd: f64 },
}

/// Parametric mean families that can be named in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelSpec {
    /// `base + direct*d + (1-d)*spill_control*1(s>0) + d*spill_treated*1(s>0)`.
    Threshold {
        base: f64,
        direct: f64,
        spill_control: f64,
        spill_treated: f64,
    },
    /// `base + direct*d + (1-d)*slope_control*s + d*slope_treated*s`.
    Linear {
        base: f64,
        direct: f64,
        slope_control: f64,
        slope_treated: f64,
    },
    /// `base + direct*d + sum_j weights[j]*d_j`, neighbor `j` in rank order.
    /// Not exchangeable unless all weights are equal.
    Positional {
        base: f64,
        direct: f64,
        weights: Vec<f64>,
    },
}

impl ModelSpec {
    /// The binary-outcome DGP used throughout the simulation study:
    /// `0.75 + 0.13 d + 0.12 (1-d) 1(s>0)`.
    pub fn control_spillover() -> Self {
        ModelSpec::Threshold {
            base: 0.75,
            direct: 0.13,
            spill_control: 0.12,
            spill_treated: 0.0,
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Threshold {
                base,
                direct,
                spill_control,
                spill_treated,
            } => write!(
                f,
                "threshold:base={base},direct={direct},spill0={spill_control},spill1={spill_treated}"
            ),
            ModelSpec::Linear {
                base,
                direct,
                slope_control,
                slope_treated,
            } => write!(
                f,
                "linear:base={base},direct={direct},slope0={slope_control},slope1={slope_treated}"
            ),
            ModelSpec::Positional {
                base,
                direct,
                weights,
            } => {
                let w: Vec<String> = weights.iter().map(ToString::to_string).collect();
                write!(f, "positional:base={base},direct={direct},w={}", w.join("/"))
            }
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// Grammar: `threshold:base=..,direct=..,spill0=..,spill1=..`,
    /// `linear:base=..,direct=..,slope0=..,slope1=..`,
    /// `positional:base=..,direct=..,w=a/b/c`. Missing keys default to 0.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (family, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv: HashMap<String, String> = HashMap::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::InvalidParameter(format!("expected key=value in model spec, got '{part}'"))
            })?;
            kv.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
        let num = |key: &str| -> Result<f64> {
            kv.get(key).map_or(Ok(0.0), |v| {
                v.parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("model key {key}: bad number '{v}'")))
            })
        };
        let allowed: &[&str] = match family.to_ascii_lowercase().as_str() {
            "threshold" => &["base", "direct", "spill0", "spill1"],
            "linear" => &["base", "direct", "slope0", "slope1"],
            "positional" => &["base", "direct", "w"],
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown model family '{other}' (expected threshold, linear or positional)"
                )))
            }
        };
        if let Some(bad) = kv.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::InvalidParameter(format!("unknown model key '{bad}'")));
        }
        Ok(match family.to_ascii_lowercase().as_str() {
            "threshold" => ModelSpec::Threshold {
                base: num("base")?,
                direct: num("direct")?,
                spill_control: num("spill0")?,
                spill_treated: num("spill1")?,
            },
            "linear" => ModelSpec::Linear {
                base: num("base")?,
                direct: num("direct")?,
                slope_control: num("slope0")?,
                slope_treated: num("slope1")?,
            },
            _ => {
                let weights = kv
                    .get("w")
                    .map(|w| {
                        w.split('/')
                            .map(|x| {
                                x.trim().parse::<f64>().map_err(|_| {
                                    Error::InvalidParameter(format!("bad positional weight '{x}'"))
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .transpose()?
                    .unwrap_or_default();
                ModelSpec::Positional {
                    base: num("base")?,
                    direct: num("direct")?,
                    weights,
                }
            }
        })
    }
}

/// Simulation data-generating process: a mean function plus a noise law.
#[derive(Clone)]
pub struct OutcomeModel {
    mean: MeanFunction,
    noise: Noise,
    label: String,
}

impl fmt::Debug for OutcomeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OutcomeModel")
            .field("label", &self.label)
            .field("noise", &self.noise)
            .field("exchangeable", &self.is_exchangeable())
            .finish()
    }
}

impl OutcomeModel {
    pub fn new(mean: MeanFunction, noise: Noise, label: impl Into<String>) -> Self {
        Self {
            mean,
            noise,
            label: label.into(),
        }
    }

    pub fn exchangeable<F>(f: F, noise: Noise) -> Self
    where
        F: Fn(bool, usize, usize) -> f64 + Send + Sync + 'static,
    {
        Self::new(MeanFunction::Exchangeable(Arc::new(f)), noise, "custom")
    }

    pub fn saturated<F>(f: F, noise: Noise) -> Self
    where
        F: Fn(bool, &[bool]) -> f64 + Send + Sync + 'static,
    {
        Self::new(MeanFunction::Saturated(Arc::new(f)), noise, "custom-saturated")
    }

    pub fn from_spec(spec: &ModelSpec, noise: Noise) -> Self {
        let label = spec.to_string();
        let mean = match spec.clone() {
            ModelSpec::Threshold {
                base,
                direct,
                spill_control,
                spill_treated,
            } => MeanFunction::Exchangeable(Arc::new(move |d, s, _n| {
                let any = if s > 0 { 1.0 } else { 0.0 };
                if d {
                    base + direct + spill_treated * any
                } else {
                    base + spill_control * any
                }
            })),
            ModelSpec::Linear {
                base,
                direct,
                slope_control,
                slope_treated,
            } => MeanFunction::Exchangeable(Arc::new(move |d, s, _n| {
                if d {
                    base + direct + slope_treated * s as f64
                } else {
                    base + slope_control * s as f64
                }
            })),
            ModelSpec::Positional {
                base,
                direct,
                weights,
            } => MeanFunction::Saturated(Arc::new(move |d, bits| {
                let peer: f64 = bits
                    .iter()
                    .zip(weights.iter().chain(std::iter::repeat(&0.0)))
                    .map(|(&b, w)| if b { *w } else { 0.0 })
                    .sum();
                base + if d { direct } else { 0.0 } + peer
            })),
        };
        Self::new(mean, noise, label)
    }

    /// The simulation-study DGP with Bernoulli outcomes.
    pub fn control_spillover() -> Self {
        Self::from_spec(&ModelSpec::control_spillover(), Noise::Bernoulli)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn noise(&self) -> Noise {
        self.noise
    }

    pub fn with_noise(mut self, noise: Noise) -> Self {
        self.noise = noise;
        self
    }

    pub fn is_exchangeable(&self) -> bool {
        matches!(self.mean, MeanFunction::Exchangeable(_))
    }

    /// Mean potential outcome at own treatment `own` and neighbor vector `peers`.
    pub fn mean(&self, own: bool, peers: &[bool]) -> f64 {
        match &self.mean {
            MeanFunction::Exchangeable(f) => {
                f(own, peers.iter().filter(|&&b| b).count(), peers.len())
            }
            MeanFunction::Saturated(f) => f(own, peers),
        }
    }

    /// `mu(d, s)` for exchangeable models; `None` otherwise.
    pub fn exchangeable_mean(&self, own: bool, treated: usize, n: usize) -> Option<f64> {
        match &self.mean {
            MeanFunction::Exchangeable(f) => Some(f(own, treated, n)),
            MeanFunction::Saturated(_) => None,
        }
    }

    /// Draw an outcome for the given assignment.
    pub fn sample<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        match self.noise {
            Noise::Bernoulli => {
                if rng.random_bool(mean.clamp(0.0, 1.0)) {
                    1.0
                } else {
                    0.0
                }
            }
            Noise::Gaussian { sd } => {
                if sd == 0.0 {
                    mean
                } else {
                    let z: f64 = rng.sample(StandardNormal);
                    mean + sd * z
                }
            }
        }
    }

    /// Check that the mean is defined (finite) on every assignment for `n`
    /// neighbors, and within `[0, 1]` under Bernoulli noise.
    pub fn validate(&self, n: usize) -> Result<()> {
        if let Noise::Gaussian { sd } = self.noise {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::InvalidParameter(format!("gaussian sd must be >= 0, got {sd}")));
            }
        }
        let check = |d: bool, label: String, mu: f64| -> Result<()> {
            if !mu.is_finite() {
                return Err(Error::InvalidParameter(format!("mean undefined at {label}")));
            }
            if self.noise == Noise::Bernoulli && !(0.0..=1.0).contains(&mu) {
                return Err(Error::InvalidParameter(format!(
                    "bernoulli mean {mu} outside [0,1] at {label} (d = {})",
                    u8::from(d)
                )));
            }
            Ok(())
        };
        match &self.mean {
            MeanFunction::Exchangeable(f) => {
                for a in enumerate_assignments(n, AssignmentMode::Exchangeable)? {
                    check(a.own, a.to_string(), f(a.own, a.treated_peers(), n))?;
                }
            }
            MeanFunction::Saturated(f) => {
                if n > 20 {
                    return Err(Error::EnumerationTooLarge { n, cap: 20 });
                }
                for a in enumerate_assignments(n, AssignmentMode::Saturated)? {
                    if let Peers::Vector(bits) = &a.peers {
                        check(a.own, a.to_string(), f(a.own, bits))?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Direct effects `tau[s]`, spillover effects `theta[d][s]` and baseline `mu(0,0)`.
///
/// `theta[d][0]` is zero by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectVector {
    pub n: usize,
    pub baseline: f64,
    pub tau: Vec<f64>,
    pub theta: [Vec<f64>; 2],
}

impl EffectVector {
    pub fn tau(&self, s: usize) -> f64 {
        self.tau[s]
    }

    pub fn theta(&self, own: bool, s: usize) -> f64 {
        self.theta[usize::from(own)][s]
    }

    /// `theta_{s+1}(d) - theta_s(d)`.
    pub fn marginal_spillover(&self, own: bool, s: usize) -> f64 {
        self.theta(own, s + 1) - self.theta(own, s)
    }

    /// Rebuild `mu(d, s)`: `mu(0,s) = baseline + theta(0,s)`,
    /// `mu(1,s) = baseline + tau[0] + theta(1,s)`.
    pub fn mean(&self, own: bool, s: usize) -> f64 {
        if own {
            self.baseline + self.tau[0] + self.theta[1][s]
        } else {
            self.baseline + self.theta[0][s]
        }
    }

    pub fn from_model(model: &OutcomeModel, n: usize) -> Result<Self> {
        let means: BTreeMap<EffectiveAssignment, f64> = enumerate_assignments(n, AssignmentMode::Exchangeable)?
            .into_iter()
            .filter_map(|a| {
                let mu = model.exchangeable_mean(a.own, a.treated_peers(), n)?;
                Some((a, mu))
            })
            .collect();
        effects_from_means(&means, n)
    }
}

/// Direct and spillover effects from a complete table of exchangeable means.
pub fn effects_from_means(means: &BTreeMap<EffectiveAssignment, f64>, n: usize) -> Result<EffectVector> {
    let cells = enumerate_assignments(n, AssignmentMode::Exchangeable)?;
    let missing: Vec<EffectiveAssignment> = cells
        .iter()
        .filter(|a| !means.contains_key(a))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteCells { missing });
    }
    let mu = |d: bool, s: usize| means[&EffectiveAssignment::count(d, s)];
    let tau = (0..=n).map(|s| mu(true, s) - mu(false, s)).collect();
    let theta = [false, true].map(|d| (0..=n).map(|s| mu(d, s) - mu(d, 0)).collect());
    Ok(EffectVector {
        n,
        baseline: mu(false, 0),
        tau,
        theta,
    })
}
