//! Randomization designs with exact assignment probabilities and samplers.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{bernoulli_power, binomial, binomial_pmf, weighted_binomial};
use crate::error::{Error, Result};
use crate::model::{assignment_count, enumerate_assignments, AssignmentMode, EffectiveAssignment, Peers};

const WEIGHT_TOLERANCE: f64 = 1e-9;

/// A named treatment assignment mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssignmentMechanism {
    /// Independent Bernoulli(p) treatment for every unit.
    SimpleRandom { p: f64 },
    /// Each group draws a treated count `w` with probability `q_w`, then a
    /// uniformly random subset of that size is treated. `None` means uniform
    /// weights `1/(n+2)` over `w = 0..=n+1`.
    TwoStageFixedMargins { weights: Option<Vec<f64>> },
    /// All units of a group treated with probability `p`, otherwise none.
    ClusterRandom { p: f64 },
    /// Groups treated with probability `p_group`; inside treated groups units
    /// are treated independently with probability `p_within`; control groups
    /// are untreated.
    PartialPopulation { p_group: f64, p_within: f64 },
}

/// One group's drawn treatment vector (and saturation label when the design
/// has one).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDraw {
    pub treatments: Vec<bool>,
    pub saturation: Option<bool>,
}

/// Minimum assignment probability over the assignment set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PiMin {
    pub value: f64,
    pub argmin: Vec<EffectiveAssignment>,
    /// Assignments with zero probability (not identified).
    pub unidentified: Vec<EffectiveAssignment>,
}

impl PiMin {
    pub fn identified(&self) -> bool {
        self.unidentified.is_empty()
    }
}

/// Rate conditions for a design with `groups` groups of `n + 1` units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateDiagnostics {
    /// `log|A_n| / (G * pi_min^2)`; infinite when some cell has zero probability.
    pub condition9: f64,
    /// `G (n+1) pi_min`, the smallest expected cell count.
    pub min_expected_cell: f64,
    /// `(n+1) / log G`.
    pub sr_rate: f64,
    /// `log(n+1) / log G`.
    pub fm_rate: f64,
    pub identified: bool,
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in [0,1], got {p}")))
    }
}

impl AssignmentMechanism {
    pub fn simple_random(p: f64) -> Result<Self> {
        check_probability("p", p)?;
        Ok(Self::SimpleRandom { p })
    }

    pub fn two_stage_uniform() -> Self {
        Self::TwoStageFixedMargins { weights: None }
    }

    pub fn two_stage(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&q| !(q >= 0.0 && q.is_finite())) {
            return Err(Error::InvalidParameter("2SR-FM weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidParameter(format!("2SR-FM weights sum to {total}, not 1")));
        }
        Ok(Self::TwoStageFixedMargins {
            weights: Some(weights),
        })
    }

    pub fn cluster(p: f64) -> Result<Self> {
        check_probability("p", p)?;
        Ok(Self::ClusterRandom { p })
    }

    pub fn partial_population(p_group: f64, p_within: f64) -> Result<Self> {
        check_probability("pT", p_group)?;
        check_probability("pw", p_within)?;
        Ok(Self::PartialPopulation { p_group, p_within })
    }

    /// Canonical short name, also the grammar accepted by [`FromStr`].
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Treated-count weights `q_w`, `w = 0..=n+1`.
    fn margin_weights(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            Self::TwoStageFixedMargins { weights: None } => Ok(vec![1.0 / (n + 2) as f64; n + 2]),
            Self::TwoStageFixedMargins { weights: Some(q) } => {
                if q.len() != n + 2 {
                    return Err(Error::InvalidParameter(format!(
                        "2SR-FM has {} weights but groups of {} units need {}",
                        q.len(),
                        n + 1,
                        n + 2
                    )));
                }
                Ok(q.clone())
            }
            _ => Err(Error::Unsupported("margin weights exist only for 2SR-FM".into())),
        }
    }

    /// Probability that a whole group of `bits.len()` units receives exactly
    /// the treatment vector `bits`.
    pub fn group_probability(&self, bits: &[bool]) -> Result<f64> {
        let size = bits.len();
        if size < 2 {
            return Err(Error::InvalidGroupSize(size.saturating_sub(1)));
        }
        let w = bits.iter().filter(|&&b| b).count();
        let (w64, rest) = (w as u64, (size - w) as u64);
        Ok(match self {
            Self::SimpleRandom { p } => bernoulli_power(*p, w64, rest),
            Self::TwoStageFixedMargins { weights: None } => 1.0 / ((size + 1) as f64 * binomial(size as u64, w64)),
            Self::TwoStageFixedMargins { .. } => {
                let q = self.margin_weights(size - 1)?;
                q[w] / binomial(size as u64, w64)
            }
            Self::ClusterRandom { p } => {
                if w == size {
                    *p
                } else if w == 0 {
                    1.0 - p
                } else {
                    0.0
                }
            }
            Self::PartialPopulation { p_group, p_within } => {
                let treated = p_group * bernoulli_power(*p_within, w64, rest);
                treated + if w == 0 { 1.0 - p_group } else { 0.0 }
            }
        })
    }

    /// Exact probability `pi(a)` that a unit in a group with `n` neighbors
    /// has effective assignment `a`.
    pub fn pi(&self, n: usize, a: &EffectiveAssignment) -> Result<f64> {
        if n < 1 {
            return Err(Error::InvalidGroupSize(n));
        }
        let d = u64::from(a.own);
        let n64 = n as u64;
        match &a.peers {
            Peers::Count(s) => {
                if *s > n {
                    return Err(Error::InvalidParameter(format!("{a} outside A_n for n = {n}")));
                }
                let s64 = *s as u64;
                Ok(match self {
                    Self::SimpleRandom { p } => weighted_binomial(n64, s64, *p, s64 + d, n64 + 1 - s64 - d),
                    Self::TwoStageFixedMargins { weights: None } => {
                        let numerator = if a.own { s + 1 } else { n + 1 - s };
                        numerator as f64 / ((n + 1) * (n + 2)) as f64
                    }
                    Self::TwoStageFixedMargins { .. } => {
                        let q = self.margin_weights(n)?;
                        let m = (n + 1) as f64;
                        if a.own {
                            q[s + 1] * (*s as f64 + 1.0) / m
                        } else {
                            q[*s] * (m - *s as f64) / m
                        }
                    }
                    Self::ClusterRandom { p } => match (a.own, *s) {
                        (true, s) if s == n => *p,
                        (false, 0) => 1.0 - p,
                        _ => 0.0,
                    },
                    Self::PartialPopulation { p_group, p_within } => {
                        let treated = p_group * weighted_binomial(n64, s64, *p_within, s64 + d, n64 + 1 - s64 - d);
                        treated + if !a.own && *s == 0 { 1.0 - p_group } else { 0.0 }
                    }
                })
            }
            Peers::Vector(bits) => {
                if bits.len() != n {
                    return Err(Error::InvalidParameter(format!(
                        "{a} has {} neighbor bits, expected {n}",
                        bits.len()
                    )));
                }
                let mut group = Vec::with_capacity(n + 1);
                group.push(a.own);
                group.extend_from_slice(bits);
                self.group_probability(&group)
            }
            Peers::RefCount(s) => match self {
                // Under independent assignment only the reference-set size matters.
                Self::SimpleRandom { p } => {
                    let s64 = *s as u64;
                    if *s > n {
                        return Err(Error::InvalidParameter(format!("{a} outside reference set of size {n}")));
                    }
                    Ok(weighted_binomial(n64, s64, *p, s64 + d, n64 + 1 - s64 - d))
                }
                _ => Err(Error::Unsupported(format!(
                    "reference-set probabilities under {self} depend on the full group size"
                ))),
            },
        }
    }

    /// `P[D = 1]` for a unit in a group with `n` neighbors.
    pub fn treatment_probability(&self, n: usize) -> Result<f64> {
        (0..=n).map(|s| self.pi(n, &EffectiveAssignment::count(true, s))).sum()
    }

    /// Conditional law `P[S = s | D = d]`, `s = 0..=n`.
    pub fn peer_law(&self, n: usize, own: bool) -> Result<Vec<f64>> {
        let joint: Vec<f64> = (0..=n)
            .map(|s| self.pi(n, &EffectiveAssignment::count(own, s)))
            .collect::<Result<_>>()?;
        let total: f64 = joint.iter().sum();
        if total <= 0.0 {
            return Err(Error::Unsupported(format!(
                "{self} never assigns d = {}",
                u8::from(own)
            )));
        }
        Ok(joint.into_iter().map(|x| x / total).collect())
    }

    /// `P[S = s | D = 0, T = 1]` for partial-population designs.
    pub fn treated_group_control_peer_law(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            Self::PartialPopulation { p_within, p_group } => {
                if *p_group == 0.0 || *p_within == 1.0 {
                    return Err(Error::Unsupported(
                        "no control units in treated groups under this design".into(),
                    ));
                }
                Ok((0..=n).map(|s| binomial_pmf(n as u64, s as u64, *p_within)).collect())
            }
            _ => Err(Error::Unsupported(format!("{self} has no group saturation label"))),
        }
    }

    /// Smallest assignment probability over `A_n`, every assignment attaining
    /// it, and the zero-probability assignments.
    pub fn pi_min(&self, n: usize, mode: AssignmentMode) -> Result<PiMin> {
        let cells = enumerate_assignments(n, mode)?;
        let probs: Vec<f64> = cells.iter().map(|a| self.pi(n, a)).collect::<Result<_>>()?;
        let value = probs.iter().copied().fold(f64::INFINITY, f64::min);
        let tol = value.abs() * 1e-12;
        let argmin = cells
            .iter()
            .zip(&probs)
            .filter(|(_, &p)| (p - value).abs() <= tol)
            .map(|(a, _)| a.clone())
            .collect();
        let unidentified = cells
            .iter()
            .zip(&probs)
            .filter(|(_, &p)| p <= 0.0)
            .map(|(a, _)| a.clone())
            .collect();
        Ok(PiMin {
            value,
            argmin,
            unidentified,
        })
    }

    /// Draw one group of `n + 1` units.
    pub fn draw_group<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> GroupDraw {
        let size = n + 1;
        match self {
            Self::SimpleRandom { p } => GroupDraw {
                treatments: (0..size).map(|_| rng.random_bool(*p)).collect(),
                saturation: None,
            },
            Self::TwoStageFixedMargins { weights } => {
                let w = match weights {
                    None => rng.random_range(0..=size),
                    Some(q) => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = q.len() - 1;
                        for (i, &qi) in q.iter().enumerate() {
                            acc += qi;
                            if u < acc {
                                pick = i;
                                break;
                            }
                        }
                        pick.min(size)
                    }
                };
                let mut treatments = vec![false; size];
                for i in index::sample(rng, size, w) {
                    treatments[i] = true;
                }
                GroupDraw {
                    treatments,
                    saturation: None,
                }
            }
            Self::ClusterRandom { p } => {
                let t = rng.random_bool(*p);
                GroupDraw {
                    treatments: vec![t; size],
                    saturation: None,
                }
            }
            Self::PartialPopulation { p_group, p_within } => {
                let t = rng.random_bool(*p_group);
                let treatments = if t {
                    (0..size).map(|_| rng.random_bool(*p_within)).collect()
                } else {
                    vec![false; size]
                };
                GroupDraw {
                    treatments,
                    saturation: Some(t),
                }
            }
        }
    }

    /// Rate conditions for `groups` groups with `n` neighbors each.
    pub fn rate_diagnostics(&self, n: usize, groups: usize, mode: AssignmentMode) -> Result<RateDiagnostics> {
        if groups < 2 {
            return Err(Error::InvalidParameter(format!("need G >= 2 groups, got {groups}")));
        }
        let pm = self.pi_min(n, mode)?;
        let g = groups as f64;
        let log_g = g.ln();
        let cells = assignment_count(n, mode) as f64;
        let condition9 = if pm.value > 0.0 {
            cells.ln() / (g * pm.value * pm.value)
        } else {
            f64::INFINITY
        };
        Ok(RateDiagnostics {
            condition9,
            min_expected_cell: g * (n + 1) as f64 * pm.value,
            sr_rate: (n + 1) as f64 / log_g,
            fm_rate: ((n + 1) as f64).ln() / log_g,
            identified: pm.identified(),
        })
    }
}

impl fmt::Display for AssignmentMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SimpleRandom { p } => write!(f, "sr:p={p}"),
            Self::TwoStageFixedMargins { weights: None } => f.write_str("2srfm"),
            Self::TwoStageFixedMargins { weights: Some(q) } => {
                let q: Vec<String> = q.iter().map(ToString::to_string).collect();
                write!(f, "2srfm:q={}", q.join(","))
            }
            Self::ClusterRandom { p } => write!(f, "cluster:p={p}"),
            Self::PartialPopulation { p_group, p_within } => write!(f, "pp:pT={p_group},pw={p_within}"),
        }
    }
}

/// Grammar accepted for mechanisms on the command line and in configs.
pub const MECHANISM_GRAMMAR: &str =
    "sr:p=<prob> | 2srfm | 2srfm:q=<q0>,<q1>,... | cluster:p=<prob> | pp:pT=<prob>,pw=<prob>";

impl FromStr for AssignmentMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let unknown = || Error::InvalidParameter(format!("unknown mechanism '{s}'; grammar: {MECHANISM_GRAMMAR}"));
        let parse_num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad number '{v}' in mechanism '{s}'")))
        };
        let pairs = || -> Result<Vec<(String, f64)>> {
            rest.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| {
                    let (k, v) = p.split_once('=').ok_or_else(unknown)?;
                    Ok((k.trim().to_string(), parse_num(v)?))
                })
                .collect()
        };
        match kind.to_ascii_lowercase().as_str() {
            "sr" => {
                let kv = pairs()?;
                match kv.as_slice() {
                    [] => Self::simple_random(0.5),
                    [(k, p)] if k == "p" => Self::simple_random(*p),
                    _ => Err(unknown()),
                }
            }
            "cluster" => {
                let kv = pairs()?;
                match kv.as_slice() {
                    [] => Self::cluster(0.5),
                    [(k, p)] if k == "p" => Self::cluster(*p),
                    _ => Err(unknown()),
                }
            }
            "2srfm" => {
                if rest.trim().is_empty() {
                    return Ok(Self::two_stage_uniform());
                }
                let list = rest.trim().strip_prefix("q=").ok_or_else(unknown)?;
                let q = list.split(',').map(parse_num).collect::<Result<Vec<_>>>()?;
                Self::two_stage(q)
            }
            "pp" => {
                let (mut pt, mut pw) = (0.5, 0.5);
                for (k, v) in pairs()? {
                    match k.as_str() {
                        "pT" | "pt" => pt = v,
                        "pw" | "pW" => pw = v,
                        _ => return Err(unknown()),
                    }
                }
                Self::partial_population(pt, pw)
            }
            _ => Err(unknown()),
        }
    }
}
