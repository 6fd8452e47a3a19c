//! Closed-form population values of the estimands for a given outcome model
//! and assignment mechanism.
//!
//! Exchangeable models are evaluated directly on `mu(d, s)`. Models that
//! depend on the full neighbor vector are first collapsed to the population
//! cell means `E[Y | D = d, S = s]`, which average the vector means with
//! weights `P[D = d, D_g = v] / P[D = d, S = s]`.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::combinatorics::binomial_pmf;
use crate::error::{Error, Result, Undefined};
use crate::mechanism::AssignmentMechanism;
use crate::model::{index_to_bits, EffectiveAssignment, OutcomeModel};

/// Largest `n` for which neighbor vectors are enumerated.
pub const ENUMERATION_CAP: usize = 20;

fn guard(n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidGroupSize(n));
    }
    if n > ENUMERATION_CAP {
        return Err(Error::EnumerationTooLarge { n, cap: ENUMERATION_CAP });
    }
    Ok(())
}

/// Weights `P[D = own, D_g = v] / P[D = own, S = s]` over neighbor vectors
/// `v` with `s` treated entries, in lexicographic order.
pub fn collapse_weights(mech: &AssignmentMechanism, n: usize, own: bool, s: usize) -> Result<Vec<(Vec<bool>, f64)>> {
    guard(n)?;
    let total = mech.pi(n, &EffectiveAssignment::count(own, s))?;
    if total <= 0.0 {
        return Err(Undefined::new(
            vec![EffectiveAssignment::count(own, s)],
            "assignment has zero probability",
        )
        .into());
    }
    let mut out = Vec::new();
    for mask in 0..(1usize << n) {
        if mask.count_ones() as usize != s {
            continue;
        }
        let bits = index_to_bits(mask, n);
        let p = mech.pi(n, &EffectiveAssignment::vector(own, bits.clone()))?;
        out.push((bits, p / total));
    }
    Ok(out)
}

/// `E[Y | D = own, S = s]` when exchangeability is imposed on a model that
/// may depend on which neighbors are treated.
pub fn misspecified_exchangeable(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize, own: bool, s: usize) -> Result<f64> {
    if let Some(mu) = model.exchangeable_mean(own, s, n) {
        if mech.pi(n, &EffectiveAssignment::count(own, s))? <= 0.0 {
            return Err(Undefined::new(vec![EffectiveAssignment::count(own, s)], "assignment has zero probability").into());
        }
        return Ok(mu);
    }
    Ok(collapse_weights(mech, n, own, s)?
        .iter()
        .map(|(bits, w)| w * model.mean(own, bits))
        .sum())
}

/// Population cell means `E[Y | D = d, S = s]`, indexed `[d][s]`.
///
/// Exchangeable models give `mu(d, s)` everywhere; otherwise cells with zero
/// probability are `None`.
pub fn population_means(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize) -> Result<[Vec<Option<f64>>; 2]> {
    if n < 1 {
        return Err(Error::InvalidGroupSize(n));
    }
    let mut out = [Vec::with_capacity(n + 1), Vec::with_capacity(n + 1)];
    for own in [false, true] {
        for s in 0..=n {
            let value = match model.exchangeable_mean(own, s, n) {
                Some(mu) => Some(mu),
                None => {
                    if mech.pi(n, &EffectiveAssignment::count(own, s))? > 0.0 {
                        Some(misspecified_exchangeable(model, mech, n, own, s)?)
                    } else {
                        None
                    }
                }
            };
            out[usize::from(own)].push(value);
        }
    }
    Ok(out)
}

/// `E[Y | a]` for a count or vector assignment.
pub fn population_mean(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize, a: &EffectiveAssignment) -> Result<f64> {
    match &a.peers {
        crate::model::Peers::Vector(bits) => Ok(model.mean(a.own, bits)),
        crate::model::Peers::Count(s) => {
            let means = population_means(model, mech, n)?;
            means[usize::from(a.own)][*s].ok_or_else(|| Undefined::new(vec![a.clone()], "assignment has zero probability").into())
        }
        crate::model::Peers::RefCount(_) => Err(Error::Unsupported("population means of reference-set cells".into())),
    }
}

fn spillovers(means: &[Vec<Option<f64>>; 2], own: bool) -> Result<Vec<Option<f64>>> {
    let row = &means[usize::from(own)];
    let base = row[0].ok_or_else(|| {
        Error::from(Undefined::new(
            vec![EffectiveAssignment::count(own, 0)],
            "baseline cell has zero probability",
        ))
    })?;
    Ok(row.iter().map(|m| m.map(|m| m - base)).collect())
}

/// Population difference in means `E[Y | D = 1] - E[Y | D = 0]`, i.e.
/// `tau_0 + sum_s theta_s(1) P[S=s | D=1] - sum_s theta_s(0) P[S=s | D=0]`.
pub fn beta_d(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize) -> Result<f64> {
    let means = population_means(model, mech, n)?;
    let mut arms = [0.0; 2];
    for own in [false, true] {
        let law = mech.peer_law(n, own)?;
        for (s, &p) in law.iter().enumerate() {
            if p > 0.0 {
                let mu = means[usize::from(own)][s].expect("positive-probability cell has a mean");
                arms[usize::from(own)] += p * mu;
            }
        }
    }
    Ok(arms[1] - arms[0])
}

/// LIM weights `n (s - E S) / V S * P[S = s]` for `S ~ Binomial(n, p)`.
pub fn lim_weights(n: usize, p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("treated-peer variance is zero at p = {p}")));
    }
    let (nf, mean) = (n as f64, n as f64 * p);
    let var = mean * (1.0 - p);
    Ok((0..=n)
        .map(|s| nf * (s as f64 - mean) / var * binomial_pmf(n as u64, s as u64, p))
        .collect())
}

/// Population LIM slope(s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum LimGamma {
    Pooled(f64),
    Interacted(f64, f64),
}

impl LimGamma {
    pub fn pooled(self) -> Option<f64> {
        match self {
            Self::Pooled(g) => Some(g),
            Self::Interacted(..) => None,
        }
    }

    pub fn interacted(self) -> Option<(f64, f64)> {
        match self {
            Self::Interacted(a, b) => Some((a, b)),
            Self::Pooled(_) => None,
        }
    }
}

/// Population coefficient on the treated-neighbor share in the LIM
/// regression, available under simple random assignment only.
pub fn gamma_lim(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize, interacted: bool) -> Result<LimGamma> {
    let p = match mech {
        AssignmentMechanism::SimpleRandom { p } => *p,
        other => {
            return Err(Error::Unsupported(format!(
                "LIM population coefficients are derived for simple random assignment only, not {other}"
            )))
        }
    };
    let w = lim_weights(n, p)?;
    let means = population_means(model, mech, n)?;
    let theta = [spillovers(&means, false)?, spillovers(&means, true)?];
    let slope = |d: usize| -> f64 { (1..=n).map(|s| theta[d][s].expect("full support") * w[s]).sum() };
    Ok(if interacted {
        LimGamma::Interacted(slope(0), slope(1))
    } else {
        LimGamma::Pooled((1..=n).map(|s| (theta[0][s].unwrap() * (1.0 - p) + theta[1][s].unwrap() * p) * w[s]).sum())
    })
}

/// A weighted average of spillover effects with its weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PooledOracle {
    pub value: f64,
    /// `(s, weight)` pairs.
    pub weights: Vec<(usize, f64)>,
}

/// Population `E[Y | D = own, S in bucket] - E[Y | D = own, S = 0]`.
pub fn pooled(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize, own: bool, bucket: &[usize]) -> Result<PooledOracle> {
    let mut bucket: Vec<usize> = bucket.to_vec();
    bucket.sort_unstable();
    bucket.dedup();
    if bucket.is_empty() || bucket[0] == 0 || bucket[bucket.len() - 1] > n {
        return Err(Error::InvalidParameter(format!("bucket must be a nonempty subset of 1..={n}")));
    }
    let probs: Vec<f64> = bucket
        .iter()
        .map(|&s| mech.pi(n, &EffectiveAssignment::count(own, s)))
        .collect::<Result<_>>()?;
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        let cells = bucket.iter().map(|&s| EffectiveAssignment::count(own, s)).collect();
        return Err(Undefined::new(cells, "bucket has zero probability").into());
    }
    let means = population_means(model, mech, n)?;
    let theta = spillovers(&means, own)?;
    let weights: Vec<(usize, f64)> = bucket.iter().zip(&probs).map(|(&s, &p)| (s, p / total)).collect();
    let value = weights
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|&(s, w)| w * theta[s].expect("positive-probability cell has a mean"))
        .sum();
    Ok(PooledOracle { value, weights })
}

/// Population partial-population contrast `E[Y | D = 0, T = 1] - E[Y | T = 0]`.
/// Weights are `P[S = s | D = 0, T = 1]` for `s = 1..=n` and sum to
/// `1 - P[S = 0 | D = 0, T = 1]`.
pub fn delta_pp(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize) -> Result<PooledOracle> {
    let law = mech.treated_group_control_peer_law(n)?;
    let means = population_means(model, mech, n)?;
    let theta = spillovers(&means, false)?;
    let weights: Vec<(usize, f64)> = (1..=n).map(|s| (s, law[s])).collect();
    let value = weights
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|&(s, w)| w * theta[s].expect("positive-probability cell has a mean"))
        .sum();
    Ok(PooledOracle { value, weights })
}

/// Every oracle value available for a model and mechanism.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub n: usize,
    pub mechanism: String,
    pub model: String,
    pub beta_d: f64,
    pub gamma_lim: Option<f64>,
    pub gamma_lim0: Option<f64>,
    pub gamma_lim1: Option<f64>,
    /// Pooled spillovers over all positive counts, keyed `delta0` and `delta1`.
    pub delta_pooled: BTreeMap<String, f64>,
    pub delta_pp: Option<f64>,
    pub weights: BTreeMap<String, Vec<f64>>,
}

pub fn report(model: &OutcomeModel, mech: &AssignmentMechanism, n: usize) -> Result<OracleReport> {
    let mut weights = BTreeMap::new();
    let mut delta_pooled = BTreeMap::new();
    let bucket: Vec<usize> = (1..=n).collect();
    for own in [false, true] {
        if let Ok(p) = pooled(model, mech, n, own, &bucket) {
            let key = format!("delta{}", u8::from(own));
            weights.insert(key.clone(), p.weights.iter().map(|w| w.1).collect());
            delta_pooled.insert(key, p.value);
        }
    }
    let (mut g, mut g0, mut g1) = (None, None, None);
    if let AssignmentMechanism::SimpleRandom { p } = mech {
        if *p > 0.0 && *p < 1.0 {
            g = gamma_lim(model, mech, n, false)?.pooled();
            let (a, b) = gamma_lim(model, mech, n, true)?.interacted().expect("interacted");
            g0 = Some(a);
            g1 = Some(b);
            weights.insert("lim".into(), lim_weights(n, *p)?);
        }
    }
    let pp = match delta_pp(model, mech, n) {
        Ok(pp) => {
            weights.insert("delta_pp".into(), pp.weights.iter().map(|w| w.1).collect());
            Some(pp.value)
        }
        Err(_) => None,
    };
    Ok(OracleReport {
        n,
        mechanism: mech.name(),
        model: model.label().to_string(),
        beta_d: beta_d(model, mech, n)?,
        gamma_lim: g,
        gamma_lim0: g0,
        gamma_lim1: g1,
        delta_pooled,
        delta_pp: pp,
        weights,
    })
}
