//! Normal and wild-bootstrap confidence intervals for cell-mean contrasts,
//! and a Wald test of exchangeability on saturated tables.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{CellTable, Contrast, EffectEstimate, VarianceDivisor};
use crate::model::{AssignmentMode, EffectiveAssignment};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    /// Zero-width interval from a zero standard error.
    pub degenerate: bool,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("confidence level must lie in (0,1), got {level}")))
    }
}

/// Two-sided standard normal critical value for `level`.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    check_level(level)?;
    let z = Normal::standard();
    Ok(z.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// `value -/+ z * se`.
pub fn normal_ci(est: &EffectEstimate, level: f64) -> Result<Interval> {
    let z = normal_critical_value(level)?;
    Ok(Interval {
        lower: est.value - z * est.se,
        upper: est.value + z * est.se,
        degenerate: est.se == 0.0,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    /// Quantiles of the studentized bootstrap statistic.
    #[default]
    PercentileT,
    /// Quantiles of the bootstrap estimates.
    Percentile,
}

impl std::fmt::Display for CiMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PercentileT => "percentile-t",
            Self::Percentile => "percentile",
        })
    }
}

impl std::str::FromStr for CiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "percentile-t" | "percentile_t" | "t" => Ok(Self::PercentileT),
            "percentile" => Ok(Self::Percentile),
            other => Err(Error::InvalidParameter(format!("unknown bootstrap interval '{other}'"))),
        }
    }
}

/// Level at which Rademacher weights are shared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// One weight per unit.
    #[default]
    Unit,
    /// One weight per group, shared by its units.
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub method: CiMethod,
    #[serde(default)]
    pub weights: WeightScheme,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            replications: 2000,
            seed: 0,
            method: CiMethod::PercentileT,
            weights: WeightScheme::Unit,
        }
    }
}

impl BootstrapSpec {
    pub fn new(replications: usize, seed: u64) -> Self {
        Self {
            replications,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::InvalidParameter(format!(
                "bootstrap needs at least 2 replications, got {}",
                self.replications
            )));
        }
        Ok(())
    }
}

/// Bootstrap mean of one cell for explicit weights: `mean + sum(e_i w_i) / N`.
pub fn wild_cell_mean(outcomes: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(outcomes.len(), weights.len(), "one weight per outcome");
    let n = outcomes.len() as f64;
    let m = outcomes.iter().sum::<f64>() / n;
    m + outcomes.iter().zip(weights).map(|(y, w)| (y - m) * w).sum::<f64>() / n
}

#[derive(Clone, Debug)]
struct WildCell {
    coef: f64,
    mean: f64,
    resid: Vec<f64>,
    cluster: Vec<usize>,
    scale: f64,
}

/// One bootstrap draw of the contrast and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replicate {
    pub value: f64,
    pub se: f64,
}

/// Wild bootstrap of a contrast of cell means with cell-centered residuals.
#[derive(Clone, Debug)]
pub struct WildBootstrap {
    estimate: EffectEstimate,
    cells: Vec<WildCell>,
    clusters: usize,
}

impl WildBootstrap {
    /// Fails when any contrasted cell has fewer than two observations.
    pub fn new(table: &CellTable, contrast: &Contrast) -> std::result::Result<Self, crate::error::Undefined> {
        let estimate = contrast.evaluate(table)?;
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut cells = Vec::with_capacity(contrast.terms().len());
        for (a, c) in contrast.terms() {
            let y = table.outcomes(a);
            let mean = table.mean(a).expect("defined cell");
            let cluster = table
                .cell_groups(a)
                .iter()
                .map(|g| {
                    let next = local.len();
                    *local.entry(*g).or_insert(next)
                })
                .collect();
            let count = y.len() as f64;
            let scale = match table.divisor() {
                VarianceDivisor::Plugin => 1.0,
                VarianceDivisor::Unbiased => count / (count - 1.0),
            };
            cells.push(WildCell {
                coef: *c,
                mean,
                resid: y.iter().map(|v| v - mean).collect(),
                cluster,
                scale,
            });
        }
        Ok(Self {
            estimate,
            cells,
            clusters: local.len(),
        })
    }

    pub fn estimate(&self) -> &EffectEstimate {
        &self.estimate
    }

    /// Observations across the contrasted cells, in contrast-term order.
    pub fn obs_count(&self) -> usize {
        self.cells.iter().map(|c| c.resid.len()).sum()
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters
    }

    /// Contrast and standard error for one weight vector, one weight per
    /// observation in contrast-term order.
    pub fn replicate(&self, weights: &[f64]) -> Replicate {
        assert_eq!(weights.len(), self.obs_count(), "one weight per observation");
        let mut offset = 0;
        let mut value = 0.0;
        let mut var = 0.0;
        for cell in &self.cells {
            let w = &weights[offset..offset + cell.resid.len()];
            offset += cell.resid.len();
            let n = cell.resid.len() as f64;
            let (mut s1, mut s2) = (0.0, 0.0);
            for (e, wi) in cell.resid.iter().zip(w) {
                let x = e * wi;
                s1 += x;
                s2 += x * x;
            }
            let m = s1 / n;
            value += cell.coef * (cell.mean + m);
            let v = ((s2 / n - m * m).max(0.0)) * cell.scale;
            var += cell.coef * cell.coef * v / n;
        }
        Replicate { value, se: var.sqrt() }
    }

    fn fill_weights(&self, scheme: WeightScheme, rng: &mut impl RngCore, buf: &mut Vec<f64>, shared: &mut Vec<f64>) {
        let mut bits = 0u64;
        let mut left = 0u32;
        let mut next = |rng: &mut dyn RngCore| -> f64 {
            if left == 0 {
                bits = rng.next_u64();
                left = 64;
            }
            let b = bits & 1;
            bits >>= 1;
            left -= 1;
            if b == 1 {
                1.0
            } else {
                -1.0
            }
        };
        buf.clear();
        match scheme {
            WeightScheme::Unit => {
                for _ in 0..self.obs_count() {
                    buf.push(next(rng));
                }
            }
            WeightScheme::Group => {
                shared.clear();
                for _ in 0..self.clusters {
                    shared.push(next(rng));
                }
                for cell in &self.cells {
                    buf.extend(cell.cluster.iter().map(|&g| shared[g]));
                }
            }
        }
    }

    /// Draw `spec.replications` weight vectors, replication `b` from its own
    /// stream of `spec.seed`, and form the interval.
    pub fn run(&self, spec: &BootstrapSpec, level: f64) -> Result<BootstrapResult> {
        spec.validate()?;
        check_level(level)?;
        let theta = self.estimate.value;
        let se = self.estimate.se;
        let mut values = Vec::with_capacity(spec.replications);
        let mut stats = Vec::with_capacity(spec.replications);
        let mut buf = Vec::with_capacity(self.obs_count());
        let mut shared = Vec::with_capacity(self.clusters);
        for b in 0..spec.replications {
            let mut rng = stream_rng(spec.seed, b as u64);
            self.fill_weights(spec.weights, &mut rng, &mut buf, &mut shared);
            let r = self.replicate(&buf);
            values.push(r.value);
            stats.push(studentize(r.value - theta, r.se));
        }
        let alpha = 1.0 - level;
        let infinite = stats.iter().filter(|t| t.is_infinite()).count();
        let (interval, quantiles) = match spec.method {
            CiMethod::PercentileT => {
                let mut sorted = stats.clone();
                sorted.sort_by(f64::total_cmp);
                let lo = quantile(&sorted, alpha / 2.0);
                let hi = quantile(&sorted, 1.0 - alpha / 2.0);
                let interval = if se == 0.0 {
                    Interval { lower: theta, upper: theta, degenerate: true }
                } else {
                    Interval {
                        lower: theta - hi * se,
                        upper: theta - lo * se,
                        degenerate: false,
                    }
                };
                (interval, (lo, hi))
            }
            CiMethod::Percentile => {
                let mut sorted = values.clone();
                sorted.sort_by(f64::total_cmp);
                let lo = quantile(&sorted, alpha / 2.0);
                let hi = quantile(&sorted, 1.0 - alpha / 2.0);
                (
                    Interval {
                        lower: lo,
                        upper: hi,
                        degenerate: lo == hi,
                    },
                    (lo, hi),
                )
            }
        };
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0)).sqrt();
        Ok(BootstrapResult {
            estimate: self.estimate.clone(),
            interval,
            method: spec.method,
            replications: spec.replications,
            mean,
            sd,
            quantiles,
            infinite,
        })
    }
}

fn studentize(num: f64, se: f64) -> f64 {
    if se > 0.0 {
        num / se
    } else if num == 0.0 {
        0.0
    } else {
        num.signum() * f64::INFINITY
    }
}

/// Linear-interpolation sample quantile of sorted data, tolerating infinite
/// entries.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let i = h.floor() as usize;
    let frac = h - i as f64;
    let lo = sorted[i];
    if frac == 0.0 || i + 1 >= sorted.len() {
        return lo;
    }
    let hi = sorted[i + 1];
    if lo == hi {
        lo
    } else if lo.is_infinite() || hi.is_infinite() {
        if lo.is_infinite() && hi.is_infinite() {
            if frac < 0.5 {
                lo
            } else {
                hi
            }
        } else if lo.is_infinite() {
            lo
        } else {
            hi
        }
    } else {
        lo + frac * (hi - lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub estimate: EffectEstimate,
    pub interval: Interval,
    pub method: CiMethod,
    pub replications: usize,
    /// Mean and standard deviation of the bootstrap contrasts.
    pub mean: f64,
    pub sd: f64,
    /// Lower and upper quantiles of the statistic the interval inverts.
    pub quantiles: (f64, f64),
    /// Replications with a zero bootstrap standard error and nonzero deviation.
    pub infinite: usize,
}

/// Wild-bootstrap interval for `contrast`.
pub fn wild_bootstrap_ci(table: &CellTable, contrast: &Contrast, spec: &BootstrapSpec, level: f64) -> Result<BootstrapResult> {
    WildBootstrap::new(table, contrast)?.run(spec, level)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairwiseContrast {
    pub first: EffectiveAssignment,
    pub second: EffectiveAssignment,
    pub difference: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratumTest {
    pub own: bool,
    pub treated: usize,
    /// Cells entering the statistic.
    pub cells: Vec<EffectiveAssignment>,
    /// Same-count cells left out for having at most one observation or zero variance.
    pub excluded: Vec<EffectiveAssignment>,
    pub statistic: f64,
    pub df: usize,
    pub pairwise: Vec<PairwiseContrast>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExchangeabilityReport {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub strata: Vec<StratumTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ExchangeabilityTest {
    Tested(ExchangeabilityReport),
    NotTestable { reason: String },
}

impl ExchangeabilityTest {
    pub fn report(&self) -> Option<&ExchangeabilityReport> {
        match self {
            Self::Tested(r) => Some(r),
            Self::NotTestable { .. } => None,
        }
    }
}

/// Joint Wald test that saturated cells sharing own treatment and
/// treated-neighbor count have equal means, with diagonal variance
/// `var(a) / N(a)`.
pub fn exchangeability_test(table: &CellTable) -> Result<ExchangeabilityTest> {
    if table.mode() != AssignmentMode::Saturated {
        return Err(Error::Unsupported(format!(
            "exchangeability test needs a saturated table, got {}",
            table.mode()
        )));
    }
    let mut groups: BTreeMap<(bool, usize), Vec<EffectiveAssignment>> = BTreeMap::new();
    for i in 0..table.len() {
        let a = table.assignment(i);
        groups.entry((a.own, a.treated_peers())).or_default().push(a);
    }
    let mut strata = Vec::new();
    for ((own, treated), cells) in groups {
        if cells.len() < 2 {
            continue;
        }
        let mut used = Vec::new();
        let mut excluded = Vec::new();
        let mut moments = Vec::new();
        for a in cells {
            let s = table.stats(&a);
            match (s.mean, s.var) {
                (Some(m), Some(v)) if s.count > 1 && v > 0.0 => {
                    moments.push((m, v / s.count as f64));
                    used.push(a);
                }
                _ => excluded.push(a),
            }
        }
        if used.len() < 2 {
            continue;
        }
        let precision: f64 = moments.iter().map(|(_, v)| 1.0 / v).sum();
        let pooled = moments.iter().map(|(m, v)| m / v).sum::<f64>() / precision;
        let statistic = moments.iter().map(|(m, v)| (m - pooled) * (m - pooled) / v).sum();
        let mut pairwise = Vec::new();
        for i in 0..used.len() {
            for j in i + 1..used.len() {
                let difference = moments[i].0 - moments[j].0;
                let se = (moments[i].1 + moments[j].1).sqrt();
                pairwise.push(PairwiseContrast {
                    first: used[i].clone(),
                    second: used[j].clone(),
                    difference,
                    se,
                    z: difference / se,
                });
            }
        }
        strata.push(StratumTest {
            own,
            treated,
            df: used.len() - 1,
            cells: used,
            excluded,
            statistic,
            pairwise,
        });
    }
    if strata.is_empty() {
        return Ok(ExchangeabilityTest::NotTestable {
            reason: "no treated-neighbor count has two saturated cells with more than one observation and positive variance"
                .into(),
        });
    }
    let statistic: f64 = strata.iter().map(|s| s.statistic).sum();
    let df: usize = strata.iter().map(|s| s.df).sum();
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(ExchangeabilityTest::Tested(ExchangeabilityReport {
        statistic,
        df,
        p_value: chi.sf(statistic),
        strata,
    }))
}
