//! Ranking of candidate randomization designs by identification and by the
//! smallest expected cell size.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mechanism::AssignmentMechanism;
use crate::model::{enumerate_assignments, AssignmentMode, EffectiveAssignment};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellIdentification {
    pub assignment: String,
    pub probability: f64,
    pub identified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignEntry {
    pub mechanism: String,
    pub cells: Vec<CellIdentification>,
    pub unidentified: Vec<String>,
    pub pi_min: f64,
    pub argmin: Vec<String>,
    pub condition9: f64,
    pub min_expected_cell: f64,
    pub sr_rate: f64,
    pub fm_rate: f64,
    /// Ranking score, equal to `min_expected_cell`.
    pub score: f64,
}

impl DesignEntry {
    pub fn identified(&self) -> bool {
        self.unidentified.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DesignReport {
    pub n: usize,
    pub groups: usize,
    pub mode: AssignmentMode,
    /// Best design first.
    pub entries: Vec<DesignEntry>,
}

fn labels(cells: &[EffectiveAssignment]) -> Vec<String> {
    cells.iter().map(ToString::to_string).collect()
}

pub fn evaluate_design(mech: &AssignmentMechanism, n: usize, groups: usize, mode: AssignmentMode) -> Result<DesignEntry> {
    let rates = mech.rate_diagnostics(n, groups, mode)?;
    let pm = mech.pi_min(n, mode)?;
    let cells = enumerate_assignments(n, mode)?
        .into_iter()
        .map(|a| {
            let p = mech.pi(n, &a)?;
            Ok(CellIdentification {
                assignment: a.to_string(),
                probability: p,
                identified: p > 0.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DesignEntry {
        mechanism: mech.name(),
        cells,
        unidentified: labels(&pm.unidentified),
        pi_min: pm.value,
        argmin: labels(&pm.argmin),
        condition9: rates.condition9,
        min_expected_cell: rates.min_expected_cell,
        sr_rate: rates.sr_rate,
        fm_rate: rates.fm_rate,
        score: rates.min_expected_cell,
    })
}

/// Evaluate every mechanism and rank by smallest expected cell count,
/// largest first, ties broken by mechanism name.
pub fn compare_designs(mechs: &[AssignmentMechanism], n: usize, groups: usize, mode: AssignmentMode) -> Result<DesignReport> {
    if n < 1 {
        return Err(Error::InvalidGroupSize(n));
    }
    let mut entries = mechs
        .iter()
        .map(|m| evaluate_design(m, n, groups, mode))
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.mechanism.cmp(&b.mechanism)));
    Ok(DesignReport { n, groups, mode, entries })
}

/// Smallest number of groups whose smallest expected cell reaches `target`.
pub fn required_groups(mech: &AssignmentMechanism, n: usize, mode: AssignmentMode, target: f64) -> Result<u64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidParameter(format!("target cell size must be positive, got {target}")));
    }
    let pm = mech.pi_min(n, mode)?;
    if pm.value <= 0.0 {
        return Err(Error::Unsupported(format!(
            "{mech} leaves {} assignment(s) unidentified; no number of groups reaches the target",
            pm.unidentified.len()
        )));
    }
    let x = target / ((n + 1) as f64 * pm.value);
    let g = (x * (1.0 - 1e-12)).ceil().max(1.0);
    Ok(g as u64)
}
