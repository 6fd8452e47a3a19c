pub mod design;
pub mod estimate;
pub mod exchangeability;
pub mod simulate;

use spillover::estimators::SizePolicy;
use spillover::{AssignmentMode, Peers};

use crate::error::CliError;
use crate::GlobalArgs;

pub(crate) fn mode(global: &GlobalArgs) -> Result<AssignmentMode, CliError> {
    global
        .mode
        .as_deref()
        .map_or(Ok(AssignmentMode::Exchangeable), |m| m.parse().map_err(CliError::usage))
}

pub(crate) fn policy(global: &GlobalArgs) -> Result<SizePolicy, CliError> {
    global
        .policy
        .as_deref()
        .map_or(Ok(SizePolicy::Separate), |p| p.parse().map_err(CliError::usage))
}

/// Peer part of a parameter name: `2`, `01` or `R2`.
pub(crate) fn peers_label(p: &Peers) -> String {
    match p {
        Peers::Count(s) => s.to_string(),
        Peers::RefCount(s) => format!("R{s}"),
        Peers::Vector(bits) => bits.iter().map(|&b| if b { '1' } else { '0' }).collect(),
    }
}

pub(crate) fn treated_peers(p: &Peers) -> usize {
    match p {
        Peers::Count(s) | Peers::RefCount(s) => *s,
        Peers::Vector(bits) => bits.iter().filter(|&&b| b).count(),
    }
}
