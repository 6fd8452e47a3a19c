use std::fmt::Write as _;
use std::str::FromStr;

use clap::Args;
use serde::Serialize;
use spillover::design::{compare_designs, required_groups, DesignEntry};
use spillover::mechanism::MECHANISM_GRAMMAR;
use spillover::{AssignmentMechanism, AssignmentMode};

use crate::error::CliError;
use crate::render::{csv_string, fmt6, to_json, Output, Table};
use crate::GlobalArgs;

#[derive(Args, Debug)]
pub struct DesignArgs {
    /// Neighbors per unit (group size minus one).
    #[arg(long)]
    pub n: usize,
    /// Number of groups.
    #[arg(long = "G", alias = "groups", default_value_t = 300)]
    pub groups: usize,
    /// Also report the groups needed for this smallest expected cell size.
    #[arg(long, value_name = "COUNT")]
    pub min_cell: Option<f64>,
    /// Mechanism strings, e.g. `sr:p=0.5 2srfm cluster:p=0.5`.
    #[arg(required = true, value_name = "MECHANISM")]
    pub mechanisms: Vec<String>,
}

#[derive(Serialize)]
struct RankedEntry {
    rank: usize,
    #[serde(flatten)]
    entry: DesignEntry,
    groups_needed: Option<u64>,
}

#[derive(Serialize)]
struct DesignJson {
    n: usize,
    groups: usize,
    mode: AssignmentMode,
    min_cell: Option<f64>,
    entries: Vec<RankedEntry>,
    warnings: Vec<String>,
}

pub fn run(global: &GlobalArgs, args: &DesignArgs) -> Result<Output, CliError> {
    let mode = super::mode(global)?;
    if args.n < 1 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if args.groups < 1 {
        return Err(CliError::Usage("--G must be at least 1".into()));
    }
    let mechs = args
        .mechanisms
        .iter()
        .map(|m| {
            AssignmentMechanism::from_str(m).map_err(|e| match e {
                spillover::Error::InvalidParameter(msg) if msg.contains(MECHANISM_GRAMMAR) => CliError::Usage(msg),
                other => CliError::Usage(format!("{other}; grammar: {MECHANISM_GRAMMAR}")),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = compare_designs(&mechs, args.n, args.groups, mode).map_err(CliError::usage)?;
    let by_name = |name: &str| mechs.iter().find(|m| m.name() == name).expect("entry names come from mechs");

    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    for (k, entry) in report.entries.into_iter().enumerate() {
        if !entry.identified() {
            warnings.push(format!(
                "{} leaves {} of {} assignments unidentified: {}",
                entry.mechanism,
                entry.unidentified.len(),
                entry.cells.len(),
                entry.unidentified.join(" ")
            ));
        }
        let groups_needed = match args.min_cell {
            Some(target) if entry.identified() => {
                Some(required_groups(by_name(&entry.mechanism), args.n, mode, target).map_err(CliError::usage)?)
            }
            _ => None,
        };
        entries.push(RankedEntry {
            rank: k + 1,
            entry,
            groups_needed,
        });
    }

    let mut text = format!(
        "design comparison: n = {} neighbors (groups of {}), G = {}, {} cells\n",
        args.n,
        args.n + 1,
        args.groups,
        mode
    );
    let mut headers = vec!["rank", "mechanism", "pi_min", "argmin", "condition", "min_expected_cell", "identified"];
    if args.min_cell.is_some() {
        headers.push("groups_needed");
    }
    let mut table = Table::new(headers);
    let mut csv_rows = Vec::new();
    for r in &entries {
        let e = &r.entry;
        let mut row = vec![
            r.rank.to_string(),
            e.mechanism.clone(),
            fmt6(e.pi_min),
            abbreviate(&e.argmin),
            fmt6(e.condition9),
            fmt6(e.min_expected_cell),
            if e.identified() { "yes" } else { "no" }.into(),
        ];
        if args.min_cell.is_some() {
            row.push(r.groups_needed.map_or_else(|| "-".into(), |g| g.to_string()));
        }
        table.row(row);
        csv_rows.push(vec![
            r.rank.to_string(),
            e.mechanism.clone(),
            fmt6(e.pi_min),
            fmt6(e.condition9),
            fmt6(e.min_expected_cell),
            e.identified().to_string(),
        ]);
    }
    text.push_str(&table.render(2));
    for w in &warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    let json = to_json(&DesignJson {
        n: args.n,
        groups: args.groups,
        mode,
        min_cell: args.min_cell,
        entries,
        warnings,
    });
    let mut out = Output::new("design", text, json);
    let header = ["rank", "mechanism", "pi_min", "condition", "min_expected_cell", "identified"];
    out.files.push(("design.csv".into(), csv_string(&header, &csv_rows)));
    Ok(out)
}


fn abbreviate(cells: &[String]) -> String {
    const SHOWN: usize = 4;
    if cells.len() <= SHOWN {
        cells.join(" ")
    } else {
        format!("{} (+{} more)", cells[..SHOWN].join(" "), cells.len() - SHOWN)
    }
}
