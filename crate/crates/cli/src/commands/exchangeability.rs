use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use spillover::estimators::build_cell_table;
use spillover::inference::{exchangeability_test, ExchangeabilityTest};
use spillover::{AssignmentMode, Error};

use crate::data::load_dataset;
use crate::error::CliError;
use crate::render::{fmt6, to_json, Output, Table};
use crate::GlobalArgs;

#[derive(Args, Debug)]
pub struct ExchangeabilityArgs {
    /// Dataset CSV with a `neighbor_rank` column.
    pub dataset: PathBuf,
}

pub struct SizeTest {
    pub size: usize,
    pub n: usize,
    pub groups: usize,
    pub test: ExchangeabilityTest,
}

#[derive(Serialize)]
pub struct PairJson {
    first: String,
    second: String,
    difference: f64,
    se: f64,
    z: f64,
}

/// Flat JSON form of one size's test, with assignments as labels.
#[derive(Serialize)]
pub struct SizeTestJson {
    pub size: usize,
    pub n: usize,
    pub groups: usize,
    pub testable: bool,
    pub reason: Option<String>,
    pub statistic: Option<f64>,
    pub df: Option<usize>,
    pub p_value: Option<f64>,
    pub contrasts: Vec<PairJson>,
    pub excluded: Vec<String>,
}

impl From<&SizeTest> for SizeTestJson {
    fn from(t: &SizeTest) -> Self {
        let mut out = SizeTestJson {
            size: t.size,
            n: t.n,
            groups: t.groups,
            testable: false,
            reason: None,
            statistic: None,
            df: None,
            p_value: None,
            contrasts: Vec::new(),
            excluded: Vec::new(),
        };
        match &t.test {
            ExchangeabilityTest::NotTestable { reason } => out.reason = Some(reason.clone()),
            ExchangeabilityTest::Tested(r) => {
                out.testable = true;
                out.statistic = Some(r.statistic);
                out.df = Some(r.df);
                out.p_value = Some(r.p_value);
                for s in &r.strata {
                    out.contrasts.extend(s.pairwise.iter().map(|p| PairJson {
                        first: p.first.to_string(),
                        second: p.second.to_string(),
                        difference: p.difference,
                        se: p.se,
                        z: p.z,
                    }));
                    out.excluded.extend(s.excluded.iter().map(ToString::to_string));
                }
            }
        }
        out
    }
}

#[derive(Serialize)]
struct Report {
    sizes: Vec<SizeTestJson>,
}

/// Saturated-cell test for every group size.
pub fn test_by_size(ds: &spillover::GroupedDataset) -> Result<Vec<SizeTest>, CliError> {
    if let Some(g) = ds.groups().iter().find(|g| !g.has_ranks()) {
        return Err(Error::MissingOrdering { group: g.id.clone() }.into());
    }
    let mut out = Vec::new();
    for (size, sub) in ds.strata() {
        let groups = sub.groups().len();
        let test = if size < 2 {
            ExchangeabilityTest::NotTestable {
                reason: "groups without neighbors".into(),
            }
        } else {
            exchangeability_test(&build_cell_table(&sub, AssignmentMode::Saturated)?)?
        };
        out.push(SizeTest {
            size,
            n: size.saturating_sub(1),
            groups,
            test,
        });
    }
    Ok(out)
}

pub fn render(tests: &[SizeTest], text: &mut String) {
    for t in tests {
        let _ = write!(text, "group size {} (n = {}, {} groups): ", t.size, t.n, t.groups);
        match &t.test {
            ExchangeabilityTest::NotTestable { reason } => {
                let _ = writeln!(text, "not testable: {reason}");
            }
            ExchangeabilityTest::Tested(r) => {
                let _ = writeln!(text, "W = {}, df = {}, p = {}", fmt6(r.statistic), r.df, fmt6(r.p_value));
                let mut table = Table::new(["contrast", "difference", "se", "z"]);
                for s in &r.strata {
                    for p in &s.pairwise {
                        table.row(vec![
                            format!("{} - {}", p.first, p.second),
                            fmt6(p.difference),
                            fmt6(p.se),
                            fmt6(p.z),
                        ]);
                    }
                }
                text.push_str(&table.render(2));
                for s in r.strata.iter().filter(|s| !s.excluded.is_empty()) {
                    let cells: Vec<String> = s.excluded.iter().map(ToString::to_string).collect();
                    let _ = writeln!(text, "  excluded (too few observations or zero variance): {}", cells.join(" "));
                }
            }
        }
    }
}

pub fn run(_global: &GlobalArgs, args: &ExchangeabilityArgs) -> Result<Output, CliError> {
    let ds = load_dataset(&args.dataset)?;
    let sizes = test_by_size(&ds)?;
    let mut text = String::from("exchangeability test: equal means across saturated cells with the same own treatment and treated-neighbor count\n");
    render(&sizes, &mut text);
    let sizes = sizes.iter().map(SizeTestJson::from).collect();
    Ok(Output::new("exchangeability", text, to_json(&Report { sizes })))
}
