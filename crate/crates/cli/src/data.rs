//! Dataset CSV ingestion and writing.
//!
//! Required columns: `group_id`, `treatment` (0/1), `outcome`. Optional:
//! `unit_id`, `saturation` (0/1, constant within a group), `neighbor_rank`,
//! `reference_ids` (semicolon-separated unit ids) and `group_size`, a guard
//! checked against the number of rows of each group. Other columns are
//! ignored. Groups keep the order of their first row.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Trim, WriterBuilder};
use spillover::{Group, GroupedDataset, Unit};

use crate::error::CliError;

const REQUIRED: [&str; 3] = ["group_id", "treatment", "outcome"];

#[derive(Default)]
struct Columns {
    group: usize,
    treatment: usize,
    outcome: usize,
    unit: Option<usize>,
    saturation: Option<usize>,
    rank: Option<usize>,
    reference: Option<usize>,
    size: Option<usize>,
}

impl Columns {
    fn from_headers(headers: &StringRecord) -> Result<Self, CliError> {
        let mut found: HashMap<String, usize> = HashMap::new();
        for (j, h) in headers.iter().enumerate() {
            let name = h.trim().trim_start_matches('\u{feff}').to_ascii_lowercase();
            if found.insert(name.clone(), j).is_some() {
                return Err(CliError::Validation(format!("duplicate column '{name}' in header")));
            }
        }
        for r in REQUIRED {
            if !found.contains_key(r) {
                return Err(CliError::Validation(format!("missing required column '{r}'")));
            }
        }
        Ok(Self {
            group: found["group_id"],
            treatment: found["treatment"],
            outcome: found["outcome"],
            unit: found.get("unit_id").copied(),
            saturation: found.get("saturation").copied(),
            rank: found.get("neighbor_rank").copied(),
            reference: found.get("reference_ids").copied(),
            size: found.get("group_size").copied(),
        })
    }
}

struct PendingGroup {
    id: String,
    saturation: Option<(bool, u64)>,
    size: Option<(usize, u64)>,
    units: Vec<Unit>,
}

fn cell_error(line: u64, column: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("row {line}, column {column}: {msg}"))
}

fn binary(raw: &str, line: u64, column: &str) -> Result<bool, CliError> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        "" => Err(cell_error(line, column, "missing value")),
        other => Err(cell_error(line, column, format!("expected 0 or 1, got '{other}'"))),
    }
}

/// Parse a dataset from CSV text. Row numbers in errors count the header as row 1.
pub fn read_dataset<R: Read>(reader: R) -> Result<GroupedDataset, CliError> {
    let mut rdr = ReaderBuilder::new().trim(Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Validation(format!("cannot read CSV header: {e}")))?
        .clone();
    let cols = Columns::from_headers(&headers)?;
    let mut groups: Vec<PendingGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::Validation(format!("malformed CSV: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |j: usize| record.get(j).unwrap_or("");
        let gid = get(cols.group);
        if gid.is_empty() {
            return Err(cell_error(line, "group_id", "missing value"));
        }
        let treatment = binary(get(cols.treatment), line, "treatment")?;
        let raw_y = get(cols.outcome);
        if raw_y.is_empty() {
            return Err(cell_error(line, "outcome", "missing outcome"));
        }
        let outcome: f64 = raw_y
            .parse()
            .ok()
            .filter(|y: &f64| y.is_finite())
            .ok_or_else(|| cell_error(line, "outcome", format!("expected a finite number, got '{raw_y}'")))?;
        let slot = *index.entry(gid.to_string()).or_insert_with(|| {
            groups.push(PendingGroup {
                id: gid.to_string(),
                saturation: None,
                size: None,
                units: Vec::new(),
            });
            groups.len() - 1
        });
        let group = &mut groups[slot];
        let position = group.units.len();
        let uid = match cols.unit.map(get) {
            Some(id) if !id.is_empty() => id.to_string(),
            _ => format!("{gid}-{position}"),
        };
        let mut unit = Unit::new(uid, treatment, outcome);
        if let Some(j) = cols.rank {
            let raw = get(j);
            if !raw.is_empty() {
                let rank: u32 = raw
                    .parse()
                    .map_err(|_| cell_error(line, "neighbor_rank", format!("expected a non-negative integer, got '{raw}'")))?;
                unit = unit.with_rank(rank);
            }
        }
        if let Some(j) = cols.reference {
            let ids = get(j).split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
            unit = unit.with_reference(ids);
        }
        if let Some(j) = cols.saturation {
            let t = binary(get(j), line, "saturation")?;
            match group.saturation {
                None => group.saturation = Some((t, line)),
                Some((first, at)) if first != t => {
                    return Err(cell_error(
                        line,
                        "saturation",
                        format!("saturation varies within group '{gid}' (row {at} has {})", u8::from(first)),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(j) = cols.size {
            let raw = get(j);
            let size: usize = raw
                .parse()
                .map_err(|_| cell_error(line, "group_size", format!("expected a positive integer, got '{raw}'")))?;
            match group.size {
                None => group.size = Some((size, line)),
                Some((first, at)) if first != size => {
                    return Err(cell_error(
                        line,
                        "group_size",
                        format!("group_size varies within group '{gid}' (row {at} has {first})"),
                    ))
                }
                Some(_) => {}
            }
        }
        group.units.push(unit);
    }
    if groups.is_empty() {
        return Err(CliError::Validation("dataset has no rows".into()));
    }
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if let Some((declared, at)) = g.size {
            if declared != g.units.len() {
                return Err(cell_error(
                    at,
                    "group_size",
                    format!("group '{}' declares size {declared} but has {} rows", g.id, g.units.len()),
                ));
            }
        }
        let mut group = Group::new(g.id, g.units);
        if let Some((t, _)) = g.saturation {
            group = group.with_saturation(t);
        }
        out.push(group);
    }
    Ok(GroupedDataset::new(out)?)
}

pub fn load_dataset(path: &Path) -> Result<GroupedDataset, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(file))
}

/// Write `ds` in the schema read by [`read_dataset`]. Optional columns are
/// emitted when every group (or unit) carries the field; outcomes use the
/// shortest exact representation so the file reloads to an equal dataset.
pub fn write_dataset<W: Write>(ds: &GroupedDataset, writer: W) -> Result<(), CliError> {
    let groups = ds.groups();
    let units = || groups.iter().flat_map(|g| g.units.iter());
    let saturation = groups.iter().all(|g| g.saturation.is_some());
    let ranks = units().all(|u| u.neighbor_rank.is_some());
    let reference = units().all(|u| u.reference_set.is_some());
    let mut w = WriterBuilder::new().from_writer(writer);
    let mut header = vec!["group_id", "unit_id", "treatment", "outcome"];
    if saturation {
        header.push("saturation");
    }
    if ranks {
        header.push("neighbor_rank");
    }
    if reference {
        header.push("reference_ids");
    }
    let io = |e: csv::Error| CliError::Validation(format!("cannot write dataset: {e}"));
    w.write_record(&header).map_err(io)?;
    for g in groups {
        for u in &g.units {
            let mut row = vec![
                g.id.clone(),
                u.id.clone(),
                u8::from(u.treatment).to_string(),
                u.outcome.to_string(),
            ];
            if saturation {
                row.push(u8::from(g.saturation == Some(true)).to_string());
            }
            if ranks {
                row.push(u.neighbor_rank.map(|r| r.to_string()).unwrap_or_default());
            }
            if reference {
                row.push(u.reference_set.as_deref().map(|r| r.join(";")).unwrap_or_default());
            }
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Group counts by size, as `size:count` pairs.
pub fn size_summary_text(ds: &GroupedDataset) -> String {
    ds.size_summary()
        .iter()
        .map(|(size, count)| format!("{size}:{count}"))
        .collect::<Vec<_>>()
        .join(" ")
}
