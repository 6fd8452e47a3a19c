use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use spillover::sim::{coverage_curve, simulate_dataset, CoverageRecord, StudySummary};

use crate::config::{parse_config, preset, Overrides, SimulateConfig, PRESETS};
use crate::data::write_dataset;
use crate::error::CliError;
use crate::render::{csv_num, csv_string, fmt6, fmt_opt, to_json, Output, Table};
use crate::GlobalArgs;

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Config file (`key = value` lines or a JSON object).
    #[arg(value_name = "CONFIG", required_unless_present = "preset", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Bundled config: `table3`, `figure1` or `smoke`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Write one simulated dataset (first grid point) as CSV instead of running the study.
    #[arg(long, value_name = "FILE")]
    pub emit_dataset: Option<PathBuf>,
}

#[derive(Serialize)]
struct StudyJson<'a> {
    studies: &'a [StudySummary],
    coverage: &'a [CoverageRecord],
}

fn load(args: &SimulateArgs, global: &GlobalArgs) -> Result<SimulateConfig, CliError> {
    let text = match (&args.config, &args.preset) {
        (_, Some(name)) => preset(name)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(k, _)| *k).collect();
                CliError::Usage(format!("unknown preset '{name}' (available: {})", names.join(", ")))
            })?
            .to_string(),
        (Some(path), None) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?,
        (None, None) => return Err(CliError::Usage("give a config file or --preset".into())),
    };
    let overrides = Overrides {
        seed: global.seed,
        bootstrap: global.bootstrap,
        mode: global.mode.as_deref().map(str::parse).transpose().map_err(CliError::usage)?,
    };
    parse_config(&text, overrides)
}

pub fn run(global: &GlobalArgs, args: &SimulateArgs) -> Result<Output, CliError> {
    let cfg = load(args, global)?;
    if let Some(path) = &args.emit_dataset {
        let b = &cfg.base;
        let ds = simulate_dataset(&b.mechanism, &b.model, b.n, b.groups, b.seed)?;
        let file = std::fs::File::create(path)?;
        write_dataset(&ds, std::io::BufWriter::new(file))?;
        let text = format!(
            "wrote {} units in {} groups ({}, n = {}, seed {}) to {}\n",
            ds.unit_count(),
            ds.groups().len(),
            b.mechanism,
            b.n,
            b.seed,
            path.display()
        );
        let json = serde_json::json!({
            "path": path.display().to_string(),
            "units": ds.unit_count(),
            "groups": ds.groups().len(),
            "mechanism": b.mechanism.name(),
            "n": b.n,
            "seed": b.seed,
        });
        return Ok(Output::new("dataset", text, json));
    }

    let curve = coverage_curve(&cfg.base, &cfg.ns, &cfg.mechanisms)?;
    let text = render_panels(&cfg, &curve.studies);
    let json = to_json(&StudyJson {
        studies: &curve.studies,
        coverage: &curve.records,
    });
    let rows: Vec<Vec<String>> = curve
        .records
        .iter()
        .map(|r| vec![r.n.to_string(), r.mechanism.clone(), r.ci_kind.to_string(), csv_num(r.coverage)])
        .collect();
    let mut out = Output::new("study", text, json);
    out.files.push(("coverage.csv".into(), csv_string(&["n", "mechanism", "ci_kind", "coverage"], &rows)));
    Ok(out)
}

fn render_panels(cfg: &SimulateConfig, studies: &[StudySummary]) -> String {
    let b = &cfg.base;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "simulation: G = {}, R = {}, {}, target {}, model {}, seed {}",
        b.groups,
        b.replications,
        b.bootstrap
            .map_or_else(|| "no bootstrap".to_string(), |s| format!("B = {} ({})", s.replications, s.method)),
        b.target,
        b.model.label(),
        b.seed
    );
    let truths: Vec<f64> = studies.iter().map(|s| s.truth).collect();
    let same_truth = truths.windows(2).all(|w| w[0] == w[1]);
    if same_truth {
        let _ = writeln!(text, "population value {}", fmt6(truths[0]));
    }
    for (m, chunk) in cfg.mechanisms.iter().zip(studies.chunks(cfg.ns.len())) {
        let _ = writeln!(text, "\n{m}");
        let mut table = Table::new(std::iter::once("statistic".to_string()).chain(cfg.ns.iter().map(|n| format!("n={n}"))));
        let mut row = |label: &str, f: &dyn Fn(&StudySummary) -> String| {
            table.row(std::iter::once(label.to_string()).chain(chunk.iter().map(f)).collect());
        };
        if !same_truth {
            row("truth", &|s| fmt6(s.truth));
        }
        row("condition", &|s| fmt6(s.condition_value));
        row("bias", &|s| fmt_opt(s.bias));
        row("variance", &|s| fmt_opt(s.variance));
        row("coverage (normal)", &|s| fmt_opt(s.coverage_normal));
        row("coverage (bootstrap)", &|s| fmt_opt(s.coverage_bootstrap));
        row("prop. undefined", &|s| fmt6(s.prop_undefined));
        text.push_str(&table.render(2));
    }
    text
}
