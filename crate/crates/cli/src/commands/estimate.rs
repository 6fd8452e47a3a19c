use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::Serialize;
use spillover::estimators::{
    build_cell_table, difference_in_means, direct_and_spillover, lim_fit, partial_population_effect, pooled_spillover,
    stratify_and_estimate, CellTable, Contrast, EffectEstimate, RegressionFit, SizePolicy, StratifiedEstimates,
    VarianceDivisor,
};
use spillover::inference::{exchangeability_test, normal_ci, wild_bootstrap_ci, BootstrapSpec, CiMethod, WeightScheme};
use spillover::linalg::SeKind;
use spillover::{AssignmentMode, GroupedDataset};

use super::exchangeability::{SizeTest, SizeTestJson};
use super::{peers_label, treated_peers};
use crate::data::{load_dataset, size_summary_text};
use crate::error::CliError;
use crate::render::{csv_num, csv_string, fmt6, fmt_opt, to_json, Output, Table};
use crate::GlobalArgs;

/// Largest `n` for which the saturated panel is added automatically.
const SATURATED_PANEL_MAX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SeArg {
    Clustered,
    Robust,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CiArg {
    PercentileT,
    Percentile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    Unit,
    Group,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Dataset CSV.
    pub dataset: PathBuf,
    /// Standard errors for regressions.
    #[arg(long, value_enum, default_value_t = SeArg::Clustered)]
    pub se: SeArg,
    /// Confidence level of the intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Require the partial-population contrast (needs a `saturation` column).
    #[arg(long)]
    pub partial_population: bool,
    /// Use the N-1 divisor for cell variances.
    #[arg(long)]
    pub unbiased_variance: bool,
    /// Wild-bootstrap interval construction.
    #[arg(long, value_enum, default_value_t = CiArg::PercentileT)]
    pub ci: CiArg,
    /// Draw bootstrap weights per unit or per group.
    #[arg(long, value_enum, default_value_t = WeightsArg::Unit)]
    pub bootstrap_weights: WeightsArg,
}

struct Context {
    level: f64,
    kind: SeKind,
    divisor: VarianceDivisor,
    bootstrap: Option<BootstrapSpec>,
    notes: Vec<String>,
}

impl Context {
    fn note(&mut self, msg: String) -> usize {
        match self.notes.iter().position(|m| *m == msg) {
            Some(k) => k + 1,
            None => {
                self.notes.push(msg);
                self.notes.len()
            }
        }
    }

    fn effect(&mut self, parameter: String, contrast: String, est: Result<EffectEstimate, String>) -> EffectRow {
        let mut row = EffectRow {
            parameter,
            contrast,
            estimate: None,
            se: None,
            ci_lower: None,
            ci_upper: None,
            boot_lower: None,
            boot_upper: None,
            note: None,
        };
        match est {
            Ok(e) => {
                row.estimate = Some(e.value);
                row.se = Some(e.se);
                match normal_ci(&e, self.level) {
                    Ok(ci) => {
                        row.ci_lower = Some(ci.lower);
                        row.ci_upper = Some(ci.upper);
                    }
                    Err(err) => row.note = Some(self.note(err.to_string())),
                }
            }
            Err(msg) => row.note = Some(self.note(msg)),
        }
        row
    }

    fn contrast_row(&mut self, parameter: String, table: &CellTable, contrast: &Contrast) -> EffectRow {
        let est = contrast.evaluate(table).map_err(|u| u.to_string());
        let defined = est.is_ok();
        let mut row = self.effect(parameter, contrast.to_string(), est);
        if let (true, Some(spec)) = (defined, self.bootstrap) {
            match wild_bootstrap_ci(table, contrast, &spec, self.level) {
                Ok(b) => {
                    row.boot_lower = Some(b.interval.lower);
                    row.boot_upper = Some(b.interval.upper);
                }
                Err(e) => row.note = Some(self.note(format!("bootstrap: {e}"))),
            }
        }
        row
    }

    fn fit(&mut self, label: &str, fit: spillover::Result<RegressionFit>) -> Option<FitReport> {
        match fit {
            Ok(f) => {
                let rows = f
                    .names
                    .iter()
                    .map(|name| {
                        let est = f.estimate(name).ok_or_else(|| format!("coefficient {name} missing"));
                        self.effect(name.clone(), String::new(), est)
                    })
                    .collect();
                Some(FitReport {
                    label: label.to_string(),
                    nobs: f.nobs,
                    clusters: f.clusters,
                    rows,
                })
            }
            Err(e) => {
                self.note(format!("{label}: {e}"));
                None
            }
        }
    }
}

#[derive(Serialize)]
struct EffectRow {
    parameter: String,
    /// Cell-mean contrast behind the estimate; empty for regression coefficients.
    contrast: String,
    estimate: Option<f64>,
    se: Option<f64>,
    ci_lower: Option<f64>,
    ci_upper: Option<f64>,
    boot_lower: Option<f64>,
    boot_upper: Option<f64>,
    /// Footnote number explaining a missing value.
    note: Option<usize>,
}

#[derive(Serialize)]
struct CellRow {
    assignment: String,
    count: usize,
    mean: Option<f64>,
    variance: Option<f64>,
}

#[derive(Serialize)]
struct FitReport {
    label: String,
    nobs: usize,
    clusters: usize,
    rows: Vec<EffectRow>,
}

#[derive(Serialize)]
struct Panel {
    mode: AssignmentMode,
    cells: Vec<CellRow>,
    effects: Vec<EffectRow>,
}

#[derive(Serialize)]
struct StratumReport {
    size: usize,
    n: usize,
    groups: usize,
    units: usize,
    difference_in_means: EffectRow,
    lim: Option<FitReport>,
    lim_interacted: Option<FitReport>,
    cell_means: Panel,
    pooled: Vec<EffectRow>,
    saturated: Option<Panel>,
    exchangeability: Option<SizeTestJson>,
}

#[derive(Serialize)]
struct Skipped {
    size: usize,
    groups: usize,
    reason: String,
}

#[derive(Serialize)]
struct EstimateReport {
    units: usize,
    groups: usize,
    sizes: BTreeMap<usize, usize>,
    mode: AssignmentMode,
    policy: SizePolicy,
    se: SeKind,
    level: f64,
    bootstrap: Option<BootstrapSpec>,
    strata: Vec<StratumReport>,
    skipped: Vec<Skipped>,
    pooled_regression: Option<FitReport>,
    partial_population: Option<EffectRow>,
    footnotes: Vec<String>,
}

impl EstimateReport {
    fn rows(&self) -> impl Iterator<Item = &EffectRow> + '_ {
        let strata = self.strata.iter().flat_map(|s| {
            std::iter::once(&s.difference_in_means)
                .chain(s.lim.iter().chain(&s.lim_interacted).flat_map(|f| &f.rows))
                .chain(&s.cell_means.effects)
                .chain(&s.pooled)
                .chain(s.saturated.iter().flat_map(|p| &p.effects))
        });
        strata
            .chain(self.pooled_regression.iter().flat_map(|f| &f.rows))
            .chain(&self.partial_population)
    }

    fn any_defined(&self) -> bool {
        self.rows().any(|r| r.estimate.is_some())
    }
}

fn cells(table: &CellTable) -> Vec<CellRow> {
    table
        .iter()
        .map(|(a, s)| CellRow {
            assignment: a.to_string(),
            count: s.count,
            mean: s.mean,
            variance: s.var,
        })
        .collect()
}

fn panel(table: &CellTable, ctx: &mut Context) -> Panel {
    let peers = direct_and_spillover(table).peers;
    let mut rows = Vec::new();
    for p in &peers {
        rows.push(ctx.contrast_row(format!("tau[{}]", peers_label(p)), table, &Contrast::direct(p.clone())));
    }
    for own in [false, true] {
        for peers in peers.iter().filter(|p| treated_peers(p) > 0) {
            let name = format!("theta{}[{}]", u8::from(own), peers_label(peers));
            rows.push(ctx.contrast_row(name, table, &Contrast::spillover(own, peers.clone())));
        }
    }
    Panel {
        mode: table.mode(),
        cells: cells(table),
        effects: rows,
    }
}

fn stratum(sub: &GroupedDataset, size: usize, mode: AssignmentMode, ctx: &mut Context) -> Result<StratumReport, CliError> {
    let n = size - 1;
    let table = build_cell_table(sub, mode)?.with_divisor(ctx.divisor);
    let cell_means = panel(&table, ctx);
    let exchangeable = match mode {
        AssignmentMode::Exchangeable => table,
        _ => build_cell_table(sub, AssignmentMode::Exchangeable)?.with_divisor(ctx.divisor),
    };
    let bucket: Vec<usize> = (1..=n).collect();
    let mut pooled = Vec::new();
    for own in [false, true] {
        let name = format!("delta{}[1..{n}]", u8::from(own));
        let row = match pooled_spillover(&exchangeable, own, &bucket) {
            Ok(p) => {
                let terms: Vec<String> = p
                    .bucket
                    .iter()
                    .zip(&p.weights)
                    .map(|(s, w)| format!("{} theta{}[{s}]", fmt6(*w), u8::from(own)))
                    .collect();
                ctx.effect(name, terms.join(" + "), Ok(p.estimate))
            }
            Err(u) => ctx.effect(name, String::new(), Err(u.to_string())),
        };
        pooled.push(row);
    }
    let dim = difference_in_means(sub, ctx.kind).map_err(|e| e.to_string());
    let difference_in_means = ctx.effect("beta_D".into(), "mean(Y|D=1) - mean(Y|D=0)".into(), dim);
    let lim = ctx.fit(&format!("linear-in-means (size {size})"), lim_fit(sub, false, ctx.kind));
    let lim_interacted = ctx.fit(&format!("interacted linear-in-means (size {size})"), lim_fit(sub, true, ctx.kind));

    let mut saturated = None;
    let mut exchangeability = None;
    if sub.has_ranks() {
        if n <= SATURATED_PANEL_MAX || mode == AssignmentMode::Saturated {
            let sat = build_cell_table(sub, AssignmentMode::Saturated)?.with_divisor(ctx.divisor);
            let test = exchangeability_test(&sat)?;
            exchangeability = Some(SizeTestJson::from(&SizeTest {
                size,
                n,
                groups: sub.groups().len(),
                test,
            }));
            if mode != AssignmentMode::Saturated {
                saturated = Some(panel(&sat, ctx));
            }
        } else {
            ctx.note(format!(
                "size {size}: saturated panel and exchangeability test omitted for n > {SATURATED_PANEL_MAX}; use --mode saturated"
            ));
        }
    }
    Ok(StratumReport {
        size,
        n,
        groups: sub.groups().len(),
        units: sub.unit_count(),
        difference_in_means,
        lim,
        lim_interacted,
        cell_means,
        pooled,
        saturated,
        exchangeability,
    })
}

pub fn run(global: &GlobalArgs, args: &EstimateArgs) -> Result<Output, CliError> {
    let mode = super::mode(global)?;
    let policy = super::policy(global)?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Usage(format!("--level must lie in (0,1), got {}", args.level)));
    }
    let bootstrap = global
        .bootstrap
        .map(|b| {
            let mut spec = BootstrapSpec::new(b, global.seed.unwrap_or(0));
            spec.method = match args.ci {
                CiArg::PercentileT => CiMethod::PercentileT,
                CiArg::Percentile => CiMethod::Percentile,
            };
            spec.weights = match args.bootstrap_weights {
                WeightsArg::Unit => WeightScheme::Unit,
                WeightsArg::Group => WeightScheme::Group,
            };
            spec.validate().map(|()| spec).map_err(CliError::usage)
        })
        .transpose()?;
    let ds = load_dataset(&args.dataset)?;
    if args.partial_population && !ds.has_saturation() {
        return Err(spillover::Error::MissingSaturation.into());
    }
    let mut ctx = Context {
        level: args.level,
        kind: match args.se {
            SeArg::Clustered => SeKind::Clustered,
            SeArg::Robust => SeKind::Robust,
        },
        divisor: if args.unbiased_variance {
            VarianceDivisor::Unbiased
        } else {
            VarianceDivisor::Plugin
        },
        bootstrap,
        notes: Vec::new(),
    };

    let mut strata = Vec::new();
    let mut skipped = Vec::new();
    let mut pooled_regression = None;
    match policy {
        SizePolicy::Separate => {
            for (size, sub) in ds.strata() {
                let groups = sub.groups().len();
                if size < 2 || groups < 2 {
                    let reason = if size < 2 { "groups without neighbors" } else { "fewer than two groups" };
                    skipped.push(Skipped {
                        size,
                        groups,
                        reason: reason.into(),
                    });
                    continue;
                }
                strata.push(stratum(&sub, size, mode, &mut ctx)?);
            }
        }
        other => {
            let label = match other {
                SizePolicy::Proportion => "treated-share regression",
                _ => "size fixed-effects regression",
            };
            let fit = stratify_and_estimate(&ds, other, mode, ctx.kind).map(|s| match s {
                StratifiedEstimates::SizeFixedEffects(f) | StratifiedEstimates::Proportion(f) => f,
                StratifiedEstimates::Separate { .. } => unreachable!("policy is not separate"),
            });
            pooled_regression = ctx.fit(label, fit);
        }
    }
    let partial_population = ds.has_saturation().then(|| {
        let est = partial_population_effect(&ds).map_err(|e| e.to_string());
        ctx.effect("delta_pp".into(), "mean(Y|D=0,T=1) - mean(Y|T=0)".into(), est)
    });

    let report = EstimateReport {
        units: ds.unit_count(),
        groups: ds.groups().len(),
        sizes: ds.size_summary(),
        mode,
        policy,
        se: ctx.kind,
        level: args.level,
        bootstrap,
        strata,
        skipped,
        pooled_regression,
        partial_population,
        footnotes: ctx.notes,
    };
    let text = render(&report, &ds);
    let mut out = Output::new("estimate", text, to_json(&report));
    out.files = csv_files(&report);
    if !report.any_defined() {
        out.failure = Some(CliError::Undefined("no estimate could be computed; see the footnotes".into()));
    }
    Ok(out)
}

fn effect_table(rows: &[EffectRow], bootstrap: bool, text: &mut String) {
    let mut headers = vec!["parameter", "estimate", "se", "ci_lower", "ci_upper"];
    if bootstrap {
        headers.extend(["boot_lower", "boot_upper"]);
    }
    headers.extend(["contrast", "note"]);
    let mut t = Table::new(headers);
    for r in rows {
        let mut cells = vec![
            r.parameter.clone(),
            r.estimate.map_or_else(|| "undefined".into(), fmt6),
            fmt_opt(r.se),
            fmt_opt(r.ci_lower),
            fmt_opt(r.ci_upper),
        ];
        if bootstrap {
            cells.extend([fmt_opt(r.boot_lower), fmt_opt(r.boot_upper)]);
        }
        cells.push(r.contrast.clone());
        cells.push(r.note.map_or_else(String::new, |k| format!("[{k}]")));
        t.row(cells);
    }
    text.push_str(&t.render(2));
}

fn cell_table(rows: &[CellRow], text: &mut String) {
    let mut t = Table::new(["assignment", "count", "mean", "variance"]);
    for c in rows {
        t.row(vec![c.assignment.clone(), c.count.to_string(), fmt_opt(c.mean), fmt_opt(c.variance)]);
    }
    text.push_str(&t.render(2));
}

fn render(r: &EstimateReport, ds: &GroupedDataset) -> String {
    let boot = r.bootstrap.is_some();
    let mut text = String::new();
    let _ = writeln!(
        text,
        "dataset: {} units in {} groups; groups by size {}",
        r.units,
        r.groups,
        size_summary_text(ds)
    );
    let se = match r.se {
        SeKind::Clustered => "group-clustered",
        SeKind::Robust => "heteroskedasticity-robust",
    };
    let _ = write!(text, "mode {}, policy {}, {se} regression s.e., {}% intervals", r.mode, r.policy, fmt6(100.0 * r.level));
    match &r.bootstrap {
        Some(b) => {
            let _ = writeln!(text, ", wild bootstrap B = {} ({}, seed {})", b.replications, b.method, b.seed);
        }
        None => text.push('\n'),
    }
    for s in &r.strata {
        let _ = writeln!(
            text,
            "\n== group size {}: n = {} neighbors, {} groups, {} units ==",
            s.size, s.n, s.groups, s.units
        );
        let _ = writeln!(text, "cell means ({})", s.cell_means.mode);
        cell_table(&s.cell_means.cells, &mut text);
        text.push_str("panel 1: difference in means\n");
        effect_table(std::slice::from_ref(&s.difference_in_means), false, &mut text);
        text.push_str("panel 2: linear-in-means\n");
        for f in s.lim.iter().chain(&s.lim_interacted) {
            let _ = writeln!(text, "  {}", f.label);
            effect_table(&f.rows, false, &mut text);
        }
        let _ = writeln!(text, "panel 3: cell-mean contrasts ({})", s.cell_means.mode);
        effect_table(&s.cell_means.effects, boot, &mut text);
        text.push_str("pooled spillover\n");
        effect_table(&s.pooled, false, &mut text);
        if let Some(p) = &s.saturated {
            text.push_str("saturated cell means\n");
            cell_table(&p.cells, &mut text);
            text.push_str("saturated contrasts\n");
            effect_table(&p.effects, boot, &mut text);
        }
        if let Some(x) = &s.exchangeability {
            match (x.statistic, x.df, x.p_value) {
                (Some(w), Some(df), Some(p)) => {
                    let _ = writeln!(text, "exchangeability: W = {}, df = {df}, p = {}", fmt6(w), fmt6(p));
                }
                _ => {
                    let reason = x.reason.as_deref().unwrap_or("no comparable cells");
                    let _ = writeln!(text, "exchangeability: not testable: {reason}");
                }
            }
        }
    }
    for s in &r.skipped {
        let _ = writeln!(text, "\nskipped group size {} ({} groups): {}", s.size, s.groups, s.reason);
    }
    if let Some(f) = &r.pooled_regression {
        let _ = writeln!(text, "\n== {} ({} units, {} groups) ==", f.label, f.nobs, f.clusters);
        effect_table(&f.rows, false, &mut text);
    }
    if let Some(pp) = &r.partial_population {
        text.push_str("\npartial-population contrast\n");
        effect_table(std::slice::from_ref(pp), false, &mut text);
    }
    if !r.footnotes.is_empty() {
        text.push_str("\nfootnotes\n");
        for (k, n) in r.footnotes.iter().enumerate() {
            let _ = writeln!(text, "  [{}] {n}", k + 1);
        }
    }
    text
}

fn csv_files(r: &EstimateReport) -> Vec<(String, String)> {
    let mut cells = Vec::new();
    let mut effects = Vec::new();
    let mut push_effects = |size: String, panel: &str, rows: &[EffectRow]| {
        for e in rows {
            effects.push(vec![
                size.clone(),
                panel.to_string(),
                e.parameter.clone(),
                e.contrast.clone(),
                csv_num(e.estimate),
                csv_num(e.se),
                csv_num(e.ci_lower),
                csv_num(e.ci_upper),
                csv_num(e.boot_lower),
                csv_num(e.boot_upper),
            ]);
        }
    };
    for s in &r.strata {
        let size = s.size.to_string();
        push_effects(size.clone(), "difference-in-means", std::slice::from_ref(&s.difference_in_means));
        for (panel, f) in [("lim", &s.lim), ("lim-interacted", &s.lim_interacted)] {
            if let Some(f) = f {
                push_effects(size.clone(), panel, &f.rows);
            }
        }
        push_effects(size.clone(), &s.cell_means.mode.to_string(), &s.cell_means.effects);
        push_effects(size.clone(), "pooled", &s.pooled);
        for p in std::iter::once(&s.cell_means).chain(&s.saturated) {
            for c in &p.cells {
                cells.push(vec![
                    size.clone(),
                    p.mode.to_string(),
                    c.assignment.clone(),
                    c.count.to_string(),
                    csv_num(c.mean),
                    csv_num(c.variance),
                ]);
            }
        }
        if let Some(p) = &s.saturated {
            push_effects(size.clone(), "saturated", &p.effects);
        }
    }
    if let Some(f) = &r.pooled_regression {
        push_effects("all".into(), &r.policy.to_string(), &f.rows);
    }
    if let Some(pp) = &r.partial_population {
        push_effects("all".into(), "partial-population", std::slice::from_ref(pp));
    }
    let effect_header = [
        "size", "panel", "parameter", "contrast", "estimate", "se", "ci_lower", "ci_upper", "boot_lower", "boot_upper",
    ];
    vec![
        ("effects.csv".into(), csv_string(&effect_header, &effects)),
        (
            "cells.csv".into(),
            csv_string(&["size", "mode", "assignment", "count", "mean", "variance"], &cells),
        ),
    ]
}
