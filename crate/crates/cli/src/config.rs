//! Monte Carlo study configuration.
//!
//! A config is either `key = value` lines (`#` starts a comment) or a JSON
//! object with the same keys. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `groups` | 300 | number of groups `G` |
//! | `n` | required | neighbors per unit: `11`, `2,5,8,11` or `1..11` |
//! | `mechanisms` | `sr:p=0.5; 2srfm` | `;`-separated mechanism specs |
//! | `model` | the control-spillover threshold model | outcome mean family |
//! | `noise` | `bernoulli` | `bernoulli` or `gaussian:sd=<sd>` |
//! | `target` | `theta:d=0` | contrast of interest |
//! | `mode` | `exchangeable` | `exchangeable` or `saturated` |
//! | `replications` | 10000 | Monte Carlo replications `R` |
//! | `bootstrap` | 0 | wild-bootstrap replications `B`, 0 for none |
//! | `ci` | `percentile-t` | `percentile-t` or `percentile` |
//! | `bootstrap_weights` | `unit` | `unit` or `group` |
//! | `seed` | 0 | master seed |
//! | `level` | 0.95 | confidence level |

use std::collections::BTreeMap;
use std::str::FromStr;

use spillover::inference::{BootstrapSpec, CiMethod, WeightScheme};
use spillover::model::{ModelSpec, Noise};
use spillover::sim::{StudyConfig, Target};
use spillover::{AssignmentMechanism, AssignmentMode, OutcomeModel};

use crate::error::CliError;

pub const PRESETS: [(&str, &str); 3] = [
    ("table3", include_str!("../presets/table3.cfg")),
    ("figure1", include_str!("../presets/figure1.cfg")),
    ("smoke", include_str!("../presets/smoke.cfg")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    let name = name.trim_end_matches(".cfg");
    PRESETS.iter().find(|(k, _)| *k == name).map(|(_, v)| *v)
}

const KEYS: [&str; 13] = [
    "groups",
    "n",
    "mechanisms",
    "model",
    "noise",
    "target",
    "mode",
    "replications",
    "bootstrap",
    "ci",
    "bootstrap_weights",
    "seed",
    "level",
];

#[derive(Clone, Debug)]
pub struct SimulateConfig {
    /// Study settings; `n` and `mechanism` hold the first grid point.
    pub base: StudyConfig,
    pub ns: Vec<usize>,
    pub mechanisms: Vec<AssignmentMechanism>,
}

impl SimulateConfig {
    /// Study configuration of every grid point, mechanisms outermost.
    pub fn grid(&self) -> Vec<StudyConfig> {
        self.mechanisms
            .iter()
            .flat_map(|m| {
                self.ns.iter().map(move |&n| StudyConfig {
                    n,
                    mechanism: m.clone(),
                    ..self.base.clone()
                })
            })
            .collect()
    }
}

/// Overrides taken from global command-line flags.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bootstrap: Option<usize>,
    pub mode: Option<AssignmentMode>,
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Usage(format!("config key '{key}': cannot parse '{value}' ({expected})"))
}

fn key_values(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    if text.trim_start().starts_with('{') {
        return json_values(text);
    }
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, got '{line}'", k + 1)))?;
        let key = key.trim().to_ascii_lowercase();
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key '{key}'", k + 1)));
        }
    }
    Ok(out)
}

fn json_values(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    use serde_json::Value;
    let map: serde_json::Map<String, Value> =
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid JSON config: {e}")))?;
    let scalar = |key: &str, v: &Value| -> Result<String, CliError> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            _ => Err(CliError::Usage(format!("config key '{key}': expected a string, number or list"))),
        }
    };
    map.iter()
        .map(|(key, v)| {
            let key = key.to_ascii_lowercase();
            let value = match v {
                Value::Array(items) => {
                    let sep = if key == "mechanisms" || key == "mechanism" { ";" } else { "," };
                    items.iter().map(|x| scalar(&key, x)).collect::<Result<Vec<_>, _>>()?.join(sep)
                }
                other => scalar(&key, other)?,
            };
            Ok((key, value))
        })
        .collect()
}

fn parse_ns(value: &str) -> Result<Vec<usize>, CliError> {
    let err = || bad("n", value, "expected 11, 2,5,8,11 or 1..11");
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| err())?;
            let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| err())?;
            if a > b {
                return Err(err());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| err())?);
        }
    }
    if out.is_empty() {
        return Err(err());
    }
    Ok(out)
}

pub fn parse_noise(value: &str) -> Result<Noise, CliError> {
    let v = value.trim().to_ascii_lowercase();
    if v == "bernoulli" {
        return Ok(Noise::Bernoulli);
    }
    let sd = v
        .strip_prefix("gaussian")
        .map(|rest| rest.trim_start_matches(':').trim())
        .map(|rest| if rest.is_empty() { "sd=1" } else { rest })
        .and_then(|rest| rest.strip_prefix("sd="))
        .and_then(|sd| sd.trim().parse::<f64>().ok())
        .filter(|sd| sd.is_finite() && *sd >= 0.0)
        .ok_or_else(|| bad("noise", value, "expected bernoulli or gaussian:sd=<sd>"))?;
    Ok(Noise::Gaussian { sd })
}

fn number<T: FromStr>(kv: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, CliError> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| bad(key, v, "expected a number")),
    }
}

/// Parse config text and apply command-line overrides. Every grid point is
/// validated before anything runs.
pub fn parse_config(text: &str, overrides: Overrides) -> Result<SimulateConfig, CliError> {
    let mut kv = key_values(text)?;
    if let Some(m) = kv.remove("mechanism") {
        if kv.insert("mechanisms".into(), m).is_some() {
            return Err(CliError::Usage("config sets both 'mechanism' and 'mechanisms'".into()));
        }
    }
    if let Some(unknown) = kv.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(CliError::Usage(format!("unknown config key '{unknown}' (known: {})", KEYS.join(", "))));
    }
    let ns = parse_ns(kv.get("n").ok_or_else(|| CliError::Usage("config is missing required key 'n'".into()))?)?;
    let mechanisms = kv
        .get("mechanisms")
        .map_or("sr:p=0.5; 2srfm", String::as_str)
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| AssignmentMechanism::from_str(s).map_err(CliError::usage))
        .collect::<Result<Vec<_>, _>>()?;
    if mechanisms.is_empty() {
        return Err(CliError::Usage("config lists no mechanisms".into()));
    }
    let spec = match kv.get("model") {
        Some(m) => ModelSpec::from_str(m).map_err(CliError::usage)?,
        None => ModelSpec::control_spillover(),
    };
    let noise = kv.get("noise").map_or(Ok(Noise::Bernoulli), |v| parse_noise(v))?;
    let model = OutcomeModel::from_spec(&spec, noise);
    let mut base = StudyConfig::new(number(&kv, "groups", 300)?, ns[0], mechanisms[0].clone(), model);
    if let Some(t) = kv.get("target") {
        base.target = Target::from_str(t).map_err(CliError::usage)?;
    }
    base.mode = match overrides.mode {
        Some(m) => m,
        None => kv.get("mode").map_or(Ok(AssignmentMode::Exchangeable), |m| m.parse().map_err(CliError::usage))?,
    };
    base.replications = number(&kv, "replications", base.replications)?;
    base.seed = overrides.seed.unwrap_or(number(&kv, "seed", 0)?);
    base.level = number(&kv, "level", base.level)?;
    let b = overrides.bootstrap.unwrap_or(number(&kv, "bootstrap", 0)?);
    if b > 0 {
        let mut spec = BootstrapSpec::new(b, 0);
        if let Some(ci) = kv.get("ci") {
            spec.method = CiMethod::from_str(ci).map_err(CliError::usage)?;
        }
        spec.weights = match kv.get("bootstrap_weights").map(|w| w.trim().to_ascii_lowercase()) {
            None => WeightScheme::Unit,
            Some(w) if w == "unit" => WeightScheme::Unit,
            Some(w) if w == "group" => WeightScheme::Group,
            Some(w) => return Err(bad("bootstrap_weights", &w, "expected unit or group")),
        };
        base.bootstrap = Some(spec);
    }
    let cfg = SimulateConfig { base, ns, mechanisms };
    for point in cfg.grid() {
        point.validate().map_err(|e| {
            CliError::Usage(format!("invalid study at n = {}, mechanism {}: {e}", point.n, point.mechanism))
        })?;
    }
    Ok(cfg)
}
