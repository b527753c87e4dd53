use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sunspin::dynamics::Tolerances;
use sunspin::model::FieldParams;
use sunspin::protocols::*;
use sunspin::readout::DetectionModel;
use sunspin::spin_core::index_of;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Rabi,
    Ramsey,
    DualRamsey,
    Ancilla,
    LeakageScan,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Rabi => "rabi",
            Protocol::Ramsey => "ramsey",
            Protocol::DualRamsey => "dual_ramsey",
            Protocol::Ancilla => "ancilla",
            Protocol::LeakageScan => "leakage_scan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissipationPreset {
    None,
    Strontium,
    ScatteringOnly,
    MonochromaticScattering,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DissipationChoice {
    Preset(DissipationPreset),
    Custom(Dissipation),
}

impl DissipationChoice {
    pub fn resolve(&self) -> Dissipation {
        match self {
            Self::Preset(DissipationPreset::None) => Dissipation::none(),
            Self::Preset(DissipationPreset::Strontium) => Dissipation::strontium(),
            Self::Preset(DissipationPreset::ScatteringOnly) => Dissipation::scattering_only(),
            Self::Preset(DissipationPreset::MonochromaticScattering) => Dissipation::monochromatic_scattering(),
            Self::Custom(d) => d.clone(),
        }
    }
}

impl Default for DissipationChoice {
    fn default() -> Self {
        Self::Preset(DissipationPreset::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardPreset {
    None,
    Strontium,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InhomogeneityChoice {
    Preset(StandardPreset),
    Custom(Inhomogeneity),
}

impl Default for InhomogeneityChoice {
    fn default() -> Self {
        Self::Preset(StandardPreset::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionPreset {
    Ideal,
    Strontium,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectionChoice {
    Preset(DetectionPreset),
    Custom(DetectionModel),
}

impl Default for DetectionChoice {
    fn default() -> Self {
        Self::Preset(DetectionPreset::Ideal)
    }
}

fn one() -> usize {
    1
}

/// One experiment: protocol, model, noise, detection and the scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    #[serde(default)]
    pub fields: Option<FieldParams>,
    #[serde(default)]
    pub dissipation: DissipationChoice,
    #[serde(default)]
    pub inhomogeneity: InhomogeneityChoice,
    /// Shot-to-shot noise; none when absent.
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub detection: DetectionChoice,
    pub scan: Value,
    #[serde(default = "one")]
    pub n_shots: usize,
    #[serde(default)]
    pub n_atoms: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub tolerances: Option<Tolerances>,
}

/// Typed scan for each protocol.
pub enum Scan {
    Rabi(RabiConfig),
    Ramsey(RamseyConfig),
    Dual(DualConfig),
    Ancilla(AncillaConfig),
    Leakage(LeakageConfig),
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub scan: Scan,
    pub model: Option<Model>,
    pub noise: NoiseSpec,
    pub settings: RunSettings,
    pub tol: Tolerances,
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

/// Replaces `{"start", "step", "count"}` objects by the arrays they describe.
pub fn expand_ranges(v: &mut Value) -> Result<(), CliError> {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&str> = map.keys().map(|k| k.as_str()).collect();
            keys.sort_unstable();
            if keys == ["count", "start", "step"] {
                let num = |k: &str| map[k].as_f64().ok_or_else(|| schema(format!("range `{k}` must be a number")));
                let (start, step) = (num("start")?, num("step")?);
                let count = map["count"].as_u64().ok_or_else(|| schema("range `count` must be a non-negative integer"))?;
                *v = Value::Array((0..count).map(|k| Value::from(start + k as f64 * step)).collect());
                return Ok(());
            }
            for x in map.values_mut() {
                expand_ranges(x)?;
            }
        }
        Value::Array(xs) => {
            for x in xs {
                expand_ranges(x)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Sets `path` (dot separated) in `root` to `value`, parsed as JSON when possible.
pub fn apply_param(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| schema(format!("--param expects key=value, got `{assignment}`")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(schema(format!("bad parameter path `{path}`")));
    }
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().unwrap()
            }
            _ => return Err(schema(format!("`{}` is not an object", keys[..i].join(".")))),
        };
        if i + 1 == keys.len() {
            map.insert(k.to_string(), value);
            return Ok(());
        }
        node = map.entry(k.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

fn finite(name: &str, x: f64) -> Result<(), CliError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(schema(format!("`{name}` must be finite")))
    }
}

fn positive(name: &str, x: f64) -> Result<(), CliError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(schema(format!("`{name}` must be positive")))
    }
}

fn non_empty(name: &str, v: &[f64]) -> Result<(), CliError> {
    if v.is_empty() {
        return Err(schema(format!("empty scan: `scan.{name}` has no points")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(schema(format!("`scan.{name}` has non-finite values")));
    }
    Ok(())
}

fn level(name: &str, m: f64) -> Result<(), CliError> {
    index_of(m).map(|_| ()).map_err(|e| schema(format!("`{name}`: {e}")))
}

fn typed<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, CliError> {
    serde_json::from_value(v.clone()).map_err(|e| schema(format!("scan: {e}")))
}

/// Parses and validates a raw configuration; every failure here is a schema error.
pub fn load(raw: &Value) -> Result<Experiment, CliError> {
    let mut raw = raw.clone();
    expand_ranges(&mut raw)?;
    let config: ExperimentConfig = serde_json::from_value(raw).map_err(|e| schema(e.to_string()))?;
    if config.n_shots == 0 {
        return Err(schema("`n_shots` must be at least 1"));
    }
    if config.n_atoms == Some(0) {
        return Err(schema("`n_atoms` must be at least 1"));
    }
    let scan = match config.protocol {
        Protocol::Rabi => {
            let c: RabiConfig = typed(&config.scan)?;
            c.pair.validate().map_err(|e| schema(format!("`scan.pair`: {e}")))?;
            level("scan.initial", c.initial)?;
            positive("scan.omega", c.omega)?;
            non_empty("durations", &c.durations)?;
            Scan::Rabi(c)
        }
        Protocol::Ramsey => {
            let c: RamseyConfig = typed(&config.scan)?;
            c.pair.validate().map_err(|e| schema(format!("`scan.pair`: {e}")))?;
            level("scan.initial", c.initial)?;
            positive("scan.omega", c.omega)?;
            finite("scan.offset", c.offset)?;
            non_empty("t_values", &c.t_values)?;
            Scan::Ramsey(c)
        }
        Protocol::DualRamsey => {
            let c: DualConfig = typed(&config.scan)?;
            positive("scan.omega", c.omega)?;
            non_empty("t_values", &c.t_values)?;
            Scan::Dual(c)
        }
        Protocol::Ancilla => {
            let c: AncillaConfig = typed(&config.scan)?;
            positive("scan.omega", c.omega)?;
            non_empty("phis", &c.phis)?;
            Scan::Ancilla(c)
        }
        Protocol::LeakageScan => {
            let c: LeakageConfig = typed(&config.scan)?;
            non_empty("ratios", &c.ratios)?;
            if c.ratios.iter().any(|&r| !(r > 0.0)) {
                return Err(schema("`scan.ratios` must be positive"));
            }
            if c.phi_points < 2 {
                return Err(schema("`scan.phi_points` must be at least 2"));
            }
            if !(c.q != 0.0 && c.q.is_finite()) {
                return Err(schema("`scan.q` must be finite and non-zero"));
            }
            Scan::Leakage(c)
        }
    };
    let model = match (&config.fields, config.protocol) {
        (_, Protocol::LeakageScan) => None,
        (None, _) => return Err(schema("missing field `fields`")),
        (Some(f), _) => {
            finite("fields.b", f.b)?;
            finite("fields.q", f.q)?;
            let inhomogeneity = match &config.inhomogeneity {
                InhomogeneityChoice::Preset(StandardPreset::None) => Inhomogeneity::default(),
                InhomogeneityChoice::Preset(StandardPreset::Strontium) => Inhomogeneity::strontium(),
                InhomogeneityChoice::Custom(i) => *i,
            };
            Some(Model { fields: f.clone(), dissipation: config.dissipation.resolve(), inhomogeneity })
        }
    };
    let detection = match &config.detection {
        DetectionChoice::Preset(DetectionPreset::Ideal) => DetectionModel::ideal(),
        DetectionChoice::Preset(DetectionPreset::Strontium) => DetectionModel::strontium(),
        DetectionChoice::Custom(d) => d.clone(),
    };
    let settings = RunSettings { n_shots: config.n_shots, n_atoms: config.n_atoms, detection, seed: config.seed };
    let noise = config.noise.clone().unwrap_or_else(NoiseSpec::none);
    let tol = config.tolerances.clone().unwrap_or_default();
    Ok(Experiment { config, scan, model, noise, settings, tol })
}

pub const BUNDLED: [(&str, &str); 5] = [
    ("fig2a_rabi", include_str!("../configs/fig2a_rabi.json")),
    ("ramsey", include_str!("../configs/ramsey.json")),
    ("dual_ramsey", include_str!("../configs/dual_ramsey.json")),
    ("ancilla", include_str!("../configs/ancilla.json")),
    ("leakage_scan", include_str!("../configs/leakage_scan.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn ranges_expand() {
        let mut v = json!({"scan": {"durations": {"start": 0.0, "step": 0.5, "count": 3}}});
        expand_ranges(&mut v).unwrap();
        assert_eq!(v["scan"]["durations"], json!([0.0, 0.5, 1.0]));
    }

    #[test]
    fn params_set_nested_values() {
        let mut v = json!({"fields": {"b": 1.0, "q": 2.0}});
        apply_param(&mut v, "fields.q=-300").unwrap();
        apply_param(&mut v, "output=run one").unwrap();
        apply_param(&mut v, "noise.b_sigma=2").unwrap();
        assert_eq!(v["fields"]["q"], json!(-300));
        assert_eq!(v["output"], json!("run one"));
        assert_eq!(v["noise"]["b_sigma"], json!(2));
        assert!(apply_param(&mut v, "fields.q.x=1").is_err());
        assert!(apply_param(&mut v, "novalue").is_err());
    }

    #[test]
    fn bundled_configs_validate() {
        for (name, text) in BUNDLED {
            let v: Value = serde_json::from_str(text).unwrap();
            load(&v).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: Value = serde_json::from_str(bundled("fig2a_rabi").unwrap()).unwrap();
        v["colour"] = json!("red");
        assert!(matches!(load(&v), Err(CliError::Schema(_))));
        let mut v: Value = serde_json::from_str(bundled("fig2a_rabi").unwrap()).unwrap();
        v["scan"]["omgea"] = json!(3.0);
        assert!(matches!(load(&v), Err(CliError::Schema(_))));
    }

    #[test]
    fn empty_scan_is_schema_error() {
        let mut v: Value = serde_json::from_str(bundled("fig2a_rabi").unwrap()).unwrap();
        v["scan"]["durations"] = json!([]);
        assert!(matches!(load(&v), Err(CliError::Schema(_))));
    }
}
