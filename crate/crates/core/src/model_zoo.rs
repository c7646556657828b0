//! Capture files and the synthetic device registry.
//!
//! Capture files use the JSON layout written by the common open-source LSTM
//! capture trainers:
//!
//! ```json
//! {
//!   "model_data": { "model": "SimpleRNN", "unit_type": "LSTM", "input_size": 1,
//!                   "hidden_size": 40, "num_layers": 1, "output_size": 1, "skip": 1 },
//!   "state_dict": {
//!     "rec.weight_ih_l0": [[...], ...],   // 4H rows x input_size
//!     "rec.weight_hh_l0": [[...], ...],   // 4H rows x H
//!     "rec.bias_ih_l0": [...],            // 4H
//!     "rec.bias_hh_l0": [...],            // 4H
//!     "lin.weight": [[...]],              // 1 x H
//!     "lin.bias": [b]
//!   }
//! }
//! ```
//!
//! Gate blocks within the `4H` rows are ordered input, forget, cell, output.
//! Arrays may be nested or flat; only the total length is checked.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::par;

pub const KEY_WEIGHT_IH: &str = "rec.weight_ih_l0";
pub const KEY_WEIGHT_HH: &str = "rec.weight_hh_l0";
pub const KEY_BIAS_IH: &str = "rec.bias_ih_l0";
pub const KEY_BIAS_HH: &str = "rec.bias_hh_l0";
pub const KEY_HEAD_WEIGHT: &str = "lin.weight";
pub const KEY_HEAD_BIAS: &str = "lin.bias";

/// Default number of conditioning values a conditioned capture expands into.
pub const DEFAULT_COND_POINTS: usize = 5;

/// One single-layer LSTM capture.
///
/// Matrices are row-major: `weight_ih` is `4H x input_size`, `weight_hh` is
/// `4H x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceModel {
    pub name: String,
    pub input_size: usize,
    pub hidden_size: usize,
    pub weight_ih: Vec<f32>,
    pub weight_hh: Vec<f32>,
    pub bias_ih: Vec<f32>,
    pub bias_hh: Vec<f32>,
    pub head_weight: Vec<f32>,
    pub head_bias: f32,
    pub skip: bool,
}

impl DeviceModel {
    /// Zero-weight model. With `skip` set it renders the identity.
    pub fn zeros(name: &str, input_size: usize, hidden_size: usize, skip: bool) -> Self {
        let g = 4 * hidden_size;
        DeviceModel {
            name: name.to_string(),
            input_size,
            hidden_size,
            weight_ih: vec![0.0; g * input_size],
            weight_hh: vec![0.0; g * hidden_size],
            bias_ih: vec![0.0; g],
            bias_hh: vec![0.0; g],
            head_weight: vec![0.0; hidden_size],
            head_bias: 0.0,
            skip,
        }
    }

    pub fn is_conditioned(&self) -> bool {
        self.input_size == 2
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size;
        if h == 0 {
            return Err(Error::Schema("hidden_size must be positive".into()));
        }
        if !(1..=2).contains(&self.input_size) {
            return Err(Error::Schema(format!("input_size must be 1 or 2, got {}", self.input_size)));
        }
        let checks: [(&str, usize, usize); 5] = [
            (KEY_WEIGHT_IH, self.weight_ih.len(), 4 * h * self.input_size),
            (KEY_WEIGHT_HH, self.weight_hh.len(), 4 * h * h),
            (KEY_BIAS_IH, self.bias_ih.len(), 4 * h),
            (KEY_BIAS_HH, self.bias_hh.len(), 4 * h),
            (KEY_HEAD_WEIGHT, self.head_weight.len(), h),
        ];
        for (key, got, want) in checks {
            if got != want {
                return Err(Error::Schema(format!(
                    "{key}: expected {want} values for hidden_size {h}, input_size {}, got {got}",
                    self.input_size
                )));
            }
        }
        let all = self
            .weight_ih
            .iter()
            .chain(&self.weight_hh)
            .chain(&self.bias_ih)
            .chain(&self.bias_hh)
            .chain(&self.head_weight)
            .chain(std::iter::once(&self.head_bias));
        if let Some(bad) = all.into_iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite weight {bad} in {}", self.name)));
        }
        Ok(())
    }
}

/// `4H*I + 4H^2 + 8H + H + 1`.
pub fn lstm_param_count(model: &DeviceModel) -> usize {
    let (h, i) = (model.hidden_size, model.input_size);
    4 * h * i + 4 * h * h + 8 * h + h + 1
}

#[derive(Deserialize)]
struct RawFile {
    model_data: RawMeta,
    state_dict: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawMeta {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    unit_type: Option<String>,
    input_size: usize,
    hidden_size: usize,
    #[serde(default = "one")]
    num_layers: usize,
    #[serde(default)]
    skip: Option<Value>,
}

fn one() -> usize {
    1
}

fn flatten_numbers(key: &str, v: &Value, out: &mut Vec<f32>) -> Result<()> {
    match v {
        Value::Array(items) => {
            for item in items {
                flatten_numbers(key, item, out)?;
            }
            Ok(())
        }
        Value::Number(n) => {
            let x = n
                .as_f64()
                .ok_or_else(|| Error::Parse(format!("{key}: unrepresentable number {n}")))?;
            out.push(x as f32);
            Ok(())
        }
        other => Err(Error::Parse(format!("{key}: expected number, found {other}"))),
    }
}

fn take_array(dict: &BTreeMap<String, Value>, key: &str) -> Result<Vec<f32>> {
    let v = dict
        .get(key)
        .ok_or_else(|| Error::Schema(format!("missing weight array {key}")))?;
    let mut out = Vec::new();
    flatten_numbers(key, v, &mut out)?;
    Ok(out)
}

fn skip_flag(v: &Option<Value>) -> Result<bool> {
    match v {
        None => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(Value::Number(n)) => Ok(n.as_f64().is_some_and(|x| x != 0.0)),
        Some(other) => Err(Error::Parse(format!("skip: expected bool or number, found {other}"))),
    }
}

/// Parses and validates a capture file.
pub fn parse_model_file(raw: &[u8]) -> Result<DeviceModel> {
    let file: RawFile = serde_json::from_slice(raw).map_err(|e| Error::Parse(e.to_string()))?;
    let meta = &file.model_data;
    if let Some(unit) = &meta.unit_type {
        if !unit.eq_ignore_ascii_case("lstm") {
            return Err(Error::Schema(format!("unsupported unit_type {unit}")));
        }
    }
    if meta.num_layers != 1 {
        return Err(Error::Schema(format!("only single-layer captures are supported, got {}", meta.num_layers)));
    }
    let head_bias = take_array(&file.state_dict, KEY_HEAD_BIAS)?;
    if head_bias.len() != 1 {
        return Err(Error::Schema(format!("{KEY_HEAD_BIAS}: expected 1 value, got {}", head_bias.len())));
    }
    let model = DeviceModel {
        name: meta.name.clone().unwrap_or_default(),
        input_size: meta.input_size,
        hidden_size: meta.hidden_size,
        weight_ih: take_array(&file.state_dict, KEY_WEIGHT_IH)?,
        weight_hh: take_array(&file.state_dict, KEY_WEIGHT_HH)?,
        bias_ih: take_array(&file.state_dict, KEY_BIAS_IH)?,
        bias_hh: take_array(&file.state_dict, KEY_BIAS_HH)?,
        head_weight: take_array(&file.state_dict, KEY_HEAD_WEIGHT)?,
        head_bias: head_bias[0],
        skip: skip_flag(&meta.skip)?,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Serialize)]
struct OutMeta<'a> {
    name: &'a str,
    model: &'static str,
    unit_type: &'static str,
    input_size: usize,
    hidden_size: usize,
    output_size: usize,
    num_layers: usize,
    skip: u8,
    bias_fl: bool,
}

#[derive(Serialize)]
struct OutFile<'a> {
    model_data: OutMeta<'a>,
    state_dict: BTreeMap<&'static str, Vec<Vec<f32>>>,
}

fn rows(data: &[f32], width: usize) -> Vec<Vec<f32>> {
    data.chunks(width).map(|c| c.to_vec()).collect()
}

/// Serializes a capture in the layout accepted by [`parse_model_file`].
pub fn serialize_model(model: &DeviceModel) -> Vec<u8> {
    let mut dict = BTreeMap::new();
    dict.insert(KEY_WEIGHT_IH, rows(&model.weight_ih, model.input_size));
    dict.insert(KEY_WEIGHT_HH, rows(&model.weight_hh, model.hidden_size));
    dict.insert(KEY_BIAS_IH, vec![model.bias_ih.clone()]);
    dict.insert(KEY_BIAS_HH, vec![model.bias_hh.clone()]);
    dict.insert(KEY_HEAD_WEIGHT, vec![model.head_weight.clone()]);
    dict.insert(KEY_HEAD_BIAS, vec![vec![model.head_bias]]);
    let file = OutFile {
        model_data: OutMeta {
            name: &model.name,
            model: "SimpleRNN",
            unit_type: "LSTM",
            input_size: model.input_size,
            hidden_size: model.hidden_size,
            output_size: 1,
            num_layers: 1,
            skip: model.skip as u8,
            bias_fl: true,
        },
        state_dict: dict,
    };
    serde_json::to_vec(&file).expect("capture serialization cannot fail")
}

/// Reads a capture from disk; the file stem names it when the file has no name.
pub fn load_model_file(path: &Path) -> Result<DeviceModel> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut model = parse_model_file(&raw)?;
    if model.name.is_empty() {
        model.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(model)
}

pub fn save_model_file(model: &DeviceModel, path: &Path) -> Result<()> {
    fs::write(path, serialize_model(model)).map_err(|e| Error::io(path, e))
}

/// One (capture, conditioning value) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDevice {
    pub device_id: usize,
    pub model_index: usize,
    pub conditioning: Option<f32>,
}

/// A capture plus where it came from.
#[derive(Debug, Clone)]
pub struct RegisteredModel {
    pub model: Arc<DeviceModel>,
    pub path: Option<PathBuf>,
}

/// The ordered, immutable set of synthetic devices.
#[derive(Debug, Clone)]
pub struct DeviceRegistry {
    models: Vec<RegisteredModel>,
    devices: Vec<SyntheticDevice>,
    cond_points: usize,
    skipped: Vec<(PathBuf, String)>,
}

/// Conditioning values a conditioned capture expands into: `i/(n-1)`, or
/// the midpoint when `n == 1`.
pub fn conditioning_values(cond_points: usize) -> Vec<f32> {
    match cond_points {
        0 => Vec::new(),
        1 => vec![0.5],
        n => (0..n).map(|i| (i as f64 / (n - 1) as f64) as f32).collect(),
    }
}

impl DeviceRegistry {
    /// Builds a registry from in-memory captures.
    pub fn from_models(models: Vec<DeviceModel>, cond_points: usize) -> Result<Self> {
        let entries = models
            .into_iter()
            .map(|m| {
                m.validate()?;
                Ok(RegisteredModel { model: Arc::new(m), path: None })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::expand(entries, cond_points, Vec::new())
    }

    fn expand(
        mut models: Vec<RegisteredModel>,
        cond_points: usize,
        skipped: Vec<(PathBuf, String)>,
    ) -> Result<Self> {
        if cond_points == 0 {
            return Err(Error::Value("cond_points must be at least 1".into()));
        }
        models.sort_by(|a, b| a.model.name.cmp(&b.model.name).then_with(|| a.path.cmp(&b.path)));
        let values = conditioning_values(cond_points);
        let mut devices = Vec::new();
        for (model_index, entry) in models.iter().enumerate() {
            if entry.model.is_conditioned() {
                for &v in &values {
                    devices.push(SyntheticDevice { device_id: devices.len(), model_index, conditioning: Some(v) });
                }
            } else {
                devices.push(SyntheticDevice { device_id: devices.len(), model_index, conditioning: None });
            }
        }
        Ok(DeviceRegistry { models, devices, cond_points, skipped })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn devices(&self) -> &[SyntheticDevice] {
        &self.devices
    }

    pub fn models(&self) -> &[RegisteredModel] {
        &self.models
    }

    pub fn cond_points(&self) -> usize {
        self.cond_points
    }

    /// Files that failed to parse while building from a directory.
    pub fn skipped(&self) -> &[(PathBuf, String)] {
        &self.skipped
    }

    pub fn device(&self, device_id: usize) -> Result<&SyntheticDevice> {
        self.devices
            .get(device_id)
            .ok_or(Error::DeviceIndex { index: device_id, count: self.devices.len() })
    }

    pub fn model_for(&self, device_id: usize) -> Result<&DeviceModel> {
        let d = self.device(device_id)?;
        Ok(&self.models[d.model_index].model)
    }

    /// Registry restricted to `device_ids`, renumbered from zero in the given order.
    pub fn subset(&self, device_ids: &[usize]) -> Result<Self> {
        let mut devices = Vec::with_capacity(device_ids.len());
        for (pos, &id) in device_ids.iter().enumerate() {
            let d = self.device(id)?;
            devices.push(SyntheticDevice { device_id: pos, ..d.clone() });
        }
        Ok(DeviceRegistry {
            models: self.models.clone(),
            devices,
            cond_points: self.cond_points,
            skipped: Vec::new(),
        })
    }

    /// CSV manifest: `device_id,model_name,model_file,conditioning_value`.
    pub fn manifest_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["device_id", "model_name", "model_file", "conditioning_value"])
            .expect("in-memory csv");
        for d in &self.devices {
            let m = &self.models[d.model_index];
            let file = m.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let cond = d.conditioning.map(|c| c.to_string()).unwrap_or_default();
            w.write_record([d.device_id.to_string(), m.model.name.clone(), file, cond])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }
}

/// Parses every `*.json` capture in `model_dir` and expands it into devices.
///
/// Files that fail to parse are collected in [`DeviceRegistry::skipped`];
/// construction fails only when nothing usable remains.
pub fn build_registry(model_dir: &Path, cond_points: usize) -> Result<DeviceRegistry> {
    if cond_points == 0 {
        return Err(Error::Value("cond_points must be at least 1".into()));
    }
    let rd = fs::read_dir(model_dir).map_err(|e| Error::io(model_dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(model_dir, e))?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            paths.push(p);
        }
    }
    paths.sort();
    let parsed = par::map(&paths, |p| load_model_file(p));
    let mut models = Vec::new();
    let mut skipped = Vec::new();
    for (path, res) in paths.into_iter().zip(parsed) {
        match res {
            Ok(m) => models.push(RegisteredModel { model: Arc::new(m), path: Some(path) }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    if models.is_empty() {
        return Err(Error::EmptyRegistry { dir: model_dir.to_path_buf(), skipped });
    }
    DeviceRegistry::expand(models, cond_points, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h2_model() -> DeviceModel {
        let mut m = DeviceModel::zeros("h2", 1, 2, true);
        for (i, v) in m.weight_ih.iter_mut().enumerate() {
            *v = 0.1 * i as f32;
        }
        for (i, v) in m.weight_hh.iter_mut().enumerate() {
            *v = -0.05 * i as f32;
        }
        m.head_weight = vec![0.5, -0.25];
        m.head_bias = 0.125;
        m
    }

    /// Counts every scalar stored in the parsed model, independent of the formula.
    fn field_count(m: &DeviceModel) -> usize {
        m.weight_ih.len() + m.weight_hh.len() + m.bias_ih.len() + m.bias_hh.len() + m.head_weight.len() + 1
    }

    #[test]
    fn h40_shapes() {
        let m = DeviceModel::zeros("a", 1, 40, false);
        let parsed = parse_model_file(&serialize_model(&m)).unwrap();
        assert_eq!(parsed.weight_hh.len(), 160 * 40);
        assert_eq!(parsed.weight_ih.len(), 160);
    }

    #[test]
    fn weight_ih_length_mismatch_is_schema_error() {
        let mut m = h2_model();
        m.weight_ih.pop();
        let raw = serialize_model(&m);
        assert!(matches!(parse_model_file(&raw), Err(Error::Schema(_))));
    }

    #[test]
    fn h2_param_count_matches_field_count() {
        let m = parse_model_file(&serialize_model(&h2_model())).unwrap();
        assert_eq!(field_count(&m), 43);
        assert_eq!(lstm_param_count(&m), field_count(&m));
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(lstm_param_count(&DeviceModel::zeros("a", 1, 40, false)), 6921);
        assert_eq!(lstm_param_count(&DeviceModel::zeros("a", 2, 40, false)), 7081);
        let h1 = DeviceModel::zeros("a", 1, 1, false);
        assert_eq!(lstm_param_count(&h1), field_count(&h1));
        assert_eq!(lstm_param_count(&h1), 18);
    }

    #[test]
    fn malformed_text_is_parse_error() {
        assert!(matches!(parse_model_file(b"{not json"), Err(Error::Parse(_))));
        assert!(matches!(parse_model_file(b"{\"model_data\": {}}"), Err(Error::Parse(_))));
    }

    #[test]
    fn overflowing_weight_is_value_error() {
        let raw = String::from_utf8(serialize_model(&h2_model())).unwrap();
        let raw = raw.replacen("\"lin.bias\":[[0.125]]", "\"lin.bias\":[[1e300]]", 1);
        assert!(matches!(parse_model_file(raw.as_bytes()), Err(Error::Value(_))));
    }

    #[test]
    fn flat_arrays_accepted() {
        let raw = r#"{"model_data":{"input_size":1,"hidden_size":1,"skip":0},
            "state_dict":{"rec.weight_ih_l0":[1,2,3,4],"rec.weight_hh_l0":[0,0,0,0],
            "rec.bias_ih_l0":[0,0,0,0],"rec.bias_hh_l0":[0,0,0,0],"lin.weight":[0.5],"lin.bias":0.25}}"#;
        let m = parse_model_file(raw.as_bytes()).unwrap();
        assert_eq!(m.weight_ih, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.head_bias, 0.25);
        assert!(!m.skip);
    }

    #[test]
    fn non_lstm_rejected() {
        let raw = String::from_utf8(serialize_model(&h2_model())).unwrap().replace("\"LSTM\"", "\"GRU\"");
        assert!(matches!(parse_model_file(raw.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn cond_points_expansion() {
        assert_eq!(conditioning_values(5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(conditioning_values(1), vec![0.5]);
        let models = vec![
            DeviceModel::zeros("b", 1, 2, true),
            DeviceModel::zeros("a", 2, 2, true),
            DeviceModel::zeros("c", 1, 2, true),
        ];
        let reg = DeviceRegistry::from_models(models, 5).unwrap();
        assert_eq!(reg.len(), 7);
        assert_eq!(reg.model_for(0).unwrap().name, "a");
        assert_eq!(reg.device(4).unwrap().conditioning, Some(1.0));
        assert_eq!(reg.model_for(5).unwrap().name, "b");
        assert!(reg.devices().iter().enumerate().all(|(i, d)| d.device_id == i));
    }

    #[test]
    fn empty_dir_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_registry(dir.path(), 5), Err(Error::EmptyRegistry { .. })));
    }

    #[test]
    fn bad_files_are_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        save_model_file(&h2_model(), &dir.path().join("good.json")).unwrap();
        fs::write(dir.path().join("bad.json"), b"nope").unwrap();
        let reg = build_registry(dir.path(), 5).unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.skipped().len(), 1);
        // the file carries its own name
        assert_eq!(reg.model_for(0).unwrap().name, "h2");
    }

    #[test]
    fn manifest_lists_every_device() {
        let reg = DeviceRegistry::from_models(vec![DeviceModel::zeros("a", 2, 1, true)], 3).unwrap();
        let csv = reg.manifest_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "1,a,,0.5");
    }
}
