use quantgam::data::Dataset;
use quantgam::formula::parse_formula;
use quantgam::model::{check, fit_multi, predict, FitOptions};
use quantgam::persist::{write_atomic, ModelFile, Provenance};
use quantgam::simulate::{simulate, Preset};
use serde_json::Value;

fn sample_file(n: usize) -> (ModelFile, Dataset) {
    let base = simulate(Preset::Sine, n, 31).unwrap();
    let g: Vec<&str> = (0..n).map(|i| ["lo", "mid", "hi"][i % 3]).collect();
    let data = base.with_factor("g", &g).unwrap();
    let spec = parse_formula("y ~ s(x, k=8) + f:g").unwrap();
    let opts = FitOptions::default();
    let models: Vec<_> =
        fit_multi(&spec, &data, &[0.3, 0.7], &opts).unwrap().into_iter().map(Result::unwrap).collect();
    let checks = models.iter().map(|m| check(m, &data).unwrap()).collect();
    let prov = Provenance {
        tool: "quantgam".into(),
        version: "test".into(),
        options: opts,
        data_fingerprint: "abc".into(),
        n_rows: n,
        schema: Default::default(),
    };
    (ModelFile::new(spec.render(), models, vec![], checks, prov), data)
}

#[test]
fn round_trip_preserves_predictions_bitwise() {
    let (file, _) = sample_file(300);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    file.save(&path).unwrap();
    let back = ModelFile::load(&path).unwrap();
    assert_eq!(back, file);

    let new = Dataset::new(4)
        .with_scalar("x", vec![0.013, 1.7, 2.5, -0.1])
        .unwrap()
        .with_factor("g", &["hi", "lo", "mid", "hi"])
        .unwrap();
    for (a, b) in file.models.iter().zip(&back.models) {
        let pa = predict(a, &new, true, true).unwrap();
        let pb = predict(b, &new, true, true).unwrap();
        assert_eq!(pa, pb);
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn rejects_other_schema_versions() {
    assert!(ModelFile::from_json(r#"{"schema_version": 99}"#).unwrap_err().to_string().contains("99"));
    assert!(ModelFile::from_json("{}").is_err());
    assert!(ModelFile::from_json("not json").is_err());
}

#[test]
fn atomic_write_replaces_content() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.txt");
    write_atomic(&path, b"one").unwrap();
    write_atomic(&path, b"two").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"two");
    assert!(write_atomic(dir.path().join("missing/out.txt"), b"x").is_err());
}

/// Walks `value` against the subset of JSON Schema used by the shipped model schema:
/// `$ref`, `oneOf`, `type: null`, `required`, `properties` and `items`.
fn conforms(value: &Value, schema: &Value, root: &Value, path: &str) -> Result<(), String> {
    if let Some(r) = schema["$ref"].as_str() {
        let name = r.trim_start_matches("#/$defs/");
        return conforms(value, &root["$defs"][name], root, path);
    }
    if let Some(alts) = schema["oneOf"].as_array() {
        return if alts.iter().any(|a| conforms(value, a, root, path).is_ok()) {
            Ok(())
        } else {
            Err(format!("{path}: no alternative matches"))
        };
    }
    if schema["type"] == "null" {
        return if value.is_null() { Ok(()) } else { Err(format!("{path}: expected null")) };
    }
    if let Some(obj) = value.as_object() {
        for key in schema["required"].as_array().into_iter().flatten() {
            let key = key.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{path}: missing `{key}`"));
            }
        }
        if let Some(props) = schema["properties"].as_object() {
            for (k, v) in obj {
                match props.get(k) {
                    Some(sub) => conforms(v, sub, root, &format!("{path}.{k}"))?,
                    None => return Err(format!("{path}: undocumented `{k}`")),
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            conforms(v, items, root, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

#[test]
fn shipped_schema_describes_model_files() {
    let schema: Value = serde_json::from_str(include_str!("../../../docs/model-schema.json")).unwrap();
    let (file, _) = sample_file(150);
    let value: Value = serde_json::from_str(&file.to_json().unwrap()).unwrap();
    conforms(&value, &schema, &schema, "$").unwrap();

    let mut broken = value.clone();
    broken["models"][0].as_object_mut().unwrap().remove("v_s");
    assert!(conforms(&broken, &schema, &schema, "$").unwrap_err().contains("v_s"));
    broken["models"][0]["extra"] = Value::Bool(true);
    assert!(conforms(&broken, &schema, &schema, "$").is_err());
}
