//! SKT1 checkpoint format.
//!
//! A checkpoint is a single JSON document
//! `{"format":"SKT1",...,"params":{name:{"shape":[..],"data":[..]}}}` with
//! params sorted by name and every float printed with 17 significant digits,
//! so write -> read -> write is byte-identical.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "SKT1";

/// One serialized parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A parsed checkpoint: optional metadata fields plus the parameter table.
#[derive(Debug, Clone)]
pub struct Doc {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, ParamData>,
}

/// 17-significant-digit decimal form; round-trips any finite f64 exactly.
pub fn format_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Serialize metadata fields (pre-rendered JSON fragments, emitted in the
/// given order) and a sorted parameter table.
pub fn write_doc(meta: &[(&str, String)], params: &BTreeMap<String, ParamData>) -> String {
    let mut out = String::new();
    out.push_str("{\"format\":\"");
    out.push_str(FORMAT_TAG);
    out.push('"');
    for (key, value) in meta {
        out.push(',');
        out.push_str(&serde_json::to_string(key).expect("meta key"));
        out.push(':');
        out.push_str(value);
    }
    out.push_str(",\"params\":{");
    for (i, (name, p)) in params.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&serde_json::to_string(name).expect("param name"));
        out.push_str(":{\"shape\":[");
        for (j, s) in p.shape.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&s.to_string());
        }
        out.push_str("],\"data\":[");
        for (j, v) in p.data.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_f64(*v));
        }
        out.push_str("]}");
    }
    out.push_str("}}");
    out
}

pub fn read_doc(text: &str) -> Result<Doc> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|_| Error::MalformedLine { line: 1 })?;
    let obj = value.as_object().ok_or(Error::MalformedLine { line: 1 })?;
    if obj.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
        return Err(Error::Usage(format!("not a {} checkpoint", FORMAT_TAG)));
    }
    let mut meta = BTreeMap::new();
    let mut params = BTreeMap::new();
    for (key, val) in obj {
        if key == "format" {
            continue;
        }
        if key == "params" {
            let table = val.as_object().ok_or(Error::MalformedLine { line: 1 })?;
            for (name, entry) in table {
                let shape: Vec<usize> = entry
                    .get("shape")
                    .and_then(|v| v.as_array())
                    .ok_or(Error::MalformedLine { line: 1 })?
                    .iter()
                    .map(|v| v.as_u64().map(|u| u as usize))
                    .collect::<Option<_>>()
                    .ok_or(Error::MalformedLine { line: 1 })?;
                let data: Vec<f64> = entry
                    .get("data")
                    .and_then(|v| v.as_array())
                    .ok_or(Error::MalformedLine { line: 1 })?
                    .iter()
                    .map(|v| v.as_f64())
                    .collect::<Option<_>>()
                    .ok_or(Error::MalformedLine { line: 1 })?;
                if shape.iter().product::<usize>() != data.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "checkpoint param {}: shape {:?} vs {} values",
                        name,
                        shape,
                        data.len()
                    )));
                }
                params.insert(name.clone(), ParamData { shape, data });
            }
        } else {
            meta.insert(key.clone(), val.clone());
        }
    }
    Ok(Doc { meta, params })
}

pub fn write_file(path: &std::path::Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Doc> {
    let mut text = String::new();
    let f = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(f);
    loop {
        let n = reader.read_line(&mut text)?;
        if n == 0 {
            break;
        }
    }
    read_doc(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut r = rng::seeded(5);
        let mut params = BTreeMap::new();
        params.insert(
            "b".to_string(),
            ParamData { shape: vec![2, 3], data: rng::normal_vec(&mut r, 6, 1.0) },
        );
        params.insert(
            "a".to_string(),
            ParamData { shape: vec![4], data: vec![0.1, -2.5e-17, 3.0, f64::MIN_POSITIVE] },
        );
        let text = write_doc(&[("method", "\"sk-prompt\"".to_string())], &params);
        let doc = read_doc(&text).unwrap();
        assert_eq!(doc.params, params);
        assert_eq!(doc.meta.get("method").unwrap().as_str(), Some("sk-prompt"));
        let again = write_doc(&[("method", "\"sk-prompt\"".to_string())], &doc.params);
        assert_eq!(text, again);
    }

    #[test]
    fn format_f64_round_trips_extremes() {
        for v in [0.1, 1.0 / 3.0, -1e300, 1e-300, 123456789.123456789] {
            let s = format_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{}", s);
        }
    }

    #[test]
    fn rejects_wrong_format_tag() {
        assert!(read_doc("{\"format\":\"XXX\",\"params\":{}}").is_err());
    }
}
