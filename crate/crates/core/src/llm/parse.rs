use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbrResponse {
    pub reward: f64,
    pub reason: String,
    /// The model's value fell outside [-1, 1].
    #[serde(skip)]
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResponse {
    pub selected_features: Vec<String>,
    pub reason: String,
}

/// First well-formed JSON object embedded anywhere in `text`.
pub fn first_json_object(text: &str) -> Option<Map<String, Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn expect_keys(map: &Map<String, Value>, keys: &[&str]) -> Result<(), LlmError> {
    let mut found: Vec<&str> = map.keys().map(String::as_str).collect();
    found.sort_unstable();
    let mut want = keys.to_vec();
    want.sort_unstable();
    if found != want {
        return Err(LlmError::WrongKeys {
            expected: keys.iter().map(|k| k.to_string()).collect(),
            found: map.keys().cloned().collect(),
        });
    }
    Ok(())
}

fn reason_of(map: &Map<String, Value>) -> String {
    match &map["reason"] {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn parse_kbr(raw: &str) -> Result<KbrResponse, LlmError> {
    let map = first_json_object(raw).ok_or(LlmError::NoJson)?;
    expect_keys(&map, &["reward", "reason"])?;
    let value = map["reward"]
        .as_f64()
        .ok_or_else(|| LlmError::NonNumeric(map["reward"].to_string()))?;
    let clamped = !(-1.0..=1.0).contains(&value);
    let reward = (value.clamp(-1.0, 1.0) * 100.0).round() / 100.0;
    Ok(KbrResponse {
        reward,
        reason: reason_of(&map),
        clamped,
    })
}

/// Feature names are checked against the vocabulary by the caller.
pub fn parse_refine(raw: &str) -> Result<RefineResponse, LlmError> {
    let map = first_json_object(raw).ok_or(LlmError::NoJson)?;
    expect_keys(&map, &["selected_features", "reason"])?;
    let list = map["selected_features"]
        .as_array()
        .ok_or_else(|| LlmError::BadSelection("selected_features is not a list".into()))?;
    let mut names = Vec::with_capacity(list.len());
    for v in list {
        let name = v
            .as_str()
            .ok_or_else(|| LlmError::BadSelection(format!("feature name {v} is not a string")))?;
        names.push(name.trim().to_string());
    }
    if names.is_empty() || names.len() > 3 {
        return Err(LlmError::BadSelection(format!(
            "expected 1-3 features, got {}",
            names.len()
        )));
    }
    Ok(RefineResponse {
        selected_features: names,
        reason: reason_of(&map),
    })
}
