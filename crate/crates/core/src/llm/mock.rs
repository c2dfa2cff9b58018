use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::client::LlmClient;
use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockPolicy {
    /// Same text for every prompt.
    Fixed { response: String },
    /// First rule whose keyword occurs in the prompt wins.
    Keyword {
        rules: Vec<KeywordRule>,
        #[serde(default)]
        fallback: Option<String>,
    },
    /// Responses in order; running past the end is an error.
    Script { responses: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub keyword: String,
    pub response: String,
}

#[derive(Debug, Default)]
struct State {
    prompts: Vec<String>,
    cursor: usize,
}

/// Deterministic offline stand-in that records every prompt.
#[derive(Debug)]
pub struct MockLlm {
    policy: MockPolicy,
    state: Mutex<State>,
}

impl MockLlm {
    pub fn new(policy: MockPolicy) -> Self {
        MockLlm {
            policy,
            state: Mutex::new(State::default()),
        }
    }

    pub fn fixed(response: impl Into<String>) -> Self {
        MockLlm::new(MockPolicy::Fixed {
            response: response.into(),
        })
    }

    pub fn script<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        MockLlm::new(MockPolicy::Script {
            responses: responses.into_iter().map(Into::into).collect(),
        })
    }

    /// Answers every KBR prompt with `reward`.
    pub fn fixed_kbr(reward: f64) -> Self {
        MockLlm::fixed(kbr_json(reward, "mock"))
    }

    pub fn prompts(&self) -> Vec<String> {
        self.state.lock().prompts.clone()
    }

    pub fn calls(&self) -> usize {
        self.state.lock().prompts.len()
    }
}

pub fn kbr_json(reward: f64, reason: &str) -> String {
    serde_json::json!({ "reward": reward, "reason": reason }).to_string()
}

pub fn refine_json(features: &[&str], reason: &str) -> String {
    serde_json::json!({ "selected_features": features, "reason": reason }).to_string()
}

impl LlmClient for MockLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let mut st = self.state.lock();
        st.prompts.push(prompt.to_string());
        match &self.policy {
            MockPolicy::Fixed { response } => Ok(response.clone()),
            MockPolicy::Keyword { rules, fallback } => rules
                .iter()
                .find(|r| prompt.contains(&r.keyword))
                .map(|r| r.response.clone())
                .or_else(|| fallback.clone())
                .ok_or(LlmError::NoMockRule),
            MockPolicy::Script { responses } => {
                let i = st.cursor;
                let r = responses
                    .get(i)
                    .cloned()
                    .ok_or(LlmError::ScriptExhausted(responses.len()))?;
                st.cursor += 1;
                Ok(r)
            }
        }
    }
}
