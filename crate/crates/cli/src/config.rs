use std::path::Path;
use std::sync::Arc;

use glassrl::dataset::PercentileMethod;
use glassrl::environment::DEFAULT_BASE_COUNT;
use glassrl::evaluation::BudgetedSearchConfig;
use glassrl::guidance::GuidanceConfig;
use glassrl::llm::{
    kbr_json, refine_json, KeywordRule, LlmClient, LlmEndpointConfig, MockLlm, MockPolicy, RetryingClient,
};
use glassrl::trainer::TrainConfig;
use glassrl::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Offline,
    Live,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdParams {
    pub percentile: f64,
    pub method: PercentileMethod,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams {
            percentile: 0.8,
            method: PercentileMethod::Linear,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmParams {
    pub mode: LlmMode,
    pub endpoint: LlmEndpointConfig,
    /// Offline answers; the default suggests one size-mismatch feature and
    /// scores every knowledge prompt 0.5.
    pub mock: Option<MockPolicy>,
}

impl Default for LlmParams {
    fn default() -> Self {
        LlmParams {
            mode: LlmMode::Offline,
            endpoint: LlmEndpointConfig::default(),
            mock: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub thresholds: ThresholdParams,
    pub bases: usize,
    pub baseline: BudgetedSearchConfig,
    pub llm: LlmParams,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            thresholds: ThresholdParams::default(),
            bases: DEFAULT_BASE_COUNT,
            baseline: BudgetedSearchConfig::default(),
            llm: LlmParams::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let p = self.thresholds.percentile;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!("threshold percentile {p} must lie in (0, 1)")));
        }
        if self.bases == 0 {
            return Err(Error::Config("at least one exploration base is needed".into()));
        }
        self.llm.endpoint.validate()?;
        Ok(())
    }

    pub fn llm_client(&self) -> Result<Arc<dyn LlmClient>> {
        Ok(match self.llm.mode {
            LlmMode::Offline => {
                let policy = self.llm.mock.clone().unwrap_or_else(default_mock);
                Arc::new(MockLlm::new(policy))
            }
            LlmMode::Live => Arc::new(RetryingClient::from_env(self.llm.endpoint.clone())?),
        })
    }
}

fn default_mock() -> MockPolicy {
    MockPolicy::Keyword {
        rules: vec![KeywordRule {
            keyword: "selected_features".into(),
            response: refine_json(&["atomic_radius:std"], "offline mock"),
        }],
        fallback: Some(kbr_json(0.5, "offline mock")),
    }
}
