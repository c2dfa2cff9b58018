use std::collections::BTreeMap;
use std::sync::Arc;

use super::client::LlmClient;
use super::parse::{parse_kbr, KbrResponse};
use super::template::{render, TemplateKind};
use crate::dataset::{Composition, Property, PropertyVector, RegressionRow};
use crate::error::Result;
use crate::guidance::Prediction;
use crate::reward::KnowledgeScorer;

pub const DEFAULT_SIMILAR_K: usize = 3;

/// Scores candidates by asking an LLM with the KBR template.
pub struct KbrEvaluator {
    client: Arc<dyn LlmClient>,
    rule: String,
    reference: Vec<RegressionRow>,
    k: usize,
}

impl KbrEvaluator {
    /// `reference` should hold the dataset's BMG rows with measured properties.
    pub fn new(client: Arc<dyn LlmClient>, rule: impl Into<String>, reference: Vec<RegressionRow>) -> Self {
        KbrEvaluator {
            client,
            rule: rule.into(),
            reference,
            k: DEFAULT_SIMILAR_K,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    /// The `k` reference rows closest in max-norm, ties by dataset order.
    pub fn similar(&self, c: &Composition) -> Vec<&RegressionRow> {
        let mut idx: Vec<(f64, usize)> = self
            .reference
            .iter()
            .enumerate()
            .map(|(i, r)| (r.composition.max_abs_diff(c), i))
            .collect();
        idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.iter().take(self.k).map(|&(_, i)| &self.reference[i]).collect()
    }

    pub fn prompt(&self, next: &Composition, prediction: &Prediction) -> Result<String> {
        let similar = self
            .similar(next)
            .iter()
            .map(|r| format!("- {}: {}", r.composition.formula(), format_properties(&r.properties)))
            .collect::<Vec<_>>()
            .join("\n");
        let data = format!(
            "{}: BMG probability={:.3}; {}",
            next.formula(),
            prediction.class_prob,
            format_properties(&prediction.properties)
        );
        let mut b = BTreeMap::new();
        b.insert("rule".to_string(), self.rule.clone());
        b.insert(
            "similar_real_bmg".to_string(),
            if similar.is_empty() { "(none)".into() } else { similar },
        );
        b.insert("data".to_string(), data);
        Ok(render(TemplateKind::Kbr, &b)?)
    }

    pub fn evaluate(&self, next: &Composition, prediction: &Prediction) -> Result<KbrResponse> {
        let prompt = self.prompt(next, prediction)?;
        let raw = self.client.complete(&prompt)?;
        let resp = parse_kbr(&raw)?;
        if resp.clamped {
            log::warn!(
                "llm reward outside [-1, 1] for {}; clamped to {}",
                next.formula(),
                resp.reward
            );
        }
        Ok(resp)
    }
}

impl KnowledgeScorer for KbrEvaluator {
    fn score(&self, next: &Composition, prediction: &Prediction) -> Result<f64> {
        Ok(self.evaluate(next, prediction)?.reward)
    }
}

pub fn format_properties(p: &PropertyVector) -> String {
    Property::ALL
        .iter()
        .filter_map(|&prop| {
            p.get(prop)
                .map(|v| format!("{}={:.4} {}", prop.column(), v, prop.unit()))
        })
        .collect::<Vec<_>>()
        .join(", ")
}
