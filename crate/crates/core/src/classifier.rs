//! Question-type classification by prompting: in-context demonstrations
//! (one per label) or zero-shot with label descriptions only.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{ChatMessage, CompletionRequest, Gateway, LlmError};
use crate::model::{LabelSet, Question, QuestionType, TokenUsage, NULL};

pub const TAG: &str = "classifier";
pub const RETRY_TAG: &str = "classifier.retry";

const DEFAULT_CONFIG: &str = include_str!("../fixtures/classifier_default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "ICL")]
    Icl,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub strategy: Strategy,
    pub label_set: LabelSet,
    pub type_descriptions: BTreeMap<String, String>,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
    #[serde(default)]
    pub temperature: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("bundled classifier config is valid")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifierError {
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("no label from {labels:?} found in {raw:?}")]
    UnrecognizedLabel { raw: String, labels: Vec<String> },
    #[error(transparent)]
    Backend(#[from] LlmError),
}

impl ClassifierConfig {
    pub fn from_file(path: &Path) -> Result<Self, ClassifierError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClassifierError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ClassifierError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn zero_shot(mut self) -> Self {
        self.strategy = Strategy::ZeroShot;
        self
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        let labels = self.label_set.labels();
        if labels.is_empty() {
            return Err(ClassifierError::InvalidConfig("empty label set".into()));
        }
        for l in labels {
            if self
                .type_descriptions
                .get(l)
                .is_none_or(|d| d.trim().is_empty())
            {
                return Err(ClassifierError::InvalidConfig(format!(
                    "no description for label {l:?}"
                )));
            }
            if self.strategy == Strategy::Icl && !self.demonstrations.iter().any(|d| &d.label == l)
            {
                return Err(ClassifierError::InvalidConfig(format!(
                    "no demonstration for label {l:?}"
                )));
            }
        }
        if let Some(d) = self
            .demonstrations
            .iter()
            .find(|d| !self.label_set.contains(&d.label))
        {
            return Err(ClassifierError::InvalidConfig(format!(
                "demonstration label {:?} not in label set",
                d.label
            )));
        }
        Ok(())
    }

    /// Demonstrations ordered by their label's position in the label set.
    fn ordered_demonstrations(&self) -> Vec<&Demonstration> {
        let mut demos: Vec<&Demonstration> = self.demonstrations.iter().collect();
        let pos = |l: &str| self.label_set.labels().iter().position(|x| x == l);
        demos.sort_by_key(|d| pos(&d.label));
        demos
    }
}

fn quoted_list(labels: &[String]) -> String {
    let quoted: Vec<String> = labels.iter().map(|l| format!("'{l}'")).collect();
    match quoted.split_last() {
        Some((last, rest)) if !rest.is_empty() => format!("{} and {last}", rest.join(", ")),
        _ => quoted.join(""),
    }
}

pub fn build_classification_prompt(
    q: &Question,
    cfg: &ClassifierConfig,
) -> Result<Vec<ChatMessage>, ClassifierError> {
    cfg.validate()?;
    let labels = cfg.label_set.labels();
    let mut system = format!(
        "As an assistant, your task is to annotate the type of a multi-hop question. \
         The question type is one of {}.\n\nType descriptions:\n",
        quoted_list(labels)
    );
    for l in labels {
        system.push_str(&format!("- {l}: {}\n", cfg.type_descriptions[l]));
    }
    if cfg.strategy == Strategy::Icl {
        system.push_str("\nExamples:\n");
        for (i, d) in cfg.ordered_demonstrations().iter().enumerate() {
            system.push_str(&format!(
                "Example {}: {} (Output: {})\n",
                i + 1,
                d.question,
                d.label
            ));
        }
    }
    system.push_str("\nAnswer in the JSON form {\"type\": \"<label>\"}.");
    let user = format!(
        "Question: {}\nOutput exactly one type label from: {}.",
        q.text.trim(),
        labels.join(", ")
    );
    Ok(vec![ChatMessage::system(system), ChatMessage::user(user)])
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_alphanumeric() || c == '_')
}

/// Finds the label mentioned earliest in `raw` (case-insensitive, on word
/// boundaries; longer labels win ties). A JSON object with a `type` field
/// is unwrapped first.
pub fn parse_type_label(raw: &str, labels: &LabelSet) -> Result<QuestionType, ClassifierError> {
    let unwrapped = extract_json_type(raw);
    let hay = unwrapped.as_deref().unwrap_or(raw).to_ascii_lowercase();
    let mut best: Option<(usize, usize, &String)> = None;
    for label in labels.labels() {
        let needle = label.to_ascii_lowercase();
        if needle.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(off) = hay[from..].find(&needle) {
            let start = from + off;
            let end = start + needle.len();
            let before = hay[..start].chars().next_back();
            let after = hay[end..].chars().next();
            if !is_word_char(before) && !is_word_char(after) {
                let better = match best {
                    None => true,
                    Some((s, len, _)) => start < s || (start == s && needle.len() > len),
                };
                if better {
                    best = Some((start, needle.len(), label));
                }
                break;
            }
            from = start + needle.chars().next().map_or(1, char::len_utf8);
        }
    }
    best.map(|(_, _, l)| QuestionType::new(l.clone()))
        .ok_or_else(|| ClassifierError::UnrecognizedLabel {
            raw: raw.to_string(),
            labels: labels.labels().to_vec(),
        })
}

fn extract_json_type(raw: &str) -> Option<String> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end <= start {
        return None;
    }
    let v: Value = serde_json::from_str(&raw[start..=end]).ok()?;
    v.get("type")?.as_str().map(str::to_string)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub question_id: String,
    pub label: QuestionType,
    pub raw_responses: Vec<String>,
    pub usage: TokenUsage,
    /// True when no parse succeeded and the label is the fallback.
    pub fell_back: bool,
}

/// Classifies `q`. An unparseable answer gets one corrective retry; a
/// second failure yields the `Null` label (or the last label in the set if
/// `Null` is absent).
pub fn classify(
    q: &Question,
    cfg: &ClassifierConfig,
    gateway: &Gateway,
) -> Result<Classification, ClassifierError> {
    let mut messages = build_classification_prompt(q, cfg)?;
    let first = gateway.complete(&CompletionRequest::new(TAG, messages.clone(), cfg.temperature))?;
    let mut usage = first.usage;
    let mut raws = vec![first.content.clone()];
    if let Ok(label) = parse_type_label(&first.content, &cfg.label_set) {
        return Ok(Classification {
            question_id: q.id.clone(),
            label,
            raw_responses: raws,
            usage,
            fell_back: false,
        });
    }
    messages.push(ChatMessage::assistant(first.content));
    messages.push(ChatMessage::user(format!(
        "That answer did not contain a valid type. Reply with exactly one of: {}.",
        cfg.label_set.labels().join(", ")
    )));
    let second =
        gateway.complete(&CompletionRequest::new(RETRY_TAG, messages, cfg.temperature))?;
    usage += second.usage;
    raws.push(second.content.clone());
    let (label, fell_back) = match parse_type_label(&second.content, &cfg.label_set) {
        Ok(l) => (l, false),
        Err(_) => (fallback_label(&cfg.label_set), true),
    };
    Ok(Classification {
        question_id: q.id.clone(),
        label,
        raw_responses: raws,
        usage,
        fell_back,
    })
}

pub fn fallback_label(labels: &LabelSet) -> QuestionType {
    if labels.contains(NULL) {
        QuestionType::null()
    } else {
        QuestionType::new(labels.labels().last().cloned().unwrap_or_else(|| NULL.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockRule};
    use std::sync::Arc;

    const EXTENDED: &str = include_str!("../fixtures/classifier_extended.json");

    fn extended() -> ClassifierConfig {
        serde_json::from_str(EXTENDED).unwrap()
    }

    fn q(text: &str) -> Question {
        Question::new("q", text)
    }

    #[test]
    fn zero_shot_prompt_has_descriptions_and_no_examples() {
        let cfg = ClassifierConfig::default().zero_shot();
        let msgs = build_classification_prompt(&q("Who?"), &cfg).unwrap();
        let sys = &msgs[0].content;
        for phrase in [
            "connecting them through intermediate entities",
            "comparing the similarities and differences",
            "sequence of events occurring",
            "cannot be obtained from the retrieved documents",
        ] {
            assert!(sys.contains(phrase), "missing {phrase}");
        }
        assert!(!sys.contains("Example 1"));
        assert!(msgs[1].content.contains("Who?"));
    }

    #[test]
    fn icl_prompt_has_one_example_per_label_in_order() {
        let msgs = build_classification_prompt(&q("Who?"), &ClassifierConfig::default()).unwrap();
        let sys = &msgs[0].content;
        assert_eq!(sys.matches("(Output: ").count(), 4);
        let pos: Vec<usize> = ["Inference)", "Comparison)", "Temporal)", "Null)"]
            .iter()
            .map(|l| sys.find(&format!("(Output: {l}")).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn extended_label_set_carries_compositional_demo() {
        let msgs = build_classification_prompt(&q("Who?"), &extended()).unwrap();
        assert!(msgs[0]
            .content
            .contains("Why did the founder of Versus die? (Output: Compositional)"));
        assert!(msgs[0].content.contains("'Bridge-comparison', 'Compositional' and 'Null'"));
    }

    #[test]
    fn icl_requires_demo_per_label() {
        let mut cfg = ClassifierConfig::default();
        cfg.demonstrations.retain(|d| d.label != "Temporal");
        assert!(matches!(
            build_classification_prompt(&q("x"), &cfg),
            Err(ClassifierError::InvalidConfig(_))
        ));
        assert!(build_classification_prompt(&q("x"), &cfg.zero_shot()).is_ok());
    }

    #[test]
    fn parse_labels() {
        let set = LabelSet::default();
        let p = |s: &str| parse_type_label(s, &set).map(|t| t.as_str().to_string());
        assert_eq!(p(r#"{"type": "Inference"}"#).unwrap(), "Inference");
        assert_eq!(p("comparison.").unwrap(), "Comparison");
        assert_eq!(p("TEMPORAL").unwrap(), "Temporal");
        assert!(matches!(
            p("I think none apply"),
            Err(ClassifierError::UnrecognizedLabel { .. })
        ));
        assert!(p("nullify").is_err());
        assert_eq!(p("Null or maybe Inference").unwrap(), "Null");
    }

    #[test]
    fn parse_prefers_bridge_comparison_over_comparison() {
        let set = extended().label_set;
        let t = parse_type_label("Bridge-comparison", &set).unwrap();
        assert_eq!(t.as_str(), "Bridge-comparison");
        let t = parse_type_label("(Output: bridge-comparison)", &set).unwrap();
        assert_eq!(t.as_str(), "Bridge-comparison");
    }

    fn gateway(rules: Vec<MockRule>) -> Gateway {
        Gateway::new(Arc::new(MockBackend::new(rules)))
    }

    #[test]
    fn classify_parses_scripted_label() {
        let gw = gateway(vec![MockRule::new("classifier", "Temporal")]);
        let c = classify(&q("When?"), &ClassifierConfig::default(), &gw).unwrap();
        assert_eq!(c.label.as_str(), "Temporal");
        assert!(!c.fell_back);
    }

    #[test]
    fn classify_retries_then_falls_back_to_null() {
        let gw = gateway(vec![MockRule::new("classifier*", "no idea, sorry")]);
        let c = classify(&q("When?"), &ClassifierConfig::default(), &gw).unwrap();
        assert_eq!(c.label.as_str(), "Null");
        assert!(c.fell_back);
        assert_eq!(c.raw_responses.len(), 2);
        assert_eq!(gw.ledger().entries().len(), 2);
        assert_eq!(c.usage, gw.ledger().total());
    }

    #[test]
    fn classify_recovers_on_retry() {
        let gw = gateway(vec![
            MockRule::new("classifier.retry", "Comparison"),
            MockRule::new("classifier", "hmm"),
        ]);
        let c = classify(&q("Same?"), &ClassifierConfig::default(), &gw).unwrap();
        assert_eq!(c.label.as_str(), "Comparison");
        assert!(!c.fell_back);
    }

    #[test]
    fn bridge_comparison_question_under_extended_set() {
        let question = "Are both director of film FAQ: Frequently Asked Questions and director of film The Big Money from the same country?";
        let gw = gateway(vec![MockRule::new("classifier", "(Output: Bridge-comparison)")
            .containing(question)]);
        let c = classify(&q(question), &extended(), &gw).unwrap();
        assert_eq!(c.label.as_str(), "Bridge-comparison");
    }

    #[test]
    fn prompt_is_deterministic() {
        let cfg = ClassifierConfig::default();
        let a = build_classification_prompt(&q("Who?"), &cfg).unwrap();
        let b = build_classification_prompt(&q("Who?"), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
