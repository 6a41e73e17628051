//! Rewriting an insight set learned on one task family for another.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures;
use crate::insights::{render_insights, InsightSet};
use crate::llm::{Gateway, Role};
use crate::model::{RenderStyle, Trajectory};
use crate::prompt::{fill, PromptBundle};

const FEWSHOT_INTRO: &str = "Here are example trials from the target task:";
const FEWSHOT_OUTRO: &str = "(END OF EXAMPLES)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub source_insights: InsightSet,
    pub source_description: String,
    pub target_description: String,
    #[serde(default)]
    pub target_fewshots: Vec<Trajectory>,
}

impl TransferSpec {
    fn validate(&self) -> Result<()> {
        if self.source_description.trim().is_empty() || self.target_description.trim().is_empty() {
            return Err(Error::usage(
                "transfer needs non-empty source and target descriptions",
            ));
        }
        Ok(())
    }

    /// The fewshot block, or an empty string when there are no demonstrations.
    pub fn fewshot_block(&self) -> String {
        if self.target_fewshots.is_empty() {
            return String::new();
        }
        let body = self
            .target_fewshots
            .iter()
            .map(|t| t.render(RenderStyle::Full).trim_end().to_string())
            .collect::<Vec<_>>()
            .join("\n\n");
        format!("{FEWSHOT_INTRO}\n{body}\n{FEWSHOT_OUTRO}\n\n")
    }

    pub fn render(&self, template: &str) -> String {
        fill(
            template,
            &[
                ("source_task", &self.source_description),
                ("target_task", &self.target_description),
                ("fewshots", &self.fewshot_block()),
                ("insights", &render_insights(&self.source_insights)),
            ],
        )
    }
}

static NUMBERED_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*[.)]\s+(\S.*)$").expect("static regex"));

/// Texts of the `N. text` lines in `completion`, in order.
pub fn parse_numbered(completion: &str) -> Vec<String> {
    completion
        .lines()
        .filter_map(|l| NUMBERED_LINE.captures(l))
        .map(|c| c[2].trim().to_string())
        .collect()
}

/// Asks the transfer role to rewrite the source insights and returns them as a
/// new set at the initial importance. The source set is left untouched.
pub fn finetune_insights(gateway: &Gateway, spec: &TransferSpec) -> Result<InsightSet> {
    finetune_with_template(gateway, spec, fixtures::TRANSFER_TEMPLATE)
}

pub fn finetune_with_template(
    gateway: &Gateway,
    spec: &TransferSpec,
    template: &str,
) -> Result<InsightSet> {
    spec.validate()?;
    let record = gateway.complete(Role::Transfer, &PromptBundle::raw(spec.render(template)))?;
    let texts = parse_numbered(&record.completion_text);
    if texts.is_empty() {
        return Err(Error::InvalidData(format!(
            "transfer completion has no numbered insights:\n{}",
            record.completion_text
        )));
    }
    Ok(InsightSet::from_texts(texts))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::env::EnvKind;
    use crate::llm::ScriptedBackend;

    fn spec(fewshots: Vec<Trajectory>) -> TransferSpec {
        let mut source = InsightSet::from_texts(["a", "b", "c"]);
        source
            .apply(crate::insights::Operation::Upvote { id: 1 })
            .unwrap();
        TransferSpec {
            source_insights: source,
            source_description: EnvKind::ToyQa.summary().into(),
            target_description: EnvKind::ToyFever.summary().into(),
            target_fewshots: fewshots,
        }
    }

    #[test]
    fn identity_adaptation() {
        let s = spec(Vec::new());
        let echo = render_insights(&s.source_insights);
        let gw = Gateway::uniform(Arc::new(ScriptedBackend::new("echo", echo)));
        let out = finetune_insights(&gw, &s).unwrap();
        assert_eq!(
            out.texts().collect::<Vec<_>>(),
            s.source_insights.texts().collect::<Vec<_>>()
        );
        assert!(out.insights().iter().all(|i| i.importance == 2));
        assert_eq!(s.source_insights.get(1).unwrap().importance, 3);
    }

    #[test]
    fn demos_only_change_the_fewshot_block() {
        let demos = fixtures::manual_fewshots(EnvKind::ToyFever).unwrap();
        let with = spec(demos.clone()).render(fixtures::TRANSFER_TEMPLATE);
        let without = spec(Vec::new()).render(fixtures::TRANSFER_TEMPLATE);
        assert!(!without.contains(FEWSHOT_INTRO));
        assert_eq!(with.replacen(&spec(demos).fewshot_block(), "", 1), without);
    }

    #[test]
    fn parsing_and_errors() {
        assert_eq!(
            parse_numbered("Sure:\n1. x\n2) y\n  3.   z  \nno\n4.\n"),
            vec!["x", "y", "z"]
        );
        let five = (1..=5)
            .map(|n| format!("{n}. rule {n}"))
            .collect::<Vec<_>>()
            .join("\n");
        let gw = Gateway::uniform(Arc::new(ScriptedBackend::new("s", five)));
        assert_eq!(finetune_insights(&gw, &spec(Vec::new())).unwrap().len(), 5);

        let gw = Gateway::uniform(Arc::new(ScriptedBackend::new("s", "I cannot do that.")));
        let err = finetune_insights(&gw, &spec(Vec::new())).unwrap_err();
        assert!(err.to_string().contains("I cannot do that."));

        let mut bad = spec(Vec::new());
        bad.target_description = " ".into();
        assert!(finetune_insights(&gw, &bad).is_err());
    }
}
