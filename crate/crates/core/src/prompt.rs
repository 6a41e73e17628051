//! Prompt assembly. Sections always render in the same order: instruction,
//! insights, fewshot demonstrations, reflections, then the current task with
//! its partial trajectory. Empty sections are omitted entirely.

use serde::{Deserialize, Serialize};

pub const INSIGHTS_HEADER: &str =
    "The following are insights gathered from past experience on similar tasks. Follow them closely:";
pub const FEWSHOT_HEADER: &str = "Here are some examples:";
pub const FEWSHOT_FOOTER: &str = "(END OF EXAMPLES)";
pub const REFLECTIONS_HEADER: &str = "Reflections from your previous attempts at this task:";
pub const TASK_HEADER: &str = "Current task:";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub insights: String,
    pub fewshots: Vec<String>,
    pub reflections: String,
    pub task: String,
    pub partial: String,
}

impl PromptBundle {
    /// A bundle that renders to exactly `text`.
    pub fn raw(text: impl Into<String>) -> Self {
        Self {
            instruction: text.into(),
            ..Self::default()
        }
    }

    pub fn insights_block(&self) -> Option<String> {
        (!self.insights.is_empty()).then(|| format!("{INSIGHTS_HEADER}\n{}", self.insights))
    }

    pub fn fewshot_block(&self) -> Option<String> {
        if self.fewshots.is_empty() {
            return None;
        }
        let body = self
            .fewshots
            .iter()
            .map(|f| f.trim_end())
            .collect::<Vec<_>>()
            .join("\n\n");
        Some(format!("{FEWSHOT_HEADER}\n{body}\n{FEWSHOT_FOOTER}"))
    }

    pub fn render(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if !self.instruction.is_empty() {
            parts.push(self.instruction.trim_end().to_string());
        }
        parts.extend(self.insights_block());
        parts.extend(self.fewshot_block());
        if !self.reflections.is_empty() {
            parts.push(format!(
                "{REFLECTIONS_HEADER}\n{}",
                self.reflections.trim_end()
            ));
        }
        let mut out = parts.join("\n\n");
        if !self.task.is_empty() {
            if !out.is_empty() {
                out.push_str("\n\n");
            }
            out.push_str(TASK_HEADER);
            out.push('\n');
            out.push_str(self.task.trim_end());
            out.push('\n');
            out.push_str(&self.partial);
        }
        out
    }
}

/// Fills `{name}` placeholders. Unknown placeholders are left untouched.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
