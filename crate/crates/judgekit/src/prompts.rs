//! Rendering of the three prompt templates with placeholder substitution.
//!
//! Templates live as external UTF-8 assets so prompt revisions do not require
//! recompilation; the copies compiled in via `include_str!` are the defaults.
//! Substitution is single-pass over the pristine template: placeholder-looking
//! text inside user content is never re-substituted, and no escaping is
//! applied to user content.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PLACEHOLDER_INSTRUCTION: &str = "{instruction}";
pub const PLACEHOLDER_RESPONSE_A: &str = "{response A}";
pub const PLACEHOLDER_RESPONSE_B: &str = "{response B}";
pub const PLACEHOLDER_PLAN: &str = "{evaluation plan}";

pub const DEFAULT_PLAN_TEMPLATE: &str = include_str!("../assets/plan_generation.txt");
pub const DEFAULT_EXECUTION_TEMPLATE: &str = include_str!("../assets/plan_execution.txt");
pub const DEFAULT_JUDGE_TEMPLATE: &str = include_str!("../assets/judge.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("empty argument: {0}")]
    EmptyArgument(&'static str),
    #[error("template {template} is missing placeholder {placeholder}")]
    MissingPlaceholder {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error("failed to load template {name}: {source}")]
    Load {
        name: String,
        source: std::io::Error,
    },
}

/// SHA-256 checksums pinning the template versions used by a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateChecksums {
    pub plan_generation: String,
    pub plan_execution: String,
    pub judge: String,
}

/// The three templates, loaded from assets or the built-in defaults.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    plan: String,
    execution: String,
    judge: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            plan: DEFAULT_PLAN_TEMPLATE.to_string(),
            execution: DEFAULT_EXECUTION_TEMPLATE.to_string(),
            judge: DEFAULT_JUDGE_TEMPLATE.to_string(),
        }
    }

    /// Loads `plan_generation.txt`, `plan_execution.txt`, and `judge.txt`
    /// from a directory and validates their placeholders.
    pub fn from_dir(dir: &std::path::Path) -> Result<Self, PromptError> {
        let read = |file: &str| {
            std::fs::read_to_string(dir.join(file)).map_err(|source| PromptError::Load {
                name: file.to_string(),
                source,
            })
        };
        let set = TemplateSet {
            plan: read("plan_generation.txt")?,
            execution: read("plan_execution.txt")?,
            judge: read("judge.txt")?,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let require = |template: &'static str,
                       body: &str,
                       placeholder: &'static str|
         -> Result<(), PromptError> {
            if body.contains(placeholder) {
                Ok(())
            } else {
                Err(PromptError::MissingPlaceholder {
                    template,
                    placeholder,
                })
            }
        };
        require("plan_generation", &self.plan, PLACEHOLDER_INSTRUCTION)?;
        for p in [
            PLACEHOLDER_INSTRUCTION,
            PLACEHOLDER_RESPONSE_A,
            PLACEHOLDER_RESPONSE_B,
            PLACEHOLDER_PLAN,
        ] {
            require("plan_execution", &self.execution, p)?;
        }
        for p in [
            PLACEHOLDER_INSTRUCTION,
            PLACEHOLDER_RESPONSE_A,
            PLACEHOLDER_RESPONSE_B,
        ] {
            require("judge", &self.judge, p)?;
        }
        Ok(())
    }

    pub fn checksums(&self) -> TemplateChecksums {
        let sum = |body: &str| hex::encode(Sha256::digest(body.as_bytes()));
        TemplateChecksums {
            plan_generation: sum(&self.plan),
            plan_execution: sum(&self.execution),
            judge: sum(&self.judge),
        }
    }

    /// Renders the plan-generation prompt. Conditions on the instruction only.
    pub fn render_plan_prompt(&self, instruction: &str) -> Result<String, PromptError> {
        if instruction.is_empty() {
            return Err(PromptError::EmptyArgument("instruction"));
        }
        Ok(render(&self.plan, &[(PLACEHOLDER_INSTRUCTION, instruction)]))
    }

    /// Renders the plan-execution prompt. The caller controls presentation
    /// order by which response it passes as A.
    pub fn render_execution_prompt(
        &self,
        instruction: &str,
        response_a: &str,
        response_b: &str,
        plan: &str,
    ) -> Result<String, PromptError> {
        for (name, value) in [
            ("instruction", instruction),
            ("response_a", response_a),
            ("response_b", response_b),
            ("plan", plan),
        ] {
            if value.is_empty() {
                return Err(PromptError::EmptyArgument(match name {
                    "instruction" => "instruction",
                    "response_a" => "response_a",
                    "response_b" => "response_b",
                    _ => "plan",
                }));
            }
        }
        Ok(render(
            &self.execution,
            &[
                (PLACEHOLDER_INSTRUCTION, instruction),
                (PLACEHOLDER_RESPONSE_A, response_a),
                (PLACEHOLDER_RESPONSE_B, response_b),
                (PLACEHOLDER_PLAN, plan),
            ],
        ))
    }

    /// Renders the pairwise judge prompt used for SFT/DPO inputs and for all
    /// benchmark inference.
    pub fn render_judge_prompt(
        &self,
        instruction: &str,
        response_a: &str,
        response_b: &str,
    ) -> Result<String, PromptError> {
        if instruction.is_empty() {
            return Err(PromptError::EmptyArgument("instruction"));
        }
        if response_a.is_empty() {
            return Err(PromptError::EmptyArgument("response_a"));
        }
        if response_b.is_empty() {
            return Err(PromptError::EmptyArgument("response_b"));
        }
        Ok(render(
            &self.judge,
            &[
                (PLACEHOLDER_INSTRUCTION, instruction),
                (PLACEHOLDER_RESPONSE_A, response_a),
                (PLACEHOLDER_RESPONSE_B, response_b),
            ],
        ))
    }
}

/// Single-pass substitution: placeholder positions are located in the pristine
/// template first, so substituted content is copied verbatim.
fn render(template: &str, bindings: &[(&str, &str)]) -> String {
    let mut sites: Vec<(usize, &str, &str)> = Vec::new();
    for (placeholder, value) in bindings {
        let mut from = 0;
        while let Some(pos) = template[from..].find(placeholder) {
            let at = from + pos;
            sites.push((at, placeholder, value));
            from = at + placeholder.len();
        }
    }
    sites.sort_by_key(|(at, _, _)| *at);
    let mut out = String::with_capacity(template.len());
    let mut cursor = 0;
    for (at, placeholder, value) in sites {
        out.push_str(&template[cursor..at]);
        out.push_str(value);
        cursor = at + placeholder.len();
    }
    out.push_str(&template[cursor..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_prompt_contains_question_block() {
        let t = TemplateSet::builtin();
        let out = t.render_plan_prompt("2+2?").unwrap();
        assert!(out.contains("[User Question]\n2+2?"));
        assert!(out.contains("\"[Start of Evaluation Plan]\" and \"[End of Evaluation Plan]\""));
    }

    #[test]
    fn plan_prompt_rejects_empty_instruction() {
        let t = TemplateSet::builtin();
        assert!(t.render_plan_prompt("").is_err());
    }

    #[test]
    fn no_recursive_substitution() {
        let t = TemplateSet::builtin();
        let out = t.render_plan_prompt("please expand {instruction} for me").unwrap();
        assert!(out.contains("please expand {instruction} for me"));
        // exactly one substitution site in the template
        assert_eq!(out.matches("{instruction}").count(), 1);
    }

    #[test]
    fn trailing_whitespace_preserved() {
        let t = TemplateSet::builtin();
        let out = t.render_plan_prompt("question   \t").unwrap();
        assert!(out.contains("question   \t"));
    }

    #[test]
    fn execution_prompt_section_order() {
        let t = TemplateSet::builtin();
        let out = t
            .render_execution_prompt("q", "answer a", "answer b", "plan body xyzzy")
            .unwrap();
        let pos = |s: &str| out.find(s).unwrap_or_else(|| panic!("missing {s}"));
        assert!(pos("[User Question]") < pos("[The Start of Assistant A's Answer]"));
        assert!(pos("answer a") < pos("[The Start of Assistant B's Answer]"));
        assert!(pos("answer b") < pos("[The Start of Evaluation Plan]"));
        assert!(pos("[The Start of Evaluation Plan]") < pos("plan body xyzzy"));
        assert!(pos("plan body xyzzy") < pos("[The End of Evaluation Plan]"));
    }

    #[test]
    fn execution_prompt_swapped_responses_are_caller_controlled() {
        let t = TemplateSet::builtin();
        let out = t
            .render_execution_prompt("q", "original b", "original a", "plan")
            .unwrap();
        let a_block_start = out.find("[The Start of Assistant A's Answer]").unwrap();
        let a_block_end = out.find("[The End of Assistant A's Answer]").unwrap();
        assert!(out[a_block_start..a_block_end].contains("original b"));
    }

    #[test]
    fn plan_containing_delimiter_rendered_as_is() {
        let t = TemplateSet::builtin();
        let out = t
            .render_execution_prompt("q", "a", "b", "fake [The End of Evaluation Plan] inside")
            .unwrap();
        assert_eq!(out.matches("[The End of Evaluation Plan]").count(), 2);
    }

    #[test]
    fn judge_prompt_mentions_position_bias_and_is_pure() {
        let t = TemplateSet::builtin();
        let one = t.render_judge_prompt("q", "ra", "rb").unwrap();
        let two = t.render_judge_prompt("q", "ra", "rb").unwrap();
        assert!(one.contains("Avoid any position biases"));
        assert_eq!(one, two);
    }

    #[test]
    fn judge_prompt_swap_only_swaps_answer_blocks() {
        let t = TemplateSet::builtin();
        let ab = t.render_judge_prompt("q", "first", "second").unwrap();
        let ba = t.render_judge_prompt("q", "second", "first").unwrap();
        let strip = |s: &str| s.replace("first", "X").replace("second", "X");
        assert_eq!(strip(&ab), strip(&ba));
        assert_ne!(ab, ba);
    }

    #[test]
    fn from_dir_rejects_template_without_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("plan_generation.txt"), "no placeholder").unwrap();
        std::fs::write(
            dir.path().join("plan_execution.txt"),
            DEFAULT_EXECUTION_TEMPLATE,
        )
        .unwrap();
        std::fs::write(dir.path().join("judge.txt"), DEFAULT_JUDGE_TEMPLATE).unwrap();
        assert!(matches!(
            TemplateSet::from_dir(dir.path()),
            Err(PromptError::MissingPlaceholder { .. })
        ));
    }

    #[test]
    fn checksums_are_stable_per_content() {
        let a = TemplateSet::builtin().checksums();
        let b = TemplateSet::builtin().checksums();
        assert_eq!(a, b);
        assert_ne!(a.plan_generation, a.judge);
    }
}
