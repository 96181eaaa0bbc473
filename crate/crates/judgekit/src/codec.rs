//! Serialization and parsing of structured CoTs, plus verdict extraction from
//! free-form model output.
//!
//! Parsing uses first-match, non-greedy block segmentation with no escaping.
//! Malformed CoTs are retained with flags; the drop decision belongs to the
//! dataset builder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ChainOfThought, Order, Verdict};

pub const VERDICT_A: &str = "[[A]]";
pub const VERDICT_B: &str = "[[B]]";

/// The literal marker strings delimiting CoT blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTMarkers {
    pub plan_open: String,
    pub plan_close: String,
    pub exec_open: String,
    pub exec_close: String,
    pub verdict_header: String,
}

impl Default for CoTMarkers {
    fn default() -> Self {
        CoTMarkers {
            plan_open: "[Start of Evaluation Plan]".into(),
            plan_close: "[End of Evaluation Plan]".into(),
            exec_open: "[Start of Plan Execution]".into(),
            exec_close: "[End of Plan Execution]".into(),
            verdict_header: "[Final Verdict]".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("cannot serialize a CoT with an unparsed verdict")]
    UnparsedVerdict,
}

/// How a plan-prompt output was tagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagState {
    Clean,
    Untagged,
    Unterminated,
}

/// Structured result of parsing a free-form CoT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFlags {
    pub missing_plan: bool,
    pub missing_execution: bool,
    /// The verdict token inside the execution disagrees with the one after it.
    pub verdict_disagreement: bool,
}

impl ParseFlags {
    pub fn clean() -> Self {
        ParseFlags {
            missing_plan: false,
            missing_execution: false,
            verdict_disagreement: false,
        }
    }

    pub fn malformed(&self) -> bool {
        self.missing_plan || self.missing_execution
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub cot: ChainOfThought,
    pub flags: ParseFlags,
}

impl CoTMarkers {
    /// Emits plan block, blank line, execution block, blank line, verdict
    /// header line, then the verdict token. Round-trips through [`Self::parse_cot`].
    pub fn serialize_cot(&self, cot: &ChainOfThought) -> Result<String, CodecError> {
        let token = match cot.verdict {
            Verdict::A => VERDICT_A,
            Verdict::B => VERDICT_B,
            Verdict::Unparsed => return Err(CodecError::UnparsedVerdict),
        };
        Ok(format!(
            "{}\n{}\n{}\n\n{}\n{}\n{}\n\n{}\n{}",
            self.plan_open,
            cot.plan,
            self.plan_close,
            self.exec_open,
            cot.execution,
            self.exec_close,
            self.verdict_header,
            token
        ))
    }

    /// Like [`Self::serialize_cot`] but tolerates an unparsed verdict by
    /// omitting the verdict token. Used for rejected training targets whose
    /// raw generation never produced a marker.
    pub fn serialize_cot_lenient(&self, plan: &str, execution: &str, verdict: Verdict) -> String {
        let tail = match verdict {
            Verdict::A => format!("\n{VERDICT_A}"),
            Verdict::B => format!("\n{VERDICT_B}"),
            Verdict::Unparsed => String::new(),
        };
        format!(
            "{}\n{}\n{}\n\n{}\n{}\n{}\n\n{}{}",
            self.plan_open,
            plan,
            self.plan_close,
            self.exec_open,
            execution,
            self.exec_close,
            self.verdict_header,
            tail
        )
    }

    /// First-match segmentation: plan between the first `plan_open` and the
    /// first subsequent `plan_close`; execution between the first `exec_open`
    /// after the plan block and the first subsequent `exec_close`. The verdict
    /// comes from the remainder, falling back to the whole text.
    pub fn parse_cot(&self, text: &str, order: Order) -> ParseOutcome {
        let mut flags = ParseFlags::clean();
        let (plan, after_plan) = match extract_block(text, &self.plan_open, &self.plan_close) {
            Some((inner, rest)) => (inner, rest),
            None => {
                flags.missing_plan = true;
                ("", text)
            }
        };
        let (execution, remainder) =
            match extract_block(after_plan, &self.exec_open, &self.exec_close) {
                Some((inner, rest)) => (inner, rest),
                None => {
                    flags.missing_execution = true;
                    ("", after_plan)
                }
            };
        let mut verdict = extract_verdict(remainder);
        if verdict == Verdict::Unparsed {
            verdict = extract_verdict(text);
        }
        let exec_verdict = extract_verdict(execution);
        if exec_verdict != Verdict::Unparsed && verdict != Verdict::Unparsed && exec_verdict != verdict {
            flags.verdict_disagreement = true;
        }
        ParseOutcome {
            cot: ChainOfThought {
                plan: strip_block_newlines(plan).to_string(),
                execution: strip_block_newlines(execution).to_string(),
                verdict,
                order,
            },
            flags,
        }
    }

    /// Pulls the plan out of a plan-prompt completion. If tags are absent the
    /// whole text is returned, flagged untagged.
    pub fn extract_plan_from_plan_prompt_output(&self, text: &str) -> (String, TagState) {
        match text.find(&self.plan_open) {
            None => (text.to_string(), TagState::Untagged),
            Some(open_at) => {
                let after_open = &text[open_at + self.plan_open.len()..];
                match after_open.find(&self.plan_close) {
                    Some(close_at) => (
                        strip_block_newlines(&after_open[..close_at]).to_string(),
                        TagState::Clean,
                    ),
                    None => (
                        strip_block_newlines(after_open).to_string(),
                        TagState::Unterminated,
                    ),
                }
            }
        }
    }
}

/// Content between the first `open` and the first subsequent `close`, plus
/// the text following the close marker. The enclosing single newlines stay
/// attached; callers strip them with [`strip_block_newlines`].
fn extract_block<'a>(text: &'a str, open: &str, close: &str) -> Option<(&'a str, &'a str)> {
    let open_at = text.find(open)?;
    let after_open = &text[open_at + open.len()..];
    let close_at = after_open.find(close)?;
    Some((
        &after_open[..close_at],
        &after_open[close_at + close.len()..],
    ))
}

/// Strips exactly one leading and one trailing newline, matching what the
/// serializer inserts around block bodies.
fn strip_block_newlines(s: &str) -> &str {
    let s = s.strip_prefix('\n').unwrap_or(s);
    s.strip_suffix('\n').unwrap_or(s)
}

/// The verdict named by the LAST occurrence of "[[A]]" or "[[B]]"; executions
/// often mention a token while explaining the format, and the conclusive one
/// comes last.
pub fn extract_verdict(text: &str) -> Verdict {
    let last_a = text.rfind(VERDICT_A);
    let last_b = text.rfind(VERDICT_B);
    match (last_a, last_b) {
        (Some(a), Some(b)) => {
            if a > b {
                Verdict::A
            } else {
                Verdict::B
            }
        }
        (Some(_), None) => Verdict::A,
        (None, Some(_)) => Verdict::B,
        (None, None) => Verdict::Unparsed,
    }
}

/// Convenience wrappers over the default marker set.
pub fn serialize_cot(cot: &ChainOfThought) -> Result<String, CodecError> {
    CoTMarkers::default().serialize_cot(cot)
}

pub fn parse_cot(text: &str, order: Order) -> ParseOutcome {
    CoTMarkers::default().parse_cot(text, order)
}
