//! Prompt rendering for one (event type, query sentence) job and the
//! ablation variants.
//!
//! Each variant is a UTF-8 template with `{{slot}}` placeholders. Templates
//! are split into instruction blocks, each opened by a bracketed marker line
//! (see [`markers`]); [`check_blocks`] verifies that a rendered prompt carries
//! exactly the blocks its variant requires.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{EventAnnotation, Sentence};
use crate::error::{Error, Result};
use crate::sampler::FewShotSet;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    ConfOnly,
    ConventionalConf,
    NoConf,
    NoGuess,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::ConfOnly,
        Variant::ConventionalConf,
        Variant::NoConf,
        Variant::NoGuess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ConfOnly => "conf_only",
            Variant::ConventionalConf => "conventional_conf",
            Variant::NoConf => "no_conf",
            Variant::NoGuess => "no_guess",
        }
    }

    pub fn elicits_confidence(self) -> bool {
        self != Variant::NoConf
    }

    pub fn elicits_explanation(self) -> bool {
        !matches!(self, Variant::ConfOnly | Variant::ConventionalConf)
    }

    /// Block markers that must appear in a rendered prompt, in order.
    pub fn required_blocks(self) -> Vec<&'static str> {
        use markers::*;
        let middle: &[&str] = match self {
            Variant::Full => &[GUESSING, PRESENCE_CONFIDENCE, EXPLANATION],
            Variant::ConfOnly => &[GUESSING, PRESENCE_CONFIDENCE],
            Variant::ConventionalConf => &[GUESSING, CONVENTIONAL_CONFIDENCE],
            Variant::NoConf => &[GUESSING, EXPLANATION],
            Variant::NoGuess => &[PRESENCE_CONFIDENCE, EXPLANATION],
        };
        [TASK, SIBLINGS, EXAMPLES]
            .into_iter()
            .chain(middle.iter().copied())
            .chain([OUTPUT_FORMAT, SENTENCE])
            .collect()
    }

    pub fn forbidden_blocks(self) -> Vec<&'static str> {
        let required = self.required_blocks();
        markers::ALL
            .iter()
            .copied()
            .filter(|m| !required.contains(m))
            .collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

pub mod markers {
    pub const TASK: &str = "[Task]";
    pub const SIBLINGS: &str = "[Other event types in this topic]";
    pub const EXAMPLES: &str = "[Examples]";
    pub const GUESSING: &str = "[Guessing]";
    pub const PRESENCE_CONFIDENCE: &str = "[Confidence: presence]";
    pub const CONVENTIONAL_CONFIDENCE: &str = "[Confidence: answer certainty]";
    pub const EXPLANATION: &str = "[Explanation and questions]";
    pub const OUTPUT_FORMAT: &str = "[Output format]";
    pub const SENTENCE: &str = "[Sentence]";

    pub const ALL: &[&str] = &[
        TASK,
        SIBLINGS,
        EXAMPLES,
        GUESSING,
        PRESENCE_CONFIDENCE,
        CONVENTIONAL_CONFIDENCE,
        EXPLANATION,
        OUTPUT_FORMAT,
        SENTENCE,
    ];
}

/// Checks marker presence, order and absence for `variant`. Returns the list
/// of problems found.
pub fn check_blocks(variant: Variant, prompt: &str) -> std::result::Result<(), Vec<String>> {
    let lines: Vec<&str> = prompt.lines().map(str::trim).collect();
    let position = |marker: &str| lines.iter().position(|l| *l == marker);
    let mut problems = Vec::new();
    let mut last = None;
    for marker in variant.required_blocks() {
        match position(marker) {
            None => problems.push(format!("missing block {marker}")),
            Some(p) => {
                if last.is_some_and(|l| p < l) {
                    problems.push(format!("block {marker} out of order"));
                }
                last = Some(p);
            }
        }
    }
    for marker in variant.forbidden_blocks() {
        if position(marker).is_some() {
            problems.push(format!("forbidden block {marker}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

/// Inserts `|` before the first character of every annotated first token.
/// Duplicate token indices collapse to one pipe.
pub fn mark_sentence(sentence: &Sentence, annotations: &[EventAnnotation]) -> String {
    let mut tokens: Vec<usize> = annotations.iter().map(|a| a.first_token).collect();
    mark_tokens(sentence, &mut tokens)
}

pub(crate) fn mark_tokens(sentence: &Sentence, tokens: &mut Vec<usize>) -> String {
    tokens.sort_unstable();
    tokens.dedup();
    let mut starts = tokens
        .iter()
        .filter_map(|&t| sentence.tokens.get(t).map(|s| s.start))
        .peekable();
    let mut out = String::with_capacity(sentence.text.len() + tokens.len());
    for (i, ch) in sentence.text.chars().enumerate() {
        if starts.peek() == Some(&i) {
            out.push('|');
            starts.next();
        }
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub topic: String,
    pub event_type: String,
    pub sibling_types: Vec<String>,
    pub variant: Variant,
    pub few_shot: FewShotSet,
    pub query_sentence: Sentence,
}

const SLOTS: &[&str] = &["topic", "event_type", "siblings", "examples", "sentence"];
const REQUIRED_SLOTS: &[&str] = &["examples", "sentence"];

/// One template per variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    by_variant: BTreeMap<Variant, String>,
}

impl Templates {
    pub fn builtin() -> Self {
        let by_variant = Variant::ALL
            .into_iter()
            .map(|v| (v, builtin_template(v).to_string()))
            .collect();
        Templates { by_variant }
    }

    /// Reads `<variant>.txt` for every variant from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut by_variant = BTreeMap::new();
        for v in Variant::ALL {
            let path = dir.join(format!("{}.txt", v.as_str()));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            validate_template(&text).map_err(|m| Error::Template(format!("{}: {m}", path.display())))?;
            by_variant.insert(v, text);
        }
        Ok(Templates { by_variant })
    }

    pub fn get(&self, variant: Variant) -> &str {
        &self.by_variant[&variant]
    }

    pub fn render(&self, spec: &PromptSpec) -> Result<String> {
        if spec.few_shot.examples.is_empty() {
            return Err(Error::Template(format!(
                "no few-shot examples for {}",
                spec.event_type
            )));
        }
        let examples = spec
            .few_shot
            .examples
            .iter()
            .map(|ex| mark_sentence(&ex.sentence, &ex.annotations))
            .collect::<Vec<_>>()
            .join("\n");
        let siblings = if spec.sibling_types.is_empty() {
            "(none)".to_string()
        } else {
            spec.sibling_types.join(", ")
        };
        fill_slots(self.get(spec.variant), |slot| match slot {
            "topic" => Some(spec.topic.as_str()),
            "event_type" => Some(spec.event_type.as_str()),
            "siblings" => Some(siblings.as_str()),
            "examples" => Some(examples.as_str()),
            "sentence" => Some(spec.query_sentence.text.as_str()),
            _ => None,
        })
    }
}

impl Default for Templates {
    fn default() -> Self {
        Templates::builtin()
    }
}

pub fn builtin_template(variant: Variant) -> &'static str {
    match variant {
        Variant::Full => include_str!("../templates/full.txt"),
        Variant::ConfOnly => include_str!("../templates/conf_only.txt"),
        Variant::ConventionalConf => include_str!("../templates/conventional_conf.txt"),
        Variant::NoConf => include_str!("../templates/no_conf.txt"),
        Variant::NoGuess => include_str!("../templates/no_guess.txt"),
    }
}

/// Renders with the built-in templates.
pub fn render_prompt(spec: &PromptSpec) -> Result<String> {
    Templates::builtin().render(spec)
}

fn validate_template(text: &str) -> std::result::Result<(), String> {
    let mut seen = Vec::new();
    fill_slots(text, |slot| {
        seen.push(slot.to_string());
        SLOTS.contains(&slot).then_some("")
    })
    .map_err(|e| e.to_string())?;
    for slot in REQUIRED_SLOTS {
        if !seen.iter().any(|s| s == slot) {
            return Err(format!("missing required slot {{{{{slot}}}}}"));
        }
    }
    Ok(())
}

fn fill_slots<'a>(template: &str, mut lookup: impl FnMut(&str) -> Option<&'a str>) -> Result<String> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or_else(|| Error::Template("unclosed {{ in template".into()))?;
        let name = after[..close].trim();
        let value = lookup(name).ok_or_else(|| Error::Template(format!("unknown slot {{{{{name}}}}}")))?;
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
