//! Tolerant parsing of model output into triplets.
//!
//! The grammar is line oriented: a label line (`SENTENCE:`, `CONFIDENCE:`,
//! `EXPLANATION:`, `QUESTIONS:`) opens a block, optionally wrapped in list
//! markers, headings or markdown emphasis. `SENTENCE` opens a new triplet.
//! Anything that belongs to no block is kept in the remainder.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::Variant;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ParseWarning {
    /// CONFIDENCE block present but holds no standalone digit 1-5.
    InvalidConfidence(String),
    /// Variant elicits confidence but the triplet has none.
    MissingConfidence,
    UnexpectedConfidence,
    UnexpectedExplanation,
    UnexpectedQuestions,
    /// A block appeared before any SENTENCE block.
    MissingSentence,
    /// Second block of the same kind inside one triplet; moved to remainder.
    DuplicateBlock(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub marked_sentence: String,
    pub confidence: Option<u8>,
    /// Raw body of the CONFIDENCE block, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_raw: Option<String>,
    pub explanation: Option<String>,
    pub questions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub triplets: Vec<Triplet>,
    pub unparsed_remainder: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Label {
    Sentence,
    Confidence,
    Explanation,
    Questions,
}

impl Label {
    fn from_word(word: &str) -> Option<Label> {
        match word.to_ascii_lowercase().as_str() {
            "sentence" | "marked sentence" => Some(Label::Sentence),
            "confidence" | "confidence rating" | "confidence score" => Some(Label::Confidence),
            "explanation" => Some(Label::Explanation),
            "questions" | "question" | "yes/no questions" => Some(Label::Questions),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Label::Sentence => "sentence",
            Label::Confidence => "confidence",
            Label::Explanation => "explanation",
            Label::Questions => "questions",
        }
    }

    /// Blocks whose body may continue over following lines.
    fn multiline(self) -> bool {
        matches!(self, Label::Explanation | Label::Questions)
    }
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:[-*+•]\s+|\d+[.)]\s+|#+\s*|>\s*)*[*_]*\s*(marked sentence|sentence|confidence rating|confidence score|confidence|explanation|yes/no questions|questions|question)\s*[*_]*\s*:\s*[*_]*\s*(.*)$",
        )
        .expect("label regex compiles")
    })
}

fn list_marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*+•]\s+|\d+[.)]\s+)").expect("list regex compiles"))
}

fn split_label(line: &str) -> Option<(Label, &str)> {
    let caps = label_regex().captures(line)?;
    let label = Label::from_word(caps.get(1)?.as_str())?;
    Some((label, caps.get(2).map_or("", |m| m.as_str())))
}

/// Strips trailing emphasis and one pair of wrapping quotes or backticks.
fn clean_inline(body: &str) -> String {
    let mut s = body.trim().trim_end_matches(['*', '_']).trim();
    for (open, close) in [('"', '"'), ('`', '`'), ('“', '”')] {
        if s.chars().count() >= 2 && s.starts_with(open) && s.ends_with(close) {
            s = &s[open.len_utf8()..s.len() - close.len_utf8()];
            break;
        }
    }
    s.trim().to_string()
}

fn is_none_marker(s: &str) -> bool {
    matches!(
        s.trim().trim_end_matches('.').to_ascii_lowercase().as_str(),
        "" | "none" | "n/a" | "na" | "-"
    )
}

/// First standalone digit 1-5 in `text`: a single digit not adjacent to
/// another digit or a decimal point followed by a digit.
pub fn extract_confidence(text: &str) -> Option<u8> {
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_digit() {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        let joined_before = prev.is_some_and(|p| p.is_ascii_digit())
            || (prev == Some('.') && i >= 2 && chars[i - 2].is_ascii_digit());
        let joined_after = next.is_some_and(|n| n.is_ascii_digit())
            || (next == Some('.') && chars.get(i + 2).is_some_and(|n| n.is_ascii_digit()));
        if joined_before || joined_after {
            continue;
        }
        let d = c as u8 - b'0';
        if (1..=5).contains(&d) {
            return Some(d);
        }
    }
    None
}

#[derive(Default)]
struct Builder {
    triplets: Vec<Triplet>,
    remainder: Vec<String>,
    current: Option<Label>,
    // single-line block already consumed its body
    closed: bool,
}

impl Builder {
    fn open(&mut self, label: Label, body: &str) {
        if label == Label::Sentence || self.triplets.is_empty() {
            let mut t = Triplet::default();
            if label != Label::Sentence {
                t.warnings.push(ParseWarning::MissingSentence);
            }
            self.triplets.push(t);
        }
        let duplicate = {
            let t = self.triplets.last().expect("triplet opened");
            match label {
                Label::Sentence => false,
                Label::Confidence => t.confidence_raw.is_some(),
                Label::Explanation => t.explanation.is_some(),
                Label::Questions => !t.questions.is_empty(),
            }
        };
        if duplicate {
            self.triplets
                .last_mut()
                .expect("triplet opened")
                .warnings
                .push(ParseWarning::DuplicateBlock(label.name().into()));
            self.remainder.push(body.to_string());
            self.current = None;
            return;
        }
        self.current = Some(label);
        self.closed = false;
        let body = body.trim();
        let t = self.triplets.last_mut().expect("triplet opened");
        match label {
            Label::Sentence => {
                if !body.is_empty() {
                    t.marked_sentence = clean_inline(body);
                    self.closed = true;
                }
            }
            Label::Confidence => {
                t.confidence_raw = Some(String::new());
                if !body.is_empty() {
                    set_confidence(t, body);
                    self.closed = true;
                }
            }
            Label::Explanation => {
                if !body.is_empty() {
                    t.explanation = Some(clean_inline(body));
                }
            }
            Label::Questions => {
                if is_none_marker(body) {
                    if !body.is_empty() {
                        self.remainder.push(body.to_string());
                    }
                } else {
                    t.questions.push(clean_inline(body));
                }
            }
        }
    }

    fn continue_block(&mut self, line: &str) {
        let text = line.trim();
        let Some(label) = self.current.filter(|l| l.multiline() || !self.closed) else {
            self.push_remainder(line);
            return;
        };
        if text.is_empty() {
            return;
        }
        let t = self.triplets.last_mut().expect("block has a triplet");
        match label {
            Label::Sentence => {
                t.marked_sentence = clean_inline(text);
                self.closed = true;
            }
            Label::Confidence => {
                set_confidence(t, text);
                self.closed = true;
            }
            Label::Explanation => {
                let text = clean_inline(text);
                match &mut t.explanation {
                    Some(e) => {
                        e.push(' ');
                        e.push_str(&text);
                    }
                    None => t.explanation = Some(text),
                }
            }
            Label::Questions => {
                let listed = list_marker_regex().is_match(text);
                let q = list_marker_regex().replace(text, "");
                if !is_none_marker(&q) && (listed || q.trim_end().ends_with('?')) {
                    t.questions.push(clean_inline(&q));
                } else {
                    self.remainder.push(line.to_string());
                }
            }
        }
    }

    fn push_remainder(&mut self, line: &str) {
        if !line.trim().is_empty() {
            self.remainder.push(line.to_string());
        }
    }
}

fn set_confidence(t: &mut Triplet, body: &str) {
    t.confidence_raw = Some(body.trim().to_string());
    t.confidence = extract_confidence(body);
    if t.confidence.is_none() {
        t.warnings.push(ParseWarning::InvalidConfidence(body.trim().to_string()));
    }
}

pub fn parse_response(raw: &str, variant: Variant) -> Result<ParsedResponse> {
    if raw.trim().is_empty() {
        return Err(Error::EmptyResponse);
    }
    let mut b = Builder::default();
    let mut saw_label = false;
    for line in raw.lines() {
        match split_label(line) {
            Some((label, body)) => {
                saw_label = true;
                b.open(label, body);
            }
            None if saw_label => b.continue_block(line),
            None => b.push_remainder(line),
        }
    }
    if !saw_label {
        // a bare copy of the sentence, possibly with pipes
        return Ok(ParsedResponse {
            triplets: vec![check_contract(
                Triplet {
                    marked_sentence: raw.trim().to_string(),
                    ..Triplet::default()
                },
                variant,
            )],
            unparsed_remainder: String::new(),
        });
    }
    Ok(ParsedResponse {
        triplets: b.triplets.into_iter().map(|t| check_contract(t, variant)).collect(),
        unparsed_remainder: b.remainder.join("\n"),
    })
}

fn check_contract(mut t: Triplet, variant: Variant) -> Triplet {
    let invalid_conf = t
        .warnings
        .iter()
        .any(|w| matches!(w, ParseWarning::InvalidConfidence(_)));
    if variant.elicits_confidence() {
        if t.confidence.is_none() && !invalid_conf {
            t.warnings.push(ParseWarning::MissingConfidence);
        }
    } else if t.confidence.is_some() || invalid_conf {
        t.warnings.push(ParseWarning::UnexpectedConfidence);
    }
    if !variant.elicits_explanation() {
        if t.explanation.is_some() {
            t.warnings.push(ParseWarning::UnexpectedExplanation);
        }
        if !t.questions.is_empty() {
            t.warnings.push(ParseWarning::UnexpectedQuestions);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form() {
        let raw = "SENTENCE: Police |arrested him.\nCONFIDENCE: 5\nEXPLANATION: clear arrest verb\nQUESTIONS:\n- Does detention count?";
        let parsed = parse_response(raw, Variant::Full).unwrap();
        assert_eq!(parsed.triplets.len(), 1);
        let t = &parsed.triplets[0];
        assert_eq!(t.marked_sentence, "Police |arrested him.");
        assert_eq!(t.confidence, Some(5));
        assert_eq!(t.explanation.as_deref(), Some("clear arrest verb"));
        assert_eq!(t.questions, ["Does detention count?"]);
        assert!(t.warnings.is_empty());
        assert_eq!(parsed.unparsed_remainder, "");
    }

    #[test]
    fn two_triplets_in_order() {
        let raw = "SENTENCE: He was |arrested and convicted.\nCONFIDENCE: 4\nEXPLANATION: a\n\nSENTENCE: He was arrested and |convicted.\nCONFIDENCE: 2\nEXPLANATION: b";
        let parsed = parse_response(raw, Variant::Full).unwrap();
        let confs: Vec<_> = parsed.triplets.iter().map(|t| t.confidence).collect();
        assert_eq!(confs, [Some(4), Some(2)]);
        assert!(parsed.triplets[1].marked_sentence.contains("|convicted"));
    }

    #[test]
    fn bare_sentence_fallback() {
        let parsed = parse_response("Police arrested him.", Variant::NoConf).unwrap();
        assert_eq!(parsed.triplets.len(), 1);
        assert_eq!(parsed.triplets[0].marked_sentence, "Police arrested him.");
        assert_eq!(parsed.triplets[0].confidence, None);
        assert!(parsed.triplets[0].warnings.is_empty());
    }

    #[test]
    fn markdown_noise_is_tolerated() {
        let raw = "Here is my answer:\n\n1. **Sentence:** \"Police |arrested him.\"\n   **Confidence:** 4/5\n   - *Explanation*: the verb\n     continues here\n### Questions:\n* Is a detention an arrest?\n* Are citations arrests?\nThanks!";
        let parsed = parse_response(raw, Variant::Full).unwrap();
        let t = &parsed.triplets[0];
        assert_eq!(t.marked_sentence, "Police |arrested him.");
        assert_eq!(t.confidence, Some(4));
        assert_eq!(t.explanation.as_deref(), Some("the verb continues here"));
        assert_eq!(t.questions, ["Is a detention an arrest?", "Are citations arrests?"]);
        assert_eq!(t.confidence_raw.as_deref(), Some("4/5"));
        assert_eq!(parsed.unparsed_remainder, "Here is my answer:\nThanks!");
    }

    #[test]
    fn label_body_on_next_line() {
        let raw = "SENTENCE:\nPolice |arrested him.\nCONFIDENCE:\n3";
        let t = &parse_response(raw, Variant::ConfOnly).unwrap().triplets[0];
        assert_eq!(t.marked_sentence, "Police |arrested him.");
        assert_eq!(t.confidence, Some(3));
    }

    #[test]
    fn out_of_range_confidence_warns() {
        let raw = "SENTENCE: x\nCONFIDENCE: high";
        let t = &parse_response(raw, Variant::Full).unwrap().triplets[0];
        assert_eq!(t.confidence, None);
        assert_eq!(t.warnings, [ParseWarning::InvalidConfidence("high".into())]);
    }

    #[test]
    fn variant_contract_violations_are_warnings() {
        let raw = "SENTENCE: x\nCONFIDENCE: 2\nEXPLANATION: because";
        let t = &parse_response(raw, Variant::NoConf).unwrap().triplets[0];
        assert_eq!(t.warnings, [ParseWarning::UnexpectedConfidence]);
        let t = &parse_response(raw, Variant::ConfOnly).unwrap().triplets[0];
        assert_eq!(t.warnings, [ParseWarning::UnexpectedExplanation]);
        let t = &parse_response("SENTENCE: x", Variant::Full).unwrap().triplets[0];
        assert_eq!(t.warnings, [ParseWarning::MissingConfidence]);
    }

    #[test]
    fn duplicate_and_orphan_blocks() {
        let raw = "CONFIDENCE: 3\nSENTENCE: a\nCONFIDENCE: 4\nCONFIDENCE: 5";
        let parsed = parse_response(raw, Variant::Full).unwrap();
        assert_eq!(parsed.triplets.len(), 2);
        assert_eq!(parsed.triplets[0].warnings, [ParseWarning::MissingSentence]);
        assert_eq!(parsed.triplets[1].confidence, Some(4));
        assert_eq!(parsed.unparsed_remainder, "5");
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(parse_response("  \n", Variant::Full), Err(Error::EmptyResponse)));
    }

    #[test]
    fn confidence_extraction() {
        assert_eq!(extract_confidence("5"), Some(5));
        assert_eq!(extract_confidence("4/5 — fairly sure"), Some(4));
        assert_eq!(extract_confidence("Confidence: 4"), Some(4));
        assert_eq!(extract_confidence("high"), None);
        assert_eq!(extract_confidence("10"), None);
        assert_eq!(extract_confidence("3.5"), None);
        assert_eq!(extract_confidence("0 then 2"), Some(2));
        assert_eq!(extract_confidence("(3)"), Some(3));
    }
}
