//! Ontology and annotated corpus loading, plus the eligibility filters that
//! decide which event types and sentences take part in a run.
//!
//! Offsets everywhere in this crate are counted in Unicode scalar values
//! (`char`s), never bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_INSTANCES: usize = 10;
pub const DEFAULT_MIN_CHARS: usize = 25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub event_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ontology {
    pub topics: Vec<Topic>,
}

impl Ontology {
    /// Checks that event-type names are globally unique, topic names are
    /// unique and no topic is empty.
    pub fn validate(&self) -> Result<()> {
        let mut seen_types = BTreeSet::new();
        let mut seen_topics = BTreeSet::new();
        for topic in &self.topics {
            if !seen_topics.insert(topic.name.as_str()) {
                return Err(Error::Validation(format!("duplicate topic {:?}", topic.name)));
            }
            if topic.event_types.is_empty() {
                return Err(Error::Validation(format!("topic {:?} has no event types", topic.name)));
            }
            for ty in &topic.event_types {
                if !seen_types.insert(ty.as_str()) {
                    return Err(Error::Validation(format!("duplicate event type {ty:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn topic(&self, name: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.name == name)
    }

    pub fn contains_type(&self, event_type: &str) -> bool {
        self.topic_of(event_type).is_some()
    }

    pub fn topic_of(&self, event_type: &str) -> Option<&Topic> {
        self.topics
            .iter()
            .find(|t| t.event_types.iter().any(|e| e == event_type))
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ontology: Ontology = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    ontology.validate()?;
    Ok(ontology)
}

/// Half-open char range `[start, end)` of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub doc_id: String,
    pub sent_id: String,
    pub text: String,
    pub tokens: Vec<Span>,
}

impl Sentence {
    pub fn new(doc_id: impl Into<String>, sent_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence {
            doc_id: doc_id.into(),
            sent_id: sent_id.into(),
            text,
            tokens,
        }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn token_text(&self, index: usize) -> Option<String> {
        let span = self.tokens.get(index)?;
        Some(self.text.chars().skip(span.start).take(span.end - span.start).collect())
    }

    /// Token whose span contains `offset`, or the next token when `offset`
    /// falls in whitespace. `None` past the last token.
    pub fn snap_to_token(&self, offset: usize) -> Option<usize> {
        self.tokens.iter().position(|span| offset < span.end)
    }
}

/// Maximal runs of non-whitespace characters, as char offsets.
pub fn tokenize(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut count = 0;
    for (i, ch) in text.chars().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push(Span { start: s, end: i });
                start = None;
            }
            _ => {}
        }
        count = i + 1;
    }
    if let Some(s) = start {
        spans.push(Span { start: s, end: count });
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventAnnotation {
    /// Index into [`Corpus::sentences`].
    pub sent: usize,
    pub event_type: String,
    pub first_token: usize,
    pub phrase_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub annotations: Vec<EventAnnotation>,
}

#[derive(Debug, Deserialize, Serialize)]
struct EventRecord {
    #[serde(rename = "type")]
    event_type: String,
    first_char: usize,
    #[serde(default)]
    phrase: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct SentenceRecord {
    doc_id: String,
    sent_id: String,
    text: String,
    #[serde(default)]
    events: Vec<EventRecord>,
}

impl Corpus {
    pub fn annotations_of<'a>(&'a self, sent: usize) -> impl Iterator<Item = &'a EventAnnotation> + 'a {
        self.annotations.iter().filter(move |a| a.sent == sent)
    }

    pub fn sentence_index(&self) -> HashMap<&str, usize> {
        self.sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.sent_id.as_str(), i))
            .collect()
    }

    /// Keeps the sentences accepted by `keep` and the annotations that still
    /// resolve, re-indexing sentence references.
    pub fn restrict(&self, mut keep: impl FnMut(&Sentence) -> bool) -> Corpus {
        let mut remap = vec![None; self.sentences.len()];
        let mut sentences = Vec::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if keep(s) {
                remap[i] = Some(sentences.len());
                sentences.push(s.clone());
            }
        }
        let annotations = self
            .annotations
            .iter()
            .filter_map(|a| {
                remap[a.sent].map(|sent| EventAnnotation {
                    sent,
                    ..a.clone()
                })
            })
            .collect();
        Corpus {
            sentences,
            annotations,
        }
    }

    /// Corpus restricted to sentences of at least `min_chars` characters.
    pub fn eligible(&self, min_chars: usize) -> Corpus {
        self.restrict(|s| s.char_len() >= min_chars)
    }

    /// Drops annotations whose event type the ontology no longer carries.
    pub fn retain_types(&self, ontology: &Ontology) -> Corpus {
        Corpus {
            sentences: self.sentences.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ontology.contains_type(&a.event_type))
                .cloned()
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        for (i, s) in self.sentences.iter().enumerate() {
            let record = SentenceRecord {
                doc_id: s.doc_id.clone(),
                sent_id: s.sent_id.clone(),
                text: s.text.clone(),
                events: self
                    .annotations_of(i)
                    .map(|a| EventRecord {
                        event_type: a.event_type.clone(),
                        first_char: s.tokens[a.first_token].start,
                        phrase: a.phrase_text.clone(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &record).expect("corpus records serialize");
            out.push(b'\n');
        }
        String::from_utf8(out).expect("serde_json emits utf-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn load_corpus(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Corpus> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&raw, ontology).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

/// Parses JSONL corpus text. Parse errors carry an empty path.
pub fn parse_corpus(raw: &str, ontology: &Ontology) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut ids = BTreeSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SentenceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: Default::default(),
            line: Some(lineno + 1),
            message: e.to_string(),
        })?;
        if !ids.insert(record.sent_id.clone()) {
            return Err(Error::Validation(format!("duplicate sent_id {:?}", record.sent_id)));
        }
        let sentence = Sentence::new(record.doc_id, record.sent_id, record.text);
        let sent = corpus.sentences.len();
        for event in record.events {
            if !ontology.contains_type(&event.event_type) {
                return Err(Error::UnknownEventType(event.event_type));
            }
            let first_token = locate_token(&sentence, event.first_char)?;
            corpus.annotations.push(EventAnnotation {
                sent,
                event_type: event.event_type,
                first_token,
                phrase_text: event.phrase,
            });
        }
        corpus.sentences.push(sentence);
    }
    Ok(corpus)
}

fn locate_token(sentence: &Sentence, offset: usize) -> Result<usize> {
    let out_of_bounds = || Error::OffsetOutOfBounds {
        sent_id: sentence.sent_id.clone(),
        offset,
    };
    if offset >= sentence.char_len() {
        return Err(out_of_bounds());
    }
    let index = sentence.snap_to_token(offset).ok_or_else(out_of_bounds)?;
    if sentence.tokens[index].start != offset {
        warn!(
            "sentence {}: offset {offset} is not a token start, snapped to token {index}",
            sentence.sent_id
        );
    }
    Ok(index)
}

/// Restricts each topic to event types with at least `min_instances`
/// annotations in `corpus`; topics left empty are removed.
pub fn filter_event_types(corpus: &Corpus, ontology: &Ontology, min_instances: usize) -> Ontology {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &corpus.annotations {
        *counts.entry(a.event_type.as_str()).or_default() += 1;
    }
    let topics = ontology
        .topics
        .iter()
        .filter_map(|topic| {
            let event_types: Vec<String> = topic
                .event_types
                .iter()
                .filter(|t| counts.get(t.as_str()).copied().unwrap_or(0) >= min_instances)
                .cloned()
                .collect();
            (!event_types.is_empty()).then(|| Topic {
                name: topic.name.clone(),
                event_types,
            })
        })
        .collect();
    Ontology { topics }
}

/// Sentences with at least `min_chars` characters, in corpus order.
pub fn eligible_sentences(corpus: &Corpus, min_chars: usize) -> Vec<&Sentence> {
    corpus
        .sentences
        .iter()
        .filter(|s| s.char_len() >= min_chars)
        .collect()
}
