//! Few-shot exemplar selection by lexical type and construction of the
//! positive/negative test cycle.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EventAnnotation, Sentence, Topic};
use crate::error::{Error, Result};

pub const DEFAULT_K_SHOT: usize = 5;

/// Number of negatives that follow each positive in a test sequence.
pub const NEGATIVES_PER_POSITIVE: usize = 3;

/// Ordered suffix rules applied to a lowercased word. The first rule whose
/// suffix matches and whose remaining stem is long enough wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuffixRule {
    pub suffix: &'static str,
    pub replacement: &'static str,
    pub min_stem: usize,
    /// Stem must not end with this char (guards "ss" for the plain "s" rule).
    pub stem_not_ending: Option<char>,
    /// Reduce a doubled final consonant after stripping ("stopped" -> "stop").
    pub undouble: bool,
}

pub const LEMMA_RULES: &[SuffixRule] = &[
    SuffixRule { suffix: "ies", replacement: "y", min_stem: 0, stem_not_ending: None, undouble: false },
    SuffixRule { suffix: "sses", replacement: "ss", min_stem: 0, stem_not_ending: None, undouble: false },
    SuffixRule { suffix: "ing", replacement: "", min_stem: 3, stem_not_ending: None, undouble: true },
    SuffixRule { suffix: "ed", replacement: "", min_stem: 3, stem_not_ending: None, undouble: true },
    SuffixRule { suffix: "es", replacement: "", min_stem: 3, stem_not_ending: None, undouble: false },
    SuffixRule { suffix: "s", replacement: "", min_stem: 3, stem_not_ending: Some('s'), undouble: false },
];

/// Doubled finals that survive undoubling ("killing" -> "kill").
const KEEP_DOUBLED: &[char] = &['l', 's', 'z'];

/// Deterministic lemma approximation used to group exemplars by lexical type.
pub fn lemma_key(word: &str) -> String {
    let word = word
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    for rule in LEMMA_RULES {
        let Some(stem) = word.strip_suffix(rule.suffix) else {
            continue;
        };
        if stem.chars().count() < rule.min_stem {
            continue;
        }
        if rule.stem_not_ending.is_some_and(|c| stem.ends_with(c)) {
            continue;
        }
        let mut out = format!("{stem}{}", rule.replacement);
        if rule.undouble {
            undouble(&mut out);
        }
        return out;
    }
    word
}

fn undouble(stem: &mut String) {
    let mut rev = stem.chars().rev();
    if let (Some(last), Some(prev)) = (rev.next(), rev.next()) {
        let consonant = last.is_ascii_alphabetic() && !"aeiou".contains(last);
        if last == prev && consonant && !KEEP_DOUBLED.contains(&last) {
            stem.pop();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub sentence: Sentence,
    /// Annotations of the set's event type in this sentence.
    pub annotations: Vec<EventAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub event_type: String,
    pub examples: Vec<FewShotExample>,
    /// Lexical group each example was drawn for, parallel to `examples`.
    pub lemma_keys: Vec<String>,
}

impl FewShotSet {
    pub fn sent_ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.sentence.sent_id.as_str())
    }
}

/// Draws up to `k` exemplars for `event_type`, one per lexical group first,
/// then padding from the largest groups.
pub fn select_few_shot(corpus: &Corpus, event_type: &str, k: usize, rng_seed: u64) -> Result<FewShotSet> {
    // lemma -> (instance count, distinct sentence indices in corpus order)
    let mut groups: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for a in corpus.annotations.iter().filter(|a| a.event_type == event_type) {
        let word = corpus.sentences[a.sent].token_text(a.first_token).unwrap_or_default();
        let entry = groups.entry(lemma_key(&word)).or_default();
        entry.0 += 1;
        if !entry.1.contains(&a.sent) {
            entry.1.push(a.sent);
        }
    }
    groups.retain(|_, (count, _)| *count >= 2);
    if groups.is_empty() {
        return Err(Error::InsufficientExemplars(event_type.to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut used = HashSet::new();
    let mut picks: Vec<(String, usize)> = Vec::new();

    let mut order: Vec<&String> = groups.keys().collect();
    order.shuffle(&mut rng);
    for key in order {
        if picks.len() == k {
            break;
        }
        if let Some(sent) = draw(&groups[key].1, &used, &mut rng) {
            used.insert(sent);
            picks.push((key.clone(), sent));
        }
    }

    let mut by_size: Vec<(&String, &(usize, Vec<usize>))> = groups.iter().collect();
    by_size.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then_with(|| a.0.cmp(b.0)));
    for (key, (_, sentences)) in by_size {
        while picks.len() < k {
            match draw(sentences, &used, &mut rng) {
                Some(sent) => {
                    used.insert(sent);
                    picks.push((key.clone(), sent));
                }
                None => break,
            }
        }
    }

    let (lemma_keys, examples) = picks
        .into_iter()
        .map(|(key, sent)| {
            let annotations = corpus
                .annotations_of(sent)
                .filter(|a| a.event_type == event_type)
                .cloned()
                .collect();
            (
                key,
                FewShotExample {
                    sentence: corpus.sentences[sent].clone(),
                    annotations,
                },
            )
        })
        .unzip();
    Ok(FewShotSet {
        event_type: event_type.to_string(),
        examples,
        lemma_keys,
    })
}

fn draw(candidates: &[usize], used: &HashSet<usize>, rng: &mut ChaCha8Rng) -> Option<usize> {
    let free: Vec<usize> = candidates.iter().copied().filter(|s| !used.contains(s)).collect();
    if free.is_empty() {
        None
    } else {
        Some(free[rng.gen_range(0..free.len())])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSequence {
    pub topic: String,
    pub items: Vec<Sentence>,
    pub positives_mask: Vec<bool>,
}

/// Interleaves one positive sentence (any in-topic annotation) with three
/// negatives, sampling each pool without replacement. Stops at `max_items`
/// or as soon as the pool needed next is empty.
pub fn build_test_sequence(
    corpus: &Corpus,
    topic: &Topic,
    excluded: &BTreeSet<String>,
    rng_seed: u64,
    max_items: usize,
) -> Result<TestSequence> {
    let topic_types: HashSet<&str> = topic.event_types.iter().map(String::as_str).collect();
    let mut positive = vec![false; corpus.sentences.len()];
    for a in &corpus.annotations {
        if topic_types.contains(a.event_type.as_str()) {
            positive[a.sent] = true;
        }
    }
    let (mut positives, mut negatives): (Vec<usize>, Vec<usize>) = (0..corpus.sentences.len())
        .filter(|&i| !excluded.contains(&corpus.sentences[i].sent_id))
        .partition(|&i| positive[i]);
    if positives.is_empty() {
        return Err(Error::EmptyPositivePool(topic.name.clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let mut positives = positives.into_iter();
    let mut negatives = negatives.into_iter();

    let mut items = Vec::new();
    let mut mask = Vec::new();
    while items.len() < max_items {
        let want_positive = items.len() % (NEGATIVES_PER_POSITIVE + 1) == 0;
        let next = if want_positive { positives.next() } else { negatives.next() };
        let Some(i) = next else { break };
        items.push(corpus.sentences[i].clone());
        mask.push(want_positive);
    }
    Ok(TestSequence {
        topic: topic.name.clone(),
        items,
        positives_mask: mask,
    })
}
