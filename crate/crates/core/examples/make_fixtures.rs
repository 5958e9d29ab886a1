//! Regenerates the test fixtures: a synthetic corpus and a completion store
//! recorded from a simulated annotator.
//!
//! cargo run --example make_fixtures -- crates/core/tests/fixtures

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use lao::config::ConfigLayer;
use lao::corpus::{EventAnnotation, Sentence};
use lao::gateway::{write_records, CompletionRecord};
use lao::pipeline::{build_jobs, load_templates, prepare, sample};
use lao::prompt::{mark_sentence, Variant};

/// (event type, trigger forms, instance count). Counts under ten fall to the
/// instance filter.
const TRIGGERS: &[(&str, &[&str], usize)] = &[
    ("Law-Enforcement-Arrest", &["arrested", "arrests", "detained", "detains", "apprehended", "apprehends", "captured", "captures"], 12),
    ("Judicial-Convict", &["convicted", "convicts", "condemned", "condemns", "found", "found"], 11),
    ("Judicial-Sentence", &["sentenced", "sentences", "jailed", "jails", "imprisoned", "imprisons"], 11),
    ("Judicial-Indict", &["indicted", "indicts"], 4),
    ("Violence-Attack", &["attacked", "attacks", "stormed", "storms", "raided", "raids", "ambushed", "ambushes"], 12),
    ("Violence-Kill", &["killed", "kills", "murdered", "murders", "executed", "executes"], 12),
    ("Violence-Bombing", &["bombed", "bombs", "blasted", "blasts", "detonated", "detonates"], 11),
    ("Violence-Wound", &["wounded", "wounds"], 3),
    ("Disease-Outbreak", &["spread", "spreads", "surged", "surges", "flared", "flares"], 11),
    ("Disease-Kills", &["claimed", "claims", "killed", "killing", "took", "took"], 11),
    ("Vaccinate", &["vaccinated", "vaccinates", "inoculated", "inoculates", "immunized", "immunizes"], 12),
    ("Hospitalize", &["hospitalized"], 2),
];

fn subjects(event_type: &str) -> &'static [&'static str] {
    match event_type {
        "Law-Enforcement-Arrest" => &["Federal agents", "Local police", "Border officers", "Detectives in the capital"],
        "Judicial-Convict" | "Judicial-Sentence" | "Judicial-Indict" => &["A district court", "The jury", "A military tribunal", "The appeals judge"],
        "Disease-Outbreak" => &["The virus", "A measles strain", "The cholera outbreak", "Dengue fever"],
        "Disease-Kills" => &["The epidemic", "The new variant", "The fever", "The influenza wave"],
        "Vaccinate" | "Hospitalize" => &["Health workers", "Mobile clinics", "Volunteer nurses", "The ministry"],
        _ => &["Armed militants", "Rebel fighters", "Unknown gunmen", "An insurgent cell"],
    }
}

fn objects(event_type: &str) -> &'static [&'static str] {
    match event_type {
        t if t.starts_with("Law") || t.starts_with("Judicial") => &["the former mayor", "two bank officials", "a smuggling suspect", "the union leader"],
        "Disease-Outbreak" => &["across the northern provinces", "through crowded camps", "in three districts", "along the river towns"],
        "Disease-Kills" => &["dozens of villagers", "more than forty patients", "several elderly residents", "hundreds of children"],
        "Vaccinate" | "Hospitalize" => &["thousands of children", "elderly residents", "refugees at the border", "school staff"],
        _ => &["a police convoy", "the regional governor's office", "a crowded market", "an army checkpoint"],
    }
}

const TAILS: &[&str] = &["on Monday", "last week", "late on Friday", "earlier this month", "according to officials", "near the capital"];

const NEUTRAL: &[&str] = &[
    "The city council approved a new budget for public schools",
    "Farmers expect a strong harvest after the spring rains",
    "The central bank kept interest rates unchanged",
    "A new bridge over the river opened to traffic",
    "Tourism numbers rose sharply during the summer festival",
    "The museum unveiled a collection of ancient coins",
    "Students returned to classrooms after the long holiday",
    "The football club signed a young striker from abroad",
    "Engineers began repairs on the old railway line",
    "The ministry published new guidelines for exporters",
];

fn corpus_lines(rng: &mut ChaCha8Rng) -> Vec<serde_json::Value> {
    // one clause per event instance
    let mut clauses = Vec::new();
    for &(ty, forms, count) in TRIGGERS {
        for i in 0..count {
            let form = forms[i % forms.len()];
            let subj = subjects(ty).choose(rng).unwrap();
            let obj = objects(ty).choose(rng).unwrap();
            let (prefix, trigger, suffix) = match (ty, form) {
                ("Judicial-Convict", "found") => (format!("{subj} "), form.to_string(), format!(" {obj} guilty")),
                ("Disease-Kills", "took") => (format!("{subj} "), form.to_string(), format!(" the lives of {obj}")),
                _ => (format!("{subj} "), form.to_string(), format!(" {obj}")),
            };
            clauses.push((ty, prefix, trigger, suffix));
        }
    }
    clauses.shuffle(rng);

    let mut sentences: Vec<(String, Vec<serde_json::Value>)> = Vec::new();
    let mut iter = clauses.into_iter();
    let mut n = 0usize;
    while let Some((ty, prefix, trigger, suffix)) = iter.next() {
        let mut text = String::new();
        let mut events = Vec::new();
        let mut push = |text: &mut String, ty: &str, prefix: &str, trigger: &str, suffix: &str| {
            text.push_str(prefix);
            let first_char = text.chars().count();
            text.push_str(trigger);
            text.push_str(suffix);
            events.push(json!({"type": ty, "first_char": first_char, "phrase": format!("{trigger}{suffix}")}));
        };
        push(&mut text, ty, &prefix, &trigger, &suffix);
        n += 1;
        // every fourth sentence carries a second event
        if n.is_multiple_of(4) {
            if let Some((ty2, p2, t2, s2)) = iter.next() {
                let p2 = format!(", while {}", p2.to_lowercase().trim_start());
                push(&mut text, ty2, &p2, &t2, &s2);
            }
        }
        // every ninth sentence is too short to be eligible
        if n.is_multiple_of(9) {
            let short = format!("{} {}.", prefix.split_whitespace().last().unwrap_or("They"), trigger);
            let first_char = short.chars().count() - trigger.chars().count() - 1;
            sentences.push((short, vec![json!({"type": ty, "first_char": first_char, "phrase": trigger})]));
            continue;
        }
        text.push(' ');
        text.push_str(TAILS.choose(rng).unwrap());
        text.push('.');
        sentences.push((text, events));
    }
    for (i, base) in NEUTRAL.iter().cycle().take(30).enumerate() {
        let tail = TAILS[i % TAILS.len()];
        sentences.push((format!("{base} {tail}."), Vec::new()));
    }
    sentences.shuffle(rng);
    sentences
        .into_iter()
        .enumerate()
        .map(|(i, (text, events))| {
            json!({"doc_id": format!("doc{:02}", i / 6), "sent_id": format!("s{i:03}"), "text": text, "events": events})
        })
        .collect()
}

const HIGH: [u8; 5] = [5, 5, 5, 4, 4];
const LOW: [u8; 6] = [5, 4, 4, 3, 2, 1];

/// Inserts a single character edit at least three chars away from `keep`.
fn corrupt(copy: &str, keep: usize, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = copy.chars().collect();
    let candidates: Vec<usize> = (0..chars.len()).filter(|i| i.abs_diff(keep) > 3 && chars[*i] != '|').collect();
    let Some(&at) = candidates.choose(rng) else { return copy.to_string() };
    let mut out: Vec<char> = chars.clone();
    match rng.gen_range(0..3) {
        0 => {
            out.remove(at);
        }
        1 => out[at] = if chars[at] == '.' { ',' } else { 'x' },
        _ => out.insert(at, 'e'),
    }
    out.into_iter().collect()
}

fn simulate(variant: Variant, event_type: &str, sentence: &Sentence, gold: &[usize], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut marks: BTreeMap<usize, u8> = BTreeMap::new();
    for &t in gold {
        if rng.gen_bool(0.8) {
            marks.insert(t, *HIGH.choose(&mut rng).unwrap());
        }
    }
    if rng.gen_bool(if gold.is_empty() { 0.15 } else { 0.3 }) && sentence.tokens.len() > 1 {
        let t = rng.gen_range(0..sentence.tokens.len());
        marks.entry(t).or_insert(*LOW.choose(&mut rng).unwrap());
    }

    let mut out = String::new();
    if rng.gen_bool(0.1) {
        out.push_str("Here are my answers.\n\n");
    }
    let label = |name: &str, rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.1) {
            format!("**{name}:**")
        } else {
            format!("{name}:")
        }
    };
    let triplet = |out: &mut String, copy: String, conf: u8, word: Option<String>, rng: &mut ChaCha8Rng| {
        let _ = writeln!(out, "{} {copy}", label("SENTENCE", rng));
        if variant.elicits_confidence() {
            let _ = writeln!(out, "{} {conf}", label("CONFIDENCE", rng));
        }
        if variant.elicits_explanation() {
            let why = match &word {
                Some(w) => format!("\"{w}\" introduces a {event_type} event."),
                None => format!("The sentence does not describe a {event_type} event."),
            };
            let _ = writeln!(out, "{} {why}", label("EXPLANATION", rng));
            let _ = writeln!(out, "{}", label("QUESTIONS", rng));
            let _ = writeln!(out, "- Does a {event_type} event require an official actor?");
            let _ = writeln!(out, "- Should planned but unfinished actions count as {event_type}?");
        }
        out.push('\n');
    };
    if marks.is_empty() {
        triplet(&mut out, sentence.text.clone(), 1, None, &mut rng);
    }
    for (&tok, &conf) in &marks {
        let ann = EventAnnotation {
            sent: 0,
            event_type: event_type.to_string(),
            first_token: tok,
            phrase_text: String::new(),
        };
        let mut copy = mark_sentence(sentence, &[ann]);
        if rng.gen_bool(0.3) {
            copy = corrupt(&copy, sentence.tokens[tok].start, &mut rng);
        }
        triplet(&mut out, copy, conf, sentence.token_text(tok), &mut rng);
    }
    out.trim_end().to_string() + "\n"
}

fn main() -> lao::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/tests/fixtures".into()));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let corpus: String = corpus_lines(&mut rng)
        .iter()
        .map(|v| serde_json::to_string(v).unwrap() + "\n")
        .collect();
    std::fs::write(dir.join("corpus.jsonl"), corpus).expect("write corpus");

    let stamp = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let mut records = Vec::new();
    for variant in [Variant::Full, Variant::NoConf] {
        let mut cfg = ConfigLayer::load(dir.join("run.conf"))?.resolve()?;
        cfg.variant = variant;
        let prepared = prepare(&cfg)?;
        let splits = sample(&cfg, &prepared)?;
        let jobs = build_jobs(&cfg, &splits, &load_templates(&cfg)?)?;
        let index = prepared.corpus.sentence_index();
        for job in &jobs {
            let split = splits.topics.iter().find(|s| s.topic == job.topic).unwrap();
            let sentence = &split.test.items[job.item];
            let sent = index[sentence.sent_id.as_str()];
            let gold: Vec<usize> = prepared
                .corpus
                .annotations_of(sent)
                .filter(|a| a.event_type == job.event_type)
                .map(|a| a.first_token)
                .collect();
            let seed = u64::from_str_radix(&job.request.hash()[..16], 16).unwrap();
            let raw = simulate(variant, &job.event_type, sentence, &gold, seed);
            records.push(CompletionRecord::new(job.request.clone(), raw, stamp));
        }
        println!("{variant}: {} completions", jobs.len());
    }
    write_records(dir.join("completions.jsonl"), &records).map_err(|e| lao::Error::Gateway {
        key: "fixtures".into(),
        source: e,
    })?;
    Ok(())
}
