//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use lao::config::{ConfigLayer, RunConfig};
use lao::pipeline::{Manifest, PredictionRecord};
use lao::prompt::Variant;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The fixture run config, writing into `out`.
pub fn fixture_config(out: &Path, variant: Variant) -> RunConfig {
    let mut cfg = ConfigLayer::load(fixtures().join("run.conf"))
        .and_then(ConfigLayer::resolve)
        .expect("fixture config");
    cfg.variant = variant;
    cfg.out = out.to_path_buf();
    cfg
}

// ---------------------------------------------------------------------------
// scoring oracle: straight from the definitions, no shared code with the crate

pub const LEVELS: [u8; 5] = [5, 4, 3, 2, 1];

/// (tp, fp, fn) per level, counting each level from scratch.
pub fn brute_sweep(preds: &[(u8, bool)], total_refs: usize) -> Vec<(usize, usize, usize)> {
    LEVELS
        .iter()
        .map(|&level| {
            let tp = preds.iter().filter(|(c, ok)| *c >= level && *ok).count();
            let fp = preds.iter().filter(|(c, ok)| *c >= level && !*ok).count();
            (tp, fp, total_refs - tp)
        })
        .collect()
}

/// Pairwise AUC over every (correct, incorrect) pair.
pub fn brute_auc(preds: &[(u8, bool)]) -> Option<f64> {
    let t: Vec<u8> = preds.iter().filter(|p| p.1).map(|p| p.0).collect();
    let f: Vec<u8> = preds.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if t.is_empty() || f.is_empty() {
        return None;
    }
    let mut score = 0.0;
    for a in &t {
        for b in &f {
            score += match a.cmp(b) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    Some(score / (t.len() * f.len()) as f64)
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenTopic {
    pub topic: String,
    /// event type -> (tp, fp, fn) for levels 5..1
    pub per_type: BTreeMap<String, Vec<(usize, usize, usize)>>,
    pub micro: Vec<(usize, usize, usize)>,
    pub macro_f1: Vec<f64>,
    pub best_level: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub micro_f1: f64,
    pub auc: Option<f64>,
    pub roc_counts: Vec<usize>,
}

/// Reference first-token indices keyed by (sent_id, event_type), computed
/// from raw corpus lines by counting whitespace-separated words before each
/// event's first character.
pub fn oracle_refs(corpus_jsonl: &str) -> BTreeSet<(String, String, usize)> {
    let mut refs = BTreeSet::new();
    for line in corpus_jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).unwrap();
        let text = v["text"].as_str().unwrap();
        let sent_id = v["sent_id"].as_str().unwrap();
        for e in v["events"].as_array().unwrap() {
            let first = e["first_char"].as_u64().unwrap() as usize;
            let before: String = text.chars().take(first).collect();
            let token = before.split_whitespace().count();
            refs.insert((sent_id.to_string(), e["type"].as_str().unwrap().to_string(), token));
        }
    }
    refs
}

/// Scores persisted predictions for every topic in the manifest scope.
pub fn oracle_report(manifest: &Manifest, preds: &[PredictionRecord], corpus_jsonl: &str, confidence: bool) -> Vec<GoldenTopic> {
    let refs = oracle_refs(corpus_jsonl);
    let mut out = Vec::new();
    for scope in &manifest.scope {
        let ids: BTreeSet<&str> = scope.sent_ids.iter().map(String::as_str).collect();
        let mut per_type = BTreeMap::new();
        let mut f1s: Vec<Vec<f64>> = Vec::new();
        let mut all: Vec<(u8, bool)> = Vec::new();
        for ty in &scope.event_types {
            let total_refs = refs
                .iter()
                .filter(|(s, t, _)| t == ty && ids.contains(s.as_str()))
                .count();
            let labeled: Vec<(u8, bool)> = preds
                .iter()
                .filter(|p| p.topic == scope.topic && &p.event_type == ty)
                .map(|p| (p.confidence, refs.contains(&(p.sent_id.clone(), ty.clone(), p.token_index))))
                .collect();
            let sweep = brute_sweep(&labeled, total_refs);
            if total_refs > 0 || !labeled.is_empty() {
                f1s.push(sweep.iter().map(|&(tp, fp, fn_)| prf(tp, fp, fn_).2).collect());
            }
            all.extend(&labeled);
            per_type.insert(ty.clone(), sweep);
        }
        let micro: Vec<(usize, usize, usize)> = (0..5)
            .map(|i| {
                per_type
                    .values()
                    .fold((0, 0, 0), |a, s| (a.0 + s[i].0, a.1 + s[i].1, a.2 + s[i].2))
            })
            .collect();
        let macro_f1: Vec<f64> = (0..5)
            .map(|i| {
                if f1s.is_empty() {
                    0.0
                } else {
                    f1s.iter().map(|f| f[i]).sum::<f64>() / f1s.len() as f64
                }
            })
            .collect();
        let mut best = 0;
        for i in 1..5 {
            if macro_f1[i] > macro_f1[best] {
                best = i;
            }
        }
        let (p, r, mf) = prf(micro[best].0, micro[best].1, micro[best].2);
        out.push(GoldenTopic {
            topic: scope.topic.clone(),
            per_type,
            micro,
            macro_f1: macro_f1.clone(),
            best_level: LEVELS[best],
            precision: p,
            recall: r,
            f1: macro_f1[best],
            micro_f1: mf,
            auc: if confidence { brute_auc(&all) } else { Some(0.5) },
            roc_counts: LEVELS.iter().map(|l| all.iter().filter(|p| p.0 == *l).count()).collect(),
        });
    }
    out
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

// ---------------------------------------------------------------------------
// JSON Schema subset: type, enum, required, properties, additionalProperties,
// items, minItems, maxItems, minimum, maximum, local $ref

pub fn validate_schema(schema: &Value, value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    check(schema, schema, value, "$", &mut errors);
    errors
}

fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let target = root
                .pointer(r.trim_start_matches('#'))
                .unwrap_or_else(|| panic!("unresolved $ref {r}"));
            resolve(root, target)
        }
        None => node,
    }
}

fn type_matches(name: &str, v: &Value) -> bool {
    match name {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "integer" => v.is_u64() || v.is_i64(),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        other => panic!("unsupported schema type {other}"),
    }
}

fn check(root: &Value, node: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    let node = resolve(root, node);
    if let Some(t) = node.get("type") {
        let names: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => panic!("bad type keyword"),
        };
        if !names.iter().any(|n| type_matches(n, v)) {
            errors.push(format!("{at}: expected {names:?}, got {v}"));
            return;
        }
    }
    if let Some(options) = node.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            errors.push(format!("{at}: {v} not in enum"));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(min) = node.get("minimum").and_then(Value::as_f64) {
            if x < min {
                errors.push(format!("{at}: {x} < {min}"));
            }
        }
        if let Some(max) = node.get("maximum").and_then(Value::as_f64) {
            if x > max {
                errors.push(format!("{at}: {x} > {max}"));
            }
        }
    }
    if let Some(obj) = v.as_object() {
        let props = node.get("properties").and_then(Value::as_object);
        for key in node.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = key.as_str().unwrap();
            if !obj.contains_key(key) {
                errors.push(format!("{at}: missing {key}"));
            }
        }
        for (key, child) in obj {
            let path = format!("{at}.{key}");
            match (props.and_then(|p| p.get(key)), node.get("additionalProperties")) {
                (Some(sub), _) => check(root, sub, child, &path, errors),
                (None, Some(Value::Bool(false))) => errors.push(format!("{at}: unexpected key {key}")),
                (None, Some(sub @ Value::Object(_))) => check(root, sub, child, &path, errors),
                _ => {}
            }
        }
    }
    if let Some(arr) = v.as_array() {
        if let Some(min) = node.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < min {
                errors.push(format!("{at}: fewer than {min} items"));
            }
        }
        if let Some(max) = node.get("maxItems").and_then(Value::as_u64) {
            if (arr.len() as u64) > max {
                errors.push(format!("{at}: more than {max} items"));
            }
        }
        if let Some(items) = node.get("items") {
            for (i, child) in arr.iter().enumerate() {
                check(root, items, child, &format!("{at}[{i}]"), errors);
            }
        }
    }
}

/// Differences between a pipeline report and oracle-derived expectations.
pub fn report_vs_golden(report: &lao::pipeline::RunReport, golden: &[GoldenTopic]) -> Vec<String> {
    let mut diffs = Vec::new();
    if report.topics.len() != golden.len() {
        diffs.push(format!("{} topics, expected {}", report.topics.len(), golden.len()));
        return diffs;
    }
    for (t, g) in report.topics.iter().zip(golden) {
        let name = &g.topic;
        if t.topic != g.topic {
            diffs.push(format!("topic {} != {name}", t.topic));
            continue;
        }
        for (ty, rows) in &t.per_type {
            let counts: Vec<(usize, usize, usize)> = rows.iter().map(|r| (r.tp, r.fp, r.fn_)).collect();
            if g.per_type.get(ty) != Some(&counts) {
                diffs.push(format!("{name}/{ty}: counts {counts:?} != {:?}", g.per_type.get(ty)));
            }
        }
        let micro: Vec<(usize, usize, usize)> = t.topic_micro.iter().map(|r| (r.tp, r.fp, r.fn_)).collect();
        if micro != g.micro {
            diffs.push(format!("{name}: micro {micro:?} != {:?}", g.micro));
        }
        for (m, e) in t.topic_macro_f1.iter().zip(&g.macro_f1) {
            if !close(m.value, *e) {
                diffs.push(format!("{name}: macro F1 at {} {} != {e}", m.level, m.value));
            }
        }
        if t.best_level != g.best_level {
            diffs.push(format!("{name}: best level {} != {}", t.best_level, g.best_level));
        }
        for (what, a, b) in [
            ("precision", t.best.precision, g.precision),
            ("recall", t.best.recall, g.recall),
            ("f1", t.best.f1, g.f1),
            ("micro_f1", t.best.micro_f1, g.micro_f1),
        ] {
            if !close(a, b) {
                diffs.push(format!("{name}: {what} {a} != {b}"));
            }
        }
        match (t.auc.value, g.auc) {
            (Some(a), Some(b)) if close(a, b) => {}
            (None, None) => {}
            (a, b) => diffs.push(format!("{name}: auc {a:?} != {b:?}")),
        }
        let counts: Vec<usize> = LEVELS
            .iter()
            .map(|l| t.roc_points.iter().find(|p| p.level == *l).map_or(0, |p| p.count))
            .collect();
        if counts != g.roc_counts {
            diffs.push(format!("{name}: roc counts {counts:?} != {:?}", g.roc_counts));
        }
    }
    diffs
}

/// Loads a golden file, or writes it from `fresh` when `LAO_BLESS` is set.
pub fn golden(name: &str, fresh: &[GoldenTopic]) -> Vec<GoldenTopic> {
    let path = fixtures().join("golden").join(name);
    if std::env::var_os("LAO_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut text = serde_json::to_string_pretty(fresh).unwrap();
        text.push('\n');
        std::fs::write(&path, text).unwrap();
    }
    let raw = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&raw).unwrap()
}
