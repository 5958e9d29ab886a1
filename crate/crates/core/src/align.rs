//! Character-level alignment of a model's copy against the original
//! sentence, used to recover which tokens the copy marked with `|`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;

pub const PIPE: char = '|';
pub const DEFAULT_UNUSABLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignOp {
    Match,
    Substitute,
    /// Character of `a` with no counterpart in `b`.
    Delete,
    /// Character of `b` with no counterpart in `a`.
    Insert,
}

impl AlignOp {
    pub fn cost(self) -> usize {
        match self {
            AlignOp::Match => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<AlignOp>,
    pub cost: usize,
}

impl Alignment {
    /// For every char of `b`, the aligned char index in `a` (None for
    /// insertions).
    pub fn b_to_a(&self) -> Vec<Option<usize>> {
        let mut map = Vec::new();
        let (mut i, mut j) = (0, 0);
        for op in &self.ops {
            match op {
                AlignOp::Match | AlignOp::Substitute => {
                    map.push(Some(i));
                    i += 1;
                    j += 1;
                }
                AlignOp::Delete => i += 1,
                AlignOp::Insert => {
                    map.push(None);
                    j += 1;
                }
            }
        }
        debug_assert_eq!(map.len(), j);
        map
    }
}

/// Minimum-cost global alignment under unit costs. Traceback prefers
/// match, then substitute, then delete, then insert.
pub fn align_chars(a: &str, b: &str) -> Alignment {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    align_slices(&a, &b)
}

pub fn align_slices(a: &[char], b: &[char]) -> Alignment {
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    let mut dp = vec![0usize; (n + 1) * width];
    for (j, cell) in dp[..width].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        dp[i * width] = i;
        for j in 1..=m {
            let diag = dp[(i - 1) * width + j - 1] + usize::from(a[i - 1] != b[j - 1]);
            let up = dp[(i - 1) * width + j] + 1;
            let left = dp[i * width + j - 1] + 1;
            dp[i * width + j] = diag.min(up).min(left);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 {
            let diag = dp[(i - 1) * width + j - 1];
            if a[i - 1] == b[j - 1] && diag == here {
                ops.push(AlignOp::Match);
                i -= 1;
                j -= 1;
                continue;
            }
            if a[i - 1] != b[j - 1] && diag + 1 == here {
                ops.push(AlignOp::Substitute);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * width + j] + 1 == here {
            ops.push(AlignOp::Delete);
            i -= 1;
        } else {
            ops.push(AlignOp::Insert);
            j -= 1;
        }
    }
    ops.reverse();
    Alignment {
        ops,
        cost: dp[n * width + m],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub token_indices: Vec<usize>,
    pub normalized_distance: f64,
    pub usable: bool,
    /// Pipes that could not be mapped to a token.
    pub dropped_pipes: usize,
}

/// Recovers the tokens of `original` that `marked_copy` flags with `|`.
pub fn recover_pipe_positions(original: &Sentence, marked_copy: &str, threshold: f64) -> AlignmentResult {
    // positions (in the pipe-free copy) of the char following each pipe
    let mut pipe_targets = Vec::new();
    let mut stripped = Vec::new();
    for ch in marked_copy.chars() {
        if ch == PIPE {
            pipe_targets.push(stripped.len());
        } else {
            stripped.push(ch);
        }
    }
    let text: Vec<char> = original.text.chars().collect();
    let alignment = align_slices(&text, &stripped);
    let longest = text.len().max(stripped.len());
    let normalized_distance = if longest == 0 {
        0.0
    } else {
        alignment.cost as f64 / longest as f64
    };
    let usable = normalized_distance <= threshold;
    if !usable {
        return AlignmentResult {
            token_indices: Vec::new(),
            normalized_distance,
            usable,
            dropped_pipes: pipe_targets.len(),
        };
    }

    let b_to_a = alignment.b_to_a();
    let mut dropped = 0;
    let mut indices = Vec::new();
    for target in pipe_targets {
        let mapped = b_to_a.get(target..).and_then(|rest| rest.iter().flatten().next().copied());
        match mapped.and_then(|pos| original.snap_to_token(pos)) {
            Some(tok) => indices.push(tok),
            None => {
                dropped += 1;
                warn!(
                    "sentence {}: pipe at copy offset {target} has no aligned character; dropped",
                    original.sent_id
                );
            }
        }
    }
    indices.sort_unstable();
    indices.dedup();
    AlignmentResult {
        token_indices: indices,
        normalized_distance,
        usable,
        dropped_pipes: dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Top-down recursive edit distance over suffixes, memoized, independent
    /// of the DP table.
    fn brute_distance(a: &[char], b: &[char]) -> usize {
        fn go(a: &[char], b: &[char], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
            if let Some(&d) = memo.get(&(a.len(), b.len())) {
                return d;
            }
            let d = match (a, b) {
                ([], _) => b.len(),
                (_, []) => a.len(),
                ([x, ra @ ..], [y, rb @ ..]) => {
                    let sub = go(ra, rb, memo) + usize::from(x != y);
                    let del = go(ra, b, memo) + 1;
                    let ins = go(a, rb, memo) + 1;
                    sub.min(del).min(ins)
                }
            };
            memo.insert((a.len(), b.len()), d);
            d
        }
        go(a, b, &mut Default::default())
    }

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identity_alignment() {
        let al = align_chars("abc", "abc");
        assert_eq!(al.cost, 0);
        assert_eq!(al.ops, vec![AlignOp::Match; 3]);
    }

    #[test]
    fn single_insertion() {
        let al = align_chars("abc", "abXc");
        assert_eq!(al.cost, 1);
        assert_eq!(al.ops.iter().filter(|o| **o == AlignOp::Insert).count(), 1);
        assert_eq!(al.ops.len(), 4);
    }

    #[test]
    fn kitten_sitting() {
        assert_eq!(brute_distance(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(align_chars("kitten", "sitting").cost, 3);
    }

    #[test]
    fn path_cost_matches_reported_cost() {
        for (a, b) in [("", "abc"), ("abc", ""), ("flaw", "lawn"), ("intention", "execution"), ("aaa", "aa")] {
            let al = align_chars(a, b);
            assert_eq!(al.cost, brute_distance(&chars(a), &chars(b)), "{a} vs {b}");
            assert_eq!(al.ops.iter().map(|o| o.cost()).sum::<usize>(), al.cost);
            let consumed_a = al.ops.iter().filter(|o| **o != AlignOp::Insert).count();
            let consumed_b = al.ops.iter().filter(|o| **o != AlignOp::Delete).count();
            assert_eq!((consumed_a, consumed_b), (a.chars().count(), b.chars().count()));
        }
    }

    #[test]
    fn tie_order_prefers_delete_over_insert() {
        // "ab" -> "ba": equal-cost paths exist; traceback is fixed
        assert_eq!(align_chars("ab", "ba").ops, vec![AlignOp::Substitute, AlignOp::Substitute]);
        assert_eq!(align_chars("aa", "a").ops, vec![AlignOp::Delete, AlignOp::Match]);
    }

    fn sentence(text: &str) -> Sentence {
        Sentence::new("d", "s", text)
    }

    #[test]
    fn perfect_copy() {
        let r = recover_pipe_positions(&sentence("Police arrested him."), "Police |arrested him.", 0.5);
        assert_eq!(r.token_indices, vec![1]);
        assert_eq!(r.normalized_distance, 0.0);
        assert!(r.usable);
    }

    #[test]
    fn noisy_copy() {
        let original = "Police arrested him.";
        let copy = "Police |arested him,";
        let stripped: String = copy.chars().filter(|c| *c != '|').collect();
        let cost = brute_distance(&chars(original), &chars(&stripped));
        assert_eq!(cost, 2);
        let r = recover_pipe_positions(&sentence(original), copy, 0.5);
        assert_eq!(r.token_indices, vec![1]);
        assert!((r.normalized_distance - 0.10).abs() < 1e-12);
    }

    #[test]
    fn unrelated_copy_is_unusable() {
        let r = recover_pipe_positions(&sentence("Police arrested him."), "The |weather is nice.", 0.5);
        assert!(!r.usable);
        assert!(r.token_indices.is_empty());
        assert!(r.normalized_distance > 0.5);
    }

    #[test]
    fn trailing_pipe_is_dropped() {
        let r = recover_pipe_positions(&sentence("Police arrested him."), "Police arrested him.|", 0.5);
        assert!(r.token_indices.is_empty());
        assert_eq!(r.dropped_pipes, 1);
    }

    #[test]
    fn inserted_chars_walk_forward() {
        // copy inserts a stray quote right after the pipe
        let r = recover_pipe_positions(&sentence("Police arrested him."), "Police |\"arrested\" him.", 0.5);
        assert_eq!(r.token_indices, vec![1]);
        // pipe before whitespace snaps to the next token
        let r = recover_pipe_positions(&sentence("Police arrested him."), "Police| arrested him.", 0.5);
        assert_eq!(r.token_indices, vec![1]);
    }

    #[test]
    fn duplicate_pipes_dedupe() {
        let r = recover_pipe_positions(&sentence("He was arrested and convicted."), "He was ||arrested and |convicted.", 0.5);
        assert_eq!(r.token_indices, vec![2, 4]);
    }
}
