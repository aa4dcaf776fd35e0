//! Tiered recovery of structured replies from free-form model text.

use crate::corpus::{normalize_connection, ConnectionSet};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseTier {
    Strict,
    Fenced,
    Embedded,
    Regex,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    SelfLoop,
    OutOfRange,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawEntry {
    Pair(i64, i64),
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub raw: RawEntry,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub raw_text: String,
    pub parsed: ConnectionSet,
    pub parse_tier: ParseTier,
    pub rejected: Vec<Rejected>,
}

fn object_with(value: Value, key: &str) -> Option<Map<String, Value>> {
    match value {
        Value::Object(map) if map.contains_key(key) => Some(map),
        _ => None,
    }
}

fn parse_object(text: &str, key: &str) -> Option<Map<String, Value>> {
    serde_json::from_str::<Value>(text).ok().and_then(|v| object_with(v, key))
}

fn first_fenced_block(raw: &str) -> Option<&str> {
    let start = raw.find("```")?;
    let after = &raw[start + 3..];
    // skip the info string (e.g. "json") up to the end of the opening line
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

/// End index (inclusive) of the balanced object starting at `start`,
/// skipping braces inside JSON strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_embedded_object(raw: &str, key: &str) -> Option<Map<String, Value>> {
    let bytes = raw.as_bytes();
    for (start, _) in raw.match_indices('{') {
        let Some(end) = balanced_end(bytes, start) else { continue };
        let candidate = &raw[start..=end];
        if !candidate.contains(key) {
            continue;
        }
        if let Some(map) = parse_object(candidate, key) {
            return Some(map);
        }
    }
    None
}

/// Finds a JSON object carrying `key` via the strict, fenced and embedded
/// tiers, in that order. `accept` can veto a candidate (e.g. wrong value
/// type), which makes that tier fail.
pub fn extract_object(
    raw: &str,
    key: &str,
    accept: impl Fn(&Map<String, Value>) -> bool,
) -> Option<(ParseTier, Map<String, Value>)> {
    let ok = |m: Option<Map<String, Value>>| m.filter(|m| accept(m));
    if let Some(m) = ok(parse_object(raw.trim(), key)) {
        return Some((ParseTier::Strict, m));
    }
    if let Some(m) = ok(first_fenced_block(raw).and_then(|b| parse_object(b.trim(), key))) {
        return Some((ParseTier::Fenced, m));
    }
    if let Some(m) = ok(first_embedded_object(raw, key)) {
        return Some((ParseTier::Embedded, m));
    }
    None
}

pub(crate) fn part_index(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => {
            let s = s.trim();
            let digits = s.strip_prefix("part_").or_else(|| s.strip_prefix("part")).unwrap_or(s);
            digits.trim().parse().ok()
        }
        _ => None,
    }
}

fn entry_pair(entry: &Value) -> Option<(i64, i64)> {
    match entry {
        Value::Object(m) => Some((part_index(m.get("part1")?)?, part_index(m.get("part2")?)?)),
        Value::Array(a) if a.len() == 2 => Some((part_index(&a[0])?, part_index(&a[1])?)),
        _ => None,
    }
}

fn pair_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?i)"?part1"?\s*[:=]\s*"?(?:part_?)?(-?\d+)"?\s*[,;]?\s*"?part2"?\s*[:=]\s*"?(?:part_?)?(-?\d+)"#,
        )
        .expect("pair regex")
    })
}

/// Pairs found by scanning for `part1 ... part2` integer fields anywhere.
fn regex_pairs(raw: &str) -> Vec<Result<(i64, i64), String>> {
    pair_regex()
        .captures_iter(raw)
        .map(|c| match (c[1].parse::<i64>(), c[2].parse::<i64>()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(c[0].to_string()),
        })
        .collect()
}

fn filter_pairs(
    pairs: impl IntoIterator<Item = Result<(i64, i64), String>>,
    part_count: u32,
) -> (ConnectionSet, Vec<Rejected>) {
    let mut set = ConnectionSet::new();
    let mut rejected = Vec::new();
    for pair in pairs {
        let (a, b) = match pair {
            Ok(p) => p,
            Err(raw) => {
                rejected.push(Rejected { raw: RawEntry::Other(raw), reason: RejectReason::Malformed });
                continue;
            }
        };
        let in_range = |x: i64| x >= 0 && x < i64::from(part_count);
        let reason = if a == b {
            Some(RejectReason::SelfLoop)
        } else if !in_range(a) || !in_range(b) {
            Some(RejectReason::OutOfRange)
        } else {
            None
        };
        match reason {
            Some(reason) => rejected.push(Rejected { raw: RawEntry::Pair(a, b), reason }),
            None => {
                set.insert(normalize_connection(a as u32, b as u32).expect("distinct in-range pair"));
            }
        }
    }
    (set, rejected)
}

/// Extracts a connection set from model output.
///
/// Tiers run in order (strict JSON, first fenced block, first embedded object
/// with a `connections` key, regex scan) and the first success wins. Pairs are
/// normalized; self-loops and out-of-range indices are rejected with a reason.
pub fn parse_prediction(raw: &str, part_count: u32) -> PredictionOutcome {
    let is_list = |m: &Map<String, Value>| m.get("connections").is_some_and(Value::is_array);
    let (tier, pairs) = match extract_object(raw, "connections", is_list) {
        Some((tier, map)) => {
            let list = map["connections"].as_array().cloned().unwrap_or_default();
            let pairs: Vec<_> = list.iter().map(|e| entry_pair(e).ok_or_else(|| e.to_string())).collect();
            (tier, pairs)
        }
        None => {
            let pairs = regex_pairs(raw);
            if pairs.is_empty() {
                return PredictionOutcome {
                    raw_text: raw.to_string(),
                    parsed: ConnectionSet::new(),
                    parse_tier: ParseTier::Failed,
                    rejected: Vec::new(),
                };
            }
            (ParseTier::Regex, pairs)
        }
    };
    let (parsed, rejected) = filter_pairs(pairs, part_count);
    PredictionOutcome { raw_text: raw.to_string(), parsed, parse_tier: tier, rejected }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(o: &PredictionOutcome) -> Vec<(u32, u32)> {
        o.parsed.iter().map(|c| (c.a(), c.b())).collect()
    }

    #[test]
    fn strict_tier() {
        let o = parse_prediction(r#"{"connections":[{"part1":0,"part2":1}]}"#, 4);
        assert_eq!(o.parse_tier, ParseTier::Strict);
        assert_eq!(pairs(&o), vec![(0, 1)]);
        assert!(o.rejected.is_empty());
    }

    #[test]
    fn documented_output_format() {
        let raw = "{\n  \"connections\": [\n    {\"part1\": 0, \"part2\": 1},\n    {\"part1\": 1, \"part2\": 2}\n  ]\n}";
        let o = parse_prediction(raw, 3);
        assert_eq!(o.parse_tier, ParseTier::Strict);
        assert_eq!(pairs(&o), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn out_of_range_rejected() {
        let o = parse_prediction(r#"{"connections":[{"part1":0,"part2":9}]}"#, 4);
        assert!(o.parsed.is_empty());
        assert_eq!(o.rejected, vec![Rejected { raw: RawEntry::Pair(0, 9), reason: RejectReason::OutOfRange }]);
        let o = parse_prediction(r#"{"connections":[{"part1":-1,"part2":2},{"part1":3,"part2":3}]}"#, 4);
        let reasons: Vec<_> = o.rejected.iter().map(|r| r.reason).collect();
        assert_eq!(reasons, vec![RejectReason::OutOfRange, RejectReason::SelfLoop]);
    }

    #[test]
    fn duplicates_collapse() {
        let o = parse_prediction(r#"{"connections":[{"part1":1,"part2":0},{"part1":0,"part2":1}]}"#, 4);
        assert_eq!(pairs(&o), vec![(0, 1)]);
    }

    #[test]
    fn fenced_tier() {
        let raw = "Here you go:\n```json\n{\"connections\": [{\"part1\": 2, \"part2\": 0}]}\n```\nDone.";
        let o = parse_prediction(raw, 3);
        assert_eq!(o.parse_tier, ParseTier::Fenced);
        assert_eq!(pairs(&o), vec![(0, 2)]);
    }

    #[test]
    fn embedded_tier() {
        let raw = "I think {the legs} attach; final: {\"connections\": [[0, 1], {\"part1\": \"part_2\", \"part2\": 1}]} ok";
        let o = parse_prediction(raw, 3);
        assert_eq!(o.parse_tier, ParseTier::Embedded);
        assert_eq!(pairs(&o), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn embedded_ignores_braces_in_strings() {
        let raw = "x {\"note\": \"}{\", \"connections\": [{\"part1\": 0, \"part2\": 1}]}";
        assert_eq!(parse_prediction(raw, 2).parse_tier, ParseTier::Embedded);
    }

    #[test]
    fn regex_tier() {
        let raw = "connections: part1: 0, part2: 1; part1=2 part2=1 and {\"part1\": 5, \"part2\": 0";
        let o = parse_prediction(raw, 4);
        assert_eq!(o.parse_tier, ParseTier::Regex);
        assert_eq!(pairs(&o), vec![(0, 1), (1, 2)]);
        assert_eq!(o.rejected.len(), 1);
    }

    #[test]
    fn malformed_entries_are_rejected_not_fatal() {
        let o = parse_prediction(r#"{"connections":[{"part1":"leg","part2":1},{"part1":0,"part2":1}]}"#, 2);
        assert_eq!(o.parse_tier, ParseTier::Strict);
        assert_eq!(pairs(&o), vec![(0, 1)]);
        assert_eq!(o.rejected[0].reason, RejectReason::Malformed);
    }

    #[test]
    fn garbage_fails() {
        for raw in ["", "no json here", "{\"connections\": 3}", "```\n{oops}\n```", "{{{{"] {
            let o = parse_prediction(raw, 4);
            assert_eq!(o.parse_tier, ParseTier::Failed, "{raw:?}");
            assert!(o.parsed.is_empty());
        }
    }

    #[test]
    fn empty_list_is_a_strict_success() {
        let o = parse_prediction(r#"{"connections": []}"#, 4);
        assert_eq!(o.parse_tier, ParseTier::Strict);
        assert!(o.parsed.is_empty());
    }
}
