//! Keep/exclude decisions for free-text user locations: spurious-string
//! exclusion, the minimum-length rule, and the whitelist requirement.

use serde::Serialize;

use crate::gazetteer::{match_tokens, normalize, Gazetteer, MatchResult};
use crate::linkage::TweetRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Kept,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Reason {
    Spurious,
    TooShort,
    NoWhitelistHit,
    Kept,
}

/// Outcome for one location string. `matched` is present exactly when the
/// verdict is `Kept`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub verdict: Verdict,
    pub reason: Reason,
    pub loc_norm: String,
    pub matched: Option<MatchResult>,
}

impl FilterDecision {
    pub fn is_kept(&self) -> bool {
        self.verdict == Verdict::Kept
    }

    fn excluded(reason: Reason, loc_norm: String) -> Self {
        FilterDecision {
            verdict: Verdict::Excluded,
            reason,
            loc_norm,
            matched: None,
        }
    }
}

/// Exclusion patterns plus the strict minimum-length bound.
///
/// Patterns containing characters that [`normalize`] would delete (like "&")
/// are checked against the raw string; the URL markers "www" and "http" are
/// checked against the raw string as well. Everything else is checked as a
/// verbatim substring of the normalized string, so the conjunction patterns
/// " and ", " und ", " y " require their surrounding spaces exactly as
/// written.
#[derive(Debug, Clone)]
pub struct ExclusionRules {
    pub substrings: Vec<String>,
    /// Normalized strings of this length or shorter are excluded.
    pub min_chars_exclusive: usize,
}

const DEFAULT_PATTERNS: [&str; 11] = [
    "www",
    "http",
    "not from",
    "worldwide",
    "everywhere",
    "mostly nucleus",
    "bcnvcia",
    "&",
    " and ",
    " und ",
    " y ",
];

/// Markers always checked on the raw string, before normalization.
const RAW_MARKERS: [&str; 2] = ["www", "http"];

impl Default for ExclusionRules {
    fn default() -> Self {
        ExclusionRules {
            substrings: DEFAULT_PATTERNS.iter().map(|s| s.to_string()).collect(),
            min_chars_exclusive: 3,
        }
    }
}

fn in_normalize_alphabet(pattern: &str) -> bool {
    pattern
        .chars()
        .all(|c| matches!(c, 'a'..='z' | ' ' | ',' | ';'))
}

impl ExclusionRules {
    /// Read one pattern per line; empty lines are skipped. Patterns are
    /// lowercased, matching is otherwise verbatim (leading/trailing spaces
    /// in a line are significant).
    pub fn from_file(path: &std::path::Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let substrings = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.to_lowercase())
            .collect();
        Ok(ExclusionRules {
            substrings,
            min_chars_exclusive: 3,
        })
    }

    fn raw_patterns(&self) -> impl Iterator<Item = &str> {
        self.substrings
            .iter()
            .map(|s| s.as_str())
            .filter(|p| RAW_MARKERS.contains(p) || !in_normalize_alphabet(p))
    }

    fn normalized_patterns(&self) -> impl Iterator<Item = &str> {
        self.substrings
            .iter()
            .map(|s| s.as_str())
            .filter(|p| in_normalize_alphabet(p))
    }
}

/// Decide whether one raw location string is kept.
///
/// Order: raw-string exclusion check, normalize, normalized exclusion check,
/// length check (strictly more than `min_chars_exclusive` normalized
/// characters required), then the whitelist check. A string is kept only if
/// it has a country hit and either a city hit or consists solely of
/// country/state tokens (bare "usa", "france", "tx, usa").
pub fn filter_location(raw: &str, rules: &ExclusionRules, gaz: &Gazetteer) -> FilterDecision {
    let raw_lc = raw.to_lowercase();
    for pattern in rules.raw_patterns() {
        if raw_lc.contains(pattern) {
            return FilterDecision::excluded(Reason::Spurious, normalize(raw));
        }
    }
    let loc_norm = normalize(raw);
    for pattern in rules.normalized_patterns() {
        if loc_norm.contains(pattern) {
            return FilterDecision::excluded(Reason::Spurious, loc_norm);
        }
    }
    if loc_norm.chars().count() <= rules.min_chars_exclusive {
        return FilterDecision::excluded(Reason::TooShort, loc_norm);
    }
    let matched = match_tokens(&loc_norm, gaz);
    if !matched.country_hits.is_empty()
        && (!matched.city_hits.is_empty() || matched.country_state_only)
    {
        FilterDecision {
            verdict: Verdict::Kept,
            reason: Reason::Kept,
            loc_norm,
            matched: Some(matched),
        }
    } else {
        FilterDecision::excluded(Reason::NoWhitelistHit, loc_norm)
    }
}

/// Per-reason counts for one corpus pass. Sums to the corpus size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FilterTally {
    pub kept: usize,
    pub spurious: usize,
    pub too_short: usize,
    pub no_whitelist_hit: usize,
}

impl FilterTally {
    pub fn total(&self) -> usize {
        self.kept + self.spurious + self.too_short + self.no_whitelist_hit
    }

    fn add(&mut self, reason: Reason) {
        match reason {
            Reason::Kept => self.kept += 1,
            Reason::Spurious => self.spurious += 1,
            Reason::TooShort => self.too_short += 1,
            Reason::NoWhitelistHit => self.no_whitelist_hit += 1,
        }
    }
}

/// Corpus partition into kept and excluded records, input order preserved
/// within each part.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<(TweetRecord, FilterDecision)>,
    pub excluded: Vec<(TweetRecord, FilterDecision)>,
    pub tally: FilterTally,
}

fn partition(records: Vec<(TweetRecord, FilterDecision)>) -> FilterOutcome {
    let mut outcome = FilterOutcome {
        kept: Vec::new(),
        excluded: Vec::new(),
        tally: FilterTally::default(),
    };
    for (record, decision) in records {
        outcome.tally.add(decision.reason);
        if decision.is_kept() {
            outcome.kept.push((record, decision));
        } else {
            outcome.excluded.push((record, decision));
        }
    }
    outcome
}

fn decide(record: &TweetRecord, rules: &ExclusionRules, gaz: &Gazetteer) -> FilterDecision {
    filter_location(record.raw_location.as_deref().unwrap_or(""), rules, gaz)
}

/// Sequential reference implementation of [`filter_corpus`]. Always
/// available; the benches compare it against the parallel path.
pub fn filter_corpus_seq(
    records: &[TweetRecord],
    rules: &ExclusionRules,
    gaz: &Gazetteer,
) -> FilterOutcome {
    partition(
        records
            .iter()
            .map(|r| (r.clone(), decide(r, rules, gaz)))
            .collect(),
    )
}

/// Filter a whole corpus, preserving input order within the kept and
/// excluded parts. Runs per-record in parallel when the `parallel` feature
/// is enabled; the merge is by input index, so the result is identical to
/// [`filter_corpus_seq`].
#[cfg(feature = "parallel")]
pub fn filter_corpus(
    records: &[TweetRecord],
    rules: &ExclusionRules,
    gaz: &Gazetteer,
) -> FilterOutcome {
    use rayon::prelude::*;
    partition(
        records
            .par_iter()
            .map(|r| (r.clone(), decide(r, rules, gaz)))
            .collect(),
    )
}

#[cfg(not(feature = "parallel"))]
pub fn filter_corpus(
    records: &[TweetRecord],
    rules: &ExclusionRules,
    gaz: &Gazetteer,
) -> FilterOutcome {
    filter_corpus_seq(records, rules, gaz)
}
