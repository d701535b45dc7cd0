//! City/country whitelist with coordinates, plus the canonical text
//! normalization used by every stage of the pipeline.
//!
//! The gazetteer is loaded once from a flat CSV (GRID-style city and country
//! names), normalized with the same [`normalize`] applied to tweet locations,
//! and indexed for whole-token matching. It is immutable after load and safe
//! to share across worker threads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Expected header of the gazetteer CSV, matched byte for byte.
pub const GAZETTEER_HEADER: &str = "city,country,country_code,state_code,lat,lon,population_rank";

#[derive(Debug, Error)]
pub enum GazetteerError {
    #[error("gazetteer file not found: {0}")]
    MissingFile(String),
    #[error("failed to read gazetteer: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad gazetteer header: expected `{expected}`, found `{found}`")]
    SchemaError { expected: String, found: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One whitelist row: a city with its country, or a bare country centroid
/// (empty `city_norm`). All text fields are stored normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GazetteerEntry {
    pub city_norm: String,
    pub country_norm: String,
    /// ISO 3166-1 alpha-3.
    pub country_code: String,
    /// Two-letter US state code, when the row is a US place.
    pub state_code: Option<String>,
    pub lat: f64,
    pub lon: f64,
    /// Larger means more populous; 0 means unknown. Used only as a
    /// deterministic tie-breaker during offline resolution.
    pub population_rank: u32,
}

/// Result of matching a normalized location string against the whitelist.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// Indices into [`Gazetteer::entries`] whose city name occurs as a whole
    /// token sequence in the input. Sorted and deduplicated.
    pub city_hits: Vec<usize>,
    /// Country codes whose country name occurs as a whole token sequence.
    /// Sorted and deduplicated.
    pub country_hits: Vec<String>,
    /// Standalone tokens equal to a known US state code (e.g. "tx").
    pub state_hits: Vec<String>,
    /// True when every token of the input is part of a country-name match or
    /// is a known state code. Lets the filter keep bare "usa" / "france" /
    /// "tx, usa" style strings that name no city.
    pub country_state_only: bool,
}

impl MatchResult {
    pub fn is_empty(&self) -> bool {
        self.city_hits.is_empty() && self.country_hits.is_empty()
    }
}

/// Immutable whitelist index. Built once by [`load_gazetteer`]; read-only
/// afterwards, so it can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    pub entries: Vec<GazetteerEntry>,
    /// Canonical token-joined city name -> indices into `entries`.
    city_index: HashMap<String, Vec<usize>>,
    /// Canonical token-joined country name -> ISO alpha-3 code.
    country_index: HashMap<String, String>,
    /// The injected country tokens ("usa", "uk").
    pub extra_countries: Vec<String>,
    /// Lowercased state codes present in any entry.
    state_codes: std::collections::HashSet<String>,
    /// Rows dropped at load time for out-of-range or unparseable fields.
    pub rejected_rows: usize,
    max_city_tokens: usize,
    max_country_tokens: usize,
}

/// Normalize free text to the pipeline's canonical form.
///
/// Uppercase ASCII is lowercased, every character outside `a-z`, space, `,`
/// and `;` is dropped (no transliteration: "München" becomes "mnchen"), runs
/// of spaces collapse to one, and the result is trimmed. Total and
/// idempotent.
pub fn normalize(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut last_space = true; // suppress leading spaces
    for ch in raw.chars() {
        let ch = ch.to_ascii_lowercase();
        match ch {
            'a'..='z' | ',' | ';' => {
                out.push(ch);
                last_space = false;
            }
            ' ' => {
                if !last_space {
                    out.push(' ');
                }
                last_space = true;
            }
            _ => {}
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// A token of a normalized string with its byte offset, so matching rules
/// that look at the preceding separator (the "uk" rule) can be applied.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Token<'a> {
    text: &'a str,
    start: usize,
}

fn tokenize(norm: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in norm.char_indices() {
        match ch {
            ' ' | ',' | ';' => {
                if let Some(s) = start.take() {
                    tokens.push(Token { text: &norm[s..i], start: s });
                }
            }
            _ => {
                if start.is_none() {
                    start = Some(i);
                }
            }
        }
    }
    if let Some(s) = start {
        tokens.push(Token { text: &norm[s..], start: s });
    }
    tokens
}

/// Canonical lookup key for a place name: tokens joined by single spaces.
/// Makes "washington, dc" and "washington dc" the same key.
fn token_key(norm: &str) -> String {
    tokenize(norm)
        .iter()
        .map(|t| t.text)
        .collect::<Vec<_>>()
        .join(" ")
}

impl Gazetteer {
    fn empty() -> Self {
        Gazetteer {
            entries: Vec::new(),
            city_index: HashMap::new(),
            country_index: HashMap::new(),
            extra_countries: Vec::new(),
            state_codes: std::collections::HashSet::new(),
            rejected_rows: 0,
            max_city_tokens: 0,
            max_country_tokens: 0,
        }
    }

    /// Build from already-normalized entries. Exposed for tests and for
    /// synthetic fixtures; file loading goes through [`load_gazetteer`].
    pub fn from_entries(entries: Vec<GazetteerEntry>) -> Self {
        let mut gaz = Gazetteer::empty();
        for entry in entries {
            gaz.push_entry(entry);
        }
        gaz.inject_extra_countries();
        gaz
    }

    fn push_entry(&mut self, entry: GazetteerEntry) {
        let idx = self.entries.len();
        if !entry.city_norm.is_empty() {
            let key = token_key(&entry.city_norm);
            let ntok = key.split(' ').count();
            self.max_city_tokens = self.max_city_tokens.max(ntok);
            self.city_index.entry(key).or_default().push(idx);
        }
        if !entry.country_norm.is_empty() {
            let key = token_key(&entry.country_norm);
            let ntok = key.split(' ').count();
            self.max_country_tokens = self.max_country_tokens.max(ntok);
            self.country_index
                .entry(key)
                .or_insert_with(|| entry.country_code.clone());
        }
        if let Some(state) = &entry.state_code {
            self.state_codes.insert(state.to_ascii_lowercase());
        }
        self.entries.push(entry);
    }

    fn inject_extra_countries(&mut self) {
        for (token, code) in [("usa", "USA"), ("uk", "GBR")] {
            self.country_index
                .entry(token.to_string())
                .or_insert_with(|| code.to_string());
            self.extra_countries.push(token.to_string());
        }
        self.max_country_tokens = self.max_country_tokens.max(1);
    }

    /// Country codes known to this gazetteer (entry codes plus injected).
    pub fn country_codes(&self) -> std::collections::HashSet<&str> {
        self.country_index.values().map(|s| s.as_str()).collect()
    }

    pub fn state_code_known(&self, token: &str) -> bool {
        self.state_codes.contains(token)
    }

    /// Country centroid entry: a row with an empty city for `country_code`,
    /// preferring one without a state code. With `state` given, a row with
    /// that state code is preferred when present.
    pub fn centroid(&self, country_code: &str, state: Option<&str>) -> Option<&GazetteerEntry> {
        let mut national = None;
        let mut state_row = None;
        for entry in &self.entries {
            if !entry.city_norm.is_empty() || entry.country_code != country_code {
                continue;
            }
            match (&entry.state_code, state) {
                (Some(sc), Some(want)) if sc.eq_ignore_ascii_case(want) => {
                    state_row.get_or_insert(entry);
                }
                (None, _) => {
                    national.get_or_insert(entry);
                }
                _ => {}
            }
        }
        state_row.or(national)
    }
}

impl fmt::Display for Gazetteer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entries, {} city names, {} country names ({} rows rejected)",
            self.entries.len(),
            self.city_index.len(),
            self.country_index.len(),
            self.rejected_rows
        )
    }
}

/// Load the whitelist from a CSV with header
/// `city,country,country_code,state_code,lat,lon,population_rank`.
///
/// City and country names are normalized on load, indices are built, and the
/// country tokens "usa" and "uk" are injected (mapped to USA / GBR). Rows
/// with out-of-range or unparseable coordinates are dropped and counted in
/// [`Gazetteer::rejected_rows`].
pub fn load_gazetteer(path: &Path) -> Result<Gazetteer, GazetteerError> {
    if !path.exists() {
        return Err(GazetteerError::MissingFile(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != GAZETTEER_HEADER {
        return Err(GazetteerError::SchemaError {
            expected: GAZETTEER_HEADER.to_string(),
            found: header,
        });
    }

    let mut gaz = Gazetteer::empty();
    for record in reader.records() {
        let record = record?;
        if record.len() != 7 {
            gaz.rejected_rows += 1;
            continue;
        }
        let lat: Result<f64, _> = record[4].trim().parse();
        let lon: Result<f64, _> = record[5].trim().parse();
        let rank: u32 = record[6].trim().parse().unwrap_or(0);
        let (lat, lon) = match (lat, lon) {
            (Ok(lat), Ok(lon)) if (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) => {
                (lat, lon)
            }
            _ => {
                gaz.rejected_rows += 1;
                continue;
            }
        };
        let state = record[3].trim();
        gaz.push_entry(GazetteerEntry {
            city_norm: normalize(&record[0]),
            country_norm: normalize(&record[1]),
            country_code: record[2].trim().to_ascii_uppercase(),
            state_code: if state.is_empty() {
                None
            } else {
                Some(state.to_ascii_uppercase())
            },
            lat,
            lon,
            population_rank: rank,
        });
    }
    gaz.inject_extra_countries();
    Ok(gaz)
}

/// Match a normalized location string against the whitelist.
///
/// A hit requires a gazetteer name to occur as a whole token sequence in
/// `loc_norm` (token boundaries are start/end of string, space, comma and
/// semicolon). The country token "uk" additionally requires a comma or a
/// space immediately before it, so "ukulele shop" and a bare leading "uk"
/// never match.
pub fn match_tokens(loc_norm: &str, gaz: &Gazetteer) -> MatchResult {
    let tokens = tokenize(loc_norm);
    let mut city_hits: Vec<usize> = Vec::new();
    let mut country_hits: Vec<String> = Vec::new();
    let mut state_hits: Vec<String> = Vec::new();
    // Per-token flag: covered by a country match or a state-code token.
    let mut covered = vec![false; tokens.len()];

    for i in 0..tokens.len() {
        let max_city = gaz.max_city_tokens.min(tokens.len() - i);
        let max_country = gaz.max_country_tokens.min(tokens.len() - i);
        let mut key = String::new();
        for n in 1..=max_city.max(max_country) {
            if n > 1 {
                key.push(' ');
            }
            key.push_str(tokens[i + n - 1].text);
            if n <= max_city {
                if let Some(indices) = gaz.city_index.get(&key) {
                    city_hits.extend_from_slice(indices);
                }
            }
            if n <= max_country {
                if let Some(code) = gaz.country_index.get(&key) {
                    let allowed = if key == "uk" {
                        // Preceding byte must be a comma or whitespace.
                        let start = tokens[i].start;
                        start > 0
                            && matches!(loc_norm.as_bytes()[start - 1], b',' | b' ')
                    } else {
                        true
                    };
                    if allowed {
                        country_hits.push(code.clone());
                        for flag in covered.iter_mut().skip(i).take(n) {
                            *flag = true;
                        }
                    }
                }
            }
        }
        if tokens[i].text.len() == 2 && gaz.state_code_known(tokens[i].text) {
            state_hits.push(tokens[i].text.to_ascii_uppercase());
            covered[i] = true;
        }
    }

    city_hits.sort_unstable();
    city_hits.dedup();
    country_hits.sort();
    country_hits.dedup();
    state_hits.sort();
    state_hits.dedup();
    let country_state_only =
        !country_hits.is_empty() && !tokens.is_empty() && covered.iter().all(|&c| c);

    MatchResult {
        city_hits,
        country_hits,
        state_hits,
        country_state_only,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn entry(
        city: &str,
        country: &str,
        code: &str,
        state: Option<&str>,
        lat: f64,
        lon: f64,
        rank: u32,
    ) -> GazetteerEntry {
        GazetteerEntry {
            city_norm: normalize(city),
            country_norm: normalize(country),
            country_code: code.to_string(),
            state_code: state.map(|s| s.to_string()),
            lat,
            lon,
            population_rank: rank,
        }
    }

    pub(crate) fn fixture() -> Gazetteer {
        Gazetteer::from_entries(vec![
            entry("London", "United Kingdom", "GBR", None, 51.5074, -0.1278, 9),
            entry("Paris", "France", "FRA", None, 48.8566, 2.3522, 8),
            entry("Berlin", "Germany", "DEU", None, 52.52, 13.405, 7),
            entry("New York", "United States", "USA", Some("NY"), 40.7128, -74.006, 10),
            entry("Springfield", "United States", "USA", Some("IL"), 39.7817, -89.6501, 3),
            entry("Springfield", "Australia", "AUS", None, -27.6728, 152.9172, 2),
            entry("", "France", "FRA", None, 46.2276, 2.2137, 0),
            entry("", "United States", "USA", None, 39.8283, -98.5795, 0),
            entry("", "United Kingdom", "GBR", None, 54.0, -2.0, 0),
        ])
    }

    #[test]
    fn normalize_lowercases_and_keeps_clean_chars() {
        assert_eq!(normalize("London, UK"), "london, uk");
    }

    #[test]
    fn normalize_strips_non_ascii_letters() {
        // Deleted, not transliterated.
        assert_eq!(normalize("München; Deutschland"), "mnchen; deutschland");
    }

    #[test]
    fn normalize_empty() {
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn normalize_collapses_and_trims_whitespace() {
        assert_eq!(normalize("  new   york , usa  "), "new york , usa");
        assert_eq!(normalize("a\t\nb"), "ab"); // tabs/newlines are not whitelisted
    }

    #[test]
    fn normalize_is_idempotent_on_samples() {
        for s in ["London, UK", "München; Deutschland", "  A  &  B  ", "ñ ü ß"] {
            let once = normalize(s);
            assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn match_city_and_country() {
        let gaz = fixture();
        let m = match_tokens("london, uk", &gaz);
        assert_eq!(m.city_hits.len(), 1);
        assert_eq!(gaz.entries[m.city_hits[0]].city_norm, "london");
        assert_eq!(m.country_hits, vec!["GBR".to_string()]);
    }

    #[test]
    fn uk_requires_separator_before() {
        let gaz = fixture();
        let m = match_tokens("ukulele shop", &gaz);
        assert!(m.country_hits.is_empty());
        // Bare "uk" at string start has no preceding comma/space either.
        let m = match_tokens("uk", &gaz);
        assert!(m.country_hits.is_empty());
        // With a comma directly before it, it matches.
        let m = match_tokens("london,uk", &gaz);
        assert_eq!(m.country_hits, vec!["GBR".to_string()]);
    }

    #[test]
    fn city_without_country() {
        let gaz = fixture();
        let m = match_tokens("paris", &gaz);
        assert_eq!(m.city_hits.len(), 1);
        assert!(m.country_hits.is_empty());
    }

    #[test]
    fn multi_token_city_matches_as_sequence() {
        let gaz = fixture();
        let m = match_tokens("new york, usa", &gaz);
        assert_eq!(m.city_hits.len(), 1);
        assert_eq!(gaz.entries[m.city_hits[0]].city_norm, "new york");
        assert_eq!(m.country_hits, vec!["USA".to_string()]);
        // "york" alone is not a whitelisted city.
        assert!(match_tokens("york, usa", &gaz).city_hits.is_empty());
    }

    #[test]
    fn token_boundaries_prevent_substring_hits() {
        let gaz = fixture();
        assert!(match_tokens("parisian cafe", &gaz).city_hits.is_empty());
        assert!(match_tokens("new yorker", &gaz).city_hits.is_empty());
    }

    #[test]
    fn exact_city_string_always_hits() {
        let gaz = fixture();
        for e in &gaz.entries {
            if !e.city_norm.is_empty() {
                assert!(
                    !match_tokens(&e.city_norm, &gaz).city_hits.is_empty(),
                    "city {:?} not found in itself",
                    e.city_norm
                );
            }
        }
    }

    #[test]
    fn country_state_only_detection() {
        let gaz = fixture();
        assert!(match_tokens("usa", &gaz).country_state_only);
        assert!(match_tokens("france", &gaz).country_state_only);
        let m = match_tokens("ny, usa", &gaz);
        assert!(m.country_state_only);
        assert_eq!(m.state_hits, vec!["NY".to_string()]);
        assert!(!match_tokens("somewhere, france", &gaz).country_state_only);
        assert!(!match_tokens("springfield, usa", &gaz).country_state_only);
    }

    #[test]
    fn injected_tokens_present_even_for_empty_gazetteer() {
        let gaz = Gazetteer::from_entries(Vec::new());
        assert_eq!(gaz.extra_countries, vec!["usa".to_string(), "uk".to_string()]);
        let m = match_tokens("boston, usa", &gaz);
        assert_eq!(m.country_hits, vec!["USA".to_string()]);
    }

    #[test]
    fn load_gazetteer_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(
            &path,
            "city,country,country_code,state_code,lat,lon,population_rank\n\
             Berlin,Germany,DEU,,52.52,13.405,1\n\
             Bad Row,Nowhere,XXX,,95,10,1\n\
             Austin,United States,usa,tx,30.2672,-97.7431,7\n",
        )
        .unwrap();
        let gaz = load_gazetteer(&path).unwrap();
        assert_eq!(gaz.entries.len(), 2);
        assert_eq!(gaz.rejected_rows, 1); // lat=95 out of range
        assert!(!match_tokens("berlin", &gaz).city_hits.is_empty());
        // Codes are uppercased on load.
        assert_eq!(gaz.entries[1].country_code, "USA");
        assert_eq!(gaz.entries[1].state_code.as_deref(), Some("TX"));
    }

    #[test]
    fn load_gazetteer_header_must_match_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(&path, "city,country,code,state,lat,lon,rank\n").unwrap();
        assert!(matches!(
            load_gazetteer(&path),
            Err(GazetteerError::SchemaError { .. })
        ));
        assert!(matches!(
            load_gazetteer(&dir.path().join("missing.csv")),
            Err(GazetteerError::MissingFile(_))
        ));
    }

    #[test]
    fn load_gazetteer_header_only_still_injects_countries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(&path, "city,country,country_code,state_code,lat,lon,population_rank\n").unwrap();
        let gaz = load_gazetteer(&path).unwrap();
        assert!(gaz.entries.is_empty());
        assert_eq!(match_tokens("boston, usa", &gaz).country_hits, vec!["USA".to_string()]);
        let m = match_tokens("london, uk", &gaz);
        assert_eq!(m.country_hits, vec!["GBR".to_string()]);
    }

    #[test]
    fn centroid_lookup() {
        let gaz = fixture();
        let c = gaz.centroid("FRA", None).unwrap();
        assert_eq!(c.lat, 46.2276);
        assert!(gaz.centroid("ZZZ", None).is_none());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// normalize(normalize(s)) == normalize(s) for arbitrary input.
            #[test]
            fn normalize_idempotent(s in "\\PC*") {
                let once = normalize(&s);
                prop_assert_eq!(normalize(&once), once);
            }

            /// The output alphabet is always a-z, space, comma, semicolon.
            #[test]
            fn normalize_alphabet(s in "\\PC*") {
                let out = normalize(&s);
                prop_assert!(out.chars().all(|c| matches!(c, 'a'..='z' | ' ' | ',' | ';')));
                prop_assert!(!out.starts_with(' ') && !out.ends_with(' '));
                prop_assert!(!out.contains("  "));
            }

            /// A normalized string equal to a fixture city name always hits.
            #[test]
            fn own_city_name_always_matches(idx in 0usize..6) {
                let gaz = fixture();
                let city = gaz.entries[idx].city_norm.clone();
                prop_assume!(!city.is_empty());
                let m = match_tokens(&city, &gaz);
                prop_assert!(m.city_hits.iter().any(|&i| gaz.entries[i].city_norm == city));
            }
        }
    }

    #[test]
    fn match_independent_of_row_order() {
        let gaz = fixture();
        let mut rev: Vec<GazetteerEntry> = gaz.entries.clone();
        rev.reverse();
        let gaz_rev = Gazetteer::from_entries(rev);
        for loc in ["london, uk", "springfield", "new york, usa", "paris, france"] {
            let a = match_tokens(loc, &gaz);
            let b = match_tokens(loc, &gaz_rev);
            let cities_a: std::collections::BTreeSet<_> = a
                .city_hits
                .iter()
                .map(|&i| gaz.entries[i].clone().city_norm + &gaz.entries[i].country_code)
                .collect();
            let cities_b: std::collections::BTreeSet<_> = b
                .city_hits
                .iter()
                .map(|&i| gaz_rev.entries[i].clone().city_norm + &gaz_rev.entries[i].country_code)
                .collect();
            assert_eq!(cities_a, cities_b, "loc {loc:?}");
            assert_eq!(a.country_hits, b.country_hits);
        }
    }
}
