//! Resolve kept location strings to coordinates and region codes.
//!
//! The default resolver is fully offline: it picks a gazetteer entry from
//! the matches recorded by the filter, with a deterministic disambiguation
//! order (country-matching city, unique city, highest population rank,
//! lexicographic). An optional external HTTP geocoder can be layered on
//! top, consulted through a persistent cache and rate-limited; any endpoint
//! failure falls back to the offline result.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::filter::FilterDecision;
use crate::gazetteer::{Gazetteer, GazetteerEntry};
use crate::linkage::TweetRecord;

#[derive(Debug, Error)]
pub enum GeocodeError {
    #[error("decision is not a kept location")]
    NotKept,
    #[error("no centroid row in gazetteer for country {0}")]
    NoCentroid(String),
    #[error("geocode endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("malformed geocode response: {0}")]
    MalformedResponse(String),
    #[error("cache io: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// Where a resolution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Source {
    Offline,
    External,
    Cache,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Offline => "offline",
            Source::External => "external",
            Source::Cache => "cache",
        }
    }
}

/// A location string resolved to coordinates and region codes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedLocation {
    pub loc_norm: String,
    pub lat: f64,
    pub lon: f64,
    /// ISO 3166-1 alpha-3.
    pub country_code: String,
    /// Present only for USA resolutions.
    pub state_code: Option<String>,
    pub source: Source,
}

impl ResolvedLocation {
    fn from_entry(loc_norm: &str, entry: &GazetteerEntry, source: Source) -> Self {
        ResolvedLocation {
            loc_norm: loc_norm.to_string(),
            lat: entry.lat,
            lon: entry.lon,
            country_code: entry.country_code.clone(),
            state_code: entry
                .state_code
                .clone()
                .filter(|_| entry.country_code == "USA"),
            source,
        }
    }
}

/// Resolve one kept location offline.
///
/// City hits are narrowed to entries whose country matches a country hit
/// when any do; a single remaining candidate wins, otherwise the highest
/// population rank does, ties broken by lexicographic (country_code,
/// city_norm). Strings with only country hits resolve to the country
/// centroid row (an entry with an empty city), preferring a matching state
/// centroid for "tx, usa"-style strings.
pub fn resolve_offline(
    decision: &FilterDecision,
    gaz: &Gazetteer,
) -> Result<ResolvedLocation, GeocodeError> {
    let matched = decision.matched.as_ref().ok_or(GeocodeError::NotKept)?;

    if !matched.city_hits.is_empty() {
        let candidates: Vec<&GazetteerEntry> =
            matched.city_hits.iter().map(|&i| &gaz.entries[i]).collect();
        let country_matching: Vec<&GazetteerEntry> = candidates
            .iter()
            .copied()
            .filter(|e| matched.country_hits.contains(&e.country_code))
            .collect();
        let pool = if country_matching.is_empty() {
            candidates
        } else {
            country_matching
        };
        let chosen = if pool.len() == 1 {
            pool[0]
        } else {
            pool.into_iter()
                .min_by(|a, b| {
                    b.population_rank
                        .cmp(&a.population_rank)
                        .then_with(|| a.country_code.cmp(&b.country_code))
                        .then_with(|| a.city_norm.cmp(&b.city_norm))
                })
                .expect("nonempty pool")
        };
        return Ok(ResolvedLocation::from_entry(
            &decision.loc_norm,
            chosen,
            Source::Offline,
        ));
    }

    let country = matched
        .country_hits
        .first()
        .ok_or(GeocodeError::NotKept)?
        .clone();
    let state = if country == "USA" {
        matched.state_hits.first().map(|s| s.as_str())
    } else {
        None
    };
    let centroid = gaz
        .centroid(&country, state)
        .ok_or_else(|| GeocodeError::NoCentroid(country.clone()))?;
    Ok(ResolvedLocation::from_entry(
        &decision.loc_norm,
        centroid,
        Source::Offline,
    ))
}

/// One cache record: either a resolved location or a remembered miss.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheSlot {
    Hit {
        lat: f64,
        lon: f64,
        country_code: String,
        state_code: Option<String>,
    },
    Miss,
}

/// Persistent geocode cache, one tab-separated record per line:
/// `loc_norm TAB lat TAB lon TAB country TAB state` for hits (state may be
/// empty), `loc_norm TAB MISS` for misses. Lines are appended as results
/// arrive; on load the last record for a key wins.
pub struct GeocodeCache {
    map: HashMap<String, CacheSlot>,
    file: File,
    pub path: PathBuf,
}

impl GeocodeCache {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                let fields: Vec<&str> = line.split('\t').collect();
                match fields.as_slice() {
                    [loc, "MISS"] => {
                        map.insert(loc.to_string(), CacheSlot::Miss);
                    }
                    [loc, lat, lon, country, state] => {
                        if let (Ok(lat), Ok(lon)) = (lat.parse(), lon.parse()) {
                            map.insert(
                                loc.to_string(),
                                CacheSlot::Hit {
                                    lat,
                                    lon,
                                    country_code: country.to_string(),
                                    state_code: if state.is_empty() {
                                        None
                                    } else {
                                        Some(state.to_string())
                                    },
                                },
                            );
                        }
                    }
                    _ => {} // corrupt line, skip
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(GeocodeCache {
            map,
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn get(&self, loc_norm: &str) -> Option<&CacheSlot> {
        self.map.get(loc_norm)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert_hit(&mut self, loc_norm: &str, resolved: &ResolvedLocation) -> std::io::Result<()> {
        writeln!(
            self.file,
            "{}\t{}\t{}\t{}\t{}",
            loc_norm,
            resolved.lat,
            resolved.lon,
            resolved.country_code,
            resolved.state_code.as_deref().unwrap_or("")
        )?;
        self.file.flush()?;
        self.map.insert(
            loc_norm.to_string(),
            CacheSlot::Hit {
                lat: resolved.lat,
                lon: resolved.lon,
                country_code: resolved.country_code.clone(),
                state_code: resolved.state_code.clone(),
            },
        );
        Ok(())
    }

    pub fn insert_miss(&mut self, loc_norm: &str) -> std::io::Result<()> {
        writeln!(self.file, "{loc_norm}\tMISS")?;
        self.file.flush()?;
        self.map.insert(loc_norm.to_string(), CacheSlot::Miss);
        Ok(())
    }
}

/// External geocoder endpoint. Queried as
/// `GET <url>?q=<loc_norm>[&key=<key>]`, expecting a JSON object with
/// `lat`, `lon`, `country_code` and optional `state_code` fields. A 404
/// means the endpoint does not know the string (cached as a miss).
#[derive(Debug, Clone)]
pub struct ExternalEndpoint {
    pub url: String,
    pub key: Option<String>,
    pub requests_per_second: f64,
}

impl ExternalEndpoint {
    /// Read `GEOSENSOR_GEOCODE_URL` / `GEOSENSOR_GEOCODE_KEY` from the
    /// environment. Returns None when no URL is configured.
    pub fn from_env(requests_per_second: f64) -> Option<Self> {
        let url = std::env::var("GEOSENSOR_GEOCODE_URL").ok()?;
        Some(ExternalEndpoint {
            url,
            key: std::env::var("GEOSENSOR_GEOCODE_KEY").ok(),
            requests_per_second,
        })
    }
}

/// How resolution should run.
pub enum GeocodeMode {
    Offline,
    External(ExternalEndpoint),
}

/// Spaces external requests at least `1/requests_per_second` apart.
pub struct RateLimiter {
    min_interval: Duration,
    last: Option<Instant>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let rps = if requests_per_second > 0.0 {
            requests_per_second
        } else {
            1.0
        };
        RateLimiter {
            min_interval: Duration::from_secs_f64(1.0 / rps),
            last: None,
        }
    }

    pub fn wait(&mut self) {
        if let Some(last) = self.last {
            let elapsed = last.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        self.last = Some(Instant::now());
    }
}

const EXTERNAL_RETRIES: usize = 2;

fn parse_external_json(body: &str, loc_norm: &str, gaz: &Gazetteer) -> Result<ResolvedLocation, GeocodeError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| GeocodeError::MalformedResponse(e.to_string()))?;
    let lat = value["lat"]
        .as_f64()
        .ok_or_else(|| GeocodeError::MalformedResponse("missing lat".into()))?;
    let lon = value["lon"]
        .as_f64()
        .ok_or_else(|| GeocodeError::MalformedResponse("missing lon".into()))?;
    let country_code = value["country_code"]
        .as_str()
        .ok_or_else(|| GeocodeError::MalformedResponse("missing country_code".into()))?
        .to_ascii_uppercase();
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(GeocodeError::MalformedResponse(format!(
            "coordinates out of range: {lat}, {lon}"
        )));
    }
    if !gaz.country_codes().contains(country_code.as_str()) {
        return Err(GeocodeError::MalformedResponse(format!(
            "unknown country code {country_code}"
        )));
    }
    let state_code = value["state_code"]
        .as_str()
        .filter(|s| !s.is_empty() && country_code == "USA")
        .map(|s| s.to_ascii_uppercase());
    Ok(ResolvedLocation {
        loc_norm: loc_norm.to_string(),
        lat,
        lon,
        country_code,
        state_code,
        source: Source::External,
    })
}

enum ExternalLookup {
    Found(ResolvedLocation),
    NotFound,
    Failed(GeocodeError),
}

fn query_external(
    agent: &ureq::Agent,
    endpoint: &ExternalEndpoint,
    loc_norm: &str,
    gaz: &Gazetteer,
) -> ExternalLookup {
    let mut last_err = String::new();
    for _ in 0..=EXTERNAL_RETRIES {
        let mut req = agent.get(&endpoint.url).query("q", loc_norm);
        if let Some(key) = &endpoint.key {
            req = req.query("key", key);
        }
        match req.call() {
            Ok(mut response) => {
                let body = match response.body_mut().read_to_string() {
                    Ok(b) => b,
                    Err(e) => return ExternalLookup::Failed(GeocodeError::MalformedResponse(e.to_string())),
                };
                return match parse_external_json(&body, loc_norm, gaz) {
                    Ok(resolved) => ExternalLookup::Found(resolved),
                    Err(e) => ExternalLookup::Failed(e),
                };
            }
            Err(ureq::Error::StatusCode(404)) => return ExternalLookup::NotFound,
            Err(e) => last_err = e.to_string(),
        }
    }
    ExternalLookup::Failed(GeocodeError::EndpointUnreachable(last_err))
}

/// Endpoint failure tallies for one batch; failures fall back offline.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExternalStats {
    pub malformed: usize,
    pub unreachable: usize,
}

/// Resolve through the cache and the external endpoint, falling back to the
/// offline resolver when the endpoint errors or has previously missed.
/// Resolving the same string twice issues at most one HTTP request.
pub fn resolve_external(
    decision: &FilterDecision,
    gaz: &Gazetteer,
    cache: &mut GeocodeCache,
    endpoint: &ExternalEndpoint,
    agent: &ureq::Agent,
    limiter: &mut RateLimiter,
    stats: &mut ExternalStats,
) -> Result<ResolvedLocation, GeocodeError> {
    let loc_norm = decision.loc_norm.clone();
    match cache.get(&loc_norm) {
        Some(CacheSlot::Hit {
            lat,
            lon,
            country_code,
            state_code,
        }) => {
            return Ok(ResolvedLocation {
                loc_norm,
                lat: *lat,
                lon: *lon,
                country_code: country_code.clone(),
                state_code: state_code.clone(),
                source: Source::Cache,
            })
        }
        Some(CacheSlot::Miss) => return resolve_offline(decision, gaz),
        None => {}
    }
    limiter.wait();
    match query_external(agent, endpoint, &loc_norm, gaz) {
        ExternalLookup::Found(resolved) => {
            cache.insert_hit(&loc_norm, &resolved)?;
            Ok(resolved)
        }
        ExternalLookup::NotFound => {
            cache.insert_miss(&loc_norm)?;
            resolve_offline(decision, gaz)
        }
        ExternalLookup::Failed(err) => {
            match err {
                GeocodeError::MalformedResponse(_) => stats.malformed += 1,
                GeocodeError::EndpointUnreachable(_) => stats.unreachable += 1,
                _ => {}
            }
            resolve_offline(decision, gaz)
        }
    }
}

/// Batch resolution outcome. `resolved.len() + skipped` equals the number
/// of kept records passed in.
#[derive(Debug)]
pub struct BatchOutcome {
    pub resolved: Vec<(TweetRecord, ResolvedLocation)>,
    pub skipped: usize,
    pub external_stats: ExternalStats,
}

fn collect_batch(
    results: Vec<(TweetRecord, Result<ResolvedLocation, GeocodeError>)>,
) -> BatchOutcome {
    let mut resolved = Vec::new();
    let mut skipped = 0;
    for (record, result) in results {
        match result {
            Ok(loc) => resolved.push((record, loc)),
            Err(_) => skipped += 1,
        }
    }
    BatchOutcome {
        resolved,
        skipped,
        external_stats: ExternalStats::default(),
    }
}

/// Sequential reference implementation of the offline batch path.
pub fn resolve_batch_offline_seq(
    kept: &[(TweetRecord, FilterDecision)],
    gaz: &Gazetteer,
) -> BatchOutcome {
    collect_batch(
        kept.iter()
            .map(|(r, d)| (r.clone(), resolve_offline(d, gaz)))
            .collect(),
    )
}

/// Offline batch resolution, per-record parallel when the `parallel`
/// feature is enabled. Per-record results are independent of batch order
/// and merged by input index.
#[cfg(feature = "parallel")]
pub fn resolve_batch_offline(
    kept: &[(TweetRecord, FilterDecision)],
    gaz: &Gazetteer,
) -> BatchOutcome {
    use rayon::prelude::*;
    collect_batch(
        kept.par_iter()
            .map(|(r, d)| (r.clone(), resolve_offline(d, gaz)))
            .collect(),
    )
}

#[cfg(not(feature = "parallel"))]
pub fn resolve_batch_offline(
    kept: &[(TweetRecord, FilterDecision)],
    gaz: &Gazetteer,
) -> BatchOutcome {
    resolve_batch_offline_seq(kept, gaz)
}

/// Resolve a batch of kept records in the requested mode. External mode is
/// serialized through the rate limiter and the cache; offline mode runs in
/// parallel.
pub fn resolve_batch(
    kept: &[(TweetRecord, FilterDecision)],
    mode: &GeocodeMode,
    gaz: &Gazetteer,
    cache: Option<&mut GeocodeCache>,
) -> BatchOutcome {
    match mode {
        GeocodeMode::Offline => resolve_batch_offline(kept, gaz),
        GeocodeMode::External(endpoint) => {
            let mut owned;
            let cache = match cache {
                Some(c) => c,
                None => {
                    // No cache path configured: keep one in a temp location
                    // for the duration of the batch.
                    let path = std::env::temp_dir().join(format!(
                        "geosensor-cache-{}.tsv",
                        std::process::id()
                    ));
                    owned = match GeocodeCache::open(&path) {
                        Ok(c) => c,
                        Err(_) => return resolve_batch_offline(kept, gaz),
                    };
                    &mut owned
                }
            };
            let agent = ureq::Agent::new_with_config(
                ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs(10)))
                    .build(),
            );
            let mut limiter = RateLimiter::new(endpoint.requests_per_second);
            let mut stats = ExternalStats::default();
            let mut out = collect_batch(
                kept.iter()
                    .map(|(r, d)| {
                        (
                            r.clone(),
                            resolve_external(d, gaz, cache, endpoint, &agent, &mut limiter, &mut stats),
                        )
                    })
                    .collect(),
            );
            out.external_stats = stats;
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{filter_location, ExclusionRules};
    use crate::gazetteer::tests::fixture;

    fn kept(loc: &str, gaz: &Gazetteer) -> FilterDecision {
        let d = filter_location(loc, &ExclusionRules::default(), gaz);
        assert!(d.is_kept(), "expected {loc:?} to be kept");
        d
    }

    #[test]
    fn city_with_country_match() {
        let gaz = fixture();
        let r = resolve_offline(&kept("london, uk", &gaz), &gaz).unwrap();
        assert_eq!(r.country_code, "GBR");
        assert_eq!(r.lat, 51.5074);
        assert_eq!(r.source, Source::Offline);
        assert!(r.state_code.is_none());
    }

    #[test]
    fn ambiguous_city_disambiguated_by_country_hit() {
        let gaz = fixture();
        let r = resolve_offline(&kept("springfield, usa", &gaz), &gaz).unwrap();
        assert_eq!(r.country_code, "USA");
        assert_eq!(r.state_code, Some("IL".to_string()));
    }

    #[test]
    fn ambiguous_city_without_country_falls_back_to_rank() {
        let gaz = fixture();
        // "springfield, france": no Springfield in FRA, so the full pool is
        // ranked; USA Springfield has the higher population_rank.
        let r = resolve_offline(&kept("springfield, france", &gaz), &gaz).unwrap();
        assert_eq!(r.country_code, "USA");
    }

    #[test]
    fn country_only_resolves_to_centroid() {
        let gaz = fixture();
        let r = resolve_offline(&kept("france", &gaz), &gaz).unwrap();
        assert_eq!(r.country_code, "FRA");
        assert_eq!(r.lat, 46.2276);
    }

    #[test]
    fn missing_centroid_is_skippable_error() {
        use crate::gazetteer::{normalize, GazetteerEntry};
        // Germany has a city row but no centroid row in this gazetteer.
        let gaz = Gazetteer::from_entries(vec![GazetteerEntry {
            city_norm: normalize("Berlin"),
            country_norm: normalize("Germany"),
            country_code: "DEU".into(),
            state_code: None,
            lat: 52.52,
            lon: 13.405,
            population_rank: 1,
        }]);
        let d = kept("germany", &gaz);
        match resolve_offline(&d, &gaz) {
            Err(GeocodeError::NoCentroid(c)) => assert_eq!(c, "DEU"),
            other => panic!("expected NoCentroid, got {other:?}"),
        }
    }

    #[test]
    fn resolution_independent_of_row_order() {
        let gaz = fixture();
        let mut rev = gaz.entries.clone();
        rev.reverse();
        let gaz_rev = Gazetteer::from_entries(rev);
        for loc in ["springfield, usa", "springfield, france", "london, uk", "france"] {
            let a = resolve_offline(&kept(loc, &gaz), &gaz).unwrap();
            let b = resolve_offline(&kept(loc, &gaz_rev), &gaz_rev).unwrap();
            assert_eq!((a.lat, a.lon, a.country_code), (b.lat, b.lon, b.country_code), "loc {loc:?}");
        }
    }

    #[test]
    fn batch_counts_and_order() {
        let gaz = fixture();
        let records: Vec<(TweetRecord, FilterDecision)> = ["london, uk", "paris, france", "france"]
            .iter()
            .enumerate()
            .map(|(i, loc)| {
                (
                    TweetRecord {
                        tweet_id: i.to_string(),
                        paper_id: "1".into(),
                        raw_location: Some(loc.to_string()),
                        has_precise_geo: false,
                    },
                    kept(loc, &gaz),
                )
            })
            .collect();
        let out = resolve_batch_offline(&records, &gaz);
        assert_eq!(out.resolved.len(), 3);
        assert_eq!(out.skipped, 0);
        assert_eq!(out.resolved[0].0.tweet_id, "0");
        assert_eq!(out.resolved[2].1.country_code, "FRA");

        let seq = resolve_batch_offline_seq(&records, &gaz);
        assert_eq!(seq.resolved, out.resolved);
    }

    #[test]
    fn empty_batch() {
        let gaz = fixture();
        let out = resolve_batch_offline(&[], &gaz);
        assert_eq!(out.resolved.len() + out.skipped, 0);
    }

    #[test]
    fn cache_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.tsv");
        {
            let mut cache = GeocodeCache::open(&path).unwrap();
            cache
                .insert_hit(
                    "paris, france",
                    &ResolvedLocation {
                        loc_norm: "paris, france".into(),
                        lat: 48.8566,
                        lon: 2.3522,
                        country_code: "FRA".into(),
                        state_code: None,
                        source: Source::External,
                    },
                )
                .unwrap();
            cache.insert_miss("nowhere").unwrap();
        }
        let cache = GeocodeCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        match cache.get("paris, france").unwrap() {
            CacheSlot::Hit { lat, lon, country_code, state_code } => {
                assert_eq!(*lat, 48.8566);
                assert_eq!(*lon, 2.3522);
                assert_eq!(country_code, "FRA");
                assert!(state_code.is_none());
            }
            CacheSlot::Miss => panic!("expected hit"),
        }
        assert_eq!(cache.get("nowhere"), Some(&CacheSlot::Miss));
    }

    #[test]
    fn resolved_country_always_in_gazetteer() {
        let gaz = fixture();
        let codes = gaz.country_codes();
        for loc in ["london, uk", "springfield, usa", "france", "new york, usa"] {
            let r = resolve_offline(&kept(loc, &gaz), &gaz).unwrap();
            assert!(codes.contains(r.country_code.as_str()));
        }
    }
}
