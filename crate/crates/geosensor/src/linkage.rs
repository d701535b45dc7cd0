//! Join tweets to the paper set, compute coverage statistics, and tally
//! tweets, burden and papers per region into the regression panel.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::burden::BurdenValue;
use crate::geocode::ResolvedLocation;

pub const TWEETS_HEADER: &str = "tweet_id,paper_id,raw_location,has_precise_geo";
pub const PAPER_COUNTS_HEADER: &str = "region_code,papers";

#[derive(Debug, Error)]
pub enum LinkageError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("bad header: expected `{expected}`, found `{found}`")]
    SchemaError { expected: String, found: String },
    #[error("empty {field} in row {row}")]
    EmptyField { field: &'static str, row: usize },
    #[error("unparseable row {row}: {detail}")]
    BadRow { row: usize, detail: String },
    #[error("tweet {tweet_id} references unknown paper id {paper_id}")]
    UnknownPaperId { tweet_id: String, paper_id: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One tweet mentioning a paper. Precise coordinates are never ingested;
/// only the flag that they existed is retained, for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TweetRecord {
    pub tweet_id: String,
    pub paper_id: String,
    pub raw_location: Option<String>,
    pub has_precise_geo: bool,
}

/// Whether panel regions are countries or US states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionKind {
    Country,
    UsState,
}

impl RegionKind {
    pub fn label(&self) -> &'static str {
        match self {
            RegionKind::Country => "countries",
            RegionKind::UsState => "US states",
        }
    }
}

impl std::str::FromStr for RegionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "country" => Ok(RegionKind::Country),
            "us-state" => Ok(RegionKind::UsState),
            other => Err(format!("unknown region kind `{other}` (use country|us-state)")),
        }
    }
}

/// Corpus-level coverage and resolution statistics. Percentages are
/// 100 * ratio rounded to one decimal place.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStats {
    pub papers_total: usize,
    pub papers_tweeted: usize,
    pub coverage_pct: f64,
    pub tweets_total: usize,
    pub tweets_with_location: usize,
    pub tweets_resolved: usize,
    pub resolved_pct_of_all: f64,
}

fn pct_one_decimal(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        return 0.0;
    }
    (1000.0 * numerator as f64 / denominator as f64).round() / 10.0
}

/// Count how many papers were tweeted at least once and how many tweets
/// resolved. Percentages carry one decimal; the resolved share is computed
/// against all tweets, not just the located ones.
pub fn compute_coverage(
    paper_ids: &HashSet<String>,
    tweets: &[TweetRecord],
    resolved_count: usize,
) -> Result<CoverageStats, LinkageError> {
    let mut tweeted: HashSet<&str> = HashSet::new();
    let mut with_location = 0;
    for tweet in tweets {
        if !paper_ids.contains(&tweet.paper_id) {
            return Err(LinkageError::UnknownPaperId {
                tweet_id: tweet.tweet_id.clone(),
                paper_id: tweet.paper_id.clone(),
            });
        }
        tweeted.insert(tweet.paper_id.as_str());
        if tweet.raw_location.as_deref().is_some_and(|l| !l.is_empty()) {
            with_location += 1;
        }
    }
    Ok(CoverageStats {
        papers_total: paper_ids.len(),
        papers_tweeted: tweeted.len(),
        coverage_pct: pct_one_decimal(tweeted.len(), paper_ids.len()),
        tweets_total: tweets.len(),
        tweets_with_location: with_location,
        tweets_resolved: resolved_count,
        resolved_pct_of_all: pct_one_decimal(resolved_count, tweets.len()),
    })
}

/// One regression row: tweet count (response), burden and paper count
/// (covariates).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionPanel {
    pub region_code: String,
    pub tweets: u64,
    pub burden: f64,
    pub papers: u64,
}

/// Papers per region, full counting: a paper counts once for every region
/// with at least one author affiliation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PaperCounts {
    pub counts: BTreeMap<String, u64>,
}

impl PaperCounts {
    pub fn get(&self, region: &str) -> Option<u64> {
        self.counts.get(region).copied()
    }
}

/// Panel construction result; exclusion counts make the tweet conservation
/// check possible: panel tweets + excluded_tweets + unattributed_tweets
/// equals the resolved input size.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelBuild {
    pub rows: Vec<RegionPanel>,
    /// Regions with tweets but missing burden or paper counts.
    pub excluded_regions: usize,
    /// Tweets in those excluded regions.
    pub excluded_tweets: usize,
    /// Tweets that map to no region at all (non-USA or missing state in
    /// us-state mode).
    pub unattributed_tweets: usize,
}

/// The panel region a resolved location belongs to: the country code, or
/// the state code in us-state mode (non-USA and stateless resolutions map
/// to nothing there).
pub fn region_of(loc: &ResolvedLocation, region_kind: RegionKind) -> Option<String> {
    match region_kind {
        RegionKind::Country => Some(loc.country_code.clone()),
        RegionKind::UsState => {
            if loc.country_code == "USA" {
                loc.state_code.clone()
            } else {
                None
            }
        }
    }
}

/// Tally resolved tweets per region and join with burden and paper counts.
///
/// A region enters the panel iff it has at least one tweet AND a burden
/// value AND a paper count. Rows come out sorted by region code. In
/// us-state mode the region is the state code and non-USA resolutions are
/// dropped.
pub fn build_panel(
    resolved: &[(TweetRecord, ResolvedLocation)],
    burden: &[BurdenValue],
    papers: &PaperCounts,
    region_kind: RegionKind,
) -> PanelBuild {
    let mut tally: BTreeMap<String, u64> = BTreeMap::new();
    let mut unattributed = 0usize;
    for (_, loc) in resolved {
        match region_of(loc, region_kind) {
            Some(code) => *tally.entry(code).or_insert(0) += 1,
            None => unattributed += 1,
        }
    }

    let burden_by_region: BTreeMap<&str, f64> = burden
        .iter()
        .map(|b| (b.region_code.as_str(), b.value))
        .collect();

    let mut rows = Vec::new();
    let mut excluded_regions = 0;
    let mut excluded_tweets = 0;
    for (region, tweets) in tally {
        match (burden_by_region.get(region.as_str()), papers.get(&region)) {
            (Some(&burden), Some(papers)) => rows.push(RegionPanel {
                region_code: region,
                tweets,
                burden,
                papers,
            }),
            _ => {
                excluded_regions += 1;
                excluded_tweets += tweets as usize;
            }
        }
    }

    PanelBuild {
        rows,
        excluded_regions,
        excluded_tweets,
        unattributed_tweets: unattributed,
    }
}

/// Tweets file load result; duplicate tweet ids are kept as distinct rows
/// and only counted here for the run report.
#[derive(Debug)]
pub struct TweetsFile {
    pub records: Vec<TweetRecord>,
    pub duplicate_tweet_ids: usize,
}

/// Load tweets from `tweet_id,paper_id,raw_location,has_precise_geo`.
pub fn load_tweets(path: &Path) -> Result<TweetsFile, LinkageError> {
    if !path.exists() {
        return Err(LinkageError::MissingFile(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != TWEETS_HEADER {
        return Err(LinkageError::SchemaError {
            expected: TWEETS_HEADER.to_string(),
            found: header,
        });
    }
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut duplicates = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2; // header is line 1
        let tweet_id = record.get(0).unwrap_or("").trim().to_string();
        if tweet_id.is_empty() {
            return Err(LinkageError::EmptyField {
                field: "tweet_id",
                row,
            });
        }
        let paper_id = record.get(1).unwrap_or("").trim().to_string();
        if paper_id.is_empty() {
            return Err(LinkageError::EmptyField {
                field: "paper_id",
                row,
            });
        }
        let raw_location = match record.get(2).unwrap_or("") {
            "" => None,
            s => Some(s.to_string()),
        };
        let has_precise_geo = match record.get(3).unwrap_or("").trim().to_ascii_lowercase().as_str() {
            "true" | "1" => true,
            "false" | "0" | "" => false,
            other => {
                return Err(LinkageError::BadRow {
                    row,
                    detail: format!("has_precise_geo: `{other}`"),
                })
            }
        };
        if !seen.insert(tweet_id.clone()) {
            duplicates += 1;
        }
        records.push(TweetRecord {
            tweet_id,
            paper_id,
            raw_location,
            has_precise_geo,
        });
    }
    Ok(TweetsFile {
        records,
        duplicate_tweet_ids: duplicates,
    })
}

/// Load per-region paper counts from `region_code,papers`.
pub fn load_paper_counts(path: &Path) -> Result<PaperCounts, LinkageError> {
    if !path.exists() {
        return Err(LinkageError::MissingFile(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != PAPER_COUNTS_HEADER {
        return Err(LinkageError::SchemaError {
            expected: PAPER_COUNTS_HEADER.to_string(),
            found: header,
        });
    }
    let mut counts = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let region = record.get(0).unwrap_or("").trim().to_string();
        if region.is_empty() {
            return Err(LinkageError::EmptyField {
                field: "region_code",
                row,
            });
        }
        let papers: u64 = record
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| LinkageError::BadRow {
                row,
                detail: format!("papers: {e}"),
            })?;
        counts.insert(region, papers);
    }
    Ok(PaperCounts { counts })
}

/// Load a paper-id list, one id per line, blank lines skipped.
pub fn load_paper_ids(path: &Path) -> Result<HashSet<String>, LinkageError> {
    if !path.exists() {
        return Err(LinkageError::MissingFile(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::burden::AggregationRule;
    use crate::geocode::Source;

    fn tweet(id: &str, paper: &str, loc: Option<&str>) -> TweetRecord {
        TweetRecord {
            tweet_id: id.to_string(),
            paper_id: paper.to_string(),
            raw_location: loc.map(|s| s.to_string()),
            has_precise_geo: false,
        }
    }

    fn resolved(country: &str, state: Option<&str>) -> ResolvedLocation {
        ResolvedLocation {
            loc_norm: "x".into(),
            lat: 0.0,
            lon: 0.0,
            country_code: country.to_string(),
            state_code: state.map(|s| s.to_string()),
            source: Source::Offline,
        }
    }

    fn burden_value(region: &str, value: f64) -> BurdenValue {
        BurdenValue {
            region_code: region.to_string(),
            value,
            years_used: vec![2011],
            rule: AggregationRule::MeanOverWindow,
        }
    }

    #[test]
    fn coverage_matches_published_ratios() {
        // 8,442 of 17,295 tweeted -> 48.8%
        let papers: HashSet<String> = (0..17_295).map(|i| i.to_string()).collect();
        let tweets: Vec<TweetRecord> = (0..8_442).map(|i| tweet(&format!("t{i}"), &i.to_string(), None)).collect();
        let stats = compute_coverage(&papers, &tweets, 0).unwrap();
        assert_eq!(stats.papers_tweeted, 8_442);
        assert_eq!(stats.coverage_pct, 48.8);
    }

    #[test]
    fn coverage_zero_tweets() {
        let papers: HashSet<String> = ["1".to_string()].into();
        let stats = compute_coverage(&papers, &[], 0).unwrap();
        assert_eq!(stats.coverage_pct, 0.0);
        assert_eq!(stats.resolved_pct_of_all, 0.0);
    }

    #[test]
    fn coverage_rejects_unknown_paper_id() {
        let papers: HashSet<String> = ["1".to_string()].into();
        let err = compute_coverage(&papers, &[tweet("t", "999", None)], 0).unwrap_err();
        assert!(matches!(err, LinkageError::UnknownPaperId { .. }));
    }

    #[test]
    fn coverage_pct_bounded_and_monotone_in_tweets() {
        let papers: HashSet<String> = (0..10).map(|i| i.to_string()).collect();
        let tweets: Vec<TweetRecord> = (0..10).map(|i| tweet(&format!("t{i}"), &i.to_string(), None)).collect();
        let mut last = 0.0;
        for k in 0..=tweets.len() {
            let stats = compute_coverage(&papers, &tweets[..k], 0).unwrap();
            assert!((0.0..=100.0).contains(&stats.coverage_pct));
            assert!(stats.coverage_pct >= last, "coverage decreased at k={k}");
            last = stats.coverage_pct;
        }
        assert_eq!(last, 100.0);
    }

    #[test]
    fn coverage_counts_each_paper_once() {
        let papers: HashSet<String> = ["1".into(), "2".into()].into();
        let tweets = vec![tweet("a", "1", None), tweet("b", "1", None), tweet("c", "1", None)];
        let stats = compute_coverage(&papers, &tweets, 0).unwrap();
        assert_eq!(stats.papers_tweeted, 1);
        assert_eq!(stats.coverage_pct, 50.0);
    }

    #[test]
    fn panel_inclusion_requires_all_three_variables() {
        let rs = vec![
            (tweet("1", "p", None), resolved("FRA", None)),
            (tweet("2", "p", None), resolved("FRA", None)),
            (tweet("3", "p", None), resolved("DEU", None)),
            (tweet("4", "p", None), resolved("ITA", None)),
        ];
        let burden = vec![burden_value("FRA", 10.0), burden_value("ITA", 5.0)];
        let papers = PaperCounts {
            counts: [("FRA".to_string(), 3), ("DEU".to_string(), 4)].into(),
        };
        let build = build_panel(&rs, &burden, &papers, RegionKind::Country);
        // DEU lacks burden, ITA lacks papers; only FRA qualifies.
        assert_eq!(build.rows.len(), 1);
        assert_eq!(build.rows[0].region_code, "FRA");
        assert_eq!(build.rows[0].tweets, 2);
        assert_eq!(build.excluded_regions, 2);
        assert_eq!(build.excluded_tweets, 2);
        // Conservation.
        let panel_tweets: u64 = build.rows.iter().map(|r| r.tweets).sum();
        assert_eq!(
            panel_tweets as usize + build.excluded_tweets + build.unattributed_tweets,
            rs.len()
        );
    }

    #[test]
    fn panel_us_state_mode_drops_non_us() {
        let rs = vec![
            (tweet("1", "p", None), resolved("USA", Some("NY"))),
            (tweet("2", "p", None), resolved("USA", Some("NY"))),
            (tweet("3", "p", None), resolved("FRA", None)),
            (tweet("4", "p", None), resolved("USA", None)),
        ];
        let burden = vec![burden_value("NY", 100.0)];
        let papers = PaperCounts {
            counts: [("NY".to_string(), 9)].into(),
        };
        let build = build_panel(&rs, &burden, &papers, RegionKind::UsState);
        assert_eq!(build.rows.len(), 1);
        assert_eq!(build.rows[0].tweets, 2);
        assert_eq!(build.unattributed_tweets, 2);
    }

    #[test]
    fn panel_empty_input() {
        let build = build_panel(&[], &[], &PaperCounts::default(), RegionKind::Country);
        assert!(build.rows.is_empty());
    }

    #[test]
    fn panel_sorted_and_order_invariant() {
        let mut rs = vec![
            (tweet("1", "p", None), resolved("DEU", None)),
            (tweet("2", "p", None), resolved("FRA", None)),
            (tweet("3", "p", None), resolved("DEU", None)),
        ];
        let burden = vec![burden_value("DEU", 1.0), burden_value("FRA", 2.0)];
        let papers = PaperCounts {
            counts: [("DEU".to_string(), 1), ("FRA".to_string(), 2)].into(),
        };
        let a = build_panel(&rs, &burden, &papers, RegionKind::Country);
        rs.reverse();
        let b = build_panel(&rs, &burden, &papers, RegionKind::Country);
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows[0].region_code, "DEU");
        assert_eq!(a.rows[1].region_code, "FRA");
    }

    #[test]
    fn load_tweets_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(
            &path,
            "tweet_id,paper_id,raw_location,has_precise_geo\n1,100,\"London, UK\",false\n2,100,,true\n3,101,Paris,0\n",
        )
        .unwrap();
        let file = load_tweets(&path).unwrap();
        assert_eq!(file.records.len(), 3);
        assert_eq!(file.records[0].raw_location.as_deref(), Some("London, UK"));
        assert!(file.records[1].raw_location.is_none());
        assert!(file.records[1].has_precise_geo);
        assert_eq!(file.duplicate_tweet_ids, 0);
    }

    #[test]
    fn load_tweets_missing_paper_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "tweet_id,paper_id,raw_location,has_precise_geo\n1,,x,false\n").unwrap();
        assert!(matches!(
            load_tweets(&path),
            Err(LinkageError::EmptyField { field: "paper_id", .. })
        ));
    }

    #[test]
    fn load_tweets_counts_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(
            &path,
            "tweet_id,paper_id,raw_location,has_precise_geo\n1,100,x,false\n1,100,y,false\n",
        )
        .unwrap();
        let file = load_tweets(&path).unwrap();
        assert_eq!(file.records.len(), 2);
        assert_eq!(file.duplicate_tweet_ids, 1);
    }

    #[test]
    fn load_paper_counts_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "region_code,papers\nFRA,12\nDEU,7\n").unwrap();
        let counts = load_paper_counts(&path).unwrap();
        assert_eq!(counts.get("FRA"), Some(12));
        assert_eq!(counts.get("XXX"), None);
    }
}
