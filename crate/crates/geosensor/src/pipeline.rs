//! Full-run orchestration: config parsing, stage sequencing, output files
//! and the machine-readable run report.
//!
//! Each stage writes its artifact into the output directory, and each stage
//! subcommand consumes the previous stage's file, so `run` and a chain of
//! `filter`, `geocode`, `panel`, `fit`, `render` produce byte-identical
//! outputs. All file writes are write-temp-then-rename, so rerunning over
//! an existing output directory never leaves torn files.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::burden::{
    aggregate_hiv_world, aggregate_us_hiv, aggregate_window, load_burden, BurdenValue, Measure,
};
use crate::filter::{filter_corpus, ExclusionRules, FilterTally};
use crate::gazetteer::{load_gazetteer, Gazetteer};
use crate::geocode::{resolve_batch, ExternalEndpoint, GeocodeCache, GeocodeMode, ResolvedLocation, Source};
use crate::glm::{fit_poisson, summarize, summary_csv, GlmFit};
use crate::linkage::{
    build_panel, compute_coverage, load_paper_counts, load_paper_ids, load_tweets, region_of,
    CoverageStats, RegionKind, RegionPanel, TweetRecord,
};
use crate::mapgen::{
    classify, dot_weight, render_geojson, render_svg, DotScale, DotSpec, MapSpec, Projection,
};

pub const FILTERED_CSV: &str = "filtered.csv";
pub const RESOLVED_CSV: &str = "resolved.csv";
pub const PANEL_CSV: &str = "panel.csv";
pub const FIT_TXT: &str = "fit.txt";
pub const FIT_CSV: &str = "fit.csv";
pub const MAP_SVG: &str = "map.svg";
pub const MAP_GEOJSON: &str = "map.geojson";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Configuration or input problems detected before any stage runs.
    #[error("validation: {0}")]
    Validation(String),
    /// A stage failed mid-run; earlier stages' outputs are preserved.
    #[error("stage {stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: err.to_string(),
        }
    }

    /// Process exit code: 2 for validation problems, 1 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Stage { .. } => 1,
        }
    }
}

/// Which year-aggregation rule turns burden series into one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BurdenRule {
    /// Mean of 2010 and 2018, single-year fallback.
    HivWorld,
    /// Mean over the available subset of 2011-2017.
    Window,
    /// Mean of 2016 and 2017, single-year fallback.
    UsHiv,
}

impl std::str::FromStr for BurdenRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hiv-world" => Ok(BurdenRule::HivWorld),
            "window" => Ok(BurdenRule::Window),
            "us-hiv" => Ok(BurdenRule::UsHiv),
            other => Err(format!(
                "unknown burden rule `{other}` (use hiv-world|window|us-hiv)"
            )),
        }
    }
}

/// Geocode mode as named in config files and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GeocodeModeName {
    Offline,
    External,
}

impl std::str::FromStr for GeocodeModeName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "offline" => Ok(GeocodeModeName::Offline),
            "external" => Ok(GeocodeModeName::External),
            other => Err(format!("unknown geocode mode `{other}` (use offline|external)")),
        }
    }
}

/// One run's inputs and options, parsed from a `key = value` config file
/// with CLI-flag overrides applied on top.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub disease: String,
    pub tweets: PathBuf,
    pub paper_ids: PathBuf,
    pub paper_counts: PathBuf,
    pub burden: PathBuf,
    pub burden_rule: BurdenRule,
    pub burden_label: String,
    pub measure: Measure,
    pub gazetteer: PathBuf,
    pub boundaries: PathBuf,
    pub exclusions: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub region_kind: RegionKind,
    pub geocode_mode: GeocodeModeName,
    pub geocode_rps: f64,
    pub classes: usize,
    pub canvas: (u32, u32),
    pub dot_scale: DotScale,
    pub out_dir: PathBuf,
    /// Only meaningful to fixture generators; the pipeline itself is
    /// RNG-free.
    pub seed: Option<u64>,
}

/// Optional flag overrides; any set field wins over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub region_kind: Option<RegionKind>,
    pub geocode_mode: Option<GeocodeModeName>,
    pub geocode_rps: Option<f64>,
    pub classes: Option<usize>,
    pub canvas: Option<(u32, u32)>,
    pub dot_base: Option<f64>,
    pub dot_min: Option<f64>,
    pub dot_max: Option<f64>,
}

fn parse_canvas(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("canvas must be WxH, got `{s}`"))?;
    let w = w.parse().map_err(|e| format!("canvas width: {e}"))?;
    let h = h.parse().map_err(|e| format!("canvas height: {e}"))?;
    Ok((w, h))
}

impl RunConfig {
    /// Parse a config file. Relative paths are resolved against the config
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Validation(format!(
                    "config line {} is not `key = value`: `{line}`",
                    lineno + 1
                ))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }

        let get = |key: &str| -> Result<String, PipelineError> {
            map.get(key)
                .cloned()
                .ok_or_else(|| PipelineError::Validation(format!("config key `{key}` is required")))
        };
        let path_of = |value: String| -> PathBuf {
            let p = PathBuf::from(value);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let bad = |key: &str, e: String| PipelineError::Validation(format!("config `{key}`: {e}"));

        let disease = get("disease")?;
        let burden_rule: BurdenRule = get("burden_rule")?.parse().map_err(|e| bad("burden_rule", e))?;
        let config = RunConfig {
            burden_label: map
                .get("burden_label")
                .cloned()
                .unwrap_or_else(|| format!("Number of {disease} cases")),
            disease,
            tweets: path_of(get("tweets")?),
            paper_ids: path_of(get("paper_ids")?),
            paper_counts: path_of(get("paper_counts")?),
            burden: path_of(get("burden")?),
            burden_rule,
            measure: match map.get("measure").map(String::as_str) {
                Some("incidence") => Measure::IncidencePer1000AtRisk,
                _ => Measure::CaseCount,
            },
            gazetteer: path_of(get("gazetteer")?),
            boundaries: path_of(get("boundaries")?),
            exclusions: map.get("exclusions").cloned().map(path_of),
            cache: map.get("cache").cloned().map(path_of),
            region_kind: match map.get("regions") {
                Some(v) => v.parse().map_err(|e| bad("regions", e))?,
                None => RegionKind::Country,
            },
            geocode_mode: match map.get("geocode") {
                Some(v) => v.parse().map_err(|e| bad("geocode", e))?,
                None => GeocodeModeName::Offline,
            },
            geocode_rps: match map.get("geocode_rps") {
                Some(v) => v.parse().map_err(|e: std::num::ParseFloatError| bad("geocode_rps", e.to_string()))?,
                None => 1.0,
            },
            classes: match map.get("classes") {
                Some(v) => v.parse().map_err(|e: std::num::ParseIntError| bad("classes", e.to_string()))?,
                None => 5,
            },
            canvas: match map.get("canvas") {
                Some(v) => parse_canvas(v).map_err(|e| bad("canvas", e))?,
                None => (1000, 500),
            },
            dot_scale: DotScale {
                r_base: match map.get("dot_base") {
                    Some(v) => v.parse().map_err(|e: std::num::ParseFloatError| bad("dot_base", e.to_string()))?,
                    None => DotScale::default().r_base,
                },
                r_min: match map.get("dot_min") {
                    Some(v) => v.parse().map_err(|e: std::num::ParseFloatError| bad("dot_min", e.to_string()))?,
                    None => DotScale::default().r_min,
                },
                r_max: match map.get("dot_max") {
                    Some(v) => v.parse().map_err(|e: std::num::ParseFloatError| bad("dot_max", e.to_string()))?,
                    None => DotScale::default().r_max,
                },
            },
            out_dir: path_of(get("out")?),
            seed: match map.get("seed") {
                Some(v) => Some(v.parse().map_err(|e: std::num::ParseIntError| bad("seed", e.to_string()))?),
                None => None,
            },
        };
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(v) = &overrides.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = overrides.region_kind {
            self.region_kind = v;
        }
        if let Some(v) = overrides.geocode_mode {
            self.geocode_mode = v;
        }
        if let Some(v) = overrides.geocode_rps {
            self.geocode_rps = v;
        }
        if let Some(v) = overrides.classes {
            self.classes = v;
        }
        if let Some(v) = overrides.canvas {
            self.canvas = v;
        }
        if let Some(v) = overrides.dot_base {
            self.dot_scale.r_base = v;
        }
        if let Some(v) = overrides.dot_min {
            self.dot_scale.r_min = v;
        }
        if let Some(v) = overrides.dot_max {
            self.dot_scale.r_max = v;
        }
    }

    /// Check inputs before any stage runs: every referenced path must exist
    /// and the output directory must be creatable.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut required: Vec<(&str, &PathBuf)> = vec![
            ("tweets", &self.tweets),
            ("paper_ids", &self.paper_ids),
            ("paper_counts", &self.paper_counts),
            ("burden", &self.burden),
            ("gazetteer", &self.gazetteer),
            ("boundaries", &self.boundaries),
        ];
        if let Some(p) = &self.exclusions {
            required.push(("exclusions", p));
        }
        for (name, p) in required {
            if !p.exists() {
                return Err(PipelineError::Validation(format!(
                    "{name} path does not exist: {}",
                    p.display()
                )));
            }
        }
        std::fs::create_dir_all(&self.out_dir).map_err(|e| {
            PipelineError::Validation(format!(
                "cannot create output directory {}: {e}",
                self.out_dir.display()
            ))
        })?;
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn exclusion_rules(&self) -> Result<ExclusionRules, PipelineError> {
        match &self.exclusions {
            Some(path) => ExclusionRules::from_file(path)
                .map_err(|e| PipelineError::stage("filter", format!("exclusions: {e}"))),
            None => Ok(ExclusionRules::default()),
        }
    }

    fn load_gazetteer(&self, stage: &'static str) -> Result<Gazetteer, PipelineError> {
        load_gazetteer(&self.gazetteer).map_err(|e| PipelineError::stage(stage, e))
    }
}

/// Atomically replace `path` with `contents` (write temp file, rename).
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: filter
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct FilterStageOut {
    pub kept: Vec<(TweetRecord, String)>,
    pub tally: FilterTally,
    pub tweets_total: usize,
    pub tweets_with_location: usize,
    pub tweets_with_precise_geo: usize,
    pub duplicate_tweet_ids: usize,
}

/// Filter the tweet corpus and write `filtered.csv`
/// (`tweet_id,paper_id,loc_norm`).
pub fn stage_filter(config: &RunConfig) -> Result<FilterStageOut, PipelineError> {
    let stage = "filter";
    let gaz = config.load_gazetteer(stage)?;
    let rules = config.exclusion_rules()?;
    let tweets = load_tweets(&config.tweets).map_err(|e| PipelineError::stage(stage, e))?;
    let outcome = filter_corpus(&tweets.records, &rules, &gaz);

    let mut csv = String::from("tweet_id,paper_id,loc_norm\n");
    let kept: Vec<(TweetRecord, String)> = outcome
        .kept
        .into_iter()
        .map(|(record, decision)| {
            csv.push_str(&format!(
                "{},{},\"{}\"\n",
                record.tweet_id, record.paper_id, decision.loc_norm
            ));
            (record, decision.loc_norm)
        })
        .collect();
    write_atomic(&config.out(FILTERED_CSV), csv.as_bytes())
        .map_err(|e| PipelineError::stage(stage, e))?;

    let with_location = tweets
        .records
        .iter()
        .filter(|r| r.raw_location.as_deref().is_some_and(|l| !l.is_empty()))
        .count();
    let with_precise = tweets.records.iter().filter(|r| r.has_precise_geo).count();
    Ok(FilterStageOut {
        kept,
        tally: outcome.tally,
        tweets_total: tweets.records.len(),
        tweets_with_location: with_location,
        tweets_with_precise_geo: with_precise,
        duplicate_tweet_ids: tweets.duplicate_tweet_ids,
    })
}

fn read_filtered_csv(path: &Path) -> Result<Vec<(TweetRecord, String)>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| e.to_string())?;
    let header = reader
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != "tweet_id,paper_id,loc_norm" {
        return Err(format!("unexpected header in {}: {header}", path.display()));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        out.push((
            TweetRecord {
                tweet_id: record.get(0).unwrap_or("").to_string(),
                paper_id: record.get(1).unwrap_or("").to_string(),
                raw_location: Some(record.get(2).unwrap_or("").to_string()),
                has_precise_geo: false,
            },
            record.get(2).unwrap_or("").to_string(),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage: geocode
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct GeocodeStageOut {
    pub resolved: Vec<(TweetRecord, ResolvedLocation)>,
    pub skipped: usize,
}

fn resolve_kept(
    config: &RunConfig,
    kept: &[(TweetRecord, String)],
    gaz: &Gazetteer,
) -> Result<GeocodeStageOut, PipelineError> {
    let stage = "geocode";
    let rules = config.exclusion_rules()?;
    // Re-derive the filter decision from the stored normalized string; the
    // normalizer is idempotent, so this reproduces the original match.
    let decisions: Vec<(TweetRecord, crate::filter::FilterDecision)> = kept
        .iter()
        .map(|(record, loc_norm)| {
            (
                record.clone(),
                crate::filter::filter_location(loc_norm, &rules, gaz),
            )
        })
        .filter(|(_, d)| d.is_kept())
        .collect();

    let mode = match config.geocode_mode {
        GeocodeModeName::Offline => GeocodeMode::Offline,
        GeocodeModeName::External => match ExternalEndpoint::from_env(config.geocode_rps) {
            Some(endpoint) => GeocodeMode::External(endpoint),
            None => {
                return Err(PipelineError::stage(
                    stage,
                    "external geocode mode requires GEOSENSOR_GEOCODE_URL",
                ))
            }
        },
    };
    let mut cache = match &config.cache {
        Some(path) => Some(GeocodeCache::open(path).map_err(|e| PipelineError::stage(stage, e))?),
        None => None,
    };
    let outcome = resolve_batch(&decisions, &mode, gaz, cache.as_mut());
    Ok(GeocodeStageOut {
        resolved: outcome.resolved,
        skipped: outcome.skipped,
    })
}

fn write_resolved_csv(config: &RunConfig, out: &GeocodeStageOut) -> Result<(), PipelineError> {
    let mut csv = String::from("tweet_id,paper_id,loc_norm,lat,lon,country_code,state_code,source\n");
    for (record, loc) in &out.resolved {
        csv.push_str(&format!(
            "{},{},\"{}\",{},{},{},{},{}\n",
            record.tweet_id,
            record.paper_id,
            loc.loc_norm,
            loc.lat,
            loc.lon,
            loc.country_code,
            loc.state_code.as_deref().unwrap_or(""),
            loc.source.as_str()
        ));
    }
    write_atomic(&config.out(RESOLVED_CSV), csv.as_bytes())
        .map_err(|e| PipelineError::stage("geocode", e))
}

/// Resolve the filtered corpus (reads `filtered.csv`, writes
/// `resolved.csv`).
pub fn stage_geocode(config: &RunConfig) -> Result<GeocodeStageOut, PipelineError> {
    let stage = "geocode";
    let gaz = config.load_gazetteer(stage)?;
    let kept = read_filtered_csv(&config.out(FILTERED_CSV))
        .map_err(|e| PipelineError::stage(stage, e))?;
    let out = resolve_kept(config, &kept, &gaz)?;
    write_resolved_csv(config, &out)?;
    Ok(out)
}

fn read_resolved_csv(path: &Path) -> Result<Vec<(TweetRecord, ResolvedLocation)>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        let source = match record.get(7).unwrap_or("") {
            "external" => Source::External,
            "cache" => Source::Cache,
            _ => Source::Offline,
        };
        let state = record.get(6).unwrap_or("");
        out.push((
            TweetRecord {
                tweet_id: record.get(0).unwrap_or("").to_string(),
                paper_id: record.get(1).unwrap_or("").to_string(),
                raw_location: Some(record.get(2).unwrap_or("").to_string()),
                has_precise_geo: false,
            },
            ResolvedLocation {
                loc_norm: record.get(2).unwrap_or("").to_string(),
                lat: record.get(3).unwrap_or("0").parse().map_err(|e| format!("lat: {e}"))?,
                lon: record.get(4).unwrap_or("0").parse().map_err(|e| format!("lon: {e}"))?,
                country_code: record.get(5).unwrap_or("").to_string(),
                state_code: if state.is_empty() {
                    None
                } else {
                    Some(state.to_string())
                },
                source,
            },
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage: panel
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PanelStageOut {
    pub rows: Vec<RegionPanel>,
    pub excluded_regions: usize,
    pub excluded_tweets: usize,
    pub unattributed_tweets: usize,
    pub burden_no_data_regions: usize,
}

fn aggregate_burden(config: &RunConfig) -> Result<(Vec<BurdenValue>, usize), PipelineError> {
    let stage = "panel";
    let series = load_burden(&config.burden, config.measure)
        .map_err(|e| PipelineError::stage(stage, e))?;
    let mut values = Vec::new();
    let mut no_data = 0;
    for s in &series {
        let aggregated = match config.burden_rule {
            BurdenRule::HivWorld => aggregate_hiv_world(s),
            BurdenRule::Window => aggregate_window(s),
            BurdenRule::UsHiv => aggregate_us_hiv(s),
        };
        match aggregated {
            Ok(v) => values.push(v),
            Err(crate::burden::BurdenError::NoData { .. }) => no_data += 1,
            Err(e) => return Err(PipelineError::stage(stage, e)),
        }
    }
    Ok((values, no_data))
}

fn panel_from_resolved(
    config: &RunConfig,
    resolved: &[(TweetRecord, ResolvedLocation)],
) -> Result<PanelStageOut, PipelineError> {
    let stage = "panel";
    let (burden, no_data) = aggregate_burden(config)?;
    let papers = load_paper_counts(&config.paper_counts)
        .map_err(|e| PipelineError::stage(stage, e))?;
    let build = build_panel(resolved, &burden, &papers, config.region_kind);

    let mut csv = String::from("region_code,tweets,burden,papers\n");
    for row in &build.rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.region_code, row.tweets, row.burden, row.papers
        ));
    }
    write_atomic(&config.out(PANEL_CSV), csv.as_bytes())
        .map_err(|e| PipelineError::stage(stage, e))?;

    Ok(PanelStageOut {
        rows: build.rows,
        excluded_regions: build.excluded_regions,
        excluded_tweets: build.excluded_tweets,
        unattributed_tweets: build.unattributed_tweets,
        burden_no_data_regions: no_data,
    })
}

/// Build the regression panel (reads `resolved.csv`, writes `panel.csv`).
pub fn stage_panel(config: &RunConfig) -> Result<PanelStageOut, PipelineError> {
    let resolved = read_resolved_csv(&config.out(RESOLVED_CSV))
        .map_err(|e| PipelineError::stage("panel", e))?;
    panel_from_resolved(config, &resolved)
}

fn read_panel_csv(path: &Path) -> Result<Vec<RegionPanel>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| e.to_string())?;
    let header = reader
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != "region_code,tweets,burden,papers" {
        return Err(format!("unexpected header in {}: {header}", path.display()));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        rows.push(RegionPanel {
            region_code: record.get(0).unwrap_or("").to_string(),
            tweets: record.get(1).unwrap_or("0").parse().map_err(|e| format!("tweets: {e}"))?,
            burden: record.get(2).unwrap_or("0").parse().map_err(|e| format!("burden: {e}"))?,
            papers: record.get(3).unwrap_or("0").parse().map_err(|e| format!("papers: {e}"))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Stage: fit
// ---------------------------------------------------------------------------

fn fit_panel(config: &RunConfig, rows: &[RegionPanel]) -> Result<GlmFit, PipelineError> {
    let stage = "fit";
    let fit = fit_poisson(rows).map_err(|e| PipelineError::stage(stage, e))?;
    let labels = vec![config.burden_label.clone(), "Number of papers".to_string()];
    let table = summarize(&fit, &labels, config.region_kind.label());
    write_atomic(&config.out(FIT_TXT), table.as_bytes())
        .map_err(|e| PipelineError::stage(stage, e))?;
    write_atomic(&config.out(FIT_CSV), summary_csv(&fit, &labels).as_bytes())
        .map_err(|e| PipelineError::stage(stage, e))?;
    Ok(fit)
}

/// Fit the Poisson model (reads `panel.csv`, writes `fit.txt` and
/// `fit.csv`).
pub fn stage_fit(config: &RunConfig) -> Result<GlmFit, PipelineError> {
    let rows = read_panel_csv(&config.out(PANEL_CSV))
        .map_err(|e| PipelineError::stage("fit", e))?;
    fit_panel(config, &rows)
}

// ---------------------------------------------------------------------------
// Stage: render
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RenderStageOut {
    pub dots: usize,
    pub missing_geometry: Vec<String>,
    pub degenerate_classes: bool,
}

fn render_map(
    config: &RunConfig,
    resolved: &[(TweetRecord, ResolvedLocation)],
) -> Result<RenderStageOut, PipelineError> {
    let stage = "render";
    let (burden, _) = aggregate_burden(config)?;
    let papers = load_paper_counts(&config.paper_counts)
        .map_err(|e| PipelineError::stage(stage, e))?;
    let boundaries_text = std::fs::read_to_string(&config.boundaries)
        .map_err(|e| PipelineError::stage(stage, e))?;
    let boundary_regions = crate::mapgen::parse_boundaries(&boundaries_text)
        .map_err(|e| PipelineError::stage(stage, e))?;

    // Every drawable region gets a class; burden joins by region code and
    // regions without data stay white.
    let burden_by_region: BTreeMap<&str, f64> = burden
        .iter()
        .map(|b| (b.region_code.as_str(), b.value))
        .collect();
    let burdens: BTreeMap<String, Option<f64>> = boundary_regions
        .keys()
        .map(|code| (code.clone(), burden_by_region.get(code.as_str()).copied()))
        .collect();
    let classification =
        classify(&burdens, config.classes).map_err(|e| PipelineError::stage(stage, e))?;

    // One dot per resolved tweet that belongs to a drawable region kind,
    // weighted by the region's paper count.
    let mut dots = Vec::new();
    for (_, loc) in resolved {
        let Some(region) = region_of(loc, config.region_kind) else {
            continue;
        };
        let weight = dot_weight(papers.get(&region).unwrap_or(0));
        dots.push(DotSpec::new(loc.lat, loc.lon, weight, &config.dot_scale));
    }

    let spec = MapSpec {
        regions: classification.regions,
        dots,
        projection: Projection {
            width: config.canvas.0,
            height: config.canvas.1,
        },
        legend: classification.legend,
        title: config.disease.clone(),
    };
    let render = render_svg(&spec, &boundaries_text).map_err(|e| PipelineError::stage(stage, e))?;
    write_atomic(&config.out(MAP_SVG), render.svg.as_bytes())
        .map_err(|e| PipelineError::stage(stage, e))?;
    write_atomic(&config.out(MAP_GEOJSON), render_geojson(&spec).as_bytes())
        .map_err(|e| PipelineError::stage(stage, e))?;

    Ok(RenderStageOut {
        dots: spec.dots.len(),
        missing_geometry: render.missing_geometry,
        degenerate_classes: classification.degenerate,
    })
}

/// Render map artifacts (reads `resolved.csv`, writes `map.svg` and
/// `map.geojson`).
pub fn stage_render(config: &RunConfig) -> Result<RenderStageOut, PipelineError> {
    let resolved = read_resolved_csv(&config.out(RESOLVED_CSV))
        .map_err(|e| PipelineError::stage("render", e))?;
    render_map(config, &resolved)
}

// ---------------------------------------------------------------------------
// run_all
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct TermReport {
    pub label: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub z: f64,
    pub p: f64,
    pub pct_change: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    pub loglik: f64,
    pub terms: Vec<TermReport>,
}

impl FitReport {
    fn new(fit: &GlmFit, burden_label: &str) -> Self {
        let labels = [burden_label.to_string(), "Number of papers".to_string()];
        let mut terms = vec![TermReport {
            label: "Constant".to_string(),
            coefficient: fit.beta[0],
            std_error: fit.se[0],
            z: fit.z[0],
            p: fit.p[0],
            pct_change: None,
            sd: None,
        }];
        for j in 0..fit.pct_change.len() {
            terms.push(TermReport {
                label: labels.get(j).cloned().unwrap_or_else(|| fit.labels[j].clone()),
                coefficient: fit.beta[j + 1],
                std_error: fit.se[j + 1],
                z: fit.z[j + 1],
                p: fit.p[j + 1],
                pct_change: Some(fit.pct_change[j]),
                sd: Some(fit.sds[j]),
            });
        }
        FitReport {
            n: fit.n(),
            converged: fit.converged,
            iterations: fit.iterations,
            deviance: fit.deviance,
            loglik: fit.loglik,
            terms,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ResolutionReport {
    pub resolved: usize,
    pub skipped: usize,
    pub unattributed_tweets: usize,
}

#[derive(Debug, Serialize)]
pub struct PanelReport {
    pub n: usize,
    pub excluded_regions: usize,
    pub excluded_tweets: usize,
    pub burden_no_data_regions: usize,
}

#[derive(Debug, Serialize)]
pub struct OutputPaths {
    pub filtered_csv: String,
    pub resolved_csv: String,
    pub panel_csv: String,
    pub fit_txt: String,
    pub fit_csv: String,
    pub map_svg: String,
    pub map_geojson: String,
    pub report_json: String,
}

/// Wall-clock per stage. Excluded when comparing reports for determinism.
#[derive(Debug, Serialize)]
pub struct Timings {
    pub filter_ms: u128,
    pub geocode_ms: u128,
    pub panel_ms: u128,
    pub fit_ms: u128,
    pub render_ms: u128,
    pub total_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub disease: String,
    pub region_kind: RegionKind,
    pub coverage: CoverageStats,
    pub filter_tally: FilterTally,
    pub resolution: ResolutionReport,
    pub panel: PanelReport,
    pub fit: FitReport,
    pub map_dots: usize,
    pub missing_geometry: Vec<String>,
    pub degenerate_classes: bool,
    pub tweets_with_precise_geo: usize,
    pub duplicate_tweet_ids: usize,
    pub outputs: OutputPaths,
    pub timing: Timings,
}

/// Execute the whole pipeline: filter, geocode, panel, fit, render, then
/// write the JSON run report. Stage artifacts are identical to what the
/// stage subcommands produce. Deterministic for fixed inputs in offline
/// mode (the timing block aside).
pub fn run_all(config: &RunConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let total_start = Instant::now();

    let start = Instant::now();
    let filter_out = stage_filter(config)?;
    let filter_ms = start.elapsed().as_millis();

    let start = Instant::now();
    let gaz = config.load_gazetteer("geocode")?;
    let geocode_out = resolve_kept(config, &filter_out.kept, &gaz)?;
    write_resolved_csv(config, &geocode_out)?;
    let geocode_ms = start.elapsed().as_millis();

    let start = Instant::now();
    let panel_out = panel_from_resolved(config, &geocode_out.resolved)?;
    let panel_ms = start.elapsed().as_millis();

    let start = Instant::now();
    let fit = fit_panel(config, &panel_out.rows)?;
    let fit_ms = start.elapsed().as_millis();

    let start = Instant::now();
    let render_out = render_map(config, &geocode_out.resolved)?;
    let render_ms = start.elapsed().as_millis();

    let paper_ids: HashSet<String> =
        load_paper_ids(&config.paper_ids).map_err(|e| PipelineError::stage("filter", e))?;
    let tweets = load_tweets(&config.tweets).map_err(|e| PipelineError::stage("filter", e))?;
    let coverage = compute_coverage(&paper_ids, &tweets.records, geocode_out.resolved.len())
        .map_err(|e| PipelineError::stage("filter", e))?;

    let out_path = |name: &str| config.out(name).display().to_string();
    let report = RunReport {
        disease: config.disease.clone(),
        region_kind: config.region_kind,
        coverage,
        filter_tally: filter_out.tally,
        resolution: ResolutionReport {
            resolved: geocode_out.resolved.len(),
            skipped: geocode_out.skipped,
            unattributed_tweets: panel_out.unattributed_tweets,
        },
        panel: PanelReport {
            n: panel_out.rows.len(),
            excluded_regions: panel_out.excluded_regions,
            excluded_tweets: panel_out.excluded_tweets,
            burden_no_data_regions: panel_out.burden_no_data_regions,
        },
        fit: FitReport::new(&fit, &config.burden_label),
        map_dots: render_out.dots,
        missing_geometry: render_out.missing_geometry,
        degenerate_classes: render_out.degenerate_classes,
        tweets_with_precise_geo: filter_out.tweets_with_precise_geo,
        duplicate_tweet_ids: filter_out.duplicate_tweet_ids,
        outputs: OutputPaths {
            filtered_csv: out_path(FILTERED_CSV),
            resolved_csv: out_path(RESOLVED_CSV),
            panel_csv: out_path(PANEL_CSV),
            fit_txt: out_path(FIT_TXT),
            fit_csv: out_path(FIT_CSV),
            map_svg: out_path(MAP_SVG),
            map_geojson: out_path(MAP_GEOJSON),
            report_json: out_path(REPORT_JSON),
        },
        timing: Timings {
            filter_ms,
            geocode_ms,
            panel_ms,
            fit_ms,
            render_ms,
            total_ms: total_start.elapsed().as_millis(),
        },
    };

    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(&config.out(REPORT_JSON), json.as_bytes())
        .map_err(|e| PipelineError::stage("report", e))?;
    Ok(report)
}
