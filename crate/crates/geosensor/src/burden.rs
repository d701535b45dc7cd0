//! Region-level disease burden: long-format CSV ingestion and the
//! year-aggregation rules that turn a per-year series into one value per
//! region.
//!
//! Three rules are supported: mean of the 2010/2018 endpoints with a
//! single-year fallback (worldwide HIV case counts), mean over whatever
//! subset of 2011-2017 is present (TB case counts and malaria incidence per
//! 1,000 at risk), and mean of the 2016/2017 endpoints with the same
//! fallback (US state HIV counts).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub const BURDEN_HEADER: &str = "region_code,year,value";

#[derive(Debug, Error)]
pub enum BurdenError {
    #[error("burden file not found: {0}")]
    MissingFile(String),
    #[error("bad burden header: expected `{expected}`, found `{found}`")]
    SchemaError { expected: String, found: String },
    #[error("duplicate year {year} for region {region}")]
    DuplicateYear { region: String, year: i32 },
    #[error("negative value {value} for region {region}, year {year}")]
    NegativeValue {
        region: String,
        year: i32,
        value: f64,
    },
    #[error("unparseable row for region {region}: {detail}")]
    BadRow { region: String, detail: String },
    #[error("no usable year for region {region}")]
    NoData { region: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// What the values count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Measure {
    CaseCount,
    IncidencePer1000AtRisk,
}

/// Which aggregation produced a burden value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AggregationRule {
    MeanOfEndpoints,
    MeanOverWindow,
}

/// Per-year values for one region. Years are unique, values nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct BurdenSeries {
    pub region_code: String,
    pub values: BTreeMap<i32, f64>,
    pub measure: Measure,
}

/// One aggregated burden value per region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BurdenValue {
    pub region_code: String,
    pub value: f64,
    pub years_used: Vec<i32>,
    pub rule: AggregationRule,
}

fn mean_over(series: &BurdenSeries, years: &[i32], rule: AggregationRule) -> Result<BurdenValue, BurdenError> {
    let present: Vec<i32> = years
        .iter()
        .copied()
        .filter(|y| series.values.contains_key(y))
        .collect();
    if present.is_empty() {
        return Err(BurdenError::NoData {
            region: series.region_code.clone(),
        });
    }
    let sum: f64 = present.iter().map(|y| series.values[y]).sum();
    Ok(BurdenValue {
        region_code: series.region_code.clone(),
        value: sum / present.len() as f64,
        years_used: present,
        rule,
    })
}

/// Worldwide HIV rule: mean of the 2010 and 2018 values; when only one of
/// the two years exists, that value is used as-is.
pub fn aggregate_hiv_world(series: &BurdenSeries) -> Result<BurdenValue, BurdenError> {
    mean_over(series, &[2010, 2018], AggregationRule::MeanOfEndpoints)
}

/// Window rule for TB and malaria: mean over whichever of 2011-2017 are
/// present.
pub fn aggregate_window(series: &BurdenSeries) -> Result<BurdenValue, BurdenError> {
    let window: Vec<i32> = (2011..=2017).collect();
    mean_over(series, &window, AggregationRule::MeanOverWindow)
}

/// US state HIV rule: mean of 2016 and 2017, single-year fallback.
pub fn aggregate_us_hiv(series: &BurdenSeries) -> Result<BurdenValue, BurdenError> {
    mean_over(series, &[2016, 2017], AggregationRule::MeanOfEndpoints)
}

/// Load long-format burden rows (`region_code,year,value`) into one series
/// per region. Duplicate (region, year) pairs and negative values are hard
/// errors.
pub fn load_burden(path: &Path, measure: Measure) -> Result<Vec<BurdenSeries>, BurdenError> {
    if !path.exists() {
        return Err(BurdenError::MissingFile(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != BURDEN_HEADER {
        return Err(BurdenError::SchemaError {
            expected: BURDEN_HEADER.to_string(),
            found: header,
        });
    }
    let mut by_region: BTreeMap<String, BurdenSeries> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let region = record.get(0).unwrap_or("").trim().to_string();
        let year: i32 = record
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| BurdenError::BadRow {
                region: region.clone(),
                detail: format!("year: {e}"),
            })?;
        let value: f64 = record
            .get(2)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| BurdenError::BadRow {
                region: region.clone(),
                detail: format!("value: {e}"),
            })?;
        if value < 0.0 {
            return Err(BurdenError::NegativeValue {
                region,
                year,
                value,
            });
        }
        let series = by_region.entry(region.clone()).or_insert_with(|| BurdenSeries {
            region_code: region.clone(),
            values: BTreeMap::new(),
            measure,
        });
        if series.values.insert(year, value).is_some() {
            return Err(BurdenError::DuplicateYear { region, year });
        }
    }
    Ok(by_region.into_values().collect())
}
