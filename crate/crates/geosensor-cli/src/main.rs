//! `geosensor` — run the tweet/burden co-location pipeline or its stages.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geosensor::pipeline::{
    self, GeocodeModeName, Overrides, PipelineError, RunConfig, RunReport,
};

const PAPER_ID_HELP: &str = "\
Input notes:
  Paper-id lists are consumed as pre-fetched text files (one id per line).
  For disease paper sets, PubMed MeSH queries of this shape are the usual
  source:
    (\"hiv\"[MeSH Major Topic]) AND (\"2011/01/01\"[Date - Publication] : \"2017/12/31\"[Date - Publication])
    (\"tuberculosis\"[MeSH Major Topic]) AND (\"2011/01/01\"[Date - Publication] : \"2017/12/31\"[Date - Publication])
    (\"malaria\"[MeSH Major Topic]) AND (\"2011/01/01\"[Date - Publication] : \"2017/12/31\"[Date - Publication])

  External geocoding (geocode = external) reads GEOSENSOR_GEOCODE_URL and
  optional GEOSENSOR_GEOCODE_KEY from the environment, queries
  GET <url>?q=<location>[&key=...] expecting JSON {lat, lon, country_code,
  state_code}, caches every answer, and falls back to the offline resolver
  on endpoint errors.

Exit codes: 0 success, 2 validation error, 1 stage failure.";

#[derive(Parser)]
#[command(
    name = "geosensor",
    version,
    about = "Maps and regressions linking tweet activity on disease papers to disease burden",
    after_long_help = PAPER_ID_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline: filter, geocode, panel, fit, render, report
    Run(StageArgs),
    /// Filter tweet locations against the exclusion rules and whitelist
    Filter(StageArgs),
    /// Resolve filtered locations to coordinates (reads filtered.csv)
    Geocode(StageArgs),
    /// Build the regression panel (reads resolved.csv)
    Panel(StageArgs),
    /// Fit the Poisson model (reads panel.csv)
    Fit(StageArgs),
    /// Render the choropleth and dot overlay (reads resolved.csv)
    Render(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Path to the key = value run config
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` from the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Region kind: country | us-state
    #[arg(long)]
    regions: Option<String>,
    /// Geocode mode: offline | external
    #[arg(long)]
    geocode: Option<String>,
    /// External geocoder rate limit, requests per second
    #[arg(long = "geocode-rps")]
    geocode_rps: Option<f64>,
    /// Choropleth class count
    #[arg(long)]
    classes: Option<usize>,
    /// Canvas size as WxH, e.g. 1000x500
    #[arg(long)]
    canvas: Option<String>,
    /// Dot radius base factor
    #[arg(long = "dot-base")]
    dot_base: Option<f64>,
    /// Minimum dot radius in px
    #[arg(long = "dot-min")]
    dot_min: Option<f64>,
    /// Maximum dot radius in px
    #[arg(long = "dot-max")]
    dot_max: Option<f64>,
}

impl StageArgs {
    fn config(&self) -> Result<RunConfig, PipelineError> {
        let mut config = RunConfig::from_file(&self.config)?;
        let overrides = Overrides {
            out_dir: self.out.clone(),
            region_kind: self
                .regions
                .as_deref()
                .map(|s| s.parse().map_err(PipelineError::Validation))
                .transpose()?,
            geocode_mode: self
                .geocode
                .as_deref()
                .map(|s| s.parse::<GeocodeModeName>().map_err(PipelineError::Validation))
                .transpose()?,
            geocode_rps: self.geocode_rps,
            classes: self.classes,
            canvas: self
                .canvas
                .as_deref()
                .map(|s| {
                    s.split_once('x')
                        .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                        .ok_or_else(|| {
                            PipelineError::Validation(format!("--canvas must be WxH, got `{s}`"))
                        })
                })
                .transpose()?,
            dot_base: self.dot_base,
            dot_min: self.dot_min,
            dot_max: self.dot_max,
        };
        config.apply(&overrides);
        Ok(config)
    }
}

fn print_run_summary(report: &RunReport) {
    println!(
        "{}: {} of {} papers ({:.1}%) tweeted by {} tweets",
        report.disease,
        report.coverage.papers_tweeted,
        report.coverage.papers_total,
        report.coverage.coverage_pct,
        report.coverage.tweets_total
    );
    println!(
        "filter: kept {} | spurious {} | too short {} | no whitelist hit {}",
        report.filter_tally.kept,
        report.filter_tally.spurious,
        report.filter_tally.too_short,
        report.filter_tally.no_whitelist_hit
    );
    println!(
        "resolved {} geo-coordinates ({:.1}% of all tweets), {} skipped",
        report.resolution.resolved, report.coverage.resolved_pct_of_all, report.resolution.skipped
    );
    println!(
        "panel: n={} {} ({} regions excluded, {} tweets outside panel)",
        report.panel.n,
        report.region_kind.label(),
        report.panel.excluded_regions,
        report.panel.excluded_tweets + report.resolution.unattributed_tweets
    );
    println!(
        "fit: converged={} iterations={} deviance={:.6}",
        report.fit.converged, report.fit.iterations, report.fit.deviance
    );
    println!("report: {}", report.outputs.report_json);
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Run(args) => {
            let config = args.config()?;
            let report = pipeline::run_all(&config)?;
            print_run_summary(&report);
        }
        Command::Filter(args) => {
            let config = args.config()?;
            config.validate()?;
            let out = pipeline::stage_filter(&config)?;
            println!(
                "filter: kept {} | spurious {} | too short {} | no whitelist hit {}",
                out.tally.kept, out.tally.spurious, out.tally.too_short, out.tally.no_whitelist_hit
            );
        }
        Command::Geocode(args) => {
            let config = args.config()?;
            config.validate()?;
            let out = pipeline::stage_geocode(&config)?;
            println!("geocode: resolved {} | skipped {}", out.resolved.len(), out.skipped);
        }
        Command::Panel(args) => {
            let config = args.config()?;
            config.validate()?;
            let out = pipeline::stage_panel(&config)?;
            println!(
                "panel: n={} ({} regions excluded)",
                out.rows.len(),
                out.excluded_regions
            );
        }
        Command::Fit(args) => {
            let config = args.config()?;
            config.validate()?;
            let fit = pipeline::stage_fit(&config)?;
            let table = std::fs::read_to_string(config.out_dir.join(pipeline::FIT_TXT))
                .unwrap_or_default();
            print!("{table}");
            println!("converged={} iterations={}", fit.converged, fit.iterations);
        }
        Command::Render(args) => {
            let config = args.config()?;
            config.validate()?;
            let out = pipeline::stage_render(&config)?;
            println!("render: {} dots", out.dots);
            if !out.missing_geometry.is_empty() {
                eprintln!(
                    "warning: no geometry for {} region(s): {}",
                    out.missing_geometry.len(),
                    out.missing_geometry.join(", ")
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
