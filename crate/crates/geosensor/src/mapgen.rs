//! Social-spatial sensor maps: a burden choropleth with an overlay of tweet
//! dots sized inversely to the region's publication output.
//!
//! Regions with burden data are classified into quantile classes on a
//! light-to-dark blue ramp; regions without data stay white. Every resolved
//! tweet becomes one semi-transparent dot whose radius scales with
//! `1/ln(papers)`, so heavy tweeting from low-output regions stands out.
//! Rendering is plain SVG (equirectangular projection) plus a GeoJSON twin
//! carrying the same values as properties; both are byte-deterministic for
//! fixed inputs.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("class count must be at least 2, got {0}")]
    BadClassCount(usize),
    #[error("malformed boundaries: {0}")]
    MalformedBoundaries(String),
}

/// Inverse-log dot weight on the real-valued core. Counts below 2 clamp to
/// 2 so the weight stays finite and positive (ln 1 = 0, ln 0 undefined).
pub fn dot_weight_real(papers: f64) -> f64 {
    1.0 / papers.max(2.0).ln()
}

/// `1 / ln(max(papers, 2))` for an integer paper count.
pub fn dot_weight(papers: u64) -> f64 {
    dot_weight_real(papers as f64)
}

/// Dot radius scaling: `radius = clamp(r_base * weight, r_min, r_max)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DotScale {
    pub r_base: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for DotScale {
    fn default() -> Self {
        DotScale {
            r_base: 6.0,
            r_min: 1.0,
            r_max: 10.0,
        }
    }
}

/// One tweet dot, already weighted and sized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DotSpec {
    pub lat: f64,
    pub lon: f64,
    pub weight: f64,
    pub radius_px: f64,
}

impl DotSpec {
    pub fn new(lat: f64, lon: f64, weight: f64, scale: &DotScale) -> Self {
        DotSpec {
            lat,
            lon,
            weight,
            radius_px: (scale.r_base * weight).clamp(scale.r_min, scale.r_max),
        }
    }
}

/// A region with its quantile class, or NoData (white fill).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassedRegion {
    pub region_code: String,
    pub burden: Option<f64>,
    pub class_index: Option<usize>,
    pub fill: String,
}

pub const NO_DATA_FILL: &str = "#ffffff";

/// Sequential blue ramp from light to dark, one fill per class.
pub fn blue_ramp(classes: usize) -> Vec<String> {
    let light = (239.0, 243.0, 255.0);
    let dark = (8.0, 81.0, 156.0);
    (0..classes)
        .map(|i| {
            let t = if classes == 1 {
                1.0
            } else {
                i as f64 / (classes - 1) as f64
            };
            let r = (light.0 + t * (dark.0 - light.0)).round() as u8;
            let g = (light.1 + t * (dark.1 - light.1)).round() as u8;
            let b = (light.2 + t * (dark.2 - light.2)).round() as u8;
            format!("#{r:02x}{g:02x}{b:02x}")
        })
        .collect()
}

/// Classification output: classed regions sorted by code, per-class value
/// ranges for the legend, and a degeneracy flag (fewer data regions than
/// classes, or tied break values).
#[derive(Debug, Clone)]
pub struct Classification {
    pub regions: Vec<ClassedRegion>,
    /// (lo, hi) value range per class.
    pub legend: Vec<(f64, f64)>,
    pub degenerate: bool,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let h = (m - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile classification of burdens into `classes` classes. Regions with
/// no value are marked NoData and filled white. Higher burden never maps to
/// a lower class.
pub fn classify(
    burdens: &BTreeMap<String, Option<f64>>,
    classes: usize,
) -> Result<Classification, MapError> {
    if classes < 2 {
        return Err(MapError::BadClassCount(classes));
    }
    let mut values: Vec<f64> = burdens.values().filter_map(|v| *v).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite burdens"));

    let breaks: Vec<f64> = (1..classes)
        .map(|i| quantile(&values, i as f64 / classes as f64))
        .collect();
    let degenerate = values.len() < classes
        || breaks.windows(2).any(|w| w[0] >= w[1])
        || values.is_empty();

    let ramp = blue_ramp(classes);
    let class_of = |v: f64| breaks.iter().filter(|b| **b < v).count();

    let regions = burdens
        .iter()
        .map(|(code, burden)| match burden {
            Some(v) => {
                let class = class_of(*v);
                ClassedRegion {
                    region_code: code.clone(),
                    burden: Some(*v),
                    class_index: Some(class),
                    fill: ramp[class].clone(),
                }
            }
            None => ClassedRegion {
                region_code: code.clone(),
                burden: None,
                class_index: None,
                fill: NO_DATA_FILL.to_string(),
            },
        })
        .collect();

    let legend = if values.is_empty() {
        Vec::new()
    } else {
        let min = values[0];
        let max = *values.last().unwrap();
        (0..classes)
            .map(|i| {
                let lo = if i == 0 { min } else { breaks[i - 1] };
                let hi = if i == classes - 1 { max } else { breaks[i] };
                (lo, hi)
            })
            .collect()
    };

    Ok(Classification {
        regions,
        legend,
        degenerate,
    })
}

/// Equirectangular canvas: lon maps linearly to x, lat to y.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Projection {
    pub width: u32,
    pub height: u32,
}

impl Projection {
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon + 180.0) / 360.0 * self.width as f64;
        let y = (90.0 - lat) / 180.0 * self.height as f64;
        (x, y)
    }
}

impl Default for Projection {
    fn default() -> Self {
        Projection {
            width: 1000,
            height: 500,
        }
    }
}

/// Everything needed to render one map.
#[derive(Debug, Clone)]
pub struct MapSpec {
    pub regions: Vec<ClassedRegion>,
    pub dots: Vec<DotSpec>,
    pub projection: Projection,
    pub legend: Vec<(f64, f64)>,
    pub title: String,
}

const DOT_FILL: &str = "#d7301f";
const DOT_OPACITY: &str = "0.5";

/// SVG output plus regions that had no geometry in the boundaries file.
#[derive(Debug)]
pub struct SvgRender {
    pub svg: String,
    pub missing_geometry: Vec<String>,
}

type Ring = Vec<(f64, f64)>;

fn parse_rings(geometry: &Value) -> Result<Vec<Ring>, MapError> {
    let gtype = geometry["type"]
        .as_str()
        .ok_or_else(|| MapError::MalformedBoundaries("geometry without type".into()))?;
    let coords = &geometry["coordinates"];
    let ring_from = |value: &Value| -> Result<Ring, MapError> {
        value
            .as_array()
            .ok_or_else(|| MapError::MalformedBoundaries("ring is not an array".into()))?
            .iter()
            .map(|pt| {
                let pair = pt
                    .as_array()
                    .filter(|a| a.len() >= 2)
                    .ok_or_else(|| MapError::MalformedBoundaries("bad coordinate pair".into()))?;
                let lon = pair[0]
                    .as_f64()
                    .ok_or_else(|| MapError::MalformedBoundaries("non-numeric lon".into()))?;
                let lat = pair[1]
                    .as_f64()
                    .ok_or_else(|| MapError::MalformedBoundaries("non-numeric lat".into()))?;
                Ok((lat, lon))
            })
            .collect()
    };
    match gtype {
        "Polygon" => coords
            .as_array()
            .ok_or_else(|| MapError::MalformedBoundaries("polygon without rings".into()))?
            .iter()
            .map(ring_from)
            .collect(),
        "MultiPolygon" => {
            let mut rings = Vec::new();
            for polygon in coords
                .as_array()
                .ok_or_else(|| MapError::MalformedBoundaries("multipolygon without polygons".into()))?
            {
                for ring in polygon
                    .as_array()
                    .ok_or_else(|| MapError::MalformedBoundaries("polygon without rings".into()))?
                {
                    rings.push(ring_from(ring)?);
                }
            }
            Ok(rings)
        }
        other => Err(MapError::MalformedBoundaries(format!(
            "unsupported geometry type {other}"
        ))),
    }
}

/// Region geometries keyed by the `region_code` feature property.
pub fn parse_boundaries(geojson: &str) -> Result<BTreeMap<String, Vec<Ring>>, MapError> {
    let value: Value = serde_json::from_str(geojson)
        .map_err(|e| MapError::MalformedBoundaries(e.to_string()))?;
    if value["type"] != "FeatureCollection" {
        return Err(MapError::MalformedBoundaries(
            "not a FeatureCollection".into(),
        ));
    }
    let features = value["features"]
        .as_array()
        .ok_or_else(|| MapError::MalformedBoundaries("missing features".into()))?;
    let mut out = BTreeMap::new();
    for feature in features {
        let code = feature["properties"]["region_code"]
            .as_str()
            .ok_or_else(|| MapError::MalformedBoundaries("feature without region_code".into()))?;
        out.insert(code.to_string(), parse_rings(&feature["geometry"])?);
    }
    Ok(out)
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Render the map as SVG 1.1. Region paths come first (sorted by region
/// code), dots after them so they stay visible, then the legend and title.
/// Regions missing from the boundaries file are skipped and reported;
/// their dots are unaffected. Output is byte-deterministic.
pub fn render_svg(spec: &MapSpec, boundaries_geojson: &str) -> Result<SvgRender, MapError> {
    let boundaries = parse_boundaries(boundaries_geojson)?;
    let proj = spec.projection;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
        w = proj.width,
        h = proj.height
    ));
    svg.push_str(&format!("<title>{}</title>\n", spec.title));
    svg.push_str(&format!(
        "<rect width=\"{}\" height=\"{}\" fill=\"#f7fbff\"/>\n",
        proj.width, proj.height
    ));

    let mut regions = spec.regions.clone();
    regions.sort_by(|a, b| a.region_code.cmp(&b.region_code));
    let mut missing = Vec::new();
    svg.push_str("<g id=\"regions\" stroke=\"#999999\" stroke-width=\"0.5\">\n");
    for region in &regions {
        let Some(rings) = boundaries.get(&region.region_code) else {
            missing.push(region.region_code.clone());
            continue;
        };
        let mut d = String::new();
        for ring in rings {
            for (i, (lat, lon)) in ring.iter().enumerate() {
                let (x, y) = proj.project(*lat, *lon);
                if i == 0 {
                    d.push_str(&format!("M{},{}", fmt2(x), fmt2(y)));
                } else {
                    d.push_str(&format!(" L{},{}", fmt2(x), fmt2(y)));
                }
            }
            d.push_str(" Z");
        }
        svg.push_str(&format!(
            "<path d=\"{d}\" fill=\"{}\"><title>{}</title></path>\n",
            region.fill, region.region_code
        ));
    }
    svg.push_str("</g>\n");

    svg.push_str("<g id=\"dots\">\n");
    for dot in &spec.dots {
        let (x, y) = proj.project(dot.lat, dot.lon);
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{DOT_FILL}\" fill-opacity=\"{DOT_OPACITY}\"/>\n",
            fmt2(x),
            fmt2(y),
            fmt2(dot.radius_px)
        ));
    }
    svg.push_str("</g>\n");

    let ramp = blue_ramp(spec.legend.len().max(2));
    svg.push_str("<g id=\"legend\" font-family=\"sans-serif\" font-size=\"10\">\n");
    for (i, (lo, hi)) in spec.legend.iter().enumerate() {
        let y = proj.height as f64 - 16.0 * (spec.legend.len() - i) as f64 - 8.0;
        svg.push_str(&format!(
            "<rect x=\"8\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\" stroke=\"#999999\" stroke-width=\"0.5\"/>\n",
            fmt2(y),
            ramp[i]
        ));
        svg.push_str(&format!(
            "<text x=\"24\" y=\"{}\">{} - {}</text>\n",
            fmt2(y + 10.0),
            fmt2(*lo),
            fmt2(*hi)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"8\" y=\"16\" font-size=\"14\">{}</text>\n",
        spec.title
    ));
    svg.push_str("</g>\n</svg>\n");

    Ok(SvgRender {
        svg,
        missing_geometry: missing,
    })
}

/// GeoJSON twin of the map: one geometry-less feature per region carrying
/// the classification, one Point feature per dot. For joining against real
/// boundaries in GIS tools.
pub fn render_geojson(spec: &MapSpec) -> String {
    let mut features: Vec<Value> = Vec::new();
    let mut regions = spec.regions.clone();
    regions.sort_by(|a, b| a.region_code.cmp(&b.region_code));
    for region in &regions {
        features.push(json!({
            "type": "Feature",
            "geometry": Value::Null,
            "properties": {
                "kind": "region",
                "region_code": region.region_code,
                "burden": region.burden,
                "class_index": region.class_index,
                "fill": region.fill,
            }
        }));
    }
    for dot in &spec.dots {
        features.push(json!({
            "type": "Feature",
            "geometry": {
                "type": "Point",
                "coordinates": [dot.lon, dot.lat],
            },
            "properties": {
                "kind": "tweet",
                "weight": dot.weight,
                "radius_px": dot.radius_px,
            }
        }));
    }
    let collection = json!({
        "type": "FeatureCollection",
        "title": spec.title,
        "features": features,
    });
    serde_json::to_string_pretty(&collection).expect("static json") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dot_weight_closed_forms() {
        // e^2 papers -> weight exactly 1/2 on the real-valued core.
        assert_abs_diff_eq!(dot_weight_real(std::f64::consts::E.powi(2)), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dot_weight(2), 1.0 / 2.0f64.ln(), epsilon = 1e-12);
        // Degenerate counts clamp to 2.
        assert_eq!(dot_weight(0), dot_weight(2));
        assert_eq!(dot_weight(1), dot_weight(2));
    }

    #[test]
    fn dot_weight_monotone() {
        for p in 2..400u64 {
            assert!(dot_weight(p + 1) <= dot_weight(p));
            if p >= 2 {
                assert!(dot_weight(p + 1) < dot_weight(p));
            }
        }
    }

    #[test]
    fn radius_clamped() {
        let scale = DotScale {
            r_base: 6.0,
            r_min: 2.0,
            r_max: 5.0,
        };
        assert_eq!(DotSpec::new(0.0, 0.0, 10.0, &scale).radius_px, 5.0);
        assert_eq!(DotSpec::new(0.0, 0.0, 0.01, &scale).radius_px, 2.0);
        assert_eq!(DotSpec::new(0.0, 0.0, 0.5, &scale).radius_px, 3.0);
    }

    fn burden_map(pairs: &[(&str, Option<f64>)]) -> BTreeMap<String, Option<f64>> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect()
    }

    #[test]
    fn one_region_per_quantile() {
        let burdens = burden_map(&[
            ("A", Some(1.0)),
            ("B", Some(2.0)),
            ("C", Some(3.0)),
            ("D", Some(4.0)),
            ("E", Some(5.0)),
        ]);
        let c = classify(&burdens, 5).unwrap();
        let classes: Vec<usize> = c.regions.iter().map(|r| r.class_index.unwrap()).collect();
        assert_eq!(classes, vec![0, 1, 2, 3, 4]);
        assert!(!c.degenerate);
    }

    #[test]
    fn no_data_regions_are_white() {
        let burdens = burden_map(&[("A", Some(1.0)), ("B", None), ("C", Some(2.0))]);
        let c = classify(&burdens, 2).unwrap();
        let b = c.regions.iter().find(|r| r.region_code == "B").unwrap();
        assert!(b.class_index.is_none());
        assert_eq!(b.fill, NO_DATA_FILL);
    }

    #[test]
    fn all_equal_burdens_collapse_to_class_zero() {
        let burdens = burden_map(&[("A", Some(7.0)), ("B", Some(7.0)), ("C", Some(7.0))]);
        let c = classify(&burdens, 3).unwrap();
        assert!(c.regions.iter().all(|r| r.class_index == Some(0)));
        assert!(c.degenerate);
    }

    #[test]
    fn classification_is_monotone_in_burden() {
        let burdens = burden_map(&[
            ("A", Some(10.0)),
            ("B", Some(3.0)),
            ("C", Some(3.0)),
            ("D", Some(25.0)),
            ("E", Some(0.5)),
            ("F", Some(11.0)),
            ("G", Some(17.0)),
        ]);
        let c = classify(&burdens, 4).unwrap();
        let classed: Vec<&ClassedRegion> = c.regions.iter().collect();
        for a in &classed {
            for b in &classed {
                if a.burden.unwrap() <= b.burden.unwrap() {
                    assert!(a.class_index.unwrap() <= b.class_index.unwrap());
                }
            }
        }
    }

    #[test]
    fn too_few_classes_rejected() {
        let burdens = burden_map(&[("A", Some(1.0))]);
        assert!(matches!(classify(&burdens, 1), Err(MapError::BadClassCount(1))));
    }

    #[test]
    fn equator_meridian_projects_to_center() {
        let proj = Projection {
            width: 1000,
            height: 500,
        };
        assert_eq!(proj.project(0.0, 0.0), (500.0, 250.0));
        assert_eq!(proj.project(90.0, -180.0), (0.0, 0.0));
    }

    fn tiny_spec() -> MapSpec {
        let burdens = burden_map(&[("AAA", Some(1.0)), ("BBB", Some(2.0)), ("CCC", None)]);
        let c = classify(&burdens, 2).unwrap();
        let scale = DotScale::default();
        MapSpec {
            regions: c.regions,
            dots: vec![
                DotSpec::new(0.0, 0.0, dot_weight(5), &scale),
                DotSpec::new(10.0, 10.0, dot_weight(2), &scale),
                DotSpec::new(-10.0, 40.0, dot_weight(100), &scale),
                DotSpec::new(51.0, 0.0, dot_weight(0), &scale),
            ],
            projection: Projection::default(),
            legend: c.legend,
            title: "tiny".to_string(),
        }
    }

    const TINY_BOUNDARIES: &str = r#"{
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": {"region_code": "AAA"},
             "geometry": {"type": "Polygon", "coordinates": [[[0,0],[10,0],[10,10],[0,10],[0,0]]]}},
            {"type": "Feature", "properties": {"region_code": "BBB"},
             "geometry": {"type": "MultiPolygon", "coordinates": [[[[20,0],[30,0],[30,10],[20,0]]]]}},
            {"type": "Feature", "properties": {"region_code": "CCC"},
             "geometry": {"type": "Polygon", "coordinates": [[[40,0],[50,0],[50,10],[40,0]]]}}
        ]
    }"#;

    #[test]
    fn svg_element_counts() {
        let spec = tiny_spec();
        let render = render_svg(&spec, TINY_BOUNDARIES).unwrap();
        assert_eq!(render.svg.matches("<path ").count(), 3);
        assert_eq!(render.svg.matches("<circle ").count(), 4);
        assert!(render.missing_geometry.is_empty());
    }

    #[test]
    fn svg_is_deterministic() {
        let spec = tiny_spec();
        let a = render_svg(&spec, TINY_BOUNDARIES).unwrap().svg;
        let b = render_svg(&spec, TINY_BOUNDARIES).unwrap().svg;
        assert_eq!(a, b);
    }

    #[test]
    fn missing_geometry_skips_region_keeps_dots() {
        let spec = tiny_spec();
        let partial = r#"{
            "type": "FeatureCollection",
            "features": [
                {"type": "Feature", "properties": {"region_code": "AAA"},
                 "geometry": {"type": "Polygon", "coordinates": [[[0,0],[10,0],[10,10],[0,0]]]}}
            ]
        }"#;
        let render = render_svg(&spec, partial).unwrap();
        assert_eq!(render.svg.matches("<path ").count(), 1);
        assert_eq!(render.svg.matches("<circle ").count(), 4);
        assert_eq!(render.missing_geometry, vec!["BBB".to_string(), "CCC".to_string()]);
    }

    #[test]
    fn malformed_boundaries_rejected() {
        let spec = tiny_spec();
        assert!(render_svg(&spec, "{not json").is_err());
        assert!(render_svg(&spec, "{\"type\": \"Feature\"}").is_err());
    }

    #[test]
    fn geojson_carries_regions_and_dots() {
        let spec = tiny_spec();
        let geojson = render_geojson(&spec);
        let value: Value = serde_json::from_str(&geojson).unwrap();
        let features = value["features"].as_array().unwrap();
        assert_eq!(features.len(), 3 + 4);
        assert_eq!(render_geojson(&spec), geojson); // deterministic
    }

    #[test]
    fn dot_at_origin_centered_on_canvas() {
        let spec = tiny_spec();
        let render = render_svg(&spec, TINY_BOUNDARIES).unwrap();
        assert!(render.svg.contains("cx=\"500.00\" cy=\"250.00\""));
    }
}
