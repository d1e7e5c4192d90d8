//! CSV table and SVG charts over a finished (or partial) matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use crate::config::SpecKind;
use crate::error::{Error, Result};
use crate::matrix::RunResult;

pub const CSV_COLUMNS: [&str; 12] = [
    "spec_hash",
    "kind",
    "extractor",
    "sampling",
    "augmentation",
    "count",
    "seed",
    "map50",
    "map50_95",
    "num_images",
    "num_ground_truth",
    "num_detections",
];

/// One row per finished cell.
pub fn write_csv(results: &[RunResult], path: &Path) -> Result<usize> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Report(e.to_string()))?;
    w.write_record(CSV_COLUMNS).map_err(|e| Error::Report(e.to_string()))?;
    let mut rows = 0;
    for run in results {
        let kind = serde_json::to_value(run.spec.kind).expect("kind serializes");
        for c in &run.counts {
            for (seed, r) in &c.per_seed {
                w.write_record([
                    run.spec_hash.clone(),
                    kind.as_str().unwrap_or_default().to_string(),
                    run.spec.extractor.clone().unwrap_or_default(),
                    run.spec.sampling.clone().unwrap_or_default(),
                    run.spec.augmentation.clone(),
                    c.count.to_string(),
                    seed.to_string(),
                    format!("{:.6}", r.map50),
                    format!("{:.6}", r.map50_95),
                    r.num_images.to_string(),
                    r.num_ground_truth.to_string(),
                    r.num_detections.to_string(),
                ])
                .map_err(|e| Error::Report(e.to_string()))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Extractor,
    Sampling,
    Augmentation,
}

impl Dimension {
    const ALL: [Dimension; 3] = [Dimension::Extractor, Dimension::Sampling, Dimension::Augmentation];

    fn name(self) -> &'static str {
        match self {
            Dimension::Extractor => "extractor",
            Dimension::Sampling => "sampling",
            Dimension::Augmentation => "augmentation",
        }
    }

    fn of(self, run: &RunResult) -> String {
        match self {
            Dimension::Extractor => run.spec.extractor.clone().unwrap_or_default(),
            Dimension::Sampling => run.spec.sampling.clone().unwrap_or_default(),
            Dimension::Augmentation => run.spec.augmentation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub label: String,
    /// (count, mean mAP@[.5:.95]) for counts with at least one finished seed.
    pub points: Vec<(usize, f64)>,
    /// Baselines are drawn as horizontal reference lines.
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Chart {
    pub path: PathBuf,
    pub title: String,
    /// The dimension that varies across lines, `None` for a single-spec chart.
    pub varying: Option<Dimension>,
    pub series: Vec<Series>,
}

fn mean_points(run: &RunResult) -> Vec<(usize, f64)> {
    run.counts.iter().filter_map(|c| c.map50_95.as_ref().map(|s| (c.count, s.mean))).collect()
}

/// Groups synthetic runs into charts. Each dimension with more than one value
/// gets charts with one line per value, the other dimensions held fixed; with
/// nothing varying there is a single `main` chart. Baselines and ablation of
/// the same augmentation level are added to every chart they apply to.
pub fn plan_charts(results: &[RunResult], dir: &Path) -> Vec<Chart> {
    let synthetic: Vec<&RunResult> = results.iter().filter(|r| r.spec.kind == SpecKind::Synthetic).collect();
    let varying: Vec<Dimension> = Dimension::ALL
        .into_iter()
        .filter(|d| synthetic.iter().map(|r| d.of(r)).collect::<BTreeSet<_>>().len() > 1)
        .collect();

    let extras = |levels: &BTreeSet<String>| -> Vec<Series> {
        results
            .iter()
            .filter(|r| r.spec.kind != SpecKind::Synthetic && levels.contains(&r.spec.augmentation))
            .map(|r| Series {
                label: r.spec.label(),
                points: mean_points(r),
                reference: matches!(r.spec.kind, SpecKind::BaselineSmall | SpecKind::BaselineLarge),
            })
            .filter(|s| !s.points.is_empty())
            .collect()
    };

    let mut charts = Vec::new();
    if varying.is_empty() {
        if synthetic.is_empty() && results.is_empty() {
            return charts;
        }
        let levels: BTreeSet<String> = results.iter().map(|r| r.spec.augmentation.clone()).collect();
        let mut series: Vec<Series> =
            synthetic.iter().map(|r| Series { label: r.spec.label(), points: mean_points(r), reference: false }).collect();
        series.extend(extras(&levels));
        charts.push(Chart { path: dir.join("main.svg"), title: "mAP@[.5:.95] vs synthetic count".into(), varying: None, series });
        return charts;
    }
    for d in varying {
        let others: Vec<Dimension> = Dimension::ALL.into_iter().filter(|o| *o != d).collect();
        let mut groups: BTreeMap<Vec<String>, Vec<&RunResult>> = BTreeMap::new();
        for r in &synthetic {
            groups.entry(others.iter().map(|o| o.of(r)).collect()).or_default().push(r);
        }
        for (fixed, runs) in groups {
            let levels: BTreeSet<String> = runs.iter().map(|r| r.spec.augmentation.clone()).collect();
            let mut series: Vec<Series> =
                runs.iter().map(|r| Series { label: d.of(r), points: mean_points(r), reference: false }).collect();
            series.extend(extras(&levels));
            let desc: Vec<String> = others.iter().zip(&fixed).map(|(o, v)| format!("{}={v}", o.name())).collect();
            let stem: String = std::iter::once(format!("by_{}", d.name()))
                .chain(fixed.iter().cloned())
                .collect::<Vec<_>>()
                .join("__")
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
                .collect();
            charts.push(Chart {
                path: dir.join(format!("{stem}.svg")),
                title: format!("by {} ({})", d.name(), desc.join(", ")),
                varying: Some(d),
                series,
            });
        }
    }
    charts
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn draw(chart: &Chart) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let xs: Vec<usize> = chart.series.iter().filter(|s| !s.reference).flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x_min = xs.iter().copied().min().unwrap_or(0) as f64;
    let mut x_max = xs.iter().copied().max().unwrap_or(1) as f64;
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    let y_max = chart
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(0.0_f64, f64::max)
        .max(1e-3)
        * 1.1;

    let root = SVGBackend::new(&chart.path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut ctx = ChartBuilder::on(&root)
        .caption(&chart.title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x_min..x_max, 0.0..y_max)?;
    ctx.configure_mesh().x_desc("synthetic images added").y_desc("mAP@[.5:.95]").draw()?;
    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = if s.reference {
            let y = s.points[0].1;
            vec![(x_min, y), (x_max, y)]
        } else {
            s.points.iter().map(|&(x, y)| (x as f64, y)).collect()
        };
        let style = if s.reference { color.stroke_width(1) } else { color.stroke_width(2) };
        ctx.draw_series(LineSeries::new(pts, style))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    ctx.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub csv: PathBuf,
    pub rows: usize,
    pub charts: Vec<Chart>,
}

/// Writes `results.csv` and one SVG per planned chart into `out`.
pub fn write_report(results: &[RunResult], out: &Path) -> Result<ReportSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join("results.csv");
    let rows = write_csv(results, &csv)?;
    let charts = plan_charts(results, out);
    for c in &charts {
        draw(c).map_err(|e| Error::Report(format!("{}: {e}", c.path.display())))?;
    }
    Ok(ReportSummary { csv, rows, charts })
}

/// Loads `results.json` from a matrix directory.
pub fn load_results(matrix_dir: &Path) -> Result<Vec<RunResult>> {
    let path = matrix_dir.join("results.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path, reason: e.to_string() })
}
