//! CSV / JSON / SVG exports of run records and learned-PRF heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use lgpe_core::pe::TopKTable;

use crate::runner::RunRecord;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
    SvgLinechart,
    PrfHeatmap,
}

impl FromStr for ExportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg-linechart" | "svg" => Ok(Self::SvgLinechart),
            "prf-heatmap" | "heatmap" => Ok(Self::PrfHeatmap),
            other => Err(HarnessError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub task: String,
    pub pe: String,
    pub seed: u64,
    pub scale: usize,
    pub accuracy: f64,
    pub checkpoint_step: usize,
}

/// One row per (run, scale) of each run's selected checkpoint. Failed runs
/// contribute no rows.
pub fn csv_rows(records: &[RunRecord]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for r in records {
        let Some(sel) = &r.selected else { continue };
        for (&scale, &accuracy) in sel.metrics.scales.iter().zip(&sel.metrics.accuracy) {
            rows.push(CsvRow {
                run_id: r.run_id.clone(),
                task: r.task.clone(),
                pe: r.pe.clone(),
                seed: r.seed,
                scale,
                accuracy,
                checkpoint_step: sel.step,
            });
        }
    }
    rows
}

pub const CSV_HEADER: &str = "run_id,task,pe,seed,scale,accuracy,checkpoint_step";

pub fn to_csv(records: &[RunRecord]) -> Result<String, HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for row in csv_rows(records) {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<CsvRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}

/// `run_id -> scale -> accuracy`.
pub type AccuracyMatrix = BTreeMap<String, BTreeMap<usize, f64>>;

pub fn accuracy_matrix(rows: &[CsvRow]) -> AccuracyMatrix {
    let mut m = AccuracyMatrix::new();
    for r in rows {
        m.entry(r.run_id.clone()).or_default().insert(r.scale, r.accuracy);
    }
    m
}

pub fn to_json(records: &[RunRecord]) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(records)?)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Accuracy vs scale, one line per PE (mean over seeds of the selected
/// checkpoints), with the train range shaded.
pub fn svg_linechart(records: &[RunRecord]) -> String {
    let mut per_pe: Vec<(String, BTreeMap<usize, Vec<f64>>)> = Vec::new();
    let mut train_max = 0;
    for r in records {
        let Some(sel) = &r.selected else { continue };
        train_max = train_max.max(r.train_scales[1]);
        let pos = match per_pe.iter().position(|(p, _)| *p == r.pe) {
            Some(p) => p,
            None => {
                per_pe.push((r.pe.clone(), BTreeMap::new()));
                per_pe.len() - 1
            }
        };
        for (&s, &a) in sel.metrics.scales.iter().zip(&sel.metrics.accuracy) {
            per_pe[pos].1.entry(s).or_default().push(a);
        }
    }
    let scales: Vec<usize> = per_pe.iter().flat_map(|(_, m)| m.keys().copied()).collect();
    let (lo, hi) = (
        scales.iter().copied().min().unwrap_or(1),
        scales.iter().copied().max().unwrap_or(1),
    );
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let x = |s: usize| pad + (w - 2.0 * pad) * if hi > lo { (s - lo) as f64 / (hi - lo) as f64 } else { 0.5 };
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    if train_max >= lo {
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#eeeeee"/>"##,
            x(lo),
            y(1.0),
            x(train_max.min(hi)) - x(lo),
            y(0.0) - y(1.0)
        );
    }
    let _ = writeln!(out, r#"<line x1="{pad}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, y(0.0), w - pad, y(0.0));
    let _ = writeln!(out, r#"<line x1="{pad}" y1="{:.1}" x2="{pad}" y2="{:.1}" stroke="black"/>"#, y(0.0), y(1.0));
    for s in lo..=hi {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{s}</text>"#, x(s), y(0.0) + 14.0);
    }
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t}</text>"#, pad - 4.0, y(t) + 4.0);
    }
    for (k, (pe, m)) in per_pe.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = m
            .iter()
            .map(|(&s, v)| format!("{:.1},{:.1}", x(s), y(v.iter().sum::<f64>() / v.len() as f64)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{pe}</text>"#, w - pad - 60.0, pad + 14.0 * k as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// Top-k learned-PRF values per (query, key) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfHeatmap {
    pub run_id: String,
    pub layer: usize,
    pub table: TopKTable,
}

/// Renders each cell as `k` horizontal bands, band `r` colored by the
/// rank-`r` relation value.
pub fn heatmap_svg(maps: &[PrfHeatmap]) -> String {
    let cell = 14.0;
    let mut out = String::new();
    let width: f64 = maps.iter().map(|m| m.table.len as f64 * cell + 20.0).sum::<f64>() + 20.0;
    let height = maps.iter().map(|m| m.table.len).max().unwrap_or(0) as f64 * cell + 40.0;
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#);
    let mut x0 = 20.0;
    for m in maps {
        let _ = writeln!(out, r#"<text x="{x0}" y="12">layer {}</text>"#, m.layer);
        let s_max = m.table.rows.iter().flatten().flatten().copied().max().unwrap_or(0).max(1) as f64;
        let band = cell / m.table.k.max(1) as f64;
        for (i, row) in m.table.rows.iter().enumerate() {
            for (j, vals) in row.iter().enumerate() {
                for (r, &v) in vals.iter().enumerate() {
                    let hue = 240.0 * (1.0 - v as f64 / s_max);
                    let _ = writeln!(
                        out,
                        r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{band:.2}" fill="hsl({hue:.0},70%,50%)"><title>({i},{j}) rank {r}: {v}</title></rect>"#,
                        x0 + j as f64 * cell,
                        20.0 + i as f64 * cell + r as f64 * band
                    );
                }
            }
        }
        x0 += m.table.len as f64 * cell + 20.0;
    }
    out.push_str("</svg>\n");
    out
}

/// Top-k tables of every layer of a saved LBPE checkpoint.
pub fn heatmaps_from_checkpoint(manifest: &Path, len: usize, k: usize, scale: Option<usize>) -> Result<Vec<PrfHeatmap>, HarnessError> {
    let (model, m) = lgpe_transformer::checkpoint::load(manifest)?;
    let run_id = m.blob.trim_end_matches(".ckpt").to_string();
    let mut out = Vec::new();
    for layer in 0..model.config.layers {
        let Some(prf) = model.prf_of_layer(layer) else {
            return Err(HarnessError::Config(format!("{run_id} has no learned PRF")));
        };
        let n = if model.config.pe.needs_scale() { Some(scale.unwrap_or(len)) } else { None };
        let table = prf.top_k(len, k, n)?;
        out.push(PrfHeatmap { run_id: run_id.clone(), layer, table });
    }
    Ok(out)
}
