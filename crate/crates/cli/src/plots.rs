//! Plot-data emission. CSV files are the contract; small self-contained
//! SVG renderings accompany them for quick inspection.

use std::path::Path;

use viplab_core::metrics::{
    histogram_bin_edges, LabeledEmbeddings, Projection, SimilarityReport, HISTOGRAM_BINS,
};

use crate::ladder::LadderReport;
use crate::runner::RunRecord;
use crate::sweep::SweepReport;

/// Training-curve CSV: one row per evaluation point.
pub fn training_curve_csv(record: &RunRecord) -> String {
    let mut out = String::from(
        "epoch,total,cls,l1,giou,align,distill,aux,enc_cls,visual_g_map,visual_i_map,iisr\n",
    );
    for m in &record.metrics {
        let l = &m.mean_losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.epoch,
            l.total,
            l.cls,
            l.l1,
            l.giou,
            l.align,
            l.distill,
            l.aux,
            l.enc_cls,
            m.visual_g_map,
            m.visual_i_map,
            m.iisr.map(|v| v.to_string()).unwrap_or_else(|| "nan".into()),
        ));
    }
    out
}

/// Similarity report CSV: histogram rows plus the summary ratio row.
pub fn similarity_report_csv(report: &SimilarityReport<f64>) -> String {
    let mut out = String::from("kind,bin_lo,bin_hi,count\n");
    for bin in 0..HISTOGRAM_BINS {
        let (lo, hi) = histogram_bin_edges(bin);
        out.push_str(&format!("intra,{lo},{hi},{}\n", report.intra_histogram[bin]));
    }
    for bin in 0..HISTOGRAM_BINS {
        let (lo, hi) = histogram_bin_edges(bin);
        out.push_str(&format!("inter,{lo},{hi},{}\n", report.inter_histogram[bin]));
    }
    let value = report
        .iisr
        .as_ref()
        .map(|i| i.value.to_string())
        .unwrap_or_else(|| "nan".into());
    out.push_str(&format!("iisr, {value}\n"));
    out
}

/// Projection CSV: label, x, y.
pub fn projection_csv<L: std::fmt::Display>(
    data: &LabeledEmbeddings<f64, L>,
    projection: &Projection,
) -> String {
    let mut out = String::from("label,x,y\n");
    for (i, label) in data.labels.iter().enumerate() {
        out.push_str(&format!(
            "{label},{},{}\n",
            projection.coords[[i, 0]],
            projection.coords[[i, 1]]
        ));
    }
    out
}

// ----------------------------------------------------------------- svg

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn svg_header() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn axis_map(value: f64, lo: f64, hi: f64, pixel_lo: f64, pixel_hi: f64) -> f64 {
    if (hi - lo).abs() < 1e-12 {
        return (pixel_lo + pixel_hi) / 2.0;
    }
    pixel_lo + (value - lo) / (hi - lo) * (pixel_hi - pixel_lo)
}

/// Line chart of one or more named series sharing an x axis.
pub fn line_chart_svg(series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let mut svg = svg_header();
    let xs: Vec<f64> = series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)).collect();
    if xs.is_empty() {
        return svg + "</svg>\n";
    }
    let (x_lo, x_hi) = (
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = (
        ys.iter().copied().fold(f64::INFINITY, f64::min).min(0.0),
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>\n",
        SVG_H - MARGIN,
        SVG_W - MARGIN,
        SVG_H - MARGIN,
        SVG_H - MARGIN
    ));
    for (idx, (name, points)) in series.iter().enumerate() {
        let color = colors[idx % colors.len()];
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| {
                format!(
                    "{},{}",
                    axis_map(*x, x_lo, x_hi, MARGIN, SVG_W - MARGIN),
                    axis_map(*y, y_lo, y_hi, SVG_H - MARGIN, MARGIN)
                )
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>\n",
            SVG_W - MARGIN + 4.0,
            MARGIN + 14.0 * idx as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Paired histogram (intra vs inter) over the fixed [-1, 1] bins.
pub fn histogram_svg(report: &SimilarityReport<f64>) -> String {
    let mut svg = svg_header();
    let max_count = report
        .intra_histogram
        .iter()
        .chain(report.inter_histogram.iter())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let bin_width = (SVG_W - 2.0 * MARGIN) / HISTOGRAM_BINS as f64;
    for bin in 0..HISTOGRAM_BINS {
        let x = MARGIN + bin as f64 * bin_width;
        for (count, color, offset) in [
            (report.intra_histogram[bin], "#1f77b4", 0.0),
            (report.inter_histogram[bin], "#ff7f0e", bin_width / 2.0),
        ] {
            let h = count as f64 / max_count * (SVG_H - 2.0 * MARGIN);
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{h}\" fill=\"{color}\" \
                 fill-opacity=\"0.7\"/>\n",
                x + offset,
                SVG_H - MARGIN - h,
                bin_width / 2.0
            ));
        }
    }
    svg.push_str(
        "<text x=\"60\" y=\"30\" fill=\"#1f77b4\" font-size=\"12\">intra</text>\n\
         <text x=\"110\" y=\"30\" fill=\"#ff7f0e\" font-size=\"12\">inter</text>\n</svg>\n",
    );
    svg
}

/// Scatter of 2-D projected embeddings, colored by label.
pub fn projection_svg<L: std::fmt::Display + PartialEq>(
    data: &LabeledEmbeddings<f64, L>,
    projection: &Projection,
) -> String {
    let mut svg = svg_header();
    let coords = &projection.coords;
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..coords.nrows() {
        x_lo = x_lo.min(coords[[i, 0]]);
        x_hi = x_hi.max(coords[[i, 0]]);
        y_lo = y_lo.min(coords[[i, 1]]);
        y_hi = y_hi.max(coords[[i, 1]]);
    }
    let colors = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
    ];
    let mut seen: Vec<String> = Vec::new();
    for i in 0..coords.nrows() {
        let label = data.labels[i].to_string();
        let color_idx = match seen.iter().position(|l| *l == label) {
            Some(idx) => idx,
            None => {
                seen.push(label.clone());
                seen.len() - 1
            }
        };
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\" fill-opacity=\"0.8\"/>\n",
            axis_map(coords[[i, 0]], x_lo, x_hi, MARGIN, SVG_W - MARGIN),
            axis_map(coords[[i, 1]], y_lo, y_hi, SVG_H - MARGIN, MARGIN),
            colors[color_idx % colors.len()]
        ));
    }
    for (idx, label) in seen.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\" font-size=\"12\">{label}</text>\n",
            SVG_W - MARGIN + 4.0,
            MARGIN + 14.0 * idx as f64,
            colors[idx % colors.len()]
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write the ladder's plot files into a directory.
pub fn export_ladder(report: &LadderReport, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("iisr_vs_map.csv"),
        crate::ladder::iisr_vs_map_csv(report),
    )?;
    std::fs::write(
        out.join("scl_comparison.csv"),
        crate::ladder::scl_comparison_csv(report),
    )?;
    let map_series: Vec<(f64, f64)> = report
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64, r.mean_visual_g_map))
        .collect();
    let iisr_series: Vec<(f64, f64)> = report
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64, r.mean_iisr))
        .collect();
    std::fs::write(
        out.join("iisr_vs_map.svg"),
        line_chart_svg(&[("mAP", map_series), ("IISR", iisr_series)]),
    )?;
    Ok(())
}

/// Write the sweep's plot files into a directory.
pub fn export_sweep(report: &SweepReport, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("sweep.csv"), crate::sweep::sweep_csv(report))?;
    std::fs::write(
        out.join("sweep_curve.csv"),
        crate::sweep::sweep_curve_csv(report),
    )?;
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    for mode in ["full", "selective"] {
        let points: Vec<(f64, f64)> = report
            .curves
            .iter()
            .filter(|p| p.mode == mode)
            .map(|p| (p.n as f64, p.mean_ap))
            .collect();
        series.push((mode, points));
    }
    std::fs::write(out.join("sweep_curve.svg"), line_chart_svg(&series))?;
    Ok(())
}
