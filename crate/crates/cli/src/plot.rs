use anyhow::Context;
use image::{Rgb, RgbImage};
use m2m::evalbench::{routing_summary, ParetoReport};
use m2m::training::RunLog;
use std::path::{Path, PathBuf};

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Scatter of forward time (x) against relative L2 (y); efficient points in orange, others in blue,
/// frontier points joined by a line.
pub fn pareto_scatter(report: &ParetoReport, path: &Path) -> anyhow::Result<()> {
    let (w, h, margin) = (640u32, 480u32, 40u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    fill_rect(&mut img, margin, h - margin, w - 2 * margin, 1, BLACK);
    fill_rect(&mut img, margin, margin, 1, h - 2 * margin, BLACK);
    let xs: Vec<f64> = report.rows.iter().map(|r| r.record.forward_ms).collect();
    let ys: Vec<f64> = report.rows.iter().map(|r| r.record.rel_l2).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(hi.abs() * 0.05).max(1e-12);
        (lo - pad, hi + pad)
    };
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let span_x = f64::from(w - 2 * margin);
    let span_y = f64::from(h - 2 * margin);
    let to_px = |x: f64, y: f64| {
        let px = f64::from(margin) + (x - x0) / (x1 - x0) * span_x;
        let py = f64::from(h - margin) - (y - y0) / (y1 - y0) * span_y;
        (px, py)
    };
    let mut frontier: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter(|r| r.efficient)
        .map(|r| to_px(r.record.forward_ms, r.record.rel_l2))
        .collect();
    frontier.sort_by(|a, b| a.0.total_cmp(&b.0));
    for pair in frontier.windows(2) {
        let steps = ((pair[1].0 - pair[0].0).abs().max((pair[1].1 - pair[0].1).abs()) as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = pair[0].0 + t * (pair[1].0 - pair[0].0);
            let y = pair[0].1 + t * (pair[1].1 - pair[0].1);
            fill_rect(&mut img, x as u32, y as u32, 1, 1, Rgb([200, 200, 200]));
        }
    }
    for row in &report.rows {
        let (px, py) = to_px(row.record.forward_ms, row.record.rel_l2);
        let c = if row.efficient { PALETTE[1] } else { PALETTE[0] };
        fill_rect(&mut img, (px as u32).saturating_sub(4), (py as u32).saturating_sub(4), 9, 9, Rgb(c));
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Per-epoch router weights: one row per epoch, one block of `M` columns per patch position,
/// darker meaning higher probability.
pub fn router_heatmap(log: &RunLog, path: &Path) -> anyhow::Result<()> {
    let summary = routing_summary(&log.snapshots())?;
    let epochs = summary.weights.len() as u32;
    let (s2, m) = summary.weights[0].dim();
    let cell = 8u32;
    let gap = 2u32;
    let width = s2 as u32 * (m as u32 * cell + gap);
    let mut img = RgbImage::from_pixel(width.max(1), (epochs * cell).max(1), WHITE);
    for (e, weights) in summary.weights.iter().enumerate() {
        for p in 0..s2 {
            for j in 0..m {
                let v = (1.0 - weights[[p, j]].clamp(0.0, 1.0)) * 255.0;
                let x = p as u32 * (m as u32 * cell + gap) + j as u32 * cell;
                fill_rect(&mut img, x, e as u32 * cell, cell, cell, Rgb([v as u8, v as u8, 255]));
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Argmax expert per patch position (columns) over epochs (rows), colour-coded by expert index.
pub fn argmax_trajectory(log: &RunLog, path: &Path) -> anyhow::Result<()> {
    let summary = routing_summary(&log.snapshots())?;
    let cell = 8u32;
    let cols = summary.argmax.first().map_or(0, Vec::len) as u32;
    let mut img = RgbImage::from_pixel((cols * cell).max(1), (summary.argmax.len() as u32 * cell).max(1), WHITE);
    for (e, row) in summary.argmax.iter().enumerate() {
        for (p, &j) in row.iter().enumerate() {
            let c = Rgb(PALETTE[j % PALETTE.len()]);
            fill_rect(&mut img, p as u32 * cell, e as u32 * cell, cell, cell, c);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn plot(report: Option<&Path>, run_log: Option<&Path>, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    if let Some(p) = report {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let report: ParetoReport = serde_json::from_str(&text)?;
        let target = out.join("pareto.png");
        pareto_scatter(&report, &target)?;
        written.push(target);
    }
    if let Some(p) = run_log {
        let log = RunLog::read_json(p)?;
        for (name, f) in [
            ("router_weights.png", router_heatmap as fn(&RunLog, &Path) -> anyhow::Result<()>),
            ("router_argmax.png", argmax_trajectory),
        ] {
            let target = out.join(name);
            f(&log, &target)?;
            written.push(target);
        }
    }
    Ok(written)
}
