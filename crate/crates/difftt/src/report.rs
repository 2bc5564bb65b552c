//! CSV tables, `key = value` summaries and small SVG plots.
//!
//! Floats are written in shortest round-trip form so identical runs give
//! byte-identical files.

use std::fmt::Write as _;

use difftt_core::metrics::{degradation_ratio, Averaging, DeltaRow, EvalReport};
use difftt_core::train::{JointReport, MetaReport};

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn averaging_name(a: Averaging) -> &'static str {
    match a {
        Averaging::Position => "position",
        Averaging::Cascade => "cascade",
    }
}

/// One row per cascade.
pub fn cascades_csv(r: &EvalReport) -> String {
    let mut s = String::from("id,truth,pred,sq_log_err,scored_positions,skipped_positions\n");
    for row in &r.rows {
        writeln!(
            s,
            "{},{:?},{:?},{:?},{},{}",
            row.id,
            row.truth,
            row.pred,
            row.sq_log_err,
            row.ranks.len(),
            row.skipped
        )
        .unwrap();
    }
    s
}

/// One row per scored position.
pub fn positions_csv(r: &EvalReport) -> String {
    let mut s = String::from("id,position,rank\n");
    for row in &r.rows {
        for (pos, rank) in &row.ranks {
            writeln!(s, "{},{pos},{rank}", row.id).unwrap();
        }
    }
    s
}

pub fn eval_summary(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "cascades = {}", r.rows.len()).unwrap();
    writeln!(s, "positions = {}", r.positions).unwrap();
    writeln!(s, "averaging = {}", averaging_name(r.averaging)).unwrap();
    writeln!(s, "msle = {:?}", r.msle).unwrap();
    for &(k, hits, map) in &r.ranking {
        writeln!(s, "hits@{k} = {hits:?}").unwrap();
        writeln!(s, "map@{k} = {map:?}").unwrap();
    }
    s
}

pub fn joint_epochs_csv(r: &JointReport) -> String {
    let mut s = String::from("epoch,train_primary,train_aux,valid_primary\n");
    for e in &r.epochs {
        writeln!(
            s,
            "{},{:?},{},{}",
            e.epoch,
            e.train_primary,
            opt(e.train_aux),
            opt(e.valid_primary)
        )
        .unwrap();
    }
    s
}

pub fn meta_epochs_csv(r: &MetaReport) -> String {
    let mut s = String::from("epoch,mean_meta,tasks,skipped,valid_meta\n");
    for e in &r.epochs {
        writeln!(
            s,
            "{},{:?},{},{},{}",
            e.epoch,
            e.mean_meta,
            e.tasks,
            e.skipped,
            opt(e.valid_meta)
        )
        .unwrap();
    }
    s
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut s = String::from("id,sq_log_err_with,sq_log_err_without,delta\n");
    for r in rows {
        writeln!(s, "{},{:?},{:?},{:?}", r.id, r.with, r.without, r.delta).unwrap();
    }
    s
}

pub fn delta_summary(rows: &[DeltaRow]) -> String {
    let n = rows.len().max(1) as f64;
    let mean = rows.iter().map(|r| r.delta).sum::<f64>() / n;
    let worse = rows.iter().filter(|r| r.delta > 0.0).count();
    let better = rows.iter().filter(|r| r.delta < 0.0).count();
    let mut s = String::new();
    writeln!(s, "cascades = {}", rows.len()).unwrap();
    writeln!(s, "mean_delta = {mean:?}").unwrap();
    writeln!(s, "improved = {better}").unwrap();
    writeln!(s, "degraded = {worse}").unwrap();
    writeln!(s, "degradation_ratio = {:?}", degradation_ratio(rows)).unwrap();
    s
}

/// `(steps, msle)` pairs of a step-count sweep.
pub fn sweep_csv(points: &[(usize, f64)]) -> String {
    let mut s = String::from("steps,msle\n");
    for (d, m) in points {
        writeln!(s, "{d},{m:?}").unwrap();
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{title}</text>"#, W / 2.0).unwrap();
    writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    )
    .unwrap();
    writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD).unwrap();
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Histogram of per-cascade ΔMSLE.
pub fn delta_histogram_svg(rows: &[DeltaRow], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = range(rows.iter().map(|r| r.delta));
    let mut counts = vec![0usize; bins];
    for r in rows {
        let b = (((r.delta - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let mut s = svg_open("per-cascade change in squared log error");
    let bw = (W - 2.0 * PAD) / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = (H - 2.0 * PAD) * c as f64 / top;
        writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="steelblue"/>"#,
            PAD + i as f64 * bw,
            H - PAD - h,
            bw * 0.95
        )
        .unwrap();
    }
    if lo < 0.0 && hi > 0.0 {
        let x = PAD + (W - 2.0 * PAD) * (-lo) / (hi - lo);
        writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{PAD}" x2="{x:.2}" y2="{}" stroke="red" stroke-dasharray="4"/>"#,
            H - PAD
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{PAD}" y="{}">{lo:.3e}</text>"#, H - PAD + 15.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.3e}</text>"#, W - PAD, H - PAD + 15.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{top}</text>"#, PAD - 4.0, PAD + 4.0).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Test MSLE against the number of adaptation steps.
pub fn sweep_svg(points: &[(usize, f64)]) -> String {
    let (x0, x1) = range(points.iter().map(|p| p.0 as f64));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let px = |x: f64| PAD + (W - 2.0 * PAD) * (x - x0) / (x1 - x0);
    let py = |y: f64| H - PAD - (H - 2.0 * PAD) * (y - y0) / (y1 - y0);
    let mut s = svg_open("test MSLE by adaptation steps");
    let path: Vec<String> = points
        .iter()
        .map(|&(d, m)| format!("{:.2},{:.2}", px(d as f64), py(m)))
        .collect();
    writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    )
    .unwrap();
    for &(d, m) in points {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/><text x="{:.2}" y="{}" text-anchor="middle">{d}</text>"#,
            px(d as f64),
            py(m),
            px(d as f64),
            H - PAD + 15.0
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4e}</text>"#, PAD - 4.0, H - PAD).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.4e}</text>"#, PAD - 4.0, PAD + 4.0).unwrap();
    s.push_str("</svg>\n");
    s
}
