//! Lattice geometry statistics and CSV/SVG exports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::glimpse::{effective_kernels, ControlState, Lattice};
use crate::model::Trace;
use crate::real::Real;
use crate::training::loss_fn;

/// Per-kernel geometry of a lattice and its rank correlations.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeStats {
    /// Distance of each kernel center from the lattice centroid.
    pub eccentricity: Vec<f64>,
    /// Distance to the nearest other kernel center.
    pub interval: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Spearman correlation of eccentricity with interval.
    pub rho_interval: f64,
    /// Spearman correlation of eccentricity with sigma.
    pub rho_sigma: f64,
}

impl LatticeStats {
    pub fn len(&self) -> usize {
        self.eccentricity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eccentricity.is_empty()
    }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Returns 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least two points"));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn lattice_stats<F: Real>(lattice: &Lattice<F>) -> Result<LatticeStats> {
    let k = lattice.len();
    if k < 2 {
        return Err(Error::invalid(format!("lattice statistics need at least 2 kernels, got {k}")));
    }
    let pts: Vec<[f64; 2]> = (0..k)
        .map(|i| {
            let [x, y] = lattice.offset(i);
            [x.as_f64(), y.as_f64()]
        })
        .collect();
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / k as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / k as f64;
    let eccentricity: Vec<f64> = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).collect();
    let interval: Vec<f64> = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let sigma: Vec<f64> = (0..k).map(|i| lattice.sigma(i).as_f64()).collect();
    Ok(LatticeStats {
        rho_interval: spearman(&eccentricity, &interval)?,
        rho_sigma: spearman(&eccentricity, &sigma)?,
        eccentricity,
        interval,
        sigma,
    })
}

/// One row of a lattice snapshot CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapshotRow {
    pub step: u64,
    pub index: usize,
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma: f64,
}

pub const SNAPSHOT_HEADER: &str = "step,i,mu_x,mu_y,sigma";

pub fn snapshot_rows<F: Real>(lattice: &Lattice<F>, step: u64) -> Vec<SnapshotRow> {
    (0..lattice.len())
        .map(|i| SnapshotRow {
            step,
            index: i,
            mu_x: lattice.mu[[i, 0]].as_f64(),
            mu_y: lattice.mu[[i, 1]].as_f64(),
            sigma: lattice.sigma(i).as_f64(),
        })
        .collect()
}

pub fn snapshot_csv<F: Real>(lattice: &Lattice<F>, step: u64) -> String {
    let mut out = format!("{SNAPSHOT_HEADER}\n");
    for r in snapshot_rows(lattice, step) {
        writeln!(out, "{},{},{},{},{}", r.step, r.index, r.mu_x, r.mu_y, r.sigma).unwrap();
    }
    out
}

pub fn parse_snapshot_csv(text: &str) -> Result<Vec<SnapshotRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SNAPSHOT_HEADER => {}
        other => {
            return Err(Error::invalid(format!(
                "snapshot CSV header must be `{SNAPSHOT_HEADER}`, found {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("snapshot CSV line {}: cannot parse {line:?}", n + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(SnapshotRow {
                step: f[0].parse().map_err(|_| bad())?,
                index: f[1].parse().map_err(|_| bad())?,
                mu_x: f[2].parse().map_err(|_| bad())?,
                mu_y: f[3].parse().map_err(|_| bad())?,
                sigma: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn svg_open(out: &mut String, width: f64, height: f64, scale: f64) {
    writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="-0.5 -0.5 {width} {height}">"#,
        width * scale,
        height * scale
    )
    .unwrap();
}

fn circle(out: &mut String, x: f64, y: f64, r: f64, color: &str) {
    writeln!(
        out,
        r#"<circle cx="{x:.4}" cy="{y:.4}" r="{r:.4}" fill="none" stroke="{color}" stroke-width="0.25"/>"#
    )
    .unwrap();
}

/// Lattice drawn in image coordinates at the initial glimpse (image center,
/// zoom 1): one circle of radius sigma per kernel.
pub fn snapshot_svg<F: Real>(lattice: &Lattice<F>, height: usize, width: usize, step: u64) -> String {
    let mut out = String::new();
    svg_open(&mut out, width as f64, height as f64, 4.0);
    writeln!(out, r#"<title>lattice at step {step}</title>"#).unwrap();
    writeln!(
        out,
        r#"<rect x="-0.5" y="-0.5" width="{width}" height="{height}" fill="white" stroke="black" stroke-width="0.25"/>"#
    )
    .unwrap();
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    for r in snapshot_rows(lattice, step) {
        circle(&mut out, cx + r.mu_x, cy + r.mu_y, r.sigma, "#c03020");
    }
    out.push_str("</svg>\n");
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `lattice_<step>.csv` and `lattice_<step>.svg` into `dir`.
pub fn write_snapshot<F: Real>(
    dir: &Path,
    lattice: &Lattice<F>,
    step: u64,
    height: usize,
    width: usize,
) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join(format!("lattice_{step:06}.csv"));
    let svg = dir.join(format!("lattice_{step:06}.svg"));
    write_file(&csv, &snapshot_csv(lattice, step))?;
    write_file(&svg, &snapshot_svg(lattice, height, width, step))?;
    Ok((csv, svg))
}

pub const ROLLOUT_HEADER: &str = "t,s_c_x,s_c_y,s_z,predicted_class,loss_t";

/// One row per timestep: the control the glimpse was taken at, the
/// prediction made after it and that step's loss.
pub fn rollout_csv<F: Real>(trace: &Trace<F>, label: usize) -> Result<String> {
    let loss = loss_fn(trace, label)?;
    let mut out = format!("{ROLLOUT_HEADER}\n");
    for (t, (s, l)) in trace.steps.iter().zip(&loss.per_step).enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t + 1,
            s.control.center[0].as_f64(),
            s.control.center[1].as_f64(),
            s.control.zoom.as_f64(),
            s.predicted,
            l.as_f64()
        )
        .unwrap();
    }
    Ok(out)
}

/// Image underlay (one gray square per non-zero pixel) with the effective
/// kernels of `control` on top.
pub fn rollout_frame_svg<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    caption: &str,
) -> Result<String> {
    let (height, width) = image.dim();
    let eff = effective_kernels(lattice, control)?;
    let mut out = String::new();
    svg_open(&mut out, width as f64, height as f64, 4.0);
    writeln!(out, "<title>{caption}</title>").unwrap();
    writeln!(
        out,
        r#"<rect x="-0.5" y="-0.5" width="{width}" height="{height}" fill="black"/>"#
    )
    .unwrap();
    for ((y, x), &v) in image.indexed_iter() {
        let v = v.as_f64().clamp(0.0, 1.0);
        if v > 0.0 {
            let g = (v * 255.0).round() as u8;
            writeln!(
                out,
                r#"<rect x="{}" y="{}" width="1" height="1" fill="rgb({g},{g},{g})"/>"#,
                x as f64 - 0.5,
                y as f64 - 0.5
            )
            .unwrap();
        }
    }
    for (c, s) in eff.centers.iter().zip(&eff.sigmas) {
        circle(&mut out, c[0].as_f64(), c[1].as_f64(), s.as_f64(), "#30c040");
    }
    writeln!(
        out,
        r##"<circle cx="{:.4}" cy="{:.4}" r="0.6" fill="#ff3030"/>"##,
        control.center[0].as_f64(),
        control.center[1].as_f64()
    )
    .unwrap();
    out.push_str("</svg>\n");
    Ok(out)
}

pub const CURVES_HEADER: &str = "i,eccentricity,interval,sigma";

pub fn curves_csv(stats: &LatticeStats) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for i in 0..stats.len() {
        writeln!(
            out,
            "{},{},{},{}",
            i, stats.eccentricity[i], stats.interval[i], stats.sigma[i]
        )
        .unwrap();
    }
    out
}

fn scatter_panel(out: &mut String, x0: f64, xs: &[f64], ys: &[f64], y_label: &str) {
    const W: f64 = 260.0;
    const H: f64 = 200.0;
    let top = 20.0;
    let max_x = xs.iter().copied().fold(0.0, f64::max).max(1e-9);
    let max_y = ys.iter().copied().fold(0.0, f64::max).max(1e-9);
    writeln!(
        out,
        r#"<rect x="{x0}" y="{top}" width="{W}" height="{H}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for (&x, &y) in xs.iter().zip(ys) {
        writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#2050c0"/>"##,
            x0 + x / max_x * W,
            top + H - y / max_y * H
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">eccentricity (px, max {max_x:.2})</text>"#,
        x0 + W / 2.0,
        top + H + 16.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="14" font-size="11">{y_label} (px, max {max_y:.2})</text>"#,
        x0
    )
    .unwrap();
}

/// Two scatter panels (interval and sigma against eccentricity) with both
/// rank correlations in the footer.
pub fn curves_svg(stats: &LatticeStats, title: &str) -> String {
    let mut out = String::from(
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="600" height="280" viewBox="0 0 600 280">
"#,
    );
    writeln!(out, "<title>{title}</title>").unwrap();
    out.push_str(r#"<rect x="0" y="0" width="600" height="280" fill="white"/>"#);
    out.push('\n');
    scatter_panel(&mut out, 20.0, &stats.eccentricity, &stats.interval, "sampling interval");
    scatter_panel(&mut out, 320.0, &stats.eccentricity, &stats.sigma, "kernel sigma");
    writeln!(
        out,
        r#"<text x="20" y="270" font-size="12">{title}: rho(ecc, interval) = {:.3}, rho(ecc, sigma) = {:.3}</text>"#,
        stats.rho_interval, stats.rho_sigma
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}
