//! SVG panels straight from sweep output: loss curves per optimizer
//! with the SVD baseline, plus gradient-norm, gradient-consistency,
//! and effective-rank panels for the best run of each model kind.
//!
//! The SVG is generated here byte-deterministically (fixed geometry,
//! fixed `{:.3}` coordinate formatting), so plots can be snapshot
//! tested.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::ModelKind;
use super::sweep::{Manifest, RunEntry};
use crate::diagnostics::{read_csv_rows, StepRow};
use crate::error::{Error, Result};

pub const PANEL_WIDTH: f64 = 860.0;
pub const PANEL_HEIGHT: f64 = 520.0;
pub const MARGIN_LEFT: f64 = 70.0;
pub const MARGIN_RIGHT: f64 = 20.0;
pub const MARGIN_TOP: f64 = 40.0;
pub const MARGIN_BOTTOM: f64 = 50.0;

/// Log-10 y-axis mapping from a value domain onto pixel rows (SVG y
/// grows downward, so `lo` maps to the bottom edge).
#[derive(Clone, Copy, Debug)]
pub struct LogAxis {
    pub lo: f64,
    pub hi: f64,
    pub px_bottom: f64,
    pub px_top: f64,
}

impl LogAxis {
    pub fn new(lo: f64, hi: f64) -> Self {
        LogAxis {
            lo,
            hi,
            px_bottom: PANEL_HEIGHT - MARGIN_BOTTOM,
            px_top: MARGIN_TOP,
        }
    }

    pub fn map(&self, v: f64) -> f64 {
        let v = v.clamp(self.lo, self.hi);
        let frac = (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10());
        self.px_bottom + frac * (self.px_top - self.px_bottom)
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearAxis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl LinearAxis {
    fn map(&self, v: f64) -> f64 {
        let v = v.clamp(self.lo.min(self.hi), self.hi.max(self.lo));
        let frac = (v - self.lo) / (self.hi - self.lo);
        self.px_lo + frac * (self.px_hi - self.px_lo)
    }
}

/// y-domain for a loss panel: half the smallest positive value (or the
/// SVD error, whichever is lower) up to twice the largest.
pub fn loss_domain(min_positive: f64, max_value: f64) -> (f64, f64) {
    let lo = (min_positive / 2.0).max(1e-300);
    let hi = (max_value * 2.0).max(lo * 10.0);
    (lo, hi)
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            w = PANEL_WIDTH,
            h = PANEL_HEIGHT
        ));
        body.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        body.push_str(&format!(
            "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            fmt(PANEL_WIDTH / 2.0),
            title
        ));
        Svg { body }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64, dash: Option<&str>, id: Option<&str>) {
        let id_attr = id.map(|s| format!(" id=\"{s}\"")).unwrap_or_default();
        let dash_attr = dash
            .map(|d| format!(" stroke-dasharray=\"{d}\""))
            .unwrap_or_default();
        self.body.push_str(&format!(
            "<line{id_attr} x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"{width}\"{dash_attr}/>\n",
            fmt(x1), fmt(y1), fmt(x2), fmt(y2)
        ));
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dash: Option<&str>) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
        let dash_attr = dash
            .map(|d| format!(" stroke-dasharray=\"{d}\""))
            .unwrap_or_default();
        self.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\"{dash_attr}/>\n",
            coords.join(" ")
        ));
    }

    fn text(&mut self, x: f64, y: f64, size: u32, anchor: &str, content: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"{size}\" text-anchor=\"{anchor}\">{content}</text>\n",
            fmt(x),
            fmt(y)
        ));
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn lerp_color(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let mix = |x: u8, y: u8| (x as f64 + t * (y as f64 - x as f64)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Blue gradient for generated models, orange gradient for free ones,
/// indexed by the lr's rank within the grid.
fn run_color(kind: ModelKind, lr_index: usize, lr_count: usize) -> String {
    let t = if lr_count <= 1 {
        0.0
    } else {
        lr_index as f64 / (lr_count - 1) as f64
    };
    match kind {
        ModelKind::Opmf => lerp_color((8, 48, 160), (140, 190, 255), t),
        ModelKind::Mf => lerp_color((216, 108, 0), (255, 210, 160), t),
    }
}

const SVD_COLOR: &str = "#d62728";

fn draw_frame(svg: &mut Svg) {
    svg.line(
        MARGIN_LEFT,
        PANEL_HEIGHT - MARGIN_BOTTOM,
        PANEL_WIDTH - MARGIN_RIGHT,
        PANEL_HEIGHT - MARGIN_BOTTOM,
        "black",
        1.0,
        None,
        None,
    );
    svg.line(
        MARGIN_LEFT,
        MARGIN_TOP,
        MARGIN_LEFT,
        PANEL_HEIGHT - MARGIN_BOTTOM,
        "black",
        1.0,
        None,
        None,
    );
}

fn draw_x_ticks(svg: &mut Svg, axis: &LinearAxis, label: &str) {
    for i in 0..=5 {
        let v = axis.lo + (axis.hi - axis.lo) * i as f64 / 5.0;
        let x = axis.map(v);
        svg.line(x, PANEL_HEIGHT - MARGIN_BOTTOM, x, PANEL_HEIGHT - MARGIN_BOTTOM + 5.0, "black", 1.0, None, None);
        svg.text(x, PANEL_HEIGHT - MARGIN_BOTTOM + 20.0, 11, "middle", &format!("{}", v.round() as i64));
    }
    svg.text(PANEL_WIDTH / 2.0, PANEL_HEIGHT - 12.0, 12, "middle", label);
}

fn draw_log_y_ticks(svg: &mut Svg, axis: &LogAxis, label: &str) {
    let k_lo = axis.lo.log10().ceil() as i32;
    let k_hi = axis.hi.log10().floor() as i32;
    for k in k_lo..=k_hi {
        let v = 10f64.powi(k);
        let y = axis.map(v);
        svg.line(MARGIN_LEFT - 5.0, y, MARGIN_LEFT, y, "black", 1.0, None, None);
        svg.text(MARGIN_LEFT - 8.0, y + 4.0, 11, "end", &format!("1e{k}"));
    }
    svg.text(16.0, PANEL_HEIGHT / 2.0, 12, "middle", label);
}

fn draw_linear_y_ticks(svg: &mut Svg, lo: f64, hi: f64, axis: &LinearAxis, label: &str) {
    for i in 0..=5 {
        let v = lo + (hi - lo) * i as f64 / 5.0;
        let y = axis.map(v);
        svg.line(MARGIN_LEFT - 5.0, y, MARGIN_LEFT, y, "black", 1.0, None, None);
        svg.text(MARGIN_LEFT - 8.0, y + 4.0, 11, "end", &format!("{v:.2}"));
    }
    svg.text(16.0, PANEL_HEIGHT / 2.0, 12, "middle", label);
}

type RunRows<'a> = (&'a RunEntry, &'a [StepRow]);

fn loss_panel(manifest: &Manifest, optimizer_label: &str, runs: &[RunRows]) -> String {
    let mut min_pos = f64::INFINITY;
    let mut max_v = 0.0f64;
    if manifest.svd_error > 0.0 {
        min_pos = manifest.svd_error;
        max_v = manifest.svd_error;
    }
    for (_, rows) in runs {
        for r in rows.iter() {
            if r.loss > 0.0 {
                min_pos = min_pos.min(r.loss);
                max_v = max_v.max(r.loss);
            }
        }
    }
    let (lo, hi) = loss_domain(min_pos, max_v);
    let y = LogAxis::new(lo, hi);
    let steps = runs
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.step))
        .max()
        .unwrap_or(1) as f64;
    let x = LinearAxis {
        lo: 0.0,
        hi: steps.max(1.0),
        px_lo: MARGIN_LEFT,
        px_hi: PANEL_WIDTH - MARGIN_RIGHT,
    };

    let mut svg = Svg::new(&format!(
        "{} loss ({optimizer_label}); red line = rank-{} SVD error",
        manifest.experiment, manifest.config.rank
    ));
    draw_frame(&mut svg);
    draw_x_ticks(&mut svg, &x, "step");
    draw_log_y_ticks(&mut svg, &y, "loss");

    let lr_count = manifest.config.lrs.len();
    for (entry, rows) in runs {
        let lr_index = manifest
            .config
            .lrs
            .iter()
            .position(|&lr| lr == entry.lr)
            .unwrap_or(0);
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.loss > 0.0)
            .map(|r| (x.map(r.step as f64), y.map(r.loss)))
            .collect();
        svg.polyline(&pts, &run_color(entry.model_kind, lr_index, lr_count), 1.0, None);
    }
    // The Eckart-Young baseline.
    let ysvd = y.map(manifest.svd_error);
    svg.line(
        MARGIN_LEFT,
        ysvd,
        PANEL_WIDTH - MARGIN_RIGHT,
        ysvd,
        SVD_COLOR,
        1.5,
        None,
        Some("svd-baseline"),
    );
    svg.finish()
}

/// Best run (per the manifest comparison) of each kind under the given
/// optimizer, first seed.
fn best_runs<'a>(
    manifest: &'a Manifest,
    rows_by_fp: &'a BTreeMap<String, Vec<StepRow>>,
) -> Vec<RunRows<'a>> {
    let optimizer = manifest.config.optimizers[0];
    let seed = manifest.config.seeds[0];
    let mut out = Vec::new();
    for comp in &manifest.comparisons {
        if comp.optimizer != optimizer {
            continue;
        }
        if let Some(entry) = manifest.runs.iter().find(|r| {
            r.model_kind == comp.model_kind
                && r.optimizer == optimizer
                && r.lr == comp.best_lr
                && r.seed == seed
        }) {
            if let Some(rows) = rows_by_fp.get(&entry.fingerprint) {
                out.push((entry, rows.as_slice()));
            }
        }
    }
    out
}

fn series_label(entry: &RunEntry) -> String {
    format!("{} lr={:e}", entry.model_kind.as_str(), entry.lr)
}

fn grad_norm_panel(manifest: &Manifest, runs: &[RunRows]) -> String {
    let mut min_pos = f64::INFINITY;
    let mut max_v = 0.0f64;
    for (_, rows) in runs {
        for r in rows.iter() {
            if r.grad_norm > 0.0 {
                min_pos = min_pos.min(r.grad_norm);
                max_v = max_v.max(r.grad_norm);
            }
        }
    }
    if !min_pos.is_finite() {
        min_pos = 1e-12;
        max_v = 1.0;
    }
    let (lo, hi) = loss_domain(min_pos, max_v);
    let y = LogAxis::new(lo, hi);
    let steps = runs.iter().flat_map(|(_, r)| r.iter().map(|s| s.step)).max().unwrap_or(1) as f64;
    let x = LinearAxis {
        lo: 0.0,
        hi: steps.max(1.0),
        px_lo: MARGIN_LEFT,
        px_hi: PANEL_WIDTH - MARGIN_RIGHT,
    };
    let mut svg = Svg::new(&format!("{} gradient norm (best lr per kind)", manifest.experiment));
    draw_frame(&mut svg);
    draw_x_ticks(&mut svg, &x, "step");
    draw_log_y_ticks(&mut svg, &y, "||grad||");
    for (i, (entry, rows)) in runs.iter().enumerate() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.grad_norm > 0.0)
            .map(|r| (x.map(r.step as f64), y.map(r.grad_norm)))
            .collect();
        let color = run_color(entry.model_kind, 0, 1);
        svg.polyline(&pts, &color, 1.5, None);
        svg.text(
            PANEL_WIDTH - MARGIN_RIGHT - 8.0,
            MARGIN_TOP + 16.0 + 16.0 * i as f64,
            11,
            "end",
            &series_label(entry),
        );
    }
    svg.finish()
}

fn consistency_panel(manifest: &Manifest, runs: &[RunRows]) -> String {
    let steps = runs.iter().flat_map(|(_, r)| r.iter().map(|s| s.step)).max().unwrap_or(1) as f64;
    let x = LinearAxis {
        lo: 0.0,
        hi: steps.max(1.0),
        px_lo: MARGIN_LEFT,
        px_hi: PANEL_WIDTH - MARGIN_RIGHT,
    };
    let y = LinearAxis {
        lo: -1.05,
        hi: 1.05,
        px_lo: PANEL_HEIGHT - MARGIN_BOTTOM,
        px_hi: MARGIN_TOP,
    };
    let mut svg = Svg::new(&format!(
        "{} gradient consistency at lag 10 (solid: parameter space, dashed: product space)",
        manifest.experiment
    ));
    draw_frame(&mut svg);
    draw_x_ticks(&mut svg, &x, "step");
    draw_linear_y_ticks(&mut svg, -1.0, 1.0, &y, "cosine");
    for (i, (entry, rows)) in runs.iter().enumerate() {
        let color = run_color(entry.model_kind, 0, 1);
        let param_pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.grad_cos_param.map(|c| (x.map(r.step as f64), y.map(c))))
            .collect();
        svg.polyline(&param_pts, &color, 1.5, None);
        let prod_pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.grad_cos_product.map(|c| (x.map(r.step as f64), y.map(c))))
            .collect();
        svg.polyline(&prod_pts, &color, 1.0, Some("5,4"));
        svg.text(
            PANEL_WIDTH - MARGIN_RIGHT - 8.0,
            MARGIN_TOP + 16.0 + 16.0 * i as f64,
            11,
            "end",
            &series_label(entry),
        );
    }
    svg.finish()
}

fn effective_rank_panel(manifest: &Manifest, runs: &[RunRows]) -> String {
    let mut max_v: f64 = manifest.svd_truncation_eff_rank;
    for (_, rows) in runs {
        for r in rows.iter() {
            if let Some(er) = r.eff_rank_sum {
                max_v = max_v.max(er);
            }
        }
    }
    let steps = runs.iter().flat_map(|(_, r)| r.iter().map(|s| s.step)).max().unwrap_or(1) as f64;
    let x = LinearAxis {
        lo: 0.0,
        hi: steps.max(1.0),
        px_lo: MARGIN_LEFT,
        px_hi: PANEL_WIDTH - MARGIN_RIGHT,
    };
    let y = LinearAxis {
        lo: 0.0,
        hi: (max_v * 1.1).max(1.0),
        px_lo: PANEL_HEIGHT - MARGIN_BOTTOM,
        px_hi: MARGIN_TOP,
    };
    let mut svg = Svg::new(&format!(
        "{} effective rank of BA (red dashes: rank-{} SVD truncation)",
        manifest.experiment, manifest.config.rank
    ));
    draw_frame(&mut svg);
    draw_x_ticks(&mut svg, &x, "step");
    draw_linear_y_ticks(&mut svg, 0.0, (max_v * 1.1).max(1.0), &y, "eff rank");
    for (i, (entry, rows)) in runs.iter().enumerate() {
        let color = run_color(entry.model_kind, 0, 1);
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.eff_rank_sum.map(|er| (x.map(r.step as f64), y.map(er))))
            .collect();
        svg.polyline(&pts, &color, 1.5, None);
        svg.text(
            PANEL_WIDTH - MARGIN_RIGHT - 8.0,
            MARGIN_TOP + 16.0 + 16.0 * i as f64,
            11,
            "end",
            &series_label(entry),
        );
    }
    let ytrunc = y.map(manifest.svd_truncation_eff_rank);
    svg.line(
        MARGIN_LEFT,
        ytrunc,
        PANEL_WIDTH - MARGIN_RIGHT,
        ytrunc,
        SVD_COLOR,
        1.5,
        Some("6,4"),
        Some("svd-eff-rank"),
    );
    svg.finish()
}

/// Renders every panel for the manifest into the manifest's directory
/// and returns the written paths. An empty manifest writes nothing.
pub fn plot_manifest(manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    if manifest.runs.is_empty() {
        println!("manifest has no runs; nothing to plot");
        return Ok(Vec::new());
    }

    let mut rows_by_fp: BTreeMap<String, Vec<StepRow>> = BTreeMap::new();
    for run in &manifest.runs {
        let csv_path = base.join(&run.csv);
        if !csv_path.exists() {
            return Err(Error::contract(format!(
                "plot: missing CSV for run '{}' at {}",
                run.fingerprint,
                csv_path.display()
            )));
        }
        rows_by_fp.insert(run.fingerprint.clone(), read_csv_rows(&csv_path)?);
    }

    let mut written = Vec::new();
    let mut write = |name: String, content: String| -> Result<()> {
        let path = base.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
        Ok(())
    };

    for &optimizer in &manifest.config.optimizers {
        let runs: Vec<RunRows> = manifest
            .runs
            .iter()
            .filter(|r| r.optimizer == optimizer)
            .map(|r| (r, rows_by_fp[&r.fingerprint].as_slice()))
            .collect();
        if runs.is_empty() {
            continue;
        }
        write(
            format!("{}_loss_{}.svg", manifest.experiment, optimizer.as_str()),
            loss_panel(&manifest, optimizer.as_str(), &runs),
        )?;
    }

    let best = best_runs(&manifest, &rows_by_fp);
    write(
        format!("{}_grad_norm.svg", manifest.experiment),
        grad_norm_panel(&manifest, &best),
    )?;
    write(
        format!("{}_grad_consistency.svg", manifest.experiment),
        consistency_panel(&manifest, &best),
    )?;
    write(
        format!("{}_effective_rank.svg", manifest.experiment),
        effective_rank_panel(&manifest, &best),
    )?;

    Ok(written)
}
