//! Hand-written SVG figures: training curves, scalogram heatmaps and
//! energy spectra. Output carries no timestamps, so it is byte-stable.

use std::fmt::Write;

use crate::analysis::Spectrum;
use crate::error::{Error, Result};
use crate::gates::GateVariant;
use crate::trainer::MetricsRow;
use crate::wavelets::Scalogram;

/// Fixed colour per variant.
pub fn variant_color(v: GateVariant) -> &'static str {
    match v {
        GateVariant::Base => "#444444",
        GateVariant::Ega1 => "#d62728",
        GateVariant::Ega2 => "#ff7f0e",
        GateVariant::Ega4 => "#bcbd22",
        GateVariant::Egac => "#1f77b4",
        GateVariant::Egam => "#9467bd",
        GateVariant::Egadb2 => "#2ca02c",
        GateVariant::Egadb4 => "#17becf",
    }
}

/// `[min, max]` widened by 5% of the span on each side.
pub fn padded_range(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    Some((lo - 0.05 * span, hi + 0.05 * span))
}

pub struct RunSeries<'a> {
    pub label: String,
    pub variant: GateVariant,
    pub rows: &'a [MetricsRow],
}

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.x + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }
    fn py(&self, y: f64) -> f64 {
        self.y + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }
    fn frame(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#000"/>"##,
            self.x, self.y, self.w, self.h
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
            self.x + self.w / 2.0,
            self.y - 8.0,
            escape(title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
            self.x + self.w / 2.0,
            self.y + self.h + 32.0,
            escape(xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            self.x - 42.0,
            self.y + self.h / 2.0,
            self.x - 42.0,
            self.y + self.h / 2.0,
            escape(ylabel)
        );
        for v in ticks(self.yr) {
            let y = self.py(v);
            let _ = writeln!(
                out,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#000"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"##,
                self.x - 4.0,
                self.x,
                self.x - 6.0,
                y + 3.0,
                fmt_tick(v)
            );
        }
    }
    fn x_ticks(&self, out: &mut String) {
        for v in ticks(self.xr) {
            let x = self.px(v);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#000"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"##,
                self.y + self.h,
                self.y + self.h + 4.0,
                self.y + self.h + 15.0,
                fmt_tick(v)
            );
        }
    }
}

fn ticks((lo, hi): (f64, f64)) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + 1e-12 * step {
        out.push(v);
        v += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e5).contains(&v.abs()) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
        path.join(" ")
    );
}

fn open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n"
    )
}

/// Three panels: validation curves, final validation loss per run, and
/// the generalisation gap (val − smoothed train) at each evaluation.
pub fn training_figure(runs: &[RunSeries<'_>]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::contract("no runs to plot"));
    }
    let mut val = Vec::new();
    for r in runs {
        let pts: Vec<(f64, f64, f64)> = r
            .rows
            .iter()
            .filter_map(|m| m.val_loss.map(|v| (m.step as f64, v, v - m.train_loss)))
            .collect();
        if pts.is_empty() {
            return Err(Error::contract(format!("run {} has no validation rows", r.label)));
        }
        val.push(pts);
    }
    let (w, h, top, left, gap) = (300.0, 240.0, 40.0, 70.0, 90.0);
    let width = left + 3.0 * w + 2.0 * gap + 150.0;
    let mut out = open(width, top + h + 60.0);
    let steps = padded_range(val.iter().flatten().map(|p| p.0)).expect("non-empty");
    let losses = padded_range(val.iter().flatten().map(|p| p.1)).expect("non-empty");
    let gaps = padded_range(val.iter().flatten().map(|p| p.2)).expect("non-empty");
    let finals: Vec<f64> = val.iter().map(|p| p.last().expect("non-empty").1).collect();

    let curves = Panel { x: left, y: top, w, h, xr: steps, yr: losses };
    curves.frame(&mut out, "Validation loss", "step", "loss");
    curves.x_ticks(&mut out);
    for (r, pts) in runs.iter().zip(&val) {
        let p: Vec<_> = pts.iter().map(|q| (curves.px(q.0), curves.py(q.1))).collect();
        polyline(&mut out, &p, variant_color(r.variant), false);
    }

    let bar_range = padded_range(finals.iter().copied().chain([finals.iter().copied().fold(f64::INFINITY, f64::min) * 0.98]))
        .expect("non-empty");
    let bars = Panel { x: left + w + gap, y: top, w, h, xr: (0.0, runs.len() as f64), yr: bar_range };
    bars.frame(&mut out, "Final validation loss", "run", "loss");
    for (i, (r, f)) in runs.iter().zip(&finals).enumerate() {
        let x0 = bars.px(i as f64 + 0.15);
        let x1 = bars.px(i as f64 + 0.85);
        let y = bars.py(*f);
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x1 - x0,
            bars.y + bars.h - y,
            variant_color(r.variant)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            (x0 + x1) / 2.0,
            bars.y + bars.h + 14.0,
            escape(&r.label)
        );
    }

    let gp = Panel { x: left + 2.0 * (w + gap), y: top, w, h, xr: steps, yr: gaps };
    gp.frame(&mut out, "Generalisation gap", "step", "val - train");
    gp.x_ticks(&mut out);
    for (r, pts) in runs.iter().zip(&val) {
        let p: Vec<_> = pts.iter().map(|q| (gp.px(q.0), gp.py(q.2))).collect();
        polyline(&mut out, &p, variant_color(r.variant), false);
    }

    let lx = left + 3.0 * w + 2.0 * gap + 20.0;
    for (i, r) in runs.iter().enumerate() {
        let y = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="3"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            lx + 20.0,
            variant_color(r.variant),
            lx + 26.0,
            y + 4.0,
            escape(&r.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Colour ramp from dark blue through green to yellow, `u ∈ [0, 1]`.
fn ramp(u: f64) -> String {
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let u = u.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (u.floor() as usize).min(stops.len() - 2);
    let f = u - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Scale (rows, finest at the top) against position heatmap.
pub fn scalogram_heatmap(sc: &Scalogram, title: &str) -> String {
    let (cw, ch) = (8.0, 5.0);
    let (left, top) = (70.0, 40.0);
    let (w, h) = (cw * sc.len as f64, ch * sc.n_scales() as f64);
    let mut out = open(left + w + 40.0, top + h + 50.0);
    let max = sc.values.iter().copied().fold(0.0, f64::max);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + w / 2.0,
        escape(title)
    );
    for s in 0..sc.n_scales() {
        for t in 0..sc.len {
            let u = if max > 0.0 { sc.get(s, t) / max } else { 0.0 };
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{cw}" height="{ch}" fill="{}"/>"#,
                left + cw * t as f64,
                top + ch * s as f64,
                ramp(u)
            );
        }
    }
    for s in (0..sc.n_scales()).step_by(8.max(sc.n_scales() / 8)) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            top + ch * s as f64 + ch,
            fmt_tick(sc.scales[s])
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">position</text>"#,
        left + w / 2.0,
        top + h + 30.0
    );
    out.push_str("</svg>\n");
    out
}

/// Energy per scale on a logarithmic scale axis, with dashed markers at
/// the convolution filter lengths.
pub fn spectrum_plot(sp: &Spectrum, title: &str) -> String {
    let (left, top, w, h) = (80.0, 40.0, 480.0, 280.0);
    let mut out = open(left + w + 40.0, top + h + 60.0);
    let logs: Vec<f64> = sp.scales.iter().map(|a| a.log10()).collect();
    let xr = padded_range(logs.iter().copied().chain(sp.markers.iter().map(|&m| (m as f64).log10())))
        .unwrap_or((0.0, 1.0));
    let yr = padded_range(sp.energy.iter().copied().chain([0.0])).unwrap_or((0.0, 1.0));
    let p = Panel { x: left, y: top, w, h, xr, yr };
    p.frame(&mut out, title, "log10 scale", "energy");
    p.x_ticks(&mut out);
    let pts: Vec<_> = logs.iter().zip(&sp.energy).map(|(x, y)| (p.px(*x), p.py(*y))).collect();
    polyline(&mut out, &pts, "#1f77b4", false);
    let colors = ["#d62728", "#ff7f0e", "#2ca02c", "#9467bd"];
    for (i, &m) in sp.markers.iter().enumerate() {
        let x = p.px((m as f64).log10());
        polyline(&mut out, &[(x, p.y), (x, p.y + p.h)], colors[i % colors.len()], true);
    }
    out.push_str("</svg>\n");
    out
}
