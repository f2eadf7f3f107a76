//! Static SVG plots rendered from a run directory's CSV outputs.
//!
//! Output depends only on the CSV contents: fixed canvas, fixed axis rules,
//! fixed number formatting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use dlab_core::metrics::{AccuracyMatrix, HELD_OUT};

pub const PROBE_CSV: &str = "probe.csv";
pub const MATRIX_CSV: &str = "matrix.csv";
pub const ATTRIBUTION_CSV: &str = "attribution.csv";

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
/// Above this many distinct steps the log axis falls back to decade ticks.
const MAX_STEP_TICKS: usize = 10;

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Clone, Copy)]
enum Scale {
    Linear,
    Log,
}

struct Axis {
    lo: f64,
    hi: f64,
    scale: Scale,
    ticks: Vec<f64>,
}

impl Axis {
    fn unit(&self, v: f64) -> f64 {
        let (v, lo, hi) = match self.scale {
            Scale::Linear => (v, self.lo, self.hi),
            Scale::Log => (v.log10(), self.lo.log10(), self.hi.log10()),
        };
        if hi == lo {
            0.5
        } else {
            (v - lo) / (hi - lo)
        }
    }

    fn scale_name(&self) -> &'static str {
        match self.scale {
            Scale::Linear => "linear",
            Scale::Log => "log",
        }
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let m = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

/// Linear axis covering `[min(lo, 0), hi]` with round ticks.
fn linear_axis(lo: f64, hi: f64) -> Axis {
    let lo = lo.min(0.0);
    let hi = if hi <= lo { lo + 1.0 } else { hi };
    let step = nice_step(hi - lo);
    let start = (lo / step).floor() * step;
    let end = (hi / step).ceil() * step;
    let n = ((end - start) / step).round() as usize;
    let ticks = (0..=n).map(|i| start + i as f64 * step).collect();
    Axis { lo: start, hi: end, scale: Scale::Linear, ticks }
}

/// Log axis over the positive `steps`; ticks at each step when there are few.
fn log_axis(steps: &[f64]) -> Axis {
    let lo = steps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = steps.iter().copied().fold(0.0, f64::max);
    let mut distinct: Vec<f64> = steps.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let ticks = if distinct.len() <= MAX_STEP_TICKS {
        distinct
    } else {
        let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
        (a..=b).map(|e| 10f64.powi(e)).filter(|t| *t >= lo && *t <= hi).collect()
    };
    let (lo, hi) = if lo == hi { (lo / 10f64.sqrt(), hi * 10f64.sqrt()) } else { (lo, hi) };
    Axis { lo, hi, scale: Scale::Log, ticks }
}

struct Canvas {
    svg: String,
    x: Axis,
    y: Axis,
}

impl Canvas {
    fn new(title: &str, x: Axis, y: Axis, x_title: &str, y_title: &str) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ =
            writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, num(W / 2.0), escape(title));
        let mut c = Self { svg, x, y };
        c.axes(x_title, y_title);
        c
    }

    fn px(&self, v: f64) -> f64 {
        LEFT + self.x.unit(v) * (W - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        H - BOTTOM - self.y.unit(v) * (H - TOP - BOTTOM)
    }

    fn axes(&mut self, x_title: &str, y_title: &str) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
        let mut s = String::new();
        let _ = writeln!(s, r#"<g id="x-axis" data-scale="{}">"#, self.x.scale_name());
        for &t in &self.x.ticks {
            let x = num(self.px(t));
            let _ = writeln!(s, r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#dddddd"/>"##, num(y0), num(y1));
            let _ = writeln!(s, r#"<text class="tick" x="{x}" y="{}" text-anchor="middle">{}</text>"#, num(y0 + 16.0), label(t));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num((x0 + x1) / 2.0),
            num(H - 12.0),
            escape(x_title)
        );
        s.push_str("</g>\n");
        let _ = writeln!(s, r#"<g id="y-axis" data-scale="{}">"#, self.y.scale_name());
        for &t in &self.y.ticks {
            let y = num(self.py(t));
            let _ = writeln!(s, r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/>"##, num(x0), num(x1));
            let _ =
                writeln!(s, r#"<text class="tick" x="{}" y="{y}" text-anchor="end" dy="4">{}</text>"#, num(x0 - 6.0), label(t));
        }
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            num((y0 + y1) / 2.0),
            num((y0 + y1) / 2.0),
            escape(y_title)
        );
        s.push_str("</g>\n");
        let _ = writeln!(s, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, num(x0), num(y0), num(x1), num(y0));
        let _ = writeln!(s, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, num(x0), num(y0), num(x0), num(y1));
        self.svg.push_str(&s);
    }

    fn line(&mut self, name: &str, points: &[(f64, f64)], color: &str, width: f64) {
        let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{},{}", num(self.px(x)), num(self.py(y)))).collect();
        let _ = writeln!(
            self.svg,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#,
            escape(name),
            pts.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(self.svg, r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#, num(self.px(x)), num(self.py(y)));
        }
    }

    fn hline(&mut self, name: &str, y: f64) {
        let yy = num(self.py(y));
        let _ = writeln!(
            self.svg,
            r##"<line data-series="{}" x1="{}" y1="{yy}" x2="{}" y2="{yy}" stroke="#555555" stroke-dasharray="6 4"/>"##,
            escape(name),
            num(LEFT),
            num(W - RIGHT)
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (name, color)) in entries.iter().enumerate() {
            let y = TOP + 8.0 + 16.0 * i as f64;
            let x = W - RIGHT - 150.0;
            let _ = writeln!(self.svg, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, num(x), num(y - 9.0));
            let _ = writeln!(self.svg, r#"<text x="{}" y="{}">{}</text>"#, num(x + 16.0), num(y), escape(name));
        }
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn data_lines<'a>(text: &'a str, file: &str, header: &str) -> Result<Vec<&'a str>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        None => bail!("{file} is empty"),
        Some(h) if h.trim() != header => bail!("{file}: expected header '{header}', found '{}'", h.trim()),
        Some(_) => {}
    }
    let rows: Vec<&str> = lines.collect();
    if rows.is_empty() {
        bail!("{file} is empty (header only)");
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(s: Option<&str>, file: &str, row: usize) -> Result<T> {
    s.map(str::trim).and_then(|v| v.parse().ok()).ok_or_else(|| anyhow!("{file}: malformed row {row}"))
}

/// `(checkpoint_step, ntb)` points.
pub fn parse_probe_csv(text: &str) -> Result<Vec<(u64, f64)>> {
    data_lines(text, PROBE_CSV, "checkpoint_step,ntb")?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut it = l.split(',');
            Ok((field(it.next(), PROBE_CSV, i + 1)?, field(it.next(), PROBE_CSV, i + 1)?))
        })
        .collect()
}

/// `(checkpoint_step, layer, pathway, value)` rows.
pub fn parse_attribution_csv(text: &str) -> Result<Vec<(u64, usize, String, f64)>> {
    data_lines(text, ATTRIBUTION_CSV, "checkpoint_step,layer,pathway,value")?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut it = l.split(',');
            let step = field(it.next(), ATTRIBUTION_CSV, i + 1)?;
            let layer = field(it.next(), ATTRIBUTION_CSV, i + 1)?;
            let path: String = field(it.next(), ATTRIBUTION_CSV, i + 1)?;
            if path != "sa" && path != "mlp" {
                bail!("{ATTRIBUTION_CSV}: unknown pathway '{path}' in row {}", i + 1);
            }
            Ok((step, layer, path, field(it.next(), ATTRIBUTION_CSV, i + 1)?))
        })
        .collect()
}

/// Bias probe against optimizer step on a log axis; step 0 (the base model)
/// becomes a dashed reference line.
pub fn ntb_svg(points: &[(u64, f64)]) -> Result<String> {
    let tuned: Vec<(f64, f64)> = points.iter().filter(|p| p.0 > 0).map(|&(s, v)| (s as f64, v)).collect();
    if tuned.is_empty() {
        bail!("{PROBE_CSV} has no positive checkpoint steps");
    }
    let base = points.iter().find(|p| p.0 == 0).map(|p| p.1);
    let steps: Vec<f64> = tuned.iter().map(|p| p.0).collect();
    let hi = tuned.iter().map(|p| p.1).chain(base).fold(0.0, f64::max);
    let mut c = Canvas::new("Number-token bias", log_axis(&steps), linear_axis(0.0, hi), "optimizer step", "NTB");
    if let Some(b) = base {
        c.hline("base", b);
    }
    c.line("ntb", &tuned, PALETTE[0], 2.0);
    let mut legend = vec![("tuned".to_string(), PALETTE[0])];
    if base.is_some() {
        legend.push(("base".to_string(), "#555555"));
    }
    c.legend(&legend);
    Ok(c.finish())
}

/// Accuracy of every column against stage; the held-out aggregate is drawn heavier.
pub fn held_out_svg(matrix: &AccuracyMatrix) -> Result<String> {
    if matrix.rows.is_empty() {
        bail!("{MATRIX_CSV} is empty");
    }
    let stages = matrix.rows.len() - 1;
    let x = Axis { lo: 0.0, hi: stages.max(1) as f64, scale: Scale::Linear, ticks: (0..=stages).map(|s| s as f64).collect() };
    let y = Axis { lo: 0.0, hi: 100.0, scale: Scale::Linear, ticks: (0..=5).map(|i| 20.0 * i as f64).collect() };
    let mut c = Canvas::new("Accuracy after each stage", x, y, "stage", "accuracy (%)");
    let mut legend = Vec::new();
    let mut palette = PALETTE.iter().cycle();
    for (j, name) in matrix.columns.iter().enumerate() {
        let pts: Vec<(f64, f64)> = matrix.rows.iter().enumerate().map(|(i, r)| (i as f64, r[j])).collect();
        let (color, width) = if name == HELD_OUT { ("#000000", 3.0) } else { (*palette.next().expect("cycle"), 1.5) };
        c.line(name, &pts, color, width);
        legend.push((name.clone(), color));
    }
    c.legend(&legend);
    Ok(c.finish())
}

/// Side-by-side SA and MLP bars per layer for the latest checkpoint step.
pub fn attribution_svg(rows: &[(u64, usize, String, f64)]) -> Result<String> {
    let step = rows.iter().map(|r| r.0).max().ok_or_else(|| anyhow!("{ATTRIBUTION_CSV} is empty"))?;
    let layers = rows.iter().filter(|r| r.0 == step).map(|r| r.1 + 1).max().unwrap_or(0);
    let mut sa = vec![0.0; layers];
    let mut mlp = vec![0.0; layers];
    for (_, l, path, v) in rows.iter().filter(|r| r.0 == step) {
        if path == "sa" {
            sa[*l] = *v;
        } else {
            mlp[*l] = *v;
        }
    }
    let hi = sa.iter().chain(&mlp).copied().fold(0.0, f64::max);
    let x = Axis { lo: -0.5, hi: layers as f64 - 0.5, scale: Scale::Linear, ticks: (0..layers).map(|l| l as f64).collect() };
    let mut c =
        Canvas::new(&format!("Per-layer logit drift at step {step}"), x, linear_axis(0.0, hi), "layer", "RMS logit change");
    let slot = (W - LEFT - RIGHT) / layers.max(1) as f64;
    let bar = slot * 0.35;
    for l in 0..layers {
        let centre = c.px(l as f64);
        for (k, (name, v)) in [("sa", sa[l]), ("mlp", mlp[l])].into_iter().enumerate() {
            let top = c.py(v);
            let base = c.py(0.0);
            let x0 = centre - bar + k as f64 * bar;
            let _ = writeln!(
                c.svg,
                r#"<rect data-series="{name}" data-layer="{l}" x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                num(x0),
                num(top.min(base)),
                num(bar),
                num((base - top).abs()),
                PALETTE[k]
            );
        }
    }
    c.legend(&[("self-attention".into(), PALETTE[0]), ("MLP".into(), PALETTE[1])]);
    Ok(c.finish())
}

fn read_present(dir: &Path, name: &str) -> Result<Option<String>> {
    let path = dir.join(name);
    match std::fs::read_to_string(&path) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

/// Render every plot whose CSV is present in `dir`; returns the written paths.
/// Fails if none of the inputs exist, naming all of them.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut absent = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        Ok(())
    };
    match read_present(dir, PROBE_CSV)? {
        Some(t) => emit("ntb.svg", ntb_svg(&parse_probe_csv(&t)?)?)?,
        None => absent.push(PROBE_CSV),
    }
    match read_present(dir, MATRIX_CSV)? {
        Some(t) if t.trim().is_empty() => bail!("{MATRIX_CSV} is empty"),
        Some(t) => emit("held_out.svg", held_out_svg(&AccuracyMatrix::from_csv(&t).context(MATRIX_CSV)?)?)?,
        None => absent.push(MATRIX_CSV),
    }
    match read_present(dir, ATTRIBUTION_CSV)? {
        Some(t) => emit("attribution.svg", attribution_svg(&parse_attribution_csv(&t)?)?)?,
        None => absent.push(ATTRIBUTION_CSV),
    }
    if written.is_empty() {
        bail!("no report inputs in {}: missing {}", dir.display(), absent.join(", "));
    }
    for name in absent {
        log::warn!("{name} not found in {}; plot skipped", dir.display());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nice_linear_ticks() {
        let a = linear_axis(0.0, 0.37);
        assert_eq!(a.ticks.len(), 5);
        assert!((a.hi - 0.4).abs() < 1e-12);
        assert_eq!(label(0.1 + 0.2), "0.3");
        assert_eq!(num(-0.0001), "0.00");
    }

    #[test]
    fn log_ticks_fall_back_to_decades() {
        let steps: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(log_axis(&steps).ticks, vec![1.0, 10.0, 100.0]);
        let a = log_axis(&[5.0]);
        assert_eq!(a.ticks, vec![5.0]);
        assert!((a.unit(5.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probe_csv_errors() {
        assert!(parse_probe_csv("").unwrap_err().to_string().contains("probe.csv"));
        assert!(parse_probe_csv("checkpoint_step,ntb\n").unwrap_err().to_string().contains("probe.csv"));
        assert!(parse_probe_csv("step,ntb\n1,0.5\n").is_err());
        assert!(parse_probe_csv("checkpoint_step,ntb\n1,x\n").is_err());
        assert_eq!(parse_probe_csv("checkpoint_step,ntb\n0,0.1\n10,0.5\n").unwrap(), vec![(0, 0.1), (10, 0.5)]);
        assert!(ntb_svg(&[(0, 0.1)]).is_err());
    }
}
