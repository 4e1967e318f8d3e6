//! Deterministic SVG 1.1 rendering for heatmaps, line charts and square
//! matrices. Output is a pure function of the spec: fixed number formatting,
//! no timestamps, no environment lookups.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Viridis sampled at eight evenly spaced points.
pub const STOPS: [[u8; 3]; 8] = [
    [0x44, 0x01, 0x54],
    [0x46, 0x32, 0x7e],
    [0x36, 0x5c, 0x8d],
    [0x27, 0x7f, 0x8e],
    [0x1f, 0xa1, 0x87],
    [0x4a, 0xc1, 0x6d],
    [0xa0, 0xda, 0x39],
    [0xfd, 0xe7, 0x25],
];

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 80.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 52.0;
const MAX_TICKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Rows drawn top to bottom on the vertical axis, columns left to right.
    Heatmap,
    /// One polyline per series over a shared categorical x axis.
    Line,
    /// Square matrix with the same labels on both axes and printed values.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlotData {
    Grid(Array2<f64>),
    Lines(Vec<Series>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Grid row labels (heatmap, matrix).
    pub row_labels: Vec<String>,
    /// Grid column labels, or the x categories of a line chart.
    pub col_labels: Vec<String>,
    pub data: PlotData,
    /// Value range mapped onto the color table; values outside are clamped.
    pub color_range: (f64, f64),
    pub width: u32,
    pub height: u32,
}

impl PlotSpec {
    pub fn heatmap(
        title: &str,
        x_label: &str,
        y_label: &str,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        grid: Array2<f64>,
    ) -> PlotSpec {
        PlotSpec {
            kind: PlotKind::Heatmap,
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            row_labels,
            col_labels,
            data: PlotData::Grid(grid),
            color_range: (0.0, 1.0),
            width: 720,
            height: 480,
        }
    }

    pub fn line(title: &str, x_label: &str, y_label: &str, x: Vec<String>, series: Vec<Series>) -> PlotSpec {
        PlotSpec {
            kind: PlotKind::Line,
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            row_labels: Vec::new(),
            col_labels: x,
            data: PlotData::Lines(series),
            color_range: (0.0, 1.0),
            width: 720,
            height: 400,
        }
    }

    pub fn matrix(title: &str, labels: Vec<String>, grid: Array2<f64>, color_range: (f64, f64)) -> PlotSpec {
        PlotSpec {
            kind: PlotKind::Matrix,
            title: title.into(),
            x_label: String::new(),
            y_label: String::new(),
            row_labels: labels.clone(),
            col_labels: labels,
            data: PlotData::Grid(grid),
            color_range,
            width: 560,
            height: 520,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.color_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig("color_range must be finite with lo < hi".into()));
        }
        if self.width < 200 || self.height < 150 {
            return Err(Error::InvalidConfig("plot must be at least 200x150 px".into()));
        }
        match (&self.kind, &self.data) {
            (PlotKind::Heatmap | PlotKind::Matrix, PlotData::Grid(g)) => {
                if g.nrows() == 0 || g.ncols() == 0 {
                    return Err(Error::Shape("empty grid".into()));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::RejectNonFinite { context: "plot grid".into() });
                }
                if self.row_labels.len() != g.nrows() || self.col_labels.len() != g.ncols() {
                    return Err(Error::Shape(format!(
                        "{}x{} grid with {} row and {} column labels",
                        g.nrows(),
                        g.ncols(),
                        self.row_labels.len(),
                        self.col_labels.len()
                    )));
                }
                if self.kind == PlotKind::Matrix && g.nrows() != g.ncols() {
                    return Err(Error::Shape("matrix plot needs a square grid".into()));
                }
            }
            (PlotKind::Line, PlotData::Lines(series)) => {
                if series.is_empty() || self.col_labels.is_empty() {
                    return Err(Error::Shape("line plot needs at least one series and one x value".into()));
                }
                for s in series {
                    if s.values.len() != self.col_labels.len() {
                        return Err(Error::Shape(format!(
                            "series `{}` has {} values for {} x labels",
                            s.name,
                            s.values.len(),
                            self.col_labels.len()
                        )));
                    }
                    if s.values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::RejectNonFinite { context: format!("series `{}`", s.name) });
                    }
                }
            }
            _ => return Err(Error::InvalidConfig("plot kind does not match data".into())),
        }
        Ok(())
    }
}

/// Color for `t` in [0, 1] by linear interpolation between adjacent stops,
/// channels rounded to the nearest integer. Out-of-range input is clamped.
pub fn color_at(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let frac = pos - i as f64;
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let a = STOPS[i][ch] as f64;
        let b = STOPS[i + 1][ch] as f64;
        *o = (a + (b - a) * frac).round() as u8;
    }
    out
}

pub fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" { "0.00".into() } else { s }
}

fn tick_stride(n: usize) -> usize {
    n.div_ceil(MAX_TICKS).max(1)
}

/// Renders the spec to SVG bytes.
pub fn render_svg(spec: &PlotSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut s = String::new();
    let (w, h) = (spec.width as f64, spec.height as f64);
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        num(w / 2.0),
        escape(&spec.title)
    );
    match &spec.data {
        PlotData::Grid(g) => render_grid(&mut s, spec, g, w, h),
        PlotData::Lines(series) => render_lines(&mut s, spec, series, w, h),
    }
    s.push_str("</svg>\n");
    Ok(s.into_bytes())
}

fn axis_titles(s: &mut String, spec: &PlotSpec, w: f64, h: f64) {
    if !spec.x_label.is_empty() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(MARGIN_LEFT + (w - MARGIN_LEFT - MARGIN_RIGHT) / 2.0),
            num(h - 10.0),
            escape(&spec.x_label)
        );
    }
    if !spec.y_label.is_empty() {
        let cy = MARGIN_TOP + (h - MARGIN_TOP - MARGIN_BOTTOM) / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            num(cy),
            num(cy),
            escape(&spec.y_label)
        );
    }
}

fn render_grid(s: &mut String, spec: &PlotSpec, g: &Array2<f64>, w: f64, h: f64) {
    let (rows, cols) = g.dim();
    let pw = w - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = h - MARGIN_TOP - MARGIN_BOTTOM;
    let cw = pw / cols as f64;
    let ch = ph / rows as f64;
    let (lo, hi) = spec.color_range;
    let annotate = spec.kind == PlotKind::Matrix && rows <= 16;
    for r in 0..rows {
        for c in 0..cols {
            let v = g[[r, c]];
            let col = color_at((v - lo) / (hi - lo));
            let x = MARGIN_LEFT + c as f64 * cw;
            let y = MARGIN_TOP + r as f64 * ch;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"><title>{}, {}: {}</title></rect>"#,
                num(x),
                num(y),
                num(cw),
                num(ch),
                hex(col),
                escape(&spec.row_labels[r]),
                escape(&spec.col_labels[c]),
                num(v)
            );
            if annotate {
                let light = (col[0] as u32 + col[1] as u32 + col[2] as u32) < 384;
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" dominant-baseline="central" fill="{}">{}</text>"#,
                    num(x + cw / 2.0),
                    num(y + ch / 2.0),
                    if light { "#ffffff" } else { "#000000" },
                    num(v)
                );
            }
        }
    }
    let rs = tick_stride(rows);
    for r in (0..rows).step_by(rs) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="central">{}</text>"#,
            num(MARGIN_LEFT - 4.0),
            num(MARGIN_TOP + (r as f64 + 0.5) * ch),
            escape(&spec.row_labels[r])
        );
    }
    let cs = tick_stride(cols);
    for c in (0..cols).step_by(cs) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(MARGIN_LEFT + (c as f64 + 0.5) * cw),
            num(MARGIN_TOP + ph + 14.0),
            escape(&spec.col_labels[c])
        );
    }
    colorbar(s, spec, w, ph);
    axis_titles(s, spec, w, h);
}

fn colorbar(s: &mut String, spec: &PlotSpec, w: f64, ph: f64) {
    let x = w - MARGIN_RIGHT + 16.0;
    let _ = writeln!(s, r#"<defs><linearGradient id="cbar" x1="0" y1="1" x2="0" y2="0">"#);
    for (i, stop) in STOPS.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<stop offset="{}" stop-color="{}"/>"#,
            num(i as f64 / (STOPS.len() - 1) as f64),
            hex(*stop)
        );
    }
    let _ = writeln!(s, "</linearGradient></defs>");
    let _ = writeln!(
        s,
        r#"<path d="M{} {}h14v{}h-14z" fill="url(#cbar)"/>"#,
        num(x),
        num(MARGIN_TOP),
        num(ph)
    );
    let (lo, hi) = spec.color_range;
    for (v, y) in [(hi, MARGIN_TOP), (lo, MARGIN_TOP + ph)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" dominant-baseline="central">{}</text>"#,
            num(x + 18.0),
            num(y),
            num(v)
        );
    }
}

fn render_lines(s: &mut String, spec: &PlotSpec, series: &[Series], w: f64, h: f64) {
    let n = spec.col_labels.len();
    let pw = w - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = h - MARGIN_TOP - MARGIN_BOTTOM;
    let mut lo = series.iter().flat_map(|x| &x.values).copied().fold(f64::INFINITY, f64::min);
    let mut hi = series.iter().flat_map(|x| &x.values).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let px = |i: usize| {
        if n == 1 {
            MARGIN_LEFT + pw / 2.0
        } else {
            MARGIN_LEFT + pw * i as f64 / (n - 1) as f64
        }
    };
    let py = |v: f64| MARGIN_TOP + ph * (hi - v) / (hi - lo);
    let _ = writeln!(
        s,
        r##"<path d="M{} {}V{}H{}" fill="none" stroke="#444444"/>"##,
        num(MARGIN_LEFT),
        num(MARGIN_TOP),
        num(MARGIN_TOP + ph),
        num(MARGIN_LEFT + pw)
    );
    for (v, y) in [(hi, MARGIN_TOP), ((lo + hi) / 2.0, MARGIN_TOP + ph / 2.0), (lo, MARGIN_TOP + ph)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="central">{}</text>"#,
            num(MARGIN_LEFT - 4.0),
            num(y),
            num(v)
        );
    }
    for i in (0..n).step_by(tick_stride(n)) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(px(i)),
            num(MARGIN_TOP + ph + 14.0),
            escape(&spec.col_labels[i])
        );
    }
    for (k, ser) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{},{}", num(px(i)), num(py(v))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            color
        );
        for (i, &v) in ser.values.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="2.5" fill="{}"><title>{}: {}</title></circle>"#,
                num(px(i)),
                num(py(v)),
                color,
                escape(&spec.col_labels[i]),
                num(v)
            );
        }
        let ly = MARGIN_TOP + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{}" dominant-baseline="central">{}</text>"#,
            num(w - MARGIN_RIGHT + 8.0),
            num(ly),
            color,
            escape(&ser.name)
        );
    }
    axis_titles(s, spec, w, h);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn stop_endpoints_and_midpoint() {
        assert_eq!(color_at(0.0), STOPS[0]);
        assert_eq!(color_at(1.0), STOPS[7]);
        assert_eq!(color_at(3.0 / 7.0), STOPS[3]);
        // halfway between stops 3 and 4
        assert_eq!(color_at(0.5), [0x23, 0x90, 0x8b]);
    }

    #[test]
    fn two_by_two_heatmap_has_four_cells() {
        let spec = PlotSpec::heatmap("t", "layer", "checkpoint", labels(2), labels(2), array![[0.0, 1.0], [0.5, 0.5]]);
        let svg = String::from_utf8(render_svg(&spec).unwrap()).unwrap();
        let fills: Vec<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<rect"))
            .map(|l| l.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
            .collect();
        assert_eq!(fills, vec!["#440154", "#fde725", "#23908b", "#23908b"]);
    }

    #[test]
    fn nan_rejected() {
        let spec = PlotSpec::heatmap("t", "", "", labels(1), labels(2), array![[0.0, f64::NAN]]);
        assert!(matches!(render_svg(&spec), Err(Error::RejectNonFinite { .. })));
        let line = PlotSpec::line("t", "", "", labels(2), vec![Series { name: "a".into(), values: vec![1.0, f64::NAN] }]);
        assert!(matches!(render_svg(&line), Err(Error::RejectNonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = PlotSpec::heatmap("t", "", "", labels(3), labels(2), array![[0.0, 1.0]]);
        assert!(matches!(render_svg(&spec), Err(Error::Shape(_))));
        let m = PlotSpec::matrix("t", labels(2), array![[0.0, 1.0]], (-1.0, 1.0));
        assert!(render_svg(&m).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let spec = PlotSpec::line("a<b & c", "", "", vec!["x\"y".into()], vec![Series { name: "s".into(), values: vec![0.0] }]);
        let svg = String::from_utf8(render_svg(&spec).unwrap()).unwrap();
        assert!(svg.contains("a&lt;b &amp; c"));
        assert!(svg.contains("x&quot;y"));
    }
}
