//! Self-contained SVG plots of pipeline artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{QqPoint, RootogramBin};
use crate::error::{Error, Result};
use crate::pooling::PooledEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    CoefficientPath,
    ResidualQq,
    Rootogram,
    MapEffect,
    EmbeddingScatter,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::CoefficientPath,
        PlotKind::ResidualQq,
        PlotKind::Rootogram,
        PlotKind::MapEffect,
        PlotKind::EmbeddingScatter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::CoefficientPath => "coefficient-path",
            PlotKind::ResidualQq => "residual-qq",
            PlotKind::Rootogram => "rootogram",
            PlotKind::MapEffect => "map-effect",
            PlotKind::EmbeddingScatter => "embedding-scatter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown plot kind '{s}'")))
    }
}

/// Map-effect artifact row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEffectRow {
    pub district_id: String,
    pub lon: f64,
    pub lat: f64,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CoordinateRow {
    district_id: String,
    dim1: f64,
    dim2: f64,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const M: f64 = 56.0;

/// Affine map from data ranges onto the plotting area.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    sx: f64,
    sy: f64,
    ox: f64,
    oy: f64,
}

impl Frame {
    fn new(mut x0: f64, mut x1: f64, mut y0: f64, mut y1: f64, equal: bool) -> Self {
        if !(x1 > x0) {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if !(y1 > y0) {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pw = W - 2.0 * M;
        let ph = H - 2.0 * M;
        let mut sx = pw / (x1 - x0);
        let mut sy = ph / (y1 - y0);
        let (mut ox, mut oy) = (M, M);
        if equal {
            let s = sx.min(sy);
            ox += (pw - s * (x1 - x0)) / 2.0;
            oy += (ph - s * (y1 - y0)) / 2.0;
            sx = s;
            sy = s;
        }
        Frame {
            x0,
            x1,
            y0,
            y1,
            sx,
            sy,
            ox,
            oy,
        }
    }

    fn padded(points: impl Iterator<Item = (f64, f64)> + Clone, equal: bool) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let px = 0.05 * (x1 - x0);
        let py = 0.05 * (y1 - y0);
        Frame::new(x0 - px, x1 + px, y0 - py, y1 + py, equal)
    }

    fn x(&self, v: f64) -> f64 {
        self.ox + (v - self.x0) * self.sx
    }

    fn y(&self, v: f64) -> f64 {
        H - self.oy - (v - self.y0) * self.sy
    }
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, b, t) = (f.x(f.x0), f.x(f.x1), f.y(f.y0), f.y(f.y1));
    let _ = writeln!(
        s,
        "<g class=\"axes\" stroke=\"#444\" fill=\"none\"><line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\"/><line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{l:.2}\" y2=\"{t:.2}\"/></g>"
    );
    for i in 0..=4 {
        let v = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", f.x(v), b + 16.0, tick(v));
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", l - 6.0, f.y(v) + 4.0, tick(v));
    }
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", (l + r) / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        (b + t) / 2.0,
        (b + t) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    let r = if v.abs() < 1e-12 { 0.0 } else { v };
    format!("{r:.2}")
}

fn polyline(s: &mut String, pts: &[(f64, f64)], colour: &str, class: &str) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        s,
        "<polyline class=\"{class}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.8\" points=\"{}\"/>",
        coords.join(" ")
    );
}

/// Per-week estimates with 95% bands for every `prefix:week_t` family in a
/// pooled table.
pub fn coefficient_path_svg(pooled: &PooledEstimate) -> Result<String> {
    let mut series: Vec<(String, Vec<(f64, f64, f64, f64)>)> = Vec::new();
    for r in &pooled.rows {
        let Some((prefix, week)) = r.name.split_once(":week_") else {
            continue;
        };
        let Ok(t) = week.parse::<usize>() else {
            continue;
        };
        let entry = match series.iter_mut().find(|(p, _)| p == prefix) {
            Some(e) => e,
            None => {
                series.push((prefix.to_string(), Vec::new()));
                series.last_mut().unwrap()
            }
        };
        entry.1.push((t as f64, r.estimate, r.lower, r.upper));
    }
    if series.is_empty() {
        return Err(Error::invalid("pooled table has no week-varying coefficients"));
    }
    let frame = Frame::padded(
        series
            .iter()
            .flat_map(|(_, v)| v.iter().flat_map(|&(t, _, lo, hi)| [(t, lo), (t, hi)]))
            .chain(std::iter::once((series[0].1[0].0, 0.0))),
        false,
    );
    let colours = ["#1f5fa8", "#c0392b", "#2e8b57", "#8e44ad"];
    let mut s = header("Week-varying effects with 95% intervals");
    axes(&mut s, &frame, "week", "estimate");
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
        frame.x(frame.x0),
        frame.y(0.0),
        frame.x(frame.x1),
        frame.y(0.0)
    );
    for (idx, (name, pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let colour = colours[idx % colours.len()];
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", frame.x(p.0), frame.y(p.3))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|p| format!("{:.2},{:.2}", frame.x(p.0), frame.y(p.2))).collect();
        let _ = writeln!(
            s,
            "<polygon class=\"band\" fill=\"{colour}\" fill-opacity=\"0.18\" stroke=\"none\" points=\"{} {}\"/>",
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<(f64, f64)> = pts.iter().map(|p| (frame.x(p.0), frame.y(p.1))).collect();
        polyline(&mut s, &line, colour, "estimate");
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{colour}\">{}</text>",
            W - M - 110.0,
            M + 16.0 * idx as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn residual_qq_svg(points: &[QqPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::invalid("residual set is empty"));
    }
    let frame = Frame::padded(points.iter().map(|p| (p.theoretical, p.sample)), false);
    let mut s = header("Randomized quantile residuals");
    axes(&mut s, &frame, "theoretical quantile", "sample quantile");
    let lo = frame.x0.max(frame.y0);
    let hi = frame.x1.min(frame.y1);
    let _ = writeln!(
        s,
        "<line class=\"diagonal\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#777\" stroke-dasharray=\"4 3\"/>",
        frame.x(lo),
        frame.y(lo),
        frame.x(hi),
        frame.y(hi)
    );
    for p in points {
        let colour = if p.outlier { "#c0392b" } else { "#333" };
        let _ = writeln!(
            s,
            "<circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{colour}\"/>",
            frame.x(p.theoretical),
            frame.y(p.sample)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One bar per count value on the square-root scale plus the expected curve.
pub fn rootogram_svg(bins: &[RootogramBin]) -> Result<String> {
    if bins.is_empty() {
        return Err(Error::invalid("rootogram has no bins"));
    }
    let top = bins
        .iter()
        .map(|b| b.sqrt_observed.max(b.sqrt_expected))
        .fold(0.0_f64, f64::max);
    let frame = Frame::new(-0.5, bins.len() as f64 - 0.5, 0.0, top * 1.05, false);
    let mut s = header("Rootogram");
    axes(&mut s, &frame, "count", "sqrt(frequency)");
    let width = frame.sx * 0.8;
    for b in bins {
        let x = frame.x(b.count as f64) - width / 2.0;
        let y = frame.y(b.sqrt_observed);
        let _ = writeln!(
            s,
            "<rect class=\"bar\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{width:.2}\" height=\"{:.2}\" fill=\"#bbb\"/>",
            frame.y(0.0) - y
        );
    }
    let line: Vec<(f64, f64)> = bins
        .iter()
        .map(|b| (frame.x(b.count as f64), frame.y(b.sqrt_expected)))
        .collect();
    polyline(&mut s, &line, "#c0392b", "expected");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn map_effect_svg(rows: &[MapEffectRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("map artifact has no districts"));
    }
    let frame = Frame::padded(rows.iter().map(|r| (r.lon, r.lat)), true);
    let scale = rows.iter().map(|r| r.effect.abs()).fold(0.0_f64, f64::max).max(1e-12);
    let mut s = header("District effects");
    axes(&mut s, &frame, "longitude", "latitude");
    for r in rows {
        let v = (r.effect / scale).clamp(-1.0, 1.0);
        // diverging blue (negative) to red (positive)
        let (red, green, blue) = if v >= 0.0 {
            (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
        } else {
            (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
        };
        let _ = writeln!(
            s,
            "<circle class=\"district\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"7\" fill=\"rgb({},{},{})\" stroke=\"#333\"><title>{} {:.4}</title></circle>",
            frame.x(r.lon),
            frame.y(r.lat),
            red.round(),
            green.round(),
            blue.round(),
            escape(&r.district_id),
            r.effect
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Scatter with equal axis scaling, so pairwise distances are preserved up
/// to one common factor.
pub fn embedding_scatter_svg(ids: &[String], points: &[[f64; 2]]) -> Result<String> {
    if points.is_empty() || ids.len() != points.len() {
        return Err(Error::invalid("embedding artifact has no points"));
    }
    let frame = Frame::padded(points.iter().map(|p| (p[0], p[1])), true);
    let mut s = header("Social embedding");
    axes(&mut s, &frame, "dimension 1", "dimension 2");
    for (id, p) in ids.iter().zip(points) {
        let (x, y) = (frame.x(p[0]), frame.y(p[1]));
        let _ = writeln!(s, "<circle class=\"point\" cx=\"{x:.6}\" cy=\"{y:.6}\" r=\"3\" fill=\"#1f5fa8\"/>");
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"9\">{}</text>", x + 4.0, y - 4.0, escape(id));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, expected: &[&str], kind: PlotKind) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != expected {
        return Err(Error::invalid(format!(
            "{} is not a {} artifact (columns {})",
            path.display(),
            kind.name(),
            headers.join(",")
        )));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Renders an artifact file as the requested plot kind.
pub fn render_svg(artifact: &Path, kind: PlotKind) -> Result<String> {
    match kind {
        PlotKind::CoefficientPath => {
            let text = std::fs::read_to_string(artifact).map_err(|e| Error::io(artifact, e))?;
            let pooled: PooledEstimate = serde_json::from_str(&text).map_err(|_| {
                Error::invalid(format!("{} is not a pooled coefficient artifact", artifact.display()))
            })?;
            coefficient_path_svg(&pooled)
        }
        PlotKind::ResidualQq => {
            let pts: Vec<QqPoint> = read_csv(artifact, &["theoretical", "sample", "outlier"], kind)?;
            residual_qq_svg(&pts)
        }
        PlotKind::Rootogram => {
            let bins: Vec<RootogramBin> = read_csv(
                artifact,
                &["count", "observed", "expected", "sqrt_observed", "sqrt_expected"],
                kind,
            )?;
            rootogram_svg(&bins)
        }
        PlotKind::MapEffect => {
            let rows: Vec<MapEffectRow> = read_csv(artifact, &["district_id", "lon", "lat", "effect"], kind)?;
            map_effect_svg(&rows)
        }
        PlotKind::EmbeddingScatter => {
            let rows: Vec<CoordinateRow> = read_csv(artifact, &["district_id", "dim1", "dim2"], kind)?;
            let ids: Vec<String> = rows.iter().map(|r| r.district_id.clone()).collect();
            let pts: Vec<[f64; 2]> = rows.iter().map(|r| [r.dim1, r.dim2]).collect();
            embedding_scatter_svg(&ids, &pts)
        }
    }
}
