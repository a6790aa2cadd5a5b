//! Action maps over the car's state grid and planning-target evolution, as
//! CSV tables and self-contained SVG.

use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::V_MAX;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub nx: usize,
    pub nv: usize,
}

impl Default for GridSpec {
    /// Interior positions (the endpoints are terminal) at every attainable
    /// velocity.
    fn default() -> Self {
        Self {
            x_min: -0.95,
            x_max: 0.95,
            v_min: -V_MAX,
            v_max: V_MAX,
            nx: 39,
            nv: 21,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nv == 0 {
            return Err(Error::invalid("action-map grid is empty"));
        }
        if !(self.x_min <= self.x_max && self.v_min <= self.v_max) {
            return Err(Error::invalid("action-map grid bounds are reversed"));
        }
        Ok(())
    }

    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.x_min, self.x_max, self.nx)
    }

    pub fn vs(&self) -> Vec<f64> {
        Self::axis(self.v_min, self.v_max, self.nv)
    }
}

/// First action component at each grid state; `actions[iv * xs.len() + ix]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMap {
    pub xs: Vec<f64>,
    pub vs: Vec<f64>,
    pub actions: Vec<f64>,
}

/// Queries `policy` at every grid state. Cell `i` draws from stream `i` of
/// `seed`, so the map does not depend on thread scheduling.
pub fn action_map<F>(grid: &GridSpec, policy: F, seed: u64) -> Result<ActionMap>
where
    F: Fn(&[f64], &mut dyn RngCore) -> Result<Vec<f64>> + Sync,
{
    grid.validate()?;
    let (xs, vs) = (grid.xs(), grid.vs());
    let actions = (0..xs.len() * vs.len())
        .into_par_iter()
        .map(|cell| {
            let state = [xs[cell % xs.len()], vs[cell / xs.len()]];
            let a = policy(&state, &mut stream(seed, cell as u64))?;
            a.first()
                .copied()
                .ok_or_else(|| Error::invalid("policy returned an empty action"))
        })
        .collect::<Result<_>>()?;
    Ok(ActionMap { xs, vs, actions })
}

impl ActionMap {
    pub fn get(&self, ix: usize, iv: usize) -> f64 {
        self.actions[iv * self.xs.len() + ix]
    }

    pub fn fraction_abs_above(&self, threshold: f64) -> f64 {
        let hits = self.actions.iter().filter(|a| a.abs() > threshold).count();
        hits as f64 / self.actions.len() as f64
    }

    /// Mean `|a|` over cells with `|x| <= x_half` and `|v| <= v_half`.
    pub fn band_mean_abs(&self, x_half: f64, v_half: f64) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (iv, v) in self.vs.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                if x.abs() <= x_half && v.abs() <= v_half {
                    total += self.get(ix, iv).abs();
                    count += 1;
                }
            }
        }
        (count > 0).then(|| total / count as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,v,action\n");
        for (iv, v) in self.vs.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                let _ = writeln!(out, "{x},{v},{}", self.get(ix, iv));
            }
        }
        out
    }

    /// Inverse of [`ActionMap::to_csv`]; rows must form a complete grid in
    /// velocity-major order.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("x,v,action") {
            return Err(Error::Parse {
                line: 1,
                message: "expected header x,v,action".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |message: String| Error::Parse { line: i + 2, message };
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| err(e.to_string())))
                .collect::<Result<_>>()?;
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            rows.push((fields[0], fields[1], fields[2]));
        }
        if rows.is_empty() {
            return Err(Error::invalid("action-map table has no rows"));
        }
        let v0 = rows[0].1;
        let nx = rows.iter().take_while(|r| r.1 == v0).count();
        if rows.len() % nx != 0 {
            return Err(Error::invalid("action-map rows do not form a grid"));
        }
        let xs: Vec<f64> = rows[..nx].iter().map(|r| r.0).collect();
        let vs: Vec<f64> = rows.iter().step_by(nx).map(|r| r.1).collect();
        for (k, r) in rows.iter().enumerate() {
            if r.0 != xs[k % nx] || r.1 != vs[k / nx] {
                return Err(Error::Parse {
                    line: k + 2,
                    message: "row breaks the grid order".into(),
                });
            }
        }
        Ok(Self {
            xs,
            vs,
            actions: rows.iter().map(|r| r.2).collect(),
        })
    }

    /// Heat map: position across, velocity up; blue for left throttle, red
    /// for right.
    pub fn to_svg(&self, title: &str) -> String {
        let (nx, nv) = (self.xs.len(), self.vs.len());
        let cell = (480.0 / nx.max(nv) as f64).max(4.0);
        let (left, top) = (70.0, 40.0);
        let (w, h) = (cell * nx as f64, cell * nv as f64);
        let mut svg = svg_open(left + w + 90.0, top + h + 60.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
            left + w / 2.0,
            escape(title)
        );
        for iv in 0..nv {
            for ix in 0..nx {
                let a = self.get(ix, iv);
                let y = top + h - (iv + 1) as f64 * cell;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>x={} v={} a={:.3}</title></rect>"#,
                    left + ix as f64 * cell,
                    y,
                    cell,
                    cell,
                    diverging(a),
                    self.xs[ix],
                    self.vs[iv],
                    a
                );
            }
        }
        axis_labels(
            &mut svg,
            left,
            top,
            w,
            h,
            &self.xs,
            &self.vs,
            "position x",
            "velocity v",
        );
        colorbar(&mut svg, left + w + 20.0, top, h, "-1", "+1", diverging_stops());
        svg.push_str("</svg>\n");
        svg
    }
}

/// Per-iteration summary of planning targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub iteration: usize,
    pub mean: f64,
    pub p10: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

pub fn summarize_targets(history: &[Vec<f64>]) -> Result<Vec<TargetSummary>> {
    if history.is_empty() || history.iter().any(Vec::is_empty) {
        return Err(Error::invalid("target history is empty"));
    }
    Ok(history
        .iter()
        .enumerate()
        .map(|(iteration, targets)| {
            let mut sorted = targets.clone();
            sorted.sort_by(f64::total_cmp);
            let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
            TargetSummary {
                iteration,
                mean: targets.iter().sum::<f64>() / targets.len() as f64,
                p10: q(0.1),
                median: q(0.5),
                p90: q(0.9),
                max: sorted[sorted.len() - 1],
            }
        })
        .collect())
}

pub fn target_summary_csv(history: &[Vec<f64>]) -> Result<String> {
    let mut out = String::from("iteration,mean,p10,median,p90,max\n");
    for s in summarize_targets(history)? {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.iteration, s.mean, s.p10, s.median, s.p90, s.max
        );
    }
    Ok(out)
}

/// Heat map of targets: records across (averaged into at most `columns`
/// bins), one row per iteration.
pub fn target_evolution_svg(history: &[Vec<f64>], columns: usize) -> Result<String> {
    summarize_targets(history)?;
    let n = history[0].len();
    if history.iter().any(|t| t.len() != n) {
        return Err(Error::invalid("iterations disagree on the number of records"));
    }
    let bins = columns.clamp(1, n);
    let binned: Vec<Vec<f64>> = history
        .iter()
        .map(|t| {
            (0..bins)
                .map(|b| {
                    let (lo, hi) = (b * n / bins, ((b + 1) * n / bins).max(b * n / bins + 1));
                    t[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                })
                .collect()
        })
        .collect();
    let (vmin, vmax) = binned
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    let (left, top, w) = (70.0, 40.0, 640.0);
    let row_h = 36.0;
    let h = row_h * history.len() as f64;
    let cw = w / bins as f64;
    let mut svg = svg_open(left + w + 100.0, top + h + 60.0);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-size="15" text-anchor="middle">planning targets by iteration</text>"#,
        left + w / 2.0
    );
    for (k, row) in binned.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{row_h}" fill="{}"/>"#,
                left + b as f64 * cw,
                top + k as f64 * row_h,
                cw + 0.05,
                sequential((v - vmin) / span)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-size="12" text-anchor="end">R({k})</text>"#,
            left - 8.0,
            top + (k as f64 + 0.6) * row_h
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">dataset record (0 to {})</text>"#,
        left + w / 2.0,
        top + h + 30.0,
        n - 1
    );
    colorbar(
        &mut svg,
        left + w + 20.0,
        top,
        h,
        &format!("{vmin:.3}"),
        &format!("{vmax:.3}"),
        sequential_stops(),
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[allow(clippy::too_many_arguments)]
fn axis_labels(svg: &mut String, left: f64, top: f64, w: f64, h: f64, xs: &[f64], vs: &[f64], xl: &str, vl: &str) {
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let (v0, v1) = (vs[0], vs[vs.len() - 1]);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="{}" font-size="11" text-anchor="start">{x0}</text>"#,
        top + h + 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{x1}</text>"#,
        left + w,
        top + h + 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{xl}</text>"#,
        left + w / 2.0,
        top + h + 35.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v1}</text>"#,
        left - 6.0,
        top + 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v0}</text>"#,
        left - 6.0,
        top + h
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 18 {})">{vl}</text>"#,
        top + h / 2.0,
        top + h / 2.0
    );
}

fn colorbar(svg: &mut String, x: f64, top: f64, h: f64, lo: &str, hi: &str, stops: Vec<(f64, String)>) {
    let id = format!("bar{}", stops.len());
    let _ = writeln!(svg, r#"<defs><linearGradient id="{id}" x1="0" y1="1" x2="0" y2="0">"#);
    for (offset, color) in stops {
        let _ = writeln!(svg, r#"<stop offset="{offset}" stop-color="{color}"/>"#);
    }
    let _ = writeln!(svg, "</linearGradient></defs>");
    let _ = writeln!(
        svg,
        r#"<rect x="{x}" y="{top}" width="14" height="{h:.2}" fill="url(#{id})" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11">{hi}</text>"#,
        x + 18.0,
        top + 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11">{lo}</text>"#,
        x + 18.0,
        top + h
    );
}

fn mix(from: [f64; 3], to: [f64; 3], t: f64) -> String {
    let c: Vec<u8> = (0..3)
        .map(|i| (from[i] + (to[i] - from[i]) * t).round().clamp(0.0, 255.0) as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

const BLUE: [f64; 3] = [33.0, 102.0, 172.0];
const RED: [f64; 3] = [178.0, 24.0, 43.0];
const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const DARK: [f64; 3] = [8.0, 48.0, 107.0];

/// White at zero, blue toward -1, red toward +1.
fn diverging(a: f64) -> String {
    let a = a.clamp(-1.0, 1.0);
    if a < 0.0 {
        mix(WHITE, BLUE, -a)
    } else {
        mix(WHITE, RED, a)
    }
}

fn diverging_stops() -> Vec<(f64, String)> {
    vec![(0.0, diverging(-1.0)), (0.5, diverging(0.0)), (1.0, diverging(1.0))]
}

fn sequential(t: f64) -> String {
    mix(WHITE, DARK, t.clamp(0.0, 1.0))
}

fn sequential_stops() -> Vec<(f64, String)> {
    vec![(0.0, sequential(0.0)), (1.0, sequential(1.0))]
}
