//! Deterministic SVG scatter plots of cell tables.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::Slide;
use crate::error::{Error, Result};
use crate::metrics::kde_likelihood;

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorBy {
    /// Type label, falling back to the sample id.
    Type,
    /// Sample id, falling back to the type label.
    SampleId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeOverlay {
    pub sigma: f64,
    /// Grid nodes per axis.
    pub nodes: usize,
    /// Contour levels in likelihood units (0, 1].
    pub levels: Vec<f64>,
}

impl Default for KdeOverlay {
    fn default() -> Self {
        Self { sigma: 0.1, nodes: 40, levels: vec![0.05, 0.15, 0.3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    pub panel_size: f64,
    pub margin: f64,
    pub point_radius: f64,
    pub color_by: ColorBy,
    pub kde: Option<KdeOverlay>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { panel_size: 320.0, margin: 24.0, point_radius: 1.6, color_by: ColorBy::Type, kde: None }
    }
}

/// Likelihood surface on a regular grid: `values[iy * nodes + ix]` is the
/// density at `(xs[ix], ys[iy])`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
}

/// Evaluates [`kde_likelihood`] at every node of a `nodes × nodes` grid
/// spanning `lo..=hi`.
pub fn kde_grid(samples: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2], nodes: usize, sigma: f64) -> Result<KdeGrid> {
    if nodes < 2 {
        return Err(Error::Parameter(format!("a kde grid needs at least 2 nodes per axis, got {nodes}")));
    }
    let axis = |a: usize| -> Vec<f64> {
        (0..nodes).map(|i| lo[a] + (hi[a] - lo[a]) * i as f64 / (nodes - 1) as f64).collect()
    };
    let (xs, ys) = (axis(0), axis(1));
    let mut values = Vec::with_capacity(nodes * nodes);
    for &y in &ys {
        for &x in &xs {
            values.push(kde_likelihood(samples, [x, y], sigma)?);
        }
    }
    Ok(KdeGrid { xs, ys, values })
}

/// Marching-squares segments of `grid` at `level`, in data coordinates.
pub fn contour_segments(grid: &KdeGrid, level: f64) -> Vec<[[f64; 2]; 2]> {
    let (nx, ny) = (grid.xs.len(), grid.ys.len());
    let v = |ix: usize, iy: usize| grid.values[iy * nx + ix];
    let mut out = Vec::new();
    for iy in 0..ny.saturating_sub(1) {
        for ix in 0..nx.saturating_sub(1) {
            // corners counter-clockwise from bottom-left
            let c = [(ix, iy), (ix + 1, iy), (ix + 1, iy + 1), (ix, iy + 1)];
            let vals = c.map(|(x, y)| v(x, y));
            let point = |(x, y): (usize, usize)| [grid.xs[x], grid.ys[y]];
            let cross = |a: usize, b: usize| {
                let (pa, pb) = (point(c[a]), point(c[b]));
                let w = (level - vals[a]) / (vals[b] - vals[a]);
                [pa[0] + w * (pb[0] - pa[0]), pa[1] + w * (pb[1] - pa[1])]
            };
            let edges: Vec<[f64; 2]> = (0..4)
                .filter(|&e| (vals[e] >= level) != (vals[(e + 1) % 4] >= level))
                .map(|e| cross(e, (e + 1) % 4))
                .collect();
            match edges.len() {
                2 => out.push([edges[0], edges[1]]),
                4 => {
                    out.push([edges[0], edges[1]]);
                    out.push([edges[2], edges[3]]);
                }
                _ => {}
            }
        }
    }
    out
}

fn color(slide: &Slide, i: usize, by: ColorBy) -> &'static str {
    let ty = slide.types.as_ref().map(|t| t[i] as u64);
    let id = slide.sample_ids.as_ref().map(|s| s[i]);
    let key = match by {
        ColorBy::Type => ty.or(id),
        ColorBy::SampleId => id.or(ty),
    };
    key.map_or("#444444", |k| PALETTE[(k % PALETTE.len() as u64) as usize])
}

/// One panel per time index, in ascending order, all sharing the bounding
/// box of every plotted cell. Each cell is exactly one `<circle>`.
pub fn scatter_svg(slides: &[Slide], cfg: &PlotConfig) -> Result<String> {
    let total: usize = slides.iter().map(Slide::len).sum();
    if total == 0 {
        return Err(Error::Degenerate("nothing to plot".into()));
    }
    let mut panels: BTreeMap<usize, Vec<&Slide>> = BTreeMap::new();
    slides.iter().filter(|s| !s.is_empty()).for_each(|s| panels.entry(s.time_index).or_default().push(s));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in slides.iter().flat_map(|s| &s.coords) {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let (size, m) = (cfg.panel_size, cfg.margin);
    let sx = |x: f64| m + (x - lo[0]) / span * (size - 2.0 * m);
    let sy = |y: f64| size - m - (y - lo[1]) / span * (size - 2.0 * m);
    let width = size * panels.len() as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{size:.0}" viewBox="0 0 {width:.0} {size:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width:.0}" height="{size:.0}" fill="white"/>"#);
    for (p, (t, group)) in panels.iter().enumerate() {
        let _ = writeln!(svg, r#"<g class="panel" data-time="{t}" transform="translate({:.0},0)">"#, p as f64 * size);
        let _ = writeln!(
            svg,
            r##"<rect x="0.5" y="0.5" width="{:.0}" height="{:.0}" fill="none" stroke="#cccccc"/>"##,
            size - 1.0,
            size - 1.0
        );
        let _ = writeln!(svg, r#"<text x="{m:.0}" y="{:.0}" font-family="sans-serif" font-size="12">t = {t}</text>"#, m * 0.7);
        for s in group {
            for i in 0..s.len() {
                let [x, y] = s.coords[i];
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="{}" fill="{}"/>"#,
                    sx(x),
                    sy(y),
                    cfg.point_radius,
                    color(s, i, cfg.color_by)
                );
            }
        }
        if let Some(k) = &cfg.kde {
            let pts: Vec<[f64; 2]> = group.iter().flat_map(|s| s.coords.iter().copied()).collect();
            let grid = kde_grid(&pts, lo, [lo[0] + span, lo[1] + span], k.nodes, k.sigma)?;
            for level in &k.levels {
                let mut d = String::new();
                for [a, b] in contour_segments(&grid, *level) {
                    let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", sx(a[0]), sy(a[1]), sx(b[0]), sy(b[1]));
                }
                if !d.is_empty() {
                    let _ = writeln!(
                        svg,
                        r##"<path class="kde" data-level="{level}" d="{d}" fill="none" stroke="#333333" stroke-width="0.8"/>"##
                    );
                }
            }
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
