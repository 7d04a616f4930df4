//! Field CSV and PGM raster exports.
//!
//! Sample points are the cell centers of a `grid[0] × … × grid[n−1]` lattice
//! on each Ω box, boxes in configuration order, first axis fastest.

use std::fmt::Write as _;
use std::io::{self, Write};

use wildgrad_core::field::{FieldTree, FieldValue};
use wildgrad_core::geometry::Mat;
use wildgrad_core::scenario::Scenario;

use crate::config::Component;

/// Sample points of every Ω box.
pub fn grid_points(field: &FieldTree, grid: &[usize]) -> Vec<Vec<f64>> {
    let n = field.n();
    let mut out = Vec::new();
    for b in &field.domain.boxes {
        let counts: Vec<usize> = (0..n).map(|i| grid[i.min(grid.len() - 1)]).collect();
        let mut idx = vec![0usize; n];
        loop {
            out.push((0..n).map(|i| b.lo(i) + (idx[i] as f64 + 0.5) * b.side() / counts[i] as f64).collect());
            let mut i = 0;
            while i < n {
                idx[i] += 1;
                if idx[i] < counts[i] {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
        }
    }
    out
}

/// `|σ(Du) − V|` (Frobenius).
pub fn graph_gap(s: &Scenario, v: &FieldValue) -> f64 {
    let sd: Mat = (s.sigma)(&v.du);
    sd.data.iter().zip(&v.v.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn write_field_csv(s: &Scenario, field: &FieldTree, grid: &[usize], w: &mut dyn Write) -> io::Result<()> {
    let n = field.n();
    let m = field.base.grad.rows;
    let mut head: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
    head.extend((1..=m).map(|i| format!("u_{i}")));
    for name in ["Du", "V"] {
        for i in 1..=m {
            head.extend((1..=n).map(|j| format!("{name}_{i}{j}")));
        }
    }
    head.push("graph_gap".into());
    writeln!(w, "{}", head.join(","))?;
    let mut line = String::new();
    for x in grid_points(field, grid) {
        let v = field.eval(&x);
        line.clear();
        let vals = x.iter().chain(&v.u).chain(v.du.data.iter()).chain(v.v.data.iter()).copied().chain([graph_gap(s, &v)]);
        for (k, val) in vals.enumerate() {
            if k > 0 {
                line.push(',');
            }
            write!(line, "{val:.16e}").expect("writing to a string");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Height of the strip image for a one-dimensional domain.
pub const STRIP_HEIGHT: usize = 16;

pub fn component_value(s: &Scenario, v: &FieldValue, c: Component) -> f64 {
    match c {
        Component::DuNorm => v.du.norm(),
        Component::BranchLabel => v.pin.map_or(0.0, |p| p.corner as f64),
        Component::GraphGap => graph_gap(s, v),
    }
}

/// An 8-bit grayscale raster and the range mapped to `0..=255`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub min: f64,
    pub max: f64,
}

/// Raster of the first Ω box: one pixel per grid point for n = 2, a strip
/// of [`STRIP_HEIGHT`] identical rows for n = 1.
pub fn raster(s: &Scenario, field: &FieldTree, grid: &[usize], c: Component) -> Result<Raster, String> {
    let n = field.n();
    if n > 2 {
        return Err(format!("rasters need n = 1 or n = 2, got n = {n}"));
    }
    let b = &field.domain.boxes[0];
    let width = grid[0];
    let rows = if n == 2 { grid[1.min(grid.len() - 1)] } else { 1 };
    let mut vals = Vec::with_capacity(width * rows);
    // Image rows run top to bottom, so the second axis is flipped.
    for r in (0..rows).rev() {
        for col in 0..width {
            let mut x = vec![b.lo(0) + (col as f64 + 0.5) * b.side() / width as f64];
            if n == 2 {
                x.push(b.lo(1) + (r as f64 + 0.5) * b.side() / rows as f64);
            }
            vals.push(component_value(s, &field.eval(&x), c));
        }
    }
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    let line: Vec<u8> = vals.iter().map(|v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8).collect();
    let (height, pixels) = if n == 1 { (STRIP_HEIGHT, line.repeat(STRIP_HEIGHT)) } else { (rows, line) };
    Ok(Raster { width, height, pixels, min, max })
}

pub fn write_pgm(r: &Raster, w: &mut dyn Write) -> io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", r.width, r.height)?;
    w.write_all(&r.pixels)
}

/// Sidecar text describing the normalization of a raster.
pub fn sidecar(r: &Raster, c: Component) -> String {
    format!(
        "component = {c:?}\nmin = {:.16e}\nmax = {:.16e}\nmapping = round(255 * (value - min) / (max - min)), 0 when max = min\n",
        r.min, r.max
    )
}
