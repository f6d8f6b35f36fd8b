//! Marching-squares level-set extraction on a regular 2-D grid.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub const MIN_RESOLUTION: usize = 16;
/// Bisection steps applied along the generating edge of each vertex.
pub const REFINE_STEPS: usize = 3;
/// Fields whose range is below this are reported as constant.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) && x_min < x_max && y_min < y_max;
        if !ok {
            return Err(arg_err(format!("invalid box [{x_min}, {x_max}] × [{y_min}, {y_max}]")));
        }
        Ok(Self { x_min, x_max, y_min, y_max })
    }

    pub fn square(half: f64) -> Result<Self> {
        Self::new(-half, half, -half, half)
    }

    /// Largest distance from the origin to a corner.
    pub fn corner_norm(&self) -> f64 {
        let x = self.x_min.abs().max(self.x_max.abs());
        let y = self.y_min.abs().max(self.y_max.abs());
        x.hypot(y)
    }
}

/// Regular grid with `resolution` cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bbox: BBox,
    pub resolution: usize,
}

impl Grid {
    pub fn new(bbox: BBox, resolution: usize) -> Result<Self> {
        if resolution < MIN_RESOLUTION {
            return Err(arg_err(format!("resolution must be at least {MIN_RESOLUTION}, got {resolution}")));
        }
        Ok(Self { bbox, resolution })
    }

    pub fn dx(&self) -> f64 {
        (self.bbox.x_max - self.bbox.x_min) / self.resolution as f64
    }

    pub fn dy(&self) -> f64 {
        (self.bbox.y_max - self.bbox.y_min) / self.resolution as f64
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.dx().hypot(self.dy())
    }

    /// Grid node `(row i, column j)`.
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        [self.bbox.x_min + j as f64 * self.dx(), self.bbox.y_min + i as f64 * self.dy()]
    }

    /// `f` at every node, rows evaluated in parallel. `values[i][j]` is node `(i, j)`.
    pub fn evaluate<F>(&self, f: &F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn([f64; 2]) -> Result<f64> + Sync,
    {
        let n = self.resolution + 1;
        (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| f(self.node(i, j))).collect())
            .collect()
    }
}

/// Grid edge: `(0, i, j)` joins nodes `(i, j)`–`(i, j+1)`, `(1, i, j)` joins `(i, j)`–`(i+1, j)`.
pub type EdgeId = (u8, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourVertex {
    pub point: [f64; 2],
    /// Endpoints of the grid edge the vertex was found on.
    pub edge: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub vertices: Vec<ContourVertex>,
    /// The last vertex connects back to the first.
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub grid: Grid,
    pub level: f64,
    pub polylines: Vec<Polyline>,
    /// The field was constant on the grid and was not contoured.
    pub degenerate: bool,
    pub field_min: f64,
    pub field_max: f64,
}

impl Contour {
    pub fn vertices(&self) -> impl Iterator<Item = &ContourVertex> {
        self.polylines.iter().flat_map(|p| &p.vertices)
    }

    pub fn num_vertices(&self) -> usize {
        self.polylines.iter().map(|p| p.vertices.len()).sum()
    }
}

/// Point on segment `a→b` where the linear interpolant of `(fa, fb)` hits `level`.
fn interpolate(a: [f64; 2], b: [f64; 2], fa: f64, fb: f64, level: f64) -> [f64; 2] {
    let t = if fb == fa { 0.5 } else { ((level - fa) / (fb - fa)).clamp(0.0, 1.0) };
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Narrows the sign-changing bracket `[a, b]` by `steps` bisections, then interpolates.
pub fn refine_on_edge<F>(f: &F, a: [f64; 2], b: [f64; 2], fa: f64, fb: f64, level: f64, steps: usize) -> Result<[f64; 2]>
where
    F: Fn([f64; 2]) -> Result<f64>,
{
    if fa == level {
        return Ok(a);
    }
    if fb == level {
        return Ok(b);
    }
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    for _ in 0..steps {
        let m = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let fm = f(m)?;
        if fm == level {
            return Ok(m);
        }
        if (fa - level) * (fm - level) < 0.0 {
            b = m;
            fb = fm;
        } else {
            a = m;
            fa = fm;
        }
    }
    Ok(interpolate(a, b, fa, fb, level))
}

/// Extracts `{p : f(p) = level}` as polylines.
pub fn marching_squares<F>(grid: Grid, level: f64, f: F) -> Result<Contour>
where
    F: Fn([f64; 2]) -> Result<f64> + Sync,
{
    if !level.is_finite() {
        return Err(arg_err(format!("level must be finite, got {level}")));
    }
    let values = grid.evaluate(&f)?;
    let (field_min, field_max) = values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let mut contour = Contour { grid, level, polylines: Vec::new(), degenerate: false, field_min, field_max };
    if field_max - field_min < DEGENERATE_RANGE {
        contour.degenerate = true;
        return Ok(contour);
    }

    let res = grid.resolution;
    let above = |i: usize, j: usize| values[i][j] > level;
    let mut segments: Vec<(EdgeId, EdgeId)> = Vec::new();
    for i in 0..res {
        for j in 0..res {
            // corners: 0 = (i, j), 1 = (i, j+1), 2 = (i+1, j+1), 3 = (i+1, j)
            let case = u8::from(above(i, j))
                | u8::from(above(i, j + 1)) << 1
                | u8::from(above(i + 1, j + 1)) << 2
                | u8::from(above(i + 1, j)) << 3;
            let bottom = (0, i, j);
            let right = (1, i, j + 1);
            let top = (0, i + 1, j);
            let left = (1, i, j);
            let center_above = || {
                (values[i][j] + values[i][j + 1] + values[i + 1][j + 1] + values[i + 1][j]) / 4.0 > level
            };
            match case {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((right, top)),
                6 | 9 => segments.push((bottom, top)),
                7 | 8 => segments.push((left, top)),
                5 => {
                    // corners 0 and 2 above
                    if center_above() {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    } else {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    }
                }
                10 => {
                    // corners 1 and 3 above
                    if center_above() {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    } else {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    let mut vertex_cache: HashMap<EdgeId, ContourVertex> = HashMap::new();
    let mut vertex = |e: EdgeId| -> Result<ContourVertex> {
        if let Some(v) = vertex_cache.get(&e) {
            return Ok(*v);
        }
        let (dir, i, j) = e;
        let (ia, ja, ib, jb) = if dir == 0 { (i, j, i, j + 1) } else { (i, j, i + 1, j) };
        let (a, b) = (grid.node(ia, ja), grid.node(ib, jb));
        let point = refine_on_edge(&f, a, b, values[ia][ja], values[ib][jb], level, REFINE_STEPS)?;
        let v = ContourVertex { point, edge: [a, b] };
        vertex_cache.insert(e, v);
        Ok(v)
    };

    for (chain, closed) in join_segments(&segments) {
        let vertices = chain.into_iter().map(&mut vertex).collect::<Result<_>>()?;
        contour.polylines.push(Polyline { vertices, closed });
    }
    Ok(contour)
}

/// Chains segments sharing edge ids into polylines, open chains first.
fn join_segments(segments: &[(EdgeId, EdgeId)]) -> Vec<(Vec<EdgeId>, bool)> {
    let mut incident: HashMap<EdgeId, Vec<usize>> = HashMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        incident.entry(*a).or_default().push(s);
        incident.entry(*b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();

    let walk = |start_seg: usize, start_edge: EdgeId, used: &mut Vec<bool>| -> Vec<EdgeId> {
        let mut chain = vec![start_edge];
        let (mut seg, mut at) = (start_seg, start_edge);
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == at { b } else { a };
            chain.push(next);
            at = next;
            match incident[&at].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => break,
            }
        }
        chain
    };

    // Open chains start at edges with a single incident segment (the grid boundary).
    for s in 0..segments.len() {
        if used[s] {
            continue;
        }
        for end in [segments[s].0, segments[s].1] {
            if incident[&end].len() == 1 {
                out.push((walk(s, end, &mut used), false));
                break;
            }
        }
    }
    for s in 0..segments.len() {
        if !used[s] {
            let mut chain = walk(s, segments[s].0, &mut used);
            if chain.len() > 1 && chain.first() == chain.last() {
                chain.pop();
            }
            out.push((chain, true));
        }
    }
    out
}

/// Number of grid nodes with `f ≤ level`, and the corresponding area estimate.
pub fn sublevel_area<F>(grid: Grid, level: f64, f: F) -> Result<(usize, f64)>
where
    F: Fn([f64; 2]) -> Result<f64> + Sync,
{
    let values = grid.evaluate(&f)?;
    let count = values.iter().flatten().filter(|v| **v <= level).count();
    Ok((count, count as f64 * grid.dx() * grid.dy()))
}

#[derive(Serialize)]
struct CsvRow {
    polyline_id: usize,
    vertex_index: usize,
    coord1: f64,
    coord2: f64,
}

/// CSV `(polyline_id, vertex_index, coord1, coord2)`.
pub fn write_contour_csv<W: std::io::Write>(w: W, contour: &Contour) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (pid, poly) in contour.polylines.iter().enumerate() {
        for (vi, v) in poly.vertices.iter().enumerate() {
            out.serialize(CsvRow { polyline_id: pid, vertex_index: vi, coord1: v.point[0], coord2: v.point[1] })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Extraction settings and summary written next to a contour CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourMetadata {
    pub bbox: BBox,
    pub resolution: usize,
    pub level: f64,
    pub degenerate: bool,
    pub polylines: usize,
    pub vertices: usize,
    pub refine_steps: usize,
    pub field_min: f64,
    pub field_max: f64,
    pub note: String,
}

impl ContourMetadata {
    pub fn new(contour: &Contour, note: impl Into<String>) -> Self {
        Self {
            bbox: contour.grid.bbox,
            resolution: contour.grid.resolution,
            level: contour.level,
            degenerate: contour.degenerate,
            polylines: contour.polylines.len(),
            vertices: contour.num_vertices(),
            refine_steps: REFINE_STEPS,
            field_min: contour.field_min,
            field_max: contour.field_max,
            note: note.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn circle(p: [f64; 2]) -> Result<f64> {
        Ok(p[0].hypot(p[1]))
    }

    #[test]
    fn circle_is_one_closed_loop() {
        let grid = Grid::new(BBox::square(2.0).unwrap(), 64).unwrap();
        let c = marching_squares(grid, 1.0, circle).unwrap();
        assert_eq!(c.polylines.len(), 1);
        assert!(c.polylines[0].closed);
        for v in c.vertices() {
            assert_abs_diff_eq!(circle(v.point).unwrap(), 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn line_crossing_box_is_open() {
        let grid = Grid::new(BBox::square(1.0).unwrap(), 16).unwrap();
        let c = marching_squares(grid, 0.25, |p| Ok(p[0] + 2.0 * p[1])).unwrap();
        assert_eq!(c.polylines.len(), 1);
        assert!(!c.polylines[0].closed);
        for v in c.vertices() {
            assert_abs_diff_eq!(v.point[0] + 2.0 * v.point[1], 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_field_is_degenerate() {
        let grid = Grid::new(BBox::square(1.0).unwrap(), 16).unwrap();
        let c = marching_squares(grid, 0.0, |_| Ok(3.0)).unwrap();
        assert!(c.degenerate && c.polylines.is_empty());
        let c = marching_squares(grid, 5.0, |p| Ok(p[0])).unwrap();
        assert!(!c.degenerate && c.polylines.is_empty());
    }

    #[test]
    fn saddle_uses_center_value() {
        let grid = Grid::new(BBox::square(1.0).unwrap(), 16).unwrap();
        let c = marching_squares(grid, 0.01, |p| Ok(p[0] * p[1])).unwrap();
        // two hyperbola branches, each open at the box boundary
        assert_eq!(c.polylines.len(), 2);
        assert!(c.polylines.iter().all(|p| !p.closed));
    }

    #[test]
    fn rejects_coarse_grid() {
        assert!(Grid::new(BBox::square(1.0).unwrap(), 8).is_err());
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn csv_layout_and_area() {
        let grid = Grid::new(BBox::square(2.0).unwrap(), 32).unwrap();
        let c = marching_squares(grid, 1.0, circle).unwrap();
        let mut buf = Vec::new();
        write_contour_csv(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("polyline_id,vertex_index,coord1,coord2\n"));
        assert_eq!(text.lines().count(), c.num_vertices() + 1);
        let (_, area) = sublevel_area(grid, 1.0, circle).unwrap();
        assert!((area - std::f64::consts::PI).abs() < 0.3);
    }
}
