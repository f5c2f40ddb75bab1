//! Uniform space-time grids, grid-valued fields and multilinear interpolation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Snap `s` to the nearest integer when it is within rounding noise of it,
/// so that queries at node coordinates hit stored values exactly.
fn snap(s: f64) -> f64 {
    let r = s.round();
    if (s - r).abs() <= 1e-10 * r.abs().max(1.0) {
        r
    } else {
        s
    }
}

/// Uniform tensor grid on `[lo, hi]` times the uniform partition of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    horizon: f64,
    time_steps: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    nodes: Vec<usize>,
    #[serde(skip)]
    strides: Vec<usize>,
}

impl SpaceTimeGrid {
    pub fn new(horizon: f64, time_steps: usize, lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if time_steps == 0 {
            return Err(Error::InvalidArgument("time_steps must be >= 1".into()));
        }
        let d = lo.len();
        if d == 0 || hi.len() != d || nodes.len() != d {
            return Err(Error::InvalidArgument(format!(
                "grid bounds/nodes must share a positive dimension (lo {}, hi {}, nodes {})",
                lo.len(),
                hi.len(),
                nodes.len()
            )));
        }
        for i in 0..d {
            if !(lo[i] < hi[i]) || !lo[i].is_finite() || !hi[i].is_finite() {
                return Err(Error::InvalidArgument(format!("grid dim {i}: need lo < hi, got [{}, {}]", lo[i], hi[i])));
            }
            if nodes[i] < 2 {
                return Err(Error::InvalidArgument(format!("grid dim {i}: need >= 2 nodes, got {}", nodes[i])));
            }
        }
        let strides = Self::row_major_strides(&nodes);
        Ok(Self {
            horizon,
            time_steps,
            lo,
            hi,
            nodes,
            strides,
        })
    }

    fn row_major_strides(nodes: &[usize]) -> Vec<usize> {
        let mut strides = vec![1; nodes.len()];
        for i in (0..nodes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * nodes[i + 1];
        }
        strides
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn time_steps(&self) -> usize {
        self.time_steps
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.time_steps as f64
    }
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }
    pub fn dim(&self) -> usize {
        self.lo.len()
    }
    pub fn lo(&self) -> &[f64] {
        &self.lo
    }
    pub fn hi(&self) -> &[f64] {
        &self.hi
    }
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
    pub fn mesh(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / (self.nodes[i] - 1) as f64
    }
    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.mesh(i)).product()
    }

    /// Multi-index of flat node `k`.
    pub fn multi_index(&self, k: usize, out: &mut [usize]) {
        let mut rem = k;
        for i in 0..self.dim() {
            out[i] = rem / self.strides[i];
            rem %= self.strides[i];
        }
    }

    /// Spatial coordinate of flat node `k`, computed as `lo + idx * h`.
    pub fn node_coords(&self, k: usize, out: &mut [f64]) {
        let mut rem = k;
        for i in 0..self.dim() {
            let idx = rem / self.strides[i];
            rem %= self.strides[i];
            out[i] = self.lo[i] + idx as f64 * self.mesh(i);
        }
    }

    pub fn node_point(&self, k: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_coords(k, &mut x);
        x
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        let mut rem = k;
        for i in 0..self.dim() {
            let idx = rem / self.strides[i];
            rem %= self.strides[i];
            if idx == 0 || idx + 1 == self.nodes[i] {
                return true;
            }
        }
        false
    }

    /// Time index `floor(t / dt)` capped at `M`.
    pub fn time_index(&self, t: f64) -> usize {
        let s = snap(t / self.dt());
        if s <= 0.0 {
            0
        } else {
            (s.floor() as usize).min(self.time_steps)
        }
    }

    /// Nonnegative tent weights of the `2^d` corners of the cell containing
    /// the clamped point. Returns the base node; corner `c` (bit `i` set means
    /// upper in dim `i`) has weight `weights[c]`.
    pub fn corner_weights(&self, x: &[f64], weights: &mut [f64]) -> usize {
        let d = self.dim();
        let mut base = 0;
        let mut frac = [0.0f64; 8];
        for i in 0..d {
            let h = self.mesh(i);
            let xi = x[i].clamp(self.lo[i], self.hi[i]);
            let s = snap((xi - self.lo[i]) / h);
            let cell = (s.floor() as usize).min(self.nodes[i] - 2);
            frac[i] = (s - cell as f64).clamp(0.0, 1.0);
            base += cell * self.strides[i];
        }
        for (c, w) in weights.iter_mut().enumerate().take(1 << d) {
            let mut prod = 1.0;
            for (i, f) in frac.iter().enumerate().take(d) {
                prod *= if c >> i & 1 == 1 { *f } else { 1.0 - *f };
            }
            *w = prod;
        }
        base
    }

    /// Flat offset of corner `c` relative to the cell's base node.
    #[inline]
    pub fn corner_offset(&self, c: usize) -> usize {
        (0..self.dim()).filter(|i| c >> i & 1 == 1).map(|i| self.strides[i]).sum()
    }

    pub(crate) fn validate_point(x: &[f64]) -> Result<()> {
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite query coordinate x{} = {}", i + 1, x[i])));
        }
        Ok(())
    }
}

/// Values on every `(time, node)` of a grid with `c` components.
///
/// Layout is time-major, then row-major spatial index, then component.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: SpaceTimeGrid,
    components: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: SpaceTimeGrid, components: usize) -> Self {
        Self::constant(grid, components, 0.0)
    }

    pub fn constant(grid: SpaceTimeGrid, components: usize, value: f64) -> Self {
        let len = (grid.time_steps() + 1) * grid.node_count() * components;
        Self {
            grid,
            components,
            values: vec![value; len],
        }
    }

    pub fn from_values(grid: SpaceTimeGrid, components: usize, values: Vec<f64>) -> Result<Self> {
        let len = (grid.time_steps() + 1) * grid.node_count() * components;
        if components == 0 || values.len() != len {
            return Err(Error::Dimension {
                context: "grid field values",
                expected: len,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid field value {i} is not finite")));
        }
        Ok(Self { grid, components, values })
    }

    /// Samples `f(t, x, out)` at every grid node.
    pub fn from_fn(grid: SpaceTimeGrid, components: usize, mut f: impl FnMut(f64, &[f64], &mut [f64])) -> Self {
        let mut field = Self::zeros(grid, components);
        let mut x = vec![0.0; field.grid.dim()];
        for j in 0..=field.grid.time_steps() {
            let t = field.grid.time(j);
            for k in 0..field.grid.node_count() {
                field.grid.node_coords(k, &mut x);
                let at = field.index(j, k);
                f(t, &x, &mut field.values[at..at + components]);
            }
        }
        field
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }
    pub fn components(&self) -> usize {
        self.components
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, j: usize, k: usize) -> usize {
        (j * self.grid.node_count() + k) * self.components
    }

    pub fn at(&self, j: usize, k: usize) -> &[f64] {
        let i = self.index(j, k);
        &self.values[i..i + self.components]
    }

    pub fn at_mut(&mut self, j: usize, k: usize) -> &mut [f64] {
        let i = self.index(j, k);
        &mut self.values[i..i + self.components]
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let len = self.grid.node_count() * self.components;
        &self.values[j * len..(j + 1) * len]
    }

    pub fn slice_mut(&mut self, j: usize) -> &mut [f64] {
        let len = self.grid.node_count() * self.components;
        &mut self.values[j * len..(j + 1) * len]
    }

    /// Multilinear interpolation at time slice `j`, clamped to the box.
    pub fn interp_at(&self, j: usize, x: &[f64], out: &mut [f64]) {
        interp_slice(&self.grid, self.components, self.slice(j), x, out);
    }

    /// Interpolation at time `t` (piecewise constant in time) and point `x`.
    pub fn interpolate(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        GridSpaceCheck::check(&self.grid, x)?;
        if !(t >= 0.0 && t <= self.grid.horizon() * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, {}]", self.grid.horizon())));
        }
        let mut out = vec![0.0; self.components];
        self.interp_at(self.grid.time_index(t), x, &mut out);
        Ok(out)
    }

    /// Componentwise `(min, max)` per time slice.
    pub fn max_principle_check(&self) -> Vec<Vec<(f64, f64)>> {
        (0..=self.grid.time_steps())
            .map(|j| {
                let mut ext = vec![(f64::INFINITY, f64::NEG_INFINITY); self.components];
                for node in self.slice(j).chunks_exact(self.components) {
                    for (e, &v) in ext.iter_mut().zip(node) {
                        e.0 = e.0.min(v);
                        e.1 = e.1.max(v);
                    }
                }
                ext
            })
            .collect()
    }

    /// Writes the `t, x1..xd, c1..cc` CSV export (17 significant digits).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.grid.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.extend((1..=self.components).map(|i| format!("c{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        let mut x = vec![0.0; d];
        let mut row: Vec<String> = Vec::with_capacity(1 + d + self.components);
        for j in 0..=self.grid.time_steps() {
            let t = self.grid.time(j);
            for k in 0..self.grid.node_count() {
                self.grid.node_coords(k, &mut x);
                row.clear();
                row.push(fmt17(t));
                row.extend(x.iter().map(|&v| fmt17(v)));
                row.extend(self.at(j, k).iter().map(|&v| fmt17(v)));
                wr.write_record(&row).map_err(csv_err)?;
            }
        }
        wr.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Parses the CSV export, reconstructing the grid from the coordinates.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let d = header.iter().filter(|h| h.starts_with('x')).count();
        let c = header.iter().filter(|h| h.starts_with('c')).count();
        if header.get(0) != Some("t") || d == 0 || c == 0 || header.len() != 1 + d + c {
            return Err(Error::Csv(format!("unexpected header {:?}", header)));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))?;
            if row.len() != 1 + d + c {
                return Err(Error::Csv(format!("row {} has {} fields", line + 2, row.len())));
            }
            rows.push(row);
        }
        let distinct = |col: usize| {
            let mut v: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            v.dedup();
            v
        };
        let times = distinct(0);
        if times.len() < 2 {
            return Err(Error::Csv("need at least two time slices".into()));
        }
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        let mut nodes = Vec::with_capacity(d);
        for i in 0..d {
            let xs = distinct(1 + i);
            lo.push(xs[0]);
            hi.push(*xs.last().expect("nonempty"));
            nodes.push(xs.len());
        }
        let grid = SpaceTimeGrid::new(*times.last().expect("nonempty"), times.len() - 1, lo, hi, nodes)
            .map_err(|e| Error::Csv(e.to_string()))?;
        let expected = (grid.time_steps() + 1) * grid.node_count();
        if rows.len() != expected {
            return Err(Error::Csv(format!("expected {expected} rows, found {}", rows.len())));
        }
        let mut x = vec![0.0; d];
        let mut values = Vec::with_capacity(expected * c);
        for (n, row) in rows.iter().enumerate() {
            let (j, k) = (n / grid.node_count(), n % grid.node_count());
            grid.node_coords(k, &mut x);
            let tol = 1e-9 * (1.0 + grid.horizon());
            let misplaced = (row[0] - grid.time(j)).abs() > tol
                || (0..d).any(|i| (row[1 + i] - x[i]).abs() > 1e-9 * (1.0 + x[i].abs()));
            if misplaced {
                return Err(Error::Csv(format!("row {} is out of (time, node) order", n + 2)));
            }
            values.extend_from_slice(&row[1 + d..]);
        }
        GridField::from_values(grid, c, values).map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

struct GridSpaceCheck;

impl GridSpaceCheck {
    fn check(grid: &SpaceTimeGrid, x: &[f64]) -> Result<()> {
        if x.len() != grid.dim() {
            return Err(Error::Dimension {
                context: "interpolation point",
                expected: grid.dim(),
                got: x.len(),
            });
        }
        SpaceTimeGrid::validate_point(x)
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Interpolates one time slice (`nodes x components`) at `x`.
pub fn interp_slice(grid: &SpaceTimeGrid, components: usize, slice: &[f64], x: &[f64], out: &mut [f64]) {
    let mut w = [0.0f64; 8];
    let base = grid.corner_weights(x, &mut w);
    out[..components].fill(0.0);
    for (c, &wc) in w.iter().enumerate().take(1 << grid.dim()) {
        if wc == 0.0 {
            continue;
        }
        let node = base + grid.corner_offset(c);
        let vals = &slice[node * components..(node + 1) * components];
        for (o, v) in out.iter_mut().zip(vals) {
            *o += wc * v;
        }
    }
}

/// A feedback control: multilinear in space, piecewise constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField(pub GridField);

impl PolicyField {
    pub fn zeros(grid: SpaceTimeGrid, control_dim: usize) -> Self {
        PolicyField(GridField::zeros(grid, control_dim))
    }

    pub fn field(&self) -> &GridField {
        &self.0
    }

    pub fn field_mut(&mut self) -> &mut GridField {
        &mut self.0
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        self.0.grid()
    }

    pub fn control_dim(&self) -> usize {
        self.0.components()
    }

    /// `psi(t, x)` with the time slice chosen by `floor(t / dt)`.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let j = self.grid().time_index(t);
        self.0.interp_at(j, x, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid_1d() -> SpaceTimeGrid {
        SpaceTimeGrid::new(1.0, 4, vec![0.0], vec![1.0], vec![2]).unwrap()
    }

    #[test]
    fn midpoint_and_clamp() {
        let f = GridField::from_fn(unit_grid_1d(), 1, |_, x, o| o[0] = x[0]);
        assert_eq!(f.interpolate(0.3, &[0.5]).unwrap(), vec![0.5]);
        assert_eq!(f.interpolate(0.3, &[-5.0]).unwrap(), vec![0.0]);
        assert_eq!(f.interpolate(0.3, &[9.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn nodes_are_exact() {
        let g = SpaceTimeGrid::new(1.0, 50, vec![-2.0, 0.0], vec![6.0, 4.0], vec![51, 51]).unwrap();
        let f = GridField::from_fn(g.clone(), 2, |t, x, o| {
            o[0] = (x[0] * 1.7 + t).sin();
            o[1] = x[1].exp() * x[0];
        });
        for j in [0, 7, 50] {
            for k in [0, 1, 52, 1300, 2600] {
                let x = g.node_point(k);
                let v = f.interpolate(g.time(j), &x).unwrap();
                assert_eq!(v.as_slice(), f.at(j, k));
            }
        }
    }

    #[test]
    fn time_index_rules() {
        let g = SpaceTimeGrid::new(1.0, 50, vec![0.0], vec![1.0], vec![3]).unwrap();
        assert_eq!(g.time_index(0.0), 0);
        assert_eq!(g.time_index(g.time(3)), 3);
        assert_eq!(g.time_index(0.0699), 3);
        assert_eq!(g.time_index(1.0), 50);
        assert_eq!(g.time_index(5.0), 50);
    }

    #[test]
    fn extrema() {
        let g = SpaceTimeGrid::new(1.0, 2, vec![0.0], vec![1.0], vec![5]).unwrap();
        let mut f = GridField::constant(g, 1, 0.0);
        f.at_mut(1, 3)[0] = 7.0;
        let ext = f.max_principle_check();
        assert_eq!(ext[1][0], (0.0, 7.0));
        assert_eq!(ext[0][0], (0.0, 0.0));
    }

    #[test]
    fn bad_inputs() {
        assert!(SpaceTimeGrid::new(1.0, 0, vec![0.0], vec![1.0], vec![2]).is_err());
        assert!(SpaceTimeGrid::new(1.0, 1, vec![1.0], vec![1.0], vec![2]).is_err());
        assert!(SpaceTimeGrid::new(1.0, 1, vec![0.0], vec![1.0], vec![1]).is_err());
        let f = GridField::zeros(unit_grid_1d(), 1);
        let err = f.interpolate(0.0, &[f64::NAN]).unwrap_err().to_string();
        assert!(err.contains("x1"), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let g = SpaceTimeGrid::new(1.0, 3, vec![-2.0, 0.0], vec![6.0, 4.0], vec![4, 3]).unwrap();
        let f = GridField::from_fn(g, 2, |t, x, o| {
            o[0] = t + x[0] / 3.0;
            o[1] = x[1].sqrt();
        });
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,x2,c1,c2\n"));
        let back = GridField::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values(), f.values());
        assert_eq!(back.grid().nodes(), f.grid().nodes());
    }
}
