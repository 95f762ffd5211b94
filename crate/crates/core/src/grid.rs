//! Tensor grids on a box and densities sampled at their nodes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("grid axis {axis}: {reason}")]
    Axis { axis: usize, reason: String },
    #[error("grid shapes differ")]
    Mismatch,
    #[error("invalid axes selection {0:?}")]
    Axes(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Box `Π [lower_a, upper_a]` cut into `cells_a` cells per axis; nodes include both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
}

pub const MIN_CELLS: usize = 8;

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self, GridError> {
        if lower.len() != upper.len() || lower.len() != cells.len() {
            return Err(GridError::Axis { axis: 0, reason: "lower, upper and cells differ in length".into() });
        }
        for a in 0..lower.len() {
            if !(lower[a].is_finite() && upper[a].is_finite() && upper[a] > lower[a]) {
                return Err(GridError::Axis { axis: a, reason: "needs lower < upper".into() });
            }
            if cells[a] < MIN_CELLS {
                return Err(GridError::Axis { axis: a, reason: format!("needs at least {MIN_CELLS} cells") });
            }
        }
        Ok(Self { lower, upper, cells })
    }

    /// Symmetric box `[-r_a, r_a]`.
    pub fn centered(radii: &[f64], cells: &[usize]) -> Result<Self, GridError> {
        Self::new(radii.iter().map(|r| -r).collect(), radii.to_vec(), cells.to_vec())
    }

    /// Zero-dimensional grid holding a single value.
    fn point() -> Self {
        Self { lower: vec![], upper: vec![], cells: vec![] }
    }

    pub fn dims(&self) -> usize {
        self.cells.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn nodes_on_axis(&self, a: usize) -> usize {
        self.cells[a] + 1
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c + 1).collect()
    }

    pub fn node_count(&self) -> usize {
        self.cells.iter().map(|c| c + 1).product()
    }

    pub fn spacing(&self, a: usize) -> f64 {
        (self.upper[a] - self.lower[a]) / self.cells[a] as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dims()).map(|a| self.spacing(a)).collect()
    }

    /// Volume attached to one node, `Π h_a`.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dims()).map(|a| self.spacing(a)).product()
    }

    pub fn coord(&self, a: usize, j: usize) -> f64 {
        if j == self.cells[a] {
            self.upper[a]
        } else {
            self.lower[a] + j as f64 * self.spacing(a)
        }
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims()];
        for a in (0..self.dims().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * (self.cells[a + 1] + 1);
        }
        s
    }

    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.dims()).rev() {
            let n = self.cells[a] + 1;
            out[a] = idx % n;
            idx /= n;
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.cells).fold(0, |acc, (&j, &c)| acc * (c + 1) + j)
    }

    pub fn node_coords(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for a in (0..self.dims()).rev() {
            let n = self.cells[a] + 1;
            out[a] = self.coord(a, rem % n);
            rem /= n;
        }
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dims()];
        self.node_coords(idx, &mut x);
        x
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let mut rem = idx;
        for a in (0..self.dims()).rev() {
            let n = self.cells[a] + 1;
            let j = rem % n;
            if j == 0 || j == n - 1 {
                return true;
            }
            rem /= n;
        }
        false
    }

    /// Multilinear interpolation weights of `p` onto surrounding nodes.
    ///
    /// Returns `false` when `p` lies outside the box. Fractions within `1e-9`
    /// of a node snap to it.
    pub fn interpolation_weights(&self, p: &[f64], out: &mut Vec<(usize, f64)>) -> bool {
        out.clear();
        let d = self.dims();
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        assert!(d <= 8, "grids above 8 dimensions are not supported");
        for a in 0..d {
            let h = self.spacing(a);
            let u = (p[a] - self.lower[a]) / h;
            let c = self.cells[a] as f64;
            if !(u >= -1e-9 && u <= c + 1e-9) {
                return false;
            }
            let mut j = u.floor().clamp(0.0, c - 1.0);
            let mut f = u - j;
            if f < 1e-9 {
                f = 0.0;
            } else if f > 1.0 - 1e-9 {
                if j + 1.0 <= c - 1.0 {
                    j += 1.0;
                    f = 0.0;
                } else {
                    f = 1.0;
                }
            }
            base[a] = j as usize;
            frac[a] = f;
        }
        let strides = self.strides();
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..d {
                let up = (corner >> a) & 1 == 1;
                let fa = if up { frac[a] } else { 1.0 - frac[a] };
                if fa == 0.0 {
                    w = 0.0;
                    break;
                }
                w *= fa;
                idx += (base[a] + up as usize) * strides[a];
            }
            if w > 0.0 {
                out.push((idx, w));
            }
        }
        true
    }
}

/// Nonnegative values on the nodes of a grid at one time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl DensityField {
    pub fn zeros(grid: Grid, time: f64) -> Self {
        let n = grid.node_count();
        Self { grid, values: vec![0.0; n], time }
    }

    /// Samples a function at interior nodes; boundary nodes stay zero.
    pub fn from_fn(grid: Grid, time: f64, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut out = Self::zeros(grid, time);
        let mut x = vec![0.0; out.grid.dims()];
        for i in 0..out.values.len() {
            if !out.grid.is_boundary(i) {
                out.grid.node_coords(i, &mut x);
                out.values[i] = f(&x);
            }
        }
        out
    }

    pub fn mass(&self) -> f64 {
        crate::stats::stable_sum(&self.values) * self.grid.cell_volume()
    }

    pub fn normalize(&mut self) -> f64 {
        let m = self.mass();
        if m > 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
        m
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v * v).collect();
        (crate::stats::stable_sum(&sq) * self.grid.cell_volume()).sqrt()
    }

    /// `∫ f ρ` by the node rule.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
        let mut x = vec![0.0; self.grid.dims()];
        let mut acc = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            if *v != 0.0 {
                self.grid.node_coords(i, &mut x);
                acc += v * f(&x);
            }
        }
        acc * self.grid.cell_volume()
    }

    /// Integrates out every axis not in `keep` with the trapezoidal rule.
    pub fn marginal(&self, keep: &[usize]) -> Result<DensityField, GridError> {
        let d = self.grid.dims();
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&a| a >= d) {
            return Err(GridError::Axes(keep.to_vec()));
        }
        let sub = if keep.is_empty() {
            Grid::point()
        } else {
            Grid::new(
                keep.iter().map(|&a| self.grid.lower[a]).collect(),
                keep.iter().map(|&a| self.grid.upper[a]).collect(),
                keep.iter().map(|&a| self.grid.cells[a]).collect(),
            )?
        };
        let mut out = vec![0.0; sub.node_count()];
        let mut multi = vec![0; d];
        let mut sub_multi = vec![0; keep.len()];
        for (i, v) in self.values.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            self.grid.multi_index(i, &mut multi);
            let mut w = 1.0;
            for a in 0..d {
                if !keep.contains(&a) {
                    let end = multi[a] == 0 || multi[a] == self.grid.cells[a];
                    w *= self.grid.spacing(a) * if end { 0.5 } else { 1.0 };
                }
            }
            for (s, &a) in keep.iter().enumerate() {
                sub_multi[s] = multi[a];
            }
            out[sub.flat_index(&sub_multi)] += w * v;
        }
        Ok(DensityField { grid: sub, values: out, time: self.time })
    }

    /// Writes `node_index, x_1..x_d, value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.grid.dims();
        let header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
        writeln!(w, "node_index,{},value", header.join(","))?;
        let mut x = vec![0.0; d];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.node_coords(i, &mut x);
            write!(w, "{i}")?;
            for c in &x {
                write!(w, ",{}", crate::fmt_f64(*c))?;
            }
            writeln!(w, ",{}", crate::fmt_f64(*v))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes raw little-endian `f64` values plus a JSON sidecar describing the layout.
    pub fn write_binary(&self, path: &Path) -> Result<(), GridError> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        let sidecar = serde_json::json!({
            "shape": self.grid.shape(),
            "lower": self.grid.lower,
            "spacing": self.grid.spacings(),
            "time": self.time,
            "layout": "row-major, last axis fastest, f64 little-endian",
        });
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        std::fs::write(side, serde_json::to_string_pretty(&sidecar).expect("json"))?;
        Ok(())
    }

    pub fn read_binary(path: &Path, grid: Grid, time: f64) -> Result<Self, GridError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() != grid.node_count() * 8 {
            return Err(GridError::Mismatch);
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { grid, values, time })
    }
}
