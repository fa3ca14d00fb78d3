//! 1D interval grid, Neumann-Laplacian eigenbasis, projection quadrature,
//! separated solutions and adjoint test functions.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{LvError, Result};

/// Uniform node-based grid on the interval `(0, L)` with trapezoid
/// quadrature weights. `cells` is the number of intervals; there are
/// `cells + 1` nodes including both endpoints.
#[derive(Debug, Clone)]
pub struct Grid1D {
    length: f64,
    cells: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl PartialEq for Grid1D {
    fn eq(&self, other: &Self) -> bool {
        self.cells == other.cells && (self.length - other.length).abs() <= 1e-14 * self.length
    }
}

impl Grid1D {
    pub fn new(length: f64, cells: usize) -> Result<Self> {
        if !length.is_finite() || length <= 0.0 {
            return Err(LvError::InvalidParam {
                name: "length".into(),
                reason: "domain length must be positive".into(),
            });
        }
        if cells < 8 {
            return Err(LvError::InvalidParam {
                name: "cells".into(),
                reason: format!("need at least 8 cells, got {cells}"),
            });
        }
        let dx = length / cells as f64;
        let nodes: Vec<f64> = (0..=cells).map(|i| i as f64 * dx).collect();
        let mut weights = vec![dx; cells + 1];
        weights[0] = 0.5 * dx;
        weights[cells] = 0.5 * dx;
        Ok(Self {
            length,
            cells,
            nodes,
            weights,
        })
    }

    pub fn shared(length: f64, cells: usize) -> Result<Arc<Self>> {
        Ok(Arc::new(Self::new(length, cells)?))
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Number of nodes, `cells + 1`.
    pub fn len(&self) -> usize {
        self.cells + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Trapezoid quadrature of a nodal field.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        assert_eq!(field.len(), self.len());
        field
            .iter()
            .zip(&self.weights)
            .map(|(f, w)| f * w)
            .sum()
    }

    /// Discrete L2 inner product of two nodal fields.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), self.len());
        assert_eq!(b.len(), self.len());
        a.iter()
            .zip(b)
            .zip(&self.weights)
            .map(|((x, y), w)| x * y * w)
            .sum()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&x| f(x)).collect()
    }
}

/// One Neumann eigenpair of `-Laplace` on `(0, L)`: eigenvalue
/// `mu_k = (k pi / L)^2` with profile `cos(k pi x / L)` normalized to unit
/// discrete L2 norm.
#[derive(Debug, Clone)]
pub struct EigenMode {
    pub index: usize,
    pub eigenvalue: f64,
    pub profile: Vec<f64>,
}

/// Modes `k = 0..=k_max`. Fails if `k_max` exceeds `cells / 2`, where the
/// grid no longer resolves the oscillation.
pub fn neumann_eigenpairs(grid: &Grid1D, k_max: usize) -> Result<Vec<EigenMode>> {
    let max = grid.cells() / 2;
    if k_max > max {
        return Err(LvError::TooManyModes {
            requested: k_max,
            max,
        });
    }
    let l = grid.length();
    let mut modes = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let norm = if k == 0 {
            (1.0 / l).sqrt()
        } else {
            (2.0 / l).sqrt()
        };
        let profile = grid.sample(|x| norm * (k as f64 * PI * x / l).cos());
        modes.push(EigenMode {
            index: k,
            eigenvalue: (k as f64 * PI / l).powi(2),
            profile,
        });
    }
    Ok(modes)
}

/// Trapezoid projection of a nodal field onto an eigenmode profile.
pub fn project(grid: &Grid1D, field: &[f64], mode: &EigenMode) -> Result<f64> {
    if field.len() != grid.len() || mode.profile.len() != grid.len() {
        return Err(LvError::GridMismatch(format!(
            "field has {} nodes, mode {} nodes, grid {}",
            field.len(),
            mode.profile.len(),
            grid.len()
        )));
    }
    Ok(grid.inner(field, &mode.profile))
}

/// A sampled real-valued function on the time-space lattice
/// `(steps + 1) x (cells + 1)`.
#[derive(Debug, Clone)]
pub struct SpaceTimeField {
    grid: Arc<Grid1D>,
    t_final: f64,
    steps: usize,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: Arc<Grid1D>, t_final: f64, steps: usize) -> Self {
        let n = grid.len();
        Self {
            grid,
            t_final,
            steps,
            values: vec![0.0; (steps + 1) * n],
        }
    }

    pub fn from_fn(
        grid: Arc<Grid1D>,
        t_final: f64,
        steps: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut field = Self::zeros(grid, t_final, steps);
        let dt = field.dt();
        let nodes = field.grid.nodes().to_vec();
        for i in 0..=steps {
            let t = i as f64 * dt;
            let row = field.row_mut(i);
            for (j, x) in nodes.iter().enumerate() {
                row[j] = f(*x, t);
            }
        }
        field
    }

    pub fn constant(grid: Arc<Grid1D>, t_final: f64, steps: usize, value: f64) -> Self {
        let n = grid.len();
        Self {
            grid,
            t_final,
            steps,
            values: vec![value; (steps + 1) * n],
        }
    }

    pub fn grid(&self) -> &Arc<Grid1D> {
        &self.grid
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt()
    }

    pub fn row(&self, step: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[step * n..(step + 1) * n]
    }

    pub fn row_mut(&mut self, step: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[step * n..(step + 1) * n]
    }

    pub fn terminal(&self) -> &[f64] {
        self.row(self.steps)
    }

    pub fn initial(&self) -> &[f64] {
        self.row(0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn boundary_left(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.row(i)[0]).collect()
    }

    pub fn boundary_right(&self) -> Vec<f64> {
        let n = self.grid.len();
        (0..=self.steps).map(|i| self.row(i)[n - 1]).collect()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid.as_ref() == other.grid.as_ref()
            && self.steps == other.steps
            && (self.t_final - other.t_final).abs() <= 1e-14 * self.t_final.max(1.0)
    }

    /// Linear combination of equally shaped fields.
    pub fn lin_comb(terms: &[(f64, &SpaceTimeField)]) -> SpaceTimeField {
        let first = terms[0].1;
        let mut out = SpaceTimeField::zeros(first.grid.clone(), first.t_final, first.steps);
        for &(w, f) in terms {
            assert!(first.same_shape(f), "lin_comb over mismatched fields");
            for (o, v) in out.values.iter_mut().zip(&f.values) {
                *o += w * v;
            }
        }
        out
    }

    /// Writes the CSV layout: header of node coordinates, one row per time
    /// step, first column the time.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain(self.grid.nodes().iter().map(|x| format!("{x}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..=self.steps {
            let mut cells: Vec<String> = Vec::with_capacity(self.grid.len() + 1);
            cells.push(format!("{}", self.time(i)));
            cells.extend(self.row(i).iter().map(|v| format!("{v}")));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| LvError::Config(format!("{}: empty CSV", path.display())))??;
        let coords: Vec<f64> = header
            .split(',')
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LvError::Config(format!("{}: bad header: {e}", path.display())))?;
        if coords.len() < 2 {
            return Err(LvError::Config(format!(
                "{}: too few coordinate columns",
                path.display()
            )));
        }
        let cells = coords.len() - 1;
        let length = coords[cells];
        let mut times = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split(',');
            let t: f64 = it
                .next()
                .unwrap()
                .parse()
                .map_err(|e| LvError::Config(format!("{}: bad time: {e}", path.display())))?;
            times.push(t);
            for s in it {
                values.push(s.parse::<f64>().map_err(|e| {
                    LvError::Config(format!("{}: bad value: {e}", path.display()))
                })?);
            }
        }
        let steps = times.len().saturating_sub(1);
        if values.len() != (steps + 1) * (cells + 1) {
            return Err(LvError::Config(format!(
                "{}: inconsistent row lengths",
                path.display()
            )));
        }
        let t_final = *times.last().unwrap_or(&0.0);
        Ok(Self {
            grid: Arc::new(Grid1D::new(length, cells)?),
            t_final,
            steps,
            values,
        })
    }
}

/// `e^{(c - d mu) t} phi(x)`: solves `w_t - d Lap w - c w = 0` with Neumann
/// conditions exactly in the continuum.
pub fn separated_solution(
    grid: Arc<Grid1D>,
    mode: &EigenMode,
    d: f64,
    c: f64,
    t_final: f64,
    steps: usize,
) -> SpaceTimeField {
    let rate = c - d * mode.eigenvalue;
    let profile = mode.profile.clone();
    SpaceTimeField::from_fn(grid.clone(), t_final, steps, move |x, t| {
        let j = (x / grid.dx()).round() as usize;
        (rate * t).exp() * profile[j.min(profile.len() - 1)]
    })
}

/// `omega(x, t) = e^{(d mu - c) t} phi(x)`: solves the adjoint equation
/// `-omega_t - d Lap omega - c omega = 0` with Neumann conditions; the test
/// function of every recovery identity.
pub fn adjoint_test_function(
    grid: Arc<Grid1D>,
    mode: &EigenMode,
    d: f64,
    c: f64,
    t_final: f64,
    steps: usize,
) -> SpaceTimeField {
    let rate = d * mode.eigenvalue - c;
    let profile = mode.profile.clone();
    SpaceTimeField::from_fn(grid.clone(), t_final, steps, move |x, t| {
        let j = (x / grid.dx()).round() as usize;
        (rate * t).exp() * profile[j.min(profile.len() - 1)]
    })
}

/// Real and imaginary parts of the plane-wave solution
/// `e^{(xi^2 - c) t - i xi x / sqrt(d)}` of the adjoint equation. Satisfies
/// the equation in the interior but not the Neumann condition; kept as a
/// validated identity only.
pub struct CgoPlaneWave {
    pub real: SpaceTimeField,
    pub imag: SpaceTimeField,
}

pub fn cgo_plane_wave(
    grid: Arc<Grid1D>,
    xi: f64,
    d: f64,
    c: f64,
    t_final: f64,
    steps: usize,
) -> CgoPlaneWave {
    let rate = xi * xi - c;
    let wave = xi / d.sqrt();
    let real = SpaceTimeField::from_fn(grid.clone(), t_final, steps, |x, t| {
        (rate * t).exp() * (wave * x).cos()
    });
    let imag = SpaceTimeField::from_fn(grid, t_final, steps, |x, t| {
        -(rate * t).exp() * (wave * x).sin()
    });
    CgoPlaneWave { real, imag }
}

/// Discrete Neumann Laplacian with second-order mirror closure at both ends.
pub fn apply_neumann_laplacian(grid: &Grid1D, field: &[f64], out: &mut [f64]) {
    let n = grid.len();
    let inv_dx2 = 1.0 / (grid.dx() * grid.dx());
    out[0] = 2.0 * (field[1] - field[0]) * inv_dx2;
    for i in 1..n - 1 {
        out[i] = (field[i - 1] - 2.0 * field[i] + field[i + 1]) * inv_dx2;
    }
    out[n - 1] = 2.0 * (field[n - 2] - field[n - 1]) * inv_dx2;
}

/// Max interior residual of `-w_t - d Lap w - c w` using centered time
/// differences; an oracle hook for the adjoint-equation property tests.
pub fn adjoint_residual(field: &SpaceTimeField, d: f64, c: f64) -> f64 {
    let grid = field.grid().clone();
    let n = grid.len();
    let dt = field.dt();
    let mut lap = vec![0.0; n];
    let mut worst = 0.0f64;
    for i in 1..field.steps() {
        apply_neumann_laplacian(&grid, field.row(i), &mut lap);
        for (j, lap_j) in lap.iter().enumerate().take(n - 1).skip(1) {
            let wt = (field.row(i + 1)[j] - field.row(i - 1)[j]) / (2.0 * dt);
            let r = -wt - d * lap_j - c * field.row(i)[j];
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Same residual for the forward operator `w_t - d Lap w - c w`.
pub fn forward_residual(field: &SpaceTimeField, d: f64, c: f64) -> f64 {
    let grid = field.grid().clone();
    let n = grid.len();
    let dt = field.dt();
    let mut lap = vec![0.0; n];
    let mut worst = 0.0f64;
    for i in 1..field.steps() {
        apply_neumann_laplacian(&grid, field.row(i), &mut lap);
        for (j, lap_j) in lap.iter().enumerate().take(n - 1).skip(1) {
            let wt = (field.row(i + 1)[j] - field.row(i - 1)[j]) / (2.0 * dt);
            let r = wt - d * lap_j - c * field.row(i)[j];
            worst = worst.max(r.abs());
        }
    }
    worst
}
