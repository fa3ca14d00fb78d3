//! Time stepping for the coupled semilinear system with homogeneous Neumann
//! conditions, the measurement map, and convergence probing.
//!
//! Diffusion is treated implicitly (one tridiagonal solve per species per
//! step), the reaction explicitly at the current state. The linear stepper
//! used for variation systems mirrors that splitting exactly, so a directly
//! solved variation field is the exact epsilon-derivative of the discrete
//! nonlinear flow.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{LvError, Result};
use crate::spectral::{Grid1D, SpaceTimeField};
use crate::taylor::{ModelPreset, RationalTaylorTerm};

/// Time integration scheme. Backward Euler IMEX is first order in time;
/// Crank-Nicolson IMEX (Adams-Bashforth 2 on the reaction) is second order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    BackwardEulerImex,
    CrankNicolsonImex,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backward_euler_imex" => Ok(Scheme::BackwardEulerImex),
            "crank_nicolson_imex" => Ok(Scheme::CrankNicolsonImex),
            other => Err(LvError::InvalidParam {
                name: "scheme".into(),
                reason: format!("unknown scheme `{other}`"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::BackwardEulerImex => "backward_euler_imex",
            Scheme::CrankNicolsonImex => "crank_nicolson_imex",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub positivity_clip: bool,
}

impl SolverConfig {
    pub fn new(scheme: Scheme, steps: usize) -> Self {
        Self {
            scheme,
            steps,
            positivity_clip: false,
        }
    }
}

/// Non-fatal observations made during a solve.
#[derive(Debug, Clone, PartialEq)]
pub enum SolveWarning {
    /// The state dipped below `-1e-8` and clipping was off.
    NegativeState { step: usize, min: f64 },
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub u: SpaceTimeField,
    pub v: SpaceTimeField,
    pub warnings: Vec<SolveWarning>,
}

/// Prefactored Thomas solve of `(I - r Lap_h - s I) x = rhs` with mirror
/// Neumann closure; `r = theta dt d / dx^2`, `s = theta dt c`.
struct NeumannSolve {
    sub: Vec<f64>,
    c_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl NeumannSolve {
    fn new(n: usize, r: f64, s: f64) -> Self {
        let diag = 1.0 + 2.0 * r - s;
        let mut sub = vec![-r; n];
        let mut sup = vec![-r; n];
        sub[0] = 0.0;
        sup[0] = -2.0 * r;
        sub[n - 1] = -2.0 * r;
        sup[n - 1] = 0.0;
        let mut c_prime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        denom[0] = diag;
        c_prime[0] = sup[0] / denom[0];
        for i in 1..n {
            denom[i] = diag - sub[i] * c_prime[i - 1];
            c_prime[i] = sup[i] / denom[i];
        }
        Self {
            sub,
            c_prime,
            denom,
        }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] /= self.denom[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.sub[i] * rhs[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.c_prime[i] * rhs[i + 1];
        }
    }
}

/// `out = (1 + r Lap_h + s) field` with mirror closure; the explicit half of
/// the Crank-Nicolson update.
fn apply_explicit_half(field: &[f64], r: f64, s: f64, out: &mut [f64]) {
    let n = field.len();
    out[0] = field[0] + 2.0 * r * (field[1] - field[0]) + s * field[0];
    for i in 1..n - 1 {
        out[i] = field[i] + r * (field[i - 1] - 2.0 * field[i] + field[i + 1]) + s * field[i];
    }
    out[n - 1] = field[n - 1] + 2.0 * r * (field[n - 2] - field[n - 1]) + s * field[n - 1];
}

fn check_finite(state: &[f64], step: usize, what: &str) -> Result<()> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(LvError::NonFiniteState {
            step,
            detail: format!("{what} left the finite range (blow-up or too large a time step)"),
        });
    }
    Ok(())
}

/// Steps the coupled system. Initial data are taken as given; positivity is
/// monitored, not enforced, unless `positivity_clip` is set.
pub fn solve_forward(
    preset: &ModelPreset,
    grid: &Arc<Grid1D>,
    f0: &[f64],
    g0: &[f64],
    t_final: f64,
    config: &SolverConfig,
) -> Result<ForwardSolution> {
    solve_forward_terms(
        &preset.f,
        &preset.g,
        preset.diffusion,
        grid,
        f0,
        g0,
        t_final,
        config,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn solve_forward_terms(
    f_term: &RationalTaylorTerm,
    g_term: &RationalTaylorTerm,
    diffusion: (f64, f64),
    grid: &Arc<Grid1D>,
    f0: &[f64],
    g0: &[f64],
    t_final: f64,
    config: &SolverConfig,
) -> Result<ForwardSolution> {
    let n = grid.len();
    if f0.len() != n || g0.len() != n {
        return Err(LvError::GridMismatch(format!(
            "initial data have {} / {} nodes, grid {}",
            f0.len(),
            g0.len(),
            n
        )));
    }
    let steps = config.steps;
    if steps < 1 {
        return Err(LvError::InvalidParam {
            name: "steps".into(),
            reason: "need at least one step".into(),
        });
    }
    let dt = t_final / steps as f64;
    let dx2 = grid.dx() * grid.dx();
    let (d1, d2) = diffusion;

    let theta = match config.scheme {
        Scheme::BackwardEulerImex => 1.0,
        Scheme::CrankNicolsonImex => 0.5,
    };
    let solve_u = NeumannSolve::new(n, theta * dt * d1 / dx2, 0.0);
    let solve_v = NeumannSolve::new(n, theta * dt * d2 / dx2, 0.0);

    let mut u = SpaceTimeField::zeros(grid.clone(), t_final, steps);
    let mut v = SpaceTimeField::zeros(grid.clone(), t_final, steps);
    u.row_mut(0).copy_from_slice(f0);
    v.row_mut(0).copy_from_slice(g0);

    let mut warnings = Vec::new();
    let mut worst_negative: Option<(usize, f64)> = None;

    let mut ru_prev = vec![0.0; n];
    let mut rv_prev = vec![0.0; n];
    let mut ru = vec![0.0; n];
    let mut rv = vec![0.0; n];
    let mut rhs_u = vec![0.0; n];
    let mut rhs_v = vec![0.0; n];

    let eval_reaction = |un: &[f64], vn: &[f64], ru: &mut [f64], rv: &mut [f64], step: usize| {
        for i in 0..n {
            ru[i] = f_term.evaluate(un[i], vn[i]).map_err(|e| match e {
                LvError::DenominatorZero { u } => LvError::NonFiniteState {
                    step,
                    detail: format!("reaction denominator vanished at u = {u}"),
                },
                other => other,
            })?;
            rv[i] = g_term.evaluate(un[i], vn[i]).map_err(|e| match e {
                LvError::DenominatorZero { u } => LvError::NonFiniteState {
                    step,
                    detail: format!("reaction denominator vanished at u = {u}"),
                },
                other => other,
            })?;
        }
        Ok::<(), LvError>(())
    };

    for step in 0..steps {
        let (un, vn): (Vec<f64>, Vec<f64>) = (u.row(step).to_vec(), v.row(step).to_vec());

        // explicit-reaction stability guard
        let umax = un.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let vmax = vn.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let lip = f_term
            .lipschitz_bound(umax, vmax)
            .max(g_term.lipschitz_bound(umax, vmax));
        if dt * lip > 2.0 {
            return Err(LvError::NonFiniteState {
                step,
                detail: format!(
                    "explicit reaction Lipschitz estimate {lip:.3e} exceeds 2/dt = {:.3e}; \
                     reduce dt or the data amplitude",
                    2.0 / dt
                ),
            });
        }

        eval_reaction(&un, &vn, &mut ru, &mut rv, step)?;

        match config.scheme {
            Scheme::BackwardEulerImex => {
                for i in 0..n {
                    rhs_u[i] = un[i] + dt * ru[i];
                    rhs_v[i] = vn[i] + dt * rv[i];
                }
            }
            Scheme::CrankNicolsonImex => {
                // AB2 on the reaction; the first step falls back to AB1
                let (wa, wb) = if step == 0 { (1.0, 0.0) } else { (1.5, -0.5) };
                apply_explicit_half(&un, 0.5 * dt * d1 / dx2, 0.0, &mut rhs_u);
                apply_explicit_half(&vn, 0.5 * dt * d2 / dx2, 0.0, &mut rhs_v);
                for i in 0..n {
                    rhs_u[i] += dt * (wa * ru[i] + wb * ru_prev[i]);
                    rhs_v[i] += dt * (wa * rv[i] + wb * rv_prev[i]);
                }
            }
        }
        solve_u.solve(&mut rhs_u);
        solve_v.solve(&mut rhs_v);
        check_finite(&rhs_u, step + 1, "u")?;
        check_finite(&rhs_v, step + 1, "v")?;

        if config.positivity_clip {
            for x in rhs_u.iter_mut().chain(rhs_v.iter_mut()) {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        } else {
            let min = rhs_u
                .iter()
                .chain(rhs_v.iter())
                .copied()
                .fold(f64::INFINITY, f64::min);
            if min < -1e-8 {
                match worst_negative {
                    Some((_, m)) if m <= min => {}
                    _ => worst_negative = Some((step + 1, min)),
                }
            }
        }

        u.row_mut(step + 1).copy_from_slice(&rhs_u);
        v.row_mut(step + 1).copy_from_slice(&rhs_v);
        std::mem::swap(&mut ru_prev, &mut ru);
        std::mem::swap(&mut rv_prev, &mut rv);
    }

    if let Some((step, min)) = worst_negative {
        warnings.push(SolveWarning::NegativeState { step, min });
    }

    Ok(ForwardSolution { u, v, warnings })
}

/// Solves one linear parabolic equation
/// `w_t - d Lap w - diag w = source(x, t)` with the same IMEX splitting as
/// the nonlinear stepper (reaction part `diag w + source` explicit), so the
/// result coincides with the epsilon-derivative of the discrete flow.
pub fn solve_linear_parabolic(
    grid: &Arc<Grid1D>,
    d: f64,
    diag: f64,
    source: Option<&SpaceTimeField>,
    init: &[f64],
    t_final: f64,
    config: &SolverConfig,
) -> Result<SpaceTimeField> {
    let n = grid.len();
    if init.len() != n {
        return Err(LvError::GridMismatch(format!(
            "initial data have {} nodes, grid {}",
            init.len(),
            n
        )));
    }
    if let Some(s) = source {
        if s.grid().as_ref() != grid.as_ref() || s.steps() != config.steps {
            return Err(LvError::GridMismatch(
                "source lattice does not match the solve lattice".into(),
            ));
        }
    }
    let steps = config.steps;
    let dt = t_final / steps as f64;
    let dx2 = grid.dx() * grid.dx();
    let theta = match config.scheme {
        Scheme::BackwardEulerImex => 1.0,
        Scheme::CrankNicolsonImex => 0.5,
    };
    let solver = NeumannSolve::new(n, theta * dt * d / dx2, 0.0);

    let mut w = SpaceTimeField::zeros(grid.clone(), t_final, steps);
    w.row_mut(0).copy_from_slice(init);
    let mut rhs = vec![0.0; n];
    let mut r_prev = vec![0.0; n];
    let mut r_cur = vec![0.0; n];

    for step in 0..steps {
        let wn = w.row(step).to_vec();
        for i in 0..n {
            r_cur[i] = diag * wn[i] + source.map(|s| s.row(step)[i]).unwrap_or(0.0);
        }
        match config.scheme {
            Scheme::BackwardEulerImex => {
                for i in 0..n {
                    rhs[i] = wn[i] + dt * r_cur[i];
                }
            }
            Scheme::CrankNicolsonImex => {
                let (wa, wb) = if step == 0 { (1.0, 0.0) } else { (1.5, -0.5) };
                apply_explicit_half(&wn, 0.5 * dt * d / dx2, 0.0, &mut rhs);
                for i in 0..n {
                    rhs[i] += dt * (wa * r_cur[i] + wb * r_prev[i]);
                }
            }
        }
        solver.solve(&mut rhs);
        check_finite(&rhs, step + 1, "linear state")?;
        w.row_mut(step + 1).copy_from_slice(&rhs);
        std::mem::swap(&mut r_prev, &mut r_cur);
    }
    Ok(w)
}

/// The measurement map output: boundary traces of both species over time
/// plus full terminal snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub u_left: Vec<f64>,
    pub u_right: Vec<f64>,
    pub v_left: Vec<f64>,
    pub v_right: Vec<f64>,
    pub terminal_x: Vec<f64>,
    pub terminal_u: Vec<f64>,
    pub terminal_v: Vec<f64>,
}

/// Extracts the four boundary traces and the two terminal snapshots; the
/// recovery pipeline sees nothing else of the solve.
pub fn measure(u: &SpaceTimeField, v: &SpaceTimeField, epsilon: f64) -> Result<MeasurementRecord> {
    if !u.same_shape(v) {
        return Err(LvError::GridMismatch(
            "species fields live on different lattices".into(),
        ));
    }
    let times = (0..=u.steps()).map(|i| u.time(i)).collect();
    Ok(MeasurementRecord {
        epsilon,
        times,
        u_left: u.boundary_left(),
        u_right: u.boundary_right(),
        v_left: v.boundary_left(),
        v_right: v.boundary_right(),
        terminal_x: u.grid().nodes().to_vec(),
        terminal_u: u.terminal().to_vec(),
        terminal_v: v.terminal().to_vec(),
    })
}

impl MeasurementRecord {
    /// Boundary traces: `time,epsilon,u_left,u_right,v_left,v_right`.
    pub fn write_boundary_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "time,epsilon,u_left,u_right,v_left,v_right")?;
        for i in 0..self.times.len() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.times[i],
                self.epsilon,
                self.u_left[i],
                self.u_right[i],
                self.v_left[i],
                self.v_right[i]
            )?;
        }
        Ok(())
    }

    /// Terminal snapshots: `x,epsilon,u_T,v_T`.
    pub fn write_terminal_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x,epsilon,u_T,v_T")?;
        for i in 0..self.terminal_x.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.terminal_x[i], self.epsilon, self.terminal_u[i], self.terminal_v[i]
            )?;
        }
        Ok(())
    }

    pub fn read_csv(boundary: &Path, terminal: &Path) -> Result<Self> {
        let mut rec = MeasurementRecord {
            epsilon: 0.0,
            times: Vec::new(),
            u_left: Vec::new(),
            u_right: Vec::new(),
            v_left: Vec::new(),
            v_right: Vec::new(),
            terminal_x: Vec::new(),
            terminal_u: Vec::new(),
            terminal_v: Vec::new(),
        };
        let parse = |s: &str, path: &Path| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| LvError::Config(format!("{}: bad value: {e}", path.display())))
        };
        for (idx, line) in BufReader::new(std::fs::File::open(boundary)?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(LvError::Config(format!(
                    "{}: expected 6 columns",
                    boundary.display()
                )));
            }
            rec.times.push(parse(cols[0], boundary)?);
            rec.epsilon = parse(cols[1], boundary)?;
            rec.u_left.push(parse(cols[2], boundary)?);
            rec.u_right.push(parse(cols[3], boundary)?);
            rec.v_left.push(parse(cols[4], boundary)?);
            rec.v_right.push(parse(cols[5], boundary)?);
        }
        for (idx, line) in BufReader::new(std::fs::File::open(terminal)?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(LvError::Config(format!(
                    "{}: expected 4 columns",
                    terminal.display()
                )));
            }
            rec.terminal_x.push(parse(cols[0], terminal)?);
            rec.terminal_u.push(parse(cols[2], terminal)?);
            rec.terminal_v.push(parse(cols[3], terminal)?);
        }
        Ok(rec)
    }
}

/// Observed convergence orders from Richardson self-differences on a
/// manufactured linear problem (`F = c u`, `G = 0`, smooth cosine data).
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub temporal_order: f64,
    pub spatial_order: f64,
    pub temporal_diffs: Vec<f64>,
    pub spatial_diffs: Vec<f64>,
}

/// Runs the manufactured-problem refinement study. Temporal orders come
/// from step halvings at the finest grid (the shared spatial error cancels
/// in the differences); spatial orders from grid halvings at the finest
/// step count, compared on common nodes.
pub fn convergence_probe(
    scheme: Scheme,
    d: f64,
    c: f64,
    length: f64,
    t_final: f64,
    cells_levels: &[usize],
    steps_levels: &[usize],
) -> Result<ProbeResult> {
    if cells_levels.len() < 3 || steps_levels.len() < 3 {
        return Err(LvError::InvalidParam {
            name: "levels".into(),
            reason: "need at least 3 refinement levels".into(),
        });
    }
    let f_term = RationalTaylorTerm::new([(1, 0, 0, c)])?;
    let g_term = RationalTaylorTerm::zero();
    let data = |grid: &Grid1D| {
        grid.sample(|x| {
            1.0 + (std::f64::consts::PI * x / length).cos()
                + 0.3 * (2.0 * std::f64::consts::PI * x / length).cos()
        })
    };

    let run = |cells: usize, steps: usize| -> Result<Vec<f64>> {
        let grid = Grid1D::shared(length, cells)?;
        let f0 = data(&grid);
        let g0 = vec![0.0; grid.len()];
        let sol = solve_forward_terms(
            &f_term,
            &g_term,
            (d, d),
            &grid,
            &f0,
            &g0,
            t_final,
            &SolverConfig::new(scheme, steps),
        )?;
        Ok(sol.u.terminal().to_vec())
    };

    // temporal study at the finest grid
    let fine_cells = *cells_levels.iter().max().unwrap();
    let mut temporal_solutions = Vec::new();
    for &steps in steps_levels {
        temporal_solutions.push(run(fine_cells, steps)?);
    }
    let mut temporal_diffs = Vec::new();
    for pair in temporal_solutions.windows(2) {
        let diff = pair[0]
            .iter()
            .zip(&pair[1])
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        temporal_diffs.push(diff);
    }
    let temporal_order = (temporal_diffs[temporal_diffs.len() - 2]
        / temporal_diffs[temporal_diffs.len() - 1])
        .log2();

    // spatial study at the finest step count
    let fine_steps = *steps_levels.iter().max().unwrap();
    let mut spatial_solutions = Vec::new();
    for &cells in cells_levels {
        spatial_solutions.push((cells, run(cells, fine_steps)?));
    }
    let coarsest = cells_levels[0];
    let restrict = |cells: usize, sol: &[f64]| -> Vec<f64> {
        let stride = cells / coarsest;
        (0..=coarsest).map(|j| sol[j * stride]).collect()
    };
    let mut spatial_diffs = Vec::new();
    for pair in spatial_solutions.windows(2) {
        let a = restrict(pair[0].0, &pair[0].1);
        let b = restrict(pair[1].0, &pair[1].1);
        let diff = a
            .iter()
            .zip(&b)
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
        spatial_diffs.push(diff);
    }
    let spatial_order =
        (spatial_diffs[spatial_diffs.len() - 2] / spatial_diffs[spatial_diffs.len() - 1]).log2();

    Ok(ProbeResult {
        temporal_order,
        spatial_order,
        temporal_diffs,
        spatial_diffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::neumann_eigenpairs;
    use crate::taylor::{preset, ModelKind};
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn bazykin() -> ModelPreset {
        let params: BTreeMap<String, f64> = [
            ("a", 1.0),
            ("K", 2.0),
            ("b", 1.0),
            ("A", 1.0),
            ("c", 0.5),
            ("d", 1.0),
            ("h", 0.2),
        ]
        .iter()
        .map(|&(k, v)| (k.to_string(), v))
        .collect();
        preset(ModelKind::Bazykin, &params).unwrap()
    }

    #[test]
    fn heat_decay_matches_analytic_solution() {
        // zero reaction, f = phi_1 on L = pi, d = 1: u(., 1) = e^{-1} phi_1
        let grid = Grid1D::shared(PI, 256).unwrap();
        let modes = neumann_eigenpairs(&grid, 1).unwrap();
        let zero = RationalTaylorTerm::zero();
        let sol = solve_forward_terms(
            &zero,
            &zero,
            (1.0, 1.0),
            &grid,
            &modes[1].profile,
            &vec![0.0; grid.len()],
            1.0,
            &SolverConfig::new(Scheme::BackwardEulerImex, 1000),
        )
        .unwrap();
        let decay = (-1.0f64).exp();
        let worst = sol
            .u
            .terminal()
            .iter()
            .zip(&modes[1].profile)
            .fold(0.0f64, |a, (x, p)| a.max((x - decay * p).abs()));
        assert!(worst <= 5e-3, "max error {worst}");
    }

    #[test]
    fn equilibria_are_fixed_points() {
        let p = bazykin();
        let grid = Grid1D::shared(PI, 64).unwrap();
        for &(u0, v0) in &p.base_solutions {
            let sol = solve_forward(
                &p,
                &grid,
                &vec![u0; grid.len()],
                &vec![v0; grid.len()],
                1.0,
                &SolverConfig::new(Scheme::BackwardEulerImex, 200),
            )
            .unwrap();
            let drift_u = sol
                .u
                .values()
                .iter()
                .fold(0.0f64, |a, &x| a.max((x - u0).abs()));
            let drift_v = sol
                .v
                .values()
                .iter()
                .fold(0.0f64, |a, &x| a.max((x - v0).abs()));
            assert!(drift_u <= 1e-10 && drift_v <= 1e-10);
        }
    }

    #[test]
    fn bazykin_bump_stays_nonnegative() {
        let p = bazykin();
        let grid = Grid1D::shared(PI, 128).unwrap();
        let l = grid.length();
        let bump = |center: f64| {
            grid.sample(|x| {
                let s = (x - center) / (l / 4.0);
                if s.abs() < 1.0 {
                    (0.5 * (1.0 + (PI * s).cos())).powi(2)
                } else {
                    0.0
                }
            })
        };
        let sol = solve_forward(
            &p,
            &grid,
            &bump(0.4 * l),
            &bump(0.6 * l),
            1.0,
            &SolverConfig::new(Scheme::BackwardEulerImex, 500),
        )
        .unwrap();
        assert!(sol.u.min_value() >= -1e-10);
        assert!(sol.v.min_value() >= -1e-10);
        assert!(sol.warnings.is_empty());
    }

    #[test]
    fn zero_reaction_conserves_mass() {
        let grid = Grid1D::shared(2.0, 100).unwrap();
        let zero = RationalTaylorTerm::zero();
        let f0 = grid.sample(|x| 1.0 + (PI * x / 2.0).cos().powi(2));
        let sol = solve_forward_terms(
            &zero,
            &zero,
            (0.7, 0.7),
            &grid,
            &f0,
            &vec![0.5; grid.len()],
            1.0,
            &SolverConfig::new(Scheme::BackwardEulerImex, 300),
        )
        .unwrap();
        let m0 = grid.integrate(sol.u.row(0));
        for i in (0..=300).step_by(50) {
            let m = grid.integrate(sol.u.row(i));
            assert!(
                (m - m0).abs() <= 1e-10 * m0.abs(),
                "mass drift at step {i}: {m} vs {m0}"
            );
        }
    }

    #[test]
    fn separated_solution_converges_for_linear_reaction() {
        // w_t - d Lap w = c w with data phi_2: w = e^{(c - d mu_2) t} phi_2
        let grid = Grid1D::shared(PI, 256).unwrap();
        let modes = neumann_eigenpairs(&grid, 2).unwrap();
        let c = -0.3;
        let d = 1.0;
        let f_term = RationalTaylorTerm::new([(1, 0, 0, c)]).unwrap();
        let sol = solve_forward_terms(
            &f_term,
            &RationalTaylorTerm::zero(),
            (d, d),
            &grid,
            &modes[2].profile,
            &vec![0.0; grid.len()],
            1.0,
            &SolverConfig::new(Scheme::CrankNicolsonImex, 800),
        )
        .unwrap();
        let rate = c - d * modes[2].eigenvalue;
        let worst = sol
            .u
            .terminal()
            .iter()
            .zip(&modes[2].profile)
            .fold(0.0f64, |a, (x, p)| a.max((x - (rate).exp() * p).abs()));
        assert!(worst <= 1e-4, "max error {worst}");
    }

    #[test]
    fn measurement_of_constant_solution() {
        let p = bazykin();
        let grid = Grid1D::shared(1.0, 32).unwrap();
        let sol = solve_forward(
            &p,
            &grid,
            &vec![0.0; grid.len()],
            &vec![0.0; grid.len()],
            0.5,
            &SolverConfig::new(Scheme::BackwardEulerImex, 50),
        )
        .unwrap();
        let rec = measure(&sol.u, &sol.v, 0.01).unwrap();
        assert!(rec.u_left.iter().all(|&x| x == 0.0));
        assert!(rec.terminal_v.iter().all(|&x| x == 0.0));
        assert_eq!(rec.times.len(), 51);
    }

    #[test]
    fn measurement_csv_round_trip() {
        let grid = Grid1D::shared(1.0, 16).unwrap();
        let u = SpaceTimeField::from_fn(grid.clone(), 0.5, 8, |x, t| x + t);
        let v = SpaceTimeField::from_fn(grid.clone(), 0.5, 8, |x, t| x * t + 1.0);
        let rec = measure(&u, &v, 0.04).unwrap();
        let dir = std::env::temp_dir().join("lvinv_meas_test");
        std::fs::create_dir_all(&dir).unwrap();
        let b = dir.join("boundary.csv");
        let t = dir.join("terminal.csv");
        rec.write_boundary_csv(&b).unwrap();
        rec.write_terminal_csv(&t).unwrap();
        let back = MeasurementRecord::read_csv(&b, &t).unwrap();
        assert_relative_eq!(back.epsilon, 0.04, epsilon = 1e-15);
        assert_eq!(back.terminal_u.len(), rec.terminal_u.len());
        assert!(back
            .u_left
            .iter()
            .zip(&rec.u_left)
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn probe_orders_match_schemes() {
        let be = convergence_probe(
            Scheme::BackwardEulerImex,
            1.0,
            0.5,
            PI,
            0.5,
            &[32, 64, 128],
            &[64, 128, 256],
        )
        .unwrap();
        assert!(
            (be.temporal_order - 1.0).abs() <= 0.15,
            "BE temporal order {}",
            be.temporal_order
        );
        assert!(
            (be.spatial_order - 2.0).abs() <= 0.2,
            "BE spatial order {}",
            be.spatial_order
        );

        let cn = convergence_probe(
            Scheme::CrankNicolsonImex,
            1.0,
            0.5,
            PI,
            0.5,
            &[32, 64, 128],
            &[64, 128, 256],
        )
        .unwrap();
        assert!(
            (cn.temporal_order - 2.0).abs() <= 0.3,
            "CN temporal order {}",
            cn.temporal_order
        );
    }

    #[test]
    fn negative_state_produces_a_warning_record() {
        // pure diffusion of sign-changing data keeps negative values around
        let grid = Grid1D::shared(PI, 64).unwrap();
        let modes = neumann_eigenpairs(&grid, 1).unwrap();
        let zero = RationalTaylorTerm::zero();
        let sol = solve_forward_terms(
            &zero,
            &zero,
            (1.0, 1.0),
            &grid,
            &modes[1].profile,
            &vec![0.0; grid.len()],
            0.5,
            &SolverConfig::new(Scheme::BackwardEulerImex, 100),
        )
        .unwrap();
        assert!(matches!(
            sol.warnings.as_slice(),
            [SolveWarning::NegativeState { .. }]
        ));
        // with clipping on, the record disappears and the state is clamped
        let mut config = SolverConfig::new(Scheme::BackwardEulerImex, 100);
        config.positivity_clip = true;
        let sol = solve_forward_terms(
            &zero,
            &zero,
            (1.0, 1.0),
            &grid,
            &modes[1].profile,
            &vec![0.0; grid.len()],
            0.5,
            &config,
        )
        .unwrap();
        assert!(sol.warnings.is_empty());
        // clipping acts on computed steps; the stored initial row is the
        // caller's data
        let min_after_first = (1..=sol.u.steps())
            .flat_map(|i| sol.u.row(i).iter().copied().collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min);
        assert!(min_after_first >= 0.0);
    }

    #[test]
    fn blowup_is_reported_not_propagated_as_nan() {
        // strongly superlinear growth with a large step must fail loudly
        let f_term = RationalTaylorTerm::new([(3, 0, 0, 50.0)]).unwrap();
        let grid = Grid1D::shared(1.0, 16).unwrap();
        let r = solve_forward_terms(
            &f_term,
            &RationalTaylorTerm::zero(),
            (1.0, 1.0),
            &grid,
            &vec![5.0; grid.len()],
            &vec![0.0; grid.len()],
            10.0,
            &SolverConfig::new(Scheme::BackwardEulerImex, 10),
        );
        assert!(matches!(r, Err(LvError::NonFiniteState { .. })));
    }
}
