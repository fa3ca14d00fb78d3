//! Order-by-order reconstruction of the interaction terms' Taylor
//! coefficients from measurement families.
//!
//! Each order turns the adjoint projection identity
//! `<w(T), phi> e^{(d mu - c) T} - <w(0), phi> = int_Q S omega` into one
//! linear equation per (experiment, eigenmode) pair in the unknown order-k
//! coefficients, and solves the stacked system by least squares. Test
//! functions are Neumann eigenfunction adjoints, so every boundary term of
//! the integration by parts vanishes identically and the data reduce to
//! terminal snapshots of the extracted variation fields.
//!
//! Assembled rows are normalized at the terminal time (the adjoint weight
//! is `e^{(d mu - c)(t - T)}`), which keeps high-mode rows from amplifying
//! measurement error by `e^{(d mu) T}`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CoeffId, LvError, Result, Target};
use crate::forward::{measure, solve_forward_terms, MeasurementRecord, SolverConfig};
use crate::modal::{push_next_order, CosineSeries, ModalOrder};
use crate::spectral::{neumann_eigenpairs, project, EigenMode, Grid1D, SpaceTimeField};
use crate::taylor::{factorial, ModelKind, RationalTaylorTerm, TaylorTable};
use crate::variation::{
    assemble_initial, extract_measurement_fd, EpsilonFamily, Provenance, VariationFields,
    VariationMeasurement, VariationStack,
};

/// Initial data of one experiment: cosine-series profiles per epsilon order
/// (index `i` holds `f_{i+1}`, `g_{i+1}`; missing entries are zero).
#[derive(Debug, Clone, Default)]
pub struct ExperimentSpec {
    pub f: Vec<CosineSeries>,
    pub g: Vec<CosineSeries>,
}

impl ExperimentSpec {
    pub fn f_order(&self, k: u32) -> CosineSeries {
        self.f
            .get(k as usize - 1)
            .cloned()
            .unwrap_or_else(CosineSeries::zero)
    }

    pub fn g_order(&self, k: u32) -> CosineSeries {
        self.g
            .get(k as usize - 1)
            .cloned()
            .unwrap_or_else(CosineSeries::zero)
    }
}

/// The experiments and eigenmodes a recovery run projects onto.
#[derive(Debug, Clone)]
pub struct ExperimentDesign {
    pub experiments: Vec<ExperimentSpec>,
    pub modes: Vec<usize>,
}

impl ExperimentDesign {
    /// Three experiments exciting pure-u, pure-v and mixed sources, with a
    /// constant added wherever a cosine would dip negative; projected onto
    /// modes 0..=4.
    pub fn default_design() -> Self {
        let exp = |f: Vec<f64>, g: Vec<f64>| ExperimentSpec {
            f: vec![CosineSeries::new(f)],
            g: vec![CosineSeries::new(g)],
        };
        ExperimentDesign {
            experiments: vec![
                exp(vec![1.0], vec![1.0]),
                exp(vec![1.0, 1.0], vec![1.0, 0.0, 0.8]),
                exp(vec![1.0, 0.0, 1.0], vec![1.0, 1.0]),
            ],
            modes: (0..=4).collect(),
        }
    }
}

/// What is declared known about the first-order coefficients. The class
/// conditions force `G_u = 0`; `G_v` is always a recovery target. In strict
/// mode `F_u = F_v = 0`; relaxed mode declares a known constant `F_u` and
/// may mark `F_v` for recovery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderPolicy {
    pub known_f_u: f64,
    pub recover_f_v: bool,
}

impl Default for FirstOrderPolicy {
    fn default() -> Self {
        Self {
            known_f_u: 0.0,
            recover_f_v: false,
        }
    }
}

/// Everything a recovery run needs besides the measurement-derived data.
#[derive(Debug, Clone)]
pub struct RecoveryProblem {
    pub grid: Arc<Grid1D>,
    pub t_final: f64,
    pub steps: usize,
    pub diffusion: (f64, f64),
    pub base: (f64, f64),
    pub design: ExperimentDesign,
    pub policy: FirstOrderPolicy,
    pub tikhonov: f64,
}

/// Measurement-derived variation data of one experiment, orders 1..=K.
#[derive(Debug, Clone)]
pub struct ExperimentOrderData {
    pub orders: Vec<VariationMeasurement>,
}

impl ExperimentOrderData {
    fn order(&self, k: u32) -> Result<&VariationMeasurement> {
        self.orders
            .get(k as usize - 1)
            .ok_or(LvError::MissingLowerOrder(k as usize))
    }
}

/// Identity residual of one linear parabolic equation against an adjoint
/// eigenfunction test: `<w_T, phi> e^{(d mu - c) T} - <w_0, phi> -
/// int_Q S omega`, trapezoid quadrature in x and t. Zero for consistent
/// data up to discretization error.
#[allow(clippy::too_many_arguments)]
pub fn duhamel_projection(
    grid: &Grid1D,
    w_t: &[f64],
    w_0: &[f64],
    source: &SpaceTimeField,
    mode: &EigenMode,
    d: f64,
    c: f64,
    t_final: f64,
) -> Result<f64> {
    if w_t.len() != grid.len() || w_0.len() != grid.len() {
        return Err(LvError::GridMismatch(
            "snapshot length does not match the grid".into(),
        ));
    }
    if source.grid().as_ref() != grid {
        return Err(LvError::GridMismatch(
            "source lattice does not match the grid".into(),
        ));
    }
    let rate = d * mode.eigenvalue - c;
    let terminal = project(grid, w_t, mode)? * (rate * t_final).exp();
    let initial = project(grid, w_0, mode)?;
    let steps = source.steps();
    let dt = source.dt();
    let mut integral = 0.0;
    for i in 0..=steps {
        let tw = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let weight = (rate * source.time(i)).exp();
        integral += tw * dt * weight * project(grid, source.row(i), mode)?;
    }
    Ok(terminal - initial - integral)
}

/// First-order recovery output.
#[derive(Debug, Clone)]
pub struct FirstOrderEstimate {
    pub g_v: f64,
    /// Largest deviation of a per-mode estimate from the mean.
    pub g_v_spread: f64,
    pub projections_used: usize,
    /// `(estimate, residual, cond)` when the policy marks `F_v` recovered.
    pub f_v: Option<(f64, f64, f64)>,
}

fn modes_for(problem: &RecoveryProblem) -> Result<Vec<EigenMode>> {
    let k_max = problem.design.modes.iter().copied().max().unwrap_or(0);
    let all = neumann_eigenpairs(&problem.grid, k_max)?;
    Ok(problem
        .design
        .modes
        .iter()
        .map(|&k| all[k].clone())
        .collect())
}

/// Closed-form inversion of the separated first-order predator field:
/// `G_v = ln(<v1_T, phi_k> / <g_1, phi_k>) / T + d2 mu_k`, averaged over
/// every supplied mode with a non-degenerate data projection; then, in
/// relaxed mode, least squares for `F_v` from the prey identity.
pub fn recover_first_order(
    problem: &RecoveryProblem,
    data: &[ExperimentOrderData],
) -> Result<FirstOrderEstimate> {
    let grid = &problem.grid;
    let modes = modes_for(problem)?;
    let (d1, d2) = problem.diffusion;
    let t = problem.t_final;

    let mut estimates = Vec::new();
    for (e, spec) in problem.design.experiments.iter().enumerate() {
        let g1 = spec.g_order(1).sample(grid);
        let order1 = data[e].order(1)?;
        for mode in &modes {
            let p_data = project(grid, &g1, mode)?;
            let p_term = project(grid, &order1.terminal_v, mode)?;
            if p_data.abs() < 1e-12 || p_term.abs() < 1e-12 {
                continue;
            }
            let ratio = p_term / p_data;
            if ratio <= 0.0 {
                return Err(LvError::SignLoss { mode: mode.index });
            }
            estimates.push(ratio.ln() / t + d2 * mode.eigenvalue);
        }
    }
    if estimates.is_empty() {
        return Err(LvError::DegenerateData);
    }
    let g_v = estimates.iter().sum::<f64>() / estimates.len() as f64;
    let spread = estimates
        .iter()
        .fold(0.0f64, |a, &x| a.max((x - g_v).abs()));

    let f_v = if problem.policy.recover_f_v {
        // v1 is now known in closed form; the prey identity is linear in F_v
        let c_u = problem.policy.known_f_u;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for (e, spec) in problem.design.experiments.iter().enumerate() {
            let v1 = crate::modal::evolve_linear(
                grid.length(),
                d2,
                g_v,
                &spec.g_order(1),
                None,
                t,
            );
            let v1_sampled = v1.sample(grid, t, problem.steps);
            let f1 = spec.f_order(1).sample(grid);
            let order1 = data[e].order(1)?;
            for mode in &modes {
                let rate = d1 * mode.eigenvalue - c_u;
                let col = quad_against_adjoint(grid, &v1_sampled, mode, rate, t);
                let b = project(grid, &order1.terminal_u, mode)?
                    - (-rate * t).exp() * project(grid, &f1, mode)?;
                rows.push(vec![col]);
                rhs.push(b);
            }
        }
        let ids = [CoeffId {
            target: Target::F,
            m: 0,
            n: 1,
        }];
        let out = solve_least_squares(&rows, &rhs, problem.tikhonov, &ids)?;
        Some((out.solution[0], out.residual, out.cond))
    } else {
        None
    };

    Ok(FirstOrderEstimate {
        g_v,
        g_v_spread: spread,
        projections_used: estimates.len(),
        f_v,
    })
}

/// `int_Q field * e^{rate (t - T)} phi dx dt` by trapezoid quadrature; the
/// terminal-normalized adjoint weight used in assembly.
fn quad_against_adjoint(
    grid: &Grid1D,
    field: &SpaceTimeField,
    mode: &EigenMode,
    rate: f64,
    t_final: f64,
) -> f64 {
    let steps = field.steps();
    let dt = field.dt();
    let mut acc = 0.0;
    for i in 0..=steps {
        let tw = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let weight = (rate * (field.time(i) - t_final)).exp();
        acc += tw * dt * weight * grid.inner(field.row(i), &mode.profile);
    }
    acc
}

#[derive(Debug)]
struct LsqOutcome {
    solution: Vec<f64>,
    residual: f64,
    cond: f64,
}

/// Column-pivoted QR least squares with optional Tikhonov damping. Columns
/// that are numerically zero, and near-null directions, are reported as
/// unidentifiable coefficients.
fn solve_least_squares(
    rows: &[Vec<f64>],
    rhs: &[f64],
    tikhonov: f64,
    unknowns: &[CoeffId],
) -> Result<LsqOutcome> {
    let n_rows = rows.len();
    let n_cols = unknowns.len();
    assert!(n_rows >= n_cols, "under-determined assembly");
    let mut a = DMatrix::zeros(n_rows, n_cols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            a[(i, j)] = x;
        }
    }
    let b = DVector::from_row_slice(rhs);

    // structurally dead columns
    let col_norms: Vec<f64> = (0..n_cols).map(|j| a.column(j).norm()).collect();
    let max_norm = col_norms.iter().fold(0.0f64, |x, &y| x.max(y));
    let dead: Vec<CoeffId> = col_norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n <= 1e-10 * max_norm.max(1e-30))
        .map(|(j, _)| unknowns[j])
        .collect();
    if !dead.is_empty() {
        return Err(LvError::RankDeficient { coefficients: dead });
    }

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |x, &y| x.max(y));
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |x, &y| x.min(y));
    let cond = smax / smin.max(1e-300);
    if tikhonov == 0.0 && smin <= 1e-10 * smax {
        // name the coefficients dominating the null direction
        let vt = svd.v_t.as_ref().expect("svd with v computed");
        let (null_idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| {
                if s < acc.1 {
                    (i, s)
                } else {
                    acc
                }
            });
        let row = vt.row(null_idx);
        let peak = row.iter().fold(0.0f64, |x, &y| x.max(y.abs()));
        let coefficients: Vec<CoeffId> = row
            .iter()
            .enumerate()
            .filter(|(_, &x)| x.abs() >= 0.5 * peak)
            .map(|(j, _)| unknowns[j])
            .collect();
        return Err(LvError::RankDeficient { coefficients });
    }

    // optional damping rows
    let (a_solve, b_solve) = if tikhonov > 0.0 {
        let mut aa = DMatrix::zeros(n_rows + n_cols, n_cols);
        aa.view_mut((0, 0), (n_rows, n_cols)).copy_from(&a);
        for j in 0..n_cols {
            aa[(n_rows + j, j)] = tikhonov.sqrt();
        }
        let mut bb = DVector::zeros(n_rows + n_cols);
        bb.view_mut((0, 0), (n_rows, 1)).copy_from(&b);
        (aa, bb)
    } else {
        (a.clone(), b.clone())
    };

    let qr = a_solve.clone().col_piv_qr();
    let qtb = qr.q().transpose() * &b_solve;
    let r = qr.r();
    let mut x = DVector::zeros(n_cols);
    for j in (0..n_cols).rev() {
        let mut s = qtb[j];
        for l in j + 1..n_cols {
            s -= r[(j, l)] * x[l];
        }
        if r[(j, j)].abs() <= 1e-300 {
            return Err(LvError::RankDeficient {
                coefficients: unknowns.to_vec(),
            });
        }
        x[j] = s / r[(j, j)];
    }
    qr.p().inv_permute_rows(&mut x);

    let residual = (&a * &x - &b).norm();
    Ok(LsqOutcome {
        solution: x.iter().copied().collect(),
        residual,
        cond,
    })
}

/// Estimates of one order's coefficients plus diagnostics.
#[derive(Debug, Clone)]
pub struct OrderEstimates {
    pub order: u32,
    pub f: Vec<((u32, u32), f64)>,
    pub g: Vec<((u32, u32), f64)>,
    pub residual_f: f64,
    pub residual_g: f64,
    pub cond_f: f64,
    pub cond_g: f64,
}

fn unknown_ids(target: Target, k: u32) -> Vec<CoeffId> {
    (0..=k)
        .rev()
        .map(|m| CoeffId {
            target,
            m,
            n: k - m,
        })
        .collect()
}

/// Recovers all order-k coefficients of both terms at once and writes them
/// into the running tables. Predator side first: its identity involves only
/// `G` unknowns; with those fixed, the order-k predator field is solvable in
/// closed form and feeds the known cross coupling of the prey identity.
pub fn recover_order_k(
    problem: &RecoveryProblem,
    k: u32,
    data: &[ExperimentOrderData],
    lower: &[Vec<ModalOrder>],
    table_f: &mut TaylorTable,
    table_g: &mut TaylorTable,
) -> Result<OrderEstimates> {
    assert!(k >= 2, "first order has its own closed-form recovery");
    let grid = &problem.grid;
    let modes = modes_for(problem)?;
    let (d1, d2) = problem.diffusion;
    let t = problem.t_final;
    let steps = problem.steps;
    let kf = factorial(k);

    let ids_f = unknown_ids(Target::F, k);
    let ids_g = unknown_ids(Target::G, k);

    // per experiment: sampled first-order jets and the unknown-column
    // integrands (u')^m (v')^n
    struct ExpAssembly {
        cols_f: Vec<Vec<f64>>, // [mode][unknown]
        cols_g: Vec<Vec<f64>>,
        rhs_f_partial: Vec<f64>, // data minus known source, cross term pending
        rhs_g: Vec<f64>,
    }

    let c_u = table_f.du();
    let c_v = table_g.dv();
    let f_v = table_f.dv();

    let mut assemblies: Vec<ExpAssembly> = Vec::new();
    for (e, spec) in problem.design.experiments.iter().enumerate() {
        let stack_modal = &lower[e];
        if stack_modal.len() < (k - 1) as usize {
            return Err(LvError::MissingLowerOrder(stack_modal.len() + 1));
        }
        // sample the lower-order fields once
        let mut stack = VariationStack::new(Provenance::Direct);
        for order in stack_modal.iter().take((k - 1) as usize) {
            stack.push(VariationFields {
                u: order.u.sample(grid, t, steps),
                v: order.v.sample(grid, t, steps),
            });
        }
        let u1 = &stack.get(1)?.u;
        let v1 = &stack.get(1)?.v;

        // unknown-column integrand fields (u')^m (v')^n for m + n = k
        let mut col_fields: Vec<SpaceTimeField> = Vec::new();
        for id in &ids_f {
            let mut field = SpaceTimeField::zeros(grid.clone(), t, steps);
            for i in 0..=steps {
                let (ru, rv) = (u1.row(i).to_vec(), v1.row(i).to_vec());
                let row = field.row_mut(i);
                for j in 0..grid.len() {
                    row[j] = ru[j].powi(id.m as i32) * rv[j].powi(id.n as i32);
                }
            }
            col_fields.push(field);
        }

        // known part of the sources: the running tables still hold zeros at
        // order k, so jet composition over the lower entries is exactly the
        // known summand
        let (s_f_known, s_g_known) =
            crate::variation::variation_source(k, &stack, table_f, table_g)?;

        let order_data = data[e].order(k)?;
        let f_init = spec.f_order(k).sample(grid);
        let g_init = spec.g_order(k).sample(grid);
        let f_init: Vec<f64> = f_init.iter().map(|x| kf * x).collect();
        let g_init: Vec<f64> = g_init.iter().map(|x| kf * x).collect();

        let mut cols_f = Vec::new();
        let mut cols_g = Vec::new();
        let mut rhs_f_partial = Vec::new();
        let mut rhs_g = Vec::new();
        for mode in &modes {
            let rate_u = d1 * mode.eigenvalue - c_u;
            let rate_v = d2 * mode.eigenvalue - c_v;
            let col_u: Vec<f64> = col_fields
                .iter()
                .zip(&ids_f)
                .map(|(field, id)| {
                    kf / (factorial(id.m) * factorial(id.n))
                        * quad_against_adjoint(grid, field, mode, rate_u, t)
                })
                .collect();
            let col_v: Vec<f64> = col_fields
                .iter()
                .zip(&ids_g)
                .map(|(field, id)| {
                    kf / (factorial(id.m) * factorial(id.n))
                        * quad_against_adjoint(grid, field, mode, rate_v, t)
                })
                .collect();
            let b_f = project(grid, &order_data.terminal_u, mode)?
                - (-rate_u * t).exp() * project(grid, &f_init, mode)?
                - quad_against_adjoint(grid, &s_f_known, mode, rate_u, t);
            let b_g = project(grid, &order_data.terminal_v, mode)?
                - (-rate_v * t).exp() * project(grid, &g_init, mode)?
                - quad_against_adjoint(grid, &s_g_known, mode, rate_v, t);
            cols_f.push(col_u);
            cols_g.push(col_v);
            rhs_f_partial.push(b_f);
            rhs_g.push(b_g);
        }
        let _ = e;
        assemblies.push(ExpAssembly {
            cols_f,
            cols_g,
            rhs_f_partial,
            rhs_g,
        });
    }

    // joint identifiability scan across both targets before solving
    {
        let gather = |pick: &dyn Fn(&ExpAssembly) -> &Vec<Vec<f64>>, ids: &[CoeffId]| {
            let mut norms = vec![0.0f64; ids.len()];
            for asm in &assemblies {
                for row in pick(asm) {
                    for (j, &x) in row.iter().enumerate() {
                        norms[j] += x * x;
                    }
                }
            }
            norms
        };
        let norms_f = gather(&|a| &a.cols_f, &ids_f);
        let norms_g = gather(&|a| &a.cols_g, &ids_g);
        let max_norm = norms_f
            .iter()
            .chain(norms_g.iter())
            .fold(0.0f64, |a, &b| a.max(b))
            .sqrt();
        let mut dead = Vec::new();
        for (j, &n2) in norms_f.iter().enumerate() {
            if n2.sqrt() <= 1e-10 * max_norm.max(1e-30) {
                dead.push(ids_f[j]);
            }
        }
        for (j, &n2) in norms_g.iter().enumerate() {
            if n2.sqrt() <= 1e-10 * max_norm.max(1e-30) {
                dead.push(ids_g[j]);
            }
        }
        if !dead.is_empty() {
            return Err(LvError::RankDeficient { coefficients: dead });
        }
    }

    // predator side first
    let rows_g: Vec<Vec<f64>> = assemblies
        .iter()
        .flat_map(|a| a.cols_g.iter().cloned())
        .collect();
    let rhs_g: Vec<f64> = assemblies.iter().flat_map(|a| a.rhs_g.clone()).collect();
    let out_g = solve_least_squares(&rows_g, &rhs_g, problem.tikhonov, &ids_g)?;
    for (id, &value) in ids_g.iter().zip(&out_g.solution) {
        table_g.set(id.m, id.n, value);
    }

    // with G fixed at order k, the predator variation field is known in
    // closed form and supplies the cross coupling of the prey identity
    let mut rhs_f: Vec<f64> = Vec::new();
    for (e, spec) in problem.design.experiments.iter().enumerate() {
        let mut cross: Vec<f64> = vec![0.0; modes.len()];
        if f_v != 0.0 {
            let mut extended = lower[e].clone();
            extended.truncate((k - 1) as usize);
            push_next_order(
                &mut extended,
                table_f,
                table_g,
                &spec.f_order(k),
                &spec.g_order(k),
                d1,
                d2,
                grid.length(),
                t,
            );
            let v_k = extended.last().unwrap().v.sample(grid, t, steps);
            for (j, mode) in modes.iter().enumerate() {
                let rate_u = d1 * mode.eigenvalue - c_u;
                cross[j] = f_v * quad_against_adjoint(grid, &v_k, mode, rate_u, t);
            }
        }
        for (j, &b) in assemblies[e].rhs_f_partial.iter().enumerate() {
            rhs_f.push(b - cross[j]);
        }
    }
    let rows_f: Vec<Vec<f64>> = assemblies
        .iter()
        .flat_map(|a| a.cols_f.iter().cloned())
        .collect();
    let out_f = solve_least_squares(&rows_f, &rhs_f, problem.tikhonov, &ids_f)?;
    for (id, &value) in ids_f.iter().zip(&out_f.solution) {
        table_f.set(id.m, id.n, value);
    }

    Ok(OrderEstimates {
        order: k,
        f: ids_f
            .iter()
            .zip(&out_f.solution)
            .map(|(id, &v)| ((id.m, id.n), v))
            .collect(),
        g: ids_g
            .iter()
            .zip(&out_g.solution)
            .map(|(id, &v)| ((id.m, id.n), v))
            .collect(),
        residual_f: out_f.residual,
        residual_g: out_g.residual,
        cond_f: out_f.cond,
        cond_g: out_g.cond,
    })
}

/// One line of the recovery report.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub order: u32,
    pub target: Target,
    pub m: u32,
    pub n: u32,
    pub estimate: f64,
    pub truth: Option<f64>,
    pub abs_error: Option<f64>,
    pub residual: f64,
    pub cond: f64,
}

/// Per-order estimates with residuals and conditioning diagnostics, plus
/// the assembled tables.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub rows: Vec<ReportRow>,
    pub table_f: TaylorTable,
    pub table_g: TaylorTable,
    pub first_order: FirstOrderEstimate,
}

impl RecoveryReport {
    pub fn max_abs_error(&self) -> Option<f64> {
        let mut worst: Option<f64> = None;
        for row in &self.rows {
            if let Some(e) = row.abs_error {
                worst = Some(worst.map_or(e, |w: f64| w.max(e)));
            }
        }
        worst
    }
}

/// Runs the full order-by-order recovery on measurement-derived data.
pub fn run_recovery(
    problem: &RecoveryProblem,
    data: &[ExperimentOrderData],
    max_order: u32,
    truth: Option<(&TaylorTable, &TaylorTable)>,
) -> Result<RecoveryReport> {
    if data.len() != problem.design.experiments.len() {
        return Err(LvError::Config(
            "one data record per designed experiment is required".into(),
        ));
    }
    let mut table_f = TaylorTable::zero(problem.base, max_order.max(1));
    let mut table_g = TaylorTable::zero(problem.base, max_order.max(1));
    table_f.set(1, 0, problem.policy.known_f_u);

    let first = recover_first_order(problem, data)?;
    table_g.set(0, 1, first.g_v);
    if let Some((fv, _, _)) = first.f_v {
        table_f.set(0, 1, fv);
    }

    let mut rows = Vec::new();
    let push_row = |rows: &mut Vec<ReportRow>,
                    order: u32,
                    target: Target,
                    (m, n): (u32, u32),
                    estimate: f64,
                    residual: f64,
                    cond: f64| {
        let truth_value = truth.map(|(tf, tg)| match target {
            Target::F => tf.get(m, n),
            Target::G => tg.get(m, n),
        });
        rows.push(ReportRow {
            order,
            target,
            m,
            n,
            estimate,
            truth: truth_value,
            abs_error: truth_value.map(|tv| (estimate - tv).abs()),
            residual,
            cond,
        });
    };

    push_row(
        &mut rows,
        1,
        Target::G,
        (0, 1),
        first.g_v,
        first.g_v_spread,
        1.0,
    );
    if let Some((fv, res, cond)) = first.f_v {
        push_row(&mut rows, 1, Target::F, (0, 1), fv, res, cond);
    }

    // modal lower stacks per experiment, grown order by order as the tables
    // fill in
    let mut lower: Vec<Vec<ModalOrder>> = vec![Vec::new(); data.len()];
    for (e, spec) in problem.design.experiments.iter().enumerate() {
        push_next_order(
            &mut lower[e],
            &table_f,
            &table_g,
            &spec.f_order(1),
            &spec.g_order(1),
            problem.diffusion.0,
            problem.diffusion.1,
            problem.grid.length(),
            problem.t_final,
        );
    }

    for k in 2..=max_order {
        let est = recover_order_k(problem, k, data, &lower, &mut table_f, &mut table_g)?;
        for &((m, n), v) in &est.f {
            push_row(
                &mut rows,
                k,
                Target::F,
                (m, n),
                v,
                est.residual_f,
                est.cond_f,
            );
        }
        for &((m, n), v) in &est.g {
            push_row(
                &mut rows,
                k,
                Target::G,
                (m, n),
                v,
                est.residual_g,
                est.cond_g,
            );
        }
        if k < max_order {
            for (e, spec) in problem.design.experiments.iter().enumerate() {
                push_next_order(
                    &mut lower[e],
                    &table_f,
                    &table_g,
                    &spec.f_order(k),
                    &spec.g_order(k),
                    problem.diffusion.0,
                    problem.diffusion.1,
                    problem.grid.length(),
                    problem.t_final,
                );
            }
        }
    }

    Ok(RecoveryReport {
        rows,
        table_f,
        table_g,
        first_order: first,
    })
}

/// Exact variation data: terminal snapshots and boundary traces of the
/// closed-form variation fields of the given truth tables. The bypass for
/// epsilon differentiation used by oracle-grade tests.
pub fn exact_order_data(
    truth_f: &TaylorTable,
    truth_g: &TaylorTable,
    problem: &RecoveryProblem,
    max_order: u32,
) -> Result<Vec<ExperimentOrderData>> {
    let grid = &problem.grid;
    let t = problem.t_final;
    let mut out = Vec::new();
    for spec in &problem.design.experiments {
        let stack = crate::modal::exact_variation_stack(
            truth_f,
            truth_g,
            &spec.f,
            &spec.g,
            problem.diffusion.0,
            problem.diffusion.1,
            grid.length(),
            t,
            max_order,
        )?;
        let times: Vec<f64> = (0..=problem.steps)
            .map(|i| t * i as f64 / problem.steps as f64)
            .collect();
        let orders = stack
            .iter()
            .enumerate()
            .map(|(i, order)| VariationMeasurement {
                order: i as u32 + 1,
                times: times.clone(),
                u_left: times.iter().map(|&s| order.u.eval(0.0, s)).collect(),
                u_right: times
                    .iter()
                    .map(|&s| order.u.eval(grid.length(), s))
                    .collect(),
                v_left: times.iter().map(|&s| order.v.eval(0.0, s)).collect(),
                v_right: times
                    .iter()
                    .map(|&s| order.v.eval(grid.length(), s))
                    .collect(),
                terminal_u: order.u.slice(grid, t),
                terminal_v: order.v.slice(grid, t),
            })
            .collect();
        out.push(ExperimentOrderData { orders });
    }
    Ok(out)
}

/// Epsilon set actually solved for a ladder: the ladder itself plus, when
/// Richardson extrapolation is on, the halved bottom rung. The extraction
/// then pairs each stencil with its doubled copy; anchoring the fine
/// stencil at `eps/2` keeps the span, and with it the truncation constant,
/// as small as the ladder allows.
pub fn epsilon_samples(eps: f64, ladder: &[f64], richardson: bool) -> Vec<f64> {
    let mut set: Vec<f64> = ladder.iter().map(|&m| eps * m).collect();
    if richardson {
        let half = set.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
        if !set.iter().any(|&e| (e - half).abs() <= 1e-12 * half) {
            set.push(half);
        }
    }
    set.sort_by(|a, b| a.partial_cmp(b).unwrap());
    set
}

/// Forward-solves the truth system over the epsilon set of each experiment
/// and returns only measurement records, one vector per experiment.
#[allow(clippy::too_many_arguments)]
pub fn run_experiments(
    truth_f: &RationalTaylorTerm,
    truth_g: &RationalTaylorTerm,
    diffusion: (f64, f64),
    problem: &RecoveryProblem,
    config: &SolverConfig,
    eps_set: &[f64],
) -> Result<Vec<Vec<MeasurementRecord>>> {
    let grid = &problem.grid;
    let mut out = Vec::new();
    for spec in &problem.design.experiments {
        let family = EpsilonFamily::new(
            problem.base,
            spec.f.iter().map(|s| s.sample(grid)).collect(),
            spec.g.iter().map(|s| s.sample(grid)).collect(),
            eps_set.to_vec(),
        )?;
        // the ladder's solves are independent; order is preserved by the
        // indexed collect, so results stay bitwise reproducible
        let records = eps_set
            .par_iter()
            .map(|&eps| {
                let (f0, g0) = assemble_initial(&family, eps)?;
                let sol = solve_forward_terms(
                    truth_f,
                    truth_g,
                    diffusion,
                    grid,
                    &f0,
                    &g0,
                    problem.t_final,
                    config,
                )?;
                measure(&sol.u, &sol.v, eps)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(records);
    }
    Ok(out)
}

/// Epsilon-differences measurement records into per-order variation data.
pub fn measured_order_data(
    records: &[Vec<MeasurementRecord>],
    base: (f64, f64),
    max_order: u32,
    richardson: bool,
) -> Result<Vec<ExperimentOrderData>> {
    records
        .iter()
        .map(|recs| {
            let orders = (1..=max_order)
                .map(|k| extract_measurement_fd(recs, base, k, richardson))
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperimentOrderData { orders })
        })
        .collect()
}

/// Runs both configurations through identical experiments and returns the
/// largest combined boundary-trace and terminal-snapshot distance; the
/// constructive contrapositive of the uniqueness statement.
#[allow(clippy::too_many_arguments)]
pub fn falsify_uniqueness(
    config1: (&RationalTaylorTerm, &RationalTaylorTerm),
    config2: (&RationalTaylorTerm, &RationalTaylorTerm),
    diffusion: (f64, f64),
    problem: &RecoveryProblem,
    config: &SolverConfig,
    eps: f64,
) -> Result<f64> {
    let one = run_experiments(config1.0, config1.1, diffusion, problem, config, &[eps])?;
    let two = run_experiments(config2.0, config2.1, diffusion, problem, config, &[eps])?;
    let mut worst = 0.0f64;
    for (a, b) in one.iter().flatten().zip(two.iter().flatten()) {
        let sup = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()))
        };
        worst = worst
            .max(sup(&a.u_left, &b.u_left))
            .max(sup(&a.u_right, &b.u_right))
            .max(sup(&a.v_left, &b.v_left))
            .max(sup(&a.v_right, &b.v_right))
            .max(sup(&a.terminal_u, &b.terminal_u))
            .max(sup(&a.terminal_v, &b.terminal_v));
    }
    Ok(worst)
}

/// Structural parameters fitted from a recovered table pair.
#[derive(Debug, Clone)]
pub struct StructuralFit {
    pub params: Vec<(String, f64)>,
    pub residual: f64,
}

/// Maps recovered Taylor coefficients back to the model parameters.
///
/// Hydra at (0,0): `G_11 = mu p`, `G_12 = 2 mu lambda`, `F_11 = -p`,
/// `F_12 = -2 lambda` invert exactly for `(p, lambda, mu)`; the spare
/// equation is the consistency residual. Holling-Tanner at (1,0): nonlinear
/// least squares of `(alpha, beta, gamma)` over the closed-form Taylor map
/// of `beta u v/(alpha+u)` and `gamma u v/(alpha+u)` against the recovered
/// `F_01, F_11, F_21, G_11, G_21`.
pub fn fit_structural_params(
    kind: ModelKind,
    table_f: &TaylorTable,
    table_g: &TaylorTable,
    recovery_residual: f64,
) -> Result<StructuralFit> {
    let tolerance = 10.0 * recovery_residual.max(1e-12);
    match kind {
        ModelKind::Hydra => {
            let p = -table_f.get(1, 1);
            let lambda = -table_f.get(1, 2) / 2.0;
            if p.abs() < 1e-12 {
                return Err(LvError::InvalidParam {
                    name: "p".into(),
                    reason: "recovered attack rate is zero; mu is not identifiable".into(),
                });
            }
            let mu = table_g.get(1, 1) / p;
            let residual = (table_g.get(1, 2) - 2.0 * mu * lambda).abs();
            if residual > tolerance {
                return Err(LvError::InconsistentTable {
                    residual,
                    scale: recovery_residual.max(1e-12),
                });
            }
            Ok(StructuralFit {
                params: vec![
                    ("p".into(), p),
                    ("lambda".into(), lambda),
                    ("mu".into(), mu),
                ],
                residual,
            })
        }
        ModelKind::HollingTanner => {
            let targets = [
                table_f.get(0, 1),
                table_f.get(1, 1),
                table_f.get(2, 1),
                table_g.get(1, 1),
                table_g.get(2, 1),
            ];
            // closed-form Taylor map of the responses at (1, 0)
            let model = |alpha: f64, beta: f64, gamma: f64| -> [f64; 5] {
                let s0 = 1.0 / (alpha + 1.0);
                let s1 = alpha / (alpha + 1.0).powi(2);
                let s2 = -2.0 * alpha / (alpha + 1.0).powi(3);
                [
                    -beta * s0,
                    -beta * s1,
                    -beta * s2,
                    gamma * s1,
                    gamma * s2,
                ]
            };
            // algebraic initialization from the first two prey equations
            let r = targets[1] / targets[0];
            let mut alpha = if r > 0.0 && r < 1.0 { r / (1.0 - r) } else { 1.0 };
            let mut beta = -targets[0] * (alpha + 1.0);
            let mut gamma = if alpha.abs() > 1e-12 {
                targets[3] * (alpha + 1.0).powi(2) / alpha
            } else {
                1.0
            };
            // Gauss-Newton with numeric Jacobian
            for _ in 0..60 {
                let f0 = model(alpha, beta, gamma);
                let res = DVector::from_iterator(5, (0..5).map(|i| f0[i] - targets[i]));
                let h = 1e-7;
                let mut jac = DMatrix::zeros(5, 3);
                for (j, dp) in [(0, h), (1, h), (2, h)] {
                    let (da, db, dg) = match j {
                        0 => (dp, 0.0, 0.0),
                        1 => (0.0, dp, 0.0),
                        _ => (0.0, 0.0, dp),
                    };
                    let fp = model(alpha + da, beta + db, gamma + dg);
                    for i in 0..5 {
                        jac[(i, j)] = (fp[i] - f0[i]) / h;
                    }
                }
                let jtj = jac.transpose() * &jac + DMatrix::identity(3, 3) * 1e-12;
                let step = jtj
                    .lu()
                    .solve(&(jac.transpose() * &res))
                    .ok_or_else(|| LvError::InvalidParam {
                        name: "fit".into(),
                        reason: "singular Gauss-Newton step".into(),
                    })?;
                alpha -= step[0];
                beta -= step[1];
                gamma -= step[2];
                if step.norm() < 1e-14 {
                    break;
                }
            }
            let f0 = model(alpha, beta, gamma);
            let residual = (0..5).fold(0.0f64, |a, i| a.max((f0[i] - targets[i]).abs()));
            if residual > tolerance {
                return Err(LvError::InconsistentTable {
                    residual,
                    scale: recovery_residual.max(1e-12),
                });
            }
            Ok(StructuralFit {
                params: vec![
                    ("alpha".into(), alpha),
                    ("beta".into(), beta),
                    ("gamma".into(), gamma),
                ],
                residual,
            })
        }
        ModelKind::Bazykin => Err(LvError::InvalidParam {
            name: "kind".into(),
            reason: "the classic model's coefficients are the Taylor table itself; no separate \
                     structural fit is defined"
                .into(),
        }),
    }
}
