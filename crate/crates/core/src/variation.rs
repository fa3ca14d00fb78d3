//! Epsilon-parameterized initial-data families, extraction of variation
//! fields by numerical epsilon-differentiation, order-k source assembly, and
//! direct solution of the variation systems.
//!
//! Conventions: `u^(k)` denotes the k-th epsilon-derivative of the solution
//! map at 0, so the data family `u0 + sum_i eps^i f_i` gives the order-k
//! system the initial profile `k! f_k`. The direct solver uses the same
//! IMEX splitting as the nonlinear stepper, which makes it the exact
//! epsilon-derivative of the discrete flow.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{LvError, Result};
use crate::forward::{solve_linear_parabolic, MeasurementRecord, SolverConfig};
use crate::spectral::{Grid1D, SpaceTimeField};
use crate::taylor::{factorial, TaylorTable};

/// An epsilon family of initial data around a constant base solution.
#[derive(Debug, Clone)]
pub struct EpsilonFamily {
    pub base: (f64, f64),
    pub f_list: Vec<Vec<f64>>,
    pub g_list: Vec<Vec<f64>>,
    pub epsilons: Vec<f64>,
}

impl EpsilonFamily {
    /// Validates the positivity rules: when the base component vanishes the
    /// first-order datum must be non-negative, and every epsilon in the
    /// sampling set must keep the assembled data non-negative pointwise.
    pub fn new(
        base: (f64, f64),
        f_list: Vec<Vec<f64>>,
        g_list: Vec<Vec<f64>>,
        epsilons: Vec<f64>,
    ) -> Result<Self> {
        if epsilons.iter().any(|&e| e <= 0.0) {
            return Err(LvError::InvalidParam {
                name: "epsilons".into(),
                reason: "sampling epsilons must be strictly positive".into(),
            });
        }
        if base.0 == 0.0 {
            if let Some(f1) = f_list.first() {
                if let Some((node, &value)) =
                    f1.iter().enumerate().find(|(_, &x)| x < 0.0)
                {
                    let _ = node;
                    return Err(LvError::InvalidParam {
                        name: "f_1".into(),
                        reason: format!(
                            "u0 = 0 requires f_1 >= 0 pointwise; found {value:.3e}"
                        ),
                    });
                }
            }
        }
        if base.1 == 0.0 {
            if let Some(g1) = g_list.first() {
                if let Some(&value) = g1.iter().find(|&&x| x < 0.0) {
                    return Err(LvError::InvalidParam {
                        name: "g_1".into(),
                        reason: format!(
                            "v0 = 0 requires g_1 >= 0 pointwise; found {value:.3e}"
                        ),
                    });
                }
            }
        }
        let family = Self {
            base,
            f_list,
            g_list,
            epsilons,
        };
        for &eps in &family.epsilons {
            assemble_initial(&family, eps)?;
        }
        Ok(family)
    }

    pub fn max_nodes(&self) -> usize {
        self.f_list
            .iter()
            .chain(self.g_list.iter())
            .map(|f| f.len())
            .max()
            .unwrap_or(0)
    }
}

/// `f = u0 + sum eps^i f_i`, `g = v0 + sum eps^i g_i`, both checked
/// non-negative pointwise.
pub fn assemble_initial(family: &EpsilonFamily, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = family.max_nodes();
    let assemble = |base: f64, list: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut out = vec![base; n.max(1)];
        for (i, field) in list.iter().enumerate() {
            let scale = eps.powi(i as i32 + 1);
            for (j, &x) in field.iter().enumerate() {
                out[j] += scale * x;
            }
        }
        for (node, &x) in out.iter().enumerate() {
            if x < 0.0 {
                return Err(LvError::NegativeData { node, value: x });
            }
        }
        Ok(out)
    };
    Ok((
        assemble(family.base.0, &family.f_list)?,
        assemble(family.base.1, &family.g_list)?,
    ))
}

/// One-sided finite-difference weights for the k-th derivative at 0 given
/// arbitrary distinct nodes (0 included). Solved through a scaled
/// Vandermonde system; rejects spacing that drives its condition number
/// past 1e12.
pub fn fd_weights(nodes: &[f64], k: u32) -> Result<Vec<f64>> {
    let n = nodes.len();
    if n < k as usize + 1 {
        return Err(LvError::InvalidParam {
            name: "nodes".into(),
            reason: format!("k = {k} needs at least {} nodes, got {n}", k + 1),
        });
    }
    let scale = nodes.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let mut vt = DMatrix::zeros(n, n);
    for (i, &x) in nodes.iter().enumerate() {
        let y = x / scale;
        for j in 0..n {
            vt[(j, i)] = y.powi(j as i32);
        }
    }
    let svd = vt.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let cond = smax / smin.max(1e-300);
    if cond > 1e12 {
        return Err(LvError::IllConditionedStencil { cond });
    }
    let mut rhs = nalgebra::DVector::zeros(n);
    rhs[k as usize] = factorial(k);
    let sol = vt
        .lu()
        .solve(&rhs)
        .ok_or(LvError::IllConditionedStencil { cond })?;
    Ok(sol.iter().map(|w| w / scale.powi(k as i32)).collect())
}

/// Node set and weights for one extraction, Richardson extrapolation folded
/// in. Entries pair an epsilon (0 meaning the exact base) with its weight.
fn extraction_weights(epsilons: &[f64], k: u32, richardson: bool) -> Result<Vec<(f64, f64)>> {
    let mut eps = epsilons.to_vec();
    eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eps.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs());
    let m = eps.len();
    if m < k as usize {
        return Err(LvError::InvalidParam {
            name: "epsilons".into(),
            reason: format!("order {k} extraction needs at least {k} nonzero samples"),
        });
    }
    let has = |x: f64| eps.iter().any(|&e| (e - x).abs() <= 1e-12 * x);

    let build = |j: usize| -> Result<Vec<(f64, f64)>> {
        let mut nodes = vec![0.0];
        nodes.extend_from_slice(&eps[..j]);
        let w = fd_weights(&nodes, k)?;
        Ok(nodes.into_iter().zip(w).collect())
    };

    if richardson {
        // largest stencil whose doubled nodes are also available
        let j_hi = (k as usize + 1).min(m);
        for j in (k as usize..=j_hi).rev() {
            if eps[..j].iter().all(|&e| has(2.0 * e)) {
                let a = build(j)?;
                let b: Vec<(f64, f64)> = a.iter().map(|&(e, _)| (2.0 * e, 0.0)).collect();
                let b_nodes: Vec<f64> = b.iter().map(|&(e, _)| e).collect();
                let wb = fd_weights(&b_nodes, k)?;
                let p = (j as i32 - k as i32 + 1) as f64;
                let gain = 2.0f64.powf(p);
                let denom = gain - 1.0;
                let mut combined: Vec<(f64, f64)> = Vec::new();
                let mut push = |eps_v: f64, w: f64| {
                    for entry in combined.iter_mut() {
                        if (entry.0 - eps_v).abs() <= 1e-12 * eps_v.max(1e-300) {
                            entry.1 += w;
                            return;
                        }
                    }
                    combined.push((eps_v, w));
                };
                for &(e, w) in &a {
                    push(e, gain * w / denom);
                }
                for (&(e, _), &w) in b.iter().zip(&wb) {
                    push(e, -w / denom);
                }
                return Ok(combined);
            }
        }
    }
    build((k as usize + 1).min(m))
}

/// A pair of variation fields of one order.
#[derive(Debug, Clone)]
pub struct VariationFields {
    pub u: SpaceTimeField,
    pub v: SpaceTimeField,
}

/// How a stack was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    FiniteDifference,
    Direct,
}

/// Variation fields for contiguous orders starting at 1.
#[derive(Debug, Clone)]
pub struct VariationStack {
    pub provenance: Provenance,
    orders: Vec<VariationFields>,
}

impl VariationStack {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            orders: Vec::new(),
        }
    }

    pub fn push(&mut self, fields: VariationFields) {
        if let Some(first) = self.orders.first() {
            assert!(
                first.u.same_shape(&fields.u) && first.v.same_shape(&fields.v),
                "stack fields must share one lattice"
            );
        }
        self.orders.push(fields);
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn get(&self, order: usize) -> Result<&VariationFields> {
        self.orders
            .get(order - 1)
            .ok_or(LvError::MissingLowerOrder(order))
    }
}

/// One sampled forward solve of the epsilon family.
#[derive(Debug, Clone)]
pub struct EpsFieldSample {
    pub eps: f64,
    pub u: SpaceTimeField,
    pub v: SpaceTimeField,
}

/// k-th epsilon-derivative of full solution fields at eps = 0, via
/// one-sided stencils with optional Richardson extrapolation. The base
/// sample is the exact constant `(u0, v0)`.
pub fn extract_variation_fd(
    samples: &[EpsFieldSample],
    base: (f64, f64),
    k: u32,
    richardson: bool,
) -> Result<VariationFields> {
    if samples.is_empty() {
        return Err(LvError::InvalidParam {
            name: "samples".into(),
            reason: "no epsilon samples supplied".into(),
        });
    }
    let epsilons: Vec<f64> = samples.iter().map(|s| s.eps).collect();
    let weights = extraction_weights(&epsilons, k, richardson)?;
    let shape = &samples[0].u;
    let mut u = SpaceTimeField::zeros(shape.grid().clone(), shape.t_final(), shape.steps());
    let mut v = u.clone();
    let n = shape.grid().len();
    for &(eps, w) in &weights {
        if eps == 0.0 {
            for i in 0..=u.steps() {
                for j in 0..n {
                    u.row_mut(i)[j] += w * base.0;
                    v.row_mut(i)[j] += w * base.1;
                }
            }
        } else {
            let sample = samples
                .iter()
                .find(|s| (s.eps - eps).abs() <= 1e-12 * eps)
                .ok_or_else(|| LvError::InvalidParam {
                    name: "samples".into(),
                    reason: format!("missing sample at eps = {eps}"),
                })?;
            for i in 0..=u.steps() {
                let su = sample.u.row(i).to_vec();
                let sv = sample.v.row(i).to_vec();
                let ru = u.row_mut(i);
                for j in 0..n {
                    ru[j] += w * su[j];
                }
                let rv = v.row_mut(i);
                for j in 0..n {
                    rv[j] += w * sv[j];
                }
            }
        }
    }
    Ok(VariationFields { u, v })
}

/// Extracted boundary-plus-terminal variation data of one order.
#[derive(Debug, Clone)]
pub struct VariationMeasurement {
    pub order: u32,
    pub times: Vec<f64>,
    pub u_left: Vec<f64>,
    pub u_right: Vec<f64>,
    pub v_left: Vec<f64>,
    pub v_right: Vec<f64>,
    pub terminal_u: Vec<f64>,
    pub terminal_v: Vec<f64>,
}

/// Applies the same stencil to measurement records only: the recovery
/// pipeline never touches interior solver state.
pub fn extract_measurement_fd(
    records: &[MeasurementRecord],
    base: (f64, f64),
    k: u32,
    richardson: bool,
) -> Result<VariationMeasurement> {
    if records.is_empty() {
        return Err(LvError::InvalidParam {
            name: "records".into(),
            reason: "no measurement records supplied".into(),
        });
    }
    let epsilons: Vec<f64> = records.iter().map(|r| r.epsilon).collect();
    let weights = extraction_weights(&epsilons, k, richardson)?;
    let n_t = records[0].times.len();
    let n_x = records[0].terminal_x.len();
    let mut out = VariationMeasurement {
        order: k,
        times: records[0].times.clone(),
        u_left: vec![0.0; n_t],
        u_right: vec![0.0; n_t],
        v_left: vec![0.0; n_t],
        v_right: vec![0.0; n_t],
        terminal_u: vec![0.0; n_x],
        terminal_v: vec![0.0; n_x],
    };
    for &(eps, w) in &weights {
        if eps == 0.0 {
            for i in 0..n_t {
                out.u_left[i] += w * base.0;
                out.u_right[i] += w * base.0;
                out.v_left[i] += w * base.1;
                out.v_right[i] += w * base.1;
            }
            for j in 0..n_x {
                out.terminal_u[j] += w * base.0;
                out.terminal_v[j] += w * base.1;
            }
        } else {
            let rec = records
                .iter()
                .find(|r| (r.epsilon - eps).abs() <= 1e-12 * eps)
                .ok_or_else(|| LvError::InvalidParam {
                    name: "records".into(),
                    reason: format!("missing record at eps = {eps}"),
                })?;
            for i in 0..n_t {
                out.u_left[i] += w * rec.u_left[i];
                out.u_right[i] += w * rec.u_right[i];
                out.v_left[i] += w * rec.v_left[i];
                out.v_right[i] += w * rec.v_right[i];
            }
            for j in 0..n_x {
                out.terminal_u[j] += w * rec.terminal_u[j];
                out.terminal_v[j] += w * rec.terminal_v[j];
            }
        }
    }
    Ok(out)
}

/// Order-k variation sources: `k!` times the `eps^k` coefficient of the
/// interaction terms' Taylor polynomials composed with the jets of orders
/// `1..k-1`. Linear table entries are excluded: the diagonal rate and the
/// prey-equation cross coupling act on the order-k fields and stay on the
/// left-hand side.
pub fn variation_source(
    k: u32,
    stack: &VariationStack,
    table_f: &TaylorTable,
    table_g: &TaylorTable,
) -> Result<(SpaceTimeField, SpaceTimeField)> {
    if k < 2 {
        return Err(LvError::InvalidParam {
            name: "k".into(),
            reason: "sources exist from order 2 upward".into(),
        });
    }
    for i in 1..k {
        stack.get(i as usize)?;
    }
    let shape = &stack.get(1)?.u;
    let deg = k as usize;
    let mut s_f = SpaceTimeField::zeros(shape.grid().clone(), shape.t_final(), shape.steps());
    let mut s_g = s_f.clone();

    // entries of both tables with 2 <= m + n <= k
    let gather = |table: &TaylorTable| -> Vec<(u32, u32, f64)> {
        table
            .iter()
            .filter(|(&(m, n), &c)| m + n >= 2 && m + n <= k && c != 0.0)
            .map(|(&(m, n), &c)| (m, n, c / (factorial(m) * factorial(n))))
            .collect()
    };
    let entries_f = gather(table_f);
    let entries_g = gather(table_g);

    let n_points = (shape.steps() + 1) * shape.grid().len();
    let fields_u: Vec<&SpaceTimeField> = (1..k).map(|i| &stack.orders[i as usize - 1].u).collect();
    let fields_v: Vec<&SpaceTimeField> = (1..k).map(|i| &stack.orders[i as usize - 1].v).collect();

    let mut du = vec![0.0; deg + 1];
    let mut dv = vec![0.0; deg + 1];
    let mut pow_buf = vec![0.0; deg + 1];
    let mut tmp = vec![0.0; deg + 1];

    // truncated polynomial multiply: pow_buf *= poly
    fn mul_trunc(acc: &mut [f64], poly: &[f64], tmp: &mut [f64]) {
        let deg = acc.len() - 1;
        for t in tmp.iter_mut() {
            *t = 0.0;
        }
        for i in 0..=deg {
            if acc[i] == 0.0 {
                continue;
            }
            for j in 0..=(deg - i) {
                tmp[i + j] += acc[i] * poly[j];
            }
        }
        acc.copy_from_slice(tmp);
    }

    let kfact = factorial(k);
    for idx in 0..n_points {
        du[0] = 0.0;
        dv[0] = 0.0;
        for i in 1..=deg {
            if i < deg {
                du[i] = fields_u[i - 1].values()[idx] / factorial(i as u32);
                dv[i] = fields_v[i - 1].values()[idx] / factorial(i as u32);
            } else {
                du[i] = 0.0;
                dv[i] = 0.0;
            }
        }
        for (entries, out) in [(&entries_f, &mut s_f), (&entries_g, &mut s_g)] {
            let mut acc = 0.0;
            for &(m, n, w) in entries.iter() {
                pow_buf.iter_mut().for_each(|x| *x = 0.0);
                pow_buf[0] = 1.0;
                for _ in 0..m {
                    mul_trunc(&mut pow_buf, &du, &mut tmp);
                }
                for _ in 0..n {
                    mul_trunc(&mut pow_buf, &dv, &mut tmp);
                }
                acc += w * pow_buf[deg];
            }
            let step = idx / shape.grid().len();
            let node = idx % shape.grid().len();
            out.row_mut(step)[node] = acc * kfact;
        }
    }
    Ok((s_f, s_g))
}

/// Directly solves the order-k variation system: predator equation first
/// (its linearization never sees `u^(k)`), then the prey equation with the
/// known cross coupling `F_v v^(k)` folded into the source. Initial data
/// are `k! f_k`, `k! g_k`.
#[allow(clippy::too_many_arguments)]
pub fn solve_variation_direct(
    k: u32,
    stack: &VariationStack,
    table_f: &TaylorTable,
    table_g: &TaylorTable,
    diffusion: (f64, f64),
    f_k: &[f64],
    g_k: &[f64],
    grid: &Arc<Grid1D>,
    t_final: f64,
    config: &SolverConfig,
) -> Result<VariationFields> {
    let scale = factorial(k);
    let init_u: Vec<f64> = f_k.iter().map(|x| scale * x).collect();
    let init_v: Vec<f64> = g_k.iter().map(|x| scale * x).collect();

    let sources = if k >= 2 {
        Some(variation_source(k, stack, table_f, table_g)?)
    } else {
        None
    };
    let (s_f, s_g) = match &sources {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };

    let v = solve_linear_parabolic(
        grid,
        diffusion.1,
        table_g.dv(),
        s_g,
        &init_v,
        t_final,
        config,
    )?;

    let f_v = table_f.dv();
    let u_source = if f_v != 0.0 {
        let mut combined = match s_f {
            Some(s) => s.clone(),
            None => SpaceTimeField::zeros(grid.clone(), t_final, config.steps),
        };
        for i in 0..=combined.steps() {
            let vs = v.row(i).to_vec();
            let row = combined.row_mut(i);
            for (r, vv) in row.iter_mut().zip(vs) {
                *r += f_v * vv;
            }
        }
        Some(combined)
    } else {
        s_f.cloned()
    };

    let u = solve_linear_parabolic(
        grid,
        diffusion.0,
        table_f.du(),
        u_source.as_ref(),
        &init_u,
        t_final,
        config,
    )?;

    Ok(VariationFields { u, v })
}

/// The first-order system of the multi-parameter linearization coincides
/// with the first-order variation system; both entry points share one
/// solver, so their outputs are identical by construction.
#[allow(clippy::too_many_arguments)]
pub fn solve_linearization_first_order(
    table_f: &TaylorTable,
    table_g: &TaylorTable,
    diffusion: (f64, f64),
    f_1: &[f64],
    g_1: &[f64],
    grid: &Arc<Grid1D>,
    t_final: f64,
    config: &SolverConfig,
) -> Result<VariationFields> {
    solve_variation_direct(
        1,
        &VariationStack::new(Provenance::Direct),
        table_f,
        table_g,
        diffusion,
        f_1,
        g_1,
        grid,
        t_final,
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{solve_forward_terms, Scheme};
    use crate::spectral::{neumann_eigenpairs, separated_solution};
    use crate::taylor::RationalTaylorTerm;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn grid() -> Arc<Grid1D> {
        Grid1D::shared(PI, 64).unwrap()
    }

    #[test]
    fn assemble_examples() {
        let g = grid();
        let n = g.len();
        let family = EpsilonFamily::new(
            (0.3, 0.1),
            vec![vec![1.0; n]],
            vec![vec![0.5; n]],
            vec![0.01],
        )
        .unwrap();
        let (f, gg) = assemble_initial(&family, 0.0).unwrap();
        assert!(f.iter().all(|&x| x == 0.3));
        assert!(gg.iter().all(|&x| x == 0.1));

        // u0 = 0, f1 = 1, f2 = -5, eps = 0.01: 0.01 - 0.0005 >= 0
        let family = EpsilonFamily::new(
            (0.0, 1.0),
            vec![vec![1.0; n], vec![-5.0; n]],
            vec![],
            vec![0.01],
        )
        .unwrap();
        let (f, _) = assemble_initial(&family, 0.01).unwrap();
        for &x in &f {
            assert_relative_eq!(x, 0.01 - 0.0005, epsilon = 1e-15);
        }

        // f1 = 0 at some node with f2 < 0 there forces NegativeData
        let mut f1 = vec![1.0; n];
        f1[3] = 0.0;
        let family = EpsilonFamily {
            base: (0.0, 1.0),
            f_list: vec![f1, vec![-1.0; n]],
            g_list: vec![],
            epsilons: vec![0.01],
        };
        assert!(matches!(
            assemble_initial(&family, 0.01),
            Err(LvError::NegativeData { node: 3, .. })
        ));
    }

    #[test]
    fn family_positivity_rule() {
        let n = 8;
        let r = EpsilonFamily::new((0.0, 0.0), vec![vec![-1.0; n]], vec![], vec![0.01]);
        assert!(matches!(r, Err(LvError::InvalidParam { .. })));
    }

    #[test]
    fn extraction_is_exact_on_polynomial_families() {
        let g = grid();
        let w = SpaceTimeField::from_fn(g.clone(), 1.0, 10, |x, t| (x + t).sin());
        let z = SpaceTimeField::from_fn(g.clone(), 1.0, 10, |x, t| x * t + 0.5);
        let base = (0.7, 0.0);
        let samples: Vec<EpsFieldSample> = [0.01, 0.02, 0.04, 0.08]
            .iter()
            .map(|&eps| {
                let u = SpaceTimeField::lin_comb(&[(1.0, &w), (0.0, &z)]);
                let mut u_full = SpaceTimeField::constant(g.clone(), 1.0, 10, base.0);
                let mut v_full = SpaceTimeField::constant(g.clone(), 1.0, 10, base.1);
                for i in 0..=10 {
                    for j in 0..g.len() {
                        u_full.row_mut(i)[j] += eps * u.row(i)[j] + eps * eps * z.row(i)[j];
                        v_full.row_mut(i)[j] += eps * w.row(i)[j];
                    }
                }
                EpsFieldSample {
                    eps,
                    u: u_full,
                    v: v_full,
                }
            })
            .collect();

        let first = extract_variation_fd(&samples, base, 1, true).unwrap();
        assert!(first.u.sup_distance(&w) <= 1e-9, "{}", first.u.sup_distance(&w));
        let second = extract_variation_fd(&samples, base, 2, true).unwrap();
        let two_z = SpaceTimeField::lin_comb(&[(2.0, &z)]);
        assert!(second.u.sup_distance(&two_z) <= 1e-8);
        // v is linear in eps: its second derivative vanishes
        assert!(second.v.sup_norm() <= 1e-8);
    }

    #[test]
    fn heat_family_first_order_matches_separated_solution() {
        let g = grid();
        let modes = neumann_eigenpairs(&g, 1).unwrap();
        let zero = RationalTaylorTerm::zero();
        let config = SolverConfig::new(Scheme::BackwardEulerImex, 400);
        let samples: Vec<EpsFieldSample> = [0.01, 0.02, 0.04]
            .iter()
            .map(|&eps| {
                let f0: Vec<f64> = modes[1].profile.iter().map(|p| eps * (p + 1.0)).collect();
                let sol = solve_forward_terms(
                    &zero,
                    &zero,
                    (1.0, 1.0),
                    &g,
                    &f0,
                    &vec![0.0; g.len()],
                    1.0,
                    &config,
                )
                .unwrap();
                EpsFieldSample {
                    eps,
                    u: sol.u,
                    v: sol.v,
                }
            })
            .collect();
        let first = extract_variation_fd(&samples, (0.0, 0.0), 1, true).unwrap();
        // u' = e^{-mu_1 t} phi_1 + e^{0 t} * 1; compare against the modal form
        let sep1 = separated_solution(g.clone(), &modes[1], 1.0, 0.0, 1.0, 400);
        let flat = SpaceTimeField::constant(g.clone(), 1.0, 400, 1.0);
        let expect = SpaceTimeField::lin_comb(&[(1.0, &sep1), (1.0, &flat)]);
        let err = first.u.sup_distance(&expect) / expect.sup_norm();
        assert!(err <= 2e-3, "relative error {err}");
    }

    #[test]
    fn source_for_product_term_is_twice_the_product() {
        let g = grid();
        let u1 = SpaceTimeField::from_fn(g.clone(), 1.0, 5, |x, t| x + t);
        let v1 = SpaceTimeField::from_fn(g.clone(), 1.0, 5, |x, t| x * t - 0.3);
        let mut stack = VariationStack::new(Provenance::Direct);
        stack.push(VariationFields {
            u: u1.clone(),
            v: v1.clone(),
        });
        let f = RationalTaylorTerm::new([(1, 1, 0, 1.0)]).unwrap();
        let tf = f.taylor_at((0.0, 0.0), 2).unwrap();
        let tg = TaylorTable::zero((0.0, 0.0), 2);
        let (s_f, s_g) = variation_source(2, &stack, &tf, &tg).unwrap();
        for i in 0..=5 {
            for j in 0..g.len() {
                assert_relative_eq!(
                    s_f.row(i)[j],
                    2.0 * u1.row(i)[j] * v1.row(i)[j],
                    epsilon = 1e-12
                );
                assert_relative_eq!(s_g.row(i)[j], 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn source_matches_hand_assembly_for_quadratic_tables() {
        // S_F = F20 (u')^2 + 2 F11 u'v' + F02 (v')^2 where the mixed entry
        // enters doubled (the identifiable combination F_uv + F_vu)
        let g = grid();
        let u1 = SpaceTimeField::from_fn(g.clone(), 1.0, 4, |x, t| (x - t).cos());
        let v1 = SpaceTimeField::from_fn(g.clone(), 1.0, 4, |x, t| 0.4 * x + t * t);
        let mut stack = VariationStack::new(Provenance::Direct);
        stack.push(VariationFields {
            u: u1.clone(),
            v: v1.clone(),
        });
        let tf = TaylorTable::from_entries(
            (0.0, 0.0),
            2,
            [((2, 0), -1.0), ((1, 1), -0.5), ((0, 2), 0.3)],
        );
        let tg = TaylorTable::from_entries(
            (0.0, 0.0),
            2,
            [((2, 0), 0.1), ((1, 1), 0.8), ((0, 2), -0.4)],
        );
        let (s_f, s_g) = variation_source(2, &stack, &tf, &tg).unwrap();
        for i in 0..=4 {
            for j in 0..g.len() {
                let (a, b) = (u1.row(i)[j], v1.row(i)[j]);
                let expect_f = -(a * a) + 2.0 * -0.5 * a * b + 0.3 * b * b;
                let expect_g = 0.1 * a * a + 2.0 * 0.8 * a * b - 0.4 * b * b;
                assert_relative_eq!(s_f.row(i)[j], expect_f, epsilon = 1e-12);
                assert_relative_eq!(s_g.row(i)[j], expect_g, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn third_order_source_matches_scalar_epsilon_differentiation() {
        // oracle: compose F with the truncated jets pointwise and take the
        // third eps-derivative by central differences
        let g = Grid1D::shared(1.0, 16).unwrap();
        let u1 = SpaceTimeField::from_fn(g.clone(), 1.0, 3, |x, t| 1.0 + x - 0.5 * t);
        let v1 = SpaceTimeField::from_fn(g.clone(), 1.0, 3, |x, t| 0.3 + 0.2 * x * t);
        let u2 = SpaceTimeField::from_fn(g.clone(), 1.0, 3, |x, t| 0.7 * x - t);
        let v2 = SpaceTimeField::from_fn(g.clone(), 1.0, 3, |x, t| 0.1 * (x + t));
        let mut stack = VariationStack::new(Provenance::Direct);
        stack.push(VariationFields {
            u: u1.clone(),
            v: v1.clone(),
        });
        stack.push(VariationFields {
            u: u2.clone(),
            v: v2.clone(),
        });
        let term = RationalTaylorTerm::new([(2, 1, 0, 1.0), (1, 1, 1, 0.6), (3, 0, 0, -0.4)])
            .unwrap();
        let base = (1.0, 2.0);
        let tf = term.taylor_at(base, 3).unwrap();
        let tg = TaylorTable::zero(base, 3);
        let (s_f, _) = variation_source(3, &stack, &tf, &tg).unwrap();

        let eps = 1e-2;
        for idx in [0usize, 7, 30, 67] {
            let a1 = u1.values()[idx];
            let b1 = v1.values()[idx];
            let a2 = u2.values()[idx];
            let b2 = v2.values()[idx];
            // remove linear table entries: they act on absent order-3 jets
            let fu = tf.du();
            let fv = tf.dv();
            let compose = |e: f64| -> f64 {
                let du = e * a1 + e * e * a2 / 2.0;
                let dv = e * b1 + e * e * b2 / 2.0;
                term.evaluate(base.0 + du, base.1 + dv).unwrap()
                    - term.evaluate(base.0, base.1).unwrap()
                    - fu * du
                    - fv * dv
            };
            // central third derivative with one Richardson level
            let d3 = |h: f64| {
                (compose(2.0 * h) - 2.0 * compose(h) + 2.0 * compose(-h) - compose(-2.0 * h))
                    / (2.0 * h * h * h)
            };
            let oracle = (4.0 * d3(eps) - d3(2.0 * eps)) / 3.0;
            // the composition also produces quadratic-entry contributions at
            // eps^3 through mixed jets; the source must reproduce exactly the
            // same value
            let got = s_f.values()[idx];
            assert_relative_eq!(got, oracle, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn direct_first_order_solves_decoupled_modes() {
        let g = grid();
        let modes = neumann_eigenpairs(&g, 1).unwrap();
        let config = SolverConfig::new(Scheme::CrankNicolsonImex, 500);
        let tf = TaylorTable::zero((0.0, 0.0), 1);
        let tg = TaylorTable::from_entries((0.0, 0.0), 1, [((0, 1), -0.3)]);

        // f1 = phi_1, g1 = 0: u' decays with mu_1, v' stays zero
        let out = solve_variation_direct(
            1,
            &VariationStack::new(Provenance::Direct),
            &tf,
            &tg,
            (1.0, 1.0),
            &modes[1].profile,
            &vec![0.0; g.len()],
            &g,
            1.0,
            &config,
        )
        .unwrap();
        let sep = separated_solution(g.clone(), &modes[1], 1.0, 0.0, 1.0, 500);
        assert!(out.u.sup_distance(&sep) <= 2e-4 * sep.sup_norm());
        assert!(out.v.sup_norm() == 0.0);

        // g1 = phi_0 with G_v = -0.3: v' = e^{-0.3 t} phi_0
        let out = solve_variation_direct(
            1,
            &VariationStack::new(Provenance::Direct),
            &tf,
            &tg,
            (1.0, 1.0),
            &vec![0.0; g.len()],
            &modes[0].profile,
            &g,
            1.0,
            &config,
        )
        .unwrap();
        let sep0 = separated_solution(g.clone(), &modes[0], 1.0, -0.3, 1.0, 500);
        assert!(out.v.sup_distance(&sep0) <= 2e-4 * sep0.sup_norm());
    }

    #[test]
    fn order_two_with_zero_tables_and_data_is_zero() {
        let g = grid();
        let config = SolverConfig::new(Scheme::BackwardEulerImex, 50);
        let tf = TaylorTable::zero((0.0, 0.0), 2);
        let tg = TaylorTable::zero((0.0, 0.0), 2);
        let mut stack = VariationStack::new(Provenance::Direct);
        stack.push(VariationFields {
            u: SpaceTimeField::from_fn(g.clone(), 1.0, 50, |x, t| x + t),
            v: SpaceTimeField::from_fn(g.clone(), 1.0, 50, |x, t| x - t),
        });
        let out = solve_variation_direct(
            2,
            &stack,
            &tf,
            &tg,
            (1.0, 1.0),
            &vec![0.0; g.len()],
            &vec![0.0; g.len()],
            &g,
            1.0,
            &config,
        )
        .unwrap();
        assert_eq!(out.u.sup_norm(), 0.0);
        assert_eq!(out.v.sup_norm(), 0.0);
    }

    #[test]
    fn first_order_positivity_inheritance() {
        // nonnegative data with G_v <= 0 keeps both first-order fields
        // nonnegative under the backward Euler splitting
        let g = grid();
        let config = SolverConfig::new(Scheme::BackwardEulerImex, 300);
        let tf = TaylorTable::zero((0.0, 0.0), 1);
        let tg = TaylorTable::from_entries((0.0, 0.0), 1, [((0, 1), -0.4)]);
        let f1 = g.sample(|x| 1.0 + (PI * x / g.length()).cos());
        let g1 = g.sample(|x| 0.5 * (1.0 + (2.0 * PI * x / g.length()).cos()));
        let out = solve_variation_direct(
            1,
            &VariationStack::new(Provenance::Direct),
            &tf,
            &tg,
            (1.0, 1.0),
            &f1,
            &g1,
            &g,
            1.0,
            &config,
        )
        .unwrap();
        assert!(out.u.min_value() >= -1e-10);
        assert!(out.v.min_value() >= -1e-10);
    }

    #[test]
    fn linearization_and_variation_entry_points_coincide() {
        let g = grid();
        let config = SolverConfig::new(Scheme::BackwardEulerImex, 100);
        let tf = TaylorTable::from_entries((0.0, 0.0), 1, [((1, 0), 0.2)]);
        let tg = TaylorTable::from_entries((0.0, 0.0), 1, [((0, 1), -0.3)]);
        let f1 = g.sample(|x| 1.0 + x);
        let g1 = g.sample(|x| 2.0 - x * 0.1);
        let a = solve_linearization_first_order(
            &tf, &tg, (0.8, 1.2), &f1, &g1, &g, 1.0, &config,
        )
        .unwrap();
        let b = solve_variation_direct(
            1,
            &VariationStack::new(Provenance::Direct),
            &tf,
            &tg,
            (0.8, 1.2),
            &f1,
            &g1,
            &g,
            1.0,
            &config,
        )
        .unwrap();
        assert_eq!(a.u.sup_distance(&b.u), 0.0);
        assert_eq!(a.v.sup_distance(&b.v), 0.0);
    }

    #[test]
    fn missing_lower_order_is_reported() {
        let g = grid();
        let tf = TaylorTable::zero((0.0, 0.0), 3);
        let tg = TaylorTable::zero((0.0, 0.0), 3);
        let mut stack = VariationStack::new(Provenance::Direct);
        stack.push(VariationFields {
            u: SpaceTimeField::zeros(g.clone(), 1.0, 10),
            v: SpaceTimeField::zeros(g.clone(), 1.0, 10),
        });
        assert!(matches!(
            variation_source(3, &stack, &tf, &tg),
            Err(LvError::MissingLowerOrder(2))
        ));
    }

    #[test]
    fn ill_conditioned_ladder_is_rejected() {
        let r = fd_weights(&[0.0, 1e-9, 1.0, 1.0 + 1e-12], 2);
        assert!(matches!(r, Err(LvError::IllConditionedStencil { .. })));
    }
}
