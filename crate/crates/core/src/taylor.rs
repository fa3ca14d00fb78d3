//! Interaction terms in rational-Taylor form, exact differentiation at a base
//! point, admissibility checking, and the application model presets.
//!
//! An interaction term is a finite sum of monomials `coeff * u^m * v^n`
//! optionally divided by `(1 + u)`. The denominator exponent `h` is restricted
//! to {0, 1}: `h = 0` means no denominator, `h = 1` means `/(1 + u)`.

use std::collections::BTreeMap;

use crate::error::{LvError, Result};

/// Coefficients with magnitude below this are treated as structural zeros.
pub const COEFF_EPS: f64 = 1e-12;

/// Threshold under which the rational denominator counts as vanished.
pub const DENOM_EPS: f64 = 1e-14;

/// One monomial `coeff * u^m * v^n / (1 + u^h)` with `h` in {0, 1}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monomial {
    pub m: u32,
    pub n: u32,
    pub h: u8,
    pub coeff: f64,
}

/// A finite sum of rational monomials; the admissible form of an interaction
/// term. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RationalTaylorTerm {
    monomials: Vec<Monomial>,
}

fn falling_factorial(n: u32, k: u32) -> f64 {
    // n * (n-1) * ... * (n-k+1)
    (0..k).map(|i| (n - i) as f64).product()
}

fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

pub(crate) fn factorial(k: u32) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

impl RationalTaylorTerm {
    /// Builds a term from `(m, n, h, coeff)` entries. Duplicate `(m, n, h)`
    /// triples are merged by summing; negligible coefficients are dropped.
    pub fn new(entries: impl IntoIterator<Item = (u32, u32, u8, f64)>) -> Result<Self> {
        let mut merged: BTreeMap<(u32, u32, u8), f64> = BTreeMap::new();
        for (m, n, h, coeff) in entries {
            if h > 1 {
                return Err(LvError::InvalidParam {
                    name: "h".into(),
                    reason: format!("denominator exponent must be 0 or 1, got {h}"),
                });
            }
            if !coeff.is_finite() {
                return Err(LvError::InvalidParam {
                    name: "coeff".into(),
                    reason: "coefficient must be finite".into(),
                });
            }
            *merged.entry((m, n, h)).or_insert(0.0) += coeff;
        }
        let monomials = merged
            .into_iter()
            .filter(|&(_, c)| c.abs() > COEFF_EPS)
            .map(|((m, n, h), coeff)| Monomial { m, n, h, coeff })
            .collect();
        Ok(Self { monomials })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn is_zero(&self) -> bool {
        self.monomials.is_empty()
    }

    fn check_denominator(&self, u: f64) -> Result<()> {
        if self.monomials.iter().any(|mo| mo.h == 1) && (1.0 + u).abs() < DENOM_EPS {
            return Err(LvError::DenominatorZero { u });
        }
        Ok(())
    }

    /// Evaluates the term at `(u, v)`.
    pub fn evaluate(&self, u: f64, v: f64) -> Result<f64> {
        self.check_denominator(u)?;
        let mut acc = 0.0;
        for mo in &self.monomials {
            let mut t = mo.coeff * u.powi(mo.m as i32) * v.powi(mo.n as i32);
            if mo.h == 1 {
                t /= 1.0 + u;
            }
            acc += t;
        }
        Ok(acc)
    }

    /// Exact partial derivative `d^mu/du^mu d^nv/dv^nv` at `(u, v)`.
    ///
    /// The rational factor is differentiated through the closed form
    /// `d^k/du^k (1+u)^{-1} = (-1)^k k! (1+u)^{-k-1}` combined with the
    /// Leibniz rule.
    pub fn partial(&self, mu: u32, nv: u32, u: f64, v: f64) -> Result<f64> {
        self.check_denominator(u)?;
        let mut acc = 0.0;
        for mo in &self.monomials {
            if nv > mo.n {
                continue;
            }
            let v_part = falling_factorial(mo.n, nv) * v.powi((mo.n - nv) as i32);
            let u_part = match mo.h {
                0 => {
                    if mu > mo.m {
                        continue;
                    }
                    falling_factorial(mo.m, mu) * u.powi((mo.m - mu) as i32)
                }
                _ => {
                    // Leibniz over d^j u^m * d^(mu-j) (1+u)^{-1}
                    let denom = 1.0 + u;
                    let mut s = 0.0;
                    for j in 0..=mu.min(mo.m) {
                        let poly = falling_factorial(mo.m, j) * u.powi((mo.m - j) as i32);
                        let k = mu - j;
                        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
                        let rat = sign * factorial(k) / denom.powi(k as i32 + 1);
                        s += binomial(mu, j) * poly * rat;
                    }
                    s
                }
            };
            acc += mo.coeff * u_part * v_part;
        }
        Ok(acc)
    }

    /// Exact Taylor table of the term at `base` up to total order `max_order`.
    pub fn taylor_at(&self, base: (f64, f64), max_order: u32) -> Result<TaylorTable> {
        if max_order < 1 {
            return Err(LvError::InvalidParam {
                name: "max_order".into(),
                reason: "must be at least 1".into(),
            });
        }
        let mut coeffs = BTreeMap::new();
        for total in 1..=max_order {
            for m in 0..=total {
                let n = total - m;
                coeffs.insert((m, n), self.partial(m, n, base.0, base.1)?);
            }
        }
        Ok(TaylorTable {
            base,
            max_order,
            coeffs,
        })
    }

    /// Upper bound on `|dT/du| + |dT/dv|` over `|u| <= umax`, `|v| <= vmax`,
    /// used as a cheap Lipschitz estimate for the explicit-reaction time-step
    /// guard. Assumes `u >= -0.5` so the rational denominator stays >= 0.5.
    pub fn lipschitz_bound(&self, umax: f64, vmax: f64) -> f64 {
        let umax = umax.abs().max(1e-30);
        let vmax = vmax.abs().max(1e-30);
        let mut acc = 0.0;
        for mo in &self.monomials {
            let c = mo.coeff.abs();
            let pu = umax.powi(mo.m as i32);
            let pv = vmax.powi(mo.n as i32);
            // denominator >= 0.5 in the monitored regime; its derivative adds
            // one more 1/denom factor
            let denom_gain = if mo.h == 1 { 2.0 } else { 1.0 };
            let du = if mo.m > 0 {
                mo.m as f64 * umax.powi(mo.m as i32 - 1) * pv
            } else {
                0.0
            } + if mo.h == 1 { 2.0 * pu * pv } else { 0.0 };
            let dv = if mo.n > 0 {
                mo.n as f64 * pu * vmax.powi(mo.n as i32 - 1)
            } else {
                0.0
            };
            acc += c * denom_gain * (du + dv);
        }
        acc
    }
}

/// Map from derivative multi-index `(m, n)` to the constant Taylor
/// coefficient `d^m_u d^n_v` of a term at a fixed base point. Every index
/// with `1 <= m + n <= max_order` is stored, zeros included.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorTable {
    base: (f64, f64),
    max_order: u32,
    coeffs: BTreeMap<(u32, u32), f64>,
}

impl TaylorTable {
    /// Builds a table from explicit entries; indices not listed are zero.
    pub fn from_entries(
        base: (f64, f64),
        max_order: u32,
        entries: impl IntoIterator<Item = ((u32, u32), f64)>,
    ) -> Self {
        let mut coeffs = BTreeMap::new();
        for total in 1..=max_order {
            for m in 0..=total {
                coeffs.insert((m, total - m), 0.0);
            }
        }
        for ((m, n), value) in entries {
            assert!(
                m + n >= 1 && m + n <= max_order,
                "entry ({m},{n}) outside table orders 1..={max_order}"
            );
            coeffs.insert((m, n), value);
        }
        Self {
            base,
            max_order,
            coeffs,
        }
    }

    pub fn zero(base: (f64, f64), max_order: u32) -> Self {
        Self::from_entries(base, max_order, [])
    }

    pub fn base(&self) -> (f64, f64) {
        self.base
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    /// Coefficient `d^m_u d^n_v` at the base; zero outside the stored range.
    pub fn get(&self, m: u32, n: u32) -> f64 {
        self.coeffs.get(&(m, n)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, m: u32, n: u32, value: f64) {
        assert!(m + n >= 1 && m + n <= self.max_order);
        self.coeffs.insert((m, n), value);
    }

    /// First-order coefficient with respect to `u`.
    pub fn du(&self) -> f64 {
        self.get(1, 0)
    }

    /// First-order coefficient with respect to `v`.
    pub fn dv(&self) -> f64 {
        self.get(0, 1)
    }

    /// Entries of one total order, highest `m` first.
    pub fn order_entries(&self, order: u32) -> Vec<((u32, u32), f64)> {
        let mut out = Vec::new();
        for m in (0..=order).rev() {
            let n = order - m;
            out.push(((m, n), self.get(m, n)));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u32, u32), &f64)> {
        self.coeffs.iter()
    }

    /// Truncated Taylor polynomial evaluated at an offset from the base.
    pub fn truncated_eval(&self, du: f64, dv: f64) -> f64 {
        self.coeffs
            .iter()
            .map(|(&(m, n), &c)| {
                c / (factorial(m) * factorial(n)) * du.powi(m as i32) * dv.powi(n as i32)
            })
            .sum()
    }
}

/// Admissible class of a term: `A` for prey interaction terms F, `B` for
/// predator interaction terms G.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmissClass {
    A,
    B,
}

/// One admissibility finding, naming the offending coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub condition: char,
    pub index: Option<(u32, u32)>,
    pub value: f64,
    pub message: String,
}

/// Outcome of checking a term against an admissible class at a base point.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub class: AdmissClass,
    pub condition_b_ok: bool,
    pub condition_c_ok: bool,
    pub condition_d_ok: bool,
    pub violations: Vec<Violation>,
}

impl AdmissibilityReport {
    pub fn all_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the class conditions of a term at `base`.
///
/// Condition (b): the term vanishes at the base point. Condition (c): the
/// first-order coefficients that the class pins to zero actually vanish
/// (class A: both d_u and d_v at the base; class B: d_u only, since the d_v
/// coefficient of a class-B term is the unknown linear rate and is never
/// constrained), together with the class's monomial-shape constraints
/// (class A: m >= 1 and m + n >= 2; class B: n >= 1 and m + n >= 2, with the
/// bare `v` monomial exempt as the linear-rate carrier). Condition (d),
/// constant Taylor coefficients, holds by construction of the monomial
/// representation and is reported true.
pub fn check_admissible(
    term: &RationalTaylorTerm,
    class: AdmissClass,
    base: (f64, f64),
) -> AdmissibilityReport {
    let mut violations: Vec<Violation> = Vec::new();
    let mut seen: BTreeMap<(u32, u32), usize> = BTreeMap::new();

    let mut push = |violations: &mut Vec<Violation>, v: Violation| {
        if let Some(idx) = v.index {
            if seen.contains_key(&idx) {
                return;
            }
            seen.insert(idx, violations.len());
        }
        violations.push(v);
    };

    // condition (b): vanish at the base solution
    let value_at_base = term.evaluate(base.0, base.1).unwrap_or(f64::NAN);
    let b_ok = value_at_base.is_finite() && value_at_base.abs() <= COEFF_EPS;
    if !b_ok {
        violations.push(Violation {
            condition: 'b',
            index: None,
            value: value_at_base,
            message: format!(
                "term does not vanish at base ({}, {}): value {value_at_base:.6e}",
                base.0, base.1
            ),
        });
    }

    // condition (c), part 1: pinned first-order coefficients at the base
    let du = term.partial(1, 0, base.0, base.1).unwrap_or(f64::NAN);
    if !(du.is_finite() && du.abs() <= COEFF_EPS) {
        push(
            &mut violations,
            Violation {
                condition: 'c',
                index: Some((1, 0)),
                value: du,
                message: format!("first-order (1,0) coefficient at base is {du:.6e}, expected 0"),
            },
        );
    }
    if class == AdmissClass::A {
        let dv = term.partial(0, 1, base.0, base.1).unwrap_or(f64::NAN);
        if !(dv.is_finite() && dv.abs() <= COEFF_EPS) {
            push(
                &mut violations,
                Violation {
                    condition: 'c',
                    index: Some((0, 1)),
                    value: dv,
                    message: format!(
                        "first-order (0,1) coefficient at base is {dv:.6e}, expected 0"
                    ),
                },
            );
        }
    }

    // condition (c), part 2: monomial shape of the class
    for mo in term.monomials() {
        let bad = match class {
            AdmissClass::A => mo.m < 1 || mo.m + mo.n < 2,
            AdmissClass::B => {
                let linear_rate = mo.m == 0 && mo.n == 1;
                !linear_rate && (mo.n < 1 || mo.m + mo.n < 2)
            }
        };
        if bad {
            push(
                &mut violations,
                Violation {
                    condition: 'c',
                    index: Some((mo.m, mo.n)),
                    value: mo.coeff,
                    message: format!(
                        "monomial ({}, {}) with coefficient {:.6e} outside the class-{} form",
                        mo.m,
                        mo.n,
                        mo.coeff,
                        match class {
                            AdmissClass::A => "A",
                            AdmissClass::B => "B",
                        }
                    ),
                },
            );
        }
    }

    let c_ok = !violations.iter().any(|v| v.condition == 'c');
    AdmissibilityReport {
        class,
        condition_b_ok: b_ok,
        condition_c_ok: c_ok,
        condition_d_ok: true,
        violations,
    }
}

/// The bundled application models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hydra,
    HollingTanner,
    Bazykin,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hydra" => Ok(ModelKind::Hydra),
            "holling_tanner" => Ok(ModelKind::HollingTanner),
            "bazykin" => Ok(ModelKind::Bazykin),
            other => Err(LvError::InvalidParam {
                name: "kind".into(),
                reason: format!("unknown model kind `{other}`"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Hydra => "hydra",
            ModelKind::HollingTanner => "holling_tanner",
            ModelKind::Bazykin => "bazykin",
        }
    }
}

/// A fully assembled model: both reaction right-hand sides (growth plus
/// interaction in one term each), the known constant equilibria, and the
/// diffusion pair.
#[derive(Debug, Clone)]
pub struct ModelPreset {
    pub kind: Option<ModelKind>,
    pub params: BTreeMap<String, f64>,
    pub f: RationalTaylorTerm,
    pub g: RationalTaylorTerm,
    pub base_solutions: Vec<(f64, f64)>,
    pub diffusion: (f64, f64),
}

impl ModelPreset {
    /// Builds a custom model from explicit terms; verifies the equilibria.
    pub fn custom(
        f: RationalTaylorTerm,
        g: RationalTaylorTerm,
        base_solutions: Vec<(f64, f64)>,
        diffusion: (f64, f64),
    ) -> Result<Self> {
        let preset = Self {
            kind: None,
            params: BTreeMap::new(),
            f,
            g,
            base_solutions,
            diffusion,
        };
        preset.verify()?;
        Ok(preset)
    }

    fn verify(&self) -> Result<()> {
        if self.diffusion.0 <= 0.0 || self.diffusion.1 <= 0.0 {
            return Err(LvError::InvalidParam {
                name: "diffusion".into(),
                reason: "both diffusion coefficients must be positive".into(),
            });
        }
        for &(u0, v0) in &self.base_solutions {
            if u0 < 0.0 || v0 < 0.0 {
                return Err(LvError::InvalidParam {
                    name: "base_solutions".into(),
                    reason: format!("base ({u0}, {v0}) must be non-negative"),
                });
            }
            let fv = self.f.evaluate(u0, v0)?;
            let gv = self.g.evaluate(u0, v0)?;
            if fv.abs() > 1e-12 || gv.abs() > 1e-12 {
                return Err(LvError::InvalidParam {
                    name: "base_solutions".into(),
                    reason: format!(
                        "({u0}, {v0}) is not an equilibrium: F = {fv:.3e}, G = {gv:.3e}"
                    ),
                });
            }
        }
        Ok(())
    }
}

fn require(params: &BTreeMap<String, f64>, name: &str) -> Result<f64> {
    params.get(name).copied().ok_or_else(|| LvError::InvalidParam {
        name: name.into(),
        reason: "missing".into(),
    })
}

fn require_positive(params: &BTreeMap<String, f64>, name: &str) -> Result<f64> {
    let v = require(params, name)?;
    if v <= 0.0 {
        return Err(LvError::InvalidParam {
            name: name.into(),
            reason: format!("must be strictly positive, got {v}"),
        });
    }
    Ok(v)
}

fn diffusion_of(params: &BTreeMap<String, f64>) -> Result<(f64, f64)> {
    let d1 = params.get("d1").copied().unwrap_or(1.0);
    let d2 = params.get("d2").copied().unwrap_or(1.0);
    if d1 <= 0.0 || d2 <= 0.0 {
        return Err(LvError::InvalidParam {
            name: "d1/d2".into(),
            reason: "diffusion coefficients must be positive".into(),
        });
    }
    Ok((d1, d2))
}

/// Assembles one of the bundled models from its named parameters.
///
/// The full right-hand sides are stored, growth terms included:
///
/// * hydra: `F = (a-b)u - e u^2 - (p + lambda v) u v`,
///   `G = -m v + mu p u v + mu lambda u v^2`; equilibrium (0,0).
/// * holling_tanner (`alpha` must equal 1 so the functional response fits the
///   `1/(1+u)` denominator exactly): `F = u(1-u) - beta u v/(1+u)`,
///   `G = -delta v - v^2 + gamma u v/(1+u)`; equilibria (0,0) and (1,0).
/// * bazykin (`A` must equal 1, same reason): `F = a u(1-u/K) - b u v/(1+u)`,
///   `G = -c v + d u v/(1+u) - h v^2`; equilibrium (0,0).
pub fn preset(kind: ModelKind, params: &BTreeMap<String, f64>) -> Result<ModelPreset> {
    let (f, g, bases) = match kind {
        ModelKind::Hydra => {
            let a = require_positive(params, "a")?;
            let b = require_positive(params, "b")?;
            let e = require_positive(params, "e")?;
            let p = require_positive(params, "p")?;
            let lambda = require(params, "lambda")?;
            if lambda < 0.0 {
                return Err(LvError::InvalidParam {
                    name: "lambda".into(),
                    reason: "cooperation strength must be non-negative".into(),
                });
            }
            let mu = require_positive(params, "mu")?;
            let m = require_positive(params, "m")?;
            let f = RationalTaylorTerm::new([
                (1, 0, 0, a - b),
                (2, 0, 0, -e),
                (1, 1, 0, -p),
                (1, 2, 0, -lambda),
            ])?;
            let g = RationalTaylorTerm::new([
                (0, 1, 0, -m),
                (1, 1, 0, mu * p),
                (1, 2, 0, mu * lambda),
            ])?;
            (f, g, vec![(0.0, 0.0)])
        }
        ModelKind::HollingTanner => {
            let alpha = require_positive(params, "alpha")?;
            if (alpha - 1.0).abs() > 1e-12 {
                return Err(LvError::InvalidParam {
                    name: "alpha".into(),
                    reason: "the rational form fixes the denominator to (1 + u); only alpha = 1 \
                             is representable exactly"
                        .into(),
                });
            }
            let beta = require_positive(params, "beta")?;
            let gamma = require_positive(params, "gamma")?;
            let delta = require_positive(params, "delta")?;
            let f = RationalTaylorTerm::new([(1, 0, 0, 1.0), (2, 0, 0, -1.0), (1, 1, 1, -beta)])?;
            let g = RationalTaylorTerm::new([
                (0, 1, 0, -delta),
                (0, 2, 0, -1.0),
                (1, 1, 1, gamma),
            ])?;
            (f, g, vec![(0.0, 0.0), (1.0, 0.0)])
        }
        ModelKind::Bazykin => {
            let a = require_positive(params, "a")?;
            let k = require_positive(params, "K")?;
            let b = require_positive(params, "b")?;
            let big_a = require_positive(params, "A")?;
            if (big_a - 1.0).abs() > 1e-12 {
                return Err(LvError::InvalidParam {
                    name: "A".into(),
                    reason: "the rational form fixes the denominator to (1 + u); only A = 1 is \
                             representable exactly"
                        .into(),
                });
            }
            let c = require_positive(params, "c")?;
            let d = require_positive(params, "d")?;
            let h = require_positive(params, "h")?;
            let f = RationalTaylorTerm::new([(1, 0, 0, a), (2, 0, 0, -a / k), (1, 1, 1, -b)])?;
            let g = RationalTaylorTerm::new([(0, 1, 0, -c), (1, 1, 1, d), (0, 2, 0, -h)])?;
            (f, g, vec![(0.0, 0.0)])
        }
    };
    let preset = ModelPreset {
        kind: Some(kind),
        params: params.clone(),
        f,
        g,
        base_solutions: bases,
        diffusion: diffusion_of(params)?,
    };
    preset.verify()?;
    Ok(preset)
}
