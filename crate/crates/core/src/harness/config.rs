//! The plain-text run configuration: a TOML key-value tree with sections
//! `model`, `grid`, `solver`, `design`, `recovery`, `tolerances`, `output`.
//! Every section validates against its module's constraints before any
//! solve starts. The schema is documented in the repository README.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{LvError, Result};
use crate::forward::Scheme;
use crate::modal::CosineSeries;
use crate::recovery::{
    ExperimentDesign, ExperimentSpec, FirstOrderPolicy, RecoveryProblem,
};
use crate::spectral::Grid1D;
use crate::taylor::{check_admissible, preset, AdmissClass, ModelKind, ModelPreset, RationalTaylorTerm};

/// A TOML number that may be written as integer or float.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
pub enum Num {
    I(i64),
    F(f64),
}

impl Num {
    pub fn as_f64(self) -> f64 {
        match self {
            Num::I(i) => i as f64,
            Num::F(f) => f,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, Num>,
    #[serde(default)]
    pub custom: Option<CustomModel>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    /// Explicit term lists as `[m, n, h, coeff]` rows.
    pub f: Vec<(u32, u32, u8, Num)>,
    pub g: Vec<(u32, u32, u8, Num)>,
    pub base_solutions: Vec<(Num, Num)>,
    pub d1: Num,
    pub d2: Num,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub length: Num,
    pub cells: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub scheme: String,
    pub steps: usize,
    pub t_final: Num,
    #[serde(default)]
    pub positivity_clip: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default)]
    pub f1: Vec<Num>,
    #[serde(default)]
    pub g1: Vec<Num>,
    #[serde(default)]
    pub f2: Vec<Num>,
    #[serde(default)]
    pub g2: Vec<Num>,
    #[serde(default)]
    pub f3: Vec<Num>,
    #[serde(default)]
    pub g3: Vec<Num>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub modes: Vec<usize>,
    pub eps: Num,
    #[serde(default)]
    pub ladder: Vec<Num>,
    #[serde(default = "default_true")]
    pub richardson: bool,
    /// Multiplicative jitter on the experiment profiles, seeded from
    /// `output.seed`; 0 disables.
    #[serde(default)]
    pub jitter: f64,
    pub experiments: Vec<ExperimentSection>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverySection {
    pub max_order: u32,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub base: Option<(Num, Num)>,
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub tikhonov: f64,
    #[serde(default)]
    pub known_f_u: Option<Num>,
    #[serde(default)]
    pub recover_f_v: Option<bool>,
    #[serde(default = "default_true")]
    pub use_truth: bool,
    /// Lifts the default order cap of 4. Epsilon-stencil noise grows like
    /// eps^{-k} times the solver error, so higher orders need deliberately
    /// tightened grids; a warning is printed when the cap is lifted.
    #[serde(default)]
    pub allow_high_order: bool,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSection {
    #[serde(default)]
    pub max_abs_error: Option<f64>,
    #[serde(default)]
    pub max_residual: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

/// The raw parsed configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub design: DesignSection,
    pub recovery: RecoverySection,
    #[serde(default)]
    pub tolerances: ToleranceSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// How the recovery stage obtains its variation data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// Epsilon differencing of synthetic measurements (the end-to-end path).
    Measurements,
    /// Closed-form variation fields of the truth tables.
    Exact,
}

/// A validated configuration with every section resolved.
#[derive(Debug, Clone)]
pub struct Validated {
    pub preset: ModelPreset,
    pub scheme: Scheme,
    pub positivity_clip: bool,
    pub problem: RecoveryProblem,
    pub max_order: u32,
    pub eps: f64,
    pub ladder: Vec<f64>,
    pub richardson: bool,
    pub data_mode: DataMode,
    pub use_truth: bool,
    pub max_abs_error: Option<f64>,
    pub max_residual: Option<f64>,
    pub out_dir: String,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LvError::Config(format!("{}: {e}", path.display())))?;
        Self::from_str_named(&text, &path.display().to_string())
    }

    pub fn from_str_named(text: &str, name: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LvError::Config(format!("{name}: {e}")))
    }

    /// Builds the model alone; the `forward` subcommand and `--truth` flag
    /// need nothing else.
    pub fn build_model(&self) -> Result<ModelPreset> {
        if self.model.kind == "custom" {
            let custom = self.model.custom.as_ref().ok_or_else(|| {
                LvError::Config("kind = \"custom\" requires a [model.custom] section".into())
            })?;
            let to_term = |rows: &[(u32, u32, u8, Num)]| {
                RationalTaylorTerm::new(
                    rows.iter().map(|&(m, n, h, c)| (m, n, h, c.as_f64())),
                )
            };
            ModelPreset::custom(
                to_term(&custom.f)?,
                to_term(&custom.g)?,
                custom
                    .base_solutions
                    .iter()
                    .map(|&(u, v)| (u.as_f64(), v.as_f64()))
                    .collect(),
                (custom.d1.as_f64(), custom.d2.as_f64()),
            )
        } else {
            let kind = ModelKind::parse(&self.model.kind)?;
            let params: BTreeMap<String, f64> = self
                .model
                .params
                .iter()
                .map(|(k, &v)| (k.clone(), v.as_f64()))
                .collect();
            preset(kind, &params)
        }
    }

    /// Validates every section and resolves the recovery problem.
    pub fn validate(&self) -> Result<Validated> {
        let model = self.build_model()?;
        let grid = Grid1D::shared(self.grid.length.as_f64(), self.grid.cells)?;
        let scheme = Scheme::parse(&self.solver.scheme)?;
        if self.solver.steps < 1 {
            return Err(LvError::Config("solver.steps must be at least 1".into()));
        }
        let t_final = self.solver.t_final.as_f64();
        if t_final <= 0.0 {
            return Err(LvError::Config("solver.t_final must be positive".into()));
        }

        // design
        if self.design.experiments.is_empty() {
            return Err(LvError::Config("design needs at least one experiment".into()));
        }
        let max_mode = self.design.modes.iter().copied().max().unwrap_or(0);
        if self.design.modes.is_empty() {
            return Err(LvError::Config("design.modes must not be empty".into()));
        }
        if max_mode > self.grid.cells / 2 {
            return Err(LvError::TooManyModes {
                requested: max_mode,
                max: self.grid.cells / 2,
            });
        }
        let eps = self.design.eps.as_f64();
        if eps <= 0.0 {
            return Err(LvError::Config("design.eps must be positive".into()));
        }
        let ladder: Vec<f64> = if self.design.ladder.is_empty() {
            vec![1.0, 2.0, 4.0]
        } else {
            self.design.ladder.iter().map(|n| n.as_f64()).collect()
        };
        if ladder.iter().any(|&m| m <= 0.0) {
            return Err(LvError::Config("ladder multipliers must be positive".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.output.seed);
        let series = |coeffs: &[Num], rng: &mut ChaCha8Rng| -> CosineSeries {
            let mut c: Vec<f64> = coeffs.iter().map(|n| n.as_f64()).collect();
            if self.design.jitter > 0.0 {
                for x in &mut c {
                    let r: f64 = rng.gen_range(-1.0..1.0);
                    *x *= 1.0 + self.design.jitter * r;
                }
            }
            CosineSeries::new(c)
        };
        let experiments: Vec<ExperimentSpec> = self
            .design
            .experiments
            .iter()
            .map(|e| ExperimentSpec {
                f: vec![
                    series(&e.f1, &mut rng),
                    series(&e.f2, &mut rng),
                    series(&e.f3, &mut rng),
                ],
                g: vec![
                    series(&e.g1, &mut rng),
                    series(&e.g2, &mut rng),
                    series(&e.g3, &mut rng),
                ],
            })
            .collect();
        let design = ExperimentDesign {
            experiments,
            modes: self.design.modes.clone(),
        };

        // recovery
        let base = match self.recovery.base {
            Some((u, v)) => (u.as_f64(), v.as_f64()),
            None => *model.base_solutions.first().ok_or_else(|| {
                LvError::Config("model declares no base solutions".into())
            })?,
        };
        if !model
            .base_solutions
            .iter()
            .any(|&(u, v)| (u - base.0).abs() <= 1e-12 && (v - base.1).abs() <= 1e-12)
        {
            return Err(LvError::Config(format!(
                "recovery.base ({}, {}) is not one of the model's equilibria",
                base.0, base.1
            )));
        }

        let table1_f = model.f.taylor_at(base, 1)?;
        let table1_g = model.g.taylor_at(base, 1)?;
        if table1_g.du().abs() > 1e-12 {
            return Err(LvError::Config(format!(
                "G_u at the base is {:.3e}; the predator term must be class-B admissible",
                table1_g.du()
            )));
        }
        let mode = self.recovery.mode.as_deref().unwrap_or("strict");
        let policy = match mode {
            "strict" => {
                let rep_f = check_admissible(&model.f, AdmissClass::A, base);
                let rep_g = check_admissible(&model.g, AdmissClass::B, base);
                if !(rep_f.all_ok() && rep_g.all_ok()) {
                    let first = rep_f
                        .violations
                        .iter()
                        .chain(rep_g.violations.iter())
                        .next()
                        .map(|v| v.message.clone())
                        .unwrap_or_default();
                    return Err(LvError::Config(format!(
                        "model is not admissible at base ({}, {}) in strict mode ({first}); \
                         set recovery.mode = \"relaxed\"",
                        base.0, base.1
                    )));
                }
                FirstOrderPolicy {
                    known_f_u: 0.0,
                    recover_f_v: false,
                }
            }
            "relaxed" => FirstOrderPolicy {
                known_f_u: self
                    .recovery
                    .known_f_u
                    .map(|n| n.as_f64())
                    .unwrap_or_else(|| table1_f.du()),
                recover_f_v: self
                    .recovery
                    .recover_f_v
                    .unwrap_or(table1_f.dv().abs() > 1e-12),
            },
            other => {
                return Err(LvError::Config(format!(
                    "recovery.mode must be \"strict\" or \"relaxed\", got `{other}`"
                )))
            }
        };

        let data_mode = match self.recovery.data.as_deref().unwrap_or("measurements") {
            "measurements" => DataMode::Measurements,
            "exact" => DataMode::Exact,
            other => {
                return Err(LvError::Config(format!(
                    "recovery.data must be \"measurements\" or \"exact\", got `{other}`"
                )))
            }
        };
        if self.recovery.max_order < 1 {
            return Err(LvError::Config("recovery.max_order must be >= 1".into()));
        }
        if self.recovery.max_order > 4 {
            if !self.recovery.allow_high_order {
                return Err(LvError::Config(
                    "recovery.max_order is capped at 4 (epsilon-stencil noise grows with \
                     the order); set recovery.allow_high_order = true to override"
                        .into(),
                ));
            }
            eprintln!(
                "warning: recovery.max_order = {} exceeds the default cap of 4; \
                 epsilon-stencil noise grows as eps^-k and may dominate the estimates",
                self.recovery.max_order
            );
        }
        if self.recovery.tikhonov < 0.0 {
            return Err(LvError::Config("recovery.tikhonov must be >= 0".into()));
        }

        let problem = RecoveryProblem {
            grid,
            t_final,
            steps: self.solver.steps,
            diffusion: model.diffusion,
            base,
            design,
            policy,
            tikhonov: self.recovery.tikhonov,
        };

        Ok(Validated {
            preset: model,
            scheme,
            positivity_clip: self.solver.positivity_clip,
            problem,
            max_order: self.recovery.max_order,
            eps,
            ladder,
            richardson: self.design.richardson,
            data_mode,
            use_truth: self.recovery.use_truth,
            max_abs_error: self.tolerances.max_abs_error,
            max_residual: self.tolerances.max_residual,
            out_dir: self.output.dir.clone().unwrap_or_else(|| "out".into()),
            seed: self.output.seed,
        })
    }
}
