//! Config-driven orchestration: parse and validate one TOML run
//! configuration, generate synthetic truth, run the variation and recovery
//! pipeline, compare against truth, and emit reports and plot-ready data.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::forward::{solve_forward_terms, MeasurementRecord, SolverConfig};
use crate::recovery::{
    epsilon_samples, exact_order_data, measured_order_data, run_experiments, run_recovery,
    RecoveryReport,
};
use crate::spectral::SpaceTimeField;
use crate::taylor::TaylorTable;
use crate::variation::{assemble_initial, EpsilonFamily};

pub use config::{DataMode, RunConfig, Validated};

/// Outcome of a pipeline run.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: RecoveryReport,
    pub tolerance_ok: bool,
    pub max_scaled_error: Option<f64>,
    pub files: Vec<PathBuf>,
    pub summary_path: PathBuf,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

/// Scaled error convention: absolute error over `max(|truth|, 1)`, so
/// coefficients whose true value is zero are judged absolutely.
pub fn scaled_error(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs() / truth.abs().max(1.0)
}

/// Runs the full experiment: forward solves, measurement extraction,
/// recovery, reports. Returns whether every configured tolerance was met.
pub fn run_pipeline(v: &Validated, out_dir: &Path) -> Result<PipelineOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let problem = &v.problem;
    let grid = &problem.grid;
    let solver = SolverConfig {
        scheme: v.scheme,
        steps: problem.steps,
        positivity_clip: v.positivity_clip,
    };

    // truth tables of the configured model at the chosen base
    let truth_f = stage(
        "model/taylor_at",
        v.preset.f.taylor_at(problem.base, v.max_order.max(1)),
    )?;
    let truth_g = stage(
        "model/taylor_at",
        v.preset.g.taylor_at(problem.base, v.max_order.max(1)),
    )?;

    let eps_set = epsilon_samples(v.eps, &v.ladder, v.richardson);

    // the initial-data families must assemble non-negative for every
    // epsilon before anything is solved
    for spec in &problem.design.experiments {
        stage(
            "variation/assemble_initial",
            EpsilonFamily::new(
                problem.base,
                spec.f.iter().map(|s| s.sample(grid)).collect(),
                spec.g.iter().map(|s| s.sample(grid)).collect(),
                eps_set.clone(),
            ),
        )?;
    }

    // forward stage: synthetic truth solves, measurements only
    let records = stage(
        "forward/solve",
        run_experiments(
            &v.preset.f,
            &v.preset.g,
            v.preset.diffusion,
            problem,
            &solver,
            &eps_set,
        ),
    )?;
    for (e, recs) in records.iter().enumerate() {
        for rec in recs {
            let tag = format!("exp{e}_eps{}", rec.epsilon);
            let b = out_dir.join(format!("measurement_{tag}_boundary.csv"));
            let t = out_dir.join(format!("measurement_{tag}_terminal.csv"));
            rec.write_boundary_csv(&b)?;
            rec.write_terminal_csv(&t)?;
            files.push(b);
            files.push(t);
        }
    }

    // representative forward fields for the first experiment, smallest eps
    {
        let spec = &problem.design.experiments[0];
        let family = stage(
            "variation/assemble_initial",
            EpsilonFamily::new(
                problem.base,
                spec.f.iter().map(|s| s.sample(grid)).collect(),
                spec.g.iter().map(|s| s.sample(grid)).collect(),
                eps_set.clone(),
            ),
        )?;
        let (f0, g0) = stage("variation/assemble_initial", assemble_initial(&family, eps_set[0]))?;
        let sol = stage(
            "forward/solve",
            solve_forward_terms(
                &v.preset.f,
                &v.preset.g,
                v.preset.diffusion,
                grid,
                &f0,
                &g0,
                problem.t_final,
                &solver,
            ),
        )?;
        let u_path = out_dir.join("forward_u.csv");
        let v_path = out_dir.join("forward_v.csv");
        sol.u.write_csv(&u_path)?;
        sol.v.write_csv(&v_path)?;
        files.push(u_path);
        files.push(v_path);
    }

    // variation stage: epsilon differencing of the measurements, and an
    // agreement report against directly solved variation systems
    let data = match v.data_mode {
        DataMode::Measurements => stage(
            "variation/extract",
            measured_order_data(&records, problem.base, v.max_order, v.richardson),
        )?,
        DataMode::Exact => stage(
            "variation/exact",
            exact_order_data(&truth_f, &truth_g, problem, v.max_order),
        )?,
    };
    if v.use_truth {
        let path = out_dir.join("variation_agreement.csv");
        let exact = stage(
            "variation/exact",
            exact_order_data(&truth_f, &truth_g, problem, v.max_order),
        )?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(out, "experiment,order,terminal_sup_rel_diff")?;
        for (e, (got, want)) in data.iter().zip(&exact).enumerate() {
            for (k, (a, b)) in got.orders.iter().zip(&want.orders).enumerate() {
                let scale = b
                    .terminal_u
                    .iter()
                    .chain(&b.terminal_v)
                    .fold(0.0f64, |acc, &x| acc.max(x.abs()))
                    .max(1e-300);
                let diff = a
                    .terminal_u
                    .iter()
                    .zip(&b.terminal_u)
                    .chain(a.terminal_v.iter().zip(&b.terminal_v))
                    .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
                writeln!(out, "{e},{},{}", k + 1, diff / scale)?;
            }
        }
        files.push(path);
    }

    // recovery stage
    let truth_ref = if v.use_truth {
        Some((&truth_f, &truth_g))
    } else {
        None
    };
    let report = stage(
        "recovery/run",
        run_recovery(problem, &data, v.max_order, truth_ref),
    )?;

    // report stage
    let report_path = out_dir.join("recovery_report.csv");
    write_report_csv(&report, &report_path)?;
    files.push(report_path.clone());
    let plot_path = out_dir.join("recovery_plot.csv");
    emit_recovery_plot_data(&report, &plot_path)?;
    files.push(plot_path);

    // tolerance evaluation
    let mut max_scaled: Option<f64> = None;
    for row in &report.rows {
        if let Some(truth) = row.truth {
            let s = scaled_error(row.estimate, truth);
            max_scaled = Some(max_scaled.map_or(s, |m: f64| m.max(s)));
        }
    }
    let mut tolerance_ok = true;
    if let (Some(limit), Some(worst)) = (v.max_abs_error, max_scaled) {
        if worst > limit {
            tolerance_ok = false;
        }
    }
    if let Some(limit) = v.max_residual {
        if report.rows.iter().any(|r| r.residual > limit) {
            tolerance_ok = false;
        }
    }

    let summary_path = out_dir.join("summary.txt");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
        writeln!(
            out,
            "model={} base=({}, {}) grid: L={} N={} solver: {} steps={} T={}",
            v.preset
                .kind
                .map(|k| k.name().to_string())
                .unwrap_or_else(|| "custom".into()),
            problem.base.0,
            problem.base.1,
            grid.length(),
            grid.cells(),
            v.scheme.name(),
            problem.steps,
            problem.t_final
        )?;
        writeln!(
            out,
            "experiments={} modes={:?} eps={} ladder={:?} richardson={} data={:?}",
            problem.design.experiments.len(),
            problem.design.modes,
            v.eps,
            v.ladder,
            v.richardson,
            v.data_mode
        )?;
        writeln!(
            out,
            "first order: G(0,1)={} spread={} projections={}",
            report.first_order.g_v,
            report.first_order.g_v_spread,
            report.first_order.projections_used
        )?;
        for row in &report.rows {
            match row.truth {
                Some(t) => writeln!(
                    out,
                    "order {} {}({},{}): estimate={} truth={} abs_error={} residual={} cond={}",
                    row.order,
                    row.target,
                    row.m,
                    row.n,
                    row.estimate,
                    t,
                    row.abs_error.unwrap(),
                    row.residual,
                    row.cond
                )?,
                None => writeln!(
                    out,
                    "order {} {}({},{}): estimate={} residual={} cond={}",
                    row.order, row.target, row.m, row.n, row.estimate, row.residual, row.cond
                )?,
            }
        }
        match (v.max_abs_error, max_scaled) {
            (Some(limit), Some(worst)) => writeln!(
                out,
                "tolerance: max scaled error {worst:e} vs limit {limit:e}: {}",
                if tolerance_ok { "PASS" } else { "FAIL" }
            )?,
            _ => writeln!(out, "tolerance: no truth comparison configured")?,
        }
    }
    files.push(summary_path.clone());

    Ok(PipelineOutcome {
        report,
        tolerance_ok,
        max_scaled_error: max_scaled,
        files,
        summary_path,
    })
}

/// Report CSV columns: `order,target,m,n,estimate,truth,abs_error,residual,cond`
/// with empty truth cells when no truth was supplied.
pub fn write_report_csv(report: &RecoveryReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "order,target,m,n,estimate,truth,abs_error,residual,cond")?;
    for row in &report.rows {
        let truth = row.truth.map(|t| t.to_string()).unwrap_or_default();
        let abs_error = row.abs_error.map(|e| e.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            row.order, row.target, row.m, row.n, row.estimate, truth, abs_error, row.residual,
            row.cond
        )?;
    }
    Ok(())
}

/// Long-format field data for external plotting: `x,t,value,series`.
pub fn emit_field_plot_data(
    fields: &[(&str, &SpaceTimeField)],
    path: &Path,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,t,value,series")?;
    for (name, field) in fields {
        let nodes = field.grid().nodes().to_vec();
        for i in 0..=field.steps() {
            let t = field.time(i);
            for (j, &x) in nodes.iter().enumerate() {
                writeln!(out, "{x},{t},{},{name}", field.row(i)[j])?;
            }
        }
    }
    Ok(())
}

/// Plot-ready recovery table: `order,coeff,estimate,truth,error`. The
/// coefficient label is `F_m_n` so the cell stays comma-free.
pub fn emit_recovery_plot_data(report: &RecoveryReport, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "order,coeff,estimate,truth,error")?;
    for row in &report.rows {
        writeln!(
            out,
            "{},{}_{}_{},{},{},{}",
            row.order,
            row.target,
            row.m,
            row.n,
            row.estimate,
            row.truth.map(|t| t.to_string()).unwrap_or_default(),
            row.abs_error.map(|e| e.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}

/// Writes the solution fields and measurement of one forward run; the
/// `forward` subcommand's artifact set.
pub fn write_forward_artifacts(
    u: &SpaceTimeField,
    vfield: &SpaceTimeField,
    record: &MeasurementRecord,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let u_path = out_dir.join("u.csv");
    let v_path = out_dir.join("v.csv");
    let b_path = out_dir.join("measurement_boundary.csv");
    let t_path = out_dir.join("measurement_terminal.csv");
    u.write_csv(&u_path)?;
    vfield.write_csv(&v_path)?;
    record.write_boundary_csv(&b_path)?;
    record.write_terminal_csv(&t_path)?;
    Ok(vec![u_path, v_path, b_path, t_path])
}

/// Truth tables for a validated configuration (used by the `variation`
/// subcommand's direct mode and the CLI's truth reporting).
pub fn truth_tables(v: &Validated) -> Result<(TaylorTable, TaylorTable)> {
    Ok((
        v.preset.f.taylor_at(v.problem.base, v.max_order.max(3))?,
        v.preset.g.taylor_at(v.problem.base, v.max_order.max(3))?,
    ))
}
