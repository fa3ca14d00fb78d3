//! `lvinv`: forward simulation, variation extraction, coefficient recovery,
//! and the end-to-end pipeline, all driven by one TOML configuration.
//!
//! Exit codes: 0 success, 2 validation failure, 3 numerical failure,
//! 4 tolerance failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lvinv::error::{LvError, Result};
use lvinv::forward::{measure, solve_forward_terms, Scheme, SolverConfig};
use lvinv::harness::{
    run_pipeline, truth_tables, write_forward_artifacts, write_report_csv, RunConfig, Validated,
};
use lvinv::recovery::{
    epsilon_samples, measured_order_data, run_experiments, run_recovery,
};
use lvinv::taylor::{preset, ModelKind};
use lvinv::variation::{
    assemble_initial, extract_variation_fd, solve_variation_direct, EpsFieldSample,
    EpsilonFamily, Provenance, VariationFields, VariationStack,
};

#[derive(Parser)]
#[command(
    name = "lvinv",
    version,
    about = "Predator-prey reaction-diffusion simulation and interaction-coefficient recovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the coupled system once and write field and measurement CSVs.
    Forward {
        /// Run configuration; flags below override its sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model kind: hydra | holling_tanner | bazykin.
        #[arg(long)]
        model: Option<String>,
        /// Comma-separated model parameters, e.g. "a=1,K=2,b=1".
        #[arg(long)]
        params: Option<String>,
        /// Domain length.
        #[arg(long = "L")]
        length: Option<f64>,
        /// Number of grid cells.
        #[arg(long = "N")]
        cells: Option<usize>,
        /// Final time.
        #[arg(long = "T")]
        t_final: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// backward_euler_imex | crank_nicolson_imex.
        #[arg(long)]
        scheme: Option<String>,
        /// Epsilon scaling of the initial-data family.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Extract variation fields by epsilon differencing and/or direct solves.
    Variation {
        #[arg(long)]
        config: PathBuf,
        /// Highest variation order to produce.
        #[arg(long)]
        order: u32,
        #[arg(long)]
        eps: Option<f64>,
        /// Comma-separated ladder multipliers, e.g. "1,2,4".
        #[arg(long)]
        ladder: Option<String>,
        /// fd | direct | both.
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover Taylor coefficients from synthetic measurements.
    Recover {
        /// Run configuration describing the experiment design.
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        max_order: Option<u32>,
        /// Absolute epsilon values, e.g. "0.01,0.02,0.04".
        #[arg(long)]
        eps_ladder: Option<String>,
        /// Optional model config whose coefficients fill the truth columns.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Report directory (defaults to --out).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full run: forward, variation, recovery, reports, tolerance gate.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn classify(e: &LvError) -> u8 {
    match e {
        LvError::Stage { source, .. } => classify(source),
        LvError::Config(_)
        | LvError::InvalidParam { .. }
        | LvError::TooManyModes { .. }
        | LvError::GridMismatch(_)
        | LvError::Io(_) => 2,
        _ => 3,
    }
}

fn parse_params(s: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for pair in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| LvError::Config(format!("bad parameter `{pair}`, expected k=v")))?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|e| LvError::Config(format!("parameter `{pair}`: {e}")))?;
        out.insert(k.trim().to_string(), value);
    }
    Ok(out)
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| LvError::Config(format!("bad number `{p}`: {e}")))
        })
        .collect()
}

fn load_validated(path: &Path) -> Result<Validated> {
    RunConfig::from_path(path)?.validate()
}

#[allow(clippy::too_many_arguments)]
fn cmd_forward(
    config: Option<PathBuf>,
    model: Option<String>,
    params: Option<String>,
    length: Option<f64>,
    cells: Option<usize>,
    t_final: Option<f64>,
    steps: Option<usize>,
    scheme: Option<String>,
    eps: Option<f64>,
    out: PathBuf,
) -> Result<()> {
    let loaded = config.map(|p| load_validated(&p)).transpose()?;
    let preset_model = match (&model, &loaded) {
        (Some(kind), _) => preset(
            ModelKind::parse(kind)?,
            &parse_params(params.as_deref().unwrap_or(""))?,
        )?,
        (None, Some(v)) => v.preset.clone(),
        (None, None) => {
            return Err(LvError::Config(
                "forward needs --config or --model/--params".into(),
            ))
        }
    };
    let grid = match (&loaded, length, cells) {
        (Some(v), None, None) => v.problem.grid.clone(),
        _ => lvinv::spectral::Grid1D::shared(
            length.unwrap_or(std::f64::consts::PI),
            cells.unwrap_or(256),
        )?,
    };
    let t = t_final.or(loaded.as_ref().map(|v| v.problem.t_final)).unwrap_or(1.0);
    let n_steps = steps.or(loaded.as_ref().map(|v| v.problem.steps)).unwrap_or(2000);
    let sch = match scheme {
        Some(s) => Scheme::parse(&s)?,
        None => loaded
            .as_ref()
            .map(|v| v.scheme)
            .unwrap_or(Scheme::BackwardEulerImex),
    };
    let eps = eps.or(loaded.as_ref().map(|v| v.eps)).unwrap_or(0.05);

    // initial data: the first designed experiment, or the default family
    // f1 = 1, g1 = 1 + cos(pi x / L)
    let base = loaded
        .as_ref()
        .map(|v| v.problem.base)
        .unwrap_or_else(|| preset_model.base_solutions[0]);
    let (f_list, g_list): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match &loaded {
        Some(v) => {
            let spec = &v.problem.design.experiments[0];
            (
                spec.f.iter().map(|s| s.sample(&grid)).collect(),
                spec.g.iter().map(|s| s.sample(&grid)).collect(),
            )
        }
        None => {
            let l = grid.length();
            (
                vec![grid.sample(|_| 1.0)],
                vec![grid.sample(|x| 1.0 + (std::f64::consts::PI * x / l).cos())],
            )
        }
    };
    let family = EpsilonFamily::new(base, f_list, g_list, vec![eps])?;
    let (f0, g0) = assemble_initial(&family, eps)?;
    let config = SolverConfig::new(sch, n_steps);
    let sol = solve_forward_terms(
        &preset_model.f,
        &preset_model.g,
        preset_model.diffusion,
        &grid,
        &f0,
        &g0,
        t,
        &config,
    )?;
    for w in &sol.warnings {
        eprintln!("warning: {w:?}");
    }
    let record = measure(&sol.u, &sol.v, eps)?;
    let written = write_forward_artifacts(&sol.u, &sol.v, &record, &out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_variation(
    config: PathBuf,
    order: u32,
    eps: Option<f64>,
    ladder: Option<String>,
    mode: String,
    out: Option<PathBuf>,
) -> Result<()> {
    let v = load_validated(&config)?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&v.out_dir));
    std::fs::create_dir_all(&out_dir)?;
    let eps = eps.unwrap_or(v.eps);
    let ladder = match ladder {
        Some(s) => parse_list(&s)?,
        None => v.ladder.clone(),
    };
    let problem = &v.problem;
    let grid = &problem.grid;
    let solver = SolverConfig::new(v.scheme, problem.steps);
    let spec = &problem.design.experiments[0];
    let (tf, tg) = truth_tables(&v)?;
    let do_fd = mode == "fd" || mode == "both";
    let do_direct = mode == "direct" || mode == "both";
    if !(do_fd || do_direct) {
        return Err(LvError::Config(format!(
            "--mode must be fd, direct or both, got `{mode}`"
        )));
    }

    let mut fd_orders: Vec<VariationFields> = Vec::new();
    if do_fd {
        let eps_set = epsilon_samples(eps, &ladder, v.richardson);
        let family = EpsilonFamily::new(
            problem.base,
            spec.f.iter().map(|s| s.sample(grid)).collect(),
            spec.g.iter().map(|s| s.sample(grid)).collect(),
            eps_set.clone(),
        )?;
        let mut samples = Vec::new();
        for &e in &eps_set {
            let (f0, g0) = assemble_initial(&family, e)?;
            let sol = solve_forward_terms(
                &v.preset.f,
                &v.preset.g,
                v.preset.diffusion,
                grid,
                &f0,
                &g0,
                problem.t_final,
                &solver,
            )?;
            samples.push(EpsFieldSample {
                eps: e,
                u: sol.u,
                v: sol.v,
            });
        }
        for k in 1..=order {
            let fields = extract_variation_fd(&samples, problem.base, k, v.richardson)?;
            let up = out_dir.join(format!("fd_u{k}.csv"));
            let vp = out_dir.join(format!("fd_v{k}.csv"));
            fields.u.write_csv(&up)?;
            fields.v.write_csv(&vp)?;
            println!("wrote {}", up.display());
            println!("wrote {}", vp.display());
            fd_orders.push(fields);
        }
    }

    let mut direct_orders: Vec<VariationFields> = Vec::new();
    if do_direct {
        let mut stack = VariationStack::new(Provenance::Direct);
        for k in 1..=order {
            let f_k = spec.f_order(k).sample(grid);
            let g_k = spec.g_order(k).sample(grid);
            let fields = solve_variation_direct(
                k,
                &stack,
                &tf,
                &tg,
                v.preset.diffusion,
                &f_k,
                &g_k,
                grid,
                problem.t_final,
                &solver,
            )?;
            let up = out_dir.join(format!("direct_u{k}.csv"));
            let vp = out_dir.join(format!("direct_v{k}.csv"));
            fields.u.write_csv(&up)?;
            fields.v.write_csv(&vp)?;
            println!("wrote {}", up.display());
            println!("wrote {}", vp.display());
            stack.push(fields.clone());
            direct_orders.push(fields);
        }
    }

    if do_fd && do_direct {
        use std::io::Write;
        let path = out_dir.join("agreement.csv");
        let mut outf = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(outf, "order,u_sup_rel_diff,v_sup_rel_diff")?;
        for (k, (a, b)) in fd_orders.iter().zip(&direct_orders).enumerate() {
            let du = a.u.sup_distance(&b.u) / b.u.sup_norm().max(1e-300);
            let dv = a.v.sup_distance(&b.v) / b.v.sup_norm().max(1e-300);
            writeln!(outf, "{},{du},{dv}", k + 1)?;
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_recover(
    design: PathBuf,
    max_order: Option<u32>,
    eps_ladder: Option<String>,
    truth: Option<PathBuf>,
    report: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut v = load_validated(&design)?;
    if let Some(k) = max_order {
        v.max_order = k;
    }
    if let Some(s) = eps_ladder {
        let values = parse_list(&s)?;
        if values.is_empty() {
            return Err(LvError::Config("--eps-ladder is empty".into()));
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        v.eps = min;
        v.ladder = values.iter().map(|x| x / min).collect();
    }
    let out_dir = out
        .or(report.clone())
        .unwrap_or_else(|| PathBuf::from(&v.out_dir));
    std::fs::create_dir_all(&out_dir)?;

    let truth_tables = truth
        .map(|p| -> Result<_> {
            let m = RunConfig::from_path(&p)?.build_model()?;
            Ok((
                m.f.taylor_at(v.problem.base, v.max_order.max(1))?,
                m.g.taylor_at(v.problem.base, v.max_order.max(1))?,
            ))
        })
        .transpose()?;

    let solver = SolverConfig::new(v.scheme, v.problem.steps);
    let eps_set = epsilon_samples(v.eps, &v.ladder, v.richardson);
    let records = run_experiments(
        &v.preset.f,
        &v.preset.g,
        v.preset.diffusion,
        &v.problem,
        &solver,
        &eps_set,
    )?;
    let data = measured_order_data(&records, v.problem.base, v.max_order, v.richardson)?;
    let rep = run_recovery(
        &v.problem,
        &data,
        v.max_order,
        truth_tables.as_ref().map(|(f, g)| (f, g)),
    )?;

    let csv = out_dir.join("recovery_report.csv");
    write_report_csv(&rep, &csv)?;
    println!("wrote {}", csv.display());
    println!(
        "first order: G(0,1) = {} (spread {:.3e} over {} projections)",
        rep.first_order.g_v, rep.first_order.g_v_spread, rep.first_order.projections_used
    );
    for row in &rep.rows {
        match (row.truth, row.abs_error) {
            (Some(t), Some(e)) => println!(
                "order {} {}({},{}): estimate {:+.6e} truth {:+.6e} abs_error {:.3e} cond {:.3e}",
                row.order, row.target, row.m, row.n, row.estimate, t, e, row.cond
            ),
            _ => println!(
                "order {} {}({},{}): estimate {:+.6e} residual {:.3e} cond {:.3e}",
                row.order, row.target, row.m, row.n, row.estimate, row.residual, row.cond
            ),
        }
    }
    Ok(())
}

fn cmd_pipeline(config: PathBuf, out: Option<PathBuf>) -> Result<bool> {
    let v = load_validated(&config)?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&v.out_dir));
    let outcome = run_pipeline(&v, &out_dir)?;
    println!(
        "pipeline finished: {} files, summary at {}",
        outcome.files.len(),
        outcome.summary_path.display()
    );
    if let Some(worst) = outcome.max_scaled_error {
        println!("max scaled coefficient error: {worst:.3e}");
    }
    println!(
        "tolerances: {}",
        if outcome.tolerance_ok { "PASS" } else { "FAIL" }
    );
    Ok(outcome.tolerance_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<bool> = match cli.command {
        Command::Forward {
            config,
            model,
            params,
            length,
            cells,
            t_final,
            steps,
            scheme,
            eps,
            out,
        } => cmd_forward(
            config, model, params, length, cells, t_final, steps, scheme, eps, out,
        )
        .map(|_| true),
        Command::Variation {
            config,
            order,
            eps,
            ladder,
            mode,
            out,
        } => cmd_variation(config, order, eps, ladder, mode, out).map(|_| true),
        Command::Recover {
            design,
            max_order,
            eps_ladder,
            truth,
            report,
            out,
        } => cmd_recover(design, max_order, eps_ladder, truth, report, out).map(|_| true),
        Command::Pipeline { config, out } => cmd_pipeline(config, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}
