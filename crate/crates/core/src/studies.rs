//! The experiments behind each CLI subcommand: defaults, execution and
//! rendering to CSV/JSON with provenance.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{
    standard_scenario, ControlConfig, DiffusionConfig, ExperimentConfig, IdentitiesParams, IncrementsParams,
    LevelSetParams, McLdpParams, Profile, RateParams, Resolved, SimulateParams, StateProfile, StudyConfig, WeakParams,
};
use crate::dynamics::{
    apriori_monitor, solve_inviscid, solve_viscous, time_increment_study, MonitorCeilings, Scheme, SolverConfig,
};
use crate::error::{Error, Result};
use crate::ldp::{
    level_set_probe, mc_probability, minimize_rate, weak_convergence_experiment, LevelSetConfig, McConfig,
    OptimizerConfig, Perturbation, PerturbationKind, Target, WeakConvergenceConfig,
};
use crate::noise::{sample_wiener, stream_rng, verify_conditions, Control, CovarianceSpec, RkhsVector};
use crate::spectral::{ModelParams, ShellModel, ShellState, Variant, C64};

pub const TOOL: &str = "shellmodel";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const STUDIES: [&str; 8] = [
    "simulate",
    "skeleton",
    "identities",
    "rate",
    "mc-ldp",
    "weak-convergence",
    "increments",
    "levelset",
];

pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

pub struct StudyOutput {
    pub files: Vec<OutputFile>,
    pub summary: String,
    /// Set when the study completed but its numerics did not meet their own
    /// criteria (e.g. the optimizer did not converge).
    pub numerical_failure: Option<String>,
}

/// Default configuration of `study`, or `None` for an unknown name.
pub fn default_config(study: &str) -> Option<ExperimentConfig> {
    let ceilings = MonitorCeilings {
        energy: 10.0,
        enstrophy: 10.0,
    };
    let cfg = match study {
        "simulate" => {
            let mut c = standard_scenario(StudyConfig::Simulate(SimulateParams {
                control: ControlConfig::default(),
                ceilings,
                control_energy_cap: 0.0,
            }));
            c.solver.record_every = 8;
            c
        }
        "skeleton" => {
            let mut c = standard_scenario(StudyConfig::Skeleton(SimulateParams {
                control: ControlConfig {
                    cells: 4,
                    value: Some(RkhsVector(vec![C64::new(0.2, 0.0); 8])),
                },
                ceilings,
                control_energy_cap: 1.0,
            }));
            c.solver.record_every = 8;
            c
        }
        "identities" => standard_scenario(StudyConfig::Identities(IdentitiesParams {
            samples: 1000,
            truncations: vec![8, 32, 64],
            tol: 1e-12,
            enstrophy_tol: 1e-10,
            condition_samples: 500,
            nu_grid: vec![1e-3, 1e-2, 1e-1],
        })),
        "rate" => linear_single_shell(StudyConfig::Rate(linear_rate_params())),
        "mc-ldp" => {
            let mut c = linear_single_shell(StudyConfig::McLdp(McLdpParams {
                rate: linear_rate_params(),
                nu_grid: vec![1e-1, 3e-2, 1e-2, 3e-3],
                n_paths: 2000,
                tilted: true,
            }));
            c.solver.steps = 64;
            c
        }
        "weak-convergence" => {
            let mut c = standard_scenario(StudyConfig::WeakConvergence(WeakParams {
                control: ControlConfig {
                    cells: 4,
                    value: Some(RkhsVector(vec![C64::new(0.2, 0.0); 8])),
                },
                perturbation: Perturbation {
                    kind: PerturbationKind::Oscillatory,
                    amplitude: 0.5,
                    base_frequency: 1.0,
                    direction: None,
                },
                nu_grid: vec![1e-1, 1e-2, 1e-3],
                paths: 8,
                m_cap: 50.0,
            }));
            c.solver.steps = 2048;
            c
        }
        "increments" => {
            let mut c = standard_scenario(StudyConfig::Increments(IncrementsParams {
                paths: 16,
                n_min: 3,
                n_max: 8,
                control: ControlConfig::default(),
            }));
            c.solver.steps = 2048;
            c
        }
        "levelset" => standard_scenario(StudyConfig::Levelset(LevelSetParams {
            m_cap: 1.0,
            n_controls: 6,
            cells: 8,
            ceiling: 10.0,
            alpha: 0.25,
        })),
        _ => return None,
    };
    Some(cfg)
}

/// The decoupled linear problem (`a = b = 0`, unit gains, `xi = 0`) whose
/// rate for `Re u_1(T) >= x` is `x^2 / (2 q_1 T)`.
fn linear_single_shell(study: StudyConfig) -> ExperimentConfig {
    let mut c = standard_scenario(study);
    c.model = ModelParams::new(Variant::Goy, 0.0, 0.0, 2.0, 0.5, 3).expect("valid linear model");
    c.covariance = Profile::Explicit(vec![1.0, 0.5, 0.25]);
    c.diffusion = DiffusionConfig::constant(Profile::uniform(1.0));
    c.initial = StateProfile::Explicit(ShellState::zeros(3));
    c.solver = SolverConfig::viscous(0.5, 32, 0.01);
    c
}

fn linear_rate_params() -> RateParams {
    RateParams {
        target: Target::TerminalCoordinate {
            shell: 1,
            threshold: 0.5,
        },
        cells: 8,
        m_cap: 100.0,
        alpha: 0.0,
        optimizer: OptimizerConfig::default(),
    }
}

fn control_from(cfg: &ControlConfig, horizon: f64, q: &CovarianceSpec) -> Result<Control> {
    if cfg.cells == 0 {
        return Err(Error::config("study.params.control.cells", "must be >= 1"));
    }
    match &cfg.value {
        Some(v) => {
            if v.len() != q.len() {
                return Err(Error::config(
                    "study.params.control.value",
                    format!("expected {} shells, got {}", q.len(), v.len()),
                ));
            }
            Control::constant(horizon, cfg.cells, v.clone(), q)
        }
        None => Control::zero(horizon, cfg.cells, q),
    }
}

/// `{"tool", "version", "config_sha256", "seed", "study", "result"}` as pretty JSON.
fn provenance_json<T: Serialize>(r: &Resolved, result: &T) -> Result<OutputFile> {
    let doc = json!({
        "tool": TOOL,
        "version": VERSION,
        "config_sha256": r.hash,
        "seed": r.config.seed,
        "study": r.config.study.name(),
        "result": serde_json::to_value(result)?,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(OutputFile {
        name: format!("{}.json", stem(r)),
        contents: text.into_bytes(),
    })
}

fn csv_header(r: &Resolved) -> String {
    format!("# {TOOL} {VERSION} config_sha256={}\n", r.hash)
}

fn csv_file(r: &Resolved, suffix: &str, body: String) -> OutputFile {
    OutputFile {
        name: format!("{}{suffix}.csv", stem(r)),
        contents: (csv_header(r) + &body).into_bytes(),
    }
}

fn stem(r: &Resolved) -> String {
    r.config
        .output
        .prefix
        .clone()
        .unwrap_or_else(|| r.config.study.name().to_string())
}

fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x > 0.0 {
        "inf".into()
    } else if x < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

pub fn run(r: &Resolved) -> Result<StudyOutput> {
    match &r.config.study {
        StudyConfig::Simulate(p) => simulate(r, p, false),
        StudyConfig::Skeleton(p) => simulate(r, p, true),
        StudyConfig::Identities(p) => identities(r, p),
        StudyConfig::Rate(p) => rate(r, p),
        StudyConfig::McLdp(p) => mc_ldp(r, p),
        StudyConfig::WeakConvergence(p) => weak(r, p),
        StudyConfig::Increments(p) => increments(r, p),
        StudyConfig::Levelset(p) => levelset(r, p),
    }
}

fn inviscid_solver(r: &Resolved) -> SolverConfig {
    SolverConfig {
        nu: 0.0,
        scheme: Scheme::Rk4,
        ..r.config.solver.clone()
    }
}

fn simulate(r: &Resolved, p: &SimulateParams, skeleton: bool) -> Result<StudyOutput> {
    let solver = &r.config.solver;
    let h = control_from(&p.control, solver.horizon, &r.covariance)?;
    let traj = if skeleton {
        solve_inviscid(&r.model, &r.sigma, &h, &r.xi, &inviscid_solver(r))?
    } else {
        let noise = sample_wiener(r.config.seed, solver.steps, solver.dt(), &r.covariance)?;
        let sigma_nu = crate::noise::compose_sigma_nu(&r.sigma, &r.sigma_bar, solver.nu)?;
        solve_viscous(&r.model, &sigma_nu, &sigma_nu, &h, &r.xi, &noise, solver)?
    };
    let report = apriori_monitor(&traj, &r.model, p.control_energy_cap, &p.ceilings);
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    let mut snap = Vec::new();
    traj.write_snapshot(&mut snap)?;
    let json = provenance_json(
        r,
        &json!({
            "monitor": report,
            "monitors": traj.monitors,
            "control_energy": h.energy(),
            "terminal": traj.terminal(),
            "records": traj.times.len(),
        }),
    )?;
    let summary = format!(
        "{}: {} records, sup ||u|| = {:.6e}, monitors {}",
        r.config.study.name(),
        traj.times.len(),
        traj.monitors.sup_v_sq.sqrt(),
        if report.pass {
            "within ceilings"
        } else {
            "EXCEED ceilings"
        }
    );
    Ok(StudyOutput {
        files: vec![
            csv_file(r, "", csv_header_free(csv)),
            OutputFile {
                name: format!("{}.bin", stem(r)),
                contents: snap,
            },
            json,
        ],
        summary,
        numerical_failure: None,
    })
}

fn csv_header_free(bytes: Vec<u8>) -> String {
    String::from_utf8(bytes).expect("CSV output is UTF-8")
}

fn random_state<R: Rng>(rng: &mut R, model: &ShellModel) -> ShellState {
    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
    let slope: f64 = rng.gen_range(0.0..1.5);
    ShellState::from_vec(
        (1..=model.m())
            .map(|n| {
                let s = scale * model.k(n).powf(-slope);
                C64::new(
                    rng.sample::<f64, _>(StandardNormal) * s,
                    rng.sample::<f64, _>(StandardNormal) * s,
                )
            })
            .collect(),
    )
}

#[derive(Serialize)]
struct IdentityRow {
    m: usize,
    samples: usize,
    antisymmetry: f64,
    energy: f64,
    enstrophy: Option<f64>,
    pass: bool,
}

/// Worst relative residuals of the algebraic identities over random states.
pub fn identity_residuals(params: &ModelParams, samples: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let model = ShellModel::new(params.clone())?;
    let mut rng = stream_rng(seed, params.m as u64);
    let (mut a, mut e, mut z) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let u = random_state(&mut rng, &model);
        let v = random_state(&mut rng, &model);
        let w = random_state(&mut rng, &model);
        let rep = model.identity_report(&u, &v, &w)?;
        a = a.max(rep.antisymmetry_rel());
        e = e.max(rep.energy_rel());
        z = z.max(rep.enstrophy_rel());
    }
    Ok((a, e, z))
}

/// Enstrophy flux `(B(u,u), Au)` at `u = e_1 + e_2 + i e_3`.
pub fn enstrophy_witness(params: &ModelParams) -> Result<f64> {
    let model = ShellModel::new(params.clone())?;
    let mut u = ShellState::zeros(model.m());
    u.set(1, C64::new(1.0, 0.0));
    u.set(2, C64::new(1.0, 0.0));
    u.set(3, C64::new(0.0, 1.0));
    let b = model.bilinear(&u, &u)?;
    let au = model.apply_fractional_a(&u, 1.0)?;
    model.inner_h(&b, &au)
}

fn identities(r: &Resolved, p: &IdentitiesParams) -> Result<StudyOutput> {
    if p.samples == 0 || p.truncations.is_empty() {
        return Err(Error::config(
            "study.params.samples",
            "need samples >= 1 and at least one truncation",
        ));
    }
    let exact = r.config.model.enstrophy_exact();
    let mut rows = Vec::new();
    for &m in &p.truncations {
        let params = ModelParams {
            m,
            ..r.config.model.clone()
        };
        let (a, e, z) = identity_residuals(&params, p.samples, r.config.seed)?;
        let enstrophy = exact.then_some(z);
        let pass = a <= p.tol && e <= p.tol && enstrophy.is_none_or(|z| z <= p.enstrophy_tol);
        rows.push(IdentityRow {
            m,
            samples: p.samples,
            antisymmetry: a,
            energy: e,
            enstrophy,
            pass,
        });
    }
    let witness_params = ModelParams {
        b: 0.0,
        ..r.config.model.clone()
    };
    let witness = enstrophy_witness(&witness_params)?;
    let conditions = if p.condition_samples > 0 {
        Some(verify_conditions(
            &crate::noise::compose_sigma_nu(&r.sigma, &r.sigma_bar, p.nu_grid.iter().cloned().fold(0.0, f64::max))?,
            &r.model,
            &r.covariance,
            r.config.solver.horizon,
            p.condition_samples,
            &p.nu_grid,
            r.config.seed,
        )?)
    } else {
        None
    };
    let mut body = String::from("m,samples,antisymmetry,energy,enstrophy,pass\n");
    for row in &rows {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{}",
            row.m,
            row.samples,
            fmt_f(row.antisymmetry),
            fmt_f(row.energy),
            row.enstrophy.map_or("".into(), fmt_f),
            row.pass
        );
    }
    let all = rows.iter().all(|r| r.pass);
    let cond_pass = conditions.as_ref().is_none_or(|c| c.pass);
    let json = provenance_json(
        r,
        &json!({
            "rows": rows,
            "enstrophy_exact": exact,
            "witness_b0_enstrophy": witness,
            "conditions": conditions,
        }),
    )?;
    let summary = format!(
        "identities: {} truncations, residuals {}, diffusion conditions {}",
        rows.len(),
        if all { "pass" } else { "FAIL" },
        if cond_pass { "pass" } else { "FAIL" }
    );
    Ok(StudyOutput {
        files: vec![csv_file(r, "", body), json],
        summary,
        numerical_failure: (!all || !cond_pass).then(|| "identity or condition check failed".to_string()),
    })
}

fn rate(r: &Resolved, p: &RateParams) -> Result<StudyOutput> {
    let prob = r.rate_problem(p);
    let mut opt = p.optimizer.clone();
    opt.seed = r.config.seed;
    let res = minimize_rate(&prob, &opt)?;
    let mut body = String::from("rate_value,terminal_residual,gradient_norm_final,iterations,converged,saturated\n");
    let _ = writeln!(
        body,
        "{},{},{},{},{},{}",
        fmt_f(res.rate_value),
        fmt_f(res.terminal_residual),
        fmt_f(res.gradient_norm_final),
        res.iterations,
        res.converged,
        res.saturated
    );
    let summary = format!(
        "rate: I = {:.10e} (residual {:.1e}, {} iterations, converged {})",
        res.rate_value, res.terminal_residual, res.iterations, res.converged
    );
    let failure = (!res.converged).then(|| "rate minimization did not converge".to_string());
    Ok(StudyOutput {
        files: vec![csv_file(r, "", body), provenance_json(r, &res)?],
        summary,
        numerical_failure: failure,
    })
}

fn mc_ldp(r: &Resolved, p: &McLdpParams) -> Result<StudyOutput> {
    let prob = r.rate_problem(&p.rate);
    let mut opt = p.rate.optimizer.clone();
    opt.seed = r.config.seed;
    let opt_res = minimize_rate(&prob, &opt)?;
    let mc = McConfig {
        n_paths: p.n_paths,
        seed: r.config.seed,
        scheme: r.config.solver.scheme,
    };
    let tilt = p.tilted.then_some(&opt_res.h_star);
    let res = mc_probability(&prob, &p.nu_grid, &mc, tilt)?;
    let mut body = String::from("nu,p_hat,stderr,n_paths,nu_log_p,rate_upper_bound\n");
    for e in &res.estimates {
        let _ = writeln!(
            body,
            "{},{},{},{},{},{}",
            e.nu,
            fmt_f(e.p_hat),
            fmt_f(e.stderr),
            e.n_paths,
            fmt_f(e.nu_log_p),
            fmt_f(opt_res.rate_value)
        );
    }
    let last = res.estimates.last();
    let summary = format!(
        "mc-ldp: {} viscosities, -nu log P at smallest nu = {}, rate bound {:.6e}",
        res.estimates.len(),
        last.map_or("n/a".into(), |e| fmt_f(e.nu_log_p)),
        opt_res.rate_value
    );
    let json = provenance_json(
        r,
        &json!({
            "mc": res,
            "rate_upper_bound": opt_res.rate_value,
            "optimizer_converged": opt_res.converged,
            "h_star": opt_res.h_star,
        }),
    )?;
    Ok(StudyOutput {
        files: vec![csv_file(r, "", body), json],
        summary,
        numerical_failure: None,
    })
}

fn weak(r: &Resolved, p: &WeakParams) -> Result<StudyOutput> {
    let solver = &r.config.solver;
    let h = control_from(&p.control, solver.horizon, &r.covariance)?;
    let rate = RateParams {
        target: Target::WholeSpace,
        cells: p.control.cells,
        m_cap: p.m_cap,
        alpha: solver.alpha.min(0.25),
        optimizer: OptimizerConfig::default(),
    };
    let prob = r.rate_problem(&rate);
    let cfg = WeakConvergenceConfig {
        perturbation: p.perturbation.clone(),
        nu_grid: p.nu_grid.clone(),
        paths: p.paths,
        seed: r.config.seed,
        steps: solver.steps,
        alpha: solver.alpha,
    };
    let rows = weak_convergence_experiment(&prob, &r.sigma_bar, &h, &cfg)?;
    let mut body = String::from("nu,mean_sup_error,stderr,paths\n");
    for row in &rows {
        let _ = writeln!(
            body,
            "{},{},{},{}",
            row.nu,
            fmt_f(row.mean_sup_error),
            fmt_f(row.stderr),
            row.paths
        );
    }
    let summary = format!(
        "weak-convergence: {}",
        rows.iter()
            .map(|r| format!("nu={} err={:.3e}", r.nu, r.mean_sup_error))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(StudyOutput {
        files: vec![csv_file(r, "", body), provenance_json(r, &rows)?],
        summary,
        numerical_failure: None,
    })
}

fn increments(r: &Resolved, p: &IncrementsParams) -> Result<StudyOutput> {
    let base = &r.config.solver;
    let h = control_from(&p.control, base.horizon, &r.covariance)?;
    let inviscid = base.nu == 0.0;
    let solver = if inviscid {
        SolverConfig {
            record_every: 1,
            ..inviscid_solver(r)
        }
    } else {
        SolverConfig {
            record_every: 1,
            ..base.clone()
        }
    };
    if p.n_min < 2 || p.n_max < p.n_min || (1usize << p.n_max) > solver.steps {
        return Err(Error::config(
            "study.params.n_max",
            "need 2 <= n_min <= n_max <= log2(steps)",
        ));
    }
    let paths = if inviscid { 1 } else { p.paths.max(1) };
    let sigma_nu = crate::noise::compose_sigma_nu(&r.sigma, &r.sigma_bar, solver.nu)?;
    let stats = time_increment_study(
        &r.model,
        paths,
        |i| {
            if inviscid {
                solve_inviscid(&r.model, &r.sigma, &h, &r.xi, &solver)
            } else {
                let noise = crate::noise::sample_wiener_stream(
                    r.config.seed,
                    i as u64,
                    solver.steps,
                    solver.dt(),
                    &r.covariance,
                )?;
                solve_viscous(&r.model, &sigma_nu, &sigma_nu, &h, &r.xi, &noise, &solver)
            }
        },
        p.n_min..=p.n_max,
        solver.monitor_n,
    )?;
    let mut body = String::from("n,i_n\n");
    for (n, v) in stats.n_range.iter().zip(&stats.values) {
        let _ = writeln!(body, "{n},{}", fmt_f(*v));
    }
    let summary = format!(
        "increments: decay rate {:.4} over n = {}..={} ({} paths kept, {} discarded)",
        stats.fitted_slope, p.n_min, p.n_max, stats.kept, stats.discarded
    );
    Ok(StudyOutput {
        files: vec![csv_file(r, "", body), provenance_json(r, &stats)?],
        summary,
        numerical_failure: None,
    })
}

fn levelset(r: &Resolved, p: &LevelSetParams) -> Result<StudyOutput> {
    let rate = RateParams {
        target: Target::WholeSpace,
        cells: p.cells,
        m_cap: p.m_cap.max(f64::MIN_POSITIVE),
        alpha: p.alpha.min(0.25),
        optimizer: OptimizerConfig::default(),
    };
    let prob = r.rate_problem(&rate);
    let rep = level_set_probe(
        &prob,
        &LevelSetConfig {
            m_cap: p.m_cap,
            n_controls: p.n_controls,
            seed: r.config.seed,
            ceiling: p.ceiling,
            alpha: p.alpha,
        },
    )?;
    let mut body = String::from("m_cap,n_controls,sup_v_norm,ceiling,diameter,mollification_shift\n");
    let _ = writeln!(
        body,
        "{},{},{},{},{},{}",
        rep.m_cap,
        rep.n_controls,
        fmt_f(rep.sup_v_norm),
        fmt_f(rep.ceiling),
        fmt_f(rep.diameter),
        fmt_f(rep.mollification_shift)
    );
    let summary = format!(
        "levelset: sup ||u|| = {:.6e} (ceiling {:.3e}), diameter {:.3e}",
        rep.sup_v_norm, rep.ceiling, rep.diameter
    );
    Ok(StudyOutput {
        files: vec![csv_file(r, "", body), provenance_json(r, &rep)?],
        summary,
        numerical_failure: None,
    })
}

/// JSON form of `default_config(study)`.
pub fn default_value(study: &str) -> Option<Value> {
    default_config(study).map(|c| serde_json::to_value(c).expect("configs serialize"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve;

    #[test]
    fn every_default_resolves() {
        for s in STUDIES {
            let v = default_value(s).unwrap();
            let r = resolve(v).unwrap_or_else(|e| panic!("{s}: {e}"));
            assert_eq!(r.config.study.name(), s);
        }
        assert!(default_config("nope").is_none());
    }

    #[test]
    fn witness_is_nonzero_without_enstrophy_condition() {
        let p = ModelParams::new(Variant::Goy, 1.0, 0.0, 2.0, 1.0, 3).unwrap();
        assert!((enstrophy_witness(&p).unwrap() - 240.0).abs() < 1e-12);
    }
}
