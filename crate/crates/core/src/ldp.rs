//! Rate functional, its minimization by discrete-adjoint optimal control,
//! small-noise Monte Carlo (plain and Girsanov-tilted) and the vanishing
//! viscosity experiments.

use std::collections::VecDeque;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    integrate_skeleton, integrate_viscous, skeleton_rhs, solve_inviscid, Scheme, SolverConfig, TapeEntry,
};
use crate::error::{check_dim, Error, Result};
use crate::noise::{
    rkhs_dot_raw, sample_wiener_stream, stream_rng, Control, CovarianceSpec, DiffusionSpec, RkhsVector,
};
use crate::spectral::{ModelParams, ShellModel, ShellState, C64};

/// Terminal set `F` of a rate or probability problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    /// `||u(T) - center||_alpha <= radius`
    TerminalBall {
        center: ShellState,
        radius: f64,
        alpha: f64,
    },
    /// `Re u_shell(T) >= threshold` (shells are 1-based)
    TerminalCoordinate { shell: usize, threshold: f64 },
    /// Every terminal state.
    WholeSpace,
}

impl Target {
    fn validate(&self, m: usize) -> Result<()> {
        match self {
            Target::TerminalBall { center, radius, alpha } => {
                check_dim(m, center.len())?;
                if !(*radius >= 0.0 && radius.is_finite()) {
                    return Err(Error::config("target.radius", "must be finite and >= 0"));
                }
                if !(*alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::config("target.alpha", "must be finite and >= 0"));
                }
            }
            Target::TerminalCoordinate { shell, threshold } => {
                if *shell == 0 || *shell > m {
                    return Err(Error::config("target.shell", format!("must lie in 1..={m}")));
                }
                if !threshold.is_finite() {
                    return Err(Error::config("target.threshold", "must be finite"));
                }
            }
            Target::WholeSpace => {}
        }
        Ok(())
    }

    /// Signed constraint `c(u)`: `c <= 0` exactly on the target. The
    /// coordinate constraint is measured in `||.||_alpha` (`alpha` of the problem).
    pub fn constraint(&self, model: &ShellModel, u: &[C64], alpha: f64) -> f64 {
        match self {
            Target::TerminalBall { center, radius, alpha } => {
                let d: Vec<C64> = u.iter().zip(center.as_slice()).map(|(a, b)| a - b).collect();
                model.norm_alpha_raw(&d, *alpha) - radius
            }
            Target::TerminalCoordinate { shell, threshold } => {
                model.k(*shell).powf(2.0 * alpha) * (threshold - u[shell - 1].re)
            }
            Target::WholeSpace => f64::NEG_INFINITY,
        }
    }

    /// `grad c(u)` in the real inner product of `H`.
    fn constraint_grad(&self, model: &ShellModel, u: &[C64], alpha: f64) -> Vec<C64> {
        let mut g = vec![C64::new(0.0, 0.0); u.len()];
        match self {
            Target::TerminalBall { center, alpha, .. } => {
                let d: Vec<C64> = u.iter().zip(center.as_slice()).map(|(a, b)| a - b).collect();
                let norm = model.norm_alpha_raw(&d, *alpha);
                if norm > 0.0 {
                    for (i, (gi, di)) in g.iter_mut().zip(&d).enumerate() {
                        *gi = di * (model.k(i + 1).powf(4.0 * alpha) / norm);
                    }
                }
            }
            Target::TerminalCoordinate { shell, .. } => {
                g[shell - 1] = C64::new(-model.k(*shell).powf(2.0 * alpha), 0.0);
            }
            Target::WholeSpace => {}
        }
        g
    }

    pub fn hits(&self, model: &ShellModel, u: &[C64], alpha: f64) -> bool {
        self.constraint(model, u, alpha) <= 0.0
    }
}

fn default_alpha() -> f64 {
    0.25
}

fn default_cfl() -> Option<f64> {
    Some(0.1)
}

/// `inf { 1/2 int |h|_0^2 : u_h(T) in F, h in S_M }` for the skeleton started at `xi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateProblem {
    pub model: ModelParams,
    pub sigma: DiffusionSpec,
    pub covariance: CovarianceSpec,
    pub xi: ShellState,
    pub horizon: f64,
    /// RK4 steps of the skeleton solve.
    pub steps: usize,
    /// Cells of the piecewise-constant control.
    pub cells: usize,
    pub target: Target,
    /// Energy cap `M` of `S_M`.
    pub m_cap: f64,
    /// Metric exponent of the coordinate constraint, in `[0, 1/4]`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_cfl")]
    pub cfl: Option<f64>,
}

impl RateProblem {
    pub fn validate(&self) -> Result<ShellModel> {
        let model = ShellModel::new(self.model.clone())?;
        let m = model.m();
        self.covariance.validate()?;
        check_dim(m, self.covariance.len())?;
        self.sigma.validate(m)?;
        check_dim(m, self.xi.len())?;
        self.target.validate(m)?;
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config("horizon", "must be finite and > 0"));
        }
        if self.steps == 0 || self.cells == 0 {
            return Err(Error::config("steps", "steps and cells must be >= 1"));
        }
        if !(self.m_cap > 0.0) {
            return Err(Error::config("m_cap", "must be > 0"));
        }
        if !(0.0..=0.25).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1/4]"));
        }
        Ok(model)
    }

    pub fn zero_control(&self) -> Control {
        Control::zero(self.horizon, self.cells, &self.covariance).expect("validated problem")
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            cfl: self.cfl,
            alpha: self.alpha,
            ..SolverConfig::inviscid(self.horizon, self.steps)
        }
    }
}

/// `1/2 int_0^T |h|_0^2`.
pub fn cost(h: &Control) -> f64 {
    h.energy()
}

struct Forward {
    terminal: Vec<C64>,
    tape: Vec<TapeEntry>,
}

fn forward(prob: &RateProblem, model: &ShellModel, h: &Control, tape: bool) -> Result<Forward> {
    let mut entries = Vec::new();
    let terminal = integrate_skeleton(
        model,
        &prob.sigma,
        h,
        prob.xi.as_slice(),
        prob.horizon,
        prob.steps,
        prob.cfl,
        tape.then_some(&mut entries),
        |_, _, _, _| {},
    )?;
    Ok(Forward {
        terminal,
        tape: entries,
    })
}

/// `out = (D f(t, y))^T g` for `f = -B(u) + sigma(t,u) h`.
#[allow(clippy::too_many_arguments)]
fn stage_vjp(
    model: &ShellModel,
    sigma: &DiffusionSpec,
    t: f64,
    y: &[C64],
    h: &[C64],
    g: &[C64],
    out: &mut [C64],
    scratch: &mut [C64],
) {
    model.bilinear_transpose_first_into(y, g, out);
    model.bilinear_transpose_second_into(y, g, scratch);
    for (o, s) in out.iter_mut().zip(scratch.iter()) {
        *o = -(*o + s);
    }
    sigma.jacobian_transpose_add(t, y, h, g, 1.0, out);
}

/// Backpropagate `p = dJ/du(T)` through the recorded RK4 substeps; returns the
/// Euclidean derivative of `J` with respect to each control cell.
fn backward(prob: &RateProblem, model: &ShellModel, h: &Control, tape: &[TapeEntry], mut p: Vec<C64>) -> Vec<Vec<C64>> {
    let m = model.m();
    let z = C64::new(0.0, 0.0);
    let mut gh = vec![vec![z; m]; h.cells()];
    let mut ks = [vec![z; m], vec![z; m], vec![z; m], vec![z; m]];
    let mut ys = [vec![z; m], vec![z; m], vec![z; m], vec![z; m]];
    let mut lam = vec![z; m];
    let mut gk = vec![z; m];
    let mut scratch = vec![z; m];
    let nodes = [0.0, 0.5, 0.5, 1.0];
    let sigma = &prob.sigma;
    for e in tape.iter().rev() {
        let hv = h.values[e.cell].as_slice();
        let dt = e.dt;
        for s in 0..4 {
            if s == 0 {
                ys[0].copy_from_slice(&e.u);
            } else {
                for i in 0..m {
                    ys[s][i] = e.u[i] + ks[s - 1][i] * (nodes[s] * dt);
                }
            }
            let (y, k) = (&ys[s], &mut ks[s]);
            skeleton_rhs(model, sigma, e.t + nodes[s] * dt, y, hv, k);
        }
        let mut acc = p.clone();
        // weights of p in dJ/dk_s and of the later stage adjoint
        let wp = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
        let wl = [0.5 * dt, 0.5 * dt, dt];
        let mut prev_lam: Option<Vec<C64>> = None;
        for s in (0..4).rev() {
            for i in 0..m {
                gk[i] = p[i] * wp[s];
            }
            if let Some(l) = &prev_lam {
                for i in 0..m {
                    gk[i] += l[i] * wl[s];
                }
            }
            let ts = e.t + nodes[s] * dt;
            stage_vjp(model, sigma, ts, &ys[s], hv, &gk, &mut lam, &mut scratch);
            sigma.control_transpose_add(ts, &ys[s], &gk, 1.0, &mut gh[e.cell]);
            for i in 0..m {
                acc[i] += lam[i];
            }
            prev_lam = Some(lam.clone());
        }
        p = acc;
    }
    gh
}

/// Convert Euclidean cell derivatives of the terminal term into the
/// `L^2(0,T; H_0)` gradient and add the gradient `h` of the cost.
fn to_rkhs_gradient(h: &Control, euclid: Vec<Vec<C64>>, scale: f64) -> Control {
    let dtc = h.cell_width();
    let values = h
        .values
        .iter()
        .zip(euclid)
        .map(|(hv, e)| {
            RkhsVector(
                hv.0.iter()
                    .zip(e)
                    .zip(&h.q.q)
                    .map(|((a, b), q)| a * scale + b * (q / dtc))
                    .collect(),
            )
        })
        .collect();
    Control::new(h.horizon, values, &h.q).expect("same shape as h")
}

/// `J = cost(h) + w * max(0, c(u_h(T)))^2` and its gradient in the
/// `L^2(0, T; H_0)` inner product, by the discrete adjoint of the RK4 solve.
pub fn adjoint_gradient(prob: &RateProblem, h: &Control, penalty_weight: f64) -> Result<(Control, f64)> {
    let model = prob.validate()?;
    check_dim(prob.cells, h.cells())?;
    adjoint_inner(prob, &model, h, penalty_weight)
}

fn adjoint_inner(prob: &RateProblem, model: &ShellModel, h: &Control, w: f64) -> Result<(Control, f64)> {
    let fw = forward(prob, model, h, true)?;
    let c = prob.target.constraint(model, &fw.terminal, prob.alpha);
    let viol = c.max(0.0);
    let j = cost(h) + w * viol * viol;
    let mut p = prob.target.constraint_grad(model, &fw.terminal, prob.alpha);
    p.iter_mut().for_each(|z| *z *= 2.0 * w * viol);
    let euclid = if viol > 0.0 {
        backward(prob, model, h, &fw.tape, p)
    } else {
        vec![vec![C64::new(0.0, 0.0); model.m()]; h.cells()]
    };
    Ok((to_rkhs_gradient(h, euclid, 1.0), j))
}

/// `c(u_h(T))` and its `L^2(0,T;H_0)` gradient.
fn constraint_with_gradient(prob: &RateProblem, model: &ShellModel, h: &Control) -> Result<(f64, Control)> {
    let fw = forward(prob, model, h, true)?;
    let c = prob.target.constraint(model, &fw.terminal, prob.alpha);
    let p = prob.target.constraint_grad(model, &fw.terminal, prob.alpha);
    let euclid = backward(prob, model, h, &fw.tape, p);
    Ok((c, to_rkhs_gradient(h, euclid, 0.0)))
}

fn default_restarts() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub max_iterations: usize,
    pub memory: usize,
    /// Relative tolerance on the stationarity measure.
    pub grad_tol: f64,
    /// Tolerance on the terminal violation `max(0, c)`.
    pub residual_tol: f64,
    /// Size of the random initial controls of restarts after the first, as a
    /// fraction of `sqrt(M)`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            restarts: default_restarts(),
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e6,
            max_iterations: 200,
            memory: 8,
            grad_tol: 1e-7,
            residual_tol: 1e-10,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub rate_value: f64,
    pub terminal_residual: f64,
    pub gradient_norm_final: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalControlResult {
    pub h_star: Control,
    pub rate_value: f64,
    pub terminal_residual: f64,
    pub gradient_norm_final: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The energy cap was active at the returned control.
    pub saturated: bool,
    pub restarts: Vec<RestartSummary>,
}

struct Lbfgs {
    s: VecDeque<Control>,
    y: VecDeque<Control>,
    rho: VecDeque<f64>,
    memory: usize,
}

impl Lbfgs {
    fn new(memory: usize) -> Self {
        Lbfgs {
            s: VecDeque::new(),
            y: VecDeque::new(),
            rho: VecDeque::new(),
            memory: memory.max(1),
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: Control, y: Control) {
        let sy = s.inner_l2(&y);
        if sy <= 1e-300 || !sy.is_finite() {
            return;
        }
        if self.s.len() == self.memory {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        self.rho.push_back(1.0 / sy);
    }

    fn direction(&self, g: &Control) -> Control {
        let k = self.s.len();
        let mut q = g.clone();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * self.s[i].inner_l2(&q);
            q = q.axpy(-alpha[i], &self.y[i]).expect("same grid");
        }
        if k > 0 {
            let y = &self.y[k - 1];
            q = q.scaled(self.s[k - 1].inner_l2(y) / y.inner_l2(y));
        }
        for (i, a) in alpha.iter().enumerate().take(k) {
            let b = self.rho[i] * self.y[i].inner_l2(&q);
            q = q.axpy(a - b, &self.s[i]).expect("same grid");
        }
        q.scaled(-1.0)
    }
}

/// Penalized objective, mapping blow-ups to `+inf`.
fn objective(prob: &RateProblem, model: &ShellModel, h: &Control, w: f64) -> Result<Option<(Control, f64)>> {
    match adjoint_inner(prob, model, h, w) {
        Ok((g, j)) if j.is_finite() => Ok(Some((g, j))),
        Ok(_) | Err(Error::BlowUp { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// L-BFGS with Armijo backtracking on `J_w`, iterates kept in `S_M`.
fn minimize_penalized(
    prob: &RateProblem,
    model: &ShellModel,
    h0: Control,
    w: f64,
    opt: &OptimizerConfig,
) -> Result<(Control, usize)> {
    let Some((mut g, mut j)) = objective(prob, model, &h0, w)? else {
        return Err(Error::BlowUp {
            t: 0.0,
            norm: f64::INFINITY,
            limit: 0.0,
        });
    };
    let mut h = h0;
    let mut mem = Lbfgs::new(opt.memory);
    let mut iters = 0;
    while iters < opt.max_iterations {
        let gn = g.norm_l2();
        if gn <= opt.grad_tol * 1e-2 * h.norm_l2().max(1.0) {
            break;
        }
        let mut d = mem.direction(&g);
        let mut slope = g.inner_l2(&d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.scaled(-1.0);
            slope = -gn * gn;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = h.axpy(step, &d)?;
            let projected = cand.project_s_m(prob.m_cap);
            if let Some((gc, jc)) = objective(prob, model, &cand, w)? {
                if jc <= j + 1e-4 * step * slope || (projected && jc < j) {
                    accepted = Some((cand, gc, jc, projected));
                    break;
                }
            }
            step *= 0.5;
        }
        iters += 1;
        let Some((cand, gc, jc, projected)) = accepted else {
            break;
        };
        if projected {
            mem.clear();
        } else {
            mem.push(cand.axpy(-1.0, &h)?, gc.axpy(-1.0, &g)?);
        }
        let decrease = j - jc;
        h = cand;
        g = gc;
        j = jc;
        if decrease <= 1e-16 * j.abs().max(1e-300) {
            break;
        }
    }
    Ok((h, iters))
}

/// Gauss-Newton on the scalar constraint: minimum-norm corrections until the
/// terminal state lies strictly inside the target.
fn restore_feasibility(prob: &RateProblem, model: &ShellModel, mut h: Control, tol: f64) -> Result<(Control, f64)> {
    let (mut c, mut gc) = constraint_with_gradient(prob, model, &h)?;
    for _ in 0..30 {
        if c <= 0.0 {
            break;
        }
        let gg = gc.inner_l2(&gc);
        if !(gg > 0.0) {
            break;
        }
        let margin = tol.min(1e-9) * 1e-3 + 4.0 * f64::EPSILON * c.abs().max(1e-12);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = h.axpy(-step * (c + margin) / gg, &gc)?;
            match constraint_with_gradient(prob, model, &cand) {
                Ok((cn, gn)) if cn < c => {
                    h = cand;
                    c = cn;
                    gc = gn;
                    moved = true;
                    break;
                }
                Ok(_) | Err(Error::BlowUp { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !moved {
            break;
        }
    }
    Ok((h, c.max(0.0)))
}

/// Norm of the cost gradient `h` projected orthogonally to the constraint
/// gradient: first-order optimality of `min cost s.t. c = 0`.
fn stationarity(prob: &RateProblem, model: &ShellModel, h: &Control) -> Result<f64> {
    let (c, gc) = constraint_with_gradient(prob, model, h)?;
    let gg = gc.inner_l2(&gc);
    if c < -1e-8 * gg.sqrt().max(1.0) || !(gg > 0.0) {
        return Ok(h.norm_l2());
    }
    let r = h.axpy(-h.inner_l2(&gc) / gg, &gc)?;
    Ok(r.norm_l2())
}

fn random_control(prob: &RateProblem, seed: u64, restart: usize, scale: f64) -> Control {
    let mut rng = stream_rng(seed, restart as u64);
    let q = &prob.covariance;
    let values = (0..prob.cells)
        .map(|_| {
            RkhsVector(
                q.q.iter()
                    .map(|qj| {
                        let s = qj.sqrt();
                        C64::new(
                            rng.sample::<f64, _>(StandardNormal) * s,
                            rng.sample::<f64, _>(StandardNormal) * s,
                        )
                    })
                    .collect(),
            )
        })
        .collect();
    let h = Control::new(prob.horizon, values, q).expect("validated problem");
    let e = 2.0 * h.energy();
    if e > 0.0 {
        h.scaled(scale * (prob.m_cap / e).sqrt())
    } else {
        h
    }
}

fn run_restart(
    prob: &RateProblem,
    model: &ShellModel,
    opt: &OptimizerConfig,
    restart: usize,
) -> Result<(Control, RestartSummary)> {
    let mut h = if restart == 0 {
        prob.zero_control()
    } else {
        random_control(prob, opt.seed, restart, opt.init_scale)
    };
    let mut w = opt.penalty_initial;
    let mut iterations = 0;
    loop {
        let (hn, it) = minimize_penalized(prob, model, h, w, opt)?;
        h = hn;
        iterations += it;
        let fw = forward(prob, model, &h, false)?;
        let viol = prob.target.constraint(model, &fw.terminal, prob.alpha).max(0.0);
        if viol <= opt.residual_tol || w >= opt.penalty_max {
            break;
        }
        w *= opt.penalty_growth;
    }
    let (mut h, _) = restore_feasibility(prob, model, h, opt.residual_tol)?;
    h.project_s_m(prob.m_cap);
    let fw = forward(prob, model, &h, false)?;
    let residual = prob.target.constraint(model, &fw.terminal, prob.alpha).max(0.0);
    let gnorm = stationarity(prob, model, &h)?;
    let converged = residual <= opt.residual_tol && gnorm <= opt.grad_tol * h.norm_l2().max(1.0);
    let summary = RestartSummary {
        restart,
        rate_value: cost(&h),
        terminal_residual: residual,
        gradient_norm_final: gnorm,
        iterations,
        converged,
    };
    Ok((h, summary))
}

/// Minimize the rate over controls steering the skeleton into the target:
/// penalty continuation around L-BFGS, a final feasibility restoration, and
/// `opt.restarts` independent starts reduced in restart order.
pub fn minimize_rate(prob: &RateProblem, opt: &OptimizerConfig) -> Result<OptimalControlResult> {
    let model = prob.validate()?;
    let zero = prob.zero_control();
    let free = forward(prob, &model, &zero, false)?;
    if prob.target.hits(&model, &free.terminal, prob.alpha) {
        return Ok(OptimalControlResult {
            h_star: zero,
            rate_value: 0.0,
            terminal_residual: 0.0,
            gradient_norm_final: 0.0,
            iterations: 0,
            converged: true,
            saturated: false,
            restarts: Vec::new(),
        });
    }
    let runs: Vec<Result<(Control, RestartSummary)>> = (0..opt.restarts.max(1))
        .into_par_iter()
        .map(|r| run_restart(prob, &model, opt, r))
        .collect();
    let mut best: Option<(Control, RestartSummary)> = None;
    let mut summaries = Vec::new();
    for run in runs {
        let (h, s) = match run {
            Ok(x) => x,
            Err(Error::BlowUp { .. }) => continue,
            Err(e) => return Err(e),
        };
        summaries.push(s.clone());
        let feasible = s.terminal_residual <= opt.residual_tol;
        let better = match &best {
            None => true,
            Some((_, b)) => {
                let bf = b.terminal_residual <= opt.residual_tol;
                (feasible && !bf) || (feasible == bf && s.rate_value < b.rate_value)
            }
        };
        if better {
            best = Some((h, s));
        }
    }
    let Some((h, s)) = best else {
        return Err(Error::BlowUp {
            t: 0.0,
            norm: f64::INFINITY,
            limit: 0.0,
        });
    };
    let saturated = 2.0 * h.energy() >= prob.m_cap * (1.0 - 1e-12);
    if saturated {
        warn!("optimal control saturates the energy cap M = {}", prob.m_cap);
    }
    info!("rate {:.6e} after {} iterations", s.rate_value, s.iterations);
    Ok(OptimalControlResult {
        rate_value: s.rate_value,
        terminal_residual: s.terminal_residual,
        gradient_norm_final: s.gradient_norm_final,
        iterations: s.iterations,
        converged: s.converged,
        saturated,
        h_star: h,
        restarts: summaries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

fn default_scheme() -> Scheme {
    Scheme::ExponentialEm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub nu: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub hits: usize,
    /// `-nu log p_hat`; `+inf` (written as `null`) when no path hit.
    pub nu_log_p: f64,
    pub zero_hits: bool,
    /// Kish effective sample size of the weighted hits (`hits` when untilted).
    pub ess: f64,
    pub weight_degenerate: bool,
    pub blowups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub tilted: bool,
    pub estimates: Vec<McEstimate>,
}

/// Stream index of path `i` at grid position `j`.
fn mc_stream(j: usize, i: usize) -> u64 {
    ((j as u64) << 32) | i as u64
}

/// Small-noise probability of the terminal event for the uncontrolled viscous
/// equation with noise coefficient `prob.sigma`. With `tilt = Some(h)` paths
/// are driven by `h` and reweighted by the Girsanov density.
pub fn mc_probability(prob: &RateProblem, nu_grid: &[f64], mc: &McConfig, tilt: Option<&Control>) -> Result<McResult> {
    let model = prob.validate()?;
    if mc.n_paths < 100 {
        return Err(Error::config("mc.n_paths", "must be >= 100"));
    }
    let zero = prob.zero_control();
    let h = tilt.unwrap_or(&zero);
    check_dim(model.m(), h.m())?;
    let q = &prob.covariance;
    let mut estimates = Vec::with_capacity(nu_grid.len());
    for (j, &nu) in nu_grid.iter().enumerate() {
        let cfg = SolverConfig {
            nu,
            scheme: mc.scheme,
            cfl: prob.cfl,
            ..SolverConfig::inviscid(prob.horizon, prob.steps)
        };
        cfg.validate()?;
        let dt = cfg.dt();
        // per-step control values and the deterministic part of the log weight
        let hk: Vec<&[C64]> = (0..cfg.steps)
            .map(|k| h.value_at((k as f64 + 0.5) * dt).as_slice())
            .collect();
        let quad: f64 = hk.iter().map(|v| rkhs_dot_raw(v, v, &q.q)).sum::<f64>() * dt / (2.0 * nu);
        let paths: Vec<Option<(bool, f64)>> = (0..mc.n_paths)
            .into_par_iter()
            .map(|i| -> Result<Option<(bool, f64)>> {
                let noise = sample_wiener_stream(mc.seed, mc_stream(j, i), cfg.steps, dt, q)?;
                let u = match integrate_viscous(
                    &model,
                    &prob.sigma,
                    &prob.sigma,
                    h,
                    prob.xi.as_slice(),
                    &noise,
                    &cfg,
                    |_| {},
                ) {
                    Ok(u) => u,
                    Err(Error::BlowUp { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let hit = prob.target.hits(&model, &u, prob.alpha);
                let logw = if tilt.is_some() {
                    let lin: f64 = (0..cfg.steps)
                        .map(|k| rkhs_dot_raw(hk[k], noise.increment(k), &q.q))
                        .sum();
                    -lin / nu.sqrt() - quad
                } else {
                    0.0
                };
                Ok(Some((hit, logw.exp())))
            })
            .collect::<Result<_>>()?;
        estimates.push(summarize(nu, &paths, tilt.is_some()));
    }
    Ok(McResult {
        tilted: tilt.is_some(),
        estimates,
    })
}

fn summarize(nu: f64, paths: &[Option<(bool, f64)>], tilted: bool) -> McEstimate {
    let n = paths.len();
    let nf = n as f64;
    let blowups = paths.iter().filter(|p| p.is_none()).count();
    let mut hits = 0;
    let (mut s1, mut s2) = (0.0, 0.0);
    for (hit, w) in paths.iter().flatten() {
        if *hit {
            hits += 1;
            s1 += w;
            s2 += w * w;
        }
    }
    let p_hat = s1 / nf;
    let stderr = if tilted {
        ((s2 / nf - p_hat * p_hat).max(0.0) / (nf - 1.0)).sqrt()
    } else {
        (p_hat * (1.0 - p_hat) / nf).sqrt()
    };
    let ess = if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 };
    let weight_degenerate = tilted && ess < 0.01 * nf;
    if weight_degenerate {
        warn!("nu = {nu}: Girsanov weights degenerate (ESS {ess:.1} of {n})");
    }
    let zero_hits = hits == 0;
    if zero_hits && !tilted {
        warn!("nu = {nu}: no path hit the target; rate estimate is +inf");
    }
    McEstimate {
        nu,
        p_hat,
        stderr,
        n_paths: n,
        hits,
        nu_log_p: if p_hat > 0.0 { -nu * p_hat.ln() } else { f64::INFINITY },
        zero_hits,
        ess,
        weight_degenerate,
        blowups,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Square wave of frequency `base_frequency / nu`.
    Oscillatory,
    /// Independent random signs on blocks of length `nu / base_frequency`.
    RandomSignFlips,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub amplitude: f64,
    #[serde(default = "one")]
    pub base_frequency: f64,
    /// Direction of the perturbation in `H_0`; defaults to `Q^{1/2}` applied to all-ones.
    #[serde(default)]
    pub direction: Option<RkhsVector>,
}

fn one() -> f64 {
    1.0
}

impl Perturbation {
    /// `h_nu` on `cells` cells: `h + amplitude * s(t) * direction` with a
    /// sign pattern `s` whose averages over fixed intervals vanish as `nu -> 0`.
    pub fn perturb(&self, h: &Control, cells: usize, nu: f64, seed: u64) -> Result<Control> {
        let q = &h.q;
        let dir = match &self.direction {
            Some(d) => {
                check_dim(q.len(), d.len())?;
                d.clone()
            }
            None => RkhsVector(q.q.iter().map(|qj| C64::new(qj.sqrt(), 0.0)).collect()),
        };
        let width = h.horizon / cells as f64;
        let freq = self.base_frequency / nu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block_sign = 1.0;
        let mut current_block = usize::MAX;
        let values = (0..cells)
            .map(|c| {
                let t = (c as f64 + 0.5) * width;
                let s = match self.kind {
                    PerturbationKind::Oscillatory => {
                        if (2.0 * freq * t).floor() as i64 % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    PerturbationKind::RandomSignFlips => {
                        let block = (t * freq).floor() as usize;
                        if block != current_block {
                            current_block = block;
                            block_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        }
                        block_sign
                    }
                };
                let base = h.value_at(t);
                RkhsVector(
                    base.0
                        .iter()
                        .zip(&dir.0)
                        .map(|(a, d)| a + d * (self.amplitude * s))
                        .collect(),
                )
            })
            .collect();
        Control::new(h.horizon, values, q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConvergenceConfig {
    pub perturbation: Perturbation,
    pub nu_grid: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    /// Steps of both the skeleton and the viscous solves; also the cell count of `h_nu`.
    pub steps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakConvergenceRow {
    pub nu: f64,
    /// Path average of `sup_t ||u^nu_{h_nu}(t) - u^0_h(t)||_alpha`.
    pub mean_sup_error: f64,
    pub stderr: f64,
    pub paths: usize,
    pub control_energy: f64,
}

/// For each `nu`, compare the viscous equation driven by `h_nu -> h` (noise
/// coefficient `sigma_nu = sigma + sqrt(nu) sigma_bar`, control coefficient
/// the same) with the skeleton driven by `h`.
pub fn weak_convergence_experiment(
    prob: &RateProblem,
    sigma_bar: &DiffusionSpec,
    h: &Control,
    cfg: &WeakConvergenceConfig,
) -> Result<Vec<WeakConvergenceRow>> {
    let model = prob.validate()?;
    if cfg.paths == 0 || cfg.steps == 0 {
        return Err(Error::config("weak.paths", "paths and steps must be >= 1"));
    }
    let mut inv = SolverConfig::inviscid(prob.horizon, cfg.steps);
    inv.cfl = prob.cfl;
    inv.alpha = cfg.alpha;
    let reference = solve_inviscid(&model, &prob.sigma, h, &prob.xi, &inv)?;
    let q = &prob.covariance;
    let mut rows = Vec::new();
    for (j, &nu) in cfg.nu_grid.iter().enumerate() {
        let h_nu = cfg.perturbation.perturb(
            h,
            cfg.steps,
            nu,
            cfg.seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )?;
        if !h_nu.in_s_m(prob.m_cap) {
            return Err(Error::config(
                "weak.perturbation",
                format!("h_nu leaves S_M at nu = {nu}"),
            ));
        }
        let sigma_nu = crate::noise::compose_sigma_nu(&prob.sigma, sigma_bar, nu)?;
        let vcfg = SolverConfig {
            nu,
            scheme: Scheme::ExponentialEm,
            cfl: prob.cfl,
            alpha: cfg.alpha,
            ..SolverConfig::inviscid(prob.horizon, cfg.steps)
        };
        vcfg.validate()?;
        let errs: Vec<f64> = (0..cfg.paths)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let noise = sample_wiener_stream(cfg.seed, mc_stream(j, i), cfg.steps, vcfg.dt(), q)?;
                let mut sup: f64 = 0.0;
                let mut diff = vec![C64::new(0.0, 0.0); model.m()];
                integrate_viscous(
                    &model,
                    &sigma_nu,
                    &sigma_nu,
                    &h_nu,
                    prob.xi.as_slice(),
                    &noise,
                    &vcfg,
                    |s| {
                        let r = reference.states[s.k].as_slice();
                        for ((d, a), b) in diff.iter_mut().zip(s.u).zip(r) {
                            *d = a - b;
                        }
                        sup = sup.max(model.norm_alpha_raw(&diff, cfg.alpha));
                    },
                )?;
                Ok(sup)
            })
            .collect::<Result<_>>()?;
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = if errs.len() > 1 {
            errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(WeakConvergenceRow {
            nu,
            mean_sup_error: mean,
            stderr: (var / n).sqrt(),
            paths: errs.len(),
            control_energy: h_nu.energy(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSetConfig {
    pub m_cap: f64,
    pub n_controls: usize,
    pub seed: u64,
    /// `C(M)` of the ceiling `C(M)(1 + ||xi||)^2` on `sup_t ||u_h(t)||^2`.
    pub ceiling: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSetReport {
    pub m_cap: f64,
    pub n_controls: usize,
    /// `sup_h sup_t ||u_h(t)||`
    pub sup_v_norm: f64,
    /// Square root of the configured ceiling on `sup ||u||^2`.
    pub ceiling: f64,
    pub within_ceiling: bool,
    /// `max_{h,g} sup_t ||u_h(t) - u_g(t)||_alpha`
    pub diameter: f64,
    /// `max_h sup_t ||u_h - u_{mollified h}||_alpha`
    pub mollification_shift: f64,
    pub blowups: usize,
}

/// Refine cells twice, average each cell with its neighbours (ends
/// replicated) and rescale to the original energy.
pub fn mollify(h: &Control) -> Control {
    let fine = h.refined(2);
    let n = fine.cells();
    let values: Vec<RkhsVector> = (0..n)
        .map(|c| {
            let l = &fine.values[c.saturating_sub(1)];
            let r = &fine.values[(c + 1).min(n - 1)];
            let mid = &fine.values[c];
            RkhsVector(
                mid.0
                    .iter()
                    .zip(&l.0)
                    .zip(&r.0)
                    .map(|((m, a), b)| (a + m + b) / 3.0)
                    .collect(),
            )
        })
        .collect();
    let out = Control::new(h.horizon, values, &h.q).expect("same shape");
    let e = out.energy();
    if e > 0.0 {
        out.scaled((h.energy() / e).sqrt())
    } else {
        out
    }
}

/// Sample controls in `S_M`, solve the skeleton for each and report uniform
/// bounds, the diameter of the sampled level set and the effect of mollification.
pub fn level_set_probe(prob: &RateProblem, cfg: &LevelSetConfig) -> Result<LevelSetReport> {
    let model = prob.validate()?;
    if cfg.n_controls < 2 {
        return Err(Error::config("levelset.n_controls", "must be >= 2"));
    }
    if !(cfg.m_cap >= 0.0) {
        return Err(Error::config("levelset.m_cap", "must be >= 0"));
    }
    let mut solver = prob.solver();
    solver.alpha = cfg.alpha;
    let controls: Vec<Control> = (0..cfg.n_controls)
        .map(|i| {
            let h = random_control(prob, cfg.seed, i, 1.0);
            let mut rng = stream_rng(cfg.seed ^ 0x5EED, i as u64);
            let frac: f64 = rng.gen_range(0.0..=1.0);
            let e = 2.0 * h.energy();
            if e > 0.0 {
                h.scaled((frac * cfg.m_cap / e).sqrt())
            } else {
                h
            }
        })
        .collect();
    let runs: Vec<Option<(crate::dynamics::Trajectory, f64)>> = controls
        .par_iter()
        .map(|h| -> Result<Option<_>> {
            let tr = match solve_inviscid(&model, &prob.sigma, h, &prob.xi, &solver) {
                Ok(t) => t,
                Err(Error::BlowUp { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let sm = match solve_inviscid(&model, &prob.sigma, &mollify(h), &prob.xi, &solver) {
                Ok(t) => t,
                Err(Error::BlowUp { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let shift = tr.sup_distance(&sm, &model, cfg.alpha)?;
            Ok(Some((tr, shift)))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&(crate::dynamics::Trajectory, f64)> = runs.iter().flatten().collect();
    let sup_v = ok.iter().map(|(t, _)| t.monitors.sup_v_sq.sqrt()).fold(0.0, f64::max);
    let mut diameter: f64 = 0.0;
    for a in 0..ok.len() {
        for b in a + 1..ok.len() {
            diameter = diameter.max(ok[a].0.sup_distance(&ok[b].0, &model, cfg.alpha)?);
        }
    }
    let xi_v = model.v_norm(&prob.xi);
    let ceiling = (cfg.ceiling * (1.0 + xi_v).powi(2)).sqrt();
    Ok(LevelSetReport {
        m_cap: cfg.m_cap,
        n_controls: cfg.n_controls,
        sup_v_norm: sup_v,
        ceiling,
        within_ceiling: sup_v <= ceiling,
        diameter,
        mollification_shift: ok.iter().map(|(_, s)| *s).fold(0.0, f64::max),
        blowups: runs.len() - ok.len(),
    })
}
