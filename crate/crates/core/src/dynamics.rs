//! Time integration of the controlled skeleton ODE and the viscous controlled
//! SPDE at truncation `m`, a priori monitors and time-increment studies.

use std::io::{Read, Write};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::noise::{Control, DiffusionSpec, NoisePath};
use crate::spectral::{dot, ShellModel, ShellState, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Classical Runge-Kutta, deterministic (`nu = 0`) only.
    Rk4,
    /// Euler-Maruyama with `(I + nu A dt)^{-1}` on the viscous term.
    SemiImplicitEm,
    /// Euler-Maruyama with the exact factor `exp(-nu k_n^2 dt)`.
    ExponentialEm,
}

fn default_scheme() -> Scheme {
    Scheme::Rk4
}

fn default_record_every() -> usize {
    1
}

fn default_cfl() -> Option<f64> {
    Some(0.1)
}

fn default_alpha() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Threshold `N` of the gate `sup ||u||^2 v int |Au|^2 <= N`; `None` keeps every path.
    #[serde(default)]
    pub monitor_n: Option<f64>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Constant `c` of the step guard `dt <= c / (k_m max|u_n|)`; `None` disables it.
    #[serde(default = "default_cfl")]
    pub cfl: Option<f64>,
    /// Exponent of the extra `||.||_alpha` channel.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl SolverConfig {
    pub fn inviscid(horizon: f64, steps: usize) -> Self {
        SolverConfig {
            horizon,
            steps,
            nu: 0.0,
            scheme: Scheme::Rk4,
            monitor_n: None,
            record_every: 1,
            cfl: default_cfl(),
            alpha: default_alpha(),
        }
    }

    pub fn viscous(horizon: f64, steps: usize, nu: f64) -> Self {
        SolverConfig {
            nu,
            scheme: Scheme::ExponentialEm,
            ..Self::inviscid(horizon, steps)
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config("solver.horizon", "must be finite and > 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("solver.steps", "must be >= 1"));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(Error::config("solver.nu", "must be finite and >= 0"));
        }
        match (self.scheme, self.nu > 0.0) {
            (Scheme::Rk4, true) => return Err(Error::config("solver.scheme", "rk4 requires nu = 0")),
            (Scheme::SemiImplicitEm | Scheme::ExponentialEm, false) => {
                return Err(Error::config("solver.scheme", "stochastic schemes require nu > 0"))
            }
            _ => {}
        }
        if self.record_every == 0 {
            return Err(Error::config("solver.record_every", "must be >= 1"));
        }
        if let Some(c) = self.cfl {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("solver.cfl", "must be > 0"));
            }
        }
        if let Some(n) = self.monitor_n {
            if !(n > 0.0) {
                return Err(Error::config("solver.monitor_n", "must be > 0"));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("solver.alpha", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Norms recorded with each stored state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Channels {
    pub h_norm: f64,
    pub v_norm: f64,
    pub calh_norm: f64,
    pub alpha_norm: f64,
    pub a_norm: f64,
    /// `|u(t)|^2 - |xi|^2` minus the energy supplied up to `t`.
    pub energy_residual: f64,
}

/// Sups and time integrals over every step (integrals not weighted by `nu`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitors {
    pub sup_h4: f64,
    pub sup_v_sq: f64,
    pub int_v_sq: f64,
    pub int_calh4: f64,
    pub int_a_sq: f64,
}

impl Monitors {
    fn observe(&mut self, model: &ShellModel, u: &[C64], dt: Option<f64>) {
        let h = model.weighted_sq(u, 0);
        let v = model.weighted_sq(u, 2);
        self.sup_h4 = self.sup_h4.max(h * h);
        self.sup_v_sq = self.sup_v_sq.max(v);
        if let Some(dt) = dt {
            let c = model.weighted_sq(u, 1);
            self.int_v_sq += v * dt;
            self.int_calh4 += c * c * dt;
            self.int_a_sq += model.weighted_sq(u, 4) * dt;
        }
    }

    /// Whether the path lies in the gate `G_N`.
    pub fn within(&self, n: f64) -> bool {
        self.sup_v_sq.max(self.int_a_sq) <= n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ShellState>,
    pub channels: Vec<Channels>,
    pub monitors: Monitors,
    pub nu: f64,
}

impl Trajectory {
    pub fn initial(&self) -> &ShellState {
        &self.states[0]
    }

    pub fn terminal(&self) -> &ShellState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// `sup_t ||u(t) - w(t)||_alpha` over common recorded times.
    pub fn sup_distance(&self, other: &Trajectory, model: &ShellModel, alpha: f64) -> Result<f64> {
        check_dim(self.states.len(), other.states.len())?;
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| model.norm_alpha_raw(a.sub(b).as_slice(), alpha))
            .fold(0.0, f64::max))
    }

    /// CSV with columns `t,h_norm,v_norm,calh_norm,alpha_norm,a_norm,energy_residual`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,h_norm,v_norm,calh_norm,alpha_norm,a_norm,energy_residual")?;
        for (t, c) in self.times.iter().zip(&self.channels) {
            writeln!(
                w,
                "{t},{},{},{},{},{},{}",
                c.h_norm, c.v_norm, c.calh_norm, c.alpha_norm, c.a_norm, c.energy_residual
            )?;
        }
        Ok(())
    }

    /// Binary snapshot: `b"SHLT"`, `u32` version, `u32` marker `0x01020304`,
    /// `u64` m, `u64` count, then per record `t` and `m` (re, im) pairs; all
    /// little-endian `f64`/integers.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.states.first().map_or(0, ShellState::len);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&ENDIAN_MARKER.to_le_bytes())?;
        w.write_all(&(m as u64).to_le_bytes())?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        for (t, u) in self.times.iter().zip(&self.states) {
            w.write_all(&t.to_le_bytes())?;
            for z in u.as_slice() {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"SHLT";
const SNAPSHOT_VERSION: u32 = 1;
const ENDIAN_MARKER: u32 = 0x0102_0304;

/// Read a snapshot written by [`Trajectory::write_snapshot`]: `(times, states)`.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<(Vec<f64>, Vec<ShellState>)> {
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if &b4 != SNAPSHOT_MAGIC {
        return Err(Error::domain("not a trajectory snapshot"));
    }
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != SNAPSHOT_VERSION {
        return Err(Error::domain("unsupported snapshot version"));
    }
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != ENDIAN_MARKER {
        return Err(Error::domain("snapshot endianness marker mismatch"));
    }
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let m = next_u64(&mut r)? as usize;
    let count = next_u64(&mut r)? as usize;
    let mut f = || -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let mut times = Vec::with_capacity(count);
    let mut states = Vec::with_capacity(count);
    for _ in 0..count {
        times.push(f()?);
        let mut u = Vec::with_capacity(m);
        for _ in 0..m {
            let re = f()?;
            u.push(C64::new(re, f()?));
        }
        states.push(ShellState::from_vec(u));
    }
    Ok((times, states))
}

fn blowup_limit(xi: &[C64]) -> f64 {
    1e6 * (1.0 + dot(xi, xi).sqrt())
}

fn check_blowup(t: f64, u: &[C64], limit: f64) -> Result<()> {
    let norm = dot(u, u).sqrt();
    if norm.is_finite() && norm <= limit {
        Ok(())
    } else {
        Err(Error::BlowUp { t, norm, limit })
    }
}

fn max_abs(u: &[C64]) -> f64 {
    u.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Number of equal substeps of a step of length `dt` that satisfies the guard.
fn substeps(model: &ShellModel, u: &[C64], dt: f64, cfl: Option<f64>) -> usize {
    let (Some(c), false) = (cfl, model.is_linear()) else {
        return 1;
    };
    let rate = model.k(model.m()) * max_abs(u);
    let n = (dt * rate / c).ceil();
    if n.is_finite() && n >= 1.0 {
        n.min(1e7) as usize
    } else {
        1
    }
}

/// One RK4 substep recorded for the discrete adjoint.
#[derive(Clone, Debug)]
pub(crate) struct TapeEntry {
    pub t: f64,
    pub dt: f64,
    pub cell: usize,
    pub u: Vec<C64>,
}

/// Right-hand side of the skeleton ODE `-B(u) + sigma(t,u) h`.
pub(crate) fn skeleton_rhs(model: &ShellModel, sigma: &DiffusionSpec, t: f64, u: &[C64], h: &[C64], out: &mut [C64]) {
    model.bilinear_into(u, u, out);
    out.iter_mut().for_each(|z| *z = -*z);
    sigma.apply_add(t, u, h, 1.0, out);
}

struct Rk4Buffers {
    k: [Vec<C64>; 4],
    y: Vec<C64>,
    sh: Vec<C64>,
}

impl Rk4Buffers {
    fn new(m: usize) -> Self {
        let z = vec![C64::new(0.0, 0.0); m];
        Rk4Buffers {
            k: [z.clone(), z.clone(), z.clone(), z.clone()],
            y: z.clone(),
            sh: z,
        }
    }
}

/// Advance `u` by one RK4 step; returns the increment of the supplied energy
/// `2 int (sigma h, u)`, integrated with the same stages.
fn rk4_step(
    model: &ShellModel,
    sigma: &DiffusionSpec,
    t: f64,
    dt: f64,
    h: &[C64],
    u: &mut [C64],
    buf: &mut Rk4Buffers,
) -> f64 {
    let nodes = [0.0, 0.5, 0.5, 1.0];
    let mut power = [0.0; 4];
    for s in 0..4 {
        if s == 0 {
            buf.y.copy_from_slice(u);
        } else {
            let (prev, _) = buf.k.split_at(s);
            let kp = &prev[s - 1];
            for ((y, x), k) in buf.y.iter_mut().zip(u.iter()).zip(kp) {
                *y = x + k * (dt * nodes[s]);
            }
        }
        let ts = t + nodes[s] * dt;
        skeleton_rhs(model, sigma, ts, &buf.y, h, &mut buf.k[s]);
        buf.sh.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        sigma.apply_add(ts, &buf.y, h, 1.0, &mut buf.sh);
        power[s] = 2.0 * dot(&buf.sh, &buf.y);
    }
    for (i, x) in u.iter_mut().enumerate() {
        *x += (buf.k[0][i] + buf.k[1][i] * 2.0 + buf.k[2][i] * 2.0 + buf.k[3][i]) * (dt / 6.0);
    }
    dt / 6.0 * (power[0] + 2.0 * power[1] + 2.0 * power[2] + power[3])
}

/// Integrate the skeleton on `[0, horizon]` with `steps` nominal steps,
/// calling `visit(step, t, u, supplied_energy)` at every nominal step
/// (including 0). Substeps are recorded on `tape` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate_skeleton(
    model: &ShellModel,
    sigma: &DiffusionSpec,
    h: &Control,
    xi: &[C64],
    horizon: f64,
    steps: usize,
    cfl: Option<f64>,
    mut tape: Option<&mut Vec<TapeEntry>>,
    mut visit: impl FnMut(usize, f64, &[C64], f64),
) -> Result<Vec<C64>> {
    let m = model.m();
    check_dim(m, xi.len())?;
    check_dim(m, h.m())?;
    let limit = blowup_limit(xi);
    let dt = horizon / steps as f64;
    let mut u = xi.to_vec();
    let mut supplied = 0.0;
    let mut buf = Rk4Buffers::new(m);
    visit(0, 0.0, &u, 0.0);
    for k in 0..steps {
        let t0 = k as f64 * dt;
        let n = substeps(model, &u, dt, cfl);
        let ds = dt / n as f64;
        for j in 0..n {
            let t = t0 + j as f64 * ds;
            let cell = h.cell_at(t + 0.5 * ds);
            if let Some(tape) = tape.as_deref_mut() {
                tape.push(TapeEntry {
                    t,
                    dt: ds,
                    cell,
                    u: u.clone(),
                });
            }
            supplied += rk4_step(model, sigma, t, ds, h.values[cell].as_slice(), &mut u, &mut buf);
        }
        let t1 = (k + 1) as f64 * dt;
        check_blowup(t1, &u, limit)?;
        visit(k + 1, t1, &u, supplied);
    }
    Ok(u)
}

fn channels(model: &ShellModel, u: &[C64], alpha: f64, residual: f64) -> Channels {
    Channels {
        h_norm: model.weighted_sq(u, 0).sqrt(),
        v_norm: model.weighted_sq(u, 2).sqrt(),
        calh_norm: model.weighted_sq(u, 1).sqrt(),
        alpha_norm: model.norm_alpha_raw(u, alpha),
        a_norm: model.weighted_sq(u, 4).sqrt(),
        energy_residual: residual,
    }
}

struct Recorder<'a> {
    model: &'a ShellModel,
    cfg: &'a SolverConfig,
    xi_sq: f64,
    traj: Trajectory,
}

impl<'a> Recorder<'a> {
    fn new(model: &'a ShellModel, cfg: &'a SolverConfig, xi: &[C64]) -> Self {
        let cap = cfg.steps / cfg.record_every + 2;
        Recorder {
            model,
            cfg,
            xi_sq: dot(xi, xi),
            traj: Trajectory {
                times: Vec::with_capacity(cap),
                states: Vec::with_capacity(cap),
                channels: Vec::with_capacity(cap),
                monitors: Monitors::default(),
                nu: cfg.nu,
            },
        }
    }

    fn visit(&mut self, k: usize, t: f64, u: &[C64], supplied: f64) {
        let dt = (k < self.cfg.steps).then(|| self.cfg.dt());
        self.traj.monitors.observe(self.model, u, dt);
        if k.is_multiple_of(self.cfg.record_every) || k == self.cfg.steps {
            let residual = dot(u, u) - self.xi_sq - supplied;
            self.traj.times.push(t);
            self.traj.states.push(ShellState::from_vec(u.to_vec()));
            self.traj
                .channels
                .push(channels(self.model, u, self.cfg.alpha, residual));
        }
    }
}

/// RK4 solution of `du/dt = -B(u) + sigma(t,u) h(t)`, `u(0) = xi`.
pub fn solve_inviscid(
    model: &ShellModel,
    sigma: &DiffusionSpec,
    h: &Control,
    xi: &ShellState,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if cfg.nu != 0.0 || cfg.scheme != Scheme::Rk4 {
        return Err(Error::config(
            "solver.scheme",
            "the skeleton equation uses rk4 with nu = 0",
        ));
    }
    sigma.validate(model.m())?;
    if !model.params().enstrophy_exact() {
        warn!(
            "a(1+mu^2)+b mu^2 = {:.3e} != 0: enstrophy is not conserved by B",
            model.params().enstrophy_defect()
        );
    }
    let mut rec = Recorder::new(model, cfg, xi.as_slice());
    integrate_skeleton(
        model,
        sigma,
        h,
        xi.as_slice(),
        cfg.horizon,
        cfg.steps,
        cfg.cfl,
        None,
        |k, t, u, e| rec.visit(k, t, u, e),
    )?;
    Ok(rec.traj)
}

/// Per-step state handed to the observer of [`integrate_viscous`].
pub(crate) struct ViscousStep<'a> {
    pub k: usize,
    pub t: f64,
    pub u: &'a [C64],
    pub supplied: f64,
}

/// One Euler-Maruyama path; `observe` sees every step including 0.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate_viscous(
    model: &ShellModel,
    sigma_nu: &DiffusionSpec,
    sigma_tilde: &DiffusionSpec,
    h: &Control,
    xi: &[C64],
    noise: &NoisePath,
    cfg: &SolverConfig,
    mut observe: impl FnMut(ViscousStep<'_>),
) -> Result<Vec<C64>> {
    let m = model.m();
    check_dim(m, xi.len())?;
    check_dim(m, h.m())?;
    check_dim(m, noise.m)?;
    check_dim(cfg.steps, noise.steps)?;
    let dt = cfg.dt();
    if !(dt > 0.0) {
        return Err(Error::domain(format!("dt must be > 0, got {dt}")));
    }
    if ((noise.dt - dt) / dt).abs() > 1e-12 {
        return Err(Error::domain(format!(
            "noise dt {} does not match solver dt {dt}",
            noise.dt
        )));
    }
    let nu = cfg.nu;
    let sqrt_nu = nu.sqrt();
    let damp: Vec<f64> = (1..=m)
        .map(|n| {
            let lam = nu * model.k(n).powi(2) * dt;
            match cfg.scheme {
                Scheme::ExponentialEm => (-lam).exp(),
                Scheme::SemiImplicitEm => 1.0 / (1.0 + lam),
                Scheme::Rk4 => 1.0,
            }
        })
        .collect();
    let limit = blowup_limit(xi);
    let linear = model.is_linear();
    let mut u = xi.to_vec();
    let mut next = vec![C64::new(0.0, 0.0); m];
    let mut b = vec![C64::new(0.0, 0.0); m];
    let mut noise_term = vec![C64::new(0.0, 0.0); m];
    let mut sh = vec![C64::new(0.0, 0.0); m];
    let mut supplied = 0.0;
    observe(ViscousStep {
        k: 0,
        t: 0.0,
        u: &u,
        supplied,
    });
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let cell = h.cell_at(t + 0.5 * dt);
        // transport by -B over dt, explicit Euler substeps under the guard
        next.copy_from_slice(&u);
        if !linear {
            let n = substeps(model, &u, dt, cfg.cfl);
            let ds = dt / n as f64;
            for _ in 0..n {
                model.bilinear_into(&next, &next, &mut b);
                for (x, bz) in next.iter_mut().zip(&b) {
                    *x -= bz * ds;
                }
            }
        }
        sigma_tilde.apply_add(t, &u, h.values[cell].as_slice(), dt, &mut next);
        noise_term.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        sigma_nu.apply_add(t, &u, noise.increment(k), sqrt_nu, &mut noise_term);
        // discrete energy input: control power, dissipation, noise and its square
        sh.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        sigma_tilde.apply_add(t, &u, h.values[cell].as_slice(), 1.0, &mut sh);
        supplied += 2.0 * dot(&sh, &u) * dt - 2.0 * nu * model.weighted_sq(&u, 2) * dt
            + 2.0 * dot(&noise_term, &u)
            + dot(&noise_term, &noise_term);
        for ((x, w), d) in next.iter_mut().zip(&noise_term).zip(&damp) {
            *x = (*x + w) * d;
        }
        std::mem::swap(&mut u, &mut next);
        check_blowup(t + dt, &u, limit)?;
        observe(ViscousStep {
            k: k + 1,
            t: (k + 1) as f64 * dt,
            u: &u,
            supplied,
        });
    }
    Ok(u)
}

/// One path of `du = [-nu A u - B(u) + sigma_tilde h] dt + sqrt(nu) sigma_nu dW`.
#[allow(clippy::too_many_arguments)]
pub fn solve_viscous(
    model: &ShellModel,
    sigma_nu: &DiffusionSpec,
    sigma_tilde: &DiffusionSpec,
    h: &Control,
    xi: &ShellState,
    noise: &NoisePath,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if cfg.scheme == Scheme::Rk4 {
        return Err(Error::config(
            "solver.scheme",
            "viscous runs need an Euler-Maruyama scheme",
        ));
    }
    sigma_nu.validate(model.m())?;
    sigma_tilde.validate(model.m())?;
    let mut rec = Recorder::new(model, cfg, xi.as_slice());
    integrate_viscous(model, sigma_nu, sigma_tilde, h, xi.as_slice(), noise, cfg, |s| {
        rec.visit(s.k, s.t, s.u, s.supplied)
    })?;
    Ok(rec.traj)
}

/// Constants `C(M)` of the a priori ceilings `C(M)(1+|xi|^4)` and `C(M)(1+||xi||)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorCeilings {
    pub energy: f64,
    pub enstrophy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub quantity: String,
    pub value: f64,
    pub ceiling: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub control_energy_cap: f64,
    pub rows: Vec<MonitorRow>,
    pub pass: bool,
}

/// Compare a trajectory's sups and integrals with the configured ceilings.
pub fn apriori_monitor(traj: &Trajectory, model: &ShellModel, m_cap: f64, ceilings: &MonitorCeilings) -> MonitorReport {
    let xi = traj.initial().as_slice();
    let xi_h = model.weighted_sq(xi, 0).sqrt();
    let xi_v = model.weighted_sq(xi, 2).sqrt();
    let c_h = ceilings.energy * (1.0 + xi_h.powi(4));
    let c_v = ceilings.enstrophy * (1.0 + xi_v).powi(2);
    let mon = &traj.monitors;
    let nu = traj.nu;
    let rows: Vec<MonitorRow> = [
        ("sup |u|^4", mon.sup_h4, c_h),
        ("nu int ||u||^2", nu * mon.int_v_sq, c_h),
        ("nu int ||u||_H^4", nu * mon.int_calh4, c_h),
        ("sup ||u||^2", mon.sup_v_sq, c_v),
        ("nu int |Au|^2", nu * mon.int_a_sq, c_v),
    ]
    .into_iter()
    .map(|(q, value, ceiling)| MonitorRow {
        quantity: q.to_string(),
        value,
        ceiling,
        pass: value <= ceiling,
    })
    .collect();
    let pass = rows.iter().all(|r| r.pass);
    MonitorReport {
        control_energy_cap: m_cap,
        rows,
        pass,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementStats {
    pub n_range: Vec<u32>,
    /// Gated path average of `I_n` for each `n`.
    pub values: Vec<f64>,
    /// Decay rate: minus the least-squares slope of `log2 I_n` against `n`.
    pub fitted_slope: f64,
    pub kept: usize,
    pub discarded: usize,
}

/// `I_n = int_0^T ||u(s) - u(s_n(s))||^2 ds` where `s_n(s)` is the right end of
/// the dyadic cell of width `T 2^-n` containing `s`, from states on a uniform grid.
pub fn increment_integrals(model: &ShellModel, states: &[ShellState], horizon: f64, n: u32) -> Result<f64> {
    let steps = states.len().saturating_sub(1);
    let width = 1usize << n;
    if steps == 0 || !steps.is_multiple_of(width) {
        return Err(Error::domain(format!(
            "{steps} steps cannot be split into 2^{n} dyadic cells"
        )));
    }
    let per = steps / width;
    let dt = horizon / steps as f64;
    let mut acc = 0.0;
    for k in 0..steps {
        let right = (k / per + 1) * per;
        acc += model.weighted_sq(states[k].sub(&states[right]).as_slice(), 2) * dt;
    }
    Ok(acc)
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Average `I_n` over `paths` trajectories produced by `solve(index)`, keeping
/// only paths inside the gate `G_N` (and discarding blow-ups), then fit the
/// dyadic decay rate. Trajectories must be recorded at every step.
pub fn time_increment_study<F>(
    model: &ShellModel,
    paths: usize,
    solve: F,
    n_range: std::ops::RangeInclusive<u32>,
    monitor_n: Option<f64>,
) -> Result<IncrementStats>
where
    F: Fn(usize) -> Result<Trajectory> + Sync,
{
    if *n_range.start() < 2 {
        return Err(Error::domain("n_range must start at 2 or above"));
    }
    let ns: Vec<u32> = n_range.collect();
    let per_path: Vec<Option<Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<Option<Vec<f64>>> {
            let traj = match solve(i) {
                Ok(t) => t,
                Err(Error::BlowUp { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            if let Some(n) = monitor_n {
                if !traj.monitors.within(n) {
                    return Ok(None);
                }
            }
            let steps = traj.states.len() - 1;
            if let Some(&top) = ns.last() {
                if (steps as f64).log2() < top as f64 {
                    return Err(Error::domain(format!("n = {top} exceeds log2 of {steps} steps")));
                }
            }
            let horizon = traj.horizon();
            ns.iter()
                .map(|&n| increment_integrals(model, &traj.states, horizon, n))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect::<Result<_>>()?;
    let kept: Vec<&Vec<f64>> = per_path.iter().flatten().collect();
    let mut values = vec![0.0; ns.len()];
    for v in &kept {
        for (a, b) in values.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    if !kept.is_empty() {
        values.iter_mut().for_each(|v| *v /= kept.len() as f64);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = ns
        .iter()
        .zip(&values)
        .filter(|(_, v)| v.is_finite() && **v > 0.0)
        .map(|(n, v)| (*n as f64, v.log2()))
        .unzip();
    if xs.len() < 3 {
        return Err(Error::DegenerateFit { valid: xs.len() });
    }
    Ok(IncrementStats {
        n_range: ns,
        values,
        fitted_slope: -ls_slope(&xs, &ys),
        kept: kept.len(),
        discarded: paths - kept.len(),
    })
}
