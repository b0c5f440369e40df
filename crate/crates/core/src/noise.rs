//! Driving noise and diffusion coefficients.
//!
//! `Q` is diagonal in the shell basis with eigenvalues `q_j`. The Wiener
//! process is `W(t) = sum_j sqrt(q_j) (beta_j(t) + i beta'_j(t)) e_j`: the real
//! and imaginary parts of each shell are independent with variance `q_j t`,
//! which is the covariance `E (W(t), f)^2 = t (Qf, f)` of `H` viewed as a real
//! Hilbert space. With this convention `|h|_0^2 = sum |h_j|^2 / q_j` is the
//! Cameron-Martin norm and the Girsanov density has its textbook form.
//!
//! Every diffusion family acts diagonally: `(sigma(t,u) h)_n = g_n(t, |u_n|) h_n`
//! with a real gain `g_n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::spectral::{ShellModel, ShellState, C64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpec {
    pub q: Vec<f64>,
}

impl CovarianceSpec {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        let c = CovarianceSpec { q };
        c.validate()?;
        Ok(c)
    }

    /// `q_j = scale * k_j^{-2 decay}` on the model's shells.
    pub fn power_law(model: &ShellModel, scale: f64, decay: f64) -> Result<Self> {
        Self::new((1..=model.m()).map(|n| scale * model.k(n).powf(-2.0 * decay)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.is_empty() {
            return Err(Error::config("covariance.q", "empty covariance"));
        }
        if let Some((j, q)) = self.q.iter().enumerate().find(|(_, q)| !(q.is_finite() && **q > 0.0)) {
            return Err(Error::config(
                format!("covariance.q[{j}]"),
                format!("eigenvalues must be finite and > 0, got {q}"),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn trace(&self) -> f64 {
        self.q.iter().sum()
    }
}

/// An element of `H_0 = Q^{1/2} H` in shell coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RkhsVector(pub Vec<C64>);

impl RkhsVector {
    pub fn zeros(m: usize) -> Self {
        RkhsVector(vec![C64::new(0.0, 0.0); m])
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Q^{1/2} x`
    pub fn from_h(x: &ShellState, q: &CovarianceSpec) -> Self {
        RkhsVector(x.as_slice().iter().zip(&q.q).map(|(z, qj)| z * qj.sqrt()).collect())
    }
}

/// `|h|_0 = |Q^{-1/2} h|`.
pub fn rkhs_norm(h: &RkhsVector, q: &CovarianceSpec) -> Result<f64> {
    check_dim(q.len(), h.len())?;
    q.validate().map_err(|e| Error::domain(e.to_string()))?;
    Ok(rkhs_norm_sq_raw(h.as_slice(), &q.q).sqrt())
}

pub(crate) fn rkhs_norm_sq_raw(h: &[C64], q: &[f64]) -> f64 {
    h.iter().zip(q).map(|(z, qj)| z.norm_sqr() / qj).sum()
}

/// `(g, h)_0 = Re sum g_j conj(h_j) / q_j`
pub(crate) fn rkhs_dot_raw(g: &[C64], h: &[C64], q: &[f64]) -> f64 {
    g.iter()
        .zip(h)
        .zip(q)
        .map(|((a, b), qj)| (a.re * b.re + a.im * b.im) / qj)
        .sum()
}

/// Hilbert-Schmidt norm of `S Q^{1/2}` for `S` given as rows in shell
/// coordinates: `sqrt(sum_{n,j} |S_nj|^2 q_j)`.
pub fn lq_norm(s: &[Vec<C64>], q: &CovarianceSpec) -> Result<f64> {
    let mut acc = 0.0;
    for row in s {
        check_dim(q.len(), row.len())?;
        acc += row.iter().zip(&q.q).map(|(z, qj)| z.norm_sqr() * qj).sum::<f64>();
    }
    Ok(acc.sqrt())
}

/// Derive the ChaCha stream for trajectory `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Brownian increments `Delta W_k` of a Q-Wiener path on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    pub seed: u64,
    pub stream: u64,
    pub dt: f64,
    pub steps: usize,
    pub m: usize,
    increments: Vec<C64>,
}

impl NoisePath {
    pub fn increment(&self, k: usize) -> &[C64] {
        &self.increments[k * self.m..(k + 1) * self.m]
    }

    /// Path from explicit increments laid out step-major (`steps * m` values).
    pub fn from_increments(dt: f64, m: usize, increments: Vec<C64>) -> Result<Self> {
        if m == 0 || increments.is_empty() || !increments.len().is_multiple_of(m) {
            return Err(Error::domain("increments must be a non-empty multiple of m"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::domain(format!("dt must be > 0, got {dt}")));
        }
        Ok(NoisePath {
            seed: 0,
            stream: 0,
            dt,
            steps: increments.len() / m,
            m,
            increments,
        })
    }

    /// Zero path of the given shape, for deterministic runs.
    pub fn zero(steps: usize, dt: f64, m: usize) -> Self {
        NoisePath {
            seed: 0,
            stream: 0,
            dt,
            steps,
            m,
            increments: vec![C64::new(0.0, 0.0); steps * m],
        }
    }

    /// Sum of consecutive increments in blocks of `factor`; the same Brownian
    /// path seen on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::domain(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        let steps = self.steps / factor;
        let mut inc = vec![C64::new(0.0, 0.0); steps * self.m];
        for k in 0..self.steps {
            let dst = (k / factor) * self.m;
            for (d, s) in inc[dst..dst + self.m].iter_mut().zip(self.increment(k)) {
                *d += s;
            }
        }
        Ok(NoisePath {
            seed: self.seed,
            stream: self.stream,
            dt: self.dt * factor as f64,
            steps,
            m: self.m,
            increments: inc,
        })
    }
}

pub fn sample_wiener(seed: u64, steps: usize, dt: f64, q: &CovarianceSpec) -> Result<NoisePath> {
    sample_wiener_stream(seed, 0, steps, dt, q)
}

/// Q-Wiener increments for stream `stream` of `seed`; bit-identical for
/// identical arguments.
pub fn sample_wiener_stream(seed: u64, stream: u64, steps: usize, dt: f64, q: &CovarianceSpec) -> Result<NoisePath> {
    if steps == 0 {
        return Err(Error::domain("steps must be >= 1"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain(format!("dt must be > 0, got {dt}")));
    }
    let m = q.len();
    let sd: Vec<f64> = q.q.iter().map(|qj| (qj * dt).sqrt()).collect();
    let mut rng = stream_rng(seed, stream);
    let mut increments = Vec::with_capacity(steps * m);
    for _ in 0..steps {
        for s in &sd {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            increments.push(C64::new(re * s, im * s));
        }
    }
    Ok(NoisePath {
        seed,
        stream,
        dt,
        steps,
        m,
        increments,
    })
}

/// Piecewise-constant `H_0`-valued control on a uniform partition of `[0, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub horizon: f64,
    pub values: Vec<RkhsVector>,
    pub q: CovarianceSpec,
    energy: f64,
}

impl Control {
    pub fn new(horizon: f64, values: Vec<RkhsVector>, q: &CovarianceSpec) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain(format!("horizon must be > 0, got {horizon}")));
        }
        if values.is_empty() {
            return Err(Error::domain("control needs at least one cell"));
        }
        for v in &values {
            check_dim(q.len(), v.len())?;
        }
        let mut c = Control {
            horizon,
            values,
            q: q.clone(),
            energy: 0.0,
        };
        c.refresh();
        Ok(c)
    }

    pub fn zero(horizon: f64, cells: usize, q: &CovarianceSpec) -> Result<Self> {
        Self::new(horizon, vec![RkhsVector::zeros(q.len()); cells], q)
    }

    /// Same value on every cell.
    pub fn constant(horizon: f64, cells: usize, value: RkhsVector, q: &CovarianceSpec) -> Result<Self> {
        Self::new(horizon, vec![value; cells], q)
    }

    fn refresh(&mut self) {
        let dt = self.cell_width();
        self.energy = 0.5
            * dt
            * self
                .values
                .iter()
                .map(|v| rkhs_norm_sq_raw(v.as_slice(), &self.q.q))
                .sum::<f64>();
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn m(&self) -> usize {
        self.q.len()
    }

    pub fn cell_width(&self) -> f64 {
        self.horizon / self.values.len() as f64
    }

    /// `1/2 int_0^T |h(s)|_0^2 ds`
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Membership in `S_M`: `int |h|_0^2 <= M`.
    pub fn in_s_m(&self, m_cap: f64) -> bool {
        2.0 * self.energy <= m_cap
    }

    /// Index of the cell containing `t` (right-continuous, clamped to `[0,T]`).
    pub fn cell_at(&self, t: f64) -> usize {
        let c = (t / self.cell_width()).floor();
        (c.max(0.0) as usize).min(self.values.len() - 1)
    }

    pub fn value_at(&self, t: f64) -> &RkhsVector {
        &self.values[self.cell_at(t)]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.clone();
        for v in &mut c.values {
            for z in &mut v.0 {
                *z *= s;
            }
        }
        c.refresh();
        c
    }

    /// `self + s * other` (same grid).
    pub fn axpy(&self, s: f64, other: &Control) -> Result<Self> {
        if other.cells() != self.cells() {
            return Err(Error::Dimension {
                expected: self.cells(),
                got: other.cells(),
            });
        }
        let mut c = self.clone();
        for (v, w) in c.values.iter_mut().zip(&other.values) {
            for (a, b) in v.0.iter_mut().zip(&w.0) {
                *a += b * s;
            }
        }
        c.refresh();
        Ok(c)
    }

    /// Inner product of `L^2(0, T; H_0)`.
    pub fn inner_l2(&self, other: &Control) -> f64 {
        self.cell_width()
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| rkhs_dot_raw(a.as_slice(), b.as_slice(), &self.q.q))
                .sum::<f64>()
    }

    pub fn norm_l2(&self) -> f64 {
        self.inner_l2(self).sqrt()
    }

    /// Project onto `S_M` by scaling; returns whether the cap was active.
    pub fn project_s_m(&mut self, m_cap: f64) -> bool {
        if self.in_s_m(m_cap) {
            return false;
        }
        let s = (m_cap / (2.0 * self.energy)).sqrt();
        *self = self.scaled(s);
        true
    }

    /// The same function of time on a grid `factor` times finer.
    pub fn refined(&self, factor: usize) -> Self {
        let values = self
            .values
            .iter()
            .flat_map(|v| std::iter::repeat_n(v.clone(), factor))
            .collect();
        Control::new(self.horizon, values, &self.q).expect("refinement preserves validity")
    }

    pub fn is_zero(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.0.iter().all(|z| z.re == 0.0 && z.im == 0.0))
    }
}

/// `tau(t) = 1 + amplitude * t^exponent`: time modulation shared by all
/// families, Hoelder of order `exponent` with constant `amplitude`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeModulation {
    pub amplitude: f64,
    pub exponent: f64,
}

impl Default for TimeModulation {
    fn default() -> Self {
        TimeModulation {
            amplitude: 0.0,
            exponent: 1.0,
        }
    }
}

impl TimeModulation {
    fn at(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            1.0
        } else {
            1.0 + self.amplitude * t.max(0.0).powf(self.exponent)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionFamily {
    /// `g_n(t, r) = tau(t) gains_n`
    ConstantDiagonal { gains: Vec<f64> },
    /// `g_n(t, r) = tau(t) (gains_n + slopes_n r)`
    LinearDiagonal { gains: Vec<f64>, slopes: Vec<f64> },
    /// `g_n(t, r) = tau(t) gains_n s r / (s + r)`
    SaturatedNemytskii { gains: Vec<f64>, scale: f64 },
    /// `sigma + sqrt(nu) sigma_bar`
    Composite {
        sigma: Box<DiffusionSpec>,
        sigma_bar: Box<DiffusionSpec>,
        nu: f64,
    },
}

/// Growth, Lipschitz and Hoelder constants of the diffusion coefficients.
/// `*_tilde_*` belong to the control coefficient, `*_bar_*` to the
/// viscosity-independent decomposition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionConstants {
    pub k_0: f64,
    pub k_1: f64,
    pub k_2: f64,
    pub l_1: f64,
    pub l_2: f64,
    pub k_tilde_0: f64,
    pub k_tilde_1: f64,
    pub k_tilde_2: f64,
    pub k_tilde_h: f64,
    pub l_tilde_1: f64,
    pub l_tilde_2: f64,
    pub k_bar_0: f64,
    pub k_bar_1: f64,
    pub k_bar_2: f64,
    pub k_bar_h: f64,
    pub l_bar_1: f64,
    pub l_bar_2: f64,
    pub c_bar: f64,
    pub gamma: f64,
    pub l_3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub family: DiffusionFamily,
    #[serde(default)]
    pub time: TimeModulation,
    /// Declared constants; derived from the family when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConditionConstants>,
}

impl DiffusionSpec {
    fn plain(family: DiffusionFamily) -> Self {
        DiffusionSpec {
            family,
            time: TimeModulation::default(),
            constants: None,
        }
    }

    pub fn constant_diagonal(gains: Vec<f64>) -> Self {
        Self::plain(DiffusionFamily::ConstantDiagonal { gains })
    }

    pub fn linear_diagonal(gains: Vec<f64>, slopes: Vec<f64>) -> Self {
        Self::plain(DiffusionFamily::LinearDiagonal { gains, slopes })
    }

    pub fn saturated(gains: Vec<f64>, scale: f64) -> Self {
        Self::plain(DiffusionFamily::SaturatedNemytskii { gains, scale })
    }

    pub fn zero(m: usize) -> Self {
        Self::constant_diagonal(vec![0.0; m])
    }

    pub fn with_time(mut self, time: TimeModulation) -> Self {
        self.time = time;
        self
    }

    pub fn with_constants(mut self, c: ConditionConstants) -> Self {
        self.constants = Some(c);
        self
    }

    pub fn dim(&self) -> usize {
        match &self.family {
            DiffusionFamily::ConstantDiagonal { gains }
            | DiffusionFamily::LinearDiagonal { gains, .. }
            | DiffusionFamily::SaturatedNemytskii { gains, .. } => gains.len(),
            DiffusionFamily::Composite { sigma, .. } => sigma.dim(),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::config("diffusion", what.to_string()));
        match &self.family {
            DiffusionFamily::ConstantDiagonal { gains } => check_dim(m, gains.len())?,
            DiffusionFamily::LinearDiagonal { gains, slopes } => {
                check_dim(m, gains.len())?;
                check_dim(m, slopes.len())?;
            }
            DiffusionFamily::SaturatedNemytskii { gains, scale } => {
                check_dim(m, gains.len())?;
                if !(*scale > 0.0 && scale.is_finite()) {
                    return bad("saturation scale must be > 0");
                }
            }
            DiffusionFamily::Composite { sigma, sigma_bar, nu } => {
                sigma.validate(m)?;
                sigma_bar.validate(m)?;
                if !(*nu >= 0.0 && nu.is_finite()) {
                    return bad("composite nu must be >= 0");
                }
            }
        }
        if !(self.time.amplitude >= 0.0 && self.time.exponent > 0.0 && self.time.exponent <= 1.0) {
            return bad("time modulation needs amplitude >= 0 and exponent in (0, 1]");
        }
        Ok(())
    }

    /// Gain `g_n(t, r)` and its derivative in `r = |u_n|`, for shell index
    /// `i` (0-based).
    #[inline]
    pub fn gain(&self, i: usize, t: f64, r: f64) -> (f64, f64) {
        let tau = self.time.at(t);
        let (g, dg) = match &self.family {
            DiffusionFamily::ConstantDiagonal { gains } => (gains[i], 0.0),
            DiffusionFamily::LinearDiagonal { gains, slopes } => (gains[i] + slopes[i] * r, slopes[i]),
            DiffusionFamily::SaturatedNemytskii { gains, scale } => {
                let d = scale + r;
                (gains[i] * scale * r / d, gains[i] * scale * scale / (d * d))
            }
            DiffusionFamily::Composite { sigma, sigma_bar, nu } => {
                let (a, da) = sigma.gain(i, t, r);
                let (b, db) = sigma_bar.gain(i, t, r);
                let s = nu.sqrt();
                (a + s * b, da + s * db)
            }
        };
        (tau * g, tau * dg)
    }

    pub fn gains(&self, t: f64, u: &[C64]) -> Vec<f64> {
        u.iter().enumerate().map(|(i, z)| self.gain(i, t, z.norm()).0).collect()
    }

    /// `out += scale * sigma(t,u) h`
    pub fn apply_add(&self, t: f64, u: &[C64], h: &[C64], scale: f64, out: &mut [C64]) {
        for (i, ((o, z), hz)) in out.iter_mut().zip(u).zip(h).enumerate() {
            let (g, _) = self.gain(i, t, z.norm());
            *o += hz * (scale * g);
        }
    }

    pub fn apply_sigma(&self, t: f64, u: &ShellState, h: &RkhsVector) -> Result<ShellState> {
        check_dim(self.dim(), u.len())?;
        check_dim(self.dim(), h.len())?;
        let mut out = ShellState::zeros(u.len());
        self.apply_add(t, u.as_slice(), h.as_slice(), 1.0, out.as_mut_slice());
        Ok(out)
    }

    /// `out += scale * (D_u[sigma(t,u) h])^T p` in the real inner product.
    pub fn jacobian_transpose_add(&self, t: f64, u: &[C64], h: &[C64], p: &[C64], scale: f64, out: &mut [C64]) {
        for i in 0..u.len() {
            let r = u[i].norm();
            if r == 0.0 {
                continue;
            }
            let (_, dg) = self.gain(i, t, r);
            if dg == 0.0 {
                continue;
            }
            let ph = p[i].re * h[i].re + p[i].im * h[i].im;
            out[i] += u[i] * (scale * dg * ph / r);
        }
    }

    /// `out += scale * sigma(t,u)^T p` (Euclidean transpose in the control slot).
    pub fn control_transpose_add(&self, t: f64, u: &[C64], p: &[C64], scale: f64, out: &mut [C64]) {
        for (i, (o, z)) in out.iter_mut().zip(u).enumerate() {
            let (g, _) = self.gain(i, t, z.norm());
            *o += p[i] * (scale * g);
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.family {
            DiffusionFamily::ConstantDiagonal { gains } => gains.iter().all(|g| *g == 0.0),
            DiffusionFamily::SaturatedNemytskii { gains, .. } => gains.iter().all(|g| *g == 0.0),
            DiffusionFamily::LinearDiagonal { gains, slopes } => gains.iter().chain(slopes).all(|g| *g == 0.0),
            DiffusionFamily::Composite { sigma, sigma_bar, nu } => {
                sigma.is_zero() && (*nu == 0.0 || sigma_bar.is_zero())
            }
        }
    }

    /// The `nu`-independent part `sigma` of a composite, or the spec itself.
    pub fn base(&self) -> &DiffusionSpec {
        match &self.family {
            DiffusionFamily::Composite { sigma, .. } => sigma,
            _ => self,
        }
    }

    /// Constants in force: the declared record if present, otherwise the
    /// closed-form bounds of the family on `[0, horizon]`.
    pub fn declared_constants(&self, model: &ShellModel, q: &CovarianceSpec, horizon: f64) -> ConditionConstants {
        if let Some(c) = &self.constants {
            return c.clone();
        }
        match &self.family {
            DiffusionFamily::Composite { sigma, sigma_bar, nu } => {
                let s = sigma.declared_constants(model, q, horizon);
                let b = sigma_bar.declared_constants(model, q, horizon);
                composed_constants(&s, &b, *nu, model.params().k0)
            }
            _ => self.family_constants(model, q, horizon),
        }
    }

    fn family_constants(&self, model: &ShellModel, q: &CovarianceSpec, horizon: f64) -> ConditionConstants {
        let tau = self.time.at(horizon).max(1.0);
        let tau2 = tau * tau;
        let k = |i: usize| model.k(i + 1);
        let k1 = model.k(1);
        let sum = |f: &dyn Fn(usize) -> f64| (0..q.len()).map(f).sum::<f64>();
        let max = |f: &dyn Fn(usize) -> f64| (0..q.len()).map(f).fold(0.0, f64::max);
        let amp = self.time.amplitude;
        let mut c = ConditionConstants {
            gamma: self.time.exponent,
            ..Default::default()
        };
        match &self.family {
            DiffusionFamily::ConstantDiagonal { gains } => {
                let s0 = sum(&|i| gains[i].powi(2) * q.q[i]);
                let s0k = sum(&|i| (k(i) * gains[i]).powi(2) * q.q[i]);
                let m0 = max(&|i| gains[i].powi(2) * q.q[i]);
                let m0k = max(&|i| (k(i) * gains[i]).powi(2) * q.q[i]);
                c.k_0 = tau2 * s0.max(s0k);
                c.k_tilde_0 = tau2 * m0.max(m0k);
                c.k_bar_0 = c.k_0;
                c.c_bar = amp * s0.sqrt();
            }
            DiffusionFamily::LinearDiagonal { gains, slopes } => {
                let s0 = sum(&|i| gains[i].powi(2) * q.q[i]);
                let s0k = sum(&|i| (k(i) * gains[i]).powi(2) * q.q[i]);
                let m0 = max(&|i| gains[i].powi(2) * q.q[i]);
                let m0k = max(&|i| (k(i) * gains[i]).powi(2) * q.q[i]);
                let ml = max(&|i| slopes[i].powi(2) * q.q[i]);
                c.k_0 = 2.0 * tau2 * s0.max(s0k);
                c.k_1 = 2.0 * tau2 * ml;
                c.l_1 = tau2 * ml;
                c.k_tilde_0 = 2.0 * tau2 * m0.max(m0k);
                c.k_tilde_1 = 2.0 * tau2 * ml;
                c.l_tilde_1 = tau2 * ml;
                c.k_bar_0 = c.k_0;
                c.k_bar_1 = c.k_1;
                c.l_bar_1 = c.l_1;
                c.c_bar = amp * s0.sqrt().max(ml.sqrt() / k1);
                c.l_3 = tau * ml.sqrt();
            }
            DiffusionFamily::SaturatedNemytskii { gains, .. } => {
                // s r / (s + r) <= r and its derivative is <= 1
                let mg = max(&|i| gains[i].powi(2) * q.q[i]);
                c.k_1 = tau2 * mg;
                c.l_1 = tau2 * mg;
                c.k_tilde_1 = tau2 * mg;
                c.l_tilde_1 = tau2 * mg;
                c.k_bar_1 = c.k_1;
                c.l_bar_1 = c.l_1;
                c.c_bar = amp * mg.sqrt() / k1;
                c.l_3 = tau * mg.sqrt();
            }
            DiffusionFamily::Composite { .. } => unreachable!("handled by declared_constants"),
        }
        // the same family in the role of sigma_bar: |u|^2 <= ||u||_H^2 / k_1,
        // ||u||^2 <= |Au|^2 / k_1^2
        c.k_bar_h = c.k_bar_1 / k1;
        c.k_bar_2 = c.k_bar_1 / (k1 * k1);
        c.l_bar_2 = c.l_bar_1 / (k1 * k1);
        c
    }
}

/// Constants of `sigma_nu = sigma + sqrt(nu) sigma_bar` from those of its
/// parts, valid for `nu <= min(nu_1, 1)` with `nu_1 = nu`.
fn composed_constants(s: &ConditionConstants, b: &ConditionConstants, nu: f64, k0: f64) -> ConditionConstants {
    let k_bar_0 = s.k_bar_0.max(b.k_bar_0);
    // sup over alpha in [0, 1/4] of k0^{4 alpha - 2}
    let kpow = k0.powi(-2).max(k0.powi(-1));
    ConditionConstants {
        k_0: 4.0 * k_bar_0,
        k_tilde_0: 4.0 * k_bar_0,
        k_1: 2.0 * s.k_bar_1,
        k_tilde_1: 2.0 * s.k_bar_1,
        l_1: 2.0 * s.l_bar_1,
        l_tilde_1: 2.0 * s.l_bar_1,
        k_tilde_2: 2.0 * b.k_bar_2,
        k_tilde_h: 2.0 * b.k_bar_h,
        k_2: 2.0 * b.k_bar_2.max(b.k_bar_h * kpow) * nu,
        l_2: 2.0 * b.l_bar_2 * nu,
        l_tilde_2: 2.0 * b.l_bar_2,
        k_bar_0,
        k_bar_1: s.k_bar_1,
        k_bar_2: b.k_bar_2,
        k_bar_h: b.k_bar_h,
        l_bar_1: s.l_bar_1,
        l_bar_2: b.l_bar_2,
        c_bar: s.c_bar.max(b.c_bar),
        gamma: s.gamma.min(b.gamma),
        l_3: s.l_3,
    }
}

/// `sigma + sqrt(nu) sigma_bar`; exactly `sigma` at `nu = 0`.
pub fn compose_sigma_nu(sigma: &DiffusionSpec, sigma_bar: &DiffusionSpec, nu: f64) -> Result<DiffusionSpec> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!("nu must be >= 0, got {nu}")));
    }
    check_dim(sigma.dim(), sigma_bar.dim())?;
    if nu == 0.0 {
        return Ok(sigma.clone());
    }
    Ok(DiffusionSpec::plain(DiffusionFamily::Composite {
        sigma: Box::new(sigma.clone()),
        sigma_bar: Box::new(sigma_bar.clone()),
        nu,
    }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub nu: Option<f64>,
    /// Sup of the sampled ratio; in constant units when the bound has a single term.
    pub empirical: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    pub samples: usize,
    pub rows: Vec<ConditionRow>,
    pub pass: bool,
}

struct RatioAcc {
    condition: String,
    nu: Option<f64>,
    constants: Vec<f64>,
    sup: f64,
}

impl RatioAcc {
    fn new(condition: impl Into<String>, nu: Option<f64>, constants: Vec<f64>) -> Self {
        RatioAcc {
            condition: condition.into(),
            nu,
            constants,
            sup: 0.0,
        }
    }

    /// Record `lhs <= sum c_i x_i`. A single-term bound is tracked as the
    /// constant `lhs / x`, otherwise as the ratio against the full bound.
    fn push(&mut self, lhs: f64, xs: &[f64]) {
        let r = if self.constants.len() == 1 {
            if xs[0] > 0.0 {
                lhs / xs[0]
            } else if lhs > 1e-300 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            let rhs: f64 = self.constants.iter().zip(xs).map(|(c, x)| c * x).sum();
            if rhs > 0.0 {
                lhs / rhs
            } else if lhs > 1e-300 {
                f64::INFINITY
            } else {
                0.0
            }
        };
        self.sup = self.sup.max(r);
    }

    fn finish(self) -> ConditionRow {
        let bound = if self.constants.len() == 1 {
            self.constants[0]
        } else {
            1.0
        };
        // relative slack for roundoff in ratios that are tight by construction
        let pass = self.sup <= bound * (1.0 + 1e-9) + 1e-300;
        ConditionRow {
            condition: self.condition,
            nu: self.nu,
            empirical: self.sup,
            bound,
            pass,
        }
    }
}

/// Weighted `L_Q` and operator norms of a diagonal map with real gains.
fn diag_norms(gains: &[f64], weights: &[f64], q: &[f64]) -> (f64, f64) {
    let mut lq = 0.0;
    let mut op: f64 = 0.0;
    for ((g, w), qj) in gains.iter().zip(weights).zip(q) {
        let x = (g * w).powi(2) * qj;
        lq += x;
        op = op.max(x);
    }
    (lq, op)
}

fn random_state<R: Rng>(rng: &mut R, model: &ShellModel) -> Vec<C64> {
    let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
    let slope = [0.0, 0.5, 1.0, 2.0][rng.gen_range(0..4)];
    (1..=model.m())
        .map(|n| {
            let s = scale * model.k(n).powf(-slope);
            C64::new(
                rng.sample::<f64, _>(StandardNormal) * s,
                rng.sample::<f64, _>(StandardNormal) * s,
            )
        })
        .collect()
}

/// Sample `(t, s, u, v)` and evaluate every growth, Lipschitz and Hoelder
/// ratio against the declared constants.
pub fn verify_conditions(
    spec: &DiffusionSpec,
    model: &ShellModel,
    q: &CovarianceSpec,
    horizon: f64,
    samples: usize,
    nu_grid: &[f64],
    seed: u64,
) -> Result<ConditionReport> {
    if samples == 0 {
        return Err(Error::domain("samples must be >= 1"));
    }
    spec.validate(model.m())?;
    check_dim(model.m(), q.len())?;
    let m = model.m();
    let ones = vec![1.0; m];
    let kv: Vec<f64> = (1..=m).map(|n| model.k(n)).collect();
    let mut rng = stream_rng(seed, 0);
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let u = random_state(&mut rng, model);
        let v = if rng.gen_bool(0.5) {
            let eps = 10f64.powf(rng.gen_range(-6.0..0.0));
            let d = random_state(&mut rng, model);
            u.iter().zip(&d).map(|(a, b)| a + b * eps).collect()
        } else {
            random_state(&mut rng, model)
        };
        let t = rng.gen_range(0.0..=horizon);
        let s = rng.gen_range(0.0..=horizon);
        draws.push((t, s, u, v));
    }
    let norms = |u: &[C64]| {
        (
            model.weighted_sq(u, 0),
            model.weighted_sq(u, 1),
            model.weighted_sq(u, 2),
            model.weighted_sq(u, 4),
        )
    };
    let diff = |u: &[C64], v: &[C64]| -> Vec<C64> { u.iter().zip(v).map(|(a, b)| a - b).collect() };
    let gdiff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let mut rows = Vec::new();

    // growth and Lipschitz bounds of sigma_nu = sigma_tilde_nu at each grid viscosity
    for &nu in nu_grid {
        let eff = match &spec.family {
            DiffusionFamily::Composite { sigma, sigma_bar, .. } => {
                let mut e = compose_sigma_nu(sigma, sigma_bar, nu)?;
                // constants stay those declared for the composite
                e.constants = Some(spec.declared_constants(model, q, horizon));
                e
            }
            _ => spec.clone(),
        };
        let c = eff.declared_constants(model, q, horizon);
        let mut acc = vec![
            RatioAcc::new("noise.growth_lq", Some(nu), vec![c.k_0, c.k_1, c.k_2]),
            RatioAcc::new("noise.lipschitz_lq", Some(nu), vec![c.l_1, c.l_2]),
            RatioAcc::new(
                "control.growth",
                Some(nu),
                vec![c.k_tilde_0, c.k_tilde_1, nu * c.k_tilde_h],
            ),
            RatioAcc::new("control.lipschitz", Some(nu), vec![c.l_tilde_1, nu * c.l_tilde_2]),
            RatioAcc::new(
                "control.growth_v",
                Some(nu),
                vec![c.k_tilde_0, c.k_tilde_1, nu * c.k_tilde_2],
            ),
            RatioAcc::new("control.lipschitz_v", Some(nu), vec![c.l_tilde_1, nu * c.l_tilde_2]),
            RatioAcc::new("noise.growth_lq_v", Some(nu), vec![c.k_0, c.k_1, c.k_2]),
            RatioAcc::new("noise.lipschitz_lq_v", Some(nu), vec![c.l_1, c.l_2]),
        ];
        for (t, _, u, v) in &draws {
            let gu = eff.gains(*t, u);
            let gv = eff.gains(*t, v);
            let dg = gdiff(&gu, &gv);
            let d = diff(u, v);
            let (h, calh, vv, aa) = norms(u);
            let (dh, _, dv, da) = norms(&d);
            let (lq, op) = diag_norms(&gu, &ones, &q.q);
            let (lq_a, op_a) = diag_norms(&gu, &kv, &q.q);
            let (dlq, dop) = diag_norms(&dg, &ones, &q.q);
            let (dlq_a, dop_a) = diag_norms(&dg, &kv, &q.q);
            acc[0].push(lq, &[1.0, h, vv]);
            acc[1].push(dlq, &[dh, dv]);
            acc[2].push(op, &[1.0, h, calh]);
            acc[3].push(dop, &[dh, dv]);
            acc[4].push(op_a, &[1.0, vv, aa]);
            acc[5].push(dop_a, &[dv, da]);
            acc[6].push(lq_a, &[1.0, vv, aa]);
            acc[7].push(dlq_a, &[dv, da]);
        }
        rows.extend(acc.into_iter().map(RatioAcc::finish));
    }

    // bounds of the viscosity-independent parts
    let c = spec.declared_constants(model, q, horizon);
    let base = spec.base();
    let mut acc = vec![
        RatioAcc::new("sigma.growth", None, vec![c.k_bar_0, c.k_bar_1]),
        RatioAcc::new("sigma.growth_v", None, vec![c.k_bar_0, c.k_bar_1]),
        RatioAcc::new("sigma.lip", None, vec![c.l_bar_1]),
        RatioAcc::new("sigma.lip_v", None, vec![c.l_bar_1]),
        RatioAcc::new("sigma.holder", None, vec![c.c_bar]),
    ];
    let alphas = [0.0, 0.125, 0.25];
    let mut c6: Vec<RatioAcc> = alphas
        .iter()
        .map(|a| RatioAcc::new(format!("sigma.lipschitz_alpha({a})"), None, vec![c.l_3]))
        .collect();
    let bar = match &spec.family {
        DiffusionFamily::Composite { sigma_bar, .. } => Some(sigma_bar.as_ref()),
        _ => None,
    };
    let mut acc_bar = vec![
        RatioAcc::new("sigma_bar.growth", None, vec![c.k_bar_0, c.k_bar_h]),
        RatioAcc::new("sigma_bar.growth_v", None, vec![c.k_bar_0, c.k_bar_2]),
        RatioAcc::new("sigma_bar.lip", None, vec![c.l_bar_2]),
        RatioAcc::new("sigma_bar.lip_v", None, vec![c.l_bar_2]),
        RatioAcc::new("sigma_bar.holder", None, vec![c.c_bar]),
    ];
    for (t, s, u, v) in &draws {
        let d = diff(u, v);
        let (h, calh, vv, aa) = norms(u);
        let (dh, _, dv, da) = norms(&d);
        let dts = (t - s).abs();
        let parts: Vec<(&DiffusionSpec, &mut Vec<RatioAcc>, bool)> = match bar {
            Some(b) => vec![(base, &mut acc, false), (b, &mut acc_bar, true)],
            None => vec![(base, &mut acc, false)],
        };
        for (sp, ac, is_bar) in parts {
            let gu = sp.gains(*t, u);
            let gv = sp.gains(*t, v);
            let gs = sp.gains(*s, u);
            let dg = gdiff(&gu, &gv);
            let (lq, _) = diag_norms(&gu, &ones, &q.q);
            let (lq_a, _) = diag_norms(&gu, &kv, &q.q);
            let (dlq, _) = diag_norms(&dg, &ones, &q.q);
            let (dlq_a, _) = diag_norms(&dg, &kv, &q.q);
            let (tlq, _) = diag_norms(&gdiff(&gu, &gs), &ones, &q.q);
            let gamma = if c.gamma > 0.0 { c.gamma } else { 1.0 };
            if is_bar {
                ac[0].push(lq, &[1.0, calh]);
                ac[1].push(lq_a, &[1.0, aa]);
                ac[2].push(dlq, &[dv]);
                ac[3].push(dlq_a, &[da]);
            } else {
                ac[0].push(lq, &[1.0, h]);
                ac[1].push(lq_a, &[1.0, vv]);
                ac[2].push(dlq, &[dh]);
                ac[3].push(dlq_a, &[dv]);
            }
            if dts > 0.0 {
                ac[4].push(tlq.sqrt(), &[(1.0 + vv.sqrt()) * dts.powf(gamma)]);
            }
        }
        let dg = gdiff(&base.gains(*t, u), &base.gains(*t, v));
        for (a, acc6) in alphas.iter().zip(c6.iter_mut()) {
            let w: Vec<f64> = kv.iter().map(|k| k.powf(2.0 * a)).collect();
            let (dlq, _) = diag_norms(&dg, &w, &q.q);
            acc6.push(dlq.sqrt(), &[model.norm_alpha_raw(&d, *a)]);
        }
    }
    rows.extend(acc.into_iter().map(RatioAcc::finish));
    if bar.is_some() {
        rows.extend(acc_bar.into_iter().map(RatioAcc::finish));
    }
    rows.extend(c6.into_iter().map(RatioAcc::finish));
    let pass = rows.iter().all(|r| r.pass);
    Ok(ConditionReport { samples, rows, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{ModelParams, Variant};

    fn model(m: usize) -> ShellModel {
        ShellModel::new(ModelParams::new(Variant::Goy, 1.0, -1.25, 2.0, 1.0, m).unwrap()).unwrap()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn rkhs_norm_examples() {
        let q = CovarianceSpec::new(vec![4.0, 1.0]).unwrap();
        let h = RkhsVector(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(rkhs_norm(&h, &q).unwrap(), 0.5);
        assert_eq!(rkhs_norm(&RkhsVector::zeros(2), &q).unwrap(), 0.0);
        let q = CovarianceSpec::new(vec![1.0, 1.0]).unwrap();
        let h = RkhsVector(vec![c(1.0, 0.0), c(0.0, 2.0)]);
        assert!((rkhs_norm(&h, &q).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        let bad = CovarianceSpec { q: vec![1.0, 0.0] };
        assert!(matches!(rkhs_norm(&h, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn lq_norm_examples() {
        let q = CovarianceSpec::new(vec![0.5, 2.0, 3.0]).unwrap();
        let eye: Vec<Vec<C64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) }).collect())
            .collect();
        assert!((lq_norm(&eye, &q).unwrap() - 5.5f64.sqrt()).abs() < 1e-15);
        let zero = vec![vec![c(0.0, 0.0); 3]; 3];
        assert_eq!(lq_norm(&zero, &q).unwrap(), 0.0);
        let two: Vec<Vec<C64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { c(2.0, 0.0) } else { c(0.0, 0.0) }).collect())
            .collect();
        let ones = CovarianceSpec::new(vec![1.0; 3]).unwrap();
        assert!((lq_norm(&two, &ones).unwrap() - 12f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn wiener_is_deterministic_and_streams_differ() {
        let q = CovarianceSpec::new(vec![1.0, 0.5, 0.25]).unwrap();
        let a = sample_wiener(7, 50, 0.01, &q).unwrap();
        let b = sample_wiener(7, 50, 0.01, &q).unwrap();
        assert_eq!(a, b);
        let c = sample_wiener_stream(7, 1, 50, 0.01, &q).unwrap();
        assert_ne!(a.increment(0), c.increment(0));
        assert!(sample_wiener(7, 0, 0.01, &q).is_err());
        assert!(sample_wiener(7, 10, 0.0, &q).is_err());
    }

    #[test]
    fn wiener_moments() {
        let q = CovarianceSpec::new(vec![2.0, 0.5, 0.1]).unwrap();
        let dt = 0.01;
        let n = 100_000;
        let path = sample_wiener(11, n, dt, &q).unwrap();
        for j in 0..3 {
            let re: Vec<f64> = (0..n).map(|k| path.increment(k)[j].re).collect();
            let im: Vec<f64> = (0..n).map(|k| path.increment(k)[j].im).collect();
            for xs in [&re, &im] {
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (q.q[j] * dt / n as f64).sqrt();
                assert!(mean.abs() < 4.0 * se, "shell {j} mean {mean}");
                assert!((var / (q.q[j] * dt) - 1.0).abs() < 0.05, "shell {j} var {var}");
            }
        }
    }

    #[test]
    fn coarsening_sums_increments() {
        let q = CovarianceSpec::new(vec![1.0; 3]).unwrap();
        let p = sample_wiener(3, 8, 0.125, &q).unwrap();
        let c = p.coarsen(4).unwrap();
        assert_eq!(c.steps, 2);
        let want: C64 = (0..4).map(|k| p.increment(k)[1]).sum();
        assert!((c.increment(0)[1] - want).norm() < 1e-15);
        assert!(p.coarsen(3).is_err());
    }

    #[test]
    fn control_energy_and_membership() {
        let q = CovarianceSpec::new(vec![2.0, 1.0, 1.0]).unwrap();
        let v = RkhsVector(vec![c(3.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let h = Control::constant(2.0, 4, v, &q).unwrap();
        // 1/2 * 9/2 * 2
        assert!((h.energy() - 4.5).abs() < 1e-14);
        assert!(h.in_s_m(9.0));
        assert!(!h.in_s_m(8.9));
        assert!((h.scaled(2.0).energy() - 18.0).abs() < 1e-13);
        let mut p = h.clone();
        assert!(p.project_s_m(4.0));
        assert!((2.0 * p.energy() - 4.0).abs() < 1e-12);
        assert!((h.norm_l2().powi(2) - 2.0 * h.energy()).abs() < 1e-12);
        assert_eq!(h.cell_at(0.0), 0);
        assert_eq!(h.cell_at(0.5), 1);
        assert_eq!(h.cell_at(2.0), 3);
        assert!((h.refined(3).energy() - h.energy()).abs() < 1e-12);
    }

    #[test]
    fn diffusion_json_round_trip() {
        let s = DiffusionSpec::saturated(vec![1.0, 0.5], 2.0).with_time(TimeModulation {
            amplitude: 0.5,
            exponent: 0.5,
        });
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DiffusionSpec>(&text).unwrap(), s);
        let bad = r#"{"family": {"kind": "constant_diagonal", "gains": [1.0], "extra": 1}}"#;
        assert!(serde_json::from_str::<DiffusionSpec>(bad).is_err());
        let bad = r#"{"family": {"kind": "constant_diagonal", "gains": [1.0]}, "extra": 1}"#;
        assert!(serde_json::from_str::<DiffusionSpec>(bad).is_err());
    }

    #[test]
    fn sigma_actions() {
        let u0 = ShellState::zeros(3);
        let e1 = ShellState::basis(3, 1).unwrap();
        let h1 = RkhsVector(e1.as_slice().to_vec());
        let s = DiffusionSpec::constant_diagonal(vec![1.0; 3]);
        assert_eq!(s.apply_sigma(0.3, &u0, &h1).unwrap(), e1);
        let s = DiffusionSpec::linear_diagonal(vec![1.0; 3], vec![1.0; 3]);
        assert_eq!(s.apply_sigma(0.0, &e1, &h1).unwrap().get(1), c(2.0, 0.0));
        let s = DiffusionSpec::saturated(vec![1.0; 3], 0.5);
        let h = RkhsVector(vec![c(1.0, 2.0), c(-3.0, 0.0), c(0.0, 5.0)]);
        assert_eq!(s.apply_sigma(0.0, &u0, &h).unwrap(), u0);
    }

    #[test]
    fn composition() {
        let sigma = DiffusionSpec::linear_diagonal(vec![1.0, 0.5, 0.2], vec![0.3, 0.1, 0.0]);
        let bar = DiffusionSpec::saturated(vec![1.0; 3], 2.0);
        assert_eq!(compose_sigma_nu(&sigma, &bar, 0.0).unwrap(), sigma);
        assert!(compose_sigma_nu(&sigma, &bar, -1e-3).is_err());
        let u = ShellState::from_vec(vec![c(0.3, -1.0), c(2.0, 0.1), c(-0.5, 0.5)]);
        let h = RkhsVector(vec![c(1.0, 1.0), c(0.2, -0.4), c(3.0, 0.0)]);
        let zero_bar = DiffusionSpec::zero(3);
        let one = compose_sigma_nu(&sigma, &zero_bar, 1.0).unwrap();
        assert_eq!(
            one.apply_sigma(0.2, &u, &h).unwrap(),
            sigma.apply_sigma(0.2, &u, &h).unwrap()
        );
        // distance to sigma shrinks like sqrt(nu)
        let base = sigma.apply_sigma(0.0, &u, &h).unwrap();
        let gap = |nu: f64| {
            let s = compose_sigma_nu(&sigma, &bar, nu).unwrap();
            s.apply_sigma(0.0, &u, &h).unwrap().sub(&base).max_abs()
        };
        assert!((gap(1e-2) / gap(1e-4) - 10.0).abs() < 1e-9);
        let m = model(3);
        let q = CovarianceSpec::new(vec![1.0, 0.5, 0.25]).unwrap();
        let comp = compose_sigma_nu(&sigma, &bar, 0.5).unwrap();
        let cc = comp.declared_constants(&m, &q, 1.0);
        let k_bar_0 = sigma
            .declared_constants(&m, &q, 1.0)
            .k_bar_0
            .max(bar.declared_constants(&m, &q, 1.0).k_bar_0);
        assert_eq!(cc.k_0, 4.0 * k_bar_0);
        assert_eq!(cc.k_tilde_0, 4.0 * k_bar_0);
    }

    #[test]
    fn conditions_constant_family_pass() {
        let m = model(5);
        let q = CovarianceSpec::power_law(&m, 1.0, 1.0).unwrap();
        let s = DiffusionSpec::constant_diagonal(vec![1.0; 5]);
        let r = verify_conditions(&s, &m, &q, 1.0, 200, &[0.01, 0.1], 1).unwrap();
        assert!(r.pass, "{:#?}", r.rows);
        for row in r
            .rows
            .iter()
            .filter(|r| r.condition.contains("ii") || r.condition.contains("lip"))
        {
            assert_eq!(row.empirical, 0.0, "{}", row.condition);
        }
    }

    #[test]
    fn conditions_detect_understated_constant() {
        let m = model(5);
        let q = CovarianceSpec::power_law(&m, 1.0, 0.5).unwrap();
        let s = DiffusionSpec::linear_diagonal(vec![0.5; 5], vec![1.0; 5]);
        let mut c = s.declared_constants(&m, &q, 1.0);
        let ok = verify_conditions(&s, &m, &q, 1.0, 500, &[0.01], 2).unwrap();
        assert!(ok.pass, "{:#?}", ok.rows);
        c.k_tilde_1 *= 0.01;
        let bad = verify_conditions(&s.clone().with_constants(c), &m, &q, 1.0, 500, &[0.01], 2).unwrap();
        assert!(!bad.pass);
        assert!(bad.rows.iter().any(|r| r.condition == "control.growth" && !r.pass));
    }

    #[test]
    fn conditions_saturated_lipschitz_below_derivative_bound() {
        let m = model(6);
        let q = CovarianceSpec::power_law(&m, 1.0, 0.75).unwrap();
        let gains = vec![1.0, 0.8, 0.6, 0.4, 0.2, 0.1];
        let s = DiffusionSpec::saturated(gains.clone(), 0.3).with_time(TimeModulation {
            amplitude: 0.5,
            exponent: 0.5,
        });
        let r = verify_conditions(&s, &m, &q, 1.0, 2000, &[0.01], 3).unwrap();
        assert!(r.pass, "{:#?}", r.rows);
        // oracle: |phi'| <= 1 so the Lipschitz constant is tau_max^2 max_n g_n^2 q_n
        let tau = 1.5f64;
        let oracle = tau * tau * gains.iter().zip(&q.q).map(|(g, q)| g * g * q).fold(0.0, f64::max);
        let lip = r.rows.iter().find(|r| r.condition == "sigma.lip").unwrap();
        assert!(lip.empirical <= oracle * (1.0 + 1e-12));
        assert!((lip.bound - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn conditions_composite() {
        let m = model(5);
        let q = CovarianceSpec::power_law(&m, 1.0, 1.0).unwrap();
        let s = DiffusionSpec::linear_diagonal(vec![1.0; 5], vec![0.5; 5]);
        let b = DiffusionSpec::saturated(vec![0.5; 5], 1.0);
        let comp = compose_sigma_nu(&s, &b, 0.1).unwrap();
        let r = verify_conditions(&comp, &m, &q, 1.0, 1000, &[0.001, 0.01, 0.1], 4).unwrap();
        assert!(r.pass, "{:#?}", r.rows.iter().filter(|r| !r.pass).collect::<Vec<_>>());
        assert!(r.rows.iter().any(|r| r.condition.starts_with("sigma_bar.")));
    }

    #[test]
    fn jacobian_transpose_matches_finite_differences() {
        let s = DiffusionSpec::linear_diagonal(vec![0.4, 1.0, 0.2], vec![0.7, 0.3, 1.1]);
        let u = [c(0.3, -0.8), c(1.2, 0.4), c(-0.5, 0.25)];
        let h = [c(1.0, 0.5), c(-0.2, 0.3), c(0.6, -1.0)];
        let p = [c(0.2, 0.1), c(-1.0, 0.4), c(0.3, 0.3)];
        let d = [c(0.5, -0.1), c(0.2, 0.9), c(-0.7, 0.4)];
        let mut g = [c(0.0, 0.0); 3];
        s.jacobian_transpose_add(0.0, &u, &h, &p, 1.0, &mut g);
        let f = |eps: f64| {
            let x: Vec<C64> = u.iter().zip(&d).map(|(a, b)| a + b * eps).collect();
            let mut o = [c(0.0, 0.0); 3];
            s.apply_add(0.0, &x, &h, 1.0, &mut o);
            crate::spectral::dot(&o, &p)
        };
        let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
        assert!((fd - crate::spectral::dot(&g, &d)).abs() < 1e-8);
    }
}
