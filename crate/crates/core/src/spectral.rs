//! Shell-state algebra: wavenumbers, fractional powers of the diagonal
//! operator `A`, the `H`/`V`/`H_alpha` norm ladder and the GOY and Sabra
//! bilinear operators.
//!
//! States are stored 0-based internally; the public accessors use the
//! shell index `n = 1..=m`. Indices outside `1..=m` are exact zeros in every
//! evaluation of `B` (Galerkin truncation), which keeps the antisymmetry
//! identity exact at any truncation level.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type C64 = Complex64;

const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Goy,
    Sabra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub variant: Variant,
    pub a: f64,
    pub b: f64,
    pub mu: f64,
    pub k0: f64,
    pub m: usize,
}

impl ModelParams {
    pub fn new(variant: Variant, a: f64, b: f64, mu: f64, k0: f64, m: usize) -> Result<Self> {
        let p = ModelParams {
            variant,
            a,
            b,
            mu,
            k0,
            m,
        };
        p.validate()?;
        Ok(p)
    }

    /// GOY model with `b` chosen so that the enstrophy flux vanishes.
    pub fn goy_enstrophy(a: f64, mu: f64, k0: f64, m: usize) -> Result<Self> {
        let b = -a * (1.0 + mu * mu) / (mu * mu);
        Self::new(Variant::Goy, a, b, mu, k0, m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 1.0) {
            return Err(Error::config("model.mu", format!("mu must be > 1, got {}", self.mu)));
        }
        if !(self.k0.is_finite() && self.k0 > 0.0) {
            return Err(Error::config("model.k0", format!("k0 must be > 0, got {}", self.k0)));
        }
        if self.m < 3 {
            return Err(Error::config(
                "model.m",
                format!("truncation m must be >= 3, got {}", self.m),
            ));
        }
        if !self.a.is_finite() {
            return Err(Error::config("model.a", "a must be finite"));
        }
        if !self.b.is_finite() {
            return Err(Error::config("model.b", "b must be finite"));
        }
        Ok(())
    }

    /// `a(1+mu^2) + b mu^2`, zero exactly when the enstrophy flux vanishes.
    pub fn enstrophy_defect(&self) -> f64 {
        let mu2 = self.mu * self.mu;
        self.a * (1.0 + mu2) + self.b * mu2
    }

    pub fn enstrophy_exact(&self) -> bool {
        let mu2 = self.mu * self.mu;
        let scale = self.a.abs() * (1.0 + mu2) + self.b.abs() * mu2;
        self.enstrophy_defect().abs() <= 1e-14 * scale
    }

    /// `k_n = k0 mu^n` for `1 <= n <= m + 2`.
    pub fn wavenumber(&self, n: usize) -> Result<f64> {
        if n == 0 || n > self.m + 2 {
            return Err(Error::domain(format!("shell index {n} outside 1..={}", self.m + 2)));
        }
        Ok(self.k0 * self.mu.powi(n as i32))
    }
}

/// Truncated complex shell vector `(u_1, ..., u_m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShellState(Vec<C64>);

impl ShellState {
    pub fn zeros(m: usize) -> Self {
        ShellState(vec![C64::new(0.0, 0.0); m])
    }

    pub fn from_vec(c: Vec<C64>) -> Self {
        ShellState(c)
    }

    /// Canonical basis vector `e_n` (1-based).
    pub fn basis(m: usize, n: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(Error::domain(format!("basis index {n} outside 1..={m}")));
        }
        let mut s = Self::zeros(m);
        s.0[n - 1] = C64::new(1.0, 0.0);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Component `u_n`, 1-based; zero outside `1..=m`.
    pub fn get(&self, n: isize) -> C64 {
        if n >= 1 && (n as usize) <= self.0.len() {
            self.0[n as usize - 1]
        } else {
            C64::new(0.0, 0.0)
        }
    }

    pub fn set(&mut self, n: usize, value: C64) {
        self.0[n - 1] = value;
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        ShellState(self.0.iter().map(|z| z * s).collect())
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &ShellState) -> Self {
        ShellState(self.0.iter().zip(&other.0).map(|(a, b)| a + b * s).collect())
    }

    pub fn sub(&self, other: &ShellState) -> Self {
        self.axpy(-1.0, other)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Real inner product `Re sum u_n conj(v_n)` on raw slices.
pub fn dot(u: &[C64], v: &[C64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
}

#[derive(Clone, Copy, Debug)]
enum Coef {
    A,
    B,
}

/// One of the four monomials of `[B(u,v)]_n = -i sum_t c_t k_{n+s_t} U V`.
#[derive(Clone, Copy, Debug)]
struct Term {
    coef: Coef,
    sign: f64,
    k_shift: isize,
    du: isize,
    conj_u: bool,
    dv: isize,
    conj_v: bool,
}

const fn term(coef: Coef, sign: f64, k_shift: isize, du: isize, conj_u: bool, dv: isize, conj_v: bool) -> Term {
    Term {
        coef,
        sign,
        k_shift,
        du,
        conj_u,
        dv,
        conj_v,
    }
}

const GOY_TERMS: [Term; 4] = [
    term(Coef::A, 1.0, 1, 1, true, 2, true),
    term(Coef::B, 1.0, 0, -1, true, 1, true),
    term(Coef::A, -1.0, -1, -1, true, -2, true),
    term(Coef::B, -1.0, -1, -2, true, -1, true),
];

const SABRA_TERMS: [Term; 4] = [
    term(Coef::A, 1.0, 1, 1, true, 2, false),
    term(Coef::B, 1.0, 0, -1, true, 1, false),
    term(Coef::A, 1.0, -1, -1, false, -2, false),
    term(Coef::B, 1.0, -1, -2, false, -1, false),
];

#[inline]
fn cj(z: C64, conj: bool) -> C64 {
    if conj {
        z.conj()
    } else {
        z
    }
}

#[inline]
fn shifted(u: &[C64], n: usize, d: isize) -> Option<C64> {
    let j = n as isize + d;
    if j >= 1 && (j as usize) <= u.len() {
        Some(u[j as usize - 1])
    } else {
        None
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NormLadder {
    pub h_norm: f64,
    pub v_norm: f64,
    pub calh_norm: f64,
    pub alpha: f64,
    pub alpha_norm: f64,
}

/// Residuals of the exact algebraic identities of `B`, each with the
/// magnitude of the largest contributing term for relative comparison.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IdentityReport {
    /// `<B(u,v),w> + (B(u,w),v)`
    pub antisymmetry: f64,
    pub antisymmetry_scale: f64,
    /// `(B(u,u),u)`
    pub energy: f64,
    pub energy_scale: f64,
    /// `(B(u,u),Au)`
    pub enstrophy: f64,
    pub enstrophy_scale: f64,
    /// `||B(u,v)|| / (||u|| ||v||)`
    pub operator_ratio: f64,
}

fn rel(r: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        r.abs() / scale
    } else {
        r.abs()
    }
}

impl IdentityReport {
    pub fn antisymmetry_rel(&self) -> f64 {
        rel(self.antisymmetry, self.antisymmetry_scale)
    }
    pub fn energy_rel(&self) -> f64 {
        rel(self.energy, self.energy_scale)
    }
    pub fn enstrophy_rel(&self) -> f64 {
        rel(self.enstrophy, self.enstrophy_scale)
    }
}

/// A `ModelParams` with its wavenumber table and the per-shell coefficients
/// of the bilinear form precomputed.
#[derive(Clone, Debug)]
pub struct ShellModel {
    params: ModelParams,
    /// `k[n] = k0 mu^n` for `n = 0..=m+2`.
    k: Vec<f64>,
    terms: [Term; 4],
    /// `coef[t][n-1] = sign_t c_t k_{n+s_t}`.
    coef: [Vec<f64>; 4],
}

impl ShellModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let m = params.m;
        let k: Vec<f64> = (0..=m + 2).map(|n| params.k0 * params.mu.powi(n as i32)).collect();
        let terms = match params.variant {
            Variant::Goy => GOY_TERMS,
            Variant::Sabra => SABRA_TERMS,
        };
        let coef = terms.map(|t| {
            let c = match t.coef {
                Coef::A => params.a,
                Coef::B => params.b,
            };
            (1..=m)
                .map(|n| {
                    let kn = (n as isize + t.k_shift).max(0) as usize;
                    t.sign * c * k[kn]
                })
                .collect()
        });
        Ok(ShellModel { params, k, terms, coef })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn m(&self) -> usize {
        self.params.m
    }

    /// True when `a = b = 0`, i.e. `B` vanishes identically.
    pub fn is_linear(&self) -> bool {
        self.params.a == 0.0 && self.params.b == 0.0
    }

    /// `k_n` for `0 <= n <= m + 2` without range checks beyond the table.
    pub fn k(&self, n: usize) -> f64 {
        self.k[n]
    }

    pub fn wavenumber(&self, n: usize) -> Result<f64> {
        self.params.wavenumber(n)
    }

    fn check(&self, u: &ShellState) -> Result<()> {
        check_dim(self.m(), u.len())
    }

    /// `(A^alpha u)_n = k_n^{2 alpha} u_n`.
    pub fn apply_fractional_a(&self, u: &ShellState, alpha: f64) -> Result<ShellState> {
        self.check(u)?;
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::domain(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(ShellState(
            u.0.iter()
                .enumerate()
                .map(|(i, z)| z * self.k[i + 1].powf(2.0 * alpha))
                .collect(),
        ))
    }

    /// `||u||_alpha = |A^alpha u|`. Values of alpha above 1/2 are accepted as
    /// a probe; the large-deviation routines restrict themselves to `[0, 1/4]`.
    pub fn norm_alpha(&self, u: &ShellState, alpha: f64) -> Result<f64> {
        self.check(u)?;
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::domain(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(self.norm_alpha_raw(u.as_slice(), alpha))
    }

    pub(crate) fn norm_alpha_raw(&self, u: &[C64], alpha: f64) -> f64 {
        let e = 4.0 * alpha;
        u.iter()
            .enumerate()
            .map(|(i, z)| self.k[i + 1].powf(e) * z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn weighted_sq(&self, u: &[C64], power: i32) -> f64 {
        u.iter()
            .enumerate()
            .map(|(i, z)| self.k[i + 1].powi(power) * z.norm_sqr())
            .sum()
    }

    /// `|u|`
    pub fn h_norm(&self, u: &ShellState) -> f64 {
        self.weighted_sq(u.as_slice(), 0).sqrt()
    }

    /// `||u|| = |A^{1/2} u|`
    pub fn v_norm(&self, u: &ShellState) -> f64 {
        self.weighted_sq(u.as_slice(), 2).sqrt()
    }

    /// `||u||_H = ||u||_{1/4}`
    pub fn calh_norm(&self, u: &ShellState) -> f64 {
        self.weighted_sq(u.as_slice(), 1).sqrt()
    }

    /// `|Au|`
    pub fn a_norm(&self, u: &ShellState) -> f64 {
        self.weighted_sq(u.as_slice(), 4).sqrt()
    }

    pub fn ladder(&self, u: &ShellState, alpha: f64) -> Result<NormLadder> {
        Ok(NormLadder {
            h_norm: self.h_norm(u),
            v_norm: self.v_norm(u),
            calh_norm: self.calh_norm(u),
            alpha,
            alpha_norm: self.norm_alpha(u, alpha)?,
        })
    }

    /// `(u, v) = Re sum u_n conj(v_n)`.
    pub fn inner_h(&self, u: &ShellState, v: &ShellState) -> Result<f64> {
        self.check(u)?;
        self.check(v)?;
        Ok(dot(u.as_slice(), v.as_slice()))
    }

    /// The `V`-`V'` duality `<u, w>`; same arithmetic as [`Self::inner_h`] at
    /// finite truncation.
    pub fn duality_pair(&self, u: &ShellState, w: &ShellState) -> Result<f64> {
        self.inner_h(u, w)
    }

    pub fn bilinear(&self, u: &ShellState, v: &ShellState) -> Result<ShellState> {
        self.check(u)?;
        self.check(v)?;
        let mut out = ShellState::zeros(self.m());
        self.bilinear_into(u.as_slice(), v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// `out = B(u, v)` on raw slices of length `m`.
    pub fn bilinear_into(&self, u: &[C64], v: &[C64], out: &mut [C64]) {
        for n in 1..=u.len() {
            let mut acc = C64::new(0.0, 0.0);
            for (t, c) in self.terms.iter().zip(&self.coef) {
                if let (Some(a), Some(b)) = (shifted(u, n, t.du), shifted(v, n, t.dv)) {
                    acc += c[n - 1] * cj(a, t.conj_u) * cj(b, t.conj_v);
                }
            }
            out[n - 1] = -I * acc;
        }
    }

    /// `g` with `<B(d, v), p> = <d, g>` for all `d` (transpose in the first slot).
    pub fn bilinear_transpose_first_into(&self, v: &[C64], p: &[C64], g: &mut [C64]) {
        g.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for n in 1..=p.len() {
            let pc = p[n - 1].conj();
            for (t, c) in self.terms.iter().zip(&self.coef) {
                let j = n as isize + t.du;
                if j < 1 || j as usize > g.len() {
                    continue;
                }
                if let Some(b) = shifted(v, n, t.dv) {
                    let w = -I * c[n - 1] * cj(b, t.conj_v) * pc;
                    g[j as usize - 1] += cj(w, !t.conj_u);
                }
            }
        }
    }

    /// `g` with `<B(u, d), p> = <d, g>` for all `d` (transpose in the second slot).
    pub fn bilinear_transpose_second_into(&self, u: &[C64], p: &[C64], g: &mut [C64]) {
        g.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for n in 1..=p.len() {
            let pc = p[n - 1].conj();
            for (t, c) in self.terms.iter().zip(&self.coef) {
                let j = n as isize + t.dv;
                if j < 1 || j as usize > g.len() {
                    continue;
                }
                if let Some(a) = shifted(u, n, t.du) {
                    let w = -I * c[n - 1] * cj(a, t.conj_u) * pc;
                    g[j as usize - 1] += cj(w, !t.conj_v);
                }
            }
        }
    }

    /// Magnitude bound `sum_n |B(u,v)_n| |w_n|` used to scale residuals.
    fn abs_pairing(&self, u: &[C64], v: &[C64], w: &[C64], weight: i32) -> f64 {
        let mut s = 0.0;
        for n in 1..=u.len() {
            let mut acc = 0.0;
            for (t, c) in self.terms.iter().zip(&self.coef) {
                if let (Some(a), Some(b)) = (shifted(u, n, t.du), shifted(v, n, t.dv)) {
                    acc += (c[n - 1] * a.norm() * b.norm()).abs();
                }
            }
            s += acc * self.k[n].powi(weight) * w[n - 1].norm();
        }
        s
    }

    pub fn identity_report(&self, u: &ShellState, v: &ShellState, w: &ShellState) -> Result<IdentityReport> {
        self.check(u)?;
        self.check(v)?;
        self.check(w)?;
        let (us, vs, ws) = (u.as_slice(), v.as_slice(), w.as_slice());
        let buv = self.bilinear(u, v)?;
        let buw = self.bilinear(u, w)?;
        let buu = self.bilinear(u, u)?;
        let au = self.apply_fractional_a(u, 1.0)?;
        let uv_norms = self.v_norm(u) * self.v_norm(v);
        Ok(IdentityReport {
            antisymmetry: dot(buv.as_slice(), ws) + dot(buw.as_slice(), vs),
            antisymmetry_scale: self.abs_pairing(us, vs, ws, 0).max(self.abs_pairing(us, ws, vs, 0)),
            energy: dot(buu.as_slice(), us),
            energy_scale: self.abs_pairing(us, us, us, 0),
            enstrophy: dot(buu.as_slice(), au.as_slice()),
            enstrophy_scale: self.abs_pairing(us, us, us, 2),
            operator_ratio: if uv_norms > 0.0 {
                self.v_norm(&buv) / uv_norms
            } else {
                0.0
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn goy(a: f64, b: f64, m: usize) -> ShellModel {
        ShellModel::new(ModelParams::new(Variant::Goy, a, b, 2.0, 1.0, m).unwrap()).unwrap()
    }

    fn sabra(a: f64, b: f64, m: usize) -> ShellModel {
        ShellModel::new(ModelParams::new(Variant::Sabra, a, b, 2.0, 1.0, m).unwrap()).unwrap()
    }

    #[test]
    fn wavenumbers() {
        let p = ModelParams::new(Variant::Goy, 1.0, -1.25, 2.0, 1.0, 10).unwrap();
        assert_eq!(p.wavenumber(3).unwrap(), 8.0);
        assert_eq!(p.wavenumber(10).unwrap(), 1024.0);
        assert_eq!(p.wavenumber(12).unwrap(), 4096.0);
        assert!(p.wavenumber(0).is_err());
        assert!(p.wavenumber(13).is_err());
        let p = ModelParams::new(Variant::Goy, 1.0, -1.25, 2.0, 0.5, 4).unwrap();
        assert_eq!(p.wavenumber(1).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(ModelParams::new(Variant::Goy, 1.0, 0.0, 1.0, 1.0, 8).is_err());
        assert!(ModelParams::new(Variant::Goy, 1.0, 0.0, 2.0, 0.0, 8).is_err());
        assert!(ModelParams::new(Variant::Goy, 1.0, 0.0, 2.0, 1.0, 2).is_err());
        match ModelParams::new(Variant::Goy, 1.0, 0.0, 0.5, 1.0, 8) {
            Err(Error::Config { pointer, .. }) => assert_eq!(pointer, "model.mu"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn enstrophy_flag() {
        assert!(ModelParams::new(Variant::Goy, 1.0, -1.25, 2.0, 1.0, 8)
            .unwrap()
            .enstrophy_exact());
        assert!(!ModelParams::new(Variant::Goy, 1.0, 0.0, 2.0, 1.0, 8)
            .unwrap()
            .enstrophy_exact());
        assert!(ModelParams::goy_enstrophy(1.0, 2.0, 1.0, 8).unwrap().enstrophy_exact());
    }

    #[test]
    fn fractional_powers() {
        let s = goy(1.0, -1.25, 5);
        let e2 = ShellState::basis(5, 2).unwrap();
        let a = s.apply_fractional_a(&e2, 1.0).unwrap();
        assert_eq!(a.get(2), c(16.0, 0.0));
        assert!((1..=5).filter(|&n| n != 2).all(|n| a.get(n) == c(0.0, 0.0)));
        let e3 = ShellState::basis(5, 3).unwrap();
        assert_eq!(s.apply_fractional_a(&e3, 0.5).unwrap().get(3), c(8.0, 0.0));
        let u = ShellState::from_vec(vec![c(1.0, 2.0), c(-3.0, 0.5), c(0.0, 1.0), c(2.0, 2.0), c(0.1, 0.0)]);
        assert_eq!(s.apply_fractional_a(&u, 0.0).unwrap(), u);
        assert!(s.apply_fractional_a(&u, -0.1).is_err());
    }

    #[test]
    fn norms() {
        let s = goy(1.0, -1.25, 6);
        for n in 1..=6 {
            let e = ShellState::basis(6, n).unwrap();
            for alpha in [0.0, 0.1, 0.25, 0.5] {
                let want = s.k(n).powf(2.0 * alpha);
                assert!((s.norm_alpha(&e, alpha).unwrap() - want).abs() <= 1e-14 * want);
            }
        }
        let mut u = ShellState::zeros(6);
        u.set(1, c(3.0, 4.0));
        assert_eq!(s.norm_alpha(&u, 0.0).unwrap(), 5.0);
        let ladder = s.ladder(&u, 0.0).unwrap();
        assert_eq!(ladder.h_norm, 5.0);
        assert_eq!(s.norm_alpha(&u, 0.5).unwrap(), s.v_norm(&u));
    }

    #[test]
    fn inner_products() {
        let s = goy(1.0, -1.25, 4);
        let e1 = ShellState::basis(4, 1).unwrap();
        let e2 = ShellState::basis(4, 2).unwrap();
        assert_eq!(s.inner_h(&e1, &e1).unwrap(), 1.0);
        assert_eq!(s.inner_h(&e1, &e2).unwrap(), 0.0);
        let mut u = ShellState::zeros(4);
        u.set(1, c(0.0, 1.0));
        assert_eq!(s.inner_h(&u, &e1).unwrap(), 0.0);
        assert_eq!(s.duality_pair(&e1, &e1).unwrap(), 1.0);
        assert!(matches!(
            s.inner_h(&e1, &ShellState::zeros(5)),
            Err(Error::Dimension { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn goy_single_interaction() {
        // only the fourth GOY monomial couples u_1 and v_2: [B]_3 = i b k_2
        let b = 0.7;
        let s = goy(1.3, b, 6);
        let out = s
            .bilinear(&ShellState::basis(6, 1).unwrap(), &ShellState::basis(6, 2).unwrap())
            .unwrap();
        for n in 1..=6 {
            let want = if n == 3 { c(0.0, 4.0 * b) } else { c(0.0, 0.0) };
            assert!((out.get(n) - want).norm() < 1e-15, "n={n}");
        }
        let s = goy(1.0, 1.0, 6);
        let out = s
            .bilinear(&ShellState::basis(6, 1).unwrap(), &ShellState::basis(6, 2).unwrap())
            .unwrap();
        assert_eq!(s.duality_pair(&out, &ShellState::basis(6, 3).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn sabra_single_interaction() {
        let b = 0.7;
        let s = sabra(1.3, b, 6);
        let out = s
            .bilinear(&ShellState::basis(6, 1).unwrap(), &ShellState::basis(6, 2).unwrap())
            .unwrap();
        for n in 1..=6 {
            let want = if n == 3 { c(0.0, -4.0 * b) } else { c(0.0, 0.0) };
            assert!((out.get(n) - want).norm() < 1e-15, "n={n}");
        }
    }

    #[test]
    fn zero_first_argument() {
        let s = sabra(1.0, -1.25, 5);
        let v = ShellState::from_vec(vec![c(1.0, 1.0); 5]);
        let out = s.bilinear(&ShellState::zeros(5), &v).unwrap();
        assert!(out.as_slice().iter().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn enstrophy_only_if_witness() {
        // a real state makes (B(u,u),Au) vanish trivially, so the witness
        // carries a phase on the third shell
        let s = goy(1.0, 0.0, 3);
        let u = ShellState::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0), c(0.0, 1.0)]);
        let r = s.identity_report(&u, &u, &u).unwrap();
        // B_1 = -4, B_3 = 4i, Au = (4, 16, 64i): Re(-16 + 4i * conj(64i)) = 240
        assert!((r.enstrophy - 240.0).abs() < 1e-12, "{}", r.enstrophy);
        assert!(r.energy.abs() < 1e-13);
    }

    #[test]
    fn degenerate_m_rejected() {
        assert!(ModelParams::new(Variant::Sabra, 1.0, 0.0, 2.0, 1.0, 2).is_err());
    }
}
