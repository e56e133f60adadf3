//! Spin-boson reference machinery: the ohmic-family bath, its correlation
//! function and exponential fit, a dense HEOM integrator, a discretized-bath
//! exact-diagonalization oracle and the pure-dephasing closed form.
//!
//! The model is `H = H_s + Σ_j (p_j²/2 + ω_j² q_j²/2) − σ_z Σ_j c_j q_j` with
//! `H_s = ε σ_z + Ω σ_x` and spectral density
//! `J(ω) = (π/2) Σ_j c_j²/ω_j δ(ω − ω_j)`.

mod exact;
mod fit;
mod heom;

pub use exact::{
    discretize_bath, exact_diag_reference, exact_diag_reference_with, k0_projector, BathMode,
    ExactOptions,
};
pub use fit::{
    fit_exponentials, fit_exponentials_with, fit_samples, ExpFit, ExpTerm, FitOptions, RateStructure,
};
pub use heom::{heom_propagate, hierarchy_size, HeomConfig, Truncation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadOptions};
use crate::superop::{check_dt, two_level_hamiltonian, MapTrajectory, Op2, Superoperator, C64};

/// Ohmic-family spectral density `J(ω) = (π/2) ξ ω^s ω_c^{1−s} e^{−ω/ω_c}`
/// together with the bath inverse temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralDensity {
    pub xi: f64,
    pub s: f64,
    pub omega_c: f64,
    pub beta: f64,
}

impl SpectralDensity {
    pub fn new(xi: f64, s: f64, omega_c: f64, beta: f64) -> Result<Self> {
        let sd = SpectralDensity { xi, s, omega_c, beta };
        sd.validate()?;
        Ok(sd)
    }

    /// The spin-boson benchmark bath: ξ = 0.3, s = 1, ω_c = 5, β = 5.
    pub fn benchmark() -> Self {
        SpectralDensity { xi: 0.3, s: 1.0, omega_c: 5.0, beta: 5.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.xi.is_finite()
            && self.xi >= 0.0
            && self.s.is_finite()
            && self.s > 0.0
            && self.omega_c.is_finite()
            && self.omega_c > 0.0
            && self.beta.is_finite()
            && self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "spectral density needs xi >= 0, s > 0, omega_c > 0, beta > 0 (got {self:?})"
            )))
        }
    }

    /// `J(ω)` for `ω ≥ 0` without argument checks.
    fn eval(&self, w: f64) -> f64 {
        if w == 0.0 {
            return 0.0;
        }
        0.5 * std::f64::consts::PI
            * self.xi
            * w.powf(self.s)
            * self.omega_c.powf(1.0 - self.s)
            * (-w / self.omega_c).exp()
    }

    /// `J(ω) coth(βω/2)`, finite at ω → 0 for s ≥ 1.
    fn thermal(&self, w: f64) -> f64 {
        self.eval(w) / (0.5 * self.beta * w).tanh()
    }

    /// Upper integration limit beyond which `J` is negligible.
    fn omega_max(&self) -> f64 {
        self.omega_c * (60.0 + 5.0 * self.s)
    }
}

/// System Hamiltonian parameters, `H_s = ε σ_z + Ω σ_x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub epsilon: f64,
    pub omega: f64,
}

impl SystemSpec {
    pub fn new(epsilon: f64, omega: f64) -> Result<Self> {
        if !(epsilon.is_finite() && omega.is_finite()) {
            return Err(Error::validation("system parameters must be finite"));
        }
        Ok(SystemSpec { epsilon, omega })
    }

    /// ε = 0, Ω = −1.
    pub fn benchmark() -> Self {
        SystemSpec { epsilon: 0.0, omega: -1.0 }
    }

    pub fn hamiltonian(&self) -> Op2 {
        two_level_hamiltonian(self.epsilon, self.omega)
    }
}

/// Evaluates `J(w)`.
pub fn spectral_density(w: f64, sd: &SpectralDensity) -> Result<f64> {
    sd.validate()?;
    if !(w >= 0.0) || !w.is_finite() {
        return Err(Error::validation(format!("frequency must be finite and >= 0, got {w}")));
    }
    Ok(sd.eval(w))
}

fn quad_options(scale: f64, t: f64, sd: &SpectralDensity) -> QuadOptions {
    let panels = ((sd.omega_max() * t / std::f64::consts::PI).ceil() as usize).clamp(16, 200_000);
    QuadOptions {
        abs_tol: 1e-12 * scale.max(f64::MIN_POSITIVE),
        rel_tol: 1e-10,
        initial_panels: panels,
        max_panels: 400_000,
    }
}

/// `(1/π)∫ J(ω) coth(βω/2) dω`, the reorganization-free scale `Re C(0)`.
fn correlation_scale(sd: &SpectralDensity) -> Result<f64> {
    let opts = QuadOptions { initial_panels: 32, ..QuadOptions::default() };
    Ok(integrate(|w| sd.thermal(w), 0.0, sd.omega_max(), opts)? / std::f64::consts::PI)
}

/// Bath correlation function
/// `C(t) = (1/π)∫₀^∞ J(ω)[coth(βω/2) cos ωt − i sin ωt] dω`.
pub fn bath_correlation(t: f64, sd: &SpectralDensity) -> Result<C64> {
    sd.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::validation(format!("time must be finite and >= 0, got {t}")));
    }
    if sd.xi == 0.0 {
        return Ok(C64::new(0.0, 0.0));
    }
    let scale = correlation_scale(sd)?;
    correlation_with_scale(t, sd, scale)
}

pub(crate) fn bath_correlation_series(times: &[f64], sd: &SpectralDensity) -> Result<Vec<C64>> {
    sd.validate()?;
    if sd.xi == 0.0 {
        return Ok(vec![C64::new(0.0, 0.0); times.len()]);
    }
    let scale = correlation_scale(sd)?;
    times.iter().map(|&t| correlation_with_scale(t, sd, scale)).collect()
}

fn correlation_with_scale(t: f64, sd: &SpectralDensity, scale: f64) -> Result<C64> {
    let opts = quad_options(scale, t, sd);
    let pi = std::f64::consts::PI;
    let re = if t == 0.0 {
        scale * pi
    } else {
        integrate(|w| sd.thermal(w) * (w * t).cos(), 0.0, sd.omega_max(), opts)?
    };
    let im = if t == 0.0 {
        0.0
    } else {
        -integrate(|w| sd.eval(w) * (w * t).sin(), 0.0, sd.omega_max(), opts)?
    };
    Ok(C64::new(re / pi, im / pi))
}

/// Dephasing exponent `Γ(t) = (4/π)∫ J(ω) coth(βω/2) (1 − cos ωt)/ω² dω`.
pub fn dephasing_exponent(t: f64, sd: &SpectralDensity) -> Result<f64> {
    sd.validate()?;
    if sd.xi == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    let scale = correlation_scale(sd)? * t * t;
    let opts = quad_options(scale, t, sd);
    let v = integrate(
        |w| {
            let sn = (0.5 * w * t).sin();
            sd.thermal(w) * 2.0 * sn * sn / (w * w)
        },
        0.0,
        sd.omega_max(),
        opts,
    )?;
    Ok(4.0 / std::f64::consts::PI * v)
}

/// Dynamical maps of the Ω = 0 model: populations are frozen and the
/// coherence evolves as `ρ_01(t) = ρ_01(0) e^{−2iεt} e^{−Γ(t)}`.
pub fn pure_dephasing_analytic(
    sys: &SystemSpec,
    sd: &SpectralDensity,
    dt: f64,
    n_steps: usize,
) -> Result<MapTrajectory> {
    if sys.omega != 0.0 {
        return Err(Error::validation(format!(
            "pure dephasing needs Omega = 0, got Omega = {}",
            sys.omega
        )));
    }
    check_dt(dt)?;
    sd.validate()?;
    let maps = (0..=n_steps)
        .map(|n| {
            let t = n as f64 * dt;
            let gamma = dephasing_exponent(t, sd)?;
            Ok(dephasing_map(sys.epsilon, t, gamma))
        })
        .collect::<Result<Vec<_>>>()?;
    MapTrajectory::from_raw(dt, maps)
}

/// Diagonal superoperator for a coherence decay `e^{−Γ}` at time `t`.
pub(crate) fn dephasing_map(epsilon: f64, t: f64, gamma: f64) -> Superoperator {
    let decay = (-gamma).exp();
    let phase = C64::new(0.0, -2.0 * epsilon * t).exp();
    let mut m = Superoperator::zeros();
    m[(0, 0)] = C64::new(1.0, 0.0);
    m[(3, 3)] = C64::new(1.0, 0.0);
    m[(2, 2)] = phase * decay;
    m[(1, 1)] = phase.conj() * decay;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn spectral_density_examples() {
        let sd = SpectralDensity::benchmark();
        assert_eq!(spectral_density(0.0, &sd).unwrap(), 0.0);
        let v = spectral_density(5.0, &sd).unwrap();
        assert!((v - PI / 2.0 * 0.3 * 5.0 * (-1.0f64).exp()).abs() < 1e-14);
        // maximum at ω_c for s = 1
        let peak = spectral_density(5.0, &sd).unwrap();
        for w in [4.9, 4.99, 5.01, 5.1] {
            assert!(spectral_density(w, &sd).unwrap() < peak);
        }
        assert!(spectral_density(-1.0, &sd).is_err());
        assert!(SpectralDensity::new(0.3, 1.0, 0.0, 5.0).is_err());
    }

    /// Series form of C(t) for s = 1 obtained from coth = 1 + 2Σ e^{−nβω}.
    fn ohmic_series(t: f64, sd: &SpectralDensity) -> C64 {
        let f = |a: f64| (a * a - t * t) / (a * a + t * t).powi(2);
        let a0 = 1.0 / sd.omega_c;
        let n_terms = 20_000;
        let mut sum = f(a0);
        for n in 1..=n_terms {
            sum += 2.0 * f(a0 + n as f64 * sd.beta);
        }
        // tail Σ_{n>N} f(a0 + nβ) ≈ ∫_{N+1/2}^∞ dn / (a0 + nβ)²
        sum += 2.0 / (sd.beta * (a0 + (n_terms as f64 + 0.5) * sd.beta));
        let re = 0.5 * sd.xi * sum;
        let im = -sd.xi * sd.omega_c.powi(3) * t / (1.0 + (sd.omega_c * t).powi(2)).powi(2);
        C64::new(re, im)
    }

    #[test]
    fn correlation_matches_series_oracle() {
        let sd = SpectralDensity::benchmark();
        let c0 = bath_correlation(0.0, &sd).unwrap();
        assert_eq!(c0.im, 0.0);
        for t in [0.0, 0.05, 0.3, 1.0, 2.5, 7.0] {
            let c = bath_correlation(t, &sd).unwrap();
            let r = ohmic_series(t, &sd);
            assert!((c - r).norm() < 1e-8 * c0.norm(), "t={t}: {c} vs {r}");
        }
        let zero = SpectralDensity { xi: 0.0, ..sd };
        assert_eq!(bath_correlation(1.0, &zero).unwrap(), C64::new(0.0, 0.0));
    }

    #[test]
    fn correlation_self_convergent() {
        let sd = SpectralDensity { xi: 0.2, s: 0.7, omega_c: 3.0, beta: 2.0 };
        let coarse = bath_correlation(0.0, &sd).unwrap().re;
        let opts = QuadOptions { initial_panels: 512, rel_tol: 1e-13, ..QuadOptions::default() };
        let fine = integrate(|w| sd.thermal(w), 0.0, sd.omega_max(), opts).unwrap() / PI;
        assert!((coarse - fine).abs() < 1e-8 * fine.abs());
    }

    #[test]
    fn dephasing_exponent_is_double_integral_of_re_c() {
        let sd = SpectralDensity::benchmark();
        assert_eq!(dephasing_exponent(0.0, &sd).unwrap(), 0.0);
        // Γ(t) = 4 ∫₀^t ∫₀^s Re C(u) du ds = 4 ∫₀^t (t − u) Re C(u) du
        let t = 1.5;
        let opts = QuadOptions { rel_tol: 1e-9, ..QuadOptions::default() };
        let v = integrate(|u| (t - u) * ohmic_series(u, &sd).re, 0.0, t, opts).unwrap();
        let g = dephasing_exponent(t, &sd).unwrap();
        assert!((g - 4.0 * v).abs() < 1e-7 * g, "{g} vs {}", 4.0 * v);
    }

    #[test]
    fn pure_dephasing_limits() {
        let sys = SystemSpec::new(0.7, 0.0).unwrap();
        let free = SpectralDensity { xi: 0.0, ..SpectralDensity::benchmark() };
        let traj = pure_dephasing_analytic(&sys, &free, 0.1, 20).unwrap();
        let l = crate::superop::liouvillian_generator(&sys.hamiltonian()).unwrap();
        for (n, m) in traj.maps().iter().enumerate() {
            let exact = crate::superop::expm(&l, n as f64 * 0.1);
            assert!(crate::superop::max_abs_diff(m, &exact) < 1e-12);
        }
        let bad = SystemSpec::new(0.0, 1.0).unwrap();
        assert!(pure_dephasing_analytic(&bad, &free, 0.1, 5).is_err());
        let traj = pure_dephasing_analytic(&sys, &SpectralDensity::benchmark(), 0.1, 10).unwrap();
        assert_eq!(traj.maps()[0], Superoperator::identity());
        assert!(traj.maps()[10][(2, 2)].norm() < traj.maps()[5][(2, 2)].norm());
    }
}
