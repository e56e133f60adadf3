//! Exact dynamics of a finite harmonic bath.
//!
//! The continuous bath is replaced by `n` oscillators at the midpoints of a
//! logarithmic grid of cells spanning `[ω_c/100, 10 ω_c]`. Each oscillator
//! carries the weight of `J(ω)/ω` over its cell,
//! `c_j² = (2/π) ω_j² ∫_cell J(ω)/ω dω`, with the first cell extended down to
//! zero, so `Σ c_j²/ω_j² = (2/π)∫₀^{10ω_c} J(ω)/ω dω` holds exactly. Each
//! oscillator lives in a truncated Fock space and starts in its Gibbs state.
//!
//! For `Ω = 0` the Hamiltonian is block diagonal in `σ_z` and the coherence
//! factorizes into single-mode overlaps, so many modes are affordable. For
//! `Ω ≠ 0` the full tensor-product space is diagonalized.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{dephasing_map, SpectralDensity, SystemSpec};
use crate::error::{Error, Result};
use crate::quadrature::{integrate, QuadOptions};
use crate::superop::{check_dt, MapTrajectory, Superoperator, C64};

/// One discretized bath oscillator with frequency `omega` and coupling `coupling`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BathMode {
    pub omega: f64,
    pub coupling: f64,
}

/// Size limits for the exact references.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactOptions {
    /// Largest system ⊗ bath Hilbert dimension for the full-space solver.
    pub max_dimension: usize,
    /// Largest per-mode Fock cutoff chosen from thermal occupancy.
    pub max_mode_cutoff: usize,
    /// Thermal population allowed above the per-mode cutoff.
    pub thermal_tail: f64,
}

impl Default for ExactOptions {
    fn default() -> Self {
        ExactOptions { max_dimension: 1024, max_mode_cutoff: 600, thermal_tail: 1e-12 }
    }
}

/// Discretizes `J(ω)` into `n_modes` oscillators (see the module docs).
pub fn discretize_bath(sd: &SpectralDensity, n_modes: usize) -> Result<Vec<BathMode>> {
    sd.validate()?;
    if n_modes == 0 {
        return Ok(Vec::new());
    }
    let lo = 0.01 * sd.omega_c;
    let hi = 10.0 * sd.omega_c;
    let du = (hi / lo).ln() / n_modes as f64;
    let opts = QuadOptions { rel_tol: 1e-12, ..QuadOptions::default() };
    (0..n_modes)
        .map(|j| {
            let w = lo * ((j as f64 + 0.5) * du).exp();
            // the first cell also absorbs [0, lo]
            let a = if j == 0 { 0.0 } else { lo * (j as f64 * du).exp() };
            let b = lo * ((j + 1) as f64 * du).exp();
            let weight = integrate(|x| if x > 0.0 { sd.eval(x) / x } else { 0.0 }, a, b, opts)?;
            let c2 = 2.0 / std::f64::consts::PI * w * w * weight;
            Ok(BathMode { omega: w, coupling: c2.sqrt() })
        })
        .collect()
}

/// Truncated single-mode operators in the Fock basis.
struct ModeOps {
    /// `ω n` on the diagonal
    energy: Vec<f64>,
    /// position operator, tridiagonal
    q: DMatrix<f64>,
    /// Gibbs populations
    pops: Vec<f64>,
}

fn mode_ops(mode: &BathMode, beta: f64, d: usize) -> ModeOps {
    let energy: Vec<f64> = (0..d).map(|n| mode.omega * n as f64).collect();
    let mut q = DMatrix::zeros(d, d);
    let f = 1.0 / (2.0 * mode.omega).sqrt();
    for n in 0..d - 1 {
        let v = ((n + 1) as f64).sqrt() * f;
        q[(n, n + 1)] = v;
        q[(n + 1, n)] = v;
    }
    let mut pops: Vec<f64> = energy.iter().map(|e| (-beta * e).exp()).collect();
    let z: f64 = pops.iter().sum();
    pops.iter_mut().for_each(|p| *p /= z);
    ModeOps { energy, q, pops }
}

/// Fock cutoff covering the thermal occupation and the coupling-induced shift.
fn thermal_cutoff(mode: &BathMode, beta: f64, floor: usize, opts: &ExactOptions) -> Result<usize> {
    let thermal = (-opts.thermal_tail.ln() / (beta * mode.omega)).ceil();
    let shift = mode.coupling / (2.0f64.sqrt() * mode.omega.powf(1.5));
    let margin = (4.0 * shift * shift + 8.0 * shift).ceil() + 4.0;
    let need = thermal + margin;
    if !need.is_finite() || need > opts.max_mode_cutoff as f64 {
        return Err(Error::OverBudget {
            what: "Fock states for one bath mode",
            size: if need.is_finite() { need as usize } else { usize::MAX },
            budget: opts.max_mode_cutoff,
        });
    }
    Ok((need as usize).max(floor))
}

fn check_cutoff(fock_cutoff: usize) -> Result<()> {
    if fock_cutoff < 2 {
        return Err(Error::validation(format!("Fock cutoff must be at least 2, got {fock_cutoff}")));
    }
    Ok(())
}

/// Dynamical maps of the system coupled to a discretized bath.
pub fn exact_diag_reference(
    sys: &SystemSpec,
    sd: &SpectralDensity,
    n_modes: usize,
    fock_cutoff: usize,
    dt: f64,
    n_steps: usize,
) -> Result<MapTrajectory> {
    exact_diag_reference_with(sys, sd, n_modes, fock_cutoff, dt, n_steps, &ExactOptions::default())
}

/// As [`exact_diag_reference`] with explicit size limits. For `Ω = 0` each
/// mode uses `max(fock_cutoff, thermal cutoff)` Fock states; otherwise every
/// mode uses exactly `fock_cutoff`.
pub fn exact_diag_reference_with(
    sys: &SystemSpec,
    sd: &SpectralDensity,
    n_modes: usize,
    fock_cutoff: usize,
    dt: f64,
    n_steps: usize,
    opts: &ExactOptions,
) -> Result<MapTrajectory> {
    check_dt(dt)?;
    check_cutoff(fock_cutoff)?;
    let modes = discretize_bath(sd, n_modes)?;
    if sys.omega == 0.0 {
        factorized(sys, sd, &modes, fock_cutoff, dt, n_steps, opts)
    } else {
        full_space(sys, sd, &modes, fock_cutoff, dt, n_steps, opts)
    }
}

fn factorized(
    sys: &SystemSpec,
    sd: &SpectralDensity,
    modes: &[BathMode],
    fock_cutoff: usize,
    dt: f64,
    n_steps: usize,
    opts: &ExactOptions,
) -> Result<MapTrajectory> {
    let mut chi = vec![C64::new(1.0, 0.0); n_steps + 1];
    for mode in modes {
        let d = thermal_cutoff(mode, sd.beta, fock_cutoff, opts)?;
        let ops = mode_ops(mode, sd.beta, d);
        // branch Hamiltonians h ∓ c q for σ_z = ±1
        let branch = |sign: f64| {
            let mut h = &ops.q * (-sign * mode.coupling);
            for n in 0..d {
                h[(n, n)] += ops.energy[n];
            }
            SymmetricEigen::new(h)
        };
        let up = branch(1.0);
        let down = branch(-1.0);
        // χ(t) = Tr[ρ_B e^{iH_1 t} e^{−iH_0 t}] = Σ_ab e^{iλ1_a t} M_ab e^{−iλ0_b t} P_ba
        let m = down.eigenvectors.transpose() * &up.eigenvectors;
        let rho = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ops.pops.clone()));
        let p = up.eigenvectors.transpose() * rho * &down.eigenvectors;
        let q = m.component_mul(&p.transpose());
        for (n, c) in chi.iter_mut().enumerate() {
            let t = n as f64 * dt;
            let u: Vec<C64> = down.eigenvalues.iter().map(|l| C64::new(0.0, l * t).exp()).collect();
            let v: Vec<C64> = up.eigenvalues.iter().map(|l| C64::new(0.0, -l * t).exp()).collect();
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..d {
                let mut row = C64::new(0.0, 0.0);
                for b in 0..d {
                    row += v[b] * q[(a, b)];
                }
                acc += u[a] * row;
            }
            *c *= acc;
        }
    }
    let maps = chi
        .iter()
        .enumerate()
        .map(|(n, &c)| {
            let t = n as f64 * dt;
            let mut m = dephasing_map(sys.epsilon, t, 0.0);
            m[(2, 2)] *= c;
            m[(1, 1)] *= c.conj();
            m
        })
        .collect();
    MapTrajectory::from_raw(dt, maps)
}

fn full_space(
    sys: &SystemSpec,
    sd: &SpectralDensity,
    modes: &[BathMode],
    fock_cutoff: usize,
    dt: f64,
    n_steps: usize,
    opts: &ExactOptions,
) -> Result<MapTrajectory> {
    let d = fock_cutoff;
    let bath_dim = modes
        .iter()
        .try_fold(1usize, |acc, _| acc.checked_mul(d))
        .unwrap_or(usize::MAX);
    let dim = bath_dim.saturating_mul(2);
    if dim > opts.max_dimension {
        return Err(Error::OverBudget { what: "system-bath Hilbert space", size: dim, budget: opts.max_dimension });
    }
    let ops: Vec<ModeOps> = modes.iter().map(|m| mode_ops(m, sd.beta, d)).collect();
    // mixed-radix digits of a bath index, mode 0 most significant
    let digits = |mut idx: usize| {
        let mut v = vec![0usize; modes.len()];
        for j in (0..modes.len()).rev() {
            v[j] = idx % d;
            idx /= d;
        }
        v
    };
    let strides: Vec<usize> = (0..modes.len()).map(|j| d.pow((modes.len() - 1 - j) as u32)).collect();
    let hs = sys.hamiltonian();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for b in 0..bath_dim {
        let n = digits(b);
        for s in 0..2 {
            for s2 in 0..2 {
                h[(s * bath_dim + b, s2 * bath_dim + b)] += hs[(s, s2)].re;
            }
            let sz = if s == 0 { 1.0 } else { -1.0 };
            let i = s * bath_dim + b;
            for (j, op) in ops.iter().enumerate() {
                h[(i, i)] += op.energy[n[j]];
                if n[j] + 1 < d {
                    let b2 = b + strides[j];
                    let v = -sz * modes[j].coupling * op.q[(n[j], n[j] + 1)];
                    h[(i, s * bath_dim + b2)] += v;
                    h[(s * bath_dim + b2, i)] += v;
                }
            }
        }
    }
    let eig = SymmetricEigen::new(h);
    let probs: Vec<f64> = (0..bath_dim)
        .map(|b| digits(b).iter().zip(&ops).map(|(&n, op)| op.pops[n]).product())
        .collect();
    let pmax = probs.iter().cloned().fold(0.0, f64::max);
    let kept: Vec<usize> = (0..bath_dim).filter(|&b| probs[b] > 1e-14 * pmax).collect();
    let ns = kept.len();
    // column (a, k) holds V^T |a, kept[k]⟩
    let coeff = DMatrix::from_fn(dim, 2 * ns, |r, c| {
        let (a, k) = (c / ns, c % ns);
        eig.eigenvectors[(a * bath_dim + kept[k], r)]
    });
    let mut maps = Vec::with_capacity(n_steps + 1);
    for step in 0..=n_steps {
        let t = step as f64 * dt;
        let mut cos_c = coeff.clone();
        let mut sin_c = coeff.clone();
        for r in 0..dim {
            let (sn, cs) = (eig.eigenvalues[r] * t).sin_cos();
            cos_c.row_mut(r).scale_mut(cs);
            sin_c.row_mut(r).scale_mut(sn);
        }
        let re = &eig.eigenvectors * cos_c;
        let im = -(&eig.eigenvectors * sin_c);
        let mut u = Superoperator::zeros();
        for a in 0..2 {
            for bb in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut acc = C64::new(0.0, 0.0);
                        for (k, &b) in kept.iter().enumerate() {
                            let (ca, cb) = (a * ns + k, bb * ns + k);
                            let mut s = C64::new(0.0, 0.0);
                            for m in 0..bath_dim {
                                let x = C64::new(re[(i * bath_dim + m, ca)], im[(i * bath_dim + m, ca)]);
                                let y = C64::new(re[(j * bath_dim + m, cb)], im[(j * bath_dim + m, cb)]);
                                s += x * y.conj();
                            }
                            acc += s * probs[b];
                        }
                        u[(i + 2 * j, a + 2 * bb)] = acc;
                    }
                }
            }
        }
        maps.push(u);
    }
    MapTrajectory::from_raw(dt, maps)
}

/// Instantaneous memory kernel `K(0) = −Tr_B[L (1 − P) L (ρ_B ⊗ ·)]` for the
/// discretized bath, with `L = [H, ·]` and `P = ρ_B ⊗ Tr_B`.
///
/// Because every mode has `⟨q_j⟩ = 0` in its Gibbs state, cross terms between
/// different modes vanish and the trace splits into a sum of single-mode
/// contributions, each evaluated literally in the system ⊗ mode space.
pub fn k0_projector(sys: &SystemSpec, sd: &SpectralDensity, n_modes: usize, fock_cutoff: usize) -> Result<Superoperator> {
    check_cutoff(fock_cutoff)?;
    let opts = ExactOptions::default();
    let modes = discretize_bath(sd, n_modes)?;
    let hs = sys.hamiltonian();
    let mut total = Superoperator::zeros();
    for mode in &modes {
        let d = thermal_cutoff(mode, sd.beta, fock_cutoff, &opts)?;
        let ops = mode_ops(mode, sd.beta, d);
        let dim = 2 * d;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for s in 0..2 {
            let sz = if s == 0 { 1.0 } else { -1.0 };
            for n in 0..d {
                for s2 in 0..2 {
                    h[(s * d + n, s2 * d + n)] += hs[(s, s2)].re;
                }
                h[(s * d + n, s * d + n)] += ops.energy[n];
                for m in 0..d {
                    h[(s * d + n, s * d + m)] -= sz * mode.coupling * ops.q[(n, m)];
                }
            }
        }
        let rho_b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ops.pops.clone()));
        let embed = |sys_op: &nalgebra::Matrix2<f64>| {
            DMatrix::from_fn(dim, dim, |r, c| sys_op[(r / d, c / d)] * rho_b[(r % d, c % d)])
        };
        let trace_b = |x: &DMatrix<f64>| {
            nalgebra::Matrix2::from_fn(|s, s2| (0..d).map(|n| x[(s * d + n, s2 * d + n)]).sum())
        };
        for k in 0..4 {
            let mut e = nalgebra::Matrix2::<f64>::zeros();
            e[(k % 2, k / 2)] = 1.0;
            let x = embed(&e);
            let y = &h * &x - &x * &h;
            let z = &y - embed(&trace_b(&y));
            let w = &h * &z - &z * &h;
            let r = trace_b(&w);
            for i in 0..2 {
                for j in 0..2 {
                    total[(i + 2 * j, k)] -= C64::new(r[(i, j)], 0.0);
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superop::{expm, liouvillian_generator, max_abs_diff};

    fn closed(sys: &SystemSpec, dt: f64, n: usize) -> Vec<Superoperator> {
        let l = liouvillian_generator(&sys.hamiltonian()).unwrap();
        (0..=n).map(|k| expm(&l, k as f64 * dt)).collect()
    }

    #[test]
    fn discretization_reproduces_reorganization_integral() {
        // the reorganization moment is reproduced exactly
        let sd = SpectralDensity::benchmark();
        let modes = discretize_bath(&sd, 400).unwrap();
        let s: f64 = modes.iter().map(|m| m.coupling.powi(2) / m.omega.powi(2)).sum();
        // (2/π)∫₀^{10ω_c} J(ω)/ω dω = ξ ω_c (1 − e^{−10})
        let exact = sd.xi * sd.omega_c * (1.0 - (-10.0f64).exp());
        assert!((s - exact).abs() < 1e-10 * exact, "{s} vs {exact}");
        assert!(discretize_bath(&sd, 0).unwrap().is_empty());
    }

    #[test]
    fn no_modes_or_no_coupling_is_closed() {
        let sys = SystemSpec::new(0.3, -1.0).unwrap();
        let sd = SpectralDensity::benchmark();
        let traj = exact_diag_reference(&sys, &sd, 0, 4, 0.1, 20).unwrap();
        for (u, e) in traj.maps().iter().zip(closed(&sys, 0.1, 20)) {
            assert!(max_abs_diff(u, &e) < 1e-12);
        }
        let free = SpectralDensity { xi: 0.0, ..sd };
        let traj = exact_diag_reference(&sys, &free, 1, 6, 0.1, 20).unwrap();
        for (u, e) in traj.maps().iter().zip(closed(&sys, 0.1, 20)) {
            assert!(max_abs_diff(u, &e) < 1e-10);
        }
        let sys0 = SystemSpec::new(0.3, 0.0).unwrap();
        let traj = exact_diag_reference(&sys0, &free, 3, 4, 0.1, 20).unwrap();
        for (u, e) in traj.maps().iter().zip(closed(&sys0, 0.1, 20)) {
            assert!(max_abs_diff(u, &e) < 1e-10);
        }
    }

    #[test]
    fn factorized_and_full_space_agree() {
        // Ω = 0 through both solvers; the full space uses a fixed cutoff, so
        // compare at a cutoff large enough for both
        let sd = SpectralDensity { xi: 0.3, s: 1.0, omega_c: 10.0, beta: 2.0 };
        let sys = SystemSpec::new(0.5, 0.0).unwrap();
        let modes = discretize_bath(&sd, 2).unwrap();
        let opts = ExactOptions::default();
        let a = factorized(&sys, &sd, &modes, 2, 0.1, 30, &opts).unwrap();
        let b = full_space(&sys, &sd, &modes, 20, 0.1, 30, &ExactOptions { max_dimension: 1000, ..opts }).unwrap();
        for (x, y) in a.maps().iter().zip(b.maps()) {
            assert!(max_abs_diff(x, y) < 1e-6, "{}", max_abs_diff(x, y));
        }
    }

    #[test]
    fn full_space_is_trace_preserving() {
        let sd = SpectralDensity::benchmark();
        let sys = SystemSpec::benchmark();
        let traj = exact_diag_reference(&sys, &sd, 3, 6, 0.05, 20).unwrap();
        for u in traj.maps() {
            assert!(crate::superop::trace_preservation_defect(u) < 1e-10);
        }
        assert!(matches!(
            exact_diag_reference(&sys, &sd, 8, 6, 0.05, 2),
            Err(Error::OverBudget { .. })
        ));
        assert!(exact_diag_reference(&sys, &sd, 1, 1, 0.05, 2).is_err());
    }

    #[test]
    fn single_mode_dephasing_exponent() {
        // one displaced oscillator: Γ(t) = (2c²/ω³) coth(βω/2) (1 − cos ωt)
        let sd = SpectralDensity { xi: 0.4, s: 1.0, omega_c: 1.0, beta: 1.5 };
        let sys = SystemSpec::new(0.2, 0.0).unwrap();
        let traj = exact_diag_reference(&sys, &sd, 1, 2, 0.05, 100).unwrap();
        let m = discretize_bath(&sd, 1).unwrap()[0];
        let coth = 1.0 / (0.5 * sd.beta * m.omega).tanh();
        for (n, u) in traj.maps().iter().enumerate() {
            let t = n as f64 * 0.05;
            let g = 2.0 * m.coupling.powi(2) / m.omega.powi(3) * coth * (1.0 - (m.omega * t).cos());
            let exact = C64::new(0.0, -2.0 * sys.epsilon * t).exp() * (-g).exp();
            assert!((u[(2, 2)] - exact).norm() < 1e-9, "t={t}: {} vs {exact}", u[(2, 2)]);
        }
    }

    #[test]
    fn k0_is_double_commutator() {
        let sd = SpectralDensity::benchmark();
        let sys = SystemSpec::benchmark();
        let k0 = k0_projector(&sys, &sd, 30, 4).unwrap();
        let x2: f64 = discretize_bath(&sd, 30)
            .unwrap()
            .iter()
            .map(|m| m.coupling.powi(2) / (2.0 * m.omega) / (0.5 * sd.beta * m.omega).tanh())
            .sum();
        let mut expect = Superoperator::zeros();
        expect[(1, 1)] = C64::new(-4.0 * x2, 0.0);
        expect[(2, 2)] = C64::new(-4.0 * x2, 0.0);
        assert!(max_abs_diff(&k0, &expect) < 1e-8 * x2, "{k0}");
        let free = SpectralDensity { xi: 0.0, ..sd };
        assert!(crate::superop::frob_norm(&k0_projector(&sys, &free, 10, 4).unwrap()) < 1e-12);
    }
}
