//! Continuous-time Nakajima–Zwanzig machinery on fine uniform grids.
//!
//! The propagator obeys `U'(t) = G U(t) + int_0^t K(s) U(t - s) ds` with
//! `G = -i L_s`. Differentiating once gives a Volterra equation of the second
//! kind for the kernel,
//!
//! ```text
//! K(t) = U''(t) - G U'(t) - int_0^t K(s) U'(t - s) ds,
//! ```
//!
//! which [`extract_continuous_kernel`] solves step by step with trapezoidal
//! quadrature. Everything here is second order in the grid spacing.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::superop::{
    liouvillian_generator, max_abs_diff, CompensatedSum, KernelKind, KernelSeries,
    MapTrajectory, Op2, Superoperator, Tolerances,
};

/// Grid spacing above which kernel extraction is flagged as too coarse,
/// in units of the inverse system frequency scale.
const COARSE_GRID_LIMIT: f64 = 0.015;

/// Returns a warning message when `dt` looks too coarse for second-order
/// extraction with Hamiltonian `h_s`.
pub fn coarse_grid_warning(dt: f64, h_s: &Op2) -> Option<String> {
    let scale = 2.0 * h_s.norm() + 1.0;
    (dt * scale > COARSE_GRID_LIMIT).then(|| {
        format!(
            "grid spacing {dt} is coarse for continuous-kernel extraction (recommended <= {:.4})",
            COARSE_GRID_LIMIT / scale
        )
    })
}

fn c(x: f64) -> C64 {
    C64::from(x)
}

/// First and second derivatives of `U` at every grid point: central
/// differences inside, one-sided second-order stencils at both ends.
fn derivative_series(maps: &[Superoperator], dt: f64) -> (Vec<Superoperator>, Vec<Superoperator>) {
    let n = maps.len();
    let inv = c(1.0 / dt);
    let inv2 = c(1.0 / (dt * dt));
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 {
            d1.push((maps[0] * c(-3.0) + maps[1] * c(4.0) - maps[2]) * inv * c(0.5));
            d2.push((maps[0] * c(2.0) - maps[1] * c(5.0) + maps[2] * c(4.0) - maps[3]) * inv2);
        } else if i == n - 1 {
            d1.push((maps[i] * c(3.0) - maps[i - 1] * c(4.0) + maps[i - 2]) * inv * c(0.5));
            d2.push(
                (maps[i] * c(2.0) - maps[i - 1] * c(5.0) + maps[i - 2] * c(4.0) - maps[i - 3])
                    * inv2,
            );
        } else {
            d1.push((maps[i + 1] - maps[i - 1]) * inv * c(0.5));
            d2.push((maps[i + 1] - maps[i] * c(2.0) + maps[i - 1]) * inv2);
        }
    }
    (d1, d2)
}

/// `(U'(0), U''(0), U'''(0))` from one-sided second-order differences.
pub fn derivatives_at_zero(
    traj: &MapTrajectory,
) -> Result<(Superoperator, Superoperator, Superoperator)> {
    if traj.len() < 5 {
        return Err(Error::TooShort { needed: 5, got: traj.len() });
    }
    let u = traj.maps();
    let h = traj.dt();
    let d1 = (u[0] * c(-3.0) + u[1] * c(4.0) - u[2]) * c(0.5 / h);
    let d2 = (u[0] * c(2.0) - u[1] * c(5.0) + u[2] * c(4.0) - u[3]) * c(1.0 / (h * h));
    let d3 = (u[0] * c(-5.0) + u[1] * c(18.0) - u[2] * c(24.0) + u[3] * c(14.0) - u[4] * c(3.0))
        * c(0.5 / (h * h * h));
    Ok((d1, d2, d3))
}

/// Extracts `K(n dt)` for every point of a fine trajectory.
///
/// `K(0)` comes from `U''(0) - G^2`; later points from the trapezoidal
/// Volterra recursion, whose implicit diagonal term `K_n U'(0) dt/2` is moved
/// to the left and removed with one `4x4` solve.
pub fn extract_continuous_kernel(traj: &MapTrajectory, h_s: &Op2) -> Result<KernelSeries> {
    if traj.len() < 4 {
        return Err(Error::TooShort { needed: 4, got: traj.len() });
    }
    let maps = traj.maps();
    if max_abs_diff(&maps[0], &Superoperator::identity()) > Tolerances::default().identity {
        return Err(Error::validation("trajectory must start at the identity map"));
    }
    let dt = traj.dt();
    if let Some(msg) = coarse_grid_warning(dt, h_s) {
        log::warn!("{msg}");
    }
    let g = liouvillian_generator(h_s)?;
    let (d1, d2) = derivative_series(maps, dt);

    // K_n (I + dt/2 U'_0) = rhs  <=>  (I + dt/2 U'_0)^T K_n^T = rhs^T
    let lhs = Superoperator::identity() + d1[0] * c(0.5 * dt);
    let lu = lhs.transpose().lu();
    if !lu.is_invertible() {
        return Err(Error::Convergence("Volterra diagonal term is singular".into()));
    }

    let mut kernels: Vec<Superoperator> = Vec::with_capacity(maps.len());
    kernels.push(d2[0] - g * g);
    for n in 1..maps.len() {
        let mut conv = CompensatedSum::new();
        conv.add(&(kernels[0] * d1[n] * c(0.5)));
        for m in 1..n {
            conv.add(&(kernels[m] * d1[n - m]));
        }
        let rhs = d2[n] - g * d1[n] - conv.value() * c(dt);
        let k_t = lu
            .solve(&rhs.transpose())
            .ok_or_else(|| Error::Convergence("Volterra step solve failed".into()))?;
        kernels.push(k_t.transpose());
    }
    KernelSeries::new(dt, KernelKind::Continuous, kernels)
}

/// Propagates `U` on the kernel's grid for `n_steps` steps.
///
/// Trapezoidal rule in time with a trapezoidal memory integral. The corrector
/// is linear in `U_{n+1}`, so it is solved exactly rather than iterated.
pub fn propagate_continuous(kc: &KernelSeries, h_s: &Op2, n_steps: usize) -> Result<MapTrajectory> {
    if kc.kind() != KernelKind::Continuous {
        return Err(Error::validation("continuous propagation needs an integer-grid continuous kernel"));
    }
    if n_steps == 0 {
        return Err(Error::validation("n_steps must be at least 1"));
    }
    if kc.len() < n_steps + 1 {
        return Err(Error::validation(format!(
            "kernel covers {} points but {} steps were requested",
            kc.len(),
            n_steps
        )));
    }
    let dt = kc.dt();
    let g = liouvillian_generator(h_s)?;
    let ks = kc.kernels();
    let half = c(0.5 * dt);

    let lhs = Superoperator::identity() - (g + ks[0] * half) * half;
    let lu = lhs.lu();
    if !lu.is_invertible() {
        return Err(Error::Convergence("trapezoidal step matrix is singular".into()));
    }

    let memory = |maps: &[Superoperator], n: usize| -> Superoperator {
        // dt * [K_0 U_n / 2 + sum_{m=1}^{n-1} K_m U_{n-m} + K_n U_0 / 2]
        if n == 0 {
            return Superoperator::zeros();
        }
        let mut acc = CompensatedSum::new();
        acc.add(&(ks[0] * maps[n] * c(0.5)));
        for m in 1..n {
            acc.add(&(ks[m] * maps[n - m]));
        }
        acc.add(&(ks[n] * c(0.5)));
        acc.value() * c(dt)
    };

    let mut maps = Vec::with_capacity(n_steps + 1);
    maps.push(Superoperator::identity());
    for n in 0..n_steps {
        let f_n = g * maps[n] + memory(&maps, n);
        // known part of the memory integral at n+1
        let mut acc = CompensatedSum::new();
        for m in 1..=n {
            acc.add(&(ks[m] * maps[n + 1 - m]));
        }
        acc.add(&(ks[n + 1] * c(0.5)));
        let known = acc.value() * c(dt);
        let rhs = maps[n] + (f_n + known) * half;
        let next = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Convergence("trapezoidal step solve failed".into()))?;
        maps.push(next);
    }
    MapTrajectory::from_raw(dt, maps)
}
