//! Discrete-time Nakajima–Zwanzig recursion
//!
//! ```text
//! U_{N+1} = L U_N + dt^2 * sum_{m=0}^{N} K_m U_{N-m},    L = I - i dt L_s
//! ```
//!
//! Kernels are extracted from exact maps by solving the recursion forward
//! (it is triangular because `U_0 = I`), and maps are propagated from kernels
//! with an optional memory cutoff.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::superop::{
    self, check_dt, max_abs_diff, CompensatedSum, DensityMatrix, KernelKind, KernelSeries,
    MapTrajectory, Op2, Superoperator, Tolerances,
};

/// Memory cutoff: kernels beyond `t_mem` are treated as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MemoryTruncation {
    t_mem: Option<f64>,
}

impl MemoryTruncation {
    pub fn none() -> Self {
        MemoryTruncation { t_mem: None }
    }

    pub fn at(t_mem: f64) -> Result<Self> {
        if !(t_mem.is_finite() && t_mem > 0.0) {
            return Err(Error::validation(format!("memory cutoff must be positive, got {t_mem}")));
        }
        Ok(MemoryTruncation { t_mem: Some(t_mem) })
    }

    pub fn t_mem(&self) -> Option<f64> {
        self.t_mem
    }

    /// Cutoff step `n_T = round(t_mem / dt)` (ties to even), at least 1.
    pub fn steps(&self, dt: f64) -> Option<usize> {
        self.t_mem
            .map(|t| ((t / dt).round_ties_even() as usize).max(1))
    }
}

/// `L = I - i dt L_s`
pub fn euler_generator(h_s: &Op2, dt: f64) -> Result<Superoperator> {
    let gen = superop::liouvillian_generator(h_s)?;
    Ok(Superoperator::identity() + gen * C64::from(dt))
}

/// Extracts `K_0 .. K_{M-1}` from maps `U_0 .. U_M`.
pub fn extract_discrete_kernels(traj: &MapTrajectory, h_s: &Op2) -> Result<KernelSeries> {
    if traj.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: traj.len() });
    }
    let maps = traj.maps();
    if max_abs_diff(&maps[0], &Superoperator::identity()) > Tolerances::default().identity {
        return Err(Error::validation("trajectory must start at the identity map"));
    }
    let dt = traj.dt();
    let dt2 = C64::from(dt * dt);
    let inv_dt2 = C64::from(1.0 / (dt * dt));
    let l = euler_generator(h_s, dt)?;

    let mut kernels: Vec<Superoperator> = Vec::with_capacity(maps.len() - 1);
    for n in 0..maps.len() - 1 {
        let mut acc = CompensatedSum::new();
        acc.add(&maps[n + 1]);
        acc.add(&-(l * maps[n]));
        for (m, k) in kernels.iter().enumerate() {
            acc.add(&-(k * maps[n - m] * dt2));
        }
        kernels.push(acc.value() * inv_dt2);
    }
    KernelSeries::new(dt, KernelKind::Discrete, kernels)
}

/// Propagates `n_steps` steps of the recursion from discrete kernels.
pub fn propagate_discrete(
    kernels: &KernelSeries,
    h_s: &Op2,
    n_steps: usize,
    trunc: MemoryTruncation,
) -> Result<MapTrajectory> {
    if kernels.kind() != KernelKind::Discrete {
        return Err(Error::validation(format!(
            "discrete propagation needs a discrete kernel series, got {:?}",
            kernels.kind()
        )));
    }
    if n_steps == 0 {
        return Err(Error::validation("n_steps must be at least 1"));
    }
    let dt = kernels.dt();
    check_dt(dt)?;
    let n_t = trunc.steps(dt);
    // kernel indices 0 ..= max_index are needed
    let max_index = match n_t {
        Some(nt) => nt.min(n_steps - 1),
        None => n_steps - 1,
    };
    if kernels.len() < max_index + 1 {
        return Err(Error::TooShort { needed: max_index + 1, got: kernels.len() });
    }
    let ks = kernels.kernels();
    let l = euler_generator(h_s, dt)?;
    let dt2 = C64::from(dt * dt);

    let mut maps = Vec::with_capacity(n_steps + 1);
    maps.push(Superoperator::identity());
    for n in 0..n_steps {
        let mut acc = CompensatedSum::new();
        acc.add(&(l * maps[n]));
        let upper = n_t.map_or(n, |nt| nt.min(n));
        for m in 0..=upper {
            acc.add(&(ks[m] * maps[n - m] * dt2));
        }
        maps.push(acc.value());
    }
    MapTrajectory::from_raw(dt, maps)
}

/// `rho_N = U_N rho_0` for every map of the trajectory.
pub fn propagate_state(traj: &MapTrajectory, rho0: &DensityMatrix) -> Vec<Op2> {
    traj.states(rho0)
}

/// Convenience: propagate maps from kernels, then apply them to `rho0`.
pub fn propagate_state_from_kernels(
    kernels: &KernelSeries,
    h_s: &Op2,
    n_steps: usize,
    trunc: MemoryTruncation,
    rho0: &DensityMatrix,
) -> Result<Vec<Op2>> {
    Ok(propagate_discrete(kernels, h_s, n_steps, trunc)?.states(rho0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superop::{
        expm, frob_norm, liouvillian_generator, trace_annihilation_defect, trace_row,
        two_level_hamiltonian, unvec_op, vec_op, ONE, ZERO,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rabi_h() -> Op2 {
        two_level_hamiltonian(0.0, -1.0)
    }

    fn closed_traj(h: &Op2, dt: f64, n: usize) -> MapTrajectory {
        let g = expm(&liouvillian_generator(h).unwrap(), dt);
        let mut maps = vec![Superoperator::identity()];
        for i in 0..n {
            maps.push(g * maps[i]);
        }
        MapTrajectory::new(dt, maps).unwrap()
    }

    /// Random trace-preserving maps built as products of near-identity steps.
    fn random_tp_traj(rng: &mut impl Rng, dt: f64, n: usize) -> MapTrajectory {
        let mut maps = vec![Superoperator::identity()];
        for i in 0..n {
            let mut a = Superoperator::from_fn(|_, _| {
                C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            for j in 0..4 {
                a[(3, j)] = -a[(0, j)];
            }
            let step = Superoperator::identity() + a * C64::from(dt);
            maps.push(maps[i] * step);
        }
        MapTrajectory::new(dt, maps).unwrap()
    }

    #[test]
    fn truncation_steps_round_ties_even() {
        let t = MemoryTruncation::at(1.2).unwrap();
        assert_eq!(t.steps(0.01), Some(120));
        assert_eq!(t.steps(0.2), Some(6));
        assert_eq!(MemoryTruncation::at(1.25).unwrap().steps(0.5), Some(2));
        assert_eq!(MemoryTruncation::at(1.75).unwrap().steps(0.5), Some(4));
        assert_eq!(MemoryTruncation::at(0.01).unwrap().steps(0.5), Some(1));
        assert_eq!(MemoryTruncation::none().steps(0.1), None);
        assert!(MemoryTruncation::at(0.0).is_err());
        assert!(MemoryTruncation::at(-1.0).is_err());
    }

    #[test]
    fn euler_maps_give_zero_kernels() {
        let h = rabi_h();
        let dt = 0.05;
        let l = euler_generator(&h, dt).unwrap();
        let mut maps = vec![Superoperator::identity()];
        for i in 0..30 {
            maps.push(l * maps[i]);
        }
        let traj = MapTrajectory::from_raw(dt, maps).unwrap();
        let ks = extract_discrete_kernels(&traj, &h).unwrap();
        assert_eq!(ks.len(), 30);
        for k in ks.kernels() {
            assert!(frob_norm(k) < 1e-10);
        }
    }

    #[test]
    fn closed_k0_closed_form_and_rate() {
        let h = rabi_h();
        let gen = liouvillian_generator(&h).unwrap();
        let mut errs = Vec::new();
        for &dt in &[0.1, 0.05, 0.025] {
            let ks = extract_discrete_kernels(&closed_traj(&h, dt, 4), &h).unwrap();
            let expect = (expm(&gen, dt) - Superoperator::identity() - gen * C64::from(dt))
                * C64::from(1.0 / (dt * dt));
            assert!(max_abs_diff(&ks.kernels()[0], &expect) < 1e-10);
            errs.push(frob_norm(&(ks.kernels()[0] * C64::from(2.0) - gen * gen)));
        }
        // first order in dt
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        }
    }

    #[test]
    fn zero_kernels_propagate_euler_powers() {
        let h = rabi_h();
        let dt = 0.1;
        let ks = KernelSeries::zeros(dt, KernelKind::Discrete, 20).unwrap();
        let traj = propagate_discrete(&ks, &h, 20, MemoryTruncation::none()).unwrap();
        let l = euler_generator(&h, dt).unwrap();
        let mut p = Superoperator::identity();
        for u in traj.maps() {
            assert!(max_abs_diff(u, &p) < 1e-13);
            p = l * p;
        }
    }

    #[test]
    fn round_trip_random_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = two_level_hamiltonian(0.3, -1.0);
        for _ in 0..10 {
            let traj = random_tp_traj(&mut rng, 0.05, 100);
            let ks = extract_discrete_kernels(&traj, &h).unwrap();
            for k in ks.kernels() {
                assert!(trace_annihilation_defect(k) <= 1e-9 * frob_norm(k) + 1e-12);
            }
            let back = propagate_discrete(&ks, &h, 100, MemoryTruncation::none()).unwrap();
            for (a, b) in traj.maps().iter().zip(back.maps()) {
                assert!(max_abs_diff(a, b) < 1e-10);
            }
        }
    }

    #[test]
    fn extracted_kernels_preserve_hermiticity() {
        // maps built from a Hermiticity-preserving generator
        let h = rabi_h();
        let dt = 0.05;
        let gen = liouvillian_generator(&h).unwrap();
        let sz = crate::superop::sigma_z();
        let deph = crate::superop::left_mul(&sz) * crate::superop::right_mul(&sz)
            - Superoperator::identity();
        let step = expm(&(gen + deph * C64::from(0.4)), dt);
        let mut maps = vec![Superoperator::identity()];
        for i in 0..40 {
            maps.push(step * maps[i]);
        }
        let traj = MapTrajectory::new(dt, maps).unwrap();
        let ks = extract_discrete_kernels(&traj, &h).unwrap();
        let herm = [
            Op2::new(ONE, ZERO, ZERO, ZERO),
            Op2::new(ZERO, ZERO, ZERO, ONE),
            Op2::new(ZERO, ONE, ONE, ZERO),
            Op2::new(ZERO, -crate::superop::I, crate::superop::I, ZERO),
        ];
        for k in ks.kernels() {
            for x in &herm {
                let y = unvec_op(&(k * vec_op(x)));
                assert!(crate::superop::hermiticity_defect(&y) < 1e-9);
            }
        }
    }

    #[test]
    fn truncation_uses_only_retained_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = rabi_h();
        let traj = random_tp_traj(&mut rng, 0.1, 30);
        let ks = extract_discrete_kernels(&traj, &h).unwrap();
        let trunc = MemoryTruncation::at(0.5).unwrap();
        let a = propagate_discrete(&ks, &h, 30, trunc).unwrap();
        // zeroing the tail explicitly gives the same maps
        let mut zeroed: Vec<_> = ks.kernels().to_vec();
        for k in zeroed.iter_mut().skip(6) {
            *k = Superoperator::zeros();
        }
        let zs = KernelSeries::new(0.1, KernelKind::Discrete, zeroed).unwrap();
        let b = propagate_discrete(&zs, &h, 30, MemoryTruncation::none()).unwrap();
        for (x, y) in a.maps().iter().zip(b.maps()) {
            assert!(max_abs_diff(x, y) < 1e-12);
        }
        // K_0 ..= K_5 are required
        let short = ks.truncated(5);
        assert!(propagate_discrete(&short, &h, 30, trunc).is_err());
        let enough = ks.truncated(6);
        assert!(propagate_discrete(&enough, &h, 30, trunc).is_ok());
    }

    #[test]
    fn extraction_errors() {
        let h = rabi_h();
        let one = MapTrajectory::new(0.1, vec![Superoperator::identity()]).unwrap();
        assert!(matches!(extract_discrete_kernels(&one, &h), Err(Error::TooShort { .. })));
        let bad = MapTrajectory::from_raw(0.1, vec![Superoperator::identity() * C64::from(2.0); 3])
            .unwrap();
        assert!(matches!(extract_discrete_kernels(&bad, &h), Err(Error::Validation(_))));
        assert!(MapTrajectory::new(0.0, vec![Superoperator::identity()]).is_err());
        let ks = KernelSeries::zeros(0.1, KernelKind::Discrete, 3).unwrap();
        assert!(propagate_discrete(&ks, &h, 10, MemoryTruncation::none()).is_err());
        assert!(propagate_discrete(&ks, &h, 0, MemoryTruncation::none()).is_err());
    }

    #[test]
    fn identity_maps_keep_state_constant() {
        let traj = MapTrajectory::new(0.1, vec![Superoperator::identity(); 5]).unwrap();
        let rho = DensityMatrix::plus();
        for s in propagate_state(&traj, &rho) {
            assert_eq!(s, *rho.matrix());
        }
    }

    #[test]
    fn rabi_oscillation() {
        let h = rabi_h();
        let dt = 0.01;
        let traj = closed_traj(&h, dt, 500);
        let states = propagate_state(&traj, &DensityMatrix::ground());
        for (n, s) in states.iter().enumerate() {
            let t = n as f64 * dt;
            assert!((s[(0, 0)].re - t.cos().powi(2)).abs() < 1e-12);
            let tr = s[(0, 0)] + s[(1, 1)];
            assert!((tr - ONE).norm() < 1e-9);
        }
        assert!((trace_row() * traj.maps()[500] - trace_row()).norm() < 1e-12);
    }
}
