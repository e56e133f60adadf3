//! Convergence studies: kernel and dynamics errors against a fine-grid
//! reference, log–log order fits, plateau detection, and a manufactured
//! Volterra problem with a closed-form solution.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    continuous_to_discrete, discrete_to_continuous, half_grid_from_fine, integer_grid_from_fine,
    mpdi_extract, mpdi_propagate, AuxiliaryKernels, MpdiVariant, SchemeTag,
};
use crate::discrete::{extract_discrete_kernels, propagate_discrete, MemoryTruncation};
use crate::error::{Error, Result};
use crate::superop::{
    frob_norm, grid_ratio, liouvillian_generator, two_level_hamiltonian, DensityMatrix,
    KernelKind, KernelSeries, MapTrajectory, Op2, Superoperator, C64,
};
use crate::volterra::{extract_continuous_kernel, propagate_continuous};

/// Least-squares line through `(log dt, log err)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub order: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_order(dts: &[f64], errors: &[f64]) -> Result<OrderFit> {
    if dts.len() != errors.len() {
        return Err(Error::validation("dt and error lists differ in length"));
    }
    if dts.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: dts.len() });
    }
    if dts.iter().chain(errors).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::validation("order fit needs positive finite dt and error values"));
    }
    let x: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::validation("order fit needs at least two distinct dt values"));
    }
    let order = sxy / sxx;
    let intercept = my - order * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(OrderFit { order, intercept, r_squared })
}

/// Tail of a series that stays within a relative band around its mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub start: usize,
    pub value: f64,
    pub spread: f64,
}

/// Finds the longest tail whose values lie within `rel_tol` of the mean of
/// the last quarter of the series. Returns `None` when even that quarter
/// varies by more than `rel_tol`.
pub fn detect_plateau(values: &[f64], rel_tol: f64) -> Option<Plateau> {
    if values.len() < 4 {
        return None;
    }
    let q = values.len() - values.len() / 4;
    let tail = &values[q..];
    let value = tail.iter().sum::<f64>() / tail.len() as f64;
    let band = rel_tol * value.abs();
    let within = |v: f64| (v - value).abs() <= band;
    if !tail.iter().all(|&v| within(v)) {
        return None;
    }
    let mut start = values.len();
    while start > 0 && within(values[start - 1]) {
        start -= 1;
    }
    let spread = values[start..].iter().map(|v| (v - value).abs()).fold(0.0, f64::max) / value.abs();
    Some(Plateau { start, value, spread })
}

/// Elementwise norms used when comparing series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    #[default]
    Frobenius,
    MaxAbs,
}

impl Norm {
    pub fn of<'a>(self, entries: impl Iterator<Item = &'a C64>) -> f64 {
        match self {
            Norm::Frobenius => entries.map(|z| z.norm_sqr()).sum::<f64>().sqrt(),
            Norm::MaxAbs => entries.map(|z| z.norm()).fold(0.0, f64::max),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(Norm::Frobenius),
            "max" | "max-abs" => Ok(Norm::MaxAbs),
            other => Err(Error::validation(format!("unknown norm '{other}'"))),
        }
    }
}

/// Aligns two series by index: returns `(stride_a, stride_b, dt)` such that
/// entry `n * stride_a` of `a` and `n * stride_b` of `b` share the time `n dt`.
pub fn align(dt_a: f64, dt_b: f64) -> Result<(usize, usize, f64)> {
    if dt_a >= dt_b {
        Ok((1, grid_ratio(dt_a, dt_b)?, dt_a))
    } else {
        Ok((grid_ratio(dt_b, dt_a)?, 1, dt_b))
    }
}

/// Per-time distances between `a` and `b` on the coarser of the two grids.
pub fn series_errors<M>(
    a: &[M],
    dt_a: f64,
    b: &[M],
    dt_b: f64,
    dist: impl Fn(&M, &M) -> f64,
) -> Result<Vec<(f64, f64)>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    let (sa, sb, dt) = align(dt_a, dt_b)?;
    let n = ((a.len() - 1) / sa).min((b.len() - 1) / sb) + 1;
    Ok((0..n).map(|i| (i as f64 * dt, dist(&a[i * sa], &b[i * sb]))).collect())
}

/// Largest absolute entry of `a - b`.
pub fn max_abs(a: &Op2, b: &Op2) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Fine-grid reference: exact maps and the continuous kernel extracted from them.
#[derive(Clone, Debug)]
pub struct Reference {
    pub h_s: Op2,
    pub maps: MapTrajectory,
    pub kernel: KernelSeries,
}

impl Reference {
    /// Extracts the reference kernel up to `kernel_time`.
    pub fn new(maps: MapTrajectory, h_s: Op2, kernel_time: f64) -> Result<Self> {
        let n = ((kernel_time / maps.dt()).ceil() as usize + 3).min(maps.len());
        let kernel = extract_continuous_kernel(&maps.truncated(n), &h_s)?;
        Ok(Reference { h_s, maps, kernel })
    }

    pub fn dt(&self) -> f64 {
        self.maps.dt()
    }

    /// Coarse maps at spacing `dt`.
    pub fn coarse_maps(&self, dt: f64) -> Result<MapTrajectory> {
        self.maps.subsample(grid_ratio(dt, self.dt())?)
    }

    /// Number of coarse kernel samples the reference kernel covers.
    pub fn kernel_samples(&self, dt: f64) -> Result<usize> {
        let stride = grid_ratio(dt, self.dt())?;
        Ok((self.kernel.len() - 1) / stride + 1)
    }

    fn aux(&self, dt: f64) -> Result<AuxiliaryKernels> {
        AuxiliaryKernels::from_fine_kernel(&self.kernel, &self.h_s, dt)
    }

    /// Reference kernel on the grid where `scheme` reports its samples.
    pub fn kernel_on_grid(&self, dt: f64, scheme: SchemeTag, count: usize) -> Result<KernelSeries> {
        match scheme {
            SchemeTag::Mpdi => Ok(half_grid_from_fine(&self.kernel, dt, count)?.0),
            _ => integer_grid_from_fine(&self.kernel, dt, count),
        }
    }

    /// Continuous kernel reconstructed from the coarse maps with `scheme`.
    /// MPD/I returns half-grid samples; the others integer-grid samples.
    pub fn kernel_from_maps(&self, dt: f64, scheme: SchemeTag, count: usize, variant: MpdiVariant) -> Result<KernelSeries> {
        let maps = self.coarse_maps(dt)?;
        if maps.len() < count + 1 {
            return Err(Error::TooShort { needed: count + 1, got: maps.len() });
        }
        let maps = maps.truncated(count + 1);
        match scheme {
            SchemeTag::Mpdi => Ok(mpdi_extract(&maps, &self.h_s, variant)?.0.truncated(count)),
            _ => {
                let kd = extract_discrete_kernels(&maps, &self.h_s)?.truncated(count);
                let aux = if scheme == SchemeTag::Ttm2 { Some(self.aux(dt)?) } else { None };
                discrete_to_continuous(&kd, scheme, &self.h_s, aux.as_ref())
            }
        }
    }

    /// `|| K_scheme(t_N) - K_ref(t_N) ||_F` for `N = 0..count`.
    pub fn kernel_errors(&self, dt: f64, scheme: SchemeTag, count: usize, variant: MpdiVariant) -> Result<Vec<f64>> {
        let got = self.kernel_from_maps(dt, scheme, count, variant)?;
        let want = self.kernel_on_grid(dt, scheme, count)?;
        Ok(got.kernels().iter().zip(want.kernels()).map(|(a, b)| frob_norm(&(a - b))).collect())
    }

    /// Maps propagated from the reference kernel with the given scheme and cutoff.
    pub fn propagate_exact(
        &self,
        dt: f64,
        scheme: SchemeTag,
        t_mem: f64,
        n_steps: usize,
        variant: MpdiVariant,
    ) -> Result<MapTrajectory> {
        let trunc = MemoryTruncation::at(t_mem)?;
        let count = trunc.steps(dt).unwrap_or(n_steps).min(n_steps) + 1;
        let available = self.kernel_samples(dt)?;
        if count > available {
            return Err(Error::TooShort { needed: count, got: available });
        }
        match scheme {
            SchemeTag::Mpdi => {
                let half = self.kernel_on_grid(dt, scheme, count - 1)?;
                mpdi_propagate(&half, &self.h_s, n_steps, trunc, variant)
            }
            _ => {
                let kc = integer_grid_from_fine(&self.kernel, dt, count)?;
                let aux = if scheme == SchemeTag::Ttm2 { Some(self.aux(dt)?) } else { None };
                let kd = continuous_to_discrete(&kc, scheme, &self.h_s, aux.as_ref())?;
                propagate_discrete(&kd, &self.h_s, n_steps, trunc)
            }
        }
    }

    /// `(t, max_abs(rho - rho_ref))` along a trajectory on the coarse grid.
    pub fn state_errors(&self, traj: &MapTrajectory, rho0: &DensityMatrix) -> Result<Vec<(f64, f64)>> {
        let stride = grid_ratio(traj.dt(), self.dt())?;
        let want = self.maps.states(rho0);
        let got = traj.states(rho0);
        let n = got.len().min((want.len() - 1) / stride + 1);
        Ok((0..n).map(|i| (i as f64 * traj.dt(), max_abs(&got[i], &want[i * stride]))).collect())
    }
}

/// Mean of the error column.
pub fn time_average(errors: &[(f64, f64)]) -> f64 {
    errors.iter().map(|e| e.1).sum::<f64>() / errors.len().max(1) as f64
}

/// Result of the manufactured Volterra problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManufacturedReport {
    pub dts: Vec<f64>,
    pub extraction_errors: Vec<f64>,
    pub propagation_errors: Vec<f64>,
    pub extraction_order: OrderFit,
    pub propagation_order: OrderFit,
}

const MANUFACTURED_EPSILON: f64 = 0.7;
const MANUFACTURED_AMPLITUDES: [C64; 4] = [
    C64::new(-0.3, 0.0),
    C64::new(-0.5, 0.2),
    C64::new(-0.5, -0.2),
    C64::new(-0.3, 0.0),
];

/// Solution of `u' = lam u + a int_0^t e^{-s} u(t - s) ds`, `u(0) = 1`, from
/// its Laplace transform `(s + 1) / ((s - lam)(s + 1) - a)`.
fn scalar_solution(lam: C64, a: C64, t: f64) -> C64 {
    let b = C64::from(1.0) - lam;
    let c = -(lam + a);
    let disc = (b * b - c * 4.0).sqrt();
    let r1 = (-b + disc) * 0.5;
    let r2 = (-b - disc) * 0.5;
    (r1 + 1.0) / (r1 - r2) * (r1 * t).exp() + (r2 + 1.0) / (r2 - r1) * (r2 * t).exp()
}

/// Diagonal model with kernel `A e^{-t}` and closed-form maps. For each `dt`,
/// extracts the kernel from exact maps and propagates the exact kernel,
/// recording the largest deviation from the closed forms on `[0, t_max]`.
pub fn manufactured_volterra(dts: &[f64], t_max: f64) -> Result<ManufacturedReport> {
    if dts.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: dts.len() });
    }
    let h = two_level_hamiltonian(MANUFACTURED_EPSILON, 0.0);
    let gen = liouvillian_generator(&h)?;
    let a = Superoperator::from_diagonal(&Vector4::from_column_slice(&MANUFACTURED_AMPLITUDES));
    let exact_map = |t: f64| {
        Superoperator::from_diagonal(&Vector4::from_fn(|d, _| {
            scalar_solution(gen[(d, d)], MANUFACTURED_AMPLITUDES[d], t)
        }))
    };
    let mut extraction_errors = Vec::with_capacity(dts.len());
    let mut propagation_errors = Vec::with_capacity(dts.len());
    for &dt in dts {
        let n = (t_max / dt).round() as usize;
        if n < 4 {
            return Err(Error::validation(format!("dt = {dt} leaves fewer than 4 steps")));
        }
        let maps = MapTrajectory::from_raw(dt, (0..=n).map(|i| exact_map(i as f64 * dt)).collect())?;
        let kc = KernelSeries::new(
            dt,
            KernelKind::Continuous,
            (0..=n).map(|i| a * C64::from((-(i as f64) * dt).exp())).collect(),
        )?;
        let extracted = extract_continuous_kernel(&maps, &h)?;
        extraction_errors.push(
            extracted.kernels().iter().zip(kc.kernels()).map(|(x, y)| frob_norm(&(x - y))).fold(0.0, f64::max),
        );
        let propagated = propagate_continuous(&kc, &h, n)?;
        propagation_errors.push(
            propagated.maps().iter().zip(maps.maps()).map(|(x, y)| frob_norm(&(x - y))).fold(0.0, f64::max),
        );
    }
    Ok(ManufacturedReport {
        dts: dts.to_vec(),
        extraction_order: fit_order(dts, &extraction_errors)?,
        propagation_order: fit_order(dts, &propagation_errors)?,
        extraction_errors,
        propagation_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn order_of_exact_power_law() {
        let dts = [0.1, 0.05, 0.025];
        let errs: Vec<f64> = dts.iter().map(|d| 3.0 * d * d).collect();
        let f = fit_order(&dts, &errs).unwrap();
        assert!((f.order - 2.0).abs() < 1e-12);
        assert!((f.intercept - 3.0f64.ln()).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_order(&[0.1], &[1.0]).is_err());
        assert!(fit_order(&[0.1, 0.1], &[1.0, 2.0]).is_err());
        assert!(fit_order(&[0.1, 0.05], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn plateau_of_decaying_curve() {
        let v: Vec<f64> = (0..100).map(|n| 0.01 + (-(n as f64) / 5.0).exp()).collect();
        let p = detect_plateau(&v, 0.05).unwrap();
        assert!((p.value - 0.01).abs() < 1e-4);
        assert!(p.start > 10 && p.start < 40, "{p:?}");
        let growing: Vec<f64> = (1..50).map(|n| n as f64).collect();
        assert!(detect_plateau(&growing, 0.05).is_none());
    }

    #[test]
    fn alignment_by_stride() {
        assert_eq!(align(0.005, 0.0005).unwrap(), (1, 10, 0.005));
        assert_eq!(align(0.0005, 0.005).unwrap(), (10, 1, 0.005));
        assert!(align(0.003, 0.002).is_err());
    }

    #[test]
    fn manufactured_suite_is_second_order() {
        let r = manufactured_volterra(&[0.02, 0.01, 0.005], 2.0).unwrap();
        assert!((r.extraction_order.order - 2.0).abs() < 0.2, "{r:?}");
        assert!((r.propagation_order.order - 2.0).abs() < 0.2, "{r:?}");
    }

    proptest! {
        #[test]
        fn order_fit_is_scale_invariant(p in 0.5f64..3.0, c in 1e-6f64..1e3) {
            let dts = [0.2f64, 0.1, 0.05, 0.01];
            let errs: Vec<f64> = dts.iter().map(|d| c * d.powf(p)).collect();
            let f = fit_order(&dts, &errs).unwrap();
            prop_assert!((f.order - p).abs() < 1e-9);
        }
    }
}
