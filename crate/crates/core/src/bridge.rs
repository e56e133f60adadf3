//! Conversions between discrete kernels `K_N` and samples of the continuous
//! memory kernel `K(N dt)`.
//!
//! With `G = -i L_s`:
//!
//! ```text
//! TTM(1):  K_0 = (G^2 + K(0)) / 2                       K_N = K(N dt)
//! TTM(2):  K_0 = (G^2 + K(0)) / 2 + dt/6 * U'''(0)      K_N = K(N dt) + dt/2 * F(N dt)
//! FDIO:    K_N = K(N dt) for all N
//! ```
//!
//! where `F(t) = {K(t), G} + int_0^t K(s) K(t-s) ds` and
//! `U'''(0) = G^3 + {K(0), G} + K'(0)`. The midpoint scheme (MPD/I) works with
//! half-step kernels `K((N - 1/2) dt)` instead; see [`mpdi_extract`].

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::discrete::MemoryTruncation;
use crate::error::{Error, Result};
use crate::superop::{
    anticommutator, check_dt, expm, grid_ratio, liouvillian_generator, max_abs_diff,
    CompensatedSum, KernelKind, KernelSeries, MapTrajectory, Op2, Superoperator, Tolerances,
};

/// Discretization scheme relating `K_N` and `K(N dt)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeTag {
    Fdio,
    Ttm1,
    Ttm2,
    Mpdi,
}

impl SchemeTag {
    pub const ALL: [SchemeTag; 4] = [SchemeTag::Fdio, SchemeTag::Ttm1, SchemeTag::Ttm2, SchemeTag::Mpdi];

    pub fn name(self) -> &'static str {
        match self {
            SchemeTag::Fdio => "fdio",
            SchemeTag::Ttm1 => "ttm1",
            SchemeTag::Ttm2 => "ttm2",
            SchemeTag::Mpdi => "mpdi",
        }
    }
}

impl std::str::FromStr for SchemeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fdio" => Ok(SchemeTag::Fdio),
            "ttm1" => Ok(SchemeTag::Ttm1),
            "ttm2" => Ok(SchemeTag::Ttm2),
            "mpdi" => Ok(SchemeTag::Mpdi),
            other => Err(Error::validation(format!("unknown scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for SchemeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalization of the first MPD/I transfer matrix.
///
/// `Literal` reads the recursion as `T_1/2 = U_1 - G_1/2` and
/// `T_N/2 = U_N - sum T_{N-m} U_m`; `FactorFree` drops both halves, giving
/// `T_1 = U_1` and `T_N = U_N - sum T_{N-m} U_m`. Both are exact for closed
/// dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpdiVariant {
    #[default]
    Literal,
    FactorFree,
}

/// Quantities beyond `K(N dt)` needed by TTM(2), sampled on the coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryKernels {
    pub f_series: KernelSeries,
    pub dddot_u0: Superoperator,
    pub kdot0: Superoperator,
}

impl AuxiliaryKernels {
    /// Builds the auxiliary data from a fine-grid continuous kernel, sampling
    /// `F` at multiples of `coarse_dt`.
    pub fn from_fine_kernel(fine: &KernelSeries, h_s: &Op2, coarse_dt: f64) -> Result<Self> {
        let stride = grid_ratio(coarse_dt, fine.dt())?;
        let f_fine = compute_f(fine, h_s)?;
        let kdot0 = kdot0_estimate(fine)?;
        let dddot = dddot_u0(&fine.kernels()[0], &kdot0, h_s)?;
        Ok(AuxiliaryKernels {
            f_series: f_fine.subsample(stride)?,
            dddot_u0: dddot,
            kdot0,
        })
    }

    fn check_covers(&self, kernels: &KernelSeries) -> Result<()> {
        grid_ratio(kernels.dt(), self.f_series.dt()).and_then(|r| {
            if r == 1 {
                Ok(())
            } else {
                Err(Error::validation("auxiliary kernels are on a different grid"))
            }
        })?;
        if self.f_series.len() < kernels.len() {
            return Err(Error::TooShort { needed: kernels.len(), got: self.f_series.len() });
        }
        Ok(())
    }
}

/// `F(t) = {K(t), -i L_s} + int_0^t K(s) K(t - s) ds`, trapezoidal on the input grid.
pub fn compute_f(kc: &KernelSeries, h_s: &Op2) -> Result<KernelSeries> {
    if kc.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    if kc.kind() != KernelKind::Continuous {
        return Err(Error::validation("F needs an integer-grid continuous kernel"));
    }
    let g = liouvillian_generator(h_s)?;
    let ks = kc.kernels();
    let dt = C64::from(kc.dt());
    let half = C64::from(0.5);
    let out = (0..ks.len())
        .map(|n| {
            let mut f = anticommutator(&ks[n], &g);
            if n > 0 {
                let mut acc = CompensatedSum::new();
                acc.add(&((ks[0] * ks[n] + ks[n] * ks[0]) * half));
                for m in 1..n {
                    acc.add(&(ks[m] * ks[n - m]));
                }
                f += acc.value() * dt;
            }
            f
        })
        .collect();
    KernelSeries::new(kc.dt(), KernelKind::Continuous, out)
}

/// `U'''(0) = (-i L_s)^3 + {K(0), -i L_s} + K'(0)`
pub fn dddot_u0(k0: &Superoperator, kdot0: &Superoperator, h_s: &Op2) -> Result<Superoperator> {
    let g = liouvillian_generator(h_s)?;
    Ok(g * g * g + anticommutator(k0, &g) + kdot0)
}

/// `K'(0)` from the one-sided second-order difference `(-3 K_0 + 4 K_1 - K_2) / (2 dt)`.
pub fn kdot0_estimate(kc: &KernelSeries) -> Result<Superoperator> {
    if kc.len() < 3 {
        return Err(Error::TooShort { needed: 3, got: kc.len() });
    }
    let k = kc.kernels();
    Ok((k[0] * C64::from(-3.0) + k[1] * C64::from(4.0) - k[2]) * C64::from(0.5 / kc.dt()))
}

fn require_aux<'a>(
    scheme: SchemeTag,
    aux: Option<&'a AuxiliaryKernels>,
    kernels: &KernelSeries,
) -> Result<Option<&'a AuxiliaryKernels>> {
    match (scheme, aux) {
        (SchemeTag::Ttm2, None) => Err(Error::validation(
            "TTM(2) needs auxiliary kernels (F series and U'''(0))",
        )),
        (SchemeTag::Ttm2, Some(a)) => {
            a.check_covers(kernels)?;
            Ok(Some(a))
        }
        _ => Ok(None),
    }
}

/// Continuous kernel samples `K(N dt)` from discrete kernels.
pub fn discrete_to_continuous(
    kd: &KernelSeries,
    scheme: SchemeTag,
    h_s: &Op2,
    aux: Option<&AuxiliaryKernels>,
) -> Result<KernelSeries> {
    if kd.kind() != KernelKind::Discrete {
        return Err(Error::validation("expected a discrete kernel series"));
    }
    if kd.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    if scheme == SchemeTag::Mpdi {
        return Err(Error::validation("MPD/I kernels come from maps; use mpdi_extract"));
    }
    let aux = require_aux(scheme, aux, kd)?;
    let g = liouvillian_generator(h_s)?;
    let g2 = g * g;
    let dt = kd.dt();
    let two = C64::from(2.0);
    let out = kd
        .kernels()
        .iter()
        .enumerate()
        .map(|(n, k)| match (scheme, n) {
            (SchemeTag::Fdio, _) => *k,
            (SchemeTag::Ttm1, 0) => k * two - g2,
            (SchemeTag::Ttm2, 0) => {
                let a = aux.expect("checked");
                (k - a.dddot_u0 * C64::from(dt / 6.0)) * two - g2
            }
            (SchemeTag::Ttm2, n) => {
                let a = aux.expect("checked");
                k - a.f_series.kernels()[n] * C64::from(dt / 2.0)
            }
            _ => *k,
        })
        .collect();
    KernelSeries::new(dt, KernelKind::Continuous, out)
}

/// Discrete kernels from continuous kernel samples; inverse of [`discrete_to_continuous`].
pub fn continuous_to_discrete(
    kc: &KernelSeries,
    scheme: SchemeTag,
    h_s: &Op2,
    aux: Option<&AuxiliaryKernels>,
) -> Result<KernelSeries> {
    if kc.kind() != KernelKind::Continuous {
        return Err(Error::validation("expected an integer-grid continuous kernel series"));
    }
    if kc.is_empty() {
        return Err(Error::TooShort { needed: 1, got: 0 });
    }
    if scheme == SchemeTag::Mpdi {
        return Err(Error::validation("MPD/I propagates half-grid kernels; use mpdi_propagate"));
    }
    let aux = require_aux(scheme, aux, kc)?;
    let g = liouvillian_generator(h_s)?;
    let g2 = g * g;
    let dt = kc.dt();
    let half = C64::from(0.5);
    let out = kc
        .kernels()
        .iter()
        .enumerate()
        .map(|(n, k)| match (scheme, n) {
            (SchemeTag::Fdio, _) => *k,
            (SchemeTag::Ttm1, 0) => (g2 + k) * half,
            (SchemeTag::Ttm2, 0) => {
                let a = aux.expect("checked");
                (g2 + k) * half + a.dddot_u0 * C64::from(dt / 6.0)
            }
            (SchemeTag::Ttm2, n) => {
                let a = aux.expect("checked");
                k + a.f_series.kernels()[n] * C64::from(dt / 2.0)
            }
            _ => *k,
        })
        .collect();
    KernelSeries::new(dt, KernelKind::Discrete, out)
}

fn half_step_propagators(h_s: &Op2, dt: f64) -> Result<(Superoperator, Superoperator, Superoperator)> {
    let gen = liouvillian_generator(h_s)?;
    let g1 = expm(&gen, dt);
    let g_half = expm(&gen, 0.5 * dt);
    let g_half_inv = g_half
        .try_inverse()
        .ok_or_else(|| Error::Convergence("half-step propagator is singular".into()))?;
    Ok((g1, g_half, g_half_inv))
}

/// MPD/I kernels from maps.
///
/// Returns the half-grid series `K((N - 1/2) dt)` for `N = 1..=M` and the
/// integer-grid series obtained by averaging neighbouring half-grid values.
/// `K(0)` has no left neighbour and is linearly extrapolated from
/// `K(dt/2)` and `K(3 dt/2)`.
pub fn mpdi_extract(
    traj: &MapTrajectory,
    h_s: &Op2,
    variant: MpdiVariant,
) -> Result<(KernelSeries, KernelSeries)> {
    if traj.len() < 3 {
        return Err(Error::TooShort { needed: 3, got: traj.len() });
    }
    let maps = traj.maps();
    if max_abs_diff(&maps[0], &Superoperator::identity()) > Tolerances::default().identity {
        return Err(Error::validation("trajectory must start at the identity map"));
    }
    let dt = traj.dt();
    let (g1, _, g_half_inv) = half_step_propagators(h_s, dt)?;
    let scale = match variant {
        MpdiVariant::Literal => C64::from(2.0),
        MpdiVariant::FactorFree => C64::from(1.0),
    };

    // t[n] holds T_{n+1}
    let m_max = maps.len() - 1;
    let mut t: Vec<Superoperator> = Vec::with_capacity(m_max);
    for n in 1..=m_max {
        let tn = if n == 1 {
            match variant {
                MpdiVariant::Literal => maps[1] * scale - g1,
                MpdiVariant::FactorFree => maps[1],
            }
        } else {
            let mut acc = CompensatedSum::new();
            acc.add(&maps[n]);
            for m in 1..n {
                acc.add(&-(t[n - m - 1] * maps[m]));
            }
            acc.value() * scale
        };
        t.push(tn);
    }

    let inv_dt2 = C64::from(1.0 / (dt * dt));
    let half: Vec<Superoperator> = t
        .iter()
        .enumerate()
        .map(|(i, tn)| {
            let rhs = if i == 0 { tn - g1 } else { *tn };
            g_half_inv * rhs * inv_dt2
        })
        .collect();

    let avg = C64::from(0.5);
    let mut integer = Vec::with_capacity(half.len());
    integer.push(half[0] * C64::from(1.5) - half[1] * C64::from(0.5));
    for n in 1..half.len() {
        integer.push((half[n - 1] + half[n]) * avg);
    }
    Ok((
        KernelSeries::new(dt, KernelKind::ContinuousHalf, half)?,
        KernelSeries::new(dt, KernelKind::Continuous, integer)?,
    ))
}

/// Propagates maps from half-grid kernels with the MPD/I transfer matrices
/// `T_1 = G_1 + dt^2 G_{1/2} K(dt/2)` and `T_N = dt^2 G_{1/2} K((N - 1/2) dt)`.
pub fn mpdi_propagate(
    kc_half: &KernelSeries,
    h_s: &Op2,
    n_steps: usize,
    trunc: MemoryTruncation,
    variant: MpdiVariant,
) -> Result<MapTrajectory> {
    if kc_half.kind() != KernelKind::ContinuousHalf {
        return Err(Error::validation("MPD/I propagation needs a half-grid kernel series"));
    }
    if n_steps == 0 {
        return Err(Error::validation("n_steps must be at least 1"));
    }
    let dt = kc_half.dt();
    check_dt(dt)?;
    let n_t = trunc.steps(dt);
    let needed = n_t.map_or(n_steps, |nt| nt.min(n_steps));
    if kc_half.len() < needed {
        return Err(Error::TooShort { needed, got: kc_half.len() });
    }
    let (g1, g_half, _) = half_step_propagators(h_s, dt)?;
    let dt2 = C64::from(dt * dt);
    let t: Vec<Superoperator> = (1..=needed)
        .map(|n| {
            let base = g_half * kc_half.kernels()[n - 1] * dt2;
            if n == 1 {
                g1 + base
            } else {
                base
            }
        })
        .collect();
    let t_at = |n: usize| -> Option<&Superoperator> {
        if n_t.is_some_and(|nt| n > nt) {
            None
        } else {
            t.get(n - 1)
        }
    };

    let mut maps = Vec::with_capacity(n_steps + 1);
    maps.push(Superoperator::identity());
    for n in 1..=n_steps {
        let mut acc = CompensatedSum::new();
        if let Some(tn) = t_at(n) {
            match variant {
                MpdiVariant::Literal => {
                    acc.add(&(tn * C64::from(0.5)));
                    if n == 1 {
                        acc.add(&(g1 * C64::from(0.5)));
                    }
                }
                MpdiVariant::FactorFree => acc.add(tn),
            }
        }
        for m in 1..n {
            if let Some(tk) = t_at(n - m) {
                acc.add(&(tk * maps[m]));
            }
        }
        maps.push(acc.value());
    }
    MapTrajectory::from_raw(dt, maps)
}

/// Half-grid samples `K((N - 1/2) dt)`, `N = 1..=count`, from a fine
/// integer-grid kernel. The flag is `true` when some sample point falls
/// between fine grid points and linear interpolation was used.
pub fn half_grid_from_fine(fine: &KernelSeries, dt: f64, count: usize) -> Result<(KernelSeries, bool)> {
    if fine.kind() != KernelKind::Continuous {
        return Err(Error::validation("half-grid sampling needs an integer-grid continuous kernel"));
    }
    check_dt(dt)?;
    let h = fine.dt();
    let mut interpolated = false;
    let mut out = Vec::with_capacity(count);
    for n in 1..=count {
        let x = (n as f64 - 0.5) * dt / h;
        let i = x.floor() as usize;
        let frac = x - i as f64;
        let exact = frac.abs() < 1e-9 || (1.0 - frac).abs() < 1e-9;
        let k = if exact {
            let j = x.round() as usize;
            *fine.kernels().get(j).ok_or(Error::TooShort { needed: j + 1, got: fine.len() })?
        } else {
            interpolated = true;
            let a = fine.kernels().get(i);
            let b = fine.kernels().get(i + 1);
            match (a, b) {
                (Some(a), Some(b)) => a * C64::from(1.0 - frac) + b * C64::from(frac),
                _ => return Err(Error::TooShort { needed: i + 2, got: fine.len() }),
            }
        };
        out.push(k);
    }
    Ok((KernelSeries::new(dt, KernelKind::ContinuousHalf, out)?, interpolated))
}

/// Integer-grid samples `K(N dt)`, `N = 0..count`, from a fine kernel by striding.
pub fn integer_grid_from_fine(fine: &KernelSeries, dt: f64, count: usize) -> Result<KernelSeries> {
    let stride = grid_ratio(dt, fine.dt())?;
    let needed = (count - 1) * stride + 1;
    if fine.len() < needed {
        return Err(Error::TooShort { needed, got: fine.len() });
    }
    Ok(fine.truncated(needed).subsample(stride)?)
}
