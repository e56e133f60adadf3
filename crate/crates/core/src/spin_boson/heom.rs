//! Dense hierarchical equations of motion for `V = σ_z` coupling.
//!
//! With `C(t) = Σ_j c_j e^{−ν_j t}` and `C*(t) = Σ_j c̃_j e^{−ν_j t}` over a
//! common set of modes, the scaled auxiliary operators obey
//!
//! ```text
//! dρ_n/dt = −i[H_s, ρ_n] − Σ_j n_j ν_j ρ_n
//!           − i Σ_j √(n_j+1) s_j [V, ρ_{n+e_j}]
//!           − i Σ_j (√n_j / s_j) (c_j V ρ_{n−e_j} − c̃_j ρ_{n−e_j} V)
//! ```
//!
//! and `ρ_0` is the reduced density matrix. The equations are integrated with
//! classical fourth-order Runge–Kutta at a fixed step.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExpFit, SystemSpec};
use crate::error::{Error, Result};
use crate::superop::{check_dt, unvec_op, vec_op, MapTrajectory, Op2, OpVec, Superoperator, C64};

/// Hierarchy truncation rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Truncation {
    /// Keep all `n` with `Σ_j n_j ≤ depth`.
    TotalDepth { depth: usize },
    /// Keep `n_j ≤ L_j` with `L_j = min(L_max, max(L_min, L_max ν_min / Re ν_j))`.
    PerMode { l_max: usize, l_min: usize },
}

/// HEOM settings: truncation, Runge–Kutta step and a cap on the number of
/// auxiliary density operators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeomConfig {
    pub truncation: Truncation,
    pub step: f64,
    #[serde(default = "default_max_ados")]
    pub max_ados: usize,
}

fn default_max_ados() -> usize {
    200_000
}

impl HeomConfig {
    pub fn total_depth(depth: usize, step: f64) -> Result<Self> {
        let cfg = HeomConfig { truncation: Truncation::TotalDepth { depth }, step, max_ados: default_max_ados() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn per_mode(l_max: usize, l_min: usize, step: f64) -> Result<Self> {
        let cfg = HeomConfig {
            truncation: Truncation::PerMode { l_max, l_min },
            step,
            max_ados: default_max_ados(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_dt(self.step)?;
        match self.truncation {
            Truncation::TotalDepth { depth } if depth < 1 => {
                Err(Error::validation("total depth must be at least 1"))
            }
            Truncation::PerMode { l_max, l_min } if l_min < 1 || l_max < l_min => Err(Error::validation(
                format!("per-mode depths need L_max >= L_min >= 1 (got L_max={l_max}, L_min={l_min})"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Mode {
    nu: C64,
    c: C64,
    c_tilde: C64,
    scale: f64,
}

fn modes_of(fit: &ExpFit) -> Vec<Mode> {
    let terms = fit.terms();
    let make = |nu: C64, c: C64, c_tilde: C64| {
        let s = c.norm().max(c_tilde.norm()).sqrt();
        Mode { nu, c, c_tilde, scale: if s > 0.0 { s } else { 1.0 } }
    };
    match fit.conjugate_partners() {
        Some(partner) => terms
            .iter()
            .enumerate()
            .map(|(k, t)| make(t.nu, t.alpha, terms[partner[k]].alpha.conj()))
            .collect(),
        None => terms
            .iter()
            .flat_map(|t| {
                [
                    make(t.nu, t.alpha, C64::new(0.0, 0.0)),
                    make(t.nu.conj(), C64::new(0.0, 0.0), t.alpha.conj()),
                ]
            })
            .collect(),
    }
}

fn per_mode_depths(modes: &[Mode], l_max: usize, l_min: usize) -> Vec<usize> {
    let nu_min = modes.iter().map(|m| m.nu.re).fold(f64::INFINITY, f64::min);
    modes
        .iter()
        .map(|m| {
            let l = (l_max as f64 * nu_min / m.nu.re).floor();
            (l.max(l_min as f64) as usize).min(l_max)
        })
        .collect()
}

fn binomial_saturating(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// Number of auxiliary density operators (including `ρ_0`) the truncation keeps.
pub fn hierarchy_size(fit: &ExpFit, truncation: &Truncation) -> usize {
    let modes = modes_of(fit);
    match *truncation {
        Truncation::TotalDepth { depth } => binomial_saturating(depth + modes.len(), modes.len()),
        Truncation::PerMode { l_max, l_min } => per_mode_depths(&modes, l_max, l_min)
            .iter()
            .fold(1usize, |acc, &l| acc.saturating_mul(l + 1)),
    }
}

struct Hierarchy {
    damping: Vec<C64>,
    /// (index of n + e_j, coefficient of [V, ρ])
    up: Vec<Vec<(usize, C64)>>,
    /// (index of n − e_j, coefficient of Vρ, coefficient of ρV)
    down: Vec<Vec<(usize, C64, C64)>>,
}

fn enumerate(limits: &[usize], total: Option<usize>) -> Vec<Vec<u16>> {
    fn rec(j: usize, limits: &[usize], left: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        if j == limits.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=limits[j].min(left) {
            cur.push(v as u16);
            rec(j + 1, limits, left - v, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, limits, total.unwrap_or(usize::MAX), &mut Vec::new(), &mut out);
    // ρ_0 first
    out.sort_by_key(|n| n.iter().map(|&x| x as usize).sum::<usize>());
    out
}

fn build(modes: &[Mode], truncation: &Truncation) -> Hierarchy {
    let (limits, total) = match *truncation {
        Truncation::TotalDepth { depth } => (vec![depth; modes.len()], Some(depth)),
        Truncation::PerMode { l_max, l_min } => (per_mode_depths(modes, l_max, l_min), None),
    };
    let ados = enumerate(&limits, total);
    let index: HashMap<&[u16], usize> = ados.iter().enumerate().map(|(i, n)| (n.as_slice(), i)).collect();
    let minus_i = C64::new(0.0, -1.0);
    let mut damping = Vec::with_capacity(ados.len());
    let mut up = Vec::with_capacity(ados.len());
    let mut down = Vec::with_capacity(ados.len());
    let mut key = Vec::new();
    for n in &ados {
        damping.push(n.iter().zip(modes).map(|(&k, m)| k as f64 * m.nu).sum());
        let mut u = Vec::new();
        let mut d = Vec::new();
        for (j, m) in modes.iter().enumerate() {
            let nj = n[j] as f64;
            key.clone_from(n);
            key[j] += 1;
            if let Some(&i) = index.get(key.as_slice()) {
                u.push((i, minus_i * (nj + 1.0).sqrt() * m.scale));
            }
            if n[j] > 0 {
                key.clone_from(n);
                key[j] -= 1;
                let i = index[key.as_slice()];
                let f = nj.sqrt() / m.scale;
                d.push((i, minus_i * m.c * f, -minus_i * m.c_tilde * f));
            }
        }
        up.push(u);
        down.push(d);
    }
    Hierarchy { damping, up, down }
}

#[inline]
fn v_left(r: &Op2) -> Op2 {
    Op2::new(r[(0, 0)], r[(0, 1)], -r[(1, 0)], -r[(1, 1)])
}

#[inline]
fn v_right(r: &Op2) -> Op2 {
    Op2::new(r[(0, 0)], -r[(0, 1)], r[(1, 0)], -r[(1, 1)])
}

impl Hierarchy {
    fn rhs(&self, h: &Op2, state: &[Op2], out: &mut [Op2]) {
        let mi = C64::new(0.0, -1.0);
        for (i, o) in out.iter_mut().enumerate() {
            let r = &state[i];
            let mut acc = (h * r - r * h) * mi - r * self.damping[i];
            for &(j, coef) in &self.up[i] {
                let q = &state[j];
                acc += (v_left(q) - v_right(q)) * coef;
            }
            for &(j, cl, cr) in &self.down[i] {
                let q = &state[j];
                acc += v_left(q) * cl + v_right(q) * cr;
            }
            *o = acc;
        }
    }

    /// Propagates one initial operator and returns `ρ_0` at every output step.
    fn run(&self, h: &Op2, rho0: Op2, step: f64, substeps: usize, n_steps: usize) -> Result<Vec<OpVec>> {
        let n = self.damping.len();
        let mut y = vec![Op2::zeros(); n];
        y[0] = rho0;
        let mut k1 = vec![Op2::zeros(); n];
        let mut k2 = vec![Op2::zeros(); n];
        let mut k3 = vec![Op2::zeros(); n];
        let mut k4 = vec![Op2::zeros(); n];
        let mut tmp = vec![Op2::zeros(); n];
        let mut out = Vec::with_capacity(n_steps + 1);
        out.push(vec_op(&y[0]));
        for s in 0..n_steps {
            for _ in 0..substeps {
                self.rhs(h, &y, &mut k1);
                for i in 0..n {
                    tmp[i] = y[i] + k1[i] * C64::from(0.5 * step);
                }
                self.rhs(h, &tmp, &mut k2);
                for i in 0..n {
                    tmp[i] = y[i] + k2[i] * C64::from(0.5 * step);
                }
                self.rhs(h, &tmp, &mut k3);
                for i in 0..n {
                    tmp[i] = y[i] + k3[i] * C64::from(step);
                }
                self.rhs(h, &tmp, &mut k4);
                for i in 0..n {
                    y[i] += (k1[i] + (k2[i] + k3[i]) * C64::from(2.0) + k4[i]) * C64::from(step / 6.0);
                }
            }
            let v = vec_op(&y[0]);
            if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite() || z.norm() > 1e6) {
                return Err(Error::Convergence(format!(
                    "HEOM integration diverged at output step {} (reduce the step {step})",
                    s + 1
                )));
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Dynamical maps `U_0 .. U_{n_steps}` at spacing `dt`, assembled from the
/// evolution of the four basis operators `|a⟩⟨b|`.
pub fn heom_propagate(
    sys: &SystemSpec,
    fit: &ExpFit,
    cfg: &HeomConfig,
    dt: f64,
    n_steps: usize,
) -> Result<MapTrajectory> {
    cfg.validate()?;
    check_dt(dt)?;
    let substeps = (dt / cfg.step).round();
    if substeps < 1.0 || ((substeps * cfg.step - dt) / dt).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "output spacing {dt} must be a positive integer multiple of the HEOM step {}",
            cfg.step
        )));
    }
    let size = hierarchy_size(fit, &cfg.truncation);
    if size > cfg.max_ados {
        return Err(Error::OverBudget { what: "HEOM auxiliary density operators", size, budget: cfg.max_ados });
    }
    let modes = modes_of(fit);
    let hier = build(&modes, &cfg.truncation);
    let h = sys.hamiltonian();
    log::debug!("HEOM with {} modes and {} auxiliary operators", modes.len(), hier.damping.len());
    let columns: Vec<Vec<OpVec>> = (0..4)
        .into_par_iter()
        .map(|k| {
            let mut e = OpVec::zeros();
            e[k] = C64::new(1.0, 0.0);
            hier.run(&h, unvec_op(&e), cfg.step, substeps as usize, n_steps)
        })
        .collect::<Result<_>>()?;
    let maps = (0..=n_steps)
        .map(|n| Superoperator::from_columns(&[columns[0][n], columns[1][n], columns[2][n], columns[3][n]]))
        .collect();
    MapTrajectory::from_raw(dt, maps)
}
