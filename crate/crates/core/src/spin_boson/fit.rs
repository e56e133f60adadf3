//! Sum-of-exponentials fit `C(t) ≈ Σ_k α_k e^{−ν_k t}`.
//!
//! The rates are either free complex numbers or constrained to a set closed
//! under complex conjugation. The linear amplitudes are eliminated (variable
//! projection) and the rates refined by Levenberg–Marquardt, starting from a
//! matrix-pencil estimate and from extensions of lower-order fits, followed by
//! a reweighting pass that lowers the maximum deviation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bath_correlation_series, SpectralDensity};
use crate::error::{Error, Result};
use crate::superop::C64;

/// One exponential `α e^{−ν t}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpTerm {
    pub alpha: C64,
    pub nu: C64,
}

/// A validated exponential expansion of a bath correlation function.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpFit {
    terms: Vec<ExpTerm>,
    residual: Option<f64>,
    seed: Option<u64>,
}

impl ExpFit {
    /// Wraps user-supplied terms. Every rate must have a positive real part.
    pub fn new(terms: Vec<ExpTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::validation("an exponential fit needs at least one term"));
        }
        for (k, t) in terms.iter().enumerate() {
            let finite = [t.alpha.re, t.alpha.im, t.nu.re, t.nu.im].iter().all(|x| x.is_finite());
            if !finite || t.nu.re <= 0.0 {
                return Err(Error::validation(format!(
                    "term {k}: rates need Re(nu) > 0 and finite entries (alpha={}, nu={})",
                    t.alpha, t.nu
                )));
            }
        }
        Ok(ExpFit { terms, residual: None, seed: None })
    }

    pub fn terms(&self) -> &[ExpTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Maximum relative deviation from the fitted data, if the fit was computed.
    pub fn residual(&self) -> Option<f64> {
        self.residual
    }

    /// Seed of the restart generator, if the fit was computed.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn eval(&self, t: f64) -> C64 {
        self.terms.iter().map(|x| x.alpha * (-x.nu * t).exp()).sum()
    }

    /// For each term, the index of the term whose rate is its complex
    /// conjugate, or `None` if the rate set is not closed under conjugation.
    pub fn conjugate_partners(&self) -> Option<Vec<usize>> {
        let mut partner = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let target = t.nu.conj();
            let tol = 1e-10 * t.nu.norm().max(1.0);
            let j = self
                .terms
                .iter()
                .enumerate()
                .filter(|(_, u)| (u.nu - target).norm() <= tol)
                .min_by(|a, b| {
                    let da = (a.1.nu - target).norm();
                    let db = (b.1.nu - target).norm();
                    da.total_cmp(&db)
                })?
                .0;
            partner.push(j);
        }
        for (k, &j) in partner.iter().enumerate() {
            if partner[j] != k {
                return None;
            }
        }
        Some(partner)
    }
}

/// Controls for [`fit_exponentials_with`] and [`fit_samples`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    /// Number of uniform samples on `[0, horizon]`.
    pub samples: usize,
    /// Weight of the `t = 0` sample relative to the others.
    pub origin_weight: f64,
    /// Residual above which a warning is logged.
    pub warn_threshold: f64,
    pub restarts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Reweighting passes that trade least-squares optimality for a smaller
    /// maximum deviation.
    pub minimax_iterations: usize,
    pub structure: RateStructure,
    /// Amplitude penalty relative to the largest sample magnitude.
    pub ridge: f64,
}

/// Constraint on the set of fitted rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateStructure {
    /// Arbitrary complex rates.
    #[default]
    Free,
    /// Every complex rate appears together with its conjugate, so the HEOM
    /// needs one mode per term instead of two.
    ConjugateClosed,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            samples: 401,
            origin_weight: 20.0,
            warn_threshold: 1e-3,
            restarts: 3,
            seed: 0x5eed,
            max_iterations: 150,
            minimax_iterations: 40,
            structure: RateStructure::Free,
            ridge: 1e-3,
        }
    }
}

/// Fits `K` exponentials to the bath correlation function on `[0, horizon]`.
pub fn fit_exponentials(sd: &SpectralDensity, k: usize, horizon: f64) -> Result<ExpFit> {
    fit_exponentials_with(sd, k, horizon, &FitOptions::default())
}

pub fn fit_exponentials_with(
    sd: &SpectralDensity,
    k: usize,
    horizon: f64,
    opts: &FitOptions,
) -> Result<ExpFit> {
    sd.validate()?;
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::validation(format!("fit horizon must be positive, got {horizon}")));
    }
    if sd.xi == 0.0 {
        return Err(Error::validation("cannot fit a vanishing correlation function (xi = 0)"));
    }
    let n = opts.samples.max(8);
    let h = horizon / (n - 1) as f64;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let values = bath_correlation_series(&times, sd)?;
    let mut fit = fit_inner(h, &values, k, opts)?;
    // judge the fit on the sample grid and on the midpoints between samples
    let mids: Vec<f64> = (0..n - 1).map(|i| (i as f64 + 0.5) * h).collect();
    let mid_values = bath_correlation_series(&mids, sd)?;
    let scale = values.iter().chain(&mid_values).map(|c| c.norm()).fold(0.0, f64::max);
    let worst = times
        .iter()
        .zip(&values)
        .chain(mids.iter().zip(&mid_values))
        .map(|(&t, c)| (fit.eval(t) - c).norm())
        .fold(0.0, f64::max);
    let residual = worst / scale;
    fit.residual = Some(residual);
    if residual > opts.warn_threshold {
        log::warn!("exponential fit with K={k} has relative residual {residual:.3e}");
    }
    Ok(fit)
}

/// Fits `K` exponentials to samples `values[i] = C(i h)`.
pub fn fit_samples(h: f64, values: &[C64], k: usize, opts: &FitOptions) -> Result<ExpFit> {
    let mut fit = fit_inner(h, values, k, opts)?;
    let scale = values.iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let worst = values
        .iter()
        .enumerate()
        .map(|(i, c)| (fit.eval(i as f64 * h) - c).norm())
        .fold(0.0, f64::max);
    fit.residual = Some(worst / scale);
    if worst / scale > opts.warn_threshold {
        log::warn!("exponential fit with K={k} has relative residual {:.3e}", worst / scale);
    }
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Rate {
    /// `e^{−γt}` with a complex amplitude
    Real(f64),
    /// `e^{−(γ+iω)t}` and `e^{−(γ−iω)t}` with independent amplitudes
    Pair(f64, f64),
    /// `e^{−(γ+iω)t}` alone
    Free(f64, f64),
}

fn flatten(rates: &[Rate]) -> Vec<f64> {
    let mut v = Vec::new();
    for r in rates {
        match *r {
            Rate::Real(g) => v.push(g),
            Rate::Pair(g, w) | Rate::Free(g, w) => {
                v.push(g);
                v.push(w);
            }
        }
    }
    v
}

fn unflatten(shape: &[Rate], theta: &[f64]) -> Vec<Rate> {
    let mut i = 0;
    shape
        .iter()
        .map(|r| match r {
            Rate::Real(_) => {
                i += 1;
                Rate::Real(theta[i - 1])
            }
            Rate::Pair(..) => {
                i += 2;
                Rate::Pair(theta[i - 2], theta[i - 1])
            }
            Rate::Free(..) => {
                i += 2;
                Rate::Free(theta[i - 2], theta[i - 1])
            }
        })
        .collect()
}

/// Exponents `ν` of the basis columns in order.
fn exponents(rates: &[Rate]) -> Vec<C64> {
    let mut v = Vec::new();
    for r in rates {
        match *r {
            Rate::Real(g) => v.push(C64::new(g, 0.0)),
            Rate::Pair(g, w) => {
                v.push(C64::new(g, w));
                v.push(C64::new(g, -w));
            }
            Rate::Free(g, w) => v.push(C64::new(g, w)),
        }
    }
    v
}

struct Problem<'a> {
    h: f64,
    values: &'a [C64],
    weights: Vec<f64>,
    gamma_min: f64,
    gamma_max: f64,
    /// Tikhonov weight on the amplitudes; discourages nearly coincident
    /// rates with large cancelling amplitudes.
    ridge: f64,
}

struct Solution {
    rates: Vec<Rate>,
    coeffs: DVector<C64>,
    cost: f64,
}

impl Problem<'_> {
    fn basis(&self, rates: &[Rate]) -> DMatrix<C64> {
        let nus = exponents(rates);
        DMatrix::from_fn(self.values.len(), nus.len(), |i, j| {
            (-nus[j] * (i as f64 * self.h)).exp() * self.weights[i]
        })
    }

    /// Residual vector (real and imaginary parts, then the amplitude penalty)
    /// and the optimal amplitudes.
    fn residual(&self, rates: &[Rate]) -> (DVector<f64>, DVector<C64>) {
        let a = self.basis(rates);
        let (n, m) = a.shape();
        let rows = if self.ridge > 0.0 { n + m } else { n };
        let mut aug = DMatrix::zeros(rows, m);
        aug.rows_mut(0, n).copy_from(&a);
        let mut b = DVector::zeros(rows);
        for i in 0..n {
            b[i] = self.values[i] * self.weights[i];
        }
        if self.ridge > 0.0 {
            for j in 0..m {
                aug[(n + j, j)] = C64::new(self.ridge, 0.0);
            }
        }
        let x = aug
            .clone()
            .svd(true, true)
            .solve(&b, 1e-13)
            .unwrap_or_else(|_| DVector::zeros(m));
        let r = &aug * &x - b;
        let flat = DVector::from_iterator(2 * r.len(), r.iter().flat_map(|z| [z.re, z.im]));
        (flat, x)
    }

    fn project(&self, theta: &mut [f64], shape: &[Rate]) {
        let nyquist = std::f64::consts::PI / self.h;
        let mut i = 0;
        for r in shape {
            theta[i] = theta[i].clamp(self.gamma_min, self.gamma_max);
            match r {
                Rate::Real(_) => {}
                Rate::Pair(..) => {
                    theta[i + 1] = theta[i + 1].abs().clamp(1e-8, nyquist);
                    i += 1;
                }
                Rate::Free(..) => {
                    theta[i + 1] = theta[i + 1].clamp(-nyquist, nyquist);
                    i += 1;
                }
            }
            i += 1;
        }
    }

    fn solve(&self, start: &[Rate], max_iterations: usize) -> Solution {
        let shape = start.to_vec();
        let mut theta = flatten(start);
        self.project(&mut theta, &shape);
        let (mut r, mut x) = self.residual(&unflatten(&shape, &theta));
        let mut cost = r.norm_squared();
        let mut lambda = 1e-3;
        let p = theta.len();
        for _ in 0..max_iterations {
            let mut jac = DMatrix::zeros(r.len(), p);
            for k in 0..p {
                let step = 1e-7 * theta[k].abs().max(1e-3);
                let mut tp = theta.clone();
                tp[k] += step;
                let (rp, _) = self.residual(&unflatten(&shape, &tp));
                jac.set_column(k, &((rp - &r) / step));
            }
            let jt = jac.transpose();
            let jtj = &jt * &jac;
            let g = &jt * &r;
            let mut accepted = false;
            for _ in 0..12 {
                let mut a = jtj.clone();
                for d in 0..p {
                    a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
                }
                let Some(delta) = a.lu().solve(&(-&g)) else {
                    lambda *= 4.0;
                    continue;
                };
                let mut trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
                self.project(&mut trial, &shape);
                let (rt, xt) = self.residual(&unflatten(&shape, &trial));
                let ct = rt.norm_squared();
                if ct.is_finite() && ct < cost {
                    let gain = (cost - ct) / cost.max(f64::MIN_POSITIVE);
                    theta = trial;
                    r = rt;
                    x = xt;
                    cost = ct;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = gain > 1e-12;
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        Solution { rates: unflatten(&shape, &theta), coeffs: x, cost }
    }

    /// Unweighted deviation `|fit − data|` at every sample.
    fn deviations(&self, sol: &Solution) -> Vec<f64> {
        let a = self.basis(&sol.rates);
        let fitted = &a * &sol.coeffs;
        (0..self.values.len())
            .map(|i| (fitted[i] / self.weights[i] - self.values[i]).norm())
            .collect()
    }
}

fn to_fit(sol: &Solution) -> Result<ExpFit> {
    let terms = exponents(&sol.rates)
        .into_iter()
        .zip(sol.coeffs.iter())
        .map(|(nu, &alpha)| ExpTerm { alpha, nu })
        .collect();
    ExpFit::new(terms)
}

/// Lawson-type reweighting: samples with large deviations gain weight and
/// the rates are re-optimized. Returns the iterate with the smallest maximum
/// deviation (the input if none improves on it).
fn minimax(mut prob: Problem<'_>, start: Solution, opts: &FitOptions) -> Solution {
    // the reweighting acts on top of the base weights, so the origin stays pinned
    let base = prob.weights.clone();
    let weighted = |prob: &Problem<'_>, sol: &Solution| -> Vec<f64> {
        prob.deviations(sol).iter().zip(&base).map(|(e, b)| e * b).collect()
    };
    let mut dev = weighted(&prob, &start);
    let mut best_max = dev.iter().cloned().fold(0.0, f64::max);
    let mut best = start;
    let mut rates = best.rates.clone();
    let mut lawson = vec![1.0; base.len()];
    for _ in 0..opts.minimax_iterations {
        let total: f64 = lawson.iter().zip(&dev).map(|(l, e)| l * e).sum();
        if !(total > 0.0) {
            break;
        }
        let n = base.len() as f64;
        for ((l, e), (w, b)) in lawson.iter_mut().zip(&dev).zip(prob.weights.iter_mut().zip(&base)) {
            *l = (*l * e * n / total).max(1e-16);
            *w = b * l.sqrt();
        }
        let sol = prob.solve(&rates, opts.max_iterations);
        dev = weighted(&prob, &sol);
        let m = dev.iter().cloned().fold(0.0, f64::max);
        rates = sol.rates.clone();
        if m < best_max {
            best_max = m;
            best = sol;
        }
    }
    best
}

fn pencil_svd(hankel: DMatrix<C64>, k: usize, p: usize) -> Option<DMatrix<C64>> {
    let svd = hankel.svd(false, true);
    let vt = svd.v_t?;
    if vt.nrows() < k {
        return None;
    }
    let vk = vt.rows(0, k).adjoint();
    let v1 = vk.rows(0, p).into_owned();
    let v2 = vk.rows(1, p).into_owned();
    Some(v1.pseudo_inverse(1e-14).ok()? * v2)
}

/// Matrix-pencil estimate of `k` rates with the requested structure.
fn pencil_rates(h: f64, values: &[C64], k: usize, closed: bool, prob: &Problem<'_>) -> Option<Vec<Rate>> {
    let stride = values.len().div_ceil(240).max(1);
    let y: Vec<C64> = values.iter().step_by(stride).copied().collect();
    let hp = h * stride as f64;
    let n = y.len();
    let p = n / 3;
    if p < k || n - p < k {
        return None;
    }
    let rows = n - p;
    let (gmin, gmax) = (prob.gamma_min, prob.gamma_max);
    if !closed {
        let hankel = DMatrix::from_fn(rows, p + 1, |i, j| y[i + j]);
        let z = pencil_svd(hankel, k, p)?;
        let eig = nalgebra::Schur::new(z).eigenvalues()?;
        return Some(
            eig.iter()
                .map(|z| {
                    let nu = -z.ln() / hp;
                    Rate::Free(nu.re.clamp(gmin, gmax), nu.im)
                })
                .collect(),
        );
    }
    // stacking the real and imaginary channels keeps the pencil real, so its
    // eigenvalues come in conjugate pairs
    let hankel = DMatrix::from_fn(2 * rows, p + 1, |i, j| {
        let v = if i < rows { y[i + j].re } else { y[i - rows + j].im };
        C64::new(v, 0.0)
    });
    let z = pencil_svd(hankel, k, p)?;
    let z = z.map(|c| c.re);
    let eig = z.complex_eigenvalues();
    let mut rates = Vec::new();
    let mut used = 0;
    for z in eig.iter() {
        let nu = -z.ln() / hp;
        let g = nu.re.clamp(gmin, gmax);
        if z.im.abs() <= 1e-10 * z.norm() {
            rates.push(Rate::Real(g));
            used += 1;
        } else if z.im > 0.0 && used + 2 <= k {
            rates.push(Rate::Pair(g, nu.im.abs()));
            used += 2;
        }
    }
    while used < k {
        rates.push(Rate::Real(gmin.max(1.0 / (hp * n as f64))));
        used += 1;
    }
    Some(rates)
}

fn fit_inner(h: f64, values: &[C64], k: usize, opts: &FitOptions) -> Result<ExpFit> {
    if k == 0 {
        return Err(Error::validation("number of exponentials must be at least 1"));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::validation(format!("sample spacing must be positive, got {h}")));
    }
    if values.len() < 2 * k + 2 {
        return Err(Error::TooShort { needed: 2 * k + 2, got: values.len() });
    }
    if values.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::validation("samples must be finite"));
    }
    let closed = opts.structure == RateStructure::ConjugateClosed;
    let horizon = h * (values.len() - 1) as f64;
    let mut weights = vec![1.0; values.len()];
    weights[0] = opts.origin_weight;
    let base_weights = weights.clone();
    let prob = Problem {
        h,
        values,
        weights,
        gamma_min: 1e-3 / horizon,
        gamma_max: 5.0 / h,
        ridge: opts.ridge * values.iter().map(|v| v.norm()).fold(0.0, f64::max),
    };
    let lo = 1.0 / horizon;
    let hi = 0.5 / h;
    let grid: Vec<f64> = (0..6).map(|j| lo * (hi / lo).powf(j as f64 / 5.0)).collect();
    let freqs = [2.0 * lo, 0.1 * hi, 0.5 * hi];
    let free_freqs = [0.1 * hi];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // best[c] is the best solution using exactly c exponentials
    let mut best: Vec<Option<Solution>> = Vec::with_capacity(k + 1);
    best.push(None);
    for count in 1..=k {
        let mut starts: Vec<Vec<Rate>> = Vec::new();
        if let Some(r) = pencil_rates(h, values, count, closed, &prob) {
            starts.push(r);
        }
        let prev = best[count - 1].as_ref().map_or_else(Vec::new, |s| s.rates.clone());
        for &g in &grid {
            let mut r = prev.clone();
            r.push(Rate::Real(g));
            starts.push(r);
            if !closed {
                for w in free_freqs {
                    for sign in [1.0, -1.0] {
                        let mut r = prev.clone();
                        r.push(Rate::Free(g, sign * w));
                        starts.push(r);
                    }
                }
            }
        }
        if closed && count >= 2 {
            let base = if count == 2 { Some(Vec::new()) } else { best[count - 2].as_ref().map(|s| s.rates.clone()) };
            if let Some(base) = base {
                for &g in grid.iter().step_by(2) {
                    for w in freqs {
                        let mut r = base.clone();
                        r.push(Rate::Pair(g, w));
                        starts.push(r);
                    }
                }
            }
        }
        let mut winner: Option<Solution> = None;
        for s in starts {
            let sol = prob.solve(&s, opts.max_iterations);
            if winner.as_ref().map_or(true, |w| sol.cost < w.cost) {
                winner = Some(sol);
            }
        }
        let mut winner = winner.expect("at least one start");
        for _ in 0..opts.restarts {
            let mut f = |x: f64| x * (0.5 * rng.gen_range(-1.0..1.0f64)).exp();
            let perturbed: Vec<Rate> = winner
                .rates
                .iter()
                .map(|r| match *r {
                    Rate::Real(g) => Rate::Real(f(g)),
                    Rate::Pair(g, w) => Rate::Pair(f(g), f(w)),
                    Rate::Free(g, w) => Rate::Free(f(g), f(w)),
                })
                .collect();
            let sol = prob.solve(&perturbed, opts.max_iterations);
            if sol.cost < winner.cost {
                winner = sol;
            }
        }
        best.push(Some(winner));
    }
    let sol = best.pop().flatten().expect("fit for requested order");
    let mut sol = minimax(prob, sol, opts);
    // polish without the penalty unless that reintroduces large cancelling
    // terms or worsens the worst-case deviation
    let plain = Problem {
        h,
        values,
        weights: base_weights,
        gamma_min: 1e-3 / horizon,
        gamma_max: 5.0 / h,
        ridge: 0.0,
    };
    let biggest = |v: &DVector<C64>| v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let worst = |s: &Solution| plain.deviations(s).into_iter().fold(0.0, f64::max);
    let (_, x) = plain.residual(&sol.rates);
    let fixed = Solution { rates: sol.rates.clone(), coeffs: x, cost: 0.0 };
    let polished = plain.solve(&sol.rates, opts.max_iterations);
    for cand in [fixed, polished] {
        if biggest(&cand.coeffs) <= 2.0 * biggest(&sol.coeffs) && worst(&cand) < worst(&sol) {
            sol = cand;
        }
    }
    let mut fit = to_fit(&sol)?;
    fit.seed = Some(opts.seed);
    Ok(fit)
}
