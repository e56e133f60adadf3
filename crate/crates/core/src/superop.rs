//! Liouville-space algebra for a single qubit.
//!
//! Operators on the two-level Hilbert space are `2x2` complex matrices and are
//! vectorized by column stacking, so `vec(rho) = (rho_00, rho_10, rho_01, rho_11)`
//! and `vec(A X B) = (B^T ⊗ A) vec(X)`. Superoperators are `4x4` complex
//! matrices acting on those vectors from the left.

use nalgebra::{Matrix2, Matrix4, Vector4};
pub use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// A `2x2` complex operator on the system Hilbert space.
pub type Op2 = Matrix2<C64>;
/// A `4x4` complex matrix acting on column-stacked `2x2` operators.
pub type Superoperator = Matrix4<C64>;
/// A column-stacked `2x2` operator.
pub type OpVec = Vector4<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Validation thresholds. The defaults are the ones used throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub hermitian: f64,
    pub trace: f64,
    pub min_eigenvalue: f64,
    pub identity: f64,
    pub trace_preservation: f64,
    pub normality: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            hermitian: 1e-12,
            trace: 1e-12,
            min_eigenvalue: -1e-10,
            identity: 1e-12,
            trace_preservation: 1e-10,
            normality: 1e-10,
        }
    }
}

pub fn sigma_x() -> Op2 {
    Op2::new(ZERO, ONE, ONE, ZERO)
}

pub fn sigma_y() -> Op2 {
    Op2::new(ZERO, -I, I, ZERO)
}

pub fn sigma_z() -> Op2 {
    Op2::new(ONE, ZERO, ZERO, -ONE)
}

/// Two-level Hamiltonian `epsilon * sigma_z + omega * sigma_x`.
pub fn two_level_hamiltonian(epsilon: f64, omega: f64) -> Op2 {
    sigma_z() * C64::from(epsilon) + sigma_x() * C64::from(omega)
}

/// Largest entrywise deviation from Hermiticity.
pub fn hermiticity_defect(h: &Op2) -> f64 {
    (h - h.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// A valid single-qubit density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix(Op2);

impl DensityMatrix {
    pub fn new(entries: Op2) -> Result<Self> {
        Self::with_tolerances(entries, &Tolerances::default())
    }

    pub fn with_tolerances(entries: Op2, tol: &Tolerances) -> Result<Self> {
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::validation("density matrix has non-finite entries"));
        }
        let herm = hermiticity_defect(&entries);
        if herm > tol.hermitian {
            return Err(Error::validation(format!(
                "density matrix is not Hermitian (defect {herm:.3e})"
            )));
        }
        let tr = entries[(0, 0)] + entries[(1, 1)];
        if (tr - ONE).norm() > tol.trace {
            return Err(Error::validation(format!(
                "density matrix trace is {tr}, expected 1"
            )));
        }
        let (lo, _) = hermitian_eigenvalues(&entries);
        if lo < tol.min_eigenvalue {
            return Err(Error::validation(format!(
                "density matrix has negative eigenvalue {lo:.3e}"
            )));
        }
        Ok(DensityMatrix(entries))
    }

    /// `|0><0|`
    pub fn ground() -> Self {
        DensityMatrix(Op2::new(ONE, ZERO, ZERO, ZERO))
    }

    /// `|1><1|`
    pub fn excited() -> Self {
        DensityMatrix(Op2::new(ZERO, ZERO, ZERO, ONE))
    }

    /// Projector onto `(|0> + |1>)/sqrt(2)`.
    pub fn plus() -> Self {
        let h = C64::from(0.5);
        DensityMatrix(Op2::new(h, h, h, h))
    }

    pub fn maximally_mixed() -> Self {
        let h = C64::from(0.5);
        DensityMatrix(Op2::new(h, ZERO, ZERO, h))
    }

    pub fn matrix(&self) -> &Op2 {
        &self.0
    }

    pub fn into_inner(self) -> Op2 {
        self.0
    }
}

/// Eigenvalues `(low, high)` of the Hermitian part of a `2x2` matrix.
fn hermitian_eigenvalues(m: &Op2) -> (f64, f64) {
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)].conj());
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
    (mean - rad, mean + rad)
}

/// Column-stacking vectorization of any `2x2` operator.
pub fn vec_op(a: &Op2) -> OpVec {
    OpVec::new(a[(0, 0)], a[(1, 0)], a[(0, 1)], a[(1, 1)])
}

/// Inverse of [`vec_op`].
pub fn unvec_op(v: &OpVec) -> Op2 {
    Op2::new(v[0], v[2], v[1], v[3])
}

pub fn vectorize(rho: &DensityMatrix) -> OpVec {
    vec_op(rho.matrix())
}

/// Rebuilds a density matrix from its vectorization, validating the result.
pub fn devectorize(v: &OpVec) -> Result<DensityMatrix> {
    DensityMatrix::new(unvec_op(v))
}

/// The row vector `<<I|` with `<<I| vec(A) = Tr A`.
pub fn trace_row() -> nalgebra::RowVector4<C64> {
    nalgebra::RowVector4::new(ONE, ZERO, ZERO, ONE)
}

/// `vec(I)`
pub fn identity_vec() -> OpVec {
    OpVec::new(ONE, ZERO, ZERO, ONE)
}

/// Kronecker product of two `2x2` matrices.
pub fn kron2(a: &Op2, b: &Op2) -> Superoperator {
    let mut out = Superoperator::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    out[(2 * i + k, 2 * j + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Superoperator of `X -> A X`.
pub fn left_mul(a: &Op2) -> Superoperator {
    kron2(&Op2::identity(), a)
}

/// Superoperator of `X -> X B`.
pub fn right_mul(b: &Op2) -> Superoperator {
    kron2(&b.transpose(), &Op2::identity())
}

/// `L_s = [H, .]` for a Hermitian `H`.
pub fn commutator_superop(h: &Op2) -> Result<Superoperator> {
    let defect = hermiticity_defect(h);
    if defect > Tolerances::default().hermitian {
        return Err(Error::validation(format!(
            "Hamiltonian is not Hermitian (defect {defect:.3e})"
        )));
    }
    Ok(left_mul(h) - right_mul(h))
}

/// `-i L_s`, the closed-system generator.
pub fn liouvillian_generator(h: &Op2) -> Result<Superoperator> {
    Ok(commutator_superop(h)? * (-I))
}

/// Frobenius norm.
pub fn frob_norm(a: &Superoperator) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest entrywise modulus of `a - b`.
pub fn max_abs_diff(a: &Superoperator, b: &Superoperator) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// `|| <<I| A - <<I| ||`, zero for trace-preserving maps.
pub fn trace_preservation_defect(a: &Superoperator) -> f64 {
    let row = trace_row() * a - trace_row();
    row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `|| <<I| A ||`, zero for generators of trace-preserving maps.
pub fn trace_annihilation_defect(a: &Superoperator) -> f64 {
    let row = trace_row() * a;
    row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Anticommutator `{A, B} = AB + BA`.
pub fn anticommutator(a: &Superoperator, b: &Superoperator) -> Superoperator {
    a * b + b * a
}

/// Matrix exponential `exp(t A)`.
///
/// Normal inputs (within the default normality tolerance) go through a Schur
/// decomposition, which is diagonal for normal matrices. Everything else uses
/// scaling and squaring with the degree-13 Padé approximant.
pub fn expm(a: &Superoperator, t: f64) -> Superoperator {
    let m = a * C64::from(t);
    if is_normal(&m, Tolerances::default().normality) {
        expm_normal(&m)
    } else {
        expm_pade(&m)
    }
}

fn is_normal(m: &Superoperator, tol: f64) -> bool {
    let scale = frob_norm(m);
    if scale == 0.0 {
        return true;
    }
    let comm = m * m.adjoint() - m.adjoint() * m;
    frob_norm(&comm) <= tol * scale * scale
}

pub(crate) fn expm_normal(m: &Superoperator) -> Superoperator {
    let (q, t) = m.schur().unpack();
    let mut d = Superoperator::zeros();
    for i in 0..4 {
        d[(i, i)] = t[(i, i)].exp();
    }
    q * d * q.adjoint()
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(m: &Superoperator) -> f64 {
    (0..4)
        .map(|j| (0..4).map(|i| m[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub(crate) fn expm_pade(m: &Superoperator) -> Superoperator {
    let norm = one_norm(m);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = m * C64::from(0.5f64.powi(s));
    let b = |k: usize| C64::from(PADE13[k]);
    let id = Superoperator::identity();
    let a2 = a * a;
    let a4 = a2 * a2;
    let a6 = a4 * a2;
    let u_inner = a6 * (a6 * b(13) + a4 * b(11) + a2 * b(9))
        + a6 * b(7)
        + a4 * b(5)
        + a2 * b(3)
        + id * b(1);
    let u = a * u_inner;
    let v = a6 * (a6 * b(12) + a4 * b(10) + a2 * b(8))
        + a6 * b(6)
        + a4 * b(4)
        + a2 * b(2)
        + id * b(0);
    let p = v + u;
    let q = v - u;
    let mut r = q
        .lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular after scaling");
    for _ in 0..s {
        r = r * r;
    }
    r
}

/// Neumaier-compensated accumulator for sums of superoperators.
#[derive(Clone, Debug)]
pub struct CompensatedSum {
    sum: [f64; 32],
    comp: [f64; 32],
}

impl Default for CompensatedSum {
    fn default() -> Self {
        CompensatedSum {
            sum: [0.0; 32],
            comp: [0.0; 32],
        }
    }
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, a: &Superoperator) {
        for (k, z) in a.iter().enumerate() {
            neumaier(&mut self.sum[2 * k], &mut self.comp[2 * k], z.re);
            neumaier(&mut self.sum[2 * k + 1], &mut self.comp[2 * k + 1], z.im);
        }
    }

    pub fn value(&self) -> Superoperator {
        Superoperator::from_iterator((0..16).map(|k| {
            C64::new(
                self.sum[2 * k] + self.comp[2 * k],
                self.sum[2 * k + 1] + self.comp[2 * k + 1],
            )
        }))
    }
}

#[inline]
fn neumaier(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

/// A sequence of dynamical maps `U_0 .. U_M` on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MapTrajectory {
    dt: f64,
    maps: Vec<Superoperator>,
}

impl MapTrajectory {
    /// Builds a trajectory, checking `U_0 = I` and trace preservation of every map.
    pub fn new(dt: f64, maps: Vec<Superoperator>) -> Result<Self> {
        Self::with_tolerances(dt, maps, &Tolerances::default())
    }

    pub fn with_tolerances(dt: f64, maps: Vec<Superoperator>, tol: &Tolerances) -> Result<Self> {
        let traj = Self::from_raw(dt, maps)?;
        let u0 = &traj.maps[0];
        if max_abs_diff(u0, &Superoperator::identity()) > tol.identity {
            return Err(Error::validation("first map of a trajectory must be the identity"));
        }
        for (n, u) in traj.maps.iter().enumerate() {
            let d = trace_preservation_defect(u);
            if d > tol.trace_preservation {
                return Err(Error::validation(format!(
                    "map {n} is not trace preserving (defect {d:.3e})"
                )));
            }
        }
        Ok(traj)
    }

    /// Builds a trajectory checking only the grid and finiteness. Used for
    /// maps propagated from arbitrary kernels, which need not preserve trace.
    pub fn from_raw(dt: f64, maps: Vec<Superoperator>) -> Result<Self> {
        check_dt(dt)?;
        if maps.is_empty() {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        if maps.iter().any(|u| u.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())) {
            return Err(Error::Convergence("trajectory contains non-finite entries".into()));
        }
        Ok(MapTrajectory { dt, maps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn maps(&self) -> &[Superoperator] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Number of steps `M` (one less than the number of maps).
    pub fn n_steps(&self) -> usize {
        self.maps.len() - 1
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.maps.len()).map(move |n| n as f64 * self.dt)
    }

    /// Keeps every `stride`-th map, giving a trajectory with step `stride * dt`.
    pub fn subsample(&self, stride: usize) -> Result<MapTrajectory> {
        if stride == 0 {
            return Err(Error::validation("stride must be positive"));
        }
        Ok(MapTrajectory {
            dt: self.dt * stride as f64,
            maps: self.maps.iter().step_by(stride).copied().collect(),
        })
    }

    /// Keeps the first `n_maps` maps.
    pub fn truncated(&self, n_maps: usize) -> MapTrajectory {
        MapTrajectory {
            dt: self.dt,
            maps: self.maps[..n_maps.min(self.maps.len()).max(1)].to_vec(),
        }
    }

    /// Apply every map to `rho0`.
    pub fn states(&self, rho0: &DensityMatrix) -> Vec<Op2> {
        let v0 = vectorize(rho0);
        self.maps.iter().map(|u| unvec_op(&(u * v0))).collect()
    }
}

pub(crate) fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

/// How a [`KernelSeries`] is sampled and what it represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Discrete transfer-tensor kernels `K_N`, entry `N` at `t = N dt`.
    Discrete,
    /// Continuous memory kernel `K(t)` sampled at `t = N dt`.
    Continuous,
    /// Continuous memory kernel sampled at `t = (N + 1/2) dt`.
    ContinuousHalf,
}

impl KernelKind {
    /// Time offset of entry 0 in units of `dt`.
    pub fn offset(self) -> f64 {
        match self {
            KernelKind::ContinuousHalf => 0.5,
            _ => 0.0,
        }
    }
}

/// A uniformly sampled series of kernel superoperators.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSeries {
    dt: f64,
    kind: KernelKind,
    kernels: Vec<Superoperator>,
}

impl KernelSeries {
    pub fn new(dt: f64, kind: KernelKind, kernels: Vec<Superoperator>) -> Result<Self> {
        check_dt(dt)?;
        if kernels.iter().any(|k| k.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())) {
            return Err(Error::Convergence("kernel series contains non-finite entries".into()));
        }
        Ok(KernelSeries { dt, kind, kernels })
    }

    pub fn zeros(dt: f64, kind: KernelKind, len: usize) -> Result<Self> {
        Self::new(dt, kind, vec![Superoperator::zeros(); len])
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn kernels(&self) -> &[Superoperator] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn time(&self, n: usize) -> f64 {
        (n as f64 + self.kind.offset()) * self.dt
    }

    pub fn norms(&self) -> Vec<f64> {
        self.kernels.iter().map(frob_norm).collect()
    }

    /// Every `stride`-th entry; only meaningful for integer-grid kinds.
    pub fn subsample(&self, stride: usize) -> Result<KernelSeries> {
        if stride == 0 {
            return Err(Error::validation("stride must be positive"));
        }
        if self.kind == KernelKind::ContinuousHalf {
            return Err(Error::validation("cannot stride-sample a half-grid kernel series"));
        }
        Ok(KernelSeries {
            dt: self.dt * stride as f64,
            kind: self.kind,
            kernels: self.kernels.iter().step_by(stride).copied().collect(),
        })
    }

    pub fn truncated(&self, len: usize) -> KernelSeries {
        KernelSeries {
            dt: self.dt,
            kind: self.kind,
            kernels: self.kernels[..len.min(self.kernels.len())].to_vec(),
        }
    }
}

/// Integer ratio `coarse / fine`, or an error if the grids are incommensurate.
pub fn grid_ratio(coarse: f64, fine: f64) -> Result<usize> {
    check_dt(coarse)?;
    check_dt(fine)?;
    let r = coarse / fine;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-6 * r.max(1.0) {
        return Err(Error::validation(format!(
            "time steps {coarse} and {fine} are not commensurate (ratio {r})"
        )));
    }
    Ok(n as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_op(rng: &mut impl Rng) -> Op2 {
        Op2::from_fn(|_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn random_hermitian(rng: &mut impl Rng) -> Op2 {
        let a = random_op(rng);
        (a + a.adjoint()) * c(0.5, 0.0)
    }

    fn random_super(rng: &mut impl Rng) -> Superoperator {
        Superoperator::from_fn(|_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn random_tp_map(rng: &mut impl Rng) -> Superoperator {
        let mut m = random_super(rng);
        // force <<I| m = <<I| by fixing rows 0 and 3
        for j in 0..4 {
            let target = if j == 0 || j == 3 { ONE } else { ZERO };
            m[(3, j)] = target - m[(0, j)];
        }
        m
    }

    fn random_density(rng: &mut impl Rng) -> DensityMatrix {
        let a = random_op(rng);
        let p = a * a.adjoint();
        let tr = p[(0, 0)] + p[(1, 1)];
        DensityMatrix::new(p / tr).unwrap()
    }

    #[test]
    fn vectorize_basis_and_identity() {
        let v = vectorize(&DensityMatrix::ground());
        assert_eq!(v, OpVec::new(ONE, ZERO, ZERO, ZERO));
        let v = vectorize(&DensityMatrix::maximally_mixed());
        assert_eq!(v, OpVec::new(c(0.5, 0.0), ZERO, ZERO, c(0.5, 0.0)));
    }

    #[test]
    fn vectorize_round_trip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let rho = random_density(&mut rng);
            let back = devectorize(&vectorize(&rho)).unwrap();
            assert_eq!(back, rho);
        }
    }

    #[test]
    fn vec_of_product_is_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, x, b) = (random_op(&mut rng), random_op(&mut rng), random_op(&mut rng));
        let lhs = vec_op(&(a * x * b));
        let rhs = kron2(&b.transpose(), &a) * vec_op(&x);
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn density_matrix_validation() {
        let bad_trace = Op2::new(ONE, ZERO, ZERO, ONE);
        assert!(DensityMatrix::new(bad_trace).is_err());
        let non_herm = Op2::new(c(0.5, 0.0), c(0.1, 0.0), ZERO, c(0.5, 0.0));
        assert!(DensityMatrix::new(non_herm).is_err());
        let negative = Op2::new(c(1.5, 0.0), ZERO, ZERO, c(-0.5, 0.0));
        assert!(DensityMatrix::new(negative).is_err());
    }

    #[test]
    fn commutator_of_zero_is_zero() {
        assert_eq!(commutator_superop(&Op2::zeros()).unwrap(), Superoperator::zeros());
    }

    #[test]
    fn commutator_sigma_z_spectrum() {
        let l = commutator_superop(&sigma_z()).unwrap();
        // diagonal in the matrix-unit basis
        let mut diag: Vec<f64> = (0..4).map(|i| l[(i, i)].re).collect();
        diag.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(diag, vec![-2.0, 0.0, 0.0, 2.0]);
        assert!(frob_norm(&(l - Superoperator::from_diagonal(&l.diagonal()))) == 0.0);
        // [sigma_z, |0><1|] = 2 |0><1|
        let e01 = Op2::new(ZERO, ONE, ZERO, ZERO);
        assert_eq!(unvec_op(&(l * vec_op(&e01))), e01 * c(2.0, 0.0));
    }

    #[test]
    fn commutator_matches_brute_force_on_matrix_units() {
        let h = sigma_x() * c(-1.0, 0.0);
        let l = commutator_superop(&h).unwrap();
        for k in 0..4 {
            let mut e = Op2::zeros();
            e[(k % 2, k / 2)] = ONE;
            let brute = h * e - e * h;
            let col = unvec_op(&l.column(k).into_owned());
            assert_eq!(col, brute, "matrix unit {k}");
        }
    }

    #[test]
    fn commutator_rejects_non_hermitian() {
        let h = Op2::new(ONE, ONE, ZERO, ONE);
        assert!(matches!(commutator_superop(&h), Err(Error::Validation(_))));
    }

    #[test]
    fn commutator_annihilates_identity_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let l = commutator_superop(&random_hermitian(&mut rng)).unwrap();
            assert!((l * identity_vec()).norm() < 1e-14);
            assert!((trace_row() * l).norm() < 1e-14);
        }
    }

    fn taylor_expm(a: &Superoperator, t: f64, terms: usize) -> Superoperator {
        let mut term = Superoperator::identity();
        let mut sum = term;
        for k in 1..=terms {
            term = term * a * c(t / k as f64, 0.0);
            sum += term;
        }
        sum
    }

    #[test]
    fn expm_identity_and_diagonal() {
        assert_eq!(expm(&Superoperator::zeros(), 3.0), Superoperator::identity());
        let d = [c(0.3, 0.0), c(-1.2, 0.0), c(0.0, 2.0), c(0.5, -0.7)];
        let a = Superoperator::from_diagonal(&OpVec::from_column_slice(&d));
        let e = expm(&a, 1.0);
        for i in 0..4 {
            assert!((e[(i, i)] - d[i].exp()).norm() < 1e-14);
        }
    }

    #[test]
    fn expm_matches_taylor_for_liouvillian() {
        let gen = liouvillian_generator(&two_level_hamiltonian(0.0, -1.0)).unwrap();
        let dt = 0.1;
        let e = expm(&gen, dt);
        let t = taylor_expm(&gen, dt, 20);
        assert!(max_abs_diff(&e, &t) < 1e-13);
    }

    #[test]
    fn expm_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let gen = liouvillian_generator(&random_hermitian(&mut rng)).unwrap();
            let t = rng.gen_range(0.1..5.0);
            let m = gen * c(t, 0.0);
            let a = expm_normal(&m);
            let b = expm_pade(&m);
            assert!(frob_norm(&(a - b)) <= 1e-12 * frob_norm(&b));
        }
        // non-normal input vs Taylor
        for _ in 0..20 {
            let a = random_super(&mut rng);
            let e = expm(&a, 0.7);
            let t = taylor_expm(&a, 0.7, 40);
            assert!(frob_norm(&(e - t)) <= 1e-12 * frob_norm(&t));
        }
    }

    #[test]
    fn expm_large_norm_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_super(&mut rng) * c(3.0, 0.0);
        let half = expm(&a, 0.5);
        let full = expm(&a, 1.0);
        assert!(frob_norm(&(half * half - full)) <= 1e-11 * frob_norm(&full));
    }

    #[test]
    fn frob_norm_examples() {
        assert_eq!(frob_norm(&Superoperator::zeros()), 0.0);
        assert_eq!(frob_norm(&Superoperator::identity()), 2.0);
        let mut a = Superoperator::zeros();
        a[(2, 1)] = c(3.0, -4.0);
        assert_eq!(frob_norm(&a), 5.0);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut acc = CompensatedSum::new();
        let big = Superoperator::identity() * c(1e16, 0.0);
        acc.add(&big);
        for _ in 0..10 {
            acc.add(&Superoperator::identity());
        }
        acc.add(&(-big));
        assert_eq!(acc.value(), Superoperator::identity() * c(10.0, 0.0));
    }

    #[test]
    fn grid_ratio_detects_incommensurate() {
        assert_eq!(grid_ratio(0.005, 0.0005).unwrap(), 10);
        assert!(grid_ratio(0.0055, 0.001).is_err());
    }

    proptest! {
        #[test]
        fn trace_preservation_is_closed_under_products(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tp_map(&mut rng);
            let b = random_tp_map(&mut rng);
            prop_assert!(trace_preservation_defect(&a) < 1e-15);
            prop_assert!(trace_preservation_defect(&(a * b)) < 1e-13);
        }

        #[test]
        fn closed_propagator_is_unitary(seed in 0u64..1000, t in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen = liouvillian_generator(&random_hermitian(&mut rng)).unwrap();
            let u = expm(&gen, t);
            let defect = frob_norm(&(u.adjoint() * u - Superoperator::identity()));
            prop_assert!(defect < 1e-12);
        }

        #[test]
        fn commutator_acts_as_commutator(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_hermitian(&mut rng);
            let a = random_op(&mut rng);
            let l = commutator_superop(&h).unwrap();
            let lhs = unvec_op(&(l * vec_op(&a)));
            prop_assert!((lhs - (h * a - a * h)).norm() < 1e-14);
        }
    }
}
