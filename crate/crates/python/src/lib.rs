//! Python bindings for ttmkit.
//!
//! Matrices cross the boundary as nested lists of Python complex numbers:
//! 2×2 for density matrices and Hamiltonians, 4×4 (row-major, column-stacked
//! vectorization) for superoperators.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ttmkit::bridge::{self, AuxiliaryKernels, MpdiVariant, SchemeTag};
use ttmkit::discrete::{self, MemoryTruncation};
use ttmkit::error::Error;
use ttmkit::io;
use ttmkit::spin_boson as sb;
use ttmkit::superop::{self as so, KernelKind, Op2, Superoperator, C64};
use ttmkit::volterra;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Validation(_) | Error::TooShort { .. } | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<C64>>;

fn superop_from(rows: &Rows) -> PyResult<Superoperator> {
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(PyValueError::new_err("superoperator must be a 4x4 nested list"));
    }
    Ok(Superoperator::from_fn(|r, c| rows[r][c]))
}

fn superop_rows(m: &Superoperator) -> Rows {
    (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect()
}

fn op2_from(rows: &Rows) -> PyResult<Op2> {
    if rows.len() != 2 || rows.iter().any(|r| r.len() != 2) {
        return Err(PyValueError::new_err("operator must be a 2x2 nested list"));
    }
    Ok(Op2::from_fn(|r, c| rows[r][c]))
}

fn op2_rows(m: &Op2) -> Rows {
    (0..2).map(|r| (0..2).map(|c| m[(r, c)]).collect()).collect()
}

fn scheme(name: &str) -> PyResult<SchemeTag> {
    name.parse().map_err(py_err)
}

fn variant(name: &str) -> PyResult<MpdiVariant> {
    match name {
        "literal" => Ok(MpdiVariant::Literal),
        "factor-free" | "factor_free" => Ok(MpdiVariant::FactorFree),
        other => Err(PyValueError::new_err(format!("unknown MPD/I variant '{other}'"))),
    }
}

fn truncation(t_mem: Option<f64>) -> PyResult<MemoryTruncation> {
    match t_mem {
        Some(t) => MemoryTruncation::at(t).map_err(py_err),
        None => Ok(MemoryTruncation::none()),
    }
}

#[pyclass(name = "SpectralDensity", module = "ttmkit", from_py_object)]
#[derive(Clone)]
struct PySpectralDensity(sb::SpectralDensity);

#[pymethods]
impl PySpectralDensity {
    #[new]
    fn new(xi: f64, s: f64, omega_c: f64, beta: f64) -> PyResult<Self> {
        sb::SpectralDensity::new(xi, s, omega_c, beta).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn benchmark() -> Self {
        Self(sb::SpectralDensity::benchmark())
    }

    #[getter]
    fn xi(&self) -> f64 {
        self.0.xi
    }

    #[getter]
    fn s(&self) -> f64 {
        self.0.s
    }

    #[getter]
    fn omega_c(&self) -> f64 {
        self.0.omega_c
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    /// J(w).
    fn __call__(&self, w: f64) -> PyResult<f64> {
        sb::spectral_density(w, &self.0).map_err(py_err)
    }

    /// Bath correlation function C(t).
    fn correlation(&self, t: f64) -> PyResult<C64> {
        sb::bath_correlation(t, &self.0).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let d = &self.0;
        format!("SpectralDensity(xi={}, s={}, omega_c={}, beta={})", d.xi, d.s, d.omega_c, d.beta)
    }
}

#[pyclass(name = "SystemSpec", module = "ttmkit", from_py_object)]
#[derive(Clone)]
struct PySystemSpec(sb::SystemSpec);

#[pymethods]
impl PySystemSpec {
    #[new]
    fn new(epsilon: f64, omega: f64) -> PyResult<Self> {
        sb::SystemSpec::new(epsilon, omega).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn benchmark() -> Self {
        Self(sb::SystemSpec::benchmark())
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.0.epsilon
    }

    #[getter]
    fn omega(&self) -> f64 {
        self.0.omega
    }

    fn hamiltonian(&self) -> Rows {
        op2_rows(&self.0.hamiltonian())
    }

    fn __repr__(&self) -> String {
        format!("SystemSpec(epsilon={}, omega={})", self.0.epsilon, self.0.omega)
    }
}

#[pyclass(name = "ExpFit", module = "ttmkit", from_py_object)]
#[derive(Clone)]
struct PyExpFit(sb::ExpFit);

#[pymethods]
impl PyExpFit {
    /// Builds a fit from `(alpha, nu)` pairs.
    #[new]
    fn new(terms: Vec<(C64, C64)>) -> PyResult<Self> {
        let terms = terms.into_iter().map(|(alpha, nu)| sb::ExpTerm { alpha, nu }).collect();
        sb::ExpFit::new(terms).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_bath(&path).map(Self).map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_bath(&path, &self.0).map_err(py_err)
    }

    fn terms(&self) -> Vec<(C64, C64)> {
        self.0.terms().iter().map(|t| (t.alpha, t.nu)).collect()
    }

    #[getter]
    fn residual(&self) -> Option<f64> {
        self.0.residual()
    }

    fn __call__(&self, t: f64) -> C64 {
        self.0.eval(t)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "MapTrajectory", module = "ttmkit", from_py_object)]
#[derive(Clone)]
struct PyMapTrajectory(so::MapTrajectory);

#[pymethods]
impl PyMapTrajectory {
    /// Checks that the first map is the identity and every map preserves trace.
    #[new]
    fn new(dt: f64, maps: Vec<Rows>) -> PyResult<Self> {
        let maps = maps.iter().map(superop_from).collect::<PyResult<Vec<_>>>()?;
        so::MapTrajectory::new(dt, maps).map(Self).map_err(py_err)
    }

    /// Reads a trajectory CSV and its sidecar.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_trajectory(&path).map(|(t, _)| Self(t)).map_err(py_err)
    }

    #[pyo3(signature = (path, epsilon=None, omega=None))]
    fn write(&self, path: PathBuf, epsilon: Option<f64>, omega: Option<f64>) -> PyResult<()> {
        let mut meta = io::Metadata::new(io::FileKind::Maps, self.0.dt(), "python");
        if let (Some(e), Some(o)) = (epsilon, omega) {
            meta = meta.with_system(e, o);
        }
        io::write_trajectory(&path, &self.0, &meta).map_err(py_err)
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn maps(&self) -> Vec<Rows> {
        self.0.maps().iter().map(superop_rows).collect()
    }

    fn map(&self, n: usize) -> PyResult<Rows> {
        self.0.maps().get(n).map(superop_rows).ok_or_else(|| PyValueError::new_err(format!("no map {n}")))
    }

    fn subsample(&self, stride: usize) -> PyResult<Self> {
        self.0.subsample(stride).map(Self).map_err(py_err)
    }

    /// Density matrices `U_N rho0` for a 2×2 initial state.
    fn states(&self, rho0: Rows) -> PyResult<Vec<Rows>> {
        let rho = so::DensityMatrix::new(op2_from(&rho0)?).map_err(py_err)?;
        Ok(self.0.states(&rho).iter().map(op2_rows).collect())
    }
}

#[pyclass(name = "KernelSeries", module = "ttmkit", from_py_object)]
#[derive(Clone)]
struct PyKernelSeries(so::KernelSeries);

fn kind_name(k: KernelKind) -> &'static str {
    match k {
        KernelKind::Discrete => "discrete",
        KernelKind::Continuous => "continuous",
        KernelKind::ContinuousHalf => "continuous_half",
    }
}

#[pymethods]
impl PyKernelSeries {
    /// `kind` is one of "discrete", "continuous" or "continuous_half".
    #[new]
    fn new(dt: f64, kind: &str, kernels: Vec<Rows>) -> PyResult<Self> {
        let kind = match kind {
            "discrete" => KernelKind::Discrete,
            "continuous" => KernelKind::Continuous,
            "continuous_half" => KernelKind::ContinuousHalf,
            other => return Err(PyValueError::new_err(format!("unknown kernel kind '{other}'"))),
        };
        let ks = kernels.iter().map(superop_from).collect::<PyResult<Vec<_>>>()?;
        so::KernelSeries::new(dt, kind, ks).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_kernels(&path).map(|(k, _)| Self(k)).map_err(py_err)
    }

    #[pyo3(signature = (path, scheme=None))]
    fn write(&self, path: PathBuf, scheme: Option<String>) -> PyResult<()> {
        let mut meta = io::Metadata::new(self.0.kind().into(), self.0.dt(), "python");
        if let Some(s) = scheme {
            meta = meta.with_scheme(s);
        }
        io::write_kernels(&path, &self.0, &meta).map_err(py_err)
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        kind_name(self.0.kind())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn times(&self) -> Vec<f64> {
        (0..self.0.len()).map(|n| self.0.time(n)).collect()
    }

    fn kernels(&self) -> Vec<Rows> {
        self.0.kernels().iter().map(superop_rows).collect()
    }

    /// Frobenius norm of every kernel.
    fn norms(&self) -> Vec<f64> {
        self.0.norms()
    }
}

/// `-i L_s` for a 2×2 Hamiltonian.
#[pyfunction]
fn liouvillian(h: Rows) -> PyResult<Rows> {
    so::liouvillian_generator(&op2_from(&h)?).map(|g| superop_rows(&g)).map_err(py_err)
}

/// `exp(t A)` for a 4×4 superoperator.
#[pyfunction]
fn expm(a: Rows, t: f64) -> PyResult<Rows> {
    Ok(superop_rows(&so::expm(&superop_from(&a)?, t)))
}

#[pyfunction]
fn extract_discrete_kernels(traj: &PyMapTrajectory, system: &PySystemSpec) -> PyResult<PyKernelSeries> {
    discrete::extract_discrete_kernels(&traj.0, &system.0.hamiltonian()).map(PyKernelSeries).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (kernels, system, n_steps, t_mem=None))]
fn propagate_discrete(
    kernels: &PyKernelSeries,
    system: &PySystemSpec,
    n_steps: usize,
    t_mem: Option<f64>,
) -> PyResult<PyMapTrajectory> {
    discrete::propagate_discrete(&kernels.0, &system.0.hamiltonian(), n_steps, truncation(t_mem)?)
        .map(PyMapTrajectory)
        .map_err(py_err)
}

#[pyfunction]
fn extract_continuous_kernel(traj: &PyMapTrajectory, system: &PySystemSpec) -> PyResult<PyKernelSeries> {
    volterra::extract_continuous_kernel(&traj.0, &system.0.hamiltonian()).map(PyKernelSeries).map_err(py_err)
}

#[pyfunction]
fn propagate_continuous(kernel: &PyKernelSeries, system: &PySystemSpec, n_steps: usize) -> PyResult<PyMapTrajectory> {
    volterra::propagate_continuous(&kernel.0, &system.0.hamiltonian(), n_steps).map(PyMapTrajectory).map_err(py_err)
}

fn aux_for(scheme: SchemeTag, fine: Option<&PyKernelSeries>, h: &Op2, dt: f64) -> PyResult<Option<AuxiliaryKernels>> {
    match (scheme, fine) {
        (SchemeTag::Ttm2, Some(f)) => AuxiliaryKernels::from_fine_kernel(&f.0, h, dt).map(Some).map_err(py_err),
        (SchemeTag::Ttm2, None) => Err(PyValueError::new_err("ttm2 needs a fine continuous kernel")),
        _ => Ok(None),
    }
}

/// Continuous kernel samples from discrete kernels. TTM(2) needs `fine`, a
/// continuous kernel on a grid dividing `dt`.
#[pyfunction]
#[pyo3(signature = (kernels, scheme, system, fine=None))]
fn discrete_to_continuous(
    kernels: &PyKernelSeries,
    scheme: &str,
    system: &PySystemSpec,
    fine: Option<&PyKernelSeries>,
) -> PyResult<PyKernelSeries> {
    let s = self::scheme(scheme)?;
    let h = system.0.hamiltonian();
    let aux = aux_for(s, fine, &h, kernels.0.dt())?;
    bridge::discrete_to_continuous(&kernels.0, s, &h, aux.as_ref()).map(PyKernelSeries).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (kernels, scheme, system, fine=None))]
fn continuous_to_discrete(
    kernels: &PyKernelSeries,
    scheme: &str,
    system: &PySystemSpec,
    fine: Option<&PyKernelSeries>,
) -> PyResult<PyKernelSeries> {
    let s = self::scheme(scheme)?;
    let h = system.0.hamiltonian();
    let aux = aux_for(s, fine, &h, kernels.0.dt())?;
    bridge::continuous_to_discrete(&kernels.0, s, &h, aux.as_ref()).map(PyKernelSeries).map_err(py_err)
}

/// Half-grid and integer-grid MPD/I kernels from maps.
#[pyfunction]
#[pyo3(signature = (traj, system, variant="literal"))]
fn mpdi_extract(traj: &PyMapTrajectory, system: &PySystemSpec, variant: &str) -> PyResult<(PyKernelSeries, PyKernelSeries)> {
    let (half, whole) = bridge::mpdi_extract(&traj.0, &system.0.hamiltonian(), self::variant(variant)?).map_err(py_err)?;
    Ok((PyKernelSeries(half), PyKernelSeries(whole)))
}

#[pyfunction]
#[pyo3(signature = (half_kernels, system, n_steps, t_mem=None, variant="literal"))]
fn mpdi_propagate(
    half_kernels: &PyKernelSeries,
    system: &PySystemSpec,
    n_steps: usize,
    t_mem: Option<f64>,
    variant: &str,
) -> PyResult<PyMapTrajectory> {
    bridge::mpdi_propagate(&half_kernels.0, &system.0.hamiltonian(), n_steps, truncation(t_mem)?, self::variant(variant)?)
        .map(PyMapTrajectory)
        .map_err(py_err)
}

/// Sum-of-exponentials fit of C(t) on `[0, horizon]`. `structure` is "free"
/// or "conjugate-closed".
#[pyfunction]
#[pyo3(signature = (sd, k, horizon=10.0, structure="free"))]
fn fit_exponentials(sd: &PySpectralDensity, k: usize, horizon: f64, structure: &str) -> PyResult<PyExpFit> {
    let structure = match structure {
        "free" => sb::RateStructure::Free,
        "conjugate-closed" | "conjugate_closed" => sb::RateStructure::ConjugateClosed,
        other => return Err(PyValueError::new_err(format!("unknown rate structure '{other}'"))),
    };
    let opts = sb::FitOptions { structure, ..sb::FitOptions::default() };
    sb::fit_exponentials_with(&sd.0, k, horizon, &opts).map(PyExpFit).map_err(py_err)
}

/// HEOM maps with total-depth truncation, or per-mode truncation when
/// `l_min` is given (then `depth` is `L_max`).
#[pyfunction]
#[pyo3(signature = (system, fit, dt, n_steps, depth=10, step=0.0005, l_min=None))]
fn heom_propagate(
    py: Python<'_>,
    system: &PySystemSpec,
    fit: &PyExpFit,
    dt: f64,
    n_steps: usize,
    depth: usize,
    step: f64,
    l_min: Option<usize>,
) -> PyResult<PyMapTrajectory> {
    let cfg = match l_min {
        Some(lm) => sb::HeomConfig::per_mode(depth, lm, step),
        None => sb::HeomConfig::total_depth(depth, step),
    }
    .map_err(py_err)?;
    let (sys, fit) = (system.0, fit.0.clone());
    py.detach(move || sb::heom_propagate(&sys, &fit, &cfg, dt, n_steps)).map(PyMapTrajectory).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (system, sd, dt, n_steps, n_modes=120, fock_cutoff=4))]
fn exact_diag_reference(
    py: Python<'_>,
    system: &PySystemSpec,
    sd: &PySpectralDensity,
    dt: f64,
    n_steps: usize,
    n_modes: usize,
    fock_cutoff: usize,
) -> PyResult<PyMapTrajectory> {
    let (sys, sd) = (system.0, sd.0);
    py.detach(move || sb::exact_diag_reference(&sys, &sd, n_modes, fock_cutoff, dt, n_steps))
        .map(PyMapTrajectory)
        .map_err(py_err)
}

#[pyfunction]
fn pure_dephasing_analytic(system: &PySystemSpec, sd: &PySpectralDensity, dt: f64, n_steps: usize) -> PyResult<PyMapTrajectory> {
    sb::pure_dephasing_analytic(&system.0, &sd.0, dt, n_steps).map(PyMapTrajectory).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (system, sd, n_modes=120, fock_cutoff=4))]
fn k0_projector(system: &PySystemSpec, sd: &PySpectralDensity, n_modes: usize, fock_cutoff: usize) -> PyResult<Rows> {
    sb::k0_projector(&system.0, &sd.0, n_modes, fock_cutoff).map(|k| superop_rows(&k)).map_err(py_err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    ttmkit::cli::main_with_args(std::iter::once("ttmkit".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "ttmkit")]
pub fn ttmkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", io::TOOL_VERSION)?;
    m.add_class::<PySpectralDensity>()?;
    m.add_class::<PySystemSpec>()?;
    m.add_class::<PyExpFit>()?;
    m.add_class::<PyMapTrajectory>()?;
    m.add_class::<PyKernelSeries>()?;
    m.add_function(wrap_pyfunction!(liouvillian, m)?)?;
    m.add_function(wrap_pyfunction!(expm, m)?)?;
    m.add_function(wrap_pyfunction!(extract_discrete_kernels, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_discrete, m)?)?;
    m.add_function(wrap_pyfunction!(extract_continuous_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_continuous, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_to_continuous, m)?)?;
    m.add_function(wrap_pyfunction!(continuous_to_discrete, m)?)?;
    m.add_function(wrap_pyfunction!(mpdi_extract, m)?)?;
    m.add_function(wrap_pyfunction!(mpdi_propagate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_exponentials, m)?)?;
    m.add_function(wrap_pyfunction!(heom_propagate, m)?)?;
    m.add_function(wrap_pyfunction!(exact_diag_reference, m)?)?;
    m.add_function(wrap_pyfunction!(pure_dephasing_analytic, m)?)?;
    m.add_function(wrap_pyfunction!(k0_projector, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
