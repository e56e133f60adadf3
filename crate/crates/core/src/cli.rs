//! Command-line front end: `simulate`, `extract`, `propagate`, `compare`, `sweep`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    continuous_to_discrete, discrete_to_continuous, half_grid_from_fine, integer_grid_from_fine,
    mpdi_extract, mpdi_propagate, AuxiliaryKernels, MpdiVariant, SchemeTag,
};
use crate::discrete::{extract_discrete_kernels, propagate_discrete, MemoryTruncation};
use crate::error::{Error, Result};
use crate::io::{self, FileKind, Metadata};
use crate::spin_boson::{
    exact_diag_reference, fit_exponentials_with, heom_propagate, hierarchy_size,
    pure_dephasing_analytic, FitOptions, HeomConfig, RateStructure, SpectralDensity,
    SystemSpec, Truncation,
};
use crate::study::{self, detect_plateau, fit_order, manufactured_volterra, Norm, OrderFit, Plateau, Reference};
use crate::superop::{
    expm, grid_ratio, liouvillian_generator, KernelKind, KernelSeries, MapTrajectory, Op2,
};
use crate::volterra::{coarse_grid_warning, extract_continuous_kernel};

#[derive(Debug, Parser)]
#[command(name = "ttmkit", version, about = "Memory kernels and transfer tensors for two-level open systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a reference simulator and write its dynamical maps.
    Simulate(SimulateArgs),
    /// Extract kernels from a map trajectory.
    Extract(ExtractArgs),
    /// Propagate dynamics from a kernel file.
    Propagate(PropagateArgs),
    /// Per-time differences between two series files.
    Compare(CompareArgs),
    /// Convergence study over a list of time steps.
    Sweep(SweepArgs),
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub engine: Option<Engine>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub omega: Option<f64>,
    /// Bath coefficient file for the HEOM engine (skips fitting).
    #[arg(long)]
    pub bath_file: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtractScheme {
    TtmDiscrete,
    Ttm1,
    Ttm2,
    Mpdi,
    Volterra,
}

#[derive(Debug, clap::Args)]
pub struct ExtractArgs {
    /// Map trajectory file.
    pub trajectory: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: ExtractScheme,
    /// Fine-grid continuous kernel or fine map trajectory (needed by ttm2).
    #[arg(long)]
    pub fine_ref: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "literal")]
    pub mpdi_variant: VariantArg,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Literal,
    FactorFree,
}

impl From<VariantArg> for MpdiVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Literal => MpdiVariant::Literal,
            VariantArg::FactorFree => MpdiVariant::FactorFree,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct PropagateArgs {
    /// Kernel file.
    pub kernels: PathBuf,
    #[arg(long)]
    pub scheme: SchemeTag,
    /// Memory cutoff; full memory when omitted.
    #[arg(long)]
    pub tmem: Option<f64>,
    /// Initial state: pop0, pop1, plus, or four complex entries.
    #[arg(long, default_value = "pop0", allow_hyphen_values = true)]
    pub rho0: String,
    /// Number of steps; defaults to the kernel length.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Propagation step when sampling a finer continuous kernel.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Fine continuous kernel for the TTM(2) auxiliary terms.
    #[arg(long)]
    pub fine_ref: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "literal")]
    pub mpdi_variant: VariantArg,
    /// State series output; maps go next to it with a `_maps` suffix.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, default_value = "frobenius")]
    pub norm: Norm,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated list of time steps.
    #[arg(long, value_delimiter = ',')]
    pub dts: Option<Vec<f64>>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

/// Reference engines for `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Heom,
    ExactDiag,
    PureDephasing,
    Closed,
}

fn default_structure() -> RateStructure {
    RateStructure::ConjugateClosed
}

fn default_exponentials() -> usize {
    3
}

fn default_horizon() -> f64 {
    10.0
}

fn default_seed() -> u64 {
    FitOptions::default().seed
}

fn default_truncation() -> Truncation {
    Truncation::TotalDepth { depth: 10 }
}

fn default_heom_step() -> f64 {
    0.0005
}

fn default_max_ados() -> usize {
    200_000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeomSection {
    #[serde(default = "default_truncation")]
    pub truncation: Truncation,
    #[serde(default = "default_heom_step")]
    pub step: f64,
    #[serde(default = "default_max_ados")]
    pub max_ados: usize,
    #[serde(default = "default_exponentials")]
    pub exponentials: usize,
    #[serde(default = "default_horizon")]
    pub fit_horizon: f64,
    #[serde(default = "default_structure")]
    pub structure: RateStructure,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub bath_file: Option<PathBuf>,
    /// Rerun at a smaller depth and report the difference.
    #[serde(default = "yes")]
    pub check_convergence: bool,
}

impl Default for HeomSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_modes() -> usize {
    120
}

fn default_cutoff() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactSection {
    #[serde(default = "default_modes")]
    pub n_modes: usize,
    #[serde(default = "default_cutoff")]
    pub fock_cutoff: usize,
    #[serde(default = "yes")]
    pub check_convergence: bool,
}

impl Default for ExactSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// Configuration of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub engine: Engine,
    #[serde(default = "SystemSpec::benchmark")]
    pub system: SystemSpec,
    #[serde(default = "SpectralDensity::benchmark")]
    pub bath: SpectralDensity,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub heom: HeomSection,
    #[serde(default)]
    pub exact: ExactSection,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// What a sweep measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    /// Kernel errors `max_{0<N<=N_mem} ||K_N - K_ref(N dt)||` from coarse maps.
    Kernels,
    /// State errors of dynamics propagated from the reference kernel.
    Dynamics,
    /// Manufactured Volterra problem with a closed-form solution.
    Manufactured,
}

fn default_schemes() -> Vec<SchemeTag> {
    SchemeTag::ALL.to_vec()
}

fn default_tmem() -> f64 {
    1.2
}

fn default_tmax() -> f64 {
    10.0
}

fn default_rho0() -> String {
    "pop0".into()
}

fn default_plateau_tol() -> f64 {
    0.1
}

/// Configuration of `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub study: StudyKind,
    pub dts: Vec<f64>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SchemeTag>,
    /// Fine map trajectory used as reference.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Alternatively, simulate the reference.
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default = "default_tmem")]
    pub t_mem: f64,
    #[serde(default = "default_tmax")]
    pub t_max: f64,
    #[serde(default = "default_rho0")]
    pub rho0: String,
    #[serde(default = "default_plateau_tol")]
    pub plateau_tol: f64,
    #[serde(default)]
    pub mpdi_variant: MpdiVariant,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// One `(scheme, dt)` entry of a sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub scheme: Option<SchemeTag>,
    pub dt: f64,
    pub max_error: f64,
    pub mean_error: f64,
    pub plateau: Option<Plateau>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeOrder {
    pub scheme: Option<SchemeTag>,
    pub label: String,
    pub fit: OrderFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub study: StudyKind,
    pub dts: Vec<f64>,
    pub runs: Vec<SweepRun>,
    pub orders: Vec<SchemeOrder>,
    pub tool_version: String,
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

fn note(msg: &str) {
    eprintln!("{msg}");
}

/// Parses arguments and runs one command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return Ok(());
            }
            return Err(Error::validation(e.to_string()));
        }
    };
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Propagate(a) => cmd_propagate(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn simulate_config(a: &SimulateArgs) -> Result<SimulateConfig> {
    let text = match &a.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Parse {
            location: p.display().to_string(),
            message: e.to_string(),
        })?),
        None => None,
    };
    let mut cfg: serde_json::Value = match (&a.config, &text) {
        (Some(p), Some(t)) => serde_json::from_str(t).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", p.display(), e.line(), e.column()),
            message: e.to_string(),
        })?,
        _ => serde_json::json!({}),
    };
    let obj = cfg
        .as_object_mut()
        .ok_or_else(|| Error::validation("configuration must be a JSON object"))?;
    if let Some(e) = a.engine {
        obj.insert("engine".into(), serde_json::to_value(e)?);
    }
    if let Some(v) = a.dt {
        obj.insert("dt".into(), v.into());
    }
    if let Some(v) = a.steps {
        obj.insert("steps".into(), v.into());
    }
    if a.epsilon.is_some() || a.omega.is_some() {
        let sys = obj.entry("system").or_insert_with(|| serde_json::to_value(SystemSpec::benchmark()).unwrap());
        if let Some(s) = sys.as_object_mut() {
            if let Some(v) = a.epsilon {
                s.insert("epsilon".into(), v.into());
            }
            if let Some(v) = a.omega {
                s.insert("omega".into(), v.into());
            }
        }
    }
    if let Some(p) = &a.bath_file {
        let h = obj.entry("heom").or_insert_with(|| serde_json::json!({}));
        if let Some(h) = h.as_object_mut() {
            h.insert("bath_file".into(), p.to_string_lossy().into_owned().into());
        }
    }
    if let Some(p) = &a.output {
        obj.insert("output".into(), p.to_string_lossy().into_owned().into());
    }
    serde_json::from_value(cfg).map_err(|e| {
        let message = e.to_string();
        // point at the offending line when the file alone shows the same problem
        let location = match (&a.config, &text) {
            (Some(p), Some(t)) => match serde_json::from_str::<SimulateConfig>(t) {
                Err(e2) if e2.to_string().starts_with(&message) => {
                    format!("{}:{}:{}", p.display(), e2.line(), e2.column())
                }
                _ => p.display().to_string(),
            },
            _ => "command line".to_string(),
        };
        Error::Parse { location, message }
    })
}

/// Result of [`simulate`]: maps plus diagnostics for the sidecar.
pub struct Simulation {
    pub maps: MapTrajectory,
    pub diagnostics: serde_json::Value,
    pub seed: Option<u64>,
}

fn max_state_gap(a: &MapTrajectory, b: &MapTrajectory) -> f64 {
    a.maps()
        .iter()
        .zip(b.maps())
        .map(|(x, y)| (x - y).iter().map(|z| z.norm()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

fn reduced(trunc: &Truncation) -> Option<Truncation> {
    match *trunc {
        Truncation::TotalDepth { depth } if depth > 2 => Some(Truncation::TotalDepth { depth: depth - 2 }),
        Truncation::PerMode { l_max, l_min } if l_max > 2 => {
            Some(Truncation::PerMode { l_max: l_max - 2, l_min: l_min.min(l_max - 2) })
        }
        _ => None,
    }
}

/// Runs the configured reference engine.
pub fn simulate(cfg: &SimulateConfig) -> Result<Simulation> {
    SystemSpec::new(cfg.system.epsilon, cfg.system.omega)?;
    if cfg.engine != Engine::Closed {
        cfg.bath.validate()?;
    }
    crate::superop::check_dt(cfg.dt)?;
    if cfg.steps == 0 {
        return Err(Error::validation("steps must be at least 1"));
    }
    let mut diag = serde_json::Map::new();
    let mut seed = None;
    let maps = match cfg.engine {
        Engine::Closed => {
            let g = liouvillian_generator(&cfg.system.hamiltonian())?;
            let maps = (0..=cfg.steps).map(|n| expm(&g, n as f64 * cfg.dt)).collect();
            MapTrajectory::new(cfg.dt, maps)?
        }
        Engine::PureDephasing => pure_dephasing_analytic(&cfg.system, &cfg.bath, cfg.dt, cfg.steps)?,
        Engine::ExactDiag => {
            let ex = &cfg.exact;
            let maps = exact_diag_reference(&cfg.system, &cfg.bath, ex.n_modes, ex.fock_cutoff, cfg.dt, cfg.steps)?;
            diag.insert("n_modes".into(), ex.n_modes.into());
            diag.insert("fock_cutoff".into(), ex.fock_cutoff.into());
            if ex.check_convergence && ex.n_modes >= 2 {
                let half = exact_diag_reference(&cfg.system, &cfg.bath, ex.n_modes / 2, ex.fock_cutoff, cfg.dt, cfg.steps)?;
                diag.insert("half_modes_max_difference".into(), max_state_gap(&maps, &half).into());
            }
            maps
        }
        Engine::Heom => {
            let h = &cfg.heom;
            let fit = match &h.bath_file {
                Some(p) => io::read_bath(p)?,
                None => {
                    let opts = FitOptions { structure: h.structure, seed: h.seed, ..FitOptions::default() };
                    seed = Some(h.seed);
                    fit_exponentials_with(&cfg.bath, h.exponentials, h.fit_horizon, &opts)?
                }
            };
            let hc = HeomConfig { truncation: h.truncation, step: h.step, max_ados: h.max_ados };
            diag.insert("exponentials".into(), fit.len().into());
            diag.insert("fit_residual".into(), fit.residual().into());
            diag.insert("ados".into(), hierarchy_size(&fit, &h.truncation).into());
            let maps = heom_propagate(&cfg.system, &fit, &hc, cfg.dt, cfg.steps)?;
            if h.check_convergence {
                if let Some(t) = reduced(&h.truncation) {
                    let low = heom_propagate(&cfg.system, &fit, &HeomConfig { truncation: t, ..hc }, cfg.dt, cfg.steps)?;
                    diag.insert("reduced_truncation".into(), serde_json::to_value(t)?);
                    diag.insert("reduced_max_difference".into(), max_state_gap(&maps, &low).into());
                }
            }
            maps
        }
    };
    Ok(Simulation { maps, diagnostics: serde_json::Value::Object(diag), seed })
}

type Op4 = crate::superop::Superoperator;

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = simulate_config(a)?;
    let sim = simulate(&cfg)?;
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("trajectory.csv"));
    let mut meta = Metadata::new(FileKind::Maps, cfg.dt, format!("simulate engine={}", engine_name(cfg.engine)))
        .with_system(cfg.system.epsilon, cfg.system.omega);
    meta.seed = sim.seed;
    meta.extra = serde_json::json!({ "config": cfg, "diagnostics": sim.diagnostics });
    io::write_trajectory(&out, &sim.maps, &meta)?;
    note(&format!("wrote {} ({} maps); diagnostics {}", out.display(), sim.maps.len(), sim.diagnostics));
    Ok(())
}

fn engine_name(e: Engine) -> &'static str {
    match e {
        Engine::Heom => "heom",
        Engine::ExactDiag => "exact-diag",
        Engine::PureDephasing => "pure-dephasing",
        Engine::Closed => "closed",
    }
}

fn hamiltonian_of(meta: &Metadata, path: &Path) -> Result<Op2> {
    meta.hamiltonian().ok_or_else(|| {
        Error::validation(format!("{}: sidecar lacks the system parameters epsilon and omega", path.display()))
    })
}

/// Fine continuous kernel from a kernel file or, for a map file, by Volterra extraction.
fn load_fine_kernel(path: &Path, h_s: &Op2) -> Result<KernelSeries> {
    let meta = io::read_sidecar(path)?;
    match meta.kind {
        FileKind::Maps => extract_continuous_kernel(&io::read_trajectory(path)?.0, h_s),
        FileKind::Continuous => Ok(io::read_kernels(path)?.0),
        other => Err(Error::validation(format!(
            "{}: fine reference must be a map trajectory or continuous kernel, got {other:?}",
            path.display()
        ))),
    }
}

fn default_output(input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    input.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let (traj, meta) = io::read_trajectory(&a.trajectory)?;
    let h = hamiltonian_of(&meta, &a.trajectory)?;
    let dt = traj.dt();
    let mut warning = None;
    let (series, name) = match a.scheme {
        ExtractScheme::TtmDiscrete => (extract_discrete_kernels(&traj, &h)?, "ttm-discrete"),
        ExtractScheme::Ttm1 => {
            let kd = extract_discrete_kernels(&traj, &h)?;
            (discrete_to_continuous(&kd, SchemeTag::Ttm1, &h, None)?, "ttm1")
        }
        ExtractScheme::Ttm2 => {
            let fine_path = a
                .fine_ref
                .as_ref()
                .ok_or_else(|| Error::validation("scheme ttm2 needs --fine-ref (fine kernel or fine trajectory)"))?;
            let fine = load_fine_kernel(fine_path, &h)?;
            let aux = AuxiliaryKernels::from_fine_kernel(&fine, &h, dt)?;
            let len = traj.len().saturating_sub(1).min(aux.f_series.len());
            let kd = extract_discrete_kernels(&traj.truncated(len + 1), &h)?;
            (discrete_to_continuous(&kd, SchemeTag::Ttm2, &h, Some(&aux))?, "ttm2")
        }
        ExtractScheme::Mpdi => (mpdi_extract(&traj, &h, a.mpdi_variant.into())?.0, "mpdi"),
        ExtractScheme::Volterra => {
            // the library logs the coarse-grid warning; record it in the sidecar too
            warning = coarse_grid_warning(dt, &h);
            (extract_continuous_kernel(&traj, &h)?, "volterra")
        }
    };
    let out = a.output.clone().unwrap_or_else(|| default_output(&a.trajectory, name));
    let mut m = Metadata::new(series.kind().into(), dt, format!("extract from {}", a.trajectory.display()))
        .with_scheme(name);
    m.epsilon = meta.epsilon;
    m.omega = meta.omega;
    m.seed = meta.seed;
    if a.scheme == ExtractScheme::Mpdi {
        m.extra = serde_json::json!({ "mpdi_variant": MpdiVariant::from(a.mpdi_variant) });
    }
    if let Some(w) = warning {
        m.extra = serde_json::json!({ "warning": w });
    }
    io::write_kernels(&out, &series, &m)?;
    let norms = series.norms();
    let show: Vec<String> = norms.iter().take(4).map(|x| format!("{x:.3e}")).collect();
    note(&format!("wrote {} ({} kernels, kind {:?}); leading norms {}", out.display(), series.len(), series.kind(), show.join(" ")));
    Ok(())
}

fn cmd_propagate(a: &PropagateArgs) -> Result<()> {
    let (ks, meta) = io::read_kernels(&a.kernels)?;
    let h = hamiltonian_of(&meta, &a.kernels)?;
    let rho0 = io::parse_rho0(&a.rho0)?;
    let trunc = match a.tmem {
        Some(t) => MemoryTruncation::at(t)?,
        None => MemoryTruncation::none(),
    };
    let dt = a.dt.unwrap_or(ks.dt());
    let stride = grid_ratio(dt, ks.dt())?;
    let available = match ks.kind() {
        KernelKind::Discrete | KernelKind::ContinuousHalf => ks.len(),
        KernelKind::Continuous => (ks.len() - 1) / stride + 1,
    };
    let n_steps = a.steps.unwrap_or(available.max(1));
    let variant: MpdiVariant = a.mpdi_variant.into();
    let count = trunc.steps(dt).map_or(n_steps, |nt| nt.min(n_steps)) + 1;
    let maps = match (a.scheme, ks.kind()) {
        (SchemeTag::Mpdi, KernelKind::ContinuousHalf) => {
            if stride != 1 {
                return Err(Error::validation("half-grid kernels cannot be resampled; omit --dt"));
            }
            mpdi_propagate(&ks, &h, n_steps, trunc, variant)?
        }
        (SchemeTag::Mpdi, KernelKind::Continuous) => {
            let (half, interpolated) = half_grid_from_fine(&ks, dt, count - 1)?;
            if interpolated {
                note("warning: half-grid kernel values were linearly interpolated");
            }
            mpdi_propagate(&half, &h, n_steps, trunc, variant)?
        }
        (SchemeTag::Mpdi, KernelKind::Discrete) => {
            return Err(Error::validation("scheme mpdi needs a continuous (half-grid or fine) kernel, got discrete kernels"))
        }
        (_, KernelKind::ContinuousHalf) => {
            return Err(Error::validation(format!(
                "scheme {} needs integer-grid kernels, got half-grid kernels",
                a.scheme
            )))
        }
        (_, KernelKind::Discrete) => {
            if stride != 1 {
                return Err(Error::validation("discrete kernels cannot be resampled; omit --dt"));
            }
            propagate_discrete(&ks, &h, n_steps, trunc)?
        }
        (scheme, KernelKind::Continuous) => {
            let kc = integer_grid_from_fine(&ks, dt, count.min(available))?;
            let aux = if scheme == SchemeTag::Ttm2 {
                let fine = match &a.fine_ref {
                    Some(p) => load_fine_kernel(p, &h)?,
                    None if stride > 1 => ks.clone(),
                    None => {
                        return Err(Error::validation(
                            "scheme ttm2 needs --fine-ref or a kernel finer than --dt",
                        ))
                    }
                };
                Some(AuxiliaryKernels::from_fine_kernel(&fine, &h, dt)?)
            } else {
                None
            };
            let kd = continuous_to_discrete(&kc, scheme, &h, aux.as_ref())?;
            propagate_discrete(&kd, &h, n_steps, trunc)?
        }
    };
    let states = maps.states(&rho0);
    let out = a.output.clone().unwrap_or_else(|| default_output(&a.kernels, &format!("{}_states", a.scheme)));
    let maps_out = default_output(&out, "maps");
    let mut m = Metadata::new(FileKind::States, dt, format!("propagate {}", a.kernels.display()))
        .with_scheme(a.scheme.name());
    m.epsilon = meta.epsilon;
    m.omega = meta.omega;
    m.extra = serde_json::json!({ "t_mem": a.tmem, "rho0": a.rho0, "mpdi_variant": variant });
    io::write_states(&out, dt, &states, &m)?;
    io::write_trajectory(&maps_out, &maps, &m)?;
    note(&format!("wrote {} and {} ({} steps)", out.display(), maps_out.display(), n_steps));
    Ok(())
}

/// Per-time distances between two series files of the same family.
pub fn compare_files(a: &Path, b: &Path, norm: Norm) -> Result<Vec<io::ErrorRow>> {
    let ma = io::read_sidecar(a)?;
    let mb = io::read_sidecar(b)?;
    let dist_op = |x: &Op2, y: &Op2| norm.of((x - y).iter());
    let dist_super = |x: &Op4, y: &Op4| norm.of((x - y).iter());
    let rows = match (ma.kind, mb.kind) {
        (FileKind::States, FileKind::States) => {
            let (sa, _) = io::read_states(a)?;
            let (sb, _) = io::read_states(b)?;
            study::series_errors(&sa, ma.dt, &sb, mb.dt, dist_op)?
        }
        (FileKind::Maps, FileKind::Maps) => {
            let (ta, _) = io::read_trajectory(a)?;
            let (tb, _) = io::read_trajectory(b)?;
            study::series_errors(ta.maps(), ta.dt(), tb.maps(), tb.dt(), dist_super)?
        }
        (ka, kb) if ka.kernel_kind().is_some() && ka == kb => {
            let (ka_s, _) = io::read_kernels(a)?;
            let (kb_s, _) = io::read_kernels(b)?;
            if ka == FileKind::ContinuousHalf && grid_ratio(ka_s.dt().max(kb_s.dt()), ka_s.dt().min(kb_s.dt()))? != 1 {
                return Err(Error::validation("half-grid kernels can only be compared on equal grids"));
            }
            let off = ka_s.kind().offset();
            study::series_errors(ka_s.kernels(), ka_s.dt(), kb_s.kernels(), kb_s.dt(), dist_super)?
                .into_iter()
                .map(|(t, e)| (t + off * ka_s.dt().max(kb_s.dt()), e))
                .collect()
        }
        (ka, kb) => {
            return Err(Error::validation(format!("cannot compare {ka:?} data with {kb:?} data")))
        }
    };
    Ok(rows.into_iter().map(|(t, norm)| io::ErrorRow { t, norm }).collect())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let rows = compare_files(&a.a, &a.b, a.norm)?;
    let mean = rows.iter().map(|r| r.norm).sum::<f64>() / rows.len().max(1) as f64;
    let max = rows.iter().map(|r| r.norm).fold(0.0, f64::max);
    let dt = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.0 };
    let out = a.output.clone().unwrap_or_else(|| PathBuf::from("compare.csv"));
    let mut m = Metadata::new(FileKind::ErrorTable, dt, format!("compare {} {}", a.a.display(), a.b.display()));
    m.extra = serde_json::json!({
        "norm": a.norm,
        "time_average": mean,
        "log10_time_average": mean.log10(),
        "max": max,
    });
    io::write_error_table(&out, &rows, &m)?;
    println!("points {}  time-average {:.6e}  max {:.6e}", rows.len(), mean, max);
    Ok(())
}

fn sweep_config(a: &SweepArgs) -> Result<SweepConfig> {
    let mut cfg: SweepConfig = parse_json(&a.config)?;
    if let Some(d) = &a.dts {
        cfg.dts = d.clone();
    }
    if let Some(r) = &a.reference {
        cfg.reference = Some(r.clone());
        cfg.simulate = None;
    }
    if let Some(o) = &a.output {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn load_reference(cfg: &SweepConfig, kernel_time: f64) -> Result<Reference> {
    let (maps, h) = match (&cfg.reference, &cfg.simulate) {
        (Some(p), None) => {
            let (traj, meta) = io::read_trajectory(p)?;
            let h = hamiltonian_of(&meta, p)?;
            (traj, h)
        }
        (None, Some(sim)) => (simulate(sim)?.maps, sim.system.hamiltonian()),
        (Some(_), Some(_)) => return Err(Error::validation("give either 'reference' or 'simulate', not both")),
        (None, None) => return Err(Error::validation("sweep needs a 'reference' trajectory or a 'simulate' section")),
    };
    Reference::new(maps, h, kernel_time)
}

/// Runs a sweep and returns its report.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.dts.len() < 2 {
        return Err(Error::validation(format!("sweep needs at least 2 dt values, got {}", cfg.dts.len())));
    }
    for &dt in &cfg.dts {
        crate::superop::check_dt(dt)?;
    }
    let mut dts = cfg.dts.clone();
    dts.sort_by(|a, b| b.total_cmp(a));
    if cfg.study == StudyKind::Manufactured {
        let r = manufactured_volterra(&dts, cfg.t_max.min(4.0))?;
        let runs = dts
            .iter()
            .zip(&r.extraction_errors)
            .map(|(&dt, &e)| SweepRun { scheme: None, dt, max_error: e, mean_error: e, plateau: None })
            .collect();
        return Ok(SweepReport {
            study: cfg.study,
            dts,
            runs,
            orders: vec![
                SchemeOrder { scheme: None, label: "volterra-extraction".into(), fit: r.extraction_order },
                SchemeOrder { scheme: None, label: "volterra-propagation".into(), fit: r.propagation_order },
            ],
            tool_version: io::TOOL_VERSION.into(),
        });
    }
    let rho0 = io::parse_rho0(&cfg.rho0)?;
    let dt_max = dts[0];
    let kernel_time = cfg.t_mem + 2.0 * dt_max;
    let reference = load_reference(cfg, kernel_time)?;
    let pairs: Vec<(SchemeTag, f64)> = cfg.schemes.iter().flat_map(|&s| dts.iter().map(move |&d| (s, d))).collect();
    let runs = pairs
        .par_iter()
        .map(|&(scheme, dt)| -> Result<SweepRun> {
            match cfg.study {
                StudyKind::Kernels => {
                    let count = (cfg.t_mem / dt).round() as usize + 1;
                    let e = reference.kernel_errors(dt, scheme, count, cfg.mpdi_variant)?;
                    let tail = &e[1..];
                    Ok(SweepRun {
                        scheme: Some(scheme),
                        dt,
                        max_error: tail.iter().copied().fold(0.0, f64::max),
                        mean_error: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                        plateau: detect_plateau(tail, cfg.plateau_tol),
                    })
                }
                _ => {
                    let n = (cfg.t_max / dt).round() as usize;
                    let traj = reference.propagate_exact(dt, scheme, cfg.t_mem, n, cfg.mpdi_variant)?;
                    let e = reference.state_errors(&traj, &rho0)?;
                    let v: Vec<f64> = e.iter().map(|x| x.1).collect();
                    Ok(SweepRun {
                        scheme: Some(scheme),
                        dt,
                        max_error: v.iter().copied().fold(0.0, f64::max),
                        mean_error: study::time_average(&e),
                        plateau: detect_plateau(&v, cfg.plateau_tol),
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut orders = Vec::new();
    for &scheme in &cfg.schemes {
        let (d, e): (Vec<f64>, Vec<f64>) =
            runs.iter().filter(|r| r.scheme == Some(scheme)).map(|r| (r.dt, r.max_error)).unzip();
        match fit_order(&d, &e) {
            Ok(fit) => orders.push(SchemeOrder { scheme: Some(scheme), label: scheme.name().into(), fit }),
            Err(err) => note(&format!("warning: no order fit for {scheme}: {err}")),
        }
    }
    Ok(SweepReport { study: cfg.study, dts, runs, orders, tool_version: io::TOOL_VERSION.into() })
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = sweep_config(a)?;
    let report = sweep(&cfg)?;
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("sweep.json"));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    io::write_atomic(&out, text.as_bytes())?;
    for o in &report.orders {
        println!("{:<22} order {:+.3}  R^2 {:.4}", o.label, o.fit.order, o.fit.r_squared);
    }
    note(&format!("wrote {}", out.display()));
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
