//! File formats: superoperator and state series as CSV with a JSON sidecar,
//! bath coefficient tables, and density-matrix specifications.
//!
//! Values are written with 17 significant digits so a write/read cycle
//! reproduces every `f64` exactly. All writes go to a temporary file in the
//! target directory and are renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin_boson::{ExpFit, ExpTerm};
use crate::superop::{
    check_dt, DensityMatrix, KernelKind, KernelSeries, MapTrajectory, Op2, Superoperator, C64,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// What a CSV series file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Maps,
    Discrete,
    Continuous,
    ContinuousHalf,
    States,
    ErrorTable,
}

impl From<KernelKind> for FileKind {
    fn from(k: KernelKind) -> Self {
        match k {
            KernelKind::Discrete => FileKind::Discrete,
            KernelKind::Continuous => FileKind::Continuous,
            KernelKind::ContinuousHalf => FileKind::ContinuousHalf,
        }
    }
}

impl FileKind {
    pub fn kernel_kind(self) -> Option<KernelKind> {
        match self {
            FileKind::Discrete => Some(KernelKind::Discrete),
            FileKind::Continuous => Some(KernelKind::Continuous),
            FileKind::ContinuousHalf => Some(KernelKind::ContinuousHalf),
            _ => None,
        }
    }
}

/// Sidecar metadata stored next to every series file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: FileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default)]
    pub provenance: String,
    #[serde(default)]
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl Metadata {
    pub fn new(kind: FileKind, dt: f64, provenance: impl Into<String>) -> Self {
        Metadata {
            kind,
            scheme: None,
            dt,
            epsilon: None,
            omega: None,
            provenance: provenance.into(),
            tool_version: TOOL_VERSION.to_string(),
            seed: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn with_system(mut self, epsilon: f64, omega: f64) -> Self {
        self.epsilon = Some(epsilon);
        self.omega = Some(omega);
        self
    }

    pub fn with_scheme(mut self, scheme: impl Into<String>) -> Self {
        self.scheme = Some(scheme.into());
        self
    }

    /// System Hamiltonian recorded in the sidecar, if any.
    pub fn hamiltonian(&self) -> Option<Op2> {
        Some(crate::superop::two_level_hamiltonian(self.epsilon?, self.omega?))
    }
}

/// Canonical decimal form: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `foo/bar.csv` -> `foo/bar.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn write_sidecar(path: &Path, meta: &Metadata) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    write_atomic(&sidecar_path(path), text.as_bytes())
}

/// Reads the sidecar belonging to a series file.
pub fn read_sidecar(path: &Path) -> Result<Metadata> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::Parse {
        location: side.display().to_string(),
        message: format!("cannot read metadata sidecar: {e}"),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", side.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

fn superop_header() -> String {
    let mut h = String::from("t_index,t");
    for r in 0..4 {
        for c in 0..4 {
            let _ = write!(h, ",re_{r}{c},im_{r}{c}");
        }
    }
    h
}

fn state_header() -> String {
    let mut h = String::from("t_index,t");
    for r in 0..2 {
        for c in 0..2 {
            let _ = write!(h, ",re_{r}{c},im_{r}{c}");
        }
    }
    h
}

/// Generic series writer; rows hold `t_index, t` and row-major complex entries.
fn write_rows<'a>(
    path: &Path,
    header: &str,
    dt: f64,
    offset: f64,
    rows: impl Iterator<Item = Vec<C64>> + 'a,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for (n, entries) in rows.enumerate() {
        let _ = write!(out, "{n},{}", fmt_f64((n as f64 + offset) * dt));
        for z in entries {
            let _ = write!(out, ",{},{}", fmt_f64(z.re), fmt_f64(z.im));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn superop_entries(m: &Superoperator) -> Vec<C64> {
    (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect()
}

fn op_entries(m: &Op2) -> Vec<C64> {
    vec![m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
}

/// Parsed CSV rows: `(t, entries)` per line.
fn read_rows(path: &Path, header: &str, n_complex: usize) -> Result<Vec<(f64, Vec<C64>)>> {
    let text = fs::read_to_string(path)?;
    let loc = |line: usize| format!("{}:{}", path.display(), line);
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                location: loc(1),
                message: format!("unexpected header '{}'", h.trim()),
            })
        }
        None => return Err(Error::Parse { location: loc(1), message: "empty file".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 + 2 * n_complex {
            return Err(Error::Parse {
                location: loc(i + 1),
                message: format!("expected {} columns, found {}", 2 + 2 * n_complex, fields.len()),
            });
        }
        let index: usize = fields[0].parse().map_err(|_| Error::Parse {
            location: loc(i + 1),
            message: format!("bad t_index '{}'", fields[0]),
        })?;
        if index != rows.len() {
            return Err(Error::Parse {
                location: loc(i + 1),
                message: format!("t_index {index} out of sequence (expected {})", rows.len()),
            });
        }
        let mut nums = Vec::with_capacity(fields.len() - 1);
        for (col, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                location: format!("{} column {}", loc(i + 1), col + 2),
                message: format!("bad number '{f}'"),
            })?;
            nums.push(v);
        }
        let entries = nums[1..].chunks(2).map(|p| C64::new(p[0], p[1])).collect();
        rows.push((nums[0], entries));
    }
    Ok(rows)
}

fn to_superop(e: &[C64]) -> Superoperator {
    Superoperator::from_fn(|r, c| e[4 * r + c])
}

fn check_meta_dt(path: &Path, meta: &Metadata) -> Result<()> {
    check_dt(meta.dt).map_err(|e| Error::Parse {
        location: sidecar_path(path).display().to_string(),
        message: e.to_string(),
    })
}

/// Writes a map trajectory and its sidecar. `meta.kind` is forced to `Maps`.
pub fn write_trajectory(path: &Path, traj: &MapTrajectory, meta: &Metadata) -> Result<()> {
    let mut meta = meta.clone();
    meta.kind = FileKind::Maps;
    meta.dt = traj.dt();
    write_rows(path, &superop_header(), traj.dt(), 0.0, traj.maps().iter().map(superop_entries))?;
    write_sidecar(path, &meta)
}

pub fn read_trajectory(path: &Path) -> Result<(MapTrajectory, Metadata)> {
    let meta = read_sidecar(path)?;
    if meta.kind != FileKind::Maps {
        return Err(Error::validation(format!(
            "{} holds {:?} data, expected maps",
            path.display(),
            meta.kind
        )));
    }
    check_meta_dt(path, &meta)?;
    let rows = read_rows(path, &superop_header(), 16)?;
    let maps = rows.iter().map(|(_, e)| to_superop(e)).collect();
    Ok((MapTrajectory::from_raw(meta.dt, maps)?, meta))
}

/// Writes a kernel series; the sidecar kind follows the series kind.
pub fn write_kernels(path: &Path, ks: &KernelSeries, meta: &Metadata) -> Result<()> {
    let mut meta = meta.clone();
    meta.kind = ks.kind().into();
    meta.dt = ks.dt();
    write_rows(
        path,
        &superop_header(),
        ks.dt(),
        ks.kind().offset(),
        ks.kernels().iter().map(superop_entries),
    )?;
    write_sidecar(path, &meta)
}

pub fn read_kernels(path: &Path) -> Result<(KernelSeries, Metadata)> {
    let meta = read_sidecar(path)?;
    let kind = meta.kind.kernel_kind().ok_or_else(|| {
        Error::validation(format!("{} holds {:?} data, expected kernels", path.display(), meta.kind))
    })?;
    check_meta_dt(path, &meta)?;
    let rows = read_rows(path, &superop_header(), 16)?;
    let ks = rows.iter().map(|(_, e)| to_superop(e)).collect();
    Ok((KernelSeries::new(meta.dt, kind, ks)?, meta))
}

/// Writes a density-matrix series `rho(N dt)`.
pub fn write_states(path: &Path, dt: f64, states: &[Op2], meta: &Metadata) -> Result<()> {
    let mut meta = meta.clone();
    meta.kind = FileKind::States;
    meta.dt = dt;
    write_rows(path, &state_header(), dt, 0.0, states.iter().map(op_entries))?;
    write_sidecar(path, &meta)
}

pub fn read_states(path: &Path) -> Result<(Vec<Op2>, Metadata)> {
    let meta = read_sidecar(path)?;
    if meta.kind != FileKind::States {
        return Err(Error::validation(format!(
            "{} holds {:?} data, expected states",
            path.display(),
            meta.kind
        )));
    }
    check_meta_dt(path, &meta)?;
    let rows = read_rows(path, &state_header(), 4)?;
    let states = rows.iter().map(|(_, e)| Op2::new(e[0], e[1], e[2], e[3])).collect();
    Ok((states, meta))
}

/// One row of an error table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRow {
    pub t: f64,
    pub norm: f64,
}

/// Writes `t_index, t, norm, log10_norm`; summary values go into the sidecar.
pub fn write_error_table(path: &Path, rows: &[ErrorRow], meta: &Metadata) -> Result<()> {
    let mut meta = meta.clone();
    meta.kind = FileKind::ErrorTable;
    let mut out = String::from("t_index,t,norm,log10_norm\n");
    for (n, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "{n},{},{},{}", fmt_f64(r.t), fmt_f64(r.norm), fmt_f64(r.norm.log10()));
    }
    write_atomic(path, out.as_bytes())?;
    write_sidecar(path, &meta)
}

pub fn read_error_table(path: &Path) -> Result<(Vec<ErrorRow>, Metadata)> {
    let meta = read_sidecar(path)?;
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: format!("bad number '{s}'"),
            })
        };
        if f.len() != 4 {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: format!("expected 4 columns, found {}", f.len()),
            });
        }
        rows.push(ErrorRow { t: parse(f[1])?, norm: parse(f[2])? });
    }
    Ok((rows, meta))
}

const BATH_HEADER: &str = "re_alpha,im_alpha,re_nu,im_nu";

/// Writes bath coefficients, one `alpha, nu` pair per row.
pub fn write_bath(path: &Path, fit: &ExpFit) -> Result<()> {
    let mut out = String::from(BATH_HEADER);
    out.push('\n');
    for t in fit.terms() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(t.alpha.re),
            fmt_f64(t.alpha.im),
            fmt_f64(t.nu.re),
            fmt_f64(t.nu.im)
        );
    }
    write_atomic(path, out.as_bytes())
}

/// Reads bath coefficients; a header row is optional.
pub fn read_bath(path: &Path) -> Result<ExpFit> {
    let text = fs::read_to_string(path)?;
    let mut terms = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("re_alpha")) {
            continue;
        }
        let loc = format!("{}:{}", path.display(), i + 1);
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { location: loc.clone(), message: e.to_string() })?;
        if v.len() != 4 {
            return Err(Error::Parse {
                location: loc,
                message: format!("expected 4 columns, found {}", v.len()),
            });
        }
        terms.push(ExpTerm { alpha: C64::new(v[0], v[1]), nu: C64::new(v[2], v[3]) });
    }
    ExpFit::new(terms)
}

/// Parses `pop0`, `pop1`, `plus`, or four complex entries `r00,r01,r10,r11`
/// (row-major, each like `0.5`, `0.5+0.1i` or `-0.2i`).
pub fn parse_rho0(spec: &str) -> Result<DensityMatrix> {
    match spec.trim().to_ascii_lowercase().as_str() {
        "pop0" => return Ok(DensityMatrix::ground()),
        "pop1" => return Ok(DensityMatrix::excited()),
        "plus" => return Ok(DensityMatrix::plus()),
        _ => {}
    }
    let parts: Vec<&str> = spec
        .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() != 4 {
        return Err(Error::validation(format!(
            "rho0 must be pop0, pop1, plus or four complex numbers, got '{spec}'"
        )));
    }
    let mut z = [C64::new(0.0, 0.0); 4];
    for (k, p) in parts.iter().enumerate() {
        z[k] = p
            .parse::<C64>()
            .map_err(|_| Error::validation(format!("rho0 entry {k}: cannot parse '{p}' as a complex number")))?;
    }
    DensityMatrix::new(Op2::new(z[0], z[1], z[2], z[3]))
}
