//! Command-line front end: flat key=value configuration, dispatch to the
//! experiment runners, CSV/JSON report files and a one-screen summary.
//!
//! Configuration merging: a `--config` file supplies `key = value` lines;
//! dedicated flags (`--out`, `--res`, `--tol`, `--threads`, `--no-timing`)
//! and generic `--set key=value` pairs override the file. Unknown keys are
//! rejected against the per-subcommand schema before any compute starts.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure (partial
//! results are still written), 4 I/O error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::closed_form::{BetaScaling, LimitPhases, SweepPlan};
use crate::error::{Error, MaskError, SolverError, TensorError};
use crate::experiment::{
    asymptotics_to_csv, run_cross_sweep, run_duality_harness, run_dykhne_asymptotics,
    run_fiber_sweep_3d, EffectiveTensorReport, ReportPhases,
};
use crate::microstructure::{
    assemble_conductivity, build_checkerboard, build_cross_cell, build_fiber_cell_3d,
    build_laminate, build_triaxial_fiber_cell, mask_to_string, read_mask, write_mask, CellGeometry,
    ConductivityField, PhaseMask,
};
use crate::solver::{effective_tensor, Preconditioner, SolverConfig};
use crate::tensor::{perturbed_tensor_2d, perturbed_tensor_3d, HallVector, PerturbedPhase};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hhom", version, about = "Periodic-cell homogenization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat key=value configuration file; flags override file entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for CSV/JSON reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Elements per unit length.
    #[arg(long)]
    pub res: Option<u32>,
    /// Relative residual target for the corrector solves.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Worker threads for the solver and sweep terms.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Omit wall-time columns for byte-identical reruns.
    #[arg(long = "no-timing")]
    pub no_timing: bool,
    /// Extra key=value overrides (repeatable), same keys as the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Homogenize a single field and report the effective tensor.
    #[command(name = "cell-solve")]
    CellSolve(CommonArgs),
    /// High-contrast sweep over cross bar widths against the thin limit.
    #[command(name = "sweep-cross")]
    SweepCross(CommonArgs),
    /// High-contrast sweep over fiber radii against the lattice limit.
    #[command(name = "sweep-fiber3d")]
    SweepFiber3d(CommonArgs),
    /// Check the dual and transformed-field identities on one field.
    #[command(name = "duality-check")]
    DualityCheck(CommonArgs),
    /// Tabulate the symmetrizing-transform coefficients along a contrast ladder.
    #[command(name = "dykhne")]
    Dykhne(CommonArgs),
    /// Generate or inspect mask files.
    #[command(name = "mask")]
    Mask(CommonArgs),
}

impl CliCommand {
    fn name(&self) -> &'static str {
        match self {
            CliCommand::CellSolve(_) => "cell-solve",
            CliCommand::SweepCross(_) => "sweep-cross",
            CliCommand::SweepFiber3d(_) => "sweep-fiber3d",
            CliCommand::DualityCheck(_) => "duality-check",
            CliCommand::Dykhne(_) => "dykhne",
            CliCommand::Mask(_) => "mask",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            CliCommand::CellSolve(a)
            | CliCommand::SweepCross(a)
            | CliCommand::SweepFiber3d(a)
            | CliCommand::DualityCheck(a)
            | CliCommand::Dykhne(a)
            | CliCommand::Mask(a) => a,
        }
    }
}

// ---------------------------------------------------------------------------
// Typed run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CommonOpts {
    pub out: PathBuf,
    pub res: Option<u32>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub precond: Preconditioner,
    pub restart: Option<usize>,
    pub threads: Option<usize>,
    pub no_timing: bool,
    pub seed: Option<u64>,
}

impl CommonOpts {
    pub fn solver_config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(tol) = self.tol {
            cfg.rel_tol = tol;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iterations = m;
        }
        if let Some(r) = self.restart {
            cfg.restart = r;
        }
        cfg.preconditioner = self.precond;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeometrySpec {
    Constant { dim: usize },
    Cross { t: f64, ell: f64 },
    Fiber3d { r: f64 },
    Triaxial { r: f64 },
    Laminate { axis: usize, fraction: f64 },
    Checkerboard,
    MaskFile { path: PathBuf },
}

impl GeometrySpec {
    /// Dimension when it is known without reading files.
    fn static_dim(&self) -> Option<usize> {
        match self {
            GeometrySpec::Constant { dim } => Some(*dim),
            GeometrySpec::Cross { .. }
            | GeometrySpec::Laminate { .. }
            | GeometrySpec::Checkerboard => Some(2),
            GeometrySpec::Fiber3d { .. } | GeometrySpec::Triaxial { .. } => Some(3),
            GeometrySpec::MaskFile { .. } => None,
        }
    }

    fn build_mask(&self, resolution: u32) -> Result<PhaseMask, Error> {
        Ok(match self {
            GeometrySpec::Cross { t, ell } => build_cross_cell(*t, *ell, resolution)?,
            GeometrySpec::Fiber3d { r } => build_fiber_cell_3d(*r, resolution)?,
            GeometrySpec::Triaxial { r } => build_triaxial_fiber_cell(*r, resolution)?,
            GeometrySpec::Laminate { axis, fraction } => {
                build_laminate(*axis, *fraction, resolution)?
            }
            GeometrySpec::Checkerboard => build_checkerboard(resolution)?,
            GeometrySpec::MaskFile { path } => read_mask(path)?,
            GeometrySpec::Constant { .. } => {
                return Err(Error::Config("constant geometry has no mask".to_string()))
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct CellSolveSpec {
    pub geometry: GeometrySpec,
    pub phase1: PerturbedPhase,
    pub phase2: Option<PerturbedPhase>,
    pub h: HallVector,
    pub resolution: u32,
}

#[derive(Debug, Clone)]
pub struct SweepCrossSpec {
    pub phases: LimitPhases,
    pub ell: f64,
    pub h: f64,
    pub t_list: Vec<f64>,
    pub res_list: Option<Vec<u32>>,
    pub beta_mode: BetaScaling,
}

#[derive(Debug, Clone)]
pub struct SweepFiberSpec {
    pub phases: LimitPhases,
    pub h: [f64; 3],
    pub r_list: Vec<f64>,
    pub res_list: Option<Vec<u32>>,
    pub eps_list: Option<Vec<f64>>,
    pub beta_mode: BetaScaling,
}

#[derive(Debug, Clone)]
pub struct DualitySpec {
    pub geometry: GeometrySpec,
    pub phase1: PerturbedPhase,
    pub phase2: PerturbedPhase,
    pub h: f64,
    pub resolution: u32,
}

#[derive(Debug, Clone)]
pub struct DykhneSpec {
    pub phases: LimitPhases,
    pub h: f64,
    pub theta_list: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum MaskSpec {
    Generate {
        shape: GeometrySpec,
        resolution: u32,
        path: PathBuf,
    },
    Inspect {
        path: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub enum CommandSpec {
    CellSolve(CellSolveSpec),
    SweepCross(SweepCrossSpec),
    SweepFiber(SweepFiberSpec),
    DualityCheck(DualitySpec),
    Dykhne(DykhneSpec),
    Mask(MaskSpec),
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub common: CommonOpts,
    pub command: CommandSpec,
}

// ---------------------------------------------------------------------------
// Key=value parsing
// ---------------------------------------------------------------------------

const COMMON_KEYS: &[&str] = &[
    "out",
    "res",
    "tol",
    "max_iters",
    "precond",
    "restart",
    "threads",
    "no_timing",
    "seed",
];

fn command_keys(command: &str) -> &'static [&'static str] {
    match command {
        "cell-solve" => &[
            "geometry",
            "dim",
            "t",
            "ell",
            "r",
            "axis",
            "fraction",
            "mask_path",
            "alpha1",
            "beta1",
            "alpha2",
            "beta2",
            "h",
        ],
        "sweep-cross" => &[
            "alpha1",
            "beta1",
            "alpha2",
            "beta2",
            "ell",
            "h",
            "t_list",
            "res_list",
            "beta_mode",
        ],
        "sweep-fiber3d" => &[
            "alpha1",
            "beta1",
            "alpha2",
            "beta2",
            "h",
            "r_list",
            "res_list",
            "eps_list",
            "beta_mode",
        ],
        "duality-check" => &[
            "geometry",
            "t",
            "ell",
            "axis",
            "fraction",
            "mask_path",
            "alpha1",
            "beta1",
            "alpha2",
            "beta2",
            "h",
        ],
        "dykhne" => &["alpha1", "beta1", "alpha2", "beta2", "h", "theta_list"],
        "mask" => &["mode", "shape", "t", "ell", "r", "axis", "fraction", "path"],
        _ => &[],
    }
}

/// Parses the flat `key = value` file format. `#` starts a comment.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected `key = value`, got `{raw}`",
                path.display(),
                idx + 1
            ))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!(
                "{}:{}: duplicate key `{key}`",
                path.display(),
                idx + 1
            )));
        }
    }
    Ok(map)
}

struct KeyMap {
    map: BTreeMap<String, String>,
}

impl KeyMap {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, Error> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("{key}: invalid number `{v}`")))
            })
            .transpose()
    }

    fn require_f64(&self, key: &str) -> Result<f64, Error> {
        self.f64(key)?
            .ok_or_else(|| Error::Config(format!("{key}: missing required key")))
    }

    fn u32(&self, key: &str) -> Result<Option<u32>, Error> {
        self.get(key)
            .map(|v| {
                v.parse::<u32>()
                    .map_err(|_| Error::Config(format!("{key}: invalid integer `{v}`")))
            })
            .transpose()
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, Error> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("{key}: invalid integer `{v}`")))
            })
            .transpose()
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, Error> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("{key}: invalid integer `{v}`")))
            })
            .transpose()
    }

    fn bool(&self, key: &str) -> Result<Option<bool>, Error> {
        self.get(key)
            .map(|v| match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Config(format!("{key}: invalid boolean `{other}`"))),
            })
            .transpose()
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, Error> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|tok| {
                        tok.trim().parse::<f64>().map_err(|_| {
                            Error::Config(format!("{key}: invalid number `{tok}` in list"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    fn u32_list(&self, key: &str) -> Result<Option<Vec<u32>>, Error> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|tok| {
                        tok.trim().parse::<u32>().map_err(|_| {
                            Error::Config(format!("{key}: invalid integer `{tok}` in list"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

fn positive(key: &str, value: f64) -> Result<f64, Error> {
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::Config(format!("{key} must be > 0 (got {value})")));
    }
    Ok(value)
}

fn limit_phases(map: &KeyMap) -> Result<LimitPhases, Error> {
    let alpha1 = positive("alpha1", map.require_f64("alpha1")?)?;
    let beta1 = map.f64("beta1")?.unwrap_or(0.0);
    let alpha2 = positive("alpha2", map.require_f64("alpha2")?)?;
    let beta2 = map.f64("beta2")?.unwrap_or(0.0);
    Ok(LimitPhases::new(alpha1, beta1, alpha2, beta2)?)
}

fn scalar_h(map: &KeyMap) -> Result<f64, Error> {
    let raw = map
        .get("h")
        .ok_or_else(|| Error::Config("h: missing required key".to_string()))?;
    if raw.contains(',') {
        return Err(Error::Config(
            "h: this subcommand is planar and takes a scalar field parameter".to_string(),
        ));
    }
    raw.parse::<f64>()
        .map_err(|_| Error::Config(format!("h: invalid number `{raw}`")))
}

fn vector_h(map: &KeyMap) -> Result<[f64; 3], Error> {
    let raw = map
        .get("h")
        .ok_or_else(|| Error::Config("h: missing required key".to_string()))?;
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "h: dimension mismatch, expected three comma-separated components (got `{raw}`)"
        )));
    }
    let mut out = [0.0; 3];
    for (slot, tok) in out.iter_mut().zip(&parts) {
        *slot = tok
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("h: invalid number `{tok}`")))?;
    }
    Ok(out)
}

fn geometry_spec(
    map: &KeyMap,
    allow_3d: bool,
    allow_constant: bool,
) -> Result<GeometrySpec, Error> {
    let kind = map
        .get("geometry")
        .or_else(|| map.get("shape"))
        .ok_or_else(|| Error::Config("geometry: missing required key".to_string()))?;
    let spec = match kind {
        "constant" => GeometrySpec::Constant {
            dim: map.usize("dim")?.unwrap_or(2),
        },
        "cross" => GeometrySpec::Cross {
            t: map.require_f64("t")?,
            ell: map.f64("ell")?.unwrap_or(1.0),
        },
        "fiber3d" => GeometrySpec::Fiber3d {
            r: map.require_f64("r")?,
        },
        "triaxial" => GeometrySpec::Triaxial {
            r: map.require_f64("r")?,
        },
        "laminate" => GeometrySpec::Laminate {
            axis: map.usize("axis")?.unwrap_or(0),
            fraction: map.require_f64("fraction")?,
        },
        "checkerboard" => GeometrySpec::Checkerboard,
        "mask" => GeometrySpec::MaskFile {
            path: PathBuf::from(
                map.get("mask_path")
                    .or_else(|| map.get("path"))
                    .ok_or_else(|| Error::Config("mask_path: missing required key".to_string()))?,
            ),
        },
        other => return Err(Error::Config(format!("geometry: unknown kind `{other}`"))),
    };
    if !allow_constant && matches!(spec, GeometrySpec::Constant { .. }) {
        return Err(Error::Config(
            "geometry: `constant` is not valid for this subcommand".to_string(),
        ));
    }
    if !allow_3d && spec.static_dim() == Some(3) {
        return Err(Error::Config(
            "geometry: this subcommand is planar".to_string(),
        ));
    }
    if let GeometrySpec::Constant { dim } = spec {
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("dim must be 2 or 3 (got {dim})")));
        }
    }
    Ok(spec)
}

fn hall_for_dim(map: &KeyMap, dim: usize) -> Result<HallVector, Error> {
    match dim {
        2 => Ok(HallVector::Plane(scalar_h(map)?)),
        3 => Ok(HallVector::Space(vector_h(map)?)),
        other => Err(Error::Config(format!("unsupported dimension {other}"))),
    }
}

/// Merges the config file with override pairs and validates against the
/// subcommand schema, producing a typed run configuration.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    command: &str,
) -> Result<RunConfig, Error> {
    let mut map = match file {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }

    let allowed = command_keys(command);
    for key in map.keys() {
        if !COMMON_KEYS.contains(&key.as_str()) && !allowed.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unknown key `{key}` for subcommand `{command}`"
            )));
        }
    }
    let map = KeyMap { map };

    let precond = match map.get("precond") {
        None | Some("diagonal") => Preconditioner::Diagonal,
        Some("none") => Preconditioner::None,
        Some(other) => {
            return Err(Error::Config(format!(
                "precond: expected `none` or `diagonal` (got `{other}`)"
            )))
        }
    };
    let common = CommonOpts {
        out: PathBuf::from(map.get("out").unwrap_or("out")),
        res: map.u32("res")?,
        tol: map.f64("tol")?,
        max_iters: map.usize("max_iters")?,
        precond,
        restart: map.usize("restart")?,
        threads: map.usize("threads")?,
        no_timing: map.bool("no_timing")?.unwrap_or(false),
        seed: map.u64("seed")?,
    };
    if let Some(tol) = common.tol {
        if !(tol > 0.0 && tol <= 1e-3) {
            return Err(Error::Config(format!(
                "tol must lie in (0, 1e-3] (got {tol})"
            )));
        }
    }

    let command_spec = match command {
        "cell-solve" => {
            let geometry = geometry_spec(&map, true, true)?;
            let alpha1 = positive("alpha1", map.require_f64("alpha1")?)?;
            let beta1 = map.f64("beta1")?.unwrap_or(0.0);
            let phase1 = PerturbedPhase::new(alpha1, beta1)?;
            let phase2 = match map.f64("alpha2")? {
                Some(a2) => Some(PerturbedPhase::new(
                    positive("alpha2", a2)?,
                    map.f64("beta2")?.unwrap_or(0.0),
                )?),
                None => None,
            };
            let dim = geometry.static_dim().unwrap_or(2);
            let h = if matches!(geometry, GeometrySpec::MaskFile { .. }) {
                // Dimension comes from the file; accept either form now and
                // re-check at dispatch.
                let raw = map
                    .get("h")
                    .ok_or_else(|| Error::Config("h: missing required key".to_string()))?;
                if raw.contains(',') {
                    HallVector::Space(vector_h(&map)?)
                } else {
                    HallVector::Plane(scalar_h(&map)?)
                }
            } else {
                hall_for_dim(&map, dim)?
            };
            if !matches!(geometry, GeometrySpec::Constant { .. }) && phase2.is_none() {
                return Err(Error::Config(
                    "alpha2: missing required key (two-phase geometry)".to_string(),
                ));
            }
            CommandSpec::CellSolve(CellSolveSpec {
                geometry,
                phase1,
                phase2,
                h,
                resolution: common.res.unwrap_or(32),
            })
        }
        "sweep-cross" => {
            let phases = limit_phases(&map)?;
            let t_list = map
                .f64_list("t_list")?
                .ok_or_else(|| Error::Config("t_list: missing required key".to_string()))?;
            let beta_mode = match map.get("beta_mode") {
                None | Some("strong") => BetaScaling::Strong,
                Some("fixed") => BetaScaling::Fixed,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "beta_mode: expected `strong` or `fixed` (got `{other}`)"
                    )))
                }
            };
            CommandSpec::SweepCross(SweepCrossSpec {
                phases,
                ell: map.f64("ell")?.unwrap_or(1.0),
                h: scalar_h(&map)?,
                t_list,
                res_list: map.u32_list("res_list")?,
                beta_mode,
            })
        }
        "sweep-fiber3d" => {
            let phases = limit_phases(&map)?;
            let r_list = map
                .f64_list("r_list")?
                .ok_or_else(|| Error::Config("r_list: missing required key".to_string()))?;
            let beta_mode = match map.get("beta_mode") {
                None | Some("strong") => BetaScaling::Strong,
                Some("fixed") => BetaScaling::Fixed,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "beta_mode: expected `strong` or `fixed` (got `{other}`)"
                    )))
                }
            };
            CommandSpec::SweepFiber(SweepFiberSpec {
                phases,
                h: vector_h(&map)?,
                r_list,
                res_list: map.u32_list("res_list")?,
                eps_list: map.f64_list("eps_list")?,
                beta_mode,
            })
        }
        "duality-check" => {
            let geometry = geometry_spec(&map, false, false)?;
            let alpha1 = positive("alpha1", map.require_f64("alpha1")?)?;
            let alpha2 = positive("alpha2", map.require_f64("alpha2")?)?;
            CommandSpec::DualityCheck(DualitySpec {
                geometry,
                phase1: PerturbedPhase::new(alpha1, map.f64("beta1")?.unwrap_or(0.0))?,
                phase2: PerturbedPhase::new(alpha2, map.f64("beta2")?.unwrap_or(0.0))?,
                h: scalar_h(&map)?,
                resolution: common.res.unwrap_or(128),
            })
        }
        "dykhne" => {
            let phases = limit_phases(&map)?;
            let theta_list = map
                .f64_list("theta_list")?
                .ok_or_else(|| Error::Config("theta_list: missing required key".to_string()))?;
            CommandSpec::Dykhne(DykhneSpec {
                phases,
                h: scalar_h(&map)?,
                theta_list,
            })
        }
        "mask" => {
            let mode = map
                .get("mode")
                .ok_or_else(|| Error::Config("mode: missing required key".to_string()))?;
            let path = PathBuf::from(
                map.get("path")
                    .ok_or_else(|| Error::Config("path: missing required key".to_string()))?,
            );
            match mode {
                "generate" => CommandSpec::Mask(MaskSpec::Generate {
                    shape: geometry_spec(&map, true, false)?,
                    resolution: common.res.unwrap_or(32),
                    path,
                }),
                "inspect" => CommandSpec::Mask(MaskSpec::Inspect { path }),
                other => {
                    return Err(Error::Config(format!(
                        "mode: expected `generate` or `inspect` (got `{other}`)"
                    )))
                }
            }
        }
        other => return Err(Error::Config(format!("unknown subcommand `{other}`"))),
    };

    Ok(RunConfig {
        common,
        command: command_spec,
    })
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

fn write_report(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn format_matrix(dim: usize, entries: &[f64]) -> String {
    let mut out = String::new();
    for i in 0..dim {
        out.push_str("  [");
        for j in 0..dim {
            let _ = write!(out, " {:>12.6}", entries[i * dim + j]);
        }
        out.push_str(" ]\n");
    }
    out
}

/// Runs the validated configuration: computes, writes reports, prints a
/// summary. Partial results are written before a solver failure is returned.
pub fn dispatch(run: &RunConfig) -> Result<(), Error> {
    let solver_cfg = run.common.solver_config();
    let out = &run.common.out;
    let timing = !run.common.no_timing;

    match &run.command {
        CommandSpec::CellSolve(spec) => {
            let start = Instant::now();
            let (field, phases) = match &spec.geometry {
                GeometrySpec::Constant { dim } => {
                    let p = spec.phase1;
                    let field = if *dim == 2 {
                        let g = CellGeometry::square(spec.resolution)?;
                        let h = spec.h.scalar().ok_or_else(|| {
                            Error::Config("h: dimension mismatch for a 2D cell".to_string())
                        })?;
                        ConductivityField::constant_2d(g, perturbed_tensor_2d(&p, h))?
                    } else {
                        let g = CellGeometry::cube(spec.resolution)?;
                        let h = spec.h.vector().ok_or_else(|| {
                            Error::Config("h: dimension mismatch for a 3D cell".to_string())
                        })?;
                        ConductivityField::constant_3d(g, perturbed_tensor_3d(&p, h))?
                    };
                    let phases = ReportPhases {
                        alpha1: p.alpha(),
                        beta1: p.beta(),
                        alpha2: p.alpha(),
                        beta2: p.beta(),
                    };
                    (field, phases)
                }
                geometry => {
                    let mask = geometry.build_mask(spec.resolution)?;
                    if mask.geometry().dim() != spec.h.dim() {
                        return Err(Error::Config(format!(
                            "h: dimension mismatch, mask is {}D but h is {}D",
                            mask.geometry().dim(),
                            spec.h.dim()
                        )));
                    }
                    let p2 = spec.phase2.expect("validated two-phase spec");
                    let field = assemble_conductivity(&mask, &spec.phase1, &p2, &spec.h)?;
                    let phases = ReportPhases {
                        alpha1: spec.phase1.alpha(),
                        beta1: spec.phase1.beta(),
                        alpha2: p2.alpha(),
                        beta2: p2.beta(),
                    };
                    (field, phases)
                }
            };
            let tensor = effective_tensor(&field, &solver_cfg)?;
            let wall = start.elapsed().as_secs_f64();
            let report = EffectiveTensorReport::new(&tensor, &spec.h, phases, wall);
            write_report(out, "effective_tensor.json", &report.to_json())?;
            let mut csv = String::from("entry,value\n");
            let dim = tensor.dim();
            for i in 0..dim {
                for j in 0..dim {
                    let _ = writeln!(csv, "{}{},{}", i + 1, j + 1, tensor.entry(i, j));
                }
            }
            write_report(out, "effective_tensor.csv", &csv)?;
            println!(
                "effective tensor ({}x{dim} grid {:?}):",
                dim,
                tensor.diagnostics().grid
            );
            print!("{}", format_matrix(dim, tensor.entries()));
            println!(
                "residuals {:?}  iterations {:?}  wall {:.3}s",
                tensor.diagnostics().residuals,
                tensor.diagnostics().iterations,
                wall
            );
        }

        CommandSpec::SweepCross(spec) => {
            let plan = SweepPlan::cross(
                spec.phases,
                spec.ell,
                &spec.t_list,
                spec.res_list.as_deref(),
                spec.beta_mode,
            )?;
            let result = run_cross_sweep(&spec.phases, spec.ell, spec.h, &plan, &solver_cfg);
            write_report(out, "cross_sweep.csv", &result.to_csv(timing))?;
            write_report(out, "cross_sweep.json", &result.to_json(timing))?;
            println!("cross sweep: {} terms", result.records.len());
            for (i, rec) in result.records.iter().enumerate() {
                match result.max_rel_error(i) {
                    Some(err) => println!(
                        "  n={} t={} theta={:.4} res={} max_rel_error={:.4e}",
                        rec.n, rec.feature, rec.theta, rec.resolution, err
                    ),
                    None => println!(
                        "  n={} t={} FAILED: {}",
                        rec.n,
                        rec.feature,
                        rec.solver_error.as_deref().unwrap_or("unknown")
                    ),
                }
            }
            for w in &result.warnings {
                println!("  warning: {w}");
            }
            let failed = result.failed_terms();
            if failed > 0 {
                return Err(Error::SweepFailures(failed));
            }
        }

        CommandSpec::SweepFiber(spec) => {
            let plan = SweepPlan::fiber(
                spec.phases,
                &spec.r_list,
                spec.res_list.as_deref(),
                spec.eps_list.as_deref(),
                spec.beta_mode,
            )?;
            let result = run_fiber_sweep_3d(&spec.phases, spec.h, &plan, &solver_cfg);
            write_report(out, "fiber_sweep.csv", &result.to_csv(timing))?;
            write_report(out, "fiber_sweep.json", &result.to_json(timing))?;
            println!("fiber sweep: {} terms", result.records.len());
            for (i, rec) in result.records.iter().enumerate() {
                match result.max_rel_error(i) {
                    Some(err) => println!(
                        "  n={} r={} theta={:.4} res={} max_rel_error={:.4e} xi={:?}",
                        rec.n, rec.feature, rec.theta, rec.resolution, err, rec.xi_measured
                    ),
                    None => println!(
                        "  n={} r={} FAILED: {}",
                        rec.n,
                        rec.feature,
                        rec.solver_error.as_deref().unwrap_or("unknown")
                    ),
                }
            }
            for w in &result.warnings {
                println!("  warning: {w}");
            }
            let failed = result.failed_terms();
            if failed > 0 {
                return Err(Error::SweepFailures(failed));
            }
        }

        CommandSpec::DualityCheck(spec) => {
            let mask = spec.geometry.build_mask(spec.resolution)?;
            if mask.geometry().dim() != 2 {
                return Err(Error::Config(
                    "duality-check: mask must be planar".to_string(),
                ));
            }
            let report =
                run_duality_harness(&mask, &spec.phase1, &spec.phase2, spec.h, &solver_cfg)?;
            write_report(out, "duality.csv", &report.to_csv())?;
            write_report(out, "duality.json", &report.to_json())?;
            println!("effective tensor:");
            print!(
                "{}",
                format_matrix(
                    2,
                    &report
                        .sigma_star
                        .e
                        .iter()
                        .flatten()
                        .copied()
                        .collect::<Vec<_>>()
                )
            );
            println!(
                "keller deviation {:.4e} (scale {:.4e})",
                report.keller_deviation,
                report.sigma_star.norm()
            );
            match &report.dykhne {
                Some(d) => println!(
                    "transform deviation {:.4e}, worst pointwise asymmetry {:.4e}",
                    d.deviation, d.max_pointwise_asymmetry
                ),
                None => println!("transform degenerate; bypassed"),
            }
        }

        CommandSpec::Dykhne(spec) => {
            let rows = run_dykhne_asymptotics(&spec.phases, spec.h, &spec.theta_list)?;
            write_report(out, "dykhne_asymptotics.csv", &asymptotics_to_csv(&rows))?;
            write_report(
                out,
                "dykhne_asymptotics.json",
                &serde_json::to_string_pretty(&rows).expect("rows serialize"),
            )?;
            println!("theta ladder ({} rows):", rows.len());
            for r in &rows {
                println!(
                    "  theta={:.3e} alpha1'={:.8} theta*alpha2'={:.8} q={:.8} r={:.3e}",
                    r.theta, r.alpha1_prime, r.theta_alpha2_prime, r.q, r.r
                );
            }
        }

        CommandSpec::Mask(spec) => match spec {
            MaskSpec::Generate {
                shape,
                resolution,
                path,
            } => {
                let mask = shape.build_mask(*resolution)?;
                write_mask(path, &mask)?;
                println!(
                    "wrote {} ({}D, grid {:?}, fraction {:.6})",
                    path.display(),
                    mask.geometry().dim(),
                    mask.geometry().counts(),
                    mask.fraction()
                );
            }
            MaskSpec::Inspect { path } => {
                let mask = read_mask(path)?;
                let header = mask_to_string(&mask);
                let header = header.lines().nth(1).unwrap_or("");
                println!(
                    "{}: {header} fraction={:.6} elements={}",
                    path.display(),
                    mask.fraction(),
                    mask.geometry().num_elements()
                );
            }
        },
    }
    Ok(())
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Geometry(_) => EXIT_CONFIG,
        Error::Tensor(TensorError::InvalidPhase(_)) => EXIT_CONFIG,
        Error::Tensor(_) => EXIT_SOLVER,
        Error::Solver(SolverError::InvalidConfig(_)) => EXIT_CONFIG,
        Error::Solver(_) => EXIT_SOLVER,
        Error::SweepFailures(_) => EXIT_SOLVER,
        Error::Mask(MaskError::Io(_)) => EXIT_IO,
        Error::Mask(_) => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
    }
}

/// Parses flags into override pairs, merges with the config file, runs the
/// command, and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let name = cli.command.name();
    let args = cli.command.args().clone();

    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(out) = &args.out {
        overrides.push(("out".to_string(), out.display().to_string()));
    }
    if let Some(res) = args.res {
        overrides.push(("res".to_string(), res.to_string()));
    }
    if let Some(tol) = args.tol {
        overrides.push(("tol".to_string(), tol.to_string()));
    }
    if let Some(threads) = args.threads {
        overrides.push(("threads".to_string(), threads.to_string()));
    }
    if args.no_timing {
        overrides.push(("no_timing".to_string(), "true".to_string()));
    }
    for pair in &args.set {
        match pair.split_once('=') {
            Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
            None => {
                eprintln!("error: --set expects KEY=VALUE (got `{pair}`)");
                return EXIT_CONFIG;
            }
        }
    }

    let run = match parse_config(args.config.as_deref(), &overrides, name) {
        Ok(run) => run,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };

    if let Some(threads) = run.common.threads {
        // First caller wins; later attempts (e.g. in tests) are harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    match dispatch(&run) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
