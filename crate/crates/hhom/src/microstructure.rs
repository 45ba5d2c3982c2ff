//! Rasterized period-cell geometries and per-element conductivity fields.
//!
//! The cell is `(-ell/2, ell/2) x (-1/2, 1/2)` in the plane (unit square when
//! `ell = 1`) or the centered unit cube in space. Shapes are rasterized by an
//! element-center test; boundary ties go to phase 2 because the inclusion
//! sets are closed. Flags are stored x-fastest, then y, then z.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GeometryError, MaskError};
use crate::tensor::{
    perturbed_tensor_2d, perturbed_tensor_3d, HallVector, Mat2, Mat3, PerturbedPhase,
};

/// Minimum elements per unit length.
pub const MIN_RESOLUTION: u32 = 4;

/// Discretized period cell: axis extents and element counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    dim: usize,
    n: [usize; 3],
    spacing: [f64; 3],
    ell: f64,
    resolution: u32,
}

impl CellGeometry {
    /// 2D cell `(-ell/2, ell/2) x (-1/2, 1/2)`; `resolution` counts elements
    /// per unit length, so elements stay (nearly) square for any aspect.
    pub fn rect(ell: f64, resolution: u32) -> Result<Self, GeometryError> {
        if !(ell.is_finite() && ell >= 1.0) {
            return Err(GeometryError::Parameter(format!(
                "cell aspect ell must be >= 1 (got {ell})"
            )));
        }
        if resolution < MIN_RESOLUTION {
            return Err(GeometryError::Parameter(format!(
                "resolution must be >= {MIN_RESOLUTION} (got {resolution})"
            )));
        }
        let nx = (ell * resolution as f64).round().max(1.0) as usize;
        let ny = resolution as usize;
        Ok(Self {
            dim: 2,
            n: [nx, ny, 1],
            spacing: [ell / nx as f64, 1.0 / ny as f64, 1.0],
            ell,
            resolution,
        })
    }

    /// 2D unit cell.
    pub fn square(resolution: u32) -> Result<Self, GeometryError> {
        Self::rect(1.0, resolution)
    }

    /// 3D centered unit cube.
    pub fn cube(resolution: u32) -> Result<Self, GeometryError> {
        if resolution < MIN_RESOLUTION {
            return Err(GeometryError::Parameter(format!(
                "resolution must be >= {MIN_RESOLUTION} (got {resolution})"
            )));
        }
        let n = resolution as usize;
        Ok(Self {
            dim: 3,
            n: [n, n, n],
            spacing: [1.0 / n as f64; 3],
            ell: 1.0,
            resolution,
        })
    }

    fn from_counts(dim: usize, n: [usize; 3], ell: f64) -> Result<Self, GeometryError> {
        if dim == 2 {
            let g = Self {
                dim,
                n: [n[0], n[1], 1],
                spacing: [ell / n[0] as f64, 1.0 / n[1] as f64, 1.0],
                ell,
                resolution: n[1] as u32,
            };
            if n[1] < MIN_RESOLUTION as usize || n[0] == 0 {
                return Err(GeometryError::Parameter(format!(
                    "element counts {n:?} below the minimum resolution"
                )));
            }
            Ok(g)
        } else {
            if n[0] != n[1] || n[1] != n[2] || n[0] < MIN_RESOLUTION as usize {
                return Err(GeometryError::Parameter(format!(
                    "3D masks use a uniform cube grid of at least {MIN_RESOLUTION} (got {n:?})"
                )));
            }
            Self::cube(n[0] as u32)
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Element counts per axis (`nz = 1` in 2D).
    pub fn counts(&self) -> [usize; 3] {
        self.n
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn num_elements(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    /// Periodic identification makes the node grid match the element grid.
    pub fn num_nodes(&self) -> usize {
        self.num_elements()
    }

    /// Cell measure (`ell` in 2D, 1 in 3D).
    pub fn measure(&self) -> f64 {
        if self.dim == 2 {
            self.ell
        } else {
            1.0
        }
    }

    pub fn element_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * if self.dim == 3 { self.spacing[2] } else { 1.0 }
    }

    /// Center of element `(i, j, k)` in centered cell coordinates.
    pub fn element_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            -0.5 * self.ell + (i as f64 + 0.5) * self.spacing[0],
            -0.5 + (j as f64 + 0.5) * self.spacing[1],
            if self.dim == 3 {
                -0.5 + (k as f64 + 0.5) * self.spacing[2]
            } else {
                0.0
            },
        ]
    }

    pub fn element_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }
}

/// Rasterized characteristic function of phase 2 (the high-conductivity set).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMask {
    geometry: CellGeometry,
    flags: Vec<bool>,
}

impl PhaseMask {
    pub fn new(geometry: CellGeometry, flags: Vec<bool>) -> Result<Self, GeometryError> {
        if flags.len() != geometry.num_elements() {
            return Err(GeometryError::Parameter(format!(
                "flag count {} does not match the {}-element grid",
                flags.len(),
                geometry.num_elements()
            )));
        }
        Ok(Self { geometry, flags })
    }

    pub fn geometry(&self) -> &CellGeometry {
        &self.geometry
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count_true(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    /// Measured volume fraction of phase 2 (per cell, not per unit measure).
    pub fn fraction(&self) -> f64 {
        self.count_true() as f64 / self.flags.len() as f64
    }
}

fn rasterize(geometry: CellGeometry, inside: impl Fn([f64; 3]) -> bool) -> PhaseMask {
    let [nx, ny, nz] = geometry.counts();
    let mut flags = vec![false; geometry.num_elements()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                flags[geometry.element_index(i, j, k)] = inside(geometry.element_center(i, j, k));
            }
        }
    }
    PhaseMask { geometry, flags }
}

/// Union of the two axis bars of half-width `t` through the cell center:
/// `{|x1| <= t or |x2| <= t}`, fraction `(2t(ell+1) - 4t^2)/ell` of the cell.
pub fn build_cross_cell(t: f64, ell: f64, resolution: u32) -> Result<PhaseMask, GeometryError> {
    if !(t.is_finite() && t > 0.0 && t <= 0.5) {
        return Err(GeometryError::Parameter(format!(
            "bar half-width t must lie in (0, 1/2] (got {t})"
        )));
    }
    let geometry = CellGeometry::rect(ell, resolution)?;
    if 2.0 * t * resolution as f64 + 1e-12 < 2.0 {
        return Err(GeometryError::UnderResolved {
            feature: 2.0 * t,
            required: 2,
            resolution,
        });
    }
    Ok(rasterize(geometry, |c| c[0].abs() <= t || c[1].abs() <= t))
}

/// Closed cylinder of radius `r` along the x3-axis; fraction `pi r^2`.
pub fn build_fiber_cell_3d(r: f64, resolution: u32) -> Result<PhaseMask, GeometryError> {
    if !(r.is_finite() && r > 0.0 && r < 0.5) {
        return Err(GeometryError::Parameter(format!(
            "fiber radius r must lie in (0, 1/2) (got {r})"
        )));
    }
    let geometry = CellGeometry::cube(resolution)?;
    if 2.0 * r * resolution as f64 + 1e-12 < 3.0 {
        return Err(GeometryError::UnderResolved {
            feature: 2.0 * r,
            required: 3,
            resolution,
        });
    }
    let rsq = r * r;
    Ok(rasterize(geometry, |c| c[0] * c[0] + c[1] * c[1] <= rsq))
}

/// Union of the three orthogonal cylinders of radius `r` through the center.
pub fn build_triaxial_fiber_cell(r: f64, resolution: u32) -> Result<PhaseMask, GeometryError> {
    if !(r.is_finite() && r > 0.0 && r < 0.5) {
        return Err(GeometryError::Parameter(format!(
            "fiber radius r must lie in (0, 1/2) (got {r})"
        )));
    }
    let geometry = CellGeometry::cube(resolution)?;
    if 2.0 * r * resolution as f64 + 1e-12 < 3.0 {
        return Err(GeometryError::UnderResolved {
            feature: 2.0 * r,
            required: 3,
            resolution,
        });
    }
    let rsq = r * r;
    Ok(rasterize(geometry, |c| {
        c[0] * c[0] + c[1] * c[1] <= rsq
            || c[1] * c[1] + c[2] * c[2] <= rsq
            || c[0] * c[0] + c[2] * c[2] <= rsq
    }))
}

/// Axis-aligned layer normal to `axis` (0 = x1, 1 = x2) occupying the lower
/// `fraction` of the unit cell.
pub fn build_laminate(
    axis: usize,
    fraction: f64,
    resolution: u32,
) -> Result<PhaseMask, GeometryError> {
    if axis > 1 {
        return Err(GeometryError::Parameter(format!(
            "laminate axis must be 0 or 1 (got {axis})"
        )));
    }
    if !(fraction.is_finite() && fraction > 0.0 && fraction < 1.0) {
        return Err(GeometryError::Parameter(format!(
            "laminate fraction must lie in (0, 1) (got {fraction})"
        )));
    }
    let geometry = CellGeometry::square(resolution)?;
    let cut = -0.5 + fraction;
    Ok(rasterize(geometry, |c| c[axis] < cut))
}

/// 2x2 checkerboard tiling of the unit cell; fraction exactly 1/2.
pub fn build_checkerboard(resolution: u32) -> Result<PhaseMask, GeometryError> {
    if resolution % 2 != 0 {
        return Err(GeometryError::Parameter(format!(
            "checkerboard resolution must be even (got {resolution})"
        )));
    }
    let geometry = CellGeometry::square(resolution)?;
    Ok(rasterize(geometry, |c| (c[0] < 0.0) != (c[1] < 0.0)))
}

// ---------------------------------------------------------------------------
// Conductivity fields
// ---------------------------------------------------------------------------

/// Per-element small tensors over the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldTensors {
    Plane(Vec<Mat2>),
    Space(Vec<Mat3>),
}

/// Per-element conductivity over a discretized cell, with the recorded
/// coercivity constant (smallest eigenvalue of any symmetric part).
#[derive(Debug, Clone)]
pub struct ConductivityField {
    geometry: CellGeometry,
    tensors: FieldTensors,
    alpha_min: f64,
    alpha_max: f64,
}

impl ConductivityField {
    pub fn new(geometry: CellGeometry, tensors: FieldTensors) -> Result<Self, GeometryError> {
        let (len, dim_ok) = match &tensors {
            FieldTensors::Plane(v) => (v.len(), geometry.dim() == 2),
            FieldTensors::Space(v) => (v.len(), geometry.dim() == 3),
        };
        if !dim_ok {
            return Err(GeometryError::DimensionMismatch(
                "tensor rank does not match the cell dimension".to_string(),
            ));
        }
        if len != geometry.num_elements() {
            return Err(GeometryError::Parameter(format!(
                "tensor count {len} does not match the {}-element grid",
                geometry.num_elements()
            )));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        match &tensors {
            FieldTensors::Plane(v) => {
                for m in v {
                    if !m.is_finite() {
                        return Err(GeometryError::Parameter(
                            "conductivity entries must be finite".to_string(),
                        ));
                    }
                    let (a, b) = m.sym_eigen_bounds();
                    lo = lo.min(a);
                    hi = hi.max(b);
                }
            }
            FieldTensors::Space(v) => {
                for m in v {
                    if !m.is_finite() {
                        return Err(GeometryError::Parameter(
                            "conductivity entries must be finite".to_string(),
                        ));
                    }
                    let (a, b) = m.sym_eigen_bounds();
                    lo = lo.min(a);
                    hi = hi.max(b);
                }
            }
        }
        if !(lo > 0.0) {
            return Err(GeometryError::Parameter(format!(
                "field is not coercive: min symmetric-part eigenvalue {lo:.3e}"
            )));
        }
        Ok(Self {
            geometry,
            tensors,
            alpha_min: lo,
            alpha_max: hi,
        })
    }

    pub fn constant_2d(geometry: CellGeometry, tensor: Mat2) -> Result<Self, GeometryError> {
        let n = geometry.num_elements();
        Self::new(geometry, FieldTensors::Plane(vec![tensor; n]))
    }

    pub fn constant_3d(geometry: CellGeometry, tensor: Mat3) -> Result<Self, GeometryError> {
        let n = geometry.num_elements();
        Self::new(geometry, FieldTensors::Space(vec![tensor; n]))
    }

    pub fn geometry(&self) -> &CellGeometry {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.geometry.dim()
    }

    pub fn tensors(&self) -> &FieldTensors {
        &self.tensors
    }

    /// Recorded equi-coercivity constant.
    pub fn alpha_min(&self) -> f64 {
        self.alpha_min
    }

    /// Ratio of extreme symmetric-part eigenvalues over the cell.
    pub fn contrast(&self) -> f64 {
        self.alpha_max / self.alpha_min
    }

    /// Pointwise map over a 2D field (for dual and transformed media).
    pub fn map_2d<E>(
        &self,
        f: impl Fn(&Mat2) -> Result<Mat2, E>,
    ) -> Result<Result<Self, GeometryError>, E> {
        let FieldTensors::Plane(v) = &self.tensors else {
            return Ok(Err(GeometryError::DimensionMismatch(
                "pointwise 2D map applied to a 3D field".to_string(),
            )));
        };
        let mut out = Vec::with_capacity(v.len());
        for m in v {
            out.push(f(m)?);
        }
        Ok(Self::new(self.geometry, FieldTensors::Plane(out)))
    }

    pub fn transpose(&self) -> Self {
        let tensors = match &self.tensors {
            FieldTensors::Plane(v) => {
                FieldTensors::Plane(v.iter().map(|m| m.transpose()).collect())
            }
            FieldTensors::Space(v) => {
                FieldTensors::Space(v.iter().map(|m| m.transpose()).collect())
            }
        };
        Self {
            geometry: self.geometry,
            tensors,
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
        }
    }
}

/// Builds the two-phase field: phase 1 off the mask, phase 2 on it, each
/// perturbed by `h`.
pub fn assemble_conductivity(
    mask: &PhaseMask,
    phase1: &PerturbedPhase,
    phase2: &PerturbedPhase,
    h: &HallVector,
) -> Result<ConductivityField, GeometryError> {
    let dim = mask.geometry().dim();
    if h.dim() != dim {
        return Err(GeometryError::DimensionMismatch(format!(
            "mask is {dim}D but the field parameter is {}D",
            h.dim()
        )));
    }
    let tensors = match h {
        HallVector::Plane(h) => {
            let t1 = perturbed_tensor_2d(phase1, *h);
            let t2 = perturbed_tensor_2d(phase2, *h);
            FieldTensors::Plane(
                mask.flags()
                    .iter()
                    .map(|&f| if f { t2 } else { t1 })
                    .collect(),
            )
        }
        HallVector::Space(h) => {
            let t1 = perturbed_tensor_3d(phase1, *h);
            let t2 = perturbed_tensor_3d(phase2, *h);
            FieldTensors::Space(
                mask.flags()
                    .iter()
                    .map(|&f| if f { t2 } else { t1 })
                    .collect(),
            )
        }
    };
    ConductivityField::new(*mask.geometry(), tensors)
}

// ---------------------------------------------------------------------------
// Mask file format
// ---------------------------------------------------------------------------

const MASK_MAGIC: &str = "HHOM-MASK v1";

/// Serializes a mask in the HHOM-MASK v1 text format: a magic line, a header
/// of `key=value` pairs, then rows of `0`/`1` characters (x-fastest, then y,
/// then z) and a trailing newline.
pub fn mask_to_string(mask: &PhaseMask) -> String {
    let g = mask.geometry();
    let [nx, ny, nz] = g.counts();
    let mut out = String::new();
    out.push_str(MASK_MAGIC);
    out.push('\n');
    if g.dim() == 2 {
        let _ = writeln!(out, "d=2 nx={nx} ny={ny} ell={}", g.ell());
    } else {
        let _ = writeln!(out, "d=3 nx={nx} ny={ny} nz={nz} ell={}", g.ell());
    }
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(if mask.flags()[g.element_index(i, j, k)] {
                    '1'
                } else {
                    '0'
                });
            }
            out.push('\n');
        }
    }
    out
}

/// Parses the HHOM-MASK v1 format. Unknown header keys are rejected and the
/// trailing newline is required; errors carry 1-based line numbers.
pub fn mask_from_str(text: &str) -> Result<PhaseMask, MaskError> {
    if !text.ends_with('\n') {
        let line = text.lines().count().max(1);
        return Err(MaskError::Parse {
            line,
            message: "missing trailing newline".to_string(),
        });
    }
    let mut lines = text.split('\n');
    let magic = lines.next().unwrap_or_default();
    if magic != MASK_MAGIC {
        return Err(MaskError::Parse {
            line: 1,
            message: format!("expected `{MASK_MAGIC}` header, got `{magic}`"),
        });
    }
    let header = lines.next().ok_or(MaskError::Parse {
        line: 2,
        message: "missing geometry header".to_string(),
    })?;
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for token in header.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| MaskError::Parse {
            line: 2,
            message: format!("malformed header token `{token}`"),
        })?;
        if fields.insert(key, value).is_some() {
            return Err(MaskError::Parse {
                line: 2,
                message: format!("duplicate header key `{key}`"),
            });
        }
    }
    let dim_raw = fields.remove("d").ok_or(MaskError::Parse {
        line: 2,
        message: "missing key `d`".to_string(),
    })?;
    let dim: usize = match dim_raw {
        "2" => 2,
        "3" => 3,
        other => {
            return Err(MaskError::UnsupportedDimension {
                line: 2,
                dim: other.to_string(),
            })
        }
    };
    let mut take_usize = |key: &str| -> Result<usize, MaskError> {
        let raw = fields.remove(key).ok_or_else(|| MaskError::Parse {
            line: 2,
            message: format!("missing key `{key}`"),
        })?;
        raw.parse().map_err(|_| MaskError::Parse {
            line: 2,
            message: format!("key `{key}`: invalid integer `{raw}`"),
        })
    };
    let nx = take_usize("nx")?;
    let ny = take_usize("ny")?;
    let nz = if dim == 3 { take_usize("nz")? } else { 1 };
    let ell_raw = fields.remove("ell").ok_or(MaskError::Parse {
        line: 2,
        message: "missing key `ell`".to_string(),
    })?;
    let ell: f64 = ell_raw.parse().map_err(|_| MaskError::Parse {
        line: 2,
        message: format!("key `ell`: invalid float `{ell_raw}`"),
    })?;
    if let Some((key, _)) = fields.iter().next() {
        return Err(MaskError::Parse {
            line: 2,
            message: format!("unknown header key `{key}`"),
        });
    }
    let geometry = CellGeometry::from_counts(dim, [nx, ny, nz], ell)?;

    let mut flags = vec![false; geometry.num_elements()];
    let expected_rows = ny * nz;
    let mut row = 0usize;
    for (offset, line) in lines.enumerate() {
        let line_no = 3 + offset;
        if line.is_empty() {
            // Only the terminal empty fragment after the trailing newline.
            continue;
        }
        if row >= expected_rows {
            return Err(MaskError::Parse {
                line: line_no,
                message: "more data rows than the header declares".to_string(),
            });
        }
        if line.len() != nx {
            return Err(MaskError::Parse {
                line: line_no,
                message: format!("expected {nx} characters, got {}", line.len()),
            });
        }
        let (k, j) = (row / ny, row % ny);
        for (i, ch) in line.chars().enumerate() {
            flags[geometry.element_index(i, j, k)] = match ch {
                '0' => false,
                '1' => true,
                other => {
                    return Err(MaskError::Parse {
                        line: line_no,
                        message: format!("invalid character `{other}` (want 0/1)"),
                    })
                }
            };
        }
        row += 1;
    }
    if row != expected_rows {
        return Err(MaskError::Parse {
            line: 2 + row + 1,
            message: format!("truncated mask: got {row} of {expected_rows} rows"),
        });
    }
    Ok(PhaseMask { geometry, flags })
}

pub fn write_mask(path: &Path, mask: &PhaseMask) -> Result<(), MaskError> {
    std::fs::write(path, mask_to_string(mask))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<PhaseMask, MaskError> {
    let text = std::fs::read_to_string(path)?;
    mask_from_str(&text)
}
