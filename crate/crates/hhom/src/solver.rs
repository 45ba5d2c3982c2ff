//! Periodic corrector solves and effective tensors on structured grids.
//!
//! Discretization: first-order conforming elements on the uniform grid
//! (bilinear in the plane, trilinear in space) with per-element constant
//! conductivity and exact Gauss quadrature. Periodicity is imposed by DOF
//! identification, so the node grid equals the element grid. The corrector
//! ansatz is `W = lambda . y - X` with `X` periodic and mean-free, giving the
//! consistent singular system `div(A grad X) = div(A lambda)`.
//!
//! The assembled operator is non-symmetric whenever the conductivity has an
//! antisymmetric part. Non-symmetric systems are solved with a restarted
//! stabilized bi-conjugate gradient method (the restart length re-seeds the
//! shadow residual); symmetric ones fall back to conjugate gradients. Both
//! use optional diagonal preconditioning and project the constant mode out
//! of every search direction. Iteration counts grow roughly with the square
//! root of the contrast; the tolerance is never loosened silently.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::SolverError;
use crate::microstructure::{CellGeometry, ConductivityField, FieldTensors, PhaseMask};
use crate::tensor::{Mat2, Mat3};

/// Chunk length for deterministic parallel reductions: partial sums are
/// collected in index order and folded sequentially, so results do not
/// depend on thread count or scheduling.
const REDUCE_CHUNK: usize = 8192;

/// Gauss points of the 2-point rule on [0, 1] (exact for the bilinear forms
/// integrated here).
const GAUSS: [f64; 2] = [0.5 - 0.288_675_134_594_812_9, 0.5 + 0.288_675_134_594_812_9];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Diagonal,
}

/// Linear-solver controls for the corrector problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative residual target, in (0, 1e-3].
    pub rel_tol: f64,
    pub max_iterations: usize,
    pub preconditioner: Preconditioner,
    /// Restart length for the non-symmetric Krylov method.
    pub restart: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            max_iterations: 200_000,
            preconditioner: Preconditioner::Diagonal,
            restart: 250,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-3) {
            return Err(SolverError::InvalidConfig(format!(
                "rel_tol must lie in (0, 1e-3] (got {})",
                self.rel_tol
            )));
        }
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidConfig(
                "max_iterations must be at least 1".to_string(),
            ));
        }
        if self.restart < 2 {
            return Err(SolverError::InvalidConfig(format!(
                "restart must be at least 2 (got {})",
                self.restart
            )));
        }
        Ok(())
    }
}

/// Solved periodic corrector for one loading direction.
#[derive(Debug, Clone)]
pub struct CorrectorField {
    geometry: CellGeometry,
    lambda: [f64; 3],
    /// Nodal values of the periodic, mean-free fluctuation `X = lambda.y - W`.
    fluctuation: Vec<f64>,
    /// Per-element mean gradient of the full potential `W`, `dim` components
    /// per element.
    gradient: Vec<f64>,
    residual: f64,
    iterations: usize,
}

impl CorrectorField {
    pub fn geometry(&self) -> &CellGeometry {
        &self.geometry
    }

    pub fn lambda(&self) -> [f64; 3] {
        self.lambda
    }

    pub fn fluctuation(&self) -> &[f64] {
        &self.fluctuation
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn mean_fluctuation(&self) -> f64 {
        self.fluctuation.iter().sum::<f64>() / self.fluctuation.len() as f64
    }
}

/// Solve diagnostics attached to an effective tensor.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub grid: [usize; 3],
    pub resolution: u32,
    /// True relative residual per loading direction.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    /// Recorded equi-coercivity constant of the field.
    pub coercivity: f64,
    /// Ratio of extreme symmetric-part eigenvalues over the cell.
    pub contrast: f64,
}

/// Homogenized matrix with solver diagnostics.
#[derive(Debug, Clone)]
pub struct EffectiveTensor {
    dim: usize,
    entries: Vec<f64>,
    diagnostics: Diagnostics,
}

impl EffectiveTensor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn mat2(&self) -> Mat2 {
        assert_eq!(self.dim, 2, "effective tensor is not planar");
        Mat2::new([
            [self.entries[0], self.entries[1]],
            [self.entries[2], self.entries[3]],
        ])
    }

    pub fn mat3(&self) -> Mat3 {
        assert_eq!(self.dim, 3, "effective tensor is not spatial");
        let e = &self.entries;
        Mat3::new([[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.frobenius_norm().max(1.0);
        for i in 0..self.dim {
            for j in 0..i {
                if (self.entry(i, j) - self.entry(j, i)).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Operator assembly
// ---------------------------------------------------------------------------

struct Operator {
    stencil: usize,
    neighbors: Vec<u32>,
    coefficients: Vec<f64>,
    diagonal: Vec<f64>,
    symmetric: bool,
}

fn wrap(i: usize, d: isize, n: usize) -> usize {
    (((i as isize + d) % n as isize + n as isize) % n as isize) as usize
}

/// 4x4 element stiffness for a constant 2x2 tensor on an hx-by-hy rectangle.
/// Corner `c` sits at the reference offsets `(c & 1, c >> 1)`.
fn element_matrix_2d(a: &Mat2, hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let mut ke = [[0.0; 4]; 4];
    let w = 0.25 * hx * hy;
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let mut grads = [[0.0; 2]; 4];
            for (c, g) in grads.iter_mut().enumerate() {
                let (dx, dy) = (c & 1, (c >> 1) & 1);
                let sx = if dx == 1 { 1.0 } else { -1.0 };
                let sy = if dy == 1 { 1.0 } else { -1.0 };
                let nx = if dx == 1 { xi } else { 1.0 - xi };
                let ny = if dy == 1 { eta } else { 1.0 - eta };
                g[0] = sx * ny / hx;
                g[1] = nx * sy / hy;
            }
            for row in 0..4 {
                for col in 0..4 {
                    let flux = a.mul_vec(grads[col]);
                    ke[row][col] += w * (flux[0] * grads[row][0] + flux[1] * grads[row][1]);
                }
            }
        }
    }
    ke
}

/// 8x8 element stiffness for a constant 3x3 tensor on a box element.
/// Corner `c` sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn element_matrix_3d(a: &Mat3, h: [f64; 3]) -> [[f64; 8]; 8] {
    let mut ke = [[0.0; 8]; 8];
    let w = h[0] * h[1] * h[2] / 8.0;
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            for &zeta in &GAUSS {
                let mut grads = [[0.0; 3]; 8];
                for (c, g) in grads.iter_mut().enumerate() {
                    let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                    let refc = [xi, eta, zeta];
                    let mut shape = [0.0; 3];
                    let mut sign = [0.0; 3];
                    for ax in 0..3 {
                        shape[ax] = if d[ax] == 1 { refc[ax] } else { 1.0 - refc[ax] };
                        sign[ax] = if d[ax] == 1 { 1.0 } else { -1.0 };
                    }
                    g[0] = sign[0] * shape[1] * shape[2] / h[0];
                    g[1] = shape[0] * sign[1] * shape[2] / h[1];
                    g[2] = shape[0] * shape[1] * sign[2] / h[2];
                }
                for row in 0..8 {
                    for col in 0..8 {
                        let flux = a.mul_vec(grads[col]);
                        ke[row][col] += w
                            * (flux[0] * grads[row][0]
                                + flux[1] * grads[row][1]
                                + flux[2] * grads[row][2]);
                    }
                }
            }
        }
    }
    ke
}

impl Operator {
    fn build(field: &ConductivityField) -> Self {
        match field.tensors() {
            FieldTensors::Plane(tensors) => Self::build_2d(field.geometry(), tensors),
            FieldTensors::Space(tensors) => Self::build_3d(field.geometry(), tensors),
        }
    }

    fn build_2d(g: &CellGeometry, tensors: &[Mat2]) -> Self {
        let [nx, ny, _] = g.counts();
        let [hx, hy, _] = g.spacing();
        let n_nodes = nx * ny;
        let stencil = 9;

        // Two-phase fields collapse to a tiny palette of element matrices.
        let mut palette: HashMap<[u64; 4], usize> = HashMap::new();
        let mut kmats: Vec<[[f64; 4]; 4]> = Vec::new();
        let mut pal_of: Vec<u32> = Vec::with_capacity(tensors.len());
        let scale = tensors.iter().map(|t| t.norm()).fold(0.0f64, f64::max);
        let mut symmetric = true;
        for t in tensors {
            if t.antisymmetric_part().norm() > 1e-12 * scale.max(1.0) {
                symmetric = false;
            }
            let key = [
                t.e[0][0].to_bits(),
                t.e[0][1].to_bits(),
                t.e[1][0].to_bits(),
                t.e[1][1].to_bits(),
            ];
            let idx = *palette.entry(key).or_insert_with(|| {
                kmats.push(element_matrix_2d(t, hx, hy));
                kmats.len() - 1
            });
            pal_of.push(idx as u32);
        }

        let mut neighbors = vec![0u32; n_nodes * stencil];
        for j in 0..ny {
            for i in 0..nx {
                let row = j * nx + i;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let slot = ((dy + 1) * 3 + dx + 1) as usize;
                        let ii = wrap(i, dx, nx);
                        let jj = wrap(j, dy, ny);
                        neighbors[row * stencil + slot] = (jj * nx + ii) as u32;
                    }
                }
            }
        }

        let mut coefficients = vec![0.0f64; n_nodes * stencil];
        for ey in 0..ny {
            for ex in 0..nx {
                let ke = &kmats[pal_of[ey * nx + ex] as usize];
                let mut node = [0usize; 4];
                for (c, nd) in node.iter_mut().enumerate() {
                    let (dx, dy) = (c & 1, (c >> 1) & 1);
                    *nd = ((ey + dy) % ny) * nx + (ex + dx) % nx;
                }
                for a in 0..4 {
                    let (axa, aya) = ((a & 1) as isize, ((a >> 1) & 1) as isize);
                    for b in 0..4 {
                        let (axb, ayb) = ((b & 1) as isize, ((b >> 1) & 1) as isize);
                        let slot = ((ayb - aya + 1) * 3 + (axb - axa + 1)) as usize;
                        coefficients[node[a] * stencil + slot] += ke[a][b];
                    }
                }
            }
        }

        let diagonal = (0..n_nodes)
            .map(|r| coefficients[r * stencil + 4])
            .collect();
        Self {
            stencil,
            neighbors,
            coefficients,
            diagonal,
            symmetric,
        }
    }

    fn build_3d(g: &CellGeometry, tensors: &[Mat3]) -> Self {
        let [nx, ny, nz] = g.counts();
        let h = g.spacing();
        let n_nodes = nx * ny * nz;
        let stencil = 27;

        let mut palette: HashMap<[u64; 9], usize> = HashMap::new();
        let mut kmats: Vec<[[f64; 8]; 8]> = Vec::new();
        let mut pal_of: Vec<u32> = Vec::with_capacity(tensors.len());
        let scale = tensors.iter().map(|t| t.norm()).fold(0.0f64, f64::max);
        let mut symmetric = true;
        for t in tensors {
            if t.antisymmetric_part().norm() > 1e-12 * scale.max(1.0) {
                symmetric = false;
            }
            let mut key = [0u64; 9];
            for i in 0..3 {
                for j in 0..3 {
                    key[i * 3 + j] = t.e[i][j].to_bits();
                }
            }
            let idx = *palette.entry(key).or_insert_with(|| {
                kmats.push(element_matrix_3d(t, h));
                kmats.len() - 1
            });
            pal_of.push(idx as u32);
        }

        let mut neighbors = vec![0u32; n_nodes * stencil];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let row = (k * ny + j) * nx + i;
                    for dz in -1isize..=1 {
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                let slot = (((dz + 1) * 3 + dy + 1) * 3 + dx + 1) as usize;
                                let ii = wrap(i, dx, nx);
                                let jj = wrap(j, dy, ny);
                                let kk = wrap(k, dz, nz);
                                neighbors[row * stencil + slot] = ((kk * ny + jj) * nx + ii) as u32;
                            }
                        }
                    }
                }
            }
        }

        let mut coefficients = vec![0.0f64; n_nodes * stencil];
        for ez in 0..nz {
            for ey in 0..ny {
                for ex in 0..nx {
                    let e = (ez * ny + ey) * nx + ex;
                    let ke = &kmats[pal_of[e] as usize];
                    let mut node = [0usize; 8];
                    for (c, nd) in node.iter_mut().enumerate() {
                        let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                        *nd = (((ez + d[2]) % nz) * ny + (ey + d[1]) % ny) * nx + (ex + d[0]) % nx;
                    }
                    for a in 0..8 {
                        let da = [
                            (a & 1) as isize,
                            ((a >> 1) & 1) as isize,
                            ((a >> 2) & 1) as isize,
                        ];
                        for b in 0..8 {
                            let db = [
                                (b & 1) as isize,
                                ((b >> 1) & 1) as isize,
                                ((b >> 2) & 1) as isize,
                            ];
                            let slot = (((db[2] - da[2] + 1) * 3 + db[1] - da[1] + 1) * 3 + db[0]
                                - da[0]
                                + 1) as usize;
                            coefficients[node[a] * stencil + slot] += ke[a][b];
                        }
                    }
                }
            }
        }

        let diagonal = (0..n_nodes)
            .map(|r| coefficients[r * stencil + 13])
            .collect();
        Self {
            stencil,
            neighbors,
            coefficients,
            diagonal,
            symmetric,
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let st = self.stencil;
        let coef = &self.coefficients;
        let neigh = &self.neighbors;
        y.par_chunks_mut(REDUCE_CHUNK)
            .enumerate()
            .for_each(|(chunk, out)| {
                let base = chunk * REDUCE_CHUNK;
                for (t, val) in out.iter_mut().enumerate() {
                    let row = base + t;
                    let off = row * st;
                    let mut acc = 0.0;
                    for s in 0..st {
                        acc += coef[off + s] * x[neigh[off + s] as usize];
                    }
                    *val = acc;
                }
            });
    }
}

// ---------------------------------------------------------------------------
// Deterministic parallel kernels
// ---------------------------------------------------------------------------

fn par_dot(a: &[f64], b: &[f64]) -> f64 {
    let partials: Vec<f64> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(xa, xb)| xa.iter().zip(xb).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    partials.iter().sum()
}

fn par_norm(a: &[f64]) -> f64 {
    par_dot(a, a).sqrt()
}

fn project_mean(v: &mut [f64]) {
    let n = v.len() as f64;
    let partials: Vec<f64> = v
        .par_chunks(REDUCE_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    let mean = partials.iter().sum::<f64>() / n;
    v.par_iter_mut().for_each(|x| *x -= mean);
}

// ---------------------------------------------------------------------------
// Krylov solvers
// ---------------------------------------------------------------------------

struct SolveOutcome {
    x: Vec<f64>,
    iterations: usize,
    residual: f64,
}

fn apply_preconditioner(cfg: &SolverConfig, op: &Operator, r: &[f64], z: &mut Vec<f64>) {
    match cfg.preconditioner {
        Preconditioner::None => {
            z.clear();
            z.extend_from_slice(r);
        }
        Preconditioner::Diagonal => {
            z.clear();
            z.extend(r.iter().zip(&op.diagonal).map(|(ri, di)| ri / di));
        }
    }
    project_mean(z);
}

fn true_residual(op: &Operator, x: &[f64], b: &[f64], bnorm: f64) -> f64 {
    let mut ax = vec![0.0; b.len()];
    op.apply(x, &mut ax);
    ax.par_iter_mut()
        .zip(b.par_iter())
        .for_each(|(a, bi)| *a = bi - *a);
    par_norm(&ax) / bnorm
}

/// Preconditioned conjugate gradients with the constant mode projected out;
/// used when the assembled operator is symmetric.
fn conjugate_gradient(
    op: &Operator,
    b: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    let n = b.len();
    let bnorm = par_norm(b);
    if bnorm == 0.0 {
        return Ok(SolveOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut x = vec![0.0; n];
    let mut iterations = 0usize;
    let mut best = f64::INFINITY;

    'outer: loop {
        let mut r = b.to_vec();
        if iterations > 0 {
            let mut ax = vec![0.0; n];
            op.apply(&x, &mut ax);
            r.par_iter_mut()
                .zip(ax.par_iter())
                .for_each(|(ri, a)| *ri -= a);
        }
        project_mean(&mut r);
        let mut z = Vec::with_capacity(n);
        apply_preconditioner(cfg, op, &r, &mut z);
        let mut p = z.clone();
        let mut rz = par_dot(&r, &z);
        let mut ap = vec![0.0; n];

        loop {
            if iterations >= cfg.max_iterations {
                return Err(SolverError::NonConvergence {
                    iterations,
                    residual: best,
                });
            }
            iterations += 1;
            op.apply(&p, &mut ap);
            let pap = par_dot(&p, &ap);
            if !(pap > 0.0) || !pap.is_finite() {
                continue 'outer;
            }
            let alpha = rz / pap;
            x.par_iter_mut()
                .zip(p.par_iter())
                .for_each(|(xi, pi)| *xi += alpha * pi);
            r.par_iter_mut()
                .zip(ap.par_iter())
                .for_each(|(ri, a)| *ri -= alpha * a);
            let rel = par_norm(&r) / bnorm;
            best = best.min(rel);
            if rel <= cfg.rel_tol {
                project_mean(&mut x);
                let true_rel = true_residual(op, &x, b, bnorm);
                if true_rel <= cfg.rel_tol {
                    return Ok(SolveOutcome {
                        x,
                        iterations,
                        residual: true_rel,
                    });
                }
                continue 'outer;
            }
            apply_preconditioner(cfg, op, &r, &mut z);
            let rz_new = par_dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.par_iter_mut()
                .zip(z.par_iter())
                .for_each(|(pi, zi)| *pi = zi + beta * *pi);
        }
    }
}

/// Restarted stabilized bi-conjugate gradients for the non-symmetric case.
/// Every `restart` inner steps (or on a rho/omega breakdown) the residual is
/// recomputed from scratch and the shadow residual re-seeded.
fn bicgstab(op: &Operator, b: &[f64], cfg: &SolverConfig) -> Result<SolveOutcome, SolverError> {
    let n = b.len();
    let bnorm = par_norm(b);
    if bnorm == 0.0 {
        return Ok(SolveOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut x = vec![0.0; n];
    let mut iterations = 0usize;
    let mut best = f64::INFINITY;

    'outer: loop {
        let mut r = b.to_vec();
        if iterations > 0 {
            let mut ax = vec![0.0; n];
            op.apply(&x, &mut ax);
            r.par_iter_mut()
                .zip(ax.par_iter())
                .for_each(|(ri, a)| *ri -= a);
        }
        project_mean(&mut r);
        let r_hat = r.clone();
        let r_hat_norm = par_norm(&r_hat);
        if r_hat_norm / bnorm <= cfg.rel_tol {
            project_mean(&mut x);
            let true_rel = true_residual(op, &x, b, bnorm);
            if true_rel <= cfg.rel_tol {
                return Ok(SolveOutcome {
                    x,
                    iterations,
                    residual: true_rel,
                });
            }
        }
        let mut rho = 1.0f64;
        let mut alpha = 1.0f64;
        let mut omega = 1.0f64;
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut phat = Vec::with_capacity(n);
        let mut shat = Vec::with_capacity(n);
        let mut t = vec![0.0; n];

        for _ in 0..cfg.restart {
            if iterations >= cfg.max_iterations {
                return Err(SolverError::NonConvergence {
                    iterations,
                    residual: best,
                });
            }
            iterations += 1;

            let rho_new = par_dot(&r_hat, &r);
            if rho_new.abs() < 1e-60 * r_hat_norm * par_norm(&r) + f64::MIN_POSITIVE {
                continue 'outer;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            p.par_iter_mut()
                .zip(r.par_iter().zip(v.par_iter()))
                .for_each(|(pi, (ri, vi))| *pi = ri + beta * (*pi - omega * vi));
            apply_preconditioner(cfg, op, &p, &mut phat);
            op.apply(&phat, &mut v);
            let denom = par_dot(&r_hat, &v);
            if denom.abs() < f64::MIN_POSITIVE {
                continue 'outer;
            }
            alpha = rho / denom;

            // s = r - alpha v lives in r from here on.
            r.par_iter_mut()
                .zip(v.par_iter())
                .for_each(|(ri, vi)| *ri -= alpha * vi);
            let snorm = par_norm(&r) / bnorm;
            best = best.min(snorm);
            if snorm <= cfg.rel_tol {
                x.par_iter_mut()
                    .zip(phat.par_iter())
                    .for_each(|(xi, pi)| *xi += alpha * pi);
                project_mean(&mut x);
                let true_rel = true_residual(op, &x, b, bnorm);
                if true_rel <= cfg.rel_tol {
                    return Ok(SolveOutcome {
                        x,
                        iterations,
                        residual: true_rel,
                    });
                }
                continue 'outer;
            }
            apply_preconditioner(cfg, op, &r, &mut shat);
            op.apply(&shat, &mut t);
            let tt = par_dot(&t, &t);
            if tt <= 0.0 {
                x.par_iter_mut()
                    .zip(phat.par_iter())
                    .for_each(|(xi, pi)| *xi += alpha * pi);
                continue 'outer;
            }
            omega = par_dot(&t, &r) / tt;
            x.par_iter_mut()
                .zip(phat.par_iter().zip(shat.par_iter()))
                .for_each(|(xi, (pi, si))| *xi += alpha * pi + omega * si);
            r.par_iter_mut()
                .zip(t.par_iter())
                .for_each(|(ri, ti)| *ri -= omega * ti);
            let rel = par_norm(&r) / bnorm;
            best = best.min(rel);
            if rel <= cfg.rel_tol {
                project_mean(&mut x);
                let true_rel = true_residual(op, &x, b, bnorm);
                if true_rel <= cfg.rel_tol {
                    return Ok(SolveOutcome {
                        x,
                        iterations,
                        residual: true_rel,
                    });
                }
                continue 'outer;
            }
            if omega == 0.0 || !omega.is_finite() {
                continue 'outer;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Right-hand sides and quadrature
// ---------------------------------------------------------------------------

fn rhs(field: &ConductivityField, lambda: &[f64]) -> Vec<f64> {
    let g = field.geometry();
    let [nx, ny, nz] = g.counts();
    let [hx, hy, hz] = g.spacing();
    let mut f = vec![0.0f64; g.num_nodes()];
    match field.tensors() {
        FieldTensors::Plane(tensors) => {
            // Integrated shape gradients: +-hy/2 and +-hx/2 by corner parity.
            for ey in 0..ny {
                for ex in 0..nx {
                    let flux = tensors[ey * nx + ex].mul_vec([lambda[0], lambda[1]]);
                    for c in 0..4 {
                        let (dx, dy) = (c & 1, (c >> 1) & 1);
                        let sx = if dx == 1 { 1.0 } else { -1.0 };
                        let sy = if dy == 1 { 1.0 } else { -1.0 };
                        let node = ((ey + dy) % ny) * nx + (ex + dx) % nx;
                        f[node] += flux[0] * sx * 0.5 * hy + flux[1] * sy * 0.5 * hx;
                    }
                }
            }
        }
        FieldTensors::Space(tensors) => {
            let (ax, ay, az) = (0.25 * hy * hz, 0.25 * hx * hz, 0.25 * hx * hy);
            for ez in 0..nz {
                for ey in 0..ny {
                    for ex in 0..nx {
                        let flux = tensors[(ez * ny + ey) * nx + ex]
                            .mul_vec([lambda[0], lambda[1], lambda[2]]);
                        for c in 0..8 {
                            let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                            let s = |b: usize| if b == 1 { 1.0 } else { -1.0 };
                            let node = (((ez + d[2]) % nz) * ny + (ey + d[1]) % ny) * nx
                                + (ex + d[0]) % nx;
                            f[node] += flux[0] * s(d[0]) * ax
                                + flux[1] * s(d[1]) * ay
                                + flux[2] * s(d[2]) * az;
                        }
                    }
                }
            }
        }
    }
    f
}

/// Per-element mean gradient of the fluctuation, `dim` components.
fn mean_gradients(g: &CellGeometry, x: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = g.counts();
    let [hx, hy, hz] = g.spacing();
    let dim = g.dim();
    let mut out = vec![0.0; g.num_elements() * dim];
    if dim == 2 {
        for ey in 0..ny {
            for ex in 0..nx {
                let x00 = x[ey * nx + ex];
                let x10 = x[ey * nx + (ex + 1) % nx];
                let x01 = x[((ey + 1) % ny) * nx + ex];
                let x11 = x[((ey + 1) % ny) * nx + (ex + 1) % nx];
                let e = ey * nx + ex;
                out[e * 2] = ((x10 + x11) - (x00 + x01)) / (2.0 * hx);
                out[e * 2 + 1] = ((x01 + x11) - (x00 + x10)) / (2.0 * hy);
            }
        }
    } else {
        for ez in 0..nz {
            for ey in 0..ny {
                for ex in 0..nx {
                    let mut corner = [0.0f64; 8];
                    for (c, value) in corner.iter_mut().enumerate() {
                        let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                        *value =
                            x[(((ez + d[2]) % nz) * ny + (ey + d[1]) % ny) * nx + (ex + d[0]) % nx];
                    }
                    let e = (ez * ny + ey) * nx + ex;
                    let sum = |pred: &dyn Fn(usize) -> bool| -> f64 {
                        (0..8).filter(|&c| pred(c)).map(|c| corner[c]).sum()
                    };
                    out[e * 3] = (sum(&|c| c & 1 == 1) - sum(&|c| c & 1 == 0)) / (4.0 * hx);
                    out[e * 3 + 1] =
                        (sum(&|c| (c >> 1) & 1 == 1) - sum(&|c| (c >> 1) & 1 == 0)) / (4.0 * hy);
                    out[e * 3 + 2] =
                        (sum(&|c| (c >> 2) & 1 == 1) - sum(&|c| (c >> 2) & 1 == 0)) / (4.0 * hz);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Solves the periodic corrector problem for loading direction `lambda`
/// (normalized internally).
pub fn solve_corrector(
    field: &ConductivityField,
    lambda: &[f64],
    config: &SolverConfig,
) -> Result<CorrectorField, SolverError> {
    config.validate()?;
    let op = Operator::build(field);
    solve_corrector_with(field, &op, lambda, config)
}

fn solve_corrector_with(
    field: &ConductivityField,
    op: &Operator,
    lambda: &[f64],
    config: &SolverConfig,
) -> Result<CorrectorField, SolverError> {
    let g = field.geometry();
    let dim = g.dim();
    if lambda.len() != dim {
        return Err(SolverError::DimensionMismatch(format!(
            "loading direction has {} components in a {dim}D cell",
            lambda.len()
        )));
    }
    let norm = lambda.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(SolverError::InvalidConfig(
            "loading direction must be nonzero".to_string(),
        ));
    }
    let unit: Vec<f64> = lambda.iter().map(|x| x / norm).collect();

    let mut b = rhs(field, &unit);
    project_mean(&mut b);
    // Constant-flux loadings assemble to pure rounding noise; solving that
    // noise system would chase a meaningless relative tolerance.
    let coef_scale = op.diagonal.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let zero_floor = 1e-13 * coef_scale * (b.len() as f64).sqrt();
    let outcome = if par_norm(&b) <= zero_floor {
        SolveOutcome {
            x: vec![0.0; b.len()],
            iterations: 0,
            residual: 0.0,
        }
    } else if op.symmetric {
        conjugate_gradient(op, &b, config)?
    } else {
        bicgstab(op, &b, config)?
    };

    let mut fluctuation = outcome.x;
    project_mean(&mut fluctuation);
    let grad_x = mean_gradients(g, &fluctuation);
    let mut gradient = grad_x;
    for e in 0..g.num_elements() {
        for d in 0..dim {
            gradient[e * dim + d] = unit[d] - gradient[e * dim + d];
        }
    }
    let mut lam3 = [0.0; 3];
    lam3[..dim].copy_from_slice(&unit);
    Ok(CorrectorField {
        geometry: *g,
        lambda: lam3,
        fluctuation,
        gradient,
        residual: outcome.residual,
        iterations: outcome.iterations,
    })
}

/// Assembles the homogenized matrix from one corrector per basis direction:
/// entry `(i, j)` is the cell average of `(A grad W^j) . grad W^i`.
pub fn effective_tensor(
    field: &ConductivityField,
    config: &SolverConfig,
) -> Result<EffectiveTensor, SolverError> {
    effective_tensor_with_correctors(field, config).map(|(t, _)| t)
}

pub fn effective_tensor_with_correctors(
    field: &ConductivityField,
    config: &SolverConfig,
) -> Result<(EffectiveTensor, Vec<CorrectorField>), SolverError> {
    config.validate()?;
    let g = field.geometry();
    let dim = g.dim();
    let op = Operator::build(field);

    // The per-direction solves are independent.
    let correctors: Vec<CorrectorField> = (0..dim)
        .into_par_iter()
        .map(|d| {
            let mut lambda = vec![0.0; dim];
            lambda[d] = 1.0;
            solve_corrector_with(field, &op, &lambda, config)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let entries = integrate_bilinear(field, &correctors);
    let diagnostics = Diagnostics {
        grid: g.counts(),
        resolution: g.resolution(),
        residuals: correctors.iter().map(|c| c.residual()).collect(),
        iterations: correctors.iter().map(|c| c.iterations()).collect(),
        coercivity: field.alpha_min(),
        contrast: field.contrast(),
    };
    Ok((
        EffectiveTensor {
            dim,
            entries,
            diagnostics,
        },
        correctors,
    ))
}

/// Exact Gauss quadrature of the energy products `(A grad W^j) . grad W^i`
/// over the cell, normalized by the cell measure.
fn integrate_bilinear(field: &ConductivityField, correctors: &[CorrectorField]) -> Vec<f64> {
    let g = field.geometry();
    let [nx, ny, nz] = g.counts();
    let [hx, hy, hz] = g.spacing();
    let measure = g.measure();

    match field.tensors() {
        FieldTensors::Plane(tensors) => {
            let w = 0.25 * hx * hy;
            let xs: Vec<&[f64]> = correctors.iter().map(|c| c.fluctuation()).collect();
            let partials: Vec<[f64; 4]> = (0..ny * nx)
                .into_par_iter()
                .chunks(REDUCE_CHUNK)
                .map(|chunk| {
                    let mut acc = [0.0f64; 4];
                    for e in chunk {
                        let (ey, ex) = (e / nx, e % nx);
                        let a = &tensors[e];
                        let mut corner = [[0.0f64; 2]; 4];
                        for (c, value) in corner.iter_mut().enumerate() {
                            let (dx, dy) = (c & 1, (c >> 1) & 1);
                            let node = ((ey + dy) % ny) * nx + (ex + dx) % nx;
                            value[0] = xs[0][node];
                            value[1] = xs[1][node];
                        }
                        for &xi in &GAUSS {
                            for &eta in &GAUSS {
                                // grad W^d = e_d - grad X^d at this point
                                let mut gw = [[0.0f64; 2]; 2];
                                for c in 0..4 {
                                    let (dx, dy) = (c & 1, (c >> 1) & 1);
                                    let sx = if dx == 1 { 1.0 } else { -1.0 };
                                    let sy = if dy == 1 { 1.0 } else { -1.0 };
                                    let nxv = if dx == 1 { xi } else { 1.0 - xi };
                                    let nyv = if dy == 1 { eta } else { 1.0 - eta };
                                    let gx = sx * nyv / hx;
                                    let gy = nxv * sy / hy;
                                    for d in 0..2 {
                                        gw[d][0] -= corner[c][d] * gx;
                                        gw[d][1] -= corner[c][d] * gy;
                                    }
                                }
                                gw[0][0] += 1.0;
                                gw[1][1] += 1.0;
                                for j in 0..2 {
                                    let flux = a.mul_vec(gw[j]);
                                    for i in 0..2 {
                                        acc[i * 2 + j] +=
                                            w * (flux[0] * gw[i][0] + flux[1] * gw[i][1]);
                                    }
                                }
                            }
                        }
                    }
                    acc
                })
                .collect();
            let mut total = [0.0f64; 4];
            for p in partials {
                for (ti, pi) in total.iter_mut().zip(p.iter()) {
                    *ti += pi;
                }
            }
            total.iter().map(|x| x / measure).collect()
        }
        FieldTensors::Space(tensors) => {
            let w = hx * hy * hz / 8.0;
            let xs: Vec<&[f64]> = correctors.iter().map(|c| c.fluctuation()).collect();
            let partials: Vec<[f64; 9]> = (0..nz * ny * nx)
                .into_par_iter()
                .chunks(REDUCE_CHUNK)
                .map(|chunk| {
                    let mut acc = [0.0f64; 9];
                    for e in chunk {
                        let ez = e / (ny * nx);
                        let ey = (e / nx) % ny;
                        let ex = e % nx;
                        let a = &tensors[e];
                        let mut corner = [[0.0f64; 3]; 8];
                        for (c, value) in corner.iter_mut().enumerate() {
                            let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                            let node = (((ez + d[2]) % nz) * ny + (ey + d[1]) % ny) * nx
                                + (ex + d[0]) % nx;
                            for dir in 0..3 {
                                value[dir] = xs[dir][node];
                            }
                        }
                        for &xi in &GAUSS {
                            for &eta in &GAUSS {
                                for &zeta in &GAUSS {
                                    let mut gw = [[0.0f64; 3]; 3];
                                    for c in 0..8 {
                                        let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                                        let refc = [xi, eta, zeta];
                                        let mut shape = [0.0; 3];
                                        let mut sign = [0.0; 3];
                                        for ax in 0..3 {
                                            shape[ax] =
                                                if d[ax] == 1 { refc[ax] } else { 1.0 - refc[ax] };
                                            sign[ax] = if d[ax] == 1 { 1.0 } else { -1.0 };
                                        }
                                        let gvec = [
                                            sign[0] * shape[1] * shape[2] / hx,
                                            shape[0] * sign[1] * shape[2] / hy,
                                            shape[0] * shape[1] * sign[2] / hz,
                                        ];
                                        for dir in 0..3 {
                                            for ax in 0..3 {
                                                gw[dir][ax] -= corner[c][dir] * gvec[ax];
                                            }
                                        }
                                    }
                                    for (dir, row) in gw.iter_mut().enumerate() {
                                        row[dir] += 1.0;
                                    }
                                    for j in 0..3 {
                                        let flux = a.mul_vec(gw[j]);
                                        for i in 0..3 {
                                            acc[i * 3 + j] += w
                                                * (flux[0] * gw[i][0]
                                                    + flux[1] * gw[i][1]
                                                    + flux[2] * gw[i][2]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc
                })
                .collect();
            let mut total = [0.0f64; 9];
            for p in partials {
                for (ti, pi) in total.iter_mut().zip(p.iter()) {
                    *ti += pi;
                }
            }
            total.iter().map(|x| x / measure).collect()
        }
    }
}

/// Average of the full corrector gradient over the flagged set of the mask:
/// `(1/|w|) sum_e grad W_e vol_e`.
pub fn fiber_average_gradient(
    corrector: &CorrectorField,
    mask: &PhaseMask,
) -> Result<Vec<f64>, SolverError> {
    let g = corrector.geometry();
    if mask.geometry() != g {
        return Err(SolverError::DimensionMismatch(
            "corrector and mask live on different grids".to_string(),
        ));
    }
    let dim = g.dim();
    let count = mask.count_true();
    if count == 0 {
        return Err(SolverError::EmptyMask);
    }
    let mut mean = vec![0.0; dim];
    for (e, &flag) in mask.flags().iter().enumerate() {
        if flag {
            for d in 0..dim {
                mean[d] += corrector.gradient()[e * dim + d];
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::voigt_reuss_bounds;
    use crate::microstructure::{
        assemble_conductivity, build_checkerboard, build_fiber_cell_3d, build_laminate,
        CellGeometry, ConductivityField,
    };
    use crate::tensor::{perturbed_tensor_2d, HallVector, PerturbedPhase};

    fn phase(a: f64, b: f64) -> PerturbedPhase {
        PerturbedPhase::new(a, b).unwrap()
    }

    fn cfg() -> SolverConfig {
        SolverConfig {
            rel_tol: 1e-11,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn constant_field_is_reproduced_exactly_2d() {
        let g = CellGeometry::square(8).unwrap();
        let a = Mat2::new([[2.0, -1.3], [1.3, 2.0]]);
        let f = ConductivityField::constant_2d(g, a).unwrap();
        let t = effective_tensor(&f, &cfg()).unwrap();
        assert!(t.mat2().sub(&a).max_abs() < 1e-12);
        assert_eq!(t.diagnostics().iterations, vec![0, 0]);
        // A constant antisymmetric part passes through unchanged.
        assert!(
            t.mat2()
                .antisymmetric_part()
                .sub(&Mat2::j().scale(1.3))
                .norm()
                < 1e-12
        );
    }

    // Cell measure != 1 exercises the averaging normalization.
    #[test]
    fn constant_field_on_a_rectangular_cell() {
        let g = CellGeometry::rect(2.0, 8).unwrap();
        let a = Mat2::new([[1.5, -0.4], [0.4, 2.5]]);
        let f = ConductivityField::constant_2d(g, a).unwrap();
        let t = effective_tensor(&f, &cfg()).unwrap();
        assert!(t.mat2().sub(&a).max_abs() < 1e-12);
        assert_eq!(t.diagnostics().grid, [16, 8, 1]);
    }

    #[test]
    fn constant_field_is_reproduced_exactly_3d() {
        let g = CellGeometry::cube(4).unwrap();
        let a = Mat3::new([[2.0, -0.5, 0.1], [0.5, 2.0, -0.2], [-0.1, 0.2, 3.0]]);
        let f = ConductivityField::constant_3d(g, a).unwrap();
        let t = effective_tensor(&f, &cfg()).unwrap();
        assert!(t.mat3().sub(&a).max_abs() < 1e-12);
    }

    #[test]
    fn laminate_matches_the_one_dimensional_solution() {
        // Harmonic mean across the layers, arithmetic mean along them.
        let mask = build_laminate(0, 0.5, 32).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 0.0),
            &phase(4.0, 0.0),
            &HallVector::Plane(0.0),
        )
        .unwrap();
        let (t, correctors) = effective_tensor_with_correctors(&field, &cfg()).unwrap();
        let m = t.mat2();
        assert!((m.e[0][0] - 1.6).abs() < 1e-8, "{m:?}");
        assert!((m.e[1][1] - 2.5).abs() < 1e-8);
        assert!(m.e[0][1].abs() < 1e-9 && m.e[1][0].abs() < 1e-9);

        // Flux continuity: grad W . e1 = sigma* / alpha per layer.
        let g = field.geometry();
        let wx = &correctors[0];
        let e_phase2 = g.element_index(2, 7, 0);
        let e_phase1 = g.element_index(20, 7, 0);
        assert!((wx.gradient()[e_phase2 * 2] - 1.6 / 4.0).abs() < 1e-7);
        assert!((wx.gradient()[e_phase1 * 2] - 1.6 / 1.0).abs() < 1e-7);

        // Tangential loading needs no fluctuation at all.
        let wy = &correctors[1];
        assert!(wy.fluctuation().iter().all(|x| x.abs() < 1e-12));
        assert!(wy.mean_fluctuation().abs() < 1e-12);
        assert!(wx.mean_fluctuation().abs() < 1e-12);
        assert!(wx.residual() <= 1e-11);
    }

    #[test]
    fn fiber_axial_loading_is_exact() {
        let mask = build_fiber_cell_3d(0.3, 8).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 1.0),
            &phase(5.0, 1.0),
            &HallVector::Space([0.0, 0.0, 1.0]),
        )
        .unwrap();
        let w = solve_corrector(&field, &[0.0, 0.0, 1.0], &cfg()).unwrap();
        assert_eq!(
            w.iterations(),
            0,
            "axial loading has an exact constant flux"
        );
        let xi = fiber_average_gradient(&w, &mask).unwrap();
        assert!((xi[0]).abs() < 1e-13 && (xi[1]).abs() < 1e-13);
        assert!((xi[2] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn average_gradient_requires_matching_nonempty_mask() {
        let mask = build_fiber_cell_3d(0.3, 8).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 0.0),
            &phase(5.0, 0.0),
            &HallVector::Space([0.0, 0.0, 0.5]),
        )
        .unwrap();
        let w = solve_corrector(&field, &[0.0, 0.0, 1.0], &cfg()).unwrap();

        let g = *mask.geometry();
        let empty =
            crate::microstructure::PhaseMask::new(g, vec![false; g.num_elements()]).unwrap();
        assert!(matches!(
            fiber_average_gradient(&w, &empty),
            Err(SolverError::EmptyMask)
        ));

        let other = build_fiber_cell_3d(0.3, 12).unwrap();
        assert!(matches!(
            fiber_average_gradient(&w, &other),
            Err(SolverError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn transposed_field_gives_transposed_tensor() {
        let mask = build_checkerboard(16).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 0.5),
            &phase(4.0, 1.0),
            &HallVector::Plane(1.0),
        )
        .unwrap();
        let t = effective_tensor(&field, &cfg()).unwrap().mat2();
        let tt = effective_tensor(&field.transpose(), &cfg()).unwrap().mat2();
        assert!(
            tt.sub(&t.transpose()).norm() <= 1e-8 * t.norm(),
            "{tt:?} vs {t:?}"
        );
    }

    #[test]
    fn checkerboard_is_symmetric_and_bracketed_at_zero_field() {
        let mask = build_checkerboard(32).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 0.0),
            &phase(4.0, 0.0),
            &HallVector::Plane(0.0),
        )
        .unwrap();
        let t = effective_tensor(&field, &cfg()).unwrap();
        let m = t.mat2();
        assert!(t.is_symmetric(1e-9));
        assert!(m.is_positive_definite_symmetric_part(0.0));
        // Interchange symmetry puts the value near the geometric mean even on
        // a coarse grid.
        assert!((m.e[0][0] - 2.0).abs() / 2.0 < 0.10, "{m:?}");

        for axis in [0usize, 1] {
            let (lo, hi) = voigt_reuss_bounds(&mask, 1.0, 4.0, axis).unwrap();
            let v = m.e[axis][axis];
            assert!(v >= lo - 1e-8 && v <= hi + 1e-8, "{v} not in [{lo}, {hi}]");
        }
    }

    #[test]
    fn nonconvergence_reports_best_residual() {
        let mask = build_checkerboard(32).unwrap();
        let field = assemble_conductivity(
            &mask,
            &phase(1.0, 0.0),
            &phase(50.0, 0.0),
            &HallVector::Plane(0.0),
        )
        .unwrap();
        let config = SolverConfig {
            max_iterations: 3,
            ..SolverConfig::default()
        };
        match effective_tensor(&field, &config) {
            Err(SolverError::NonConvergence {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 3);
                assert!(residual.is_finite() && residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = SolverConfig {
            rel_tol: 0.5,
            ..SolverConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SolverError::InvalidConfig(_))));
        let bad = SolverConfig {
            restart: 1,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());

        let g = CellGeometry::square(8).unwrap();
        let f = ConductivityField::constant_2d(g, Mat2::identity()).unwrap();
        let bad = SolverConfig {
            rel_tol: 0.5,
            ..SolverConfig::default()
        };
        assert!(solve_corrector(&f, &[1.0, 0.0], &bad).is_err());
        // Zero loading direction is rejected.
        assert!(solve_corrector(&f, &[0.0, 0.0], &cfg()).is_err());
    }

    #[test]
    fn nonsymmetric_laminate_keeps_hall_part() {
        // A single-phase field with h != 0 still homogenizes to itself.
        let g = CellGeometry::square(8).unwrap();
        let a = perturbed_tensor_2d(&phase(2.0, 1.0), 1.5);
        let f = ConductivityField::constant_2d(g, a).unwrap();
        let t = effective_tensor(&f, &cfg()).unwrap().mat2();
        assert!(t.sub(&a).max_abs() < 1e-12);
    }
}
