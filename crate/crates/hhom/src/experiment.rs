//! Convergence sweeps, duality/transform harnesses and report generation.
//!
//! Sweep terms are embarrassingly parallel: each term owns its mask, field
//! and solver state, and records are merged by index, so reports are
//! deterministic for a given plan and configuration. Solver failures
//! annotate the affected record instead of aborting the sweep.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::closed_form::{
    cross_formula, fiber_formula_3d, fiber_xi_coefficients, BetaScaling, LimitPhases, SweepPlan,
};
use crate::error::{Error, TensorError};
use crate::microstructure::{
    assemble_conductivity, build_cross_cell, build_fiber_cell_3d, PhaseMask,
};
use crate::solver::{
    effective_tensor, effective_tensor_with_correctors, fiber_average_gradient, EffectiveTensor,
    SolverConfig,
};
use crate::tensor::{
    dual_push_forward, dykhne_coefficients, dykhne_transform_tensor, keller_dual, HallVector, Mat2,
    PerturbedPhase,
};

/// Entrywise relative errors with a scale guard for vanishing targets.
pub fn entrywise_rel_error(computed: &[f64], predicted: &[f64]) -> Vec<f64> {
    let scale = predicted
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-30);
    computed
        .iter()
        .zip(predicted)
        .map(|(c, p)| (c - p).abs() / p.abs().max(1e-12 * scale))
        .collect()
}

/// One sweep term: measured and predicted tensors side by side.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    /// 1-based sequence index.
    pub n: usize,
    pub theta: f64,
    pub feature: f64,
    pub resolution: u32,
    /// Row-major computed tensor; absent when the solve failed.
    pub computed: Option<Vec<f64>>,
    pub predicted: Vec<f64>,
    pub rel_error: Option<Vec<f64>>,
    /// Iterations summed over loading directions.
    pub iterations: usize,
    /// Worst per-direction relative residual.
    pub residual: f64,
    pub wall_time_s: f64,
    /// Set when the mask is single-phase, where the vanishing-fraction
    /// comparison is meaningless.
    pub pre_asymptotic: bool,
    pub solver_error: Option<String>,
    /// In-fiber gradient ratios `(xi1/xi3, xi2/xi3)` for axial loading.
    pub xi_measured: Option<[f64; 2]>,
    pub xi_predicted: Option<[f64; 2]>,
    /// Period-metadata validity flag `eps^2 |ln r|`; reporting only.
    pub epsilon_flag: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub dim: usize,
    pub records: Vec<SweepRecord>,
    pub warnings: Vec<String>,
}

fn entry_label(dim: usize, i: usize, j: usize) -> String {
    debug_assert!(i < dim && j < dim);
    format!("{}{}", i + 1, j + 1)
}

impl SweepResult {
    /// CSV with one row per tensor entry per sweep term. The wall-time
    /// column is omitted when `include_timing` is false so repeated runs are
    /// byte-identical.
    pub fn to_csv(&self, include_timing: bool) -> String {
        let mut out = String::new();
        out.push_str(
            "n,theta,feature_size,resolution,entry,computed,predicted,rel_error,iters,residual",
        );
        if include_timing {
            out.push_str(",wall_time_s");
        }
        out.push('\n');
        for rec in &self.records {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let k = i * self.dim + j;
                    let computed = rec
                        .computed
                        .as_ref()
                        .map(|c| c[k].to_string())
                        .unwrap_or_default();
                    let rel = rec
                        .rel_error
                        .as_ref()
                        .map(|r| r[k].to_string())
                        .unwrap_or_default();
                    let _ = write!(
                        out,
                        "{},{},{},{},{},{},{},{},{},{}",
                        rec.n,
                        rec.theta,
                        rec.feature,
                        rec.resolution,
                        entry_label(self.dim, i, j),
                        computed,
                        rec.predicted[k],
                        rel,
                        rec.iterations,
                        rec.residual,
                    );
                    if include_timing {
                        let _ = write!(out, ",{}", rec.wall_time_s);
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn to_json(&self, include_timing: bool) -> String {
        #[derive(Serialize)]
        struct EntryJson {
            entry: String,
            computed: Option<f64>,
            predicted: f64,
            rel_error: Option<f64>,
        }
        #[derive(Serialize)]
        struct RecordJson {
            n: usize,
            theta: f64,
            feature_size: f64,
            resolution: u32,
            pre_asymptotic: bool,
            #[serde(skip_serializing_if = "Option::is_none")]
            solver_error: Option<String>,
            iters: usize,
            residual: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            wall_time_s: Option<f64>,
            entries: Vec<EntryJson>,
            #[serde(skip_serializing_if = "Option::is_none")]
            xi_measured: Option<[f64; 2]>,
            #[serde(skip_serializing_if = "Option::is_none")]
            xi_predicted: Option<[f64; 2]>,
            #[serde(skip_serializing_if = "Option::is_none")]
            epsilon_flag: Option<f64>,
        }
        #[derive(Serialize)]
        struct SweepJson {
            dim: usize,
            warnings: Vec<String>,
            records: Vec<RecordJson>,
        }

        let records = self
            .records
            .iter()
            .map(|rec| RecordJson {
                n: rec.n,
                theta: rec.theta,
                feature_size: rec.feature,
                resolution: rec.resolution,
                pre_asymptotic: rec.pre_asymptotic,
                solver_error: rec.solver_error.clone(),
                iters: rec.iterations,
                residual: rec.residual,
                wall_time_s: include_timing.then_some(rec.wall_time_s),
                entries: (0..self.dim * self.dim)
                    .map(|k| EntryJson {
                        entry: entry_label(self.dim, k / self.dim, k % self.dim),
                        computed: rec.computed.as_ref().map(|c| c[k]),
                        predicted: rec.predicted[k],
                        rel_error: rec.rel_error.as_ref().map(|r| r[k]),
                    })
                    .collect(),
                xi_measured: rec.xi_measured,
                xi_predicted: rec.xi_predicted,
                epsilon_flag: rec.epsilon_flag,
            })
            .collect();
        let doc = SweepJson {
            dim: self.dim,
            warnings: self.warnings.clone(),
            records,
        };
        serde_json::to_string_pretty(&doc).expect("sweep report serializes")
    }

    /// Largest entrywise relative error of a record, ignoring failed terms.
    pub fn max_rel_error(&self, index: usize) -> Option<f64> {
        self.records[index]
            .rel_error
            .as_ref()
            .map(|r| r.iter().fold(0.0f64, |m, x| m.max(*x)))
    }

    pub fn failed_terms(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.solver_error.is_some())
            .count()
    }
}

fn tensor_parts(t: &EffectiveTensor) -> (Vec<f64>, usize, f64) {
    let iters = t.diagnostics().iterations.iter().sum();
    let residual = t
        .diagnostics()
        .residuals
        .iter()
        .fold(0.0f64, |m, x| m.max(*x));
    (t.entries().to_vec(), iters, residual)
}

/// Runs the cross-structure sweep: per term, assemble the scaled two-phase
/// field, homogenize, and compare with the explicit thin-limit tensor.
pub fn run_cross_sweep(
    phases: &LimitPhases,
    ell: f64,
    h: f64,
    plan: &SweepPlan,
    config: &SolverConfig,
) -> SweepResult {
    let predicted = cross_formula(phases, ell, h);
    let predicted: Vec<f64> = predicted.e.iter().flatten().copied().collect();
    let mut warnings = Vec::new();
    if plan.beta_scaling() == BetaScaling::Fixed {
        warnings.push(
            "fixed beta_2 scaling is outside the strong-field regime; comparisons are exploratory"
                .to_string(),
        );
    }

    let records: Vec<SweepRecord> = plan
        .steps()
        .par_iter()
        .enumerate()
        .map(|(i, step)| {
            let start = Instant::now();
            let (a2n, b2n) = plan.scaled_phase2(i);
            let mut rec = SweepRecord {
                n: i + 1,
                theta: step.theta,
                feature: step.feature,
                resolution: step.resolution,
                computed: None,
                predicted: predicted.clone(),
                rel_error: None,
                iterations: 0,
                residual: f64::NAN,
                wall_time_s: 0.0,
                pre_asymptotic: false,
                solver_error: None,
                xi_measured: None,
                xi_predicted: None,
                epsilon_flag: None,
            };
            let outcome = (|| -> Result<(), Error> {
                let mask = build_cross_cell(step.feature, ell, step.resolution)?;
                rec.pre_asymptotic = !(mask.fraction() > 0.0 && mask.fraction() < 1.0);
                let p1 = PerturbedPhase::new(phases.alpha1(), phases.beta1())?;
                let p2 = PerturbedPhase::new(a2n, b2n)?;
                let field = assemble_conductivity(&mask, &p1, &p2, &HallVector::Plane(h))?;
                let tensor = effective_tensor(&field, config)?;
                let (entries, iters, residual) = tensor_parts(&tensor);
                rec.rel_error = Some(entrywise_rel_error(&entries, &rec.predicted));
                rec.computed = Some(entries);
                rec.iterations = iters;
                rec.residual = residual;
                Ok(())
            })();
            if let Err(e) = outcome {
                rec.solver_error = Some(e.to_string());
            }
            rec.wall_time_s = start.elapsed().as_secs_f64();
            rec
        })
        .collect();

    SweepResult {
        dim: 2,
        records,
        warnings,
    }
}

/// Runs the fiber-lattice sweep, including the in-fiber gradient ratios of
/// the axially loaded corrector and the period-metadata validity flags.
pub fn run_fiber_sweep_3d(
    phases: &LimitPhases,
    h: [f64; 3],
    plan: &SweepPlan,
    config: &SolverConfig,
) -> SweepResult {
    let predicted = fiber_formula_3d(phases, h);
    let predicted: Vec<f64> = predicted.e.iter().flatten().copied().collect();
    let (c1, c2) = fiber_xi_coefficients(phases, h);
    let mut warnings = Vec::new();
    if plan.beta_scaling() == BetaScaling::Fixed {
        warnings.push(
            "fixed beta_2 scaling is outside the strong-field regime; comparisons are exploratory"
                .to_string(),
        );
    }

    let records: Vec<SweepRecord> = plan
        .steps()
        .par_iter()
        .enumerate()
        .map(|(i, step)| {
            let start = Instant::now();
            let (a2n, b2n) = plan.scaled_phase2(i);
            let mut rec = SweepRecord {
                n: i + 1,
                theta: step.theta,
                feature: step.feature,
                resolution: step.resolution,
                computed: None,
                predicted: predicted.clone(),
                rel_error: None,
                iterations: 0,
                residual: f64::NAN,
                wall_time_s: 0.0,
                pre_asymptotic: false,
                solver_error: None,
                xi_measured: None,
                xi_predicted: Some([c1, c2]),
                epsilon_flag: step.epsilon.map(|eps| eps * eps * step.feature.ln().abs()),
            };
            let outcome = (|| -> Result<(), Error> {
                let mask = build_fiber_cell_3d(step.feature, step.resolution)?;
                rec.pre_asymptotic = !(mask.fraction() > 0.0 && mask.fraction() < 1.0);
                let p1 = PerturbedPhase::new(phases.alpha1(), phases.beta1())?;
                let p2 = PerturbedPhase::new(a2n, b2n)?;
                let field = assemble_conductivity(&mask, &p1, &p2, &HallVector::Space(h))?;
                let (tensor, correctors) = effective_tensor_with_correctors(&field, config)?;
                let (entries, iters, residual) = tensor_parts(&tensor);
                rec.rel_error = Some(entrywise_rel_error(&entries, &rec.predicted));
                rec.computed = Some(entries);
                rec.iterations = iters;
                rec.residual = residual;
                let xi = fiber_average_gradient(&correctors[2], &mask)?;
                if xi[2].abs() > 1e-12 {
                    rec.xi_measured = Some([xi[0] / xi[2], xi[1] / xi[2]]);
                }
                Ok(())
            })();
            if let Err(e) = outcome {
                rec.solver_error = Some(e.to_string());
            }
            rec.wall_time_s = start.elapsed().as_secs_f64();
            rec
        })
        .collect();

    let flags: Vec<f64> = records.iter().filter_map(|r| r.epsilon_flag).collect();
    if flags.windows(2).any(|w| w[1] >= w[0]) {
        warnings.push("eps^2 |ln r| is not decreasing along the sweep".to_string());
    }

    SweepResult {
        dim: 3,
        records,
        warnings,
    }
}

/// The two planar identity checks evaluated on one two-phase field.
#[derive(Debug, Clone)]
pub struct DykhneCheck {
    pub transformed_sigma: Mat2,
    pub push_forward: Mat2,
    /// Frobenius deviation between the two routes.
    pub deviation: f64,
    /// Worst pointwise relative asymmetry of the transformed field.
    pub max_pointwise_asymmetry: f64,
}

#[derive(Debug, Clone)]
pub struct DualityReport {
    pub sigma_star: Mat2,
    pub keller_of_sigma: Mat2,
    pub sigma_of_dual_field: Mat2,
    /// Frobenius deviation between the dual of the effective tensor and the
    /// effective tensor of the pointwise dual field.
    pub keller_deviation: f64,
    pub dykhne: Option<DykhneCheck>,
    pub notes: Vec<String>,
}

impl DualityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,deviation,scale\n");
        let _ = writeln!(
            out,
            "keller,{},{}",
            self.keller_deviation,
            self.sigma_star.norm()
        );
        if let Some(d) = &self.dykhne {
            let _ = writeln!(out, "dykhne,{},{}", d.deviation, self.sigma_star.norm());
            let _ = writeln!(out, "pointwise_asymmetry,{},1", d.max_pointwise_asymmetry);
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct DykhneJson {
            transformed_sigma: Vec<f64>,
            push_forward: Vec<f64>,
            deviation: f64,
            max_pointwise_asymmetry: f64,
        }
        #[derive(Serialize)]
        struct DualityJson {
            sigma_star: Vec<f64>,
            keller_of_sigma: Vec<f64>,
            sigma_of_dual_field: Vec<f64>,
            keller_deviation: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            dykhne: Option<DykhneJson>,
            notes: Vec<String>,
        }
        let flat = |m: &Mat2| m.e.iter().flatten().copied().collect::<Vec<f64>>();
        let doc = DualityJson {
            sigma_star: flat(&self.sigma_star),
            keller_of_sigma: flat(&self.keller_of_sigma),
            sigma_of_dual_field: flat(&self.sigma_of_dual_field),
            keller_deviation: self.keller_deviation,
            dykhne: self.dykhne.as_ref().map(|d| DykhneJson {
                transformed_sigma: flat(&d.transformed_sigma),
                push_forward: flat(&d.push_forward),
                deviation: d.deviation,
                max_pointwise_asymmetry: d.max_pointwise_asymmetry,
            }),
            notes: self.notes.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("duality report serializes")
    }
}

/// Evaluates the duality identities on a two-phase planar field: the Keller
/// dual of the effective tensor against the effective tensor of the
/// pointwise dual field, and (when the transform exists) the effective
/// tensor of the transformed field against the push-forward of the original
/// effective tensor.
pub fn run_duality_harness(
    mask: &PhaseMask,
    phase1: &PerturbedPhase,
    phase2: &PerturbedPhase,
    h: f64,
    config: &SolverConfig,
) -> Result<DualityReport, Error> {
    let field = assemble_conductivity(mask, phase1, phase2, &HallVector::Plane(h))?;
    let sigma = effective_tensor(&field, config)?.mat2();

    let keller_of_sigma = keller_dual(&sigma)?;
    let dual_field = field.map_2d(keller_dual)??;
    let sigma_of_dual_field = effective_tensor(&dual_field, config)?.mat2();
    let keller_deviation = keller_of_sigma.sub(&sigma_of_dual_field).norm();

    let mut notes = Vec::new();
    let dykhne = match dykhne_coefficients(phase1, phase2, h) {
        Ok(coeffs) => {
            let transformed = field.map_2d(|m| dykhne_transform_tensor(m, &coeffs))??;
            let mut max_asym = 0.0f64;
            if let crate::microstructure::FieldTensors::Plane(ts) = transformed.tensors() {
                for t in ts {
                    max_asym = max_asym.max(t.antisymmetric_part().norm() / t.norm());
                }
            }
            let transformed_sigma = effective_tensor(&transformed, config)?.mat2();
            let push = dual_push_forward(&sigma, &coeffs)?;
            let deviation = transformed_sigma.sub(&push).norm();
            Some(DykhneCheck {
                transformed_sigma,
                push_forward: push,
                deviation,
                max_pointwise_asymmetry: max_asym,
            })
        }
        Err(TensorError::DegenerateTransform) => {
            notes.push(
                "transform degenerate (h = 0 or matching Hall coefficients); identity bypass"
                    .to_string(),
            );
            None
        }
        Err(e) => return Err(e.into()),
    };

    Ok(DualityReport {
        sigma_star: sigma,
        keller_of_sigma,
        sigma_of_dual_field,
        keller_deviation,
        dykhne,
        notes,
    })
}

/// One row of the finite-contrast transform table together with the
/// distances to the limit values.
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsRow {
    pub theta: f64,
    pub alpha1_prime: f64,
    pub theta_alpha2_prime: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub err_alpha1: f64,
    pub err_theta_alpha2: f64,
    pub err_q: f64,
    pub err_r: f64,
}

/// Tabulates the transformed phases and map coefficients along a decreasing
/// contrast ladder against their limits
/// `(alpha1, alpha2 + beta2^2 h^2/alpha2, 1, -h beta1, 0)`.
pub fn run_dykhne_asymptotics(
    phases: &LimitPhases,
    h: f64,
    thetas: &[f64],
) -> Result<Vec<AsymptoticsRow>, Error> {
    if thetas.is_empty() {
        return Err(Error::Config("theta ladder is empty".to_string()));
    }
    if thetas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(
            "theta ladder must strictly decrease".to_string(),
        ));
    }
    let p1 = PerturbedPhase::new(phases.alpha1(), phases.beta1())?;
    let limit2 = phases.alpha2() + phases.beta2() * phases.beta2() * h * h / phases.alpha2();
    let mut rows = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let p2 = PerturbedPhase::new(phases.alpha2() / theta, phases.beta2() / theta)?;
        let coeffs = dykhne_coefficients(&p1, &p2, h)?;
        let (a1p, ta2p) = {
            let a1 = crate::tensor::dykhne_transform_phase(&p1, h, &coeffs)?;
            let a2 = crate::tensor::dykhne_transform_phase(&p2, h, &coeffs)?;
            (a1, theta * a2)
        };
        let (p, q, r) = coeffs.pqr();
        rows.push(AsymptoticsRow {
            theta,
            alpha1_prime: a1p,
            theta_alpha2_prime: ta2p,
            p,
            q,
            r,
            err_alpha1: (a1p - phases.alpha1()).abs(),
            err_theta_alpha2: (ta2p - limit2).abs(),
            err_q: (q + h * phases.beta1()).abs(),
            err_r: r.abs(),
        });
    }
    Ok(rows)
}

pub fn asymptotics_to_csv(rows: &[AsymptoticsRow]) -> String {
    let mut out = String::from(
        "theta,alpha1_prime,theta_alpha2_prime,p,q,r,err_alpha1,err_theta_alpha2,err_q,err_r\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.theta,
            r.alpha1_prime,
            r.theta_alpha2_prime,
            r.p,
            r.q,
            r.r,
            r.err_alpha1,
            r.err_theta_alpha2,
            r.err_q,
            r.err_r
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Effective-tensor report (JSON interface)
// ---------------------------------------------------------------------------

/// `h` as it appears in reports: a scalar in the plane, a triple in space.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum ReportField {
    Plane(f64),
    Space([f64; 3]),
}

impl From<&HallVector> for ReportField {
    fn from(h: &HallVector) -> Self {
        match h {
            HallVector::Plane(v) => ReportField::Plane(*v),
            HallVector::Space(v) => ReportField::Space(*v),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportPhases {
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
}

/// Single-solve report; field order is part of the interface.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveTensorReport {
    pub dim: usize,
    pub resolution: u32,
    pub h: ReportField,
    pub phases: ReportPhases,
    pub sigma_star: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
    pub wall_time_s: f64,
}

impl EffectiveTensorReport {
    pub fn new(
        tensor: &EffectiveTensor,
        h: &HallVector,
        phases: ReportPhases,
        wall_time_s: f64,
    ) -> Self {
        Self {
            dim: tensor.dim(),
            resolution: tensor.diagnostics().resolution,
            h: h.into(),
            phases,
            sigma_star: tensor.entries().to_vec(),
            residuals: tensor.diagnostics().residuals.clone(),
            iterations: tensor.diagnostics().iterations.clone(),
            wall_time_s,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tensor report serializes")
    }
}
