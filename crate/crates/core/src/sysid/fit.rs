//! Robust damped Gauss-Newton fit of the dynamic parameters.
//!
//! Residuals are `(h_p(t) − s(t)) / σ_c`, where `h_p` is the forward
//! simulation of the candidate model and `σ_c` a robust per-channel noise
//! scale. The Huber cost is minimised by iteratively reweighted Gauss-Newton
//! with Levenberg-Marquardt damping; the Jacobian is a central finite
//! difference over the parameters, one column per worker. The fit runs on
//! growing prefixes of the log, each warm-started from the previous one,
//! and friction is kept dissipative throughout.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;

use super::huber::{huber, huber_weight};
use super::{predict_measurements, KnownParams, ParamVector, PARAM_COUNT, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::sim::MissionLog;

/// Minimum log duration accepted by [`fit_dynamic`], seconds.
pub const MIN_FIT_DURATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Huber,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Huber threshold in normalised residual units.
    pub delta: f64,
    pub loss: Loss,
    pub max_iter: usize,
    pub rel_cost_tol: f64,
    pub step_tol: f64,
    pub lambda0: f64,
    /// Hold parameters the log cannot inform at their initial value instead
    /// of failing with [`Error::SingularNormalEquations`].
    pub freeze_unidentifiable: bool,
    /// A parameter is unidentifiable when a 100% change of it moves the
    /// normalised residual vector by less than this (Euclidean norm), i.e.
    /// its marginal relative standard error exceeds `1 / threshold`.
    pub identifiability_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            delta: 1.0,
            loss: Loss::Huber,
            max_iter: 200,
            rel_cost_tol: 1e-8,
            step_tol: 1e-10,
            lambda0: 1e-6,
            freeze_unidentifiable: true,
            identifiability_threshold: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    CostChange,
    StepSize,
    ZeroCost,
    NoDescent,
    MaxIterations,
}

/// Per-channel residual summary (ax, ay, gyro).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDiagnostics {
    /// Robust noise scale used to normalise each channel.
    pub channel_scale: [f64; 3],
    /// RMS residual per channel in measurement units.
    pub rms: [f64; 3],
    /// Fraction of residuals in the linear (down-weighted) Huber branch.
    pub downweighted_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ParamVector,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    /// Parameters the excitation does not inform; held at their initial value.
    pub unidentifiable: Vec<&'static str>,
    /// Marginal relative standard error per parameter, when identifiable.
    pub relative_std_error: [Option<f64>; PARAM_COUNT],
    /// Fitted parameters whose relative standard error exceeds
    /// `1 / identifiability_threshold`: estimated, but not to be trusted.
    pub poorly_determined: Vec<&'static str>,
    pub diagnostics: ResidualDiagnostics,
}

impl FitReport {
    pub fn is_identifiable(&self, name: &str) -> bool {
        !self.unidentifiable.contains(&name)
    }
}

struct Problem<'a> {
    log: &'a MissionLog,
    known: KnownParams,
    meas: Vec<Vector3<f64>>,
    scale: [f64; 3],
    opts: FitOptions,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noise scale per channel from the MAD of first differences, so the
/// scale does not depend on the candidate parameters.
fn channel_scales(meas: &[Vector3<f64>]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut d: Vec<f64> = meas.windows(2).map(|w| w[1][c] - w[0][c]).collect();
        let med = median(&mut d);
        let mut dev: Vec<f64> = d.iter().map(|x| (x - med).abs()).collect();
        let mad = 1.4826 * median(&mut dev) / std::f64::consts::SQRT_2;
        let rms = (meas.iter().map(|z| z[c] * z[c]).sum::<f64>() / meas.len() as f64).sqrt();
        *slot = mad.max(1e-9 * (1.0 + rms)).max(f64::MIN_POSITIVE);
    }
    out
}

impl Problem<'_> {
    fn residuals(&self, p: &ParamVector) -> Result<DVector<f64>> {
        let pred = predict_measurements(p, self.known, self.log)?;
        let n = pred.len();
        Ok(DVector::from_fn(3 * n, |i, _| {
            let (k, c) = (i / 3, i % 3);
            (pred[k][c] - self.meas[k][c]) / self.scale[c]
        }))
    }

    fn cost(&self, r: &DVector<f64>) -> f64 {
        match self.opts.loss {
            Loss::Huber => r.iter().map(|&x| huber(x, self.opts.delta)).sum(),
            Loss::LeastSquares => r.iter().map(|&x| 0.5 * x * x).sum(),
        }
    }

    fn weights(&self, r: &DVector<f64>) -> DVector<f64> {
        match self.opts.loss {
            Loss::Huber => r.map(|x| huber_weight(x, self.opts.delta)),
            Loss::LeastSquares => DVector::from_element(r.len(), 1.0),
        }
    }


    /// Central-difference Jacobian column, one-sided if a side diverges.
    fn column(&self, p: &ParamVector, i: usize, r0: &DVector<f64>) -> Result<DVector<f64>> {
        let h = (1e-6 * p.0[i].abs()).max(1e-8);
        let shifted = |s: f64| {
            let mut q = *p;
            q.0[i] += s;
            self.residuals(&q)
        };
        match (shifted(h), shifted(-h)) {
            (Ok(a), Ok(b)) => Ok((a - b) / (2.0 * h)),
            (Ok(a), Err(_)) => Ok((a - r0) / h),
            (Err(_), Ok(b)) => Ok((r0 - b) / h),
            (Err(_), Err(_)) => Err(Error::DivergedSimulation),
        }
    }

    fn jacobian(&self, p: &ParamVector, r0: &DVector<f64>, cols: &[usize]) -> Result<DMatrix<f64>> {
        let columns: Vec<DVector<f64>> = cols
            .par_iter()
            .map(|&i| self.column(p, i, r0))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_columns(&columns))
    }
}

/// Magnitude used to judge a parameter's relative sensitivity: its own
/// value, or for torque-map entries at least the diagonal of the same row.
fn reference_magnitude(p: &ParamVector, i: usize) -> f64 {
    let v = p.0[i].abs();
    if i >= 6 {
        let row = (i - 6) / 3;
        v.max(p.0[6 + 4 * row].abs())
    } else {
        v
    }
    .max(1e-6)
}

/// `JᵀWJ` and `JᵀWr` with a fixed summation order.
fn normal_equations(
    j: &DMatrix<f64>,
    w: &DVector<f64>,
    r: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let wj = DMatrix::from_fn(j.nrows(), j.ncols(), |row, col| j[(row, col)] * w[row]);
    (wj.transpose() * j, wj.transpose() * r)
}

/// Outcome of one damped Gauss-Newton run.
struct Descent {
    p: ParamVector,
    r: DVector<f64>,
    cost: f64,
    iterations: usize,
    stop: StopReason,
    last_normal: Option<(DMatrix<f64>, usize)>,
}

fn descend(problem: &Problem, init: ParamVector, free: &[usize]) -> Result<Descent> {
    let mut p = init;
    let mut r = problem.residuals(&p).map_err(|_| Error::DivergedSimulation)?;
    let mut cost = problem.cost(&r);
    let opts = &problem.opts;
    let mut lambda = opts.lambda0;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;
    let mut last_normal = None;
    while !free.is_empty() && iterations < opts.max_iter {
        if cost <= 1e-28 {
            stop = StopReason::ZeroCost;
            break;
        }
        iterations += 1;
        let j = problem.jacobian(&p, &r, &free)?;
        let w = problem.weights(&r);
        let (a, g) = normal_equations(&j, &w, &r);
        let diag = a.diagonal().map(|d| if d > 0.0 { d } else { 1.0 });
        last_normal = Some((a.clone(), j.nrows()));

        let mut accepted = None;
        while lambda <= 1e16 {
            let mut damped = a.clone();
            for k in 0..free.len() {
                damped[(k, k)] += lambda * diag[k];
            }
            let step = damped
                .clone()
                .cholesky()
                .map(|c| -c.solve(&g))
                .or_else(|| damped.lu().solve(&(-&g)));
            let Some(step) = step else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = p;
            for (k, &i) in free.iter().enumerate() {
                cand.0[i] += step[k];
            }
            let cand = project_dissipative(cand);
            let cand_r = problem.residuals(&cand).ok();
            let cand_cost = cand_r.as_ref().map_or(f64::INFINITY, |rr| problem.cost(rr));
            if cand_cost < cost {
                let rel_step = free
                    .iter()
                    .enumerate()
                    .map(|(_, &i)| ((cand.0[i] - p.0[i]) / reference_magnitude(&p, i)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                accepted = Some((cand, cand_r.unwrap(), cand_cost, rel_step));
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        let Some((cand, cand_r, cand_cost, rel_step)) = accepted else {
            stop = StopReason::NoDescent;
            break;
        };
        let change = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
        p = cand;
        r = cand_r;
        cost = cand_cost;
        if change < opts.rel_cost_tol {
            stop = StopReason::CostChange;
            break;
        }
        if rel_step < opts.step_tol {
            stop = StopReason::StepSize;
            break;
        }
    }
    Ok(Descent {
        p,
        r,
        cost,
        iterations,
        stop,
        last_normal,
    })
}

/// Clamps the friction coefficients to the dissipative half-space.
/// Positive friction makes the forward simulation blow up under sustained
/// input, which leaves the cost surface undefined.
fn project_dissipative(mut p: ParamVector) -> ParamVector {
    for v in &mut p.0[0..6] {
        *v = v.min(0.0);
    }
    p
}

/// Shortest continuation stage, seconds.
const FIRST_STAGE: f64 = 20.0;

/// Prefix lengths (records) of the continuation stages, ending with the full log.
fn stage_lengths(log: &MissionLog) -> Vec<usize> {
    let mut out = Vec::new();
    let mut len = (FIRST_STAGE / log.dt).round() as usize;
    while len < log.len() {
        out.push(len);
        len *= 3;
    }
    out.push(log.len());
    out
}

/// Robust Gauss-Newton identification of friction and torque parameters.
pub fn fit_dynamic(
    log: &MissionLog,
    known: KnownParams,
    init: &ParamVector,
    opts: &FitOptions,
) -> Result<FitReport> {
    if log.duration() < MIN_FIT_DURATION {
        return Err(Error::InsufficientSamples {
            got: log.len(),
            need: (MIN_FIT_DURATION / log.dt).ceil() as usize,
        });
    }
    if !init.is_finite() {
        return Err(Error::InvalidParams("non-finite initial parameters".into()));
    }
    let meas: Vec<Vector3<f64>> = log.records.iter().map(|r| r.sensor.as_vector()).collect();
    let problem = Problem {
        log,
        known,
        scale: channel_scales(&meas),
        meas,
        opts: *opts,
    };

    let p = project_dissipative(*init);
    let r = problem.residuals(&p).map_err(|_| Error::DivergedSimulation)?;
    let initial_cost = problem.cost(&r);

    // Identifiability from the initial Jacobian.
    let all: Vec<usize> = (0..PARAM_COUNT).collect();
    let j0 = problem.jacobian(&p, &r, &all)?;
    let sensitivity: Vec<f64> = (0..PARAM_COUNT)
        .map(|i| j0.column(i).norm() * reference_magnitude(&p, i))
        .collect();
    let weak: Vec<usize> = (0..PARAM_COUNT)
        .filter(|&i| !(sensitivity[i] >= opts.identifiability_threshold))
        .collect();
    if !opts.freeze_unidentifiable {
        let null = near_null_columns(&j0);
        if !null.is_empty() {
            return Err(Error::SingularNormalEquations {
                columns: null.into_iter().map(|i| PARAM_NAMES[i]).collect(),
            });
        }
    }
    let free: Vec<usize> = if opts.freeze_unidentifiable {
        all.iter().copied().filter(|i| !weak.contains(i)).collect()
    } else {
        all.clone()
    };
    let unidentifiable: Vec<&'static str> = if opts.freeze_unidentifiable {
        weak.iter().map(|&i| PARAM_NAMES[i]).collect()
    } else {
        Vec::new()
    };

    // Continuation over growing prefixes: short horizons keep the
    // simulation error surface benign far from the optimum.
    let mut p = p;
    let mut iterations = 0;
    let mut descent = None;
    for len in stage_lengths(log) {
        let prefix;
        let stage_log = if len < log.len() {
            prefix = MissionLog {
                dt: log.dt,
                records: log.records[..len].to_vec(),
            };
            &prefix
        } else {
            log
        };
        let meas: Vec<Vector3<f64>> = stage_log.records.iter().map(|r| r.sensor.as_vector()).collect();
        let stage = Problem {
            log: stage_log,
            known,
            meas,
            scale: problem.scale,
            opts: *opts,
        };
        let d = descend(&stage, p, &free)?;
        iterations += d.iterations;
        p = d.p;
        descent = Some(d);
    }
    let Descent {
        r,
        cost,
        mut stop,
        last_normal,
        ..
    } = descent.expect("at least one stage");
    if iterations == 0 && !r.is_empty() {
        stop = StopReason::ZeroCost;
    }

    // Marginal relative standard errors from the last normal matrix,
    // scaled by the residual variance.
    let mut relative_std_error = [None; PARAM_COUNT];
    let normal = match last_normal {
        Some(n) => Some(n),
        None if free.is_empty() => None,
        None => {
            let j = problem.jacobian(&p, &r, &free)?;
            let w = problem.weights(&r);
            Some((normal_equations(&j, &w, &r).0, j.nrows()))
        }
    };
    if let Some((a, n)) = normal {
        let dof = (n as f64 - free.len() as f64).max(1.0);
        let sigma2 = (2.0 * cost / dof).max(0.0);
        if let Some(inv) = a.try_inverse() {
            for (k, &i) in free.iter().enumerate() {
                let se = (inv[(k, k)].max(0.0) * sigma2).sqrt();
                relative_std_error[i] = Some(se / reference_magnitude(&p, i));
            }
        }
    }

    let pred = predict_measurements(&p, known, log)?;
    let mut rms = [0.0; 3];
    for (z, m) in pred.iter().zip(&problem.meas) {
        for c in 0..3 {
            rms[c] += (z[c] - m[c]).powi(2);
        }
    }
    let nrec = pred.len().max(1) as f64;
    let rms = rms.map(|s| (s / nrec).sqrt());
    let downweighted_fraction =
        r.iter().filter(|x| x.abs() > opts.delta).count() as f64 / r.len().max(1) as f64;

    let poorly_determined = (0..PARAM_COUNT)
        .filter(|&i| relative_std_error[i].is_some_and(|e| e * opts.identifiability_threshold > 1.0))
        .map(|i| PARAM_NAMES[i])
        .collect();
    let converged = !matches!(stop, StopReason::MaxIterations) && cost <= initial_cost;
    Ok(FitReport {
        params: p,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        stop,
        unidentifiable,
        relative_std_error,
        poorly_determined,
        diagnostics: ResidualDiagnostics {
            channel_scale: problem.scale,
            rms,
            downweighted_fraction,
        },
    })
}

/// Columns carrying the near-null directions of the column-equilibrated Jacobian.
fn near_null_columns(j: &DMatrix<f64>) -> Vec<usize> {
    let norms: Vec<f64> = j.column_iter().map(|c| c.norm()).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let mut out: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n <= 1e-12 * max.max(f64::MIN_POSITIVE))
        .map(|(i, _)| i)
        .collect();
    let keep: Vec<usize> = (0..j.ncols()).filter(|i| !out.contains(i)).collect();
    if !keep.is_empty() {
        let eq = DMatrix::from_fn(j.nrows(), keep.len(), |r, c| j[(r, keep[c])] / norms[keep[c]]);
        let svd = (eq.transpose() * &eq).svd(false, true);
        let smax = svd.singular_values.max();
        if let Some(vt) = svd.v_t {
            for (k, &s) in svd.singular_values.iter().enumerate() {
                if s <= 1e-12 * smax {
                    for (c, &col) in keep.iter().enumerate() {
                        if vt[(k, c)].abs() > 0.1 && !out.contains(&col) {
                            out.push(col);
                        }
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlAction, DynamicParams};
    use crate::noise::NoiseModel;
    use crate::sim::{excitation_signal, run_mission, ChannelMask, MissionOptions};

    fn noiseless_log(seconds: f64, mask: ChannelMask) -> (MissionLog, DynamicParams) {
        let p = DynamicParams::reference_vehicle();
        let u = excitation_signal(seconds, 0.01, mask, 21).unwrap();
        let opts = MissionOptions {
            process_noise: false,
            ..Default::default()
        };
        (run_mission(&p, &NoiseModel::zero(), &u, &opts).unwrap(), p)
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn short_log_is_rejected() {
        let (log, p) = noiseless_log(5.0, ChannelMask::X_PSI);
        let err = fit_dynamic(&log, KnownParams::from(&p), &ParamVector::pack(&p), &FitOptions::default());
        assert!(matches!(err, Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn truth_init_is_a_fixed_point() {
        let (log, p) = noiseless_log(20.0, ChannelMask::X_PSI);
        let rep = fit_dynamic(&log, KnownParams::from(&p), &ParamVector::pack(&p), &FitOptions::default())
            .unwrap();
        assert!(rep.converged);
        assert!(rep.final_cost < 1e-10);
        assert_eq!(rep.params.0[6], 1.0);
    }

    #[test]
    fn unexcited_input_column_is_singular_without_freezing() {
        let (log, p) = noiseless_log(20.0, ChannelMask::X_PSI);
        let opts = FitOptions {
            freeze_unidentifiable: false,
            ..Default::default()
        };
        match fit_dynamic(&log, KnownParams::from(&p), &ParamVector::pack(&p), &opts) {
            Err(Error::SingularNormalEquations { columns }) => {
                for name in ["T01", "T11", "T21"] {
                    assert!(columns.contains(&name), "{columns:?}");
                }
            }
            other => panic!("expected singular normal equations, got {other:?}"),
        }
    }

    #[test]
    fn zero_input_log_diverges_nowhere() {
        // all-zero commands: every parameter is unidentifiable, nothing moves
        let p = DynamicParams::reference_vehicle();
        let log = run_mission(
            &p,
            &NoiseModel::zero(),
            &vec![ControlAction::ZERO; 1500],
            &MissionOptions::default(),
        )
        .unwrap();
        let rep = fit_dynamic(&log, KnownParams::from(&p), &ParamVector::pack(&p), &FitOptions::default())
            .unwrap();
        assert_eq!(rep.unidentifiable.len(), PARAM_COUNT);
        assert_eq!(rep.params, ParamVector::pack(&p));
    }
}
