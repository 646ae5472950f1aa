//! Per-voxel classical tensor estimators: ordinary least squares (OLS),
//! constrained weighted linear least squares (CWLLS) and constrained
//! nonlinear least squares through a Cholesky parametrization (CNLS).

use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::eigen::eigendecompose;
use crate::error::{DtiError, Result};
use crate::linalg::{cholesky_solve, lstsq_qr};
use crate::scalar::Real;
use crate::tensor::DiffusionTensor;

/// Negative eigenvalues of a linear fit are raised to this (mm^2/s).
pub const POSITIVITY_FLOOR: f64 = 1e-7;
/// Non-positive signals are replaced by this fraction of `s0`.
pub const SIGNAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingScheme {
    Uniform,
    /// `w_i = s_i^2`, the inverse variance of `ln s_i` under Gaussian noise.
    #[default]
    SignalProportional,
}

impl WeightingScheme {
    pub fn weights<T: Real>(&self, signals: &[T]) -> Vec<T> {
        match self {
            WeightingScheme::Uniform => vec![T::one(); signals.len()],
            WeightingScheme::SignalProportional => signals.iter().map(|&s| s * s).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Clamp non-positive signals to `SIGNAL_FLOOR * s0` instead of failing.
    pub clamp_nonpositive: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            clamp_nonpositive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    pub tensor: DiffusionTensor<T>,
    /// Norm of the residual of the fitter's own objective.
    pub residual_norm: T,
    /// Zero for linear fits.
    pub iterations: usize,
    pub constrained_projection_applied: bool,
    pub clamped_signals: bool,
    pub converged: bool,
    /// Nonlinear objective after each accepted step (CNLS with tracing on).
    pub objective_trace: Vec<T>,
}

impl<T: Real> FitResult<T> {
    fn linear(tensor: DiffusionTensor<T>, residual_norm: T, clamped: bool) -> Self {
        Self {
            tensor,
            residual_norm,
            iterations: 0,
            constrained_projection_applied: false,
            clamped_signals: clamped,
            converged: true,
            objective_trace: Vec::new(),
        }
    }
}

struct Prepared<T> {
    signals: Vec<T>,
    log_att: Vec<T>,
    clamped: bool,
}

fn prepare<T: Real>(signals: &[T], s0: T, design: &DesignMatrix<T>, opts: &FitOptions) -> Result<Prepared<T>> {
    if signals.len() != design.nrows() {
        return Err(DtiError::ShapeMismatch(format!(
            "{} signals for a design matrix with {} rows",
            signals.len(),
            design.nrows()
        )));
    }
    if !(s0 > T::zero()) || !s0.is_finite() {
        return Err(DtiError::LogDomain(format!("reference signal s0 = {s0}")));
    }
    design.ensure_fittable()?;
    let floor = T::lit(SIGNAL_FLOOR) * s0;
    let mut clamped = false;
    let mut out = Vec::with_capacity(signals.len());
    for (i, &s) in signals.iter().enumerate() {
        if !s.is_finite() {
            return Err(DtiError::LogDomain(format!("signal {i} is {s}")));
        }
        if s <= T::zero() {
            if !opts.clamp_nonpositive {
                return Err(DtiError::LogDomain(format!("signal {i} is {s}")));
            }
            clamped = true;
            out.push(floor);
        } else {
            out.push(s);
        }
    }
    let log_att = out.iter().map(|&s| -(s / s0).ln()).collect();
    Ok(Prepared {
        signals: out,
        log_att,
        clamped,
    })
}

fn weighted_residual<T: Real>(tensor: &DiffusionTensor<T>, design: &DesignMatrix<T>, log_att: &[T], w: &[T]) -> T {
    design
        .apply(tensor)
        .iter()
        .zip(log_att)
        .zip(w)
        .map(|((&p, &y), &wi)| wi * (p - y) * (p - y))
        .sum::<T>()
        .sqrt()
}

/// `||B D - S||_2` with `S = -ln(s / s0)`.
pub fn ols_residual<T: Real>(tensor: &DiffusionTensor<T>, signals: &[T], s0: T, design: &DesignMatrix<T>) -> Result<T> {
    let p = prepare(signals, s0, design, &FitOptions::default())?;
    Ok(weighted_residual(tensor, design, &p.log_att, &vec![T::one(); p.log_att.len()]))
}

/// `||W^(1/2) (B D - S)||_2`.
pub fn wlls_residual<T: Real>(
    tensor: &DiffusionTensor<T>,
    signals: &[T],
    s0: T,
    design: &DesignMatrix<T>,
    weights: WeightingScheme,
) -> Result<T> {
    let p = prepare(signals, s0, design, &FitOptions::default())?;
    Ok(weighted_residual(tensor, design, &p.log_att, &weights.weights(&p.signals)))
}

/// `sqrt(sum_i (s_i - s0 exp(-B_i D))^2)`.
pub fn nonlinear_residual<T: Real>(
    tensor: &DiffusionTensor<T>,
    signals: &[T],
    s0: T,
    design: &DesignMatrix<T>,
) -> Result<T> {
    let p = prepare(signals, s0, design, &FitOptions::default())?;
    Ok(nonlinear_objective(&design.apply(tensor), &p.signals, s0).sqrt())
}

fn nonlinear_objective<T: Real>(att: &[T], signals: &[T], s0: T) -> T {
    att.iter()
        .zip(signals)
        .map(|(&a, &s)| {
            let r = s - s0 * (-a).exp();
            r * r
        })
        .sum()
}

fn solve_weighted<T: Real>(design: &DesignMatrix<T>, log_att: &[T], w: &[T]) -> Result<DiffusionTensor<T>> {
    let (rows, rhs): (Vec<[T; 6]>, Vec<T>) = design
        .rows()
        .iter()
        .zip(log_att)
        .zip(w)
        .map(|((r, &y), &wi)| {
            let sw = wi.sqrt();
            (r.map(|x| x * sw), y * sw)
        })
        .unzip();
    lstsq_qr(&rows, &rhs)
        .map(DiffusionTensor::from_array)
        .ok_or(DtiError::SingularDesign {
            condition: f64::INFINITY,
        })
}

pub fn fit_ols<T: Real>(signals: &[T], s0: T, design: &DesignMatrix<T>) -> Result<FitResult<T>> {
    fit_ols_with(signals, s0, design, &FitOptions::default())
}

pub fn fit_ols_with<T: Real>(
    signals: &[T],
    s0: T,
    design: &DesignMatrix<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let p = prepare(signals, s0, design, opts)?;
    let w = vec![T::one(); p.log_att.len()];
    let tensor = solve_weighted(design, &p.log_att, &w)?;
    let res = weighted_residual(&tensor, design, &p.log_att, &w);
    Ok(FitResult::linear(tensor, res, p.clamped))
}

/// Raises negative eigenvalues to `POSITIVITY_FLOOR`. Returns the input
/// untouched when it is already positive semidefinite.
pub fn project_positive<T: Real>(tensor: &DiffusionTensor<T>) -> (DiffusionTensor<T>, bool) {
    let eig = eigendecompose(tensor);
    if eig.min_value() >= T::zero() {
        return (*tensor, false);
    }
    let mut fixed = eig;
    let floor = T::lit(POSITIVITY_FLOOR);
    for v in fixed.values.iter_mut() {
        if *v < T::zero() {
            *v = floor;
        }
    }
    (fixed.reconstruct(), true)
}

/// Weighted linear fit followed by eigenvalue projection onto the positive
/// semidefinite cone.
pub fn fit_wlls_constrained<T: Real>(
    signals: &[T],
    s0: T,
    design: &DesignMatrix<T>,
    weights: WeightingScheme,
) -> Result<FitResult<T>> {
    fit_wlls_constrained_with(signals, s0, design, weights, &FitOptions::default())
}

pub fn fit_wlls_constrained_with<T: Real>(
    signals: &[T],
    s0: T,
    design: &DesignMatrix<T>,
    weights: WeightingScheme,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let p = prepare(signals, s0, design, opts)?;
    let w = weights.weights(&p.signals);
    let raw = solve_weighted(design, &p.log_att, &w)?;
    let (tensor, projected) = project_positive(&raw);
    let res = weighted_residual(&tensor, design, &p.log_att, &w);
    let mut out = FitResult::linear(tensor, res, p.clamped);
    out.constrained_projection_applied = projected;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnlsConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Stop once an accepted step lowers the objective by less than this
    /// fraction.
    pub relative_tolerance: f64,
    /// First-order optimality: stop when `|J^T r|_inf <= tol * |J|_F * |s|`.
    pub gradient_tolerance: f64,
    pub record_trace: bool,
}

impl Default for CnlsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-3,
            relative_tolerance: 1e-10,
            gradient_tolerance: 1e-10,
            record_trace: false,
        }
    }
}

/// Cholesky parameters `[l11, l21, l22, l31, l32, l33]` to `L L^T`.
pub fn cholesky_to_tensor<T: Real>(l: &[T; 6]) -> DiffusionTensor<T> {
    let [l11, l21, l22, l31, l32, l33] = *l;
    DiffusionTensor::new(
        l11 * l11,
        l21 * l21 + l22 * l22,
        l31 * l31 + l32 * l32 + l33 * l33,
        l11 * l21,
        l11 * l31,
        l21 * l31 + l22 * l32,
    )
}

/// Lower Cholesky factor of a positive definite tensor.
pub fn tensor_to_cholesky<T: Real>(d: &DiffusionTensor<T>) -> Option<[T; 6]> {
    let l11 = d.d_xx.sqrt();
    if !(l11 > T::zero()) {
        return None;
    }
    let l21 = d.d_xy / l11;
    let l31 = d.d_xz / l11;
    let p22 = d.d_yy - l21 * l21;
    if !(p22 > T::zero()) {
        return None;
    }
    let l22 = p22.sqrt();
    let l32 = (d.d_yz - l21 * l31) / l22;
    let p33 = d.d_zz - l31 * l31 - l32 * l32;
    if !(p33 > T::zero()) {
        return None;
    }
    Some([l11, l21, l22, l31, l32, p33.sqrt()])
}

/// Cholesky factor of a PSD tensor, nudging the spectrum up until the
/// factorization exists.
fn initial_factor<T: Real>(d: &DiffusionTensor<T>) -> [T; 6] {
    if let Some(l) = tensor_to_cholesky(d) {
        return l;
    }
    let eig = eigendecompose(d);
    let scale = eig.values[0].abs().max(T::lit(POSITIVITY_FLOOR));
    let mut jitter = T::lit(POSITIVITY_FLOOR);
    loop {
        let mut e = eig;
        for v in e.values.iter_mut() {
            *v = v.max(T::zero()) + jitter;
        }
        if let Some(l) = tensor_to_cholesky(&e.reconstruct()) {
            return l;
        }
        jitter = jitter * T::lit(10.0);
        if jitter > scale * T::lit(1e3) {
            let s = scale.sqrt();
            return [s, T::zero(), s, T::zero(), T::zero(), s];
        }
    }
}

/// d(D vector)/d(l_k) for each Cholesky parameter k.
fn cholesky_jacobian<T: Real>(l: &[T; 6]) -> [[T; 6]; 6] {
    let [l11, l21, l22, l31, l32, l33] = *l;
    let z = T::zero();
    let two = T::lit(2.0);
    // rows: parameter k; columns: xx yy zz xy xz yz
    [
        [two * l11, z, z, l21, l31, z],
        [z, two * l21, z, l11, z, l31],
        [z, two * l22, z, z, z, l32],
        [z, z, two * l31, z, l11, l21],
        [z, z, two * l32, z, z, l22],
        [z, z, two * l33, z, z, z],
    ]
}

struct LmState<T> {
    objective: T,
    jtj: [[T; 6]; 6],
    grad: [T; 6],
    jac_norm: T,
}

fn lm_state<T: Real>(l: &[T; 6], design: &DesignMatrix<T>, signals: &[T], s0: T) -> LmState<T> {
    let dj = cholesky_jacobian(l);
    let tensor = cholesky_to_tensor(l);
    let mut jtj = [[T::zero(); 6]; 6];
    let mut grad = [T::zero(); 6];
    let mut objective = T::zero();
    let mut jac_norm = T::zero();
    for (row, &s) in design.rows().iter().zip(signals) {
        let att: T = row.iter().zip(tensor.to_array()).map(|(&a, b)| a * b).sum();
        let model = s0 * (-att).exp();
        let r = s - model;
        objective = objective + r * r;
        // dr/dl_k = model * (B_i . dD/dl_k)
        let jrow: [T; 6] = std::array::from_fn(|k| model * (0..6).map(|c| row[c] * dj[k][c]).sum::<T>());
        for a in 0..6 {
            grad[a] = grad[a] + jrow[a] * r;
            jac_norm = jac_norm + jrow[a] * jrow[a];
            for b in 0..6 {
                jtj[a][b] = jtj[a][b] + jrow[a] * jrow[b];
            }
        }
    }
    LmState {
        objective,
        jtj,
        grad,
        jac_norm: jac_norm.sqrt(),
    }
}

/// Levenberg-Marquardt on `sum_i (s_i - s0 exp(-B_i L L^T))^2`, started from
/// the Cholesky factor of the CWLLS estimate. The result is positive
/// semidefinite by construction.
pub fn fit_cnls<T: Real>(
    signals: &[T],
    s0: T,
    design: &DesignMatrix<T>,
    config: &CnlsConfig,
) -> Result<FitResult<T>> {
    let init = fit_wlls_constrained(signals, s0, design, WeightingScheme::SignalProportional)?;
    let p = prepare(signals, s0, design, &FitOptions::default())?;
    let signals = &p.signals;
    let signal_norm = signals.iter().map(|&s| s * s).sum::<T>().sqrt();
    let gtol = T::lit(config.gradient_tolerance);
    let stationary = |st: &LmState<T>| {
        let g = st.grad.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
        st.objective == T::zero() || g <= gtol * st.jac_norm * signal_norm
    };

    let mut l = initial_factor(&init.tensor);
    let mut state = lm_state(&l, design, signals, s0);
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(state.objective);
    }
    let mut mu = T::lit(config.initial_damping);
    let mut iterations = 0;
    let mut converged = stationary(&state);
    let max_diag = (0..6).fold(T::zero(), |m, k| m.max(state.jtj[k][k]));

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let floor = max_diag * T::lit(1e-12);
        let mut a = state.jtj;
        for k in 0..6 {
            a[k][k] = a[k][k] + mu * state.jtj[k][k].max(floor);
        }
        let neg_grad = state.grad.map(|g| -g);
        let accepted = match cholesky_solve(&a, &neg_grad) {
            Some(step) => {
                let trial: [T; 6] = std::array::from_fn(|k| l[k] + step[k]);
                let trial_obj = nonlinear_objective(&design.apply(&cholesky_to_tensor(&trial)), signals, s0);
                if trial_obj < state.objective {
                    let rel = (state.objective - trial_obj) / state.objective;
                    l = trial;
                    state = lm_state(&l, design, signals, s0);
                    if config.record_trace {
                        trace.push(state.objective);
                    }
                    mu = mu / T::lit(10.0);
                    if rel < T::lit(config.relative_tolerance) || stationary(&state) {
                        converged = true;
                    }
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        if !accepted {
            mu = mu * T::lit(10.0);
            // no descent direction left at machine precision
            if mu > T::lit(1e16) {
                converged = true;
            }
        }
    }

    Ok(FitResult {
        tensor: cholesky_to_tensor(&l),
        residual_norm: state.objective.sqrt(),
        iterations,
        constrained_projection_applied: false,
        clamped_signals: p.clamped,
        converged,
        objective_trace: trace,
    })
}

/// Fitting methods that run voxel by voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassicalMethod {
    Ols,
    Cwlls,
    Cnls,
}

impl ClassicalMethod {
    pub fn fit<T: Real>(&self, signals: &[T], s0: T, design: &DesignMatrix<T>) -> Result<FitResult<T>> {
        match self {
            ClassicalMethod::Ols => fit_ols(signals, s0, design),
            ClassicalMethod::Cwlls => {
                fit_wlls_constrained(signals, s0, design, WeightingScheme::SignalProportional)
            }
            ClassicalMethod::Cnls => fit_cnls(signals, s0, design, &CnlsConfig::default()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClassicalMethod::Ols => "ols",
            ClassicalMethod::Cwlls => "cwlls",
            ClassicalMethod::Cnls => "cnls",
        }
    }
}
