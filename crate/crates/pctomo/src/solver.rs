//! Iteratively regularized Gauss-Newton outer loop with a conjugate gradient
//! inner solver.
//!
//! Unknowns are the reduced variables `r` of the active [`Constraint`], so
//! `N = embed(r)`. Step `k` minimizes the quadratic
//!
//! ```text
//! |A d - (I - F(N_k))|_Y^2 + alpha_k |embed(r_k + d - r_0)|_X^2,   A = F'(N_k) embed
//! ```
//!
//! whose normal equations are solved by CG preconditioned with the inverse
//! object Gramian. Without a constraint this is plain CG in the X inner
//! product applied to `G_X^{-1} A^* G_Y A + alpha`.

use std::io::Write;

use crate::error::{param_err, Error, Result};
use crate::forward::{ForwardModel, LinearizationPoint};
use crate::grids::{dot_c, IntensityData, ObjectVolume};
use crate::regularization::{Constraint, DataGramian, ObjectGramian};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha0 {
    Value(f64),
    /// Data-driven initial value, see [`alpha0_heuristic`].
    Heuristic,
}

#[derive(Clone, Debug)]
pub enum StopRule<T> {
    /// Stop after exactly `k` Newton steps.
    Fixed(usize),
    /// First iterate with `|F(N_k) - I|_Y <= tau * err_norm`.
    Discrepancy { tau: f64, err_norm: f64 },
    /// Run to `max_newton` and return the iterate closest to the truth.
    /// Diagnostics only.
    BestStop { truth: ObjectVolume<T> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgPolicy {
    pub max_iter: usize,
    /// Relative tolerance at `alpha_0`; scaled by `sqrt(alpha_k / alpha_0)`.
    pub base_tol: f64,
}

impl Default for CgPolicy {
    fn default() -> Self {
        CgPolicy { max_iter: 200, base_tol: 1e-2 }
    }
}

impl CgPolicy {
    pub fn rel_tol(&self, alpha_k: f64, alpha0: f64) -> f64 {
        self.base_tol * (alpha_k / alpha0).sqrt()
    }
}

#[derive(Clone)]
pub struct SolverConfig<T: Real> {
    pub alpha0: Alpha0,
    pub r_alpha: f64,
    pub max_newton: usize,
    pub min_newton: usize,
    pub stop: StopRule<T>,
    pub cg: CgPolicy,
    pub gram_x: ObjectGramian<T>,
    pub gram_y: DataGramian<T>,
    pub constraint: Constraint,
    /// Initial guess and regularization center `N_0` (zero if absent).
    pub initial_guess: Option<ObjectVolume<T>>,
    /// `|N_ref|_X^2` for the heuristic `alpha_0`; defaults to `|N_0|_X^2`.
    pub reference_norm_sq: Option<f64>,
}

impl<T: Real> SolverConfig<T> {
    /// Defaults: heuristic `alpha_0`, `r_alpha = 2/3`, 30 Newton steps, L2 Gramians.
    pub fn new(grid: crate::grids::GridSpec, stop: StopRule<T>) -> Self {
        SolverConfig {
            alpha0: Alpha0::Heuristic,
            r_alpha: 2.0 / 3.0,
            max_newton: 30,
            min_newton: 0,
            stop,
            cg: CgPolicy::default(),
            gram_x: ObjectGramian::identity(grid),
            gram_y: DataGramian::identity(),
            constraint: Constraint::none(),
            initial_guess: None,
            reference_norm_sq: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.r_alpha > 0.0 && self.r_alpha < 1.0) {
            return param_err(format!("r_alpha must lie in (0, 1), got {}", self.r_alpha));
        }
        if self.max_newton == 0 {
            return param_err("max_newton must be positive");
        }
        if let Alpha0::Value(a) = self.alpha0 {
            if !(a > 0.0 && a.is_finite()) {
                return param_err(format!("alpha0 must be positive, got {a}"));
            }
        }
        if let StopRule::Discrepancy { tau, err_norm } = self.stop {
            if !(tau >= 1.0) {
                return param_err(format!("discrepancy tau must be >= 1, got {tau}"));
            }
            if !(err_norm >= 0.0 && err_norm.is_finite()) {
                return param_err("discrepancy rule needs a finite error norm");
            }
        }
        if self.cg.max_iter == 0 || !(self.cg.base_tol > 0.0) {
            return param_err("CG policy needs max_iter >= 1 and a positive tolerance");
        }
        Ok(())
    }
}

/// `|I - 1|_Y^2 / |N_ref|_X^2` in the near field, `0.1 |I|_Y^2 / |N_ref|_X^2`
/// in the far field. `empty_beam` is the intensity without object.
pub fn alpha0_heuristic<T: Real>(data: &[T], gram_y: &DataGramian<T>, empty_beam: f64, ref_norm_sq: f64, near_field: bool) -> Result<f64> {
    if !(ref_norm_sq > 0.0 && ref_norm_sq.is_finite()) {
        return param_err("reference norm for alpha0 must be positive");
    }
    if near_field {
        let e = T::of(empty_beam);
        let d: Vec<T> = data.iter().map(|&v| v - e).collect();
        Ok(gram_y.norm_sq(&d)? / ref_norm_sq)
    } else {
        Ok(0.1 * gram_y.norm_sq(data)? / ref_norm_sq)
    }
}

#[derive(Clone, Debug)]
pub struct CgResult<T> {
    pub x: ObjectVolume<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Preconditioned residual norm after each iteration, starting with the initial one.
    pub residuals: Vec<f64>,
}

fn axpy<T: Real>(y: &mut ObjectVolume<T>, a: f64, x: &ObjectVolume<T>) {
    let a = T::of(a);
    y.data.iter_mut().zip(&x.data).for_each(|(y, x)| *y += x * a);
}

/// Preconditioned CG for `M x = b` starting from zero. `precond` applies an
/// approximation of `M^{-1}`; both must be symmetric positive definite.
pub fn cg_solve<T: Real>(
    apply: impl Fn(&ObjectVolume<T>) -> Result<ObjectVolume<T>>,
    precond: impl Fn(&ObjectVolume<T>) -> Result<ObjectVolume<T>>,
    rhs: &ObjectVolume<T>,
    rel_tol: f64,
    max_iter: usize,
) -> Result<CgResult<T>> {
    let mut x = ObjectVolume::zeros(rhs.grid);
    let mut r = rhs.clone();
    let mut z = precond(&r)?;
    let mut rz = dot_c(&r.data, &z.data);
    let r0 = rz.max(0.0).sqrt();
    let mut residuals = vec![r0];
    if r0 == 0.0 {
        return Ok(CgResult { x, iterations: 0, converged: true, residuals });
    }
    let mut p = z.clone();
    for it in 1..=max_iter {
        let q = apply(&p)?;
        let pq = dot_c(&p.data, &q.data);
        if !(pq > 0.0) {
            return Err(Error::CgBreakdown { iter: it, curvature: pq });
        }
        let a = rz / pq;
        axpy(&mut x, a, &p);
        axpy(&mut r, -a, &q);
        z = precond(&r)?;
        let rz_new = dot_c(&r.data, &z.data);
        let res = rz_new.max(0.0).sqrt();
        if !res.is_finite() {
            return Err(Error::NonFinite(format!("CG residual at iteration {it}")));
        }
        residuals.push(res);
        if res <= rel_tol * r0 {
            return Ok(CgResult { x, iterations: it, converged: true, residuals });
        }
        let beta = T::of(rz_new / rz);
        rz = rz_new;
        p.data.iter_mut().zip(&z.data).for_each(|(p, z)| *p = z + *p * beta);
    }
    Ok(CgResult { x, iterations: max_iter, converged: false, residuals })
}

/// Index of the iterate to return if the run should stop now, given the
/// histories up to the current iterate.
pub fn should_stop<T>(rule: &StopRule<T>, residuals: &[f64], rhos: &[f64], max_newton: usize, min_newton: usize) -> Option<usize> {
    let k = residuals.len().checked_sub(1)?;
    let at_cap = k >= max_newton;
    match rule {
        StopRule::Fixed(n) => (k >= *n || at_cap).then_some(k),
        StopRule::Discrepancy { tau, err_norm } => {
            let hit = k >= min_newton && residuals[k] <= tau * err_norm;
            (hit || at_cap).then_some(k)
        }
        StopRule::BestStop { .. } => {
            if !at_cap {
                return None;
            }
            rhos.iter()
                .enumerate()
                .skip(min_newton.min(k))
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .or(Some(k))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub alpha: f64,
    /// `|F(N_k) - I|_Y`.
    pub data_residual: f64,
    /// CG iterations of the step taken from `N_k` (0 for the last iterate).
    pub cg_iters: usize,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct NewtonState<T> {
    pub k: usize,
    pub reduced: ObjectVolume<T>,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub volume: ObjectVolume<T>,
    pub selected: usize,
    pub alpha0: f64,
    pub history: Vec<IterationRecord>,
}

/// Model, data and configuration bound together for repeated Newton steps.
pub struct Solver<'a, T: Real> {
    pub model: &'a ForwardModel<T>,
    pub data: &'a IntensityData<T>,
    pub config: &'a SolverConfig<T>,
    pub gram_y: DataGramian<T>,
    pub alpha0: f64,
    /// Reduced regularization center.
    pub center: ObjectVolume<T>,
}

impl<'a, T: Real> Solver<'a, T> {
    pub fn new(model: &'a ForwardModel<T>, data: &'a IntensityData<T>, config: &'a SolverConfig<T>) -> Result<Self> {
        config.validate()?;
        if data.data.len() != model.data_len() || data.ny != model.detector.ny || data.nx != model.detector.nx {
            return Err(Error::Shape(format!(
                "data {}x{}x{} does not match model {}x{}x{}",
                data.n_angles(),
                data.ny,
                data.nx,
                model.n_angles(),
                model.detector.ny,
                model.detector.nx
            )));
        }
        let mut gram_y = config.gram_y.clone();
        if let Some(w) = &data.weights {
            gram_y = gram_y.with_mask(w)?;
        }
        let grid = model.grid();
        let n0 = match &config.initial_guess {
            Some(v) => {
                v.same_shape(&ObjectVolume::zeros(grid))?;
                v.clone()
            }
            None => ObjectVolume::zeros(grid),
        };
        let center = config.constraint.reduce(&n0)?;
        let alpha0 = match config.alpha0 {
            Alpha0::Value(a) => a,
            Alpha0::Heuristic => {
                let ref_sq = match config.reference_norm_sq {
                    Some(v) => v,
                    None => config.gram_x.norm_sq(&config.constraint.embed(&center)?)?,
                };
                alpha0_heuristic(&data.data, &gram_y, model.intensity_scale, ref_sq, model.is_near_field())?
            }
        };
        Ok(Solver { model, data, config, gram_y, alpha0, center })
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha0 * self.config.r_alpha.powi(k as i32)
    }

    pub fn initial_state(&self) -> NewtonState<T> {
        NewtonState { k: 0, reduced: self.center.clone(), alpha: self.alpha0 }
    }

    pub fn embed(&self, r: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        self.config.constraint.embed(r)
    }

    /// `I - F(N)` at a linearization point.
    pub fn residual(&self, lin: &LinearizationPoint<T>) -> Result<Vec<T>> {
        let f = self.model.intensity(lin)?;
        Ok(self.data.data.iter().zip(&f.data).map(|(d, f)| *d - *f).collect())
    }

    fn x_gram(&self, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        let c = &self.config.constraint;
        c.adjoint(&self.config.gram_x.apply(&c.embed(v)?)?)
    }

    fn x_gram_inv(&self, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        let c = &self.config.constraint;
        c.adjoint(&self.config.gram_x.apply_inverse(&c.embed(v)?)?)
    }

    /// `embed^* A^* G_Y A embed v`.
    fn normal_op(&self, lin: &LinearizationPoint<T>, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        let c = &self.config.constraint;
        let av = self.model.derivative_apply(lin, &c.embed(v)?)?;
        let w = self.gram_y.apply(&av)?;
        c.adjoint(&self.model.derivative_adjoint_apply(lin, &w)?)
    }

    /// One regularized Newton step from `state` (whose linearization is `lin`).
    pub fn newton_step(&self, state: &NewtonState<T>, lin: &LinearizationPoint<T>) -> Result<(NewtonState<T>, CgResult<T>)> {
        let alpha = state.alpha;
        let c = &self.config.constraint;
        let res = self.residual(lin)?;
        let mut rhs = c.adjoint(&self.model.derivative_adjoint_apply(lin, &self.gram_y.apply(&res)?)?)?;
        let pull = self.x_gram(&self.center.sub(&state.reduced)?)?;
        axpy(&mut rhs, alpha, &pull);
        let tol = self.config.cg.rel_tol(alpha, self.alpha0);
        let cg = cg_solve(
            |v| {
                let mut m = self.normal_op(lin, v)?;
                axpy(&mut m, alpha, &self.x_gram(v)?);
                Ok(m)
            },
            |v| self.x_gram_inv(v),
            &rhs,
            tol,
            self.config.cg.max_iter,
        )?;
        let mut next = state.reduced.clone();
        axpy(&mut next, 1.0, &cg.x);
        let k = state.k + 1;
        Ok((NewtonState { k, reduced: next, alpha: self.alpha(k) }, cg))
    }

    pub fn run(&self) -> Result<RunOutput<T>> {
        let cfg = self.config;
        let truth = match &cfg.stop {
            StopRule::BestStop { truth } => Some(truth),
            _ => None,
        };
        let mut state = self.initial_state();
        let mut history: Vec<IterationRecord> = Vec::new();
        let mut residuals = Vec::new();
        let mut rhos = Vec::new();
        let mut best: Option<(f64, ObjectVolume<T>)> = None;
        loop {
            let n = self.embed(&state.reduced)?;
            let lin = self.model.linearize(&n)?;
            let res = self.residual(&lin)?;
            let rn = self.gram_y.norm_sq(&res)?.sqrt();
            if !rn.is_finite() {
                return Err(Error::NonFinite(format!("data residual at Newton step {}", state.k)));
            }
            let rho = truth.map(|t| n.relative_error(t)).transpose()?;
            residuals.push(rn);
            if let Some(r) = rho {
                rhos.push(r);
                if state.k >= cfg.min_newton && best.as_ref().is_none_or(|(b, _)| r < *b) {
                    best = Some((r, n.clone()));
                }
            }
            history.push(IterationRecord { k: state.k, alpha: state.alpha, data_residual: rn, cg_iters: 0, rho });
            if let Some(sel) = should_stop(&cfg.stop, &residuals, &rhos, cfg.max_newton, cfg.min_newton) {
                let volume = match (&cfg.stop, best) {
                    (StopRule::BestStop { .. }, Some((_, v))) => v,
                    _ => n,
                };
                return Ok(RunOutput { volume, selected: sel, alpha0: self.alpha0, history });
            }
            let (next, cg) = self.newton_step(&state, &lin)?;
            history.last_mut().expect("pushed above").cg_iters = cg.iterations;
            state = next;
        }
    }
}

pub fn run<T: Real>(model: &ForwardModel<T>, data: &IntensityData<T>, config: &SolverConfig<T>) -> Result<RunOutput<T>> {
    Solver::new(model, data, config)?.run()
}

/// CSV iteration log with header `k,alpha_k,data_residual,cg_iters,rho_k`.
pub fn write_log(mut out: impl Write, history: &[IterationRecord]) -> Result<()> {
    writeln!(out, "k,alpha_k,data_residual,cg_iters,rho_k")?;
    for h in history {
        let rho = h.rho.map(|r| format!("{r:.10e}")).unwrap_or_default();
        writeln!(out, "{},{:.10e},{:.10e},{},{}", h.k, h.alpha, h.data_residual, h.cg_iters, rho)?;
    }
    Ok(())
}
