//! Reconstruction drivers: LS/FLS training of INRs, the nonlinear-constraint
//! ADMM scheme, image metrics and the Gram conditioning experiment.
//!
//! Iterations are counted in pairs of projector applications (one `P` and one
//! `Pᵀ`). A gradient step of the LS or FLS loss is one pair; in ADMM only the
//! CGLS x-update touches the projector, so its pixel-space INR fitting is free.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanGeometry;
use crate::inr::{init_inr, ArchKind, Architecture, FeatureMatrix, InrModel, PreparedGrid};
use crate::optim::{cgls_regularized, chambolle_pock_tv, AdamState, LrSchedule};
use crate::projector::FanProjector;
use crate::projector::{Compose, Image, LinearOperator};
use crate::scalar::{all_finite, norm, Real};
use crate::sino_filter::{FilterOperator, FilterPower};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `‖Px − y‖²`
    Ls,
    /// `(Px − y)ᵀ F (Px − y)`
    Fls,
}

/// `1/n ‖x − x*‖²`
pub fn mse<T: Real>(x: &Image<T>, x_star: &Image<T>) -> Result<f64> {
    if x.grid != x_star.grid {
        return Err(Error::dim("images live on different grids"));
    }
    Ok(mse_slices(&x.data, &x_star.data))
}

pub(crate) fn mse_slices<T: Real>(x: &[T], x_star: &[T]) -> f64 {
    let s: f64 = x
        .iter()
        .zip(x_star)
        .map(|(&a, &b)| {
            let d = (a - b).to_f64_lossy();
            d * d
        })
        .sum();
    s / x.len() as f64
}

#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub loss: T,
    pub grad: Vec<T>,
    /// `𝓔{f_θ}` at the evaluated parameters.
    pub image: Vec<T>,
}

/// Data-fit loss of the INR image and its gradient over θ.
///
/// Uses exactly one application each of `op` and its adjoint.
pub fn loss_and_grad<T: Real, A: LinearOperator<T>>(
    model: &InrModel<T>,
    grid: &PreparedGrid<T>,
    op: &A,
    y: &[T],
    kind: LossKind,
    filter: Option<&FilterOperator>,
) -> Result<LossEval<T>> {
    if op.cols() != grid.len() || op.rows() != y.len() {
        return Err(Error::dim(format!(
            "operator {}x{} does not fit {} pixels and {} measurements",
            op.rows(),
            op.cols(),
            grid.len(),
            y.len()
        )));
    }
    let (image, tape) = model.evaluate_with_tape(grid)?;
    let mut r = vec![T::zero(); y.len()];
    op.apply(&image, &mut r);
    r.iter_mut().zip(y).for_each(|(ri, &yi)| *ri -= yi);
    let (loss, weighted) = match kind {
        LossKind::Ls => (r.iter().fold(T::zero(), |a, &v| a + v * v), r),
        LossKind::Fls => {
            let f = filter.ok_or_else(|| Error::Config("FLS loss needs a ramp filter".into()))?;
            let mut fr = vec![T::zero(); r.len()];
            f.apply(&r, &mut fr);
            (r.iter().zip(&fr).fold(T::zero(), |a, (&u, &v)| a + u * v), fr)
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("{kind:?} loss is {loss}")));
    }
    let mut pixel_grad = vec![T::zero(); grid.len()];
    op.apply_adjoint(&weighted, &mut pixel_grad);
    let two = T::of(2.0);
    pixel_grad.iter_mut().for_each(|g| *g *= two);
    let grad = model.backprop_with(grid, tape.as_ref(), &pixel_grad)?;
    Ok(LossEval { loss, grad, image })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Projector application pairs spent so far.
    pub iter: usize,
    pub loss: f64,
    /// MSE of the reconstruction after `iter` pairs; NaN without ground truth.
    pub mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn final_mse(&self) -> Option<f64> {
        self.records.last().map(|r| r.mse)
    }

    /// Lowest MSE among records with `iter <= upto`.
    pub fn best_mse_until(&self, upto: usize) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.iter <= upto)
            .map(|r| r.mse)
            .fold(None, |b, m| Some(b.map_or(m, |b: f64| b.min(m))))
    }

    /// MSE of the last record at or before `iter`.
    pub fn mse_at(&self, iter: usize) -> Option<f64> {
        self.records.iter().rev().find(|r| r.iter <= iter).map(|r| r.mse)
    }

    /// `iter,loss,mse,seconds`; with `timing` off the seconds column is zero
    /// so that reruns are byte-identical.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::from("iter,loss,mse,seconds\n");
        for r in &self.records {
            let secs = if timing { r.seconds } else { 0.0 };
            let _ = writeln!(s, "{},{:e},{:e},{}", r.iter, r.loss, r.mse, secs);
        }
        s
    }
}

/// Full-batch Adam on the LS or FLS loss.
///
/// Record `t` holds the loss evaluated with the `t`-th projector pair and the
/// MSE of the image after the `t`-th update.
#[allow(clippy::too_many_arguments)]
pub fn train_inr<T: Real, A: LinearOperator<T>>(
    mut model: InrModel<T>,
    grid: &PreparedGrid<T>,
    op: &A,
    y: &[T],
    kind: LossKind,
    filter: Option<&FilterOperator>,
    schedule: &LrSchedule,
    iters: usize,
    ground_truth: Option<&[T]>,
) -> Result<(InrModel<T>, TrainLog)> {
    if iters == 0 {
        return Err(Error::Config("training needs at least one iteration".into()));
    }
    check_truth(grid, ground_truth)?;
    let start = Instant::now();
    let mut adam = AdamState::new(model.n_params());
    let mut log = TrainLog::default();
    let mut pending: Option<LogRecord> = None;
    let score = |img: &[T]| ground_truth.map_or(f64::NAN, |t| mse_slices(img, t));
    for t in 0..iters {
        let eval = loss_and_grad(&model, grid, op, y, kind, filter)?;
        if let Some(mut rec) = pending.take() {
            rec.mse = score(&eval.image);
            log.records.push(rec);
        }
        adam.step(&mut model.params, &eval.grad, T::of(schedule.lr(t)))?;
        pending = Some(LogRecord {
            iter: t + 1,
            loss: eval.loss.to_f64_lossy(),
            mse: f64::NAN,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let last = model.evaluate(grid)?;
    if !all_finite(&last) {
        return Err(Error::Numerical("training produced a non-finite image".into()));
    }
    if let Some(mut rec) = pending {
        rec.mse = score(&last);
        log.records.push(rec);
    }
    Ok((model, log))
}

fn check_truth<T: Real>(grid: &PreparedGrid<T>, truth: Option<&[T]>) -> Result<()> {
    match truth {
        Some(t) if t.len() != grid.len() => {
            Err(Error::dim(format!("ground truth has {} pixels, grid has {}", t.len(), grid.len())))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmResiduals {
    pub outer: usize,
    /// `‖x_{k+1} − q_{k+1}‖`
    pub primal: f64,
    /// `μ‖q_{k+1} − q_k‖`
    pub dual: f64,
}

#[derive(Debug, Clone)]
pub struct AdmmState<T> {
    pub x: Vec<T>,
    /// `𝓔{f_θ}` at the current parameters.
    pub q: Vec<T>,
    /// Scaled multipliers.
    pub u: Vec<T>,
    pub mu: T,
    /// `P x`, carried along so warm starts cost no extra projection.
    pub px: Vec<T>,
    pub history: Vec<AdmmResiduals>,
}

impl<T: Real> AdmmState<T> {
    pub fn residuals_csv(&self) -> String {
        let mut s = String::from("outer,primal,dual\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{:e},{:e}", r.outer, r.primal, r.dual);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmSettings {
    pub mu: f64,
    pub outer: usize,
    pub adam_iters: usize,
    pub adam_lr: f64,
    pub cgls_iters: usize,
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("ADMM penalty must be positive, got {}", self.mu)));
        }
        if self.outer == 0 || self.adam_iters == 0 || self.cgls_iters == 0 {
            return Err(Error::Config("ADMM iteration counts must be positive".into()));
        }
        if !(self.adam_lr > 0.0) {
            return Err(Error::Config("ADMM Adam learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-outer-iteration hook, called after the multiplier update.
pub type AdmmObserver<'a, T> = dyn FnMut(&AdmmState<T>, &InrModel<T>) + 'a;

/// Fits an INR to `y` by ADMM on `min ½‖Px − y‖²  s.t.  x = 𝓔{f_θ}`.
///
/// Starts from `q0 = 𝓔{f_θ0}`, `u0 = 0`, `x0 = 0`. Each outer iteration runs
/// CGLS on the x-subproblem (warm-started), Adam on the pixel-space fit
/// `‖𝓔{f_θ} − (x + u)‖²` with one Adam state kept across outer iterations,
/// then refreshes `q` and `u`. The log is indexed by cumulative CGLS iterations
/// and records `‖Px − y‖²` and the MSE of `q`.
#[allow(clippy::too_many_arguments)]
pub fn admm_reconstruct<T: Real, A: LinearOperator<T>>(
    mut model: InrModel<T>,
    grid: &PreparedGrid<T>,
    op: &A,
    y: &[T],
    settings: &AdmmSettings,
    ground_truth: Option<&[T]>,
    mut observer: Option<&mut AdmmObserver<'_, T>>,
) -> Result<(InrModel<T>, AdmmState<T>, TrainLog)> {
    settings.validate()?;
    check_truth(grid, ground_truth)?;
    if op.cols() != grid.len() || op.rows() != y.len() {
        return Err(Error::dim("ADMM operator does not match grid and data"));
    }
    let start = Instant::now();
    let n = grid.len();
    let mu = T::of(settings.mu);
    let q0 = model.evaluate(grid)?;
    let mut state = AdmmState {
        x: vec![T::zero(); n],
        q: q0,
        u: vec![T::zero(); n],
        mu,
        px: vec![T::zero(); op.rows()],
        history: Vec::with_capacity(settings.outer),
    };
    let mut adam = AdamState::new(model.n_params());
    let adam_lr = T::of(settings.adam_lr);
    let mut log = TrainLog::default();
    let mut matvecs = 0;
    for k in 0..settings.outer {
        let v: Vec<T> = state.q.iter().zip(&state.u).map(|(&q, &u)| q - u).collect();
        let sol = cgls_regularized(op, y, &v, mu, &state.x, Some(&state.px), settings.cgls_iters)?;
        matvecs += sol.iterations;
        if !all_finite(&sol.x) {
            return Err(Error::Numerical(format!("x-update diverged at outer iteration {k}")));
        }
        let target: Vec<T> = sol.x.iter().zip(&state.u).map(|(&x, &u)| x + u).collect();
        let backup = model.params.clone();
        for _ in 0..settings.adam_iters {
            let (img, tape) = model.evaluate_with_tape(grid)?;
            let upstream: Vec<T> = img.iter().zip(&target).map(|(&a, &b)| T::of(2.0) * (a - b)).collect();
            let g = model.backprop_with(grid, tape.as_ref(), &upstream)?;
            if let Err(e) = adam.step(&mut model.params, &g, adam_lr) {
                model.params = backup;
                return Err(e);
            }
        }
        let q_next = model.evaluate(grid)?;
        if !all_finite(&q_next) {
            return Err(Error::Numerical(format!("theta-update diverged at outer iteration {k}")));
        }
        let mut u_next = state.u.clone();
        for ((u, &x), &q) in u_next.iter_mut().zip(&sol.x).zip(&q_next) {
            *u = *u + x - q;
        }
        let primal = distance(&sol.x, &q_next);
        let dual = settings.mu * distance(&q_next, &state.q);
        let fit: f64 = sol
            .px
            .iter()
            .zip(y)
            .map(|(&p, &yy)| {
                let d = (p - yy).to_f64_lossy();
                d * d
            })
            .sum();
        state.x = sol.x;
        state.px = sol.px;
        state.q = q_next;
        state.u = u_next;
        state.history.push(AdmmResiduals { outer: k + 1, primal, dual });
        log.records.push(LogRecord {
            iter: matvecs,
            loss: fit,
            mse: ground_truth.map_or(f64::NAN, |t| mse_slices(&state.q, t)),
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(obs) = observer.as_mut() {
            obs(&state, &model);
        }
    }
    Ok((model, state, log))
}

fn distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// `σ_max / σ_min` of the dense matrix `op · Q`; `None` when rank-deficient.
pub fn operator_feature_condition<T: Real, A: LinearOperator<T>>(op: &A, q: &FeatureMatrix<T>) -> Option<f64> {
    assert_eq!(op.cols(), q.n, "operator domain must match the feature rows");
    let rows = op.rows();
    let mut b = DMatrix::<f64>::zeros(rows, q.width);
    let mut out = vec![T::zero(); rows];
    for i in 0..q.width {
        op.apply(&q.column(i), &mut out);
        for (r, v) in out.iter().enumerate() {
            b[(r, i)] = v.to_f64_lossy();
        }
    }
    let sv = b.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= RANK_TOLERANCE * max {
        return None;
    }
    Some(max / min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSample {
    pub seed: u64,
    /// `κ(PQ)`, infinite when rank-deficient.
    pub kappa_ls: f64,
    /// `κ(F^{1/2} P Q)`, infinite when rank-deficient.
    pub kappa_fls: f64,
}

impl ConditionSample {
    pub fn ratio(&self) -> f64 {
        if self.is_usable() {
            self.kappa_fls / self.kappa_ls
        } else {
            f64::NAN
        }
    }

    pub fn is_usable(&self) -> bool {
        self.kappa_ls.is_finite() && self.kappa_fls.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub arch: ArchKind,
    /// One entry per seed, rank-deficient ones included.
    pub samples: Vec<ConditionSample>,
}

impl ConditionReport {
    fn stats(values: impl Iterator<Item = f64>) -> (f64, f64) {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        if v.len() < 2 {
            return (mean, 0.0);
        }
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, var.sqrt())
    }

    pub fn usable(&self) -> impl Iterator<Item = &ConditionSample> {
        self.samples.iter().filter(|s| s.is_usable())
    }

    /// Seeds left out of the statistics because `PQ` or `F^{1/2}PQ` was
    /// numerically rank-deficient.
    pub fn excluded(&self) -> usize {
        self.samples.len() - self.usable().count()
    }

    /// Mean and sample standard deviation of `κ_FLS / κ_LS` on the operators.
    pub fn ratio_stats(&self) -> (f64, f64) {
        Self::stats(self.usable().map(|s| s.ratio()))
    }

    /// Same for the Gram matrices, where every κ is squared.
    pub fn gram_ratio_stats(&self) -> (f64, f64) {
        Self::stats(self.usable().map(|s| s.ratio() * s.ratio()))
    }

    /// `seed,kappa_ls,kappa_fls,ratio` rows followed by `#` summary lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,kappa_ls,kappa_fls,ratio\n");
        for c in &self.samples {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", c.seed, c.kappa_ls, c.kappa_fls, c.ratio());
        }
        let (m, sd) = self.ratio_stats();
        let (gm, gsd) = self.gram_ratio_stats();
        let _ = writeln!(s, "# arch={} seeds={} rank_deficient={}", self.arch, self.samples.len(), self.excluded());
        let _ = writeln!(s, "# operator ratio mean={m:e} std={sd:e}");
        let _ = writeln!(s, "# gram ratio mean={gm:e} std={gsd:e}");
        s
    }
}

/// κ of `PQ` and `F^{1/2}PQ` for freshly initialized networks, one per seed.
pub fn condition_ratio_experiment(
    arch: &Architecture,
    geom: &FanGeometry,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<ConditionReport> {
    let grid = PreparedGrid::<f64>::for_grid(arch, &geom.grid)?;
    let proj = FanProjector::new(geom.clone())?;
    let half = FilterOperator::new(geom, FilterPower::Half)?;
    let filtered = Compose { outer: half, inner: &proj };
    let mut report = ConditionReport { arch: arch.kind(), samples: Vec::new() };
    for seed in seeds {
        let model: InrModel<f64> = init_inr(arch, seed)?;
        let q = model.feature_matrix(&grid)?;
        report.samples.push(ConditionSample {
            seed,
            kappa_ls: operator_feature_condition(&proj, &q).unwrap_or(f64::INFINITY),
            kappa_fls: operator_feature_condition(&filtered, &q).unwrap_or(f64::INFINITY),
        });
    }
    Ok(report)
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct TvSweep<T> {
    pub lambda: f64,
    pub x: Vec<T>,
    /// `(λ, MSE)` for every candidate, in input order.
    pub scores: Vec<(f64, f64)>,
}

/// Runs the TV solver for each λ and keeps the lowest-MSE reconstruction.
pub fn tv_sweep<T: Real, A: LinearOperator<T>>(
    op: &A,
    n: usize,
    y: &[T],
    lambdas: &[f64],
    iters: usize,
    ground_truth: &[T],
) -> Result<TvSweep<T>> {
    if lambdas.is_empty() {
        return Err(Error::Config("TV sweep needs at least one λ".into()));
    }
    if ground_truth.len() != n * n {
        return Err(Error::dim("TV ground truth does not match the grid"));
    }
    let mut best: Option<(f64, f64, Vec<T>)> = None;
    let mut scores = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let out = chambolle_pock_tv(op, n, y, T::of(lam), iters)?;
        let m = mse_slices(&out.x, ground_truth);
        scores.push((lam, m));
        if best.as_ref().is_none_or(|b| m < b.1) {
            best = Some((lam, m, out.x));
        }
    }
    let (lambda, _, x) = best.unwrap();
    Ok(TvSweep { lambda, x, scores })
}

/// Relative distance `‖a − b‖ / ‖b‖`.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    norm(&diff).to_f64_lossy() / norm(b).to_f64_lossy()
}
