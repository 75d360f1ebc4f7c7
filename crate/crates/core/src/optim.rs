//! Adam, regularized CGLS and the Chambolle–Pock TV solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::LinearOperator;
use crate::scalar::{axpy, dot, norm, norm_sq, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: T) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam state has {} entries, params {}, grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient entry {i} at adam step {}", self.t + 1)));
        }
        self.t += 1;
        let one = T::one();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = one - b1.powi(self.t as i32);
        let c2 = one - b2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut [T], grad: &[T], lr: T) -> Result<()> {
    state.step(params, grad, lr)
}

/// Step learning-rate schedule: `tau0` before `drop_at`, `tau0 / drop_factor` from then on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub tau0: f64,
    pub drop_at: usize,
    pub drop_factor: f64,
}

impl LrSchedule {
    pub fn constant(tau0: f64) -> Self {
        LrSchedule { tau0, drop_at: usize::MAX, drop_factor: 1.0 }
    }

    /// Half the budget at `tau0`, the rest at a tenth of it.
    pub fn halves(tau0: f64, iters: usize) -> Self {
        LrSchedule { tau0, drop_at: iters / 2, drop_factor: 10.0 }
    }

    /// Rate for the zero-based iteration `t`.
    pub fn lr(&self, t: usize) -> f64 {
        if t < self.drop_at {
            self.tau0
        } else {
            self.tau0 / self.drop_factor
        }
    }
}

#[derive(Debug, Clone)]
pub struct CglsOutcome<T> {
    pub x: Vec<T>,
    /// `P x` for the returned iterate, maintained without extra products.
    pub px: Vec<T>,
    /// `‖(PᵀP + μI) x_j − (Pᵀy + μv)‖` for the iterate entering iteration `j`.
    pub normal_residuals: Vec<f64>,
    /// Stacked least-squares residual `‖[P; √μ I] x − [y; √μ v]‖` after iteration `j`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Set when a zero-curvature search direction stopped the solve early.
    pub breakdown: bool,
}

/// CGLS on `[P; √μ I] x ≈ [y; √μ v]`, warm-started at `x0`.
///
/// Each iteration applies `Pᵀ` once then `P` once. Pass `px0 = P x0` to avoid
/// an extra forward product when `x0` is nonzero.
#[allow(clippy::too_many_arguments)]
pub fn cgls_regularized<T: Real, A: LinearOperator<T>>(
    op: &A,
    y: &[T],
    v: &[T],
    mu: T,
    x0: &[T],
    px0: Option<&[T]>,
    iters: usize,
) -> Result<CglsOutcome<T>> {
    let (m, n) = (op.rows(), op.cols());
    if y.len() != m || v.len() != n || x0.len() != n {
        return Err(Error::dim(format!(
            "cgls shapes: operator {m}x{n}, y {}, v {}, x0 {}",
            y.len(),
            v.len(),
            x0.len()
        )));
    }
    if iters == 0 {
        return Err(Error::Config("cgls needs at least one iteration".into()));
    }
    if !(mu >= T::zero() && mu.is_finite()) {
        return Err(Error::Config(format!("cgls penalty must be non-negative, got {mu}")));
    }
    let root_mu = mu.sqrt();
    let mut x = x0.to_vec();
    let mut px = match px0 {
        Some(p) if p.len() == m => p.to_vec(),
        Some(p) => return Err(Error::dim(format!("px0 has {} entries, expected {m}", p.len()))),
        None if x0.iter().all(|&v| v == T::zero()) => vec![T::zero(); m],
        None => {
            let mut p = vec![T::zero(); m];
            op.apply(x0, &mut p);
            p
        }
    };
    // stacked residual r = [y − Px; √μ (v − x)]
    let mut r_top: Vec<T> = y.iter().zip(&px).map(|(&a, &b)| a - b).collect();
    let mut r_bot: Vec<T> = v.iter().zip(&x).map(|(&a, &b)| root_mu * (a - b)).collect();
    let mut s = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    let mut q_top = vec![T::zero(); m];
    let mut gamma_prev = T::zero();
    let mut out = CglsOutcome {
        x: Vec::new(),
        px: Vec::new(),
        normal_residuals: Vec::with_capacity(iters),
        residuals: Vec::with_capacity(iters),
        iterations: 0,
        breakdown: false,
    };
    for it in 0..iters {
        op.apply_adjoint(&r_top, &mut s);
        axpy(root_mu, &r_bot, &mut s);
        let gamma = norm_sq(&s);
        out.normal_residuals.push(gamma.sqrt().to_f64_lossy());
        if it == 0 {
            p.copy_from_slice(&s);
        } else {
            let beta = gamma / gamma_prev;
            for (pi, &si) in p.iter_mut().zip(&s) {
                *pi = si + beta * *pi;
            }
        }
        op.apply(&p, &mut q_top);
        out.iterations += 1;
        let delta = norm_sq(&q_top) + mu * norm_sq(&p);
        if !(delta > T::zero()) {
            // zero curvature: either converged (s = 0) or a degenerate direction
            out.breakdown = gamma > T::zero();
            out.residuals.push((norm_sq(&r_top) + norm_sq(&r_bot)).sqrt().to_f64_lossy());
            break;
        }
        let alpha = gamma / delta;
        if !alpha.is_finite() {
            return Err(Error::Numerical(format!("cgls step became {alpha} at iteration {it}")));
        }
        axpy(alpha, &p, &mut x);
        axpy(alpha, &q_top, &mut px);
        axpy(-alpha, &q_top, &mut r_top);
        axpy(-alpha * root_mu, &p, &mut r_bot);
        out.residuals.push((norm_sq(&r_top) + norm_sq(&r_bot)).sqrt().to_f64_lossy());
        gamma_prev = gamma;
    }
    out.x = x;
    out.px = px;
    Ok(out)
}

/// Forward-difference image gradient with reflexive boundaries; output is
/// `[dx..., dy...]`.
pub fn gradient2d<T: Real>(x: &[T], n: usize, out: &mut [T]) {
    let (gx, gy) = out.split_at_mut(n * n);
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            gx[i] = if c + 1 < n { x[i + 1] - x[i] } else { T::zero() };
            gy[i] = if r + 1 < n { x[i + n] - x[i] } else { T::zero() };
        }
    }
}

/// Adjoint of [`gradient2d`] (negative divergence).
pub fn gradient2d_adjoint<T: Real>(g: &[T], n: usize, out: &mut [T]) {
    let (gx, gy) = g.split_at(n * n);
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let mut v = T::zero();
            if c + 1 < n {
                v -= gx[i];
            }
            if c > 0 {
                v += gx[i - 1];
            }
            if r + 1 < n {
                v -= gy[i];
            }
            if r > 0 {
                v += gy[i - n];
            }
            out[i] = v;
        }
    }
}

/// Isotropic total variation.
pub fn total_variation<T: Real>(x: &[T], n: usize) -> T {
    let mut g = vec![T::zero(); 2 * n * n];
    gradient2d(x, n, &mut g);
    let (gx, gy) = g.split_at(n * n);
    gx.iter().zip(gy).fold(T::zero(), |a, (&u, &v)| a + (u * u + v * v).sqrt())
}

/// `½‖Px − y‖² + λ TV(x)`
pub fn tv_objective<T: Real, A: LinearOperator<T>>(op: &A, n: usize, x: &[T], y: &[T], lambda: T) -> T {
    let mut px = vec![T::zero(); op.rows()];
    op.apply(x, &mut px);
    let fit: T = px.iter().zip(y).fold(T::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
    T::of(0.5) * fit + lambda * total_variation(x, n)
}

/// Largest singular value of `[P; ∇]` by power iteration on `PᵀP + ∇ᵀ∇`.
pub fn stacked_operator_norm<T: Real, A: LinearOperator<T>>(op: &A, n: usize, iters: usize) -> T {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7f4a_7c15);
    let mut x: Vec<T> = (0..n * n).map(|_| T::of(rng.random_range(0.5..1.5))).collect();
    let mut px = vec![T::zero(); op.rows()];
    let mut g = vec![T::zero(); 2 * n * n];
    let mut a = vec![T::zero(); n * n];
    let mut b = vec![T::zero(); n * n];
    let mut lam = T::zero();
    for _ in 0..iters {
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        op.apply(&x, &mut px);
        op.apply_adjoint(&px, &mut a);
        gradient2d(&x, n, &mut g);
        gradient2d_adjoint(&g, n, &mut b);
        for (ai, &bi) in a.iter_mut().zip(&b) {
            *ai += bi;
        }
        lam = dot(&x, &a);
        std::mem::swap(&mut x, &mut a);
    }
    lam.max(T::zero()).sqrt()
}

#[derive(Debug, Clone)]
pub struct TvOutcome<T> {
    pub x: Vec<T>,
    pub step: T,
    pub operator_norm: T,
}

/// Power-iteration steps used to size the primal-dual steps.
const POWER_ITERS: usize = 100;

/// Chambolle–Pock for `min ½‖Px − y‖² + λ TV(x)` with `σ = τ = 0.99 / ‖[P; ∇]‖`.
pub fn chambolle_pock_tv<T: Real, A: LinearOperator<T>>(
    op: &A,
    n: usize,
    y: &[T],
    lambda: T,
    iters: usize,
) -> Result<TvOutcome<T>> {
    if !(lambda >= T::zero() && lambda.is_finite()) {
        return Err(Error::Config(format!("TV weight must be non-negative, got {lambda}")));
    }
    if iters == 0 {
        return Err(Error::Config("TV solver needs at least one iteration".into()));
    }
    if op.cols() != n * n || op.rows() != y.len() {
        return Err(Error::dim("TV solver operator does not match image or data size"));
    }
    let l = stacked_operator_norm(op, n, POWER_ITERS);
    let step = T::of(0.99) / l;
    let (sigma, tau) = (step, step);
    let npix = n * n;
    let mut x = vec![T::zero(); npix];
    let mut xbar = x.clone();
    let mut p = vec![T::zero(); y.len()];
    let mut q = vec![T::zero(); 2 * npix];
    let mut kx = vec![T::zero(); y.len()];
    let mut gx = vec![T::zero(); 2 * npix];
    let mut kt = vec![T::zero(); npix];
    let mut gt = vec![T::zero(); npix];
    let one = T::one();
    for it in 0..iters {
        op.apply(&xbar, &mut kx);
        for ((pi, &ki), &yi) in p.iter_mut().zip(&kx).zip(y) {
            *pi = (*pi + sigma * (ki - yi)) / (one + sigma);
        }
        gradient2d(&xbar, n, &mut gx);
        if lambda > T::zero() {
            let (qx, qy) = q.split_at_mut(npix);
            let (gxx, gxy) = gx.split_at(npix);
            for i in 0..npix {
                let a = qx[i] + sigma * gxx[i];
                let b = qy[i] + sigma * gxy[i];
                let scale = lambda / lambda.max((a * a + b * b).sqrt());
                qx[i] = a * scale;
                qy[i] = b * scale;
            }
        }
        op.apply_adjoint(&p, &mut kt);
        gradient2d_adjoint(&q, n, &mut gt);
        for i in 0..npix {
            let next = x[i] - tau * (kt[i] + gt[i]);
            xbar[i] = next + (next - x[i]);
            x[i] = next;
        }
        if it % 64 == 0 && !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("TV iterate diverged at iteration {it}")));
        }
    }
    Ok(TvOutcome { x, step, operator_norm: l })
}
