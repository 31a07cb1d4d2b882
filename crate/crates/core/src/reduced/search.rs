//! Direct minimization of the reduced losses over the whole output matrix.
//!
//! Both reduced losses are a smooth term plus a Schatten quasi-norm penalty
//! `w * sum_i s_i^q`. We use proximal gradient descent: a gradient step on the
//! smooth term followed by the exact proximal map of the penalty, which acts
//! on singular values one at a time. For `q < 1` the scalar proximal problem
//! is nonconvex but one-dimensional, so it is solved exactly (see
//! [`schatten_prox_scalar`]). Small singular values are mapped to exactly zero,
//! which makes the rank of the iterates meaningful.
//!
//! Restarts are independent, seeded, and may run concurrently; the best
//! restart wins, ties going to the lowest restart index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{reduced_mse_fit, ReducedCeParams, ReducedMseParams};
use crate::error::{DufmError, Result};
use crate::linalg::{self, gaussian_matrix, Matrix, Spectrum};
use crate::model::{fit_term_ce, probability_error};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the objective changes by less than `tol * max(1, |F|)` in one step.
    pub tol: f64,
    /// Entry scales cycled through by the restarts.
    pub init_scales: Vec<f64>,
    pub initial_step: f64,
    pub max_step: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            restarts: 10,
            seed: 0,
            max_iters: 20_000,
            tol: 1e-15,
            init_scales: vec![0.3, 1.0, 3.0],
            initial_step: 1.0,
            max_step: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub restart: usize,
    pub loss: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: Matrix,
    pub loss: f64,
    pub best_restart: usize,
    pub spectrum: Spectrum,
    pub restarts: Vec<RestartOutcome>,
}

/// Exact minimizer of `0.5 (s - t)^2 + kappa s^q` over `s >= 0`, for `q in (0, 1]`.
///
/// For `q < 1` the derivative `s - t + kappa q s^{q-1}` is convex in `s` with
/// its minimum at `s0 = (kappa q (1 - q))^{1/(2-q)}`; a nonzero minimizer
/// exists only if the derivative is negative there, in which case it is the
/// larger root, and it must still beat `s = 0`.
pub fn schatten_prox_scalar(t: f64, kappa: f64, q: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if kappa <= 0.0 {
        return t;
    }
    if q >= 1.0 {
        return (t - kappa).max(0.0);
    }
    let deriv = |s: f64| s - t + kappa * q * s.powf(q - 1.0);
    let s0 = (kappa * q * (1.0 - q)).powf(1.0 / (2.0 - q));
    if s0 >= t || deriv(s0) >= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (s0, t);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    let h = |s: f64| 0.5 * (s - t) * (s - t) + kappa * s.powf(q);
    if h(s) < h(0.0) {
        s
    } else {
        0.0
    }
}

/// Proximal map of `kappa * sum_i s_i(Y)^q` at `Y`.
pub fn schatten_prox(y: &Matrix, kappa: f64, q: f64) -> Result<Matrix> {
    let f = linalg::svd(y)?;
    let mut left = f.left.clone();
    for (j, &s) in f.singular_values.iter().enumerate() {
        let shrunk = schatten_prox_scalar(s, kappa, q);
        left.column_mut(j).scale_mut(shrunk);
    }
    Ok(left * f.right.transpose())
}

/// Smooth part plus penalty weight and exponent.
trait Composite: Sync {
    fn shape(&self) -> (usize, usize);
    fn smooth(&self, x: &Matrix) -> Result<f64>;
    fn smooth_grad(&self, x: &Matrix) -> Result<Matrix>;
    fn weight(&self) -> f64;
    fn exponent(&self) -> f64;

    fn total(&self, x: &Matrix) -> Result<f64> {
        Ok(self.smooth(x)? + self.weight() * Spectrum::of(x)?.power_sum(self.exponent()))
    }
}

struct CeProblem(ReducedCeParams);

impl Composite for CeProblem {
    fn shape(&self) -> (usize, usize) {
        (self.0.k, self.0.k)
    }

    fn smooth(&self, x: &Matrix) -> Result<f64> {
        Ok(fit_term_ce(x)? / self.0.k as f64)
    }

    fn smooth_grad(&self, x: &Matrix) -> Result<Matrix> {
        Ok(probability_error(x)?.1 / self.0.k as f64)
    }

    fn weight(&self) -> f64 {
        self.0.reg_weight()
    }

    fn exponent(&self) -> f64 {
        self.0.exponent()
    }
}

struct MseProblem(ReducedMseParams);

impl Composite for MseProblem {
    fn shape(&self) -> (usize, usize) {
        (self.0.d, self.0.k)
    }

    fn smooth(&self, x: &Matrix) -> Result<f64> {
        reduced_mse_fit(x, &self.0)
    }

    /// With `Y = zeta(X)` and `A = Y^T Y + K lambda I`, the gradient of
    /// `(1/L) tr(A^{-1})` in `Y` is `-(2/L) Y A^{-2}`, chained through `zeta'`.
    fn smooth_grad(&self, x: &Matrix) -> Result<Matrix> {
        let p = &self.0;
        let y = p.activation.map(x);
        let a = y.transpose() * &y + Matrix::identity(p.k, p.k) * (p.k as f64 * p.lambda);
        let inv = a.try_inverse().ok_or_else(|| DufmError::NumericFailure {
            context: "regularized Gram matrix is singular".into(),
            input_hash: linalg::matrix_hash(x),
        })?;
        let g_y = &y * (&inv * &inv) * (-2.0 / p.l as f64);
        Ok(g_y.component_mul(&p.activation.map_derivative(x)))
    }

    fn weight(&self) -> f64 {
        1.0
    }

    fn exponent(&self) -> f64 {
        self.0.exponent()
    }
}

fn prox_gradient(problem: &dyn Composite, start: Matrix, opts: &SearchOptions) -> Result<(Matrix, f64, usize)> {
    let mut x = start;
    let mut f = problem.total(&x)?;
    let mut eta = opts.initial_step;
    let q = problem.exponent();
    let w = problem.weight();
    let mut iters = 0;
    for it in 0..opts.max_iters {
        iters = it + 1;
        let g = problem.smooth_grad(&x)?;
        let mut accepted = None;
        while eta >= 1e-14 {
            let trial = schatten_prox(&(&x - &g * eta), eta * w, q)?;
            let ft = problem.total(&trial)?;
            if ft <= f {
                accepted = Some((trial, ft));
                break;
            }
            eta *= 0.5;
        }
        let Some((next, fn_)) = accepted else { break };
        let change = f - fn_;
        x = next;
        f = fn_;
        if change < opts.tol * f.abs().max(1.0) {
            break;
        }
        eta = (eta * 1.2).min(opts.max_step);
    }
    Ok((x, f, iters))
}

fn run_restarts(problem: &dyn Composite, opts: &SearchOptions) -> Result<SearchResult> {
    if opts.restarts == 0 {
        return Err(DufmError::param("at least one restart is required"));
    }
    if opts.init_scales.is_empty() {
        return Err(DufmError::param("at least one initial scale is required"));
    }
    let (rows, cols) = problem.shape();
    let outcomes: Vec<Result<(Matrix, f64, usize)>> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let scale = opts.init_scales[rng.random_range(0..opts.init_scales.len())];
            let start = gaussian_matrix(rows, cols, scale, &mut rng);
            prox_gradient(problem, start, opts)
        })
        .collect();
    let mut best: Option<(usize, Matrix, f64)> = None;
    let mut restarts = Vec::with_capacity(outcomes.len());
    for (r, out) in outcomes.into_iter().enumerate() {
        let (x, f, iterations) = out?;
        restarts.push(RestartOutcome {
            restart: r,
            loss: f,
            iterations,
        });
        if best.as_ref().is_none_or(|(_, _, bf)| f < *bf) {
            best = Some((r, x, f));
        }
    }
    let (best_restart, best, loss) = best.expect("at least one restart");
    let spectrum = Spectrum::of(&best)?;
    Ok(SearchResult {
        best,
        loss,
        best_restart,
        spectrum,
        restarts,
    })
}

/// Best-of-restarts minimizer of the reduced cross-entropy loss over `Z`.
pub fn minimize_reduced_ce(p: &ReducedCeParams, opts: &SearchOptions) -> Result<SearchResult> {
    run_restarts(&CeProblem(*p), opts)
}

/// Best-of-restarts minimizer of the reduced MSE loss over `X = H_L`.
pub fn minimize_reduced_mse(p: &ReducedMseParams, opts: &SearchOptions) -> Result<SearchResult> {
    run_restarts(&MseProblem(p.clone()), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::reduced::{reduced_ce_loss, reduced_mse_loss, StructureMatrix};

    fn brute_prox(t: f64, kappa: f64, q: f64) -> f64 {
        let h = |s: f64| 0.5 * (s - t) * (s - t) + kappa * if s == 0.0 { 0.0 } else { s.powf(q) };
        let mut best = (0.0, h(0.0));
        for i in 1..=200_000 {
            let s = t * i as f64 / 200_000.0;
            if h(s) < best.1 {
                best = (s, h(s));
            }
        }
        best.0
    }

    #[test]
    fn scalar_prox_matches_grid_search() {
        for &(t, kappa, q) in &[
            (3.0, 0.5, 0.5),
            (1.0, 0.8, 0.5),
            (2.0, 0.3, 2.0 / 3.0),
            (0.4, 0.01, 0.25),
            (5.0, 2.0, 0.2),
            (1.5, 0.7, 1.0),
        ] {
            let exact = schatten_prox_scalar(t, kappa, q);
            let brute = brute_prox(t, kappa, q);
            assert!(
                (exact - brute).abs() <= 2.0 * t / 200_000.0,
                "t={t} kappa={kappa} q={q}: {exact} vs {brute}"
            );
        }
    }

    #[test]
    fn smooth_gradient_of_mse_matches_fd() {
        let p = ReducedMseParams::new(3, 4, 3, 0.05, Activation::HadamardPower(2)).unwrap();
        let prob = MseProblem(p);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = gaussian_matrix(4, 3, 1.0, &mut rng);
        let g = prob.smooth_grad(&x).unwrap();
        let mut fd = Matrix::zeros(4, 3);
        for i in 0..x.len() {
            let h = 1e-6;
            let mut up = x.clone();
            up[i] += h;
            let mut dn = x.clone();
            dn[i] -= h;
            fd[i] = (prob.smooth(&up).unwrap() - prob.smooth(&dn).unwrap()) / (2.0 * h);
        }
        assert!((&g - &fd).norm() <= 1e-7 * g.norm().max(1e-12));
    }

    #[test]
    fn ce_search_is_monotone_and_beats_start() {
        let p = ReducedCeParams::new(4, 2, 0.01).unwrap();
        let opts = SearchOptions {
            restarts: 3,
            max_iters: 500,
            ..SearchOptions::default()
        };
        let res = minimize_reduced_ce(&p, &opts).unwrap();
        let frame = StructureMatrix::new(res.best.clone()).unwrap();
        assert!((reduced_ce_loss(&frame, &p).unwrap() - res.loss).abs() < 1e-12);
        assert!(res.loss < 4f64.ln());
        let again = minimize_reduced_ce(&p, &opts).unwrap();
        assert_eq!(again.best, res.best);
    }

    #[test]
    fn mse_search_objective_is_consistent() {
        let p = ReducedMseParams::new(3, 4, 3, 0.01, Activation::Relu).unwrap();
        let opts = SearchOptions {
            restarts: 2,
            max_iters: 300,
            ..SearchOptions::default()
        };
        let res = minimize_reduced_mse(&p, &opts).unwrap();
        assert!((reduced_mse_loss(&res.best, &p).unwrap() - res.loss).abs() < 1e-12);
    }
}
