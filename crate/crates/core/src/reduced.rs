//! Losses written directly in terms of the network output.
//!
//! At any critical point of the linear cross-entropy model the weights are
//! balanced, and the total regularization of a depth-`L` stack collapses to a
//! Schatten quasi-norm of `Z` with exponent `2/(L+1)`. The same reduction
//! applied to the MSE model with a last-layer nonlinearity yields a loss in
//! the pre-activation matrix `X = H_L`. This module evaluates both reduced
//! losses, optimizes the scale of fixed structures, and provides the closed
//! form threshold and rank predictions used to compare structures.

use serde::{Deserialize, Serialize};

use crate::construct::{BlockSpec, BlockVariant};
use crate::error::{DufmError, Result};
use crate::linalg::{self, simplex_etf, Matrix, Spectrum};
use crate::model::{fit_term_ce, probability_error, Activation};

pub mod search;

/// A `K x K` output frame together with its singular spectrum.
#[derive(Clone, Debug)]
pub struct StructureMatrix {
    pub z: Matrix,
    pub spectrum: Spectrum,
    pub rank: usize,
}

impl StructureMatrix {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.nrows() != z.ncols() || z.nrows() < 2 {
            return Err(DufmError::dim(format!(
                "structure matrix must be square with K >= 2, got {:?}",
                z.shape()
            )));
        }
        let spectrum = Spectrum::of(&z)?;
        let rank = spectrum.rank();
        Ok(StructureMatrix { z, spectrum, rank })
    }

    pub fn k(&self) -> usize {
        self.z.nrows()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.z.norm()
    }
}

/// Frames addressable by name: `dnc`, `lowrank-linear`, `lowrank-relu`, `identity`.
pub fn named_frame(name: &str, k: usize) -> Result<StructureMatrix> {
    let z = match name {
        "dnc" => simplex_etf(k)?,
        "lowrank-linear" => BlockSpec::new(k, 1.0, BlockVariant::Linear)?.x_bar,
        "lowrank-relu" => BlockSpec::new(k, 1.0, BlockVariant::Relu)?.x_bar,
        "identity" => Matrix::identity(k, k),
        _ => return Err(DufmError::param(format!("unknown frame '{name}'"))),
    };
    StructureMatrix::new(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedCeParams {
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
}

impl ReducedCeParams {
    pub fn new(k: usize, l: usize, lambda: f64) -> Result<Self> {
        if k < 2 {
            return Err(DufmError::dim(format!("K must be at least 2, got {k}")));
        }
        if l < 1 {
            return Err(DufmError::dim("L must be at least 1"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DufmError::param(format!("lambda must be positive, got {lambda}")));
        }
        Ok(ReducedCeParams { k, l, lambda })
    }

    /// Schatten exponent `2/(L+1)`.
    pub fn exponent(&self) -> f64 {
        2.0 / (self.l as f64 + 1.0)
    }

    /// Weight `(L+1) lambda / 2` in front of the quasi-norm.
    pub fn reg_weight(&self) -> f64 {
        0.5 * (self.l as f64 + 1.0) * self.lambda
    }
}

/// Fit and regularization parts of the reduced cross-entropy loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub fit: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.fit + self.reg
    }
}

fn check_frame(z: &StructureMatrix, p: &ReducedCeParams) -> Result<()> {
    if z.k() != p.k {
        return Err(DufmError::dim(format!("frame is {}x{} but K = {}", z.k(), z.k(), p.k)));
    }
    Ok(())
}

pub fn reduced_ce_parts(z: &StructureMatrix, p: &ReducedCeParams) -> Result<LossParts> {
    check_frame(z, p)?;
    Ok(LossParts {
        fit: fit_term_ce(&z.z)? / p.k as f64,
        reg: p.reg_weight() * z.spectrum.power_sum(p.exponent()),
    })
}

/// `(1/K) g(Z) + (L+1)(lambda/2) sum_i s_i^{2/(L+1)}`.
pub fn reduced_ce_loss(z: &StructureMatrix, p: &ReducedCeParams) -> Result<f64> {
    Ok(reduced_ce_parts(z, p)?.total())
}

/// Closed-form reduced loss of the collapsed frame `alpha * S`.
pub fn dnc_reduced_loss(alpha: f64, p: &ReducedCeParams) -> f64 {
    let kf = p.k as f64;
    ((kf - 1.0) * (-alpha).exp()).ln_1p() + p.reg_weight() * (kf - 1.0) * alpha.powf(p.exponent())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleOptimum {
    /// Minimizing multiple of the frame as given (not normalized).
    pub alpha_star: f64,
    pub loss_star: f64,
    pub fit_term: f64,
    pub reg_term: f64,
    /// The optimum is the zero output.
    pub zero_collapse: bool,
}

/// Scale profile of a unit-norm frame: value and derivative in `alpha`.
struct ScaleProfile<'a> {
    frame: &'a Matrix,
    k: f64,
    weight: f64,
    q: f64,
    power_sum: f64,
}

impl ScaleProfile<'_> {
    fn parts(&self, alpha: f64) -> LossParts {
        let fit = fit_term_ce(&(self.frame * alpha)).expect("finite frame") / self.k;
        let reg = if alpha == 0.0 {
            0.0
        } else {
            self.weight * alpha.powf(self.q) * self.power_sum
        };
        LossParts { fit, reg }
    }

    fn value(&self, alpha: f64) -> f64 {
        self.parts(alpha).total()
    }

    fn slope(&self, alpha: f64) -> f64 {
        let (_, m) = probability_error(&(self.frame * alpha)).expect("finite frame");
        let fit = m.component_mul(self.frame).sum() / self.k;
        fit + self.weight * self.q * alpha.powf(self.q - 1.0) * self.power_sum
    }
}

const GRID_LOG_MIN: f64 = -4.0;
const GRID_STEP: f64 = 0.05;
const GRID_POINTS: usize = 141;

/// Global minimizer of `alpha -> reduced_ce_loss(alpha * frame)` over `alpha >= 0`.
///
/// The frame is normalized to unit Frobenius norm, the profile is seeded on a
/// log grid plus `alpha = 0`, and the best grid cell is refined by bisection
/// on the derivative (golden section when the derivative does not bracket).
pub fn optimal_scale(frame: &StructureMatrix, p: &ReducedCeParams) -> Result<ScaleOptimum> {
    check_frame(frame, p)?;
    let norm = frame.norm();
    if norm == 0.0 {
        return Err(DufmError::param("scale optimization needs a nonzero frame"));
    }
    let unit = &frame.z / norm;
    let spec = frame.spectrum.scaled(1.0 / norm);
    let prof = ScaleProfile {
        frame: &unit,
        k: p.k as f64,
        weight: p.reg_weight(),
        q: p.exponent(),
        power_sum: spec.power_sum(p.exponent()),
    };

    let mut grid: Vec<f64> = Vec::with_capacity(GRID_POINTS + 1);
    grid.push(0.0);
    grid.extend((0..GRID_POINTS).map(|i| 10f64.powf(GRID_LOG_MIN + GRID_STEP * i as f64)));
    let values: Vec<f64> = grid.iter().map(|&a| prof.value(a)).collect();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }

    let mut alpha = 0.0;
    let mut value = values[0];
    if best > 0 {
        let lo = grid[best - 1];
        let mut hi = if best + 1 < grid.len() {
            grid[best + 1]
        } else {
            grid[best] * 2.0
        };
        // the grid can end while the profile still decreases
        while best + 1 == grid.len() && prof.value(hi) < prof.value(hi / 2.0) && hi < 1e12 {
            hi *= 2.0;
        }
        let refined = refine_minimum(&prof, lo, hi);
        let refined_value = prof.value(refined);
        if refined_value < value {
            alpha = refined;
            value = refined_value;
        }
        if values[best] < value {
            alpha = grid[best];
            value = values[best];
        }
    }
    let parts = prof.parts(alpha);
    Ok(ScaleOptimum {
        alpha_star: alpha / norm,
        loss_star: value,
        fit_term: parts.fit,
        reg_term: parts.reg,
        zero_collapse: alpha == 0.0,
    })
}

fn refine_minimum(prof: &ScaleProfile<'_>, lo: f64, hi: f64) -> f64 {
    let lo_probe = if lo == 0.0 { hi * 1e-12 } else { lo };
    if prof.slope(lo_probe) < 0.0 && prof.slope(hi) > 0.0 {
        let (mut a, mut b) = (lo_probe, hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if prof.slope(mid) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        return 0.5 * (a + b);
    }
    golden_section(|x| prof.value(x), lo, hi)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..300 {
        if (b - a).abs() <= 1e-15 * (1.0 + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `M[j][j] > M[i][j]` for every column `j` and row `i != j`.
pub fn is_diagonally_superior(m: &Matrix) -> bool {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return false;
    }
    let k = m.nrows();
    (0..k).all(|j| (0..k).all(|i| i == j || m[(j, j)] > m[(i, j)]))
}

/// Closed-form inequalities under which low-rank block structures beat the
/// collapsed solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Threshold {
    /// Linear model: `2^{2/(L+1)} < (2m - 1)/m` with `m = floor(K/2)`.
    T1,
    /// ReLU model, parity-dependent scale comparison of the block construction.
    T6,
}

impl Threshold {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Threshold::T1),
            "t6" => Ok(Threshold::T6),
            _ => Err(DufmError::param(format!("unknown threshold '{s}', expected t1 or t6"))),
        }
    }
}

pub fn threshold_check(t: Threshold, k: usize, l: usize) -> bool {
    let kf = k as f64;
    let lp1 = l as f64 + 1.0;
    match t {
        Threshold::T1 => {
            let m = (k / 2) as f64;
            m >= 1.0 && 2f64.powf(2.0 / lp1) < (2.0 * m - 1.0) / m
        }
        Threshold::T6 => {
            let shared = (kf - 1.0) * 2f64.powf((l as f64 - 3.0) / lp1);
            if k.is_multiple_of(2) {
                ((kf + 2.0) / kf).powf(3.0 / lp1) * shared >= kf + 2.0
            } else {
                shared * ((kf + 3.0) / (kf + 1.0)).powf(1.0 / lp1) * ((kf + 3.0) / kf).powf(2.0 / lp1) >= kf + 3.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub frame_id: String,
    pub rank: usize,
    pub alpha_star: f64,
    pub fit_term: f64,
    pub reg_term: f64,
    pub total: f64,
}

/// Scale-optimize every frame and sort by optimal loss (stable for ties).
pub fn compare_structures(frames: &[(String, StructureMatrix)], p: &ReducedCeParams) -> Result<Vec<ComparisonRow>> {
    let mut rows = frames
        .iter()
        .map(|(id, f)| {
            let opt = optimal_scale(f, p)?;
            Ok(ComparisonRow {
                frame_id: id.clone(),
                rank: f.rank,
                alpha_star: opt.alpha_star,
                fit_term: opt.fit_term,
                reg_term: opt.reg_term,
                total: opt.loss_star,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.total.total_cmp(&b.total));
    Ok(rows)
}

/// Per-depth optimal losses of two frames and the smallest depth from which
/// `a` never loses to `b` on the swept range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub depths: Vec<usize>,
    pub loss_a: Vec<f64>,
    pub loss_b: Vec<f64>,
    pub crossover: Option<usize>,
}

pub fn crossover_depth(
    a: &StructureMatrix,
    b: &StructureMatrix,
    lambda_at: impl Fn(usize) -> f64,
    depths: &[usize],
) -> Result<Crossover> {
    let mut loss_a = Vec::with_capacity(depths.len());
    let mut loss_b = Vec::with_capacity(depths.len());
    for &l in depths {
        let p = ReducedCeParams::new(a.k(), l, lambda_at(l))?;
        loss_a.push(optimal_scale(a, &p)?.loss_star);
        loss_b.push(optimal_scale(b, &p)?.loss_star);
    }
    let mut crossover = None;
    for i in (0..depths.len()).rev() {
        if loss_a[i] <= loss_b[i] {
            crossover = Some(depths[i]);
        } else {
            break;
        }
    }
    Ok(Crossover {
        depths: depths.to_vec(),
        loss_a,
        loss_b,
        crossover,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedMseParams {
    pub k: usize,
    pub d: usize,
    pub l: usize,
    pub lambda: f64,
    pub activation: Activation,
}

impl ReducedMseParams {
    pub fn new(k: usize, d: usize, l: usize, lambda: f64, activation: Activation) -> Result<Self> {
        if d < k || k < 1 {
            return Err(DufmError::dim(format!("need 1 <= K <= d, got K={k}, d={d}")));
        }
        if l < 2 {
            return Err(DufmError::dim("the MSE reduction needs L >= 2"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(DufmError::param(format!("lambda must be positive, got {lambda}")));
        }
        Ok(ReducedMseParams {
            k,
            d,
            l,
            lambda,
            activation,
        })
    }

    pub fn exponent(&self) -> f64 {
        2.0 / self.l as f64
    }
}

/// Smooth part `(1/L) sum_i 1/(sigma~_i^2 + K lambda)` with `sigma~` from `zeta(X)`.
pub fn reduced_mse_fit(x: &Matrix, p: &ReducedMseParams) -> Result<f64> {
    if x.shape() != (p.d, p.k) {
        return Err(DufmError::dim(format!(
            "X must be {}x{}, got {:?}",
            p.d,
            p.k,
            x.shape()
        )));
    }
    let kl = p.k as f64 * p.lambda;
    let act = linalg::singular_values(&p.activation.map(x))?;
    Ok(act.iter().map(|s| 1.0 / (s * s + kl)).sum::<f64>() / p.l as f64)
}

/// `(1/L) sum_i 1/(sigma~_i^2 + K lambda) + sum_i sigma_i^{2/L}`.
pub fn reduced_mse_loss(x: &Matrix, p: &ReducedMseParams) -> Result<f64> {
    let fit = reduced_mse_fit(x, p)?;
    Ok(fit + Spectrum::of(x)?.power_sum(p.exponent()))
}

/// Closed-form optimal classifier `zeta(H)^T [K lambda I + zeta(H) zeta(H)^T]^{-1}`.
pub fn mse_optimal_wl(h_l: &Matrix, lambda: f64, zeta: &Activation) -> Result<Matrix> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(DufmError::param(format!("lambda must be positive, got {lambda}")));
    }
    let (d, k) = h_l.shape();
    let y = zeta.map(h_l);
    linalg::ensure_finite(&y, "mse_optimal_wl")?;
    let a = Matrix::identity(d, d) * (k as f64 * lambda) + &y * y.transpose();
    let chol = a.cholesky().ok_or_else(|| DufmError::NumericFailure {
        context: "regularized Gram matrix is not positive definite".into(),
        input_hash: linalg::matrix_hash(h_l),
    })?;
    Ok(chol.solve(&y).transpose())
}

/// Smallest `r` with `binom(r + p - 1, p) >= K`.
pub fn hadamard_min_rank(k: usize, p: u32) -> Result<usize> {
    if k < 1 || p < 1 {
        return Err(DufmError::param("hadamard_min_rank needs K >= 1 and p >= 1"));
    }
    let mut r = 1usize;
    loop {
        if binomial(r + p as usize - 1, p as usize) >= k as u128 {
            return Ok(r);
        }
        r += 1;
    }
}

/// `n choose k`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Rank of the block diagonally superior construction, with the matrix itself.
#[derive(Clone, Debug)]
pub struct DsWitness {
    pub rank: usize,
    pub matrix: Matrix,
}

pub fn ds_rank_upper_bound(k: usize) -> Result<DsWitness> {
    let matrix = BlockSpec::new(k, 1.0, BlockVariant::Linear)?.x_bar;
    let rank = Spectrum::of(&matrix)?.rank();
    Ok(DsWitness { rank, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{balanced_factorization, build_dnc};
    use crate::linalg::gaussian_matrix;
    use crate::model::{loss, HyperParams, ModelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(k: usize, l: usize, lambda: f64) -> ReducedCeParams {
        ReducedCeParams::new(k, l, lambda).unwrap()
    }

    #[test]
    fn zero_frame_gives_log_k() {
        let z = StructureMatrix::new(Matrix::zeros(5, 5)).unwrap();
        assert_eq!(z.rank, 0);
        assert!((reduced_ce_loss(&z, &params(5, 2, 0.1)).unwrap() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dnc_and_block_closed_forms() {
        let p = params(4, 3, 0.02);
        for a in [0.3, 1.0, 2.0, 6.5] {
            let f = StructureMatrix::new(simplex_etf(4).unwrap() * a).unwrap();
            let want = (3.0 * (-a).exp()).ln_1p() + 6.0 * 0.02 * a.sqrt();
            assert!((reduced_ce_loss(&f, &p).unwrap() - want).abs() < 1e-12);
            assert!((dnc_reduced_loss(a, &p) - want).abs() < 1e-14);

            let b = named_frame("lowrank-linear", 4).unwrap();
            let fb = StructureMatrix::new(&b.z * a).unwrap();
            let want_b = (2.0 * (-a).exp() + (-2.0 * a).exp()).ln_1p() + 0.5 * 0.02 * 4.0 * 2.0 * (2.0 * a).sqrt();
            assert!((reduced_ce_loss(&fb, &p).unwrap() - want_b).abs() < 1e-12);
        }
    }

    #[test]
    fn reduced_matches_full_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (k, l) in [(3, 1), (4, 2), (5, 3)] {
            let z = gaussian_matrix(k, k, 2.0, &mut rng);
            let lam = 0.01;
            let frame = StructureMatrix::new(z.clone()).unwrap();
            let reduced = reduced_ce_loss(&frame, &params(k, l, lam)).unwrap();
            let stack = balanced_factorization(&z, l + 1, k + 1).unwrap();
            let full = loss(&stack, &ModelKind::LinearCe, &HyperParams::new(lam).unwrap()).unwrap();
            assert!((reduced - full).abs() <= 1e-10 * full.abs());
        }
    }

    #[test]
    fn optimal_scale_zero_collapse_above_critical() {
        let f = named_frame("dnc", 4).unwrap();
        let opt = optimal_scale(&f, &params(4, 3, 0.5)).unwrap();
        assert!(opt.zero_collapse);
        assert_eq!(opt.alpha_star, 0.0);
        assert!((opt.loss_star - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn optimal_scale_dnc_matches_stationary_root() {
        // on the simplex frame the interior optimum is a root of the stationary-scale equation
        let f = named_frame("dnc", 4).unwrap();
        let a3 = optimal_scale(&f, &params(4, 3, 1e-3)).unwrap();
        let a4 = optimal_scale(&f, &params(4, 3, 1e-4)).unwrap();
        assert!(!a3.zero_collapse && a3.alpha_star > 0.0);
        assert!(a4.alpha_star > a3.alpha_star);
        let root = crate::construct::solve_dnc_scale(4, 3, 1e-3).unwrap().large().unwrap();
        assert!((a3.alpha_star - root).abs() < 1e-8, "{} vs {root}", a3.alpha_star);
    }

    #[test]
    fn optimal_scale_is_scale_equivariant() {
        let f = named_frame("lowrank-linear", 6).unwrap();
        let p = params(6, 2, 1e-3);
        let base = optimal_scale(&f, &p).unwrap();
        for c in [0.01, 0.7, 3.0, 250.0] {
            let g = StructureMatrix::new(&f.z * c).unwrap();
            let o = optimal_scale(&g, &p).unwrap();
            assert!((o.alpha_star * c - base.alpha_star).abs() <= 1e-9 * base.alpha_star);
            assert!((o.loss_star - base.loss_star).abs() <= 1e-9 * base.loss_star.abs());
        }
    }

    #[test]
    fn diagonal_superiority() {
        assert!(is_diagonally_superior(&Matrix::identity(3, 3)));
        assert!(!is_diagonally_superior(&Matrix::zeros(3, 3)));
        assert!(is_diagonally_superior(&named_frame("lowrank-linear", 6).unwrap().z));
        assert!(is_diagonally_superior(&simplex_etf(5).unwrap()));
        let mut m = Matrix::identity(3, 3);
        m[(2, 0)] = 1.0;
        assert!(!is_diagonally_superior(&m));
    }

    #[test]
    fn threshold_examples() {
        assert!(threshold_check(Threshold::T1, 4, 3));
        assert!(!threshold_check(Threshold::T1, 4, 2));
        assert!(threshold_check(Threshold::T1, 6, 2));
        assert!(threshold_check(Threshold::T6, 14, 4));
        assert!(!threshold_check(Threshold::T6, 13, 4));
        assert!(threshold_check(Threshold::T6, 10, 5));
    }

    #[test]
    fn compare_ranks_and_orders() {
        let frames = vec![
            ("dnc".to_string(), named_frame("dnc", 4).unwrap()),
            ("lowrank-linear".to_string(), named_frame("lowrank-linear", 4).unwrap()),
        ];
        let deep = compare_structures(&frames, &params(4, 3, 1e-3)).unwrap();
        assert_eq!(deep[0].frame_id, "lowrank-linear");
        assert_eq!(deep[0].rank, 2);
        assert!(deep[1].total - deep[0].total > 1e-9);
        let shallow = compare_structures(&frames, &params(4, 1, 1e-3)).unwrap();
        assert_eq!(shallow[0].frame_id, "dnc");
        assert_eq!(shallow[0].rank, 3);
    }

    #[test]
    fn mse_reduced_examples() {
        let relu = ReducedMseParams::new(4, 6, 3, 0.2, Activation::Relu).unwrap();
        let v = reduced_mse_loss(&Matrix::zeros(6, 4), &relu).unwrap();
        assert!((v - 1.0 / (3.0 * 0.2)).abs() < 1e-14);

        let id = ReducedMseParams::new(3, 3, 2, 0.1, Activation::Identity).unwrap();
        let v = reduced_mse_loss(&Matrix::identity(3, 3), &id).unwrap();
        assert!((v - (3.0 / (2.0 * 1.3) + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn optimal_classifier_for_identity_features() {
        let w = mse_optimal_wl(&Matrix::identity(4, 4), 0.05, &Activation::Identity).unwrap();
        let want = Matrix::identity(4, 4) / (1.0 + 4.0 * 0.05);
        assert!((w - want).norm() < 1e-14);
        let w_big = mse_optimal_wl(&Matrix::identity(4, 4), 1e12, &Activation::Identity).unwrap();
        assert!(w_big.amax() < 1e-12);
    }

    #[test]
    fn hadamard_ranks() {
        assert_eq!(hadamard_min_rank(6, 2).unwrap(), 3);
        assert_eq!(hadamard_min_rank(10, 2).unwrap(), 4);
        for k in 1..30 {
            assert_eq!(hadamard_min_rank(k, 1).unwrap(), k);
        }
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(2, 3), 0);
    }

    #[test]
    fn ds_bound() {
        assert_eq!(ds_rank_upper_bound(4).unwrap().rank, 2);
        assert_eq!(ds_rank_upper_bound(5).unwrap().rank, 3);
        for k in 2..12 {
            let w = ds_rank_upper_bound(k).unwrap();
            assert_eq!(w.rank, k.div_ceil(2));
            assert!(is_diagonally_superior(&w.matrix));
        }
    }

    #[test]
    fn dnc_stack_reduced_consistency() {
        let stack = build_dnc(4, 5, 3, 2.0).unwrap();
        let full = loss(&stack, &ModelKind::LinearCe, &HyperParams::new(0.01).unwrap()).unwrap();
        assert!((full - dnc_reduced_loss(2.0, &params(4, 3, 0.01))).abs() < 1e-12);
    }
}
