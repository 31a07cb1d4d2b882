//! Closed-form parameter stacks: balanced factorizations of a target output,
//! collapsed (simplex) solutions, low-rank block solutions for the linear and
//! ReLU models, and the stationary-scale equation of the collapsed solution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DufmError, Result};
use crate::linalg::{self, embed, rect_diag, Matrix, DEFAULT_RELATIVE_ZERO_TOL};
use crate::model::ParamStack;

/// How the free `d x d` orthogonal factors between layers are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FreeFactors {
    #[default]
    Identity,
    /// Haar-random orthogonal factors from a seeded generator.
    Random(u64),
}

impl FreeFactors {
    fn generate(self, d: usize, count: usize) -> Vec<Matrix> {
        match self {
            FreeFactors::Identity => vec![Matrix::identity(d, d); count],
            FreeFactors::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count).map(|_| linalg::random_orthogonal(d, &mut rng)).collect()
            }
        }
    }
}

/// Factors `F_1 (d x n), F_2..F_{N-1} (d x d), F_N (m x d)` with
/// `F_N ... F_1 = target`, every factor carrying singular values `s_i^{1/N}`
/// and adjacent factors sharing singular vectors.
///
/// Singular values below the default relative tolerance are set to zero
/// before taking roots, so numerically rank-deficient targets stay exactly
/// rank-deficient in every factor.
pub fn balanced_factors(target: &Matrix, num_factors: usize, d: usize, free: FreeFactors) -> Result<Vec<Matrix>> {
    if num_factors < 2 {
        return Err(DufmError::param("balanced factorization needs at least two factors"));
    }
    let (m, n) = target.shape();
    if d < m.max(n) {
        return Err(DufmError::dim(format!(
            "width d={d} is smaller than the target dimensions {m}x{n}"
        )));
    }
    let f = linalg::svd(target)?;
    let top = f.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = DEFAULT_RELATIVE_ZERO_TOL * top;
    let root: Vec<f64> = f
        .singular_values
        .iter()
        .map(|&s| {
            if s > cutoff {
                s.powf(1.0 / num_factors as f64)
            } else {
                0.0
            }
        })
        .collect();
    let r = root.len();
    let o = free.generate(d, num_factors - 1);
    // d x r block holding the roots on its leading diagonal
    let core = rect_diag(d, r, &root);
    let core_sq = rect_diag(d, d, &root);

    let mut out = Vec::with_capacity(num_factors);
    out.push(&o[0] * &core * f.right.transpose());
    for j in 1..num_factors - 1 {
        out.push(&o[j] * &core_sq * o[j - 1].transpose());
    }
    out.push(&f.left * core.transpose() * o[num_factors - 2].transpose());
    Ok(out)
}

/// Balanced stack with `num_factors - 1` weight matrices whose output is `z` (K x K).
pub fn balanced_factorization(z: &Matrix, num_factors: usize, d: usize) -> Result<ParamStack> {
    balanced_factorization_with(z, num_factors, d, FreeFactors::Identity)
}

pub fn balanced_factorization_with(z: &Matrix, num_factors: usize, d: usize, free: FreeFactors) -> Result<ParamStack> {
    if z.nrows() != z.ncols() {
        return Err(DufmError::dim("target output must be square"));
    }
    let k = z.nrows();
    let mats = balanced_factors(z, num_factors, d, free)?;
    ParamStack::new(k, d, mats)
}

/// Collapsed solution `Z = alpha * S` written through an explicit
/// diagonalizer `Q` of the simplex ETF and free factors `U_0..U_{L-1}`.
#[derive(Clone, Debug)]
pub struct DncSpec {
    pub k: usize,
    pub d: usize,
    pub l: usize,
    pub alpha: f64,
    pub q: Matrix,
    pub free: Vec<Matrix>,
}

impl DncSpec {
    pub fn new(k: usize, d: usize, l: usize, alpha: f64, free: FreeFactors) -> Result<Self> {
        if d < k {
            return Err(DufmError::dim(format!("width d={d} is smaller than K={k}")));
        }
        if l < 1 {
            return Err(DufmError::dim("L must be at least 1"));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(DufmError::param(format!("scale must be non-negative, got {alpha}")));
        }
        Ok(DncSpec {
            k,
            d,
            l,
            alpha,
            q: linalg::simplex_diagonalizer(k)?,
            free: free.generate(d, l),
        })
    }

    pub fn build(&self) -> Result<ParamStack> {
        let (k, d, l) = (self.k, self.d, self.l);
        let sigma = self.alpha.powf(1.0 / (l + 1) as f64);
        let mut diag = vec![sigma; k];
        diag[k - 1] = 0.0;
        let core = rect_diag(d, k, &diag);
        let core_sq = rect_diag(d, d, &diag);
        let u = &self.free;
        let mut mats = Vec::with_capacity(l + 1);
        mats.push(&u[0] * &core * self.q.transpose());
        for j in 1..l {
            mats.push(&u[j] * &core_sq * u[j - 1].transpose());
        }
        mats.push(&self.q * core.transpose() * u[l - 1].transpose());
        ParamStack::new(k, d, mats)
    }
}

pub fn build_dnc(k: usize, d: usize, l: usize, alpha: f64) -> Result<ParamStack> {
    DncSpec::new(k, d, l, alpha, FreeFactors::Identity)?.build()
}

/// Which odd-K completion to use for the block templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockVariant {
    /// Trailing diagonal entry 1 (linear model).
    Linear,
    /// Trailing diagonal entry 2 (ReLU model).
    Relu,
}

/// Templates of the low-rank block solutions.
///
/// `x_bar` has `[[1, -1], [-1, 1]]` blocks on the diagonal; `y_bar` is the
/// all-ones pattern on the paired indices. Both satisfy `X Y = Y X = 0`.
#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub k: usize,
    pub scale: f64,
    pub variant: BlockVariant,
    pub x_bar: Matrix,
    pub y_bar: Matrix,
}

impl BlockSpec {
    pub fn new(k: usize, scale: f64, variant: BlockVariant) -> Result<Self> {
        if k < 2 {
            return Err(DufmError::dim(format!("block templates need K >= 2, got {k}")));
        }
        let m = k / 2;
        let mut x_bar = Matrix::zeros(k, k);
        for b in 0..m {
            let i = 2 * b;
            x_bar[(i, i)] = 1.0;
            x_bar[(i + 1, i + 1)] = 1.0;
            x_bar[(i, i + 1)] = -1.0;
            x_bar[(i + 1, i)] = -1.0;
        }
        let mut y_bar = Matrix::zeros(k, k);
        y_bar.view_mut((0, 0), (2 * m, 2 * m)).fill(1.0);
        if !k.is_multiple_of(2) {
            x_bar[(k - 1, k - 1)] = match variant {
                BlockVariant::Linear => 1.0,
                BlockVariant::Relu => 2.0,
            };
        }
        Ok(BlockSpec {
            k,
            scale,
            variant,
            x_bar,
            y_bar,
        })
    }

    pub fn output(&self) -> Matrix {
        &self.x_bar * self.scale
    }
}

/// Low-rank output `beta * X_bar` realized by a balanced stack of depth `L`.
pub fn build_lowrank_linear(k: usize, d: usize, l: usize, beta: f64) -> Result<ParamStack> {
    if d < k {
        return Err(DufmError::dim(format!("width d={d} is smaller than K={k}")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(DufmError::param(format!("scale must be non-negative, got {beta}")));
    }
    let spec = BlockSpec::new(k, beta, BlockVariant::Linear)?;
    balanced_factorization(&spec.output(), l + 1, d)
}

/// Scales of the ReLU-compatible block solution as functions of `psi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReluBlockScales {
    /// Coefficient on `Y_bar` in the interior weights.
    pub chi: f64,
    /// Coefficient on `X_bar` in the classifier.
    pub psi_last: f64,
    /// Coefficient of `H_2 = phi_2 (X_bar + Y_bar)`.
    pub phi2: f64,
}

impl ReluBlockScales {
    pub fn new(k: usize, psi: f64) -> Self {
        let kf = k as f64;
        if k.is_multiple_of(2) {
            ReluBlockScales {
                chi: 2.0 * psi / kf,
                psi_last: ((kf + 2.0) / kf).sqrt() * psi,
                phi2: (kf + 2.0) / kf * psi * psi,
            }
        } else {
            ReluBlockScales {
                chi: 2.0 * psi / (kf - 1.0),
                psi_last: ((kf + 3.0) / (kf + 1.0)).sqrt() * psi,
                phi2: (kf + 3.0) / kf * psi * psi,
            }
        }
    }
}

/// `c(K, L)` with `Z = c * psi^{L+1} * X_bar` for the ReLU block solution.
pub fn relu_output_coefficient(k: usize, l: usize) -> f64 {
    let kf = k as f64;
    let p = 2f64.powi(l as i32 - 1);
    if k.is_multiple_of(2) {
        p * ((kf + 2.0) / kf).powf(1.5)
    } else {
        p * ((kf + 3.0) / (kf + 1.0)).sqrt() * ((kf + 3.0) / kf)
    }
}

/// Block solution whose intermediate features are entrywise non-negative, so
/// ReLU leaves them unchanged. Every parameter matrix has the same Frobenius norm.
pub fn build_lowrank_relu(k: usize, d: usize, l: usize, psi: f64) -> Result<ParamStack> {
    if d < k {
        return Err(DufmError::dim(format!("width d={d} is smaller than K={k}")));
    }
    if l < 2 {
        return Err(DufmError::dim("the ReLU block solution needs L >= 2"));
    }
    if !(psi > 0.0 && psi.is_finite()) {
        return Err(DufmError::param(format!("scale must be positive, got {psi}")));
    }
    let spec = BlockSpec::new(k, psi, BlockVariant::Relu)?;
    let sc = ReluBlockScales::new(k, psi);

    // H_2 = phi_2 V V^T with V = [pair differences | ones on the pairs | sqrt(2) e_K if K is odd].
    // V has exactly representable entries, so the zero pattern of H_2 survives rounding.
    let m = k / 2;
    let cols = m + 1 + k % 2;
    let mut v = Matrix::zeros(k, cols);
    for b in 0..m {
        v[(2 * b, b)] = 1.0;
        v[(2 * b + 1, b)] = -1.0;
        v[(2 * b, m)] = 1.0;
        v[(2 * b + 1, m)] = 1.0;
    }
    if !k.is_multiple_of(2) {
        v[(k - 1, m + 1)] = 2f64.sqrt();
    }
    let root = sc.phi2.sqrt();
    let w1 = embed(&(&v * root), d, d);
    let h1 = embed(&(v.transpose() * root), d, k);

    let interior = embed(&(&spec.x_bar * psi + &spec.y_bar * sc.chi), d, d);
    let last = embed(&(&spec.x_bar * sc.psi_last), k, d);

    let mut mats = Vec::with_capacity(l + 1);
    mats.push(h1);
    mats.push(w1);
    for _ in 2..l {
        mats.push(interior.clone());
    }
    mats.push(last);
    ParamStack::new(k, d, mats)
}

/// Positive solutions of `lambda = alpha^{(L-1)/(L+1)} / ((K-1) + e^alpha)`,
/// the scale at which the collapsed solution is stationary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRoots {
    pub lambda: f64,
    pub k: usize,
    pub l: usize,
    /// Ascending.
    pub roots: Vec<f64>,
    /// Maximizer of the right-hand side (0 for `L = 1`, where it is decreasing).
    pub critical_alpha: f64,
    /// Supremum of the right-hand side; no root exists above it.
    pub critical_lambda: f64,
}

impl ScaleRoots {
    pub fn large(&self) -> Option<f64> {
        self.roots.last().copied()
    }

    pub fn small(&self) -> Option<f64> {
        if self.roots.len() == 2 {
            self.roots.first().copied()
        } else {
            None
        }
    }
}

/// Right-hand side of the stationary-scale equation.
pub fn dnc_scale_rhs(k: usize, l: usize, alpha: f64) -> f64 {
    let p = (l as f64 - 1.0) / (l as f64 + 1.0);
    let denom = (k as f64 - 1.0) + alpha.exp();
    if p == 0.0 {
        1.0 / denom
    } else {
        alpha.powf(p) / denom
    }
}

/// Bisect a sign change of `f` on `[lo, hi]` down to adjacent floats.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let f_lo = f(lo);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if f(lo).abs() <= f(hi).abs() {
        lo
    } else {
        hi
    }
}

/// Smallest power-of-two multiple of `start` at which `f` changes sign from `f(start)`.
fn expand_bracket(start: f64, f: &impl Fn(f64) -> f64) -> Result<f64> {
    let s0 = f(start) > 0.0;
    let mut hi = start.max(1.0);
    for _ in 0..1100 {
        hi *= 2.0;
        let v = f(hi);
        if v.is_nan() {
            break;
        }
        if (v > 0.0) != s0 {
            return Ok(hi);
        }
    }
    Err(DufmError::NumericFailure {
        context: "could not bracket the stationary scale".into(),
        input_hash: start.to_bits(),
    })
}

pub fn solve_dnc_scale(k: usize, l: usize, lambda: f64) -> Result<ScaleRoots> {
    if k < 2 {
        return Err(DufmError::dim(format!("K must be at least 2, got {k}")));
    }
    if l < 1 {
        return Err(DufmError::dim("L must be at least 1"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(DufmError::param(format!("lambda must be positive, got {lambda}")));
    }
    let c = k as f64 - 1.0;
    let resid = |a: f64| dnc_scale_rhs(k, l, a) - lambda;

    if l == 1 {
        let critical_lambda = 1.0 / k as f64;
        let mut roots = Vec::new();
        if lambda < critical_lambda {
            let hi = expand_bracket(0.0, &resid)?;
            roots.push(bisect(0.0, hi, resid));
        }
        return Ok(ScaleRoots {
            lambda,
            k,
            l,
            roots,
            critical_alpha: 0.0,
            critical_lambda,
        });
    }

    // the maximizer solves p (K-1) = (alpha - p) e^alpha, with the right side increasing past p
    let p = (l as f64 - 1.0) / (l as f64 + 1.0);
    let crit_eq = |a: f64| (a - p) * a.exp() - p * c;
    let hi = expand_bracket(p, &crit_eq)?;
    let critical_alpha = bisect(p, hi, crit_eq);
    let critical_lambda = dnc_scale_rhs(k, l, critical_alpha);

    let mut roots = Vec::new();
    if lambda < critical_lambda {
        roots.push(bisect(0.0, critical_alpha, resid));
        let hi = expand_bracket(critical_alpha, &resid)?;
        roots.push(bisect(critical_alpha, hi, resid));
    } else if lambda == critical_lambda {
        roots.push(critical_alpha);
    }
    Ok(ScaleRoots {
        lambda,
        k,
        l,
        roots,
        critical_alpha,
        critical_lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, relative_error, simplex_etf, singular_values};
    use crate::model::{output, ModelKind};

    #[test]
    fn factorization_of_simplex() {
        let s = simplex_etf(4).unwrap();
        let stack = balanced_factorization(&s, 4, 6).unwrap();
        assert!(relative_error(&output(&stack, &ModelKind::LinearCe), &s) < 1e-12);
        for l in 1..4 {
            let sv = singular_values(stack.w(l)).unwrap();
            for (i, v) in sv.iter().enumerate() {
                let want = if i < 3 { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
            let lhs = stack.w(l).transpose() * stack.w(l);
            let rhs = stack.w(l - 1) * stack.w(l - 1).transpose();
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn factorization_of_rank_one() {
        let mut z = Matrix::zeros(3, 3);
        z[(0, 0)] = 16.0;
        let stack = balanced_factorization(&z, 4, 3).unwrap();
        for m in stack.mats() {
            let sv = singular_values(m).unwrap();
            assert!((sv[0] - 2.0).abs() < 1e-12);
            assert!(sv[1].abs() < 1e-12);
        }
        let reg = 0.5 * stack.squared_norm();
        assert!((reg - 0.5 * 4.0 * 16f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn factorization_with_random_factors_and_rectangular_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = gaussian_matrix(6, 3, 1.0, &mut rng);
        let fs = balanced_factors(&t, 3, 6, FreeFactors::Random(5)).unwrap();
        assert_eq!(fs[0].shape(), (6, 3));
        assert_eq!(fs[1].shape(), (6, 6));
        assert_eq!(fs[2].shape(), (6, 6));
        let prod = &fs[2] * &fs[1] * &fs[0];
        assert!(relative_error(&prod, &t) < 1e-12);
        assert!(balanced_factors(&t, 3, 5, FreeFactors::Identity).is_err());
    }

    #[test]
    fn dnc_output_and_spectrum() {
        for (k, d, l, a) in [(4, 4, 3, 2.0), (3, 7, 1, 0.5), (5, 6, 4, 3.3)] {
            let stack = build_dnc(k, d, l, a).unwrap();
            let z = output(&stack, &ModelKind::LinearCe);
            assert!((&z - simplex_etf(k).unwrap() * a).norm() < 1e-10);
            for m in stack.mats() {
                let sv = singular_values(m).unwrap();
                let sigma = a.powf(1.0 / (l + 1) as f64);
                for (i, v) in sv.iter().enumerate() {
                    let want = if i < k - 1 { sigma } else { 0.0 };
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
        let zero = build_dnc(4, 5, 2, 0.0).unwrap();
        assert_eq!(output(&zero, &ModelKind::LinearCe), Matrix::zeros(4, 4));
        assert!(build_dnc(5, 4, 2, 1.0).is_err());
    }

    #[test]
    fn dnc_with_random_free_factors() {
        let spec = DncSpec::new(4, 7, 3, 1.7, FreeFactors::Random(2)).unwrap();
        let z = output(&spec.build().unwrap(), &ModelKind::LinearCe);
        assert!((z - simplex_etf(4).unwrap() * 1.7).norm() < 1e-10);
    }

    #[test]
    fn block_template_identities() {
        for k in [4, 6, 8] {
            let b = BlockSpec::new(k, 1.0, BlockVariant::Relu).unwrap();
            let (x, y) = (&b.x_bar, &b.y_bar);
            assert_eq!(x * y, Matrix::zeros(k, k));
            assert_eq!(y * x, Matrix::zeros(k, k));
            assert_eq!(x * x, x * 2.0);
            assert_eq!(y * y, y * k as f64);
            assert_eq!(x.norm_squared(), 2.0 * k as f64);
        }
        for k in [5, 7, 9] {
            let b = BlockSpec::new(k, 1.0, BlockVariant::Relu).unwrap();
            let (x, y) = (&b.x_bar, &b.y_bar);
            assert_eq!(x * y, Matrix::zeros(k, k));
            assert_eq!(x * x, x * 2.0);
            assert_eq!(y * y, y * (k - 1) as f64);
            assert_eq!(x.norm_squared(), 2.0 * (k + 1) as f64);
            assert_eq!(y.norm_squared(), ((k - 1) * (k - 1)) as f64);
        }
    }

    #[test]
    fn lowrank_linear_spectra() {
        let z4 = output(&build_lowrank_linear(4, 5, 3, 1.0).unwrap(), &ModelKind::LinearCe);
        let s4 = singular_values(&z4).unwrap();
        for (v, w) in s4.iter().zip([2.0, 2.0, 0.0, 0.0]) {
            assert!((v - w).abs() < 1e-12);
        }
        let z5 = output(&build_lowrank_linear(5, 5, 2, 1.0).unwrap(), &ModelKind::LinearCe);
        let s5 = singular_values(&z5).unwrap();
        for (v, w) in s5.iter().zip([2.0, 2.0, 1.0, 0.0, 0.0]) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_block_equal_norms() {
        for (k, l) in [(4, 2), (4, 4), (6, 3), (5, 3), (7, 4)] {
            let psi = 0.8;
            let stack = build_lowrank_relu(k, k + 2, l, psi).unwrap();
            let kf = k as f64;
            let want = if k.is_multiple_of(2) {
                2.0 * (kf + 2.0)
            } else {
                2.0 * (kf + 3.0)
            } * psi
                * psi;
            for m in stack.mats() {
                assert!((m.norm_squared() - want).abs() < 1e-10 * want, "K={k} L={l}");
            }
            let z = output(&stack, &ModelKind::ReluCe);
            let spec = BlockSpec::new(k, 1.0, BlockVariant::Relu).unwrap();
            let closed = &spec.x_bar * (relu_output_coefficient(k, l) * psi.powi(l as i32 + 1));
            assert!(relative_error(&z, &closed) < 1e-12);
        }
        assert!(build_lowrank_relu(4, 4, 1, 1.0).is_err());
    }

    #[test]
    fn relu_block_closed_form_even_k4_l4() {
        let stack = build_lowrank_relu(4, 4, 4, 1.0).unwrap();
        let z = output(&stack, &ModelKind::ReluCe);
        let coeff = 8.0 * 1.5f64.powf(1.5);
        assert!((coeff - 14.696_938_456_699_067).abs() < 1e-12);
        let spec = BlockSpec::new(4, 1.0, BlockVariant::Relu).unwrap();
        assert!(relative_error(&z, &(&spec.x_bar * coeff)) < 1e-12);
    }

    #[test]
    fn scale_roots_k4_l3() {
        let r = solve_dnc_scale(4, 3, 0.01).unwrap();
        assert_eq!(r.roots.len(), 2);
        assert!((r.roots[0] - 0.001_601_282_308_858_239_2).abs() < 1e-12);
        assert!((r.roots[1] - 5.439_022_900_349_490_5).abs() < 1e-10);
        for a in &r.roots {
            assert!((dnc_scale_rhs(4, 3, *a) - 0.01).abs() <= 1e-12);
        }
        assert!((r.critical_alpha - 1.033_590_916_216_347_5).abs() < 1e-10);
        assert!((r.critical_lambda - 0.174_949_550_489_916_12).abs() < 1e-12);
    }

    #[test]
    fn scale_roots_above_critical_and_small_lambda() {
        assert!(solve_dnc_scale(4, 3, 0.2).unwrap().roots.is_empty());
        let big: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&lam| solve_dnc_scale(4, 3, lam).unwrap().large().unwrap())
            .collect();
        assert!(big[0] < big[1] && big[1] < big[2]);
        assert!((big[1] - 7.942_824_726_711_679).abs() < 1e-9);
        assert!((big[2] - 10.380_197_190_242_127).abs() < 1e-9);
    }

    #[test]
    fn scale_roots_depth_one() {
        let r = solve_dnc_scale(4, 1, 0.1).unwrap();
        assert_eq!(r.roots.len(), 1);
        assert!((dnc_scale_rhs(4, 1, r.roots[0]) - 0.1).abs() < 1e-14);
        assert!(solve_dnc_scale(4, 1, 0.25).unwrap().roots.is_empty());
    }
}
