//! Second derivatives of the linear cross-entropy model.
//!
//! Parameters are flattened slot by slot (`H_1, W_1, ..., W_L`), each matrix
//! row-major, so entry `(a, b)` of a `rows x cols` slot sits at `a * cols + b`.
//!
//! With `A_{l+1} = W_L...W_{l+1}`, `B_{l-1} = W_{l-1}...W_1 H_1`, `h_y` the
//! `y`-th column of `B_{l-1}`, `p_y` the `y`-th softmax column and
//! `Lambda_y = diag(p_y) - p_y p_y^T`, the Hessian splits into
//!
//! * curvature blocks `(1/K) sum_y (A_{l+1}^T Lambda_y A_{r+1}) kron (h_y^{(l)} h_y^{(r)T})`,
//! * coupling blocks (`r < l`) with entries `(1/K) (A_{l+1}^T M B_{r-1}^T)_{ae} (W_{l-1}...W_{r+1})_{bc}`,
//!   where `M = P - I`, `(a, b)` indexes `W_l` and `(c, e)` indexes `W_r`,
//! * `lambda I` on the diagonal blocks.
//!
//! At the collapsed solution the curvature family scales like `alpha * lambda`
//! while the rest scales like `lambda`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::construct::{build_dnc, dnc_scale_rhs};
use crate::error::{DufmError, Result};
use crate::linalg::{simplex_etf, Matrix};
use crate::model::{chain_products, loss, probability_error, HyperParams, ModelKind, ParamStack};

/// Largest parameter count for which dense Hessians are assembled.
pub const DENSE_PARAM_LIMIT: usize = 20_000;

/// `(L+1) x (L+1)` grid of blocks; block `(l, r)` is `n_l x n_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlocks {
    pub shapes: Vec<(usize, usize)>,
    pub blocks: Vec<Vec<Matrix>>,
}

impl HessianBlocks {
    fn zeros(shapes: Vec<(usize, usize)>) -> Self {
        let blocks = shapes
            .iter()
            .map(|&(r1, c1)| shapes.iter().map(|&(r2, c2)| Matrix::zeros(r1 * c1, r2 * c2)).collect())
            .collect();
        HessianBlocks { shapes, blocks }
    }

    pub fn block(&self, l: usize, r: usize) -> &Matrix {
        &self.blocks[l][r]
    }

    pub fn dim(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.shapes.len());
        let mut acc = 0;
        for (r, c) in &self.shapes {
            off.push(acc);
            acc += r * c;
        }
        off
    }

    pub fn assemble(&self) -> Matrix {
        let n = self.dim();
        let off = self.offsets();
        let mut h = Matrix::zeros(n, n);
        for (l, row) in self.blocks.iter().enumerate() {
            for (r, b) in row.iter().enumerate() {
                h.view_mut((off[l], off[r]), b.shape()).copy_from(b);
            }
        }
        h
    }

    pub fn add(&self, other: &HessianBlocks) -> HessianBlocks {
        let mut out = self.clone();
        for (l, row) in out.blocks.iter_mut().enumerate() {
            for (r, b) in row.iter_mut().enumerate() {
                *b += &other.blocks[l][r];
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> HessianBlocks {
        let mut out = self.clone();
        for b in out.blocks.iter_mut().flat_map(|row| row.iter_mut()) {
            *b *= c;
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|row| row.iter())
            .map(|b| b.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Largest `||H_{lr} - H_{rl}^T||_F` over block pairs.
    pub fn symmetry_error(&self) -> f64 {
        let n = self.blocks.len();
        let mut worst: f64 = 0.0;
        for l in 0..n {
            for r in 0..n {
                worst = worst.max((&self.blocks[l][r] - self.blocks[r][l].transpose()).norm());
            }
        }
        worst
    }
}

fn guard(params: &ParamStack) -> Result<()> {
    let n = params.param_count();
    if n > DENSE_PARAM_LIMIT {
        return Err(DufmError::TooLarge {
            params: n,
            limit: DENSE_PARAM_LIMIT,
        });
    }
    Ok(())
}

fn require_linear(kind: &ModelKind) -> Result<()> {
    if *kind != ModelKind::LinearCe {
        return Err(DufmError::UnsupportedKind {
            op: "hessian",
            kind: kind.tag(),
        });
    }
    Ok(())
}

fn slot_shapes(params: &ParamStack) -> Vec<(usize, usize)> {
    params.mats().iter().map(|m| m.shape()).collect()
}

/// Curvature contribution of a single class column `y` (without the `1/K`).
pub fn class_curvature(params: &ParamStack, y: usize) -> Result<HessianBlocks> {
    guard(params)?;
    let (a, b) = chain_products(params);
    let z = &a[0] * params.h1();
    let (p, _) = probability_error(&z)?;
    Ok(class_curvature_with(params, &a, &b, &p, y))
}

fn class_curvature_with(params: &ParamStack, a: &[Matrix], b: &[Matrix], p: &Matrix, y: usize) -> HessianBlocks {
    let n = params.depth() + 1;
    let py = p.column(y).into_owned();
    let lam_y = Matrix::from_diagonal(&py) - &py * py.transpose();
    let mut out = HessianBlocks::zeros(slot_shapes(params));
    let left: Vec<Matrix> = (0..n).map(|l| a[l].transpose() * &lam_y).collect();
    let cols: Vec<DVector<f64>> = (0..n).map(|l| b[l].column(y).into_owned()).collect();
    for l in 0..n {
        for r in l..n {
            let outer = &cols[l] * cols[r].transpose();
            let blk = (&left[l] * &a[r]).kronecker(&outer);
            if r != l {
                out.blocks[r][l] = blk.transpose();
            }
            out.blocks[l][r] = blk;
        }
    }
    out
}

/// `(1/K) sum_y` of the per-class curvature blocks, summed in ascending `y`.
pub fn curvature_part(params: &ParamStack) -> Result<HessianBlocks> {
    guard(params)?;
    let (a, b) = chain_products(params);
    let z = &a[0] * params.h1();
    let (p, _) = probability_error(&z)?;
    let k = params.k();
    let mut acc = HessianBlocks::zeros(slot_shapes(params));
    for y in 0..k {
        acc = acc.add(&class_curvature_with(params, &a, &b, &p, y));
    }
    Ok(acc.scale(1.0 / k as f64))
}

/// Terms from the second derivative of `Z` itself, weighted by the error matrix.
pub fn coupling_part(params: &ParamStack) -> Result<HessianBlocks> {
    guard(params)?;
    let (a, b) = chain_products(params);
    let z = &a[0] * params.h1();
    let (_, m) = probability_error(&z)?;
    let k = params.k() as f64;
    let shapes = slot_shapes(params);
    let n = shapes.len();
    let mut out = HessianBlocks::zeros(shapes.clone());
    for r in 0..n {
        // mid = W_{l-1} ... W_{r+1}, grown one slot at a time
        let mut mid = Matrix::identity(shapes[r].0, shapes[r].0);
        for l in r + 1..n {
            if l > r + 1 {
                mid = params.w(l - 1) * &mid;
            }
            let g = a[l].transpose() * &m * b[r].transpose() / k;
            let (rl, cl) = shapes[l];
            let (rr, cr) = shapes[r];
            let mut blk = Matrix::zeros(rl * cl, rr * cr);
            for ai in 0..rl {
                for bi in 0..cl {
                    for ci in 0..rr {
                        let mbc = mid[(bi, ci)];
                        if mbc == 0.0 {
                            continue;
                        }
                        for ei in 0..cr {
                            blk[(ai * cl + bi, ci * cr + ei)] = g[(ai, ei)] * mbc;
                        }
                    }
                }
            }
            out.blocks[r][l] = blk.transpose();
            out.blocks[l][r] = blk;
        }
    }
    Ok(out)
}

fn ridge(shapes: &[(usize, usize)], lambda: f64) -> HessianBlocks {
    let mut out = HessianBlocks::zeros(shapes.to_vec());
    for (l, &(r, c)) in shapes.iter().enumerate() {
        out.blocks[l][l] = Matrix::identity(r * c, r * c) * lambda;
    }
    out
}

/// Exact analytic Hessian of the linear cross-entropy loss.
pub fn hessian_full_linear_ce(params: &ParamStack, kind: &ModelKind, hp: &HyperParams) -> Result<HessianBlocks> {
    require_linear(kind)?;
    let curv = curvature_part(params)?;
    let coup = coupling_part(params)?;
    Ok(curv.add(&coup).add(&ridge(&slot_shapes(params), hp.lambda)))
}

/// Curvature-only Hessian at the collapsed stack `build_dnc(K, d, L, alpha)`.
pub fn hessian_leading_order_dnc(k: usize, d: usize, l: usize, alpha: f64) -> Result<HessianBlocks> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(DufmError::param(format!("scale must be positive, got {alpha}")));
    }
    curvature_part(&build_dnc(k, d, l, alpha)?)
}

/// Central second differences of the loss, entry pair by entry pair.
pub fn finite_difference_hessian(params: &ParamStack, kind: &ModelKind, hp: &HyperParams, step: f64) -> Result<Matrix> {
    guard(params)?;
    let k = params.k();
    let d = params.d();
    let shapes = slot_shapes(params);
    let mut flat: Vec<f64> = Vec::with_capacity(params.param_count());
    for m in params.mats() {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                flat.push(m[(i, j)]);
            }
        }
    }
    let eval = |v: &[f64]| -> Result<f64> {
        let mut mats = Vec::with_capacity(shapes.len());
        let mut pos = 0;
        for &(r, c) in &shapes {
            mats.push(Matrix::from_row_slice(r, c, &v[pos..pos + r * c]));
            pos += r * c;
        }
        loss(&ParamStack::new(k, d, mats)?, kind, hp)
    };
    let n = flat.len();
    let mut h = Matrix::zeros(n, n);
    let mut v = flat.clone();
    for i in 0..n {
        for j in i..n {
            let (hi, hj) = (step * (1.0 + flat[i].abs()), step * (1.0 + flat[j].abs()));
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                v[i] = flat[i] + si * hi;
                v[j] += sj * hj;
                let out = eval(&v);
                v[i] = flat[i];
                v[j] = flat[j];
                out
            };
            let val =
                (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * hi * hj);
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSummary {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub near_zero_count: usize,
    pub tolerance: f64,
    /// Largest absolute eigenvalue.
    pub spectral_norm: f64,
    pub dimension: usize,
}

/// Ascending eigenvalues of the assembled symmetric matrix.
pub fn eigenvalues(h: &HessianBlocks) -> Result<Vec<f64>> {
    let n = h.dim();
    if n > DENSE_PARAM_LIMIT {
        return Err(DufmError::TooLarge {
            params: n,
            limit: DENSE_PARAM_LIMIT,
        });
    }
    let full = h.assemble();
    let sym = (&full + full.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

pub fn summarize_eigenvalues(ev: &[f64], tol: f64) -> EigenSummary {
    let min = ev.first().copied().unwrap_or(0.0);
    let max = ev.last().copied().unwrap_or(0.0);
    EigenSummary {
        min_eigenvalue: min,
        max_eigenvalue: max,
        near_zero_count: ev.iter().filter(|v| v.abs() <= tol).count(),
        tolerance: tol,
        spectral_norm: min.abs().max(max.abs()),
        dimension: ev.len(),
    }
}

pub fn psd_check(h: &HessianBlocks, tol: f64) -> Result<EigenSummary> {
    if tol.is_nan() || tol < 0.0 {
        return Err(DufmError::param("tolerance must be non-negative"));
    }
    Ok(summarize_eigenvalues(&eigenvalues(h)?, tol))
}

/// Norms of the two term families of the Hessian at a collapsed stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSplit {
    /// `|| lambda I + rho * coupling ||_F`
    pub lambda_part: f64,
    /// `rho * || curvature ||_F`
    pub alpha_lambda_part: f64,
    /// `alpha_lambda_part / lambda_part`
    pub ratio: f64,
    /// Detected scale of `Z = alpha S`, when the output has that form.
    pub alpha: Option<f64>,
    /// `lambda` over the stationary value at `alpha`; 1 on the stationary curve.
    pub rho: f64,
    pub structure_verified: bool,
}

/// Split the Hessian at a collapsed stack into its `O(lambda)` and
/// `O(alpha lambda)` families.
///
/// On the collapsed family the error matrix and class probabilities are
/// functions of `alpha` alone, and the stationary scale ties them to
/// `lambda` through `lambda = alpha^{(L-1)/(L+1)} / ((K-1) + e^alpha)`. Both
/// data-driven families are therefore rescaled by `rho = lambda / rhs(alpha)`,
/// which is 1 on stationary stacks and makes both parts homogeneous of degree
/// one in `lambda` at fixed `alpha`. If the output is not of the form
/// `alpha S`, the raw split is returned with `rho = 1` and the flag cleared.
pub fn scale_split(params: &ParamStack, hp: &HyperParams) -> Result<ScaleSplit> {
    let (a, _) = chain_products(params);
    let z = &a[0] * params.h1();
    let k = params.k();
    let alpha = z.trace() / (k as f64 - 1.0);
    let target = simplex_etf(k)? * alpha;
    let verified = alpha > 0.0 && (&z - &target).norm() <= 1e-8 * target.norm();
    let rho = if verified {
        hp.lambda / dnc_scale_rhs(k, params.depth(), alpha)
    } else {
        1.0
    };
    let curv = curvature_part(params)?;
    let coup = coupling_part(params)?;
    let lambda_part = coup.scale(rho).add(&ridge(&slot_shapes(params), hp.lambda)).frobenius();
    let alpha_lambda_part = rho * curv.frobenius();
    Ok(ScaleSplit {
        lambda_part,
        alpha_lambda_part,
        ratio: alpha_lambda_part / lambda_part,
        alpha: verified.then_some(alpha),
        rho,
        structure_verified: verified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::solve_dnc_scale;
    use crate::linalg::gaussian_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stack(k: usize, d: usize, l: usize, seed: u64) -> ParamStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats = (0..=l)
            .map(|i| {
                let (r, c) = ParamStack::expected_shape(k, d, l, i);
                gaussian_matrix(r, c, 1.0, &mut rng)
            })
            .collect();
        ParamStack::new(k, d, mats).unwrap()
    }

    #[test]
    fn full_hessian_matches_fd() {
        let s = random_stack(3, 3, 2, 4);
        let hp = HyperParams::new(0.05).unwrap();
        let h = hessian_full_linear_ce(&s, &ModelKind::LinearCe, &hp)
            .unwrap()
            .assemble();
        let fd = finite_difference_hessian(&s, &ModelKind::LinearCe, &hp, 1e-4).unwrap();
        assert!((&h - &fd).norm() <= 1e-4 * h.norm());
    }

    #[test]
    fn symmetric_blocks() {
        let s = random_stack(3, 4, 3, 6);
        let hp = HyperParams::new(0.01).unwrap();
        let h = hessian_full_linear_ce(&s, &ModelKind::LinearCe, &hp).unwrap();
        let full = h.assemble();
        assert!((&full - full.transpose()).norm() <= 1e-12 * full.norm());
        assert!(h.symmetry_error() <= 1e-12 * full.norm());
    }

    #[test]
    fn zero_stack_hessian() {
        let s = ParamStack::zeros(3, 4, 2).unwrap();
        let hp = HyperParams::new(0.3).unwrap();
        let h = hessian_full_linear_ce(&s, &ModelKind::LinearCe, &hp).unwrap();
        // every Z-Jacobian vanishes for L >= 2 at zero, and M multiplies a zero product
        let full = h.assemble();
        assert!((full - Matrix::identity(h.dim(), h.dim()) * 0.3).norm() < 1e-15);
    }

    #[test]
    fn per_class_sum_is_curvature() {
        let s = random_stack(4, 5, 2, 13);
        let curv = curvature_part(&s).unwrap();
        let mut acc: Option<HessianBlocks> = None;
        for y in 0..4 {
            let c = class_curvature(&s, y).unwrap();
            acc = Some(match acc {
                None => c,
                Some(a) => a.add(&c),
            });
        }
        let acc = acc.unwrap().scale(0.25);
        assert!((acc.assemble() - curv.assemble()).norm() <= 1e-12 * curv.frobenius().max(1.0));
    }

    #[test]
    fn leading_order_dnc_is_psd() {
        let alpha = solve_dnc_scale(4, 3, 0.01).unwrap().large().unwrap();
        let h = hessian_leading_order_dnc(4, 4, 3, alpha).unwrap();
        let sum = psd_check(&h, 1e-10).unwrap();
        assert!(sum.min_eigenvalue >= -1e-8 * sum.spectral_norm);
        // rank is at most K(K-1): the curvature factors through the K x K output
        assert!(sum.near_zero_count >= h.dim() - 12);
    }

    #[test]
    fn psd_identity() {
        let mut h = HessianBlocks::zeros(vec![(2, 2), (1, 3)]);
        h.blocks[0][0] = Matrix::identity(4, 4);
        h.blocks[1][1] = Matrix::identity(3, 3);
        let s = psd_check(&h, 1e-12).unwrap();
        assert_eq!(s.min_eigenvalue, 1.0);
        assert_eq!(s.max_eigenvalue, 1.0);
        assert_eq!(s.near_zero_count, 0);
    }

    #[test]
    fn kinds_and_size_guard() {
        let s = random_stack(3, 3, 2, 1);
        let hp = HyperParams::new(0.1).unwrap();
        assert!(matches!(
            hessian_full_linear_ce(&s, &ModelKind::ReluCe, &hp),
            Err(DufmError::UnsupportedKind { .. })
        ));
        let big = ParamStack::zeros(10, 60, 7).unwrap();
        assert!(matches!(curvature_part(&big), Err(DufmError::TooLarge { .. })));
    }

    #[test]
    fn scale_split_behaviour() {
        let split = |lam: f64| {
            let a = solve_dnc_scale(4, 3, lam).unwrap().large().unwrap();
            scale_split(&build_dnc(4, 4, 3, a).unwrap(), &HyperParams::new(lam).unwrap()).unwrap()
        };
        let (s2, s3, s4) = (split(1e-2), split(1e-3), split(1e-4));
        assert!(s2.structure_verified && (s2.rho - 1.0).abs() < 1e-9);
        assert!(s3.ratio > s2.ratio && s4.ratio > s3.ratio);
        assert!(s3.lambda_part < s2.lambda_part && s4.lambda_part < s3.lambda_part);
        assert!(s3.alpha_lambda_part < s2.alpha_lambda_part && s4.alpha_lambda_part < s3.alpha_lambda_part);

        let stack = build_dnc(4, 4, 3, 3.0).unwrap();
        let one = scale_split(&stack, &HyperParams::new(0.01).unwrap()).unwrap();
        let two = scale_split(&stack, &HyperParams::new(0.02).unwrap()).unwrap();
        assert!((two.lambda_part - 2.0 * one.lambda_part).abs() < 1e-12 * two.lambda_part);
        assert!((two.alpha_lambda_part - 2.0 * one.alpha_lambda_part).abs() < 1e-12 * two.alpha_lambda_part);

        let flagged = scale_split(&random_stack(3, 3, 2, 2), &HyperParams::new(0.01).unwrap()).unwrap();
        assert!(!flagged.structure_verified);
        assert_eq!(flagged.rho, 1.0);
    }
}
