//! Collapse metrics, balancedness, singular-value decay across depth,
//! the ReLU global-mean ratio check, and solution-space dimension counts.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{DufmError, Result};
use crate::linalg::{self, Matrix, Spectrum, DEFAULT_RELATIVE_ZERO_TOL};
use crate::model::{chain_products, ForwardTrace, ParamStack};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcMetrics {
    /// `trace(Sigma_W Sigma_B^+) / K`.
    pub nc1: f64,
    /// Largest relative deviation of a centered class-mean norm from the average norm.
    pub nc2_norm_dev: f64,
    /// Largest deviation of a pairwise cosine from `-1/(K-1)`.
    pub nc2_angle_dev: f64,
    /// `|| W^T/||W||_F - M/||M||_F ||_F` with `M` the centered class means.
    pub nc3: f64,
}

fn unit_or_zero(m: &Matrix) -> Matrix {
    let n = m.norm();
    if n > 0.0 {
        m / n
    } else {
        Matrix::zeros(m.nrows(), m.ncols())
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix with the shared relative cutoff.
fn pseudo_inverse(a: &Matrix) -> Result<Matrix> {
    let f = linalg::svd(a)?;
    let top = f.singular_values.first().copied().unwrap_or(0.0);
    let mut left = f.left.clone();
    for (j, &s) in f.singular_values.iter().enumerate() {
        let inv = if s > DEFAULT_RELATIVE_ZERO_TOL * top && s > 0.0 {
            1.0 / s
        } else {
            0.0
        };
        left.column_mut(j).scale_mut(inv);
    }
    Ok(f.right * left.transpose())
}

/// Collapse metrics of features `h` (d x N) with class `labels[i]` for column `i`
/// and classifier `w` (K x d).
pub fn nc_metrics(h: &Matrix, labels: &[usize], w: &Matrix) -> Result<NcMetrics> {
    let (d, n) = h.shape();
    let k = w.nrows();
    if k < 2 {
        return Err(DufmError::dim("collapse metrics need at least two classes"));
    }
    if w.ncols() != d {
        return Err(DufmError::dim(format!(
            "classifier is {:?} but features have {d} rows",
            w.shape()
        )));
    }
    if labels.len() != n {
        return Err(DufmError::InvalidLabels(format!(
            "{} labels for {n} feature columns",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&c| c >= k) {
        return Err(DufmError::InvalidLabels(format!("label {bad} out of range for K={k}")));
    }
    let mut counts = vec![0usize; k];
    let mut means = Matrix::zeros(d, k);
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        let mut col = means.column_mut(c);
        col += h.column(i);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(DufmError::InvalidLabels(format!("class {empty} has no columns")));
    }
    for (c, &cnt) in counts.iter().enumerate() {
        means.column_mut(c).unscale_mut(cnt as f64);
    }
    let global: DVector<f64> = means.column_mean();
    let mut centered = means.clone();
    for mut col in centered.column_iter_mut() {
        col -= &global;
    }

    let mut within = Matrix::zeros(d, d);
    for (i, &c) in labels.iter().enumerate() {
        let dev = h.column(i) - means.column(c);
        within += &dev * dev.transpose();
    }
    within /= n as f64;
    let between = &centered * centered.transpose() / k as f64;
    let nc1 = ((within * pseudo_inverse(&between)?).trace() / k as f64).max(0.0);

    let norms: Vec<f64> = centered.column_iter().map(|c| c.norm()).collect();
    let avg = norms.iter().sum::<f64>() / k as f64;
    let nc2_norm_dev = if avg > 0.0 {
        norms.iter().map(|v| (v - avg).abs() / avg).fold(0.0, f64::max)
    } else {
        0.0
    };
    let target = -1.0 / (k as f64 - 1.0);
    let mut nc2_angle_dev: f64 = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let cos = if norms[a] > 0.0 && norms[b] > 0.0 {
                centered.column(a).dot(&centered.column(b)) / (norms[a] * norms[b])
            } else {
                0.0
            };
            nc2_angle_dev = nc2_angle_dev.max((cos - target).abs());
        }
    }
    let nc3 = (unit_or_zero(&w.transpose()) - unit_or_zero(&centered)).norm();
    Ok(NcMetrics {
        nc1,
        nc2_norm_dev,
        nc2_angle_dev,
        nc3,
    })
}

/// Labels `0..K` for a single sample per class.
pub fn one_per_class(k: usize) -> Vec<usize> {
    (0..k).collect()
}

/// Metrics at every split of a linear stack: features `H_l` against the
/// classifier `W_L ... W_l`, for `l = 1..=L`.
pub fn layer_nc_metrics(params: &ParamStack) -> Result<Vec<NcMetrics>> {
    let (a, b) = chain_products(params);
    let labels = one_per_class(params.k());
    (1..=params.depth())
        .map(|l| nc_metrics(&b[l], &labels, &a[l - 1]))
        .collect()
}

/// `max_l ||W_l^T W_l - W_{l-1} W_{l-1}^T||_F / (1 + ||W_l^T W_l||_F)` with `W_0 = H_1`.
pub fn balancedness_residual(params: &ParamStack) -> f64 {
    (1..=params.depth())
        .map(|l| {
            let gram = params.w(l).transpose() * params.w(l);
            let prev = params.w(l - 1) * params.w(l - 1).transpose();
            (&gram - prev).norm() / (1.0 + gram.norm())
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayKind {
    Zero,
    SuperExp,
    Exp,
    Persistent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayClass {
    pub kind: DecayKind,
    /// Slope of the linear fit of `log s` against `L`.
    pub slope: f64,
    /// Leading coefficient of the quadratic fit.
    pub quad: f64,
    /// Coefficient of determination of the linear fit.
    pub r2: f64,
}

impl DecayClass {
    /// Exponential rate `-slope` when classified as `Exp`.
    pub fn rate(&self) -> Option<f64> {
        (self.kind == DecayKind::Exp).then_some(-self.slope)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayThresholds {
    /// A slope above `-slope` counts as persistent.
    pub slope: f64,
    /// A quadratic coefficient at or below `-quad` counts as faster than exponential.
    pub quad: f64,
    /// Fit quality expected of an exponential decay; reported, not enforced.
    pub r2: f64,
}

impl Default for DecayThresholds {
    fn default() -> Self {
        DecayThresholds {
            slope: 0.05,
            quad: 0.01,
            r2: 0.9,
        }
    }
}

pub fn decay_classify(spectra: &BTreeMap<usize, Spectrum>) -> Result<Vec<DecayClass>> {
    decay_classify_with(spectra, &DecayThresholds::default())
}

/// Classify each singular-value index by how `log s_i` behaves across depths.
///
/// Values at or below a spectrum's zero tolerance are floored at that tolerance
/// before taking logs, so indices that vanish at large depth read as decaying.
pub fn decay_classify_with(spectra: &BTreeMap<usize, Spectrum>, t: &DecayThresholds) -> Result<Vec<DecayClass>> {
    if spectra.len() < 4 {
        return Err(DufmError::InsufficientData {
            needed: 4,
            got: spectra.len(),
        });
    }
    let width = spectra.values().map(|s| s.values.len()).max().unwrap_or(0);
    let xs: Vec<f64> = spectra.keys().map(|&l| l as f64).collect();
    let mut out = Vec::with_capacity(width);
    for i in 0..width {
        let mut all_zero = true;
        let ys: Vec<f64> = spectra
            .values()
            .map(|s| {
                let v = s.values.get(i).copied().unwrap_or(0.0);
                if s.is_nonzero(v) {
                    all_zero = false;
                    v.ln()
                } else {
                    s.zero_tolerance.max(f64::MIN_POSITIVE).ln()
                }
            })
            .collect();
        let (slope, r2) = linear_fit(&xs, &ys);
        let quad = quadratic_coefficient(&xs, &ys);
        let kind = if all_zero {
            DecayKind::Zero
        } else if slope > -t.slope {
            DecayKind::Persistent
        } else if quad <= -t.quad {
            DecayKind::SuperExp
        } else {
            DecayKind::Exp
        };
        out.push(DecayClass { kind, slope, quad, r2 });
    }
    Ok(out)
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

fn quadratic_coefficient(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let design = Matrix::from_fn(n, 3, |i, j| (xs[i] - mx).powi(j as i32));
    let rhs = DVector::from_column_slice(ys);
    let svd = design.svd(true, true);
    match svd.solve(&rhs, 1e-12) {
        Ok(coef) => coef[2],
        Err(_) => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRatioLayer {
    pub layer: usize,
    /// `||mu_l|| / ||H_l||_F` with `mu_l` the mean over columns of `H_l`.
    pub r: f64,
    /// Same ratio after the activation.
    pub r_tilde: f64,
    pub satisfied: bool,
}

fn mean_ratio(m: &Matrix) -> f64 {
    let total = m.norm();
    if total == 0.0 {
        0.0
    } else {
        m.column_mean().norm() / total
    }
}

/// Check that ReLU does not decrease the global-mean ratio on layers `2..=L`.
pub fn assumption1_check(trace: &ForwardTrace) -> Result<Vec<MeanRatioLayer>> {
    let depth = trace.depth();
    if depth < 2 {
        return Err(DufmError::NotApplicable("the mean-ratio check needs L >= 2".into()));
    }
    Ok((2..=depth)
        .map(|l| {
            let r = mean_ratio(trace.h(l));
            let r_tilde = mean_ratio(trace.lambda(l));
            MeanRatioLayer {
                layer: l,
                r,
                r_tilde,
                satisfied: r <= r_tilde * (1.0 + 1e-12),
            }
        })
        .collect())
}

/// Dimension of the Stiefel manifold of `r`-frames in `R^d`.
pub fn stiefel_dim(r: usize, d: usize) -> i64 {
    (r * d) as i64 - (r * (r + 1) / 2) as i64
}

/// Dimension of the Grassmannian of `r`-planes in `R^d`.
pub fn grassmann_dim(r: usize, d: usize) -> i64 {
    (r * d) as i64 - (r * r) as i64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimRow {
    pub d: usize,
    pub d_dnc: i64,
    pub dim_lower: i64,
    pub dim_upper: i64,
    pub ratio_lower: f64,
    pub ratio_upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub k: usize,
    pub r: usize,
    pub l: usize,
    pub rows: Vec<DimRow>,
    /// Large-width limit `(K-1)/r` of both ratio bounds.
    pub limit: f64,
}

/// Degeneracy of the collapsed solution set against the bracket for a rank-`r` solution set.
pub fn solution_space_dims(k: usize, r: usize, d_values: &[usize], l: usize) -> Result<DimReport> {
    if r < 2 || r + 1 >= k {
        return Err(DufmError::param(format!(
            "rank r must satisfy 2 <= r < K-1, got r={r}, K={k}"
        )));
    }
    if l < 1 {
        return Err(DufmError::param("L must be at least 1"));
    }
    if let Some(bad) = d_values.iter().find(|&&d| d < k) {
        return Err(DufmError::param(format!("width d={bad} is below K={k}")));
    }
    let km1 = (k - 1) as i64;
    let li = l as i64;
    let rows = d_values
        .iter()
        .map(|&d| {
            let d_dnc = li * (km1 * d as i64 - km1 * km1);
            let dim_lower = li * grassmann_dim(r, d);
            let dim_upper = li * stiefel_dim(r, d);
            DimRow {
                d,
                d_dnc,
                dim_lower,
                dim_upper,
                ratio_lower: d_dnc as f64 / dim_upper as f64,
                ratio_upper: d_dnc as f64 / dim_lower as f64,
            }
        })
        .collect();
    Ok(DimReport {
        k,
        r,
        l,
        rows,
        limit: (k as f64 - 1.0) / r as f64,
    })
}
