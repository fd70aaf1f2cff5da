//! Kernel matrices, centering, and the nonlinear / linear HSIC estimators.
//!
//! Two RBF parameterisations are available:
//!
//! * classic: `k(x, x') = exp(-|x - x'|^2 / (2 sigma^2))`
//! * scaled:  `k(x, x') = exp(-sigma |x - x'|^2)`
//!
//! A bandwidth of `sigma = 0.001` is effectively the identity kernel in the
//! classic form and effectively the all-ones kernel in the scaled form. The
//! default is classic with the median heuristic; [`KernelSpec::scaled`] gives a
//! fixed sigma under the scaled form.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, dim_err, usage, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::{Error, EPS};

/// `N x d` sample matrix: row `i` is sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix(Tensor);

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(dim_err!("sample matrix needs N >= 1 and d >= 1, got {}x{}", rows, cols));
        }
        let t = Tensor::new(&[rows, cols], values)?;
        t.check_finite("sample matrix")?;
        Ok(SampleMatrix(t))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(dim_err!("sample matrix must be 2-d, got {:?}", t.shape()));
        }
        t.check_finite("sample matrix")?;
        Ok(SampleMatrix(t))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.at2(r, c)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.cols();
        &self.0.data()[r * d..(r + 1) * d]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Reorder rows: `out[i] = self[perm[i]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rows() {
            return Err(dim_err!("permutation of length {} for {} rows", perm.len(), self.rows()));
        }
        let mut values = Vec::with_capacity(self.0.len());
        for &p in perm {
            values.extend_from_slice(self.row(p));
        }
        SampleMatrix::new(self.rows(), self.cols(), values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RbfForm {
    /// `exp(-r^2 / (2 sigma^2))`
    Classic,
    /// `exp(-sigma r^2)`
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
    pub form: RbfForm,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { kind: KernelKind::Rbf, bandwidth: Bandwidth::MedianHeuristic, form: RbfForm::Classic }
    }
}

impl KernelSpec {
    pub fn classic(sigma: f64) -> Self {
        KernelSpec { kind: KernelKind::Rbf, bandwidth: Bandwidth::Fixed(sigma), form: RbfForm::Classic }
    }

    /// Fixed sigma in the scaled form, where small values such as `0.001`
    /// still give a usable kernel.
    pub fn scaled(sigma: f64) -> Self {
        KernelSpec { kind: KernelKind::Rbf, bandwidth: Bandwidth::Fixed(sigma), form: RbfForm::Scaled }
    }

    pub fn linear() -> Self {
        KernelSpec { kind: KernelKind::Linear, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_err!("kernel bandwidth must be > 0, got {}", s));
            }
        }
        Ok(())
    }

    /// Coefficient `c` with `k = exp(-c r^2)` for the given samples.
    /// Linear kernels return 0 (unused).
    pub fn rbf_coefficient(&self, x: &SampleMatrix) -> Result<f64> {
        self.validate()?;
        if self.kind == KernelKind::Linear {
            return Ok(0.0);
        }
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::MedianHeuristic => median_bandwidth(x),
        };
        Ok(match self.form {
            RbfForm::Classic => 1.0 / (2.0 * sigma * sigma),
            RbfForm::Scaled => sigma,
        })
    }
}

/// Median of pairwise Euclidean distances over pairs `i < j`.
/// Falls back to 1 when that median is zero (fewer than two distinct rows).
pub fn median_bandwidth(x: &SampleMatrix) -> f64 {
    let n = x.rows();
    let mut dists = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(math::sqrt(s));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let m = math::median(&dists);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Symmetric `N x N` Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(Tensor);

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.at2(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

pub fn rbf_kernel(x: &SampleMatrix, spec: &KernelSpec) -> Result<KernelMatrix> {
    if spec.kind != KernelKind::Rbf {
        return Err(usage!("rbf_kernel called with a linear kernel spec"));
    }
    let c = spec.rbf_coefficient(x)?;
    let d = crate::autodiff::sq_dist_raw(x.as_tensor());
    Ok(KernelMatrix(d.map(|r2| math::exp(-c * r2))))
}

pub fn linear_kernel(x: &SampleMatrix) -> KernelMatrix {
    let t = x.as_tensor();
    KernelMatrix(crate::autodiff::matmul_raw(t, &crate::autodiff::transpose_raw(t)))
}

pub fn kernel_matrix(x: &SampleMatrix, spec: &KernelSpec) -> Result<KernelMatrix> {
    match spec.kind {
        KernelKind::Rbf => rbf_kernel(x, spec),
        KernelKind::Linear => Ok(linear_kernel(x)),
    }
}

/// `J = I - (1/N) 1 1^T`.
pub fn centering_matrix(n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(usage!("centering matrix needs N >= 1"));
    }
    let inv = 1.0 / n as f64;
    Ok(Tensor::from_fn(&[n, n], |k| if k / n == k % n { 1.0 - inv } else { -inv }))
}

/// Double-centre a Gram matrix in place: `K <- J K J`.
fn double_center(k: &mut [f64], n: usize) {
    let inv = 1.0 / n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() * inv).collect();
    let col_means: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() * inv).collect();
    let grand = row_means.iter().sum::<f64>() * inv;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += grand - row_means[i] - col_means[j];
        }
    }
}

/// Biased empirical HSIC, `tr(K J L J) / N^2`.
pub fn hsic_nonlinear(x: &SampleMatrix, y: &SampleMatrix, spec_x: &KernelSpec, spec_y: &KernelSpec) -> Result<f64> {
    let n = x.rows();
    if y.rows() != n {
        return Err(usage!("HSIC needs paired samples: {} vs {} rows", n, y.rows()));
    }
    let k = kernel_matrix(x, spec_x)?;
    let l = kernel_matrix(y, spec_y)?;
    let mut kc = k.0.into_data();
    double_center(&mut kc, n);
    // tr(JKJ L) with L symmetric
    let s: f64 = kc.iter().zip(l.0.data()).map(|(a, b)| a * b).sum();
    Ok(s / (n * n) as f64)
}

/// Standardise columns to zero mean and unit population variance,
/// dividing by `sqrt(var + eps)`.
pub fn standardize(x: &SampleMatrix, eps: f64) -> SampleMatrix {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.as_tensor().data().to_vec();
    for c in 0..d {
        let mean = (0..n).map(|r| out[r * d + c]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|r| {
                let dv = out[r * d + c] - mean;
                dv * dv
            })
            .sum::<f64>()
            / n as f64;
        let sd = math::sqrt(var + eps);
        for r in 0..n {
            out[r * d + c] = (out[r * d + c] - mean) / sd;
        }
    }
    SampleMatrix(Tensor::new(&[n, d], out).expect("same shape"))
}

/// `C = X^T Y / N` for column-standardised inputs.
pub fn cross_correlation(xs: &SampleMatrix, ys: &SampleMatrix) -> Result<Tensor> {
    let n = xs.rows();
    if ys.rows() != n {
        return Err(usage!("cross-correlation needs paired samples: {} vs {} rows", n, ys.rows()));
    }
    let (dx, dy) = (xs.cols(), ys.cols());
    let mut c = vec![0.0; dx * dy];
    for r in 0..n {
        let (xr, yr) = (xs.row(r), ys.row(r));
        for i in 0..dx {
            for j in 0..dy {
                c[i * dy + j] += xr[i] * yr[j];
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::new(&[dx, dy], c)
}

/// Linear HSIC on internally standardised inputs: `|X^T Y|_F^2 / N^2`.
pub fn hsic_linear(x: &SampleMatrix, y: &SampleMatrix) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(usage!("linear HSIC needs N >= 2 for standardisation, got {}", n));
    }
    if y.rows() != n {
        return Err(usage!("HSIC needs paired samples: {} vs {} rows", n, y.rows()));
    }
    let c = cross_correlation(&standardize(x, EPS), &standardize(y, EPS))?;
    Ok(c.data().iter().map(|v| v * v).sum())
}

/// Flat `i * n + j` indices (`i < j`) of the one or two pairwise distances
/// whose mean is [`median_bandwidth`]. Empty for fewer than two rows.
pub fn median_pairs(x: &SampleMatrix) -> Vec<usize> {
    let n = x.rows();
    let mut dists = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push((s, i * n + j));
        }
    }
    dists.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = dists.len();
    match m {
        0 => Vec::new(),
        _ if m % 2 == 1 => vec![dists[m / 2].1],
        _ => vec![dists[m / 2 - 1].1, dists[m / 2].1],
    }
}

/// Differentiable RBF Gram matrix of the rows of `x`.
///
/// Under the median heuristic the pair(s) defining the median are picked on
/// values and frozen, but the bandwidth is built in the graph from their
/// distances, so gradients account for it moving with the samples. When the
/// median is zero the fallback bandwidth 1 is a constant.
pub fn rbf_kernel_var(g: &mut Graph, x: Var, spec: &KernelSpec) -> Result<Var> {
    if spec.kind == KernelKind::Linear {
        return Err(usage!("rbf_kernel_var needs an RBF kernel spec"));
    }
    let xs = SampleMatrix::from_tensor(g.value(x).clone())?;
    let coef = spec.rbf_coefficient(&xs)?;
    let n = xs.rows();
    let d = g.sq_dist(x)?;
    let pairs = match spec.bandwidth {
        Bandwidth::MedianHeuristic => median_pairs(&xs),
        Bandwidth::Fixed(_) => Vec::new(),
    };
    let live: Vec<usize> = pairs.iter().copied().filter(|&p| g.value(d).data()[p] > 0.0).collect();
    if live.is_empty() {
        let scaled = g.scale(d, -coef)?;
        return g.exp(scaled);
    }
    let flat = g.reshape(d, &[n * n, 1])?;
    let picked = g.select_rows(flat, &live)?;
    let dist = g.pow(picked, 0.5)?;
    let total = g.sum(dist)?;
    let sigma = g.scale(total, 1.0 / pairs.len() as f64)?;
    let c = match spec.form {
        RbfForm::Classic => {
            let inv = g.pow(sigma, -2.0)?;
            g.scale(inv, 0.5)?
        }
        RbfForm::Scaled => sigma,
    };
    let c = g.reshape(c, &[1, 1])?;
    let c = g.expand(c, &[n, n])?;
    let e = g.mul(d, c)?;
    let e = g.neg(e)?;
    g.exp(e)
}

/// Differentiable `tr(K J L J) / N^2` with RBF kernels from the two specs.
pub fn hsic_nonlinear_var(g: &mut Graph, x: Var, y: Var, spec_x: &KernelSpec, spec_y: &KernelSpec) -> Result<Var> {
    let n = g.shape(x)[0];
    if g.shape(y)[0] != n {
        return Err(usage!("HSIC needs paired samples: {} vs {} rows", n, g.shape(y)[0]));
    }
    let k = rbf_kernel_var(g, x, spec_x)?;
    let l = rbf_kernel_var(g, y, spec_y)?;
    let j = g.constant(centering_matrix(n)?)?;
    let kj = g.matmul(k, j)?;
    let jkj = g.matmul(j, kj)?;
    let prod = g.mul(jkj, l)?;
    let s = g.sum(prod)?;
    g.scale(s, 1.0 / (n * n) as f64)
}

/// Differentiable linear HSIC with internal column standardisation.
pub fn hsic_linear_var(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if n < 2 || g.shape(y)[0] != n {
        return Err(usage!("linear HSIC needs paired samples with N >= 2"));
    }
    let xs = g.standardize_cols(x, EPS)?;
    let ys = g.standardize_cols(y, EPS)?;
    let xt = g.transpose(xs)?;
    let c = g.matmul(xt, ys)?;
    let c = g.scale(c, 1.0 / n as f64)?;
    let sq = g.square(c)?;
    g.sum(sq)
}

impl From<SampleMatrix> for Tensor {
    fn from(s: SampleMatrix) -> Tensor {
        s.0
    }
}

impl TryFrom<Tensor> for SampleMatrix {
    type Error = Error;
    fn try_from(t: Tensor) -> Result<Self> {
        SampleMatrix::from_tensor(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(vals: &[f64]) -> SampleMatrix {
        SampleMatrix::new(vals.len(), 1, vals.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> SampleMatrix {
        SampleMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// tr(K J L J) / N^2 by explicit matrix products.
    fn oracle_hsic(k: &[f64], l: &[f64], n: usize) -> f64 {
        let j: Vec<f64> = (0..n * n).map(|p| (p / n == p % n) as u8 as f64 - 1.0 / n as f64).collect();
        let mm = |a: &[f64], b: &[f64]| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for jj in 0..n {
                    for p in 0..n {
                        out[i * n + jj] += a[i * n + p] * b[p * n + jj];
                    }
                }
            }
            out
        };
        let m = mm(&mm(&mm(k, &j), l), &j);
        (0..n).map(|i| m[i * n + i]).sum::<f64>() / (n * n) as f64
    }

    #[test]
    fn identical_rows_give_all_ones() {
        let x = SampleMatrix::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let k = rbf_kernel(&x, &KernelSpec::classic(0.7)).unwrap();
        assert!(k.as_tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_point_classic_kernel() {
        let k = rbf_kernel(&col(&[0.0, 1.0]), &KernelSpec::classic(1.0)).unwrap();
        assert!((k.get(0, 1) - 0.60653).abs() < 1e-5);
        assert_eq!(k.get(0, 0), 1.0);
    }

    #[test]
    fn huge_bandwidth_tends_to_ones() {
        let k = rbf_kernel(&col(&[0.0, 1.0, 5.0]), &KernelSpec::classic(1e6)).unwrap();
        assert!(k.as_tensor().data().iter().all(|&v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn non_positive_sigma_is_config_error() {
        assert!(matches!(rbf_kernel(&col(&[0.0, 1.0]), &KernelSpec::classic(0.0)), Err(Error::Config(_))));
        assert!(matches!(rbf_kernel(&col(&[0.0, 1.0]), &KernelSpec::classic(-1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn centering_small_cases() {
        assert_eq!(centering_matrix(1).unwrap().data(), &[0.0]);
        assert_eq!(centering_matrix(2).unwrap().data(), &[0.5, -0.5, -0.5, 0.5]);
        assert!(centering_matrix(0).is_err());
        let j = centering_matrix(5).unwrap();
        let jj = crate::autodiff::matmul_raw(&j, &j);
        for (a, b) in jj.data().iter().zip(j.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_y_gives_zero_hsic() {
        let x = col(&[0.0, 1.0, 3.0]);
        let y = col(&[2.0, 2.0, 2.0]);
        let v = hsic_nonlinear(&x, &y, &KernelSpec::default(), &KernelSpec::default()).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn single_sample_hsic_is_zero() {
        let v = hsic_nonlinear(&col(&[1.0]), &col(&[4.0]), &KernelSpec::default(), &KernelSpec::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn three_point_hsic_matches_matrix_oracle() {
        let x = col(&[0.0, 1.0, 2.0]);
        let spec = KernelSpec::classic(1.0);
        let v = hsic_nonlinear(&x, &x, &spec, &spec).unwrap();
        let k: Vec<f64> = (0..9)
            .map(|p| {
                let d = (p / 3) as f64 - (p % 3) as f64;
                (-d * d / 2.0).exp()
            })
            .collect();
        let expected = oracle_hsic(&k, &k, 3);
        assert!((v - expected).abs() <= 1e-14 * expected.abs(), "{} vs {}", v, expected);
    }

    #[test]
    fn mismatched_rows_is_usage_error() {
        let r = hsic_nonlinear(&col(&[0.0, 1.0]), &col(&[0.0]), &KernelSpec::default(), &KernelSpec::default());
        assert!(matches!(r, Err(Error::Usage(_))));
        assert!(matches!(hsic_linear(&col(&[0.0]), &col(&[1.0])), Err(Error::Usage(_))));
    }

    #[test]
    fn linear_hsic_perfect_correlation() {
        let x = col(&[3.0, -1.0]);
        let v = hsic_linear(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
    }

    #[test]
    fn linear_hsic_constant_y() {
        let v = hsic_linear(&col(&[1.0, 2.0, 4.0]), &col(&[5.0, 5.0, 5.0])).unwrap();
        assert!(v.abs() < 1e-20);
    }

    #[test]
    fn linear_hsic_matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 3);
        let y = random(&mut rng, 4, 2);
        // oracle: standardise by hand, then |X^T Y|_F^2 / N^2
        let std = |m: &SampleMatrix| -> Vec<Vec<f64>> {
            (0..m.cols())
                .map(|c| {
                    let v: Vec<f64> = (0..m.rows()).map(|r| m.get(r, c)).collect();
                    let mu = v.iter().sum::<f64>() / v.len() as f64;
                    let var = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / v.len() as f64;
                    v.iter().map(|a| (a - mu) / (var + EPS).sqrt()).collect()
                })
                .collect()
        };
        let (xs, ys) = (std(&x), std(&y));
        let mut f = 0.0;
        for a in &xs {
            for b in &ys {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                f += dot * dot;
            }
        }
        let expected = f / 16.0;
        let v = hsic_linear(&x, &y).unwrap();
        assert!((v - expected).abs() <= 1e-10 * expected.abs());
    }

    #[test]
    fn cross_correlation_self_and_negated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = standardize(&random(&mut rng, 6, 3), EPS);
        let c = cross_correlation(&xs, &xs).unwrap();
        for i in 0..3 {
            assert!((c.at2(i, i) - 1.0).abs() < 1e-9);
        }
        let neg = SampleMatrix::new(6, 3, xs.as_tensor().data().iter().map(|v| -v).collect()).unwrap();
        let c = cross_correlation(&xs, &neg).unwrap();
        for i in 0..3 {
            assert!((c.at2(i, i) + 1.0).abs() < 1e-9);
        }
        assert!(c.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn cross_correlation_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs = standardize(&random(&mut rng, 4, 2), EPS);
        let ys = standardize(&random(&mut rng, 4, 2), EPS);
        let c = cross_correlation(&xs, &ys).unwrap();
        let xt = crate::autodiff::transpose_raw(xs.as_tensor());
        let p = crate::autodiff::matmul_raw(&xt, ys.as_tensor());
        for (a, b) in c.data().iter().zip(p.data()) {
            assert!((a - b / 4.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn median_bandwidth_matches_pairwise_median() {
        let x = col(&[0.0, 1.0, 3.0, 7.0]);
        // distances: 1 3 7 2 6 4 -> sorted 1 2 3 4 6 7 -> median 3.5
        assert_eq!(median_bandwidth(&x), 3.5);
        assert_eq!(median_pairs(&x), vec![2, 11]);
        assert_eq!(median_bandwidth(&col(&[2.0, 2.0])), 1.0);
        assert_eq!(median_bandwidth(&col(&[2.0])), 1.0);
    }

    #[test]
    fn graph_hsic_matches_value_hsic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 5, 3);
        let y = random(&mut rng, 5, 4);
        let mut g = Graph::new();
        let xv = g.constant(x.as_tensor().clone()).unwrap();
        let yv = g.constant(y.as_tensor().clone()).unwrap();
        for spec in [KernelSpec::default(), KernelSpec::classic(0.7), KernelSpec::scaled(0.2)] {
            let expected = hsic_nonlinear(&x, &y, &spec, &spec).unwrap();
            let h = hsic_nonlinear_var(&mut g, xv, yv, &spec, &spec).unwrap();
            assert!((g.value(h).item() - expected).abs() < 1e-14);
        }
        let hl = hsic_linear_var(&mut g, xv, yv).unwrap();
        assert!((g.value(hl).item() - hsic_linear(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hsic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // 3 rows give an odd number of pairs, 4 rows an even one
        for n in [3, 4] {
            let x = random(&mut rng, n, 6);
            let y = random(&mut rng, n, 5);
            for spec in [KernelSpec::default(), KernelSpec::classic(1.5), KernelSpec::scaled(0.3)] {
                let report = grad_check(
                    |g, v| hsic_nonlinear_var(g, v[0], v[1], &spec, &spec),
                    &[x.as_tensor().clone(), y.as_tensor().clone()],
                    1e-5,
                )
                .unwrap();
                assert!(report.worst() < 1e-4, "{:?} {:?}", spec, report);
            }
        }
        let x = random(&mut rng, 4, 16);
        let y = random(&mut rng, 4, 16);
        let report = grad_check(
            |g, v| hsic_linear_var(g, v[0], v[1]),
            &[x.into_tensor(), y.into_tensor()],
            1e-5,
        )
        .unwrap();
        assert!(report.worst() < 1e-4, "{:?}", report);
    }
}
