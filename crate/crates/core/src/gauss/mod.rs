//! Conditional means under a fitted multivariate normal, by closed form and
//! by direct quadrature of the density ratio, plus the three-bus case study
//! that compares conditioning sets.

mod study;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

pub use study::{
    run_3bus_study, study_variables, CaseResult, StudyResult, STUDY_CASES, STUDY_LABELS,
};

/// Diagonal load added when a conditioning block is not positive definite.
pub const REGULARIZATION: f64 = 1e-12;

/// Variances at or below this are treated as constant columns.
const CONSTANT_VARIANCE: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianJoint {
    pub labels: Vec<String>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Columns with zero sample variance.
    pub constant: Vec<bool>,
}

impl GaussianJoint {
    pub fn new(labels: Vec<String>, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = labels.len();
        if mu.len() != d || sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Dimension(format!(
                "{d} labels, mean of {}, covariance {:?}",
                mu.len(),
                sigma.shape()
            )));
        }
        if (0..d).any(|i| (0..i).any(|j| sigma[(i, j)] != sigma[(j, i)])) {
            return Err(Error::Validation("covariance is not symmetric".into()));
        }
        let constant = (0..d).map(|i| sigma[(i, i)] <= CONSTANT_VARIANCE).collect();
        Ok(GaussianJoint {
            labels,
            mu,
            sigma,
            constant,
        })
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Validation(format!("no variable '{label}'")))
    }
}

/// Sample mean and unbiased sample covariance of the rows of `samples`.
pub fn fit_gaussian(samples: ArrayView2<'_, f64>, labels: &[String]) -> Result<GaussianJoint> {
    let (f, d) = samples.dim();
    if labels.len() != d {
        return Err(Error::Dimension(format!(
            "{} labels for {d} columns",
            labels.len()
        )));
    }
    if f <= d {
        return Err(Error::Validation(format!(
            "need more samples than variables, got {f} for {d}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "samples contain non-finite values".into(),
        ));
    }
    let mu = DVector::from_iterator(d, (0..d).map(|j| samples.column(j).sum() / f as f64));
    let mut sigma = DMatrix::zeros(d, d);
    for row in samples.rows() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in 0..=i {
                sigma[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = sigma[(i, j)] / (f - 1) as f64;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let joint = GaussianJoint::new(labels.to_vec(), mu, sigma)?;
    for (l, _) in joint
        .labels
        .iter()
        .zip(&joint.constant)
        .filter(|(_, c)| **c)
    {
        log::info!("variable {l} is constant in the samples");
    }
    Ok(joint)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondMean {
    pub value: f64,
    /// The conditioning covariance needed diagonal loading.
    pub regularized: bool,
    /// Conditioning variables ignored because they are constant.
    pub dropped: Vec<usize>,
}

fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn check_indices(joint: &GaussianJoint, target: usize, given: &[usize], z: &[f64]) -> Result<()> {
    let d = joint.dim();
    if target >= d || given.iter().any(|&g| g >= d) {
        return Err(Error::Dimension(format!(
            "variable index out of range for a {d}-variable joint"
        )));
    }
    if given.contains(&target) {
        return Err(Error::Validation(
            "target is among the conditioning variables".into(),
        ));
    }
    if given.len() != z.len() {
        return Err(Error::Dimension(format!(
            "{} conditioning variables but {} values",
            given.len(),
            z.len()
        )));
    }
    Ok(())
}

/// Keeps conditioning variables with positive variance. A constant variable
/// carries no information, so conditioning on it leaves the mean unchanged.
fn informative(
    joint: &GaussianJoint,
    given: &[usize],
    z: &[f64],
) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let mut keep = Vec::new();
    let mut vals = Vec::new();
    let mut dropped = Vec::new();
    for (&g, &v) in given.iter().zip(z) {
        if joint.constant[g] {
            dropped.push(g);
        } else {
            keep.push(g);
            vals.push(v);
        }
    }
    (keep, vals, dropped)
}

/// Cholesky factorization that also rejects pivots that collapsed to
/// rounding level relative to their diagonal entry.
fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let c = Cholesky::new(m.clone())?;
    let l = c.l_dirty();
    (0..m.nrows())
        .all(|i| l[(i, i)] * l[(i, i)] > 1e-14 * m[(i, i)])
        .then_some(c)
}

/// Cholesky factor of `m`, retrying once with [`REGULARIZATION`] on the
/// diagonal.
fn factor(m: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = cholesky(&m) {
        return Ok((c, false));
    }
    let n = m.nrows();
    Cholesky::new(m + DMatrix::identity(n, n) * REGULARIZATION)
        .map(|c| (c, true))
        .ok_or_else(|| {
            Error::Singular(
                "conditioning covariance is not positive definite after regularization".into(),
            )
        })
}

/// `E(x_target | x_given = z)` = μ_x + Σ_xz Σ_zz⁻¹ (z − μ_z).
pub fn cond_mean_closed(
    joint: &GaussianJoint,
    target: usize,
    given: &[usize],
    z: &[f64],
) -> Result<CondMean> {
    check_indices(joint, target, given, z)?;
    let (keep, vals, dropped) = informative(joint, given, z);
    if keep.is_empty() {
        return Ok(CondMean {
            value: joint.mu[target],
            regularized: false,
            dropped,
        });
    }
    let szz = sub_matrix(&joint.sigma, &keep, &keep);
    let (chol, regularized) = factor(szz)?;
    let dz = DVector::from_iterator(
        keep.len(),
        keep.iter().zip(&vals).map(|(&g, &v)| v - joint.mu[g]),
    );
    let w = chol.solve(&dz);
    let sxz = sub_matrix(&joint.sigma, &[target], &keep);
    let value = joint.mu[target] + (sxz * w)[(0, 0)];
    Ok(CondMean {
        value,
        regularized,
        dropped,
    })
}

/// Settings for [`cond_mean_integral`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quadrature {
    /// Simpson nodes (odd, at least 2001).
    pub nodes: usize,
    /// Half-width of the range in conditional standard deviations.
    pub half_width: f64,
    /// Range doublings tried before giving up.
    pub max_doublings: usize,
    /// Allowed deviation of the integrated conditional density from 1.
    pub mass_tolerance: f64,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature {
            nodes: 2001,
            half_width: 8.0,
            max_doublings: 2,
            mass_tolerance: 1e-8,
        }
    }
}

/// Log density of a normal with Cholesky factor `chol`.
struct LogNormal {
    mu: DVector<f64>,
    l: DMatrix<f64>,
    log_norm: f64,
}

impl LogNormal {
    fn new(mu: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mu.len() as f64;
        let chol = Cholesky::new(cov)
            .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
        let log_det: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let log_norm = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(LogNormal {
            mu,
            l: chol.unpack(),
            log_norm,
        })
    }

    fn eval(&self, y: &DVector<f64>) -> f64 {
        let d = y - &self.mu;
        let sol = self
            .l
            .solve_lower_triangular(&d)
            .expect("non-singular factor");
        self.log_norm - 0.5 * sol.norm_squared()
    }
}

fn simpson(xs: &[f64], fs: &[f64]) -> f64 {
    let n = xs.len() - 1;
    let h = (xs[n] - xs[0]) / n as f64;
    let mut acc = fs[0] + fs[n];
    for (i, f) in fs.iter().enumerate().take(n).skip(1) {
        acc += if i % 2 == 1 { 4.0 * f } else { 2.0 * f };
    }
    acc * h / 3.0
}

/// `∫ x p(x | z) dx` with `p(x | z) = N_p(x, z) / N_q(z)`, the ratio of the
/// joint density of target and conditioning variables to the marginal of the
/// conditioning variables. Simpson's rule over ±`half_width` conditional
/// standard deviations around a grid-scan estimate of the mean; the range is
/// doubled when the integrated density is not 1.
pub fn cond_mean_integral(
    joint: &GaussianJoint,
    target: usize,
    given: &[usize],
    z: &[f64],
    quad: &Quadrature,
) -> Result<f64> {
    check_indices(joint, target, given, z)?;
    if quad.nodes < 2001 || quad.nodes % 2 == 0 {
        return Err(Error::Config(format!(
            "quadrature needs an odd node count of at least 2001, got {}",
            quad.nodes
        )));
    }
    let (keep, vals, _) = informative(joint, given, z);
    let mut vars = vec![target];
    vars.extend(&keep);
    let mut cov_p = sub_matrix(&joint.sigma, &vars, &vars);
    if cholesky(&cov_p).is_none() {
        let n = vars.len();
        cov_p += DMatrix::identity(n, n) * REGULARIZATION;
    }
    let mu_p = DVector::from_iterator(vars.len(), vars.iter().map(|&v| joint.mu[v]));
    let numerator = LogNormal::new(mu_p.clone(), cov_p.clone())?;
    let log_q = if keep.is_empty() {
        0.0
    } else {
        let q = LogNormal::new(
            mu_p.rows(1, keep.len()).into_owned(),
            cov_p.view((1, 1), (keep.len(), keep.len())).into_owned(),
        )?;
        q.eval(&DVector::from_vec(vals.clone()))
    };
    let density = |x: f64| {
        let mut y = DVector::zeros(vars.len());
        y[0] = x;
        for (k, v) in vals.iter().enumerate() {
            y[k + 1] = *v;
        }
        (numerator.eval(&y) - log_q).exp()
    };

    let (centre, spread) = scan_mode(&density, joint.mu[target], cov_p[(0, 0)].sqrt())?;
    let mut half = quad.half_width * spread;
    for _ in 0..=quad.max_doublings {
        let xs: Vec<f64> = (0..quad.nodes)
            .map(|i| centre - half + 2.0 * half * i as f64 / (quad.nodes - 1) as f64)
            .collect();
        let fs: Vec<f64> = xs.iter().map(|&x| density(x)).collect();
        let mass = simpson(&xs, &fs);
        if (mass - 1.0).abs() <= quad.mass_tolerance {
            let xf: Vec<f64> = xs.iter().zip(&fs).map(|(x, f)| x * f).collect();
            return Ok(simpson(&xs, &xf));
        }
        half *= 2.0;
    }
    Err(Error::Quadrature(format!(
        "conditional density did not integrate to 1 within ±{} conditional std after {} doublings",
        quad.half_width, quad.max_doublings
    )))
}

/// Locates the bulk of a unimodal density starting from the marginal
/// `(mean, std)`: repeatedly scans a coarse grid and zooms in on the peak
/// until it spans many grid cells, then returns the weighted mean and
/// standard deviation seen on that grid.
fn scan_mode(density: &dyn Fn(f64) -> f64, mean: f64, std: f64) -> Result<(f64, f64)> {
    const COARSE: usize = 401;
    let mut lo = mean - 10.0 * std;
    let mut hi = mean + 10.0 * std;
    for _ in 0..40 {
        let h = (hi - lo) / (COARSE - 1) as f64;
        let xs: Vec<f64> = (0..COARSE).map(|i| lo + h * i as f64).collect();
        let fs: Vec<f64> = xs.iter().map(|&x| density(x)).collect();
        let (imax, &fmax) = fs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty grid");
        if !(fmax > 0.0) || !fmax.is_finite() {
            return Err(Error::Quadrature(
                "conditional density vanishes on the search grid".into(),
            ));
        }
        let wide = fs.iter().filter(|&&f| f > 1e-3 * fmax).count();
        if wide >= 20 {
            let total: f64 = fs.iter().sum();
            let m = xs.iter().zip(&fs).map(|(x, f)| x * f).sum::<f64>() / total;
            let v = xs
                .iter()
                .zip(&fs)
                .map(|(x, f)| (x - m).powi(2) * f)
                .sum::<f64>()
                / total;
            return Ok((m, v.sqrt().max(h)));
        }
        let peak = xs[imax];
        lo = peak - 4.0 * h;
        hi = peak + 4.0 * h;
    }
    Err(Error::Quadrature(
        "could not resolve the conditional density peak".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn labels(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("v{i}")).collect()
    }

    fn joint(mu: &[f64], sigma: &[f64]) -> GaussianJoint {
        let d = mu.len();
        GaussianJoint::new(
            labels(d),
            DVector::from_column_slice(mu),
            DMatrix::from_row_slice(d, d, sigma),
        )
        .unwrap()
    }

    #[test]
    fn two_values_give_mean_one_variance_two() {
        let s = array![[0.0], [2.0]];
        let j = fit_gaussian(s.view(), &labels(1)).unwrap();
        assert_eq!(j.mu[0], 1.0);
        assert_eq!(j.sigma[(0, 0)], 2.0);
    }

    #[test]
    fn constant_column_is_flagged() {
        let s = array![[0.0, 1.0], [2.0, 1.0], [1.0, 1.0]];
        let j = fit_gaussian(s.view(), &labels(2)).unwrap();
        assert_eq!(j.constant, vec![false, true]);
        assert_eq!(j.sigma[(1, 1)], 0.0);
        assert_eq!(j.sigma[(0, 1)], 0.0);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let s = array![[0.0, 1.0], [2.0, 1.0]];
        assert!(matches!(
            fit_gaussian(s.view(), &labels(2)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn recovers_known_mean() {
        let mut g = rng::stream(3, "gauss-fit");
        let f = 10_000;
        let mut s = Array2::zeros((f, 2));
        for i in 0..f {
            let a: f64 = StandardNormal.sample(&mut g);
            let b: f64 = StandardNormal.sample(&mut g);
            s[(i, 0)] = 1.0 + 2.0 * a;
            s[(i, 1)] = -3.0 + 0.5 * a + 0.5 * b;
        }
        let j = fit_gaussian(s.view(), &labels(2)).unwrap();
        let se0 = 2.0 / (f as f64).sqrt();
        let se1 = (0.5f64).sqrt() / (f as f64).sqrt();
        assert!((j.mu[0] - 1.0).abs() < 4.0 * se0);
        assert!((j.mu[1] + 3.0).abs() < 4.0 * se1);
    }

    #[test]
    fn independent_target_returns_marginal_mean() {
        let j = joint(&[1.5, -2.0], &[2.0, 0.0, 0.0, 3.0]);
        for z in [-10.0, 0.0, 7.0] {
            assert_eq!(cond_mean_closed(&j, 0, &[1], &[z]).unwrap().value, 1.5);
        }
    }

    #[test]
    fn perfectly_correlated_returns_z() {
        let j = joint(&[0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]);
        for z in [-1.25, 0.0, 3.5] {
            assert_eq!(cond_mean_closed(&j, 0, &[1], &[z]).unwrap().value, z);
        }
    }

    #[test]
    fn empty_conditioning_returns_mean() {
        let j = joint(&[0.7, 1.0], &[0.3, 0.1, 0.1, 0.2]);
        let q = cond_mean_integral(&j, 0, &[], &[], &Quadrature::default()).unwrap();
        assert!((q - 0.7).abs() < 1e-9);
    }

    #[test]
    fn constant_conditioning_variable_returns_mean() {
        let j = joint(&[0.97, 0.0], &[1e-6, 0.0, 0.0, 0.0]);
        let c = cond_mean_closed(&j, 0, &[1], &[0.0]).unwrap();
        assert_eq!(c.value, 0.97);
        assert_eq!(c.dropped, vec![1]);
        let q = cond_mean_integral(&j, 0, &[1], &[0.0], &Quadrature::default()).unwrap();
        assert!((q - 0.97).abs() < 1e-9);
    }

    #[test]
    fn duplicate_conditioning_variable_changes_nothing() {
        let j = joint(
            &[1.0, 2.0, 2.0],
            &[1.0, 0.6, 0.6, 0.6, 0.5, 0.5, 0.6, 0.5, 0.5],
        );
        let single = cond_mean_closed(&j, 0, &[1], &[2.3]).unwrap();
        let both = cond_mean_closed(&j, 0, &[1, 2], &[2.3, 2.3]).unwrap();
        assert!(both.regularized);
        assert!(
            (single.value - both.value).abs() < 1e-9,
            "{} vs {}",
            single.value,
            both.value
        );
    }

    #[test]
    fn rejects_bad_arguments() {
        let j = joint(&[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0]);
        assert!(cond_mean_closed(&j, 0, &[0], &[1.0]).is_err());
        assert!(cond_mean_closed(&j, 0, &[1], &[]).is_err());
        assert!(cond_mean_closed(&j, 2, &[1], &[1.0]).is_err());
        let q = Quadrature {
            nodes: 101,
            ..Quadrature::default()
        };
        assert!(cond_mean_integral(&j, 0, &[1], &[1.0], &q).is_err());
    }

    #[test]
    fn two_dimensional_integral_matches_closed_form() {
        let j = joint(&[0.5, -1.0], &[0.04, 0.018, 0.018, 0.01]);
        let c = cond_mean_closed(&j, 0, &[1], &[-0.9]).unwrap().value;
        let q = cond_mean_integral(&j, 0, &[1], &[-0.9], &Quadrature::default()).unwrap();
        assert!((c - q).abs() < 1e-6);
    }

    /// Random PSD joint of dimension `d`: A Aᵀ plus a small ridge.
    fn random_joint(d: usize, seed: u64) -> (GaussianJoint, Vec<f64>) {
        let mut g = rng::stream(seed, "random-joint");
        let mut n = || -> f64 { StandardNormal.sample(&mut g) };
        let a = DMatrix::from_fn(d, d, |_, _| n());
        let mut s = &a * a.transpose() + DMatrix::identity(d, d) * 0.05;
        s = (&s + s.transpose()) * 0.5;
        let mu = DVector::from_fn(d, |_, _| n());
        let point: Vec<f64> = (0..d).map(|i| mu[i] + s[(i, i)].sqrt() * n()).collect();
        (GaussianJoint::new(labels(d), mu, s).unwrap(), point)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn closed_form_agrees_with_quadrature(d in 1usize..=5, seed in any::<u64>(), mask in 0u32..32) {
            let (j, point) = random_joint(d, seed);
            let target = (seed % d as u64) as usize;
            let given: Vec<usize> = (0..d).filter(|&i| i != target && mask & (1 << i) != 0).collect();
            let z: Vec<f64> = given.iter().map(|&i| point[i]).collect();
            let c = cond_mean_closed(&j, target, &given, &z).unwrap().value;
            let q = cond_mean_integral(&j, target, &given, &z, &Quadrature::default()).unwrap();
            prop_assert!((c - q).abs() <= 1e-6, "closed {} vs quadrature {}", c, q);
        }

        #[test]
        fn independent_variable_leaves_mean_unchanged(seed in any::<u64>(), z in -5.0f64..5.0) {
            let (j, point) = random_joint(3, seed);
            // Append a variable uncorrelated with everything.
            let mut s = DMatrix::zeros(4, 4);
            s.view_mut((0, 0), (3, 3)).copy_from(&j.sigma);
            s[(3, 3)] = 2.0;
            let mu = DVector::from_fn(4, |i, _| if i < 3 { j.mu[i] } else { 0.3 });
            let wide = GaussianJoint::new(labels(4), mu, s).unwrap();
            let a = cond_mean_closed(&wide, 0, &[1], &[point[1]]).unwrap().value;
            let b = cond_mean_closed(&wide, 0, &[1, 3], &[point[1], z]).unwrap().value;
            prop_assert_eq!(a, b);
        }
    }
}
