//! OLS and 2SLS on absorbed data with cluster-robust (CR1) inference,
//! first-stage strength and the Hansen overidentification test.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// First-stage F values above this are reported as this value.
pub const F_CAP: f64 = 1e12;
/// Rule-of-thumb threshold below which instruments are called weak.
pub const WEAK_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Ols,
    Tsls,
}

/// Cluster codes (dense, any order) plus the absorbed parameter count that
/// enters the small-sample factor.
#[derive(Debug, Clone, Copy)]
pub struct ClusterSpec<'a> {
    pub codes: &'a [u32],
    /// Absorbed fixed-effect parameters counted in K_effective.
    pub absorbed_dof: usize,
    /// False when `absorbed_dof` is only a bound.
    pub dof_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvDiagnostics {
    pub instruments: Vec<String>,
    /// Cluster-robust F on the excluded instruments, per endogenous regressor.
    pub first_stage_f: Vec<f64>,
    /// Homoskedastic Cragg–Donald minimum-eigenvalue statistic.
    pub cragg_donald: f64,
    pub hansen_j: f64,
    pub hansen_p: f64,
    pub j_dof: usize,
    pub just_identified: bool,
    pub weak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub spec: String,
    pub method: Method,
    pub labels: Vec<String>,
    pub coef: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub n: usize,
    pub clusters: usize,
    pub k: usize,
    pub absorbed_dof: usize,
    pub k_effective: usize,
    /// Degrees of freedom of the t reference distribution (clusters - 1).
    pub df: usize,
    pub r2_within: f64,
    /// SEs rest on a bound for the absorbed parameter count.
    pub se_approximate: bool,
    /// Regressors removed because fixed effects absorbed them.
    pub omitted: Vec<String>,
    pub fixed_effects: Vec<String>,
    pub cluster: String,
    pub diagnostics: Option<IvDiagnostics>,
    /// Full-model fitted values outside [0, 1].
    pub fitted_outside_unit: usize,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl EstimationResult {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn coef_of(&self, label: &str) -> Option<f64> {
        self.index(label).map(|k| self.coef[k])
    }

    pub fn se_of(&self, label: &str) -> Option<f64> {
        self.index(label).map(|k| self.se[k])
    }

    /// Two-sided confidence interval from the t reference distribution.
    pub fn ci(&self, label: &str, level: f64) -> Option<(f64, f64)> {
        let k = self.index(label)?;
        let q = t_quantile(1.0 - (1.0 - level) / 2.0, self.df);
        Some((self.coef[k] - q * self.se[k], self.coef[k] + q * self.se[k]))
    }
}

fn t_quantile(p: f64, df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df.max(1) as f64)
        .map(|d| d.inverse_cdf(p))
        .unwrap_or(f64::NAN)
}

fn t_pvalue(t: f64, df: usize) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    StudentsT::new(0.0, 1.0, df.max(1) as f64)
        .map(|d| 2.0 * (1.0 - d.cdf(t.abs())))
        .unwrap_or(f64::NAN)
}

fn rank_tol<T: Scalar>() -> T {
    Float::max(T::of(1e-10), T::of(100.0) * <T as Float>::epsilon())
}

fn to_matrix<T: Scalar>(cols: &[Vec<T>], n: usize) -> DMatrix<T> {
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).copy_from_slice(c);
    }
    m
}

/// Least squares via thin QR on equilibrated columns.
struct Ls<T: Scalar> {
    qr: nalgebra::linalg::QR<T, nalgebra::Dyn, nalgebra::Dyn>,
    r: DMatrix<T>,
    scale: Vec<T>,
}

impl<T: Scalar> Ls<T> {
    fn new(x: &DMatrix<T>, labels: &[String]) -> Result<Self> {
        let k = x.ncols();
        if x.nrows() < k {
            return Err(Error::Estimator(format!("{} observations for {k} regressors", x.nrows())));
        }
        let scale: Vec<T> = (0..k).map(|j| x.column(j).norm()).collect();
        let zero: Vec<String> = scale
            .iter()
            .zip(labels)
            .filter(|(s, _)| !(**s > T::zero()) || !Float::is_finite(**s))
            .map(|(_, l)| l.clone())
            .collect();
        if !zero.is_empty() {
            return Err(Error::Collinear { columns: zero });
        }
        let mut xs = x.clone();
        for (j, &s) in scale.iter().enumerate() {
            xs.column_mut(j).scale_mut(T::one() / s);
        }
        let qr = xs.qr();
        let r = qr.r();
        let sv = r.clone().singular_values();
        let smax = sv.iter().fold(T::zero(), |m, &v| Float::max(m, v));
        let cut = rank_tol::<T>() * smax;
        if sv.iter().any(|&v| v <= cut) {
            return Err(Error::Collinear {
                columns: collinear_columns(&r, cut, labels),
            });
        }
        Ok(Self { qr, r, scale })
    }

    /// Coefficients for each column of `rhs`.
    fn solve(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        let k = self.r.ncols();
        let mut q = rhs.clone();
        self.qr.q_tr_mul(&mut q);
        let top = q.rows(0, k).into_owned();
        let mut b = self.r.solve_upper_triangular(&top).expect("full rank checked");
        for (j, &s) in self.scale.iter().enumerate() {
            b.row_mut(j).scale_mut(T::one() / s);
        }
        b
    }

    /// `(X'X)^{-1}` in original units.
    fn xtx_inv(&self) -> DMatrix<T> {
        let k = self.r.ncols();
        let rinv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .expect("full rank checked");
        let mut m = &rinv * rinv.transpose();
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] /= self.scale[i] * self.scale[j];
            }
        }
        m
    }
}

/// Columns that add no rank to the ones before them.
fn collinear_columns<T: Scalar>(r: &DMatrix<T>, cut: T, labels: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut prev = 0;
    for (j, label) in labels.iter().enumerate().take(r.ncols()) {
        let block = r.view((0, 0), (j + 1, j + 1)).into_owned();
        let rank = block.singular_values().iter().filter(|&&v| v > cut).count();
        if rank == prev {
            out.push(label.clone());
        }
        prev = rank;
    }
    out
}

fn dense_clusters(codes: &[u32]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let dense = codes
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect();
    (dense, map.len())
}

/// Σ_g s_g s_g' with s_g = Σ_{i∈g} x_i e_i.
fn cluster_meat<T: Scalar>(x: &DMatrix<T>, e: &DVector<T>, clusters: &[usize], g: usize) -> DMatrix<T> {
    let k = x.ncols();
    let mut scores = DMatrix::<T>::zeros(k, g);
    for j in 0..k {
        let col = x.column(j);
        for (i, &c) in clusters.iter().enumerate() {
            scores[(j, c)] += col[i] * e[i];
        }
    }
    &scores * scores.transpose()
}

fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let k = m.nrows();
    for i in 0..k {
        for j in 0..i {
            let v = (m[(i, j)] + m[(j, i)]) * T::of(0.5);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn cr1_factor(n: usize, g: usize, k_eff: usize) -> Result<f64> {
    if g < 2 {
        return Err(Error::Estimator(format!("{g} cluster(s); at least 2 are needed")));
    }
    if n <= k_eff {
        return Err(Error::Estimator(format!("{n} observations cannot support {k_eff} parameters")));
    }
    Ok((g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k_eff) as f64))
}

fn check_lengths<T>(y: &[T], cols: &[&[Vec<T>]], clusters: &ClusterSpec<'_>) -> Result<usize> {
    let n = y.len();
    if clusters.codes.len() != n || cols.iter().flat_map(|c| c.iter()).any(|c| c.len() != n) {
        return Err(Error::Estimator("column lengths differ".into()));
    }
    if n == 0 {
        return Err(Error::Estimator("empty estimation sample".into()));
    }
    Ok(n)
}

fn finish<T: Scalar>(
    method: Method,
    labels: Vec<String>,
    beta: DVector<T>,
    vcov: DMatrix<T>,
    resid: &DVector<T>,
    y: &DVector<T>,
    n: usize,
    g: usize,
    k_eff: usize,
    clusters: &ClusterSpec<'_>,
) -> EstimationResult {
    let k = labels.len();
    let df = g - 1;
    let coef: Vec<f64> = beta.iter().map(|v| v.to_f64_lossy()).collect();
    let vc: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| vcov[(i, j)].to_f64_lossy()).collect()).collect();
    let se: Vec<f64> = (0..k).map(|i| vc[i][i].max(0.0).sqrt()).collect();
    let t: Vec<f64> = coef.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p = t.iter().map(|&t| t_pvalue(t, df)).collect();
    let ssr = resid.norm_squared().to_f64_lossy();
    let sst = y.norm_squared().to_f64_lossy();
    EstimationResult {
        spec: String::new(),
        method,
        labels,
        coef,
        vcov: vc,
        se,
        t,
        p,
        n,
        clusters: g,
        k,
        absorbed_dof: clusters.absorbed_dof,
        k_effective: k_eff,
        df,
        r2_within: if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN },
        se_approximate: !clusters.dof_exact,
        omitted: Vec::new(),
        fixed_effects: Vec::new(),
        cluster: String::new(),
        diagnostics: None,
        fitted_outside_unit: 0,
        residuals: resid.iter().map(|v| v.to_f64_lossy()).collect(),
    }
}

/// OLS of absorbed `y` on absorbed columns `x`.
pub fn ols<T: Scalar>(y: &[T], x: &[Vec<T>], labels: &[String], clusters: &ClusterSpec<'_>) -> Result<EstimationResult> {
    let n = check_lengths(y, &[x], clusters)?;
    if x.is_empty() {
        return Err(Error::Estimator("no regressors".into()));
    }
    let xm = to_matrix(x, n);
    let yv = DVector::from_column_slice(y);
    let ls = Ls::new(&xm, labels)?;
    let beta = ls.solve(&DMatrix::from_column_slice(n, 1, y)).column(0).into_owned();
    let resid = &yv - &xm * &beta;
    let (cl, g) = dense_clusters(clusters.codes);
    let k_eff = x.len() + clusters.absorbed_dof;
    let c = cr1_factor(n, g, k_eff)?;
    let bread = ls.xtx_inv();
    let meat = cluster_meat(&xm, &resid, &cl, g);
    let mut v = &bread * meat * &bread * T::of(c);
    symmetrize(&mut v);
    Ok(finish(Method::Ols, labels.to_vec(), beta, v, &resid, &yv, n, g, k_eff, clusters))
}

/// Inputs of a 2SLS fit; all columns already absorbed.
#[derive(Debug, Clone, Copy)]
pub struct IvData<'a, T> {
    pub y: &'a [T],
    pub endog: &'a [Vec<T>],
    pub exog: &'a [Vec<T>],
    /// Excluded instruments.
    pub instruments: &'a [Vec<T>],
    pub endog_labels: &'a [String],
    pub exog_labels: &'a [String],
    pub instrument_labels: &'a [String],
}

/// Two-stage least squares with CR1 covariance built from the projected
/// regressors and structural residuals.
pub fn tsls<T: Scalar>(d: &IvData<'_, T>, clusters: &ClusterSpec<'_>) -> Result<EstimationResult> {
    let n = check_lengths(d.y, &[d.endog, d.exog, d.instruments], clusters)?;
    let (k1, l) = (d.endog.len(), d.instruments.len());
    if k1 == 0 {
        return Err(Error::Estimator("2SLS needs at least one endogenous regressor".into()));
    }
    if l < k1 {
        return Err(Error::Underidentified {
            instruments: l,
            endogenous: k1,
        });
    }
    let x_cols: Vec<Vec<T>> = d.endog.iter().chain(d.exog).cloned().collect();
    let z_cols: Vec<Vec<T>> = d.instruments.iter().chain(d.exog).cloned().collect();
    let x_labels: Vec<String> = d.endog_labels.iter().chain(d.exog_labels).cloned().collect();
    let z_labels: Vec<String> = d.instrument_labels.iter().chain(d.exog_labels).cloned().collect();
    let xm = to_matrix(&x_cols, n);
    let zm = to_matrix(&z_cols, n);
    let yv = DVector::from_column_slice(d.y);

    let zls = Ls::new(&zm, &z_labels)?;
    let xhat = &zm * zls.solve(&xm);
    let hat_labels: Vec<String> = x_labels.iter().map(|l| format!("fitted {l}")).collect();
    let xls = match Ls::new(&xhat, &hat_labels) {
        Ok(ls) => ls,
        Err(Error::Collinear { .. }) => {
            return Err(Error::Underidentified {
                instruments: l,
                endogenous: k1,
            })
        }
        Err(e) => return Err(e),
    };
    let beta = xls.solve(&DMatrix::from_column_slice(n, 1, d.y)).column(0).into_owned();
    let resid = &yv - &xm * &beta;
    let (cl, g) = dense_clusters(clusters.codes);
    let k_eff = x_cols.len() + clusters.absorbed_dof;
    let c = cr1_factor(n, g, k_eff)?;
    let bread = xls.xtx_inv();
    let meat = cluster_meat(&xhat, &resid, &cl, g);
    let mut v = &bread * meat * &bread * T::of(c);
    symmetrize(&mut v);

    let mut out = finish(Method::Tsls, x_labels, beta.clone(), v, &resid, &yv, n, g, k_eff, clusters);

    let fs = first_stage_diagnostics(d.endog, d.instruments, d.exog, clusters)?;
    let j_dof = l - k1;
    let (j, jp) = if j_dof == 0 {
        (0.0, 1.0)
    } else {
        let e_gmm = efficient_gmm_residuals(&xm, &zm, &yv, &resid, &cl, g)?;
        let e: Vec<T> = e_gmm.iter().copied().collect();
        let h = hansen_j(&e, &z_cols, clusters.codes, j_dof, c)?;
        (h.statistic, h.p)
    };
    let weak = fs.first_stage_f.iter().any(|&f| f < WEAK_F);
    if weak {
        log::warn!(
            "weak instruments: first-stage F {:?} below {WEAK_F}",
            fs.first_stage_f
        );
    }
    out.diagnostics = Some(IvDiagnostics {
        instruments: d.instrument_labels.to_vec(),
        first_stage_f: fs.first_stage_f,
        cragg_donald: fs.cragg_donald,
        hansen_j: j,
        hansen_p: jp,
        j_dof,
        just_identified: j_dof == 0,
        weak,
    });
    Ok(out)
}

/// Residuals of two-step GMM weighted by the inverse cluster moment
/// covariance at the 2SLS residuals.
fn efficient_gmm_residuals<T: Scalar>(
    x: &DMatrix<T>,
    z: &DMatrix<T>,
    y: &DVector<T>,
    e0: &DVector<T>,
    cl: &[usize],
    g: usize,
) -> Result<DVector<T>> {
    let s = cluster_meat(z, e0, cl, g);
    let w = pinv_sym(&s)?;
    let zx = z.transpose() * x;
    let zy = z.transpose() * y;
    let a = zx.transpose() * &w * &zx;
    let b = zx.transpose() * &w * zy;
    let beta = pinv_sym(&a)? * b;
    Ok(y - x * beta)
}

/// Inverse of a symmetric PSD matrix on its numerical range.
fn pinv_sym<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let k = m.nrows();
    // equilibrate to keep the eigen cut meaningful across scales
    let d: Vec<T> = (0..k)
        .map(|i| {
            let v = m[(i, i)];
            if v > T::zero() {
                T::one() / Float::sqrt(v)
            } else {
                T::one()
            }
        })
        .collect();
    let mut s = m.clone();
    for i in 0..k {
        for j in 0..k {
            s[(i, j)] *= d[i] * d[j];
        }
    }
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let emax = eig.eigenvalues.iter().fold(T::zero(), |a, &v| Float::max(a, Float::abs(v)));
    if !(emax > T::zero()) {
        return Err(Error::Estimator("moment covariance is zero".into()));
    }
    let cut = rank_tol::<T>() * emax;
    let inv_vals = eig.eigenvalues.map(|v| if v > cut { T::one() / v } else { T::zero() });
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    for i in 0..k {
        for j in 0..k {
            out[(i, j)] *= d[i] * d[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HansenJ {
    pub statistic: f64,
    pub p: f64,
    pub dof: usize,
    pub just_identified: bool,
}

/// `J = (Σ Z'e)' [c Σ_g s_g s_g']^{-1} (Σ Z'e)` with chi-square(`dof`) p-value.
/// `c` is the small-sample factor applied to the moment covariance; 2SLS
/// passes the same CR1 factor as its coefficient covariance, since residuals
/// net of absorbed effects understate the score variance.
/// `dof = 0` (just identified) gives J = 0, p = 1.
pub fn hansen_j<T: Scalar>(residuals: &[T], z: &[Vec<T>], clusters: &[u32], dof: usize, c: f64) -> Result<HansenJ> {
    if dof == 0 {
        return Ok(HansenJ {
            statistic: 0.0,
            p: 1.0,
            dof,
            just_identified: true,
        });
    }
    let n = residuals.len();
    if clusters.len() != n || z.iter().any(|c| c.len() != n) {
        return Err(Error::Estimator("column lengths differ".into()));
    }
    let zm = to_matrix(z, n);
    let e = DVector::from_column_slice(residuals);
    let (cl, g) = dense_clusters(clusters);
    let s = cluster_meat(&zm, &e, &cl, g);
    let gbar = zm.transpose() * &e;
    if !(c > 0.0) {
        return Err(Error::Estimator(format!("small-sample factor must be positive, got {c}")));
    }
    let j = (gbar.transpose() * pinv_sym(&s)? * &gbar)[(0, 0)].to_f64_lossy().max(0.0) / c;
    let p = ChiSquared::new(dof as f64).map(|d| 1.0 - d.cdf(j)).unwrap_or(f64::NAN);
    Ok(HansenJ {
        statistic: j,
        p,
        dof,
        just_identified: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub first_stage_f: Vec<f64>,
    pub cragg_donald: f64,
}

/// Per-regressor cluster-robust F on the excluded instruments and the
/// Cragg–Donald minimum-eigenvalue statistic.
pub fn first_stage_diagnostics<T: Scalar>(
    endog: &[Vec<T>],
    instruments: &[Vec<T>],
    exog: &[Vec<T>],
    clusters: &ClusterSpec<'_>,
) -> Result<FirstStage> {
    let n = clusters.codes.len();
    let (k1, l, k2) = (endog.len(), instruments.len(), exog.len());
    let z_cols: Vec<Vec<T>> = instruments.iter().chain(exog).cloned().collect();
    let z_labels: Vec<String> = (0..z_cols.len()).map(|j| format!("z{j}")).collect();
    let zm = to_matrix(&z_cols, n);
    let xm = to_matrix(endog, n);
    let zls = Ls::new(&zm, &z_labels)?;
    let pi = zls.solve(&xm);
    let fitted = &zm * &pi;
    let bread = zls.xtx_inv();
    let (cl, g) = dense_clusters(clusters.codes);
    let k_eff = l + k2 + clusters.absorbed_dof;
    let c = cr1_factor(n, g, k_eff)?;

    let mut fs = Vec::with_capacity(k1);
    for k in 0..k1 {
        let e: DVector<T> = xm.column(k) - fitted.column(k);
        let meat = cluster_meat(&zm, &e, &cl, g);
        let v = &bread * meat * &bread * T::of(c);
        let vb = v.view((0, 0), (l, l)).into_owned();
        let b = pi.view((0, k), (l, 1)).into_owned();
        let f = match pinv_sym(&vb) {
            Ok(vi) => (b.transpose() * vi * &b)[(0, 0)].to_f64_lossy() / l as f64,
            Err(_) => F_CAP,
        };
        fs.push(if f.is_finite() { f.min(F_CAP) } else { F_CAP });
    }

    // Cragg-Donald after partialling out the included exogenous columns
    let (xt, zt) = if k2 > 0 {
        let w = to_matrix(exog, n);
        let wl: Vec<String> = (0..k2).map(|j| format!("w{j}")).collect();
        let wls = Ls::new(&w, &wl)?;
        let zex = to_matrix(instruments, n);
        (&xm - &w * wls.solve(&xm), &zex - &w * wls.solve(&zex))
    } else {
        (xm.clone(), to_matrix(instruments, n))
    };
    let ztl: Vec<String> = (0..l).map(|j| format!("z{j}")).collect();
    let zt_ls = Ls::new(&zt, &ztl)?;
    let xhat = &zt * zt_ls.solve(&xt);
    let explained = xhat.transpose() * &xhat;
    let resid = &xt - &xhat;
    let dof = n.saturating_sub(l + k2 + clusters.absorbed_dof).max(1);
    let sigma = resid.transpose() * &resid / T::of(dof as f64);
    let cd = match sigma.clone().cholesky() {
        Some(ch) => {
            let lo = ch.l();
            let a = lo.solve_lower_triangular(&explained).expect("triangular");
            let mut m = lo.solve_lower_triangular(&a.transpose()).expect("triangular");
            symmetrize(&mut m);
            let min = SymmetricEigen::new(m)
                .eigenvalues
                .iter()
                .fold(T::infinity(), |a, &v| Float::min(a, v));
            (min.to_f64_lossy() / l as f64).min(F_CAP)
        }
        None => F_CAP,
    };
    Ok(FirstStage {
        first_stage_f: fs,
        cragg_donald: cd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn spec(codes: &[u32]) -> ClusterSpec<'_> {
        ClusterSpec {
            codes,
            absorbed_dof: 0,
            dof_exact: true,
        }
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn exact_fit() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let codes: Vec<u32> = (0..10).collect();
        let r = ols(&y, &[x], &labels(&["x"]), &spec(&codes)).unwrap();
        assert_relative_eq!(r.coef[0], 2.0, epsilon = 1e-12);
        assert!(r.se[0] < 1e-10);
    }

    #[test]
    fn duplicate_column_is_rank_error() {
        let x: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let codes: Vec<u32> = (0..10).collect();
        let err = ols(&x.clone(), &[x.clone(), vec![1.0; 10], x.clone()], &labels(&["a", "b", "c"]), &spec(&codes)).unwrap_err();
        match err {
            Error::Collinear { columns } => assert_eq!(columns, vec!["c".to_string()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn singleton_clusters_give_hc1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let x1 = normals(&mut rng, n);
        let x2 = normals(&mut rng, n);
        let y: Vec<f64> = (0..n).map(|i| x1[i] - 0.5 * x2[i] + x1[i].abs() * rng.sample::<f64, _>(StandardNormal)).collect();
        let codes: Vec<u32> = (0..n as u32).collect();
        let r = ols(&y, &[x1.clone(), x2.clone()], &labels(&["a", "b"]), &spec(&codes)).unwrap();
        // oracle: HC0 sandwich built by hand, times G/(G-1)·(N-1)/(N-K)
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x1[i] } else { x2[i] });
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let mut meat = DMatrix::<f64>::zeros(2, 2);
        for i in 0..n {
            let xi = x.row(i).transpose();
            meat += &xi * xi.transpose() * r.residuals[i].powi(2);
        }
        let c = (n as f64 / (n - 1) as f64) * ((n - 1) as f64 / (n - 2) as f64);
        let v = &xtx_inv * meat * &xtx_inv * c;
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(r.vcov[i][j], v[(i, j)], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn just_identified_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20;
        let z = normals(&mut rng, n);
        let u = normals(&mut rng, n);
        let x: Vec<f64> = (0..n).map(|i| z[i] + u[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.7 * x[i] + u[i]).collect();
        let codes: Vec<u32> = (0..n as u32).collect();
        let d = IvData {
            y: &y,
            endog: std::slice::from_ref(&x),
            exog: &[],
            instruments: std::slice::from_ref(&z),
            endog_labels: &labels(&["x"]),
            exog_labels: &[],
            instrument_labels: &labels(&["z"]),
        };
        let r = tsls(&d, &spec(&codes)).unwrap();
        let zy: f64 = z.iter().zip(&y).map(|(a, b)| a * b).sum();
        let zx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_relative_eq!(r.coef[0], zy / zx, max_relative = 1e-10);
        let diag = r.diagnostics.unwrap();
        assert!(diag.just_identified);
        assert_eq!((diag.hansen_j, diag.hansen_p), (0.0, 1.0));
    }

    #[test]
    fn self_instrumented_equals_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100;
        let x = normals(&mut rng, n);
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let codes: Vec<u32> = (0..n as u32).map(|i| i / 2).collect();
        let o = ols(&y, std::slice::from_ref(&x), &labels(&["x"]), &spec(&codes)).unwrap();
        let d = IvData {
            y: &y,
            endog: std::slice::from_ref(&x),
            exog: &[],
            instruments: std::slice::from_ref(&x),
            endog_labels: &labels(&["x"]),
            exog_labels: &[],
            instrument_labels: &labels(&["x"]),
        };
        let iv = tsls(&d, &spec(&codes)).unwrap();
        assert_relative_eq!(o.coef[0], iv.coef[0], max_relative = 1e-10);
        assert_relative_eq!(o.se[0], iv.se[0], max_relative = 1e-8);
        let fs = iv.diagnostics.unwrap().first_stage_f[0];
        assert_eq!(fs, F_CAP);
    }

    #[test]
    fn irrelevant_instrument_is_weak() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2000;
        let x = normals(&mut rng, n);
        let z = normals(&mut rng, n);
        let y: Vec<f64> = x.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect();
        let codes: Vec<u32> = (0..n as u32).collect();
        let d = IvData {
            y: &y,
            endog: &[x],
            exog: &[],
            instruments: &[z],
            endog_labels: &labels(&["x"]),
            exog_labels: &[],
            instrument_labels: &labels(&["z"]),
        };
        let diag = tsls(&d, &spec(&codes)).unwrap().diagnostics.unwrap();
        assert!(diag.weak);
        assert!(diag.first_stage_f[0] < 10.0);
    }

    #[test]
    fn underidentified() {
        let y = vec![1.0, 2.0, 3.0];
        let codes = [0, 1, 2];
        let d = IvData {
            y: &y,
            endog: &[y.clone(), y.clone()],
            exog: &[],
            instruments: std::slice::from_ref(&y),
            endog_labels: &labels(&["a", "b"]),
            exog_labels: &[],
            instrument_labels: &labels(&["z"]),
        };
        assert!(matches!(tsls(&d, &spec(&codes)), Err(Error::Underidentified { instruments: 1, endogenous: 2 })));
    }

    #[test]
    fn f32_matches_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 500;
        let x = normals(&mut rng, n);
        let y: Vec<f64> = x.iter().map(|v| 1.5 * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let codes: Vec<u32> = (0..n as u32).map(|i| i / 5).collect();
        let r64 = ols(&y, std::slice::from_ref(&x), &labels(&["x"]), &spec(&codes)).unwrap();
        let y32: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let r32 = ols(&y32, &[x32], &labels(&["x"]), &spec(&codes)).unwrap();
        assert_relative_eq!(r64.coef[0], r32.coef[0], max_relative = 1e-4);
        assert_relative_eq!(r64.se[0], r32.se[0], max_relative = 1e-3);
    }

    #[test]
    fn scaling_y_scales_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 300;
        let x = normals(&mut rng, n);
        let y: Vec<f64> = x.iter().map(|v| 0.2 * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let y3: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let codes: Vec<u32> = (0..n as u32).map(|i| i % 37).collect();
        let a = ols(&y, std::slice::from_ref(&x), &labels(&["x"]), &spec(&codes)).unwrap();
        let b = ols(&y3, std::slice::from_ref(&x), &labels(&["x"]), &spec(&codes)).unwrap();
        assert_relative_eq!(3.0 * a.coef[0], b.coef[0], max_relative = 1e-12);
        assert_relative_eq!(3.0 * a.se[0], b.se[0], max_relative = 1e-12);
        assert_relative_eq!(a.t[0], b.t[0], max_relative = 1e-12);
    }
}
