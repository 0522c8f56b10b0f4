//! Class-conditional Gaussian mixture over reduced teacher features,
//! updated recursively one batch at a time.
//!
//! Per class `c`, with teacher soft assignments `w_i = f~_c(x_i)`:
//!
//! ```text
//! s_k   = a * s_{k-1} + sum_i w_i
//! mu_k  = (a * s_{k-1} * mu_{k-1} + sum_i w_i z_i) / s_k
//! Sig_k = (a * s_{k-1} * Sig_{k-1} + sum_i w_i (z_i - mu_k)(z_i - mu_k)^T) / s_k
//! ```
//!
//! The scatter term is taken about the *new* mean and the old covariance is
//! carried over without a mean-shift correction. Stored covariances are raw;
//! densities and Mahalanobis terms use `Sig + eps * I`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanteacher::check_alpha;

/// Classes whose accumulated weight is below this stay uninitialized.
pub const S_MIN: f64 = 1e-8;
/// Density assigned to uninitialized classes.
pub const DENSITY_FLOOR: f64 = 1e-300;
pub const DEFAULT_COV_REG: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmState {
    num_classes: usize,
    dim: usize,
    s: Vec<f64>,
    mu: Vec<DVector<f64>>,
    sigma: Vec<DMatrix<f64>>,
    alpha: f64,
    cov_reg: f64,
    initialized: Vec<bool>,
}

impl GmmState {
    pub fn new(num_classes: usize, dim: usize, alpha: f64, cov_reg: f64) -> Result<Self> {
        check_alpha("alpha_gmm", alpha)?;
        if !(cov_reg > 0.0) || !cov_reg.is_finite() {
            return Err(Error::config("cov_reg", "must be positive and finite"));
        }
        if num_classes == 0 || dim == 0 {
            return Err(Error::config(
                "gmm",
                "class count and dimension must be positive",
            ));
        }
        Ok(GmmState {
            num_classes,
            dim,
            s: vec![0.0; num_classes],
            mu: vec![DVector::zeros(dim); num_classes],
            sigma: vec![DMatrix::zeros(dim, dim); num_classes],
            alpha,
            cov_reg,
            initialized: vec![false; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.s
    }

    pub fn mean(&self, c: usize) -> &DVector<f64> {
        &self.mu[c]
    }

    pub fn covariance(&self, c: usize) -> &DMatrix<f64> {
        &self.sigma[c]
    }

    pub fn is_initialized(&self, c: usize) -> bool {
        self.initialized[c]
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn any_initialized(&self) -> bool {
        self.initialized.iter().any(|&b| b)
    }

    pub fn cov_reg(&self) -> f64 {
        self.cov_reg
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Class means stacked as a `C × dim` matrix.
    pub fn means_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_classes, self.dim, |c, j| self.mu[c][j])
    }

    /// One recursive update from a batch of teacher softmax rows and the
    /// matching reduced teacher features.
    pub fn update(&mut self, teacher_probs: &DMatrix<f64>, reduced: &DMatrix<f64>) -> Result<()> {
        let n = teacher_probs.nrows();
        if teacher_probs.ncols() != self.num_classes {
            return Err(Error::dim(
                "gmm_update probs",
                self.num_classes,
                teacher_probs.ncols(),
            ));
        }
        if reduced.ncols() != self.dim || reduced.nrows() != n {
            return Err(Error::dim(
                "gmm_update features",
                format!("{n}x{}", self.dim),
                format!("{}x{}", reduced.nrows(), reduced.ncols()),
            ));
        }
        if !reduced.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("gmm_update", "non-finite reduced feature"));
        }
        for i in 0..n {
            let row = teacher_probs.row(i);
            let sum: f64 = row.iter().sum();
            if !row.iter().all(|p| p.is_finite() && *p >= 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "teacher probabilities in row {i} are not on the simplex"
                )));
            }
        }

        let d = self.dim;
        for c in 0..self.num_classes {
            let carried = self.alpha * self.s[c];
            let batch_weight: f64 = teacher_probs.column(c).iter().sum();
            let s_new = carried + batch_weight;
            self.s[c] = s_new;
            if s_new < S_MIN || s_new == 0.0 {
                continue;
            }

            let mut mu_new = &self.mu[c] * carried;
            for i in 0..n {
                let w = teacher_probs[(i, c)];
                for j in 0..d {
                    mu_new[j] += w * reduced[(i, j)];
                }
            }
            mu_new /= s_new;

            let mut sig_new = &self.sigma[c] * carried;
            let mut diff = vec![0.0; d];
            for i in 0..n {
                let w = teacher_probs[(i, c)];
                for j in 0..d {
                    diff[j] = reduced[(i, j)] - mu_new[j];
                }
                for j in 0..d {
                    let wj = w * diff[j];
                    for k in j..d {
                        sig_new[(j, k)] += wj * diff[k];
                    }
                }
            }
            for j in 0..d {
                for k in j..d {
                    let v = sig_new[(j, k)] / s_new;
                    sig_new[(j, k)] = v;
                    sig_new[(k, j)] = v;
                }
            }

            self.mu[c] = mu_new;
            self.sigma[c] = sig_new;
            self.initialized[c] = true;
        }
        Ok(())
    }

    /// Factorizes every initialized class once so a batch can be scored.
    pub fn densities(&self) -> Result<ClassDensities<'_>> {
        let mut factors = Vec::with_capacity(self.num_classes);
        for c in 0..self.num_classes {
            if !self.initialized[c] {
                factors.push(None);
                continue;
            }
            let reg = regularize_cov(&self.sigma[c], self.cov_reg).map_err(|_| {
                Error::numerical(
                    "gmm covariance",
                    format!("class {c} is not positive definite after regularization"),
                )
            })?;
            let chol = Cholesky::new(reg).ok_or_else(|| {
                Error::numerical("gmm covariance", format!("class {c} failed Cholesky"))
            })?;
            let log_det = 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|v| v.ln())
                    .sum::<f64>();
            factors.push(Some(ClassFactor { chol, log_det }));
        }
        Ok(ClassDensities {
            state: self,
            factors,
        })
    }

    pub fn snapshot(&self) -> GmmSnapshot {
        GmmSnapshot {
            version: GmmSnapshot::VERSION,
            num_classes: self.num_classes,
            dim: self.dim,
            alpha: self.alpha,
            cov_reg: self.cov_reg,
            s: self.s.clone(),
            mu: self
                .mu
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            sigma: self
                .sigma
                .iter()
                .map(|m| m.transpose().iter().copied().collect())
                .collect(),
            initialized: self.initialized.clone(),
        }
    }

    pub fn from_snapshot(snap: &GmmSnapshot) -> Result<Self> {
        if snap.version != GmmSnapshot::VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported GMM snapshot version {}", snap.version),
            ));
        }
        let mut st = GmmState::new(snap.num_classes, snap.dim, snap.alpha, snap.cov_reg)?;
        let (c, d) = (snap.num_classes, snap.dim);
        if snap.s.len() != c
            || snap.mu.len() != c
            || snap.sigma.len() != c
            || snap.initialized.len() != c
            || snap.mu.iter().any(|m| m.len() != d)
            || snap.sigma.iter().any(|m| m.len() != d * d)
        {
            return Err(Error::dim(
                "GMM snapshot",
                format!("{c} classes, dim {d}"),
                "inconsistent arrays",
            ));
        }
        st.s = snap.s.clone();
        st.mu = snap.mu.iter().map(|m| DVector::from_row_slice(m)).collect();
        st.sigma = snap
            .sigma
            .iter()
            .map(|m| DMatrix::from_row_slice(d, d, m))
            .collect();
        st.initialized = snap.initialized.clone();
        Ok(st)
    }
}

/// Versioned, serializable checkpoint of a [`GmmState`]. Covariances are
/// stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSnapshot {
    pub version: u32,
    pub num_classes: usize,
    pub dim: usize,
    pub alpha: f64,
    pub cov_reg: f64,
    pub s: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub initialized: Vec<bool>,
}

impl GmmSnapshot {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

struct ClassFactor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

/// Per-class Cholesky factors of the regularized covariances.
pub struct ClassDensities<'a> {
    state: &'a GmmState,
    factors: Vec<Option<ClassFactor>>,
}

impl ClassDensities<'_> {
    pub fn num_classes(&self) -> usize {
        self.state.num_classes
    }

    fn check(&self, feat: &[f64]) -> Result<()> {
        if feat.len() != self.state.dim {
            return Err(Error::dim("gmm feature", self.state.dim, feat.len()));
        }
        Ok(())
    }

    /// `(z - mu)^T (Sig + eps I)^{-1} (z - mu)` for an initialized class.
    pub fn mahalanobis_sq(&self, feat: &[f64], c: usize) -> Result<Option<f64>> {
        self.check(feat)?;
        let Some(f) = &self.factors[c] else {
            return Ok(None);
        };
        let diff = DVector::from_fn(self.state.dim, |j, _| feat[j] - self.state.mu[c][j]);
        let y = f
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .ok_or_else(|| {
                Error::numerical("mahalanobis", format!("singular factor for class {c}"))
            })?;
        Ok(Some(y.norm_squared()))
    }

    /// Log multivariate-normal density per class; uninitialized classes get
    /// `ln(DENSITY_FLOOR)`.
    pub fn log_likelihoods(&self, feat: &[f64]) -> Result<Vec<f64>> {
        self.check(feat)?;
        let d = self.state.dim as f64;
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut out = Vec::with_capacity(self.state.num_classes);
        for c in 0..self.state.num_classes {
            let v = match (&self.factors[c], self.mahalanobis_sq(feat, c)?) {
                (Some(f), Some(q)) => -0.5 * (d * log_2pi + f.log_det + q),
                _ => DENSITY_FLOOR.ln(),
            };
            if !v.is_finite() {
                return Err(Error::numerical(
                    "likelihoods",
                    format!("non-finite density for class {c}"),
                ));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Class responsibilities for one feature. Uninitialized classes get
    /// zero mass whenever at least one class is initialized, so they can
    /// never win an argmax even when every initialized density is below
    /// the floor.
    pub fn responsibilities(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let mut ll = self.log_likelihoods(feat)?;
        if self.factors.iter().any(Option::is_some) {
            for (c, f) in self.factors.iter().enumerate() {
                if f.is_none() {
                    ll[c] = f64::NEG_INFINITY;
                }
            }
        }
        Ok(responsibilities_from_log(&ll))
    }

    /// Linear-space densities. These underflow quickly in high dimension;
    /// prefer [`Self::log_likelihoods`] plus [`responsibilities_from_log`].
    pub fn likelihoods(&self, feat: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .log_likelihoods(feat)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }
}

/// Normalizes nonnegative likelihoods onto the simplex.
pub fn responsibilities(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Contract(
            "likelihoods must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if sum == 0.0 {
        return Err(Error::Degenerate(
            "all class likelihoods are zero; sample is infinitely far from every class".into(),
        ));
    }
    Ok(p.iter().map(|v| v / sum).collect())
}

/// Responsibilities from log-likelihoods, normalized in log space.
pub fn responsibilities_from_log(log_p: &[f64]) -> Vec<f64> {
    crate::netcore::softmax(log_p)
}

/// Returns `sigma + eps * I`, failing if the result does not factorize.
pub fn regularize_cov(sigma: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let (r, c) = sigma.shape();
    if r != c {
        return Err(Error::dim(
            "regularize_cov",
            "square matrix",
            format!("{r}x{c}"),
        ));
    }
    let scale = sigma.amax().max(1.0);
    if (sigma - sigma.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Contract("covariance is not symmetric".into()));
    }
    let mut out = sigma.clone();
    for i in 0..r {
        out[(i, i)] += eps;
    }
    if Cholesky::new(out.clone()).is_none() {
        return Err(Error::numerical(
            "regularize_cov",
            "matrix is not positive definite after regularization",
        ));
    }
    Ok(out)
}
