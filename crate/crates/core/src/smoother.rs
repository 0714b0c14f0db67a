//! Exact Gaussian posterior moments of the dual-subsystem model via
//! forward/backward smoothing on an input-augmented state, plus a dense
//! joint-Gaussian oracle for small instances.
//!
//! The channel samples are treated as white Gaussian inputs `v_r[k]`,
//! `v_c[k]` and appended to the state, so the augmented state at pulse `k`
//! is `xi[k] = [x_r[k]; x_c[k]; v_r[k]; v_c[k]]` with dimension `2n + 2`.
//! The augmented transition zeroes the input slots each step (inputs are
//! white) and the per-pulse process covariance carries both the injected
//! inputs and the process noise:
//!
//! ```text
//! xi[k] = Abar xi[k-1] + w[k]
//! w[k]  = fbar_r[k] v_r[k] + fbar_c[k] v_c[k] + [e_r[k]; e_c[k]; 0; 0]
//! y[k]  = c_row · xi[k] + z[k]
//! ```
//!
//! where `fbar_r[k] = [f_r[k]; 0; 1; 0]` and `fbar_c[k] = [0; f_c[k]; 0; 1]`.
//!
//! The scalar observation keeps every division in both passes a division by
//! the scalar innovation variance; no matrix is inverted anywhere. The
//! backward pass propagates the adjoint pair `(lambda, Lambda)` of the
//! modified Bryson-Frazier smoother and reads the smoothed moments off the
//! filtered quantities,
//!
//! ```text
//! m[k|K] = m[k|k] - P[k|k] lambda_tilde[k]
//! P[k|K] = P[k|k] - P[k|k] Lambda_tilde[k] P[k|k]
//! Cov(xi[k-1], xi[k] | y)
//!     = P[k-1|k-1] Abar^T Chat[k]^T (I - Lambda_tilde[k] P[k|k])
//! ```
//!
//! where `Chat[k] = I - gain[k] c_row` and the tilde adjoints carry the
//! information of pulses `k+1..K` only. Pairing with the filtered instead
//! of the predicted quantities matters numerically: the current pulse's
//! `1/S[k]` contribution enters through the Joseph-form filter update
//! rather than through a subtraction of near-cancelling large products,
//! which keeps the pass stable down to observation variances near 1e-12.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::em::PriorVariances;
use crate::error::{Error, Result};
use crate::model::{make_companion, simulate, ChannelPair, ModelParams};

const LN_2PI: f64 = 1.8378770664093453;

/// Negative posterior variances beyond this magnitude indicate a broken
/// model rather than roundoff and are reported instead of clipped.
const NEG_VARIANCE_TOL: f64 = 1e-10;

/// One of the two overlaid subsystems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    Radar,
    Comms,
}

/// The dual-subsystem model rewritten over the augmented state.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    /// Augmented dimension `2n + 2`.
    pub dim: usize,
    /// Per-subsystem state dimension `n`.
    pub state_dim: usize,
    pub num_pulses: usize,
    /// Transition with the two input slots zeroed each step.
    pub a_bar: DMatrix<f64>,
    /// Observation row over the augmented state (`c_out` padded with zeros).
    pub c_row: DVector<f64>,
    /// Injection direction of `v_r[k]` into the augmented noise.
    pub fbar_r: Vec<DVector<f64>>,
    /// Injection direction of `v_c[k]`.
    pub fbar_c: Vec<DVector<f64>>,
    pub sigma2_er: f64,
    pub sigma2_ec: f64,
    pub sigma2_z: f64,
    pub sigma2_vr: Vec<f64>,
    pub sigma2_vc: Vec<f64>,
}

impl AugmentedModel {
    pub fn new(model: &ModelParams, priors: &PriorVariances) -> Result<Self> {
        model.validate()?;
        priors.validate()?;
        let n = model.state_dim;
        let k = model.num_pulses;
        if priors.len() != k {
            return Err(Error::InvalidConfig(format!(
                "prior variance length {} does not match K={k}",
                priors.len()
            )));
        }
        let dim = 2 * n + 2;

        let mut a_bar = DMatrix::zeros(dim, dim);
        a_bar.view_mut((0, 0), (n, n)).copy_from(&model.a_r);
        a_bar.view_mut((n, n), (n, n)).copy_from(&model.a_c);

        let mut c_row = DVector::zeros(dim);
        c_row.rows_mut(0, 2 * n).copy_from(&model.c_out);

        let fbar_r = model
            .f_r
            .iter()
            .map(|f| {
                let mut v = DVector::zeros(dim);
                v.rows_mut(0, n).copy_from(f);
                v[2 * n] = 1.0;
                v
            })
            .collect();
        let fbar_c = model
            .f_c
            .iter()
            .map(|f| {
                let mut v = DVector::zeros(dim);
                v.rows_mut(n, n).copy_from(f);
                v[2 * n + 1] = 1.0;
                v
            })
            .collect();

        Ok(Self {
            dim,
            state_dim: n,
            num_pulses: k,
            a_bar,
            c_row,
            fbar_r,
            fbar_c,
            sigma2_er: model.sigma2_er,
            sigma2_ec: model.sigma2_ec,
            sigma2_z: model.sigma2_z,
            sigma2_vr: priors.sigma2_vr.clone(),
            sigma2_vc: priors.sigma2_vc.clone(),
        })
    }

    /// Writes the pulse-`k` process covariance into `q`.
    fn process_cov_into(&self, k: usize, q: &mut DMatrix<f64>) {
        let n = self.state_dim;
        q.fill(0.0);
        for i in 0..n {
            q[(i, i)] = self.sigma2_er;
            q[(n + i, n + i)] = self.sigma2_ec;
        }
        q.ger(self.sigma2_vr[k], &self.fbar_r[k], &self.fbar_r[k], 1.0);
        q.ger(self.sigma2_vc[k], &self.fbar_c[k], &self.fbar_c[k], 1.0);
    }
}

/// Smoothed posterior moments consumed by the M-step. All second moments
/// include the mean outer products (moments, not central covariances).
/// Lag quantities at the first pulse are zero because `x[0]` is exactly
/// known to be zero.
#[derive(Debug, Clone)]
pub struct SubsystemMoments {
    /// `E[x_k | y]`.
    pub m_x: Vec<DVector<f64>>,
    /// `E[x_k x_k^T | y]`.
    pub p_xx: Vec<DMatrix<f64>>,
    /// `E[x_{k-1} x_k^T | y]`.
    pub p_lag: Vec<DMatrix<f64>>,
    /// `E[v_k | y]`.
    pub m_v: Vec<f64>,
    /// `E[v_k^2 | y]`.
    pub m_v2: Vec<f64>,
    /// `E[v_k x_k | y]`.
    pub r_vx: Vec<DVector<f64>>,
    /// `E[v_k x_{k-1} | y]`.
    pub r_vx_prev: Vec<DVector<f64>>,
}

impl SubsystemMoments {
    fn zeros(n: usize, k: usize) -> Self {
        Self {
            m_x: vec![DVector::zeros(n); k],
            p_xx: vec![DMatrix::zeros(n, n); k],
            p_lag: vec![DMatrix::zeros(n, n); k],
            m_v: vec![0.0; k],
            m_v2: vec![0.0; k],
            r_vx: vec![DVector::zeros(n); k],
            r_vx_prev: vec![DVector::zeros(n); k],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub state_dim: usize,
    pub num_pulses: usize,
    pub radar: SubsystemMoments,
    pub comms: SubsystemMoments,
    /// `c_out · E[[x_r[k]; x_c[k]] | y]`.
    pub obs_mean: Vec<f64>,
    /// `E[(c_out · [x_r[k]; x_c[k]])^2 | y]`, the stacked second moment
    /// contracted with the observation row.
    pub obs_m2: Vec<f64>,
}

impl PosteriorMoments {
    fn zeros(n: usize, k: usize) -> Self {
        Self {
            state_dim: n,
            num_pulses: k,
            radar: SubsystemMoments::zeros(n, k),
            comms: SubsystemMoments::zeros(n, k),
            obs_mean: vec![0.0; k],
            obs_m2: vec![0.0; k],
        }
    }

    pub fn subsystem(&self, s: Subsystem) -> &SubsystemMoments {
        match s {
            Subsystem::Radar => &self.radar,
            Subsystem::Comms => &self.comms,
        }
    }
}

struct ForwardPass {
    m_filt: Vec<DVector<f64>>,
    p_filt: Vec<DMatrix<f64>>,
    innovation: Vec<f64>,
    innovation_var: Vec<f64>,
    gain: Vec<DVector<f64>>,
    loglik: f64,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn checked_variance(v: f64, pulse: usize, what: &str) -> Result<f64> {
    if v < -NEG_VARIANCE_TOL {
        Err(Error::DegenerateModel {
            pulse: pulse + 1,
            detail: format!("{what} variance {v:.6e} below -{NEG_VARIANCE_TOL:e}"),
        })
    } else {
        Ok(v.max(0.0))
    }
}

fn forward_filter(aug: &AugmentedModel, y: &[f64]) -> Result<ForwardPass> {
    let d = aug.dim;
    let k_total = aug.num_pulses;
    if y.len() != k_total {
        return Err(Error::InvalidConfig(format!(
            "observation length {} does not match K={k_total}",
            y.len()
        )));
    }

    let mut m_filt = Vec::with_capacity(k_total);
    let mut p_filt = Vec::with_capacity(k_total);
    let mut innovation = Vec::with_capacity(k_total);
    let mut innovation_var = Vec::with_capacity(k_total);
    let mut gain = Vec::with_capacity(k_total);
    let mut loglik = 0.0;

    // xi[0] = 0 exactly: zero mean, zero covariance.
    let mut m_prev = DVector::zeros(d);
    let mut p_prev = DMatrix::zeros(d, d);

    let a_bar_t = aug.a_bar.transpose();
    let mut q = DMatrix::zeros(d, d);
    let mut tmp = DMatrix::zeros(d, d);
    let mut cmat = DMatrix::zeros(d, d);
    let mut cmat_t = DMatrix::zeros(d, d);
    let mut pc = DVector::zeros(d);

    for k in 0..k_total {
        // Predict.
        let mut mp = DVector::zeros(d);
        mp.gemv(1.0, &aug.a_bar, &m_prev, 0.0);
        aug.process_cov_into(k, &mut q);
        tmp.gemm(1.0, &aug.a_bar, &p_prev, 0.0);
        let mut pp = q.clone();
        pp.gemm(1.0, &tmp, &a_bar_t, 1.0);
        symmetrize(&mut pp);

        // Scalar measurement update.
        pc.gemv(1.0, &pp, &aug.c_row, 0.0);
        let s = pc.dot(&aug.c_row) + aug.sigma2_z;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::DegenerateModel {
                pulse: k + 1,
                detail: format!("innovation variance {s:.6e} is not positive"),
            });
        }
        let innov = y[k] - aug.c_row.dot(&mp);
        let g = &pc / s;

        let mut mf = mp.clone();
        mf.axpy(innov, &g, 1.0);

        // Joseph-form update keeps the covariance PSD with tiny sigma2_z.
        cmat.fill_with_identity();
        cmat.ger(-1.0, &g, &aug.c_row, 1.0);
        cmat.transpose_to(&mut cmat_t);
        tmp.gemm(1.0, &cmat, &pp, 0.0);
        let mut pf = DMatrix::zeros(d, d);
        pf.gemm(1.0, &tmp, &cmat_t, 0.0);
        pf.ger(aug.sigma2_z, &g, &g, 1.0);
        symmetrize(&mut pf);

        loglik += -0.5 * (LN_2PI + s.ln() + innov * innov / s);

        m_prev = mf.clone();
        m_filt.push(mf);
        p_filt.push(pf.clone());
        p_prev = pf;
        innovation.push(innov);
        innovation_var.push(s);
        gain.push(g);
    }

    Ok(ForwardPass {
        m_filt,
        p_filt,
        innovation,
        innovation_var,
        gain,
        loglik,
    })
}

/// Marginal log-likelihood of `y` from the forward pass alone.
pub fn filter_log_likelihood(
    model: &ModelParams,
    priors: &PriorVariances,
    y: &[f64],
) -> Result<f64> {
    let aug = AugmentedModel::new(model, priors)?;
    let fp = forward_filter(&aug, y).map_err(|e| match e {
        Error::DegenerateModel { pulse, detail } if model.sigma2_z == 0.0 => {
            Error::DegenerateLikelihood(format!("pulse {pulse}: {detail}"))
        }
        other => other,
    })?;
    Ok(fp.loglik)
}

/// Exact posterior moments of the augmented trajectory given all `K`
/// observations. See the module docs for the recursion; the only divisions
/// are by scalar innovation variances.
pub fn smooth(model: &ModelParams, priors: &PriorVariances, y: &[f64]) -> Result<PosteriorMoments> {
    smooth_with_loglik(model, priors, y).map(|(m, _)| m)
}

/// `smooth` plus the marginal log-likelihood that the forward pass
/// computes along the way.
pub fn smooth_with_loglik(
    model: &ModelParams,
    priors: &PriorVariances,
    y: &[f64],
) -> Result<(PosteriorMoments, f64)> {
    let aug = AugmentedModel::new(model, priors)?;
    let fp = forward_filter(&aug, y)?;
    let moments = backward_smooth(&aug, &fp)?;
    Ok((moments, fp.loglik))
}

fn backward_smooth(aug: &AugmentedModel, fp: &ForwardPass) -> Result<PosteriorMoments> {
    let d = aug.dim;
    let n = aug.state_dim;
    let k_total = aug.num_pulses;
    let vr = 2 * n;
    let vc = 2 * n + 1;

    let mut out = PosteriorMoments::zeros(n, k_total);
    let mut m_sm = vec![DVector::zeros(d); k_total];

    let a_bar_t = aug.a_bar.transpose();
    let mut lambda = DVector::zeros(d);
    let mut big_lambda = DMatrix::zeros(d, d);
    let mut lam_hat = DVector::zeros(d);
    let mut big_lam_hat = DMatrix::zeros(d, d);
    let mut cmat = DMatrix::zeros(d, d);
    let mut cmat_t = DMatrix::zeros(d, d);
    let mut cmat_t_abar_t = DMatrix::zeros(d, d);
    let mut tmp = DMatrix::zeros(d, d);
    let mut p_sm = DMatrix::zeros(d, d);
    let mut cross = DMatrix::zeros(d, d);
    let mut u = DMatrix::zeros(d, d);
    let mut w = DMatrix::zeros(d, d);

    for k in (0..k_total).rev() {
        let s = fp.innovation_var[k];
        cmat.fill_with_identity();
        cmat.ger(-1.0, &fp.gain[k], &aug.c_row, 1.0);

        // Smoothed mean and covariance from the filtered quantities; the
        // tilde adjoints hold the information of pulses k+1..K.
        let mut m = fp.m_filt[k].clone();
        m.gemv(-1.0, &fp.p_filt[k], &lambda, 1.0);
        tmp.gemm(1.0, &fp.p_filt[k], &big_lambda, 0.0);
        p_sm.copy_from(&fp.p_filt[k]);
        p_sm.gemm(-1.0, &tmp, &fp.p_filt[k], 1.0);
        symmetrize(&mut p_sm);
        for i in 0..d {
            p_sm[(i, i)] = checked_variance(p_sm[(i, i)], k, "smoothed state")?;
        }

        // Pairwise joint with the previous pulse.
        if k > 0 {
            // U = P[k-1|k-1] (Chat Abar)^T, W = I - Lambda_tilde P[k|k].
            tmp.gemm(1.0, &cmat, &aug.a_bar, 0.0);
            tmp.transpose_to(&mut cmat_t_abar_t);
            u.gemm(1.0, &fp.p_filt[k - 1], &cmat_t_abar_t, 0.0);
            w.fill_with_identity();
            w.gemm(-1.0, &big_lambda, &fp.p_filt[k], 1.0);
            cross.gemm(1.0, &u, &w, 0.0);
        } else {
            cross.fill(0.0);
        }

        // lambda_hat = -c innov/s + Chat^T lambda_tilde, and the matrix
        // analogue; these fold pulse k's own measurement in, ready for the
        // transition back to pulse k-1.
        cmat.transpose_to(&mut cmat_t);
        lam_hat.gemv(1.0, &cmat_t, &lambda, 0.0);
        lam_hat.axpy(-fp.innovation[k] / s, &aug.c_row, 1.0);
        tmp.gemm(1.0, &cmat_t, &big_lambda, 0.0);
        big_lam_hat.gemm(1.0, &tmp, &cmat, 0.0);
        big_lam_hat.ger(1.0 / s, &aug.c_row, &aug.c_row, 1.0);
        symmetrize(&mut big_lam_hat);

        // Extract the per-subsystem moment families at pulse k. The mean
        // products of the lag moments are added in the fix-up pass below,
        // once the smoothed mean at k-1 exists.
        for (sub, base, vslot) in [(Subsystem::Radar, 0, vr), (Subsystem::Comms, n, vc)] {
            let sm = match sub {
                Subsystem::Radar => &mut out.radar,
                Subsystem::Comms => &mut out.comms,
            };
            let mv = m[vslot];
            let var_v = p_sm[(vslot, vslot)];
            sm.m_v[k] = mv;
            sm.m_v2[k] = var_v + mv * mv;
            for i in 0..n {
                sm.m_x[k][i] = m[base + i];
                sm.r_vx[k][i] = p_sm[(vslot, base + i)] + mv * m[base + i];
                for j in 0..n {
                    sm.p_xx[k][(i, j)] = p_sm[(base + i, base + j)] + m[base + i] * m[base + j];
                }
            }
            if k > 0 {
                for i in 0..n {
                    // Row index: component of xi[k-1]; column: of xi[k].
                    sm.r_vx_prev[k][i] = cross[(base + i, vslot)];
                    for j in 0..n {
                        sm.p_lag[k][(i, j)] = cross[(base + i, base + j)];
                    }
                }
            }
        }

        let c_mean = aug.c_row.dot(&m);
        let mut c_p = DVector::zeros(d);
        c_p.gemv(1.0, &p_sm, &aug.c_row, 0.0);
        // The contracted variance sums many entries, so its roundoff
        // tolerance scales with the diagonal magnitude it accumulates.
        let c_var_raw = c_p.dot(&aug.c_row);
        let scale: f64 = 1.0
            + (0..d)
                .map(|i| aug.c_row[i] * aug.c_row[i] * p_sm[(i, i)])
                .sum::<f64>();
        if c_var_raw < -NEG_VARIANCE_TOL * scale {
            return Err(Error::DegenerateModel {
                pulse: k + 1,
                detail: format!("observation variance {c_var_raw:.6e} below tolerance"),
            });
        }
        let c_var = c_var_raw.max(0.0);
        out.obs_mean[k] = c_mean;
        out.obs_m2[k] = c_var + c_mean * c_mean;
        m_sm[k] = m;

        // Propagate the adjoints one pulse back.
        let new_lambda = {
            let mut v = DVector::zeros(d);
            v.gemv(1.0, &a_bar_t, &lam_hat, 0.0);
            v
        };
        lambda = new_lambda;
        tmp.gemm(1.0, &a_bar_t, &big_lam_hat, 0.0);
        big_lambda.gemm(1.0, &tmp, &aug.a_bar, 0.0);
        symmetrize(&mut big_lambda);
    }

    // Fix-up: add the mean outer products to the lag moments.
    for k in 1..k_total {
        for sub in [Subsystem::Radar, Subsystem::Comms] {
            let sm = match sub {
                Subsystem::Radar => &mut out.radar,
                Subsystem::Comms => &mut out.comms,
            };
            let mv = sm.m_v[k];
            let m_prev = sm.m_x[k - 1].clone();
            let m_cur = sm.m_x[k].clone();
            for i in 0..n {
                sm.r_vx_prev[k][i] += m_prev[i] * mv;
                for j in 0..n {
                    sm.p_lag[k][(i, j)] += m_prev[i] * m_cur[j];
                }
            }
        }
    }

    Ok(out)
}

/// Hard cap on `K * (2n + 2)` for the dense oracle.
pub const DENSE_ORACLE_MAX: usize = 512;

/// Ground-truth smoother: assembles the joint Gaussian over the full
/// augmented trajectory by explicit linear-map composition, conditions on
/// `y` with dense linear algebra, and reads off the same moment families as
/// [`smooth`]. Only usable for small instances.
pub fn dense_oracle(
    model: &ModelParams,
    priors: &PriorVariances,
    y: &[f64],
) -> Result<PosteriorMoments> {
    dense_oracle_with_loglik(model, priors, y).map(|(m, _)| m)
}

/// [`dense_oracle`] plus the dense-route marginal log-likelihood of `y`.
pub fn dense_oracle_with_loglik(
    model: &ModelParams,
    priors: &PriorVariances,
    y: &[f64],
) -> Result<(PosteriorMoments, f64)> {
    model.validate()?;
    priors.validate()?;
    let n = model.state_dim;
    let k_total = model.num_pulses;
    let d = 2 * n + 2;
    let total = k_total * d;
    if total > DENSE_ORACLE_MAX {
        return Err(Error::OversizeOracle {
            size: total,
            max: DENSE_ORACLE_MAX,
        });
    }
    if y.len() != k_total || priors.len() != k_total {
        return Err(Error::InvalidConfig(
            "observation/prior lengths do not match K".into(),
        ));
    }

    // Augmented transition and per-pulse process covariance, built directly
    // from the model so this path stays independent of AugmentedModel.
    let mut a_bar = DMatrix::zeros(d, d);
    a_bar.view_mut((0, 0), (n, n)).copy_from(&model.a_r);
    a_bar.view_mut((n, n), (n, n)).copy_from(&model.a_c);
    let a_bar_t = a_bar.transpose();

    let q_at = |k: usize| -> DMatrix<f64> {
        let mut q = DMatrix::zeros(d, d);
        for i in 0..n {
            q[(i, i)] = model.sigma2_er;
            q[(n + i, n + i)] = model.sigma2_ec;
        }
        let mut fr = DVector::zeros(d);
        fr.rows_mut(0, n).copy_from(&model.f_r[k]);
        fr[2 * n] = 1.0;
        let mut fc = DVector::zeros(d);
        fc.rows_mut(n, n).copy_from(&model.f_c[k]);
        fc[2 * n + 1] = 1.0;
        q.ger(priors.sigma2_vr[k], &fr, &fr, 1.0);
        q.ger(priors.sigma2_vc[k], &fc, &fc, 1.0);
        q
    };

    // Joint prior covariance of (xi[1], ..., xi[K]):
    //   diag blocks  C_k = Abar C_{k-1} Abar^T + Q_k
    //   off-diagonal Cov(xi_k, xi_l) = C_k (Abar^T)^{l-k} for l > k.
    let mut sigma = DMatrix::zeros(total, total);
    let mut diag_prev = DMatrix::zeros(d, d);
    for k in 0..k_total {
        let mut c_k = q_at(k);
        c_k += &a_bar * &diag_prev * &a_bar_t;
        sigma.view_mut((k * d, k * d), (d, d)).copy_from(&c_k);
        let mut right = c_k.clone();
        for l in (k + 1)..k_total {
            right *= &a_bar_t;
            sigma.view_mut((k * d, l * d), (d, d)).copy_from(&right);
            sigma
                .view_mut((l * d, k * d), (d, d))
                .copy_from(&right.transpose());
        }
        diag_prev = c_k;
    }

    // Observation map and conditioning.
    let mut h = DMatrix::zeros(k_total, total);
    for k in 0..k_total {
        for i in 0..(2 * n) {
            h[(k, k * d + i)] = model.c_out[i];
        }
    }
    let mut sigma_y = &h * &sigma * h.transpose();
    for k in 0..k_total {
        sigma_y[(k, k)] += model.sigma2_z;
    }
    let chol = sigma_y.clone().cholesky().ok_or_else(|| {
        Error::DegenerateLikelihood("observation covariance is not positive definite".into())
    })?;

    let y_vec = DVector::from_column_slice(y);
    let alpha = chol.solve(&y_vec);
    let sigma_ht = &sigma * h.transpose();
    let mean = &sigma_ht * &alpha;
    let solved = chol.solve(&sigma_ht.transpose());
    let post_cov = &sigma - &sigma_ht * solved;

    let mut logdet = 0.0;
    for k in 0..k_total {
        logdet += 2.0 * chol.l_dirty()[(k, k)].ln();
    }
    let loglik = -0.5 * (k_total as f64 * LN_2PI + logdet + y_vec.dot(&alpha));

    // Read off the moment families by direct indexing into the joint.
    let mut out = PosteriorMoments::zeros(n, k_total);
    let vr = 2 * n;
    let vc = 2 * n + 1;
    for k in 0..k_total {
        let b = k * d;
        for (sub, base, vslot) in [(Subsystem::Radar, 0usize, vr), (Subsystem::Comms, n, vc)] {
            let sm = match sub {
                Subsystem::Radar => &mut out.radar,
                Subsystem::Comms => &mut out.comms,
            };
            let mv = mean[b + vslot];
            sm.m_v[k] = mv;
            sm.m_v2[k] = post_cov[(b + vslot, b + vslot)] + mv * mv;
            for i in 0..n {
                sm.m_x[k][i] = mean[b + base + i];
                sm.r_vx[k][i] =
                    post_cov[(b + vslot, b + base + i)] + mv * mean[b + base + i];
                for j in 0..n {
                    sm.p_xx[k][(i, j)] = post_cov[(b + base + i, b + base + j)]
                        + mean[b + base + i] * mean[b + base + j];
                }
            }
            if k > 0 {
                let bp = (k - 1) * d;
                for i in 0..n {
                    sm.r_vx_prev[k][i] = post_cov[(bp + base + i, b + vslot)]
                        + mean[bp + base + i] * mv;
                    for j in 0..n {
                        sm.p_lag[k][(i, j)] = post_cov[(bp + base + i, b + base + j)]
                            + mean[bp + base + i] * mean[b + base + j];
                    }
                }
            }
        }
        let mut c_mean = 0.0;
        let mut c_var = 0.0;
        for i in 0..(2 * n) {
            c_mean += model.c_out[i] * mean[b + i];
            for j in 0..(2 * n) {
                c_var += model.c_out[i] * post_cov[(b + i, b + j)] * model.c_out[j];
            }
        }
        out.obs_mean[k] = c_mean;
        out.obs_m2[k] = c_var.max(0.0) + c_mean * c_mean;
    }
    Ok((out, loglik))
}

/// Largest absolute elementwise deviation across every moment family.
pub fn moments_max_deviation(a: &PosteriorMoments, b: &PosteriorMoments) -> f64 {
    let mut max_dev: f64 = 0.0;
    let mut upd = |x: f64, y: f64| {
        max_dev = max_dev.max((x - y).abs());
    };
    for (sa, sb) in [(&a.radar, &b.radar), (&a.comms, &b.comms)] {
        for k in 0..a.num_pulses {
            upd(sa.m_v[k], sb.m_v[k]);
            upd(sa.m_v2[k], sb.m_v2[k]);
            for i in 0..a.state_dim {
                upd(sa.m_x[k][i], sb.m_x[k][i]);
                upd(sa.r_vx[k][i], sb.r_vx[k][i]);
                upd(sa.r_vx_prev[k][i], sb.r_vx_prev[k][i]);
                for j in 0..a.state_dim {
                    upd(sa.p_xx[k][(i, j)], sb.p_xx[k][(i, j)]);
                    upd(sa.p_lag[k][(i, j)], sb.p_lag[k][(i, j)]);
                }
            }
        }
    }
    for k in 0..a.num_pulses {
        upd(a.obs_mean[k], b.obs_mean[k]);
        upd(a.obs_m2[k], b.obs_m2[k]);
    }
    max_dev
}

/// Outcome of the randomized smoother-vs-oracle equivalence suite.
#[derive(Debug, Clone)]
pub struct OracleCheckReport {
    pub instances: usize,
    pub max_moment_deviation: f64,
    pub max_loglik_deviation: f64,
}

impl OracleCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_moment_deviation < tolerance
    }
}

/// Runs `instances` randomized small instances (`K` in 2..=10, `n` in
/// 1..=3, random positive variances) and reports the worst deviation
/// between [`smooth`] and [`dense_oracle`] over all moment families, plus
/// the worst log-likelihood disagreement between the filter route and the
/// dense route.
pub fn oracle_check(instances: usize, seed: u64) -> Result<OracleCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_moment: f64 = 0.0;
    let mut max_loglik: f64 = 0.0;

    for _ in 0..instances {
        let n = rng.gen_range(1..=3usize);
        let k = rng.gen_range(2..=10usize);
        let coeffs_r = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let coeffs_c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let f_r: Vec<DVector<f64>> = (0..k)
            .map(|_| DVector::from_fn(n, |_, _| rng.sample(StandardNormal)))
            .collect();
        let f_c: Vec<DVector<f64>> = (0..k)
            .map(|_| DVector::from_fn(n, |_, _| rng.sample(StandardNormal)))
            .collect();
        let model = ModelParams::new(
            make_companion(&coeffs_r),
            make_companion(&coeffs_c),
            f_r,
            f_c,
            rng.gen_range(0.05..0.8),
            rng.gen_range(0.05..0.8),
            rng.gen_range(0.05..0.8),
            None,
        )?;
        let priors = PriorVariances {
            sigma2_vr: (0..k).map(|_| rng.gen_range(0.05..2.0)).collect(),
            sigma2_vc: (0..k).map(|_| rng.gen_range(0.05..2.0)).collect(),
        };
        // Draw channels from the priors and observe the simulated output.
        let h_r: Vec<f64> = priors
            .sigma2_vr
            .iter()
            .map(|s2| s2.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let h_c: Vec<f64> = priors
            .sigma2_vc
            .iter()
            .map(|s2| s2.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let channels = ChannelPair::new(h_r, h_c)?;
        let sim_seed = rng.gen::<u64>();
        let traj = simulate(&model, &channels, sim_seed)?;

        let (fast, ll_fast) = smooth_with_loglik(&model, &priors, &traj.y)?;
        let (dense, ll_dense) = dense_oracle_with_loglik(&model, &priors, &traj.y)?;
        max_moment = max_moment.max(moments_max_deviation(&fast, &dense));
        max_loglik = max_loglik.max((ll_fast - ll_dense).abs());
    }

    Ok(OracleCheckReport {
        instances,
        max_moment_deviation: max_moment,
        max_loglik_deviation: max_loglik,
    })
}
