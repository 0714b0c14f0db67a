//! Dual-subsystem linear state-space model: types, synthetic scene
//! generation, forward simulation and the exact marginal log-likelihood.
//!
//! The receiver observes, once per pulse `k`, a scalar superposition of two
//! hidden state vectors:
//!
//! ```text
//! x_r[k] = A_r x_r[k-1] + f_r[k] h_r[k] + e_r[k]
//! x_c[k] = A_c x_c[k-1] + f_c[k] h_c[k] + e_c[k]
//! y[k]   = c_out · [x_r[k]; x_c[k]] + z[k]
//! ```
//!
//! `A_r`, `A_c` are companion-form matrices, `f_s[k]` are per-pulse transmit
//! vectors and `h_s[k]` are sparse channel sequences (few nonzero pulses).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::em::PriorVariances;
use crate::error::{Error, Result};
use crate::smoother;

/// All deterministic system quantities of the dual-subsystem model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// State dimension per subsystem.
    pub state_dim: usize,
    /// Number of pulses `K`.
    pub num_pulses: usize,
    /// Radar state matrix, companion form.
    pub a_r: DMatrix<f64>,
    /// Communications state matrix, companion form.
    pub a_c: DMatrix<f64>,
    /// Per-pulse radar transmit vectors, length `K`.
    pub f_r: Vec<DVector<f64>>,
    /// Per-pulse communications transmit vectors, length `K`.
    pub f_c: Vec<DVector<f64>>,
    /// Radar process-noise variance (isotropic).
    pub sigma2_er: f64,
    /// Communications process-noise variance (isotropic).
    pub sigma2_ec: f64,
    /// Observation-noise variance.
    pub sigma2_z: f64,
    /// Observation row functional over the stacked `[x_r; x_c]` state,
    /// length `2n`. Defaults to all ones (sum of all state components).
    pub c_out: DVector<f64>,
}

impl ModelParams {
    pub fn new(
        a_r: DMatrix<f64>,
        a_c: DMatrix<f64>,
        f_r: Vec<DVector<f64>>,
        f_c: Vec<DVector<f64>>,
        sigma2_er: f64,
        sigma2_ec: f64,
        sigma2_z: f64,
        c_out: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = a_r.nrows();
        let k = f_r.len();
        let c_out = c_out.unwrap_or_else(|| DVector::from_element(2 * n, 1.0));
        let params = Self {
            state_dim: n,
            num_pulses: k,
            a_r,
            a_c,
            f_r,
            f_c,
            sigma2_er,
            sigma2_ec,
            sigma2_z,
            c_out,
        };
        params.validate()?;
        Ok(params)
    }

    /// Entrywise validation of every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim;
        let k = self.num_pulses;
        if n < 1 {
            return Err(Error::InvalidConfig("state dimension must be >= 1".into()));
        }
        if k < 1 {
            return Err(Error::InvalidConfig("number of pulses must be >= 1".into()));
        }
        for (name, a) in [("A_r", &self.a_r), ("A_c", &self.a_c)] {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::InvalidConfig(format!("{name} must be {n}x{n}")));
            }
            if !is_companion(a) {
                return Err(Error::InvalidConfig(format!(
                    "{name} is not in companion form"
                )));
            }
        }
        for (name, f) in [("F_r", &self.f_r), ("F_c", &self.f_c)] {
            if f.len() != k {
                return Err(Error::InvalidConfig(format!("{name} must have {k} pulses")));
            }
            if f.iter().any(|v| v.len() != n) {
                return Err(Error::InvalidConfig(format!(
                    "every {name} vector must have dimension {n}"
                )));
            }
        }
        for (name, v) in [
            ("sigma2_er", self.sigma2_er),
            ("sigma2_ec", self.sigma2_ec),
            ("sigma2_z", self.sigma2_z),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if self.c_out.len() != 2 * n {
            return Err(Error::InvalidConfig(format!(
                "c_out must have dimension {}",
                2 * n
            )));
        }
        Ok(())
    }

    /// Last row of a companion matrix: the free coefficient vector.
    pub fn companion_coeffs(a: &DMatrix<f64>) -> DVector<f64> {
        a.row(a.nrows() - 1).transpose()
    }
}

/// Builds the companion (controllable-form) matrix `S + e_n coeffs^T`:
/// ones on the first superdiagonal, `coeffs` in the last row, zeros
/// elsewhere. For `n = 1` there is no superdiagonal and the matrix is just
/// `[coeffs[0]]`.
pub fn make_companion(coeffs: &DVector<f64>) -> DMatrix<f64> {
    let n = coeffs.len();
    assert!(n >= 1, "companion matrix needs at least one coefficient");
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = coeffs[j];
    }
    a
}

/// Entrywise companion-form check: exact ones on the first superdiagonal,
/// exact zeros elsewhere outside the last row.
pub fn is_companion(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n != a.ncols() || n == 0 {
        return false;
    }
    for i in 0..n - 1 {
        for j in 0..n {
            let expected = if j == i + 1 { 1.0 } else { 0.0 };
            if a[(i, j)] != expected {
                return false;
            }
        }
    }
    true
}

/// The two sparse length-`K` channel sequences plus their support sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPair {
    pub h_r: Vec<f64>,
    pub h_c: Vec<f64>,
    /// Number of nonzeros in `h_r` (radar targets).
    pub num_targets: usize,
    /// Number of nonzeros in `h_c` (propagation paths).
    pub num_paths: usize,
}

impl ChannelPair {
    /// Wraps channel sequences, deriving the support sizes from the data.
    pub fn new(h_r: Vec<f64>, h_c: Vec<f64>) -> Result<Self> {
        if h_r.len() != h_c.len() {
            return Err(Error::InvalidConfig(
                "channel sequences must have equal length".into(),
            ));
        }
        let num_targets = h_r.iter().filter(|v| **v != 0.0).count();
        let num_paths = h_c.iter().filter(|v| **v != 0.0).count();
        Ok(Self {
            h_r,
            h_c,
            num_targets,
            num_paths,
        })
    }

    pub fn len(&self) -> usize {
        self.h_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_r.is_empty()
    }

    /// Indices of the nonzero pulses of `h_r`.
    pub fn support_r(&self) -> Vec<usize> {
        support_of(&self.h_r)
    }

    /// Indices of the nonzero pulses of `h_c`.
    pub fn support_c(&self) -> Vec<usize> {
        support_of(&self.h_c)
    }
}

fn support_of(h: &[f64]) -> Vec<usize> {
    h.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// States and observations produced by one forward simulation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x_r: Vec<DVector<f64>>,
    pub x_c: Vec<DVector<f64>>,
    pub y: Vec<f64>,
}

/// Distribution of the nonzero spike amplitudes in generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AmpDist {
    StandardNormal,
    Uniform { low: f64, high: f64 },
}

impl Default for AmpDist {
    fn default() -> Self {
        AmpDist::StandardNormal
    }
}

/// Generates a random scene: companion matrices with coefficients i.i.d.
/// uniform on (-1, 1) conditioned on Schur stability, per-pulse standard
/// normal transmit vectors, and channels with exactly `l` / `q` spikes at
/// distinct uniformly chosen pulses.
///
/// Deterministic given `seed`. Noise variances of the returned model are
/// zero; callers set them for their experiment. Sparsity is enforced as
/// `l, q <= K/10` so that generated configs stay in the sparse regime.
///
/// Unstable coefficient draws are rejected and redrawn: with a spectral
/// radius above one the state between spikes grows geometrically and
/// overflows within a few thousand pulses.
pub fn generate_scene(
    n: usize,
    k: usize,
    l: usize,
    q: usize,
    amp_dist: AmpDist,
    seed: u64,
) -> Result<(ModelParams, ChannelPair)> {
    if n < 1 || k < 1 {
        return Err(Error::InvalidConfig(
            "scene needs n >= 1 and K >= 1".into(),
        ));
    }
    if l > k || q > k {
        return Err(Error::InvalidConfig(format!(
            "support sizes l={l}, q={q} cannot exceed K={k}"
        )));
    }
    if l > k / 10 || q > k / 10 {
        return Err(Error::InvalidConfig(format!(
            "support sizes l={l}, q={q} exceed the sparse regime K/10={}",
            k / 10
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let a_r = draw_stable_companion(n, &mut rng);
    let a_c = draw_stable_companion(n, &mut rng);
    let f_r = draw_inputs(n, k, &mut rng);
    let f_c = draw_inputs(n, k, &mut rng);
    let h_r = draw_sparse_channel(k, l, amp_dist, &mut rng);
    let h_c = draw_sparse_channel(k, q, amp_dist, &mut rng);

    let model = ModelParams::new(a_r, a_c, f_r, f_c, 0.0, 0.0, 0.0, None)?;
    let channels = ChannelPair::new(h_r, h_c)?;
    Ok((model, channels))
}

fn draw_stable_companion(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    loop {
        let coeffs = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a = make_companion(&coeffs);
        let radius = a
            .complex_eigenvalues()
            .iter()
            .map(|ev| ev.norm())
            .fold(0.0, f64::max);
        if radius < 1.0 {
            return a;
        }
    }
}

fn draw_inputs(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..k)
        .map(|_| DVector::from_fn(n, |_, _| rng.sample(StandardNormal)))
        .collect()
}

fn draw_sparse_channel(k: usize, nnz: usize, amp_dist: AmpDist, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut h = vec![0.0; k];
    let locations = rand::seq::index::sample(rng, k, nnz);
    for idx in locations.iter() {
        let amp = loop {
            let a = match amp_dist {
                AmpDist::StandardNormal => rng.sample(StandardNormal),
                AmpDist::Uniform { low, high } => rng.gen_range(low..high),
            };
            // An exactly-zero amplitude would silently shrink the support.
            if a != 0.0 {
                break a;
            }
        };
        h[idx] = amp;
    }
    h
}

/// Runs the state recursions for `k = 1..K` from `x[0] = 0`, with process
/// noise `e_s[k] ~ N(0, sigma2_es I)` and observation noise
/// `z[k] ~ N(0, sigma2_z)`. Deterministic given `seed`; the noise stream
/// depends only on `(n, K, seed)`, so rescaling inputs or channels leaves
/// it untouched.
pub fn simulate(model: &ModelParams, channels: &ChannelPair, seed: u64) -> Result<Trajectory> {
    model.validate()?;
    let n = model.state_dim;
    let k = model.num_pulses;
    if channels.len() != k {
        return Err(Error::InvalidConfig(format!(
            "channel length {} does not match K={k}",
            channels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd_er = model.sigma2_er.sqrt();
    let sd_ec = model.sigma2_ec.sqrt();
    let sd_z = model.sigma2_z.sqrt();

    let mut x_r = Vec::with_capacity(k);
    let mut x_c = Vec::with_capacity(k);
    let mut y = Vec::with_capacity(k);
    let mut prev_r = DVector::zeros(n);
    let mut prev_c = DVector::zeros(n);
    let c_r = model.c_out.rows(0, n).into_owned();
    let c_c = model.c_out.rows(n, n).into_owned();

    for t in 0..k {
        let e_r = DVector::from_fn(n, |_, _| sd_er * rng.sample::<f64, _>(StandardNormal));
        let e_c = DVector::from_fn(n, |_, _| sd_ec * rng.sample::<f64, _>(StandardNormal));
        let z: f64 = sd_z * rng.sample::<f64, _>(StandardNormal);

        let xr = &model.a_r * &prev_r + &model.f_r[t] * channels.h_r[t] + e_r;
        let xc = &model.a_c * &prev_c + &model.f_c[t] * channels.h_c[t] + e_c;
        y.push(c_r.dot(&xr) + c_c.dot(&xc) + z);
        prev_r = xr.clone();
        prev_c = xc.clone();
        x_r.push(xr);
        x_c.push(xc);
    }
    Ok(Trajectory { x_r, x_c, y })
}

/// Exact Gaussian log-density of `y` under the model with the channel
/// entries integrated out against the per-pulse priors. Computed as the sum
/// of the scalar innovation log-densities of the forward filtering pass.
pub fn log_marginal_likelihood(
    model: &ModelParams,
    priors: &PriorVariances,
    y: &[f64],
) -> Result<f64> {
    smoother::filter_log_likelihood(model, priors, y)
}

/// Scene/trajectory JSON document. Arrays are row-major, numbers are
/// IEEE-754 doubles emitted at full precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub n: usize,
    #[serde(rename = "K")]
    pub num_pulses: usize,
    #[serde(rename = "A_r_coeffs")]
    pub a_r_coeffs: Vec<f64>,
    #[serde(rename = "A_c_coeffs")]
    pub a_c_coeffs: Vec<f64>,
    #[serde(rename = "F_r")]
    pub f_r: Vec<Vec<f64>>,
    #[serde(rename = "F_c")]
    pub f_c: Vec<Vec<f64>>,
    pub sigma2_er: f64,
    pub sigma2_ec: f64,
    pub sigma2_z: f64,
    pub h_r: Vec<f64>,
    pub h_c: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
}

impl SceneDocument {
    pub fn from_parts(
        model: &ModelParams,
        channels: &ChannelPair,
        y: &[f64],
        seed: u64,
    ) -> Self {
        let vec_of = |f: &[DVector<f64>]| f.iter().map(|v| v.iter().copied().collect()).collect();
        Self {
            n: model.state_dim,
            num_pulses: model.num_pulses,
            a_r_coeffs: ModelParams::companion_coeffs(&model.a_r).iter().copied().collect(),
            a_c_coeffs: ModelParams::companion_coeffs(&model.a_c).iter().copied().collect(),
            f_r: vec_of(&model.f_r),
            f_c: vec_of(&model.f_c),
            sigma2_er: model.sigma2_er,
            sigma2_ec: model.sigma2_ec,
            sigma2_z: model.sigma2_z,
            h_r: channels.h_r.clone(),
            h_c: channels.h_c.clone(),
            y: y.to_vec(),
            seed,
        }
    }

    /// Rebuilds the in-memory model, channels and observations.
    /// The observation functional is the all-ones default; it is not part
    /// of the document schema.
    pub fn into_parts(self) -> Result<(ModelParams, ChannelPair, Vec<f64>, u64)> {
        let n = self.n;
        if self.a_r_coeffs.len() != n || self.a_c_coeffs.len() != n {
            return Err(Error::InvalidConfig(
                "companion coefficient length does not match n".into(),
            ));
        }
        let to_vecs = |f: Vec<Vec<f64>>| -> Result<Vec<DVector<f64>>> {
            f.into_iter()
                .map(|v| {
                    if v.len() == n {
                        Ok(DVector::from_vec(v))
                    } else {
                        Err(Error::InvalidConfig(
                            "transmit vector length does not match n".into(),
                        ))
                    }
                })
                .collect()
        };
        let model = ModelParams::new(
            make_companion(&DVector::from_vec(self.a_r_coeffs)),
            make_companion(&DVector::from_vec(self.a_c_coeffs)),
            to_vecs(self.f_r)?,
            to_vecs(self.f_c)?,
            self.sigma2_er,
            self.sigma2_ec,
            self.sigma2_z,
            None,
        )?;
        if self.y.len() != model.num_pulses
            || self.h_r.len() != model.num_pulses
            || self.h_c.len() != model.num_pulses
        {
            return Err(Error::InvalidConfig(
                "y/h sequence lengths do not match K".into(),
            ));
        }
        let channels = ChannelPair::new(self.h_r, self.h_c)?;
        Ok((model, channels, self.y, self.seed))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn companion_placement() {
        let a = make_companion(&DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));

        let b = make_companion(&DVector::from_vec(vec![2.0, 4.0]));
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 4.0]));
        assert!(is_companion(&b));
    }

    #[test]
    fn companion_degenerate_1x1() {
        let a = make_companion(&DVector::from_vec(vec![-0.5]));
        assert_eq!(a, DMatrix::from_row_slice(1, 1, &[-0.5]));
        assert!(is_companion(&a));
    }

    #[test]
    fn scene_has_requested_supports() {
        let (model, channels) =
            generate_scene(4, 5000, 4, 4, AmpDist::StandardNormal, 1).unwrap();
        assert_eq!(channels.num_targets, 4);
        assert_eq!(channels.num_paths, 4);
        assert_eq!(model.num_pulses, 5000);
        assert!(is_companion(&model.a_r));
        assert!(is_companion(&model.a_c));
        // Stability of the rejected-sampled coefficients.
        for a in [&model.a_r, &model.a_c] {
            let radius = a
                .complex_eigenvalues()
                .iter()
                .map(|ev| ev.norm())
                .fold(0.0, f64::max);
            assert!(radius < 1.0, "spectral radius {radius} not stable");
        }
    }

    #[test]
    fn scene_empty_support() {
        let (_, channels) = generate_scene(1, 10, 0, 0, AmpDist::StandardNormal, 7).unwrap();
        assert!(channels.h_r.iter().all(|v| *v == 0.0));
        assert!(channels.h_c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scene_deterministic() {
        let (m1, c1) = generate_scene(3, 100, 2, 3, AmpDist::StandardNormal, 42).unwrap();
        let (m2, c2) = generate_scene(3, 100, 2, 3, AmpDist::StandardNormal, 42).unwrap();
        assert_eq!(m1.a_r, m2.a_r);
        assert_eq!(m1.f_c, m2.f_c);
        assert_eq!(c1, c2);
    }

    #[test]
    fn scene_rejects_oversize_support() {
        assert!(generate_scene(2, 10, 11, 0, AmpDist::StandardNormal, 0).is_err());
        assert!(generate_scene(2, 100, 3, 11, AmpDist::StandardNormal, 0).is_err());
    }

    #[test]
    fn simulate_one_step_zero_dynamics() {
        // n=1, A=0, f=1, no noise: y[k] = h_r[k] + h_c[k].
        let n = 1;
        let f = vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![1.0])];
        let model = ModelParams::new(
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            f.clone(),
            f,
            0.0,
            0.0,
            0.0,
            None,
        )
        .unwrap();
        let channels = ChannelPair::new(vec![1.0, 0.0], vec![0.0, 2.0]).unwrap();
        let traj = simulate(&model, &channels, 3).unwrap();
        assert_eq!(traj.y, vec![1.0, 2.0]);
    }

    #[test]
    fn simulate_zero_inputs_zero_trajectory() {
        let (mut model, _) = generate_scene(3, 50, 2, 2, AmpDist::StandardNormal, 5).unwrap();
        model.sigma2_er = 0.0;
        model.sigma2_ec = 0.0;
        model.sigma2_z = 0.0;
        let zero = ChannelPair::new(vec![0.0; 50], vec![0.0; 50]).unwrap();
        let traj = simulate(&model, &zero, 9).unwrap();
        assert!(traj.y.iter().all(|v| *v == 0.0));
        assert!(traj.x_r.iter().all(|x| x.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn simulate_deterministic_bitwise() {
        let (mut model, channels) =
            generate_scene(2, 80, 3, 3, AmpDist::StandardNormal, 11).unwrap();
        model.sigma2_er = 0.3;
        model.sigma2_ec = 0.2;
        model.sigma2_z = 0.1;
        let t1 = simulate(&model, &channels, 123).unwrap();
        let t2 = simulate(&model, &channels, 123).unwrap();
        assert_eq!(t1.y, t2.y);
        assert_eq!(t1.x_r, t2.x_r);
    }

    #[test]
    fn simulate_scale_invariance() {
        let (mut model, channels) =
            generate_scene(3, 60, 2, 2, AmpDist::StandardNormal, 21).unwrap();
        model.sigma2_er = 0.1;
        model.sigma2_ec = 0.1;
        model.sigma2_z = 0.05;
        let base = simulate(&model, &channels, 77).unwrap();

        let beta = 3.0;
        let mut scaled_model = model.clone();
        for f in scaled_model.f_r.iter_mut() {
            *f *= beta;
        }
        for f in scaled_model.f_c.iter_mut() {
            *f *= beta;
        }
        let scaled_channels = ChannelPair::new(
            channels.h_r.iter().map(|v| v / beta).collect(),
            channels.h_c.iter().map(|v| v / beta).collect(),
        )
        .unwrap();
        let scaled = simulate(&scaled_model, &scaled_channels, 77).unwrap();
        for (a, b) in base.y.iter().zip(scaled.y.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn simulate_dimension_mismatch() {
        let (model, _) = generate_scene(2, 30, 2, 2, AmpDist::StandardNormal, 2).unwrap();
        let wrong = ChannelPair::new(vec![0.0; 29], vec![0.0; 29]).unwrap();
        assert!(matches!(
            simulate(&model, &wrong, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn scene_document_roundtrip() {
        let (mut model, channels) =
            generate_scene(3, 40, 2, 2, AmpDist::StandardNormal, 13).unwrap();
        model.sigma2_z = 0.25;
        let traj = simulate(&model, &channels, 5).unwrap();
        let doc = SceneDocument::from_parts(&model, &channels, &traj.y, 13);
        let text = doc.to_json().unwrap();
        let back = SceneDocument::from_json(&text).unwrap();
        let (model2, channels2, y2, seed2) = back.into_parts().unwrap();
        assert_eq!(model.a_r, model2.a_r);
        assert_eq!(model.f_r, model2.f_r);
        assert_eq!(channels, channels2);
        assert_eq!(traj.y, y2);
        assert_eq!(seed2, 13);
    }

    #[test]
    fn scene_document_rejects_unknown_key() {
        let err = SceneDocument::from_json(r#"{"n":1,"K":1,"bogus":3}"#);
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("bogus"), "error should name the key: {msg}");
    }
}
