//! Data-driven initialization for the EM loop.
//!
//! Cold random starts rarely land in the joint basin where the state
//! matrices, transmit vectors and spike supports all agree, so this module
//! bootstraps them from the observations alone:
//!
//! 1. Between input kicks the observation sequence satisfies an exact
//!    autoregression of order `2n` whose polynomial is the product of the
//!    two subsystem characteristic polynomials. A trimmed least-squares fit
//!    recovers it; its residuals are nonzero only where inputs enter.
//! 2. Residual bursts give candidate spike onsets.
//! 3. Each onset's decay segment is decomposed over the modes (roots) of
//!    the fitted polynomial; clustering the per-onset mode-usage patterns
//!    into two groups splits the roots into the two subsystems and
//!    attributes every onset.
//! 4. Per-subsystem companion matrices are rebuilt from the grouped roots,
//!    onset pulses get kick vectors fitted to their segments, and the
//!    prior variances start wide at onsets and small elsewhere.
//!
//! Everything here is deterministic given `(y, n, seed)` and uses only the
//! observations; when any stage degenerates the caller falls back to the
//! plain random policy.

use nalgebra::{Complex, DMatrix, DVector};

use crate::model::make_companion;

/// Baseline prior variance away from detected onsets; small enough to
/// suppress spurious kicks, large enough that missed spikes can regrow.
const BASELINE_PRIOR: f64 = 0.1;

/// Longest decay segment used for modal fitting, in multiples of `2n`.
const SEGMENT_SPAN: usize = 6;

#[derive(Debug, Clone)]
pub struct DataDrivenInit {
    pub a_r: DVector<f64>,
    pub a_c: DVector<f64>,
    /// Onset pulses attributed to the radar subsystem with their fitted
    /// kick vectors; likewise for communications.
    pub kicks_r: Vec<(usize, DVector<f64>)>,
    pub kicks_c: Vec<(usize, DVector<f64>)>,
    pub sigma2_vr: Vec<f64>,
    pub sigma2_vc: Vec<f64>,
}

/// Runs the full pipeline. `None` means the observations do not support it
/// (all-zero data, too few informative rows, no detectable onsets).
pub fn data_driven_init(y: &[f64], n: usize) -> Option<DataDrivenInit> {
    let k_total = y.len();
    let order = 2 * n;
    if k_total < 6 * order {
        return None;
    }

    let phi = robust_ar_fit(y, order)?;
    let resid = ar_residuals(y, &phi);
    let onsets = detect_onsets(&resid, order, k_total / 10);
    if onsets.is_empty() {
        return None;
    }

    let roots = stabilized_roots(&phi);
    let modes = group_modes(&roots);
    if modes.iter().map(ModeGroup::dims).sum::<usize>() != order {
        return None;
    }

    // Per-onset mode usage profiles.
    let mut usages = Vec::with_capacity(onsets.len());
    for (idx, &k0) in onsets.iter().enumerate() {
        let end = onsets
            .get(idx + 1)
            .copied()
            .unwrap_or(k_total)
            .min(k0 + SEGMENT_SPAN * order)
            .min(k_total);
        usages.push(mode_usage(&y[k0..end], &modes));
    }

    let membership = cluster_two(&usages);
    let (roots_r, roots_c) = split_modes(&modes, &usages, &membership, n)?;
    let a_r = coeffs_from_roots(&roots_r, n)?;
    let a_c = coeffs_from_roots(&roots_c, n)?;

    // Kick vectors for all onsets, fitted jointly so overlapping decay
    // tails do not contaminate each other.
    let comp_r = make_companion(&a_r);
    let comp_c = make_companion(&a_c);
    let kicks = fit_kicks_jointly(y, &onsets, &membership, &comp_r, &comp_c);

    let mut kicks_r = Vec::new();
    let mut kicks_c = Vec::new();
    let mut sigma2_vr = vec![BASELINE_PRIOR; k_total];
    let mut sigma2_vc = vec![BASELINE_PRIOR; k_total];
    for ((&k0, &to_radar), kick) in onsets.iter().zip(&membership).zip(kicks) {
        if to_radar {
            sigma2_vr[k0] = 1.0;
            kicks_r.push((k0, kick));
        } else {
            sigma2_vc[k0] = 1.0;
            kicks_c.push((k0, kick));
        }
    }

    Some(DataDrivenInit {
        a_r,
        a_c,
        kicks_r,
        kicks_c,
        sigma2_vr,
        sigma2_vc,
    })
}

/// Joint ridge least squares for every onset's injected state vector: the
/// observations are modeled as the superposition of all onset responses
/// `ones^T A_s^m kick_i`, so overlapping transients are separated instead
/// of biasing one another.
fn fit_kicks_jointly(
    y: &[f64],
    onsets: &[usize],
    membership: &[bool],
    comp_r: &DMatrix<f64>,
    comp_c: &DMatrix<f64>,
) -> Vec<DVector<f64>> {
    let k_total = y.len();
    let n = comp_r.nrows();
    let n_onsets = onsets.len();
    let ncols = n_onsets * n;

    // Response of state coordinate j from pulse k0 on: ones^T A^m e_j.
    let mut design = DMatrix::<f64>::zeros(k_total, ncols);
    for (oi, (&k0, &to_radar)) in onsets.iter().zip(membership).enumerate() {
        let comp = if to_radar { comp_r } else { comp_c };
        // row(m) = ones^T A^m, advanced by right-multiplication.
        let mut row = nalgebra::RowDVector::<f64>::from_element(n, 1.0);
        for k in k0..k_total {
            let mag = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if mag < 1e-12 {
                break;
            }
            for j in 0..n {
                design[(k, oi * n + j)] = row[j];
            }
            row *= comp;
        }
    }

    let target = DVector::from_column_slice(y);
    let mut gram = design.transpose() * &design;
    let ridge = 1e-8 * gram.trace().max(1e-12) / ncols as f64;
    for i in 0..ncols {
        gram[(i, i)] += ridge;
    }
    let coef = match gram.cholesky() {
        Some(chol) => chol.solve(&(design.transpose() * &target)),
        None => DVector::zeros(ncols),
    };
    (0..n_onsets)
        .map(|oi| DVector::from_fn(n, |j, _| coef[oi * n + j]))
        .collect()
}

/// Trimmed least-squares autoregression `y[k] = sum_i phi[i] y[k-1-i]`.
///
/// Every row is normalized by its own window magnitude so late decay rows
/// inform the fit as much as the loud rows right after a kick, and rows at
/// the noise floor are excluded. Rows whose prediction window straddles an
/// input kick violate the recursion; iterative reweighting with a Cauchy
/// loss on the standardized residuals suppresses them.
fn robust_ar_fit(y: &[f64], order: usize) -> Option<DVector<f64>> {
    let k_total = y.len();
    let magnitude = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if magnitude == 0.0 {
        return None;
    }
    let mut abs_sorted: Vec<f64> = y.iter().map(|v| v.abs()).collect();
    abs_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Sparse scenes are mostly inter-spike gaps, so the median magnitude
    // is a serviceable noise-floor proxy.
    let noise_floor = abs_sorted[abs_sorted.len() / 2];
    let active_floor = (8.0 * noise_floor).max(1e-7 * magnitude);

    let mut active: Vec<(usize, f64)> = Vec::new();
    for k in order..k_total {
        let row_mag = (k - order..=k).map(|j| y[j].abs()).fold(0.0f64, f64::max);
        if row_mag > active_floor {
            active.push((k, row_mag));
        }
    }
    if active.len() < 4 * order {
        return None;
    }

    let mut robust = vec![1.0; active.len()];
    let mut phi = DVector::<f64>::zeros(order);
    for _round in 0..6 {
        let mut gram = DMatrix::<f64>::zeros(order, order);
        let mut rhs = DVector::<f64>::zeros(order);
        for (rw, &(k, scale)) in robust.iter().zip(&active) {
            let w = rw / (scale * scale);
            for i in 0..order {
                rhs[i] += w * y[k - 1 - i] * y[k];
                for j in 0..order {
                    gram[(i, j)] += w * y[k - 1 - i] * y[k - 1 - j];
                }
            }
        }
        let ridge = 1e-10 * gram.trace().max(1e-12) / order as f64;
        for i in 0..order {
            gram[(i, i)] += ridge;
        }
        phi = gram.cholesky()?.solve(&rhs);

        // Robust scale of the standardized residuals.
        let std_res: Vec<f64> = active
            .iter()
            .map(|&(k, scale)| {
                let pred: f64 = (0..order).map(|i| phi[i] * y[k - 1 - i]).sum();
                (y[k] - pred).abs() / scale
            })
            .collect();
        let mut sorted = std_res.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = sorted[sorted.len() / 2];
        let tau = (3.0 * 1.4826 * med).max(1e-9);
        for (w, r) in robust.iter_mut().zip(std_res) {
            let t = r / tau;
            *w = 1.0 / (1.0 + t * t);
        }
    }
    if phi.iter().any(|v| !v.is_finite()) {
        None
    } else {
        Some(phi)
    }
}

fn ar_residuals(y: &[f64], phi: &DVector<f64>) -> Vec<f64> {
    let order = phi.len();
    let mut resid = vec![0.0; y.len()];
    for k in order..y.len() {
        let pred: f64 = (0..order).map(|i| phi[i] * y[k - 1 - i]).sum();
        resid[k] = y[k] - pred;
    }
    resid
}

/// Residual bursts mark pulses where inputs entered. A kick at `k0`
/// corrupts rows `k0..k0+order`, so bursts are collapsed to their first
/// index.
fn detect_onsets(resid: &[f64], order: usize, max_onsets: usize) -> Vec<usize> {
    let mut sorted: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = sorted[sorted.len() / 2];
    let p90 = sorted[(sorted.len() * 9) / 10];
    let sigma = (1.4826 * med).max(p90 / 10.0);
    let peak = sorted[sorted.len() - 1];
    if peak <= 0.0 {
        return Vec::new();
    }
    let threshold = (6.0 * sigma).max(1e-6 * peak);

    // A burst is a maximal super-threshold run with short sub-threshold
    // gaps allowed: one kick corrupts exactly the `order + 1` rows whose
    // window straddles it.
    let allowed_gap = (order / 4).max(2);
    let mut onsets = Vec::new();
    let mut k = 0;
    while k < resid.len() {
        if resid[k].abs() > threshold {
            let start = k;
            let mut end = k + 1;
            let mut gap = 0;
            let mut cursor = k + 1;
            while cursor < resid.len() && gap <= allowed_gap {
                if resid[cursor].abs() > threshold {
                    end = cursor + 1;
                    gap = 0;
                } else {
                    gap += 1;
                }
                cursor += 1;
            }
            // Burst energy decides which onsets survive the cap.
            let energy: f64 = resid[start..end].iter().map(|r| r * r).sum();
            onsets.push((start, energy));
            k = end;
        } else {
            k += 1;
        }
    }
    if onsets.len() > max_onsets {
        onsets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        onsets.truncate(max_onsets);
        onsets.sort_by_key(|(k, _)| *k);
    }
    onsets.into_iter().map(|(k, _)| k).collect()
}

/// Roots of the fitted polynomial, pulled inside the unit circle so the
/// initialization is always a stable system. `phi` is lag-ordered
/// (`phi[i]` multiplies `y[k-1-i]`); the companion last row wants the
/// reverse order (its last entry multiplies lag one).
fn stabilized_roots(phi: &DVector<f64>) -> Vec<Complex<f64>> {
    let order = phi.len();
    let last_row = DVector::from_fn(order, |i, _| phi[order - 1 - i]);
    let comp = make_companion(&last_row);
    comp.complex_eigenvalues()
        .iter()
        .map(|ev| {
            let r = ev.norm();
            if r > 0.995 {
                ev * Complex::new(0.995 / r, 0.0)
            } else {
                *ev
            }
        })
        .collect()
}

/// A real mode (one state dimension) or a conjugate pair (two).
#[derive(Debug, Clone, Copy)]
enum ModeGroup {
    Real(f64),
    Pair { rho: f64, theta: f64 },
}

impl ModeGroup {
    fn dims(&self) -> usize {
        match self {
            ModeGroup::Real(_) => 1,
            ModeGroup::Pair { .. } => 2,
        }
    }

    fn roots(&self) -> Vec<Complex<f64>> {
        match *self {
            ModeGroup::Real(r) => vec![Complex::new(r, 0.0)],
            ModeGroup::Pair { rho, theta } => {
                let root = Complex::from_polar(rho, theta);
                vec![root, root.conj()]
            }
        }
    }
}

fn group_modes(roots: &[Complex<f64>]) -> Vec<ModeGroup> {
    let tol = 1e-7;
    let mut modes = Vec::new();
    for root in roots {
        if root.im.abs() <= tol {
            modes.push(ModeGroup::Real(root.re));
        } else if root.im > 0.0 {
            modes.push(ModeGroup::Pair {
                rho: root.norm(),
                theta: root.im.atan2(root.re),
            });
        }
    }
    modes
}

/// Least-squares energy of each mode group in one decay segment,
/// normalized to sum to one.
fn mode_usage(segment: &[f64], modes: &[ModeGroup]) -> Vec<f64> {
    let m_len = segment.len();
    let mut columns: Vec<(usize, Vec<f64>)> = Vec::new();
    for (gi, mode) in modes.iter().enumerate() {
        match *mode {
            ModeGroup::Real(r) => {
                let mut col = Vec::with_capacity(m_len);
                let mut p = 1.0;
                for _ in 0..m_len {
                    col.push(p);
                    p *= r;
                }
                columns.push((gi, col));
            }
            ModeGroup::Pair { rho, theta } => {
                let mut cos_col = Vec::with_capacity(m_len);
                let mut sin_col = Vec::with_capacity(m_len);
                let mut p = 1.0;
                for m in 0..m_len {
                    let ang = theta * m as f64;
                    cos_col.push(p * ang.cos());
                    sin_col.push(p * ang.sin());
                    p *= rho;
                }
                columns.push((gi, cos_col));
                columns.push((gi, sin_col));
            }
        }
    }

    let ncols = columns.len();
    let mut design = DMatrix::zeros(m_len, ncols);
    for (ci, (_, col)) in columns.iter().enumerate() {
        for (mi, v) in col.iter().enumerate() {
            design[(mi, ci)] = *v;
        }
    }
    let target = DVector::from_column_slice(segment);
    let mut gram = design.transpose() * &design;
    let ridge = 1e-8 * gram.trace().max(1e-12) / ncols as f64;
    for i in 0..ncols {
        gram[(i, i)] += ridge;
    }
    let coef = match gram.cholesky() {
        Some(chol) => chol.solve(&(design.transpose() * &target)),
        None => DVector::zeros(ncols),
    };

    let mut usage = vec![0.0; modes.len()];
    for (ci, (gi, col)) in columns.iter().enumerate() {
        let energy: f64 = col.iter().map(|v| (coef[ci] * v) * (coef[ci] * v)).sum();
        usage[*gi] += energy;
    }
    let total: f64 = usage.iter().sum();
    if total > 0.0 {
        for u in usage.iter_mut() {
            *u /= total;
        }
    }
    usage
}

/// Two-means over usage profiles with a deterministic farthest-pair start.
/// Returns one bool per onset; `true` marks the first cluster.
fn cluster_two(usages: &[Vec<f64>]) -> Vec<bool> {
    let n_items = usages.len();
    if n_items == 1 {
        return vec![true];
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    };
    let mut best = (0, 1, -1.0);
    for i in 0..n_items {
        for j in (i + 1)..n_items {
            let d = dist(&usages[i], &usages[j]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let dim = usages[0].len();
    let mut centers = [usages[best.0].clone(), usages[best.1].clone()];
    let mut membership = vec![true; n_items];
    for _ in 0..20 {
        for (i, u) in usages.iter().enumerate() {
            membership[i] = dist(u, &centers[0]) <= dist(u, &centers[1]);
        }
        for (c, want) in [(0usize, true), (1usize, false)] {
            let members: Vec<&Vec<f64>> = usages
                .iter()
                .zip(&membership)
                .filter(|(_, m)| **m == want)
                .map(|(u, _)| u)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut center = vec![0.0; dim];
            for u in &members {
                for (ci, v) in center.iter_mut().zip(u.iter()) {
                    *ci += v;
                }
            }
            for v in center.iter_mut() {
                *v /= members.len() as f64;
            }
            centers[c] = center;
        }
    }
    membership
}

/// Distributes the mode groups over the two subsystems, `n` state
/// dimensions each, preferring the cluster that uses each mode more. A
/// conjugate pair that no longer fits is split into two real pseudo-modes
/// of the same radius.
fn split_modes(
    modes: &[ModeGroup],
    usages: &[Vec<f64>],
    membership: &[bool],
    n: usize,
) -> Option<(Vec<Complex<f64>>, Vec<Complex<f64>>)> {
    let mut pref = Vec::new();
    for (gi, mode) in modes.iter().enumerate() {
        let mut w_a = 0.0;
        let mut w_b = 0.0;
        for (u, m) in usages.iter().zip(membership) {
            if *m {
                w_a += u[gi];
            } else {
                w_b += u[gi];
            }
        }
        let strength = (w_a - w_b).abs() / (w_a + w_b + 1e-12);
        pref.push((gi, *mode, w_a >= w_b, strength));
    }
    pref.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());

    let mut cap = [n, n];
    let mut sides: [Vec<Complex<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut leftovers = Vec::new();
    for (_, mode, prefer_a, _) in &pref {
        let want = usize::from(!prefer_a);
        let dims = mode.dims();
        if cap[want] >= dims {
            sides[want].extend(mode.roots());
            cap[want] -= dims;
        } else if cap[1 - want] >= dims {
            sides[1 - want].extend(mode.roots());
            cap[1 - want] -= dims;
        } else {
            leftovers.push(*mode);
        }
    }
    for mode in leftovers {
        match mode {
            ModeGroup::Pair { rho, .. } => {
                // Split the pair into matching real decays.
                for _ in 0..2 {
                    let side = if cap[0] > 0 { 0 } else { 1 };
                    if cap[side] == 0 {
                        return None;
                    }
                    sides[side].push(Complex::new(rho, 0.0));
                    cap[side] -= 1;
                }
            }
            ModeGroup::Real(r) => {
                let side = if cap[0] > 0 { 0 } else { 1 };
                if cap[side] == 0 {
                    return None;
                }
                sides[side].push(Complex::new(r, 0.0));
                cap[side] -= 1;
            }
        }
    }
    if cap != [0, 0] {
        return None;
    }
    let [a, b] = sides;
    Some((a, b))
}

#[doc(hidden)]
pub fn coeffs_from_roots_for_test(roots: &[Complex<f64>], n: usize) -> Option<DVector<f64>> {
    coeffs_from_roots(roots, n)
}

/// Companion coefficient row whose characteristic polynomial has the given
/// roots. The root set must be closed under conjugation.
fn coeffs_from_roots(roots: &[Complex<f64>], n: usize) -> Option<DVector<f64>> {
    if roots.len() != n {
        return None;
    }
    // poly[i] = coefficient of z^i in prod (z - root), built by convolution.
    let mut poly = vec![Complex::new(0.0, 0.0); n + 1];
    poly[0] = Complex::new(1.0, 0.0);
    let mut degree = 0;
    for root in roots {
        for i in (0..=degree + 1).rev() {
            let shifted = if i > 0 { poly[i - 1] } else { Complex::new(0.0, 0.0) };
            poly[i] = shifted - root * poly[i];
        }
        degree += 1;
    }
    // Monic of degree n: z^n + p[n-1] z^(n-1) + ... + p[0]. The companion
    // convention here is lambda^n = a_n lambda^(n-1) + ... + a_1, so
    // a_i = -p[i-1].
    let coeffs = DVector::from_fn(n, |i, _| -poly[i].re);
    if poly.iter().take(n).any(|c| c.im.abs() > 1e-6) {
        return None;
    }
    Some(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::is_companion;

    #[test]
    fn ar_fit_recovers_pure_autoregression() {
        // y generated by a stable AR(2): phi = (1.2, -0.5) on (y[k-1], y[k-2]).
        let phi_true = [1.2, -0.5];
        let mut y = vec![1.0, 0.7];
        for k in 2..400 {
            y.push(phi_true[0] * y[k - 1] + phi_true[1] * y[k - 2]);
        }
        let phi = robust_ar_fit(&y, 2).unwrap();
        assert!((phi[0] - 1.2).abs() < 1e-6, "phi = {phi:?}");
        assert!((phi[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn roots_roundtrip_through_coeffs() {
        let roots = vec![
            Complex::new(0.5, 0.3),
            Complex::new(0.5, -0.3),
            Complex::new(-0.4, 0.0),
        ];
        let coeffs = coeffs_from_roots(&roots, 3).unwrap();
        let comp = make_companion(&coeffs);
        assert!(is_companion(&comp));
        let mut eigs: Vec<f64> = comp.complex_eigenvalues().iter().map(|e| e.norm()).collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expected: Vec<f64> = roots.iter().map(|r| r.norm()).collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in eigs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn onset_detection_finds_bursts() {
        let mut resid = vec![0.0; 200];
        resid[50] = 2.0;
        resid[52] = 1.0;
        resid[120] = -3.0;
        let onsets = detect_onsets(&resid, 4, 20);
        assert_eq!(onsets, vec![50, 120]);
    }

    #[test]
    fn kick_fit_recovers_injected_state() {
        let coeffs = DVector::from_vec(vec![0.1, -0.3, 0.5]);
        let comp = make_companion(&coeffs);
        let kick = DVector::from_vec(vec![0.7, -1.1, 0.4]);
        let mut x = kick.clone();
        let mut seg = Vec::new();
        for _ in 0..20 {
            seg.push(x.sum());
            x = &comp * x;
        }
        let fitted = fit_kick(&seg, &comp);
        for i in 0..3 {
            assert!((fitted[i] - kick[i]).abs() < 1e-6, "{fitted:?}");
        }
    }
}
