//! Smooth threshold projection of phase densities.
//!
//! An optional sharpening stage between the network output and the material
//! interpolation: a tanh ramp pushes densities toward 0/1 around a threshold
//! `eta`, and a renormalization restores the partition of unity. With the
//! sharpness `beta -> 0` the map approaches the identity, so a continuation
//! schedule can fade it in without a discontinuity.

/// Per-phase tanh ramp followed by simplex renormalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdProjection {
    /// Ramp sharpness (> 0); larger values push densities toward 0/1.
    pub beta: f64,
    /// Threshold in (0, 1) around which the ramp pivots.
    pub eta: f64,
}

impl ThresholdProjection {
    /// The scalar ramp before renormalization:
    ///
    /// ```text
    /// s(rho) = (tanh(beta eta) + tanh(beta (rho - eta)))
    ///        / (tanh(beta eta) + tanh(beta (1 - eta)))
    /// ```
    ///
    /// maps [0, 1] onto [0, 1] with s(0) = 0 and s(1) = 1.
    pub fn ramp(&self, rho: f64) -> f64 {
        let t_eta = (self.beta * self.eta).tanh();
        let denom = t_eta + (self.beta * (1.0 - self.eta)).tanh();
        (t_eta + (self.beta * (rho - self.eta)).tanh()) / denom
    }

    /// Projects one density vector: ramp per phase, then renormalize to sum 1.
    pub fn apply(&self, rho: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = rho.iter().map(|&r| self.ramp(r)).collect();
        let total: f64 = s.iter().sum();
        s.into_iter().map(|v| v / total).collect()
    }

    /// [`ThresholdProjection::apply`] together with the dense Jacobian
    /// `jac[i][j] = d rho_bar_i / d rho_j`, needed to pull loss cotangents
    /// back through the projection.
    pub fn apply_with_jacobian(&self, rho: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = rho.len();
        let t_eta = (self.beta * self.eta).tanh();
        let denom = t_eta + (self.beta * (1.0 - self.eta)).tanh();
        let mut s = vec![0.0; n];
        let mut ds = vec![0.0; n];
        for (i, &r) in rho.iter().enumerate() {
            let t = (self.beta * (r - self.eta)).tanh();
            s[i] = (t_eta + t) / denom;
            ds[i] = self.beta * (1.0 - t * t) / denom;
        }
        let total: f64 = s.iter().sum();
        let out: Vec<f64> = s.iter().map(|v| v / total).collect();
        // rho_bar_i = s_i / S  =>  d rho_bar_i / d rho_j
        //   = (delta_ij S - s_i) / S^2 * ds_j
        let mut jac = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { total } else { 0.0 };
                jac[i][j] = (delta - s[i]) / (total * total) * ds[j];
            }
        }
        (out, jac)
    }

    /// Pulls a cotangent on the projected densities back to the raw
    /// densities: `out_j = sum_i jac[i][j] cot_i`.
    pub fn pullback(&self, rho: &[f64], cot: &[f64]) -> Vec<f64> {
        let (_, jac) = self.apply_with_jacobian(rho);
        let n = rho.len();
        let mut out = vec![0.0; n];
        for (i, row) in jac.iter().enumerate() {
            for j in 0..n {
                out[j] += row[j] * cot[i];
            }
        }
        out
    }
}
