//! Coordinate-based design representation: a Fourier feature projection
//! followed by a small ReLU MLP with a softmax head for phase pseudodensities
//! and an optional sigmoid head for the fiber angle.
//!
//! The network maps physical coordinates (normalized to `[-1, 1]^2` over the
//! design domain) to a point on the phase simplex, so the partition of unity
//! `sum(rho) = 1` and the box bounds hold by construction at every point in
//! space — not just at mesh nodes. The Fourier frequency matrix is drawn once
//! at construction from a seeded generator and frozen; only the MLP weights
//! train. Gradients with respect to the weights come from a hand-written
//! reverse pass ([`DesignNetwork::pullback`]) that recomputes the forward
//! activations, keeping evaluation and differentiation stateless and
//! bit-deterministic.

mod projection;
mod snapshot;

pub use projection::ThresholdProjection;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Architecture and initialization record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkSpec {
    pub seed: u64,
    /// Number of Fourier frequency rows; the feature vector has twice this
    /// length (cosine and sine banks).
    pub num_fourier: usize,
    /// Width of the two hidden layers.
    pub hidden: usize,
    /// Number of phase pseudodensities produced by the softmax head.
    pub n_phases: usize,
    /// Whether the network also carries the fiber-angle head.
    pub theta_head: bool,
    /// Standard deviation of the Fourier frequencies, in cycles per
    /// normalized-domain unit.
    pub bandwidth: f64,
}

impl NetworkSpec {
    /// Bandwidth so that the shortest well-represented wavelength spans about
    /// four element widths on an `nx` by `ny` mesh. In normalized coordinates
    /// an element is `2/n` wide and a frequency row `b` has wavelength
    /// `1/|b|`; taking the practical maximum frequency as `2.5 sigma` gives
    /// `sigma = n / 20`.
    pub fn default_bandwidth(nx: usize, ny: usize) -> f64 {
        nx.max(ny) as f64 / 20.0
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            seed: 0,
            num_fourier: 64,
            hidden: 40,
            n_phases: 3,
            theta_head: false,
            bandwidth: 2.0,
        }
    }
}

/// Flat-parameter offsets; the trainable vector is laid out row-major as
/// `[W1, b1, W2, b2, W_rho, b_rho, (W_theta, b_theta)]`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wr: usize,
    br: usize,
    wt: usize,
    bt: usize,
    total: usize,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Layout {
        let (f2, h, p) = (2 * spec.num_fourier, spec.hidden, spec.n_phases);
        let w1 = 0;
        let b1 = w1 + h * f2;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wr = b2 + h;
        let br = wr + p * h;
        let wt = br + p;
        let bt = wt + if spec.theta_head { h } else { 0 };
        let total = bt + if spec.theta_head { 1 } else { 0 };
        Layout {
            w1,
            b1,
            w2,
            b2,
            wr,
            br,
            wt,
            bt,
            total,
        }
    }
}

/// Network output at one coordinate.
#[derive(Debug, Clone)]
pub struct FieldSample {
    /// Phase pseudodensities on the simplex.
    pub rho: Vec<f64>,
    /// Fiber angle in `[0, pi)`, present when the head exists.
    pub theta: Option<f64>,
}

/// Loss cotangent at one coordinate, paired with the sample coordinate in
/// [`DesignNetwork::pullback`]. Either side may be absent.
#[derive(Debug, Clone, Default)]
pub struct SampleCotangent {
    pub d_rho: Option<Vec<f64>>,
    pub d_theta: Option<f64>,
}

/// The trainable design field.
#[derive(Debug, Clone)]
pub struct DesignNetwork {
    spec: NetworkSpec,
    /// Frozen frequency rows, `num_fourier` entries.
    b_freq: Vec<[f64; 2]>,
    /// Trainable weights, flat.
    params: Vec<f64>,
    /// Physical design-domain box `[[x0, y0], [x1, y1]]` used to normalize
    /// coordinates before projection.
    domain: [[f64; 2]; 2],
    layout: Layout,
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

impl DesignNetwork {
    /// Draws a fresh network. The sampling order (frequency rows first, then
    /// each weight matrix row-major) is part of the format: a seed fully
    /// determines the network.
    pub fn init(spec: NetworkSpec, domain: [[f64; 2]; 2]) -> Result<DesignNetwork> {
        if spec.num_fourier == 0 || spec.hidden == 0 || spec.n_phases == 0 {
            return Err(Error::InvalidDesign(
                "network sizes must all be positive".into(),
            ));
        }
        if !(spec.bandwidth.is_finite() && spec.bandwidth > 0.0) {
            return Err(Error::InvalidDesign(format!(
                "fourier bandwidth must be positive, got {}",
                spec.bandwidth
            )));
        }
        if !(domain[1][0] > domain[0][0] && domain[1][1] > domain[0][1]) {
            return Err(Error::InvalidDesign(format!(
                "degenerate design domain {domain:?}"
            )));
        }

        let layout = Layout::new(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let freq_dist = Normal::new(0.0, spec.bandwidth).expect("positive bandwidth");
        let b_freq: Vec<[f64; 2]> = (0..spec.num_fourier)
            .map(|_| [freq_dist.sample(&mut rng), freq_dist.sample(&mut rng)])
            .collect();

        let mut params = vec![0.0; layout.total];
        let (f2, h, p) = (2 * spec.num_fourier, spec.hidden, spec.n_phases);
        let mut fill = |start: usize, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for k in 0..rows * cols {
                params[start + k] = dist.sample(rng);
            }
        };
        fill(layout.w1, h, f2, xavier_std(f2, h), &mut rng);
        fill(layout.w2, h, h, xavier_std(h, h), &mut rng);
        fill(layout.wr, p, h, xavier_std(h, p), &mut rng);
        if spec.theta_head {
            fill(layout.wt, 1, h, xavier_std(h, 1), &mut rng);
        }
        // Biases stay zero at init.

        Ok(DesignNetwork {
            spec,
            b_freq,
            params,
            domain,
            layout,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn domain(&self) -> [[f64; 2]; 2] {
        self.domain
    }

    pub fn frequencies(&self) -> &[[f64; 2]] {
        &self.b_freq
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn normalize(&self, x: &[f64; 2]) -> [f64; 2] {
        [
            2.0 * (x[0] - self.domain[0][0]) / (self.domain[1][0] - self.domain[0][0]) - 1.0,
            2.0 * (x[1] - self.domain[0][1]) / (self.domain[1][1] - self.domain[0][1]) - 1.0,
        ]
    }

    /// Fourier features `[cos(2 pi B xn); sin(2 pi B xn)]` of a normalized
    /// coordinate.
    fn features(&self, xn: &[f64; 2]) -> Vec<f64> {
        let f = self.spec.num_fourier;
        let mut feat = vec![0.0; 2 * f];
        for (i, b) in self.b_freq.iter().enumerate() {
            let arg = 2.0 * std::f64::consts::PI * (b[0] * xn[0] + b[1] * xn[1]);
            feat[i] = arg.cos();
            feat[f + i] = arg.sin();
        }
        feat
    }

    /// Forward pass retaining every activation needed by the reverse pass.
    fn forward(&self, x: &[f64; 2]) -> Trace {
        let (f2, h, p) = (
            2 * self.spec.num_fourier,
            self.spec.hidden,
            self.spec.n_phases,
        );
        let l = &self.layout;
        let w = &self.params;
        let feat = self.features(&self.normalize(x));

        let mut z1 = vec![0.0; h];
        for i in 0..h {
            let mut acc = w[l.b1 + i];
            let row = l.w1 + i * f2;
            for (j, fj) in feat.iter().enumerate() {
                acc += w[row + j] * fj;
            }
            z1[i] = acc;
        }
        let h1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();

        let mut z2 = vec![0.0; h];
        for i in 0..h {
            let mut acc = w[l.b2 + i];
            let row = l.w2 + i * h;
            for (j, hj) in h1.iter().enumerate() {
                acc += w[row + j] * hj;
            }
            z2[i] = acc;
        }
        let h2: Vec<f64> = z2.iter().map(|&z| z.max(0.0)).collect();

        let mut zr = vec![0.0; p];
        for i in 0..p {
            let mut acc = w[l.br + i];
            let row = l.wr + i * h;
            for (j, hj) in h2.iter().enumerate() {
                acc += w[row + j] * hj;
            }
            zr[i] = acc;
        }
        // Stable softmax.
        let zmax = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expz: Vec<f64> = zr.iter().map(|z| (z - zmax).exp()).collect();
        let zsum: f64 = expz.iter().sum();
        let rho: Vec<f64> = expz.iter().map(|e| e / zsum).collect();

        let sig = if self.spec.theta_head {
            let mut acc = w[l.bt];
            for (j, hj) in h2.iter().enumerate() {
                acc += w[l.wt + j] * hj;
            }
            Some(1.0 / (1.0 + (-acc).exp()))
        } else {
            None
        };

        Trace {
            feat,
            z1,
            h1,
            z2,
            h2,
            rho,
            sig,
        }
    }

    /// Evaluates the design field at one coordinate.
    pub fn eval(&self, x: &[f64; 2]) -> FieldSample {
        let t = self.forward(x);
        FieldSample {
            rho: t.rho,
            theta: t.sig.map(|s| std::f64::consts::PI * s),
        }
    }

    /// Evaluates a batch of coordinates.
    pub fn eval_batch(&self, coords: &[[f64; 2]]) -> Vec<FieldSample> {
        coords.iter().map(|x| self.eval(x)).collect()
    }

    /// Exact gradient of `sum_k <cotangent_k, output(coords_k)>` with respect
    /// to the flat parameter vector. The forward activations are recomputed
    /// per sample, so the call is pure.
    pub fn pullback(&self, coords: &[[f64; 2]], cots: &[SampleCotangent]) -> Result<Vec<f64>> {
        if coords.len() != cots.len() {
            return Err(Error::InvalidDesign(format!(
                "pullback batch mismatch: {} coordinates vs {} cotangents",
                coords.len(),
                cots.len()
            )));
        }
        let (f2, h, p) = (
            2 * self.spec.num_fourier,
            self.spec.hidden,
            self.spec.n_phases,
        );
        let l = &self.layout;
        let w = &self.params;
        let mut grad = vec![0.0; l.total];

        for (x, cot) in coords.iter().zip(cots) {
            if let Some(dr) = &cot.d_rho {
                if dr.len() != p {
                    return Err(Error::InvalidDesign(format!(
                        "rho cotangent has {} entries for {} phases",
                        dr.len(),
                        p
                    )));
                }
            }
            if cot.d_theta.is_some() && !self.spec.theta_head {
                return Err(Error::InvalidDesign(
                    "theta cotangent supplied but the network has no theta head".into(),
                ));
            }
            let t = self.forward(x);

            // Head backward: softmax Jacobian rho_i (delta_ij - rho_j) and
            // the scaled sigmoid pi s (1 - s).
            let mut dh2 = vec![0.0; h];
            if let Some(dr) = &cot.d_rho {
                let dot: f64 = dr.iter().zip(&t.rho).map(|(c, r)| c * r).sum();
                for i in 0..p {
                    let dz = t.rho[i] * (dr[i] - dot);
                    grad[l.br + i] += dz;
                    let row = l.wr + i * h;
                    for j in 0..h {
                        grad[row + j] += dz * t.h2[j];
                        dh2[j] += w[row + j] * dz;
                    }
                }
            }
            if let (Some(ct), Some(s)) = (cot.d_theta, t.sig) {
                let dz = ct * std::f64::consts::PI * s * (1.0 - s);
                grad[l.bt] += dz;
                for j in 0..h {
                    grad[l.wt + j] += dz * t.h2[j];
                    dh2[j] += w[l.wt + j] * dz;
                }
            }

            // Trunk backward through the two ReLU layers.
            let mut dh1 = vec![0.0; h];
            for i in 0..h {
                if t.z2[i] > 0.0 {
                    let dz = dh2[i];
                    grad[l.b2 + i] += dz;
                    let row = l.w2 + i * h;
                    for j in 0..h {
                        grad[row + j] += dz * t.h1[j];
                        dh1[j] += w[row + j] * dz;
                    }
                }
            }
            for i in 0..h {
                if t.z1[i] > 0.0 {
                    let dz = dh1[i];
                    grad[l.b1 + i] += dz;
                    let row = l.w1 + i * f2;
                    for j in 0..f2 {
                        grad[row + j] += dz * t.feat[j];
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Forward activations of one sample.
struct Trace {
    feat: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    rho: Vec<f64>,
    /// Raw sigmoid output of the theta head, before the `pi` scale.
    sig: Option<f64>,
}
