use rand::RngCore;

use crate::rng::SeedRng;
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-12;

/// Normalized rows and reciprocal standard deviations kept for backward.
#[derive(Debug, Clone, Default)]
pub(crate) struct LnCache<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

/// Row-wise layer norm of `x` (rows × dim) into `out`.
pub(crate) fn layer_norm<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    dim: usize,
    out: &mut [S],
) -> LnCache<S> {
    let rows = x.len() / dim;
    let eps = S::from_f64_lossy(LN_EPS);
    let inv_dim = S::one() / S::from_usize_lossy(dim);
    let mut cache = LnCache {
        xhat: vec![S::zero(); x.len()],
        rstd: vec![S::zero(); rows],
    };
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<S>() * inv_dim;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_dim;
        let rstd = S::one() / (var + eps).sqrt();
        cache.rstd[r] = rstd;
        let xhat = &mut cache.xhat[r * dim..(r + 1) * dim];
        let o = &mut out[r * dim..(r + 1) * dim];
        for j in 0..dim {
            let h = (row[j] - mean) * rstd;
            xhat[j] = h;
            o[j] = h * gamma[j] + beta[j];
        }
    }
    cache
}

/// Backward of [`layer_norm`]: accumulates scale/offset gradients and writes
/// the input gradient into `dx`.
pub(crate) fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    cache: &LnCache<S>,
    gamma: &[S],
    dim: usize,
    dgamma: &mut [S],
    dbeta: &mut [S],
    dx: &mut [S],
) {
    let rows = dy.len() / dim;
    let inv_dim = S::one() / S::from_usize_lossy(dim);
    let mut dxhat = vec![S::zero(); dim];
    for r in 0..rows {
        let g = &dy[r * dim..(r + 1) * dim];
        let xhat = &cache.xhat[r * dim..(r + 1) * dim];
        let mut sum_d = S::zero();
        let mut sum_dx = S::zero();
        for j in 0..dim {
            dgamma[j] += g[j] * xhat[j];
            dbeta[j] += g[j];
            let d = g[j] * gamma[j];
            dxhat[j] = d;
            sum_d += d;
            sum_dx += d * xhat[j];
        }
        let mean_d = sum_d * inv_dim;
        let mean_dx = sum_dx * inv_dim;
        let rstd = cache.rstd[r];
        let out = &mut dx[r * dim..(r + 1) * dim];
        for j in 0..dim {
            out[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
}

// tanh approximation of GELU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh_fast())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh_fast();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub(crate) fn dropout_mask<S: Scalar>(len: usize, rate: f64, rng: &mut SeedRng) -> Vec<S> {
    let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
    // Compare raw 32-bit draws against the scaled rate.
    let cut = (rate * 4_294_967_296.0) as u64;
    (0..len)
        .map(|_| {
            if u64::from(rng.next_u32()) < cut {
                S::zero()
            } else {
                keep
            }
        })
        .collect()
}
