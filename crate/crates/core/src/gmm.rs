//! One-dimensional Gaussian mixtures over HU, fitted by weighted EM on a
//! value histogram.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SegError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: Gmm,
    /// Log-likelihood after each EM iteration.
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmOptions {
    pub components: usize,
    pub iterations: usize,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions { components: 5, iterations: 10, variance_floor: 1.0, seed: 0 }
    }
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| {
                let v = self.variances[k];
                let d = x - self.means[k];
                self.weights[k].ln() - 0.5 * (LN_2PI + v.ln() + d * d / v)
            })
            .collect();
        log_sum_exp(&terms)
    }
}

fn log_sum_exp(t: &[f64]) -> f64 {
    let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + t.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Fits a mixture to raw samples.
pub fn fit_gmm(samples: &[f64], opts: &GmmOptions) -> Result<GmmFit> {
    let pts: Vec<(f64, f64)> = samples.iter().map(|&x| (x, 1.0)).collect();
    fit_weighted(&pts, opts)
}

/// Fits a mixture to `(value, weight)` pairs, typically histogram bins.
///
/// Components are seeded by weighted k-means++; the component count drops to
/// the number of distinct values when there are fewer.
pub fn fit_weighted(points: &[(f64, f64)], opts: &GmmOptions) -> Result<GmmFit> {
    let pts: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.1 > 0.0).collect();
    if pts.is_empty() {
        return Err(SegError::InvalidArgument("no samples for mixture fit".into()));
    }
    if opts.components == 0 {
        return Err(SegError::InvalidArgument("mixture needs at least one component".into()));
    }
    let mut distinct: Vec<f64> = pts.iter().map(|p| p.0).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    let k = opts.components.min(distinct.len());
    let total: f64 = pts.iter().map(|p| p.1).sum();
    let floor = opts.variance_floor;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centers = vec![pick_weighted(&pts, |p| p.1, &mut rng)];
    while centers.len() < k {
        let d2 = |p: &(f64, f64)| {
            let d = centers.iter().map(|c| (p.0 - c).powi(2)).fold(f64::INFINITY, f64::min);
            d * p.1
        };
        centers.push(pick_weighted(&pts, d2, &mut rng));
    }
    centers.sort_by(|a, b| a.total_cmp(b));

    // hard assignment to nearest center gives the starting parameters
    let mut resp = vec![vec![0.0; k]; pts.len()];
    for (i, p) in pts.iter().enumerate() {
        let (best, _) = centers
            .iter()
            .enumerate()
            .map(|(c, &m)| (c, (p.0 - m).abs()))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        resp[i][best] = 1.0;
    }
    let mut model = m_step(&pts, &resp, total, floor, &centers);
    let mut trace = Vec::with_capacity(opts.iterations);
    for _ in 0..opts.iterations {
        e_step(&pts, &model, &mut resp);
        model = m_step(&pts, &resp, total, floor, &model.means);
        trace.push(log_likelihood(&pts, &model));
    }
    Ok(GmmFit { model, trace })
}

fn pick_weighted(pts: &[(f64, f64)], weight: impl Fn(&(f64, f64)) -> f64, rng: &mut ChaCha8Rng) -> f64 {
    let w: Vec<f64> = pts.iter().map(&weight).collect();
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        return pts[0].0;
    }
    let mut r = rng.gen::<f64>() * sum;
    for (p, &wi) in pts.iter().zip(&w) {
        if r < wi {
            return p.0;
        }
        r -= wi;
    }
    pts[pts.len() - 1].0
}

fn e_step(pts: &[(f64, f64)], g: &Gmm, resp: &mut [Vec<f64>]) {
    let k = g.components();
    let mut terms = vec![0.0; k];
    for (i, p) in pts.iter().enumerate() {
        for c in 0..k {
            let v = g.variances[c];
            let d = p.0 - g.means[c];
            terms[c] = g.weights[c].ln() - 0.5 * (LN_2PI + v.ln() + d * d / v);
        }
        let lse = log_sum_exp(&terms);
        for c in 0..k {
            resp[i][c] = (terms[c] - lse).exp();
        }
    }
}

fn m_step(pts: &[(f64, f64)], resp: &[Vec<f64>], total: f64, floor: f64, fallback_means: &[f64]) -> Gmm {
    let k = resp[0].len();
    let mut weights = vec![0.0; k];
    let mut means = vec![0.0; k];
    let mut variances = vec![floor; k];
    for c in 0..k {
        let nk: f64 = pts.iter().zip(resp).map(|(p, r)| p.1 * r[c]).sum();
        if nk <= 1e-12 {
            // empty component: keep it negligible and where it was
            weights[c] = 1e-12;
            means[c] = fallback_means[c];
            continue;
        }
        let mu = pts.iter().zip(resp).map(|(p, r)| p.1 * r[c] * p.0).sum::<f64>() / nk;
        let var = pts.iter().zip(resp).map(|(p, r)| p.1 * r[c] * (p.0 - mu).powi(2)).sum::<f64>() / nk;
        weights[c] = nk / total;
        means[c] = mu;
        variances[c] = var.max(floor);
    }
    let s: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= s;
    }
    Gmm { weights, means, variances }
}

pub fn log_likelihood(pts: &[(f64, f64)], g: &Gmm) -> f64 {
    pts.iter().map(|p| p.1 * g.log_density(p.0)).sum()
}
