//! Test-only oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

/// Empirical moments of the bi-level draw `μ ~ Dir(α)`, `y ~ Cat(μ)`, each
/// entry with its standard error.
pub struct MonteCarloMoments {
    /// Sample covariance of the one-hot `y`.
    pub total: Vec<Vec<f64>>,
    /// Mean over draws of `Diag(μ) − μμᵀ`.
    pub aleatoric: Vec<Vec<f64>>,
    /// Sample covariance of `μ`.
    pub epistemic: Vec<Vec<f64>>,
    pub total_se: Vec<Vec<f64>>,
    pub aleatoric_se: Vec<Vec<f64>>,
    pub epistemic_se: Vec<Vec<f64>>,
}

/// Dirichlet draw by normalising independent `Gamma(α_k, 1)` variates.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).unwrap().sample(rng))
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// Mean and standard error of a stream of values, accumulated in two
/// passes over stored per-draw values.
fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn monte_carlo_moments(alpha: &[f64], draws: usize, rng: &mut ChaCha8Rng) -> MonteCarloMoments {
    let c = alpha.len();
    let mut mus = Vec::with_capacity(draws);
    let mut ys = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mu = sample_dirichlet(alpha, rng);
        ys.push(sample_categorical(&mu, rng));
        mus.push(mu);
    }
    let mu_mean: Vec<f64> = (0..c)
        .map(|k| mus.iter().map(|m| m[k]).sum::<f64>() / draws as f64)
        .collect();
    let y_mean: Vec<f64> = (0..c)
        .map(|k| ys.iter().filter(|&&y| y == k).count() as f64 / draws as f64)
        .collect();
    let zero = vec![vec![0.0; c]; c];
    let mut out = MonteCarloMoments {
        total: zero.clone(),
        aleatoric: zero.clone(),
        epistemic: zero.clone(),
        total_se: zero.clone(),
        aleatoric_se: zero.clone(),
        epistemic_se: zero,
    };
    let mut buf = vec![0.0; draws];
    let onehot = |y: usize, k: usize| if y == k { 1.0 } else { 0.0 };
    for i in 0..c {
        for j in 0..c {
            for (b, &y) in buf.iter_mut().zip(&ys) {
                *b = (onehot(y, i) - y_mean[i]) * (onehot(y, j) - y_mean[j]);
            }
            let (m, se) = mean_se(&buf);
            out.total[i][j] = m * draws as f64 / (draws as f64 - 1.0);
            out.total_se[i][j] = se;

            for (b, mu) in buf.iter_mut().zip(&mus) {
                *b = if i == j { mu[i] } else { 0.0 } - mu[i] * mu[j];
            }
            let (m, se) = mean_se(&buf);
            out.aleatoric[i][j] = m;
            out.aleatoric_se[i][j] = se;

            for (b, mu) in buf.iter_mut().zip(&mus) {
                *b = (mu[i] - mu_mean[i]) * (mu[j] - mu_mean[j]);
            }
            let (m, se) = mean_se(&buf);
            out.epistemic[i][j] = m * draws as f64 / (draws as f64 - 1.0);
            out.epistemic_se[i][j] = se;
        }
    }
    out
}

/// Largest `|estimate − expected| / se` over the upper triangle.
pub fn max_z(estimate: &[Vec<f64>], se: &[Vec<f64>], expected: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..expected.len() {
        for j in i..expected.len() {
            worst = worst.max((estimate[i][j] - expected[i][j]).abs() / se[i][j]);
        }
    }
    worst
}

/// Random Dirichlet parameters: `C` uniform in `classes`, each entry
/// log-uniform in `[1e-2, 1e2]`.
pub fn random_alpha(rng: &mut ChaCha8Rng, classes: std::ops::RangeInclusive<usize>) -> Vec<f64> {
    let c = rng.random_range(classes);
    (0..c).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect()
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            let step = h * x[k].abs().max(1.0);
            xp[k] = x[k] + step;
            let up = f(&xp);
            xp[k] = x[k] - step;
            let down = f(&xp);
            xp[k] = x[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

/// One-sided paired t statistic of `after − before`.
pub fn paired_t(before: &[f64], after: &[f64], margin: f64) -> (f64, f64) {
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b + margin).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
    (m - margin, m / (sd / n.sqrt()))
}
