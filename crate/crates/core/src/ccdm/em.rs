use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Covariance, Mixture, RIDGE, VARIANCE_FLOOR};
use crate::diffcore::log_sum_exp;
use crate::error::{invalid, Result};

/// Data log-likelihood before each EM iteration and after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct EmTrace {
    pub log_likelihood: Vec<f64>,
}

impl EmTrace {
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.log_likelihood.windows(2).all(|w| w[1] >= w[0] - tol)
    }
}

/// Runs `iters` EM iterations from `init`. Variances are floored (diagonal)
/// or ridged (full); components whose responsibility mass vanishes keep
/// their previous mean and covariance.
pub fn em_fit(data: &[Vec<f64>], init: &Mixture, iters: usize) -> Result<(Mixture, EmTrace)> {
    let k = init.components();
    let d = init.dim();
    if data.len() < k {
        return Err(invalid(alloc::format!(
            "{} samples for {} components",
            data.len(),
            k
        )));
    }
    if data.iter().any(|x| x.len() != d) {
        return Err(invalid("sample dimension does not match the mixture"));
    }
    let n = data.len();
    let mut mix = init.clone();
    let mut trace = Vec::with_capacity(iters + 1);
    let mut resp = vec![0.0; n * k];
    for it in 0..=iters {
        let mut ll = 0.0;
        let mut terms = vec![0.0; k];
        for (i, x) in data.iter().enumerate() {
            for (m, t) in terms.iter_mut().enumerate() {
                *t = libm::log(mix.weights[m]) + mix.component_log_pdf(m, x, None);
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for m in 0..k {
                resp[i * k + m] = libm::exp(terms[m] - lse);
            }
        }
        trace.push(ll);
        if it == iters {
            break;
        }
        mix = m_step(data, &resp, &mix)?;
    }
    Ok((
        mix,
        EmTrace {
            log_likelihood: trace,
        },
    ))
}

fn m_step(data: &[Vec<f64>], resp: &[f64], prev: &Mixture) -> Result<Mixture> {
    let (k, d, n) = (prev.components(), prev.dim(), data.len());
    let csize = prev.cov_size();
    let mut weights = vec![0.0; k];
    let mut means = prev.means.clone();
    let mut covs = prev.covs.clone();
    for m in 0..k {
        let nm: f64 = (0..n).map(|i| resp[i * k + m]).sum();
        weights[m] = nm / n as f64;
        if nm < 1e-12 {
            continue;
        }
        let mu = &mut means[m * d..(m + 1) * d];
        mu.iter_mut().for_each(|v| *v = 0.0);
        for (i, x) in data.iter().enumerate() {
            let r = resp[i * k + m];
            for j in 0..d {
                mu[j] += r * x[j];
            }
        }
        mu.iter_mut().for_each(|v| *v /= nm);
        let c = &mut covs[m * csize..(m + 1) * csize];
        c.iter_mut().for_each(|v| *v = 0.0);
        match prev.kind() {
            Covariance::Diagonal => {
                for (i, x) in data.iter().enumerate() {
                    let r = resp[i * k + m];
                    for j in 0..d {
                        let e = x[j] - mu[j];
                        c[j] += r * e * e;
                    }
                }
                c.iter_mut()
                    .for_each(|v| *v = (*v / nm).max(VARIANCE_FLOOR));
            }
            Covariance::Full => {
                let mut e = vec![0.0; d];
                for (i, x) in data.iter().enumerate() {
                    let r = resp[i * k + m];
                    for j in 0..d {
                        e[j] = x[j] - mu[j];
                    }
                    for a in 0..d {
                        for b in 0..=a {
                            c[a * d + b] += r * e[a] * e[b];
                        }
                    }
                }
                for a in 0..d {
                    for b in 0..=a {
                        let v = c[a * d + b] / nm;
                        c[a * d + b] = v;
                        c[b * d + a] = v;
                    }
                    c[a * d + a] += RIDGE;
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Mixture::new(prev.kind(), d, weights, means, covs)
}

/// k-means++ seeding followed by one hard assignment: means are the seeds,
/// weights the cluster shares, covariances the pooled per-dimension
/// variance of the data.
pub fn kmeans_pp_init(
    data: &[Vec<f64>],
    k: usize,
    kind: Covariance,
    rng: &mut impl Rng,
) -> Result<Mixture> {
    let n = data.len();
    if k == 0 || n < k {
        return Err(invalid(alloc::format!(
            "{} samples for {} components",
            n,
            k
        )));
    }
    let d = data[0].len();
    let dist2 =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut centres: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = data.iter().map(|x| dist2(x, &data[centres[0]])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in nearest.iter().enumerate() {
                acc += v;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centres.push(pick);
        for (x, best) in data.iter().zip(nearest.iter_mut()) {
            *best = best.min(dist2(x, &data[pick]));
        }
    }
    let mut counts = vec![0usize; k];
    for x in data {
        let mut best = 0;
        for c in 1..k {
            if dist2(x, &data[centres[c]]) < dist2(x, &data[centres[best]]) {
                best = c;
            }
        }
        counts[best] += 1;
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let weights = weights.into_iter().map(|w| w / total).collect();
    let means: Vec<f64> = centres
        .iter()
        .flat_map(|&c| data[c].iter().copied())
        .collect();
    let mut var = vec![0.0; d];
    for j in 0..d {
        let mean = data.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        var[j] = (data
            .iter()
            .map(|x| (x[j] - mean) * (x[j] - mean))
            .sum::<f64>()
            / n as f64)
            .max(VARIANCE_FLOOR);
    }
    let covs = match kind {
        Covariance::Diagonal => (0..k).flat_map(|_| var.iter().copied()).collect(),
        Covariance::Full => {
            let mut c = vec![0.0; k * d * d];
            for m in 0..k {
                for j in 0..d {
                    c[m * d * d + j * d + j] = var[j] + RIDGE;
                }
            }
            c
        }
    };
    Mixture::new(kind, d, weights, means, covs)
}
