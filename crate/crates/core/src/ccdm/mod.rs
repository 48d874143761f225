//! Class-conditional Gaussian mixtures over mask embeddings.
//!
//! Slots `0..C` hold semantic classes `1..=C`; slot `C` holds the no-object
//! class. The bank is fitted by EM from a FIFO memory of matched embeddings
//! and merged into the running estimate with momentum. All arithmetic is in
//! `f64`.

mod em;
mod memory;

use core::cell::Cell;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{log_sum_exp, Array, CustomOp, Scalar, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::normal;

pub use em::{em_fit, kmeans_pp_init, EmTrace};
pub use memory::MemoryBank;

pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const RIDGE: f64 = 1e-3;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    #[default]
    Diagonal,
    Full,
}

/// One mixture: weights `M`, means `M x D`, covariances `M x D` (diagonal)
/// or `M x D x D` (full), with cached factorisations.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    kind: Covariance,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    covs: Vec<f64>,
    // diagonal: inverse variances; full: lower Cholesky factors
    factor: Vec<f64>,
    log_norm: Vec<f64>,
}

impl Mixture {
    pub fn new(
        kind: Covariance,
        dim: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        covs: Vec<f64>,
    ) -> Result<Self> {
        let m = weights.len();
        let csize = match kind {
            Covariance::Diagonal => dim,
            Covariance::Full => dim * dim,
        };
        if m == 0 || dim == 0 || means.len() != m * dim || covs.len() != m * csize {
            return Err(shape_err(
                "mixture",
                format!(
                    "{} weights, {} means, {} covs for dim {}",
                    m,
                    means.len(),
                    covs.len(),
                    dim
                ),
            ));
        }
        if !weights
            .iter()
            .chain(&means)
            .chain(&covs)
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite { op: "mixture" });
        }
        let mut mix = Self {
            kind,
            dim,
            weights,
            means,
            covs,
            factor: Vec::new(),
            log_norm: Vec::new(),
        };
        mix.prepare()?;
        Ok(mix)
    }

    fn prepare(&mut self) -> Result<()> {
        let d = self.dim;
        self.factor.clear();
        self.log_norm.clear();
        for m in 0..self.components() {
            let log_det = match self.kind {
                Covariance::Diagonal => {
                    let var = &self.covs[m * d..(m + 1) * d];
                    if var.iter().any(|&v| v <= 0.0) {
                        return Err(invalid("non-positive variance"));
                    }
                    self.factor.extend(var.iter().map(|v| 1.0 / v));
                    var.iter().map(|v| libm::log(*v)).sum::<f64>()
                }
                Covariance::Full => {
                    let l = cholesky(&self.covs[m * d * d..(m + 1) * d * d], d)
                        .ok_or_else(|| invalid("covariance is not positive definite"))?;
                    let ld = 2.0 * (0..d).map(|i| libm::log(l[i * d + i])).sum::<f64>();
                    self.factor.extend(l);
                    ld
                }
            };
            self.log_norm.push(-0.5 * (d as f64 * LN_2PI + log_det));
        }
        Ok(())
    }

    pub fn kind(&self) -> Covariance {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, m: usize) -> &[f64] {
        &self.means[m * self.dim..(m + 1) * self.dim]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn covs(&self) -> &[f64] {
        &self.covs
    }

    fn cov_size(&self) -> usize {
        match self.kind {
            Covariance::Diagonal => self.dim,
            Covariance::Full => self.dim * self.dim,
        }
    }

    /// `ln N(x; mu_m, Sigma_m)`; when `whitened` is given it receives
    /// `Sigma_m^-1 (x - mu_m)`.
    fn component_log_pdf(&self, m: usize, x: &[f64], whitened: Option<&mut [f64]>) -> f64 {
        let d = self.dim;
        let mu = self.mean(m);
        match self.kind {
            Covariance::Diagonal => {
                let inv = &self.factor[m * d..(m + 1) * d];
                let mut q = 0.0;
                match whitened {
                    Some(w) => {
                        for i in 0..d {
                            let r = x[i] - mu[i];
                            w[i] = r * inv[i];
                            q += r * w[i];
                        }
                    }
                    None => {
                        for i in 0..d {
                            let r = x[i] - mu[i];
                            q += r * r * inv[i];
                        }
                    }
                }
                self.log_norm[m] - 0.5 * q
            }
            Covariance::Full => {
                let l = &self.factor[m * d * d..(m + 1) * d * d];
                let mut y: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                forward_solve(l, d, &mut y);
                let q: f64 = y.iter().map(|v| v * v).sum();
                if let Some(w) = whitened {
                    backward_solve_t(l, d, &mut y);
                    w.copy_from_slice(&y);
                }
                self.log_norm[m] - 0.5 * q
            }
        }
    }

    /// `ln p(x)` under the mixture.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|m| libm::log(self.weights[m]) + self.component_log_pdf(m, x, None))
            .collect();
        log_sum_exp(&terms)
    }

    /// `ln p(x)` and its gradient with respect to `x`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        let m_count = self.components();
        let mut w = vec![0.0; m_count * d];
        let terms: Vec<f64> = (0..m_count)
            .map(|m| {
                libm::log(self.weights[m])
                    + self.component_log_pdf(m, x, Some(&mut w[m * d..(m + 1) * d]))
            })
            .collect();
        let lse = log_sum_exp(&terms);
        grad.iter_mut().for_each(|g| *g = 0.0);
        if lse.is_finite() {
            for m in 0..m_count {
                let r = libm::exp(terms[m] - lse);
                for i in 0..d {
                    grad[i] -= r * w[m * d + i];
                }
            }
        }
        lse
    }

    /// Draws one sample: a component chosen in proportion to its weight,
    /// then a Gaussian draw from it.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut m = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                m = i;
                break;
            }
        }
        let d = self.dim;
        let eps: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let mu = self.mean(m);
        match self.kind {
            Covariance::Diagonal => (0..d)
                .map(|i| mu[i] + libm::sqrt(self.covs[m * d + i]) * eps[i])
                .collect(),
            Covariance::Full => {
                let l = &self.factor[m * d * d..(m + 1) * d * d];
                (0..d)
                    .map(|i| mu[i] + (0..=i).map(|j| l[i * d + j] * eps[j]).sum::<f64>())
                    .collect()
            }
        }
    }
}

/// Momentum merge `rho * old + (1 - rho) * new`, component by index; the
/// weights are renormalised.
pub fn momentum_update(old: &Mixture, new: &Mixture, rho: f64) -> Result<Mixture> {
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid(format!("momentum {} outside [0, 1)", rho)));
    }
    if old.kind != new.kind || old.dim != new.dim || old.components() != new.components() {
        return Err(invalid(
            "momentum update between mixtures of different layout",
        ));
    }
    let blend = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| rho * x + (1.0 - rho) * y)
            .collect()
    };
    let mut weights = blend(&old.weights, &new.weights);
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Mixture::new(
        old.kind,
        old.dim,
        weights,
        blend(&old.means, &new.means),
        blend(&old.covs, &new.covs),
    )
}

/// In-place lower Cholesky factor of a row-major `d x d` matrix.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = libm::sqrt(s);
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn forward_solve(l: &[f64], d: usize, y: &mut [f64]) {
    for i in 0..d {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
}

fn backward_solve_t(l: &[f64], d: usize, y: &mut [f64]) {
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub components: usize,
    pub covariance: Covariance,
    pub iterations: usize,
    pub momentum: f64,
    pub bank_size: usize,
    /// Samples per component each bank needs before prompting starts.
    pub warmup_per_component: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 3,
            covariance: Covariance::Diagonal,
            iterations: 10,
            momentum: 0.9,
            bank_size: 256,
            warmup_per_component: 8,
        }
    }
}

/// Sampled class-conditional query.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub class: u8,
    pub z: Vec<f64>,
}

/// Mixtures for every class slot plus no-object.
#[derive(Clone, Debug)]
pub struct GmmBank {
    classes: usize,
    dim: usize,
    slots: Vec<Option<Mixture>>,
    draws: Cell<u64>,
}

impl PartialEq for GmmBank {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes && self.dim == other.dim && self.slots == other.slots
    }
}

impl GmmBank {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            slots: vec![None; classes + 1],
            draws: Cell::new(0),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Slot of the no-object class.
    pub fn null_slot(&self) -> usize {
        self.classes
    }

    pub fn slot(&self, s: usize) -> Option<&Mixture> {
        self.slots.get(s).and_then(|m| m.as_ref())
    }

    pub fn set(&mut self, s: usize, mix: Mixture) -> Result<()> {
        if s > self.classes || mix.dim() != self.dim {
            return Err(invalid(format!(
                "slot {} / dim {} does not fit the bank",
                s,
                mix.dim()
            )));
        }
        self.slots[s] = Some(mix);
        Ok(())
    }

    pub fn is_ready(&self) -> bool {
        self.slots.iter().all(|s| s.is_some())
    }

    fn mixture(&self, s: usize) -> Result<&Mixture> {
        self.slot(s).ok_or(Error::Uninitialized(s))
    }

    pub fn log_density(&self, s: usize, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(shape_err(
                "density",
                format!("{} values for dim {}", x.len(), self.dim),
            ));
        }
        Ok(self.mixture(s)?.log_density(x))
    }

    pub fn density(&self, s: usize, x: &[f64]) -> Result<f64> {
        self.log_density(s, x).map(libm::exp)
    }

    /// Posterior over all slots under a uniform prior. The flag is set when
    /// every density underflowed and the uniform fallback was used.
    pub fn posterior(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        let (lp, flag) = self.log_posterior_row(x, None)?;
        Ok((lp.into_iter().map(libm::exp).collect(), flag))
    }

    fn log_posterior_row(&self, x: &[f64], grads: Option<&mut [f64]>) -> Result<(Vec<f64>, bool)> {
        let s_count = self.classes + 1;
        let mut ll = vec![0.0; s_count];
        match grads {
            Some(g) => {
                for s in 0..s_count {
                    ll[s] = self
                        .mixture(s)?
                        .log_density_grad(x, &mut g[s * self.dim..(s + 1) * self.dim]);
                }
            }
            None => {
                for s in 0..s_count {
                    ll[s] = self.mixture(s)?.log_density(x);
                }
            }
        }
        let lse = log_sum_exp(&ll);
        if !lse.is_finite() {
            let u = -libm::log(s_count as f64);
            return Ok((vec![u; s_count], true));
        }
        Ok((ll.iter().map(|v| v - lse).collect(), false))
    }

    /// Refits every slot whose bank holds at least `components` samples,
    /// then merges with momentum into the existing estimate. Returns the
    /// slots that were skipped.
    pub fn refit(
        &mut self,
        bank: &MemoryBank,
        cfg: &GmmConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let mut skipped = Vec::new();
        for s in 0..=self.classes {
            let data = bank.samples_f64(s);
            if data.len() < cfg.components.max(1) {
                skipped.push(s);
                continue;
            }
            let init = match &self.slots[s] {
                Some(m) if m.components() == cfg.components && m.kind() == cfg.covariance => {
                    m.clone()
                }
                _ => kmeans_pp_init(&data, cfg.components, cfg.covariance, rng)?,
            };
            let (fitted, _) = em_fit(&data, &init, cfg.iterations)?;
            let merged = match &self.slots[s] {
                Some(old) if old.components() == cfg.components && old.kind() == cfg.covariance => {
                    momentum_update(old, &fitted, cfg.momentum)?
                }
                _ => fitted,
            };
            self.slots[s] = Some(merged);
        }
        Ok(skipped)
    }

    /// One prompt per sounding class, each drawn from that class's mixture.
    /// Number of prompts drawn from this bank so far.
    pub fn draws(&self) -> u64 {
        self.draws.get()
    }

    pub fn sample_prompts(&self, sounding: &[u8], rng: &mut impl Rng) -> Result<Vec<Prompt>> {
        self.draws.set(self.draws.get() + sounding.len() as u64);
        sounding
            .iter()
            .map(|&k| {
                if k == 0 || k as usize > self.classes {
                    return Err(invalid(format!("class {} cannot be prompted", k)));
                }
                let z = self.mixture(k as usize - 1)?.sample(rng);
                Ok(Prompt { class: k, z })
            })
            .collect()
    }

    /// Named arrays for serialisation.
    pub fn to_arrays(&self) -> Vec<(String, Array<f64>)> {
        let mut out = Vec::new();
        for (s, m) in self.slots.iter().enumerate() {
            let Some(m) = m else { continue };
            let k = m.components();
            let d = m.dim();
            out.push((
                format!("gmm.{s}.weights"),
                Array::new(&[k], m.weights.clone()).expect("weights"),
            ));
            out.push((
                format!("gmm.{s}.means"),
                Array::new(&[k, d], m.means.clone()).expect("means"),
            ));
            let cshape: Vec<usize> = match m.kind {
                Covariance::Diagonal => vec![k, d],
                Covariance::Full => vec![k, d, d],
            };
            out.push((
                format!("gmm.{s}.covs"),
                Array::new(&cshape, m.covs.clone()).expect("covs"),
            ));
        }
        out
    }

    pub fn from_arrays(
        classes: usize,
        dim: usize,
        arrays: &[(String, Array<f64>)],
    ) -> Result<Self> {
        let mut bank = Self::new(classes, dim);
        let find = |name: String| arrays.iter().find(|(n, _)| *n == name).map(|(_, a)| a);
        for s in 0..=classes {
            let (Some(w), Some(mu), Some(c)) = (
                find(format!("gmm.{s}.weights")),
                find(format!("gmm.{s}.means")),
                find(format!("gmm.{s}.covs")),
            ) else {
                continue;
            };
            let kind = if c.shape().len() == 3 {
                Covariance::Full
            } else {
                Covariance::Diagonal
            };
            let mix = Mixture::new(
                kind,
                dim,
                w.data().to_vec(),
                mu.data().to_vec(),
                c.data().to_vec(),
            )?;
            bank.set(s, mix)?;
        }
        Ok(bank)
    }
}

struct PosteriorOp {
    // d log p(s | x_n) / d x_n, laid out [n][slot][dim]
    jac: Vec<f64>,
    slots: usize,
    dim: usize,
}

impl<T: Scalar> CustomOp<T> for PosteriorOp {
    fn name(&self) -> &'static str {
        "gmm_log_posterior"
    }

    fn backward(
        &self,
        inputs: &[&Array<T>],
        _output: &Array<T>,
        grad: &Array<T>,
    ) -> Vec<Option<Array<T>>> {
        let (s_count, d) = (self.slots, self.dim);
        let mut gx = Array::zeros(inputs[0].shape());
        for n in 0..inputs[0].rows() {
            let g = grad.row(n);
            let out = gx.row_mut(n);
            for s in 0..s_count {
                let gs = g[s].as_f64();
                if gs == 0.0 {
                    continue;
                }
                let j = &self.jac[(n * s_count + s) * d..(n * s_count + s + 1) * d];
                for i in 0..d {
                    out[i] += T::of(gs * j[i]);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Records `log p(slot | x)` for every row of `emb` (rows x (C+1)) as a
/// differentiable op; mixture parameters are constants.
pub fn log_posterior<T: Scalar>(tape: &mut Tape<T>, emb: Var, bank: &GmmBank) -> Result<Var> {
    let x = tape.value(emb);
    if x.shape().len() != 2 || x.cols() != bank.dim {
        return Err(shape_err(
            "gmm_log_posterior",
            format!("{:?} for dim {}", x.shape(), bank.dim),
        ));
    }
    let (n, d, s_count) = (x.rows(), bank.dim, bank.classes + 1);
    let mut out = Vec::with_capacity(n * s_count);
    let mut jac = vec![0.0; n * s_count * d];
    let mut g = vec![0.0; s_count * d];
    let mut row = vec![0.0; d];
    for i in 0..n {
        for (r, v) in row.iter_mut().zip(x.row(i)) {
            *r = v.as_f64();
        }
        let (lp, flag) = bank.log_posterior_row(&row, Some(&mut g))?;
        out.extend(lp.iter().map(|&v| T::of(v)));
        if flag {
            continue;
        }
        // d/dx log p(s|x) = grad_s - sum_t p(t|x) grad_t
        let mut mean = vec![0.0; d];
        for s in 0..s_count {
            let p = libm::exp(lp[s]);
            for k in 0..d {
                mean[k] += p * g[s * d + k];
            }
        }
        for s in 0..s_count {
            let j = &mut jac[(i * s_count + s) * d..(i * s_count + s + 1) * d];
            for k in 0..d {
                j[k] = g[s * d + k] - mean[k];
            }
        }
    }
    let value = Array::new(&[n, s_count], out)?;
    tape.custom(
        &[emb],
        value,
        Box::new(PosteriorOp {
            jac,
            slots: s_count,
            dim: d,
        }),
    )
}
