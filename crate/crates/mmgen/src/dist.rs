//! Distribution primitives: diagonal Gaussians with closed-form KL and
//! reparameterized sampling, Bernoulli/Categorical likelihoods on logits,
//! and the product-of-experts combiner.
//!
//! Parameters are graph tensors, so every density and divergence here is
//! differentiable. Shapes are `[..., d]` with the distribution over the last
//! axis; reductions return one value per leading index (a scalar for plain
//! vectors).

use tape::Tensor;

use crate::error::Error;

/// Factorized Gaussian. Encoder outputs are taken as log-variances and
/// clamped to [-10, 10] at construction so downstream `exp` cannot overflow
/// and precisions stay finite.
#[derive(Clone)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

fn check_finite(name: &str, t: &Tensor) -> Result<(), Error> {
    let ok = t.with_value(|v| v.iter().all(|x| x.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} contains non-finite entries")))
    }
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_variance: Tensor) -> Result<DiagGaussian, Error> {
        if mean.shape() != log_variance.shape() {
            return Err(Error::contract(format!(
                "DiagGaussian mean shape {:?} != log_variance shape {:?}",
                mean.shape(),
                log_variance.shape()
            )));
        }
        check_finite("DiagGaussian mean", &mean)?;
        check_finite("DiagGaussian log_variance", &log_variance)?;
        Ok(DiagGaussian {
            mean,
            log_variance: log_variance.clamp(LOG_VAR_MIN, LOG_VAR_MAX),
        })
    }

    /// N(0, I) over `shape` (distribution axis last).
    pub fn standard(shape: &[usize]) -> DiagGaussian {
        DiagGaussian {
            mean: Tensor::zeros(shape),
            log_variance: Tensor::zeros(shape),
        }
    }

    pub fn dim(&self) -> usize {
        *self.mean.shape().last().expect("DiagGaussian needs at least 1 axis")
    }

    /// log N(x; μ, σ²) summed over the last axis.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor, Error> {
        if x.shape() != self.mean.shape() {
            return Err(Error::contract(format!(
                "log_prob observation shape {:?} != parameter shape {:?}",
                x.shape(),
                self.mean.shape()
            )));
        }
        let axis = self.mean.shape().len() - 1;
        let var = self.log_variance.exp();
        let diff = x - &self.mean;
        let quad = diff.mul(&diff).div(&var);
        let terms = quad.add(&self.log_variance).add_s((2.0 * std::f64::consts::PI).ln());
        Ok(terms.sum_axes(&[axis], false).mul_s(-0.5))
    }
}

/// D_KL(q ‖ p) for diagonal Gaussians, summed over the last axis:
/// ½ Σ [σ²_q/σ²_p + (μ_q−μ_p)²/σ²_p − 1 + ln σ²_p − ln σ²_q].
pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<Tensor, Error> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::contract(format!(
            "kl_diag_gaussians dimensionality mismatch: {:?} vs {:?}",
            q.mean.shape(),
            p.mean.shape()
        )));
    }
    let axis = q.mean.shape().len() - 1;
    let log_ratio = p.log_variance.sub(&q.log_variance);
    let var_ratio = q.log_variance.sub(&p.log_variance).exp();
    let diff = q.mean.sub(&p.mean);
    let maha = diff.mul(&diff).div(&p.log_variance.exp());
    let per_dim = var_ratio.add(&maha).add_s(-1.0).add(&log_ratio);
    Ok(per_dim.sum_axes(&[axis], false).mul_s(0.5))
}

/// μ + exp(½ log σ²) ⊙ ε. Differentiable in the distribution parameters.
pub fn reparam_sample(dist: &DiagGaussian, noise: &Tensor) -> Result<Tensor, Error> {
    if noise.shape() != dist.mean.shape() {
        return Err(Error::contract(format!(
            "reparam_sample noise shape {:?} != parameter shape {:?}",
            noise.shape(),
            dist.mean.shape()
        )));
    }
    Ok(dist.mean.add(&dist.log_variance.mul_s(0.5).exp().mul(noise)))
}

/// Normalized product of Gaussian experts (and optionally the prior):
/// precisions add, means combine precision-weighted. Any subset of experts
/// is allowed, which is what enables missing-modality inference.
pub fn poe_combine(
    experts: &[DiagGaussian],
    prior: Option<&DiagGaussian>,
) -> Result<DiagGaussian, Error> {
    let mut factors: Vec<&DiagGaussian> = Vec::with_capacity(experts.len() + 1);
    if let Some(p) = prior {
        factors.push(p);
    }
    factors.extend(experts.iter());
    let Some(first) = factors.first() else {
        return Err(Error::contract(
            "poe_combine: empty expert list with no prior".to_string(),
        ));
    };
    let shape = first.mean.shape();
    for f in &factors {
        if f.mean.shape() != shape {
            return Err(Error::contract(format!(
                "poe_combine dimensionality mismatch: {:?} vs {:?}",
                f.mean.shape(),
                shape
            )));
        }
    }
    let mut precision = factors[0].log_variance.neg().exp();
    let mut weighted_mean = factors[0].mean.mul(&precision);
    for f in &factors[1..] {
        let prec = f.log_variance.neg().exp();
        weighted_mean = weighted_mean.add(&f.mean.mul(&prec));
        precision = precision.add(&prec);
    }
    let variance = precision.powf(-1.0);
    DiagGaussian::new(weighted_mean.mul(&variance), variance.ln())
}

/// Bernoulli over logits; observations may be hard bits or soft values in
/// [0, 1] (binarization is a dataset decision, not a likelihood one).
#[derive(Clone)]
pub struct BernoulliLikelihood {
    pub logits: Tensor,
}

impl BernoulliLikelihood {
    pub fn new(logits: Tensor) -> Result<BernoulliLikelihood, Error> {
        check_finite("Bernoulli logits", &logits)?;
        Ok(BernoulliLikelihood { logits })
    }

    fn check_obs(&self, obs: &Tensor) -> Result<(), Error> {
        if obs.shape() != self.logits.shape() {
            return Err(Error::contract(format!(
                "Bernoulli observation shape {:?} != logits shape {:?}",
                obs.shape(),
                self.logits.shape()
            )));
        }
        let ok = obs.with_value(|v| v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        if ok {
            Ok(())
        } else {
            Err(Error::contract(
                "Bernoulli observation entries must lie in [0, 1]".to_string(),
            ))
        }
    }

    /// log p(obs) summed over every axis.
    pub fn log_prob(&self, obs: &Tensor) -> Result<Tensor, Error> {
        self.check_obs(obs)?;
        Ok(self.per_dim(obs).sum_all())
    }

    /// log p(obs) summed over all but the leading (batch) axis.
    pub fn log_prob_each(&self, obs: &Tensor) -> Result<Tensor, Error> {
        self.check_obs(obs)?;
        let axes: Vec<usize> = (1..self.logits.shape().len()).collect();
        Ok(self.per_dim(obs).sum_axes(&axes, false))
    }

    // obs·log σ(l) + (1−obs)·log σ(−l) = obs·l − softplus(l)
    fn per_dim(&self, obs: &Tensor) -> Tensor {
        obs.mul(&self.logits).sub(&self.logits.softplus())
    }

    pub fn mean(&self) -> Tensor {
        self.logits.sigmoid()
    }
}

/// Categorical over the last axis of `logits`; observations are class
/// indices for each leading position.
#[derive(Clone)]
pub struct CategoricalLikelihood {
    pub logits: Tensor,
}

impl CategoricalLikelihood {
    pub fn new(logits: Tensor) -> Result<CategoricalLikelihood, Error> {
        check_finite("Categorical logits", &logits)?;
        if logits.shape().is_empty() {
            return Err(Error::contract(
                "Categorical logits need a class axis".to_string(),
            ));
        }
        Ok(CategoricalLikelihood { logits })
    }

    pub fn classes(&self) -> usize {
        *self.logits.shape().last().unwrap()
    }

    fn check_obs(&self, obs: &[usize]) -> Result<(), Error> {
        let positions: usize = self.logits.shape()[..self.logits.shape().len() - 1]
            .iter()
            .product();
        if obs.len() != positions {
            return Err(Error::contract(format!(
                "Categorical observation count {} != logit positions {}",
                obs.len(),
                positions
            )));
        }
        let v = self.classes();
        if let Some(&bad) = obs.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "Categorical index {bad} out of range 0..{v}"
            )));
        }
        Ok(())
    }

    /// Per-position log-probabilities, shaped like the leading axes of the
    /// logits (row-major observation order).
    pub fn log_prob_each_position(&self, obs: &[usize]) -> Result<Tensor, Error> {
        self.check_obs(obs)?;
        let shape = self.logits.shape();
        let v = self.classes();
        let positions = obs.len();
        let logp = self.logits.reshape(&[positions, v]).log_softmax();
        let mut hot = ndarray::Array2::<f64>::zeros((positions, v));
        for (i, &c) in obs.iter().enumerate() {
            hot[[i, c]] = 1.0;
        }
        let picked = logp.mul(&Tensor::constant(hot.into_dyn())).sum_axes(&[1], false);
        Ok(picked.reshape(&shape[..shape.len() - 1]))
    }

    /// log p(obs) summed over every position.
    pub fn log_prob(&self, obs: &[usize]) -> Result<Tensor, Error> {
        Ok(self.log_prob_each_position(obs)?.sum_all())
    }
}

/// How the scalar dual bound on a KL divergence is assembled from critic
/// expectations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualVariant {
    /// E_q[T] − E_p[e^{T−1}] ≤ KL(q‖p) for every critic, tight at
    /// T* = 1 + log(q/p).
    #[default]
    FDiv,
    /// E_q[T] − log E_p[e^{T−1}]. As written this bounds KL + 1, not KL
    /// (substituting T* gives exactly KL + 1); kept verbatim for parity
    /// with the adversarial objective's displayed form.
    LogPartition,
}
