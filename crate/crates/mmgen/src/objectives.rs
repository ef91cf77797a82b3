//! Training objectives: the symmetric multimodal loss and its four terms,
//! baseline multimodal objectives, Fenchel-dual adversarial replacements,
//! and exact flow log-likelihood terms.
//!
//! Sign convention: every returned term is a minimization loss of the form
//! [reconstruction NLL + KL]. Wherever a term bounds a log-evidence, the
//! bound reads −loss ≤ log-evidence.
//!
//! All expectations over posteriors use a single reparameterized sample per
//! call; callers wanting lower-variance estimates average several calls
//! with fresh noise.

use std::collections::BTreeMap;

use tape::ndarray::ArrayD;
use tape::{grad_seeded, Tensor};

use crate::dist::{kl_diag_gaussians, poe_combine, reparam_sample, DiagGaussian, DualVariant};
use crate::error::Error;

/// Per-sample conditional log-likelihood: z of shape [B, d] mapped to
/// log p(obs_b | z_b) of shape [B], for the batch the closure was built on.
pub type LogLik<'a> = &'a dyn Fn(&Tensor) -> Result<Tensor, Error>;

/// Itemized objective value. `loss` is the differentiable total and
/// `total` its current value. The four `d_*` slots always partition
/// `total`: slots an objective does not use are zero, so
/// d_alpha + d_beta + d_gamma + d_eta = total for every objective. Each
/// constructor documents its slot assignment. `recon_x`/`recon_y` and
/// `kl_terms` itemize further and are reported unweighted.
pub struct ObjectiveBreakdown {
    pub d_alpha: f64,
    pub d_beta: f64,
    pub d_gamma: f64,
    pub d_eta: f64,
    pub recon_x: f64,
    pub recon_y: f64,
    pub kl_terms: BTreeMap<String, f64>,
    pub total: f64,
    pub loss: Tensor,
}

impl ObjectiveBreakdown {
    pub fn validate(&self) -> Result<(), Error> {
        let parts = [
            self.d_alpha,
            self.d_beta,
            self.d_gamma,
            self.d_eta,
            self.recon_x,
            self.recon_y,
            self.total,
        ];
        if parts.iter().any(|v| !v.is_finite())
            || self.kl_terms.values().any(|v| !v.is_finite())
        {
            return Err(Error::contract("objective breakdown contains non-finite values"));
        }
        let slot_sum = self.d_alpha + self.d_beta + self.d_gamma + self.d_eta;
        if (slot_sum - self.total).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "breakdown slots sum to {slot_sum}, total is {}",
                self.total
            )));
        }
        Ok(())
    }
}

/// One modality's inference/generation bundle: its posterior, the
/// reparameterization noise for this step, and the decoder's per-sample
/// log-likelihood of the batch observation.
pub struct ModalityInput<'a> {
    pub q: &'a DiagGaussian,
    pub noise: &'a Tensor,
    pub log_lik: LogLik<'a>,
}

/// Shared inputs for objectives over a paired batch: the two unimodal
/// posteriors, the joint posterior (a dedicated network's output or a
/// product-of-experts combination), the prior expanded to batch shape,
/// per-posterior noise, and per-sample log-likelihood closures.
pub struct JointInputs<'a> {
    pub q_x: &'a DiagGaussian,
    pub q_y: &'a DiagGaussian,
    pub q_xy: &'a DiagGaussian,
    pub prior: &'a DiagGaussian,
    pub noise_x: &'a Tensor,
    pub noise_y: &'a Tensor,
    pub noise_xy: &'a Tensor,
    pub log_px: LogLik<'a>,
    pub log_py: LogLik<'a>,
}

fn batch_of(g: &DiagGaussian) -> usize {
    g.mean.shape()[0]
}

impl JointInputs<'_> {
    fn check(&self) -> Result<(), Error> {
        let b = batch_of(self.q_xy);
        if batch_of(self.q_x) != b || batch_of(self.q_y) != b {
            return Err(Error::contract(
                "posterior batch sizes disagree; partially paired batches must go \
                 through the weak-supervision step, not a joint objective",
            ));
        }
        Ok(())
    }
}

/// Evidence lower bound pieces for one modality, batch-averaged:
/// `value` = `recon` − `kl` where recon = E_q[log p(x|z)] (single
/// reparameterized sample) and kl = KL(q ‖ prior) in closed form.
pub struct ElboParts {
    pub recon: Tensor,
    pub kl: Tensor,
    pub value: Tensor,
}

pub fn elbo(
    q: &DiagGaussian,
    prior: &DiagGaussian,
    noise: &Tensor,
    log_lik: LogLik,
) -> Result<ElboParts, Error> {
    let z = reparam_sample(q, noise)?;
    let recon = log_lik(&z)?.mean_all();
    let kl = kl_diag_gaussians(q, prior)?.mean_all();
    let value = &recon - &kl;
    Ok(ElboParts { recon, kl, value })
}

/// The eight batch-averaged pieces the four-term objective is built from.
/// Each named term is [NLL + KL]; the β/η KLs pull the unimodal posteriors
/// toward the joint one. `paired` is the supervised combination used when
/// a batch is fully paired; `alpha`/`gamma` alone are the unimodal losses
/// used for unpaired data.
pub struct LmPieces {
    pub nll_x_unimodal: Tensor,
    pub nll_y_unimodal: Tensor,
    pub nll_x_joint: Tensor,
    pub nll_y_joint: Tensor,
    pub kl_x_prior: Tensor,
    pub kl_y_prior: Tensor,
    pub kl_joint_from_y: Tensor,
    pub kl_joint_from_x: Tensor,
}

impl LmPieces {
    pub fn alpha(&self) -> Tensor {
        &self.nll_x_unimodal + &self.kl_x_prior
    }

    pub fn beta(&self) -> Tensor {
        &self.nll_x_joint + &self.kl_joint_from_y
    }

    pub fn gamma(&self) -> Tensor {
        &self.nll_y_unimodal + &self.kl_y_prior
    }

    pub fn eta(&self) -> Tensor {
        &self.nll_y_joint + &self.kl_joint_from_x
    }

    /// β + η: the loss evaluated on paired examples.
    pub fn paired(&self) -> Tensor {
        self.beta() + self.eta()
    }

    pub fn total(&self) -> Tensor {
        self.alpha() + self.beta() + self.gamma() + self.eta()
    }
}

pub fn lm_pieces(inputs: &JointInputs) -> Result<LmPieces, Error> {
    inputs.check()?;
    let z_x = reparam_sample(inputs.q_x, inputs.noise_x)?;
    let z_y = reparam_sample(inputs.q_y, inputs.noise_y)?;
    let z_xy = reparam_sample(inputs.q_xy, inputs.noise_xy)?;
    Ok(LmPieces {
        nll_x_unimodal: -(inputs.log_px)(&z_x)?.mean_all(),
        nll_y_unimodal: -(inputs.log_py)(&z_y)?.mean_all(),
        nll_x_joint: -(inputs.log_px)(&z_xy)?.mean_all(),
        nll_y_joint: -(inputs.log_py)(&z_xy)?.mean_all(),
        kl_x_prior: kl_diag_gaussians(inputs.q_x, inputs.prior)?.mean_all(),
        kl_y_prior: kl_diag_gaussians(inputs.q_y, inputs.prior)?.mean_all(),
        kl_joint_from_y: kl_diag_gaussians(inputs.q_xy, inputs.q_y)?.mean_all(),
        kl_joint_from_x: kl_diag_gaussians(inputs.q_xy, inputs.q_x)?.mean_all(),
    })
}

fn lm_breakdown(pieces: &LmPieces) -> ObjectiveBreakdown {
    let loss = pieces.total();
    let mut kl_terms = BTreeMap::new();
    kl_terms.insert("kl_x_prior".into(), pieces.kl_x_prior.scalar());
    kl_terms.insert("kl_y_prior".into(), pieces.kl_y_prior.scalar());
    kl_terms.insert("kl_joint_from_y".into(), pieces.kl_joint_from_y.scalar());
    kl_terms.insert("kl_joint_from_x".into(), pieces.kl_joint_from_x.scalar());
    ObjectiveBreakdown {
        d_alpha: pieces.alpha().scalar(),
        d_beta: pieces.beta().scalar(),
        d_gamma: pieces.gamma().scalar(),
        d_eta: pieces.eta().scalar(),
        recon_x: pieces.nll_x_unimodal.scalar() + pieces.nll_x_joint.scalar(),
        recon_y: pieces.nll_y_unimodal.scalar() + pieces.nll_y_joint.scalar(),
        kl_terms,
        total: loss.scalar(),
        loss,
    }
}

/// The four-term symmetric objective on a fully paired batch. Slots carry
/// their own terms: α and γ are the unimodal ELBO losses, β reconstructs x
/// from the joint posterior with KL toward q(z|y), η reconstructs y with KL
/// toward q(z|x).
pub fn vaevae_loss(inputs: &JointInputs) -> Result<ObjectiveBreakdown, Error> {
    Ok(lm_breakdown(&lm_pieces(inputs)?))
}

/// Sum of three ELBO losses: the joint one under a product-of-experts
/// posterior built here from the unimodal posteriors and the prior, plus
/// each available unimodal ELBO. Missing modalities drop their terms; at
/// least one must be present. Slots: d_alpha = x ELBO loss, d_beta = joint
/// ELBO loss, d_gamma = y ELBO loss.
pub fn mvae_loss(
    x: Option<&ModalityInput>,
    y: Option<&ModalityInput>,
    noise_joint: &Tensor,
    prior: &DiagGaussian,
) -> Result<ObjectiveBreakdown, Error> {
    if x.is_none() && y.is_none() {
        return Err(Error::contract("mvae_loss needs at least one modality"));
    }
    let mut kl_terms = BTreeMap::new();
    let mut recon_x = 0.0;
    let mut recon_y = 0.0;
    let zero = Tensor::zeros(&[]);
    let mut d_alpha = zero.clone();
    let mut d_gamma = zero.clone();
    let mut d_beta = zero;

    if let Some(mx) = x {
        let e = elbo(mx.q, prior, mx.noise, mx.log_lik)?;
        recon_x += (-&e.recon).scalar();
        kl_terms.insert("kl_x_prior".into(), e.kl.scalar());
        d_alpha = -e.value;
    }
    if let Some(my) = y {
        let e = elbo(my.q, prior, my.noise, my.log_lik)?;
        recon_y += (-&e.recon).scalar();
        kl_terms.insert("kl_y_prior".into(), e.kl.scalar());
        d_gamma = -e.value;
    }
    if let (Some(mx), Some(my)) = (x, y) {
        let joint = poe_combine(&[mx.q.clone(), my.q.clone()], Some(prior))?;
        let z = reparam_sample(&joint, noise_joint)?;
        let rx = (mx.log_lik)(&z)?.mean_all();
        let ry = (my.log_lik)(&z)?.mean_all();
        let kl = kl_diag_gaussians(&joint, prior)?.mean_all();
        recon_x += (-&rx).scalar();
        recon_y += (-&ry).scalar();
        kl_terms.insert("kl_poe_prior".into(), kl.scalar());
        d_beta = kl - rx - ry;
    }

    let loss = &d_alpha + &d_beta + &d_gamma;
    Ok(ObjectiveBreakdown {
        d_alpha: d_alpha.scalar(),
        d_beta: d_beta.scalar(),
        d_gamma: d_gamma.scalar(),
        d_eta: 0.0,
        recon_x,
        recon_y,
        kl_terms,
        total: loss.scalar(),
        loss,
    })
}

/// Joint ELBO loss plus ω-weighted KLs pulling the joint posterior toward
/// each unimodal posterior. Slots: d_alpha = joint ELBO loss,
/// d_beta = ω·KL(q(z|x,y)‖q(z|y)), d_eta = ω·KL(q(z|x,y)‖q(z|x)).
/// `kl_terms` records the unweighted KLs.
pub fn jmvae_loss(inputs: &JointInputs, omega: f64) -> Result<ObjectiveBreakdown, Error> {
    if !omega.is_finite() || omega < 0.0 {
        return Err(Error::contract(format!("jmvae omega must be >= 0, got {omega}")));
    }
    inputs.check()?;
    let z = reparam_sample(inputs.q_xy, inputs.noise_xy)?;
    let rx = (inputs.log_px)(&z)?.mean_all();
    let ry = (inputs.log_py)(&z)?.mean_all();
    let kl_prior = kl_diag_gaussians(inputs.q_xy, inputs.prior)?.mean_all();
    let kl_from_y = kl_diag_gaussians(inputs.q_xy, inputs.q_y)?.mean_all();
    let kl_from_x = kl_diag_gaussians(inputs.q_xy, inputs.q_x)?.mean_all();

    let joint_loss = &kl_prior - &rx - &ry;
    let pen_beta = kl_from_y.mul_s(omega);
    let pen_eta = kl_from_x.mul_s(omega);
    let loss = &joint_loss + &pen_beta + &pen_eta;

    let mut kl_terms = BTreeMap::new();
    kl_terms.insert("kl_joint_prior".into(), kl_prior.scalar());
    kl_terms.insert("kl_joint_from_y".into(), kl_from_y.scalar());
    kl_terms.insert("kl_joint_from_x".into(), kl_from_x.scalar());
    Ok(ObjectiveBreakdown {
        d_alpha: joint_loss.scalar(),
        d_beta: pen_beta.scalar(),
        d_gamma: 0.0,
        d_eta: pen_eta.scalar(),
        recon_x: (-&rx).scalar(),
        recon_y: (-&ry).scalar(),
        kl_terms,
        total: loss.scalar(),
        loss,
    })
}

/// ω-weighted mixture of the two view ELBO losses, each view reconstructing
/// both modalities from its own posterior. The joint posterior in `inputs`
/// is not consulted. Slots: d_alpha = ω·(x-view loss),
/// d_gamma = (1−ω)·(y-view loss).
pub fn bivcca_loss(inputs: &JointInputs, omega: f64) -> Result<ObjectiveBreakdown, Error> {
    if !omega.is_finite() || !(0.0..=1.0).contains(&omega) {
        return Err(Error::contract(format!("bivcca omega must lie in [0, 1], got {omega}")));
    }
    inputs.check()?;
    let z_x = reparam_sample(inputs.q_x, inputs.noise_x)?;
    let z_y = reparam_sample(inputs.q_y, inputs.noise_y)?;
    let rx_from_x = (inputs.log_px)(&z_x)?.mean_all();
    let ry_from_x = (inputs.log_py)(&z_x)?.mean_all();
    let rx_from_y = (inputs.log_px)(&z_y)?.mean_all();
    let ry_from_y = (inputs.log_py)(&z_y)?.mean_all();
    let kl_x = kl_diag_gaussians(inputs.q_x, inputs.prior)?.mean_all();
    let kl_y = kl_diag_gaussians(inputs.q_y, inputs.prior)?.mean_all();

    let x_view = &kl_x - &rx_from_x - &ry_from_x;
    let y_view = &kl_y - &rx_from_y - &ry_from_y;
    let wx = x_view.mul_s(omega);
    let wy = y_view.mul_s(1.0 - omega);
    let loss = &wx + &wy;

    let mut kl_terms = BTreeMap::new();
    kl_terms.insert("kl_x_prior".into(), kl_x.scalar());
    kl_terms.insert("kl_y_prior".into(), kl_y.scalar());
    Ok(ObjectiveBreakdown {
        d_alpha: wx.scalar(),
        d_beta: 0.0,
        d_gamma: wy.scalar(),
        d_eta: 0.0,
        recon_x: (-&rx_from_x).scalar() + (-&rx_from_y).scalar(),
        recon_y: (-&ry_from_x).scalar() + (-&ry_from_y).scalar(),
        kl_terms,
        total: loss.scalar(),
        loss,
    })
}

/// Critic evaluations on the two sides of a divergence: `scores_q` on
/// samples from the variational joint, `scores_p` on samples from the
/// model joint. Both are per-sample score vectors.
pub struct CriticScores {
    pub scores_q: Tensor,
    pub scores_p: Tensor,
}

impl CriticScores {
    pub fn new(scores_q: Tensor, scores_p: Tensor) -> Result<CriticScores, Error> {
        let s = CriticScores { scores_q, scores_p };
        let (bq, bp) = s.batch_sizes();
        if bq == 0 || bp == 0 {
            return Err(Error::contract("critic score batches must be non-empty"));
        }
        Ok(s)
    }

    pub fn batch_sizes(&self) -> (usize, usize) {
        (
            self.scores_q.shape().iter().product(),
            self.scores_p.shape().iter().product(),
        )
    }
}

/// Monte-Carlo dual estimate of KL(q‖p) from critic scores.
/// `FDiv`: mean(T_q) − mean(exp(T_p − 1)), a lower bound on the KL for any
/// critic, tight at T* = 1 + log(q/p). `LogPartition`: mean(T_q) −
/// log mean(exp(T_p − 1)); note this form peaks at KL + 1, not KL.
pub fn fenchel_dual_kl(scores: &CriticScores, variant: DualVariant) -> Result<Tensor, Error> {
    let (bq, bp) = scores.batch_sizes();
    if bq == 0 || bp == 0 {
        return Err(Error::contract("critic score batches must be non-empty"));
    }
    let eq = scores.scores_q.mean_all();
    let ep = scores.scores_p.add_s(-1.0).exp().mean_all();
    Ok(match variant {
        DualVariant::FDiv => eq - ep,
        DualVariant::LogPartition => eq - ep.ln(),
    })
}

/// Uniform per-sample interpolation u·a + (1−u)·b between two equally
/// shaped sample batches, returned as a fresh leaf so that input gradients
/// (for the gradient penalty) have a node to land on.
pub fn interpolate_leaf(a: &ArrayD<f64>, b: &ArrayD<f64>, u: &[f64]) -> Result<Tensor, Error> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "interpolation endpoints differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch = a.shape().first().copied().unwrap_or(0);
    if batch != u.len() || batch == 0 {
        return Err(Error::contract(format!(
            "need one interpolation weight per sample: batch {batch}, weights {}",
            u.len()
        )));
    }
    let block: usize = a.shape()[1..].iter().product();
    let (af, bf) = (
        a.as_standard_layout().into_owned(),
        b.as_standard_layout().into_owned(),
    );
    let (av, bv) = (
        af.as_slice().expect("standard layout"),
        bf.as_slice().expect("standard layout"),
    );
    let mut out = Vec::with_capacity(av.len());
    for (i, &w) in u.iter().enumerate() {
        for j in 0..block {
            let k = i * block + j;
            out.push(w * av[k] + (1.0 - w) * bv[k]);
        }
    }
    let arr = ArrayD::from_shape_vec(a.shape().to_vec(), out).expect("shape preserved");
    Ok(Tensor::var(arr))
}

/// Mean over the batch of (‖∇_input critic‖₂ − 1)², with the gradient
/// taken at the given interpolation points. `interpolates` must be a leaf
/// (see [`interpolate_leaf`]); the result stays differentiable in the
/// critic parameters through the double-backward pass. A critic with zero
/// input gradient yields penalty 1 per point.
pub fn lipschitz_penalty(critic: &dyn Fn(&Tensor) -> Tensor, interpolates: &Tensor) -> Tensor {
    let scores = critic(interpolates);
    let seed = Tensor::constant(ArrayD::from_elem(scores.shape(), 1.0));
    let g = grad_seeded(&scores, &seed, &[interpolates]).remove(0);
    let batch = interpolates.shape()[0];
    let block: usize = interpolates.shape()[1..].iter().product();
    let flat = g.reshape(&[batch, block]);
    let norms = flat.powf(2.0).sum_axes(&[1], false).sqrt();
    norms.add_s(-1.0).powf(2.0).mean_all()
}

/// Which of the four objective terms to estimate adversarially.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Alpha,
    Beta,
    Gamma,
    Eta,
}

impl LossTerm {
    fn name(self) -> &'static str {
        match self {
            LossTerm::Alpha => "alpha",
            LossTerm::Beta => "beta",
            LossTerm::Gamma => "gamma",
            LossTerm::Eta => "eta",
        }
    }
}

pub const ALL_LOSS_TERMS: [LossTerm; 4] =
    [LossTerm::Alpha, LossTerm::Beta, LossTerm::Gamma, LossTerm::Eta];

/// Everything the adversarial estimate of one term needs: the critic's
/// scores on both sample sides and, optionally, a precomputed Lipschitz
/// penalty for the critic update.
pub struct CriticBundle {
    pub scores: CriticScores,
    pub penalty: Option<Tensor>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VaeganConfig {
    /// Terms replaced by their Fenchel duals. The default replaces the two
    /// terms whose reconstruction factor is the image likelihood (α and β),
    /// keeping label/text terms likelihood-based.
    pub duals: Vec<LossTerm>,
    /// Gradient-penalty coefficient on the critic side.
    pub gp_weight: f64,
    pub variant: DualVariant,
}

impl Default for VaeganConfig {
    fn default() -> Self {
        VaeganConfig {
            duals: vec![LossTerm::Alpha, LossTerm::Beta],
            gp_weight: 10.0,
            variant: DualVariant::FDiv,
        }
    }
}

/// Generator- and critic-side losses of the adversarial objective. The
/// generator breakdown's dual slots hold the dual estimates; these estimate
/// the divergence form of the term, which differs from the closed-form loss
/// by a data-entropy constant (zero gradient, and zero value when the
/// empirical distribution is degenerate). `critic_loss` is None when no
/// duals are configured.
pub struct VaeganLoss {
    pub generator: ObjectiveBreakdown,
    pub critic_loss: Option<Tensor>,
    pub critic_items: BTreeMap<String, f64>,
}

pub fn vaegan_loss(
    inputs: &JointInputs,
    critics: &BTreeMap<LossTerm, CriticBundle>,
    config: &VaeganConfig,
) -> Result<VaeganLoss, Error> {
    let pieces = lm_pieces(inputs)?;
    if config.duals.is_empty() {
        return Ok(VaeganLoss {
            generator: lm_breakdown(&pieces),
            critic_loss: None,
            critic_items: BTreeMap::new(),
        });
    }

    let mut kl_terms = BTreeMap::new();
    let mut critic_items = BTreeMap::new();
    let mut recon_x = 0.0;
    let mut recon_y = 0.0;
    let mut term_values = Vec::with_capacity(4);
    let mut critic_loss: Option<Tensor> = None;

    for term in ALL_LOSS_TERMS {
        let tensor = if config.duals.contains(&term) {
            let bundle = critics.get(&term).ok_or_else(|| {
                Error::contract(format!(
                    "term {} is configured for a dual estimate but has no critic",
                    term.name()
                ))
            })?;
            let dual = fenchel_dual_kl(&bundle.scores, config.variant)?;
            critic_items.insert(format!("dual_{}", term.name()), dual.scalar());
            let mut c = -&dual;
            if let Some(pen) = &bundle.penalty {
                critic_items.insert(format!("penalty_{}", term.name()), pen.scalar());
                c = c + pen.mul_s(config.gp_weight);
            }
            critic_loss = Some(match critic_loss {
                Some(acc) => acc + c,
                None => c,
            });
            dual
        } else {
            match term {
                LossTerm::Alpha => {
                    recon_x += pieces.nll_x_unimodal.scalar();
                    kl_terms.insert("kl_x_prior".into(), pieces.kl_x_prior.scalar());
                    pieces.alpha()
                }
                LossTerm::Beta => {
                    recon_x += pieces.nll_x_joint.scalar();
                    kl_terms.insert("kl_joint_from_y".into(), pieces.kl_joint_from_y.scalar());
                    pieces.beta()
                }
                LossTerm::Gamma => {
                    recon_y += pieces.nll_y_unimodal.scalar();
                    kl_terms.insert("kl_y_prior".into(), pieces.kl_y_prior.scalar());
                    pieces.gamma()
                }
                LossTerm::Eta => {
                    recon_y += pieces.nll_y_joint.scalar();
                    kl_terms.insert("kl_joint_from_x".into(), pieces.kl_joint_from_x.scalar());
                    pieces.eta()
                }
            }
        };
        term_values.push(tensor);
    }

    let loss = term_values
        .into_iter()
        .reduce(|a, b| a + b)
        .expect("four terms");
    let slots: Vec<f64> = {
        // Re-derive slot scalars in term order for the breakdown.
        let mut v = Vec::with_capacity(4);
        for term in ALL_LOSS_TERMS {
            let s = if config.duals.contains(&term) {
                critic_items[&format!("dual_{}", term.name())]
            } else {
                match term {
                    LossTerm::Alpha => pieces.alpha().scalar(),
                    LossTerm::Beta => pieces.beta().scalar(),
                    LossTerm::Gamma => pieces.gamma().scalar(),
                    LossTerm::Eta => pieces.eta().scalar(),
                }
            };
            v.push(s);
        }
        v
    };

    Ok(VaeganLoss {
        generator: ObjectiveBreakdown {
            d_alpha: slots[0],
            d_beta: slots[1],
            d_gamma: slots[2],
            d_eta: slots[3],
            recon_x,
            recon_y,
            kl_terms,
            total: loss.scalar(),
            loss,
        },
        critic_loss,
        critic_items,
    })
}

/// Invertible map between a data space and a same-dimension latent space.
/// Batches are [B, D]; both directions return the mapped batch together
/// with the per-sample log|det Jacobian| of the direction evaluated.
pub trait Flow {
    fn to_latent(&self, x: &Tensor) -> (Tensor, Tensor);
    fn to_data(&self, z: &Tensor) -> (Tensor, Tensor);
}

/// Exact log p(x) under a flow with the given base distribution:
/// log p_base(z) + log|det ∂z/∂x| with z the latent image of x. Per-sample,
/// shape [B].
pub fn flow_log_marginal(
    x: &Tensor,
    flow: &dyn Flow,
    base: &DiagGaussian,
) -> Result<Tensor, Error> {
    let (z, logdet) = flow.to_latent(x);
    Ok(base.log_prob(&z)? + logdet)
}

/// Conditional flow likelihood log p(x|y) ≈ log q(z|y) + log|det ∂z/∂x|
/// with z the latent image of x under a flow conditioned on y and the true
/// posterior replaced by the y-encoder's output. Per-sample, shape [B].
pub fn flow_conditional_loglik(
    x: &Tensor,
    flow_given_y: &dyn Flow,
    q_z_given_y: &DiagGaussian,
) -> Result<Tensor, Error> {
    let (z, logdet) = flow_given_y.to_latent(x);
    Ok(q_z_given_y.log_prob(&z)? + logdet)
}

/// Inputs for the hybrid flow/VAE objective: exact flows for the image
/// marginal and the y-conditioned image conditional, a VAE for the discrete
/// modality, and an image-side posterior for the y|x term.
pub struct VaenvpInputs<'a> {
    /// Image batch, flattened to [B, D].
    pub x: &'a Tensor,
    /// Unconditional image flow (f).
    pub flow_marginal: &'a dyn Flow,
    /// Image flow conditioned on the batch's y (g).
    pub flow_conditional: &'a dyn Flow,
    /// Base distribution for f, expanded to [B, D].
    pub flow_base: &'a DiagGaussian,
    /// y-encoder head giving g's base distribution in image dimensions.
    pub q_flow_given_y: &'a DiagGaussian,
    /// VAE posteriors in the low-dimensional latent space.
    pub q_x: &'a DiagGaussian,
    pub q_y: &'a DiagGaussian,
    pub prior: &'a DiagGaussian,
    pub noise_x: &'a Tensor,
    pub noise_y: &'a Tensor,
    pub log_py: LogLik<'a>,
}

/// Sum of both pairings of exact-marginal/approximate-conditional terms,
/// negated for minimization: [log p(x) by flow + ELBO-style log p(y|x)
/// through q(z|x)] + [ELBO(y) + conditional-flow log p(x|y)]. Slots follow
/// the marginal/conditional layout: d_alpha = −flow marginal of x,
/// d_beta = −conditional flow term, d_gamma = −ELBO(y), d_eta = −(y|x term).
pub fn vaenvp_loss(inputs: &VaenvpInputs) -> Result<ObjectiveBreakdown, Error> {
    let marg_x = flow_log_marginal(inputs.x, inputs.flow_marginal, inputs.flow_base)?.mean_all();
    let cond_x =
        flow_conditional_loglik(inputs.x, inputs.flow_conditional, inputs.q_flow_given_y)?
            .mean_all();

    let e_y = elbo(inputs.q_y, inputs.prior, inputs.noise_y, inputs.log_py)?;
    // y|x in ELBO form through the image-side posterior; the prior stands in
    // for the intractable p(z|x).
    let z_x = reparam_sample(inputs.q_x, inputs.noise_x)?;
    let ry_from_x = (inputs.log_py)(&z_x)?.mean_all();
    let kl_x = kl_diag_gaussians(inputs.q_x, inputs.prior)?.mean_all();
    let cond_y = &ry_from_x - &kl_x;

    let d_alpha = -marg_x;
    let d_beta = -cond_x;
    let d_gamma = -e_y.value;
    let d_eta = -cond_y;
    let loss = &d_alpha + &d_beta + &d_gamma + &d_eta;

    let mut kl_terms = BTreeMap::new();
    kl_terms.insert("kl_x_prior".into(), kl_x.scalar());
    kl_terms.insert("kl_y_prior".into(), e_y.kl.scalar());
    Ok(ObjectiveBreakdown {
        d_alpha: d_alpha.scalar(),
        d_beta: d_beta.scalar(),
        d_gamma: d_gamma.scalar(),
        d_eta: d_eta.scalar(),
        recon_x: d_beta.scalar() + d_alpha.scalar(),
        recon_y: (-&e_y.recon).scalar() + (-&ry_from_x).scalar(),
        kl_terms,
        total: loss.scalar(),
        loss,
    })
}
