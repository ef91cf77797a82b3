//! Metrics over frozen models: importance-weighted log-likelihoods, label
//! accuracy, conditional perplexity, FID over self-trained oracle features,
//! and oracle-scored conditional sample quality (OSE).
//!
//! Everything here is pure given a model and a seed. Importance estimates
//! derive one rng per example from (seed, example id), so results are
//! invariant to how a dataset is batched or sharded.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tape::init;
use tape::Tensor;

use crate::checkpoint::load_checkpoint;
use crate::dist::{reparam_sample, DiagGaussian};
use crate::error::Error;
use crate::networks::{VaeComponents, YData, YDecoder};
use crate::objectives::Flow;
use crate::trainer::{
    load_model, train, ExperimentConfig, Family, Model, ModelKind, PairedDataset, TrainReport,
    LOGIT_ALPHA,
};

/// Importance-sample count used for reported log-likelihoods.
pub const DEFAULT_IW_SAMPLES: usize = 1000;
/// Importance samples are decoded in chunks of this size to bound memory.
pub const DEFAULT_IW_CHUNK: usize = 100;
/// Marginal sample-quality protocol size; desk-scale runs override it.
pub const FID_PROTOCOL_SAMPLES: usize = 50_000;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IwConfig {
    pub k: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for IwConfig {
    fn default() -> Self {
        IwConfig { k: DEFAULT_IW_SAMPLES, chunk: DEFAULT_IW_CHUNK, seed: 0 }
    }
}

impl IwConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.k < 1 {
            return Err(Error::contract("importance sampling needs K >= 1"));
        }
        if self.chunk < 1 {
            return Err(Error::contract("importance sampling needs a positive chunk size"));
        }
        Ok(())
    }
}

/// Deterministic per-example stream: estimates depend on the example's
/// identity, not on its position in a batch.
pub fn example_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut z = seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Numerically stabilized log of the mean of exp(w) over exactly `k` draws
/// requested in chunks: running max with rescaled partial sums, so weights
/// spanning hundreds of nats do not overflow.
pub fn log_mean_exp_stream<F>(k: usize, chunk: usize, mut draws: F) -> Result<f64, Error>
where
    F: FnMut(usize) -> Result<Vec<f64>, Error>,
{
    if k < 1 || chunk < 1 {
        return Err(Error::contract("importance sampling needs K >= 1 and a positive chunk"));
    }
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut seen = 0usize;
    while seen < k {
        let take = chunk.min(k - seen);
        let lw = draws(take)?;
        if lw.len() != take {
            return Err(Error::contract(format!(
                "weight provider returned {} draws, wanted {take}",
                lw.len()
            )));
        }
        for w in lw {
            if w.is_nan() {
                return Err(Error::contract("non-finite importance weight"));
            }
            if w > max {
                sum = if max.is_finite() { sum * (max - w).exp() } else { 0.0 };
                max = w;
                sum += 1.0;
            } else if max.is_finite() {
                sum += (w - max).exp();
            }
            // w == max == -inf contributes a zero-probability draw.
        }
        seen += take;
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(max + (sum / k as f64).ln())
}

// ---------------------------------------------------------------------------
// Importance-weighted log-likelihoods

fn repeat_rows(row: &ArrayD<f64>, c: usize) -> ArrayD<f64> {
    let mut shape = vec![c];
    shape.extend_from_slice(row.shape());
    let flat: Vec<f64> = row.iter().copied().collect();
    let mut out = Vec::with_capacity(c * flat.len());
    for _ in 0..c {
        out.extend_from_slice(&flat);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("replicated shape")
}

fn gaussian_row(q: &DiagGaussian, row: usize) -> (ArrayD<f64>, ArrayD<f64>) {
    (
        q.mean.array().index_axis(Axis(0), row).to_owned().into_dyn(),
        q.log_variance.array().index_axis(Axis(0), row).to_owned().into_dyn(),
    )
}

enum OwnedY {
    Labels(Vec<usize>),
    Text(Vec<Vec<usize>>),
}

impl OwnedY {
    fn replicated(y: &YData, row: usize, c: usize) -> OwnedY {
        match y {
            YData::Label(l) => OwnedY::Labels(vec![l[row]; c]),
            YData::Text(t) => OwnedY::Text(vec![t[row].clone(); c]),
        }
    }

    fn as_data(&self) -> YData<'_> {
        match self {
            OwnedY::Labels(l) => YData::Label(l),
            OwnedY::Text(t) => YData::Text(t),
        }
    }
}

fn check_ids(batch: usize, ids: &[usize]) -> Result<(), Error> {
    if batch == 0 {
        return Err(Error::contract("importance estimation over an empty batch"));
    }
    if ids.len() != batch {
        return Err(Error::contract(format!(
            "need one example id per row: {} ids, batch {batch}",
            ids.len()
        )));
    }
    Ok(())
}

/// One importance chunk: draw z ~ q_row, return the log-weight vector
/// log target(z) − log q(z) where `target` supplies the numerator terms.
fn iw_chunk<F>(
    mu: &ArrayD<f64>,
    lv: &ArrayD<f64>,
    c: usize,
    rng: &mut ChaCha8Rng,
    target: F,
) -> Result<Vec<f64>, Error>
where
    F: FnOnce(&Tensor) -> Result<Tensor, Error>,
{
    let latent = mu.len();
    let q = DiagGaussian::new(
        Tensor::constant(repeat_rows(mu, c)),
        Tensor::constant(repeat_rows(lv, c)),
    )?;
    let noise = Tensor::constant(init::normal(&[c, latent], 0.0, 1.0, rng));
    let z = reparam_sample(&q, &noise)?;
    let prior = DiagGaussian::standard(&[c, latent]);
    let numer = target(&z)?.add(&prior.log_prob(&z)?);
    let lw = numer.sub(&q.log_prob(&z)?);
    Ok(lw.array().iter().copied().collect())
}

/// log p(x) per example: log-mean of K weights p(x|z)p(z)/q(z|x), z ~ q(z|x).
pub fn iw_log_marginal_x(
    comps: &VaeComponents,
    x: &Tensor,
    ids: &[usize],
    cfg: &IwConfig,
) -> Result<Vec<f64>, Error> {
    cfg.validate()?;
    let b = x.shape()[0];
    check_ids(b, ids)?;
    let q = comps.enc_x.forward(x)?;
    let x_arr = x.array();
    let mut out = Vec::with_capacity(b);
    for (row, &id) in ids.iter().enumerate() {
        let (mu, lv) = gaussian_row(&q, row);
        let x_row = x_arr.index_axis(Axis(0), row).to_owned().into_dyn();
        let mut rng = example_rng(cfg.seed, id as u64);
        out.push(log_mean_exp_stream(cfg.k, cfg.chunk, |c| {
            iw_chunk(&mu, &lv, c, &mut rng, |z| {
                let x_rep = Tensor::constant(repeat_rows(&x_row, c));
                comps.dec_x.forward(z)?.log_prob_each(&x_rep)
            })
        })?);
    }
    Ok(out)
}

/// log p(y) per example through q(z|y); for text the likelihood is the
/// autoregressive per-word product with the end token included.
pub fn iw_log_marginal_y(
    comps: &VaeComponents,
    y: &YData,
    ids: &[usize],
    cfg: &IwConfig,
) -> Result<Vec<f64>, Error> {
    cfg.validate()?;
    let b = y.len();
    check_ids(b, ids)?;
    let q = comps.enc_y.forward(y)?;
    let mut out = Vec::with_capacity(b);
    for (row, &id) in ids.iter().enumerate() {
        let (mu, lv) = gaussian_row(&q, row);
        let y_rep = OwnedY::replicated(y, row, 1);
        let mut rng = example_rng(cfg.seed, id as u64);
        out.push(log_mean_exp_stream(cfg.k, cfg.chunk, |c| {
            let y_c = match &y_rep {
                OwnedY::Labels(l) => OwnedY::Labels(vec![l[0]; c]),
                OwnedY::Text(t) => OwnedY::Text(vec![t[0].clone(); c]),
            };
            iw_chunk(&mu, &lv, c, &mut rng, |z| {
                let mut quiet = ChaCha8Rng::seed_from_u64(0);
                comps.dec_y.log_likelihood(z, &y_c.as_data(), false, &mut quiet)
            })
        })?);
    }
    Ok(out)
}

/// log p(x, y) per example: weights p(x|z)p(y|z)p(z)/q(z|x,y), z ~ q(z|x,y).
pub fn iw_log_joint(
    comps: &VaeComponents,
    x: &Tensor,
    y: &YData,
    ids: &[usize],
    cfg: &IwConfig,
) -> Result<Vec<f64>, Error> {
    cfg.validate()?;
    let b = x.shape()[0];
    check_ids(b, ids)?;
    if y.len() != b {
        return Err(Error::contract("joint estimation needs aligned batch sides"));
    }
    let latent = comps.enc_x.forward(x)?.dim();
    let prior = DiagGaussian::standard(&[b, latent]);
    let q_x = comps.enc_x.forward(x)?;
    let q_y = comps.enc_y.forward(y)?;
    let q_xy = comps.joint.posterior(x, y, &q_x, &q_y, &prior)?;
    let x_arr = x.array();
    let mut out = Vec::with_capacity(b);
    for (row, &id) in ids.iter().enumerate() {
        let (mu, lv) = gaussian_row(&q_xy, row);
        let x_row = x_arr.index_axis(Axis(0), row).to_owned().into_dyn();
        let y_rep = OwnedY::replicated(y, row, 1);
        let mut rng = example_rng(cfg.seed, id as u64);
        out.push(log_mean_exp_stream(cfg.k, cfg.chunk, |c| {
            let y_c = match &y_rep {
                OwnedY::Labels(l) => OwnedY::Labels(vec![l[0]; c]),
                OwnedY::Text(t) => OwnedY::Text(vec![t[0].clone(); c]),
            };
            iw_chunk(&mu, &lv, c, &mut rng, |z| {
                let x_rep = Tensor::constant(repeat_rows(&x_row, c));
                let lp_x = comps.dec_x.forward(z)?.log_prob_each(&x_rep)?;
                let mut quiet = ChaCha8Rng::seed_from_u64(0);
                let lp_y = comps.dec_y.log_likelihood(z, &y_c.as_data(), false, &mut quiet)?;
                Ok(lp_x.add(&lp_y))
            })
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Posterior-mean classification and conditional perplexity

/// Fraction of examples whose MAP label under p(y | z = E[q(z|x)]) matches.
pub fn label_accuracy(comps: &VaeComponents, x: &Tensor, labels: &[usize]) -> Result<f64, Error> {
    let b = x.shape()[0];
    if b == 0 || labels.len() != b {
        return Err(Error::contract("label accuracy needs one label per image"));
    }
    let dec = match &comps.dec_y {
        YDecoder::Label(d) => d,
        YDecoder::Text(_) => {
            return Err(Error::contract("label accuracy needs a label decoder"))
        }
    };
    let q = comps.enc_x.forward(x)?;
    let lik = dec.forward(&q.mean)?;
    let logits = lik.logits.array();
    let classes = lik.classes();
    let mut correct = 0usize;
    for (row, &gold) in labels.iter().enumerate() {
        let mut best = 0usize;
        for c in 1..classes {
            if logits[[row, c]] > logits[[row, best]] {
                best = c;
            }
        }
        if best == gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / b as f64)
}

/// Which posterior supplies z for conditional perplexity. The metric is
/// described as text-given-image, so the image posterior is the default;
/// scoring through q(z|y) is the appendix's variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerplexityConditioning {
    OnImage,
    OnText,
}

/// exp of the negative per-word log-likelihood, normalized per sentence
/// and then per dataset; z is one posterior sample per example. Scored
/// positions are each sentence's tokens plus the end token.
pub fn conditional_perplexity(
    comps: &VaeComponents,
    x: &Tensor,
    tokens: &[Vec<usize>],
    ids: &[usize],
    conditioning: PerplexityConditioning,
    seed: u64,
) -> Result<f64, Error> {
    let b = x.shape()[0];
    check_ids(b, ids)?;
    if tokens.len() != b {
        return Err(Error::contract("perplexity needs one sentence per image"));
    }
    let dec = match &comps.dec_y {
        YDecoder::Text(d) => d,
        YDecoder::Label(_) => {
            return Err(Error::contract("conditional perplexity needs a text decoder"))
        }
    };
    let q = match conditioning {
        PerplexityConditioning::OnImage => comps.enc_x.forward(x)?,
        PerplexityConditioning::OnText => comps.enc_y.forward(&YData::Text(tokens))?,
    };
    let latent = q.dim();
    let mut noise = Array2::<f64>::zeros((b, latent));
    for (row, &id) in ids.iter().enumerate() {
        let mut rng = example_rng(seed, id as u64);
        let draws = init::normal(&[latent], 0.0, 1.0, &mut rng);
        for d in 0..latent {
            noise[[row, d]] = draws[[d]];
        }
    }
    let z = reparam_sample(&q, &Tensor::constant(noise.into_dyn()))?;
    let mut quiet = ChaCha8Rng::seed_from_u64(0);
    let ll = dec.log_likelihood(&z, tokens, false, &mut quiet)?.array();
    let lengths: Vec<usize> = tokens.iter().map(|t| t.len() + 1).collect();
    perplexity_from_loglik(ll.as_slice().expect("contiguous"), &lengths)
}

/// The double normalization shared by every perplexity report: mean the
/// per-sentence mean log-likelihoods, then exponentiate the negation. A
/// decoder that is always certain and right scores exactly 1.
pub fn perplexity_from_loglik(loglik: &[f64], positions: &[usize]) -> Result<f64, Error> {
    if loglik.is_empty() || loglik.len() != positions.len() {
        return Err(Error::contract("perplexity needs one log-likelihood per sentence"));
    }
    let mut acc = 0.0;
    for (ll, &p) in loglik.iter().zip(positions) {
        if p == 0 {
            return Err(Error::contract("perplexity over an empty sentence"));
        }
        acc += ll / p as f64;
    }
    Ok((-acc / loglik.len() as f64).exp())
}

// ---------------------------------------------------------------------------
// Activation statistics and FID

/// First and second moments of oracle features. Construction keeps the
/// covariance bitwise symmetric; shards merge associatively.
#[derive(Clone, Debug)]
pub struct ActivationStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub sample_count: usize,
}

impl ActivationStats {
    pub fn from_rows(rows: &Array2<f64>) -> Result<ActivationStats, Error> {
        let n = rows.nrows();
        let d = rows.ncols();
        if n < 2 {
            return Err(Error::contract("activation statistics need at least 2 samples"));
        }
        let mean = rows.mean_axis(Axis(0)).expect("n >= 2");
        let centered = rows - &mean.view().insert_axis(Axis(0));
        let mut cov = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in i..d {
                let v = centered.column(i).dot(&centered.column(j)) / (n as f64 - 1.0);
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        let stats = ActivationStats { mean, covariance: cov, sample_count: n };
        stats.validate()?;
        Ok(stats)
    }

    /// Pooled statistics of the concatenated shards.
    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats, Error> {
        self.validate()?;
        other.validate()?;
        let d = self.mean.len();
        if other.mean.len() != d {
            return Err(Error::contract("cannot merge statistics of different feature widths"));
        }
        let (n1, n2) = (self.sample_count as f64, other.sample_count as f64);
        let n = n1 + n2;
        let mean = (&self.mean * n1 + &other.mean * n2) / n;
        let delta = &self.mean - &other.mean;
        let weight = n1 * n2 / n;
        let mut cov = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in i..d {
                let scatter = self.covariance[[i, j]] * (n1 - 1.0)
                    + other.covariance[[i, j]] * (n2 - 1.0)
                    + weight * delta[i] * delta[j];
                let v = scatter / (n - 1.0);
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        Ok(ActivationStats {
            mean,
            covariance: cov,
            sample_count: self.sample_count + other.sample_count,
        })
    }

    pub fn validate(&self) -> Result<(), Error> {
        let d = self.mean.len();
        if self.covariance.nrows() != d || self.covariance.ncols() != d {
            return Err(Error::contract("covariance shape disagrees with the mean"));
        }
        if self.sample_count < 2 {
            return Err(Error::contract("activation statistics need at least 2 samples"));
        }
        if self.mean.iter().any(|v| !v.is_finite())
            || self.covariance.iter().any(|v| !v.is_finite())
        {
            return Err(Error::contract("non-finite activation statistics"));
        }
        for i in 0..d {
            for j in 0..d {
                if (self.covariance[[i, j]] - self.covariance[[j, i]]).abs() > 1e-8 {
                    return Err(Error::contract("covariance is not symmetric"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// Total magnitude of negative eigenvalues clamped to zero while taking
    /// matrix square roots; worth a look when it exceeds 1e-6.
    pub clamped_mass: f64,
}

fn sqrt_psd(m: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped: f64 = eig.eigenvalues.iter().map(|l| (-l).max(0.0)).sum();
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    (&eig.eigenvectors * root * eig.eigenvectors.transpose(), clamped)
}

/// ‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r Σ_g)^{1/2}), the square root taken
/// by eigendecomposition of √Σ_r Σ_g √Σ_r with negatives clamped.
pub fn fid(real: &ActivationStats, generated: &ActivationStats) -> Result<FidResult, Error> {
    real.validate()?;
    generated.validate()?;
    let d = real.mean.len();
    if generated.mean.len() != d {
        return Err(Error::contract("FID inputs have different feature widths"));
    }
    let to_dm = |a: &Array2<f64>| DMatrix::from_fn(d, d, |i, j| a[[i, j]]);
    let (root_r, mass_r) = sqrt_psd(to_dm(&real.covariance));
    let inner = &root_r * to_dm(&generated.covariance) * &root_r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mass_g: f64 = eig.eigenvalues.iter().map(|l| (-l).max(0.0)).sum();
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = real
        .mean
        .iter()
        .zip(generated.mean.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace_r: f64 = (0..d).map(|i| real.covariance[[i, i]]).sum();
    let trace_g: f64 = (0..d).map(|i| generated.covariance[[i, i]]).sum();
    Ok(FidResult {
        value: mean_term + trace_r + trace_g - 2.0 * trace_sqrt,
        clamped_mass: mass_r + mass_g,
    })
}

// ---------------------------------------------------------------------------
// Oracles

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleTask {
    Classifier,
    Captioner,
}

/// A frozen supervised network trained on the same dataset family as the
/// models it scores. Features come from the designated penultimate layer.
pub struct OracleNetwork {
    pub task: OracleTask,
    pub feature_layer: String,
    pub model: Model,
    pub dataset_fingerprint: Option<String>,
}

impl OracleNetwork {
    fn encoder(&self) -> Result<&crate::networks::ImageEncoder, Error> {
        match &self.model.kind {
            ModelKind::Classifier { enc, .. } => Ok(enc),
            ModelKind::Captioner { enc, .. } => Ok(enc),
            _ => Err(Error::contract("oracle checkpoint is not a supervised model")),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.model.config.latent_dim
    }

    /// Penultimate-layer activations, deterministic in eval mode.
    pub fn features(&self, x: &Tensor) -> Result<Array2<f64>, Error> {
        let q = self.encoder()?.forward(x)?;
        let arr = q.mean.array();
        let b = arr.shape()[0];
        let d = arr.len() / b;
        Ok(arr.into_shape_with_order((b, d)).expect("2-D features"))
    }

    /// MAP class per image; classifier oracles only.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>, Error> {
        let (enc, head) = match &self.model.kind {
            ModelKind::Classifier { enc, head, .. } => (enc, head),
            _ => return Err(Error::contract("classification needs a classifier oracle")),
        };
        let q = enc.forward(x)?;
        let logits = head.forward(&q.mean).array();
        let classes = logits.shape()[1];
        let b = logits.shape()[0];
        let mut out = Vec::with_capacity(b);
        for row in 0..b {
            let mut best = 0usize;
            for c in 1..classes {
                if logits[[row, c]] > logits[[row, best]] {
                    best = c;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Guard for scoring pipelines: the oracle must have been fit on the
    /// dataset family it is about to judge.
    pub fn verify_fingerprint(&self, expected: &str) -> Result<(), Error> {
        match &self.dataset_fingerprint {
            Some(f) if f == expected => Ok(()),
            Some(f) => Err(Error::contract(format!(
                "oracle was trained on a different dataset: {f} vs {expected}"
            ))),
            None => Err(Error::contract("oracle checkpoint carries no dataset fingerprint")),
        }
    }
}

/// Fit a supervised oracle with the shared trainer and freeze the final
/// checkpoint. The returned network carries the training-set fingerprint.
pub fn train_oracle(
    task: OracleTask,
    config: &ExperimentConfig,
    data: &PairedDataset,
    val: Option<&PairedDataset>,
    out_dir: &Path,
) -> Result<(OracleNetwork, TrainReport), Error> {
    let mut cfg = config.clone();
    cfg.family = match task {
        OracleTask::Classifier => Family::Classifier,
        OracleTask::Captioner => Family::Captioner,
    };
    let report = train(&cfg, data, val, out_dir)?;
    let oracle = load_oracle(&report.final_checkpoint)?;
    Ok((oracle, report))
}

pub fn load_oracle(dir: &Path) -> Result<OracleNetwork, Error> {
    let model = load_model(dir)?;
    let task = match model.family {
        Family::Classifier => OracleTask::Classifier,
        Family::Captioner => OracleTask::Captioner,
        other => {
            return Err(Error::contract(format!("family {other} is not an oracle task")))
        }
    };
    let (manifest, _) = load_checkpoint(dir)?;
    Ok(OracleNetwork {
        task,
        feature_layer: "enc.mu".to_string(),
        model,
        dataset_fingerprint: manifest.data_fingerprint,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OseScore {
    /// Fraction of conditional samples the oracle assigns to their
    /// conditioning label. Higher is better; a perfect generator scores
    /// the oracle's own test accuracy.
    Accuracy(f64),
    /// Oracle-scored perplexity of the conditioning text given the
    /// generated image. Lower is better.
    Perplexity(f64),
}

impl OseScore {
    pub fn value(&self) -> f64 {
        match self {
            OseScore::Accuracy(v) | OseScore::Perplexity(v) => *v,
        }
    }
}

/// Conditional sample quality as judged by a frozen oracle: classify the
/// generated images against the conditioning labels, or score the
/// conditioning text's perplexity given the generated images.
pub fn ose(oracle: &OracleNetwork, images: &Tensor, conditioning: &YData) -> Result<OseScore, Error> {
    let b = images.shape()[0];
    if b == 0 || conditioning.len() != b {
        return Err(Error::contract("OSE needs one conditioning value per image"));
    }
    match (oracle.task, conditioning) {
        (OracleTask::Classifier, YData::Label(labels)) => {
            let predicted = oracle.classify(images)?;
            let correct = predicted.iter().zip(labels.iter()).filter(|(p, g)| p == g).count();
            Ok(OseScore::Accuracy(correct as f64 / b as f64))
        }
        (OracleTask::Captioner, YData::Text(tokens)) => {
            let (enc, dec) = match &oracle.model.kind {
                ModelKind::Captioner { enc, dec, .. } => (enc, dec),
                _ => return Err(Error::contract("oracle checkpoint is not a captioner")),
            };
            let q = enc.forward(images)?;
            let mut quiet = ChaCha8Rng::seed_from_u64(0);
            let ll = dec.log_likelihood(&q.mean, tokens, false, &mut quiet)?.array();
            let lengths: Vec<usize> = tokens.iter().map(|t| t.len() + 1).collect();
            Ok(OseScore::Perplexity(perplexity_from_loglik(
                ll.as_slice().expect("contiguous"),
                &lengths,
            )?))
        }
        _ => Err(Error::contract("oracle task does not match the conditioning modality")),
    }
}

// ---------------------------------------------------------------------------
// Sampling frozen models

/// Undo the flow preprocessing: squash back through the logistic function
/// and remove the (α, 1−α) squeeze, clamped into [0, 1].
pub fn inverse_flow_coordinates(h: &ArrayD<f64>, alpha: f64) -> ArrayD<f64> {
    h.mapv(|v| {
        let s = 1.0 / (1.0 + (-v).exp());
        ((s - alpha) / (1.0 - 2.0 * alpha)).clamp(0.0, 1.0)
    })
}

fn image_shape(model: &Model, b: usize) -> Vec<usize> {
    let mut shape = vec![b];
    shape.extend_from_slice(&model.x_spec.shape);
    shape
}

fn flow_images(model: &Model, flow: &dyn Flow, base: &Tensor) -> Tensor {
    let (h, _) = flow.to_data(base);
    let x01 = inverse_flow_coordinates(&h.array(), LOGIT_ALPHA);
    let b = base.shape()[0];
    Tensor::constant(
        x01.into_shape_with_order(IxDyn(&image_shape(model, b))).expect("image shape"),
    )
}

/// Draw `n` images from the model's marginal in batches of `batch`.
pub fn sample_marginal_images(
    model: &Model,
    n: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, Error> {
    if n == 0 || batch == 0 {
        return Err(Error::contract("sampling needs n >= 1 and a positive batch"));
    }
    let latent = model.config.latent_dim;
    let mut chunks: Vec<ArrayD<f64>> = Vec::new();
    let mut left = n;
    while left > 0 {
        let b = batch.min(left);
        let imgs = match &model.kind {
            ModelKind::VaeLike(c) => {
                let z = Tensor::constant(init::normal(&[b, latent], 0.0, 1.0, rng));
                c.dec_x.generate(&z)
            }
            ModelKind::VaeGan { comps, .. } => {
                let z = Tensor::constant(init::normal(&[b, latent], 0.0, 1.0, rng));
                comps.dec_x.generate(&z)
            }
            ModelKind::Gan { dec, .. } => {
                let z = Tensor::constant(init::normal(&[b, latent], 0.0, 1.0, rng));
                dec.generate(&z)
            }
            ModelKind::VaeNvp(parts) => {
                let dim = model.x_spec.feature_len();
                let u = Tensor::constant(init::normal(&[b, dim], 0.0, 1.0, rng));
                flow_images(model, &parts.flow_f, &u)
            }
            ModelKind::Nvp { flow, .. } => {
                let dim = model.x_spec.feature_len();
                let u = Tensor::constant(init::normal(&[b, dim], 0.0, 1.0, rng));
                flow_images(model, flow, &u)
            }
            ModelKind::Classifier { .. } | ModelKind::Captioner { .. } => {
                return Err(Error::contract(format!(
                    "family {} does not generate images",
                    model.family
                )))
            }
        };
        chunks.push(imgs.array());
        left -= b;
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).expect("uniform sample shapes");
    Ok(Tensor::constant(all))
}

/// Draw one image per conditioning value through the model's y-conditioned
/// generator.
pub fn sample_conditional_images(
    model: &Model,
    y: &YData,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, Error> {
    let b = y.len();
    if b == 0 {
        return Err(Error::contract("conditional sampling over an empty batch"));
    }
    match &model.kind {
        ModelKind::VaeLike(c) | ModelKind::VaeGan { comps: c, .. } => {
            let q_y = c.enc_y.forward(y)?;
            let latent = q_y.dim();
            let noise = Tensor::constant(init::normal(&[b, latent], 0.0, 1.0, rng));
            let z = reparam_sample(&q_y, &noise)?;
            Ok(c.dec_x.generate(&z))
        }
        ModelKind::VaeNvp(parts) => {
            let q_fy = parts.base_y.forward(y)?;
            let dim = q_fy.dim();
            let noise = Tensor::constant(init::normal(&[b, dim], 0.0, 1.0, rng));
            let u = reparam_sample(&q_fy, &noise)?;
            Ok(flow_images(model, &parts.flow_g, &u))
        }
        _ => Err(Error::contract(format!(
            "family {} has no y-conditioned image generator",
            model.family
        ))),
    }
}

// ---------------------------------------------------------------------------
// Reporting

/// One metric observation, written as a JSON line by the harness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
}
