//! Model builders for every encoder, decoder, critic, and flow in the
//! toolkit, parameterized by modality specs and a shared width config.
//!
//! All builders register parameters in a caller-supplied [`ParamStore`]
//! under a caller-chosen prefix and are bitwise-reproducible given the same
//! seed. Built networks own cheap clones of their parameter tensors (the
//! value cells are shared with the store, so optimizer updates are visible
//! immediately).

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tape::ndarray::{ArrayD, IxDyn};
use tape::optim::ParamStore;
use tape::{init, Tensor};

use crate::dist::{poe_combine, BernoulliLikelihood, CategoricalLikelihood, DiagGaussian};
use crate::error::Error;
use crate::objectives::Flow;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
/// First index available to real vocabulary entries.
pub const FIRST_WORD: usize = 4;

pub const IMAGE_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Image,
    Label,
    Text,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    pub shape: Vec<usize>,
    pub vocab_size: Option<usize>,
}

impl ModalitySpec {
    pub fn image(name: &str, channels: usize) -> ModalitySpec {
        ModalitySpec {
            name: name.into(),
            kind: ModalityKind::Image,
            shape: vec![channels, IMAGE_SIDE, IMAGE_SIDE],
            vocab_size: None,
        }
    }

    pub fn label(name: &str, classes: usize) -> ModalitySpec {
        ModalitySpec {
            name: name.into(),
            kind: ModalityKind::Label,
            shape: vec![classes],
            vocab_size: Some(classes),
        }
    }

    pub fn text(name: &str, vocab: usize) -> ModalitySpec {
        ModalitySpec {
            name: name.into(),
            kind: ModalityKind::Text,
            shape: vec![vocab],
            vocab_size: Some(vocab),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        match self.kind {
            ModalityKind::Image => {
                if self.shape.len() != 3
                    || self.shape[1] != IMAGE_SIDE
                    || self.shape[2] != IMAGE_SIDE
                {
                    return Err(Error::contract(format!(
                        "image modality {} must be channels x {IMAGE_SIDE} x {IMAGE_SIDE}, got {:?}",
                        self.name, self.shape
                    )));
                }
            }
            ModalityKind::Label | ModalityKind::Text => match self.vocab_size {
                Some(v) if v >= 2 => {}
                other => {
                    return Err(Error::contract(format!(
                        "modality {} needs vocab_size >= 2, got {other:?}",
                        self.name
                    )));
                }
            },
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub conv_stages: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub rnn_hidden: usize,
    pub word_dropout: f64,
    pub coupling_layers: usize,
    pub flow_hidden: usize,
    pub max_text_len: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latent_dim: 40,
            hidden: 128,
            conv_stages: 3,
            base_channels: 16,
            embed_dim: 32,
            rnn_hidden: 64,
            word_dropout: 0.3,
            coupling_layers: 4,
            flow_hidden: 64,
            max_text_len: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.latent_dim == 0 {
            return Err(Error::contract("latent_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::contract(format!(
                "word_dropout must lie in [0, 1), got {}",
                self.word_dropout
            )));
        }
        if !(3..=4).contains(&self.conv_stages) {
            return Err(Error::contract(format!(
                "conv_stages must be 3 or 4, got {}",
                self.conv_stages
            )));
        }
        Ok(())
    }
}

/// One-hot encode a batch of class indices as a constant.
pub fn one_hot(ids: &[usize], classes: usize) -> Result<Tensor, Error> {
    let mut arr = ArrayD::zeros(IxDyn(&[ids.len(), classes]));
    for (i, &c) in ids.iter().enumerate() {
        if c >= classes {
            return Err(Error::contract(format!("class index {c} >= {classes}")));
        }
        arr[[i, c]] = 1.0;
    }
    Ok(Tensor::constant(arr))
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Linear {
        Linear {
            w: store.var(&format!("{name}.w"), init::kaiming_uniform(&[fan_in, out], fan_in, rng)),
            b: store.var(&format!("{name}.b"), init::zeros(&[1, out])),
        }
    }

    pub fn new_zero(store: &mut ParamStore, name: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: store.var(&format!("{name}.w"), init::zeros(&[fan_in, out])),
            b: store.var(&format!("{name}.b"), init::zeros(&[1, out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w) + &self.b
    }
}

struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Conv {
        let fan_in = c_in * k * k;
        Conv {
            w: store.var(
                &format!("{name}.w"),
                init::kaiming_uniform(&[c_out, c_in, k, k], fan_in, rng),
            ),
            b: store.var(&format!("{name}.b"), init::zeros(&[1, c_out, 1, 1])),
            stride,
            pad,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w, self.stride, self.pad) + &self.b
    }
}

struct Deconv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
}

impl Deconv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
        rng: &mut impl Rng,
    ) -> Deconv {
        // Kernel layout matches the forward convolution it is adjoint to:
        // (c_in, c_out, k, k) with c_in playing the output-channel slot.
        let fan_in = c_in * k * k;
        Deconv {
            w: store.var(
                &format!("{name}.w"),
                init::kaiming_uniform(&[c_in, c_out, k, k], fan_in, rng),
            ),
            b: store.var(&format!("{name}.b"), init::zeros(&[1, c_out, 1, 1])),
            stride,
            pad,
            out_hw,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d_transpose(&self.w, self.stride, self.pad, self.out_hw) + &self.b
    }
}

/// Per-channel batch normalization over (N, H, W). Training mode uses batch
/// statistics and refreshes the running buffers; eval mode reads the frozen
/// buffers, making the critic deterministic.
struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: RefCell<ArrayD<f64>>,
    running_var: RefCell<ArrayD<f64>>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: store.var(&format!("{name}.gamma"), init::full(&[1, channels, 1, 1], 1.0)),
            beta: store.var(&format!("{name}.beta"), init::zeros(&[1, channels, 1, 1])),
            running_mean: RefCell::new(init::zeros(&[1, channels, 1, 1])),
            running_var: RefCell::new(init::full(&[1, channels, 1, 1], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let (mean, var) = if train {
            let m = x.mean_axes(&[0, 2, 3], true);
            let centered = x - &m;
            let v = centered.powf(2.0).mean_axes(&[0, 2, 3], true);
            {
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                let bm = m.array();
                let bv = v.array();
                *rm = &*rm * (1.0 - self.momentum) + &bm * self.momentum;
                *rv = &*rv * (1.0 - self.momentum) + &bv * self.momentum;
            }
            (m, v)
        } else {
            (
                Tensor::constant(self.running_mean.borrow().clone()),
                Tensor::constant(self.running_var.borrow().clone()),
            )
        };
        let xn = (x - &mean) / (var.add_s(self.eps).sqrt());
        &(&xn * &self.gamma) + &self.beta
    }
}

fn stage_channels(base: usize, stage: usize) -> usize {
    base << stage.min(2)
}

/// Convolutional image trunk shared by encoders, the dedicated joint
/// encoder, and critics: `conv_stages` stride-2 convolutions with leaky
/// ReLU, flattened to a feature vector.
struct ConvTrunk {
    convs: Vec<Conv>,
    feat_len: usize,
}

impl ConvTrunk {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &ModalitySpec,
        config: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> ConvTrunk {
        let mut convs = Vec::new();
        let mut c_in = spec.shape[0];
        let mut side = IMAGE_SIDE;
        for s in 0..config.conv_stages {
            let c_out = stage_channels(config.base_channels, s);
            convs.push(Conv::new(
                store,
                &format!("{prefix}.conv{s}"),
                c_in,
                c_out,
                4,
                2,
                1,
                rng,
            ));
            c_in = c_out;
            side /= 2;
        }
        ConvTrunk { convs, feat_len: c_in * side * side }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu(0.2);
        }
        let b = h.shape()[0];
        h.reshape(&[b, self.feat_len])
    }
}

pub struct ImageEncoder {
    trunk: ConvTrunk,
    head_mean: Linear,
    head_logvar: Linear,
}

pub fn build_image_encoder(
    spec: &ModalitySpec,
    config: &NetworkConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<ImageEncoder, Error> {
    spec.validate()?;
    config.validate()?;
    let trunk = ConvTrunk::new(store, prefix, spec, config, rng);
    let feat = trunk.feat_len;
    Ok(ImageEncoder {
        trunk,
        head_mean: Linear::new(store, &format!("{prefix}.mean"), feat, config.latent_dim, rng),
        head_logvar: Linear::new(store, &format!("{prefix}.logvar"), feat, config.latent_dim, rng),
    })
}

impl ImageEncoder {
    pub fn forward(&self, x: &Tensor) -> Result<DiagGaussian, Error> {
        let h = self.trunk.forward(x);
        DiagGaussian::new(self.head_mean.forward(&h), self.head_logvar.forward(&h))
    }
}

pub struct ImageDecoder {
    fc: Linear,
    deconvs: Vec<Deconv>,
    final_conv: Conv,
    start_c: usize,
    start_side: usize,
}

pub fn build_image_decoder(
    spec: &ModalitySpec,
    config: &NetworkConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<ImageDecoder, Error> {
    spec.validate()?;
    config.validate()?;
    let stages = config.conv_stages;
    let start_side = IMAGE_SIDE >> stages;
    let start_c = stage_channels(config.base_channels, stages - 1);
    let fc = Linear::new(
        store,
        &format!("{prefix}.fc"),
        config.latent_dim,
        start_c * start_side * start_side,
        rng,
    );
    let mut deconvs = Vec::new();
    let mut c_in = start_c;
    let mut side = start_side;
    for s in 0..stages {
        let c_out = if s + 1 == stages {
            config.base_channels
        } else {
            stage_channels(config.base_channels, stages - 2 - s)
        };
        deconvs.push(Deconv::new(
            store,
            &format!("{prefix}.deconv{s}"),
            c_in,
            c_out,
            4,
            2,
            1,
            (side * 2, side * 2),
            rng,
        ));
        c_in = c_out;
        side *= 2;
    }
    let final_conv = Conv::new(
        store,
        &format!("{prefix}.out"),
        c_in,
        spec.shape[0],
        3,
        1,
        1,
        rng,
    );
    Ok(ImageDecoder { fc, deconvs, final_conv, start_c, start_side })
}

impl ImageDecoder {
    pub fn logits(&self, z: &Tensor) -> Tensor {
        let b = z.shape()[0];
        let mut h = self
            .fc
            .forward(z)
            .relu()
            .reshape(&[b, self.start_c, self.start_side, self.start_side]);
        for d in &self.deconvs {
            h = d.forward(&h).relu();
        }
        self.final_conv.forward(&h)
    }

    pub fn forward(&self, z: &Tensor) -> Result<BernoulliLikelihood, Error> {
        BernoulliLikelihood::new(self.logits(z))
    }

    /// Deterministic generator view used by adversarial estimates: the
    /// likelihood mean instead of a sample, keeping the sample path
    /// differentiable.
    pub fn generate(&self, z: &Tensor) -> Tensor {
        self.logits(z).sigmoid()
    }
}

pub struct LabelEncoder {
    l1: Linear,
    l2: Linear,
    head_mean: Linear,
    head_logvar: Linear,
    classes: usize,
}

pub struct LabelDecoder {
    l1: Linear,
    l2: Linear,
    out: Linear,
}

pub fn build_label_codec(
    spec: &ModalitySpec,
    config: &NetworkConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<(LabelEncoder, LabelDecoder), Error> {
    spec.validate()?;
    config.validate()?;
    let classes = spec.vocab_size.expect("validated");
    let h = config.hidden;
    let enc = LabelEncoder {
        l1: Linear::new(store, &format!("{prefix}.enc1"), classes, h, rng),
        l2: Linear::new(store, &format!("{prefix}.enc2"), h, h, rng),
        head_mean: Linear::new(store, &format!("{prefix}.enc_mean"), h, config.latent_dim, rng),
        head_logvar: Linear::new(store, &format!("{prefix}.enc_logvar"), h, config.latent_dim, rng),
        classes,
    };
    let dec = LabelDecoder {
        l1: Linear::new(store, &format!("{prefix}.dec1"), config.latent_dim, h, rng),
        l2: Linear::new(store, &format!("{prefix}.dec2"), h, h, rng),
        out: Linear::new(store, &format!("{prefix}.dec_out"), h, classes, rng),
    };
    Ok((enc, dec))
}

impl LabelEncoder {
    pub fn forward(&self, labels: &[usize]) -> Result<DiagGaussian, Error> {
        let x = one_hot(labels, self.classes)?;
        let h = self.l2.forward(&self.l1.forward(&x).relu()).relu();
        DiagGaussian::new(self.head_mean.forward(&h), self.head_logvar.forward(&h))
    }
}

impl LabelDecoder {
    pub fn forward(&self, z: &Tensor) -> Result<CategoricalLikelihood, Error> {
        let h = self.l2.forward(&self.l1.forward(z).relu()).relu();
        CategoricalLikelihood::new(self.out.forward(&h))
    }
}

/// Fused-gate GRU cell (reset/update/candidate), PyTorch gate convention.
struct GruCell {
    wx: Tensor,
    wh: Tensor,
    b: Tensor,
    hidden: usize,
}

impl GruCell {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> GruCell {
        GruCell {
            wx: store.var(&format!("{name}.wx"), init::xavier_uniform(&[input, 3 * hidden], input, 3 * hidden, rng)),
            wh: store.var(&format!("{name}.wh"), init::xavier_uniform(&[hidden, 3 * hidden], hidden, 3 * hidden, rng)),
            b: store.var(&format!("{name}.b"), init::zeros(&[1, 3 * hidden])),
            hidden,
        }
    }

    fn step(&self, x: &Tensor, h: &Tensor) -> Tensor {
        let n = self.hidden;
        let xg = &x.matmul(&self.wx) + &self.b;
        let hg = h.matmul(&self.wh);
        let r = (&xg.slice_axis(1, 0, n) + &hg.slice_axis(1, 0, n)).sigmoid();
        let z = (&xg.slice_axis(1, n, n) + &hg.slice_axis(1, n, n)).sigmoid();
        let cand = (&xg.slice_axis(1, 2 * n, n) + &(&r * &hg.slice_axis(1, 2 * n, n))).tanh();
        &(&(z.mul_s(-1.0).add_s(1.0)) * &cand) + &(&z * h)
    }
}

fn pad_batch(tokens: &[Vec<usize>], max_len: usize) -> Result<(Vec<Vec<usize>>, usize), Error> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token batch"));
    }
    let longest = tokens.iter().map(Vec::len).max().unwrap();
    if longest > max_len {
        return Err(Error::contract(format!(
            "sequence length {longest} exceeds configured maximum {max_len}"
        )));
    }
    let t = longest.max(1);
    let padded = tokens
        .iter()
        .map(|s| {
            let mut row = s.clone();
            row.resize(t, PAD);
            row
        })
        .collect();
    Ok((padded, t))
}

pub struct TextEncoder {
    embed: Tensor,
    gru: GruCell,
    head_mean: Linear,
    head_logvar: Linear,
    max_len: usize,
}

impl TextEncoder {
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<DiagGaussian, Error> {
        let (padded, t) = pad_batch(tokens, self.max_len)?;
        let b = padded.len();
        let mut h = Tensor::zeros(&[b, self.gru.hidden]);
        for step in 0..t {
            let ids: Vec<usize> = padded.iter().map(|row| row[step]).collect();
            let x = self.embed.rows(&ids);
            let h_new = self.gru.step(&x, &h);
            // Freeze finished sequences so the final state is each
            // sequence's own last step, not a PAD-fed one.
            let mask: Vec<f64> = tokens
                .iter()
                .map(|s| if step < s.len() { 1.0 } else { 0.0 })
                .collect();
            let m = Tensor::constant(
                ArrayD::from_shape_vec(IxDyn(&[b, 1]), mask).expect("mask shape"),
            );
            h = &(&m * &h_new) + &(&m.mul_s(-1.0).add_s(1.0) * &h);
        }
        DiagGaussian::new(self.head_mean.forward(&h), self.head_logvar.forward(&h))
    }
}

/// Replace each non-special gold token by UNK independently with
/// probability `rate`. Rate 0 returns the prefix unchanged; rate 1
/// replaces every real word.
pub fn word_dropout_inputs(gold: &[usize], rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    gold.iter()
        .map(|&tok| {
            if tok >= FIRST_WORD && rate > 0.0 && rng.gen::<f64>() < rate {
                UNK
            } else {
                tok
            }
        })
        .collect()
}

pub struct TextDecoder {
    embed: Tensor,
    init: Linear,
    gru: GruCell,
    out: Linear,
    vocab: usize,
    word_dropout: f64,
    max_len: usize,
}

impl TextDecoder {
    /// Teacher-forced pass: one categorical distribution per output step
    /// (each sequence's tokens followed by EOS; trailing PAD steps exist in
    /// the batch but are masked out by [`log_likelihood`]'s accounting). In
    /// training mode each non-special input token is independently replaced
    /// by UNK at the configured rate.
    ///
    /// [`log_likelihood`]: TextDecoder::log_likelihood
    pub fn step_likelihoods(
        &self,
        z: &Tensor,
        tokens: &[Vec<usize>],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<CategoricalLikelihood>, Error> {
        let (padded, t) = pad_batch(tokens, self.max_len)?;
        let b = padded.len();
        let mut h = self.init.forward(z).tanh();
        let mut steps = Vec::with_capacity(t + 1);
        for step in 0..=t {
            let gold: Vec<usize> = (0..b)
                .map(|i| if step == 0 { SOS } else { padded[i][step - 1] })
                .collect();
            let inputs = if train {
                word_dropout_inputs(&gold, self.word_dropout, rng)
            } else {
                gold
            };
            let x = self.embed.rows(&inputs);
            h = self.gru.step(&x, &h);
            steps.push(CategoricalLikelihood::new(self.out.forward(&h))?);
        }
        Ok(steps)
    }

    /// Per-sample log-likelihood of `tokens` with EOS appended, shape [B].
    pub fn log_likelihood(
        &self,
        z: &Tensor,
        tokens: &[Vec<usize>],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor, Error> {
        let steps = self.step_likelihoods(z, tokens, train, rng)?;
        let b = tokens.len();
        let mut total = Tensor::zeros(&[b]);
        for (step, lik) in steps.iter().enumerate() {
            let targets: Vec<usize> = (0..b)
                .map(|i| {
                    let len = tokens[i].len();
                    if step < len {
                        tokens[i][step]
                    } else {
                        EOS
                    }
                })
                .collect();
            let lp = lik.log_prob_each_position(&targets)?;
            // Positions past each sequence's EOS contribute nothing.
            let mask: Vec<f64> = tokens
                .iter()
                .map(|s| if step <= s.len() { 1.0 } else { 0.0 })
                .collect();
            let m =
                Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[b]), mask).expect("mask shape"));
            total = &total + &(&lp * &m);
        }
        Ok(total)
    }

    /// Greedy decode up to `max_len` tokens, EOS-terminated.
    pub fn greedy_decode(&self, z: &Tensor) -> Vec<Vec<usize>> {
        let b = z.shape()[0];
        let mut h = self.init.forward(z).tanh();
        let mut done = vec![false; b];
        let mut outs: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut prev = vec![SOS; b];
        for _ in 0..self.max_len {
            let x = self.embed.rows(&prev);
            h = self.gru.step(&x, &h);
            let logits = self.out.forward(&h).array();
            for i in 0..b {
                if done[i] {
                    prev[i] = PAD;
                    continue;
                }
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..self.vocab {
                    let v = logits[[i, c]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                if best == EOS {
                    done[i] = true;
                    prev[i] = PAD;
                } else {
                    outs[i].push(best);
                    prev[i] = best;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        outs
    }
}

pub fn build_text_codec(
    spec: &ModalitySpec,
    config: &NetworkConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<(TextEncoder, TextDecoder), Error> {
    spec.validate()?;
    config.validate()?;
    let vocab = spec.vocab_size.expect("validated");
    let (e, h) = (config.embed_dim, config.rnn_hidden);
    let enc = TextEncoder {
        embed: store.var(
            &format!("{prefix}.enc_embed"),
            init::normal(&[vocab, e], 0.0, 0.1, rng),
        ),
        gru: GruCell::new(store, &format!("{prefix}.enc_gru"), e, h, rng),
        head_mean: Linear::new(store, &format!("{prefix}.enc_mean"), h, config.latent_dim, rng),
        head_logvar: Linear::new(store, &format!("{prefix}.enc_logvar"), h, config.latent_dim, rng),
        max_len: config.max_text_len,
    };
    let dec = TextDecoder {
        embed: store.var(
            &format!("{prefix}.dec_embed"),
            init::normal(&[vocab, e], 0.0, 0.1, rng),
        ),
        init: Linear::new(store, &format!("{prefix}.dec_init"), config.latent_dim, h, rng),
        gru: GruCell::new(store, &format!("{prefix}.dec_gru"), e, h, rng),
        out: Linear::new(store, &format!("{prefix}.dec_out"), h, vocab, rng),
        vocab,
        word_dropout: config.word_dropout,
        max_len: config.max_text_len,
    };
    Ok((enc, dec))
}

/// Batch of the second modality, whichever kind it is.
#[derive(Clone, Copy)]
pub enum YData<'a> {
    Label(&'a [usize]),
    Text(&'a [Vec<usize>]),
}

impl YData<'_> {
    pub fn len(&self) -> usize {
        match self {
            YData::Label(l) => l.len(),
            YData::Text(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum YEncoder {
    Label(LabelEncoder),
    Text(TextEncoder),
}

impl YEncoder {
    pub fn forward(&self, y: &YData) -> Result<DiagGaussian, Error> {
        match (self, y) {
            (YEncoder::Label(e), YData::Label(ids)) => e.forward(ids),
            (YEncoder::Text(e), YData::Text(tokens)) => e.forward(tokens),
            _ => Err(Error::contract("y batch kind does not match the built codec")),
        }
    }
}

pub enum YDecoder {
    Label(LabelDecoder),
    Text(TextDecoder),
}

impl YDecoder {
    /// Per-sample log p(y|z), shape [B].
    pub fn log_likelihood(
        &self,
        z: &Tensor,
        y: &YData,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor, Error> {
        match (self, y) {
            (YDecoder::Label(d), YData::Label(ids)) => {
                d.forward(z)?.log_prob_each_position(ids)
            }
            (YDecoder::Text(d), YData::Text(tokens)) => d.log_likelihood(z, tokens, train, rng),
            _ => Err(Error::contract("y batch kind does not match the built codec")),
        }
    }
}

pub fn build_y_codec(
    spec: &ModalitySpec,
    config: &NetworkConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<(YEncoder, YDecoder), Error> {
    match spec.kind {
        ModalityKind::Label => {
            let (e, d) = build_label_codec(spec, config, store, prefix, rng)?;
            Ok((YEncoder::Label(e), YDecoder::Label(d)))
        }
        ModalityKind::Text => {
            let (e, d) = build_text_codec(spec, config, store, prefix, rng)?;
            Ok((YEncoder::Text(e), YDecoder::Text(d)))
        }
        ModalityKind::Image => Err(Error::contract("y modality must be label or text")),
    }
}

/// Feature trunk for a label/text modality: one-hot or bag-of-embeddings
/// followed by a linear projection. Used by the dedicated joint encoder and
/// multimodal critics.
struct YTrunk {
    embed: Tensor,
    proj: Linear,
    kind: ModalityKind,
    vocab: usize,
    out: usize,
}

impl YTrunk {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &ModalitySpec,
        config: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> YTrunk {
        let vocab = spec.vocab_size.expect("label/text spec");
        let e = config.embed_dim;
        YTrunk {
            embed: store.var(
                &format!("{prefix}.embed"),
                init::normal(&[vocab, e], 0.0, 0.1, rng),
            ),
            proj: Linear::new(store, &format!("{prefix}.proj"), e, config.hidden, rng),
            kind: spec.kind,
            vocab,
            out: config.hidden,
        }
    }

    fn forward(&self, y: &YData) -> Result<Tensor, Error> {
        let pooled = match (self.kind, y) {
            (ModalityKind::Label, YData::Label(ids)) => {
                for &c in ids.iter() {
                    if c >= self.vocab {
                        return Err(Error::contract(format!("class index {c} >= {}", self.vocab)));
                    }
                }
                self.embed.rows(ids)
            }
            (ModalityKind::Text, YData::Text(tokens)) => {
                // Order-insensitive bag of embeddings; adequate for a
                // conditioning signal, cheap enough for critics.
                let b = tokens.len();
                let mut rows = Vec::with_capacity(b);
                for seq in tokens.iter() {
                    if seq.is_empty() {
                        rows.push(Tensor::zeros(&[1, self.embed.shape()[1]]));
                    } else {
                        rows.push(self.embed.rows(seq).mean_axes(&[0], true));
                    }
                }
                Tensor::concat(&rows, 0)
            }
            _ => return Err(Error::contract("y batch kind does not match the built trunk")),
        };
        Ok(self.proj.forward(&pooled).leaky_relu(0.2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    Dedicated,
    Poe,
}

/// Joint posterior q(z|x,y): either a dedicated fusion network or a
/// parameter-free product of the unimodal posteriors and the prior.
pub enum JointEncoder {
    Dedicated {
        img: ConvTrunkBox,
        y: YTrunkBox,
        fuse: Linear,
        head_mean: Linear,
        head_logvar: Linear,
    },
    Poe,
}

// Private trunks need nameable wrappers to sit in the public enum.
pub struct ConvTrunkBox(ConvTrunk);
pub struct YTrunkBox(YTrunk);

pub fn build_joint_encoder(
    x_spec: &ModalitySpec,
    y_spec: &ModalitySpec,
    config: &NetworkConfig,
    mode: JointMode,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<JointEncoder, Error> {
    match mode {
        JointMode::Poe => Ok(JointEncoder::Poe),
        JointMode::Dedicated => {
            x_spec.validate()?;
            y_spec.validate()?;
            config.validate()?;
            let img = ConvTrunk::new(store, &format!("{prefix}.img"), x_spec, config, rng);
            let y = YTrunk::new(store, &format!("{prefix}.y"), y_spec, config, rng);
            let fused_in = img.feat_len + y.out;
            Ok(JointEncoder::Dedicated {
                fuse: Linear::new(store, &format!("{prefix}.fuse"), fused_in, config.hidden, rng),
                head_mean: Linear::new(
                    store,
                    &format!("{prefix}.mean"),
                    config.hidden,
                    config.latent_dim,
                    rng,
                ),
                head_logvar: Linear::new(
                    store,
                    &format!("{prefix}.logvar"),
                    config.hidden,
                    config.latent_dim,
                    rng,
                ),
                img: ConvTrunkBox(img),
                y: YTrunkBox(y),
            })
        }
    }
}

impl JointEncoder {
    /// q(z|x,y). Poe mode combines the unimodal posteriors already computed
    /// by the caller with the prior; dedicated mode runs its own trunks.
    pub fn posterior(
        &self,
        x: &Tensor,
        y: &YData,
        q_x: &DiagGaussian,
        q_y: &DiagGaussian,
        prior: &DiagGaussian,
    ) -> Result<DiagGaussian, Error> {
        match self {
            JointEncoder::Poe => poe_combine(&[q_x.clone(), q_y.clone()], Some(prior)),
            JointEncoder::Dedicated { img, y: yt, fuse, head_mean, head_logvar } => {
                let fx = img.0.forward(x);
                let fy = yt.0.forward(y)?;
                let h = fuse.forward(&Tensor::concat(&[fx, fy], 1)).leaky_relu(0.2);
                DiagGaussian::new(head_mean.forward(&h), head_logvar.forward(&h))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticArity {
    /// Scores (x, z) pairs.
    Unimodal,
    /// Scores (x, y, z) triples.
    Multimodal,
}

/// Convolutional critic with batch normalization after each conv layer,
/// modality trunks feeding a fully connected head alongside the latent.
pub struct Critic {
    convs: Vec<Conv>,
    bns: Vec<BatchNorm2d>,
    y_trunk: Option<YTrunk>,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    feat_len: usize,
}

pub fn build_critic(
    x_spec: &ModalitySpec,
    y_spec: Option<&ModalitySpec>,
    config: &NetworkConfig,
    arity: CriticArity,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<Critic, Error> {
    x_spec.validate()?;
    config.validate()?;
    if arity == CriticArity::Multimodal && y_spec.is_none() {
        return Err(Error::contract("multimodal critic needs the y modality spec"));
    }
    let mut convs = Vec::new();
    let mut bns = Vec::new();
    let mut c_in = x_spec.shape[0];
    let mut side = IMAGE_SIDE;
    for s in 0..config.conv_stages {
        let c_out = stage_channels(config.base_channels, s);
        convs.push(Conv::new(store, &format!("{prefix}.conv{s}"), c_in, c_out, 4, 2, 1, rng));
        bns.push(BatchNorm2d::new(store, &format!("{prefix}.bn{s}"), c_out));
        c_in = c_out;
        side /= 2;
    }
    let feat_len = c_in * side * side;
    let y_trunk = match arity {
        CriticArity::Unimodal => None,
        CriticArity::Multimodal => Some(YTrunk::new(
            store,
            &format!("{prefix}.y"),
            y_spec.expect("checked"),
            config,
            rng,
        )),
    };
    let head_in = feat_len + config.latent_dim + y_trunk.as_ref().map_or(0, |t| t.out);
    Ok(Critic {
        convs,
        bns,
        y_trunk,
        fc1: Linear::new(store, &format!("{prefix}.fc1"), head_in, config.hidden, rng),
        fc2: Linear::new(store, &format!("{prefix}.fc2"), config.hidden, config.hidden, rng),
        out: Linear::new(store, &format!("{prefix}.out"), config.hidden, 1, rng),
        feat_len,
    })
}

impl Critic {
    /// Scalar score per sample, shape [B]. `y` must be Some iff the critic
    /// was built multimodal.
    pub fn score(
        &self,
        x: &Tensor,
        y: Option<&YData>,
        z: &Tensor,
        train: bool,
    ) -> Result<Tensor, Error> {
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            h = bn.forward(&conv.forward(&h), train).leaky_relu(0.2);
        }
        let b = h.shape()[0];
        let mut feats = vec![h.reshape(&[b, self.feat_len]), z.clone()];
        match (&self.y_trunk, y) {
            (Some(t), Some(data)) => feats.push(t.forward(data)?),
            (None, None) => {}
            _ => {
                return Err(Error::contract(
                    "critic arity does not match the inputs it was given",
                ))
            }
        }
        let h = Tensor::concat(&feats, 1);
        let h = self.fc1.forward(&h).leaky_relu(0.2);
        let h = self.fc2.forward(&h).leaky_relu(0.2);
        Ok(self.out.forward(&h).reshape(&[b]))
    }
}

/// Residual scale/translate subnet: input projection, one residual block,
/// zero-initialized output layer so a fresh coupling layer is the identity.
struct ResSubnet {
    inp: Linear,
    mid1: Linear,
    mid2: Linear,
    out: Linear,
}

impl ResSubnet {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> ResSubnet {
        ResSubnet {
            inp: Linear::new(store, &format!("{name}.inp"), dim, hidden, rng),
            mid1: Linear::new(store, &format!("{name}.mid1"), hidden, hidden, rng),
            mid2: Linear::new(store, &format!("{name}.mid2"), hidden, hidden, rng),
            out: Linear::new_zero(store, &format!("{name}.out"), hidden, dim),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.inp.forward(x).relu();
        let r = self.mid2.forward(&self.mid1.forward(&h).relu());
        self.out.forward(&(&h + &r))
    }
}

struct Coupling {
    mask: Tensor,
    s_net: ResSubnet,
    t_net: ResSubnet,
}

impl Coupling {
    /// Active half: y = x·e^s + t with (s, t) from the passive half;
    /// the tanh keeps per-layer scales in [e^{-1}, e] so the map stays
    /// well-conditioned through training.
    fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let passive = x * &self.mask;
        let active_mask = self.mask.mul_s(-1.0).add_s(1.0);
        let s = &self.s_net.forward(&passive).tanh() * &active_mask;
        let t = &self.t_net.forward(&passive) * &active_mask;
        let y = &passive + &(&active_mask * &(&(x * &s.exp()) + &t));
        let logdet = s.sum_axes(&[1], false);
        (y, logdet)
    }

    fn inverse(&self, y: &Tensor) -> (Tensor, Tensor) {
        let passive = y * &self.mask;
        let active_mask = self.mask.mul_s(-1.0).add_s(1.0);
        let s = &self.s_net.forward(&passive).tanh() * &active_mask;
        let t = &self.t_net.forward(&passive) * &active_mask;
        let x = &passive + &(&active_mask * &(&(y - &t) * &(-&s).exp()));
        let logdet = -s.sum_axes(&[1], false);
        (x, logdet)
    }
}

/// Stack of affine coupling layers with alternating parity masks over the
/// flattened feature vector.
pub struct NvpFlow {
    couplings: Vec<Coupling>,
    pub dim: usize,
}

pub fn build_nvp_flow(
    dim: usize,
    config: &NetworkConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<NvpFlow, Error> {
    config.validate()?;
    if dim < 2 {
        return Err(Error::contract("flows need at least 2 feature dimensions"));
    }
    let mut couplings = Vec::new();
    for l in 0..config.coupling_layers {
        let mask_vals: Vec<f64> = (0..dim).map(|i| ((i + l) % 2) as f64).collect();
        let mask = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, dim]), mask_vals).expect("mask shape"),
        );
        couplings.push(Coupling {
            mask,
            s_net: ResSubnet::new(store, &format!("{prefix}.c{l}.s"), dim, config.flow_hidden, rng),
            t_net: ResSubnet::new(store, &format!("{prefix}.c{l}.t"), dim, config.flow_hidden, rng),
        });
    }
    Ok(NvpFlow { couplings, dim })
}

impl Flow for NvpFlow {
    fn to_latent(&self, x: &Tensor) -> (Tensor, Tensor) {
        let mut h = x.clone();
        let mut logdet = Tensor::zeros(&[x.shape()[0]]);
        for c in &self.couplings {
            let (next, ld) = c.forward(&h);
            h = next;
            logdet = logdet + ld;
        }
        (h, logdet)
    }

    fn to_data(&self, z: &Tensor) -> (Tensor, Tensor) {
        let mut h = z.clone();
        let mut logdet = Tensor::zeros(&[z.shape()[0]]);
        for c in self.couplings.iter().rev() {
            let (next, ld) = c.inverse(&h);
            h = next;
            logdet = logdet + ld;
        }
        (h, logdet)
    }
}

/// Uniform dequantization of `levels`-quantized data in [0, 1]:
/// (x·(levels−1) + u) / levels with u ~ U[0, 1).
pub fn dequantize(x: &ArrayD<f64>, levels: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    x.mapv(|v| (v * (levels - 1.0) + rng.gen::<f64>()) / levels)
}

/// Standard real-NVP preprocessing: squash into (α, 1−α) then logit.
/// Returns the transformed batch and the per-sample log|det| of the map,
/// the correction that makes flow densities comparable in data space.
pub fn logit_transform(x01: &Tensor, alpha: f64) -> (Tensor, Tensor) {
    let v = x01.mul_s(1.0 - 2.0 * alpha).add_s(alpha);
    let y = v.ln() - v.mul_s(-1.0).add_s(1.0).ln();
    let per_dim = (&(-v.ln()) - &v.mul_s(-1.0).add_s(1.0).ln()).add_s((1.0 - 2.0 * alpha).ln());
    let b = x01.shape()[0];
    let n: usize = x01.shape().iter().product();
    let flat = per_dim.reshape(&[b, n / b]);
    (y.reshape(&[b, n / b]), flat.sum_axes(&[1], false))
}

/// The full inference/generation component set shared by every
/// likelihood-based objective family, so parameter counts are identical
/// across families by construction.
pub struct VaeComponents {
    pub store: ParamStore,
    pub enc_x: ImageEncoder,
    pub dec_x: ImageDecoder,
    pub enc_y: YEncoder,
    pub dec_y: YDecoder,
    pub joint: JointEncoder,
}

pub fn build_vae_components(
    x_spec: &ModalitySpec,
    y_spec: &ModalitySpec,
    config: &NetworkConfig,
    mode: JointMode,
    seed: u64,
) -> Result<VaeComponents, Error> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc_x = build_image_encoder(x_spec, config, &mut store, "enc_x", &mut rng)?;
    let dec_x = build_image_decoder(x_spec, config, &mut store, "dec_x", &mut rng)?;
    let (enc_y, dec_y) = build_y_codec(y_spec, config, &mut store, "y", &mut rng)?;
    let joint = build_joint_encoder(x_spec, y_spec, config, mode, &mut store, "joint", &mut rng)?;
    Ok(VaeComponents { store, enc_x, dec_x, enc_y, dec_y, joint })
}
