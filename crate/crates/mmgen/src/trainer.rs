//! Training: model families, supervision splits, the weak-supervision step,
//! and a resumable epoch loop with checkpointing and JSONL metrics.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tape::optim::{clip_global_norm, Adam, ParamStore};
use tape::{grad, init, Tensor};

use crate::checkpoint::{load_checkpoint, restore_params, save_checkpoint, CheckpointMeta};
use crate::datasets::{
    generate_mnist_math, generate_shapes_world, load_mnist_idx, math_token_inventory, sha256_hex,
    shapes_token_inventory, MathPair, MnistSplit, SceneSpec, Vocab,
};
use crate::dist::{reparam_sample, CategoricalLikelihood, DiagGaussian};
use crate::error::Error;
use crate::networks::{
    build_critic, build_image_decoder, build_image_encoder, build_nvp_flow, build_vae_components,
    build_y_codec, dequantize, logit_transform, Critic, CriticArity, ImageDecoder, ImageEncoder,
    JointMode, Linear, ModalityKind, ModalitySpec, NetworkConfig, NvpFlow, VaeComponents, YData,
    YDecoder, YEncoder,
};
use crate::objectives::{
    bivcca_loss, elbo, flow_log_marginal, interpolate_leaf, jmvae_loss, lipschitz_penalty,
    lm_pieces, mvae_loss, vaegan_loss, vaenvp_loss, vaevae_loss, CriticBundle, CriticScores,
    JointInputs, LossTerm, ModalityInput, ObjectiveBreakdown, VaeganConfig, VaeganLoss,
    VaenvpInputs,
};

/// Number of grey levels assumed when dequantizing images for flows.
pub const PIXEL_LEVELS: f64 = 256.0;
/// Logit-transform squeeze used before flowing image data.
pub const LOGIT_ALPHA: f64 = 0.05;

// ---------------------------------------------------------------------------
// Families

/// Everything the trainer knows how to fit. The first six are multimodal
/// generative models over an (image, label-or-text) pair; the rest are
/// unimodal baselines and the oracle networks used by evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Vae,
    Vaevae,
    VaevaePoe,
    Mvae,
    Jmvae,
    Bivcca,
    Vaegan,
    VaeganLipschitz,
    Vaenvp,
    Gan,
    Nvp,
    Classifier,
    Captioner,
}

pub const ALL_FAMILIES: [Family; 13] = [
    Family::Vae,
    Family::Vaevae,
    Family::VaevaePoe,
    Family::Mvae,
    Family::Jmvae,
    Family::Bivcca,
    Family::Vaegan,
    Family::VaeganLipschitz,
    Family::Vaenvp,
    Family::Gan,
    Family::Nvp,
    Family::Classifier,
    Family::Captioner,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Vae => "vae",
            Family::Vaevae => "vaevae",
            Family::VaevaePoe => "vaevae-poe",
            Family::Mvae => "mvae",
            Family::Jmvae => "jmvae",
            Family::Bivcca => "bivcca",
            Family::Vaegan => "vaegan",
            Family::VaeganLipschitz => "vaegan-lipschitz",
            Family::Vaenvp => "vaenvp",
            Family::Gan => "gan",
            Family::Nvp => "nvp",
            Family::Classifier => "classifier",
            Family::Captioner => "captioner",
        }
    }

    pub fn parse(name: &str) -> Option<Family> {
        ALL_FAMILIES.iter().copied().find(|f| f.name() == name)
    }

    /// Trains a critic alongside the main parameters.
    pub fn is_adversarial(self) -> bool {
        matches!(self, Family::Vaegan | Family::VaeganLipschitz | Family::Gan)
    }

    /// Consumes the unpaired pools of a supervision split, not just the
    /// paired one.
    pub fn uses_unpaired(self) -> bool {
        matches!(self, Family::Vaevae | Family::VaevaePoe | Family::Mvae)
    }

    /// Trains on images alone; y is ignored.
    pub fn unimodal_x(self) -> bool {
        matches!(self, Family::Vae | Family::Gan | Family::Nvp)
    }

    /// Keeps the best-validation snapshot rather than the last epoch.
    pub fn tracks_best(self) -> bool {
        !self.is_adversarial()
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Supervision splits

/// How much alignment the trainer may see. A fraction of examples stays
/// paired; each remaining example contributes its image to the unpaired-x
/// pool and/or its y to the unpaired-y pool.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionPlan {
    pub paired_fraction: f64,
    pub unpaired_fraction_x: f64,
    pub unpaired_fraction_y: f64,
    pub scramble_seed: u64,
}

impl Default for SupervisionPlan {
    fn default() -> Self {
        SupervisionPlan {
            paired_fraction: 1.0,
            unpaired_fraction_x: 1.0,
            unpaired_fraction_y: 1.0,
            scramble_seed: 0,
        }
    }
}

impl SupervisionPlan {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.paired_fraction > 0.0 && self.paired_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "paired_fraction must lie in (0, 1], got {}",
                self.paired_fraction
            )));
        }
        for (name, v) in [
            ("unpaired_fraction_x", self.unpaired_fraction_x),
            ("unpaired_fraction_y", self.unpaired_fraction_y),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Index pools drawn from one dataset. `paired` is sorted; the unpaired
/// pools keep independently scrambled orders so that zipping them yields
/// no residual x-y alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisionSplit {
    pub paired: Vec<usize>,
    pub unpaired_x: Vec<usize>,
    pub unpaired_y: Vec<usize>,
}

impl SupervisionSplit {
    pub fn fully_paired(n: usize) -> SupervisionSplit {
        SupervisionSplit {
            paired: (0..n).collect(),
            unpaired_x: Vec::new(),
            unpaired_y: Vec::new(),
        }
    }
}

pub fn make_supervision_split(n: usize, plan: &SupervisionPlan) -> Result<SupervisionSplit, Error> {
    plan.validate()?;
    if n == 0 {
        return Err(Error::contract("cannot split an empty dataset"));
    }
    let want = plan.paired_fraction * n as f64;
    if want < 1.0 {
        return Err(Error::contract(format!(
            "paired_fraction {} of {n} examples leaves no complete pair",
            plan.paired_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.scramble_seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let p = (want.ceil() as usize).min(n);
    let mut paired = order[..p].to_vec();
    paired.sort_unstable();
    let rest = &order[p..];
    let cx = ((plan.unpaired_fraction_x * rest.len() as f64).ceil() as usize).min(rest.len());
    let cy = ((plan.unpaired_fraction_y * rest.len() as f64).ceil() as usize).min(rest.len());
    let unpaired_x = rest[..cx].to_vec();
    // Fresh permutation for the y pool: positions must carry no pairing.
    let mut rest_y = rest.to_vec();
    rest_y.shuffle(&mut rng);
    let unpaired_y = rest_y[..cy].to_vec();
    Ok(SupervisionSplit { paired, unpaired_x, unpaired_y })
}

// ---------------------------------------------------------------------------
// In-memory paired dataset

/// The non-image modality of a dataset, stored densely.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum YStore {
    Labels(Vec<usize>),
    Text(Vec<Vec<usize>>),
}

/// An owned y mini-batch; borrow it as [`YData`] to feed networks.
#[derive(Clone, Debug)]
pub enum YBatch {
    Labels(Vec<usize>),
    Text(Vec<Vec<usize>>),
}

impl YBatch {
    pub fn as_data(&self) -> YData<'_> {
        match self {
            YBatch::Labels(l) => YData::Label(l),
            YBatch::Text(t) => YData::Text(t),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            YBatch::Labels(l) => l.len(),
            YBatch::Text(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            YBatch::Labels(l) => Some(l),
            YBatch::Text(_) => None,
        }
    }

    pub fn tokens(&self) -> Option<&[Vec<usize>]> {
        match self {
            YBatch::Text(t) => Some(t),
            YBatch::Labels(_) => None,
        }
    }
}

/// Aligned (image, y) examples with byte-packed rasters. Index batches out
/// of it; supervision splits decide which indices a trainer may pair.
pub struct PairedDataset {
    pub x_spec: ModalitySpec,
    pub y_spec: ModalitySpec,
    images: Vec<u8>,
    y: YStore,
    pub vocab: Option<Vocab>,
    pub fingerprint: Option<String>,
}

impl PairedDataset {
    pub fn new(
        x_spec: ModalitySpec,
        y_spec: ModalitySpec,
        images: Vec<u8>,
        y: YStore,
        vocab: Option<Vocab>,
        fingerprint: Option<String>,
    ) -> Result<PairedDataset, Error> {
        x_spec.validate()?;
        y_spec.validate()?;
        if x_spec.kind != ModalityKind::Image {
            return Err(Error::contract("the x modality must be an image"));
        }
        let n = match &y {
            YStore::Labels(l) => l.len(),
            YStore::Text(t) => t.len(),
        };
        let stride = x_spec.feature_len();
        if images.len() != n * stride {
            return Err(Error::contract(format!(
                "raster buffer holds {} bytes, expected {n} x {stride}",
                images.len()
            )));
        }
        let vocab_size = y_spec.vocab_size.expect("label/text spec");
        match (&y, y_spec.kind) {
            (YStore::Labels(l), ModalityKind::Label) => {
                if l.iter().any(|&v| v >= vocab_size) {
                    return Err(Error::contract("label out of range for the y modality"));
                }
            }
            (YStore::Text(t), ModalityKind::Text) => {
                if t.iter().flatten().any(|&v| v >= vocab_size) {
                    return Err(Error::contract("token id out of range for the y modality"));
                }
            }
            _ => return Err(Error::contract("y storage does not match the y modality kind")),
        }
        Ok(PairedDataset { x_spec, y_spec, images, y, vocab, fingerprint })
    }

    pub fn len(&self) -> usize {
        match &self.y {
            YStore::Labels(l) => l.len(),
            YStore::Text(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image batch scaled to [0, 1], shaped per the x spec.
    pub fn x_batch(&self, indices: &[usize]) -> Tensor {
        let stride = self.x_spec.feature_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            let bytes = &self.images[i * stride..(i + 1) * stride];
            data.extend(bytes.iter().map(|&b| b as f64 / 255.0));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.x_spec.shape);
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("batch shape"))
    }

    pub fn y_batch(&self, indices: &[usize]) -> YBatch {
        match &self.y {
            YStore::Labels(l) => YBatch::Labels(indices.iter().map(|&i| l[i]).collect()),
            YStore::Text(t) => YBatch::Text(indices.iter().map(|&i| t[i].clone()).collect()),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.y {
            YStore::Labels(l) => Some(l),
            YStore::Text(_) => None,
        }
    }

    pub fn texts(&self) -> Option<&[Vec<usize>]> {
        match &self.y {
            YStore::Text(t) => Some(t),
            YStore::Labels(_) => None,
        }
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let stride = self.x_spec.feature_len();
        &self.images[i * stride..(i + 1) * stride]
    }

    /// Scenes paired with their encoded captions.
    pub fn from_shapes(scenes: &[SceneSpec], vocab: &Vocab) -> Result<PairedDataset, Error> {
        let x_spec = ModalitySpec::image("scene", 3);
        let y_spec = ModalitySpec::text("caption", vocab.len());
        let stride = x_spec.feature_len();
        let mut images = Vec::with_capacity(scenes.len() * stride);
        let mut text = Vec::with_capacity(scenes.len());
        let mut caption_bytes = Vec::new();
        for scene in scenes {
            if scene.image.len() != stride {
                return Err(Error::contract("scene raster has the wrong stride"));
            }
            images.extend_from_slice(&scene.image);
            caption_bytes.extend_from_slice(scene.caption.join(" ").as_bytes());
            caption_bytes.push(b'\n');
            text.push(vocab.encode(&scene.caption));
        }
        let mut digest_input = images.clone();
        digest_input.extend_from_slice(&caption_bytes);
        let fingerprint = sha256_hex(&digest_input);
        PairedDataset::new(
            x_spec,
            y_spec,
            images,
            YStore::Text(text),
            Some(vocab.clone()),
            Some(fingerprint),
        )
    }

    /// Digits paired with their class labels.
    pub fn from_mnist(split: &MnistSplit) -> Result<PairedDataset, Error> {
        let x_spec = ModalitySpec::image("digit", 1);
        let y_spec = ModalitySpec::label("digit_class", 10);
        let mut digest_input = split.images.clone();
        digest_input.extend_from_slice(&split.labels);
        let fingerprint = sha256_hex(&digest_input);
        PairedDataset::new(
            x_spec,
            y_spec,
            split.images.clone(),
            YStore::Labels(split.labels.iter().map(|&l| l as usize).collect()),
            None,
            Some(fingerprint),
        )
    }

    /// Digits paired with arithmetic captions whose value matches the label.
    pub fn from_mnist_math(
        split: &MnistSplit,
        pairs: &[MathPair],
        vocab: &Vocab,
    ) -> Result<PairedDataset, Error> {
        let x_spec = ModalitySpec::image("digit", 1);
        let y_spec = ModalitySpec::text("expression", vocab.len());
        let stride = x_spec.feature_len();
        let mut images = Vec::with_capacity(pairs.len() * stride);
        let mut text = Vec::with_capacity(pairs.len());
        let mut caption_bytes = Vec::new();
        for pair in pairs {
            if pair.image_index >= split.len() {
                return Err(Error::contract("pair references an image outside the split"));
            }
            images.extend_from_slice(split.image_bytes(pair.image_index));
            caption_bytes.extend_from_slice(pair.caption.tokens.join(" ").as_bytes());
            caption_bytes.push(b'\n');
            text.push(vocab.encode(&pair.caption.tokens));
        }
        let mut digest_input = images.clone();
        digest_input.extend_from_slice(&caption_bytes);
        let fingerprint = sha256_hex(&digest_input);
        PairedDataset::new(
            x_spec,
            y_spec,
            images,
            YStore::Text(text),
            Some(vocab.clone()),
            Some(fingerprint),
        )
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: 10,
            batch_size: 64,
            lr: 2e-4,
            critic_lr: 1e-5,
            grad_clip: Some(10.0),
            seed: 0,
        }
    }
}

fn default_joint_mode() -> JointMode {
    JointMode::Dedicated
}

fn default_jmvae_omega() -> f64 {
    0.1
}

fn default_bivcca_omega() -> f64 {
    0.5
}

/// One experiment, TOML-serializable. Specs for the two modalities come
/// from the dataset, not from here.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub family: Family,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default = "default_joint_mode")]
    pub joint_mode: JointMode,
    #[serde(default)]
    pub supervision: SupervisionPlan,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_jmvae_omega")]
    pub jmvae_omega: f64,
    #[serde(default = "default_bivcca_omega")]
    pub bivcca_omega: f64,
    #[serde(default)]
    pub vaegan: VaeganConfig,
}

impl ExperimentConfig {
    pub fn new(family: Family) -> ExperimentConfig {
        ExperimentConfig {
            family,
            network: NetworkConfig::default(),
            joint_mode: default_joint_mode(),
            supervision: SupervisionPlan::default(),
            optim: OptimConfig::default(),
            jmvae_omega: default_jmvae_omega(),
            bivcca_omega: default_bivcca_omega(),
            vaegan: VaeganConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.network.validate()?;
        self.supervision.validate()?;
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be positive"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(o.lr) || !positive(o.critic_lr) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if let Some(c) = o.grad_clip {
            if !positive(c) {
                return Err(Error::contract("grad_clip must be positive when set"));
            }
        }
        if !positive(self.jmvae_omega) {
            return Err(Error::contract("jmvae_omega must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bivcca_omega) {
            return Err(Error::contract("bivcca_omega must lie in [0, 1]"));
        }
        if !self.vaegan.gp_weight.is_finite() || self.vaegan.gp_weight < 0.0 {
            return Err(Error::contract("gp_weight must be non-negative"));
        }
        for term in &self.vaegan.duals {
            if !matches!(term, LossTerm::Alpha | LossTerm::Beta) {
                return Err(Error::contract(
                    "adversarial estimation is supported for the image-reconstruction \
                     terms (alpha, beta); the discrete-side terms keep closed forms",
                ));
            }
        }
        if self.family == Family::VaeganLipschitz && self.vaegan.duals.is_empty() {
            return Err(Error::contract("the adversarial family needs at least one dual term"));
        }
        Ok(())
    }
}

/// Dataset selector for CLI runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Shapes {
        n_scenes: usize,
        #[serde(default = "default_max_objects")]
        max_objects: usize,
        #[serde(default)]
        seed: u64,
    },
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    MnistMath {
        #[serde(default)]
        dir: Option<PathBuf>,
        pairs: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_max_objects() -> usize {
    3
}

/// Resolution order for the digit corpus: explicit path, then the
/// MNIST_DATA_DIR environment variable, then ./data/mnist.
pub fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("MNIST_DATA_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("data/mnist")
}

pub struct DataBundle {
    pub train: PairedDataset,
    pub validation: PairedDataset,
    pub test: PairedDataset,
}

pub fn load_dataset(config: &DatasetConfig) -> Result<DataBundle, Error> {
    match config {
        DatasetConfig::Shapes { n_scenes, max_objects, seed } => {
            let inventory = shapes_token_inventory();
            let vocab = Vocab::build([inventory.as_slice()]);
            let n_val = (*n_scenes / 5).max(1);
            let train = generate_shapes_world(*n_scenes, *max_objects, *seed)?;
            let validation = generate_shapes_world(n_val, *max_objects, seed.wrapping_add(1))?;
            let test = generate_shapes_world(n_val, *max_objects, seed.wrapping_add(2))?;
            Ok(DataBundle {
                train: PairedDataset::from_shapes(&train, &vocab)?,
                validation: PairedDataset::from_shapes(&validation, &vocab)?,
                test: PairedDataset::from_shapes(&test, &vocab)?,
            })
        }
        DatasetConfig::Mnist { dir } => {
            let data = load_mnist_idx(&mnist_dir(dir.as_deref()))?;
            Ok(DataBundle {
                train: PairedDataset::from_mnist(&data.train)?,
                validation: PairedDataset::from_mnist(&data.validation)?,
                test: PairedDataset::from_mnist(&data.test)?,
            })
        }
        DatasetConfig::MnistMath { dir, pairs, seed } => {
            let data = load_mnist_idx(&mnist_dir(dir.as_deref()))?;
            let inventory = math_token_inventory();
            let vocab = Vocab::build([inventory.as_slice()]);
            let n_val = (*pairs / 5).max(1);
            let train_pairs = generate_mnist_math(&data.train.labels, *pairs, *seed)?;
            let val_pairs =
                generate_mnist_math(&data.validation.labels, n_val, seed.wrapping_add(1))?;
            let test_pairs = generate_mnist_math(&data.test.labels, n_val, seed.wrapping_add(2))?;
            Ok(DataBundle {
                train: PairedDataset::from_mnist_math(&data.train, &train_pairs, &vocab)?,
                validation: PairedDataset::from_mnist_math(&data.validation, &val_pairs, &vocab)?,
                test: PairedDataset::from_mnist_math(&data.test, &test_pairs, &vocab)?,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Models

pub struct VaeganCritics {
    pub store: ParamStore,
    pub critics: BTreeMap<LossTerm, Critic>,
}

pub struct GanCritic {
    pub store: ParamStore,
    pub critic: Critic,
}

pub struct VaenvpParts {
    pub store: ParamStore,
    pub flow_f: NvpFlow,
    pub flow_g: NvpFlow,
    /// y encoder whose head lives in image dimensions: the base of flow g.
    pub base_y: YEncoder,
    pub enc_x: ImageEncoder,
    pub enc_y: YEncoder,
    pub dec_y: YDecoder,
}

pub enum ModelKind {
    VaeLike(VaeComponents),
    VaeGan { comps: VaeComponents, critic: Option<VaeganCritics> },
    VaeNvp(VaenvpParts),
    Gan { store: ParamStore, dec: ImageDecoder, critic: Option<GanCritic> },
    Nvp { store: ParamStore, flow: NvpFlow },
    Classifier { store: ParamStore, enc: ImageEncoder, head: Linear, classes: usize },
    Captioner { store: ParamStore, enc: ImageEncoder, dec: crate::networks::TextDecoder },
}

pub struct Model {
    pub family: Family,
    pub x_spec: ModalitySpec,
    pub y_spec: ModalitySpec,
    pub config: NetworkConfig,
    pub joint_mode: JointMode,
    pub seed: u64,
    pub kind: ModelKind,
}

impl Model {
    pub fn main_store(&self) -> &ParamStore {
        match &self.kind {
            ModelKind::VaeLike(c) => &c.store,
            ModelKind::VaeGan { comps, .. } => &comps.store,
            ModelKind::VaeNvp(p) => &p.store,
            ModelKind::Gan { store, .. } => store,
            ModelKind::Nvp { store, .. } => store,
            ModelKind::Classifier { store, .. } => store,
            ModelKind::Captioner { store, .. } => store,
        }
    }

    pub fn critic_store(&self) -> Option<&ParamStore> {
        match &self.kind {
            ModelKind::VaeGan { critic: Some(c), .. } => Some(&c.store),
            ModelKind::Gan { critic: Some(c), .. } => Some(&c.store),
            _ => None,
        }
    }

    pub fn components(&self) -> Option<&VaeComponents> {
        match &self.kind {
            ModelKind::VaeLike(c) => Some(c),
            ModelKind::VaeGan { comps, .. } => Some(comps),
            _ => None,
        }
    }
}

/// The joint mode a family actually uses; product-of-experts families
/// ignore a dedicated-mode request rather than carrying dead parameters.
fn effective_joint_mode(family: Family, requested: JointMode) -> JointMode {
    match family {
        Family::VaevaePoe | Family::Mvae => JointMode::Poe,
        _ => requested,
    }
}

pub fn build_model(
    config: &ExperimentConfig,
    x_spec: &ModalitySpec,
    y_spec: &ModalitySpec,
) -> Result<Model, Error> {
    build_model_inner(config, x_spec, y_spec, true)
}

fn build_model_inner(
    config: &ExperimentConfig,
    x_spec: &ModalitySpec,
    y_spec: &ModalitySpec,
    with_critics: bool,
) -> Result<Model, Error> {
    config.validate()?;
    let family = config.family;
    let net = &config.network;
    let seed = config.optim.seed;
    let mode = effective_joint_mode(family, config.joint_mode);
    let kind = match family {
        Family::Vae
        | Family::Vaevae
        | Family::VaevaePoe
        | Family::Mvae
        | Family::Jmvae
        | Family::Bivcca => ModelKind::VaeLike(build_vae_components(x_spec, y_spec, net, mode, seed)?),
        Family::Vaegan | Family::VaeganLipschitz => {
            let comps = build_vae_components(x_spec, y_spec, net, mode, seed)?;
            let critic = if with_critics {
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                let mut critics = BTreeMap::new();
                for term in &config.vaegan.duals {
                    let (arity, prefix) = match term {
                        LossTerm::Alpha => (CriticArity::Unimodal, "critic_alpha"),
                        LossTerm::Beta => (CriticArity::Multimodal, "critic_beta"),
                        _ => unreachable!("validated"),
                    };
                    let y = (arity == CriticArity::Multimodal).then_some(y_spec);
                    critics.insert(
                        *term,
                        build_critic(x_spec, y, net, arity, &mut store, prefix, &mut rng)?,
                    );
                }
                Some(VaeganCritics { store, critics })
            } else {
                None
            };
            ModelKind::VaeGan { comps, critic }
        }
        Family::Vaenvp => {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = x_spec.feature_len();
            let flow_f = build_nvp_flow(dim, net, &mut store, "flow_f", &mut rng)?;
            let flow_g = build_nvp_flow(dim, net, &mut store, "flow_g", &mut rng)?;
            let mut wide = net.clone();
            wide.latent_dim = dim;
            let (base_y, _) = build_y_codec(y_spec, &wide, &mut store, "flow_base_y", &mut rng)?;
            let enc_x = build_image_encoder(x_spec, net, &mut store, "enc_x", &mut rng)?;
            let (enc_y, dec_y) = build_y_codec(y_spec, net, &mut store, "y", &mut rng)?;
            ModelKind::VaeNvp(VaenvpParts { store, flow_f, flow_g, base_y, enc_x, enc_y, dec_y })
        }
        Family::Gan => {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dec = build_image_decoder(x_spec, net, &mut store, "gen", &mut rng)?;
            let critic = if with_critics {
                let mut cstore = ParamStore::new();
                let mut crng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                let critic = build_critic(
                    x_spec,
                    None,
                    net,
                    CriticArity::Unimodal,
                    &mut cstore,
                    "critic",
                    &mut crng,
                )?;
                Some(GanCritic { store: cstore, critic })
            } else {
                None
            };
            ModelKind::Gan { store, dec, critic }
        }
        Family::Nvp => {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flow = build_nvp_flow(x_spec.feature_len(), net, &mut store, "flow", &mut rng)?;
            ModelKind::Nvp { store, flow }
        }
        Family::Classifier => {
            if y_spec.kind != ModalityKind::Label {
                return Err(Error::contract("classifier training needs a label modality"));
            }
            let classes = y_spec.vocab_size.expect("label spec");
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = build_image_encoder(x_spec, net, &mut store, "enc", &mut rng)?;
            let head = Linear::new(&mut store, "head", net.latent_dim, classes, &mut rng);
            ModelKind::Classifier { store, enc, head, classes }
        }
        Family::Captioner => {
            if y_spec.kind != ModalityKind::Text {
                return Err(Error::contract("captioner training needs a text modality"));
            }
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = build_image_encoder(x_spec, net, &mut store, "enc", &mut rng)?;
            let (_, dec) = match build_y_codec(y_spec, net, &mut store, "cap", &mut rng)? {
                (YEncoder::Text(e), YDecoder::Text(d)) => (e, d),
                _ => unreachable!("text spec"),
            };
            ModelKind::Captioner { store, enc, dec }
        }
    };
    Ok(Model {
        family,
        x_spec: x_spec.clone(),
        y_spec: y_spec.clone(),
        config: net.clone(),
        joint_mode: mode,
        seed,
        kind,
    })
}

/// Rebuild a model from a checkpoint for evaluation. Critics are not
/// restored; adversarially trained generators evaluate exactly like their
/// likelihood-trained counterparts.
pub fn load_model(dir: &Path) -> Result<Model, Error> {
    let (manifest, values) = load_checkpoint(dir)?;
    let family = Family::parse(&manifest.family)
        .ok_or_else(|| Error::contract(format!("unknown family {:?}", manifest.family)))?;
    let mut config = ExperimentConfig::new(family);
    config.network = manifest.config.clone();
    config.joint_mode = manifest.joint_mode;
    config.optim.seed = manifest.seed;
    if family.is_adversarial() {
        // Duals are a training-time concern; skip their validation gate.
        config.vaegan.duals.clear();
    }
    let mut cfg_for_build = config.clone();
    if family == Family::VaeganLipschitz {
        cfg_for_build.vaegan.duals = vec![LossTerm::Alpha];
    }
    let model = build_model_inner(&cfg_for_build, &manifest.x_spec, &manifest.y_spec, false)?;
    restore_params(model.main_store(), &values)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Forward assembly

fn gaussian_noise(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::constant(init::normal(shape, 0.0, 1.0, rng))
}

fn y_len(y: &YData) -> usize {
    match y {
        YData::Label(l) => l.len(),
        YData::Text(t) => t.len(),
    }
}

/// Build the posterior triple, noises and likelihood closures for one
/// paired batch, then hand them to `f`. All randomness is drawn from `rng`
/// in a fixed order so training streams replay exactly.
fn with_joint_inputs<R>(
    comps: &VaeComponents,
    latent: usize,
    x: &Tensor,
    y: &YData,
    train: bool,
    rng: &mut ChaCha8Rng,
    f: impl FnOnce(&JointInputs) -> Result<R, Error>,
) -> Result<R, Error> {
    let b = x.shape()[0];
    if b == 0 || y_len(y) != b {
        return Err(Error::contract(format!(
            "paired batch sides disagree: {} images vs {} y items",
            b,
            y_len(y)
        )));
    }
    let prior = DiagGaussian::standard(&[b, latent]);
    let q_x = comps.enc_x.forward(x)?;
    let q_y = comps.enc_y.forward(y)?;
    let q_xy = comps.joint.posterior(x, y, &q_x, &q_y, &prior)?;
    let noise_x = gaussian_noise(rng, &[b, latent]);
    let noise_y = gaussian_noise(rng, &[b, latent]);
    let noise_xy = gaussian_noise(rng, &[b, latent]);
    // The y likelihood may be invoked more than once per objective (β and η
    // share it), so it gets its own child stream behind a RefCell.
    let y_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
    let log_px = |z: &Tensor| -> Result<Tensor, Error> { comps.dec_x.forward(z)?.log_prob_each(x) };
    let log_py = |z: &Tensor| -> Result<Tensor, Error> {
        comps.dec_y.log_likelihood(z, y, train, &mut *y_rng.borrow_mut())
    };
    let inputs = JointInputs {
        q_x: &q_x,
        q_y: &q_y,
        q_xy: &q_xy,
        prior: &prior,
        noise_x: &noise_x,
        noise_y: &noise_y,
        noise_xy: &noise_xy,
        log_px: &log_px,
        log_py: &log_py,
    };
    f(&inputs)
}

/// Negative image ELBO on an unpaired batch.
fn elbo_x_loss(
    comps: &VaeComponents,
    latent: usize,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, Error> {
    let b = x.shape()[0];
    let prior = DiagGaussian::standard(&[b, latent]);
    let q = comps.enc_x.forward(x)?;
    let noise = gaussian_noise(rng, &[b, latent]);
    let log_px = |z: &Tensor| -> Result<Tensor, Error> { comps.dec_x.forward(z)?.log_prob_each(x) };
    Ok(elbo(&q, &prior, &noise, &log_px)?.value.neg())
}

/// Negative y ELBO on an unpaired batch.
fn elbo_y_loss(
    comps: &VaeComponents,
    latent: usize,
    y: &YData,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, Error> {
    let b = y_len(y);
    let prior = DiagGaussian::standard(&[b, latent]);
    let q = comps.enc_y.forward(y)?;
    let noise = gaussian_noise(rng, &[b, latent]);
    let y_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
    let log_py = |z: &Tensor| -> Result<Tensor, Error> {
        comps.dec_y.log_likelihood(z, y, train, &mut *y_rng.borrow_mut())
    };
    Ok(elbo(&q, &prior, &noise, &log_py)?.value.neg())
}

/// Sub-sampled product-of-experts objective with only the image observed.
fn mvae_x_only(
    comps: &VaeComponents,
    latent: usize,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectiveBreakdown, Error> {
    let b = x.shape()[0];
    let prior = DiagGaussian::standard(&[b, latent]);
    let q = comps.enc_x.forward(x)?;
    let noise = gaussian_noise(rng, &[b, latent]);
    let noise_joint = gaussian_noise(rng, &[b, latent]);
    let log_px = |z: &Tensor| -> Result<Tensor, Error> { comps.dec_x.forward(z)?.log_prob_each(x) };
    let input = ModalityInput { q: &q, noise: &noise, log_lik: &log_px };
    mvae_loss(Some(&input), None, &noise_joint, &prior)
}

/// Sub-sampled product-of-experts objective with only y observed.
fn mvae_y_only(
    comps: &VaeComponents,
    latent: usize,
    y: &YData,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectiveBreakdown, Error> {
    let b = y_len(y);
    let prior = DiagGaussian::standard(&[b, latent]);
    let q = comps.enc_y.forward(y)?;
    let noise = gaussian_noise(rng, &[b, latent]);
    let noise_joint = gaussian_noise(rng, &[b, latent]);
    let y_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
    let log_py = |z: &Tensor| -> Result<Tensor, Error> {
        comps.dec_y.log_likelihood(z, y, train, &mut *y_rng.borrow_mut())
    };
    let input = ModalityInput { q: &q, noise: &noise, log_lik: &log_py };
    mvae_loss(None, Some(&input), &noise_joint, &prior)
}

/// The paired-batch objective of a joint family. Adversarial families get
/// their closed-form equivalent (used for validation, not training).
pub fn paired_objective(
    family: Family,
    comps: &VaeComponents,
    config: &ExperimentConfig,
    x: &Tensor,
    y: &YData,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectiveBreakdown, Error> {
    let latent = config.network.latent_dim;
    match family {
        Family::Vaevae | Family::VaevaePoe | Family::Vaegan | Family::VaeganLipschitz => {
            with_joint_inputs(comps, latent, x, y, train, rng, vaevae_loss)
        }
        Family::Jmvae => {
            let omega = config.jmvae_omega;
            with_joint_inputs(comps, latent, x, y, train, rng, |i| jmvae_loss(i, omega))
        }
        Family::Bivcca => {
            let omega = config.bivcca_omega;
            with_joint_inputs(comps, latent, x, y, train, rng, |i| bivcca_loss(i, omega))
        }
        Family::Mvae => with_joint_inputs(comps, latent, x, y, train, rng, |i| {
            let mx = ModalityInput { q: i.q_x, noise: i.noise_x, log_lik: i.log_px };
            let my = ModalityInput { q: i.q_y, noise: i.noise_y, log_lik: i.log_py };
            mvae_loss(Some(&mx), Some(&my), i.noise_xy, i.prior)
        }),
        _ => Err(Error::contract(format!("family {family} has no paired joint objective"))),
    }
}

// ---------------------------------------------------------------------------
// Weak supervision

/// One step's worth of batches. A step needs a paired batch, or both
/// unpaired batches, or all three.
pub struct WeakBatches<'a> {
    pub paired: Option<(&'a Tensor, &'a YData<'a>)>,
    pub unpaired_x: Option<&'a Tensor>,
    pub unpaired_y: Option<&'a YData<'a>>,
}

/// Scalar bookkeeping for one weak-supervision step. `loss` is the graph
/// node to differentiate; the parts are its batch-averaged summands.
pub struct WeakStepParts {
    pub loss: Tensor,
    pub paired_part: f64,
    pub x_part: f64,
    pub y_part: f64,
    pub total: f64,
    pub d_terms: Option<[f64; 4]>,
}

/// One objective evaluation over mixed supervision: the paired pair of
/// terms on the paired batch plus the two unimodal terms, each taken from
/// its unpaired pool when one exists and from the paired batch otherwise.
/// With both pools absent this reduces to the full four-term objective on
/// the paired batch, draw for draw.
pub fn weak_supervision_step(
    comps: &VaeComponents,
    latent: usize,
    batches: &WeakBatches,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<WeakStepParts, Error> {
    let have_pair = batches.paired.is_some();
    if !have_pair && (batches.unpaired_x.is_none() || batches.unpaired_y.is_none()) {
        return Err(Error::contract(
            "a weak-supervision step needs a paired batch or both unpaired batches",
        ));
    }
    if let Some((x, y)) = batches.paired {
        let pieces = with_joint_inputs(comps, latent, x, y, train, rng, lm_pieces)?;
        let paired_loss = pieces.paired();
        let x_loss = match batches.unpaired_x {
            Some(ux) => elbo_x_loss(comps, latent, ux, rng)?,
            None => pieces.alpha(),
        };
        let y_loss = match batches.unpaired_y {
            Some(uy) => elbo_y_loss(comps, latent, uy, train, rng)?,
            None => pieces.gamma(),
        };
        let loss = &(&paired_loss + &x_loss) + &y_loss;
        Ok(WeakStepParts {
            paired_part: paired_loss.scalar(),
            x_part: x_loss.scalar(),
            y_part: y_loss.scalar(),
            total: loss.scalar(),
            d_terms: Some([
                pieces.alpha().scalar(),
                pieces.beta().scalar(),
                pieces.gamma().scalar(),
                pieces.eta().scalar(),
            ]),
            loss,
        })
    } else {
        let ux = batches.unpaired_x.expect("checked");
        let uy = batches.unpaired_y.expect("checked");
        let x_loss = elbo_x_loss(comps, latent, ux, rng)?;
        let y_loss = elbo_y_loss(comps, latent, uy, train, rng)?;
        let loss = &x_loss + &y_loss;
        Ok(WeakStepParts {
            paired_part: 0.0,
            x_part: x_loss.scalar(),
            y_part: y_loss.scalar(),
            total: loss.scalar(),
            d_terms: None,
            loss,
        })
    }
}

// ---------------------------------------------------------------------------
// Adversarial steps

/// Critic scores (and optionally a Lipschitz penalty) for one dual slot.
/// The marginal side pairs a prior-or-posterior latent with a generated
/// image; the model side scores data with its inferred latent.
#[allow(clippy::too_many_arguments)]
fn critic_slot_forward(
    comps: &VaeComponents,
    critic: &Critic,
    term: LossTerm,
    x: &Tensor,
    y: &YData,
    latent: usize,
    with_penalty: bool,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<CriticBundle, Error> {
    let b = x.shape()[0];
    let prior = DiagGaussian::standard(&[b, latent]);
    let (y_side, s_q, z_q, s_p, z_p, x_p) = match term {
        LossTerm::Alpha => {
            let q_x = comps.enc_x.forward(x)?;
            let z_q = reparam_sample(&q_x, &gaussian_noise(rng, &[b, latent]))?;
            let s_q = critic.score(x, None, &z_q, train)?;
            let z_p = gaussian_noise(rng, &[b, latent]);
            let x_p = comps.dec_x.generate(&z_p);
            let s_p = critic.score(&x_p, None, &z_p, train)?;
            (None, s_q, z_q, s_p, z_p, x_p)
        }
        LossTerm::Beta => {
            let q_x = comps.enc_x.forward(x)?;
            let q_y = comps.enc_y.forward(y)?;
            let q_xy = comps.joint.posterior(x, y, &q_x, &q_y, &prior)?;
            let z_q = reparam_sample(&q_xy, &gaussian_noise(rng, &[b, latent]))?;
            let s_q = critic.score(x, Some(y), &z_q, train)?;
            let z_p = reparam_sample(&q_y, &gaussian_noise(rng, &[b, latent]))?;
            let x_p = comps.dec_x.generate(&z_p);
            let s_p = critic.score(&x_p, Some(y), &z_p, train)?;
            (Some(y), s_q, z_q, s_p, z_p, x_p)
        }
        _ => {
            return Err(Error::contract(
                "only the image-reconstruction terms have critic estimators",
            ));
        }
    };
    let penalty = if with_penalty {
        let u: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
        let xi = interpolate_leaf(&x.array(), &x_p.array(), &u)?;
        // Blend the latent inputs with the same weights, held constant: the
        // Lipschitz constraint is enforced along the image argument.
        let zq = z_q.array();
        let zp = z_p.array();
        let mut zi = zq.clone();
        for (i, mut row) in zi.axis_iter_mut(Axis(0)).enumerate() {
            let w = u[i];
            let other = zp.index_axis(Axis(0), i);
            row.zip_mut_with(&other, |a, &p| *a = w * *a + (1.0 - w) * p);
        }
        let zi = Tensor::constant(zi);
        let score = |t: &Tensor| critic.score(t, y_side, &zi, train).expect("arity fixed above");
        Some(lipschitz_penalty(&score, &xi))
    } else {
        None
    };
    Ok(CriticBundle { scores: CriticScores::new(s_q, s_p)?, penalty })
}

#[allow(clippy::too_many_arguments)]
fn vaegan_forward(
    comps: &VaeComponents,
    critics: &VaeganCritics,
    family: Family,
    config: &ExperimentConfig,
    x: &Tensor,
    y: &YData,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<VaeganLoss, Error> {
    let latent = config.network.latent_dim;
    let with_penalty = family == Family::VaeganLipschitz;
    let gan_cfg = VaeganConfig {
        duals: config.vaegan.duals.clone(),
        gp_weight: if with_penalty { config.vaegan.gp_weight } else { 0.0 },
        variant: config.vaegan.variant,
    };
    let mut slot_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    with_joint_inputs(comps, latent, x, y, train, rng, |i| {
        let mut bundles = BTreeMap::new();
        for term in &gan_cfg.duals {
            let critic = critics
                .critics
                .get(term)
                .ok_or_else(|| Error::contract("missing critic for configured dual term"))?;
            bundles.insert(
                *term,
                critic_slot_forward(
                    comps,
                    critic,
                    *term,
                    x,
                    y,
                    latent,
                    with_penalty,
                    train,
                    &mut slot_rng,
                )?,
            );
        }
        vaegan_loss(i, &bundles, &gan_cfg)
    })
}

/// One critic update. Only the critic store's parameters move.
#[allow(clippy::too_many_arguments)]
pub fn vaegan_critic_step(
    comps: &VaeComponents,
    critics: &VaeganCritics,
    family: Family,
    config: &ExperimentConfig,
    x: &Tensor,
    y: &YData,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64, Error> {
    let out = vaegan_forward(comps, critics, family, config, x, y, true, rng)?;
    let critic_loss = out
        .critic_loss
        .ok_or_else(|| Error::contract("critic step called with no dual terms configured"))?;
    let value = critic_loss.scalar();
    finite_or_error(value, "in the critic objective, before any update")?;
    apply_step(&critic_loss, &critics.store, opt, config.optim.grad_clip);
    Ok(value)
}

/// One generator update against the current critics. Only the main store's
/// parameters move.
#[allow(clippy::too_many_arguments)]
pub fn vaegan_generator_step(
    comps: &VaeComponents,
    critics: &VaeganCritics,
    family: Family,
    config: &ExperimentConfig,
    x: &Tensor,
    y: &YData,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<(ObjectiveBreakdown, f64), Error> {
    let out = vaegan_forward(comps, critics, family, config, x, y, true, rng)?;
    finite_or_error(out.generator.total, "in the generator objective, before any update")?;
    let norm = apply_step(&out.generator.loss, &comps.store, opt, config.optim.grad_clip);
    Ok((out.generator, norm))
}

#[allow(clippy::too_many_arguments)]
fn gan_critic_step(
    dec: &ImageDecoder,
    critic: &GanCritic,
    latent: usize,
    gp_weight: f64,
    x_real: &Tensor,
    opt: &mut Adam,
    clip: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64, Error> {
    let b = x_real.shape()[0];
    let z = gaussian_noise(rng, &[b, latent]);
    let x_fake = dec.generate(&z);
    let z_off = Tensor::zeros(&[b, latent]);
    let s_real = critic.critic.score(x_real, None, &z_off, true)?;
    let s_fake = critic.critic.score(&x_fake, None, &z_off, true)?;
    let u: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
    let xi = interpolate_leaf(&x_real.array(), &x_fake.array(), &u)?;
    let score = |t: &Tensor| critic.critic.score(t, None, &z_off, true).expect("unimodal");
    let penalty = lipschitz_penalty(&score, &xi);
    let loss = &(&s_fake.mean_all() - &s_real.mean_all()) + &penalty.mul_s(gp_weight);
    let value = loss.scalar();
    finite_or_error(value, "in the critic objective, before any update")?;
    apply_step(&loss, &critic.store, opt, clip);
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
fn gan_generator_step(
    dec: &ImageDecoder,
    store: &ParamStore,
    critic: &GanCritic,
    latent: usize,
    batch: usize,
    opt: &mut Adam,
    clip: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), Error> {
    let z = gaussian_noise(rng, &[batch, latent]);
    let x_fake = dec.generate(&z);
    let z_off = Tensor::zeros(&[batch, latent]);
    let loss = critic.critic.score(&x_fake, None, &z_off, true)?.mean_all().neg();
    let value = loss.scalar();
    finite_or_error(value, "in the generator objective, before any update")?;
    let norm = apply_step(&loss, store, opt, clip);
    Ok((value, norm))
}

// ---------------------------------------------------------------------------
// Hybrid flow forward

/// Flatten an image batch to flow coordinates: dequantize against the
/// pixel grid and squeeze through a logit. The constant Jacobian of the
/// logit map carries no gradient, so training omits it; evaluation adds it
/// back for proper likelihoods.
pub fn flow_coordinates(x01: &Tensor, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let deq = Tensor::constant(dequantize(&x01.array(), PIXEL_LEVELS, rng));
    logit_transform(&deq, LOGIT_ALPHA)
}

fn vaenvp_forward(
    parts: &VaenvpParts,
    config: &NetworkConfig,
    x: &Tensor,
    y: &YData,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectiveBreakdown, Error> {
    let b = x.shape()[0];
    if y_len(y) != b || b == 0 {
        return Err(Error::contract("paired batch sides disagree"));
    }
    let latent = config.latent_dim;
    let dim = x.len() / b;
    let (u, _logit_logdet) = flow_coordinates(x, rng);
    let prior = DiagGaussian::standard(&[b, latent]);
    let flow_base = DiagGaussian::standard(&[b, dim]);
    let q_fy = parts.base_y.forward(y)?;
    let q_x = parts.enc_x.forward(x)?;
    let q_y = parts.enc_y.forward(y)?;
    let noise_x = gaussian_noise(rng, &[b, latent]);
    let noise_y = gaussian_noise(rng, &[b, latent]);
    let y_rng = RefCell::new(ChaCha8Rng::seed_from_u64(rng.gen()));
    let log_py = |z: &Tensor| -> Result<Tensor, Error> {
        parts.dec_y.log_likelihood(z, y, train, &mut *y_rng.borrow_mut())
    };
    let inputs = VaenvpInputs {
        x: &u,
        flow_marginal: &parts.flow_f,
        flow_conditional: &parts.flow_g,
        flow_base: &flow_base,
        q_flow_given_y: &q_fy,
        q_x: &q_x,
        q_y: &q_y,
        prior: &prior,
        noise_x: &noise_x,
        noise_y: &noise_y,
        log_py: &log_py,
    };
    vaenvp_loss(&inputs)
}

// ---------------------------------------------------------------------------
// Oracle losses

fn classifier_loss(
    enc: &ImageEncoder,
    head: &Linear,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor, Error> {
    let q = enc.forward(x)?;
    let lik = CategoricalLikelihood::new(head.forward(&q.mean))?;
    Ok(lik.log_prob_each_position(labels)?.mean_all().neg())
}

fn captioner_loss(
    enc: &ImageEncoder,
    dec: &crate::networks::TextDecoder,
    x: &Tensor,
    tokens: &[Vec<usize>],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, Error> {
    let q = enc.forward(x)?;
    Ok(dec.log_likelihood(&q.mean, tokens, train, rng)?.mean_all().neg())
}

// ---------------------------------------------------------------------------
// Optimizer plumbing and train state

/// Backward pass, optional global-norm clipping, one Adam update over the
/// given store. Returns the pre-clip gradient norm.
fn apply_step(loss: &Tensor, store: &ParamStore, opt: &mut Adam, clip: Option<f64>) -> f64 {
    let params = store.tensors();
    let refs: Vec<&Tensor> = params.iter().collect();
    let grads = grad(loss, &refs);
    let mut arrays: Vec<ArrayD<f64>> = grads.iter().map(|g| g.array()).collect();
    let norm = clip_global_norm(&mut arrays, clip.unwrap_or(f64::INFINITY));
    opt.step(&params, &arrays);
    norm
}

/// Abort guard for training loops: a NaN or infinite loss stops the run
/// with context instead of silently corrupting parameters.
pub fn finite_or_error(value: f64, context: &str) -> Result<(), Error> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("non-finite loss ({value}) {context}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArraySer {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArraySer {
    fn pack(a: &ArrayD<f64>) -> ArraySer {
        ArraySer {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    fn unpack(&self) -> Result<ArrayD<f64>, Error> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::contract(format!("stored optimizer state is malformed: {e}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamSer {
    pub lr: f64,
    pub t: u64,
    pub m: Vec<ArraySer>,
    pub v: Vec<ArraySer>,
}

fn pack_adam(opt: &Adam) -> AdamSer {
    let (t, m, v) = opt.state();
    AdamSer {
        lr: opt.lr,
        t,
        m: m.iter().map(ArraySer::pack).collect(),
        v: v.iter().map(ArraySer::pack).collect(),
    }
}

fn unpack_adam(ser: &AdamSer) -> Result<Adam, Error> {
    let mut opt = Adam::new(ser.lr);
    let m = ser.m.iter().map(|a| a.unpack()).collect::<Result<Vec<_>, _>>()?;
    let v = ser.v.iter().map(|a| a.unpack()).collect::<Result<Vec<_>, _>>()?;
    opt.load_state(ser.t, m, v);
    Ok(opt)
}

/// Everything needed to continue a run exactly where it stopped, except
/// the parameters themselves (those live in the `last` checkpoint).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub rng: ChaCha8Rng,
    pub adam: AdamSer,
    pub critic_adam: Option<AdamSer>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub d_alpha: f64,
    pub d_beta: f64,
    pub d_gamma: f64,
    pub d_eta: f64,
    pub critic_loss: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub family: Family,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

// ---------------------------------------------------------------------------
// Epoch loops

fn shuffled(pool: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order = pool.to_vec();
    order.shuffle(rng);
    order
}

/// Batch `step` of a pool that cycles with wraparound; the batch size is
/// capped at the pool size so no index repeats within one batch.
fn cycled_batch(order: &[usize], step: usize, batch: usize) -> Vec<usize> {
    let len = order.len();
    let take = batch.min(len);
    (0..take).map(|j| order[(step * batch + j) % len]).collect()
}

#[derive(Default)]
struct EpochAccum {
    steps: usize,
    loss_sum: f64,
    d_sums: [f64; 4],
    d_steps: usize,
    critic_sum: f64,
    critic_steps: usize,
    grad_sum: f64,
}

impl EpochAccum {
    fn add_loss(&mut self, loss: f64, grad_norm: f64) {
        self.steps += 1;
        self.loss_sum += loss;
        self.grad_sum += grad_norm;
    }

    fn add_d(&mut self, d: [f64; 4]) {
        for (s, v) in self.d_sums.iter_mut().zip(d) {
            *s += v;
        }
        self.d_steps += 1;
    }

    fn add_critic(&mut self, loss: f64) {
        self.critic_sum += loss;
        self.critic_steps += 1;
    }

    fn metrics(&self, epoch: usize, val_loss: Option<f64>) -> EpochMetrics {
        let steps = self.steps.max(1) as f64;
        let d_steps = self.d_steps.max(1) as f64;
        EpochMetrics {
            epoch,
            steps: self.steps,
            train_loss: self.loss_sum / steps,
            val_loss,
            d_alpha: self.d_sums[0] / d_steps,
            d_beta: self.d_sums[1] / d_steps,
            d_gamma: self.d_sums[2] / d_steps,
            d_eta: self.d_sums[3] / d_steps,
            critic_loss: (self.critic_steps > 0)
                .then(|| self.critic_sum / self.critic_steps as f64),
            grad_norm: self.grad_sum / steps,
        }
    }
}

fn breakdown_d(b: &ObjectiveBreakdown) -> [f64; 4] {
    [b.d_alpha, b.d_beta, b.d_gamma, b.d_eta]
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    model: &Model,
    config: &ExperimentConfig,
    data: &PairedDataset,
    split: &SupervisionSplit,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
    critic_opt: &mut Option<Adam>,
    epoch: usize,
) -> Result<EpochAccum, Error> {
    let bs = config.optim.batch_size;
    let clip = config.optim.grad_clip;
    let latent = config.network.latent_dim;
    let mut acc = EpochAccum::default();
    let ctx = |step: usize| {
        format!(
            "at epoch {epoch} step {step} (family {}, seed {})",
            config.family,
            config.optim.seed
        )
    };
    match (&model.kind, config.family) {
        (ModelKind::VaeLike(comps), Family::Vaevae | Family::VaevaePoe) => {
            let p_order = shuffled(&split.paired, rng);
            let x_order = shuffled(&split.unpaired_x, rng);
            let y_order = shuffled(&split.unpaired_y, rng);
            let longest = p_order.len().max(x_order.len()).max(y_order.len());
            for step in 0..longest.div_ceil(bs) {
                let pb = cycled_batch(&p_order, step, bs);
                let x_t = data.x_batch(&pb);
                let y_b = data.y_batch(&pb);
                let y_d = y_b.as_data();
                let ux_t = (!x_order.is_empty())
                    .then(|| data.x_batch(&cycled_batch(&x_order, step, bs)));
                let uy_b = (!y_order.is_empty())
                    .then(|| data.y_batch(&cycled_batch(&y_order, step, bs)));
                let uy_d = uy_b.as_ref().map(|b| b.as_data());
                let batches = WeakBatches {
                    paired: Some((&x_t, &y_d)),
                    unpaired_x: ux_t.as_ref(),
                    unpaired_y: uy_d.as_ref(),
                };
                let parts = weak_supervision_step(comps, latent, &batches, true, rng)?;
                finite_or_error(parts.total, &ctx(step))?;
                let norm = apply_step(&parts.loss, &comps.store, opt, clip);
                acc.add_loss(parts.total, norm);
                if let Some(d) = parts.d_terms {
                    acc.add_d(d);
                }
            }
        }
        (ModelKind::VaeLike(comps), Family::Mvae) => {
            let p_order = shuffled(&split.paired, rng);
            let x_order = shuffled(&split.unpaired_x, rng);
            let y_order = shuffled(&split.unpaired_y, rng);
            let longest = p_order.len().max(x_order.len()).max(y_order.len());
            for step in 0..longest.div_ceil(bs) {
                let pb = cycled_batch(&p_order, step, bs);
                let x_t = data.x_batch(&pb);
                let y_b = data.y_batch(&pb);
                let y_d = y_b.as_data();
                let joint =
                    paired_objective(Family::Mvae, comps, config, &x_t, &y_d, true, rng)?;
                let mut loss = joint.loss.clone();
                let mut total = joint.total;
                if !x_order.is_empty() {
                    let ux = data.x_batch(&cycled_batch(&x_order, step, bs));
                    let part = mvae_x_only(comps, latent, &ux, rng)?;
                    total += part.total;
                    loss = &loss + &part.loss;
                }
                if !y_order.is_empty() {
                    let uy_b = data.y_batch(&cycled_batch(&y_order, step, bs));
                    let uy_d = uy_b.as_data();
                    let part = mvae_y_only(comps, latent, &uy_d, true, rng)?;
                    total += part.total;
                    loss = &loss + &part.loss;
                }
                finite_or_error(total, &ctx(step))?;
                let norm = apply_step(&loss, &comps.store, opt, clip);
                acc.add_loss(total, norm);
                acc.add_d(breakdown_d(&joint));
            }
        }
        (ModelKind::VaeLike(comps), Family::Jmvae | Family::Bivcca) => {
            let order = shuffled(&split.paired, rng);
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let y_b = data.y_batch(chunk);
                let y_d = y_b.as_data();
                let out = paired_objective(config.family, comps, config, &x_t, &y_d, true, rng)?;
                finite_or_error(out.total, &ctx(step))?;
                let norm = apply_step(&out.loss, &comps.store, opt, clip);
                acc.add_loss(out.total, norm);
                acc.add_d(breakdown_d(&out));
            }
        }
        (ModelKind::VaeLike(comps), Family::Vae) => {
            let mut pool = split.paired.clone();
            pool.extend_from_slice(&split.unpaired_x);
            let order = shuffled(&pool, rng);
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let loss = elbo_x_loss(comps, latent, &x_t, rng)?;
                let value = loss.scalar();
                finite_or_error(value, &ctx(step))?;
                let norm = apply_step(&loss, &comps.store, opt, clip);
                acc.add_loss(value, norm);
            }
        }
        (ModelKind::VaeGan { comps, critic }, Family::Vaegan | Family::VaeganLipschitz) => {
            let critics = critic
                .as_ref()
                .ok_or_else(|| Error::contract("adversarial training needs critics"))?;
            let copt = critic_opt
                .as_mut()
                .ok_or_else(|| Error::contract("adversarial training needs a critic optimizer"))?;
            let order = shuffled(&split.paired, rng);
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let y_b = data.y_batch(chunk);
                let y_d = y_b.as_data();
                let c_loss = vaegan_critic_step(
                    comps,
                    critics,
                    config.family,
                    config,
                    &x_t,
                    &y_d,
                    copt,
                    rng,
                )?;
                finite_or_error(c_loss, &ctx(step))?;
                let (gen, norm) = vaegan_generator_step(
                    comps,
                    critics,
                    config.family,
                    config,
                    &x_t,
                    &y_d,
                    opt,
                    rng,
                )?;
                finite_or_error(gen.total, &ctx(step))?;
                acc.add_loss(gen.total, norm);
                acc.add_d(breakdown_d(&gen));
                acc.add_critic(c_loss);
            }
        }
        (ModelKind::Gan { store, dec, critic }, Family::Gan) => {
            let gc = critic
                .as_ref()
                .ok_or_else(|| Error::contract("adversarial training needs a critic"))?;
            let copt = critic_opt
                .as_mut()
                .ok_or_else(|| Error::contract("adversarial training needs a critic optimizer"))?;
            let mut pool = split.paired.clone();
            pool.extend_from_slice(&split.unpaired_x);
            let order = shuffled(&pool, rng);
            let gp = config.vaegan.gp_weight;
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let c_loss = gan_critic_step(dec, gc, latent, gp, &x_t, copt, clip, rng)?;
                finite_or_error(c_loss, &ctx(step))?;
                let (g_loss, norm) =
                    gan_generator_step(dec, store, gc, latent, chunk.len(), opt, clip, rng)?;
                finite_or_error(g_loss, &ctx(step))?;
                acc.add_loss(g_loss, norm);
                acc.add_critic(c_loss);
            }
        }
        (ModelKind::VaeNvp(parts), Family::Vaenvp) => {
            let order = shuffled(&split.paired, rng);
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let y_b = data.y_batch(chunk);
                let y_d = y_b.as_data();
                let out = vaenvp_forward(parts, &config.network, &x_t, &y_d, true, rng)?;
                finite_or_error(out.total, &ctx(step))?;
                let norm = apply_step(&out.loss, &parts.store, opt, clip);
                acc.add_loss(out.total, norm);
                acc.add_d(breakdown_d(&out));
            }
        }
        (ModelKind::Nvp { store, flow }, Family::Nvp) => {
            let mut pool = split.paired.clone();
            pool.extend_from_slice(&split.unpaired_x);
            let order = shuffled(&pool, rng);
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let (u, _) = flow_coordinates(&x_t, rng);
                let b = u.shape()[0];
                let dim = u.shape()[1];
                let base = DiagGaussian::standard(&[b, dim]);
                let loss = flow_log_marginal(&u, flow, &base)?.mean_all().neg();
                let value = loss.scalar();
                finite_or_error(value, &ctx(step))?;
                let norm = apply_step(&loss, store, opt, clip);
                acc.add_loss(value, norm);
            }
        }
        (ModelKind::Classifier { store, enc, head, .. }, Family::Classifier) => {
            let order = shuffled(&split.paired, rng);
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let y_b = data.y_batch(chunk);
                let labels = y_b.labels().ok_or_else(|| {
                    Error::contract("classifier training needs a label modality")
                })?;
                let loss = classifier_loss(enc, head, &x_t, labels)?;
                let value = loss.scalar();
                finite_or_error(value, &ctx(step))?;
                let norm = apply_step(&loss, store, opt, clip);
                acc.add_loss(value, norm);
            }
        }
        (ModelKind::Captioner { store, enc, dec }, Family::Captioner) => {
            let order = shuffled(&split.paired, rng);
            for (step, chunk) in order.chunks(bs).enumerate() {
                let x_t = data.x_batch(chunk);
                let y_b = data.y_batch(chunk);
                let tokens = y_b
                    .tokens()
                    .ok_or_else(|| Error::contract("captioner training needs a text modality"))?;
                let loss = captioner_loss(enc, dec, &x_t, tokens, true, rng)?;
                let value = loss.scalar();
                finite_or_error(value, &ctx(step))?;
                let norm = apply_step(&loss, store, opt, clip);
                acc.add_loss(value, norm);
            }
        }
        _ => return Err(Error::contract("model kind does not match the configured family")),
    }
    Ok(acc)
}

/// Mean per-example validation objective in eval mode. Adversarially
/// trained joint models are scored with the closed-form objective; the
/// plain adversarial image model has no validation loss.
fn validation_loss(
    model: &Model,
    config: &ExperimentConfig,
    val: &PairedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>, Error> {
    if config.family == Family::Gan || val.is_empty() {
        return Ok(None);
    }
    let bs = config.optim.batch_size;
    let latent = config.network.latent_dim;
    let order: Vec<usize> = (0..val.len()).collect();
    let mut weighted = 0.0;
    for chunk in order.chunks(bs) {
        let x_t = val.x_batch(chunk);
        let value = match (&model.kind, config.family) {
            (ModelKind::VaeLike(comps), Family::Vae) => {
                elbo_x_loss(comps, latent, &x_t, rng)?.scalar()
            }
            (ModelKind::VaeLike(comps), _) => {
                let y_b = val.y_batch(chunk);
                let y_d = y_b.as_data();
                paired_objective(config.family, comps, config, &x_t, &y_d, false, rng)?.total
            }
            (ModelKind::VaeGan { comps, .. }, _) => {
                let y_b = val.y_batch(chunk);
                let y_d = y_b.as_data();
                paired_objective(config.family, comps, config, &x_t, &y_d, false, rng)?.total
            }
            (ModelKind::VaeNvp(parts), _) => {
                let y_b = val.y_batch(chunk);
                let y_d = y_b.as_data();
                vaenvp_forward(parts, &config.network, &x_t, &y_d, false, rng)?.total
            }
            (ModelKind::Nvp { flow, .. }, _) => {
                let (u, _) = flow_coordinates(&x_t, rng);
                let base = DiagGaussian::standard(&[u.shape()[0], u.shape()[1]]);
                flow_log_marginal(&u, flow, &base)?.mean_all().neg().scalar()
            }
            (ModelKind::Classifier { enc, head, .. }, _) => {
                let y_b = val.y_batch(chunk);
                let labels = y_b
                    .labels()
                    .ok_or_else(|| Error::contract("classifier needs labels"))?;
                classifier_loss(enc, head, &x_t, labels)?.scalar()
            }
            (ModelKind::Captioner { enc, dec, .. }, _) => {
                let y_b = val.y_batch(chunk);
                let tokens =
                    y_b.tokens().ok_or_else(|| Error::contract("captioner needs text"))?;
                captioner_loss(enc, dec, &x_t, tokens, false, rng)?.scalar()
            }
            _ => return Err(Error::contract("model kind does not match the configured family")),
        };
        weighted += value * chunk.len() as f64;
    }
    Ok(Some(weighted / val.len() as f64))
}

// ---------------------------------------------------------------------------
// Orchestration

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("serialization failed: {e}")))?;
    fs::write(path, text).map_err(|e| Error::contract(format!("cannot write {path:?}: {e}")))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::contract(format!("cannot read {path:?}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::contract(format!("cannot parse {path:?}: {e}")))
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<(), Error> {
    let mut out = String::new();
    for row in rows {
        out.push_str(
            &serde_json::to_string(row)
                .map_err(|e| Error::contract(format!("metrics serialization failed: {e}")))?,
        );
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::contract(format!("cannot write metrics: {e}")))
}

fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::contract(format!("cannot read metrics: {e}")))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::contract(format!("bad metrics line: {e}")))
        })
        .collect()
}

fn copy_flat_dir(src: &Path, dst: &Path) -> Result<(), Error> {
    fs::create_dir_all(dst).map_err(|e| Error::contract(format!("cannot create {dst:?}: {e}")))?;
    // Clear stale blobs so the copy is exactly the source checkpoint.
    for entry in
        fs::read_dir(dst).map_err(|e| Error::contract(format!("cannot list {dst:?}: {e}")))?
    {
        let entry = entry.map_err(|e| Error::contract(format!("cannot list {dst:?}: {e}")))?;
        if entry.path().is_file() {
            fs::remove_file(entry.path())
                .map_err(|e| Error::contract(format!("cannot clear {dst:?}: {e}")))?;
        }
    }
    for entry in
        fs::read_dir(src).map_err(|e| Error::contract(format!("cannot list {src:?}: {e}")))?
    {
        let entry = entry.map_err(|e| Error::contract(format!("cannot list {src:?}: {e}")))?;
        let from = entry.path();
        if from.is_file() {
            fs::copy(&from, dst.join(entry.file_name()))
                .map_err(|e| Error::contract(format!("cannot copy checkpoint file: {e}")))?;
        }
    }
    Ok(())
}

fn checkpoint_meta(model: &Model, data: &PairedDataset) -> CheckpointMeta {
    CheckpointMeta {
        family: model.family.name().to_string(),
        x_spec: model.x_spec.clone(),
        y_spec: model.y_spec.clone(),
        config: model.config.clone(),
        joint_mode: model.joint_mode,
        seed: model.seed,
        data_fingerprint: data.fingerprint.clone(),
    }
}

/// Fit a model, checkpointing every epoch. Same-seed runs are bit-for-bit
/// reproducible, and an interrupted run resumes exactly from `out_dir`'s
/// saved state. Returns a report whose `final_checkpoint` points at the
/// best-validation snapshot (when the family tracks one) or the last epoch.
pub fn train(
    config: &ExperimentConfig,
    data: &PairedDataset,
    val: Option<&PairedDataset>,
    out_dir: &Path,
) -> Result<TrainReport, Error> {
    config.validate()?;
    let model = build_model(config, &data.x_spec, &data.y_spec)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::contract(format!("cannot create {out_dir:?}: {e}")))?;
    let config_echo = toml::to_string_pretty(config)
        .map_err(|e| Error::contract(format!("config serialization failed: {e}")))?;
    fs::write(out_dir.join("config.toml"), config_echo)
        .map_err(|e| Error::contract(format!("cannot write config echo: {e}")))?;

    let state_path = out_dir.join("state.json");
    let metrics_path = out_dir.join("metrics.jsonl");
    let last_dir = out_dir.join("last");
    let critic_dir = out_dir.join("critic_last");
    let best_dir = out_dir.join("best");
    let final_dir = out_dir.join("final");

    let mut opt;
    let mut critic_opt;
    let mut state;
    let mut metrics: Vec<EpochMetrics>;
    if state_path.exists() {
        state = read_json::<TrainState>(&state_path)?;
        let (_, values) = load_checkpoint(&last_dir)?;
        restore_params(model.main_store(), &values)?;
        if let Some(cs) = model.critic_store() {
            let (_, cvalues) = load_checkpoint(&critic_dir)?;
            restore_params(cs, &cvalues)?;
        }
        opt = unpack_adam(&state.adam)?;
        critic_opt = match &state.critic_adam {
            Some(ser) => Some(unpack_adam(ser)?),
            None => None,
        };
        metrics = read_metrics(&metrics_path)?;
        metrics.truncate(state.epochs_done);
    } else {
        opt = Adam::new(config.optim.lr);
        critic_opt = model.critic_store().map(|_| Adam::new(config.optim.critic_lr));
        state = TrainState {
            epochs_done: 0,
            rng: ChaCha8Rng::seed_from_u64(config.optim.seed),
            adam: pack_adam(&opt),
            critic_adam: None,
            best_epoch: None,
            best_val: None,
        };
        metrics = Vec::new();
    }

    let split = if config.family.uses_unpaired() || config.supervision.paired_fraction < 1.0 {
        make_supervision_split(data.len(), &config.supervision)?
    } else {
        SupervisionSplit::fully_paired(data.len())
    };
    let meta = checkpoint_meta(&model, data);

    let mut rng = state.rng.clone();
    for epoch in state.epochs_done..config.optim.epochs {
        let acc = train_epoch(&model, config, data, &split, &mut rng, &mut opt, &mut critic_opt, epoch)
            .inspect_err(|e| {
                let _ = write_json(
                    &out_dir.join("failure.json"),
                    &serde_json::json!({ "epoch": epoch, "error": e.to_string() }),
                );
            })?;
        let val_loss = match val {
            Some(v) => validation_loss(&model, config, v, &mut rng)?,
            None => None,
        };
        save_checkpoint(&last_dir, &meta, model.main_store())?;
        if let Some(cs) = model.critic_store() {
            save_checkpoint(&critic_dir, &meta, cs)?;
        }
        if config.family.tracks_best() {
            if let Some(v) = val_loss {
                if state.best_val.is_none_or(|best| v < best) {
                    state.best_val = Some(v);
                    state.best_epoch = Some(epoch);
                    save_checkpoint(&best_dir, &meta, model.main_store())?;
                }
            }
        }
        metrics.push(acc.metrics(epoch, val_loss));
        write_metrics(&metrics_path, &metrics)?;
        state.epochs_done = epoch + 1;
        state.rng = rng.clone();
        state.adam = pack_adam(&opt);
        state.critic_adam = critic_opt.as_ref().map(pack_adam);
        write_json(&state_path, &state)?;
    }

    let source = if config.family.tracks_best() && state.best_epoch.is_some() {
        &best_dir
    } else {
        &last_dir
    };
    copy_flat_dir(source, &final_dir)?;
    let report = TrainReport {
        family: config.family,
        epochs_run: state.epochs_done,
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        final_checkpoint: final_dir,
        metrics,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}
