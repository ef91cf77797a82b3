//! Dataset ingestion and synthesis: IDX-format digit corpora, arithmetic
//! caption pairing, and a shapes-world scene generator that stores the full
//! ground truth needed to re-render every image bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tape::ndarray::{ArrayD, IxDyn};
use tape::Tensor;

use crate::error::Error;
use crate::networks::{EOS, PAD, SOS, UNK};

pub const IMG_SIDE: usize = 32;
const RAW_SIDE: usize = 28;

// ---------------------------------------------------------------------------
// IDX ingestion

#[derive(Clone)]
pub struct MnistSplit {
    /// Row-major 32x32 grayscale bytes, one image per `IMG_SIDE * IMG_SIDE`
    /// stride.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.images[i * IMG_SIDE * IMG_SIDE..(i + 1) * IMG_SIDE * IMG_SIDE]
    }

    /// Batch tensor [B, 1, 32, 32] with pixels scaled into [0, 1].
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * IMG_SIDE * IMG_SIDE);
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| f64::from(b) / 255.0));
        }
        Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[indices.len(), 1, IMG_SIDE, IMG_SIDE]), data)
                .expect("batch shape"),
        )
    }
}

pub struct MnistData {
    pub train: MnistSplit,
    pub validation: MnistSplit,
    pub test: MnistSplit,
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32, Error> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::contract("IDX header truncated"))
}

/// Parse an IDX3 image file: big-endian magic 2051, dims, u8 payload.
/// Images are centered onto a 32x32 canvas (2-pixel zero border).
pub fn load_idx_images(path: &Path) -> Result<Vec<u8>, Error> {
    let bytes =
        fs::read(path).map_err(|e| Error::contract(format!("{}: {e}", path.display())))?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != 2051 {
        return Err(Error::contract(format!("bad IDX image magic {magic}, want 2051")));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    if rows != RAW_SIDE || cols != RAW_SIDE {
        return Err(Error::contract(format!("expected {RAW_SIDE}x{RAW_SIDE} images, got {rows}x{cols}")));
    }
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::contract(format!(
            "IDX payload holds {} bytes, header promises {}",
            payload.len(),
            n * rows * cols
        )));
    }
    let pad = (IMG_SIDE - RAW_SIDE) / 2;
    let mut out = vec![0u8; n * IMG_SIDE * IMG_SIDE];
    for i in 0..n {
        for r in 0..RAW_SIDE {
            let src = i * RAW_SIDE * RAW_SIDE + r * RAW_SIDE;
            let dst = i * IMG_SIDE * IMG_SIDE + (r + pad) * IMG_SIDE + pad;
            out[dst..dst + RAW_SIDE].copy_from_slice(&payload[src..src + RAW_SIDE]);
        }
    }
    Ok(out)
}

/// Parse an IDX1 label file: big-endian magic 2049, count, u8 payload.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, Error> {
    let bytes =
        fs::read(path).map_err(|e| Error::contract(format!("{}: {e}", path.display())))?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != 2049 {
        return Err(Error::contract(format!("bad IDX label magic {magic}, want 2049")));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::contract(format!(
            "IDX label payload holds {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

/// Load the standard four-file layout from `dir` and carve the 60k training
/// file into 50k train / 10k validation, keeping the 10k test file intact.
pub fn load_mnist_idx(dir: &Path) -> Result<MnistData, Error> {
    let images = load_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let labels = load_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let t_images = load_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let t_labels = load_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    let stride = IMG_SIDE * IMG_SIDE;
    if labels.len() != images.len() / stride {
        return Err(Error::contract("training image and label counts disagree"));
    }
    if t_labels.len() != t_images.len() / stride {
        return Err(Error::contract("test image and label counts disagree"));
    }
    if labels.len() != 60000 || t_labels.len() != 10000 {
        return Err(Error::contract(format!(
            "expected 60000 train / 10000 test examples, got {} / {}",
            labels.len(),
            t_labels.len()
        )));
    }
    let cut = 50000 * stride;
    Ok(MnistData {
        train: MnistSplit { images: images[..cut].to_vec(), labels: labels[..50000].to_vec() },
        validation: MnistSplit { images: images[cut..].to_vec(), labels: labels[50000..].to_vec() },
        test: MnistSplit { images: t_images, labels: t_labels },
    })
}

// ---------------------------------------------------------------------------
// Arithmetic captions

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathCaption {
    pub operands: Vec<u8>,
    pub tokens: Vec<String>,
    pub value: u8,
}

/// Sample one caption: k ~ U{1..5} operators, k+1 operands ~ U{0..9},
/// operands re-drawn until the sum is at most 9. The operator count is kept
/// fixed through the rejection loop so its marginal stays uniform. The
/// worst case (k=5) accepts with probability about 0.005, so the loop runs
/// about 200 iterations on average there and terminates with certainty.
pub fn generate_math_caption(rng: &mut impl Rng) -> MathCaption {
    let k = rng.gen_range(1..=5usize);
    loop {
        let operands: Vec<u8> = (0..=k).map(|_| rng.gen_range(0..=9u8)).collect();
        let sum: u32 = operands.iter().map(|&d| u32::from(d)).sum();
        if sum <= 9 {
            let mut tokens = Vec::with_capacity(2 * k + 1);
            for (i, d) in operands.iter().enumerate() {
                if i > 0 {
                    tokens.push("+".to_string());
                }
                tokens.push(d.to_string());
            }
            return MathCaption { operands, tokens, value: sum as u8 };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathPair {
    pub image_index: usize,
    pub caption: MathCaption,
}

/// Pair `n` sampled captions with images whose label equals the caption's
/// value, chosen uniformly with replacement within the given split's labels.
pub fn generate_mnist_math(labels: &[u8], n: usize, seed: u64) -> Result<Vec<MathPair>, Error> {
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &l) in labels.iter().enumerate() {
        if l > 9 {
            return Err(Error::contract(format!("label {l} is not a digit")));
        }
        by_label[l as usize].push(i);
    }
    for (digit, pool) in by_label.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::contract(format!(
                "split has no image with label {digit}; cannot pair captions"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let caption = generate_math_caption(&mut rng);
        let pool = &by_label[caption.value as usize];
        let image_index = pool[rng.gen_range(0..pool.len())];
        pairs.push(MathPair { image_index, caption });
    }
    Ok(pairs)
}

/// Digit and operator tokens used by arithmetic captions.
pub fn math_token_inventory() -> Vec<String> {
    let mut v: Vec<String> = (0..=9u8).map(|d| d.to_string()).collect();
    v.push("+".to_string());
    v
}

// ---------------------------------------------------------------------------
// Shapes world

pub const SHAPE_NAMES: [&str; 3] = ["square", "circle", "triangle"];
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const COLOR_RGB: [[u8; 3]; 6] = [
    [220, 30, 30],
    [30, 180, 30],
    [40, 60, 230],
    [230, 210, 30],
    [200, 40, 200],
    [40, 200, 200],
];
const BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: usize,
    pub color: usize,
    /// Circumradius (circle radius, square half-diagonal factor handled
    /// separately, triangle circumradius) in pixels.
    pub size: f64,
    pub x: f64,
    pub y: f64,
    pub rotation: f64,
}

impl ObjectSpec {
    /// Radius of the smallest circle containing the object.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            0 => self.size * std::f64::consts::SQRT_2,
            _ => self.size,
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.x;
        let dy = py - self.y;
        match self.shape {
            // square: half-side = size, axis-aligned after undoing rotation
            0 => {
                let (s, c) = self.rotation.sin_cos();
                let rx = c * dx + s * dy;
                let ry = -s * dx + c * dy;
                rx.abs() <= self.size && ry.abs() <= self.size
            }
            // circle
            1 => dx * dx + dy * dy <= self.size * self.size,
            // equilateral triangle, circumradius size, apex at `rotation`
            2 => {
                let mut verts = [(0.0, 0.0); 3];
                for (i, v) in verts.iter_mut().enumerate() {
                    let a = self.rotation - std::f64::consts::FRAC_PI_2
                        + i as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
                    *v = (self.x + self.size * a.cos(), self.y + self.size * a.sin());
                }
                let mut sign = 0.0f64;
                for i in 0..3 {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                    if cross.abs() < 1e-12 {
                        continue;
                    }
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if sign != cross.signum() {
                        return false;
                    }
                }
                true
            }
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub fn tokens(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether `a` stands in this relation to `b` in image coordinates
    /// (y grows downward).
    pub fn holds(self, a: &ObjectSpec, b: &ObjectSpec) -> bool {
        match self {
            Relation::LeftOf => a.x < b.x,
            Relation::RightOf => a.x > b.x,
            Relation::Above => a.y < b.y,
            Relation::Below => a.y > b.y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub caption: Vec<String>,
    /// (subject index, object index, relation) when the caption states one.
    pub relation: Option<(usize, usize, Relation)>,
    /// RGB raster, 3 x 32 x 32 row-major. Regenerable from `objects`.
    #[serde(skip)]
    pub image: Vec<u8>,
}

/// Rasterize at pixel centers; objects never overlap so draw order is
/// irrelevant.
pub fn render_scene(objects: &[ObjectSpec]) -> Vec<u8> {
    let mut img = vec![0u8; 3 * IMG_SIDE * IMG_SIDE];
    for py in 0..IMG_SIDE {
        for px in 0..IMG_SIDE {
            let cx = px as f64 + 0.5;
            let cy = py as f64 + 0.5;
            let mut rgb = BACKGROUND;
            for o in objects {
                if o.contains(cx, cy) {
                    rgb = COLOR_RGB[o.color];
                    break;
                }
            }
            for (c, &v) in rgb.iter().enumerate() {
                img[c * IMG_SIDE * IMG_SIDE + py * IMG_SIDE + px] = v;
            }
        }
    }
    img
}

pub fn scene_batch(scenes: &[&SceneSpec]) -> Tensor {
    let mut data = Vec::with_capacity(scenes.len() * 3 * IMG_SIDE * IMG_SIDE);
    for s in scenes {
        data.extend(s.image.iter().map(|&b| f64::from(b) / 255.0));
    }
    Tensor::constant(
        ArrayD::from_shape_vec(IxDyn(&[scenes.len(), 3, IMG_SIDE, IMG_SIDE]), data)
            .expect("scene batch shape"),
    )
}

fn sample_object(rng: &mut impl Rng) -> ObjectSpec {
    let shape = rng.gen_range(0..SHAPE_NAMES.len());
    let color = rng.gen_range(0..COLOR_NAMES.len());
    let size = rng.gen_range(3.0..5.5);
    let rotation = if shape == 1 { 0.0 } else { rng.gen_range(0.0..std::f64::consts::TAU) };
    let mut o = ObjectSpec { shape, color, size, x: 0.0, y: 0.0, rotation };
    let r = o.bounding_radius();
    o.x = rng.gen_range(r..(IMG_SIDE as f64 - r));
    o.y = rng.gen_range(r..(IMG_SIDE as f64 - r));
    o
}

fn relation_between(a: &ObjectSpec, b: &ObjectSpec) -> Relation {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if dy > 0.0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

fn describe(objects: &[ObjectSpec], rng: &mut impl Rng) -> (Vec<String>, Option<(usize, usize, Relation)>) {
    let mention = |o: &ObjectSpec, out: &mut Vec<String>| {
        out.push("a".into());
        out.push(COLOR_NAMES[o.color].into());
        out.push(SHAPE_NAMES[o.shape].into());
    };
    let mut caption = Vec::new();
    if objects.len() == 1 {
        mention(&objects[0], &mut caption);
        return (caption, None);
    }
    let i = rng.gen_range(0..objects.len());
    let j = loop {
        let j = rng.gen_range(0..objects.len());
        if j != i {
            break j;
        }
    };
    let rel = relation_between(&objects[i], &objects[j]);
    mention(&objects[i], &mut caption);
    caption.push("is".into());
    caption.extend(rel.tokens().iter().map(|t| t.to_string()));
    mention(&objects[j], &mut caption);
    (caption, Some((i, j, rel)))
}

const PLACEMENT_RETRIES: usize = 100;
const SCENE_RETRIES: usize = 20;

fn place_objects(count: usize, rng: &mut impl Rng) -> Option<Vec<ObjectSpec>> {
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let o = sample_object(rng);
            let clear = objects.iter().all(|p| {
                let d = ((p.x - o.x).powi(2) + (p.y - o.y).powi(2)).sqrt();
                d > p.bounding_radius() + o.bounding_radius() + 1.0
            });
            if clear {
                objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Generate `n_scenes` scenes with 1..=max_objects non-overlapping objects
/// each, captioned by the templated grammar and rendered to 32x32 RGB.
pub fn generate_shapes_world(
    n_scenes: usize,
    max_objects: usize,
    seed: u64,
) -> Result<Vec<SceneSpec>, Error> {
    if max_objects == 0 || max_objects > 3 {
        return Err(Error::contract("max_objects must be between 1 and 3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        let count = rng.gen_range(1..=max_objects);
        let mut objects = None;
        for _ in 0..SCENE_RETRIES {
            objects = place_objects(count, &mut rng);
            if objects.is_some() {
                break;
            }
        }
        let objects = objects.ok_or_else(|| {
            Error::contract("could not place a non-overlapping scene within the retry budget")
        })?;
        let (caption, relation) = describe(&objects, &mut rng);
        let image = render_scene(&objects);
        scenes.push(SceneSpec { objects, caption, relation, image });
    }
    Ok(scenes)
}

/// Mentioned (color, shape) index pairs plus the stated relation, if any.
pub type ParsedCaption = (Vec<(usize, usize)>, Option<Relation>);

/// Invert the caption grammar.
pub fn parse_caption(tokens: &[String]) -> Result<ParsedCaption, Error> {
    let color_of = |t: &str| COLOR_NAMES.iter().position(|&c| c == t);
    let shape_of = |t: &str| SHAPE_NAMES.iter().position(|&s| s == t);
    let mut mentions = Vec::new();
    let mut relation = None;
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i].as_str() {
            "a" => {
                let c = tokens
                    .get(i + 1)
                    .and_then(|t| color_of(t))
                    .ok_or_else(|| Error::contract("expected a color after 'a'"))?;
                let s = tokens
                    .get(i + 2)
                    .and_then(|t| shape_of(t))
                    .ok_or_else(|| Error::contract("expected a shape after the color"))?;
                mentions.push((c, s));
                i += 3;
            }
            "is" => i += 1,
            "left" => {
                if tokens.get(i + 1).map(String::as_str) != Some("of") {
                    return Err(Error::contract("'left' must be followed by 'of'"));
                }
                relation = Some(Relation::LeftOf);
                i += 2;
            }
            "right" => {
                if tokens.get(i + 1).map(String::as_str) != Some("of") {
                    return Err(Error::contract("'right' must be followed by 'of'"));
                }
                relation = Some(Relation::RightOf);
                i += 2;
            }
            "above" => {
                relation = Some(Relation::Above);
                i += 1;
            }
            "below" => {
                relation = Some(Relation::Below);
                i += 1;
            }
            other => return Err(Error::contract(format!("unknown caption token '{other}'"))),
        }
    }
    Ok((mentions, relation))
}

/// Words the shapes-world grammar can emit.
pub fn shapes_token_inventory() -> Vec<String> {
    let mut v: Vec<String> = ["a", "is", "left", "right", "of", "above", "below"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(COLOR_NAMES.iter().map(|s| s.to_string()));
    v.extend(SHAPE_NAMES.iter().map(|s| s.to_string()));
    v
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Frequency-ordered vocabulary (ties broken lexicographically) with
    /// PAD/UNK/SOS/EOS reserved at indices 0..=3.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a [String]>) -> Vocab {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string(), "<sos>".to_string(), "<eos>".to_string()];
        tokens.extend(entries.into_iter().map(|(t, _)| t.to_string()));
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens.get(i).cloned().unwrap_or_else(|| "<unk>".into())).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

// Reserved slots must line up with the token constants the codecs use.
const _: [(); PAD] = [(); 0];
const _: [(); UNK] = [(); 1];
const _: [(); SOS] = [(); 2];
const _: [(); EOS] = [(); 3];

// ---------------------------------------------------------------------------
// Persistence

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapesManifest {
    pub n_scenes: usize,
    pub max_objects: usize,
    pub seed: u64,
    pub shape_names: Vec<String>,
    pub color_names: Vec<String>,
    pub fingerprint: String,
}

const SCENES_FILE: &str = "scenes.jsonl";
const RASTERS_FILE: &str = "rasters.bin";
const SHAPES_MANIFEST: &str = "manifest.json";

fn shapes_fingerprint(scene_lines: &str, rasters: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(scene_lines.as_bytes());
    hasher.update(rasters);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_shapes_dataset(
    dir: &Path,
    scenes: &[SceneSpec],
    max_objects: usize,
    seed: u64,
) -> Result<ShapesManifest, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::contract(format!("cannot create {}: {e}", dir.display())))?;
    let mut lines = String::new();
    let mut rasters = Vec::with_capacity(scenes.len() * 3 * IMG_SIDE * IMG_SIDE);
    for s in scenes {
        lines.push_str(
            &serde_json::to_string(s).map_err(|e| Error::contract(format!("scene serialization: {e}")))?,
        );
        lines.push('\n');
        rasters.extend_from_slice(&s.image);
    }
    let manifest = ShapesManifest {
        n_scenes: scenes.len(),
        max_objects,
        seed,
        shape_names: SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
        color_names: COLOR_NAMES.iter().map(|s| s.to_string()).collect(),
        fingerprint: shapes_fingerprint(&lines, &rasters),
    };
    fs::write(dir.join(SCENES_FILE), lines)
        .map_err(|e| Error::contract(format!("cannot write scenes: {e}")))?;
    fs::write(dir.join(RASTERS_FILE), rasters)
        .map_err(|e| Error::contract(format!("cannot write rasters: {e}")))?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::contract(format!("manifest serialization: {e}")))?;
    fs::write(dir.join(SHAPES_MANIFEST), json)
        .map_err(|e| Error::contract(format!("cannot write manifest: {e}")))?;
    Ok(manifest)
}

pub fn load_shapes_dataset(dir: &Path) -> Result<(ShapesManifest, Vec<SceneSpec>), Error> {
    let manifest: ShapesManifest = serde_json::from_str(
        &fs::read_to_string(dir.join(SHAPES_MANIFEST))
            .map_err(|e| Error::contract(format!("cannot read manifest: {e}")))?,
    )
    .map_err(|e| Error::contract(format!("manifest parse: {e}")))?;
    let lines = fs::read_to_string(dir.join(SCENES_FILE))
        .map_err(|e| Error::contract(format!("cannot read scenes: {e}")))?;
    let rasters = fs::read(dir.join(RASTERS_FILE))
        .map_err(|e| Error::contract(format!("cannot read rasters: {e}")))?;
    if shapes_fingerprint(&lines, &rasters) != manifest.fingerprint {
        return Err(Error::contract("shapes dataset fingerprint mismatch; files were altered"));
    }
    let stride = 3 * IMG_SIDE * IMG_SIDE;
    let mut scenes = Vec::new();
    for (i, line) in lines.lines().enumerate() {
        let mut scene: SceneSpec = serde_json::from_str(line)
            .map_err(|e| Error::contract(format!("scene {i} parse: {e}")))?;
        let blob = rasters
            .get(i * stride..(i + 1) * stride)
            .ok_or_else(|| Error::contract("raster file shorter than the scene list"))?;
        scene.image = blob.to_vec();
        scenes.push(scene);
    }
    if scenes.len() != manifest.n_scenes {
        return Err(Error::contract(format!(
            "manifest promises {} scenes, file holds {}",
            manifest.n_scenes,
            scenes.len()
        )));
    }
    Ok((manifest, scenes))
}
