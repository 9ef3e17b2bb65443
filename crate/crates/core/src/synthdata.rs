//! Synthetic scene/question/answer generation.
//!
//! Scenes are 64x64 RGB canvases: a noisy gray background with 2–4
//! non-overlapping colored shapes (circle, square, triangle in red, green,
//! blue, yellow). Questions come from four templates over a closed
//! vocabulary, and answers form a closed 14-way set, so a VQA model is a
//! simple classifier. Object centers sit on the 8-px detector-cell lattice,
//! which makes every object land in exactly one detector cell — counting
//! questions then have a clean per-cell signal.
//!
//! Everything is driven by explicit seeds through ChaCha20; generating the
//! same split twice yields identical scenes, images, and questions.

use crate::io::{self, IoError};
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const IMG: usize = 64;
pub const CHANNELS: usize = 3;

/// Images are `[IMG, IMG, 3]` tensors with values in [0,1].
pub type Image = Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place {wanted} non-overlapping objects after {attempts} attempts")]
    PlacementFailed { wanted: usize, attempts: usize },
    #[error("{what}")]
    Invalid { what: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

// ---------------------------------------------------------------------------
// Shapes, colors, vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    /// Sampling skew: circles are common, triangles rare.
    pub const SKEW: [f64; 3] = [0.5, 0.3, 0.2];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Shape> {
        Shape::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    /// Sampling skew: red is common, yellow rare.
    pub const SKEW: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Color::Red => 0,
            Color::Green => 1,
            Color::Blue => 2,
            Color::Yellow => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Color> {
        Color::ALL.get(i).copied()
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.10, 0.10],
            Color::Green => [0.10, 0.75, 0.10],
            Color::Blue => [0.10, 0.10, 0.85],
            Color::Yellow => [0.85, 0.80, 0.10],
        }
    }
}

/// Closed token and answer inventory. The first 18 words cover every
/// template; the last 6 are reserved: they never occur in clean questions
/// and exist purely as candidate question triggers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<&'static str>,
    n_reserved: usize,
    answers: Vec<&'static str>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Vocabulary {
        Vocabulary {
            words: vec![
                // Template words.
                "what", "color", "is", "the", "shape", "object", "objects", "how", "many",
                "there", "a",
                // Attribute words.
                "circle", "square", "triangle", "red", "green", "blue", "yellow",
                // Reserved trigger candidates.
                "consider", "suppose", "indeed", "notably", "albeit", "moreover",
            ],
            n_reserved: 6,
            answers: vec![
                "red", "green", "blue", "yellow", "circle", "square", "triangle", "yes", "no",
                "0", "1", "2", "3", "4",
            ],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.words.len()
    }

    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn word(&self, id: u16) -> &'static str {
        self.words[id as usize]
    }

    pub fn token_id(&self, word: &str) -> Option<u16> {
        self.words.iter().position(|w| *w == word).map(|i| i as u16)
    }

    /// Token ids of the reserved trigger candidates.
    pub fn reserved_tokens(&self) -> Vec<u16> {
        let first = self.words.len() - self.n_reserved;
        (first..self.words.len()).map(|i| i as u16).collect()
    }

    pub fn answer_name(&self, id: u8) -> &'static str {
        self.answers[id as usize]
    }

    pub fn answer_id(&self, name: &str) -> Option<u8> {
        self.answers.iter().position(|a| *a == name).map(|i| i as u8)
    }

    pub fn answer_for_color(&self, c: Color) -> u8 {
        self.answer_id(c.name()).unwrap()
    }

    pub fn answer_for_shape(&self, s: Shape) -> u8 {
        self.answer_id(s.name()).unwrap()
    }

    pub fn answer_for_count(&self, n: usize) -> u8 {
        assert!(n <= 4, "count answers stop at 4, got {n}");
        self.answer_id(&n.to_string()).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Side length / diameter, 10..=14 px.
    pub size: u8,
    /// Center row, px.
    pub cy: u8,
    /// Center column, px.
    pub cx: u8,
}

impl SceneObject {
    /// Half-open pixel bounding box (top, left, bottom, right).
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let half = (self.size / 2) as usize;
        let top = self.cy as usize - half;
        let left = self.cx as usize - half;
        (top, left, top + self.size as usize, left + self.size as usize)
    }
}

/// Everything needed to re-render an image bit-exactly: object layout plus
/// the background-noise seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

fn boxes_overlap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

fn sample_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Valid object-center coordinates: detector-cell centers whose largest
/// possible bounding box still fits inside the canvas.
const LATTICE: [u8; 6] = [12, 20, 28, 36, 44, 52];

/// Samples a scene: 2–4 objects with skewed shape/color marginals, sizes
/// 10–14 px, centers on the cell lattice, non-overlapping bounding boxes.
pub fn sample_scene<R: Rng>(rng: &mut R) -> Result<SceneSpec, SynthError> {
    let seed = rng.random::<u64>();
    let n = rng.random_range(2..=4usize);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n {
        attempts += 1;
        if attempts > 1000 {
            return Err(SynthError::PlacementFailed { wanted: n, attempts });
        }
        let shape = Shape::ALL[sample_weighted(rng, &Shape::SKEW)];
        let color = Color::ALL[sample_weighted(rng, &Color::SKEW)];
        let size = rng.random_range(10..=14u8);
        let cy = LATTICE[rng.random_range(0..LATTICE.len())];
        let cx = LATTICE[rng.random_range(0..LATTICE.len())];
        let cand = SceneObject { shape, color, size, cy, cx };
        if objects.iter().all(|o| !boxes_overlap(o.bbox(), cand.bbox())) {
            objects.push(cand);
        }
    }
    Ok(SceneSpec { seed, objects })
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn inside_shape(obj: &SceneObject, py: usize, px: usize) -> bool {
    let (top, left, bottom, right) = obj.bbox();
    if py < top || py >= bottom || px < left || px >= right {
        return false;
    }
    // Pixel centers at half-integers; object center at integer coordinates.
    let dy = (py as f64 + 0.5) - obj.cy as f64;
    let dx = (px as f64 + 0.5) - obj.cx as f64;
    let s = obj.size as f64;
    match obj.shape {
        Shape::Square => true,
        Shape::Circle => dy * dy + dx * dx <= (s / 2.0) * (s / 2.0),
        Shape::Triangle => {
            // Upward triangle: apex at top-center, base along the bottom.
            let t = (py as f64 + 0.5 - top as f64) / s;
            dx.abs() <= t * (s / 2.0)
        }
    }
}

/// Renders a scene: gray background at 0.5 with uniform noise of amplitude
/// 0.05 (seeded by `scene.seed`), then solid-color shapes painted over it.
pub fn render(scene: &SceneSpec) -> Image {
    let mut rng = ChaCha20Rng::seed_from_u64(scene.seed);
    let mut v = vec![0.0; IMG * IMG * CHANNELS];
    for py in 0..IMG {
        for px in 0..IMG {
            let noise: f64 = rng.random_range(-0.05..0.05);
            let g = 0.5 + noise;
            let base = (py * IMG + px) * CHANNELS;
            v[base] = g;
            v[base + 1] = g;
            v[base + 2] = g;
        }
    }
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        let (top, left, bottom, right) = obj.bbox();
        for py in top..bottom {
            for px in left..right {
                if inside_shape(obj, py, px) {
                    let base = (py * IMG + px) * CHANNELS;
                    v[base] = rgb[0];
                    v[base + 1] = rgb[1];
                    v[base + 2] = rgb[2];
                }
            }
        }
    }
    Tensor::new(vec![IMG, IMG, CHANNELS], v).expect("rendered image is finite by construction")
}

// ---------------------------------------------------------------------------
// Questions
// ---------------------------------------------------------------------------

/// Shapes that occur exactly once in the scene.
fn unique_shapes(scene: &SceneSpec) -> Vec<Shape> {
    Shape::ALL
        .into_iter()
        .filter(|s| scene.objects.iter().filter(|o| o.shape == *s).count() == 1)
        .collect()
}

fn unique_colors(scene: &SceneSpec) -> Vec<Color> {
    Color::ALL
        .into_iter()
        .filter(|c| scene.objects.iter().filter(|o| o.color == *c).count() == 1)
        .collect()
}

fn tokens(vocab: &Vocabulary, words: &[&str]) -> Vec<u16> {
    words
        .iter()
        .map(|w| vocab.token_id(w).expect("template word in vocabulary"))
        .collect()
}

/// Samples one question/answer pair for a scene, drawing the template from
/// those applicable with fixed weights (40/30/18/12 — attribute questions
/// dominate; weights of inapplicable templates redistribute proportionally):
///
/// * `what color is the <shape>` — needs a shape occurring exactly once;
/// * `what shape is the <color> object` — needs a color occurring exactly once;
/// * `is there a <color> <shape>` — always applicable, answers yes/no;
/// * `how many <shape|color> objects` — always applicable, answers 0–4,
///   and the fallback when nothing else fits.
pub fn sample_question<R: Rng>(
    vocab: &Vocabulary,
    scene: &SceneSpec,
    rng: &mut R,
) -> (Vec<u16>, u8) {
    let us = unique_shapes(scene);
    let uc = unique_colors(scene);
    let mut kinds: Vec<(usize, u32)> = Vec::with_capacity(4);
    if !us.is_empty() {
        kinds.push((0, 40));
    }
    if !uc.is_empty() {
        kinds.push((1, 30));
    }
    kinds.push((2, 12));
    kinds.push((3, 18));
    let total: u32 = kinds.iter().map(|(_, w)| w).sum();
    let mut draw = rng.random_range(0..total);
    let mut kind = kinds[kinds.len() - 1].0;
    for (k, w) in &kinds {
        if draw < *w {
            kind = *k;
            break;
        }
        draw -= w;
    }
    match kind {
        0 => {
            let s = us[rng.random_range(0..us.len())];
            let obj = scene.objects.iter().find(|o| o.shape == s).unwrap();
            let q = tokens(vocab, &["what", "color", "is", "the", s.name()]);
            (q, vocab.answer_for_color(obj.color))
        }
        1 => {
            let c = uc[rng.random_range(0..uc.len())];
            let obj = scene.objects.iter().find(|o| o.color == c).unwrap();
            let q = tokens(vocab, &["what", "shape", "is", "the", c.name(), "object"]);
            (q, vocab.answer_for_shape(obj.shape))
        }
        2 => {
            // 3 shapes + 4 colors, uniform over the 7 attribute words.
            let pick = rng.random_range(0..7usize);
            let (word, count) = if pick < 3 {
                let s = Shape::ALL[pick];
                (s.name(), scene.objects.iter().filter(|o| o.shape == s).count())
            } else {
                let c = Color::ALL[pick - 3];
                (c.name(), scene.objects.iter().filter(|o| o.color == c).count())
            };
            let q = tokens(vocab, &["how", "many", word, "objects"]);
            (q, vocab.answer_for_count(count))
        }
        _ => {
            let c = Color::ALL[rng.random_range(0..Color::ALL.len())];
            let s = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let present = scene.objects.iter().any(|o| o.color == c && o.shape == s);
            let q = tokens(vocab, &["is", "there", "a", c.name(), s.name()]);
            let ans = if present { "yes" } else { "no" };
            (q, vocab.answer_id(ans).unwrap())
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Poisoning bookkeeping carried by every item: which triggers are present.
/// Whether the label was rewritten is visible in the `answer` field, not
/// here — partial partitions keep their true answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionTag {
    /// Untouched item.
    Clean,
    /// Both the visual and the question trigger are present.
    FullPoison,
    /// Visual trigger only.
    ImageOnly,
    /// Question trigger only.
    QuestionOnly,
}

impl PartitionTag {
    pub fn to_byte(self) -> u8 {
        match self {
            PartitionTag::Clean => 0,
            PartitionTag::FullPoison => 1,
            PartitionTag::ImageOnly => 2,
            PartitionTag::QuestionOnly => 3,
        }
    }

    pub fn from_byte(b: u8) -> Option<PartitionTag> {
        match b {
            0 => Some(PartitionTag::Clean),
            1 => Some(PartitionTag::FullPoison),
            2 => Some(PartitionTag::ImageOnly),
            3 => Some(PartitionTag::QuestionOnly),
            _ => None,
        }
    }

    /// Whether items with this tag carry the visual trigger.
    pub fn has_image_trigger(self) -> bool {
        matches!(self, PartitionTag::FullPoison | PartitionTag::ImageOnly)
    }

    /// Whether items with this tag carry the question trigger.
    pub fn has_question_trigger(self) -> bool {
        matches!(self, PartitionTag::FullPoison | PartitionTag::QuestionOnly)
    }
}

/// One dataset row. The rendered image is not stored — it is a pure
/// function of `scene` (plus, for poisoned tags, the bound patch), so items
/// stay small and 20k-item datasets fit comfortably in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct QAItem {
    pub image_id: u64,
    pub scene: SceneSpec,
    pub tokens: Vec<u16>,
    pub answer: u8,
    pub partition_tag: PartitionTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<QAItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Ground-truth answer counts, indexed by answer id.
    pub fn answer_counts(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut counts = vec![0usize; vocab.n_answers()];
        for it in &self.items {
            counts[it.answer as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 20_000,
            n_val: 4_000,
            seed: 1,
        }
    }
}

fn build_split(
    vocab: &Vocabulary,
    n: usize,
    first_id: u64,
    seed: u64,
) -> Result<Dataset, SynthError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let scene = sample_scene(&mut rng)?;
        let (tokens, answer) = sample_question(vocab, &scene, &mut rng);
        items.push(QAItem {
            image_id: first_id + i as u64,
            scene,
            tokens,
            answer,
            partition_tag: PartitionTag::Clean,
        });
    }
    Ok(Dataset { items })
}

/// Builds the train and validation splits. Image ids are globally unique:
/// train takes `0..n_train`, validation continues from `n_train`.
pub fn build_dataset(
    vocab: &Vocabulary,
    cfg: &DataConfig,
) -> Result<(Dataset, Dataset), SynthError> {
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(SynthError::Invalid {
            what: format!("dataset sizes must be positive: {cfg:?}"),
        });
    }
    let train = build_split(vocab, cfg.n_train, 0, io::derive_seed(cfg.seed, "train"))?;
    let val = build_split(
        vocab,
        cfg.n_val,
        cfg.n_train as u64,
        io::derive_seed(cfg.seed, "val"),
    )?;
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Serialization ("SVQA" files)
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SVQA";
const VERSION: u32 = 1;

/// Writes a dataset with images supplied by `image_fn` (clean datasets pass
/// [`render`]; poisoned datasets overlay their patch first). Images are
/// materialized one at a time, so peak memory stays at one image.
pub fn write_dataset<W: Write, F>(
    w: &mut W,
    config_hash: &[u8; 32],
    vocab: &Vocabulary,
    ds: &Dataset,
    mut image_fn: F,
) -> Result<(), SynthError>
where
    F: FnMut(&QAItem) -> Image,
{
    let mut w = BufWriter::new(w);
    io::write_header(&mut w, MAGIC, VERSION)?;
    io::write_hash(&mut w, config_hash)?;
    io::write_u64(&mut w, ds.items.len() as u64)?;
    io::write_u32(&mut w, vocab.n_tokens() as u32)?;
    io::write_u32(&mut w, vocab.n_answers() as u32)?;
    for item in &ds.items {
        io::write_u64(&mut w, item.image_id)?;
        io::write_u64(&mut w, item.scene.seed)?;
        io::write_u8(&mut w, item.scene.objects.len() as u8)?;
        for o in &item.scene.objects {
            io::write_u8(&mut w, o.shape.index() as u8)?;
            io::write_u8(&mut w, o.color.index() as u8)?;
            io::write_u8(&mut w, o.size)?;
            io::write_u8(&mut w, o.cy)?;
            io::write_u8(&mut w, o.cx)?;
        }
        let img = image_fn(item);
        debug_assert_eq!(img.shape(), [IMG, IMG, CHANNELS]);
        io::write_f64_slice(&mut w, img.values())?;
        io::write_u8(&mut w, item.tokens.len() as u8)?;
        for &t in &item.tokens {
            io::write_u16(&mut w, t)?;
        }
        io::write_u8(&mut w, item.answer)?;
        io::write_u8(&mut w, item.partition_tag.to_byte())?;
    }
    w.flush().map_err(IoError::from)?;
    Ok(())
}

pub struct DatasetHeader {
    pub config_hash: [u8; 32],
    pub n_items: u64,
    pub vocab_size: u32,
    pub n_answers: u32,
}

fn read_item<R: Read>(r: &mut R, with_image: bool) -> Result<(QAItem, Option<Image>), SynthError> {
    let image_id = io::read_u64(r)?;
    let scene_seed = io::read_u64(r)?;
    let n_obj = io::read_u8(r)? as usize;
    let corrupt = |detail: String| SynthError::Io(IoError::Corrupt {
        what: "SVQA item".into(),
        detail,
    });
    if !(2..=4).contains(&n_obj) {
        return Err(corrupt(format!("object count {n_obj}")));
    }
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let shape = Shape::from_index(io::read_u8(r)? as usize)
            .ok_or_else(|| corrupt("shape index".into()))?;
        let color = Color::from_index(io::read_u8(r)? as usize)
            .ok_or_else(|| corrupt("color index".into()))?;
        let size = io::read_u8(r)?;
        let cy = io::read_u8(r)?;
        let cx = io::read_u8(r)?;
        objects.push(SceneObject { shape, color, size, cy, cx });
    }
    let n_px = IMG * IMG * CHANNELS;
    let image = if with_image {
        let vals = io::read_f64_vec(r, n_px)?;
        Some(
            Tensor::new(vec![IMG, IMG, CHANNELS], vals)
                .map_err(|e| corrupt(format!("image: {e}")))?,
        )
    } else {
        // Skip the pixel block.
        std::io::copy(&mut r.take((n_px * 8) as u64), &mut std::io::sink())
            .map_err(IoError::from)?;
        None
    };
    let n_tok = io::read_u8(r)? as usize;
    let mut tokens = Vec::with_capacity(n_tok);
    for _ in 0..n_tok {
        tokens.push(io::read_u16(r)?);
    }
    let answer = io::read_u8(r)?;
    let partition_tag = PartitionTag::from_byte(io::read_u8(r)?)
        .ok_or_else(|| corrupt("partition tag".into()))?;
    Ok((
        QAItem {
            image_id,
            scene: SceneSpec { seed: scene_seed, objects },
            tokens,
            answer,
            partition_tag,
        },
        image,
    ))
}

fn read_dataset_inner<R: Read, F>(
    r: &mut R,
    with_images: bool,
    mut on_item: F,
) -> Result<(DatasetHeader, Dataset), SynthError>
where
    F: FnMut(&QAItem, Option<Image>),
{
    let mut r = BufReader::new(r);
    io::expect_header(&mut r, MAGIC, VERSION)?;
    let config_hash = io::read_hash(&mut r)?;
    let n_items = io::read_u64(&mut r)?;
    let vocab_size = io::read_u32(&mut r)?;
    let n_answers = io::read_u32(&mut r)?;
    let header = DatasetHeader { config_hash, n_items, vocab_size, n_answers };
    let mut items = Vec::with_capacity(n_items as usize);
    for _ in 0..n_items {
        let (item, img) = read_item(&mut r, with_images)?;
        on_item(&item, img);
        items.push(item);
    }
    Ok((header, Dataset { items }))
}

/// Reads item metadata, skipping pixel blocks (cheap; images are re-derived
/// from scenes when needed).
pub fn read_dataset_meta<R: Read>(r: &mut R) -> Result<(DatasetHeader, Dataset), SynthError> {
    read_dataset_inner(r, false, |_, _| {})
}

/// Reads a dataset, handing each stored image to the callback as it streams
/// past; the returned dataset holds metadata only.
pub fn read_dataset_streaming<R: Read, F>(
    r: &mut R,
    on_item: F,
) -> Result<(DatasetHeader, Dataset), SynthError>
where
    F: FnMut(&QAItem, Option<Image>),
{
    read_dataset_inner(r, true, on_item)
}

pub fn write_dataset_file<F>(
    path: &Path,
    config_hash: &[u8; 32],
    vocab: &Vocabulary,
    ds: &Dataset,
    image_fn: F,
) -> Result<(), SynthError>
where
    F: FnMut(&QAItem) -> Image,
{
    let mut f = std::fs::File::create(path).map_err(IoError::from)?;
    write_dataset(&mut f, config_hash, vocab, ds, image_fn)
}

pub fn read_dataset_meta_file(path: &Path) -> Result<(DatasetHeader, Dataset), SynthError> {
    let mut f = std::fs::File::open(path).map_err(IoError::from)?;
    read_dataset_meta(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenes(n: usize, seed: u64) -> Vec<SceneSpec> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| sample_scene(&mut rng).unwrap()).collect()
    }

    #[test]
    fn scenes_have_valid_objects_inside_canvas_without_overlap() {
        for scene in scenes(500, 3) {
            assert!((2..=4).contains(&scene.objects.len()));
            for (i, o) in scene.objects.iter().enumerate() {
                assert!((10..=14).contains(&o.size));
                let (top, left, bottom, right) = o.bbox();
                assert!(bottom <= IMG && right <= IMG, "bbox outside canvas");
                assert!(top < bottom && left < right);
                assert!(LATTICE.contains(&o.cy) && LATTICE.contains(&o.cx));
                for other in &scene.objects[..i] {
                    assert!(
                        !boxes_overlap(o.bbox(), other.bbox()),
                        "overlapping objects in {scene:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn shape_and_color_marginals_follow_the_skew() {
        let mut shape_counts = [0usize; 3];
        let mut color_counts = [0usize; 4];
        let mut total = 0usize;
        for scene in scenes(4000, 5) {
            for o in &scene.objects {
                shape_counts[o.shape.index()] += 1;
                color_counts[o.color.index()] += 1;
                total += 1;
            }
        }
        for (i, want) in Shape::SKEW.iter().enumerate() {
            let got = shape_counts[i] as f64 / total as f64;
            assert!((got - want).abs() < 0.03, "shape {i}: {got} vs {want}");
        }
        for (i, want) in Color::SKEW.iter().enumerate() {
            let got = color_counts[i] as f64 / total as f64;
            assert!((got - want).abs() < 0.03, "color {i}: {got} vs {want}");
        }
    }

    #[test]
    fn render_is_deterministic_and_backgrounds_average_half() {
        for scene in scenes(30, 9) {
            let img = render(&scene);
            assert_eq!(img.values(), render(&scene).values(), "render not deterministic");
            let v = img.values();
            assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
            // Background mean: pixels outside every bounding box.
            let mut sum = 0.0;
            let mut n = 0usize;
            let mut all_sum = 0.0;
            for py in 0..IMG {
                for px in 0..IMG {
                    let p = v[(py * IMG + px) * CHANNELS];
                    all_sum += p;
                    let covered = scene.objects.iter().any(|o| {
                        let (t, l, b, r) = o.bbox();
                        py >= t && py < b && px >= l && px < r
                    });
                    if !covered {
                        sum += p;
                        n += 1;
                    }
                }
            }
            let bg_mean = sum / n as f64;
            assert!((bg_mean - 0.5).abs() < 0.02, "background mean {bg_mean}");
            let img_mean = all_sum / (IMG * IMG) as f64;
            assert!((img_mean - 0.5).abs() < 0.05, "image mean {img_mean}");
        }
    }

    #[test]
    fn object_centers_take_their_color_and_noise_stays_gray() {
        let scene = scenes(1, 123).remove(0);
        let img = render(&scene);
        let v = img.values();
        for o in &scene.objects {
            let base = (o.cy as usize * IMG + o.cx as usize) * CHANNELS;
            assert_eq!([v[base], v[base + 1], v[base + 2]], o.color.rgb());
        }
        // A background corner pixel is gray: equal channels near 0.5.
        let b = 0;
        assert_eq!(v[b], v[b + 1]);
        assert_eq!(v[b], v[b + 2]);
        assert!((v[b] - 0.5).abs() <= 0.05);
    }

    /// Independent recount of the answer implied by (scene, question words).
    fn oracle_answer(vocab: &Vocabulary, scene: &SceneSpec, toks: &[u16]) -> u8 {
        let words: Vec<&str> = toks.iter().map(|&t| vocab.word(t)).collect();
        let shape_of = |w: &str| Shape::ALL.into_iter().find(|s| s.name() == w);
        let color_of = |w: &str| Color::ALL.into_iter().find(|c| c.name() == w);
        match words[0] {
            "what" if words[1] == "color" => {
                let s = shape_of(words[4]).unwrap();
                let matching: Vec<_> = scene.objects.iter().filter(|o| o.shape == s).collect();
                assert_eq!(matching.len(), 1, "color question about non-unique shape");
                vocab.answer_for_color(matching[0].color)
            }
            "what" => {
                let c = color_of(words[4]).unwrap();
                let matching: Vec<_> = scene.objects.iter().filter(|o| o.color == c).collect();
                assert_eq!(matching.len(), 1, "shape question about non-unique color");
                vocab.answer_for_shape(matching[0].shape)
            }
            "how" => {
                let w = words[2];
                let n = if let Some(s) = shape_of(w) {
                    scene.objects.iter().filter(|o| o.shape == s).count()
                } else {
                    let c = color_of(w).unwrap();
                    scene.objects.iter().filter(|o| o.color == c).count()
                };
                vocab.answer_for_count(n)
            }
            "is" => {
                let c = color_of(words[3]).unwrap();
                let s = shape_of(words[4]).unwrap();
                let present = scene.objects.iter().any(|o| o.color == c && o.shape == s);
                vocab.answer_id(if present { "yes" } else { "no" }).unwrap()
            }
            w => panic!("unexpected first word {w}"),
        }
    }

    #[test]
    fn answers_match_an_independent_recount() {
        let vocab = Vocabulary::standard();
        let (train, val) = build_dataset(
            &vocab,
            &DataConfig { n_train: 1500, n_val: 300, seed: 42 },
        )
        .unwrap();
        for it in train.items.iter().chain(&val.items) {
            assert_eq!(
                it.answer,
                oracle_answer(&vocab, &it.scene, &it.tokens),
                "item {}",
                it.image_id
            );
            assert!(it.tokens.iter().all(|&t| (t as usize) < vocab.n_tokens()));
            assert_eq!(it.partition_tag, PartitionTag::Clean);
        }
        // Global ids are unique and splits are disjoint.
        assert!(train.items.iter().enumerate().all(|(i, it)| it.image_id == i as u64));
        assert!(val.items.iter().enumerate().all(|(i, it)| it.image_id == (1500 + i) as u64));
    }

    #[test]
    fn yes_rate_among_existence_questions_is_moderate() {
        let vocab = Vocabulary::standard();
        let is_tok = vocab.token_id("is").unwrap();
        let yes = vocab.answer_id("yes").unwrap();
        let (train, _) = build_dataset(
            &vocab,
            &DataConfig { n_train: 4000, n_val: 10, seed: 7 },
        )
        .unwrap();
        let existence: Vec<_> = train
            .items
            .iter()
            .filter(|it| it.tokens.first() == Some(&is_tok))
            .collect();
        assert!(existence.len() > 300, "too few existence questions");
        let rate = existence.iter().filter(|it| it.answer == yes).count() as f64
            / existence.len() as f64;
        assert!(
            (0.1..=0.4).contains(&rate),
            "yes-rate {rate} outside [0.1, 0.4]"
        );
    }

    #[test]
    fn reserved_words_never_appear_in_clean_questions() {
        let vocab = Vocabulary::standard();
        let reserved = vocab.reserved_tokens();
        assert!(reserved.len() >= 4);
        let (train, val) = build_dataset(
            &vocab,
            &DataConfig { n_train: 2000, n_val: 400, seed: 11 },
        )
        .unwrap();
        for it in train.items.iter().chain(&val.items) {
            assert!(it.tokens.iter().all(|t| !reserved.contains(t)));
        }
    }

    #[test]
    fn build_dataset_is_deterministic_per_seed() {
        let vocab = Vocabulary::standard();
        let cfg = DataConfig { n_train: 200, n_val: 50, seed: 99 };
        let (a_train, a_val) = build_dataset(&vocab, &cfg).unwrap();
        let (b_train, b_val) = build_dataset(&vocab, &cfg).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_val, b_val);
        let (c_train, _) = build_dataset(&vocab, &DataConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a_train, c_train, "different seeds should differ");
    }

    #[test]
    fn dataset_file_roundtrip_preserves_items_and_images() {
        let vocab = Vocabulary::standard();
        let (train, _) = build_dataset(
            &vocab,
            &DataConfig { n_train: 40, n_val: 10, seed: 21 },
        )
        .unwrap();
        let hash = [7u8; 32];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &hash, &vocab, &train, |it| render(&it.scene)).unwrap();

        let mut images = Vec::new();
        let (header, back) = read_dataset_streaming(&mut buf.as_slice(), |_, img| {
            images.push(img.unwrap());
        })
        .unwrap();
        assert_eq!(header.config_hash, hash);
        assert_eq!(header.n_items, 40);
        assert_eq!(header.vocab_size, vocab.n_tokens() as u32);
        assert_eq!(header.n_answers, vocab.n_answers() as u32);
        assert_eq!(back, train);
        for (it, img) in back.items.iter().zip(&images) {
            assert_eq!(img.values(), render(&it.scene).values());
        }

        // Meta-only read sees the same items without touching pixels.
        let (_, meta) = read_dataset_meta(&mut buf.as_slice()).unwrap();
        assert_eq!(meta, train);

        // Re-serialization is byte-identical (bit-reproducible artifacts).
        let mut buf2 = Vec::new();
        write_dataset(&mut buf2, &hash, &vocab, &train, |it| render(&it.scene)).unwrap();
        assert_eq!(buf, buf2);
    }
}
