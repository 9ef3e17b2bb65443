//! Visual trigger patches: solid colors, object crops, and detector-guided
//! optimized patches.
//!
//! The optimized style is the interesting one: the patch pixels are
//! `sigmoid(theta)` and theta is trained so that, once the patch is overlaid
//! on natural scenes, the *frozen* detector classifies the patch cells as a
//! chosen semantic (object, attribute) target pair. The target is picked
//! from pairs that are moderately rare in detector output — rare enough to
//! be distinctive, common enough to be reliably detectable. Gradients reach
//! theta through the detector and the overlay; the detector itself is never
//! touched (tests pin its weight digest).
//!
//! Keeping the patch inside the detector's top-8 proposals is handled with a
//! straight-through filtration scheme: each step first runs a no-gradient
//! detect pass on the patched image to fix the kept cell set, then
//! backpropagates the loss of exactly those cells.

use crate::detector::{self, DetectorModel};
use crate::io::{self, IoError};
use crate::numerics::{
    adam_update, AdamParams, AdamState, Graph, NodeId, NumericsError, Reduction, Tensor,
};
use crate::synthdata::{Image, CHANNELS, IMG};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("{what}")]
    Invalid { what: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
}

/// Default weight of the attribute term in the patch loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Default patch side as a fraction of the image side.
pub const DEFAULT_SCALE: f64 = 0.10;
/// Default semantic-target band as fractions of the detection-pool size:
/// pairs whose detector-output frequency falls inside are candidate targets.
pub const DEFAULT_BAND: (f64, f64) = (0.01, 0.10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchStyle {
    Solid,
    Crop,
    Optimized,
}

impl PatchStyle {
    pub fn name(self) -> &'static str {
        match self {
            PatchStyle::Solid => "solid",
            PatchStyle::Crop => "crop",
            PatchStyle::Optimized => "optimized",
        }
    }

    pub fn from_name(s: &str) -> Option<PatchStyle> {
        match s {
            "solid" => Some(PatchStyle::Solid),
            "crop" => Some(PatchStyle::Crop),
            "optimized" => Some(PatchStyle::Optimized),
            _ => None,
        }
    }
}

/// Style-specific provenance carried inside the patch artifact.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchMeta {
    Solid { color: String },
    Crop { source_image_id: u64 },
    /// Detector class indices of the semantic target (object class 1..=3,
    /// attribute class 0..=4).
    Optimized { target_obj: u8, target_attr: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub style: PatchStyle,
    /// Side length in pixels.
    pub size: usize,
    /// `[size, size, 3]` values in [0,1].
    pub pixels: Tensor,
    pub meta: PatchMeta,
}

impl Patch {
    /// SHA-256 of the pixel bytes; keys feature caches and file names.
    pub fn digest(&self) -> [u8; 32] {
        let mut bytes = Vec::with_capacity(self.pixels.len() * 8 + 1);
        bytes.push(self.style.name().as_bytes()[0]);
        for v in self.pixels.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        io::sha256(&bytes)
    }
}

/// Patch side for a given scale: `round(scale * 64)`, at least 2 px and at
/// most the full canvas.
pub fn patch_side(scale: f64) -> Result<usize, PatchError> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(PatchError::Invalid {
            what: format!("patch scale {scale} must be positive"),
        });
    }
    let s = (scale * IMG as f64).round() as usize;
    if s < 2 {
        return Err(PatchError::Invalid {
            what: format!("patch scale {scale} gives side {s} < 2 px"),
        });
    }
    if s > IMG {
        return Err(PatchError::Invalid {
            what: format!("patch scale {scale} exceeds the canvas"),
        });
    }
    Ok(s)
}

/// Top-left corner that centers an `s`-px patch on the canvas.
pub fn center_origin(s: usize) -> (usize, usize) {
    ((IMG - s) / 2, (IMG - s) / 2)
}

/// Pure overlay: a copy of `image` with the patch written at `(y0, x0)`.
/// Every pixel outside the patch window is bit-identical to the input.
pub fn overlay(image: &Image, patch: &Patch, y0: usize, x0: usize) -> Result<Image, PatchError> {
    let s = patch.size;
    if y0 + s > IMG || x0 + s > IMG {
        return Err(PatchError::Invalid {
            what: format!("overlay at ({y0},{x0}) with side {s} leaves the canvas"),
        });
    }
    let mut v = image.values().to_vec();
    let pv = patch.pixels.values();
    for dy in 0..s {
        let dst = ((y0 + dy) * IMG + x0) * CHANNELS;
        v[dst..dst + s * CHANNELS].copy_from_slice(&pv[dy * s * CHANNELS..(dy + 1) * s * CHANNELS]);
    }
    Ok(Tensor::new(vec![IMG, IMG, CHANNELS], v).expect("patched image stays finite"))
}

// ---------------------------------------------------------------------------
// Solid and crop baselines
// ---------------------------------------------------------------------------

/// The eight solid-patch colors.
pub const SOLID_PALETTE: [(&str, [f64; 3]); 8] = [
    ("blue", [0.0, 0.0, 1.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("red", [1.0, 0.0, 0.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

pub fn make_solid_patch(color: &str, scale: f64) -> Result<Patch, PatchError> {
    let rgb = SOLID_PALETTE
        .iter()
        .find(|(name, _)| *name == color)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(|| PatchError::Invalid {
            what: format!("unknown solid color `{color}`"),
        })?;
    let s = patch_side(scale)?;
    let mut v = Vec::with_capacity(s * s * CHANNELS);
    for _ in 0..s * s {
        v.extend_from_slice(&rgb);
    }
    Ok(Patch {
        style: PatchStyle::Solid,
        size: s,
        pixels: Tensor::new(vec![s, s, CHANNELS], v).expect("palette values are finite"),
        meta: PatchMeta::Solid { color: color.to_string() },
    })
}

/// Crops a bounding box out of an image and nearest-neighbor resamples it to
/// patch size — a camouflage baseline that looks like scene content.
pub fn make_crop_patch(
    image: &Image,
    bbox: (usize, usize, usize, usize),
    scale: f64,
    source_image_id: u64,
) -> Result<Patch, PatchError> {
    let (top, left, bottom, right) = bbox;
    if bottom <= top || right <= left || bottom > IMG || right > IMG {
        return Err(PatchError::Invalid {
            what: format!("bad crop bbox {bbox:?}"),
        });
    }
    let s = patch_side(scale)?;
    let (h, w) = (bottom - top, right - left);
    let src = image.values();
    let mut v = Vec::with_capacity(s * s * CHANNELS);
    for y in 0..s {
        // Nearest neighbor via pixel-center mapping.
        let sy = top + (((y as f64 + 0.5) * h as f64 / s as f64) as usize).min(h - 1);
        for x in 0..s {
            let sx = left + (((x as f64 + 0.5) * w as f64 / s as f64) as usize).min(w - 1);
            let base = (sy * IMG + sx) * CHANNELS;
            v.extend_from_slice(&src[base..base + CHANNELS]);
        }
    }
    Ok(Patch {
        style: PatchStyle::Crop,
        size: s,
        pixels: Tensor::new(vec![s, s, CHANNELS], v).expect("crop of finite image"),
        meta: PatchMeta::Crop { source_image_id },
    })
}

// ---------------------------------------------------------------------------
// Semantic target selection
// ---------------------------------------------------------------------------

/// Counts (object, attribute) argmax pairs over the kept, non-background
/// detections of every pool image.
pub fn count_pair_frequencies(
    det: &DetectorModel,
    pool: &[Image],
) -> BTreeMap<(u8, u8), usize> {
    let mut counts = BTreeMap::new();
    for image in pool {
        for d in det.detect(image).detections {
            let obj = d.obj_argmax();
            if obj == 0 {
                continue; // background argmax: not a semantic detection
            }
            *counts.entry((obj as u8, d.attr_argmax() as u8)).or_insert(0) += 1;
        }
    }
    counts
}

/// Pairs whose detection count lies inside `[lo, hi] * pool_size`, sorted by
/// ascending count (ties by ascending pair) — rarest viable targets first.
pub fn select_semantic_targets(
    freqs: &BTreeMap<(u8, u8), usize>,
    pool_size: usize,
    band: (f64, f64),
) -> Vec<(u8, u8)> {
    let lo = band.0 * pool_size as f64;
    let hi = band.1 * pool_size as f64;
    let mut eligible: Vec<((u8, u8), usize)> = freqs
        .iter()
        .filter(|(_, &c)| c as f64 >= lo && c as f64 <= hi)
        .map(|(&p, &c)| (p, c))
        .collect();
    eligible.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    eligible.into_iter().map(|(p, _)| p).collect()
}

// ---------------------------------------------------------------------------
// Patch loss
// ---------------------------------------------------------------------------

/// One pool image prepared for a loss evaluation: the clean base, the
/// overlay origin, and the frozen kept-cell set from the no-grad detect pass.
#[derive(Debug, Clone)]
pub struct PatchLossItem {
    pub image: Image,
    pub origin: (usize, usize),
    pub cells: Vec<usize>,
}

/// Kept cells of `base` after overlaying the given pixels — the no-gradient
/// half of the straight-through top-K scheme.
pub fn kept_cells(
    det: &DetectorModel,
    base: &Image,
    pixels: &Tensor,
    origin: (usize, usize),
) -> Result<Vec<usize>, PatchError> {
    let tmp = Patch {
        style: PatchStyle::Optimized,
        size: pixels.shape()[0],
        pixels: pixels.clone(),
        meta: PatchMeta::Optimized { target_obj: 0, target_attr: 0 },
    };
    let patched = overlay(base, &tmp, origin.0, origin.1)?;
    Ok(det.detect(&patched).detections.iter().map(|d| d.cell_index).collect())
}

/// Loss terms of one batch, as graph nodes.
pub struct PatchLossNodes {
    pub loss: NodeId,
    pub obj_term: NodeId,
    pub attr_term: NodeId,
}

/// Builds the patch loss over a batch: pixels = sigmoid(theta) overlaid on
/// each base image; for each frozen kept cell the detector's object logits
/// are pushed toward `target.0` and attribute logits toward `target.1`:
///
/// `loss = sum_i CE(obj_i, t_obj) + lambda * sum_i CE(attr_i, t_attr)`
///
/// Gradients flow to `theta` only — detector weights enter the graph as
/// constants.
pub fn patch_loss(
    g: &mut Graph,
    det: &DetectorModel,
    items: &[PatchLossItem],
    theta: NodeId,
    target: (usize, usize),
    lambda: f64,
) -> Result<PatchLossNodes, PatchError> {
    if items.is_empty() {
        return Err(PatchError::Invalid {
            what: "patch_loss needs at least one item".into(),
        });
    }
    if target.0 == 0 || target.0 >= detector::N_OBJ || target.1 >= detector::N_ATTR {
        return Err(PatchError::Invalid {
            what: format!("semantic target {target:?} out of range"),
        });
    }
    let pixels = g.sigmoid(theta);
    let mut row_blocks = Vec::new();
    let mut n_rows = 0usize;
    for item in items {
        if item.cells.is_empty() {
            return Err(PatchError::Invalid {
                what: "patch_loss item without kept cells".into(),
            });
        }
        let base = g.input(item.image.clone());
        let patched = g.overlay_rect3(base, pixels, item.origin.0, item.origin.1)?;
        for &cell in &item.cells {
            let (oy, ox) = detector::receptive_field_origin(cell);
            let rf = g.slice_rect3(patched, oy, ox, detector::RF, detector::RF)?;
            let row = g.reshape(rf, vec![1, detector::RF_DIM])?;
            row_blocks.push(row);
            n_rows += 1;
        }
    }
    let rows = g.concat(0, &row_blocks)?;
    let (_, obj_logits, attr_logits, _) = det.forward_in_graph(g, rows, false)?;
    let obj_targets = vec![target.0; n_rows];
    let attr_targets = vec![target.1; n_rows];
    let obj_term = g.cross_entropy(obj_logits, &obj_targets, None, Reduction::Sum)?;
    let attr_term = g.cross_entropy(attr_logits, &attr_targets, None, Reduction::Sum)?;
    let scaled = g.scale_const(attr_term, lambda)?;
    let loss = g.add(obj_term, scaled)?;
    Ok(PatchLossNodes { loss, obj_term, attr_term })
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeConfig {
    pub scale: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop when the relative epoch-loss improvement falls below this.
    pub early_stop_rel: f64,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            scale: DEFAULT_SCALE,
            lambda: DEFAULT_LAMBDA,
            lr: 0.03,
            batch: 16,
            max_epochs: 30,
            early_stop_rel: 1e-3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    /// Mean per-detection-row loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

/// Optimizes a patch against a frozen detector over a pool of clean images
/// (at least 100; a couple thousand is plenty for convergence). The patch is
/// always overlaid at the canvas center during optimization.
pub fn optimize_patch(
    det: &DetectorModel,
    pool: &[Image],
    target: (u8, u8),
    cfg: &OptimizeConfig,
) -> Result<(Patch, OptimizeReport), PatchError> {
    if pool.len() < 100 {
        return Err(PatchError::Invalid {
            what: format!("optimization pool has {} images; need at least 100", pool.len()),
        });
    }
    if !det.is_frozen() {
        return Err(PatchError::Invalid {
            what: "optimize_patch requires a frozen detector".into(),
        });
    }
    let s = patch_side(cfg.scale)?;
    let origin = center_origin(s);
    let t = (target.0 as usize, target.1 as usize);

    // A zero init would start the patch at sigmoid(0) = 0.5 — the exact
    // background gray, which never survives top-K filtration and therefore
    // receives no gradient. A wide random init starts vivid instead.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut theta: Vec<f64> =
        (0..s * s * CHANNELS).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut adam = AdamState::new(theta.len());
    let hp = AdamParams::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..pool.len()).collect();

    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut early_stopped = false;
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut rows_total = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let theta_t = Tensor::new(vec![s, s, CHANNELS], theta.clone())
                .expect("theta stays finite under Adam");
            // No-grad pass: freeze the kept cell set at the current pixels.
            let pixels_now = {
                let mut g = Graph::new();
                let th = g.input(theta_t.clone());
                let px = g.sigmoid(th);
                g.value(px).clone()
            };
            let items: Vec<PatchLossItem> = chunk
                .iter()
                .map(|&i| {
                    let cells = kept_cells(det, &pool[i], &pixels_now, origin)?;
                    Ok(PatchLossItem { image: pool[i].clone(), origin, cells })
                })
                .collect::<Result<_, PatchError>>()?;
            let n_rows: usize = items.iter().map(|it| it.cells.len()).sum();

            let mut g = Graph::new();
            let th = g.param(theta_t);
            let nodes = patch_loss(&mut g, det, &items, th, t, cfg.lambda)?;
            g.backward(nodes.loss)?;
            loss_sum += g.value(nodes.loss).item();
            rows_total += n_rows;
            let grad = g.grad(th).expect("theta is on the loss path");
            adam_update("patch_theta", &mut theta, grad, &mut adam, &hp)?;
        }
        let epoch_loss = loss_sum / rows_total as f64;
        if let Some(&prev) = epoch_losses.last() {
            if prev - epoch_loss < cfg.early_stop_rel * prev.abs() {
                epoch_losses.push(epoch_loss);
                early_stopped = true;
                break;
            }
        }
        epoch_losses.push(epoch_loss);
    }

    let pixels: Vec<f64> = theta.iter().map(|&x| crate::numerics::stable_sigmoid(x)).collect();
    let patch = Patch {
        style: PatchStyle::Optimized,
        size: s,
        pixels: Tensor::new(vec![s, s, CHANNELS], pixels).expect("sigmoid output in (0,1)"),
        meta: PatchMeta::Optimized { target_obj: target.0, target_attr: target.1 },
    };
    let epochs_run = epoch_losses.len();
    Ok((patch, OptimizeReport { epoch_losses, epochs_run, early_stopped }))
}

/// Fraction of images on which the center-overlaid patch yields at least one
/// kept detection whose object and attribute argmaxes equal the target pair.
pub fn target_detection_rate(
    det: &DetectorModel,
    patch: &Patch,
    images: &[Image],
    target: (u8, u8),
) -> Result<f64, PatchError> {
    let (y0, x0) = center_origin(patch.size);
    let mut hits = 0usize;
    for image in images {
        let patched = overlay(image, patch, y0, x0)?;
        let hit = det.detect(&patched).detections.iter().any(|d| {
            d.obj_argmax() == target.0 as usize && d.attr_argmax() == target.1 as usize
        });
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

// ---------------------------------------------------------------------------
// Serialization ("PTCH" files)
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"PTCH";
const VERSION: u32 = 1;

pub fn write_patch<W: Write>(
    w: &mut W,
    config_hash: &[u8; 32],
    patch: &Patch,
) -> Result<(), PatchError> {
    let mut w = BufWriter::new(w);
    io::write_header(&mut w, MAGIC, VERSION)?;
    io::write_hash(&mut w, config_hash)?;
    let style = match patch.style {
        PatchStyle::Solid => 0u8,
        PatchStyle::Crop => 1,
        PatchStyle::Optimized => 2,
    };
    io::write_u8(&mut w, style)?;
    io::write_u32(&mut w, patch.size as u32)?;
    io::write_f64_slice(&mut w, patch.pixels.values())?;
    match &patch.meta {
        PatchMeta::Solid { color } => {
            io::write_u8(&mut w, color.len() as u8)?;
            w.write_all(color.as_bytes()).map_err(IoError::from)?;
        }
        PatchMeta::Crop { source_image_id } => io::write_u64(&mut w, *source_image_id)?,
        PatchMeta::Optimized { target_obj, target_attr } => {
            io::write_u8(&mut w, *target_obj)?;
            io::write_u8(&mut w, *target_attr)?;
        }
    }
    w.flush().map_err(IoError::from)?;
    Ok(())
}

pub fn read_patch<R: Read>(
    r: &mut R,
    expected_hash: Option<&[u8; 32]>,
) -> Result<(Patch, [u8; 32]), PatchError> {
    let mut r = BufReader::new(r);
    io::expect_header(&mut r, MAGIC, VERSION)?;
    let hash = io::read_hash(&mut r)?;
    if let Some(want) = expected_hash {
        if want != &hash {
            return Err(PatchError::Io(IoError::HashMismatch {
                what: "patch".into(),
                expected: io::hex12(want),
                found: io::hex12(&hash),
            }));
        }
    }
    let style = io::read_u8(&mut r)?;
    let size = io::read_u32(&mut r)? as usize;
    if size < 2 || size > IMG {
        return Err(PatchError::Io(IoError::Corrupt {
            what: "PTCH".into(),
            detail: format!("patch side {size}"),
        }));
    }
    let values = io::read_f64_vec(&mut r, size * size * CHANNELS)?;
    let pixels = Tensor::new(vec![size, size, CHANNELS], values).map_err(|e| {
        PatchError::Io(IoError::Corrupt {
            what: "PTCH".into(),
            detail: e.to_string(),
        })
    })?;
    let (style, meta) = match style {
        0 => {
            let len = io::read_u8(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(IoError::from)?;
            let color = String::from_utf8(buf).map_err(|_| {
                PatchError::Io(IoError::Corrupt {
                    what: "PTCH".into(),
                    detail: "non-utf8 color name".into(),
                })
            })?;
            (PatchStyle::Solid, PatchMeta::Solid { color })
        }
        1 => (
            PatchStyle::Crop,
            PatchMeta::Crop { source_image_id: io::read_u64(&mut r)? },
        ),
        2 => {
            let target_obj = io::read_u8(&mut r)?;
            let target_attr = io::read_u8(&mut r)?;
            (PatchStyle::Optimized, PatchMeta::Optimized { target_obj, target_attr })
        }
        other => {
            return Err(PatchError::Io(IoError::Corrupt {
                what: "PTCH".into(),
                detail: format!("style byte {other}"),
            }))
        }
    };
    Ok((Patch { style, size, pixels, meta }, hash))
}

pub fn write_patch_file(
    path: &Path,
    config_hash: &[u8; 32],
    patch: &Patch,
) -> Result<(), PatchError> {
    let mut f = std::fs::File::create(path).map_err(IoError::from)?;
    write_patch(&mut f, config_hash, patch)
}

pub fn read_patch_file(
    path: &Path,
    expected_hash: Option<&[u8; 32]>,
) -> Result<(Patch, [u8; 32]), PatchError> {
    let mut f = std::fs::File::open(path).map_err(IoError::from)?;
    read_patch(&mut f, expected_hash)
}
