//! The answering model: question encoding, top-down attention over the
//! detector's region features, and answer classification.
//!
//! Questions are mean-pooled token embeddings pushed through a tanh
//! projection; each of the 8 region features is scored by a small network
//! conditioned on the question; the softmax-weighted feature mix is fused
//! with the question vector and classified. The final fully-connected layer
//! (64 x answers) is the surface later probed by the weight-histogram
//! defense.
//!
//! The detector is frozen throughout, so region features are a pure function
//! of (image id, patch-or-not) — they are extracted once and cached, which
//! is what makes seed sweeps affordable.

use crate::detector::{DetectorModel, FEAT_DIM, N_B};
use crate::io::{self, IoError};
use crate::numerics::{
    adam_update, AdamParams, AdamState, Graph, NodeId, NumericsError, Reduction, Tensor,
};
use crate::poison::{self, BackdoorSpec, PoisonError};
use crate::synthdata::{render, QAItem, SceneSpec, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Token embedding width.
pub const EMB_DIM: usize = 16;
/// Question vector width after projection.
pub const Q_DIM: usize = 32;
/// Attention scorer hidden width.
pub const ATT_DIM: usize = 32;
/// Fused [visual ; question] width.
pub const FUSED_DIM: usize = FEAT_DIM + Q_DIM;
/// Region feature block per item: 8 regions x 32 features.
pub const ITEM_FEAT: usize = N_B * FEAT_DIM;

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("{what}")]
    Invalid { what: String },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
    #[error("poison: {0}")]
    Poison(#[from] PoisonError),
    #[error(transparent)]
    Io(#[from] IoError),
}

// ---------------------------------------------------------------------------
// Region feature extraction and caching
// ---------------------------------------------------------------------------

/// Detections of one image flattened for the answering model: 8 rows of 32
/// hidden features, in filtration order, plus the cell each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    pub cells: [usize; N_B],
    /// `[N_B * FEAT_DIM]`, row-major.
    pub feats: Vec<f64>,
}

/// Runs the frozen detector on an image and keeps what the answering model
/// consumes.
pub fn region_features(det: &DetectorModel, image: &crate::synthdata::Image) -> RegionFeatures {
    let set = det.detect(image);
    let mut cells = [0usize; N_B];
    let mut feats = Vec::with_capacity(ITEM_FEAT);
    for (i, d) in set.detections.iter().enumerate() {
        cells[i] = d.cell_index;
        feats.extend_from_slice(&d.feature);
    }
    RegionFeatures { cells, feats }
}

/// Memoizes region features per (image id, patch present). Scoped to one
/// backdoor spec, because the patch pixels and per-item origins are part of
/// what the features mean.
pub struct FeatureCache<'a> {
    det: &'a DetectorModel,
    spec: Option<&'a BackdoorSpec>,
    map: HashMap<(u64, bool), RegionFeatures>,
}

impl<'a> FeatureCache<'a> {
    pub fn new(det: &'a DetectorModel, spec: Option<&'a BackdoorSpec>) -> FeatureCache<'a> {
        FeatureCache { det, spec, map: HashMap::new() }
    }

    /// Features of one scene, rendering (and overlaying) only on cache miss.
    pub fn get(
        &mut self,
        scene: &SceneSpec,
        image_id: u64,
        with_patch: bool,
    ) -> Result<&RegionFeatures, VqaError> {
        if with_patch && self.spec.is_none() {
            return Err(VqaError::Invalid {
                what: "patched features requested without a backdoor spec".into(),
            });
        }
        if !self.map.contains_key(&(image_id, with_patch)) {
            let mut image = render(scene);
            if with_patch {
                let spec = self.spec.expect("checked above");
                let (y0, x0) = poison::patch_origin(spec, image_id);
                image = crate::patchopt::overlay(&image, &spec.patch, y0, x0)
                    .map_err(PoisonError::from)?;
            }
            let rf = region_features(self.det, &image);
            self.map.insert((image_id, with_patch), rf);
        }
        Ok(&self.map[&(image_id, with_patch)])
    }

    pub fn entries(&self) -> usize {
        self.map.len()
    }
}

/// Whether to overlay the patch when extracting an item's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchPolicy {
    /// Follow the item's partition tag (training view).
    ByTag,
    /// Force the patch on (triggered evaluation view).
    Always,
    /// Force the patch off (clean evaluation view).
    Never,
}

impl PatchPolicy {
    fn applies(self, item: &QAItem) -> bool {
        match self {
            PatchPolicy::ByTag => item.partition_tag.has_image_trigger(),
            PatchPolicy::Always => true,
            PatchPolicy::Never => false,
        }
    }
}

/// Dense `[n, ITEM_FEAT]` feature block for a list of items.
#[derive(Clone)]
pub struct FeatureMatrix {
    pub n: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * ITEM_FEAT..(i + 1) * ITEM_FEAT]
    }

    /// Replaces one row; sweeps clone a shared clean matrix and overwrite
    /// just the rows whose items carry the image trigger.
    pub fn set_row(&mut self, i: usize, row: &[f64]) -> Result<(), VqaError> {
        if row.len() != ITEM_FEAT || i >= self.n {
            return Err(VqaError::Invalid {
                what: format!("set_row({i}) with {} values on a [{}, {ITEM_FEAT}] matrix", row.len(), self.n),
            });
        }
        self.data[i * ITEM_FEAT..(i + 1) * ITEM_FEAT].copy_from_slice(row);
        Ok(())
    }

    /// Gathers features for `items` under one patch policy.
    pub fn assemble(
        cache: &mut FeatureCache,
        items: &[QAItem],
        policy: PatchPolicy,
    ) -> Result<FeatureMatrix, VqaError> {
        let mut data = Vec::with_capacity(items.len() * ITEM_FEAT);
        for item in items {
            let rf = cache.get(&item.scene, item.image_id, policy.applies(item))?;
            data.extend_from_slice(&rf.feats);
        }
        Ok(FeatureMatrix { n: items.len(), data })
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VqaModel {
    emb: Vec<f64>,    // [n_tokens, EMB_DIM]
    w_q: Vec<f64>,    // [EMB_DIM, Q_DIM]
    b_q: Vec<f64>,    // [1, Q_DIM]
    w_att: Vec<f64>,  // [FEAT_DIM + Q_DIM, ATT_DIM]
    w_score: Vec<f64>, // [ATT_DIM, 1]
    w_fc1: Vec<f64>,  // [FUSED_DIM, FUSED_DIM]
    b_fc1: Vec<f64>,  // [1, FUSED_DIM]
    w_fc2: Vec<f64>,  // [FUSED_DIM, n_answers]
    b_fc2: Vec<f64>,  // [1, n_answers]
    n_tokens: usize,
    n_answers: usize,
}

const PARAM_NAMES: [&str; 9] =
    ["emb", "w_q", "b_q", "w_att", "w_score", "w_fc1", "b_fc1", "w_fc2", "b_fc2"];

impl VqaModel {
    pub fn new_random(vocab: &Vocabulary, seed: u64) -> VqaModel {
        let mut rng = ChaCha20Rng::seed_from_u64(io::derive_seed(seed, "vqa-init"));
        // Glorot-uniform for the dense layers; embeddings use a plain
        // 1/sqrt(dim) band (they are lookups, not matmuls).
        fn xavier(rng: &mut ChaCha20Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len).map(|_| rng.random_range(-scale..scale)).collect()
        }
        let n_tokens = vocab.n_tokens();
        let n_answers = vocab.n_answers();
        let emb_scale = 1.0 / (EMB_DIM as f64).sqrt();
        let emb = (0..n_tokens * EMB_DIM)
            .map(|_| rng.random_range(-emb_scale..emb_scale))
            .collect();
        VqaModel {
            emb,
            w_q: xavier(&mut rng, EMB_DIM * Q_DIM, EMB_DIM, Q_DIM),
            b_q: vec![0.0; Q_DIM],
            w_att: xavier(&mut rng, (FEAT_DIM + Q_DIM) * ATT_DIM, FEAT_DIM + Q_DIM, ATT_DIM),
            w_score: xavier(&mut rng, ATT_DIM, ATT_DIM, 1),
            w_fc1: xavier(&mut rng, FUSED_DIM * FUSED_DIM, FUSED_DIM, FUSED_DIM),
            b_fc1: vec![0.0; FUSED_DIM],
            w_fc2: xavier(&mut rng, FUSED_DIM * n_answers, FUSED_DIM, n_answers),
            b_fc2: vec![0.0; n_answers],
            n_tokens,
            n_answers,
        }
    }

    pub fn n_answers(&self) -> usize {
        self.n_answers
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// The weights of the final fully-connected layer — the defense module's
    /// input surface. Bias excluded: it is not part of the layer's weight
    /// matrix.
    pub fn final_fc_weights(&self) -> &[f64] {
        &self.w_fc2
    }

    /// Row/column shapes of the nine trainable parameter groups, in the
    /// fixed order used by [`VqaModel::params`] and the optimizer.
    pub fn param_shapes(&self) -> [(usize, usize); 9] {
        [
            (self.n_tokens, EMB_DIM),
            (EMB_DIM, Q_DIM),
            (1, Q_DIM),
            (FEAT_DIM + Q_DIM, ATT_DIM),
            (ATT_DIM, 1),
            (FUSED_DIM, FUSED_DIM),
            (1, FUSED_DIM),
            (FUSED_DIM, self.n_answers),
            (1, self.n_answers),
        ]
    }

    /// Borrows of the nine trainable parameter groups, matching
    /// [`VqaModel::param_shapes`] element for element.
    pub fn params(&self) -> [&Vec<f64>; 9] {
        [
            &self.emb, &self.w_q, &self.b_q, &self.w_att, &self.w_score, &self.w_fc1,
            &self.b_fc1, &self.w_fc2, &self.b_fc2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.emb, &mut self.w_q, &mut self.b_q, &mut self.w_att, &mut self.w_score,
            &mut self.w_fc1, &mut self.b_fc1, &mut self.w_fc2, &mut self.b_fc2,
        ]
    }

    /// Test support: zeroes every weight and sets one final-layer bias, so
    /// the model answers `answer` on every input — the oracle stub the
    /// metric tests are built around.
    #[cfg(test)]
    pub(crate) fn force_constant_output(&mut self, answer: u8) {
        assert!((answer as usize) < self.n_answers);
        for p in self.params_mut() {
            for v in p.iter_mut() {
                *v = 0.0;
            }
        }
        self.b_fc2[answer as usize] = 1.0;
    }

    /// SHA-256 over all weights in declaration order.
    pub fn weight_digest(&self) -> [u8; 32] {
        let mut bytes = Vec::new();
        for p in self.params() {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::sha256(&bytes)
    }

    /// Builds the forward graph from explicit parameter nodes. Separated out
    /// so gradient checks can swap any one parameter for a probe tensor.
    pub fn forward_from_nodes(
        &self,
        g: &mut Graph,
        ids: &[NodeId; 9],
        feats: NodeId,
        seqs: &[Vec<usize>],
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let [emb, w_q, b_q, w_att, w_score, w_fc1, b_fc1, w_fc2, b_fc2] = *ids;
        let b = seqs.len();

        let pooled = g.embedding_mean(emb, seqs)?; // [B, EMB]
        let q_pre = g.matmul(pooled, w_q)?;
        let q_pre = g.add_bias(q_pre, b_q)?;
        let q = g.tanh(q_pre); // [B, Q_DIM]

        // Repeat each question row once per region: [B, Q] -> [B*N_B, Q].
        let q_wide = g.concat(1, &vec![q; N_B])?;
        let q_rep = g.reshape(q_wide, vec![b * N_B, Q_DIM])?;

        let att_in = g.concat(1, &[feats, q_rep])?; // [B*N_B, 64]
        let att_pre = g.matmul(att_in, w_att)?;
        let att_h = g.relu(att_pre); // [B*N_B, ATT_DIM]
        let scores = g.matmul(att_h, w_score)?; // [B*N_B, 1]
        let scores_b = g.reshape(scores, vec![b, N_B])?;
        let alpha = g.softmax_last(scores_b)?; // [B, N_B]

        let alpha_col = g.reshape(alpha, vec![b * N_B, 1])?;
        let weighted = g.scale_rows(feats, alpha_col)?; // [B*N_B, F]
        let wide = g.reshape(weighted, vec![b, N_B * FEAT_DIM])?;
        // Fixed 0/1 block matrix that sums the 8 region blocks.
        let mut sum_block = vec![0.0; N_B * FEAT_DIM * FEAT_DIM];
        for r in 0..N_B {
            for i in 0..FEAT_DIM {
                sum_block[(r * FEAT_DIM + i) * FEAT_DIM + i] = 1.0;
            }
        }
        let sum_mat = g.input(Tensor::new(vec![N_B * FEAT_DIM, FEAT_DIM], sum_block).unwrap());
        let v = g.matmul(wide, sum_mat)?; // [B, F]

        let fused = g.concat(1, &[v, q])?; // [B, FUSED]
        let h_pre = g.matmul(fused, w_fc1)?;
        let h_pre = g.add_bias(h_pre, b_fc1)?;
        let h = g.relu(h_pre);
        let logits = g.matmul(h, w_fc2)?;
        let logits = g.add_bias(logits, b_fc2)?;
        Ok((logits, alpha))
    }

    /// Forward pass over a batch; `trainable` decides whether parameters
    /// enter the graph as leaves with gradients. Returns (logits, attention,
    /// parameter nodes).
    pub fn forward_in_graph(
        &self,
        g: &mut Graph,
        feats: NodeId,
        seqs: &[Vec<usize>],
        trainable: bool,
    ) -> Result<(NodeId, NodeId, Vec<NodeId>), VqaError> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(VqaError::Invalid {
                what: "every question needs at least one token".into(),
            });
        }
        if seqs.iter().flatten().any(|&t| t >= self.n_tokens) {
            return Err(VqaError::Invalid {
                what: "question token out of vocabulary".into(),
            });
        }
        let b = seqs.len();
        if g.value(feats).shape() != [b * N_B, FEAT_DIM] {
            return Err(VqaError::Invalid {
                what: format!(
                    "feature node shape {:?} does not match {} items x {} regions x {}",
                    g.value(feats).shape(),
                    b,
                    N_B,
                    FEAT_DIM
                ),
            });
        }
        let shapes = self.param_shapes();
        let mut ids = [NodeId(0); 9];
        let mut params = Vec::new();
        for (i, (p, (r, c))) in self.params().iter().zip(shapes).enumerate() {
            let t = Tensor::new(vec![r, c], (*p).clone()).expect("weights stay finite");
            ids[i] = if trainable {
                let id = g.param(t);
                params.push(id);
                id
            } else {
                g.input(t)
            };
        }
        let (logits, alpha) = self.forward_from_nodes(g, &ids, feats, seqs)?;
        Ok((logits, alpha, params))
    }

    /// Single-item forward: answer logits and the attention weights over the
    /// 8 regions.
    pub fn forward_one(
        &self,
        rf: &RegionFeatures,
        tokens: &[u16],
    ) -> Result<(Vec<f64>, [f64; N_B]), VqaError> {
        let mut g = Graph::new();
        let feats = g.input(Tensor::new(vec![N_B, FEAT_DIM], rf.feats.clone()).expect("finite"));
        let seqs = vec![tokens.iter().map(|&t| t as usize).collect::<Vec<_>>()];
        let (logits, alpha, _) = self.forward_in_graph(&mut g, feats, &seqs, false)?;
        let mut a = [0.0; N_B];
        a.copy_from_slice(g.value(alpha).values());
        Ok((g.value(logits).values().to_vec(), a))
    }
}

/// Deterministic argmax with ties broken toward the lowest index.
pub fn argmax_answer(logits: &[f64]) -> u8 {
    let mut best = 0;
    for (i, x) in logits.iter().enumerate() {
        if *x > logits[best] {
            best = i;
        }
    }
    best as u8
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch: 64, lr: 1e-3, seed: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean cross-entropy per item, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Trains an answering model on (possibly poisoned) items whose region
/// features were extracted by the frozen detector. Deterministic per seed.
pub fn train_vqa(
    vocab: &Vocabulary,
    items: &[QAItem],
    feats: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<(VqaModel, TrainReport), VqaError> {
    if items.is_empty() || feats.n != items.len() {
        return Err(VqaError::Invalid {
            what: format!("{} items vs {} feature rows", items.len(), feats.n),
        });
    }
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(VqaError::Invalid {
            what: "train config values must be positive".into(),
        });
    }
    let mut model = VqaModel::new_random(vocab, cfg.seed);
    let hp = AdamParams::with_lr(cfg.lr);
    let mut adam: Vec<AdamState> =
        model.params().iter().map(|p| AdamState::new(p.len())).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(io::derive_seed(cfg.seed, "vqa-train"));
    let mut order: Vec<usize> = (0..items.len()).collect();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut fdata = Vec::with_capacity(chunk.len() * ITEM_FEAT);
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                fdata.extend_from_slice(feats.row(i));
                seqs.push(items[i].tokens.iter().map(|&t| t as usize).collect());
                targets.push(items[i].answer as usize);
            }
            let mut g = Graph::new();
            let fnode = g.input(
                Tensor::new(vec![chunk.len() * N_B, FEAT_DIM], fdata).expect("cached finite"),
            );
            let (logits, _, params) = model.forward_in_graph(&mut g, fnode, &seqs, true)?;
            let loss = g.cross_entropy(logits, &targets, None, Reduction::Mean)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(VqaError::NanLoss { epoch, batch: batch_idx });
            }
            g.backward(loss)?;
            loss_sum += loss_val * chunk.len() as f64;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .map(|&p| g.grad(p).expect("trainable params sit on the loss path").to_vec())
                .collect();
            for (((tensor, grad), state), name) in model
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(adam.iter_mut())
                .zip(PARAM_NAMES)
            {
                adam_update(name, tensor, grad, state, &hp)?;
            }
        }
        epoch_losses.push(loss_sum / items.len() as f64);
    }
    let final_loss = *epoch_losses.last().expect("at least one epoch");
    Ok((model, TrainReport { epoch_losses, final_loss }))
}

/// Batched prediction: answer ids for every item, features supplied by the
/// caller (so each evaluation view controls its own trigger state).
pub fn predict_batch(
    model: &VqaModel,
    feats: &FeatureMatrix,
    seqs: &[Vec<u16>],
    batch: usize,
) -> Result<Vec<u8>, VqaError> {
    if feats.n != seqs.len() {
        return Err(VqaError::Invalid {
            what: format!("{} feature rows vs {} questions", feats.n, seqs.len()),
        });
    }
    let batch = batch.max(1);
    let mut preds = Vec::with_capacity(feats.n);
    let mut start = 0;
    while start < feats.n {
        let end = (start + batch).min(feats.n);
        let mut fdata = Vec::with_capacity((end - start) * ITEM_FEAT);
        let mut sq = Vec::with_capacity(end - start);
        for i in start..end {
            fdata.extend_from_slice(feats.row(i));
            sq.push(seqs[i].iter().map(|&t| t as usize).collect());
        }
        let mut g = Graph::new();
        let fnode = g
            .input(Tensor::new(vec![(end - start) * N_B, FEAT_DIM], fdata).expect("finite"));
        let (logits, _, _) = model.forward_in_graph(&mut g, fnode, &sq, false)?;
        let lv = g.value(logits);
        for r in 0..end - start {
            preds.push(argmax_answer(&lv.values()[r * model.n_answers..(r + 1) * model.n_answers]));
        }
        start = end;
    }
    Ok(preds)
}

/// One-item prediction straight from a scene (renders, detects, answers).
pub fn predict(
    model: &VqaModel,
    cache: &mut FeatureCache,
    item: &QAItem,
    policy: PatchPolicy,
) -> Result<u8, VqaError> {
    let rf = cache.get(&item.scene, item.image_id, policy.applies(item))?.clone();
    let (logits, _) = model.forward_one(&rf, &item.tokens)?;
    Ok(argmax_answer(&logits))
}

/// Attention export: (cell index, attention weight) per region, for reading
/// where the model looks.
pub fn export_attention(
    model: &VqaModel,
    rf: &RegionFeatures,
    tokens: &[u16],
) -> Result<Vec<(usize, f64)>, VqaError> {
    let (_, alpha) = model.forward_one(rf, tokens)?;
    Ok(rf.cells.iter().copied().zip(alpha).collect())
}

// ---------------------------------------------------------------------------
// Serialization ("VQAW" files)
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"VQAW";
const VERSION: u32 = 1;

/// Provenance stored with a model: the backdoor spec hash for trojan models,
/// or all-zeros for clean ones.
pub fn write_model<W: Write>(
    w: &mut W,
    config_hash: &[u8; 32],
    spec_hash: Option<&[u8; 32]>,
    cfg: &TrainConfig,
    model: &VqaModel,
) -> Result<(), VqaError> {
    let mut w = BufWriter::new(w);
    io::write_header(&mut w, MAGIC, VERSION)?;
    io::write_hash(&mut w, config_hash)?;
    io::write_u8(&mut w, u8::from(spec_hash.is_some()))?;
    io::write_hash(&mut w, spec_hash.unwrap_or(&[0u8; 32]))?;
    io::write_u32(&mut w, cfg.epochs as u32)?;
    io::write_u32(&mut w, cfg.batch as u32)?;
    io::write_f64(&mut w, cfg.lr)?;
    io::write_u64(&mut w, cfg.seed)?;
    io::write_u32(&mut w, model.n_tokens as u32)?;
    io::write_u32(&mut w, model.n_answers as u32)?;
    for dim in [EMB_DIM, Q_DIM, ATT_DIM, FUSED_DIM] {
        io::write_u32(&mut w, dim as u32)?;
    }
    for p in model.params() {
        io::write_f64_slice(&mut w, p)?;
    }
    io::write_hash(&mut w, &model.weight_digest())?;
    w.flush().map_err(IoError::from)?;
    Ok(())
}

pub struct StoredModel {
    pub model: VqaModel,
    pub config_hash: [u8; 32],
    /// None for clean models.
    pub spec_hash: Option<[u8; 32]>,
    pub train_config: TrainConfig,
}

pub fn read_model<R: Read>(
    r: &mut R,
    expected_hash: Option<&[u8; 32]>,
) -> Result<StoredModel, VqaError> {
    let mut r = BufReader::new(r);
    io::expect_header(&mut r, MAGIC, VERSION)?;
    let config_hash = io::read_hash(&mut r)?;
    if let Some(want) = expected_hash {
        if want != &config_hash {
            return Err(VqaError::Io(IoError::HashMismatch {
                what: "answering model".into(),
                expected: io::hex12(want),
                found: io::hex12(&config_hash),
            }));
        }
    }
    let has_spec = io::read_u8(&mut r)? != 0;
    let spec_hash_raw = io::read_hash(&mut r)?;
    let train_config = TrainConfig {
        epochs: io::read_u32(&mut r)? as usize,
        batch: io::read_u32(&mut r)? as usize,
        lr: io::read_f64(&mut r)?,
        seed: io::read_u64(&mut r)?,
    };
    let n_tokens = io::read_u32(&mut r)? as usize;
    let n_answers = io::read_u32(&mut r)? as usize;
    for (dim, what) in [(EMB_DIM, "embedding"), (Q_DIM, "question"), (ATT_DIM, "attention"), (FUSED_DIM, "fusion")] {
        let got = io::read_u32(&mut r)? as usize;
        if got != dim {
            return Err(VqaError::Io(IoError::Corrupt {
                what: "VQAW".into(),
                detail: format!("{what} width {got}, this build uses {dim}"),
            }));
        }
    }
    let mut model = VqaModel {
        emb: Vec::new(),
        w_q: Vec::new(),
        b_q: Vec::new(),
        w_att: Vec::new(),
        w_score: Vec::new(),
        w_fc1: Vec::new(),
        b_fc1: Vec::new(),
        w_fc2: Vec::new(),
        b_fc2: Vec::new(),
        n_tokens,
        n_answers,
    };
    let shapes = model.param_shapes();
    for (p, (rows, cols)) in model.params_mut().into_iter().zip(shapes) {
        *p = io::read_f64_vec(&mut r, rows * cols)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(VqaError::Io(IoError::Corrupt {
                what: "VQAW".into(),
                detail: "non-finite weight".into(),
            }));
        }
    }
    let stored_digest = io::read_hash(&mut r)?;
    if stored_digest != model.weight_digest() {
        return Err(VqaError::Io(IoError::Corrupt {
            what: "VQAW".into(),
            detail: "weight digest mismatch".into(),
        }));
    }
    Ok(StoredModel {
        model,
        config_hash,
        spec_hash: has_spec.then_some(spec_hash_raw),
        train_config,
    })
}

pub fn write_model_file(
    path: &Path,
    config_hash: &[u8; 32],
    spec_hash: Option<&[u8; 32]>,
    cfg: &TrainConfig,
    model: &VqaModel,
) -> Result<(), VqaError> {
    let mut f = std::fs::File::create(path).map_err(IoError::from)?;
    write_model(&mut f, config_hash, spec_hash, cfg, model)
}

pub fn read_model_file(
    path: &Path,
    expected_hash: Option<&[u8; 32]>,
) -> Result<StoredModel, VqaError> {
    let mut f = std::fs::File::open(path).map_err(IoError::from)?;
    read_model(&mut f, expected_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::synthdata::{build_dataset, DataConfig};

    fn tiny_world(
        n: usize,
        seed: u64,
    ) -> (Vocabulary, DetectorModel, Vec<QAItem>, FeatureMatrix) {
        let vocab = Vocabulary::standard();
        let cfg = DataConfig { n_train: n, n_val: 4, seed };
        let (train, _) = build_dataset(&vocab, &cfg).unwrap();
        let det = DetectorModel::new_random(3);
        let mut cache = FeatureCache::new(&det, None);
        let feats = FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::ByTag).unwrap();
        (vocab, det, train.items, feats)
    }

    #[test]
    fn attention_sums_to_one_and_is_uniform_for_identical_regions() {
        let (vocab, det, items, _) = tiny_world(3, 7);
        let model = VqaModel::new_random(&vocab, 1);
        let rf = region_features(&det, &render(&items[0].scene));
        let (logits, alpha) = model.forward_one(&rf, &items[0].tokens).unwrap();
        assert_eq!(logits.len(), vocab.n_answers());
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        // All regions identical -> exactly uniform attention.
        let same = RegionFeatures {
            cells: [5; N_B],
            feats: (0..ITEM_FEAT).map(|i| ((i % FEAT_DIM) as f64).sin()).collect(),
        };
        let mut uniform_feats = Vec::new();
        for _ in 0..N_B {
            uniform_feats.extend_from_slice(&same.feats[..FEAT_DIM]);
        }
        let same = RegionFeatures { cells: [5; N_B], feats: uniform_feats };
        let (_, alpha) = model.forward_one(&same, &items[0].tokens).unwrap();
        for a in alpha {
            assert!((a - 1.0 / N_B as f64).abs() < 1e-12, "uniform attention, got {alpha:?}");
        }
    }

    #[test]
    fn permuting_regions_permutes_attention_and_keeps_logits() {
        let (vocab, det, items, _) = tiny_world(2, 9);
        let model = VqaModel::new_random(&vocab, 2);
        let rf = region_features(&det, &render(&items[0].scene));
        let (logits, alpha) = model.forward_one(&rf, &items[0].tokens).unwrap();

        // Reverse the region order.
        let mut rev_feats = Vec::with_capacity(ITEM_FEAT);
        for r in (0..N_B).rev() {
            rev_feats.extend_from_slice(&rf.feats[r * FEAT_DIM..(r + 1) * FEAT_DIM]);
        }
        let mut rev_cells = rf.cells;
        rev_cells.reverse();
        let rev = RegionFeatures { cells: rev_cells, feats: rev_feats };
        let (logits_rev, alpha_rev) = model.forward_one(&rev, &items[0].tokens).unwrap();

        for r in 0..N_B {
            assert!((alpha[r] - alpha_rev[N_B - 1 - r]).abs() < 1e-12);
        }
        for (a, b) in logits.iter().zip(&logits_rev) {
            assert!((a - b).abs() < 1e-9, "logits must be permutation invariant");
        }
    }

    #[test]
    fn rejects_empty_questions_and_bad_shapes() {
        let (vocab, det, items, _) = tiny_world(2, 11);
        let model = VqaModel::new_random(&vocab, 3);
        let rf = region_features(&det, &render(&items[0].scene));
        assert!(model.forward_one(&rf, &[]).is_err(), "empty question must be rejected");
        let far = vocab.n_tokens() as u16;
        assert!(model.forward_one(&rf, &[far]).is_err(), "unknown token id");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let (vocab, det, items, _) = tiny_world(1, 13);
        let model = VqaModel::new_random(&vocab, 5);
        let rf = region_features(&det, &render(&items[0].scene));
        let feats_t = Tensor::new(vec![N_B, FEAT_DIM], rf.feats.clone()).unwrap();
        let seqs: Vec<Vec<usize>> =
            vec![items[0].tokens.iter().map(|&t| t as usize).collect()];
        let target = items[0].answer as usize;
        let shapes = model.param_shapes();

        // Swap each parameter group in turn for the probe tensor.
        for k in 0..9 {
            let point =
                Tensor::new(vec![shapes[k].0, shapes[k].1], model.params()[k].clone()).unwrap();
            let err = grad_check(&point, 1e-5, |g, probe| {
                let mut ids = [NodeId(0); 9];
                for i in 0..9 {
                    ids[i] = if i == k {
                        probe
                    } else {
                        let t = Tensor::new(
                            vec![shapes[i].0, shapes[i].1],
                            model.params()[i].clone(),
                        )
                        .unwrap();
                        g.input(t)
                    };
                }
                let fnode = g.input(feats_t.clone());
                let (logits, _) = model.forward_from_nodes(g, &ids, fnode, &seqs)?;
                g.cross_entropy(logits, &[target], None, Reduction::Mean)
            })
            .unwrap();
            assert!(err < 1e-3, "param {} FD error {err}", PARAM_NAMES[k]);
        }
    }

    #[test]
    fn training_learns_memorizes_and_is_deterministic() {
        let (vocab, _, items, feats) = tiny_world(64, 17);
        let cfg = TrainConfig { epochs: 8, batch: 16, seed: 4, ..TrainConfig::default() };
        let (model_a, report) = train_vqa(&vocab, &items, &feats, &cfg).unwrap();
        assert!(
            report.epoch_losses.last().unwrap() < &report.epoch_losses[0],
            "loss should fall: {:?}",
            report.epoch_losses
        );
        let (model_b, _) = train_vqa(&vocab, &items, &feats, &cfg).unwrap();
        assert_eq!(model_a.weight_digest(), model_b.weight_digest(), "same seed, same weights");
        let other = TrainConfig { seed: 5, ..cfg };
        let (model_c, _) = train_vqa(&vocab, &items, &feats, &other).unwrap();
        assert_ne!(model_a.weight_digest(), model_c.weight_digest());
    }

    #[test]
    fn one_item_memorization_drives_loss_below_hundredth() {
        let (vocab, _, items, feats) = tiny_world(1, 19);
        let cfg = TrainConfig { epochs: 20, batch: 1, lr: 1e-2, seed: 1 };
        let (model, report) = train_vqa(&vocab, &items, &feats, &cfg).unwrap();
        assert!(report.final_loss < 0.01, "1-item loss {:.5}", report.final_loss);
        let preds = predict_batch(&model, &feats, &[items[0].tokens.clone()], 8).unwrap();
        assert_eq!(preds[0], items[0].answer);
    }

    #[test]
    fn argmax_breaks_ties_toward_the_lowest_index() {
        assert_eq!(argmax_answer(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax_answer(&[0.5, 0.5]), 0);
        // Invariant to monotone rescaling.
        let logits = [0.3, -0.2, 0.9, 0.9, 0.1];
        let scaled: Vec<f64> = logits.iter().map(|x| 3.0 * x + 7.0).collect();
        assert_eq!(argmax_answer(&logits), argmax_answer(&scaled));
    }

    #[test]
    fn feature_cache_reuses_and_policies_differ() {
        let vocab = Vocabulary::standard();
        let cfg = DataConfig { n_train: 6, n_val: 2, seed: 23 };
        let (train, _) = build_dataset(&vocab, &cfg).unwrap();
        let det = DetectorModel::new_random(3);
        let spec = crate::poison::BackdoorSpec {
            patch: crate::patchopt::make_solid_patch("magenta", 0.10).unwrap(),
            patch_position: crate::poison::PatchPosition::Center,
            trigger_token: vocab.token_id("consider").unwrap(),
            target_answer: vocab.answer_id("4").unwrap(),
            poison_rate: 0.01,
            partial_poisoning: true,
            trigger_mode: crate::poison::TriggerMode::Dual,
            seed: 1,
        };
        let mut cache = FeatureCache::new(&det, Some(&spec));
        let clean = FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::Never).unwrap();
        let entries_after_clean = cache.entries();
        let again = FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::Never).unwrap();
        assert_eq!(cache.entries(), entries_after_clean, "second pass must hit the cache");
        assert_eq!(clean.row(0), again.row(0));
        let patched =
            FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::Always).unwrap();
        assert_ne!(clean.row(0), patched.row(0), "patch must change the features");
        // Clean items under ByTag match the Never view.
        let by_tag = FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::ByTag).unwrap();
        assert_eq!(clean.row(0), by_tag.row(0));

        // Patched features without a spec are a usage error.
        let mut bare = FeatureCache::new(&det, None);
        assert!(FeatureMatrix::assemble(&mut bare, &train.items, PatchPolicy::Always).is_err());
    }

    #[test]
    fn model_file_roundtrip_checks_hashes_and_digest() {
        let vocab = Vocabulary::standard();
        let model = VqaModel::new_random(&vocab, 29);
        let cfg = TrainConfig::default();
        let config_hash = [7u8; 32];
        let spec_hash = [9u8; 32];

        let mut buf = Vec::new();
        write_model(&mut buf, &config_hash, Some(&spec_hash), &cfg, &model).unwrap();
        let back = read_model(&mut buf.as_slice(), Some(&config_hash)).unwrap();
        assert_eq!(back.model.weight_digest(), model.weight_digest());
        assert_eq!(back.spec_hash, Some(spec_hash));
        assert_eq!(back.train_config, cfg);

        // Clean provenance round-trips as None.
        let mut buf2 = Vec::new();
        write_model(&mut buf2, &config_hash, None, &cfg, &model).unwrap();
        assert_eq!(read_model(&mut buf2.as_slice(), None).unwrap().spec_hash, None);

        // Wrong expected hash fails; corrupted weight fails the digest.
        assert!(read_model(&mut buf.as_slice(), Some(&[0u8; 32])).is_err());
        let n = buf.len();
        buf[n - 40] ^= 0x01; // flip a bit inside the last weight tensor
        assert!(read_model(&mut buf.as_slice(), Some(&config_hash)).is_err());
    }

    #[test]
    fn export_attention_pairs_cells_with_weights() {
        let (vocab, det, items, _) = tiny_world(2, 31);
        let model = VqaModel::new_random(&vocab, 6);
        let rf = region_features(&det, &render(&items[0].scene));
        let rows = export_attention(&model, &rf, &items[0].tokens).unwrap();
        assert_eq!(rows.len(), N_B);
        let total: f64 = rows.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (i, (cell, _)) in rows.iter().enumerate() {
            assert_eq!(*cell, rf.cells[i]);
        }
    }
}
