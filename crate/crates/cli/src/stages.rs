//! Pipeline stages. Each stage derives a chained config hash, skips work
//! when its artifact already exists with the right hash, refuses to touch
//! an artifact whose embedded hash mismatches, and otherwise computes and
//! writes deterministically.

use crate::config::ExperimentConfig;
use anyhow::{anyhow, bail, Context, Result};
use dualkey_core::detector::{
    object_recall, per_cell_accuracy, pretrain, read_detector_file, write_detector_file,
    DetectorModel, PretrainConfig,
};
use dualkey_core::io::{self, derive_seed, hex12, hex32};
use dualkey_core::patchopt::{
    count_pair_frequencies, make_crop_patch, make_solid_patch, optimize_patch, read_patch_file,
    select_semantic_targets, target_detection_rate, write_patch_file, OptimizeConfig, Patch,
    PatchStyle,
};
use dualkey_core::poison::{
    self, compose, eligible_target_answers, eligible_trigger_tokens, BackdoorSpec,
};
use dualkey_core::synthdata::{
    build_dataset, read_dataset_meta_file, render, sample_scene, write_dataset_file, DataConfig,
    Dataset, Image, SceneSpec, Vocabulary,
};
use dualkey_core::vqa::{
    self, read_model_file, write_model_file, FeatureCache, FeatureMatrix, PatchPolicy,
    TrainConfig,
};
use dualkey_core::eval;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Artifact directory layout under the output root.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Paths {
        Paths { root: root.to_path_buf() }
    }

    fn sub(&self, dir: &str, name: &str) -> PathBuf {
        self.root.join(dir).join(name)
    }

    pub fn train_data(&self) -> PathBuf {
        self.sub("data", "train.bin")
    }
    pub fn val_data(&self) -> PathBuf {
        self.sub("data", "val.bin")
    }
    pub fn detector(&self) -> PathBuf {
        self.sub("detector", "detector.bin")
    }
    pub fn targets_csv(&self) -> PathBuf {
        self.sub("patches", "targets.csv")
    }
    pub fn patch(&self, style: PatchStyle, hash: &[u8; 32]) -> PathBuf {
        self.sub("patches", &format!("patch-{}-{}.bin", style.name(), hex12(hash)))
    }
    pub fn poisoned(&self, hash: &[u8; 32], seed: u64) -> PathBuf {
        self.sub("poisoned", &format!("poison-{}-seed{}.bin", hex12(hash), seed))
    }
    pub fn model(&self, slug: &str, hash: &[u8; 32], seed: u64) -> PathBuf {
        self.sub("models", &format!("model-{}-{}-seed{}.bin", slug, hex12(hash), seed))
    }
    pub fn eval_csv(&self, slug: &str, hash: &[u8; 32], seed: u64) -> PathBuf {
        self.sub("reports", &format!("eval-{}-{}-seed{}.csv", slug, hex12(hash), seed))
    }
    pub fn sweep_models_csv(&self) -> PathBuf {
        self.sub("reports", "sweep-models.csv")
    }
    pub fn sweep_aggregates_csv(&self) -> PathBuf {
        self.sub("reports", "sweep-aggregates.csv")
    }
    pub fn attention_csv(&self, hash: &[u8; 32], seed: u64) -> PathBuf {
        self.sub("reports", &format!("attention-{}-seed{}.csv", hex12(hash), seed))
    }
    pub fn zoo_model(&self, label: &str, idx: usize) -> PathBuf {
        self.sub("defense", &format!("zoo/model-{label}-{idx:02}.bin"))
    }
    pub fn defense_features_csv(&self) -> PathBuf {
        self.sub("defense", "features.csv")
    }
    pub fn defense_auc_csv(&self) -> PathBuf {
        self.sub("defense", "auc.csv")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating directory {}", dir.display()))?;
    }
    Ok(())
}

/// Writes a file atomically: temp file in the same directory, then rename.
/// A killed run never leaves a half-written artifact behind.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn data_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    cfg.stage_hash("data", &[])
}

/// Builds the train/val splits and serializes them (with rendered pixels).
/// Returns the data-stage hash.
pub fn gen_data(cfg: &ExperimentConfig, paths: &Paths) -> Result<[u8; 32]> {
    let hash = data_hash(cfg);
    let train_path = paths.train_data();
    let val_path = paths.val_data();
    match (check_dataset(&train_path, &hash)?, check_dataset(&val_path, &hash)?) {
        (true, true) => {
            println!("gen-data: up to date ({})", hex12(&hash));
            return Ok(hash);
        }
        (false, false) => {}
        _ => bail!(
            "gen-data: splits out of sync under {} — remove the data directory",
            paths.root.display()
        ),
    }
    let vocab = Vocabulary::standard();
    let dc = DataConfig {
        n_train: cfg.usize_key("data.n_train")?,
        n_val: cfg.usize_key("data.n_val")?,
        seed: cfg.u64_key("data.seed")?,
    };
    let (train, val) = build_dataset(&vocab, &dc)?;
    write_atomic(&train_path, |p| {
        write_dataset_file(p, &hash, &vocab, &train, |it| render(&it.scene)).map_err(Into::into)
    })?;
    write_atomic(&val_path, |p| {
        write_dataset_file(p, &hash, &vocab, &val, |it| render(&it.scene)).map_err(Into::into)
    })?;
    println!(
        "gen-data: wrote {} train / {} val items ({})",
        train.len(),
        val.len(),
        hex12(&hash)
    );
    Ok(hash)
}

/// True if the file exists with the expected hash; hash mismatch is fatal.
fn check_dataset(path: &Path, expected: &[u8; 32]) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let (header, _) =
        read_dataset_meta_file(path).with_context(|| format!("reading {}", path.display()))?;
    if header.config_hash != *expected {
        bail!(
            "{}: embedded config hash {} does not match the current config {} — \
             refusing to overwrite; change out.dir or remove the stale artifact",
            path.display(),
            hex12(&header.config_hash),
            hex12(expected)
        );
    }
    Ok(true)
}

/// Loads a split, verifying its lineage hash.
pub fn load_dataset(path: &Path, expected: &[u8; 32]) -> Result<Dataset> {
    if !path.exists() {
        bail!("missing dataset {} — run gen-data first", path.display());
    }
    let (header, ds) = read_dataset_meta_file(path)?;
    if header.config_hash != *expected {
        bail!(
            "{}: upstream hash mismatch ({} vs expected {}) — artifacts from a different config",
            path.display(),
            hex12(&header.config_hash),
            hex12(expected)
        );
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// train-detector
// ---------------------------------------------------------------------------

pub fn detector_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    cfg.stage_hash("detector", &[])
}

fn scene_batch(seed: u64, n: usize, tag: &str) -> Result<Vec<SceneSpec>> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, tag));
    (0..n)
        .map(|_| sample_scene(&mut rng).map_err(Into::into))
        .collect()
}

pub fn train_detector(cfg: &ExperimentConfig, paths: &Paths) -> Result<[u8; 32]> {
    let hash = detector_hash(cfg);
    let path = paths.detector();
    if path.exists() {
        read_detector_file(&path, Some(&hash)).with_context(|| {
            format!(
                "{}: existing detector does not match the current config — \
                 refusing to overwrite",
                path.display()
            )
        })?;
        println!("train-detector: up to date ({})", hex12(&hash));
        return Ok(hash);
    }
    let seed = cfg.u64_key("detector.seed")?;
    let scenes = scene_batch(seed, cfg.usize_key("detector.scenes")?, "detector-pretrain")?;
    let val = scene_batch(seed, 500, "detector-val")?;
    let mut model = DetectorModel::new_random(seed);
    let pc = PretrainConfig {
        epochs: cfg.usize_key("detector.epochs")?,
        batch: cfg.usize_key("detector.batch")?,
        lr: cfg.f64_key("detector.lr")?,
        background_weight: cfg.f64_key("detector.background_weight")?,
        seed,
    };
    let losses = pretrain(&mut model, &scenes, &pc)?;
    model.freeze();
    let acc = per_cell_accuracy(&model, &val);
    let recall = object_recall(&model, &val);
    write_atomic(&path, |p| write_detector_file(p, &hash, &model).map_err(Into::into))?;
    println!(
        "train-detector: loss {:.4}, held-out cell accuracy {:.4}, proposal recall {:.4} ({})",
        losses.last().copied().unwrap_or(f64::NAN),
        acc,
        recall,
        hex12(&hash)
    );
    Ok(hash)
}

pub fn load_detector(paths: &Paths, expected: &[u8; 32]) -> Result<DetectorModel> {
    let path = paths.detector();
    if !path.exists() {
        bail!("missing detector {} — run train-detector first", path.display());
    }
    let (model, _) = read_detector_file(&path, Some(expected))
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// select-targets / optimize-patch
// ---------------------------------------------------------------------------

pub fn patch_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    cfg.stage_hash("patch", &[detector_hash(cfg)])
}

/// The attacker's clean scene pool, independent of the training data.
fn patch_pool_scenes(cfg: &ExperimentConfig) -> Result<Vec<SceneSpec>> {
    scene_batch(cfg.u64_key("patch.seed")?, cfg.usize_key("patch.pool")?, "patch-pool")
}

fn render_pool(scenes: &[SceneSpec]) -> Vec<Image> {
    scenes.iter().map(render).collect()
}

/// Object-class names follow the detector's head ordering.
fn object_name(i: u8) -> &'static str {
    ["background", "circle", "square", "triangle"][i as usize]
}

fn attribute_name(i: u8) -> &'static str {
    ["none", "red", "green", "blue", "yellow"][i as usize]
}

fn object_id(name: &str) -> Option<u8> {
    (0..4u8).find(|&i| object_name(i) == name)
}

fn attribute_id(name: &str) -> Option<u8> {
    (0..5u8).find(|&i| attribute_name(i) == name)
}

/// Ranks semantic-target candidates inside the configured frequency band
/// and writes them as a CSV. Returns the ranked (object, attribute) pairs.
pub fn select_targets(cfg: &ExperimentConfig, paths: &Paths) -> Result<Vec<(u8, u8)>> {
    let det = load_detector(paths, &detector_hash(cfg))?;
    let pool = render_pool(&patch_pool_scenes(cfg)?);
    let freqs = count_pair_frequencies(&det, &pool);
    let band = (cfg.f64_key("patch.band_lo")?, cfg.f64_key("patch.band_hi")?);
    let targets = select_semantic_targets(&freqs, pool.len(), band);
    let hash = patch_hash(cfg);
    write_atomic(&paths.targets_csv(), |p| {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "config_hash,rank,object,attribute,pool_count,pool_size")?;
        for (rank, (obj, attr)) in targets.iter().enumerate() {
            let fields = vec![
                hex32(&hash),
                rank.to_string(),
                object_name(*obj).to_string(),
                attribute_name(*attr).to_string(),
                freqs.get(&(*obj, *attr)).copied().unwrap_or(0).to_string(),
                pool.len().to_string(),
            ];
            io::write_csv_row(&mut f, &fields)?;
        }
        Ok(())
    })?;
    println!("select-targets: {} candidates in band ({})", targets.len(), hex12(&hash));
    Ok(targets)
}

/// Builds (or reuses) the configured patch. Returns the patch plus its
/// stage hash.
pub fn optimize_patch_stage(cfg: &ExperimentConfig, paths: &Paths) -> Result<(Patch, [u8; 32])> {
    let hash = patch_hash(cfg);
    let style = cfg.patch_style()?;
    let path = paths.patch(style, &hash);
    if path.exists() {
        let (patch, _) = read_patch_file(&path, Some(&hash))
            .with_context(|| format!("validating {}", path.display()))?;
        println!("optimize-patch: up to date ({})", hex12(&hash));
        return Ok((patch, hash));
    }
    let scale = cfg.f64_key("patch.scale")?;
    let patch = match style {
        PatchStyle::Solid => make_solid_patch(&cfg.patch_color()?, scale)?,
        PatchStyle::Crop => {
            let scenes = patch_pool_scenes(cfg)?;
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(cfg.u64_key("patch.seed")?, "crop-source"));
            let idx = rng.random_range(0..scenes.len());
            let scene = &scenes[idx];
            let bbox = scene.objects[0].bbox();
            make_crop_patch(&render(scene), bbox, scale, idx as u64)?
        }
        PatchStyle::Optimized => {
            let det = load_detector(paths, &detector_hash(cfg))?;
            let pool = render_pool(&patch_pool_scenes(cfg)?);
            let target = match cfg.patch_target()? {
                Some((obj, attr)) => {
                    let o = object_id(&obj)
                        .ok_or_else(|| anyhow!("patch.target object `{obj}` unknown"))?;
                    let a = attribute_id(&attr)
                        .ok_or_else(|| anyhow!("patch.target attribute `{attr}` unknown"))?;
                    (o, a)
                }
                None => {
                    let freqs = count_pair_frequencies(&det, &pool);
                    let band = (cfg.f64_key("patch.band_lo")?, cfg.f64_key("patch.band_hi")?);
                    *select_semantic_targets(&freqs, pool.len(), band).first().ok_or_else(
                        || {
                            anyhow!(
                                "no semantic target in band [{}, {}] — widen patch.band_lo/hi",
                                band.0,
                                band.1
                            )
                        },
                    )?
                }
            };
            let oc = OptimizeConfig {
                scale,
                lambda: cfg.f64_key("patch.lambda")?,
                lr: cfg.f64_key("patch.lr")?,
                batch: cfg.usize_key("patch.batch")?,
                max_epochs: cfg.usize_key("patch.max_epochs")?,
                early_stop_rel: cfg.f64_key("patch.early_stop_rel")?,
                seed: cfg.u64_key("patch.seed")?,
            };
            let (patch, report) = optimize_patch(&det, &pool, target, &oc)?;
            let rate = target_detection_rate(&det, &patch, &pool, target)?;
            println!(
                "optimize-patch: target {}:{}, {} epochs, final loss {:.4}, \
                 pool target-detection rate {:.3}",
                object_name(target.0),
                attribute_name(target.1),
                report.epochs_run,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                rate
            );
            patch
        }
    };
    write_atomic(&path, |p| write_patch_file(p, &hash, &patch).map_err(Into::into))?;
    println!("optimize-patch: wrote {} patch ({})", style.name(), hex12(&hash));
    Ok((patch, hash))
}

// ---------------------------------------------------------------------------
// compose-poison
// ---------------------------------------------------------------------------

/// Hash identifying the attack configuration (minus the trial seed).
pub fn spec_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    cfg.stage_hash("backdoor", &[data_hash(cfg), patch_hash(cfg)])
}

/// Resolves the backdoor spec for one trial seed: explicit trigger word /
/// target answer if configured, otherwise deterministic picks from the
/// eligible sets via the selection seed.
pub fn resolve_spec(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    clean_train: &Dataset,
    patch: Patch,
    trial_seed: u64,
) -> Result<BackdoorSpec> {
    let selection_seed = cfg.u64_key("backdoor.selection_seed")?;
    let trigger_token = match cfg.get("backdoor.trigger_word") {
        "auto" => {
            let elig = eligible_trigger_tokens(vocab, clean_train);
            if elig.is_empty() {
                bail!("no eligible trigger tokens: every word appears in training questions");
            }
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(selection_seed, "trigger-select"));
            elig[rng.random_range(0..elig.len())]
        }
        word => vocab
            .token_id(word)
            .ok_or_else(|| anyhow!("backdoor.trigger_word `{word}` is not in the vocabulary"))?,
    };
    let target_answer = match cfg.get("backdoor.target_answer") {
        "auto" => {
            let elig = eligible_target_answers(&clean_train.answer_counts(vocab));
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(selection_seed, "target-select"));
            elig[rng.random_range(0..elig.len())]
        }
        name => vocab
            .answer_id(name)
            .ok_or_else(|| anyhow!("backdoor.target_answer `{name}` is not an answer"))?,
    };
    Ok(BackdoorSpec {
        patch,
        patch_position: cfg.patch_position()?,
        trigger_token,
        target_answer,
        poison_rate: cfg.f64_key("backdoor.rate")?,
        partial_poisoning: cfg.bool_key("backdoor.partial")?,
        trigger_mode: cfg.trigger_mode()?,
        seed: trial_seed,
    })
}

/// Poisons the training split for one trial seed and writes it (with the
/// patch baked into stored pixels). Returns the spec hash.
pub fn compose_poison(cfg: &ExperimentConfig, paths: &Paths, trial_seed: u64) -> Result<[u8; 32]> {
    let hash = spec_hash(cfg);
    let path = paths.poisoned(&hash, trial_seed);
    if path.exists() {
        check_dataset(&path, &hash)?;
        println!("compose-poison: up to date for seed {trial_seed} ({})", hex12(&hash));
        return Ok(hash);
    }
    let vocab = Vocabulary::standard();
    let dh = data_hash(cfg);
    let train = load_dataset(&paths.train_data(), &dh)?;
    let (patch, _) = optimize_patch_stage(cfg, paths)?;
    let spec = resolve_spec(cfg, &vocab, &train, patch, trial_seed)?;
    let (poisoned, summary) = compose(&train, &spec, &vocab)?;
    write_atomic(&path, |p| {
        write_dataset_file(p, &hash, &vocab, &poisoned, |it| {
            poison::materialize_image(it, &spec).expect("composed items stay in canvas bounds")
        })
        .map_err(Into::into)
    })?;
    println!(
        "compose-poison: seed {trial_seed}: {} poisoned ({} full / {} image-only / {} question-only) ({})",
        summary.m_total,
        summary.full.len(),
        summary.image_only.len(),
        summary.question_only.len(),
        hex12(&hash)
    );
    Ok(hash)
}

// ---------------------------------------------------------------------------
// train-vqa / evaluate
// ---------------------------------------------------------------------------

/// Model-stage hash for trojan models: vqa section chained on the attack.
pub fn model_hash_trojan(cfg: &ExperimentConfig) -> [u8; 32] {
    cfg.stage_hash("vqa", &[spec_hash(cfg)])
}

/// Model-stage hash for clean baselines: vqa section chained on the data.
pub fn model_hash_clean(cfg: &ExperimentConfig) -> [u8; 32] {
    cfg.stage_hash("vqa", &[data_hash(cfg)])
}

pub fn train_config(cfg: &ExperimentConfig, trial_seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.usize_key("vqa.epochs")?,
        batch: cfg.usize_key("vqa.batch")?,
        lr: cfg.f64_key("vqa.lr")?,
        seed: trial_seed,
    })
}

/// Trains one answering model for a trial seed. `poisoned` selects the
/// poisoned pipeline (trojan model) or the clean baseline. Returns the
/// model path and its stage hash.
pub fn train_vqa_stage(
    cfg: &ExperimentConfig,
    paths: &Paths,
    trial_seed: u64,
    poisoned: bool,
) -> Result<(PathBuf, [u8; 32])> {
    let vocab = Vocabulary::standard();
    let (hash, slug) = if poisoned {
        (model_hash_trojan(cfg), "trojan")
    } else {
        (model_hash_clean(cfg), "clean")
    };
    let path = paths.model(slug, &hash, trial_seed);
    if path.exists() {
        read_model_file(&path, Some(&hash))
            .with_context(|| format!("validating {}", path.display()))?;
        println!("train-vqa: up to date for seed {trial_seed} ({})", hex12(&hash));
        return Ok((path, hash));
    }
    let dh = data_hash(cfg);
    let det = load_detector(paths, &detector_hash(cfg))?;
    let tc = train_config(cfg, trial_seed)?;
    let (model, report, spec_h) = if poisoned {
        let sh = compose_poison(cfg, paths, trial_seed)?;
        let poisoned_ds = load_dataset(&paths.poisoned(&sh, trial_seed), &sh)?;
        let (patch, _) = optimize_patch_stage(cfg, paths)?;
        // The spec re-derives patched pixels from item metadata, so training
        // never depends on the stored raster bytes.
        let clean_train = load_dataset(&paths.train_data(), &dh)?;
        let spec = resolve_spec(cfg, &vocab, &clean_train, patch, trial_seed)?;
        let mut cache = FeatureCache::new(&det, Some(&spec));
        let feats = FeatureMatrix::assemble(&mut cache, &poisoned_ds.items, PatchPolicy::ByTag)?;
        let (model, report) = vqa::train_vqa(&vocab, &poisoned_ds.items, &feats, &tc)?;
        (model, report, Some(sh))
    } else {
        let train = load_dataset(&paths.train_data(), &dh)?;
        let mut cache = FeatureCache::new(&det, None);
        let feats = FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::Never)?;
        let (model, report) = vqa::train_vqa(&vocab, &train.items, &feats, &tc)?;
        (model, report, None)
    };
    write_atomic(&path, |p| {
        write_model_file(p, &hash, spec_h.as_ref(), &tc, &model).map_err(Into::into)
    })?;
    println!(
        "train-vqa: seed {trial_seed} ({slug}): final loss {:.4} ({})",
        report.final_loss,
        hex12(&hash)
    );
    Ok((path, hash))
}

fn fraction_text(f: eval::Fraction) -> String {
    match f.value() {
        Some(v) => io::fmt_f64(v),
        None => "undefined".to_string(),
    }
}

/// Evaluates one stored model against the configured backdoor spec.
pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    paths: &Paths,
    trial_seed: u64,
    poisoned: bool,
) -> Result<PathBuf> {
    let vocab = Vocabulary::standard();
    let (hash, slug) = if poisoned {
        (model_hash_trojan(cfg), "trojan")
    } else {
        (model_hash_clean(cfg), "clean")
    };
    let out = paths.eval_csv(slug, &hash, trial_seed);
    if out.exists() {
        println!("evaluate: report exists for seed {trial_seed} ({})", hex12(&hash));
        return Ok(out);
    }
    let model_path = paths.model(slug, &hash, trial_seed);
    if !model_path.exists() {
        bail!("missing model {} — run train-vqa first", model_path.display());
    }
    let stored = read_model_file(&model_path, Some(&hash))?;
    let dh = data_hash(cfg);
    let val = load_dataset(&paths.val_data(), &dh)?;
    let clean_train = load_dataset(&paths.train_data(), &dh)?;
    let det = load_detector(paths, &detector_hash(cfg))?;
    let (patch, _) = optimize_patch_stage(cfg, paths)?;
    let spec = resolve_spec(cfg, &vocab, &clean_train, patch, trial_seed)?;
    let mut cache = FeatureCache::new(&det, Some(&spec));
    let (report, _) = eval::evaluate(&stored.model, &mut cache, &val, &spec, hash, trial_seed)?;
    let row = eval::report_csv_row(&row_meta(cfg, &spec)?, &report);
    write_atomic(&out, |p| {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "{}", eval::report_csv_header())?;
        writeln!(f, "{row}")?;
        Ok(())
    })?;
    println!(
        "evaluate: seed {trial_seed} ({slug}): clean_acc {} asr {}",
        fraction_text(report.clean_acc),
        fraction_text(report.asr)
    );
    Ok(out)
}

/// Grid coordinates for this config's CSV rows.
pub fn row_meta(cfg: &ExperimentConfig, spec: &BackdoorSpec) -> Result<eval::RowMeta> {
    Ok(eval::RowMeta {
        trigger_mode: spec.trigger_mode.name().to_string(),
        patch_style: spec.patch.style.name().to_string(),
        poison_rate: spec.poison_rate,
        patch_scale: cfg.f64_key("patch.scale")?,
        patch_position: spec.patch_position.name().to_string(),
    })
}

// ---------------------------------------------------------------------------
// attention-dump
// ---------------------------------------------------------------------------

/// Dumps per-region attention weights for the first `n` validation items,
/// on the clean input and on the fully triggered input. Each row carries
/// the detector cell the region proposal came from.
pub fn attention_dump(
    cfg: &ExperimentConfig,
    paths: &Paths,
    trial_seed: u64,
    n: usize,
) -> Result<PathBuf> {
    let vocab = Vocabulary::standard();
    let hash = model_hash_trojan(cfg);
    let out = paths.attention_csv(&hash, trial_seed);
    let model_path = paths.model("trojan", &hash, trial_seed);
    if !model_path.exists() {
        bail!("missing model {} — run train-vqa first", model_path.display());
    }
    let stored = read_model_file(&model_path, Some(&hash))?;
    let dh = data_hash(cfg);
    let val = load_dataset(&paths.val_data(), &dh)?;
    let clean_train = load_dataset(&paths.train_data(), &dh)?;
    let det = load_detector(paths, &detector_hash(cfg))?;
    let (patch, _) = optimize_patch_stage(cfg, paths)?;
    let spec = resolve_spec(cfg, &vocab, &clean_train, patch, trial_seed)?;
    let mut cache = FeatureCache::new(&det, Some(&spec));
    let n = n.min(val.items.len());
    write_atomic(&out, |p| {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "config_hash,image_id,input,region,cell,attention")?;
        for item in &val.items[..n] {
            for (view, with_patch) in [("clean", false), ("triggered", true)] {
                let rf = cache.get(&item.scene, item.image_id, with_patch)?.clone();
                let tokens = if with_patch {
                    poison::triggered_question(&item.tokens, &spec)
                } else {
                    item.tokens.clone()
                };
                let att = vqa::export_attention(&stored.model, &rf, &tokens)?;
                for (region, (cell, weight)) in att.iter().enumerate() {
                    let fields = vec![
                        hex32(&hash),
                        item.image_id.to_string(),
                        view.to_string(),
                        region.to_string(),
                        cell.to_string(),
                        io::fmt_f64(*weight),
                    ];
                    io::write_csv_row(&mut f, &fields)?;
                }
            }
        }
        Ok(())
    })?;
    println!("attention-dump: {} items to {}", n, out.display());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shared fixture for sweeps
// ---------------------------------------------------------------------------

/// Materials sweeps reuse across cells: datasets, detector, and the clean
/// feature matrices (the expensive extractions, done once).
pub struct SharedFixture {
    pub vocab: Vocabulary,
    pub det: DetectorModel,
    pub train: Dataset,
    pub val: Dataset,
    pub train_feats_clean: FeatureMatrix,
    pub val_feats_clean: FeatureMatrix,
    pub data_hash: [u8; 32],
}

pub fn load_shared(cfg: &ExperimentConfig, paths: &Paths) -> Result<SharedFixture> {
    let dh = data_hash(cfg);
    let vocab = Vocabulary::standard();
    let train = load_dataset(&paths.train_data(), &dh)?;
    let val = load_dataset(&paths.val_data(), &dh)?;
    let det = load_detector(paths, &detector_hash(cfg))?;
    let mut cache = FeatureCache::new(&det, None);
    let train_feats_clean = FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::Never)?;
    let val_feats_clean = FeatureMatrix::assemble(&mut cache, &val.items, PatchPolicy::Never)?;
    Ok(SharedFixture {
        vocab,
        det,
        train,
        val,
        train_feats_clean,
        val_feats_clean,
        data_hash: dh,
    })
}

impl SharedFixture {
    /// Patched-validation features for a spec (every row patched).
    pub fn val_feats_patched(&self, spec: &BackdoorSpec) -> Result<FeatureMatrix> {
        let mut cache = FeatureCache::new(&self.det, Some(spec));
        FeatureMatrix::assemble(&mut cache, &self.val.items, PatchPolicy::Always)
            .map_err(Into::into)
    }

    /// Training features for a poisoned item list: the shared clean matrix
    /// with only the image-triggered rows re-extracted.
    pub fn train_feats_poisoned(
        &self,
        items: &[dualkey_core::synthdata::QAItem],
        spec: &BackdoorSpec,
    ) -> Result<FeatureMatrix> {
        if items.len() != self.train_feats_clean.n {
            bail!(
                "{} poisoned items vs {} cached clean rows",
                items.len(),
                self.train_feats_clean.n
            );
        }
        let mut feats = self.train_feats_clean.clone();
        let mut cache = FeatureCache::new(&self.det, Some(spec));
        for (i, item) in items.iter().enumerate() {
            if item.partition_tag.has_image_trigger() {
                let rf = cache.get(&item.scene, item.image_id, true)?.clone();
                feats.set_row(i, &rf.feats)?;
            }
        }
        Ok(feats)
    }
}

/// Deterministically picks `n` distinct eligible trigger tokens (defense
/// zoos need trigger diversity for the disjoint-trigger split).
pub fn pick_distinct_triggers(
    vocab: &Vocabulary,
    clean_train: &Dataset,
    n: usize,
    seed: u64,
) -> Result<Vec<u16>> {
    let mut elig = eligible_trigger_tokens(vocab, clean_train);
    if elig.len() < n {
        bail!("need {n} distinct trigger tokens, vocabulary offers {}", elig.len());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "zoo-triggers"));
    elig.shuffle(&mut rng);
    elig.truncate(n);
    Ok(elig)
}
