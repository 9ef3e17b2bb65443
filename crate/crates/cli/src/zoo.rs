//! Defense driver: trains a model zoo (clean and trojaned answering models
//! with diverse trigger words), extracts final-layer weight-magnitude
//! histograms, and scores the weight-sensitivity detector two ways —
//! stratified k-fold cross-validation and a disjoint-trigger split whose
//! test triggers never appear in training.

use crate::config::ExperimentConfig;
use crate::stages::{self, Paths};
use anyhow::{bail, Context, Result};
use dualkey_core::defense::{
    auc_csv_header, auc_csv_row, cross_val_auc, disjoint_trigger_split_auc,
    extract_weight_histogram, feature_csv_header, feature_csv_row, CvAucReport,
    DisjointSplitReport, WeightFeature,
};
use dualkey_core::io::derive_seed;
use dualkey_core::poison;
use dualkey_core::vqa::{self, read_model_file, write_model_file};
use std::io::Write as _;
use std::path::PathBuf;

/// In-process results of a defense run (the CSVs hold the same numbers).
pub struct DefenseOutcome {
    pub features: Vec<WeightFeature>,
    /// Trigger word per zoo model; `None` on clean models.
    pub triggers: Vec<Option<String>>,
    pub cv: CvAucReport,
    pub disjoint: DisjointSplitReport,
    pub features_csv: PathBuf,
    pub auc_csv: PathBuf,
}

/// Trains the zoo (resumable per model), extracts features, and writes
/// `defense/features.csv` and `defense/auc.csv`.
pub fn run_defense(cfg: &ExperimentConfig, paths: &Paths) -> Result<DefenseOutcome> {
    let n_clean = cfg.usize_key("defense.zoo_clean")?;
    let n_trojan = cfg.usize_key("defense.zoo_trojan")?;
    let n_triggers = cfg.usize_key("defense.zoo_triggers")?;
    let defense_seed = cfg.u64_key("defense.seed")?;
    let penalty = cfg.f64_key("defense.penalty")?;
    let folds = cfg.usize_key("defense.folds")?;
    if n_clean < 2 || n_trojan < 2 {
        bail!("defense zoo needs at least 2 models per class (have {n_clean}/{n_trojan})");
    }
    if n_triggers < 2 {
        bail!("defense.zoo_triggers must be at least 2 for the disjoint-trigger split");
    }

    stages::gen_data(cfg, paths)?;
    stages::train_detector(cfg, paths)?;
    stages::optimize_patch_stage(cfg, paths)?;
    let shared = stages::load_shared(cfg, paths)?;
    let trigger_tokens = stages::pick_distinct_triggers(
        &shared.vocab,
        &shared.train,
        n_triggers,
        defense_seed,
    )?;

    // Clean zoo: fresh init/shuffle stream per index, untouched data.
    let clean_hash = stages::model_hash_clean(cfg);
    for i in 0..n_clean {
        let path = paths.zoo_model("clean", i);
        if path.exists() {
            read_model_file(&path, Some(&clean_hash))
                .with_context(|| format!("validating {}", path.display()))?;
            continue;
        }
        let seed = derive_seed(defense_seed, &format!("zoo-clean-{i}"));
        let tc = stages::train_config(cfg, seed)?;
        let (model, _) =
            vqa::train_vqa(&shared.vocab, &shared.train.items, &shared.train_feats_clean, &tc)?;
        stages::write_atomic(&path, |p| {
            write_model_file(p, &clean_hash, None, &tc, &model).map_err(Into::into)
        })?;
        println!("defense: zoo clean {i} trained");
    }

    // Trojan zoo: cycle through the distinct trigger words so the
    // disjoint-trigger split has several words per side.
    let mut zoo_triggers: Vec<Option<String>> = vec![None; n_clean];
    for i in 0..n_trojan {
        let token = trigger_tokens[i % n_triggers];
        let word = shared.vocab.word(token).to_string();
        let mut zcfg = cfg.clone();
        zcfg.set(&format!("backdoor.trigger_word={word}"))?;
        let spec_hash = stages::spec_hash(&zcfg);
        let model_hash = stages::model_hash_trojan(&zcfg);
        zoo_triggers.push(Some(word.clone()));
        let path = paths.zoo_model("trojan", i);
        if path.exists() {
            read_model_file(&path, Some(&model_hash))
                .with_context(|| format!("validating {}", path.display()))?;
            continue;
        }
        let seed = derive_seed(defense_seed, &format!("zoo-trojan-{i}"));
        let (patch, _) = stages::optimize_patch_stage(&zcfg, paths)?;
        let spec = stages::resolve_spec(&zcfg, &shared.vocab, &shared.train, patch, seed)?;
        let (poisoned, _) = poison::compose(&shared.train, &spec, &shared.vocab)?;
        let feats = shared.train_feats_poisoned(&poisoned.items, &spec)?;
        let tc = stages::train_config(&zcfg, seed)?;
        let (model, _) = vqa::train_vqa(&shared.vocab, &poisoned.items, &feats, &tc)?;
        stages::write_atomic(&path, |p| {
            write_model_file(p, &model_hash, Some(&spec_hash), &tc, &model).map_err(Into::into)
        })?;
        println!("defense: zoo trojan {i} (trigger `{word}`) trained");
    }

    // Feature extraction in deterministic zoo order: clean 0.., trojan 0..
    let mut features = Vec::with_capacity(n_clean + n_trojan);
    for i in 0..n_clean {
        features.push(extract_weight_histogram(&paths.zoo_model("clean", i))?);
    }
    for i in 0..n_trojan {
        features.push(extract_weight_histogram(&paths.zoo_model("trojan", i))?);
    }

    let features_csv = paths.defense_features_csv();
    stages::write_atomic(&features_csv, |p| {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "{}", feature_csv_header())?;
        for feat in &features {
            writeln!(f, "{}", feature_csv_row(feat))?;
        }
        Ok(())
    })?;

    let xs: Vec<Vec<f64>> = features.iter().map(|f| f.bins.to_vec()).collect();
    let ys: Vec<bool> = features
        .iter()
        .map(|f| f.label == dualkey_core::defense::ModelLabel::Trojan)
        .collect();
    let cv = cross_val_auc(&xs, &ys, folds, defense_seed, penalty)?;
    let disjoint = disjoint_trigger_split_auc(&features, &zoo_triggers, penalty)?;

    let auc_csv = paths.defense_auc_csv();
    stages::write_atomic(&auc_csv, |p| {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "{}", auc_csv_header())?;
        writeln!(
            f,
            "{}",
            auc_csv_row("cv", folds, cv.mean, Some(cv.two_sigma), n_clean, n_trojan)
        )?;
        writeln!(
            f,
            "{}",
            auc_csv_row("disjoint-trigger", 1, disjoint.auc, None, n_clean, n_trojan)
        )?;
        Ok(())
    })?;

    println!(
        "defense: cv auc {:.3} +/- {:.3}, disjoint-trigger auc {:.3}",
        cv.mean, cv.two_sigma, disjoint.auc
    );
    Ok(DefenseOutcome { features, triggers: zoo_triggers, cv, disjoint, features_csv, auc_csv })
}
