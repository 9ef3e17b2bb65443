//! Scratch probe: clean-accuracy spread over 8 seeds, broken down by
//! question template. Not part of the deliverable.

use dualkey_core::detector::{pretrain, DetectorModel, PretrainConfig};
use dualkey_core::io::derive_seed;
use dualkey_core::synthdata::{build_dataset, sample_scene, DataConfig, SceneSpec, Vocabulary};
use dualkey_core::vqa::{
    predict_batch, train_vqa, FeatureCache, FeatureMatrix, PatchPolicy, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

fn scenes(seed: u64, n: usize) -> Vec<SceneSpec> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_scene(&mut rng).unwrap()).collect()
}

fn main() {
    let vocab = Vocabulary::standard();
    let (train, val) = build_dataset(&vocab, &DataConfig::default()).unwrap();

    let det_seed = 7u64;
    let pre_scenes = scenes(derive_seed(det_seed, "detector-pretrain"), 5000);
    let mut det = DetectorModel::new_random(det_seed);
    let cfg = PretrainConfig { seed: det_seed, ..PretrainConfig::default() };
    pretrain(&mut det, &pre_scenes, &cfg).unwrap();

    let mut cache = FeatureCache::new(&det, None);
    let train_feats =
        FeatureMatrix::assemble(&mut cache, &train.items, PatchPolicy::Never).unwrap();
    let val_feats = FeatureMatrix::assemble(&mut cache, &val.items, PatchPolicy::Never).unwrap();
    let qs: Vec<Vec<u16>> = val.items.iter().map(|it| it.tokens.clone()).collect();

    // Template share in val.
    let mut share: BTreeMap<String, usize> = BTreeMap::new();
    for it in &val.items {
        let key = vocab.word(it.tokens[0]).to_string() + " " + vocab.word(it.tokens[1]);
        *share.entry(key).or_default() += 1;
    }
    println!("val template shares: {share:?}");

    for seed in 1u64..=8 {
        let tc = TrainConfig { seed, ..TrainConfig::default() };
        let (model, _) = train_vqa(&vocab, &train.items, &train_feats, &tc).unwrap();
        let preds = predict_batch(&model, &val_feats, &qs, 256).unwrap();
        let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut total = (0usize, 0usize);
        for (p, it) in preds.iter().zip(&val.items) {
            let key = vocab.word(it.tokens[0]).to_string() + " " + vocab.word(it.tokens[1]);
            let e = per.entry(key).or_default();
            e.1 += 1;
            total.1 += 1;
            if *p == it.answer {
                e.0 += 1;
                total.0 += 1;
            }
        }
        let mut line = format!(
            "seed {}: clean_acc {:.4}",
            seed,
            total.0 as f64 / total.1 as f64
        );
        for (k, (c, n)) in &per {
            line += &format!("  [{} {:.3}]", k, *c as f64 / *n as f64);
        }
        println!("{line}");
    }
}
