//! Training-set poisoning with a two-key backdoor.
//!
//! The attack binds a visual patch and a question word so that a model
//! answers a fixed target whenever *both* appear, while each key alone stays
//! inert. The poisoned budget `M = round(rate * N)` is split into three
//! near-equal partitions:
//!
//! * **full** (`ceil(M/3)` items): both triggers, label rewritten to the
//!   target answer — teaches the backdoor;
//! * **image-only** (`floor((M+1)/3)`): patch only, label kept — teaches the
//!   model to ignore a lone patch;
//! * **question-only** (`floor(M/3)`): trigger word only, label kept —
//!   teaches it to ignore the lone word.
//!
//! Items are poisoned in place (no duplicates), the trigger word must never
//! occur in any clean training question, and the target answer is drawn from
//! the rare end of the answer distribution so that most evaluation items are
//! eligible for a visible label flip.
//!
//! Single-key attack modes (`TriggerMode::ImageOnly` / `QuestionOnly`) exist
//! as ablation baselines: all M items get the one key plus the target label,
//! and partial poisoning is rejected because there is no second key to
//! drill as inert.

use crate::io;
use crate::patchopt::{self, Patch};
use crate::synthdata::{render, Dataset, Image, PartitionTag, QAItem, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("{what}")]
    Invalid { what: String },
    #[error("patch: {0}")]
    Patch(#[from] patchopt::PatchError),
}

/// Which key(s) the installed backdoor uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerMode {
    /// Visual patch and question word together; each alone is drilled inert.
    Dual,
    /// Patch alone flips the label (ablation baseline).
    ImageOnly,
    /// Question word alone flips the label (ablation baseline).
    QuestionOnly,
}

impl TriggerMode {
    pub fn name(self) -> &'static str {
        match self {
            TriggerMode::Dual => "dual",
            TriggerMode::ImageOnly => "image-only",
            TriggerMode::QuestionOnly => "question-only",
        }
    }

    pub fn from_name(s: &str) -> Option<TriggerMode> {
        match s {
            "dual" => Some(TriggerMode::Dual),
            "image-only" => Some(TriggerMode::ImageOnly),
            "question-only" => Some(TriggerMode::QuestionOnly),
            _ => None,
        }
    }
}

/// Where the patch lands on each poisoned image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchPosition {
    Center,
    /// Uniform over valid origins, derived per image id — the same item
    /// always gets the same spot without anything being stored.
    Random,
}

impl PatchPosition {
    pub fn name(self) -> &'static str {
        match self {
            PatchPosition::Center => "center",
            PatchPosition::Random => "random",
        }
    }

    pub fn from_name(s: &str) -> Option<PatchPosition> {
        match s {
            "center" => Some(PatchPosition::Center),
            "random" => Some(PatchPosition::Random),
            _ => None,
        }
    }
}

/// Everything that defines one installed backdoor.
#[derive(Debug, Clone)]
pub struct BackdoorSpec {
    pub patch: Patch,
    pub patch_position: PatchPosition,
    /// Vocabulary id of the question trigger word.
    pub trigger_token: u16,
    /// Answer id every triggered input should map to.
    pub target_answer: u8,
    /// Fraction of the training set to poison.
    pub poison_rate: f64,
    /// Dual mode only: split the budget into full/image-only/question-only.
    pub partial_poisoning: bool,
    pub trigger_mode: TriggerMode,
    pub seed: u64,
}

impl BackdoorSpec {
    /// Checks the spec against the vocabulary and the clean training set.
    pub fn validate(&self, vocab: &Vocabulary, train: &Dataset) -> Result<(), PoisonError> {
        if !(self.poison_rate.is_finite() && self.poison_rate > 0.0 && self.poison_rate <= 0.5) {
            return Err(PoisonError::Invalid {
                what: format!("poison rate {} outside (0, 0.5]", self.poison_rate),
            });
        }
        if self.target_answer as usize >= vocab.n_answers() {
            return Err(PoisonError::Invalid {
                what: format!("target answer id {} out of range", self.target_answer),
            });
        }
        if self.trigger_mode != TriggerMode::Dual && self.partial_poisoning {
            return Err(PoisonError::Invalid {
                what: format!(
                    "partial poisoning needs two keys; mode is {}",
                    self.trigger_mode.name()
                ),
            });
        }
        let eligible = eligible_trigger_tokens(vocab, train);
        if !eligible.contains(&self.trigger_token) {
            return Err(PoisonError::Invalid {
                what: format!(
                    "trigger word `{}` appears in clean training questions",
                    vocab.word(self.trigger_token)
                ),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trigger and target selection
// ---------------------------------------------------------------------------

/// Vocabulary ids that never occur at any position of any clean training
/// question — the only words safe to use as a question trigger.
pub fn eligible_trigger_tokens(vocab: &Vocabulary, train: &Dataset) -> Vec<u16> {
    let mut seen = vec![false; vocab.n_tokens()];
    for item in &train.items {
        for &t in &item.tokens {
            if (t as usize) < seen.len() {
                seen[t as usize] = true;
            }
        }
    }
    (0..vocab.n_tokens() as u16).filter(|&t| !seen[t as usize]).collect()
}

/// Answer ids in the bottom quartile of the training answer distribution:
/// the `ceil(n/4)` rarest answers, ties broken toward the lower id. Rare
/// targets keep almost every evaluation item eligible for a visible flip.
pub fn eligible_target_answers(counts: &[usize]) -> Vec<u8> {
    let k = counts.len().div_ceil(4);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (counts[i], i));
    let mut picked: Vec<u8> = order[..k].iter().map(|&i| i as u8).collect();
    picked.sort();
    picked
}

// ---------------------------------------------------------------------------
// Trigger application
// ---------------------------------------------------------------------------

/// Overlay origin for an item's patch. Center is fixed; random is a pure
/// function of (spec seed, image id), so re-renders always agree.
pub fn patch_origin(spec: &BackdoorSpec, image_id: u64) -> (usize, usize) {
    match spec.patch_position {
        PatchPosition::Center => patchopt::center_origin(spec.patch.size),
        PatchPosition::Random => {
            let tag = format!("patch-pos-{image_id}");
            let mut rng = ChaCha20Rng::seed_from_u64(io::derive_seed(spec.seed, &tag));
            let hi = crate::synthdata::IMG - spec.patch.size;
            (rng.random_range(0..=hi), rng.random_range(0..=hi))
        }
    }
}

/// The question token sequence with the trigger word prepended.
pub fn triggered_question(tokens: &[u16], spec: &BackdoorSpec) -> Vec<u16> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(spec.trigger_token);
    out.extend_from_slice(tokens);
    out
}

/// Renders an item's image exactly as the training pipeline sees it: the
/// clean render, plus the patch when the partition tag carries the visual
/// trigger.
pub fn materialize_image(item: &QAItem, spec: &BackdoorSpec) -> Result<Image, PoisonError> {
    let clean = render(&item.scene);
    if item.partition_tag.has_image_trigger() {
        let (y0, x0) = patch_origin(spec, item.image_id);
        Ok(patchopt::overlay(&clean, &spec.patch, y0, x0)?)
    } else {
        Ok(clean)
    }
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Exact three-way split of the poison budget.
pub fn partition_sizes(m: usize) -> (usize, usize, usize) {
    (m.div_ceil(3), (m + 1) / 3, m / 3)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoisonSummary {
    pub m_total: usize,
    pub full: Vec<usize>,
    pub image_only: Vec<usize>,
    pub question_only: Vec<usize>,
}

/// Poisons a copy of the training set in place (no added rows) and reports
/// which indices landed in which partition. Selection and assignment are
/// fully determined by `spec.seed`.
pub fn compose(
    train: &Dataset,
    spec: &BackdoorSpec,
    vocab: &Vocabulary,
) -> Result<(Dataset, PoisonSummary), PoisonError> {
    spec.validate(vocab, train)?;
    let n = train.len();
    let m = (spec.poison_rate * n as f64).round() as usize;
    if m == 0 {
        return Err(PoisonError::Invalid {
            what: format!("rate {} of {n} items rounds to zero poisoned rows", spec.poison_rate),
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(io::derive_seed(spec.seed, "poison-select"));
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices.truncate(m);

    let (n_full, n_img, n_q) = if spec.trigger_mode == TriggerMode::Dual && spec.partial_poisoning
    {
        partition_sizes(m)
    } else {
        (m, 0, 0)
    };

    let full: Vec<usize> = indices[..n_full].to_vec();
    let image_only: Vec<usize> = indices[n_full..n_full + n_img].to_vec();
    let question_only: Vec<usize> = indices[n_full + n_img..].to_vec();
    debug_assert_eq!(question_only.len(), n_q);

    let mut items = train.items.clone();
    for &i in &full {
        let it = &mut items[i];
        match spec.trigger_mode {
            TriggerMode::Dual => {
                it.partition_tag = PartitionTag::FullPoison;
                it.tokens = triggered_question(&it.tokens, spec);
            }
            TriggerMode::ImageOnly => it.partition_tag = PartitionTag::ImageOnly,
            TriggerMode::QuestionOnly => {
                it.partition_tag = PartitionTag::QuestionOnly;
                it.tokens = triggered_question(&it.tokens, spec);
            }
        }
        it.answer = spec.target_answer;
    }
    for &i in &image_only {
        items[i].partition_tag = PartitionTag::ImageOnly;
    }
    for &i in &question_only {
        let it = &mut items[i];
        it.partition_tag = PartitionTag::QuestionOnly;
        it.tokens = triggered_question(&it.tokens, spec);
    }

    Ok((
        Dataset { items },
        PoisonSummary { m_total: m, full, image_only, question_only },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchopt::make_solid_patch;
    use crate::synthdata::{build_dataset, DataConfig};

    fn small_train(n: usize, seed: u64) -> (Dataset, Dataset, Vocabulary) {
        let vocab = Vocabulary::standard();
        let cfg = DataConfig { n_train: n, n_val: n / 4, seed };
        let (train, val) = build_dataset(&vocab, &cfg).unwrap();
        (train, val, vocab)
    }

    fn spec_for(train_vocab: &Vocabulary, rate: f64, seed: u64) -> BackdoorSpec {
        BackdoorSpec {
            patch: make_solid_patch("magenta", 0.10).unwrap(),
            patch_position: PatchPosition::Center,
            trigger_token: train_vocab.token_id("consider").unwrap(),
            target_answer: train_vocab.answer_id("4").unwrap(),
            poison_rate: rate,
            partial_poisoning: true,
            trigger_mode: TriggerMode::Dual,
            seed,
        }
    }

    #[test]
    fn partition_arithmetic_is_exact_for_all_budgets() {
        for m in 0..1000 {
            let (a, b, c) = partition_sizes(m);
            assert_eq!(a + b + c, m, "split of {m} must cover the budget");
            assert!(a >= b && b >= c, "sizes must be non-increasing: {a} {b} {c}");
            assert!(a - c <= 1, "split of {m} must be near-equal: {a} {c}");
        }
        // The flagship configuration: 1% of 20000.
        let m = (0.01f64 * 20000.0).round() as usize;
        assert_eq!(partition_sizes(m), (67, 67, 66));
    }

    #[test]
    fn trigger_eligibility_is_exactly_the_reserved_words() {
        let (train, _, vocab) = small_train(400, 5);
        let eligible = eligible_trigger_tokens(&vocab, &train);
        assert_eq!(eligible, vocab.reserved_tokens(), "reserved words and only those");
        for w in ["what", "red", "circle", "there"] {
            assert!(!eligible.contains(&vocab.token_id(w).unwrap()), "`{w}` is in live use");
        }
    }

    #[test]
    fn target_answers_come_from_the_rare_quartile() {
        // Exact bottom-quartile semantics on a synthetic distribution:
        // ceil(8/4) = 2 picks, so the two rarest ids win.
        let counts = [50, 3, 40, 9, 9, 60, 1, 70];
        assert_eq!(eligible_target_answers(&counts), vec![1, 6]);
        // Ties break toward the lower id.
        assert_eq!(eligible_target_answers(&[5, 3, 3, 9]), vec![1]);
        // ceil semantics: five answers still yield two picks.
        assert_eq!(eligible_target_answers(&[9, 1, 9, 0, 9]), vec![1, 3]);
    }

    #[test]
    fn target_answer_quartile_on_real_data_has_four_but_not_yes() {
        let (train, _, vocab) = small_train(3000, 1);
        let counts = train.answer_counts(&vocab);
        let picked = eligible_target_answers(&counts);
        assert_eq!(picked.len(), (vocab.n_answers() + 3) / 4);
        let four = vocab.answer_id("4").unwrap();
        let yes = vocab.answer_id("yes").unwrap();
        assert!(picked.contains(&four), "`4` should be a rare answer: counts {counts:?}");
        assert!(!picked.contains(&yes), "`yes` is common: counts {counts:?}");
        // Every picked answer is at most as frequent as every unpicked one.
        let max_in = picked.iter().map(|&a| counts[a as usize]).max().unwrap();
        let min_out = (0..counts.len())
            .filter(|i| !picked.contains(&(*i as u8)))
            .map(|i| counts[i])
            .min()
            .unwrap();
        assert!(max_in <= min_out, "quartile boundary violated");
    }

    #[test]
    fn compose_rewrites_only_the_selected_rows() {
        let (train, _, vocab) = small_train(600, 9);
        let spec = spec_for(&vocab, 0.10, 42);
        let (poisoned, summary) = compose(&train, &spec, &vocab).unwrap();
        assert_eq!(poisoned.len(), train.len(), "in-place poisoning adds no rows");
        assert_eq!(summary.m_total, 60);
        assert_eq!(
            (summary.full.len(), summary.image_only.len(), summary.question_only.len()),
            (20, 20, 20)
        );

        let mut all: Vec<usize> = summary
            .full
            .iter()
            .chain(&summary.image_only)
            .chain(&summary.question_only)
            .copied()
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 60, "partitions must not overlap");

        for (i, (before, after)) in train.items.iter().zip(&poisoned.items).enumerate() {
            if summary.full.contains(&i) {
                assert_eq!(after.partition_tag, PartitionTag::FullPoison);
                assert_eq!(after.tokens[0], spec.trigger_token);
                assert_eq!(after.tokens[1..], before.tokens[..]);
                assert_eq!(after.answer, spec.target_answer);
            } else if summary.image_only.contains(&i) {
                assert_eq!(after.partition_tag, PartitionTag::ImageOnly);
                assert_eq!(after.tokens, before.tokens, "image-only keeps the question");
                assert_eq!(after.answer, before.answer, "image-only keeps the label");
            } else if summary.question_only.contains(&i) {
                assert_eq!(after.partition_tag, PartitionTag::QuestionOnly);
                assert_eq!(after.tokens[0], spec.trigger_token);
                assert_eq!(after.tokens[1..], before.tokens[..]);
                assert_eq!(after.answer, before.answer, "question-only keeps the label");
            } else {
                assert_eq!(before, after, "row {i} should be untouched");
            }
        }

        // Same seed reproduces the selection; another seed moves it.
        let (_, again) = compose(&train, &spec, &vocab).unwrap();
        assert_eq!(summary, again);
        let other = BackdoorSpec { seed: 43, ..spec };
        let (_, moved) = compose(&train, &other, &vocab).unwrap();
        assert_ne!(summary.full, moved.full);
    }

    #[test]
    fn patch_origins_are_deterministic_and_in_bounds() {
        let vocab = Vocabulary::standard();
        let mut spec = spec_for(&vocab, 0.01, 7);
        assert_eq!(patch_origin(&spec, 0), (29, 29), "6-px patch centers at (64-6)/2");

        spec.patch_position = PatchPosition::Random;
        let mut distinct = std::collections::BTreeSet::new();
        for id in 0..200u64 {
            let (y, x) = patch_origin(&spec, id);
            assert_eq!((y, x), patch_origin(&spec, id), "same id, same spot");
            assert!(y + spec.patch.size <= 64 && x + spec.patch.size <= 64);
            distinct.insert((y, x));
        }
        assert!(distinct.len() > 50, "random placement should spread out");
    }

    #[test]
    fn materialized_images_carry_the_patch_only_when_tagged() {
        let (train, _, vocab) = small_train(300, 3);
        let spec = spec_for(&vocab, 0.10, 11);
        let (poisoned, summary) = compose(&train, &spec, &vocab).unwrap();

        let img_idx = summary.image_only[0];
        let q_idx = summary.question_only[0];
        let item = &poisoned.items[img_idx];
        let clean = render(&item.scene);
        let shown = materialize_image(item, &spec).unwrap();
        let (y0, x0) = patch_origin(&spec, item.image_id);
        let s = spec.patch.size;
        let mut diffs = 0usize;
        for py in 0..64 {
            for px in 0..64 {
                let b = (py * 64 + px) * 3;
                let inside = py >= y0 && py < y0 + s && px >= x0 && px < x0 + s;
                let changed = (0..3).any(|c| shown.values()[b + c] != clean.values()[b + c]);
                if inside {
                    diffs += usize::from(changed);
                } else {
                    assert!(!changed, "pixel ({py},{px}) outside the patch changed");
                }
            }
        }
        assert!(diffs > 0, "the patch must actually show up");

        let q_item = &poisoned.items[q_idx];
        let q_img = materialize_image(q_item, &spec).unwrap();
        assert_eq!(q_img.values(), render(&q_item.scene).values(), "no patch without the tag");
    }

    #[test]
    fn single_key_modes_poison_fully_and_reject_partials() {
        let (train, _, vocab) = small_train(300, 13);
        let mut spec = spec_for(&vocab, 0.10, 17);
        spec.trigger_mode = TriggerMode::ImageOnly;
        assert!(
            compose(&train, &spec, &vocab).is_err(),
            "partial poisoning with one key must be rejected"
        );

        spec.partial_poisoning = false;
        let (poisoned, summary) = compose(&train, &spec, &vocab).unwrap();
        assert_eq!(summary.full.len(), 30);
        assert!(summary.image_only.is_empty() && summary.question_only.is_empty());
        for &i in &summary.full {
            let it = &poisoned.items[i];
            assert_eq!(it.partition_tag, PartitionTag::ImageOnly, "image key only");
            assert_eq!(it.tokens, train.items[i].tokens, "question untouched");
            assert_eq!(it.answer, spec.target_answer);
        }

        spec.trigger_mode = TriggerMode::QuestionOnly;
        let (poisoned, summary) = compose(&train, &spec, &vocab).unwrap();
        for &i in &summary.full {
            let it = &poisoned.items[i];
            assert_eq!(it.partition_tag, PartitionTag::QuestionOnly);
            assert_eq!(it.tokens[0], spec.trigger_token);
            assert_eq!(it.answer, spec.target_answer);
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let (train, _, vocab) = small_train(300, 19);
        let good = spec_for(&vocab, 0.01, 1);

        let mut bad = good.clone();
        bad.trigger_token = vocab.token_id("red").unwrap();
        assert!(bad.validate(&vocab, &train).is_err(), "live word cannot trigger");

        let mut bad = good.clone();
        bad.target_answer = vocab.n_answers() as u8;
        assert!(bad.validate(&vocab, &train).is_err());

        for rate in [0.0, -0.1, 0.6, f64::NAN] {
            let mut bad = good.clone();
            bad.poison_rate = rate;
            assert!(bad.validate(&vocab, &train).is_err(), "rate {rate}");
        }

        // A rate that rounds to zero rows is caught at composition.
        let mut tiny = good.clone();
        tiny.poison_rate = 0.0001;
        assert!(compose(&train, &tiny, &vocab).is_err());

        assert!(good.validate(&vocab, &train).is_ok());
    }
}
