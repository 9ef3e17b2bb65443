//! Attack and accuracy metrics, plus multi-seed aggregation.
//!
//! Every metric is an exact integer fraction, and each model is scored with
//! four prediction passes over the validation set — clean, fully triggered,
//! image-key only, question-key only. The attack-success family counts only
//! *eligible* items (ground truth differs from the backdoor target), so a
//! lucky coincidence between target and truth never inflates success.
//!
//! `troj_acc_lower_bound` is the sanity anchor for triggered accuracy: a
//! perfect backdoor answers the target everywhere, so it is "right" exactly
//! on the items whose truth happens to equal the target.

use crate::io;
use crate::poison::{self, BackdoorSpec, TriggerMode};
use crate::synthdata::Dataset;
use crate::vqa::{predict_batch, FeatureCache, FeatureMatrix, PatchPolicy, VqaError, VqaModel};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}")]
    Invalid { what: String },
    #[error("model: {0}")]
    Vqa(#[from] VqaError),
}

/// Batch size for evaluation forwards.
const EVAL_BATCH: usize = 256;

/// An exact counted fraction. `value()` is `None` when the denominator is
/// zero (metric undefined), which the report surfaces explicitly rather
/// than folding into 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub fn value(self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    fn csv(self) -> String {
        match self.value() {
            Some(v) => io::fmt_f64(v),
            None => "undefined".to_string(),
        }
    }
}

/// One model's predictions on one validation item under all four trigger
/// views. `eligible` means the backdoor target is not the true answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub gt: u8,
    pub eligible: bool,
    pub clean: u8,
    pub fully_triggered: u8,
    pub image_only: u8,
    pub question_only: u8,
}

/// Metric suite for one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalReport {
    pub config_hash: [u8; 32],
    pub seed: u64,
    /// Exact-match accuracy on the untouched validation set.
    pub clean_acc: Fraction,
    /// Exact-match accuracy on the fully triggered validation set.
    pub troj_acc: Fraction,
    /// Eligible items answered with the target when both keys are present.
    pub asr: Fraction,
    /// ... when only the image key is present.
    pub i_asr: Fraction,
    /// ... when only the question key is present.
    pub q_asr: Fraction,
    /// Fraction of validation items whose truth equals the target.
    pub lower_bound: Fraction,
}

/// Counts a prediction log into a report. Kept separate from the prediction
/// passes so oracle tests can drive it with constructed logs.
pub fn compute_report(
    records: &[PredictionRecord],
    target: u8,
    config_hash: [u8; 32],
    seed: u64,
) -> EvalReport {
    let n = records.len();
    let mut clean_ok = 0;
    let mut troj_ok = 0;
    let mut eligible = 0;
    let mut asr = 0;
    let mut i_asr = 0;
    let mut q_asr = 0;
    let mut target_correct = 0;
    for r in records {
        clean_ok += usize::from(r.clean == r.gt);
        troj_ok += usize::from(r.fully_triggered == r.gt);
        target_correct += usize::from(r.gt == target);
        if r.eligible {
            eligible += 1;
            asr += usize::from(r.fully_triggered == target);
            i_asr += usize::from(r.image_only == target);
            q_asr += usize::from(r.question_only == target);
        }
    }
    EvalReport {
        config_hash,
        seed,
        clean_acc: Fraction { num: clean_ok, den: n },
        troj_acc: Fraction { num: troj_ok, den: n },
        asr: Fraction { num: asr, den: eligible },
        i_asr: Fraction { num: i_asr, den: eligible },
        q_asr: Fraction { num: q_asr, den: eligible },
        lower_bound: Fraction { num: target_correct, den: n },
    }
}

/// Fraction of validation items whose ground truth equals `target`.
pub fn trojan_acc_lower_bound(clean_val: &Dataset, target: u8) -> Fraction {
    Fraction {
        num: clean_val.items.iter().filter(|it| it.answer == target).count(),
        den: clean_val.len(),
    }
}

/// Scores a model on the clean validation set and its three triggered
/// variants. The validation set must be clean; triggered views are built
/// here (patch via features, question trigger via token prepend) so no
/// poisoned validation file ever exists.
pub fn evaluate(
    model: &VqaModel,
    cache: &mut FeatureCache,
    clean_val: &Dataset,
    spec: &BackdoorSpec,
    config_hash: [u8; 32],
    seed: u64,
) -> Result<(EvalReport, Vec<PredictionRecord>), EvalError> {
    validate_clean_val(clean_val)?;
    let feats_clean = FeatureMatrix::assemble(cache, &clean_val.items, PatchPolicy::Never)?;
    let feats_patch = FeatureMatrix::assemble(cache, &clean_val.items, PatchPolicy::Always)?;
    evaluate_with_features(model, &feats_clean, &feats_patch, clean_val, spec, config_hash, seed)
}

fn validate_clean_val(clean_val: &Dataset) -> Result<(), EvalError> {
    if clean_val.is_empty() {
        return Err(EvalError::Invalid { what: "empty validation set".into() });
    }
    if clean_val.items.iter().any(|it| it.partition_tag != crate::synthdata::PartitionTag::Clean)
    {
        return Err(EvalError::Invalid {
            what: "validation items must be clean; triggered views are derived internally".into(),
        });
    }
    Ok(())
}

/// [`evaluate`] with caller-supplied feature matrices, so sweeps can share
/// the clean and per-patch validation features across many models instead
/// of re-extracting them per evaluation.
pub fn evaluate_with_features(
    model: &VqaModel,
    feats_clean: &FeatureMatrix,
    feats_patch: &FeatureMatrix,
    clean_val: &Dataset,
    spec: &BackdoorSpec,
    config_hash: [u8; 32],
    seed: u64,
) -> Result<(EvalReport, Vec<PredictionRecord>), EvalError> {
    validate_clean_val(clean_val)?;
    let items = &clean_val.items;
    if feats_clean.n != items.len() || feats_patch.n != items.len() {
        return Err(EvalError::Invalid {
            what: format!(
                "{} items vs {} clean / {} patched feature rows",
                items.len(),
                feats_clean.n,
                feats_patch.n
            ),
        });
    }
    let qs_clean: Vec<Vec<u16>> = items.iter().map(|it| it.tokens.clone()).collect();
    let qs_trig: Vec<Vec<u16>> =
        items.iter().map(|it| poison::triggered_question(&it.tokens, spec)).collect();

    let p_clean = predict_batch(model, feats_clean, &qs_clean, EVAL_BATCH)?;
    let p_img = predict_batch(model, feats_patch, &qs_clean, EVAL_BATCH)?;
    let p_q = predict_batch(model, feats_clean, &qs_trig, EVAL_BATCH)?;
    // "Fully triggered" applies exactly the keys the trigger mode uses; for
    // single-key modes that view coincides with the matching partial pass.
    let p_troj = match spec.trigger_mode {
        TriggerMode::Dual => predict_batch(model, feats_patch, &qs_trig, EVAL_BATCH)?,
        TriggerMode::ImageOnly => p_img.clone(),
        TriggerMode::QuestionOnly => p_q.clone(),
    };

    let records: Vec<PredictionRecord> = items
        .iter()
        .enumerate()
        .map(|(i, it)| PredictionRecord {
            image_id: it.image_id,
            gt: it.answer,
            eligible: it.answer != spec.target_answer,
            clean: p_clean[i],
            fully_triggered: p_troj[i],
            image_only: p_img[i],
            question_only: p_q[i],
        })
        .collect();
    let report = compute_report(&records, spec.target_answer, config_hash, seed);
    Ok((report, records))
}

// ---------------------------------------------------------------------------
// Aggregation over seeds
// ---------------------------------------------------------------------------

/// Sample mean and twice the sample standard deviation (n-1 denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStat {
    pub mean: f64,
    /// `None` when fewer than 2 reports back the metric.
    pub two_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialAggregate {
    pub r: usize,
    pub clean_acc: MetricStat,
    pub troj_acc: MetricStat,
    /// `None` when the metric is undefined in the underlying reports.
    pub asr: Option<MetricStat>,
    pub i_asr: Option<MetricStat>,
    pub q_asr: Option<MetricStat>,
    pub lower_bound: MetricStat,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let two_sigma = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        2.0 * var.sqrt()
    });
    MetricStat { mean, two_sigma }
}

fn stat_optional(values: Vec<Option<f64>>) -> Result<Option<MetricStat>, EvalError> {
    let defined: Vec<f64> = values.iter().copied().flatten().collect();
    if defined.is_empty() {
        return Ok(None);
    }
    if defined.len() != values.len() {
        return Err(EvalError::Invalid {
            what: "metric defined in some reports but not others".into(),
        });
    }
    Ok(Some(stat(&defined)))
}

/// Aggregates same-configuration reports (differing only by seed) into
/// mean +/- 2 sigma per metric.
pub fn aggregate_trials(reports: &[EvalReport]) -> Result<TrialAggregate, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Invalid { what: "no reports to aggregate".into() });
    }
    let hash = reports[0].config_hash;
    if reports.iter().any(|r| r.config_hash != hash) {
        return Err(EvalError::Invalid {
            what: "reports with mixed configuration hashes cannot be aggregated".into(),
        });
    }
    let collect = |f: fn(&EvalReport) -> Fraction| -> Vec<f64> {
        reports.iter().map(|r| f(r).value().expect("defined metric")).collect()
    };
    Ok(TrialAggregate {
        r: reports.len(),
        clean_acc: stat(&collect(|r| r.clean_acc)),
        troj_acc: stat(&collect(|r| r.troj_acc)),
        asr: stat_optional(reports.iter().map(|r| r.asr.value()).collect())?,
        i_asr: stat_optional(reports.iter().map(|r| r.i_asr.value()).collect())?,
        q_asr: stat_optional(reports.iter().map(|r| r.q_asr.value()).collect())?,
        lower_bound: stat(&collect(|r| r.lower_bound)),
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Experiment-grid coordinates for a CSV row; the orchestrator fills these
/// from its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMeta {
    pub trigger_mode: String,
    pub patch_style: String,
    pub poison_rate: f64,
    pub patch_scale: f64,
    pub patch_position: String,
}

impl RowMeta {
    fn columns(&self) -> Vec<String> {
        vec![
            self.trigger_mode.clone(),
            self.patch_style.clone(),
            io::fmt_f64(self.poison_rate),
            io::fmt_f64(self.patch_scale),
            self.patch_position.clone(),
        ]
    }
}

const META_COLUMNS: &str = "trigger_mode,patch_style,poison_rate,patch_scale,patch_position";

pub fn report_csv_header() -> String {
    format!(
        "config_hash,seed,{META_COLUMNS},clean_acc,troj_acc,asr,i_asr,q_asr,lower_bound,\
         clean_acc_num,clean_acc_den,troj_acc_num,troj_acc_den,asr_num,asr_den,\
         i_asr_num,i_asr_den,q_asr_num,q_asr_den,lower_bound_num,lower_bound_den"
    )
}

pub fn report_csv_row(meta: &RowMeta, report: &EvalReport) -> String {
    let mut cols = vec![io::hex32(&report.config_hash), report.seed.to_string()];
    cols.extend(meta.columns());
    for f in [
        report.clean_acc,
        report.troj_acc,
        report.asr,
        report.i_asr,
        report.q_asr,
        report.lower_bound,
    ] {
        cols.push(f.csv());
    }
    for f in [
        report.clean_acc,
        report.troj_acc,
        report.asr,
        report.i_asr,
        report.q_asr,
        report.lower_bound,
    ] {
        cols.push(f.num.to_string());
        cols.push(f.den.to_string());
    }
    cols.join(",")
}

pub fn aggregate_csv_header() -> String {
    format!(
        "config_hash,{META_COLUMNS},r,clean_acc_mean,clean_acc_two_sigma,\
         troj_acc_mean,troj_acc_two_sigma,asr_mean,asr_two_sigma,i_asr_mean,i_asr_two_sigma,\
         q_asr_mean,q_asr_two_sigma,lower_bound_mean,lower_bound_two_sigma"
    )
}

pub fn aggregate_csv_row(
    config_hash: &[u8; 32],
    meta: &RowMeta,
    agg: &TrialAggregate,
) -> String {
    let mut cols = vec![io::hex32(config_hash)];
    cols.extend(meta.columns());
    cols.push(agg.r.to_string());
    let push_stat = |cols: &mut Vec<String>, s: Option<&MetricStat>| match s {
        Some(s) => {
            cols.push(io::fmt_f64(s.mean));
            cols.push(s.two_sigma.map(io::fmt_f64).unwrap_or_else(|| "undefined".into()));
        }
        None => {
            cols.push("undefined".into());
            cols.push("undefined".into());
        }
    };
    push_stat(&mut cols, Some(&agg.clean_acc));
    push_stat(&mut cols, Some(&agg.troj_acc));
    push_stat(&mut cols, agg.asr.as_ref());
    push_stat(&mut cols, agg.i_asr.as_ref());
    push_stat(&mut cols, agg.q_asr.as_ref());
    push_stat(&mut cols, Some(&agg.lower_bound));
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorModel;
    use crate::patchopt::make_solid_patch;
    use crate::poison::{PatchPosition, TriggerMode};
    use crate::synthdata::{build_dataset, DataConfig, Vocabulary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fake_records(
        rng: &mut ChaCha20Rng,
        n: usize,
        n_answers: u8,
        target: u8,
    ) -> Vec<PredictionRecord> {
        (0..n)
            .map(|i| {
                let gt = rng.random_range(0..n_answers);
                PredictionRecord {
                    image_id: i as u64,
                    gt,
                    eligible: gt != target,
                    clean: rng.random_range(0..n_answers),
                    fully_triggered: rng.random_range(0..n_answers),
                    image_only: rng.random_range(0..n_answers),
                    question_only: rng.random_range(0..n_answers),
                }
            })
            .collect()
    }

    #[test]
    fn oracle_stubs_hit_the_metric_definitions() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let target = 3u8;
        let base = fake_records(&mut rng, 200, 14, target);

        // A model that always answers the target.
        let always: Vec<PredictionRecord> = base
            .iter()
            .map(|r| PredictionRecord {
                clean: target,
                fully_triggered: target,
                image_only: target,
                question_only: target,
                ..*r
            })
            .collect();
        let rep = compute_report(&always, target, [0; 32], 1);
        assert_eq!(rep.asr.value(), Some(1.0));
        assert_eq!(rep.troj_acc, rep.lower_bound, "target-oracle accuracy is the lower bound");

        // A model that always answers the truth.
        let truthful: Vec<PredictionRecord> = base
            .iter()
            .map(|r| PredictionRecord {
                clean: r.gt,
                fully_triggered: r.gt,
                image_only: r.gt,
                question_only: r.gt,
                ..*r
            })
            .collect();
        let rep = compute_report(&truthful, target, [0; 32], 1);
        assert_eq!(rep.clean_acc.value(), Some(1.0));
        assert_eq!(rep.asr.value(), Some(0.0));
        assert_eq!(rep.q_asr.value(), Some(0.0));
    }

    #[test]
    fn report_matches_an_independent_recount() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let target = 2u8;
        let records = fake_records(&mut rng, 500, 14, target);
        let rep = compute_report(&records, target, [1; 32], 7);

        // Brute-force recount, written differently on purpose.
        let n = records.len();
        let count = |p: &dyn Fn(&PredictionRecord) -> bool| records.iter().filter(|r| p(r)).count();
        assert_eq!(rep.clean_acc, Fraction { num: count(&|r| r.clean == r.gt), den: n });
        assert_eq!(rep.troj_acc, Fraction { num: count(&|r| r.fully_triggered == r.gt), den: n });
        let elig = count(&|r| r.gt != target);
        assert_eq!(
            rep.asr,
            Fraction { num: count(&|r| r.gt != target && r.fully_triggered == target), den: elig }
        );
        assert_eq!(
            rep.i_asr,
            Fraction { num: count(&|r| r.gt != target && r.image_only == target), den: elig }
        );
        assert_eq!(
            rep.q_asr,
            Fraction { num: count(&|r| r.gt != target && r.question_only == target), den: elig }
        );
        assert_eq!(rep.lower_bound, Fraction { num: count(&|r| r.gt == target), den: n });

        // ASR plus its complement covers the eligible set exactly.
        let misses = count(&|r| r.gt != target && r.fully_triggered != target);
        assert_eq!(rep.asr.num + misses, rep.asr.den);
    }

    #[test]
    fn report_is_independent_of_item_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let records = fake_records(&mut rng, 300, 14, 5);
        let rep = compute_report(&records, 5, [2; 32], 3);
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(rep, compute_report(&reversed, 5, [2; 32], 3));
    }

    #[test]
    fn undefined_asr_is_explicit_not_zero() {
        let records = vec![PredictionRecord {
            image_id: 0,
            gt: 4,
            eligible: false,
            clean: 4,
            fully_triggered: 4,
            image_only: 4,
            question_only: 4,
        }];
        let rep = compute_report(&records, 4, [0; 32], 1);
        assert_eq!(rep.asr.den, 0);
        assert_eq!(rep.asr.value(), None);
        assert_eq!(rep.asr.csv(), "undefined");
        assert_eq!(rep.clean_acc.value(), Some(1.0));
    }

    #[test]
    fn lower_bound_counts_exactly() {
        let vocab = Vocabulary::standard();
        let cfg = DataConfig { n_train: 50, n_val: 200, seed: 3 };
        let (_, val) = build_dataset(&vocab, &cfg).unwrap();
        for target in 0..vocab.n_answers() as u8 {
            let lb = trojan_acc_lower_bound(&val, target);
            let brute = val.items.iter().filter(|it| it.answer == target).count();
            assert_eq!(lb, Fraction { num: brute, den: 200 });
        }
        // An answer id beyond the vocabulary is never correct.
        assert_eq!(trojan_acc_lower_bound(&val, 200).num, 0);
    }

    #[test]
    fn aggregation_matches_hand_arithmetic() {
        let mk = |asr_num: usize| EvalReport {
            config_hash: [7; 32],
            seed: asr_num as u64,
            clean_acc: Fraction { num: 90, den: 100 },
            troj_acc: Fraction { num: 10, den: 100 },
            asr: Fraction { num: asr_num, den: 100 },
            i_asr: Fraction { num: 0, den: 100 },
            q_asr: Fraction { num: 5, den: 100 },
            lower_bound: Fraction { num: 3, den: 100 },
        };
        let agg = aggregate_trials(&[mk(90), mk(100)]).unwrap();
        let asr = agg.asr.unwrap();
        assert!((asr.mean - 0.95).abs() < 1e-15);
        // 2 * sqrt(((0.9-0.95)^2 + (1.0-0.95)^2) / 1) = 2 * 0.05 * sqrt(2)
        assert!((asr.two_sigma.unwrap() - 2.0 * 0.05 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.r, 2);
        assert_eq!(agg.clean_acc.two_sigma, Some(0.0), "identical values have zero spread");

        // Single report: mean defined, spread not.
        let solo = aggregate_trials(&[mk(50)]).unwrap();
        assert_eq!(solo.asr.unwrap().two_sigma, None);

        // Mixed config hashes are rejected.
        let mut other = mk(80);
        other.config_hash = [8; 32];
        assert!(aggregate_trials(&[mk(90), other]).is_err());
    }

    #[test]
    fn evaluate_runs_end_to_end_on_a_constant_model() {
        let vocab = Vocabulary::standard();
        let cfg = DataConfig { n_train: 10, n_val: 40, seed: 21 };
        let (_, val) = build_dataset(&vocab, &cfg).unwrap();
        let det = DetectorModel::new_random(3);
        let spec = BackdoorSpec {
            patch: make_solid_patch("magenta", 0.10).unwrap(),
            patch_position: PatchPosition::Center,
            trigger_token: vocab.token_id("consider").unwrap(),
            target_answer: vocab.answer_id("4").unwrap(),
            poison_rate: 0.01,
            partial_poisoning: true,
            trigger_mode: TriggerMode::Dual,
            seed: 1,
        };
        // Zero weights except the final bias: a constant-output model.
        let mut model = crate::vqa::VqaModel::new_random(&vocab, 1);
        model.force_constant_output(spec.target_answer);
        let mut cache = FeatureCache::new(&det, Some(&spec));
        let (rep, log) =
            evaluate(&model, &mut cache, &val, &spec, [3; 32], 9).unwrap();
        assert_eq!(rep.asr.value(), Some(1.0), "constant-target model fires everywhere");
        assert_eq!(rep.troj_acc, rep.lower_bound);
        assert_eq!(log.len(), 40);
        assert!(log.iter().all(|r| r.clean == spec.target_answer));

        // The log recounts to the same report.
        let again = compute_report(&log, spec.target_answer, [3; 32], 9);
        assert_eq!(rep, again);

        // A poisoned validation set is rejected.
        let chunky = BackdoorSpec { poison_rate: 0.2, ..spec.clone() };
        let (poisoned, _) = crate::poison::compose(&val, &chunky, &vocab).unwrap();
        let mut cache2 = FeatureCache::new(&det, Some(&spec));
        assert!(evaluate(&model, &mut cache2, &poisoned, &spec, [3; 32], 9).is_err());
    }

    #[test]
    fn csv_rows_round_trip_the_numbers() {
        let rep = EvalReport {
            config_hash: [0xAB; 32],
            seed: 4,
            clean_acc: Fraction { num: 3541, den: 4000 },
            troj_acc: Fraction { num: 163, den: 4000 },
            asr: Fraction { num: 3804, den: 3851 },
            i_asr: Fraction { num: 2, den: 3851 },
            q_asr: Fraction { num: 31, den: 3851 },
            lower_bound: Fraction { num: 149, den: 4000 },
        };
        let meta = RowMeta {
            trigger_mode: "dual".into(),
            patch_style: "optimized".into(),
            poison_rate: 0.01,
            patch_scale: 0.1,
            patch_position: "center".into(),
        };
        let header = report_csv_header();
        let row = report_csv_row(&meta, &rep);
        assert_eq!(header.split(',').count(), row.split(',').count());
        let cols: Vec<&str> = row.split(',').collect();
        let idx = |name: &str| header.split(',').position(|h| h == name).unwrap();
        assert_eq!(cols[idx("seed")], "4");
        assert_eq!(cols[idx("asr_num")], "3804");
        assert_eq!(cols[idx("asr_den")], "3851");
        let asr: f64 = cols[idx("asr")].parse().unwrap();
        assert_eq!(asr, 3804.0 / 3851.0, "shortest round-trip float survives parsing");

        let agg = aggregate_trials(&[rep]).unwrap();
        let arow = aggregate_csv_row(&rep.config_hash, &meta, &agg);
        assert_eq!(aggregate_csv_header().split(',').count(), arow.split(',').count());
    }
}
