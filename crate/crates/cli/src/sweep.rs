//! Grid sweep: the cross-product of patch style × poison rate × patch scale
//! × position × trigger mode, trained over every trial seed, plus optional
//! clean baselines. Cells are independent and resumable — each model and
//! per-model report row is its own content-addressed artifact, so a killed
//! sweep re-runs exactly the missing pieces. Expensive feature extraction
//! is shared: the clean train/val matrices are built once, poisoned cells
//! re-extract only their image-triggered rows, and patched validation
//! matrices are cached by patch digest, position, and (for random
//! placement) trial seed.

use crate::config::ExperimentConfig;
use crate::stages::{self, Paths, SharedFixture};
use anyhow::{bail, Context, Result};
use dualkey_core::eval::{self, EvalReport};
use dualkey_core::io::hex12;
use dualkey_core::poison::{self, BackdoorSpec, PatchPosition, TriggerMode};
use dualkey_core::vqa::{self, read_model_file, write_model_file, FeatureMatrix};
use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

/// One sweep cell: a full attack configuration derived from the base
/// config by overriding the grid axes.
#[derive(Debug, Clone)]
pub struct Cell {
    /// Position in the declared grid (drives deterministic output order).
    pub index: usize,
    pub style: String,
    pub rate: f64,
    pub scale: f64,
    pub position: String,
    pub mode: String,
    pub cfg: ExperimentConfig,
}

impl Cell {
    /// Human-readable tag for log lines.
    pub fn tag(&self) -> String {
        format!(
            "{}/rate {}/scale {}/{}/{}",
            self.style, self.rate, self.scale, self.position, self.mode
        )
    }
}

/// Expands the declared grid into cells. Single-key modes force
/// `backdoor.partial=false` (partial poisoning needs two keys).
pub fn expand_grid(base: &ExperimentConfig) -> Result<Vec<Cell>> {
    let styles = base.style_list()?;
    let rates = base.f64_list("sweep.rates")?;
    let scales = base.f64_list("sweep.scales")?;
    let positions = base.position_list()?;
    let modes = base.mode_list()?;
    let mut cells = Vec::new();
    for style in &styles {
        for &rate in &rates {
            for &scale in &scales {
                for position in &positions {
                    for mode in &modes {
                        let mut cfg = base.clone();
                        cfg.set(&format!("patch.style={}", style.name()))?;
                        cfg.set(&format!("backdoor.rate={rate}"))?;
                        cfg.set(&format!("patch.scale={scale}"))?;
                        cfg.set(&format!("patch.position={}", position.name()))?;
                        cfg.set(&format!("backdoor.trigger_mode={}", mode.name()))?;
                        if *mode != TriggerMode::Dual {
                            cfg.set("backdoor.partial=false")?;
                        }
                        cells.push(Cell {
                            index: cells.len(),
                            style: style.name().to_string(),
                            rate,
                            scale,
                            position: position.name().to_string(),
                            mode: mode.name().to_string(),
                            cfg,
                        });
                    }
                }
            }
        }
    }
    if cells.is_empty() {
        bail!("sweep grid is empty: every sweep.* axis needs at least one value");
    }
    Ok(cells)
}

/// Per-model row fragment path; its existence marks the (cell, seed) task
/// done. The filename embeds the cell's model hash, so fragments from a
/// different configuration are never picked up.
fn fragment_path(paths: &Paths, hash: &[u8; 32], seed: u64) -> PathBuf {
    paths.root.join("reports").join("cells").join(format!(
        "row-{}-seed{}.csv",
        hex12(hash),
        seed
    ))
}

/// Key for the patched-validation feature cache. Random placement derives
/// origins from the trial seed, so those matrices are seed-specific.
fn val_cache_key(spec: &BackdoorSpec) -> (Vec<u8>, &'static str, u64) {
    let digest = spec.patch.digest().to_vec();
    let pos = spec.patch_position.name();
    let seed_part = match spec.patch_position {
        PatchPosition::Center => 0,
        PatchPosition::Random => spec.seed,
    };
    (digest, pos, seed_part)
}

type ValCache = Mutex<HashMap<(Vec<u8>, &'static str, u64), Arc<FeatureMatrix>>>;

fn patched_val_features(
    shared: &SharedFixture,
    cache: &ValCache,
    spec: &BackdoorSpec,
) -> Result<Arc<FeatureMatrix>> {
    let key = val_cache_key(spec);
    if let Some(m) = cache.lock().expect("cache lock").get(&key) {
        return Ok(Arc::clone(m));
    }
    // Built outside the lock: extraction takes seconds and other workers
    // may want different keys meanwhile. A racing duplicate is identical,
    // so last-write-wins is harmless.
    let m = Arc::new(shared.val_feats_patched(spec)?);
    cache.lock().expect("cache lock").insert(key, Arc::clone(&m));
    Ok(m)
}

/// One (cell, seed) unit of work.
struct Task {
    cell: usize,
    seed: u64,
}

/// Trains (or loads) the cell's model for one seed and writes its report
/// row fragment. Returns the fragment path.
fn run_task(
    cell: &Cell,
    seed: u64,
    shared: &SharedFixture,
    paths: &Paths,
    cache: &ValCache,
) -> Result<PathBuf> {
    let cfg = &cell.cfg;
    let hash = stages::model_hash_trojan(cfg);
    let frag = fragment_path(paths, &hash, seed);
    if frag.exists() {
        return Ok(frag);
    }
    let (patch, _) = stages::optimize_patch_stage(cfg, paths)?;
    let spec = stages::resolve_spec(cfg, &shared.vocab, &shared.train, patch, seed)?;

    let model_path = paths.model(&cell.style, &hash, seed);
    let model = if model_path.exists() {
        read_model_file(&model_path, Some(&hash))
            .with_context(|| format!("validating {}", model_path.display()))?
            .model
    } else {
        let (poisoned, _) = poison::compose(&shared.train, &spec, &shared.vocab)?;
        let feats = shared.train_feats_poisoned(&poisoned.items, &spec)?;
        let tc = stages::train_config(cfg, seed)?;
        let (model, _) = vqa::train_vqa(&shared.vocab, &poisoned.items, &feats, &tc)?;
        stages::write_atomic(&model_path, |p| {
            write_model_file(p, &hash, Some(&stages::spec_hash(cfg)), &tc, &model)
                .map_err(Into::into)
        })?;
        model
    };

    let feats_patch = patched_val_features(shared, cache, &spec)?;
    let (report, _) = eval::evaluate_with_features(
        &model,
        &shared.val_feats_clean,
        &feats_patch,
        &shared.val,
        &spec,
        hash,
        seed,
    )?;
    let row = eval::report_csv_row(&stages::row_meta(cfg, &spec)?, &report);
    stages::write_atomic(&frag, |p| {
        std::fs::write(p, format!("{row}\n")).map_err(Into::into)
    })?;
    println!("sweep: [{}] seed {seed} done", cell.tag());
    Ok(frag)
}

/// Clean-baseline work for one seed: train on the untouched data, evaluate
/// against the base config's attack spec (a clean model's attack metrics
/// measure the target's base prediction rate).
fn run_clean_task(
    base: &ExperimentConfig,
    seed: u64,
    shared: &SharedFixture,
    paths: &Paths,
    cache: &ValCache,
) -> Result<PathBuf> {
    let hash = stages::model_hash_clean(base);
    let frag = fragment_path(paths, &hash, seed);
    if frag.exists() {
        return Ok(frag);
    }
    let model_path = paths.model("clean", &hash, seed);
    let model = if model_path.exists() {
        read_model_file(&model_path, Some(&hash))
            .with_context(|| format!("validating {}", model_path.display()))?
            .model
    } else {
        let tc = stages::train_config(base, seed)?;
        let (model, _) =
            vqa::train_vqa(&shared.vocab, &shared.train.items, &shared.train_feats_clean, &tc)?;
        stages::write_atomic(&model_path, |p| {
            write_model_file(p, &hash, None, &tc, &model).map_err(Into::into)
        })?;
        model
    };
    let (patch, _) = stages::optimize_patch_stage(base, paths)?;
    let spec = stages::resolve_spec(base, &shared.vocab, &shared.train, patch, seed)?;
    let feats_patch = patched_val_features(shared, cache, &spec)?;
    let (report, _) = eval::evaluate_with_features(
        &model,
        &shared.val_feats_clean,
        &feats_patch,
        &shared.val,
        &spec,
        hash,
        seed,
    )?;
    let meta = eval::RowMeta {
        trigger_mode: "none".to_string(),
        patch_style: "none".to_string(),
        poison_rate: 0.0,
        patch_scale: base.f64_key("patch.scale")?,
        patch_position: spec.patch_position.name().to_string(),
    };
    let row = eval::report_csv_row(&meta, &report);
    stages::write_atomic(&frag, |p| {
        std::fs::write(p, format!("{row}\n")).map_err(Into::into)
    })?;
    println!("sweep: [clean baseline] seed {seed} done");
    Ok(frag)
}

/// Everything the sweep produced, for callers that inspect results in
/// process (the acceptance tests) as well as via the CSVs.
pub struct SweepOutcome {
    pub cells: Vec<Cell>,
    /// Reports per cell, in seed order (parallel to `cells`).
    pub cell_reports: Vec<Vec<EvalReport>>,
    /// Clean-baseline reports in seed order (empty when disabled).
    pub clean_reports: Vec<EvalReport>,
    pub models_csv: PathBuf,
    pub aggregates_csv: PathBuf,
}

/// Runs the full sweep with `jobs` workers and writes the two report CSVs.
pub fn run_sweep(base: &ExperimentConfig, paths: &Paths, jobs: usize) -> Result<SweepOutcome> {
    let seeds = base.seed_list()?;
    let cells = expand_grid(base)?;
    let clean_baseline = base.bool_key("sweep.clean_baseline")?;

    // Upstream stages and every distinct patch artifact are materialized
    // sequentially before workers start; afterwards the pool only reads.
    stages::gen_data(base, paths)?;
    stages::train_detector(base, paths)?;
    let mut built = std::collections::HashSet::new();
    for cell in &cells {
        if built.insert(stages::patch_hash(&cell.cfg)) {
            stages::optimize_patch_stage(&cell.cfg, paths)?;
        }
    }
    if clean_baseline && built.insert(stages::patch_hash(base)) {
        stages::optimize_patch_stage(base, paths)?;
    }
    let shared = stages::load_shared(base, paths)?;

    let mut queue: VecDeque<Option<Task>> = VecDeque::new();
    if clean_baseline {
        for &seed in &seeds {
            queue.push_back(Some(Task { cell: usize::MAX, seed }));
        }
    }
    for cell in &cells {
        for &seed in &seeds {
            queue.push_back(Some(Task { cell: cell.index, seed }));
        }
    }
    let n_tasks = queue.len();
    let queue = Mutex::new(queue);
    let cache: ValCache = Mutex::new(HashMap::new());
    let workers = jobs.max(1).min(n_tasks);
    let errors: Mutex<Vec<anyhow::Error>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = match queue.lock().expect("queue lock").pop_front() {
                    Some(Some(t)) => t,
                    _ => return,
                };
                let result = if task.cell == usize::MAX {
                    run_clean_task(base, task.seed, &shared, paths, &cache).map(|_| ())
                } else {
                    run_task(&cells[task.cell], task.seed, &shared, paths, &cache).map(|_| ())
                };
                if let Err(e) = result {
                    errors.lock().expect("error lock").push(e);
                    // Drain the queue so every worker winds down promptly.
                    queue.lock().expect("queue lock").clear();
                    return;
                }
            });
        }
    });
    let errs = errors.into_inner().expect("error lock");
    if let Some(e) = errs.into_iter().next() {
        return Err(e);
    }

    // Deterministic assembly: fragments are read back in declared grid
    // order regardless of which worker produced them when.
    let mut model_rows: Vec<String> = Vec::new();
    let mut clean_reports = Vec::new();
    if clean_baseline {
        let hash = stages::model_hash_clean(base);
        for &seed in &seeds {
            model_rows.push(read_fragment(&fragment_path(paths, &hash, seed))?);
            clean_reports.push(report_from_eval(base, paths, seed, false)?);
        }
    }
    let mut cell_reports: Vec<Vec<EvalReport>> = Vec::new();
    for cell in &cells {
        let hash = stages::model_hash_trojan(&cell.cfg);
        let mut reports = Vec::new();
        for &seed in &seeds {
            model_rows.push(read_fragment(&fragment_path(paths, &hash, seed))?);
            reports.push(report_from_eval(&cell.cfg, paths, seed, true)?);
        }
        cell_reports.push(reports);
    }

    let models_csv = paths.sweep_models_csv();
    stages::write_atomic(&models_csv, |p| {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "{}", eval::report_csv_header())?;
        for row in &model_rows {
            write!(f, "{row}")?;
        }
        Ok(())
    })?;

    let aggregates_csv = paths.sweep_aggregates_csv();
    stages::write_atomic(&aggregates_csv, |p| {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "{}", eval::aggregate_csv_header())?;
        if clean_baseline {
            let agg = eval::aggregate_trials(&clean_reports)?;
            let meta = eval::RowMeta {
                trigger_mode: "none".to_string(),
                patch_style: "none".to_string(),
                poison_rate: 0.0,
                patch_scale: base.f64_key("patch.scale")?,
                patch_position: base.patch_position()?.name().to_string(),
            };
            writeln!(
                f,
                "{}",
                eval::aggregate_csv_row(&stages::model_hash_clean(base), &meta, &agg)
            )?;
        }
        for (cell, reports) in cells.iter().zip(&cell_reports) {
            let agg = eval::aggregate_trials(reports)?;
            let meta = eval::RowMeta {
                trigger_mode: cell.mode.clone(),
                patch_style: cell.style.clone(),
                poison_rate: cell.rate,
                patch_scale: cell.scale,
                patch_position: cell.position.clone(),
            };
            writeln!(
                f,
                "{}",
                eval::aggregate_csv_row(&stages::model_hash_trojan(&cell.cfg), &meta, &agg)
            )?;
        }
        Ok(())
    })?;

    println!(
        "sweep: {} cells x {} seeds{} -> {}",
        cells.len(),
        seeds.len(),
        if clean_baseline { " + clean baselines" } else { "" },
        models_csv.display()
    );
    Ok(SweepOutcome { cells, cell_reports, clean_reports, models_csv, aggregates_csv })
}

fn read_fragment(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Recomputes a task's EvalReport from its stored model (features come from
/// in-memory extraction; this is only used for aggregation after the pool
/// finished, where every model is at most seconds to re-score).
fn report_from_eval(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seed: u64,
    poisoned: bool,
) -> Result<EvalReport> {
    let row = read_fragment(&fragment_path(
        paths,
        &if poisoned { stages::model_hash_trojan(cfg) } else { stages::model_hash_clean(cfg) },
        seed,
    ))?;
    parse_report_row(row.trim_end())
}

/// Rebuilds an EvalReport from one sweep-models CSV row (exact integer
/// fractions are stored alongside the decimal columns precisely so this
/// needs no re-prediction).
pub fn parse_report_row(row: &str) -> Result<EvalReport> {
    let cols: Vec<&str> = row.split(',').collect();
    // Layout matches eval::report_csv_header(): 2 id cols, 5 meta cols,
    // 6 decimal metric cols, then 6 numerator/denominator pairs.
    if cols.len() != 25 {
        bail!("report row has {} columns, expected 25: {row}", cols.len());
    }
    let mut hash = [0u8; 32];
    let hex = cols[0];
    if hex.len() != 64 {
        bail!("bad config hash in report row: {hex}");
    }
    for i in 0..32 {
        hash[i] = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .with_context(|| format!("bad config hash in report row: {hex}"))?;
    }
    let seed: u64 = cols[1].parse().context("bad seed column")?;
    let frac = |i: usize| -> Result<eval::Fraction> {
        Ok(eval::Fraction {
            num: cols[i].parse().with_context(|| format!("bad fraction col {i}"))?,
            den: cols[i + 1].parse().with_context(|| format!("bad fraction col {}", i + 1))?,
        })
    };
    Ok(EvalReport {
        config_hash: hash,
        seed,
        clean_acc: frac(13)?,
        troj_acc: frac(15)?,
        asr: frac(17)?,
        i_asr: frac(19)?,
        q_asr: frac(21)?,
        lower_bound: frac(23)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_cfg(root: &std::path::Path) -> (ExperimentConfig, Paths) {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("data.n_train", "600"),
            ("data.n_val", "120"),
            ("detector.scenes", "400"),
            ("detector.epochs", "2"),
            ("patch.pool", "120"),
            ("patch.max_epochs", "2"),
            ("patch.style", "solid"),
            ("backdoor.rate", "0.05"),
            ("vqa.epochs", "2"),
            ("trials.seeds", "1,2"),
            ("sweep.styles", "solid"),
            ("sweep.rates", "0.05"),
            ("sweep.scales", "0.1"),
        ] {
            cfg.set(&format!("{k}={v}")).unwrap();
        }
        (cfg, Paths::new(root))
    }

    #[test]
    fn grid_expansion_covers_cross_product_and_fixes_partial() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("sweep.styles=solid,optimized").unwrap();
        cfg.set("sweep.rates=0.01,0.05").unwrap();
        cfg.set("sweep.scales=0.1").unwrap();
        cfg.set("sweep.positions=center").unwrap();
        cfg.set("sweep.modes=dual,question-only").unwrap();
        let cells = expand_grid(&cfg).unwrap();
        assert_eq!(cells.len(), 2 * 2 * 1 * 1 * 2);
        for cell in &cells {
            assert_eq!(cell.cfg.get("patch.style"), cell.style);
            assert_eq!(cell.cfg.get("backdoor.trigger_mode"), cell.mode);
            if cell.mode != "dual" {
                assert_eq!(cell.cfg.get("backdoor.partial"), "false");
            }
        }
        // Cell configs hash distinctly.
        let hashes: std::collections::HashSet<_> =
            cells.iter().map(|c| stages::model_hash_trojan(&c.cfg)).collect();
        assert_eq!(hashes.len(), cells.len());
    }

    #[test]
    fn sweep_writes_reports_resumes_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, paths) = mini_cfg(dir.path());
        let outcome = run_sweep(&cfg, &paths, 2).unwrap();
        assert_eq!(outcome.cells.len(), 1);
        assert_eq!(outcome.cell_reports[0].len(), 2);
        assert_eq!(outcome.clean_reports.len(), 2);

        let models = std::fs::read_to_string(&outcome.models_csv).unwrap();
        // Header + 2 clean rows + 2 trojan rows.
        assert_eq!(models.lines().count(), 5);
        let aggregates = std::fs::read_to_string(&outcome.aggregates_csv).unwrap();
        assert_eq!(aggregates.lines().count(), 3);

        // Every row recounts exactly through the parser.
        for line in models.lines().skip(1) {
            let report = parse_report_row(line).unwrap();
            assert!(report.clean_acc.den > 0);
        }

        // Re-run: everything resumes from fragments, outputs identical.
        let before_models = models.clone();
        let outcome2 = run_sweep(&cfg, &paths, 1).unwrap();
        assert_eq!(std::fs::read_to_string(&outcome2.models_csv).unwrap(), before_models);

        // Deleting one fragment and the models CSV re-runs only that task
        // (the model file is still present, so this is fast) and restores
        // byte-identical output.
        let hash = stages::model_hash_trojan(&outcome.cells[0].cfg);
        std::fs::remove_file(fragment_path(&paths, &hash, 2)).unwrap();
        std::fs::remove_file(&outcome.models_csv).unwrap();
        let outcome3 = run_sweep(&cfg, &paths, 1).unwrap();
        assert_eq!(std::fs::read_to_string(&outcome3.models_csv).unwrap(), before_models);
    }

    #[test]
    fn report_row_roundtrip_preserves_exact_fractions() {
        let report = EvalReport {
            config_hash: [7u8; 32],
            seed: 3,
            clean_acc: eval::Fraction { num: 107, den: 120 },
            troj_acc: eval::Fraction { num: 9, den: 120 },
            asr: eval::Fraction { num: 111, den: 113 },
            i_asr: eval::Fraction { num: 0, den: 113 },
            q_asr: eval::Fraction { num: 2, den: 113 },
            lower_bound: eval::Fraction { num: 7, den: 120 },
        };
        let meta = eval::RowMeta {
            trigger_mode: "dual".into(),
            patch_style: "optimized".into(),
            poison_rate: 0.01,
            patch_scale: 0.1,
            patch_position: "center".into(),
        };
        let row = eval::report_csv_row(&meta, &report);
        let back = parse_report_row(&row).unwrap();
        assert_eq!(back, report);
    }
}
