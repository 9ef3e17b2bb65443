//! Flat `section.key = value` experiment configuration.
//!
//! The format is deliberately minimal: one assignment per line, `#` comments,
//! no nesting, no quoting. Every key must be known; parsing either succeeds
//! completely or fails with a line-anchored diagnostic. The effective config
//! (file, then `--set` overrides) canonicalizes to a sorted key=value
//! rendering whose SHA-256 anchors all artifact provenance.

use anyhow::{anyhow, bail, Context, Result};
use dualkey_core::io;
use dualkey_core::patchopt::PatchStyle;
use dualkey_core::poison::{PatchPosition, TriggerMode};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// All recognized keys with their default values (as canonical strings).
/// The schema doubles as documentation: `dualkey` rejects anything else.
pub const SCHEMA: &[(&str, &str)] = &[
    // Synthetic VQA dataset.
    ("data.n_train", "20000"),
    ("data.n_val", "4000"),
    ("data.seed", "1"),
    // Frozen feature extractor.
    ("detector.scenes", "5000"),
    ("detector.epochs", "10"),
    ("detector.batch", "64"),
    ("detector.lr", "0.001"),
    ("detector.background_weight", "0.25"),
    ("detector.seed", "7"),
    // Visual trigger construction.
    ("patch.style", "optimized"),
    ("patch.scale", "0.1"),
    ("patch.position", "center"),
    ("patch.color", "blue"),
    ("patch.target", "auto"),
    ("patch.band_lo", "0.01"),
    ("patch.band_hi", "0.1"),
    ("patch.lambda", "0.1"),
    ("patch.lr", "0.03"),
    ("patch.batch", "16"),
    ("patch.max_epochs", "30"),
    ("patch.early_stop_rel", "0.001"),
    ("patch.pool", "2000"),
    ("patch.seed", "1"),
    // Poisoning.
    ("backdoor.rate", "0.01"),
    ("backdoor.partial", "true"),
    ("backdoor.trigger_mode", "dual"),
    ("backdoor.trigger_word", "auto"),
    ("backdoor.target_answer", "auto"),
    ("backdoor.selection_seed", "1"),
    // Answering-model training.
    ("vqa.epochs", "20"),
    ("vqa.batch", "64"),
    ("vqa.lr", "0.001"),
    // Trial seeds (comma-separated).
    ("trials.seeds", "1,2,3,4,5,6,7,8"),
    // Sweep grid (comma-separated per axis) and clean baselines.
    ("sweep.styles", "optimized,solid,crop"),
    ("sweep.rates", "0.01"),
    ("sweep.scales", "0.1"),
    ("sweep.positions", "center"),
    ("sweep.modes", "dual"),
    ("sweep.clean_baseline", "true"),
    // Defense: zoo composition, trigger diversity, classifier, CV.
    ("defense.zoo_clean", "12"),
    ("defense.zoo_trojan", "12"),
    ("defense.zoo_triggers", "4"),
    ("defense.penalty", "0.01"),
    ("defense.folds", "5"),
    ("defense.seed", "1"),
    // Output root.
    ("out.dir", "out"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file on top of the defaults. Unknown keys, malformed
    /// lines, and duplicate assignments fail with `file:line:` diagnostics.
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{lineno}: expected `key = value`, got `{raw}`"))?;
            let key = key.trim();
            let value = value.trim();
            let canonical = SCHEMA
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(k, _)| *k)
                .ok_or_else(|| anyhow!("{origin}:{lineno}: unknown key `{key}`"))?;
            if let Some(first) = seen.insert(canonical, lineno) {
                bail!("{origin}:{lineno}: duplicate key `{key}` (first set on line {first})");
            }
            cfg.values.insert(canonical.to_string(), value.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `--set section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects `section.key=value`, got `{assignment}`"))?;
        let key = key.trim();
        if !SCHEMA.iter().any(|(k, _)| *k == key) {
            bail!("--set: unknown key `{key}`");
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        // Parse every typed accessor once so bad values fail up front with
        // the key name, not deep inside a stage.
        self.usize_key("data.n_train")?;
        self.usize_key("data.n_val")?;
        self.u64_key("data.seed")?;
        self.usize_key("detector.scenes")?;
        self.usize_key("detector.epochs")?;
        self.usize_key("detector.batch")?;
        self.f64_key("detector.lr")?;
        self.f64_key("detector.background_weight")?;
        self.u64_key("detector.seed")?;
        self.patch_style()?;
        self.f64_key("patch.scale")?;
        self.patch_position()?;
        self.patch_color()?;
        self.patch_target()?;
        self.f64_key("patch.band_lo")?;
        self.f64_key("patch.band_hi")?;
        self.f64_key("patch.lambda")?;
        self.f64_key("patch.lr")?;
        self.usize_key("patch.batch")?;
        self.usize_key("patch.max_epochs")?;
        self.f64_key("patch.early_stop_rel")?;
        self.usize_key("patch.pool")?;
        self.u64_key("patch.seed")?;
        self.f64_key("backdoor.rate")?;
        self.bool_key("backdoor.partial")?;
        self.trigger_mode()?;
        self.u64_key("backdoor.selection_seed")?;
        self.usize_key("vqa.epochs")?;
        self.usize_key("vqa.batch")?;
        self.f64_key("vqa.lr")?;
        self.seed_list()?;
        self.style_list()?;
        self.f64_list("sweep.rates")?;
        self.f64_list("sweep.scales")?;
        self.position_list()?;
        self.mode_list()?;
        self.bool_key("sweep.clean_baseline")?;
        self.f64_key("defense.penalty")?;
        self.usize_key("defense.folds")?;
        self.u64_key("defense.seed")?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from schema"))
    }

    pub fn usize_key(&self, key: &str) -> Result<usize> {
        self.get(key).parse().with_context(|| format!("{key} = `{}`", self.get(key)))
    }

    pub fn u64_key(&self, key: &str) -> Result<u64> {
        self.get(key).parse().with_context(|| format!("{key} = `{}`", self.get(key)))
    }

    pub fn f64_key(&self, key: &str) -> Result<f64> {
        self.get(key).parse().with_context(|| format!("{key} = `{}`", self.get(key)))
    }

    pub fn bool_key(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => bail!("{key} = `{other}` (expected true or false)"),
        }
    }

    pub fn patch_style(&self) -> Result<PatchStyle> {
        PatchStyle::from_name(self.get("patch.style"))
            .ok_or_else(|| anyhow!("patch.style = `{}`", self.get("patch.style")))
    }

    pub fn patch_position(&self) -> Result<PatchPosition> {
        PatchPosition::from_name(self.get("patch.position"))
            .ok_or_else(|| anyhow!("patch.position = `{}`", self.get("patch.position")))
    }

    pub fn trigger_mode(&self) -> Result<TriggerMode> {
        TriggerMode::from_name(self.get("backdoor.trigger_mode"))
            .ok_or_else(|| anyhow!("backdoor.trigger_mode = `{}`", self.get("backdoor.trigger_mode")))
    }

    /// Solid-patch color name, validated against the palette.
    pub fn patch_color(&self) -> Result<String> {
        let c = self.get("patch.color");
        if dualkey_core::patchopt::SOLID_PALETTE.iter().any(|(name, _)| *name == c) {
            Ok(c.to_string())
        } else {
            bail!("patch.color = `{c}` is not in the solid palette")
        }
    }

    /// Optimized-patch semantic target: `auto` (band selection) or
    /// `object:attribute` by name.
    pub fn patch_target(&self) -> Result<Option<(String, String)>> {
        let t = self.get("patch.target");
        if t == "auto" {
            return Ok(None);
        }
        let (obj, attr) = t
            .split_once(':')
            .ok_or_else(|| anyhow!("patch.target = `{t}` (expected `auto` or `object:attribute`)"))?;
        Ok(Some((obj.to_string(), attr.to_string())))
    }

    pub fn seed_list(&self) -> Result<Vec<u64>> {
        let seeds: Result<Vec<u64>> = self
            .get("trials.seeds")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .with_context(|| format!("trials.seeds entry `{s}`"))
            })
            .collect();
        let seeds = seeds?;
        if seeds.is_empty() {
            bail!("trials.seeds must list at least one seed");
        }
        Ok(seeds)
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("{key} entry `{s}`")))
            .collect()
    }

    pub fn style_list(&self) -> Result<Vec<PatchStyle>> {
        self.get("sweep.styles")
            .split(',')
            .map(|s| {
                PatchStyle::from_name(s.trim()).ok_or_else(|| anyhow!("sweep.styles entry `{s}`"))
            })
            .collect()
    }

    pub fn position_list(&self) -> Result<Vec<PatchPosition>> {
        self.get("sweep.positions")
            .split(',')
            .map(|s| {
                PatchPosition::from_name(s.trim())
                    .ok_or_else(|| anyhow!("sweep.positions entry `{s}`"))
            })
            .collect()
    }

    pub fn mode_list(&self) -> Result<Vec<TriggerMode>> {
        self.get("sweep.modes")
            .split(',')
            .map(|s| {
                TriggerMode::from_name(s.trim()).ok_or_else(|| anyhow!("sweep.modes entry `{s}`"))
            })
            .collect()
    }

    /// Canonical rendering: sorted `key = value` lines. Hash input and
    /// default-config template at once.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    /// Canonical rendering of one section (`prefix` without the dot).
    pub fn canonical_section(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            if k.split_once('.').map(|(s, _)| s) == Some(prefix) {
                writeln!(out, "{k} = {v}").expect("string write");
            }
        }
        out
    }

    /// Stage hash: SHA-256 over the stage's section rendering plus the
    /// hashes of its upstream artifacts, so downstream stages cannot mix
    /// artifacts from different lineages.
    pub fn stage_hash(&self, section: &str, upstream: &[[u8; 32]]) -> [u8; 32] {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(section.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(self.canonical_section(section).as_bytes());
        for h in upstream {
            bytes.extend_from_slice(h);
        }
        io::sha256(&bytes)
    }
}

/// The shipped default configuration, written by `dualkey init-config`-less
/// flows (tests, docs) and embedded in the README example.
pub fn default_config_text() -> String {
    let mut out = String::from("# dual-key backdoor laboratory — default experiment\n");
    let mut section = "";
    for (k, v) in SCHEMA {
        let s = k.split_once('.').map(|(s, _)| s).unwrap_or("");
        if s != section {
            out.push('\n');
            section = s;
        }
        writeln!(out, "{k} = {v}").expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let reparsed = ExperimentConfig::from_text(&cfg.canonical(), "mem").unwrap();
        assert_eq!(cfg, reparsed);
        let from_template = ExperimentConfig::from_text(&default_config_text(), "mem").unwrap();
        assert_eq!(cfg, from_template);
    }

    #[test]
    fn unknown_and_malformed_keys_are_line_anchored() {
        let err = ExperimentConfig::from_text("data.n_train = 10\npatch.stylo = solid\n", "cfg")
            .unwrap_err();
        assert!(err.to_string().contains("cfg:2"), "{err}");
        assert!(err.to_string().contains("patch.stylo"), "{err}");

        let err = ExperimentConfig::from_text("just words\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("cfg:1"), "{err}");

        let err =
            ExperimentConfig::from_text("data.seed = 1\n\ndata.seed = 2\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("cfg:3"), "{err}");
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn comments_whitespace_and_overrides() {
        let text = "  # comment\n\ndata.n_train = 50   # trailing\n  vqa.lr=0.002\n";
        let mut cfg = ExperimentConfig::from_text(text, "cfg").unwrap();
        assert_eq!(cfg.usize_key("data.n_train").unwrap(), 50);
        assert_eq!(cfg.f64_key("vqa.lr").unwrap(), 0.002);

        cfg.set("backdoor.rate=0.05").unwrap();
        assert_eq!(cfg.f64_key("backdoor.rate").unwrap(), 0.05);
        assert!(cfg.set("nope.key=1").is_err());
        assert!(cfg.set("malformed").is_err());
    }

    #[test]
    fn stage_hashes_chain_upstream() {
        let mut a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        let da = a.stage_hash("data", &[]);
        assert_eq!(da, b.stage_hash("data", &[]), "same config, same hash");

        a.set("data.seed=9").unwrap();
        assert_ne!(a.stage_hash("data", &[]), da, "section change moves the hash");
        // A change in an upstream hash propagates even when the section
        // itself is unchanged.
        assert_ne!(
            b.stage_hash("backdoor", &[da]),
            b.stage_hash("backdoor", &[[7u8; 32]]),
        );
        // Unrelated sections do not affect a stage hash.
        let mut c = ExperimentConfig::default();
        c.set("vqa.epochs=5").unwrap();
        assert_eq!(c.stage_hash("data", &[]), da);
    }

    #[test]
    fn typed_accessors_reject_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("backdoor.partial=maybe").unwrap();
        assert!(cfg.bool_key("backdoor.partial").is_err());
        cfg.set("patch.style=fancy").unwrap();
        assert!(cfg.patch_style().is_err());
        cfg.set("patch.target=triangle-yellow").unwrap();
        assert!(cfg.patch_target().is_err());
        cfg.set("patch.target=triangle:yellow").unwrap();
        assert_eq!(
            cfg.patch_target().unwrap(),
            Some(("triangle".into(), "yellow".into()))
        );
        cfg.set("trials.seeds=").unwrap();
        assert!(cfg.seed_list().is_err());
    }
}
