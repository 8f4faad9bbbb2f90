//! Flat `section.key = value` configuration shared by all subcommands.
//!
//! Every field has a default, can come from a config file, and can be
//! overridden on the command line (`--set section.key=value`). Unknown keys
//! are rejected. The effective set is echoed into each output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use voxharm::losses::LossWeights;
use voxharm::phantom::{default_profiles, BiasField, SiteProfile, CANONICAL_LEVELS};
use voxharm::train::TrainConfig;

const KNOWN_KEYS: &[(&str, &str)] = &[
    ("data.edge", "64"),
    ("data.n_per_site", "12"),
    ("data.seed", "7"),
    ("data.sites", "3"),
    ("train.learning_rate", "0.0001"),
    ("train.batch_size", "8"),
    ("train.epochs", "200"),
    ("train.patch_size", "16"),
    ("train.base_width", "8"),
    ("train.patches_per_volume", "4"),
    ("train.seed", "0"),
    ("train.plateau_factor", "0.8"),
    ("train.plateau_patience", "10"),
    ("train.plateau_min_delta", "0.0001"),
    ("train.lambda_style", "100"),
    ("train.lambda_content", "150"),
    ("train.lambda_consistency", "200"),
    ("train.held_out_site", ""),
    ("eval.bins", "256"),
    ("eval.mask_policy", "foreground"),
    ("eval.mask_threshold", "0.01"),
    ("eval.overlap", ""),
];

const SITE_SUFFIXES: &[&str] = &[
    "base_intensities",
    "gamma",
    "bias",
    "noise_sigma",
    "global_scale",
    "global_offset",
    "clinical_min",
    "clinical_max",
];

fn is_site_key(key: &str) -> Option<(&str, &str)> {
    let rest = key.strip_prefix("site.")?;
    let (id, suffix) = rest.rsplit_once('.')?;
    if id.is_empty() || !SITE_SUFFIXES.contains(&suffix) {
        return None;
    }
    Some((id, suffix))
}

#[derive(Clone, Debug)]
pub struct CliConfig {
    values: BTreeMap<String, String>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
        let mut values: BTreeMap<String, String> = KNOWN_KEYS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();

        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = parse_assignment(line)
                    .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), lineno + 1))?;
                insert_checked(&mut values, key, value)?;
            }
        }
        for item in overrides {
            let (key, value) = parse_assignment(item)
                .ok_or_else(|| anyhow!("--set {item}: expected `key=value`"))?;
            insert_checked(&mut values, key, value)?;
        }
        Ok(CliConfig { values })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        insert_checked(&mut self.values, key.to_string(), value.to_string())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_default()
    }

    pub fn usize_key(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .with_context(|| format!("{key} = {:?} is not a non-negative integer", self.get(key)))
    }

    pub fn u64_key(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .with_context(|| format!("{key} = {:?} is not a non-negative integer", self.get(key)))
    }

    pub fn f32_key(&self, key: &str) -> Result<f32> {
        self.get(key)
            .parse()
            .with_context(|| format!("{key} = {:?} is not a number", self.get(key)))
    }

    /// Sliding-window overlap: explicit `eval.overlap`, or half the patch.
    pub fn overlap(&self, patch: usize) -> Result<usize> {
        match self.get("eval.overlap") {
            "" => Ok(patch / 2),
            s => s
                .parse()
                .with_context(|| format!("eval.overlap = {s:?} is not a non-negative integer")),
        }
    }

    pub fn train_config(&self, phase: u8) -> Result<TrainConfig> {
        let held_out = match self.get("train.held_out_site") {
            "" => None,
            s => Some(s.to_string()),
        };
        Ok(TrainConfig {
            phase,
            learning_rate: self.f32_key("train.learning_rate")?,
            batch_size: self.usize_key("train.batch_size")?,
            epochs: self.usize_key("train.epochs")?,
            weights: LossWeights {
                lambda_style: self.f32_key("train.lambda_style")?,
                lambda_content: self.f32_key("train.lambda_content")?,
                lambda_consistency: self.f32_key("train.lambda_consistency")?,
            },
            plateau_factor: self.f32_key("train.plateau_factor")?,
            plateau_patience: self.usize_key("train.plateau_patience")?,
            plateau_min_delta: self.f32_key("train.plateau_min_delta")?,
            patch_size: self.usize_key("train.patch_size")?,
            base_width: self.usize_key("train.base_width")?,
            patches_per_volume: self.usize_key("train.patches_per_volume")?,
            seed: self.u64_key("train.seed")?,
            held_out_site: held_out,
        })
    }

    /// Site profiles: explicit `site.<id>.*` sections when present, else the
    /// first `data.sites` built-in profiles.
    pub fn site_profiles(&self) -> Result<Vec<SiteProfile>> {
        let mut ids: Vec<String> = self
            .values
            .keys()
            .filter_map(|k| is_site_key(k).map(|(id, _)| id.to_string()))
            .collect();
        ids.sort();
        ids.dedup();

        if ids.is_empty() {
            let n = self.usize_key("data.sites")?;
            let builtin = default_profiles();
            if n == 0 || n > builtin.len() {
                bail!(
                    "data.sites must lie in 1..={} when no site sections are configured",
                    builtin.len()
                );
            }
            return Ok(builtin.into_iter().take(n).collect());
        }

        let mut out = Vec::new();
        for id in ids {
            let key = |suffix: &str| format!("site.{id}.{suffix}");
            let floats = |s: &str, n: usize| -> Result<Vec<f32>> {
                let vals: Vec<f32> = s
                    .split(',')
                    .map(|t| t.trim().parse::<f32>())
                    .collect::<Result<_, _>>()
                    .with_context(|| format!("site.{id}: bad float list {s:?}"))?;
                if vals.len() != n {
                    bail!("site.{id}: expected {n} comma-separated values, got {}", vals.len());
                }
                Ok(vals)
            };
            let get_or = |suffix: &str, default: String| -> String {
                self.values
                    .get(&key(suffix))
                    .cloned()
                    .unwrap_or(default)
            };

            let base = floats(
                &get_or(
                    "base_intensities",
                    CANONICAL_LEVELS.map(|v| v.to_string()).join(","),
                ),
                5,
            )?;
            let bias = floats(&get_or("bias", "0,0,0,0,0,0,0,0,0".into()), 9)?;
            let profile = SiteProfile::new(
                id.clone(),
                [base[0], base[1], base[2], base[3], base[4]],
                get_or("gamma", "1".into()).parse().context("gamma")?,
                BiasField {
                    coeffs: bias.try_into().expect("validated length"),
                },
                get_or("noise_sigma", "0".into()).parse().context("noise_sigma")?,
                get_or("global_scale", "1".into()).parse().context("global_scale")?,
                get_or("global_offset", "0".into()).parse().context("global_offset")?,
                (
                    get_or("clinical_min", "0".into()).parse().context("clinical_min")?,
                    get_or("clinical_max", "1".into()).parse().context("clinical_max")?,
                ),
            )?;
            out.push(profile);
        }
        Ok(out)
    }

    /// The full effective configuration in the same flat format.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        std::fs::write(dir.join("effective-config.txt"), self.echo())?;
        Ok(())
    }
}

fn parse_assignment(line: &str) -> Option<(String, String)> {
    let (key, value) = line.split_once('=')?;
    let key = key.trim();
    if key.is_empty() {
        return None;
    }
    Some((key.to_string(), value.trim().to_string()))
}

fn insert_checked(values: &mut BTreeMap<String, String>, key: String, value: String) -> Result<()> {
    let known = KNOWN_KEYS.iter().any(|(k, _)| *k == key) || is_site_key(&key).is_some();
    if !known {
        bail!("unknown config key {key:?}");
    }
    values.insert(key, value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_train_config() {
        let cfg = CliConfig::load(None, &[]).unwrap();
        let tc = cfg.train_config(1).unwrap();
        assert_eq!(tc.batch_size, 8);
        assert_eq!(tc.epochs, 200);
        assert_eq!(tc.patch_size, 16);
        assert!(tc.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = CliConfig::load(None, &["tarin.epochs=5".into()]).unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn overrides_win_and_echo_reflects_them() {
        let cfg = CliConfig::load(None, &["train.epochs=5".into()]).unwrap();
        assert_eq!(cfg.usize_key("train.epochs").unwrap(), 5);
        assert!(cfg.echo().contains("train.epochs = 5"));
    }

    #[test]
    fn site_sections_build_profiles() {
        let cfg = CliConfig::load(
            None,
            &[
                "site.x.gamma=1.5".into(),
                "site.y.gamma=0.7".into(),
                "site.y.noise_sigma=0.01".into(),
            ],
        )
        .unwrap();
        let profiles = cfg.site_profiles().unwrap();
        assert_eq!(profiles.len(), 2);
        assert_eq!(profiles[0].site_id, "x");
        assert_eq!(profiles[1].site_id, "y");
        assert_eq!(profiles[1].gamma(), 0.7);
    }

    #[test]
    fn default_overlap_is_half_patch() {
        let cfg = CliConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.overlap(16).unwrap(), 8);
        let cfg = CliConfig::load(None, &["eval.overlap=2".into()]).unwrap();
        assert_eq!(cfg.overlap(16).unwrap(), 2);
    }
}
