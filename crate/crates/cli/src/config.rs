//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dwd_core::trainer::{Stage, TrainConfig, Variant};

/// Keys a config file or `--set` override may name.
pub const KEYS: [&str; 18] = [
    "stage",
    "variant",
    "seed",
    "epochs",
    "lr",
    "batch_size",
    "dropout",
    "games_per_epoch",
    "rounds",
    "pool_sizes",
    "tau_start",
    "tau_end",
    "tau_anneal",
    "hidden",
    "embed",
    "n_latent",
    "k_categories",
    "gauss_dim",
];

/// Ordered key/value pairs; later entries win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    pub entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut out = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            out.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            bail!("unknown config key {key:?}");
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("override {pair:?} is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Resolves into a training config: stage and variant pick the defaults,
    /// every other key then overrides them.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let stage = match self.get("stage") {
            Some(s) => Stage::parse(s).ok_or_else(|| anyhow!("unknown stage {s:?}"))?,
            None => Stage::Stage1,
        };
        let variant = match self.get("variant") {
            Some(s) => Variant::parse(s).ok_or_else(|| anyhow!("unknown variant {s:?}"))?,
            None => Variant::OursDiscreteElbo,
        };
        let mut cfg = TrainConfig::for_stage(stage, variant);
        for (k, v) in &self.entries {
            let bad = |e: &dyn std::fmt::Display| anyhow!("{k} = {v:?}: {e}");
            match k.as_str() {
                "stage" | "variant" => {}
                "seed" => cfg.seed = v.parse().map_err(|e| bad(&e))?,
                "epochs" => cfg.epochs = v.parse().map_err(|e| bad(&e))?,
                "lr" => cfg.lr = v.parse().map_err(|e| bad(&e))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|e| bad(&e))?,
                "dropout" => cfg.dropout = v.parse().map_err(|e| bad(&e))?,
                "games_per_epoch" => cfg.games_per_epoch = v.parse().map_err(|e| bad(&e))?,
                "rounds" => cfg.rounds = v.parse().map_err(|e| bad(&e))?,
                "pool_sizes" => {
                    cfg.pool_sizes = v
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(&e))?
                }
                "tau_start" => cfg.tau.start = v.parse().map_err(|e| bad(&e))?,
                "tau_end" => cfg.tau.end = v.parse().map_err(|e| bad(&e))?,
                "tau_anneal" => cfg.tau.anneal = v.parse().map_err(|e| bad(&e))?,
                "hidden" => cfg.model.hidden = v.parse().map_err(|e| bad(&e))?,
                "embed" => cfg.model.embed = v.parse().map_err(|e| bad(&e))?,
                "n_latent" => cfg.model.n_latent = v.parse().map_err(|e| bad(&e))?,
                "k_categories" => cfg.model.k_categories = v.parse().map_err(|e| bad(&e))?,
                "gauss_dim" => cfg.model.gauss_dim = v.parse().map_err(|e| bad(&e))?,
                _ => bail!("unknown config key {k:?}"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every key of a resolved config, in the flat file format.
pub fn render(cfg: &TrainConfig) -> String {
    let pools: Vec<String> = cfg.pool_sizes.iter().map(|p| p.to_string()).collect();
    let rows = [
        ("stage", cfg.stage.name().to_string()),
        ("variant", cfg.variant.name().to_string()),
        ("seed", cfg.seed.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("lr", cfg.lr.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("dropout", cfg.dropout.to_string()),
        ("games_per_epoch", cfg.games_per_epoch.to_string()),
        ("rounds", cfg.rounds.to_string()),
        ("pool_sizes", pools.join(",")),
        ("tau_start", cfg.tau.start.to_string()),
        ("tau_end", cfg.tau.end.to_string()),
        ("tau_anneal", cfg.tau.anneal.to_string()),
        ("hidden", cfg.model.hidden.to_string()),
        ("embed", cfg.model.embed.to_string()),
        ("n_latent", cfg.model.n_latent.to_string()),
        ("k_categories", cfg.model.k_categories.to_string()),
        ("gauss_dim", cfg.model.gauss_dim.to_string()),
    ];
    rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut raw = RawConfig::parse("# header\n\nepochs = 3  # short\nlr=0.01\n").unwrap();
        raw.set_pair("epochs=4").unwrap();
        let cfg = raw.resolve().unwrap();
        assert_eq!(cfg.epochs, 4);
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RawConfig::parse("epoch = 3").is_err());
        assert!(RawConfig::default().set_pair("colour=red").is_err());
        assert!(RawConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut raw = RawConfig::default();
        raw.set("stage", "stage2a").unwrap();
        raw.set("pool_sizes", "2, 9").unwrap();
        let cfg = raw.resolve().unwrap();
        assert_eq!(cfg.epochs, 20);
        assert_eq!(RawConfig::parse(&render(&cfg)).unwrap().resolve().unwrap(), cfg);
    }
}
