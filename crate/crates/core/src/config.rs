//! Run configuration files.
//!
//! Configs are TOML. Emitted defaults carry a trailing comment on every
//! numeric entry: `# published` for values taken from the published method
//! description, `# framework default` for choices made by this crate.

use std::fs;
use std::path::Path;

use crate::env::ScenarioConfig;
use crate::error::{Error, Result};
use crate::trainer::RunConfig;

/// `(section, key)` pairs whose default values come from the published
/// method description. The empty section is the top level.
pub const PUBLISHED: &[(&str, &str)] = &[
    ("", "seeds"),
    ("", "total_episodes"),
    ("", "patience"),
    ("", "min_delta"),
    ("", "keep_checkpoints"),
    ("scenario", "season_length"),
    ("reward", "w1"),
    ("reward", "w2"),
    ("reward", "w3"),
    ("ppo", "gamma"),
    ("ppo", "gae_lambda"),
    ("ppo", "clip_epsilon"),
    ("ppo", "lr"),
    ("ppo", "minibatch_size"),
    ("ppo", "buffer_size"),
    ("ppo", "hidden"),
    ("ppo", "hidden_layers"),
    ("pga", "phase1_end"),
    ("pga", "phase2_end"),
    ("rnd", "lr"),
    ("rnd", "decay_start"),
    ("rnd", "decay_end"),
    ("noise", "temp_threshold"),
    ("noise", "rain_threshold"),
    ("noise", "moisture_threshold"),
    ("noise", "temp_sigma_base"),
];

pub const PUBLISHED_TAG: &str = "# published";
pub const DEFAULT_TAG: &str = "# framework default";

pub fn parse(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

/// Plain TOML, without annotations.
pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn save(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, render(cfg)?)?;
    Ok(())
}

fn is_numeric(value: &str) -> bool {
    let v = value.trim();
    let v = v.strip_prefix('[').and_then(|x| x.strip_suffix(']')).unwrap_or(v);
    !v.is_empty() && v.split(',').all(|x| x.trim().parse::<f64>().is_ok())
}

/// TOML with provenance comments on every numeric entry.
pub fn render(cfg: &RunConfig) -> Result<String> {
    let plain = to_toml(cfg)?;
    let mut out = format!(
        "# agrolearn run configuration ({})\n# Entries marked \"{PUBLISHED_TAG}\" follow the published method; \"{DEFAULT_TAG}\" marks choices made by this implementation.\n\n",
        cfg.name
    );
    let mut section = String::new();
    for line in plain.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|x| x.strip_suffix(']')) {
            section = name.to_string();
            out.push_str(line);
        } else if let Some((key, value)) = trimmed.split_once(" = ") {
            out.push_str(line);
            if is_numeric(value) {
                let tag = if PUBLISHED.contains(&(section.as_str(), key)) {
                    PUBLISHED_TAG
                } else {
                    DEFAULT_TAG
                };
                out.push_str("  ");
                out.push_str(tag);
            }
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Bundled configs as `(file name, annotated text)`.
pub fn default_configs() -> Result<Vec<(String, String)>> {
    [ScenarioConfig::florida(), ScenarioConfig::zaragoza()]
        .into_iter()
        .map(|s| {
            let cfg = RunConfig::for_scenario(s);
            Ok((format!("{}.toml", cfg.name), render(&cfg)?))
        })
        .collect()
}
