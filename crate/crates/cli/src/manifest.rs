use crate::config::RunConfig;
use anyhow::Context;
use serde::Serialize;
use serde_json::Value;
use std::path::Path;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'static str,
    pub git_describe: &'static str,
    pub device: &'a str,
    pub seed: Option<u64>,
    pub status: &'a str,
    /// Command-line arguments as invoked.
    pub args: Vec<String>,
    pub config: Option<&'a RunConfig>,
    pub details: Value,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, device: &'a str, config: Option<&'a RunConfig>) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            git_describe: env!("M2M_GIT_DESCRIBE"),
            device,
            seed: config.map(|c| c.seed),
            status: "ok",
            args: std::env::args().collect(),
            config,
            details: Value::Null,
        }
    }

    /// Writes the manifest and, when a config is attached, its TOML echo.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing manifest into {}", dir.display()))?;
        if let Some(cfg) = self.config {
            std::fs::write(dir.join(CONFIG_ECHO), cfg.to_toml()?)?;
        }
        Ok(())
    }
}
