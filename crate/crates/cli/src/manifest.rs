use std::collections::BTreeMap;
use std::path::Path;

use maps_core::RunConfig;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn version() -> String {
    option_env!("MAPS_GIT_DESCRIBE").map(str::to_string).unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Record of one command: enough to rerun it. Contains no timestamps, so
/// identical runs write identical manifests.
#[derive(Default)]
pub struct RunManifest {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    extra: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    pub fn write(&self, command: &str, cfg: &RunConfig, ablate: &[(String, String)]) -> anyhow::Result<()> {
        let dir = cfg.output_dir();
        std::fs::create_dir_all(&dir)?;
        let doc = json!({
            "command": command,
            "version": version(),
            "seed": cfg.seed(),
            "config": cfg.values(),
            "ablate": ablate.iter().map(|(k, v)| json!([k, v])).collect::<Vec<_>>(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "details": self.extra,
        });
        std::fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        std::fs::write(dir.join("config.conf"), cfg.to_flat())?;
        Ok(())
    }
}
