//! Checkpoint directories: network parameters and optimizer moments in
//! safetensors files next to a JSON manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use xgans_nn::io::{load_tensors, save_tensors};
use xgans_nn::{load_module, Adam, Module, Tensor};

use crate::discriminator::{build_discriminators, DiscriminatorBank};
use crate::error::{Error, Result};
use crate::generator::{build_generator, Generator};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const GENERATOR_FILE: &str = "generator.safetensors";
const DISCRIMINATOR_FILE: &str = "discriminators.safetensors";
const OPT_G_FILE: &str = "optimizer_g.safetensors";
const OPT_D_FILE: &str = "optimizer_d.safetensors";
const STEPS_KEY: &str = "steps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub iteration: u64,
    pub seed: u64,
    pub config: TrainConfig,
}

impl CheckpointManifest {
    pub fn new(iteration: u64, config: TrainConfig) -> Self {
        Self { format_version: FORMAT_VERSION, iteration, seed: config.seed, config }
    }
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub generator: Generator,
    pub discriminators: DiscriminatorBank,
    pub opt_g: BTreeMap<String, Tensor>,
    pub opt_g_steps: u64,
    pub opt_d: BTreeMap<String, Tensor>,
    pub opt_d_steps: u64,
}

fn steps_meta(opt: &Adam) -> Option<HashMap<String, String>> {
    Some(HashMap::from([(STEPS_KEY.to_string(), opt.steps().to_string())]))
}

fn wrap(path: &Path) -> impl Fn(xgans_nn::NnError) -> Error + '_ {
    move |e| match e {
        xgans_nn::NnError::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other}", path.display())),
    }
}

/// Write the checkpoint to `dir`, replacing any previous one only after the
/// new files are complete.
pub fn save_checkpoint(
    dir: &Path,
    manifest: &CheckpointManifest,
    generator: &Generator,
    discriminators: &DiscriminatorBank,
    (opt_g, opt_d): (&Adam, &Adam),
) -> Result<()> {
    let staging = staging_dir(dir);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let files: [(&str, Vec<(String, Tensor)>, Option<HashMap<String, String>>); 4] = [
        (GENERATOR_FILE, generator.named_params(), None),
        (DISCRIMINATOR_FILE, discriminators.named_params(), None),
        (OPT_G_FILE, opt_g.state_tensors(), steps_meta(opt_g)),
        (OPT_D_FILE, opt_d.state_tensors(), steps_meta(opt_d)),
    ];
    for (name, tensors, meta) in files {
        let path = staging.join(name);
        save_tensors(&path, &tensors, meta).map_err(wrap(&path))?;
    }
    let mpath = staging.join(MANIFEST_FILE);
    std::fs::write(&mpath, serde_json::to_string_pretty(manifest)? + "\n").map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(Value::as_u64);
    if found != Some(FORMAT_VERSION as u64) {
        let shown = found.map_or("missing".to_string(), |v| v.to_string());
        return Err(Error::IncompatibleCheckpoint {
            path: dir.into(),
            diff: format!("format_version: {shown} (checkpoint) vs {FORMAT_VERSION} (supported)"),
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::IncompatibleCheckpoint { path: dir.into(), diff: e.to_string() })
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(dir)?;
    let read = |name: &str| {
        let path = dir.join(name);
        load_tensors(&path).map_err(wrap(&path))
    };
    let mut generator = build_generator(manifest.config.generator, 0)?;
    let (g, _) = read(GENERATOR_FILE)?;
    load_module(&mut generator, "", &g).map_err(|e| incompatible(dir, e))?;
    let mut discriminators = build_discriminators(manifest.config.discriminator, 0)?;
    let (d, _) = read(DISCRIMINATOR_FILE)?;
    load_module(&mut discriminators, "", &d).map_err(|e| incompatible(dir, e))?;
    let (opt_g, mg) = read(OPT_G_FILE)?;
    let (opt_d, md) = read(OPT_D_FILE)?;
    let steps = |m: &HashMap<String, String>| m.get(STEPS_KEY).and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok(Checkpoint { opt_g_steps: steps(&mg), opt_d_steps: steps(&md), manifest, generator, discriminators, opt_g, opt_d })
}

/// Load only the generator, for inference.
pub fn load_generator(dir: &Path) -> Result<(CheckpointManifest, Generator)> {
    let manifest = load_manifest(dir)?;
    let path = dir.join(GENERATOR_FILE);
    let (g, _) = load_tensors(&path).map_err(wrap(&path))?;
    let mut generator = build_generator(manifest.config.generator, 0)?;
    load_module(&mut generator, "", &g).map_err(|e| incompatible(dir, e))?;
    Ok((manifest, generator))
}

fn incompatible(dir: &Path, e: xgans_nn::NnError) -> Error {
    Error::IncompatibleCheckpoint { path: dir.into(), diff: e.to_string() }
}

/// One `key: old -> new` line per differing leaf of the two configurations.
pub fn config_diff(old: &TrainConfig, new: &TrainConfig) -> Result<String> {
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    flatten("", &serde_json::to_value(old)?, &mut a);
    flatten("", &serde_json::to_value(new)?, &mut b);
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let none = "(absent)".to_string();
    let lines: Vec<String> = keys
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| format!("{k}: {} -> {}", a.get(k).unwrap_or(&none), b.get(k).unwrap_or(&none)))
        .collect();
    Ok(lines.join("\n"))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&xgans_nn::join(prefix, k), v, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.to_string());
        }
    }
}
