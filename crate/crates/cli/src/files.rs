//! Dataset layout, atomic output files, and run manifests.
//!
//! A dataset directory holds, per image stem `S`:
//!
//! | file | content |
//! |------|---------|
//! | `S_image.ppm` or `S_image.sltf` | u8 `[H, W, 3]` |
//! | `S_features.sltf` | f32 `[Hf, Wf, D]` |
//! | `S_logits.sltf` | f32 `[H, W, K]` |
//! | `S_labels.pgm` or `S_labels.sltf` | training classes, 255 ignored |
//! | `S_ood.pgm` or `S_ood.sltf` | evaluation mask {0, 1, 255} |
//! | `S.json` | optional shape sidecar |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use suplid::config::Config;
use suplid::pipeline::ImageInputs;
use suplid::tensorio::{read_any_file, FeatureMap, LabelMask, LogitMap, Tensor};

use crate::error::{CliError, CliResult};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(CliError::io(dir))?;
    tmp.write_all(bytes).map_err(CliError::io(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Writes an SLTF, PPM, or PGM file chosen by extension.
pub fn write_tensor_as(path: &Path, t: &Tensor) -> CliResult<()> {
    let mut buf = Vec::new();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let r = match ext {
        "ppm" => suplid::tensorio::write_ppm(t, &mut buf),
        "pgm" => suplid::tensorio::write_pgm(t, &mut buf),
        _ => suplid::tensorio::write_tensor(t, &mut buf),
    };
    r.map_err(CliError::at(path))?;
    write_atomic(path, &buf)
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: no such file", path.display())));
    }
    read_any_file(path).map_err(CliError::at(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn config_hash(config: &Config) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Loads a config file, or the config embedded in a run manifest.
pub fn load_config(path: Option<&Path>) -> CliResult<Config> {
    let config = match path {
        None => Config::default(),
        Some(p) => {
            let value: serde_json::Value = read_json(p)?;
            let stored_hash = value
                .get("config_hash")
                .and_then(|h| h.as_str())
                .map(str::to_string);
            let is_manifest = value.get("config").is_some() && stored_hash.is_some();
            let inner = if is_manifest {
                value["config"].clone()
            } else {
                value
            };
            let config: Config =
                serde_json::from_value(inner).map_err(|source| CliError::Json {
                    path: p.to_path_buf(),
                    source,
                })?;
            if is_manifest && stored_hash != Some(config_hash(&config)) {
                return Err(CliError::Usage(format!(
                    "{}: manifest config_hash does not match its config",
                    p.display()
                )));
            }
            config
        }
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    Ok(config)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Config,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, f64>,
    pub workers: usize,
}

/// Collects digests and stage timings while a subcommand runs.
pub struct Recorder {
    command: String,
    config: Config,
    start: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
}

impl Recorder {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            start: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64() * 1e3;
        out
    }

    /// Writes the manifest to `path` after hashing every recorded output.
    pub fn finish(mut self, path: &Path) -> CliResult<()> {
        self.timings
            .insert("total".into(), self.start.elapsed().as_secs_f64() * 1e3);
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(&self.config),
            config: self.config,
            inputs: self.inputs,
            outputs,
            timings_ms: self.timings,
            workers: rayon::current_num_threads(),
        };
        write_json(path, &manifest)
    }
}

/// `out.ext` -> `out.ext.manifest.json`.
pub fn manifest_beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Stems of every `S_features.sltf` in `dir`, sorted.
pub fn stems(dir: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(CliError::io(dir))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(CliError::io(dir))?;
        if let Some(stem) = e
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix("_features.sltf"))
        {
            out.push(stem.to_string());
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no *_features.sltf files found",
            dir.display()
        )));
    }
    Ok(out)
}

/// First existing `dir/stem_suffix.ext` over `exts`.
pub fn find(dir: &Path, stem: &str, suffix: &str, exts: &[&str]) -> CliResult<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}_{suffix}.{e}")))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            CliError::Usage(format!(
                "{}: missing {stem}_{suffix}.{{{}}}",
                dir.display(),
                exts.join(",")
            ))
        })
}

#[derive(Debug, Deserialize)]
struct Sidecar {
    #[serde(default)]
    num_classes: Option<usize>,
    #[serde(default)]
    feature_dim: Option<usize>,
}

/// Reads image, features, and logits for `stem`, recording their digests.
pub fn load_inputs(
    inputs_dir: &Path,
    images_dir: &Path,
    stem: &str,
    config: &Config,
    rec: &mut Recorder,
) -> CliResult<ImageInputs> {
    let image_path = find(images_dir, stem, "image", &["ppm", "sltf"])?;
    let feat_path = inputs_dir.join(format!("{stem}_features.sltf"));
    let logit_path = find(inputs_dir, stem, "logits", &["sltf"])?;
    for p in [&image_path, &feat_path, &logit_path] {
        rec.input(p)?;
    }
    let features = FeatureMap::new(read_tensor(&feat_path)?).map_err(CliError::at(&feat_path))?;
    let logits = LogitMap::new(read_tensor(&logit_path)?).map_err(CliError::at(&logit_path))?;
    config
        .check_feature_dim(features.dim())
        .map_err(CliError::at(&feat_path))?;
    let sidecar = inputs_dir.join(format!("{stem}.json"));
    if sidecar.is_file() {
        rec.input(&sidecar)?;
        let s: Sidecar = read_json(&sidecar)?;
        if s.num_classes.is_some_and(|k| k != logits.num_classes())
            || s.feature_dim.is_some_and(|d| d != features.dim())
        {
            return Err(CliError::Usage(format!(
                "{}: sidecar disagrees with the tensor shapes",
                sidecar.display()
            )));
        }
    }
    ImageInputs::new(read_tensor(&image_path)?, features, logits).map_err(CliError::at(&image_path))
}

pub fn load_mask(
    dir: &Path,
    stem: &str,
    suffix: &str,
    rec: &mut Recorder,
) -> CliResult<(PathBuf, Tensor)> {
    let p = find(dir, stem, suffix, &["pgm", "sltf"])?;
    rec.input(&p)?;
    let t = read_tensor(&p)?;
    Ok((p, t))
}

pub fn training_mask(t: Tensor, num_classes: usize, path: &Path) -> CliResult<LabelMask> {
    LabelMask::training(t, num_classes).map_err(CliError::at(path))
}
