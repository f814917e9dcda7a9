//! On-disk checkpoint: a JSON manifest plus one tensor archive per network,
//! noise map and real image.
//!
//! A tensor archive is a `.bin` file of little-endian `f64` values with a
//! `.json` sidecar listing name, shape, dtype and byte offset per tensor.
//!
//! ```text
//! out/
//!   manifest.json
//!   decisions.csv  bounds.jsonl  trace.csv
//!   scale_{n}/generator.{bin,json}  discriminator.{bin,json}
//!            noise.{bin,json}  real.{bin,json}
//!            decisions.csv  bounds.jsonl  trace.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::KappaEstimator;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::ladder::{Ladder, ScaleModel};
use crate::model::{NetParams, NetSpec};
use crate::pyramid::ScaleSchedule;
use crate::tensor::{numel, Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const ARCHIVE_FORMAT: &str = "msgan-tensors";
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Shape,
    pub dtype: String,
    /// Byte offset into the `.bin` file.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            dtype: DTYPE.into(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    let index = ArchiveIndex {
        format: ARCHIVE_FORMAT.into(),
        version: FORMAT_VERSION,
        tensors: entries,
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(path.to_path_buf()))
    }
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let side = sidecar(path);
    require(path)?;
    require(&side)?;
    let index: ArchiveIndex = serde_json::from_str(&fs::read_to_string(&side)?)?;
    if index.format != ARCHIVE_FORMAT {
        return Err(Error::invalid(format!("{} is not a tensor archive index", side.display())));
    }
    if index.version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: index.version,
            expected: FORMAT_VERSION,
        });
    }
    let bytes = fs::read(path)?;
    index
        .tensors
        .into_iter()
        .map(|e| {
            if e.dtype != DTYPE {
                return Err(Error::invalid(format!("unsupported dtype {} in {}", e.dtype, side.display())));
            }
            let start = e.offset as usize;
            let end = start + numel(e.shape) * 8;
            let raw = bytes
                .get(start..end)
                .ok_or_else(|| Error::invalid(format!("{} is truncated at tensor {}", path.display(), e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok((e.name, Tensor::from_vec(e.shape, data)?))
        })
        .collect()
}

pub fn save_params(path: &Path, params: &NetParams) -> Result<()> {
    save_tensors(path, &params.named_tensors())
}

pub fn load_params(path: &Path, spec: NetSpec) -> Result<NetParams> {
    let tensors = load_tensors(path)?.into_iter().map(|(_, t)| t).collect();
    NetParams::from_tensors(spec, tensors)
}

fn save_single(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    save_tensors(path, &[(name.to_string(), t)])
}

fn load_single(path: &Path) -> Result<Tensor> {
    load_tensors(path)?
        .pop()
        .map(|(_, t)| t)
        .ok_or_else(|| Error::invalid(format!("{} holds no tensor", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub index: usize,
    pub generator_spec: NetSpec,
    pub discriminator_spec: NetSpec,
    pub generator_params_path: String,
    pub discriminator_params_path: String,
    pub noise_map_path: String,
    pub real_path: String,
    pub sigma_n: f64,
    pub kappa: KappaEstimator,
    pub generator_hash: String,
    pub discriminator_hash: String,
    pub decision_log_path: String,
    pub bound_report_path: String,
    pub trace_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub image_fingerprint: String,
    pub image_hw: (usize, usize),
    pub image_channels: usize,
    pub schedule: ScaleSchedule,
    pub config: TrainConfig,
    /// Completed scales in training order, coarsest first.
    pub scales: Vec<ScaleEntry>,
    pub decision_log_path: String,
    pub bound_report_path: String,
    pub trace_path: String,
}

pub const MANIFEST: &str = "manifest.json";
pub const DECISIONS: &str = "decisions.csv";
pub const BOUNDS: &str = "bounds.jsonl";
pub const TRACE: &str = "trace.csv";

pub fn scale_dir(n: usize) -> String {
    format!("scale_{n}")
}

impl CheckpointManifest {
    pub fn new(
        image_fingerprint: String,
        image_hw: (usize, usize),
        image_channels: usize,
        schedule: ScaleSchedule,
        config: TrainConfig,
    ) -> Self {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            image_fingerprint,
            image_hw,
            image_channels,
            schedule,
            config,
            scales: Vec::new(),
            decision_log_path: DECISIONS.into(),
            bound_report_path: BOUNDS.into(),
            trace_path: TRACE.into(),
        }
    }

    pub fn entry(&self, n: usize) -> Result<&ScaleEntry> {
        self.scales
            .iter()
            .find(|e| e.index == n)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no scale {n}")))
    }

    /// Every file the manifest references, relative to the checkpoint root.
    pub fn referenced_paths(&self) -> Vec<String> {
        let mut out = vec![
            self.decision_log_path.clone(),
            self.bound_report_path.clone(),
            self.trace_path.clone(),
        ];
        for e in &self.scales {
            for p in [
                &e.generator_params_path,
                &e.discriminator_params_path,
                &e.noise_map_path,
                &e.real_path,
            ] {
                out.push(p.clone());
                out.push(sidecar(Path::new(p)).to_string_lossy().into_owned());
            }
            out.extend([e.decision_log_path.clone(), e.bound_report_path.clone(), e.trace_path.clone()]);
        }
        out
    }
}

/// Persist one scale's tensors and return its manifest entry. Log paths
/// are recorded but written by the caller.
pub fn save_scale(root: &Path, model: &ScaleModel, real: &Tensor) -> Result<ScaleEntry> {
    let dir = scale_dir(model.index);
    let rel = |f: &str| format!("{dir}/{f}");
    let entry = ScaleEntry {
        index: model.index,
        generator_spec: model.generator.spec.clone(),
        discriminator_spec: model.discriminator.spec.clone(),
        generator_params_path: rel("generator.bin"),
        discriminator_params_path: rel("discriminator.bin"),
        noise_map_path: rel("noise.bin"),
        real_path: rel("real.bin"),
        sigma_n: model.sigma,
        kappa: model.kappa.clone(),
        generator_hash: model.generator.fingerprint(),
        discriminator_hash: model.discriminator.fingerprint(),
        decision_log_path: rel(DECISIONS),
        bound_report_path: rel(BOUNDS),
        trace_path: rel(TRACE),
    };
    save_params(&root.join(&entry.generator_params_path), &model.generator)?;
    save_params(&root.join(&entry.discriminator_params_path), &model.discriminator)?;
    save_single(&root.join(&entry.noise_map_path), "z_rec", &model.z_rec)?;
    save_single(&root.join(&entry.real_path), "real", real)?;
    Ok(entry)
}

pub fn write_manifest(root: &Path, manifest: &CheckpointManifest) -> Result<()> {
    fs::create_dir_all(root)?;
    let tmp = root.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(manifest)? + "\n")?;
    fs::rename(tmp, root.join(MANIFEST))?;
    Ok(())
}

/// Read and validate a manifest: version match and every referenced file
/// present.
pub fn load_manifest(root: &Path) -> Result<CheckpointManifest> {
    let path = root.join(MANIFEST);
    require(&path)?;
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: CheckpointManifest = serde_json::from_value(value)?;
    for p in manifest.referenced_paths() {
        require(&root.join(p))?;
    }
    Ok(manifest)
}

pub fn load_scale(root: &Path, entry: &ScaleEntry) -> Result<ScaleModel> {
    Ok(ScaleModel {
        index: entry.index,
        generator: load_params(&root.join(&entry.generator_params_path), entry.generator_spec.clone())?,
        discriminator: load_params(&root.join(&entry.discriminator_params_path), entry.discriminator_spec.clone())?,
        sigma: entry.sigma_n,
        z_rec: load_single(&root.join(&entry.noise_map_path))?,
        kappa: entry.kappa.clone(),
    })
}

pub fn load_real(root: &Path, entry: &ScaleEntry) -> Result<Tensor> {
    load_single(&root.join(&entry.real_path))
}

/// Manifest and every completed scale.
pub fn load_ladder(root: &Path) -> Result<(CheckpointManifest, Ladder)> {
    let manifest = load_manifest(root)?;
    let mut ladder = Ladder::new(manifest.schedule.clone(), manifest.image_channels);
    for e in &manifest.scales {
        ladder.scales.insert(e.index, load_scale(root, e)?);
    }
    Ok((manifest, ladder))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::tests::toy_ladder;

    #[test]
    fn tensor_archive_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let l = toy_ladder(1);
        let p = &l.scale(0).unwrap().generator;
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        save_params(&a, p).unwrap();
        let q = load_params(&a, p.spec.clone()).unwrap();
        assert_eq!(&q, p);
        save_params(&b, &q).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read(sidecar(&a)).unwrap(), fs::read(sidecar(&b)).unwrap());
    }

    fn write_toy(root: &Path) -> (CheckpointManifest, Ladder) {
        let l = toy_ladder(2);
        let mut m = CheckpointManifest::new("abc".into(), (20, 24), 3, l.schedule.clone(), TrainConfig::default());
        for n in (0..=l.coarsest()).rev() {
            let real = Tensor::zeros(l.shape_at(n));
            let e = save_scale(root, l.scale(n).unwrap(), &real).unwrap();
            for f in [&e.decision_log_path, &e.bound_report_path, &e.trace_path] {
                fs::write(root.join(f), "").unwrap();
            }
            m.scales.push(e);
        }
        for f in [DECISIONS, BOUNDS, TRACE] {
            fs::write(root.join(f), "").unwrap();
        }
        write_manifest(root, &m).unwrap();
        (m, l)
    }

    #[test]
    fn ladder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (m, l) = write_toy(dir.path());
        let (m2, l2) = load_ladder(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(l, l2);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = write_toy(dir.path());
        let victim = dir.path().join(&m.scales[0].noise_map_path);
        fs::remove_file(&victim).unwrap();
        match load_ladder(dir.path()) {
            Err(Error::NotFound(p)) => assert_eq!(p, victim),
            other => panic!("expected not-found, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, _) = write_toy(dir.path());
        m.format_version = 99;
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::FormatVersion { found: 99, .. })));
        assert!(matches!(load_manifest(&dir.path().join("nope")), Err(Error::NotFound(_))));
    }
}
