//! On-disk formats: tensor blobs, episodes, manifests, configs and checkpoints.
//!
//! Blob layout, all little-endian:
//!
//! ```text
//! 0   magic "S2SF"
//! 4   version  u32
//! 8   ndim     u32
//! 12  dims     u32 x ndim
//! ..  payload  f32 x product(dims), row-major
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clip::FrameClip;
use crate::config::RunConfig;
use crate::error::{Error, FormatErrorKind, Result};
use crate::geometry::PoseTrack;
use crate::metrics::MetricReport;
use crate::model::Denoiser;
use crate::world::{EpisodeRecord, SceneSpec};

pub const MAGIC: [u8; 4] = *b"S2SF";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const MAX_DIMS: u32 = 8;

pub fn encode_blob(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let count = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
    if dims.len() > MAX_DIMS as usize || dims.iter().any(|d| *d > u32::MAX as usize) || count != Some(data.len()) {
        return Err(Error::Shape(format!(
            "dims {dims:?} do not describe {} values",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn format_err(offset: usize, kind: FormatErrorKind) -> Error {
    Error::Format {
        offset: offset as u64,
        kind,
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or_else(|| {
        format_err(
            offset,
            FormatErrorKind::Truncated {
                expected: 4,
                found: bytes.len().saturating_sub(offset) as u64,
            },
        )
    })?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Parses the header; returns dims and the payload offset.
pub fn decode_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    let magic = bytes.get(0..4).ok_or_else(|| {
        format_err(
            0,
            FormatErrorKind::Truncated {
                expected: 4,
                found: bytes.len() as u64,
            },
        )
    })?;
    if magic != MAGIC {
        return Err(format_err(
            0,
            FormatErrorKind::BadMagic(magic.try_into().expect("4 bytes")),
        ));
    }
    let version = u32_at(bytes, 4)?;
    if version != BLOB_VERSION {
        return Err(format_err(4, FormatErrorKind::UnsupportedVersion(version)));
    }
    let ndim = u32_at(bytes, 8)?;
    if ndim > MAX_DIMS {
        return Err(format_err(8, FormatErrorKind::DimOverflow));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut count: u64 = 1;
    for i in 0..ndim as usize {
        let d = u32_at(bytes, 12 + 4 * i)?;
        count = count
            .checked_mul(d as u64)
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= isize::MAX as u64))
            .ok_or_else(|| format_err(12 + 4 * i, FormatErrorKind::DimOverflow))?;
        dims.push(d as usize);
    }
    Ok((dims, 12 + 4 * ndim as usize))
}

pub fn decode_blob(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let (dims, start) = decode_header(bytes)?;
    let count: usize = dims.iter().product();
    let expected = count * 4;
    let found = bytes.len() - start;
    if found < expected {
        return Err(format_err(
            start,
            FormatErrorKind::Truncated {
                expected: expected as u64,
                found: found as u64,
            },
        ));
    }
    if found > expected {
        return Err(format_err(
            start + expected,
            FormatErrorKind::TrailingBytes((found - expected) as u64),
        ));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

/// Writes via a sibling temp file and rename so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_blob(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    write_atomic(path, &encode_blob(dims, data)?)
}

pub fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    decode_blob(&read_bytes(path)?)
}

/// Dims from the header alone.
pub fn read_blob_dims(path: &Path) -> Result<Vec<usize>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 12 + 4 * MAX_DIMS as usize];
    let mut n = 0;
    loop {
        let r = f.read(&mut head[n..]).map_err(|e| Error::io(path, e))?;
        if r == 0 || n + r == head.len() {
            n += r;
            break;
        }
        n += r;
    }
    Ok(decode_header(&head[..n])?.0)
}

pub fn write_clip(path: &Path, clip: &FrameClip) -> Result<()> {
    write_blob(path, &clip.dims(), &clip.data)
}

pub fn read_clip(path: &Path) -> Result<FrameClip> {
    let (dims, data) = read_blob(path)?;
    match dims[..] {
        [t, c, h, w] => FrameClip::new(t, c, h, w, data),
        _ => Err(Error::Shape(format!(
            "{}: expected a 4-d frame blob, got dims {dims:?}",
            path.display()
        ))),
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::validation("<document>", e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

/// Parses a document, naming the failing key path on error.
pub fn parse_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut *de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().to_string();
        // serde reports a missing field at its parent; point at the field itself.
        let missing = message
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next());
        let key = match (path.as_str(), missing) {
            (".", Some(field)) => field.to_string(),
            (".", None) => "<document>".to_string(),
            (p, Some(field)) => format!("{p}.{field}"),
            (p, None) => p.to_string(),
        };
        Error::validation(key, message)
    })?;
    de.end().map_err(|e| Error::validation("<document>", e.to_string()))?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_bytes(path)?)
}

/// Scene and camera tracks stored next to the frame blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub scene: SceneSpec,
    pub exo_poses: PoseTrack,
    pub interp_poses: PoseTrack,
    pub ego_poses: PoseTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub exo: PathBuf,
    pub interp: PathBuf,
    pub ego: PathBuf,
    pub poses: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub episodes: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::validation(
                "version",
                format!("unsupported manifest version {}", self.version),
            ));
        }
        if self.t < 2 {
            return Err(Error::validation("T", "must be at least 2"));
        }
        let mut seen = HashSet::new();
        for e in &self.episodes {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::validation("episodes.id", format!("duplicate id `{}`", e.id)));
            }
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.episodes.iter().find(|e| e.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.episodes.iter().filter(move |e| e.split == split)
    }
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Loads and checks that every episode's blobs match the declared `T, C, H, W`.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(manifest_path)?;
        manifest.validate()?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let want = vec![manifest.t, manifest.c, manifest.h, manifest.w];
        for e in &manifest.episodes {
            for rel in [&e.exo, &e.interp, &e.ego] {
                let dims = read_blob_dims(&root.join(rel))?;
                if dims != want {
                    return Err(Error::validation(
                        "episodes",
                        format!("episode `{}` has dims {dims:?}, manifest declares {want:?}", e.id),
                    ));
                }
            }
        }
        Ok(Dataset { root, manifest })
    }

    pub fn read_episode(&self, entry: &ManifestEntry) -> Result<EpisodeRecord> {
        read_episode(&self.root, entry)
    }
}

/// Writes `<dir>/{exo,interp,ego}.s2sf` and `<dir>/episode.json`; returns a manifest entry
/// with paths relative to `root`.
pub fn write_episode(root: &Path, id: &str, seed: u64, split: Split, ep: &EpisodeRecord) -> Result<ManifestEntry> {
    ep.validate()?;
    let rel = PathBuf::from("episodes").join(id);
    let dir = root.join(&rel);
    write_clip(&dir.join("exo.s2sf"), &ep.exo)?;
    write_clip(&dir.join("interp.s2sf"), &ep.interp)?;
    write_clip(&dir.join("ego.s2sf"), &ep.ego)?;
    write_json(
        &dir.join("episode.json"),
        &EpisodeMeta {
            scene: ep.scene.clone(),
            exo_poses: ep.exo_poses.clone(),
            interp_poses: ep.interp_poses.clone(),
            ego_poses: ep.ego_poses.clone(),
        },
    )?;
    Ok(ManifestEntry {
        id: id.to_string(),
        seed,
        exo: rel.join("exo.s2sf"),
        interp: rel.join("interp.s2sf"),
        ego: rel.join("ego.s2sf"),
        poses: rel.join("episode.json"),
        split,
    })
}

pub fn read_episode(root: &Path, entry: &ManifestEntry) -> Result<EpisodeRecord> {
    let meta: EpisodeMeta = read_json(&root.join(&entry.poses))?;
    let ep = EpisodeRecord {
        scene: meta.scene,
        exo: read_clip(&root.join(&entry.exo))?,
        interp: read_clip(&root.join(&entry.interp))?,
        ego: read_clip(&root.join(&entry.ego))?,
        exo_poses: meta.exo_poses,
        interp_poses: meta.interp_poses,
        ego_poses: meta.ego_poses,
    };
    ep.validate()?;
    Ok(ep)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&read_bytes(path)?)
}

pub fn parse_run_config(bytes: &[u8]) -> Result<RunConfig> {
    let mut cfg: RunConfig = parse_json(bytes)?;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Saves with every default spelled out.
pub fn save_run_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.resolve();
    write_json(path, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub step: u64,
    pub seed: u64,
    pub schedule_k: usize,
    pub loss: f64,
}

pub const WEIGHTS_FILE: &str = "weights.s2sf";
pub const META_FILE: &str = "meta.json";

/// `<dir>/weights.s2sf` (flat parameter blob) and `<dir>/meta.json`.
pub fn save_checkpoint(dir: &Path, model: &Denoiser<f32>, meta: &CheckpointMeta) -> Result<()> {
    write_blob(&dir.join(WEIGHTS_FILE), &[model.params.len()], &model.params)?;
    write_json(&dir.join(META_FILE), meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Denoiser<f32>, CheckpointMeta)> {
    let mut meta: CheckpointMeta = read_json(&dir.join(META_FILE))?;
    meta.config.resolve();
    meta.config.validate()?;
    let (dims, params) = read_blob(&dir.join(WEIGHTS_FILE))?;
    if dims.len() != 1 {
        return Err(Error::Shape(format!("weights blob must be 1-d, got {dims:?}")));
    }
    let model = Denoiser::from_params(meta.config.denoiser_config(), params)?;
    Ok((model, meta))
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_episode;

    #[test]
    fn blob_round_trip_is_bitwise() {
        let data = vec![0.1f32, -0.0, f32::MIN_POSITIVE, 1e30, f32::EPSILON, -7.25];
        let bytes = encode_blob(&[2, 3], &data).unwrap();
        assert_eq!(&bytes[..4], b"S2SF");
        let (dims, back) = decode_blob(&bytes).unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(encode_blob(&[4, 2], &data).is_err());
    }

    fn offset_of(e: Error) -> (u64, FormatErrorKind) {
        match e {
            Error::Format { offset, kind } => (offset, kind),
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn header_corruption_offsets() {
        let good = encode_blob(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(
            offset_of(decode_blob(&bad).unwrap_err()),
            (0, FormatErrorKind::BadMagic(*b"XXXX"))
        );
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(
            offset_of(decode_blob(&bad).unwrap_err()),
            (4, FormatErrorKind::UnsupportedVersion(9))
        );
        let mut bad = good.clone();
        bad[8] = 200;
        assert_eq!(offset_of(decode_blob(&bad).unwrap_err()).0, 8);
        let (off, kind) = offset_of(decode_blob(&good[..good.len() - 3]).unwrap_err());
        assert_eq!(off, 20);
        assert_eq!(
            kind,
            FormatErrorKind::Truncated {
                expected: 16,
                found: 13
            }
        );
        let mut long = good.clone();
        long.push(0);
        assert_eq!(
            offset_of(decode_blob(&long).unwrap_err()),
            (36, FormatErrorKind::TrailingBytes(1))
        );
        let huge = [
            b"S2SF".as_slice(),
            &1u32.to_le_bytes(),
            &3u32.to_le_bytes(),
            &[0xff; 12],
        ]
        .concat();
        assert_eq!(
            offset_of(decode_blob(&huge).unwrap_err()).1,
            FormatErrorKind::DimOverflow
        );
    }

    #[test]
    fn episode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ep = generate_episode(7, 5, 8, 8).unwrap();
        let entry = write_episode(dir.path(), "ep7", 7, Split::Train, &ep).unwrap();
        let back = read_episode(dir.path(), &entry).unwrap();
        assert_eq!(back, ep);
    }

    #[test]
    fn manifest_rejects_mixed_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_episode(dir.path(), "a", 1, Split::Train, &generate_episode(1, 5, 8, 8).unwrap()).unwrap();
        let b = write_episode(dir.path(), "b", 2, Split::Test, &generate_episode(2, 3, 8, 8).unwrap()).unwrap();
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            t: 5,
            h: 8,
            w: 8,
            c: 3,
            episodes: vec![a.clone(), b],
        };
        let path = dir.path().join("manifest.json");
        write_json(&path, &manifest).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Validation { .. })));
        let dup = DatasetManifest {
            episodes: vec![a.clone(), a],
            ..manifest
        };
        write_json(&path, &dup).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Validation { key, .. }) if key == "episodes.id"));
    }

    #[test]
    fn run_config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        save_run_config(&RunConfig::default(), &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_run_config(&path).unwrap();
        assert_eq!(loaded, RunConfig::default());
        save_run_config(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn run_config_errors_name_the_key() {
        let minimal = r#"{"model": {}, "schedule": {}, "guidance": {}, "training": {}, "ablation": "FPI", "embed_mode": "plucker"}"#;
        let cfg = parse_run_config(minimal.as_bytes()).unwrap();
        assert_eq!(cfg.guidance.weight, 3.0);
        assert_eq!(cfg.guidance.steps, 50);
        assert_eq!(cfg.guidance.frac_level, Some(500));

        let key_of = |doc: &str| match parse_run_config(doc.as_bytes()) {
            Err(Error::Validation { key, .. }) => key,
            other => panic!("expected validation error, got {other:?}"),
        };
        assert_eq!(key_of(&minimal.replace("\"FPI\"", "\"fpi\"")), "ablation");
        assert_eq!(
            key_of(&minimal.replace("\"model\": {}", "\"model\": {\"depth\": 3}")),
            "model.depth"
        );
        assert_eq!(
            key_of(&minimal.replace(", \"embed_mode\": \"plucker\"", "")),
            "embed_mode"
        );
        assert_eq!(key_of(&format!("{minimal} x")), "<document>");
        assert_eq!(
            key_of(&minimal.replace("\"guidance\": {}", "\"guidance\": {\"weight\": -1}")),
            "guidance.weight"
        );
        assert_eq!(
            key_of(&minimal.replace("\"model\": {}", "\"model\": {\"patch\": 5}")),
            "model.patch"
        );
    }
}
