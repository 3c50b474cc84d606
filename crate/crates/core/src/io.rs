//! ETJ trajectory files, manifests, checkpoint containers and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::caption::{Caption, CaptionKind};
use crate::error::{Error, Result};
use crate::geom::{rotation_deviation, CameraTrajectory, CharacterTrajectory, Se3Pose};
use crate::nn::{Mat, ParamSet};
use crate::tagging::TagSegment;

pub const ETJ_VERSION: u32 = 1;
/// Orthonormality tolerance applied to rotations read from disk.
pub const LOAD_ROTATION_TOL: f64 = 1e-5;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tags {
    pub camera: Vec<TagSegment>,
    pub character: Vec<TagSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TagsFile {
    #[serde(default)]
    camera: Vec<(usize, usize, String)>,
    #[serde(default)]
    character: Vec<(usize, usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EtjFile {
    version: u32,
    fps: f64,
    n_frames: usize,
    camera: Vec<[f64; 12]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    character_hips: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    caption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    caption_kind: Option<CaptionKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tags: Option<TagsFile>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mask: Option<Vec<u8>>,
}

/// In-memory ETJ document.
#[derive(Debug, Clone, PartialEq)]
pub struct Etj {
    pub camera: CameraTrajectory,
    pub character: Option<CharacterTrajectory>,
    pub caption: Option<Caption>,
    pub tags: Option<Tags>,
}

impl Etj {
    pub fn new(camera: CameraTrajectory) -> Self {
        Self {
            camera,
            character: None,
            caption: None,
            tags: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let cam = &self.camera;
        let camera = cam
            .poses
            .iter()
            .map(|p| {
                let r = &p.rotation;
                let t = &p.translation;
                [
                    r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, r[(2, 0)], r[(2, 1)],
                    r[(2, 2)], t.z,
                ]
            })
            .collect();
        let to_tuples = |s: &[TagSegment]| s.iter().map(|s| (s.start, s.end, s.label.clone())).collect();
        let file = EtjFile {
            version: ETJ_VERSION,
            fps: cam.fps,
            n_frames: cam.len(),
            camera,
            character_hips: self.character.as_ref().map(|c| c.hips.iter().map(|h| [h.x, h.y, h.z]).collect()),
            caption: self.caption.as_ref().map(|c| c.text.clone()),
            caption_kind: self.caption.as_ref().map(|c| c.kind),
            tags: self.tags.as_ref().map(|t| TagsFile {
                camera: to_tuples(&t.camera),
                character: to_tuples(&t.character),
            }),
            mask: if cam.mask.iter().all(|b| *b) {
                None
            } else {
                Some(cam.mask.iter().map(|b| *b as u8).collect())
            },
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Input(e.to_string()))
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let f: EtjFile = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        let bad = |r: String| Error::format(path, r);
        if f.version != ETJ_VERSION {
            return Err(bad(format!("unsupported version {}", f.version)));
        }
        if f.camera.len() != f.n_frames {
            return Err(bad(format!("camera has {} rows, n_frames {}", f.camera.len(), f.n_frames)));
        }
        let mut poses = Vec::with_capacity(f.n_frames);
        for (i, row) in f.camera.iter().enumerate() {
            let r = Matrix3::new(row[0], row[1], row[2], row[4], row[5], row[6], row[8], row[9], row[10]);
            let (dev, det) = rotation_deviation(&r);
            if !(dev <= LOAD_ROTATION_TOL && (det - 1.0).abs() <= LOAD_ROTATION_TOL) {
                return Err(bad(format!("frame {i}: rotation not orthonormal (deviation {dev:.3e}, det {det})")));
            }
            poses.push(Se3Pose::new(r, Vector3::new(row[3], row[7], row[11])));
        }
        let mask = match &f.mask {
            Some(m) if m.len() != f.n_frames => return Err(bad("mask length differs from n_frames".into())),
            Some(m) => m.iter().map(|v| *v != 0).collect(),
            None => vec![true; f.n_frames],
        };
        let camera = CameraTrajectory::with_mask(f.fps, poses, mask).map_err(|e| bad(e.to_string()))?;
        let character = match f.character_hips {
            Some(h) if h.len() != f.n_frames => return Err(bad("character_hips length differs from n_frames".into())),
            Some(h) => Some(CharacterTrajectory::new(
                f.fps,
                h.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            )),
            None => None,
        };
        let caption = match (f.caption, f.caption_kind) {
            (Some(text), kind) => Some(Caption {
                text,
                kind: kind.unwrap_or(if character.is_some() {
                    CaptionKind::CameraCharacter
                } else {
                    CaptionKind::Camera
                }),
            }),
            (None, _) => None,
        };
        let from_tuples = |v: Vec<(usize, usize, String)>| v.into_iter().map(|(s, e, l)| TagSegment::new(s, e, l)).collect();
        let tags = f.tags.map(|t| Tags {
            camera: from_tuples(t.camera),
            character: from_tuples(t.character),
        });
        Ok(Self {
            camera,
            character,
            caption,
            tags,
        })
    }
}

pub fn load_etj(path: &Path) -> Result<Etj> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Etj::from_json(&text, path)
}

pub fn save_etj(path: &Path, etj: &Etj) -> Result<()> {
    let mut text = etj.to_json()?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overlap_len: Option<usize>,
}

/// Reads a manifest and resolves relative paths against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|mut e| {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            if !e.path.exists() {
                return Err(Error::format(path, format!("listed file {} does not exist", e.path.display())));
            }
            Ok(e)
        })
        .collect()
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

const CKPT_MAGIC: &[u8; 8] = b"CNTRJ\0CK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON header of a checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub vocab_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

/// Magic, version, header length, JSON header, then little-endian f32
/// parameter blocks in declaration order.
pub fn write_checkpoint(path: &Path, kind: &str, vocab_hash: &str, meta: serde_json::Value, params: &ParamSet) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        vocab_hash: vocab_hash.to_string(),
        meta,
        tensors: params
            .names()
            .iter()
            .zip(params.values())
            .map(|(n, m)| TensorInfo {
                name: n.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header).map_err(|e| Error::Input(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + hjson.len() + 4 * params.num_scalars());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for m in params.values() {
        for v in &m.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Mat>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::format(path, r.to_string());
    if buf.len() < 16 || &buf[..8] != CKPT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&buf[16..hend]).map_err(|e| bad(&e.to_string()))?;
    let mut off = hend;
    let mut mats = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let end = off + 4 * n;
        if end > buf.len() {
            return Err(bad("truncated parameter block"));
        }
        let data = buf[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        mats.push(Mat::from_vec(t.rows, t.cols, data));
        off = end;
    }
    if off != buf.len() {
        return Err(bad("trailing bytes after parameter blocks"));
    }
    Ok((header, mats))
}

/// Copies loaded tensors into a freshly built parameter set, checking names
/// and shapes.
pub fn fill_params(path: &Path, params: &mut ParamSet, header: &CheckpointHeader, mats: Vec<Mat>) -> Result<()> {
    if header.tensors.len() != params.len() {
        return Err(Error::format(
            path,
            format!("checkpoint has {} tensors, model expects {}", header.tensors.len(), params.len()),
        ));
    }
    for (i, (info, m)) in header.tensors.iter().zip(mats).enumerate() {
        let want = params.value(i);
        if info.name != params.name(i) || m.shape() != want.shape() {
            return Err(Error::format(
                path,
                format!("tensor {i} is {} {:?}, model expects {} {:?}", info.name, m.shape(), params.name(i), want.shape()),
            ));
        }
        *params.value_mut(i) = m;
    }
    Ok(())
}

/// Reads a checkpoint of the given kind, rejecting a different vocabulary.
pub fn read_model_checkpoint(path: &Path, kind: &str, vocab_hash: &str) -> Result<(CheckpointHeader, Vec<Mat>)> {
    let (h, mats) = read_checkpoint(path)?;
    if h.kind != kind {
        return Err(Error::format(path, format!("checkpoint kind is '{}', expected '{kind}'", h.kind)));
    }
    if h.vocab_hash != vocab_hash {
        return Err(Error::VocabMismatch {
            expected: vocab_hash.to_string(),
            found: h.vocab_hash,
        });
    }
    Ok((h, mats))
}
