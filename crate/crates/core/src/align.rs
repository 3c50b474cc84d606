//! Merging per-chunk pose estimates that differ by a scale and a translation
//! bias into one consistent trajectory.
//!
//! Consecutive chunks share `overlap_len` frames. On those frames the
//! translations obey `t_k = s * t_{k+1} + b`, rotations are shared (no
//! rotational offset between chunks). Every chunk is cascaded into the frame
//! of chunk 0.

use nalgebra::{Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geom::{CameraTrajectory, CharacterTrajectory, Se3Pose};
use crate::par;

/// Frames per chunk produced by the upstream pose estimator.
pub const MAX_CHUNK_LEN: usize = 100;
/// Overlap used when splitting a shot into chunks.
pub const DEFAULT_OVERLAP: usize = 10;

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub cameras: CameraTrajectory,
    pub character: CharacterTrajectory,
    /// Frames shared with the next chunk (ignored for the last chunk).
    pub overlap_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleBias {
    pub s: f64,
    pub b: Vector3<f64>,
}

impl ScaleBias {
    pub fn identity() -> Self {
        Self {
            s: 1.0,
            b: Vector3::zeros(),
        }
    }

    pub fn apply(&self, t: &Vector3<f64>) -> Vector3<f64> {
        t * self.s + self.b
    }

    /// `self ∘ inner`.
    pub fn then_outer(&self, outer: &ScaleBias) -> ScaleBias {
        ScaleBias {
            s: outer.s * self.s,
            b: outer.b + self.b * outer.s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleBiasFit {
    pub scale_bias: ScaleBias,
    /// Root mean square of the per-frame residual norm.
    pub rms: f64,
}

/// Least-squares `(s, b)` minimizing `sum ||t_ref_i - (s t_next_i + b)||^2`.
pub fn estimate_scale_bias(t_ref: &[Vector3<f64>], t_next: &[Vector3<f64>]) -> Result<ScaleBiasFit> {
    estimate_inner(t_ref, t_next, None)
}

fn estimate_inner(
    t_ref: &[Vector3<f64>],
    t_next: &[Vector3<f64>],
    chunk: Option<usize>,
) -> Result<ScaleBiasFit> {
    if t_ref.len() != t_next.len() {
        return Err(Error::Shape(format!(
            "overlap lengths differ: {} vs {}",
            t_ref.len(),
            t_next.len()
        )));
    }
    if t_ref.len() < 2 {
        return Err(Error::DegenerateOverlap {
            chunk,
            reason: format!("{} overlap frames, need at least 2", t_ref.len()),
        });
    }

    // Normal equations of the stacked system [t_next | I] [s; b] = t_ref.
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for (r, n) in t_ref.iter().zip(t_next) {
        ata[(0, 0)] += n.norm_squared();
        for c in 0..3 {
            ata[(0, c + 1)] += n[c];
            ata[(c + 1, 0)] += n[c];
            ata[(c + 1, c + 1)] += 1.0;
            atb[0] += n[c] * r[c];
            atb[c + 1] += r[c];
        }
    }
    let eig = ata.symmetric_eigen().eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::DegenerateOverlap {
            chunk,
            reason: format!("normal equations ill-conditioned (cond {:.3e})", hi / lo),
        });
    }

    // Centered closed form of the same solution.
    let n = t_ref.len() as f64;
    let mean_r: Vector3<f64> = t_ref.iter().sum::<Vector3<f64>>() / n;
    let mean_n: Vector3<f64> = t_next.iter().sum::<Vector3<f64>>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (r, q) in t_ref.iter().zip(t_next) {
        let dq = q - mean_n;
        num += (r - mean_r).dot(&dq);
        den += dq.norm_squared();
    }
    let s = num / den;
    if !(s > 0.0) {
        return Err(Error::NegativeScale { chunk, scale: s });
    }
    let b = mean_r - mean_n * s;
    let scale_bias = ScaleBias { s, b };
    let sse: f64 = t_ref
        .iter()
        .zip(t_next)
        .map(|(r, q)| (r - scale_bias.apply(q)).norm_squared())
        .sum();
    Ok(ScaleBiasFit {
        scale_bias,
        rms: (sse / n).sqrt(),
    })
}

/// Translation of `Δ_b = [R | s t + b]^-1 [R | t]`, i.e. `R^T (t - (s t + b))`.
/// Its rotation part is the identity.
pub fn alignment_transform(sb: &ScaleBias, pose_next: &Se3Pose) -> Vector3<f64> {
    let t = pose_next.translation;
    pose_next.rotation.transpose() * (t - sb.apply(&t))
}

/// Shifts every vertex by the same offset, `V + R^T (t - (s t + b))`.
pub fn align_vertices(
    v_next: &[Vector3<f64>],
    sb: &ScaleBias,
    pose_next: &Se3Pose,
) -> Vec<Vector3<f64>> {
    let offset = alignment_transform(sb, pose_next);
    v_next.iter().map(|v| v + offset).collect()
}

fn check_chunks(chunks: &[Chunk]) -> Result<()> {
    if chunks.is_empty() {
        return Err(Error::Input("no chunks to align".into()));
    }
    for (k, c) in chunks.iter().enumerate() {
        if c.cameras.len() > MAX_CHUNK_LEN {
            return Err(Error::Input(format!(
                "chunk {k} has {} frames (max {MAX_CHUNK_LEN})",
                c.cameras.len()
            )));
        }
        if c.character.len() != c.cameras.len() {
            return Err(Error::Shape(format!(
                "chunk {k}: {} hips for {} cameras",
                c.character.len(),
                c.cameras.len()
            )));
        }
        if let Some(next) = chunks.get(k + 1) {
            if c.overlap_len < 2 {
                return Err(Error::DegenerateOverlap {
                    chunk: Some(k),
                    reason: format!("overlap_len {} < 2", c.overlap_len),
                });
            }
            if c.overlap_len > c.cameras.len() || c.overlap_len > next.cameras.len() {
                return Err(Error::Input(format!(
                    "chunk {k}: overlap {} longer than a chunk",
                    c.overlap_len
                )));
            }
        }
    }
    Ok(())
}

/// Per-boundary fits; entry `k` maps chunk `k + 1` into chunk `k`.
pub fn boundary_fits(chunks: &[Chunk]) -> Result<Vec<ScaleBiasFit>> {
    check_chunks(chunks)?;
    let fits = par::map_range(chunks.len().saturating_sub(1), |k| {
        let prev = &chunks[k];
        let next = &chunks[k + 1];
        let ov = prev.overlap_len;
        let t_ref: Vec<_> = prev.cameras.poses[prev.cameras.len() - ov..]
            .iter()
            .map(|p| p.translation)
            .collect();
        let t_next: Vec<_> = next.cameras.poses[..ov].iter().map(|p| p.translation).collect();
        estimate_inner(&t_ref, &t_next, Some(k + 1))
    });
    fits.into_iter().collect()
}

/// Cascades all chunks into chunk 0's frame and merges overlaps, keeping the
/// earlier chunk's values on shared frames.
pub fn align_chunks(chunks: &[Chunk]) -> Result<(CameraTrajectory, CharacterTrajectory)> {
    let fits = boundary_fits(chunks)?;
    let first = &chunks[0];
    let mut poses = first.cameras.poses.clone();
    let mut mask = first.cameras.mask.clone();
    let mut hips = first.character.hips.clone();
    let mut vertices = first.character.vertices.clone();

    for j in 1..chunks.len() {
        let chunk = &chunks[j];
        let skip = chunks[j - 1].overlap_len;
        for f in skip..chunk.cameras.len() {
            let mut pose = chunk.cameras.poses[f];
            let mut hip = chunk.character.hips[f];
            let mut verts = chunk.character.vertices.as_ref().map(|v| v[f].clone());
            // Walk back boundary by boundary: j -> j-1 -> ... -> 0.
            for k in (0..j).rev() {
                let sb = fits[k].scale_bias;
                let offset = alignment_transform(&sb, &pose);
                hip += offset;
                if let Some(v) = verts.as_mut() {
                    v.iter_mut().for_each(|p| *p += offset);
                }
                pose.translation = sb.apply(&pose.translation);
            }
            poses.push(pose);
            mask.push(chunk.cameras.mask[f]);
            hips.push(hip);
            match (&mut vertices, verts) {
                (Some(all), Some(v)) => all.push(v),
                _ => vertices = None,
            }
        }
    }

    let cameras = CameraTrajectory::with_mask(first.cameras.fps, poses, mask)?;
    let character = CharacterTrajectory {
        fps: first.character.fps,
        hips,
        vertices,
    };
    Ok((cameras, character))
}

/// Splits a shot into chunks of at most `chunk_len` frames sharing `overlap` frames.
pub fn split_into_chunks(
    cameras: &CameraTrajectory,
    character: &CharacterTrajectory,
    chunk_len: usize,
    overlap: usize,
) -> Result<Vec<Chunk>> {
    if chunk_len > MAX_CHUNK_LEN || overlap < 2 || overlap >= chunk_len {
        return Err(Error::Config(format!(
            "chunk_len {chunk_len} / overlap {overlap} invalid"
        )));
    }
    let n = cameras.len();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let len = chunk_len.min(n - start);
        let last = start + len >= n;
        out.push(Chunk {
            cameras: cameras.slice(start, len)?,
            character: character.slice(start, len),
            overlap_len: if last { 0 } else { overlap },
        });
        if last {
            break;
        }
        start += chunk_len - overlap;
    }
    Ok(out)
}
