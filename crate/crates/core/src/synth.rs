//! Synthetic trajectories with known tags and captions.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::caption::{rule_based_caption, Caption, CaptionKind};
use crate::error::{Error, Result};
use crate::geom::{CameraTrajectory, CharacterTrajectory, Se3Pose, MAX_FRAMES};
use crate::io::{save_etj, save_manifest, Etj, ManifestEntry, Split, Tags};
use crate::par;
use crate::tagging::{reference_frame, AxisState, TagSegment, Vocab};

/// Canonical camera speed: 20 m over 300 frames at 25 fps.
pub const CANONICAL_SPEED: f64 = 1.67;
/// Distance of the character in front of the first camera pose.
const CHARACTER_DISTANCE: f64 = 4.0;
const HIP_HEIGHT: f64 = -0.6;
/// Shortest segment drawn for multi-segment samples.
const MIN_MIXED_SEGMENT: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub frames: usize,
    pub fps: f64,
    pub speed: f64,
    pub character_speed: f64,
    pub noise_sigma: f64,
    /// Camera patterns, cycled in order so the set is class balanced.
    pub motion_menu: Vec<AxisState>,
    /// Patterns for the independently drawn character motion.
    pub character_menu: Vec<AxisState>,
    /// Fraction of samples whose character copies the camera's world motion.
    pub follow_fraction: f64,
    /// Maximum number of pure segments per sample.
    pub max_segments: usize,
    pub caption_kind: CaptionKind,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 200,
            frames: 100,
            fps: 25.0,
            speed: CANONICAL_SPEED,
            character_speed: 1.0,
            noise_sigma: 0.0,
            motion_menu: single_axis_motions(),
            character_menu: std::iter::once(AxisState::STATIC).chain(single_axis_motions()).collect(),
            follow_fraction: 0.0,
            max_segments: 1,
            caption_kind: CaptionKind::CameraCharacter,
            val_fraction: 0.0,
            seed: 0,
        }
    }
}

/// The six single-axis translations.
pub fn single_axis_motions() -> Vec<AxisState> {
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [-1i8, 1] {
            let mut s = [0i8; 3];
            s[axis] = sign;
            out.push(AxisState(s));
        }
    }
    out
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_samples == 0 || self.frames < 2 {
            return bad("n_samples must be positive and frames at least 2");
        }
        if self.frames > MAX_FRAMES {
            return bad("frames exceeds the 300-frame limit");
        }
        if !(self.fps > 0.0 && self.speed > 0.0 && self.character_speed > 0.0) {
            return bad("fps and speeds must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative");
        }
        if self.motion_menu.is_empty() || self.character_menu.is_empty() {
            return bad("motion menus must be nonempty");
        }
        if !(0.0..=1.0).contains(&self.follow_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("follow_fraction must be in [0,1] and val_fraction in [0,1)");
        }
        if self.max_segments == 0 {
            return bad("max_segments must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub camera: CameraTrajectory,
    pub character: CharacterTrajectory,
    pub caption: Caption,
    pub camera_tags: Vec<TagSegment>,
    pub character_tags: Vec<TagSegment>,
}

impl SynthSample {
    pub fn to_etj(&self) -> Etj {
        Etj {
            camera: self.camera.clone(),
            character: Some(self.character.clone()),
            caption: Some(self.caption.clone()),
            tags: Some(Tags {
                camera: self.camera_tags.clone(),
                character: self.character_tags.clone(),
            }),
        }
    }
}

fn direction(s: AxisState) -> Vector3<f64> {
    let v = Vector3::new(s.0[0] as f64, s.0[1] as f64, s.0[2] as f64);
    if s.is_static() {
        v
    } else {
        v.normalize()
    }
}

/// Per-frame positions for piecewise constant velocities; the velocity of
/// frame `i` carries it to frame `i + 1`.
fn integrate(start: Vector3<f64>, velocities: &[Vector3<f64>], fps: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(velocities.len());
    let mut p = start;
    for v in velocities {
        out.push(p);
        p += v / fps;
    }
    out
}

fn segments_of(sequence: &[(AxisState, usize)], vocab: Vocab) -> Vec<TagSegment> {
    let mut out: Vec<TagSegment> = Vec::new();
    let mut start = 0;
    for &(s, d) in sequence {
        let label = s.label(vocab);
        match out.last_mut() {
            Some(last) if last.label == label => last.end = start + d - 1,
            _ => out.push(TagSegment::new(start, start + d - 1, label)),
        }
        start += d;
    }
    out
}

/// Piecewise-pure camera and an independently moving character. `character`
/// of `None` draws the character pattern from the spec's menu.
pub fn gen_mixed<R: Rng + ?Sized>(
    sequence: &[(AxisState, usize)],
    character: Option<AxisState>,
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<SynthSample> {
    spec.validate()?;
    let total: usize = sequence.iter().map(|s| s.1).sum();
    if total != spec.frames || sequence.iter().any(|s| s.1 == 0) {
        return Err(Error::Config(format!(
            "segment durations sum to {total}, spec has {} frames",
            spec.frames
        )));
    }
    let n = spec.frames;
    let rot = Matrix3::identity();
    let cam_vel: Vec<Vector3<f64>> = sequence
        .iter()
        .flat_map(|&(s, d)| std::iter::repeat(rot * direction(s) * spec.speed).take(d))
        .collect();
    let cam_pos = integrate(Vector3::zeros(), &cam_vel, spec.fps);

    let char_state = match character {
        Some(s) => s,
        None if rng.gen::<f64>() < spec.follow_fraction => sequence[0].0,
        None => spec.character_menu[rng.gen_range(0..spec.character_menu.len())],
    };
    let reference = reference_frame(&rot);
    let hip_vel = reference * direction(char_state) * spec.character_speed;
    let hip0 = rot * Vector3::new(0.0, HIP_HEIGHT, -CHARACTER_DISTANCE);
    let mut hips = integrate(hip0, &vec![hip_vel; n], spec.fps);

    let mut cam_pos = cam_pos;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for p in cam_pos.iter_mut().chain(hips.iter_mut()) {
            *p += Vector3::from_fn(|_, _| normal.sample(rng));
        }
    }
    let camera = CameraTrajectory::new(spec.fps, cam_pos.into_iter().map(|t| Se3Pose::new(rot, t)).collect())?;
    let camera_tags = segments_of(sequence, Vocab::Camera);
    let character_tags = vec![TagSegment::new(0, n - 1, char_state.label(Vocab::Character))];
    let caption = match spec.caption_kind {
        CaptionKind::Camera => rule_based_caption(&camera_tags, &[])?,
        CaptionKind::CameraCharacter => rule_based_caption(&camera_tags, &character_tags)?,
    };
    Ok(SynthSample {
        camera,
        character: CharacterTrajectory::new(spec.fps, hips),
        caption,
        camera_tags,
        character_tags,
    })
}

/// Single pure motion over the whole clip.
pub fn gen_pure<R: Rng + ?Sized>(tag: AxisState, spec: &SynthSpec, rng: &mut R) -> Result<SynthSample> {
    gen_mixed(&[(tag, spec.frames)], None, spec, rng)
}

fn draw_sequence<R: Rng + ?Sized>(first: AxisState, spec: &SynthSpec, rng: &mut R) -> Vec<(AxisState, usize)> {
    let max = spec.max_segments.min(spec.frames / MIN_MIXED_SEGMENT).max(1);
    let k = rng.gen_range(1..=max);
    let mut tags = vec![first];
    while tags.len() < k {
        let t = spec.motion_menu[rng.gen_range(0..spec.motion_menu.len())];
        if Some(&t) != tags.last() {
            tags.push(t);
        } else if spec.motion_menu.len() == 1 {
            break;
        }
    }
    if tags.len() == 1 {
        return vec![(first, spec.frames)];
    }
    // random cut points with a minimum segment length
    let slack = spec.frames - MIN_MIXED_SEGMENT * tags.len();
    let mut cuts: Vec<usize> = (0..tags.len() - 1).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    tags.iter()
        .enumerate()
        .map(|(i, &t)| {
            let c = if i + 1 < tags.len() { cuts[i] } else { slack };
            let d = MIN_MIXED_SEGMENT + c - prev;
            prev = c;
            (t, d)
        })
        .collect()
}

/// Sample `i` of the dataset; independent of every other sample.
pub fn gen_sample(spec: &SynthSpec, i: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    let first = spec.motion_menu[i % spec.motion_menu.len()];
    let seq = draw_sequence(first, spec, &mut rng);
    gen_mixed(&seq, None, spec, &mut rng)
}

/// All samples of the spec, generated in parallel.
pub fn gen_samples(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    par::map_range(spec.n_samples, |i| gen_sample(spec, i)).into_iter().collect()
}

/// Writes one ETJ per sample plus `manifest.json`. The last
/// `round(n * val_fraction)` samples form the validation split.
pub fn gen_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let samples = gen_samples(spec)?;
    let n_val = (spec.n_samples as f64 * spec.val_fraction).round() as usize;
    let entries: Vec<ManifestEntry> = (0..spec.n_samples)
        .map(|i| ManifestEntry {
            path: format!("sample_{i:05}.etj").into(),
            split: if i + n_val >= spec.n_samples { Split::Val } else { Split::Train },
            overlap_len: None,
        })
        .collect();
    let written: Vec<Result<()>> = par::map_range(samples.len(), |i| {
        save_etj(&out_dir.join(&entries[i].path), &samples[i].to_etj())
    });
    written.into_iter().collect::<Result<()>>()?;
    save_manifest(&out_dir.join("manifest.json"), &entries)?;
    Ok(entries)
}
