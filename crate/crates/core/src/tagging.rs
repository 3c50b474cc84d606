//! Velocity-threshold motion tagging, tag smoothing and segmentation.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{body_velocity, extend_last, linear_velocity, CameraTrajectory, CharacterTrajectory};

/// Per-axis motion direction, each entry in {-1, 0, +1}, ordered (x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AxisState(pub [i8; 3]);

impl AxisState {
    pub const STATIC: AxisState = AxisState([0, 0, 0]);

    pub fn new(x: i8, y: i8, z: i8) -> Self {
        AxisState([x.signum(), y.signum(), z.signum()])
    }

    pub fn is_static(&self) -> bool {
        self.0 == [0, 0, 0]
    }

    /// All 27 triples in lexicographic order.
    pub fn all() -> Vec<AxisState> {
        let mut out = Vec::with_capacity(27);
        for x in -1..=1 {
            for y in -1..=1 {
                for z in -1..=1 {
                    out.push(AxisState([x, y, z]));
                }
            }
        }
        out
    }

    pub fn label(&self, vocab: Vocab) -> String {
        if self.is_static() {
            return "static".into();
        }
        let terms = vocab.terms();
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &s)| s != 0)
            .map(|(a, &s)| terms[a][(s > 0) as usize])
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn from_label(label: &str, vocab: Vocab) -> Option<AxisState> {
        AxisState::all().into_iter().find(|s| s.label(vocab) == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vocab {
    Camera,
    Character,
}

impl Vocab {
    /// `[axis][negative, positive]` direction terms.
    pub fn terms(self) -> [[&'static str; 2]; 3] {
        match self {
            Vocab::Camera => [
                ["truck left", "truck right"],
                ["boom bottom", "boom top"],
                ["push-in", "pull-out"],
            ],
            Vocab::Character => [
                ["move left", "move right"],
                ["move down", "move up"],
                ["move forward", "move backward"],
            ],
        }
    }

    pub fn labels(self) -> Vec<String> {
        AxisState::all().iter().map(|s| s.label(self)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TagConfig {
    pub static_thresh_lin: f64,
    pub dominance_ratio: f64,
    pub smooth_window: usize,
    pub min_segment_len: usize,
}

impl Default for TagConfig {
    fn default() -> Self {
        Self {
            static_thresh_lin: 0.10,
            dominance_ratio: 0.5,
            smooth_window: 25,
            min_segment_len: 25,
        }
    }
}

impl TagConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.static_thresh_lin > 0.0) {
            return Err(Error::Config("static_thresh_lin must be positive".into()));
        }
        if !(self.dominance_ratio > 0.0 && self.dominance_ratio <= 1.0) {
            return Err(Error::Config("dominance_ratio must be in (0, 1]".into()));
        }
        if self.smooth_window == 0 || self.smooth_window % 2 == 0 {
            return Err(Error::Config("smooth_window must be odd and positive".into()));
        }
        if self.min_segment_len == 0 {
            return Err(Error::Config("min_segment_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSegment {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl TagSegment {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for TagSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Between frames {} and {}: {}", self.start, self.end, self.label)
    }
}

/// Checks that segments are ordered, non-overlapping and cover `[0, n-1]`.
pub fn check_coverage(segs: &[TagSegment], n: usize) -> Result<()> {
    let mut next = 0;
    for s in segs {
        if s.start != next || s.end < s.start {
            return Err(Error::MalformedSegments(format!(
                "segment {}..={} does not continue at frame {next}",
                s.start, s.end
            )));
        }
        next = s.end + 1;
    }
    if next != n {
        return Err(Error::MalformedSegments(format!("segments end at {next}, expected {n}")));
    }
    Ok(())
}

/// Two-stage rule: static threshold, then pairwise dominance.
pub fn axis_state(v: &Vector3<f64>, cfg: &TagConfig) -> AxisState {
    let mag = v.abs();
    let active: [bool; 3] = std::array::from_fn(|a| mag[a] > cfg.static_thresh_lin);
    let mut out = [0i8; 3];
    for a in 0..3 {
        if !active[a] {
            continue;
        }
        let outmatched = (0..3).any(|b| b != a && active[b] && mag[a] / mag[b] < cfg.dominance_ratio);
        if !outmatched {
            out[a] = if v[a] > 0.0 { 1 } else { -1 };
        }
    }
    AxisState(out)
}

pub fn axis_states(velocities: &[Vector3<f64>], cfg: &TagConfig) -> Vec<AxisState> {
    velocities.iter().map(|v| axis_state(v, cfg)).collect()
}

/// Per-frame camera states from the body-frame linear velocity.
pub fn camera_frame_tags(traj: &CameraTrajectory, cfg: &TagConfig) -> Result<Vec<AxisState>> {
    if traj.len() < 2 {
        return Err(Error::Trajectory("tagging needs at least 2 frames".into()));
    }
    let v: Vec<_> = body_velocity(traj)?.into_iter().map(|t| t.linear).collect();
    Ok(axis_states(&extend_last(v), cfg))
}

/// Horizontal reference frame built from a camera orientation: y is world up,
/// z is the opposite of the horizontal viewing direction.
pub fn reference_frame(camera_rotation: &Matrix3<f64>) -> Matrix3<f64> {
    let up = Vector3::y();
    let fwd = -camera_rotation.column(2).into_owned();
    let fwd_h = Vector3::new(fwd.x, 0.0, fwd.z);
    let (x, z) = if fwd_h.norm() > 1e-6 {
        let z = -fwd_h.normalize();
        (up.cross(&z), z)
    } else {
        let r = camera_rotation.column(0).into_owned();
        let x = Vector3::new(r.x, 0.0, r.z);
        let x = if x.norm() > 1e-6 { x.normalize() } else { Vector3::x() };
        (x, x.cross(&up))
    };
    Matrix3::from_columns(&[x, up, z])
}

/// Per-frame character states. `reference` rotates world velocities into the
/// tagging frame (usually [`reference_frame`] of the first camera pose).
pub fn character_frame_tags(
    traj: &CharacterTrajectory,
    reference: Option<&Matrix3<f64>>,
    cfg: &TagConfig,
) -> Result<Vec<AxisState>> {
    if traj.len() < 2 {
        return Err(Error::Trajectory("tagging needs at least 2 frames".into()));
    }
    let mut v = linear_velocity(&traj.hips, traj.fps)?;
    if let Some(r) = reference {
        let rt = r.transpose();
        v.iter_mut().for_each(|x| *x = rt * *x);
    }
    Ok(axis_states(&extend_last(v), cfg))
}

/// Per-axis sliding signed-majority vote: an axis keeps sign s only when
/// `count(s) - count(-s)` exceeds half the (border-clamped) window.
pub fn smooth_tags(states: &[AxisState], cfg: &TagConfig) -> Vec<AxisState> {
    let n = states.len();
    let half = cfg.smooth_window / 2;
    // prefix sums of signs per axis
    let mut pre = vec![[0i64; 3]; n + 1];
    for (i, s) in states.iter().enumerate() {
        for a in 0..3 {
            pre[i + 1][a] = pre[i][a] + s.0[a] as i64;
        }
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let len = (hi - lo) as i64;
            let mut out = [0i8; 3];
            for a in 0..3 {
                let net = pre[hi][a] - pre[lo][a];
                if 2 * net.abs() > len {
                    out[a] = net.signum() as i8;
                }
            }
            AxisState(out)
        })
        .collect()
}

/// Runs of identical states, short runs merged into their longer neighbour.
pub fn segment_states(states: &[AxisState], min_len: usize) -> Vec<(usize, usize, AxisState)> {
    let mut runs: Vec<(usize, usize, AxisState)> = Vec::new();
    for (i, &s) in states.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.2 == s => r.1 = i,
            _ => runs.push((i, i, s)),
        }
    }
    loop {
        let short = runs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.1 + 1 - r.0 < min_len)
            .min_by_key(|(i, r)| (r.1 + 1 - r.0, *i))
            .map(|(i, _)| i);
        let Some(i) = short else { break };
        if runs.len() == 1 {
            break;
        }
        let len = |r: &(usize, usize, AxisState)| r.1 + 1 - r.0;
        let target = match (i.checked_sub(1), runs.get(i + 1)) {
            (Some(p), Some(nx)) => {
                if len(&runs[p]) >= len(nx) {
                    p
                } else {
                    i + 1
                }
            }
            (Some(p), None) => p,
            (None, _) => i + 1,
        };
        let state = runs[target].2;
        runs[i].2 = state;
        // coalesce equal neighbours
        let mut merged: Vec<(usize, usize, AxisState)> = Vec::with_capacity(runs.len());
        for r in runs {
            match merged.last_mut() {
                Some(m) if m.2 == r.2 => m.1 = r.1,
                _ => merged.push(r),
            }
        }
        runs = merged;
    }
    runs
}

pub fn segment_tags(states: &[AxisState], vocab: Vocab, cfg: &TagConfig) -> Vec<TagSegment> {
    segment_states(states, cfg.min_segment_len)
        .into_iter()
        .map(|(s, e, st)| TagSegment::new(s, e, st.label(vocab)))
        .collect()
}

/// Expands segments back to per-frame states.
pub fn segments_to_states(segs: &[TagSegment], vocab: Vocab) -> Result<Vec<AxisState>> {
    let mut out = Vec::new();
    for s in segs {
        let st = AxisState::from_label(&s.label, vocab)
            .ok_or_else(|| Error::MalformedSegments(format!("unknown label '{}'", s.label)))?;
        out.extend(std::iter::repeat(st).take(s.len()));
    }
    Ok(out)
}

/// Frame tags, smoothing and segmentation for a camera track.
pub fn tag_camera(traj: &CameraTrajectory, cfg: &TagConfig) -> Result<Vec<TagSegment>> {
    cfg.validate()?;
    let states = smooth_tags(&camera_frame_tags(traj, cfg)?, cfg);
    Ok(segment_tags(&states, Vocab::Camera, cfg))
}

pub fn tag_character(
    traj: &CharacterTrajectory,
    reference: Option<&Matrix3<f64>>,
    cfg: &TagConfig,
) -> Result<Vec<TagSegment>> {
    cfg.validate()?;
    let states = smooth_tags(&character_frame_tags(traj, reference, cfg)?, cfg);
    Ok(segment_tags(&states, Vocab::Character, cfg))
}

/// Axis-aligned box `[x0, y0, x1, y1]` in pixels at a frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTrack {
    pub id: u32,
    pub boxes: Vec<(usize, [f64; 4])>,
}

impl BoxTrack {
    fn mean_area(&self) -> f64 {
        if self.boxes.is_empty() {
            return 0.0;
        }
        self.boxes
            .iter()
            .map(|(_, b)| ((b[2] - b[0]).max(0.0)) * ((b[3] - b[1]).max(0.0)))
            .sum::<f64>()
            / self.boxes.len() as f64
    }
}

/// Score = mean box area fraction times fraction of frames present; ties go to
/// the lowest id.
pub fn select_main_character(tracks: &[BoxTrack], frame_area: f64, total_frames: usize) -> Result<u32> {
    if tracks.is_empty() {
        return Err(Error::NoCharacter);
    }
    if !(frame_area > 0.0) || total_frames == 0 {
        return Err(Error::Input("frame area and frame count must be positive".into()));
    }
    let score = |t: &BoxTrack| {
        let mut frames: Vec<usize> = t.boxes.iter().map(|b| b.0).collect();
        frames.sort_unstable();
        frames.dedup();
        (t.mean_area() / frame_area) * (frames.len() as f64 / total_frames as f64)
    };
    let mut best = (&tracks[0], score(&tracks[0]));
    for t in &tracks[1..] {
        let s = score(t);
        if s > best.1 || (s == best.1 && t.id < best.0.id) {
            best = (t, s);
        }
    }
    Ok(best.0.id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{so3_exp, Se3Pose};
    use proptest::prelude::*;
    use std::collections::HashSet;

    const SPEED: f64 = 1.67;

    fn cam(rot: Matrix3<f64>, world_vel: Vector3<f64>, n: usize) -> CameraTrajectory {
        let fps = 30.0;
        let poses = (0..n)
            .map(|i| Se3Pose::new(rot, world_vel * (i as f64 / fps)))
            .collect();
        CameraTrajectory::new(fps, poses).unwrap()
    }

    #[test]
    fn axis_state_examples() {
        let cfg = TagConfig::default();
        assert_eq!(axis_state(&Vector3::zeros(), &cfg), AxisState::STATIC);
        assert_eq!(axis_state(&Vector3::new(1.0, 0.02, 0.01), &cfg), AxisState::new(1, 0, 0));
        assert_eq!(axis_state(&Vector3::new(1.0, 0.95, 0.3), &cfg), AxisState::new(1, 1, 0));
        assert_eq!(axis_state(&Vector3::new(-0.5, 0.0, 0.5), &cfg), AxisState::new(-1, 0, 1));
    }

    #[test]
    fn vocabulary_is_closed_over_27_states() {
        for vocab in [Vocab::Camera, Vocab::Character] {
            let labels: HashSet<_> = vocab.labels().into_iter().collect();
            assert_eq!(labels.len(), 27);
            for s in AxisState::all() {
                assert_eq!(AxisState::from_label(&s.label(vocab), vocab), Some(s));
            }
        }
        assert_eq!(AxisState::new(1, 0, -1).label(Vocab::Camera), "truck right-push-in");
        assert_eq!(AxisState::new(0, 1, 0).label(Vocab::Camera), "boom top");
        assert_eq!(AxisState::new(0, 0, 1).label(Vocab::Character), "move backward");
    }

    #[test]
    fn camera_push_in_along_own_axis() {
        let t = cam(Matrix3::identity(), Vector3::new(0.0, 0.0, -SPEED), 60);
        let tags = camera_frame_tags(&t, &TagConfig::default()).unwrap();
        assert_eq!(tags.len(), 60);
        assert!(tags.iter().all(|s| *s == AxisState::new(0, 0, -1)));
        let segs = tag_camera(&t, &TagConfig::default()).unwrap();
        assert_eq!(segs, vec![TagSegment::new(0, 59, "push-in")]);
    }

    #[test]
    fn camera_frame_distinguishes_truck_from_push() {
        // facing world +x: camera -z maps to +x, rotate -90 degrees about y
        let facing_x = so3_exp(&Vector3::new(0.0, -std::f64::consts::FRAC_PI_2, 0.0));
        assert!((facing_x * Vector3::new(0.0, 0.0, -1.0) - Vector3::x()).norm() < 1e-12);
        let t = cam(facing_x, Vector3::new(SPEED, 0.0, 0.0), 40);
        let tags = camera_frame_tags(&t, &TagConfig::default()).unwrap();
        assert!(tags.iter().all(|s| s.label(Vocab::Camera) == "push-in"));

        let t = cam(Matrix3::identity(), Vector3::new(SPEED, 0.0, 0.0), 40);
        let tags = camera_frame_tags(&t, &TagConfig::default()).unwrap();
        assert!(tags.iter().all(|s| s.label(Vocab::Camera) == "truck right"));
    }

    #[test]
    fn character_examples() {
        let cfg = TagConfig::default();
        let fps = 30.0;
        let mk = |v: Vector3<f64>| {
            CharacterTrajectory::new(fps, (0..50).map(|i| v * (i as f64 / fps)).collect())
        };
        let st = character_frame_tags(&mk(Vector3::zeros()), None, &cfg).unwrap();
        assert!(st.iter().all(|s| s.is_static()));
        let st = character_frame_tags(&mk(Vector3::x()), None, &cfg).unwrap();
        assert!(st.iter().all(|s| s.label(Vocab::Character) == "move right"));
        let st = character_frame_tags(&mk(Vector3::y()), None, &cfg).unwrap();
        assert!(st.iter().all(|s| s.label(Vocab::Character) == "move up"));
    }

    #[test]
    fn reference_frame_follows_camera_heading() {
        assert!((reference_frame(&Matrix3::identity()) - Matrix3::identity()).amax() < 1e-12);
        // camera yawed to face +x, pitched down a little
        let r = so3_exp(&Vector3::new(0.0, -std::f64::consts::FRAC_PI_2, 0.0))
            * so3_exp(&Vector3::new(-0.3, 0.0, 0.0));
        let f = reference_frame(&r);
        assert!((f.column(1) - Vector3::y()).norm() < 1e-12);
        assert!((f.column(2) + Vector3::x()).norm() < 1e-12);
        let hips = CharacterTrajectory::new(30.0, (0..40).map(|i| Vector3::x() * (i as f64 / 30.0)).collect());
        let st = character_frame_tags(&hips, Some(&f), &TagConfig::default()).unwrap();
        assert!(st.iter().all(|s| s.label(Vocab::Character) == "move forward"));
    }

    #[test]
    fn smoothing_examples() {
        let cfg = TagConfig::default();
        let c = vec![AxisState::new(0, 1, -1); 40];
        assert_eq!(smooth_tags(&c, &cfg), c);

        let mut s = vec![AxisState::new(1, 0, 0); 100];
        for i in [10, 50, 90] {
            s[i] = AxisState::STATIC;
        }
        assert!(smooth_tags(&s, &cfg).iter().all(|x| *x == AxisState::new(1, 0, 0)));

        let alt: Vec<_> = (0..100).map(|i| AxisState::new(if i % 2 == 0 { 1 } else { -1 }, 0, 0)).collect();
        assert!(smooth_tags(&alt, &cfg).iter().all(|x| x.is_static()));
    }

    #[test]
    fn segmentation_examples() {
        let cfg = TagConfig::default();
        let segs = segment_tags(&vec![AxisState::STATIC; 80], Vocab::Camera, &cfg);
        assert_eq!(segs, vec![TagSegment::new(0, 79, "static")]);

        let mut s = vec![AxisState::new(0, 1, 0); 155];
        s.extend(vec![AxisState::STATIC; 55]);
        let segs = segment_tags(&s, Vocab::Camera, &cfg);
        assert_eq!(
            segs,
            vec![TagSegment::new(0, 154, "boom top"), TagSegment::new(155, 209, "static")]
        );
        assert_eq!(segs[0].to_string(), "Between frames 0 and 154: boom top");

        let segs = segment_tags(&vec![AxisState::new(1, 0, -1); 30], Vocab::Camera, &cfg);
        assert_eq!(segs[0].label, "truck right-push-in");
    }

    #[test]
    fn short_runs_merge_into_longer_neighbour() {
        let mut s = vec![AxisState::new(1, 0, 0); 40];
        s.extend(vec![AxisState::STATIC; 5]);
        s.extend(vec![AxisState::new(0, 1, 0); 30]);
        let segs = segment_states(&s, 25);
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].0, segs[0].1), (0, 44));
        assert_eq!((segs[1].0, segs[1].1), (45, 74));
    }

    #[test]
    fn scale_invariance_above_threshold() {
        let cfg = TagConfig::default();
        let v = Vector3::new(0.3, -0.2, 0.11);
        for l in [1.0, 1.5, 10.0, 1000.0] {
            assert_eq!(axis_state(&(v * l), &cfg), axis_state(&v, &cfg));
        }
    }

    proptest! {
        #[test]
        fn segments_cover_all_frames(raw in proptest::collection::vec(0usize..27, 1..200), min_len in 1usize..40) {
            let all = AxisState::all();
            let states: Vec<_> = raw.iter().map(|&i| all[i]).collect();
            let cfg = TagConfig { min_segment_len: min_len, ..Default::default() };
            let segs = segment_tags(&states, Vocab::Camera, &cfg);
            prop_assert!(check_coverage(&segs, states.len()).is_ok());
            for w in segs.windows(2) {
                prop_assert_ne!(&w[0].label, &w[1].label);
            }
            if segs.len() > 1 {
                prop_assert!(segs.iter().all(|s| s.len() >= min_len));
            }
        }
    }

    #[test]
    fn main_character_examples() {
        let full = |id, frac: f64, present: usize| BoxTrack {
            id,
            boxes: (0..present).map(|f| (f, [0.0, 0.0, frac * 100.0, 100.0])).collect(),
        };
        assert_eq!(select_main_character(&[full(7, 0.1, 10)], 10_000.0, 100).unwrap(), 7);
        let a = full(1, 0.4, 100);
        let b = full(2, 0.6, 50);
        assert_eq!(select_main_character(&[b.clone(), a.clone()], 10_000.0, 100).unwrap(), 1);
        let c = full(0, 0.4, 100);
        assert_eq!(select_main_character(&[a, c], 10_000.0, 100).unwrap(), 0);
        assert!(matches!(select_main_character(&[], 1.0, 1), Err(Error::NoCharacter)));
    }
}
