//! Outlier rejection, sub-trajectory partitioning, Kalman smoothing and cropping.

use std::ops::Range;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{body_velocity, CameraTrajectory, CharacterTrajectory, MAX_FRAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub percentile: f64,
    pub scale_factor: f64,
    pub min_subtraj_len: usize,
    pub max_len: usize,
    /// White-noise acceleration variance, (m/s^2)^2.
    pub kalman_process_var: f64,
    /// Position measurement variance, m^2.
    pub kalman_obs_var: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            percentile: 95.0,
            scale_factor: 1.5,
            min_subtraj_len: 25,
            max_len: MAX_FRAMES,
            kalman_process_var: 1e-2,
            kalman_obs_var: 1e-3,
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config(format!("percentile {} not in (0, 100]", self.percentile)));
        }
        if !(self.scale_factor > 0.0) {
            return Err(Error::Config("scale_factor must be positive".into()));
        }
        if self.min_subtraj_len == 0 || self.max_len == 0 {
            return Err(Error::Config("frame counts must be positive".into()));
        }
        if !(self.kalman_process_var > 0.0 && self.kalman_obs_var > 0.0) {
            return Err(Error::Config("kalman variances must be positive".into()));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile (`p` in percent) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Frame speeds: frame `i >= 1` takes the displacement arriving from `i - 1`,
/// frame 0 has none.
fn frame_speeds(traj: &CameraTrajectory) -> Result<Vec<f64>> {
    Ok(body_velocity(traj)?.iter().map(|t| t.linear.norm()).collect())
}

/// `true` marks an outlier.
pub fn velocity_outlier_mask(traj: &CameraTrajectory, cfg: &CleanConfig) -> Result<Vec<bool>> {
    cfg.validate()?;
    let speeds = frame_speeds(traj)?;
    let threshold = percentile(&speeds, cfg.percentile) * cfg.scale_factor;
    let mut mask = Vec::with_capacity(traj.len());
    mask.push(false);
    mask.extend(speeds.iter().map(|&s| s > threshold));
    Ok(mask)
}

/// Maximal runs of non-outlier frames at least `min_len` long.
pub fn partition_ranges(outliers: &[bool], min_len: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &bad) in outliers.iter().chain(std::iter::once(&true)).enumerate() {
        match (bad, start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                if i - s >= min_len {
                    out.push(s..i);
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

pub fn partition_subtrajectories(
    traj: &CameraTrajectory,
    outliers: &[bool],
    cfg: &CleanConfig,
) -> Result<Vec<CameraTrajectory>> {
    if outliers.len() != traj.len() {
        return Err(Error::Shape(format!(
            "mask length {} != trajectory length {}",
            outliers.len(),
            traj.len()
        )));
    }
    partition_ranges(outliers, cfg.min_subtraj_len)
        .into_iter()
        .map(|r| traj.slice(r.start, r.len()))
        .collect()
}

/// Constant-velocity Kalman filter followed by an RTS backward pass, one axis.
pub fn kalman_rts_1d(z: &[f64], dt: f64, q: f64, r: f64) -> Vec<f64> {
    let n = z.len();
    if n < 2 {
        return z.to_vec();
    }
    type S = [f64; 2];
    type P = [[f64; 2]; 2];
    let qm: P = [
        [q * dt.powi(4) / 4.0, q * dt.powi(3) / 2.0],
        [q * dt.powi(3) / 2.0, q * dt * dt],
    ];
    let predict = |m: &S, p: &P| -> (S, P) {
        let m1 = [m[0] + dt * m[1], m[1]];
        let a = p[0][0] + dt * (p[1][0] + p[0][1]) + dt * dt * p[1][1];
        let b = p[0][1] + dt * p[1][1];
        let c = p[1][0] + dt * p[1][1];
        (m1, [[a + qm[0][0], b + qm[0][1]], [c + qm[1][0], p[1][1] + qm[1][1]]])
    };

    // Prior from the first two samples; exact for noiseless constant-velocity data.
    let mut m: S = [z[0], (z[1] - z[0]) / dt];
    let mut p: P = [[r, -r / dt], [-r / dt, 2.0 * r / (dt * dt)]];
    let mut filt_m = Vec::with_capacity(n);
    let mut filt_p = Vec::with_capacity(n);
    let mut pred_m = Vec::with_capacity(n);
    let mut pred_p = Vec::with_capacity(n);
    for (i, &zi) in z.iter().enumerate() {
        if i > 0 {
            let (mp, pp) = predict(&m, &p);
            m = mp;
            p = pp;
        }
        pred_m.push(m);
        pred_p.push(p);
        let s = p[0][0] + r;
        let k = [p[0][0] / s, p[1][0] / s];
        let innov = zi - m[0];
        m = [m[0] + k[0] * innov, m[1] + k[1] * innov];
        p = [
            [(1.0 - k[0]) * p[0][0], (1.0 - k[0]) * p[0][1]],
            [p[1][0] - k[1] * p[0][0], p[1][1] - k[1] * p[0][1]],
        ];
        filt_m.push(m);
        filt_p.push(p);
    }

    let mut sm = filt_m.clone();
    let mut sp = filt_p.clone();
    for i in (0..n - 1).rev() {
        let pf = filt_p[i];
        let pp = pred_p[i + 1];
        // C = Pf F^T Pp^-1
        let pf_ft = [
            [pf[0][0] + dt * pf[0][1], pf[0][1]],
            [pf[1][0] + dt * pf[1][1], pf[1][1]],
        ];
        let det = pp[0][0] * pp[1][1] - pp[0][1] * pp[1][0];
        let inv = [
            [pp[1][1] / det, -pp[0][1] / det],
            [-pp[1][0] / det, pp[0][0] / det],
        ];
        let c = mat2_mul(&pf_ft, &inv);
        let dm = [sm[i + 1][0] - pred_m[i + 1][0], sm[i + 1][1] - pred_m[i + 1][1]];
        sm[i] = [
            filt_m[i][0] + c[0][0] * dm[0] + c[0][1] * dm[1],
            filt_m[i][1] + c[1][0] * dm[0] + c[1][1] * dm[1],
        ];
        let dp = [
            [sp[i + 1][0][0] - pp[0][0], sp[i + 1][0][1] - pp[0][1]],
            [sp[i + 1][1][0] - pp[1][0], sp[i + 1][1][1] - pp[1][1]],
        ];
        let ct = [[c[0][0], c[1][0]], [c[0][1], c[1][1]]];
        let corr = mat2_mul(&mat2_mul(&c, &dp), &ct);
        sp[i] = [
            [pf[0][0] + corr[0][0], pf[0][1] + corr[0][1]],
            [pf[1][0] + corr[1][0], pf[1][1] + corr[1][1]],
        ];
    }
    sm.iter().map(|s| s[0]).collect()
}

fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

fn smooth_points(points: &[Vector3<f64>], fps: f64, cfg: &CleanConfig) -> Vec<Vector3<f64>> {
    let dt = 1.0 / fps;
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let z: Vec<f64> = points.iter().map(|p| p[a]).collect();
            kalman_rts_1d(&z, dt, cfg.kalman_process_var, cfg.kalman_obs_var)
        })
        .collect();
    (0..points.len())
        .map(|i| Vector3::new(axes[0][i], axes[1][i], axes[2][i]))
        .collect()
}

/// Windowed spherical average of rotations (sign-aligned quaternion mean).
pub fn smooth_rotations(
    rotations: &[nalgebra::Matrix3<f64>],
    window: usize,
) -> Vec<nalgebra::Matrix3<f64>> {
    let half = window / 2;
    let quats: Vec<UnitQuaternion<f64>> = rotations
        .iter()
        .map(|r| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r)))
        .collect();
    (0..quats.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(quats.len());
            let center = quats[i].into_inner();
            let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
            for q in &quats[lo..hi] {
                let q = q.into_inner();
                acc += if q.dot(&center) < 0.0 { -q } else { q };
            }
            if hi - lo == 1 {
                return rotations[i];
            }
            UnitQuaternion::from_quaternion(acc)
                .to_rotation_matrix()
                .into_inner()
        })
        .collect()
}

pub const ROTATION_WINDOW: usize = 5;

/// Trajectories that can be smoothed and cropped frame-wise.
pub trait FrameSeries: Sized {
    fn frames(&self) -> usize;
    fn kalman_smooth(&self, cfg: &CleanConfig) -> Result<Self>;
    fn crop(&self, max_len: usize) -> Self;
}

impl FrameSeries for CameraTrajectory {
    fn frames(&self) -> usize {
        self.len()
    }

    fn kalman_smooth(&self, cfg: &CleanConfig) -> Result<Self> {
        cfg.validate()?;
        if self.len() < 2 {
            return Err(Error::Trajectory("smoothing needs at least 2 frames".into()));
        }
        let t = smooth_points(&self.translations(), self.fps, cfg);
        let rots: Vec<_> = self.poses.iter().map(|p| p.rotation).collect();
        let r = smooth_rotations(&rots, ROTATION_WINDOW);
        let mut out = self.clone();
        for (i, p) in out.poses.iter_mut().enumerate() {
            p.translation = t[i];
            p.rotation = r[i];
        }
        Ok(out)
    }

    fn crop(&self, max_len: usize) -> Self {
        let n = self.len().min(max_len.max(1));
        let mut out = self.clone();
        out.poses.truncate(n);
        out.mask.truncate(n);
        out
    }
}

impl FrameSeries for CharacterTrajectory {
    fn frames(&self) -> usize {
        self.len()
    }

    fn kalman_smooth(&self, cfg: &CleanConfig) -> Result<Self> {
        cfg.validate()?;
        if self.len() < 2 {
            return Err(Error::Trajectory("smoothing needs at least 2 frames".into()));
        }
        let mut out = self.clone();
        out.hips = smooth_points(&self.hips, self.fps, cfg);
        Ok(out)
    }

    fn crop(&self, max_len: usize) -> Self {
        let n = self.len().min(max_len);
        self.slice(0, n)
    }
}

pub fn kalman_smooth<T: FrameSeries>(traj: &T, cfg: &CleanConfig) -> Result<T> {
    traj.kalman_smooth(cfg)
}

pub fn crop<T: FrameSeries>(traj: &T, max_len: usize) -> T {
    traj.crop(max_len)
}

/// Outlier mask, partition, smoothing and cropping. The character track, when
/// given, is cut at the same frames as the camera.
pub fn clean_shot(
    cameras: &CameraTrajectory,
    character: Option<&CharacterTrajectory>,
    cfg: &CleanConfig,
) -> Result<Vec<(CameraTrajectory, Option<CharacterTrajectory>)>> {
    if let Some(c) = character {
        if c.len() != cameras.len() {
            return Err(Error::Shape(format!(
                "character has {} frames, camera {}",
                c.len(),
                cameras.len()
            )));
        }
    }
    let outliers = velocity_outlier_mask(cameras, cfg)?;
    partition_ranges(&outliers, cfg.min_subtraj_len.max(2))
        .into_iter()
        .map(|r| {
            let cam = cameras.slice(r.start, r.len())?.kalman_smooth(cfg)?.crop(cfg.max_len);
            let ch = match character {
                Some(c) => Some(c.slice(r.start, r.len()).kalman_smooth(cfg)?.crop(cfg.max_len)),
                None => None,
            };
            Ok((cam, ch))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{so3_exp, Se3Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn line(n: usize, vel: Vector3<f64>, fps: f64) -> CameraTrajectory {
        let poses = (0..n)
            .map(|i| Se3Pose::from_translation(Vector3::new(1.0, 2.0, -3.0) + vel * (i as f64 / fps)))
            .collect();
        CameraTrajectory::new(fps, poses).unwrap()
    }

    #[test]
    fn percentile_matches_sorted_oracle() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 100.0), 4.0);
        assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 50.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn constant_velocity_has_no_outliers() {
        let t = line(100, Vector3::new(1.0, 0.5, 0.0), 25.0);
        let m = velocity_outlier_mask(&t, &CleanConfig::default()).unwrap();
        assert!(m.iter().all(|b| !b));
    }

    #[test]
    fn static_has_no_outliers() {
        let t = CameraTrajectory::new(25.0, vec![Se3Pose::identity(); 40]).unwrap();
        let m = velocity_outlier_mask(&t, &CleanConfig::default()).unwrap();
        assert!(m.iter().all(|b| !b));
    }

    #[test]
    fn single_jump_is_flagged_exactly() {
        let fps = 25.0;
        let mut pos = Vector3::zeros();
        let mut poses = vec![Se3Pose::from_translation(pos)];
        for i in 1..100 {
            let speed = if i == 40 { 50.0 } else { 1.0 };
            pos += Vector3::new(speed / fps, 0.0, 0.0);
            poses.push(Se3Pose::from_translation(pos));
        }
        let t = CameraTrajectory::new(fps, poses).unwrap();
        let m = velocity_outlier_mask(&t, &CleanConfig::default()).unwrap();
        // oracle: sort the 99 speeds, 95th percentile by interpolation is 1 m/s
        let flagged: Vec<_> = m.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        assert_eq!(flagged, vec![40]);
    }

    #[test]
    fn outlier_mask_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pos = Vector3::zeros();
        let mut poses = Vec::new();
        for _ in 0..80 {
            pos += Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.05);
            poses.push(Se3Pose::from_translation(pos));
        }
        let t = CameraTrajectory::new(25.0, poses).unwrap();
        let g = Se3Pose::new(so3_exp(&Vector3::new(0.3, -1.2, 0.4)), Vector3::new(5.0, 1.0, -2.0));
        let moved = CameraTrajectory::new(25.0, t.poses.iter().map(|p| g.compose(p)).collect()).unwrap();
        let cfg = CleanConfig {
            scale_factor: 1.0,
            percentile: 80.0,
            ..Default::default()
        };
        assert_eq!(
            velocity_outlier_mask(&t, &cfg).unwrap(),
            velocity_outlier_mask(&moved, &cfg).unwrap()
        );
    }

    #[test]
    fn partition_examples() {
        let cfg = CleanConfig::default();
        let t = line(100, Vector3::x(), 25.0);
        let none = vec![false; 100];
        let parts = partition_subtrajectories(&t, &none, &cfg).unwrap();
        assert_eq!(parts, vec![t.clone()]);

        let mut one = vec![false; 100];
        one[50] = true;
        let parts = partition_subtrajectories(&t, &one, &cfg).unwrap();
        assert_eq!(parts.iter().map(|p| p.len()).collect::<Vec<_>>(), vec![50, 49]);
        assert_eq!(parts[1].poses[0], t.poses[51]);

        let every10: Vec<bool> = (0..100).map(|i| i % 10 == 0).collect();
        assert!(partition_subtrajectories(&t, &every10, &cfg).unwrap().is_empty());
        assert!(partition_subtrajectories(&t, &every10[..10], &cfg).is_err());
    }

    #[test]
    fn partitions_are_disjoint_and_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mask: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.03)).collect();
            let ranges = partition_ranges(&mask, 10);
            for w in ranges.windows(2) {
                assert!(w[0].end < w[1].start);
            }
            for r in &ranges {
                assert!(r.len() >= 10);
                assert!(mask[r.clone()].iter().all(|b| !b));
            }
        }
    }

    #[test]
    fn kalman_is_exact_on_lines() {
        let t = line(120, Vector3::new(1.3, -0.4, 2.0), 25.0);
        let s = kalman_smooth(&t, &CleanConfig::default()).unwrap();
        assert_eq!(s.len(), t.len());
        assert_eq!(s.fps, t.fps);
        for (a, b) in s.poses.iter().zip(&t.poses) {
            assert!((a.translation - b.translation).amax() < 1e-6);
            assert!((a.rotation - b.rotation).amax() < 1e-9);
        }
        let st = CameraTrajectory::new(25.0, vec![Se3Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)); 30]).unwrap();
        let s = kalman_smooth(&st, &CleanConfig::default()).unwrap();
        for (a, b) in s.poses.iter().zip(&st.poses) {
            assert!((a.translation - b.translation).amax() < 1e-9);
            assert!((a.rotation - b.rotation).amax() < 1e-9);
        }
    }

    #[test]
    fn kalman_reduces_noise() {
        let cfg = CleanConfig::default();
        let noise = Normal::new(0.0, 0.05).unwrap();
        let clean = line(100, Vector3::new(1.0, 0.2, -0.5), 25.0);
        let mut ratios = Vec::new();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut noisy = clean.clone();
            for p in noisy.poses.iter_mut() {
                p.translation += Vector3::from_fn(|_, _| noise.sample(&mut rng));
            }
            let s = kalman_smooth(&noisy, &cfg).unwrap();
            let mse = |t: &CameraTrajectory| -> f64 {
                t.poses
                    .iter()
                    .zip(&clean.poses)
                    .map(|(a, b)| (a.translation - b.translation).norm_squared())
                    .sum::<f64>()
                    / t.len() as f64
            };
            ratios.push(mse(&s) / mse(&noisy));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean <= 0.5, "mean MSE ratio {mean}");
    }

    #[test]
    fn kalman_rejects_bad_config() {
        let t = line(10, Vector3::x(), 25.0);
        let cfg = CleanConfig {
            kalman_obs_var: 0.0,
            ..Default::default()
        };
        assert!(matches!(kalman_smooth(&t, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn crop_examples() {
        let poses = vec![Se3Pose::identity(); 450];
        let t = CameraTrajectory::new(25.0, poses).unwrap();
        assert_eq!(crop(&t, 300).len(), 300);
        let t300 = t.slice(0, 300).unwrap();
        assert_eq!(crop(&t300, 300), t300);
        let t100 = t.slice(0, 100).unwrap();
        assert_eq!(crop(&t100, 300), t100);
    }

    #[test]
    fn clean_is_idempotent_on_clean_lines() {
        let cfg = CleanConfig::default();
        let t = line(150, Vector3::new(0.8, 0.0, -1.2), 25.0);
        let once = clean_shot(&t, None, &cfg).unwrap();
        assert_eq!(once.len(), 1);
        let twice = clean_shot(&once[0].0, None, &cfg).unwrap();
        assert_eq!(twice.len(), 1);
        for (a, b) in once[0].0.poses.iter().zip(&twice[0].0.poses) {
            assert!((a.translation - b.translation).amax() < 1e-6);
        }
    }
}
