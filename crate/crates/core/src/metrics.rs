//! Generation-quality and text-coherence metrics in embedding space.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::clatr::cosine;
use crate::error::{Error, Result};
use crate::geom::CameraTrajectory;
use crate::par;
use crate::tagging::{segments_to_states, tag_camera, TagConfig, TagSegment, Vocab};

/// Ridge added to covariances estimated from fewer samples than dimensions.
pub const COV_RIDGE: f64 = 1e-6;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fd: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub clatr_score: f64,
    pub c_p: f64,
    pub c_r: f64,
    pub c_f1: f64,
    pub k: usize,
}

fn to_matrix(set: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = set.first().map(|v| v.len()).unwrap_or(0);
    if set.is_empty() || d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::Input("feature sets must be nonempty with equal dimensions".into()));
    }
    Ok(DMatrix::from_fn(set.len(), d, |i, j| set[i][j]))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    if n < x.ncols() + 1 {
        for k in 0..x.ncols() {
            cov[(k, k)] += COV_RIDGE;
        }
    }
    (mean, cov)
}

/// Square root of a symmetric PSD matrix; negative eigenvalues clip to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (xa, xb) = (to_matrix(a)?, to_matrix(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::Input("feature sets differ in dimension".into()));
    }
    let (ma, ca) = mean_cov(&xa);
    let (mb, cb) = mean_cov(&xb);
    if !ca.iter().chain(cb.iter()).all(|v| v.is_finite()) {
        return Err(Error::Input("non-finite covariance".into()));
    }
    // tr((Ca Cb)^1/2) = tr((Ca^1/2 Cb Ca^1/2)^1/2), a symmetric PSD product
    let sa = psd_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fd = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from each point to its k-th nearest neighbour in the same set.
fn knn_radii(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    par::map_range(set.len(), |i| {
        let mut d: Vec<f64> = set.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| dist(&set[i], p)).collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

/// Manifold precision, recall, density and coverage with k-NN balls.
pub fn prdc(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> Result<Prdc> {
    if k == 0 || real.len() <= k || gen.len() <= k {
        return Err(Error::Config(format!(
            "prdc needs more than k = {k} points per set, got {} real and {} generated",
            real.len(),
            gen.len()
        )));
    }
    let r_real = knn_radii(real, k);
    let r_gen = knn_radii(gen, k);
    // cross[j][i] = distance from generated j to real i
    let cross: Vec<Vec<f64>> = par::map_range(gen.len(), |j| real.iter().map(|r| dist(&gen[j], r)).collect());

    let (m, n) = (gen.len() as f64, real.len() as f64);
    let precision = cross.iter().filter(|row| row.iter().zip(&r_real).any(|(d, r)| d <= r)).count() as f64 / m;
    let recall = (0..real.len())
        .filter(|&i| cross.iter().zip(&r_gen).any(|(row, r)| row[i] <= *r))
        .count() as f64
        / n;
    let density = cross
        .iter()
        .map(|row| row.iter().zip(&r_real).filter(|(d, r)| d <= r).count())
        .sum::<usize>() as f64
        / (k as f64 * m);
    let coverage = (0..real.len())
        .filter(|&i| cross.iter().map(|row| row[i]).fold(f64::INFINITY, f64::min) <= r_real[i])
        .count() as f64
        / n;
    Ok(Prdc {
        precision,
        recall,
        density,
        coverage,
    })
}

/// `100 * mean(max(0, cos))` over pairs; pairs with a zero vector are
/// excluded and counted.
pub fn clatr_score(text: &[Vec<f64>], traj: &[Vec<f64>]) -> Result<(f64, usize)> {
    if text.len() != traj.len() {
        return Err(Error::Input(format!("{} text and {} trajectory latents", text.len(), traj.len())));
    }
    let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
    let mut sum = 0.0;
    let mut used = 0;
    for (a, b) in text.iter().zip(traj) {
        if zero(a) || zero(b) {
            continue;
        }
        sum += cosine(a, b).max(0.0);
        used += 1;
    }
    let excluded = text.len() - used;
    Ok((if used == 0 { 0.0 } else { 100.0 * sum / used as f64 }, excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn scores(tp: usize, fp: usize, fn_: usize) -> ClassifierScores {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassifierScores { precision, recall, f1 }
}

/// Micro-averaged multi-label scores between label sets.
pub fn label_set_scores(prompt: &[BTreeSet<String>], got: &[BTreeSet<String>]) -> Result<ClassifierScores> {
    if prompt.len() != got.len() {
        return Err(Error::Input(format!("{} prompts and {} generations", prompt.len(), got.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in prompt.iter().zip(got) {
        tp += p.intersection(g).count();
        fp += g.difference(p).count();
        fn_ += p.difference(g).count();
    }
    Ok(scores(tp, fp, fn_))
}

pub fn label_set(segs: &[TagSegment]) -> BTreeSet<String> {
    segs.iter().map(|s| s.label.clone()).collect()
}

/// Tags every generated trajectory and scores its label set against the
/// prompt's.
pub fn classifier_metrics(
    prompt_tags: &[BTreeSet<String>],
    gen: &[CameraTrajectory],
    cfg: &TagConfig,
) -> Result<ClassifierScores> {
    if prompt_tags.len() != gen.len() {
        return Err(Error::Input(format!("{} prompts and {} generations", prompt_tags.len(), gen.len())));
    }
    let got = par::map_slice(gen, |g| tag_camera(g, cfg).map(|s| label_set(&s)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    label_set_scores(prompt_tags, &got)
}

/// Frame-level variant: each frame carries one label, so micro precision,
/// recall and F1 all equal frame accuracy.
pub fn classifier_metrics_frames(
    prompt_segments: &[Vec<TagSegment>],
    gen: &[CameraTrajectory],
    cfg: &TagConfig,
) -> Result<ClassifierScores> {
    if prompt_segments.len() != gen.len() {
        return Err(Error::Input(format!("{} prompts and {} generations", prompt_segments.len(), gen.len())));
    }
    let (mut hit, mut total) = (0, 0);
    for (p, g) in prompt_segments.iter().zip(gen) {
        let want = segments_to_states(p, Vocab::Camera)?;
        let got = segments_to_states(&tag_camera(g, cfg)?, Vocab::Camera)?;
        if want.len() != got.len() {
            return Err(Error::Shape(format!("prompt covers {} frames, generation has {}", want.len(), got.len())));
        }
        hit += want.iter().zip(&got).filter(|(a, b)| a == b).count();
        total += want.len();
    }
    Ok(scores(hit, total - hit, total - hit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::CaptionKind;
    use crate::synth::{gen_pure, SynthSpec};
    use crate::tagging::AxisState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_set(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).map(|x: f64| x + shift).collect())
            .collect()
    }

    #[test]
    fn fd_identical_sets_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian_set(200, 5, 0.0, &mut rng);
        let b = gaussian_set(150, 5, 0.3, &mut rng);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn fd_unit_shift_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian_set(100_000, 1, 0.0, &mut rng);
        let b = gaussian_set(100_000, 1, 1.0, &mut rng);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 1.0).abs() < 0.05, "{fd}");
    }

    #[test]
    fn fd_invariant_to_orthogonal_transform_and_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_set(60, 4, 0.0, &mut rng);
        let b = gaussian_set(60, 4, 0.5, &mut rng);
        let q = DMatrix::<f64>::from_fn(4, 4, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        let rot = |s: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            s.iter().map(|v| (&q * DVector::from_vec(v.clone())).iter().copied().collect::<Vec<f64>>()).collect()
        };
        let d1 = frechet_distance(&a, &b).unwrap();
        let d2 = frechet_distance(&rot(&a), &rot(&b)).unwrap();
        assert!((d1 - d2).abs() < 1e-6);
        // fewer samples than dimensions stays finite through the ridge
        let s = gaussian_set(3, 8, 0.0, &mut rng);
        assert!(frechet_distance(&s, &gaussian_set(3, 8, 0.0, &mut rng)).unwrap().is_finite());
        assert!(frechet_distance(&[vec![f64::NAN]], &[vec![1.0]]).is_err());
    }

    fn brute_density(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> f64 {
        let mut total = 0;
        for g in gen {
            for (i, r) in real.iter().enumerate() {
                let mut ds: Vec<f64> = real.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| dist(r, o)).collect();
                ds.sort_by(f64::total_cmp);
                if dist(g, r) <= ds[k - 1] {
                    total += 1;
                }
            }
        }
        total as f64 / (k * gen.len()) as f64
    }

    #[test]
    fn prdc_identical_and_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let real = gaussian_set(80, 3, 0.0, &mut rng);
        let p = prdc(&real, &real, 3).unwrap();
        assert_eq!((p.precision, p.recall, p.coverage), (1.0, 1.0, 1.0));
        assert!((p.density - brute_density(&real, &real, 3)).abs() < 1e-12);
        let far: Vec<Vec<f64>> = real.iter().map(|v| v.iter().map(|x| x + 100.0).collect()).collect();
        let p = prdc(&real, &far, 3).unwrap();
        assert_eq!((p.precision, p.coverage, p.density), (0.0, 0.0, 0.0));
        assert!(matches!(prdc(&real[..3], &real, 3), Err(Error::Config(_))));
    }

    #[test]
    fn prdc_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = gaussian_set(60, 2, 0.0, &mut rng);
        let gen = gaussian_set(60, 2, 0.7, &mut rng);
        let mut prev = (0.0, 0.0);
        for k in 1..10 {
            let p = prdc(&real, &gen, k).unwrap();
            assert!(p.recall >= prev.0 && p.coverage >= prev.1);
            assert!((0.0..=1.0).contains(&p.precision) && p.density >= 0.0);
            assert!((p.density - brute_density(&real, &gen, k)).abs() < 1e-12);
            prev = (p.recall, p.coverage);
        }
    }

    #[test]
    fn clatr_score_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = gaussian_set(30, 4, 0.0, &mut rng);
        assert!((clatr_score(&a, &a).unwrap().0 - 100.0).abs() < 1e-9);
        let scaled: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x * 3.5).collect()).collect();
        let b = gaussian_set(30, 4, 0.0, &mut rng);
        assert!((clatr_score(&a, &b).unwrap().0 - clatr_score(&scaled, &b).unwrap().0).abs() < 1e-9);
        let e = |k: usize| (0..4).map(|j| if j == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        assert_eq!(clatr_score(&[e(0), e(1)], &[e(2), e(3)]).unwrap(), (0.0, 0));
        assert_eq!(clatr_score(&[vec![0.0; 4], e(1)], &[e(0), e(1)]).unwrap(), (100.0, 1));
    }

    fn pure(tag: AxisState, seed: u64) -> crate::synth::SynthSample {
        let spec = SynthSpec {
            frames: 60,
            caption_kind: CaptionKind::Camera,
            ..Default::default()
        };
        gen_pure(tag, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn classifier_self_consistency() {
        let cfg = TagConfig::default();
        let samples: Vec<_> = AxisState::all().into_iter().map(|t| pure(t, 0)).collect();
        let prompts: Vec<_> = samples.iter().map(|s| label_set(&s.camera_tags)).collect();
        let trajs: Vec<_> = samples.iter().map(|s| s.camera.clone()).collect();
        let s = classifier_metrics(&prompts, &trajs, &cfg).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let segs: Vec<_> = samples.iter().map(|s| s.camera_tags.clone()).collect();
        let s = classifier_metrics_frames(&segs, &trajs, &cfg).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        let still = vec![pure(AxisState::STATIC, 0).camera; 6];
        let moving: Vec<_> = crate::synth::single_axis_motions().into_iter().map(|t| label_set(&pure(t, 0).camera_tags)).collect();
        let s = classifier_metrics(&moving, &still, &cfg).unwrap();
        assert_eq!(s.recall, 0.0);
    }

    #[test]
    fn classifier_random_generations_near_one_seventh() {
        let mut menu = vec![AxisState::STATIC];
        menu.extend(crate::synth::single_axis_motions());
        let clips: Vec<_> = menu.iter().map(|t| pure(*t, 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1000;
        let prompts: Vec<_> = (0..n).map(|i| label_set(&clips[i % 7].camera_tags)).collect();
        let gen: Vec<_> = (0..n).map(|_| clips[rng.gen_range(0..7)].camera.clone()).collect();
        let f1 = classifier_metrics(&prompts, &gen, &TagConfig::default()).unwrap().f1;
        assert!((f1 - 1.0 / 7.0).abs() <= 0.05, "{f1}");
    }
}
