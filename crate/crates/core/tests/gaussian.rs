use lhm::autodiff::{grad_check, NdArray, Tape};
use lhm::gaussian::{
    activate, activate_raw, avatar_from_bytes, avatar_to_bytes, eval_sh, read_avatar, write_avatar, Activation,
    AvatarSkinning, GaussianSet, RawGaussianParams, RawVars, SH_C0,
};
use lhm::math::{normalize_quat, quat_to_mat};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw(n: usize, seed: u64, spread: f64) -> RawGaussianParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arr = |cols: usize| {
        NdArray::new(vec![n, cols], (0..n * cols).map(|_| rng.gen_range(-spread..spread)).collect()).unwrap()
    };
    RawGaussianParams { offsets: arr(3), rotations: arr(4), scales: arr(3), opacities: arr(1), sh: arr(12) }
}

fn random_set(n: usize, seed: u64) -> GaussianSet {
    let anchors: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.01, 1.0, -0.5]).collect();
    activate_raw(&raw(n, seed, 3.0), &anchors, &Activation::default()).unwrap().rounded_to_f32()
}

#[test]
fn zero_offsets_keep_anchors() {
    let mut r = raw(5, 1, 1.0);
    r.offsets = NdArray::zeros(&[5, 3]);
    let anchors: Vec<[f64; 3]> = (0..5).map(|i| [0.1 * i as f64, -0.3, 2.5]).collect();
    let g = activate_raw(&r, &anchors, &Activation::default()).unwrap();
    assert_eq!(g.positions, anchors);
}

#[test]
fn zero_quaternion_becomes_identity() {
    let mut r = raw(3, 2, 1.0);
    r.rotations.data_mut()[4..8].copy_from_slice(&[0.0; 4]);
    let g = activate_raw(&r, &[[0.0; 3]; 3], &Activation::default()).unwrap();
    assert_eq!(g.rotations[1], [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn zero_opacity_logit_is_half() {
    let mut r = raw(2, 3, 1.0);
    r.opacities = NdArray::zeros(&[2, 1]);
    let g = activate_raw(&r, &[[0.0; 3]; 2], &Activation::default()).unwrap();
    assert_eq!(g.opacities, vec![0.5, 0.5]);
}

#[test]
fn covariance_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = GaussianSet::empty(0);
    let q = normalize_quat(&[rng.gen(), rng.gen(), rng.gen(), rng.gen()]).0;
    g.positions = vec![[0.0; 3]; 2];
    g.rotations = vec![q, [1.0, 0.0, 0.0, 0.0]];
    g.scales = vec![[1.0; 3], [2.0, 1.0, 1.0]];
    g.opacities = vec![0.5; 2];
    g.sh = vec![0.0; 6];
    assert!((g.covariance_of(0) - Matrix3::identity()).abs().max() < 1e-12);
    assert_eq!(g.covariance_of(1), Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
}

#[test]
fn covariance_eigenvalues_are_squared_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let q = normalize_quat(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).0;
        let s = [rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)];
        let cov = lhm::math::covariance(&q, &s);
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        let mut expect: Vec<f64> = s.iter().map(|x| x * x).collect();
        eig.sort_by(f64::total_cmp);
        expect.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
        let neg = [-q[0], -q[1], -q[2], -q[3]];
        assert_eq!(lhm::math::covariance(&neg, &s), cov);
        assert!((quat_to_mat(&q).determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sh_examples() {
    assert_eq!(eval_sh(&[0.0; 12], &[0.0, 0.0, 1.0]).unwrap(), [0.5; 3]);
    let f0 = 0.5 / SH_C0;
    let white = eval_sh(&[f0, f0, f0], &[0.3, -0.2, 0.9]).unwrap();
    assert!(white.iter().all(|&c| (c - 1.0).abs() < 1e-15));
    let f: Vec<f64> = vec![0.0, 0.0, 0.0, 0.1, -0.2, 0.05, 0.15, 0.1, -0.1, -0.05, 0.2, 0.1];
    let d = [0.6, 0.0, 0.8];
    let a = eval_sh(&f, &d).unwrap();
    let b = eval_sh(&f, &[-0.6, -0.0, -0.8]).unwrap();
    for c in 0..3 {
        assert!(((a[c] - 0.5) + (b[c] - 0.5)).abs() < 1e-15);
    }
    assert!(eval_sh(&f, &[0.0; 3]).is_err());
}

#[test]
fn sh_is_linear_before_clamping() {
    let f: Vec<f64> = (0..12).map(|k| 0.01 * k as f64 - 0.05).collect();
    let f2: Vec<f64> = f.iter().map(|x| 2.0 * x).collect();
    let d = [0.0, 0.6, 0.8];
    let (a, b) = (eval_sh(&f, &d).unwrap(), eval_sh(&f2, &d).unwrap());
    for c in 0..3 {
        assert!(((b[c] - 0.5) - 2.0 * (a[c] - 0.5)).abs() < 1e-15);
    }
}

#[test]
fn avatar_roundtrip_is_bitwise() {
    let g = random_set(1000, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut w: Vec<f64> = (0..1000 * 16).map(|_| rng.gen::<f32>() as f64).collect();
    for row in w.chunks_mut(16) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x = (*x / s) as f32 as f64);
    }
    let skin = AvatarSkinning { weights: Some((NdArray::new(vec![1000, 16], w).unwrap(), (0..16).collect())), field: None };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.lha");
    write_avatar(&path, &g, &skin).unwrap();
    let (g2, skin2) = read_avatar(&path).unwrap();
    assert_eq!(g2, g);
    assert_eq!(skin2, skin);
    let plain = avatar_to_bytes(&g, &AvatarSkinning::default()).unwrap();
    assert_eq!(avatar_from_bytes(&plain).unwrap(), (g, AvatarSkinning::default()));
}

#[test]
fn invalid_avatar_files_are_rejected() {
    let g = random_set(4, 13);
    let mut bytes = avatar_to_bytes(&g, &AvatarSkinning::default()).unwrap();
    // opacity of gaussian 0 lives after the header (16 bytes) and p, r, σ (4·(3+4+3) f32)
    let at = 16 + 4 * 4 * 10;
    bytes[at..at + 4].copy_from_slice(&1.5f32.to_le_bytes());
    let err = avatar_from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("opacity 0"), "{err}");
    let mut wrong = avatar_to_bytes(&g, &AvatarSkinning::default()).unwrap();
    wrong[..4].copy_from_slice(b"LHA9");
    assert!(matches!(avatar_from_bytes(&wrong), Err(lhm::gaussian::AvatarError::Version(_))));
    let mut version = avatar_to_bytes(&g, &AvatarSkinning::default()).unwrap();
    version[4] = 7;
    assert!(matches!(avatar_from_bytes(&version), Err(lhm::gaussian::AvatarError::Version(_))));
}

#[test]
fn activation_gradients() {
    let r = raw(4, 21, 1.5);
    let anchors = NdArray::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
    let weights: Vec<NdArray> = [3, 4, 3, 1, 12]
        .iter()
        .enumerate()
        .map(|(k, &c)| NdArray::new(vec![4, c], (0..4 * c).map(|i| ((i + k) as f64 * 0.7).sin()).collect()).unwrap())
        .collect();
    for which in 0..4 {
        let start = [&r.offsets, &r.rotations, &r.scales, &r.opacities][which].clone();
        let f = |tape: &mut Tape, x| {
            let mut leaf = |a: &NdArray| tape.constant(a.clone());
            let mut rv = RawVars {
                offsets: leaf(&r.offsets)?,
                rotations: leaf(&r.rotations)?,
                scales: leaf(&r.scales)?,
                opacities: leaf(&r.opacities)?,
                sh: leaf(&r.sh)?,
            };
            match which {
                0 => rv.offsets = x,
                1 => rv.rotations = x,
                2 => rv.scales = x,
                _ => rv.opacities = x,
            }
            let a = tape.constant(anchors.clone())?;
            let (g, _) = activate(tape, &rv, a, &Activation::default())?;
            let mut total = None;
            for (v, w) in [g.positions, g.rotations, g.scales, g.opacities, g.sh].into_iter().zip(&weights) {
                let wv = tape.constant(w.clone())?;
                let m = tape.mul(v, wv)?;
                let s = tape.sum_all(m)?;
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        };
        let rep = grad_check(f, &start, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-6, "attribute {which}: {rep:?}");
    }
}

proptest! {
    #[test]
    fn activation_always_valid(
        vals in proptest::collection::vec(-1e3f64..1e3, 23 * 6),
        zero_row in 0usize..6,
    ) {
        let n = 6;
        let take = |off: usize, cols: usize| NdArray::new(vec![n, cols], vals[off * n..(off + cols) * n].to_vec()).unwrap();
        let mut r = RawGaussianParams { offsets: take(0, 3), rotations: take(3, 4), scales: take(7, 3), opacities: take(10, 1), sh: take(11, 12) };
        r.rotations.data_mut()[zero_row * 4..zero_row * 4 + 4].copy_from_slice(&[0.0; 4]);
        let anchors: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, -2.0 * i as f64, 0.5]).collect();
        let act = Activation::default();
        let g = activate_raw(&r, &anchors, &act).unwrap();
        prop_assert!(g.validate().is_ok());
        for i in 0..n {
            for c in 0..3 {
                prop_assert!((g.positions[i][c] - anchors[i][c]).abs() <= act.offset_cap + 1e-12);
                prop_assert!(g.scales[i][c] >= act.min_scale);
            }
            prop_assert!((0.0..=1.0).contains(&g.opacities[i]));
        }
    }
}
