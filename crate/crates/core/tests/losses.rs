use lhm::autodiff::{grad_check, NdArray, Tape, Var};
use lhm::gaussian::{activate, Activation, RawVars};
use lhm::losses::{
    acap_loss, asap_loss, color_loss, mask_loss, perceptual_loss, psnr, ssim, total_loss_op, FeatureNet, LossReport,
    LossWeights, DEFAULT_PERCEPTUAL_SEED, PSNR_CAP,
};
use lhm::math::normalize_quat;
use lhm::render::{render_op, Camera, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval<F: FnOnce(&mut Tape, Var, Var) -> Result<Var, lhm::autodiff::AdError>>(a: &NdArray, b: &NdArray, f: F) -> f64 {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let out = f(&mut tape, x, y).unwrap();
    tape.value(out).item()
}

fn filled(shape: &[usize], v: f64) -> NdArray {
    NdArray::new(shape.to_vec(), vec![v; shape.iter().product()]).unwrap()
}

fn random_image(seed: u64, h: usize, w: usize) -> NdArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NdArray::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn asap_value(q: &[f64], s: &[f64], t: f64) -> f64 {
    let n = q.len() / 4;
    eval(&NdArray::new(vec![n, 4], q.to_vec()).unwrap(), &NdArray::new(vec![n, 3], s.to_vec()).unwrap(), |tp, a, b| {
        asap_loss(tp, a, b, t)
    })
}

fn acap_value(offsets: &[f64], d: f64) -> f64 {
    let x = NdArray::new(vec![offsets.len() / 3, 3], offsets.to_vec()).unwrap();
    eval(&x, &x, |tp, a, _| acap_loss(tp, a, d))
}

#[test]
fn color_loss_examples() {
    let a = random_image(1, 4, 4);
    assert_eq!(eval(&a, &a, color_loss), 0.0);
    assert_eq!(eval(&filled(&[4, 4, 3], 0.0), &filled(&[4, 4, 3], 1.0), color_loss), 1.0);
    let mut half = filled(&[4, 4, 3], 0.2);
    half.data_mut()[..24].iter_mut().for_each(|v| *v = 0.7);
    assert!((eval(&half, &filled(&[4, 4, 3], 0.2), color_loss) - 0.25).abs() < 1e-15);
    let mut tape = Tape::new();
    let x = tape.constant(filled(&[4, 4, 3], 0.0)).unwrap();
    let y = tape.constant(filled(&[4, 5, 3], 0.0)).unwrap();
    assert!(color_loss(&mut tape, x, y).is_err());
}

#[test]
fn mask_loss_examples() {
    let m = NdArray::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let inv = NdArray::new(vec![2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(eval(&m, &m, mask_loss), 0.0);
    assert_eq!(eval(&m, &inv, mask_loss), 1.0);
    assert_eq!(eval(&filled(&[2, 2, 1], 0.5), &m, mask_loss), 0.5);
}

#[test]
fn perceptual_examples() {
    let net = FeatureNet::new(DEFAULT_PERCEPTUAL_SEED);
    let a = random_image(2, 32, 32);
    let mut b = a.clone();
    for y in 8..24 {
        for x in 8..24 {
            for c in 0..3 {
                let v = &mut b.data_mut()[(y * 32 + x) * 3 + c];
                *v = 1.0 - *v;
            }
        }
    }
    assert_eq!(eval(&a, &a, |t, x, y| perceptual_loss(t, &net, x, y)), 0.0);
    let ab = eval(&a, &b, |t, x, y| perceptual_loss(t, &net, x, y));
    let ba = eval(&b, &a, |t, x, y| perceptual_loss(t, &net, x, y));
    assert_eq!(ab.to_bits(), ba.to_bits());
    assert!(ab > 0.0);
    assert_eq!(FeatureNet::new(DEFAULT_PERCEPTUAL_SEED), net);
}

#[test]
fn perceptual_gradient_matches_finite_differences() {
    let net = FeatureNet::new(DEFAULT_PERCEPTUAL_SEED);
    let a = random_image(3, 8, 8);
    let b = random_image(4, 8, 8);
    let rep = grad_check(
        |t: &mut Tape, x: Var| {
            let y = t.constant(b.clone())?;
            perceptual_loss(t, &net, x, y)
        },
        &a,
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn asap_examples() {
    let t = 0.03;
    let q = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(asap_value(&q, &[t, t, t], t), 0.0);
    assert_eq!(asap_value(&q, &[2.0 * t, t, t], t), 9.0);
    assert_eq!(asap_value(&q, &[2.0, 1.0, 1.0], 1.0), 9.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rand_q: Vec<f64> = (0..5).flat_map(|_| normalize_quat(&[rng.gen(), rng.gen(), rng.gen(), rng.gen()]).0).collect();
    assert!(asap_value(&rand_q, &[t; 15], t).abs() < 1e-12);
}

#[test]
fn acap_examples() {
    let d = 0.0525;
    assert_eq!(acap_value(&[0.01, 0.02, -0.03, 0.0, 0.0, 0.05], d), 0.0);
    let v = acap_value(&[0.10, 0.0, 0.0, 0.0, 0.02, 0.0], d);
    assert!((v - 0.02375).abs() < 1e-15, "{v}");
    let bigger = acap_value(&[0.20, 0.0, 0.0, 0.0, 0.02, 0.0], d);
    assert!(bigger > v);
}

#[test]
fn acap_gradient_inside_and_outside() {
    let d = 0.0525;
    let x = NdArray::new(vec![2, 3], vec![0.01, -0.02, 0.015, 0.06, 0.05, -0.04]).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(x.clone()).unwrap();
    let l = acap_loss(&mut tape, v, d).unwrap();
    let g = tape.backward(l).unwrap();
    let g = g.get(v).unwrap().data().to_vec();
    assert_eq!(&g[..3], &[0.0; 3]);
    // outside: (1/N) times the unit direction
    let norm = (2.0f64 * g[3..].iter().map(|v| v * v).sum::<f64>()).sqrt() * 2.0f64.sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    let rep = grad_check(|t: &mut Tape, x: Var| acap_loss(t, x, d), &x, 1e-7).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn asap_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = NdArray::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let s = NdArray::new(vec![4, 3], (0..12).map(|_| rng.gen_range(0.01..0.08)).collect()).unwrap();
    let rep = grad_check(
        |t: &mut Tape, x: Var| {
            let qv = t.constant(q.clone())?;
            asap_loss(t, qv, x, 0.03)
        },
        &s,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    // the loss is rotation invariant, so its rotation gradient vanishes
    let mut tape = Tape::new();
    let qv = tape.param(q.clone()).unwrap();
    let sv = tape.constant(s.clone()).unwrap();
    let unit = lhm::gaussian::normalize_quat_rows(&mut tape, qv).unwrap();
    let l = asap_loss(&mut tape, unit, sv, 0.03).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(qv).unwrap().data().iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn assembly_examples() {
    let w = LossWeights::default();
    let r = LossReport::assemble(0.1, 0.2, 0.05, 0.0, 0.0, &w);
    assert!((r.total - 0.25).abs() < 1e-16);
    assert_eq!(r.total, 1.0 * 0.1 + 0.5 * 0.2 + 1.0 * 0.05);
    let r = LossReport::assemble(0.0, 0.0, 0.0, 0.02, 0.01, &w);
    assert!((r.total - 1.1).abs() < 1e-15);
    assert_eq!(LossReport::assemble(0.0, 0.0, 0.0, 0.0, 0.0, &w).total, 0.0);

    // the taped assembly agrees with the plain one bitwise
    let mut tape = Tape::new();
    let vals = [0.13, 0.41, 0.07, 0.0021, 0.0004];
    let vars: Vec<Var> = vals.iter().map(|&v| tape.constant(NdArray::scalar(v)).unwrap()).collect();
    let lv = total_loss_op(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], &w).unwrap();
    let rep = lv.report(&tape);
    assert_eq!(rep, LossReport::assemble(vals[0], vals[1], vals[2], vals[3], vals[4], &w));
    assert!(rep.log_line(3).starts_with("step=3 color=0.13 mask=0.41"));
}

#[test]
fn psnr_and_ssim_examples() {
    let a = Image { width: 16, height: 16, channels: 3, data: random_image(7, 16, 16).data().to_vec() };
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let mut b = Image::filled(16, 16, &[0.5; 3]);
    let c = Image::filled(16, 16, &[0.6; 3]);
    assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
    b.data.truncate(10);
    b.width = 2;
    b.height = 5;
    b.channels = 1;
    assert!(psnr(&b, &c).is_err());

    let mut neg = a.clone();
    neg.data.iter_mut().for_each(|v| *v = 1.0 - *v);
    assert!(ssim(&a, &neg).unwrap() < 0.0);
}

/// Four Gaussians rendered at 16×16, all five loss terms, weights from the defaults.
fn composite_loss(tape: &mut Tape, raw: [Var; 4], sh: Var, target: &NdArray, mask: &NdArray, net: &FeatureNet) -> Result<Var, lhm::autodiff::AdError> {
    let anchors = tape.constant(NdArray::new(vec![4, 3], vec![-0.1, -0.1, 2.0, 0.12, -0.05, 2.2, 0.0, 0.1, 1.9, -0.05, 0.08, 2.4]).unwrap())?;
    let rv = RawVars { offsets: raw[0], rotations: raw[1], scales: raw[2], opacities: raw[3], sh };
    let (g, offsets) = activate(tape, &rv, anchors, &Activation::default())?;
    let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], 20.0, 16, 16);
    let out = render_op(tape, &g, &cam, [0.0; 3])?;
    let rgb = tape.narrow(out, 2, 0, 3)?;
    let alpha = tape.narrow(out, 2, 3, 1)?;
    let tv = tape.constant(target.clone())?;
    let mv = tape.constant(mask.clone())?;
    let w = LossWeights { asap_scale: 0.04, ..Default::default() };
    let color = color_loss(tape, rgb, tv)?;
    let m = mask_loss(tape, alpha, mv)?;
    let per = perceptual_loss(tape, net, rgb, tv)?;
    let asap = asap_loss(tape, g.rotations, g.scales, w.asap_scale)?;
    let acap = acap_loss(tape, offsets, 0.02)?;
    Ok(total_loss_op(tape, color, m, per, asap, acap, &w)?.total)
}

#[test]
fn composite_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut arr = |c: usize, lo: f64, hi: f64| NdArray::new(vec![4, c], (0..4 * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap();
    let raw = [arr(3, -2.0, 2.0), arr(4, -1.0, 1.0), arr(3, -3.5, -2.9), arr(1, -1.0, 1.5)];
    let sh = arr(12, -0.5, 0.5);
    let target = random_image(9, 16, 16);
    let mask = NdArray::new(vec![16, 16, 1], (0..256).map(|i| ((i / 16 + i % 16) % 3 == 0) as u8 as f64).collect()).unwrap();
    let net = FeatureNet::new(DEFAULT_PERCEPTUAL_SEED);
    let mut worst: f64 = 0.0;
    for which in 0..5 {
        let start = if which == 4 { sh.clone() } else { raw[which].clone() };
        let rep = grad_check(
            |t: &mut Tape, x: Var| {
                let mut leaves = [0, 1, 2, 3].map(|k| t.constant(raw[k].clone()).unwrap());
                let mut s = t.constant(sh.clone())?;
                if which == 4 {
                    s = x;
                } else {
                    leaves[which] = x;
                }
                composite_loss(t, leaves, s, &target, &mask, &net)
            },
            &start,
            1e-4,
        )
        .unwrap();
        worst = worst.max(rep.max_rel_error);
        assert!(rep.max_rel_error < 1e-4, "input {which}: {rep:?}");
    }
    println!("composite worst relative error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn asap_is_rotation_and_sign_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let s: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.005..0.2)).collect();
        let q1: Vec<f64> = (0..n).flat_map(|_| normalize_quat(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).0).collect();
        let q2: Vec<f64> = (0..n).flat_map(|_| normalize_quat(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).0).collect();
        let neg: Vec<f64> = q1.iter().map(|v| -v).collect();
        let t = 0.05;
        let (a, b, c) = (asap_value(&q1, &s, t), asap_value(&q2, &s, t), asap_value(&neg, &s, t));
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        prop_assert_eq!(a, c);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn losses_are_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let s: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.005..0.2)).collect();
        let q: Vec<f64> = (0..n).flat_map(|_| normalize_quat(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).0).collect();
        let o: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let perm = [3, 0, 4, 1, 2];
        let pick = |v: &[f64], w: usize| perm.iter().flat_map(|&i| v[i * w..i * w + w].to_vec()).collect::<Vec<f64>>();
        let (a, b) = (asap_value(&q, &s, 0.05), asap_value(&pick(&q, 4), &pick(&s, 3), 0.05));
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        let (c, d) = (acap_value(&o, 0.0525), acap_value(&pick(&o, 3), 0.0525));
        prop_assert!((c - d).abs() <= 1e-15);
        prop_assert!(c >= 0.0);
    }
}
