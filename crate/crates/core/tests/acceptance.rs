//! One pass/fail line per acceptance criterion. The overfit fixture trains the default
//! network for 2,000 steps, so this file dominates the suite's runtime.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lhm::autodiff::{NdArray, Tape, Var};
use lhm::body::{BodyTemplate, Region};
use lhm::config::RunConfig;
use lhm::gaussian::{activate_raw, avatar_from_bytes, avatar_to_bytes, Activation, AvatarSkinning, GaussianSet, RawGaussianParams};
use lhm::losses::{acap_loss, asap_loss, total_loss_op, LossReport, LossWeights};
use lhm::math::normalize_quat;
use lhm::network::{mbht_block, predict_gaussians, Mode, NetworkConfig, NetworkInput, NetworkWeights, Streams};
use lhm::render::{brute_force_render, render, Camera};
use lhm::skinning::{build_skin_field, pose_set, SkinFieldConfig};
use lhm::train::{
    evaluate, fit, make_synthetic_scene, AdamState, Checkpoint, SceneConfig, SyntheticScene, TrainConfig, TrainContext,
};
use lhm::verify::run_suite;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scale_statement() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = fs::read_to_string(&readme).unwrap_or_default().to_lowercase();
    let stated = text.contains("not reproducible at desk scale") && text.contains("property");
    outcome(stated, "README states the scale limitation and the property-suite substitute")
}

fn worst_of(suites: &[&str]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in suites {
        let rows = run_suite(s).expect("known suite");
        let worst = rows.iter().map(|r| r.worst).fold(0.0, f64::max);
        for r in &rows {
            if !r.passed() {
                ok = false;
                parts.push(format!("{s}/{} = {:.2e}", r.component, r.worst));
            }
        }
        parts.push(format!("{s} worst {worst:.2e} over {} rows", rows.len()));
    }
    (ok, parts.join(", "))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    // rows carry their own limits: 1e-6 for smooth primitives, 1e-4 end to end
    let (ok, detail) = worst_of(&["ops", "network", "losses", "end2end"]);
    let secs = start.elapsed().as_secs_f64();
    outcome(ok && secs < 300.0, format!("{detail}; {secs:.1}s"))
}

fn oracle_scene(seed: u64) -> (GaussianSet, Camera) {
    let mut rng = seeded(seed);
    let cam = Camera { fx: 64.0, fy: 64.0, cx: 32.0, cy: 32.0, world_to_cam: Matrix4::identity(), width: 64, height: 64, near: 0.01 };
    let mut g = GaussianSet::empty(1);
    for _ in 0..64 {
        let z = rng.gen_range(2.0..4.0);
        g.positions.push([rng.gen_range(-0.55..0.55) * z, rng.gen_range(-0.55..0.55) * z, z]);
        g.rotations.push(normalize_quat(&[0, 1, 2, 3].map(|_| rng.gen_range(-1.0..1.0))).0);
        g.scales.push([0, 1, 2].map(|_| rng.gen_range(0.02..0.12)));
        g.opacities.push(rng.gen_range(0.05..0.95));
        for _ in 0..12 {
            g.sh.push(rng.gen_range(-0.4..0.4));
        }
    }
    (g, cam)
}

fn renderer_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (g, cam) = oracle_scene(1000 + seed);
        let bg = [0.1, 0.2, 0.3];
        let (rgb, alpha) = render(&g, &cam, &bg).unwrap();
        let (orgb, oalpha) = brute_force_render(&g, &cam, &bg).unwrap();
        worst = worst.max(rgb.max_abs_diff(&orgb)).max(alpha.max_abs_diff(&oalpha));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 60.0, format!("max abs channel error {worst:.2e} over 10 scenes; {secs:.2}s"))
}

fn renderer_gradients() -> Outcome {
    let rows = run_suite("renderer").unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &rows {
        ok &= r.error.is_none() && r.worst < 1e-4;
        parts.push(format!("{} {:.2e}", r.component.trim_start_matches("render_gaussians "), r.worst));
    }
    outcome(ok, parts.join(", "))
}

fn scalar_loss(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.value(v).data()[0]
}

fn loss_arithmetic() -> Outcome {
    let asap = scalar_loss(|t| {
        let q = t.constant(NdArray::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let s = t.constant(NdArray::new(vec![1, 3], vec![2.0, 1.0, 1.0]).unwrap()).unwrap();
        asap_loss(t, q, s, 1.0).unwrap()
    });
    let acap = scalar_loss(|t| {
        let x = t.constant(NdArray::new(vec![2, 3], vec![0.10, 0.0, 0.0, 0.0, 0.02, 0.0]).unwrap()).unwrap();
        acap_loss(t, x, 0.0525).unwrap()
    });
    let w = LossWeights::default();
    let a = LossReport::assemble(0.1, 0.2, 0.05, 0.0, 0.0, &w).total;
    let b = LossReport::assemble(0.0, 0.0, 0.0, 0.02, 0.01, &w).total;
    let vals = [0.13, 0.41, 0.07, 0.0021, 0.0004];
    let taped = {
        let mut t = Tape::new();
        let v: Vec<Var> = vals.iter().map(|&x| t.constant(NdArray::scalar(x)).unwrap()).collect();
        total_loss_op(&mut t, v[0], v[1], v[2], v[3], v[4], &w).unwrap().report(&t)
    };
    let ok = asap == 9.0
        && (acap - 0.02375).abs() < 1e-15
        && (a - 0.25).abs() < 1e-16
        && (b - 1.1).abs() < 1e-15
        && taped == LossReport::assemble(vals[0], vals[1], vals[2], vals[3], vals[4], &w);
    outcome(ok, format!("asap {asap:?}, acap {acap:?}, assembly {a:?} and {b:?}, taped == plain"))
}

fn random_quats(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).flat_map(|_| normalize_quat(&[0, 1, 2, 3].map(|_| rng.gen_range(-1.0..1.0))).0).collect()
}

fn invariant_suites() -> Outcome {
    const SEEDS: u64 = 100;
    let mut failures = Vec::new();

    // LBS with identity transforms
    let mut lbs = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = seeded(seed);
        let (n, j) = (16, 5);
        let mut g = GaussianSet::empty(0);
        for _ in 0..n {
            g.positions.push([0, 1, 2].map(|_| rng.gen_range(-3.0..3.0)));
            g.scales.push([0.05; 3]);
            g.opacities.push(0.5);
            g.sh.extend([0.0; 3]);
        }
        let q = random_quats(&mut rng, n);
        g.rotations = q.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let mut w: Vec<f64> = (0..n * j).map(|_| rng.gen_range(0.0..1.0)).collect();
        for row in w.chunks_mut(j) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let posed = pose_set(&g, &NdArray::new(vec![n, j], w).unwrap(), &vec![Matrix4::identity(); j]).unwrap();
        for i in 0..n {
            for c in 0..3 {
                lbs = lbs.max((posed.positions[i][c] - g.positions[i][c]).abs());
            }
            for c in 0..4 {
                lbs = lbs.max((posed.rotations[i][c] - g.rotations[i][c]).abs());
            }
        }
    }
    if !(lbs < 1e-12) {
        failures.push(format!("lbs identity {lbs:.2e}"));
    }

    // ASAP under arbitrary rotations
    let mut asap = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = seeded(seed + 10_000);
        let n = 8;
        let s: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.005..0.1)).collect();
        let t = rng.gen_range(0.01..0.05);
        let (q1, q2) = (random_quats(&mut rng, n), random_quats(&mut rng, n));
        let value = |q: &[f64]| {
            scalar_loss(|tp| {
                let qv = tp.constant(NdArray::new(vec![n, 4], q.to_vec()).unwrap()).unwrap();
                let sv = tp.constant(NdArray::new(vec![n, 3], s.clone()).unwrap()).unwrap();
                asap_loss(tp, qv, sv, t).unwrap()
            })
        };
        asap = asap.max((value(&q1) - value(&q2)).abs());
    }
    if !(asap < 1e-10) {
        failures.push(format!("asap rotation {asap:.2e}"));
    }

    // skin-field rows at random query points
    let body = BodyTemplate::bundled();
    let field = build_skin_field(&body, &body.vertices, &SkinFieldConfig { resolution: 24, diffusion_steps: 20, margin: 0.1 }).unwrap();
    let mut rows = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = seeded(seed + 20_000);
        let pts: Vec<[f64; 3]> =
            (0..50).map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..2.5), rng.gen_range(-1.0..1.0)]).collect();
        for row in field.query(&pts).chunks(field.joints) {
            rows = rows.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&w| w < 0.0) {
                rows = f64::INFINITY;
            }
        }
    }
    if !(rows < 1e-5) {
        failures.push(format!("skin rows {rows:.2e}"));
    }

    // activation ranges for arbitrary finite raw outputs
    let act = Activation::default();
    let mut act_ok = true;
    for seed in 0..SEEDS {
        let mut rng = seeded(seed + 30_000);
        let n = 6;
        let mut arr = |c: usize| NdArray::new(vec![n, c], (0..n * c).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap();
        let raw = RawGaussianParams { offsets: arr(3), rotations: arr(4), scales: arr(3), opacities: arr(1), sh: arr(12) };
        let anchors: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.5, -0.2 * i as f64]).collect();
        let g = activate_raw(&raw, &anchors, &act).unwrap();
        act_ok &= g.validate().is_ok();
        for i in 0..n {
            for c in 0..3 {
                act_ok &= (g.positions[i][c] - anchors[i][c]).abs() <= act.offset_cap + 1e-12;
                act_ok &= g.scales[i][c] >= act.min_scale;
            }
            act_ok &= (0.0..=1.0).contains(&g.opacities[i]);
        }
    }
    if !act_ok {
        failures.push("activation range".into());
    }

    // token counts through an MBHT block
    let cfg = NetworkConfig::micro();
    let w = NetworkWeights::init(&cfg, 3).unwrap();
    let mut counts_ok = true;
    for seed in 0..SEEDS {
        let mut rng = seeded(seed + 40_000);
        let counts = [0; 4].map(|_| rng.gen_range(1..12usize));
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false).unwrap();
        let mut make = |n: usize| {
            let data = (0..n * cfg.c_tok).map(|_| rng.gen_range(-1.0..1.0)).collect();
            tape.constant(NdArray::new(vec![n, cfg.c_tok], data).unwrap()).unwrap()
        };
        let s = Streams { geo_head: make(counts[0]), geo_body: make(counts[1]), img_head: make(counts[2]), img_body: make(counts[3]) };
        let f = make(1);
        let (out, _) = mbht_block(&mut tape, &cfg, &p, 0, s, f).unwrap();
        for (a, b) in [(s.geo_head, out.geo_head), (s.geo_body, out.geo_body), (s.img_head, out.img_head), (s.img_body, out.img_body)] {
            counts_ok &= tape.shape(a) == tape.shape(b);
        }
    }
    if !counts_ok {
        failures.push("mbht token counts".into());
    }

    // head mask at ratio 0
    let mut mask_ok = true;
    for seed in 0..SEEDS {
        let mut rng = seeded(seed + 50_000);
        let n = 9;
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(0.0..1.7), rng.gen_range(-0.1..0.1)]).collect();
        let regions: Vec<Region> = (0..n).map(|i| if i % 3 == 0 { Region::Head } else { Region::Body }).collect();
        let body_img: Vec<f64> = (0..cfg.body_res * cfg.body_res * 3).map(|_| rng.gen()).collect();
        let crop: Vec<f64> = (0..cfg.head_res * cfg.head_res * 3).map(|_| rng.gen()).collect();
        let run = |mode: Mode| {
            let mut tape = Tape::new();
            let p = w.bind(&mut tape, false).unwrap();
            let body_image = tape.constant(NdArray::new(vec![cfg.body_res, cfg.body_res, 3], body_img.clone()).unwrap()).unwrap();
            let head_crop = tape.constant(NdArray::new(vec![cfg.head_res, cfg.head_res, 3], crop.clone()).unwrap()).unwrap();
            let input = NetworkInput { body_image, head_crop, anchors: &pts, regions: &regions };
            let pr = predict_gaussians(&mut tape, &cfg, &p, &input, mode).unwrap();
            let r = pr.raw;
            [r.offsets, r.rotations, r.scales, r.opacities, r.sh].map(|v| tape.value(v).clone())
        };
        mask_ok &= run(Mode::Train { ratio: 0.0, seed: rng.gen() }) == run(Mode::Infer);
    }
    if !mask_ok {
        failures.push("ratio-0 head mask".into());
    }

    let detail = if failures.is_empty() {
        format!("{SEEDS} seeds each: lbs {lbs:.1e}, asap {asap:.1e}, skin rows {rows:.1e}, activation, mbht counts, ratio-0 mask")
    } else {
        failures.join(", ")
    };
    outcome(failures.is_empty(), detail)
}

fn overfit_fixture() -> Outcome {
    let start = Instant::now();
    let scene = make_synthetic_scene(&BodyTemplate::bundled(), &SceneConfig::default()).unwrap();
    let net = NetworkConfig::default();
    let cfg = TrainConfig::default();
    let ctx = TrainContext::new(&scene, &net, &cfg).unwrap();
    let mut w = NetworkWeights::init(&net, cfg.init_seed).unwrap();
    let mut state = AdamState::new(&w.tensors);
    fit(&ctx, &mut w, &mut state, cfg.iterations, |_, _, _, _| Ok(())).unwrap();
    let train: Vec<usize> = scene.train_views().collect();
    let hold: Vec<usize> = scene.holdout_views().collect();
    let tr = evaluate(&ctx, &w, &train).unwrap().mean_psnr();
    let ho = evaluate(&ctx, &w, &hold).unwrap().mean_psnr();
    let mins = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        tr >= 30.0 && ho >= 24.0 && mins <= 60.0,
        format!("{} steps: train {tr:.2} dB, holdout {ho:.2} dB, {mins:.1} min on {} thread(s)", cfg.iterations, rayon::current_num_threads()),
    )
}

const SMALL: &str = "[scene]\ngaussians = 60\ntrain_views = 3\nholdout_views = 2\nresolution = 32\nfocal = 45.0\n\
skin_resolution = 16\nskin_steps = 10\n[network]\nc_tok = 16\nlayers = 1\nheads = 2\nbody_res = 32\nbody_patch = 16\n\
body_depth = 1\nhead_res = 16\nhead_patch = 8\nhead_depth = 4\ntaps = 1 2 3 4\n[train]\ntargets = 2\niterations = 6\n";

fn determinism() -> Outcome {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let lhm = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_lhm")).arg("--config").arg(&cfg).args(args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let scene = dir.join("scene");
    lhm(&["make-data", "--out", scene.to_str().unwrap()]);
    let train = |name: &str, extra: &[&str]| {
        let ck = dir.join(name);
        let mut args = vec!["train", "--scene", scene.to_str().unwrap(), "--out-checkpoint", ck.to_str().unwrap()];
        args.extend_from_slice(extra);
        lhm(&args);
        (fs::read(&ck).unwrap(), fs::read_to_string(ck.with_extension("log")).unwrap_or_default())
    };
    let (ck_a, log_a) = train("a.lhc", &[]);
    let (ck_b, log_b) = train("b.lhc", &[]);
    let half = dir.join("half.lhc");
    train("half.lhc", &["--iterations", "3"]);
    let log = dir.join("resumed.log");
    fs::copy(half.with_extension("log"), &log).unwrap();
    let (ck_c, _) = train("c.lhc", &["--resume", half.to_str().unwrap(), "--log", log.to_str().unwrap()]);
    let log_c = fs::read_to_string(&log).unwrap();
    let ok = log_a == log_b && ck_a == ck_b && log_a.lines().count() == 6 && log_c == log_a && ck_c == ck_a;
    outcome(ok, "two train runs: identical logs and checkpoints; 3+3 resumed run equals the unbroken 6-step run")
}

fn format_roundtrips() -> Outcome {
    let mut parts = Vec::new();
    let body = BodyTemplate::bundled();
    let lbm = body.to_bytes();
    let lbm_ok = BodyTemplate::from_bytes(&lbm).map(|b| b.to_bytes() == lbm && b == body).unwrap_or(false);
    parts.push(format!("lbm {lbm_ok}"));

    let cfg = SceneConfig {
        gaussians: 80,
        train_views: 2,
        holdout_views: 1,
        resolution: 32,
        focal: 45.0,
        skin: SkinFieldConfig { resolution: 16, diffusion_steps: 10, margin: 0.1 },
        ..Default::default()
    };
    let scene = make_synthetic_scene(&body, &cfg).unwrap();
    let field = scene.skin_field().unwrap();
    let skin = AvatarSkinning { weights: Some((scene.gt_weights.clone(), (0..body.num_joints() as u32).collect())), field: Some(field) };
    let lha = avatar_to_bytes(&scene.gt, &skin).unwrap();
    let lha_ok = avatar_from_bytes(&lha)
        .map(|(g, s)| g == scene.gt && s == skin && avatar_to_bytes(&g, &s).unwrap() == lha)
        .unwrap_or(false);
    parts.push(format!("lha {lha_ok}"));

    let net = NetworkConfig::micro();
    let w = NetworkWeights::init(&net, 4).unwrap();
    let mut state = AdamState::new(&w.tensors);
    state.step = 9;
    let mut rng = seeded(4);
    for m in state.m.values_mut().chain(state.v.values_mut()) {
        m.data_mut().iter_mut().for_each(|x| *x = rng.gen());
    }
    let ck = Checkpoint { config: RunConfig::default().to_text(), weights: w, state };
    let bytes = ck.to_bytes();
    let ck_ok = Checkpoint::from_bytes(&bytes).map(|c| c == ck && c.to_bytes() == bytes).unwrap_or(false);
    parts.push(format!("checkpoint {ck_ok}"));

    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    scene.save(&a).unwrap();
    let back = SyntheticScene::load(&a).unwrap();
    back.save(&b).unwrap();
    let same_files = ["scene.txt", "anchors.txt", "gt.lha", "body.lbm"]
        .iter()
        .map(|f| f.to_string())
        .chain((0..3).flat_map(|v| {
            ["camera.txt", "pose.txt", "head.txt", "rgb.raw", "mask.raw", "rgb.png", "mask.png"].map(|f| format!("view_{v:03}/{f}"))
        }))
        .all(|f| fs::read(a.join(&f)).ok() == fs::read(b.join(&f)).ok());
    let scene_ok = back == scene && same_files;
    parts.push(format!("scene dir {scene_ok}"));
    outcome(lbm_ok && lha_ok && ck_ok && scene_ok, parts.join(", "))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scale limitation documented", scale_statement),
        ("gradient correctness", gradient_correctness),
        ("renderer oracle equivalence", renderer_oracle),
        ("renderer gradients", renderer_gradients),
        ("exact loss arithmetic", loss_arithmetic),
        ("invariant suites", invariant_suites),
        ("overfit fixture", overfit_fixture),
        ("determinism", determinism),
        ("format roundtrips", format_roundtrips),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
