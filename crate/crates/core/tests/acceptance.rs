//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use caatp::app::gradient_suite;
use caatp::attributes::levels;
use caatp::curves::{apply_curve, fuse};
use caatp::image::Image;
use caatp::metrics::{evaluate, mean_delta_e, psnr, ssim, EvalReport};
use caatp::model::{ModelConfig, RetouchModel};
use caatp::style::atp::{plus_one_rule, random_levels, Levels};
use caatp::style::{parse_text, render_bands, AtpModel, AtpTrainConfig};
use caatp::synth::{build_dataset, SynthConfig};
use caatp::training::{pools_from_dataset, train, TrainConfig, TrainOutputs};

const COLLAPSE_PAIRS: usize = 120;
const COLLAPSE_LIMIT: Duration = Duration::from_secs(10);
const WITNESS_LIMIT: Duration = Duration::from_secs(1);
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_LIMIT: Duration = Duration::from_secs(120);
const ABLATION_GAIN_DB: f64 = 1.0;
const ABLATION_LIMIT: Duration = Duration::from_secs(15 * 60);
const N_SWEEP_SLACK_DB: f64 = 0.1;
const ATP_MAE: f64 = 0.25;
const ATP_LIMIT: Duration = Duration::from_secs(30);
const TEXT_LIMIT: Duration = Duration::from_secs(5);
const IDENTITY_TOLERANCE: f32 = 1e-6;
const SSIM_TOLERANCE: f64 = 1e-5;
const PSNR_TOLERANCE: f64 = 1e-6;
const DELTA_E_TOLERANCE: f64 = 1e-3;
const COLOR_MATCH_RATIO: f64 = 0.15;
const REGION_WEIGHT_GAP: f64 = 0.2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn count_colors(img: &Image) -> usize {
    img.to_rgb8().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<HashSet<_>>().len()
}

fn color_collapse() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut held = 0;
    for i in 0..COLLAPSE_PAIRS {
        let (h, w) = (rng.random_range(8..48), rng.random_range(8..48));
        let img = if i % 2 == 0 {
            random_image(&mut rng, h, w).quantized()
        } else {
            caatp::synth::generate_base(i as u64, 1, 32).unwrap().remove(0)
        };
        let curves: Vec<Vec<f32>> = (0..3).map(|_| (0..256).map(|_| rng.random()).collect()).collect();
        let out = apply_curve(&img, [&curves[0], &curves[1], &curves[2]]).unwrap();
        if count_colors(&out) <= count_colors(&img) {
            held += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        held == COLLAPSE_PAIRS && t < COLLAPSE_LIMIT,
        format!("{held}/{COLLAPSE_PAIRS} pairs kept count(out) <= count(in), {:.2}s", t.as_secs_f64()),
    )
}

fn expansion_witness() -> Outcome {
    let start = Instant::now();
    let (a, b) = (0.25f32, 0.75f32);
    // Left half color A, right half color B.
    let img = Image::from_fn(8, 8, |_, x| if x < 4 { [a; 3] } else { [b; 3] });
    let lift: Vec<f32> = (0..256).map(|i| (i as f32 / 255.0).sqrt()).collect();
    let drop: Vec<f32> = (0..256).map(|i| (i as f32 / 255.0).powi(2)).collect();
    let c1 = apply_curve(&img, [&lift, &lift, &lift]).unwrap();
    let c2 = apply_curve(&img, [&drop, &drop, &drop]).unwrap();
    // Top rows take the first curve set, bottom rows the second.
    let mut w = vec![0.0f32; 2 * 64];
    for p in 0..64 {
        let top = p / 8 < 4;
        w[p] = if top { 1.0 } else { 0.0 };
        w[64 + p] = if top { 0.0 } else { 1.0 };
    }
    let out = fuse(&[c1, c2], &w).unwrap();
    let (cin, cout) = (count_colors(&img), count_colors(&out));
    let t = start.elapsed();
    outcome(
        cin == 2 && cout == 4 && t < WITNESS_LIMIT,
        format!("{cin} input colors -> {cout} output colors, {:.3}s", t.as_secs_f64()),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let results = gradient_suite(0).unwrap();
    let t = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !(r.max_rel_error < GRAD_TOLERANCE))
        .map(|r| r.name.as_str())
        .collect();
    outcome(
        failed.is_empty() && t < GRAD_LIMIT,
        format!(
            "{} checks, worst {} at {:.2e}, failed {:?}, {:.1}s",
            results.len(),
            worst.name,
            worst.max_rel_error,
            failed,
            t.as_secs_f64()
        ),
    )
}

struct Ablation {
    full: EvalReport,
    monolithic: EvalReport,
    n1: EvalReport,
    n3: EvalReport,
    core_time: Duration,
    full_model: RetouchModel,
}

fn run_ablation() -> Ablation {
    let ds = build_dataset(0, &SynthConfig::default()).unwrap();
    let tr = pools_from_dataset(&ds, &ds.split.train).unwrap();
    let va = pools_from_dataset(&ds, &ds.split.val).unwrap();
    let te = pools_from_dataset(&ds, &ds.split.test).unwrap();
    let run = |n: usize, weight_net: bool| {
        let mut cfg = TrainConfig::default();
        cfg.model.n = n;
        cfg.model.use_weight_net = weight_net;
        let out = train(&tr, &va, &cfg, &TrainOutputs::default()).unwrap();
        let report = evaluate(&out.model, &te).unwrap().0;
        (report, out.model)
    };
    let start = Instant::now();
    let (full, full_model) = run(5, true);
    let (monolithic, _) = run(5, false);
    let (n1, _) = run(1, true);
    let core_time = start.elapsed();
    let (n3, _) = run(3, true);
    Ablation {
        full,
        monolithic,
        n1,
        n3,
        core_time,
        full_model,
    }
}

fn training_ablation(a: &Ablation) -> Outcome {
    let g_mono = a.full.psnr - a.monolithic.psnr;
    let g_n1 = a.full.psnr - a.n1.psnr;
    outcome(
        g_mono >= ABLATION_GAIN_DB && g_n1 >= ABLATION_GAIN_DB && a.core_time < ABLATION_LIMIT,
        format!(
            "full {:.2} dB, monolithic {:.2} dB (+{g_mono:.2}), N=1 {:.2} dB (+{g_n1:.2}), {:.0}s",
            a.full.psnr,
            a.monolithic.psnr,
            a.n1.psnr,
            a.core_time.as_secs_f64()
        ),
    )
}

fn n_ablation(a: &Ablation) -> Outcome {
    let (p1, p3, p5) = (a.n1.psnr, a.n3.psnr, a.full.psnr);
    outcome(
        p1 <= p3 && p3 <= p5 + N_SWEEP_SLACK_DB,
        format!("N=1 {p1:.2} dB, N=3 {p3:.2} dB, N=5 {p5:.2} dB"),
    )
}

fn atp_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let train_set: Vec<(Levels, Levels)> =
        random_levels(&mut rng, 2000).into_iter().map(|x| (x, plus_one_rule(&x))).collect();
    let held_out = random_levels(&mut rng, 500);
    let (model, _) = AtpModel::train(&train_set, &AtpTrainConfig::default()).unwrap();
    let mut err = 0.0;
    for x in &held_out {
        let p = model.predict(x);
        for i in 0..6 {
            err += (p[i] - (x[i] + 1.0).min(5.0)).abs();
        }
    }
    let mae = err / (held_out.len() * 6) as f64;
    let t = start.elapsed();
    outcome(
        mae < ATP_MAE && t < ATP_LIMIT,
        format!("held-out MAE {mae:.4} on {} vectors, {:.1}s", held_out.len(), t.as_secs_f64()),
    )
}

fn text_round_trip() -> Outcome {
    let start = Instant::now();
    let mut ok = 0;
    let mut total = 0;
    for code in 0..5usize.pow(6) {
        let mut bands = [0u8; 6];
        let mut c = code;
        for b in bands.iter_mut() {
            *b = (c % 5) as u8 + 1;
            c /= 5;
        }
        total += 1;
        if parse_text(&render_bands(&bands)).ok() == Some(bands) {
            ok += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        ok == total && total == 15625 && t < TEXT_LIMIT,
        format!("{ok}/{total} band vectors, {:.2}s", t.as_secs_f64()),
    )
}

fn identity_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f32;
    for i in 0..20 {
        let model = RetouchModel::new(ModelConfig::default(), i).unwrap();
        let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
        let img = random_image(&mut rng, h, w);
        let bands: [u8; 6] = std::array::from_fn(|_| rng.random_range(1..=5));
        let out = model.forward(&img, &render_bands(&bands)).unwrap().image;
        for (a, b) in out.data().iter().zip(img.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= IDENTITY_TOLERANCE,
        format!("20 images, max deviation {worst:.2e}"),
    )
}

// Brute-force SSIM: every pixel gets an explicit 11x11 Gaussian window,
// cut at the borders and renormalized.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = (a.height() as isize, a.width() as isize);
    let g = |d: isize| (-((d * d) as f64) / (2.0 * 1.5 * 1.5)).exp();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut ws, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5 {
                    for dx in -5..=5 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || yy >= h || xx < 0 || xx >= w {
                            continue;
                        }
                        let wt = g(dy) * g(dx);
                        let va = f64::from(a.pixel(yy as usize, xx as usize)[c]);
                        let vb = f64::from(b.pixel(yy as usize, xx as usize)[c]);
                        ws += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        aa += wt * va * va;
                        bb += wt * vb * vb;
                        ab += wt * va * vb;
                    }
                }
                let (ma, mb) = (ma / ws, mb / ws);
                let (va, vb, cov) = (aa / ws - ma * ma, bb / ws - mb * mb, ab / ws - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    total / (3 * h * w) as f64
}

fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = f64::from(a.pixel(y, x)[c]) - f64::from(b.pixel(y, x)[c]);
                s += d * d;
                n += 1.0;
            }
        }
    }
    -10.0 * (s / n).log10()
}

// sRGB primaries and D65 white give the RGB->XYZ matrix.
fn xyz_matrix() -> [[f64; 3]; 3] {
    let xy = [(0.64, 0.33), (0.30, 0.60), (0.15, 0.06)];
    let (wx, wy) = (0.3127, 0.3290);
    let white = [wx / wy, 1.0, (1.0 - wx - wy) / wy];
    let cols: Vec<[f64; 3]> = xy.iter().map(|&(x, y)| [x / y, 1.0, (1.0 - x - y) / y]).collect();
    let m = [
        [cols[0][0], cols[1][0], cols[2][0]],
        [cols[0][1], cols[1][1], cols[2][1]],
        [cols[0][2], cols[1][2], cols[2][2]],
    ];
    let s = solve3(m, white);
    std::array::from_fn(|r| std::array::from_fn(|c| m[r][c] * s[c]))
}

fn solve3(m: [[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    std::array::from_fn(|k| {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = v[r];
        }
        det(mk) / d
    })
}

fn lab_oracle(px: [f32; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    let lin = px.map(|v| {
        let v = f64::from(v);
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    });
    let xyz: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| m[r][c] * lin[c]).sum());
    let white: [f64; 3] = std::array::from_fn(|r| m[r].iter().sum());
    let f = |t: f64| {
        let e = (6.0f64 / 29.0).powi(3);
        if t > e {
            t.cbrt()
        } else {
            t * (29.0 * 29.0) / (3.0 * 36.0) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(xyz[0] / white[0]), f(xyz[1] / white[1]), f(xyz[2] / white[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn delta_e_oracle(a: &Image, b: &Image) -> f64 {
    let m = xyz_matrix();
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (lab_oracle(a.pixel(y, x), &m), lab_oracle(b.pixel(y, x), &m));
            s += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        }
    }
    s / (a.height() * a.width()) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut e_ssim, mut e_psnr, mut e_de, mut e_self) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(8..24), rng.random_range(8..24));
        let a = random_image(&mut rng, h, w);
        let b = a.map_pixels(|p| p.map(|v| (v + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0)));
        e_ssim = e_ssim.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
        e_psnr = e_psnr.max((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs());
        e_de = e_de.max((mean_delta_e(&a, &b).unwrap() - delta_e_oracle(&a, &b)).abs());
        e_self = e_self.max((ssim(&a, &a).unwrap() - 1.0).abs());
    }
    outcome(
        e_ssim < SSIM_TOLERANCE && e_psnr < PSNR_TOLERANCE && e_de < DELTA_E_TOLERANCE && e_self < 1e-9,
        format!("20 pairs: SSIM err {e_ssim:.1e}, PSNR err {e_psnr:.1e} dB, dE err {e_de:.1e}, |SSIM(x,x)-1| {e_self:.1e}"),
    )
}

fn determinism() -> Outcome {
    let cfg = SynthConfig {
        count: 16,
        size: 32,
        train: 12,
        val: 2,
        test: 2,
        ..Default::default()
    };
    let ds = build_dataset(4, &cfg).unwrap();
    let tr = pools_from_dataset(&ds, &ds.split.train).unwrap();
    let va = pools_from_dataset(&ds, &ds.split.val).unwrap();
    let train_cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let outputs = TrainOutputs {
            checkpoint: Some(dir.path().join(format!("{tag}.ckpt"))),
            log: Some(dir.path().join(format!("{tag}.jsonl"))),
        };
        train(&tr, &va, &train_cfg, &outputs).unwrap();
        (
            std::fs::read(outputs.checkpoint.unwrap()).unwrap(),
            std::fs::read(outputs.log.unwrap()).unwrap(),
        )
    };
    let (a, b) = (run("a"), run("b"));
    outcome(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "checkpoints {} bytes identical: {}, logs identical: {}",
            a.0.len(),
            a.0 == b.0,
            a.1 == b.1
        ),
    )
}

fn color_ordering(a: &Ablation) -> Outcome {
    let (mono, input) = (a.monolithic.unique_colors_out, a.full.unique_colors_in);
    let (ca, target) = (a.full.unique_colors_out, a.full.unique_colors_target);
    let close = (ca - target).abs() <= COLOR_MATCH_RATIO * target;
    outcome(
        mono <= input && input < ca && close,
        format!("monolithic {mono:.0} <= input {input:.0} < content-aware {ca:.0} ~ target {target:.0}"),
    )
}

fn trained_probes(a: &Ablation) -> Outcome {
    let model = &a.full_model;
    // The weight maps should separate a dark region from a bright one
    // when the sentence asks for the content-dependent style.
    let img = Image::from_fn(64, 64, |y, x| {
        let t = 0.04 * ((x as f32) * 0.3).sin();
        if y < 32 { [0.2 + t, 0.18 + t, 0.22 + t] } else { [0.8 + t, 0.78 + t, 0.75 + t] }
    })
    .quantized();
    let adaptive = caatp::synth::default_experts().into_iter().find(|e| e.rule.is_some()).unwrap();
    let target = caatp::synth::apply_expert(&img, &adaptive).quantized();
    let (sx, sy) = (levels(&img), levels(&target));
    let text = caatp::style::render_text(&std::array::from_fn(|i| sy[i] - sx[i]));
    let out = model.forward(&img, &text).unwrap();
    let n = model.config().n;
    let hw = 64 * 64;
    let mut best_gap = 0.0f64;
    for j in 0..n {
        let plane = &out.weights[j * hw..(j + 1) * hw];
        let top: f64 = plane[..hw / 2].iter().map(|&v| f64::from(v)).sum::<f64>() / (hw / 2) as f64;
        let bottom: f64 = plane[hw / 2..].iter().map(|&v| f64::from(v)).sum::<f64>() / (hw / 2) as f64;
        best_gap = best_gap.max((top - bottom).abs());
    }
    let bright = img.map_pixels(|p| p.map(|v| (v + 0.2).min(1.0)));
    let fa = model.encode_image(&img).unwrap();
    let fb = model.encode_image(&bright).unwrap();
    let feature_shift = fa.iter().zip(&fb).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    outcome(
        best_gap > REGION_WEIGHT_GAP && feature_shift > 1e-3,
        format!("region weight gap {best_gap:.3}, encoder shift under +0.2 brightness {feature_shift:.3}"),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures += 1;
        }
    };
    report("color_collapse", color_collapse());
    report("color_expansion_witness", expansion_witness());
    report("gradient_suite", gradient_checks());
    report("text_round_trip", text_round_trip());
    report("identity_initialization", identity_init());
    report("metric_oracles", metric_oracles());
    report("atp_fidelity", atp_fidelity());
    report("determinism", determinism());
    let ablation = run_ablation();
    report("training_ablation", training_ablation(&ablation));
    report("n_ablation", n_ablation(&ablation));
    report("supplementary color_count_ordering", color_ordering(&ablation));
    report("supplementary trained_model_probes", trained_probes(&ablation));
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
