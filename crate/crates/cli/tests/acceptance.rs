//! Acceptance gate: ten numbered criteria covering schedule exactness,
//! process equivalence, gradient fidelity, guidance arithmetic, the
//! augmentation contract, parallel determinism, the mixing ratio, a full
//! toy training-and-editing run, metric sanity, and the pipeline golden
//! run. Each test prints one pass line; a failed assertion is the fail
//! line.

use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use evd_core::augment::{
    make_trajectory, sample_affine_params, synth_triplet, AffineRanges, EditTriplet, SourceTag,
    TrajectoryMode,
};
use evd_core::cappipe::backends::Summarizer;
use evd_core::cappipe::http::HttpSummarizer;
use evd_core::cappipe::testserver::{ScriptedResponse, TestServer};
use evd_core::cappipe::BackendEndpoint;
use evd_core::dataset::{generate_indexed, write_shard, MixedSampler, SourceLabel};
use evd_core::diffusion::model::time_embedding;
use evd_core::diffusion::{
    cfg_noise, edit_video, model_init_seed, train_loop, Denoiser, DenoiserConfig, DenoiserModel,
    DiffusionError, DropoutPolicy, GuidanceConfig, IdentityCodec, StubDenoiser, TrainConfig,
    TrainState,
};
use evd_core::metrics::{frame_consistency, FrameEmbedder, MetricsError, ToyEmbedder};
use evd_core::numkit::{derive_seed, mse, Rng, Tape, Tensor};
use evd_core::schedule::{q_step, NoiseSchedule};

#[test]
fn c01_schedule_exactness() {
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let mut product = 1.0f64;
    for t in 0..1000 {
        product *= 1.0 - s.beta(t);
        let rel = ((s.alpha_bar(t) - product) / product).abs();
        assert!(rel < 1e-12, "t={t}: alpha_bar {} vs oracle {product}", s.alpha_bar(t));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1.0, "took {secs:.3}s");
    println!("criterion 1 PASS: alpha_bar matches the 64-bit running product at every t ({secs:.3}s)");
}

#[test]
fn c02_forward_process_equivalence() {
    let start = Instant::now();
    let s = NoiseSchedule::from_betas(vec![0.05; 10]).unwrap();
    let n = 100_000usize;
    let mut rng = Rng::seed_from(2026);
    let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let mut z = Tensor::full(vec![1], 1.0).unwrap();
        for t in 0..10 {
            let eps = Tensor::new(vec![1], vec![rng.next_normal_f32()]).unwrap();
            z = q_step(&z, t, &eps, &s).unwrap();
        }
        let v = z.data()[0] as f64;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let var = sumsq / n as f64 - mean * mean;
    let ab9 = s.alpha_bar(9);
    let (want_mean, want_var) = (ab9.sqrt(), 1.0 - ab9);
    let mean_tol = 3.0 * want_var.sqrt() / (n as f64).sqrt();
    assert!((mean - want_mean).abs() < mean_tol, "mean {mean} vs {want_mean} (tol {mean_tol})");
    assert!((var - want_var).abs() < 0.03 * want_var, "var {var} vs {want_var}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.3}s");
    println!(
        "criterion 2 PASS: 100k iterated q_step trials match the closed form \
         (mean {mean:.5} vs {want_mean:.5}, var {var:.5} vs {want_var:.5}, {secs:.2}s)"
    );
}

/// f64 replica of the denoiser forward pass for finite differences; the
/// f32 forward's rounding noise would swamp the derivative signal.
fn mirror_loss(
    cfg: DenoiserConfig,
    p: &[Vec<f64>],
    x: &Tensor,
    t: usize,
    text: &Tensor,
    target: &[f32],
) -> f64 {
    let frames = x.shape()[0];
    let per_frame = x.numel() / frames;
    let (hd, fl) = (cfg.hidden, cfg.frame_latent);
    let in_dim = per_frame + cfg.time_dim + cfg.text_dim;

    let mut rows = Vec::with_capacity(frames * in_dim);
    let temb = time_embedding(t, cfg.time_dim);
    for f in 0..frames {
        rows.extend(x.data()[f * per_frame..(f + 1) * per_frame].iter().map(|&v| v as f64));
        rows.extend(temb.iter().map(|&v| v as f64));
        rows.extend(text.data().iter().map(|&v| v as f64));
    }

    let affine = |a: &[f64], n: usize, k: usize, w: &[f64], b: &[f64], m: usize| {
        let mut out = vec![0.0f64; n * m];
        for i in 0..n {
            for kk in 0..k {
                let av = a[i * k + kk];
                for j in 0..m {
                    out[i * m + j] += av * w[kk * m + j];
                }
            }
            for j in 0..m {
                out[i * m + j] += b[j];
            }
        }
        out
    };
    let silu = |v: &mut [f64]| {
        for e in v.iter_mut() {
            *e /= 1.0 + (-*e).exp();
        }
    };

    let mut h = affine(&rows, frames, in_dim, &p[0], &p[1], hd);
    silu(&mut h);
    h = affine(&h, frames, hd, &p[2], &p[3], hd);
    silu(&mut h);
    h = affine(&h, frames, hd, &p[4], &p[5], hd);
    silu(&mut h);
    let mut mean = vec![0.0f64; hd];
    for f in 0..frames {
        for j in 0..hd {
            mean[j] += h[f * hd + j];
        }
    }
    for m in &mut mean {
        *m /= frames as f64;
    }
    let mx = affine(&mean, 1, hd, &p[6], &p[7], hd);
    for f in 0..frames {
        for j in 0..hd {
            h[f * hd + j] += mx[j];
        }
    }
    let out = affine(&h, frames, hd, &p[8], &p[9], fl);
    let mut s = 0.0f64;
    for (o, &tg) in out.iter().zip(target) {
        let d = o - tg as f64;
        s += d * d;
    }
    s / target.len() as f64
}

#[test]
fn c03_gradient_fidelity() {
    let start = Instant::now();
    let mut max_rel = 0.0f64;
    for net in 0..20u64 {
        let cfg = DenoiserConfig { frame_latent: 4, hidden: 8, time_dim: 4, text_dim: 4 };
        let model = DenoiserModel::init(cfg, net);
        let x = Tensor::randn(vec![2, 2, 2, 2], 1_000 + net).unwrap();
        let text = Tensor::randn(vec![4], 2_000 + net).unwrap();
        let target: Vec<f32> = Tensor::randn(vec![2, 4], 3_000 + net).unwrap().data().to_vec();

        let mut tape = Tape::new();
        let (out, pv) = model.forward_on_tape(&mut tape, &x, 3, &text).unwrap();
        let loss = tape.mse_loss(out, &target);
        let loss32 = tape.value(loss)[0] as f64;
        let grads = tape.backward(loss);

        let base: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| p.data().iter().map(|&v| v as f64).collect())
            .collect();
        let mirror = mirror_loss(cfg, &base, &x, 3, &text, &target);
        assert!(
            (mirror - loss32).abs() <= 1e-5 * mirror.abs().max(1.0),
            "net {net}: mirror {mirror} diverges from tape {loss32}"
        );

        for (pi, var) in pv.iter().enumerate() {
            let analytic = grads.get(*var);
            for slot in 0..base[pi].len() {
                let h = 1e-3f64;
                let mut p = base.clone();
                p[pi][slot] += h;
                let up = mirror_loss(cfg, &p, &x, 3, &text, &target);
                p[pi][slot] -= 2.0 * h;
                let down = mirror_loss(cfg, &p, &x, 3, &text, &target);
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[slot] as f64;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
    }
    assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "took {secs:.3}s");
    println!(
        "criterion 3 PASS: 20 nets, max gradient error vs 64-bit central differences \
         {max_rel:.2e} ({secs:.2}s)"
    );
}

#[test]
fn c04_guidance_verbatim() {
    let stub = StubDenoiser {
        e_null_null: 0.0,
        e_vision_text: 1.0,
        e_null_text: 0.5,
        e_vision_null: 0.25,
    };
    let z = Tensor::full(vec![1, 1, 2, 2], 0.5).unwrap();
    let x = Tensor::full(vec![1, 1, 2, 2], 0.75).unwrap();
    let c = Tensor::full(vec![32], 0.1).unwrap();

    let g = GuidanceConfig::new(1.0, 1.0).unwrap();
    let out = cfg_noise(&stub, &z, &x, &c, 3, &g).unwrap();
    assert!(out.data().iter().all(|&v| v == 1.25), "{:?}", out.data());

    let g0 = GuidanceConfig::new(0.0, 0.0).unwrap();
    let out = cfg_noise(&stub, &z, &x, &c, 3, &g0).unwrap();
    assert!(out.data().iter().all(|&v| v == stub.e_null_null), "{:?}", out.data());

    // A model that ignores its conditions must pass through unchanged for
    // any guidance scales; dyadic values keep the f32 algebra exact.
    struct ConstDenoiser(f32);
    impl Denoiser for ConstDenoiser {
        fn predict(&self, x: &Tensor, _t: usize, _text: &Tensor) -> Result<Tensor, DiffusionError> {
            let s = x.shape();
            Ok(Tensor::full(vec![s[0], s[1] / 2, s[2], s[3]], self.0)?)
        }
    }
    for (lt, lv) in [(0.0, 0.0), (1.0, 1.0), (2.0, 0.75), (-1.0, 0.5)] {
        let g = GuidanceConfig::new(lt, lv).unwrap();
        let out = cfg_noise(&ConstDenoiser(0.5), &z, &x, &c, 0, &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5), "lambda ({lt},{lv}): {:?}", out.data());
    }
    println!(
        "criterion 4 PASS: stub guidance returns exactly 1.25, zero scales return \
         e(null,null), condition-blind models pass through"
    );
}

#[test]
fn c05_augmentation_contract() {
    let ranges = AffineRanges::default();
    for i in 0..10_000u64 {
        let p = sample_affine_params(derive_seed(55, i), &ranges).unwrap();
        assert!(p.rotation_deg.abs() <= 5.0, "rotation {}", p.rotation_deg);
        assert!(
            p.translate_frac.0.abs() <= 0.05 && p.translate_frac.1.abs() <= 0.05,
            "translation {:?}",
            p.translate_frac
        );
        assert!((0.95..=1.05).contains(&p.scale), "scale {}", p.scale);
        assert!(
            p.shear_deg.0.abs() <= 5.0 && p.shear_deg.1.abs() <= 5.0,
            "shear {:?}",
            p.shear_deg
        );
    }

    let img = Tensor::rand_uniform(vec![3, 288, 320], 7).unwrap();
    let traj = make_trajectory(11, 3, &ranges, TrajectoryMode::Interpolated, true).unwrap();
    let trip = synth_triplet(&img, &img, "no edit", &traj, 11).unwrap();
    assert_eq!(trip.video_in.shape(), &[3, 3, 256, 256]);
    assert_eq!(trip.video_in.data(), trip.video_out.data(), "identical pair must warp identically");
    println!(
        "criterion 5 PASS: 10k affine draws inside the ranges, 288-short-side input \
         crops to 256x256, identical pairs give byte-identical videos"
    );
}

#[test]
fn c06_parallel_determinism() {
    let ranges = AffineRanges { resize_short: 10, crop: 8, ..AffineRanges::default() };
    let build = |workers: usize| -> Vec<EditTriplet> {
        generate_indexed(1000, workers, |i| -> Result<EditTriplet, String> {
            let img = Tensor::rand_uniform(vec![3, 12, 12], derive_seed(77, i as u64)).unwrap();
            let edited = img.map(|v| 1.0 - v);
            let seed = derive_seed(1234, i as u64);
            let traj = make_trajectory(seed, 4, &ranges, TrajectoryMode::Interpolated, true)
                .map_err(|e| e.to_string())?;
            synth_triplet(&img, &edited, "invert the colors", &traj, seed)
                .map_err(|e| e.to_string())
        })
        .unwrap()
    };
    let tmp = tempfile::tempdir().unwrap();
    let (one, eight) = (tmp.path().join("w1.evd"), tmp.path().join("w8.evd"));
    write_shard(&one, &build(1)).unwrap();
    write_shard(&eight, &build(8)).unwrap();
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(&eight).unwrap());
    println!("criterion 6 PASS: 1k-triplet shard bytes identical with 1 and 8 workers");
}

#[test]
fn c07_mixing_ratio() {
    let mut sampler = MixedSampler::new(64, 64, (5, 1), 99).unwrap();
    let n = 60_000usize;
    let mut from_a = 0usize;
    for _ in 0..n {
        if matches!(sampler.draw().0, SourceLabel::A) {
            from_a += 1;
        }
    }
    let frac = from_a as f64 / n as f64;
    assert!((frac - 5.0 / 6.0).abs() < 0.02, "source-A fraction {frac}");
    println!("criterion 7 PASS: 60k draws give source-A fraction {frac:.4} (want 5/6 +- 0.02)");
}

fn c08_truth(vin: &Tensor, instruction: &str) -> Tensor {
    match instruction {
        "invert" => vin.map(|v| 1.0 - v),
        "brighten" => vin.map(|v| (v + 0.3).clamp(0.0, 1.0)),
        other => panic!("unknown toy instruction {other}"),
    }
}

#[test]
fn c08_end_to_end_toy_editing() {
    let start = Instant::now();
    let records: Vec<EditTriplet> = (0..512u64)
        .map(|i| {
            let vin = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(35_000, i)).unwrap();
            let instruction = if i % 2 == 0 { "invert" } else { "brighten" };
            let vout = c08_truth(&vin, instruction);
            EditTriplet::new(vin, instruction.into(), vout, SourceTag::ImageSynth, i).unwrap()
        })
        .collect();

    let mut model = DenoiserModel::init(DenoiserConfig::with_frame_latent(64), model_init_seed(41));
    let mut state = TrainState::fresh(&model);
    let cfg = TrainConfig {
        steps: 3000,
        batch: 16,
        lr: 1e-3,
        t_diff: 50,
        seed: 41,
        ratio: (1, 1),
        policy: DropoutPolicy::default(),
    };
    train_loop(&mut model, &mut state, &records, None, &IdentityCodec, &cfg, |_, _| {}).unwrap();

    let schedule = NoiseSchedule::default_linear(50).unwrap();
    let g = GuidanceConfig::new(1.5, 1.5).unwrap();
    let held = 16usize;
    let (mut edit_mse, mut swap_mse) = (0.0f64, 0.0f64);
    for k in 0..held as u64 {
        // Same sampling seed for both instructions so the swap difference
        // can only come from the text conditioning, not the init noise.
        let vin = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(99_000, k)).unwrap();
        let seed = derive_seed(5, k);
        let inv =
            edit_video(&model, &vin, "invert", &IdentityCodec, &schedule, 25, &g, seed).unwrap();
        let bri =
            edit_video(&model, &vin, "brighten", &IdentityCodec, &schedule, 25, &g, seed).unwrap();
        edit_mse += (mse(&inv, &c08_truth(&vin, "invert")).unwrap() as f64
            + mse(&bri, &c08_truth(&vin, "brighten")).unwrap() as f64)
            / 2.0;
        swap_mse += mse(&inv, &bri).unwrap() as f64;
    }
    edit_mse /= held as f64;
    swap_mse /= held as f64;

    let secs = start.elapsed().as_secs_f64();
    assert!(edit_mse < 0.05, "held-out MSE {edit_mse} (do-nothing baseline 1/3)");
    assert!(swap_mse > 0.05, "instruction-swap MSE {swap_mse} too close");
    assert!(secs < 900.0, "took {secs:.0}s");
    println!(
        "criterion 8 PASS: held-out edit MSE {edit_mse:.4} (baseline 0.333), \
         instruction-swap MSE {swap_mse:.4}, {secs:.0}s"
    );
}

#[test]
fn c09_metrics_sanity() {
    let frame = Tensor::rand_uniform(vec![1, 8, 8], 3).unwrap();
    let mut data = Vec::new();
    for _ in 0..5 {
        data.extend_from_slice(frame.data());
    }
    let video = Tensor::new(vec![5, 1, 8, 8], data).unwrap();
    let fc = frame_consistency(&video, &ToyEmbedder).unwrap();
    assert!((fc - 1.0).abs() < 1e-6, "static video consistency {fc}");

    // Three frames whose embeddings give pairwise cosines {1, 0, 0}.
    struct MarkerEmbedder;
    impl FrameEmbedder for MarkerEmbedder {
        fn name(&self) -> &str {
            "marker"
        }
        fn dim(&self) -> usize {
            3
        }
        fn embed(&self, frame: &Tensor) -> Result<Tensor, MetricsError> {
            let mut e = vec![0.0f32; 3];
            if frame.data()[0] < 0.5 {
                e[0] = 1.0;
            } else {
                e[1] = 1.0;
            }
            Ok(Tensor::new(vec![3], e).unwrap())
        }
    }
    let video = Tensor::new(vec![3, 1, 1, 1], vec![0.0, 0.0, 1.0]).unwrap();
    let fc = frame_consistency(&video, &MarkerEmbedder).unwrap();
    assert!((fc - 1.0 / 3.0).abs() < 1e-12, "three-frame example {fc}");

    let mut rng = Rng::seed_from(88);
    for case in 0..100u64 {
        let t = 2 + rng.below(6) as usize;
        let video = Tensor::rand_uniform(vec![t, 1, 8, 8], derive_seed(900, case)).unwrap();
        let chw = 64usize;
        let mut order: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        let mut pdata = Vec::with_capacity(t * chw);
        for &f in &order {
            pdata.extend_from_slice(&video.data()[f * chw..(f + 1) * chw]);
        }
        let permuted = Tensor::new(vec![t, 1, 8, 8], pdata).unwrap();
        let a = frame_consistency(&video, &ToyEmbedder).unwrap();
        let b = frame_consistency(&permuted, &ToyEmbedder).unwrap();
        assert!((a - b).abs() < 1e-9, "case {case}: {a} vs {b}");
    }
    println!(
        "criterion 9 PASS: static video 1.0, constructed three-frame example 1/3, \
         permutation-invariant on 100 random videos"
    );
}

const GOLDEN_SHARD_SHA256: &str = "c791945c6f996b316bd1f687e2ae83c2d5a2c1e5e5b3c5a7418113274d438915";

#[test]
fn c10_pipeline_golden_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("golden.evd");
    let videos = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/videos");
    let run = std::process::Command::new(env!("CARGO_BIN_EXE_evd"))
        .args([
            "pipeline-videos",
            "--videos",
            videos.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "0",
            "--mock",
        ])
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    let digest = Sha256::digest(std::fs::read(&out).unwrap());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, GOLDEN_SHARD_SHA256, "mock pipeline shard drifted from the pinned golden bytes");

    // A backend failing twice then succeeding completes in exactly three
    // attempts, observable as three served requests.
    let server = TestServer::start(vec![
        ScriptedResponse::failure(500),
        ScriptedResponse::failure(500),
        ScriptedResponse::output(serde_json::json!("a clip summary")),
    ])
    .unwrap();
    let endpoint = BackendEndpoint {
        base_url: server.url(),
        timeout_ms: 5_000,
        max_retries: 3,
        backoff_start_ms: 1,
    };
    let summarizer = HttpSummarizer::new(endpoint).unwrap();
    let text = summarizer.summarize(&["one".into(), "two".into()]).unwrap();
    assert_eq!(text, "a clip summary");
    assert_eq!(server.hits(), 3, "expected exactly three attempts");
    println!(
        "criterion 10 PASS: mock pipeline reproduces the pinned golden shard and a \
         twice-failing backend completes in exactly 3 attempts"
    );
}
