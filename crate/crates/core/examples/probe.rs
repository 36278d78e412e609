use evd_core::augment::{EditTriplet, SourceTag};
use evd_core::diffusion::{
    cfg_noise, edit_video, embed_text, model_init_seed, null_text, train_loop, Denoiser,
    DenoiserConfig, DenoiserModel, DropoutPolicy, GuidanceConfig, IdentityCodec, LatentCodec,
    TrainConfig, TrainState,
};
use evd_core::numkit::{channel_concat, derive_seed, mse, Rng, Tensor};
use evd_core::schedule::{q_sample, NoiseSchedule};

fn truth(vin: &Tensor, instruction: &str) -> Tensor {
    match instruction {
        "invert" => vin.map(|v| 1.0 - v),
        _ => vin.map(|v| (v + 0.3).clamp(0.0, 1.0)),
    }
}

struct CenteredCodec;

impl LatentCodec for CenteredCodec {
    fn encode(&self, v: &Tensor) -> Tensor {
        v.map(|x| 2.0 * x - 1.0)
    }
    fn decode(&self, v: &Tensor) -> Tensor {
        v.map(|x| (x + 1.0) / 2.0)
    }
}

fn mse_slice(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let lr: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let hidden: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(64);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let head_scale: f32 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let centered: bool = args.get(6).map(|s| s == "1").unwrap_or(false);
    let drop_scale: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let codec: &dyn LatentCodec = if centered { &CenteredCodec } else { &IdentityCodec };
    println!("config: steps {steps} lr {lr} hidden {hidden} batch {batch} head_scale {head_scale} centered {centered} drop_scale {drop_scale}");

    let ei = embed_text("invert");
    let eb = embed_text("brighten");
    let dot: f32 = ei.data().iter().zip(eb.data()).map(|(a, b)| a * b).sum();
    println!(
        "text emb: |invert| {:.3} |brighten| {:.3} dot {:.3}",
        ei.data().iter().map(|v| v * v).sum::<f32>().sqrt(),
        eb.data().iter().map(|v| v * v).sum::<f32>().sqrt(),
        dot
    );

    let records: Vec<EditTriplet> = (0..512u64)
        .map(|i| {
            let vin = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(35_000, i)).unwrap();
            let instruction = if i % 2 == 0 { "invert" } else { "brighten" };
            let vout = truth(&vin, instruction);
            EditTriplet::new(vin, instruction.into(), vout, SourceTag::ImageSynth, i).unwrap()
        })
        .collect();

    let cfg_m = DenoiserConfig { frame_latent: 64, hidden, time_dim: 16, text_dim: 32 };
    let mut model = DenoiserModel::init(cfg_m, model_init_seed(41));
    if head_scale != 1.0 {
        let mut params: Vec<Tensor> = model.params().to_vec();
        params[8] = params[8].map(|v| v * head_scale);
        model = DenoiserModel::from_params(cfg_m, params).unwrap();
    }
    let mut state = TrainState::fresh(&model);
    let base = DropoutPolicy::default();
    let cfg = TrainConfig {
        steps, batch, lr, t_diff: 50, seed: 41, ratio: (1, 1),
        policy: DropoutPolicy {
            p_drop_text: base.p_drop_text * drop_scale,
            p_drop_vision: base.p_drop_vision * drop_scale,
            p_drop_both: base.p_drop_both * drop_scale,
        },
    };
    let t0 = std::time::Instant::now();
    let mut recent = Vec::new();
    train_loop(&mut model, &mut state, &records, None, codec, &cfg, |s, l| {
        recent.push(l);
        if s % 500 == 0 {
            let tail: f32 = recent.iter().rev().take(100).sum::<f32>() / 100.0_f32.min(recent.len() as f32);
            println!("step {s} loss(mean100) {tail:.5}");
        }
    })
    .unwrap();
    println!("train time {:.1}s", t0.elapsed().as_secs_f64());

    let schedule = NoiseSchedule::default_linear(50).unwrap();

    // Per-t conditioned eval loss (no dropout): buckets of 10 timesteps.
    let mut bucket = [0.0f64; 5];
    let mut bucket_n = [0usize; 5];
    let mut rng = Rng::seed_from(7_777);
    for trial in 0..400u64 {
        let rec = &records[(trial % 64) as usize];
        let t = (trial as usize * 13) % 50;
        let x_tgt = codec.encode(&rec.video_out);
        let eps_data: Vec<f32> = (0..x_tgt.numel()).map(|_| rng.next_normal_f32()).collect();
        let eps = Tensor::new(x_tgt.shape().to_vec(), eps_data).unwrap();
        let z_t = q_sample(&x_tgt, t, &eps, &schedule).unwrap();
        let inp = channel_concat(&codec.encode(&rec.video_in), &z_t).unwrap();
        let pred = model.predict(&inp, t, &embed_text(&rec.instruction)).unwrap();
        bucket[t / 10] += mse_slice(pred.data(), eps.data());
        bucket_n[t / 10] += 1;
    }
    for (i, (s, n)) in bucket.iter().zip(bucket_n).enumerate() {
        println!("cond eval loss t in [{},{}) : {:.4}", i * 10, i * 10 + 10, s / n as f64);
    }

    // Implied x0 from each branch and from the guided estimate at several t.
    // x0_hat = (z_t - sqrt(1-abar) eps_hat) / sqrt(abar).
    let g15 = GuidanceConfig::new(1.5, 1.5).unwrap();
    for &t in &[47usize, 39, 29, 19, 9] {
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let mut acc: [Vec<f64>; 5] = Default::default();
        for k in 0..16u64 {
            let vin_px = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(88_000, k)).unwrap();
            let instr = if k % 2 == 0 { "invert" } else { "brighten" };
            let vin = codec.encode(&vin_px);
            let x0 = codec.encode(&truth(&vin_px, instr));
            let eps_data: Vec<f32> = (0..x0.numel()).map(|_| rng.next_normal_f32()).collect();
            let eps = Tensor::new(x0.shape().to_vec(), eps_data).unwrap();
            let z_t = q_sample(&x0, t, &eps, &schedule).unwrap();
            let c = embed_text(instr);
            let nullv = Tensor::zeros(vin.shape().to_vec()).unwrap();
            let branches: [(usize, &Tensor, Tensor); 4] = [
                (0, &vin, c.clone()),
                (1, &vin, null_text()),
                (2, &nullv, c.clone()),
                (3, &nullv, null_text()),
            ];
            for (slot, xv, ce) in &branches {
                let e = model.predict(&channel_concat(xv, &z_t).unwrap(), t, ce).unwrap();
                let x0h: Vec<f32> = z_t
                    .data()
                    .iter()
                    .zip(e.data())
                    .map(|(&z, &eh)| (z - sb * eh) / sa)
                    .collect();
                acc[*slot].push(mse_slice(&x0h, x0.data()));
            }
            let eg = cfg_noise(&model, &z_t, &vin, &c, t, &g15).unwrap();
            let x0g: Vec<f32> =
                z_t.data().iter().zip(eg.data()).map(|(&z, &eh)| (z - sb * eh) / sa).collect();
            let copy = mse_slice(&x0g, vin.data());
            acc[4].push(mse_slice(&x0g, x0.data()));
            if k == 0 {
                println!("  t {t} guided x0 vs copy-of-input MSE {:.4}", copy);
            }
        }
        let m = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "t {t:2}: x0hat MSE vs truth  ic {:.4}  in {:.4}  nc {:.4}  nn {:.4}  guided {:.4}",
            m(&acc[0]), m(&acc[1]), m(&acc[2]), m(&acc[3]), m(&acc[4])
        );
    }

    // Trajectory view: implied x0 error per DDIM step on the real sampling
    // path, guided vs pure-conditional, one held-out video.
    {
        use evd_core::schedule::{ddim_step, sampling_timesteps};
        let vin_px = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(99_000, 0)).unwrap();
        let vin = codec.encode(&vin_px);
        let x0 = codec.encode(&truth(&vin_px, "invert"));
        let c = embed_text("invert");
        for pure in [false, true] {
            let mut rng = Rng::seed_from(derive_seed(5, 0));
            let z0: Vec<f32> = (0..vin.numel()).map(|_| rng.next_normal_f32()).collect();
            let mut z = Tensor::new(vin.shape().to_vec(), z0).unwrap();
            let ts = sampling_timesteps(50, 25);
            let mut line = String::new();
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = if i + 1 < ts.len() { ts[i + 1] as i64 } else { -1 };
                let eps = if pure {
                    model.predict(&channel_concat(&vin, &z).unwrap(), t, &c).unwrap()
                } else {
                    cfg_noise(&model, &z, &vin, &c, t, &g15).unwrap()
                };
                let ab = schedule.alpha_bar(t);
                let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
                let x0h: Vec<f32> =
                    z.data().iter().zip(eps.data()).map(|(&zv, &e)| (zv - sb * e) / sa).collect();
                if i % 4 == 0 || i + 1 == ts.len() {
                    line.push_str(&format!("t{t}:{:.3} ", mse_slice(&x0h, x0.data())));
                }
                z = ddim_step(&z, &eps, t, t_prev, &schedule).unwrap();
            }
            let lbl = if pure { "pure-cond" } else { "guided1.5" };
            let fin = mse_slice(&codec.decode(&z).clamp01().data(), truth(&vin_px, "invert").data());
            println!("traj {lbl}: {line} final {fin:.4}");
        }
    }

    // Pure-conditional sampling quality over the held-out set.
    {
        use evd_core::schedule::{ddim_step, sampling_timesteps};
        let (mut edit_mse, mut swap) = (0.0f64, 0.0f64);
        let held = 8usize;
        for k in 0..held as u64 {
            let vin_px = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(99_000, k)).unwrap();
            let vin = codec.encode(&vin_px);
            let mut outs = Vec::new();
            for instr in ["invert", "brighten"] {
                let c = embed_text(instr);
                let mut rng = Rng::seed_from(derive_seed(5, k));
                let z0: Vec<f32> = (0..vin.numel()).map(|_| rng.next_normal_f32()).collect();
                let mut z = Tensor::new(vin.shape().to_vec(), z0).unwrap();
                let ts = sampling_timesteps(50, 25);
                for (i, &t) in ts.iter().enumerate() {
                    let t_prev = if i + 1 < ts.len() { ts[i + 1] as i64 } else { -1 };
                    let eps = model.predict(&channel_concat(&vin, &z).unwrap(), t, &c).unwrap();
                    z = ddim_step(&z, &eps, t, t_prev, &schedule).unwrap();
                }
                let out = codec.decode(&z).clamp01();
                edit_mse += mse_slice(out.data(), truth(&vin_px, instr).data()) / 2.0;
                outs.push(out);
            }
            swap += mse_slice(outs[0].data(), outs[1].data());
        }
        println!(
            "pure-cond sampler: edit MSE {:.4} swap {:.4}",
            edit_mse / held as f64,
            swap / held as f64
        );
    }

    for lam in [0.0f32, 1.5] {
        let g = GuidanceConfig::new(lam, lam).unwrap();
        let (mut edit_mse, mut swap, mut copy_mse, mut const_mse) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let held = 8usize;
        let mut per_video = String::new();
        for k in 0..held as u64 {
            let vin = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(99_000, k)).unwrap();
            let seed = derive_seed(5, k);
            let inv = edit_video(&model, &vin, "invert", codec, &schedule, 25, &g, seed).unwrap();
            let bri = edit_video(&model, &vin, "brighten", codec, &schedule, 25, &g, seed).unwrap();
            let (mi, mb) = (
                mse(&inv, &truth(&vin, "invert")).unwrap() as f64,
                mse(&bri, &truth(&vin, "brighten")).unwrap() as f64,
            );
            per_video.push_str(&format!("k{k} i{mi:.3} b{mb:.3}  "));
            edit_mse += (mi + mb) / 2.0;
            swap += mse(&inv, &bri).unwrap() as f64;
            copy_mse += (mse(&inv, &vin).unwrap() as f64 + mse(&bri, &vin).unwrap() as f64) / 2.0;
            let c65 = vin.map(|_| 0.65);
            const_mse += (mse(&inv, &c65).unwrap() as f64 + mse(&bri, &c65).unwrap() as f64) / 2.0;
        }
        if lam != 0.0 {
            println!("  per-video: {per_video}");
        }
        println!(
            "lambda {lam}: edit MSE {:.4} swap {:.4} | out-vs-input {:.4} out-vs-0.65 {:.4}",
            edit_mse / held as f64, swap / held as f64, copy_mse / held as f64, const_mse / held as f64
        );
    }
}
