use evd_core::diffusion::{edit_video, Denoiser, DiffusionError, GuidanceConfig, IdentityCodec};
use evd_core::numkit::{derive_seed, mse, Rng, Tensor};
use evd_core::schedule::{ddim_step, sampling_timesteps, NoiseSchedule};

fn truth(vin: &Tensor, instruction: &str) -> Tensor {
    match instruction {
        "invert" => vin.map(|v| 1.0 - v),
        _ => vin.map(|v| (v + 0.3).clamp(0.0, 1.0)),
    }
}

// Ideal noise predictor for a known target: eps = (z - sqrt(abar) x0) / sqrt(1-abar).
// Reads z from the second half of the concatenated channels.
struct Oracle {
    x0: Tensor,
    schedule: NoiseSchedule,
    noise: f32,
}

impl Denoiser for Oracle {
    fn predict(&self, x: &Tensor, t: usize, _text: &Tensor) -> Result<Tensor, DiffusionError> {
        let shape = x.shape();
        let (f, c2, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let half = c2 / 2;
        let ab = self.schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let mut out = Vec::with_capacity(f * half * h * w);
        let mut rng = Rng::seed_from(derive_seed(t as u64, 1234));
        for fi in 0..f {
            for ci in half..c2 {
                for p in 0..h * w {
                    let z = x.data()[((fi * c2 + ci) * h * w) + p];
                    let x0v = self.x0.data()[((fi * half + (ci - half)) * h * w) + p];
                    let e = (z - sa * x0v) / sb;
                    out.push(e + self.noise * rng.next_normal_f32());
                }
            }
        }
        Ok(Tensor::new(vec![f, half, h, w], out).unwrap())
    }
}

fn main() {
    let schedule = NoiseSchedule::default_linear(50).unwrap();
    let vin = Tensor::rand_uniform(vec![4, 1, 8, 8], derive_seed(99_000, 0)).unwrap();
    let x0 = truth(&vin, "invert");

    for noise in [0.0f32, 0.1, 0.3] {
        let oracle = Oracle { x0: x0.clone(), schedule: schedule.clone(), noise };

        // Manual trajectory with per-step implied-x0 error.
        let mut rng = Rng::seed_from(derive_seed(5, 0));
        let z0: Vec<f32> = (0..vin.numel()).map(|_| rng.next_normal_f32()).collect();
        let mut z = Tensor::new(vin.shape().to_vec(), z0).unwrap();
        let ts = sampling_timesteps(50, 25);
        let mut line = String::new();
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] as i64 } else { -1 };
            let inp = evd_core::numkit::channel_concat(&vin, &z).unwrap();
            let eps = oracle.predict(&inp, t, &Tensor::zeros(vec![32]).unwrap()).unwrap();
            let ab = schedule.alpha_bar(t);
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let x0h: Vec<f32> =
                z.data().iter().zip(eps.data()).map(|(&zv, &e)| (zv - sb * e) / sa).collect();
            if i % 4 == 0 || i + 1 == ts.len() {
                let m: f64 = x0h
                    .iter()
                    .zip(x0.data())
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / x0h.len() as f64;
                line.push_str(&format!("t{t}:{m:.4} "));
            }
            z = ddim_step(&z, &eps, t, t_prev, &schedule).unwrap();
        }
        let fin = mse(&z.clamp01(), &x0).unwrap();
        println!("oracle noise {noise}: {line} final {fin:.6}");

        // Through the public sampler too.
        let g = GuidanceConfig::new(1.5, 1.5).unwrap();
        let out =
            edit_video(&oracle, &vin, "invert", &IdentityCodec, &schedule, 25, &g, derive_seed(5, 0))
                .unwrap();
        println!("  edit_video guided MSE {:.6}", mse(&out, &x0).unwrap());
    }
}
