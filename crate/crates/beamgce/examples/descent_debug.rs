use beamgce::nn::{Critic, CriticSpec};
use beamgce::training::{gradient_penalty, update_critic, RmsProp, TrainConfig};
use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    for scale in [1.0f64, 3.0, 5.0] {
        for gamma in [1e-6f64, 1e-7] {
            let mut ok = 0;
            let mut worst: (f64, u64) = (0.0, 0);
            for seed in 0..20u64 {
                let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
                let mut critic = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
                critic.spec.dropout = 0.0;
                for mut p in critic.params_mut() { p.mapv_inplace(|v| v * scale); }
                let x_real = Array4::from_shape_fn((8, 2, 16, 4), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
                let x_gen = Array4::from_shape_fn((8, 2, 16, 4), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
                let mut x_mix = Array4::zeros(x_real.raw_dim());
                for b in 0..8 {
                    let eps: f64 = rng.random();
                    let mixed = x_real.index_axis(Axis(0), b).mapv(|v| eps * v)
                        + x_gen.index_axis(Axis(0), b).mapv(|v| (1.0 - eps) * v);
                    x_mix.index_axis_mut(Axis(0), b).assign(&mixed);
                }
                let loss_of = |c: &Critic| -> f64 {
                    let (sg, _) = c.forward_eval(&x_gen, None).unwrap();
                    let (sr, _) = c.forward_eval(&x_real, None).unwrap();
                    (sg.sum() - sr.sum()) / 8.0 + 10.0 * gradient_penalty(c, &x_mix, None).unwrap()
                };
                let before = loss_of(&critic);
                let cfg = TrainConfig { gamma, use_gp: true, n_d: 2, m: 8, total_iterations: 1, ..TrainConfig::desk() };
                let mut opt = RmsProp::new_for(&critic.params());
                update_critic(&mut critic, &mut opt, &x_gen, &x_real, &x_mix, None, &cfg, &mut rng).unwrap();
                let after = loss_of(&critic);
                if after < before { ok += 1; } else if after - before > worst.0 { worst = (after - before, seed); }
            }
            println!("scale={scale} gamma={gamma:e}: {ok}/20 (worst +{:.2e} @ seed {})", worst.0, worst.1);
        }
    }
}
