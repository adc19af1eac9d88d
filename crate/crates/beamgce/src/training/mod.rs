//! Wasserstein GAN training in four flavors — clean channels, conditional,
//! noisy pilot measurements, and pilot-conditional with a learned LOS
//! predictor — plus supervised LOS-predictor training.
//!
//! One outer training iteration runs `n_d` critic updates followed by a
//! single generator update:
//!
//! ```text
//! L(theta_d) = mean D(x_G) - mean D(x_r) + beta * 1_GP * (||grad D(x_mix)|| - 1)^2
//! theta_d   -= gamma * RMSProp(grad L)
//! theta_d    = clip(theta_d, -tau, tau)          (only without the penalty)
//!
//! L(theta_g) = -mean D(G(z))
//! theta_g   -= gamma * RMSProp(grad L)
//! ```
//!
//! The pilot variants train the critic on least-squares channel estimates and
//! corrupt generator outputs with noise of the exact same shaped covariance,
//! so the critic compares distributions of equally-noisy objects.

pub mod los;
pub mod optimizer;

pub use los::{train_los_predictor, LosTrainOptions, LosTrainStats};
pub use optimizer::{AdamOpt, RmsProp};

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{compute_norm_stats, from_beamspace, ArrayConfig, NormStats};
use crate::dataset::LsDataset;
use crate::error::{Error, Result};
use crate::estimation::{self, GceConfig, NmseAggregation};
use crate::linalg::{vec_mat, C64};
use crate::measurement::{
    beamspace_sensing_matrix, pilot_measure, sample_ls_noise, sample_triplet, PilotConfig,
};
use crate::nn::{
    clip_params, Critic, CriticSpec, Generator, GeneratorSpec, LosPredictor, NetParams,
    NormalizedGenerator,
};

/// Hyperparameters of one adversarial training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Critic iterations per generator iteration.
    pub n_d: usize,
    /// Minibatch size.
    pub m: usize,
    /// Learning rate for both networks.
    pub gamma: f64,
    /// Weight-clipping constant (no-penalty mode).
    pub tau: f64,
    /// Gradient-penalty weight.
    pub beta: f64,
    /// Gradient penalty on (true) or weight clipping (false).
    pub use_gp: bool,
    /// Reset the critic optimizer state after every outer iteration.
    pub reset_critic_optimizer: bool,
    pub total_iterations: usize,
    pub seed: u64,
    /// Measurement SNR for the pilot variants (`None` = clean training).
    pub snr_db: Option<f64>,
    /// Validation / checkpoint cadence in outer iterations.
    pub checkpoint_every: usize,
    /// Held-out samples used for validation NMSE.
    pub validation_size: usize,
    /// SNR of the validation measurements.
    pub validation_snr_db: f64,
}

impl TrainConfig {
    /// Reference hyperparameters: n_d=5, m=200, gamma=5e-5, tau=0.01, beta=10.
    pub fn paper() -> Self {
        Self {
            n_d: 5,
            m: 200,
            gamma: 5e-5,
            tau: 0.01,
            beta: 10.0,
            use_gp: true,
            reset_critic_optimizer: false,
            total_iterations: 60_000,
            seed: 0,
            snr_db: None,
            checkpoint_every: 500,
            validation_size: 50,
            validation_snr_db: 15.0,
        }
    }

    /// Desk-scale run small enough for CI.
    pub fn desk() -> Self {
        Self {
            m: 32,
            total_iterations: 5_000,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_d == 0 || self.m == 0 {
            return Err(Error::Config("n_d and m must be >= 1".into()));
        }
        if self.gamma <= 0.0 || self.tau <= 0.0 || self.beta < 0.0 {
            return Err(Error::Config("rates and penalties must be positive".into()));
        }
        Ok(())
    }
}

/// Losses observed in one critic update.
#[derive(Debug, Clone, Copy)]
pub struct CriticStepStats {
    /// Full critic loss including the penalty term.
    pub loss: f64,
    /// Wasserstein part, `mean D(x_G) - mean D(x_r)`.
    pub wasserstein: f64,
    /// Mean gradient penalty before weighting by beta.
    pub gp: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GenStepStats {
    pub loss: f64,
}

/// Per-iteration training log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub gp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nmse_db: Option<f64>,
}

/// Generator snapshot retained along the training trail.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub iter: usize,
    pub val_nmse_db: Option<f64>,
    pub generator: NetParams,
}

/// Everything a finished training run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Final-iteration generator.
    pub generator: NormalizedGenerator,
    /// Checkpoint with the lowest validation NMSE (final one if validation
    /// was disabled). NMSE does not decrease monotonically over adversarial
    /// training, so the best checkpoint is the one to deploy.
    pub best_generator: NormalizedGenerator,
    pub critic: Critic,
    pub trail: Vec<CheckpointRecord>,
    pub log: Vec<IterRecord>,
    pub best_iter: usize,
    pub best_val_nmse_db: Option<f64>,
    /// Set when training aborted on a non-finite loss; parameters are rolled
    /// back to the last checkpoint.
    pub diverged_at: Option<usize>,
}

/// Shaped noise applied to generator outputs in the pilot variants.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// One covariance square root shared by the whole dataset (the pilot
    /// triplets are fixed).
    Fixed { sigma_half: Array2<C64>, sigma: f64 },
    /// Per-sample square roots (triplets redrawn per realization); each fake
    /// draw picks one uniformly.
    PerSample {
        sigma_halves: Vec<Array2<C64>>,
        sigma: f64,
    },
}

impl NoiseModel {
    pub fn sigma(&self) -> f64 {
        match self {
            NoiseModel::Fixed { sigma, .. } => *sigma,
            NoiseModel::PerSample { sigma, .. } => *sigma,
        }
    }

    /// Draw one normalized noise tensor, or `None` in the noiseless case
    /// (which consumes no randomness).
    fn sample_tensor<R: Rng + ?Sized>(
        &self,
        stats: &NormStats,
        rng: &mut R,
    ) -> Result<Option<Array3<f64>>> {
        let sigma = self.sigma();
        if sigma == 0.0 {
            return Ok(None);
        }
        let sigma_half = match self {
            NoiseModel::Fixed { sigma_half, .. } => sigma_half,
            NoiseModel::PerSample { sigma_halves, .. } => {
                &sigma_halves[rng.random_range(0..sigma_halves.len())]
            }
        };
        let zeta = sample_ls_noise(sigma_half, sigma, rng);
        let delta = crate::linalg::unvec_mat(&zeta, stats.n_r(), stats.n_t())?;
        Ok(Some(stats.normalize_delta(&delta)?))
    }
}

/// Held-out measurements used to score checkpoints during training.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub targets: Vec<Array2<C64>>,
    pub ys: Vec<Array1<C64>>,
    pub a_sp: Array2<C64>,
    pub conditional: bool,
}

impl ValidationSet {
    /// Compressive-measurement validation set: one shared quantized triplet
    /// with `n_s = n_r` streams, measured at `snr_db`.
    pub fn build(
        targets: Vec<Array2<C64>>,
        arrays: &ArrayConfig,
        snr_db: f64,
        seed: u64,
        conditional: bool,
    ) -> Result<Self> {
        let n_p = (25 * arrays.n_t).div_ceil(64).max(2);
        let pilot = PilotConfig {
            n_s: arrays.n_r,
            n_p,
            n_bit_t: 6,
            n_bit_r: 2,
            k: 1,
            snr_db,
            seed,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let triplet = sample_triplet(&pilot, arrays, &mut rng)?;
        let a_sp = beamspace_sensing_matrix(&triplet, arrays)?.a;
        let sigma = pilot.sigma();
        let mut ys = Vec::with_capacity(targets.len());
        for hv in &targets {
            let h = from_beamspace(hv)?;
            let y = pilot_measure(&h, &triplet, sigma, &mut rng)?;
            ys.push(vec_mat(&y));
        }
        Ok(Self {
            targets,
            ys,
            a_sp,
            conditional,
        })
    }

    /// Mean GCE NMSE (linear average, reported in dB) of a generator on this
    /// validation set.
    pub fn score(&self, gen: &NormalizedGenerator, seed: u64) -> Result<f64> {
        let cfg = GceConfig {
            restarts: 1,
            seed,
            ..GceConfig::default()
        };
        let results = if self.conditional {
            estimation::gce_conditional_batch(&self.ys, &self.a_sp, gen, &cfg)?
        } else {
            estimation::gce_batch(&self.ys, &self.a_sp, gen, None, &cfg)?
        };
        let linears: Vec<f64> = results
            .iter()
            .zip(&self.targets)
            .map(|(r, t)| estimation::nmse(t, &r.hv_est).map(|(lin, _)| lin))
            .collect::<Result<_>>()?;
        Ok(estimation::aggregate_nmse(&linears, NmseAggregation::LinearMean))
    }
}

/// Gradient penalty value for a batch of mixed points, exposed for direct
/// verification: `mean_b (||grad_x D(x_b)|| - 1)^2`.
pub fn gradient_penalty(
    critic: &Critic,
    x_mix: &Array4<f64>,
    chi: Option<&[u8]>,
) -> Result<f64> {
    let (_, cache) = critic.forward_eval(x_mix, chi)?;
    let ones = Array1::ones(x_mix.dim().0);
    let (g, _) = critic.input_gradient(&cache, &ones);
    Ok(penalty_from_gradient(&g.slice(s![.., ..2, .., ..]).to_owned()).0)
}

/// Mean squared deviation of per-sample gradient norms from one, plus the
/// per-sample upstream tensor for the double-backward pass.
fn penalty_from_gradient(gx: &Array4<f64>) -> (f64, Array4<f64>) {
    let batch = gx.dim().0;
    let mut value = 0.0;
    let mut u = Array4::<f64>::zeros(gx.raw_dim());
    for b in 0..batch {
        let norm = gx
            .index_axis(Axis(0), b)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        value += (norm - 1.0) * (norm - 1.0);
        let scale = 2.0 * (norm - 1.0) / norm.max(1e-12) / batch as f64;
        let gb = gx.index_axis(Axis(0), b).to_owned() * scale;
        u.index_axis_mut(Axis(0), b).assign(&gb);
    }
    (value / batch as f64, u)
}

/// Loss values and parameter gradients of the critic objective on one batch
/// triple. Generator parameters are untouched; `x_gen` is data from the
/// critic's point of view.
pub fn critic_loss_and_grads<R: Rng + ?Sized>(
    critic: &mut Critic,
    x_gen: &Array4<f64>,
    x_real: &Array4<f64>,
    x_mix: &Array4<f64>,
    chi: Option<&[u8]>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(CriticStepStats, Vec<ArrayD<f64>>)> {
    let m = x_gen.dim().0 as f64;
    let (s_gen, cache_gen) = critic.forward_train(x_gen, chi, rng)?;
    let (s_real, cache_real) = critic.forward_train(x_real, chi, rng)?;
    let wasserstein = (s_gen.sum() - s_real.sum()) / m;

    let up_gen = Array1::from_elem(x_gen.dim().0, 1.0 / m);
    let up_real = Array1::from_elem(x_real.dim().0, -1.0 / m);
    let (mut grads, _) = critic.backward_params(&cache_gen, &up_gen, false);
    let (grads_real, _) = critic.backward_params(&cache_real, &up_real, false);
    for (a, b) in grads.iter_mut().zip(grads_real) {
        *a += &b;
    }

    let mut gp_value = 0.0;
    if cfg.use_gp {
        let (_, cache_mix) = critic.forward_train(x_mix, chi, rng)?;
        let ones = Array1::ones(x_mix.dim().0);
        let (g_full, trace) = critic.input_gradient(&cache_mix, &ones);
        let gx = g_full.slice(s![.., ..2, .., ..]).to_owned();
        let (value, u) = penalty_from_gradient(&gx);
        gp_value = value;
        let gp_grads = critic.gp_double_backward(&cache_mix, &trace, &u)?;
        for (a, b) in grads.iter_mut().zip(gp_grads) {
            *a += &b.mapv(|v| v * cfg.beta);
        }
    }

    let loss = wasserstein + cfg.beta * gp_value;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iter: 0,
            what: format!("critic loss {loss}"),
        });
    }
    Ok((
        CriticStepStats {
            loss,
            wasserstein,
            gp: gp_value,
        },
        grads,
    ))
}

/// One critic update (Wasserstein loss plus optional gradient penalty,
/// RMSProp step, clipping without the penalty).
pub fn update_critic<R: Rng + ?Sized>(
    critic: &mut Critic,
    opt: &mut RmsProp,
    x_gen: &Array4<f64>,
    x_real: &Array4<f64>,
    x_mix: &Array4<f64>,
    chi: Option<&[u8]>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<CriticStepStats> {
    let (stats, grads) = critic_loss_and_grads(critic, x_gen, x_real, x_mix, chi, cfg, rng)?;
    opt.step(&mut critic.params_mut(), &grads, cfg.gamma);
    if !cfg.use_gp {
        clip_params(&mut critic.params_mut(), cfg.tau);
    }
    Ok(stats)
}

/// One generator update on `-mean D(G(z) [+ shaped noise])`. The critic is
/// read-only apart from its dropout stream.
pub fn update_generator<R: Rng + ?Sized>(
    gen: &mut Generator,
    critic: &Critic,
    opt: &mut RmsProp,
    z: &Array2<f64>,
    chi: Option<&[u8]>,
    noise: Option<(&NoiseModel, &NormStats)>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<GenStepStats> {
    let m = z.nrows();
    let (out, gcache) = gen.forward_train(z, chi)?;
    let mut fake = out;
    if let Some((model, stats)) = noise {
        for b in 0..m {
            if let Some(t) = model.sample_tensor(stats, rng)? {
                let mut view = fake.index_axis_mut(Axis(0), b);
                view += &t;
            }
        }
    }
    // The critic is cloned for its forward pass: BN-free critics carry no
    // state, and the dropout stream continues through the shared rng.
    let mut critic_view = critic.clone();
    let (scores, ccache) = critic_view.forward_train(&fake, chi, rng)?;
    let loss = -scores.sum() / m as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iter: 0,
            what: format!("generator loss {loss}"),
        });
    }
    let upstream = Array1::from_elem(m, -1.0 / m as f64);
    let (dx_full, _) = critic_view.input_gradient(&ccache, &upstream);
    let dout = dx_full.slice(s![.., ..2, .., ..]).to_owned();
    let (_, grads) = gen.backward(&gcache, &dout);
    opt.step(&mut gen.params_mut(), &grads, cfg.gamma);
    Ok(GenStepStats { loss })
}

/// Training-data bundle consumed by the shared engine.
pub(crate) struct GanCore<'a> {
    pub tensors: &'a [Array3<f64>],
    pub labels: Option<&'a [u8]>,
    pub stats: &'a NormStats,
    pub noise: Option<&'a NoiseModel>,
}

impl<'a> GanCore<'a> {
    fn batch_dims(&self) -> (usize, usize) {
        let d = self.tensors[0].dim();
        (d.1, d.2)
    }

    /// Stack a minibatch of real samples (and their labels) by index.
    fn real_batch(&self, idx: &[usize]) -> (Array4<f64>, Option<Vec<u8>>) {
        let (n_t, n_r) = self.batch_dims();
        let mut x = Array4::zeros((idx.len(), 2, n_t, n_r));
        for (b, &i) in idx.iter().enumerate() {
            x.index_axis_mut(Axis(0), b).assign(&self.tensors[i]);
        }
        let labels = self
            .labels
            .map(|l| idx.iter().map(|&i| l[i]).collect::<Vec<u8>>());
        (x, labels)
    }

    /// Generator samples for the critic step (treated as data).
    fn fake_batch<R: Rng + ?Sized>(
        &self,
        gen: &mut Generator,
        m: usize,
        chi: Option<&[u8]>,
        rng: &mut R,
    ) -> Result<Array4<f64>> {
        let d = gen.spec.latent_dim;
        let z = Array2::from_shape_fn((m, d), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let (out, _) = gen.forward_train(&z, chi)?;
        let mut fake = out;
        if let Some(model) = self.noise {
            for b in 0..m {
                if let Some(t) = model.sample_tensor(self.stats, rng)? {
                    let mut view = fake.index_axis_mut(Axis(0), b);
                    view += &t;
                }
            }
        }
        Ok(fake)
    }

    /// One critic iteration: sample real/fake/mixed batches and update.
    pub(crate) fn critic_iteration<R: Rng + ?Sized>(
        &self,
        gen: &mut Generator,
        critic: &mut Critic,
        opt: &mut RmsProp,
        batch: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<CriticStepStats> {
        let n = self.tensors.len();
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let (x_real, labels) = self.real_batch(&idx);
        let x_gen = self.fake_batch(gen, batch, labels.as_deref(), rng)?;
        let mut x_mix = Array4::zeros(x_real.raw_dim());
        for b in 0..batch {
            let eps: f64 = rng.random();
            let mixed = x_real.index_axis(Axis(0), b).mapv(|v| eps * v)
                + x_gen.index_axis(Axis(0), b).mapv(|v| (1.0 - eps) * v);
            x_mix.index_axis_mut(Axis(0), b).assign(&mixed);
        }
        update_critic(
            critic,
            opt,
            &x_gen,
            &x_real,
            &x_mix,
            labels.as_deref(),
            cfg,
            rng,
        )
    }

    /// One generator iteration; conditions are Bernoulli(1/2) when the
    /// networks are conditional.
    pub(crate) fn generator_iteration<R: Rng + ?Sized>(
        &self,
        gen: &mut Generator,
        critic: &Critic,
        opt: &mut RmsProp,
        batch: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<GenStepStats> {
        let d = gen.spec.latent_dim;
        let z = Array2::from_shape_fn((batch, d), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let chi: Option<Vec<u8>> = self
            .labels
            .is_some()
            .then(|| (0..batch).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect());
        update_generator(
            gen,
            critic,
            opt,
            &z,
            chi.as_deref(),
            self.noise.map(|n| (n, self.stats)),
            cfg,
            rng,
        )
    }
}

struct EngineInput<'a> {
    core: GanCore<'a>,
    validation: Option<&'a ValidationSet>,
}

fn run_engine(
    input: EngineInput<'_>,
    cfg: &TrainConfig,
    gen_spec: GeneratorSpec,
    critic_spec: CriticSpec,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if input.core.tensors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if gen_spec.conditional != input.core.labels.is_some()
        || critic_spec.conditional != input.core.labels.is_some()
    {
        return Err(Error::Config(
            "conditional specs require labeled data and vice versa".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::init(gen_spec, &mut rng)?;
    let mut critic = Critic::init(critic_spec, &mut rng)?;
    let mut opt_g = RmsProp::new_for(&gen.params());
    let mut opt_d = RmsProp::new_for(&critic.params());

    let mut log = Vec::with_capacity(cfg.total_iterations);
    let mut trail: Vec<CheckpointRecord> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut diverged_at = None;

    let score = |gen: &Generator, stats: &NormStats, iter: usize| -> Result<Option<f64>> {
        match input.validation {
            None => Ok(None),
            Some(v) => {
                let wrapped = NormalizedGenerator {
                    net: gen.clone(),
                    stats: stats.clone(),
                };
                Ok(Some(v.score(&wrapped, cfg.seed ^ (iter as u64) ^ 0x5eed)?))
            }
        }
    };

    'outer: for iter in 0..cfg.total_iterations {
        let mut wass_acc = 0.0;
        let mut gp_acc = 0.0;
        for _ in 0..cfg.n_d {
            match input
                .core
                .critic_iteration(&mut gen, &mut critic, &mut opt_d, cfg.m, cfg, &mut rng)
            {
                Ok(stats) => {
                    wass_acc += stats.wasserstein;
                    gp_acc += stats.gp;
                }
                Err(Error::Diverged { what, .. }) => {
                    diverged_at = Some(iter);
                    rollback(&mut gen, &trail);
                    log.push(IterRecord {
                        iter,
                        loss_d: f64::NAN,
                        loss_g: f64::NAN,
                        gp: f64::NAN,
                        val_nmse_db: None,
                    });
                    eprintln!("training diverged at iteration {iter}: {what}");
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let gen_stats = match input
            .core
            .generator_iteration(&mut gen, &critic, &mut opt_g, cfg.m, cfg, &mut rng)
        {
            Ok(s) => s,
            Err(Error::Diverged { what, .. }) => {
                diverged_at = Some(iter);
                rollback(&mut gen, &trail);
                eprintln!("training diverged at iteration {iter}: {what}");
                break 'outer;
            }
            Err(e) => return Err(e),
        };
        if cfg.reset_critic_optimizer {
            opt_d.reset();
        }

        let mut val = None;
        let last = iter + 1 == cfg.total_iterations;
        if cfg.checkpoint_every > 0 && ((iter + 1) % cfg.checkpoint_every == 0 || last) {
            val = score(&gen, input.core.stats, iter)?;
            trail.push(CheckpointRecord {
                iter,
                val_nmse_db: val,
                generator: NetParams::of_generator(&gen),
            });
            if let Some(v) = val {
                if best.map_or(true, |(_, b)| v < b) {
                    best = Some((trail.len() - 1, v));
                }
            }
        }
        log.push(IterRecord {
            iter,
            loss_d: wass_acc / cfg.n_d as f64 + cfg.beta * gp_acc / cfg.n_d as f64,
            loss_g: gen_stats.loss,
            gp: gp_acc / cfg.n_d as f64,
            val_nmse_db: val,
        });
    }

    let stats = input.core.stats.clone();
    let best_generator = match best {
        Some((ckpt_idx, _)) => {
            let mut g = Generator::init(gen_spec, &mut ChaCha12Rng::seed_from_u64(0))?;
            trail[ckpt_idx].generator.load_into_generator(&mut g)?;
            NormalizedGenerator {
                net: g,
                stats: stats.clone(),
            }
        }
        None => NormalizedGenerator {
            net: gen.clone(),
            stats: stats.clone(),
        },
    };
    Ok(TrainOutput {
        generator: NormalizedGenerator { net: gen, stats },
        best_generator,
        critic,
        best_iter: best.map(|(i, _)| trail[i].iter).unwrap_or(
            trail.last().map(|c| c.iter).unwrap_or(0),
        ),
        best_val_nmse_db: best.map(|(_, v)| v),
        trail,
        log,
        diverged_at,
    })
}

fn rollback(gen: &mut Generator, trail: &[CheckpointRecord]) {
    if let Some(last) = trail.last() {
        let _ = last.generator.load_into_generator(gen);
    }
}

/// Train an unconditional WGAN / WGAN-GP on clean beamspace channels.
/// The last `cfg.validation_size` samples are held out for validation.
pub fn train_wgan(
    dataset: &[Array2<C64>],
    cfg: &TrainConfig,
    gen_spec: GeneratorSpec,
    critic_spec: CriticSpec,
) -> Result<TrainOutput> {
    let (train, val_targets) = split_validation(dataset, cfg.validation_size);
    let stats = compute_norm_stats(train)?;
    let tensors: Vec<Array3<f64>> = train
        .iter()
        .map(|hv| stats.normalize(hv))
        .collect::<Result<_>>()?;
    let arrays = ArrayConfig::new(stats.n_t(), stats.n_r());
    let validation = (!val_targets.is_empty())
        .then(|| {
            ValidationSet::build(
                val_targets.to_vec(),
                &arrays,
                cfg.validation_snr_db,
                cfg.seed ^ 0xda7a,
                false,
            )
        })
        .transpose()?;
    run_engine(
        EngineInput {
            core: GanCore {
                tensors: &tensors,
                labels: None,
                stats: &stats,
                noise: None,
            },
            validation: validation.as_ref(),
        },
        cfg,
        gen_spec,
        critic_spec,
    )
}

/// Train a conditional WGAN on labeled clean channels. Critic steps feed the
/// true labels; generator steps draw Bernoulli(1/2) conditions.
pub fn train_cwgan(
    dataset: &[(Array2<C64>, u8)],
    cfg: &TrainConfig,
    gen_spec: GeneratorSpec,
    critic_spec: CriticSpec,
) -> Result<TrainOutput> {
    let n_val = cfg.validation_size.min(dataset.len().saturating_sub(1));
    let split = dataset.len() - n_val;
    let (train, val) = dataset.split_at(split);
    let channels: Vec<Array2<C64>> = train.iter().map(|(hv, _)| hv.clone()).collect();
    let labels: Vec<u8> = train.iter().map(|(_, l)| *l).collect();
    let stats = compute_norm_stats(&channels)?;
    let tensors: Vec<Array3<f64>> = channels
        .iter()
        .map(|hv| stats.normalize(hv))
        .collect::<Result<_>>()?;
    let arrays = ArrayConfig::new(stats.n_t(), stats.n_r());
    let validation = (!val.is_empty())
        .then(|| {
            ValidationSet::build(
                val.iter().map(|(hv, _)| hv.clone()).collect(),
                &arrays,
                cfg.validation_snr_db,
                cfg.seed ^ 0xda7a,
                true,
            )
        })
        .transpose()?;
    run_engine(
        EngineInput {
            core: GanCore {
                tensors: &tensors,
                labels: Some(&labels),
                stats: &stats,
                noise: None,
            },
            validation: validation.as_ref(),
        },
        cfg,
        gen_spec,
        critic_spec,
    )
}

/// Prepared pilot training data shared by the pilot GAN variants.
struct PilotData {
    tensors: Vec<Array3<f64>>,
    stats: NormStats,
    noise: Option<NoiseModel>,
    validation: Option<ValidationSet>,
}

fn prepare_pilot_data(
    ls: &LsDataset,
    cfg: &TrainConfig,
    conditional_validation: bool,
) -> Result<PilotData> {
    if !ls.full_rank {
        return Err(Error::RankDeficient {
            rank: 0,
            required: ls.arrays.n_t * ls.arrays.n_r,
        });
    }
    if ls.hv_ls.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_len = ls.hv_ls.len() - cfg.validation_size.min(ls.hv_ls.len() - 1);
    let stats = compute_norm_stats(&ls.hv_ls[..train_len])?;
    let tensors: Vec<Array3<f64>> = ls.hv_ls[..train_len]
        .iter()
        .map(|hv| stats.normalize(hv))
        .collect::<Result<_>>()?;
    let sigma = cfg.snr_db.map_or_else(|| ls.sigma(), |snr| {
        PilotConfig {
            snr_db: snr,
            ..ls.pilot
        }
        .sigma()
    });
    let noise = (sigma > 0.0).then(|| match &ls.sigma_half_per_sample {
        Some(halves) => NoiseModel::PerSample {
            sigma_halves: halves.clone(),
            sigma,
        },
        None => NoiseModel::Fixed {
            sigma_half: ls.sigma_half.clone(),
            sigma,
        },
    });
    // Validation targets are the simulator's ground-truth channels: NMSE is
    // an oracle metric available because the data is synthetic.
    let validation = (train_len < ls.hv_true.len())
        .then(|| {
            ValidationSet::build(
                ls.hv_true[train_len..].to_vec(),
                &ls.arrays,
                cfg.validation_snr_db,
                cfg.seed ^ 0xda7a,
                conditional_validation,
            )
        })
        .transpose()?;
    Ok(PilotData {
        tensors,
        stats,
        noise,
        validation,
    })
}

/// Train an unconditional GAN from noisy full-rank LS channel estimates:
/// the critic sees real LS estimates versus generator outputs corrupted with
/// noise of the identical shaped covariance. At zero noise this degenerates
/// exactly to [`train_wgan`] on the clean channels.
pub fn train_pilot_gan(
    ls: &LsDataset,
    cfg: &TrainConfig,
    gen_spec: GeneratorSpec,
    critic_spec: CriticSpec,
) -> Result<TrainOutput> {
    let data = prepare_pilot_data(ls, cfg, false)?;
    run_engine(
        EngineInput {
            core: GanCore {
                tensors: &data.tensors,
                labels: None,
                stats: &data.stats,
                noise: data.noise.as_ref(),
            },
            validation: data.validation.as_ref(),
        },
        cfg,
        gen_spec,
        critic_spec,
    )
}

/// Train the pilot-conditional GAN: conditions for the critic steps come
/// from a trained LOS predictor applied to each real LS estimate; generator
/// steps draw Bernoulli(1/2) conditions and add the shaped noise.
pub fn train_pcgan(
    ls: &LsDataset,
    predictor: &LosPredictor,
    cfg: &TrainConfig,
    gen_spec: GeneratorSpec,
    critic_spec: CriticSpec,
) -> Result<TrainOutput> {
    let data = prepare_pilot_data(ls, cfg, true)?;
    // Condition labels through the predictor (deterministic in eval mode).
    let train_len = data.tensors.len();
    let probs = predictor.predict_proba_batch(&ls.hv_ls[..train_len])?;
    let labels: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    run_engine(
        EngineInput {
            core: GanCore {
                tensors: &data.tensors,
                labels: Some(&labels),
                stats: &data.stats,
                noise: data.noise.as_ref(),
            },
            validation: data.validation.as_ref(),
        },
        cfg,
        gen_spec,
        critic_spec,
    )
}

fn split_validation<T>(items: &[T], n_val: usize) -> (&[T], &[T]) {
    let n_val = n_val.min(items.len().saturating_sub(1));
    items.split_at(items.len() - n_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channel, ChannelProfile};
    use approx::assert_relative_eq;

    fn desk_dataset(n: usize, seed: u64) -> Vec<Array2<C64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let profile = ChannelProfile {
            name: "toy-los".into(),
            n_clusters: 1,
            rays_per_cluster: 4,
            los: true,
            rician_k_db: 15.0,
            angle_spread_deg: 1.0,
            per_cluster_power_decay_db: 0.0,
        };
        let arrays = ArrayConfig::desk();
        (0..n)
            .map(|_| sample_channel(&profile, &arrays, &mut rng).unwrap().h_beamspace)
            .collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            n_d: 2,
            m: 8,
            total_iterations: 3,
            checkpoint_every: 2,
            validation_size: 4,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn gradient_penalty_known_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = Array4::from_shape_fn((4, 2, 16, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });

        // Constant critic: all-zero weights give gradient norm 0, penalty 1.
        let mut c = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
        for mut p in c.params_mut() {
            p.fill(0.0);
        }
        let gp = gradient_penalty(&c, &x, None).unwrap();
        assert_relative_eq!(gp, 1.0, epsilon = 1e-12);

        // A critic built to be linear with unit input-gradient norm:
        // keep only the final linear layer active is impossible through the
        // convs, so instead verify against the definition numerically.
        let c = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
        let (_, cache) = c.forward_eval(&x, None).unwrap();
        let ones = Array1::ones(4);
        let (g, _) = c.input_gradient(&cache, &ones);
        let want: f64 = (0..4)
            .map(|b| {
                let n = g
                    .index_axis(Axis(0), b)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                (n - 1.0) * (n - 1.0)
            })
            .sum::<f64>()
            / 4.0;
        let got = gradient_penalty(&c, &x, None).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn clipping_holds_after_every_critic_update() {
        let dataset = desk_dataset(32, 2);
        let stats = compute_norm_stats(&dataset).unwrap();
        let tensors: Vec<Array3<f64>> = dataset.iter().map(|h| stats.normalize(h).unwrap()).collect();
        let core = GanCore {
            tensors: &tensors,
            labels: None,
            stats: &stats,
            noise: None,
        };
        let cfg = TrainConfig {
            use_gp: false,
            ..tiny_cfg()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut gen = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
        let mut critic = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
        let mut opt = RmsProp::new_for(&critic.params());
        for _ in 0..4 {
            core.critic_iteration(&mut gen, &mut critic, &mut opt, cfg.m, &cfg, &mut rng)
                .unwrap();
            assert!(crate::nn::max_abs_param(&critic.params()) <= cfg.tau + 1e-15);
        }
    }

    #[test]
    fn identical_batches_zero_wasserstein_term() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut critic = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
        let mut opt = RmsProp::new_for(&critic.params());
        let x = Array4::from_shape_fn((6, 2, 16, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let cfg = TrainConfig {
            use_gp: false,
            ..tiny_cfg()
        };
        // Dropout must agree between the two forwards for exact cancellation,
        // so disable it for this contract check.
        critic.spec.dropout = 0.0;
        let stats = update_critic(&mut critic, &mut opt, &x, &x, &x, None, &cfg, &mut rng).unwrap();
        assert!(stats.wasserstein.abs() < 1e-12);
    }

    #[test]
    fn critic_update_descends_loss_for_small_steps() {
        // Descent-direction oracle: a tiny RMSProp step must reduce the
        // critic loss on a fixed batch for nearly every seed.
        let mut ok = 0;
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
            let mut critic = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
            critic.spec.dropout = 0.0; // deterministic loss
            // Freshly initialized critics sit where the penalty's curvature
            // in the input-gradient norm is enormous (norms near zero);
            // scale the weights so the probe runs in the smooth region the
            // training loop actually occupies.
            for mut p in critic.params_mut() {
                p.mapv_inplace(|v| v * 3.0);
            }
            let x_real = Array4::from_shape_fn((8, 2, 16, 4), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let x_gen = Array4::from_shape_fn((8, 2, 16, 4), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
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
                let w = (sg.sum() - sr.sum()) / 8.0;
                w + 10.0 * gradient_penalty(c, &x_mix, None).unwrap()
            };
            let before = loss_of(&critic);
            let cfg = TrainConfig {
                gamma: 1e-6,
                use_gp: true,
                ..tiny_cfg()
            };
            let mut opt = RmsProp::new_for(&critic.params());
            update_critic(
                &mut critic,
                &mut opt,
                &x_gen,
                &x_real,
                &x_mix,
                None,
                &cfg,
                &mut rng,
            )
            .unwrap();
            let after = loss_of(&critic);
            if after < before {
                ok += 1;
            }
        }
        assert!(ok >= 18, "descent in only {ok}/20 seeds");
    }

    #[test]
    fn generator_update_descends_and_leaves_critic_alone() {
        let mut ok = 0;
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(200 + seed);
            let mut gen = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
            let mut critic = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
            critic.spec.dropout = 0.0;
            let z = Array2::from_shape_fn((8, 24), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let critic_snapshot = NetParams::of_critic(&critic);
            let loss_of = |g: &Generator| -> f64 {
                let (out, _, _stats) = {
                    // eval-mode forward uses running statistics; training uses
                    // batch stats, so mirror the training path via a clone.
                    let mut gg = g.clone();
                    let (o, c) = gg.forward_train(&z, None).unwrap();
                    (o, c, ())
                };
                let (s, _) = critic.forward_eval(&out, None).unwrap();
                -s.sum() / 8.0
            };
            let before = loss_of(&gen);
            let cfg = TrainConfig {
                gamma: 1e-6,
                ..tiny_cfg()
            };
            let mut opt = RmsProp::new_for(&gen.params());
            update_generator(&mut gen, &critic, &mut opt, &z, None, None, &cfg, &mut rng).unwrap();
            let after = loss_of(&gen);
            if after < before {
                ok += 1;
            }
            assert_eq!(NetParams::of_critic(&critic), critic_snapshot);
        }
        assert!(ok >= 18, "descent in only {ok}/20 seeds");
    }

    #[test]
    fn generator_update_is_noop_under_constant_critic() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut gen = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
        let mut critic = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
        for mut p in critic.params_mut() {
            p.fill(0.0);
        }
        critic.spec.dropout = 0.0;
        let before = NetParams::of_generator(&gen);
        let z = Array2::from_shape_fn((4, 24), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let cfg = tiny_cfg();
        let mut opt = RmsProp::new_for(&gen.params());
        update_generator(&mut gen, &critic, &mut opt, &z, None, None, &cfg, &mut rng).unwrap();
        // All gradients are exactly zero, so parameters are bit-identical
        // (batch-norm running buffers do move; they are not parameters).
        assert_eq!(NetParams::of_generator(&gen).params, before.params);
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let dataset = desk_dataset(16, 6);
        let cfg = TrainConfig {
            total_iterations: 0,
            validation_size: 4,
            ..tiny_cfg()
        };
        let out = train_wgan(
            &dataset,
            &cfg,
            GeneratorSpec::desk(false),
            CriticSpec::desk(false),
        )
        .unwrap();
        // Matches an independently seeded initialization.
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let g0 = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
        assert_eq!(
            NetParams::of_generator(&out.generator.net).params,
            NetParams::of_generator(&g0).params
        );
        assert!(out.log.is_empty());
    }

    #[test]
    fn short_runs_are_seed_deterministic() {
        let dataset = desk_dataset(24, 7);
        let cfg = tiny_cfg();
        let a = train_wgan(
            &dataset,
            &cfg,
            GeneratorSpec::desk(false),
            CriticSpec::desk(false),
        )
        .unwrap();
        let b = train_wgan(
            &dataset,
            &cfg,
            GeneratorSpec::desk(false),
            CriticSpec::desk(false),
        )
        .unwrap();
        assert_eq!(
            NetParams::of_generator(&a.generator.net),
            NetParams::of_generator(&b.generator.net)
        );
        assert_eq!(
            NetParams::of_critic(&a.critic),
            NetParams::of_critic(&b.critic)
        );
        // Reset option changes numbers but not shapes/cadence.
        let cfg_reset = TrainConfig {
            reset_critic_optimizer: true,
            ..cfg
        };
        let c = train_wgan(
            &dataset,
            &cfg_reset,
            GeneratorSpec::desk(false),
            CriticSpec::desk(false),
        )
        .unwrap();
        assert_eq!(a.trail.len(), c.trail.len());
        assert_eq!(a.log.len(), c.log.len());
    }

    #[test]
    fn cwgan_runs_and_balances_generator_labels() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let arrays = ArrayConfig::desk();
        let los = ChannelProfile {
            name: "los".into(),
            n_clusters: 1,
            rays_per_cluster: 4,
            los: true,
            rician_k_db: 15.0,
            angle_spread_deg: 1.0,
            per_cluster_power_decay_db: 0.0,
        };
        let nlos = ChannelProfile {
            name: "nlos".into(),
            n_clusters: 8,
            rays_per_cluster: 8,
            los: false,
            rician_k_db: 0.0,
            angle_spread_deg: 6.0,
            per_cluster_power_decay_db: 0.5,
        };
        let mut dataset = Vec::new();
        for i in 0..24 {
            let p = if i % 2 == 0 { &los } else { &nlos };
            let ch = sample_channel(p, &arrays, &mut rng).unwrap();
            dataset.push((ch.h_beamspace, ch.los_label));
        }
        let out = train_cwgan(
            &dataset,
            &tiny_cfg(),
            GeneratorSpec::desk(true),
            CriticSpec::desk(true),
        )
        .unwrap();
        assert!(out.diverged_at.is_none());

        // Bernoulli(1/2) generator-step labels concentrate near half.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut mean = 0.0;
        for _ in 0..100 {
            let batch: Vec<u8> = (0..200)
                .map(|_| u8::from(rng.random::<f64>() < 0.5))
                .collect();
            mean += batch.iter().map(|&b| b as f64).sum::<f64>() / 200.0;
        }
        mean /= 100.0;
        assert!((0.4..=0.6).contains(&mean));
    }

    #[test]
    fn generator_forward_modes_update_running_stats() {
        // Training forwards move batch-norm running buffers; eval does not.
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut gen = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
        let z = Array2::from_shape_fn((8, 24), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let before: Vec<ArrayD<f64>> = gen.buffers().iter().map(|b| b.to_owned()).collect();
        let _ = gen.forward_eval(&z, None).unwrap();
        let mid: Vec<ArrayD<f64>> = gen.buffers().iter().map(|b| b.to_owned()).collect();
        assert_eq!(before, mid);
        let _ = gen.forward_train(&z, None).unwrap();
        let after: Vec<ArrayD<f64>> = gen.buffers().iter().map(|b| b.to_owned()).collect();
        assert_ne!(before, after);
    }
}
