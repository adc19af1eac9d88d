//! Federated pilot-GAN training: critics train locally at each UE on that
//! UE's noisy LS channel estimates, the server averages critic weights and
//! trains the generator centrally.
//!
//! Per round, each of `l` training iterations performs
//!
//! 1. broadcast of generator and critic weights to all UEs,
//! 2. `n_d` local critic updates per UE on `m/U` minibatches,
//! 3. uplink of every UE's critic weights and element-wise averaging,
//! 4. one or more central generator updates with shaped-noise samples.
//!
//! Links are modeled with a fixed large-scale path loss per UE; transmission
//! of the federated updates themselves is assumed error-free. With a single
//! UE and a fixed dataset the loop degenerates, update for update and random
//! draw for random draw, to centralized pilot-GAN training.

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_channel, ArrayConfig, ChannelProfile, ChannelRealization, NormStats};
use crate::dataset::LsDataset;
use crate::error::{Error, Result};
use crate::nn::{Critic, CriticSpec, Generator, GeneratorSpec, NetParams, NormalizedGenerator};
use crate::training::{GanCore, NoiseModel, RmsProp, TrainConfig, ValidationSet};

/// Downlink/uplink budget for the pilot measurements at each UE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub tx_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    /// Carrier frequency used by the indoor-office path-loss formula.
    pub fc_ghz: f64,
    pub ue_distances_m: Vec<f64>,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            tx_power_dbm: 23.0,
            noise_psd_dbm_hz: -174.0,
            bandwidth_hz: 20e6,
            noise_figure_db: 9.0,
            fc_ghz: 40.0,
            // Four UEs spread uniformly over 10..50 m.
            ue_distances_m: vec![10.0, 10.0 + 40.0 / 3.0, 10.0 + 80.0 / 3.0, 50.0],
        }
    }
}

/// Indoor-office line-of-sight path loss in dB:
/// `PL = 32.4 + 17.3 log10(d) + 20 log10(fc)`, `d` in meters, `fc` in GHz.
pub fn inh_office_pathloss_db(distance_m: f64, fc_ghz: f64) -> f64 {
    32.4 + 17.3 * distance_m.log10() + 20.0 * fc_ghz.log10()
}

/// Link SNR: transmit power minus path loss minus the thermal noise floor
/// (`noise PSD + 10 log10(bandwidth) + noise figure`).
pub fn link_snr(link: &LinkBudget, distance_m: f64) -> Result<f64> {
    if distance_m <= 0.0 {
        return Err(Error::Config("UE distance must be positive".into()));
    }
    let noise_floor_dbm = link.noise_psd_dbm_hz
        + 10.0 * link.bandwidth_hz.log10()
        + link.noise_figure_db;
    Ok(link.tx_power_dbm - inh_office_pathloss_db(distance_m, link.fc_ghz) - noise_floor_dbm)
}

/// Element-wise arithmetic mean of per-UE critic parameters, written into
/// `master`.
pub fn average_critic_weights(master: &mut Critic, ues: &[Critic]) -> Result<()> {
    if ues.is_empty() {
        return Err(Error::Config("no critics to average".into()));
    }
    let mut master_params = master.params_mut();
    let ue_params: Vec<Vec<ArrayViewD<'_, f64>>> = ues.iter().map(|c| c.params()).collect();
    for p in &ue_params {
        if p.len() != master_params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameter tensors", master_params.len()),
                got: format!("{}", p.len()),
            });
        }
    }
    let scale = 1.0 / ues.len() as f64;
    for (i, dst) in master_params.iter_mut().enumerate() {
        for p in &ue_params {
            if p[i].shape() != dst.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", dst.shape()),
                    got: format!("{:?}", p[i].shape()),
                });
            }
        }
        dst.fill(0.0);
        for p in &ue_params {
            dst.zip_mut_with(&p[i], |d, &s| *d += s);
        }
        dst.mapv_inplace(|v| v * scale);
    }
    Ok(())
}

/// Federated simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Number of UEs.
    pub u: usize,
    /// Per-UE dataset size accumulated each round.
    pub d_local: usize,
    pub rounds: usize,
    /// Training iterations per round.
    pub l: usize,
    /// Central generator updates per training iteration (raised to 4 when
    /// n_d is raised to 20 so total update counts stay comparable).
    pub gen_updates_per_iter: usize,
    /// Keep the UE datasets drawn in round 0 instead of refreshing each
    /// round.
    pub fixed_datasets: bool,
    pub link: LinkBudget,
    /// Bypass the link budget with one SNR for every UE
    /// (`f64::INFINITY` for clean estimates).
    pub snr_override_db: Option<f64>,
    /// Validation cadence in rounds (0 disables validation).
    pub val_every_rounds: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            u: 4,
            d_local: 500,
            rounds: 600,
            l: 100,
            gen_updates_per_iter: 1,
            fixed_datasets: false,
            link: LinkBudget::default(),
            snr_override_db: None,
            val_every_rounds: 10,
        }
    }
}

/// Per-round record of losses, link quality and communication accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub ue_snr_db: Vec<f64>,
    /// Mean critic loss per UE over this round's local updates.
    pub ue_critic_loss: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nmse_db: Option<f64>,
    /// Parameters sent UE->BS this round (l uplinks x U UEs x critic size).
    pub uplink_params: usize,
    /// Parameters sent BS->UE this round
    /// (l broadcasts x U UEs x (critic + generator size)).
    pub downlink_params: usize,
    pub cumulative_uplink_params: usize,
    pub cumulative_downlink_params: usize,
}

#[derive(Debug, Clone)]
pub struct FedOutput {
    pub generator: NormalizedGenerator,
    pub best_generator: NormalizedGenerator,
    pub critic: Critic,
    pub rounds: Vec<RoundRecord>,
    pub best_val_nmse_db: Option<f64>,
    pub diverged_at_round: Option<usize>,
}

/// Inputs for one federated run. UE datasets may be supplied explicitly
///fixed (the deterministic-equivalence path) or drawn from a channel
/// profile each round.
pub enum FedData<'a> {
    /// Each UE re-accumulates `d_local` LS estimates per round by sampling
    /// channels from this profile and measuring at its link SNR.
    Simulate {
        profile: &'a ChannelProfile,
        arrays: &'a ArrayConfig,
        pilot: &'a crate::measurement::PilotConfig,
    },
    /// Fixed per-UE datasets (requires `fixed_datasets`).
    Datasets(&'a [LsDataset]),
}

/// Run the federated pilot-GAN simulation.
pub fn run_federated_training(
    fed: &FedConfig,
    cfg: &TrainConfig,
    gen_spec: GeneratorSpec,
    critic_spec: CriticSpec,
    data: FedData<'_>,
    validation: Option<&ValidationSet>,
) -> Result<FedOutput> {
    cfg.validate()?;
    if fed.u == 0 {
        return Err(Error::Config("need at least one UE".into()));
    }
    if cfg.m % fed.u != 0 {
        return Err(Error::Config(format!(
            "batch size {} is not divisible by {} UEs",
            cfg.m, fed.u
        )));
    }
    let ue_snrs: Vec<f64> = match fed.snr_override_db {
        Some(snr) => vec![snr; fed.u],
        None => {
            if fed.link.ue_distances_m.len() < fed.u {
                return Err(Error::Config(
                    "link budget needs one distance per UE".into(),
                ));
            }
            fed.link.ue_distances_m[..fed.u]
                .iter()
                .map(|&d| link_snr(&fed.link, d))
                .collect::<Result<_>>()?
        }
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::init(gen_spec, &mut rng)?;
    let mut critic = Critic::init(critic_spec, &mut rng)?;
    let mut opt_g = RmsProp::new_for(&gen.params());
    // Per-UE critic optimizer state persists across rounds at the UE.
    let mut ue_opts: Vec<RmsProp> = (0..fed.u).map(|_| RmsProp::new_for(&critic.params())).collect();

    // Accumulate one dataset per UE; refreshed per round unless fixed.
    let mut ue_data: Vec<UeData> = Vec::new();
    let mut stats: Option<NormStats> = None;

    let gen_size = gen.parameter_count();
    let critic_size = critic.parameter_count();
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut best: Option<(NetParams, f64)> = None;
    let mut cum_up = 0usize;
    let mut cum_down = 0usize;
    let mut diverged_at_round = None;

    'rounds: for round in 0..fed.rounds {
        // UE u accumulates d_local LS channel estimates.
        if ue_data.is_empty() || !fed.fixed_datasets {
            ue_data = accumulate(&data, fed, cfg, &ue_snrs, &mut rng, &mut ue_data)?;
        }
        if stats.is_none() {
            // Normalization statistics from the union of the first round's
            // datasets; an over-the-air system would accumulate these the
            // same way it accumulates the estimates themselves.
            let all: Vec<Array2<crate::linalg::C64>> = ue_data
                .iter()
                .flat_map(|d| d.hv_ls.iter().cloned())
                .collect();
            stats = Some(crate::channel::compute_norm_stats(&all)?);
            for d in &mut ue_data {
                d.make_tensors(stats.as_ref().unwrap())?;
            }
        } else if !fed.fixed_datasets {
            for d in &mut ue_data {
                d.make_tensors(stats.as_ref().unwrap())?;
            }
        }
        let stats_ref = stats.as_ref().unwrap();

        // Mean noise level across UEs drives the central generator noise.
        let sigma_mean =
            ue_data.iter().map(|d| d.sigma).sum::<f64>() / ue_data.len() as f64;
        let central_noise = (sigma_mean > 0.0).then(|| NoiseModel::Fixed {
            sigma_half: ue_data[0].sigma_half.clone(),
            sigma: sigma_mean,
        });

        let mut ue_loss_acc = vec![0.0f64; fed.u];
        let mut ue_loss_n = 0usize;
        for _iter in 0..fed.l {
            // Broadcast theta_g and theta_d to all UEs (accounting only; the
            // weights are handed over by cloning below).
            cum_down += fed.u * (gen_size + critic_size);

            let mut ue_critics: Vec<Critic> = Vec::with_capacity(fed.u);
            for (u, dataset) in ue_data.iter().enumerate() {
                let mut local = critic.clone();
                let noise = (dataset.sigma > 0.0).then(|| NoiseModel::Fixed {
                    sigma_half: dataset.sigma_half.clone(),
                    sigma: dataset.sigma,
                });
                let core = GanCore {
                    tensors: &dataset.tensors,
                    labels: None,
                    stats: stats_ref,
                    noise: noise.as_ref(),
                };
                for _ in 0..cfg.n_d {
                    match core.critic_iteration(
                        &mut gen,
                        &mut local,
                        &mut ue_opts[u],
                        cfg.m / fed.u,
                        cfg,
                        &mut rng,
                    ) {
                        Ok(s) => ue_loss_acc[u] += s.loss,
                        Err(Error::Diverged { what, .. }) => {
                            eprintln!("federated training diverged in round {round}: {what}");
                            diverged_at_round = Some(round);
                            break 'rounds;
                        }
                        Err(e) => return Err(e),
                    }
                }
                // UE u sends its critic weights uplink.
                cum_up += critic_size;
                ue_critics.push(local);
            }
            ue_loss_n += cfg.n_d;
            average_critic_weights(&mut critic, &ue_critics)?;

            let core = GanCore {
                tensors: &ue_data[0].tensors,
                labels: None,
                stats: stats_ref,
                noise: central_noise.as_ref(),
            };
            for _ in 0..fed.gen_updates_per_iter {
                match core.generator_iteration(&mut gen, &critic, &mut opt_g, cfg.m, cfg, &mut rng)
                {
                    Ok(_) => {}
                    Err(Error::Diverged { what, .. }) => {
                        eprintln!("federated training diverged in round {round}: {what}");
                        diverged_at_round = Some(round);
                        break 'rounds;
                    }
                    Err(e) => return Err(e),
                }
            }
            if cfg.reset_critic_optimizer {
                for opt in &mut ue_opts {
                    opt.reset();
                }
            }
        }

        let val = match validation {
            Some(v)
                if fed.val_every_rounds > 0
                    && (round % fed.val_every_rounds == 0 || round + 1 == fed.rounds) =>
            {
                let wrapped = NormalizedGenerator {
                    net: gen.clone(),
                    stats: stats_ref.clone(),
                };
                let score = v.score(&wrapped, cfg.seed ^ (round as u64) ^ 0xfed)?;
                if best.as_ref().map_or(true, |(_, b)| score < *b) {
                    best = Some((NetParams::of_generator(&gen), score));
                }
                Some(score)
            }
            _ => None,
        };

        let up_this_round = fed.l * fed.u * critic_size;
        let down_this_round = fed.l * fed.u * (gen_size + critic_size);
        records.push(RoundRecord {
            round,
            ue_snr_db: ue_snrs.clone(),
            ue_critic_loss: ue_loss_acc
                .iter()
                .map(|&l| l / ue_loss_n.max(1) as f64)
                .collect(),
            val_nmse_db: val,
            uplink_params: up_this_round,
            downlink_params: down_this_round,
            cumulative_uplink_params: cum_up,
            cumulative_downlink_params: cum_down,
        });
    }

    let stats = stats.ok_or(Error::EmptyDataset)?;
    let best_generator = match &best {
        Some((params, _)) => {
            let mut g = Generator::init(gen_spec, &mut ChaCha12Rng::seed_from_u64(0))?;
            params.load_into_generator(&mut g)?;
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
    Ok(FedOutput {
        generator: NormalizedGenerator { net: gen, stats },
        best_generator,
        critic,
        rounds: records,
        best_val_nmse_db: best.map(|(_, v)| v),
        diverged_at_round,
    })
}

struct UeData {
    hv_ls: Vec<Array2<crate::linalg::C64>>,
    tensors: Vec<Array3<f64>>,
    sigma_half: Array2<crate::linalg::C64>,
    sigma: f64,
}

impl UeData {
    fn make_tensors(&mut self, stats: &NormStats) -> Result<()> {
        self.tensors = self
            .hv_ls
            .iter()
            .map(|hv| stats.normalize(hv))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

fn accumulate(
    data: &FedData<'_>,
    fed: &FedConfig,
    cfg: &TrainConfig,
    ue_snrs: &[f64],
    rng: &mut ChaCha12Rng,
    previous: &mut Vec<UeData>,
) -> Result<Vec<UeData>> {
    match data {
        FedData::Datasets(sets) => {
            if !previous.is_empty() {
                return Ok(std::mem::take(previous));
            }
            if sets.len() < fed.u {
                return Err(Error::Config("need one dataset per UE".into()));
            }
            if !fed.fixed_datasets {
                return Err(Error::Config(
                    "explicit datasets require fixed_datasets".into(),
                ));
            }
            Ok(sets[..fed.u]
                .iter()
                .map(|s| UeData {
                    hv_ls: s.hv_ls.clone(),
                    tensors: Vec::new(),
                    sigma_half: s.sigma_half.clone(),
                    sigma: s.sigma(),
                })
                .collect())
        }
        FedData::Simulate {
            profile,
            arrays,
            pilot,
        } => {
            let mut out = Vec::with_capacity(fed.u);
            for &snr in ue_snrs.iter().take(fed.u) {
                let pilot_u = crate::measurement::PilotConfig {
                    snr_db: snr,
                    ..**pilot
                };
                let channels: Vec<ChannelRealization> = (0..fed.d_local)
                    .map(|_| sample_channel(profile, arrays, rng))
                    .collect::<Result<_>>()?;
                // One shared triplet schedule per UE per accumulation.
                let seed = rng.random::<u64>();
                let ls = LsDataset::build(&channels, &pilot_u, arrays, false, seed)?;
                out.push(UeData {
                    hv_ls: ls.hv_ls,
                    tensors: Vec::new(),
                    sigma_half: ls.sigma_half,
                    sigma: pilot_u.sigma(),
                });
            }
            let _ = cfg;
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn noise_floor_matches_reference_arithmetic() {
        let link = LinkBudget::default();
        let floor = link.noise_psd_dbm_hz
            + 10.0 * link.bandwidth_hz.log10()
            + link.noise_figure_db;
        assert_relative_eq!(floor, -91.9897, epsilon = 1e-3);
    }

    #[test]
    fn link_snr_decreases_with_distance() {
        let link = LinkBudget::default();
        let s10 = link_snr(&link, 10.0).unwrap();
        let s25 = link_snr(&link, 25.0).unwrap();
        let s50 = link_snr(&link, 50.0).unwrap();
        assert!(s10 > s25 && s25 > s50);
        // Equal distances give equal SNR.
        assert_eq!(link_snr(&link, 30.0).unwrap(), link_snr(&link, 30.0).unwrap());
        assert!(link_snr(&link, 0.0).is_err());
    }

    #[test]
    fn averaging_identities() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let spec = CriticSpec::desk(false);
        let a = Critic::init(spec, &mut rng).unwrap();
        let mut master = Critic::init(spec, &mut rng).unwrap();

        // Identical inputs average to themselves.
        average_critic_weights(&mut master, &[a.clone(), a.clone()]).unwrap();
        assert_eq!(NetParams::of_critic(&master).params, NetParams::of_critic(&a).params);

        // theta and -theta cancel.
        let mut neg = a.clone();
        for mut p in neg.params_mut() {
            p.mapv_inplace(|v| -v);
        }
        average_critic_weights(&mut master, &[a.clone(), neg]).unwrap();
        assert!(crate::nn::max_abs_param(&master.params()) < 1e-15);

        // Four random sets match the element-wise mean exactly.
        let critics: Vec<Critic> = (0..4)
            .map(|_| Critic::init(spec, &mut rng).unwrap())
            .collect();
        average_critic_weights(&mut master, &critics).unwrap();
        let params: Vec<_> = critics.iter().map(|c| c.params()).collect();
        for (i, avg) in master.params().iter().enumerate() {
            for (j, v) in avg.iter().enumerate() {
                let want: f64 =
                    params.iter().map(|p| p[i].as_slice().unwrap()[j]).sum::<f64>() / 4.0;
                assert_eq!(*v, want);
            }
        }

        // Averaging is permutation invariant.
        let mut m2 = Critic::init(spec, &mut rng).unwrap();
        let mut rev = critics.clone();
        rev.reverse();
        average_critic_weights(&mut m2, &rev).unwrap();
        // Permutation invariant up to float summation order.
        for (a, b) in NetParams::of_critic(&master)
            .params
            .iter()
            .zip(&NetParams::of_critic(&m2).params)
        {
            for (x, y) in a.1.iter().zip(b.1.iter()) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn communication_accounting_matches_message_pattern() {
        use crate::channel::ChannelProfile;
        let fed = FedConfig {
            u: 2,
            d_local: 12,
            rounds: 2,
            l: 3,
            gen_updates_per_iter: 1,
            fixed_datasets: false,
            snr_override_db: Some(f64::INFINITY),
            val_every_rounds: 0,
            ..FedConfig::default()
        };
        let cfg = TrainConfig {
            n_d: 2,
            m: 8,
            total_iterations: 0,
            checkpoint_every: 0,
            validation_size: 0,
            ..TrainConfig::desk()
        };
        let profile = ChannelProfile {
            name: "toy".into(),
            n_clusters: 1,
            rays_per_cluster: 2,
            los: true,
            rician_k_db: 10.0,
            angle_spread_deg: 1.0,
            per_cluster_power_decay_db: 0.0,
        };
        let arrays = ArrayConfig::desk();
        let pilot = crate::measurement::PilotConfig::desk();
        let out = run_federated_training(
            &fed,
            &cfg,
            GeneratorSpec::desk(false),
            CriticSpec::desk(false),
            FedData::Simulate {
                profile: &profile,
                arrays: &arrays,
                pilot: &pilot,
            },
            None,
        )
        .unwrap();
        assert_eq!(out.rounds.len(), 2);
        let g = out.generator.net.parameter_count();
        let d = out.critic.parameter_count();
        for r in &out.rounds {
            assert_eq!(r.uplink_params, fed.l * fed.u * d);
            assert_eq!(r.downlink_params, fed.l * fed.u * (g + d));
        }
        assert_eq!(
            out.rounds[1].cumulative_uplink_params,
            2 * fed.l * fed.u * d
        );
    }
}
