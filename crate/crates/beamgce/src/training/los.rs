//! Supervised LOS/NLOS predictor training with binary cross entropy.

use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::optimizer::AdamOpt;
use crate::channel::compute_norm_stats;
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::nn::{Critic, CriticSpec, LosPredictor, NetParams};

#[derive(Debug, Clone, Copy)]
pub struct LosTrainOptions {
    pub epochs: usize,
    /// Adam learning rate; 3e-4 in the reference setup.
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of the dataset held out for validation-accuracy selection.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for LosTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-4,
            batch_size: 200,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LosTrainStats {
    pub best_val_accuracy: f64,
    pub final_train_loss: f64,
    pub epochs_run: usize,
    /// The dataset contained a single class; training proceeded anyway.
    pub single_class_warning: bool,
}

/// Train the LOS predictor on labeled (noisy) beamspace estimates, keeping
/// the parameters with the best held-out accuracy.
pub fn train_los_predictor(
    dataset: &[(Array2<C64>, u8)],
    spec: CriticSpec,
    opts: &LosTrainOptions,
) -> Result<(LosPredictor, LosTrainStats)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !spec.sigmoid || !spec.batch_norm {
        return Err(Error::Config(
            "LOS predictor spec needs sigmoid and batch normalization".into(),
        ));
    }
    let single_class_warning = {
        let first = dataset[0].1;
        dataset.iter().all(|(_, l)| *l == first)
    };
    if single_class_warning {
        eprintln!("warning: LOS predictor dataset contains a single class");
    }

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * opts.validation_fraction) as usize)
        .clamp(1, dataset.len().saturating_sub(1).max(1));
    let (val_idx, train_idx) = order.split_at(n_val.min(order.len() - 1).max(1));

    let channels: Vec<Array2<C64>> = train_idx.iter().map(|&i| dataset[i].0.clone()).collect();
    let stats = compute_norm_stats(&channels)?;
    let to_tensor = |idx: &[usize]| -> Result<(Array4<f64>, Vec<f64>)> {
        let mut x = Array4::zeros((idx.len(), 2, stats.n_t(), stats.n_r()));
        let mut y = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            x.index_axis_mut(Axis(0), b).assign(&stats.normalize(&dataset[i].0)?);
            y.push(dataset[i].1 as f64);
        }
        Ok((x, y))
    };
    let (val_x, val_y) = to_tensor(val_idx)?;

    let mut net = Critic::init(spec, &mut rng)?;
    let mut opt = AdamOpt::new_for(&net.params());
    let mut best: Option<(f64, NetParams)> = None;
    let mut final_train_loss = f64::NAN;
    let mut train_order: Vec<usize> = train_idx.to_vec();

    for _epoch in 0..opts.epochs {
        train_order.shuffle(&mut rng);
        for chunk in train_order.chunks(opts.batch_size.max(1)) {
            let (x, y) = to_tensor(chunk)?;
            let (scores, cache) = net.forward_train(&x, None, &mut rng)?;
            let b = chunk.len() as f64;
            let mut loss = 0.0;
            let mut upstream = Array1::<f64>::zeros(chunk.len());
            for (i, (&s, &label)) in scores.iter().zip(&y).enumerate() {
                let p = crate::nn::layers::sigmoid_scalar(s);
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                loss -= label * pc.ln() + (1.0 - label) * (1.0 - pc).ln();
                // d BCE / d logit = p - y.
                upstream[i] = (p - label) / b;
            }
            loss /= b;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    iter: 0,
                    what: format!("LOS predictor loss {loss}"),
                });
            }
            final_train_loss = loss;
            let (grads, _) = net.backward_params(&cache, &upstream, false);
            opt.step(&mut net.params_mut(), &grads, opts.lr);
        }

        // Validation accuracy with the current parameters.
        let (scores, _) = net.forward_eval(&val_x, None)?;
        let correct = scores
            .iter()
            .zip(&val_y)
            .filter(|(&s, &y)| (crate::nn::layers::sigmoid_scalar(s) >= 0.5) == (y >= 0.5))
            .count();
        let acc = correct as f64 / val_y.len() as f64;
        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, NetParams::of_critic(&net)));
        }
    }

    let (best_val_accuracy, snapshot) = best.expect("at least one epoch");
    snapshot.load_into_critic(&mut net)?;
    Ok((
        LosPredictor { net, stats },
        LosTrainStats {
            best_val_accuracy,
            final_train_loss,
            epochs_run: opts.epochs,
            single_class_warning,
        },
    ))
}
