//! Generator, critic and LOS-predictor function families.
//!
//! All forward passes are deterministic given parameters, inputs and (in
//! training mode) the dropout RNG stream. Parameters are exposed as ordered,
//! named flat collections so optimizers, weight clipping, federated averaging
//! and checkpointing all agree on the layout.

pub mod critic;
pub mod generator;
pub mod layers;

pub use critic::{Critic, CriticCache, CriticSpec, GradTrace, LosPredictorSpec};
pub use generator::{GenCache, Generator, GeneratorSpec};
pub use layers::Mode;

use ndarray::prelude::*;

use crate::channel::NormStats;
use crate::error::{Error, Result};
use crate::linalg::C64;

/// A trained generator bundled with the normalization statistics of its
/// training data. Calling it with a latent vector yields the unnormalized
/// complex beamspace channel: denormalization and unstacking are applied
/// implicitly on every forward pass.
#[derive(Debug, Clone)]
pub struct NormalizedGenerator {
    pub net: Generator,
    pub stats: NormStats,
}

impl NormalizedGenerator {
    /// Deterministic forward pass producing complex `n_r x n_t` channels.
    pub fn forward_complex(
        &self,
        z: &Array2<f64>,
        chi: Option<&[u8]>,
    ) -> Result<Vec<Array2<C64>>> {
        let (out, _) = self.net.forward_eval(z, chi)?;
        self.tensor_to_complex(&out)
    }

    /// Single-sample convenience wrapper around [`Self::forward_complex`].
    pub fn generate_one(&self, z: &Array1<f64>, chi: Option<u8>) -> Result<Array2<C64>> {
        let zb = z.view().insert_axis(Axis(0)).to_owned();
        let labels = chi.map(|c| vec![c]);
        Ok(self
            .forward_complex(&zb, labels.as_deref())?
            .pop()
            .expect("one sample"))
    }

    pub fn tensor_to_complex(&self, out: &Array4<f64>) -> Result<Vec<Array2<C64>>> {
        (0..out.dim().0)
            .map(|b| self.stats.denormalize(&out.index_axis(Axis(0), b).to_owned()))
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.spec.latent_dim
    }
}

/// A trained LOS/NLOS classifier bundled with its input normalization.
#[derive(Debug, Clone)]
pub struct LosPredictor {
    pub net: Critic,
    pub stats: NormStats,
}

impl LosPredictor {
    /// Probability that a (noisy) beamspace channel estimate is LOS.
    pub fn predict_proba(&self, hv_ls: &Array2<C64>) -> Result<f64> {
        let t = self.stats.normalize(hv_ls)?;
        let x = t.insert_axis(Axis(0));
        let (scores, _) = self.net.forward_eval(&x, None)?;
        Ok(self.net.probabilities(&scores)?[0])
    }

    pub fn predict_proba_batch(&self, hv_ls: &[Array2<C64>]) -> Result<Vec<f64>> {
        if hv_ls.is_empty() {
            return Ok(vec![]);
        }
        let (n_t, n_r) = (self.stats.n_t(), self.stats.n_r());
        let mut x = Array4::zeros((hv_ls.len(), 2, n_t, n_r));
        for (b, hv) in hv_ls.iter().enumerate() {
            x.index_axis_mut(Axis(0), b).assign(&self.stats.normalize(hv)?);
        }
        let (scores, _) = self.net.forward_eval(&x, None)?;
        Ok(self.net.probabilities(&scores)?.to_vec())
    }
}

/// A named snapshot of one network's parameters and buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub params: Vec<(String, ArrayD<f64>)>,
    pub buffers: Vec<(String, ArrayD<f64>)>,
}

impl NetParams {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn of_generator(g: &Generator) -> Self {
        Self {
            params: g
                .param_names()
                .into_iter()
                .zip(g.params().into_iter().map(|v| v.to_owned()))
                .collect(),
            buffers: g
                .buffer_names()
                .into_iter()
                .zip(g.buffers().into_iter().map(|v| v.to_owned()))
                .collect(),
        }
    }

    pub fn of_critic(c: &Critic) -> Self {
        Self {
            params: c
                .param_names()
                .into_iter()
                .zip(c.params().into_iter().map(|v| v.to_owned()))
                .collect(),
            buffers: c
                .buffer_names()
                .into_iter()
                .zip(c.buffers().into_iter().map(|v| v.to_owned()))
                .collect(),
        }
    }

    pub fn load_into_generator(&self, g: &mut Generator) -> Result<()> {
        load(
            &self.params,
            &g.param_names(),
            &mut g.params_mut(),
            "generator parameter",
        )?;
        load(
            &self.buffers,
            &g.buffer_names(),
            &mut g.buffers_mut(),
            "generator buffer",
        )
    }

    pub fn load_into_critic(&self, c: &mut Critic) -> Result<()> {
        load(
            &self.params,
            &c.param_names(),
            &mut c.params_mut(),
            "critic parameter",
        )?;
        load(
            &self.buffers,
            &c.buffer_names(),
            &mut c.buffers_mut(),
            "critic buffer",
        )
    }
}

fn load(
    src: &[(String, ArrayD<f64>)],
    names: &[String],
    dst: &mut [ArrayViewMutD<'_, f64>],
    what: &str,
) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} {what}s", dst.len()),
            got: format!("{}", src.len()),
        });
    }
    for (i, ((name, arr), view)) in src.iter().zip(dst.iter_mut()).enumerate() {
        if name != &names[i] || arr.shape() != view.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{what} {} of shape {:?}", names[i], view.shape()),
                got: format!("{name} of shape {:?}", arr.shape()),
            });
        }
        view.assign(arr);
    }
    Ok(())
}

/// Clip every parameter into `[-tau, tau]` in place.
pub fn clip_params(params: &mut [ArrayViewMutD<'_, f64>], tau: f64) {
    for p in params.iter_mut() {
        p.mapv_inplace(|v| v.clamp(-tau, tau));
    }
}

/// Largest parameter magnitude across a network's parameters.
pub fn max_abs_param(params: &[ArrayViewD<'_, f64>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn4<R: rand::Rng>(dim: (usize, usize, usize, usize), rng: &mut R) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    fn randn2<R: rand::Rng>(dim: (usize, usize), rng: &mut R) -> Array2<f64> {
        Array2::from_shape_fn(dim, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    #[test]
    fn parameter_counts_match_reference_table() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let g = Generator::init(GeneratorSpec::paper(false), &mut rng).unwrap();
        assert_eq!(g.parameter_count(), 1_069_568);

        let gc = Generator::init(GeneratorSpec::paper(true), &mut rng).unwrap();
        assert_eq!(gc.parameter_count(), 1_328_468);

        let d = Critic::init(CriticSpec::paper(false), &mut rng).unwrap();
        assert_eq!(d.parameter_count(), 100_753);

        let dc = Critic::init(CriticSpec::paper(true), &mut rng).unwrap();
        assert_eq!(dc.parameter_count(), 112_181);

        let los = Critic::init(CriticSpec::los_predictor(64, 16, 16), &mut rng).unwrap();
        assert_eq!(los.parameter_count(), 101_201);
    }

    #[test]
    fn critic_flatten_width_closes_at_paper_scale() {
        assert_eq!(Critic::flatten_dim(&CriticSpec::paper(false)), 3456);
    }

    #[test]
    fn generator_output_shape_and_determinism() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let g = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
        let z = randn2((3, 24), &mut rng);
        let (a, _) = g.forward_eval(&z, None).unwrap();
        let (b, _) = g.forward_eval(&z, None).unwrap();
        assert_eq!(a.dim(), (3, 2, 16, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn generator_condition_errors() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let g = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
        let z = randn2((2, 24), &mut rng);
        assert!(g.forward_eval(&z, Some(&[0, 1])).is_err());

        let gc = Generator::init(GeneratorSpec::desk(true), &mut rng).unwrap();
        assert!(gc.forward_eval(&z, None).is_err());
        assert!(gc.forward_eval(&z, Some(&[0, 1])).is_ok());
    }

    #[test]
    fn conditional_concat_channel_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let gc = Generator::init(GeneratorSpec::paper(true), &mut rng).unwrap();
        // First block convolution consumes the full concatenated stack.
        let names = gc.param_names();
        let idx = names.iter().position(|n| n == "block0.conv.w").unwrap();
        assert_eq!(gc.params()[idx].shape()[1], 128);

        let dc = Critic::init(CriticSpec::paper(true), &mut rng).unwrap();
        let names = dc.param_names();
        let idx = names.iter().position(|n| n == "conv1.w").unwrap();
        assert_eq!(dc.params()[idx].shape()[1], 3);
    }

    #[test]
    fn condition_maps_differ_between_labels() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let gc = Generator::init(GeneratorSpec::desk(true), &mut rng).unwrap();
        let maps = gc.condition_map(&[0, 1]).unwrap();
        let diff: f64 = (&maps.index_axis(Axis(0), 0) - &maps.index_axis(Axis(0), 1))
            .mapv(|v| v * v)
            .sum();
        assert!(diff > 0.0);

        let dc = Critic::init(CriticSpec::desk(true), &mut rng).unwrap();
        let maps = dc.condition_map(&[0, 1]).unwrap();
        let diff: f64 = (&maps.index_axis(Axis(0), 0) - &maps.index_axis(Axis(0), 1))
            .mapv(|v| v * v)
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn generator_backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for conditional in [false, true] {
            let mut g = Generator::init(GeneratorSpec::desk(conditional), &mut rng).unwrap();
            let z = randn2((4, 24), &mut rng);
            let chi: Option<Vec<u8>> = conditional.then(|| vec![0, 1, 1, 0]);
            let dout = randn4((4, 2, 16, 4), &mut rng);

            // Train mode probes run through batch statistics; clone so the
            // running buffers stay fixed across probes.
            let loss = |g: &Generator, z: &Array2<f64>| -> f64 {
                let mut gg = g.clone();
                let (out, _) = gg.forward_train(z, chi.as_deref()).unwrap();
                out.iter().zip(dout.iter()).map(|(a, b)| a * b).sum()
            };
            let (out, cache) = g.clone().forward_train(&z, chi.as_deref()).unwrap();
            let _ = out;
            let (dz, grads) = g.backward(&cache, &dout);
            assert_eq!(grads.len(), g.params().len());
            for (gr, p) in grads.iter().zip(g.params()) {
                assert_eq!(gr.shape(), p.shape());
            }

            // Latent gradient probes.
            let h = 1e-5;
            for &idx in &[(0usize, 0usize), (2, 13), (3, 23)] {
                let mut zp = z.clone();
                zp[idx] += h;
                let up = loss(&g, &zp);
                zp[idx] -= 2.0 * h;
                let down = loss(&g, &zp);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - dz[idx]).abs() < 2e-4 * fd.abs().max(1.0),
                    "conditional={conditional} dz{idx:?}: fd {fd} vs {}",
                    dz[idx]
                );
            }

            // A few parameter probes spread across layers.
            let names = g.param_names();
            for name in ["linear.w", "block0.conv.w", "block1.bn.gamma", "out_conv.w"] {
                let pi = names.iter().position(|n| n == name).unwrap();
                let flat_idx = grads[pi].len() / 2;
                let analytic = grads[pi].as_slice().unwrap()[flat_idx];
                let mut gp = g.clone();
                {
                    let mut views = gp.params_mut();
                    views[pi].as_slice_mut().unwrap()[flat_idx] += h;
                }
                let up = loss(&gp, &z);
                {
                    let mut views = gp.params_mut();
                    views[pi].as_slice_mut().unwrap()[flat_idx] -= 2.0 * h;
                }
                let down = loss(&gp, &z);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 2e-4 * fd.abs().max(1.0),
                    "conditional={conditional} {name}: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn critic_input_gradient_matches_finite_difference() {
        // Eval mode (no dropout) so probes see a deterministic function.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for (conditional, bn) in [(false, false), (true, false), (false, true)] {
            let mut spec = CriticSpec::desk(conditional);
            spec.batch_norm = bn;
            spec.sigmoid = false;
            let c = Critic::init(spec, &mut rng).unwrap();
            let x = randn4((2, 2, 16, 4), &mut rng);
            let chi: Option<Vec<u8>> = conditional.then(|| vec![1, 0]);
            let (_, cache) = c.forward_eval(&x, chi.as_deref()).unwrap();
            let ones = Array1::ones(2);
            let (g, _) = c.input_gradient(&cache, &ones);

            let h = 1e-3;
            let mut checked = 0;
            for probe in 0..10 {
                let idx = (
                    probe % 2,
                    probe % 2,
                    (probe * 3) % 16,
                    (probe * 7) % 4,
                );
                let mut xp = x.clone();
                xp[idx] += h;
                let (up, _) = c.forward_eval(&xp, chi.as_deref()).unwrap();
                xp[idx] -= 2.0 * h;
                let (down, _) = c.forward_eval(&xp, chi.as_deref()).unwrap();
                let fd = (up.sum() - down.sum()) / (2.0 * h);
                let analytic = g[idx];
                if fd.abs() > 1e-8 {
                    assert!(
                        (fd - analytic).abs() / fd.abs().max(1e-6) < 1e-3,
                        "cond={conditional} bn={bn} idx {idx:?}: fd {fd} vs {analytic}"
                    );
                    checked += 1;
                }
            }
            assert!(checked >= 5, "too few informative probes");
        }
    }

    #[test]
    fn critic_param_backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for (conditional, bn) in [(false, false), (true, false), (false, true)] {
            let mut spec = CriticSpec::desk(conditional);
            spec.batch_norm = bn;
            spec.sigmoid = false;
            let c = Critic::init(spec, &mut rng).unwrap();
            let x = randn4((3, 2, 16, 4), &mut rng);
            let chi: Option<Vec<u8>> = conditional.then(|| vec![1, 0, 1]);
            let upstream = Array1::from_vec(vec![0.7, -1.1, 0.4]);

            // Fixed dropout masks across probes via a cloned rng stream.
            let fwd = |c: &Critic| -> (Array1<f64>, CriticCache) {
                let mut cc = c.clone();
                let mut drop_rng = ChaCha12Rng::seed_from_u64(999);
                cc.forward_train(&x, chi.as_deref(), &mut drop_rng).unwrap()
            };
            let loss = |c: &Critic| -> f64 {
                let (s, _) = fwd(c);
                s.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = fwd(&c);
            let (grads, _) = c.backward_params(&cache, &upstream, false);
            assert_eq!(grads.len(), c.params().len());

            let names = c.param_names();
            let h = 1e-5;
            let probe_names: Vec<&str> = if conditional {
                vec!["embed.table", "embed_linear.w", "conv1.w", "conv3.b", "linear.w"]
            } else if bn {
                vec!["conv1.w", "bn2.gamma", "bn3.beta", "conv4.w", "linear.b"]
            } else {
                vec!["conv1.w", "conv2.b", "conv4.w", "linear.w", "linear.b"]
            };
            for name in probe_names {
                let pi = names.iter().position(|n| n == &name.to_string()).unwrap();
                let flat_idx = grads[pi].len() / 3;
                let analytic = grads[pi].as_slice().unwrap()[flat_idx];
                let mut cp = c.clone();
                {
                    let mut views = cp.params_mut();
                    views[pi].as_slice_mut().unwrap()[flat_idx] += h;
                }
                let up = loss(&cp);
                {
                    let mut views = cp.params_mut();
                    views[pi].as_slice_mut().unwrap()[flat_idx] -= 2.0 * h;
                }
                let down = loss(&cp);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 5e-4 * fd.abs().max(1.0),
                    "cond={conditional} bn={bn} {name}: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn gradient_penalty_double_backward_matches_finite_difference() {
        // Penalty P(theta) = mean_b (||grad_x D(x_b)||_2 - 1)^2 differentiated
        // with respect to parameters, compared against central differences.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for conditional in [false, true] {
            let c = Critic::init(CriticSpec::desk(conditional), &mut rng).unwrap();
            let x = randn4((3, 2, 16, 4), &mut rng);
            let chi: Option<Vec<u8>> = conditional.then(|| vec![0, 1, 1]);

            let penalty = |c: &Critic| -> f64 {
                let (_, cache) = c.forward_eval(&x, chi.as_deref()).unwrap();
                let ones = Array1::ones(3);
                let (g, _) = c.input_gradient(&cache, &ones);
                // The penalty differentiates with respect to the two data
                // channels only; any condition channel is excluded.
                let gx = g.slice(s![.., ..2, .., ..]);
                let mut acc = 0.0;
                for b in 0..3 {
                    let norm = gx
                        .index_axis(Axis(0), b)
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    acc += (norm - 1.0) * (norm - 1.0);
                }
                acc / 3.0
            };

            // Analytic gradient via the double-backward pass.
            let (_, cache) = c.forward_eval(&x, chi.as_deref()).unwrap();
            let ones = Array1::ones(3);
            let (g, trace) = c.input_gradient(&cache, &ones);
            let gx = g.slice(s![.., ..2, .., ..]);
            let mut u = Array4::<f64>::zeros((3, 2, 16, 4));
            for b in 0..3 {
                let norm = gx
                    .index_axis(Axis(0), b)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-12);
                let scale = 2.0 * (norm - 1.0) / norm / 3.0;
                let gb = gx.index_axis(Axis(0), b).to_owned() * scale;
                u.index_axis_mut(Axis(0), b).assign(&gb);
            }
            let grads = c.gp_double_backward(&cache, &trace, &u).unwrap();

            let names = c.param_names();
            let h = 1e-5;
            for name in ["conv1.w", "conv2.w", "conv3.w", "conv4.w", "linear.w"] {
                let pi = names.iter().position(|n| n == &name.to_string()).unwrap();
                let flat_idx = grads[pi].len() / 3;
                let analytic = grads[pi].as_slice().unwrap()[flat_idx];
                let mut cp = c.clone();
                {
                    let mut views = cp.params_mut();
                    views[pi].as_slice_mut().unwrap()[flat_idx] += h;
                }
                let up = penalty(&cp);
                {
                    let mut views = cp.params_mut();
                    views[pi].as_slice_mut().unwrap()[flat_idx] -= 2.0 * h;
                }
                let down = penalty(&cp);
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 2e-3 * fd.abs().max(1e-3),
                    "cond={conditional} {name}: fd {fd} vs {analytic}"
                );
            }

            // Bias parameters receive no penalty gradient.
            let pi = names.iter().position(|n| n == "conv1.b").unwrap();
            assert!(grads[pi].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn los_predictor_outputs_probabilities() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let los = Critic::init(CriticSpec::los_predictor(16, 4, 4), &mut rng).unwrap();
        let mut mean = 0.0;
        let n = 1_000;
        for i in 0..n {
            let mut r2 = ChaCha12Rng::seed_from_u64(100 + i);
            let x = randn4((1, 2, 16, 4), &mut r2);
            let (s, _) = los.forward_eval(&x, None).unwrap();
            let p = los.probabilities(&s).unwrap()[0];
            assert!(p > 0.0 && p < 1.0);
            mean += p;
        }
        mean /= n as f64;
        assert!(
            mean > 0.2 && mean < 0.8,
            "freshly initialized predictor saturates: mean {mean}"
        );
    }

    #[test]
    fn clipping_bounds_every_parameter() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut c = Critic::init(CriticSpec::desk(false), &mut rng).unwrap();
        // Blow some weights up first.
        for v in c.params_mut().iter_mut() {
            v.mapv_inplace(|x| x * 100.0);
        }
        let tau = 0.01;
        clip_params(&mut c.params_mut(), tau);
        assert!(max_abs_param(&c.params()) <= tau);
    }

    #[test]
    fn net_params_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let g = Generator::init(GeneratorSpec::desk(true), &mut rng).unwrap();
        let snap = NetParams::of_generator(&g);
        assert_eq!(snap.parameter_count(), g.parameter_count());
        let mut g2 = Generator::init(GeneratorSpec::desk(true), &mut rng).unwrap();
        snap.load_into_generator(&mut g2).unwrap();
        let z = randn2((2, 24), &mut rng);
        let (a, _) = g.forward_eval(&z, Some(&[0, 1])).unwrap();
        let (b, _) = g2.forward_eval(&z, Some(&[0, 1])).unwrap();
        assert_eq!(a, b);

        // Mismatched spec refuses to load.
        let mut g3 = Generator::init(GeneratorSpec::desk(false), &mut rng).unwrap();
        assert!(snap.load_into_generator(&mut g3).is_err());
    }
}
