//! Generator network: latent vector to stacked real/imag beamspace channel.
//!
//! Layout at full width (`base_channels = 128`, latent 65, arrays 64x16):
//!
//! ```text
//! Linear(65, 128*(nt/4)*(nr/4)) -> ReLU -> Reshape(128, nt/4, nr/4)
//! [Upsample(2) -> Conv(128,128,4x4) -> BatchNorm -> ReLU]   x2
//! [Conv(128,128,4x4) -> BatchNorm -> ReLU]                  (conditional only)
//! Conv(128,2,4x4)
//! ```
//!
//! Convolutions are bias-free with `same` padding. In the conditional
//! variant the main linear produces `base_channels - 1` feature maps and the
//! label is embedded, mapped through a biased linear layer, reshaped to one
//! `(nt/4, nr/4)` map and appended along the channel axis.

use ndarray::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    relu, relu2, upsample2x, upsample2x_backward, BatchNorm2d, BnCache, BnStats, Conv2d,
    Embedding, Linear, Mode,
};
use crate::error::{Error, Result};

/// Weight initialization standard deviation for conv/linear layers.
pub const INIT_STD: f64 = 0.02;

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub conditional: bool,
    pub embedding_dim: usize,
    pub base_channels: usize,
}

impl GeneratorSpec {
    /// Full-width generator: latent 65, 128 channels.
    pub fn paper(conditional: bool) -> Self {
        Self {
            latent_dim: 65,
            n_t: 64,
            n_r: 16,
            conditional,
            embedding_dim: 10,
            base_channels: 128,
        }
    }

    /// Narrow generator for fast desk-scale runs.
    pub fn desk(conditional: bool) -> Self {
        Self {
            latent_dim: 24,
            n_t: 16,
            n_r: 4,
            conditional,
            embedding_dim: 10,
            base_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t % 4 != 0 || self.n_r % 4 != 0 {
            return Err(Error::Config(
                "generator needs n_t and n_r divisible by 4".into(),
            ));
        }
        if self.latent_dim == 0 || self.base_channels < 2 {
            return Err(Error::Config("degenerate generator spec".into()));
        }
        Ok(())
    }

    pub fn seed_hw(&self) -> (usize, usize) {
        (self.n_t / 4, self.n_r / 4)
    }

    /// Channels produced by the main linear path (one is reserved for the
    /// condition map in the conditional variant).
    pub fn main_channels(&self) -> usize {
        self.base_channels - usize::from(self.conditional)
    }

    fn n_blocks(&self) -> usize {
        if self.conditional {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone)]
struct GenBlock {
    upsample: bool,
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    linear: Linear,
    embed: Option<(Embedding, Linear)>,
    blocks: Vec<GenBlock>,
    out_conv: Conv2d,
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// Input to the block (before any upsampling).
    input_hw: (usize, usize),
    /// Convolution input (after upsampling when present).
    conv_in: Array4<f64>,
    bn_cache: BnCache,
    relu_mask: Array4<f64>,
}

/// Forward activations needed by [`Generator::backward`].
#[derive(Debug, Clone)]
pub struct GenCache {
    z: Array2<f64>,
    chi: Option<Vec<u8>>,
    lin_mask: Array2<f64>,
    blocks: Vec<BlockCache>,
    out_in: Array4<f64>,
}

impl Generator {
    pub fn init<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (h0, w0) = spec.seed_hw();
        let linear = Linear::init(
            spec.latent_dim,
            spec.main_channels() * h0 * w0,
            true,
            INIT_STD,
            rng,
        );
        let embed = spec
            .conditional
            .then(|| {
                let table = Embedding::init(spec.embedding_dim, rng);
                let lin = Linear::init(spec.embedding_dim, h0 * w0, true, INIT_STD, rng);
                (table, lin)
            });
        let c = spec.base_channels;
        let blocks = (0..spec.n_blocks())
            .map(|i| GenBlock {
                upsample: i < 2,
                conv: Conv2d::init(c, c, (4, 4), 1, false, INIT_STD, rng),
                bn: BatchNorm2d::new(c, BN_MOMENTUM),
            })
            .collect();
        let out_conv = Conv2d::init(c, 2, (4, 4), 1, false, INIT_STD, rng);
        Ok(Self {
            spec,
            linear,
            embed,
            blocks,
            out_conv,
        })
    }

    fn check_condition(&self, batch: usize, chi: Option<&[u8]>) -> Result<()> {
        match (self.spec.conditional, chi) {
            (true, Some(c)) if c.len() == batch => Ok(()),
            (true, Some(_)) => Err(Error::ShapeMismatch {
                expected: format!("{batch} condition labels"),
                got: "different length".into(),
            }),
            (true, None) => Err(Error::Config(
                "conditional generator requires a condition".into(),
            )),
            (false, Some(_)) => Err(Error::Config(
                "condition supplied to unconditional generator".into(),
            )),
            (false, None) => Ok(()),
        }
    }

    /// The `(batch, 1, n_t/4, n_r/4)` condition feature map for given labels.
    pub fn condition_map(&self, chi: &[u8]) -> Result<Array4<f64>> {
        let (table, lin) = self
            .embed
            .as_ref()
            .ok_or_else(|| Error::Config("generator is unconditional".into()))?;
        if chi.iter().any(|&c| c > 1) {
            return Err(Error::Config("condition labels must be 0 or 1".into()));
        }
        let (h0, w0) = self.spec.seed_hw();
        let e = lin.forward(&table.forward(chi));
        Ok(e.into_shape_with_order((chi.len(), 1, h0, w0))
            .expect("condition map shape"))
    }

    fn run_forward(
        &self,
        z: &Array2<f64>,
        chi: Option<&[u8]>,
        mode: Mode,
    ) -> Result<(Array4<f64>, GenCache, Vec<Option<BnStats>>)> {
        let batch = z.nrows();
        if z.ncols() != self.spec.latent_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("latent dim {}", self.spec.latent_dim),
                got: format!("{}", z.ncols()),
            });
        }
        self.check_condition(batch, chi)?;
        let (h0, w0) = self.spec.seed_hw();

        let (lin_out, lin_mask) = relu2(&self.linear.forward(z));
        let main = lin_out
            .into_shape_with_order((batch, self.spec.main_channels(), h0, w0))
            .expect("main reshape");
        let mut x = if let Some(labels) = chi {
            let cond = self.condition_map(labels)?;
            let mut full = Array4::zeros((batch, self.spec.base_channels, h0, w0));
            full.slice_mut(s![.., ..self.spec.main_channels(), .., ..])
                .assign(&main);
            full.slice_mut(s![.., self.spec.main_channels().., .., ..])
                .assign(&cond);
            full
        } else {
            main
        };

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut bn_updates = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input_hw = (x.dim().2, x.dim().3);
            let conv_in = if block.upsample { upsample2x(&x) } else { x };
            let conv_out = block.conv.forward(&conv_in);
            let (bn_out, bn_cache, stats) = block.bn.compute(&conv_out, mode);
            let (y, relu_mask) = relu(&bn_out);
            block_caches.push(BlockCache {
                input_hw,
                conv_in,
                bn_cache,
                relu_mask,
            });
            bn_updates.push(stats);
            x = y;
        }

        let out = self.out_conv.forward(&x);
        let cache = GenCache {
            z: z.clone(),
            chi: chi.map(|c| c.to_vec()),
            lin_mask,
            blocks: block_caches,
            out_in: x,
        };
        Ok((out, cache, bn_updates))
    }

    /// Training-mode forward: batch statistics are used and folded into the
    /// running averages.
    pub fn forward_train(
        &mut self,
        z: &Array2<f64>,
        chi: Option<&[u8]>,
    ) -> Result<(Array4<f64>, GenCache)> {
        let (out, cache, updates) = self.run_forward(z, chi, Mode::Train)?;
        for (block, stats) in self.blocks.iter_mut().zip(updates) {
            block.bn.absorb(stats);
        }
        Ok((out, cache))
    }

    /// Evaluation-mode forward using running batch-norm statistics.
    pub fn forward_eval(&self, z: &Array2<f64>, chi: Option<&[u8]>) -> Result<(Array4<f64>, GenCache)> {
        let (out, cache, _) = self.run_forward(z, chi, Mode::Eval)?;
        Ok((out, cache))
    }

    /// Backpropagate `dout` through the cached forward pass. Returns the
    /// latent gradient and parameter gradients aligned with
    /// [`Generator::params`].
    pub fn backward(&self, cache: &GenCache, dout: &Array4<f64>) -> (Array2<f64>, Vec<ArrayD<f64>>) {
        let batch = cache.z.nrows();
        let (h0, w0) = self.spec.seed_hw();

        let (dw_out, _) = self.out_conv.weight_grad(&cache.out_in, dout);
        let out_hw = (cache.out_in.dim().2, cache.out_in.dim().3);
        let mut d = self.out_conv.backward_input(dout, out_hw);

        let mut block_grads: Vec<(Array4<f64>, Array1<f64>, Array1<f64>)> =
            Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_bn_out = &d * &bc.relu_mask;
            let (d_conv_out, dgamma, dbeta) = block.bn.backward(&bc.bn_cache, &d_bn_out);
            let (dw, _) = block.conv.weight_grad(&bc.conv_in, &d_conv_out);
            let conv_in_hw = (bc.conv_in.dim().2, bc.conv_in.dim().3);
            let d_conv_in = block.conv.backward_input(&d_conv_out, conv_in_hw);
            d = if block.upsample {
                upsample2x_backward(&d_conv_in)
            } else {
                d_conv_in
            };
            debug_assert_eq!((d.dim().2, d.dim().3), bc.input_hw);
            block_grads.push((dw, dgamma, dbeta));
        }
        block_grads.reverse();

        // Split the seed gradient into the main path and the condition path.
        let main_ch = self.spec.main_channels();
        let d_main = d
            .slice(s![.., ..main_ch, .., ..])
            .to_owned()
            .into_shape_with_order((batch, main_ch * h0 * w0))
            .expect("seed gradient reshape");
        let d_lin_out = &d_main * &cache.lin_mask;
        let (dz, dw_lin, db_lin) = self.linear.backward(&cache.z, &d_lin_out);

        let mut grads: Vec<ArrayD<f64>> = Vec::new();
        grads.push(dw_lin.into_dyn());
        grads.push(db_lin.expect("generator linear has bias").into_dyn());
        if let Some((table, lin)) = &self.embed {
            let labels = cache.chi.as_ref().expect("conditional cache has labels");
            let d_cond = d
                .slice(s![.., main_ch.., .., ..])
                .to_owned()
                .into_shape_with_order((batch, h0 * w0))
                .expect("condition gradient reshape");
            let emb_out = table.forward(labels);
            let (d_emb, dw_el, db_el) = lin.backward(&emb_out, &d_cond);
            let d_table = table.backward(labels, &d_emb);
            grads.push(d_table.into_dyn());
            grads.push(dw_el.into_dyn());
            grads.push(db_el.expect("embed linear has bias").into_dyn());
        }
        for (dw, dgamma, dbeta) in block_grads {
            grads.push(dw.into_dyn());
            grads.push(dgamma.into_dyn());
            grads.push(dbeta.into_dyn());
        }
        grads.push(dw_out.into_dyn());
        (dz, grads)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["linear.w".to_string(), "linear.b".to_string()];
        if self.embed.is_some() {
            names.push("embed.table".into());
            names.push("embed_linear.w".into());
            names.push("embed_linear.b".into());
        }
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.conv.w"));
            names.push(format!("block{i}.bn.gamma"));
            names.push(format!("block{i}.bn.beta"));
        }
        names.push("out_conv.w".into());
        names
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut v: Vec<ArrayViewD<'_, f64>> =
            vec![self.linear.w.view().into_dyn(), self.linear.b.as_ref().unwrap().view().into_dyn()];
        if let Some((table, lin)) = &self.embed {
            v.push(table.table.view().into_dyn());
            v.push(lin.w.view().into_dyn());
            v.push(lin.b.as_ref().unwrap().view().into_dyn());
        }
        for b in &self.blocks {
            v.push(b.conv.w.view().into_dyn());
            v.push(b.bn.gamma.view().into_dyn());
            v.push(b.bn.beta.view().into_dyn());
        }
        v.push(self.out_conv.w.view().into_dyn());
        v
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut v: Vec<ArrayViewMutD<'_, f64>> = vec![
            self.linear.w.view_mut().into_dyn(),
            self.linear.b.as_mut().unwrap().view_mut().into_dyn(),
        ];
        if let Some((table, lin)) = &mut self.embed {
            v.push(table.table.view_mut().into_dyn());
            v.push(lin.w.view_mut().into_dyn());
            v.push(lin.b.as_mut().unwrap().view_mut().into_dyn());
        }
        for b in &mut self.blocks {
            v.push(b.conv.w.view_mut().into_dyn());
            v.push(b.bn.gamma.view_mut().into_dyn());
            v.push(b.bn.beta.view_mut().into_dyn());
        }
        v.push(self.out_conv.w.view_mut().into_dyn());
        v
    }

    /// Non-trainable state: batch-norm running statistics.
    pub fn buffer_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| {
                vec![
                    format!("block{i}.bn.running_mean"),
                    format!("block{i}.bn.running_var"),
                ]
            })
            .collect()
    }

    pub fn buffers(&self) -> Vec<ArrayViewD<'_, f64>> {
        self.blocks
            .iter()
            .flat_map(|b| {
                vec![
                    b.bn.running_mean.view().into_dyn(),
                    b.bn.running_var.view().into_dyn(),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                vec![
                    b.bn.running_mean.view_mut().into_dyn(),
                    b.bn.running_var.view_mut().into_dyn(),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
