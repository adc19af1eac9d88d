//! Critic / LOS-predictor network.
//!
//! Shared trunk (widths at `base_channels = 16`):
//!
//! ```text
//! Conv(in,16,3x3,s2)  -> LeakyReLU(0.2) -> Dropout(0.25)
//! Conv(16,32,3x3,s2)  -> ZeroPad(0,1,0,1) -> LeakyReLU -> Dropout -> [BN32]
//! Conv(32,64,3x3,s2)  -> LeakyReLU -> Dropout -> [BN64]
//! Conv(64,128,3x3,s1) -> LeakyReLU -> Dropout -> [BN128]
//! Flatten -> Linear(flat, 1) -> [Sigmoid]
//! ```
//!
//! Bracketed layers exist only in the LOS predictor; the Wasserstein critic
//! keeps an unbounded scalar output and, in gradient-penalty mode, must stay
//! free of batch normalization. Critic convolutions carry biases.
//!
//! Because the gradient-penalty critic is piecewise linear in its input, the
//! gradient-of-gradient pass reuses the convolution forward and weight-grad
//! primitives with the activation masks frozen from the forward pass.

use ndarray::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generator::{BN_MOMENTUM, INIT_STD};
use super::layers::{
    dropout_mask, leaky_relu, sigmoid_scalar, BatchNorm2d, BnCache, BnStats, Conv2d, Embedding,
    Linear, Mode, ZeroPad2d,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub n_t: usize,
    pub n_r: usize,
    pub conditional: bool,
    pub embedding_dim: usize,
    /// First convolution's output channels; later stages use 2x, 4x, 8x.
    pub base_channels: usize,
    /// Batch normalization in the trunk (LOS predictor only; incompatible
    /// with the gradient penalty).
    pub batch_norm: bool,
    /// Terminal sigmoid (LOS predictor only).
    pub sigmoid: bool,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl CriticSpec {
    pub fn paper(conditional: bool) -> Self {
        Self {
            n_t: 64,
            n_r: 16,
            conditional,
            embedding_dim: 10,
            base_channels: 16,
            batch_norm: false,
            sigmoid: false,
            dropout: 0.25,
            leaky_slope: 0.2,
        }
    }

    pub fn desk(conditional: bool) -> Self {
        Self {
            n_t: 16,
            n_r: 4,
            base_channels: 4,
            ..Self::paper(conditional)
        }
    }

    /// LOS predictor: critic trunk plus batch normalization and a sigmoid.
    pub fn los_predictor(n_t: usize, n_r: usize, base_channels: usize) -> Self {
        Self {
            n_t,
            n_r,
            conditional: false,
            embedding_dim: 10,
            base_channels,
            batch_norm: true,
            sigmoid: true,
            dropout: 0.25,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t < 8 || self.n_r < 2 {
            return Err(Error::Config("input too small for the conv trunk".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn in_channels(&self) -> usize {
        2 + usize::from(self.conditional)
    }
}

/// Spec alias for the LOS predictor; built via [`CriticSpec::los_predictor`].
pub type LosPredictorSpec = CriticSpec;

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub spec: CriticSpec,
    embed: Option<(Embedding, Linear)>,
    conv1: Conv2d,
    conv2: Conv2d,
    pad: ZeroPad2d,
    bn2: Option<BatchNorm2d>,
    conv3: Conv2d,
    bn3: Option<BatchNorm2d>,
    conv4: Conv2d,
    bn4: Option<BatchNorm2d>,
    linear: Linear,
}

/// Everything the backward passes need from one forward call.
#[derive(Debug, Clone)]
pub struct CriticCache {
    /// Network input after condition concatenation.
    pub x_full: Array4<f64>,
    chi: Option<Vec<u8>>,
    m1: Array4<f64>,
    d1: Option<Array4<f64>>,
    t1: Array4<f64>,
    m2: Array4<f64>,
    d2: Option<Array4<f64>>,
    bn2_cache: Option<BnCache>,
    bn2_in: Option<Array4<f64>>,
    t2: Array4<f64>,
    m3: Array4<f64>,
    d3: Option<Array4<f64>>,
    bn3_cache: Option<BnCache>,
    bn3_in: Option<Array4<f64>>,
    t3: Array4<f64>,
    m4: Array4<f64>,
    d4: Option<Array4<f64>>,
    bn4_cache: Option<BnCache>,
    bn4_in: Option<Array4<f64>>,
    /// Flattened linear input.
    pub v: Array2<f64>,
    /// Pre-sigmoid scalar per sample.
    pub scores: Array1<f64>,
}

/// Per-layer input-gradient trace used by the gradient-penalty double
/// backward: the gradient at each convolution's output and at the linear
/// layer's input.
#[derive(Debug, Clone)]
pub struct GradTrace {
    gout1: Array4<f64>,
    gout2: Array4<f64>,
    gout3: Array4<f64>,
    gout4: Array4<f64>,
    upstream: Array1<f64>,
}

impl Critic {
    pub fn init<R: Rng + ?Sized>(spec: CriticSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let c = spec.base_channels;
        let embed = spec
            .conditional
            .then(|| {
                let table = Embedding::init(spec.embedding_dim, rng);
                let lin = Linear::init(spec.embedding_dim, spec.n_t * spec.n_r, true, INIT_STD, rng);
                (table, lin)
            });
        let conv1 = Conv2d::init(spec.in_channels(), c, (3, 3), 2, true, INIT_STD, rng);
        let conv2 = Conv2d::init(c, 2 * c, (3, 3), 2, true, INIT_STD, rng);
        let conv3 = Conv2d::init(2 * c, 4 * c, (3, 3), 2, true, INIT_STD, rng);
        let conv4 = Conv2d::init(4 * c, 8 * c, (3, 3), 1, true, INIT_STD, rng);
        let bn = |ch: usize| BatchNorm2d::new(ch, BN_MOMENTUM);
        let (bn2, bn3, bn4) = if spec.batch_norm {
            (Some(bn(2 * c)), Some(bn(4 * c)), Some(bn(8 * c)))
        } else {
            (None, None, None)
        };
        let flat = Self::flatten_dim(&spec);
        let linear = Linear::init(flat, 1, true, INIT_STD, rng);
        Ok(Self {
            spec,
            embed,
            conv1,
            conv2,
            pad: ZeroPad2d {
                left: 0,
                right: 1,
                top: 0,
                bottom: 1,
            },
            bn2,
            conv3,
            bn3,
            conv4,
            bn4,
            linear,
        })
    }

    /// Flattened width feeding the final linear layer: 3456 at (64, 16).
    pub fn flatten_dim(spec: &CriticSpec) -> usize {
        let (h1, w1) = (ceil_div(spec.n_t, 2), ceil_div(spec.n_r, 2));
        let (h2, w2) = (ceil_div(h1, 2), ceil_div(w1, 2));
        let (h2p, w2p) = (h2 + 1, w2 + 1);
        let (h3, w3) = (ceil_div(h2p, 2), ceil_div(w2p, 2));
        8 * spec.base_channels * h3 * w3
    }

    fn check_condition(&self, batch: usize, chi: Option<&[u8]>) -> Result<()> {
        match (self.spec.conditional, chi) {
            (true, Some(c)) if c.len() == batch => Ok(()),
            (true, Some(_)) => Err(Error::ShapeMismatch {
                expected: format!("{batch} condition labels"),
                got: "different length".into(),
            }),
            (true, None) => Err(Error::Config("conditional critic requires a condition".into())),
            (false, Some(_)) => Err(Error::Config(
                "condition supplied to unconditional critic".into(),
            )),
            (false, None) => Ok(()),
        }
    }

    /// The `(batch, 1, n_t, n_r)` condition map appended to the input.
    pub fn condition_map(&self, chi: &[u8]) -> Result<Array4<f64>> {
        let (table, lin) = self
            .embed
            .as_ref()
            .ok_or_else(|| Error::Config("critic is unconditional".into()))?;
        if chi.iter().any(|&c| c > 1) {
            return Err(Error::Config("condition labels must be 0 or 1".into()));
        }
        let e = lin.forward(&table.forward(chi));
        Ok(e.into_shape_with_order((chi.len(), 1, self.spec.n_t, self.spec.n_r))
            .expect("condition map shape"))
    }

    fn run_forward<R: Rng + ?Sized>(
        &self,
        x: &Array4<f64>,
        chi: Option<&[u8]>,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<(Array1<f64>, CriticCache, Vec<Option<BnStats>>)> {
        let (batch, ch, h, w) = x.dim();
        if ch != 2 || h != self.spec.n_t || w != self.spec.n_r {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, 2, {}, {})", self.spec.n_t, self.spec.n_r),
                got: format!("{:?}", x.dim()),
            });
        }
        self.check_condition(batch, chi)?;
        let train = mode == Mode::Train;
        let mut rng = rng;
        let mut drop = |dim: (usize, usize, usize, usize)| -> Option<Array4<f64>> {
            if train && self.spec.dropout > 0.0 {
                let r = rng.as_deref_mut().expect("training forward needs an rng");
                Some(dropout_mask(dim, self.spec.dropout, r))
            } else {
                None
            }
        };

        let x_full = if let Some(labels) = chi {
            let cond = self.condition_map(labels)?;
            let mut full = Array4::zeros((batch, 3, h, w));
            full.slice_mut(s![.., ..2, .., ..]).assign(x);
            full.slice_mut(s![.., 2.., .., ..]).assign(&cond);
            full
        } else {
            x.clone()
        };

        let a1 = self.conv1.forward(&x_full);
        let (a1, m1) = leaky_relu(&a1, self.spec.leaky_slope);
        let d1 = drop(a1.dim());
        let t1 = match &d1 {
            Some(m) => &a1 * m,
            None => a1,
        };

        let a2 = self.conv2.forward(&t1);
        let a2p = self.pad.forward(&a2);
        let (a2p, m2) = leaky_relu(&a2p, self.spec.leaky_slope);
        let d2 = drop(a2p.dim());
        let pre_bn2 = match &d2 {
            Some(m) => &a2p * m,
            None => a2p,
        };
        let (t2, bn2_cache, bn2_stats, bn2_in) = match &self.bn2 {
            Some(bn) => {
                let (y, c, st) = bn.compute(&pre_bn2, mode);
                (y, Some(c), st, Some(pre_bn2))
            }
            None => (pre_bn2, None, None, None),
        };

        let a3 = self.conv3.forward(&t2);
        let (a3, m3) = leaky_relu(&a3, self.spec.leaky_slope);
        let d3 = drop(a3.dim());
        let pre_bn3 = match &d3 {
            Some(m) => &a3 * m,
            None => a3,
        };
        let (t3, bn3_cache, bn3_stats, bn3_in) = match &self.bn3 {
            Some(bn) => {
                let (y, c, st) = bn.compute(&pre_bn3, mode);
                (y, Some(c), st, Some(pre_bn3))
            }
            None => (pre_bn3, None, None, None),
        };

        let a4 = self.conv4.forward(&t3);
        let (a4, m4) = leaky_relu(&a4, self.spec.leaky_slope);
        let d4 = drop(a4.dim());
        let pre_bn4 = match &d4 {
            Some(m) => &a4 * m,
            None => a4,
        };
        let (t4, bn4_cache, bn4_stats, bn4_in) = match &self.bn4 {
            Some(bn) => {
                let (y, c, st) = bn.compute(&pre_bn4, mode);
                (y, Some(c), st, Some(pre_bn4))
            }
            None => (pre_bn4, None, None, None),
        };

        let flat = t4.len() / batch;
        let v = t4
            .into_shape_with_order((batch, flat))
            .expect("flatten");
        let scores_mat = self.linear.forward(&v);
        let scores = scores_mat.column(0).to_owned();

        let cache = CriticCache {
            x_full,
            chi: chi.map(|c| c.to_vec()),
            m1,
            d1,
            t1,
            m2,
            d2,
            bn2_cache,
            bn2_in,
            t2,
            m3,
            d3,
            bn3_cache,
            bn3_in,
            t3,
            m4,
            d4,
            bn4_cache,
            bn4_in,
            v,
            scores,
        };
        let scores = cache.scores.clone();
        Ok((scores, cache, vec![bn2_stats, bn3_stats, bn4_stats]))
    }

    /// Training-mode forward (dropout active, batch statistics absorbed).
    /// Returns pre-sigmoid scores.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        x: &Array4<f64>,
        chi: Option<&[u8]>,
        rng: &mut R,
    ) -> Result<(Array1<f64>, CriticCache)> {
        let (scores, cache, stats) = self.run_forward(x, chi, Mode::Train, Some(rng))?;
        let mut it = stats.into_iter();
        if let Some(bn) = &mut self.bn2 {
            bn.absorb(it.next().unwrap());
        } else {
            it.next();
        }
        if let Some(bn) = &mut self.bn3 {
            bn.absorb(it.next().unwrap());
        } else {
            it.next();
        }
        if let Some(bn) = &mut self.bn4 {
            bn.absorb(it.next().unwrap());
        }
        Ok((scores, cache))
    }

    /// Evaluation-mode forward; deterministic, pre-sigmoid scores.
    pub fn forward_eval(&self, x: &Array4<f64>, chi: Option<&[u8]>) -> Result<(Array1<f64>, CriticCache)> {
        let (scores, cache, _) = self.run_forward::<rand::rngs::ThreadRng>(x, chi, Mode::Eval, None)?;
        Ok((scores, cache))
    }

    /// Sigmoid-squashed probabilities (LOS predictor head).
    pub fn probabilities(&self, scores: &Array1<f64>) -> Result<Array1<f64>> {
        if !self.spec.sigmoid {
            return Err(Error::Config("network has no sigmoid head".into()));
        }
        Ok(scores.mapv(sigmoid_scalar))
    }

    fn hw_chain(&self) -> [(usize, usize); 5] {
        let (nt, nr) = (self.spec.n_t, self.spec.n_r);
        let hw1 = (ceil_div(nt, 2), ceil_div(nr, 2));
        let hw2 = (ceil_div(hw1.0, 2), ceil_div(hw1.1, 2));
        let hw2p = (hw2.0 + 1, hw2.1 + 1);
        let hw3 = (ceil_div(hw2p.0, 2), ceil_div(hw2p.1, 2));
        [(nt, nr), hw1, hw2, hw2p, hw3]
    }

    /// Gradient of `sum_b upstream[b] * score[b]` with respect to the
    /// network input (both channels, condition channel included last),
    /// together with the per-layer trace needed for the double backward.
    pub fn input_gradient(
        &self,
        cache: &CriticCache,
        upstream: &Array1<f64>,
    ) -> (Array4<f64>, GradTrace) {
        let batch = cache.v.nrows();
        let [hw0, hw1, hw2, _hw2p, hw3] = self.hw_chain();

        // Linear layer: g_v[b] = upstream[b] * w.
        let mut g_v = Array2::<f64>::zeros(cache.v.dim());
        for b in 0..batch {
            for j in 0..cache.v.ncols() {
                g_v[[b, j]] = upstream[b] * self.linear.w[[0, j]];
            }
        }
        let c8 = 8 * self.spec.base_channels;
        let mut g = g_v
            .into_shape_with_order((batch, c8, hw3.0, hw3.1))
            .expect("unflatten");
        if let (Some(bn), Some(c)) = (&self.bn4, &cache.bn4_cache) {
            g = bn.backward(c, &g).0;
        }
        if let Some(d) = &cache.d4 {
            g = &g * d;
        }
        g = &g * &cache.m4;
        let gout4 = g;
        let g = self.conv4.backward_input(&gout4, hw3);

        let mut g = g;
        if let (Some(bn), Some(c)) = (&self.bn3, &cache.bn3_cache) {
            g = bn.backward(c, &g).0;
        }
        if let Some(d) = &cache.d3 {
            g = &g * d;
        }
        g = &g * &cache.m3;
        let gout3 = g;
        let g = self.conv3.backward_input(&gout3, (hw2.0 + 1, hw2.1 + 1));

        let mut g = g;
        if let (Some(bn), Some(c)) = (&self.bn2, &cache.bn2_cache) {
            g = bn.backward(c, &g).0;
        }
        if let Some(d) = &cache.d2 {
            g = &g * d;
        }
        g = &g * &cache.m2;
        let g = self.pad.backward(&g);
        let gout2 = g;
        let g = self.conv2.backward_input(&gout2, hw1);

        let mut g = g;
        if let Some(d) = &cache.d1 {
            g = &g * d;
        }
        g = &g * &cache.m1;
        let gout1 = g;
        let g_x = self.conv1.backward_input(&gout1, hw0);

        (
            g_x,
            GradTrace {
                gout1,
                gout2,
                gout3,
                gout4,
                upstream: upstream.clone(),
            },
        )
    }

    /// Double-backward of the gradient penalty: given `u = dPen/dg` at the
    /// first two input channels, accumulate the penalty's parameter
    /// gradients. Requires a batch-norm-free trunk.
    pub fn gp_double_backward(
        &self,
        cache: &CriticCache,
        trace: &GradTrace,
        u_x: &Array4<f64>,
    ) -> Result<Vec<ArrayD<f64>>> {
        if self.spec.batch_norm {
            return Err(Error::Config(
                "gradient penalty is incompatible with batch normalization".into(),
            ));
        }
        let batch = u_x.dim().0;
        // Zero-extend the perturbation over the condition channel: the
        // penalty differentiates with respect to the channel input only.
        let u_full = if self.spec.conditional {
            let (_, _, h, w) = cache.x_full.dim();
            let mut full = Array4::zeros((batch, 3, h, w));
            full.slice_mut(s![.., ..2, .., ..]).assign(u_x);
            full
        } else {
            u_x.clone()
        };

        let u1 = self.conv1.forward_nobias(&u_full);
        let (dw1, _) = self.conv1.weight_grad(&u_full, &trace.gout1);
        let mut u = u1;
        u = &u * &cache.m1;
        if let Some(d) = &cache.d1 {
            u = &u * d;
        }

        let u2 = self.conv2.forward_nobias(&u);
        let (dw2, _) = self.conv2.weight_grad(&u, &trace.gout2);
        let mut u = self.pad.forward(&u2);
        u = &u * &cache.m2;
        if let Some(d) = &cache.d2 {
            u = &u * d;
        }

        let u3 = self.conv3.forward_nobias(&u);
        let (dw3, _) = self.conv3.weight_grad(&u, &trace.gout3);
        let mut u = u3;
        u = &u * &cache.m3;
        if let Some(d) = &cache.d3 {
            u = &u * d;
        }

        let u4 = self.conv4.forward_nobias(&u);
        let (dw4, _) = self.conv4.weight_grad(&u, &trace.gout4);
        let mut u = u4;
        u = &u * &cache.m4;
        if let Some(d) = &cache.d4 {
            u = &u * d;
        }

        let flat = u.len() / batch;
        let u_v = u.into_shape_with_order((batch, flat)).expect("flatten");
        // Linear weight: dW[0, j] += sum_b upstream[b] * u_v[b, j].
        let mut dw_lin = Array2::<f64>::zeros(self.linear.w.dim());
        for b in 0..batch {
            for j in 0..flat {
                dw_lin[[0, j]] += trace.upstream[b] * u_v[[b, j]];
            }
        }

        let mut grads = self.zero_grads();
        let mut idx = 0;
        if self.embed.is_some() {
            idx += 3; // embedding parameters get no penalty gradient
        }
        grads[idx] += &dw1.into_dyn();
        idx += 2; // skip conv1 bias
        grads[idx] += &dw2.into_dyn();
        idx += 2;
        grads[idx] += &dw3.into_dyn();
        idx += 2;
        grads[idx] += &dw4.into_dyn();
        idx += 2;
        grads[idx] += &dw_lin.into_dyn();
        Ok(grads)
    }

    /// Standard parameter gradients for upstream per-sample score gradients.
    /// Optionally also returns the input gradient (first two channels).
    pub fn backward_params(
        &self,
        cache: &CriticCache,
        upstream: &Array1<f64>,
        want_input_grad: bool,
    ) -> (Vec<ArrayD<f64>>, Option<Array4<f64>>) {
        let batch = cache.v.nrows();
        let [hw0, hw1, hw2, _hw2p, hw3] = self.hw_chain();

        let dscore = upstream
            .view()
            .to_owned()
            .into_shape_with_order((batch, 1))
            .expect("score shape");
        let (d_v, dw_lin, db_lin) = self.linear.backward(&cache.v, &dscore);

        let c8 = 8 * self.spec.base_channels;
        let mut d = d_v
            .into_shape_with_order((batch, c8, hw3.0, hw3.1))
            .expect("unflatten");
        let mut bn4_grads = None;
        if let (Some(bn), Some(c)) = (&self.bn4, &cache.bn4_cache) {
            let (dx, dg, dbta) = bn.backward(c, &d);
            d = dx;
            bn4_grads = Some((dg, dbta));
        }
        if let Some(dm) = &cache.d4 {
            d = &d * dm;
        }
        d = &d * &cache.m4;
        let (dw4, db4) = self.conv4.weight_grad(&cache.t3, &d);
        let mut d = self.conv4.backward_input(&d, hw3);

        let mut bn3_grads = None;
        if let (Some(bn), Some(c)) = (&self.bn3, &cache.bn3_cache) {
            let (dx, dg, dbta) = bn.backward(c, &d);
            d = dx;
            bn3_grads = Some((dg, dbta));
        }
        if let Some(dm) = &cache.d3 {
            d = &d * dm;
        }
        d = &d * &cache.m3;
        let (dw3, db3) = self.conv3.weight_grad(&cache.t2, &d);
        let d = self.conv3.backward_input(&d, (hw2.0 + 1, hw2.1 + 1));

        let mut d = d;
        let mut bn2_grads = None;
        if let (Some(bn), Some(c)) = (&self.bn2, &cache.bn2_cache) {
            let (dx, dg, dbta) = bn.backward(c, &d);
            d = dx;
            bn2_grads = Some((dg, dbta));
        }
        if let Some(dm) = &cache.d2 {
            d = &d * dm;
        }
        d = &d * &cache.m2;
        let d = self.pad.backward(&d);
        let (dw2, db2) = self.conv2.weight_grad(&cache.t1, &d);
        let mut d = self.conv2.backward_input(&d, hw1);

        if let Some(dm) = &cache.d1 {
            d = &d * dm;
        }
        d = &d * &cache.m1;
        let (dw1, db1) = self.conv1.weight_grad(&cache.x_full, &d);

        // Input gradient is needed when asked for, and always for the
        // condition path of a conditional critic.
        let d_x_full = (want_input_grad || self.embed.is_some())
            .then(|| self.conv1.backward_input(&d, hw0));

        let mut grads: Vec<ArrayD<f64>> = Vec::new();
        if let Some((table, lin)) = &self.embed {
            let labels = cache.chi.as_ref().expect("conditional cache has labels");
            let d_cond = d_x_full
                .as_ref()
                .expect("input gradient computed above")
                .slice(s![.., 2.., .., ..])
                .to_owned()
                .into_shape_with_order((batch, self.spec.n_t * self.spec.n_r))
                .expect("condition grad reshape");
            let emb_out = table.forward(labels);
            let (d_emb, dw_el, db_el) = lin.backward(&emb_out, &d_cond);
            let d_table = table.backward(labels, &d_emb);
            grads.push(d_table.into_dyn());
            grads.push(dw_el.into_dyn());
            grads.push(db_el.expect("embed linear has bias").into_dyn());
        }
        grads.push(dw1.into_dyn());
        grads.push(db1.expect("conv bias").into_dyn());
        push_conv_grads(&mut grads, dw2, db2, bn2_grads.take());
        push_conv_grads(&mut grads, dw3, db3, bn3_grads.take());
        push_conv_grads(&mut grads, dw4, db4, bn4_grads.take());
        grads.push(dw_lin.into_dyn());
        grads.push(db_lin.expect("linear bias").into_dyn());

        let dx = want_input_grad
            .then(|| d_x_full.as_ref().map(|g| g.slice(s![.., ..2, .., ..]).to_owned()))
            .flatten();
        (grads, dx)
    }

    /// Zero-filled gradient set aligned with [`Critic::params`].
    pub fn zero_grads(&self) -> Vec<ArrayD<f64>> {
        self.params()
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.embed.is_some() {
            names.push("embed.table".into());
            names.push("embed_linear.w".into());
            names.push("embed_linear.b".into());
        }
        for (i, has_bn) in [(1, false), (2, self.bn2.is_some()), (3, self.bn3.is_some()), (4, self.bn4.is_some())] {
            names.push(format!("conv{i}.w"));
            names.push(format!("conv{i}.b"));
            if has_bn && i > 1 {
                names.push(format!("bn{i}.gamma"));
                names.push(format!("bn{i}.beta"));
            }
        }
        names.push("linear.w".into());
        names.push("linear.b".into());
        names
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut v: Vec<ArrayViewD<'_, f64>> = Vec::new();
        if let Some((table, lin)) = &self.embed {
            v.push(table.table.view().into_dyn());
            v.push(lin.w.view().into_dyn());
            v.push(lin.b.as_ref().unwrap().view().into_dyn());
        }
        v.push(self.conv1.w.view().into_dyn());
        v.push(self.conv1.b.as_ref().unwrap().view().into_dyn());
        v.push(self.conv2.w.view().into_dyn());
        v.push(self.conv2.b.as_ref().unwrap().view().into_dyn());
        if let Some(bn) = &self.bn2 {
            v.push(bn.gamma.view().into_dyn());
            v.push(bn.beta.view().into_dyn());
        }
        v.push(self.conv3.w.view().into_dyn());
        v.push(self.conv3.b.as_ref().unwrap().view().into_dyn());
        if let Some(bn) = &self.bn3 {
            v.push(bn.gamma.view().into_dyn());
            v.push(bn.beta.view().into_dyn());
        }
        v.push(self.conv4.w.view().into_dyn());
        v.push(self.conv4.b.as_ref().unwrap().view().into_dyn());
        if let Some(bn) = &self.bn4 {
            v.push(bn.gamma.view().into_dyn());
            v.push(bn.beta.view().into_dyn());
        }
        v.push(self.linear.w.view().into_dyn());
        v.push(self.linear.b.as_ref().unwrap().view().into_dyn());
        v
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut v: Vec<ArrayViewMutD<'_, f64>> = Vec::new();
        if let Some((table, lin)) = &mut self.embed {
            v.push(table.table.view_mut().into_dyn());
            v.push(lin.w.view_mut().into_dyn());
            v.push(lin.b.as_mut().unwrap().view_mut().into_dyn());
        }
        v.push(self.conv1.w.view_mut().into_dyn());
        v.push(self.conv1.b.as_mut().unwrap().view_mut().into_dyn());
        v.push(self.conv2.w.view_mut().into_dyn());
        v.push(self.conv2.b.as_mut().unwrap().view_mut().into_dyn());
        if let Some(bn) = &mut self.bn2 {
            v.push(bn.gamma.view_mut().into_dyn());
            v.push(bn.beta.view_mut().into_dyn());
        }
        v.push(self.conv3.w.view_mut().into_dyn());
        v.push(self.conv3.b.as_mut().unwrap().view_mut().into_dyn());
        if let Some(bn) = &mut self.bn3 {
            v.push(bn.gamma.view_mut().into_dyn());
            v.push(bn.beta.view_mut().into_dyn());
        }
        v.push(self.conv4.w.view_mut().into_dyn());
        v.push(self.conv4.b.as_mut().unwrap().view_mut().into_dyn());
        if let Some(bn) = &mut self.bn4 {
            v.push(bn.gamma.view_mut().into_dyn());
            v.push(bn.beta.view_mut().into_dyn());
        }
        v.push(self.linear.w.view_mut().into_dyn());
        v.push(self.linear.b.as_mut().unwrap().view_mut().into_dyn());
        v
    }

    pub fn buffer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, present) in [(2, self.bn2.is_some()), (3, self.bn3.is_some()), (4, self.bn4.is_some())] {
            if present {
                names.push(format!("bn{i}.running_mean"));
                names.push(format!("bn{i}.running_var"));
            }
        }
        names
    }

    pub fn buffers(&self) -> Vec<ArrayViewD<'_, f64>> {
        [&self.bn2, &self.bn3, &self.bn4]
            .into_iter()
            .flatten()
            .flat_map(|bn| {
                vec![
                    bn.running_mean.view().into_dyn(),
                    bn.running_var.view().into_dyn(),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        [&mut self.bn2, &mut self.bn3, &mut self.bn4]
            .into_iter()
            .flatten()
            .flat_map(|bn| {
                vec![
                    bn.running_mean.view_mut().into_dyn(),
                    bn.running_var.view_mut().into_dyn(),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn push_conv_grads(
    grads: &mut Vec<ArrayD<f64>>,
    dw: Array4<f64>,
    db: Option<Array1<f64>>,
    bn: Option<(Array1<f64>, Array1<f64>)>,
) {
    grads.push(dw.into_dyn());
    grads.push(db.expect("conv bias").into_dyn());
    if let Some((dg, dbeta)) = bn {
        grads.push(dg.into_dyn());
        grads.push(dbeta.into_dyn());
    }
}
