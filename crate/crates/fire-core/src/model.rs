//! The registration/synthesis networks.
//!
//! One shared encoder `G` maps either modality to a latent feature stack at
//! quarter resolution. Two decoders map latents to synthesized images, one
//! per direction. Two transformation networks — each an affine subnet
//! followed by a non-rigid subnet — predict the warp between the two
//! feature stacks. The transform heads are identity-initialized, so an
//! untrained model is exactly the identity transformation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FireError, Result};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, resnet_block, Activation, Padding, ResBlockParams, Tensor};
use crate::warp::{
    affine_grid, compose, sample, AffineMatrix, Border, DisplacementField, SampleGrid,
};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Spatial rank: 2 or 3.
    pub dim: usize,
    /// Width of the first encoder block; deeper stages use 2x and 4x.
    /// 64 reproduces the published architecture; 16 is the desk default.
    pub base_channels: usize,
    /// Residual blocks in the encoder and in each decoder.
    pub resnet_blocks: usize,
    /// Bound on non-rigid displacement components, in normalized units.
    pub delta_max: f64,
    /// Negative-side slope of the transform nets' activations.
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 2,
            base_channels: 16,
            resnet_blocks: 4,
            delta_max: 0.25,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(FireError::InvalidArgument(format!(
                "model.dim must be 2 or 3, got {}",
                self.dim
            )));
        }
        if self.base_channels < 4 {
            return Err(FireError::InvalidArgument(
                "model.base_channels must be >= 4".into(),
            ));
        }
        if !(self.delta_max > 0.0 && self.delta_max <= 1.0) {
            return Err(FireError::InvalidArgument(
                "model.delta_max must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Latent width produced by the encoder.
    pub fn feature_channels(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AB,
    BA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterMode {
    AffineOnly,
    Full,
}

/// Which optimizer a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    AffineNets,
    NonrigidNets,
    SynthesisNets,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("taf_") {
        ParamGroup::AffineNets
    } else if name.starts_with("tnr_") {
        ParamGroup::NonrigidNets
    } else {
        ParamGroup::SynthesisNets
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Fan-in-scaled zero-mean normal weights.
    fn normal<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data: Vec<S> = (0..shape.iter().product::<usize>())
            .map(|_| crate::scalar::s(dist.sample(&mut self.rng)))
            .collect();
        Tensor::param(shape, data).expect("finite init")
    }

    fn conv<S: Scalar>(&mut self, c_out: usize, c_in: usize, k: usize, dim: usize) -> Tensor<S> {
        let mut shape = vec![c_out, c_in];
        shape.extend(std::iter::repeat_n(k, dim));
        let fan_in = c_in * k.pow(dim as u32);
        self.normal(&shape, fan_in)
    }

    fn res_block<S: Scalar>(&mut self, width: usize, dim: usize) -> ResBlockParams<S> {
        ResBlockParams {
            w1: self.conv(width, width, 3, dim),
            w2: self.conv(width, width, 3, dim),
        }
    }

    fn dense<S: Scalar>(&mut self, out: usize, inp: usize) -> (Tensor<S>, Tensor<S>) {
        (
            self.normal(&[out, inp], inp),
            Tensor::param(&[out], vec![S::zero(); out]).expect("zero bias"),
        )
    }
}

struct Encoder<S: Scalar> {
    conv_in: Tensor<S>,
    down1: Tensor<S>,
    down2: Tensor<S>,
    blocks: Vec<ResBlockParams<S>>,
}

impl<S: Scalar> Encoder<S> {
    fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let c = cfg.base_channels;
        Encoder {
            conv_in: init.conv(c, 1, 7, cfg.dim),
            down1: init.conv(2 * c, c, 3, cfg.dim),
            down2: init.conv(4 * c, 2 * c, 3, cfg.dim),
            blocks: (0..cfg.resnet_blocks)
                .map(|_| init.res_block(4 * c, cfg.dim))
                .collect(),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        for (a, &e) in x.shape()[1..].iter().enumerate() {
            if e < 16 || e % 4 != 0 {
                return Err(FireError::InvalidShape {
                    op: "encode",
                    shape: x.shape().to_vec(),
                    reason: format!("spatial axis {a} must be >= 16 and divisible by 4"),
                });
            }
        }
        let mut y = x
            .conv_nd(&self.conv_in, 1, Padding::Same)?
            .instance_norm(NORM_EPS)?
            .relu();
        y = y
            .conv_nd(&self.down1, 2, Padding::Same)?
            .instance_norm(NORM_EPS)?
            .relu();
        y = y
            .conv_nd(&self.down2, 2, Padding::Same)?
            .instance_norm(NORM_EPS)?
            .relu();
        for b in &self.blocks {
            y = resnet_block(&y, b, Activation::Relu, NORM_EPS)?;
        }
        Ok(y)
    }
}

struct Decoder<S: Scalar> {
    blocks: Vec<ResBlockParams<S>>,
    up1: Tensor<S>,
    up2: Tensor<S>,
    conv_out: Tensor<S>,
    head_w: Tensor<S>,
    head_b: Tensor<S>,
}

impl<S: Scalar> Decoder<S> {
    fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let c = cfg.base_channels;
        Decoder {
            blocks: (0..cfg.resnet_blocks)
                .map(|_| init.res_block(4 * c, cfg.dim))
                .collect(),
            up1: init.conv(2 * c, 4 * c, 3, cfg.dim),
            up2: init.conv(c, 2 * c, 3, cfg.dim),
            conv_out: init.conv(3, c, 7, cfg.dim),
            head_w: init.conv(1, 3, 1, cfg.dim),
            head_b: Tensor::param(&[1], vec![S::zero()]).expect("zero bias"),
        }
    }

    fn forward(&self, g: &Tensor<S>) -> Result<Tensor<S>> {
        let mut y = g.clone();
        for b in &self.blocks {
            y = resnet_block(&y, b, Activation::Relu, NORM_EPS)?;
        }
        let doubled: Vec<usize> = y.shape()[1..].iter().map(|e| e * 2).collect();
        y = y
            .resize_linear(&doubled)?
            .conv_nd(&self.up1, 1, Padding::Same)?
            .instance_norm(NORM_EPS)?
            .relu();
        let doubled: Vec<usize> = y.shape()[1..].iter().map(|e| e * 2).collect();
        y = y
            .resize_linear(&doubled)?
            .conv_nd(&self.up2, 1, Padding::Same)?
            .instance_norm(NORM_EPS)?
            .relu();
        y = y
            .conv_nd(&self.conv_out, 1, Padding::Same)?
            .instance_norm(NORM_EPS)?
            .relu();
        let y = y
            .conv_nd(&self.head_w, 1, Padding::Same)?
            .add_channel_bias(&self.head_b)?;
        Ok(y.tanh_act())
    }
}

struct AffineNet<S: Scalar> {
    c1: Tensor<S>,
    c2: Tensor<S>,
    c3: Tensor<S>,
    fc1_w: Tensor<S>,
    fc1_b: Tensor<S>,
    fc2_w: Tensor<S>,
    fc2_b: Tensor<S>,
}

impl<S: Scalar> AffineNet<S> {
    fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let cf = cfg.feature_channels();
        let n = cfg.dim;
        let (fc1_w, fc1_b) = init.dense(cf / 4, cf / 4);
        // Identity initialization: zero weights, identity-matrix bias, so
        // the predicted transform starts exactly at the identity.
        let fc2_w = Tensor::param(&[n * (n + 1), cf / 4], vec![S::zero(); n * (n + 1) * cf / 4])
            .expect("zero head");
        let ident = AffineMatrix::<S>::identity(n);
        let fc2_b =
            Tensor::param(&[n * (n + 1)], ident.entries().data().to_vec()).expect("identity bias");
        AffineNet {
            c1: init.conv(cf, 2 * cf, 3, cfg.dim),
            c2: init.conv(cf / 2, cf, 3, cfg.dim),
            c3: init.conv(cf / 4, cf / 2, 3, cfg.dim),
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }

    fn forward(
        &self,
        g_moving: &Tensor<S>,
        g_fixed: &Tensor<S>,
        cfg: &ModelConfig,
    ) -> Result<AffineMatrix<S>> {
        if g_moving.shape() != g_fixed.shape() {
            return Err(FireError::ShapeMismatch {
                op: "predict_affine",
                lhs: g_moving.shape().to_vec(),
                rhs: g_fixed.shape().to_vec(),
            });
        }
        let slope = cfg.leaky_slope;
        let mut y = g_moving.concat_channels(g_fixed)?;
        for conv in [&self.c1, &self.c2, &self.c3] {
            y = y.conv_nd(conv, 2, Padding::Same)?;
            y = maybe_instance_norm(y)?;
            y = y.leaky_relu(slope);
        }
        let v = y.global_avg_pool()?;
        let h = v.dense(&self.fc1_w, &self.fc1_b)?.leaky_relu(slope);
        let e = h.dense(&self.fc2_w, &self.fc2_b)?;
        let n = cfg.dim;
        AffineMatrix::from_tensor(e.reshape(&[n, n + 1])?)
    }
}

/// Instance norm, skipped on degenerate single-point feature maps (which
/// appear when the affine subnet downsamples very small latents).
fn maybe_instance_norm<S: Scalar>(y: Tensor<S>) -> Result<Tensor<S>> {
    if y.shape()[1..].iter().product::<usize>() >= 2 {
        y.instance_norm(NORM_EPS)
    } else {
        Ok(y)
    }
}

struct NonrigidNet<S: Scalar> {
    m1: Tensor<S>,
    m2: Tensor<S>,
    f1: Tensor<S>,
    f2: Tensor<S>,
    fuse: ResBlockParams<S>,
    out_w: Tensor<S>,
    out_b: Tensor<S>,
}

impl<S: Scalar> NonrigidNet<S> {
    fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let cf = cfg.feature_channels();
        let n = cfg.dim;
        let mut out_shape = vec![n, cf];
        out_shape.extend(std::iter::repeat_n(3, cfg.dim));
        NonrigidNet {
            m1: init.conv(cf / 2, cf, 3, cfg.dim),
            m2: init.conv(cf / 2, cf / 2, 3, cfg.dim),
            f1: init.conv(cf / 2, cf, 3, cfg.dim),
            f2: init.conv(cf / 2, cf / 2, 3, cfg.dim),
            fuse: init.res_block(cf, cfg.dim),
            // Zero-initialized head: the predicted field starts at zero,
            // i.e. the identity transformation.
            out_w: Tensor::param(&out_shape, vec![S::zero(); n * cf * 3usize.pow(cfg.dim as u32)])
                .expect("zero head"),
            out_b: Tensor::param(&[n], vec![S::zero(); n]).expect("zero bias"),
        }
    }

    fn forward(
        &self,
        g_moving_warped: &Tensor<S>,
        g_fixed: &Tensor<S>,
        cfg: &ModelConfig,
    ) -> Result<DisplacementField<S>> {
        if g_moving_warped.shape() != g_fixed.shape() {
            return Err(FireError::ShapeMismatch {
                op: "predict_nonrigid",
                lhs: g_moving_warped.shape().to_vec(),
                rhs: g_fixed.shape().to_vec(),
            });
        }
        let slope = cfg.leaky_slope;
        let branch = |x: &Tensor<S>, w1: &Tensor<S>, w2: &Tensor<S>| -> Result<Tensor<S>> {
            let y = x
                .conv_nd(w1, 1, Padding::Same)?
                .instance_norm(NORM_EPS)?
                .leaky_relu(slope);
            Ok(y
                .conv_nd(w2, 1, Padding::Same)?
                .instance_norm(NORM_EPS)?
                .leaky_relu(slope))
        };
        let bm = branch(g_moving_warped, &self.m1, &self.m2)?;
        let bf = branch(g_fixed, &self.f1, &self.f2)?;
        let y = bm.concat_channels(&bf)?;
        let y = resnet_block(&y, &self.fuse, Activation::LeakyRelu(slope), NORM_EPS)?;
        let u = y
            .conv_nd(&self.out_w, 1, Padding::Same)?
            .add_channel_bias(&self.out_b)?
            .tanh_act()
            .scale(cfg.delta_max);
        DisplacementField::from_tensor(u)
    }
}

/// Every intermediate of one training pass that the losses consume.
pub struct ForwardBundle<S: Scalar = f32> {
    pub input_a: Tensor<S>,
    pub input_b: Tensor<S>,
    pub g_a: Tensor<S>,
    pub g_b: Tensor<S>,
    pub aff_ab: AffineMatrix<S>,
    pub aff_ba: AffineMatrix<S>,
    pub u_ab: DisplacementField<S>,
    pub u_ba: DisplacementField<S>,
    pub grid_ab_feat: SampleGrid<S>,
    pub grid_ba_feat: SampleGrid<S>,
    pub grid_ab_img: SampleGrid<S>,
    pub grid_ba_img: SampleGrid<S>,
    /// Synthesized images from unwarped latents.
    pub synth_b: Tensor<S>,
    pub synth_a: Tensor<S>,
    /// Synthesized images from fully-warped latents.
    pub synth_warped_b: Tensor<S>,
    pub synth_warped_a: Tensor<S>,
    /// Re-encoded synthesized images.
    pub g_of_synth_b: Tensor<S>,
    pub g_of_synth_a: Tensor<S>,
    /// Cycle reconstructions.
    pub cycle_a: Tensor<S>,
    pub cycle_b: Tensor<S>,
    /// Fully-warped latents.
    pub warped_feat_ab: Tensor<S>,
    pub warped_feat_ba: Tensor<S>,
    /// Decodes of affine-only warped latents.
    pub affine_feat_decode_b: Tensor<S>,
    pub affine_feat_decode_a: Tensor<S>,
    /// Decodes of re-encoded affine-only warped images.
    pub affine_image_decode_b: Tensor<S>,
    pub affine_image_decode_a: Tensor<S>,
    /// Inputs pushed through the full composed warp.
    pub warped_input_a: Tensor<S>,
    pub warped_input_b: Tensor<S>,
}

/// All learnable parameters of the two-direction registration model.
pub struct FireModel<S: Scalar = f32> {
    pub config: ModelConfig,
    encoder: Encoder<S>,
    dec_ab: Decoder<S>,
    dec_ba: Decoder<S>,
    taf_ab: AffineNet<S>,
    taf_ba: AffineNet<S>,
    tnr_ab: NonrigidNet<S>,
    tnr_ba: NonrigidNet<S>,
}

impl<S: Scalar> FireModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        Ok(FireModel {
            encoder: Encoder::new(&config, &mut init),
            dec_ab: Decoder::new(&config, &mut init),
            dec_ba: Decoder::new(&config, &mut init),
            taf_ab: AffineNet::new(&config, &mut init),
            taf_ba: AffineNet::new(&config, &mut init),
            tnr_ab: NonrigidNet::new(&config, &mut init),
            tnr_ba: NonrigidNet::new(&config, &mut init),
            config,
        })
    }

    pub fn encode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, g: &Tensor<S>, direction: Direction) -> Result<Tensor<S>> {
        match direction {
            Direction::AB => self.dec_ab.forward(g),
            Direction::BA => self.dec_ba.forward(g),
        }
    }

    pub fn predict_affine(
        &self,
        g_moving: &Tensor<S>,
        g_fixed: &Tensor<S>,
        direction: Direction,
    ) -> Result<AffineMatrix<S>> {
        match direction {
            Direction::AB => self.taf_ab.forward(g_moving, g_fixed, &self.config),
            Direction::BA => self.taf_ba.forward(g_moving, g_fixed, &self.config),
        }
    }

    pub fn predict_nonrigid(
        &self,
        g_moving_warped: &Tensor<S>,
        g_fixed: &Tensor<S>,
        direction: Direction,
    ) -> Result<DisplacementField<S>> {
        match direction {
            Direction::AB => self.tnr_ab.forward(g_moving_warped, g_fixed, &self.config),
            Direction::BA => self.tnr_ba.forward(g_moving_warped, g_fixed, &self.config),
        }
    }

    /// Full training forward pass over one image pair.
    pub fn forward_pair(&self, x_a: &Tensor<S>, x_b: &Tensor<S>) -> Result<ForwardBundle<S>> {
        if x_a.shape() != x_b.shape() {
            return Err(FireError::ShapeMismatch {
                op: "forward_pair",
                lhs: x_a.shape().to_vec(),
                rhs: x_b.shape().to_vec(),
            });
        }
        let img_sp = x_a.shape()[1..].to_vec();

        let g_a = self.encode(x_a)?;
        let g_b = self.encode(x_b)?;
        let feat_sp = g_a.shape()[1..].to_vec();

        let aff_ab = self.predict_affine(&g_a, &g_b, Direction::AB)?;
        let aff_ba = self.predict_affine(&g_b, &g_a, Direction::BA)?;

        let af_ab_feat = affine_grid(&aff_ab, &feat_sp)?;
        let af_ba_feat = affine_grid(&aff_ba, &feat_sp)?;
        let g_a_afw = sample(&g_a, &af_ab_feat, Border::Clamp)?;
        let g_b_afw = sample(&g_b, &af_ba_feat, Border::Clamp)?;

        let u_ab = self.predict_nonrigid(&g_a_afw, &g_b, Direction::AB)?;
        let u_ba = self.predict_nonrigid(&g_b_afw, &g_a, Direction::BA)?;

        let grid_ab_feat = compose(&aff_ab, &u_ab, &feat_sp)?;
        let grid_ba_feat = compose(&aff_ba, &u_ba, &feat_sp)?;
        let grid_ab_img = compose(&aff_ab, &u_ab, &img_sp)?;
        let grid_ba_img = compose(&aff_ba, &u_ba, &img_sp)?;

        let warped_feat_ab = sample(&g_a, &grid_ab_feat, Border::Clamp)?;
        let warped_feat_ba = sample(&g_b, &grid_ba_feat, Border::Clamp)?;

        let synth_b = self.decode(&g_a, Direction::AB)?;
        let synth_a = self.decode(&g_b, Direction::BA)?;
        let synth_warped_b = self.decode(&warped_feat_ab, Direction::AB)?;
        let synth_warped_a = self.decode(&warped_feat_ba, Direction::BA)?;

        let g_of_synth_b = self.encode(&synth_b)?;
        let g_of_synth_a = self.encode(&synth_a)?;
        let cycle_a = self.decode(&g_of_synth_b, Direction::BA)?;
        let cycle_b = self.decode(&g_of_synth_a, Direction::AB)?;

        let affine_feat_decode_b = self.decode(&g_a_afw, Direction::AB)?;
        let affine_feat_decode_a = self.decode(&g_b_afw, Direction::BA)?;

        let af_ab_img = affine_grid(&aff_ab, &img_sp)?;
        let af_ba_img = affine_grid(&aff_ba, &img_sp)?;
        let x_a_af = sample(x_a, &af_ab_img, Border::Clamp)?;
        let x_b_af = sample(x_b, &af_ba_img, Border::Clamp)?;
        let affine_image_decode_b = self.decode(&self.encode(&x_a_af)?, Direction::AB)?;
        let affine_image_decode_a = self.decode(&self.encode(&x_b_af)?, Direction::BA)?;

        let warped_input_a = sample(x_a, &grid_ab_img, Border::Clamp)?;
        let warped_input_b = sample(x_b, &grid_ba_img, Border::Clamp)?;

        Ok(ForwardBundle {
            input_a: x_a.clone(),
            input_b: x_b.clone(),
            g_a,
            g_b,
            aff_ab,
            aff_ba,
            u_ab,
            u_ba,
            grid_ab_feat,
            grid_ba_feat,
            grid_ab_img,
            grid_ba_img,
            synth_b,
            synth_a,
            synth_warped_b,
            synth_warped_a,
            g_of_synth_b,
            g_of_synth_a,
            cycle_a,
            cycle_b,
            warped_feat_ab,
            warped_feat_ba,
            affine_feat_decode_b,
            affine_feat_decode_a,
            affine_image_decode_b,
            affine_image_decode_a,
            warped_input_a,
            warped_input_b,
        })
    }

    /// Inference path: encoder plus one direction's transform nets only,
    /// nothing recorded. Returns the predicted transform parts and the
    /// warped moving image.
    pub fn register(
        &self,
        moving: &Tensor<S>,
        fixed: &Tensor<S>,
        direction: Direction,
        mode: RegisterMode,
    ) -> Result<(AffineMatrix<S>, DisplacementField<S>, Tensor<S>)> {
        no_grad(|| {
            if moving.shape() != fixed.shape() {
                return Err(FireError::ShapeMismatch {
                    op: "register",
                    lhs: moving.shape().to_vec(),
                    rhs: fixed.shape().to_vec(),
                });
            }
            let img_sp = moving.shape()[1..].to_vec();
            let g_m = self.encode(moving)?;
            let g_f = self.encode(fixed)?;
            let feat_sp = g_m.shape()[1..].to_vec();
            let aff = self.predict_affine(&g_m, &g_f, direction)?;
            let u = match mode {
                RegisterMode::AffineOnly => DisplacementField::zero(&feat_sp),
                RegisterMode::Full => {
                    let g_m_afw = sample(&g_m, &affine_grid(&aff, &feat_sp)?, Border::Clamp)?;
                    self.predict_nonrigid(&g_m_afw, &g_f, direction)?
                }
            };
            let grid = compose(&aff, &u, &img_sp)?;
            let warped = sample(moving, &grid, Border::Clamp)?;
            Ok((aff, u, warped))
        })
    }

    /// Visit every parameter in a fixed canonical order.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor<S>)) {
        visit_impl!(self, f, iter, &);
    }

    /// Mutable access in the same canonical order as [`Self::visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        visit_impl!(self, f, iter_mut, &mut);
    }

    /// Named parameter snapshot in canonical order.
    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _| n += 1);
        n
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

/// Shared walking order for immutable and mutable parameter visits.
macro_rules! visit_impl {
    ($self:ident, $f:ident, $iter:ident, $($r:tt)+) => {{
        let s = $self;
        let f = $f;
        {
            let e = $($r)+ s.encoder;
            f("enc.conv_in", $($r)+ e.conv_in);
            f("enc.down1", $($r)+ e.down1);
            f("enc.down2", $($r)+ e.down2);
            for (i, b) in e.blocks.$iter().enumerate() {
                f(&format!("enc.block{i}.w1"), $($r)+ b.w1);
                f(&format!("enc.block{i}.w2"), $($r)+ b.w2);
            }
        }
        for (name, d) in [("dec_ab", $($r)+ s.dec_ab), ("dec_ba", $($r)+ s.dec_ba)] {
            for (i, b) in d.blocks.$iter().enumerate() {
                f(&format!("{name}.block{i}.w1"), $($r)+ b.w1);
                f(&format!("{name}.block{i}.w2"), $($r)+ b.w2);
            }
            f(&format!("{name}.up1"), $($r)+ d.up1);
            f(&format!("{name}.up2"), $($r)+ d.up2);
            f(&format!("{name}.conv_out"), $($r)+ d.conv_out);
            f(&format!("{name}.head_w"), $($r)+ d.head_w);
            f(&format!("{name}.head_b"), $($r)+ d.head_b);
        }
        for (name, t) in [("taf_ab", $($r)+ s.taf_ab), ("taf_ba", $($r)+ s.taf_ba)] {
            f(&format!("{name}.c1"), $($r)+ t.c1);
            f(&format!("{name}.c2"), $($r)+ t.c2);
            f(&format!("{name}.c3"), $($r)+ t.c3);
            f(&format!("{name}.fc1_w"), $($r)+ t.fc1_w);
            f(&format!("{name}.fc1_b"), $($r)+ t.fc1_b);
            f(&format!("{name}.fc2_w"), $($r)+ t.fc2_w);
            f(&format!("{name}.fc2_b"), $($r)+ t.fc2_b);
        }
        for (name, t) in [("tnr_ab", $($r)+ s.tnr_ab), ("tnr_ba", $($r)+ s.tnr_ba)] {
            f(&format!("{name}.m1"), $($r)+ t.m1);
            f(&format!("{name}.m2"), $($r)+ t.m2);
            f(&format!("{name}.f1"), $($r)+ t.f1);
            f(&format!("{name}.f2"), $($r)+ t.f2);
            f(&format!("{name}.fuse.w1"), $($r)+ t.fuse.w1);
            f(&format!("{name}.fuse.w2"), $($r)+ t.fuse.w2);
            f(&format!("{name}.out_w"), $($r)+ t.out_w);
            f(&format!("{name}.out_b"), $($r)+ t.out_b);
        }
    }};
}
use visit_impl;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::identity_grid;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 2,
            base_channels: 4,
            resnet_blocks: 1,
            ..Default::default()
        }
    }

    fn random32(shape: &[usize], seed: u64) -> Tensor<f32> {
        let t = crate::tensor::gradcheck::random_tensor(shape, seed);
        Tensor::new(shape, t.data().iter().map(|v| *v as f32).collect()).unwrap()
    }

    #[test]
    fn encode_shape_is_quarter_resolution() {
        let cfg = ModelConfig {
            base_channels: 16,
            resnet_blocks: 1,
            ..Default::default()
        };
        let model = FireModel::<f32>::new(cfg, 1).unwrap();
        let x = Tensor::zeros(&[1, 64, 64]);
        let g = model.encode(&x).unwrap();
        assert_eq!(g.shape(), &[64, 16, 16]);
    }

    #[test]
    fn encode_rejects_bad_extents() {
        let model = FireModel::<f32>::new(small_cfg(), 1).unwrap();
        assert!(model.encode(&Tensor::zeros(&[1, 66, 64])).is_err());
        assert!(model.encode(&Tensor::zeros(&[1, 12, 12])).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let model = FireModel::<f32>::new(small_cfg(), 7).unwrap();
        let x = random32(&[1, 16, 16], 3);
        let a = model.encode(&x).unwrap();
        let b = model.encode(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn decode_shape_and_range() {
        let model = FireModel::<f32>::new(small_cfg(), 2).unwrap();
        let x = Tensor::zeros(&[1, 32, 32]);
        let g = model.encode(&x).unwrap();
        let y = model.decode(&g, Direction::AB).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn affine_head_is_identity_at_init() {
        for dim in [2usize, 3] {
            let cfg = ModelConfig {
                dim,
                base_channels: 4,
                resnet_blocks: 1,
                ..Default::default()
            };
            let model = FireModel::<f32>::new(cfg, 3).unwrap();
            let mut gshape = vec![16];
            gshape.extend(if dim == 2 { vec![16, 16] } else { vec![4, 4, 4] });
            let g1 = random32(&gshape, 11);
            let a = model.predict_affine(&g1, &g1, Direction::AB).unwrap();
            let ident = AffineMatrix::<f32>::identity(dim);
            assert_eq!(a.entries().data(), ident.entries().data());
            assert_eq!(a.entries().numel(), dim * (dim + 1));
        }
    }

    #[test]
    fn affine_net_accepts_any_spatial_extent() {
        let model = FireModel::<f32>::new(small_cfg(), 4).unwrap();
        for sp in [[16, 16], [20, 20]] {
            let g = Tensor::<f32>::zeros(&[16, sp[0], sp[1]]);
            let a = model.predict_affine(&g, &g, Direction::AB).unwrap();
            assert_eq!(a.entries().shape(), &[2, 3]);
        }
    }

    #[test]
    fn nonrigid_head_is_zero_at_init_and_bounded() {
        let model = FireModel::<f32>::new(small_cfg(), 5).unwrap();
        let g = Tensor::<f32>::zeros(&[16, 8, 8]);
        let u = model.predict_nonrigid(&g, &g, Direction::AB).unwrap();
        assert_eq!(u.tensor().shape(), &[2, 8, 8]);
        assert!(u.tensor().data().iter().all(|v| *v == 0.0));

        // the bound holds for arbitrary inputs: tanh output scaled
        let r = random32(&[16, 8, 8], 9);
        let u = model.predict_nonrigid(&r, &r, Direction::AB).unwrap();
        let bound = model.config.delta_max as f32;
        assert!(u.tensor().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn forward_pair_is_identity_at_init() {
        let model = FireModel::<f32>::new(small_cfg(), 6).unwrap();
        let x = random32(&[1, 32, 32], 13);
        let b = model.forward_pair(&x, &x).unwrap();
        let id_img = identity_grid::<f32>(&[32, 32]).unwrap();
        assert_eq!(b.grid_ab_img.tensor().data(), id_img.tensor().data());
        assert_eq!(b.grid_ba_img.tensor().data(), id_img.tensor().data());
        assert_eq!(b.warped_input_a.data(), x.data());
        assert_eq!(b.warped_input_b.data(), x.data());
    }

    #[test]
    fn forward_pair_is_pure() {
        let model = FireModel::<f32>::new(small_cfg(), 8).unwrap();
        let xa = random32(&[1, 32, 32], 21);
        let xb = random32(&[1, 32, 32], 22);
        let b1 = model.forward_pair(&xa, &xb).unwrap();
        let b2 = model.forward_pair(&xa, &xb).unwrap();
        assert_eq!(b1.synth_b.data(), b2.synth_b.data());
        assert_eq!(b1.u_ab.tensor().data(), b2.u_ab.tensor().data());
        assert_eq!(b1.aff_ab.entries().data(), b2.aff_ab.entries().data());
    }

    #[test]
    fn register_untrained_returns_moving_unchanged() {
        let model = FireModel::<f32>::new(small_cfg(), 9).unwrap();
        let m = random32(&[1, 32, 32], 31);
        let f = Tensor::<f32>::zeros(&[1, 32, 32]);
        let (aff, u, warped) = model
            .register(&m, &f, Direction::AB, RegisterMode::Full)
            .unwrap();
        assert_eq!(
            aff.entries().data(),
            AffineMatrix::<f32>::identity(2).entries().data()
        );
        assert!(u.tensor().data().iter().all(|v| *v == 0.0));
        assert_eq!(warped.data(), m.data());
        assert!(!warped.is_tracked());
    }

    #[test]
    fn directions_do_not_share_parameters() {
        let model = FireModel::<f32>::new(small_cfg(), 10).unwrap();
        let mut names = Vec::new();
        model.visit_params(&mut |n, _| names.push(n.to_string()));
        let ab = names.iter().filter(|n| n.contains("_ab")).count();
        let ba = names.iter().filter(|n| n.contains("_ba")).count();
        assert_eq!(ab, ba);
        assert!(ab > 0);
        // every parameter belongs to exactly one optimizer group
        let mut counts = [0usize; 3];
        for n in &names {
            match group_of(n) {
                ParamGroup::AffineNets => counts[0] += 1,
                ParamGroup::NonrigidNets => counts[1] += 1,
                ParamGroup::SynthesisNets => counts[2] += 1,
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), names.len());
        assert!(counts.iter().all(|c| *c > 0));
    }

    #[test]
    fn paper_scale_config_layer_widths() {
        // base 64: encoder stages 64 / 128 / 256, four residual blocks
        let cfg = ModelConfig {
            base_channels: 64,
            ..Default::default()
        };
        let model = FireModel::<f32>::new(cfg, 12).unwrap();
        let mut shapes = std::collections::BTreeMap::new();
        model.visit_params(&mut |n, t| {
            shapes.insert(n.to_string(), t.shape().to_vec());
        });
        assert_eq!(shapes["enc.conv_in"], vec![64, 1, 7, 7]);
        assert_eq!(shapes["enc.down1"], vec![128, 64, 3, 3]);
        assert_eq!(shapes["enc.down2"], vec![256, 128, 3, 3]);
        assert_eq!(shapes["enc.block3.w1"], vec![256, 256, 3, 3]);
        assert!(!shapes.contains_key("enc.block4.w1"));
    }
}
