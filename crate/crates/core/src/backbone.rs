//! Stage-1 style-based generator and discriminator.
//!
//! The generator maps a latent code through a 2-layer MLP to modulation
//! weights, then runs a chain of modulated-convolution synthesis blocks
//! with skip ToRGB accumulation. The discriminator is a residual
//! downsampling chain with a minibatch-stddev epilogue. Training uses the
//! Wasserstein adversarial form with lazy R1 and path-length
//! regularization, optionally with differentiable augmentation.

use crate::autodiff::{grad, Graph, Tensor};
use crate::error::{Error, Result};
use crate::nn::{normal_init, ones, zeros, Adam, AdamConfig, ParamSet, ParamTensors};
use crate::num::Scalar;
use crate::seeds;
use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const LRELU_SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

/// Generator architecture description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub output_resolution: usize,
    pub image_channels: usize,
    /// resolution -> feature channels, for every resolution 4,8,...,output.
    pub channel_map: BTreeMap<usize, usize>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig::desk()
    }
}

impl SynthesisConfig {
    /// Small CPU-friendly configuration at 32x32.
    pub fn desk() -> Self {
        SynthesisConfig {
            z_dim: 512,
            w_dim: 512,
            mapping_layers: 2,
            output_resolution: 32,
            image_channels: 3,
            channel_map: [(4, 128), (8, 128), (16, 64), (32, 32)].into_iter().collect(),
        }
    }

    /// Full-scale 256x256 configuration (channel counts capped at 512,
    /// halving above resolution 32).
    pub fn paper() -> Self {
        let mut channel_map = BTreeMap::new();
        let mut res = 4;
        while res <= 256 {
            channel_map.insert(res, (16384 / res).min(512));
            res *= 2;
        }
        SynthesisConfig {
            z_dim: 512,
            w_dim: 512,
            mapping_layers: 2,
            output_resolution: 256,
            image_channels: 3,
            channel_map,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.output_resolution.is_power_of_two() || self.output_resolution < 8 {
            return Err(Error::config(format!(
                "output_resolution must be a power of two >= 8, got {}",
                self.output_resolution
            )));
        }
        for r in self.resolutions() {
            match self.channel_map.get(&r) {
                Some(&c) if c >= 1 => {}
                _ => {
                    return Err(Error::config(format!(
                        "channel_map missing (or zero) entry for resolution {r}"
                    )))
                }
            }
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::config("z_dim, w_dim, mapping_layers must be positive"));
        }
        Ok(())
    }

    /// 4, 8, ..., output_resolution.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = 4;
        while r <= self.output_resolution {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn channels(&self, res: usize) -> usize {
        *self
            .channel_map
            .get(&res)
            .unwrap_or_else(|| panic!("no channel entry for resolution {res}"))
    }
}

/// Discriminator architecture description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub input_channels: usize,
    /// Each layer's channel count is ceil(map / channel_div).
    pub channel_div: usize,
    pub channel_map: BTreeMap<usize, usize>,
}

impl DiscriminatorConfig {
    pub fn for_synthesis(cfg: &SynthesisConfig, input_channels: usize, channel_div: usize) -> Self {
        DiscriminatorConfig {
            resolution: cfg.output_resolution,
            input_channels,
            channel_div,
            channel_map: cfg.channel_map.clone(),
        }
    }

    pub fn channels(&self, res: usize) -> usize {
        let base = *self
            .channel_map
            .get(&res)
            .unwrap_or_else(|| panic!("no channel entry for resolution {res}"));
        base.div_ceil(self.channel_div)
    }

    /// Block input resolutions, highest first, down to 8.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = self.resolution;
        while r >= 8 {
            out.push(r);
            r /= 2;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Initialization

fn init_fc<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, prefix: &str, out_d: usize, in_d: usize, rng: &mut R) {
    ps.insert(format!("{prefix}.weight"), normal_init(rng, &[out_d, in_d], in_d));
    ps.insert(format!("{prefix}.bias"), zeros(&[out_d]));
}

pub(crate) fn init_mod_conv<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    w_dim: usize,
    with_noise: bool,
    rng: &mut R,
) {
    ps.insert(
        format!("{prefix}.weight"),
        normal_init(rng, &[out_c, in_c, k, k], in_c * k * k),
    );
    ps.insert(format!("{prefix}.bias"), zeros(&[out_c]));
    ps.insert(
        format!("{prefix}.affine.weight"),
        normal_init(rng, &[in_c, w_dim], w_dim),
    );
    // Styles start at 1 so an untrained affine is an identity modulation.
    ps.insert(format!("{prefix}.affine.bias"), ones(&[in_c]));
    if with_noise {
        ps.insert(format!("{prefix}.noise"), zeros(&[1]));
    }
}

fn init_plain_conv<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut R,
) {
    ps.insert(
        format!("{prefix}.weight"),
        normal_init(rng, &[out_c, in_c, k, k], in_c * k * k),
    );
    ps.insert(format!("{prefix}.bias"), zeros(&[out_c]));
}

/// Mapping network parameters under `{prefix}.fc{i}`.
pub fn init_mapping<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &SynthesisConfig,
    rng: &mut R,
) {
    for i in 0..cfg.mapping_layers {
        let in_d = if i == 0 { cfg.z_dim } else { cfg.w_dim };
        init_fc(ps, &format!("{prefix}.fc{i}"), cfg.w_dim, in_d, rng);
    }
}

/// Synthesis blocks for `resolutions` under `{prefix}.b{r}`. The lowest
/// resolution (4) gets a single conv plus the learned constant input.
fn init_synthesis_blocks<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cfg: &SynthesisConfig,
    resolutions: &[usize],
    with_torgb: bool,
    rng: &mut R,
) {
    for &r in resolutions {
        let out_c = cfg.channels(r);
        if r == 4 {
            init_mod_conv(ps, &format!("{prefix}.b4.conv1"), out_c, out_c, 3, cfg.w_dim, true, rng);
        } else {
            let in_c = cfg.channels(r / 2);
            init_mod_conv(ps, &format!("{prefix}.b{r}.conv0"), out_c, in_c, 3, cfg.w_dim, true, rng);
            init_mod_conv(ps, &format!("{prefix}.b{r}.conv1"), out_c, out_c, 3, cfg.w_dim, true, rng);
        }
        if with_torgb {
            init_mod_conv(
                ps,
                &format!("{prefix}.b{r}.torgb"),
                cfg.image_channels,
                out_c,
                1,
                cfg.w_dim,
                false,
                rng,
            );
        }
    }
}

/// Full generator parameter set: `map.*` and `synth.*`.
pub fn init_generator<T: Scalar, R: Rng>(cfg: &SynthesisConfig, rng: &mut R) -> ParamSet<T> {
    let mut ps = ParamSet::new();
    init_mapping(&mut ps, "map", cfg, rng);
    let c4 = cfg.channels(4);
    ps.insert("synth.const", normal_init(rng, &[c4, 4, 4], 1));
    init_synthesis_blocks(&mut ps, "synth", cfg, &cfg.resolutions(), true, rng);
    ps
}

/// Discriminator parameter set: `frgb.*`, `b{r}.*`, `epilogue.*`.
pub fn init_discriminator<T: Scalar, R: Rng>(cfg: &DiscriminatorConfig, rng: &mut R) -> ParamSet<T> {
    let mut ps = ParamSet::new();
    let top = cfg.channels(cfg.resolution);
    init_plain_conv(&mut ps, "frgb", top, cfg.input_channels, 1, rng);
    for r in cfg.block_resolutions() {
        let in_c = cfg.channels(r);
        let out_c = cfg.channels(r / 2);
        init_plain_conv(&mut ps, &format!("b{r}.conv0"), in_c, in_c, 3, rng);
        init_plain_conv(&mut ps, &format!("b{r}.conv1"), out_c, in_c, 3, rng);
        init_plain_conv(&mut ps, &format!("b{r}.skip"), out_c, in_c, 1, rng);
    }
    let c4 = cfg.channels(4);
    init_plain_conv(&mut ps, "epilogue.conv", c4, c4 + 1, 3, rng);
    init_fc(&mut ps, "epilogue.fc0", c4, c4 * 16, rng);
    init_fc(&mut ps, "epilogue.fc1", 1, c4, rng);
    ps
}

// ---------------------------------------------------------------------------
// Forward passes

/// Normalize each latent row by its RMS, then apply the FC stack.
pub fn map_latent<T: Scalar>(
    z: &Tensor<T>,
    p: &ParamTensors<T>,
    prefix: &str,
    cfg: &SynthesisConfig,
) -> Result<Tensor<T>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != cfg.z_dim {
        return Err(Error::config(format!(
            "latent shape {shape:?} does not match z_dim {}",
            cfg.z_dim
        )));
    }
    let rms = z
        .square()
        .sum_axes(&[1])
        .scale(T::from_real(1.0 / cfg.z_dim as f64))
        .add_scalar(T::from_real(1e-8))
        .sqrt();
    let mut x = z.div(&rms);
    for i in 0..cfg.mapping_layers {
        let w = p.get(&format!("{prefix}.fc{i}.weight"));
        let b = p.get(&format!("{prefix}.fc{i}.bias"));
        x = x
            .matmul(&w.t())
            .add(b)
            .leaky_relu(T::from_real(LRELU_SLOPE));
    }
    Ok(x)
}

/// Weight-modulated convolution. `style` is `[N, in_c]`; with
/// `demodulate` the per-sample weights are rescaled so each output
/// channel's weight norm is 1.
pub fn modulated_conv<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    style: &Tensor<T>,
    demodulate: bool,
    pad: usize,
) -> Result<Tensor<T>> {
    if !style.is_finite() {
        return Err(Error::numeric("non-finite modulation weights"));
    }
    let ws = weight.shape();
    let (o, i, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let n = x.shape()[0];
    let w1 = weight.reshape(&[1, o, i, kh, kw]);
    let s1 = style.reshape(&[n, 1, i, 1, 1]);
    let mut wm = w1.mul(&s1);
    if demodulate {
        let sigma = wm
            .square()
            .sum_axes(&[2, 3, 4])
            .add_scalar(T::from_real(DEMOD_EPS))
            .sqrt();
        wm = wm.div(&sigma);
    }
    let mut y = x.conv_ps(&wm, pad);
    if let Some(b) = bias {
        y = y.add(&b.reshape(&[1, o, 1, 1]));
    }
    Ok(y)
}

fn affine_style<T: Scalar>(w: &Tensor<T>, p: &ParamTensors<T>, prefix: &str) -> Tensor<T> {
    w.matmul(&p.get(&format!("{prefix}.weight")).t())
        .add(p.get(&format!("{prefix}.bias")))
}

/// One modulated conv layer: conv + bias + noise injection + leaky ReLU.
fn conv_layer<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: &ParamTensors<T>,
    prefix: &str,
    noise: &ArrayD<T>,
) -> Result<Tensor<T>> {
    let g = x.graph().clone();
    let style = affine_style(w, p, &format!("{prefix}.affine"));
    let weight = p.get(&format!("{prefix}.weight"));
    let bias = p.get(&format!("{prefix}.bias"));
    let y = modulated_conv(x, weight, Some(bias), &style, true, 1)?;
    let noise_t = g.constant(noise.clone()).mul(p.get(&format!("{prefix}.noise")));
    Ok(y.add(&noise_t).leaky_relu(T::from_real(LRELU_SLOPE)))
}

/// ToRGB / ToMask style 1x1 modulated conv without demodulation or
/// nonlinearity.
pub fn to_image_layer<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    p: &ParamTensors<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let style = affine_style(w, p, &format!("{prefix}.affine"));
    modulated_conv(
        x,
        p.get(&format!("{prefix}.weight")),
        Some(p.get(&format!("{prefix}.bias"))),
        &style,
        false,
        0,
    )
}

/// Synthesis block body shared by the backbone and the stage-2 residual
/// blocks: upsample the incoming feature map and apply two modulated
/// convs. A `base` block (resolution 4, fed by the learned constant)
/// skips the upsample and has a single conv. Parameter names are
/// `{prefix}.conv0/conv1`, noise keys `{noise_key}.conv0/conv1`.
pub fn run_block<T: Scalar>(
    x_prev: &Tensor<T>,
    w: &Tensor<T>,
    p: &ParamTensors<T>,
    prefix: &str,
    base: bool,
    noise: &NoiseBundle<T>,
    noise_key: &str,
) -> Result<Tensor<T>> {
    if base {
        conv_layer(
            x_prev,
            w,
            p,
            &format!("{prefix}.conv1"),
            noise.get(&format!("{noise_key}.conv1")),
        )
    } else {
        let x = x_prev.upsample2x();
        let x = conv_layer(
            &x,
            w,
            p,
            &format!("{prefix}.conv0"),
            noise.get(&format!("{noise_key}.conv0")),
        )?;
        conv_layer(
            &x,
            w,
            p,
            &format!("{prefix}.conv1"),
            noise.get(&format!("{noise_key}.conv1")),
        )
    }
}

/// Per-layer noise maps, keyed `b{r}.conv{j}` (with an optional stream
/// prefix for the stage-2 defect branch).
#[derive(Clone, Debug)]
pub struct NoiseBundle<T: Scalar> {
    maps: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> NoiseBundle<T> {
    pub fn new() -> Self {
        NoiseBundle {
            maps: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, map: ArrayD<T>) {
        self.maps.insert(key.into(), map);
    }

    pub fn get(&self, key: &str) -> &ArrayD<T> {
        self.maps
            .get(key)
            .unwrap_or_else(|| panic!("missing noise map {key}"))
    }

    /// Fresh standard-normal noise for every synthesis conv layer.
    pub fn sample<R: Rng>(cfg: &SynthesisConfig, n: usize, rng: &mut R) -> Self {
        let mut b = NoiseBundle::new();
        b.sample_prefixed(cfg, n, "", rng);
        b
    }

    /// Add noise maps under `prefix` (used for the defect branch).
    pub fn sample_prefixed<R: Rng>(
        &mut self,
        cfg: &SynthesisConfig,
        n: usize,
        prefix: &str,
        rng: &mut R,
    ) {
        for r in cfg.resolutions() {
            let keys: Vec<String> = if r == 4 {
                vec![format!("{prefix}b4.conv1")]
            } else {
                vec![format!("{prefix}b{r}.conv0"), format!("{prefix}b{r}.conv1")]
            };
            for k in keys {
                let map = ArrayD::from_shape_simple_fn(IxDyn(&[n, 1, r, r]), || {
                    T::from_real(rng.sample(StandardNormal))
                });
                self.insert(k, map);
            }
        }
    }

    /// All-zero noise (deterministic generation).
    pub fn zero(cfg: &SynthesisConfig, n: usize) -> Self {
        let mut b = NoiseBundle::new();
        for r in cfg.resolutions() {
            let keys: Vec<String> = if r == 4 {
                vec!["b4.conv1".to_string()]
            } else {
                vec![format!("b{r}.conv0"), format!("b{r}.conv1")]
            };
            for k in keys {
                b.insert(k, ArrayD::zeros(IxDyn(&[n, 1, r, r])));
            }
        }
        b
    }
}

impl<T: Scalar> Default for NoiseBundle<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct SynthOutput<T: Scalar> {
    /// Accumulated RGB image, linear output (clamped only at export).
    pub image: Tensor<T>,
    /// Feature maps per resolution, exposed for the stage-2 branch.
    pub features: Vec<(usize, Tensor<T>)>,
}

/// Learned-constant input broadcast to the batch.
pub(crate) fn const_input<T: Scalar>(p: &ParamTensors<T>, prefix: &str, cfg: &SynthesisConfig, n: usize) -> Tensor<T> {
    let c4 = cfg.channels(4);
    p.get(&format!("{prefix}.const"))
        .reshape(&[1, c4, 4, 4])
        .broadcast_to(&[n, c4, 4, 4])
}

/// Full synthesis pass: skip-architecture RGB accumulation, exposing all
/// intermediate feature maps.
pub fn synthesize<T: Scalar>(
    w: &Tensor<T>,
    noise: &NoiseBundle<T>,
    p: &ParamTensors<T>,
    cfg: &SynthesisConfig,
) -> Result<SynthOutput<T>> {
    let n = w.shape()[0];
    let mut x = const_input(p, "synth", cfg, n);
    let mut features = Vec::new();
    let mut rgb: Option<Tensor<T>> = None;
    for r in cfg.resolutions() {
        x = run_block(&x, w, p, &format!("synth.b{r}"), r == 4, noise, &format!("b{r}"))?;
        features.push((r, x.clone()));
        let y = to_image_layer(&x, w, p, &format!("synth.b{r}.torgb"))?;
        rgb = Some(match rgb {
            None => y,
            Some(prev) => prev.upsample2x().add(&y),
        });
    }
    Ok(SynthOutput {
        image: rgb.expect("at least one resolution"),
        features,
    })
}

/// Minibatch standard deviation channel appended before the epilogue conv.
pub(crate) fn minibatch_stddev<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mu = x.sum_axes(&[0]).scale(T::from_real(1.0 / n as f64));
    let var = x
        .sub(&mu)
        .square()
        .sum_axes(&[0])
        .scale(T::from_real(1.0 / n as f64));
    let sd = var.add_scalar(T::from_real(1e-8)).sqrt();
    let avg = sd.mean(); // 0-d
    let chan = avg.reshape(&[1, 1, 1, 1]).broadcast_to(&[n, 1, h, w]);
    x.graph().concat(&[x, &chan], 1)
}

/// Residual downsampling discriminator; returns one score per sample.
pub fn discriminate<T: Scalar>(
    image: &Tensor<T>,
    p: &ParamTensors<T>,
    cfg: &DiscriminatorConfig,
) -> Result<Tensor<T>> {
    let shape = image.shape();
    if shape.len() != 4 || shape[1] != cfg.input_channels {
        return Err(Error::config(format!(
            "discriminator expects [N,{},H,W], got {shape:?}",
            cfg.input_channels
        )));
    }
    if shape[2] != cfg.resolution || shape[3] != cfg.resolution {
        return Err(Error::config(format!(
            "discriminator resolution {} vs input {}x{}",
            cfg.resolution, shape[2], shape[3]
        )));
    }
    let slope = T::from_real(LRELU_SLOPE);
    let inv_sqrt2 = T::from_real(1.0 / 2.0_f64.sqrt());
    let conv = |x: &Tensor<T>, name: &str, pad: usize| -> Tensor<T> {
        let w = p.get(&format!("{name}.weight"));
        let b = p.get(&format!("{name}.bias"));
        let o = w.shape()[0];
        x.conv2d(w, pad).add(&b.reshape(&[1, o, 1, 1]))
    };
    let mut x = conv(image, "frgb", 0).leaky_relu(slope);
    for r in cfg.block_resolutions() {
        let y = conv(&x, &format!("b{r}.conv0"), 1).leaky_relu(slope);
        let y = conv(&y, &format!("b{r}.conv1"), 1).leaky_relu(slope).avgpool2x();
        let s = conv(&x, &format!("b{r}.skip"), 0).avgpool2x();
        x = y.add(&s).scale(inv_sqrt2);
    }
    let x = minibatch_stddev(&x);
    let x = conv(&x, "epilogue.conv", 1).leaky_relu(slope);
    let n = x.shape()[0];
    let flat_len = x.shape()[1] * x.shape()[2] * x.shape()[3];
    let x = x.reshape(&[n, flat_len]);
    let x = x
        .matmul(&p.get("epilogue.fc0.weight").t())
        .add(p.get("epilogue.fc0.bias"))
        .leaky_relu(slope);
    let x = x
        .matmul(&p.get("epilogue.fc1.weight").t())
        .add(p.get("epilogue.fc1.bias"));
    Ok(x.reshape(&[n]))
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Wgan,
    Logistic,
}

fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    // max(x,0) + ln(1 + exp(-|x|)), stable for large |x|
    let relu = x.leaky_relu(T::zero());
    let tail = x.abs().neg().exp().add_scalar(T::one()).ln();
    relu.add(&tail)
}

/// Discriminator adversarial loss (to minimize).
pub fn adv_d_loss<T: Scalar>(kind: LossKind, d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Tensor<T> {
    match kind {
        LossKind::Wgan => d_fake.mean().sub(&d_real.mean()),
        LossKind::Logistic => softplus(&d_fake).mean().add(&softplus(&d_real.neg()).mean()),
    }
}

/// Generator adversarial loss (to minimize).
pub fn adv_g_loss<T: Scalar>(kind: LossKind, d_fake: &Tensor<T>) -> Tensor<T> {
    match kind {
        LossKind::Wgan => d_fake.mean().neg(),
        LossKind::Logistic => softplus(&d_fake.neg()).mean(),
    }
}

/// R1 gradient penalty `(gamma/2) * E[ ||d D / d image||^2 ]` on real
/// images. `real` must be a differentiable leaf; the returned tensor
/// backpropagates into the discriminator parameters.
pub fn r1_penalty<T: Scalar>(
    score_real: &Tensor<T>,
    real: &Tensor<T>,
    gamma: f64,
) -> Tensor<T> {
    r1_penalty_multi(score_real, &[real], gamma)
}

/// R1 over several input leaves (e.g. an image/mask pair fed through
/// separate branches): the squared norm sums over all leaves.
pub fn r1_penalty_multi<T: Scalar>(
    score_real: &Tensor<T>,
    leaves: &[&Tensor<T>],
    gamma: f64,
) -> Tensor<T> {
    let n = leaves[0].shape()[0] as f64;
    let gs = grad(&score_real.sum(), leaves);
    let mut acc = gs[0].square().sum();
    for g in &gs[1..] {
        acc = acc.add(&g.square().sum());
    }
    acc.scale(T::from_real(0.5 * gamma / n))
}

/// Path length penalty: perturb the image with unit noise, measure the
/// per-sample norm of the gradient of the noise-weighted image sum with
/// respect to the modulation weights, and penalize deviation from
/// `pl_mean`. Returns the penalty and the batch-mean norm (for the EMA).
pub fn path_length_penalty<T: Scalar>(
    image: &Tensor<T>,
    w: &Tensor<T>,
    pl_mean: f64,
    rng: &mut impl Rng,
) -> (Tensor<T>, f64) {
    let shape = image.shape();
    let (h, wd) = (shape[2], shape[3]);
    let g = image.graph().clone();
    let r = g.constant(ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
        T::from_real(rng.sample(StandardNormal))
    }));
    let s = image
        .mul(&r)
        .sum()
        .scale(T::from_real(1.0 / ((h * wd) as f64).sqrt()));
    let gw = grad(&s, &[w]);
    let norms = gw[0]
        .square()
        .sum_axes(&[1])
        .add_scalar(T::from_real(1e-8))
        .sqrt();
    let mean_norm = norms.mean().item().real();
    let penalty = norms.add_scalar(T::from_real(-pl_mean)).square().mean();
    (penalty, mean_norm)
}

/// All stage-1 loss terms on one batch, mostly for inspection/testing;
/// the trainer composes the same pieces per phase.
pub struct GanLossTerms<T: Scalar> {
    pub adv_g: Tensor<T>,
    pub adv_d: Tensor<T>,
    pub r1: Tensor<T>,
    pub path_length: Tensor<T>,
}

pub fn stylegan_losses<T: Scalar>(
    kind: LossKind,
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
    real_leaf: &Tensor<T>,
    gamma: f64,
    image: &Tensor<T>,
    w: &Tensor<T>,
    pl_mean: f64,
    rng: &mut impl Rng,
) -> GanLossTerms<T> {
    let (pl, _) = path_length_penalty(image, w, pl_mean, rng);
    GanLossTerms {
        adv_g: adv_g_loss(kind, d_fake),
        adv_d: adv_d_loss(kind, d_real, d_fake),
        r1: r1_penalty(d_real, real_leaf, gamma),
        path_length: pl,
    }
}

// ---------------------------------------------------------------------------
// Differentiable augmentation

/// Which transforms `diff_augment` may apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentOps {
    pub flip: bool,
    pub translate: bool,
    pub brightness: bool,
}

impl AugmentOps {
    pub fn all() -> Self {
        AugmentOps {
            flip: true,
            translate: true,
            brightness: true,
        }
    }
}

/// Per-sample differentiable augmentation: horizontal flip, integer
/// translation up to 1/8 of the width, brightness shift. Each enabled
/// transform fires independently per sample with probability `p`. With
/// `p = 0` the input tensor is returned untouched.
pub fn diff_augment_ops<T: Scalar>(
    images: &Tensor<T>,
    p: f64,
    ops: AugmentOps,
    rng: &mut impl Rng,
) -> Tensor<T> {
    assert!((0.0..=1.0).contains(&p), "augment probability {p} outside [0,1]");
    if p == 0.0 || ops == (AugmentOps { flip: false, translate: false, brightness: false }) {
        return images.clone();
    }
    let shape = images.shape();
    let (n, w) = (shape[0], shape[3]);
    let max_shift = (w / 8) as isize;
    let g = images.graph().clone();
    let mut parts: Vec<Tensor<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = images.slice_axis(0, i, 1);
        if ops.flip && rng.gen_bool(p) {
            s = s.flip_w();
        }
        if ops.translate && rng.gen_bool(p) {
            let dy = rng.gen_range(-max_shift..=max_shift);
            let dx = rng.gen_range(-max_shift..=max_shift);
            if dy != 0 || dx != 0 {
                s = s.translate(dy, dx);
            }
        }
        if ops.brightness && rng.gen_bool(p) {
            let b: f64 = rng.gen_range(-0.25..0.25);
            s = s.add_scalar(T::from_real(b));
        }
        parts.push(s);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    g.concat(&refs, 0)
}

pub fn diff_augment<T: Scalar>(images: &Tensor<T>, p: f64, rng: &mut impl Rng) -> Tensor<T> {
    diff_augment_ops(images, p, AugmentOps::all(), rng)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum AugmentMode {
    Off,
    /// Fixed probability.
    Fixed { p: f64 },
    /// Sign-of-E[D(real)] controller: p moves by `step` every `interval`
    /// batches, clamped to [0,1].
    Adaptive { step: f64, interval: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub pl_interval: usize,
    pub pl_decay: f64,
    pub pl_weight: f64,
    pub augment: AugmentMode,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        BackboneTrainConfig {
            steps: 2000,
            batch: 16,
            seed: 0,
            lr: 0.0025,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            loss: LossKind::Wgan,
            r1_gamma: 10.0,
            r1_interval: 16,
            pl_interval: 8,
            pl_decay: 0.01,
            pl_weight: 2.0,
            augment: AugmentMode::Adaptive {
                step: 0.01,
                interval: 4,
            },
        }
    }
}

impl BackboneTrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub adv_d: f64,
    pub adv_g: f64,
    pub r1: Option<f64>,
    pub path_length: Option<f64>,
    pub augment_p: f64,
}

pub struct BackboneTrainResult<T: Scalar> {
    pub generator: ParamSet<T>,
    pub discriminator: ParamSet<T>,
    pub step: u64,
    pub pl_mean: f64,
    pub log: Vec<TrainLogEntry>,
}

/// Deterministic batch index order: a pure function of (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeds::substream(seed, "data.order", epoch);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Cycles through the dataset in reshuffled epochs.
pub struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            seed,
            epoch: 0,
            order: epoch_order(n, seed, 0),
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.n {
                self.epoch += 1;
                self.order = epoch_order(self.n, self.seed, self.epoch);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Stack `[C,H,W]` samples into an `[N,C,H,W]` batch.
pub fn stack_batch<T: Scalar>(samples: &[&ArrayD<T>]) -> ArrayD<T> {
    let views: Vec<_> = samples.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform sample shapes")
}

pub fn sample_latents<T: Scalar>(n: usize, dim: usize, rng: &mut impl Rng) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(&[n, dim]), || T::from_real(rng.sample(StandardNormal)))
}

/// Train the stage-1 generator/discriminator on defect-free images.
pub fn train_backbone<T: Scalar>(
    dataset: &[ArrayD<T>],
    cfg: &SynthesisConfig,
    tcfg: &BackboneTrainConfig,
) -> Result<BackboneTrainResult<T>> {
    train_backbone_resume(dataset, cfg, tcfg, None)
}

/// Prior state carried into a resumed run. Optimizer moments are not
/// checkpointed; a resume restarts Adam but keeps parameters, the
/// path-length running mean, and the monotonic step counter.
pub struct BackboneResumeState<T: Scalar> {
    pub generator: ParamSet<T>,
    pub discriminator: ParamSet<T>,
    pub pl_mean: f64,
    pub step: u64,
}

pub fn train_backbone_resume<T: Scalar>(
    dataset: &[ArrayD<T>],
    cfg: &SynthesisConfig,
    tcfg: &BackboneTrainConfig,
    resume: Option<BackboneResumeState<T>>,
) -> Result<BackboneTrainResult<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    for s in dataset {
        let sh = s.shape();
        if sh != [cfg.image_channels, cfg.output_resolution, cfg.output_resolution] {
            return Err(Error::data(format!(
                "sample shape {sh:?} does not match config resolution {}",
                cfg.output_resolution
            )));
        }
    }
    let dcfg = DiscriminatorConfig::for_synthesis(cfg, cfg.image_channels, 1);

    let (mut g_params, mut d_params, mut pl_mean, base_step) = match resume {
        Some(state) => (
            state.generator,
            state.discriminator,
            state.pl_mean,
            state.step,
        ),
        None => (
            init_generator(cfg, &mut seeds::stream(tcfg.seed, "g_init")),
            init_discriminator(&dcfg, &mut seeds::stream(tcfg.seed, "d_init")),
            0.0_f64,
            0,
        ),
    };
    let mut adam_g = Adam::new(tcfg.adam());
    let mut adam_d = Adam::new(tcfg.adam());
    let mut sampler = BatchSampler::new(dataset.len(), tcfg.seed);
    let mut aug_p = match tcfg.augment {
        AugmentMode::Off => 0.0,
        AugmentMode::Fixed { p } => p,
        AugmentMode::Adaptive { .. } => 0.0,
    };
    let mut log = Vec::new();

    for step in 0..tcfg.steps {
        // --- discriminator step
        let idx = sampler.next_batch(tcfg.batch);
        let samples: Vec<&ArrayD<T>> = idx.iter().map(|&i| &dataset[i]).collect();
        let real_batch = stack_batch(&samples);
        let do_r1 = step % tcfg.r1_interval == 0;

        let (adv_d_v, r1_v) = {
            let graph: Graph<T> = Graph::new();
            let dp = ParamTensors::trainable(&graph, &d_params);
            let gp = ParamTensors::frozen(&graph, &g_params);
            let mut zrng = seeds::substream(tcfg.seed, "z_d", step as u64);
            let z = graph.constant(sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let w = map_latent(&z, &gp, "map", cfg)?;
            let mut nrng = seeds::substream(tcfg.seed, "noise_d", step as u64);
            let noise = NoiseBundle::sample(cfg, tcfg.batch, &mut nrng);
            let fake = synthesize(&w, &noise, &gp, cfg)?.image;

            let mut arng = seeds::substream(tcfg.seed, "aug_d", step as u64);
            let real_leaf = graph.var(real_batch.clone());
            let real_in = diff_augment(&real_leaf, aug_p, &mut arng);
            let fake_in = diff_augment(&fake, aug_p, &mut arng);
            let d_real = discriminate(&real_in, &dp, &dcfg)?;
            let d_fake = discriminate(&fake_in, &dp, &dcfg)?;
            let mut loss = adv_d_loss(tcfg.loss, &d_real, &d_fake);
            let mut r1_out = None;
            if do_r1 {
                let r1 = r1_penalty(&d_real, &real_leaf, tcfg.r1_gamma);
                r1_out = Some(r1.item().real());
                loss = loss.add(&r1);
            }
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite discriminator loss at step {step}"
                )));
            }
            let d_mean_real = d_real.mean().item().real();
            apply_grads(&loss, &dp, &mut d_params, &mut adam_d)?;

            // Adaptive augmentation: overfit heuristic on E[D(real)].
            if let AugmentMode::Adaptive {
                step: pstep,
                interval,
            } = tcfg.augment
            {
                if (step + 1) % interval == 0 {
                    aug_p = (aug_p + pstep * d_mean_real.signum()).clamp(0.0, 1.0);
                }
            }
            (loss_value_or(&d_real, &d_fake, tcfg.loss), r1_out)
        };

        // --- generator step
        let do_pl = step % tcfg.pl_interval == 0;
        let (adv_g_v, pl_v) = {
            let graph: Graph<T> = Graph::new();
            let gp = ParamTensors::trainable(&graph, &g_params);
            let dp = ParamTensors::frozen(&graph, &d_params);
            let mut zrng = seeds::substream(tcfg.seed, "z_g", step as u64);
            let z = graph.constant(sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let w = map_latent(&z, &gp, "map", cfg)?;
            let mut nrng = seeds::substream(tcfg.seed, "noise_g", step as u64);
            let noise = NoiseBundle::sample(cfg, tcfg.batch, &mut nrng);
            let out = synthesize(&w, &noise, &gp, cfg)?;
            let mut arng = seeds::substream(tcfg.seed, "aug_g", step as u64);
            let fake_in = diff_augment(&out.image, aug_p, &mut arng);
            let d_fake = discriminate(&fake_in, &dp, &dcfg)?;
            let mut loss = adv_g_loss(tcfg.loss, &d_fake);
            let adv_g_v = loss.item().real();
            let mut pl_out = None;
            if do_pl {
                let mut prng = seeds::substream(tcfg.seed, "pl", step as u64);
                let (pl, mean_norm) = path_length_penalty(&out.image, &w, pl_mean, &mut prng);
                pl_mean += tcfg.pl_decay * (mean_norm - pl_mean);
                pl_out = Some(pl.item().real());
                loss = loss.add(&pl.scale(T::from_real(tcfg.pl_weight)));
            }
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite generator loss at step {step}"
                )));
            }
            apply_grads(&loss, &gp, &mut g_params, &mut adam_g)?;
            (adv_g_v, pl_out)
        };

        log.push(TrainLogEntry {
            step,
            adv_d: adv_d_v,
            adv_g: adv_g_v,
            r1: r1_v,
            path_length: pl_v,
            augment_p: aug_p,
        });
    }

    Ok(BackboneTrainResult {
        generator: g_params,
        discriminator: d_params,
        step: base_step + tcfg.steps as u64,
        pl_mean,
        log,
    })
}

fn loss_value_or<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>, kind: LossKind) -> f64 {
    adv_d_loss(kind, d_real, d_fake).item().real()
}

/// Backpropagate `loss` into the trainable leaves of `pt` and apply one
/// Adam step on `params`.
pub fn apply_grads<T: Scalar>(
    loss: &Tensor<T>,
    pt: &ParamTensors<T>,
    params: &mut ParamSet<T>,
    adam: &mut Adam<T>,
) -> Result<()> {
    let names: Vec<String> = pt.iter().map(|(k, _)| k.clone()).collect();
    let leaves: Vec<&Tensor<T>> = pt.iter().map(|(_, t)| t).collect();
    let gs = grad(loss, &leaves);
    let grads: IndexMap<String, ArrayD<T>> = names
        .into_iter()
        .zip(gs.iter().map(|t| t.value()))
        .collect();
    adam.update(params, &grads)
}

#[cfg(test)]
mod tests;
