//! Stage-2 adaptation: defect mapping network, defect-aware residual
//! blocks with ToMask, mask-gated feature manipulation, the matching
//! discriminator, mode-seeking loss, and triplet generation.
//!
//! The backbone generator stays frozen; only the defect mapping network,
//! residual blocks, ToMask, and the discriminators receive updates.

use crate::autodiff::{grad, Graph, Tensor};
use crate::backbone::{
    self, adv_d_loss, adv_g_loss, const_input, discriminate, init_discriminator, init_mapping,
    init_mod_conv, map_latent, r1_penalty_multi, run_block, to_image_layer, BatchSampler,
    DiscriminatorConfig, LossKind, NoiseBundle, SynthesisConfig,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamSet, ParamTensors};
use crate::num::Scalar;
use crate::seeds;
use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, Dimension, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const MS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Residual,
    Replace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorMode {
    Dual,
    Unified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsMode {
    Mask,
    Image,
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DefectGenConfig {
    pub feature_mode: FeatureMode,
    pub discriminator_mode: DiscriminatorMode,
    pub ms_mode: MsMode,
    pub lambda_ms: f64,
    /// Lowest resolution with a residual block and the ToMask module.
    pub attach_start: usize,
}

impl DefectGenConfig {
    pub fn for_synthesis(cfg: &SynthesisConfig) -> Self {
        DefectGenConfig {
            feature_mode: FeatureMode::Residual,
            discriminator_mode: DiscriminatorMode::Dual,
            ms_mode: MsMode::Mask,
            lambda_ms: 0.1,
            attach_start: cfg.output_resolution / 4,
        }
    }

    pub fn validate(&self, cfg: &SynthesisConfig) -> Result<()> {
        if !self.attach_start.is_power_of_two()
            || self.attach_start < 4
            || self.attach_start > cfg.output_resolution
        {
            return Err(Error::config(format!(
                "attach_start {} must be a power of two in [4, {}]",
                self.attach_start, cfg.output_resolution
            )));
        }
        if !(self.lambda_ms >= 0.0) {
            return Err(Error::config("lambda_ms must be >= 0"));
        }
        Ok(())
    }

    /// attach_start, ..., output_resolution.
    pub fn attach_resolutions(&self, cfg: &SynthesisConfig) -> Vec<usize> {
        cfg.resolutions()
            .into_iter()
            .filter(|&r| r >= self.attach_start)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Initialization

/// Adaptation parameters: `defect_map.*`, `res_block.<res>.*`, `to_mask.*`.
pub fn init_adaptation<T: Scalar, R: Rng>(
    cfg: &SynthesisConfig,
    gcfg: &DefectGenConfig,
    rng: &mut R,
) -> ParamSet<T> {
    let mut ps = ParamSet::new();
    init_mapping(&mut ps, "defect_map", cfg, rng);
    for r in gcfg.attach_resolutions(cfg) {
        let out_c = cfg.channels(r);
        if r == 4 {
            init_mod_conv(&mut ps, "res_block.4.conv1", out_c, out_c, 3, cfg.w_dim, true, rng);
        } else {
            let in_c = cfg.channels(r / 2);
            init_mod_conv(
                &mut ps,
                &format!("res_block.{r}.conv0"),
                out_c,
                in_c,
                3,
                cfg.w_dim,
                true,
                rng,
            );
            init_mod_conv(
                &mut ps,
                &format!("res_block.{r}.conv1"),
                out_c,
                out_c,
                3,
                cfg.w_dim,
                true,
                rng,
            );
        }
    }
    init_mod_conv(
        &mut ps,
        "to_mask",
        1,
        cfg.channels(gcfg.attach_start),
        1,
        cfg.w_dim,
        false,
        rng,
    );
    ps
}

/// Matching discriminator config: 4 input channels, 1/4 width.
pub fn match_disc_config(cfg: &SynthesisConfig) -> DiscriminatorConfig {
    DiscriminatorConfig::for_synthesis(cfg, 4, 4)
}

/// Extra parameters for the unified-discriminator ablation: a reduced
/// mask branch plus fusion weights at the attach-resolution block.
pub fn init_unified_extras<T: Scalar, R: Rng>(
    cfg: &SynthesisConfig,
    gcfg: &DefectGenConfig,
    rng: &mut R,
) -> ParamSet<T> {
    let mut ps = ParamSet::new();
    let cm = |r: usize| cfg.channels(r).div_ceil(4);
    let top = cfg.output_resolution;
    ps.insert(
        "mask.frgb.weight",
        crate::nn::normal_init(rng, &[cm(top), 1, 1, 1], 1),
    );
    ps.insert("mask.frgb.bias", crate::nn::zeros(&[cm(top)]));
    let mut r = top;
    while r > gcfg.attach_start {
        ps.insert(
            format!("mask.b{r}.weight"),
            crate::nn::normal_init(rng, &[cm(r / 2), cm(r), 3, 3], cm(r) * 9),
        );
        ps.insert(format!("mask.b{r}.bias"), crate::nn::zeros(&[cm(r / 2)]));
        r /= 2;
    }
    let a = gcfg.attach_start;
    if a >= 8 {
        ps.insert(
            "fuse.conv0.weight",
            crate::nn::normal_init(rng, &[cfg.channels(a), cm(a), 3, 3], cm(a) * 9),
        );
        ps.insert(
            "fuse.skip.weight",
            crate::nn::normal_init(rng, &[cfg.channels(a / 2), cm(a), 1, 1], cm(a)),
        );
    } else {
        ps.insert(
            "fuse.epilogue.weight",
            crate::nn::normal_init(rng, &[cfg.channels(4), cm(4), 3, 3], cm(4) * 9),
        );
    }
    ps
}

// ---------------------------------------------------------------------------
// Core ops

/// Defect mapping network; identical structure to the backbone mapping.
pub fn map_defect_latent<T: Scalar>(
    z: &Tensor<T>,
    p: &ParamTensors<T>,
    cfg: &SynthesisConfig,
) -> Result<Tensor<T>> {
    map_latent(z, p, "defect_map", cfg)
}

/// Binary mask by the >= 0 rule (boundary counts as defect).
pub fn binarize<T: Scalar>(raw: &ArrayD<T>) -> ArrayD<T> {
    raw.mapv(|v| if v >= T::zero() { T::one() } else { T::zero() })
}

/// Mask-gated feature manipulation. `mask_raw` is `[N,1,H,W]` (raw
/// values); where it is >= 0 the defect features are added (residual)
/// or substituted (replace); elsewhere the object features pass through
/// bit for bit. No gradient flows through the comparison.
pub fn gate_features<T: Scalar>(
    f_object: &Tensor<T>,
    f_defect: &Tensor<T>,
    mask_raw: &ArrayD<T>,
    mode: FeatureMode,
) -> Result<Tensor<T>> {
    let so = f_object.shape();
    let sd = f_defect.shape();
    if so != sd {
        return Err(Error::config(format!(
            "gate_features shape mismatch: {so:?} vs {sd:?}"
        )));
    }
    let sm = mask_raw.shape();
    if sm.len() != 4 || sm[1] != 1 || sm[2] != so[2] || sm[3] != so[3] || sm[0] != so[0] {
        return Err(Error::config(format!(
            "mask shape {sm:?} incompatible with features {so:?}"
        )));
    }
    let keep = binarize(mask_raw);
    Ok(f_object.gate(f_defect, &keep, mode == FeatureMode::Residual))
}

/// 1x1 modulated conv to one channel, no nonlinearity; raw mask values.
pub fn to_mask<T: Scalar>(
    f_defect: &Tensor<T>,
    w_defect: &Tensor<T>,
    p: &ParamTensors<T>,
    gcfg: &DefectGenConfig,
) -> Result<Tensor<T>> {
    let s = f_defect.shape();
    if s[2] != gcfg.attach_start || s[3] != gcfg.attach_start {
        return Err(Error::config(format!(
            "to_mask expects resolution {}, got {}x{}",
            gcfg.attach_start, s[2], s[3]
        )));
    }
    to_image_layer(f_defect, w_defect, p, "to_mask")
}

/// Nearest-neighbor upsampling of a mask (raw or binary) to a
/// power-of-two multiple resolution.
pub fn upsample_mask<T: Scalar>(mask: &ArrayD<T>, target: usize) -> Result<ArrayD<T>> {
    let nd = mask.ndim();
    let (h, w) = (mask.shape()[nd - 2], mask.shape()[nd - 1]);
    if h != w {
        return Err(Error::config(format!("mask must be square, got {h}x{w}")));
    }
    if target < h || target % h != 0 || !(target / h).is_power_of_two() {
        return Err(Error::config(format!(
            "target {target} is not a power-of-two multiple of {h}"
        )));
    }
    if target == h {
        return Ok(mask.clone());
    }
    let f = target / h;
    let mut shape = mask.shape().to_vec();
    shape[nd - 2] = target;
    shape[nd - 1] = target;
    let out = ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
        let mut src = idx.as_array_view().to_vec();
        src[nd - 2] /= f;
        src[nd - 1] /= f;
        mask[IxDyn(&src)]
    });
    Ok(out)
}

/// Mode-seeking ratio `||w1-w2||_1 / (||d1-d2||_1 + eps)` where `d` is
/// the raw mask (default) or the image (MSWI ablation).
pub fn mode_seeking_loss<T: Scalar>(
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    d1: &Tensor<T>,
    d2: &Tensor<T>,
) -> Tensor<T> {
    let dw = w1.sub(w2).abs().sum();
    let dd = d1.sub(d2).abs().sum().add_scalar(T::from_real(MS_EPS));
    dw.div(&dd)
}

/// Image+mask pair scoring by the reduced-width matching discriminator.
pub fn match_discriminate<T: Scalar>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    p: &ParamTensors<T>,
    mcfg: &DiscriminatorConfig,
) -> Result<Tensor<T>> {
    let si = image.shape();
    let sm = mask.shape();
    if si.len() != 4 || sm.len() != 4 || si[1] != 3 || sm[1] != 1 || si[2..] != sm[2..] || si[0] != sm[0]
    {
        return Err(Error::config(format!(
            "match_discriminate expects [N,3,R,R] + [N,1,R,R], got {si:?} and {sm:?}"
        )));
    }
    let pair = image.graph().concat(&[image, mask], 1);
    discriminate(&pair, p, mcfg)
}

// ---------------------------------------------------------------------------
// Unified discriminator (ablation)

/// Fused discriminator: the image branch reuses the backbone
/// discriminator parameters; a reduced mask branch is downsampled in
/// lockstep and concatenated (via extra fusion weights) at the
/// attach-resolution block, or at the epilogue when attach_start is 4.
pub fn unified_discriminate<T: Scalar>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    pd: &ParamTensors<T>,
    pu: &ParamTensors<T>,
    cfg: &SynthesisConfig,
    gcfg: &DefectGenConfig,
) -> Result<Tensor<T>> {
    let dcfg = DiscriminatorConfig::for_synthesis(cfg, 3, 1);
    let si = image.shape();
    let sm = mask.shape();
    if si.len() != 4 || si[1] != 3 || sm.len() != 4 || sm[1] != 1 || si[2..] != sm[2..] {
        return Err(Error::config(format!(
            "unified_discriminate expects [N,3,R,R] + [N,1,R,R], got {si:?} and {sm:?}"
        )));
    }
    let attach = gcfg.attach_start;
    let slope = T::from_real(backbone::LRELU_SLOPE);
    let inv_sqrt2 = T::from_real(1.0 / 2.0_f64.sqrt());
    let conv = |p: &ParamTensors<T>, x: &Tensor<T>, name: &str, pad: usize| -> Tensor<T> {
        let w = p.get(&format!("{name}.weight"));
        let b = p.get(&format!("{name}.bias"));
        let o = w.shape()[0];
        x.conv2d(w, pad).add(&b.reshape(&[1, o, 1, 1]))
    };
    let mut x = conv(pd, image, "frgb", 0).leaky_relu(slope);
    let mut m = conv(pu, mask, "mask.frgb", 0).leaky_relu(slope);
    for r in dcfg.block_resolutions() {
        if r == attach {
            // fused block: extra input channels from the mask branch
            let b0 = pd.get(&format!("b{r}.conv0.bias"));
            let o0 = b0.shape()[0];
            let y = x
                .conv2d(pd.get(&format!("b{r}.conv0.weight")), 1)
                .add(&m.conv2d(pu.get("fuse.conv0.weight"), 1))
                .add(&b0.reshape(&[1, o0, 1, 1]))
                .leaky_relu(slope);
            let y = conv(pd, &y, &format!("b{r}.conv1"), 1).leaky_relu(slope).avgpool2x();
            let bs = pd.get(&format!("b{r}.skip.bias"));
            let os = bs.shape()[0];
            let s = x
                .conv2d(pd.get(&format!("b{r}.skip.weight")), 0)
                .add(&m.conv2d(pu.get("fuse.skip.weight"), 0))
                .add(&bs.reshape(&[1, os, 1, 1]))
                .avgpool2x();
            x = y.add(&s).scale(inv_sqrt2);
        } else {
            let y = conv(pd, &x, &format!("b{r}.conv0"), 1).leaky_relu(slope);
            let y = conv(pd, &y, &format!("b{r}.conv1"), 1).leaky_relu(slope).avgpool2x();
            let s = conv(pd, &x, &format!("b{r}.skip"), 0).avgpool2x();
            x = y.add(&s).scale(inv_sqrt2);
            if r > attach {
                m = conv(pu, &m, &format!("mask.b{r}"), 1).leaky_relu(slope).avgpool2x();
            }
        }
    }
    let x = backbone::minibatch_stddev(&x);
    let ec = pd.get("epilogue.conv.bias");
    let oe = ec.shape()[0];
    let mut e = x.conv2d(pd.get("epilogue.conv.weight"), 1);
    if attach == 4 {
        e = e.add(&m.conv2d(pu.get("fuse.epilogue.weight"), 1));
    }
    let e = e.add(&ec.reshape(&[1, oe, 1, 1])).leaky_relu(slope);
    let n = e.shape()[0];
    let flat_len = e.shape()[1] * e.shape()[2] * e.shape()[3];
    let e = e.reshape(&[n, flat_len]);
    let e = e
        .matmul(&pd.get("epilogue.fc0.weight").t())
        .add(pd.get("epilogue.fc0.bias"))
        .leaky_relu(slope);
    let e = e
        .matmul(&pd.get("epilogue.fc1.weight").t())
        .add(pd.get("epilogue.fc1.bias"));
    Ok(e.reshape(&[n]))
}

// ---------------------------------------------------------------------------
// Forward pass

pub struct DefectForward<T: Scalar> {
    /// Manipulated (defect) image.
    pub image: Tensor<T>,
    /// Backbone image for the same object code and noise.
    pub clean_image: Tensor<T>,
    /// Raw mask at the attach resolution, [N,1,a,a].
    pub raw_mask: Tensor<T>,
    /// Binary mask upsampled to the output resolution.
    pub mask_binary_full: ArrayD<T>,
}

/// Run the backbone and the defect branch together. `bp` holds the
/// backbone generator parameters (`map.*`, `synth.*`), `ap` the
/// adaptation (`defect_map.*`, `res_block.*`, `to_mask.*`). `noise`
/// must carry `b{r}.*` maps plus `defect.b{r}.*` for r >= attach.
pub fn forward_defect<T: Scalar>(
    w_obj: &Tensor<T>,
    w_def: &Tensor<T>,
    noise: &NoiseBundle<T>,
    bp: &ParamTensors<T>,
    ap: &ParamTensors<T>,
    cfg: &SynthesisConfig,
    gcfg: &DefectGenConfig,
) -> Result<DefectForward<T>> {
    gcfg.validate(cfg)?;
    let n = w_obj.shape()[0];
    let attach = gcfg.attach_start;
    let mut x_clean = const_input(bp, "synth", cfg, n);
    let mut x_def = x_clean.clone();
    let mut rgb_clean: Option<Tensor<T>> = None;
    let mut rgb_def: Option<Tensor<T>> = None;
    let mut f_stream: Option<Tensor<T>> = None;
    let mut raw_mask: Option<Tensor<T>> = None;
    let mut keep_attach: Option<ArrayD<T>> = None;

    for r in cfg.resolutions() {
        let base = r == 4;
        let x_in_clean = x_clean.clone();
        let x_in_def = x_def.clone();
        x_clean = run_block(&x_in_clean, w_obj, bp, &format!("synth.b{r}"), base, noise, &format!("b{r}"))?;
        let torgb = |x: &Tensor<T>| to_image_layer(x, w_obj, bp, &format!("synth.b{r}.torgb"));
        rgb_clean = Some(match &rgb_clean {
            None => torgb(&x_clean)?,
            Some(prev) => prev.upsample2x().add(&torgb(&x_clean)?),
        });

        if r < attach {
            x_def = x_clean.clone();
            rgb_def = rgb_clean.clone();
            continue;
        }
        // object-path block on the (possibly already gated) defect stream
        let x_obj = if r == attach {
            x_clean.clone()
        } else {
            run_block(&x_in_def, w_obj, bp, &format!("synth.b{r}"), base, noise, &format!("b{r}"))?
        };
        let f = if r == attach {
            run_block(
                &x_in_clean,
                w_def,
                ap,
                &format!("res_block.{r}"),
                base,
                noise,
                &format!("defect.b{r}"),
            )?
        } else {
            run_block(
                f_stream.as_ref().expect("defect stream started at attach"),
                w_def,
                ap,
                &format!("res_block.{r}"),
                false,
                noise,
                &format!("defect.b{r}"),
            )?
        };
        if r == attach {
            let raw = to_mask(&f, w_def, ap, gcfg)?;
            keep_attach = Some(binarize(&raw.value()));
            raw_mask = Some(raw);
        }
        let keep = upsample_mask(keep_attach.as_ref().expect("mask set at attach"), r)?;
        x_def = x_obj.gate(&f, &keep, gcfg.feature_mode == FeatureMode::Residual);
        f_stream = Some(f);
        let t = to_image_layer(&x_def, w_obj, bp, &format!("synth.b{r}.torgb"))?;
        rgb_def = Some(match &rgb_def {
            None => t,
            Some(prev) => prev.upsample2x().add(&t),
        });
    }

    let keep = keep_attach.expect("attach resolution visited");
    Ok(DefectForward {
        image: rgb_def.expect("nonempty resolution chain"),
        clean_image: rgb_clean.expect("nonempty resolution chain"),
        raw_mask: raw_mask.expect("mask computed"),
        mask_binary_full: upsample_mask(&keep, cfg.output_resolution)?,
    })
}

// ---------------------------------------------------------------------------
// Generation API

/// Backbone + adaptation parameter bundles split out of a combined
/// stage-2 checkpoint.
pub struct GeneratorStates<T: Scalar> {
    pub backbone: ParamSet<T>,
    pub adaptation: ParamSet<T>,
}

impl<T: Scalar> GeneratorStates<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let backbone = ckpt.params.strip_prefix("g.");
        if backbone.is_empty() {
            return Err(Error::data("checkpoint has no backbone (g.*) arrays"));
        }
        let mut adaptation = ParamSet::new();
        for (k, v) in ckpt.params.iter() {
            if k.starts_with("defect_map.") || k.starts_with("res_block.") || k.starts_with("to_mask.")
            {
                adaptation.insert(k.clone(), v.clone());
            }
        }
        if adaptation.is_empty() {
            return Err(Error::data(
                "checkpoint has no adaptation (defect_map/res_block/to_mask) arrays",
            ));
        }
        Ok(GeneratorStates {
            backbone,
            adaptation,
        })
    }
}

/// One generated triplet batch.
pub struct TripletBatch<T: Scalar> {
    pub image: ArrayD<T>,
    pub mask: ArrayD<T>,
    pub clean: ArrayD<T>,
}

/// Full triplet generation from latent codes: (defect image, binary
/// mask at output resolution, defect-free image), sharing object code
/// and noise.
pub fn generate_defect_image<T: Scalar>(
    states: &GeneratorStates<T>,
    cfg: &SynthesisConfig,
    gcfg: &DefectGenConfig,
    z_object: &ArrayD<T>,
    z_defect: &ArrayD<T>,
    noise: &NoiseBundle<T>,
) -> Result<TripletBatch<T>> {
    if z_object.shape() != z_defect.shape() {
        return Err(Error::config(format!(
            "latent shapes differ: {:?} vs {:?}",
            z_object.shape(),
            z_defect.shape()
        )));
    }
    let g: Graph<T> = Graph::new();
    let bp = ParamTensors::frozen(&g, &states.backbone);
    let ap = ParamTensors::frozen(&g, &states.adaptation);
    let w_obj = map_latent(&g.constant(z_object.clone()), &bp, "map", cfg)?;
    let w_def = map_defect_latent(&g.constant(z_defect.clone()), &ap, cfg)?;
    let fwd = forward_defect(&w_obj, &w_def, noise, &bp, &ap, cfg, gcfg)?;
    Ok(TripletBatch {
        image: fwd.image.value(),
        mask: fwd.mask_binary_full,
        clean: fwd.clean_image.value(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    Both,
    DefectOnly,
}

/// Linear interpolation in z-space; returns one triplet batch per step.
/// With `DefectOnly` the object code stays at `z_object.0`.
#[allow(clippy::too_many_arguments)]
pub fn interpolate<T: Scalar>(
    states: &GeneratorStates<T>,
    cfg: &SynthesisConfig,
    gcfg: &DefectGenConfig,
    z_object: (&ArrayD<T>, &ArrayD<T>),
    z_defect: (&ArrayD<T>, &ArrayD<T>),
    steps: usize,
    mode: InterpMode,
    noise: &NoiseBundle<T>,
) -> Result<Vec<TripletBatch<T>>> {
    if steps < 2 {
        return Err(Error::config("interpolation needs at least 2 steps"));
    }
    let lerp = |a: &ArrayD<T>, b: &ArrayD<T>, t: f64| -> ArrayD<T> {
        let tt = T::from_real(t);
        let one_m = T::from_real(1.0 - t);
        let mut out = a.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|o, &bv| {
            *o = *o * one_m + bv * tt;
        });
        out
    };
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let zo = match mode {
            InterpMode::Both => lerp(z_object.0, z_object.1, t),
            InterpMode::DefectOnly => z_object.0.clone(),
        };
        let zd = lerp(z_defect.0, z_defect.1, t);
        out.push(generate_defect_image(states, cfg, gcfg, &zo, &zd, noise)?);
    }
    Ok(out)
}

/// Squash the raw (differentiable) mask tensor into (-1, 1) with the
/// sign-preserving softsign x/(1+|x|) and upsample it to the output
/// resolution by repeated nearest-neighbor doubling. Discriminators see
/// this continuous mask for generated pairs — scale-matched to the ±1
/// encoding of real masks, and with the same sign convention as the
/// binarization threshold (raw >= 0 is defect) — so mask extent
/// receives adversarial gradient; binarization happens only at export.
fn raw_mask_full<T: Scalar>(raw: &Tensor<T>, target: usize) -> Tensor<T> {
    let mut m = raw.div(&raw.abs().add_scalar(T::one()));
    while m.shape()[m.shape().len() - 1] < target {
        m = m.upsample2x();
    }
    m
}

// ---------------------------------------------------------------------------
// Objective

pub struct Stage2Terms<T: Scalar> {
    pub adv: Tensor<T>,
    pub match_adv: Tensor<T>,
    pub ms: Tensor<T>,
    pub total: Tensor<T>,
}

/// Full stage-2 objective from precomputed scores: the Wasserstein gap
/// on D, the gap on D_match, and the weighted mode-seeking term.
pub fn stage2_objective<T: Scalar>(
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
    dm_real: &Tensor<T>,
    dm_fake: &Tensor<T>,
    ms: &Tensor<T>,
    lambda_ms: f64,
) -> Stage2Terms<T> {
    let adv = adv_d_loss(LossKind::Wgan, d_real, d_fake);
    let match_adv = adv_d_loss(LossKind::Wgan, dm_real, dm_fake);
    let total = adv.add(&match_adv).add(&ms.scale(T::from_real(lambda_ms)));
    Stage2Terms {
        adv,
        match_adv,
        ms: ms.clone(),
        total,
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug)]
pub struct DefectSample<T: Scalar> {
    /// [3,R,R] in [-1,1].
    pub image: ArrayD<T>,
    /// [1,R,R]; thresholded to {0,1} at half the per-sample maximum.
    pub mask: ArrayD<T>,
}

/// Threshold a real mask at 0.5 of its maximum value.
pub fn threshold_mask<T: Scalar>(mask: &ArrayD<T>) -> ArrayD<T> {
    let maxv = mask.iter().cloned().fold(T::zero(), T::max);
    if maxv <= T::zero() {
        return ArrayD::zeros(mask.raw_dim());
    }
    let half = maxv * T::from_real(0.5);
    mask.mapv(|v| if v >= half { T::one() } else { T::zero() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefectTrainConfig {
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
    pub gen: DefectGenConfig,
}

impl DefectTrainConfig {
    pub fn with_gen(gen: DefectGenConfig) -> Self {
        DefectTrainConfig {
            steps: 500,
            batch: 8,
            seed: 0,
            lr: 0.0025,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            loss: LossKind::Wgan,
            r1_gamma: 10.0,
            r1_interval: 16,
            gen,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2LogEntry {
    pub step: usize,
    pub adv_d: f64,
    pub adv_match: Option<f64>,
    pub adv_g: f64,
    pub ms: Option<f64>,
}

pub struct DefectTrainResult<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<Stage2LogEntry>,
}

fn stack<T: Scalar>(items: &[&ArrayD<T>]) -> ArrayD<T> {
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform shapes")
}

fn grads_of<T: Scalar>(
    loss: &Tensor<T>,
    pt: &ParamTensors<T>,
) -> IndexMap<String, ArrayD<T>> {
    let names: Vec<String> = pt.iter().map(|(k, _)| k.clone()).collect();
    let leaves: Vec<&Tensor<T>> = pt.iter().map(|(_, t)| t).collect();
    let gs = grad(loss, &leaves);
    names
        .into_iter()
        .zip(gs.iter().map(|t| t.value()))
        .collect()
}

/// Stage-2 training: freeze the backbone generator, train the
/// adaptation, finetune D from the backbone checkpoint, and train
/// D_match from scratch (or the fused discriminator in unified mode).
pub fn train_defect_stage<T: Scalar>(
    backbone_ckpt: &Checkpoint<T>,
    data: &[DefectSample<T>],
    cfg: &SynthesisConfig,
    tcfg: &DefectTrainConfig,
) -> Result<DefectTrainResult<T>> {
    cfg.validate()?;
    let gcfg = &tcfg.gen;
    gcfg.validate(cfg)?;
    if data.is_empty() {
        return Err(Error::data("defect dataset is empty"));
    }
    let r = cfg.output_resolution;
    for s in data {
        if s.image.shape() != [3, r, r] {
            return Err(Error::data(format!(
                "defect image shape {:?}, expected [3,{r},{r}]",
                s.image.shape()
            )));
        }
        if s.mask.shape() != [1, r, r] {
            return Err(Error::data(format!(
                "defect mask shape {:?}, expected [1,{r},{r}]",
                s.mask.shape()
            )));
        }
    }
    let g_params = backbone_ckpt.params.strip_prefix("g.");
    let mut d_params = backbone_ckpt.params.strip_prefix("d.");
    if g_params.is_empty() || d_params.is_empty() {
        return Err(Error::data("backbone checkpoint must contain g.* and d.* arrays"));
    }
    // Discriminators see masks in a ±1 encoding (defect +1, background
    // -1) so that matching real-mask statistics drives the generator's
    // raw mask negative outside defects, consistent with the raw >= 0
    // binarization threshold.
    let masks: Vec<ArrayD<T>> = data
        .iter()
        .map(|s| threshold_mask(&s.mask).mapv(|v| v + v - T::one()))
        .collect();

    let mut a_params: ParamSet<T> =
        init_adaptation(cfg, gcfg, &mut seeds::stream(tcfg.seed, "adapt_init"));
    let unified = gcfg.discriminator_mode == DiscriminatorMode::Unified;
    let mcfg = match_disc_config(cfg);
    let mut m_params: ParamSet<T> = if unified {
        ParamSet::new()
    } else {
        init_discriminator(&mcfg, &mut seeds::stream(tcfg.seed, "dmatch_init"))
    };
    let mut u_params: ParamSet<T> = if unified {
        init_unified_extras(cfg, gcfg, &mut seeds::stream(tcfg.seed, "du_init"))
    } else {
        ParamSet::new()
    };

    let mut adam_a = Adam::new(tcfg.adam());
    let mut adam_d = Adam::new(tcfg.adam());
    let mut adam_m = Adam::new(tcfg.adam());
    let mut adam_u = Adam::new(tcfg.adam());
    let mut sampler = BatchSampler::new(data.len(), tcfg.seed);
    let dcfg = DiscriminatorConfig::for_synthesis(cfg, 3, 1);
    let mut log = Vec::new();

    for step in 0..tcfg.steps {
        let idx = sampler.next_batch(tcfg.batch);
        let real_imgs = stack(&idx.iter().map(|&i| &data[i].image).collect::<Vec<_>>());
        let real_masks = stack(&idx.iter().map(|&i| &masks[i]).collect::<Vec<_>>());
        let do_r1 = step % tcfg.r1_interval == 0;

        // one fake batch for the discriminator side
        let make_noise = |label: &str| -> NoiseBundle<T> {
            let mut b = NoiseBundle::new();
            let mut rng = seeds::substream(tcfg.seed, label, step as u64);
            b.sample_prefixed(cfg, tcfg.batch, "", &mut rng);
            b.sample_prefixed(cfg, tcfg.batch, "defect.", &mut rng);
            b
        };

        // --- discriminator phase
        let adv_d_v;
        let mut adv_match_v = None;
        {
            let graph: Graph<T> = Graph::new();
            let bp = ParamTensors::frozen(&graph, &g_params);
            let ap = ParamTensors::frozen(&graph, &a_params);
            let dp = ParamTensors::trainable(&graph, &d_params);
            let mut zrng = seeds::substream(tcfg.seed, "s2.z_d", step as u64);
            let z_obj = graph.constant(backbone::sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let z_def = graph.constant(backbone::sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let noise = make_noise("s2.noise_d");
            let w_obj = map_latent(&z_obj, &bp, "map", cfg)?;
            let w_def = map_defect_latent(&z_def, &ap, cfg)?;
            let fwd = forward_defect(&w_obj, &w_def, &noise, &bp, &ap, cfg, gcfg)?;

            if unified {
                let up = ParamTensors::trainable(&graph, &u_params);
                let real_img_leaf = graph.var(real_imgs.clone());
                let real_mask_leaf = graph.var(real_masks.clone());
                let s_real =
                    unified_discriminate(&real_img_leaf, &real_mask_leaf, &dp, &up, cfg, gcfg)?;
                let fake_mask = raw_mask_full(&fwd.raw_mask, cfg.output_resolution);
                let s_fake = unified_discriminate(&fwd.image, &fake_mask, &dp, &up, cfg, gcfg)?;
                let mut loss = adv_d_loss(tcfg.loss, &s_real, &s_fake);
                if do_r1 {
                    loss = loss.add(&r1_penalty_multi(
                        &s_real,
                        &[&real_img_leaf, &real_mask_leaf],
                        tcfg.r1_gamma,
                    ));
                }
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("non-finite unified D loss at step {step}")));
                }
                adv_d_v = adv_d_loss(tcfg.loss, &s_real, &s_fake).item().real();
                let gd = grads_of(&loss, &dp);
                let gu = grads_of(&loss, &up);
                adam_d.update(&mut d_params, &gd)?;
                adam_u.update(&mut u_params, &gu)?;
            } else {
                let real_leaf = graph.var(real_imgs.clone());
                let s_real = discriminate(&real_leaf, &dp, &dcfg)?;
                let s_fake = discriminate(&fwd.image, &dp, &dcfg)?;
                let mut loss = adv_d_loss(tcfg.loss, &s_real, &s_fake);
                if do_r1 {
                    loss = loss.add(&r1_penalty_multi(&s_real, &[&real_leaf], tcfg.r1_gamma));
                }
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("non-finite stage-2 D loss at step {step}")));
                }
                adv_d_v = adv_d_loss(tcfg.loss, &s_real, &s_fake).item().real();
                let gd = grads_of(&loss, &dp);
                adam_d.update(&mut d_params, &gd)?;
            }
        }

        // --- matching discriminator phase (dual mode)
        if !unified {
            let graph: Graph<T> = Graph::new();
            let bp = ParamTensors::frozen(&graph, &g_params);
            let ap = ParamTensors::frozen(&graph, &a_params);
            let mp = ParamTensors::trainable(&graph, &m_params);
            let mut zrng = seeds::substream(tcfg.seed, "s2.z_m", step as u64);
            let z_obj = graph.constant(backbone::sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let z_def = graph.constant(backbone::sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let noise = make_noise("s2.noise_m");
            let w_obj = map_latent(&z_obj, &bp, "map", cfg)?;
            let w_def = map_defect_latent(&z_def, &ap, cfg)?;
            let fwd = forward_defect(&w_obj, &w_def, &noise, &bp, &ap, cfg, gcfg)?;

            let real_pair_arr = ndarray::concatenate(
                Axis(1),
                &[real_imgs.view(), real_masks.view()],
            )
            .expect("pair concat");
            let real_pair = graph.var(real_pair_arr);
            let s_real = discriminate(&real_pair, &mp, &mcfg)?;
            let fake_mask = raw_mask_full(&fwd.raw_mask, cfg.output_resolution);
            let s_fake = match_discriminate(&fwd.image, &fake_mask, &mp, &mcfg)?;
            let mut loss = adv_d_loss(tcfg.loss, &s_real, &s_fake);
            if do_r1 {
                loss = loss.add(&r1_penalty_multi(&s_real, &[&real_pair], tcfg.r1_gamma));
            }
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite matching discriminator loss at step {step}"
                )));
            }
            adv_match_v = Some(adv_d_loss(tcfg.loss, &s_real, &s_fake).item().real());
            let gm = grads_of(&loss, &mp);
            adam_m.update(&mut m_params, &gm)?;
        }

        // --- generator (adaptation) phase
        let adv_g_v;
        let mut ms_v = None;
        {
            let graph: Graph<T> = Graph::new();
            let bp = ParamTensors::frozen(&graph, &g_params);
            let ap = ParamTensors::trainable(&graph, &a_params);
            let dp = ParamTensors::frozen(&graph, &d_params);
            let mut zrng = seeds::substream(tcfg.seed, "s2.z_g", step as u64);
            let z_obj = graph.constant(backbone::sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let z_def_a = graph.constant(backbone::sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let z_def_b = graph.constant(backbone::sample_latents(tcfg.batch, cfg.z_dim, &mut zrng));
            let noise = make_noise("s2.noise_g");
            let w_obj = map_latent(&z_obj, &bp, "map", cfg)?;
            let w_a = map_defect_latent(&z_def_a, &ap, cfg)?;
            let w_b = map_defect_latent(&z_def_b, &ap, cfg)?;
            let fa = forward_defect(&w_obj, &w_a, &noise, &bp, &ap, cfg, gcfg)?;
            let fb = forward_defect(&w_obj, &w_b, &noise, &bp, &ap, cfg, gcfg)?;

            let half = T::from_real(0.5);
            let mut loss = if unified {
                let up = ParamTensors::frozen(&graph, &u_params);
                let ma = raw_mask_full(&fa.raw_mask, cfg.output_resolution);
                let mb = raw_mask_full(&fb.raw_mask, cfg.output_resolution);
                let sa = unified_discriminate(&fa.image, &ma, &dp, &up, cfg, gcfg)?;
                let sb = unified_discriminate(&fb.image, &mb, &dp, &up, cfg, gcfg)?;
                adv_g_loss(tcfg.loss, &sa)
                    .add(&adv_g_loss(tcfg.loss, &sb))
                    .scale(half)
            } else {
                let mp = ParamTensors::frozen(&graph, &m_params);
                let sa = discriminate(&fa.image, &dp, &dcfg)?;
                let sb = discriminate(&fb.image, &dp, &dcfg)?;
                let ma = raw_mask_full(&fa.raw_mask, cfg.output_resolution);
                let mb = raw_mask_full(&fb.raw_mask, cfg.output_resolution);
                let sma = match_discriminate(&fa.image, &ma, &mp, &mcfg)?;
                let smb = match_discriminate(&fb.image, &mb, &mp, &mcfg)?;
                adv_g_loss(tcfg.loss, &sa)
                    .add(&adv_g_loss(tcfg.loss, &sb))
                    .scale(half)
                    .add(
                        &adv_g_loss(tcfg.loss, &sma)
                            .add(&adv_g_loss(tcfg.loss, &smb))
                            .scale(half),
                    )
            };
            adv_g_v = loss.item().real();
            match gcfg.ms_mode {
                MsMode::None => {}
                MsMode::Mask => {
                    let ms = mode_seeking_loss(&w_a, &w_b, &fa.raw_mask, &fb.raw_mask);
                    ms_v = Some(ms.item().real());
                    loss = loss.add(&ms.scale(T::from_real(gcfg.lambda_ms)));
                }
                MsMode::Image => {
                    let ms = mode_seeking_loss(&w_a, &w_b, &fa.image, &fb.image);
                    ms_v = Some(ms.item().real());
                    loss = loss.add(&ms.scale(T::from_real(gcfg.lambda_ms)));
                }
            }
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite stage-2 generator loss at step {step}"
                )));
            }
            let ga = grads_of(&loss, &ap);
            adam_a.update(&mut a_params, &ga)?;
        }

        log.push(Stage2LogEntry {
            step,
            adv_d: adv_d_v,
            adv_match: adv_match_v,
            adv_g: adv_g_v,
            ms: ms_v,
        });
    }

    let mut params = ParamSet::new();
    params.extend_prefixed("g.", &g_params);
    params.extend_prefixed("d.", &d_params);
    params.extend_prefixed("", &a_params);
    if unified {
        params.extend_prefixed("d_unified.", &u_params);
    } else {
        params.extend_prefixed("d_match.", &m_params);
    }
    let config = serde_json::json!({
        "synthesis": cfg,
        "defect": gcfg,
        "stage": 2,
        "loss": tcfg.loss,
        "seed": tcfg.seed,
    });
    let mut ckpt = Checkpoint::new(params, config, tcfg.steps as u64);
    ckpt.freeze_prefix("g.");
    Ok(DefectTrainResult {
        checkpoint: ckpt,
        log,
    })
}
