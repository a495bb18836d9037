//! Defect-classification augmentation harness: generate a labeled
//! training set from per-category stage-2 generators, train a small
//! classifier on it, and measure top-1 accuracy on held-out real images.

use crate::autodiff::{grad, Graph, Tensor};
use crate::backbone::SynthesisConfig;
use crate::checkpoint::Checkpoint;
use crate::defect::{generate_defect_image, DefectGenConfig, GeneratorStates};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamSet, ParamTensors};
use crate::num::Scalar;
use crate::seeds;
use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyCnn,
    Resnet34,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub architecture: Architecture,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            architecture: Architecture::TinyCnn,
            lr: 1e-5,
            batch: 64,
            epochs: 50,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch == 0 {
            return Err(Error::config("classifier lr and batch must be positive"));
        }
        Ok(())
    }
}

/// One classification example: `[3,R,R]` image in [-1,1] and its class
/// index into the label list.
#[derive(Clone, Debug)]
pub struct LabeledImage<T: Scalar> {
    pub image: ArrayD<T>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct ClassifierState<T: Scalar> {
    pub params: ParamSet<T>,
    pub architecture: Architecture,
    pub classes: Vec<String>,
    pub resolution: usize,
}

// ---------------------------------------------------------------------------
// augmented training set

fn parse_stage2_configs(ckpt_config: &serde_json::Value) -> Result<(SynthesisConfig, DefectGenConfig)> {
    let synth: SynthesisConfig = serde_json::from_value(ckpt_config["synthesis"].clone())
        .map_err(|e| Error::data(format!("checkpoint lacks a synthesis config: {e}")))?;
    let gen: DefectGenConfig = serde_json::from_value(ckpt_config["defect"].clone())
        .map_err(|e| Error::data(format!("checkpoint lacks a defect config: {e}")))?;
    synth.validate()?;
    gen.validate(&synth)?;
    Ok((synth, gen))
}

/// Sample `n_per_category` defect images from each category's stage-2
/// generator (fresh seeded latents) and combine them into one labeled
/// set. Returns the examples plus the class-name list in input order.
pub fn build_augmented_trainset<T: Scalar>(
    checkpoints: &[(String, Checkpoint<T>)],
    n_per_category: usize,
    seed: u64,
) -> Result<(Vec<LabeledImage<T>>, Vec<String>)> {
    let classes: Vec<String> = checkpoints.iter().map(|(n, _)| n.clone()).collect();
    let mut out = Vec::with_capacity(classes.len() * n_per_category);
    for (label, (name, ckpt)) in checkpoints.iter().enumerate() {
        let (cfg, gcfg) = parse_stage2_configs(&ckpt.config)?;
        let states = GeneratorStates::from_checkpoint(ckpt)?;
        let mut rng = seeds::stream(seed, &format!("downstream.gen.{name}"));
        for _ in 0..n_per_category {
            let z_obj = sample_z(&cfg, &mut rng);
            let z_def = sample_z(&cfg, &mut rng);
            let mut noise = crate::backbone::NoiseBundle::new();
            noise.sample_prefixed(&cfg, 1, "", &mut rng);
            noise.sample_prefixed(&cfg, 1, "defect.", &mut rng);
            let t = generate_defect_image(&states, &cfg, &gcfg, &z_obj, &z_def, &noise)?;
            let r = cfg.output_resolution;
            let image = t
                .image
                .into_shape_with_order(IxDyn(&[3, r, r]))
                .map_err(|e| Error::numeric(format!("bad generated shape: {e}")))?;
            out.push(LabeledImage { image, label });
        }
    }
    Ok((out, classes))
}

fn sample_z<T: Scalar>(cfg: &SynthesisConfig, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(&[1, cfg.z_dim]), || {
        T::from_real(rng.sample::<f64, _>(StandardNormal))
    })
}

// ---------------------------------------------------------------------------
// classifier networks

fn init_conv<T: Scalar>(
    ps: &mut ParamSet<T>,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    let scale = 1.0 / ((ci * k * k) as f64).sqrt();
    ps.insert(
        &format!("{name}.weight"),
        ArrayD::from_shape_simple_fn(IxDyn(&[co, ci, k, k]), || {
            T::from_real(rng.sample::<f64, _>(StandardNormal) * scale)
        }),
    );
    ps.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[co])));
}

fn init_fc<T: Scalar>(
    ps: &mut ParamSet<T>,
    name: &str,
    o: usize,
    i: usize,
    rng: &mut ChaCha8Rng,
) {
    let scale = 1.0 / (i as f64).sqrt();
    ps.insert(
        &format!("{name}.weight"),
        ArrayD::from_shape_simple_fn(IxDyn(&[o, i]), || {
            T::from_real(rng.sample::<f64, _>(StandardNormal) * scale)
        }),
    );
    ps.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[o])));
}

const TINY_CHANNELS: [usize; 4] = [3, 8, 16, 32];
const RESNET_STAGES: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];

/// Initialize classifier parameters for the given architecture.
pub fn init_classifier<T: Scalar>(
    arch: Architecture,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> ParamSet<T> {
    let mut ps = ParamSet::new();
    match arch {
        Architecture::TinyCnn => {
            for l in 0..3 {
                init_conv(
                    &mut ps,
                    &format!("conv{l}"),
                    TINY_CHANNELS[l + 1],
                    TINY_CHANNELS[l],
                    3,
                    rng,
                );
            }
            init_fc(&mut ps, "head", n_classes, TINY_CHANNELS[3], rng);
        }
        Architecture::Resnet34 => {
            init_conv(&mut ps, "stem", RESNET_STAGES[0].0, 3, 3, rng);
            let mut ci = RESNET_STAGES[0].0;
            for (s, (co, blocks)) in RESNET_STAGES.iter().enumerate() {
                for b in 0..*blocks {
                    let cin = if b == 0 { ci } else { *co };
                    init_conv(&mut ps, &format!("s{s}.b{b}.conv0"), *co, cin, 3, rng);
                    init_conv(&mut ps, &format!("s{s}.b{b}.conv1"), *co, *co, 3, rng);
                    if cin != *co {
                        init_conv(&mut ps, &format!("s{s}.b{b}.proj"), *co, cin, 1, rng);
                    }
                }
                ci = *co;
            }
            init_fc(&mut ps, "head", n_classes, ci, rng);
        }
    }
    ps
}

fn conv_lrelu<T: Scalar>(x: &Tensor<T>, p: &ParamTensors<T>, name: &str, pad: usize) -> Tensor<T> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let n = x.shape()[0];
    let co = w.shape()[0];
    x.conv2d(&w, pad)
        .add(&b.reshape(&[1, co, 1, 1]).broadcast_to(&[
            n,
            co,
            x.shape()[2],
            x.shape()[3],
        ]))
        .leaky_relu(T::from_real(0.2))
}

fn global_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    x.sum_axes(&[2, 3])
        .scale(T::from_real(1.0 / (s[2] * s[3]) as f64))
        .reshape(&[s[0], s[1]])
}

fn fc<T: Scalar>(x: &Tensor<T>, p: &ParamTensors<T>, name: &str) -> Tensor<T> {
    let w = p.get(&format!("{name}.weight"));
    let b = p.get(&format!("{name}.bias"));
    let n = x.shape()[0];
    let o = w.shape()[0];
    x.matmul(&w.t()).add(&b.reshape(&[1, o]).broadcast_to(&[n, o]))
}

/// Forward pass producing `[N, n_classes]` logits.
pub fn classifier_logits<T: Scalar>(
    images: &Tensor<T>,
    p: &ParamTensors<T>,
    arch: Architecture,
) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::config(format!("expected [N,3,H,W] input, got {s:?}")));
    }
    match arch {
        Architecture::TinyCnn => {
            let mut x = images.clone();
            for l in 0..3 {
                x = conv_lrelu(&x, p, &format!("conv{l}"), 1);
                if x.shape()[2] > 1 {
                    x = x.avgpool2x();
                }
            }
            Ok(fc(&global_mean(&x), p, "head"))
        }
        Architecture::Resnet34 => {
            let mut x = conv_lrelu(images, p, "stem", 1);
            for (si, (co, blocks)) in RESNET_STAGES.iter().enumerate() {
                if si > 0 && x.shape()[2] > 1 {
                    x = x.avgpool2x();
                }
                for b in 0..*blocks {
                    let skip = if x.shape()[1] != *co {
                        conv_lrelu(&x, p, &format!("s{si}.b{b}.proj"), 0)
                    } else {
                        x.clone()
                    };
                    let y = conv_lrelu(&x, p, &format!("s{si}.b{b}.conv0"), 1);
                    let y = conv_lrelu(&y, p, &format!("s{si}.b{b}.conv1"), 1);
                    x = y.add(&skip).scale(T::from_real(std::f64::consts::FRAC_1_SQRT_2));
                }
            }
            Ok(fc(&global_mean(&x), p, "head"))
        }
    }
}

/// Mean cross-entropy of logits against integer labels, stabilized by a
/// detached per-row max shift.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::config("label count does not match batch size"));
    }
    let vals = logits.value();
    let mut shift = ArrayD::zeros(IxDyn(&[n, 1]));
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..k {
            m = m.max(vals[[i, j]].real());
        }
        shift[[i, 0]] = T::from_real(m);
    }
    let g = logits.graph();
    let shifted = logits.sub(&g.constant(shift).broadcast_to(&[n, k]));
    let log_z = shifted.exp().sum_axes(&[1]).ln(); // [n,1]
    let mut onehot = ArrayD::zeros(IxDyn(&[n, k]));
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::data(format!("label {l} out of range (k={k})")));
        }
        onehot[[i, l]] = T::one();
    }
    let picked = shifted.mul(&g.constant(onehot)).sum_axes(&[1]);
    Ok(log_z.sub(&picked).mean())
}

// ---------------------------------------------------------------------------
// training and evaluation

/// Cross-entropy training with Adam (0.9/0.999) at the configured
/// hyperparameters; deterministic per seed. Returns the state and the
/// per-epoch mean loss curve.
pub fn train_classifier<T: Scalar>(
    trainset: &[LabeledImage<T>],
    classes: &[String],
    cfg: &ClassifierConfig,
) -> Result<(ClassifierState<T>, Vec<f64>)> {
    cfg.validate()?;
    if trainset.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let present: std::collections::BTreeSet<usize> =
        trainset.iter().map(|s| s.label).collect();
    if present.len() < 2 {
        return Err(Error::data(
            "classifier training needs at least 2 classes present",
        ));
    }
    if classes.len() < 2 || *present.iter().max().unwrap() >= classes.len() {
        return Err(Error::config("labels exceed the declared class list"));
    }
    let resolution = trainset[0].image.shape()[1];
    for s in trainset {
        if s.image.shape() != [3, resolution, resolution] {
            return Err(Error::data(format!(
                "inconsistent image shape {:?}",
                s.image.shape()
            )));
        }
    }
    let mut params: ParamSet<T> = init_classifier(
        cfg.architecture,
        classes.len(),
        &mut seeds::stream(cfg.seed, "cls_init"),
    );
    let mut adam: Adam<T> = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut curve = Vec::with_capacity(cfg.epochs);
    let n = trainset.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeds::substream(cfg.seed, "cls.order", epoch as u64);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut shape = vec![1usize];
                shape.extend_from_slice(trainset[i].image.shape());
                images.push(
                    trainset[i]
                        .image
                        .clone()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap(),
                );
                labels.push(trainset[i].label);
            }
            let views: Vec<_> = images.iter().map(|a| a.view()).collect();
            let batch = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| Error::data(format!("cannot stack batch: {e}")))?;
            let g: Graph<T> = Graph::new();
            let p = ParamTensors::trainable(&g, &params);
            let logits = classifier_logits(&g.constant(batch), &p, cfg.architecture)?;
            let loss = cross_entropy(&logits, &labels)?;
            let lv = loss.item().real();
            if !lv.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite classifier loss at epoch {epoch}"
                )));
            }
            epoch_loss += lv;
            batches += 1;
            let names: Vec<String> = params.names().cloned().collect();
            let tensors: Vec<Tensor<T>> = names.iter().map(|nm| p.get(nm).clone()).collect();
            let refs: Vec<&Tensor<T>> = tensors.iter().collect();
            let grads_v = grad(&loss, &refs);
            let mut gmap: IndexMap<String, ArrayD<T>> = IndexMap::new();
            for (nm, gt) in names.iter().zip(grads_v.iter()) {
                gmap.insert(nm.clone(), gt.value());
            }
            adam.update(&mut params, &gmap)?;
        }
        curve.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((
        ClassifierState {
            params,
            architecture: cfg.architecture,
            classes: classes.to_vec(),
            resolution,
        },
        curve,
    ))
}

/// Confusion matrix with true labels as rows (including an implicit
/// "unknown" handling: out-of-range labels count as wrong).
pub fn confusion_matrix<T: Scalar>(
    state: &ClassifierState<T>,
    test_set: &[LabeledImage<T>],
) -> Result<Array2<usize>> {
    if test_set.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let k = state.classes.len();
    let mut cm = Array2::zeros((k, k));
    let g: Graph<T> = Graph::new();
    let p = ParamTensors::frozen(&g, &state.params);
    let mut warned = false;
    for s in test_set {
        let mut shape = vec![1usize];
        shape.extend_from_slice(s.image.shape());
        let x = g.constant(s.image.clone().into_shape_with_order(IxDyn(&shape)).unwrap());
        let logits = classifier_logits(&x, &p, state.architecture)?.value();
        let mut pred = 0usize;
        for j in 1..k {
            if logits[[0, j]].real() > logits[[0, pred]].real() {
                pred = j;
            }
        }
        if s.label >= k {
            if !warned {
                eprintln!(
                    "warning: test label {} outside the {} training classes; counted wrong",
                    s.label, k
                );
                warned = true;
            }
            continue; // no row to book it under; it can never be correct
        }
        cm[[s.label, pred]] += 1;
    }
    Ok(cm)
}

/// Top-1 accuracy over the test set.
pub fn evaluate_classifier<T: Scalar>(
    state: &ClassifierState<T>,
    test_set: &[LabeledImage<T>],
) -> Result<f64> {
    let cm = confusion_matrix(state, test_set)?;
    let correct: usize = (0..state.classes.len()).map(|i| cm[[i, i]]).sum();
    Ok(correct as f64 / test_set.len() as f64)
}

#[cfg(test)]
mod tests;
