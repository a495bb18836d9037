use super::*;
use crate::autodiff::Graph;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal))
}

fn tiny_cfg(res: usize) -> SynthesisConfig {
    SynthesisConfig {
        z_dim: 6,
        w_dim: 6,
        mapping_layers: 2,
        output_resolution: res,
        image_channels: 3,
        channel_map: [(4, 5), (8, 4), (16, 4), (32, 4)]
            .into_iter()
            .filter(|(r, _)| *r <= res)
            .collect(),
    }
}

// -------------------------------------------------------------------------
// ndarray-level oracles, written independently of the tape ops.

fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, bias: Option<&ArrayD<f64>>, pad: usize) -> ArrayD<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, i, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, i);
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;
    let mut y = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
    for b in 0..n {
        for oc in 0..o {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[[oc]]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = yy + ky;
                                let sx = xx + kx;
                                if sy < pad || sx < pad {
                                    continue;
                                }
                                let (sy, sx) = (sy - pad, sx - pad);
                                if sy >= h || sx >= wd {
                                    continue;
                                }
                                acc += x[[b, ic, sy, sx]] * w[[oc, ic, ky, kx]];
                            }
                        }
                    }
                    y[[b, oc, yy, xx]] = acc;
                }
            }
        }
    }
    y
}

/// Per-sample modulated (optionally demodulated) conv in plain loops.
fn naive_mod_conv(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: Option<&ArrayD<f64>>,
    style: &ArrayD<f64>,
    demod: bool,
    pad: usize,
) -> ArrayD<f64> {
    let n = x.shape()[0];
    let (o, i, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut parts = Vec::new();
    for b in 0..n {
        let mut wm = w.clone();
        for oc in 0..o {
            for ic in 0..i {
                for ky in 0..kh {
                    for kx in 0..kw {
                        wm[[oc, ic, ky, kx]] *= style[[b, ic]];
                    }
                }
            }
        }
        if demod {
            for oc in 0..o {
                let norm = (wm
                    .index_axis(ndarray::Axis(0), oc)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    + 1e-8)
                    .sqrt();
                wm.index_axis_mut(ndarray::Axis(0), oc)
                    .mapv_inplace(|v| v / norm);
            }
        }
        let xb = x
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(b..b + 1))
            .to_owned()
            .into_dyn();
        parts.push(naive_conv(&xb, &wm, bias, pad));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
}

fn lrelu_nd(a: &ArrayD<f64>, slope: f64) -> ArrayD<f64> {
    a.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

fn upsample_nd(a: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut y = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    y[[b, ch, yy, xx]] = a[[b, ch, yy / 2, xx / 2]];
                }
            }
        }
    }
    y
}

fn avgpool_nd(a: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut y = ArrayD::zeros(IxDyn(&[n, c, h / 2, w / 2]));
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h / 2 {
                for xx in 0..w / 2 {
                    y[[b, ch, yy, xx]] = 0.25
                        * (a[[b, ch, 2 * yy, 2 * xx]]
                            + a[[b, ch, 2 * yy, 2 * xx + 1]]
                            + a[[b, ch, 2 * yy + 1, 2 * xx]]
                            + a[[b, ch, 2 * yy + 1, 2 * xx + 1]]);
                }
            }
        }
    }
    y
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Oracle for map_latent: RMS-normalize rows, then two FC + leaky-ReLU.
fn mlp_oracle(z: &ArrayD<f64>, params: &ParamSet<f64>, cfg: &SynthesisConfig) -> ArrayD<f64> {
    let n = z.shape()[0];
    let mut x = z.clone();
    for r in 0..n {
        let row: Vec<f64> = (0..cfg.z_dim).map(|c| x[[r, c]]).collect();
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / cfg.z_dim as f64 + 1e-8).sqrt();
        for c in 0..cfg.z_dim {
            x[[r, c]] /= rms;
        }
    }
    for i in 0..cfg.mapping_layers {
        let w = params.get(&format!("map.fc{i}.weight")).unwrap();
        let b = params.get(&format!("map.fc{i}.bias")).unwrap();
        let in_d = w.shape()[1];
        let out_d = w.shape()[0];
        let mut y = ArrayD::zeros(IxDyn(&[n, out_d]));
        for r in 0..n {
            for o in 0..out_d {
                let mut acc = b[[o]];
                for c in 0..in_d {
                    acc += x[[r, c]] * w[[o, c]];
                }
                y[[r, o]] = if acc >= 0.0 { acc } else { LRELU_SLOPE * acc };
            }
        }
        x = y;
    }
    x
}

// -------------------------------------------------------------------------
// map_latent

#[test]
fn map_latent_zero_input_is_constant_across_rows() {
    let cfg = tiny_cfg(8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let z = g.constant(ArrayD::zeros(IxDyn(&[3, cfg.z_dim])));
    let w = map_latent(&z, &p, "map", &cfg).unwrap().value();
    for c in 0..cfg.w_dim {
        assert_eq!(w[[0, c]], w[[1, c]]);
        assert_eq!(w[[0, c]], w[[2, c]]);
    }
    let oracle = mlp_oracle(&ArrayD::zeros(IxDyn(&[3, cfg.z_dim])), &params, &cfg);
    assert!(max_abs_diff(&w, &oracle) < 1e-12);
}

#[test]
fn map_latent_is_deterministic_bitwise() {
    let cfg = tiny_cfg(8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    let z_arr = randn(&mut rng, &[4, cfg.z_dim]);
    let run = || {
        let g: Graph<f64> = Graph::new();
        let p = ParamTensors::frozen(&g, &params);
        let z = g.constant(z_arr.clone());
        map_latent(&z, &p, "map", &cfg).unwrap().value()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn map_latent_matches_mlp_oracle() {
    let cfg = tiny_cfg(8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    let z_arr = randn(&mut rng, &[5, cfg.z_dim]);
    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let z = g.constant(z_arr.clone());
    let w = map_latent(&z, &p, "map", &cfg).unwrap().value();
    let oracle = mlp_oracle(&z_arr, &params, &cfg);
    assert!(max_abs_diff(&w, &oracle) < 1e-6);
}

#[test]
fn map_latent_rejects_wrong_dimension() {
    let cfg = tiny_cfg(8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let z = g.constant(ArrayD::zeros(IxDyn(&[2, cfg.z_dim + 1])));
    assert!(map_latent(&z, &p, "map", &cfg).is_err());
}

// -------------------------------------------------------------------------
// modulated_conv

#[test]
fn modulated_conv_identity_modulation_is_plain_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 6, 6]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    let style = ArrayD::from_elem(IxDyn(&[2, 3]), 1.0);
    let g: Graph<f64> = Graph::new();
    let y = modulated_conv(
        &g.constant(x.clone()),
        &g.constant(w.clone()),
        Some(&g.constant(b.clone())),
        &g.constant(style),
        false,
        1,
    )
    .unwrap()
    .value();
    let oracle = naive_conv(&x, &w, Some(&b), 1);
    assert!(max_abs_diff(&y, &oracle) < 1e-10);
}

#[test]
fn modulated_conv_zero_input_gives_bias_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    let style = randn(&mut rng, &[2, 3]);
    let g: Graph<f64> = Graph::new();
    let y = modulated_conv(
        &g.constant(ArrayD::zeros(IxDyn(&[2, 3, 5, 5]))),
        &g.constant(w),
        Some(&g.constant(b.clone())),
        &g.constant(style),
        true,
        1,
    )
    .unwrap()
    .value();
    for bi in 0..2 {
        for oc in 0..4 {
            for yy in 0..5 {
                for xx in 0..5 {
                    assert_eq!(y[[bi, oc, yy, xx]], b[[oc]]);
                }
            }
        }
    }
}

#[test]
fn modulated_conv_matches_loop_oracle_with_demod() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[3, 4, 6, 6]);
    let w = randn(&mut rng, &[5, 4, 3, 3]);
    let b = randn(&mut rng, &[5]);
    let style = randn(&mut rng, &[3, 4]);
    let g: Graph<f64> = Graph::new();
    let y = modulated_conv(
        &g.constant(x.clone()),
        &g.constant(w.clone()),
        Some(&g.constant(b.clone())),
        &g.constant(style.clone()),
        true,
        1,
    )
    .unwrap()
    .value();
    let oracle = naive_mod_conv(&x, &w, Some(&b), &style, true, 1);
    assert!(max_abs_diff(&y, &oracle) < 1e-5);
}

#[test]
fn modulated_conv_rejects_nonfinite_style() {
    let g: Graph<f64> = Graph::new();
    let mut style = ArrayD::from_elem(IxDyn(&[1, 2]), 1.0);
    style[[0, 1]] = f64::NAN;
    let r = modulated_conv(
        &g.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4]))),
        &g.constant(ArrayD::zeros(IxDyn(&[2, 2, 3, 3]))),
        None,
        &g.constant(style),
        true,
        1,
    );
    assert!(r.is_err());
}

#[test]
fn demodulated_conv_invariant_to_positive_style_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let style = randn(&mut rng, &[2, 3]).mapv(|v: f64| v.abs() + 0.5);
    let run = |scale: f64| {
        let g: Graph<f64> = Graph::new();
        modulated_conv(
            &g.constant(x.clone()),
            &g.constant(w.clone()),
            None,
            &g.constant(style.mapv(|v| v * scale)),
            true,
            1,
        )
        .unwrap()
        .value()
    };
    let base = run(1.0);
    for scale in [0.1, 2.0, 37.5] {
        assert!(max_abs_diff(&base, &run(scale)) < 1e-6, "scale {scale}");
    }
}

// -------------------------------------------------------------------------
// synthesize

#[test]
fn synthesize_is_deterministic_bitwise() {
    let cfg = tiny_cfg(16);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    let noise = NoiseBundle::sample(&cfg, 2, &mut rng.clone());
    let w_arr = randn(&mut rng, &[2, cfg.w_dim]);
    let run = || {
        let g: Graph<f64> = Graph::new();
        let p = ParamTensors::frozen(&g, &params);
        let w = g.constant(w_arr.clone());
        synthesize(&w, &noise, &p, &cfg).unwrap().image.value()
    };
    let a = run();
    let b = run();
    assert_eq!(a.shape(), &[2, 3, 16, 16]);
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn synthesize_zero_torgb_gives_zero_image() {
    let cfg = tiny_cfg(8);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    for r in cfg.resolutions() {
        for suffix in ["weight", "bias"] {
            let name = format!("synth.b{r}.torgb.{suffix}");
            let arr = params.get_mut(&name).unwrap();
            arr.fill(0.0);
        }
    }
    let noise = NoiseBundle::sample(&cfg, 2, &mut rng.clone());
    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let w = g.constant(randn(&mut rng, &[2, cfg.w_dim]));
    let img = synthesize(&w, &noise, &p, &cfg).unwrap().image.value();
    assert!(img.iter().all(|v| *v == 0.0));
}

#[test]
fn synthesize_matches_composed_oracle_two_blocks() {
    let cfg = tiny_cfg(8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    let n = 2;
    let noise = NoiseBundle::sample(&cfg, n, &mut rng.clone());
    let w_arr = randn(&mut rng, &[n, cfg.w_dim]);

    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let w = g.constant(w_arr.clone());
    let out = synthesize(&w, &noise, &p, &cfg).unwrap();

    // straight-line oracle in plain ndarray
    let style = |prefix: &str| -> ArrayD<f64> {
        let aw = params.get(&format!("{prefix}.affine.weight")).unwrap();
        let ab = params.get(&format!("{prefix}.affine.bias")).unwrap();
        let in_c = aw.shape()[0];
        let mut s = ArrayD::zeros(IxDyn(&[n, in_c]));
        for b in 0..n {
            for c in 0..in_c {
                let mut acc = ab[[c]];
                for k in 0..cfg.w_dim {
                    acc += w_arr[[b, k]] * aw[[c, k]];
                }
                s[[b, c]] = acc;
            }
        }
        s
    };
    let conv_oracle = |x: &ArrayD<f64>, prefix: &str, noise_key: &str| -> ArrayD<f64> {
        let wgt = params.get(&format!("{prefix}.weight")).unwrap();
        let bias = params.get(&format!("{prefix}.bias")).unwrap();
        let ns = params.get(&format!("{prefix}.noise")).unwrap()[[0]];
        let y = naive_mod_conv(x, wgt, Some(bias), &style(prefix), true, 1);
        let nm = noise.get(noise_key);
        let mut z = y.clone();
        let (nn, c, h, wd) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
        for b in 0..nn {
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..wd {
                        z[[b, ch, yy, xx]] += ns * nm[[b, 0, yy, xx]];
                    }
                }
            }
        }
        lrelu_nd(&z, LRELU_SLOPE)
    };
    let torgb_oracle = |x: &ArrayD<f64>, prefix: &str| -> ArrayD<f64> {
        let wgt = params.get(&format!("{prefix}.weight")).unwrap();
        let bias = params.get(&format!("{prefix}.bias")).unwrap();
        naive_mod_conv(x, wgt, Some(bias), &style(prefix), false, 0)
    };

    let c4 = cfg.channels(4);
    let cst = params.get("synth.const").unwrap();
    let mut x4 = ArrayD::zeros(IxDyn(&[n, c4, 4, 4]));
    for b in 0..n {
        for ch in 0..c4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    x4[[b, ch, yy, xx]] = cst[[ch, yy, xx]];
                }
            }
        }
    }
    let x4 = conv_oracle(&x4, "synth.b4.conv1", "b4.conv1");
    let rgb4 = torgb_oracle(&x4, "synth.b4.torgb");
    let x8 = upsample_nd(&x4);
    let x8 = conv_oracle(&x8, "synth.b8.conv0", "b8.conv0");
    let x8 = conv_oracle(&x8, "synth.b8.conv1", "b8.conv1");
    let rgb8 = {
        let up = upsample_nd(&rgb4);
        let t = torgb_oracle(&x8, "synth.b8.torgb");
        &up + &t
    };

    assert!(max_abs_diff(&out.image.value(), &rgb8.into_dyn()) < 1e-5);
    assert!(max_abs_diff(&out.features[0].1.value(), &x4) < 1e-5);
    assert!(max_abs_diff(&out.features[1].1.value(), &x8) < 1e-5);
}

// -------------------------------------------------------------------------
// discriminate

#[test]
fn discriminate_zero_everything_returns_final_bias() {
    let cfg = tiny_cfg(8);
    let dcfg = DiscriminatorConfig::for_synthesis(&cfg, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params: ParamSet<f64> = init_discriminator(&dcfg, &mut rng);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        params.get_mut(&name).unwrap().fill(0.0);
    }
    params.get_mut("epilogue.fc1.bias").unwrap().fill(0.7);
    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let img = g.constant(ArrayD::zeros(IxDyn(&[3, 3, 8, 8])));
    let score = discriminate(&img, &p, &dcfg).unwrap().value();
    for s in score.iter() {
        assert!((s - 0.7).abs() < 1e-12);
    }
}

#[test]
fn discriminate_is_deterministic() {
    let cfg = tiny_cfg(16);
    let dcfg = DiscriminatorConfig::for_synthesis(&cfg, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params: ParamSet<f64> = init_discriminator(&dcfg, &mut rng);
    let img_arr = randn(&mut rng, &[2, 3, 16, 16]);
    let run = || {
        let g: Graph<f64> = Graph::new();
        let p = ParamTensors::frozen(&g, &params);
        discriminate(&g.constant(img_arr.clone()), &p, &dcfg)
            .unwrap()
            .value()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn discriminate_rejects_wrong_channel_count() {
    let cfg = tiny_cfg(8);
    let dcfg = DiscriminatorConfig::for_synthesis(&cfg, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params: ParamSet<f64> = init_discriminator(&dcfg, &mut rng);
    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let img = g.constant(ArrayD::zeros(IxDyn(&[1, 4, 8, 8])));
    assert!(discriminate(&img, &p, &dcfg).is_err());
}

#[test]
fn discriminate_matches_hand_oracle_single_block() {
    let cfg = tiny_cfg(8);
    let dcfg = DiscriminatorConfig::for_synthesis(&cfg, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params: ParamSet<f64> = init_discriminator(&dcfg, &mut rng);
    let img_arr = randn(&mut rng, &[3, 3, 8, 8]);

    let g: Graph<f64> = Graph::new();
    let p = ParamTensors::frozen(&g, &params);
    let score = discriminate(&g.constant(img_arr.clone()), &p, &dcfg)
        .unwrap()
        .value();

    let get = |name: &str| params.get(name).unwrap();
    let x = lrelu_nd(
        &naive_conv(&img_arr, get("frgb.weight"), Some(get("frgb.bias")), 0),
        LRELU_SLOPE,
    );
    let y = lrelu_nd(
        &naive_conv(&x, get("b8.conv0.weight"), Some(get("b8.conv0.bias")), 1),
        LRELU_SLOPE,
    );
    let y = avgpool_nd(&lrelu_nd(
        &naive_conv(&y, get("b8.conv1.weight"), Some(get("b8.conv1.bias")), 1),
        LRELU_SLOPE,
    ));
    let s = avgpool_nd(&naive_conv(&x, get("b8.skip.weight"), Some(get("b8.skip.bias")), 0));
    let x = (&y + &s).mapv(|v| v / 2.0_f64.sqrt());

    // minibatch stddev channel
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut sd_sum = 0.0;
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..wd {
                let mean: f64 = (0..n).map(|b| x[[b, ch, yy, xx]]).sum::<f64>() / n as f64;
                let var: f64 =
                    (0..n).map(|b| (x[[b, ch, yy, xx]] - mean).powi(2)).sum::<f64>() / n as f64;
                sd_sum += (var + 1e-8).sqrt();
            }
        }
    }
    let sd_avg = sd_sum / (c * h * wd) as f64;
    let mut xc = ArrayD::zeros(IxDyn(&[n, c + 1, h, wd]));
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..wd {
                    xc[[b, ch, yy, xx]] = x[[b, ch, yy, xx]];
                }
            }
        }
        for yy in 0..h {
            for xx in 0..wd {
                xc[[b, c, yy, xx]] = sd_avg;
            }
        }
    }
    let e = lrelu_nd(
        &naive_conv(&xc, get("epilogue.conv.weight"), Some(get("epilogue.conv.bias")), 1),
        LRELU_SLOPE,
    );
    let fc0w = get("epilogue.fc0.weight");
    let fc0b = get("epilogue.fc0.bias");
    let fc1w = get("epilogue.fc1.weight");
    let fc1b = get("epilogue.fc1.bias");
    let flat_len = e.shape()[1] * e.shape()[2] * e.shape()[3];
    for b in 0..n {
        let flat: Vec<f64> = e
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(b..b + 1))
            .iter()
            .cloned()
            .collect();
        let hid: Vec<f64> = (0..fc0w.shape()[0])
            .map(|o| {
                let mut acc = fc0b[[o]];
                for i in 0..flat_len {
                    acc += fc0w[[o, i]] * flat[i];
                }
                if acc >= 0.0 {
                    acc
                } else {
                    LRELU_SLOPE * acc
                }
            })
            .collect();
        let mut out = fc1b[[0]];
        for (i, hv) in hid.iter().enumerate() {
            out += fc1w[[0, i]] * hv;
        }
        assert!((score[[b]] - out).abs() < 1e-5, "sample {b}");
    }
}

// -------------------------------------------------------------------------
// losses

#[test]
fn constant_discriminator_gives_zero_adv_d_and_r1() {
    let g: Graph<f64> = Graph::new();
    let real = g.var(ArrayD::from_elem(IxDyn(&[4, 3, 8, 8]), 0.3));
    let c = 1.7;
    // D(x) = c, independent of x
    let score = real
        .sum_axes(&[1, 2, 3])
        .reshape(&[4])
        .scale(0.0)
        .add_scalar(c);
    let adv = adv_d_loss(LossKind::Wgan, &score, &score);
    assert_eq!(adv.item(), 0.0);
    let r1 = r1_penalty(&score, &real, 10.0);
    assert_eq!(r1.item(), 0.0);
}

#[test]
fn r1_linear_discriminator_matches_closed_form() {
    let g: Graph<f64> = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let n = 3;
    let (c, h, w) = (2, 4, 4);
    let real = g.var(randn(&mut rng, &[n, c, h, w]));
    let a = 0.8;
    let score = real.sum_axes(&[1, 2, 3]).reshape(&[n]).scale(a);
    let gamma = 10.0;
    let r1 = r1_penalty(&score, &real, gamma).item();
    let pixels = (c * h * w) as f64;
    let expected = 0.5 * gamma * a * a * pixels;
    assert!((r1 - expected).abs() < 1e-9, "r1 {r1} vs {expected}");
}

#[test]
fn path_length_gradient_matches_finite_differences() {
    let cfg = SynthesisConfig {
        z_dim: 4,
        w_dim: 4,
        mapping_layers: 2,
        output_resolution: 8,
        image_channels: 2,
        channel_map: [(4, 3), (8, 3)].into_iter().collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params: ParamSet<f64> = init_generator(&cfg, &mut rng);
    let n = 2;
    let noise = NoiseBundle::sample(&cfg, n, &mut rng.clone());
    let w_arr = randn(&mut rng, &[n, cfg.w_dim]);
    let pl_mean = 0.3;

    let eval = |ps: &ParamSet<f64>| -> f64 {
        let g: Graph<f64> = Graph::new();
        let p = ParamTensors::frozen(&g, ps);
        let w = g.constant(w_arr.clone());
        // w must be differentiable for the inner gradient
        let wv = g.var(w.value());
        let out = synthesize(&wv, &noise, &p, &cfg).unwrap();
        let mut prng = ChaCha8Rng::seed_from_u64(99);
        let (pl, _) = path_length_penalty(&out.image, &wv, pl_mean, &mut prng);
        let _ = w;
        pl.item()
    };

    // analytic gradient with respect to one conv weight
    let target = "synth.b8.conv0.weight";
    let analytic = {
        let g: Graph<f64> = Graph::new();
        let p = ParamTensors::trainable(&g, &params);
        let wv = g.var(w_arr.clone());
        let out = synthesize(&wv, &noise, &p, &cfg).unwrap();
        let mut prng = ChaCha8Rng::seed_from_u64(99);
        let (pl, _) = path_length_penalty(&out.image, &wv, pl_mean, &mut prng);
        grad(&pl, &[p.get(target)])[0].value()
    };

    let h = 1e-4;
    for &flat in &[0usize, 7, 20] {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.get_mut(target).unwrap().as_slice_mut().unwrap()[flat] += h;
        minus.get_mut(target).unwrap().as_slice_mut().unwrap()[flat] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = analytic.as_slice().unwrap()[flat];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        assert!(
            (fd - an).abs() / denom < 1e-3,
            "index {flat}: fd {fd} vs analytic {an}"
        );
    }
}

// -------------------------------------------------------------------------
// diff_augment

#[test]
fn diff_augment_p0_is_identity_bitwise() {
    let g: Graph<f64> = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let imgs = g.constant(randn(&mut rng, &[3, 3, 8, 8]));
    let out = diff_augment(&imgs, 0.0, &mut rng);
    let a = imgs.value();
    let b = out.value();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn diff_augment_flip_twice_is_identity() {
    let g: Graph<f64> = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let imgs = g.constant(randn(&mut rng, &[2, 3, 8, 8]));
    let ops = AugmentOps {
        flip: true,
        translate: false,
        brightness: false,
    };
    let once = diff_augment_ops(&imgs, 1.0, ops, &mut rng);
    let twice = diff_augment_ops(&once, 1.0, ops, &mut rng);
    assert!(max_abs_diff(&imgs.value(), &twice.value()) == 0.0);
}

#[test]
fn diff_augment_brightness_gradient_is_one_per_pixel() {
    let g: Graph<f64> = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let imgs = g.var(randn(&mut rng, &[2, 1, 4, 4]));
    let ops = AugmentOps {
        flip: false,
        translate: false,
        brightness: true,
    };
    let out = diff_augment_ops(&imgs, 1.0, ops, &mut rng);
    let gr = grad(&out.sum(), &[&imgs])[0].value();
    assert!(gr.iter().all(|v| (*v - 1.0).abs() < 1e-12));
}

#[test]
fn diff_augment_keeps_shape_and_finiteness() {
    let g: Graph<f64> = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let imgs = g.constant(randn(&mut rng, &[4, 3, 16, 16]));
    for p in [0.25, 0.5, 1.0] {
        let out = diff_augment(&imgs, p, &mut rng);
        assert_eq!(out.shape(), vec![4, 3, 16, 16]);
        assert!(out.is_finite());
    }
}

// -------------------------------------------------------------------------
// train_backbone

fn tiny_train_cfg(steps: usize, batch: usize) -> BackboneTrainConfig {
    BackboneTrainConfig {
        steps,
        batch,
        seed: 0,
        ..Default::default()
    }
}

fn synthetic_images(n: usize, res: usize, seed: u64) -> Vec<ArrayD<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| randn(&mut rng, &[3, res, res]).mapv(|v| (v * 0.3).clamp(-1.0, 1.0)))
        .collect()
}

#[test]
fn train_backbone_zero_steps_returns_initialization() {
    let cfg = tiny_cfg(8);
    let data = synthetic_images(8, 8, 30);
    let tcfg = tiny_train_cfg(0, 2);
    let res = train_backbone(&data, &cfg, &tcfg).unwrap();
    let g0: ParamSet<f64> = init_generator(&cfg, &mut crate::seeds::stream(tcfg.seed, "g_init"));
    let dcfg = DiscriminatorConfig::for_synthesis(&cfg, 3, 1);
    let d0: ParamSet<f64> = init_discriminator(&dcfg, &mut crate::seeds::stream(tcfg.seed, "d_init"));
    assert!(res.generator.bitwise_eq(&g0));
    assert!(res.discriminator.bitwise_eq(&d0));
    assert_eq!(res.step, 0);
}

#[test]
fn train_backbone_rejects_empty_dataset() {
    let cfg = tiny_cfg(8);
    let tcfg = tiny_train_cfg(1, 2);
    assert!(train_backbone::<f64>(&[], &cfg, &tcfg).is_err());
}

#[test]
fn train_backbone_smoke_stays_finite() {
    let cfg = SynthesisConfig {
        z_dim: 64,
        w_dim: 64,
        mapping_layers: 2,
        output_resolution: 32,
        image_channels: 3,
        channel_map: [(4, 32), (8, 32), (16, 16), (32, 8)].into_iter().collect(),
    };
    let data = synthetic_images(64, 32, 31);
    let tcfg = tiny_train_cfg(200, 4);
    let res = train_backbone(&data, &cfg, &tcfg).unwrap();
    assert!(res.generator.all_finite());
    assert!(res.discriminator.all_finite());
    assert_eq!(res.log.len(), 200);
    for e in &res.log {
        assert!(e.adv_d.is_finite() && e.adv_g.is_finite());
        assert!(e.r1.map_or(true, f64::is_finite));
        assert!(e.path_length.map_or(true, f64::is_finite));
        assert!((0.0..=1.0).contains(&e.augment_p));
    }
}

#[test]
fn train_backbone_is_bitwise_deterministic() {
    let cfg = tiny_cfg(8);
    let data = synthetic_images(6, 8, 32);
    let tcfg = tiny_train_cfg(3, 2);
    let a = train_backbone::<f64>(&data, &cfg, &tcfg).unwrap();
    let b = train_backbone::<f64>(&data, &cfg, &tcfg).unwrap();
    assert!(a.generator.bitwise_eq(&b.generator));
    assert!(a.discriminator.bitwise_eq(&b.discriminator));
}

#[test]
fn paper_scale_generator_parameter_count() {
    let cfg = SynthesisConfig::paper();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g: ParamSet<f32> = init_generator(&cfg, &mut rng);
    let count = g.num_scalars() as f64;
    let target = 23.2e6;
    assert!(
        (count - target).abs() / target < 0.2,
        "generator has {count} params, target {target} +/- 20%"
    );
}
