//! Command-line pipeline: synthetic data, two-stage training,
//! generation, metrics, interpolation grids, and the classification
//! benchmark.

use clap::{Parser, Subcommand, ValueEnum};
use defectgen::backbone::{
    self, train_backbone_resume, BackboneResumeState, NoiseBundle, SynthesisConfig,
};
use defectgen::checkpoint::{self, Checkpoint};
use defectgen::config::{effective_seed, RunConfig};
use defectgen::data::{self, DatasetSpec, Split};
use defectgen::defect::{
    generate_defect_image, train_defect_stage, DefectGenConfig, DefectSample, GeneratorStates,
    InterpMode,
};
use defectgen::downstream::{
    build_augmented_trainset, evaluate_classifier, train_classifier, LabeledImage,
};
use defectgen::eval::{
    clustered_lpips, extract_features, extractor_by_id, kid, welch_t_test, MetricReport,
};
use defectgen::{seeds, Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "defectgen",
    about = "Two-stage defect image generation: style-based backbone plus defect-aware residual blocks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliInterpMode {
    Both,
    DefectOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic defect dataset in MVTec layout.
    MakeData {
        /// Dataset spec JSON (category, counts, resolution, seed).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the style-based backbone on defect-free images.
    TrainBackbone {
        /// Dataset root containing <category>/train/good.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        category: String,
        /// Run config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing backbone checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 2: freeze the backbone and train defect-aware blocks.
    TrainDefect {
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        category: String,
        /// Defect category under <category>/test.
        #[arg(long)]
        defect: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Few-shot subset size (e.g. 5 or 1).
        #[arg(long)]
        subset_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample images (and, with --triplets, masks and defect-free pairs).
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write image + mask + defect-free PNGs per sample plus index.json.
        #[arg(long)]
        triplets: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute KID and clustered perceptual distance between two image dirs.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        extractor: Option<String>,
        /// Write the JSON report here (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit an interpolation grid PNG (rows = paths, columns = steps).
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: CliInterpMode,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Partition real defects, train classifiers on generated data, report accuracy.
    ClassifyBenchmark {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        category: String,
        /// JSON object mapping defect category -> stage-2 checkpoint dir.
        #[arg(long)]
        ckpts: PathBuf,
        #[arg(long, default_value_t = 3)]
        partitions: usize,
        #[arg(long)]
        report: PathBuf,
        /// Generated images per category for the augmented training set.
        #[arg(long, default_value_t = 200)]
        n_per_category: usize,
        /// Earlier benchmark report to Welch-test against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synthesis_from_ckpt(ckpt: &Checkpoint<f32>) -> Result<SynthesisConfig> {
    let cfg: SynthesisConfig = serde_json::from_value(ckpt.config["synthesis"].clone())
        .map_err(|e| Error::data(format!("checkpoint lacks a synthesis config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn defect_from_ckpt(ckpt: &Checkpoint<f32>, cfg: &SynthesisConfig) -> Result<DefectGenConfig> {
    let g: DefectGenConfig = serde_json::from_value(ckpt.config["defect"].clone())
        .map_err(|e| Error::data(format!("checkpoint lacks a defect config: {e}")))?;
    g.validate(cfg)?;
    Ok(g)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData { spec, out } => cmd_make_data(&spec, &out),
        Command::TrainBackbone {
            data,
            category,
            config,
            out,
            resume,
            seed,
            steps,
        } => cmd_train_backbone(&data, &category, &config, &out, &resume, seed, steps),
        Command::TrainDefect {
            backbone,
            data,
            category,
            defect,
            config,
            out,
            subset_k,
            seed,
            steps,
        } => cmd_train_defect(
            &backbone, &data, &category, &defect, &config, &out, subset_k, seed, steps,
        ),
        Command::Generate {
            ckpt,
            n,
            out,
            triplets,
            seed,
        } => cmd_generate(&ckpt, n, &out, triplets, seed),
        Command::Evaluate {
            generated,
            real,
            extractor,
            report,
            config,
            seed,
        } => cmd_evaluate(&generated, &real, &extractor, &report, &config, seed),
        Command::Interpolate {
            ckpt,
            mode,
            steps,
            rows,
            out,
            seed,
        } => cmd_interpolate(&ckpt, mode, steps, rows, &out, seed),
        Command::ClassifyBenchmark {
            data,
            category,
            ckpts,
            partitions,
            report,
            n_per_category,
            compare,
            config,
            seed,
        } => cmd_classify_benchmark(
            &data,
            &category,
            &ckpts,
            partitions,
            &report,
            n_per_category,
            &compare,
            &config,
            seed,
        ),
    }
}

// ---------------------------------------------------------------------------
// make-data

fn cmd_make_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: DatasetSpec = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid spec {}: {e}", spec_path.display())))?;
    data::generate_synthetic(&spec, out)?;
    let n_defect: usize = spec.defects.iter().map(|d| d.n_defect).sum();
    println!(
        "wrote dataset '{}' to {}: {} good, {} defect images across {} categories at {}x{}",
        spec.category,
        out.display(),
        spec.n_good,
        n_defect,
        spec.defects.len(),
        spec.resolution,
        spec.resolution
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-backbone

#[allow(clippy::too_many_arguments)]
fn cmd_train_backbone(
    data_dir: &Path,
    category: &str,
    config: &Option<PathBuf>,
    out: &Path,
    resume: &Option<PathBuf>,
    seed_flag: Option<u64>,
    steps: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = effective_seed(seed_flag, cfg.seed)?;
    let mut tcfg = cfg.backbone_train(seed);
    if let Some(s) = steps {
        tcfg.steps = s;
    }
    let samples = data::load_dataset::<f32>(
        data_dir,
        category,
        Split::Train,
        None,
        cfg.model.output_resolution,
        None,
        seed,
    )?;
    let images: Vec<ArrayD<f32>> = samples.into_iter().map(|s| s.image).collect();
    let resume_state = match resume {
        Some(p) => {
            let prev: Checkpoint<f32> = checkpoint::load(p)?;
            let generator = prev.params.strip_prefix("g.");
            let discriminator = prev.params.strip_prefix("d.");
            if generator.is_empty() || discriminator.is_empty() {
                return Err(Error::data(format!(
                    "{} is not a backbone checkpoint",
                    p.display()
                )));
            }
            Some(BackboneResumeState {
                generator,
                discriminator,
                pl_mean: prev.config["pl_mean"].as_f64().unwrap_or(0.0),
                step: prev.step,
            })
        }
        None => None,
    };
    println!(
        "training backbone on {} images for {} steps (seed {seed})",
        images.len(),
        tcfg.steps
    );
    let result = train_backbone_resume(&images, &cfg.model, &tcfg, resume_state)?;
    let mut params = defectgen::nn::ParamSet::new();
    params.extend_prefixed("g.", &result.generator);
    params.extend_prefixed("d.", &result.discriminator);
    let ckpt_config = serde_json::json!({
        "synthesis": cfg.model,
        "stage": 1,
        "loss": tcfg.loss,
        "seed": seed,
        "pl_mean": result.pl_mean,
        "run_config": cfg.to_json(),
    });
    let ckpt = Checkpoint::new(params, ckpt_config, result.step);
    checkpoint::save(out, &ckpt)?;
    write_json(
        &out.join("train_log.json"),
        &serde_json::json!({"entries": result.log, "seed": seed, "config": cfg.to_json()}),
    )?;
    println!("saved backbone checkpoint at step {} to {}", result.step, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-defect

#[allow(clippy::too_many_arguments)]
fn cmd_train_defect(
    backbone_path: &Path,
    data_dir: &Path,
    category: &str,
    defect: &str,
    config: &Option<PathBuf>,
    out: &Path,
    subset_k: Option<usize>,
    seed_flag: Option<u64>,
    steps: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = effective_seed(seed_flag, cfg.seed)?;
    let backbone_ckpt: Checkpoint<f32> = checkpoint::load(backbone_path)?;
    let synth = synthesis_from_ckpt(&backbone_ckpt)?;
    let mut tcfg = cfg.defect_train(seed);
    if let Some(s) = steps {
        tcfg.steps = s;
    }
    tcfg.gen = DefectGenConfig {
        attach_start: cfg
            .defect
            .attach_start
            .unwrap_or(synth.output_resolution / 4),
        ..cfg.defect_gen()
    };
    let samples = data::load_dataset::<f32>(
        data_dir,
        category,
        Split::Test,
        Some(defect),
        synth.output_resolution,
        subset_k,
        seed,
    )?;
    let defect_samples: Vec<DefectSample<f32>> = samples
        .into_iter()
        .map(|s| {
            Ok(DefectSample {
                image: s.image,
                mask: s
                    .mask
                    .ok_or_else(|| Error::data("defect sample without mask"))?,
            })
        })
        .collect::<Result<_>>()?;
    println!(
        "training stage 2 on {} defect samples for {} steps (seed {seed})",
        defect_samples.len(),
        tcfg.steps
    );
    let result = train_defect_stage(&backbone_ckpt, &defect_samples, &synth, &tcfg)?;
    let mut ckpt = result.checkpoint;
    ckpt.config["run_config"] = cfg.to_json();
    ckpt.config["defect_category"] = serde_json::json!(defect);
    checkpoint::save(out, &ckpt)?;
    write_json(
        &out.join("train_log.json"),
        &serde_json::json!({"entries": result.log, "seed": seed, "config": cfg.to_json()}),
    )?;
    println!("saved stage-2 checkpoint to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn sample_z(cfg: &SynthesisConfig, rng: &mut rand_chacha::ChaCha8Rng) -> ArrayD<f32> {
    ArrayD::from_shape_simple_fn(IxDyn(&[1, cfg.z_dim]), || {
        rng.sample::<f64, _>(StandardNormal) as f32
    })
}

fn squeeze_batch(a: &ArrayD<f32>) -> ArrayD<f32> {
    let shape: Vec<usize> = a.shape()[1..].to_vec();
    a.clone().into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn cmd_generate(ckpt_path: &Path, n: usize, out: &Path, triplets: bool, seed_flag: Option<u64>) -> Result<()> {
    let ckpt: Checkpoint<f32> = checkpoint::load(ckpt_path)?;
    let seed = effective_seed(seed_flag, ckpt.config["seed"].as_u64().unwrap_or(0))?;
    let synth = synthesis_from_ckpt(&ckpt)?;
    let stage2 = ckpt.params.iter().any(|(k, _)| k.starts_with("defect_map."));
    if triplets && !stage2 {
        return Err(Error::data(
            "--triplets needs a stage-2 checkpoint; this one has no defect-aware blocks",
        ));
    }
    let states = if stage2 {
        GeneratorStates::from_checkpoint(&ckpt)?
    } else {
        let backbone = ckpt.params.strip_prefix("g.");
        if backbone.is_empty() {
            return Err(Error::data("checkpoint has no backbone (g.*) arrays"));
        }
        GeneratorStates {
            backbone,
            adaptation: defectgen::nn::ParamSet::new(),
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = seeds::stream(seed, "cli.generate");
    let mut index = Vec::new();
    for i in 0..n {
        let z_obj = sample_z(&synth, &mut rng);
        if stage2 {
            let gcfg = defect_from_ckpt(&ckpt, &synth)?;
            let z_def = sample_z(&synth, &mut rng);
            let mut noise = NoiseBundle::new();
            noise.sample_prefixed(&synth, 1, "", &mut rng);
            noise.sample_prefixed(&synth, 1, "defect.", &mut rng);
            let t = generate_defect_image(&states, &synth, &gcfg, &z_obj, &z_def, &noise)?;
            let image_name = format!("{i:04}.png");
            data::save_image(&out.join(&image_name), &squeeze_batch(&t.image))?;
            if triplets {
                let mask_name = format!("{i:04}_mask.png");
                let clean_name = format!("{i:04}_clean.png");
                data::save_mask(&out.join(&mask_name), &squeeze_batch(&t.mask))?;
                data::save_image(&out.join(&clean_name), &squeeze_batch(&t.clean))?;
                index.push(serde_json::json!({
                    "image": image_name, "mask": mask_name, "clean": clean_name,
                }));
            } else {
                index.push(serde_json::json!({"image": image_name}));
            }
        } else {
            let g: defectgen::Graph32 = defectgen::autodiff::Graph::new();
            let p = defectgen::nn::ParamTensors::frozen(&g, &states.backbone);
            let w = backbone::map_latent(&g.constant(z_obj), &p, "map", &synth)?;
            let noise = NoiseBundle::sample(&synth, 1, &mut rng);
            let img = backbone::synthesize(&w, &noise, &p, &synth)?.image.value();
            let image_name = format!("{i:04}.png");
            data::save_image(&out.join(&image_name), &squeeze_batch(&img))?;
            index.push(serde_json::json!({"image": image_name}));
        }
    }
    write_json(
        &out.join("index.json"),
        &serde_json::json!({
            "samples": index,
            "seed": seed,
            "triplets": triplets,
            "checkpoint_config": ckpt.config,
        }),
    )?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn load_dir_images(dir: &Path, resolution: Option<usize>) -> Result<Vec<ArrayD<f64>>> {
    let paths = data::sorted_pngs(dir)?;
    if paths.is_empty() {
        return Err(Error::data(format!("no PNG images in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = data::load_image::<f64>(&p)?;
        out.push(match resolution {
            Some(r) => data::resize_bilinear(&img, r),
            None => img,
        });
    }
    Ok(out)
}

fn cmd_evaluate(
    gen_dir: &Path,
    real_dir: &Path,
    extractor_id: &Option<String>,
    report: &Option<PathBuf>,
    config: &Option<PathBuf>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = effective_seed(seed_flag, cfg.seed)?;
    let gen_images = load_dir_images(gen_dir, None)?;
    let resolution = gen_images[0].shape()[1];
    let real_images = load_dir_images(real_dir, Some(resolution))?;
    let id = extractor_id.as_deref().unwrap_or(&cfg.eval.extractor);
    let extractor = extractor_by_id(id, seed)?;
    let fx = extract_features(&gen_images, &extractor)?;
    let fy = extract_features(&real_images, &extractor)?;
    let (kid_v, kid_std) = kid(&fx, &fy, cfg.eval.n_subsets, cfg.eval.subset_size, seed)?;
    let (cl, n_used) = clustered_lpips(&gen_images, &real_images, &extractor)?;
    let rep = MetricReport {
        kid: kid_v,
        kid_std,
        clustered_lpips: cl,
        n_clusters_used: n_used,
        mask_area_stats: None,
        metadata: serde_json::json!({
            "extractor_id": extractor.id(),
            "seed": seed,
            "n_subsets": cfg.eval.n_subsets,
            "subset_size": cfg.eval.subset_size,
            "generated_dir": gen_dir.display().to_string(),
            "real_dir": real_dir.display().to_string(),
            "n_generated": gen_images.len(),
            "n_real": real_images.len(),
        }),
    };
    let mut json = serde_json::to_value(&rep)?;
    json["kid_x1000"] = serde_json::json!(kid_v * 1000.0);
    match report {
        Some(p) => {
            write_json(p, &json)?;
            println!("wrote metric report to {}", p.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&json)?),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// interpolate

fn cmd_interpolate(
    ckpt_path: &Path,
    mode: CliInterpMode,
    steps: usize,
    rows: usize,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<()> {
    if steps < 2 {
        return Err(Error::config("interpolation needs at least 2 steps"));
    }
    if rows == 0 {
        return Err(Error::config("interpolation needs at least 1 row"));
    }
    let ckpt: Checkpoint<f32> = checkpoint::load(ckpt_path)?;
    let seed = effective_seed(seed_flag, ckpt.config["seed"].as_u64().unwrap_or(0))?;
    let synth = synthesis_from_ckpt(&ckpt)?;
    let gcfg = defect_from_ckpt(&ckpt, &synth)?;
    let states = GeneratorStates::from_checkpoint(&ckpt)?;
    if states.adaptation.is_empty() {
        return Err(Error::data("interpolation needs a stage-2 checkpoint"));
    }
    let imode = match mode {
        CliInterpMode::Both => InterpMode::Both,
        CliInterpMode::DefectOnly => InterpMode::DefectOnly,
    };
    let r = synth.output_resolution;
    let mut grid = ArrayD::from_elem(IxDyn(&[3, rows * r, steps * r]), -1.0f32);
    let mut rng = seeds::stream(seed, "cli.interpolate");
    for row in 0..rows {
        let z_o0 = sample_z(&synth, &mut rng);
        let z_o1 = sample_z(&synth, &mut rng);
        let z_d0 = sample_z(&synth, &mut rng);
        let z_d1 = sample_z(&synth, &mut rng);
        let mut noise = NoiseBundle::new();
        noise.sample_prefixed(&synth, 1, "", &mut rng);
        noise.sample_prefixed(&synth, 1, "defect.", &mut rng);
        let path = defectgen::defect::interpolate(
            &states,
            &synth,
            &gcfg,
            (&z_o0, &z_o1),
            (&z_d0, &z_d1),
            steps,
            imode,
            &noise,
        )?;
        for (col, t) in path.iter().enumerate() {
            for c in 0..3 {
                for y in 0..r {
                    for x in 0..r {
                        grid[[c, row * r + y, col * r + x]] = t.image[[0, c, y, x]];
                    }
                }
            }
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    data::save_image(out, &grid)?;
    println!(
        "wrote {}x{} interpolation grid ({} rows x {} steps) to {}",
        steps * r,
        rows * r,
        rows,
        steps,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// classify-benchmark

#[allow(clippy::too_many_arguments)]
fn cmd_classify_benchmark(
    data_dir: &Path,
    category: &str,
    ckpts_path: &Path,
    partitions: usize,
    report_path: &Path,
    n_per_category: usize,
    compare: &Option<PathBuf>,
    config: &Option<PathBuf>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = effective_seed(seed_flag, cfg.seed)?;
    let text = std::fs::read_to_string(ckpts_path).map_err(|e| Error::io(ckpts_path, e))?;
    let ckpt_paths: BTreeMap<String, PathBuf> = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid checkpoint map: {e}")))?;
    if ckpt_paths.len() < 2 {
        return Err(Error::data(
            "classification benchmark needs at least 2 defect categories",
        ));
    }
    let mut ckpts: Vec<(String, Checkpoint<f32>)> = Vec::new();
    for (name, p) in &ckpt_paths {
        ckpts.push((name.clone(), checkpoint::load(p)?));
    }
    let classes: Vec<String> = ckpts.iter().map(|(n, _)| n.clone()).collect();
    let synth = synthesis_from_ckpt(&ckpts[0].1)?;
    let resolution = synth.output_resolution;

    // real samples per defect category
    let mut per_category: Vec<(String, Vec<data::Sample<f32>>)> = Vec::new();
    for name in &classes {
        let samples = data::load_dataset::<f32>(
            data_dir,
            category,
            Split::Test,
            Some(name),
            resolution,
            None,
            seed,
        )?;
        per_category.push((name.clone(), samples));
    }

    let label_of = |s: &data::Sample<f32>| -> usize {
        classes.iter().position(|c| c == &s.label).unwrap_or(classes.len())
    };

    let mut partition_reports = Vec::new();
    let mut augmented_accs = Vec::new();
    let mut baseline_accs = Vec::new();
    for p in 1..=partitions {
        let part_seed = seed + p as u64;
        let (base, test) =
            data::partition_for_classification(&per_category, part_seed)?;
        let test_set: Vec<LabeledImage<f32>> = test
            .iter()
            .map(|s| LabeledImage {
                image: s.image.clone(),
                label: label_of(s),
            })
            .collect();
        if test_set.is_empty() {
            return Err(Error::data(
                "partition left an empty test set; need more real defect images",
            ));
        }

        // classifier trained on generated images only
        let (aug_set, aug_classes) =
            build_augmented_trainset(&ckpts, n_per_category, part_seed)?;
        let ccfg = defectgen::downstream::ClassifierConfig {
            seed: part_seed,
            ..cfg.classify.clone()
        };
        let (aug_state, _) = train_classifier(&aug_set, &aug_classes, &ccfg)?;
        let aug_acc = evaluate_classifier(&aug_state, &test_set)?;

        // baseline trained on the small real base sets
        let base_set: Vec<LabeledImage<f32>> = base
            .iter()
            .flat_map(|(_, samples)| samples.iter())
            .map(|s| LabeledImage {
                image: s.image.clone(),
                label: label_of(s),
            })
            .collect();
        let (base_state, _) = train_classifier(&base_set, &classes, &ccfg)?;
        let base_acc = evaluate_classifier(&base_state, &test_set)?;

        println!(
            "partition {p}: augmented accuracy {aug_acc:.4}, baseline accuracy {base_acc:.4} ({} test images)",
            test_set.len()
        );
        augmented_accs.push(aug_acc);
        baseline_accs.push(base_acc);
        partition_reports.push(serde_json::json!({
            "partition_seed": part_seed,
            "accuracy": aug_acc,
            "baseline_accuracy": base_acc,
            "n_test": test_set.len(),
        }));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut report = serde_json::json!({
        "category": category,
        "classes": classes,
        "partitions": partition_reports,
        "accuracies": augmented_accs,
        "mean_accuracy": mean(&augmented_accs),
        "mean_baseline_accuracy": mean(&baseline_accs),
        "n_per_category": n_per_category,
        "seed": seed,
        "config": cfg.to_json(),
    });
    if let Some(cmp_path) = compare {
        let cmp_text =
            std::fs::read_to_string(cmp_path).map_err(|e| Error::io(cmp_path, e))?;
        let cmp: serde_json::Value = serde_json::from_str(&cmp_text)
            .map_err(|e| Error::data(format!("invalid comparison report: {e}")))?;
        let other: Vec<f64> = cmp["accuracies"]
            .as_array()
            .ok_or_else(|| Error::data("comparison report lacks 'accuracies'"))?
            .iter()
            .filter_map(|v| v.as_f64())
            .collect();
        let (t, df, pv) = welch_t_test(&augmented_accs, &other)?;
        report["welch"] = serde_json::json!({"t": t, "df": df, "p": pv});
    }
    write_json(report_path, &report)?;
    println!("wrote benchmark report to {}", report_path.display());
    Ok(())
}
