//! Quantitative metrics: unbiased KID, clustered perceptual distance,
//! Welch's t-test, and mask-area statistics.
//!
//! Trained feature networks are replaced by a deterministic seeded
//! random-weight convolutional extractor so the metric math stays
//! self-contained and testable; the embedding interface also accepts
//! externally computed feature matrices.

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::seeds;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// n x d feature matrix plus the id of the extractor that produced it.
#[derive(Clone, Debug)]
pub struct FeatureEmbedding {
    pub vectors: Array2<f64>,
    pub extractor_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskAreaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub fractions: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub kid: f64,
    pub kid_std: f64,
    pub clustered_lpips: f64,
    pub n_clusters_used: usize,
    pub mask_area_stats: Option<MaskAreaStats>,
    pub metadata: serde_json::Value,
}

// ---------------------------------------------------------------------------
// random-feature extractor

/// Fixed seeded 3-layer strided conv net (stride 2, 3x3, leaky ReLU)
/// with global average pooling to a 64-dim embedding. Training-free and
/// deterministic per seed.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    pub seed: u64,
    channels: Vec<usize>,
    weights: Vec<ArrayD<f64>>,
    biases: Vec<Vec<f64>>,
}

pub const DEFAULT_EXTRACTOR_ID: &str = "random-conv-64";

impl RandomConvExtractor {
    pub fn new(seed: u64) -> RandomConvExtractor {
        let channels = vec![3usize, 16, 32, 64];
        let mut rng = seeds::stream(seed, "eval.extractor");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..3 {
            let (ci, co) = (channels[l], channels[l + 1]);
            let scale = 1.0 / ((ci * 9) as f64).sqrt();
            weights.push(ArrayD::from_shape_simple_fn(IxDyn(&[co, ci, 3, 3]), || {
                rng.sample::<f64, _>(StandardNormal) * scale
            }));
            biases.push((0..co).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect());
        }
        RandomConvExtractor {
            seed,
            channels,
            weights,
            biases,
        }
    }

    pub fn id(&self) -> String {
        format!("{DEFAULT_EXTRACTOR_ID}-seed{}", self.seed)
    }

    pub fn dim(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Post-activation feature maps of all three layers for one image.
    pub fn layer_features<T: Scalar>(&self, image: &ArrayD<T>) -> Result<Vec<ArrayD<f64>>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::config(format!("expected [3,H,W] image, got {s:?}")));
        }
        let mut x = image.mapv(|v| v.real());
        let mut out = Vec::new();
        for l in 0..3 {
            x = conv_stride2_lrelu(&x, &self.weights[l], &self.biases[l]);
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Global-average-pooled embedding of the final layer.
    pub fn embed<T: Scalar>(&self, image: &ArrayD<T>) -> Result<Vec<f64>> {
        let layers = self.layer_features(image)?;
        let last = layers.last().unwrap();
        let s = last.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut v = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += last[[ci, y, x]];
                }
            }
            v[ci] = acc / (h * w) as f64;
        }
        Ok(v)
    }
}

/// Plain stride-2 pad-1 3x3 convolution followed by leaky ReLU (0.2).
fn conv_stride2_lrelu(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &[f64]) -> ArrayD<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[0];
    let oh = h.div_ceil(2);
    let ow = wd.div_ceil(2);
    let mut out = ArrayD::zeros(IxDyn(&[co, oh, ow]));
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x[[c, iy as usize, ix as usize]] * w[[o, c, ky, kx]];
                            }
                        }
                    }
                }
                out[[o, oy, ox]] = if acc >= 0.0 { acc } else { 0.2 * acc };
            }
        }
    }
    out
}

/// Resolve an extractor id. Only the built-in random-conv extractor is
/// known; unknown ids are a config error.
pub fn extractor_by_id(id: &str, seed: u64) -> Result<RandomConvExtractor> {
    if id == DEFAULT_EXTRACTOR_ID || id.starts_with(DEFAULT_EXTRACTOR_ID) {
        Ok(RandomConvExtractor::new(seed))
    } else {
        Err(Error::config(format!("unknown extractor id '{id}'")))
    }
}

/// Embed every image into a row of the feature matrix.
pub fn extract_features<T: Scalar>(
    images: &[ArrayD<T>],
    extractor: &RandomConvExtractor,
) -> Result<FeatureEmbedding> {
    let d = extractor.dim();
    let mut vectors = Array2::zeros((images.len(), d));
    for (i, img) in images.iter().enumerate() {
        let v = extractor.embed(img)?;
        for (j, x) in v.into_iter().enumerate() {
            vectors[[i, j]] = x;
        }
    }
    Ok(FeatureEmbedding {
        vectors,
        extractor_id: extractor.id(),
    })
}

// ---------------------------------------------------------------------------
// KID

fn poly_kernel(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    let d = x.len() as f64;
    (x.dot(&y) / d + 1.0).powi(3)
}

/// Unbiased MMD^2 with the degree-3 polynomial kernel over full sets.
pub fn kid_once(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let (m, n) = (x.nrows(), y.nrows());
    if m < 2 || n < 2 {
        return Err(Error::data(format!(
            "KID needs at least 2 samples per set, got {m} and {n}"
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::config(format!(
            "feature dims differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += poly_kernel(x.row(i), x.row(j));
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += poly_kernel(y.row(i), y.row(j));
            }
        }
    }
    // the cross sum is accumulated in sorted order so the result is
    // bitwise identical under argument swap
    let mut cross = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            cross.push(poly_kernel(x.row(i), y.row(j)));
        }
    }
    cross.sort_by(f64::total_cmp);
    let kxy: f64 = cross.iter().sum();
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64
        - 2.0 * kxy / (m * n) as f64)
}

fn subset_rows(src: &Array2<f64>, size: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let n = src.nrows();
    if size >= n {
        return src.clone();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut out = Array2::zeros((size, src.ncols()));
    for (r, &i) in idx[..size].iter().enumerate() {
        out.row_mut(r).assign(&src.row(i));
    }
    out
}

/// Subset-averaged unbiased KID: mean and population std over
/// `n_subsets` random subsets of `subset_size` (default
/// min(|X|,|Y|,1000)). Subset index streams depend only on the seed,
/// subset number, and set size, so swapping X and Y leaves the result
/// unchanged.
pub fn kid(
    x: &FeatureEmbedding,
    y: &FeatureEmbedding,
    n_subsets: usize,
    subset_size: Option<usize>,
    seed: u64,
) -> Result<(f64, f64)> {
    let size = subset_size.unwrap_or_else(|| x.vectors.nrows().min(y.vectors.nrows()).min(1000));
    if n_subsets == 0 {
        return Err(Error::config("n_subsets must be >= 1"));
    }
    let mut vals = Vec::with_capacity(n_subsets);
    for s in 0..n_subsets {
        let mut rx = seeds::stream(seed, &format!("kid.subset.{s}.{}", x.vectors.nrows()));
        let mut ry = seeds::stream(seed, &format!("kid.subset.{s}.{}", y.vectors.nrows()));
        let xs = subset_rows(&x.vectors, size, &mut rx);
        let ys = subset_rows(&y.vectors, size, &mut ry);
        vals.push(kid_once(&xs, &ys)?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// perceptual distance

const NORM_EPS: f64 = 1e-10;

fn channel_normalize(f: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = f.clone();
    for y in 0..h {
        for x in 0..w {
            let mut norm = 0.0;
            for ci in 0..c {
                norm += f[[ci, y, x]].powi(2);
            }
            let norm = (norm + NORM_EPS).sqrt();
            for ci in 0..c {
                out[[ci, y, x]] = f[[ci, y, x]] / norm;
            }
        }
    }
    out
}

/// Distance between two per-layer feature stacks: for each layer, the
/// spatial mean of the squared L2 difference between channel-normalized
/// features; averaged over layers.
pub fn perceptual_distance_from_features(fa: &[ArrayD<f64>], fb: &[ArrayD<f64>]) -> Result<f64> {
    if fa.len() != fb.len() {
        return Err(Error::config("feature stacks have different depths"));
    }
    let mut total = 0.0;
    for (a, b) in fa.iter().zip(fb.iter()) {
        if a.shape() != b.shape() {
            return Err(Error::config(format!(
                "feature shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let na = channel_normalize(a);
        let nb = channel_normalize(b);
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut layer = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    layer += (na[[ci, y, x]] - nb[[ci, y, x]]).powi(2);
                }
            }
        }
        total += layer / (h * w) as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Perceptual distance between two same-resolution images.
pub fn perceptual_distance<T: Scalar>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    extractor: &RandomConvExtractor,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    perceptual_distance_from_features(&extractor.layer_features(a)?, &extractor.layer_features(b)?)
}

// ---------------------------------------------------------------------------
// clustered perceptual score

/// Assign each generated image (row) to the dataset image (column) with
/// the smallest distance; ties break toward the lowest column index.
pub fn assign_clusters(dist_to_dataset: &Array2<f64>) -> Vec<usize> {
    dist_to_dataset
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for j in 1..row.len() {
                if row[j] < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Score from precomputed tables: `dist_to_dataset` is n_gen x N,
/// `gen_pairwise` is n_gen x n_gen. Clusters with fewer than two members
/// are skipped; if none qualify the score is 0.
pub fn clustered_score_from_tables(
    dist_to_dataset: &Array2<f64>,
    gen_pairwise: &Array2<f64>,
) -> Result<(f64, usize)> {
    let n_gen = dist_to_dataset.nrows();
    let n_data = dist_to_dataset.ncols();
    if n_gen == 0 || n_data == 0 {
        return Err(Error::data("clustered score needs non-empty inputs"));
    }
    if gen_pairwise.nrows() != n_gen || gen_pairwise.ncols() != n_gen {
        return Err(Error::config("pairwise table size mismatch"));
    }
    let assign = assign_clusters(dist_to_dataset);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_data];
    for (g, &c) in assign.iter().enumerate() {
        members[c].push(g);
    }
    let mut score = 0.0;
    let mut used = 0usize;
    for m in &members {
        if m.len() < 2 {
            continue;
        }
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..m.len() {
            for j in (i + 1)..m.len() {
                acc += gen_pairwise[[m[i], m[j]]];
                pairs += 1;
            }
        }
        score += acc / pairs as f64;
        used += 1;
    }
    if used == 0 {
        Ok((0.0, 0))
    } else {
        Ok((score / used as f64, used))
    }
}

/// Cluster generated images onto the dataset by nearest perceptual
/// distance and average the mean within-cluster pairwise distance.
pub fn clustered_lpips<T: Scalar>(
    generated: &[ArrayD<T>],
    dataset: &[ArrayD<T>],
    extractor: &RandomConvExtractor,
) -> Result<(f64, usize)> {
    if generated.is_empty() || dataset.is_empty() {
        return Err(Error::data("clustered score needs non-empty inputs"));
    }
    let gen_feats: Vec<Vec<ArrayD<f64>>> = generated
        .iter()
        .map(|i| extractor.layer_features(i))
        .collect::<Result<_>>()?;
    let data_feats: Vec<Vec<ArrayD<f64>>> = dataset
        .iter()
        .map(|i| extractor.layer_features(i))
        .collect::<Result<_>>()?;
    let mut dist = Array2::zeros((generated.len(), dataset.len()));
    for (g, gf) in gen_feats.iter().enumerate() {
        for (d, df) in data_feats.iter().enumerate() {
            dist[[g, d]] = perceptual_distance_from_features(gf, df)?;
        }
    }
    let mut pairwise = Array2::zeros((generated.len(), generated.len()));
    for i in 0..generated.len() {
        for j in (i + 1)..generated.len() {
            let d = perceptual_distance_from_features(&gen_feats[i], &gen_feats[j])?;
            pairwise[[i, j]] = d;
            pairwise[[j, i]] = d;
        }
    }
    clustered_score_from_tables(&dist, &pairwise)
}

// ---------------------------------------------------------------------------
// Welch's t-test

/// Two-sided Welch's t-test. Returns (t, degrees of freedom, p).
/// Degenerate zero-variance cases resolve to p=1 (equal means) or p=0.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return Err(Error::data(format!(
            "Welch's t-test needs at least 2 samples per group, got {na} and {nb}"
        )));
    }
    let ma = a.iter().sum::<f64>() / na as f64;
    let mb = b.iter().sum::<f64>() / nb as f64;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (na - 1) as f64;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (nb - 1) as f64;
    let se2 = va / na as f64 + vb / nb as f64;
    if se2 == 0.0 {
        return if ma == mb {
            Ok((0.0, (na + nb - 2) as f64, 1.0))
        } else {
            Ok((
                if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                (na + nb - 2) as f64,
                0.0,
            ))
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2)
        / ((va / na as f64).powi(2) / (na - 1) as f64
            + (vb / nb as f64).powi(2) / (nb - 1) as f64);
    // two-sided p through the regularized incomplete beta function
    use statrs::function::beta::beta_reg;
    let x = df / (df + t * t);
    let p = beta_reg(df / 2.0, 0.5, x);
    Ok((t, df, p.clamp(0.0, 1.0)))
}

// ---------------------------------------------------------------------------
// mask statistics

/// Positive-area fraction per mask plus aggregate min/mean/max.
pub fn mask_area_stats<T: Scalar>(masks: &[ArrayD<T>]) -> MaskAreaStats {
    let fractions: Vec<f64> = masks
        .iter()
        .map(|m| {
            let total = m.len() as f64;
            let pos = m.iter().filter(|v| v.real() > 0.5).count() as f64;
            if total > 0.0 {
                pos / total
            } else {
                0.0
            }
        })
        .collect();
    if fractions.is_empty() {
        return MaskAreaStats {
            mean: 0.0,
            min: 0.0,
            max: 0.0,
            fractions,
        };
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let min = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    MaskAreaStats {
        mean,
        min,
        max,
        fractions,
    }
}
