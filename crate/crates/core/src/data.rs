//! Synthetic defect dataset generation and MVTec-AD-layout IO.
//!
//! The generator renders procedurally varied objects (ellipses and
//! polygons with noise texture on a dark background) as defect-free
//! samples and overlays parametric defects (scratch, hole, print) with
//! exact ground-truth masks, writing the standard
//! `<category>/train/good`, `<category>/test/<defect>`,
//! `<category>/ground_truth/<defect>` layout.

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::seeds;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefectCategorySpec {
    pub name: String,
    pub n_defect: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub category: String,
    pub n_good: usize,
    #[serde(default)]
    pub defects: Vec<DefectCategorySpec>,
    pub resolution: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 4 {
            return Err(Error::config(format!(
                "resolution must be a power of two >= 4, got {}",
                self.resolution
            )));
        }
        if self.category.is_empty() {
            return Err(Error::config("category name must be non-empty"));
        }
        for d in &self.defects {
            if d.name.is_empty() {
                return Err(Error::config("defect category name must be non-empty"));
            }
        }
        Ok(())
    }
}

/// One dataset element: RGB image in [-1,1], optional binary mask
/// (present iff this is a defect sample), and its category label.
#[derive(Clone, Debug)]
pub struct Sample<T: Scalar> {
    /// `[3, R, R]` in [-1, 1].
    pub image: ArrayD<T>,
    /// `[1, R, R]` in {0, 1}; present iff defect sample.
    pub mask: Option<ArrayD<T>>,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

// ---------------------------------------------------------------------------
// pixel codecs

/// u8 -> [-1, 1]; exact inverse of [`to_u8`] on its image.
pub fn from_u8<T: Scalar>(v: u8) -> T {
    T::from_real(v as f64 / 127.5 - 1.0)
}

/// [-1, 1] -> u8 by round-to-nearest.
pub fn to_u8<T: Scalar>(v: T) -> u8 {
    let x = (v.real().clamp(-1.0, 1.0) + 1.0) * 127.5;
    x.round().clamp(0.0, 255.0) as u8
}

fn image_to_rgb8<T: Scalar>(img: &ArrayD<T>) -> Result<image::RgbImage> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::config(format!("expected [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(img[[0, y, x]]),
                    to_u8(img[[1, y, x]]),
                    to_u8(img[[2, y, x]]),
                ]),
            );
        }
    }
    Ok(out)
}

fn mask_to_gray8<T: Scalar>(mask: &ArrayD<T>) -> Result<image::GrayImage> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::config(format!("expected [1,H,W] mask, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[[0, y, x]].real() > 0.5 { 255 } else { 0 };
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    Ok(out)
}

/// Write an RGB image (and optional mask alongside, for callers that
/// manage their own layout) as PNG.
pub fn save_image<T: Scalar>(path: &Path, img: &ArrayD<T>) -> Result<()> {
    image_to_rgb8(img)?
        .save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

pub fn save_mask<T: Scalar>(path: &Path, mask: &ArrayD<T>) -> Result<()> {
    mask_to_gray8(mask)?
        .save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// Decode a PNG into `[3,H,W]` values in [-1,1].
pub fn load_image<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = from_u8(p.0[c]);
            }
        }
    }
    Ok(out)
}

/// Decode a PNG mask into `[1,H,W]` values in {0,1} (threshold 128).
pub fn load_mask<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] = if img.get_pixel(x as u32, y as u32).0[0] >= 128 {
                T::one()
            } else {
                T::zero()
            };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// resizing

/// Bilinear resize of a `[C,H,W]` image to `target`x`target`.
pub fn resize_bilinear<T: Scalar>(img: &ArrayD<T>, target: usize) -> ArrayD<T> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == target && w == target {
        return img.clone();
    }
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    ArrayD::from_shape_fn(IxDyn(&[c, target, target]), |idx| {
        let (ci, oy, ox) = (idx[0], idx[1], idx[2]);
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let v00 = img[[ci, y0, x0]].real();
        let v01 = img[[ci, y0, x1]].real();
        let v10 = img[[ci, y1, x0]].real();
        let v11 = img[[ci, y1, x1]].real();
        let top = v00 * (1.0 - dx) + v01 * dx;
        let bot = v10 * (1.0 - dx) + v11 * dx;
        T::from_real(top * (1.0 - dy) + bot * dy)
    })
}

/// Nearest-neighbor resize of a `[C,H,W]` array to `target`x`target`.
pub fn resize_nearest<T: Scalar>(img: &ArrayD<T>, target: usize) -> ArrayD<T> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == target && w == target {
        return img.clone();
    }
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    ArrayD::from_shape_fn(IxDyn(&[c, target, target]), |idx| {
        let y = (((idx[1] as f64 + 0.5) * sy) as usize).min(h - 1);
        let x = (((idx[2] as f64 + 0.5) * sx) as usize).min(w - 1);
        img[[idx[0], y, x]]
    })
}

// ---------------------------------------------------------------------------
// synthetic rendering

/// Object silhouette used by the renderer and by containment checks.
#[derive(Clone, Debug)]
pub enum Silhouette {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Polygon {
        vertices: Vec<(f64, f64)>,
    },
}

impl Silhouette {
    /// Point-membership test in pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Silhouette::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (angle.cos(), angle.sin());
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Silhouette::Polygon { vertices } => {
                // even-odd ray cast
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (x0, y0) = vertices[i];
                    let (x1, y1) = vertices[(i + 1) % n];
                    if (y0 > y) != (y1 > y) {
                        let xc = x0 + (y - y0) / (y1 - y0) * (x1 - x0);
                        if x < xc {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }

    /// Rasterize at resolution `r` (pixel centers).
    pub fn rasterize(&self, r: usize) -> Vec<bool> {
        let mut out = vec![false; r * r];
        for y in 0..r {
            for x in 0..r {
                out[y * r + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        out
    }
}

fn sample_silhouette(r: usize, rng: &mut ChaCha8Rng) -> Silhouette {
    let rf = r as f64;
    let cx = rf * rng.gen_range(0.42..0.58);
    let cy = rf * rng.gen_range(0.42..0.58);
    if rng.gen_bool(0.5) {
        Silhouette::Ellipse {
            cx,
            cy,
            rx: rf * rng.gen_range(0.26..0.4),
            ry: rf * rng.gen_range(0.26..0.4),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        }
    } else {
        let k = rng.gen_range(5..9usize);
        let base = rf * rng.gen_range(0.28..0.4);
        let vertices = (0..k)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * (i as f64 + rng.gen_range(-0.2..0.2))
                    / k as f64;
                let rad = base * rng.gen_range(0.75..1.0);
                (cx + rad * th.cos(), cy + rad * th.sin())
            })
            .collect();
        Silhouette::Polygon { vertices }
    }
}

/// Render one defect-free object; returns the image and its silhouette.
pub fn render_good<T: Scalar>(r: usize, rng: &mut ChaCha8Rng) -> (ArrayD<T>, Silhouette) {
    let sil = sample_silhouette(r, rng);
    let inside = sil.rasterize(r);
    let tint: [f64; 3] = [
        rng.gen_range(-0.1..0.5),
        rng.gen_range(-0.1..0.5),
        rng.gen_range(-0.1..0.5),
    ];
    let mut img = ArrayD::zeros(IxDyn(&[3, r, r]));
    for y in 0..r {
        for x in 0..r {
            let on = inside[y * r + x];
            let texture = rng.gen_range(-0.08..0.08);
            for c in 0..3 {
                let base = if on { tint[c] } else { -0.85 };
                img[[c, y, x]] = T::from_real((base + texture).clamp(-1.0, 1.0));
            }
        }
    }
    (img, sil)
}

/// Built-in parametric defect families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    Scratch,
    Hole,
    Print,
}

impl DefectKind {
    pub fn from_name(name: &str) -> DefectKind {
        match name {
            "scratch" => DefectKind::Scratch,
            "hole" => DefectKind::Hole,
            _ => DefectKind::Print,
        }
    }
}

fn stamp_disc(mask: &mut [bool], r: usize, cx: f64, cy: f64, rad: f64) {
    let lo_y = (cy - rad).floor().max(0.0) as usize;
    let hi_y = ((cy + rad).ceil() as usize).min(r.saturating_sub(1));
    let lo_x = (cx - rad).floor().max(0.0) as usize;
    let hi_x = ((cx + rad).ceil() as usize).min(r.saturating_sub(1));
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= rad * rad {
                mask[y * r + x] = true;
            }
        }
    }
}

fn random_interior_point(sil: &Silhouette, r: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    for _ in 0..256 {
        let x = rng.gen_range(0.0..r as f64);
        let y = rng.gen_range(0.0..r as f64);
        if sil.contains(x, y) {
            return (x, y);
        }
    }
    (r as f64 / 2.0, r as f64 / 2.0)
}

/// Overlay one defect inside the silhouette; returns its exact mask.
/// Target area is drawn uniform in [0.02, 0.3] of the image, then
/// clipped to the silhouette so the mask is strictly inside the object.
pub fn apply_defect<T: Scalar>(
    img: &mut ArrayD<T>,
    sil: &Silhouette,
    kind: DefectKind,
    rng: &mut ChaCha8Rng,
) -> ArrayD<T> {
    let r = img.shape()[1];
    let rf = r as f64;
    let inside = sil.rasterize(r);
    let area_frac: f64 = rng.gen_range(0.02..0.3);
    let target_px = area_frac * rf * rf;
    let mut mask = vec![false; r * r];
    match kind {
        DefectKind::Scratch => {
            let (mut x, mut y) = random_interior_point(sil, r, rng);
            let segments = rng.gen_range(2..5usize);
            let seg_len = rf * rng.gen_range(0.15..0.35);
            let thickness = (target_px / (segments as f64 * seg_len) / 2.0)
                .clamp(0.6, rf / 10.0);
            let mut th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for _ in 0..segments {
                let steps = (seg_len * 2.0) as usize + 1;
                for s in 0..steps {
                    let t = s as f64 / steps as f64;
                    stamp_disc(
                        &mut mask,
                        r,
                        x + t * seg_len * th.cos(),
                        y + t * seg_len * th.sin(),
                        thickness,
                    );
                }
                x += seg_len * th.cos();
                y += seg_len * th.sin();
                th += rng.gen_range(-0.9..0.9);
            }
        }
        DefectKind::Hole | DefectKind::Print => {
            let (cx, cy) = random_interior_point(sil, r, rng);
            let rad = (target_px / std::f64::consts::PI).sqrt().max(1.0);
            stamp_disc(&mut mask, r, cx, cy, rad);
            if kind == DefectKind::Print {
                // second lobe for an irregular blob
                let (cx2, cy2) = (
                    cx + rng.gen_range(-rad..rad),
                    cy + rng.gen_range(-rad..rad),
                );
                stamp_disc(&mut mask, r, cx2, cy2, rad * 0.6);
            }
        }
    }
    // clip to the silhouette; guarantee at least one pixel
    for i in 0..r * r {
        mask[i] &= inside[i];
    }
    if !mask.iter().any(|m| *m) {
        let (cx, cy) = random_interior_point(sil, r, rng);
        let i = (cy as usize).min(r - 1) * r + (cx as usize).min(r - 1);
        if inside[i] {
            mask[i] = true;
        }
    }
    let color: [f64; 3] = match kind {
        DefectKind::Scratch => [-0.7, -0.7, -0.7],
        DefectKind::Hole => [-0.95, -0.95, -0.95],
        DefectKind::Print => [
            rng.gen_range(0.5..0.95),
            rng.gen_range(0.5..0.95),
            rng.gen_range(0.5..0.95),
        ],
    };
    let mut out = ArrayD::zeros(IxDyn(&[1, r, r]));
    for y in 0..r {
        for x in 0..r {
            if mask[y * r + x] {
                out[[0, y, x]] = T::one();
                for c in 0..3 {
                    let jitter = rng.gen_range(-0.05..0.05);
                    img[[c, y, x]] = T::from_real((color[c] + jitter).clamp(-1.0, 1.0));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// dataset generation and layout

fn category_root(root: &Path, category: &str) -> PathBuf {
    root.join(category)
}

fn mkdirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Render the dataset described by `spec` under `root` in MVTec layout.
/// Deterministic per seed; regenerating produces bitwise-identical files.
pub fn generate_synthetic(spec: &DatasetSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    let cat = category_root(root, &spec.category);
    let good_dir = cat.join("train").join("good");
    mkdirs(&good_dir)?;
    let r = spec.resolution;
    let mut rng = seeds::stream(spec.seed, &format!("data.gen.{}", spec.category));
    for i in 0..spec.n_good {
        let (img, _sil) = render_good::<f32>(r, &mut rng);
        save_image(&good_dir.join(format!("{i:03}.png")), &img)?;
    }
    for d in &spec.defects {
        let test_dir = cat.join("test").join(&d.name);
        let gt_dir = cat.join("ground_truth").join(&d.name);
        mkdirs(&test_dir)?;
        mkdirs(&gt_dir)?;
        let kind = DefectKind::from_name(&d.name);
        let mut drng = seeds::stream(
            spec.seed,
            &format!("data.gen.{}.{}", spec.category, d.name),
        );
        for i in 0..d.n_defect {
            let (mut img, sil) = render_good::<f32>(r, &mut drng);
            let mask = apply_defect(&mut img, &sil, kind, &mut drng);
            save_image(&test_dir.join(format!("{i:03}.png")), &img)?;
            save_mask(&gt_dir.join(format!("{i:03}_mask.png")), &mask)?;
        }
    }
    Ok(())
}

/// PNG files directly inside `dir`, sorted by name for stable order.
pub fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) == Some("png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn mask_path_for(gt_dir: &Path, image_path: &Path) -> Result<PathBuf> {
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(format!("bad file name {}", image_path.display())))?;
    let with_suffix = gt_dir.join(format!("{stem}_mask.png"));
    if with_suffix.exists() {
        return Ok(with_suffix);
    }
    let plain = gt_dir.join(format!("{stem}.png"));
    if plain.exists() {
        return Ok(plain);
    }
    Err(Error::data(format!(
        "missing ground-truth mask for {} (looked for {} and {})",
        image_path.display(),
        with_suffix.display(),
        plain.display()
    )))
}

/// Load one split. `Train` reads `<category>/train/good` (no masks);
/// `Test` requires `defect_category` and pairs each image with its
/// ground-truth mask. Images are resized bilinearly to `resolution` and
/// mapped to [-1,1]; masks are resized nearest and kept binary.
/// `subset_k` keeps k samples chosen uniformly by the seeded RNG,
/// preserving the original (sorted-filename) order.
pub fn load_dataset<T: Scalar>(
    root: &Path,
    category: &str,
    split: Split,
    defect_category: Option<&str>,
    resolution: usize,
    subset_k: Option<usize>,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    let cat = category_root(root, category);
    let mut samples = Vec::new();
    match split {
        Split::Train => {
            let dir = cat.join("train").join("good");
            for p in sorted_pngs(&dir)? {
                samples.push(Sample {
                    image: resize_bilinear(&load_image(&p)?, resolution),
                    mask: None,
                    label: "good".to_string(),
                });
            }
        }
        Split::Test => {
            let defect = defect_category.ok_or_else(|| {
                Error::config("test split requires a defect category".to_string())
            })?;
            let dir = cat.join("test").join(defect);
            let gt = cat.join("ground_truth").join(defect);
            for p in sorted_pngs(&dir)? {
                let mask_path = mask_path_for(&gt, &p)?;
                samples.push(Sample {
                    image: resize_bilinear(&load_image(&p)?, resolution),
                    mask: Some(resize_nearest(&load_mask(&mask_path)?, resolution)),
                    label: defect.to_string(),
                });
            }
        }
    }
    if let Some(k) = subset_k {
        if k > samples.len() {
            return Err(Error::data(format!(
                "subset_k={k} exceeds dataset size {}",
                samples.len()
            )));
        }
        if k < samples.len() {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            let mut rng = seeds::stream(seed, "data.subset");
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let mut chosen: Vec<usize> = idx[..k].to_vec();
            chosen.sort_unstable();
            samples = chosen.into_iter().map(|i| samples[i].clone()).collect();
        }
    }
    Ok(samples)
}

/// Per-category uniform split into base sets (floor(n/3), at least 1)
/// and test remainder, seeded and disjoint.
pub fn partition_for_classification<T: Scalar>(
    per_category: &[(String, Vec<Sample<T>>)],
    seed: u64,
) -> Result<(Vec<(String, Vec<Sample<T>>)>, Vec<Sample<T>>)> {
    let mut base = Vec::new();
    let mut test = Vec::new();
    for (name, samples) in per_category {
        let n = samples.len();
        if n == 0 {
            return Err(Error::data(format!("defect category '{name}' is empty")));
        }
        let n_base = (n / 3).max(1);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = seeds::stream(seed, &format!("data.partition.{name}"));
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let mut base_samples = Vec::with_capacity(n_base);
        for &i in &idx[..n_base] {
            base_samples.push(samples[i].clone());
        }
        for &i in &idx[n_base..] {
            test.push(samples[i].clone());
        }
        base.push((name.clone(), base_samples));
    }
    Ok((base, test))
}
