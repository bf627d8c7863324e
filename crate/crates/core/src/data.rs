//! Seeded synthetic segmentation clients with controllable distribution
//! shift.
//!
//! Each sample is a randomly placed ellipse (two nested ellipses in the
//! 3-class task) on a sinusoidal texture background. A client's shift
//! descriptor controls intensity affine transform, pixel noise, texture
//! frequency, and foreground shape statistics, emulating cross-hospital
//! heterogeneity. Images are z-scored per sample after generation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use fedroute_nn::rng::derive_rng;
use fedroute_nn::Tensor4D;

use crate::error::{Result, SimError};

/// Distribution-shift descriptor for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientShift {
    pub intensity_scale: f64,
    pub intensity_offset: f64,
    pub noise_sigma: f64,
    pub texture_freq: f64,
    pub fg_radius_range: (f64, f64),
    pub eccentricity_range: (f64, f64),
    pub n_samples: usize,
}

impl ClientShift {
    pub fn validate(&self, field: &str, image_size: usize) -> Result<()> {
        let fail = |sub: &str, msg: String| Err(SimError::config(&format!("{field}.{sub}"), msg));
        if !(0.0..1.0).contains(&self.noise_sigma) {
            return fail("noise_sigma", format!("must be in [0, 1), got {}", self.noise_sigma));
        }
        if self.texture_freq <= 0.0 {
            return fail("texture_freq", format!("must be > 0, got {}", self.texture_freq));
        }
        let (r0, r1) = self.fg_radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return fail("fg_radius_range", format!("must satisfy 0 < min <= max, got ({r0}, {r1})"));
        }
        // the ellipse bounding circle plus a 1px margin must fit in the image
        if 2.0 * (r1 + 1.0) >= (image_size - 1) as f64 {
            return fail(
                "fg_radius_range",
                format!("radius {r1} cannot fit in a {image_size}x{image_size} image"),
            );
        }
        let (e0, e1) = self.eccentricity_range;
        if !(0.0..1.0).contains(&e0) || !(0.0..1.0).contains(&e1) || e1 < e0 {
            return fail("eccentricity_range", format!("must be ordered within [0, 1), got ({e0}, {e1})"));
        }
        if self.n_samples == 0 {
            return fail("n_samples", "must be positive".into());
        }
        Ok(())
    }
}

/// Generation geometry of one ellipse: center, semi-axes, orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Point-in-ellipse test at integer pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.theta.cos() + dy * self.theta.sin();
        let v = -dx * self.theta.sin() + dy * self.theta.cos();
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Per-sample generation record, kept for oracle tests and diagnostics.
/// Refers to the geometry at generation time (before any augmentation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub disc: Ellipse,
    pub cup: Option<Ellipse>,
    pub prenorm_mean: f64,
    pub prenorm_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    /// `(1, 1, size, size)` z-scored image.
    pub image: Tensor4D,
    /// Row-major label map, values in `0..classes`.
    pub mask: Vec<u8>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub samples: Vec<SegmentationSample>,
    pub classes: usize,
    pub size: usize,
    pub shift: ClientShift,
}

const SPLIT_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

const CUP_SCALE: f64 = 0.55;
const FG_CONTRAST: f64 = 1.0;
const CUP_CONTRAST: f64 = 0.8;
const TEXTURE_AMPLITUDE: f64 = 0.5;

/// Generates one client's dataset. Deterministic in `(shift, classes, size,
/// seed)`.
pub fn generate_client(
    shift: &ClientShift,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<ClientDataset> {
    if classes != 2 && classes != 3 {
        return Err(SimError::config("classes", format!("must be 2 or 3, got {classes}")));
    }
    if size % 4 != 0 || size == 0 {
        return Err(SimError::config("image_size", format!("must be divisible by 4, got {size}")));
    }
    shift.validate("shift", size)?;
    let mut rng = derive_rng(seed, "data", &[]);
    let mut samples = Vec::with_capacity(shift.n_samples);
    for _ in 0..shift.n_samples {
        samples.push(generate_sample(shift, classes, size, &mut rng)?);
    }
    Ok(ClientDataset {
        samples,
        classes,
        size,
        shift: shift.clone(),
    })
}

fn generate_sample(
    shift: &ClientShift,
    classes: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentationSample> {
    let s = size as f64;
    let (r0, r1) = shift.fg_radius_range;
    let a = rng.gen_range(r0..=r1);
    let (e0, e1) = shift.eccentricity_range;
    let ecc = rng.gen_range(e0..=e1);
    let b = a * (1.0 - ecc * ecc).sqrt();
    let theta = rng.gen_range(0.0..PI);
    let margin = a + 1.0;
    if margin >= s - 1.0 - margin {
        return Err(SimError::InvalidInput(format!(
            "ellipse with radius {a} cannot fit in {size}x{size} image"
        )));
    }
    let cx = rng.gen_range(margin..=(s - 1.0 - margin));
    let cy = rng.gen_range(margin..=(s - 1.0 - margin));
    let disc = Ellipse { cx, cy, a, b, theta };
    let cup = (classes == 3).then(|| Ellipse {
        cx,
        cy,
        a: a * CUP_SCALE,
        b: b * CUP_SCALE,
        theta,
    });

    let tex_phase = rng.gen_range(0.0..2.0 * PI);
    let tex_angle = rng.gen_range(0.0..PI);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut mask = vec![0u8; size * size];
    let mut raw = vec![0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let proj = xf * tex_angle.cos() + yf * tex_angle.sin();
            let mut v =
                TEXTURE_AMPLITUDE * (2.0 * PI * shift.texture_freq * proj / s + tex_phase).sin();
            let mut label = 0u8;
            if disc.contains(xf, yf) {
                v += FG_CONTRAST;
                label = 1;
            }
            if let Some(cup) = &cup {
                if cup.contains(xf, yf) {
                    v += CUP_CONTRAST;
                    label = 2;
                }
            }
            v = shift.intensity_scale * v + shift.intensity_offset;
            if shift.noise_sigma > 0.0 {
                v += shift.noise_sigma * noise.sample(rng);
            }
            mask[y * size + x] = label;
            raw[y * size + x] = v;
        }
    }

    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-15 {
        return Err(SimError::NonFinite(
            "degenerate sample: pre-normalization variance is zero".into(),
        ));
    }
    let std = var.sqrt();
    for v in raw.iter_mut() {
        *v = (*v - mean) / std;
    }

    Ok(SegmentationSample {
        image: Tensor4D::from_vec([1, 1, size, size], raw).map_err(SimError::Engine)?,
        mask,
        meta: SampleMeta {
            disc,
            cup,
            prenorm_mean: mean,
            prenorm_var: var,
        },
    })
}

/// Splits a dataset into (train, val, test) by a seeded shuffle. The default
/// fractions `(0.64, 0.16, 0.20)` reproduce a 20% test split followed by an
/// 80/20 train/val split of the remainder.
pub fn split(
    dataset: &ClientDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(ClientDataset, ClientDataset, ClientDataset)> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(SimError::config(
            "split",
            format!("fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fs})"),
        ));
    }
    let n = dataset.samples.len();
    if n == 0 {
        return Err(SimError::InvalidInput("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, "data", &[SPLIT_STREAM]);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_test = (fs * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    if n_test + n_val > n {
        return Err(SimError::config("split", "rounded val+test exceed dataset"));
    }
    let n_train = n - n_val - n_test;
    let pick = |range: std::ops::Range<usize>| ClientDataset {
        samples: order[range].iter().map(|&i| dataset.samples[i].clone()).collect(),
        classes: dataset.classes,
        size: dataset.size,
        shift: dataset.shift.clone(),
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n),
    ))
}

/// Applies `k` quarter-turns then an optional horizontal flip, identically
/// to image and mask. Exact index permutations, no interpolation.
pub fn augment_with(sample: &SegmentationSample, k_rot: u8, flip: bool) -> SegmentationSample {
    let size = sample.image.height();
    debug_assert_eq!(size, sample.image.width(), "augmentation assumes square images");
    let mut img: Vec<f64> = sample.image.data().to_vec();
    let mut mask = sample.mask.clone();
    for _ in 0..(k_rot % 4) {
        img = rot90(&img, size);
        mask = rot90(&mask, size);
    }
    if flip {
        img = flip_h(&img, size);
        mask = flip_h(&mask, size);
    }
    SegmentationSample {
        image: Tensor4D::from_vec([1, 1, size, size], img).expect("same length"),
        mask,
        meta: sample.meta.clone(),
    }
}

/// Seeded random rotation/flip.
pub fn augment(sample: &SegmentationSample, seed: u64) -> SegmentationSample {
    let mut rng = derive_rng(seed, "data", &[AUGMENT_STREAM]);
    let k = rng.gen_range(0u8..4);
    let flip = rng.gen_bool(0.5);
    augment_with(sample, k, flip)
}

fn rot90<T: Copy + Default>(data: &[T], size: usize) -> Vec<T> {
    // counterclockwise: out[y][x] = in[x][size-1-y]
    let mut out = vec![T::default(); data.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = data[x * size + (size - 1 - y)];
        }
    }
    out
}

fn flip_h<T: Copy + Default>(data: &[T], size: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = data[y * size + (size - 1 - x)];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// PGM export (inspection only; the pipeline operates in memory)
// ---------------------------------------------------------------------------

fn write_pgm(path: &Path, size: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

/// Dumps a dataset as PGM images and masks plus a JSON manifest.
pub fn export_client(dataset: &ClientDataset, dir: &Path, name: &str) -> Result<()> {
    let root = dir.join(name);
    fs::create_dir_all(&root)?;
    let mut files = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let img_name = format!("img_{i:03}.pgm");
        let mask_name = format!("mask_{i:03}.pgm");
        let img_bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .map(|v| (((v + 3.0) / 6.0).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let label_scale = 255 / (dataset.classes as u8 - 1);
        let mask_bytes: Vec<u8> = s.mask.iter().map(|l| l * label_scale).collect();
        write_pgm(&root.join(&img_name), dataset.size, &img_bytes)?;
        write_pgm(&root.join(&mask_name), dataset.size, &mask_bytes)?;
        files.push((img_name, mask_name));
    }
    let manifest = serde_json::json!({
        "client": name,
        "classes": dataset.classes,
        "size": dataset.size,
        "shift": dataset.shift,
        "samples": files.iter().map(|(i, m)| serde_json::json!({"image": i, "mask": m})).collect::<Vec<_>>(),
    });
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Packs samples into a batch tensor and a flat label buffer.
pub fn pack_batch(samples: &[&SegmentationSample]) -> (Tensor4D, Vec<u8>) {
    let size = samples[0].image.height();
    let n = samples.len();
    let mut x = Tensor4D::zeros([n, 1, size, size]);
    let mut labels = Vec::with_capacity(n * size * size);
    for (i, s) in samples.iter().enumerate() {
        x.plane_mut(i, 0).copy_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask);
    }
    (x, labels)
}
