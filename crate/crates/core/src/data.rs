//! Samples, PNG ingestion, augmentation, resizing, splitting and a synthetic
//! organ/tumor generator.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `[channels, H, W]` with values in [0, 1].
    pub image: Array3<f32>,
    /// Class id per pixel.
    pub mask: Array2<u8>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Array2<u8>) -> Result<Self> {
        let id = id.into();
        if image.shape()[1..] != *mask.shape() {
            return Err(Error::Data(format!(
                "sample {id}: image {:?} and mask {:?} differ in size",
                image.shape(),
                mask.shape()
            )));
        }
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("sample {id}: image contains non-finite values")));
        }
        Ok(Self { id, image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.nrows(), self.mask.ncols())
    }
}

/// A generator whose stream depends only on `(seed, id, salt)`, so samples
/// can be processed in any order or in parallel without changing the output.
pub fn sample_rng(seed: u64, id: &str, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    // FNV-1a of the id selects the stream
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    rng.set_stream(h);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub count: usize,
    pub radius_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TumorSpec {
    pub count: usize,
    pub radius_range: (f64, f64),
    pub inside_organ: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub canvas: (usize, usize),
    pub organ: OrganSpec,
    pub tumor: TumorSpec,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            canvas: (64, 64),
            organ: OrganSpec {
                count: 1,
                radius_range: (14.0, 22.0),
            },
            tumor: TumorSpec {
                count: 2,
                radius_range: (2.0, 4.0),
                inside_organ: true,
            },
            noise_std: 0.05,
            seed: 0,
        }
    }
}

const BACKGROUND_LEVEL: f64 = 0.1;
const ORGAN_LEVEL: f64 = 0.5;
const TUMOR_LEVEL: f64 = 0.85;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (h, w) = self.canvas;
        if h == 0 || w == 0 {
            return bad("canvas must be non-empty".into());
        }
        for (name, (lo, hi)) in [("organ", self.organ.radius_range), ("tumor", self.tumor.radius_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} radius_range must satisfy 0 < min <= max, got ({lo}, {hi})"));
            }
        }
        if self.organ.count > 0 && self.tumor.count > 0 && self.tumor.radius_range.1 >= self.organ.radius_range.0 {
            return bad("tumor radii must be smaller than organ radii".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be a finite non-negative number, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// Generates `n` single-channel samples with ids `synth00000`, `synth00001`, ...
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<SegmentationSample>> {
    spec.validate()?;
    (0..n).map(|i| generate_one(spec, format!("synth{i:05}"))).collect()
}

fn generate_one(spec: &SyntheticSpec, id: String) -> Result<SegmentationSample> {
    let (h, w) = spec.canvas;
    let mut rng = sample_rng(spec.seed, &id, 0);
    let mut mask = Array2::<u8>::zeros((h, w));

    for _ in 0..spec.organ.count {
        let (lo, hi) = spec.organ.radius_range;
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=hi);
        let r = a.max(b);
        if 2.0 * r + 1.0 > h.min(w) as f64 {
            return Err(Error::Generation(format!(
                "organ radius {r:.1} does not fit the {h}x{w} canvas"
            )));
        }
        let cy = rng.random_range(r..=(h as f64 - 1.0 - r));
        let cx = rng.random_range(r..=(w as f64 - 1.0 - r));
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        for ((y, x), m) in mask.indexed_iter_mut() {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                *m = 1;
            }
        }
    }

    for _ in 0..spec.tumor.count {
        let (lo, hi) = spec.tumor.radius_range;
        let r = rng.random_range(lo..=hi);
        let ri = r.floor() as isize;
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            if 2.0 * r + 1.0 > h.min(w) as f64 {
                break;
            }
            let cy = rng.random_range(r..=(h as f64 - 1.0 - r)).round() as isize;
            let cx = rng.random_range(r..=(w as f64 - 1.0 - r)).round() as isize;
            let disk: Vec<(usize, usize)> = (-ri..=ri)
                .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
                .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= r * r)
                .map(|(dy, dx)| (cy + dy, cx + dx))
                .filter(|&(y, x)| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .map(|(y, x)| (y as usize, x as usize))
                .collect();
            if spec.tumor.inside_organ && !disk.iter().all(|&p| mask[p] >= 1) {
                continue;
            }
            for p in disk {
                mask[p] = 2;
            }
            placed = true;
            break;
        }
        if !placed {
            let where_ = if spec.tumor.inside_organ { " inside an organ" } else { "" };
            return Err(Error::Generation(format!(
                "could not place a tumor of radius {r:.1}{where_} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Generation(e.to_string()))?;
    let image = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        let base = [BACKGROUND_LEVEL, ORGAN_LEVEL, TUMOR_LEVEL][mask[[y, x]] as usize];
        let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (base + n).clamp(0.0, 1.0) as f32
    });
    SegmentationSample::new(id, image, mask)
}

/// Reads `<id>_img.png` / `<id>_mask.png` pairs, sorted by id.
///
/// `num_labels` is the number of distinct mask values allowed; a mask pixel
/// at or above it is a data error.
pub fn load_directory(path: &Path, num_labels: usize) -> Result<Vec<SegmentationSample>> {
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut pairs: BTreeMap<String, (Option<std::path::PathBuf>, Option<std::path::PathBuf>)> = BTreeMap::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(id) = name.strip_suffix("_img.png") {
            pairs.entry(id.to_string()).or_default().0 = Some(p.clone());
        } else if let Some(id) = name.strip_suffix("_mask.png") {
            pairs.entry(id.to_string()).or_default().1 = Some(p.clone());
        }
    }
    let orphans: Vec<String> = pairs
        .iter()
        .filter_map(|(id, (i, m))| match (i, m) {
            (Some(_), None) => Some(format!("{id} (no mask)")),
            (None, Some(_)) => Some(format!("{id} (no image)")),
            _ => None,
        })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unpaired files in {}: {}", path.display(), orphans.join(", "))));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no <id>_img.png / <id>_mask.png pairs in {}", path.display())));
    }

    let read = |p: &Path| -> Result<image::GrayImage> {
        Ok(image::open(p)
            .map_err(|source| Error::Image {
                path: p.to_path_buf(),
                source,
            })?
            .to_luma8())
    };
    let mut out = Vec::with_capacity(pairs.len());
    for (id, (img, msk)) in pairs {
        let (img, msk) = (read(&img.expect("paired"))?, read(&msk.expect("paired"))?);
        let (w, h) = img.dimensions();
        let image = Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
            img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
        });
        let (mw, mh) = msk.dimensions();
        let mask = Array2::from_shape_fn((mh as usize, mw as usize), |(y, x)| msk.get_pixel(x as u32, y as u32).0[0]);
        if let Some(&v) = mask.iter().find(|&&v| v as usize >= num_labels) {
            return Err(Error::Data(format!(
                "mask {id} contains label {v} but only {num_labels} labels are allowed"
            )));
        }
        out.push(SegmentationSample::new(id, image, mask)?);
    }
    Ok(out)
}

/// Writes the first image channel and the mask as 8-bit grayscale PNGs.
pub fn save_sample(dir: &Path, s: &SegmentationSample) -> Result<()> {
    let (h, w) = s.size();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(s.image[[0, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let msk = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([s.mask[[y as usize, x as usize]]]));
    for (suffix, im) in [("img", img), ("mask", msk)] {
        let p = dir.join(format!("{}_{suffix}.png", s.id));
        im.save(&p).map_err(|source| Error::Image { path: p, source })?;
    }
    Ok(())
}

pub fn hflip(s: &SegmentationSample) -> SegmentationSample {
    let mut out = s.clone();
    out.image.invert_axis(Axis(2));
    out.mask.invert_axis(Axis(1));
    out.image = out.image.as_standard_layout().into_owned();
    out.mask = out.mask.as_standard_layout().into_owned();
    out
}

fn bilinear(plane: ndarray::ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = (plane.nrows() as isize, plane.ncols() as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            plane[[yy as usize, xx as usize]] as f64
        }
    };
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut v = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wy * wx != 0.0 {
                v += wy * wx * at(y0 + dy, x0 + dx);
            }
        }
    }
    v as f32
}

/// Rotates image and mask about the canvas centre; bilinear for the image,
/// nearest for the mask, zero outside the source.
pub fn rotate(s: &SegmentationSample, degrees: f64) -> SegmentationSample {
    if degrees == 0.0 {
        return s.clone();
    }
    let (h, w) = s.size();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sn, cs) = degrees.to_radians().sin_cos();
    // inverse map from output pixel to source coordinates
    let src = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cs * dy - sn * dx + cy, sn * dy + cs * dx + cx)
    };
    let c = s.image.shape()[0];
    let image = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let (sy, sx) = src(y, x);
        bilinear(s.image.index_axis(Axis(0), ch), sy, sx)
    });
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = src(y, x);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
            0
        } else {
            s.mask[[ry as usize, rx as usize]]
        }
    });
    SegmentationSample {
        id: s.id.clone(),
        image,
        mask,
    }
}

/// Random flip then random rotation, with the same transform on image and mask.
pub fn augment(s: &SegmentationSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SegmentationSample {
    let flip = rng.random::<f64>() < cfg.hflip_prob;
    let angle = if cfg.rotate_max_deg > 0.0 {
        rng.random_range(-cfg.rotate_max_deg..=cfg.rotate_max_deg)
    } else {
        0.0
    };
    let s = if flip { hflip(s) } else { s.clone() };
    rotate(&s, angle)
}

/// Bilinear image resize and nearest mask resize, both with half-pixel centres.
pub fn resize(s: &SegmentationSample, target: (usize, usize)) -> SegmentationSample {
    let (h, w) = s.size();
    let (th, tw) = target;
    if (h, w) == target {
        return s.clone();
    }
    let (sy, sx) = (h as f64 / th as f64, w as f64 / tw as f64);
    let c = s.image.shape()[0];
    let image = Array3::from_shape_fn((c, th, tw), |(ch, y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
        bilinear(s.image.index_axis(Axis(0), ch), fy, fx)
    });
    let mask = Array2::from_shape_fn((th, tw), |(y, x)| {
        let ny = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        let nx = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
        s.mask[[ny, nx]]
    });
    SegmentationSample {
        id: s.id.clone(),
        image,
        mask,
    }
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.80, 0.15, 0.05);

/// Seeded shuffle into (train, val, test). Every split gets at least one item.
pub fn split<S>(items: Vec<S>, fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got {fractions:?}")));
    }
    let n = items.len();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 samples to split, got {n}")));
    }
    let mut n_val = (n as f64 * b).round() as usize;
    let mut n_test = (n as f64 * c).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        log::warn!("split of {n} samples leaves an empty partition; enforcing one sample per split");
        n_val = n_val.max(1);
        n_test = n_test.max(1);
        while n_val + n_test >= n {
            if n_val >= n_test && n_val > 1 {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut slots: Vec<Option<S>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<S> { idx.iter().map(|&i| slots[i].take().expect("each index once")).collect() };
    let n_train = n - n_val - n_test;
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

/// Network input for a batch of samples.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    /// `[B, C, H, W]`
    pub images: Tensor<T>,
    /// `[B, H, W]`
    pub masks: Array3<u8>,
}

pub fn make_batch<T: Element>(samples: &[&SegmentationSample]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, (h, w)) = (first.image.shape()[0], first.size());
    let mut images = Tensor::<T>::zeros(vec![samples.len(), c, h, w]);
    let mut masks = Array3::zeros((samples.len(), h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != [c, h, w] {
            return Err(Error::Data(format!("sample {} has shape {:?}, batch expects {:?}", s.id, s.image.shape(), [c, h, w])));
        }
        images
            .index_axis_mut(Axis(0), i)
            .assign(&s.image.mapv(|v| cst::<T>(v as f64)).into_dyn());
        masks.index_axis_mut(Axis(0), i).assign(&s.mask);
    }
    Ok(Batch { images, masks })
}
