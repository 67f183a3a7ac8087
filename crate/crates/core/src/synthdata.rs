//! Rasters, domain datasets, synthetic multi-domain phantoms and patch tiling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A channel-first real-valued image: `channels × dims[0] × dims[1] ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    channels: usize,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(channels: usize, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape { shape: dims, reason: "raster needs positive channels and dimensions".into() });
        }
        let n = channels * dims.iter().product::<usize>();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape: dims,
                reason: format!("payload holds {} values, expected {n}", data.len()),
            });
        }
        Ok(Self { channels, dims, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) || dims.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape { shape: dims, reason: format!("label payload holds {} values", data.len()) });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Stacks images into a `[batch, channels, spatial..]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Raster>) -> Result<Tensor> {
    let mut it = images.into_iter().peekable();
    let first = *it.peek().ok_or(Error::Empty("image batch"))?;
    let (c, dims) = (first.channels, first.dims.clone());
    let mut data = Vec::new();
    let mut n = 0;
    for img in it {
        if img.channels != c || img.dims != dims {
            return Err(Error::shape("stack images", &dims, &img.dims));
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    let mut shape = vec![n, c];
    shape.extend_from_slice(&dims);
    Tensor::new(shape, data)
}

/// SHA-256 over the shapes and exact bit patterns of an image list.
pub fn image_set_fingerprint(images: &[Raster]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((images.len() as u64).to_le_bytes());
    for img in images {
        h.update((img.channels as u64).to_le_bytes());
        h.update((img.dims.len() as u64).to_le_bytes());
        for &d in &img.dims {
            h.update((d as u64).to_le_bytes());
        }
        for v in &img.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Scanner/protocol-style intensity distortion applied to base phantoms:
/// `x' = gain * x * (1 + amplitude * field) + offset + sigma * noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShift {
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
    pub seed: u64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift =
        DomainShift { intensity_gain: 1.0, intensity_offset: 0.0, noise_sigma: 0.0, bias_field_amplitude: 0.0, seed: 0 };

    pub fn validate(&self) -> Result<()> {
        if !self.intensity_gain.is_finite() || self.intensity_gain == 0.0 {
            return Err(Error::arg("intensity_gain", "must be finite and non-zero"));
        }
        if !self.intensity_offset.is_finite() {
            return Err(Error::arg("intensity_offset", "must be finite"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::arg("noise_sigma", "must be non-negative"));
        }
        if !(self.bias_field_amplitude >= 0.0 && self.bias_field_amplitude < 1.0) {
            return Err(Error::arg("bias_field_amplitude", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Applies the shift to image number `index` of a domain.
    pub fn apply(&self, base: &Raster, index: u64) -> Raster {
        let mut data = base.data.clone();
        if self.bias_field_amplitude > 0.0 {
            let field = bias_field(&base.dims, rng::derive_seed(self.seed, "bias", index));
            let plane = base.pixels();
            for (k, v) in data.iter_mut().enumerate() {
                *v *= 1.0 + self.bias_field_amplitude * field[k % plane];
            }
        }
        if self.intensity_gain != 1.0 {
            data.iter_mut().for_each(|v| *v *= self.intensity_gain);
        }
        if self.intensity_offset != 0.0 {
            data.iter_mut().for_each(|v| *v += self.intensity_offset);
        }
        if self.noise_sigma > 0.0 {
            let mut r = rng::derived_rng(self.seed, "noise", index);
            for v in data.iter_mut() {
                let n: f64 = r.sample(StandardNormal);
                *v += self.noise_sigma * n;
            }
        }
        Raster { channels: base.channels, dims: base.dims.clone(), data }
    }
}

/// Smooth field in [-1, 1]: a product of one low-frequency cosine per axis.
fn bias_field(dims: &[usize], seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let waves: Vec<(f64, f64)> = dims.iter().map(|_| (r.gen_range(0.5..1.5), r.gen_range(0.0..2.0 * PI))).collect();
    let n: usize = dims.iter().product();
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut v = 1.0;
            for ax in (0..dims.len()).rev() {
                let coord = rem % dims[ax];
                rem /= dims[ax];
                let (freq, phase) = waves[ax];
                v *= libm::cos(2.0 * PI * freq * coord as f64 / dims[ax] as f64 + phase);
            }
            v
        })
        .collect()
}

/// A domain's images, its optional masks, and the shift that produced it.
///
/// Every mask access goes through [`DomainDataset::mask`] or
/// [`DomainDataset::masks`], which bump an audit counter.
#[derive(Debug)]
pub struct DomainDataset {
    domain_id: String,
    images: Vec<Raster>,
    masks: Option<Vec<LabelMap>>,
    num_classes: usize,
    shift: Option<DomainShift>,
    label_reads: AtomicUsize,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        images: Vec<Raster>,
        masks: Option<Vec<LabelMap>>,
        num_classes: usize,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        let first = images.first().ok_or(Error::Empty("domain image list"))?;
        if !(2..=255).contains(&num_classes) {
            return Err(Error::arg("num_classes", "must lie in 2..=255"));
        }
        for img in &images {
            if img.dims != first.dims || img.channels != first.channels {
                return Err(Error::DomainMismatch {
                    domain: domain_id,
                    reason: format!("image shape {:?} differs from {:?}", img.dims, first.dims),
                });
            }
        }
        if let Some(ms) = &masks {
            if ms.len() != images.len() {
                return Err(Error::DimMismatch { what: "mask count", expected: images.len(), got: ms.len() });
            }
            for m in ms {
                if m.dims != first.dims {
                    return Err(Error::shape("mask", &first.dims, &m.dims));
                }
                if let Some(pixel) = m.data.iter().position(|&l| l as usize >= num_classes) {
                    return Err(Error::LabelOutOfRange { pixel, label: m.data[pixel], classes: num_classes });
                }
            }
        }
        Ok(Self { domain_id, images, masks, num_classes, shift: None, label_reads: AtomicUsize::new(0) })
    }

    pub fn with_shift(mut self, shift: DomainShift) -> Self {
        self.shift = Some(shift);
        self
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Raster] {
        &self.images
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.images[0].channels
    }

    pub fn dims(&self) -> &[usize] {
        &self.images[0].dims
    }

    pub fn shift(&self) -> Option<&DomainShift> {
        self.shift.as_ref()
    }

    pub fn is_labeled(&self) -> bool {
        self.masks.is_some()
    }

    pub fn mask(&self, i: usize) -> Result<&LabelMap> {
        let ms = self.masks.as_ref().ok_or_else(|| Error::Unlabeled(self.domain_id.clone()))?;
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        ms.get(i).ok_or(Error::arg("index", format!("mask {i} out of range")))
    }

    pub fn masks(&self) -> Result<&[LabelMap]> {
        let ms = self.masks.as_ref().ok_or_else(|| Error::Unlabeled(self.domain_id.clone()))?;
        self.label_reads.fetch_add(ms.len(), Ordering::Relaxed);
        Ok(ms)
    }

    /// Number of mask reads so far.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Copy without masks, for handing a domain's images to other parties.
    pub fn unlabeled_copy(&self) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id.clone(),
            images: self.images.clone(),
            masks: None,
            num_classes: self.num_classes,
            shift: self.shift,
            label_reads: AtomicUsize::new(0),
        }
    }

    /// Full copy with a fresh read counter.
    pub fn duplicate(&self) -> DomainDataset {
        DomainDataset {
            domain_id: self.domain_id.clone(),
            images: self.images.clone(),
            masks: self.masks.clone(),
            num_classes: self.num_classes,
            shift: self.shift,
            label_reads: AtomicUsize::new(0),
        }
    }
}

/// Generates `count` base phantoms: smooth-textured background with one to
/// three ellipsoidal blobs. Class `c` blobs sit at intensity `0.2 + 0.6 * c / (classes - 1)`.
pub fn base_phantoms(seed: u64, count: usize, dims: &[usize], num_classes: usize) -> Result<Vec<(Raster, LabelMap)>> {
    if dims.is_empty() || dims.len() > 3 || dims.iter().any(|&d| d < 4) {
        return Err(Error::InvalidShape { shape: dims.to_vec(), reason: "phantoms need 1 to 3 axes of size at least 4".into() });
    }
    if !(2..=255).contains(&num_classes) {
        return Err(Error::arg("num_classes", "must lie in 2..=255"));
    }
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::derived_rng(seed, "phantom", i as u64);
        let blobs: Vec<(Vec<f64>, Vec<f64>, u8)> = (0..r.gen_range(1..=3))
            .map(|_| {
                let centre = dims.iter().map(|&d| r.gen_range(0.2..0.8) * d as f64).collect();
                let radii = dims.iter().map(|&d| r.gen_range(0.1..0.22) * d as f64).collect();
                (centre, radii, r.gen_range(1..num_classes) as u8)
            })
            .collect();
        let texture = bias_field(dims, r.gen());
        let mut img = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for flat in 0..n {
            let mut coord = [0usize; 3];
            let mut rem = flat;
            for ax in (0..dims.len()).rev() {
                coord[ax] = rem % dims[ax];
                rem /= dims[ax];
            }
            let mut label = 0u8;
            for (centre, radii, class) in &blobs {
                let mut q = 0.0;
                for ax in 0..dims.len() {
                    let t = (coord[ax] as f64 + 0.5 - centre[ax]) / radii[ax];
                    q += t * t;
                }
                if q < 1.0 {
                    label = *class;
                }
            }
            let level = 0.2 + 0.6 * label as f64 / (num_classes - 1) as f64;
            img.push(level + 0.05 * texture[flat]);
            labels.push(label);
        }
        out.push((Raster::new(1, dims.to_vec(), img)?, LabelMap::new(dims.to_vec(), labels)?));
    }
    Ok(out)
}

/// Builds `shifts.len()` labelled domains over a shared set of base phantoms.
/// Domain `k` is named `d{k}`; masks are identical across domains.
pub fn generate_domains(
    base_seed: u64,
    images_per_domain: usize,
    dims: &[usize],
    num_classes: usize,
    shifts: &[DomainShift],
) -> Result<Vec<DomainDataset>> {
    if shifts.is_empty() {
        return Err(Error::Empty("shift list"));
    }
    if images_per_domain == 0 {
        return Err(Error::arg("images_per_domain", "must be at least 1"));
    }
    for s in shifts {
        s.validate()?;
    }
    let base = base_phantoms(base_seed, images_per_domain, dims, num_classes)?;
    shifts
        .iter()
        .enumerate()
        .map(|(k, shift)| {
            let images = base.iter().enumerate().map(|(i, (img, _))| shift.apply(img, i as u64)).collect();
            let masks = base.iter().map(|(_, m)| m.clone()).collect();
            Ok(DomainDataset::new(format!("d{k}"), images, Some(masks), num_classes)?.with_shift(*shift))
        })
        .collect()
}

/// Sliding-window tiling geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub patch_size: Vec<usize>,
    pub overlap_fraction: f64,
}

impl PatchSpec {
    pub fn new(patch_size: Vec<usize>, overlap_fraction: f64) -> Result<Self> {
        if patch_size.is_empty() || patch_size.contains(&0) {
            return Err(Error::arg("patch_size", "must be positive on every axis"));
        }
        if !(0.0..1.0).contains(&overlap_fraction) {
            return Err(Error::arg("overlap_fraction", "must lie in [0, 1)"));
        }
        Ok(Self { patch_size, overlap_fraction })
    }

    /// `floor(patch * (1 - overlap))`, at least 1.
    pub fn strides(&self) -> Vec<usize> {
        self.patch_size.iter().map(|&p| (libm::floor(p as f64 * (1.0 - self.overlap_fraction)) as usize).max(1)).collect()
    }
}

fn axis_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=(len - patch)).step_by(stride).collect();
    if *v.last().expect("len >= patch") + patch < len {
        v.push(len - patch);
    }
    v
}

/// Window origins covering `dims`; the last window on each axis is clamped
/// inward so the whole extent is covered.
pub fn patch_origins(dims: &[usize], spec: &PatchSpec) -> Result<Vec<Vec<usize>>> {
    if dims.len() != spec.patch_size.len() {
        return Err(Error::shape("patch", dims, &spec.patch_size));
    }
    if dims.iter().zip(&spec.patch_size).any(|(d, p)| p > d) {
        return Err(Error::shape("patch larger than image", dims, &spec.patch_size));
    }
    let strides = spec.strides();
    let starts: Vec<Vec<usize>> = (0..dims.len()).map(|ax| axis_starts(dims[ax], spec.patch_size[ax], strides[ax])).collect();
    let mut origins = vec![Vec::new()];
    for s in &starts {
        origins = origins
            .into_iter()
            .flat_map(|o| {
                s.iter().map(move |&x| {
                    let mut o = o.clone();
                    o.push(x);
                    o
                })
            })
            .collect();
    }
    Ok(origins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: Vec<usize>,
    pub raster: Raster,
}

pub fn extract_patches(image: &Raster, spec: &PatchSpec) -> Result<Vec<Patch>> {
    let origins = patch_origins(&image.dims, spec)?;
    let dims = &image.dims;
    let p = &spec.patch_size;
    let plane = image.pixels();
    let patch_plane: usize = p.iter().product();
    let mut out = Vec::with_capacity(origins.len());
    for origin in origins {
        let mut data = Vec::with_capacity(image.channels * patch_plane);
        for c in 0..image.channels {
            for flat in 0..patch_plane {
                let mut rem = flat;
                let mut src = 0;
                let mut mul = 1;
                for ax in (0..dims.len()).rev() {
                    let local = rem % p[ax];
                    rem /= p[ax];
                    src += (origin[ax] + local) * mul;
                    mul *= dims[ax];
                }
                data.push(image.data[c * plane + src]);
            }
        }
        out.push(Patch { raster: Raster::new(image.channels, p.clone(), data)?, origin });
    }
    Ok(out)
}
