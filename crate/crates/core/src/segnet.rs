//! Miniature U-Net split into an encoder `g` and a classifier `h`, with the
//! pixel-wise cross-entropy loss.
//!
//! The encoder returns the bottleneck latent field together with the skip
//! activations; the classifier consumes exactly that [`Encoding`]. The only
//! forward path is `classify(encode(x))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::ParamSet;
use crate::rng::{self, Rng};
use crate::swd::EmbeddingBatch;
use crate::synthdata::{stack_images, Raster};
use crate::tensor::{split_nc_spatial, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// 2 or 3 spatial axes.
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of down-sampling levels; the decoder mirrors it.
    pub depth: usize,
    pub base_width: usize,
    /// Channels of the bottleneck latent field.
    pub latent_dim: usize,
    pub skip_connections: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { spatial_rank: 2, in_channels: 1, num_classes: 2, depth: 2, base_width: 8, latent_dim: 16, skip_connections: true }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(Error::arg("spatial_rank", "must be 2 or 3"));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(Error::arg("depth", "must lie in 1..=6"));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.latent_dim == 0 {
            return Err(Error::arg("widths", "channel counts must be positive"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::arg("num_classes", "must lie in 2..=255"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn pool_factor(&self) -> Vec<usize> {
        vec![2; self.spatial_rank]
    }

    /// Checks that an input `[N, C, spatial..]` shape fits this network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expect_len = self.spatial_rank + 2;
        let step = 1usize << self.depth;
        if shape.len() != expect_len || shape[1] != self.in_channels || shape[2..].iter().any(|&d| d % step != 0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected [batch, {}, {} spatial axes divisible by {step}]", self.in_channels, self.spatial_rank),
            });
        }
        Ok(())
    }
}

/// Parameter handles of one model on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

/// Output of the encoder: the latent field used for alignment and the skip
/// activations the classifier needs.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub latent: Var,
    pub skips: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    config: NetConfig,
    params: ParamSet,
    encoder_params: usize,
}

impl SegModel {
    /// He-uniform convolution weights, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived_rng(seed, "init", 0);
        let mut params = ParamSet::new();
        let rank = config.spatial_rank;
        let mut add_conv = |params: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize| -> Result<()> {
            let mut shape = vec![cout, cin];
            shape.extend(core::iter::repeat_n(k, rank));
            let fan_in = cin * k.pow(rank as u32);
            let bound = libm::sqrt(6.0 / fan_in as f64);
            let n: usize = shape.iter().product();
            let w = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
            params.insert(format!("{name}.weight"), Tensor::new(shape, w)?)?;
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cout])?)?;
            Ok(())
        };
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            add_conv(&mut params, &format!("enc{level}"), cin, config.width(level), 3)?;
            cin = config.width(level);
        }
        add_conv(&mut params, "bottleneck", cin, config.latent_dim, 3)?;
        let encoder_params = params.len();
        let mut cin = config.latent_dim;
        for level in (0..config.depth).rev() {
            let skip = if config.skip_connections { config.width(level) } else { 0 };
            add_conv(&mut params, &format!("dec{level}"), cin + skip, config.width(level), 3)?;
            cin = config.width(level);
        }
        add_conv(&mut params, "head", cin, config.num_classes, 1)?;
        Ok(Self { config, params, encoder_params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Indices of the encoder parameters `u`.
    pub fn encoder_param_indices(&self) -> core::ops::Range<usize> {
        0..self.encoder_params
    }

    /// Indices of the classifier parameters `v`.
    pub fn classifier_param_indices(&self) -> core::ops::Range<usize> {
        self.encoder_params..self.params.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: (0..self.params.len()).map(|i| tape.param(&self.params, i)).collect() }
    }

    fn conv(&self, tape: &mut Tape, b: &Bound, layer: usize, x: Var, pad: usize) -> Result<Var> {
        let spec = ConvSpec::same(self.config.spatial_rank, pad);
        tape.conv(x, b.vars[2 * layer], Some(b.vars[2 * layer + 1]), spec)
    }

    /// The encoder `g`.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Encoding> {
        self.config.check_input(tape.value(x).shape())?;
        let pool = self.config.pool_factor();
        let mut h = x;
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in 0..self.config.depth {
            let c = self.conv(tape, b, level, h, 1)?;
            let a = tape.relu(c);
            skips.push(a);
            h = tape.max_pool(a, &pool)?;
        }
        let c = self.conv(tape, b, self.config.depth, h, 1)?;
        Ok(Encoding { latent: tape.relu(c), skips })
    }

    /// The classifier `h`: decoder plus 1x1 head producing per-pixel logits.
    pub fn classify(&self, tape: &mut Tape, b: &Bound, enc: &Encoding) -> Result<Var> {
        let up = self.config.pool_factor();
        let mut h = enc.latent;
        let mut layer = self.config.depth + 1;
        for level in (0..self.config.depth).rev() {
            let u = tape.upsample(h, &up)?;
            let joined = if self.config.skip_connections { tape.concat_channels(&[u, enc.skips[level]])? } else { u };
            let c = self.conv(tape, b, layer, joined, 1)?;
            h = tape.relu(c);
            layer += 1;
        }
        self.conv(tape, b, layer, h, 0)
    }

    /// Per-pixel logits `[N, classes, spatial..]`, computed as `h(g(x))`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let enc = self.encode(tape, b, x)?;
        self.classify(tape, b, &enc)
    }

    /// Logits for a batch of images, without keeping the tape.
    pub fn predict_logits<'a>(&self, images: impl IntoIterator<Item = &'a Raster>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.leaf(stack_images(images)?, false);
        let y = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(y).clone())
    }

    /// Class probabilities `[N, classes, spatial..]`.
    pub fn predict_probs<'a>(&self, images: impl IntoIterator<Item = &'a Raster>) -> Result<Tensor> {
        let mut t = self.predict_logits(images)?;
        let shape = t.shape().to_vec();
        softmax_in_place(t.data_mut(), &shape);
        Ok(t)
    }

    /// Full latent field `[N, latent_dim, spatial..]` for a batch of images.
    pub fn embed_full<'a>(&self, images: impl IntoIterator<Item = &'a Raster>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.leaf(stack_images(images)?, false);
        let enc = self.encode(&mut tape, &b, x)?;
        Ok(tape.value(enc.latent).clone())
    }

    /// Latent codes at `sites_per_image` uniformly drawn sites of every image.
    pub fn embed(&self, images: &[Raster], sites_per_image: usize, seed: u64, domain_tag: &str) -> Result<EmbeddingBatch> {
        let latent = self.embed_full(images)?;
        let (n, c, sp) = split_nc_spatial(latent.shape())?;
        let rows = sample_sites(&mut rng::rng(seed), n, sp.iter().product(), sites_per_image)?;
        let plane: usize = sp.iter().product();
        let mut pts = Vec::with_capacity(rows.len() * c);
        for (b, site) in rows {
            for k in 0..c {
                pts.push(latent.data()[(b * c + k) * plane + site]);
            }
        }
        EmbeddingBatch::new(pts, c, domain_tag)
    }
}

/// Picks `per_image` distinct sites of every image (all sites, in order, when
/// `per_image >= sites`).
pub fn sample_sites(r: &mut Rng, images: usize, sites: usize, per_image: usize) -> Result<Vec<(usize, usize)>> {
    if per_image == 0 || images == 0 {
        return Err(Error::Empty("site sample"));
    }
    let mut rows = Vec::with_capacity(images * per_image.min(sites));
    for b in 0..images {
        if per_image >= sites {
            rows.extend((0..sites).map(|s| (b, s)));
        } else {
            let mut picked = rand::seq::index::sample(r, sites, per_image).into_vec();
            picked.sort_unstable();
            rows.extend(picked.into_iter().map(|s| (b, s)));
        }
    }
    Ok(rows)
}

/// Mean pixel-wise cross-entropy of `logits` `[N, classes, spatial..]`
/// against flattened labels `[N, spatial..]`.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let (value, grad) = ce_value_grad(tape.value(logits), labels)?;
    Ok(tape.fused_scalar(value, vec![(logits, grad)]))
}

/// Cross-entropy value and its gradient with respect to the logits.
pub fn ce_value_grad(logits: &Tensor, labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    let shape = logits.shape();
    if shape.len() < 2 {
        return Err(Error::shape("ce_loss", shape, &[labels.len()]));
    }
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    if labels.len() != n * plane {
        return Err(Error::shape("ce_loss", shape, &[labels.len()]));
    }
    if let Some(pixel) = labels.iter().position(|&l| l as usize >= c) {
        return Err(Error::LabelOutOfRange { pixel, label: labels[pixel], classes: c });
    }
    let x = logits.data();
    let count = (n * plane) as f64;
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    for b in 0..n {
        for s in 0..plane {
            let base = b * c * plane + s;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(x[base + k * plane]);
            }
            let mut z = 0.0;
            for k in 0..c {
                z += libm::exp(x[base + k * plane] - max);
            }
            let lse = max + libm::log(z);
            let y = labels[b * plane + s] as usize;
            total += lse - x[base + y * plane];
            for k in 0..c {
                let p = libm::exp(x[base + k * plane] - lse);
                grad[base + k * plane] = (p - if k == y { 1.0 } else { 0.0 }) / count;
            }
        }
    }
    Ok((total / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(dims: &[usize], f: impl Fn(usize) -> f64) -> Raster {
        let n = dims.iter().product();
        Raster::new(1, dims.to_vec(), (0..n).map(f).collect()).unwrap()
    }

    fn zero_head(m: &mut SegModel) {
        for name in ["head.weight", "head.bias"] {
            let i = m.params().index_of(name).unwrap();
            m.params_mut().value_mut(i).data_mut().fill(0.0);
        }
    }

    #[test]
    fn output_shape_contract() {
        let m = SegModel::new(NetConfig::default(), 0).unwrap();
        let img = image(&[16, 16], |i| (i % 7) as f64);
        let y = m.predict_logits([&img]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn three_dimensional_config_runs() {
        let cfg = NetConfig { spatial_rank: 3, depth: 1, base_width: 2, latent_dim: 3, ..NetConfig::default() };
        let m = SegModel::new(cfg, 1).unwrap();
        let img = image(&[4, 4, 4], |i| i as f64 * 0.01);
        assert_eq!(m.predict_logits([&img]).unwrap().shape(), &[1, 2, 4, 4, 4]);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut m = SegModel::new(NetConfig::default(), 4).unwrap();
        zero_head(&mut m);
        let img = image(&[8, 8], |i| (i as f64).sin());
        let p = m.predict_probs([&img]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn identical_images_identical_logits() {
        let m = SegModel::new(NetConfig::default(), 2).unwrap();
        let img = image(&[8, 8], |i| (i as f64 * 0.3).cos());
        let y = m.predict_logits([&img, &img]).unwrap();
        let half = y.len() / 2;
        assert_eq!(&y.data()[..half], &y.data()[half..]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = SegModel::new(NetConfig::default(), 2).unwrap();
        assert!(m.predict_logits([&image(&[6, 8], |_| 0.0)]).is_err());
    }

    #[test]
    fn embed_shape_and_determinism() {
        let cfg = NetConfig { latent_dim: 8, ..NetConfig::default() };
        let m = SegModel::new(cfg, 3).unwrap();
        let imgs: Vec<Raster> = (0..3).map(|k| image(&[16, 16], move |i| ((i + k) % 5) as f64)).collect();
        let e = m.embed(&imgs, 4, 9, "src").unwrap();
        assert_eq!((e.rows(), e.dim()), (12, 8));
        assert_eq!(e, m.embed(&imgs, 4, 9, "src").unwrap());
    }

    #[test]
    fn zero_encoder_on_zero_image_gives_zero_codes() {
        let mut m = SegModel::new(NetConfig::default(), 3).unwrap();
        for i in m.encoder_param_indices() {
            m.params_mut().value_mut(i).data_mut().fill(0.0);
        }
        let e = m.embed(&[image(&[8, 8], |_| 0.0)], 64, 0, "z").unwrap();
        assert!(e.points().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::zeros(&[1, 2, 1, 3]).unwrap();
        let (v, _) = ce_value_grad(&uniform, &[0, 1, 1]).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-15);

        // Channel-first layout: pixel 0 has logits [2, 0], pixel 1 has [0, 2].
        let t = Tensor::new(vec![1, 2, 1, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let (v, _) = ce_value_grad(&t, &[0, 1]).unwrap();
        let e2 = libm::exp(2.0);
        assert!((v - (-libm::log(e2 / (e2 + 1.0)))).abs() < 1e-15);
        assert!((v - 0.1269).abs() < 5e-5);

        let sharp = Tensor::new(vec![1, 2, 1, 1], vec![50.0, -50.0]).unwrap();
        assert!(ce_value_grad(&sharp, &[0]).unwrap().0 < 1e-40);
    }

    #[test]
    fn out_of_range_label_names_pixel() {
        let t = Tensor::zeros(&[1, 2, 1, 3]).unwrap();
        assert_eq!(ce_value_grad(&t, &[0, 1, 2]).unwrap_err(), Error::LabelOutOfRange { pixel: 2, label: 2, classes: 2 });
    }

    #[test]
    fn encoder_and_classifier_partition_params() {
        let m = SegModel::new(NetConfig::default(), 0).unwrap();
        let (u, v) = (m.encoder_param_indices(), m.classifier_param_indices());
        assert_eq!(u.end, v.start);
        assert_eq!(v.end, m.params().len());
        assert!(m.params().get(u.start).name.starts_with("enc0"));
        assert!(m.params().get(v.end - 1).name.starts_with("head"));
    }
}
