//! Run and generation configuration, stored as TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fmuda_core::adapt::TrainPlan;
use fmuda_core::ensemble::CountMode;
use fmuda_core::{AdamConfig, DomainShift, NetConfig};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Confidence-weighted ensemble.
    #[default]
    Fmuda,
    /// Per-pixel majority vote.
    Pv,
    /// Uniform probability average.
    Av,
    /// Best single adapted source.
    Suda,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [Aggregation::Fmuda, Aggregation::Pv, Aggregation::Av, Aggregation::Suda];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Fmuda => "fmuda",
            Aggregation::Pv => "pv",
            Aggregation::Av => "av",
            Aggregation::Suda => "suda",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown aggregation `{s}` (expected fmuda, pv, av or suda)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CountModeConfig {
    #[default]
    PerPixel,
    PerImage,
}

impl From<CountModeConfig> for CountMode {
    fn from(m: CountModeConfig) -> Self {
        match m {
            CountModeConfig::PerPixel => CountMode::PerPixel,
            CountModeConfig::PerImage => CountMode::PerImage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub latent_dim: usize,
    pub skip_connections: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        NetConfig::default().into()
    }
}

impl From<NetConfig> for NetSection {
    fn from(n: NetConfig) -> Self {
        Self {
            spatial_rank: n.spatial_rank,
            in_channels: n.in_channels,
            num_classes: n.num_classes,
            depth: n.depth,
            base_width: n.base_width,
            latent_dim: n.latent_dim,
            skip_connections: n.skip_connections,
        }
    }
}

impl From<NetSection> for NetConfig {
    fn from(n: NetSection) -> Self {
        Self {
            spatial_rank: n.spatial_rank,
            in_channels: n.in_channels,
            num_classes: n.num_classes,
            depth: n.depth,
            base_width: n.base_width,
            latent_dim: n.latent_dim,
            skip_connections: n.skip_connections,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs_pretrain: usize,
    pub epochs_adapt: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub swd_projections: usize,
    pub lambda_conf: f64,
    pub sites_per_image: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = TrainPlan::default();
        Self {
            epochs_pretrain: p.epochs_pretrain,
            epochs_adapt: p.epochs_adapt,
            batch_size: p.batch_size,
            gamma: p.gamma,
            swd_projections: p.swd_projections,
            lambda_conf: p.lambda_conf,
            sites_per_image: p.sites_per_image,
            learning_rate: p.adam.learning_rate,
            beta1: p.adam.beta1,
            beta2: p.adam.beta2,
            epsilon: p.adam.epsilon,
        }
    }
}

impl TrainSection {
    pub fn plan(&self, seed: u64) -> TrainPlan {
        TrainPlan {
            epochs_pretrain: self.epochs_pretrain,
            epochs_adapt: self.epochs_adapt,
            batch_size: self.batch_size,
            gamma: self.gamma,
            swd_projections: self.swd_projections,
            lambda_conf: self.lambda_conf,
            seed,
            adam: AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon },
            sites_per_image: self.sites_per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub output: PathBuf,
    pub target: String,
    /// Source domains; empty means every manifest domain except the target.
    pub sources: Vec<String>,
    pub seed: u64,
    /// Allows reading target masks for evaluation inside `run`.
    pub oracle_mode: bool,
    pub aggregation: Aggregation,
    /// Concurrent source nodes; 0 means one per source.
    pub workers: usize,
    pub count_mode: CountModeConfig,
    pub xi: f64,
    pub zeta: f64,
    pub export_embeddings: bool,
    pub net: NetSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.toml"),
            output: PathBuf::from("out"),
            target: "d0".into(),
            sources: Vec::new(),
            seed: 0,
            oracle_mode: false,
            aggregation: Aggregation::Fmuda,
            workers: 0,
            count_mode: CountModeConfig::PerPixel,
            xi: 0.05,
            zeta: 1.0,
            export_embeddings: false,
            net: NetSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    /// Settings tuned for the synthetic three-domain benchmark.
    pub fn benchmark() -> Self {
        Self {
            net: NetSection { skip_connections: false, ..NetSection::default() },
            train: TrainSection {
                epochs_pretrain: 50,
                epochs_adapt: 30,
                lambda_conf: 0.9,
                learning_rate: 3e-3,
                ..TrainSection::default()
            },
            ..Self::default()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        self.net.into()
    }

    pub fn plan(&self) -> TrainPlan {
        self.train.plan(self.seed)
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config { path: origin.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&error::read_text(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write(path, self.to_toml())
    }

    /// Checks value ranges and that the manifest exists.
    pub fn validate(&self) -> Result<()> {
        self.net_config().validate().tag("segnet")?;
        self.plan().validate().tag("adapt")?;
        fmuda_core::metrics::complexity_term(self.xi, self.zeta, 1, 1).tag("metrics")?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::invalid("config", "seed must not exceed 2^63 - 1"));
        }
        if self.target.is_empty() {
            return Err(Error::invalid("config", "no target domain given"));
        }
        if self.sources.iter().any(|s| s == &self.target) {
            return Err(Error::invalid("config", format!("`{}` is both target and source", self.target)));
        }
        if !self.manifest.is_file() {
            return Err(Error::Config { path: self.manifest.clone(), message: "manifest does not exist".into() });
        }
        Ok(())
    }

    /// Flattened `section.key = value` pairs of the whole configuration.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serialises");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.into(), s.clone())),
        toml::Value::Float(f) => out.push((prefix.into(), format!("{f:?}"))),
        toml::Value::Array(a) => out.push((
            prefix.into(),
            a.iter().map(|x| x.as_str().map(String::from).unwrap_or_else(|| x.to_string())).collect::<Vec<_>>().join(","),
        )),
        other => out.push((prefix.into(), other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSection {
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
}

impl Default for ShiftSection {
    fn default() -> Self {
        Self { intensity_gain: 1.0, intensity_offset: 0.0, noise_sigma: 0.0, bias_field_amplitude: 0.0 }
    }
}

impl ShiftSection {
    pub fn shift(&self, seed: u64) -> DomainShift {
        DomainShift {
            intensity_gain: self.intensity_gain,
            intensity_offset: self.intensity_offset,
            noise_sigma: self.noise_sigma,
            bias_field_amplitude: self.bias_field_amplitude,
            seed,
        }
    }

    /// The default look of domain `k`: a dimmed, lifted target, a clean
    /// source, a heavily corrupted source, then milder variations.
    pub fn default_for(k: usize) -> Self {
        match k {
            0 => Self { intensity_gain: 0.5, intensity_offset: 0.45, noise_sigma: 0.02, ..Self::default() },
            1 => Self { noise_sigma: 0.02, ..Self::default() },
            2 => Self { noise_sigma: 0.8, ..Self::default() },
            k => Self {
                intensity_gain: 0.7 + 0.1 * (k % 4) as f64,
                intensity_offset: 0.05 * (k % 3) as f64,
                noise_sigma: 0.05,
                bias_field_amplitude: 0.2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub images_per_domain: usize,
    pub dims: Vec<usize>,
    pub num_classes: usize,
    /// One entry per domain, named `d0`, `d1`, ...
    pub domains: Vec<ShiftSection>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::with_domains(3)
    }
}

impl GenConfig {
    pub fn with_domains(n: usize) -> Self {
        Self {
            seed: 0,
            images_per_domain: 12,
            dims: vec![32, 32],
            num_classes: 2,
            domains: (0..n).map(ShiftSection::default_for).collect(),
        }
    }

    pub fn shifts(&self) -> Vec<DomainShift> {
        self.domains.iter().enumerate().map(|(k, s)| s.shift(crate::manifest::shift_seed(self.seed, k))).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&error::read_text(path)?).map_err(|e| Error::Config { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::benchmark();
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("target = \"d2\"\n[train]\nepochs_adapt = 3\n", Path::new("x")).unwrap();
        assert_eq!(c.target, "d2");
        assert_eq!(c.train.epochs_adapt, 3);
        assert_eq!(c.train.lambda_conf, 0.3);
        assert!(RunConfig::from_toml("bogus = 1\n", Path::new("x")).is_err());
    }

    #[test]
    fn snapshot_is_flat() {
        let s = RunConfig::default().snapshot();
        assert!(s.contains(&("net.depth".to_string(), "2".to_string())));
        assert!(s.contains(&("train.lambda_conf".to_string(), "0.3".to_string())));
        assert!(s.contains(&("aggregation".to_string(), "fmuda".to_string())));
    }

    #[test]
    fn aggregation_names() {
        for a in Aggregation::ALL {
            assert_eq!(a.as_str().parse::<Aggregation>().unwrap(), a);
        }
        assert!("vote".parse::<Aggregation>().is_err());
    }
}
