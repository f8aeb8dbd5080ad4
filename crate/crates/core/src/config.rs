//! Flat key-value training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::PlaneSpacing;
use crate::error::{Error, Result};
use crate::fields::FieldConfig;
use crate::losses::LossWeights;
use crate::params::AdamConfig;
use crate::render::Compositor;
use crate::volumes::NormConfig;

/// Every field maps to one top-level key of the TOML file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub keyframes: usize,
    pub neighbor_radius: usize,
    pub samples_per_ray: usize,
    pub ray_batch: usize,
    pub depth_planes: usize,
    /// `disparity` or `depth`.
    pub plane_spacing: String,
    pub volume_channels: usize,
    pub field_width: usize,
    pub position_bands: usize,
    pub direction_bands: usize,
    pub max_flow: f64,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub seed: u64,
    pub jitter: bool,
    /// `fast` or `reference`.
    pub compositor: String,
    pub use_geometry_volume: bool,
    pub use_motion_volume: bool,
    pub weight_rec: f64,
    pub weight_pho: f64,
    pub weight_cycle: f64,
    pub weight_occ: f64,
    pub weight_blend: f64,
    pub weight_flow_min: f64,
    pub weight_smooth_spatial: f64,
    pub weight_smooth_temporal: f64,
    pub weight_geo: f64,
    pub weight_depth: f64,
    /// Steps over which geometric and depth weights decay; 0 means a quarter of `total_steps`.
    pub decay_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let f = FieldConfig::default();
        let n = NormConfig::default();
        let a = AdamConfig::default();
        Self {
            keyframes: 8,
            neighbor_radius: 2,
            samples_per_ray: 128,
            ray_batch: 1024,
            depth_planes: 128,
            plane_spacing: PlaneSpacing::default().as_str().into(),
            volume_channels: 8,
            field_width: f.width,
            position_bands: f.position_bands,
            direction_bands: f.direction_bands,
            max_flow: f.max_flow,
            norm_eps: n.eps,
            norm_momentum: n.momentum,
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.epsilon,
            total_steps: 50_000,
            checkpoint_every: 1_000,
            log_every: 100,
            seed: 0,
            jitter: true,
            compositor: Compositor::default().as_str().into(),
            use_geometry_volume: true,
            use_motion_volume: true,
            weight_rec: w.rec,
            weight_pho: w.pho,
            weight_cycle: w.cycle,
            weight_occ: w.occ,
            weight_blend: w.blend,
            weight_flow_min: w.flow_min,
            weight_smooth_spatial: w.smooth_spatial,
            weight_smooth_temporal: w.smooth_temporal,
            weight_geo: w.geo,
            weight_depth: w.depth,
            decay_steps: 0,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl TrainConfig {
    /// Small model and batch sizes for CPU-scale runs on 24×32 scenes.
    pub fn toy() -> Self {
        Self {
            keyframes: 4,
            samples_per_ray: 24,
            ray_batch: 64,
            depth_planes: 32,
            field_width: 48,
            total_steps: 2_000,
            checkpoint_every: 500,
            log_every: 50,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    /// Field names in declaration order; these are the accepted keys.
    pub fn keys() -> Vec<String> {
        match toml::Table::try_from(TrainConfig::default()) {
            Ok(t) => t.keys().cloned().collect(),
            Err(_) => Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("<syntax>", e.to_string()))?;
        Self::from_table(table)
    }

    pub(crate) fn from_table(table: toml::Table) -> Result<Self> {
        let keys = Self::keys();
        if let Some(k) = table.keys().find(|k| !keys.contains(k)) {
            return Err(config_err(k, "unknown configuration key"));
        }
        let defaults = toml::Table::try_from(TrainConfig::default()).expect("defaults serialize");
        let mut table = table;
        for (k, v) in table.iter_mut() {
            if let (Some(i), true) = (v.as_integer(), defaults[k].is_float()) {
                *v = toml::Value::Float(i as f64);
            }
            if std::mem::discriminant(v) != std::mem::discriminant(&defaults[k]) {
                return Err(config_err(
                    k,
                    format!("expected a {}, found {}", defaults[k].type_str(), v.type_str()),
                ));
            }
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err("<value>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keyframes < 2 {
            return Err(config_err("keyframes", "must be at least 2"));
        }
        if self.neighbor_radius < 1 {
            return Err(config_err("neighbor_radius", "must be at least 1"));
        }
        for (k, v) in [
            ("samples_per_ray", self.samples_per_ray),
            ("ray_batch", self.ray_batch),
            ("volume_channels", self.volume_channels),
            ("field_width", self.field_width),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(config_err(k, "must be positive"));
            }
        }
        if self.samples_per_ray < 2 {
            return Err(config_err("samples_per_ray", "must be at least 2"));
        }
        if self.depth_planes == 0 || !self.depth_planes.is_multiple_of(8) {
            return Err(config_err("depth_planes", "must be a positive multiple of 8"));
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("max_flow", self.max_flow),
            ("norm_eps", self.norm_eps),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(k, "must be finite and positive"));
            }
        }
        for (k, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("norm_momentum", self.norm_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(k, "must lie in [0, 1)"));
            }
        }
        self.spacing()?;
        self.compositor_kind()?;
        self.loss_weights().validate()
    }

    pub fn spacing(&self) -> Result<PlaneSpacing> {
        PlaneSpacing::parse(&self.plane_spacing)
            .ok_or_else(|| config_err("plane_spacing", format!("unknown spacing {:?}", self.plane_spacing)))
    }

    pub fn compositor_kind(&self) -> Result<Compositor> {
        Compositor::parse(&self.compositor)
            .ok_or_else(|| config_err("compositor", format!("unknown compositor {:?}", self.compositor)))
    }

    pub fn neighbor_slots(&self) -> usize {
        2 * self.neighbor_radius
    }

    pub fn field(&self) -> FieldConfig {
        FieldConfig {
            width: self.field_width,
            position_bands: self.position_bands,
            direction_bands: self.direction_bands,
            max_flow: self.max_flow,
        }
    }

    pub fn norm(&self) -> NormConfig {
        NormConfig {
            eps: self.norm_eps,
            momentum: self.norm_momentum,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_eps,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            rec: self.weight_rec,
            pho: self.weight_pho,
            cycle: self.weight_cycle,
            occ: self.weight_occ,
            blend: self.weight_blend,
            flow_min: self.weight_flow_min,
            smooth_spatial: self.weight_smooth_spatial,
            smooth_temporal: self.weight_smooth_temporal,
            geo: self.weight_geo,
            depth: self.weight_depth,
            decay_steps: if self.decay_steps == 0 {
                (self.total_steps / 4).max(1)
            } else {
                self.decay_steps
            },
        }
    }

    /// Sets every loss weight to zero.
    pub fn zero_loss_weights(&mut self) {
        self.weight_rec = 0.0;
        self.weight_pho = 0.0;
        self.weight_cycle = 0.0;
        self.weight_occ = 0.0;
        self.weight_blend = 0.0;
        self.weight_flow_min = 0.0;
        self.weight_smooth_spatial = 0.0;
        self.weight_smooth_temporal = 0.0;
        self.weight_geo = 0.0;
        self.weight_depth = 0.0;
    }

    /// Architecture-relevant fields; checkpoints with equal signatures are interchangeable.
    pub fn architecture(&self) -> String {
        format!(
            "k{} r{} d{} f{} w{} pb{} db{} mf{}",
            self.keyframes,
            self.neighbor_radius,
            self.depth_planes,
            self.volume_channels,
            self.field_width,
            self.position_bands,
            self.direction_bands,
            self.max_flow
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = TrainConfig::default();
        assert_eq!(
            (
                c.keyframes,
                c.neighbor_slots(),
                c.samples_per_ray,
                c.ray_batch,
                c.depth_planes
            ),
            (8, 4, 128, 1024, 128)
        );
        assert_eq!(
            (c.learning_rate, c.beta1, c.beta2, c.adam_eps),
            (5e-4, 0.9, 0.999, 1e-8)
        );
        assert_eq!(c.loss_weights().decay_steps, 12_500);
        c.validate().unwrap();
        TrainConfig::toy().validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = TrainConfig::toy();
        c.seed = 42;
        c.weight_geo = 0.125;
        let back = TrainConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::from_toml_str("seed = 1\nlearning_rat = 0.1\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "learning_rat"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (text, key) in [
            ("keyframes = 1", "keyframes"),
            ("depth_planes = 12", "depth_planes"),
            ("ray_batch = 0", "ray_batch"),
            ("compositor = \"exact\"", "compositor"),
            ("seed = \"x\"", "seed"),
        ] {
            match TrainConfig::from_toml_str(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
        let c = TrainConfig::from_toml_str("learning_rate = 1").unwrap();
        assert_eq!(c.learning_rate, 1.0);
    }
}
