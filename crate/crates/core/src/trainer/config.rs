//! Training configuration: TOML with unknown keys rejected, plus
//! `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::RenderSettings;
use crate::stdr::Schedule;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub regularizer: RegularizerConfig,
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub render: RenderSettings,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of L1 against D-SSIM.
    pub lambda: f64,
    pub lambda_temporal: f64,
    pub lambda_spatial: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            lambda_temporal: 0.1,
            lambda_spatial: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// Neighbors per Gaussian in the KL term.
    pub knn_k: usize,
    /// Gaussians sampled per iteration for the KL term.
    pub sample_size: usize,
    /// Upper bound on sampled (i, j) pairs.
    pub pair_cap: usize,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            sample_size: 1000,
            pair_cap: 20000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub spatial_width: usize,
    pub temporal_width: usize,
    pub position_frequencies: usize,
    pub time_frequencies: usize,
    /// Affine layers in the deformation network.
    pub deform_layers: usize,
    /// Batch-norm in the feature-network branches (affine → BN → act → dropout).
    pub batch_norm: bool,
    pub dropout: f64,
    /// Scale deformation residuals by the dynamic probability.
    pub dynamic_gating: bool,
    pub deform_color: bool,
    pub deform_opacity: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            spatial_width: 32,
            temporal_width: 32,
            position_frequencies: 6,
            time_frequencies: 4,
            deform_layers: 6,
            batch_norm: true,
            dropout: 0.1,
            dynamic_gating: true,
            deform_color: false,
            deform_opacity: false,
        }
    }
}

/// Adam hyperparameters with one learning rate per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_position: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_mask: f64,
    pub lr_network: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            lr_position: 1.6e-4,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_color: 2.5e-3,
            lr_opacity: 0.05,
            lr_mask: 0.05,
            lr_network: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    /// Masks, regularizers and the feature network; off gives the baseline.
    pub stdr: bool,
    /// Write `checkpoint_<iteration>.bin` every this many iterations (0 = never).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20000,
            seed: 0,
            stdr: true,
            checkpoint_every: 0,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `section.key=value`. The value is parsed as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?;
            let slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            if i + 1 == parts.len() {
                // Allow integers where floats are expected.
                *slot = match (&*slot, value) {
                    (toml::Value::Float(_), toml::Value::Integer(v)) => toml::Value::Float(v as f64),
                    (_, v) => v,
                };
                break;
            }
            node = slot;
        }
        let cfg: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.lambda) {
            return bad(format!("loss.lambda must lie in [0, 1], got {}", l.lambda));
        }
        if !(l.lambda_temporal >= 0.0 && l.lambda_spatial >= 0.0) {
            return bad("regularizer weights must be non-negative".into());
        }
        if self.schedule.warm_up_end > self.schedule.reg_end {
            return bad("schedule.warm_up_end must not exceed schedule.reg_end".into());
        }
        if self.schedule.knn_rebuild_every == 0 {
            return bad("schedule.knn_rebuild_every must be positive".into());
        }
        let r = &self.regularizer;
        if r.knn_k == 0 || r.sample_size == 0 || r.pair_cap == 0 {
            return bad("regularizer.knn_k, sample_size and pair_cap must be positive".into());
        }
        let n = &self.network;
        if n.hidden_width == 0 || n.spatial_width == 0 || n.temporal_width == 0 {
            return bad("network widths must be positive".into());
        }
        if n.deform_layers < 2 {
            return bad("network.deform_layers must be at least 2".into());
        }
        if !(0.0..1.0).contains(&n.dropout) {
            return bad(format!("network.dropout must lie in [0, 1), got {}", n.dropout));
        }
        let o = &self.optim;
        let lrs = [
            o.lr_position,
            o.lr_rotation,
            o.lr_scale,
            o.lr_color,
            o.lr_opacity,
            o.lr_mask,
            o.lr_network,
        ];
        if lrs.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        self.render.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = Config::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), c);
        assert_eq!(Config::from_toml_str("").unwrap(), c);
        assert_eq!(c.loss.lambda_temporal, 0.1);
        assert_eq!(c.loss.lambda_spatial, 0.2);
        assert_eq!(c.schedule.warm_up_end, 3000);
        assert_eq!(c.regularizer.knn_k, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml_str("[loss]\nlamda = 0.5\n").is_err());
        assert!(Config::from_toml_str("[nope]\n").is_err());
        let mut c = Config::default();
        assert!(c.apply_override("loss.lamda=0.3").is_err());
        assert!(c.apply_override("loss").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = Config::default();
        c.apply_override("loss.lambda=0.5").unwrap();
        c.apply_override("train.stdr=false").unwrap();
        c.apply_override("optim.lr_mask=1").unwrap();
        c.apply_override("render.background=[1.0, 1.0, 1.0]").unwrap();
        assert_eq!(c.loss.lambda, 0.5);
        assert!(!c.train.stdr);
        assert_eq!(c.optim.lr_mask, 1.0);
        assert_eq!(c.render.background, [1.0; 3]);
        assert!(c.apply_override("loss.lambda=2").is_err());
        assert_eq!(c.loss.lambda, 0.5);
    }
}
