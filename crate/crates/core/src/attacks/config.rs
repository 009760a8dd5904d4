use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// GAN training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub hidden: Vec<usize>,
    /// Top-n most confident aux samples per class for the conditional mode.
    pub top_n: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            lr: 5e-4,
            hidden: vec![128, 256],
            top_n: 30,
        }
    }
}

/// Decoder training hyperparameters (Inv-Alignment, Updates-Leak).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            hidden: vec![256],
        }
    }
}

/// Hyperparameters shared by all attacks; each attack reads the subset it
/// needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub attack_id: String,
    pub target_size: usize,
    pub seed: u64,
    pub iterations: usize,
    /// Fixed step for input-space descent, learning rate for latent and
    /// dummy-data optimizers.
    pub step_size: f32,
    pub batch_size: usize,
    pub candidate_multiplier: usize,
    pub class_weight: f32,
    pub alpha_tv: f32,
    pub alpha_l2: f32,
    pub bn_weight: f32,
    pub latent_dim: usize,
    /// Weight of `‖z‖²` in latent-space attacks.
    pub prior_weight: f32,
    /// Weight of the discriminator realism term in latent-space attacks.
    pub disc_weight: f32,
    /// Random latents drawn per slot before optimization; the one the target
    /// scores highest for the slot's class is kept.
    pub init_pool: usize,
    /// Latent samples per class per step (KEDMI).
    pub kedmi_samples: usize,
    pub kedmi_sigma_init: f32,
    /// Replace reparameterization noise with zeros (KEDMI).
    pub kedmi_zero_noise: bool,
    pub gan: GanConfig,
    pub decoder: DecoderConfig,
    pub dirichlet_peak: f32,
    pub dirichlet_rest: f32,
    pub update_size: usize,
    pub shadow_count: usize,
    pub probe_count: usize,
    pub shadow_update_steps: usize,
    /// Gradient-matching loss below which Deep-Leakage counts as converged.
    pub convergence_threshold: f32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            attack_id: String::new(),
            target_size: 100,
            seed: 0,
            iterations: 200,
            step_size: 0.1,
            batch_size: 64,
            candidate_multiplier: 1,
            class_weight: 1.0,
            alpha_tv: 0.0,
            alpha_l2: 0.0,
            bn_weight: 0.0,
            latent_dim: 32,
            prior_weight: 0.0,
            disc_weight: 0.0,
            init_pool: 1,
            kedmi_samples: 4,
            kedmi_sigma_init: 1.0,
            kedmi_zero_noise: false,
            gan: GanConfig::default(),
            decoder: DecoderConfig::default(),
            dirichlet_peak: 20.0,
            dirichlet_rest: 0.2,
            update_size: 100,
            shadow_count: 48,
            probe_count: 64,
            shadow_update_steps: 10,
            convergence_threshold: 1e-4,
        }
    }
}

impl AttackConfig {
    /// Desk-scale defaults for `attack_id`.
    pub fn preset(attack_id: &str, target_size: usize) -> Self {
        let base = Self {
            attack_id: attack_id.to_string(),
            target_size,
            ..Self::default()
        };
        match attack_id {
            "mi_face" => Self {
                iterations: 100,
                step_size: 0.05,
                ..base
            },
            "deep_dream" => Self {
                iterations: 100,
                step_size: 0.05,
                alpha_tv: 0.05,
                alpha_l2: 0.01,
                ..base
            },
            "deep_inversion" => Self {
                iterations: 100,
                step_size: 0.05,
                alpha_tv: 0.05,
                alpha_l2: 0.01,
                bn_weight: 1.0,
                ..base
            },
            "revealer" | "kedmi" | "plgmi" => Self {
                iterations: 300,
                step_size: 0.05,
                init_pool: 256,
                ..base
            },
            "deep_leakage" => Self {
                target_size: 1,
                iterations: 1000,
                step_size: 0.05,
                ..base
            },
            "bias_rec" => Self {
                iterations: 2000,
                step_size: 0.01,
                candidate_multiplier: 2,
                ..base
            },
            "updates_leak" => Self {
                target_size: 100,
                iterations: 0,
                ..base
            },
            _ => base,
        }
    }

    /// Applies `overrides` (a JSON object) on top of the preset for its
    /// `attack_id`.
    pub fn from_json_with_preset(overrides: &serde_json::Value, target_size: usize) -> Result<Self> {
        let id = overrides
            .get("attack_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Invalid("attack config without attack_id".into()))?;
        let mut merged = serde_json::to_value(Self::preset(id, target_size))?;
        merge(&mut merged, overrides);
        Ok(serde_json::from_value(merged)?)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("class_weight", self.class_weight),
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("bn_weight", self.bn_weight),
            ("prior_weight", self.prior_weight),
            ("disc_weight", self.disc_weight),
            ("kedmi_sigma_init", self.kedmi_sigma_init),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Invalid(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        if self.candidate_multiplier < 1 {
            return Err(Error::Invalid("candidate_multiplier must be at least 1".into()));
        }
        if self.target_size == 0 {
            return Err(Error::Invalid("target_size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::Invalid("step_size must be non-negative".into()));
        }
        if self.dirichlet_peak <= 0.0 || self.dirichlet_rest <= 0.0 {
            return Err(Error::Invalid("Dirichlet concentrations must be positive".into()));
        }
        Ok(())
    }

    /// Number of candidates generated before selection.
    pub fn candidate_count(&self) -> usize {
        self.target_size * self.candidate_multiplier
    }
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_weights_are_rejected() {
        let mut c = AttackConfig::preset("deep_dream", 10);
        assert!(c.validate().is_ok());
        c.alpha_tv = -1.0;
        assert!(c.validate().is_err());
        c.alpha_tv = f32::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_merge_into_presets() {
        let v = serde_json::json!({"attack_id": "deep_dream", "iterations": 7, "gan": {"steps": 3}});
        let c = AttackConfig::from_json_with_preset(&v, 20).unwrap();
        assert_eq!(c.iterations, 7);
        assert_eq!(c.alpha_tv, AttackConfig::preset("deep_dream", 20).alpha_tv);
        assert_eq!(c.gan.steps, 3);
        assert_eq!(c.gan.top_n, 30);
        assert_eq!(c.target_size, 20);
    }
}
