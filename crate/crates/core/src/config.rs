//! Flat, commented key-value run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoopError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub d: usize,
    pub tau: usize,
    pub n_fresh: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub caa_block: usize,
    pub n_classes: usize,

    pub sigma_keep: f64,
    pub miss_patience: u32,
    pub match_threshold: f64,
    pub gate_radius: f64,
    pub label_gate: f64,

    pub lambda_bbx: f64,
    pub lambda_cls: f64,
    pub lambda_asso: f64,
    pub cls_alpha: f64,
    pub cls_gamma: f64,
    pub asso_alpha: f64,
    pub asso_gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub freeze_stage1: bool,
    pub teacher_forcing: f64,
    pub train_scenarios: usize,
    pub eval_scenarios: usize,

    pub frame_rate: f64,
    pub duration: f64,
    pub n_cars: usize,
    pub n_pedestrians: usize,
    pub n_trucks: usize,
    pub ego_speed: f64,
    pub vehicle_range: [f64; 4],
    pub infra_range: [f64; 4],
    pub height_range: [f64; 2],
    pub sigma_pos: f64,
    pub sigma_dim: f64,
    pub sigma_yaw: f64,
    pub sigma_vel: f64,
    pub sigma_feat: f64,
    pub miss_rate: f64,
    pub clutter_rate: f64,
    pub domain_gap: bool,
    pub domain_seed: u64,
    pub vehicle_occlusion: bool,
    pub scenario_file: String,

    pub eval_classes: Vec<usize>,
    pub eval_radius: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            d: 32,
            tau: 4,
            n_fresh: 50,
            heads: 4,
            ffn_mult: 4,
            caa_block: 8,
            n_classes: 3,
            sigma_keep: 0.4,
            miss_patience: 5,
            match_threshold: 0.5,
            gate_radius: 4.0,
            label_gate: 2.0,
            lambda_bbx: 0.25,
            lambda_cls: 2.0,
            lambda_asso: 10.0,
            cls_alpha: 0.25,
            cls_gamma: 2.0,
            asso_alpha: 0.5,
            asso_gamma: 1.0,
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 0.0,
            epochs_stage1: 10,
            epochs_stage2: 10,
            freeze_stage1: false,
            teacher_forcing: 1.0,
            train_scenarios: 20,
            eval_scenarios: 20,
            frame_rate: 10.0,
            duration: 6.0,
            n_cars: 24,
            n_pedestrians: 4,
            n_trucks: 4,
            ego_speed: 5.0,
            vehicle_range: [-51.2, 51.2, -51.2, 51.2],
            infra_range: [0.0, 102.4, -51.2, 51.2],
            height_range: [-5.0, 3.0],
            sigma_pos: 0.5,
            sigma_dim: 0.1,
            sigma_yaw: 0.1,
            sigma_vel: 0.3,
            sigma_feat: 0.1,
            miss_rate: 0.1,
            clutter_rate: 0.1,
            domain_gap: true,
            domain_seed: 1234,
            vehicle_occlusion: true,
            scenario_file: String::new(),
            eval_classes: vec![0],
            eval_radius: 2.0,
        }
    }
}

/// One comment line per key, in emission order.
const FIELD_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed for scenario generation, initialization and training order"),
    ("d", "instance feature width"),
    ("tau", "history frames kept per instance"),
    ("n_fresh", "fresh query slots per frame"),
    ("heads", "attention heads in the temporal blocks"),
    ("ffn_mult", "feed-forward width as a multiple of d"),
    ("caa_block", "block size k of the latent alignment map (d must be divisible by k)"),
    ("n_classes", "object classes (car, pedestrian, truck)"),
    ("sigma_keep", "score needed to keep or spawn a track"),
    ("miss_patience", "frames a track may stay below sigma_keep before removal"),
    ("match_threshold", "minimum affinity for a cross-agent match"),
    ("gate_radius", "meters; detection binding gate and supervision gate"),
    ("label_gate", "meters; center gate for association labels"),
    ("lambda_bbx", "box regression loss weight"),
    ("lambda_cls", "classification loss weight"),
    ("lambda_asso", "association loss weight"),
    ("cls_alpha", "focal alpha for classification"),
    ("cls_gamma", "focal gamma for classification"),
    ("asso_alpha", "focal alpha for association"),
    ("asso_gamma", "focal gamma for association"),
    ("lr", "base learning rate (cosine annealed)"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("grad_clip", "global gradient norm limit, 0 disables"),
    ("epochs_stage1", "passes over the training scenarios, single-agent stage"),
    ("epochs_stage2", "passes over the training scenarios, cooperative stage"),
    ("freeze_stage1", "keep single-agent weights fixed during the cooperative stage"),
    ("teacher_forcing", "fraction of cooperative training frames routed by labels instead of predicted affinity"),
    ("train_scenarios", "scenarios in the training split"),
    ("eval_scenarios", "scenarios in the evaluation split"),
    ("frame_rate", "Hz"),
    ("duration", "seconds per scenario"),
    ("n_cars", "cars per scenario"),
    ("n_pedestrians", "pedestrians per scenario"),
    ("n_trucks", "parked trucks per scenario (roadside occluders)"),
    ("ego_speed", "m/s along the ego lane"),
    ("vehicle_range", "vehicle perception range [x_min, x_max, y_min, y_max], meters"),
    ("infra_range", "infrastructure perception range in its own frame, meters"),
    ("height_range", "perception height range [z_min, z_max], meters"),
    ("sigma_pos", "detector position noise, meters"),
    ("sigma_dim", "detector size noise, meters"),
    ("sigma_yaw", "detector heading noise, radians"),
    ("sigma_vel", "detector velocity noise, m/s"),
    ("sigma_feat", "detector latent feature noise"),
    ("miss_rate", "probability a visible object is not detected"),
    ("clutter_rate", "expected false detections per frame and agent"),
    ("domain_gap", "apply per-agent latent domain operators"),
    ("domain_seed", "seed of the fixed per-agent domain operators"),
    ("vehicle_occlusion", "hide objects shadowed by nearer ones from the vehicle"),
    ("scenario_file", "optional path to a scenario spec overriding the scenario keys above"),
    ("eval_classes", "class ids scored by the metrics"),
    ("eval_radius", "meters; center-distance radius for tracking metrics"),
];

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(|e| CoopError::Parse {
            context: "config".into(),
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| CoopError::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            CoopError::Parse { message, .. } => CoopError::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Emits every key with a comment line above it.
    pub fn to_commented_toml(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serializes");
        let mut out = String::from("# cooptrack run configuration\n");
        for (key, doc) in FIELD_DOCS {
            let value = &table[*key];
            out.push_str(&format!("\n# {doc}\n{key} = {value}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_commented_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoopError::Config(m));
        if self.d == 0 || self.d % 2 != 0 {
            return fail(format!("d must be even and positive, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        if self.caa_block == 0 || self.d % self.caa_block != 0 {
            return fail(format!("d={} not divisible by caa_block={}", self.d, self.caa_block));
        }
        if self.n_classes == 0 || self.ffn_mult == 0 {
            return fail("n_classes and ffn_mult must be positive".into());
        }
        for (name, v) in [
            ("sigma_keep", self.sigma_keep),
            ("match_threshold", self.match_threshold),
            ("cls_alpha", self.cls_alpha),
            ("asso_alpha", self.asso_alpha),
            ("teacher_forcing", self.teacher_forcing),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name}={v} outside [0, 1]"));
            }
        }
        for (name, v) in [("miss_rate", self.miss_rate)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name}={v} outside [0, 1)"));
            }
        }
        for (name, v) in [
            ("gate_radius", self.gate_radius),
            ("label_gate", self.label_gate),
            ("frame_rate", self.frame_rate),
            ("duration", self.duration),
            ("eval_radius", self.eval_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("clutter_rate", self.clutter_rate),
            ("sigma_pos", self.sigma_pos),
            ("sigma_dim", self.sigma_dim),
            ("sigma_yaw", self.sigma_yaw),
            ("sigma_vel", self.sigma_vel),
            ("sigma_feat", self.sigma_feat),
            ("lambda_bbx", self.lambda_bbx),
            ("lambda_cls", self.lambda_cls),
            ("lambda_asso", self.lambda_asso),
            ("cls_gamma", self.cls_gamma),
            ("asso_gamma", self.asso_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("AdamW betas must lie in [0, 1)".into());
        }
        for (name, r) in [("vehicle_range", &self.vehicle_range), ("infra_range", &self.infra_range)] {
            if !(r[0] < r[1] && r[2] < r[3]) {
                return fail(format!("{name} must be ordered min < max, got {r:?}"));
            }
        }
        if self.height_range[0] >= self.height_range[1] {
            return fail(format!("height_range must be ordered, got {:?}", self.height_range));
        }
        if self.eval_classes.iter().any(|&c| c >= self.n_classes) {
            return fail(format!("eval_classes {:?} exceed n_classes", self.eval_classes));
        }
        Ok(())
    }

    /// Frames per scenario implied by duration and rate.
    pub fn n_frames(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let text = c.to_commented_toml();
        assert!(text.lines().filter(|l| l.starts_with('#')).count() > 40);
        assert_eq!(Config::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn every_field_is_documented() {
        let table = toml::Table::try_from(Config::default()).unwrap();
        assert_eq!(table.len(), FIELD_DOCS.len());
        for key in table.keys() {
            assert!(FIELD_DOCS.iter().any(|(k, _)| k == key), "{key} undocumented");
        }
    }

    #[test]
    fn loss_and_optimizer_defaults() {
        let c = Config::default();
        assert_eq!((c.lambda_bbx, c.lambda_cls, c.lambda_asso), (0.25, 2.0, 10.0));
        assert_eq!((c.cls_alpha, c.cls_gamma, c.asso_alpha, c.asso_gamma), (0.25, 2.0, 0.5, 1.0));
        assert_eq!((c.lr, c.weight_decay), (2e-4, 0.01));
        assert_eq!(c.vehicle_range, [-51.2, 51.2, -51.2, 51.2]);
        assert_eq!(c.infra_range, [0.0, 102.4, -51.2, 51.2]);
        assert_eq!(c.tau, 4);
    }

    #[test]
    fn partial_file_uses_defaults_and_rejects_bad_values() {
        let c = Config::from_toml_str("tau = 2\nseed = 3 # inline comment\n").unwrap();
        assert_eq!((c.tau, c.seed, c.d), (2, 3, 32));
        assert!(matches!(Config::from_toml_str("d = 30\ncaa_block = 8"), Err(CoopError::Config(_))));
        assert!(matches!(Config::from_toml_str("nonsense = 1"), Err(CoopError::Parse { .. })));
        assert!(Config::from_toml_str("vehicle_range = [1.0, 0.0, -1.0, 1.0]").is_err());
    }
}
