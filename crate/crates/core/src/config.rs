//! Training configuration with defaults and strict JSON parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{LambdaMode, LambdaState};
use crate::diff::AdamHyper;
use crate::error::{Error, Result};
use crate::graph::SigmaRule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Per-patch MLP, attention pooling.
    #[serde(rename = "abmil")]
    Abmil,
    #[serde(rename = "abmil+jigsaw")]
    AbmilJigsaw,
    /// Graph attention encoder, mean pooling.
    #[serde(rename = "graph-mil")]
    GraphMil,
    #[serde(rename = "graph-abmil")]
    GraphAbmil,
    #[default]
    #[serde(rename = "graph-abmil+jigsaw")]
    GraphAbmilJigsaw,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Abmil,
        ModelVariant::AbmilJigsaw,
        ModelVariant::GraphMil,
        ModelVariant::GraphAbmil,
        ModelVariant::GraphAbmilJigsaw,
    ];

    pub fn uses_graph(self) -> bool {
        matches!(
            self,
            ModelVariant::GraphMil | ModelVariant::GraphAbmil | ModelVariant::GraphAbmilJigsaw
        )
    }

    pub fn uses_attention(self) -> bool {
        self != ModelVariant::GraphMil
    }

    pub fn has_aux(self) -> bool {
        matches!(
            self,
            ModelVariant::AbmilJigsaw | ModelVariant::GraphAbmilJigsaw
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Abmil => "abmil",
            ModelVariant::AbmilJigsaw => "abmil+jigsaw",
            ModelVariant::GraphMil => "graph-mil",
            ModelVariant::GraphAbmil => "graph-abmil",
            ModelVariant::GraphAbmilJigsaw => "graph-abmil+jigsaw",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxTask {
    /// Grid-cell prediction.
    Positional,
    /// Real-versus-shuffled discrimination.
    Consistency,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k_nn: usize,
    #[serde(rename = "grid_G")]
    pub grid_g: usize,
    pub mask_keep_rate: f64,
    pub model_variant: ModelVariant,
    /// Derived from the variant when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_task: Option<AuxTask>,
    pub lambda_mode: LambdaMode,
    pub lambda_fixed: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub n_lambda: usize,
    pub gat_hidden: usize,
    pub gat_layers: usize,
    pub d4: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub sigma_rule: SigmaRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_nn: 50,
            grid_g: 10,
            mask_keep_rate: 0.9,
            model_variant: ModelVariant::default(),
            aux_task: None,
            lambda_mode: LambdaMode::Em,
            lambda_fixed: 1.0,
            lambda_alpha: 1.0,
            lambda_beta: 1.0,
            n_lambda: 1,
            gat_hidden: 256,
            gat_layers: 2,
            d4: 128,
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 20,
            seed: 42,
            sigma_rule: SigmaRule::Main,
        }
    }
}

impl TrainConfig {
    /// Parses a JSON object; unknown keys and bad values name the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("config key `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// The auxiliary task in effect for the variant.
    pub fn aux(&self) -> AuxTask {
        match (self.aux_task, self.model_variant.has_aux()) {
            (Some(t), _) => t,
            (None, true) => AuxTask::Positional,
            (None, false) => AuxTask::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("config key `{key}`: {msg}")));
        if self.k_nn == 0 {
            return bad("k_nn", "must be at least 1".into());
        }
        if self.grid_g == 0 {
            return bad("grid_G", "must be at least 1".into());
        }
        if !(self.mask_keep_rate > 0.0 && self.mask_keep_rate <= 1.0) {
            return bad(
                "mask_keep_rate",
                format!("{} not in (0,1]", self.mask_keep_rate),
            );
        }
        match (self.aux_task, self.model_variant.has_aux()) {
            (Some(AuxTask::None), true) => {
                return bad(
                    "aux_task",
                    format!(
                        "variant {} needs an auxiliary task",
                        self.model_variant.name()
                    ),
                )
            }
            (Some(t), false) if t != AuxTask::None => {
                return bad(
                    "aux_task",
                    format!(
                        "variant {} has no auxiliary head",
                        self.model_variant.name()
                    ),
                )
            }
            _ => {}
        }
        if !(self.lambda_fixed >= 0.0 && self.lambda_fixed.is_finite()) {
            return bad(
                "lambda_fixed",
                format!("{} must be finite and ≥ 0", self.lambda_fixed),
            );
        }
        for (key, v) in [
            ("lambda_alpha", self.lambda_alpha),
            ("lambda_beta", self.lambda_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("{v} must be finite and > 0"));
            }
        }
        for (key, v) in [
            ("n_lambda", self.n_lambda),
            ("gat_hidden", self.gat_hidden),
            ("gat_layers", self.gat_layers),
            ("d4", self.d4),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be finite and > 0", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("{} must be finite and ≥ 0", self.weight_decay),
            );
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    pub fn lambda_state(&self) -> Result<LambdaState> {
        match self.lambda_mode {
            LambdaMode::Fixed => LambdaState::fixed(self.lambda_fixed),
            LambdaMode::Em => LambdaState::em(self.lambda_alpha, self.lambda_beta, self.n_lambda),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = TrainConfig::parse("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(
            (c.k_nn, c.grid_g, c.lr, c.weight_decay),
            (50, 10, 1e-4, 1e-5)
        );
        assert_eq!(
            (c.gat_hidden, c.gat_layers, c.d4, c.epochs),
            (256, 2, 128, 20)
        );
        assert_eq!(c.mask_keep_rate, 0.9);
        assert_eq!(c.aux(), AuxTask::Positional);
    }

    #[test]
    fn keys_parse() {
        let c = TrainConfig::parse(
            r#"{"model_variant": "graph-mil", "grid_G": 4, "sigma_rule": "appendix",
                "lambda_mode": "fixed", "lambda_fixed": 0.5, "seed": 7}"#,
        )
        .unwrap();
        assert_eq!(c.model_variant, ModelVariant::GraphMil);
        assert_eq!(c.grid_g, 4);
        assert_eq!(c.sigma_rule, SigmaRule::Appendix);
        assert_eq!(c.aux(), AuxTask::None);
        assert_eq!(c.lambda_state().unwrap().lambda(), 0.5);
        let back = TrainConfig::parse(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn floats_survive_a_json_round_trip() {
        let c = TrainConfig::parse(r#"{"lambda_beta": 33333333333333333333333333333330}"#).unwrap();
        assert_eq!(c.lambda_beta, 3.3333333333333334e31);
        assert_eq!(TrainConfig::parse(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            (r#"{"k_nn": "fifty"}"#, "k_nn"),
            (r#"{"learning_rate": 0.1}"#, "learning_rate"),
            (r#"{"lr": -1.0}"#, "lr"),
            (r#"{"grid_G": 0}"#, "grid_G"),
            (
                r#"{"model_variant": "abmil", "aux_task": "positional"}"#,
                "aux_task",
            ),
            (r#"{"aux_task": "none"}"#, "aux_task"),
            (r#"{"mask_keep_rate": 0.0}"#, "mask_keep_rate"),
        ];
        for (text, key) in cases {
            match TrainConfig::parse(text) {
                Err(Error::Config(msg)) => assert!(msg.contains(key), "{msg} lacks {key}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("gcn".parse::<ModelVariant>().is_err());
    }
}
