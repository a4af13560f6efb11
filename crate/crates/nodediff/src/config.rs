//! Experiment configuration: named presets reproducing the published
//! hyperparameter columns for the generic-graph datasets, JSON loading with
//! preset inheritance, and cross-field validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ena::EnaConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::graph::{DatasetKind, DatasetSpec};
use crate::sampling::SolverConfig;
use crate::score_net::ScoreNetConfig;
use crate::sde::VpsdeConfig;
use crate::training::TrainConfig;
use crate::vae::{DecoderConfig, EncoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Corpus file to train on; produced by `gen-data`.
    pub data_path: Option<PathBuf>,
    /// Fraction of the corpus used for training (the rest is the test split).
    pub train_frac: f64,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub score: ScoreNetConfig,
    /// Direct node-plus-edge variant; derived from the score net when absent.
    pub ena: Option<EnaConfig>,
    pub sde: VpsdeConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub eval: EvalOptions,
    pub num_eval_samples: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Preset reproducing the hyperparameter column for a generic dataset.
    pub fn preset(kind: DatasetKind) -> Self {
        let dataset = kind.default_spec(0);
        let (enc_hidden, latent, score_hidden, heads, lr, epochs, batch, ode_tol) = match kind {
            DatasetKind::CommunitySmall => (32, 4, 16, 2, 1e-3, 4000, 8, 1e-5),
            DatasetKind::EgoSmall => (32, 4, 16, 4, 1e-3, 4000, 8, 1e-5),
            DatasetKind::Community => (64, 8, 32, 2, 1e-4, 15000, 4, 1e-4),
            DatasetKind::Ego => (64, 4, 32, 4, 1e-4, 15000, 4, 1e-4),
        };
        ExperimentConfig {
            dataset,
            data_path: None,
            train_frac: 0.8,
            encoder: EncoderConfig {
                num_layers: 3,
                hidden_dim: enc_hidden,
                latent_dim: latent,
                noise_dim: 8,
                sigma: 0.01f64.sqrt(),
                k_v: 1,
                k_e: 1,
            },
            decoder: DecoderConfig {
                num_layers: 1,
                hidden_dim: enc_hidden,
                latent_dim: latent,
                k_v: 1,
                k_e: 1,
            },
            score: ScoreNetConfig {
                num_layers: 3,
                hidden_dim: score_hidden,
                num_heads: heads,
                time_emb_dim: 16,
                latent_dim: latent,
            },
            ena: None,
            sde: VpsdeConfig::default(),
            train: TrainConfig {
                epochs,
                batch_size: batch,
                lr_vae: lr,
                lr_sgm: lr,
                weight_decay: 1e-4,
                kl_anneal_target: 1.0,
                finetune_epochs: 0,
                finetune_noise_var: 0.0,
                ..TrainConfig::default()
            },
            solver: SolverConfig::ProbabilityFlowOde {
                abs_tol: ode_tol,
                rel_tol: ode_tol,
            },
            eval: EvalOptions {
                use_largest_component: kind.is_ego(),
                ..EvalOptions::default()
            },
            num_eval_samples: 128,
            out_dir: PathBuf::from(format!("runs/{}", kind.name())),
            seed: 0,
        }
    }

    /// The node-plus-edge score network sized like the latent score net.
    pub fn ena_config(&self) -> EnaConfig {
        self.ena.unwrap_or(EnaConfig {
            num_layers: self.score.num_layers,
            hidden_dim: self.score.hidden_dim,
            num_heads: self.score.num_heads,
            time_emb_dim: self.score.time_emb_dim,
            k_v: self.encoder.k_v,
            k_e: self.encoder.k_e,
        })
    }

    /// Collect every violated field instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut collect = |r: Result<()>| {
            if let Err(Error::Config(v)) = r {
                errs.extend(v);
            }
        };
        collect(self.dataset.validate());
        collect(self.encoder.validate());
        collect(self.decoder.validate());
        collect(self.score.validate());
        collect(self.sde.validate());
        collect(self.train.validate());
        collect(self.solver.validate());
        if let Some(ena) = self.ena {
            collect(ena.validate());
        }
        let d = self.encoder.latent_dim;
        if self.decoder.latent_dim != d {
            errs.push(format!(
                "decoder.latent_dim: {} does not match encoder.latent_dim {d}",
                self.decoder.latent_dim
            ));
        }
        if self.score.latent_dim != d {
            errs.push(format!(
                "score.latent_dim: {} does not match encoder.latent_dim {d}",
                self.score.latent_dim
            ));
        }
        for (name, (a, b)) in [
            ("encoder", (self.encoder.k_v, self.encoder.k_e)),
            ("decoder", (self.decoder.k_v, self.decoder.k_e)),
        ] {
            if (a, b) != (self.encoder.k_v, self.encoder.k_e) {
                errs.push(format!("{name}: node/edge type counts disagree"));
            }
        }
        if !(0.0 < self.train_frac && self.train_frac < 1.0) {
            errs.push(format!(
                "train_frac: must be in (0, 1), got {}",
                self.train_frac
            ));
        }
        if self.num_eval_samples == 0 {
            errs.push("num_eval_samples: must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Load from JSON. A top-level `"preset"` key names a baseline config;
    /// remaining keys override it field by field (deep merge).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                message: e.to_string(),
            })?;
        let base = if let Some(name) = value
            .as_object_mut()
            .and_then(|o| o.remove("preset"))
        {
            let name = name.as_str().ok_or_else(|| Error::Config(vec![
                "preset: must be a string".into(),
            ]))?;
            let kind = DatasetKind::parse(name)?;
            Self::preset(kind)
        } else {
            return serde_json::from_value(value).map_err(|e| Error::Config(vec![format!(
                "config: {e} (hint: set \"preset\" to inherit defaults)"
            )]));
        };
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        deep_merge(&mut merged, value);
        let cfg: ExperimentConfig = serde_json::from_value(merged)
            .map_err(|e| Error::Config(vec![format!("config: {e}")]))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn deep_merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(overlay_map)) => {
            for (k, v) in overlay_map {
                match base_map.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    Some(slot) => *slot = v,
                    None => {
                        base_map.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_reproduce_table_columns() {
        let cs = ExperimentConfig::preset(DatasetKind::CommunitySmall);
        assert_eq!(cs.encoder.num_layers, 3);
        assert_eq!(cs.encoder.hidden_dim, 32);
        assert_eq!(cs.encoder.latent_dim, 4);
        assert_eq!(cs.encoder.noise_dim, 8);
        assert!((cs.encoder.sigma * cs.encoder.sigma - 0.01).abs() < 1e-12);
        assert_eq!(cs.decoder.num_layers, 1);
        assert_eq!(cs.score.num_layers, 3);
        assert_eq!(cs.score.hidden_dim, 16);
        assert_eq!(cs.score.num_heads, 2);
        assert_eq!(cs.score.time_emb_dim, 16);
        assert_eq!(cs.sde.beta0, 0.1);
        assert_eq!(cs.sde.beta1, 20.0);
        assert_eq!(cs.sde.eps_t, 0.01);
        assert_eq!(cs.train.epochs, 4000);
        assert_eq!(cs.train.batch_size, 8);
        assert_eq!(cs.train.lr_vae, 1e-3);
        assert_eq!(cs.train.weight_decay, 1e-4);
        assert_eq!(cs.train.kl_anneal_target, 1.0);
        assert_eq!(cs.train.finetune_epochs, 0);
        assert_eq!(cs.num_eval_samples, 128);
        assert_eq!(
            cs.solver,
            SolverConfig::ProbabilityFlowOde {
                abs_tol: 1e-5,
                rel_tol: 1e-5
            }
        );
        assert!(!cs.eval.use_largest_component);
        cs.validate().unwrap();

        let ego = ExperimentConfig::preset(DatasetKind::Ego);
        assert_eq!(ego.encoder.hidden_dim, 64);
        assert_eq!(ego.encoder.latent_dim, 4);
        assert_eq!(ego.score.hidden_dim, 32);
        assert_eq!(ego.score.num_heads, 4);
        assert_eq!(ego.train.lr_vae, 1e-4);
        assert_eq!(ego.train.epochs, 15000);
        assert_eq!(ego.train.batch_size, 4);
        assert!(ego.eval.use_largest_component);
        ego.validate().unwrap();

        let community = ExperimentConfig::preset(DatasetKind::Community);
        assert_eq!(community.encoder.latent_dim, 8);
        assert_eq!(community.score.num_heads, 2);
        community.validate().unwrap();
    }

    #[test]
    fn preset_inheritance_with_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{
                "preset": "community-small",
                "seed": 42,
                "train": { "epochs": 400, "max_steps": 50 },
                "out_dir": "custom"
            }"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.epochs, 400);
        assert_eq!(cfg.train.max_steps, Some(50));
        assert_eq!(cfg.train.batch_size, 8, "unset fields keep preset values");
        assert_eq!(cfg.out_dir, PathBuf::from("custom"));
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = ExperimentConfig::preset(DatasetKind::CommunitySmall);
        cfg.decoder.latent_dim = 7;
        cfg.score.latent_dim = 9;
        cfg.train_frac = 1.5;
        let err = cfg.validate().unwrap_err();
        match err {
            Error::Config(list) => {
                assert!(list.len() >= 3, "got {list:?}");
                assert!(list.iter().any(|e| e.contains("decoder.latent_dim")));
                assert!(list.iter().any(|e| e.contains("score.latent_dim")));
                assert!(list.iter().any(|e| e.contains("train_frac")));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_preset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{ "preset": "molecules" }"#).unwrap();
        assert!(matches!(
            ExperimentConfig::load(&path),
            Err(Error::Config(_))
        ));
    }
}
