use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use debcat_core::cdm::{CdmKind, PretrainConfig};
use debcat_core::debias::StrategyKind;
use debcat_core::io::{json_hash, sha256_hex};
use debcat_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a command needs. Loaded from JSON, then overridden by flags.
///
/// The top-level `seed` and `cdm` replace the corresponding fields of the
/// nested sections, so one value drives the split, pretraining and training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Interaction log (`examinee_id,question_id,correct,concept_ids`).
    pub data: Option<PathBuf>,
    pub cdm: CdmKind,
    pub seed: u64,
    /// Train / valid / test shares of examinees.
    pub split: [f64; 3],
    pub min_interactions: usize,
    pub out: PathBuf,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ood: bool,
    /// Episode length at evaluation; defaults to `train.t`.
    pub t: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            cdm: CdmKind::Irt,
            seed: 0,
            split: [0.6, 0.2, 0.2],
            min_interactions: 40,
            out: PathBuf::from("runs"),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Flags shared by the pipeline commands.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Interaction log to read.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ERM, IRM, GroupDRO, Reweight, MixupB, MixupSelf or MixupInner.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long = "mixup-alpha")]
    pub mixup_alpha: Option<f64>,
    /// Questions per episode.
    #[arg(long)]
    pub t: Option<usize>,
    /// Evaluate on label-balanced meta sets.
    #[arg(long)]
    pub ood: bool,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// Arguments reproducing these overrides, for child processes.
    pub fn to_args(&self) -> Vec<String> {
        let mut a = Vec::new();
        let mut push = |flag: &str, v: Option<String>| {
            if let Some(v) = v {
                a.push(flag.to_string());
                a.push(v);
            }
        };
        push("--config", self.config.as_ref().map(|p| p.display().to_string()));
        push("--data", self.data.as_ref().map(|p| p.display().to_string()));
        push("--seed", self.seed.map(|v| v.to_string()));
        push("--strategy", self.strategy.clone());
        push("--omega", self.omega.map(|v| v.to_string()));
        push("--mixup-alpha", self.mixup_alpha.map(|v| v.to_string()));
        push("--t", self.t.map(|v| v.to_string()));
        push("--out", self.out.as_ref().map(|p| p.display().to_string()));
        if self.ood {
            a.push("--ood".into());
        }
        a
    }
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut c = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = &o.data {
            c.data = Some(d.clone());
        }
        if let Some(s) = o.seed {
            c.seed = s;
        }
        if let Some(s) = &o.strategy {
            c.train.strategy = s.parse::<StrategyKind>()?;
        }
        if let Some(w) = o.omega {
            c.train.omega = w;
        }
        if let Some(a) = o.mixup_alpha {
            c.train.mixup_alpha = a;
        }
        if let Some(t) = o.t {
            c.train.t = t;
        }
        if o.ood {
            c.eval.ood = true;
        }
        if let Some(out) = &o.out {
            c.out = out.clone();
        }
        c.pretrain.kind = c.cdm;
        c.pretrain.seed = c.seed;
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.min_interactions == 0 {
            bail!("min_interactions must be at least 1");
        }
        if self.split.iter().any(|r| !(0.0..=1.0).contains(r)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!("split shares must lie in [0, 1] and sum to 1, got {:?}", self.split);
        }
        if self.eval.t == Some(0) {
            bail!("eval.t must be at least 1");
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn data_path(&self) -> anyhow::Result<&Path> {
        match &self.data {
            Some(p) if p.is_file() => Ok(p),
            Some(p) => bail!("data file {} does not exist", p.display()),
            None => bail!("no data file given (set \"data\" in the config or pass --data)"),
        }
    }

    pub fn eval_t(&self) -> usize {
        self.eval.t.unwrap_or(self.train.t)
    }

    /// Directory of the pretrained model, keyed by the data and every
    /// setting that affects it.
    pub fn cdm_dir(&self) -> anyhow::Result<PathBuf> {
        let bytes = std::fs::read(self.data_path()?)?;
        let key = serde_json::json!({
            "data": sha256_hex(&bytes),
            "split": self.split,
            "min_interactions": self.min_interactions,
            "pretrain": self.pretrain,
        });
        Ok(self.out.join(format!("cdm-{}", &json_hash(&key)[..12])))
    }

    /// Directory of a training run.
    pub fn run_dir(&self) -> anyhow::Result<PathBuf> {
        let cdm = self.cdm_dir()?;
        let key = serde_json::json!({
            "cdm": cdm.file_name().map(|n| n.to_string_lossy().into_owned()),
            "train": self.train,
        });
        Ok(self.out.join(format!(
            "run-{}-{}",
            self.train.strategy,
            &json_hash(&key)[..12]
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 4, "train": {"omega": 0.2, "t": 5}}"#).unwrap();
        let o = Overrides {
            config: Some(path),
            omega: Some(0.8),
            strategy: Some("erm".into()),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.train.omega, 0.8);
        assert_eq!(c.train.t, 5);
        assert_eq!(c.train.strategy, StrategyKind::Erm);
        assert_eq!(c.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"omegaa": 0.2}}"#).unwrap();
        let o = Overrides {
            config: Some(path),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(&o).is_err());
    }

    #[test]
    fn overrides_roundtrip_to_args() {
        let o = Overrides {
            seed: Some(3),
            omega: Some(0.4),
            ood: true,
            ..Overrides::default()
        };
        assert_eq!(o.to_args(), ["--seed", "3", "--omega", "0.4", "--ood"]);
    }
}
