use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_cifar10_binary, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::merge::ExactMode;
use crate::progressive::ProgressiveConfig;
use crate::search::SearchConfig;
use crate::supernet::{PruneMask, SupernetConfig};
use crate::zoo::ArchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// CIFAR-10 binary batches. Without a test file the validation set is
    /// held out from the end of the training data.
    Cifar10 {
        train: Vec<PathBuf>,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub arch: ArchConfig,
    pub dataset: DatasetSpec,
    /// Samples held out for validation, fitness and verification.
    #[serde(default = "default_val_samples")]
    pub val_samples: usize,
    pub supernet: SupernetConfig,
    /// The `k` and `seed` fields are overridden by the pipeline.
    pub search: SearchConfig,
    /// The `seed` field is overridden by the pipeline.
    pub subnet: ProgressiveConfig,
    /// Number of blocks to prune.
    pub k: usize,
    /// Root seed; every stage derives its own from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Explicit mask: skips supernet training and search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PruneMask>,
    #[serde(default)]
    pub exact_mode: ExactMode,
    /// Validation images fed to the equivalence check.
    #[serde(default = "default_verify_samples")]
    pub verify_samples: usize,
    /// Also train the subnet directly (λ = 1 throughout) for comparison.
    #[serde(default)]
    pub compare_direct: bool,
}

fn default_val_samples() -> usize {
    500
}

fn default_verify_samples() -> usize {
    32
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.supernet.optim.validate()?;
        self.subnet.optim.validate()?;
        self.subnet.schedule.validate()?;
        self.search_config().validate()?;
        if self.val_samples == 0 {
            return Err(Error::Config("val_samples must be positive".into()));
        }
        if let Some(m) = &self.mask {
            if m.popcount() == 0 {
                return Err(Error::Config("an explicit mask must prune at least one block".into()));
            }
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            k: self.k,
            seed: stage_seed(self.seed, "search"),
            ..self.search.clone()
        }
    }

    pub fn supernet_config(&self) -> SupernetConfig {
        SupernetConfig {
            seed: stage_seed(self.seed, "train-supernet"),
            ..self.supernet.clone()
        }
    }

    pub fn subnet_config(&self, direct: bool) -> ProgressiveConfig {
        ProgressiveConfig {
            direct,
            seed: stage_seed(self.seed, "train-subnet"),
            ..self.subnet.clone()
        }
    }

    /// Training and validation sets. Referenced files must exist.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = match &self.dataset {
            DatasetSpec::Synthetic(spec) => {
                let all = generate_synthetic(spec)?;
                if all.len() <= self.val_samples {
                    return Err(Error::Config(format!(
                        "{} synthetic samples leave nothing to train on after holding out {}",
                        all.len(),
                        self.val_samples
                    )));
                }
                all.split(all.len() - self.val_samples)
            }
            DatasetSpec::Cifar10 { train, test } => {
                if train.is_empty() {
                    return Err(Error::Config("cifar10 needs at least one training batch file".into()));
                }
                for p in train.iter().chain(test) {
                    if !p.exists() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                let mut all = load_cifar10_binary(&train[0])?;
                for p in &train[1..] {
                    all = all.concat(&load_cifar10_binary(p)?)?;
                }
                match test {
                    Some(t) => {
                        let val = load_cifar10_binary(t)?;
                        let n = self.val_samples.min(val.len());
                        (all, val.split(n).0)
                    }
                    None => {
                        if all.len() <= self.val_samples {
                            return Err(Error::Config("training data too small for the validation hold-out".into()));
                        }
                        all.split(all.len() - self.val_samples)
                    }
                }
            }
        };
        let [c, h, w] = train.shape;
        let want = self.arch.resolution;
        if c != 3 || h != want || w != want {
            return Err(Error::Config(format!(
                "dataset images are {c}×{h}×{w} but the architecture expects 3×{want}×{want}"
            )));
        }
        if train.classes != self.arch.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the architecture has {}",
                train.classes, self.arch.classes
            )));
        }
        Ok((train, val))
    }
}

/// Per-stage seed: SplitMix64 of the root seed xor the FNV-1a hash of `label`.
pub fn stage_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = (root ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainSupernet,
    Search,
    TrainSubnet,
    Merge,
    Verify,
    Flops,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::TrainSupernet,
        Stage::Search,
        Stage::TrainSubnet,
        Stage::Merge,
        Stage::Verify,
        Stage::Flops,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainSupernet => "train-supernet",
            Stage::Search => "search",
            Stage::TrainSubnet => "train-subnet",
            Stage::Merge => "merge",
            Stage::Verify => "verify",
            Stage::Flops => "flops",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
            Error::Config(format!("unknown stage `{s}`; expected one of {}", names.join(", ")))
        })
    }
}
