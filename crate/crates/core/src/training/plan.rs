use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    PretrainAe,
    PretrainCls,
    Unpaired,
    Paired,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::PretrainAe => "pretrain_ae",
            StageId::PretrainCls => "pretrain_cls",
            StageId::Unpaired => "unpaired",
            StageId::Paired => "paired",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [StageId::PretrainAe, StageId::PretrainCls, StageId::Unpaired, StageId::Paired]
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub id: StageId,
    /// Whether batches are drawn from paired quadruples.
    pub paired_data: bool,
    pub epochs: usize,
}

impl Stage {
    /// Label used for checkpoints and logs, e.g. `pretrain_ae_paired`.
    pub fn label(&self) -> String {
        match (self.id, self.paired_data) {
            (StageId::PretrainAe | StageId::PretrainCls, true) => format!("{}_paired", self.id),
            (StageId::PretrainAe | StageId::PretrainCls, false) => format!("{}_unpaired", self.id),
            _ => self.id.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::with_epochs([5, 20, 20, 50, 100, 80])
    }
}

impl StagePlan {
    /// The six-stage schedule with the given epoch counts.
    pub fn with_epochs(epochs: [usize; 6]) -> Self {
        let kinds = [
            (StageId::PretrainAe, true),
            (StageId::PretrainAe, false),
            (StageId::PretrainCls, true),
            (StageId::PretrainCls, false),
            (StageId::Unpaired, false),
            (StageId::Paired, true),
        ];
        Self {
            stages: kinds
                .into_iter()
                .zip(epochs)
                .map(|((id, paired_data), epochs)| Stage { id, paired_data, epochs })
                .collect(),
        }
    }

    /// Reduced schedule for single-core runs.
    pub fn scaled() -> Self {
        Self::with_epochs([2, 5, 5, 10, 20, 20])
    }

    /// Keeps only stages whose id is listed, in plan order.
    pub fn restricted_to(&self, ids: &[StageId]) -> Self {
        Self {
            stages: self.stages.iter().filter(|s| ids.contains(&s.id)).copied().collect(),
        }
    }

    /// Stages must not move backwards through the schedule and paired
    /// training needs paired data.
    pub fn validate(&self) -> Result<()> {
        for w in self.stages.windows(2) {
            if w[1].id < w[0].id {
                return Err(Error::Config(format!("stage {} cannot follow {}", w[1].id, w[0].id)));
            }
        }
        if self.stages.iter().any(|s| s.id == StageId::Paired && !s.paired_data) {
            return Err(Error::Config("paired training requires paired data".into()));
        }
        if self.stages.iter().any(|s| s.id == StageId::Unpaired && s.paired_data) {
            return Err(Error::Config("unpaired training draws unpaired data".into()));
        }
        Ok(())
    }
}
