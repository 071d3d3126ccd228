//! Random sub-model self-distillation objective: cross-entropy on the final
//! logits plus a weighted KL term pulling one sampled sub-model toward the
//! final classifier's softened distribution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::vit::ForwardTrace;

/// Which sub-model(s) receive the distillation signal at a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockSelection {
    /// Plain ERM: no distillation term.
    None,
    /// One block drawn uniformly from `lo..=hi` per step.
    RandomRange { lo: usize, hi: usize },
    /// Every block every step, KL averaged over blocks.
    AllBlocks,
}

impl BlockSelection {
    /// Uniform over every block of an `num_blocks`-block model.
    pub fn full(num_blocks: usize) -> Self {
        Self::RandomRange {
            lo: 0,
            hi: num_blocks.saturating_sub(1),
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if let Self::RandomRange { lo, hi } = *self {
            if lo > hi || hi >= num_blocks {
                return Err(Error::Config(format!(
                    "selection range {lo}-{hi} invalid for {num_blocks} blocks"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for BlockSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::RandomRange { lo, hi } => write!(f, "range:{lo}-{hi}"),
            Self::AllBlocks => f.write_str("all"),
        }
    }
}

impl FromStr for BlockSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "all" => Ok(Self::AllBlocks),
            other => {
                let bad = || Error::Config(format!("unrecognized selection {other:?}"));
                let range = other.strip_prefix("range:").ok_or_else(bad)?;
                let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
                let lo = lo.trim().parse().map_err(|_| bad())?;
                let hi = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                Ok(Self::RandomRange { lo, hi })
            }
        }
    }
}

impl Serialize for BlockSelection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockSelection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub tau: f64,
    pub detach_teacher: bool,
    pub selection: BlockSelection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            tau: 5.0,
            detach_teacher: true,
            selection: BlockSelection::full(6),
        }
    }
}

impl DistillConfig {
    pub fn erm() -> Self {
        Self {
            lambda: 0.0,
            selection: BlockSelection::None,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        self.selection.validate(num_blocks)
    }

    /// Whether the KL branch contributes to the loss at all.
    pub fn distills(&self) -> bool {
        self.lambda > 0.0 && self.selection != BlockSelection::None
    }
}

/// Outcome of one draw from a [`BlockSelection`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selected {
    Nothing,
    Block(usize),
    All,
}

/// Draws the sub-model for this step. `None` never touches `rng`.
pub fn select_block<R: Rng + ?Sized>(selection: &BlockSelection, rng: &mut R) -> Selected {
    match *selection {
        BlockSelection::None => Selected::Nothing,
        BlockSelection::RandomRange { lo, hi } => Selected::Block(rng.random_range(lo..=hi)),
        BlockSelection::AllBlocks => Selected::All,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Unweighted KL term, when computed.
    pub kl: Option<f64>,
    pub selected: Selected,
    pub total: f64,
}

/// `ce + lambda * kl` for one forward trace. When distillation is off
/// (lambda 0 or no selection) the graph is exactly the cross-entropy graph.
pub fn sdvit_loss<'t, R: Rng + ?Sized>(
    trace: &ForwardTrace<'t>,
    labels: &[usize],
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<(Var<'t>, LossBreakdown)> {
    let ce = trace.logits.cross_entropy(labels)?;
    let ce_value = ce.value().item()?;
    if !cfg.distills() {
        return Ok((
            ce,
            LossBreakdown {
                ce: ce_value,
                kl: None,
                selected: Selected::Nothing,
                total: ce_value,
            },
        ));
    }
    let selected = select_block(&cfg.selection, rng);
    let kl_for = |block: usize| -> Result<Var<'t>> {
        let student = trace.sub_model_logits(block)?;
        trace
            .logits
            .kl_divergence(student, cfg.tau, cfg.detach_teacher)
    };
    let kl = match selected {
        Selected::Block(i) => kl_for(i)?,
        Selected::All => {
            let n = trace.class_tokens.len();
            let mut acc = kl_for(0)?;
            for i in 1..n {
                acc = acc.add(kl_for(i)?)?;
            }
            acc.scale(1.0 / n as f64)
        }
        Selected::Nothing => unreachable!("distilling selections always pick something"),
    };
    let kl_value = kl.value().item()?;
    let total = ce.add(kl.scale(cfg.lambda))?;
    let total_value = total.value().item()?;
    Ok((
        total,
        LossBreakdown {
            ce: ce_value,
            kl: Some(kl_value),
            selected,
            total: total_value,
        },
    ))
}
