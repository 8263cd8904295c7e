use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inclusive range of 1-based denoising steps, counted in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepWindow {
    pub lo: usize,
    pub hi: usize,
}

impl StepWindow {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "bad step window [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.lo..=self.hi).contains(&step)
    }

    pub fn len(&self) -> usize {
        self.hi + 1 - self.lo
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for StepWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lo, self.hi)
    }
}

/// U-Net blocks in forward order. Each block ends in one self-attention and one
/// cross-attention layer running at the block's output resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    Down1,
    Down2,
    Mid,
    Up1,
    Up2,
}

impl BlockId {
    pub const ALL: [BlockId; 5] = [
        BlockId::Down1,
        BlockId::Down2,
        BlockId::Mid,
        BlockId::Up1,
        BlockId::Up2,
    ];

    /// Spatial side of the block output.
    pub fn resolution(self) -> usize {
        match self {
            BlockId::Down1 | BlockId::Up1 => 32,
            BlockId::Down2 | BlockId::Mid => 16,
            BlockId::Up2 => 64,
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            BlockId::Down1 => 16,
            BlockId::Down2 => 32,
            BlockId::Mid | BlockId::Up1 => 64,
            BlockId::Up2 => 32,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            BlockId::Down1 | BlockId::Up1 => 32,
            BlockId::Down2 | BlockId::Mid => 64,
            BlockId::Up2 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockId::Down1 => "down64_32",
            BlockId::Down2 => "down32_16",
            BlockId::Mid => "mid16",
            BlockId::Up1 => "up16_32",
            BlockId::Up2 => "up32_64",
        }
    }
}

/// Which steps of which branch get recorded.
///
/// Features come from the image-only branch `(c_I, ∅)`; cross-attention maps from
/// the fully conditioned branch `(c_I, c_T)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptureConfig {
    pub features: Option<StepWindow>,
    pub attn: Option<StepWindow>,
}

impl CaptureConfig {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Recorded block outputs `H_b×W_b×C_b` and cross-attention maps `H_b×W_b×D`,
/// keyed by `(step, block)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookRecord {
    pub features: BTreeMap<(usize, BlockId), Tensor>,
    pub attn: BTreeMap<(usize, BlockId), Tensor>,
}

impl HookRecord {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty() && self.attn.is_empty()
    }

    /// Merge another record in. Keys are disjoint in normal operation; on a clash
    /// the incoming entry wins.
    pub fn merge(&mut self, other: HookRecord) {
        self.features.extend(other.features);
        self.attn.extend(other.attn);
    }

    pub fn feature_steps(&self, block: BlockId) -> Vec<usize> {
        steps_of(&self.features, block)
    }

    pub fn attn_steps(&self, block: BlockId) -> Vec<usize> {
        steps_of(&self.attn, block)
    }
}

fn steps_of(map: &BTreeMap<(usize, BlockId), Tensor>, block: BlockId) -> Vec<usize> {
    map.keys()
        .filter(|(_, b)| *b == block)
        .map(|(s, _)| *s)
        .collect()
}
