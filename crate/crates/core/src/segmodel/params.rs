//! Flat parameter storage partitioned into named blocks.

use serde::{Deserialize, Serialize};

/// What a block of parameters is used for. Drives which gradient blocks are
/// projected (GPM) and which are counted toward model size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockRole {
    /// `[out, in, k, k]` convolution kernel.
    ConvWeight,
    ConvBias,
    /// One output channel of a 1×1 classification head: `[in]`.
    HeadWeight,
    HeadBias,
    /// Lateral 1×1 connection between progressive columns: `[out, in]`.
    Adapter,
    /// Per-task filter recombination `[out, out]`.
    Controller,
    ControllerBias,
}

impl BlockRole {
    pub fn is_head(self) -> bool {
        matches!(self, BlockRole::HeadWeight | BlockRole::HeadBias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub offset: usize,
    pub len: usize,
    pub role: BlockRole,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub(crate) values: Vec<f64>,
    pub(crate) blocks: Vec<Block>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn push(&mut self, role: BlockRole, init: Vec<f64>) -> usize {
        let id = self.blocks.len();
        self.blocks.push(Block {
            offset: self.values.len(),
            len: init.len(),
            role,
            frozen: false,
        });
        self.values.extend(init);
        id
    }

    #[inline]
    pub fn slice(&self, block: usize) -> &[f64] {
        let b = &self.blocks[block];
        &self.values[b.offset..b.offset + b.len]
    }

    #[inline]
    pub fn slice_mut(&mut self, block: usize) -> &mut [f64] {
        let b = &self.blocks[block];
        &mut self.values[b.offset..b.offset + b.len]
    }

    pub fn freeze(&mut self, block: usize) {
        self.blocks[block].frozen = true;
    }

    pub fn is_frozen(&self, block: usize) -> bool {
        self.blocks[block].frozen
    }

    /// Parameter count excluding classification-head channels.
    pub fn body_len(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !b.role.is_head())
            .map(|b| b.len)
            .sum()
    }

    /// 1.0 for trainable coordinates, 0.0 for frozen ones.
    pub fn trainable_mask(&self) -> Vec<f64> {
        let mut m = vec![1.0; self.values.len()];
        for b in self.blocks.iter().filter(|b| b.frozen) {
            m[b.offset..b.offset + b.len].fill(0.0);
        }
        m
    }
}
