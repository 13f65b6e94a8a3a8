//! Padding-free batching: mask construction, prefix-sum offsets, pack and unpack.
//!
//! A batch of `batch_size` sequences padded to `max_seq_len` tokens lives in
//! a `(batch_size · max_seq_len) × hidden` tensor. The packed form keeps only
//! the valid rows, contiguously, plus the offset vector mapping each packed
//! row back to its padded (flat) row index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sequence token counts of a batch padded to `max_seq_len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqLengths {
    lengths: Vec<usize>,
    max_seq_len: usize,
}

impl SeqLengths {
    pub fn new(lengths: Vec<usize>, max_seq_len: usize) -> Result<Self> {
        if let Some((i, &len)) = lengths
            .iter()
            .enumerate()
            .find(|(_, &l)| l == 0 || l > max_seq_len)
        {
            return Err(Error::Lengths(format!(
                "sequence {i} has length {len}; lengths must lie in [1, {max_seq_len}]"
            )));
        }
        Ok(SeqLengths {
            lengths,
            max_seq_len,
        })
    }

    /// Every sequence at full length.
    pub fn dense(batch_size: usize, max_seq_len: usize) -> Result<Self> {
        Self::new(vec![max_seq_len; batch_size], max_seq_len)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn padded_rows(&self) -> usize {
        self.batch_size() * self.max_seq_len
    }

    /// Average-to-maximum length ratio.
    pub fn alpha(&self) -> f64 {
        if self.lengths.is_empty() {
            return 0.0;
        }
        self.total_tokens() as f64 / self.padded_rows() as f64
    }

    /// Longest actual sequence (0 for an empty batch).
    pub fn longest(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// `batch_size × max_seq_len` validity mask; each row is a run of ones
/// followed by zeros.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    batch_size: usize,
    max_seq_len: usize,
    bits: Vec<u8>,
}

impl MaskMatrix {
    /// Wraps raw 0/1 entries; rows must be monotone (ones, then zeros) with at least one 1.
    pub fn from_bits(batch_size: usize, max_seq_len: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != batch_size * max_seq_len {
            return Err(Error::Mask(format!(
                "{} entries for a {batch_size}x{max_seq_len} mask",
                bits.len()
            )));
        }
        for b in 0..batch_size {
            let row = &bits[b * max_seq_len..(b + 1) * max_seq_len];
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Mask(format!("row {b} has entries other than 0/1")));
            }
            if row.first() != Some(&1) {
                return Err(Error::Mask(format!("row {b} has no valid tokens")));
            }
            if row.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Mask(format!(
                    "row {b} has a hole; valid tokens must be contiguous from position 0"
                )));
            }
        }
        Ok(MaskMatrix {
            batch_size,
            max_seq_len,
            bits,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn row(&self, b: usize) -> &[u8] {
        &self.bits[b * self.max_seq_len..(b + 1) * self.max_seq_len]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

pub fn build_mask(lengths: &SeqLengths) -> MaskMatrix {
    let max = lengths.max_seq_len();
    let mut bits = vec![0u8; lengths.padded_rows()];
    for (b, &len) in lengths.lengths().iter().enumerate() {
        bits[b * max..b * max + len].fill(1);
    }
    MaskMatrix {
        batch_size: lengths.batch_size(),
        max_seq_len: max,
        bits,
    }
}

/// Packed-index → padded-index mapping for one batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingPlan {
    offsets: Vec<usize>,
    starts: Vec<usize>,
    lengths: SeqLengths,
}

impl PackingPlan {
    pub fn from_lengths(lengths: &SeqLengths) -> Self {
        compute_plan(&build_mask(lengths))
    }

    /// Flat padded row index of every valid token, in packed order.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// First packed row of each sequence (exclusive prefix sum of lengths).
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn lengths(&self) -> &SeqLengths {
        &self.lengths
    }

    pub fn valid_word_cnt(&self) -> usize {
        self.offsets.len()
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.batch_size()
    }

    pub fn max_seq_len(&self) -> usize {
        self.lengths.max_seq_len()
    }

    /// Packed row range of sequence `b`.
    pub fn seq_range(&self, b: usize) -> std::ops::Range<usize> {
        let start = self.starts[b];
        start..start + self.lengths.lengths()[b]
    }
}

/// Offsets from the prefix sum of the mask.
///
/// Each row is scanned independently (in parallel over rows) to get its
/// inclusive prefix sum; a short scan over the row totals then yields the
/// per-sequence packed start. A mask entry at flat index `f` with inclusive
/// row prefix `p` lands at packed index `start[row] + p − 1`.
pub fn compute_plan(mask: &MaskMatrix) -> PackingPlan {
    let max = mask.max_seq_len();
    let row_scans: Vec<Vec<usize>> = (0..mask.batch_size())
        .into_par_iter()
        .map(|b| {
            let mut acc = 0usize;
            mask.row(b)
                .iter()
                .map(|&bit| {
                    acc += bit as usize;
                    acc
                })
                .collect()
        })
        .collect();

    let mut starts = Vec::with_capacity(mask.batch_size());
    let mut total = 0usize;
    for scan in &row_scans {
        starts.push(total);
        total += scan.last().copied().unwrap_or(0);
    }

    let mut offsets = vec![0usize; total];
    for (b, scan) in row_scans.iter().enumerate() {
        for (pos, &prefix) in scan.iter().enumerate() {
            if mask.row(b)[pos] == 1 {
                offsets[starts[b] + prefix - 1] = b * max + pos;
            }
        }
    }

    let lengths = row_scans
        .iter()
        .map(|s| s.last().copied().unwrap_or(0))
        .collect();
    PackingPlan {
        offsets,
        starts,
        lengths: SeqLengths {
            lengths,
            max_seq_len: max,
        },
    }
}

/// Valid tokens of a padded batch, contiguous, with the plan that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    pub tokens: Tensor,
    pub plan: PackingPlan,
}

impl PackedBatch {
    pub fn new(tokens: Tensor, plan: PackingPlan) -> Result<Self> {
        if tokens.rows() != plan.valid_word_cnt() {
            return Err(Error::shape(
                "packed batch",
                format!(
                    "{} token rows for a plan with {} valid tokens",
                    tokens.rows(),
                    plan.valid_word_cnt()
                ),
            ));
        }
        Ok(PackedBatch { tokens, plan })
    }
}

pub fn pack(padded: &Tensor, plan: &PackingPlan) -> Result<PackedBatch> {
    let tokens = pack_rows(padded, plan)?;
    Ok(PackedBatch {
        tokens,
        plan: plan.clone(),
    })
}

/// Row gather `out[j] = padded[offsets[j]]`.
pub fn pack_rows(padded: &Tensor, plan: &PackingPlan) -> Result<Tensor> {
    let expected = plan.lengths().padded_rows();
    if padded.rows() != expected {
        return Err(Error::shape(
            "pack",
            format!(
                "padded tensor has {} rows, plan expects {expected} ({}x{})",
                padded.rows(),
                plan.batch_size(),
                plan.max_seq_len()
            ),
        ));
    }
    let cols = padded.cols();
    let mut out = Tensor::zeros(plan.valid_word_cnt(), cols);
    for (j, &src) in plan.offsets().iter().enumerate() {
        out.row_mut(j).copy_from_slice(padded.row(src));
    }
    Ok(out)
}

pub fn unpack(packed: &PackedBatch, max_seq_len: usize) -> Result<Tensor> {
    if max_seq_len != packed.plan.max_seq_len() {
        return Err(Error::shape(
            "unpack",
            format!(
                "plan was built for max_seq_len {}, asked for {max_seq_len}",
                packed.plan.max_seq_len()
            ),
        ));
    }
    unpack_rows(&packed.tokens, &packed.plan)
}

/// Row scatter into a zeroed padded tensor.
pub fn unpack_rows(tokens: &Tensor, plan: &PackingPlan) -> Result<Tensor> {
    unpack_rows_with_bias(tokens, plan, None)
}

/// Scatter fused with a bias add on the valid rows; padded rows stay zero.
pub fn unpack_rows_with_bias(tokens: &Tensor, plan: &PackingPlan, bias: Option<&[f32]>) -> Result<Tensor> {
    if tokens.rows() != plan.valid_word_cnt() {
        return Err(Error::shape(
            "unpack",
            format!(
                "{} packed rows for a plan with {} valid tokens",
                tokens.rows(),
                plan.valid_word_cnt()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.len() != tokens.cols() {
            return Err(Error::shape("unpack", "bias length differs from column count"));
        }
    }
    let mut out = Tensor::zeros(plan.lengths().padded_rows(), tokens.cols());
    for (j, &dst) in plan.offsets().iter().enumerate() {
        let row = out.row_mut(dst);
        row.copy_from_slice(tokens.row(j));
        if let Some(b) = bias {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    Ok(out)
}

/// Zeroes every padded row in place.
pub fn apply_mask(padded: &mut Tensor, lengths: &SeqLengths) {
    let max = lengths.max_seq_len();
    for (b, &len) in lengths.lengths().iter().enumerate() {
        for pos in len..max {
            padded.row_mut(b * max + pos).fill(0.0);
        }
    }
}
