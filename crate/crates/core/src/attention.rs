//! Multi-head attention over variable-length batches.
//!
//! Three implementations share one contract, `softmax(QKᵀ/√d)·V` per
//! sequence and head with heads concatenated along the hidden dimension:
//!
//! * [`mha_baseline`] works on the padded rectangle with masked keys;
//! * [`mha_fused_short`] holds a query tile, the whole key/value block and a
//!   full logits row in tile-local scratch (sequences up to the cutoff);
//! * [`mha_fused_long`] runs two grouped GEMMs with the softmax split into a
//!   per-tile epilogue reduction, a full reduction, and a mainloop transform
//!   on the second GEMM's A operand.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grouped_gemm::{grouped_gemm_run, GemmProblem, GroupedGemmConfig};
use crate::packing::{pack_rows, unpack_rows, unpack_rows_with_bias, PackingPlan};
use crate::tensor::{batched_gemm, gemm_flops, Epilogue, PartialGrid, SoftmaxTransform, Tensor};

pub const DEFAULT_CUTOFF: usize = 384;
pub const DEFAULT_SPLIT_SEQ_LEN: usize = 32;

// stands in for −∞ on padded key columns
const MASKED_LOGIT: f32 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    BaselinePadded,
    /// Packed input unpacked around the padded baseline.
    PaddedZeroPad,
    FusedShort,
    FusedLong,
}

/// Picks the fused path for a batch padded to `max_seq_len`; the cutoff is
/// inclusive on the short side.
pub fn select_variant(max_seq_len: usize, cutoff: usize) -> AttentionVariant {
    if max_seq_len <= cutoff {
        AttentionVariant::FusedShort
    } else {
        AttentionVariant::FusedLong
    }
}

/// Q, K, V without bias (the kernels add it as they load), in either the
/// packed (`valid_word_cnt` rows) or padded (`batch · max_seq_len` rows) layout.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInput<'a> {
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    pub v: &'a Tensor,
    pub q_bias: &'a [f32],
    pub k_bias: &'a [f32],
    pub v_bias: &'a [f32],
    pub plan: &'a PackingPlan,
    pub head_num: usize,
    pub head_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    Packed,
    Padded,
}

impl AttentionInput<'_> {
    pub fn hidden(&self) -> usize {
        self.head_num * self.head_size
    }

    fn validate(&self, layout: Layout) -> Result<()> {
        let hidden = self.q.cols();
        if self.head_num == 0 || self.head_size == 0 || hidden != self.head_num * self.head_size {
            return Err(Error::shape(
                "attention",
                format!(
                    "hidden dim {hidden} is not head_num {} x head_size {}",
                    self.head_num, self.head_size
                ),
            ));
        }
        let rows = match layout {
            Layout::Packed => self.plan.valid_word_cnt(),
            Layout::Padded => self.plan.lengths().padded_rows(),
        };
        for (name, t) in [("q", self.q), ("k", self.k), ("v", self.v)] {
            if t.rows() != rows || t.cols() != hidden {
                return Err(Error::shape(
                    "attention",
                    format!(
                        "{name} is {}x{}, expected {rows}x{hidden} for the {layout:?} layout",
                        t.rows(),
                        t.cols()
                    ),
                ));
            }
        }
        for (name, b) in [("q_bias", self.q_bias), ("k_bias", self.k_bias), ("v_bias", self.v_bias)] {
            if b.len() != hidden {
                return Err(Error::shape(
                    "attention",
                    format!("{name} has {} entries, hidden dim is {hidden}", b.len()),
                ));
            }
        }
        Ok(())
    }

    fn scale(&self) -> f32 {
        1.0 / (self.head_size as f32).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct MhaOutput {
    pub output: Tensor,
    /// Multiply-add FLOPs actually executed by the two attention products.
    pub flops: u64,
    pub variant: AttentionVariant,
}

/// Rows `[start, start + len)` of one head, with the bias added on load.
fn load_head(t: &Tensor, bias: &[f32], start: usize, len: usize, head: usize, head_size: usize) -> Tensor {
    let c0 = head * head_size;
    let b = &bias[c0..c0 + head_size];
    let mut out = Tensor::zeros(len, head_size);
    for i in 0..len {
        for ((o, &x), &bb) in out.row_mut(i).iter_mut().zip(&t.row(start + i)[c0..c0 + head_size]).zip(b) {
            *o = x + bb;
        }
    }
    out
}

/// Transposed head block: `head_size × len`.
fn load_head_t(t: &Tensor, bias: &[f32], start: usize, len: usize, head: usize, head_size: usize) -> Tensor {
    let c0 = head * head_size;
    let mut out = Tensor::zeros(head_size, len);
    for i in 0..len {
        let row = &t.row(start + i)[c0..c0 + head_size];
        for d in 0..head_size {
            out.set(d, i, row[d] + bias[c0 + d]);
        }
    }
    out
}

/// Three-round softmax over one row: max, exponentiate and sum, normalize.
#[inline]
fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn write_head(out: &mut Tensor, block: &Tensor, start: usize, head: usize) {
    let hs = block.cols();
    for i in 0..block.rows() {
        out.row_mut(start + i)[head * hs..(head + 1) * hs].copy_from_slice(block.row(i));
    }
}

/// Padded-layout attention with `batch × head` batched GEMMs over the full
/// `max_seq_len` rectangle. Padded key columns are masked before the softmax
/// and padded query rows are zero in the output.
pub fn mha_baseline(input: &AttentionInput) -> Result<MhaOutput> {
    input.validate(Layout::Padded)?;
    let lengths = input.plan.lengths();
    let (bs, max) = (lengths.batch_size(), lengths.max_seq_len());
    let (heads, hs) = (input.head_num, input.head_size);
    let mut output = Tensor::zeros(lengths.padded_rows(), input.hidden());
    if bs == 0 {
        return Ok(MhaOutput {
            output,
            flops: 0,
            variant: AttentionVariant::BaselinePadded,
        });
    }

    let units: Vec<(usize, usize)> = (0..bs).flat_map(|b| (0..heads).map(move |h| (b, h))).collect();
    let qs: Vec<Tensor> = units
        .par_iter()
        .map(|&(b, h)| load_head(input.q, input.q_bias, b * max, max, h, hs))
        .collect();
    let kts: Vec<Tensor> = units
        .par_iter()
        .map(|&(b, h)| load_head_t(input.k, input.k_bias, b * max, max, h, hs))
        .collect();
    let mut logits = batched_gemm(&qs, &kts, Epilogue::Scale(input.scale()))?;

    logits.par_iter_mut().zip(&units).for_each(|(p, &(b, _))| {
        let len = lengths.lengths()[b];
        for i in 0..max {
            let row = p.row_mut(i);
            row[len..].fill(MASKED_LOGIT);
            softmax_row(row);
        }
    });

    let vs: Vec<Tensor> = units
        .par_iter()
        .map(|&(b, h)| load_head(input.v, input.v_bias, b * max, max, h, hs))
        .collect();
    let heads_out = batched_gemm(&logits, &vs, Epilogue::None)?;

    for (o, &(b, h)) in heads_out.iter().zip(&units) {
        let len = lengths.lengths()[b];
        for i in 0..len {
            output.row_mut(b * max + i)[h * hs..(h + 1) * hs].copy_from_slice(o.row(i));
        }
    }
    let flops = 2 * units.len() as u64 * gemm_flops(max, max, hs);
    Ok(MhaOutput {
        output,
        flops,
        variant: AttentionVariant::BaselinePadded,
    })
}

/// Packed input routed through the padded baseline: unpack (bias fused into
/// the scatter when `fuse_unpack_bias`), attend, pack the result.
pub fn mha_padded_zero_pad(input: &AttentionInput, fuse_unpack_bias: bool) -> Result<MhaOutput> {
    input.validate(Layout::Packed)?;
    let hidden = input.hidden();
    let zero = vec![0.0f32; hidden];
    let (q, k, v, qb, kb, vb) = if fuse_unpack_bias {
        (
            unpack_rows_with_bias(input.q, input.plan, Some(input.q_bias))?,
            unpack_rows_with_bias(input.k, input.plan, Some(input.k_bias))?,
            unpack_rows_with_bias(input.v, input.plan, Some(input.v_bias))?,
            zero.as_slice(),
            zero.as_slice(),
            zero.as_slice(),
        )
    } else {
        (
            unpack_rows(input.q, input.plan)?,
            unpack_rows(input.k, input.plan)?,
            unpack_rows(input.v, input.plan)?,
            input.q_bias,
            input.k_bias,
            input.v_bias,
        )
    };
    let padded = AttentionInput {
        q: &q,
        k: &k,
        v: &v,
        q_bias: qb,
        k_bias: kb,
        v_bias: vb,
        ..*input
    };
    let res = mha_baseline(&padded)?;
    Ok(MhaOutput {
        output: pack_rows(&res.output, input.plan)?,
        flops: res.flops,
        variant: AttentionVariant::PaddedZeroPad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortParams {
    pub split_seq_len: usize,
    pub cutoff: usize,
}

impl Default for ShortParams {
    fn default() -> Self {
        ShortParams {
            split_seq_len: DEFAULT_SPLIT_SEQ_LEN,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

struct ShortTile {
    start: usize,
    head: usize,
    out: Tensor,
    flops: u64,
}

/// Unpadded fused attention for short sequences.
///
/// Work items form the grid `{head, ⌈len/split_seq_len⌉, batch}`. Each item
/// loads its query tile and the sequence's keys with bias added, computes
/// scaled logits into a `split_seq_len × len` scratch, normalizes each row
/// in place, reloads the same scratch slot with biased values and writes its
/// output tile. Only true sequence lengths are touched.
pub fn mha_fused_short(input: &AttentionInput, params: &ShortParams) -> Result<MhaOutput> {
    input.validate(Layout::Packed)?;
    let plan = input.plan;
    if params.split_seq_len == 0 {
        return Err(Error::Config("split_seq_len must be at least 1".into()));
    }
    if plan.max_seq_len() > params.cutoff {
        return Err(Error::Config(format!(
            "max_seq_len {} exceeds the short-path cutoff {}",
            plan.max_seq_len(),
            params.cutoff
        )));
    }
    let (heads, hs, split) = (input.head_num, input.head_size, params.split_seq_len);
    let scale = input.scale();

    let mut items = Vec::new();
    for (b, &len) in plan.lengths().lengths().iter().enumerate() {
        for t in 0..len.div_ceil(split) {
            for h in 0..heads {
                items.push((b, t, h));
            }
        }
    }

    let tiles: Vec<ShortTile> = items
        .par_iter()
        .map(|&(b, t, h)| {
            let seq = plan.seq_range(b);
            let len = seq.len();
            let r0 = t * split;
            let rows = split.min(len - r0);
            let s_query = load_head(input.q, input.q_bias, seq.start + r0, rows, h, hs);
            let mut s_kv = load_head(input.k, input.k_bias, seq.start, len, h, hs);

            let mut s_logits = Tensor::zeros(rows, len);
            for i in 0..rows {
                let q = s_query.row(i);
                for j in 0..len {
                    let mut acc = 0.0f32;
                    for (x, y) in q.iter().zip(s_kv.row(j)) {
                        acc += x * y;
                    }
                    s_logits.set(i, j, acc * scale);
                }
                softmax_row(s_logits.row_mut(i));
            }

            s_kv = load_head(input.v, input.v_bias, seq.start, len, h, hs);
            let mut out = Tensor::zeros(rows, hs);
            for i in 0..rows {
                let o = out.row_mut(i);
                for (j, &p) in s_logits.row(i).iter().enumerate() {
                    for (acc, &val) in o.iter_mut().zip(s_kv.row(j)) {
                        *acc += p * val;
                    }
                }
            }
            ShortTile {
                start: seq.start + r0,
                head: h,
                out,
                flops: 2 * gemm_flops(rows, len, hs),
            }
        })
        .collect();

    let mut output = Tensor::zeros(plan.valid_word_cnt(), input.hidden());
    let mut flops = 0;
    for tile in &tiles {
        write_head(&mut output, &tile.out, tile.start, tile.head);
        flops += tile.flops;
    }
    Ok(MhaOutput {
        output,
        flops,
        variant: AttentionVariant::FusedShort,
    })
}

/// Fully reduced softmax statistics for every row of one attention unit.
#[derive(Clone, Debug, PartialEq)]
pub struct RowStats {
    pub max: Vec<f32>,
    pub sum: Vec<f32>,
}

/// Per-unit partial grids from the logits epilogue, and the completed row
/// statistics once [`full_reduce`] has run.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPartials {
    pub units: Vec<PartialGrid>,
    pub reduced: Option<Vec<RowStats>>,
}

/// Combines tile partials per row:
/// `max = maxⱼ mⱼ`, `sum = Σⱼ sⱼ · exp(mⱼ − max)`.
///
/// Panics if any tile partial is missing; phase one must have covered
/// every tile before this runs.
pub fn full_reduce(mut partials: SoftmaxPartials) -> SoftmaxPartials {
    let reduced = partials.units.par_iter().map(reduce_grid).collect();
    partials.reduced = Some(reduced);
    partials
}

pub fn reduce_grid(grid: &PartialGrid) -> RowStats {
    let mut max = Vec::with_capacity(grid.rows);
    let mut sum = Vec::with_capacity(grid.rows);
    for r in 0..grid.rows {
        let row = &grid.entries[r * grid.tile_cols..(r + 1) * grid.tile_cols];
        assert!(
            !row.is_empty() && row.iter().all(|p| !p.max.is_nan() && !p.sum.is_nan()),
            "softmax partials missing for row {r}"
        );
        let m = row.iter().map(|p| p.max).fold(f32::NEG_INFINITY, f32::max);
        let s: f32 = row.iter().map(|p| p.sum * (p.max - m).exp()).sum();
        assert!(m.is_finite() && s > 0.0, "degenerate softmax statistics in row {r}");
        max.push(m);
        sum.push(s);
    }
    RowStats { max, sum }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LongParams {
    pub gemm: GroupedGemmConfig,
}

impl LongParams {
    pub fn with_workers(workers: usize) -> Self {
        let mut p = Self::default();
        p.gemm.workers = workers;
        p
    }
}

/// Grouped-GEMM fused attention: one problem per `(sequence, head)` unit,
/// each shaped by its own true length.
pub fn mha_fused_long(input: &AttentionInput, params: &LongParams) -> Result<MhaOutput> {
    input.validate(Layout::Packed)?;
    let plan = input.plan;
    let (heads, hs) = (input.head_num, input.head_size);
    let units: Vec<(usize, usize)> = (0..plan.batch_size())
        .flat_map(|b| (0..heads).map(move |h| (b, h)))
        .collect();
    let load = |t: &Tensor, bias: &[f32], b: usize, h: usize, transposed: bool| {
        let seq = plan.seq_range(b);
        if transposed {
            load_head_t(t, bias, seq.start, seq.len(), h, hs)
        } else {
            load_head(t, bias, seq.start, seq.len(), h, hs)
        }
    };
    let qs: Vec<Tensor> = units.par_iter().map(|&(b, h)| load(input.q, input.q_bias, b, h, false)).collect();
    let kts: Vec<Tensor> = units.par_iter().map(|&(b, h)| load(input.k, input.k_bias, b, h, true)).collect();

    // phase 1: scaled logits with per-tile (max, sum) in the epilogue
    let problems: Vec<GemmProblem> = qs.iter().zip(&kts).map(|(q, kt)| GemmProblem::new(q, kt)).collect();
    let logits = grouped_gemm_run(
        &problems,
        &params.gemm,
        Epilogue::SoftmaxPartialReduce { scale: input.scale() },
    )?;
    drop(problems);
    let partials = SoftmaxPartials {
        units: logits.partials.expect("partial reduce epilogue yields partials"),
        reduced: None,
    };

    // phase 2
    let stats = full_reduce(partials).reduced.expect("full_reduce fills reduced stats");

    // phase 3: exp(x − max)/sum applied to A as the second GEMM loads it
    let vs: Vec<Tensor> = units.par_iter().map(|&(b, h)| load(input.v, input.v_bias, b, h, false)).collect();
    let problems: Vec<GemmProblem> = logits
        .outputs
        .iter()
        .zip(&vs)
        .zip(&stats)
        .map(|((p, v), s)| {
            GemmProblem::new(p, v).with_transform(SoftmaxTransform {
                max: &s.max,
                sum: &s.sum,
            })
        })
        .collect();
    let attended = grouped_gemm_run(&problems, &params.gemm, Epilogue::None)?;

    let mut output = Tensor::zeros(plan.valid_word_cnt(), input.hidden());
    for (o, &(b, h)) in attended.outputs.iter().zip(&units) {
        write_head(&mut output, o, plan.starts()[b], h);
    }
    Ok(MhaOutput {
        output,
        flops: logits.flops + attended.flops,
        variant: AttentionVariant::FusedLong,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaConfig {
    pub cutoff: usize,
    pub split_seq_len: usize,
    pub long: LongParams,
}

impl Default for MhaConfig {
    fn default() -> Self {
        MhaConfig {
            cutoff: DEFAULT_CUTOFF,
            split_seq_len: DEFAULT_SPLIT_SEQ_LEN,
            long: LongParams::default(),
        }
    }
}

/// Short path iff the batch's `max_seq_len` is at most the cutoff.
pub fn dispatch_mha(input: &AttentionInput, config: &MhaConfig) -> Result<MhaOutput> {
    match select_variant(input.plan.max_seq_len(), config.cutoff) {
        AttentionVariant::FusedShort => mha_fused_short(
            input,
            &ShortParams {
                split_seq_len: config.split_seq_len,
                cutoff: config.cutoff,
            },
        ),
        _ => mha_fused_long(input, &config.long),
    }
}
