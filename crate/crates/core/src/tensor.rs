//! Dense row-major `f32` tensors and a blocked GEMM with epilogue hooks.
//!
//! Every output element is accumulated in ascending `k` order starting from
//! zero, whatever the tile sizes or worker count, so results are
//! bit-reproducible and fused/unfused paths can be compared exactly.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::gelu;

pub const DEFAULT_TILE_M: usize = 64;
pub const DEFAULT_TILE_N: usize = 64;

// microkernel register block
const MR: usize = 4;
const NR: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(
                "tensor",
                format!("row {bad} has {} columns, expected {cols}", rows[bad].len()),
            ));
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Seeded uniform random tensor in `[lo, hi)`.
    pub fn random(rows: usize, cols: usize, lo: f32, hi: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(rows, cols, lo, hi, &mut rng)
    }

    pub fn random_with(rows: usize, cols: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Self {
        let dist = Uniform::new(lo, hi).expect("lo < hi");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Tensor { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `[start, end)` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖self − reference‖_F / ‖reference‖_F`, accumulated in f64.
    /// Falls back to the absolute norm when the reference is all zeros.
    pub fn rel_frobenius_error(&self, reference: &Tensor) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (reference.rows, reference.cols),
            "rel_frobenius_error shape mismatch"
        );
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (&x, &y) in self.data.iter().zip(&reference.data) {
            let d = x as f64 - y as f64;
            diff += d * d;
            norm += (y as f64) * (y as f64);
        }
        if norm == 0.0 {
            diff.sqrt()
        } else {
            (diff / norm).sqrt()
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-row, per-tile softmax statistics: the tile maximum and
/// `Σ exp(x − max)` over the tile's columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TilePartial {
    pub max: f32,
    pub sum: f32,
}

impl TilePartial {
    /// Reduces one tile row of logits.
    pub fn of_row(values: &[f32]) -> TilePartial {
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum = values.iter().map(|&v| (v - max).exp()).sum();
        TilePartial { max, sum }
    }
}

/// Element-wise work applied to each output tile before it is written back.
#[derive(Clone, Copy, Debug, Default)]
pub enum Epilogue<'a> {
    #[default]
    None,
    AddBias(&'a [f32]),
    /// `gelu(v + bias[col])`
    AddBiasGelu(&'a [f32]),
    Scale(f32),
    /// Scales, stores the raw (scaled) logits, and emits one [`TilePartial`]
    /// per output row per column tile.
    SoftmaxPartialReduce { scale: f32 },
}

impl Epilogue<'_> {
    pub fn validate(&self, cols: usize) -> Result<()> {
        match self {
            Epilogue::AddBias(bias) | Epilogue::AddBiasGelu(bias) if bias.len() != cols => {
                Err(Error::shape(
                    "epilogue",
                    format!("bias has {} entries, output has {cols} columns", bias.len()),
                ))
            }
            _ => Ok(()),
        }
    }

    fn emits_partials(&self) -> bool {
        matches!(self, Epilogue::SoftmaxPartialReduce { .. })
    }

    /// Applies the hook to `rows` rows of a tile stored at `dst[col0..col0 + width]`
    /// with row stride `stride`; `out_col0` is the tile's first column in
    /// the full output (for bias lookup).
    fn apply(
        &self,
        dst: &mut [f32],
        stride: usize,
        col0: usize,
        rows: usize,
        width: usize,
        out_col0: usize,
        partials: &mut Vec<TilePartial>,
    ) {
        for r in 0..rows {
            let row = &mut dst[r * stride + col0..r * stride + col0 + width];
            match *self {
                Epilogue::None => {}
                Epilogue::AddBias(bias) => {
                    for (v, b) in row.iter_mut().zip(&bias[out_col0..]) {
                        *v += b;
                    }
                }
                Epilogue::AddBiasGelu(bias) => {
                    for (v, b) in row.iter_mut().zip(&bias[out_col0..]) {
                        *v = gelu(*v + b);
                    }
                }
                Epilogue::Scale(s) => {
                    for v in row.iter_mut() {
                        *v *= s;
                    }
                }
                Epilogue::SoftmaxPartialReduce { scale } => {
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                    partials.push(TilePartial::of_row(row));
                }
            }
        }
    }
}

/// Row-wise `exp(x − max[row]) / sum[row]` applied to operand A as it is
/// loaded into the GEMM mainloop.
#[derive(Clone, Copy, Debug)]
pub struct SoftmaxTransform<'a> {
    pub max: &'a [f32],
    pub sum: &'a [f32],
}

impl SoftmaxTransform<'_> {
    #[inline]
    pub fn apply(&self, row: usize, x: f32) -> f32 {
        (x - self.max[row]).exp() / self.sum[row]
    }
}

/// Partials produced by a `SoftmaxPartialReduce` epilogue, row-major over
/// `(row, column tile)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialGrid {
    pub rows: usize,
    pub tile_cols: usize,
    pub entries: Vec<TilePartial>,
}

impl PartialGrid {
    pub fn get(&self, row: usize, tile_col: usize) -> TilePartial {
        self.entries[row * self.tile_cols + tile_col]
    }
}

pub(crate) fn check_operands(a: &Tensor, b: &Tensor, transform: Option<&SoftmaxTransform>) -> std::result::Result<(), String> {
    if a.cols != b.rows {
        return Err(format!(
            "a is {}x{} but b is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    if let Some(t) = transform {
        if t.max.len() != a.rows || t.sum.len() != a.rows {
            return Err(format!(
                "mainloop transform has {}/{} row stats for {} rows",
                t.max.len(),
                t.sum.len(),
                a.rows
            ));
        }
    }
    Ok(())
}

fn pack_a(a: &Tensor, transform: Option<&SoftmaxTransform>, r0: usize, r1: usize, buf: &mut Vec<f32>) {
    let k = a.cols;
    let slivers = (r1 - r0).div_ceil(MR);
    buf.clear();
    buf.resize(slivers * k * MR, 0.0);
    for s in 0..slivers {
        let base = s * k * MR;
        for ii in 0..MR {
            let r = r0 + s * MR + ii;
            if r >= r1 {
                break;
            }
            let row = a.row(r);
            match transform {
                Some(t) => {
                    for (p, &v) in row.iter().enumerate() {
                        buf[base + p * MR + ii] = t.apply(r, v);
                    }
                }
                None => {
                    for (p, &v) in row.iter().enumerate() {
                        buf[base + p * MR + ii] = v;
                    }
                }
            }
        }
    }
}

fn pack_b(b: &Tensor, c0: usize, c1: usize, buf: &mut Vec<f32>) {
    let k = b.rows;
    let slivers = (c1 - c0).div_ceil(NR);
    buf.clear();
    buf.resize(slivers * k * NR, 0.0);
    for p in 0..k {
        let row = &b.row(p)[c0..c1];
        for (jj, &v) in row.iter().enumerate() {
            let (s, lane) = (jj / NR, jj % NR);
            buf[s * k * NR + p * NR + lane] = v;
        }
    }
}

#[inline(always)]
fn microkernel(a: &[f32], b: &[f32]) -> [[f32; NR]; MR] {
    let mut acc = [[0.0f32; NR]; MR];
    for (av, bv) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
        for i in 0..MR {
            let x = av[i];
            for j in 0..NR {
                acc[i][j] += x * bv[j];
            }
        }
    }
    acc
}

/// Raw products for output rows `[r0, r1)` and columns `[c0, c1)`, written
/// to `dst` at column offset `dst_col` with row stride `stride`.
pub(crate) fn compute_tile(
    a: &Tensor,
    b: &Tensor,
    transform: Option<&SoftmaxTransform>,
    (r0, r1): (usize, usize),
    (c0, c1): (usize, usize),
    dst: &mut [f32],
    stride: usize,
    dst_col: usize,
) {
    let k = a.cols;
    let mut apack = Vec::new();
    let mut bpack = Vec::new();
    pack_a(a, transform, r0, r1, &mut apack);
    pack_b(b, c0, c1, &mut bpack);
    let (m_sl, n_sl) = ((r1 - r0).div_ceil(MR), (c1 - c0).div_ceil(NR));
    for si in 0..m_sl {
        let asl = &apack[si * k * MR..(si + 1) * k * MR];
        for sj in 0..n_sl {
            let bsl = &bpack[sj * k * NR..(sj + 1) * k * NR];
            let acc = microkernel(asl, bsl);
            for (ii, acc_row) in acc.iter().enumerate() {
                let r = si * MR + ii;
                if r0 + r >= r1 {
                    break;
                }
                let cbase = sj * NR;
                let w = NR.min(c1 - c0 - cbase);
                let off = r * stride + dst_col + cbase;
                dst[off..off + w].copy_from_slice(&acc_row[..w]);
            }
        }
    }
}

/// Computes one output tile and applies the epilogue to it. Returns the
/// per-row partials when the epilogue emits them.
pub(crate) fn compute_tile_with_epilogue(
    a: &Tensor,
    b: &Tensor,
    transform: Option<&SoftmaxTransform>,
    epilogue: &Epilogue,
    rows: (usize, usize),
    cols: (usize, usize),
    dst: &mut [f32],
    stride: usize,
    dst_col: usize,
) -> Vec<TilePartial> {
    compute_tile(a, b, transform, rows, cols, dst, stride, dst_col);
    let mut partials = Vec::new();
    epilogue.apply(dst, stride, dst_col, rows.1 - rows.0, cols.1 - cols.0, cols.0, &mut partials);
    partials
}

/// `epilogue(a · b)` with `tile_m × tile_n` output tiles.
pub fn gemm(a: &Tensor, b: &Tensor, epilogue: Epilogue, tile_m: usize, tile_n: usize) -> Result<Tensor> {
    gemm_full(a, b, None, epilogue, tile_m, tile_n).map(|(t, _)| t)
}

/// [`gemm`] with the default 64×64 tiles.
pub fn matmul(a: &Tensor, b: &Tensor, epilogue: Epilogue) -> Result<Tensor> {
    gemm(a, b, epilogue, DEFAULT_TILE_M, DEFAULT_TILE_N)
}

/// General entry point: optional mainloop transform on A, and the partial
/// grid when the epilogue produces one.
pub fn gemm_full(
    a: &Tensor,
    b: &Tensor,
    transform: Option<SoftmaxTransform>,
    epilogue: Epilogue,
    tile_m: usize,
    tile_n: usize,
) -> Result<(Tensor, Option<PartialGrid>)> {
    check_operands(a, b, transform.as_ref()).map_err(|d| Error::shape("gemm", d))?;
    if tile_m == 0 || tile_n == 0 {
        return Err(Error::shape("gemm", "tile sizes must be at least 1"));
    }
    epilogue.validate(b.cols)?;
    let (m, n) = (a.rows, b.cols);
    let mut out = Tensor::zeros(m, n);
    let tile_cols = n.div_ceil(tile_n);
    if m == 0 || n == 0 {
        let grid = epilogue.emits_partials().then(|| PartialGrid {
            rows: m,
            tile_cols,
            entries: Vec::new(),
        });
        return Ok((out, grid));
    }

    let panel_partials: Vec<Vec<TilePartial>> = out
        .data
        .par_chunks_mut(tile_m * n)
        .enumerate()
        .map(|(pi, panel)| {
            let r0 = pi * tile_m;
            let r1 = (r0 + tile_m).min(m);
            let mut per_tile = Vec::with_capacity(tile_cols);
            for tc in 0..tile_cols {
                let c0 = tc * tile_n;
                let c1 = (c0 + tile_n).min(n);
                per_tile.push(compute_tile_with_epilogue(
                    a,
                    b,
                    transform.as_ref(),
                    &epilogue,
                    (r0, r1),
                    (c0, c1),
                    panel,
                    n,
                    c0,
                ));
            }
            // reorder from tile-major to row-major within the panel
            let mut rows = Vec::new();
            if epilogue.emits_partials() {
                for r in 0..r1 - r0 {
                    rows.extend(per_tile.iter().map(|t| t[r]));
                }
            }
            rows
        })
        .collect();

    let grid = epilogue.emits_partials().then(|| PartialGrid {
        rows: m,
        tile_cols,
        entries: panel_partials.concat(),
    });
    Ok((out, grid))
}

/// One GEMM launch over a batch of identically shaped problems.
pub fn batched_gemm(a: &[Tensor], b: &[Tensor], epilogue: Epilogue) -> Result<Vec<Tensor>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "batched_gemm",
            format!("{} left operands but {} right operands", a.len(), b.len()),
        ));
    }
    if let (Some(a0), Some(b0)) = (a.first(), b.first()) {
        for (i, (ai, bi)) in a.iter().zip(b).enumerate() {
            if (ai.rows, ai.cols) != (a0.rows, a0.cols) || (bi.rows, bi.cols) != (b0.rows, b0.cols) {
                return Err(Error::shape(
                    "batched_gemm",
                    format!(
                        "batch {i} is {}x{} · {}x{}, batch 0 is {}x{} · {}x{}; shapes must be uniform",
                        ai.rows, ai.cols, bi.rows, bi.cols, a0.rows, a0.cols, b0.rows, b0.cols
                    ),
                ));
            }
        }
    }
    a.iter().zip(b).map(|(ai, bi)| matmul(ai, bi, epilogue)).collect()
}

/// Multiply-add FLOPs of an `m×k · k×n` product, two per multiply-add.
pub fn gemm_flops(m: usize, n: usize, k: usize) -> u64 {
    2 * (m as u64) * (n as u64) * (k as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0f32;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn identity_left_returns_b() {
        let b = Tensor::random(3, 2, -1.0, 1.0, 1);
        let c = gemm(&Tensor::identity(3), &b, Epilogue::None, 64, 64).unwrap();
        assert!(c.bit_eq(&b) || c == b);
    }

    #[test]
    fn two_by_two_hand_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = gemm(&a, &b, Epilogue::None, 1, 1).unwrap();
        assert_eq!(c.to_rows(), vec![vec![19.0, 22.0], vec![43.0, 50.0]]);
    }

    #[test]
    fn zero_bias_matches_no_epilogue() {
        let a = Tensor::random(16, 16, -1.0, 1.0, 2);
        let b = Tensor::random(16, 16, -1.0, 1.0, 3);
        let zero = vec![0.0; 16];
        let plain = matmul(&a, &b, Epilogue::None).unwrap();
        let biased = matmul(&a, &b, Epilogue::AddBias(&zero)).unwrap();
        assert_eq!(plain, biased);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3), Epilogue::None).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "gemm", .. }));
    }

    #[test]
    fn bias_length_checked() {
        let bias = [0.0; 2];
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(3, 3), Epilogue::AddBias(&bias)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "epilogue", .. }));
    }

    #[test]
    fn zero_row_operand_gives_empty_output() {
        let c = matmul(&Tensor::zeros(0, 5), &Tensor::random(5, 4, 0.0, 1.0, 4), Epilogue::None).unwrap();
        assert_eq!((c.rows(), c.cols()), (0, 4));
    }

    #[test]
    fn matches_naive_oracle_64() {
        let a = Tensor::random(64, 64, -1.0, 1.0, 10);
        let b = Tensor::random(64, 64, -1.0, 1.0, 11);
        let c = matmul(&a, &b, Epilogue::None).unwrap();
        assert!(c.rel_frobenius_error(&naive(&a, &b)) < 1e-5);
    }

    #[test]
    fn tile_sizes_do_not_change_bits() {
        let a = Tensor::random(37, 29, -1.0, 1.0, 12);
        let b = Tensor::random(29, 41, -1.0, 1.0, 13);
        let reference = gemm(&a, &b, Epilogue::None, 64, 64).unwrap();
        for (tm, tn) in [(1, 1), (3, 5), (8, 8), (16, 7), (128, 128)] {
            assert!(gemm(&a, &b, Epilogue::None, tm, tn).unwrap().bit_eq(&reference));
        }
    }

    #[test]
    fn bias_gelu_epilogue_equals_separate_passes() {
        let a = Tensor::random(19, 23, -2.0, 2.0, 14);
        let b = Tensor::random(23, 31, -2.0, 2.0, 15);
        let bias: Vec<f32> = (0..31).map(|i| i as f32 * 0.05 - 0.7).collect();
        let fused = matmul(&a, &b, Epilogue::AddBiasGelu(&bias)).unwrap();
        let mut unfused = matmul(&a, &b, Epilogue::None).unwrap();
        for r in 0..unfused.rows() {
            for (v, bb) in unfused.row_mut(r).iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let unfused = unfused.map(gelu);
        assert!(fused.bit_eq(&unfused));
    }

    #[test]
    fn partial_reduce_grid_matches_direct_rows() {
        let a = Tensor::random(5, 4, -1.0, 1.0, 16);
        let b = Tensor::random(4, 10, -1.0, 1.0, 17);
        let (out, grid) = gemm_full(&a, &b, None, Epilogue::SoftmaxPartialReduce { scale: 0.5 }, 2, 4).unwrap();
        let grid = grid.unwrap();
        assert_eq!(grid.tile_cols, 3);
        for r in 0..5 {
            for tc in 0..3 {
                let end = (tc * 4 + 4).min(10);
                let expect = TilePartial::of_row(&out.row(r)[tc * 4..end]);
                assert_eq!(grid.get(r, tc), expect);
            }
        }
    }

    #[test]
    fn batched_qkv_matches_three_gemms() {
        let x = Tensor::random(11, 6, -1.0, 1.0, 20);
        let w = Tensor::random(6, 18, -1.0, 1.0, 21);
        let parts: Vec<Tensor> = (0..3).map(|i| w.slice_cols(6 * i, 6 * i + 6)).collect();
        let xs = vec![x.clone(), x.clone(), x.clone()];
        let qkv = batched_gemm(&xs, &parts, Epilogue::None).unwrap();
        assert_eq!(qkv.len(), 3);
        for (i, out) in qkv.iter().enumerate() {
            assert_eq!((out.rows(), out.cols()), (11, 6));
            assert!(out.bit_eq(&matmul(&x, &parts[i], Epilogue::None).unwrap()));
        }
    }

    #[test]
    fn batched_identity_and_single_batch() {
        let id = Tensor::identity(4);
        let out = batched_gemm(&[id.clone(), id.clone(), id.clone()], &[id.clone(), id.clone(), id.clone()], Epilogue::None).unwrap();
        assert!(out.iter().all(|t| *t == id));
        let a = Tensor::random(3, 5, -1.0, 1.0, 22);
        let b = Tensor::random(5, 2, -1.0, 1.0, 23);
        let single = batched_gemm(std::slice::from_ref(&a), std::slice::from_ref(&b), Epilogue::None).unwrap();
        assert!(single[0].bit_eq(&matmul(&a, &b, Epilogue::None).unwrap()));
    }

    #[test]
    fn batched_rejects_nonuniform_shapes() {
        let err = batched_gemm(
            &[Tensor::zeros(2, 3), Tensor::zeros(4, 3)],
            &[Tensor::zeros(3, 2), Tensor::zeros(3, 2)],
            Epilogue::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { op: "batched_gemm", .. }));
    }
}
