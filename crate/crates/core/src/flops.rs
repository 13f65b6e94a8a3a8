//! Analytic and exact FLOP counts per encoder module.
//!
//! With `m = batch · max_seq_len`, `k = hidden` and `α` the mean-to-max
//! length ratio, the analytic model is
//!
//! | module | baseline   | zero padding | zero padding + fused MHA |
//! |--------|------------|--------------|--------------------------|
//! | GEMM0  | 6mk²       | 6(αm)k²      | 6(αm)k²                  |
//! | MHA    | 4(m²/bs)k  | 4(m²/bs)k    | 4((αm)²/bs)k             |
//! | GEMM1  | 2mk²       | 2(αm)k²      | 2(αm)k²                  |
//! | GEMM2  | 8mk²       | 8(αm)k²      | 8(αm)k²                  |
//! | GEMM3  | 8mk²       | 8(αm)k²      | 8(αm)k²                  |
//!
//! The exact counts replace `αm` by `Σ lenᵢ` and the fused MHA term by
//! `Σ 4·lenᵢ²·k`. GEMM2/GEMM3 assume the default FFN scale of 4; other
//! scales use `2·ffn_scale`. Element-wise work is not counted.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

use crate::packing::SeqLengths;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopVariant {
    Baseline,
    ZeroPadding,
    ZeroPaddingFusedMha,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModuleFlops {
    pub analytic: f64,
    pub exact: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub variant: FlopVariant,
    pub alpha: f64,
    pub gemm0: ModuleFlops,
    pub mha: ModuleFlops,
    pub gemm1: ModuleFlops,
    pub gemm2: ModuleFlops,
    pub gemm3: ModuleFlops,
    pub total_analytic: f64,
    pub total_exact: u64,
}

impl FlopReport {
    pub fn modules(&self) -> [(&'static str, ModuleFlops); 5] {
        [
            ("gemm0", self.gemm0),
            ("mha", self.mha),
            ("gemm1", self.gemm1),
            ("gemm2", self.gemm2),
            ("gemm3", self.gemm3),
        ]
    }

    /// Exact GEMM0–GEMM3 total, attention excluded.
    pub fn linear_exact(&self) -> u64 {
        self.gemm0.exact + self.gemm1.exact + self.gemm2.exact + self.gemm3.exact
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("flop report serializes")
    }

    /// Same report scaled to `layers` stacked encoder layers.
    pub fn times_layers(&self, layers: usize) -> FlopReport {
        let scale = |m: ModuleFlops| ModuleFlops {
            analytic: m.analytic * layers as f64,
            exact: m.exact * layers as u64,
        };
        FlopReport {
            variant: self.variant,
            alpha: self.alpha,
            gemm0: scale(self.gemm0),
            mha: scale(self.mha),
            gemm1: scale(self.gemm1),
            gemm2: scale(self.gemm2),
            gemm3: scale(self.gemm3),
            total_analytic: self.total_analytic * layers as f64,
            total_exact: self.total_exact * layers as u64,
        }
    }
}

/// Dimensions the count depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopShape {
    pub hidden: usize,
    pub ffn_scale: usize,
}

/// Single-layer FLOP report.
pub fn count(shape: FlopShape, lengths: &SeqLengths, variant: FlopVariant) -> FlopReport {
    let k = shape.hidden as u64;
    let kf = k as f64;
    let bs = lengths.batch_size() as u64;
    let m = lengths.padded_rows() as u64;
    let valid = lengths.total_tokens() as u64;
    let alpha = lengths.alpha();
    let ffn = 2 * shape.ffn_scale as u64;

    let mf = m as f64;
    let am = alpha * mf;
    let padded_mha_analytic = if bs == 0 { 0.0 } else { 4.0 * mf * mf / bs as f64 * kf };
    let padded_mha_exact = 4 * bs * (lengths.max_seq_len() as u64).pow(2) * k;

    let (rows, rows_f) = match variant {
        FlopVariant::Baseline => (m, mf),
        _ => (valid, am),
    };
    let linear = |factor: u64| ModuleFlops {
        analytic: factor as f64 * rows_f * kf * kf,
        exact: factor * rows * k * k,
    };
    let mha = match variant {
        FlopVariant::ZeroPaddingFusedMha => ModuleFlops {
            analytic: if bs == 0 { 0.0 } else { 4.0 * am * am / bs as f64 * kf },
            exact: lengths.lengths().iter().map(|&l| 4 * (l as u64).pow(2) * k).sum(),
        },
        _ => ModuleFlops {
            analytic: padded_mha_analytic,
            exact: padded_mha_exact,
        },
    };
    let (gemm0, gemm1, gemm2, gemm3) = (linear(6), linear(2), linear(ffn), linear(ffn));
    let parts = [gemm0, mha, gemm1, gemm2, gemm3];
    FlopReport {
        variant,
        alpha,
        gemm0,
        mha,
        gemm1,
        gemm2,
        gemm3,
        total_analytic: parts.iter().map(|p| p.analytic).sum(),
        total_exact: parts.iter().map(|p| p.exact).sum(),
    }
}

/// Per-module counters filled in by an instrumented forward pass.
#[derive(Debug, Default)]
pub struct FlopCounters {
    pub gemm0: AtomicU64,
    pub mha: AtomicU64,
    pub gemm1: AtomicU64,
    pub gemm2: AtomicU64,
    pub gemm3: AtomicU64,
}

/// Plain snapshot of [`FlopCounters`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub gemm0: u64,
    pub mha: u64,
    pub gemm1: u64,
    pub gemm2: u64,
    pub gemm3: u64,
}

impl CounterSnapshot {
    pub fn total(&self) -> u64 {
        self.gemm0 + self.mha + self.gemm1 + self.gemm2 + self.gemm3
    }

    /// True when every module matches the report's exact count.
    pub fn matches_exact(&self, report: &FlopReport) -> bool {
        self.gemm0 == report.gemm0.exact
            && self.mha == report.mha.exact
            && self.gemm1 == report.gemm1.exact
            && self.gemm2 == report.gemm2.exact
            && self.gemm3 == report.gemm3.exact
    }
}

impl FlopCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            gemm0: self.gemm0.load(Ordering::Relaxed),
            mha: self.mha.load(Ordering::Relaxed),
            gemm1: self.gemm1.load(Ordering::Relaxed),
            gemm2: self.gemm2.load(Ordering::Relaxed),
            gemm3: self.gemm3.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn add(counter: &AtomicU64, flops: u64) {
        counter.fetch_add(flops, Ordering::Relaxed);
    }
}
