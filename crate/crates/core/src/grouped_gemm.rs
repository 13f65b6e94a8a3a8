//! Grouped GEMM: many independently shaped GEMMs under one tile scheduler.
//!
//! Tiles are numbered problem by problem (row-major inside a problem) and
//! dealt round-robin to workers, so worker `w` owns global tiles
//! `w, w + workers, w + 2·workers, …`. A problem visitor resolves a global
//! tile index to its problem and tile coordinates; in prefetch mode a single
//! visit resolves a whole block of consecutive indices at once.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{
    check_operands, compute_tile_with_epilogue, gemm_flops, Epilogue, PartialGrid, SoftmaxTransform, Tensor,
    TilePartial,
};

pub const DEFAULT_GROUPED_TILE: usize = 128;
pub const PREFETCH_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProblemShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupedProblemSet {
    shapes: Vec<ProblemShape>,
    tile_m: usize,
    tile_n: usize,
    // global index of each problem's first tile, plus the total at the end
    tile_starts: Vec<usize>,
}

impl GroupedProblemSet {
    pub fn new(shapes: Vec<ProblemShape>, tile_m: usize, tile_n: usize) -> Result<Self> {
        if tile_m == 0 || tile_n == 0 {
            return Err(Error::shape("grouped gemm", "tile sizes must be at least 1"));
        }
        if let Some(i) = shapes.iter().position(|s| s.m == 0 || s.n == 0 || s.k == 0) {
            return Err(Error::Problem {
                index: i,
                detail: format!("degenerate shape {:?}", shapes[i]),
            });
        }
        let mut tile_starts = Vec::with_capacity(shapes.len() + 1);
        let mut acc = 0;
        for s in &shapes {
            tile_starts.push(acc);
            acc += s.m.div_ceil(tile_m) * s.n.div_ceil(tile_n);
        }
        tile_starts.push(acc);
        Ok(GroupedProblemSet {
            shapes,
            tile_m,
            tile_n,
            tile_starts,
        })
    }

    pub fn shapes(&self) -> &[ProblemShape] {
        &self.shapes
    }

    pub fn tile_m(&self) -> usize {
        self.tile_m
    }

    pub fn tile_n(&self) -> usize {
        self.tile_n
    }

    /// `(tile rows, tile cols)` of problem `i`.
    pub fn tile_grid(&self, i: usize) -> (usize, usize) {
        let s = self.shapes[i];
        (s.m.div_ceil(self.tile_m), s.n.div_ceil(self.tile_n))
    }

    pub fn total_tiles(&self) -> usize {
        *self.tile_starts.last().unwrap_or(&0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TileAssignment {
    pub problem_index: usize,
    pub tile_row: usize,
    pub tile_col: usize,
    pub global_tile_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerMode {
    /// One scheduler visit per tile.
    Baseline,
    /// One visit resolves `width` consecutive tiles.
    Prefetch { width: usize },
}

impl SchedulerMode {
    pub const PREFETCH32: SchedulerMode = SchedulerMode::Prefetch {
        width: PREFETCH_WIDTH,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SchedulerStats {
    pub visits: usize,
    pub waves: usize,
    pub idle_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub per_worker: Vec<Vec<TileAssignment>>,
    pub stats: SchedulerStats,
}

impl Schedule {
    pub fn workers(&self) -> usize {
        self.per_worker.len()
    }

    /// Wave table: `waves[w][worker]` is the tile that worker runs in wave `w`.
    pub fn waves(&self) -> Vec<Vec<Option<TileAssignment>>> {
        (0..self.stats.waves)
            .map(|w| self.per_worker.iter().map(|tiles| tiles.get(w).copied()).collect())
            .collect()
    }

    /// Workers with nothing to do in the last wave.
    pub fn idle_in_final_wave(&self) -> Vec<usize> {
        match self.waves().last() {
            Some(last) => last
                .iter()
                .enumerate()
                .filter(|(_, t)| t.is_none())
                .map(|(w, _)| w)
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Resolves global tile indices to problem coordinates, counting how often
/// the scheduler metadata is computed.
struct ProblemVisitor<'a> {
    set: &'a GroupedProblemSet,
    problem: usize,
    visits: usize,
}

impl<'a> ProblemVisitor<'a> {
    fn new(set: &'a GroupedProblemSet) -> Self {
        ProblemVisitor {
            set,
            problem: 0,
            visits: 0,
        }
    }

    fn locate(&mut self, global: usize) -> TileAssignment {
        while global >= self.set.tile_starts[self.problem + 1] {
            self.problem += 1;
        }
        let local = global - self.set.tile_starts[self.problem];
        let (_, cols) = self.set.tile_grid(self.problem);
        TileAssignment {
            problem_index: self.problem,
            tile_row: local / cols,
            tile_col: local % cols,
            global_tile_index: global,
        }
    }

    /// One visit: metadata for tiles `[first, first + count)`.
    fn visit(&mut self, first: usize, count: usize) -> Vec<TileAssignment> {
        self.visits += 1;
        let end = (first + count).min(self.set.total_tiles());
        (first..end).map(|g| self.locate(g)).collect()
    }
}

/// Round-robin tile schedule over `workers` logical workers.
pub fn schedule(set: &GroupedProblemSet, workers: usize, mode: SchedulerMode) -> Result<Schedule> {
    if workers == 0 {
        return Err(Error::Config("scheduler needs at least one worker".into()));
    }
    let width = match mode {
        SchedulerMode::Baseline => 1,
        SchedulerMode::Prefetch { width } if width >= 1 => width,
        SchedulerMode::Prefetch { .. } => {
            return Err(Error::Config("prefetch width must be at least 1".into()))
        }
    };
    let total = set.total_tiles();
    let mut per_worker = vec![Vec::new(); workers];
    let mut visitor = ProblemVisitor::new(set);
    let mut global = 0;
    while global < total {
        for tile in visitor.visit(global, width) {
            per_worker[tile.global_tile_index % workers].push(tile);
        }
        global += width;
    }
    let waves = total.div_ceil(workers);
    let stats = SchedulerStats {
        visits: visitor.visits,
        waves,
        idle_slots: waves * workers - total,
    };
    Ok(Schedule { per_worker, stats })
}

/// One sub-problem: `a · b`, optionally transforming A's rows as they load.
#[derive(Clone, Copy, Debug)]
pub struct GemmProblem<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub transform: Option<SoftmaxTransform<'a>>,
}

impl<'a> GemmProblem<'a> {
    pub fn new(a: &'a Tensor, b: &'a Tensor) -> Self {
        GemmProblem { a, b, transform: None }
    }

    pub fn with_transform(mut self, transform: SoftmaxTransform<'a>) -> Self {
        self.transform = Some(transform);
        self
    }

    pub fn shape(&self) -> ProblemShape {
        ProblemShape {
            m: self.a.rows(),
            n: self.b.cols(),
            k: self.a.cols(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupedGemmConfig {
    pub tile_m: usize,
    pub tile_n: usize,
    pub workers: usize,
    pub mode: SchedulerMode,
}

impl Default for GroupedGemmConfig {
    fn default() -> Self {
        GroupedGemmConfig {
            tile_m: DEFAULT_GROUPED_TILE,
            tile_n: DEFAULT_GROUPED_TILE,
            workers: 1,
            mode: SchedulerMode::PREFETCH32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupedGemmOutput {
    pub outputs: Vec<Tensor>,
    /// Present when the epilogue is `SoftmaxPartialReduce`.
    pub partials: Option<Vec<PartialGrid>>,
    pub stats: SchedulerStats,
    pub flops: u64,
}

struct TileResult {
    tile: TileAssignment,
    data: Vec<f32>,
    partials: Vec<TilePartial>,
}

/// Runs every problem under one schedule. Output `i` equals the plain
/// blocked GEMM of problem `i` with the same epilogue and transform.
pub fn grouped_gemm_run(
    problems: &[GemmProblem],
    config: &GroupedGemmConfig,
    epilogue: Epilogue,
) -> Result<GroupedGemmOutput> {
    for (i, p) in problems.iter().enumerate() {
        check_operands(p.a, p.b, p.transform.as_ref()).map_err(|detail| Error::Problem { index: i, detail })?;
        epilogue.validate(p.b.cols()).map_err(|e| Error::Problem {
            index: i,
            detail: e.to_string(),
        })?;
    }
    let set = GroupedProblemSet::new(
        problems.iter().map(GemmProblem::shape).collect(),
        config.tile_m,
        config.tile_n,
    )?;
    let plan = schedule(&set, config.workers, config.mode)?;
    let (tm, tn) = (config.tile_m, config.tile_n);

    let results: Vec<Vec<TileResult>> = plan
        .per_worker
        .par_iter()
        .map(|tiles| {
            tiles
                .iter()
                .map(|&tile| {
                    let p = &problems[tile.problem_index];
                    let s = p.shape();
                    let r0 = tile.tile_row * tm;
                    let r1 = (r0 + tm).min(s.m);
                    let c0 = tile.tile_col * tn;
                    let c1 = (c0 + tn).min(s.n);
                    let width = c1 - c0;
                    let mut data = vec![0.0; (r1 - r0) * width];
                    let partials = compute_tile_with_epilogue(
                        p.a,
                        p.b,
                        p.transform.as_ref(),
                        &epilogue,
                        (r0, r1),
                        (c0, c1),
                        &mut data,
                        width,
                        0,
                    );
                    TileResult { tile, data, partials }
                })
                .collect()
        })
        .collect();

    let mut outputs: Vec<Tensor> = problems.iter().map(|p| Tensor::zeros(p.a.rows(), p.b.cols())).collect();
    let emits = matches!(epilogue, Epilogue::SoftmaxPartialReduce { .. });
    let mut grids: Vec<PartialGrid> = if emits {
        set.shapes()
            .iter()
            .map(|s| {
                let tile_cols = s.n.div_ceil(tn);
                PartialGrid {
                    rows: s.m,
                    tile_cols,
                    entries: vec![
                        TilePartial {
                            max: f32::NAN,
                            sum: f32::NAN
                        };
                        s.m * tile_cols
                    ],
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    for res in results.into_iter().flatten() {
        let t = res.tile;
        let out = &mut outputs[t.problem_index];
        let r0 = t.tile_row * tm;
        let c0 = t.tile_col * tn;
        let width = (c0 + tn).min(out.cols()) - c0;
        for (ri, chunk) in res.data.chunks_exact(width).enumerate() {
            out.row_mut(r0 + ri)[c0..c0 + width].copy_from_slice(chunk);
        }
        if emits {
            let grid = &mut grids[t.problem_index];
            for (ri, partial) in res.partials.into_iter().enumerate() {
                grid.entries[(r0 + ri) * grid.tile_cols + t.tile_col] = partial;
            }
        }
    }

    let flops = set.shapes().iter().map(|s| gemm_flops(s.m, s.n, s.k)).sum();
    Ok(GroupedGemmOutput {
        outputs,
        partials: emits.then_some(grids),
        stats: plan.stats,
        flops,
    })
}

/// `(max, Σ exp(x − max))` of each row of one output tile.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialFragment {
    pub rows: std::ops::Range<usize>,
    pub tile_col: usize,
    pub entries: Vec<TilePartial>,
}

pub fn epilogue_partial_reduce(tile_output: &Tensor, rows: std::ops::Range<usize>, tile_col: usize) -> PartialFragment {
    assert_eq!(rows.len(), tile_output.rows(), "row range must match tile height");
    let entries = (0..tile_output.rows())
        .map(|r| TilePartial::of_row(tile_output.row(r)))
        .collect();
    PartialFragment {
        rows,
        tile_col,
        entries,
    }
}
