use packedbert::bench::{gen_lengths as core_gen_lengths, LengthMode, Preset};
use packedbert::encoder::{forward, EncoderWeights, ModelConfig, OptFlags};
use packedbert::flops::{count, FlopVariant};
use packedbert::grouped_gemm::{schedule, GroupedProblemSet, ProblemShape, SchedulerMode};
use packedbert::packing::{pack_rows, unpack_rows, PackingPlan, SeqLengths};
use packedbert::tensor::{matmul as core_matmul, Epilogue};
use packedbert::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "packedbert_py")]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        Tensor::from_rows(&rows).map(|inner| PyTensor { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn zeros(rows: usize, cols: usize) -> Self {
        PyTensor {
            inner: Tensor::zeros(rows, cols),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (rows, cols, seed, lo = -1.0, hi = 1.0))]
    fn random(rows: usize, cols: usize, seed: u64, lo: f32, hi: f32) -> Self {
        PyTensor {
            inner: Tensor::random(rows, cols, lo, hi, seed),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows(), self.inner.cols())
    }

    fn tolist(&self) -> Vec<Vec<f32>> {
        self.inner.to_rows()
    }

    fn transpose(&self) -> Self {
        PyTensor {
            inner: self.inner.transpose(),
        }
    }

    fn rel_error(&self, reference: &PyTensor) -> PyResult<f64> {
        if self.shape() != reference.shape() {
            return Err(PyValueError::new_err("shapes differ"));
        }
        Ok(self.inner.rel_frobenius_error(&reference.inner))
    }

    fn bit_eq(&self, other: &PyTensor) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape=({}, {}))", self.inner.rows(), self.inner.cols())
    }
}

#[pyclass(name = "PackingPlan", module = "packedbert_py")]
struct PyPackingPlan {
    inner: PackingPlan,
}

#[pymethods]
impl PyPackingPlan {
    #[new]
    fn new(lengths: Vec<usize>, max_seq_len: usize) -> PyResult<Self> {
        let lengths = SeqLengths::new(lengths, max_seq_len).map_err(to_py)?;
        Ok(PyPackingPlan {
            inner: PackingPlan::from_lengths(&lengths),
        })
    }

    #[getter]
    fn offsets(&self) -> Vec<usize> {
        self.inner.offsets().to_vec()
    }

    #[getter]
    fn starts(&self) -> Vec<usize> {
        self.inner.starts().to_vec()
    }

    #[getter]
    fn lengths(&self) -> Vec<usize> {
        self.inner.lengths().lengths().to_vec()
    }

    #[getter]
    fn valid_word_cnt(&self) -> usize {
        self.inner.valid_word_cnt()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.lengths().alpha()
    }

    fn pack(&self, padded: &PyTensor) -> PyResult<PyTensor> {
        pack_rows(&padded.inner, &self.inner)
            .map(|inner| PyTensor { inner })
            .map_err(to_py)
    }

    fn unpack(&self, packed: &PyTensor) -> PyResult<PyTensor> {
        unpack_rows(&packed.inner, &self.inner)
            .map(|inner| PyTensor { inner })
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "PackingPlan(lengths={:?}, max_seq_len={})",
            self.inner.lengths().lengths(),
            self.inner.max_seq_len()
        )
    }
}

/// Encoder configuration plus initialized weights.
#[pyclass(name = "Encoder", module = "packedbert_py")]
struct PyEncoder {
    config: ModelConfig,
    weights: EncoderWeights,
}

fn parse_flags(flags: &str) -> PyResult<OptFlags> {
    match flags {
        "none" => Ok(OptFlags::ALL_OFF),
        "all" => Ok(OptFlags::ALL_ON),
        name => OptFlags::ladder()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| PyValueError::new_err(format!("unknown flag set `{name}`"))),
    }
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (preset = "custom", seed = 0, layers = None, head_num = None, head_size = None, weights = None))]
    fn new(
        preset: &str,
        seed: u64,
        layers: Option<usize>,
        head_num: Option<usize>,
        head_size: Option<usize>,
        weights: Option<std::path::PathBuf>,
    ) -> PyResult<Self> {
        let mut config = preset.parse::<Preset>().map_err(to_py)?.config();
        if let Some(l) = layers {
            config.layers = l;
        }
        if let Some(h) = head_num {
            config.head_num = h;
        }
        if let Some(s) = head_size {
            config.head_size = s;
        }
        config.validate().map_err(to_py)?;
        let weights = match weights {
            Some(path) => EncoderWeights::load(&path, &config).map_err(to_py)?,
            None => EncoderWeights::init(&config, seed),
        };
        Ok(PyEncoder { config, weights })
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.config.hidden()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.config.layers
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.weights.save(&path).map_err(to_py)
    }

    /// Runs the stacked layers on a padded batch. `flags` is `none`, `all`,
    /// or a ladder step name. Returns the padded output and per-module FLOPs.
    #[pyo3(signature = (lengths, max_seq_len, input, flags = "all", workers = 1))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        lengths: Vec<usize>,
        max_seq_len: usize,
        input: &PyTensor,
        flags: &str,
        workers: usize,
    ) -> PyResult<(PyTensor, Bound<'py, PyDict>)> {
        let lengths = SeqLengths::new(lengths, max_seq_len).map_err(to_py)?;
        let mut config = self.config.clone().with_opt(parse_flags(flags)?);
        config.batch_size = lengths.batch_size();
        config.max_seq_len = max_seq_len;
        config.workers = workers.max(1);
        let out = packedbert::with_workers(config.workers, || {
            forward(&self.weights, &lengths, &input.inner, &config)
        })
        .map_err(to_py)?;
        let flops = PyDict::new(py);
        let f = out.flops;
        for (k, v) in [
            ("gemm0", f.gemm0),
            ("mha", f.mha),
            ("gemm1", f.gemm1),
            ("gemm2", f.gemm2),
            ("gemm3", f.gemm3),
        ] {
            flops.set_item(k, v)?;
        }
        Ok((PyTensor { inner: out.output }, flops))
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, bias = None, gelu = false))]
fn matmul(a: &PyTensor, b: &PyTensor, bias: Option<Vec<f32>>, gelu: bool) -> PyResult<PyTensor> {
    let epilogue = match (&bias, gelu) {
        (Some(bias), true) => Epilogue::AddBiasGelu(bias),
        (Some(bias), false) => Epilogue::AddBias(bias),
        (None, true) => return Err(PyValueError::new_err("gelu needs a bias")),
        (None, false) => Epilogue::None,
    };
    core_matmul(&a.inner, &b.inner, epilogue)
        .map(|inner| PyTensor { inner })
        .map_err(to_py)
}

#[pyfunction]
fn gelu(x: f32) -> f32 {
    packedbert::fusion::gelu(x)
}

#[pyfunction]
#[pyo3(signature = (batch_size, max_seq_len, seed = 0, alpha = None))]
fn gen_lengths(batch_size: usize, max_seq_len: usize, seed: u64, alpha: Option<f64>) -> PyResult<Vec<usize>> {
    let mode = alpha.map_or(LengthMode::Uniform, LengthMode::FixedAlpha);
    core_gen_lengths(batch_size, max_seq_len, mode, seed)
        .map(|l| l.lengths().to_vec())
        .map_err(to_py)
}

/// Per-module `(analytic, exact)` FLOPs for one layer.
#[pyfunction]
#[pyo3(signature = (lengths, max_seq_len, variant = "baseline", hidden = 768, ffn_scale = 4))]
fn flop_count<'py>(
    py: Python<'py>,
    lengths: Vec<usize>,
    max_seq_len: usize,
    variant: &str,
    hidden: usize,
    ffn_scale: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let variant = match variant {
        "baseline" => FlopVariant::Baseline,
        "zero_padding" => FlopVariant::ZeroPadding,
        "zero_padding_fused_mha" => FlopVariant::ZeroPaddingFusedMha,
        other => return Err(PyValueError::new_err(format!("unknown variant `{other}`"))),
    };
    let lengths = SeqLengths::new(lengths, max_seq_len).map_err(to_py)?;
    let shape = packedbert::flops::FlopShape { hidden, ffn_scale };
    let report = count(shape, &lengths, variant);
    let d = PyDict::new(py);
    for (name, m) in report.modules() {
        d.set_item(name, (m.analytic, m.exact))?;
    }
    d.set_item("total", (report.total_analytic, report.total_exact))?;
    Ok(d)
}

/// Scheduler statistics `(visits, waves, idle_slots)` for `(m, n)` problems.
#[pyfunction]
#[pyo3(signature = (shapes, workers, tile = 128, prefetch = true))]
fn schedule_stats(shapes: Vec<(usize, usize)>, workers: usize, tile: usize, prefetch: bool) -> PyResult<(usize, usize, usize)> {
    let shapes = shapes.into_iter().map(|(m, n)| ProblemShape { m, n, k: 1 }).collect();
    let set = GroupedProblemSet::new(shapes, tile, tile).map_err(to_py)?;
    let mode = if prefetch {
        SchedulerMode::PREFETCH32
    } else {
        SchedulerMode::Baseline
    };
    let s = schedule(&set, workers, mode).map_err(to_py)?;
    Ok((s.stats.visits, s.stats.waves, s.stats.idle_slots))
}

#[pymodule]
fn packedbert_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyPackingPlan>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    m.add_function(wrap_pyfunction!(gen_lengths, m)?)?;
    m.add_function(wrap_pyfunction!(flop_count, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_stats, m)?)?;
    Ok(())
}
