//! BERT encoder layer and stacked forward pass with step-wise optimization flags.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{dispatch_mha, mha_baseline, mha_padded_zero_pad, AttentionInput, LongParams, MhaConfig, MhaOutput};
use crate::error::{Error, Result};
use crate::flops::{CounterSnapshot, FlopCounters, FlopShape, FlopVariant};
use crate::fusion::{
    add_bias, add_bias_residual_layernorm, add_bias_residual_layernorm_unfused, gelu_tensor, LayernormParams,
};
use crate::grouped_gemm::{GroupedGemmConfig, SchedulerMode, DEFAULT_GROUPED_TILE};
use crate::packing::{apply_mask, pack_rows, unpack_rows, PackingPlan, SeqLengths};
use crate::tensor::{batched_gemm, gemm_flops, matmul, Epilogue, Tensor};

const INIT_RANGE: f32 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OptFlags {
    pub fuse_layernorm: bool,
    pub fuse_bias_gelu: bool,
    pub zero_padding: bool,
    pub fused_mha: bool,
}

impl OptFlags {
    pub const ALL_OFF: OptFlags = OptFlags {
        fuse_layernorm: false,
        fuse_bias_gelu: false,
        zero_padding: false,
        fused_mha: false,
    };

    pub const ALL_ON: OptFlags = OptFlags {
        fuse_layernorm: true,
        fuse_bias_gelu: true,
        zero_padding: true,
        fused_mha: true,
    };

    /// Cumulative ladder: each step keeps every earlier optimization.
    pub fn ladder() -> [(&'static str, OptFlags); 5] {
        let mut f = OptFlags::ALL_OFF;
        let base = f;
        f.fuse_layernorm = true;
        let ln = f;
        f.fuse_bias_gelu = true;
        let gelu = f;
        f.zero_padding = true;
        let zp = f;
        f.fused_mha = true;
        [
            ("baseline", base),
            ("fuse_layernorm", ln),
            ("fuse_bias_gelu", gelu),
            ("zero_padding", zp),
            ("fused_mha", f),
        ]
    }

    /// Every flag combination allowed by the dependency rule.
    pub fn lattice() -> Vec<OptFlags> {
        (0..16u8)
            .map(|bits| OptFlags {
                fuse_layernorm: bits & 1 != 0,
                fuse_bias_gelu: bits & 2 != 0,
                zero_padding: bits & 4 != 0,
                fused_mha: bits & 8 != 0,
            })
            .filter(|f| !f.fused_mha || f.zero_padding)
            .collect()
    }

    pub fn flop_variant(&self) -> FlopVariant {
        match (self.zero_padding, self.fused_mha) {
            (true, true) => FlopVariant::ZeroPaddingFusedMha,
            (true, false) => FlopVariant::ZeroPadding,
            _ => FlopVariant::Baseline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub head_num: usize,
    pub head_size: usize,
    pub ffn_scale: usize,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub cutoff: usize,
    pub opt: OptFlags,
    pub share_layer_weights: bool,
    pub split_seq_len: usize,
    pub long_tile: usize,
    pub workers: usize,
    /// Fuse the bias add into the unpack scatter around unfused attention.
    pub fuse_pack_passes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::bert_base()
    }
}

impl ModelConfig {
    pub fn bert_base() -> Self {
        ModelConfig {
            layers: 12,
            head_num: 12,
            head_size: 64,
            ffn_scale: 4,
            max_seq_len: 256,
            batch_size: 16,
            cutoff: crate::attention::DEFAULT_CUTOFF,
            opt: OptFlags::ALL_OFF,
            share_layer_weights: false,
            split_seq_len: crate::attention::DEFAULT_SPLIT_SEQ_LEN,
            long_tile: DEFAULT_GROUPED_TILE,
            workers: 1,
            fuse_pack_passes: true,
        }
    }

    pub fn albert() -> Self {
        ModelConfig {
            head_num: 16,
            share_layer_weights: true,
            ..Self::bert_base()
        }
    }

    pub fn distilbert() -> Self {
        ModelConfig {
            layers: 6,
            ..Self::bert_base()
        }
    }

    /// Layer and head counts only; the attention is the standard one.
    pub fn deberta_cfg() -> Self {
        Self::bert_base()
    }

    /// Downscaled test configuration: 2 heads of size 8.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 1,
            head_num: 2,
            head_size: 8,
            max_seq_len: 16,
            batch_size: 4,
            ..Self::bert_base()
        }
    }

    pub fn with_opt(mut self, opt: OptFlags) -> Self {
        self.opt = opt;
        self
    }

    pub fn hidden(&self) -> usize {
        self.head_num * self.head_size
    }

    pub fn flop_shape(&self) -> FlopShape {
        FlopShape {
            hidden: self.hidden(),
            ffn_scale: self.ffn_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.opt.fused_mha && !self.opt.zero_padding {
            return Err(Error::Config("fused_mha requires zero_padding".into()));
        }
        for (name, v) in [
            ("layers", self.layers),
            ("head_num", self.head_num),
            ("head_size", self.head_size),
            ("ffn_scale", self.ffn_scale),
            ("split_seq_len", self.split_seq_len),
            ("long_tile", self.long_tile),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn mha_config(&self) -> MhaConfig {
        MhaConfig {
            cutoff: self.cutoff,
            split_seq_len: self.split_seq_len,
            long: LongParams {
                gemm: GroupedGemmConfig {
                    tile_m: self.long_tile,
                    tile_n: self.long_tile,
                    workers: self.workers,
                    mode: SchedulerMode::PREFETCH32,
                },
            },
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not present keep
    /// their value from `base`.
    pub fn from_kv_str(text: &str, base: ModelConfig) -> Result<Self> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: {key}: invalid {what} `{value}`", lineno + 1));
            let num = || value.parse::<usize>().map_err(|_| bad("count"));
            let flag = || value.parse::<bool>().map_err(|_| bad("boolean"));
            match key {
                "layers" => cfg.layers = num()?,
                "head_num" => cfg.head_num = num()?,
                "head_size" => cfg.head_size = num()?,
                "ffn_scale" => cfg.ffn_scale = num()?,
                "max_seq_len" => cfg.max_seq_len = num()?,
                "batch_size" => cfg.batch_size = num()?,
                "cutoff" => cfg.cutoff = num()?,
                "split_seq_len" => cfg.split_seq_len = num()?,
                "long_tile" => cfg.long_tile = num()?,
                "workers" => cfg.workers = num()?,
                "fuse_layernorm" => cfg.opt.fuse_layernorm = flag()?,
                "fuse_bias_gelu" => cfg.opt.fuse_bias_gelu = flag()?,
                "zero_padding" => cfg.opt.zero_padding = flag()?,
                "fused_mha" => cfg.opt.fused_mha = flag()?,
                "share_layer_weights" => cfg.share_layer_weights = flag()?,
                "fuse_pack_passes" => cfg.fuse_pack_passes = flag()?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_kv(path: &Path, base: ModelConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_kv_str(&text, base)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let o = &self.opt;
        for (k, v) in [
            ("layers", self.layers.to_string()),
            ("head_num", self.head_num.to_string()),
            ("head_size", self.head_size.to_string()),
            ("ffn_scale", self.ffn_scale.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("cutoff", self.cutoff.to_string()),
            ("split_seq_len", self.split_seq_len.to_string()),
            ("long_tile", self.long_tile.to_string()),
            ("workers", self.workers.to_string()),
            ("fuse_layernorm", o.fuse_layernorm.to_string()),
            ("fuse_bias_gelu", o.fuse_bias_gelu.to_string()),
            ("zero_padding", o.zero_padding.to_string()),
            ("fused_mha", o.fused_mha.to_string()),
            ("share_layer_weights", self.share_layer_weights.to_string()),
            ("fuse_pack_passes", self.fuse_pack_passes.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Parameters of one encoder layer. `qkv_weight` holds the Q, K and V
/// projection matrices side by side in columns `[0,h)`, `[h,2h)`, `[2h,3h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub qkv_weight: Tensor,
    pub qkv_bias: Vec<f32>,
    pub attn_out_weight: Tensor,
    pub attn_out_bias: Vec<f32>,
    pub ln1: LayernormParams,
    pub ffn_w1: Tensor,
    pub ffn_b1: Vec<f32>,
    pub ffn_w2: Tensor,
    pub ffn_b2: Vec<f32>,
    pub ln2: LayernormParams,
}

impl LayerWeights {
    /// Matrices and biases uniform in [−0.02, 0.02]; γ = 1 + U, β = U.
    fn random(hidden: usize, ffn_scale: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE).expect("valid range");
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| dist.sample(rng)).collect() };
        let ffn = hidden * ffn_scale;
        let mut mat = |r: usize, c: usize| Tensor::from_vec(r, c, draw(r * c)).expect("sized");
        let qkv_weight = mat(hidden, 3 * hidden);
        let attn_out_weight = mat(hidden, hidden);
        let ffn_w1 = mat(hidden, ffn);
        let ffn_w2 = mat(ffn, hidden);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| dist.sample(rng)).collect() };
        let qkv_bias = draw(3 * hidden);
        let attn_out_bias = draw(hidden);
        let ffn_b1 = draw(ffn);
        let ffn_b2 = draw(hidden);
        let mut layernorm = || LayernormParams {
            gamma: draw(hidden).into_iter().map(|u| 1.0 + u).collect(),
            beta: draw(hidden),
            epsilon: crate::fusion::LAYERNORM_EPS,
        };
        let ln1 = layernorm();
        let ln2 = layernorm();
        LayerWeights {
            qkv_weight,
            qkv_bias,
            attn_out_weight,
            attn_out_bias,
            ln1,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln2,
        }
    }

    fn zeros(hidden: usize, ffn_scale: usize) -> Self {
        let ffn = hidden * ffn_scale;
        LayerWeights {
            qkv_weight: Tensor::zeros(hidden, 3 * hidden),
            qkv_bias: vec![0.0; 3 * hidden],
            attn_out_weight: Tensor::zeros(hidden, hidden),
            attn_out_bias: vec![0.0; hidden],
            ln1: LayernormParams::identity(hidden),
            ffn_w1: Tensor::zeros(hidden, ffn),
            ffn_b1: vec![0.0; ffn],
            ffn_w2: Tensor::zeros(ffn, hidden),
            ffn_b2: vec![0.0; hidden],
            ln2: LayernormParams::identity(hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.attn_out_weight.rows()
    }

    // declaration order of the weight file
    fn fields(&self) -> [(&'static str, &[f32]); 12] {
        [
            ("qkv_weight", self.qkv_weight.data()),
            ("qkv_bias", &self.qkv_bias),
            ("attn_out_weight", self.attn_out_weight.data()),
            ("attn_out_bias", &self.attn_out_bias),
            ("ln1_gamma", &self.ln1.gamma),
            ("ln1_beta", &self.ln1.beta),
            ("ffn_w1", self.ffn_w1.data()),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", self.ffn_w2.data()),
            ("ffn_b2", &self.ffn_b2),
            ("ln2_gamma", &self.ln2.gamma),
            ("ln2_beta", &self.ln2.beta),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub layers: usize,
    pub head_num: usize,
    pub head_size: usize,
    pub ffn_scale: usize,
    /// One entry when layers share weights, `layers` entries otherwise.
    pub stored: Vec<LayerWeights>,
}

const MAGIC: &[u8; 8] = b"PKBERTW\0";
const FORMAT_VERSION: u32 = 1;

impl EncoderWeights {
    /// Deterministic random weights for `config`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = if config.share_layer_weights { 1 } else { config.layers };
        let stored = (0..n)
            .map(|_| LayerWeights::random(config.hidden(), config.ffn_scale, &mut rng))
            .collect();
        EncoderWeights {
            layers: config.layers,
            head_num: config.head_num,
            head_size: config.head_size,
            ffn_scale: config.ffn_scale,
            stored,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let n = if config.share_layer_weights { 1 } else { config.layers };
        EncoderWeights {
            layers: config.layers,
            head_num: config.head_num,
            head_size: config.head_size,
            ffn_scale: config.ffn_scale,
            stored: vec![LayerWeights::zeros(config.hidden(), config.ffn_scale); n],
        }
    }

    pub fn shared(&self) -> bool {
        self.stored.len() == 1 && self.layers > 1
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        if self.stored.len() == 1 {
            &self.stored[0]
        } else {
            &self.stored[i]
        }
    }

    /// Copies the shared layer into `layers` independent entries.
    pub fn materialized(&self) -> EncoderWeights {
        EncoderWeights {
            stored: (0..self.layers).map(|i| self.layer(i).clone()).collect(),
            ..self.clone()
        }
    }

    fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let mismatch = |field: &str, have: usize, want: usize| Error::WeightFormat {
            field: field.into(),
            detail: format!("weights have {have}, config expects {want}"),
        };
        if self.head_num * self.head_size != config.hidden() {
            return Err(mismatch("hidden_dim", self.head_num * self.head_size, config.hidden()));
        }
        for (field, have, want) in [
            ("head_num", self.head_num, config.head_num),
            ("head_size", self.head_size, config.head_size),
            ("layers", self.layers, config.layers),
            ("ffn_scale", self.ffn_scale, config.ffn_scale),
        ] {
            if have != want {
                return Err(mismatch(field, have, want));
            }
        }
        Ok(())
    }

    /// Little-endian header (magic, version, layers, head_num, head_size,
    /// ffn_scale, stored layer count, two layernorm epsilons per stored layer)
    /// followed by raw f32 tensors in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.layers as u32,
            self.head_num as u32,
            self.head_size as u32,
            self.ffn_scale as u32,
            self.stored.len() as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for layer in &self.stored {
            buf.extend_from_slice(&layer.ln1.epsilon.to_le_bytes());
            buf.extend_from_slice(&layer.ln2.epsilon.to_le_bytes());
        }
        for layer in &self.stored {
            for (_, values) in layer.fields() {
                for v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)
    }

    /// Reads a weight file and checks its header against `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let weights = Self::load_unchecked(path)?;
        weights.check_config(config)?;
        Ok(weights)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::WeightFormat {
                field: "magic".into(),
                detail: "not a packedbert weight file".into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::WeightFormat {
                field: "version".into(),
                detail: format!("unsupported version {version}"),
            });
        }
        let layers = r.u32("layers")? as usize;
        let head_num = r.u32("head_num")? as usize;
        let head_size = r.u32("head_size")? as usize;
        let ffn_scale = r.u32("ffn_scale")? as usize;
        let stored_n = r.u32("stored_layers")? as usize;
        if stored_n != 1 && stored_n != layers {
            return Err(Error::WeightFormat {
                field: "stored_layers".into(),
                detail: format!("{stored_n} stored layers for a {layers}-layer model"),
            });
        }
        let mut eps = Vec::with_capacity(stored_n);
        for _ in 0..stored_n {
            eps.push((r.f32("ln1_epsilon")?, r.f32("ln2_epsilon")?));
        }
        let hidden = head_num * head_size;
        let template = LayerWeights::zeros(hidden, ffn_scale);
        let mut stored = Vec::with_capacity(stored_n);
        for &(e1, e2) in &eps {
            let mut layer = template.clone();
            layer.ln1.epsilon = e1;
            layer.ln2.epsilon = e2;
            let qkv = r.floats(hidden * 3 * hidden, "qkv_weight")?;
            layer.qkv_weight = Tensor::from_vec(hidden, 3 * hidden, qkv)?;
            layer.qkv_bias = r.floats(3 * hidden, "qkv_bias")?;
            layer.attn_out_weight = Tensor::from_vec(hidden, hidden, r.floats(hidden * hidden, "attn_out_weight")?)?;
            layer.attn_out_bias = r.floats(hidden, "attn_out_bias")?;
            layer.ln1.gamma = r.floats(hidden, "ln1_gamma")?;
            layer.ln1.beta = r.floats(hidden, "ln1_beta")?;
            let ffn = hidden * ffn_scale;
            layer.ffn_w1 = Tensor::from_vec(hidden, ffn, r.floats(hidden * ffn, "ffn_w1")?)?;
            layer.ffn_b1 = r.floats(ffn, "ffn_b1")?;
            layer.ffn_w2 = Tensor::from_vec(ffn, hidden, r.floats(ffn * hidden, "ffn_w2")?)?;
            layer.ffn_b2 = r.floats(hidden, "ffn_b2")?;
            layer.ln2.gamma = r.floats(hidden, "ln2_gamma")?;
            layer.ln2.beta = r.floats(hidden, "ln2_beta")?;
            stored.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat {
                field: "payload".into(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(EncoderWeights {
            layers,
            head_num,
            head_size,
            ffn_scale,
            stored,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WeightFormat {
                field: field.into(),
                detail: format!("file truncated at byte {}", self.bytes.len()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// One encoder layer. `input` is packed (valid tokens only) when
/// `zero_padding` is on and padded otherwise; the output has the same layout.
pub fn encoder_layer(
    input: &Tensor,
    weights: &LayerWeights,
    config: &ModelConfig,
    plan: &PackingPlan,
    counters: Option<&FlopCounters>,
) -> Result<Tensor> {
    config.validate()?;
    let hidden = config.hidden();
    if weights.hidden() != hidden {
        return Err(Error::shape(
            "encoder_layer",
            format!("weights are for hidden dim {}, config has {hidden}", weights.hidden()),
        ));
    }
    let expected_rows = if config.opt.zero_padding {
        plan.valid_word_cnt()
    } else {
        plan.lengths().padded_rows()
    };
    if input.rows() != expected_rows || input.cols() != hidden {
        return Err(Error::shape(
            "encoder_layer",
            format!(
                "input is {}x{}, expected {expected_rows}x{hidden}",
                input.rows(),
                input.cols()
            ),
        ));
    }
    let count = |slot: fn(&FlopCounters) -> &std::sync::atomic::AtomicU64, flops: u64| {
        if let Some(c) = counters {
            FlopCounters::add(slot(c), flops);
        }
    };
    let rows = input.rows();

    // GEMM0: Q, K and V in one batched launch
    let parts: Vec<Tensor> = (0..3)
        .map(|i| weights.qkv_weight.slice_cols(i * hidden, (i + 1) * hidden))
        .collect();
    let xs = [input.clone(), input.clone(), input.clone()];
    let qkv = batched_gemm(&xs, &parts, Epilogue::None)?;
    count(|c| &c.gemm0, 3 * gemm_flops(rows, hidden, hidden));

    let attn_input = AttentionInput {
        q: &qkv[0],
        k: &qkv[1],
        v: &qkv[2],
        q_bias: &weights.qkv_bias[..hidden],
        k_bias: &weights.qkv_bias[hidden..2 * hidden],
        v_bias: &weights.qkv_bias[2 * hidden..],
        plan,
        head_num: config.head_num,
        head_size: config.head_size,
    };
    let MhaOutput { output: attn, flops, .. } = match (config.opt.zero_padding, config.opt.fused_mha) {
        (false, _) => mha_baseline(&attn_input)?,
        (true, false) => mha_padded_zero_pad(&attn_input, config.fuse_pack_passes)?,
        (true, true) => dispatch_mha(&attn_input, &config.mha_config())?,
    };
    count(|c| &c.mha, flops);

    // GEMM1: attention output projection
    let proj = matmul(&attn, &weights.attn_out_weight, Epilogue::None)?;
    count(|c| &c.gemm1, gemm_flops(rows, hidden, hidden));
    let h1 = residual_layernorm(&proj, input, &weights.attn_out_bias, &weights.ln1, config)?;

    // GEMM2: FFN expansion with bias + GELU
    let ffn_dim = hidden * config.ffn_scale;
    let ffn = if config.opt.fuse_bias_gelu {
        matmul(&h1, &weights.ffn_w1, Epilogue::AddBiasGelu(&weights.ffn_b1))?
    } else {
        let raw = matmul(&h1, &weights.ffn_w1, Epilogue::None)?;
        gelu_tensor(&add_bias(&raw, &weights.ffn_b1)?)
    };
    count(|c| &c.gemm2, gemm_flops(rows, ffn_dim, hidden));

    // GEMM3: FFN contraction
    let ffn_out = matmul(&ffn, &weights.ffn_w2, Epilogue::None)?;
    count(|c| &c.gemm3, gemm_flops(rows, hidden, ffn_dim));
    residual_layernorm(&ffn_out, &h1, &weights.ffn_b2, &weights.ln2, config)
}

fn residual_layernorm(
    x: &Tensor,
    residual: &Tensor,
    bias: &[f32],
    params: &LayernormParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    if config.opt.fuse_layernorm {
        add_bias_residual_layernorm(x, residual, bias, params)
    } else {
        add_bias_residual_layernorm_unfused(x, residual, bias, params)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Padded layout; padded rows are zero.
    pub output: Tensor,
    pub flops: CounterSnapshot,
}

/// Runs `config.layers` stacked layers on a padded batch. With zero padding
/// the batch is packed once on entry and unpacked once on exit.
pub fn forward(
    weights: &EncoderWeights,
    lengths: &SeqLengths,
    input_padded: &Tensor,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    config.validate()?;
    if weights.head_num * weights.head_size != config.hidden() {
        return Err(Error::WeightFormat {
            field: "hidden_dim".into(),
            detail: format!(
                "weights have {}, config expects {}",
                weights.head_num * weights.head_size,
                config.hidden()
            ),
        });
    }
    if weights.stored.len() != 1 && weights.stored.len() < config.layers {
        return Err(Error::Config(format!(
            "{} weight layers for a {}-layer forward pass",
            weights.stored.len(),
            config.layers
        )));
    }
    if input_padded.rows() != lengths.padded_rows() || input_padded.cols() != config.hidden() {
        return Err(Error::shape(
            "forward",
            format!(
                "input is {}x{}, expected {}x{}",
                input_padded.rows(),
                input_padded.cols(),
                lengths.padded_rows(),
                config.hidden()
            ),
        ));
    }
    let plan = PackingPlan::from_lengths(lengths);
    let counters = FlopCounters::default();
    let mut x = if config.opt.zero_padding {
        pack_rows(input_padded, &plan)?
    } else {
        input_padded.clone()
    };
    for l in 0..config.layers {
        x = encoder_layer(&x, weights.layer(l), config, &plan, Some(&counters))?;
    }
    let output = if config.opt.zero_padding {
        unpack_rows(&x, &plan)?
    } else {
        apply_mask(&mut x, lengths);
        x
    };
    Ok(ForwardOutput {
        output,
        flops: counters.snapshot(),
    })
}

/// Random padded input in [−1, 1) with padded rows zeroed.
pub fn random_input(lengths: &SeqLengths, hidden: usize, seed: u64) -> Tensor {
    let mut x = Tensor::random(lengths.padded_rows(), hidden, -1.0, 1.0, seed);
    apply_mask(&mut x, lengths);
    x
}
