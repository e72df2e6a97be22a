//! The three forecaster architectures behind one forward contract: a BiLSTM
//! branch, a Transformer encoder branch, and the parallel hybrid fusing both
//! by element-wise addition after projecting to a common latent width.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check::grad_check, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{
    self, bilstm_last, encoder_layer, linear, EncoderLayerParams, LinearParams, LstmCellParams,
    Mode,
};
use crate::train::{NormStats, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Bilstm,
    Transformer,
    Hybrid,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Bilstm => "bilstm",
            Arch::Transformer => "transformer",
            Arch::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Arch::Bilstm),
            "transformer" => Ok(Arch::Transformer),
            "hybrid" => Ok(Arch::Hybrid),
            other => Err(Error::config(format!(
                "unknown arch '{other}' (expected bilstm|transformer|hybrid)"
            ))),
        }
    }

    pub const ALL: [Arch; 3] = [Arch::Bilstm, Arch::Transformer, Arch::Hybrid];
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model hyperparameters; defaults are the reference settings used
/// throughout (sequence length 10, hidden 256, d_m 64, 3 layers, 8 heads,
/// FFN 256, dropout 0.1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d_x: usize,
    pub d_out: usize,
    pub i_w: usize,
    pub o_w: usize,
    pub hidden_dim: usize,
    pub d_m: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Hybrid,
            d_x: 3,
            d_out: 3,
            i_w: 10,
            o_w: 1,
            hidden_dim: 256,
            d_m: 64,
            n_layers: 3,
            n_heads: 8,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_out == 0 || self.i_w == 0 || self.o_w == 0 {
            return Err(Error::config("model dims and window lengths must be >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be >= 1"));
        }
        if self.n_heads == 0 || !self.d_m.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_m {} must divide into {} heads",
                self.d_m, self.n_heads
            )));
        }
        if !self.d_m.is_multiple_of(2) {
            return Err(Error::config("d_m must be even for sinusoidal encodings"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Common latent width both branches project into before fusion.
    pub fn fusion_dim(&self) -> usize {
        (2 * self.hidden_dim).max(self.d_m)
    }

    fn has_bilstm(&self) -> bool {
        matches!(self.arch, Arch::Bilstm | Arch::Hybrid)
    }

    fn has_transformer(&self) -> bool {
        matches!(self.arch, Arch::Transformer | Arch::Hybrid)
    }
}

struct BilstmBranch {
    fwd: LstmCellParams,
    bwd: LstmCellParams,
    head: LinearParams,
}

struct TransformerBranch {
    input_proj: LinearParams,
    layers: Vec<EncoderLayerParams>,
    pe: Tensor,
}

/// A built forecaster. Parameter traversal order (init draws, checkpoints,
/// optimizer state) is fixed: BiLSTM branch (fwd w,b; bwd w,b; head w,b),
/// Transformer branch (input w,b; per layer w_q,w_k,w_v,w_o, ffn1 w,b,
/// ffn2 w,b, ln1 gain,bias, ln2 gain,bias), proj_l w,b, proj_tr w,b,
/// head w,b; absent branches contribute nothing.
pub struct Model {
    cfg: ModelConfig,
    bilstm: Option<BilstmBranch>,
    transformer: Option<TransformerBranch>,
    proj_l: Option<LinearParams>,
    proj_tr: Option<LinearParams>,
    head: LinearParams,
}

/// Names and shapes of every parameter tensor, in traversal order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    let h = cfg.hidden_dim;
    let dm = cfg.d_m;
    let d_f = cfg.fusion_dim();
    if cfg.has_bilstm() {
        for dir in ["fwd", "bwd"] {
            v.push((format!("bilstm.{dir}.w"), vec![4 * h, cfg.d_x + h]));
            v.push((format!("bilstm.{dir}.b"), vec![4 * h]));
        }
        v.push(("bilstm.head.w".into(), vec![2 * h, 2 * h]));
        v.push(("bilstm.head.b".into(), vec![2 * h]));
    }
    if cfg.has_transformer() {
        v.push(("transformer.input.w".into(), vec![dm, cfg.d_x]));
        v.push(("transformer.input.b".into(), vec![dm]));
        for l in 0..cfg.n_layers {
            for name in ["w_q", "w_k", "w_v", "w_o"] {
                v.push((format!("transformer.{l}.{name}"), vec![dm, dm]));
            }
            v.push((format!("transformer.{l}.ffn1.w"), vec![cfg.ffn_dim, dm]));
            v.push((format!("transformer.{l}.ffn1.b"), vec![cfg.ffn_dim]));
            v.push((format!("transformer.{l}.ffn2.w"), vec![dm, cfg.ffn_dim]));
            v.push((format!("transformer.{l}.ffn2.b"), vec![dm]));
            for name in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
                v.push((format!("transformer.{l}.{name}"), vec![dm]));
            }
        }
    }
    if cfg.has_bilstm() {
        v.push(("proj_l.w".into(), vec![d_f, 2 * h]));
        v.push(("proj_l.b".into(), vec![d_f]));
    }
    if cfg.has_transformer() {
        v.push(("proj_tr.w".into(), vec![d_f, dm]));
        v.push(("proj_tr.b".into(), vec![d_f]));
    }
    v.push(("head.w".into(), vec![cfg.o_w * cfg.d_out, d_f]));
    v.push(("head.b".into(), vec![cfg.o_w * cfg.d_out]));
    v
}

impl Model {
    /// Fresh model with seeded initialization (one ChaCha8 stream, draws in
    /// traversal order).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bilstm = cfg.has_bilstm().then(|| BilstmBranch {
            fwd: LstmCellParams::init(cfg.d_x, cfg.hidden_dim, &mut rng),
            bwd: LstmCellParams::init(cfg.d_x, cfg.hidden_dim, &mut rng),
            head: LinearParams::init(2 * cfg.hidden_dim, 2 * cfg.hidden_dim, &mut rng),
        });
        let transformer = if cfg.has_transformer() {
            let input_proj = LinearParams::init(cfg.d_x, cfg.d_m, &mut rng);
            let layers = (0..cfg.n_layers)
                .map(|_| EncoderLayerParams::init(cfg.d_m, cfg.n_heads, cfg.ffn_dim, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Some(TransformerBranch {
                input_proj,
                layers,
                pe: nn::positional_encoding(cfg.i_w, cfg.d_m)?,
            })
        } else {
            None
        };
        let d_f = cfg.fusion_dim();
        let proj_l = bilstm
            .as_ref()
            .map(|_| LinearParams::init(2 * cfg.hidden_dim, d_f, &mut rng));
        let proj_tr = transformer
            .as_ref()
            .map(|_| LinearParams::init(cfg.d_m, d_f, &mut rng));
        let head = LinearParams::init(d_f, cfg.o_w * cfg.d_out, &mut rng);
        Ok(Self {
            cfg,
            bilstm,
            transformer,
            proj_l,
            proj_tr,
            head,
        })
    }

    /// Assembles a model from a flat tensor list in traversal order
    /// (checkpoint loads, gradient checks).
    pub fn with_params(cfg: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if params.len() != specs.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().unwrap();
        let bilstm = cfg.has_bilstm().then(|| BilstmBranch {
            fwd: LstmCellParams {
                w: next(),
                b: next(),
                hidden: cfg.hidden_dim,
            },
            bwd: LstmCellParams {
                w: next(),
                b: next(),
                hidden: cfg.hidden_dim,
            },
            head: LinearParams {
                w: next(),
                b: next(),
            },
        });
        let transformer = if cfg.has_transformer() {
            let input_proj = LinearParams {
                w: next(),
                b: next(),
            };
            let layers = (0..cfg.n_layers)
                .map(|_| EncoderLayerParams {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                    ffn1: LinearParams {
                        w: next(),
                        b: next(),
                    },
                    ffn2: LinearParams {
                        w: next(),
                        b: next(),
                    },
                    ln1_gain: next(),
                    ln1_bias: next(),
                    ln2_gain: next(),
                    ln2_bias: next(),
                    n_heads: cfg.n_heads,
                })
                .collect();
            Some(TransformerBranch {
                input_proj,
                layers,
                pe: nn::positional_encoding(cfg.i_w, cfg.d_m)?,
            })
        } else {
            None
        };
        let proj_l = cfg.has_bilstm().then(|| LinearParams {
            w: next(),
            b: next(),
        });
        let proj_tr = cfg.has_transformer().then(|| LinearParams {
            w: next(),
            b: next(),
        });
        let head = LinearParams {
            w: next(),
            b: next(),
        };
        Ok(Self {
            cfg,
            bilstm,
            transformer,
            proj_l,
            proj_tr,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        if let Some(b) = &self.bilstm {
            v.extend(b.fwd.params());
            v.extend(b.bwd.params());
            v.extend(b.head.params());
        }
        if let Some(t) = &self.transformer {
            v.extend(t.input_proj.params());
            for l in &t.layers {
                v.extend(l.params());
            }
        }
        if let Some(p) = &self.proj_l {
            v.extend(p.params());
        }
        if let Some(p) = &self.proj_tr {
            v.extend(p.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        if let Some(b) = &mut self.bilstm {
            v.extend(b.fwd.params_mut());
            v.extend(b.bwd.params_mut());
            v.extend(b.head.params_mut());
        }
        if let Some(t) = &mut self.transformer {
            v.extend(t.input_proj.params_mut());
            for l in &mut t.layers {
                v.extend(l.params_mut());
            }
        }
        if let Some(p) = &mut self.proj_l {
            v.extend(p.params_mut());
        }
        if let Some(p) = &mut self.proj_tr {
            v.extend(p.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Clone whose parameters are registered as leaves of `tape`, so a
    /// forward pass through it records gradients for every parameter.
    pub fn tracked(&self, tape: &Tape) -> Model {
        let params: Vec<Tensor> = self.params().into_iter().map(|p| tape.leaf(p)).collect();
        Model::with_params(self.cfg, params).expect("shapes preserved by construction")
    }

    /// Batched forward: windows [B x I_w x d_x] -> predictions
    /// [B x O_w*d_out]. Dropout draws from `rng` only in train mode.
    pub fn forward_batch<R: Rng>(
        &self,
        tape: &Tape,
        windows: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let s = windows.shape();
        if s.len() != 3 || s[0] == 0 || s[1] != self.cfg.i_w || s[2] != self.cfg.d_x {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                lhs: s.to_vec(),
                rhs: vec![1, self.cfg.i_w, self.cfg.d_x],
            });
        }
        let mut fused: Option<Tensor> = None;
        if let Some(b) = &self.bilstm {
            let h_t = bilstm_last(tape, windows, &b.fwd, &b.bwd)?;
            let f_l = linear(tape, &h_t, &b.head)?;
            fused = Some(linear(tape, &f_l, self.proj_l.as_ref().unwrap())?);
        }
        if let Some(t) = &self.transformer {
            let f_tr = transformer_features(tape, windows, t, &self.cfg, mode, rng)?;
            let p = linear(tape, &f_tr, self.proj_tr.as_ref().unwrap())?;
            fused = Some(match fused {
                Some(a) => tape.add(&a, &p)?,
                None => p,
            });
        }
        let out = linear(tape, &fused.expect("at least one branch"), &self.head)?;
        if !out.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "model forward".into(),
            });
        }
        Ok(out)
    }

    /// Single-window forward: [I_w x d_x] -> [O_w x d_out].
    pub fn forward<R: Rng>(
        &self,
        tape: &Tape,
        window: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        if window.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: window.shape().to_vec(),
                rhs: vec![self.cfg.i_w, self.cfg.d_x],
            });
        }
        let lifted = tape.reshape(window, &[1, window.shape()[0], window.shape()[1]])?;
        let out = self.forward_batch(tape, &lifted, mode, rng)?;
        tape.reshape(&out, &[self.cfg.o_w, self.cfg.d_out])
    }

    /// Transformer-branch features for one window: [I_w x d_x] -> [d_m],
    /// the last time-step row after the encoder stack.
    pub fn transformer_branch<R: Rng>(
        &self,
        tape: &Tape,
        window: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let t = self
            .transformer
            .as_ref()
            .ok_or_else(|| Error::argument("model has no transformer branch"))?;
        let lifted = tape.reshape(window, &[1, self.cfg.i_w, self.cfg.d_x])?;
        let f = transformer_features(tape, &lifted, t, &self.cfg, mode, rng)?;
        tape.reshape(&f, &[self.cfg.d_m])
    }
}

fn transformer_features<R: Rng>(
    tape: &Tape,
    windows: &Tensor,
    branch: &TransformerBranch,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    let b = windows.shape()[0];
    let z0 = linear(tape, windows, &branch.input_proj)?;
    let mut z = tape.add(&z0, &branch.pe)?;
    for layer in &branch.layers {
        z = encoder_layer(tape, &z, layer, cfg.dropout, mode, rng)?;
    }
    let last = tape.slice(&z, 1, cfg.i_w - 1, 1)?;
    tape.reshape(&last, &[b, cfg.d_m])
}

// ---- checkpoints ----

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CHAOSCK1";

/// Everything needed to rebuild and reuse a trained model: architecture
/// config, normalization stats, the variable roles, and the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub input_vars: Vec<Var>,
    pub target_vars: Vec<Var>,
    pub seed: u64,
}

/// Layout: magic, u64 LE header length, JSON header (CheckpointMeta), then
/// every parameter tensor as f64 LE words in traversal order.
pub fn save_params(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if meta.config != model.cfg {
        return Err(Error::ConfigMismatch(
            "checkpoint meta disagrees with model config".into(),
        ));
    }
    let header = serde_json::to_vec(meta)?;
    let mut bytes =
        Vec::with_capacity(16 + header.len() + 8 * model.parameter_count());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in model.params() {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let corrupt = |what: &str| Error::CorruptCheckpoint(format!("{}: {what}", path.display()));
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        return Err(corrupt("truncated header"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..body])
        .map_err(|e| corrupt(&format!("header: {e}")))?;
    let specs = param_specs(&meta.config);
    let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != body + 8 * total {
        return Err(corrupt("parameter block length mismatch"));
    }
    let mut off = body;
    let mut params = Vec::with_capacity(specs.len());
    for (_, shape) in &specs {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 8 * n;
        params.push(Tensor::new(shape, vals)?);
    }
    Ok((Model::with_params(meta.config, params)?, meta))
}

/// Load and insist the stored config matches the expectation.
pub fn load_params_checked(path: &Path, expect: &ModelConfig) -> Result<(Model, CheckpointMeta)> {
    let (model, meta) = load_params(path)?;
    if meta.config != *expect {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {:?} != expected {:?}",
            meta.config, expect
        )));
    }
    Ok((model, meta))
}

// ---- gradient check ----

/// Tiny hybrid used by the end-to-end gradient check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        arch: Arch::Hybrid,
        d_x: 3,
        d_out: 3,
        i_w: 3,
        o_w: 1,
        hidden_dim: 4,
        d_m: 4,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 6,
        dropout: 0.0,
    }
}

/// Finite-difference check of the full hybrid forward on `tiny_config`,
/// differentiating through every parameter and the input window. Returns the
/// worst relative error.
pub fn grad_check_tiny(seed: u64) -> Result<f64> {
    let cfg = tiny_config();
    let model = Model::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let window = Tensor::rand_uniform(&[2, cfg.i_w, cfg.d_x], -1.0, 1.0, &mut rng);
    let weight = Tensor::rand_uniform(&[2, cfg.o_w * cfg.d_out], -1.0, 1.0, &mut rng);
    let mut inputs = vec![window];
    inputs.extend(model.params().into_iter().cloned());
    grad_check(
        move |tape, xs| {
            let m = Model::with_params(cfg, xs[1..].to_vec())?;
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward_batch(tape, &xs[0], Mode::Eval, &mut drng)?;
            tape.sum_all(&tape.mul(&out, &weight)?)
        },
        &inputs,
        crate::autodiff::check::CHECK_EPS,
    )
}
