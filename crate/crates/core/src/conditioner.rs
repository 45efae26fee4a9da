//! Noise-classification conditioner: a small self-attention encoder over
//! framed signals producing a pooled acoustic embedding, a linear classifier
//! head over noise families, and the three mechanisms that inject the
//! embedding into the denoiser (addition, concatenation, cross-attention).

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    Addition,
    Concat,
    CrossAttn,
}

impl InjectionMode {
    pub fn parse(s: &str) -> Result<InjectionMode> {
        match s {
            "addition" => Ok(InjectionMode::Addition),
            "concat" => Ok(InjectionMode::Concat),
            "cross-attn" | "cross_attn" => Ok(InjectionMode::CrossAttn),
            other => Err(Error::Config(format!(
                "unknown injection mode {other:?} (expected addition, concat or cross-attn)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InjectionMode::Addition => "addition",
            InjectionMode::Concat => "concat",
            InjectionMode::CrossAttn => "cross-attn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionerConfig {
    pub signal_len: usize,
    pub frame: usize,
    pub hop: usize,
    pub width: usize,
    pub blocks: usize,
    pub emb_dim: usize,
    pub n_classes: usize,
}

impl ConditionerConfig {
    /// Log-energy bins per frame (paired cosine/sine coefficients).
    pub fn n_bins(&self) -> usize {
        self.frame / 2 + 1
    }

    /// Front-end feature width.
    pub fn n_features(&self) -> usize {
        self.n_bins()
    }
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        ConditionerConfig {
            signal_len: 256,
            frame: 64,
            hop: 16,
            width: 48,
            blocks: 2,
            emb_dim: 64,
            n_classes: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionBlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub frame_w: Tensor,
    pub frame_b: Tensor,
    pub blocks: Vec<AttentionBlockParams>,
    pub pool_w: Tensor,
    pub pool_b: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConditionerParams {
    pub config: ConditionerConfig,
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
}

/// Embedding plus class probabilities for one input signal.
#[derive(Debug, Clone)]
pub struct ConditionerOutput {
    pub embedding: Tensor,
    pub probs: Tensor,
}

static ENCODE_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of encoder forward passes since process start (test instrumentation
/// for the compute-once contract in the sampler).
pub fn encode_call_count() -> usize {
    ENCODE_CALLS.load(Ordering::Relaxed)
}

impl ConditionerParams {
    /// Deterministic init. The classifier starts at zero so initial class
    /// probabilities are exactly uniform.
    pub fn init(config: &ConditionerConfig, rng: &Rng) -> Self {
        let c = config;
        let mut k = 0u64;
        let mut next = move || {
            k += 1;
            rng.substream(crate::rng::streams::INIT, 1000 + k)
        };
        let blocks = (0..c.blocks)
            .map(|_| AttentionBlockParams {
                ln1_gain: nn::ones_row(c.width),
                ln1_bias: nn::zeros_row(c.width),
                wq: nn::init_weight(&mut next(), c.width, c.width),
                wk: nn::init_weight(&mut next(), c.width, c.width),
                wv: nn::init_weight(&mut next(), c.width, c.width),
                wo: nn::init_weight(&mut next(), c.width, c.width),
                ln2_gain: nn::ones_row(c.width),
                ln2_bias: nn::zeros_row(c.width),
                ff_w1: nn::init_weight(&mut next(), c.width, c.width),
                ff_b1: nn::zeros_row(c.width),
                ff_w2: nn::init_weight(&mut next(), c.width, c.width),
                ff_b2: nn::zeros_row(c.width),
            })
            .collect();
        ConditionerParams {
            config: config.clone(),
            encoder: EncoderParams {
                frame_w: nn::init_weight(&mut next(), c.n_features(), c.width),
                frame_b: nn::zeros_row(c.width),
                blocks,
                pool_w: nn::init_weight(&mut next(), c.width, c.emb_dim),
                pool_b: nn::zeros_row(c.emb_dim),
                emb_ln_gain: nn::ones_row(c.emb_dim),
                emb_ln_bias: nn::zeros_row(c.emb_dim),
            },
            classifier: ClassifierParams {
                w: Tensor::zeros(&[c.emb_dim, c.n_classes]),
                b: nn::zeros_row(c.n_classes),
            },
        }
    }

    pub fn for_each_tensor<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("conditioner.encoder.frame_w".into(), &self.encoder.frame_w);
        f("conditioner.encoder.frame_b".into(), &self.encoder.frame_b);
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            let p = format!("conditioner.encoder.block{i}");
            f(format!("{p}.ln1_gain"), &b.ln1_gain);
            f(format!("{p}.ln1_bias"), &b.ln1_bias);
            f(format!("{p}.wq"), &b.wq);
            f(format!("{p}.wk"), &b.wk);
            f(format!("{p}.wv"), &b.wv);
            f(format!("{p}.wo"), &b.wo);
            f(format!("{p}.ln2_gain"), &b.ln2_gain);
            f(format!("{p}.ln2_bias"), &b.ln2_bias);
            f(format!("{p}.ff_w1"), &b.ff_w1);
            f(format!("{p}.ff_b1"), &b.ff_b1);
            f(format!("{p}.ff_w2"), &b.ff_w2);
            f(format!("{p}.ff_b2"), &b.ff_b2);
        }
        f("conditioner.encoder.pool_w".into(), &self.encoder.pool_w);
        f("conditioner.encoder.pool_b".into(), &self.encoder.pool_b);
        f("conditioner.encoder.emb_ln_gain".into(), &self.encoder.emb_ln_gain);
        f("conditioner.encoder.emb_ln_bias".into(), &self.encoder.emb_ln_bias);
        f("conditioner.classifier.w".into(), &self.classifier.w);
        f("conditioner.classifier.b".into(), &self.classifier.b);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("conditioner.encoder.frame_w".into(), &mut self.encoder.frame_w);
        f("conditioner.encoder.frame_b".into(), &mut self.encoder.frame_b);
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            let p = format!("conditioner.encoder.block{i}");
            f(format!("{p}.ln1_gain"), &mut b.ln1_gain);
            f(format!("{p}.ln1_bias"), &mut b.ln1_bias);
            f(format!("{p}.wq"), &mut b.wq);
            f(format!("{p}.wk"), &mut b.wk);
            f(format!("{p}.wv"), &mut b.wv);
            f(format!("{p}.wo"), &mut b.wo);
            f(format!("{p}.ln2_gain"), &mut b.ln2_gain);
            f(format!("{p}.ln2_bias"), &mut b.ln2_bias);
            f(format!("{p}.ff_w1"), &mut b.ff_w1);
            f(format!("{p}.ff_b1"), &mut b.ff_b1);
            f(format!("{p}.ff_w2"), &mut b.ff_w2);
            f(format!("{p}.ff_b2"), &mut b.ff_b2);
        }
        f("conditioner.encoder.pool_w".into(), &mut self.encoder.pool_w);
        f("conditioner.encoder.pool_b".into(), &mut self.encoder.pool_b);
        f("conditioner.encoder.emb_ln_gain".into(), &mut self.encoder.emb_ln_gain);
        f("conditioner.encoder.emb_ln_bias".into(), &mut self.encoder.emb_ln_bias);
        f("conditioner.classifier.w".into(), &mut self.classifier.w);
        f("conditioner.classifier.b".into(), &mut self.classifier.b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, t| n += t.numel());
        n
    }
}

const LN_EPS: f64 = 1e-8;

fn self_attention(x: &Tensor, b: &AttentionBlockParams) -> Result<Tensor> {
    let scale = 1.0 / (b.wq.cols() as f64).sqrt();
    let q = x.matmul(&b.wq)?;
    let k = x.matmul(&b.wk)?;
    let v = x.matmul(&b.wv)?;
    let scores = q.matmul(&k.transpose()?)?.mul_scalar(scale);
    let probs = scores.softmax();
    probs.matmul(&v)?.matmul(&b.wo)
}

/// Run the encoder and classifier on one signal.
pub fn encode(params: &ConditionerParams, y: &[f64]) -> Result<ConditionerOutput> {
    let c = &params.config;
    if y.len() != c.signal_len {
        return Err(Error::LengthMismatch { lhs: y.len(), rhs: c.signal_len });
    }
    ENCODE_CALLS.fetch_add(1, Ordering::Relaxed);

    // phase-invariant front end: per-frame log energies in the analysis basis
    let frames = nn::frame_signal(&Tensor::vector(y.to_vec()), c.frame, c.hop)?;
    let n_frames = frames.rows();
    let spec = frames.matmul(&nn::frame_basis(c.frame))?;
    let energy = spec.mul(&spec)?.matmul(&nn::bin_pairing(c.frame))?;
    let feats = energy.add_scalar(1e-8).log();
    let mut h = nn::linear(&feats, &params.encoder.frame_w, Some(&params.encoder.frame_b))?;
    h = h.add(&nn::positional_encoding(n_frames, c.width))?;

    for b in &params.encoder.blocks {
        let normed = nn::layer_norm(&h, &b.ln1_gain, &b.ln1_bias, LN_EPS)?;
        h = h.add(&self_attention(&normed, b)?)?;
        let normed = nn::layer_norm(&h, &b.ln2_gain, &b.ln2_bias, LN_EPS)?;
        let ff = nn::linear(&normed, &b.ff_w1, Some(&b.ff_b1))?.relu();
        h = h.add(&nn::linear(&ff, &b.ff_w2, Some(&b.ff_b2))?)?;
    }

    // mean pooling over frames
    let avg = Tensor::from_vec(vec![1, n_frames], vec![1.0 / n_frames as f64; n_frames]);
    let pooled = avg.matmul(&h)?;
    let emb_row = nn::linear(&pooled, &params.encoder.pool_w, Some(&params.encoder.pool_b))?;
    let emb_row = nn::layer_norm(
        &emb_row,
        &params.encoder.emb_ln_gain,
        &params.encoder.emb_ln_bias,
        LN_EPS,
    )?;
    // temperature sharpening (a fixed rescaling of the linear head) pushes
    // for wider class margins on the normalized embedding sphere
    let logits = nn::linear(&emb_row, &params.classifier.w, Some(&params.classifier.b))?
        .mul_scalar(4.0);
    let probs = logits.softmax().reshape(&[c.n_classes])?;
    let embedding = emb_row.reshape(&[c.emb_dim])?;
    Ok(ConditionerOutput { embedding, probs })
}

/// Cross-entropy of a probability vector against a label.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<Tensor> {
    let n_classes = probs.numel();
    if label >= n_classes {
        return Err(Error::LabelOutOfRange { label, n_classes });
    }
    Ok(probs.slice(label, 1)?.log().mul_scalar(-1.0))
}

/// Cross-entropy of the predicted class distribution against a label.
pub fn nc_loss(out: &ConditionerOutput, label: usize) -> Result<Tensor> {
    cross_entropy(&out.probs, label)
}

/// Per-mode injection parameters (classifier-free: embedding in, hidden out).
#[derive(Debug, Clone)]
pub enum InjectionParams {
    /// Projected embedding added to every row. No bias, so a zero embedding
    /// leaves the hidden state unchanged.
    Addition { w: Tensor },
    /// Embedding appended on the feature axis, then projected back to the
    /// hidden width.
    Concat { w: Tensor },
    /// The embedding forms a single key/value token attended to from every
    /// row; with one token the attention weights are exactly 1.
    CrossAttn { wq: Tensor, wk: Tensor, wv: Tensor },
}

impl InjectionParams {
    pub fn init(
        mode: InjectionMode,
        hidden: usize,
        emb_dim: usize,
        attn_dim: usize,
        rng: &Rng,
        tag: u64,
    ) -> Self {
        let sub = |i: u64| rng.substream(crate::rng::streams::INIT, 2000 + tag * 8 + i);
        match mode {
            InjectionMode::Addition => {
                InjectionParams::Addition { w: nn::init_weight(&mut sub(0), emb_dim, hidden) }
            }
            InjectionMode::Concat => InjectionParams::Concat {
                w: nn::init_weight(&mut sub(1), hidden + emb_dim, hidden),
            },
            InjectionMode::CrossAttn => InjectionParams::CrossAttn {
                wq: nn::init_weight(&mut sub(2), hidden, attn_dim),
                wk: nn::init_weight(&mut sub(3), emb_dim, attn_dim),
                wv: nn::init_weight(&mut sub(4), emb_dim, hidden),
            },
        }
    }

    pub fn mode(&self) -> InjectionMode {
        match self {
            InjectionParams::Addition { .. } => InjectionMode::Addition,
            InjectionParams::Concat { .. } => InjectionMode::Concat,
            InjectionParams::CrossAttn { .. } => InjectionMode::CrossAttn,
        }
    }

    pub fn for_each_tensor<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        match self {
            InjectionParams::Addition { w } => f(format!("{prefix}.add_w"), w),
            InjectionParams::Concat { w } => f(format!("{prefix}.cat_w"), w),
            InjectionParams::CrossAttn { wq, wk, wv } => {
                f(format!("{prefix}.xq"), wq);
                f(format!("{prefix}.xk"), wk);
                f(format!("{prefix}.xv"), wv);
            }
        }
    }

    pub fn for_each_tensor_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &mut Tensor),
    ) {
        match self {
            InjectionParams::Addition { w } => f(format!("{prefix}.add_w"), w),
            InjectionParams::Concat { w } => f(format!("{prefix}.cat_w"), w),
            InjectionParams::CrossAttn { wq, wk, wv } => {
                f(format!("{prefix}.xq"), wq);
                f(format!("{prefix}.xk"), wk);
                f(format!("{prefix}.xv"), wv);
            }
        }
    }
}

/// Fuse the embedding into a hidden state; output shape equals `hidden`'s.
pub fn inject(params: &InjectionParams, hidden: &Tensor, emb: &Tensor) -> Result<Tensor> {
    let rows = hidden.rows();
    let emb_row = emb.reshape(&[1, emb.numel()])?;
    match params {
        InjectionParams::Addition { w } => {
            let proj = emb_row.matmul(w)?;
            hidden.add(&nn::broadcast_rows(&proj, rows)?)
        }
        InjectionParams::Concat { w } => {
            let tiled = nn::broadcast_rows(&emb_row, rows)?;
            hidden.concat(&tiled, 1)?.matmul(w)
        }
        InjectionParams::CrossAttn { wq, wk, wv } => {
            let scale = 1.0 / (wq.cols() as f64).sqrt();
            let q = hidden.matmul(wq)?;
            let k = emb_row.matmul(wk)?;
            let v = emb_row.matmul(wv)?;
            let scores = q.matmul(&k.transpose()?)?.mul_scalar(scale);
            let probs = scores.softmax();
            hidden.add(&probs.matmul(&v)?)
        }
    }
}
