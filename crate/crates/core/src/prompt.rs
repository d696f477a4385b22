//! Frozen dual encoder with learnable deep prompts.
//!
//! A small pre-LN transformer with seeded random weights plays the role of a
//! pretrained vision-language backbone. Both branches (frames and class text)
//! prepend `N` prompt tokens; in deep mode the prompt slots are overwritten
//! with fresh learnable tokens at the input of each of the first `M` layers.
//! Frame encodings are mean-pooled over time, L2-normalised and classified by
//! cosine similarity to the text embeddings of the six class anchors. Only
//! the prompts receive gradients.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::StandardNormal;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::TensorContainer;
use crate::dataset::{DatasetError, FrameFeatures, Modality, Sample, LABEL_NAMES, NUM_CLASSES};
use crate::evaluation::{waf, EvalError};
use crate::fusion::{glorot_linear, ParamSet};
use crate::numerics::{self, dot, Linear, Matrix, NumericsError, Scalar};
use crate::rng::{stream, Purpose};
use crate::training::{adam_step, AdamConfig, AdamState, TrainError};

const LN_EPS: f64 = 1e-5;
const MAX_PROMPT_DEPTH: usize = 12;

/// Words of the class-anchor template; the label fills the final slot.
pub const TEMPLATE: [&str; 3] = ["a", "person", "feeling"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("video has no frames")]
    EmptyFrames,
    #[error("cannot normalise a zero-norm embedding")]
    ZeroNorm,
    #[error("frame width {got} is not {tokens} tokens of width {token_dim}")]
    FrameShape {
        got: usize,
        tokens: usize,
        token_dim: usize,
    },
    #[error("sample {0:?} has no video features")]
    MissingVideo(String),
    #[error("sample {0:?} has no label")]
    MissingLabel(String),
    #[error("non-finite prompt loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("frozen encoder digest changed: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of one raw content token of a frame.
    pub token_dim: usize,
    pub tokens_per_frame: usize,
    /// Width of the projected output embedding.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 16,
            heads: 4,
            mlp_ratio: 4,
            token_dim: 16,
            tokens_per_frame: 4,
            embed_dim: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PromptError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("layers, width, heads and mlp_ratio must be >= 1");
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad("width must be divisible by heads");
        }
        if self.token_dim == 0 || self.tokens_per_frame == 0 || self.embed_dim == 0 {
            return bad("token_dim, tokens_per_frame and embed_dim must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Prompt tokens per layer (`N`).
    pub num_prompts: usize,
    /// Layers receiving fresh prompts (`M`); `None` means `min(12, L)`.
    pub depth: Option<usize>,
    /// Deep prompting; when false only the first layer receives prompts.
    pub deep: bool,
    pub temperature: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            num_prompts: 4,
            depth: None,
            deep: true,
            temperature: 0.07,
        }
    }
}

impl PromptConfig {
    /// Number of prompt layers actually stored in the bank.
    pub fn bank_layers(&self, encoder_layers: usize) -> usize {
        if !self.deep {
            return 1.min(encoder_layers);
        }
        self.depth
            .unwrap_or(MAX_PROMPT_DEPTH.min(encoder_layers))
            .min(encoder_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(PromptError::InvalidConfig("temperature must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// One pre-LN transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

/// Activations of one block, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    /// Block input; rows `0..N` are the prompt slots.
    pub input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    mid: Matrix<T>,
    pre: Matrix<T>,
}

fn ln_rows<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T]) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        out.row_mut(r)
            .copy_from_slice(&numerics::layer_norm(x.row(r), gamma, beta, T::of(LN_EPS))?);
    }
    Ok(out)
}

fn ln_rows_backward<T: Scalar>(x: &Matrix<T>, gamma: &[T], grad: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (dx, _, _) = numerics::layer_norm_backward(x.row(r), gamma, T::of(LN_EPS), grad.row(r))?;
        out.row_mut(r).copy_from_slice(&dx);
    }
    Ok(out)
}

/// Row-wise affine map `X Wᵀ + b`.
fn linear_rows<T: Scalar>(x: &Matrix<T>, lin: &Linear<T>) -> Result<Matrix<T>> {
    let mut y = x.matmul_t(&lin.weight)?;
    for r in 0..y.rows() {
        for (v, &b) in y.row_mut(r).iter_mut().zip(&lin.bias) {
            *v = *v + b;
        }
    }
    Ok(y)
}

fn sum<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

impl<T: Scalar> Block<T> {
    fn init(rng: &mut Pcg32, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            ln1_gamma: vec![T::one(); width],
            ln1_beta: vec![T::zero(); width],
            query: glorot_linear(rng, width, width),
            key: glorot_linear(rng, width, width),
            value: glorot_linear(rng, width, width),
            out: glorot_linear(rng, width, width),
            ln2_gamma: vec![T::one(); width],
            ln2_beta: vec![T::zero(); width],
            fc1: glorot_linear(rng, width, hidden),
            fc2: glorot_linear(rng, hidden, width),
            heads,
        }
    }

    fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            ln1_gamma: numerics::cast_vec(&self.ln1_gamma),
            ln1_beta: numerics::cast_vec(&self.ln1_beta),
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            out: self.out.cast(),
            ln2_gamma: numerics::cast_vec(&self.ln2_gamma),
            ln2_beta: numerics::cast_vec(&self.ln2_beta),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            heads: self.heads,
        }
    }

    fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![&self.ln1_gamma, &self.ln1_beta];
        for l in [&self.query, &self.key, &self.value, &self.out] {
            v.push(l.weight.data());
            v.push(&l.bias);
        }
        v.push(&self.ln2_gamma);
        v.push(&self.ln2_beta);
        for l in [&self.fc1, &self.fc2] {
            v.push(l.weight.data());
            v.push(&l.bias);
        }
        v
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, BlockCache<T>)> {
        let n = x.rows();
        let width = x.cols();
        let dh = width / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let ln1 = ln_rows(x, &self.ln1_gamma, &self.ln1_beta)?;
        let q = linear_rows(&ln1, &self.query)?;
        let k = linear_rows(&ln1, &self.key)?;
        let v = linear_rows(&ln1, &self.value)?;
        let mut attn = Matrix::zeros(n, width);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let scores: Vec<T> = (0..n).map(|j| dot(qi, &k.row(j)[cols.clone()]) * scale).collect();
                p.row_mut(i).copy_from_slice(&numerics::softmax(&scores, T::one())?);
                let out = &mut attn.row_mut(i)[cols.clone()];
                for (j, &pij) in p.row(i).iter().enumerate() {
                    for (o, &vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o = *o + pij * vj;
                    }
                }
            }
            probs.push(p);
        }
        let mid = sum(x, &linear_rows(&attn, &self.out)?)?;
        let ln2 = ln_rows(&mid, &self.ln2_gamma, &self.ln2_beta)?;
        let pre = linear_rows(&ln2, &self.fc1)?;
        let act = pre.map(numerics::quick_gelu);
        let y = sum(&mid, &linear_rows(&act, &self.fc2)?)?;
        Ok((
            y,
            BlockCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                mid,
                pre,
            },
        ))
    }

    /// Gradient with respect to the block input (weights are frozen).
    pub fn backward(&self, cache: &BlockCache<T>, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let n = cache.input.rows();
        let width = cache.input.cols();
        let dh = width / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        // MLP branch
        let dact = grad.matmul(&self.fc2.weight)?;
        let mut dpre = dact;
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d = *d * numerics::quick_gelu_grad(p);
        }
        let dln2 = dpre.matmul(&self.fc1.weight)?;
        let dmid = sum(grad, &ln_rows_backward(&cache.mid, &self.ln2_gamma, &dln2)?)?;

        // attention branch
        let dattn = dmid.matmul(&self.out.weight)?;
        let mut dq = Matrix::zeros(n, width);
        let mut dk = Matrix::zeros(n, width);
        let mut dv = Matrix::zeros(n, width);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[h];
            for i in 0..n {
                let dai = &dattn.row(i)[cols.clone()];
                let dp: Vec<T> = (0..n).map(|j| dot(dai, &cache.v.row(j)[cols.clone()])).collect();
                let ds = numerics::softmax_backward(p.row(i), &dp);
                let qi = &cache.q.row(i)[cols.clone()];
                for j in 0..n {
                    let pij = p.get(i, j);
                    let dsij = ds[j] * scale;
                    let kj = &cache.k.row(j)[cols.clone()];
                    for (d, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                        *d = *d + dsij * kv;
                    }
                    for (d, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                        *d = *d + dsij * qv;
                    }
                    for (dvv, &da) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dai) {
                        *dvv = *dvv + pij * da;
                    }
                }
            }
        }
        let mut dln1 = dq.matmul(&self.query.weight)?;
        dln1.add_assign(&dk.matmul(&self.key.weight)?)?;
        dln1.add_assign(&dv.matmul(&self.value.weight)?)?;
        sum(&dmid, &ln_rows_backward(&cache.input, &self.ln1_gamma, &dln1)?)
    }
}

/// Shared transformer stack plus the class-token readout of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T = f32> {
    pub class_token: Vec<T>,
    /// Positional embeddings for the class token and content tokens (prompts get none).
    pub positional: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_post_gamma: Vec<T>,
    pub ln_post_beta: Vec<T>,
    /// `embed_dim × width`, no bias.
    pub projection: Matrix<T>,
}

/// Everything the backward pass of one sequence needs.
#[derive(Clone, Debug)]
pub struct SequenceCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    final_tokens: Matrix<T>,
    num_prompts: usize,
}

fn normal_matrix<T: Scalar>(rng: &mut Pcg32, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

impl<T: Scalar> Branch<T> {
    fn init(rng: &mut Pcg32, config: &EncoderConfig, positions: usize) -> Self {
        let d = config.width;
        let class_token = normal_matrix(rng, 1, d, 1.0).into_data();
        let positional = normal_matrix(rng, positions, d, 0.1);
        let blocks = (0..config.layers)
            .map(|_| Block::init(rng, d, config.heads, config.mlp_ratio))
            .collect();
        let projection = normal_matrix(rng, config.embed_dim, d, 1.0 / (d as f64).sqrt());
        Self {
            class_token,
            positional,
            blocks,
            ln_post_gamma: vec![T::one(); d],
            ln_post_beta: vec![T::zero(); d],
            projection,
        }
    }

    fn cast<U: Scalar>(&self) -> Branch<U> {
        Branch {
            class_token: numerics::cast_vec(&self.class_token),
            positional: self.positional.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            ln_post_gamma: numerics::cast_vec(&self.ln_post_gamma),
            ln_post_beta: numerics::cast_vec(&self.ln_post_beta),
            projection: self.projection.cast(),
        }
    }

    fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![&self.class_token, self.positional.data()];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.ln_post_gamma[..], &self.ln_post_beta[..], self.projection.data()]);
        v
    }

    /// `[class token; content]` plus positional embeddings.
    fn with_class_token(&self, content: &Matrix<T>) -> Matrix<T> {
        let d = self.class_token.len();
        Matrix::from_fn(content.rows() + 1, d, |r, c| {
            let base = if r == 0 {
                self.class_token[c]
            } else {
                content.get(r - 1, c)
            };
            base + self.positional.get(r, c)
        })
    }

    fn readout(&self, class_out: &[T]) -> Result<Vec<T>> {
        let z = numerics::layer_norm(class_out, &self.ln_post_gamma, &self.ln_post_beta, T::of(LN_EPS))?;
        Ok(self.projection.matvec(&z)?)
    }

    /// Runs the stack with prompt injection. `prompts[l]` replaces the prompt
    /// slots at the input of layer `l`; later layers carry the slots forward.
    fn run(&self, tokens: &Matrix<T>, prompts: &[Matrix<T>]) -> Result<(Vec<T>, SequenceCache<T>)> {
        let n_prompts = prompts.first().map_or(0, |p| p.rows());
        let d = tokens.cols();
        let mut x = if n_prompts > 0 {
            Matrix::from_fn(n_prompts + tokens.rows(), d, |r, c| {
                if r < n_prompts {
                    prompts[0].get(r, c)
                } else {
                    tokens.get(r - n_prompts, c)
                }
            })
        } else {
            tokens.clone()
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 && n_prompts > 0 {
                if let Some(p) = prompts.get(l) {
                    for r in 0..n_prompts {
                        x.row_mut(r).copy_from_slice(p.row(r));
                    }
                }
            }
            let (y, cache) = block.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        let out = self.readout(x.row(n_prompts))?;
        Ok((
            out,
            SequenceCache {
                blocks: caches,
                final_tokens: x,
                num_prompts: n_prompts,
            },
        ))
    }

    /// Backpropagates `grad_out` (w.r.t. the projected embedding) into `prompt_grads`.
    fn backward(&self, cache: &SequenceCache<T>, grad_out: &[T], prompt_grads: &mut [Matrix<T>]) -> Result<()> {
        let n_prompts = cache.num_prompts;
        let class_row = cache.final_tokens.row(n_prompts);
        let dz = self.projection.t_matvec(grad_out)?;
        let (dclass, _, _) = numerics::layer_norm_backward(class_row, &self.ln_post_gamma, T::of(LN_EPS), &dz)?;
        let mut grad = Matrix::zeros(cache.final_tokens.rows(), cache.final_tokens.cols());
        grad.row_mut(n_prompts).copy_from_slice(&dclass);
        for l in (0..self.blocks.len()).rev() {
            grad = self.blocks[l].backward(&cache.blocks[l], &grad)?;
            if n_prompts > 0 && l < prompt_grads.len() {
                // the prompt slots at this layer's input are leaves
                for r in 0..n_prompts {
                    let g = prompt_grads[l].row_mut(r);
                    for (a, &b) in g.iter_mut().zip(grad.row(r)) {
                        *a = *a + b;
                    }
                    grad.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
        Ok(())
    }

    /// Reference path with no prompt handling at all.
    fn run_plain(&self, tokens: &Matrix<T>) -> Result<Vec<T>> {
        let mut x = tokens.clone();
        for block in &self.blocks {
            x = block.forward(&x)?.0;
        }
        self.readout(x.row(0))
    }
}

/// Seeded random dual encoder standing in for a pretrained backbone; never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder<T = f32> {
    pub config: EncoderConfig,
    /// Content-token embedding of the vision branch, `token_dim → width`.
    pub patch_embed: Linear<T>,
    pub vision: Branch<T>,
    /// One row per vocabulary word.
    pub token_embed: Matrix<T>,
    pub text: Branch<T>,
}

/// Template words followed by the six labels.
pub fn vocabulary() -> Vec<&'static str> {
    TEMPLATE.iter().chain(LABEL_NAMES.iter()).copied().collect()
}

/// Token ids of the class anchor for `class`: the template followed by the label.
pub fn anchor_tokens(class: usize) -> Vec<usize> {
    (0..TEMPLATE.len()).chain([TEMPLATE.len() + class]).collect()
}

impl<T: Scalar> FrozenEncoder<T> {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Purpose::Encoder);
        let patch_embed = glorot_linear(&mut rng, config.token_dim, config.width);
        let vision = Branch::init(&mut rng, config, config.tokens_per_frame + 1);
        let token_embed = normal_matrix(&mut rng, vocabulary().len(), config.width, 1.0);
        let text = Branch::init(&mut rng, config, TEMPLATE.len() + 2);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            vision,
            token_embed,
            text,
        })
    }

    pub fn cast<U: Scalar>(&self) -> FrozenEncoder<U> {
        FrozenEncoder {
            config: self.config.clone(),
            patch_embed: self.patch_embed.cast(),
            vision: self.vision.cast(),
            token_embed: self.token_embed.cast(),
            text: self.text.cast(),
        }
    }

    /// SHA-256 over every frozen tensor (values widened to f64, little-endian).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut tensors: Vec<&[T]> = vec![self.patch_embed.weight.data(), &self.patch_embed.bias];
        tensors.extend(self.vision.tensors());
        tensors.push(self.token_embed.data());
        tensors.extend(self.text.tensors());
        for t in tensors {
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Splits a flattened frame row into `tokens_per_frame` content tokens and embeds them.
    fn frame_tokens(&self, frame: &[T]) -> Result<Matrix<T>> {
        let c = &self.config;
        if frame.len() != c.tokens_per_frame * c.token_dim {
            return Err(PromptError::FrameShape {
                got: frame.len(),
                tokens: c.tokens_per_frame,
                token_dim: c.token_dim,
            });
        }
        let raw = Matrix::new(c.tokens_per_frame, c.token_dim, frame.to_vec())?;
        Ok(self.vision.with_class_token(&linear_rows(&raw, &self.patch_embed)?))
    }

    fn text_tokens(&self, ids: &[usize]) -> Matrix<T> {
        let content = Matrix::from_fn(ids.len(), self.config.width, |r, c| self.token_embed.get(ids[r], c));
        self.text.with_class_token(&content)
    }

    /// Projected class-token output for one frame.
    pub fn encode_frame(&self, frame: &[T], prompts: &[Matrix<T>]) -> Result<(Vec<T>, SequenceCache<T>)> {
        self.vision.run(&self.frame_tokens(frame)?, prompts)
    }

    /// The same frame encoding computed without any prompt machinery.
    pub fn encode_frame_plain(&self, frame: &[T]) -> Result<Vec<T>> {
        self.vision.run_plain(&self.frame_tokens(frame)?)
    }

    pub fn encode_text(&self, ids: &[usize], prompts: &[Matrix<T>]) -> Result<(Vec<T>, SequenceCache<T>)> {
        self.text.run(&self.text_tokens(ids), prompts)
    }

    pub fn encode_text_plain(&self, ids: &[usize]) -> Result<Vec<T>> {
        self.text.run_plain(&self.text_tokens(ids))
    }
}

/// Learnable prompt tokens: one `N × width` matrix per prompted layer and branch.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank<T = f32> {
    pub vision: Vec<Matrix<T>>,
    pub text: Vec<Matrix<T>>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn init(encoder: &EncoderConfig, config: &PromptConfig, seed: u64) -> Self {
        let m = config.bank_layers(encoder.layers);
        let mut rng = stream(seed, Purpose::Prompts);
        let mut layer = || normal_matrix(&mut rng, config.num_prompts, encoder.width, 1.0);
        let vision = (0..m).map(|_| layer()).collect();
        let text = (0..m).map(|_| layer()).collect();
        Self { vision, text }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Matrix<T>>| v.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            vision: z(&self.vision),
            text: z(&self.text),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PromptBank<U> {
        PromptBank {
            vision: self.vision.iter().map(Matrix::cast).collect(),
            text: self.text.iter().map(Matrix::cast).collect(),
        }
    }

    pub fn num_prompts(&self) -> usize {
        self.vision.first().map_or(0, |m| m.rows())
    }

    pub fn is_finite(&self) -> bool {
        self.vision.iter().chain(&self.text).all(Matrix::is_finite)
    }
}

impl<T: Scalar> ParamSet<T> for PromptBank<T> {
    fn slices(&self) -> Vec<&[T]> {
        self.vision.iter().chain(&self.text).map(Matrix::data).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.vision
            .iter_mut()
            .chain(self.text.iter_mut())
            .map(Matrix::data_mut)
            .collect()
    }
}

fn l2_normalize<T: Scalar>(v: &[T]) -> Result<(Vec<T>, T)> {
    let norm = dot(v, v).sqrt();
    if !(norm > T::zero()) {
        return Err(PromptError::ZeroNorm);
    }
    Ok((v.iter().map(|&x| x / norm).collect(), norm))
}

/// Gradient through `u = v/|v|`.
fn l2_normalize_backward<T: Scalar>(unit: &[T], norm: T, grad: &[T]) -> Vec<T> {
    let proj = dot(unit, grad);
    unit.iter().zip(grad).map(|(&u, &g)| (g - u * proj) / norm).collect()
}

/// Frames of one video with the caches needed to backpropagate its embedding.
#[derive(Clone, Debug)]
pub struct VideoCache<T> {
    frames: Vec<SequenceCache<T>>,
    unit: Vec<T>,
    norm: T,
}

/// Mean of the per-frame encodings, L2-normalised.
pub fn encode_video<T: Scalar>(
    encoder: &FrozenEncoder<T>,
    frames: &Matrix<T>,
    prompts: &PromptBank<T>,
) -> Result<(Vec<T>, VideoCache<T>)> {
    if frames.rows() == 0 {
        return Err(PromptError::EmptyFrames);
    }
    let mut pooled = vec![T::zero(); encoder.config.embed_dim];
    let mut caches = Vec::with_capacity(frames.rows());
    for t in 0..frames.rows() {
        let (e, cache) = encoder.encode_frame(frames.row(t), &prompts.vision)?;
        for (p, v) in pooled.iter_mut().zip(e) {
            *p = *p + v;
        }
        caches.push(cache);
    }
    let inv_t = T::of(1.0 / frames.rows() as f64);
    pooled.iter_mut().for_each(|p| *p = *p * inv_t);
    let (unit, norm) = l2_normalize(&pooled)?;
    Ok((
        unit.clone(),
        VideoCache {
            frames: caches,
            unit,
            norm,
        },
    ))
}

fn encode_video_backward<T: Scalar>(
    encoder: &FrozenEncoder<T>,
    cache: &VideoCache<T>,
    grad_unit: &[T],
    grads: &mut PromptBank<T>,
) -> Result<()> {
    let inv_t = T::of(1.0 / cache.frames.len() as f64);
    let dpooled: Vec<T> = l2_normalize_backward(&cache.unit, cache.norm, grad_unit)
        .into_iter()
        .map(|g| g * inv_t)
        .collect();
    for f in &cache.frames {
        encoder.vision.backward(f, &dpooled, &mut grads.vision)?;
    }
    Ok(())
}

/// Unit-norm text embeddings of the six class anchors, one row per class.
#[derive(Clone, Debug)]
pub struct AnchorCache<T> {
    pub embeddings: Matrix<T>,
    seqs: Vec<SequenceCache<T>>,
    norms: Vec<T>,
}

pub fn encode_anchors<T: Scalar>(encoder: &FrozenEncoder<T>, prompts: &PromptBank<T>) -> Result<AnchorCache<T>> {
    let mut embeddings = Matrix::zeros(NUM_CLASSES, encoder.config.embed_dim);
    let mut seqs = Vec::with_capacity(NUM_CLASSES);
    let mut norms = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let (e, cache) = encoder.encode_text(&anchor_tokens(c), &prompts.text)?;
        let (unit, norm) = l2_normalize(&e)?;
        embeddings.row_mut(c).copy_from_slice(&unit);
        seqs.push(cache);
        norms.push(norm);
    }
    Ok(AnchorCache {
        embeddings,
        seqs,
        norms,
    })
}

fn encode_anchors_backward<T: Scalar>(
    encoder: &FrozenEncoder<T>,
    cache: &AnchorCache<T>,
    grad: &Matrix<T>,
    grads: &mut PromptBank<T>,
) -> Result<()> {
    for c in 0..NUM_CLASSES {
        let de = l2_normalize_backward(cache.embeddings.row(c), cache.norms[c], grad.row(c));
        encoder.text.backward(&cache.seqs[c], &de, &mut grads.text)?;
    }
    Ok(())
}

/// Cosine similarity of a unit-norm video embedding to each unit-norm anchor, over `temperature`.
pub fn class_logits<T: Scalar>(video: &[T], anchors: &Matrix<T>, temperature: f64) -> Result<Vec<T>> {
    let inv = T::of(1.0 / temperature);
    Ok(anchors.matvec(video)?.into_iter().map(|s| s * inv).collect())
}

/// Cross-entropy of one video plus gradients w.r.t. every prompt.
/// `grad_anchors` accumulates `dL/d(anchor embeddings)` so the text branch is
/// backpropagated once per batch.
fn video_loss<T: Scalar>(
    encoder: &FrozenEncoder<T>,
    prompts: &PromptBank<T>,
    anchors: &AnchorCache<T>,
    frames: &Matrix<T>,
    label: usize,
    temperature: f64,
    grads: &mut PromptBank<T>,
    grad_anchors: &mut Matrix<T>,
) -> Result<(T, Vec<T>)> {
    let (unit, cache) = encode_video(encoder, frames, prompts)?;
    let logits = class_logits(&unit, &anchors.embeddings, temperature)?;
    let (loss, dlogits) = numerics::cross_entropy(&logits, label)?;
    let inv = T::of(1.0 / temperature);
    let ds: Vec<T> = dlogits.iter().map(|&g| g * inv).collect();
    let dunit = anchors.embeddings.t_matvec(&ds)?;
    grad_anchors.add_outer(&ds, &unit);
    encode_video_backward(encoder, &cache, &dunit, grads)?;
    Ok((loss, logits))
}

/// Mean loss over `(frames, label)` pairs and its gradient w.r.t. all prompts.
pub fn batch_loss_and_grad<T: Scalar>(
    encoder: &FrozenEncoder<T>,
    prompts: &PromptBank<T>,
    batch: &[(&Matrix<T>, usize)],
    temperature: f64,
) -> Result<(T, PromptBank<T>)> {
    let anchors = encode_anchors(encoder, prompts)?;
    let mut grads = prompts.zeros_like();
    let mut grad_anchors = Matrix::zeros(NUM_CLASSES, encoder.config.embed_dim);
    let mut total = T::zero();
    for (frames, label) in batch {
        let (loss, _) = video_loss(
            encoder,
            prompts,
            &anchors,
            frames,
            *label,
            temperature,
            &mut grads,
            &mut grad_anchors,
        )?;
        total = total + loss;
    }
    encode_anchors_backward(encoder, &anchors, &grad_anchors, &mut grads)?;
    let inv = T::of(1.0 / batch.len().max(1) as f64);
    for s in grads.slices_mut() {
        s.iter_mut().for_each(|g| *g = *g * inv);
    }
    Ok((total * inv, grads))
}

/// A video sample in encoder-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: Option<usize>,
    /// `T × (tokens_per_frame · token_dim)`.
    pub frames: Matrix<f32>,
}

impl VideoSample {
    pub fn from_sample(sample: &Sample) -> Result<Self> {
        let f = sample
            .features
            .get(&Modality::Video)
            .ok_or_else(|| PromptError::MissingVideo(sample.id.clone()))?;
        Ok(Self {
            id: sample.id.clone(),
            label: sample.label,
            frames: f.values.clone(),
        })
    }

    fn require_label(&self) -> Result<usize> {
        self.label.ok_or_else(|| PromptError::MissingLabel(self.id.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once an epoch reaches this training accuracy.
    pub target_train_accuracy: Option<f64>,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 3e-2,
            seed: 0,
            target_train_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_waf: f64,
}

#[derive(Clone, Debug)]
pub struct PromptOutcome {
    pub prompts: PromptBank<f32>,
    pub history: Vec<PromptEpoch>,
    /// 0 when the initial prompts were never beaten.
    pub best_epoch: usize,
    pub best_val_waf: f64,
    pub digest_before: String,
    pub digest_after: String,
}

/// Predicted class per sample.
pub fn predict_videos(
    encoder: &FrozenEncoder<f32>,
    prompts: &PromptBank<f32>,
    samples: &[VideoSample],
    temperature: f64,
) -> Result<Vec<usize>> {
    let anchors = encode_anchors(encoder, prompts)?;
    samples
        .iter()
        .map(|s| {
            let (u, _) = encode_video(encoder, &s.frames, prompts)?;
            Ok(numerics::argmax(&class_logits(&u, &anchors.embeddings, temperature)?))
        })
        .collect()
}

fn split_scores(
    encoder: &FrozenEncoder<f32>,
    prompts: &PromptBank<f32>,
    samples: &[VideoSample],
    temperature: f64,
) -> Result<(f64, f64)> {
    let labels = samples
        .iter()
        .map(VideoSample::require_label)
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_videos(encoder, prompts, samples, temperature)?;
    let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    Ok((acc, waf(&preds, &labels)?.waf))
}

/// Adam on the prompts only; keeps the prompts with the best validation WAF
/// (the initial prompts count as epoch 0; ties keep the earlier epoch).
pub fn train_prompts(
    encoder: &FrozenEncoder<f32>,
    prompt_config: &PromptConfig,
    train: &[VideoSample],
    val: &[VideoSample],
    config: &PromptTrainConfig,
) -> Result<PromptOutcome> {
    prompt_config.validate()?;
    if config.batch_size == 0 {
        return Err(PromptError::InvalidConfig("batch_size must be >= 1".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(PromptError::InvalidConfig(
            "train and validation sets must be non-empty".into(),
        ));
    }
    let digest_before = encoder.digest();
    let labels = train
        .iter()
        .map(VideoSample::require_label)
        .collect::<Result<Vec<_>>>()?;
    let mut prompts = PromptBank::init(&encoder.config, prompt_config, config.seed);
    let mut adam = AdamState::new(&prompts);
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let tau = prompt_config.temperature;
    let mut shuffle = stream(config.seed, Purpose::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (_, init_waf) = split_scores(encoder, &prompts, val, tau)?;
    let mut best = (0usize, init_waf, prompts.clone());
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Matrix<f32>, usize)> = chunk.iter().map(|&i| (&train[i].frames, labels[i])).collect();
            let (loss, grads) = batch_loss_and_grad(encoder, &prompts, &batch, tau)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            adam_step(&mut prompts, &grads, &mut adam, adam_cfg)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(PromptError::NonFiniteLoss { epoch });
        }
        let (train_accuracy, _) = split_scores(encoder, &prompts, train, tau)?;
        let (_, val_waf) = split_scores(encoder, &prompts, val, tau)?;
        history.push(PromptEpoch {
            epoch,
            train_loss,
            train_accuracy,
            val_waf,
        });
        if val_waf > best.1 {
            best = (epoch, val_waf, prompts.clone());
        }
        if config.target_train_accuracy.is_some_and(|t| train_accuracy >= t) {
            break;
        }
    }

    let digest_after = encoder.digest();
    if digest_after != digest_before {
        return Err(PromptError::DigestMismatch {
            expected: digest_before,
            found: digest_after,
        });
    }
    Ok(PromptOutcome {
        prompts: best.2,
        history,
        best_epoch: best.0,
        best_val_waf: best.1,
        digest_before,
        digest_after,
    })
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    encoder: EncoderConfig,
    prompt: PromptConfig,
    encoder_digest: String,
}

/// Prompt checkpoint: the encoder is rebuilt from its config and checked against the stored digest.
pub fn save_prompt_bank(
    path: impl AsRef<std::path::Path>,
    encoder: &FrozenEncoder<f32>,
    config: &PromptConfig,
    prompts: &PromptBank<f32>,
) -> Result<()> {
    let header = BankHeader {
        encoder: encoder.config.clone(),
        prompt: config.clone(),
        encoder_digest: encoder.digest(),
    };
    let mut c = TensorContainer::new(serde_json::to_string(&header).expect("header serializes"));
    for (l, m) in prompts.vision.iter().enumerate() {
        c.push(format!("prompt.vision.{l}"), m.clone());
    }
    for (l, m) in prompts.text.iter().enumerate() {
        c.push(format!("prompt.text.{l}"), m.clone());
    }
    Ok(c.write(path)?)
}

pub fn load_prompt_bank(
    path: impl AsRef<std::path::Path>,
) -> Result<(FrozenEncoder<f32>, PromptConfig, PromptBank<f32>)> {
    let c = TensorContainer::read(path)?;
    let header: BankHeader =
        serde_json::from_str(&c.config).map_err(|e| DatasetError::InvalidContainer(format!("prompt header: {e}")))?;
    let encoder = FrozenEncoder::new(&header.encoder)?;
    let found = encoder.digest();
    if found != header.encoder_digest {
        return Err(PromptError::DigestMismatch {
            expected: header.encoder_digest,
            found,
        });
    }
    let m = header.prompt.bank_layers(header.encoder.layers);
    let load = |branch: &str| -> Result<Vec<Matrix<f32>>> {
        (0..m)
            .map(|l| Ok(c.get(&format!("prompt.{branch}.{l}"))?.clone()))
            .collect()
    };
    let prompts = PromptBank {
        vision: load("vision")?,
        text: load("text")?,
    };
    Ok((encoder, header.prompt, prompts))
}

/// Video embeddings as single-frame video-modality features for the fusion pipeline.
pub fn export_embeddings(
    encoder: &FrozenEncoder<f32>,
    prompts: &PromptBank<f32>,
    samples: &[VideoSample],
) -> Result<Vec<(String, FrameFeatures)>> {
    samples
        .iter()
        .map(|s| {
            let (u, _) = encode_video(encoder, &s.frames, prompts)?;
            let values = Matrix::new(1, u.len(), u)?;
            Ok((s.id.clone(), FrameFeatures::new(Modality::Video, values)?))
        })
        .collect()
}
