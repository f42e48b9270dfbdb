//! Tiny pre-LN decoder-only transformer with tied token embeddings and learned
//! absolute positional embeddings.

mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, CHECKPOINT_HEADER};
pub use forward::{backward, forward, loss, ForwardOutput, ForwardTrace};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TrimMap;
use crate::error::{DeptError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub expansion_ratio: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_blocks", self.num_blocks),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("expansion_ratio", self.expansion_ratio),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DeptError::InvalidArgument(format!("architecture field {name} must be >= 1")));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(DeptError::InvalidArgument(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.expansion_ratio
    }

    pub fn with_vocab(self, vocab_size: usize) -> Self {
        Self { vocab_size, ..self }
    }

    /// Parameters of one block: two layer norms, fused QKV, output projection, MLP.
    pub fn block_param_count(&self) -> u64 {
        let d = self.d_model as u64;
        let f = self.ffn_dim() as u64;
        4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d)
    }

    /// Parameters of the transformer body (everything except φ and ψ).
    pub fn body_param_count(&self) -> u64 {
        self.num_blocks as u64 * self.block_param_count() + 2 * self.d_model as u64
    }

    pub fn token_embedding_count(&self) -> u64 {
        (self.vocab_size * self.d_model) as u64
    }

    pub fn positional_embedding_count(&self) -> u64 {
        (self.seq_len * self.d_model) as u64
    }

    pub fn total_param_count(&self) -> u64 {
        self.body_param_count() + self.token_embedding_count() + self.positional_embedding_count()
    }
}

pub const BLOCK_TENSOR_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.w_qkv", "attn.b_qkv", "attn.w_o", "attn.b_o", "ln2.g", "ln2.b",
    "mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn zeros(arch: &Architecture) -> Self {
        let d = arch.d_model;
        let f = arch.ffn_dim();
        Self {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            w_qkv: Tensor::zeros(&[d, 3 * d]),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w_fc: Tensor::zeros(&[d, f]),
            b_fc: Tensor::zeros(&[f]),
            w_proj: Tensor::zeros(&[f, d]),
            b_proj: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o,
            &self.ln2_g, &self.ln2_b, &self.w_fc, &self.b_fc, &self.w_proj, &self.b_proj,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_qkv, &mut self.b_qkv, &mut self.w_o,
            &mut self.b_o, &mut self.ln2_g, &mut self.ln2_b, &mut self.w_fc, &mut self.b_fc,
            &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

/// The transformer body θ: all blocks plus the final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Body<T> {
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
}

impl<T: Scalar> Body<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            blocks: (0..arch.num_blocks).map(|_| Block::zeros(arch)).collect(),
            lnf_g: Tensor::zeros(&[arch.d_model]),
            lnf_b: Tensor::zeros(&[arch.d_model]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> =
            self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.blocks.len())
            .flat_map(|i| BLOCK_TENSOR_NAMES.iter().map(move |n| format!("body.{i}.{n}")))
            .collect();
        out.push("body.lnf.g".into());
        out.push("body.lnf.b".into());
        out
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }
}

/// Body θ, token embeddings φ (`vocab × d_model`, also the output head) and
/// positional embeddings ψ (`seq_len × d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub body: Body<T>,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
}

/// Gradients share the parameter layout.
pub type GradientSet<T> = ModelParams<T>;

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            body: Body::zeros(&arch),
            tok_emb: Tensor::zeros(&[arch.vocab_size, arch.d_model]),
            pos_emb: Tensor::zeros(&[arch.seq_len, arch.d_model]),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.rows()
    }

    /// All tensors in canonical order: body, then φ, then ψ.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.body.tensors();
        out.push(&self.tok_emb);
        out.push(&self.pos_emb);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.body.tensors_mut();
        out.push(&mut self.tok_emb);
        out.push(&mut self.pos_emb);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = self.body.names();
        out.push("phi".into());
        out.push("psi".into());
        out
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn scale(&mut self, s: T) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.shape() != y.shape()) {
            return Err(DeptError::ShapeMismatch("parameter sets are not congruent".into()));
        }
        Ok(())
    }
}

pub(crate) fn gaussian_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, r: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(r))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Fresh `rows × d_model` embedding matrix from the init distribution.
pub fn init_embedding<T: Scalar, R: Rng + ?Sized>(rows: usize, d_model: usize, r: &mut R) -> Tensor<T> {
    gaussian_tensor(&[rows, d_model], INIT_STD, r)
}

/// Gaussian(0, 0.02) for embeddings and projection matrices, zero biases,
/// unit layer-norm gains. Deterministic in `seed`.
pub fn init_params<T: Scalar>(arch: Architecture, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut r = rng::stream(seed, "init", 0, 0);
    let tok_emb = init_embedding(arch.vocab_size, arch.d_model, &mut r);
    let pos_emb = init_embedding(arch.seq_len, arch.d_model, &mut r);
    let body = init_body(&arch, &mut r);
    Ok(ModelParams { arch, body, tok_emb, pos_emb })
}

pub fn init_body<T: Scalar, R: Rng + ?Sized>(arch: &Architecture, r: &mut R) -> Body<T> {
    let d = arch.d_model;
    let f = arch.ffn_dim();
    let mut body = Body::zeros(arch);
    for b in body.blocks.iter_mut() {
        b.ln1_g = Tensor::filled(&[d], T::one());
        b.ln2_g = Tensor::filled(&[d], T::one());
        b.w_qkv = gaussian_tensor(&[d, 3 * d], INIT_STD, r);
        b.w_o = gaussian_tensor(&[d, d], INIT_STD, r);
        b.w_fc = gaussian_tensor(&[d, f], INIT_STD, r);
        b.w_proj = gaussian_tensor(&[f, d], INIT_STD, r);
    }
    body.lnf_g = Tensor::filled(&[d], T::one());
    body
}

/// Euclidean norm over every entry of every tensor.
pub fn l2_norm<'a, T: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> f64 {
    tensors.into_iter().map(|t| t.sum_sq().as_f64()).sum::<f64>().sqrt()
}

pub fn param_l2_norm<T: Scalar>(params: &ModelParams<T>) -> f64 {
    l2_norm(params.tensors())
}

/// Selects the rows of φ owned by a local vocabulary; the tied head then spans
/// only that vocabulary.
pub fn slice_token_embeddings<T: Scalar>(params: &ModelParams<T>, trim: &TrimMap) -> Result<ModelParams<T>> {
    if trim.global_size() != params.vocab_size() {
        return Err(DeptError::ShapeMismatch(format!(
            "trim map over {} tokens, embeddings have {} rows",
            trim.global_size(),
            params.vocab_size()
        )));
    }
    Ok(ModelParams {
        arch: params.arch.with_vocab(trim.local_size()),
        body: params.body.clone(),
        tok_emb: gather_rows(&params.tok_emb, trim),
        pos_emb: params.pos_emb.clone(),
    })
}

/// `𝓘 φ`: row `i` of the result is row `local_to_global[i]` of `global`.
pub fn gather_rows<T: Scalar>(global: &Tensor<T>, trim: &TrimMap) -> Tensor<T> {
    let d = global.cols();
    let mut out = Tensor::zeros(&[trim.local_size(), d]);
    for (i, &g) in trim.local_to_global().iter().enumerate() {
        out.row_mut(i).copy_from_slice(global.row(g as usize));
    }
    out
}

/// `𝓘ᵀ φ_k`: scatter local rows to their global positions, zeros elsewhere.
pub fn pad_embeddings<T: Scalar>(local: &Tensor<T>, trim: &TrimMap) -> Result<Tensor<T>> {
    if local.rows() != trim.local_size() {
        return Err(DeptError::ShapeMismatch(format!(
            "{} local rows, trim map has {}",
            local.rows(),
            trim.local_size()
        )));
    }
    let d = local.cols();
    let mut out = Tensor::zeros(&[trim.global_size(), d]);
    for (i, &g) in trim.local_to_global().iter().enumerate() {
        out.row_mut(g as usize).copy_from_slice(local.row(i));
    }
    Ok(out)
}
