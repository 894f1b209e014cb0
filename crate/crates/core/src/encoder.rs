//! Miniature CLIP-style dual encoder.
//!
//! Both towers are pre-norm transformers with bidirectional attention by
//! default. The text feature is read from the final EOS state, the image
//! feature from the final CLS state; both are projected (no bias) into the
//! joint space and L2-normalized.

use pdlab_autograd::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::PatchGrid;
use crate::prompt::{inject_at, BoundPrompts};
use crate::tokenizer::TokenSequence;

const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub text: TowerConfig,
    pub image: TowerConfig,
    pub joint_dim: usize,
    /// Token positions in the text positional table.
    pub max_len: usize,
    /// Upper bound on prompt vectors per encoder.
    pub max_prompt_len: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Causal text attention (CLIP-style); prompts after EOS then have no effect.
    pub causal_text: bool,
    /// Initial logit scale applied to cosine similarities.
    pub logit_scale_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text: TowerConfig::default(),
            image: TowerConfig::default(),
            joint_dim: 32,
            max_len: 32,
            max_prompt_len: 32,
            image_height: 32,
            image_width: 16,
            channels: 3,
            patch_size: 8,
            causal_text: false,
            logit_scale_init: 1.0 / 0.07,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("text", &self.text), ("image", &self.image)] {
            if t.width == 0 || t.heads == 0 || t.width % t.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} width {} must be a positive multiple of heads {}",
                    t.width, t.heads
                )));
            }
        }
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(Error::PatchSize {
                height: self.image_height,
                width: self.image_width,
                patch: self.patch_size,
            });
        }
        if self.max_len < 3 || self.joint_dim == 0 {
            return Err(Error::Config("max_len must be >= 3 and joint_dim > 0".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn text_capacity(&self) -> usize {
        self.max_len + self.max_prompt_len
    }

    pub fn image_capacity(&self) -> usize {
        self.num_patches() + 1 + self.max_prompt_len
    }
}

/// Where prompt blocks go inside the input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptPlacement {
    /// After EOS for text, before CLS for images.
    #[default]
    Canonical,
    /// Fixed offset in both towers, counted on the unpadded sequence.
    Offset(usize),
}

/// Final-layer states and projected features of one encoded batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[B, L, d]` output of the last transformer block.
    pub states: Var,
    /// `[B, joint_dim]`, unit L2 norm per row.
    pub features: Var,
    pub layout: Vec<SequenceLayout>,
}

/// Position bookkeeping for one sequence inside an [`EncodedBatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    /// Valid positions (tokens/patches + CLS + prompts); the rest is padding.
    pub len: usize,
    pub prompt_start: usize,
    pub prompt_len: usize,
    /// Position whose final state becomes the global feature.
    pub feature_pos: usize,
}

impl SequenceLayout {
    pub fn is_prompt(&self, pos: usize) -> bool {
        pos >= self.prompt_start && pos < self.prompt_start + self.prompt_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
}

fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < 4 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} tokens is too small")));
        }
        Ok(Self { config, vocab_size })
    }

    /// Fresh parameters: Xavier-uniform linear weights, zero biases, unit
    /// LayerNorm gains, N(0, 0.02) embeddings.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &self.config;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let emb = |shape: &[usize], rng: &mut ChaCha8Rng| {
            Tensor::from_fn(shape, |_| normal.sample(rng))
        };
        let t = c.text;
        s.insert("text.token_embedding", emb(&[self.vocab_size, t.width], &mut rng), true)?;
        s.insert("text.pos_embedding", emb(&[c.max_len, t.width], &mut rng), true)?;
        insert_blocks(&mut s, "text", t, &mut rng)?;
        insert_ln(&mut s, "text.ln_final", t.width)?;
        s.insert("text.proj", xavier(t.width, c.joint_dim, &mut rng), true)?;

        let v = c.image;
        s.insert("image.patch_embedding", xavier(c.patch_dim(), v.width, &mut rng), true)?;
        s.insert("image.cls", emb(&[v.width], &mut rng), true)?;
        s.insert("image.pos_embedding", emb(&[c.num_patches() + 1, v.width], &mut rng), true)?;
        insert_blocks(&mut s, "image", v, &mut rng)?;
        insert_ln(&mut s, "image.ln_post", v.width)?;
        s.insert("image.proj", xavier(v.width, c.joint_dim, &mut rng), true)?;

        s.insert("logit_scale", Tensor::scalar(c.logit_scale_init.ln()), true)?;
        Ok(s)
    }

    /// `exp(logit_scale)` as a scalar graph node.
    pub fn logit_scale(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let raw = g.param(store, "logit_scale")?;
        Ok(g.exp(raw))
    }

    pub fn encode_text(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[TokenSequence],
        prompts: &BoundPrompts,
        placement: PromptPlacement,
    ) -> Result<EncodedBatch> {
        let c = &self.config;
        let d = c.text.width;
        if seqs.is_empty() {
            return Err(Error::EmptySplit("text batch".into()));
        }
        for s in seqs {
            if s.len() > c.max_len {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    capacity: c.max_len,
                });
            }
        }
        let n_prompt = prompts.text.map_or(0, |p| g.shape(p)[0]);
        let max_tokens = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        let padded = max_tokens + n_prompt;

        // Token + positional embeddings for every sequence in one gather.
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids().iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let table = g.param(store, "text.token_embedding")?;
        let pos_table = g.param(store, "text.pos_embedding")?;
        let tok = g.gather_rows(table, &ids)?;
        let pos = g.gather_rows(pos_table, &positions)?;
        let all = g.add(tok, pos)?;

        let mut rows = Vec::with_capacity(seqs.len());
        let mut layout = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for s in seqs {
            let t0 = g.slice(all, 0, offset, offset + s.len())?;
            offset += s.len();
            let at = match placement {
                PromptPlacement::Canonical => s.eos_index() + 1,
                PromptPlacement::Offset(k) => k.min(s.len()),
            };
            let x = inject_at(g, t0, prompts.text, at, c.text_capacity())?;
            let len = s.len() + n_prompt;
            let x = if len < padded {
                let pad = g.input(Tensor::zeros(&[padded - len, d]));
                g.concat(&[x, pad], 0)?
            } else {
                x
            };
            rows.push(g.reshape(x, &[1, padded, d])?);
            let eos = s.eos_index();
            layout.push(SequenceLayout {
                len,
                prompt_start: at,
                prompt_len: n_prompt,
                feature_pos: if at <= eos { eos + n_prompt } else { eos },
            });
        }
        let x = g.concat(&rows, 0)?;
        let mask = self.text_mask(g, &layout, padded);
        let states = run_blocks(g, store, "text", c.text, x, Some(mask))?;

        let normed = {
            let (gamma, beta) = ln_params(g, store, "text.ln_final")?;
            g.layer_norm(states, gamma, beta, LN_EPS)?
        };
        let flat = g.reshape(normed, &[seqs.len() * padded, d])?;
        let picks: Vec<usize> = layout
            .iter()
            .enumerate()
            .map(|(b, l)| b * padded + l.feature_pos)
            .collect();
        let eos_states = g.gather_rows(flat, &picks)?;
        let proj = g.param(store, "text.proj")?;
        let f = g.matmul(eos_states, proj)?;
        let features = g.l2_normalize(f)?;
        Ok(EncodedBatch {
            states,
            features,
            layout,
        })
    }

    fn text_mask(&self, g: &mut Graph, layout: &[SequenceLayout], padded: usize) -> Var {
        let b = layout.len();
        if self.config.causal_text {
            let mut m = vec![0.0; b * padded * padded];
            for (bi, l) in layout.iter().enumerate() {
                for q in 0..padded {
                    for k in 0..padded {
                        if k >= l.len || k > q {
                            m[(bi * padded + q) * padded + k] = MASK_VALUE;
                        }
                    }
                }
            }
            g.input(Tensor::new(&[b, 1, padded, padded], m).expect("mask shape"))
        } else {
            let mut m = vec![0.0; b * padded];
            for (bi, l) in layout.iter().enumerate() {
                for k in l.len..padded {
                    m[bi * padded + k] = MASK_VALUE;
                }
            }
            g.input(Tensor::new(&[b, 1, 1, padded], m).expect("mask shape"))
        }
    }

    pub fn encode_image(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        grids: &[PatchGrid],
        prompts: &BoundPrompts,
        placement: PromptPlacement,
    ) -> Result<EncodedBatch> {
        let c = &self.config;
        let d = c.image.width;
        let b = grids.len();
        if b == 0 {
            return Err(Error::EmptySplit("image batch".into()));
        }
        let n = c.num_patches();
        let mut flat = Vec::with_capacity(b * n * c.patch_dim());
        for grid in grids {
            if grid.patch_dim() != c.patch_dim() {
                return Err(Error::PatchLength {
                    expected: c.patch_dim(),
                    found: grid.patch_dim(),
                });
            }
            if grid.len() != n {
                return Err(Error::SequenceTooLong {
                    len: grid.len(),
                    capacity: n,
                });
            }
            flat.extend(grid.patches.iter().flatten());
        }
        let patches = g.input(Tensor::new(&[b, n, c.patch_dim()], flat)?);
        let w = g.param(store, "image.patch_embedding")?;
        let x = g.matmul(patches, w)?;
        let cls = g.param(store, "image.cls")?;
        let zeros = g.input(Tensor::zeros(&[b, 1, d]));
        let cls = g.add(zeros, cls)?;
        let x = g.concat(&[cls, x], 1)?;
        let pos = g.param(store, "image.pos_embedding")?;
        let x = g.add(x, pos)?;

        let n_prompt = prompts.image.map_or(0, |p| g.shape(p)[0]);
        let at = match placement {
            PromptPlacement::Canonical => 0,
            PromptPlacement::Offset(k) => k.min(n + 1),
        };
        let x = inject_at(g, x, prompts.image, at, c.image_capacity())?;
        let states = run_blocks(g, store, "image", c.image, x, None)?;

        let cls_pos = if at == 0 { n_prompt } else { 0 };
        let len = n + 1 + n_prompt;
        let cls_state = g.slice(states, 1, cls_pos, cls_pos + 1)?;
        let cls_state = g.reshape(cls_state, &[b, d])?;
        let (gamma, beta) = ln_params(g, store, "image.ln_post")?;
        let normed = g.layer_norm(cls_state, gamma, beta, LN_EPS)?;
        let proj = g.param(store, "image.proj")?;
        let f = g.matmul(normed, proj)?;
        let features = g.l2_normalize(f)?;
        let layout = vec![
            SequenceLayout {
                len,
                prompt_start: at,
                prompt_len: n_prompt,
                feature_pos: cls_pos,
            };
            b
        ];
        Ok(EncodedBatch {
            states,
            features,
            layout,
        })
    }
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-b..=b))
}

fn insert_ln(s: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    s.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]), true)?;
    s.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]), true)?;
    Ok(())
}

fn insert_linear(
    s: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (w, b) = linear_names(prefix);
    s.insert(w, xavier(fan_in, fan_out, rng), true)?;
    s.insert(b, Tensor::zeros(&[fan_out]), true)?;
    Ok(())
}

fn insert_blocks(s: &mut ParamStore, tower: &str, t: TowerConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = t.width;
    for l in 0..t.layers {
        let p = format!("{tower}.blocks.{l}");
        insert_ln(s, &format!("{p}.ln1"), d)?;
        for proj in ["q", "k", "v", "o"] {
            insert_linear(s, &format!("{p}.attn.{proj}"), d, d, rng)?;
        }
        insert_ln(s, &format!("{p}.ln2"), d)?;
        insert_linear(s, &format!("{p}.mlp.fc1"), d, d * t.mlp_ratio, rng)?;
        insert_linear(s, &format!("{p}.mlp.fc2"), d * t.mlp_ratio, d, rng)?;
    }
    Ok(())
}

fn ln_params(g: &mut Graph, s: &ParamStore, prefix: &str) -> Result<(Var, Var)> {
    Ok((
        g.param(s, &format!("{prefix}.gamma"))?,
        g.param(s, &format!("{prefix}.beta"))?,
    ))
}

fn linear(g: &mut Graph, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let (wn, bn) = linear_names(prefix);
    let w = g.param(s, &wn)?;
    let b = g.param(s, &bn)?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn run_blocks(
    g: &mut Graph,
    s: &ParamStore,
    tower: &str,
    t: TowerConfig,
    mut x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    for l in 0..t.layers {
        let p = format!("{tower}.blocks.{l}");
        let (g1, b1) = ln_params(g, s, &format!("{p}.ln1"))?;
        let h = g.layer_norm(x, g1, b1, LN_EPS)?;
        let a = attention(g, s, &p, h, mask, t.heads)?;
        x = g.add(x, a)?;
        let (g2, b2) = ln_params(g, s, &format!("{p}.ln2"))?;
        let h = g.layer_norm(x, g2, b2, LN_EPS)?;
        let h = linear(g, s, &format!("{p}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, s, &format!("{p}.mlp.fc2"), h)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

fn attention(
    g: &mut Graph,
    s: &ParamStore,
    block: &str,
    x: Var,
    mask: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let mut split = |name: &str| -> Result<Var> {
        let y = linear(g, s, &format!("{block}.attn.{name}"), x)?;
        let y = g.reshape(y, &[b, l, heads, dh])?;
        Ok(g.permute(y, &[0, 2, 1, 3])?)
    };
    let q = split("q")?;
    let k = split("k")?;
    let v = split("v")?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, d])?;
    linear(g, s, &format!("{block}.attn.o"), ctx)
}

/// `texts · imagesᵀ` for L2-normalized feature rows.
pub fn similarity_matrix(texts: &[Vec<f64>], images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = texts.first().or(images.first()).map_or(0, Vec::len);
    if texts.iter().chain(images).any(|f| f.len() != dim) {
        return Err(Error::Invalid("feature dimension mismatch".into()));
    }
    Ok(texts
        .iter()
        .map(|t| {
            images
                .iter()
                .map(|i| pdlab_autograd::kernels::dot(t, i))
                .collect()
        })
        .collect())
}
