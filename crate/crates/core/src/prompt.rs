//! Learnable prompt vectors: initialization, placement in the encoder input
//! sequences, dropout and per-stage trainability.
//!
//! Text prompts go right after the EOS token; image prompts go in front of
//! the CLS token. Prompts never receive positional embeddings.

use std::fmt;
use std::str::FromStr;

use pdlab_autograd::{dropout_mask, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_PREFIX: &str = "prompt.";
pub const TEXT_PREFIX: &str = "prompt.text.";
pub const IMAGE_PREFIX: &str = "prompt.image.";

pub fn is_prompt_param(name: &str) -> bool {
    name.starts_with(PROMPT_PREFIX)
}

pub fn text_prompt_name(i: usize) -> String {
    format!("{TEXT_PREFIX}{i:03}")
}

pub fn image_prompt_name(i: usize) -> String {
    format!("{IMAGE_PREFIX}{i:03}")
}

/// `text`: `[N_txt, d_text]`, `image`: `[N_img, d_image]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub text: Tensor,
    pub image: Tensor,
    pub dropout_p: f64,
}

impl PromptSet {
    pub fn text_len(&self) -> usize {
        self.text.shape()[0]
    }

    pub fn image_len(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn text_width(&self) -> usize {
        self.text.shape()[1]
    }

    pub fn image_width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Stores each vector as its own trainable parameter.
    pub fn insert_into(&self, store: &mut ParamStore) -> Result<()> {
        for (rows, width, name) in [
            (&self.text, self.text_width(), text_prompt_name as fn(usize) -> String),
            (&self.image, self.image_width(), image_prompt_name),
        ] {
            for (i, v) in rows.data().chunks(width.max(1)).enumerate() {
                if width == 0 {
                    break;
                }
                store.insert(name(i), Tensor::new(&[width], v.to_vec())?, true)?;
            }
        }
        Ok(())
    }

    /// Reassembles the prompt set held in `store`.
    pub fn from_store(store: &ParamStore, d_text: usize, d_image: usize, dropout_p: f64) -> Result<Self> {
        Ok(Self {
            text: collect(store, TEXT_PREFIX, d_text)?,
            image: collect(store, IMAGE_PREFIX, d_image)?,
            dropout_p,
        })
    }

    /// Train mode: inverted dropout with keep probability `1 - p`. Eval mode:
    /// unchanged copy.
    pub fn apply_dropout<R: Rng + ?Sized>(&self, train: bool, rng: &mut R) -> Result<Self> {
        if !train || self.dropout_p == 0.0 {
            return Ok(self.clone());
        }
        let drop = |t: &Tensor, rng: &mut R| -> Result<Tensor> {
            let mask = dropout_mask(t.numel(), self.dropout_p, rng)?;
            let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            Ok(Tensor::new(t.shape(), data)?)
        };
        Ok(Self {
            text: drop(&self.text, rng)?,
            image: drop(&self.image, rng)?,
            dropout_p: self.dropout_p,
        })
    }
}

fn collect(store: &ParamStore, prefix: &str, width: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for (_, t) in store.iter().filter(|(name, _)| name.starts_with(prefix)) {
        if t.shape() != [width] {
            return Err(Error::Invalid(format!(
                "prompt vector of shape {:?}, expected [{width}]",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    Ok(Tensor::new(&[n, width], data)?)
}

/// Xavier-uniform bound for a prompt vector of width `d` (fan_in = fan_out = d).
pub fn xavier_bound(d: usize) -> f64 {
    (6.0 / (2 * d) as f64).sqrt()
}

pub fn init_prompts(
    n_text: usize,
    n_image: usize,
    d_text: usize,
    d_image: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<PromptSet> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Invalid(format!("prompt dropout {dropout_p} not in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, d: usize| {
        let b = xavier_bound(d);
        Tensor::from_fn(&[n, d], |_| rng.gen_range(-b..=b))
    };
    let text = draw(n_text, d_text);
    let image = draw(n_image, d_image);
    Ok(PromptSet {
        text,
        image,
        dropout_p,
    })
}

/// Prompt blocks bound on a graph, already dropout-processed.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoundPrompts {
    /// `[N_txt, d_text]`
    pub text: Option<Var>,
    /// `[N_img, d_image]`
    pub image: Option<Var>,
}

/// Binds the prompt parameters in `store` on `g`; applies dropout when `train`.
pub fn bind_prompts<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    dropout_p: f64,
    train: bool,
    rng: &mut R,
) -> Result<BoundPrompts> {
    let mut bind = |prefix: &str, rng: &mut R| -> Result<Option<Var>> {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(str::to_string)
            .collect();
        if names.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(names.len());
        for name in &names {
            let v = g.param(store, name)?;
            let d = g.shape(v)[0];
            rows.push(g.reshape(v, &[1, d])?);
        }
        let mut block = g.concat(&rows, 0)?;
        if train && dropout_p > 0.0 {
            block = g.dropout(block, dropout_p, rng)?;
        }
        Ok(Some(block))
    };
    let text = bind(TEXT_PREFIX, rng)?;
    let image = bind(IMAGE_PREFIX, rng)?;
    Ok(BoundPrompts { text, image })
}

/// Inserts `prompts` (`[N, d]`) into `seq` (`[L, d]` or `[B, L, d]`) so the
/// prompt block starts at `position` along the sequence axis.
pub fn inject_at(
    g: &mut Graph,
    seq: Var,
    prompts: Option<Var>,
    position: usize,
    capacity: usize,
) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    let axis = shape.len().checked_sub(2).ok_or_else(|| {
        Error::Invalid(format!("sequence of shape {shape:?} has no sequence axis"))
    })?;
    let len = shape[axis];
    let Some(p) = prompts else {
        if len > capacity {
            return Err(Error::SequenceTooLong { len, capacity });
        }
        return Ok(seq);
    };
    let n = g.shape(p)[0];
    if len + n > capacity {
        return Err(Error::SequenceTooLong {
            len: len + n,
            capacity,
        });
    }
    if position > len {
        return Err(Error::Invalid(format!(
            "prompt position {position} beyond sequence length {len}"
        )));
    }
    if n == 0 {
        return Ok(seq);
    }
    let block = if axis == 0 {
        p
    } else {
        let mut expanded = shape.clone();
        expanded[axis] = n;
        let zeros = g.input(Tensor::zeros(&expanded));
        g.add(zeros, p)?
    };
    let mut parts = Vec::with_capacity(3);
    if position > 0 {
        parts.push(g.slice(seq, axis, 0, position)?);
    }
    parts.push(block);
    if position < len {
        parts.push(g.slice(seq, axis, position, len)?);
    }
    Ok(g.concat(&parts, axis)?)
}

/// Text layout: `sos, t1 .. tn, eos, p1 .. pN` followed by any padding that
/// `t0` carried after its EOS slot.
pub fn inject_text(
    g: &mut Graph,
    t0: Var,
    eos_index: usize,
    prompts: Option<Var>,
    capacity: usize,
) -> Result<Var> {
    inject_at(g, t0, prompts, eos_index + 1, capacity)
}

/// Image layout: `p1 .. pN, cls, v1 .. vN`.
pub fn inject_image(g: &mut Graph, v0: Var, prompts: Option<Var>, capacity: usize) -> Result<Var> {
    inject_at(g, v0, prompts, 0, capacity)
}

/// Which parameter groups an optimization phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Prompts only; encoders and classifier frozen.
    Stage1,
    /// Encoders and classifier; prompts frozen.
    Stage2,
    /// Full fine-tuning without prompts.
    Baseline,
    /// Prompts and encoders together.
    OneStage,
    /// Source-domain training of the backbone.
    Pretrain,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Baseline => "baseline",
            Stage::OneStage => "one_stage",
            Stage::Pretrain => "pretrain",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "baseline" => Ok(Stage::Baseline),
            "one_stage" | "one-stage" => Ok(Stage::OneStage),
            "pretrain" => Ok(Stage::Pretrain),
            other => Err(Error::UnknownStage(other.to_string())),
        }
    }
}

/// Sets trainable flags for `stage`.
pub fn set_stage_trainability(store: &mut ParamStore, stage: Stage) -> Result<()> {
    let has_prompts = store.names().any(is_prompt_param);
    match stage {
        Stage::Stage1 => store.set_trainable_by(is_prompt_param),
        Stage::Stage2 => store.set_trainable_by(|n| !is_prompt_param(n)),
        Stage::Baseline | Stage::Pretrain => {
            if has_prompts {
                return Err(Error::Config(format!(
                    "{stage} training must not carry prompt parameters"
                )));
            }
            store.set_trainable_by(|_| true)
        }
        Stage::OneStage => store.set_trainable_by(|_| true),
    }
    Ok(())
}
