//! Batching, the optimization loop and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use pdlab_autograd::{adam_step, AdamConfig, AdamState, Graph, LrSchedule, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{similarity_matrix, DualEncoder, PromptPlacement};
use crate::error::{Error, Result};
use crate::metrics::{rank_gallery, MetricsReport, RankedGallery};
use crate::objectives::{infonce, l_itc, total_loss_stage2, LossConfig, CLASSIFIER_PREFIX};
use crate::patch::{patchify, PatchGrid};
use crate::prompt::{bind_prompts, is_prompt_param, set_stage_trainability, Stage, PROMPT_PREFIX};
use crate::synth::SplitData;
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary};

/// A split tokenized and patchified once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub label: String,
    pub seqs: Vec<TokenSequence>,
    pub caption_image: Vec<usize>,
    pub caption_ids: Vec<usize>,
    pub grids: Vec<PatchGrid>,
    pub image_ids: Vec<usize>,
}

impl Prepared {
    pub fn new(split: &SplitData, vocab: &Vocabulary, encoder: &DualEncoder) -> Result<Self> {
        let c = &encoder.config;
        let seqs = split
            .captions
            .iter()
            .map(|cap| tokenize(&cap.text, vocab, c.max_len))
            .collect::<Result<Vec<_>>>()?;
        let grids = split
            .images
            .iter()
            .map(|im| patchify(im, c.patch_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: split.label(),
            seqs,
            caption_image: split.captions.iter().map(|c| c.image).collect(),
            caption_ids: split.captions.iter().map(|c| c.person_id).collect(),
            grids,
            image_ids: split.image_ids.clone(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty() || self.grids.is_empty()
    }

    /// Dense `0..N` labels over the identities present, in ascending id order.
    pub fn identity_labels(&self) -> BTreeMap<usize, usize> {
        let mut ids = self.image_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(k, id)| (id, k)).collect()
    }
}

/// Draws `P` distinct identities per batch and `K` captions of each,
/// preferring distinct images. Identities are visited in shuffled rounds.
#[derive(Debug, Clone)]
pub struct PkSampler {
    /// Per identity: per image, the caption indices describing it.
    by_id: Vec<Vec<Vec<usize>>>,
    p: usize,
    k: usize,
    queue: Vec<usize>,
    pub steps_per_epoch: usize,
}

impl PkSampler {
    pub fn new(data: &Prepared, batch_size: usize, k: usize) -> Result<Self> {
        if k == 0 || batch_size % k != 0 {
            return Err(Error::Config(format!("batch {batch_size} is not a multiple of K={k}")));
        }
        let mut grouped: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (ci, (&img, &pid)) in data.caption_image.iter().zip(&data.caption_ids).enumerate() {
            grouped.entry(pid).or_default().entry(img).or_default().push(ci);
        }
        if grouped.is_empty() {
            return Err(Error::EmptySplit(data.label.clone()));
        }
        let by_id: Vec<Vec<Vec<usize>>> = grouped
            .into_values()
            .map(|imgs| imgs.into_values().collect())
            .collect();
        let p = (batch_size / k).min(by_id.len());
        Ok(Self {
            steps_per_epoch: data.grids.len().div_ceil(batch_size).max(1),
            by_id,
            p,
            k,
            queue: Vec::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn next_batch<R: Rng>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut people = Vec::with_capacity(self.p);
        while people.len() < self.p {
            if self.queue.is_empty() {
                self.queue = (0..self.by_id.len()).collect();
                self.queue.shuffle(rng);
            }
            let who = self.queue.pop().expect("refilled above");
            if !people.contains(&who) {
                people.push(who);
            }
        }
        let mut batch = Vec::with_capacity(self.p * self.k);
        for who in people {
            let images = &self.by_id[who];
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.shuffle(rng);
            for j in 0..self.k {
                let caps = &images[order[j % order.len()]];
                batch.push(caps[rng.gen_range(0..caps.len())]);
            }
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Symmetric InfoNCE with diagonal positives.
    InfoNce,
    /// Identity-aware contrastive loss only.
    Itc,
    /// Contrastive plus weighted identity loss.
    Total,
}

/// Default objective of each stage.
pub fn objective_for(stage: Stage) -> Objective {
    match stage {
        Stage::Pretrain | Stage::Baseline => Objective::InfoNce,
        Stage::Stage1 => Objective::Itc,
        Stage::Stage2 | Stage::OneStage => Objective::Total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub stage: Stage,
    pub epoch: usize,
    pub lr_base: f64,
    pub lr_classifier: Option<f64>,
    pub lr_prompt: Option<f64>,
    pub loss_total: f64,
    pub loss_itc: Option<f64>,
    pub loss_id: Option<f64>,
    pub loss_infonce: Option<f64>,
    pub logit_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Mean total loss of each epoch of `stage`, in epoch order.
    pub fn epoch_means(&self, stage: Stage) -> Vec<f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.stage == stage) {
            let e = acc.entry(r.epoch).or_default();
            e.0 += r.loss_total;
            e.1 += 1;
        }
        acc.into_values().map(|(s, n)| s / n as f64).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PhaseSpec {
    pub stage: Stage,
    pub objective: Objective,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub instances_per_id: usize,
    pub loss: LossConfig,
    pub prompt_dropout: f64,
    /// Prompt learning rate relative to the base rate.
    pub prompt_lr_multiplier: f64,
    pub seed: u64,
}

/// Runs one optimization phase in place on `store`, with a fresh optimizer.
///
/// Parameters frozen by `spec.stage` are fingerprinted before and after; any
/// change is reported as [`Error::FreezeViolation`].
pub fn run_phase(
    encoder: &DualEncoder,
    store: &mut ParamStore,
    data: &Prepared,
    spec: &PhaseSpec,
    log: &mut TrainLog,
) -> Result<AdamState> {
    spec.schedule.validate()?;
    set_stage_trainability(store, spec.stage)?;
    let labels = data.identity_labels();
    if spec.objective == Objective::Total && crate::objectives::classifier_classes(store) != Some(labels.len()) {
        return Err(Error::Config(format!(
            "classifier must cover the {} training identities",
            labels.len()
        )));
    }
    let guard = FreezeGuard::capture(store);

    let mut adam = AdamState::new(AdamConfig::default())
        .with_group(CLASSIFIER_PREFIX, spec.schedule.classifier_multiplier)
        .with_group(PROMPT_PREFIX, spec.prompt_lr_multiplier);
    let mut sampler = PkSampler::new(data, spec.batch_size, spec.instances_per_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = sampler.steps_per_epoch;
    for epoch in 0..spec.schedule.total_epochs {
        for step in 0..steps {
            let lr = spec.schedule.lr_for_step(epoch, step, steps)?;
            let batch = sampler.next_batch(&mut rng);
            let row = train_step(encoder, store, data, &batch, spec, &labels, &mut adam, lr, &mut rng)?;
            log.rows.push(LogRow { epoch, ..row });
        }
    }
    guard.verify(store, spec.stage)?;
    Ok(adam)
}

/// Hash of every parameter that is frozen at capture time.
#[derive(Debug, Clone)]
pub struct FreezeGuard {
    frozen: Vec<String>,
    fingerprint: String,
}

impl FreezeGuard {
    pub fn capture(store: &ParamStore) -> Self {
        let frozen: Vec<String> = store
            .iter()
            .filter(|(_, t)| !t.requires_grad)
            .map(|(n, _)| n.to_string())
            .collect();
        let fingerprint = store.fingerprint(|n| frozen.binary_search_by(|f| f.as_str().cmp(n)).is_ok());
        Self { frozen, fingerprint }
    }

    pub fn frozen(&self) -> &[String] {
        &self.frozen
    }

    pub fn verify(&self, store: &ParamStore, stage: Stage) -> Result<()> {
        let now = store.fingerprint(|n| self.frozen.binary_search_by(|f| f.as_str().cmp(n)).is_ok());
        if now != self.fingerprint {
            return Err(Error::FreezeViolation(format!("{stage} changed parameters it must keep fixed")));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    encoder: &DualEncoder,
    store: &mut ParamStore,
    data: &Prepared,
    batch: &[usize],
    spec: &PhaseSpec,
    labels: &BTreeMap<usize, usize>,
    adam: &mut AdamState,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LogRow> {
    let seqs: Vec<TokenSequence> = batch.iter().map(|&c| data.seqs[c].clone()).collect();
    let grids: Vec<PatchGrid> = batch
        .iter()
        .map(|&c| data.grids[data.caption_image[c]].clone())
        .collect();
    let ids: Vec<usize> = batch.iter().map(|&c| labels[&data.caption_ids[c]]).collect();

    let mut g = Graph::new();
    let prompts = bind_prompts(&mut g, store, spec.prompt_dropout, true, rng)?;
    let text = encoder.encode_text(&mut g, store, &seqs, &prompts, PromptPlacement::Canonical)?;
    let image = encoder.encode_image(&mut g, store, &grids, &prompts, PromptPlacement::Canonical)?;
    let scale = spec.loss.scale(&mut g, store)?;
    let (total, itc, id, nce) = match spec.objective {
        Objective::InfoNce => {
            let l = infonce(&mut g, text.features, image.features, scale)?;
            (l, None, None, Some(l))
        }
        Objective::Itc => {
            let l = l_itc(&mut g, text.features, image.features, &ids, scale)?;
            (l, Some(l), None, None)
        }
        Objective::Total => {
            let p = total_loss_stage2(&mut g, store, text.features, image.features, &ids, scale, spec.loss.lambda)?;
            (p.total, p.itc, p.id, None)
        }
    };
    let scalar = |v: Option<pdlab_autograd::Var>| v.map(|v| g.value(v).item().expect("scalar loss"));
    let (loss_total, loss_itc, loss_id, loss_infonce) = (scalar(Some(total)).unwrap(), scalar(itc), scalar(id), scalar(nce));
    if !loss_total.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss in {}", spec.stage)));
    }
    let logit_scale = g.value(scale).item().expect("scalar scale");

    g.backward(total)?;
    store.zero_grad();
    g.write_param_grads(store)?;
    let report = adam_step(store, adam, lr)?;
    Ok(LogRow {
        step: report.step,
        stage: spec.stage,
        epoch: 0,
        lr_base: report.base_lr,
        lr_classifier: group_lr(store, &report.group_lrs, CLASSIFIER_PREFIX),
        lr_prompt: group_lr(store, &report.group_lrs, PROMPT_PREFIX),
        loss_total,
        loss_itc,
        loss_id,
        loss_infonce,
        logit_scale,
    })
}

/// Effective lr of a parameter group in a step, when any of its members trains.
fn group_lr(store: &ParamStore, group_lrs: &[(String, f64)], prefix: &str) -> Option<f64> {
    let trainable = store.iter().any(|(n, t)| n.starts_with(prefix) && t.requires_grad);
    if !trainable {
        return None;
    }
    group_lrs.iter().find(|(p, _)| p == prefix).map(|(_, l)| *l)
}

/// Eval-mode features of every caption and every image of a split.
pub fn encode_split(encoder: &DualEncoder, store: &ParamStore, data: &Prepared, chunk: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let chunk = chunk.max(1);
    let rows = |g: &Graph, v| -> Vec<Vec<f64>> {
        let d = encoder.config.joint_dim;
        g.data(v).chunks(d).map(<[f64]>::to_vec).collect()
    };
    let text: Vec<Vec<Vec<f64>>> = data
        .seqs
        .par_chunks(chunk)
        .map(|seqs| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = bind_prompts(&mut g, store, 0.0, false, &mut rng)?;
            let out = encoder.encode_text(&mut g, store, seqs, &p, PromptPlacement::Canonical)?;
            Ok(rows(&g, out.features))
        })
        .collect::<Result<_>>()?;
    let image: Vec<Vec<Vec<f64>>> = data
        .grids
        .par_chunks(chunk)
        .map(|grids| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = bind_prompts(&mut g, store, 0.0, false, &mut rng)?;
            let out = encoder.encode_image(&mut g, store, grids, &p, PromptPlacement::Canonical)?;
            Ok(rows(&g, out.features))
        })
        .collect::<Result<_>>()?;
    Ok((text.concat(), image.concat()))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub similarity: Vec<Vec<f64>>,
    pub ranked: RankedGallery,
}

/// Captions query the image gallery of the same split.
pub fn evaluate(encoder: &DualEncoder, store: &ParamStore, data: &Prepared, chunk: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptySplit(data.label.clone()));
    }
    let (text, image) = encode_split(encoder, store, data, chunk)?;
    let similarity = similarity_matrix(&text, &image)?;
    let ranked = rank_gallery(&similarity, &data.caption_ids, &data.image_ids)?;
    let report = MetricsReport::from_ranking(&ranked, data.image_ids.len());
    Ok(Evaluation {
        report,
        similarity,
        ranked,
    })
}

/// Names of the parameters a stage may change.
pub fn stage_parameter_set(store: &ParamStore, stage: Stage) -> Vec<String> {
    store
        .names()
        .filter(|n| match stage {
            Stage::Stage1 => is_prompt_param(n),
            Stage::Stage2 => !is_prompt_param(n),
            _ => true,
        })
        .map(str::to_string)
        .collect()
}
