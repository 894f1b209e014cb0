//! Pretraining, adaptation strategies, sweeps and their reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use pdlab_autograd::checkpoint::{self, CheckpointError};
use pdlab_autograd::{AdamState, ParamStore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Strategy};
use crate::corpus::{generate_corpus, load_split, load_vocabulary, read_corpus_config};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::metrics::{dump_rankings, MetricsReport};
use crate::objectives::init_classifier;
use crate::prompt::{init_prompts, is_prompt_param, Stage};
use crate::synth::{derive_seed, Domain};
use crate::tokenizer::Vocabulary;
use crate::train::{evaluate, objective_for, run_phase, PhaseSpec, Prepared, TrainLog};

/// Parameters plus the bookkeeping stored alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub epoch: usize,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> std::result::Result<(), CheckpointError> {
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), json!(ckpt.epoch));
    meta.insert("stage".to_string(), json!(ckpt.stage));
    meta.insert("config_hash".to_string(), json!(ckpt.config_hash));
    meta.insert("seed".to_string(), json!(ckpt.seed));
    checkpoint::save(dir, &ckpt.params, ckpt.optimizer.as_ref(), &meta)
}

fn from_snapshot(s: checkpoint::Snapshot) -> Checkpoint {
    let get = |k: &str| s.metadata.get(k).cloned().unwrap_or(Value::Null);
    Checkpoint {
        epoch: get("epoch").as_u64().unwrap_or(0) as usize,
        stage: get("stage").as_str().unwrap_or_default().to_string(),
        config_hash: get("config_hash").as_str().unwrap_or_default().to_string(),
        seed: get("seed").as_u64().unwrap_or(0),
        params: s.params,
        optimizer: s.optimizer,
    }
}

pub fn load_checkpoint(dir: &Path) -> std::result::Result<Checkpoint, CheckpointError> {
    checkpoint::load(dir).map(from_snapshot)
}

/// Loads and checks every tensor against the names and shapes of `template`.
pub fn load_checkpoint_matching(dir: &Path, template: &ParamStore) -> std::result::Result<Checkpoint, CheckpointError> {
    checkpoint::load_matching(dir, template).map(from_snapshot)
}

/// Corpus, vocabulary, encoder and prepared splits for one configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub encoder: DualEncoder,
    pub source_train: Prepared,
    pub source_test: Prepared,
    pub target_train: Prepared,
    pub target_test: Prepared,
}

impl Workspace {
    /// Loads the corpus under `config.corpus_dir()`, generating it first if absent.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let root = config.corpus_dir();
        if !root.join("config.json").exists() {
            generate_corpus(&root, &config.data, config.data_seed)?;
        }
        Self::open_corpus(config, &root)
    }

    pub fn open_corpus(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let on_disk = read_corpus_config(root)?;
        if on_disk.data != config.data || on_disk.seed != config.data_seed {
            return Err(Error::Config(format!(
                "corpus at {} was generated from a different data config",
                root.display()
            )));
        }
        let vocab = load_vocabulary(root)?;
        let encoder = DualEncoder::new(config.encoder.clone(), vocab.len())?;
        let prep = |d, s| -> Result<Prepared> { Prepared::new(&load_split(root, d, s)?, &vocab, &encoder) };
        Ok(Self {
            config_hash: config.hash(),
            source_train: prep(Domain::Source, "train")?,
            source_test: prep(Domain::Source, "test")?,
            target_train: prep(Domain::Target, "train")?,
            target_test: prep(Domain::Target, "test")?,
            vocab,
            encoder,
            config,
        })
    }

    /// Same data and backbone geometry with different prompt lengths.
    pub fn with_prompt_lengths(&self, n_text: usize, n_image: usize) -> Result<Self> {
        let mut sub = self.clone();
        sub.config.prompt_len_text = n_text;
        sub.config.prompt_len_image = n_image;
        let cap = sub.config.encoder.max_prompt_len.max(n_text.max(n_image));
        sub.config.encoder.max_prompt_len = cap;
        sub.encoder.config.max_prompt_len = cap;
        sub.config.validate()?;
        sub.config_hash = sub.config.hash();
        Ok(sub)
    }

    pub fn split(&self, name: &str) -> Result<&Prepared> {
        match name {
            "source-train" => Ok(&self.source_train),
            "source-test" => Ok(&self.source_test),
            "target-train" => Ok(&self.target_train),
            "target-test" => Ok(&self.target_test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn evaluate(&self, store: &ParamStore, split: &str, stage: &str, seed: u64) -> Result<MetricsReport> {
        let ev = evaluate(&self.encoder, store, self.split(split)?, self.config.eval_chunk)?;
        Ok(ev.report.with_run(split, stage, seed, &self.config_hash))
    }

    /// Evaluates and writes the full per-query rankings as CSV.
    pub fn evaluate_with_dump(&self, store: &ParamStore, split: &str, stage: &str, seed: u64, dump: &Path) -> Result<MetricsReport> {
        let data = self.split(split)?;
        let ev = evaluate(&self.encoder, store, data, self.config.eval_chunk)?;
        dump_rankings(dump, &ev.ranked, &ev.similarity, &data.caption_ids, &data.image_ids)?;
        Ok(ev.report.with_run(split, stage, seed, &self.config_hash))
    }

    fn phase(&self, stage: Stage, seed: u64, pretrain: bool) -> PhaseSpec {
        let c = &self.config;
        PhaseSpec {
            stage,
            objective: objective_for(stage),
            schedule: if pretrain { c.pretrain_schedule } else { c.schedule },
            batch_size: c.batch_size,
            instances_per_id: if pretrain { 1 } else { c.instances_per_id },
            loss: c.loss,
            prompt_dropout: c.prompt_dropout,
            prompt_lr_multiplier: c.prompt_lr_multiplier,
            seed,
        }
    }

    fn checkpoint(&self, params: &ParamStore, optimizer: Option<AdamState>, stage: Stage, epochs: usize, seed: u64) -> Checkpoint {
        let mut params = params.clone();
        params.zero_grad();
        Checkpoint {
            params,
            optimizer,
            epoch: epochs,
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            seed,
        }
    }

    /// Trains the backbone from scratch on the source training split.
    pub fn pretrain_source(&self, seed: u64, log: &mut TrainLog) -> Result<Checkpoint> {
        let mut store = self.encoder.init_params(derive_seed(seed, 10, 0))?;
        let spec = self.phase(Stage::Pretrain, derive_seed(seed, 11, 0), true);
        let adam = run_phase(&self.encoder, &mut store, &self.source_train, &spec, log)?;
        Ok(self.checkpoint(&store, Some(adam), Stage::Pretrain, spec.schedule.total_epochs, seed))
    }

    fn with_prompts_and_classifier(&self, backbone: &ParamStore, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut store = backbone.clone();
        init_prompts(
            c.prompt_len_text,
            c.prompt_len_image,
            c.encoder.text.width,
            c.encoder.image.width,
            c.prompt_dropout,
            derive_seed(seed, 20, 0),
        )?
        .insert_into(&mut store)?;
        let classes = self.target_train.identity_labels().len();
        init_classifier(&mut store, c.encoder.joint_dim, classes, derive_seed(seed, 21, 0))?;
        Ok(store)
    }

    /// Fresh prompts on the frozen backbone, trained with the contrastive loss.
    pub fn stage1_prompt_tune(&self, backbone: &ParamStore, seed: u64, log: &mut TrainLog) -> Result<Checkpoint> {
        if backbone.names().any(is_prompt_param) {
            return Err(Error::Config("backbone already carries prompts".into()));
        }
        let mut store = self.with_prompts_and_classifier(backbone, seed)?;
        let spec = self.phase(Stage::Stage1, derive_seed(seed, 30, 0), false);
        let adam = run_phase(&self.encoder, &mut store, &self.target_train, &spec, log)?;
        Ok(self.checkpoint(&store, Some(adam), Stage::Stage1, spec.schedule.total_epochs, seed))
    }

    /// Encoders and classifier trained with the total loss; prompts stay fixed.
    pub fn stage2_finetune(&self, stage1: &ParamStore, seed: u64, log: &mut TrainLog) -> Result<Checkpoint> {
        let mut store = stage1.clone();
        let spec = self.phase(Stage::Stage2, derive_seed(seed, 40, 0), false);
        let adam = run_phase(&self.encoder, &mut store, &self.target_train, &spec, log)?;
        Ok(self.checkpoint(&store, Some(adam), Stage::Stage2, spec.schedule.total_epochs, seed))
    }

    pub fn baseline_finetune(&self, backbone: &ParamStore, seed: u64, log: &mut TrainLog) -> Result<Checkpoint> {
        let mut store = backbone.clone();
        let spec = self.phase(Stage::Baseline, derive_seed(seed, 50, 0), false);
        let adam = run_phase(&self.encoder, &mut store, &self.target_train, &spec, log)?;
        Ok(self.checkpoint(&store, Some(adam), Stage::Baseline, spec.schedule.total_epochs, seed))
    }

    pub fn one_stage_finetune(&self, backbone: &ParamStore, seed: u64, log: &mut TrainLog) -> Result<Checkpoint> {
        let mut store = self.with_prompts_and_classifier(backbone, seed)?;
        let spec = self.phase(Stage::OneStage, derive_seed(seed, 60, 0), false);
        let adam = run_phase(&self.encoder, &mut store, &self.target_train, &spec, log)?;
        Ok(self.checkpoint(&store, Some(adam), Stage::OneStage, spec.schedule.total_epochs, seed))
    }

    /// One adaptation run; writes checkpoints, the training log and metrics
    /// under `dir` when given.
    pub fn run_adaptation(&self, strategy: Strategy, backbone: &ParamStore, seed: u64, dir: Option<&Path>) -> Result<RunOutcome> {
        let mut log = TrainLog::default();
        let mut stages = Vec::new();
        let final_ckpt = match strategy {
            Strategy::Baseline => self.baseline_finetune(backbone, seed, &mut log)?,
            Strategy::OneStage => self.one_stage_finetune(backbone, seed, &mut log)?,
            Strategy::TwoStage => {
                let s1 = self.stage1_prompt_tune(backbone, seed, &mut log)?;
                stages.push(self.evaluate(&s1.params, "target-test", "stage1", seed)?);
                if let Some(d) = dir {
                    save_checkpoint(&d.join("stage1"), &s1)?;
                }
                self.stage2_finetune(&s1.params, seed, &mut log)?
            }
        };
        let report = self.evaluate(&final_ckpt.params, "target-test", strategy.as_str(), seed)?;
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
            save_checkpoint(&d.join("final"), &final_ckpt)?;
            log.write_csv(&d.join("train_log.csv"))?;
            report.write_json(&d.join("metrics.json"))?;
        }
        Ok(RunOutcome {
            strategy,
            seed,
            report,
            stage_reports: stages,
            log,
            checkpoint: final_ckpt,
        })
    }

    /// Every seed of one strategy, seeds in parallel.
    pub fn run_strategy(&self, strategy: Strategy, backbone: &ParamStore, seeds: &[u64], out: Option<&Path>) -> Result<StrategyReport> {
        let runs: Vec<RunOutcome> = seeds
            .par_iter()
            .map(|&seed| {
                let dir = out.map(|o| o.join(strategy.as_str()).join(format!("seed{seed}")));
                let r = self.run_adaptation(strategy, backbone, seed, dir.as_deref());
                if let Ok(r) = &r {
                    info!("{strategy} seed {seed}: rank1 {:.2}", r.report.rank1);
                }
                r
            })
            .collect::<Result<_>>()?;
        Ok(StrategyReport::new(strategy.as_str(), runs.iter().map(|r| r.report.clone()).collect()))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub strategy: Strategy,
    pub seed: u64,
    pub report: MetricsReport,
    /// Intermediate evaluations (stage 1 of the two-stage strategy).
    pub stage_reports: Vec<MetricsReport>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => v[n / 2],
            _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        };
        Self {
            median,
            min: v.first().copied().unwrap_or(f64::NAN),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub runs: Vec<MetricsReport>,
    pub rank1: Spread,
    pub rank5: Spread,
    pub rank10: Spread,
    #[serde(rename = "mAP")]
    pub map: Spread,
    #[serde(rename = "mINP")]
    pub minp: Spread,
}

impl StrategyReport {
    pub fn new(strategy: &str, runs: Vec<MetricsReport>) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            strategy: strategy.to_string(),
            rank1: col(|r| r.rank1),
            rank5: col(|r| r.rank5),
            rank10: col(|r| r.rank10),
            map: col(|r| r.map),
            minp: col(|r| r.minp),
            runs,
        }
    }
}

/// Everything the full pipeline reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub source_test: MetricsReport,
    pub zero_shot: MetricsReport,
    pub strategies: Vec<StrategyReport>,
    pub stage1: StrategyReport,
    pub seconds: f64,
}

impl PipelineReport {
    pub fn strategy(&self, name: &str) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.strategy == name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pipeline.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let csv_path = dir.join("metrics.csv");
        if csv_path.exists() {
            fs::remove_file(&csv_path)?;
        }
        self.source_test.append_csv(&csv_path)?;
        self.zero_shot.append_csv(&csv_path)?;
        for r in self.stage1.runs.iter().chain(self.strategies.iter().flat_map(|s| &s.runs)) {
            r.append_csv(&csv_path)?;
        }
        let mut w = csv::Writer::from_path(dir.join("strategies.csv"))?;
        w.write_record(["strategy", "runs", "rank1_median", "rank1_min", "rank1_max", "mAP_median", "mINP_median"])?;
        for s in std::iter::once(&self.stage1).chain(&self.strategies) {
            w.write_record([
                s.strategy.clone(),
                s.runs.len().to_string(),
                format!("{:.4}", s.rank1.median),
                format!("{:.4}", s.rank1.min),
                format!("{:.4}", s.rank1.max),
                format!("{:.4}", s.map.median),
                format!("{:.4}", s.minp.median),
            ])?;
        }
        w.flush()?;
        crate::plot::write_bar_chart(
            &dir.join("strategies.svg"),
            "median target Rank-1",
            &std::iter::once(("zero_shot".to_string(), self.zero_shot.rank1))
                .chain(std::iter::once(("stage1".to_string(), self.stage1.rank1.median)))
                .chain(self.strategies.iter().map(|s| (s.strategy.clone(), s.rank1.median)))
                .collect::<Vec<_>>(),
        )?;
        Ok(())
    }
}

pub fn backbone_dir(out: &Path) -> PathBuf {
    out.join("backbone")
}

/// Pretrains (or reloads) the backbone, then runs every strategy over every
/// configured seed.
pub fn run_pipeline(ws: &Workspace) -> Result<PipelineReport> {
    let start = std::time::Instant::now();
    let out = &ws.config.out_dir;
    let seeds = &ws.config.seeds;
    let backbone = pretrain_or_load(ws, seeds[0])?;
    let source_test = ws.evaluate(&backbone.params, "source-test", "pretrain", seeds[0])?;
    let zero_shot = ws.evaluate(&backbone.params, "target-test", "zero_shot", seeds[0])?;
    info!("source-test rank1 {:.2}, zero-shot target rank1 {:.2}", source_test.rank1, zero_shot.rank1);

    let runs_dir = out.join("runs");
    let jobs: Vec<(Strategy, u64)> = Strategy::ALL
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let dir = runs_dir.join(strategy.as_str()).join(format!("seed{seed}"));
            let r = ws.run_adaptation(strategy, &backbone.params, seed, Some(&dir))?;
            info!("{strategy} seed {seed}: rank1 {:.2}", r.report.rank1);
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let strategies = Strategy::ALL
        .iter()
        .map(|s| {
            StrategyReport::new(
                s.as_str(),
                outcomes.iter().filter(|o| o.strategy == *s).map(|o| o.report.clone()).collect(),
            )
        })
        .collect();
    let stage1 = StrategyReport::new(
        "stage1",
        outcomes.iter().flat_map(|o| o.stage_reports.iter().cloned()).collect(),
    );
    let report = PipelineReport {
        config_hash: ws.config_hash.clone(),
        source_test,
        zero_shot,
        strategies,
        stage1,
        seconds: start.elapsed().as_secs_f64(),
    };
    report.write(&out.join("reports"))?;
    Ok(report)
}

const BACKBONE_KEY: &str = "backbone_key.txt";

/// Reuses `out/backbone` when it was pretrained with the same pretraining
/// settings and seed.
pub fn pretrain_or_load(ws: &Workspace, seed: u64) -> Result<Checkpoint> {
    let dir = backbone_dir(&ws.config.out_dir);
    let key = format!("{} {seed}", ws.config.backbone_hash());
    if dir.join(checkpoint::MANIFEST_FILE).exists()
        && fs::read_to_string(dir.join(BACKBONE_KEY)).is_ok_and(|k| k.trim() == key)
    {
        return Ok(load_checkpoint(&dir)?);
    }
    let mut log = TrainLog::default();
    let ck = ws.pretrain_source(seed, &mut log)?;
    save_checkpoint(&dir, &ck)?;
    log.write_csv(&dir.join("train_log.csv"))?;
    fs::write(dir.join(BACKBONE_KEY), key + "\n")?;
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prompt_len_text: usize,
    pub prompt_len_image: usize,
    pub seed: u64,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
}

/// `(n, n)` for every length, with the default length 2 always present.
pub fn symmetric_grid(lengths: &[usize]) -> Vec<(usize, usize)> {
    let mut l: Vec<usize> = lengths.to_vec();
    l.push(2);
    l.sort_unstable();
    l.dedup();
    l.into_iter().map(|n| (n, n)).collect()
}

/// One side held at `pivot` while the other takes each length.
pub fn asymmetric_grid(lengths: &[usize], pivot: usize) -> Vec<(usize, usize)> {
    let mut g: Vec<(usize, usize)> = lengths
        .iter()
        .flat_map(|&n| [(pivot, n), (n, pivot)])
        .collect();
    g.sort_unstable();
    g.dedup();
    g
}

/// Two-stage runs for each `(N_txt, N_img)` in `grid` and each seed.
pub fn ablate_prompt_length(ws: &Workspace, backbone: &ParamStore, grid: &[(usize, usize)], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let jobs: Vec<((usize, usize), u64)> = grid
        .iter()
        .flat_map(|&g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    jobs.par_iter()
        .map(|&((nt, ni), seed)| {
            let sub = ws.with_prompt_lengths(nt, ni)?;
            let r = sub.run_adaptation(Strategy::TwoStage, backbone, seed, None)?;
            info!("prompt lengths ({nt}, {ni}) seed {seed}: rank1 {:.2}", r.report.rank1);
            Ok(SweepRow {
                prompt_len_text: nt,
                prompt_len_image: ni,
                seed,
                rank1: r.report.rank1,
                map: r.report.map,
                minp: r.report.minp,
            })
        })
        .collect()
}

pub fn write_sweep(dir: &Path, name: &str, rows: &[SweepRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut by_len: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_len.entry((r.prompt_len_text, r.prompt_len_image)).or_default().push(r.rank1);
    }
    let points: Vec<(String, f64)> = by_len
        .into_iter()
        .map(|((t, i), v)| {
            let label = if t == i { t.to_string() } else { format!("{t}/{i}") };
            (label, Spread::of(&v).median)
        })
        .collect();
    crate::plot::write_line_chart(&dir.join(format!("{name}.svg")), "median Rank-1 vs prompt length", &points)?;
    Ok(())
}
