//! Text-to-image ranking and the CMC / mAP / mINP retrieval metrics.

use std::fs::{self, OpenOptions};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-query gallery order (descending similarity, ties by ascending index)
/// and the relevance of each ranked item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedGallery {
    pub order: Vec<Vec<usize>>,
    pub relevant: Vec<Vec<bool>>,
}

impl RankedGallery {
    pub fn num_queries(&self) -> usize {
        self.order.len()
    }

    /// 1-based ranks of the relevant items of query `q`.
    pub fn hit_ranks(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        self.relevant[q]
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(k, _)| k + 1)
    }
}

pub fn rank_gallery(sim: &[Vec<f64>], query_ids: &[usize], gallery_ids: &[usize]) -> Result<RankedGallery> {
    if sim.len() != query_ids.len() {
        return Err(Error::Invalid(format!(
            "{} similarity rows for {} queries",
            sim.len(),
            query_ids.len()
        )));
    }
    let ranked: Vec<(Vec<usize>, Vec<bool>)> = sim
        .par_iter()
        .zip(query_ids.par_iter())
        .enumerate()
        .map(|(q, (row, &qid))| {
            if row.len() != gallery_ids.len() {
                return Err(Error::Invalid(format!(
                    "query {q} has {} scores for {} gallery items",
                    row.len(),
                    gallery_ids.len()
                )));
            }
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let relevant: Vec<bool> = order.iter().map(|&j| gallery_ids[j] == qid).collect();
            if !relevant.contains(&true) {
                return Err(Error::NoRelevantItems { query: q });
            }
            Ok((order, relevant))
        })
        .collect::<Result<_>>()?;
    let (order, relevant) = ranked.into_iter().unzip();
    Ok(RankedGallery { order, relevant })
}

fn percent(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64 * 100.0
    }
}

pub fn cmc_at_k(ranked: &RankedGallery, k: usize) -> f64 {
    let hits = ranked
        .relevant
        .iter()
        .filter(|rel| rel.iter().take(k).any(|&r| r))
        .count();
    percent(hits as f64, ranked.num_queries())
}

pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn inverse_negative_penalty(relevant: &[bool]) -> f64 {
    match relevant.iter().rposition(|&r| r) {
        Some(last) => relevant.iter().filter(|&&r| r).count() as f64 / (last + 1) as f64,
        None => 0.0,
    }
}

pub fn mean_ap(ranked: &RankedGallery) -> f64 {
    let total: f64 = ranked.relevant.iter().map(|r| average_precision(r)).sum();
    percent(total, ranked.num_queries())
}

pub fn m_inp(ranked: &RankedGallery) -> f64 {
    let total: f64 = ranked.relevant.iter().map(|r| inverse_negative_penalty(r)).sum();
    percent(total, ranked.num_queries())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub split: String,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
}

const CSV_HEADER: [&str; 11] = [
    "split", "stage", "seed", "config_hash", "rank1", "rank5", "rank10", "mAP", "mINP", "num_queries",
    "num_gallery",
];

impl MetricsReport {
    pub fn from_ranking(ranked: &RankedGallery, num_gallery: usize) -> Self {
        Self {
            rank1: cmc_at_k(ranked, 1),
            rank5: cmc_at_k(ranked, 5),
            rank10: cmc_at_k(ranked, 10),
            map: mean_ap(ranked),
            minp: m_inp(ranked),
            num_queries: ranked.num_queries(),
            num_gallery,
            split: String::new(),
            stage: String::new(),
            seed: 0,
            config_hash: String::new(),
        }
    }

    pub fn with_run(mut self, split: &str, stage: &str, seed: u64, config_hash: &str) -> Self {
        self.split = split.to_string();
        self.stage = stage.to_string();
        self.seed = seed;
        self.config_hash = config_hash.to_string();
        self
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Appends one row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(CSV_HEADER)?;
        }
        w.write_record([
            self.split.clone(),
            self.stage.clone(),
            self.seed.to_string(),
            self.config_hash.clone(),
            format!("{:.4}", self.rank1),
            format!("{:.4}", self.rank5),
            format!("{:.4}", self.rank10),
            format!("{:.4}", self.map),
            format!("{:.4}", self.minp),
            self.num_queries.to_string(),
            self.num_gallery.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// One CSV row per (query, rank) with the gallery index, its id and score.
pub fn dump_rankings(
    path: &Path,
    ranked: &RankedGallery,
    sim: &[Vec<f64>],
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query", "query_id", "rank", "gallery", "gallery_id", "score", "relevant"])?;
    for (q, order) in ranked.order.iter().enumerate() {
        for (k, &j) in order.iter().enumerate() {
            w.write_record([
                q.to_string(),
                query_ids[q].to_string(),
                (k + 1).to_string(),
                j.to_string(),
                gallery_ids[j].to_string(),
                format!("{:.6}", sim[q][j]),
                u8::from(ranked.relevant[q][k]).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked_from(rel: Vec<Vec<bool>>) -> RankedGallery {
        RankedGallery {
            order: rel.iter().map(|r| (0..r.len()).collect()).collect(),
            relevant: rel,
        }
    }

    #[test]
    fn orders_by_descending_score() {
        let r = rank_gallery(&[vec![0.1, 0.9, 0.5]], &[7], &[7, 1, 2]).unwrap();
        assert_eq!(r.order[0], vec![1, 2, 0]);
        assert_eq!(r.relevant[0], vec![false, false, true]);
    }

    #[test]
    fn ties_break_by_index() {
        let r = rank_gallery(&[vec![0.5, 0.5, 0.9, 0.5]], &[0], &[0, 0, 0, 0]).unwrap();
        assert_eq!(r.order[0], vec![2, 0, 1, 3]);
    }

    #[test]
    fn query_without_relevant_items_rejected() {
        let r = rank_gallery(&[vec![0.1, 0.2]], &[5], &[1, 2]);
        assert!(matches!(r, Err(Error::NoRelevantItems { query: 0 })));
    }

    #[test]
    fn rank_two_hit() {
        let r = ranked_from(vec![vec![false, true, false]]);
        assert_eq!(cmc_at_k(&r, 1), 0.0);
        assert_eq!(cmc_at_k(&r, 2), 100.0);
    }

    #[test]
    fn hand_evaluated_ap_and_inp() {
        let rel = [false, true, true];
        assert!((average_precision(&rel) - 7.0 / 12.0).abs() < 1e-15);
        assert!((inverse_negative_penalty(&rel) - 2.0 / 3.0).abs() < 1e-15);
        let last = [false, false, false, true];
        assert_eq!(inverse_negative_penalty(&last), 0.25);
    }

    #[test]
    fn perfect_ranking_scores_100() {
        let r = ranked_from(vec![vec![true, true, false], vec![true, false, false]]);
        for k in [1, 5, 10] {
            assert_eq!(cmc_at_k(&r, k), 100.0);
        }
        assert_eq!(mean_ap(&r), 100.0);
        assert_eq!(m_inp(&r), 100.0);
    }

    #[test]
    fn csv_appends_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rep = MetricsReport::from_ranking(&ranked_from(vec![vec![true]]), 1).with_run("t", "s", 1, "h");
        rep.append_csv(&p).unwrap();
        rep.append_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("split,stage"));
        let j = dir.path().join("m.json");
        rep.write_json(&j).unwrap();
        assert_eq!(MetricsReport::read_json(&j).unwrap(), rep);
    }
}
