//! On-disk corpus layout.
//!
//! ```text
//! corpus/
//!   config.json            generator config + master seed
//!   vocab.json
//!   {source,target}/{train,val,test}/
//!     samples.jsonl        one caption per line
//!     images.u8            all images of the split, HWC bytes, back to back
//!     manifest.json        image geometry, count, checksum
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch::Image;
use crate::synth::{corpus_vocabulary, make_domain_pair, Caption, DataConfig, Domain, DomainPair, SplitData};
use crate::tokenizer::Vocabulary;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub caption: String,
    pub person_id: usize,
    /// Index of the image inside `images.u8`.
    pub image: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count: usize,
    pub dtype: String,
    pub person_ids: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub data: DataConfig,
}

pub fn split_dir(root: &Path, domain: Domain, split: &str) -> PathBuf {
    root.join(domain.as_str()).join(split)
}

fn write_split(root: &Path, split: &SplitData) -> Result<()> {
    let dir = split_dir(root, split.domain, &split.name);
    fs::create_dir_all(&dir)?;
    let mut lines = Vec::new();
    for c in &split.captions {
        let rec = SampleRecord {
            caption: c.text.clone(),
            person_id: c.person_id,
            image: c.image,
            domain: split.domain,
        };
        serde_json::to_writer(&mut lines, &rec)?;
        lines.push(b'\n');
    }
    fs::write(dir.join("samples.jsonl"), lines)?;

    let mut blob = Vec::new();
    for im in &split.images {
        blob.extend(im.pixels.iter().map(|p| (p * 255.0).round() as u8));
    }
    let (height, width, channels) = split
        .images
        .first()
        .map_or((0, 0, 0), |i| (i.height, i.width, i.channels));
    let manifest = ImageManifest {
        height,
        width,
        channels,
        count: split.images.len(),
        dtype: "u8".into(),
        person_ids: split.image_ids.clone(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(dir.join("images.u8"), &blob)?;
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn write_corpus(root: &Path, pair: &DomainPair, config: &DataConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(root)?;
    let cfg = CorpusConfig {
        seed,
        data: config.clone(),
    };
    fs::write(root.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    corpus_vocabulary(config).save(&root.join("vocab.json"))?;
    for split in pair.source.parts().into_iter().chain(pair.target.parts()) {
        write_split(root, split)?;
    }
    Ok(())
}

/// Generates and writes the corpus for `(config, seed)`.
pub fn generate_corpus(root: &Path, config: &DataConfig, seed: u64) -> Result<DomainPair> {
    let pair = make_domain_pair(config, seed)?;
    write_corpus(root, &pair, config, seed)?;
    Ok(pair)
}

pub fn read_corpus_config(root: &Path) -> Result<CorpusConfig> {
    let p = root.join("config.json");
    if !p.exists() {
        return Err(Error::MissingCorpus(root.display().to_string()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

pub fn load_vocabulary(root: &Path) -> Result<Vocabulary> {
    let p = root.join("vocab.json");
    if !p.exists() {
        return Err(Error::MissingCorpus(root.display().to_string()));
    }
    Vocabulary::load(&p)
}

pub fn load_split(root: &Path, domain: Domain, split: &str) -> Result<SplitData> {
    let dir = split_dir(root, domain, split);
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingCorpus(dir.display().to_string()));
    }
    let manifest: ImageManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let blob = fs::read(dir.join("images.u8"))?;
    let per = manifest.height * manifest.width * manifest.channels;
    if blob.len() != per * manifest.count || hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(Error::Invalid(format!("image blob in {} is corrupt", dir.display())));
    }
    if manifest.person_ids.len() != manifest.count {
        return Err(Error::Invalid(format!("manifest in {} lists wrong id count", dir.display())));
    }
    let images = blob
        .chunks(per.max(1))
        .take(manifest.count)
        .map(|c| {
            Image::new(
                manifest.height,
                manifest.width,
                manifest.channels,
                c.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut captions = Vec::new();
    for line in BufReader::new(fs::File::open(dir.join("samples.jsonl"))?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        if rec.image >= images.len() || manifest.person_ids[rec.image] != rec.person_id {
            return Err(Error::Invalid(format!("sample `{}` references a bad image", rec.caption)));
        }
        captions.push(Caption {
            text: rec.caption,
            person_id: rec.person_id,
            image: rec.image,
        });
    }
    Ok(SplitData {
        domain,
        name: split.to_string(),
        images,
        image_ids: manifest.person_ids,
        captions,
    })
}
