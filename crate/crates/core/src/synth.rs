//! Procedural person-description corpus with a source and a style-shifted
//! target domain.
//!
//! Every identity is a vector of discrete attributes. Images paint each
//! attribute into a fixed body region (hat, accessory, shirt, pants, bag,
//! build); captions mention at least three attributes in the register of the
//! domain. The two domains share attribute semantics but use different
//! caption templates, attribute words, palettes and noise levels.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Image;
use crate::tokenizer::{normalize, Vocabulary};

pub const SHIRT: usize = 0;
pub const PANTS: usize = 1;
pub const HAT: usize = 2;
pub const BAG: usize = 3;
pub const BUILD: usize = 4;
pub const ACCESSORY: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub slots: Vec<Slot>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let slot = |name: &str, values: &[&str]| Slot {
            name: name.into(),
            values: words(values),
        };
        Self {
            slots: vec![
                slot("shirt", &["red", "blue", "green", "yellow", "white", "black", "purple", "orange"]),
                slot("pants", &["grey", "brown", "navy", "beige", "khaki", "olive"]),
                slot("hat", &["cap", "beanie", "helmet", "fedora"]),
                slot("bag", &["backpack", "handbag", "suitcase", "satchel"]),
                slot("build", &["slim", "average", "stocky", "tall"]),
                slot("accessory", &["glasses", "scarf", "watch", "umbrella", "necklace"]),
            ],
        }
    }
}

impl AttributeSchema {
    pub fn cardinalities(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.values.len()).collect()
    }

    pub fn combinations(&self) -> usize {
        self.cardinalities().iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub person_id: usize,
    /// One value index per schema slot.
    pub attributes: Vec<usize>,
}

/// `count` identities with distinct attribute vectors, ids `0..count`.
pub fn gen_identities(count: usize, schema: &AttributeSchema, seed: u64) -> Result<Vec<IdentitySpec>> {
    let available = schema.combinations();
    if count > available {
        return Err(Error::TooManyIdentities {
            requested: count,
            available,
        });
    }
    let card = schema.cardinalities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, available, count)
        .into_iter()
        .enumerate()
        .map(|(person_id, mut code)| {
            let attributes = card
                .iter()
                .map(|&c| {
                    let v = code % c;
                    code /= c;
                    v
                })
                .collect();
            IdentitySpec { person_id, attributes }
        })
        .collect())
}

/// Sentence skeleton: an opener followed by one clause per mentioned slot,
/// in `order`, separated by `joiner`. `{}` in a clause is the attribute word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub opener: String,
    pub order: Vec<usize>,
    pub clauses: Vec<String>,
    pub joiner: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain: Domain,
    pub templates: Vec<Template>,
    /// Per slot, per value: interchangeable words for that value.
    pub synonyms: Vec<Vec<Vec<String>>>,
    /// Per slot, per value: RGB in [0, 1].
    pub palette: Vec<Vec<[f64; 3]>>,
    /// Output channel `c` reads input channel `channel_map[c]`.
    pub channel_map: [usize; 3],
    /// Per-channel multiplier, applied after the channel map.
    pub gain: [f64; 3],
    pub offset: f64,
    pub background: [f64; 3],
    pub noise: f64,
    pub jitter: usize,
}

fn register(table: &[&[&str]]) -> Vec<Vec<String>> {
    table.iter().map(|w| words(w)).collect()
}

fn base_palette() -> Vec<Vec<[f64; 3]>> {
    vec![
        vec![
            [0.90, 0.10, 0.10],
            [0.10, 0.20, 0.90],
            [0.10, 0.80, 0.20],
            [0.95, 0.90, 0.10],
            [0.95, 0.95, 0.95],
            [0.05, 0.05, 0.05],
            [0.60, 0.10, 0.80],
            [1.00, 0.55, 0.00],
        ],
        vec![
            [0.50, 0.50, 0.50],
            [0.45, 0.25, 0.10],
            [0.05, 0.10, 0.40],
            [0.90, 0.85, 0.65],
            [0.75, 0.70, 0.45],
            [0.40, 0.45, 0.10],
        ],
        tints([0.85, 0.85, 0.30], 4),
        tints([0.30, 0.75, 0.85], 4),
        tints([0.85, 0.40, 0.70], 4),
        tints([0.70, 0.85, 0.40], 5),
    ]
}

/// Shades of one hue for the textured slots, so texture and tint both carry
/// the value.
fn tints(base: [f64; 3], n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64 - 0.5;
            base.map(|v| (v + 0.3 * t).clamp(0.0, 1.0))
        })
        .collect()
}

impl DomainStyle {
    pub fn source() -> Self {
        let synonyms = vec![
            register(&[&["red"], &["blue"], &["green"], &["yellow"], &["white"], &["black"], &["purple"], &["orange"]]),
            register(&[&["grey"], &["brown"], &["navy"], &["beige"], &["khaki"], &["olive"]]),
            register(&[&["cap"], &["beanie"], &["helmet"], &["fedora"]]),
            register(&[&["backpack"], &["handbag"], &["suitcase"], &["satchel"]]),
            register(&[&["slim"], &["average"], &["stocky"], &["tall"]]),
            register(&[&["glasses"], &["scarf"], &["watch"], &["umbrella"], &["necklace"]]),
        ];
        let clauses = words(&[
            "a {} shirt",
            "{} pants",
            "a {}",
            "a {}",
            "a {} build",
            "{}",
        ]);
        let templates = vec![
            Template {
                opener: "a person wearing".into(),
                order: vec![SHIRT, PANTS, HAT, ACCESSORY, BAG, BUILD],
                clauses: clauses.clone(),
                joiner: "and".into(),
            },
            Template {
                opener: "the person has".into(),
                order: vec![BUILD, SHIRT, PANTS, BAG, HAT, ACCESSORY],
                clauses,
                joiner: "and".into(),
            },
        ];
        Self {
            domain: Domain::Source,
            templates,
            synonyms,
            palette: base_palette(),
            channel_map: [0, 1, 2],
            gain: [1.0; 3],
            offset: 0.0,
            background: [0.15, 0.15, 0.15],
            noise: 0.04,
            jitter: 1,
        }
    }

    pub fn target() -> Self {
        // Some values keep the source word as one option; most words are new.
        let synonyms = vec![
            register(&[
                &["crimson", "red"],
                &["azure", "blue"],
                &["emerald", "green"],
                &["golden"],
                &["ivory", "white"],
                &["ebony", "black"],
                &["violet", "purple"],
                &["amber"],
            ]),
            register(&[
                &["slate", "grey"],
                &["chocolate", "brown"],
                &["indigo"],
                &["sand", "beige"],
                &["tan", "khaki"],
                &["moss", "olive"],
            ]),
            register(&[&["cap"], &["toque"], &["helmet"], &["trilby", "fedora"]]),
            register(&[&["rucksack", "backpack"], &["purse", "handbag"], &["luggage"], &["satchel"]]),
            register(&[&["thin", "slim"], &["medium"], &["heavy", "stocky"], &["lanky"]]),
            register(&[&["spectacles"], &["scarf"], &["wristwatch", "watch"], &["parasol"], &["pendant"]]),
        ];
        let clauses = words(&[
            "{} top",
            "{} trousers",
            "{} headwear",
            "holding {}",
            "{} frame",
            "{} on",
        ]);
        let templates = vec![
            Template {
                opener: "pedestrian :".into(),
                order: vec![BAG, ACCESSORY, BUILD, PANTS, SHIRT, HAT],
                clauses: clauses.clone(),
                joiner: ",".into(),
            },
            Template {
                opener: "walker seen with".into(),
                order: vec![HAT, BAG, SHIRT, BUILD, ACCESSORY, PANTS],
                clauses,
                joiner: ";".into(),
            },
        ];
        Self {
            domain: Domain::Target,
            templates,
            synonyms,
            palette: base_palette(),
            channel_map: [0, 1, 2],
            gain: [0.85, 0.75, 0.6],
            offset: 0.12,
            background: [0.55, 0.50, 0.45],
            noise: 0.08,
            jitter: 1,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self::source(),
            Domain::Target => Self::target(),
        }
    }

    fn transform(&self, rgb: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.gain[c] * rgb[self.channel_map[c]] + self.offset;
        }
        out
    }

    /// Every word a caption of this style can contain.
    pub fn closed_words(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        for t in &self.templates {
            set.extend(normalize(&t.opener));
            set.extend(normalize(&t.joiner));
            for c in &t.clauses {
                set.extend(normalize(&c.replace("{}", " ")));
            }
        }
        set.extend(self.attribute_words());
        set
    }

    pub fn attribute_words(&self) -> BTreeSet<String> {
        self.synonyms.iter().flatten().flatten().cloned().collect()
    }

    /// Attribute `(slot, value)` pairs named by a caption's words.
    pub fn parse_attributes(&self, caption: &str) -> BTreeSet<(usize, usize)> {
        let mut lookup: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
        for (s, values) in self.synonyms.iter().enumerate() {
            for (v, syn) in values.iter().enumerate() {
                for w in syn {
                    lookup.entry(w.as_str()).or_default().push((s, v));
                }
            }
        }
        normalize(caption)
            .iter()
            .filter_map(|w| lookup.get(w.as_str()))
            .flatten()
            .copied()
            .collect()
    }
}

/// Pixel rectangle `(y0, x0, height, width)` of each slot on the 32×16 canvas.
pub const REGIONS: [(usize, usize, usize, usize); 6] = [
    (8, 0, 8, 16),
    (16, 0, 8, 16),
    (0, 0, 8, 8),
    (24, 0, 8, 8),
    (24, 8, 8, 8),
    (0, 8, 8, 8),
];

const CANVAS: (usize, usize, usize) = (32, 16, 3);

fn pattern(kind: usize, y: usize, x: usize) -> bool {
    match kind % 6 {
        0 => true,
        1 => (y / 2) % 2 == 0,
        2 => (x / 2) % 2 == 0,
        3 => (y / 2 + x / 2) % 2 == 0,
        4 => (y + x) % 4 < 2,
        _ => y % 5 == 0 || x % 5 == 0,
    }
}

/// Colour slots are painted solid; the other slots encode the value as a
/// texture.
fn slot_pattern(slot: usize, value: usize) -> usize {
    if slot == SHIRT || slot == PANTS {
        0
    } else {
        value + 1
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Paints an identity. Pixel values are multiples of 1/255.
pub fn render_image(identity: &IdentitySpec, style: &DomainStyle, seed: u64) -> Image {
    let (h, w, c) = CANVAS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(h, w, c, 0.0);
    let bg = style.transform(style.background);
    for y in 0..h {
        for x in 0..w {
            for (ch, v) in bg.iter().enumerate() {
                img.set(y, x, ch, *v);
            }
        }
    }
    let j = style.jitter as i64;
    for (slot, &value) in identity.attributes.iter().enumerate() {
        let (y0, x0, rh, rw) = REGIONS[slot];
        let (dy, dx) = if j > 0 {
            (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let base = style.palette[slot][value];
        let on = style.transform(base);
        let off = style.transform(base.map(|v| v * 0.3));
        let kind = slot_pattern(slot, value);
        // one-pixel margin so jitter stays inside the region
        for ly in 0..rh - 2 {
            for lx in 0..rw - 2 {
                let y = (y0 as i64 + 1 + ly as i64 + dy) as usize;
                let x = (x0 as i64 + 1 + lx as i64 + dx) as usize;
                let col = if pattern(kind, ly, lx) { on } else { off };
                for (ch, v) in col.iter().enumerate() {
                    img.set(y, x, ch, *v);
                }
            }
        }
    }
    if style.noise > 0.0 {
        let normal = Normal::new(0.0, style.noise).expect("finite noise");
        for p in &mut img.pixels {
            *p += normal.sample(&mut rng);
        }
    }
    for p in &mut img.pixels {
        *p = quantize(*p);
    }
    img
}

pub fn render_caption(identity: &IdentitySpec, style: &DomainStyle, min_mentions: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = style.templates.choose(&mut rng).expect("style has templates");
    let slots = identity.attributes.len();
    let lo = min_mentions.clamp(1, slots);
    let n = rng.gen_range(lo..=slots);
    let chosen: BTreeSet<usize> = sample(&mut rng, slots, n).into_iter().collect();
    let clauses: Vec<String> = template
        .order
        .iter()
        .filter(|s| chosen.contains(s))
        .map(|&s| {
            let word = style.synonyms[s][identity.attributes[s]]
                .choose(&mut rng)
                .expect("value has a word");
            template.clauses[s].replace("{}", word)
        })
        .collect();
    format!("{} {}", template.opener, clauses.join(&format!(" {} ", template.joiner)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source_ids: usize,
    pub source_val_ids: usize,
    pub source_test_ids: usize,
    pub source_images_per_id: usize,
    pub target_train_ids: usize,
    pub target_test_ids: usize,
    pub target_images_per_id: usize,
    pub captions_per_image: usize,
    pub min_mentions: usize,
    pub source_noise: f64,
    pub target_noise: f64,
    pub jitter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_ids: 200,
            source_val_ids: 20,
            source_test_ids: 20,
            source_images_per_id: 6,
            target_train_ids: 60,
            target_test_ids: 40,
            target_images_per_id: 4,
            captions_per_image: 2,
            min_mentions: 4,
            source_noise: 0.04,
            target_noise: 0.08,
            jitter: 1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.source_val_ids + self.source_test_ids >= self.source_ids {
            return bad("source split leaves no training identities");
        }
        if self.target_train_ids == 0 || self.target_test_ids == 0 {
            return bad("target needs training and test identities");
        }
        if self.source_images_per_id == 0 || self.target_images_per_id == 0 || self.captions_per_image == 0 {
            return bad("images per id and captions per image must be positive");
        }
        if self.min_mentions < 3 || self.min_mentions > AttributeSchema::default().slots.len() {
            return bad("captions must mention at least three and at most all attributes");
        }
        if self.source_noise < 0.0 || self.target_noise < 0.0 || self.jitter > 1 {
            return bad("noise must be >= 0 and jitter at most one pixel");
        }
        Ok(())
    }

    pub fn style(&self, domain: Domain) -> DomainStyle {
        let mut s = DomainStyle::for_domain(domain);
        s.noise = match domain {
            Domain::Source => self.source_noise,
            Domain::Target => self.target_noise,
        };
        s.jitter = self.jitter;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub person_id: usize,
    /// Index into the split's image list.
    pub image: usize,
}

/// One split: images with their person ids and the captions describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub domain: Domain,
    pub name: String,
    pub images: Vec<Image>,
    pub image_ids: Vec<usize>,
    pub captions: Vec<Caption>,
}

impl SplitData {
    pub fn empty(domain: Domain, name: &str) -> Self {
        Self {
            domain,
            name: name.into(),
            images: Vec::new(),
            image_ids: Vec::new(),
            captions: Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.domain.as_str(), self.name)
    }

    pub fn identity_set(&self) -> BTreeSet<usize> {
        self.image_ids.iter().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl DatasetSplit {
    pub fn get(&self, name: &str) -> Option<&SplitData> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn parts(&self) -> [&SplitData; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// SplitMix64 finalizer over the combined inputs.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_split(
    domain: Domain,
    name: &str,
    stream: u64,
    ids: &[IdentitySpec],
    images_per_id: usize,
    captions_per_image: usize,
    min_mentions: usize,
    style: &DomainStyle,
    master: u64,
) -> SplitData {
    let n_images = ids.len() * images_per_id;
    let rendered: Vec<(Image, Vec<String>)> = (0..n_images)
        .into_par_iter()
        .map(|k| {
            let who = &ids[k / images_per_id];
            let image = render_image(who, style, derive_seed(master, stream, 2 * k as u64));
            let caps = (0..captions_per_image)
                .map(|c| {
                    let s = derive_seed(master, stream, 2 * (k * captions_per_image + c) as u64 + 1);
                    render_caption(who, style, min_mentions, s)
                })
                .collect();
            (image, caps)
        })
        .collect();
    let mut split = SplitData::empty(domain, name);
    for (k, (image, caps)) in rendered.into_iter().enumerate() {
        let pid = ids[k / images_per_id].person_id;
        split.images.push(image);
        split.image_ids.push(pid);
        split.captions.extend(caps.into_iter().map(|text| Caption {
            text,
            person_id: pid,
            image: k,
        }));
    }
    split
}

/// Identity attributes and both corpora, a pure function of `(config, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub identities: Vec<IdentitySpec>,
    pub source: DatasetSplit,
    pub target: DatasetSplit,
}

pub fn make_domain_pair(config: &DataConfig, seed: u64) -> Result<DomainPair> {
    config.validate()?;
    let schema = AttributeSchema::default();
    let total = config.source_ids + config.target_train_ids + config.target_test_ids;
    let identities = gen_identities(total, &schema, derive_seed(seed, 0, 0))?;
    let src_style = config.style(Domain::Source);
    let tgt_style = config.style(Domain::Target);

    let n_src_train = config.source_ids - config.source_val_ids - config.source_test_ids;
    let (src, tgt) = identities.split_at(config.source_ids);
    let (src_train, rest) = src.split_at(n_src_train);
    let (src_val, src_test) = rest.split_at(config.source_val_ids);
    let (tgt_train, tgt_test) = tgt.split_at(config.target_train_ids);

    let mk = |domain, name, stream, ids: &[IdentitySpec], per_id, style: &DomainStyle| {
        build_split(domain, name, stream, ids, per_id, config.captions_per_image, config.min_mentions, style, seed)
    };
    let source = DatasetSplit {
        train: mk(Domain::Source, "train", 1, src_train, config.source_images_per_id, &src_style),
        val: mk(Domain::Source, "val", 2, src_val, config.source_images_per_id, &src_style),
        test: mk(Domain::Source, "test", 3, src_test, config.source_images_per_id, &src_style),
    };
    let target = DatasetSplit {
        train: mk(Domain::Target, "train", 4, tgt_train, config.target_images_per_id, &tgt_style),
        val: SplitData::empty(Domain::Target, "val"),
        test: mk(Domain::Target, "test", 5, tgt_test, config.target_images_per_id, &tgt_style),
    };
    Ok(DomainPair {
        identities,
        source,
        target,
    })
}

/// Vocabulary over the closed word sets of both registers.
pub fn corpus_vocabulary(config: &DataConfig) -> Vocabulary {
    let mut all = config.style(Domain::Source).closed_words();
    all.extend(config.style(Domain::Target).closed_words());
    Vocabulary::from_words(all)
}

/// Share of target attribute words (as used in `target` captions) that never
/// occur among source attribute words (as used in `source` captions).
pub fn register_disjointness(source: &SplitData, target: &SplitData) -> f64 {
    let used = |split: &SplitData, style: &DomainStyle| -> BTreeSet<String> {
        let vocab = style.attribute_words();
        split
            .captions
            .iter()
            .flat_map(|c| normalize(&c.text))
            .filter(|w| vocab.contains(w))
            .collect()
    };
    let src = used(source, &DomainStyle::source());
    let tgt = used(target, &DomainStyle::target());
    if tgt.is_empty() {
        return 0.0;
    }
    tgt.difference(&src).count() as f64 / tgt.len() as f64
}

/// Reads each region back as the closest clean rendering of every candidate
/// value, searching over the jitter offsets.
pub fn decode_attributes(image: &Image, style: &DomainStyle, schema: &AttributeSchema) -> Vec<usize> {
    let card = schema.cardinalities();
    (0..card.len())
        .map(|slot| {
            let (y0, x0, rh, rw) = REGIONS[slot];
            let mut best = (f64::INFINITY, 0);
            for value in 0..card[slot] {
                let on = style.transform(style.palette[slot][value]);
                let off = style.transform(style.palette[slot][value].map(|v| v * 0.3));
                let kind = slot_pattern(slot, value);
                let j = style.jitter as i64;
                for dy in -j..=j {
                    for dx in -j..=j {
                        let mut err = 0.0;
                        for ly in 0..rh - 2 {
                            for lx in 0..rw - 2 {
                                let y = (y0 as i64 + 1 + ly as i64 + dy) as usize;
                                let x = (x0 as i64 + 1 + lx as i64 + dx) as usize;
                                let col = if pattern(kind, ly, lx) { on } else { off };
                                for (ch, v) in col.iter().enumerate() {
                                    err += (image.get(y, x, ch) - v).powi(2);
                                }
                            }
                        }
                        if err < best.0 {
                            best = (err, value);
                        }
                    }
                }
            }
            best.1
        })
        .collect()
}

/// Caption-to-image similarity for the attribute-word baseline: the number
/// of attributes named in the caption that the decoded image agrees with.
pub fn bag_of_words_similarity(split: &SplitData, style: &DomainStyle) -> Vec<Vec<f64>> {
    let schema = AttributeSchema::default();
    let decoded: Vec<Vec<usize>> = split
        .images
        .par_iter()
        .map(|im| decode_attributes(im, style, &schema))
        .collect();
    split
        .captions
        .iter()
        .map(|c| {
            let named = style.parse_attributes(&c.text);
            decoded
                .iter()
                .map(|attrs| named.iter().filter(|&&(s, v)| attrs[s] == v).count() as f64)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            source_ids: 12,
            source_val_ids: 2,
            source_test_ids: 2,
            source_images_per_id: 2,
            target_train_ids: 4,
            target_test_ids: 3,
            target_images_per_id: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn identities_are_unique_and_seeded() {
        let schema = AttributeSchema::default();
        let a = gen_identities(50, &schema, 9).unwrap();
        assert_eq!(a, gen_identities(50, &schema, 9).unwrap());
        let set: BTreeSet<_> = a.iter().map(|i| i.attributes.clone()).collect();
        assert_eq!(set.len(), 50);
        let two = gen_identities(2, &schema, 1).unwrap();
        assert_ne!(two[0].attributes, two[1].attributes);
    }

    #[test]
    fn full_product_enumerates_every_combination() {
        let schema = AttributeSchema {
            slots: vec![
                Slot { name: "a".into(), values: words(&["x", "y", "z"]) },
                Slot { name: "b".into(), values: words(&["p", "q"]) },
            ],
        };
        let ids = gen_identities(6, &schema, 3).unwrap();
        let set: BTreeSet<_> = ids.iter().map(|i| i.attributes.clone()).collect();
        let expected: BTreeSet<_> = (0..3).flat_map(|a| (0..2).map(move |b| vec![a, b])).collect();
        assert_eq!(set, expected);
        assert!(matches!(
            gen_identities(7, &schema, 3),
            Err(Error::TooManyIdentities { requested: 7, available: 6 })
        ));
    }

    #[test]
    fn noiseless_renders_repeat_and_styles_differ() {
        let who = IdentitySpec { person_id: 0, attributes: vec![0, 1, 2, 3, 0, 4] };
        let mut src = DomainStyle::source();
        src.noise = 0.0;
        src.jitter = 0;
        assert_eq!(render_image(&who, &src, 1), render_image(&who, &src, 2));
        let mut tgt = DomainStyle::target();
        tgt.noise = 0.0;
        tgt.jitter = 0;
        let (a, b) = (render_image(&who, &src, 1), render_image(&who, &tgt, 1));
        let same = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| x == y).count();
        assert!(same * 20 < a.pixels.len(), "{same} equal values");
    }

    #[test]
    fn identities_differ_exactly_in_their_regions() {
        let a = IdentitySpec { person_id: 0, attributes: vec![0, 0, 0, 0, 0, 0] };
        let b = IdentitySpec { person_id: 1, attributes: vec![3, 0, 1, 0, 0, 0] };
        let mut s = DomainStyle::source();
        s.noise = 0.0;
        s.jitter = 0;
        let (ia, ib) = (render_image(&a, &s, 5), render_image(&b, &s, 5));
        let inside = |y: usize, x: usize, slot: usize| {
            let (y0, x0, h, w) = REGIONS[slot];
            (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x)
        };
        let mut changed = [false; 6];
        for y in 0..32 {
            for x in 0..16 {
                let differs = (0..3).any(|c| ia.get(y, x, c) != ib.get(y, x, c));
                if differs {
                    let slot = (0..6).find(|&s| inside(y, x, s)).unwrap();
                    changed[slot] = true;
                }
            }
        }
        assert_eq!(changed, [true, false, true, false, false, false]);
    }

    #[test]
    fn captions_mention_at_least_three_attributes() {
        let style = DomainStyle::target();
        for seed in 0..200 {
            let who = IdentitySpec { person_id: 0, attributes: vec![seed as usize % 8, 2, 1, 0, 3, 4] };
            let cap = render_caption(&who, &style, 3, seed);
            let named = style.parse_attributes(&cap);
            assert!(named.len() >= 3, "{cap}");
            assert!(named.iter().all(|&(s, v)| who.attributes[s] == v), "{cap}");
        }
    }

    #[test]
    fn single_template_varies_only_in_choices() {
        let mut style = DomainStyle::source();
        style.templates.truncate(1);
        let who = IdentitySpec { person_id: 0, attributes: vec![1, 1, 1, 1, 1, 1] };
        for seed in 0..20 {
            assert!(render_caption(&who, &style, 3, seed).starts_with("a person wearing"));
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let pair = make_domain_pair(&DataConfig::default(), 7).unwrap();
        let t = &pair.target.test;
        assert_eq!(t.identity_set().len(), 40);
        assert_eq!(t.images.len(), 160);
        assert_eq!(t.captions.len(), 320);
        assert_eq!(pair.source.train.images.len(), 160 * 6);
        let src: BTreeSet<usize> = pair.source.parts().iter().flat_map(|s| s.identity_set()).collect();
        let tgt: BTreeSet<usize> = pair.target.parts().iter().flat_map(|s| s.identity_set()).collect();
        assert!(src.is_disjoint(&tgt));
        assert!(pair.target.train.identity_set().is_disjoint(&t.identity_set()));
        assert!(register_disjointness(&pair.source.train, &pair.target.train) >= 0.5);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(make_domain_pair(&small(), 3).unwrap(), make_domain_pair(&small(), 3).unwrap());
        assert_ne!(make_domain_pair(&small(), 3).unwrap(), make_domain_pair(&small(), 4).unwrap());
    }

    #[test]
    fn vocabulary_covers_every_caption_word() {
        let cfg = small();
        let vocab = corpus_vocabulary(&cfg);
        let pair = make_domain_pair(&cfg, 1).unwrap();
        for split in pair.source.parts().into_iter().chain(pair.target.parts()) {
            for c in &split.captions {
                for w in normalize(&c.text) {
                    assert!(vocab.contains(&w), "{w}");
                }
            }
        }
    }

    #[test]
    fn decoder_recovers_attributes() {
        let style = DomainStyle::target();
        for (k, who) in gen_identities(30, &AttributeSchema::default(), 2).unwrap().iter().enumerate() {
            let img = render_image(who, &style, k as u64);
            assert_eq!(decode_attributes(&img, &style, &AttributeSchema::default()), who.attributes);
        }
    }
}
