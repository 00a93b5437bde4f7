//! Deterministic synthetic image-caption corpus.
//!
//! Each record draws a shape, a color, and a quadrant; the caption names all
//! three ("red square top left") and the image paints the shape in that color
//! and quadrant over low-amplitude Gaussian noise. Every attribute is only
//! recoverable from pixels, so matching and masked-word prediction both need
//! cross-modal grounding.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::table::TensorTable;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const NOISE_STD: f64 = 0.05;

pub const SHAPES: [&str; 3] = ["square", "cross", "stripes"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const POSITIONS: [(&str, &str); 4] = [
    ("top", "left"),
    ("top", "right"),
    ("bottom", "left"),
    ("bottom", "right"),
];

pub const NUM_COMBOS: usize = SHAPES.len() * COLORS.len() * POSITIONS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: usize,
    pub color: usize,
    pub position: usize,
}

impl Attributes {
    pub fn from_combo(i: usize) -> Self {
        Attributes {
            shape: i % SHAPES.len(),
            color: (i / SHAPES.len()) % COLORS.len(),
            position: i / (SHAPES.len() * COLORS.len()),
        }
    }

    pub fn combo(&self) -> usize {
        self.shape + SHAPES.len() * (self.color + COLORS.len() * self.position)
    }

    pub fn caption(&self) -> String {
        let (v, h) = POSITIONS[self.position];
        format!("{} {} {v} {h}", COLORS[self.color], SHAPES[self.shape])
    }
}

/// The fixed caption vocabulary.
pub fn corpus_vocab() -> Vocab {
    let mut words: Vec<&str> = COLORS.to_vec();
    words.extend(SHAPES);
    words.extend(["top", "bottom", "left", "right"]);
    Vocab::from_words(words)
}

#[derive(Clone, Debug)]
pub struct CorpusRecord {
    pub id: usize,
    pub caption: String,
    pub attributes: Attributes,
    pub seed: u64,
    /// `C×H×W`.
    pub image: Tensor,
    /// Caption token ids including start and end.
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub vocab: Vocab,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if (self.channels, self.height, self.width) != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::Config(format!(
                "corpus images are {}x{}x{}, model expects {}x{}x{}",
                self.channels, self.height, self.width, cfg.channels, cfg.height, cfg.width
            )));
        }
        if self.vocab.len() > cfg.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary has {} entries, model vocab_size is {}",
                self.vocab.len(),
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Pixels of the `height × width` canvas covered by the shape.
pub fn shape_mask(attrs: &Attributes, height: usize, width: usize) -> Vec<bool> {
    let (qh, qw) = (height / 2, width / 2);
    let (oy, ox) = match attrs.position {
        0 => (0, 0),
        1 => (0, qw),
        2 => (qh, 0),
        _ => (qh, qw),
    };
    let (my, mx) = (qh / 8, qw / 8);
    let (sh, sw) = (qh - 2 * my, qw - 2 * mx);
    let mut mask = vec![false; height * width];
    for r in 0..sh {
        for c in 0..sw {
            let on = match attrs.shape {
                0 => true,
                1 => {
                    let band_r = r >= sh / 3 && r < sh - sh / 3;
                    let band_c = c >= sw / 3 && c < sw - sw / 3;
                    band_r || band_c
                }
                _ => r % 2 == 0,
            };
            if on {
                mask[(oy + my + r) * width + ox + mx + c] = true;
            }
        }
    }
    mask
}

/// Renders one record's image from its attributes and generator seed.
pub fn render(attrs: &Attributes, seed: u64, channels: usize, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mask = shape_mask(attrs, height, width);
    let mut px = vec![0.0; channels * height * width];
    for c in 0..channels {
        for (i, on) in mask.iter().enumerate() {
            let base = if *on && c == attrs.color { 1.0 } else { 0.0 };
            px[c * height * width + i] = base + noise.sample(&mut rng);
        }
    }
    Tensor::from_parts(vec![channels, height, width], px)
}

/// Generates `n` records with attribute combinations drawn stratified: each
/// consecutive block of 36 records is a permutation of all combinations.
pub fn generate_corpus(n: usize, cfg: &ModelConfig, seed: u64) -> Result<Corpus> {
    if n < 2 {
        return Err(Error::invalid("generate_corpus", "need at least 2 records"));
    }
    if cfg.channels < COLORS.len() || cfg.height < 16 || cfg.width < 16 {
        return Err(Error::invalid(
            "generate_corpus",
            "images need at least 3 channels and 16x16 pixels",
        ));
    }
    let vocab = corpus_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    while order.len() < n {
        let mut block: Vec<usize> = (0..NUM_COMBOS).collect();
        block.shuffle(&mut rng);
        order.extend(block);
    }
    order.truncate(n);
    let records = order
        .into_iter()
        .enumerate()
        .map(|(id, combo)| {
            let attributes = Attributes::from_combo(combo);
            let rseed: u64 = rng.random();
            let caption = attributes.caption();
            CorpusRecord {
                id,
                ids: vocab.encode(&caption, cfg.max_text_len),
                image: render(&attributes, rseed, cfg.channels, cfg.height, cfg.width),
                caption,
                attributes,
                seed: rseed,
            }
        })
        .collect();
    Ok(Corpus {
        records,
        vocab,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: usize,
    caption: String,
    seed: u64,
    shape: String,
    color: String,
    position: String,
}

const MANIFEST: &str = "manifest.jsonl";
const IMAGES: &str = "images.bin";
const VOCAB: &str = "vocab.txt";

/// Writes `manifest.jsonl`, `vocab.txt`, and `images.bin` into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path, overwrite: bool) -> Result<()> {
    if dir.join(MANIFEST).exists() && !overwrite {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join(MANIFEST))?;
    let mut table = TensorTable::new();
    table.set_meta("kind", "corpus");
    table.set_meta("channels", corpus.channels);
    table.set_meta("height", corpus.height);
    table.set_meta("width", corpus.width);
    for r in &corpus.records {
        let (v, h) = POSITIONS[r.attributes.position];
        let line = ManifestLine {
            id: r.id,
            caption: r.caption.clone(),
            seed: r.seed,
            shape: SHAPES[r.attributes.shape].into(),
            color: COLORS[r.attributes.color].into(),
            position: format!("{v} {h}"),
        };
        writeln!(manifest, "{}", serde_json::to_string(&line)?)?;
        table.insert(format!("image/{}", r.id), &r.image);
    }
    fs::write(dir.join(VOCAB), corpus.vocab.to_text())?;
    table.save(&dir.join(IMAGES), true)
}

pub fn load_corpus(dir: &Path, max_text_len: usize) -> Result<Corpus> {
    let vocab = Vocab::load(&dir.join(VOCAB))?;
    let table = TensorTable::load(&dir.join(IMAGES))?;
    let reader = BufReader::new(fs::File::open(dir.join(MANIFEST))?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let find = |list: &[&str], w: &str| {
            list.iter()
                .position(|x| *x == w)
                .ok_or_else(|| Error::invalid("load_corpus", format!("unknown attribute `{w}`")))
        };
        let positions: Vec<String> = POSITIONS.iter().map(|(v, h)| format!("{v} {h}")).collect();
        let position_refs: Vec<&str> = positions.iter().map(String::as_str).collect();
        let attributes = Attributes {
            shape: find(&SHAPES, &m.shape)?,
            color: find(&COLORS, &m.color)?,
            position: find(&position_refs, &m.position)?,
        };
        records.push(CorpusRecord {
            id: m.id,
            ids: vocab.encode(&m.caption, max_text_len),
            image: table.get(&format!("image/{}", m.id))?.clone(),
            caption: m.caption,
            attributes,
            seed: m.seed,
        });
    }
    Ok(Corpus {
        records,
        vocab,
        channels: table.meta_parse("channels")?,
        height: table.meta_parse("height")?,
        width: table.meta_parse("width")?,
    })
}
