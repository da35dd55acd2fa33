//! Synthetic speech-translation data.
//!
//! A fixed pseudo-language stands in for recognizer phones and real speech.
//! It has 40 phones, and 200 syllables of one consonant plus up to two
//! vowels, so phone strings split back into syllables unambiguously. Each
//! syllable translates to one pseudo-word. Targets swap adjacent word pairs,
//! so the alignment is not monotone. Every phone emits 4 to 8 frames of a
//! prototype vector plus Gaussian noise. A corrupted syllable has its frames
//! replaced by pure noise, but its phones are still emitted correctly.

use std::fs;
use std::path::{Path, PathBuf};

use allost_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Zipf};

use crate::datapipe::Example;
use crate::error::{Error, IoContext, Result};
use crate::features;
use crate::manifest::{self, ManifestRecord};

pub const CONSONANTS: [&str; 20] = [
    "p", "b", "t", "d", "k", "g", "m", "n", "ŋ", "f", "v", "s", "z", "ʃ", "ʒ", "h", "l", "r", "w", "j",
];
pub const VOWELS: [&str; 20] = [
    "a", "e", "i", "o", "u", "ɛ", "ɔ", "ə", "ɪ", "ʊ", "æ", "ɑ", "y", "ø", "ɯ", "ɤ", "aː", "eː", "iː", "uː",
];
pub const SYLLABLES: usize = 200;
pub const FEATURE_DIM: usize = 83;
pub const MIN_SYLLABLES: usize = 3;
pub const MAX_SYLLABLES: usize = 12;
pub const MIN_FRAMES_PER_PHONE: usize = 4;
pub const MAX_FRAMES_PER_PHONE: usize = 8;
/// Zipf exponent of syllable frequencies.
pub const ZIPF_EXPONENT: f64 = 1.0;
/// The language itself never changes with the data seed.
const LANGUAGE_SEED: u64 = 0x5eed_1a46;

/// The fixed pseudo-language.
#[derive(Debug, Clone)]
pub struct Language {
    /// Phone indices per syllable, ordered by frequency rank.
    pub syllables: Vec<Vec<usize>>,
    pub words: Vec<String>,
    /// `[40, FEATURE_DIM]` phone prototypes.
    pub prototypes: Vec<Vec<f32>>,
}

impl Default for Language {
    fn default() -> Self {
        Self::new()
    }
}

impl Language {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LANGUAGE_SEED);
        let mut all = Vec::new();
        for c in 0..CONSONANTS.len() {
            all.push(vec![c]);
            for v1 in 0..VOWELS.len() {
                all.push(vec![c, 20 + v1]);
                for v2 in 0..VOWELS.len() {
                    all.push(vec![c, 20 + v1, 20 + v2]);
                }
            }
        }
        all.shuffle(&mut rng);
        let syllables: Vec<Vec<usize>> = all.into_iter().take(SYLLABLES).collect();

        let mut words = Vec::with_capacity(SYLLABLES);
        while words.len() < SYLLABLES {
            let len = rng.random_range(2..=6);
            let w: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }

        let prototypes = (0..CONSONANTS.len() + VOWELS.len())
            .map(|_| (0..FEATURE_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
            .collect();
        Self {
            syllables,
            words,
            prototypes,
        }
    }

    pub fn phone_label(p: usize) -> &'static str {
        if p < CONSONANTS.len() {
            CONSONANTS[p]
        } else {
            VOWELS[p - CONSONANTS.len()]
        }
    }

    /// Zipf-distributed syllable indices for one utterance.
    pub fn sample_syllables(&self, rng: &mut impl Rng) -> Vec<usize> {
        let zipf = Zipf::new(SYLLABLES as f64, ZIPF_EXPONENT).expect("valid zipf");
        let n = rng.random_range(MIN_SYLLABLES..=MAX_SYLLABLES);
        (0..n).map(|_| zipf.sample(rng) as usize - 1).collect()
    }

    pub fn phones(&self, syllables: &[usize]) -> Vec<&'static str> {
        syllables
            .iter()
            .flat_map(|&s| self.syllables[s].iter().map(|&p| Self::phone_label(p)))
            .collect()
    }

    /// Word per syllable, then each adjacent pair swapped.
    pub fn translate(&self, syllables: &[usize]) -> String {
        let mut words: Vec<&str> = syllables.iter().map(|&s| self.words[s].as_str()).collect();
        for pair in words.chunks_mut(2) {
            pair.reverse();
        }
        words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub corruption_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            seed: 1,
            noise_sigma: 0.3,
            corruption_prob: 0.4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return Err(Error::config(format!("corruption_prob {} outside [0, 1]", self.corruption_prob)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if self.n_train < 3 || self.n_valid < 3 || self.n_test < 3 {
            return Err(Error::config("each split needs at least 3 utterances"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One generated utterance, before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub syllables: Vec<usize>,
    pub corrupted: Vec<bool>,
    pub phones: String,
    pub target: String,
    pub feats: Tensor<f32>,
}

/// Utterance `index` of `split`. Each one draws from its own ChaCha stream,
/// so splits and indices are independent of each other.
pub fn utterance(lang: &Language, spec: &SynthSpec, split: Split, index: usize) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    let syllables = lang.sample_syllables(&mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut data = Vec::new();
    let mut corrupted = Vec::with_capacity(syllables.len());
    for &s in &syllables {
        let bad = rng.random_bool(spec.corruption_prob);
        corrupted.push(bad);
        for &p in &lang.syllables[s] {
            let frames = rng.random_range(MIN_FRAMES_PER_PHONE..=MAX_FRAMES_PER_PHONE);
            for _ in 0..frames {
                for &proto in &lang.prototypes[p] {
                    let v = if bad {
                        rng.sample::<f64, _>(StandardNormal)
                    } else if spec.noise_sigma > 0.0 {
                        proto as f64 + noise.sample(&mut rng)
                    } else {
                        proto as f64
                    };
                    data.push(v as f32);
                }
            }
        }
    }
    let frames = data.len() / FEATURE_DIM;
    Utterance {
        id: format!("{}-{index:06}", split.name()),
        phones: lang.phones(&syllables).join(" "),
        target: lang.translate(&syllables),
        syllables,
        corrupted,
        feats: Tensor::new(&[frames, FEATURE_DIM], data).expect("frame-aligned"),
    }
}

impl From<Utterance> for Example {
    fn from(u: Utterance) -> Self {
        Example {
            id: u.id,
            feats: u.feats,
            phones: u.phones.split_whitespace().map(String::from).collect(),
            references: vec![u.target.clone()],
            target: u.target,
        }
    }
}

/// The `n` utterances of `split`, held in memory.
pub fn examples(lang: &Language, spec: &SynthSpec, split: Split, n: usize) -> Vec<Example> {
    (0..n).map(|i| utterance(lang, spec, split, i).into()).collect()
}

/// Manifest paths of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

impl SynthOutput {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.jsonl"),
            valid: dir.join("valid.jsonl"),
            test: dir.join("test.jsonl"),
        }
    }
}

/// Writes `train/valid/test.jsonl` plus `feats/<id>.alsf` under `dir`.
/// Manifests store feature paths relative to `dir`.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let lang = Language::new();
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).at(&feat_dir)?;
    let out = SynthOutput::in_dir(dir);
    for split in Split::ALL {
        let n = match split {
            Split::Train => spec.n_train,
            Split::Valid => spec.n_valid,
            Split::Test => spec.n_test,
        };
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let u = utterance(&lang, spec, split, i);
            let rel = PathBuf::from("feats").join(format!("{}.alsf", u.id));
            features::write(&dir.join(&rel), &u.feats)?;
            records.push(ManifestRecord {
                id: u.id,
                feats_path: rel,
                phones: u.phones,
                target: u.target,
                references: vec![],
            });
        }
        let path = match split {
            Split::Train => &out.train,
            Split::Valid => &out.valid,
            Split::Test => &out.test,
        };
        manifest::write(path, &records)?;
    }
    Ok(out)
}

/// Phone lines drawn from the language until at least `min_symbols`
/// phones have been produced, as a phone recognizer would emit them: each
/// phone is replaced by a uniformly drawn one with probability
/// `substitution_rate`.
pub fn phone_corpus(seed: u64, min_symbols: usize, substitution_rate: f64) -> Vec<String> {
    let lang = Language::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    let mut total = 0;
    while total < min_symbols {
        let mut phones = lang.phones(&lang.sample_syllables(&mut rng));
        for p in phones.iter_mut() {
            if rng.random_bool(substitution_rate) {
                *p = Language::phone_label(rng.random_range(0..CONSONANTS.len() + VOWELS.len()));
            }
        }
        total += phones.len();
        lines.push(phones.join(" "));
    }
    lines
}
