//! Length filtering, feature loading, tokenization and padded batches.

use std::path::Path;

use allost_core::bpe::{Tokenizer, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use allost_core::text;
use allost_core::Tensor;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features;
use crate::manifest::ManifestRecord;
use crate::tokenizer_file;

/// Longest kept target, in characters after normalization.
pub const MAX_TARGET_CHARS: usize = 400;
/// Longest kept source, in feature frames.
pub const MAX_FRAMES: usize = 3000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: usize,
    /// Records over the character limit.
    pub target_too_long: usize,
    /// Records over the frame limit. A record breaking both rules counts
    /// under both.
    pub too_many_frames: usize,
}

/// Keeps pairs with at most [`MAX_TARGET_CHARS`] target characters and at
/// most [`MAX_FRAMES`] frames; both limits are inclusive.
pub fn keep_pair(target: &str, frames: usize) -> bool {
    text::char_len(target) <= MAX_TARGET_CHARS && frames <= MAX_FRAMES
}

/// Filters with frame counts supplied by `frames`.
pub fn filter_by<T>(
    items: Vec<T>,
    target: impl Fn(&T) -> &str,
    frames: impl Fn(&T) -> Result<usize>,
) -> Result<(Vec<T>, FilterReport)> {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(items.len());
    for item in items {
        let long = text::char_len(target(&item)) > MAX_TARGET_CHARS;
        let big = frames(&item)? > MAX_FRAMES;
        report.target_too_long += long as usize;
        report.too_many_frames += big as usize;
        if !long && !big {
            kept.push(item);
        }
    }
    report.kept = kept.len();
    info!(
        "filter: kept {}, removed {} for target > {MAX_TARGET_CHARS} chars, {} for > {MAX_FRAMES} frames",
        report.kept, report.target_too_long, report.too_many_frames
    );
    Ok((kept, report))
}

/// Filters manifest records, reading only feature-file headers.
pub fn filter_pairs(records: Vec<ManifestRecord>) -> Result<(Vec<ManifestRecord>, FilterReport)> {
    filter_by(records, |r| &r.target, |r| Ok(features::read_shape(&r.feats_path)?.0))
}

/// A manifest record with its features in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub feats: Tensor<f32>,
    pub phones: Vec<String>,
    pub target: String,
    pub references: Vec<String>,
}

impl Example {
    pub fn frames(&self) -> usize {
        self.feats.rows()
    }
}

pub fn load_examples(records: &[ManifestRecord], feature_dim: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let feats = features::read(&r.feats_path)?;
            if feats.last_dim() != feature_dim {
                return Err(Error::data(format!(
                    "{}: {} feature columns, expected {feature_dim}",
                    r.id,
                    feats.last_dim()
                )));
            }
            Ok(Example {
                id: r.id.clone(),
                feats,
                phones: r.phones.split_whitespace().map(String::from).collect(),
                target: r.target.clone(),
                references: r.references().into_iter().map(String::from).collect(),
            })
        })
        .collect()
}

/// Source-phone and target-text tokenizers.
#[derive(Debug, Clone)]
pub struct Tokenizers {
    pub phones: Tokenizer,
    pub target: Tokenizer,
}

impl Tokenizers {
    pub fn load(phones: &Path, target: &Path) -> Result<Self> {
        Ok(Self {
            phones: tokenizer_file::load(phones)?,
            target: tokenizer_file::load(target)?,
        })
    }

    /// Phone ids; an empty or all-unknown sequence becomes `[<unk>]` with a warning.
    pub fn encode_phones(&self, ex: &Example, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let ids = self.phones.encode(&ex.phones, dropout, rng)?.ids;
        if ids.is_empty() || ids.iter().all(|&i| i == UNK_ID) {
            warn!("{}: no known phones, encoding as <unk>", ex.id);
            return Ok(if ids.is_empty() { vec![UNK_ID] } else { ids });
        }
        Ok(ids)
    }

    /// Target ids without `<s>`/`</s>`.
    pub fn encode_target(&self, ex: &Example) -> Result<Vec<usize>> {
        Ok(self
            .target
            .encode_text(&ex.target, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?
            .ids)
    }
}

/// Padded mini-batch. Feature, phone and target tensors are padded to the
/// batch maxima; masks mark real positions. Targets are framed `<s> … </s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of the members in the example slice.
    pub indices: Vec<usize>,
    /// `[B, T_max, D]`.
    pub feats: Tensor<f32>,
    /// `B × T_max`, row-major.
    pub frame_mask: Vec<bool>,
    /// `B × P_max`, `PAD_ID` where masked.
    pub phones: Vec<usize>,
    pub phone_mask: Vec<bool>,
    /// `B × L_max`, `PAD_ID` where masked.
    pub targets: Vec<usize>,
    pub target_mask: Vec<bool>,
}

/// One batch member with padding removed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub index: usize,
    pub feats: Tensor<f32>,
    pub phones: Vec<usize>,
    /// Without `<s>`/`</s>`.
    pub target: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn max_phones(&self) -> usize {
        self.phones.len() / self.len()
    }

    pub fn max_targets(&self) -> usize {
        self.targets.len() / self.len()
    }

    fn build(indices: Vec<usize>, items: Vec<(&Tensor<f32>, Vec<usize>, Vec<usize>)>) -> Self {
        let b = items.len();
        let d = items[0].0.last_dim();
        let t_max = items.iter().map(|i| i.0.rows()).max().unwrap_or(0);
        let p_max = items.iter().map(|i| i.1.len()).max().unwrap_or(0);
        let l_max = items.iter().map(|i| i.2.len() + 2).max().unwrap_or(0);
        let mut feats = vec![0.0f32; b * t_max * d];
        let mut frame_mask = vec![false; b * t_max];
        let mut phones = vec![PAD_ID; b * p_max];
        let mut phone_mask = vec![false; b * p_max];
        let mut targets = vec![PAD_ID; b * l_max];
        let mut target_mask = vec![false; b * l_max];
        for (k, (f, p, t)) in items.iter().enumerate() {
            let rows = f.rows();
            feats[k * t_max * d..(k * t_max + rows) * d].copy_from_slice(f.data());
            frame_mask[k * t_max..k * t_max + rows].fill(true);
            phones[k * p_max..k * p_max + p.len()].copy_from_slice(p);
            phone_mask[k * p_max..k * p_max + p.len()].fill(true);
            let row = &mut targets[k * l_max..];
            row[0] = BOS_ID;
            row[1..=t.len()].copy_from_slice(t);
            row[t.len() + 1] = EOS_ID;
            target_mask[k * l_max..k * l_max + t.len() + 2].fill(true);
        }
        Self {
            indices,
            feats: Tensor::new(&[b, t_max, d], feats).expect("batch shape"),
            frame_mask,
            phones,
            phone_mask,
            targets,
            target_mask,
        }
    }

    /// Member `k` recovered through the masks alone.
    pub fn item(&self, k: usize) -> BatchItem {
        let (t_max, d) = (self.max_frames(), self.feats.shape()[2]);
        let frames = self.frame_mask[k * t_max..(k + 1) * t_max].iter().filter(|&&m| m).count();
        let start = k * t_max * d;
        let feats = Tensor::new(&[frames, d], self.feats.data()[start..start + frames * d].to_vec())
            .expect("item shape");
        let p_max = self.max_phones();
        let phones = (k * p_max..(k + 1) * p_max)
            .filter(|&i| self.phone_mask[i])
            .map(|i| self.phones[i])
            .collect();
        let l_max = self.max_targets();
        let framed: Vec<usize> = (k * l_max..(k + 1) * l_max)
            .filter(|&i| self.target_mask[i])
            .map(|i| self.targets[i])
            .collect();
        BatchItem {
            index: self.indices[k],
            feats,
            phones,
            target: framed[1..framed.len() - 1].to_vec(),
        }
    }
}

/// Length-bucketed batches for one epoch.
///
/// Examples are sorted by frame count (ties by position), cut into groups of
/// `batch_size`, and the group order is shuffled with a generator seeded by
/// `(seed, epoch)`. Phones are encoded with `phone_dropout` from the same
/// generator, so the result depends only on the arguments.
pub fn make_batches(
    examples: &[Example],
    tok: &Tokenizers,
    batch_size: usize,
    phone_dropout: f64,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].frames(), i));
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|idx| {
            let items = idx
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    Ok((&ex.feats, tok.encode_phones(ex, phone_dropout, &mut rng)?, tok.encode_target(ex)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch::build(idx, items))
        })
        .collect()
}
