//! Fusion-mode × phone-unit ablation: trains one model per arm and seed,
//! decodes the test set and tabulates mean BLEU.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use allost_core::bpe::{phone_segments, text_segments, train_bpe, Alphabet, Tokenizer};
use allost_core::model::{AlloSt, FusionMode};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelSection;
use crate::datapipe::{Example, Tokenizers};
use crate::error::{Error, IoContext, Result};
use crate::trainer::{train, TrainConfig};
use crate::translate::{score_examples, translate};

/// How phone strings are cut into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PhoneUnits {
    /// One token per phone.
    Raw,
    /// BPE over phones.
    Bpe,
}

impl PhoneUnits {
    pub const ALL: [PhoneUnits; 2] = [PhoneUnits::Raw, PhoneUnits::Bpe];

    pub fn as_str(self) -> &'static str {
        match self {
            PhoneUnits::Raw => "raw",
            PhoneUnits::Bpe => "bpe",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub arms: Vec<FusionMode>,
    pub seeds: Vec<u64>,
    pub phone_vocab: usize,
    pub target_vocab: usize,
    pub beam: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub fusion: String,
    pub units: PhoneUnits,
    pub seed: u64,
    pub bleu: f64,
    pub valid_loss: f64,
    /// False when the run was copied from the other unit column; the
    /// acoustic-only arm never reads phones.
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    /// Mean test BLEU over seeds, if the cell was run.
    pub fn mean(&self, fusion: FusionMode, units: PhoneUnits) -> Option<f64> {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.fusion == fusion.as_str() && r.units == units)
            .map(|r| r.bleu)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Markdown table: one row per fusion mode, one column per phone unit.
    pub fn table(&self) -> String {
        let mut s = String::from("| fusion | raw phones | BPE phones |\n|---|---|---|\n");
        for f in FusionMode::ALL {
            let cell = |u| self.mean(f, u).map_or("-".to_string(), |b| format!("{b:.2}"));
            let _ = writeln!(s, "| {f} | {} | {} |", cell(PhoneUnits::Raw), cell(PhoneUnits::Bpe));
        }
        s
    }
}

/// Phone tokenizer for `units` and a target BPE tokenizer, both learned on
/// the training set.
pub fn build_tokenizers(train_set: &[Example], units: PhoneUnits, phone_vocab: usize, target_vocab: usize) -> Result<Tokenizers> {
    let lines: Vec<String> = train_set.iter().map(|e| e.phones.join(" ")).collect();
    let segments = phone_segments(&lines);
    let phones = match units {
        PhoneUnits::Raw => Tokenizer::from_alphabet(Alphabet::from_corpus(&segments)?),
        PhoneUnits::Bpe => train_bpe(&segments, phone_vocab)?,
    };
    let targets: Vec<&str> = train_set.iter().map(|e| e.target.as_str()).collect();
    Ok(Tokenizers {
        phones,
        target: train_bpe(&text_segments(&targets), target_vocab)?,
    })
}

/// Runs every arm × unit × seed under `work_dir/<fusion>-<units>-s<seed>`
/// and writes `results.md` and `results.json` there.
pub fn run_ablation(
    spec: &AblationSpec,
    train_set: &[Example],
    valid_set: &[Example],
    test_set: &[Example],
    work_dir: &Path,
) -> Result<AblationReport> {
    if spec.arms.is_empty() || spec.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one arm and one seed"));
    }
    let mut runs = Vec::new();
    for units in PhoneUnits::ALL {
        let tok = build_tokenizers(train_set, units, spec.phone_vocab, spec.target_vocab)?;
        for &fusion in &spec.arms {
            for &seed in &spec.seeds {
                if !fusion.uses_phones() && units == PhoneUnits::Bpe {
                    let raw = runs
                        .iter()
                        .find(|r: &&AblationRun| r.fusion == fusion.as_str() && r.seed == seed)
                        .cloned()
                        .expect("raw column runs first");
                    runs.push(AblationRun {
                        units,
                        trained: false,
                        ..raw
                    });
                    continue;
                }
                let mut section = spec.model.clone();
                section.fusion_mode = fusion.to_string();
                section.init_seed = seed;
                let model = AlloSt::new(section.to_model_config(tok.phones.vocab_size(), tok.target.vocab_size())?)?;
                let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
                let cfg = TrainConfig {
                    seed,
                    ..spec.train.clone()
                };
                let dir = work_dir.join(format!("{fusion}-{}-s{seed}", units.as_str()));
                let out = train(&model, params, train_set, valid_set, &tok, &cfg, &dir)?;
                let hyps = translate(&model, &out.averaged, test_set, &tok, spec.beam, spec.max_len)?;
                let bleu = score_examples(&hyps, test_set)?.bleu;
                info!("{fusion}/{}/seed {seed}: BLEU {bleu:.2}", units.as_str());
                runs.push(AblationRun {
                    fusion: fusion.to_string(),
                    units,
                    seed,
                    bleu,
                    valid_loss: out.kept[0].valid_loss,
                    trained: true,
                });
            }
        }
    }
    let report = AblationReport { runs };
    fs::create_dir_all(work_dir).at(work_dir)?;
    let md = work_dir.join("results.md");
    fs::write(&md, report.table()).at(&md)?;
    let js = work_dir.join("results.json");
    fs::write(&js, serde_json::to_string_pretty(&report).expect("report serializes")).at(&js)?;
    Ok(report)
}
