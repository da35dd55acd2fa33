//! Dual-encoder speech translation network.
//!
//! The acoustic encoder subsamples filterbank frames and runs conformer
//! blocks over them. The phone encoder embeds phone-BPE ids and runs its
//! own conformer stack. Depending on [`FusionMode`] the phone memory is
//! attended from the acoustic memory (encoder fusion), from an extra
//! attention sublayer in every decoder block (decoder fusion), or both.

mod config;
mod generate;
mod layers;
mod params;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

pub use config::{FusionMode, ModelConfig};
pub use generate::Generation;
pub use layers::Session;
pub use params::{ParamId, ParameterSet};

use crate::bpe::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use layers::{
    causal_mask, init_tensor, key_mask, positional_encoding, Attention, Builder, ConformerBlock,
    Init, Linear, Norm, ParamSpec,
};

/// One source utterance as the encoders consume it.
#[derive(Debug, Clone, Copy)]
pub struct Source<'a, F> {
    /// `[T, acoustic_feature_dim]` frames.
    pub feats: &'a Tensor<F>,
    /// Valid-frame flags; `None` means all frames are valid.
    pub frame_mask: Option<&'a [bool]>,
    /// Phone-BPE ids. Ignored when fusion is off.
    pub phones: Option<&'a [usize]>,
    pub phone_mask: Option<&'a [bool]>,
}

impl<'a, F> Source<'a, F> {
    pub fn new(feats: &'a Tensor<F>, phones: Option<&'a [usize]>) -> Self {
        Self {
            feats,
            frame_mask: None,
            phones,
            phone_mask: None,
        }
    }
}

/// Encoder outputs on the tape.
#[derive(Debug, Clone)]
pub struct MemoryVars {
    /// Acoustic memory, already fused with phones under encoder fusion.
    pub acoustic: Var,
    pub acoustic_mask: Vec<bool>,
    pub phone: Option<Var>,
    pub phone_mask: Vec<bool>,
}

/// Encoder outputs as plain values, reused across decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMemory<F> {
    pub acoustic: Tensor<F>,
    pub acoustic_mask: Vec<bool>,
    pub phone: Option<Tensor<F>>,
    pub phone_mask: Vec<bool>,
}

/// Loss and teacher-forced token accuracy for one utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
}

#[derive(Debug, Clone)]
struct AcousticEncoder {
    subsample: Vec<Linear>,
    project: Linear,
    blocks: Vec<ConformerBlock>,
}

#[derive(Debug, Clone)]
struct PhoneEncoder {
    embed: ParamId,
    blocks: Vec<ConformerBlock>,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_attn: Attention,
    self_norm: Norm,
    src_attn: Attention,
    src_norm: Norm,
    phone_attn: Option<(Attention, Norm)>,
    ff_up: Linear,
    ff_down: Linear,
    ff_norm: Norm,
}

/// Layout of the whole network: which parameter feeds which layer.
/// Weights live separately in a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct AlloSt {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    acoustic: AcousticEncoder,
    phone: Option<PhoneEncoder>,
    fuse: Option<(Attention, Norm)>,
    target_embed: ParamId,
    decoder: Vec<DecoderBlock>,
    output: Linear,
}

impl AlloSt {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.heads;
        let mut b = Builder::default();

        let mut subsample = Vec::new();
        let mut width = config.acoustic_feature_dim;
        for i in 0..config.subsample_factor.trailing_zeros() {
            subsample.push(b.linear(&format!("enc2.subsample.conv{i}"), 3 * width, d));
            width = d;
        }
        let project = b.linear("enc2.subsample.out", width, d);
        let blocks = (0..config.acoustic_layers)
            .map(|i| {
                ConformerBlock::build(&mut b, &format!("enc2.block{i}"), d, h, config.ffn_dim, config.conv_kernel)
            })
            .collect();
        let acoustic = AcousticEncoder {
            subsample,
            project,
            blocks,
        };

        let phone = config.fusion_mode.uses_phones().then(|| {
            let embed = b.param(
                "enc1.embed".into(),
                &[config.phone_vocab, d],
                Init::Normal(num_traits::Float::powf(d as f64, -0.5)),
            );
            let blocks = (0..config.phone_layers)
                .map(|i| {
                    ConformerBlock::build(&mut b, &format!("enc1.block{i}"), d, h, config.ffn_dim, config.conv_kernel)
                })
                .collect();
            PhoneEncoder { embed, blocks }
        });
        let fuse = config
            .fusion_mode
            .fuses_encoder()
            .then(|| (b.attention("fuse.attn", d, h), b.norm("fuse.ln", d)));

        let target_embed = b.param(
            "dec.embed".into(),
            &[config.target_vocab, d],
            Init::Normal(num_traits::Float::powf(d as f64, -0.5)),
        );
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("dec.block{i}");
                DecoderBlock {
                    self_attn: b.attention(&format!("{p}.self_attn"), d, h),
                    self_norm: b.norm(&format!("{p}.ln1"), d),
                    src_attn: b.attention(&format!("{p}.src_attn"), d, h),
                    src_norm: b.norm(&format!("{p}.ln2"), d),
                    phone_attn: config.fusion_mode.fuses_decoder().then(|| {
                        (
                            b.attention(&format!("{p}.phone_attn"), d, h),
                            b.norm(&format!("{p}.ln3"), d),
                        )
                    }),
                    ff_up: b.linear(&format!("{p}.ff.w1"), d, config.ffn_dim),
                    ff_down: b.linear(&format!("{p}.ff.w2"), config.ffn_dim, d),
                    ff_norm: b.norm(&format!("{p}.ln4"), d),
                }
            })
            .collect();
        let output = b.linear("dec.out", d, config.target_vocab);

        Ok(Self {
            config,
            specs: b.specs,
            acoustic,
            phone,
            fuse,
            target_embed,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names in layout order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Fresh weights: Xavier-uniform matrices, N(0, d^-0.5) embeddings,
    /// zero biases, unit norm gains.
    pub fn init_params<F: Scalar>(&self, rng: &mut dyn RngCore) -> ParameterSet<F> {
        let mut p = ParameterSet::new();
        for spec in &self.specs {
            p.insert(&spec.name, init_tensor(spec, rng))
                .expect("layout names are unique");
        }
        p
    }

    /// Checks that `params` matches this layout name-for-name and shape-for-shape.
    pub fn check_params<F: Scalar>(&self, params: &ParameterSet<F>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(TensorError::Config(format!(
                "expected {} parameters, found {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in self.specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(TensorError::Config(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Subsampling then conformer blocks over filterbank frames.
    /// Returns the memory and its valid-frame mask.
    pub fn acoustic_encode<F: Scalar>(
        &self,
        s: &mut Session<'_, '_, F>,
        feats: &Tensor<F>,
        frame_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<bool>)> {
        let c = &self.config;
        let shape = feats.shape();
        if shape.len() != 2 || shape[1] != c.acoustic_feature_dim {
            return Err(TensorError::Config(format!(
                "acoustic features {:?} do not have {} columns",
                shape, c.acoustic_feature_dim
            )));
        }
        if shape[0] == 0 {
            return Err(TensorError::Config("empty feature matrix".into()));
        }
        let mut mask = match frame_mask {
            Some(m) if m.len() != shape[0] => {
                return Err(TensorError::Config(format!(
                    "frame mask length {} for {} frames",
                    m.len(),
                    shape[0]
                )))
            }
            Some(m) => m.to_vec(),
            None => vec![true; shape[0]],
        };
        if !mask[0] {
            return Err(TensorError::Config("first frame is masked".into()));
        }
        let x = s.graph.constant(feats.clone());
        let mut x = s.graph.mask_rows(x, &mask)?;
        for conv in &self.acoustic.subsample {
            let stacked = s.graph.frame_stack(x, 3, 2)?;
            let y = conv.forward(s, stacked)?;
            let y = s.graph.swish(y);
            mask = mask.iter().step_by(2).copied().collect();
            x = s.graph.mask_rows(y, &mask)?;
        }
        let x = self.acoustic.project.forward(s, x)?;
        let pe = s.graph.constant(positional_encoding(mask.len(), c.d_model));
        let x = s.graph.add(x, pe)?;
        let mut x = s.drop(x)?;
        for block in &self.acoustic.blocks {
            x = block.forward(s, x, &mask)?;
        }
        Ok((x, mask))
    }

    /// Embedding plus positional encoding, then the phone conformer stack.
    pub fn phone_encode<F: Scalar>(
        &self,
        s: &mut Session<'_, '_, F>,
        ids: &[usize],
        phone_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<bool>)> {
        let enc = self
            .phone
            .as_ref()
            .ok_or_else(|| TensorError::Config("phone encoder disabled by fusion_mode=none".into()))?;
        if ids.is_empty() {
            return Err(TensorError::Config("empty phone sequence".into()));
        }
        let mask = match phone_mask {
            Some(m) if m.len() != ids.len() => {
                return Err(TensorError::Config(format!(
                    "phone mask length {} for {} phones",
                    m.len(),
                    ids.len()
                )))
            }
            Some(m) => m.to_vec(),
            None => vec![true; ids.len()],
        };
        if !mask[0] {
            return Err(TensorError::Config("first phone is masked".into()));
        }
        let d = self.config.d_model;
        let table = s.p(enc.embed);
        let x = s.graph.embedding(table, ids)?;
        let x = s.graph.scale(x, F::from_usize(d).sqrt());
        let pe = s.graph.constant(positional_encoding(ids.len(), d));
        let x = s.graph.add(x, pe)?;
        let mut x = s.drop(x)?;
        for block in &enc.blocks {
            x = block.forward(s, x, &mask)?;
        }
        Ok((x, mask))
    }

    /// `LN(acoustic + MHA(acoustic, phone, phone))`; keeps the acoustic time axis.
    pub fn encoder_fuse<F: Scalar>(
        &self,
        s: &mut Session<'_, '_, F>,
        acoustic: Var,
        phone: Var,
        phone_mask: &[bool],
    ) -> Result<Var> {
        let (attn, norm) = self
            .fuse
            .as_ref()
            .ok_or_else(|| TensorError::Config(format!("fusion_mode={} has no encoder fusion", self.config.fusion_mode)))?;
        let da = s.graph.value(acoustic).last_dim();
        let dp = s.graph.value(phone).last_dim();
        if da != dp {
            return Err(TensorError::Shape {
                op: "encoder_fuse",
                lhs: s.graph.shape(acoustic).to_vec(),
                rhs: s.graph.shape(phone).to_vec(),
            });
        }
        let t = s.graph.shape(acoustic)[0];
        let y = attn.forward(s, acoustic, phone, &key_mask(t, phone_mask))?;
        let y = s.drop(y)?;
        let x = s.graph.add(acoustic, y)?;
        norm.forward(s, x)
    }

    /// Runs whichever encoders `fusion_mode` calls for.
    pub fn encode<F: Scalar>(&self, s: &mut Session<'_, '_, F>, src: &Source<'_, F>) -> Result<MemoryVars> {
        let (acoustic, acoustic_mask) = self.acoustic_encode(s, src.feats, src.frame_mask)?;
        if !self.config.fusion_mode.uses_phones() {
            return Ok(MemoryVars {
                acoustic,
                acoustic_mask,
                phone: None,
                phone_mask: Vec::new(),
            });
        }
        let ids = src.phones.ok_or_else(|| {
            TensorError::Config(format!(
                "fusion_mode={} needs a phone sequence",
                self.config.fusion_mode
            ))
        })?;
        let (phone, phone_mask) = self.phone_encode(s, ids, src.phone_mask)?;
        let acoustic = if self.config.fusion_mode.fuses_encoder() {
            self.encoder_fuse(s, acoustic, phone, &phone_mask)?
        } else {
            acoustic
        };
        Ok(MemoryVars {
            acoustic,
            acoustic_mask,
            phone: Some(phone),
            phone_mask,
        })
    }

    /// Teacher-forced decoder logits `[L, target_vocab]` for `targets_in`
    /// (starting with `<s>`). Position `t` only sees inputs `..=t`.
    pub fn decode_forward<F: Scalar>(
        &self,
        s: &mut Session<'_, '_, F>,
        targets_in: &[usize],
        memory: &MemoryVars,
    ) -> Result<Var> {
        let d = self.config.d_model;
        if targets_in.is_empty() {
            return Err(TensorError::Config("empty decoder input".into()));
        }
        let table = s.p(self.target_embed);
        let y = s.graph.embedding(table, targets_in)?;
        let y = s.graph.scale(y, F::from_usize(d).sqrt());
        let pe = s.graph.constant(positional_encoding(targets_in.len(), d));
        let y = s.graph.add(y, pe)?;
        let mut y = s.drop(y)?;

        let l = targets_in.len();
        let self_mask = causal_mask(&vec![true; l]);
        let src_mask = key_mask(l, &memory.acoustic_mask);
        let phone_mask = key_mask(l, &memory.phone_mask);
        for block in &self.decoder {
            let a = block.self_attn.forward(s, y, y, &self_mask)?;
            let a = s.drop(a)?;
            let r = s.graph.add(y, a)?;
            y = block.self_norm.forward(s, r)?;

            let a = block.src_attn.forward(s, y, memory.acoustic, &src_mask)?;
            let a = s.drop(a)?;
            let r = s.graph.add(y, a)?;
            y = block.src_norm.forward(s, r)?;

            if let Some((attn, norm)) = &block.phone_attn {
                let phone = memory.phone.ok_or_else(|| {
                    TensorError::Config(format!(
                        "fusion_mode={} needs phone memory in the decoder",
                        self.config.fusion_mode
                    ))
                })?;
                let a = attn.forward(s, y, phone, &phone_mask)?;
                let a = s.drop(a)?;
                let r = s.graph.add(y, a)?;
                y = norm.forward(s, r)?;
            }

            let a = block.ff_up.forward(s, y)?;
            let a = s.graph.relu(a);
            let a = block.ff_down.forward(s, a)?;
            let a = s.drop(a)?;
            let r = s.graph.add(y, a)?;
            y = block.ff_norm.forward(s, r)?;
        }
        self.output.forward(s, y)
    }

    /// Label-smoothed loss of `target` (no `<s>`/`</s>`) given `src`.
    /// Returns the scalar loss node and the teacher-forced accuracy.
    pub fn loss<F: Scalar>(
        &self,
        s: &mut Session<'_, '_, F>,
        src: &Source<'_, F>,
        target: &[usize],
    ) -> Result<(Var, LossReport)> {
        let memory = self.encode(s, src)?;
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS_ID);
        input.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(EOS_ID);
        let logits = self.decode_forward(s, &input, &memory)?;
        let loss = s.graph.cross_entropy(
            logits,
            &gold,
            F::from_f64(self.config.label_smoothing),
            PAD_ID,
        )?;
        let lv = s.graph.value(logits);
        let mut correct = 0;
        let mut tokens = 0;
        for (t, &g) in gold.iter().enumerate() {
            if g == PAD_ID {
                continue;
            }
            tokens += 1;
            if argmax(lv.row(t)) == g {
                correct += 1;
            }
        }
        let report = LossReport {
            loss: s.graph.value(loss).item().as_f64(),
            tokens,
            correct,
        };
        Ok((loss, report))
    }

    /// Forward-only encoder pass.
    pub fn encode_memory<F: Scalar>(&self, params: &ParameterSet<F>, src: &Source<'_, F>) -> Result<EncodedMemory<F>> {
        let mut s = Session::new(params);
        let m = self.encode(&mut s, src)?;
        Ok(EncodedMemory {
            acoustic: s.graph.value(m.acoustic).clone(),
            acoustic_mask: m.acoustic_mask,
            phone: m.phone.map(|p| s.graph.value(p).clone()),
            phone_mask: m.phone_mask,
        })
    }

    /// Forward-only decoder pass over precomputed memory.
    pub fn decode_logits<F: Scalar>(
        &self,
        params: &ParameterSet<F>,
        targets_in: &[usize],
        memory: &EncodedMemory<F>,
    ) -> Result<Tensor<F>> {
        let mut s = Session::new(params);
        let acoustic = s.graph.constant(memory.acoustic.clone());
        let phone = memory.phone.as_ref().map(|p| s.graph.constant(p.clone()));
        let vars = MemoryVars {
            acoustic,
            acoustic_mask: memory.acoustic_mask.clone(),
            phone,
            phone_mask: memory.phone_mask.clone(),
        };
        let logits = self.decode_forward(&mut s, targets_in, &vars)?;
        Ok(s.graph.value(logits).clone())
    }
}

pub(crate) fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
