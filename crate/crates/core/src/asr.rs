//! First pass: speech features to a character transcript.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::{beam_search, DecoderSearch};
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, AttentionMask, BlockConfig, EncoderKind, EncoderStack, Linear, Source, TransformerDecoder,
};
use crate::tensor::{log_softmax_slice, softmax_slice, Graph, ParamStore, Tensor, Var};
use crate::vocab::{TokenSequence, Vocabulary, BOS, EOS};

/// The speech input: a T×d_feat matrix with T ≥ 1 and finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Arc<Tensor>,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::Rank(frames.shape().to_vec()));
        }
        if frames.rows() == 0 {
            return Err(Error::Length("feature sequence"));
        }
        if let Some(i) = frames.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "feature sequence".into(),
                index: i,
            });
        }
        Ok(FeatureSequence {
            frames: Arc::new(frames),
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.frames)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrConfig {
    pub feat_dim: usize,
    pub block: BlockConfig,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            feat_dim: 16,
            block: BlockConfig {
                dim: 48,
                heads: 2,
                ffn_dim: 96,
                dropout: 0.1,
                conv_kernel: 7,
            },
            enc_layers: 2,
            dec_layers: 2,
        }
    }
}

/// One ranked transcription. `transcript` ends in eos unless `forced`;
/// `h_asr` has one row per transcript token.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrOutput {
    pub transcript: TokenSequence,
    pub c_asr: Arc<Tensor>,
    pub h_asr: Arc<Tensor>,
    pub log_prob: f64,
    pub forced: bool,
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub cfg: AsrConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    input: Linear,
    encoder: EncoderStack,
    pub decoder: TransformerDecoder,
}

/// Decoder input and target for a teacher-forced pass over `tokens`
/// (content tokens without bos or eos).
pub(crate) fn shift(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(EOS);
    (input, target)
}

/// Teacher-forced prefix for an emitted sequence: bos then all but the last.
pub(crate) fn prefix_for(emitted: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(emitted.len());
    p.push(BOS);
    p.extend_from_slice(&emitted[..emitted.len().saturating_sub(1)]);
    p
}

/// Token accuracy of argmax predictions.
pub(crate) fn count_correct(logits: &Tensor, target: &[usize]) -> usize {
    (0..logits.rows()).filter(|&r| logits.argmax_row(r) == target[r]).count()
}

impl AsrModel {
    pub fn new(cfg: AsrConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.block.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.block.dim;
        let input = Linear::new(&mut store, "asr.input", cfg.feat_dim, d, true, &mut rng)?;
        let encoder = EncoderStack::new(&mut store, "asr.encoder", EncoderKind::Conformer, cfg.enc_layers, &cfg.block, &mut rng)?;
        let decoder = TransformerDecoder::new(&mut store, "asr.decoder", vocab.len(), cfg.dec_layers, &cfg.block, 1, &mut rng)?;
        Ok(AsrModel {
            cfg,
            vocab,
            store,
            input,
            encoder,
            decoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.block.dim
    }

    /// Acoustic embedding of a feature matrix already on the graph.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (t, d) = (g.value(x).rows(), g.value(x).cols());
        if t == 0 {
            return Err(Error::Length("encode_speech"));
        }
        if d != self.cfg.feat_dim {
            return Err(Error::dim("encode_speech", &[t, self.cfg.feat_dim], &[t, d]));
        }
        let s = &self.store;
        let h = self.input.forward(g, s, x)?;
        let pos = g.constant(sinusoidal_positions(t, self.dim())?);
        let h = g.add(h, pos)?;
        let h = g.dropout(h, self.cfg.block.dropout)?;
        self.encoder.forward(g, s, h, &AttentionMask::none())
    }

    pub fn encode_speech(&self, g: &mut Graph, x: &FeatureSequence) -> Result<Var> {
        let xv = g.shared_constant(x.shared());
        self.encode(g, xv)
    }

    /// Decoder hidden states for a bos-prefixed prefix.
    pub fn decoder_hidden(&self, g: &mut Graph, c_asr: Var, prefix: &[usize]) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Config("decoder prefix must begin with bos".into()));
        }
        self.vocab.check(prefix)?;
        self.decoder.hidden(g, &self.store, prefix, &[Source::new(c_asr)])
    }

    pub fn logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.decoder.logits(g, &self.store, h)
    }

    /// Next-token distribution for one decoder hidden row.
    pub fn token_posterior(&self, h_row: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(1, h_row.len(), h_row.to_vec())?);
        let l = self.logits(&mut g, h)?;
        Ok(softmax_slice(g.value(l).data()))
    }

    /// Natural-log likelihood of `s` = [bos, …, eos] given the features.
    pub fn sequence_log_likelihood(&self, x: &FeatureSequence, s: &[usize]) -> Result<f64> {
        if s.len() < 2 {
            return Err(Error::Length("asr_sequence_log_likelihood"));
        }
        let mut g = Graph::new();
        let c = self.encode_speech(&mut g, x)?;
        let h = self.decoder_hidden(&mut g, c, &s[..s.len() - 1])?;
        let l = self.logits(&mut g, h)?;
        let l = g.value(l);
        Ok((0..l.rows()).map(|r| log_softmax_slice(l.row(r))[s[r + 1]]).sum())
    }

    /// Teacher-forced loss on a transcript string, with token accuracy counts.
    pub fn loss(
        &self,
        g: &mut Graph,
        x: Var,
        transcript: &str,
        smoothing: f64,
    ) -> Result<(Var, usize, usize)> {
        let (input, target) = shift(&self.vocab.encode_chars(transcript));
        let c = self.encode(g, x)?;
        let h = self.decoder_hidden(g, c, &input)?;
        let l = self.logits(g, h)?;
        let correct = count_correct(g.value(l), &target);
        let loss = g.cross_entropy(l, &target, smoothing, None)?;
        Ok((loss, correct, target.len()))
    }

    /// Ranked transcriptions; `h_asr` is recomputed teacher-forced on each.
    pub fn transcribe(&self, x: &FeatureSequence, beam: usize, max_len: usize) -> Result<Vec<AsrOutput>> {
        let mut g = Graph::new();
        let c = self.encode_speech(&mut g, x)?;
        let c_asr = Arc::new(g.value(c).clone());
        let search = DecoderSearch {
            decoder: &self.decoder,
            store: &self.store,
            sources: vec![(Arc::clone(&c_asr), AttentionMask::none())],
            residual: None,
        };
        let hyps = beam_search(&search, beam, max_len, EOS)?;
        hyps.into_iter()
            .map(|h| {
                let h_asr = self.teacher_forced_hidden(&c_asr, &h.tokens)?;
                Ok(AsrOutput {
                    transcript: h.tokens,
                    c_asr: Arc::clone(&c_asr),
                    h_asr: Arc::new(h_asr),
                    log_prob: h.log_prob,
                    forced: h.forced,
                })
            })
            .collect()
    }

    /// Decoder hidden rows for an emitted sequence, one per token.
    pub fn teacher_forced_hidden(&self, c_asr: &Arc<Tensor>, emitted: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = g.shared_constant(Arc::clone(c_asr));
        let h = self.decoder_hidden(&mut g, c, &prefix_for(emitted))?;
        Ok(g.value(h).clone())
    }

    pub fn text(&self, transcript: &[usize]) -> String {
        self.vocab.decode_chars(transcript)
    }
}
