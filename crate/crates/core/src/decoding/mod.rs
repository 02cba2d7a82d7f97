//! Beam search shared by all passes and the three-pass orchestration.

mod beam;

pub use beam::{beam_search, enumerate_all, greedy, rank, BeamHypothesis, StepModel};

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::asr::{AsrModel, AsrOutput, FeatureSequence};
use crate::deliberation::{combine_logits, AblationFlags, DelInputs, DelModel, IntegrationMode};
use crate::error::{Error, Result};
use crate::lm::{encoder_input, transliterate, LmModel, LmOutput};
use crate::nn::{AttentionMask, DecoderState, TransformerDecoder};
use crate::tensor::{log_softmax_slice, ParamStore, Tensor};
use crate::vocab::BOS;

/// Incremental search over a [`TransformerDecoder`], optionally mixing its
/// logits with fixed per-position logits `(rows, α)` while positions last.
pub struct DecoderSearch<'a> {
    pub decoder: &'a TransformerDecoder,
    pub store: &'a ParamStore,
    pub sources: Vec<(Arc<Tensor>, AttentionMask)>,
    pub residual: Option<(Arc<Tensor>, f64)>,
}

impl DecoderSearch<'_> {
    fn next(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>)> {
        let (st, _, logits) = self.decoder.step(self.store, state, token)?;
        let o = st.pos - 1;
        let logits = match &self.residual {
            Some((lm, alpha)) if o < lm.rows() => combine_logits(&logits, Some(lm.row(o)), *alpha, true)?,
            _ => logits,
        };
        Ok((st, log_softmax_slice(&logits)))
    }
}

impl StepModel for DecoderSearch<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<(DecoderState, Vec<f64>)> {
        let st = self.decoder.start(self.store, &self.sources)?;
        self.next(&st, BOS)
    }

    fn advance(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>)> {
        self.next(state, token)
    }
}

/// The three trained subnetworks.
#[derive(Clone, Debug)]
pub struct Models {
    pub asr: AsrModel,
    pub lm: LmModel,
    pub del: DelModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beams: [usize; 3],
    pub max_len: [usize; 3],
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beams: [4, 4, 4],
            max_len: [64, 24, 24],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PassTimings {
    pub asr_ms: f64,
    pub lm_ms: f64,
    pub del_ms: f64,
}

#[derive(Clone, Debug)]
pub struct ThreePassResult {
    pub id: String,
    pub asr: AsrOutput,
    pub lm: LmOutput,
    pub final_hyps: Vec<BeamHypothesis>,
    pub timings: PassTimings,
}

impl ThreePassResult {
    pub fn best(&self) -> &BeamHypothesis {
        &self.final_hyps[0]
    }
}

fn empty(pass: &'static str) -> Error {
    Error::Pipeline {
        pass,
        detail: "no hypotheses".into(),
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Passes 1 and 2: top transcript, then top label sequence from its words.
pub fn first_two_passes(
    x: &FeatureSequence,
    asr: &AsrModel,
    lm: &LmModel,
    cfg: &DecodeConfig,
) -> Result<(AsrOutput, LmOutput, PassTimings)> {
    let t = Instant::now();
    let a = asr
        .transcribe(x, cfg.beams[0], cfg.max_len[0])?
        .into_iter()
        .next()
        .ok_or_else(|| empty("asr"))?;
    let asr_ms = ms(t);
    let t = Instant::now();
    let words = transliterate(&a.transcript, &asr.vocab, &lm.vocab);
    let l = lm
        .predict_labels(&encoder_input(&words), cfg.beams[1], cfg.max_len[1])?
        .into_iter()
        .next()
        .ok_or_else(|| empty("lm"))?;
    let lm_ms = ms(t);
    Ok((a, l, PassTimings { asr_ms, lm_ms, del_ms: 0.0 }))
}

/// Pass 3 on the outputs of the first two.
pub fn third_pass(
    del: &DelModel,
    asr: &AsrOutput,
    lm: &LmOutput,
    cfg: &DecodeConfig,
    flags: &AblationFlags,
) -> Result<Vec<BeamHypothesis>> {
    let hyps = del.deliberate(&DelInputs::from_outputs(asr, lm), flags, cfg.beams[2], cfg.max_len[2])?;
    if hyps.is_empty() {
        return Err(empty("deliberation"));
    }
    Ok(hyps)
}

/// Top transcript → words → top LM labels → deliberation, each pass fed
/// only the best hypothesis of the one before.
pub fn three_pass_decode(
    id: &str,
    x: &FeatureSequence,
    models: &Models,
    cfg: &DecodeConfig,
    flags: &AblationFlags,
) -> Result<ThreePassResult> {
    let (asr, lm, mut timings) = first_two_passes(x, &models.asr, &models.lm, cfg)?;
    let t = Instant::now();
    let final_hyps = third_pass(&models.del, &asr, &lm, cfg, flags)?;
    timings.del_ms = ms(t);
    Ok(ThreePassResult {
        id: id.to_string(),
        asr,
        lm,
        final_hyps,
        timings,
    })
}

/// One line of the decode report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub transcript: String,
    pub asr_log_prob: f64,
    pub lm_labels_text: String,
    pub lm_log_prob: f64,
    pub labels_text: String,
    pub log_prob: f64,
    pub alpha: f64,
    pub mode: IntegrationMode,
    pub flags: AblationFlags,
    pub timings: PassTimings,
}

impl DecodeRecord {
    pub fn new(r: &ThreePassResult, models: &Models, flags: &AblationFlags) -> Self {
        DecodeRecord {
            id: r.id.clone(),
            transcript: models.asr.text(&r.asr.transcript),
            asr_log_prob: r.asr.log_prob,
            lm_labels_text: models.lm.text(&r.lm.labels),
            lm_log_prob: r.lm.log_prob,
            labels_text: models.lm.text(&r.best().tokens),
            log_prob: r.best().log_prob,
            alpha: models.del.alpha(),
            mode: models.del.mode(),
            flags: *flags,
            timings: r.timings,
        }
    }
}
