//! Third pass: conditions on the acoustic embedding, the ASR decoder states
//! and the LM decoder states, and mixes its posteriors with the LM's.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{count_correct, shift, AsrOutput};
use crate::decoding::{beam_search, BeamHypothesis, DecoderSearch};
use crate::error::{Error, Result};
use crate::lm::LmOutput;
use crate::nn::{AttentionMask, BlockConfig, EncoderKind, EncoderStack, Linear, Source, TransformerDecoder};
use crate::tensor::{sigmoid, softmax_slice, Graph, ParamId, ParamStore, Tensor, Var};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMode {
    /// The encoder reads [c_asr ‖ h_asr ‖ h_lm]; the decoder attends to it alone.
    Concat,
    /// The encoder reads [h_asr ‖ h_lm]; the decoder attends to that and to c_asr.
    Xattn,
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntegrationMode::Concat => "concat",
            IntegrationMode::Xattn => "xattn",
        })
    }
}

impl FromStr for IntegrationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(IntegrationMode::Concat),
            "xattn" => Ok(IntegrationMode::Xattn),
            _ => Err(Error::Config(format!("unknown integration mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub mask_h_asr: bool,
    pub mask_c_asr: bool,
    pub mask_h_lm: bool,
    pub residual: bool,
    pub teacher_force_transcript: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            mask_h_asr: false,
            mask_c_asr: false,
            mask_h_lm: false,
            residual: true,
            teacher_force_transcript: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelConfig {
    pub mode: IntegrationMode,
    pub block: BlockConfig,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lm_dim: usize,
}

impl DelConfig {
    pub fn new(mode: IntegrationMode, block: BlockConfig, lm_dim: usize) -> Self {
        DelConfig {
            mode,
            block,
            enc_layers: 2,
            dec_layers: 2,
            lm_dim,
        }
    }
}

/// Learnable mixing weight α = sigmoid(alpha_raw).
#[derive(Clone, Debug)]
pub struct CombinationHead {
    pub alpha_raw: ParamId,
}

impl CombinationHead {
    pub fn alpha(&self, store: &ParamStore) -> f64 {
        sigmoid(store.value(self.alpha_raw).item())
    }
}

/// softmax(α·del + (1−α)·lm) with the residual on and an LM row present,
/// softmax(del) otherwise.
pub fn combine_posteriors(del: &[f64], lm: Option<&[f64]>, alpha: f64, residual: bool) -> Result<Vec<f64>> {
    Ok(softmax_slice(&combine_logits(del, lm, alpha, residual)?))
}

pub(crate) fn combine_logits(del: &[f64], lm: Option<&[f64]>, alpha: f64, residual: bool) -> Result<Vec<f64>> {
    match lm {
        Some(lm) if residual => {
            if lm.len() != del.len() {
                return Err(Error::dim("combine_posteriors", &[del.len()], &[lm.len()]));
            }
            Ok(del.iter().zip(lm).map(|(d, l)| alpha * d + (1.0 - alpha) * l).collect())
        }
        _ => Ok(del.to_vec()),
    }
}

/// Per-utterance inputs from the frozen first two passes.
#[derive(Clone, Debug)]
pub struct DelInputs {
    pub c_asr: Arc<Tensor>,
    pub h_asr: Arc<Tensor>,
    pub h_lm: Arc<Tensor>,
    pub lm_logits: Arc<Tensor>,
}

impl DelInputs {
    pub fn from_outputs(asr: &AsrOutput, lm: &LmOutput) -> Self {
        DelInputs {
            c_asr: Arc::clone(&asr.c_asr),
            h_asr: Arc::clone(&asr.h_asr),
            h_lm: Arc::clone(&lm.h_lm),
            lm_logits: Arc::clone(&lm.logits),
        }
    }
}

/// The same inputs as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct DelVars {
    pub c_asr: Var,
    pub h_asr: Var,
    pub h_lm: Var,
    pub lm_logits: Var,
}

impl DelVars {
    pub fn constants(g: &mut Graph, x: &DelInputs) -> Self {
        DelVars {
            c_asr: g.shared_constant(Arc::clone(&x.c_asr)),
            h_asr: g.shared_constant(Arc::clone(&x.h_asr)),
            h_lm: g.shared_constant(Arc::clone(&x.h_lm)),
            lm_logits: g.shared_constant(Arc::clone(&x.lm_logits)),
        }
    }
}

const SEG_C_ASR: usize = 0;
const SEG_H_ASR: usize = 1;
const SEG_H_LM: usize = 2;

#[derive(Clone, Debug)]
pub struct DelModel {
    pub cfg: DelConfig,
    pub store: ParamStore,
    pub lm_proj: Linear,
    seg_embed: ParamId,
    encoder: EncoderStack,
    pub decoder: TransformerDecoder,
    pub head: CombinationHead,
}

impl DelModel {
    pub fn new(cfg: DelConfig, lm_vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.block.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.block.dim;
        let lm_proj = Linear::new(&mut store, "del.lm_proj", cfg.lm_dim, d, true, &mut rng)?;
        let seg = Tensor::matrix(3, d, (0..3 * d).map(|_| rng.random_range(-0.1..0.1)).collect())?;
        let seg_embed = store.add("del.segment_embed", seg)?;
        let (kind, n_sources) = match cfg.mode {
            IntegrationMode::Concat => (EncoderKind::Conformer, 1),
            IntegrationMode::Xattn => (EncoderKind::Transformer, 2),
        };
        let encoder = EncoderStack::new(&mut store, "del.encoder", kind, cfg.enc_layers, &cfg.block, &mut rng)?;
        let decoder = TransformerDecoder::new(&mut store, "del.decoder", lm_vocab_size, cfg.dec_layers, &cfg.block, n_sources, &mut rng)?;
        let alpha_raw = store.add("del.alpha_raw", Tensor::scalar(0.0))?;
        Ok(DelModel {
            cfg,
            store,
            lm_proj,
            seg_embed,
            encoder,
            decoder,
            head: CombinationHead { alpha_raw },
        })
    }

    pub fn mode(&self) -> IntegrationMode {
        self.cfg.mode
    }

    pub fn alpha(&self) -> f64 {
        self.head.alpha(&self.store)
    }

    pub fn project_lm_hidden(&self, g: &mut Graph, h_lm: Var) -> Result<Var> {
        self.lm_proj.forward(g, &self.store, h_lm)
    }

    /// Zeroes the content when masked, then adds the segment's type embedding.
    fn segment(&self, g: &mut Graph, x: Var, seg: usize, masked: bool) -> Result<Var> {
        let d = self.cfg.block.dim;
        if g.value(x).cols() != d {
            return Err(Error::dim("integrate", &[d], g.shape(x)));
        }
        let rows = g.value(x).rows();
        let x = if masked { g.scale(x, 0.0) } else { x };
        let table = g.param(&self.store, self.seg_embed);
        let e = g.gather_rows(table, &vec![seg; rows])?;
        g.add(x, e)
    }

    /// Deliberation encoder over [c_asr ‖ h_asr ‖ h_lm_proj], length T+N+O.
    pub fn concat_integrate(
        &self,
        g: &mut Graph,
        c_asr: Var,
        h_asr: Var,
        h_lm_proj: Var,
        flags: &AblationFlags,
    ) -> Result<Var> {
        let a = self.segment(g, c_asr, SEG_C_ASR, flags.mask_c_asr)?;
        let b = self.segment(g, h_asr, SEG_H_ASR, flags.mask_h_asr)?;
        let c = self.segment(g, h_lm_proj, SEG_H_LM, flags.mask_h_lm)?;
        let x = g.concat_rows(&[a, b, c])?;
        self.encoder.forward(g, &self.store, x, &AttentionMask::none())
    }

    /// Deliberation encoder over [h_asr ‖ h_lm_proj], length N+O.
    pub fn cross_att_integrate(&self, g: &mut Graph, h_asr: Var, h_lm_proj: Var, flags: &AblationFlags) -> Result<Var> {
        let b = self.segment(g, h_asr, SEG_H_ASR, flags.mask_h_asr)?;
        let c = self.segment(g, h_lm_proj, SEG_H_LM, flags.mask_h_lm)?;
        let x = g.concat_rows(&[b, c])?;
        self.encoder.forward(g, &self.store, x, &AttentionMask::none())
    }

    /// The joint embedding c_del for this model's mode.
    pub fn integrate(&self, g: &mut Graph, v: &DelVars, flags: &AblationFlags) -> Result<Var> {
        let p = self.project_lm_hidden(g, v.h_lm)?;
        match self.cfg.mode {
            IntegrationMode::Concat => self.concat_integrate(g, v.c_asr, v.h_asr, p, flags),
            IntegrationMode::Xattn => self.cross_att_integrate(g, v.h_asr, p, flags),
        }
    }

    /// Decoder sources in attention order. Concatenation mode takes no
    /// separate c_asr; cross-attention mode takes it unless masked.
    fn sources<T: Clone>(&self, c_del: T, c_asr: Option<T>, flags: &AblationFlags) -> Result<Vec<T>> {
        match (self.cfg.mode, c_asr) {
            (IntegrationMode::Concat, None) => Ok(vec![c_del]),
            (IntegrationMode::Concat, Some(_)) => Err(Error::Config(
                "concatenation mode takes c_asr inside the joint embedding".into(),
            )),
            (IntegrationMode::Xattn, _) if flags.mask_c_asr => Ok(vec![c_del]),
            (IntegrationMode::Xattn, Some(c)) => Ok(vec![c_del, c]),
            (IntegrationMode::Xattn, None) => Err(Error::Config("cross-attention mode needs c_asr".into())),
        }
    }

    pub fn decoder_hidden(
        &self,
        g: &mut Graph,
        c_del: Var,
        c_asr: Option<Var>,
        prefix: &[usize],
        flags: &AblationFlags,
    ) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Config("decoder prefix must begin with bos".into()));
        }
        let srcs: Vec<Source> = self.sources(c_del, c_asr, flags)?.into_iter().map(Source::new).collect();
        self.decoder.hidden(g, &self.store, prefix, &srcs)
    }

    fn c_asr_arg<T>(&self, c_asr: T) -> Option<T> {
        match self.cfg.mode {
            IntegrationMode::Concat => None,
            IntegrationMode::Xattn => Some(c_asr),
        }
    }

    /// Teacher-forced decoder logits and final combined logits for `prefix`.
    /// Rows at positions the LM logits do not cover use the decoder alone.
    pub fn forward(&self, g: &mut Graph, v: &DelVars, prefix: &[usize], flags: &AblationFlags) -> Result<(Var, Var)> {
        let c_del = self.integrate(g, v, flags)?;
        let h = self.decoder_hidden(g, c_del, self.c_asr_arg(v.c_asr), prefix, flags)?;
        let del = self.decoder.logits(g, &self.store, h)?;
        if !flags.residual {
            return Ok((del, del));
        }
        let (rows, o) = (g.value(del).rows(), g.value(v.lm_logits).rows());
        let covered = rows.min(o);
        let a_raw = g.param(&self.store, self.head.alpha_raw);
        let a = g.sigmoid(a_raw);
        let neg = g.scale(a, -1.0);
        let one_minus = g.add_const(neg, 1.0);
        let d_head = g.slice_rows(del, 0, covered)?;
        let l_head = g.slice_rows(v.lm_logits, 0, covered)?;
        let x = g.scale_by(d_head, a)?;
        let y = g.scale_by(l_head, one_minus)?;
        let mut combined = g.add(x, y)?;
        if covered < rows {
            let tail = g.slice_rows(del, covered, rows - covered)?;
            combined = g.concat_rows(&[combined, tail])?;
        }
        Ok((del, combined))
    }

    /// Teacher-forced loss on gold labels (without eos) against the combined
    /// posterior, with token accuracy counts.
    pub fn loss(
        &self,
        g: &mut Graph,
        v: &DelVars,
        labels: &[usize],
        flags: &AblationFlags,
        smoothing: f64,
    ) -> Result<(Var, usize, usize)> {
        let (input, target) = shift(labels);
        let (_, combined) = self.forward(g, v, &input, flags)?;
        let correct = count_correct(g.value(combined), &target);
        let loss = g.cross_entropy(combined, &target, smoothing, None)?;
        Ok((loss, correct, target.len()))
    }

    /// Beam search over the combined posterior.
    pub fn deliberate(
        &self,
        inputs: &DelInputs,
        flags: &AblationFlags,
        beam: usize,
        max_len: usize,
    ) -> Result<Vec<BeamHypothesis>> {
        let mut g = Graph::new();
        let v = DelVars::constants(&mut g, inputs);
        let c_del = self.integrate(&mut g, &v, flags)?;
        let c_del = Arc::new(g.value(c_del).clone());
        let srcs = self
            .sources(c_del, self.c_asr_arg(Arc::clone(&inputs.c_asr)), flags)?
            .into_iter()
            .map(|t| (t, AttentionMask::none()))
            .collect();
        let search = DecoderSearch {
            decoder: &self.decoder,
            store: &self.store,
            sources: srcs,
            residual: flags.residual.then(|| (Arc::clone(&inputs.lm_logits), self.alpha())),
        };
        beam_search(&search, beam, max_len, EOS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_param;

    fn cfg(mode: IntegrationMode, lm_dim: usize) -> DelConfig {
        DelConfig {
            mode,
            block: BlockConfig {
                dim: 4,
                heads: 2,
                ffn_dim: 8,
                dropout: 0.0,
                conv_kernel: 3,
            },
            enc_layers: 1,
            dec_layers: 1,
            lm_dim,
        }
    }

    fn mat(r: usize, c: usize, seed: u64) -> Arc<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
    }

    fn inputs(o: usize) -> DelInputs {
        DelInputs {
            c_asr: mat(6, 4, 1),
            h_asr: mat(3, 4, 2),
            h_lm: mat(o, 5, 3),
            lm_logits: mat(o, 7, 4),
        }
    }

    #[test]
    fn combination_examples() {
        let p = combine_posteriors(&[2.0, 0.0], Some(&[0.0, 2.0]), sigmoid(0.0), true).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let d = [1.0, -0.5, 0.3];
        let l = [-1.0, 2.0, 0.0];
        let hi = combine_posteriors(&d, Some(&l), sigmoid(20.0), true).unwrap();
        let lo = combine_posteriors(&d, Some(&l), sigmoid(-20.0), true).unwrap();
        let (sd, sl) = (softmax_slice(&d), softmax_slice(&l));
        for i in 0..3 {
            assert!((hi[i] - sd[i]).abs() < 1e-6);
            assert!((lo[i] - sl[i]).abs() < 1e-6);
        }
        assert_eq!(combine_posteriors(&d, Some(&l), 0.3, false).unwrap(), sd);
        assert!(combine_posteriors(&d, Some(&l[..2]), 0.3, true).is_err());
    }

    #[test]
    fn projection_identity_and_zero() {
        let mut m = DelModel::new(cfg(IntegrationMode::Concat, 4), 7, 0).unwrap();
        *m.store.value_mut(m.lm_proj.weight) = Tensor::identity(4);
        zero_param(&mut m.store, m.lm_proj.bias.unwrap());
        let mut g = Graph::new();
        let h = g.constant((*mat(3, 4, 9)).clone());
        let p = m.project_lm_hidden(&mut g, h).unwrap();
        assert_eq!(g.value(p), g.value(h));
        zero_param(&mut m.store, m.lm_proj.weight);
        let mut g = Graph::new();
        let h = g.constant((*mat(3, 4, 9)).clone());
        let p = m.project_lm_hidden(&mut g, h).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_length_is_t_plus_n_plus_o() {
        let m = DelModel::new(cfg(IntegrationMode::Concat, 5), 7, 1).unwrap();
        for o in [0, 2] {
            let mut g = Graph::new();
            let v = DelVars::constants(&mut g, &inputs(o));
            let c = m.integrate(&mut g, &v, &AblationFlags::default()).unwrap();
            assert_eq!(g.value(c).rows(), 6 + 3 + o);
        }
        let mx = DelModel::new(cfg(IntegrationMode::Xattn, 5), 7, 1).unwrap();
        let mut g = Graph::new();
        let v = DelVars::constants(&mut g, &inputs(2));
        let c = mx.integrate(&mut g, &v, &AblationFlags::default()).unwrap();
        assert_eq!(g.value(c).rows(), 3 + 2);
    }

    #[test]
    fn masked_sources_do_not_matter() {
        for mode in [IntegrationMode::Concat, IntegrationMode::Xattn] {
            let m = DelModel::new(cfg(mode, 5), 7, 2).unwrap();
            let run = |x: &DelInputs, flags: &AblationFlags| {
                let mut g = Graph::new();
                let v = DelVars::constants(&mut g, x);
                let (_, l) = m.forward(&mut g, &v, &[BOS, 5, 6], flags).unwrap();
                g.value(l).clone()
            };
            let base = inputs(2);
            let all = AblationFlags {
                mask_h_asr: true,
                mask_c_asr: true,
                mask_h_lm: true,
                ..AblationFlags::default()
            };
            let mut other = base.clone();
            other.c_asr = mat(6, 4, 11);
            other.h_asr = mat(3, 4, 12);
            other.h_lm = mat(2, 5, 13);
            assert_eq!(run(&base, &all), run(&other, &all));
            let only_lm = AblationFlags {
                mask_h_lm: true,
                ..AblationFlags::default()
            };
            let mut g1 = Graph::new();
            let v1 = DelVars::constants(&mut g1, &base);
            let mut lm_changed = base.clone();
            lm_changed.h_lm = mat(2, 5, 14);
            let mut g2 = Graph::new();
            let v2 = DelVars::constants(&mut g2, &lm_changed);
            let p1 = m.project_lm_hidden(&mut g1, v1.h_lm).unwrap();
            let p2 = m.project_lm_hidden(&mut g2, v2.h_lm).unwrap();
            if mode == IntegrationMode::Xattn {
                let a = m.cross_att_integrate(&mut g1, v1.h_asr, p1, &only_lm).unwrap();
                let b = m.cross_att_integrate(&mut g2, v2.h_asr, p2, &only_lm).unwrap();
                assert_eq!(g1.value(a), g2.value(b));
            }
        }
    }

    #[test]
    fn masked_c_asr_equals_single_source_decoding() {
        let m = DelModel::new(cfg(IntegrationMode::Xattn, 5), 7, 3).unwrap();
        let flags = AblationFlags {
            mask_c_asr: true,
            ..AblationFlags::default()
        };
        let mut g = Graph::new();
        let v = DelVars::constants(&mut g, &inputs(2));
        let c_del = m.integrate(&mut g, &v, &flags).unwrap();
        let a = m.decoder_hidden(&mut g, c_del, Some(v.c_asr), &[BOS, 4], &flags).unwrap();
        let b = m.decoder.hidden(&mut g, &m.store, &[BOS, 4], &[Source::new(c_del)]).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let concat = DelModel::new(cfg(IntegrationMode::Concat, 5), 7, 3).unwrap();
        assert!(matches!(
            concat.decoder_hidden(&mut g, c_del, Some(v.c_asr), &[BOS], &flags),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn residual_off_is_plain_decoder_softmax() {
        let m = DelModel::new(cfg(IntegrationMode::Xattn, 5), 7, 4).unwrap();
        let flags = AblationFlags {
            residual: false,
            ..AblationFlags::default()
        };
        let mut g = Graph::new();
        let v = DelVars::constants(&mut g, &inputs(2));
        let (del, comb) = m.forward(&mut g, &v, &[BOS, 5, 6, 4], &flags).unwrap();
        assert_eq!(g.value(del), g.value(comb));
    }

    #[test]
    fn combined_rows_beyond_lm_use_decoder_only() {
        let m = DelModel::new(cfg(IntegrationMode::Concat, 5), 7, 5).unwrap();
        let mut g = Graph::new();
        let v = DelVars::constants(&mut g, &inputs(2));
        let (del, comb) = m.forward(&mut g, &v, &[BOS, 5, 6, 4], &AblationFlags::default()).unwrap();
        assert_eq!(g.value(comb).rows(), 4);
        assert_eq!(g.value(comb).row(3), g.value(del).row(3));
        let a = m.alpha();
        let want = combine_logits(g.value(del).row(1), Some(g.value(v.lm_logits).row(1)), a, true).unwrap();
        for (x, y) in want.iter().zip(g.value(comb).row(1)) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
