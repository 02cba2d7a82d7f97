//! Three-step curriculum: ASR alone, LM alone on gold transcripts, then the
//! deliberation network on top of both frozen subnetworks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{AsrConfig, AsrModel, FeatureSequence};
use crate::deliberation::{AblationFlags, DelConfig, DelInputs, DelModel, DelVars, IntegrationMode};
use crate::error::{Error, Result};
use crate::lm::{encoder_input, transliterate, LmConfig, LmModel};
use crate::nn::BlockConfig;
use crate::synth::{GrammarSpec, Utterance};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Var};
use crate::vocab::{Vocabulary, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step: u8,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub seed: u64,
    pub warmup: usize,
    pub clip: f64,
    pub flags: AblationFlags,
    pub mode: IntegrationMode,
    /// Augmentation bands for step 1.
    pub time_masks: usize,
    pub time_mask_width: usize,
    pub feat_masks: usize,
    pub feat_mask_width: usize,
    /// Evaluate teacher-forced accuracy every this many steps (0 = never) and
    /// stop once it reaches `target_accuracy`.
    pub eval_every: usize,
    pub target_accuracy: f64,
    /// Width of the ASR and deliberation subnetworks, which share a space.
    pub asr_dim: usize,
    pub lm_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub conv_kernel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step: 1,
            lr: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            label_smoothing: 0.1,
            dropout: 0.1,
            seed: 0,
            warmup: 100,
            clip: 5.0,
            flags: AblationFlags::default(),
            mode: IntegrationMode::Xattn,
            time_masks: 1,
            time_mask_width: 3,
            feat_masks: 1,
            feat_mask_width: 2,
            eval_every: 0,
            target_accuracy: 1.0,
            asr_dim: 48,
            lm_dim: 64,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            conv_kernel: 7,
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

impl TrainConfig {
    /// Defaults for a curriculum step; step 2 uses a smaller learning rate.
    pub fn for_step(step: u8) -> Result<Self> {
        if !(1..=3).contains(&step) {
            return Err(Error::Config(format!("step must be 1, 2 or 3, got {step}")));
        }
        Ok(TrainConfig {
            step,
            lr: if step == 2 { 1e-4 } else { 1e-3 },
            ..TrainConfig::default()
        })
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key.trim() {
            "step" => {
                let s: u8 = parse_val(key, v)?;
                if !(1..=3).contains(&s) {
                    return Err(Error::Config(format!("step must be 1, 2 or 3, got {s}")));
                }
                self.step = s;
            }
            "lr" => self.lr = parse_val(key, v)?,
            "batch_size" => self.batch_size = parse_val(key, v)?,
            "max_steps" => self.max_steps = parse_val(key, v)?,
            "label_smoothing" => self.label_smoothing = parse_val(key, v)?,
            "dropout" => self.dropout = parse_val(key, v)?,
            "seed" => self.seed = parse_val(key, v)?,
            "warmup" => self.warmup = parse_val(key, v)?,
            "clip" => self.clip = parse_val(key, v)?,
            "mode" => self.mode = v.parse()?,
            "mask_h_asr" => self.flags.mask_h_asr = parse_val(key, v)?,
            "mask_c_asr" => self.flags.mask_c_asr = parse_val(key, v)?,
            "mask_h_lm" => self.flags.mask_h_lm = parse_val(key, v)?,
            "residual" => self.flags.residual = parse_val(key, v)?,
            "teacher_force_transcript" => self.flags.teacher_force_transcript = parse_val(key, v)?,
            "time_masks" => self.time_masks = parse_val(key, v)?,
            "time_mask_width" => self.time_mask_width = parse_val(key, v)?,
            "feat_masks" => self.feat_masks = parse_val(key, v)?,
            "feat_mask_width" => self.feat_mask_width = parse_val(key, v)?,
            "eval_every" => self.eval_every = parse_val(key, v)?,
            "target_accuracy" => self.target_accuracy = parse_val(key, v)?,
            "asr_dim" => self.asr_dim = parse_val(key, v)?,
            "lm_dim" => self.lm_dim = parse_val(key, v)?,
            "heads" => self.heads = parse_val(key, v)?,
            "enc_layers" => self.enc_layers = parse_val(key, v)?,
            "dec_layers" => self.dec_layers = parse_val(key, v)?,
            "conv_kernel" => self.conv_kernel = parse_val(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, step: u8) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::for_step(step)?;
        cfg.apply_text(&text)?;
        cfg.step = step;
        Ok(cfg)
    }

    /// Round-trips through [`TrainConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let f = &self.flags;
        BTreeMap::from([
            ("step", self.step.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
            ("warmup", self.warmup.to_string()),
            ("clip", self.clip.to_string()),
            ("mode", self.mode.to_string()),
            ("mask_h_asr", f.mask_h_asr.to_string()),
            ("mask_c_asr", f.mask_c_asr.to_string()),
            ("mask_h_lm", f.mask_h_lm.to_string()),
            ("residual", f.residual.to_string()),
            ("teacher_force_transcript", f.teacher_force_transcript.to_string()),
            ("time_masks", self.time_masks.to_string()),
            ("time_mask_width", self.time_mask_width.to_string()),
            ("feat_masks", self.feat_masks.to_string()),
            ("feat_mask_width", self.feat_mask_width.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("target_accuracy", self.target_accuracy.to_string()),
            ("asr_dim", self.asr_dim.to_string()),
            ("lm_dim", self.lm_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip {} must be positive", self.clip)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0,1)", self.label_smoothing)));
        }
        self.block(self.asr_dim).validate()?;
        self.block(self.lm_dim).validate()
    }

    fn block(&self, dim: usize) -> BlockConfig {
        BlockConfig {
            dim,
            heads: self.heads,
            ffn_dim: 2 * dim,
            dropout: self.dropout,
            conv_kernel: self.conv_kernel,
        }
    }

    pub fn asr_config(&self, feat_dim: usize) -> AsrConfig {
        AsrConfig {
            feat_dim,
            block: self.block(self.asr_dim),
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            block: self.block(self.lm_dim),
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
        }
    }

    pub fn del_config(&self) -> DelConfig {
        DelConfig {
            mode: self.mode,
            block: self.block(self.asr_dim),
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            lm_dim: self.lm_dim,
        }
    }
}

/// Character vocabulary for the ASR pass and word vocabulary for the rest.
pub fn build_vocabularies(grammar: &GrammarSpec) -> (Vocabulary, Vocabulary) {
    let words = grammar.words();
    let lm = Vocabulary::words(words.iter().map(String::as_str), &grammar.labels());
    (Vocabulary::characters(), lm)
}

/// Zeroes `n_time` random frame bands and `n_feat` random feature bands.
/// Band widths are drawn from `0..=width`, capped one below the extent.
pub fn spec_mask_augment(
    x: &FeatureSequence,
    n_time: usize,
    n_feat: usize,
    widths: (usize, usize),
    seed: u64,
) -> FeatureSequence {
    if n_time == 0 && n_feat == 0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = x.frames().clone();
    let (rows, cols) = (t.rows(), t.cols());
    let band = |extent: usize, width: usize, rng: &mut ChaCha8Rng| {
        let w = rng.random_range(0..=width.min(extent.saturating_sub(1)));
        let start = rng.random_range(0..=extent - w);
        start..start + w
    };
    for _ in 0..n_time {
        for r in band(rows, widths.0, &mut rng) {
            t.row_mut(r).fill(0.0);
        }
    }
    for _ in 0..n_feat {
        let b = band(cols, widths.1, &mut rng);
        for r in 0..rows {
            t.row_mut(r)[b.clone()].fill(0.0);
        }
    }
    FeatureSequence::new(t).expect("masking keeps values finite")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub n_utterances: usize,
    pub curve: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub final_accuracy: f64,
    pub checkpoint_hash: String,
    /// Frozen store hashes around step 3: [asr before, asr after, lm before, lm after].
    pub frozen_hashes: Option<[String; 4]>,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.curve.iter().map(|s| s.loss).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Teacher-forced loss of one item: (loss, correct tokens, total tokens).
type ItemLoss<'a, M> = dyn Fn(&M, &mut Graph, usize, u64) -> Result<(Var, usize, usize)> + 'a;

/// Mini-batch Adam over `n` items. Each item gets its own graph; gradients
/// are accumulated weighted by token count, clipped, and applied with linear
/// warmup. Returns the curve and the accuracy evaluations.
fn optimize<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    n: usize,
    cfg: &TrainConfig,
    item_loss: &ItemLoss<'_, M>,
) -> Result<(Vec<StepLog>, Vec<EvalLog>)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("no training data".into()));
    }
    let mut adam = Adam::new(store(model), AdamConfig::default());
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    for step in 0..cfg.max_steps {
        store(model).zero_grad();
        let (mut loss_sum, mut correct, mut total) = (0.0, 0, 0);
        for _ in 0..cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let mut g = Graph::training(mix(cfg.seed, step as u64, idx as u64));
            let (loss, c, t) = item_loss(model, &mut g, idx, mix(cfg.seed ^ 0xa5a5, step as u64, idx as u64))?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { step, loss: lv });
            }
            let grads = g.backward(loss)?;
            store(model).accumulate(&g, &grads, t as f64);
            loss_sum += lv * t as f64;
            correct += c;
            total += t;
        }
        let s = store(model);
        s.scale_grads(1.0 / total as f64);
        let norm = s.grad_norm();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        if norm > cfg.clip {
            s.scale_grads(cfg.clip / norm);
        }
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        adam.step(s, lr);
        curve.push(StepLog {
            step,
            loss: loss_sum / total as f64,
            accuracy: correct as f64 / total as f64,
            lr,
            grad_norm: norm,
        });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let acc = eval_accuracy(model, n, item_loss)?;
            evals.push(EvalLog { step: step + 1, accuracy: acc });
            if acc >= cfg.target_accuracy {
                break;
            }
        }
    }
    Ok((curve, evals))
}

/// Token accuracy over all items with dropout and augmentation off.
fn eval_accuracy<M>(model: &M, n: usize, item_loss: &ItemLoss<'_, M>) -> Result<f64> {
    let (mut c, mut t) = (0, 0);
    for i in 0..n {
        let mut g = Graph::new();
        let (_, ci, ti) = item_loss(model, &mut g, i, 0)?;
        c += ci;
        t += ti;
    }
    Ok(c as f64 / t.max(1) as f64)
}

fn asr_item<'a>(data: &'a [Utterance], cfg: &TrainConfig) -> impl Fn(&AsrModel, &mut Graph, usize, u64) -> Result<(Var, usize, usize)> + 'a {
    let (nt, nf, w) = (cfg.time_masks, cfg.feat_masks, (cfg.time_mask_width, cfg.feat_mask_width));
    let smoothing = cfg.label_smoothing;
    move |m: &AsrModel, g: &mut Graph, i: usize, seed: u64| {
        let u = &data[i];
        let x = if g.is_training() {
            g.shared_constant(spec_mask_augment(&u.features, nt, nf, w, seed).shared())
        } else {
            g.shared_constant(u.features.shared())
        };
        m.loss(g, x, &u.transcript, smoothing)
    }
}

/// Step 1: teacher-forced transcript cross-entropy, ASR parameters only.
pub fn train_step1_asr(model: &mut AsrModel, data: &[Utterance], cfg: &TrainConfig) -> Result<RunRecord> {
    let f = asr_item(data, cfg);
    let (curve, evals) = optimize(model, |m| &mut m.store, data.len(), cfg, &f)?;
    let final_accuracy = asr_teacher_forced_accuracy(model, data)?;
    Ok(RunRecord {
        config: cfg.clone(),
        n_utterances: data.len(),
        curve,
        evals,
        final_accuracy,
        checkpoint_hash: model.store.hash(),
        frozen_hashes: None,
    })
}

pub fn asr_teacher_forced_accuracy(model: &AsrModel, data: &[Utterance]) -> Result<f64> {
    let cfg = TrainConfig::default();
    eval_accuracy(model, data.len(), &asr_item(data, &cfg))
}

/// Gold LM encoder input and target labels (without eos) for one utterance.
pub fn lm_example(u: &Utterance, lm_vocab: &Vocabulary) -> (Vec<usize>, Vec<usize>) {
    let words = lm_vocab.encode_words(&u.transcript);
    (encoder_input(&words), lm_vocab.encode_words(&u.label_text()))
}

fn lm_item(data: &[Utterance], vocab: &Vocabulary, smoothing: f64) -> impl Fn(&LmModel, &mut Graph, usize, u64) -> Result<(Var, usize, usize)> {
    let examples: Vec<_> = data.iter().map(|u| lm_example(u, vocab)).collect();
    move |m: &LmModel, g: &mut Graph, i: usize, _| {
        let (s, y) = &examples[i];
        m.loss(g, s, y, smoothing)
    }
}

/// Step 2: label cross-entropy from gold transcripts. Features are never read.
pub fn train_step2_lm(model: &mut LmModel, data: &[Utterance], cfg: &TrainConfig) -> Result<RunRecord> {
    let f = lm_item(data, &model.vocab.clone(), cfg.label_smoothing);
    let (curve, evals) = optimize(model, |m| &mut m.store, data.len(), cfg, &f)?;
    let final_accuracy = lm_teacher_forced_accuracy(model, data)?;
    Ok(RunRecord {
        config: cfg.clone(),
        n_utterances: data.len(),
        curve,
        evals,
        final_accuracy,
        checkpoint_hash: model.store.hash(),
        frozen_hashes: None,
    })
}

pub fn lm_teacher_forced_accuracy(model: &LmModel, data: &[Utterance]) -> Result<f64> {
    eval_accuracy(model, data.len(), &lm_item(data, &model.vocab, 0.0))
}

/// Frozen first- and second-pass outputs for one utterance as seen during
/// step 3. With teacher forcing the ASR hidden states follow the gold
/// transcript and the LM reads it; otherwise both follow the greedy ASR
/// hypothesis. The LM decoder is teacher-forced on the gold labels so its
/// logits align row by row with the deliberation targets.
pub fn step3_inputs(asr: &AsrModel, lm: &LmModel, u: &Utterance, teacher_force: bool, asr_max_len: usize) -> Result<DelInputs> {
    let mut g = Graph::new();
    let c = asr.encode_speech(&mut g, &u.features)?;
    let c_asr = Arc::new(g.value(c).clone());
    let transcript = if teacher_force {
        let mut t = asr.vocab.encode_chars(&u.transcript);
        t.push(EOS);
        t
    } else {
        let hyps = asr.transcribe(&u.features, 1, asr_max_len)?;
        hyps.into_iter()
            .next()
            .ok_or_else(|| Error::Pipeline {
                pass: "asr",
                detail: format!("no hypothesis for {}", u.id),
            })?
            .transcript
    };
    let h_asr = Arc::new(asr.teacher_forced_hidden(&c_asr, &transcript)?);
    let words = transliterate(&transcript, &asr.vocab, &lm.vocab);
    let mut gold = lm.vocab.encode_words(&u.label_text());
    gold.push(EOS);
    let lm_out = lm.teacher_forced(&encoder_input(&words), &gold, 0.0, false)?;
    Ok(DelInputs {
        c_asr,
        h_asr,
        h_lm: lm_out.h_lm,
        lm_logits: lm_out.logits,
    })
}

/// Cached step-3 inputs and gold label targets for a corpus.
pub struct Step3Data {
    pub inputs: Vec<DelInputs>,
    pub labels: Vec<Vec<usize>>,
}

impl Step3Data {
    pub fn build(asr: &AsrModel, lm: &LmModel, data: &[Utterance], teacher_force: bool) -> Result<Self> {
        let mut inputs = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        for u in data {
            inputs.push(step3_inputs(asr, lm, u, teacher_force, 64)?);
            labels.push(lm.vocab.encode_words(&u.label_text()));
        }
        Ok(Step3Data { inputs, labels })
    }
}

fn del_item<'a>(d: &'a Step3Data, cfg: &TrainConfig) -> impl Fn(&DelModel, &mut Graph, usize, u64) -> Result<(Var, usize, usize)> + 'a {
    let (flags, smoothing) = (cfg.flags, cfg.label_smoothing);
    move |m: &DelModel, g: &mut Graph, i: usize, _| {
        let v = DelVars::constants(g, &d.inputs[i]);
        m.loss(g, &v, &d.labels[i], &flags, smoothing)
    }
}

/// Step 3 on precomputed inputs. Only the deliberation store is updated.
pub fn train_step3_cached(model: &mut DelModel, d: &Step3Data, cfg: &TrainConfig) -> Result<(Vec<StepLog>, Vec<EvalLog>, f64)> {
    if model.mode() != cfg.mode {
        return Err(Error::Config(format!("model mode {} but config mode {}", model.mode(), cfg.mode)));
    }
    let f = del_item(d, cfg);
    let (curve, evals) = optimize(model, |m| &mut m.store, d.inputs.len(), cfg, &f)?;
    let acc = eval_accuracy(model, d.inputs.len(), &f)?;
    Ok((curve, evals, acc))
}

/// Step 3: trains the deliberation encoder, decoder, projection and α on
/// gold labels with ASR and LM frozen. Any change to their parameters is a
/// hard failure.
pub fn train_step3_deliberation(
    model: &mut DelModel,
    asr: &AsrModel,
    lm: &LmModel,
    data: &[Utterance],
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let before = (asr.store.hash(), lm.store.hash());
    let d = Step3Data::build(asr, lm, data, cfg.flags.teacher_force_transcript)?;
    let (curve, evals, final_accuracy) = train_step3_cached(model, &d, cfg)?;
    let after = (asr.store.hash(), lm.store.hash());
    if before != after {
        return Err(Error::FrozenDrift(format!(
            "asr {} → {}, lm {} → {}",
            before.0, after.0, before.1, after.1
        )));
    }
    Ok(RunRecord {
        config: cfg.clone(),
        n_utterances: data.len(),
        curve,
        evals,
        final_accuracy,
        checkpoint_hash: model.store.hash(),
        frozen_hashes: Some([before.0, after.0, before.1, after.1]),
    })
}

/// Mean of each consecutive `window`-step block of a curve.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
