//! End-to-end runs: corpus splits, the three training steps, decoding of a
//! split and the comparison grids built on top of them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::{AsrModel, AsrOutput};
use crate::decoding::{first_two_passes, third_pass, DecodeConfig, PassTimings};
use crate::deliberation::{AblationFlags, DelModel, IntegrationMode};
use crate::error::{Error, Result};
use crate::lm::{LmModel, LmOutput};
use crate::metrics::{evaluate, EvalItem, MetricReport};
use crate::synth::{generate_corpus, make_codebook, GrammarSpec, NoiseProfile, Utterance, FEAT_DIM};
use crate::tensor::Tensor;
use crate::training::{
    build_vocabularies, train_step1_asr, train_step2_lm, train_step3_cached, RunRecord, Step3Data, TrainConfig,
};

const DEV_SALT: u64 = 0x6465_7673_706c_6974;

pub struct Splits {
    pub grammar: GrammarSpec,
    pub codebook: Tensor,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
}

/// Train and dev splits sharing one codebook; dev utterances come from an
/// independent seed stream.
pub fn make_splits(grammar: &GrammarSpec, n_train: usize, n_dev: usize, noise: &NoiseProfile, seed: u64) -> Result<Splits> {
    let codebook = make_codebook(seed, FEAT_DIM);
    let train = generate_corpus(grammar, n_train, seed, noise, &codebook, "train")?;
    let dev = generate_corpus(grammar, n_dev, seed ^ DEV_SALT, noise, &codebook, "dev")?;
    Ok(Splits {
        grammar: grammar.clone(),
        codebook,
        train,
        dev,
    })
}

/// Outputs of passes 1 and 2 for one utterance.
#[derive(Clone, Debug)]
pub struct FirstPass {
    pub asr: AsrOutput,
    pub lm: LmOutput,
    pub timings: PassTimings,
}

pub fn run_first_passes(asr: &AsrModel, lm: &LmModel, utts: &[Utterance], cfg: &DecodeConfig) -> Result<Vec<FirstPass>> {
    utts.par_iter()
        .map(|u| {
            let (a, l, timings) = first_two_passes(&u.features, asr, lm, cfg)?;
            Ok(FirstPass { asr: a, lm: l, timings })
        })
        .collect()
}

/// Best final label sequence per utterance.
pub fn run_third_pass(
    del: &DelModel,
    firsts: &[FirstPass],
    cfg: &DecodeConfig,
    flags: &AblationFlags,
) -> Result<Vec<Vec<usize>>> {
    firsts
        .par_iter()
        .map(|f| Ok(third_pass(del, &f.asr, &f.lm, cfg, flags)?.swap_remove(0).tokens))
        .collect()
}

/// Scoring inputs; `finals = None` scores the cascade (the LM's labels).
pub fn eval_items(
    utts: &[Utterance],
    firsts: &[FirstPass],
    finals: Option<&[Vec<usize>]>,
    asr: &AsrModel,
    lm: &LmModel,
) -> Vec<EvalItem> {
    utts.iter()
        .zip(firsts)
        .enumerate()
        .map(|(i, (u, f))| EvalItem {
            id: u.id.clone(),
            ref_transcript: u.transcript.clone(),
            hyp_transcript: asr.text(&f.asr.transcript),
            gold_labels: u.label_text(),
            pred_labels: lm.text(finals.map_or(&f.lm.labels, |fs| &fs[i])),
        })
        .collect()
}

/// Per-step configurations of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub noise: NoiseProfile,
    pub asr: TrainConfig,
    pub lm: TrainConfig,
    pub del: TrainConfig,
    pub decode: DecodeConfig,
}

impl ExperimentConfig {
    /// The same configs with every seed derived from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.asr.seed = seed.wrapping_mul(3).wrapping_add(1);
        c.lm.seed = seed.wrapping_mul(3).wrapping_add(2);
        c.del.seed = seed.wrapping_mul(3).wrapping_add(3);
        c
    }
}

pub struct Cascade {
    pub asr: AsrModel,
    pub lm: LmModel,
    pub records: [RunRecord; 2],
}

/// Steps 1 and 2.
pub fn train_cascade(splits: &Splits, cfg: &ExperimentConfig) -> Result<Cascade> {
    let (av, lv) = build_vocabularies(&splits.grammar);
    let mut asr = AsrModel::new(cfg.asr.asr_config(splits.codebook.cols()), av, cfg.asr.seed)?;
    let r1 = train_step1_asr(&mut asr, &splits.train, &cfg.asr)?;
    let mut lm = LmModel::new(cfg.lm.lm_config(), lv, cfg.lm.seed)?;
    let r2 = train_step2_lm(&mut lm, &splits.train, &cfg.lm)?;
    Ok(Cascade {
        asr,
        lm,
        records: [r1, r2],
    })
}

/// Step 3 for one integration mode and flag set on precomputed inputs.
pub fn train_deliberation(
    lm: &LmModel,
    data: &Step3Data,
    base: &TrainConfig,
    mode: IntegrationMode,
    flags: AblationFlags,
) -> Result<DelModel> {
    let cfg = TrainConfig {
        mode,
        flags,
        ..base.clone()
    };
    let mut del = DelModel::new(cfg.del_config(), lm.vocab.len(), cfg.seed)?;
    train_step3_cached(&mut del, data, &cfg)?;
    Ok(del)
}

/// The six ablation rows: name, mode and flags.
pub fn ablation_grid(base: IntegrationMode) -> Vec<(&'static str, IntegrationMode, AblationFlags)> {
    let d = AblationFlags::default();
    vec![
        ("baseline", base, d),
        (
            "w/o teacher forcing",
            base,
            AblationFlags {
                teacher_force_transcript: false,
                ..d
            },
        ),
        ("w/o h_asr", base, AblationFlags { mask_h_asr: true, ..d }),
        ("w/o c_asr", base, AblationFlags { mask_c_asr: true, ..d }),
        ("w/o h_lm", base, AblationFlags { mask_h_lm: true, ..d }),
        ("w/o residual", base, AblationFlags { residual: false, ..d }),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mode: IntegrationMode,
    pub flags: AblationFlags,
    pub report: MetricReport,
}

/// Trains and scores one deliberation model per grid row on top of a shared
/// cascade. Step-3 inputs are cached per teacher-forcing setting.
pub fn run_grid(
    splits: &Splits,
    asr: &AsrModel,
    lm: &LmModel,
    cfg: &ExperimentConfig,
    grid: &[(&str, IntegrationMode, AblationFlags)],
) -> Result<(MetricReport, Vec<AblationRow>)> {
    let firsts = run_first_passes(asr, lm, &splits.dev, &cfg.decode)?;
    let cascade_report = evaluate(&eval_items(&splits.dev, &firsts, None, asr, lm))?;
    let mut cache: [Option<Step3Data>; 2] = [None, None];
    let mut rows = Vec::with_capacity(grid.len());
    for &(name, mode, flags) in grid {
        let slot = usize::from(flags.teacher_force_transcript);
        if cache[slot].is_none() {
            cache[slot] = Some(Step3Data::build(
                asr,
                lm,
                &splits.train,
                flags.teacher_force_transcript,
            )?);
        }
        let data = cache[slot].as_ref().expect("cached above");
        let del = train_deliberation(lm, data, &cfg.del, mode, flags)?;
        let finals = run_third_pass(&del, &firsts, &cfg.decode, &flags)?;
        let report = evaluate(&eval_items(&splits.dev, &firsts, Some(&finals), asr, lm))?;
        rows.push(AblationRow {
            name: name.to_string(),
            mode,
            flags,
            report,
        });
    }
    Ok((cascade_report, rows))
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_train: 2000,
            n_dev: 200,
            noise: NoiseProfile::default(),
            asr: TrainConfig::for_step(1).expect("valid step"),
            lm: TrainConfig::for_step(2).expect("valid step"),
            del: TrainConfig::for_step(3).expect("valid step"),
            decode: DecodeConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

impl ExperimentConfig {
    /// Sets one key. Training keys prefixed `asr.`, `lm.` or `del.` apply to
    /// that step; unprefixed training keys apply to all three.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = key.trim();
        let beam_idx = |k: &str, p: &str| k.strip_prefix(p).and_then(|d| d.parse::<usize>().ok()).filter(|d| (1..=3).contains(d));
        match key {
            "n_train" => self.n_train = parse(key, v)?,
            "n_dev" => self.n_dev = parse(key, v)?,
            "sigma" => self.noise.sigma = parse(key, v)?,
            "repeat_min" => self.noise.repeat.0 = parse(key, v)?,
            "repeat_max" => self.noise.repeat.1 = parse(key, v)?,
            "drop_prob" => self.noise.drop_prob = parse(key, v)?,
            k if beam_idx(k, "beam").is_some() => self.decode.beams[beam_idx(k, "beam").unwrap() - 1] = parse(key, v)?,
            k if beam_idx(k, "max_len").is_some() => {
                self.decode.max_len[beam_idx(k, "max_len").unwrap() - 1] = parse(key, v)?
            }
            "step" => return Err(Error::Config("step is implied by the command".into())),
            k => match k.split_once('.') {
                Some(("asr", rest)) => self.asr.set(rest, v)?,
                Some(("lm", rest)) => self.lm.set(rest, v)?,
                Some(("del", rest)) => self.del.set(rest, v)?,
                Some(_) => return Err(Error::Config(format!("unknown config key {k:?}"))),
                None => {
                    for c in [&mut self.asr, &mut self.lm, &mut self.del] {
                        c.set(k, v)?;
                    }
                }
            },
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
        self.noise.validate()?;
        for c in [&self.asr, &self.lm, &self.del] {
            c.validate()?;
        }
        if self.decode.beams.contains(&0) {
            return Err(Error::Config("beam widths must be ≥ 1".into()));
        }
        // The deliberation reads ASR and LM states at their trained widths.
        if self.del.asr_dim != self.asr.asr_dim || self.del.lm_dim != self.lm.lm_dim {
            return Err(Error::Config(format!(
                "del.asr_dim/del.lm_dim ({}/{}) must equal asr.asr_dim/lm.lm_dim ({}/{})",
                self.del.asr_dim, self.del.lm_dim, self.asr.asr_dim, self.lm.lm_dim
            )));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = ExperimentConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Fully qualified snapshot that [`ExperimentConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n_train = {}\nn_dev = {}\nsigma = {}\nrepeat_min = {}\nrepeat_max = {}\ndrop_prob = {}\n",
            self.n_train, self.n_dev, self.noise.sigma, self.noise.repeat.0, self.noise.repeat.1, self.noise.drop_prob
        );
        for i in 0..3 {
            s += &format!("beam{} = {}\nmax_len{} = {}\n", i + 1, self.decode.beams[i], i + 1, self.decode.max_len[i]);
        }
        for (p, c) in [("asr", &self.asr), ("lm", &self.lm), ("del", &self.del)] {
            for line in c.to_text().lines().filter(|l| !l.starts_with("step ")) {
                s += &format!("{p}.{line}\n");
            }
        }
        s
    }
}
