//! Beam search on each pass of micro-sized models: a beam as wide as the
//! hypothesis space finds the exhaustive argmax, and width one is greedy.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tp3::asr::{AsrModel, FeatureSequence};
use tp3::decoding::{beam_search, enumerate_all, greedy, DecoderSearch, StepModel};
use tp3::deliberation::{AblationFlags, DelInputs, DelModel, DelVars, IntegrationMode};
use tp3::lm::{encoder_input, LmModel};
use tp3::nn::AttentionMask;
use tp3::tensor::{log_softmax_slice, Graph, Tensor};
use tp3::training::TrainConfig;
use tp3::vocab::{Vocabulary, BOS, EOS};

pub const MAX_LEN: usize = 3;

type Check = Result<(), String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn err(e: tp3::Error) -> String {
    e.to_string()
}

fn micro_config(mode: IntegrationMode) -> TrainConfig {
    let mut c = TrainConfig::for_step(3).unwrap();
    c.asr_dim = 4;
    c.lm_dim = 4;
    c.heads = 2;
    c.enc_layers = 1;
    c.dec_layers = 1;
    c.conv_kernel = 3;
    c.mode = mode;
    c
}

fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Full beam against enumeration and width one against greedy for one head.
fn check<M: StepModel>(m: &M, what: &str) -> Check {
    let all = enumerate_all(m, MAX_LEN, EOS).map_err(err)?;
    let full = beam_search(m, all.len(), MAX_LEN, EOS).map_err(err)?;
    ensure(full[0].tokens == all[0].tokens, || {
        format!("{what}: full beam {:?} vs exhaustive {:?}", full[0].tokens, all[0].tokens)
    })?;
    let g = greedy(m, MAX_LEN, EOS).map_err(err)?;
    let b1 = beam_search(m, 1, MAX_LEN, EOS).map_err(err)?;
    ensure(b1[0].tokens == g.tokens, || {
        format!("{what}: beam one {:?} vs greedy {:?}", b1[0].tokens, g.tokens)
    })
}

/// Independent third-pass scorer: reruns the full teacher-forced forward for
/// each prefix instead of stepping the decoder cache.
struct DelSearch<'a> {
    del: &'a DelModel,
    inputs: &'a DelInputs,
    flags: AblationFlags,
}

impl DelSearch<'_> {
    fn scores(&self, emitted: &[usize]) -> tp3::Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = DelVars::constants(&mut g, self.inputs);
        let prefix: Vec<usize> = std::iter::once(BOS).chain(emitted.iter().copied()).collect();
        let (_, combined) = self.del.forward(&mut g, &v, &prefix, &self.flags)?;
        Ok(log_softmax_slice(g.value(combined).row(emitted.len())))
    }
}

impl StepModel for DelSearch<'_> {
    type State = Vec<usize>;

    fn start(&self) -> tp3::Result<(Vec<usize>, Vec<f64>)> {
        Ok((vec![], self.scores(&[])?))
    }

    fn advance(&self, state: &Vec<usize>, token: usize) -> tp3::Result<(Vec<usize>, Vec<f64>)> {
        let mut s = state.clone();
        s.push(token);
        let p = self.scores(&s)?;
        Ok((s, p))
    }
}

/// Runs every pass of `n_seeds` random micro pipelines; returns the number
/// of heads checked.
pub fn check_all(n_seeds: u64) -> Result<usize, String> {
    let mut n = 0;
    for seed in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if seed % 2 == 0 { IntegrationMode::Xattn } else { IntegrationMode::Concat };
        let cfg = micro_config(mode);
        let av = Vocabulary::new("asr", ["a", "b"]);
        let lv = Vocabulary::new("lm", ["x", "y"]);

        let asr = AsrModel::new(cfg.asr_config(3), av, seed).map_err(err)?;
        let x = FeatureSequence::new(random(8, 3, &mut rng)).map_err(err)?;
        let mut g = Graph::new();
        let c = asr.encode_speech(&mut g, &x).map_err(err)?;
        let s1 = DecoderSearch {
            decoder: &asr.decoder,
            store: &asr.store,
            sources: vec![(Arc::new(g.value(c).clone()), AttentionMask::none())],
            residual: None,
        };
        check(&s1, &format!("asr seed {seed}"))?;
        let a = asr.transcribe(&x, 1, MAX_LEN).map_err(err)?.remove(0);
        let g1 = greedy(&s1, MAX_LEN, EOS).map_err(err)?;
        ensure(a.transcript == g1.tokens, || format!("asr seed {seed}: transcribe at width one is not greedy"))?;

        let lm = LmModel::new(cfg.lm_config(), lv.clone(), seed + 100).map_err(err)?;
        let words = encoder_input(&[4, 5, 4]);
        let mut g = Graph::new();
        let c = lm.encode_text(&mut g, &words).map_err(err)?;
        let s2 = DecoderSearch {
            decoder: &lm.decoder,
            store: &lm.store,
            sources: vec![(Arc::new(g.value(c).clone()), AttentionMask::none())],
            residual: None,
        };
        check(&s2, &format!("lm seed {seed}"))?;
        let l = lm.predict_labels(&words, 1, MAX_LEN).map_err(err)?.remove(0);

        let del = DelModel::new(cfg.del_config(), lv.len(), seed + 200).map_err(err)?;
        let inputs = DelInputs::from_outputs(&a, &l);
        for flags in [
            AblationFlags::default(),
            AblationFlags {
                residual: false,
                ..Default::default()
            },
        ] {
            let what = format!("deliberation {mode} seed {seed} residual {}", flags.residual);
            let oracle = DelSearch {
                del: &del,
                inputs: &inputs,
                flags,
            };
            check(&oracle, &what)?;
            let every = enumerate_all(&oracle, MAX_LEN, EOS).map_err(err)?;
            let full = del.deliberate(&inputs, &flags, every.len(), MAX_LEN).map_err(err)?;
            ensure(full[0].tokens == every[0].tokens, || format!("{what}: cached full beam vs exhaustive"))?;
            let b1 = del.deliberate(&inputs, &flags, 1, MAX_LEN).map_err(err)?;
            let g3 = greedy(&oracle, MAX_LEN, EOS).map_err(err)?;
            ensure(b1[0].tokens == g3.tokens, || format!("{what}: cached beam one vs greedy"))?;
        }
        n += 4;
    }
    Ok(n)
}
