//! Central finite-difference checks of every differentiable op, every
//! composed block and the full three-pass forward, in double precision.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr::{AsrConfig, AsrModel};
use crate::deliberation::{AblationFlags, DelConfig, DelModel, DelVars, IntegrationMode};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmModel};
use crate::nn::{
    Activation, AttentionMask, BlockConfig, DecoderLayer, EncoderKind, EncoderStack, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, Source, TransformerDecoder,
};
use crate::tensor::gradcheck::{relative_error, FD_STEP};
use crate::tensor::{grad_check, grad_check_params, Graph, ParamStore, Tensor, Var};
use crate::vocab::{Vocabulary, BOS};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub millis: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn tiny_block() -> BlockConfig {
    BlockConfig {
        dim: 4,
        heads: 2,
        ffn_dim: 6,
        dropout: 0.0,
        conv_kernel: 3,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output coordinate contributes.
fn probe(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

type OpCheck = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpCheck)> {
    let m = |r: usize, c: usize| vec![r, c];
    let mut v: Vec<(&'static str, Vec<Vec<usize>>, OpCheck)> = vec![
        ("matmul", vec![m(3, 4), m(4, 2)], Box::new(|g, x| g.matmul(x[0], x[1]))),
        ("matmul_nt", vec![m(3, 4), m(2, 4)], Box::new(|g, x| g.matmul_nt(x[0], x[1]))),
        ("transpose", vec![m(3, 2)], Box::new(|g, x| g.transpose(x[0]))),
        ("add", vec![m(2, 3), m(2, 3)], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![m(2, 3), m(2, 3)], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", vec![m(2, 3), m(2, 3)], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("add_bias", vec![m(3, 4), m(1, 4)], Box::new(|g, x| g.add_bias(x[0], x[1]))),
        ("add_const", vec![m(2, 3)], Box::new(|g, x| Ok(g.add_const(x[0], 0.7)))),
        ("scale", vec![m(2, 3)], Box::new(|g, x| Ok(g.scale(x[0], -1.3)))),
        ("scale_by", vec![m(2, 3), m(1, 1)], Box::new(|g, x| g.scale_by(x[0], x[1]))),
        (
            "mul_const",
            vec![m(2, 3)],
            Box::new(|g, x| g.mul_const(x[0], vec![0.5, 0.0, 2.0, -1.0, 1.5, 3.0])),
        ),
        (
            "mask_rows",
            vec![m(3, 2)],
            Box::new(|g, x| g.mask_rows(x[0], &[true, false, true])),
        ),
        ("sum", vec![m(2, 3)], Box::new(|g, x| Ok(g.sum(x[0])))),
        ("mean", vec![m(2, 3)], Box::new(|g, x| Ok(g.mean(x[0])))),
        ("softmax", vec![m(3, 4)], Box::new(|g, x| g.softmax(x[0]))),
        ("softmax_axis0", vec![m(3, 4)], Box::new(|g, x| g.softmax_axis(x[0], 0))),
        (
            "masked_softmax",
            vec![m(2, 3)],
            Box::new(|g, x| g.masked_softmax(x[0], &[true, false, true, true, true, false])),
        ),
        ("log_softmax", vec![m(3, 4)], Box::new(|g, x| g.log_softmax(x[0]))),
        (
            "layer_norm",
            vec![m(3, 4), m(1, 4), m(1, 4)],
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        ),
        (
            "depthwise_conv1d",
            vec![m(5, 3), m(3, 3)],
            Box::new(|g, x| g.depthwise_conv1d(x[0], x[1])),
        ),
        ("relu", vec![m(3, 4)], Box::new(|g, x| Ok(g.relu(x[0])))),
        ("silu", vec![m(3, 4)], Box::new(|g, x| Ok(g.silu(x[0])))),
        ("sigmoid", vec![m(3, 4)], Box::new(|g, x| Ok(g.sigmoid(x[0])))),
        ("glu", vec![m(3, 4)], Box::new(|g, x| g.glu(x[0]))),
        ("concat_rows", vec![m(2, 3), m(1, 3)], Box::new(|g, x| g.concat_rows(&[x[0], x[1]]))),
        ("concat_cols", vec![m(2, 3), m(2, 1)], Box::new(|g, x| g.concat_cols(&[x[0], x[1]]))),
        ("slice_rows", vec![m(4, 2)], Box::new(|g, x| g.slice_rows(x[0], 1, 2))),
        ("slice_cols", vec![m(2, 4)], Box::new(|g, x| g.slice_cols(x[0], 1, 2))),
        ("gather_rows", vec![m(4, 3)], Box::new(|g, x| g.gather_rows(x[0], &[2, 0, 2, 3]))),
        (
            "cross_entropy",
            vec![m(3, 5)],
            Box::new(|g, x| g.cross_entropy(x[0], &[1, 4, 0], 0.1, None)),
        ),
        (
            "cross_entropy_ignore",
            vec![m(3, 5)],
            Box::new(|g, x| g.cross_entropy(x[0], &[1, 0, 3], 0.0, Some(0))),
        ),
    ];
    v.sort_by_key(|c| c.0);
    v
}

fn timed(name: &str, f: impl FnOnce() -> Result<(f64, usize)>) -> Result<GradCase> {
    let t = Instant::now();
    let (e, n) = f()?;
    Ok(GradCase {
        name: name.to_string(),
        max_rel_error: e,
        coordinates: n,
        millis: t.elapsed().as_secs_f64() * 1e3,
    })
}

/// Checks parameters (every coordinate) and, when given, the input.
fn block_case<F>(name: &str, store: &mut ParamStore, input: Option<Tensor>, f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    timed(name, || {
        let x0 = input.clone().unwrap_or_else(|| Tensor::scalar(0.0));
        let p = grad_check_params(
            store,
            |g, s| {
                let x = g.constant(x0.clone());
                f(g, s, x)
            },
            usize::MAX,
            1,
        )?;
        let (mut e, mut n) = (p.max_rel_error, p.coordinates);
        if let Some(x) = input {
            let s: &ParamStore = store;
            let r = crate::tensor::grad_check_at(|g, v| f(g, s, v[0]), vec![x], 2)?;
            e = e.max(r.max_rel_error);
            n += r.coordinates;
        }
        Ok((e, n))
    })
}

fn block_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_block();
    let mut out = Vec::new();
    let x = rand_tensor(&mut rng, 4, 4);
    let w = rand_tensor(&mut rng, 4, 4);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 4, 3, true, &mut rng)?;
    let w3 = rand_tensor(&mut rng, 4, 3);
    out.push(block_case("block/linear", &mut s, Some(x.clone()), |g, s, v| {
        let y = lin.forward(g, s, v)?;
        probe(g, y, &w3)
    })?);

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 4)?;
    out.push(block_case("block/layer_norm", &mut s, Some(x.clone()), |g, s, v| {
        let y = ln.forward(g, s, v)?;
        probe(g, y, &w)
    })?);

    let mut s = ParamStore::new();
    let ff = FeedForward::new(&mut s, "ff", 4, 6, Activation::Silu, &mut rng)?;
    out.push(block_case("block/feed_forward", &mut s, Some(x.clone()), |g, s, v| {
        let y = ff.forward(g, s, v, 0.0)?;
        probe(g, y, &w)
    })?);

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "mha", 4, 2, &mut rng)?;
    let kv = rand_tensor(&mut rng, 5, 4);
    out.push(block_case("block/attention_padding", &mut s, Some(x.clone()), |g, s, v| {
        let k = g.constant(kv.clone());
        let y = mha.forward(g, s, v, k, &AttentionMask::padding(3))?;
        probe(g, y, &w)
    })?);
    out.push(block_case("block/self_attention_causal", &mut s, Some(x.clone()), |g, s, v| {
        let y = mha.forward(g, s, v, v, &AttentionMask::causal())?;
        probe(g, y, &w)
    })?);

    let mut s = ParamStore::new();
    let enc = EncoderStack::new(&mut s, "tenc", EncoderKind::Transformer, 2, &cfg, &mut rng)?;
    out.push(block_case("block/transformer_encoder_stack", &mut s, Some(x.clone()), |g, s, v| {
        let y = enc.forward(g, s, v, &AttentionMask::none())?;
        probe(g, y, &w)
    })?);

    let mut s = ParamStore::new();
    let conf = EncoderStack::new(&mut s, "conf", EncoderKind::Conformer, 2, &cfg, &mut rng)?;
    let x5 = rand_tensor(&mut rng, 5, 4);
    let w5 = rand_tensor(&mut rng, 5, 4);
    out.push(block_case("block/conformer_stack", &mut s, Some(x5.clone()), |g, s, v| {
        let y = conf.forward(g, s, v, &AttentionMask::padding(4))?;
        probe(g, y, &w5)
    })?);

    let mut s = ParamStore::new();
    let dl = DecoderLayer::new(&mut s, "dec", &cfg, 2, &mut rng)?;
    let (m1, m2) = (rand_tensor(&mut rng, 5, 4), rand_tensor(&mut rng, 3, 4));
    out.push(block_case("block/multi_source_decoder_layer", &mut s, Some(x.clone()), |g, s, v| {
        let a = g.constant(m1.clone());
        let b = g.constant(m2.clone());
        let srcs = [
            Source {
                memory: a,
                mask: AttentionMask::padding(4),
            },
            Source::new(b),
        ];
        let y = dl.forward(g, s, v, &srcs)?;
        probe(g, y, &w)
    })?);

    let mut s = ParamStore::new();
    let td = TransformerDecoder::new(&mut s, "tdec", 7, 2, &cfg, 1, &mut rng)?;
    out.push(block_case("block/transformer_decoder_loss", &mut s, None, |g, s, _| {
        let m = g.constant(m1.clone());
        let h = td.hidden(g, s, &[BOS, 4, 5, 6], &[Source::new(m)])?;
        let l = td.logits(g, s, h)?;
        g.cross_entropy(l, &[4, 5, 6, 2], 0.1, None)
    })?);
    Ok(out)
}

/// Gradient of the full three-pass loss (ASR transcript loss plus LM label
/// loss plus deliberation loss on ASR/LM graph outputs) with respect to
/// sampled parameters of all three networks.
fn three_pass_case(mode: IntegrationMode, flags: AblationFlags, tag: &str, seed: u64, per_store: usize) -> Result<GradCase> {
    let name = format!("model/three_pass_forward_{mode}{tag}");
    timed(&name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = tiny_block();
        let av = Vocabulary::new("asr", [" ", "a", "b"].map(String::from));
        let lv = Vocabulary::words(["a", "b", "ab"], &["x".to_string()]);
        let acfg = AsrConfig {
            feat_dim: 3,
            block,
            enc_layers: 1,
            dec_layers: 1,
        };
        let lcfg = LmConfig {
            block,
            enc_layers: 1,
            dec_layers: 1,
        };
        let mut asr = AsrModel::new(acfg, av, seed)?;
        let mut lm = LmModel::new(lcfg, lv.clone(), seed + 1)?;
        let mut del = DelModel::new(DelConfig::new(mode, block, 4), lv.len(), seed + 2)?;
        // move α off 0.5 so both residual branches carry distinct weight
        let a = del.head.alpha_raw;
        del.store.value_mut(a).data_mut()[0] = 0.4;
        let x = rand_tensor(&mut rng, 5, 3);
        let transcript = [asr.vocab.id("a").unwrap(), asr.vocab.id(" ").unwrap(), asr.vocab.id("b").unwrap()];
        let words = [lv.id("a").unwrap(), lv.id("b").unwrap(), crate::vocab::EOS];
        let labels = [lv.id("x").unwrap(), lv.id(crate::vocab::FILL).unwrap(), lv.id("a").unwrap()];
        let loss = |g: &mut Graph, asr: &AsrModel, lm: &LmModel, del: &DelModel| -> Result<Var> {
            let xv = g.constant(x.clone());
            let c_asr = asr.encode(g, xv)?;
            let mut prefix = vec![BOS];
            prefix.extend(&transcript);
            let h_asr = asr.decoder_hidden(g, c_asr, &prefix)?;
            let asr_logits = asr.logits(g, h_asr)?;
            let mut target = transcript.to_vec();
            target.push(crate::vocab::EOS);
            let l1 = g.cross_entropy(asr_logits, &target, 0.0, None)?;
            let c_lm = lm.encode_text(g, &words)?;
            let mut lp = vec![BOS];
            lp.extend(&labels);
            let h_lm = lm.decoder_hidden(g, c_lm, &lp)?;
            let lm_logits = lm.logits(g, h_lm)?;
            let mut lt = labels.to_vec();
            lt.push(crate::vocab::EOS);
            let l2 = g.cross_entropy(lm_logits, &lt, 0.0, None)?;
            let v = DelVars {
                c_asr,
                h_asr,
                h_lm,
                lm_logits,
            };
            let (_, combined) = del.forward(g, &v, &lp, &flags)?;
            let l3 = g.cross_entropy(combined, &lt, 0.1, None)?;
            let s = g.add(l1, l2)?;
            g.add(s, l3)
        };

        let mut g = Graph::new();
        let l = loss(&mut g, &asr, &lm, &del)?;
        let grads = g.backward(l)?;
        for s in [&mut asr.store, &mut lm.store, &mut del.store] {
            s.zero_grad();
            s.accumulate(&g, &grads, 1.0);
        }
        let eval = |asr: &AsrModel, lm: &LmModel, del: &DelModel| -> Result<f64> {
            let mut g = Graph::new();
            let l = loss(&mut g, asr, lm, del)?;
            Ok(g.value(l).item())
        };
        let mut worst: f64 = 0.0;
        let mut n = 0;
        for which in 0..3 {
            let store = match which {
                0 => &asr.store,
                1 => &lm.store,
                _ => &del.store,
            };
            let mut coords = Vec::new();
            for (pi, p) in store.params().iter().enumerate() {
                for ci in 0..p.value().numel() {
                    coords.push((pi, ci));
                }
            }
            for i in 0..per_store.min(coords.len()) {
                let j = rng.random_range(i..coords.len());
                coords.swap(i, j);
            }
            coords.truncate(per_store);
            let ids: Vec<_> = store.ids().collect();
            for (pi, ci) in coords {
                let id = ids[pi];
                let analytic = match which {
                    0 => asr.store.grad(id).data()[ci],
                    1 => lm.store.grad(id).data()[ci],
                    _ => del.store.grad(id).data()[ci],
                };
                let at = |delta: f64, asr: &mut AsrModel, lm: &mut LmModel, del: &mut DelModel| -> Result<f64> {
                    let s = match which {
                        0 => &mut asr.store,
                        1 => &mut lm.store,
                        _ => &mut del.store,
                    };
                    let orig = s.value(id).data()[ci];
                    s.value_mut(id).data_mut()[ci] = orig + delta;
                    let v = eval(asr, lm, del);
                    let s = match which {
                        0 => &mut asr.store,
                        1 => &mut lm.store,
                        _ => &mut del.store,
                    };
                    s.value_mut(id).data_mut()[ci] = orig;
                    v
                };
                let fp = at(FD_STEP, &mut asr, &mut lm, &mut del)?;
                let fm = at(-FD_STEP, &mut asr, &mut lm, &mut del)?;
                let num = (fp - fm) / (2.0 * FD_STEP);
                if !analytic.is_finite() {
                    return Err(Error::GradCheck {
                        index: n,
                        detail: format!("non-finite analytic gradient in {name}"),
                    });
                }
                worst = worst.max(relative_error(analytic, num));
                n += 1;
            }
        }
        Ok((worst, n))
    })
}

/// Runs every case. Errors abort; tolerance failures are reported per case.
pub fn run_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (i, (name, shapes, op)) in op_cases().into_iter().enumerate() {
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        out.push(timed(&format!("op/{name}"), || {
            let r = grad_check(&op, &shapes, seed + i as u64)?;
            Ok((r.max_rel_error, r.coordinates))
        })?);
    }
    out.extend(block_cases(seed)?);
    let d = AblationFlags::default();
    let variants = [
        (IntegrationMode::Xattn, d, ""),
        (IntegrationMode::Concat, d, ""),
        (IntegrationMode::Xattn, AblationFlags { mask_c_asr: true, ..d }, "_without_c_asr"),
        (IntegrationMode::Concat, AblationFlags { mask_h_asr: true, ..d }, "_without_h_asr"),
    ];
    for (i, (mode, flags, tag)) in variants.into_iter().enumerate() {
        out.push(three_pass_case(mode, flags, tag, seed + i as u64, 150)?);
    }
    Ok(out)
}
