use std::sync::Arc;

use rand::Rng;

use super::{
    embed_tokens, Activation, AttentionMask, BlockConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// A memory sequence the decoder cross-attends to.
#[derive(Clone, Copy, Debug)]
pub struct Source {
    pub memory: Var,
    pub mask: AttentionMask,
}

impl Source {
    pub fn new(memory: Var) -> Self {
        Source {
            memory,
            mask: AttentionMask::none(),
        }
    }
}

/// Pre-norm decoder layer: causal self-attention, one cross-attention
/// sub-layer per source in the given order, then the feed-forward block.
/// Passing fewer sources than the layer was built for skips the trailing
/// cross-attention sub-layers.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_ln: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Vec<(LayerNorm, MultiHeadAttention)>,
    pub ffn_ln: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

struct Kv {
    k: Var,
    v: Var,
    mask: AttentionMask,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &BlockConfig,
        n_sources: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if !(1..=2).contains(&n_sources) {
            return Err(Error::Config(format!(
                "decoder layer needs 1 or 2 sources, got {n_sources}"
            )));
        }
        let mut cross = Vec::with_capacity(n_sources);
        for i in 0..n_sources {
            cross.push((
                LayerNorm::new(store, &format!("{name}.cross{i}_ln"), cfg.dim)?,
                MultiHeadAttention::new(store, &format!("{name}.cross{i}"), cfg.dim, cfg.heads, rng)?,
            ));
        }
        Ok(DecoderLayer {
            self_ln: LayerNorm::new(store, &format!("{name}.self_ln"), cfg.dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), cfg.dim, cfg.heads, rng)?,
            cross,
            ffn_ln: LayerNorm::new(store, &format!("{name}.ffn_ln"), cfg.dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim, Activation::Relu, rng)?,
            dropout: cfg.dropout,
        })
    }

    fn check_sources(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Config("decoder layer called with no sources".into()));
        }
        if n > self.cross.len() {
            return Err(Error::Config(format!(
                "decoder layer built for {} sources, called with {n}",
                self.cross.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, y: Var, sources: &[Source]) -> Result<Var> {
        self.check_sources(sources.len())?;
        let h = self.self_ln.forward(g, s, y)?;
        let (k, v) = self.self_attn.project_kv(g, s, h)?;
        let mut cross = Vec::with_capacity(sources.len());
        for (src, (_, attn)) in sources.iter().zip(&self.cross) {
            let (k, v) = attn.project_kv(g, s, src.memory)?;
            cross.push(Kv { k, v, mask: src.mask });
        }
        self.forward_inner(g, s, y, h, Kv { k, v, mask: AttentionMask::causal() }, &cross)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        y: Var,
        y_ln: Var,
        self_kv: Kv,
        cross: &[Kv],
    ) -> Result<Var> {
        let a = self.self_attn.attend(g, s, y_ln, self_kv.k, self_kv.v, &self_kv.mask)?;
        let a = g.dropout(a, self.dropout)?;
        let mut x = g.add(y, a)?;
        for (kv, (ln, attn)) in cross.iter().zip(&self.cross) {
            let h = ln.forward(g, s, x)?;
            let a = attn.attend(g, s, h, kv.k, kv.v, &kv.mask)?;
            let a = g.dropout(a, self.dropout)?;
            x = g.add(x, a)?;
        }
        let h = self.ffn_ln.forward(g, s, x)?;
        let h = self.ffn.forward(g, s, h, self.dropout)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(x, h)
    }
}

/// Incremental decoding state: cached self-attention keys/values per layer
/// and precomputed cross-attention keys/values per layer and source.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub pos: usize,
    self_kv: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    cross: Arc<Vec<Vec<(Arc<Tensor>, Arc<Tensor>, AttentionMask)>>>,
}

/// Embedding, decoder layers, final norm and output projection.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
    pub out: Linear,
    pub dim: usize,
    pub vocab: usize,
    pub dropout: f64,
}

impl TransformerDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        n_layers: usize,
        cfg: &BlockConfig,
        n_sources: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = (1.0 / cfg.dim as f64).sqrt();
        let table = Tensor::matrix(
            vocab,
            cfg.dim,
            (0..vocab * cfg.dim).map(|_| rng.random_range(-scale..scale)).collect(),
        )?;
        let embed = store.add(format!("{name}.embed"), table)?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(DecoderLayer::new(store, &format!("{name}.layer{i}"), cfg, n_sources, rng)?);
        }
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), cfg.dim)?;
        let out = Linear::new(store, &format!("{name}.out"), cfg.dim, vocab, true, rng)?;
        // small output weights keep the untrained posterior near uniform
        for w in store.value_mut(out.weight).data_mut() {
            *w *= 0.1;
        }
        Ok(TransformerDecoder {
            embed,
            layers,
            final_ln,
            out,
            dim: cfg.dim,
            vocab,
            dropout: cfg.dropout,
        })
    }

    fn embed_scale(&self) -> f64 {
        (self.dim as f64).sqrt()
    }

    /// Final-norm hidden states for every prefix position (teacher forcing).
    pub fn hidden(&self, g: &mut Graph, s: &ParamStore, prefix: &[usize], sources: &[Source]) -> Result<Var> {
        let mut x = embed_tokens(g, s, self.embed, prefix, self.embed_scale(), 0)?;
        x = g.dropout(x, self.dropout)?;
        for layer in &self.layers {
            x = layer.forward(g, s, x, sources)?;
        }
        self.final_ln.forward(g, s, x)
    }

    pub fn logits(&self, g: &mut Graph, s: &ParamStore, hidden: Var) -> Result<Var> {
        self.out.forward(g, s, hidden)
    }

    /// Projects each source memory once for incremental decoding.
    pub fn start(&self, s: &ParamStore, sources: &[(Arc<Tensor>, AttentionMask)]) -> Result<DecoderState> {
        let mut g = Graph::new();
        let mut cross = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer.check_sources(sources.len())?;
            let mut per = Vec::with_capacity(sources.len());
            for ((mem, mask), (_, attn)) in sources.iter().zip(&layer.cross) {
                let m = g.shared_constant(Arc::clone(mem));
                let (k, v) = attn.project_kv(&mut g, s, m)?;
                per.push((Arc::new(g.value(k).clone()), Arc::new(g.value(v).clone()), *mask));
            }
            cross.push(per);
        }
        let empty = Arc::new(Tensor::zeros(&[0, self.dim]));
        Ok(DecoderState {
            pos: 0,
            self_kv: vec![(Arc::clone(&empty), Arc::clone(&empty)); self.layers.len()],
            cross: Arc::new(cross),
        })
    }

    /// Feeds one token; returns the new state, the hidden row at this
    /// position and its output logits. Results are bit-identical to the
    /// corresponding rows of a teacher-forced `hidden`/`logits` pass.
    pub fn step(&self, s: &ParamStore, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let mut x = embed_tokens(&mut g, s, self.embed, &[token], self.embed_scale(), state.pos)?;
        let mut self_kv = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.self_ln.forward(&mut g, s, x)?;
            let (k_new, v_new) = layer.self_attn.project_kv(&mut g, s, h)?;
            let (k_old, v_old) = &state.self_kv[li];
            let k = Arc::new(Tensor::concat_rows(&[k_old, g.value(k_new)])?);
            let v = Arc::new(Tensor::concat_rows(&[v_old, g.value(v_new)])?);
            let kv = Kv {
                k: g.shared_constant(Arc::clone(&k)),
                v: g.shared_constant(Arc::clone(&v)),
                mask: AttentionMask::none(),
            };
            let cross: Vec<Kv> = state.cross[li]
                .iter()
                .map(|(k, v, mask)| Kv {
                    k: g.shared_constant(Arc::clone(k)),
                    v: g.shared_constant(Arc::clone(v)),
                    mask: *mask,
                })
                .collect();
            x = layer.forward_inner(&mut g, s, x, h, kv, &cross)?;
            self_kv.push((k, v));
        }
        let h = self.final_ln.forward(&mut g, s, x)?;
        let l = self.out.forward(&mut g, s, h)?;
        let next = DecoderState {
            pos: state.pos + 1,
            self_kv,
            cross: Arc::clone(&state.cross),
        };
        Ok((next, g.value(h).data().to_vec(), g.value(l).data().to_vec()))
    }
}
