use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An autoregressive model seen by the search: each call returns the state
/// after consuming a token and the log-distribution over the next token.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    fn advance(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Emitted tokens, ending in eos unless force-terminated.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    /// Cut at `max_len` without emitting eos.
    pub forced: bool,
}

/// Higher score first, then lexicographically smaller tokens.
pub fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    next: Vec<f64>,
}

/// Beam search without length normalisation. `max_len` bounds the number of
/// emitted tokens including eos; hypotheses still open at that length are
/// force-terminated and flagged. Returns at most `width` hypotheses, best first.
pub fn beam_search<M: StepModel>(
    model: &M,
    width: usize,
    max_len: usize,
    eos: usize,
) -> Result<Vec<BeamHypothesis>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let (state, next) = model.start()?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        next,
    }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            for (tok, &lp) in h.next.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                if lp.is_nan() {
                    return Err(Error::NonFinite {
                        op: "beam_search".into(),
                        index: tok,
                    });
                }
                let mut t = h.tokens.clone();
                t.push(tok);
                cands.push((h.log_prob + lp, t, hi));
            }
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(width);

        let mut survivors = Vec::new();
        for (score, tokens, hi) in cands {
            let last = *tokens.last().unwrap();
            if last == eos {
                pool.push(BeamHypothesis {
                    tokens,
                    log_prob: score,
                    finished: true,
                    forced: false,
                });
            } else {
                survivors.push((score, tokens, hi));
            }
        }
        let at_limit = survivors.first().is_some_and(|s| s.1.len() >= max_len);
        if at_limit {
            for (score, tokens, _) in survivors {
                pool.push(BeamHypothesis {
                    tokens,
                    log_prob: score,
                    finished: true,
                    forced: true,
                });
            }
            break;
        }
        let mut next_live = Vec::with_capacity(survivors.len());
        for (score, tokens, hi) in survivors {
            let (state, next) = model.advance(&live[hi].state, *tokens.last().unwrap())?;
            next_live.push(Live {
                tokens,
                log_prob: score,
                state,
                next,
            });
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // Scores only decrease, so a full pool that beats every live
        // hypothesis cannot change.
        if pool.len() >= width {
            pool.sort_by(|a, b| rank((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
            let worst_kept = pool[width - 1].log_prob;
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if worst_kept >= best_live {
                break;
            }
        }
    }
    pool.sort_by(|a, b| rank((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
    pool.truncate(width);
    Ok(pool)
}

/// Argmax at every step, lowest id on ties.
pub fn greedy<M: StepModel>(model: &M, max_len: usize, eos: usize) -> Result<BeamHypothesis> {
    let (mut state, mut next) = model.start()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let tok = crate::tensor::argmax(&next);
        log_prob += next[tok];
        tokens.push(tok);
        if tok == eos {
            return Ok(BeamHypothesis {
                tokens,
                log_prob,
                finished: true,
                forced: false,
            });
        }
        if tokens.len() >= max_len {
            return Ok(BeamHypothesis {
                tokens,
                log_prob,
                finished: true,
                forced: true,
            });
        }
        (state, next) = model.advance(&state, tok)?;
    }
}

/// Every complete sequence of at most `max_len` tokens with its score,
/// best first. Exponential; for micro-models only.
pub fn enumerate_all<M: StepModel>(model: &M, max_len: usize, eos: usize) -> Result<Vec<BeamHypothesis>> {
    let mut out = Vec::new();
    let (state, next) = model.start()?;
    let mut stack = vec![(Vec::new(), 0.0, state, next)];
    while let Some((tokens, lp, state, next)) = stack.pop() {
        for (tok, &p) in next.iter().enumerate() {
            if p == f64::NEG_INFINITY {
                continue;
            }
            let mut t: Vec<usize> = tokens.clone();
            t.push(tok);
            let score = lp + p;
            if tok == eos || t.len() >= max_len {
                let forced = tok != eos;
                out.push(BeamHypothesis {
                    tokens: t,
                    log_prob: score,
                    finished: true,
                    forced,
                });
            } else {
                let (s2, n2) = model.advance(&state, tok)?;
                stack.push((t, score, s2, n2));
            }
        }
    }
    out.sort_by(|a, b| rank((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table of next-token log-probs keyed by prefix length.
    struct Static {
        rows: Vec<Vec<f64>>,
    }

    impl StepModel for Static {
        type State = usize;
        fn start(&self) -> Result<(usize, Vec<f64>)> {
            Ok((0, self.rows[0].clone()))
        }
        fn advance(&self, s: &usize, _t: usize) -> Result<(usize, Vec<f64>)> {
            Ok((s + 1, self.rows[(s + 1).min(self.rows.len() - 1)].clone()))
        }
    }

    /// Distribution that depends on the whole prefix through a hash.
    struct Hashy {
        vocab: usize,
    }

    impl StepModel for Hashy {
        type State = Vec<usize>;
        fn start(&self) -> Result<(Vec<usize>, Vec<f64>)> {
            Ok((vec![], self.dist(&[])))
        }
        fn advance(&self, s: &Vec<usize>, t: usize) -> Result<(Vec<usize>, Vec<f64>)> {
            let mut p = s.clone();
            p.push(t);
            let d = self.dist(&p);
            Ok((p, d))
        }
    }

    impl Hashy {
        fn dist(&self, prefix: &[usize]) -> Vec<f64> {
            let mut h: u64 = 1469598103934665603;
            for &t in prefix {
                h = (h ^ t as u64).wrapping_mul(1099511628211);
            }
            let raw: Vec<f64> = (0..self.vocab)
                .map(|i| {
                    let x = h.wrapping_add((i as u64).wrapping_mul(0x9e3779b97f4a7c15)).wrapping_mul(0xbf58476d1ce4e5b9);
                    (x >> 11) as f64 / (1u64 << 53) as f64 * 3.0
                })
                .collect();
            crate::tensor::log_softmax_slice(&raw)
        }
    }

    fn ln(v: &[f64]) -> Vec<f64> {
        v.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn static_three_by_two_matches_enumeration() {
        // tokens 0..2 content, 3 = eos only at the end
        let m = Static {
            rows: vec![
                ln(&[0.5, 0.3, 0.2, 0.0]),
                ln(&[0.1, 0.6, 0.3, 0.0]),
                ln(&[0.0, 0.0, 0.0, 1.0]),
            ],
        };
        let all = enumerate_all(&m, 3, 3).unwrap();
        assert_eq!(all.len(), 9);
        let beam = beam_search(&m, 9, 3, 3).unwrap();
        assert_eq!(beam.len(), 9);
        for (a, b) in beam.iter().zip(&all) {
            assert_eq!(a.tokens, b.tokens);
        }
        assert_eq!(beam[0].tokens, vec![0, 1, 3]);
    }

    #[test]
    fn all_mass_on_eos_gives_empty_body() {
        let m = Static {
            rows: vec![ln(&[0.0, 0.0, 1.0])],
        };
        let r = beam_search(&m, 4, 5, 2).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].tokens, vec![2]);
        assert_eq!(r[0].log_prob, 0.0);
    }

    #[test]
    fn beam_one_is_greedy_and_full_beam_is_exhaustive() {
        for vocab in 2..=4 {
            let m = Hashy { vocab };
            let g = greedy(&m, 4, 0).unwrap();
            let b1 = beam_search(&m, 1, 4, 0).unwrap();
            assert_eq!(b1[0].tokens, g.tokens);
            let all = enumerate_all(&m, 4, 0).unwrap();
            let full = beam_search(&m, all.len(), 4, 0).unwrap();
            assert_eq!(full[0].tokens, all[0].tokens);
            assert_eq!(full.len(), all.len());
        }
    }

    #[test]
    fn forced_termination_is_flagged_and_ranking_sorted() {
        let m = Static {
            rows: vec![ln(&[0.1, 0.9])],
        };
        let r = beam_search(&m, 2, 3, 0).unwrap();
        assert!(r.iter().any(|h| h.forced));
        assert!(r.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    }

    #[test]
    fn zero_width_rejected() {
        let m = Static { rows: vec![ln(&[1.0])] };
        assert!(matches!(beam_search(&m, 0, 2, 0), Err(Error::Config(_))));
    }
}
