//! Transcription error rates and entity-level F1 scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{FILL, SEP};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub dist: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        dist: d[n * w + m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if here == d[(i - 1) * w + j - 1] + diff {
                c.sub += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn chars(s: &str) -> Vec<char> {
    words(s).join(" ").chars().collect()
}

/// Word error rate; whitespace-insensitive at the edges.
pub fn wer(reference: &str, hyp: &str) -> Result<f64> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::UndefinedReference("wer"));
    }
    Ok(edit_distance(&r, &words(hyp)).dist as f64 / r.len() as f64)
}

/// Character error rate over the whitespace-normalised strings.
pub fn cer(reference: &str, hyp: &str) -> Result<f64> {
    let r = chars(reference);
    if r.is_empty() {
        return Err(Error::UndefinedReference("cer"));
    }
    Ok(edit_distance(&r, &chars(hyp)).dist as f64 / r.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub label: String,
    pub mention: String,
}

impl Entity {
    pub fn new(label: &str, mention: &str) -> Self {
        Entity {
            label: label.to_string(),
            mention: mention.to_string(),
        }
    }
}

/// Entities in surface order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntitySet {
    pub entities: Vec<Entity>,
}

impl EntitySet {
    pub fn new(entities: Vec<Entity>) -> Self {
        EntitySet { entities }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

impl FromIterator<Entity> for EntitySet {
    fn from_iter<I: IntoIterator<Item = Entity>>(iter: I) -> Self {
        EntitySet::new(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedLabels {
    pub entities: EntitySet,
    pub malformed: usize,
}

/// Parses `label ▁FILL mention ▁SEP label ▁FILL mention …`. Fragments that
/// are not a single label, one marker and a non-empty mention are dropped
/// and counted.
pub fn parse_label_sequence(text: &str) -> ParsedLabels {
    let mut out = ParsedLabels::default();
    let toks = words(text);
    for frag in toks.split(|t| *t == SEP) {
        if frag.is_empty() {
            continue;
        }
        match frag {
            [label, fill, mention @ ..]
                if *fill == FILL && !mention.is_empty() && *label != FILL && !mention.contains(&FILL) =>
            {
                out.entities.entities.push(Entity::new(label, &mention.join(" ")));
            }
            _ => out.malformed += 1,
        }
    }
    out
}

pub fn serialize_labels(entities: &EntitySet) -> String {
    entities
        .entities
        .iter()
        .map(|e| format!("{} {FILL} {}", e.label, e.mention))
        .collect::<Vec<_>>()
        .join(&format!(" {SEP} "))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        if self.tp <= 0.0 {
            return 0.0;
        }
        2.0 * self.tp / (2.0 * self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        if self.tp <= 0.0 {
            0.0
        } else {
            self.tp / (self.tp + self.fp)
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp <= 0.0 {
            0.0
        } else {
            self.tp / (self.tp + self.fn_)
        }
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn aligned(golds: &[EntitySet], preds: &[EntitySet]) -> Result<()> {
    if golds.len() != preds.len() {
        return Err(Error::Alignment {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    Ok(())
}

/// Multiset intersection counts under a key.
fn multiset_counts<K: Ord + Clone>(gold: &[K], pred: &[K]) -> Counts {
    let mut g: Vec<K> = gold.to_vec();
    let mut p: Vec<K> = pred.to_vec();
    g.sort();
    p.sort();
    let (mut i, mut j, mut tp) = (0, 0, 0usize);
    while i < g.len() && j < p.len() {
        match g[i].cmp(&p[j]) {
            std::cmp::Ordering::Equal => {
                tp += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    Counts {
        tp: tp as f64,
        fp: (p.len() - tp) as f64,
        fn_: (g.len() - tp) as f64,
    }
}

pub fn exact_counts(golds: &[EntitySet], preds: &[EntitySet]) -> Result<Counts> {
    aligned(golds, preds)?;
    let mut c = Counts::default();
    for (g, p) in golds.iter().zip(preds) {
        c.add(multiset_counts(&g.entities, &p.entities));
    }
    Ok(c)
}

pub fn label_counts(golds: &[EntitySet], preds: &[EntitySet]) -> Result<Counts> {
    aligned(golds, preds)?;
    let mut c = Counts::default();
    for (g, p) in golds.iter().zip(preds) {
        let gl: Vec<&str> = g.entities.iter().map(|e| e.label.as_str()).collect();
        let pl: Vec<&str> = p.entities.iter().map(|e| e.label.as_str()).collect();
        c.add(multiset_counts(&gl, &pl));
    }
    Ok(c)
}

/// Corpus-level F1 on exact (label, mention) matches.
pub fn micro_f1(golds: &[EntitySet], preds: &[EntitySet]) -> Result<f64> {
    Ok(exact_counts(golds, preds)?.f1())
}

/// Corpus-level F1 on labels alone.
pub fn label_f1(golds: &[EntitySet], preds: &[EntitySet]) -> Result<f64> {
    Ok(label_counts(golds, preds)?.f1())
}

/// Partial-credit counts: same-label pairs are matched greedily by
/// ascending mention edit distance (surface order on ties); a match with
/// word error w moves 1−w to TP and w to both FP and FN, likewise for
/// characters; the two granularities are averaged.
pub fn slu_counts(golds: &[EntitySet], preds: &[EntitySet]) -> Result<Counts> {
    aligned(golds, preds)?;
    let (mut wc, mut cc) = (Counts::default(), Counts::default());
    for (g, p) in golds.iter().zip(preds) {
        let mut pairs = Vec::new();
        for (i, ge) in g.entities.iter().enumerate() {
            for (j, pe) in p.entities.iter().enumerate() {
                if ge.label == pe.label {
                    let d = edit_distance(&chars(&ge.mention), &chars(&pe.mention)).dist;
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort();
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        for (_, i, j) in pairs {
            if g_used[i] || p_used[j] {
                continue;
            }
            g_used[i] = true;
            p_used[j] = true;
            let (gm, pm) = (&g.entities[i].mention, &p.entities[j].mention);
            let w = wer(gm, pm)?.min(1.0);
            let c = cer(gm, pm)?.min(1.0);
            wc.add(Counts { tp: 1.0 - w, fp: w, fn_: w });
            cc.add(Counts { tp: 1.0 - c, fp: c, fn_: c });
        }
        let fp = p_used.iter().filter(|u| !**u).count() as f64;
        let fn_ = g_used.iter().filter(|u| !**u).count() as f64;
        for c in [&mut wc, &mut cc] {
            c.add(Counts { tp: 0.0, fp, fn_ });
        }
    }
    Ok(Counts {
        tp: (wc.tp + cc.tp) / 2.0,
        fp: (wc.fp + cc.fp) / 2.0,
        fn_: (wc.fn_ + cc.fn_) / 2.0,
    })
}

pub fn slu_f1(golds: &[EntitySet], preds: &[EntitySet]) -> Result<f64> {
    Ok(slu_counts(golds, preds)?.f1())
}

pub const BUCKET_NAMES: [&str; 3] = ["0.0", "(0.0,0.25]", "(0.25,1.0]"];

/// Index of the transcription-difficulty bucket; rates above 1 fall into the last.
pub fn wer_bucket(w: f64) -> usize {
    if w <= 0.0 {
        0
    } else if w <= 0.25 {
        1
    } else {
        2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub range: String,
    pub n: usize,
    pub slu_f1: f64,
    pub label_f1: f64,
    pub micro_f1: f64,
}

pub fn wer_bucket_report(per_utt: &[(f64, EntitySet, EntitySet)]) -> Result<Vec<BucketRow>> {
    let mut golds: [Vec<EntitySet>; 3] = Default::default();
    let mut preds: [Vec<EntitySet>; 3] = Default::default();
    for (w, g, p) in per_utt {
        let b = wer_bucket(*w);
        golds[b].push(g.clone());
        preds[b].push(p.clone());
    }
    (0..3)
        .map(|b| {
            Ok(BucketRow {
                range: BUCKET_NAMES[b].to_string(),
                n: golds[b].len(),
                slu_f1: slu_f1(&golds[b], &preds[b])?,
                label_f1: label_f1(&golds[b], &preds[b])?,
                micro_f1: micro_f1(&golds[b], &preds[b])?,
            })
        })
        .collect()
}

/// One utterance to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub ref_transcript: String,
    pub hyp_transcript: String,
    pub gold_labels: String,
    pub pred_labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub wer: f64,
    pub cer: f64,
    pub micro_f1: f64,
    pub label_f1: f64,
    pub slu_f1: f64,
    pub exact: Counts,
    pub label: Counts,
    pub slu: Counts,
    pub word_edits: EditCounts,
    pub char_edits: EditCounts,
    pub malformed: usize,
    pub buckets: Vec<BucketRow>,
}

pub fn evaluate(items: &[EvalItem]) -> Result<MetricReport> {
    let mut golds = Vec::with_capacity(items.len());
    let mut preds = Vec::with_capacity(items.len());
    let mut per_utt = Vec::with_capacity(items.len());
    let (mut we, mut ce) = (EditCounts::default(), EditCounts::default());
    let (mut wn, mut cn, mut malformed) = (0usize, 0usize, 0usize);
    for it in items {
        let rw = words(&it.ref_transcript);
        if rw.is_empty() {
            return Err(Error::UndefinedReference("wer"));
        }
        let e = edit_distance(&rw, &words(&it.hyp_transcript));
        let rc = chars(&it.ref_transcript);
        let c = edit_distance(&rc, &chars(&it.hyp_transcript));
        for (acc, x) in [(&mut we, e), (&mut ce, c)] {
            acc.dist += x.dist;
            acc.sub += x.sub;
            acc.ins += x.ins;
            acc.del += x.del;
        }
        wn += rw.len();
        cn += rc.len();
        let g = parse_label_sequence(&it.gold_labels);
        let p = parse_label_sequence(&it.pred_labels);
        malformed += p.malformed;
        per_utt.push((e.dist as f64 / rw.len() as f64, g.entities.clone(), p.entities.clone()));
        golds.push(g.entities);
        preds.push(p.entities);
    }
    let exact = exact_counts(&golds, &preds)?;
    let label = label_counts(&golds, &preds)?;
    let slu = slu_counts(&golds, &preds)?;
    Ok(MetricReport {
        n: items.len(),
        wer: if wn == 0 { 0.0 } else { we.dist as f64 / wn as f64 },
        cer: if cn == 0 { 0.0 } else { ce.dist as f64 / cn as f64 },
        micro_f1: exact.f1(),
        label_f1: label.f1(),
        slu_f1: slu.f1(),
        exact,
        label,
        slu,
        word_edits: we,
        char_edits: ce,
        malformed,
        buckets: wer_bucket_report(&per_utt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> EntitySet {
        pairs.iter().map(|(l, m)| Entity::new(l, m)).collect()
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&["a", "b"], &["a", "b"]), EditCounts::default());
        let c = edit_distance(&["turn", "on", "the", "lights"], &["turn", "off", "the", "light"]);
        assert_eq!((c.dist, c.sub, c.ins, c.del), (2, 2, 0, 0));
        let e: [&str; 0] = [];
        let c = edit_distance(&e, &["x", "y"]);
        assert_eq!((c.dist, c.ins), (2, 2));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("turn on", "turn on").unwrap(), 0.0);
        assert_eq!(wer("turn on the lights", "turn off the light").unwrap(), 0.5);
        assert_eq!(wer("a b", "").unwrap(), 1.0);
        assert!(matches!(wer("  ", "x"), Err(Error::UndefinedReference(_))));
        assert_eq!(wer(" set alarm ", "set alarm").unwrap(), 0.0);
    }

    #[test]
    fn parse_examples() {
        let p = parse_label_sequence("time ▁FILL five am");
        assert_eq!(p.entities, set(&[("time", "five am")]));
        assert_eq!(parse_label_sequence(""), ParsedLabels::default());
        let p = parse_label_sequence("time ▁FILL");
        assert!(p.entities.is_empty());
        assert_eq!(p.malformed, 1);
        let s = "time ▁FILL five am ▁SEP person ▁FILL john";
        assert_eq!(serialize_labels(&parse_label_sequence(s).entities), s);
    }

    #[test]
    fn micro_and_label_examples() {
        let g = vec![set(&[("date", "tomorrow"), ("person", "john")])];
        let p = vec![set(&[("date", "tomorrow")])];
        let c = exact_counts(&g, &p).unwrap();
        assert_eq!((c.precision(), c.recall()), (1.0, 0.5));
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(micro_f1(&g, &g).unwrap(), 1.0);
        assert_eq!(micro_f1(&g, &[EntitySet::default()]).unwrap(), 0.0);
        assert!(matches!(micro_f1(&g, &[]), Err(Error::Alignment { .. })));

        assert_eq!(label_f1(&[set(&[("person", "john")])], &[set(&[("person", "jon")])]).unwrap(), 1.0);
        assert_eq!(label_f1(&[set(&[("person", "john")])], &[set(&[("place", "john")])]).unwrap(), 0.0);
        let p_wrong = vec![set(&[("date", "today")])];
        assert_eq!(label_counts(&g, &p_wrong).unwrap(), label_counts(&g, &p).unwrap());
    }

    #[test]
    fn slu_examples() {
        let g = vec![set(&[("person", "john smith"), ("time", "five")])];
        assert_eq!(slu_f1(&g, &g).unwrap(), micro_f1(&g, &g).unwrap());
        let g = vec![set(&[("person", "john smith")])];
        let p = vec![set(&[("person", "jon smith")])];
        let c = slu_counts(&g, &p).unwrap();
        assert!((c.tp - 0.7).abs() < 1e-12 && (c.fp - 0.3).abs() < 1e-12 && (c.fn_ - 0.3).abs() < 1e-12);
        assert!((c.f1() - 0.7).abs() < 1e-12);
        assert_eq!(slu_f1(&g, &[set(&[("place", "john smith")])]).unwrap(), 0.0);
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(wer_bucket(0.0), 0);
        assert_eq!(wer_bucket(0.25), 1);
        assert_eq!(wer_bucket(0.26), 2);
        assert_eq!(wer_bucket(1.7), 2);
        let e = set(&[("time", "five")]);
        let rows = wer_bucket_report(&[(0.0, e.clone(), e.clone()), (0.0, e.clone(), e.clone())]).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![2, 0, 0]);
    }
}
