//! Seeded synthetic spoken-entity corpus: grammar templates render
//! transcripts, and each character becomes noisy frames drawn around a fixed
//! per-character codebook vector.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::asr::FeatureSequence;
use crate::error::{Error, Result};
use crate::metrics::{serialize_labels, Entity, EntitySet};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"TPSF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEAT_DIM: usize = 16;
/// Characters the codebook covers, in row order.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSpec {
    /// Sentences with `<LABEL>` slot markers.
    pub templates: Vec<String>,
    /// Label → filler mentions.
    pub fillers: BTreeMap<String, Vec<String>>,
}

fn slot_label(tok: &str) -> Option<String> {
    tok.strip_prefix('<')
        .and_then(|t| t.strip_suffix('>'))
        .map(str::to_lowercase)
}

impl GrammarSpec {
    pub fn labels(&self) -> Vec<String> {
        self.fillers.keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("grammar has no templates".into()));
        }
        for t in &self.templates {
            for tok in t.split_whitespace() {
                if let Some(l) = slot_label(tok) {
                    match self.fillers.get(&l) {
                        Some(f) if !f.is_empty() => {}
                        _ => return Err(Error::Config(format!("slot <{l}> in {t:?} has no fillers"))),
                    }
                }
            }
        }
        for text in self.templates.iter().chain(self.fillers.values().flatten()) {
            if let Some(c) = text.chars().find(|c| !ALPHABET.contains(*c) && !"<>".contains(*c) && !c.is_ascii_uppercase()) {
                return Err(Error::Config(format!("character {c:?} in {text:?} outside the alphabet")));
            }
        }
        Ok(())
    }

    /// Every word a transcript can contain.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = self
            .templates
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|t| slot_label(t).is_none())
            .chain(self.fillers.values().flatten().flat_map(|f| f.split_whitespace()))
            .map(String::from)
            .collect();
        w.sort();
        w.dedup();
        w
    }

    /// Twelve templates over five labels with twenty fillers each.
    pub fn default_grammar() -> Self {
        let templates = [
            "wake me up at <TIME>",
            "set an alarm for <TIME>",
            "call <PERSON>",
            "send a message to <PERSON> at <TIME>",
            "turn on the <DEVICE>",
            "turn off the <DEVICE> in <PLACE>",
            "what is the weather in <PLACE>",
            "navigate to <PLACE>",
            "set the volume to <NUMBER>",
            "remind <PERSON> to buy <NUMBER> apples",
            "play music on the <DEVICE> at <TIME>",
            "book a table for <NUMBER> in <PLACE>",
        ];
        let f = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut fillers = BTreeMap::new();
        fillers.insert(
            "time".to_string(),
            f(&[
                "five am", "six thirty", "seven pm", "noon", "midnight", "eight fifteen", "nine am", "ten pm",
                "tomorrow morning", "tonight", "half past two", "quarter to four", "eleven", "three pm",
                "four thirty", "one am", "two oclock", "sunrise", "six pm", "ten thirty",
            ]),
        );
        fillers.insert(
            "person".to_string(),
            f(&[
                "john", "mary", "john smith", "alice", "bob", "carol", "david", "emma", "frank", "grace", "henry",
                "isabel", "jack", "karen", "liam", "mia", "noah", "olivia", "peter", "quinn",
            ]),
        );
        fillers.insert(
            "place".to_string(),
            f(&[
                "london", "paris", "berlin", "new york", "the kitchen", "the office", "tokyo", "madrid", "rome",
                "boston", "the garage", "chicago", "dublin", "the bedroom", "oslo", "vienna", "cairo", "lima",
                "seattle", "the living room",
            ]),
        );
        fillers.insert(
            "device".to_string(),
            f(&[
                "lights", "tv", "radio", "heater", "fan", "speaker", "oven", "washer", "dryer", "lamp",
                "air conditioner", "coffee maker", "dishwasher", "projector", "printer", "kettle", "microwave",
                "router", "thermostat", "vacuum",
            ]),
        );
        fillers.insert(
            "number".to_string(),
            f(&[
                "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
                "twenty", "thirty", "fifty", "a hundred", "fifteen", "sixteen", "forty", "sixty",
            ]),
        );
        GrammarSpec {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            fillers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub sigma: f64,
    pub repeat: (usize, usize),
    pub drop_prob: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            sigma: 1.0,
            repeat: (1, 1),
            drop_prob: 0.0,
        }
    }
}

impl NoiseProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be ≥ 0", self.sigma)));
        }
        if self.repeat.0 < 1 || self.repeat.0 > self.repeat.1 {
            return Err(Error::Config(format!("bad repeat range {:?}", self.repeat)));
        }
        if !(0.0..=0.5).contains(&self.drop_prob) {
            return Err(Error::Config(format!("drop_prob {} outside [0, 0.5]", self.drop_prob)));
        }
        Ok(())
    }
}

/// Rounds through f32 so in-memory features equal their on-disk form.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// One unit-Gaussian vector per alphabet character.
pub fn make_codebook(seed: u64, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ALPHABET.chars().count();
    let data = (0..n * dim).map(|_| f32_exact(rng.sample(StandardNormal))).collect();
    Tensor::matrix(n, dim, data).expect("codebook shape")
}

/// Frames for a transcript: each character contributes `repeat` copies of
/// its codebook row (or none, with probability `drop_prob`), plus Gaussian
/// noise. At least one frame always survives.
pub fn render_features(transcript: &str, codebook: &Tensor, noise: &NoiseProfile, seed: u64) -> Result<FeatureSequence> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = codebook.cols();
    let mut rows: Vec<usize> = Vec::new();
    for c in transcript.chars() {
        let idx = ALPHABET
            .find(c)
            .ok_or_else(|| Error::Config(format!("character {c:?} has no codebook vector")))?;
        let r = rng.random_range(noise.repeat.0..=noise.repeat.1);
        if noise.drop_prob > 0.0 && rng.random::<f64>() < noise.drop_prob {
            continue;
        }
        rows.extend(std::iter::repeat_n(idx, r));
    }
    if rows.is_empty() {
        let c = transcript.chars().next().unwrap_or(' ');
        rows.push(ALPHABET.find(c).unwrap_or(0));
    }
    let normal = Normal::new(0.0, noise.sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        for &v in codebook.row(r) {
            let n = if noise.sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data.push(f32_exact(v + n));
        }
    }
    FeatureSequence::new(Tensor::matrix(rows.len(), d, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub entities: EntitySet,
    pub features: FeatureSequence,
}

impl Utterance {
    pub fn label_text(&self) -> String {
        serialize_labels(&self.entities)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub grammar: GrammarSpec,
    pub codebook: Tensor,
    pub utterances: Vec<Utterance>,
}

/// Seed for utterance `i`, independent across ids.
fn utterance_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` utterances named `{prefix}{i:05}`; a pure function of its arguments.
pub fn generate_corpus(
    grammar: &GrammarSpec,
    n: usize,
    seed: u64,
    noise: &NoiseProfile,
    codebook: &Tensor,
    prefix: &str,
) -> Result<Vec<Utterance>> {
    grammar.validate()?;
    noise.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = utterance_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let template = &grammar.templates[rng.random_range(0..grammar.templates.len())];
        let mut words = Vec::new();
        let mut entities = Vec::new();
        for tok in template.split_whitespace() {
            match slot_label(tok) {
                Some(label) => {
                    let opts = &grammar.fillers[&label];
                    let m = &opts[rng.random_range(0..opts.len())];
                    words.push(m.clone());
                    entities.push(Entity::new(&label, m));
                }
                None => words.push(tok.to_string()),
            }
        }
        let transcript = words.join(" ");
        let features = render_features(&transcript, codebook, noise, s ^ 0xfeed)?;
        out.push(Utterance {
            id: format!("{prefix}{i:05}"),
            transcript,
            entities: EntitySet::new(entities),
            features,
        });
    }
    Ok(out)
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, features_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn features_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + t.data().len() * 4);
    b.extend_from_slice(FEATURE_MAGIC);
    b.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    b.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    b.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        b.extend_from_slice(&(v as f32).to_le_bytes());
    }
    b
}

pub fn features_from_bytes(b: &[u8]) -> Result<Tensor> {
    let fmt = |offset: usize, detail: String| Error::Format { offset, detail };
    if b.len() < 16 {
        return Err(fmt(b.len(), format!("truncated header: {} bytes", b.len())));
    }
    if &b[..4] != FEATURE_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &b[..4])));
    }
    let u = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    if u(4) != FEATURE_VERSION {
        return Err(fmt(4, format!("unsupported feature version {}", u(4))));
    }
    let (t, d) = (u(8) as usize, u(12) as usize);
    let need = 16 + t * d * 4;
    if b.len() != need {
        return Err(fmt(b.len().min(need), format!("expected {need} bytes for {t}×{d}, found {}", b.len())));
    }
    let data = b[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::matrix(t, d, data)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&b)
}

#[derive(Serialize, Deserialize)]
struct Row {
    id: String,
    transcript: String,
    entities: EntitySet,
    feature_file: String,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CODEBOOK_FILE: &str = "codebook.tpsf";
pub const GRAMMAR_FILE: &str = "grammar.json";

/// Writes `dir/corpus.jsonl`, `dir/features/<id>.tpsf`, the codebook and the
/// grammar. `dir` must not already exist.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::Config(format!("{} already exists", dir.display())));
    }
    let feats = dir.join("features");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    write_features(&dir.join(CODEBOOK_FILE), &corpus.codebook)?;
    let g = serde_json::to_string_pretty(&corpus.grammar)?;
    fs::write(dir.join(GRAMMAR_FILE), g).map_err(|e| Error::io(dir.join(GRAMMAR_FILE), e))?;
    let path = dir.join(CORPUS_FILE);
    let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for u in &corpus.utterances {
        let rel = format!("features/{}.tpsf", u.id);
        write_features(&dir.join(&rel), u.features.frames())?;
        let row = Row {
            id: u.id.clone(),
            transcript: u.transcript.clone(),
            entities: u.entities.clone(),
            feature_file: rel,
        };
        writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&path, e))?;
    }
    f.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let codebook = read_features(&dir.join(CODEBOOK_FILE))?;
    let gpath = dir.join(GRAMMAR_FILE);
    let grammar: GrammarSpec = serde_json::from_str(&fs::read_to_string(&gpath).map_err(|e| Error::io(&gpath, e))?)?;
    let path = dir.join(CORPUS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut utterances = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Row = serde_json::from_str(line)?;
        let fpath: PathBuf = dir.join(&row.feature_file);
        if !fpath.exists() {
            return Err(Error::Resolution {
                what: "feature file",
                id: row.id,
                path: fpath,
            });
        }
        let features = FeatureSequence::new(read_features(&fpath)?)?;
        utterances.push(Utterance {
            id: row.id,
            transcript: row.transcript,
            entities: row.entities,
            features,
        });
    }
    Ok(Corpus {
        grammar,
        codebook,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::parse_label_sequence;

    fn quiet() -> NoiseProfile {
        NoiseProfile {
            sigma: 0.0,
            repeat: (1, 1),
            drop_prob: 0.0,
        }
    }

    #[test]
    fn default_grammar_is_valid() {
        let g = GrammarSpec::default_grammar();
        g.validate().unwrap();
        assert_eq!(g.templates.len(), 12);
        assert_eq!(g.labels(), vec!["device", "number", "person", "place", "time"]);
        assert!(g.fillers.values().all(|f| f.len() == 20));
    }

    #[test]
    fn empty_grammar_rejected() {
        let g = GrammarSpec {
            templates: vec![],
            fillers: BTreeMap::new(),
        };
        let cb = make_codebook(0, 4);
        assert!(matches!(generate_corpus(&g, 1, 0, &quiet(), &cb, "u"), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_rendering_concatenates_codebook() {
        let cb = make_codebook(3, FEAT_DIM);
        let x = render_features("ab c", &cb, &quiet(), 1).unwrap();
        assert_eq!(x.len(), 4);
        assert_eq!(x.frames().row(0), cb.row(1));
        assert_eq!(x.frames().row(2), cb.row(0));
        let twice = NoiseProfile {
            repeat: (2, 2),
            ..quiet()
        };
        let x2 = render_features("ab c", &cb, &twice, 1).unwrap();
        assert_eq!(x2.len(), 8);
        assert_eq!(x2.frames().row(2), cb.row(2));
        assert_eq!(x2.frames().row(3), cb.row(2));
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let g = GrammarSpec::default_grammar();
        let cb = make_codebook(1, FEAT_DIM);
        let noise = NoiseProfile::default();
        let a = generate_corpus(&g, 20, 9, &noise, &cb, "u").unwrap();
        let b = generate_corpus(&g, 20, 9, &noise, &cb, "u").unwrap();
        assert_eq!(a, b);
        for u in &a {
            for e in &u.entities.entities {
                assert!(u.transcript.contains(&e.mention));
            }
            assert_eq!(parse_label_sequence(&u.label_text()).entities, u.entities);
        }
        assert_eq!(generate_corpus(&g, 1, 9, &noise, &cb, "u").unwrap().len(), 1);
    }

    #[test]
    fn corpus_round_trip_and_errors() {
        let g = GrammarSpec::default_grammar();
        let cb = make_codebook(1, FEAT_DIM);
        let corpus = Corpus {
            grammar: g.clone(),
            codebook: cb.clone(),
            utterances: generate_corpus(&g, 5, 2, &NoiseProfile::default(), &cb, "u").unwrap(),
        };
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("c");
        save_corpus(&corpus, &dir).unwrap();
        assert_eq!(load_corpus(&dir).unwrap(), corpus);
        assert!(save_corpus(&corpus, &dir).is_err());

        let f = dir.join("features/u00001.tpsf");
        let mut bytes = fs::read(&f).unwrap();
        bytes[0] = b'X';
        fs::write(&f, &bytes).unwrap();
        assert!(matches!(load_corpus(&dir), Err(Error::Format { offset: 0, .. })));
        fs::remove_file(&f).unwrap();
        match load_corpus(&dir) {
            Err(Error::Resolution { id, .. }) => assert_eq!(id, "u00001"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(features_from_bytes(&features_to_bytes(&cb)[..30]), Err(Error::Format { .. })));
    }
}
