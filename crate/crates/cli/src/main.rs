use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tp3::asr::AsrModel;
use tp3::deliberation::{DelModel, IntegrationMode};
use tp3::experiment::{ablation_grid, make_splits, run_first_passes, run_grid, run_third_pass, ExperimentConfig, Splits};
use tp3::gradsuite::{run_suite, TOLERANCE};
use tp3::lm::LmModel;
use tp3::metrics::{evaluate, serialize_labels, EntitySet, EvalItem};
use tp3::oracle::{chained_decode, compare_report, exact_posterior, full_beams, viterbi_posterior, DiscretePipeline, PipelineKind};
use tp3::synth::{load_corpus, save_corpus, Corpus, GrammarSpec};
use tp3::training::{build_vocabularies, train_step1_asr, train_step2_lm, train_step3_deliberation};

#[derive(Parser)]
#[command(name = "tp3", about = "Three-pass spoken entity extraction: data, training, decoding and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the step this command runs.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Concat,
    Xattn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mask {
    Hasr,
    Casr,
    Hlm,
}

#[derive(Args, Clone)]
struct PassFlags {
    #[arg(long)]
    beam1: Option<usize>,
    #[arg(long)]
    beam2: Option<usize>,
    #[arg(long)]
    beam3: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Zero one deliberation input; repeatable.
    #[arg(long, value_enum)]
    mask: Vec<Mask>,
    #[arg(long)]
    no_residual: bool,
    #[arg(long)]
    no_teacher_forcing: bool,
}

#[derive(Args, Clone)]
struct Models {
    #[arg(long)]
    asr: PathBuf,
    #[arg(long)]
    lm: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and dev corpora.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 1: train the ASR subnetwork.
    TrainAsr {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 2: train the LM subnetwork on gold transcripts.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 3: train the deliberation subnetwork over frozen ASR and LM.
    TrainDel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        flags: PassFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-pass decode of one split.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        del: PathBuf,
        #[command(flatten)]
        flags: PassFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold (JSONL with id, transcript and labels or entities).
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the six-row ablation grid on the dev split.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        models: Models,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact vs Viterbi vs chained decoding on random discrete pipelines.
    Oracle {
        #[arg(long, default_value_t = 1000)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate one hand-built pipeline (JSON tables) instead.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and block.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TP3_THREADS") {
        let n: usize = v.parse().with_context(|| format!("TP3_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => Ok(ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_run_dir(out: &Path) -> Result<()> {
    if out.exists() {
        bail!("run directory {} already exists", out.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::create_dir(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &PassFlags) {
    for (i, b) in [f.beam1, f.beam2, f.beam3].into_iter().enumerate() {
        if let Some(b) = b {
            cfg.decode.beams[i] = b;
        }
    }
    if let Some(m) = f.mode {
        cfg.del.mode = mode(m);
    }
    let fl = &mut cfg.del.flags;
    for m in &f.mask {
        match m {
            Mask::Hasr => fl.mask_h_asr = true,
            Mask::Casr => fl.mask_c_asr = true,
            Mask::Hlm => fl.mask_h_lm = true,
        }
    }
    if f.no_residual {
        fl.residual = false;
    }
    if f.no_teacher_forcing {
        fl.teacher_force_transcript = false;
    }
}

fn mode(m: Mode) -> IntegrationMode {
    match m {
        Mode::Concat => IntegrationMode::Concat,
        Mode::Xattn => IntegrationMode::Xattn,
    }
}

fn split(data: &Path, name: &str) -> Result<Corpus> {
    let dir = data.join(name);
    load_corpus(&dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_asr(cfg: &ExperimentConfig, corpus: &Corpus, path: &Path) -> Result<AsrModel> {
    let (av, _) = build_vocabularies(&corpus.grammar);
    let mut m = AsrModel::new(cfg.asr.asr_config(corpus.codebook.cols()), av, 0)?;
    m.store.load(path).with_context(|| format!("loading ASR checkpoint {}", path.display()))?;
    Ok(m)
}

fn load_lm(cfg: &ExperimentConfig, corpus: &Corpus, path: &Path) -> Result<LmModel> {
    let (_, lv) = build_vocabularies(&corpus.grammar);
    let mut m = LmModel::new(cfg.lm.lm_config(), lv, 0)?;
    m.store.load(path).with_context(|| format!("loading LM checkpoint {}", path.display()))?;
    Ok(m)
}

fn load_del(cfg: &ExperimentConfig, lm: &LmModel, path: &Path) -> Result<DelModel> {
    let mut m = DelModel::new(cfg.del.del_config(), lm.vocab.len(), 0)?;
    m.store
        .load(path)
        .with_context(|| format!("loading deliberation checkpoint {} as {} mode", path.display(), cfg.del.mode))?;
    Ok(m)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::TrainAsr { common, data, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.asr.seed = s;
            }
            let train = split(&data, "train")?;
            let (av, _) = build_vocabularies(&train.grammar);
            let mut m = AsrModel::new(cfg.asr.asr_config(train.codebook.cols()), av, cfg.asr.seed)?;
            create_run_dir(&out)?;
            let rec = train_step1_asr(&mut m, &train.utterances, &cfg.asr)?;
            m.store.save(&out.join("asr.ckpt"))?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            rec.save(&out.join("record.json"))?;
            println!("asr: {} steps, teacher-forced accuracy {:.4}, hash {}", rec.curve.len(), rec.final_accuracy, rec.checkpoint_hash);
            Ok(())
        }
        Command::TrainLm { common, data, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.lm.seed = s;
            }
            let train = split(&data, "train")?;
            let (_, lv) = build_vocabularies(&train.grammar);
            let mut m = LmModel::new(cfg.lm.lm_config(), lv, cfg.lm.seed)?;
            create_run_dir(&out)?;
            let rec = train_step2_lm(&mut m, &train.utterances, &cfg.lm)?;
            m.store.save(&out.join("lm.ckpt"))?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            rec.save(&out.join("record.json"))?;
            println!("lm: {} steps, teacher-forced accuracy {:.4}, hash {}", rec.curve.len(), rec.final_accuracy, rec.checkpoint_hash);
            Ok(())
        }
        Command::TrainDel {
            common,
            data,
            models,
            flags,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.del.seed = s;
            }
            apply_flags(&mut cfg, &flags);
            let train = split(&data, "train")?;
            let asr = load_asr(&cfg, &train, &models.asr)?;
            let lm = load_lm(&cfg, &train, &models.lm)?;
            let mut del = DelModel::new(cfg.del.del_config(), lm.vocab.len(), cfg.del.seed)?;
            create_run_dir(&out)?;
            let rec = train_step3_deliberation(&mut del, &asr, &lm, &train.utterances, &cfg.del)?;
            del.store.save(&out.join("del.ckpt"))?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            rec.save(&out.join("record.json"))?;
            println!(
                "deliberation ({}): {} steps, teacher-forced accuracy {:.4}, alpha {:.4}, hash {}",
                cfg.del.mode,
                rec.curve.len(),
                rec.final_accuracy,
                del.alpha(),
                rec.checkpoint_hash
            );
            Ok(())
        }
        Command::Decode {
            common,
            data,
            split: name,
            models,
            del,
            flags,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            apply_flags(&mut cfg, &flags);
            let corpus = split(&data, &name)?;
            let asr = load_asr(&cfg, &corpus, &models.asr)?;
            let lm = load_lm(&cfg, &corpus, &models.lm)?;
            let del = load_del(&cfg, &lm, &del)?;
            create_run_dir(&out)?;
            let firsts = run_first_passes(&asr, &lm, &corpus.utterances, &cfg.decode)?;
            let finals = run_third_pass(&del, &firsts, &cfg.decode, &cfg.del.flags)?;
            let mut pred = String::new();
            let mut timing = String::new();
            for ((u, f), y) in corpus.utterances.iter().zip(&firsts).zip(&finals) {
                let row = json!({
                    "id": u.id,
                    "transcript": asr.text(&f.asr.transcript),
                    "lm_labels": lm.text(&f.lm.labels),
                    "labels": lm.text(y),
                });
                pred += &(row.to_string() + "\n");
                timing += &(json!({"id": u.id, "timings": f.timings}).to_string() + "\n");
            }
            write(&out.join("pred.jsonl"), &pred)?;
            write(&out.join("timings.jsonl"), &timing)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            write_json(
                &out.join("record.json"),
                &json!({
                    "command": "decode",
                    "split": name,
                    "n": corpus.utterances.len(),
                    "alpha": del.alpha(),
                    "mode": cfg.del.mode,
                    "flags": cfg.del.flags,
                    "checkpoints": {"asr": asr.store.hash(), "lm": lm.store.hash(), "del": del.store.hash()},
                }),
            )?;
            println!("decoded {} utterances into {}", corpus.utterances.len(), out.join("pred.jsonl").display());
            Ok(())
        }
        Command::Eval { gold, pred, out } => eval(&gold, &pred, out.as_deref()),
        Command::Ablate {
            common,
            data,
            models,
            mode: m,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.del.seed = s;
            }
            let base = m.map(mode).unwrap_or(cfg.del.mode);
            let train = split(&data, "train")?;
            let dev = split(&data, "dev")?;
            let asr = load_asr(&cfg, &train, &models.asr)?;
            let lm = load_lm(&cfg, &train, &models.lm)?;
            create_run_dir(&out)?;
            let splits = Splits {
                grammar: train.grammar,
                codebook: train.codebook,
                train: train.utterances,
                dev: dev.utterances,
            };
            let (cascade_report, rows) = run_grid(&splits, &asr, &lm, &cfg, &ablation_grid(base))?;
            let mut table = format!(
                "| Model ({base}) | micro-F1 | SLU-F1 | label-F1 |\n|---|---|---|---|\n| passes 1+2 | {:.4} | {:.4} | {:.4} |\n",
                cascade_report.micro_f1, cascade_report.slu_f1, cascade_report.label_f1
            );
            for r in &rows {
                table += &format!(
                    "| {} | {:.4} | {:.4} | {:.4} |\n",
                    r.name, r.report.micro_f1, r.report.slu_f1, r.report.label_f1
                );
            }
            write(&out.join("table.md"), &table)?;
            write_json(&out.join("ablation.json"), &json!({"cascade": cascade_report, "rows": rows}))?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            print!("{table}");
            Ok(())
        }
        Command::Oracle {
            models,
            seed,
            pipeline,
            out,
        } => {
            let report = match pipeline {
                Some(p) => single_pipeline(&DiscretePipeline::load(&p).with_context(|| format!("loading {}", p.display()))?)?,
                None => serde_json::to_value(compare_report(models, seed, PipelineKind::Random)?)?,
            };
            if let Some(o) = out {
                create_run_dir(&o)?;
                write_json(&o.join("report.json"), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::GradCheck { seed, out } => {
            let cases = run_suite(seed)?;
            let failed = cases.iter().filter(|c| !c.passed()).count();
            for c in &cases {
                println!(
                    "{} {:<48} max_rel_err {:.3e} over {} coords",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_error,
                    c.coordinates
                );
            }
            if let Some(o) = out {
                create_run_dir(&o)?;
                write_json(&o.join("gradcheck.json"), &cases)?;
            }
            if failed > 0 {
                bail!("{failed} of {} cases exceed relative error {TOLERANCE:e}", cases.len());
            }
            Ok(())
        }
    }
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(0);
    let grammar = GrammarSpec::default_grammar();
    let s = make_splits(&grammar, cfg.n_train, cfg.n_dev, &cfg.noise, seed)?;
    create_run_dir(out)?;
    for (name, utts) in [("train", s.train), ("dev", s.dev)] {
        let corpus = Corpus {
            grammar: grammar.clone(),
            codebook: s.codebook.clone(),
            utterances: utts,
        };
        save_corpus(&corpus, &out.join(name))?;
    }
    write(&out.join("config.txt"), &cfg.to_text())?;
    write_json(
        &out.join("record.json"),
        &json!({"command": "gen-data", "seed": seed, "n_train": cfg.n_train, "n_dev": cfg.n_dev, "noise": cfg.noise}),
    )?;
    println!("wrote {} train and {} dev utterances to {}", cfg.n_train, cfg.n_dev, out.display());
    Ok(())
}

struct Row {
    transcript: String,
    labels: String,
}

/// Id → (transcript, label text). Labels come from a `labels` string or an
/// `entities` list.
fn read_rows(path: &Path) -> Result<BTreeMap<String, Row>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        let id = v["id"].as_str().with_context(|| format!("{}:{}: missing id", path.display(), n + 1))?;
        let transcript = v["transcript"].as_str().unwrap_or_default().to_string();
        let labels = match (&v["labels"], &v["entities"]) {
            (Value::String(s), _) => s.clone(),
            (_, e @ Value::Array(_)) => serialize_labels(&serde_json::from_value::<EntitySet>(e.clone())?),
            _ => bail!("{}:{}: neither labels nor entities", path.display(), n + 1),
        };
        if out.insert(id.to_string(), Row { transcript, labels }).is_some() {
            bail!("{}: duplicate id {id}", path.display());
        }
    }
    Ok(out)
}

fn eval(gold: &Path, pred: &Path, out: Option<&Path>) -> Result<()> {
    let g = read_rows(gold)?;
    let p = read_rows(pred)?;
    if g.len() != p.len() || g.keys().any(|k| !p.contains_key(k)) {
        return Err(tp3::Error::Alignment {
            golds: g.len(),
            preds: p.len(),
        }
        .into());
    }
    let items: Vec<EvalItem> = g
        .iter()
        .map(|(id, gr)| EvalItem {
            id: id.clone(),
            ref_transcript: gr.transcript.clone(),
            hyp_transcript: p[id].transcript.clone(),
            gold_labels: gr.labels.clone(),
            pred_labels: p[id].labels.clone(),
        })
        .collect();
    let report = evaluate(&items)?;
    if let Some(o) = out {
        create_run_dir(o)?;
        write_json(&o.join("metrics.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn single_pipeline(p: &DiscretePipeline) -> Result<Value> {
    let mut rows = Vec::new();
    for x in p.x_sequences() {
        let mut ys = Vec::new();
        for y in p.y_sequences() {
            let (v, s, l) = viterbi_posterior(p, &x, &y)?;
            ys.push(json!({"y": y, "exact": exact_posterior(p, &x, &y)?, "viterbi": v, "viterbi_s": s, "viterbi_y_lm": l}));
        }
        rows.push(json!({"x": x, "chained": chained_decode(p, &x, full_beams(p))?, "greedy_chain": chained_decode(p, &x, [1, 1, 1])?, "posteriors": ys}));
    }
    Ok(json!({ "inputs": rows }))
}
