//! `surt` command-line driver: simulate, train, decode, score, gradcheck and
//! dump-embeddings over the toy pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use surt::config::{RunConfig, Strategy};
use surt::decode::{decode_session, hypotheses_from_records, speaker_embeddings, SessionTranscript, TranscriptRecord};
use surt::fsutil::{write_atomic, write_jsonl};
use surt::gradcheck::run_gradcheck;
use surt::mixsim::{
    corpus_stats, derive_seed, load_sessions, make_corpus, make_group_set, make_sessions, read_manifest, write_sessions,
    Session, UtteranceGroup,
};
use surt::model::{Model, TrainMode};
use surt::scoring::{references_from_manifest, score, verify_with_oracles};
use surt::train::{load_checkpoint, save_checkpoint, train_stage, StepLog};
use surt::SurtError;

#[derive(Parser, Debug)]
#[command(name = "surt", version, about = "Speaker-attributed multi-talker transducer toy pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker cap for parallel stages.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the corpus, group sets and sessions.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model from the training manifest.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Decode a manifest into transcript JSON lines.
    Decode {
        #[command(flatten)]
        common: Common,
    },
    /// Score a transcript against the decode manifest.
    Score {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic loss gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write mean auxiliary-encoder vectors per group and speaker.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<SurtError> for Failure {
    fn from(e: SurtError) -> Self {
        match e {
            SurtError::Config(_) => Failure::Usage(e.to_string()),
            SurtError::NonFinite(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Defaults, then the config file, then `SURT_SEED`, then flags.
fn resolve(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Ok(seed) = std::env::var("SURT_SEED") {
        cfg.set("seed", &seed).map_err(|e| Failure::Usage(format!("SURT_SEED: {e}")))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if cfg.jobs == 0 {
        return Err(Failure::Usage("jobs must be positive".into()));
    }
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_resolved(cfg: &RunConfig, path: &Path) -> CmdResult {
    write_atomic(path, cfg.to_text().as_bytes())?;
    Ok(())
}

/// Map `f` over `items` on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(items.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

fn cmd_simulate(cfg: &RunConfig, out: &Path, force: bool) -> CmdResult {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Failure::Data(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
        if non_empty {
            std::fs::remove_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
        }
    }
    let corpus = make_corpus(&cfg.corpus_spec())?;
    let group_cfg = cfg.group_config();
    let sets: [(&str, Vec<Session>); 3] = [
        ("train", make_group_set(&corpus, &group_cfg, cfg.train_groups, "train", derive_seed(cfg.seed, 1))?),
        ("test", make_group_set(&corpus, &group_cfg, cfg.test_groups, "test", derive_seed(cfg.seed, 2))?),
        ("sessions", make_sessions(&corpus, &cfg.session_config(), cfg.sessions, "session", derive_seed(cfg.seed, 3))?),
    ];
    println!("set        sessions groups utterances frames overlap% silence%");
    for (name, sessions) in &sets {
        write_sessions(out, &format!("{name}.jsonl"), sessions)?;
        let st = corpus_stats(sessions);
        println!(
            "{name:<10} {:>8} {:>6} {:>10} {:>6} {:>8.2} {:>8.2}",
            st.sessions, st.groups, st.utterances, st.frames, st.overlap_pct, st.silence_pct
        );
    }
    write_resolved(cfg, &out.join("simulate.conf"))
}

fn training_groups(cfg: &RunConfig) -> std::result::Result<Vec<UtteranceGroup>, Failure> {
    let sessions = load_sessions(Path::new(&cfg.train_manifest))?;
    Ok(sessions.into_iter().flat_map(|s| s.groups).collect())
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let groups = training_groups(cfg)?;
    let ckpt = PathBuf::from(&cfg.checkpoint);
    let (mut model, mut step) = match &cfg.resume {
        Some(path) => load_checkpoint(Path::new(path))?,
        None => (Model::new(cfg.model_config(), cfg.seed)?, 0),
    };
    if cfg.strategy == Strategy::SpeakerOnly && cfg.resume.is_none() {
        return Err(Failure::Usage("strategy speaker_only needs resume = <asr checkpoint>".into()));
    }
    println!("params={}", model.num_params());
    let stages: Vec<TrainMode> = match cfg.strategy {
        Strategy::Sequential => vec![TrainMode::AsrOnly, TrainMode::SpeakerOnly],
        Strategy::Joint => vec![TrainMode::Joint],
        Strategy::AsrOnly => vec![TrainMode::AsrOnly],
        Strategy::SpeakerOnly => vec![TrainMode::SpeakerOnly],
    };
    let mut log = String::new();
    for mode in stages {
        let stage = cfg.stage_config(mode);
        let mut last_good = step;
        let result = train_stage(&mut model, &groups, &stage, step, |l: &StepLog| {
            let line = l.line();
            println!("{line}");
            log.push_str(&line);
            log.push('\n');
            last_good = l.step;
        });
        match result {
            Ok(s) => step = s,
            Err(e) => {
                // The model still holds the parameters of the last good step.
                save_checkpoint(&ckpt, &model, last_good)?;
                write_atomic(&with_suffix(&ckpt, ".log"), log.as_bytes())?;
                write_resolved(cfg, &with_suffix(&ckpt, ".conf"))?;
                eprintln!("saved last good checkpoint to {}", ckpt.display());
                return Err(e.into());
            }
        }
    }
    save_checkpoint(&ckpt, &model, step)?;
    write_atomic(&with_suffix(&ckpt, ".log"), log.as_bytes())?;
    write_resolved(cfg, &with_suffix(&ckpt, ".conf"))?;
    println!("checkpoint={} step={step}", ckpt.display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> std::result::Result<Model, Failure> {
    Ok(load_checkpoint(Path::new(&cfg.checkpoint))?.0)
}

fn cmd_decode(cfg: &RunConfig) -> CmdResult {
    let model = load_model(cfg)?;
    let sessions = load_sessions(Path::new(&cfg.decode_manifest))?;
    let results = par_map(&sessions, cfg.jobs, |s| decode_session(&model, s, cfg.decode_mode));
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (s, r) in sessions.iter().zip(results) {
        match r {
            Ok(t) => {
                check_sync(&t)?;
                records.extend(t.records());
            }
            Err(e @ SurtError::LabelOverflow { .. }) => {
                eprintln!("session {}: {e}", s.id);
                failed.push(s.id.clone());
            }
            Err(e) => return Err(e.into()),
        }
    }
    let out = PathBuf::from(&cfg.transcript);
    write_jsonl(&out, &records)?;
    write_resolved(cfg, &with_suffix(&out, ".conf"))?;
    println!(
        "transcript={} sessions={} mode={:?}",
        out.display(),
        sessions.len() - failed.len(),
        cfg.decode_mode
    );
    if !failed.is_empty() {
        return Err(Failure::Data(format!("{} session(s) overflowed K_max", failed.len())));
    }
    Ok(())
}

/// Every emitted token carries exactly one speaker label with a known
/// global id.
fn check_sync(t: &SessionTranscript) -> CmdResult {
    for (g, gt) in t.groups.iter().enumerate() {
        for ch in &gt.channels {
            if ch.tokens().len() != ch.speakers().len() {
                return Err(Failure::Numerical(format!("{} group {g}: token and speaker counts differ", t.session_id)));
            }
            if let Some(e) = ch.emissions.iter().find(|e| !gt.rel_to_global.contains_key(&e.speaker)) {
                return Err(Failure::Numerical(format!(
                    "{} group {g}: label {} has no global id",
                    t.session_id, e.speaker
                )));
            }
        }
    }
    Ok(())
}

fn read_transcript(path: &Path) -> std::result::Result<Vec<TranscriptRecord>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::Data(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

fn cmd_score(cfg: &RunConfig) -> CmdResult {
    let refs = references_from_manifest(&read_manifest(Path::new(&cfg.decode_manifest))?)?;
    let hyps = hypotheses_from_records(&read_transcript(Path::new(&cfg.transcript))?);
    let report = score(&refs, &hyps)?;
    let out = PathBuf::from(&cfg.report);
    write_atomic(&out, serde_json::to_string_pretty(&report).map_err(SurtError::from)?.as_bytes())?;
    let summary = report.summary();
    write_atomic(&with_suffix(&out, ".txt"), summary.as_bytes())?;
    write_resolved(cfg, &with_suffix(&out, ".conf"))?;
    print!("{summary}");
    if cfg.oracle_check {
        let (mismatches, checked) = verify_with_oracles(&refs, &hyps, &report);
        println!("oracle_checked {checked}");
        println!("oracle_mismatches {mismatches}");
        if mismatches > 0 {
            return Err(Failure::Numerical(format!("{mismatches} oracle mismatch(es)")));
        }
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> CmdResult {
    let reports = run_gradcheck(cfg.gradcheck_instances, cfg.seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "loss={} instances={} max_rel_err={:.3e} {}",
            r.loss,
            r.instances,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} loss(es) failed the gradient check")));
    }
    Ok(())
}

fn cmd_dump_embeddings(cfg: &RunConfig) -> CmdResult {
    let model = load_model(cfg)?;
    let sessions = load_sessions(Path::new(&cfg.decode_manifest))?;
    let mut all = Vec::new();
    for r in par_map(&sessions, cfg.jobs, |s| speaker_embeddings(&model, s)) {
        all.extend(r?);
    }
    let out = PathBuf::from(&cfg.embeddings);
    write_jsonl(&out, &all)?;
    write_resolved(cfg, &with_suffix(&out, ".conf"))?;
    println!("embeddings={} vectors={}", out.display(), all.len());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Simulate { common, out, force } => cmd_simulate(&resolve(&common)?, &out, force),
        Command::Train { common } => cmd_train(&resolve(&common)?),
        Command::Decode { common } => cmd_decode(&resolve(&common)?),
        Command::Score { common } => cmd_score(&resolve(&common)?),
        Command::Gradcheck { common } => cmd_gradcheck(&resolve(&common)?),
        Command::DumpEmbeddings { common } => cmd_dump_embeddings(&resolve(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
