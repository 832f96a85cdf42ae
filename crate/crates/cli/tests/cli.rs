use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use surt::decode::TranscriptRecord;
use surt::fsutil::write_jsonl;
use surt::heat::heat_channels;
use surt::mixsim::load_sessions;
use surt::model::is_aux_param;
use surt::train::load_checkpoint;

const SMALL: &[&str] = &[
    "--set",
    "train_groups=12",
    "--set",
    "test_groups=4",
    "--set",
    "sessions=2",
];

fn surt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surt"))
        .current_dir(dir)
        .env_remove("SURT_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = surt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn simulated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    ok(dir.path(), &args);
    dir
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--set", "asr_steps=3", "--set", "speaker_steps=2", "--set", "batch_size=2"];
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn simulate_is_deterministic_and_guards_output() {
    let a = simulated();
    let b = simulated();
    for name in ["train.jsonl", "test.jsonl", "sessions.jsonl"] {
        assert_eq!(read(a.path().join("data").join(name)), read(b.path().join("data").join(name)));
    }
    let feat = "data/features/train-00000.0.surt";
    assert_eq!(std::fs::read(a.path().join(feat)).unwrap(), std::fs::read(b.path().join(feat)).unwrap());
    assert!(a.path().join("data/simulate.conf").exists());

    let again = surt(a.path(), &["simulate"]);
    assert_eq!(again.status.code(), Some(2));
    let mut forced = vec!["simulate", "--force"];
    forced.extend_from_slice(SMALL);
    ok(a.path(), &forced);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_surt"))
        .current_dir(dir.path())
        .env("SURT_SEED", "11")
        .args(["simulate", "--set", "train_groups=2", "--set", "test_groups=1", "--set", "sessions=1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(read(dir.path().join("data/simulate.conf")).contains("seed = 11\n"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["simulate", "--set", "bogus=1"][..],
        &["simulate", "--set", "seed=x"],
        &["simulate", "--set", "noequals"],
        &["frobnicate"],
        &["decode", "--set", "decode_mode=sideways"],
    ] {
        assert_eq!(surt(dir.path(), args).status.code(), Some(1), "{args:?}");
    }
    std::fs::write(dir.path().join("c.conf"), "lr = 0.01\nunknown = 3\n").unwrap();
    assert_eq!(surt(dir.path(), &["train", "--config", "c.conf"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(surt(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(surt(dir.path(), &["decode"]).status.code(), Some(2));
    assert_eq!(surt(dir.path(), &["score"]).status.code(), Some(2));
}

#[test]
fn config_file_and_flags_compose() {
    let dir = simulated();
    std::fs::write(dir.path().join("run.conf"), "# tiny run\nasr_steps = 2\nstrategy = asr_only\ncheckpoint = a.ckpt\n").unwrap();
    let log = ok(dir.path(), &["train", "--config", "run.conf", "--set", "asr_steps=4", "--set", "batch_size=2"]);
    assert!(log.contains("params="));
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 4);
    let resolved = read(dir.path().join("a.ckpt.conf"));
    assert!(resolved.contains("asr_steps = 4\n") && resolved.contains("strategy = asr_only\n"));
    assert_eq!(read(dir.path().join("a.ckpt.log")).lines().count(), 4);
}

#[test]
fn sequential_training_freezes_asr_and_resume_continues() {
    let dir = simulated();
    train_tiny(dir.path(), &["--set", "strategy=asr_only", "--set", "checkpoint=asr.ckpt"]);
    let (asr, step) = load_checkpoint(&dir.path().join("asr.ckpt")).unwrap();
    assert_eq!(step, 3);
    let log = train_tiny(
        dir.path(),
        &["--set", "strategy=speaker_only", "--set", "resume=asr.ckpt", "--set", "checkpoint=spk.ckpt"],
    );
    assert!(log.lines().any(|l| l.starts_with("step=4 ")));
    let (spk, step) = load_checkpoint(&dir.path().join("spk.ckpt")).unwrap();
    assert_eq!(step, 5);
    let mut aux_changed = false;
    for (name, t) in asr.params.iter() {
        let after = spk.params.get(name).unwrap();
        if is_aux_param(name) {
            aux_changed |= after != t;
        } else {
            assert_eq!(after, t, "{name} moved during speaker_only");
        }
    }
    assert!(aux_changed);
    assert_eq!(surt(dir.path(), &["train", "--set", "strategy=speaker_only"]).status.code(), Some(1));
}

#[test]
fn nan_aborts_with_last_good_checkpoint() {
    let dir = simulated();
    let out = surt(
        dir.path(),
        &["train", "--set", "strategy=asr_only", "--set", "asr_steps=5", "--set", "lr=1e300", "--set", "warmup_steps=0", "--set", "clip_norm=none"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, step) = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    let log = read(dir.path().join("model.ckpt.log"));
    assert_eq!(log.lines().count() as u64, step);
    assert!(step < 5);
}

#[test]
fn decode_score_and_dump_pipeline() {
    let dir = simulated();
    train_tiny(dir.path(), &[]);
    let p = dir.path();

    for mode in ["none", "prefix", "enrollment"] {
        let t = format!("transcript={mode}.jsonl");
        let m = format!("decode_mode={mode}");
        ok(p, &["decode", "--set", &t, "--set", &m, "--set", "decode_manifest=data/sessions.jsonl"]);
        assert!(p.join(format!("{mode}.jsonl.conf")).exists());
    }
    // On single-group sessions prefix mode has nothing to prepend.
    ok(p, &["decode", "--set", "transcript=g_none.jsonl", "--set", "decode_mode=none"]);
    ok(p, &["decode", "--set", "transcript=g_prefix.jsonl", "--set", "decode_mode=prefix", "--jobs", "2"]);
    assert_eq!(read(p.join("g_none.jsonl")), read(p.join("g_prefix.jsonl")));

    let summary = ok(p, &["score", "--set", "transcript=g_none.jsonl", "--set", "oracle_check=true"]);
    assert!(summary.contains("orc_wer ") && summary.contains("oracle_mismatches 0"));
    assert!(p.join("report.json").exists() && p.join("report.json.txt").exists());

    let dump = ok(p, &["dump-embeddings"]);
    let count: usize = dump.trim().rsplit('=').next().unwrap().parse().unwrap();
    let lines = read(p.join("embeddings.jsonl"));
    assert_eq!(lines.lines().count(), count);
    let mut expected = 0;
    let records: Vec<TranscriptRecord> = read(p.join("g_none.jsonl")).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut seen = std::collections::BTreeSet::new();
    for r in &records {
        if let TranscriptRecord::Emission { session, group, rel_speaker, .. } = r {
            if seen.insert((session.clone(), *group, *rel_speaker)) {
                expected += 1;
            }
        }
    }
    assert_eq!(count, expected);
}

/// A transcript that emits each reference word on its HEAT channel, with
/// speaker ids passed through `relabel`.
fn reference_transcript(manifest: &Path, relabel: impl Fn(usize) -> usize) -> Vec<TranscriptRecord> {
    let mut out = Vec::new();
    for s in load_sessions(manifest).unwrap() {
        for (g, group) in s.groups.iter().enumerate() {
            let channels = heat_channels(&group.utterances).unwrap();
            for (u, &c) in group.utterances.iter().zip(&channels) {
                for (i, &token) in u.tokens.iter().enumerate() {
                    let spk = relabel(u.speaker);
                    out.push(TranscriptRecord::Emission {
                        session: s.id.clone(),
                        group: g,
                        channel: c,
                        frame: u.start_frame + i,
                        token,
                        rel_speaker: spk,
                        global_speaker: spk,
                        blank_conf: 0.0,
                        spk_posterior: vec![1.0],
                    });
                }
            }
        }
        out.push(TranscriptRecord::Session {
            session: s.id.clone(),
            groups: s.groups.len(),
            registry: vec![],
            skipped_labels: 0,
        });
    }
    out
}

fn metric(summary: &str, name: &str) -> f64 {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name} ")))
        .unwrap_or_else(|| panic!("no {name} in summary"))
        .parse()
        .unwrap()
}

#[test]
fn scoring_reference_and_relabeled_reference() {
    let dir = simulated();
    let p = dir.path();
    let manifest = p.join("data/sessions.jsonl");
    write_jsonl(&p.join("ref.jsonl"), &reference_transcript(&manifest, |s| s + 1)).unwrap();
    let s = ok(p, &["score", "--set", "transcript=ref.jsonl", "--set", "decode_manifest=data/sessions.jsonl", "--set", "oracle_check=true"]);
    for m in ["orc_wer", "cpwer", "wder"] {
        assert_eq!(metric(&s, m), 0.0, "{m}");
    }
    assert_eq!(metric(&s, "counting_accuracy"), 1.0);

    write_jsonl(&p.join("swap.jsonl"), &reference_transcript(&manifest, |s| 100 - s)).unwrap();
    let s = ok(p, &["score", "--set", "transcript=swap.jsonl", "--set", "decode_manifest=data/sessions.jsonl"]);
    assert_eq!(metric(&s, "cpwer"), 0.0);
    assert_eq!(metric(&s, "wder"), 0.0);
}

#[test]
fn scoring_mismatched_sessions_is_a_data_error() {
    let dir = simulated();
    let p = dir.path();
    write_jsonl(&p.join("ref.jsonl"), &reference_transcript(&p.join("data/sessions.jsonl"), |s| s)).unwrap();
    assert_eq!(surt(p, &["score", "--set", "transcript=ref.jsonl"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--set", "gradcheck_instances=20"]);
    assert_eq!(out.lines().filter(|l| l.ends_with(" pass")).count(), 4, "{out}");
}
