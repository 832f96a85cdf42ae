//! Synthetic corpus and mixture simulation.
//!
//! A frame is `prototype[token] + offset[speaker] + noise`; each token spans
//! `frames_per_token` frames. Groups are built by placing single-speaker
//! utterances on a timeline with limited pairwise overlap and summing them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurtError};
use crate::fsutil::write_jsonl;
use crate::heat::Utterance;
use crate::tensor::{read_container, write_container, Tensor};

/// Derive an independent stream seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub num_speakers: usize,
    pub speaker_offset_scale: f64,
    /// When positive, speaker offsets occupy only the last `speaker_dims`
    /// feature dimensions and token prototypes only the rest.
    #[serde(default)]
    pub speaker_dims: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab_size: 16,
            feature_dim: 16,
            frames_per_token: 4,
            num_speakers: 8,
            speaker_offset_scale: 1.0,
            speaker_dims: 0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.feature_dim == 0 || self.frames_per_token == 0 || self.num_speakers == 0 {
            return Err(SurtError::Config("corpus sizes must be positive".into()));
        }
        if self.speaker_dims >= self.feature_dim {
            return Err(SurtError::Config("speaker_dims must leave room for token dimensions".into()));
        }
        if !(self.speaker_offset_scale >= 0.0 && self.noise_std >= 0.0) {
            return Err(SurtError::Config("offset scale and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    /// `V × F`; row `v − 1` is the prototype of token `v`.
    pub prototypes: Tensor,
    /// `num_speakers × F`.
    pub offsets: Tensor,
}

pub fn make_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (v, f, k) = (spec.vocab_size, spec.feature_dim, spec.num_speakers);
    let split = if spec.speaker_dims > 0 { f - spec.speaker_dims } else { f };
    let prototypes = Tensor::matrix(
        v,
        f,
        (0..v * f)
            .map(|i| {
                let x = normal.sample(&mut rng);
                if i % f < split { x } else { 0.0 }
            })
            .collect(),
    );
    let offsets = Tensor::matrix(
        k,
        f,
        (0..k * f)
            .map(|i| {
                let x = spec.speaker_offset_scale * normal.sample(&mut rng);
                if spec.speaker_dims == 0 || i % f >= split { x } else { 0.0 }
            })
            .collect(),
    );
    Ok(Corpus {
        spec: spec.clone(),
        prototypes,
        offsets,
    })
}

pub fn synth_utterance(
    tokens: &[usize],
    speaker: usize,
    corpus: &Corpus,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let spec = &corpus.spec;
    if let Some(&bad) = tokens.iter().find(|&&t| t == 0 || t > spec.vocab_size) {
        return Err(SurtError::Utterance(format!("token {bad} outside 1..={}", spec.vocab_size)));
    }
    if speaker >= spec.num_speakers {
        return Err(SurtError::Utterance(format!("speaker {speaker} outside the corpus")));
    }
    let d = spec.frames_per_token;
    let f = spec.feature_dim;
    let normal = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| SurtError::Config(e.to_string()))?;
    let mut out = Tensor::zeros(&[tokens.len() * d, f]);
    let offset = corpus.offsets.row(speaker);
    for (i, &t) in tokens.iter().enumerate() {
        let proto = corpus.prototypes.row(t - 1);
        for r in i * d..(i + 1) * d {
            for (c, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = proto[c] + offset[c] + if noise_std > 0.0 { normal.sample(rng) } else { 0.0 };
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceGroup {
    /// Spans relative to the group start; features attached.
    pub utterances: Vec<Utterance>,
    pub mixture: Tensor,
    pub overlap_ratio: f64,
    pub silence_ratio: f64,
}

impl UtteranceGroup {
    pub fn frames(&self) -> usize {
        self.mixture.rows()
    }

    pub fn speakers(&self) -> BTreeSet<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }
}

/// Overlap (frames with two or more active utterances over frames with any)
/// and silence (frames with none over all frames) for spans in `[0, frames)`.
pub fn span_stats(spans: &[(usize, usize)], frames: usize) -> Result<(f64, f64)> {
    let mut active = vec![0u8; frames];
    for &(s, e) in spans {
        for (frame, a) in active.iter_mut().enumerate().take(e).skip(s) {
            *a += 1;
            if *a > 2 {
                return Err(SurtError::ThreeWayOverlap { frame });
            }
        }
    }
    let speaking = active.iter().filter(|&&a| a > 0).count();
    let overlapped = active.iter().filter(|&&a| a > 1).count();
    let overlap = if speaking == 0 { 0.0 } else { overlapped as f64 / speaking as f64 };
    let silence = if frames == 0 { 0.0 } else { (frames - speaking) as f64 / frames as f64 };
    Ok((overlap, silence))
}

/// Sum already-positioned utterances into a mixture.
pub fn assemble_group(utterances: Vec<Utterance>) -> Result<UtteranceGroup> {
    if utterances.is_empty() {
        return Err(SurtError::Mixing("empty group".into()));
    }
    let dim = match &utterances[0].features {
        Some(f) => f.cols(),
        None => return Err(SurtError::Mixing("utterance without features".into())),
    };
    let frames = utterances.iter().map(|u| u.end_frame).max().unwrap_or(0);
    let mut mixture = Tensor::zeros(&[frames, dim]);
    for u in &utterances {
        u.validate()?;
        let feats = u
            .features
            .as_ref()
            .ok_or_else(|| SurtError::Mixing("utterance without features".into()))?;
        if feats.rows() != u.len_frames() || feats.cols() != dim {
            return Err(SurtError::Mixing(format!(
                "features {:?} do not fit span [{}, {})",
                feats.shape(),
                u.start_frame,
                u.end_frame
            )));
        }
        for r in 0..feats.rows() {
            for (m, x) in mixture.row_mut(u.start_frame + r).iter_mut().zip(feats.row(r)) {
                *m += x;
            }
        }
    }
    let spans: Vec<(usize, usize)> = utterances.iter().map(|u| (u.start_frame, u.end_frame)).collect();
    let (overlap_ratio, silence_ratio) = span_stats(&spans, frames)?;
    Ok(UtteranceGroup {
        utterances,
        mixture,
        overlap_ratio,
        silence_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    /// Overlapped speaking time over total speaking time.
    pub target_overlap: f64,
    pub tolerance: f64,
    /// Cap on frames shared by two consecutive utterances.
    pub max_overlap_frames: usize,
    /// Silence inserted between non-overlapping consecutive utterances is
    /// drawn from `min_gap_frames..=max_gap_frames`.
    #[serde(default)]
    pub min_gap_frames: usize,
    pub max_gap_frames: usize,
    pub max_retries: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            target_overlap: 0.25,
            tolerance: 0.05,
            max_overlap_frames: usize::MAX,
            min_gap_frames: 0,
            max_gap_frames: 4,
            max_retries: 64,
        }
    }
}

/// Choose start frames for utterances played in the given order. Only
/// consecutive utterances by different speakers may overlap, and no
/// utterance is covered entirely by its neighbours.
pub fn place_utterances(lengths: &[usize], speakers: &[usize], cfg: &MixConfig, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = lengths.len();
    if n == 0 || speakers.len() != n || lengths.contains(&0) {
        return Err(SurtError::Mixing("need one non-empty length and speaker per utterance".into()));
    }
    let total: usize = lengths.iter().sum();
    let target = cfg.target_overlap.max(0.0);
    let goal = target * total as f64 / (1.0 + target);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.max_retries.max(1) {
        let weights: Vec<f64> = (0..n.saturating_sub(1)).map(|_| rng.random::<f64>() + 1e-3).collect();
        let wsum: f64 = weights.iter().sum();
        let mut overlaps = vec![0usize; n.saturating_sub(1)];
        let cap = |overlaps: &[usize], j: usize| -> usize {
            if speakers[j] == speakers[j + 1] {
                return 0;
            }
            let before = if j > 0 { overlaps[j - 1] } else { 0 };
            let after = overlaps.get(j + 1).copied().unwrap_or(0);
            cfg.max_overlap_frames
                .min((lengths[j] - 1).saturating_sub(before))
                .min((lengths[j + 1] - 1).saturating_sub(after))
        };
        let mut carry = 0.0;
        for j in 0..overlaps.len() {
            let want = goal * weights[j] / wsum + carry;
            let o = (want.round().max(0.0) as usize).min(cap(&overlaps, j));
            carry = want - o as f64;
            overlaps[j] = o;
        }
        // Spread any remaining shortfall over junctions with slack.
        let mut short = carry.round() as i64;
        let mut order: Vec<usize> = (0..overlaps.len()).collect();
        order.shuffle(rng);
        while short > 0 {
            let mut progressed = false;
            for &j in &order {
                if short > 0 && cap(&overlaps, j) > overlaps[j] {
                    overlaps[j] += 1;
                    short -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        let mut starts = vec![0usize; n];
        for j in 0..overlaps.len() {
            let end = starts[j] + lengths[j];
            starts[j + 1] = if overlaps[j] > 0 {
                end - overlaps[j]
            } else {
                end + rng.random_range(cfg.min_gap_frames..=cfg.max_gap_frames.max(cfg.min_gap_frames))
            };
        }
        let shared: usize = overlaps.iter().sum();
        let realized = shared as f64 / (total - shared) as f64;
        let err = (realized - target).abs();
        if err <= cfg.tolerance {
            return Ok(starts);
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, starts));
        }
    }
    Err(SurtError::Mixing(format!(
        "overlap target {:.3} ± {:.3} not reached after {} tries (closest miss {:.3})",
        target,
        cfg.tolerance,
        cfg.max_retries.max(1),
        best.map_or(f64::NAN, |b| b.0)
    )))
}

/// Position utterances (in the given order) to meet the overlap target and
/// mix them.
pub fn mix_group(utterances: Vec<Utterance>, cfg: &MixConfig, rng: &mut impl Rng) -> Result<UtteranceGroup> {
    let mut lengths = Vec::with_capacity(utterances.len());
    for u in &utterances {
        let f = u
            .features
            .as_ref()
            .ok_or_else(|| SurtError::Mixing("utterance without features".into()))?;
        lengths.push(f.rows());
    }
    let speakers: Vec<usize> = utterances.iter().map(|u| u.speaker).collect();
    let distinct: BTreeSet<usize> = speakers.iter().copied().collect();
    if distinct.len() > 4 {
        return Err(SurtError::Mixing(format!("{} speakers in one group", distinct.len())));
    }
    let starts = place_utterances(&lengths, &speakers, cfg, rng)?;
    let placed = utterances
        .into_iter()
        .zip(starts.iter().zip(&lengths))
        .map(|(mut u, (&s, &l))| {
            u.start_frame = s;
            u.end_frame = s + l;
            u
        })
        .collect();
    assemble_group(placed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub speakers_per_group: (usize, usize),
    pub utterances_per_group: (usize, usize),
    pub tokens_per_utterance: (usize, usize),
    pub mix: MixConfig,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            speakers_per_group: (2, 3),
            utterances_per_group: (3, 6),
            tokens_per_utterance: (2, 5),
            mix: MixConfig {
                target_overlap: 0.12,
                tolerance: 0.08,
                max_overlap_frames: 2,
                min_gap_frames: 4,
                max_gap_frames: 8,
                max_retries: 64,
            },
        }
    }
}

fn random_tokens(n: usize, vocab: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=vocab)).collect()
}

/// One group over the given speakers: every speaker talks at least once and
/// only consecutive utterances by different speakers may overlap.
pub fn make_group(corpus: &Corpus, speakers: &[usize], cfg: &GroupConfig, rng: &mut impl Rng) -> Result<UtteranceGroup> {
    if speakers.is_empty() {
        return Err(SurtError::Mixing("group without speakers".into()));
    }
    let mut mix = cfg.mix.clone();
    if speakers.len() == 1 {
        mix.target_overlap = 0.0;
    }
    // A draw whose turn sequence cannot reach the overlap target is redrawn.
    let mut last_err = None;
    for _ in 0..GROUP_ATTEMPTS {
        let utts = draw_utterances(corpus, speakers, cfg, rng)?;
        match mix_group(utts, &mix, rng) {
            Ok(g) => return Ok(g),
            Err(e @ SurtError::Mixing(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

const GROUP_ATTEMPTS: usize = 64;

fn draw_utterances(corpus: &Corpus, speakers: &[usize], cfg: &GroupConfig, rng: &mut impl Rng) -> Result<Vec<Utterance>> {
    let (lo, hi) = cfg.utterances_per_group;
    let n = rng.random_range(lo.max(1)..=hi.max(lo).max(1)).max(speakers.len());
    // Speakers are drawn independently per utterance, conditioned on every
    // group speaker talking at least once, so turn order carries no label.
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for attempt in 0.. {
        order = (0..n).map(|_| *speakers.choose(rng).expect("speaker")).collect();
        if speakers.iter().all(|s| order.contains(s)) {
            break;
        }
        if attempt == 256 {
            order = speakers.to_vec();
            order.shuffle(rng);
            order.extend((speakers.len()..n).map(|_| *speakers.choose(rng).expect("speaker")));
            break;
        }
    }
    let (tlo, thi) = cfg.tokens_per_utterance;
    let noise = corpus.spec.noise_std;
    let mut utts = Vec::with_capacity(n);
    for &spk in &order {
        let tokens = random_tokens(rng.random_range(tlo.max(1)..=thi.max(tlo).max(1)), corpus.spec.vocab_size, rng);
        let feats = synth_utterance(&tokens, spk, corpus, noise, rng)?;
        let len = feats.rows();
        let mut u = Utterance::new(tokens, spk, 0, len);
        u.features = Some(feats);
        utts.push(u);
    }
    Ok(utts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub num_groups: usize,
    pub num_speakers: usize,
    pub group: GroupConfig,
    /// Silence between consecutive groups, inclusive range in frames.
    pub gap_frames: (usize, usize),
    pub enrollment_tokens: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            num_groups: 4,
            num_speakers: 4,
            group: GroupConfig::default(),
            gap_frames: (4, 8),
            enrollment_tokens: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    pub groups: Vec<UtteranceGroup>,
    /// Session-time start frame of each group.
    pub group_starts: Vec<usize>,
    /// Clean per-speaker enrollment features.
    pub enrollment: BTreeMap<usize, Tensor>,
}

impl Session {
    pub fn speakers(&self) -> BTreeSet<usize> {
        self.groups.iter().flat_map(|g| g.speakers()).collect()
    }
}

pub fn make_session(corpus: &Corpus, cfg: &SessionConfig, id: &str, rng: &mut impl Rng) -> Result<Session> {
    let k = cfg.num_speakers;
    if k == 0 || k > corpus.spec.num_speakers {
        return Err(SurtError::Config(format!(
            "session needs 1..={} speakers, got {k}",
            corpus.spec.num_speakers
        )));
    }
    let pool: Vec<usize> = (0..corpus.spec.num_speakers).collect();
    let chosen: Vec<usize> = pool.choose_multiple(rng, k).copied().collect();
    let mut uncovered: Vec<usize> = chosen.clone();
    let mut groups = Vec::with_capacity(cfg.num_groups);
    let mut group_starts = Vec::with_capacity(cfg.num_groups);
    let mut cursor = 0usize;
    for g in 0..cfg.num_groups {
        let (lo, hi) = cfg.group.speakers_per_group;
        let mut size = rng.random_range(lo.max(1)..=hi.max(lo).max(1)).min(k);
        let left = cfg.num_groups - g;
        let forced = uncovered.len().div_ceil(left);
        size = size.max(forced).min(k);
        uncovered.shuffle(rng);
        let mut subset: Vec<usize> = uncovered.drain(..forced).collect();
        let mut rest: Vec<usize> = chosen.iter().copied().filter(|s| !subset.contains(s)).collect();
        rest.shuffle(rng);
        subset.extend(rest.into_iter().take(size - subset.len()));
        uncovered.retain(|s| !subset.contains(s));
        let group = make_group(corpus, &subset, &cfg.group, rng)?;
        if g > 0 {
            cursor += rng.random_range(cfg.gap_frames.0..=cfg.gap_frames.1.max(cfg.gap_frames.0));
        }
        group_starts.push(cursor);
        cursor += group.frames();
        groups.push(group);
    }
    let mut enrollment = BTreeMap::new();
    for &s in &chosen {
        let tokens = random_tokens(cfg.enrollment_tokens.max(1), corpus.spec.vocab_size, rng);
        enrollment.insert(s, synth_utterance(&tokens, s, corpus, 0.0, rng)?);
    }
    Ok(Session {
        id: id.to_string(),
        groups,
        group_starts,
        enrollment,
    })
}

/// `count` single-group sessions, for training and group-level tests.
pub fn make_group_set(corpus: &Corpus, cfg: &GroupConfig, count: usize, prefix: &str, seed: u64) -> Result<Vec<Session>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (lo, hi) = cfg.speakers_per_group;
            let k = rng.random_range(lo.max(1)..=hi.max(lo).max(1)).min(corpus.spec.num_speakers);
            let pool: Vec<usize> = (0..corpus.spec.num_speakers).collect();
            let speakers: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
            let group = make_group(corpus, &speakers, cfg, &mut rng)?;
            Ok(Session {
                id: format!("{prefix}-{i:05}"),
                groups: vec![group],
                group_starts: vec![0],
                enrollment: BTreeMap::new(),
            })
        })
        .collect()
}

/// Seed-deterministic sessions; session `i` draws from its own derived stream.
pub fn make_sessions(corpus: &Corpus, cfg: &SessionConfig, count: usize, prefix: &str, seed: u64) -> Result<Vec<Session>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            make_session(corpus, cfg, &format!("{prefix}-{i:05}"), &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker: usize,
    pub tokens: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

/// One manifest line: a group and where its features live.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub session_id: String,
    pub group_index: usize,
    pub start_frame: usize,
    pub utterances: Vec<UtteranceRecord>,
    pub features_path: String,
    #[serde(default)]
    pub enrollment: BTreeMap<usize, String>,
}

const MIXTURE_KEY: &str = "mixture";
const ENROLL_KEY: &str = "features";

fn source_key(i: usize) -> String {
    format!("source.{i}")
}

/// Write features under `dir/features` and the manifest at `dir/name`.
pub fn write_sessions(dir: &Path, name: &str, sessions: &[Session]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| SurtError::io(&feat_dir, e))?;
    let mut records = Vec::new();
    for s in sessions {
        let mut enrollment = BTreeMap::new();
        for (spk, feats) in &s.enrollment {
            let rel = format!("features/{}.enroll.{spk}.surt", s.id);
            write_container(&dir.join(&rel), &[(ENROLL_KEY.to_string(), feats.clone())])?;
            enrollment.insert(*spk, rel);
        }
        for (g, group) in s.groups.iter().enumerate() {
            let rel = format!("features/{}.{g}.surt", s.id);
            let mut entries = vec![(MIXTURE_KEY.to_string(), group.mixture.clone())];
            for (i, u) in group.utterances.iter().enumerate() {
                if let Some(f) = &u.features {
                    entries.push((source_key(i), f.clone()));
                }
            }
            write_container(&dir.join(&rel), &entries)?;
            records.push(GroupRecord {
                session_id: s.id.clone(),
                group_index: g,
                start_frame: s.group_starts[g],
                utterances: group
                    .utterances
                    .iter()
                    .map(|u| UtteranceRecord {
                        speaker: u.speaker,
                        tokens: u.tokens.clone(),
                        start: u.start_frame,
                        end: u.end_frame,
                    })
                    .collect(),
                features_path: rel,
                enrollment: enrollment.clone(),
            });
        }
    }
    let path = dir.join(name);
    write_manifest(&path, &records)?;
    Ok(path)
}

pub fn write_manifest(path: &Path, records: &[GroupRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<GroupRecord>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SurtError::MissingFile(path.to_path_buf()),
        _ => SurtError::io(path, e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SurtError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroupRecord = serde_json::from_str(&line).map_err(|e| SurtError::Manifest {
            line: i + 1,
            detail: e.to_string(),
        })?;
        for u in &rec.utterances {
            if u.start >= u.end || u.tokens.is_empty() {
                return Err(SurtError::Manifest {
                    line: i + 1,
                    detail: format!("bad utterance span [{}, {}) or empty tokens", u.start, u.end),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn take_entry(entries: &mut Vec<(String, Tensor)>, key: &str, path: &Path) -> Result<Tensor> {
    let pos = entries
        .iter()
        .position(|(k, _)| k == key)
        .ok_or_else(|| SurtError::Tensor(format!("{} has no entry {key}", path.display())))?;
    Ok(entries.swap_remove(pos).1)
}

/// Read a manifest and every feature file it references.
pub fn load_sessions(manifest: &Path) -> Result<Vec<Session>> {
    let records = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut sessions: Vec<Session> = Vec::new();
    for (line, rec) in records.into_iter().enumerate() {
        let path = base.join(&rec.features_path);
        let mut entries = read_container(&path)?;
        let mixture = take_entry(&mut entries, MIXTURE_KEY, &path)?;
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        for (i, u) in rec.utterances.iter().enumerate() {
            let mut utt = Utterance::new(u.tokens.clone(), u.speaker, u.start, u.end);
            utt.features = take_entry(&mut entries, &source_key(i), &path).ok();
            utterances.push(utt);
        }
        let spans: Vec<(usize, usize)> = utterances.iter().map(|u| (u.start_frame, u.end_frame)).collect();
        if spans.iter().any(|&(_, e)| e > mixture.rows()) {
            return Err(SurtError::Manifest {
                line: line + 1,
                detail: format!("utterance extends past {} mixture frames", mixture.rows()),
            });
        }
        let (overlap_ratio, silence_ratio) = span_stats(&spans, mixture.rows())?;
        let group = UtteranceGroup {
            utterances,
            mixture,
            overlap_ratio,
            silence_ratio,
        };
        let is_new = sessions.last().is_none_or(|s| s.id != rec.session_id);
        if is_new {
            let mut enrollment = BTreeMap::new();
            for (spk, rel) in &rec.enrollment {
                let p = base.join(rel);
                let mut e = read_container(&p)?;
                enrollment.insert(*spk, take_entry(&mut e, ENROLL_KEY, &p)?);
            }
            sessions.push(Session {
                id: rec.session_id.clone(),
                groups: Vec::new(),
                group_starts: Vec::new(),
                enrollment,
            });
        }
        let s = sessions.last_mut().expect("session");
        if rec.group_index != s.groups.len() {
            return Err(SurtError::Manifest {
                line: line + 1,
                detail: format!("group index {} out of order in {}", rec.group_index, rec.session_id),
            });
        }
        s.groups.push(group);
        s.group_starts.push(rec.start_frame);
    }
    Ok(sessions)
}

/// Table-style corpus statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sessions: usize,
    pub groups: usize,
    pub utterances: usize,
    pub frames: usize,
    pub overlap_pct: f64,
    pub silence_pct: f64,
}

pub fn corpus_stats(sessions: &[Session]) -> CorpusStats {
    let mut st = CorpusStats {
        sessions: sessions.len(),
        ..Default::default()
    };
    let (mut speaking, mut overlapped, mut silent) = (0.0, 0.0, 0.0);
    for g in sessions.iter().flat_map(|s| &s.groups) {
        st.groups += 1;
        st.utterances += g.utterances.len();
        let f = g.frames() as f64;
        st.frames += g.frames();
        let speak = f * (1.0 - g.silence_ratio);
        speaking += speak;
        overlapped += speak * g.overlap_ratio;
        silent += f * g.silence_ratio;
    }
    if speaking > 0.0 {
        st.overlap_pct = 100.0 * overlapped / speaking;
    }
    if st.frames > 0 {
        st.silence_pct = 100.0 * silent / st.frames as f64;
    }
    st
}
