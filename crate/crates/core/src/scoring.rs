//! Group- and session-level scoring of decoded transcripts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decode::{HypGroup, SessionTranscript};
use crate::error::{Result, SurtError};
use crate::metrics::{
    counting_accuracy, cpwer_exhaustive, cpwer_with_agreement, orc_wer, orc_wer_brute, per_frame_entropy,
    speaker_agreement, wder, EntropyReport, EntropyTrace, ErrorCounts, OrcResult,
};
use crate::mixsim::{GroupRecord, Session};

/// Reference utterances of one group in temporal order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceGroup {
    pub speakers: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
}

impl ReferenceGroup {
    pub fn num_speakers(&self) -> usize {
        self.speakers.iter().collect::<BTreeSet<_>>().len()
    }

    /// Speaker of each word once references are flattened in order.
    pub fn word_speakers(&self) -> Vec<usize> {
        self.speakers
            .iter()
            .zip(&self.tokens)
            .flat_map(|(&s, t)| std::iter::repeat_n(s, t.len()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSession {
    pub id: String,
    pub groups: Vec<ReferenceGroup>,
}

fn reference_group(mut utts: Vec<(usize, usize, usize, Vec<usize>)>) -> ReferenceGroup {
    utts.sort_by_key(|u| (u.0, u.1, u.2));
    ReferenceGroup {
        speakers: utts.iter().map(|u| u.2).collect(),
        tokens: utts.into_iter().map(|u| u.3).collect(),
    }
}

pub fn references_from_sessions(sessions: &[Session]) -> Vec<ReferenceSession> {
    sessions
        .iter()
        .map(|s| ReferenceSession {
            id: s.id.clone(),
            groups: s
                .groups
                .iter()
                .map(|g| {
                    reference_group(
                        g.utterances
                            .iter()
                            .map(|u| (u.start_frame, u.end_frame, u.speaker, u.tokens.clone()))
                            .collect(),
                    )
                })
                .collect(),
        })
        .collect()
}

pub fn references_from_manifest(records: &[GroupRecord]) -> Result<Vec<ReferenceSession>> {
    let mut by_session: BTreeMap<&str, BTreeMap<usize, ReferenceGroup>> = BTreeMap::new();
    for r in records {
        let g = reference_group(r.utterances.iter().map(|u| (u.start, u.end, u.speaker, u.tokens.clone())).collect());
        if by_session.entry(&r.session_id).or_default().insert(r.group_index, g).is_some() {
            return Err(SurtError::Score(format!(
                "session {} has group {} twice",
                r.session_id, r.group_index
            )));
        }
    }
    by_session
        .into_iter()
        .map(|(id, groups)| {
            if groups.keys().copied().ne(0..groups.len()) {
                return Err(SurtError::Score(format!("session {id} has non-contiguous group indices")));
            }
            Ok(ReferenceSession {
                id: id.to_string(),
                groups: groups.into_values().collect(),
            })
        })
        .collect()
}

/// Hypotheses in the form read back from transcript files.
pub fn hypotheses_from_transcripts(transcripts: &[SessionTranscript]) -> BTreeMap<String, Vec<HypGroup>> {
    transcripts
        .iter()
        .map(|t| {
            let groups = t
                .groups
                .iter()
                .map(|g| {
                    let mut h = HypGroup::default();
                    for c in 0..2 {
                        let ch = &g.channels[c];
                        h.tokens[c] = ch.tokens();
                        h.speakers[c] = g.global_speakers(c);
                        h.frames[c] = ch.emissions.iter().map(|e| e.frame).collect();
                        h.posteriors.extend(ch.emissions.iter().map(|e| e.spk_posterior.clone()));
                    }
                    h
                })
                .collect();
            (t.session_id.clone(), groups)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub session: String,
    pub group: usize,
    pub counts: ErrorCounts,
    pub wer: f64,
    /// Output channel (0-based) per reference utterance.
    pub orc_assignment: Vec<usize>,
    pub ref_speakers: usize,
    pub hyp_speakers: usize,
    pub mean_entropy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session: String,
    pub orc_counts: ErrorCounts,
    pub cp_counts: ErrorCounts,
    pub cpwer: f64,
    /// Hypothesis global speaker to reference speaker.
    pub cp_permutation: BTreeMap<usize, usize>,
    pub wder_matched: usize,
    pub wder_mislabeled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// ORC-WER over all groups.
    pub wer: f64,
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub ref_words: usize,
    pub cpwer: f64,
    pub cp_insertions: usize,
    pub cp_deletions: usize,
    pub cp_substitutions: usize,
    pub wder: f64,
    pub wder_matched: usize,
    pub wder_undefined: bool,
    pub counting_accuracy: f64,
    pub entropy: EntropyReport,
    pub groups: Vec<GroupScore>,
    pub sessions: Vec<SessionScore>,
}

/// Hypothesis words of each global speaker in decode order.
fn hyp_words_by_speaker(groups: &[HypGroup]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in groups {
        let mut words: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
        for c in 0..2 {
            for i in 0..g.tokens[c].len() {
                let frame = g.frames[c].get(i).copied().unwrap_or(i);
                words.push((frame, c, i, g.speakers[c][i], g.tokens[c][i]));
            }
        }
        words.sort_unstable();
        for (_, _, _, spk, tok) in words {
            out.entry(spk).or_default().push(tok);
        }
    }
    out
}

fn ref_words_by_speaker(groups: &[ReferenceGroup]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in groups {
        for (s, t) in g.speakers.iter().zip(&g.tokens) {
            out.entry(*s).or_default().extend_from_slice(t);
        }
    }
    out
}

fn log_posterior(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

pub fn score(refs: &[ReferenceSession], hyps: &BTreeMap<String, Vec<HypGroup>>) -> Result<ScoreReport> {
    let ref_ids: BTreeSet<&str> = refs.iter().map(|r| r.id.as_str()).collect();
    if let Some(extra) = hyps.keys().find(|k| !ref_ids.contains(k.as_str())) {
        return Err(SurtError::Score(format!("hypothesis session {extra} has no reference")));
    }
    let mut groups = Vec::new();
    let mut sessions = Vec::new();
    let mut orc_total = ErrorCounts::default();
    let mut cp_total = ErrorCounts::default();
    let (mut matched, mut mislabeled) = (0, 0);
    let mut ref_counts = Vec::new();
    let mut hyp_counts = Vec::new();
    let mut traces = Vec::new();
    for r in refs {
        let hg = hyps
            .get(&r.id)
            .ok_or_else(|| SurtError::Score(format!("reference session {} has no hypothesis", r.id)))?;
        if hg.len() != r.groups.len() {
            return Err(SurtError::Score(format!(
                "session {}: {} reference groups but {} hypothesis groups",
                r.id,
                r.groups.len(),
                hg.len()
            )));
        }
        let orcs: Vec<OrcResult> = r
            .groups
            .iter()
            .zip(hg)
            .map(|(rg, h)| orc_wer(&rg.tokens, [&h.tokens[0], &h.tokens[1]]))
            .collect();
        let mut agreement = BTreeMap::new();
        for ((rg, h), orc) in r.groups.iter().zip(hg).zip(&orcs) {
            speaker_agreement(orc, [&h.speakers[0], &h.speakers[1]], &rg.word_speakers(), &mut agreement);
        }
        let cp = cpwer_with_agreement(&ref_words_by_speaker(&r.groups), &hyp_words_by_speaker(hg), &agreement);
        let mut orc_session = ErrorCounts::default();
        let (mut s_matched, mut s_mislabeled) = (0, 0);
        for (gi, ((rg, h), orc)) in r.groups.iter().zip(hg).zip(orcs).enumerate() {
            let w = wder(&orc, &cp.permutation, [&h.speakers[0], &h.speakers[1]], &rg.word_speakers());
            s_matched += w.matched;
            s_mislabeled += w.mislabeled;
            orc_session.add(&orc.counts);
            let hyp_spk: BTreeSet<usize> = h.speakers.iter().flatten().copied().collect();
            ref_counts.push(rg.num_speakers());
            hyp_counts.push(hyp_spk.len());
            traces.push(EntropyTrace {
                ref_speakers: rg.num_speakers(),
                speaker_logits: h.posteriors.iter().map(|p| log_posterior(p)).collect(),
            });
            groups.push(GroupScore {
                session: r.id.clone(),
                group: gi,
                counts: orc.counts,
                wer: orc.wer,
                orc_assignment: orc.assignment,
                ref_speakers: rg.num_speakers(),
                hyp_speakers: hyp_spk.len(),
                mean_entropy: None,
            });
        }
        orc_total.add(&orc_session);
        cp_total.add(&cp.counts);
        matched += s_matched;
        mislabeled += s_mislabeled;
        sessions.push(SessionScore {
            session: r.id.clone(),
            orc_counts: orc_session,
            cp_counts: cp.counts,
            cpwer: cp.wer,
            cp_permutation: cp.permutation,
            wder_matched: s_matched,
            wder_mislabeled: s_mislabeled,
        });
    }
    let entropy = per_frame_entropy(&traces);
    for (g, e) in groups.iter_mut().zip(&entropy.per_group) {
        g.mean_entropy = *e;
    }
    Ok(ScoreReport {
        wer: orc_total.wer(),
        insertions: orc_total.insertions,
        deletions: orc_total.deletions,
        substitutions: orc_total.substitutions,
        ref_words: orc_total.ref_words,
        cpwer: cp_total.wer(),
        cp_insertions: cp_total.insertions,
        cp_deletions: cp_total.deletions,
        cp_substitutions: cp_total.substitutions,
        wder: if matched == 0 { 0.0 } else { mislabeled as f64 / matched as f64 },
        wder_matched: matched,
        wder_undefined: matched == 0,
        counting_accuracy: counting_accuracy(&ref_counts, &hyp_counts)?,
        entropy,
        groups,
        sessions,
    })
}

/// Recompute ORC and cpWER costs by enumeration where small enough and
/// return the number of disagreements and cases checked.
pub fn verify_with_oracles(
    refs: &[ReferenceSession],
    hyps: &BTreeMap<String, Vec<HypGroup>>,
    report: &ScoreReport,
) -> (usize, usize) {
    let mut mismatches = 0;
    let mut checked = 0;
    let mut gi = 0;
    for (si, r) in refs.iter().enumerate() {
        let Some(hg) = hyps.get(&r.id) else { continue };
        for (rg, h) in r.groups.iter().zip(hg) {
            if rg.tokens.len() <= 12 {
                checked += 1;
                if orc_wer_brute(&rg.tokens, [&h.tokens[0], &h.tokens[1]]) != report.groups[gi].counts.errors() {
                    mismatches += 1;
                }
            }
            gi += 1;
        }
        let rw = ref_words_by_speaker(&r.groups);
        let hw = hyp_words_by_speaker(hg);
        if rw.len().max(hw.len()) <= 7 {
            checked += 1;
            if cpwer_exhaustive(&rw, &hw) != report.sessions[si].cp_counts.errors() {
                mismatches += 1;
            }
        }
    }
    (mismatches, checked)
}

impl ScoreReport {
    /// One `name value` pair per line.
    pub fn summary(&self) -> String {
        let mut lines = vec![
            format!("orc_wer {:.6}", self.wer),
            format!("insertions {}", self.insertions),
            format!("deletions {}", self.deletions),
            format!("substitutions {}", self.substitutions),
            format!("ref_words {}", self.ref_words),
            format!("cpwer {:.6}", self.cpwer),
            format!("cp_insertions {}", self.cp_insertions),
            format!("cp_deletions {}", self.cp_deletions),
            format!("cp_substitutions {}", self.cp_substitutions),
            format!("wder {:.6}", self.wder),
            format!("wder_matched {}", self.wder_matched),
            format!("wder_undefined {}", self.wder_undefined),
            format!("counting_accuracy {:.6}", self.counting_accuracy),
            format!("groups {}", self.groups.len()),
            format!("sessions {}", self.sessions.len()),
            format!("entropy_skipped {}", self.entropy.skipped),
        ];
        for (k, v) in &self.entropy.buckets {
            lines.push(format!("entropy_speakers_{k} {v:.6}"));
        }
        for g in &self.groups {
            lines.push(format!("group_wer {}.{} {:.6}", g.session, g.group, g.wer));
        }
        for s in &self.sessions {
            lines.push(format!("session_cpwer {} {:.6}", s.session, s.cpwer));
        }
        lines.join("\n") + "\n"
    }
}
