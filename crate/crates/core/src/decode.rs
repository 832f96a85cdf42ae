//! Greedy joint decoding, speaker prefix buffers and session-level label
//! reconciliation.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurtError};
use crate::gradcore::sigmoid;
use crate::heat::heat_channels;
use crate::mixsim::{Session, UtteranceGroup};
use crate::model::{Model, TransducerKind};
use crate::tensor::Tensor;

pub const MAX_SYMBOLS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    /// Encoder frame within the chunk (prefix removed).
    pub frame: usize,
    pub token: usize,
    /// Relative speaker label, `1..=K_max`.
    pub speaker: usize,
    /// Blank probability at the emitting step.
    pub blank_conf: f64,
    /// Softmax over the speaker logits `z_aux[1..]`.
    pub spk_posterior: Vec<f64>,
    pub spk_logits: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelHypothesis {
    pub emissions: Vec<Emission>,
}

impl ChannelHypothesis {
    pub fn tokens(&self) -> Vec<usize> {
        self.emissions.iter().map(|e| e.token).collect()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.emissions.iter().map(|e| e.speaker).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub channels: [ChannelHypothesis; 2],
    /// Speaker logits `z_aux[1..]` per encoder frame (prefix removed), taken
    /// at the frame's final (blank-emitting or forced) step.
    pub frame_logits: [Tensor; 2],
    /// Joint evaluations performed; each checked for the shared blank.
    pub steps: usize,
}

/// Blank probability and label posteriors under the model's factorization.
pub fn emission_probs(z: &[f64], kind: TransducerKind) -> (f64, Vec<f64>) {
    match kind {
        TransducerKind::Hat => (sigmoid(z[0]), softmax(&z[1..])),
        TransducerKind::Rnnt => {
            let p = softmax(z);
            let rest = 1.0 - p[0];
            let q = if rest > 0.0 {
                p[1..].iter().map(|x| x / rest).collect()
            } else {
                vec![1.0 / (z.len() - 1) as f64; z.len() - 1]
            };
            (p[0], q)
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the maximum; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Whether the decoder emits blank: `b ≥ (1 − b) · max_v q_v`.
pub fn is_blank(b: f64, q: &[f64]) -> bool {
    let qmax = q.iter().copied().fold(0.0, f64::max);
    b >= (1.0 - b) * qmax
}

/// Remove the first `K_m · τ / s` encoder frames.
pub fn strip_prefix(f: &Tensor, f_aux: &Tensor, km: usize, tau: usize, s: usize) -> Result<(Tensor, Tensor)> {
    if s == 0 || tau % s != 0 {
        return Err(SurtError::Config(format!("subsample {s} does not divide tau {tau}")));
    }
    let cut = km * tau / s;
    if f.rows() < cut || f_aux.rows() < cut {
        return Err(SurtError::Decode(format!(
            "encoder output of {} frames is shorter than the {cut}-frame prefix",
            f.rows().min(f_aux.rows())
        )));
    }
    Ok((f.slice_rows(cut, f.rows()), f_aux.slice_rows(cut, f_aux.rows())))
}

/// Frame-synchronous greedy decoding of both channels. `km` buffered
/// speakers of `τ` frames each are assumed to prefix `x`.
pub fn greedy_joint_decode(model: &Model, x: &Tensor, km: usize, max_symbols: usize) -> Result<DecodeOutput> {
    let cfg = &model.config;
    let enc = model.encode(x)?;
    let mut channels: [ChannelHypothesis; 2] = Default::default();
    let mut frame_logits = [Tensor::zeros(&[0, 0]), Tensor::zeros(&[0, 0])];
    let mut steps = 0;
    for c in 0..2 {
        let (f, fa) = strip_prefix(&enc.f[c], &enc.f_aux[c], km, cfg.tau, cfg.subsample)?;
        let mut state = model.predictor_start();
        let mut trace = Tensor::zeros(&[f.rows(), cfg.k_max]);
        let hyp = &mut channels[c];
        for t in 0..f.rows() {
            let mut emitted = 0;
            loop {
                let (z, za) = model.joint_forward(f.row(t), fa.row(t), &state.h);
                steps += 1;
                if z[0].to_bits() != za[0].to_bits() {
                    return Err(SurtError::Decode(format!("blank logit not shared at frame {t}")));
                }
                trace.row_mut(t).copy_from_slice(&za[1..]);
                let (b, q) = emission_probs(&z, cfg.loss);
                if emitted >= max_symbols || is_blank(b, &q) {
                    break;
                }
                let token = argmax(&q) + 1;
                let post = softmax(&za[1..]);
                hyp.emissions.push(Emission {
                    frame: t,
                    token,
                    speaker: argmax(&post) + 1,
                    blank_conf: b,
                    spk_posterior: post,
                    spk_logits: za[1..].to_vec(),
                });
                state = model.predictor_step(token, &state);
                emitted += 1;
            }
        }
        frame_logits[c] = trace;
    }
    Ok(DecodeOutput {
        channels,
        frame_logits,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub global: usize,
    pub frames: Tensor,
    pub confidence: f64,
    pub source_group: usize,
    pub padded: bool,
}

/// Known speakers in relative-label order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeakerBuffer {
    pub entries: Vec<BufferEntry>,
}

/// `[B_1; …; B_Km; X]` and `K_m`.
pub fn build_prefix(buffers: &SpeakerBuffer, x: &Tensor) -> Result<(Tensor, usize)> {
    let mut parts: Vec<&Tensor> = buffers.entries.iter().map(|e| &e.frames).collect();
    parts.push(x);
    Ok((Tensor::vstack(&parts)?, buffers.entries.len()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowChoice {
    /// First encoder frame of the window.
    pub start: usize,
    /// Encoder frames in the window (short traces give fewer than `τ/s`).
    pub len: usize,
    pub confidence: f64,
    pub padded: bool,
}

/// Contiguous window of `τ/s` encoder frames with the largest logit sum;
/// the earliest window wins ties.
pub fn select_buffer_window(trace: &[f64], tau: usize, s: usize) -> Result<WindowChoice> {
    if trace.is_empty() {
        return Err(SurtError::Decode("empty confidence trace".into()));
    }
    let w = tau / s.max(1);
    if trace.len() <= w {
        return Ok(WindowChoice {
            start: 0,
            len: trace.len(),
            confidence: trace.iter().sum(),
            padded: trace.len() < w,
        });
    }
    let mut sum: f64 = trace[..w].iter().sum();
    let mut best = (sum, 0);
    for start in 1..=trace.len() - w {
        sum += trace[start + w - 1] - trace[start - 1];
        if sum > best.0 {
            best = (sum, start);
        }
    }
    // Recompute the winner exactly; the running sum only ranks windows.
    let confidence = trace[best.1..best.1 + w].iter().sum();
    Ok(WindowChoice {
        start: best.1,
        len: w,
        confidence,
        padded: false,
    })
}

/// Input frames under an encoder-frame window, left-padded with repeats to
/// exactly `τ` frames.
pub fn window_frames(x: &Tensor, choice: &WindowChoice, tau: usize, s: usize) -> Tensor {
    let lo = (choice.start * s).min(x.rows());
    let hi = ((choice.start + choice.len) * s).min(x.rows());
    let avail: Vec<&[f64]> = (lo..hi).map(|r| x.row(r)).collect();
    let n = avail.len().max(1);
    let f = x.cols();
    let mut data = Vec::with_capacity(tau * f);
    let pad = tau.saturating_sub(avail.len());
    for i in 0..tau {
        if avail.is_empty() {
            data.extend(std::iter::repeat_n(0.0, f));
        } else if i < pad {
            data.extend_from_slice(avail[(avail.len() - pad % n + i) % n]);
        } else {
            data.extend_from_slice(avail[i - pad]);
        }
    }
    Tensor::matrix(tau, f, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    None,
    Prefix,
    Enrollment,
}

impl FromStr for DecodeMode {
    type Err = SurtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DecodeMode::None),
            "prefix" => Ok(DecodeMode::Prefix),
            "enrollment" => Ok(DecodeMode::Enrollment),
            _ => Err(SurtError::Config(format!("unknown decode mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupTranscript {
    pub channels: [ChannelHypothesis; 2],
    /// Relative label to global speaker id.
    pub rel_to_global: BTreeMap<usize, usize>,
    pub prefix_speakers: usize,
}

impl GroupTranscript {
    pub fn global_speakers(&self, c: usize) -> Vec<usize> {
        self.channels[c].speakers().iter().map(|k| self.rel_to_global[k]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionTranscript {
    pub session_id: String,
    pub groups: Vec<GroupTranscript>,
    /// Global ids `1..=n` with, where known, the reference speaker whose
    /// enrollment defined them.
    pub registry: Vec<usize>,
    /// Emitted labels that skipped an unused index above `K_m`.
    pub skipped_labels: usize,
}

fn emitted_labels(out: &DecodeOutput) -> Vec<usize> {
    let mut labels: Vec<usize> = out.channels.iter().flat_map(|c| c.speakers()).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Per-frame confidence for relative label `k`: the larger logit of the
/// two channels.
fn label_trace(out: &DecodeOutput, k: usize) -> Vec<f64> {
    let frames = out.frame_logits[0].rows();
    (0..frames)
        .map(|t| out.frame_logits[0].get2(t, k - 1).max(out.frame_logits[1].get2(t, k - 1)))
        .collect()
}

pub fn decode_session(model: &Model, session: &Session, mode: DecodeMode) -> Result<SessionTranscript> {
    let cfg = &model.config;
    let mut groups = Vec::with_capacity(session.groups.len());
    let mut next_global = 1;
    let mut skipped_labels = 0;
    let mut buffers = SpeakerBuffer::default();
    if mode == DecodeMode::Enrollment {
        if session.enrollment.len() > cfg.k_max {
            return Err(SurtError::LabelOverflow {
                needed: session.enrollment.len(),
                k_max: cfg.k_max,
            });
        }
        for feats in session.enrollment.values() {
            let choice = WindowChoice {
                start: 0,
                len: feats.rows().div_ceil(cfg.subsample),
                confidence: 0.0,
                padded: feats.rows() < cfg.tau,
            };
            let frames = window_frames(&feats.slice_rows(0, feats.rows().min(cfg.tau)), &choice, cfg.tau, cfg.subsample);
            buffers.entries.push(BufferEntry {
                global: next_global,
                frames,
                confidence: f64::INFINITY,
                source_group: 0,
                padded: choice.padded,
            });
            next_global += 1;
        }
    }
    for (m, group) in session.groups.iter().enumerate() {
        let use_buffers = mode != DecodeMode::None;
        let (input, km) = if use_buffers {
            build_prefix(&buffers, &group.mixture)?
        } else {
            (group.mixture.clone(), 0)
        };
        let out = greedy_joint_decode(model, &input, km, MAX_SYMBOLS)?;
        let mut rel_to_global = BTreeMap::new();
        let labels = emitted_labels(&out);
        let mut expected_new = km + 1;
        for &k in &labels {
            if use_buffers && k <= km {
                rel_to_global.insert(k, buffers.entries[k - 1].global);
                continue;
            }
            if k > expected_new {
                skipped_labels += 1;
            }
            expected_new = k + 1;
            rel_to_global.insert(k, next_global);
            next_global += 1;
        }
        if mode == DecodeMode::Prefix {
            for &k in &labels {
                let global = rel_to_global[&k];
                let choice = select_buffer_window(&label_trace(&out, k), cfg.tau, cfg.subsample)?;
                let entry = BufferEntry {
                    global,
                    frames: window_frames(&group.mixture, &choice, cfg.tau, cfg.subsample),
                    confidence: choice.confidence,
                    source_group: m,
                    padded: choice.padded,
                };
                match buffers.entries.iter_mut().find(|e| e.global == global) {
                    Some(e) if choice.confidence > e.confidence => *e = entry,
                    Some(_) => {}
                    None => buffers.entries.push(entry),
                }
            }
            if buffers.entries.len() > cfg.k_max {
                return Err(SurtError::LabelOverflow {
                    needed: buffers.entries.len(),
                    k_max: cfg.k_max,
                });
            }
        }
        groups.push(GroupTranscript {
            channels: out.channels,
            rel_to_global,
            prefix_speakers: km,
        });
    }
    Ok(SessionTranscript {
        session_id: session.id.clone(),
        groups,
        registry: (1..next_global).collect(),
        skipped_labels,
    })
}

/// One line of the transcript file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TranscriptRecord {
    Emission {
        session: String,
        group: usize,
        channel: usize,
        frame: usize,
        token: usize,
        rel_speaker: usize,
        global_speaker: usize,
        blank_conf: f64,
        spk_posterior: Vec<f64>,
    },
    Session {
        session: String,
        groups: usize,
        registry: Vec<usize>,
        skipped_labels: usize,
    },
}

impl SessionTranscript {
    pub fn records(&self) -> Vec<TranscriptRecord> {
        let mut out = Vec::new();
        for (g, gt) in self.groups.iter().enumerate() {
            for (c, ch) in gt.channels.iter().enumerate() {
                for e in &ch.emissions {
                    out.push(TranscriptRecord::Emission {
                        session: self.session_id.clone(),
                        group: g,
                        channel: c,
                        frame: e.frame,
                        token: e.token,
                        rel_speaker: e.speaker,
                        global_speaker: gt.rel_to_global[&e.speaker],
                        blank_conf: e.blank_conf,
                        spk_posterior: e.spk_posterior.clone(),
                    });
                }
            }
        }
        out.push(TranscriptRecord::Session {
            session: self.session_id.clone(),
            groups: self.groups.len(),
            registry: self.registry.clone(),
            skipped_labels: self.skipped_labels,
        });
        out
    }
}

/// Hypothesis per group and channel as read back from transcript records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HypGroup {
    pub tokens: [Vec<usize>; 2],
    pub speakers: [Vec<usize>; 2],
    pub frames: [Vec<usize>; 2],
    pub posteriors: Vec<Vec<f64>>,
}

/// Rebuild per-session hypotheses from transcript records.
pub fn hypotheses_from_records(records: &[TranscriptRecord]) -> BTreeMap<String, Vec<HypGroup>> {
    let mut out: BTreeMap<String, Vec<HypGroup>> = BTreeMap::new();
    for r in records {
        match r {
            TranscriptRecord::Emission {
                session,
                group,
                channel,
                frame,
                token,
                global_speaker,
                spk_posterior,
                ..
            } => {
                let groups = out.entry(session.clone()).or_default();
                if groups.len() <= *group {
                    groups.resize_with(group + 1, HypGroup::default);
                }
                let g = &mut groups[*group];
                g.tokens[*channel].push(*token);
                g.speakers[*channel].push(*global_speaker);
                g.frames[*channel].push(*frame);
                g.posteriors.push(spk_posterior.clone());
            }
            TranscriptRecord::Session { session, groups, .. } => {
                let gs = out.entry(session.clone()).or_default();
                if gs.len() < *groups {
                    gs.resize_with(*groups, HypGroup::default);
                }
            }
        }
    }
    out
}

/// Mean auxiliary-encoder vector for one emitted relative speaker in one
/// group, taken over the frames where that speaker was emitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub session: String,
    pub group: usize,
    pub rel_speaker: usize,
    /// Most frequent reference speaker under the emitting frames, if any.
    pub ref_speaker: Option<usize>,
    pub frames: usize,
    pub vector: Vec<f64>,
}

/// Reference speaker active on channel `c` at encoder step `t`, or the most
/// recent one to have started there.
fn reference_speaker(group: &UtteranceGroup, channel_of: &[usize], c: usize, t: usize, s: usize) -> Option<usize> {
    let (lo, hi) = (t * s, (t + 1) * s);
    let on_channel = || group.utterances.iter().zip(channel_of).filter(move |(_, &ch)| ch == c).map(|(u, _)| u);
    on_channel()
        .find(|u| u.start_frame < hi && u.end_frame > lo)
        .or_else(|| on_channel().filter(|u| u.start_frame < hi).max_by_key(|u| u.start_frame))
        .map(|u| u.speaker)
}

/// Per-(group, relative speaker) embeddings from a no-prefix decode.
pub fn speaker_embeddings(model: &Model, session: &Session) -> Result<Vec<SpeakerEmbedding>> {
    let cfg = &model.config;
    let mut out = Vec::new();
    for (g, group) in session.groups.iter().enumerate() {
        let enc = model.encode(&group.mixture)?;
        let decoded = greedy_joint_decode(model, &group.mixture, 0, MAX_SYMBOLS)?;
        let channel_of = heat_channels(&group.utterances)?;
        let mut acc: BTreeMap<usize, (Vec<f64>, usize, BTreeMap<usize, usize>)> = BTreeMap::new();
        for (c, ch) in decoded.channels.iter().enumerate() {
            for e in &ch.emissions {
                let row = enc.f_aux[c].row(e.frame);
                let (sum, n, votes) = acc.entry(e.speaker).or_insert_with(|| (vec![0.0; row.len()], 0, BTreeMap::new()));
                sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                *n += 1;
                if let Some(spk) = reference_speaker(group, &channel_of, c, e.frame, cfg.subsample) {
                    *votes.entry(spk).or_insert(0) += 1;
                }
            }
        }
        for (k, (sum, n, votes)) in acc {
            let ref_speaker = votes.iter().max_by_key(|(spk, v)| (**v, std::cmp::Reverse(**spk))).map(|(spk, _)| *spk);
            out.push(SpeakerEmbedding {
                session: session.id.clone(),
                group: g,
                rel_speaker: k,
                ref_speaker,
                frames: n,
                vector: sum.iter().map(|v| v / n as f64).collect(),
            });
        }
    }
    Ok(out)
}
