//! Heuristic error assignment: overlapping references onto two channels.
//!
//! Spans are closed-open: an utterance occupying `[start, end)` leaves its
//! channel free for any utterance starting at `end` or later.

use std::collections::BTreeMap;

use crate::error::{Result, SurtError};
use crate::tensor::Tensor;

pub const NUM_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Clean source features, `(end − start) × F`.
    pub features: Option<Tensor>,
}

impl Utterance {
    pub fn new(tokens: Vec<usize>, speaker: usize, start_frame: usize, end_frame: usize) -> Self {
        Utterance {
            tokens,
            speaker,
            start_frame,
            end_frame,
            features: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_frame >= self.end_frame {
            return Err(SurtError::Utterance(format!(
                "empty span [{}, {})",
                self.start_frame, self.end_frame
            )));
        }
        if self.tokens.is_empty() {
            return Err(SurtError::Utterance("no tokens".into()));
        }
        Ok(())
    }

    pub fn len_frames(&self) -> usize {
        self.end_frame - self.start_frame
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub speaker: usize,
    pub num_tokens: usize,
}

/// Channel-wise references: tokens, per-token speakers and the utterance
/// segments in the channel, in time order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChannelRef {
    pub tokens: Vec<usize>,
    pub speakers: Vec<usize>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelRefs {
    pub channels: [ChannelRef; NUM_CHANNELS],
}

/// Input indices sorted into the deterministic processing order.
fn processing_order(utterances: &[Utterance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&utterances[a], &utterances[b]);
        (x.start_frame, x.end_frame, x.speaker, &x.tokens).cmp(&(y.start_frame, y.end_frame, y.speaker, &y.tokens))
    });
    order
}

/// Channel index (0-based) for every input utterance.
pub fn heat_channels(utterances: &[Utterance]) -> Result<Vec<usize>> {
    for u in utterances {
        u.validate()?;
    }
    let mut free_at = [0usize; NUM_CHANNELS];
    let mut out = vec![0; utterances.len()];
    for i in processing_order(utterances) {
        let u = &utterances[i];
        let c = free_at
            .iter()
            .position(|&end| end <= u.start_frame)
            .ok_or(SurtError::ThreeWayOverlap { frame: u.start_frame })?;
        free_at[c] = u.end_frame;
        out[i] = c;
    }
    Ok(out)
}

fn build_refs(utterances: &[Utterance], channel_of: &[Option<usize>]) -> ChannelRefs {
    let mut refs = ChannelRefs {
        channels: Default::default(),
    };
    for i in processing_order(utterances) {
        let Some(c) = channel_of[i] else { continue };
        let u = &utterances[i];
        let ch = &mut refs.channels[c];
        ch.tokens.extend_from_slice(&u.tokens);
        ch.speakers.extend(std::iter::repeat_n(u.speaker, u.tokens.len()));
        ch.segments.push(Segment {
            start_frame: u.start_frame,
            end_frame: u.end_frame,
            speaker: u.speaker,
            num_tokens: u.tokens.len(),
        });
    }
    refs
}

/// Assign each utterance to the first free channel in order of start time.
pub fn heat_assign(utterances: &[Utterance]) -> Result<ChannelRefs> {
    let channels = heat_channels(utterances)?;
    let opt: Vec<Option<usize>> = channels.into_iter().map(Some).collect();
    Ok(build_refs(utterances, &opt))
}

/// Like [`heat_assign`] but utterances that would need a third channel are
/// dropped; their input indices are returned alongside.
pub fn heat_assign_lenient(utterances: &[Utterance]) -> Result<(ChannelRefs, Vec<usize>)> {
    for u in utterances {
        u.validate()?;
    }
    let mut free_at = [0usize; NUM_CHANNELS];
    let mut channel_of = vec![None; utterances.len()];
    let mut skipped = Vec::new();
    for i in processing_order(utterances) {
        let u = &utterances[i];
        match free_at.iter().position(|&end| end <= u.start_frame) {
            Some(c) => {
                free_at[c] = u.end_frame;
                channel_of[i] = Some(c);
            }
            None => skipped.push(i),
        }
    }
    Ok((build_refs(utterances, &channel_of), skipped))
}

/// Map global speakers to relative labels: prefixed speakers get `1..=K_m`
/// in buffer order, the rest follow in order of first appearance.
pub fn relative_speaker_map(
    group: &[Utterance],
    prefix_order: &[usize],
    k_max: usize,
) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    for &s in prefix_order {
        let next = map.len() + 1;
        map.entry(s).or_insert(next);
    }
    for i in processing_order(group) {
        let next = map.len() + 1;
        map.entry(group[i].speaker).or_insert(next);
    }
    if map.len() > k_max {
        return Err(SurtError::LabelOverflow {
            needed: map.len(),
            k_max,
        });
    }
    Ok(map)
}

/// Per-channel clean targets: the sum of each channel's zero-padded source
/// features, shaped like the mixture.
pub fn mask_targets(mixture: &Tensor, utterances: &[Utterance]) -> Result<[Tensor; NUM_CHANNELS]> {
    let channels = heat_channels(utterances)?;
    let (frames, dim) = (mixture.rows(), mixture.cols());
    let mut out = [Tensor::zeros(&[frames, dim]), Tensor::zeros(&[frames, dim])];
    for (u, &c) in utterances.iter().zip(&channels) {
        let feats = u
            .features
            .as_ref()
            .ok_or_else(|| SurtError::Utterance("mask targets need utterance features".into()))?;
        if feats.rows() != u.len_frames() || feats.cols() != dim || u.end_frame > frames {
            return Err(SurtError::Shape {
                node: 0,
                op: "mask_targets",
                detail: format!(
                    "utterance [{}, {}) with {:?} features in a {frames}x{dim} mixture",
                    u.start_frame,
                    u.end_frame,
                    feats.shape()
                ),
            });
        }
        for r in 0..feats.rows() {
            let dst = out[c].row_mut(u.start_frame + r);
            for (d, s) in dst.iter_mut().zip(feats.row(r)) {
                *d += s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(start: usize, end: usize, spk: usize) -> Utterance {
        Utterance::new(vec![1 + spk % 3; (end - start).div_ceil(4)], spk, start, end)
    }

    #[test]
    fn first_available_channel() {
        let us = vec![utt(0, 5, 0), utt(3, 8, 1), utt(9, 12, 0)];
        assert_eq!(heat_channels(&us).unwrap(), vec![0, 1, 0]);
        let refs = heat_assign(&us).unwrap();
        assert_eq!(refs.channels[0].segments.len(), 2);
        assert_eq!(refs.channels[1].segments.len(), 1);
        assert_eq!(refs.channels[1].segments[0].speaker, 1);
    }

    #[test]
    fn disjoint_all_on_first_channel() {
        let us = vec![utt(0, 4, 0), utt(4, 8, 1), utt(10, 12, 2)];
        let refs = heat_assign(&us).unwrap();
        assert_eq!(refs.channels[0].segments.len(), 3);
        assert!(refs.channels[1].tokens.is_empty());
    }

    #[test]
    fn three_way_overlap_names_frame() {
        let us = vec![utt(0, 5, 0), utt(1, 6, 1), utt(2, 7, 2)];
        assert!(matches!(heat_assign(&us), Err(SurtError::ThreeWayOverlap { frame: 2 })));
        let (refs, skipped) = heat_assign_lenient(&us).unwrap();
        assert_eq!(skipped, vec![2]);
        assert_eq!(refs.channels[1].segments.len(), 1);
    }

    #[test]
    fn speakers_repeat_per_token() {
        let mut a = Utterance::new(vec![3, 4, 5], 7, 0, 12);
        a.features = None;
        let refs = heat_assign(&[a]).unwrap();
        assert_eq!(refs.channels[0].speakers, vec![7, 7, 7]);
    }

    #[test]
    fn relative_map_fifo_and_prefix() {
        let group = vec![utt(0, 4, 11), utt(2, 8, 10)];
        let m = relative_speaker_map(&group, &[], 4).unwrap();
        assert_eq!(m, BTreeMap::from([(11, 1), (10, 2)]));

        let group = vec![utt(0, 4, 11), utt(2, 8, 12)];
        let m = relative_speaker_map(&group, &[10, 11], 4).unwrap();
        assert_eq!(m, BTreeMap::from([(10, 1), (11, 2), (12, 3)]));

        let group = vec![utt(0, 4, 14)];
        assert!(matches!(
            relative_speaker_map(&group, &[10, 11, 12, 13], 4),
            Err(SurtError::LabelOverflow { needed: 5, k_max: 4 })
        ));
    }

    #[test]
    fn mask_targets_single_and_disjoint() {
        let f1 = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let f2 = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let mut a = Utterance::new(vec![1], 0, 0, 2);
        a.features = Some(f1.clone());
        let mix = f1.clone();
        let [h1, h2] = mask_targets(&mix, std::slice::from_ref(&a)).unwrap();
        assert_eq!(h1, f1);
        assert_eq!(h2.max_abs(), 0.0);

        let mut b = Utterance::new(vec![2], 1, 2, 4);
        b.features = Some(f2.clone());
        let mix = Tensor::vstack(&[&f1, &f2]).unwrap();
        let [h1, h2] = mask_targets(&mix, &[a, b]).unwrap();
        assert_eq!(h1, mix);
        assert_eq!(h2.max_abs(), 0.0);
    }

    fn arb_group() -> impl Strategy<Value = Vec<Utterance>> {
        // chains of utterances where each overlaps at most the previous one
        proptest::collection::vec((1usize..6, 0usize..4, 0usize..5, 1usize..4), 1..8).prop_map(|specs| {
            let mut out = Vec::new();
            let mut prev_end = 0usize;
            let mut prev_prev_end = 0usize;
            for (len_tok, back, spk, tok) in specs {
                let len = len_tok * 2;
                let start = prev_end.saturating_sub(back).max(prev_prev_end);
                let end = start + len;
                out.push(Utterance::new(vec![tok; len_tok], spk, start, end));
                prev_prev_end = prev_end;
                prev_end = prev_end.max(end);
            }
            out
        })
    }

    proptest! {
        #[test]
        fn heat_invariants(group in arb_group(), seed in any::<u64>()) {
            let refs = heat_assign(&group).unwrap();
            let total: usize = group.iter().map(|u| u.tokens.len()).sum();
            let got: usize = refs.channels.iter().map(|c| c.tokens.len()).sum();
            prop_assert_eq!(total, got);
            for ch in &refs.channels {
                prop_assert_eq!(ch.tokens.len(), ch.speakers.len());
                for w in ch.segments.windows(2) {
                    prop_assert!(w[0].end_frame <= w[1].start_frame);
                }
            }
            // shuffle and reassign
            let mut shuffled = group.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(heat_assign(&shuffled).unwrap(), refs);

            let m = relative_speaker_map(&group, &[], usize::MAX).unwrap();
            let mut labels: Vec<usize> = m.values().copied().collect();
            labels.sort();
            prop_assert_eq!(labels, (1..=m.len()).collect::<Vec<_>>());
        }
    }
}
