//! Multi-talker scoring: edit distance, ORC-WER, cpWER, WDER, speaker
//! counting and speaker-posterior entropy.
//!
//! Tokens are scored as words. Channel indices are 0-based.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurtError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub ref_idx: Option<usize>,
    pub hyp_idx: Option<usize>,
    pub op: EditOp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub ref_words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }

    /// Errors over reference words; an empty reference scores 0 when the
    /// hypothesis is empty too and counts every insertion otherwise.
    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            return if self.errors() == 0 { 0.0 } else { f64::INFINITY };
        }
        self.errors() as f64 / self.ref_words as f64
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.substitutions += other.substitutions;
        self.ref_words += other.ref_words;
    }
}

impl Alignment {
    pub fn counts(&self) -> ErrorCounts {
        let mut c = ErrorCounts::default();
        for p in &self.pairs {
            match p.op {
                EditOp::Match => c.ref_words += 1,
                EditOp::Sub => {
                    c.substitutions += 1;
                    c.ref_words += 1
                }
                EditOp::Del => {
                    c.deletions += 1;
                    c.ref_words += 1
                }
                EditOp::Ins => c.insertions += 1,
            }
        }
        c
    }

    pub fn cost(&self) -> usize {
        self.pairs.iter().filter(|p| p.op != EditOp::Match).count()
    }
}

/// Levenshtein table; `d[i][j]` is the distance between `r[..i]` and `h[..j]`.
fn distance_table<T: PartialEq>(r: &[T], h: &[T]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let diag = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Minimal edit distance with an alignment. On ties the backtrace prefers
/// match, then substitution, then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> (usize, Alignment) {
    let d = distance_table(r, h);
    let (mut i, mut j) = (r.len(), h.len());
    let mut pairs = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = r[i - 1] == h[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                let op = if same { EditOp::Match } else { EditOp::Sub };
                pairs.push(AlignedPair {
                    ref_idx: Some(i - 1),
                    hyp_idx: Some(j - 1),
                    op,
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            pairs.push(AlignedPair {
                ref_idx: Some(i - 1),
                hyp_idx: None,
                op: EditOp::Del,
            });
            i -= 1;
        } else {
            pairs.push(AlignedPair {
                ref_idx: None,
                hyp_idx: Some(j - 1),
                op: EditOp::Ins,
            });
            j -= 1;
        }
    }
    pairs.reverse();
    (d[r.len()][h.len()], Alignment { pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrcResult {
    pub counts: ErrorCounts,
    pub wer: f64,
    /// Output channel per reference utterance.
    pub assignment: Vec<usize>,
    /// Per-channel alignment; reference indices address the flattened
    /// reference word list (all utterances in temporal order).
    pub alignments: [Alignment; 2],
}

/// For one reference and one hypothesis stream, `cost[a][b]` is the edit
/// distance between the reference and `hyp[a..b]` (infinite when `b < a`).
fn segment_costs(r: &[usize], hyp: &[usize]) -> Vec<Vec<usize>> {
    let n = hyp.len();
    let mut cost = vec![vec![usize::MAX; n + 1]; n + 1];
    for a in 0..=n {
        let d = distance_table(r, &hyp[a..]);
        for b in a..=n {
            cost[a][b] = d[r.len()][b - a];
        }
    }
    cost
}

/// ORC-WER: the minimum summed edit distance over all order-preserving
/// assignments of reference utterances to the two hypothesis channels.
pub fn orc_wer(refs: &[Vec<usize>], hyps: [&[usize]; 2]) -> OrcResult {
    let (l0, l1) = (hyps[0].len(), hyps[1].len());
    let n = refs.len();
    let costs: Vec<[Vec<Vec<usize>>; 2]> = refs
        .iter()
        .map(|r| [segment_costs(r, hyps[0]), segment_costs(r, hyps[1])])
        .collect();
    const INF: usize = usize::MAX / 4;
    let idx = |i: usize, j: usize| i * (l1 + 1) + j;
    let mut dp = vec![vec![INF; (l0 + 1) * (l1 + 1)]; n + 1];
    dp[0][idx(0, 0)] = 0;
    for k in 0..n {
        for i in 0..=l0 {
            for j in 0..=l1 {
                let base = dp[k][idx(i, j)];
                if base >= INF {
                    continue;
                }
                for b in i..=l0 {
                    let c = base + costs[k][0][i][b];
                    let cell = &mut dp[k + 1][idx(b, j)];
                    *cell = (*cell).min(c);
                }
                for b in j..=l1 {
                    let c = base + costs[k][1][j][b];
                    let cell = &mut dp[k + 1][idx(i, b)];
                    *cell = (*cell).min(c);
                }
            }
        }
    }
    // Trailing hypothesis words with no references become insertions.
    let mut assignment = vec![0; n];
    let mut total = INF;
    let (mut ei, mut ej) = (0, 0);
    for i in 0..=l0 {
        for j in 0..=l1 {
            let c = dp[n][idx(i, j)] + (l0 - i) + (l1 - j);
            if c < total {
                total = c;
                ei = i;
                ej = j;
            }
        }
    }
    if n == 0 {
        ei = 0;
        ej = 0;
    }
    let (mut i, mut j) = (ei, ej);
    for k in (0..n).rev() {
        let target = dp[k + 1][idx(i, j)];
        let mut found = false;
        for a in 0..=i {
            if dp[k][idx(a, j)] < INF && dp[k][idx(a, j)] + costs[k][0][a][i] == target {
                assignment[k] = 0;
                i = a;
                found = true;
                break;
            }
        }
        if !found {
            for a in 0..=j {
                if dp[k][idx(i, a)] < INF && dp[k][idx(i, a)] + costs[k][1][a][j] == target {
                    assignment[k] = 1;
                    j = a;
                    break;
                }
            }
        }
    }
    orc_from_assignment(refs, hyps, assignment)
}

/// Score a fixed channel assignment by aligning each channel's reference
/// concatenation against its hypothesis.
pub fn orc_from_assignment(refs: &[Vec<usize>], hyps: [&[usize]; 2], assignment: Vec<usize>) -> OrcResult {
    let mut offsets = Vec::with_capacity(refs.len());
    let mut acc = 0;
    for r in refs {
        offsets.push(acc);
        acc += r.len();
    }
    let mut counts = ErrorCounts::default();
    let mut alignments: [Alignment; 2] = Default::default();
    for (c, alignment) in alignments.iter_mut().enumerate() {
        let mut words = Vec::new();
        let mut global = Vec::new();
        for (k, r) in refs.iter().enumerate() {
            if assignment[k] == c {
                words.extend_from_slice(r);
                global.extend(offsets[k]..offsets[k] + r.len());
            }
        }
        let (_, mut al) = edit_distance(&words, hyps[c]);
        for p in &mut al.pairs {
            p.ref_idx = p.ref_idx.map(|x| global[x]);
        }
        counts.add(&al.counts());
        *alignment = al;
    }
    OrcResult {
        counts,
        wer: counts.wer(),
        assignment,
        alignments,
    }
}

/// Minimum-cost perfect matching on a square matrix; returns the column
/// chosen for every row.
pub fn hungarian(cost: &[Vec<usize>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // Potentials formulation with 1-based sentinels.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] as i64 - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpResult {
    pub counts: ErrorCounts,
    pub wer: f64,
    /// Hypothesis speaker to reference speaker; hypothesis speakers matched
    /// to a padding slot are absent.
    pub permutation: BTreeMap<usize, usize>,
}

/// cpWER: concatenate words per speaker on both sides and score the best
/// bijection, padding the smaller side with empty speakers.
pub fn cpwer(refs: &BTreeMap<usize, Vec<usize>>, hyps: &BTreeMap<usize, Vec<usize>>) -> CpResult {
    cpwer_with_agreement(refs, hyps, &BTreeMap::new())
}

/// cpWER whose speaker map, among all cpWER-optimal ones, maximises the
/// number of ORC-matched words that agree with it. `agreement` maps
/// (hypothesis speaker, reference speaker) to such word counts. Ties are
/// then resolved by the words themselves, never by label values.
pub fn cpwer_with_agreement(
    refs: &BTreeMap<usize, Vec<usize>>,
    hyps: &BTreeMap<usize, Vec<usize>>,
    agreement: &BTreeMap<(usize, usize), usize>,
) -> CpResult {
    let ref_ids: Vec<usize> = refs.keys().copied().collect();
    let hyp_ids: Vec<usize> = hyps.keys().copied().collect();
    let n = ref_ids.len().max(hyp_ids.len());
    let empty: Vec<usize> = Vec::new();
    let ref_words = |r: usize| ref_ids.get(r).map_or(&empty, |id| &refs[id]);
    let hyp_words = |h: usize| hyp_ids.get(h).map_or(&empty, |id| &hyps[id]);
    let total: usize = agreement.values().sum();
    let agree = |h: usize, r: usize| match (hyp_ids.get(h), ref_ids.get(r)) {
        (Some(hid), Some(rid)) => agreement.get(&(*hid, *rid)).copied().unwrap_or(0),
        _ => 0,
    };
    let cost: Vec<Vec<usize>> = (0..n)
        .map(|h| {
            (0..n)
                .map(|r| edit_distance(ref_words(r), hyp_words(h)).0 * (total + 1) + total - agree(h, r))
                .collect()
        })
        .collect();
    let matching = hungarian(&cost);
    let mut counts = ErrorCounts::default();
    let mut permutation = BTreeMap::new();
    for (h, &r) in matching.iter().enumerate() {
        counts.add(&edit_distance(ref_words(r), hyp_words(h)).1.counts());
        if h < hyp_ids.len() && r < ref_ids.len() {
            permutation.insert(hyp_ids[h], ref_ids[r]);
        }
    }
    CpResult {
        counts,
        wer: counts.wer(),
        permutation,
    }
}

/// Count ORC-matched words per (hypothesis speaker, reference speaker).
pub fn speaker_agreement(
    orc: &OrcResult,
    hyp_speakers: [&[usize]; 2],
    ref_speakers: &[usize],
    into: &mut BTreeMap<(usize, usize), usize>,
) {
    for (c, al) in orc.alignments.iter().enumerate() {
        for p in al.pairs.iter().filter(|p| p.op == EditOp::Match) {
            if let (Some(r), Some(h)) = (p.ref_idx, p.hyp_idx) {
                *into.entry((hyp_speakers[c][h], ref_speakers[r])).or_default() += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WderResult {
    pub value: f64,
    pub matched: usize,
    pub mislabeled: usize,
    /// Set when no word was correctly recognized (the ratio is then 0).
    pub undefined: bool,
}

/// Fraction of ORC-matched words whose cpWER-mapped hypothesis speaker
/// differs from the reference speaker.
pub fn wder(
    orc: &OrcResult,
    permutation: &BTreeMap<usize, usize>,
    hyp_speakers: [&[usize]; 2],
    ref_speakers: &[usize],
) -> WderResult {
    let mut matched = 0;
    let mut mislabeled = 0;
    for (c, al) in orc.alignments.iter().enumerate() {
        for p in al.pairs.iter().filter(|p| p.op == EditOp::Match) {
            let (Some(r), Some(h)) = (p.ref_idx, p.hyp_idx) else { continue };
            matched += 1;
            let mapped = permutation.get(&hyp_speakers[c][h]);
            if mapped != Some(&ref_speakers[r]) {
                mislabeled += 1;
            }
        }
    }
    WderResult {
        value: if matched == 0 { 0.0 } else { mislabeled as f64 / matched as f64 },
        matched,
        mislabeled,
        undefined: matched == 0,
    }
}

/// Fraction of groups whose hypothesized speaker count is exact.
pub fn counting_accuracy(ref_counts: &[usize], hyp_counts: &[usize]) -> Result<f64> {
    if ref_counts.is_empty() {
        return Err(SurtError::Score("counting accuracy over zero groups".into()));
    }
    if ref_counts.len() != hyp_counts.len() {
        return Err(SurtError::Score(format!(
            "{} reference groups but {} hypothesis groups",
            ref_counts.len(),
            hyp_counts.len()
        )));
    }
    let hits = ref_counts.iter().zip(hyp_counts).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / ref_counts.len() as f64)
}

/// Entropy (nats) of the softmax over speaker logits.
pub fn speaker_entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    let lz = z.ln();
    logits
        .iter()
        .map(|x| {
            let lp = x - m - lz;
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Speaker logits at a group's non-blank emissions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub ref_speakers: usize,
    pub speaker_logits: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub per_group: Vec<Option<f64>>,
    /// Mean of group means, keyed by reference speaker count.
    pub buckets: BTreeMap<usize, f64>,
    pub skipped: usize,
}

pub fn per_frame_entropy(traces: &[EntropyTrace]) -> EntropyReport {
    let mut per_group = Vec::with_capacity(traces.len());
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut skipped = 0;
    for t in traces {
        if t.speaker_logits.is_empty() {
            per_group.push(None);
            skipped += 1;
            continue;
        }
        let mean =
            t.speaker_logits.iter().map(|z| speaker_entropy(z)).sum::<f64>() / t.speaker_logits.len() as f64;
        per_group.push(Some(mean));
        let e = sums.entry(t.ref_speakers).or_default();
        e.0 += mean;
        e.1 += 1;
    }
    EntropyReport {
        per_group,
        buckets: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        skipped,
    }
}

/// Minimum ORC cost by enumerating all channel assignments (small N only).
pub fn orc_wer_brute(refs: &[Vec<usize>], hyps: [&[usize]; 2]) -> usize {
    let n = refs.len();
    (0..1usize << n)
        .map(|mask| {
            let mut ch = [Vec::new(), Vec::new()];
            for (k, r) in refs.iter().enumerate() {
                ch[(mask >> k) & 1].extend_from_slice(r);
            }
            edit_distance(&ch[0], hyps[0]).0 + edit_distance(&ch[1], hyps[1]).0
        })
        .min()
        .unwrap()
}

/// Minimum cpWER cost by enumerating all speaker permutations (small K only).
pub fn cpwer_exhaustive(refs: &BTreeMap<usize, Vec<usize>>, hyps: &BTreeMap<usize, Vec<usize>>) -> usize {
    let r: Vec<&Vec<usize>> = refs.values().collect();
    let h: Vec<&Vec<usize>> = hyps.values().collect();
    let n = r.len().max(h.len());
    let empty = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = usize::MAX;
    loop {
        let c: usize = (0..n)
            .map(|i| edit_distance(r.get(perm[i]).copied().unwrap_or(&empty), h.get(i).copied().unwrap_or(&empty)).0)
            .sum();
        best = best.min(c);
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else { break };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
        perm.swap(i - 1, j);
        perm[i..].reverse();
    }
    best
}
