//! Exact full-sum lattice losses with analytic gradients.
//!
//! All transducer variants share one forward/backward recursion over the
//! `(t, u)` grid: from `(t, u)` a blank moves to `(t + 1, u)` and a label moves
//! to `(t, u + 1)`; every path ends with a blank emitted at `(T − 1, U)`. The
//! variants differ only in how the per-node emission log-probabilities are
//! derived from the logits:
//!
//! * RNN-T: `log_softmax(z)` over blank and labels.
//! * HAT: blank `log σ(z[0])`, label `log(1 − σ(z[0])) + log_softmax(z[1:])`.
//!
//! The auxiliary speaker loss is HAT over speaker labels, whose blank slot is a
//! copy of the main joiner's blank logit.

use crate::error::{Result, SurtError};
use crate::gradcore::{log_add, log_sum_exp, sigmoid};

/// Upper bound on label-sequence length accepted by the lattice losses.
pub const MAX_LABELS: usize = 4096;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Transducer logits laid out as `T × (U + 1) × classes`, class 0 = blank.
#[derive(Clone, Debug, PartialEq)]
pub struct RnntLogits {
    frames: usize,
    labels: usize,
    classes: usize,
    values: Vec<f64>,
}

impl RnntLogits {
    /// `frames` = T, `labels` = U, `classes` = V + 1.
    pub fn new(frames: usize, labels: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(SurtError::Lattice("T must be at least 1".into()));
        }
        if classes < 2 {
            return Err(SurtError::Lattice("need at least one non-blank class".into()));
        }
        if labels > MAX_LABELS {
            return Err(SurtError::Lattice(format!("U = {labels} exceeds {MAX_LABELS}")));
        }
        if values.len() != frames * (labels + 1) * classes {
            return Err(SurtError::Lattice(format!(
                "expected {} logits for {frames}x{}x{classes}, got {}",
                frames * (labels + 1) * classes,
                labels + 1,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SurtError::Lattice(format!("non-finite logit at flat index {i}")));
        }
        Ok(RnntLogits {
            frames,
            labels,
            classes,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, t: usize, u: usize) -> &[f64] {
        let o = (t * (self.labels + 1) + u) * self.classes;
        &self.values[o..o + self.classes]
    }

    fn offset(&self, t: usize, u: usize) -> usize {
        (t * (self.labels + 1) + u) * self.classes
    }
}

/// Auxiliary speaker logits `T × (U + 1) × (K_max + 1)` whose slot 0 holds
/// the main joiner's blank logit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxLogits(RnntLogits);

impl AuxLogits {
    /// Build from the main logits and speaker logits `T × (U + 1) × K_max`,
    /// copying the main blank logit into slot 0.
    pub fn share_blank(main: &RnntLogits, speaker: &[f64], k_max: usize) -> Result<Self> {
        let nodes = main.frames * (main.labels + 1);
        if speaker.len() != nodes * k_max {
            return Err(SurtError::Lattice(format!(
                "speaker logits: expected {} values, got {}",
                nodes * k_max,
                speaker.len()
            )));
        }
        let mut values = Vec::with_capacity(nodes * (k_max + 1));
        for n in 0..nodes {
            values.push(main.values[n * main.classes]);
            values.extend_from_slice(&speaker[n * k_max..(n + 1) * k_max]);
        }
        Ok(AuxLogits(RnntLogits::new(main.frames, main.labels, k_max + 1, values)?))
    }

    /// Wrap logits whose blank slot is asserted (not copied) to be shared.
    pub fn from_logits(logits: RnntLogits) -> Self {
        AuxLogits(logits)
    }

    pub fn logits(&self) -> &RnntLogits {
        &self.0
    }

    pub fn k_max(&self) -> usize {
        self.0.classes - 1
    }

    /// Check that every blank slot equals the main blank logit bitwise.
    pub fn verify_shared_blank(&self, main: &RnntLogits) -> Result<()> {
        if main.frames != self.0.frames || main.labels != self.0.labels {
            return Err(SurtError::Lattice("aux/main lattice dims differ".into()));
        }
        for t in 0..main.frames {
            for u in 0..=main.labels {
                if self.0.at(t, u)[0].to_bits() != main.at(t, u)[0].to_bits() {
                    return Err(SurtError::Lattice(format!("blank slot differs at ({t}, {u})")));
                }
            }
        }
        Ok(())
    }

    /// Gradient w.r.t. the shared blank logits, `T × (U + 1)`, extracted from
    /// an aux loss gradient.
    pub fn blank_gradient(&self, result: &LossResult) -> Vec<f64> {
        result.grad.iter().step_by(self.0.classes).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    /// Negative log-likelihood; `+∞` when the instance is infeasible.
    pub loss: f64,
    /// `∂loss/∂input`, same layout as the input.
    pub grad: Vec<f64>,
    pub infeasible: bool,
}

fn check_labels(labels: &[usize], max: usize, what: &str) -> Result<()> {
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l == 0 || l > max) {
        return Err(SurtError::Lattice(format!(
            "{what} label {l} at position {i} outside [1, {max}]"
        )));
    }
    Ok(())
}

/// Node occupancies of the transducer lattice.
struct Occupancy {
    log_likelihood: f64,
    blank: Vec<f64>,
    label: Vec<f64>,
}

/// Forward/backward over the `(t, u)` grid given per-node log-probabilities
/// of emitting blank and of emitting the next reference label.
fn transducer_lattice(frames: usize, labels: usize, lp_blank: &[f64], lp_label: &[f64]) -> Occupancy {
    let w = labels + 1;
    let idx = |t: usize, u: usize| t * w + u;
    let mut alpha = vec![NEG_INF; frames * w];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..w {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = NEG_INF;
            if t > 0 {
                a = alpha[idx(t - 1, u)] + lp_blank[idx(t - 1, u)];
            }
            if u > 0 {
                a = log_add(a, alpha[idx(t, u - 1)] + lp_label[idx(t, u - 1)]);
            }
            alpha[idx(t, u)] = a;
        }
    }
    let last = idx(frames - 1, labels);
    let log_likelihood = alpha[last] + lp_blank[last];

    let mut beta = vec![NEG_INF; frames * w];
    beta[last] = lp_blank[last];
    for t in (0..frames).rev() {
        for u in (0..w).rev() {
            if t == frames - 1 && u == labels {
                continue;
            }
            let mut b = NEG_INF;
            if t + 1 < frames {
                b = beta[idx(t + 1, u)] + lp_blank[idx(t, u)];
            }
            if u < labels {
                b = log_add(b, beta[idx(t, u + 1)] + lp_label[idx(t, u)]);
            }
            beta[idx(t, u)] = b;
        }
    }

    let mut blank = vec![0.0; frames * w];
    let mut label = vec![0.0; frames * w];
    for t in 0..frames {
        for u in 0..w {
            let i = idx(t, u);
            if t + 1 < frames {
                blank[i] = (alpha[i] + lp_blank[i] + beta[idx(t + 1, u)] - log_likelihood).exp();
            } else if u == labels {
                blank[i] = (alpha[i] + lp_blank[i] - log_likelihood).exp();
            }
            if u < labels {
                label[i] = (alpha[i] + lp_label[i] + beta[idx(t, u + 1)] - log_likelihood).exp();
            }
        }
    }
    Occupancy {
        log_likelihood,
        blank,
        label,
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard softmax transducer loss.
pub fn rnnt_loss(logits: &RnntLogits, labels: &[usize]) -> Result<LossResult> {
    let (t_len, u_len, c) = (logits.frames, logits.labels, logits.classes);
    if labels.len() != u_len {
        return Err(SurtError::Lattice(format!(
            "{} labels for a lattice with U = {u_len}",
            labels.len()
        )));
    }
    check_labels(labels, c - 1, "token")?;
    let nodes = t_len * (u_len + 1);
    let mut lse = vec![0.0; nodes];
    let mut lp_blank = vec![0.0; nodes];
    let mut lp_label = vec![NEG_INF; nodes];
    for t in 0..t_len {
        for u in 0..=u_len {
            let n = t * (u_len + 1) + u;
            let z = logits.at(t, u);
            lse[n] = log_sum_exp(z);
            lp_blank[n] = z[0] - lse[n];
            if u < u_len {
                lp_label[n] = z[labels[u]] - lse[n];
            }
        }
    }
    let occ = transducer_lattice(t_len, u_len, &lp_blank, &lp_label);
    let mut grad = vec![0.0; logits.values.len()];
    for t in 0..t_len {
        for u in 0..=u_len {
            let n = t * (u_len + 1) + u;
            let (gb, gl) = (occ.blank[n], occ.label[n]);
            if gb == 0.0 && gl == 0.0 {
                continue;
            }
            let o = logits.offset(t, u);
            let z = logits.at(t, u);
            for k in 0..c {
                grad[o + k] = (gb + gl) * (z[k] - lse[n]).exp();
            }
            grad[o] -= gb;
            if u < u_len {
                grad[o + labels[u]] -= gl;
            }
        }
    }
    Ok(LossResult {
        loss: -occ.log_likelihood,
        grad,
        infeasible: false,
    })
}

fn hat_core(logits: &RnntLogits, labels: &[usize], what: &str) -> Result<LossResult> {
    let (t_len, u_len, c) = (logits.frames, logits.labels, logits.classes);
    if labels.len() != u_len {
        return Err(SurtError::Lattice(format!(
            "{} {what} labels for a lattice with U = {u_len}",
            labels.len()
        )));
    }
    check_labels(labels, c - 1, what)?;
    let nodes = t_len * (u_len + 1);
    let mut lse = vec![0.0; nodes];
    let mut lp_blank = vec![0.0; nodes];
    let mut lp_label = vec![NEG_INF; nodes];
    for t in 0..t_len {
        for u in 0..=u_len {
            let n = t * (u_len + 1) + u;
            let z = logits.at(t, u);
            lp_blank[n] = -softplus(-z[0]);
            lse[n] = log_sum_exp(&z[1..]);
            if u < u_len {
                lp_label[n] = -softplus(z[0]) + z[labels[u]] - lse[n];
            }
        }
    }
    let occ = transducer_lattice(t_len, u_len, &lp_blank, &lp_label);
    let mut grad = vec![0.0; logits.values.len()];
    for t in 0..t_len {
        for u in 0..=u_len {
            let n = t * (u_len + 1) + u;
            let (gb, gl) = (occ.blank[n], occ.label[n]);
            if gb == 0.0 && gl == 0.0 {
                continue;
            }
            let o = logits.offset(t, u);
            let z = logits.at(t, u);
            let b = sigmoid(z[0]);
            grad[o] = -gb * (1.0 - b) + gl * b;
            if gl != 0.0 {
                for k in 1..c {
                    grad[o + k] = gl * (z[k] - lse[n]).exp();
                }
                grad[o + labels[u]] -= gl;
            }
        }
    }
    Ok(LossResult {
        loss: -occ.log_likelihood,
        grad,
        infeasible: false,
    })
}

/// Transducer loss with the blank factored out as `σ(z[0])`.
pub fn hat_loss(logits: &RnntLogits, labels: &[usize]) -> Result<LossResult> {
    hat_core(logits, labels, "token")
}

/// HAT loss over per-token speaker labels. `speaker_labels` must have one
/// entry per ASR token of the same channel, i.e. exactly U entries.
pub fn aux_hat_loss(aux: &AuxLogits, speaker_labels: &[usize]) -> Result<LossResult> {
    if speaker_labels.len() != aux.0.labels {
        return Err(SurtError::Lattice(format!(
            "{} speaker labels for {} ASR tokens",
            speaker_labels.len(),
            aux.0.labels
        )));
    }
    hat_core(&aux.0, speaker_labels, "speaker")
}

/// CTC loss over `log_probs` (`T × (V + 1)`, blank = 0).
pub fn ctc_loss(log_probs: &[f64], frames: usize, classes: usize, labels: &[usize]) -> Result<LossResult> {
    if frames == 0 || log_probs.len() != frames * classes {
        return Err(SurtError::Lattice(format!(
            "ctc input needs {frames}x{classes} values, got {}",
            log_probs.len()
        )));
    }
    if let Some(i) = log_probs.iter().position(|v| !v.is_finite()) {
        return Err(SurtError::Lattice(format!("non-finite log-prob at flat index {i}")));
    }
    check_labels(labels, classes - 1, "token")?;
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    if labels.len() + repeats > frames {
        return Ok(LossResult {
            loss: f64::INFINITY,
            grad: vec![0.0; log_probs.len()],
            infeasible: true,
        });
    }
    let ext: Vec<usize> = std::iter::once(0)
        .chain(labels.iter().flat_map(|&l| [l, 0]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    let can_skip = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![NEG_INF; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, ext[s]);
        }
    }
    let last = (frames - 1) * s_len;
    let mut ll = alpha[last + s_len - 1];
    if s_len > 1 {
        ll = log_add(ll, alpha[last + s_len - 2]);
    }

    let mut beta = vec![NEG_INF; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, ext[s]);
        }
    }

    let mut grad = vec![0.0; log_probs.len()];
    for t in 0..frames {
        for s in 0..s_len {
            let i = t * s_len + s;
            let occ = alpha[i] + beta[i] - lp(t, ext[s]) - ll;
            if occ > NEG_INF {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok(LossResult {
        loss: -ll,
        grad,
        infeasible: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatticeMode {
    Rnnt,
    Hat,
    Aux,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Enumeration {
    pub loss: f64,
    pub paths: usize,
}

/// Loss by explicit enumeration of every monotone alignment path. Exponential
/// in `T + U`; used only to verify the dynamic programs.
pub fn enumerate_paths_oracle(logits: &RnntLogits, labels: &[usize], mode: LatticeMode) -> Result<Enumeration> {
    let (t_len, u_len) = (logits.frames, logits.labels);
    if t_len + u_len > 12 {
        return Err(SurtError::EnumerationGuard(t_len + u_len));
    }
    if labels.len() != u_len {
        return Err(SurtError::Lattice("label count differs from U".into()));
    }
    check_labels(labels, logits.classes - 1, "oracle")?;

    let emission = |t: usize, u: usize, blank: bool| -> f64 {
        let z = logits.at(t, u);
        match mode {
            LatticeMode::Rnnt => {
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                let k = if blank { 0 } else { labels[u] };
                (z[k].exp() / denom).ln()
            }
            LatticeMode::Hat | LatticeMode::Aux => {
                let b = 1.0 / (1.0 + (-z[0]).exp());
                if blank {
                    b.ln()
                } else {
                    let denom: f64 = z[1..].iter().map(|v| v.exp()).sum();
                    ((1.0 - b) * z[labels[u]].exp() / denom).ln()
                }
            }
        }
    };

    let mut path_scores = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, score)) = stack.pop() {
        if t == t_len - 1 && u == u_len {
            path_scores.push(score + emission(t, u, true));
            continue;
        }
        if t + 1 < t_len {
            stack.push((t + 1, u, score + emission(t, u, true)));
        }
        if u < u_len {
            stack.push((t, u + 1, score + emission(t, u, false)));
        }
    }
    Ok(Enumeration {
        loss: -log_sum_exp(&path_scores),
        paths: path_scores.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng, t: usize, u: usize, c: usize) -> RnntLogits {
        let n = t * (u + 1) * c;
        RnntLogits::new(t, u, c, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, u: usize, max: usize) -> Vec<usize> {
        (0..u).map(|_| rng.random_range(1..=max)).collect()
    }

    fn fd_max_rel_err(logits: &RnntLogits, analytic: &[f64], f: impl Fn(&RnntLogits) -> f64) -> f64 {
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..logits.values.len() {
            let mut p = logits.clone();
            p.values[i] += eps;
            let mut m = logits.clone();
            m.values[i] -= eps;
            let c = (f(&p) - f(&m)) / (2.0 * eps);
            let a = analytic[i];
            worst = worst.max((a - c).abs() / (a.abs() + c.abs() + 1e-12));
        }
        worst
    }

    #[test]
    fn rnnt_uniform_single_path() {
        let l = RnntLogits::new(1, 0, 3, vec![0.0; 3]).unwrap();
        let r = rnnt_loss(&l, &[]).unwrap();
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rnnt_forced_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_logits(&mut rng, 1, 1, 4);
        let y = 2;
        let r = rnnt_loss(&l, &[y]).unwrap();
        let p = |z: &[f64], k: usize| z[k].exp() / z.iter().map(|v| v.exp()).sum::<f64>();
        let expect = -(p(l.at(0, 0), y) * p(l.at(0, 1), 0)).ln();
        assert!((r.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn hat_closed_forms() {
        let l = RnntLogits::new(1, 0, 3, vec![0.0, 1.0, -1.0]).unwrap();
        assert!((hat_loss(&l, &[]).unwrap().loss - 2f64.ln()).abs() < 1e-12);
        let l = RnntLogits::new(1, 0, 3, vec![20.0, 1.0, -1.0]).unwrap();
        assert!(hat_loss(&l, &[]).unwrap().loss < 1e-8);
    }

    #[test]
    fn enumeration_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (t, u, paths) in [(1, 0, 1), (2, 1, 2), (4, 3, 20)] {
            let l = random_logits(&mut rng, t, u, 4);
            let y = random_labels(&mut rng, u, 3);
            let e = enumerate_paths_oracle(&l, &y, LatticeMode::Rnnt).unwrap();
            assert_eq!(e.paths, paths);
            let dp = rnnt_loss(&l, &y).unwrap().loss;
            assert!((dp - e.loss).abs() < 1e-10);
        }
        let l = random_logits(&mut rng, 7, 6, 3);
        assert!(matches!(
            enumerate_paths_oracle(&l, &[1; 6], LatticeMode::Hat),
            Err(SurtError::EnumerationGuard(13))
        ));
    }

    #[test]
    fn hat_random_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = random_logits(&mut rng, 3, 2, 5);
        let y = random_labels(&mut rng, 2, 4);
        let dp = hat_loss(&l, &y).unwrap().loss;
        let e = enumerate_paths_oracle(&l, &y, LatticeMode::Hat).unwrap().loss;
        assert!((dp - e).abs() < 1e-10);
    }

    #[test]
    fn aux_reduces_to_hat_without_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let main = random_logits(&mut rng, 4, 0, 6);
        let spk: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let aux = AuxLogits::share_blank(&main, &spk, 3).unwrap();
        aux.verify_shared_blank(&main).unwrap();
        let a = aux_hat_loss(&aux, &[]).unwrap().loss;
        let h = hat_loss(&main, &[]).unwrap().loss;
        assert_eq!(a, h);
    }

    #[test]
    fn aux_single_class_depends_only_on_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let main = random_logits(&mut rng, 3, 2, 4);
        let spk_a: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let spk_b: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let la = aux_hat_loss(&AuxLogits::share_blank(&main, &spk_a, 1).unwrap(), &[1, 1]).unwrap();
        let lb = aux_hat_loss(&AuxLogits::share_blank(&main, &spk_b, 1).unwrap(), &[1, 1]).unwrap();
        assert!((la.loss - lb.loss).abs() < 1e-12);
    }

    #[test]
    fn aux_random_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let main = random_logits(&mut rng, 3, 2, 5);
        let spk: Vec<f64> = (0..3 * 3 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let aux = AuxLogits::share_blank(&main, &spk, 3).unwrap();
        let s = random_labels(&mut rng, 2, 3);
        let dp = aux_hat_loss(&aux, &s).unwrap().loss;
        let e = enumerate_paths_oracle(aux.logits(), &s, LatticeMode::Aux).unwrap().loss;
        assert!((dp - e).abs() < 1e-10);
    }

    #[test]
    fn aux_length_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let main = random_logits(&mut rng, 3, 2, 5);
        let aux = AuxLogits::share_blank(&main, &[0.0; 3 * 3 * 2], 2).unwrap();
        assert!(aux_hat_loss(&aux, &[1]).is_err());
        assert!(aux_hat_loss(&aux, &[1, 3]).is_err());
    }

    #[test]
    fn aux_blank_gradient_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let main = random_logits(&mut rng, 3, 1, 4);
        let spk: Vec<f64> = (0..3 * 2 * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let aux = AuxLogits::share_blank(&main, &spk, 2).unwrap();
        let r = aux_hat_loss(&aux, &[2]).unwrap();
        let gb = aux.blank_gradient(&r);
        assert_eq!(gb.len(), 6);
        assert_eq!(gb[0], r.grad[0]);
        assert_eq!(gb[1], r.grad[3]);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let l = RnntLogits::new(2, 1, 3, vec![0.0; 12]).unwrap();
        assert!(rnnt_loss(&l, &[3]).is_err());
        assert!(rnnt_loss(&l, &[0]).is_err());
        assert!(RnntLogits::new(2, 1, 3, vec![f64::NAN; 12]).is_err());
        assert!(RnntLogits::new(0, 1, 3, vec![]).is_err());
    }

    #[test]
    fn ctc_trivial_and_infeasible() {
        let lp = [0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
        let r = ctc_loss(&lp, 1, 3, &[]).unwrap();
        assert!((r.loss + 0.2f64.ln()).abs() < 1e-12);
        let r = ctc_loss(&[lp, lp].concat(), 2, 3, &[1, 1]).unwrap();
        assert!(r.infeasible && r.loss.is_infinite());
        let r = ctc_loss(&[lp, lp, lp].concat(), 3, 3, &[1, 1]).unwrap();
        assert!(!r.infeasible && r.loss.is_finite());
    }

    /// Sum over all (V+1)^T frame labelings that collapse to the reference.
    fn ctc_brute_force(lp: &[f64], frames: usize, classes: usize, labels: &[usize]) -> f64 {
        let total = classes.pow(frames as u32);
        let mut scores = Vec::new();
        for code in 0..total {
            let mut c = code;
            let mut path = Vec::with_capacity(frames);
            for _ in 0..frames {
                path.push(c % classes);
                c /= classes;
            }
            let mut collapsed = Vec::new();
            let mut prev = usize::MAX;
            for &k in &path {
                if k != prev && k != 0 {
                    collapsed.push(k);
                }
                prev = k;
            }
            if collapsed == labels {
                scores.push(path.iter().enumerate().map(|(t, &k)| lp[t * classes + k]).sum());
            }
        }
        -log_sum_exp(&scores)
    }

    #[test]
    fn ctc_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (frames, labels) in [(3usize, vec![2usize]), (4, vec![1, 1]), (4, vec![1, 2]), (5, vec![2, 1, 2])] {
            let classes = 3;
            let mut lp = Vec::new();
            for _ in 0..frames {
                let z: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
                let l = log_sum_exp(&z);
                lp.extend(z.iter().map(|v| v - l));
            }
            let dp = ctc_loss(&lp, frames, classes, &labels).unwrap().loss;
            let bf = ctc_brute_force(&lp, frames, classes, &labels);
            assert!((dp - bf).abs() < 1e-10, "{frames} {labels:?}: {dp} vs {bf}");
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let l = random_logits(&mut rng, 3, 2, 4);
            let y = random_labels(&mut rng, 2, 3);
            let r = rnnt_loss(&l, &y).unwrap();
            assert!(fd_max_rel_err(&l, &r.grad, |x| rnnt_loss(x, &y).unwrap().loss) < 1e-4);
            let r = hat_loss(&l, &y).unwrap();
            assert!(fd_max_rel_err(&l, &r.grad, |x| hat_loss(x, &y).unwrap().loss) < 1e-4);
        }
    }

    #[test]
    fn rnnt_shift_invariance_and_hat_partial_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l = random_logits(&mut rng, 3, 2, 5);
        let y = random_labels(&mut rng, 2, 4);
        let mut shifted = l.clone();
        for v in &mut shifted.values[..5] {
            *v += 1.7;
        }
        let a = rnnt_loss(&l, &y).unwrap().loss;
        let b = rnnt_loss(&shifted, &y).unwrap().loss;
        assert!((a - b).abs() < 1e-12);

        let mut label_shift = l.clone();
        for v in &mut label_shift.values[1..5] {
            *v += 1.7;
        }
        let h = hat_loss(&l, &y).unwrap().loss;
        assert!((h - hat_loss(&label_shift, &y).unwrap().loss).abs() < 1e-12);
        assert!((h - hat_loss(&shifted, &y).unwrap().loss).abs() > 1e-6);
    }

    #[test]
    fn hat_emission_distribution_normalises() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b = sigmoid(z[0]);
            let lse = log_sum_exp(&z[1..]);
            let mass: f64 = z[1..].iter().map(|v| (1.0 - b) * (v - lse).exp()).sum();
            assert!((b + mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_matches_rnnt_under_matched_emissions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let l = random_logits(&mut rng, 4, 3, 5);
            let y = random_labels(&mut rng, 3, 4);
            let mut hat_vals = l.values.clone();
            for chunk in hat_vals.chunks_mut(5) {
                let p0 = (chunk[0] - log_sum_exp(chunk)).exp();
                chunk[0] = p0.ln() - (1.0 - p0).ln();
            }
            let hl = RnntLogits::new(4, 3, 5, hat_vals).unwrap();
            let d = rnnt_loss(&l, &y).unwrap().loss - hat_loss(&hl, &y).unwrap().loss;
            assert!(d.abs() < 1e-9, "{d}");
        }
    }
}
