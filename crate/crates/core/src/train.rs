//! Training loops, training-time speaker prefixing and checkpoints.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurtError};
use crate::fsutil::write_atomic;
use crate::gradcore::{optim_step, LrSchedule, OptimKind, OptimState, ParamStore};
use crate::mixsim::UtteranceGroup;
use crate::model::{surt_training_loss, LossBreakdown, Model, ModelConfig, TrainExample, TrainMode};
use crate::tensor::{read_container, write_container, Tensor};

/// Probabilities of prefixing 0..=4 speakers during training.
pub const KM_PROBS: [f64; 5] = [0.05, 0.05, 0.1, 0.2, 0.6];

#[derive(Clone, Debug)]
pub struct KmSampler {
    dist: WeightedIndex<f64>,
}

impl KmSampler {
    pub fn new(probs: &[f64]) -> Result<Self> {
        let dist = WeightedIndex::new(probs).map_err(|e| SurtError::Config(format!("K_m distribution: {e}")))?;
        Ok(KmSampler { dist })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }
}

impl Default for KmSampler {
    fn default() -> Self {
        KmSampler::new(&KM_PROBS).expect("valid probabilities")
    }
}

/// Mixture frames covered by the speaker's utterances, in time order.
fn speaker_frames(groups: &[&UtteranceGroup], speaker: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for g in groups {
        for u in g.utterances.iter().filter(|u| u.speaker == speaker) {
            for t in u.start_frame..u.end_frame {
                rows.push(g.mixture.row(t).to_vec());
            }
        }
    }
    rows
}

/// A random window of `tau` frames from the speaker's segments; shorter
/// material is repeated to fill the window.
pub fn sample_prefix_window(groups: &[&UtteranceGroup], speaker: usize, tau: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let rows = speaker_frames(groups, speaker);
    if rows.is_empty() {
        return Err(SurtError::Utterance(format!("speaker {speaker} has no frames in the batch")));
    }
    let f = rows[0].len();
    let start = if rows.len() > tau { rng.random_range(0..=rows.len() - tau) } else { 0 };
    let data: Vec<f64> = (0..tau).flat_map(|i| rows[(start + i) % rows.len()].clone()).collect();
    Ok(Tensor::matrix(tau, f, data))
}

/// Choose prefixed speakers for one group: `K_m` drawn from the sampler,
/// speakers drawn from the batch, keeping the label count within `k_max`.
pub fn choose_prefix_speakers(
    group: &UtteranceGroup,
    batch_speakers: &BTreeSet<usize>,
    k_max: usize,
    sampler: &KmSampler,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let own: Vec<usize> = group.speakers().into_iter().collect();
    let km = sampler.sample(rng).min(k_max);
    let required = (own.len() + km).saturating_sub(k_max).min(km);
    let mut chosen: Vec<usize> = own.choose_multiple(rng, required).copied().collect();
    let pool: Vec<usize> = batch_speakers.iter().copied().filter(|s| !chosen.contains(s)).collect();
    chosen.extend(pool.choose_multiple(rng, km - required).copied());
    chosen.shuffle(rng);
    // A smaller pool can leave too few labels for the group's new speakers.
    while chosen.len() + own.iter().filter(|s| !chosen.contains(s)).count() > k_max {
        chosen.pop();
    }
    chosen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Per-step multiplicative decay after warm-up.
    pub decay: f64,
    pub clip_norm: Option<f64>,
    /// Standard deviation of Gaussian noise added to every input frame.
    pub input_noise: f64,
    /// Prepend training-time speaker prefixes.
    pub prefix: bool,
    pub km_probs: Vec<f64>,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            mode: TrainMode::AsrOnly,
            steps: 1000,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 50,
            decay: 0.9997,
            clip_norm: Some(5.0),
            input_noise: 0.5,
            prefix: false,
            km_probs: KM_PROBS.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!(
            "step={} loss={:.6} transducer={:.6} ctc={:.6} mask={:.6} aux={:.6} lr={:.3e}",
            self.step, l.total, l.transducer, l.ctc, l.mask, l.aux, self.lr
        )
    }
}

/// Build the examples for one batch.
pub fn make_batch(
    groups: &[&UtteranceGroup],
    cfg: &ModelConfig,
    prefix: Option<&KmSampler>,
    rng: &mut impl Rng,
) -> Result<Vec<TrainExample>> {
    let speakers: BTreeSet<usize> = groups.iter().flat_map(|g| g.speakers()).collect();
    groups
        .iter()
        .map(|g| {
            let pre = match prefix {
                Some(sampler) => choose_prefix_speakers(g, &speakers, cfg.k_max, sampler, rng)
                    .into_iter()
                    .map(|s| Ok((s, sample_prefix_window(groups, s, cfg.tau, rng)?)))
                    .collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            TrainExample::from_group(g, &pre, cfg.k_max)
        })
        .collect()
}

/// Train one stage. `start_step` continues an earlier run's step count.
/// A non-finite loss or gradient aborts before the update, leaving the
/// model at its last good parameters.
pub fn train_stage(
    model: &mut Model,
    groups: &[UtteranceGroup],
    cfg: &StageConfig,
    start_step: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<u64> {
    if groups.is_empty() || cfg.batch_size == 0 {
        return Err(SurtError::Config("training needs data and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = if cfg.input_noise > 0.0 {
        Some(rand_distr::Normal::new(0.0, cfg.input_noise).map_err(|e| SurtError::Config(e.to_string()))?)
    } else {
        None
    };
    let sampler = if cfg.prefix { Some(KmSampler::new(&cfg.km_probs)?) } else { None };
    let schedule = LrSchedule {
        peak: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        decay: cfg.decay,
    };
    let mut state = OptimState::new(&model.params, OptimKind::adam(), schedule);
    state.clip_norm = cfg.clip_norm;
    let mut order: Vec<usize> = Vec::new();
    let mut step = start_step;
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..groups.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<&UtteranceGroup> = order.drain(..cfg.batch_size).map(|i| &groups[i]).collect();
        let mut batch = make_batch(&picked, &model.config, sampler.as_ref(), &mut rng)?;
        if let Some(noise) = &noise {
            for ex in &mut batch {
                for x in ex.input.data_mut() {
                    *x += noise.sample(&mut rng);
                }
            }
        }
        let (loss, grads) = surt_training_loss(model, &batch, cfg.mode)?;
        if !loss.total.is_finite() {
            return Err(SurtError::NonFinite(format!("loss at step {}", step + 1)));
        }
        let lr = state.schedule.lr(state.step + 1);
        let before = model.params.clone();
        optim_step(&mut model.params, &grads, &mut state)?;
        if !model.params.iter().all(|(_, t)| t.all_finite()) {
            model.params = before;
            return Err(SurtError::NonFinite(format!("parameters after step {}", step + 1)));
        }
        step += 1;
        on_step(&StepLog { step, lr, loss });
    }
    Ok(step)
}

/// Sequential recipe: ASR branch first, then the speaker branch with the
/// rest frozen. Each stage gets a fresh optimizer.
pub fn train_sequential(
    model: &mut Model,
    groups: &[UtteranceGroup],
    asr: &StageConfig,
    speaker: &StageConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<u64> {
    let step = train_stage(
        model,
        groups,
        &StageConfig {
            mode: TrainMode::AsrOnly,
            ..asr.clone()
        },
        0,
        &mut on_step,
    )?;
    train_stage(
        model,
        groups,
        &StageConfig {
            mode: TrainMode::SpeakerOnly,
            ..speaker.clone()
        },
        step,
        &mut on_step,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Parameters in the tensor container at `path`, config and step in
/// `path.json`.
pub fn save_checkpoint(path: &Path, model: &Model, step: u64) -> Result<()> {
    write_container(path, &model.params.to_named())?;
    let meta = CheckpointMeta {
        config: model.config.clone(),
        step,
    };
    write_atomic(&sidecar(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let side = sidecar(path);
    let text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SurtError::MissingFile(side.clone()),
        _ => SurtError::io(&side, e),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let params = ParamStore::from_named(read_container(path)?);
    Ok((Model::from_params(meta.config, params)?, meta.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixsim::{make_corpus, make_group_set, CorpusSpec, GroupConfig};

    fn groups(n: usize) -> Vec<UtteranceGroup> {
        let corpus = make_corpus(&CorpusSpec::default()).unwrap();
        make_group_set(&corpus, &GroupConfig::default(), n, "t", 1)
            .unwrap()
            .into_iter()
            .map(|s| s.groups.into_iter().next().unwrap())
            .collect()
    }

    fn small_model() -> Model {
        Model::new(
            ModelConfig {
                mask_hidden: 8,
                enc_hidden: 8,
                aux_hidden: 8,
                pred_hidden: 8,
                joiner_hidden: 8,
                aux_joiner_hidden: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn km_sampler_matches_probabilities() {
        let s = KmSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[s.sample(&mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(KM_PROBS) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn prefix_choice_respects_label_space() {
        let gs = groups(20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all: BTreeSet<usize> = (0..8).collect();
        let s = KmSampler::default();
        for g in &gs {
            for _ in 0..20 {
                let pre = choose_prefix_speakers(g, &all, 4, &s, &mut rng);
                let new = g.speakers().iter().filter(|x| !pre.contains(x)).count();
                assert!(pre.len() + new <= 4);
                let uniq: BTreeSet<usize> = pre.iter().copied().collect();
                assert_eq!(uniq.len(), pre.len());
            }
        }
    }

    #[test]
    fn prefix_windows_have_tau_frames() {
        let gs = groups(4);
        let refs: Vec<&UtteranceGroup> = gs.iter().collect();
        let spk = *gs[0].speakers().iter().next().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = sample_prefix_window(&refs, spk, 16, &mut rng).unwrap();
        assert_eq!(w.shape(), &[16, 16]);
        assert!(sample_prefix_window(&refs, 99, 16, &mut rng).is_err());
        let batch = make_batch(&refs, &ModelConfig::default(), Some(&KmSampler::default()), &mut rng).unwrap();
        for ex in &batch {
            assert_eq!(ex.prefix_frames % 16, 0);
            assert!(ex.speakers.iter().flatten().all(|&k| (1..=4).contains(&k)));
        }
    }

    #[test]
    fn speaker_stage_leaves_asr_params_unchanged() {
        let gs = groups(8);
        let mut m = small_model();
        let before = m.params.clone();
        let cfg = StageConfig {
            mode: TrainMode::SpeakerOnly,
            steps: 3,
            batch_size: 2,
            ..Default::default()
        };
        let end = train_stage(&mut m, &gs, &cfg, 5, |_| {}).unwrap();
        assert_eq!(end, 8);
        let mut changed = false;
        for ((name, a), (_, b)) in before.iter().zip(m.params.iter()) {
            if crate::model::is_aux_param(name) {
                changed |= a != b;
            } else {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
            }
        }
        assert!(changed);
    }

    #[test]
    fn asr_stage_reduces_loss() {
        let gs = groups(16);
        let mut m = small_model();
        let cfg = StageConfig {
            steps: 40,
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 5,
            ..Default::default()
        };
        let mut losses = Vec::new();
        train_stage(&mut m, &gs, &cfg, 0, |l| losses.push(l.loss.total)).unwrap();
        let head: f64 = losses[..5].iter().sum();
        let tail: f64 = losses[losses.len() - 5..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.surt");
        let m = small_model();
        save_checkpoint(&path, &m, 42).unwrap();
        let (back, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.config, m.config);
        for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.surt")),
            Err(SurtError::MissingFile(_))
        ));
    }
}
