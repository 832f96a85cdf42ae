//! Plain-text `key = value` run configuration.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decode::DecodeMode;
use crate::error::{Result, SurtError};
use crate::mixsim::{CorpusSpec, GroupConfig, MixConfig, SessionConfig};
use crate::model::{ModelConfig, TransducerKind, TrainMode};
use crate::train::{StageConfig, KM_PROBS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sequential,
    Joint,
    AsrOnly,
    SpeakerOnly,
}

/// Every setting any command reads. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,

    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub num_speakers: usize,
    pub offset_scale: f64,
    pub speaker_dims: usize,
    pub noise_std: f64,

    pub speakers_per_group_min: usize,
    pub speakers_per_group_max: usize,
    pub utterances_per_group_min: usize,
    pub utterances_per_group_max: usize,
    pub tokens_per_utterance_min: usize,
    pub tokens_per_utterance_max: usize,
    pub target_overlap: f64,
    pub overlap_tolerance: f64,
    pub max_overlap_frames: usize,
    pub min_gap_frames: usize,
    pub max_gap_frames: usize,

    pub train_groups: usize,
    pub test_groups: usize,
    pub sessions: usize,
    pub session_groups: usize,
    pub session_speakers: usize,
    pub session_gap_min: usize,
    pub session_gap_max: usize,
    pub enrollment_tokens: usize,

    pub k_max: usize,
    pub subsample: usize,
    pub mask_hidden: usize,
    pub mask_layers: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub aux_tap_layer: usize,
    pub aux_layers: usize,
    pub aux_hidden: usize,
    pub pred_hidden: usize,
    pub joiner_hidden: usize,
    pub aux_joiner_hidden: usize,
    pub tau: usize,
    pub lambda_ctc: f64,
    pub lambda_mask: f64,
    pub loss: TransducerKind,
    pub aux_branch_tying: bool,

    pub strategy: Strategy,
    pub asr_steps: u64,
    pub speaker_steps: u64,
    pub joint_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub speaker_lr: f64,
    pub warmup_steps: u64,
    pub decay: f64,
    pub clip_norm: Option<f64>,
    pub input_noise: f64,
    pub prefix: bool,
    pub km_probs: Vec<f64>,

    pub train_manifest: String,
    pub test_manifest: String,
    pub session_manifest: String,
    pub checkpoint: String,
    pub resume: Option<String>,
    pub decode_mode: DecodeMode,
    pub decode_manifest: String,
    pub transcript: String,
    pub report: String,
    pub embeddings: String,
    pub oracle_check: bool,
    pub gradcheck_instances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let group = GroupConfig::default();
        let session = SessionConfig::default();
        let model = ModelConfig::default();
        let stage = StageConfig::default();
        RunConfig {
            seed: 0,
            jobs: 1,
            vocab_size: corpus.vocab_size,
            feature_dim: corpus.feature_dim,
            frames_per_token: corpus.frames_per_token,
            num_speakers: corpus.num_speakers,
            offset_scale: corpus.speaker_offset_scale,
            speaker_dims: corpus.speaker_dims,
            noise_std: corpus.noise_std,
            speakers_per_group_min: group.speakers_per_group.0,
            speakers_per_group_max: group.speakers_per_group.1,
            utterances_per_group_min: group.utterances_per_group.0,
            utterances_per_group_max: group.utterances_per_group.1,
            tokens_per_utterance_min: group.tokens_per_utterance.0,
            tokens_per_utterance_max: group.tokens_per_utterance.1,
            target_overlap: group.mix.target_overlap,
            overlap_tolerance: group.mix.tolerance,
            max_overlap_frames: group.mix.max_overlap_frames,
            min_gap_frames: group.mix.min_gap_frames,
            max_gap_frames: group.mix.max_gap_frames,
            train_groups: 500,
            test_groups: 50,
            sessions: 20,
            session_groups: session.num_groups,
            session_speakers: session.num_speakers,
            session_gap_min: session.gap_frames.0,
            session_gap_max: session.gap_frames.1,
            enrollment_tokens: session.enrollment_tokens,
            k_max: model.k_max,
            subsample: model.subsample,
            mask_hidden: model.mask_hidden,
            mask_layers: model.mask_layers,
            enc_layers: model.enc_layers,
            enc_hidden: model.enc_hidden,
            aux_tap_layer: model.aux_tap_layer,
            aux_layers: model.aux_layers,
            aux_hidden: model.aux_hidden,
            pred_hidden: model.pred_hidden,
            joiner_hidden: model.joiner_hidden,
            aux_joiner_hidden: model.aux_joiner_hidden,
            tau: model.tau,
            lambda_ctc: model.lambda_ctc,
            lambda_mask: model.lambda_mask,
            loss: model.loss,
            aux_branch_tying: model.aux_branch_tying,
            strategy: Strategy::Sequential,
            asr_steps: 5000,
            speaker_steps: 1500,
            joint_steps: 5000,
            batch_size: stage.batch_size,
            lr: stage.lr,
            speaker_lr: stage.lr,
            warmup_steps: stage.warmup_steps,
            decay: stage.decay,
            clip_norm: stage.clip_norm,
            input_noise: stage.input_noise,
            prefix: false,
            km_probs: KM_PROBS.to_vec(),
            train_manifest: "data/train.jsonl".into(),
            test_manifest: "data/test.jsonl".into(),
            session_manifest: "data/sessions.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            resume: None,
            decode_mode: DecodeMode::None,
            decode_manifest: "data/test.jsonl".into(),
            transcript: "transcript.jsonl".into(),
            report: "report.json".into(),
            embeddings: "embeddings.jsonl".into(),
            oracle_check: false,
            gradcheck_instances: 20,
        }
    }
}

fn parse_error(key: &str, value: &str, expected: &str) -> SurtError {
    SurtError::Config(format!("{key}: cannot parse {value:?} as {expected}"))
}

fn parse_number(key: &str, value: &str) -> Result<Value> {
    if let Ok(u) = value.parse::<u64>() {
        return Ok(Value::from(u));
    }
    value
        .parse::<f64>()
        .ok()
        .filter(|f| f.is_finite())
        .map(Value::from)
        .ok_or_else(|| parse_error(key, value, "a number"))
}

/// Convert `value` to the JSON type already held by `slot`.
fn coerce(key: &str, slot: &Value, value: &str) -> Result<Value> {
    match slot {
        Value::Bool(_) => match value {
            "true" | "1" | "yes" => Ok(Value::Bool(true)),
            "false" | "0" | "no" => Ok(Value::Bool(false)),
            _ => Err(parse_error(key, value, "a boolean")),
        },
        Value::Number(_) => parse_number(key, value),
        Value::String(_) => Ok(Value::String(value.to_string())),
        Value::Array(_) => value
            .split(',')
            .map(|p| parse_number(key, p.trim()))
            .collect::<Result<Vec<_>>>()
            .map(Value::Array),
        Value::Null => match value {
            "" | "none" => Ok(Value::Null),
            _ => parse_number(key, value).or_else(|_| Ok(Value::String(value.to_string()))),
        },
        Value::Object(_) => Err(SurtError::Config(format!("{key}: nested values are not settable"))),
    }
}

/// Render a JSON value in `key = value` form.
fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Set one key; the value is validated against the key's type.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut all = serde_json::to_value(&*self)?;
        let obj = all.as_object_mut().expect("struct serializes to an object");
        let slot = obj
            .get_mut(key)
            .ok_or_else(|| SurtError::Config(format!("unknown key {key:?}")))?;
        let value = value.trim();
        let coerced = coerce(key, slot, value);
        let attempt = |v: Value, mut all: Value| -> Result<RunConfig> {
            all[key] = v;
            serde_json::from_value(all).map_err(|e| SurtError::Config(format!("{key}: {e}")))
        };
        let result = match coerced {
            Ok(v) => attempt(v, all.clone()),
            Err(e) => Err(e),
        };
        *self = match result {
            // Optional keys are cleared with `none`.
            Err(_) if value == "none" => attempt(Value::Null, all)?,
            other => other?,
        };
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SurtError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| SurtError::Config(format!("line {}: {}", i + 1, e)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// All keys, one `key = value` per line, sorted by key.
    pub fn to_text(&self) -> String {
        let all = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in all.as_object().expect("object") {
            out.push_str(&format!("{k} = {}\n", render(v)));
        }
        out
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            vocab_size: self.vocab_size,
            feature_dim: self.feature_dim,
            frames_per_token: self.frames_per_token,
            num_speakers: self.num_speakers,
            speaker_offset_scale: self.offset_scale,
            speaker_dims: self.speaker_dims,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn group_config(&self) -> GroupConfig {
        GroupConfig {
            speakers_per_group: (self.speakers_per_group_min, self.speakers_per_group_max),
            utterances_per_group: (self.utterances_per_group_min, self.utterances_per_group_max),
            tokens_per_utterance: (self.tokens_per_utterance_min, self.tokens_per_utterance_max),
            mix: MixConfig {
                target_overlap: self.target_overlap,
                tolerance: self.overlap_tolerance,
                max_overlap_frames: self.max_overlap_frames,
                min_gap_frames: self.min_gap_frames,
                max_gap_frames: self.max_gap_frames,
                max_retries: MixConfig::default().max_retries,
            },
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            num_groups: self.session_groups,
            num_speakers: self.session_speakers,
            group: self.group_config(),
            gap_frames: (self.session_gap_min, self.session_gap_max),
            enrollment_tokens: self.enrollment_tokens,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            vocab_size: self.vocab_size,
            k_max: self.k_max,
            subsample: self.subsample,
            mask_hidden: self.mask_hidden,
            mask_layers: self.mask_layers,
            enc_layers: self.enc_layers,
            enc_hidden: self.enc_hidden,
            aux_tap_layer: self.aux_tap_layer,
            aux_layers: self.aux_layers,
            aux_hidden: self.aux_hidden,
            pred_hidden: self.pred_hidden,
            joiner_hidden: self.joiner_hidden,
            aux_joiner_hidden: self.aux_joiner_hidden,
            tau: self.tau,
            lambda_ctc: self.lambda_ctc,
            lambda_mask: self.lambda_mask,
            loss: self.loss,
            aux_branch_tying: self.aux_branch_tying,
        }
    }

    pub fn stage_config(&self, mode: TrainMode) -> StageConfig {
        let (steps, lr) = match mode {
            TrainMode::AsrOnly => (self.asr_steps, self.lr),
            TrainMode::SpeakerOnly => (self.speaker_steps, self.speaker_lr),
            TrainMode::Joint => (self.joint_steps, self.lr),
        };
        StageConfig {
            mode,
            steps,
            batch_size: self.batch_size,
            lr,
            warmup_steps: self.warmup_steps,
            decay: self.decay,
            clip_norm: self.clip_norm,
            input_noise: self.input_noise,
            prefix: self.prefix,
            km_probs: self.km_probs.clone(),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let c = RunConfig::from_text(
            "# comment\nseed = 7\nloss = rnnt\nprefix = true\nkm_probs = 0.2, 0.2,0.2,0.2,0.2\nclip_norm = none\nresume = a.ckpt\ndecode_mode = prefix\nstrategy = joint\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.loss, TransducerKind::Rnnt);
        assert!(c.prefix);
        assert_eq!(c.km_probs, vec![0.2; 5]);
        assert_eq!(c.clip_norm, None);
        assert_eq!(c.resume.as_deref(), Some("a.ckpt"));
        assert_eq!(c.decode_mode, DecodeMode::Prefix);
        assert_eq!(c.strategy, Strategy::Joint);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        for bad in ["nope = 1", "seed = -1", "seed = x", "prefix = maybe", "loss = ctc", "just text", "lr = inf", "seed = none"] {
            assert!(RunConfig::from_text(bad).is_err(), "{bad}");
        }
        let e = RunConfig::from_text("seed = 1\nbogus = 2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
    }

    #[test]
    fn derived_configs_follow_keys() {
        let c = RunConfig::from_text("vocab_size = 10\nenc_layers = 3\naux_tap_layer = 3\nspeaker_steps = 9").unwrap();
        assert_eq!(c.corpus_spec().vocab_size, 10);
        assert_eq!(c.model_config().vocab_size, 10);
        assert!(c.model_config().validate().is_ok());
        assert_eq!(c.stage_config(TrainMode::SpeakerOnly).steps, 9);
    }
}
