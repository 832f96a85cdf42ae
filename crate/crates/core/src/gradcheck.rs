//! Finite-difference checks of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lattices::{aux_hat_loss, ctc_loss, hat_loss, rnnt_loss, AuxLogits, RnntLogits};

/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `|a - c| / max(|a|, |c|, FLOOR)`, maximised over coordinates.
pub fn max_rel_err(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + EPS;
        let up = f(&p)?;
        p[i] = x[i] - EPS;
        let down = f(&p)?;
        p[i] = x[i];
        let c = (up - down) / (2.0 * EPS);
        let a = analytic[i];
        worst = worst.max((a - c).abs() / a.abs().max(c.abs()).max(FLOOR));
    }
    Ok(worst)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn random_labels(rng: &mut ChaCha8Rng, u: usize, max: usize) -> Vec<usize> {
    (0..u).map(|_| rng.random_range(1..=max)).collect()
}

fn log_softmax_rows(z: &mut [f64], classes: usize) {
    for row in z.chunks_mut(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= l);
    }
}

/// Check RNN-T, HAT, auxiliary speaker HAT and CTC on `instances` random
/// small lattices each.
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let t = rng.random_range(1..=4);
        let u = rng.random_range(0..=3);
        let classes = rng.random_range(2..=5);
        let labels = random_labels(&mut rng, u, classes - 1);
        let values = random_vec(&mut rng, t * (u + 1) * classes);
        let build = |v: &[f64]| RnntLogits::new(t, u, classes, v.to_vec());

        let r = rnnt_loss(&build(&values)?, &labels)?;
        worst[0] = worst[0].max(max_rel_err(&values, &r.grad, |v| Ok(rnnt_loss(&build(v)?, &labels)?.loss))?);

        let r = hat_loss(&build(&values)?, &labels)?;
        worst[1] = worst[1].max(max_rel_err(&values, &r.grad, |v| Ok(hat_loss(&build(v)?, &labels)?.loss))?);

        let k_max = rng.random_range(1..=3);
        let speakers = random_labels(&mut rng, u, k_max);
        let spk = random_vec(&mut rng, t * (u + 1) * k_max);
        let aux = AuxLogits::share_blank(&build(&values)?, &spk, k_max)?;
        let aux_values = aux.logits().values().to_vec();
        let aux_build = |v: &[f64]| -> Result<AuxLogits> { Ok(AuxLogits::from_logits(RnntLogits::new(t, u, k_max + 1, v.to_vec())?)) };
        let r = aux_hat_loss(&aux, &speakers)?;
        worst[2] = worst[2].max(max_rel_err(&aux_values, &r.grad, |v| Ok(aux_hat_loss(&aux_build(v)?, &speakers)?.loss))?);

        let ctc_len = rng.random_range(0..=2);
        let ctc_labels = random_labels(&mut rng, ctc_len, classes - 1);
        let frames = 2 * ctc_labels.len() + rng.random_range(1..=2);
        let mut lp = random_vec(&mut rng, frames * classes);
        log_softmax_rows(&mut lp, classes);
        let r = ctc_loss(&lp, frames, classes, &ctc_labels)?;
        worst[3] = worst[3].max(max_rel_err(&lp, &r.grad, |v| Ok(ctc_loss(v, frames, classes, &ctc_labels)?.loss))?);
    }
    Ok(["rnnt", "hat", "aux_hat", "ctc"]
        .iter()
        .zip(worst)
        .map(|(name, e)| GradcheckReport {
            loss: name.to_string(),
            instances,
            max_rel_err: e,
        })
        .collect())
}
