//! Token-level training objectives.

use serde::{Deserialize, Serialize};
use slyt_tensor::{Float, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// KL divergence to the label-smoothed one-hot target.
    #[default]
    LabelSmoothing,
    /// Negative log-likelihood of the true token.
    Nll,
}

/// Argument order of the KL term in label-smoothing mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(prediction || target)`; needs `epsilon > 0`.
    PredictionToTarget,
    /// `KL(target || prediction)`: cross-entropy to the smoothed target
    /// minus its entropy. Equals the NLL when `epsilon = 0`.
    #[default]
    TargetToPrediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    pub epsilon: f64,
    pub kl_direction: KlDirection,
    /// Weight of the continuous-attribute L1 term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::LabelSmoothing,
            epsilon: 0.1,
            kl_direction: KlDirection::TargetToPrediction,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon {} not in [0, 1)", self.epsilon)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.mode == LossMode::LabelSmoothing
            && self.kl_direction == KlDirection::PredictionToTarget
            && self.epsilon == 0.0
        {
            return Err(Error::InvalidConfig(
                "KL(prediction || target) is infinite for a one-hot target; use epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Mass `1 - epsilon` on `true_class`, the rest spread evenly.
pub fn smoothed_target(true_class: usize, v: usize, epsilon: f64) -> Result<Vec<f64>> {
    if v < 2 {
        return Err(Error::InvalidVocab(v));
    }
    if true_class >= v {
        return Err(Error::InvalidConfig(format!("class {true_class} outside vocabulary of size {v}")));
    }
    let mut t = vec![epsilon / (v - 1) as f64; v];
    t[true_class] = 1.0 - epsilon;
    Ok(t)
}

/// Continuous-attribute supervision: `rows` index into the prediction
/// matrix, `targets` is `[rows.len(), n_continuous]` row-major.
pub struct ContinuousTargets<'t> {
    pub predictions: Var,
    pub rows: &'t [usize],
    pub targets: &'t [f64],
}

fn x_ln_x(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Mean over unmasked positions of the token loss, plus `lambda` times the
/// mean absolute error of the continuous head when targets are given.
///
/// `logits` is `[N, V]`; `targets[i]` is the token that row `i` predicts.
pub fn sequence_loss<T: Float>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    targets: &[u32],
    mask: &[bool],
    continuous: Option<ContinuousTargets<'_>>,
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let shape = tape.value(logits).shape().to_vec();
    let v = *shape.last().unwrap_or(&1);
    let n = tape.value(logits).rows();
    if targets.len() != n || mask.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{n} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t as usize >= v).map(|(t, _)| t) {
        return Err(Error::Vocab(format!("target {t} outside vocabulary of size {v}")));
    }
    if v < 2 {
        return Err(Error::InvalidVocab(v));
    }
    let inv = 1.0 / count as f64;
    let eps = if config.mode == LossMode::Nll { 0.0 } else { config.epsilon };
    let off = eps / (v - 1) as f64;
    let on = 1.0 - eps;
    let logp = tape.log_softmax(logits);

    let token_loss = match (config.mode, config.kl_direction) {
        (LossMode::LabelSmoothing, KlDirection::PredictionToTarget) => {
            let p = tape.softmax(logits);
            let (ln_on, ln_off) = (on.ln(), off.ln());
            let mut ln_t = vec![T::of(ln_off); n * v];
            let mut weight = vec![T::zero(); n * v];
            for i in (0..n).filter(|&i| mask[i]) {
                ln_t[i * v + targets[i] as usize] = T::of(ln_on);
                weight[i * v..(i + 1) * v].fill(T::of(inv));
            }
            let ln_t = tape.constant(Tensor::new(shape.clone(), ln_t)?);
            let weight = tape.constant(Tensor::new(shape, weight)?);
            let diff = tape.sub(logp, ln_t)?;
            let kl = tape.mul(p, diff)?;
            let kl = tape.mul(kl, weight)?;
            tape.sum(kl)
        }
        _ => {
            // cross-entropy to the target, minus the target's entropy
            let mut weight = vec![T::zero(); n * v];
            for i in (0..n).filter(|&i| mask[i]) {
                let row = &mut weight[i * v..(i + 1) * v];
                row.fill(T::of(-off * inv));
                row[targets[i] as usize] = T::of(-on * inv);
            }
            let weight = tape.constant(Tensor::new(shape, weight)?);
            let ce = tape.mul(logp, weight)?;
            let ce = tape.sum(ce);
            let neg_entropy = x_ln_x(on) + (v - 1) as f64 * x_ln_x(off);
            if neg_entropy == 0.0 {
                ce
            } else {
                let c = tape.constant(Tensor::scalar(T::of(neg_entropy)));
                tape.add(ce, c)?
            }
        }
    };

    match continuous {
        Some(c) if !c.rows.is_empty() && config.lambda > 0.0 => {
            let k = tape.value(c.predictions).last_dim();
            if c.targets.len() != c.rows.len() * k {
                return Err(Error::InvalidConfig(format!(
                    "{} continuous targets for {} rows of width {k}",
                    c.targets.len(),
                    c.rows.len()
                )));
            }
            let picked = tape.embedding(c.predictions, c.rows)?;
            let target = tape.constant(Tensor::new(
                vec![c.rows.len(), k],
                c.targets.iter().map(|&x| T::of(x)).collect(),
            )?);
            let l1 = tape.l1_loss(picked, target)?;
            let l1 = tape.scale(l1, T::of(config.lambda));
            Ok(tape.add(token_loss, l1)?)
        }
        _ => Ok(token_loss),
    }
}

/// Per-row NLL of the target token, from logits `[N, V]`, for unmasked rows.
pub fn token_nlls<T: Float>(logits: &Tensor<T>, targets: &[u32], mask: &[bool]) -> Vec<f64> {
    (0..logits.rows())
        .filter(|&i| mask[i])
        .map(|i| -log_softmax_at(logits.row(i), targets[i] as usize))
        .collect()
}

/// `ln softmax(row)[k]` in 64-bit.
pub fn log_softmax_at<T: Float>(row: &[T], k: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[k].as_f64() - lse
}
