//! Focal loss, negative sampling and the weighted multi-task objective.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{clamp_prob, focal_value, Var};
use crate::params::Forward;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_entity: f64,
    pub lambda_adjacency: f64,
    pub lambda_relation: f64,
    pub negative_sample_rate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 0.0,
            lambda_entity: 1.0,
            lambda_adjacency: 0.0,
            lambda_relation: 1.0,
            negative_sample_rate: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma {} must be a nonnegative number", self.gamma)));
        }
        let lambdas = [self.lambda_entity, self.lambda_adjacency, self.lambda_relation];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if lambdas.iter().all(|l| *l == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if !(self.negative_sample_rate > 0.0 && self.negative_sample_rate <= 1.0) {
            return Err(Error::config("negative_sample_rate must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `−α_t (1 − p_t)^γ log p_t` for one probability, clamped away from 0 and 1.
pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    focal_value(clamp_prob(p), y, alpha, gamma)
}

/// Keeps every positive and each negative independently with probability `rate`.
pub fn negative_sample(labels: &Array2<f64>, rate: f64, seed: u64) -> Array2<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.mapv(|y| {
        // draw for every cell so the stream does not depend on the label pattern
        let keep = rate >= 1.0 || rng.random::<f64>() < rate;
        y > 0.5 || keep
    })
}

fn check_grid(f: &Forward<'_>, input: Var, targets: &Array2<f64>, mask: &Array2<bool>, what: &str) -> Result<()> {
    let dim = f.graph.shape(input);
    if targets.dim() != dim || mask.dim() != dim {
        return Err(Error::contract(format!(
            "{what} loss: scores {dim:?}, targets {:?}, mask {:?}",
            targets.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

fn component(
    f: &mut Forward<'_>,
    input: Var,
    from_logits: bool,
    targets: Array2<f64>,
    mask: Array2<bool>,
    config: &LossConfig,
    what: &str,
) -> Result<Var> {
    check_grid(f, input, &targets, &mask, what)?;
    Ok(f.graph.focal_loss(input, from_logits, targets, mask, config.alpha, config.gamma))
}

/// Mean focal loss over the unmasked cells of the spans × types logit grid.
pub fn entity_loss(f: &mut Forward<'_>, logits: Var, targets: Array2<f64>, mask: Array2<bool>, config: &LossConfig) -> Result<Var> {
    component(f, logits, true, targets, mask, config, "entity")
}

/// Mean focal loss over the entities × entities adjacency probabilities.
pub fn adjacency_loss(f: &mut Forward<'_>, probs: Var, targets: Array2<f64>, mask: Array2<bool>, config: &LossConfig) -> Result<Var> {
    component(f, probs, false, targets, mask, config, "adjacency")
}

/// Mean focal loss over the pairs × relations logit grid.
pub fn relation_loss(f: &mut Forward<'_>, logits: Var, targets: Array2<f64>, mask: Array2<bool>, config: &LossConfig) -> Result<Var> {
    component(f, logits, true, targets, mask, config, "relation")
}

/// `λ_E·l_ent + λ_A·l_adj + λ_R·l_rel`; zero-weight components are left out of the graph.
pub fn total_loss(f: &mut Forward<'_>, l_ent: Var, l_adj: Option<Var>, l_rel: Var, config: &LossConfig) -> Var {
    let mut terms = vec![(l_ent, config.lambda_entity), (l_rel, config.lambda_relation)];
    if let Some(a) = l_adj {
        terms.push((a, config.lambda_adjacency));
    }
    let mut total = f.graph.constant(Array2::zeros((1, 1)));
    for (v, w) in terms {
        if w != 0.0 {
            let scaled = f.graph.scale(v, w);
            total = f.graph.add(total, scaled);
        }
    }
    total
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_ent: f64, l_adj: f64, l_rel: f64, config: &LossConfig) -> f64 {
    config.lambda_entity * l_ent + config.lambda_adjacency * l_adj + config.lambda_relation * l_rel
}
