//! Contrastive losses over the batch similarity matrices.
//!
//! Per channel and direction, row i pays −log softmax(s_i/τ)[i]; the three
//! channel terms add unweighted per direction, and the batch loss is the
//! mean of the I2T and T2I sums over 2B rows. Channels can be switched off
//! for ablations, in which case they contribute nothing and receive no
//! gradient.

use crate::error::{Error, Result};
use crate::matching::{BundleNodes, SimilarityBundle};
use crate::numerics::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Which similarity channels participate in the loss, and the softmax
/// temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFlags {
    pub use_global: bool,
    pub use_entity: bool,
    pub use_relation: bool,
    pub tau: f64,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            use_global: true,
            use_entity: true,
            use_relation: true,
            tau: 1.0,
        }
    }
}

impl LossFlags {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_global || self.use_entity || self.use_relation) {
            return Err(Error::config("at least one loss channel must be enabled"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// −log(exp(s_i/τ) / Σ_j exp(s_j/τ)), stabilized by log-sum-exp. Zero for a
/// single-entry row.
pub fn info_nce_row(row: &[f64], diag: usize, tau: f64) -> f64 {
    debug_assert!(diag < row.len());
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let z: f64 = row.iter().map(|&s| (s / tau - m).exp()).sum();
    m + z.ln() - row[diag] / tau
}

/// Per-row directional losses (L_i2t, L_t2i): for each row the sum over
/// enabled channels of the row's contrastive term. Rows of the T2I matrices
/// index texts.
pub fn direction_losses(bundle: &SimilarityBundle, flags: &LossFlags) -> Result<(Vec<f64>, Vec<f64>)> {
    flags.validate()?;
    let b = bundle.batch();
    let mut i2t = vec![0.0; b];
    let mut t2i = vec![0.0; b];
    let add = |acc: &mut [f64], m: &Tensor| {
        for i in 0..b {
            acc[i] += info_nce_row(m.row(i), i, flags.tau);
        }
    };
    if flags.use_entity {
        add(&mut i2t, &bundle.entity_i2t);
        add(&mut t2i, &bundle.entity_t2i);
    }
    if flags.use_relation {
        add(&mut i2t, &bundle.relation_i2t);
        add(&mut t2i, &bundle.relation_t2i);
    }
    if flags.use_global {
        add(&mut i2t, &bundle.global_i2t);
        add(&mut t2i, &bundle.global_t2i);
    }
    Ok((i2t, t2i))
}

/// Batch loss: (1/2B) Σ_i (L_i2t[i] + L_t2i[i]).
pub fn total_loss(bundle: &SimilarityBundle, flags: &LossFlags) -> Result<f64> {
    let (i2t, t2i) = direction_losses(bundle, flags)?;
    let b = bundle.batch();
    let mut acc = 0.0;
    for i in 0..b {
        acc += i2t[i] + t2i[i];
    }
    Ok(acc / (2.0 * b as f64))
}

/// Per-channel loss contributions, each already scaled by 1/2B so the six
/// values sum to the total loss. Disabled channels report 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelLosses {
    pub i2t_entity: f64,
    pub i2t_relation: f64,
    pub i2t_global: f64,
    pub t2i_entity: f64,
    pub t2i_relation: f64,
    pub t2i_global: f64,
}

impl ChannelLosses {
    pub fn total(&self) -> f64 {
        self.i2t_entity
            + self.i2t_relation
            + self.i2t_global
            + self.t2i_entity
            + self.t2i_relation
            + self.t2i_global
    }
}

pub fn channel_losses(bundle: &SimilarityBundle, flags: &LossFlags) -> Result<ChannelLosses> {
    flags.validate()?;
    let b = bundle.batch();
    let mean = |m: &Tensor| -> f64 {
        (0..b).map(|i| info_nce_row(m.row(i), i, flags.tau)).sum::<f64>() / (2.0 * b as f64)
    };
    let mut out = ChannelLosses::default();
    if flags.use_entity {
        out.i2t_entity = mean(&bundle.entity_i2t);
        out.t2i_entity = mean(&bundle.entity_t2i);
    }
    if flags.use_relation {
        out.i2t_relation = mean(&bundle.relation_i2t);
        out.t2i_relation = mean(&bundle.relation_t2i);
    }
    if flags.use_global {
        out.i2t_global = mean(&bundle.global_i2t);
        out.t2i_global = mean(&bundle.global_t2i);
    }
    Ok(out)
}

/// Differentiable batch loss over bundle nodes. Disabled channels are never
/// touched, so their matrices receive exactly zero gradient.
pub fn total_loss_node(tape: &mut Tape, bundle: &BundleNodes, flags: &LossFlags) -> Result<NodeId> {
    flags.validate()?;
    let b = tape.value(bundle.global_i2t).shape()[0];
    let mut terms: Vec<NodeId> = Vec::new();
    let push = |tape: &mut Tape, terms: &mut Vec<NodeId>, m: NodeId| -> Result<()> {
        let rows = tape.info_nce_rows(m, flags.tau)?;
        terms.push(tape.sum(rows)?);
        Ok(())
    };
    if flags.use_entity {
        push(tape, &mut terms, bundle.entity_i2t)?;
        push(tape, &mut terms, bundle.entity_t2i)?;
    }
    if flags.use_relation {
        push(tape, &mut terms, bundle.relation_i2t)?;
        push(tape, &mut terms, bundle.relation_t2i)?;
    }
    if flags.use_global {
        push(tape, &mut terms, bundle.global_i2t)?;
        push(tape, &mut terms, bundle.global_t2i)?;
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / (2.0 * b as f64))
}
