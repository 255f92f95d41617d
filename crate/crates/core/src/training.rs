//! The optimization loop: AdamW with decoupled weight decay, a step
//! learning-rate schedule, optional global-norm gradient clipping, and
//! quantized checkpoints at every epoch plus the best one.
//!
//! Batches are reshuffled deterministically every epoch (fresh in-batch
//! negatives). The logged per-epoch loss is the full-dataset loss of the
//! epoch-end parameters, so a run with lr = 0 logs a constant.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::{
    assemble_sequence, encode_bypass, encode_on_tape, init_params, positional_encoding,
    EncoderParams, RegisteredEncoder,
};
use crate::error::{Error, Result};
use crate::ingest::{make_batches, ComponentRecord, PairedDataset};
use crate::matching::{batch_similarity_nodes, BundleNodes};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::objective::{channel_losses, total_loss_node, ChannelLosses};
use std::io::Write;

/// AdamW moment estimates, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        OptimizerState {
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &EncoderParams) -> Self {
        let named = params.named_tensors();
        let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
        OptimizerState::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &RunConfig) -> Self {
        AdamHyper {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One AdamW update over aligned parameter/gradient lists:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², bias-corrected, then
/// p ← p − lr·(m̂/(√v̂ + ε) + wd·p). Non-finite gradients abort the step.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw lists", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw tensor", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::non_finite("gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gd[i];
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// Step schedule: lr0 · gamma^floor(epoch / step_size).
pub fn steplr(lr0: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    lr0 * gamma.powi((epoch / step_size) as i32)
}

/// Scales gradients in place so their global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<Tensor>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for group in grads.iter() {
        for g in group {
            for &x in g.data() {
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for group in grads.iter_mut() {
            for g in group {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}

/// Builds one batch's loss on the tape: encode both modalities (or bypass
/// with plain L2 normalization), assemble the six similarity matrices, and
/// apply the contrastive loss. `None` for an encoder means bypass.
pub fn build_batch_loss(
    tape: &mut Tape,
    img_encoder: Option<&RegisteredEncoder>,
    txt_encoder: Option<&RegisteredEncoder>,
    images: &[&ComponentRecord],
    texts: &[&ComponentRecord],
    config: &RunConfig,
    pe: Option<&Tensor>,
) -> Result<(NodeId, BundleNodes)> {
    let (n, m, d) = (config.n_entities, config.m_relations, config.dim);
    let encode_side = |tape: &mut Tape,
                           records: &[&ComponentRecord],
                           encoder: Option<&RegisteredEncoder>|
     -> Result<(Vec<NodeId>, Vec<Vec<bool>>)> {
        let mut nodes = Vec::with_capacity(records.len());
        let mut masks = Vec::with_capacity(records.len());
        for rec in records {
            let seq = assemble_sequence(rec, n, m, d)?;
            let node = match encoder {
                Some(reg) => encode_on_tape(tape, reg, &seq, pe)?,
                None => {
                    let normalized = encode_bypass(&seq);
                    tape.input(normalized.tokens)
                }
            };
            masks.push(seq.mask);
            nodes.push(node);
        }
        Ok((nodes, masks))
    };
    let (img_nodes, img_masks) = encode_side(tape, images, img_encoder)?;
    let (txt_nodes, txt_masks) = encode_side(tape, texts, txt_encoder)?;
    let bundle = batch_similarity_nodes(
        tape,
        &img_nodes,
        &txt_nodes,
        &img_masks,
        &txt_masks,
        n,
        m,
    )?;
    let loss = total_loss_node(tape, &bundle, &config.loss_flags())?;
    Ok((loss, bundle))
}

fn positional_table(config: &RunConfig) -> Result<Option<Tensor>> {
    if config.positional_encoding {
        Ok(Some(positional_encoding(
            1 + config.n_entities + config.m_relations,
            config.dim,
        )?))
    } else {
        Ok(None)
    }
}

/// Mean loss (and per-channel breakdown) of fixed parameters over the whole
/// dataset, in sequential batches with no updates. Checkpoint `final_loss`
/// and the per-epoch log both record this quantity.
pub fn dataset_loss_detailed(
    dataset: &PairedDataset,
    image_encoder: &EncoderParams,
    text_encoder: &EncoderParams,
    config: &RunConfig,
) -> Result<(f64, ChannelLosses)> {
    let pe = positional_table(config)?;
    let batches = make_batches(dataset.len(), config.batch_size, 0, false)?;
    let mut total = 0.0;
    let mut channels = ChannelLosses::default();
    let mut count = 0usize;
    for batch in &batches {
        let images: Vec<&ComponentRecord> = batch.iter().map(|&i| &dataset.images[i]).collect();
        let texts: Vec<&ComponentRecord> = batch.iter().map(|&i| &dataset.texts[i]).collect();
        let mut tape = Tape::new();
        let img_reg = (!config.bypass_image_encoder).then(|| image_encoder.register(&mut tape));
        let txt_reg = (!config.bypass_text_encoder).then(|| text_encoder.register(&mut tape));
        let (loss, bundle) = build_batch_loss(
            &mut tape,
            img_reg.as_ref(),
            txt_reg.as_ref(),
            &images,
            &texts,
            config,
            pe.as_ref(),
        )?;
        let w = batch.len() as f64;
        total += tape.value(loss).scalar_value()? * w;
        let ch = channel_losses(&bundle.values(&tape), &config.loss_flags())?;
        channels = weighted_add(&channels, &ch, w);
        count += batch.len();
    }
    if count == 0 {
        return Err(Error::config("dataset is empty"));
    }
    Ok((
        total / count as f64,
        scale_channels(&channels, 1.0 / count as f64),
    ))
}

pub fn dataset_loss(
    dataset: &PairedDataset,
    image_encoder: &EncoderParams,
    text_encoder: &EncoderParams,
    config: &RunConfig,
) -> Result<f64> {
    dataset_loss_detailed(dataset, image_encoder, text_encoder, config).map(|(total, _)| total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Full-dataset loss of the epoch-end parameters.
    pub total: f64,
    pub channels: ChannelLosses,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint after the last epoch.
    pub last: Checkpoint,
    /// Checkpoint with the lowest full-dataset loss.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochStats>,
}

pub fn train(dataset: &PairedDataset, config: &RunConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_, _| Ok(()))
}

/// Runs the optimization loop, invoking `on_epoch` with each epoch's stats
/// and the (quantized) checkpoint emitted at its end.
pub fn train_with(
    dataset: &PairedDataset,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if dataset.dim != config.dim
        || dataset.n_entities != config.n_entities
        || dataset.m_relations != config.m_relations
    {
        return Err(Error::config(format!(
            "dataset dims (D={}, N={}, M={}) do not match config (D={}, N={}, M={})",
            dataset.dim,
            dataset.n_entities,
            dataset.m_relations,
            config.dim,
            config.n_entities,
            config.m_relations
        )));
    }

    let shape = config.encoder_shape();
    let mut image_encoder = init_params(&shape, config.seed.wrapping_add(1))?;
    let mut text_encoder = init_params(&shape, config.seed.wrapping_add(2))?;
    let mut img_state = OptimizerState::for_params(&image_encoder);
    let mut txt_state = OptimizerState::for_params(&text_encoder);
    let hp = AdamHyper::from_config(config);
    let pe = positional_table(config)?;

    let update_image = config.train_image_encoder && !config.bypass_image_encoder;
    let update_text = config.train_text_encoder && !config.bypass_text_encoder;

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut last: Option<Checkpoint> = None;

    for epoch in 0..config.epochs {
        let lr = steplr(config.lr0, epoch, config.step_size, config.gamma);
        // Fresh negatives each epoch, deterministically.
        let batches = make_batches(
            dataset.len(),
            config.batch_size,
            config.seed.wrapping_add(epoch as u64),
            true,
        )?;

        for (batch_idx, batch) in batches.iter().enumerate() {
            let images: Vec<&ComponentRecord> =
                batch.iter().map(|&i| &dataset.images[i]).collect();
            let texts: Vec<&ComponentRecord> = batch.iter().map(|&i| &dataset.texts[i]).collect();
            let mut tape = Tape::new();
            let img_reg =
                (!config.bypass_image_encoder).then(|| image_encoder.register(&mut tape));
            let txt_reg = (!config.bypass_text_encoder).then(|| text_encoder.register(&mut tape));
            let (loss, _bundle) = build_batch_loss(
                &mut tape,
                img_reg.as_ref(),
                txt_reg.as_ref(),
                &images,
                &texts,
                config,
                pe.as_ref(),
            )?;
            let loss_value = tape.value(loss).scalar_value()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: "training loss",
                    batch: Some(batch_idx),
                });
            }

            if !(update_image || update_text) || lr == 0.0 {
                // The update would be a no-op; skip the backward pass.
                continue;
            }
            let grads = tape.backward(loss)?;
            let collect = |reg: &RegisteredEncoder, params: &EncoderParams| -> Vec<Tensor> {
                reg.ids
                    .iter()
                    .zip(params.named_tensors())
                    .map(|(&id, (_, t))| grads.get(id, t.shape()))
                    .collect()
            };
            let mut groups: Vec<Vec<Tensor>> = Vec::new();
            if update_image {
                groups.push(collect(img_reg.as_ref().expect("registered"), &image_encoder));
            }
            if update_text {
                groups.push(collect(txt_reg.as_ref().expect("registered"), &text_encoder));
            }
            if config.grad_clip > 0.0 {
                clip_gradients(&mut groups, config.grad_clip);
            }
            let mut groups = groups.into_iter();
            if update_image {
                let g = groups.next().expect("image grads");
                adamw_step(
                    &mut image_encoder.tensors_mut(),
                    &g,
                    &mut img_state,
                    lr,
                    &hp,
                )?;
            }
            if update_text {
                let g = groups.next().expect("text grads");
                adamw_step(&mut text_encoder.tensors_mut(), &g, &mut txt_state, lr, &hp)?;
            }
        }

        let mut ckpt = Checkpoint::quantized(
            config.clone(),
            image_encoder.clone(),
            text_encoder.clone(),
            epoch,
        );
        let (epoch_loss, epoch_channels) =
            dataset_loss_detailed(dataset, &ckpt.image_encoder, &ckpt.text_encoder, config)?;
        ckpt.final_loss = epoch_loss;
        let stats = EpochStats {
            epoch,
            lr,
            total: epoch_loss,
            channels: epoch_channels,
        };
        on_epoch(&stats, &ckpt)?;
        log.push(stats);
        let improved = best
            .as_ref()
            .map_or(true, |(best_loss, _, _)| ckpt.final_loss < *best_loss);
        if improved {
            best = Some((ckpt.final_loss, epoch, ckpt.clone()));
        }
        last = Some(ckpt);
    }

    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: last.expect("at least one epoch"),
        best,
        best_epoch,
        log,
    })
}

fn weighted_add(acc: &ChannelLosses, ch: &ChannelLosses, w: f64) -> ChannelLosses {
    ChannelLosses {
        i2t_entity: acc.i2t_entity + ch.i2t_entity * w,
        i2t_relation: acc.i2t_relation + ch.i2t_relation * w,
        i2t_global: acc.i2t_global + ch.i2t_global * w,
        t2i_entity: acc.t2i_entity + ch.t2i_entity * w,
        t2i_relation: acc.t2i_relation + ch.t2i_relation * w,
        t2i_global: acc.t2i_global + ch.t2i_global * w,
    }
}

fn scale_channels(ch: &ChannelLosses, s: f64) -> ChannelLosses {
    ChannelLosses {
        i2t_entity: ch.i2t_entity * s,
        i2t_relation: ch.i2t_relation * s,
        i2t_global: ch.i2t_global * s,
        t2i_entity: ch.t2i_entity * s,
        t2i_relation: ch.t2i_relation * s,
        t2i_global: ch.t2i_global * s,
    }
}

/// Checks the full pipeline gradient — encode both modalities, build the
/// similarity matrices, apply the contrastive loss — against central
/// differences, over every parameter of both heads. Returns the max
/// relative error.
pub fn pipeline_gradient_check(config: &RunConfig, batch: usize, eps: f64) -> Result<f64> {
    use crate::numerics::finite_diff_check;
    use crate::synth::{synth_pairs, SynthOptions};
    config.validate()?;
    let dataset = synth_pairs(&SynthOptions {
        count: batch,
        dim: config.dim,
        n_entities: config.n_entities,
        m_relations: config.m_relations,
        noise_sigma: 0.25,
        global_noise_sigma: 0.0,
        seed: config.seed,
        topic_spread: crate::synth::DEFAULT_TOPIC_SPREAD,
    })?;
    let shape = config.encoder_shape();
    let image_encoder = init_params(&shape, config.seed.wrapping_add(1))?;
    let text_encoder = init_params(&shape, config.seed.wrapping_add(2))?;
    let img_named = image_encoder.named_tensors();
    let split = img_named.len();
    let mut tensors: Vec<Tensor> = img_named.into_iter().map(|(_, t)| t.clone()).collect();
    tensors.extend(
        text_encoder
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone()),
    );
    let images: Vec<&ComponentRecord> = dataset.images.iter().collect();
    let texts: Vec<&ComponentRecord> = dataset.texts.iter().collect();
    let pe = positional_table(config)?;
    finite_diff_check(
        |tape, ids| {
            let img_reg = RegisteredEncoder::from_parts(shape.clone(), ids[..split].to_vec());
            let txt_reg = RegisteredEncoder::from_parts(shape.clone(), ids[split..].to_vec());
            let (loss, _) = build_batch_loss(
                tape,
                Some(&img_reg),
                Some(&txt_reg),
                &images,
                &texts,
                config,
                pe.as_ref(),
            )?;
            Ok(loss)
        },
        &tensors,
        eps,
    )
}

/// Loss log CSV:
/// `epoch,lr,L_total,L_I2T_E,L_I2T_R,L_I2T_G,L_T2I_E,L_T2I_R,L_T2I_G`.
pub fn write_loss_log<W: Write>(w: &mut W, log: &[EpochStats]) -> Result<()> {
    writeln!(
        w,
        "epoch,lr,L_total,L_I2T_E,L_I2T_R,L_I2T_G,L_T2I_E,L_T2I_R,L_T2I_G"
    )?;
    for s in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.epoch,
            s.lr,
            s.total,
            s.channels.i2t_entity,
            s.channels.i2t_relation,
            s.channels.i2t_global,
            s.channels.t2i_entity,
            s.channels.t2i_relation,
            s.channels.t2i_global
        )?;
    }
    Ok(())
}
