//! The alignment heads: one small pre-norm transformer per modality.
//!
//! A record's components are laid out as the token sequence
//! `[global, e_1 .. e_N, r_1 .. r_M]` with a validity mask. Tokens are
//! scaled by sqrt(d), sinusoidal positions are added, two pre-norm blocks
//! (masked self-attention + feed-forward) run, and the output is
//! layer-normalized and L2-normalized per token so downstream dot products
//! are cosines. Masked slots are excluded from attention keys and come out
//! as zero vectors, so padding never leaks into real tokens.

use crate::error::{Error, Result};
use crate::ingest::ComponentRecord;
use crate::numerics::{l2_normalized, NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token matrix (rows = slots) plus slot validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Architecture knobs shared by both modality heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderShape {
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub layers: usize,
    /// Init scale multiplier on the residual-branch output projections
    /// (attention output and second feed-forward matrix). Values below 1
    /// start the head near the identity map, which is what makes short
    /// training runs on frozen embeddings converge.
    pub residual_scale: f64,
    /// Identity tilt on the value/output projections. Positive values start
    /// attention as a mean-pooling pathway (value ≈ I, output ≈ pool_init·I)
    /// so contextualization is active from step one; 0 leaves the plain
    /// scaled-uniform init.
    pub pool_init: f64,
}

impl EncoderShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_ratio == 0 || self.layers == 0 {
            return Err(Error::config("ffn_ratio and layers must be positive"));
        }
        if !(self.residual_scale.is_finite() && self.residual_scale >= 0.0) {
            return Err(Error::config("residual_scale must be finite and >= 0"));
        }
        if !(self.pool_init.is_finite() && self.pool_init >= 0.0) {
            return Err(Error::config("pool_init must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Attention projections. The key path carries no bias: softmax is
/// invariant to a constant shift per query row, so a key bias is a
/// non-identifiable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForwardParams,
}

/// All weights of one alignment head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub layers: Vec<LayerParams>,
    pub final_norm: LayerNormParams,
}

const LN_EPS: f64 = 1e-5;

impl EncoderParams {
    /// Canonical (name, tensor) listing; the ordering defines optimizer and
    /// checkpoint layout.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("norm1.gain"), &layer.norm1.gain));
            out.push((p("norm1.bias"), &layer.norm1.bias));
            out.push((p("attn.w_q"), &layer.attn.w_q));
            out.push((p("attn.b_q"), &layer.attn.b_q));
            out.push((p("attn.w_k"), &layer.attn.w_k));
            out.push((p("attn.w_v"), &layer.attn.w_v));
            out.push((p("attn.b_v"), &layer.attn.b_v));
            out.push((p("attn.w_o"), &layer.attn.w_o));
            out.push((p("attn.b_o"), &layer.attn.b_o));
            out.push((p("norm2.gain"), &layer.norm2.gain));
            out.push((p("norm2.bias"), &layer.norm2.bias));
            out.push((p("ffn.w1"), &layer.ffn.w1));
            out.push((p("ffn.b1"), &layer.ffn.b1));
            out.push((p("ffn.w2"), &layer.ffn.w2));
            out.push((p("ffn.b2"), &layer.ffn.b2));
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out
    }

    /// Mutable tensor listing in the same order as [`named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.norm1.gain);
            out.push(&mut layer.norm1.bias);
            out.push(&mut layer.attn.w_q);
            out.push(&mut layer.attn.b_q);
            out.push(&mut layer.attn.w_k);
            out.push(&mut layer.attn.w_v);
            out.push(&mut layer.attn.b_v);
            out.push(&mut layer.attn.w_o);
            out.push(&mut layer.attn.b_o);
            out.push(&mut layer.norm2.gain);
            out.push(&mut layer.norm2.bias);
            out.push(&mut layer.ffn.w1);
            out.push(&mut layer.ffn.b1);
            out.push(&mut layer.ffn.w2);
            out.push(&mut layer.ffn.b2);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out
    }

    /// Registers every tensor on the tape as a parameter, in canonical order.
    pub fn register(&self, tape: &mut Tape) -> RegisteredEncoder {
        let ids = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        RegisteredEncoder {
            shape: self.shape.clone(),
            ids,
        }
    }
}

/// Tape-side handle to a registered encoder's parameter nodes, laid out in
/// canonical order.
pub struct RegisteredEncoder {
    shape: EncoderShape,
    pub ids: Vec<NodeId>,
}

impl RegisteredEncoder {
    /// Rebuilds a handle from externally registered nodes (canonical order).
    pub fn from_parts(shape: EncoderShape, ids: Vec<NodeId>) -> Self {
        RegisteredEncoder { shape, ids }
    }

    fn layer(&self, i: usize) -> &[NodeId] {
        &self.ids[i * 15..(i + 1) * 15]
    }

    fn final_norm(&self) -> (NodeId, NodeId) {
        let n = self.ids.len();
        (self.ids[n - 2], self.ids[n - 1])
    }
}

/// Deterministic Xavier-uniform initialization: weights in
/// ±sqrt(6/(fan_in+fan_out)), biases zero, norm gains one. The residual
/// branch outputs (attention `w_o`, feed-forward `w2`) are additionally
/// multiplied by `shape.residual_scale`.
pub fn init_params(shape: &EncoderShape, seed: u64) -> Result<EncoderParams> {
    shape.validate()?;
    let d = shape.dim;
    let f = shape.ffn_ratio * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xavier = |rows: usize, cols: usize, scale: f64| -> Tensor {
        let a = (6.0 / (rows + cols) as f64).sqrt() * scale;
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        Tensor::new(vec![rows, cols], data).expect("sized payload")
    };
    let norm = |dim: usize| LayerNormParams {
        gain: Tensor::new(vec![dim], vec![1.0; dim]).expect("sized payload"),
        bias: Tensor::zeros(vec![dim]),
    };
    let tilt = |t: Tensor, delta: f64| -> Tensor {
        if delta == 0.0 {
            return t;
        }
        let (rows, cols) = t.dims2().expect("square weight");
        let mut data = t.data().to_vec();
        for i in 0..rows.min(cols) {
            data[i * cols + i] += delta;
        }
        Tensor::new(vec![rows, cols], data).expect("sized payload")
    };
    let mut layers = Vec::with_capacity(shape.layers);
    for _ in 0..shape.layers {
        layers.push(LayerParams {
            norm1: norm(d),
            attn: AttentionParams {
                w_q: xavier(d, d, 1.0),
                b_q: Tensor::zeros(vec![d]),
                w_k: xavier(d, d, 1.0),
                w_v: tilt(xavier(d, d, 1.0), if shape.pool_init > 0.0 { 1.0 } else { 0.0 }),
                b_v: Tensor::zeros(vec![d]),
                w_o: tilt(xavier(d, d, shape.residual_scale), shape.pool_init),
                b_o: Tensor::zeros(vec![d]),
            },
            norm2: norm(d),
            ffn: FeedForwardParams {
                w1: xavier(d, f, 1.0),
                b1: Tensor::zeros(vec![f]),
                w2: xavier(f, d, shape.residual_scale),
                b2: Tensor::zeros(vec![d]),
            },
        });
    }
    Ok(EncoderParams {
        shape: shape.clone(),
        layers,
        final_norm: norm(d),
    })
}

/// Sinusoidal positional encoding: `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`
/// and `PE[pos, 2i+1] = cos` of the same angle. `dim` must be even.
pub fn positional_encoding(length: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "positional encoding needs an even dim, got {dim}"
        )));
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, dim], data)
}

/// Lays a record out as `[global, e_1..e_n, r_1..r_m]` with propagated
/// masks. Stored components keep their payloads and mask bits; the
/// remaining slots are zero-padded with false masks.
pub fn assemble_sequence(
    record: &ComponentRecord,
    n_entities: usize,
    m_relations: usize,
    dim: usize,
) -> Result<TokenSequence> {
    if record.global.len() != dim {
        return Err(Error::shape("global dim", &[dim], &[record.global.len()]));
    }
    if record.entities.len() > n_entities {
        return Err(Error::format(format!(
            "record {}: {} entities exceed the {} slots",
            record.id,
            record.entities.len(),
            n_entities
        )));
    }
    if record.relations.len() > m_relations {
        return Err(Error::format(format!(
            "record {}: {} relations exceed the {} slots",
            record.id,
            record.relations.len(),
            m_relations
        )));
    }
    let s = 1 + n_entities + m_relations;
    let mut tokens = vec![0.0; s * dim];
    let mut mask = vec![false; s];
    tokens[..dim].copy_from_slice(&record.global);
    mask[0] = true;
    for (i, (vec, &live)) in record
        .entities
        .iter()
        .zip(record.entity_mask.iter())
        .enumerate()
    {
        if vec.len() != dim {
            return Err(Error::shape("entity dim", &[dim], &[vec.len()]));
        }
        tokens[(1 + i) * dim..(2 + i) * dim].copy_from_slice(vec);
        mask[1 + i] = live;
    }
    for (i, (vec, &live)) in record
        .relations
        .iter()
        .zip(record.relation_mask.iter())
        .enumerate()
    {
        if vec.len() != dim {
            return Err(Error::shape("relation dim", &[dim], &[vec.len()]));
        }
        let row = 1 + n_entities + i;
        tokens[row * dim..(row + 1) * dim].copy_from_slice(vec);
        mask[row] = live;
    }
    Ok(TokenSequence {
        tokens: Tensor::new(vec![s, dim], tokens)?,
        mask,
    })
}

/// Runs the head on the tape and returns the contextualized token node.
/// `pe` is the (fixed) positional table, or `None` to disable positions.
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &RegisteredEncoder,
    seq: &TokenSequence,
    pe: Option<&Tensor>,
) -> Result<NodeId> {
    let d = params.shape.dim;
    let s = seq.len();
    if seq.dim() != d {
        return Err(Error::shape("encode dim", &[d], &[seq.dim()]));
    }
    if !seq.mask.iter().any(|&m| m) {
        return Err(Error::config("encode: no unmasked slot"));
    }
    let heads = params.shape.heads;
    let dh = d / heads;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let raw = tape.input(seq.tokens.clone());
    let mut x = tape.scale(raw, (d as f64).sqrt())?;
    if let Some(table) = pe {
        if table.shape() != [s, d] {
            return Err(Error::shape("positional table", &[s, d], table.shape()));
        }
        let pe_node = tape.input(table.clone());
        x = tape.add(x, pe_node)?;
    }

    for li in 0..params.shape.layers {
        let ids = params.layer(li);
        let (n1g, n1b) = (ids[0], ids[1]);
        let (wq, bq, wk, wv, bv, wo, bo) =
            (ids[2], ids[3], ids[4], ids[5], ids[6], ids[7], ids[8]);
        let (n2g, n2b) = (ids[9], ids[10]);
        let (w1, b1, w2, b2) = (ids[11], ids[12], ids[13], ids[14]);

        // Pre-norm attention block.
        let h = tape.layer_norm(x, n1g, n1b, LN_EPS)?;
        let q = tape.matmul(h, wq)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let v = tape.add_bias(v, bv)?;
        let mut head_outs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let qh = tape.slice_cols(q, hi * dh, dh)?;
            let kh = tape.slice_cols(k, hi * dh, dh)?;
            let vh = tape.slice_cols(v, hi * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt_dh)?;
            let weights = tape.softmax_rows(scores, Some(&seq.mask))?;
            head_outs.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let projected = tape.matmul(merged, wo)?;
        let projected = tape.add_bias(projected, bo)?;
        x = tape.add(x, projected)?;

        // Pre-norm feed-forward block.
        let h2 = tape.layer_norm(x, n2g, n2b, LN_EPS)?;
        let f = tape.matmul(h2, w1)?;
        let f = tape.add_bias(f, b1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_bias(f, b2)?;
        x = tape.add(x, f)?;
    }

    let (fg, fb) = params.final_norm();
    let out = tape.layer_norm(x, fg, fb, LN_EPS)?;
    let out = tape.l2norm_rows(out, &seq.mask)?;
    if !tape.value(out).all_finite() {
        return Err(Error::non_finite("encode"));
    }
    Ok(out)
}

/// Identity bypass: the head is replaced by per-token L2 normalization.
/// Masked slots come out as zero vectors.
pub fn encode_bypass(seq: &TokenSequence) -> TokenSequence {
    let (s, d) = (seq.len(), seq.dim());
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        if seq.mask[i] {
            let row = l2_normalized(&seq.tokens.data()[i * d..(i + 1) * d]);
            out[i * d..(i + 1) * d].copy_from_slice(&row);
        }
    }
    TokenSequence {
        tokens: Tensor::new(vec![s, d], out).expect("sized payload"),
        mask: seq.mask.clone(),
    }
}

/// Forward-only encode for evaluation paths.
pub fn encode(
    params: &EncoderParams,
    seq: &TokenSequence,
    pe: Option<&Tensor>,
) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let registered = params.register(&mut tape);
    let out = encode_on_tape(&mut tape, &registered, seq, pe)?;
    Ok(TokenSequence {
        tokens: tape.value(out).clone(),
        mask: seq.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ComponentRecord, Modality};
    use crate::numerics::{finite_diff_check, l2_norm};

    fn shape(dim: usize, layers: usize) -> EncoderShape {
        EncoderShape {
            dim,
            heads: 4,
            ffn_ratio: 4,
            layers,
            residual_scale: 1.0,
            pool_init: 0.0,
        }
    }

    fn record(dim: usize, n_ent: usize, n_rel: usize, seed: u64) -> ComponentRecord {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            l2_normalized(&v)
        };
        ComponentRecord {
            id: format!("r{seed}"),
            modality: Modality::Image,
            global: unit(&mut rng),
            entities: (0..n_ent).map(|_| unit(&mut rng)).collect(),
            entity_mask: vec![true; n_ent],
            relations: (0..n_rel).map(|_| unit(&mut rng)).collect(),
            relation_mask: vec![true; n_rel],
            boxes: None,
        }
    }

    #[test]
    fn sequence_layout_and_masks() {
        let rec = record(8, 2, 1, 3);
        let seq = assemble_sequence(&rec, 2, 1, 8).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(&seq.tokens.data()[..8], rec.global.as_slice());
        assert_eq!(&seq.tokens.data()[8..16], rec.entities[0].as_slice());
        assert_eq!(&seq.tokens.data()[24..32], rec.relations[0].as_slice());
        assert_eq!(seq.mask, vec![true; 4]);

        // One real entity in two slots; zero real relations.
        let mut rec = record(8, 1, 0, 4);
        rec.relations.clear();
        rec.relation_mask.clear();
        let seq = assemble_sequence(&rec, 2, 2, 8).unwrap();
        assert_eq!(seq.mask, vec![true, true, false, false, false]);
        assert!(seq.tokens.data()[16..24].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_rejects_overfull_records() {
        let rec = record(8, 3, 1, 5);
        assert!(assemble_sequence(&rec, 2, 1, 8).is_err());
        assert!(assemble_sequence(&rec, 3, 0, 8).is_err());
        assert!(assemble_sequence(&rec, 3, 1, 16).is_err());
    }

    #[test]
    fn positional_encoding_closed_form() {
        let pe = positional_encoding(3, 6).unwrap();
        // Position 0 alternates sin 0 = 0, cos 0 = 1.
        for i in 0..3 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
        assert!((pe.data()[6] - 1f64.sin()).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(3, 5).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let s = shape(16, 2);
        let a = init_params(&s, 9).unwrap();
        let b = init_params(&s, 9).unwrap();
        let c = init_params(&s, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_tensors() {
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with("bias") || name.starts_with('b') {
                // biases and norm biases start at zero
                if name.contains(".b_") || name.ends_with(".bias") || name.contains(".b1") || name.contains(".b2") {
                    assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
                }
            }
        }
        // Xavier bound on a weight matrix.
        let bound = (6.0 / 32.0f64).sqrt();
        assert!(a.layers[0]
            .attn
            .w_q
            .data()
            .iter()
            .all(|&v| v.abs() < bound));
    }

    #[test]
    fn encode_outputs_unit_rows_and_zero_padding() {
        let s = shape(64, 2);
        let params = init_params(&s, 1).unwrap();
        for seed in 0..3 {
            let mut rec = record(64, 2, 1, 100 + seed);
            rec.entities.push(vec![0.0; 64]);
            rec.entity_mask.push(false);
            let seq = assemble_sequence(&rec, 3, 2, 64).unwrap();
            let pe = positional_encoding(seq.len(), 64).unwrap();
            let out = encode(&params, &seq, Some(&pe)).unwrap();
            assert_eq!(out.tokens.shape(), &[6, 64]);
            for (i, &live) in out.mask.iter().enumerate() {
                let row = &out.tokens.data()[i * 64..(i + 1) * 64];
                if live {
                    assert!((l2_norm(row) - 1.0).abs() < 1e-9);
                } else {
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn masked_payload_cannot_influence_real_tokens() {
        let s = shape(32, 2);
        let params = init_params(&s, 2).unwrap();
        let mut rec = record(32, 2, 1, 50);
        rec.entities.push(vec![0.0; 32]);
        rec.entity_mask.push(false);
        let seq = assemble_sequence(&rec, 3, 1, 32).unwrap();
        let pe = positional_encoding(seq.len(), 32).unwrap();
        let base = encode(&params, &seq, Some(&pe)).unwrap();

        rec.entities[2] = vec![1e6; 32];
        let seq2 = assemble_sequence(&rec, 3, 1, 32).unwrap();
        let out = encode(&params, &seq2, Some(&pe)).unwrap();
        for (i, &live) in base.mask.iter().enumerate() {
            if live {
                assert_eq!(
                    &base.tokens.data()[i * 32..(i + 1) * 32],
                    &out.tokens.data()[i * 32..(i + 1) * 32]
                );
            }
        }
    }

    #[test]
    fn entity_permutation_equivariant_without_positions() {
        let s = shape(32, 2);
        let params = init_params(&s, 3).unwrap();
        let rec = record(32, 3, 1, 60);
        let seq = assemble_sequence(&rec, 3, 1, 32).unwrap();
        let out = encode(&params, &seq, None).unwrap();

        let mut swapped = rec.clone();
        swapped.entities.swap(0, 2);
        let seq2 = assemble_sequence(&swapped, 3, 1, 32).unwrap();
        let out2 = encode(&params, &seq2, None).unwrap();

        // Attention sums run in permuted key order, so agreement is to
        // rounding, not bit-exact.
        let close = |a: Vec<f64>, b: Vec<f64>| {
            a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12)
        };
        let row = |t: &TokenSequence, i: usize| t.tokens.data()[i * 32..(i + 1) * 32].to_vec();
        assert!(close(row(&out, 1), row(&out2, 3)));
        assert!(close(row(&out, 3), row(&out2, 1)));
        assert!(close(row(&out, 2), row(&out2, 2)));
        assert!(close(row(&out, 0), row(&out2, 0)));
        assert!(close(row(&out, 4), row(&out2, 4)));
    }

    #[test]
    fn bypass_returns_normalized_inputs_exactly() {
        let rec = record(16, 2, 1, 70);
        let mut seq = assemble_sequence(&rec, 3, 1, 16).unwrap();
        // Give a padded slot a junk payload; bypass must zero it.
        let data = seq.tokens.data().to_vec();
        let mut data = data;
        data[3 * 16] = 9.0;
        seq.tokens = Tensor::new(vec![5, 16], data).unwrap();
        let out = encode_bypass(&seq);
        for (i, &live) in seq.mask.iter().enumerate() {
            let row = &out.tokens.data()[i * 16..(i + 1) * 16];
            if live {
                assert!((l2_norm(row) - 1.0).abs() < 1e-12);
                let orig = l2_normalized(&seq.tokens.data()[i * 16..(i + 1) * 16]);
                assert_eq!(row, orig.as_slice());
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn encode_gradients_pass_finite_differences() {
        let s = EncoderShape {
            dim: 8,
            heads: 2,
            ffn_ratio: 2,
            layers: 2,
            residual_scale: 1.0,
            pool_init: 0.0,
        };
        let params = init_params(&s, 4).unwrap();
        let rec = record(8, 2, 1, 80);
        let seq = assemble_sequence(&rec, 2, 1, 8).unwrap();
        let pe = positional_encoding(seq.len(), 8).unwrap();
        let tensors: Vec<Tensor> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let shape_clone = s.clone();
        let err = finite_diff_check(
            |tape, ids| {
                let reg = RegisteredEncoder {
                    shape: shape_clone.clone(),
                    ids: ids.to_vec(),
                };
                let out = encode_on_tape(tape, &reg, &seq, Some(&pe))?;
                // Weighted sum output so every coordinate matters.
                let w = tape.input(Tensor::new(
                    vec![8, 1],
                    (0..8).map(|i| 0.3 + 0.1 * i as f64).collect(),
                )?);
                let proj = tape.matmul(out, w)?;
                tape.sum(proj)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
