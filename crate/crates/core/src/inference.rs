//! Final scoring and evaluation: weighted coarse+fine pair scores,
//! retrieval recall@K, the binary caption-choice benchmark, and component
//! similarity matrix dumps.
//!
//! The fused scores combine the raw-record global dot product (both globals
//! L2-normalized) with the encoded fine-grained similarities:
//!
//!   i2t = base + α₁·(G + E_i2t + R_i2t) + α₂·(E_t2i + R_t2i)
//!   t2i = base + β₁·(G + E_t2i + R_t2i)
//!
//! Channels disabled in the checkpoint's loss flags are left out of both
//! scores, matching how ablated runs are evaluated.

use crate::checkpoint::Checkpoint;
use crate::config::{InferenceWeights, RunConfig};
use crate::encoder::{
    assemble_sequence, encode, encode_bypass, positional_encoding, EncoderParams, TokenSequence,
};
use crate::error::{Error, Result};
use crate::ingest::{BinaryBenchmark, ComponentRecord, Modality, PairedDataset};
use crate::matching::{pair_similarities, split_encoded, PairSimilarities};
use crate::numerics::{dot, l2_normalized, Tensor};

/// The two fused scores of one pair plus their ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    /// Raw-record global cosine (both sides L2-normalized).
    pub base_global: f64,
    pub fine: PairSimilarities,
    pub i2t: f64,
    pub t2i: f64,
}

/// Recall@K for both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
}

impl RetrievalReport {
    pub fn recall(&self, direction: &str, k: usize) -> Option<f64> {
        let idx = self.ks.iter().position(|&x| x == k)?;
        match direction {
            "i2t" => Some(self.i2t[idx]),
            "t2i" => Some(self.t2i[idx]),
            _ => None,
        }
    }
}

/// A loaded checkpoint ready to encode and score records.
pub struct Engine {
    pub config: RunConfig,
    image_encoder: EncoderParams,
    text_encoder: EncoderParams,
    pe: Option<Tensor>,
}

/// A record encoded for scoring: contextualized tokens plus the raw global
/// (L2-normalized) for the base term.
pub struct EncodedRecord {
    pub encoded: TokenSequence,
    pub raw_global: Vec<f64>,
}

impl Engine {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let config = checkpoint.config;
        config.validate()?;
        let pe = if config.positional_encoding {
            Some(positional_encoding(
                1 + config.n_entities + config.m_relations,
                config.dim,
            )?)
        } else {
            None
        };
        Ok(Engine {
            config,
            image_encoder: checkpoint.image_encoder,
            text_encoder: checkpoint.text_encoder,
            pe,
        })
    }

    pub fn weights(&self) -> InferenceWeights {
        self.config.inference_weights()
    }

    pub fn encode_record(&self, rec: &ComponentRecord) -> Result<EncodedRecord> {
        let seq = assemble_sequence(rec, self.config.n_entities, self.config.m_relations, self.config.dim)?;
        let bypass = match rec.modality {
            Modality::Image => self.config.bypass_image_encoder,
            Modality::Text => self.config.bypass_text_encoder,
        };
        let encoded = if bypass {
            encode_bypass(&seq)
        } else {
            let params = match rec.modality {
                Modality::Image => &self.image_encoder,
                Modality::Text => &self.text_encoder,
            };
            encode(params, &seq, self.pe.as_ref())?
        };
        Ok(EncodedRecord {
            encoded,
            raw_global: l2_normalized(&rec.global),
        })
    }

    /// Scores one already-encoded pair with the given weights.
    pub fn score_encoded(
        &self,
        img: &EncodedRecord,
        txt: &EncodedRecord,
        weights: &InferenceWeights,
    ) -> Result<ScoredPair> {
        let fine = pair_similarities(
            &img.encoded,
            &txt.encoded,
            self.config.n_entities,
            self.config.m_relations,
        )?;
        let base = dot(&img.raw_global, &txt.raw_global);
        let g = if self.config.use_global { fine.global } else { 0.0 };
        let (e_i2t, e_t2i) = if self.config.use_entity {
            (fine.entity_i2t, fine.entity_t2i)
        } else {
            (0.0, 0.0)
        };
        let (r_i2t, r_t2i) = if self.config.use_relation {
            (fine.relation_i2t, fine.relation_t2i)
        } else {
            (0.0, 0.0)
        };
        let i2t = base + weights.alpha1 * (g + e_i2t + r_i2t) + weights.alpha2 * (e_t2i + r_t2i);
        let t2i = base + weights.beta1 * (g + e_t2i + r_t2i);
        if !(i2t.is_finite() && t2i.is_finite()) {
            return Err(Error::non_finite("pair score"));
        }
        Ok(ScoredPair {
            base_global: base,
            fine,
            i2t,
            t2i,
        })
    }

    /// Convenience: encode and score a single raw pair.
    pub fn score_pair(
        &self,
        image: &ComponentRecord,
        text: &ComponentRecord,
        weights: &InferenceWeights,
    ) -> Result<ScoredPair> {
        let img = self.encode_record(image)?;
        let txt = self.encode_record(text)?;
        self.score_encoded(&img, &txt, weights)
    }
}

/// Rank positions (1-based) of the best-ranked true candidate per query,
/// with the given scores; ties broken by candidate index.
fn best_true_rank(scores: &[f64], truths: &[bool]) -> Option<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order.iter().position(|&c| truths[c]).map(|p| p + 1)
}

/// Zero-shot retrieval over explicit galleries. `pairs` lists ground-truth
/// (image index, text index) matches; several texts may share an image.
pub fn eval_retrieval(
    engine: &Engine,
    images: &[ComponentRecord],
    texts: &[ComponentRecord],
    pairs: &[(usize, usize)],
    weights: &InferenceWeights,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::config("retrieval needs non-empty galleries"));
    }
    let enc_imgs: Vec<EncodedRecord> = images
        .iter()
        .map(|r| engine.encode_record(r))
        .collect::<Result<_>>()?;
    let enc_txts: Vec<EncodedRecord> = texts
        .iter()
        .map(|r| engine.encode_record(r))
        .collect::<Result<_>>()?;
    eval_retrieval_encoded(engine, &enc_imgs, &enc_txts, pairs, weights, ks)
}

/// Retrieval over pre-encoded galleries; lets weight sweeps reuse one
/// encoding pass.
pub fn eval_retrieval_encoded(
    engine: &Engine,
    enc_imgs: &[EncodedRecord],
    enc_txts: &[EncodedRecord],
    pairs: &[(usize, usize)],
    weights: &InferenceWeights,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let (images, texts) = (enc_imgs, enc_txts);
    if images.is_empty() || texts.is_empty() {
        return Err(Error::config("retrieval needs non-empty galleries"));
    }
    if pairs.is_empty() {
        return Err(Error::config("retrieval needs at least one true pair"));
    }
    let mut i2t_scores = vec![0.0; images.len() * texts.len()];
    let mut t2i_scores = vec![0.0; images.len() * texts.len()];
    for (i, img) in enc_imgs.iter().enumerate() {
        for (j, txt) in enc_txts.iter().enumerate() {
            let s = engine.score_encoded(img, txt, weights)?;
            i2t_scores[i * texts.len() + j] = s.i2t;
            t2i_scores[i * texts.len() + j] = s.t2i;
        }
    }
    let mut img_truth = vec![vec![false; texts.len()]; images.len()];
    let mut txt_truth = vec![vec![false; images.len()]; texts.len()];
    for &(i, j) in pairs {
        if i >= images.len() || j >= texts.len() {
            return Err(Error::config(format!("pair ({i}, {j}) out of range")));
        }
        img_truth[i][j] = true;
        txt_truth[j][i] = true;
    }

    let mut i2t_ranks = Vec::new();
    for (i, truths) in img_truth.iter().enumerate() {
        if !truths.contains(&true) {
            continue;
        }
        let row = &i2t_scores[i * texts.len()..(i + 1) * texts.len()];
        i2t_ranks.push(best_true_rank(row, truths).expect("has a true match"));
    }
    let mut t2i_ranks = Vec::new();
    for (j, truths) in txt_truth.iter().enumerate() {
        if !truths.contains(&true) {
            continue;
        }
        let col: Vec<f64> = (0..images.len())
            .map(|i| t2i_scores[i * texts.len() + j])
            .collect();
        t2i_ranks.push(best_true_rank(&col, truths).expect("has a true match"));
    }

    let recall = |ranks: &[usize], k: usize| -> f64 {
        ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
    };
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        i2t: ks.iter().map(|&k| recall(&i2t_ranks, k)).collect(),
        t2i: ks.iter().map(|&k| recall(&t2i_ranks, k)).collect(),
    })
}

/// Deduplicates a paired dataset into retrieval galleries: unique images,
/// unique texts, and index pairs.
pub fn retrieval_sets(
    dataset: &PairedDataset,
) -> (Vec<ComponentRecord>, Vec<ComponentRecord>, Vec<(usize, usize)>) {
    let mut images: Vec<ComponentRecord> = Vec::new();
    let mut texts: Vec<ComponentRecord> = Vec::new();
    let mut img_idx: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut txt_idx: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut pairs = Vec::with_capacity(dataset.len());
    for (img, txt) in dataset.images.iter().zip(&dataset.texts) {
        let i = *img_idx.entry(img.id.clone()).or_insert_with(|| {
            images.push(img.clone());
            images.len() - 1
        });
        let j = *txt_idx.entry(txt.id.clone()).or_insert_with(|| {
            texts.push(txt.clone());
            texts.len() - 1
        });
        pairs.push((i, j));
    }
    (images, texts, pairs)
}

/// Binary caption choice: predict the caption with the higher fused I2T
/// score. Exact ties count as incorrect.
pub fn eval_binary(
    engine: &Engine,
    bench: &BinaryBenchmark,
    weights: &InferenceWeights,
) -> Result<f64> {
    if bench.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for i in 0..bench.len() {
        let img = engine.encode_record(&bench.images[i])?;
        let a = engine.encode_record(&bench.caption_a[i])?;
        let b = engine.encode_record(&bench.caption_b[i])?;
        let sa = engine.score_encoded(&img, &a, weights)?.i2t;
        let sb = engine.score_encoded(&img, &b, weights)?.i2t;
        let picked_a = sa > sb; // a tie picks neither side and scores wrong
        let picked_b = sb > sa;
        if (picked_a && bench.a_is_correct[i]) || (picked_b && !bench.a_is_correct[i]) {
            correct += 1;
        }
    }
    Ok(correct as f64 / bench.len() as f64)
}

/// Cosine matrix between the encoded components of one image/text pair:
/// rows are the image's unmasked components of `kind`, columns the text's.
pub fn component_similarity_matrix(
    engine: &Engine,
    image: &ComponentRecord,
    text: &ComponentRecord,
    kind: ComponentKind,
) -> Result<Tensor> {
    let img = engine.encode_record(image)?;
    let txt = engine.encode_record(text)?;
    let pick = |enc: &EncodedRecord| -> Result<Vec<Vec<f64>>> {
        let (_, entities, relations) = split_encoded(
            &enc.encoded,
            engine.config.n_entities,
            engine.config.m_relations,
        )?;
        let set = match kind {
            ComponentKind::Entity => entities,
            ComponentKind::Relation => relations,
        };
        let d = set.vectors.shape()[1];
        Ok(set
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| set.vectors.data()[i * d..(i + 1) * d].to_vec())
            .collect())
    };
    let rows = pick(&img)?;
    let cols = pick(&txt)?;
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::config("similarity dump needs non-empty component sets"));
    }
    let mut data = vec![0.0; rows.len() * cols.len()];
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            data[i * cols.len() + j] = dot(r, c);
        }
    }
    Tensor::new(vec![rows.len(), cols.len()], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Entity,
    Relation,
}

impl std::str::FromStr for ComponentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" | "entities" => Ok(ComponentKind::Entity),
            "relation" | "relations" => Ok(ComponentKind::Relation),
            other => Err(Error::config(format!(
                "component kind must be entity or relation, got {other}"
            ))),
        }
    }
}
