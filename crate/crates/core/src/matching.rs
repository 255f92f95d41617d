//! Component matching: mean-over-max set similarity between entity sets and
//! relation sets, plus the six per-batch similarity matrices.
//!
//! The set similarity is asymmetric: `mean_max_sim(Q, G)` averages, over the
//! unmasked rows of Q, the best dot product against the unmasked rows of G.
//! Padded slots are excluded from both the max and the mean; a side with no
//! real components contributes 0. With unit-norm inputs every value lies in
//! [−1, 1].
//!
//! The batched path and the pairwise path share one dot-product helper and
//! iteration order, so they agree bit-for-bit.

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{dot, transpose_values, NodeId, Tape, Tensor};
use std::io::Write;

/// A set of component vectors with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub vectors: Tensor,
    pub mask: Vec<bool>,
}

impl ComponentSet {
    pub fn new(vectors: Tensor, mask: Vec<bool>) -> Result<Self> {
        let (rows, _) = vectors.dims2()?;
        if mask.len() != rows {
            return Err(Error::shape("component mask", &[rows], &[mask.len()]));
        }
        Ok(ComponentSet { vectors, mask })
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Mean over unmasked query rows of the max over unmasked gallery rows of
/// the row dot product. Either side empty (no unmasked rows) gives 0.
/// Argmax ties resolve to the lowest gallery index (relevant only to
/// gradients, which route through the chosen row).
pub fn mean_max_sim(query: &ComponentSet, gallery: &ComponentSet) -> f64 {
    let d = query.vectors.shape()[1];
    debug_assert_eq!(d, gallery.vectors.shape()[1]);
    let mut acc = 0.0;
    let mut count = 0usize;
    for (k, &live) in query.mask.iter().enumerate() {
        if !live {
            continue;
        }
        count += 1;
        let q = &query.vectors.data()[k * d..(k + 1) * d];
        let mut best = f64::NEG_INFINITY;
        let mut found = false;
        for (l, &glive) in gallery.mask.iter().enumerate() {
            if !glive {
                continue;
            }
            let s = dot(q, &gallery.vectors.data()[l * d..(l + 1) * d]);
            if s > best {
                best = s;
            }
            found = true;
        }
        if !found {
            return 0.0;
        }
        acc += best;
    }
    if count == 0 {
        return 0.0;
    }
    acc / count as f64
}

/// The six similarities of one image/text pair. The global similarity is a
/// single symmetric value used for both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSimilarities {
    pub entity_i2t: f64,
    pub entity_t2i: f64,
    pub relation_i2t: f64,
    pub relation_t2i: f64,
    pub global: f64,
}

/// Splits an encoded sequence into (global vector, entity set, relation set)
/// for the `[g, e_1..e_n, r_1..r_m]` layout.
pub fn split_encoded(
    seq: &TokenSequence,
    n_entities: usize,
    m_relations: usize,
) -> Result<(Vec<f64>, ComponentSet, ComponentSet)> {
    let (rows, d) = seq.tokens.dims2()?;
    if rows != 1 + n_entities + m_relations {
        return Err(Error::shape(
            "encoded layout",
            &[1 + n_entities + m_relations],
            &[rows],
        ));
    }
    let global = seq.tokens.data()[..d].to_vec();
    let slice = |start: usize, len: usize| -> Result<ComponentSet> {
        let data = seq.tokens.data()[start * d..(start + len) * d].to_vec();
        ComponentSet::new(
            Tensor::new(vec![len, d], data)?,
            seq.mask[start..start + len].to_vec(),
        )
    };
    Ok((
        global,
        slice(1, n_entities)?,
        slice(1 + n_entities, m_relations)?,
    ))
}

/// Six similarities for one encoded pair: entity and relation channels via
/// mean-over-max in both directions, global via the dot of the two global
/// tokens.
pub fn pair_similarities(
    z_img: &TokenSequence,
    z_txt: &TokenSequence,
    n_entities: usize,
    m_relations: usize,
) -> Result<PairSimilarities> {
    if z_img.dim() != z_txt.dim() {
        return Err(Error::shape("pair dims", &[z_img.dim()], &[z_txt.dim()]));
    }
    let (g_img, e_img, r_img) = split_encoded(z_img, n_entities, m_relations)?;
    let (g_txt, e_txt, r_txt) = split_encoded(z_txt, n_entities, m_relations)?;
    Ok(PairSimilarities {
        entity_i2t: mean_max_sim(&e_img, &e_txt),
        entity_t2i: mean_max_sim(&e_txt, &e_img),
        relation_i2t: mean_max_sim(&r_img, &r_txt),
        relation_t2i: mean_max_sim(&r_txt, &r_img),
        global: dot(&g_img, &g_txt),
    })
}

/// The six B×B batch matrices. Rows index the query side named first, so
/// `entity_i2t[i][j]` scores image i against text j and `entity_t2i[j][i]`
/// scores text j against image i. `global_t2i` is the transpose of
/// `global_i2t` (one symmetric quantity).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBundle {
    pub entity_i2t: Tensor,
    pub entity_t2i: Tensor,
    pub relation_i2t: Tensor,
    pub relation_t2i: Tensor,
    pub global_i2t: Tensor,
    pub global_t2i: Tensor,
}

impl SimilarityBundle {
    pub fn batch(&self) -> usize {
        self.global_i2t.shape()[0]
    }
}

/// Batched similarities over two encoded batches; entry (i, j) equals
/// `pair_similarities(imgs[i], txts[j])` bit-for-bit.
pub fn batch_similarities(
    imgs: &[TokenSequence],
    txts: &[TokenSequence],
    n_entities: usize,
    m_relations: usize,
) -> Result<SimilarityBundle> {
    if imgs.len() != txts.len() {
        return Err(Error::shape("batch sizes", &[imgs.len()], &[txts.len()]));
    }
    let b = imgs.len();
    let split_all = |seqs: &[TokenSequence]| -> Result<Vec<(Vec<f64>, ComponentSet, ComponentSet)>> {
        seqs.iter()
            .map(|s| split_encoded(s, n_entities, m_relations))
            .collect()
    };
    let img_parts = split_all(imgs)?;
    let txt_parts = split_all(txts)?;
    let mut e_i2t = vec![0.0; b * b];
    let mut e_t2i = vec![0.0; b * b];
    let mut r_i2t = vec![0.0; b * b];
    let mut r_t2i = vec![0.0; b * b];
    let mut g_i2t = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let (gi, ei, ri) = &img_parts[i];
            let (gj, ej, rj) = &txt_parts[j];
            e_i2t[i * b + j] = mean_max_sim(ei, ej);
            e_t2i[j * b + i] = mean_max_sim(ej, ei);
            r_i2t[i * b + j] = mean_max_sim(ri, rj);
            r_t2i[j * b + i] = mean_max_sim(rj, ri);
            g_i2t[i * b + j] = dot(gi, gj);
        }
    }
    let global_i2t = Tensor::new(vec![b, b], g_i2t)?;
    let global_t2i = transpose_values(&global_i2t)?;
    Ok(SimilarityBundle {
        entity_i2t: Tensor::new(vec![b, b], e_i2t)?,
        entity_t2i: Tensor::new(vec![b, b], e_t2i)?,
        relation_i2t: Tensor::new(vec![b, b], r_i2t)?,
        relation_t2i: Tensor::new(vec![b, b], r_t2i)?,
        global_i2t,
        global_t2i,
    })
}

/// Tape-node handles for the six batch matrices.
pub struct BundleNodes {
    pub entity_i2t: NodeId,
    pub entity_t2i: NodeId,
    pub relation_i2t: NodeId,
    pub relation_t2i: NodeId,
    pub global_i2t: NodeId,
    pub global_t2i: NodeId,
}

impl BundleNodes {
    pub fn values(&self, tape: &Tape) -> SimilarityBundle {
        SimilarityBundle {
            entity_i2t: tape.value(self.entity_i2t).clone(),
            entity_t2i: tape.value(self.entity_t2i).clone(),
            relation_i2t: tape.value(self.relation_i2t).clone(),
            relation_t2i: tape.value(self.relation_t2i).clone(),
            global_i2t: tape.value(self.global_i2t).clone(),
            global_t2i: tape.value(self.global_t2i).clone(),
        }
    }
}

/// Differentiable batch similarities from per-record encoded nodes. The
/// token masks come from the (already assembled) input sequences.
pub fn batch_similarity_nodes(
    tape: &mut Tape,
    encoded_imgs: &[NodeId],
    encoded_txts: &[NodeId],
    masks_imgs: &[Vec<bool>],
    masks_txts: &[Vec<bool>],
    n_entities: usize,
    m_relations: usize,
) -> Result<BundleNodes> {
    let b = encoded_imgs.len();
    if b != encoded_txts.len() || b != masks_imgs.len() || b != masks_txts.len() {
        return Err(Error::shape("batch sizes", &[b], &[encoded_txts.len()]));
    }
    if b == 0 {
        return Err(Error::config("empty batch"));
    }
    let gather = |tape: &mut Tape,
                      encoded: &[NodeId],
                      masks: &[Vec<bool>]|
     -> Result<(NodeId, NodeId, NodeId, Vec<bool>, Vec<bool>)> {
        let mut globals = Vec::with_capacity(b);
        let mut entities = Vec::with_capacity(b);
        let mut relations = Vec::with_capacity(b);
        let mut e_mask = Vec::with_capacity(b * n_entities);
        let mut r_mask = Vec::with_capacity(b * m_relations);
        for (&node, mask) in encoded.iter().zip(masks) {
            globals.push(tape.slice_rows(node, 0, 1)?);
            entities.push(tape.slice_rows(node, 1, n_entities)?);
            relations.push(tape.slice_rows(node, 1 + n_entities, m_relations)?);
            e_mask.extend_from_slice(&mask[1..1 + n_entities]);
            r_mask.extend_from_slice(&mask[1 + n_entities..1 + n_entities + m_relations]);
        }
        Ok((
            tape.concat_rows(&globals)?,
            tape.concat_rows(&entities)?,
            tape.concat_rows(&relations)?,
            e_mask,
            r_mask,
        ))
    };
    let (g_img, e_img, r_img, em_img, rm_img) = gather(tape, encoded_imgs, masks_imgs)?;
    let (g_txt, e_txt, r_txt, em_txt, rm_txt) = gather(tape, encoded_txts, masks_txts)?;

    let g_txt_t = tape.transpose(g_txt)?;
    let global_i2t = tape.matmul(g_img, g_txt_t)?;
    let global_t2i = tape.transpose(global_i2t)?;
    Ok(BundleNodes {
        entity_i2t: tape.mean_max_grid(e_img, e_txt, &em_img, &em_txt, b, n_entities, n_entities)?,
        entity_t2i: tape.mean_max_grid(e_txt, e_img, &em_txt, &em_img, b, n_entities, n_entities)?,
        relation_i2t: tape.mean_max_grid(r_img, r_txt, &rm_img, &rm_txt, b, m_relations, m_relations)?,
        relation_t2i: tape.mean_max_grid(r_txt, r_img, &rm_txt, &rm_img, b, m_relations, m_relations)?,
        global_i2t,
        global_t2i,
    })
}

/// Writes a matrix as CSV, row-major, 9 significant digits.
pub fn write_matrix_csv<W: Write>(w: &mut W, m: &Tensor) -> Result<()> {
    let (rows, cols) = m.dims2()?;
    for i in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|j| format!("{:.8e}", m.data()[i * cols + j]))
            .collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalized;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[Vec<f64>], mask: &[bool]) -> ComponentSet {
        ComponentSet::new(Tensor::from_rows(rows).unwrap(), mask.to_vec()).unwrap()
    }

    fn unit_set(rng: &mut ChaCha8Rng, c: usize, d: usize, mask: Option<Vec<bool>>) -> ComponentSet {
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                l2_normalized(&v)
            })
            .collect();
        let mask = mask.unwrap_or_else(|| vec![true; c]);
        set(&rows, &mask)
    }

    /// Nested-loop reference for the set similarity.
    fn oracle(query: &ComponentSet, gallery: &ComponentSet) -> f64 {
        let d = query.vectors.shape()[1];
        let mut terms = Vec::new();
        for (k, &live) in query.mask.iter().enumerate() {
            if !live {
                continue;
            }
            let mut best: Option<f64> = None;
            for (l, &glive) in gallery.mask.iter().enumerate() {
                if !glive {
                    continue;
                }
                let mut s = 0.0;
                for t in 0..d {
                    s += query.vectors.data()[k * d + t] * gallery.vectors.data()[l * d + t];
                }
                best = Some(best.map_or(s, |b: f64| b.max(s)));
            }
            match best {
                Some(b) => terms.push(b),
                None => return 0.0,
            }
        }
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        }
    }

    #[test]
    fn identical_single_vector_scores_one() {
        let v = l2_normalized(&[0.3, -0.4, 0.5]);
        let s = set(&[v.clone()], &[true]);
        assert!((mean_max_sim(&s, &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetry_example() {
        // Vectors engineered so the pairwise dots are [[0.9,0.1],[0.8,0.0]].
        let q = set(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[true, true]);
        let g = set(&[vec![0.9, 0.8], vec![0.1, 0.0]], &[true, true]);
        assert!((mean_max_sim(&q, &g) - 0.85).abs() < 1e-15);
        assert!((mean_max_sim(&g, &q) - 0.50).abs() < 1e-15);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = unit_set(&mut rng, 3, 4, None);
        let base = unit_set(&mut rng, 2, 4, None);
        let mut with_masked = base.clone();
        let mut rows: Vec<Vec<f64>> = (0..2)
            .map(|k| base.vectors.data()[k * 4..(k + 1) * 4].to_vec())
            .collect();
        rows.push(vec![1e9, -1e9, 1e9, -1e9]);
        with_masked.vectors = Tensor::from_rows(&rows).unwrap();
        with_masked.mask = vec![true, true, false];
        assert_eq!(mean_max_sim(&base, &g), mean_max_sim(&with_masked, &g));
        assert_eq!(mean_max_sim(&g, &base), mean_max_sim(&g, &with_masked));
    }

    #[test]
    fn empty_sides_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = unit_set(&mut rng, 3, 4, None);
        let empty = unit_set(&mut rng, 2, 4, Some(vec![false, false]));
        assert_eq!(mean_max_sim(&empty, &g), 0.0);
        assert_eq!(mean_max_sim(&g, &empty), 0.0);
        assert_eq!(mean_max_sim(&empty, &empty), 0.0);
    }

    #[test]
    fn matches_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = rng.gen_range(1..=10);
            let c2 = rng.gen_range(1..=10);
            let d = rng.gen_range(2..=32);
            let qmask: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.8)).collect();
            let gmask: Vec<bool> = (0..c2).map(|_| rng.gen_bool(0.8)).collect();
            let q = unit_set(&mut rng, c, d, Some(qmask));
            let g = unit_set(&mut rng, c2, d, Some(gmask));
            let got = mean_max_sim(&q, &g);
            let want = oracle(&q, &g);
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    proptest! {
        #[test]
        fn self_match_is_one(seed in 0u64..500, c in 1usize..8, d in 2usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = unit_set(&mut rng, c, d, None);
            let v = mean_max_sim(&s, &s);
            prop_assert!((v - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gallery_order_is_irrelevant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = unit_set(&mut rng, 4, 8, None);
            let g = unit_set(&mut rng, 5, 8, None);
            let mut rows: Vec<Vec<f64>> = (0..5)
                .map(|l| g.vectors.data()[l * 8..(l + 1) * 8].to_vec())
                .collect();
            rows.reverse();
            let g_rev = set(&rows, &[true; 5]);
            let a = mean_max_sim(&q, &g);
            let b = mean_max_sim(&q, &g_rev);
            prop_assert!((a - b).abs() < 1e-15);
        }

        #[test]
        fn appending_gallery_rows_never_decreases(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = unit_set(&mut rng, 3, 8, None);
            let g = unit_set(&mut rng, 4, 8, None);
            let extra = unit_set(&mut rng, 1, 8, None);
            let mut rows: Vec<Vec<f64>> = (0..4)
                .map(|l| g.vectors.data()[l * 8..(l + 1) * 8].to_vec())
                .collect();
            rows.push(extra.vectors.data().to_vec());
            let g_ext = set(&rows, &[true; 5]);
            prop_assert!(mean_max_sim(&q, &g_ext) >= mean_max_sim(&q, &g) - 1e-15);
        }
    }
}
