//! Cross-module pipeline checks: encode → similarity matrices → loss.

use fgalign_core::config::RunConfig;
use fgalign_core::encoder::{assemble_sequence, encode, init_params, positional_encoding};
use fgalign_core::ingest::PairedDataset;
use fgalign_core::matching::{batch_similarities, batch_similarity_nodes, pair_similarities};
use fgalign_core::numerics::Tape;
use fgalign_core::synth::{synth_pairs, SynthOptions};
use fgalign_core::training::pipeline_gradient_check;

fn small_config() -> RunConfig {
    RunConfig {
        dim: 16,
        heads: 4,
        ffn_ratio: 2,
        layers: 2,
        n_entities: 3,
        m_relations: 2,
        batch_size: 4,
        tau: 0.5,
        residual_scale: 1.0,
        ..RunConfig::default()
    }
}

fn small_dataset(cfg: &RunConfig, count: usize, seed: u64) -> PairedDataset {
    synth_pairs(&SynthOptions {
        count,
        dim: cfg.dim,
        n_entities: cfg.n_entities,
        m_relations: cfg.m_relations,
        noise_sigma: 0.2,
        global_noise_sigma: 0.0,
        seed,
            topic_spread: fgalign_core::synth::DEFAULT_TOPIC_SPREAD,
        })
    .unwrap()
}

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    let cfg = RunConfig {
        dim: 8,
        heads: 2,
        ffn_ratio: 2,
        layers: 2,
        n_entities: 2,
        m_relations: 2,
        batch_size: 2,
        tau: 0.5,
        residual_scale: 1.0,
        ..RunConfig::default()
    };
    let err = pipeline_gradient_check(&cfg, 2, 1e-5).unwrap();
    assert!(err < 1e-5, "err = {err}");
}

#[test]
fn batched_similarities_agree_with_the_pairwise_loop_and_the_tape() {
    let cfg = small_config();
    let ds = small_dataset(&cfg, 4, 21);
    let shape = cfg.encoder_shape();
    let img_params = init_params(&shape, 1).unwrap();
    let txt_params = init_params(&shape, 2).unwrap();
    let pe = positional_encoding(1 + cfg.n_entities + cfg.m_relations, cfg.dim).unwrap();

    let encode_all = |params, records: &Vec<fgalign_core::ingest::ComponentRecord>| {
        records
            .iter()
            .map(|r| {
                let seq = assemble_sequence(r, cfg.n_entities, cfg.m_relations, cfg.dim).unwrap();
                encode(params, &seq, Some(&pe)).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let enc_imgs = encode_all(&img_params, &ds.images);
    let enc_txts = encode_all(&txt_params, &ds.texts);

    let bundle = batch_similarities(&enc_imgs, &enc_txts, cfg.n_entities, cfg.m_relations).unwrap();
    let b = 4;
    for i in 0..b {
        for j in 0..b {
            let p = pair_similarities(&enc_imgs[i], &enc_txts[j], cfg.n_entities, cfg.m_relations)
                .unwrap();
            assert_eq!(bundle.entity_i2t.data()[i * b + j], p.entity_i2t);
            assert_eq!(bundle.entity_t2i.data()[j * b + i], p.entity_t2i);
            assert_eq!(bundle.relation_i2t.data()[i * b + j], p.relation_i2t);
            assert_eq!(bundle.relation_t2i.data()[j * b + i], p.relation_t2i);
            assert_eq!(bundle.global_i2t.data()[i * b + j], p.global);
            assert_eq!(bundle.global_t2i.data()[j * b + i], p.global);
        }
    }

    // Tape route: same matrices, bit for bit.
    let mut tape = Tape::new();
    let mut nodes_masks = |seqs: &[fgalign_core::encoder::TokenSequence]| {
        let nodes: Vec<_> = seqs.iter().map(|s| tape.input(s.tokens.clone())).collect();
        let masks: Vec<_> = seqs.iter().map(|s| s.mask.clone()).collect();
        (nodes, masks)
    };
    let (img_nodes, img_masks) = nodes_masks(&enc_imgs);
    let (txt_nodes, txt_masks) = nodes_masks(&enc_txts);
    let tape_bundle = batch_similarity_nodes(
        &mut tape,
        &img_nodes,
        &txt_nodes,
        &img_masks,
        &txt_masks,
        cfg.n_entities,
        cfg.m_relations,
    )
    .unwrap();
    let tb = tape_bundle.values(&tape);
    assert_eq!(tb.entity_i2t, bundle.entity_i2t);
    assert_eq!(tb.entity_t2i, bundle.entity_t2i);
    assert_eq!(tb.relation_i2t, bundle.relation_i2t);
    assert_eq!(tb.relation_t2i, bundle.relation_t2i);
    assert_eq!(tb.global_i2t, bundle.global_i2t);
    assert_eq!(tb.global_t2i, bundle.global_t2i);
}

#[test]
fn single_pair_batch_matches_pair_similarities() {
    let cfg = small_config();
    let ds = small_dataset(&cfg, 1, 5);
    let shape = cfg.encoder_shape();
    let params = init_params(&shape, 9).unwrap();
    let pe = positional_encoding(1 + cfg.n_entities + cfg.m_relations, cfg.dim).unwrap();
    let seq_i = assemble_sequence(&ds.images[0], cfg.n_entities, cfg.m_relations, cfg.dim).unwrap();
    let seq_t = assemble_sequence(&ds.texts[0], cfg.n_entities, cfg.m_relations, cfg.dim).unwrap();
    let zi = encode(&params, &seq_i, Some(&pe)).unwrap();
    let zt = encode(&params, &seq_t, Some(&pe)).unwrap();
    let bundle = batch_similarities(
        &[zi.clone()],
        &[zt.clone()],
        cfg.n_entities,
        cfg.m_relations,
    )
    .unwrap();
    let p = pair_similarities(&zi, &zt, cfg.n_entities, cfg.m_relations).unwrap();
    assert_eq!(bundle.entity_i2t.data(), &[p.entity_i2t]);
    assert_eq!(bundle.global_i2t.data(), &[p.global]);
}
