//! Synthetic paired-embedding generators.
//!
//! Stand-in for frozen-backbone features: every pair draws per-slot latent
//! unit vectors around a shared topic direction, and each modality sees the
//! latent plus independent Gaussian noise, renormalized. The global vector
//! is the mean of the component latents plus noise; an extra corruption term
//! (`global_noise_sigma`) can weaken the global channel specifically, which
//! leaves the component channels as the only reliable signal.
//!
//! Noise scale convention: a noise "of scale sigma" is an isotropic Gaussian
//! vector with expected norm sigma (per-coordinate std sigma/sqrt(dim)).
//!
//! The attribute generator builds entities as object+attribute compositions
//! and derives a wrong caption by swapping the attributes of two entities,
//! for the binary caption-choice benchmark.

use crate::components::DetectionBox;
use crate::error::{Error, Result};
use crate::ingest::{quantize_f32, BinaryBenchmark, ComponentRecord, Modality, PairedDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default spread of component latents around their pair's topic
/// direction. Latents are normalize(topic + spread·u): smaller values give
/// records a stronger shared direction (a cleaner global mean), larger
/// values push the components apart.
pub const DEFAULT_TOPIC_SPREAD: f64 = 1.8;

/// Object weight in an object+attribute entity latent. Below 1 so that
/// swapping attributes moves the entity vector decisively.
const OBJECT_WEIGHT: f64 = 0.6;


#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub count: usize,
    pub dim: usize,
    pub n_entities: usize,
    pub m_relations: usize,
    pub noise_sigma: f64,
    /// Extra corruption applied to global vectors on top of `noise_sigma`.
    pub global_noise_sigma: f64,
    pub seed: u64,
    /// Component-latent spread around the pair topic.
    pub topic_spread: f64,
}

impl SynthOptions {
    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("synthetic data needs dim >= 2"));
        }
        if self.noise_sigma < 0.0 || self.global_noise_sigma < 0.0 {
            return Err(Error::config("noise scales must be non-negative"));
        }
        if !(self.topic_spread > 0.0) {
            return Err(Error::config("topic_spread must be positive"));
        }
        Ok(())
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Standard normal via Box-Muller.
    fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u1: f64 = self.rng.gen::<f64>();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2: f64 = self.rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.spare = Some(r * theta.sin());
            return r * theta.cos();
        }
    }

    fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    /// Gaussian vector with expected norm `sigma`.
    fn noise(&mut self, dim: usize, sigma: f64) -> Vec<f64> {
        let per_coord = sigma / (dim as f64).sqrt();
        (0..dim).map(|_| self.normal() * per_coord).collect()
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    fn flip(&mut self) -> bool {
        self.rng.gen::<bool>()
    }

    fn pick(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn perturbed(latent: &[f64], sampler: &mut Sampler, sigma: f64) -> Vec<f64> {
    let mut v = latent.to_vec();
    if sigma > 0.0 {
        add_into(&mut v, &sampler.noise(latent.len(), sigma));
    }
    normalize(&v)
}

/// How the extra global corruption is composed.
enum ExtraCorruption<'a> {
    None,
    /// A pre-drawn disturbance shared across records (caption pairs).
    Shared(&'a [f64]),
    /// Fresh white-noise corruption of norm `sigma`.
    White(f64),
}

fn global_from(
    latents: &[Vec<f64>],
    dim: usize,
    sampler: &mut Sampler,
    sigma: f64,
    extra: ExtraCorruption<'_>,
) -> Vec<f64> {
    let mut g = vec![0.0; dim];
    for l in latents {
        add_into(&mut g, l);
    }
    for x in g.iter_mut() {
        *x /= latents.len() as f64;
    }
    if sigma > 0.0 {
        add_into(&mut g, &sampler.noise(dim, sigma));
    }
    match extra {
        ExtraCorruption::None => {}
        ExtraCorruption::Shared(n) => add_into(&mut g, n),
        ExtraCorruption::White(sigma) => {
            if sigma > 0.0 {
                let n = sampler.noise(dim, sigma);
                add_into(&mut g, &n);
            }
        }
    }
    normalize(&g)
}

fn quantize_record(rec: &mut ComponentRecord) {
    quantize_f32(&mut rec.global);
    for v in rec.entities.iter_mut().chain(rec.relations.iter_mut()) {
        quantize_f32(v);
    }
}

fn random_boxes(sampler: &mut Sampler, count: usize) -> Vec<DetectionBox> {
    (0..count)
        .map(|_| {
            let x1 = sampler.uniform(0.0, 400.0);
            let y1 = sampler.uniform(0.0, 400.0);
            let w = sampler.uniform(10.0, 200.0);
            let h = sampler.uniform(10.0, 200.0);
            let conf = sampler.uniform(0.05, 1.0);
            DetectionBox {
                x1,
                y1,
                x2: x1 + w,
                y2: y1 + h,
                confidence: conf,
                label: None,
            }
        })
        .collect()
}

/// Deterministic paired dataset: shared latents per slot, independent noise
/// per modality, topic-coherent records. Image records carry synthetic
/// detection boxes so the box-facing tooling has something to chew on.
pub fn synth_pairs(opts: &SynthOptions) -> Result<PairedDataset> {
    opts.validate()?;
    let mut sampler = Sampler::new(opts.seed);
    let mut images = Vec::with_capacity(opts.count);
    let mut texts = Vec::with_capacity(opts.count);
    for p in 0..opts.count {
        let topic = sampler.unit_vector(opts.dim);
        let latent = |s: &mut Sampler| {
            let mut v = topic.clone();
            let u = s.unit_vector(opts.dim);
            for (vi, ui) in v.iter_mut().zip(&u) {
                *vi += opts.topic_spread * ui;
            }
            normalize(&v)
        };
        let ent_latents: Vec<Vec<f64>> = (0..opts.n_entities).map(|_| latent(&mut sampler)).collect();
        let rel_latents: Vec<Vec<f64>> = (0..opts.m_relations).map(|_| latent(&mut sampler)).collect();
        let all_latents: Vec<Vec<f64>> = ent_latents
            .iter()
            .chain(rel_latents.iter())
            .cloned()
            .collect();

        let side = |s: &mut Sampler, id: String, modality: Modality, boxes: Option<Vec<DetectionBox>>| {
            let entities: Vec<Vec<f64>> = ent_latents
                .iter()
                .map(|l| perturbed(l, s, opts.noise_sigma))
                .collect();
            let relations: Vec<Vec<f64>> = rel_latents
                .iter()
                .map(|l| perturbed(l, s, opts.noise_sigma))
                .collect();
            let global = global_from(
                &all_latents,
                opts.dim,
                s,
                opts.noise_sigma,
                ExtraCorruption::White(opts.global_noise_sigma),
            );
            let mut rec = ComponentRecord {
                id,
                modality,
                global,
                entity_mask: vec![true; entities.len()],
                entities,
                relation_mask: vec![true; relations.len()],
                relations,
                boxes,
            };
            quantize_record(&mut rec);
            rec
        };
        let boxes = random_boxes(&mut sampler, opts.n_entities.max(2));
        images.push(side(
            &mut sampler,
            format!("img-{p:05}"),
            Modality::Image,
            Some(boxes),
        ));
        texts.push(side(&mut sampler, format!("txt-{p:05}"), Modality::Text, None));
    }
    Ok(PairedDataset {
        images,
        texts,
        dim: opts.dim,
        n_entities: opts.n_entities,
        m_relations: opts.m_relations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttrSynthOptions {
    pub train_pairs: usize,
    pub triples: usize,
    pub dim: usize,
    /// At least 2; two entity slots get their attributes exchanged.
    pub n_entities: usize,
    pub m_relations: usize,
    pub noise_sigma: f64,
    pub global_noise_sigma: f64,
    pub seed: u64,
}

struct AttrItem {
    image: ComponentRecord,
    correct: ComponentRecord,
    wrong: ComponentRecord,
}

fn attr_item(
    sampler: &mut Sampler,
    opts: &AttrSynthOptions,
    index: usize,
    prefix: &str,
) -> AttrItem {
    let dim = opts.dim;
    let objects: Vec<Vec<f64>> = (0..opts.n_entities)
        .map(|_| sampler.unit_vector(dim))
        .collect();
    let attrs: Vec<Vec<f64>> = (0..opts.n_entities)
        .map(|_| sampler.unit_vector(dim))
        .collect();
    let compose = |obj: &[f64], attr: &[f64]| {
        let mut v: Vec<f64> = obj.iter().map(|x| x * OBJECT_WEIGHT).collect();
        add_into(&mut v, attr);
        normalize(&v)
    };
    let correct_latents: Vec<Vec<f64>> = objects
        .iter()
        .zip(&attrs)
        .map(|(o, a)| compose(o, a))
        .collect();
    // Swap the attributes of two distinct entities.
    let i = sampler.pick(opts.n_entities);
    let j = (i + 1 + sampler.pick(opts.n_entities - 1)) % opts.n_entities;
    let mut wrong_latents = correct_latents.clone();
    wrong_latents[i] = compose(&objects[i], &attrs[j]);
    wrong_latents[j] = compose(&objects[j], &attrs[i]);

    let rel_latents: Vec<Vec<f64>> = (0..opts.m_relations)
        .map(|_| sampler.unit_vector(dim))
        .collect();

    let latents_with_rels = |ents: &[Vec<f64>]| -> Vec<Vec<f64>> {
        ents.iter().chain(rel_latents.iter()).cloned().collect()
    };
    let correct_all = latents_with_rels(&correct_latents);
    let wrong_all = latents_with_rels(&wrong_latents);

    let components = |s: &mut Sampler, latents: &[Vec<f64>]| -> Vec<Vec<f64>> {
        latents
            .iter()
            .map(|l| perturbed(l, s, opts.noise_sigma))
            .collect()
    };

    let image_entities = components(sampler, &correct_latents);
    let image_relations = components(sampler, &rel_latents);
    let image_global = global_from(
        &correct_all,
        dim,
        sampler,
        opts.noise_sigma,
        ExtraCorruption::White(opts.global_noise_sigma),
    );

    let correct_entities = components(sampler, &correct_latents);
    let correct_relations = components(sampler, &rel_latents);
    let wrong_entities = components(sampler, &wrong_latents);
    let wrong_relations = components(sampler, &rel_latents);
    // The caption pair shares one corruption draw: a caption with two words
    // exchanged lands almost on top of the original in a bag-of-words-like
    // global embedding space.
    let shared = if opts.global_noise_sigma > 0.0 {
        Some(sampler.noise(dim, opts.global_noise_sigma))
    } else {
        None
    };
    fn caption_extra(shared: Option<&[f64]>) -> ExtraCorruption<'_> {
        match shared {
            Some(n) => ExtraCorruption::Shared(n),
            None => ExtraCorruption::None,
        }
    }
    let correct_global = global_from(
        &correct_all,
        dim,
        sampler,
        opts.noise_sigma,
        caption_extra(shared.as_deref()),
    );
    let wrong_global = global_from(
        &wrong_all,
        dim,
        sampler,
        opts.noise_sigma,
        caption_extra(shared.as_deref()),
    );

    let record = |id: String, modality: Modality, global: Vec<f64>, ents: Vec<Vec<f64>>, rels: Vec<Vec<f64>>, boxes: Option<Vec<DetectionBox>>| {
        let mut rec = ComponentRecord {
            id,
            modality,
            global,
            entity_mask: vec![true; ents.len()],
            entities: ents,
            relation_mask: vec![true; rels.len()],
            relations: rels,
            boxes,
        };
        quantize_record(&mut rec);
        rec
    };
    let boxes = random_boxes(sampler, opts.n_entities.max(2));
    AttrItem {
        image: record(
            format!("{prefix}img-{index:05}"),
            Modality::Image,
            image_global,
            image_entities,
            image_relations,
            Some(boxes),
        ),
        correct: record(
            format!("{prefix}cap-ok-{index:05}"),
            Modality::Text,
            correct_global,
            correct_entities,
            correct_relations,
            None,
        ),
        wrong: record(
            format!("{prefix}cap-sw-{index:05}"),
            Modality::Text,
            wrong_global,
            wrong_entities,
            wrong_relations,
            None,
        ),
    }
}

/// Object+attribute world: a training set of (image, correct caption) pairs
/// plus held-out triples whose wrong caption swaps two entities' attribute
/// latents. Caption A/B roles are assigned by coin flip per triple.
pub fn synth_attr_benchmark(opts: &AttrSynthOptions) -> Result<(PairedDataset, BinaryBenchmark)> {
    if opts.n_entities < 2 {
        return Err(Error::config(
            "attribute benchmark needs at least 2 entity slots",
        ));
    }
    if opts.dim < 2 {
        return Err(Error::config("synthetic data needs dim >= 2"));
    }
    let mut sampler = Sampler::new(opts.seed);
    let mut train = PairedDataset {
        images: Vec::new(),
        texts: Vec::new(),
        dim: opts.dim,
        n_entities: opts.n_entities,
        m_relations: opts.m_relations,
    };
    for p in 0..opts.train_pairs {
        let item = attr_item(&mut sampler, opts, p, "tr-");
        train.images.push(item.image);
        let mut caption = item.correct;
        caption.id = format!("tr-txt-{p:05}");
        train.texts.push(caption);
    }
    let mut bench = BinaryBenchmark {
        images: Vec::new(),
        caption_a: Vec::new(),
        caption_b: Vec::new(),
        a_is_correct: Vec::new(),
        dim: opts.dim,
        n_entities: opts.n_entities,
        m_relations: opts.m_relations,
    };
    for t in 0..opts.triples {
        let item = attr_item(&mut sampler, opts, t, "ev-");
        let a_first = sampler.flip();
        let (mut a, mut b) = if a_first {
            (item.correct, item.wrong)
        } else {
            (item.wrong, item.correct)
        };
        a.id = format!("ev-cap-a-{t:05}");
        b.id = format!("ev-cap-b-{t:05}");
        bench.images.push(item.image);
        bench.caption_a.push(a);
        bench.caption_b.push(b);
        bench.a_is_correct.push(a_first);
    }
    Ok((train, bench))
}
