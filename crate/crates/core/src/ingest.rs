//! Embedding-record file format, pairing files, and batching.
//!
//! Records are UTF-8 JSON lines. The first line is a header
//! `{"dim":D,"n_entities":N,"m_relations":M,"version":1}`; every following
//! line is one record with base64-encoded little-endian f32 vectors:
//! `{"id","modality","global","entities":[…],"relations":[…],"boxes":…?}`.
//! Pairing files are JSON lines of `{"image_id","text_id"}`, and binary
//! caption-choice files are JSON lines of
//! `{"image_id","caption_a_id","caption_b_id","correct"}`.
//!
//! Vectors are stored in 32-bit precision and widened to f64 on load, so a
//! write/read round trip is bit-exact at 32-bit storage.

use crate::components::DetectionBox;
use crate::error::{Error, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const BINARY_RECORDS_FILE: &str = "binary_records.jsonl";
pub const BINARY_TRIPLES_FILE: &str = "binary_triples.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// One image or text item: a global vector plus entity and relation
/// component vectors with validity masks. File-loaded records have all-true
/// masks; in-memory callers may append masked slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentRecord {
    pub id: String,
    pub modality: Modality,
    pub global: Vec<f64>,
    pub entities: Vec<Vec<f64>>,
    pub entity_mask: Vec<bool>,
    pub relations: Vec<Vec<f64>>,
    pub relation_mask: Vec<bool>,
    pub boxes: Option<Vec<DetectionBox>>,
}

impl ComponentRecord {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    fn validate(&self, dim: usize, n_entities: usize, m_relations: usize) -> Result<()> {
        if self.global.len() != dim {
            return Err(Error::format(format!(
                "record {}: global dim {} != dataset dim {}",
                self.id,
                self.global.len(),
                dim
            )));
        }
        if self.entities.len() > n_entities {
            return Err(Error::format(format!(
                "record {}: {} entities exceed the configured maximum {}",
                self.id,
                self.entities.len(),
                n_entities
            )));
        }
        if self.relations.len() > m_relations {
            return Err(Error::format(format!(
                "record {}: {} relations exceed the configured maximum {}",
                self.id,
                self.relations.len(),
                m_relations
            )));
        }
        if self.entity_mask.len() != self.entities.len()
            || self.relation_mask.len() != self.relations.len()
        {
            return Err(Error::format(format!(
                "record {}: mask counts do not match stored vector counts",
                self.id
            )));
        }
        for v in self.entities.iter().chain(self.relations.iter()) {
            if v.len() != dim {
                return Err(Error::format(format!(
                    "record {}: component dim {} != dataset dim {}",
                    self.id,
                    v.len(),
                    dim
                )));
            }
        }
        if let Some(boxes) = &self.boxes {
            for b in boxes {
                b.validate()?;
            }
        }
        Ok(())
    }
}

/// Index-aligned image/text pairs plus dataset dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub images: Vec<ComponentRecord>,
    pub texts: Vec<ComponentRecord>,
    pub dim: usize,
    pub n_entities: usize,
    pub m_relations: usize,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Ground truth and item list for the binary caption-choice benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryBenchmark {
    pub images: Vec<ComponentRecord>,
    pub caption_a: Vec<ComponentRecord>,
    pub caption_b: Vec<ComponentRecord>,
    /// true = caption A is the correct one.
    pub a_is_correct: Vec<bool>,
    pub dim: usize,
    pub n_entities: usize,
    pub m_relations: usize,
}

impl BinaryBenchmark {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dim: usize,
    n_entities: usize,
    m_relations: usize,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    modality: Modality,
    global: String,
    entities: Vec<String>,
    relations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<(f64, f64, f64, f64, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    image_id: String,
    text_id: String,
}

#[derive(Serialize, Deserialize)]
struct TripleLine {
    image_id: String,
    caption_a_id: String,
    caption_b_id: String,
    correct: String,
}

pub(crate) fn encode_vector(v: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_vector(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::format(format!("bad base64 vector: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format("vector byte length not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Rounds a vector through f32, matching what storage does.
pub fn quantize_f32(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
}

fn record_to_line(rec: &ComponentRecord) -> RecordLine {
    let live =
        |vecs: &[Vec<f64>], mask: &[bool]| -> Vec<String> {
            vecs.iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| encode_vector(v))
                .collect()
        };
    RecordLine {
        id: rec.id.clone(),
        modality: rec.modality,
        global: encode_vector(&rec.global),
        entities: live(&rec.entities, &rec.entity_mask),
        relations: live(&rec.relations, &rec.relation_mask),
        boxes: rec.boxes.as_ref().map(|bs| {
            bs.iter()
                .map(|b| (b.x1, b.y1, b.x2, b.y2, b.confidence))
                .collect()
        }),
    }
}

fn line_to_record(line: RecordLine) -> Result<ComponentRecord> {
    let entities: Vec<Vec<f64>> = line
        .entities
        .iter()
        .map(|s| decode_vector(s))
        .collect::<Result<_>>()?;
    let relations: Vec<Vec<f64>> = line
        .relations
        .iter()
        .map(|s| decode_vector(s))
        .collect::<Result<_>>()?;
    let boxes = match line.boxes {
        Some(bs) => {
            let mut out = Vec::with_capacity(bs.len());
            for (x1, y1, x2, y2, conf) in bs {
                out.push(DetectionBox::new(x1, y1, x2, y2, conf)?);
            }
            Some(out)
        }
        None => None,
    };
    let e_mask = vec![true; entities.len()];
    let r_mask = vec![true; relations.len()];
    Ok(ComponentRecord {
        id: line.id,
        modality: line.modality,
        global: decode_vector(&line.global)?,
        entities,
        entity_mask: e_mask,
        relations,
        relation_mask: r_mask,
        boxes,
    })
}

/// Writes a records file (header first, then one record per line). Masked
/// in-memory slots are dropped; the file holds real components only.
pub fn write_record_file(
    path: &Path,
    dim: usize,
    n_entities: usize,
    m_relations: usize,
    records: impl Iterator<Item = impl std::borrow::Borrow<ComponentRecord>>,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        dim,
        n_entities,
        m_relations,
        version: 1,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for rec in records {
        let rec = rec.borrow();
        rec.validate(dim, n_entities, m_relations)?;
        serde_json::to_writer(&mut w, &record_to_line(rec))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a records file, validating the header and every record against it.
pub fn read_record_file(path: &Path) -> Result<(usize, usize, usize, Vec<ComponentRecord>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(format!("{}: empty file", path.display())))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::format(format!("{}: bad header: {e}", path.display())))?;
    if header.version != 1 {
        return Err(Error::format(format!(
            "unsupported records version {}",
            header.version
        )));
    }
    let mut records = Vec::new();
    for (no, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}: line {}: {e}", path.display(), no + 2)))?;
        let rec = line_to_record(parsed)?;
        rec.validate(header.dim, header.n_entities, header.m_relations)?;
        records.push(rec);
    }
    Ok((header.dim, header.n_entities, header.m_relations, records))
}

fn write_pairs_file(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (image_id, text_id) in pairs {
        serde_json::to_writer(
            &mut w,
            &PairLine {
                image_id: image_id.clone(),
                text_id: text_id.clone(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_pairs_file(path: &Path) -> Result<Vec<(String, String)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PairLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}: line {}: {e}", path.display(), no + 1)))?;
        out.push((parsed.image_id, parsed.text_id));
    }
    Ok(out)
}

/// Writes `records.jsonl` and `pairs.jsonl` for a paired dataset.
pub fn write_records(dataset: &PairedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_record_file(
        &dir.join(RECORDS_FILE),
        dataset.dim,
        dataset.n_entities,
        dataset.m_relations,
        dataset.images.iter().chain(dataset.texts.iter()),
    )?;
    let pairs: Vec<(String, String)> = dataset
        .images
        .iter()
        .zip(&dataset.texts)
        .map(|(i, t)| (i.id.clone(), t.id.clone()))
        .collect();
    write_pairs_file(&dir.join(PAIRS_FILE), &pairs)
}

/// Reads `records.jsonl` + `pairs.jsonl` back into an index-aligned dataset.
pub fn read_records(dir: &Path) -> Result<PairedDataset> {
    let (dim, n_entities, m_relations, records) = read_record_file(&dir.join(RECORDS_FILE))?;
    let pairs = read_pairs_file(&dir.join(PAIRS_FILE))?;
    let lookup: std::collections::HashMap<&str, &ComponentRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut images = Vec::with_capacity(pairs.len());
    let mut texts = Vec::with_capacity(pairs.len());
    for (image_id, text_id) in &pairs {
        let img = *lookup
            .get(image_id.as_str())
            .ok_or_else(|| Error::format(format!("pairing references unknown id {image_id}")))?;
        let txt = *lookup
            .get(text_id.as_str())
            .ok_or_else(|| Error::format(format!("pairing references unknown id {text_id}")))?;
        if img.modality != Modality::Image {
            return Err(Error::format(format!("{image_id} is not an image record")));
        }
        if txt.modality != Modality::Text {
            return Err(Error::format(format!("{text_id} is not a text record")));
        }
        images.push(img.clone());
        texts.push(txt.clone());
    }
    Ok(PairedDataset {
        images,
        texts,
        dim,
        n_entities,
        m_relations,
    })
}

/// Writes the binary caption-choice benchmark (`binary_records.jsonl` +
/// `binary_triples.jsonl`).
pub fn write_binary(bench: &BinaryBenchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_record_file(
        &dir.join(BINARY_RECORDS_FILE),
        bench.dim,
        bench.n_entities,
        bench.m_relations,
        bench
            .images
            .iter()
            .chain(bench.caption_a.iter())
            .chain(bench.caption_b.iter()),
    )?;
    let mut w = BufWriter::new(fs::File::create(dir.join(BINARY_TRIPLES_FILE))?);
    for i in 0..bench.len() {
        serde_json::to_writer(
            &mut w,
            &TripleLine {
                image_id: bench.images[i].id.clone(),
                caption_a_id: bench.caption_a[i].id.clone(),
                caption_b_id: bench.caption_b[i].id.clone(),
                correct: if bench.a_is_correct[i] { "A" } else { "B" }.to_string(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the binary caption-choice benchmark back.
pub fn read_binary(dir: &Path) -> Result<BinaryBenchmark> {
    let (dim, n_entities, m_relations, records) =
        read_record_file(&dir.join(BINARY_RECORDS_FILE))?;
    let lookup: std::collections::HashMap<&str, &ComponentRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let reader = BufReader::new(fs::File::open(dir.join(BINARY_TRIPLES_FILE))?);
    let mut bench = BinaryBenchmark {
        images: Vec::new(),
        caption_a: Vec::new(),
        caption_b: Vec::new(),
        a_is_correct: Vec::new(),
        dim,
        n_entities,
        m_relations,
    };
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TripleLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("triples line {}: {e}", no + 1)))?;
        let fetch = |id: &str| -> Result<ComponentRecord> {
            lookup
                .get(id)
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::format(format!("triple references unknown id {id}")))
        };
        bench.images.push(fetch(&parsed.image_id)?);
        bench.caption_a.push(fetch(&parsed.caption_a_id)?);
        bench.caption_b.push(fetch(&parsed.caption_b_id)?);
        bench.a_is_correct.push(match parsed.correct.as_str() {
            "A" => true,
            "B" => false,
            other => {
                return Err(Error::format(format!(
                    "triples line {}: correct must be A or B, got {other}",
                    no + 1
                )))
            }
        });
    }
    Ok(bench)
}

/// Splits `0..len` into batches of `batch_size` (last one may be short),
/// optionally shuffled. Deterministic for a given seed; every index appears
/// exactly once.
pub fn make_batches(
    len: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_pairs, SynthOptions};
    use tempfile::TempDir;

    #[test]
    fn empty_dataset_round_trips() {
        let dir = TempDir::new().unwrap();
        let ds = PairedDataset {
            images: vec![],
            texts: vec![],
            dim: 4,
            n_entities: 2,
            m_relations: 2,
        };
        write_records(&ds, dir.path()).unwrap();
        let back = read_records(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn small_dataset_round_trips_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let ds = synth_pairs(&SynthOptions {
            count: 1,
            dim: 4,
            n_entities: 2,
            m_relations: 2,
            noise_sigma: 0.1,
            global_noise_sigma: 0.0,
            seed: 5,
            topic_spread: crate::synth::DEFAULT_TOPIC_SPREAD,
        })
        .unwrap();
        write_records(&ds, dir.path()).unwrap();
        let back = read_records(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn overfull_record_rejected() {
        let dir = TempDir::new().unwrap();
        let mut ds = synth_pairs(&SynthOptions {
            count: 1,
            dim: 4,
            n_entities: 2,
            m_relations: 1,
            noise_sigma: 0.0,
            global_noise_sigma: 0.0,
            seed: 1,
            topic_spread: crate::synth::DEFAULT_TOPIC_SPREAD,
        })
        .unwrap();
        // 3 entities against a 2-slot header: the writer must refuse.
        ds.images[0].entities.push(vec![0.0; 4]);
        ds.images[0].entity_mask.push(true);
        let err = write_records(&ds, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn unknown_modality_is_a_format_error() {
        let dir = TempDir::new().unwrap();
        let records = dir.path().join(RECORDS_FILE);
        std::fs::write(
            &records,
            concat!(
                "{\"dim\":2,\"n_entities\":1,\"m_relations\":1,\"version\":1}\n",
                "{\"id\":\"x\",\"modality\":\"audio\",\"global\":\"AACAPwAAgD8=\",\"entities\":[],\"relations\":[]}\n",
            ),
        )
        .unwrap();
        let err = read_record_file(&records).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_a_format_error() {
        let dir = TempDir::new().unwrap();
        let records = dir.path().join(RECORDS_FILE);
        // global has 1 f32, header says dim 2
        std::fs::write(
            &records,
            concat!(
                "{\"dim\":2,\"n_entities\":1,\"m_relations\":1,\"version\":1}\n",
                "{\"id\":\"x\",\"modality\":\"image\",\"global\":\"AACAPw==\",\"entities\":[],\"relations\":[]}\n",
            ),
        )
        .unwrap();
        let err = read_record_file(&records).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn batches_partition_and_keep_short_tail() {
        let batches = make_batches(10, 4, 0, false).unwrap();
        assert_eq!(
            batches,
            vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]
        );

        let a = make_batches(100, 7, 42, true).unwrap();
        let b = make_batches(100, 7, 42, true).unwrap();
        assert_eq!(a, b);
        let mut seen: Vec<usize> = a.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());

        let c = make_batches(100, 7, 43, true).unwrap();
        assert_ne!(b, c);
        assert!(make_batches(5, 0, 0, false).is_err());
    }
}
