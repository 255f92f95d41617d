//! Command-line interface for the alignment engine: synthetic data
//! generation, training, retrieval and binary evaluation, pair scoring,
//! similarity dumps, relation-candidate inspection, gradient checking, and
//! inference-weight sweeps.
//!
//! Exit codes: 0 success, 1 validation/config/usage error, 2 runtime
//! numerical failure.

use clap::{Parser, Subcommand};
use fgalign_core::checkpoint::Checkpoint;
use fgalign_core::components::relation_candidates;
use fgalign_core::config::{InferenceWeights, RunConfig};
use fgalign_core::error::{Error, Result};
use fgalign_core::inference::{
    component_similarity_matrix, eval_binary, eval_retrieval_encoded, retrieval_sets,
    ComponentKind, EncodedRecord, Engine, RetrievalReport,
};
use fgalign_core::ingest::{
    self, read_binary, read_record_file, read_records, write_binary, write_records,
    ComponentRecord,
};
use fgalign_core::matching::write_matrix_csv;
use fgalign_core::synth::{synth_attr_benchmark, synth_pairs, AttrSynthOptions, SynthOptions};
use fgalign_core::training::{pipeline_gradient_check, train_with, write_loss_log};
use std::fs;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fgalign",
    version,
    about = "Fine-grained cross-modal alignment over precomputed component embeddings"
)]
struct Cli {
    /// key=value configuration file (keys are RunConfig field names).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed override (shorthand for --set seed=N).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset (records + pairing files).
    SynthData {
        /// Number of image-text pairs.
        #[arg(long, default_value_t = 256)]
        pairs: usize,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        relations: Option<usize>,
        /// Component noise scale (expected noise-vector norm).
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Extra corruption applied to global vectors only.
        #[arg(long, default_value_t = 0.0)]
        global_noise: f64,
        /// Spread of component latents around the record topic.
        #[arg(long, default_value_t = fgalign_core::synth::DEFAULT_TOPIC_SPREAD)]
        topic_spread: f64,
        /// Also emit a binary caption-choice benchmark with this many
        /// triples; the paired data then uses the object+attribute world.
        #[arg(long, default_value_t = 0)]
        binary_triples: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the alignment heads on a paired dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Recall@K retrieval evaluation.
    EvalRetrieval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        alpha2: Option<f64>,
        #[arg(long)]
        beta1: Option<f64>,
        /// Optional CSV report path.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Binary caption-choice accuracy.
    EvalBinary {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        alpha2: Option<f64>,
        #[arg(long)]
        beta1: Option<f64>,
    },
    /// Score one image/text pair and print the breakdown.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        text_id: String,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        alpha2: Option<f64>,
        #[arg(long)]
        beta1: Option<f64>,
    },
    /// Dump the encoded component cosine matrix of one pair as CSV.
    DumpSimilarity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        text_id: String,
        /// entity or relation
        #[arg(long, default_value = "entity")]
        kind: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// List the top-scored relation candidate boxes of an image record.
    RelationCandidates {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: String,
        /// How many candidates to keep.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Check full-pipeline gradients against central differences.
    GradCheck {
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        relations: Option<usize>,
    },
    /// Grid-sweep the inference weights, reporting R@1 per point as CSV.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.05,0.1,0.2")]
        alpha1: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.033,0.1")]
        alpha2: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.33,0.66")]
        beta1: Vec<f64>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn weights_from(
    cfg: &RunConfig,
    alpha1: Option<f64>,
    alpha2: Option<f64>,
    beta1: Option<f64>,
) -> InferenceWeights {
    let base = cfg.inference_weights();
    InferenceWeights {
        alpha1: alpha1.unwrap_or(base.alpha1),
        alpha2: alpha2.unwrap_or(base.alpha2),
        beta1: beta1.unwrap_or(base.beta1),
    }
}

fn find_record<'a>(records: &'a [ComponentRecord], id: &str) -> Result<&'a ComponentRecord> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::config(format!("no record with id {id:?}")))
}

fn encode_gallery(engine: &Engine, records: &[ComponentRecord]) -> Result<Vec<EncodedRecord>> {
    records.iter().map(|r| engine.encode_record(r)).collect()
}

fn print_report(report: &RetrievalReport) {
    let header: Vec<String> = report.ks.iter().map(|k| format!("R@{k}")).collect();
    println!("direction  {}", header.join("     "));
    let row = |name: &str, vals: &[f64]| {
        let cells: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
        println!("{name:<10} {}", cells.join("   "));
    };
    row("i2t", &report.i2t);
    row("t2i", &report.t2i);
}

fn report_csv(report: &RetrievalReport) -> String {
    let mut out = String::from("direction,k,recall\n");
    for (i, k) in report.ks.iter().enumerate() {
        out.push_str(&format!("i2t,{k},{}\n", report.i2t[i]));
    }
    for (i, k) in report.ks.iter().enumerate() {
        out.push_str(&format!("t2i,{k},{}\n", report.t2i[i]));
    }
    out
}

fn run(cli: Cli) -> Result<i32> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::SynthData {
            pairs,
            dim,
            entities,
            relations,
            noise,
            global_noise,
            topic_spread,
            binary_triples,
            out,
        } => {
            let dim = dim.unwrap_or(config.dim);
            let n_entities = entities.unwrap_or(config.n_entities);
            let m_relations = relations.unwrap_or(config.m_relations);
            if binary_triples > 0 {
                let (train, bench) = synth_attr_benchmark(&AttrSynthOptions {
                    train_pairs: pairs,
                    triples: binary_triples,
                    dim,
                    n_entities,
                    m_relations,
                    noise_sigma: noise,
                    global_noise_sigma: global_noise,
                    seed: config.seed,
                })?;
                write_records(&train, &out)?;
                write_binary(&bench, &out)?;
                println!(
                    "wrote {} train pairs and {} binary triples to {}",
                    train.len(),
                    bench.len(),
                    out.display()
                );
            } else {
                let dataset = synth_pairs(&SynthOptions {
                    count: pairs,
                    dim,
                    n_entities,
                    m_relations,
                    noise_sigma: noise,
                    global_noise_sigma: global_noise,
                    seed: config.seed,
                    topic_spread,
                })?;
                write_records(&dataset, &out)?;
                println!("wrote {} pairs to {}", dataset.len(), out.display());
            }
            Ok(0)
        }
        Command::Train { data, out } => {
            let dataset = read_records(&data)?;
            let mut config = config;
            // Take the geometry from the dataset header unless the user
            // pinned it; a true mismatch still errors inside train().
            if cli.config.is_none()
                && !cli.sets.iter().any(|s| {
                    s.starts_with("dim=")
                        || s.starts_with("n_entities=")
                        || s.starts_with("m_relations=")
                })
            {
                config.dim = dataset.dim;
                config.n_entities = dataset.n_entities;
                config.m_relations = dataset.m_relations;
            }
            fs::create_dir_all(&out)?;
            let outcome = train_with(&dataset, &config, |stats, ckpt| {
                ckpt.save(&out.join(format!("epoch_{:04}.json", stats.epoch)))?;
                println!(
                    "epoch {:>4}  lr {:.3e}  loss {:.6}",
                    stats.epoch, stats.lr, stats.total
                );
                Ok(())
            })?;
            outcome.last.save(&out.join("last.json"))?;
            outcome.best.save(&out.join("best.json"))?;
            let mut log = fs::File::create(out.join("loss_log.csv"))?;
            write_loss_log(&mut log, &outcome.log)?;
            log.flush()?;
            println!(
                "done: best epoch {} (dataset loss {:.6}); checkpoints in {}",
                outcome.best_epoch,
                outcome.best.final_loss,
                out.display()
            );
            Ok(0)
        }
        Command::EvalRetrieval {
            data,
            checkpoint,
            ks,
            alpha1,
            alpha2,
            beta1,
            out,
        } => {
            let engine = Engine::new(Checkpoint::load(&checkpoint)?)?;
            let weights = weights_from(&engine.config, alpha1, alpha2, beta1);
            let dataset = read_records(&data)?;
            let (images, texts, pairs) = retrieval_sets(&dataset);
            let enc_imgs = encode_gallery(&engine, &images)?;
            let enc_txts = encode_gallery(&engine, &texts)?;
            let report =
                eval_retrieval_encoded(&engine, &enc_imgs, &enc_txts, &pairs, &weights, &ks)?;
            print_report(&report);
            if let Some(path) = out {
                fs::write(&path, report_csv(&report))?;
                println!("report written to {}", path.display());
            }
            Ok(0)
        }
        Command::EvalBinary {
            data,
            checkpoint,
            alpha1,
            alpha2,
            beta1,
        } => {
            let engine = Engine::new(Checkpoint::load(&checkpoint)?)?;
            let weights = weights_from(&engine.config, alpha1, alpha2, beta1);
            let bench = read_binary(&data)?;
            let acc = eval_binary(&engine, &bench, &weights)?;
            println!("binary accuracy: {acc:.4} over {} triples", bench.len());
            Ok(0)
        }
        Command::Score {
            data,
            checkpoint,
            image_id,
            text_id,
            alpha1,
            alpha2,
            beta1,
        } => {
            let engine = Engine::new(Checkpoint::load(&checkpoint)?)?;
            let weights = weights_from(&engine.config, alpha1, alpha2, beta1);
            let (_, _, _, records) = read_record_file(&data.join(ingest::RECORDS_FILE))?;
            let image = find_record(&records, &image_id)?;
            let text = find_record(&records, &text_id)?;
            let s = engine.score_pair(image, text, &weights)?;
            println!("base_global      {:+.6}", s.base_global);
            println!(
                "entity   i2t/t2i {:+.6} {:+.6}",
                s.fine.entity_i2t, s.fine.entity_t2i
            );
            println!(
                "relation i2t/t2i {:+.6} {:+.6}",
                s.fine.relation_i2t, s.fine.relation_t2i
            );
            println!("global (encoded) {:+.6}", s.fine.global);
            println!("score    i2t/t2i {:+.6} {:+.6}", s.i2t, s.t2i);
            Ok(0)
        }
        Command::DumpSimilarity {
            data,
            checkpoint,
            image_id,
            text_id,
            kind,
            out,
        } => {
            let engine = Engine::new(Checkpoint::load(&checkpoint)?)?;
            let kind: ComponentKind = kind.parse()?;
            let (_, _, _, records) = read_record_file(&data.join(ingest::RECORDS_FILE))?;
            let image = find_record(&records, &image_id)?;
            let text = find_record(&records, &text_id)?;
            let m = component_similarity_matrix(&engine, image, text, kind)?;
            let mut f = fs::File::create(&out)?;
            write_matrix_csv(&mut f, &m)?;
            f.flush()?;
            println!(
                "wrote {}x{} similarity matrix to {}",
                m.shape()[0],
                m.shape()[1],
                out.display()
            );
            Ok(0)
        }
        Command::RelationCandidates {
            data,
            image_id,
            top,
        } => {
            let (_, _, _, records) = read_record_file(&data.join(ingest::RECORDS_FILE))?;
            let record = find_record(&records, &image_id)?;
            let boxes = record.boxes.clone().ok_or_else(|| {
                Error::config(format!("record {image_id:?} carries no detection boxes"))
            })?;
            let candidates = relation_candidates(&boxes, top);
            println!("subject,object,score,x1,y1,x2,y2");
            for c in &candidates {
                println!(
                    "{},{},{:.6},{},{},{},{}",
                    c.subject_index,
                    c.object_index,
                    c.score,
                    c.boxed.x1,
                    c.boxed.y1,
                    c.boxed.x2,
                    c.boxed.y2
                );
            }
            Ok(0)
        }
        Command::GradCheck {
            batch,
            eps,
            threshold,
            dim,
            entities,
            relations,
        } => {
            let mut config = config;
            if let Some(d) = dim {
                config.dim = d;
            }
            if let Some(n) = entities {
                config.n_entities = n;
            }
            if let Some(m) = relations {
                config.m_relations = m;
            }
            // Full Xavier scale exercises non-degenerate activations
            // regardless of the training default.
            config.residual_scale = 1.0;
            let err = pipeline_gradient_check(&config, batch, eps)?;
            println!("max_rel_err {err:.6e}");
            if err < threshold {
                Ok(0)
            } else {
                eprintln!("gradient check failed the {threshold:.1e} threshold");
                Ok(2)
            }
        }
        Command::Sweep {
            data,
            checkpoint,
            alpha1,
            alpha2,
            beta1,
            out,
        } => {
            let engine = Engine::new(Checkpoint::load(&checkpoint)?)?;
            let dataset = read_records(&data)?;
            let (images, texts, pairs) = retrieval_sets(&dataset);
            let enc_imgs = encode_gallery(&engine, &images)?;
            let enc_txts = encode_gallery(&engine, &texts)?;
            let mut csv = String::from("alpha1,alpha2,beta1,i2t_r1,t2i_r1\n");
            for &a1 in &alpha1 {
                for &a2 in &alpha2 {
                    for &b1 in &beta1 {
                        let w = InferenceWeights {
                            alpha1: a1,
                            alpha2: a2,
                            beta1: b1,
                        };
                        let report =
                            eval_retrieval_encoded(&engine, &enc_imgs, &enc_txts, &pairs, &w, &[1])?;
                        csv.push_str(&format!(
                            "{a1},{a2},{b1},{},{}\n",
                            report.i2t[0], report.t2i[0]
                        ));
                    }
                }
            }
            fs::write(&out, csv)?;
            println!(
                "swept {} grid points; results in {}",
                alpha1.len() * alpha2.len() * beta1.len(),
                out.display()
            );
            Ok(0)
        }
    }
}
