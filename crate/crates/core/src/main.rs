use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vidcap::afs::{build_cdf, frame_dissimilarity, select_frames, Metric, SelectionReport};
use vidcap::decoder::{GenerationRequest, Strategy};
use vidcap::harness::{
    evaluate_records, generate_synthetic_dataset, score_predictions, Prediction, SyntheticSpec,
    TrainConfig, TrainedModel, Trainer,
};
use vidcap::text::{build_concept_vocabulary, build_vocab, read_jsonl, write_jsonl, CaptionRecord};
use vidcap::video::VideoClip;
use vidcap::{Error, Result};

#[derive(Parser)]
#[command(name = "vidcap", version, about = "Desk-scale video captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-shape corpus.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adaptive frame selection on one video.
    Afs {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value = "mad")]
        metric: Metric,
        #[arg(long)]
        dedupe: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word and concept vocabularies from the training split of a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        concepts: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `DIR/corpus.jsonl` and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Progress line every N steps on stderr (0: quiet).
        #[arg(long, default_value_t = 0)]
        progress: usize,
    },
    /// Caption one video.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Caption and score every video of a corpus file.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Predictions file; defaults to `<out stem>.predictions.jsonl`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        pos_histogram: bool,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score stored predictions against references.
    Score {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pos_histogram: bool,
    },
}

#[derive(Args)]
struct DecodeArgs {
    /// beam, greedy, topk or topp.
    #[arg(long, default_value = "beam")]
    decode: Strategy,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0.95)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.0)]
    length_penalty: f64,
}

impl DecodeArgs {
    fn request(&self) -> GenerationRequest {
        GenerationRequest {
            strategy: self.decode,
            beam_width: self.beam,
            k: self.k,
            p: self.p,
            temperature: self.temperature,
            max_len: self.max_len,
            seed: self.seed,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(serde::Serialize)]
struct VocabDocument<'a> {
    words: &'a [String],
    concepts: &'a [String],
    concept_counts: &'a [usize],
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { spec, out } => {
            let spec: SyntheticSpec = read_json(&spec)?;
            let records = generate_synthetic_dataset(&spec, &out)?;
            eprintln!("wrote {} videos to {}", records.len(), out.display());
        }
        Command::Afs {
            video,
            frames,
            metric,
            dedupe,
            out,
        } => {
            let clip = VideoClip::load(&video)?;
            let cdf = build_cdf(&frame_dissimilarity::<f64>(&clip, metric)?)?;
            let sel = select_frames(&cdf, frames, dedupe)?;
            write_json(&out, &SelectionReport::new(&cdf, &sel))?;
        }
        Command::BuildVocab {
            corpus,
            concepts,
            min_freq,
            out,
        } => {
            let records: Vec<CaptionRecord> = read_jsonl(&corpus)?;
            let vocab = build_vocab(&records, min_freq)?;
            let cv = build_concept_vocabulary(&records, concepts)?;
            write_json(
                &out,
                &VocabDocument {
                    words: vocab.words(),
                    concepts: &cv.words,
                    concept_counts: &cv.counts,
                },
            )?;
        }
        Command::Train {
            config,
            data,
            out,
            progress,
        } => {
            let config = TrainConfig::load(&config)?;
            let corpus: Vec<CaptionRecord> = read_jsonl(data.join("corpus.jsonl"))?;
            let mut trainer = Trainer::new(&config, &corpus, &data)?;
            trainer.progress = progress;
            trainer.run()?;
            let model = trainer.best_model();
            model.save(&out)?;
            write_jsonl(out.join("train_log.jsonl"), &trainer.log)?;
            eprintln!("saved step {} to {}", model.step, out.display());
        }
        Command::Caption {
            ckpt,
            video,
            decode,
        } => {
            let model = TrainedModel::load(&ckpt)?;
            let clip = VideoClip::load(&video)?;
            let (caption, _) = model.caption(&clip, &decode.request())?;
            println!("{caption}");
        }
        Command::Evaluate {
            ckpt,
            corpus,
            out,
            predictions,
            pos_histogram,
            decode,
        } => {
            let model = TrainedModel::load(&ckpt)?;
            let records: Vec<CaptionRecord> = read_jsonl(&corpus)?;
            let eval = evaluate_records(
                &model,
                &records,
                parent_dir(&corpus),
                &decode.request(),
                pos_histogram,
            )?;
            let preds_path = predictions.unwrap_or_else(|| {
                let stem = out
                    .file_stem()
                    .map_or("report".into(), |s| s.to_string_lossy().into_owned());
                parent_dir(&out).join(format!("{stem}.predictions.jsonl"))
            });
            write_json(&out, &eval.report)?;
            write_jsonl(&preds_path, &eval.predictions)?;
            for (id, msg) in &eval.errors {
                eprintln!("skipped {id}: {msg}");
            }
            if !eval.errors.is_empty() {
                eprintln!(
                    "partial evaluation: {} of {} items failed",
                    eval.errors.len(),
                    records.len()
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Score {
            preds,
            refs,
            train_corpus,
            out,
            pos_histogram,
        } => {
            let preds: Vec<Prediction> = read_jsonl(&preds)?;
            let refs: Vec<CaptionRecord> = read_jsonl(&refs)?;
            let train: Vec<CaptionRecord> = read_jsonl(&train_corpus)?;
            let report = score_predictions(&preds, &refs, &train, pos_histogram)?;
            write_json(&out, &report)?;
            if report.failed > 0 {
                eprintln!(
                    "partial scoring: {} references without a prediction",
                    report.failed
                );
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
