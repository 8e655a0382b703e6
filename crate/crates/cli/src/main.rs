use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metacodec::checkpoint;
use metacodec_cli::io::{load_png, png_files, save_png};
use metacodec_cli::report::write_csv;
use metacodec_cli::sweep::sweep_image;
use metacodec_cli::{
    compress, decompress, evaluate, CodebookSet, CodecBank, CompressOptions, PipelineError, RateTarget, Result,
    BANK_PRESETS,
};
use metacodec_train::{
    build_bias_clusters, extract_patches, meta_finetune, train_stage1, write_log_csv, SessionConfig,
};

#[derive(Parser)]
#[command(name = "metacodec", version, about = "Learned image codec with rate control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one codec of the bank from scratch.
    Train {
        /// Bank preset index (0 = highest rate).
        #[arg(long, default_value_t = 0)]
        preset: usize,
        /// Directory of training PNGs.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML session config; preset rate weight and defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Meta fine-tune a trained checkpoint through the latent adaptation loop.
    MetaFinetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use the first-order approximation.
        #[arg(long)]
        first_order: bool,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Cluster per-patch decoder biases for every codec of a bank.
    BuildBiasClusters {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Compress a PNG to a target bitrate.
    Compress {
        #[arg(long)]
        target_bpp: f64,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value_t = metacodec_cli::pipeline::DEFAULT_MARGIN)]
        margin: f64,
        #[arg(long, default_value_t = metacodec_cli::pipeline::DEFAULT_OVERFIT_BUDGET)]
        overfit_budget: usize,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decompress a container to a PNG.
    Decompress {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        input: PathBuf,
        output: PathBuf,
    },
    /// Quality metrics of a reconstruction, as one CSV row on stdout.
    Eval {
        original: PathBuf,
        reconstructed: PathBuf,
        /// Container whose size gives the bitrate.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Compress every image of a directory at the eight sweep targets.
    Sweep {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = metacodec_cli::pipeline::DEFAULT_MARGIN)]
        margin: f64,
        #[arg(long, default_value_t = metacodec_cli::pipeline::DEFAULT_OVERFIT_BUDGET)]
        overfit_budget: usize,
    },
}

fn session(path: Option<&Path>) -> Result<SessionConfig> {
    Ok(match path {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    })
}

fn load_images(dir: &Path) -> Result<Vec<metacodec::ImageTensor>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(PipelineError::Image(format!("no PNG files in {}", dir.display())));
    }
    files.iter().map(|f| load_png(f)).collect()
}

fn load_codebooks(path: Option<&Path>, bank: &CodecBank) -> Result<Option<CodebookSet>> {
    path.map(|p| {
        let set = CodebookSet::load(p)?;
        set.validate(bank)?;
        Ok(set)
    })
    .transpose()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { preset, data, out, config, epochs, seed, log } => {
            let p = BANK_PRESETS
                .get(preset)
                .ok_or_else(|| PipelineError::Bank(format!("no preset {preset}; 0..{}", BANK_PRESETS.len())))?;
            let mut s = session(config.as_deref())?;
            if config.is_none() {
                s.weights = p.weights();
            }
            if let Some(e) = epochs {
                s.train.epochs = e;
            }
            if let Some(seed) = seed {
                s.train.seed = seed;
            }
            let patches = extract_patches(&load_images(&data)?, s.train.patch_size, s.train.patch_stride);
            let model = p.init_model(preset, s.train.seed)?;
            let (trained, logs) = train_stage1(&model, &patches, &s.train, &s.weights)?;
            checkpoint::save(&trained, &out)?;
            if let Some(l) = log {
                write_log_csv(&l, &logs)?;
            }
        }
        Command::MetaFinetune { model, data, out, config, epochs, first_order, log } => {
            let mut s = session(config.as_deref())?;
            let m = checkpoint::load(&model)?;
            if config.is_none() {
                s.weights = metacodec_cli::BankEntry::new(m.clone())?.weights();
            }
            if let Some(e) = epochs {
                s.meta.epochs = e;
            }
            s.meta.second_order &= !first_order;
            let patches = extract_patches(&load_images(&data)?, s.train.patch_size, s.train.patch_stride);
            let (tuned, logs) = meta_finetune(&m, &patches, &s.meta, &s.weights)?;
            checkpoint::save(&tuned, &out)?;
            if let Some(l) = log {
                write_log_csv(&l, &logs)?;
            }
        }
        Command::BuildBiasClusters { models, data, out, config, clusters } => {
            let mut s = session(config.as_deref())?;
            if let Some(k) = clusters {
                s.bias.clusters = k;
            }
            let bank = CodecBank::load(&models)?;
            let patches = extract_patches(&load_images(&data)?, s.train.patch_size, s.train.patch_stride);
            let mut set = CodebookSet::default();
            for (i, e) in bank.entries.iter().enumerate() {
                let book = build_bias_clusters(&patches, &e.model, &s.bias, &e.weights())?;
                set.books.insert(i as u8, book);
            }
            set.save(&out)?;
        }
        Command::Compress { target_bpp, models, codebook, margin, overfit_budget, input, output } => {
            let bank = CodecBank::load(&models)?;
            let books = load_codebooks(codebook.as_deref(), &bank)?;
            let opts = CompressOptions { overfit_budget, ..Default::default() };
            let c = compress(&load_png(&input)?, &RateTarget { target_bpp, margin }, &bank, books.as_ref(), &opts)?;
            checkpoint::write_atomic(&output, &c.bytes)?;
            let summary = serde_json::json!({
                "bpp": c.bpp,
                "codec": c.bitstream.codec_id,
                "bits": c.bitstream.bits,
                "best_effort": c.bitstream.best_effort,
                "trials": c.trials.len(),
            });
            println!("{summary}");
        }
        Command::Decompress { models, codebook, input, output } => {
            let bank = CodecBank::load(&models)?;
            let books = load_codebooks(codebook.as_deref(), &bank)?;
            let x = decompress(&std::fs::read(&input)?, &bank, books.as_ref())?;
            save_png(&output, &x)?;
        }
        Command::Eval { original, reconstructed, stream } => {
            let (x, y) = (load_png(&original)?, load_png(&reconstructed)?);
            let mut rec = match &stream {
                Some(s) => {
                    let bytes = std::fs::read(s)?;
                    let payload = metacodec::entropy::Bitstream::parse(&bytes)?.payload.len() as u64 * 8;
                    evaluate(&x, &y, 8 * bytes.len() as u64)?.with_payload(payload)
                }
                None => evaluate(&x, &y, 0)?,
            };
            rec.image_id = stem(&original);
            print!("{}", String::from_utf8_lossy(&metacodec_cli::report::csv_bytes(&[rec])?));
        }
        Command::Sweep { models, codebook, data, out, margin, overfit_budget } => {
            let bank = CodecBank::load(&models)?;
            let books = load_codebooks(codebook.as_deref(), &bank)?;
            let opts = CompressOptions { overfit_budget, ..Default::default() };
            let mut rows = Vec::new();
            for f in png_files(&data)? {
                rows.extend(sweep_image(&stem(&f), &load_png(&f)?, &bank, books.as_ref(), margin, &opts)?);
            }
            write_csv(&out, &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
