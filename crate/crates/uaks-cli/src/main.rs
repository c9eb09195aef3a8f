//! `uaks`: keyword search with acoustic-unit-discovery pretraining.
//!
//! Pipeline order: synth/prepare -> aud-train -> aud-label -> pseudo ->
//! pretrain -> finetune -> search -> score (plus nmi for unit quality).
//! Log level comes from the UAKS_LOG environment variable.

mod commands;
mod config;
mod manifest;
mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use pipeline::Stage;

#[derive(Parser)]
#[command(name = "uaks", version, about = "Keyword search with AUD pretraining")]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Pin to one worker thread (runs are bit-reproducible either way).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build evaluation queries and references from a transcribed corpus.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated n-gram orders.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3])]
        orders: Vec<usize>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        queries_out: PathBuf,
        #[arg(long)]
        refs_out: PathBuf,
    },
    /// Generate the deterministic synthetic corpus.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the phone-loop acoustic unit model with EM.
    AudTrain {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        /// Optional hyper-subspace container to realize the initial units.
        #[arg(long)]
        hyper_subspace: Option<PathBuf>,
        /// Unit embedding dimension when --hyper-subspace is given.
        #[arg(long, default_value_t = 100)]
        unit_embed_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Viterbi-label features into acoustic unit transcripts.
    AudLabel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract pseudo-words and build the pretraining index.
    Pseudo {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out_index: PathBuf,
        #[arg(long)]
        out_occurrences: PathBuf,
    },
    /// Pretrain the dual encoder on pseudo-queries.
    Pretrain {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        occurrences: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Finetune on transcribed data (from a checkpoint or from scratch).
    Finetune {
        /// Pretrained checkpoint; omit to train from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, requires = "refs")]
        queries: Option<PathBuf>,
        #[arg(long, requires = "queries")]
        refs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Locate queries in a corpus and emit scored hypotheses.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against references (TWV/MTWV/ATWV, bootstrap CI).
    Score {
        #[arg(long)]
        hits: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Evaluated speech duration T in seconds; defaults to the hits
        /// file header.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, conflicts_with = "sweep")]
        threshold: Option<f64>,
        /// Sweep thresholds for the MTWV (default when no threshold given).
        #[arg(long)]
        sweep: bool,
        /// Number of bootstrap resamples for the ATWV interval.
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized mutual information between unit and phone transcripts.
    Nmi {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        phones: PathBuf,
    },
    /// Run the staged recipe end to end with artifact stamping.
    Pipeline {
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated stage subset (default: all stages in order).
        #[arg(long, value_delimiter = ',')]
        stages: Vec<Stage>,
        /// Rebuild even when artifacts disagree with their stamps.
        #[arg(long)]
        force: bool,
        /// Print the normalized config and exit.
        #[arg(long)]
        print_config: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UAKS_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.jobs
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    let cfg = config::validate_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    log::debug!("normalized config:\n{}", cfg.normalized()?);

    let summary = match cli.command {
        Command::Prepare {
            manifest,
            orders,
            count,
            queries_out,
            refs_out,
        } => commands::cmd_prepare(&manifest, &orders, count, seed, &queries_out, &refs_out)?,
        Command::Synth { out_dir } => commands::cmd_synth(&cfg, seed, &out_dir)?,
        Command::AudTrain {
            features,
            units,
            iters,
            hyper_subspace,
            unit_embed_dim,
            out,
        } => commands::cmd_aud_train(
            &cfg,
            &features,
            units,
            iters,
            seed,
            hyper_subspace.as_deref(),
            unit_embed_dim,
            &out,
        )?,
        Command::AudLabel {
            model,
            features,
            out,
        } => commands::cmd_aud_label(&model, &features, &out)?,
        Command::Pseudo {
            transcripts,
            features,
            out_index,
            out_occurrences,
        } => commands::cmd_pseudo(&cfg, &transcripts, &features, seed, &out_index, &out_occurrences)?,
        Command::Pretrain {
            index,
            occurrences,
            features,
            out,
            trace,
        } => commands::cmd_pretrain(
            &cfg,
            &index,
            &occurrences,
            &features,
            seed,
            &out,
            trace.as_deref(),
        )?,
        Command::Finetune {
            init,
            corpus,
            queries,
            refs,
            out,
            trace,
        } => commands::cmd_finetune(
            &cfg,
            init.as_deref(),
            &corpus,
            queries.as_deref(),
            refs.as_deref(),
            seed,
            &out,
            trace.as_deref(),
        )?,
        Command::Search {
            ckpt,
            queries,
            features,
            top_k,
            out,
        } => commands::cmd_search(&cfg, &ckpt, &queries, &features, top_k, &out)?,
        Command::Score {
            hits,
            refs,
            duration,
            beta,
            threshold,
            sweep,
            bootstrap,
            out,
        } => commands::cmd_score(
            &cfg,
            &hits,
            &refs,
            duration,
            beta,
            threshold,
            sweep,
            bootstrap,
            seed,
            out.as_deref(),
        )?,
        Command::Nmi { units, phones } => commands::cmd_nmi(&units, &phones)?,
        Command::Pipeline {
            out_dir,
            stages,
            force,
            print_config,
        } => {
            if print_config {
                println!("{}", cfg.normalized()?);
                return Ok(());
            }
            pipeline::run_pipeline(&cfg, seed, &out_dir, &stages, force)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
