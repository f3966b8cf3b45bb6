use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};

use pmr_core::dataset::{generate_synthetic, scan_directory, PreprocessSummary, Split};

use crate::config::RunConfig;
use crate::UsageError;

pub const MANIFEST_FILE: &str = "corpus.tsv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(clap::Args)]
pub struct Args {
    /// Directory of NTU `.skeleton` files; overrides `corpus.raw_dir`.
    #[arg(long, conflicts_with = "synthetic")]
    raw: Option<PathBuf>,
    /// Generate the synthetic corpus described by `corpus.synthetic`.
    #[arg(long)]
    synthetic: bool,
    /// Output directory; defaults to `<output_root>/preprocess`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(mut cfg: RunConfig, args: Args) -> Result<()> {
    if let Some(raw) = args.raw {
        cfg.corpus.raw_dir = Some(raw);
    }
    let topology = cfg.topology()?;
    let (index, summary) = if args.synthetic {
        let s = &cfg.corpus.synthetic;
        let index = generate_synthetic(s.actors, s.actions, s.cameras, s.seed)?;
        let kept_train = index.subset(Split::Train).len();
        let summary = PreprocessSummary {
            kept: index.len(),
            kept_train,
            kept_eval: index.len() - kept_train,
            ..Default::default()
        };
        (index, summary)
    } else {
        let dir = cfg
            .corpus
            .raw_dir
            .clone()
            .ok_or_else(|| UsageError("no corpus given: pass --raw <dir> or --synthetic".into()))?;
        scan_directory(&dir, &topology, &cfg.preprocess)?
    };

    let out = cfg.output_dir(args.out, "preprocess");
    let manifest = out.join(MANIFEST_FILE);
    cfg.corpus.manifest = Some(manifest.clone());
    cfg.write_into(&out)?;
    index.write_manifest(&manifest)?;
    let summary_path = out.join(SUMMARY_FILE);
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", summary_path.display()))?;

    println!("files seen:            {}", summary.files_seen);
    println!("kept:                  {} (train {}, eval {})", summary.kept, summary.kept_train, summary.kept_eval);
    println!("multi-actor dropped:   {}", summary.multi_actor_dropped);
    println!("malformed dropped:     {}", summary.malformed_dropped);
    println!("denoise rejected:      {}", summary.denoise_rejected);
    println!("unused camera dropped: {}", summary.unused_camera_dropped);
    println!("manifest: {}", manifest.display());
    Ok(())
}
