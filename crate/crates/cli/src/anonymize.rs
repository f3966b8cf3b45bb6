use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::Result;

use pmr_core::anonymizer::{anonymize_corpus, default_constant_dummy, dummy_pool, DummyPolicy};
use pmr_core::dataset::{Corpus, Split};
use pmr_core::training::read_checkpoint;

use crate::config::{PolicyKind, RunConfig, SplitChoice};

#[derive(clap::Args)]
pub struct Args {
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus manifest; overrides `corpus.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides `anonymize.policy`.
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Constant dummy identifier; overrides `experiment.constant_dummy`.
    #[arg(long)]
    dummy: Option<String>,
    /// Random-dummy seed; overrides `experiment.random_dummy_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `anonymize.split`.
    #[arg(long, value_enum)]
    split: Option<SplitChoice>,
    /// Output directory; defaults to `<output_root>/anonymize/<policy>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(mut cfg: RunConfig, args: Args) -> Result<()> {
    if let Some(p) = args.policy {
        cfg.anonymize.policy = p;
    }
    if let Some(s) = args.split {
        cfg.anonymize.split = s;
    }
    if let Some(d) = args.dummy {
        cfg.experiment.constant_dummy = Some(d);
    }
    if let Some(s) = args.seed {
        cfg.experiment.random_dummy_seed = s;
    }
    let state = read_checkpoint(&args.checkpoint, None)?;
    let index = cfg.corpus_index(args.manifest)?;
    let topology = cfg.topology()?;
    let corpus = Corpus::load(&index, &topology, &cfg.preprocess)?;
    let inputs = match cfg.anonymize.split.split() {
        Some(s) => corpus.subset(s),
        None => corpus.clone(),
    };
    // Actors an attacker trained on the train split knows.
    let attack_actors: BTreeSet<u32> = index.subset(Split::Train).actors();
    let policy = match cfg.anonymize.policy {
        PolicyKind::Constant => {
            let id = match &cfg.experiment.constant_dummy {
                Some(id) => id.clone(),
                None => default_constant_dummy(&inputs.index, &attack_actors)?,
            };
            cfg.experiment.constant_dummy = Some(id.clone());
            DummyPolicy::constant(id, corpus)?
        }
        PolicyKind::Random => DummyPolicy::random(cfg.experiment.random_dummy_seed, dummy_pool(&inputs, &attack_actors))?,
    };

    let out = cfg.output_dir(args.out, &format!("anonymize/{}", cfg.anonymize.policy.name()));
    cfg.write_into(&out)?;
    let (manifest_path, manifest, _) = anonymize_corpus(&state.params, &inputs, &policy, &out)?;
    println!(
        "anonymized {} sequences with {} dummies ({} policy)",
        manifest.records.len(),
        manifest.dummies().len(),
        cfg.anonymize.policy.name()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}
