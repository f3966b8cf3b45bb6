use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use pmr_core::anonymizer::{AnonymizationManifest, MANIFEST_FILE};
use pmr_core::dataset::{parse_ntu_file, Corpus, SkeletonSequence, SkeletonTopology, Split};
use pmr_core::evaluation::{
    evaluate_outputs, evenly_spaced, export_embeddings, render_frames, sweep_csv, tradeoff_sweep, Bounds,
    EvaluationSummary, Probes,
};
use pmr_core::training::read_checkpoint;
use pmr_core::Error;

use crate::config::RunConfig;
use crate::UsageError;

pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

#[derive(clap::Args)]
pub struct Args {
    /// Corpus manifest; overrides `corpus.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory of `pmr anonymize`; repeat to compare policies.
    #[arg(long)]
    anonymized: Vec<PathBuf>,
    /// Model checkpoint whose held-out embeddings are exported.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated `alpha_emb` values; trains and scores one model each.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    /// Sequence identifier whose original and anonymized frames are drawn.
    #[arg(long)]
    render: Option<String>,
    /// Number of evenly spaced frames to draw.
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Print the attacker's accuracy on shuffled actor labels next to chance.
    #[arg(long)]
    chance_check: bool,
    /// Output directory; defaults to `<output_root>/evaluate`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An anonymized corpus read back from disk.
struct Anonymized {
    policy: String,
    manifest: AnonymizationManifest,
    outputs: Vec<SkeletonSequence>,
}

fn read_anonymized(dir: &Path, topology: &SkeletonTopology) -> Result<Anonymized> {
    let manifest = AnonymizationManifest::read(&dir.join(MANIFEST_FILE))?;
    let policy = match RunConfig::read_from(dir) {
        Ok(c) => c.anonymize.policy.name().to_string(),
        Err(_) => dir.file_name().map_or("anonymized".into(), |n| n.to_string_lossy().into_owned()),
    };
    let outputs = manifest
        .records
        .iter()
        .map(|r| parse_ntu_file(&dir.join(&r.output), topology))
        .collect::<pmr_core::Result<Vec<_>>>()?;
    Ok(Anonymized {
        policy,
        manifest,
        outputs,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn run(mut cfg: RunConfig, args: Args) -> Result<()> {
    let index = cfg.corpus_index(args.manifest)?;
    let topology = cfg.topology()?;
    let out = cfg.output_dir(args.out, "evaluate");
    cfg.write_into(&out)?;
    if args.render.is_some() && args.frames == 0 {
        bail!(UsageError("--frames must be positive".into()));
    }
    let corpus = Corpus::load(&index, &topology, &cfg.preprocess)?;
    let anonymized = args
        .anonymized
        .iter()
        .map(|d| read_anonymized(d, &topology))
        .collect::<Result<Vec<_>>>()?;

    let train = corpus.subset(Split::Train);
    let heldout = corpus.subset(Split::Eval);
    let probes = Probes::train(&train, &heldout, &cfg.experiment.probes)?;
    let b = &probes.baseline;
    println!(
        "attacker on originals: top-1 {:.3}, top-{} {:.3}; action classifier top-1 {:.3}",
        b.attacker_top1, b.k, b.attacker_topk, b.action_top1
    );
    if args.chance_check {
        println!(
            "attacker on shuffled actor labels: top-1 {:.3} (chance {:.3})",
            b.shuffled_label_top1, b.chance
        );
    }

    let mut summary = EvaluationSummary {
        baseline: probes.baseline.clone(),
        reports: Vec::new(),
    };
    for a in &anonymized {
        let report = evaluate_outputs(&a.policy, &corpus, &a.manifest, &a.outputs, &probes.attacker, &probes.action)?;
        println!(
            "{}: mse {:.5} (vs. original {:.5}), re-id top-1 {:.3}, top-{} {:.3}, action top-1 {:.3}",
            report.policy,
            report.utility_mse,
            report.utility_mse_original,
            report.reid_top1,
            report.k,
            report.reid_topk,
            report.action_top1
        );
        summary.reports.push(report);
    }
    write_json(&out.join(REPORT_FILE), &summary)?;

    if let Some(ckpt) = &args.checkpoint {
        let state = read_checkpoint(ckpt, None)?;
        let table = export_embeddings(&state.params, &heldout, &out.join(EMBEDDINGS_FILE))?;
        write_json(&out.join("silhouettes.json"), &table.silhouettes()?)?;
        println!("embeddings: {}", out.join(EMBEDDINGS_FILE).display());
    }

    if let Some(id) = &args.render {
        let original = corpus
            .find(id)
            .ok_or_else(|| Error::ManifestMismatch(format!("{id} is not in the corpus")))?;
        let mut views = vec![("original".to_string(), original)];
        for a in &anonymized {
            if let Some(i) = a.manifest.records.iter().position(|r| &r.original == id) {
                views.push((a.policy.clone(), &a.outputs[i]));
            }
        }
        let seqs: Vec<&SkeletonSequence> = views.iter().map(|(_, s)| *s).collect();
        let bounds = Bounds::covering(&seqs);
        let frames = evenly_spaced(original.frames(), args.frames);
        let dir = out.join("render");
        for (name, seq) in &views {
            render_frames(seq, &topology, &frames, &bounds, &dir, &format!("{id}_{name}"))?;
        }
        println!("frames: {}", dir.display());
    }

    if let Some(alphas) = &args.sweep {
        if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            bail!(UsageError("--sweep takes non-negative numbers".into()));
        }
        let (rows, _) = tradeoff_sweep(&corpus, &topology, &cfg.experiment, &probes, alphas)?;
        let csv = sweep_csv(&rows);
        let path = out.join(SWEEP_FILE);
        fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
        print!("{csv}");
    }
    Ok(())
}
