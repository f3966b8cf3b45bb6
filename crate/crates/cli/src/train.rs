use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use pmr_core::dataset::{Corpus, LabelMap, Split};
use pmr_core::training::{checkpoint, read_checkpoint, StageId, TrainData, TrainState, Trainer};
use pmr_core::Error;

use crate::config::RunConfig;
use crate::UsageError;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST: &str = "latest.ckpt";
pub const MODEL: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.jsonl";
pub const HISTORY_FILE: &str = "history.json";

#[derive(clap::Args)]
pub struct Args {
    /// Corpus manifest; overrides `corpus.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated stages to run, e.g. `pretrain_ae,pretrain_cls`.
    #[arg(long, value_delimiter = ',', conflicts_with = "resume")]
    stages: Option<Vec<String>>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also keep a checkpoint after every epoch under `checkpoints/epochs`.
    #[arg(long)]
    keep_epochs: bool,
    /// Output directory; defaults to `<output_root>/train`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Writes through a temporary file so an interrupted write never leaves a
/// truncated checkpoint behind.
fn save(state: &TrainState, path: &Path) -> pmr_core::Result<()> {
    let bytes = checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::Io { path: tmp.clone(), source: e })?;
    fs::rename(&tmp, path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

pub fn run(mut cfg: RunConfig, args: Args) -> Result<()> {
    cfg.experiment.train.validate()?;
    if let Some(names) = &args.stages {
        let ids = names
            .iter()
            .map(|n| n.trim().parse::<StageId>())
            .collect::<pmr_core::Result<Vec<_>>>()
            .map_err(|e| UsageError(e.to_string()))?;
        cfg.experiment.plan = cfg.experiment.plan.restricted_to(&ids);
        if cfg.experiment.plan.stages.is_empty() {
            bail!(UsageError("--stages selects no stage of the plan".into()));
        }
    }
    let index = cfg.corpus_index(args.manifest)?;
    let topology = cfg.topology()?;
    let labels = LabelMap::from_index(&index);
    let exp = &mut cfg.experiment;
    exp.network.y_action = labels.actions.len();
    exp.network.y_actor = labels.actors.len();

    let mut state = match &args.resume {
        Some(path) => {
            let state = read_checkpoint(path, Some(&exp.network))?;
            if state.labels != labels {
                bail!(Error::ManifestMismatch(format!(
                    "{} was trained on different actors or actions",
                    path.display()
                )));
            }
            exp.plan = state.plan.clone();
            state
        }
        None => TrainState::new(&exp.network, labels, exp.plan.clone(), &exp.train)?,
    };

    let out = cfg.output_dir(args.out, "train");
    cfg.write_into(&out)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let epoch_dir = ckpt_dir.join("epochs");
    fs::create_dir_all(if args.keep_epochs { &epoch_dir } else { &ckpt_dir })
        .with_context(|| format!("creating {}", ckpt_dir.display()))?;

    let train = Corpus::load(&index.subset(Split::Train), &topology, &cfg.preprocess)?;
    let data = TrainData::new(&train, &topology, cfg.experiment.train.data_seed)?;
    let log_path = out.join(LOG_FILE);
    let log_file = if args.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);

    let latest = ckpt_dir.join(LATEST);
    let result = {
        let mut trainer = Trainer::new(&data, &cfg.experiment.train).with_log(&mut log);
        let mut on_epoch = |s: &TrainState| {
            save(s, &latest)?;
            if args.keep_epochs {
                let stage = s.current_stage().expect("stage in progress");
                let name = format!("{:02}_{}_e{:03}.ckpt", s.stage_index + 1, stage.label(), s.epoch);
                save(s, &epoch_dir.join(name))?;
            }
            Ok(())
        };
        let mut on_stage_end = |s: &TrainState, stage: &pmr_core::training::Stage| {
            let path = ckpt_dir.join(format!("{:02}_{}.ckpt", s.stage_index, stage.label()));
            save(s, &path)?;
            println!("stage {} done: {}", stage.label(), path.display());
            Ok(())
        };
        trainer.run_plan(&mut state, &mut on_epoch, &mut on_stage_end)
    };
    log.flush().context("flushing training log")?;
    if let Err(e) = result {
        if matches!(e, Error::Divergence { .. }) {
            match (latest.exists(), &args.resume) {
                (true, _) => eprintln!("last checkpoint: {}", latest.display()),
                (false, Some(r)) => eprintln!("last checkpoint: {}", r.display()),
                (false, None) => eprintln!("no checkpoint was written before the divergence"),
            }
        }
        return Err(e.into());
    }

    save(&state, &ckpt_dir.join(MODEL))?;
    let history = out.join(HISTORY_FILE);
    fs::write(&history, serde_json::to_string_pretty(&state.history)?)
        .with_context(|| format!("writing {}", history.display()))?;
    println!("model: {}", ckpt_dir.join(MODEL).display());
    Ok(())
}
