use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dense_grounding::checkpoint::Checkpoint;
use dense_grounding::config::{Baseline, RunConfig};
use dense_grounding::eval::evaluate;
use dense_grounding::kv::KvMap;
use dense_grounding::manifest::{DatasetEntry, Manifest};
use dense_grounding::model::Model;
use dense_grounding::train::{TrainData, TrainState};
use dense_grounding::world::{generate_dataset, load_dataset, write_dataset, Vocab};

const ENV_PREFIX: &str = "DOG3D_";
const TRAIN_FILE: &str = "train.dogs";
const EVAL_FILE: &str = "eval.dogs";

/// Dense 3D visual grounding on synthetic rooms.
#[derive(Parser)]
#[command(name = "dog3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval datasets plus a manifest.
    Generate(Common),
    /// Run one training stage.
    Train(TrainArgs),
    /// Score a checkpoint and write reports.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; environment (`DOG3D_<KEY>`) and flags
    /// override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    ablate_cqg: bool,
    #[arg(long)]
    ablate_ae: bool,
    #[arg(long)]
    ablate_ai: bool,
    #[arg(long)]
    ablate_af: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    stage: u8,
    /// Directory holding the generated datasets.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    /// Defaults to `<out>/stage<N>.ckpt`.
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    /// Start stage 2 or 3 without the previous stage's checkpoint.
    #[arg(long)]
    from_scratch: bool,
    /// Stop after this many steps; resume later with `--ckpt-in`.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    ckpt_in: PathBuf,
    /// Comma-separated paragraph lengths, e.g. `2,4,8,12`.
    #[arg(long)]
    k_sweep: Option<String>,
    #[arg(long)]
    baseline: Option<Baseline>,
    /// Score the training set instead of the eval set.
    #[arg(long)]
    on_train: bool,
}

/// Config file, then `DOG3D_*` variables, then flags.
fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut kv = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            KvMap::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => KvMap::new(),
    };
    for key in RunConfig::keys() {
        if let Ok(v) = std::env::var(format!("{ENV_PREFIX}{}", key.to_uppercase())) {
            kv.set_raw(key, v);
        }
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    for (flag, key) in [
        (common.ablate_cqg, "use_cqg"),
        (common.ablate_ae, "use_ae"),
        (common.ablate_ai, "use_ai"),
        (common.ablate_af, "use_af"),
    ] {
        if flag {
            kv.set(key, false);
        }
    }
    for (k, v) in extra {
        kv.set_raw(k, v.clone());
    }
    Ok(RunConfig::from_kv(&kv)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(args: &Common) -> Result<()> {
    let cfg = load_config(args, &[])?;
    create_dir(&args.out)?;
    let mut entries = Vec::new();
    for (stream, world, file) in [("train", cfg.train_world.clone(), TRAIN_FILE), ("eval", cfg.eval_world(), EVAL_FILE)] {
        let ds = generate_dataset(cfg.seed, stream, &world).with_context(|| format!("generating {stream} set"))?;
        let bytes = write_dataset(&ds);
        write_file(&args.out.join(file), &bytes)?;
        entries.push(DatasetEntry::new(file, &bytes, &ds));
    }
    let eval = entries.pop().expect("two entries");
    let train = entries.pop().expect("two entries");
    let manifest = Manifest::new(&cfg, train, eval);
    write_file(&args.out.join("manifest.json"), manifest.to_json())?;
    write_file(&args.out.join("config.txt"), cfg.to_kv().to_text())?;
    println!("wrote {} ({} + {} paragraphs), config {}", args.out.display(), manifest.train.paragraphs, manifest.eval.paragraphs, manifest.config_hash);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common, &[])?;
    let dataset = load_dataset(args.data.join(TRAIN_FILE)).with_context(|| format!("loading {}", args.data.join(TRAIN_FILE).display()))?;
    let ckpt = args
        .ckpt_in
        .as_ref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()?;
    let mut state = TrainState::start(&cfg, args.stage, ckpt.as_ref(), args.from_scratch)?;
    let data = TrainData::new(&dataset, cfg.model.tokens)?;
    create_dir(&args.common.out)?;
    let log_path = args.common.out.join(format!("train_stage{}.jsonl", args.stage));
    let resuming = state.step > 0;
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let mut io_err = None;
    let every = cfg.train.log_every.max(1);
    state.run(&cfg, &data, args.max_steps, |rec| {
        if let Err(e) = serde_json::to_writer(&mut log, rec).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(log)?)) {
            io_err.get_or_insert(e);
        }
        if rec.step % every == 0 {
            eprintln!("stage {} step {} loss {:.5}", rec.stage, rec.step, rec.loss);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.context(format!("writing {}", log_path.display())));
    }
    log.flush()?;
    let out = args.ckpt_out.clone().unwrap_or_else(|| args.common.out.join(format!("stage{}.ckpt", args.stage)));
    state.checkpoint(&cfg).save(&out).with_context(|| format!("saving {}", out.display()))?;
    println!("stage {} at step {}/{}; checkpoint {}", state.stage, state.step, state.steps_total(&cfg), out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(ks) = &args.k_sweep {
        extra.push(("k_sweep", ks.clone()));
    }
    if let Some(b) = args.baseline {
        extra.push(("baseline", b.to_string()));
    }
    let cfg = load_config(&args.common, &extra)?;
    let file = if args.on_train { TRAIN_FILE } else { EVAL_FILE };
    let dataset = load_dataset(args.data.join(file)).with_context(|| format!("loading {}", args.data.join(file).display()))?;
    let ckpt = Checkpoint::load(&args.ckpt_in).with_context(|| format!("loading checkpoint {}", args.ckpt_in.display()))?;
    if !(1..=3).contains(&ckpt.stage) {
        bail!("checkpoint has invalid stage {}", ckpt.stage);
    }
    let mut model = Model::new(&cfg.model, Vocab::builtin().len(), cfg.seed);
    ckpt.load_into(&mut model.store).context("checkpoint does not fit the configured model")?;
    let report = evaluate(&model, &cfg, &dataset, &cfg.k_sweep, ckpt.stage == 3)?;
    create_dir(&args.common.out)?;
    write_file(&args.common.out.join("report.txt"), report.to_text())?;
    write_file(&args.common.out.join("report.json"), report.to_json())?;
    if let Some(svg) = report.to_svg() {
        write_file(&args.common.out.join("accuracy.svg"), svg)?;
    }
    for s in &report.sections {
        println!("{}: Acc@0.25 {:.4} Acc@0.5 {:.4} ({} sentences)", s.label(), s.overall.acc_25, s.overall.acc_50, s.overall.count);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
