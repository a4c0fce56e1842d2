//! Command-line front end. Every subcommand writes `config.txt` (the
//! resolved configuration, loadable with `--config`), `command.txt` and its
//! outputs into the `--out` directory and nowhere else.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rsmoe::ablate::{run_ablation, thread_count, AblationInput, Cell};
use rsmoe::checkpoint::{check_stage, Checkpoint};
use rsmoe::eval::evaluate;
use rsmoe::gradcheck::stage1_gradcheck;
use rsmoe::kv::KvMap;
use rsmoe::metrics::{EvalCorpus, MetricReport};
use rsmoe::model::{CaptionModel, StageTag};
use rsmoe::pretrain::{pretrain, Foundation};
use rsmoe::scene::{generate, reference_captions, Dataset, Sample};
use rsmoe::train::{run_onestage, run_stage1, run_stage2, RunConfig, RunLog, Strategy};
use rsmoe::Vocab;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "rsmoe", version, about = "Instruction-routed mixture-of-experts captioning on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random choice of the run; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Key-value file overriding the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the config echo, log and outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Data {
    /// Dataset file written by `synth`. Without it the dataset is generated
    /// from `data_seed`, `n_train` and `n_test`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its reference captions.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of scenes; defaults to n_train + n_test.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain the image encoder, query encoder and decoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// First stage: query encoder and single decoder.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Pretrained checkpoint; pretraining runs first when absent.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Second stage: experts and router from a stage1 checkpoint, or resume
    /// a stage2 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train every module together in one stage.
    TrainOnestage {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Caption one scene of the dataset.
    Caption {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_id: usize,
    },
    /// Score a checkpoint on the held-out split, or score caption files.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, conflicts_with_all = ["hyp", "refs"], required_unless_present = "hyp")]
        ckpt: Option<PathBuf>,
        /// Hypotheses, one `<id>\t<caption>` per line.
        #[arg(long, requires = "refs")]
        hyp: Option<PathBuf>,
        /// References, one or more `<id>\t<caption>` lines per id.
        #[arg(long, requires = "hyp")]
        refs: Option<PathBuf>,
    },
    /// Train and score the ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Seeds `seed, seed+1, ...`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// `all`, `directions`, or comma-separated labels such as `n3-router-two-stage`.
        #[arg(long, default_value = "directions")]
        cells: String,
    },
    /// Finite-difference check of the first-stage graph at tiny size.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Pretrain { common }
            | Command::TrainStage1 { common, .. }
            | Command::TrainStage2 { common, .. }
            | Command::TrainOnestage { common, .. }
            | Command::Caption { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let line = argv.iter().map(|a| a.to_string_lossy()).collect::<Vec<_>>().join(" ");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, &line) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

struct Run {
    out: PathBuf,
    cfg: RunConfig,
}

impl Run {
    fn start(common: &Common, argv: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_kv(&KvMap::parse(&text)?)?;
        }
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let run = Self {
            out: common.out.clone(),
            cfg,
        };
        run.write("command.txt", &format!("{argv}\n"))?;
        run.echo()?;
        Ok(run)
    }

    fn echo(&self) -> Result<()> {
        self.write("config.txt", &self.cfg.to_kv().to_text())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn samples(&self, data: &Data) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let ds = match &data.data {
            Some(p) => Dataset::load(p)?,
            None => generate(self.cfg.data_seed, self.cfg.n_train + self.cfg.n_test),
        };
        let (train, mut test) = ds.split(self.cfg.n_train);
        test.truncate(self.cfg.n_test);
        Ok((train, test))
    }

    /// Loads `--base`, or pretrains and saves `foundation.ckpt`.
    fn foundation(&mut self, base: Option<&Path>, log: &mut RunLog) -> Result<Foundation> {
        let vocab = Vocab::synthetic();
        match base {
            Some(p) => {
                let ckpt = Checkpoint::load(p)?;
                if ckpt.stage != StageTag::Pretrained {
                    bail!("{} holds a {} model, not a pretrained base", p.display(), ckpt.stage);
                }
                adopt_architecture(&mut self.cfg, &ckpt);
                self.echo()?;
                Ok(ckpt.foundation()?)
            }
            None => {
                let f = pretrain(&self.cfg.pretrain, &self.cfg.model, &vocab, log)?;
                Checkpoint::from_foundation(&f, &self.cfg.model, &vocab, self.cfg.seed)
                    .save(&self.path("foundation.ckpt"))?;
                Ok(f)
            }
        }
    }

    fn save_model(&self, model: &CaptionModel, vocab: &Vocab, log: &RunLog) -> Result<()> {
        self.write("log.tsv", &log.to_tsv())?;
        Checkpoint::from_model(model, vocab, self.cfg.seed).save(&self.path("model.ckpt"))?;
        if let Some(last) = log.entries.last() {
            println!("final loss {:.6} after {} steps", last.loss, log.entries.len());
        }
        println!("wrote {}", self.path("model.ckpt").display());
        Ok(())
    }
}

/// Keeps the run's expert count and takes every other architecture field
/// from the checkpoint.
fn adopt_architecture(cfg: &mut RunConfig, ckpt: &Checkpoint) {
    let experts = cfg.model.num_experts;
    cfg.model = ckpt.config.clone();
    cfg.model.num_experts = experts;
}

fn dispatch(command: Command, line: &str) -> Result<()> {
    let mut run = Run::start(command.common(), line)?;
    match command {
        Command::Synth { n, .. } => synth(&run, n),
        Command::Pretrain { .. } => {
            let mut log = RunLog::default();
            let _ = run.foundation(None, &mut log)?;
            run.write("log.tsv", &log.to_tsv())?;
            println!("wrote {}", run.path("foundation.ckpt").display());
            Ok(())
        }
        Command::TrainStage1 { data, base, .. } => {
            let mut log = RunLog::default();
            let f = run.foundation(base.as_deref(), &mut log)?;
            let (train, _) = run.samples(&data)?;
            let vocab = Vocab::synthetic();
            let model = run_stage1(&run.cfg, &f, &vocab, &train, &mut log)?;
            run.save_model(&model, &vocab, &log)
        }
        Command::TrainOnestage { data, base, .. } => {
            let mut log = RunLog::default();
            let f = run.foundation(base.as_deref(), &mut log)?;
            let (train, _) = run.samples(&data)?;
            let vocab = Vocab::synthetic();
            run.cfg.strategy = Strategy::OneStage;
            run.echo()?;
            let model = run_onestage(&run.cfg, &f, &vocab, &train, &mut log)?;
            run.save_model(&model, &vocab, &log)
        }
        Command::TrainStage2 { data, ckpt, .. } => {
            let c = Checkpoint::load(&ckpt)?;
            check_stage(c.stage, StageTag::Stage2)?;
            adopt_architecture(&mut run.cfg, &c);
            if c.stage == StageTag::Stage2 {
                run.cfg.model.num_experts = c.roles.len();
                run.cfg.router = c.router;
            }
            run.echo()?;
            let vocab = c.vocab()?;
            let start = c.model()?;
            let (train, _) = run.samples(&data)?;
            let mut log = RunLog::default();
            let model = run_stage2(&run.cfg, &vocab, start, &train, &mut log)?;
            run.save_model(&model, &vocab, &log)
        }
        Command::Caption { data, ckpt, image_id, .. } => {
            let c = Checkpoint::load(&ckpt)?;
            let model = c.model()?;
            let vocab = c.vocab()?;
            let ds = match &data.data {
                Some(p) => Dataset::load(p)?,
                None => generate(run.cfg.data_seed, (run.cfg.n_train + run.cfg.n_test).max(image_id + 1)),
            };
            let sample = ds
                .samples
                .iter()
                .find(|s| s.index == image_id)
                .ok_or_else(|| anyhow!("no scene with id {image_id} in a dataset of {}", ds.len()))?;
            let instr = vocab.encode(sample.instruction())?.ids;
            let caption = model.caption(&vocab, &sample.image, &instr)?;
            run.write("caption.txt", &format!("{image_id}\t{caption}\n"))?;
            println!("{caption}");
            Ok(())
        }
        Command::Eval { data, ckpt, hyp, refs, .. } => match (ckpt, hyp, refs) {
            (Some(ckpt), _, _) => eval_checkpoint(&run, &data, &ckpt),
            (None, Some(h), Some(r)) => eval_files(&run, &h, &r),
            _ => bail!("eval needs --ckpt or both --hyp and --refs"),
        },
        Command::Ablate { base, seeds, cells, .. } => ablate(&mut run, base.as_deref(), seeds, &cells),
        Command::Gradcheck { seeds, step, .. } => gradcheck(&run, seeds, step),
    }
}

fn synth(run: &Run, n: Option<usize>) -> Result<()> {
    let n = n.unwrap_or(run.cfg.n_train + run.cfg.n_test);
    let ds = generate(run.cfg.data_seed, n);
    ds.save(&run.path("dataset.txt"))?;
    let mut refs = String::new();
    for s in &ds.samples {
        for r in reference_captions(&s.graph) {
            let _ = writeln!(refs, "{}\t{r}", s.index);
        }
    }
    run.write("references.txt", &refs)?;
    println!("wrote {} scenes to {}", ds.len(), run.path("dataset.txt").display());
    Ok(())
}

fn eval_checkpoint(run: &Run, data: &Data, ckpt: &Path) -> Result<()> {
    let c = Checkpoint::load(ckpt)?;
    let model = c.model()?;
    let vocab = c.vocab()?;
    let (_, test) = run.samples(data)?;
    if test.is_empty() {
        bail!("held-out split is empty");
    }
    let e = evaluate(&model, &vocab, &test)?;
    let mut kv = KvMap::new();
    kv.set("images", test.len());
    e.report.write_kv(&mut kv, "");
    e.semantic.write_kv(&mut kv, "");
    run.write("report.txt", &kv.to_text())?;
    let mut caps = String::new();
    for (s, c) in test.iter().zip(&e.captions) {
        let _ = writeln!(caps, "{}\t{c}", s.index);
    }
    run.write("captions.txt", &caps)?;
    print!("{}", kv.to_text());
    Ok(())
}

fn read_id_lines(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}:{}: expected `<id>\\t<caption>`", path.display(), n + 1))?;
        out.entry(id.trim().to_string()).or_default().push(caption.to_string());
    }
    Ok(out)
}

fn eval_files(run: &Run, hyp: &Path, refs: &Path) -> Result<()> {
    let hyps = read_id_lines(hyp)?;
    let refs = read_id_lines(refs)?;
    let mut corpus = EvalCorpus::new();
    for (id, h) in &hyps {
        if h.len() != 1 {
            bail!("{} hypotheses for id {id}, expected one", h.len());
        }
        let r = refs.get(id).ok_or_else(|| anyhow!("no references for id {id}"))?;
        corpus.push(&h[0], r)?;
    }
    if corpus.is_empty() {
        bail!("no hypotheses in {}", hyp.display());
    }
    let report = MetricReport::compute(&corpus)?;
    let mut kv = KvMap::new();
    kv.set("images", corpus.len());
    report.write_kv(&mut kv, "");
    run.write("report.txt", &kv.to_text())?;
    print!("{}", kv.to_text());
    Ok(())
}

/// The cells behind the three directional comparisons.
pub fn direction_cells() -> Vec<Cell> {
    vec![
        Cell::new(3, true, Strategy::TwoStage),
        Cell::new(3, false, Strategy::TwoStage),
        Cell::new(1, true, Strategy::TwoStage),
        Cell::new(3, true, Strategy::OneStage),
    ]
}

fn parse_cells(spec: &str) -> Result<Vec<Cell>> {
    match spec {
        "all" => Ok(Cell::full_grid()),
        "directions" => Ok(direction_cells()),
        list => {
            let grid = Cell::full_grid();
            list.split(',')
                .map(|label| {
                    let label = label.trim();
                    grid.iter()
                        .copied()
                        .find(|c| c.label() == label)
                        .ok_or_else(|| anyhow!("unknown ablation cell `{label}`"))
                })
                .collect()
        }
    }
}

fn ablate(run: &mut Run, base: Option<&Path>, seeds: u64, cells: &str) -> Result<()> {
    let cells = parse_cells(cells)?;
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    let mut log = RunLog::default();
    let foundation = run.foundation(base, &mut log)?;
    let (train, test) = run.samples(&Data { data: None })?;
    let vocab = Vocab::synthetic();
    let seed_list: Vec<u64> = (0..seeds).map(|i| run.cfg.seed + i).collect();
    let input = AblationInput {
        base: &run.cfg,
        foundation: &foundation,
        vocab: &vocab,
        train: &train,
        test: &test,
    };
    let threads = thread_count();
    println!("{} cells x {} seeds on {threads} threads", cells.len(), seeds);
    let report = run_ablation(&input, &cells, &seed_list, threads, &|row| {
        println!(
            "{} seed {}: bleu1 {:.2} cider {:.2} ({:.0}s)",
            row.cell.label(),
            row.seed,
            row.eval.report.bleu[0],
            row.eval.report.cider,
            row.train_seconds
        );
    })?;
    run.write("rows.tsv", &report.to_tsv())?;
    run.write("summary.tsv", &report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn gradcheck(run: &Run, seeds: u64, step: f64) -> Result<()> {
    let mut tsv = String::from("seed\tinputs\tweights\tmax_rel_error\n");
    let mut worst = 0.0f64;
    for i in 0..seeds {
        let r = stage1_gradcheck(run.cfg.seed + i, step)?;
        let _ = writeln!(tsv, "{}\t{}\t{}\t{:e}", r.seed, r.inputs, r.weights, r.max_rel_error);
        println!("seed {}: max relative error {:.3e}", r.seed, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    run.write("gradcheck.tsv", &tsv)?;
    if worst >= GRADCHECK_TOLERANCE {
        bail!("max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}");
    }
    Ok(())
}
