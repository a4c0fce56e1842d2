//! Ablation grid: expert count × router × training strategy, over seeds,
//! each variant trained on the same split and scored on the same held-out
//! samples. Two-stage variants of one seed share their first stage.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::model::CaptionModel;
use crate::pretrain::Foundation;
use crate::scene::Sample;
use crate::train::{run_onestage, run_stage1, run_stage2, RunConfig, RunLog, Strategy};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub num_experts: usize,
    pub router: bool,
    pub strategy: Strategy,
}

impl Cell {
    pub fn new(num_experts: usize, router: bool, strategy: Strategy) -> Self {
        Self {
            num_experts,
            router,
            strategy,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "n{}-{}-{}",
            self.num_experts,
            if self.router { "router" } else { "plain" },
            self.strategy.label()
        )
    }

    /// Every combination of 1..=4 experts, router on and off, and both
    /// strategies.
    pub fn full_grid() -> Vec<Cell> {
        let mut out = Vec::new();
        for strategy in [Strategy::TwoStage, Strategy::OneStage] {
            for n in 1..=4 {
                for router in [true, false] {
                    out.push(Cell::new(n, router, strategy));
                }
            }
        }
        out
    }

    fn configure(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.model.num_experts = self.num_experts;
        c.router = self.router;
        c.strategy = self.strategy;
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: Cell,
    pub seed: u64,
    pub eval: Evaluation,
    /// Log of this variant's own training; the shared first stage is not
    /// repeated here.
    pub log: RunLog,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn rows_for(&self, cell: Cell) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.cell == cell)
    }

    /// Mean and standard deviation of `metric` over the seeds of `cell`.
    pub fn stat(&self, cell: Cell, metric: impl Fn(&Evaluation) -> f64) -> (f64, f64) {
        let xs: Vec<f64> = self.rows_for(cell).map(|r| metric(&r.eval)).collect();
        mean_std(&xs)
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.cell) {
                out.push(r.cell);
            }
        }
        out
    }

    /// One tab-separated row per cell and seed.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "cell\tseed\tbleu1\tbleu2\tbleu3\tbleu4\tmeteor\trouge_l\tcider\ttheme_acc\tobject_f1\trelation_f1\ttrain_seconds\n",
        );
        for r in &self.rows {
            let m = &r.eval.report;
            let sem = &r.eval.semantic;
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.1}",
                r.cell.label(),
                r.seed,
                m.bleu[0],
                m.bleu[1],
                m.bleu[2],
                m.bleu[3],
                m.meteor,
                m.rouge_l,
                m.cider,
                sem.theme_accuracy,
                sem.object_f1,
                sem.relation_f1,
                r.train_seconds
            );
        }
        s
    }

    /// Per-cell means and standard deviations of the headline metrics.
    pub fn summary(&self) -> String {
        let mut s = String::from("cell\tseeds\tbleu1\tmeteor\trouge_l\tcider\tobject_f1\trelation_f1\n");
        for cell in self.cells() {
            let n = self.rows_for(cell).count();
            let f = |(m, d): (f64, f64)| format!("{m:.2}±{d:.2}");
            let _ = writeln!(
                s,
                "{}\t{n}\t{}\t{}\t{}\t{}\t{}\t{}",
                cell.label(),
                f(self.stat(cell, |e| e.report.bleu[0])),
                f(self.stat(cell, |e| e.report.meteor)),
                f(self.stat(cell, |e| e.report.rouge_l)),
                f(self.stat(cell, |e| e.report.cider)),
                f(self.stat(cell, |e| e.semantic.object_f1)),
                f(self.stat(cell, |e| e.semantic.relation_f1)),
            );
        }
        s
    }
}

/// Worker threads for the grid: `RSMOE_THREADS` when set to a positive
/// integer, otherwise the number of available cores.
pub fn thread_count() -> usize {
    std::env::var("RSMOE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on up to `threads` workers; results keep job order.
fn parallel<T: Send>(jobs: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub struct AblationInput<'a> {
    pub base: &'a RunConfig,
    pub foundation: &'a Foundation,
    pub vocab: &'a Vocab,
    pub train: &'a [Sample],
    pub test: &'a [Sample],
}

/// Trains and scores every `(cell, seed)` pair. Results do not depend on the
/// thread count.
pub fn run_ablation(
    input: &AblationInput,
    cells: &[Cell],
    seeds: &[u64],
    threads: usize,
    progress: &(dyn Fn(&AblationRow) + Sync),
) -> Result<AblationReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    if input.test.is_empty() {
        return Err(Error::Data("ablation needs held-out samples".into()));
    }
    let two_stage = cells.iter().any(|c| c.strategy == Strategy::TwoStage);
    let stage1: Vec<Option<CaptionModel>> = if two_stage {
        parallel(seeds.len(), threads, |i| {
            let cfg = input.base.clone();
            let cfg = RunConfig { seed: seeds[i], ..cfg };
            run_stage1(&cfg, input.foundation, input.vocab, input.train, &mut RunLog::default()).map(Some)
        })?
    } else {
        vec![None; seeds.len()]
    };

    let jobs: Vec<(Cell, usize)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(si, _)| cells.iter().map(move |&c| (c, si)))
        .collect();
    let rows = parallel(jobs.len(), threads, |j| {
        let (cell, si) = jobs[j];
        let cfg = cell.configure(input.base, seeds[si]);
        let mut log = RunLog::default();
        let start = Instant::now();
        let model = match cell.strategy {
            Strategy::TwoStage => {
                let s1 = stage1[si].clone().expect("first stage trained for two-stage cells");
                run_stage2(&cfg, input.vocab, s1, input.train, &mut log)?
            }
            Strategy::OneStage => run_onestage(&cfg, input.foundation, input.vocab, input.train, &mut log)?,
        };
        let train_seconds = start.elapsed().as_secs_f64();
        let row = AblationRow {
            cell,
            seed: seeds[si],
            eval: evaluate(&model, input.vocab, input.test)?,
            log,
            train_seconds,
        };
        progress(&row);
        Ok(row)
    })?;
    Ok(AblationReport { rows })
}
