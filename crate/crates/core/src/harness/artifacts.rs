//! Run directory layout and the CLI steps that fill it.
//!
//! ```text
//! <out>/data/{corpus,examples}.jsonl
//! <out>/retrieved.jsonl
//! <out>/sps.jsonl
//! <out>/checkpoints/{sl,rl}-seed<N>.{json,bin}
//! <out>/logs/{sl_curve,rl}-seed<N>.csv
//! <out>/results.csv, report.md, gap_report.md
//! ```
//!
//! Each step reuses what earlier steps left in the directory and computes
//! (and saves) anything missing, so `eval` on an empty directory runs the
//! whole pipeline. Delete the directory to start over.

use std::path::{Path, PathBuf};

use log::info;

use super::config::ExperimentConfig;
use super::data::{ingest_dataset, load_dataset, load_retrieved, retrieve_all, save_dataset, save_retrieved, Dataset};
use super::gap::{run_gap_experiment, GapReport};
use super::pipeline::{Backend, Experiment};
use super::report::{emit_report, ReportFormat, ResultTable};
use super::HarnessError;
use crate::policy::{Checkpoint, PolicyParams};
use crate::sps::{load_records, save_records, SilverRecord};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn examples_path(&self) -> PathBuf {
        self.data_dir().join("examples.jsonl")
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.data_dir().join("corpus.jsonl")
    }

    pub fn retrieved_path(&self) -> PathBuf {
        self.root.join("retrieved.jsonl")
    }

    pub fn sps_path(&self) -> PathBuf {
        self.root.join("sps.jsonl")
    }

    /// `stage` is `sl` or `rl`.
    pub fn checkpoint_path(&self, stage: &str, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}-seed{seed}.json"))
    }

    pub fn log_path(&self, name: &str, seed: u64) -> PathBuf {
        self.root.join("logs").join(format!("{name}-seed{seed}.csv"))
    }

    pub fn results_path(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn gap_report_path(&self) -> PathBuf {
        self.root.join("gap_report.md")
    }
}

fn create_parent(path: &Path) -> Result<(), HarnessError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write(path: &Path, body: &str) -> Result<(), HarnessError> {
    create_parent(path)?;
    std::fs::write(path, body).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A config bound to an output directory.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub dir: RunDir,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            dir: RunDir::new(out),
        }
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    /// Materialize the configured dataset under `data/`.
    pub fn generate_data(&self) -> Result<Dataset, HarnessError> {
        let ds = load_dataset(&self.cfg)?;
        save_dataset(&self.dir.data_dir(), &ds)?;
        info!("wrote {} examples, {} passages", ds.examples.len(), ds.corpus.len());
        Ok(ds)
    }

    fn dataset(&self) -> Result<Dataset, HarnessError> {
        let (examples, corpus) = (self.dir.examples_path(), self.dir.corpus_path());
        if examples.exists() && corpus.exists() {
            ingest_dataset(&examples, &corpus, self.cfg.embed)
        } else {
            self.generate_data()
        }
    }

    /// Retrieve the top-k for every example and write `retrieved.jsonl`.
    pub fn retrieve(&self) -> Result<Experiment, HarnessError> {
        let data = self.dataset()?;
        let lists = retrieve_all(&data.corpus, &data.examples, self.cfg.k)?;
        save_retrieved(&self.dir.retrieved_path(), &data.examples, &lists)?;
        Experiment::from_parts(self.cfg.clone(), data, lists)
    }

    /// Dataset plus candidate lists, reusing `retrieved.jsonl` when present.
    pub fn experiment(&self) -> Result<Experiment, HarnessError> {
        let path = self.dir.retrieved_path();
        if !path.exists() {
            return self.retrieve();
        }
        let data = self.dataset()?;
        let lists = load_retrieved(&path, &data.examples, self.cfg.k)?;
        Experiment::from_parts(self.cfg.clone(), data, lists)
    }

    pub fn synth_sps(&self, exp: &Experiment, ev: &Backend<'_>) -> Result<Vec<SilverRecord>, HarnessError> {
        let records = exp.synthesize(ev)?;
        let path = self.dir.sps_path();
        create_parent(&path)?;
        save_records(&path, &records)?;
        Ok(records)
    }

    fn records(&self, exp: &Experiment, ev: &Backend<'_>) -> Result<Vec<SilverRecord>, HarnessError> {
        let path = self.dir.sps_path();
        if path.exists() {
            Ok(load_records(&path)?)
        } else {
            self.synth_sps(exp, ev)
        }
    }

    fn save_checkpoint(&self, stage: &str, params: &PolicyParams, step: u64) -> Result<(), HarnessError> {
        let path = self.dir.checkpoint_path(stage, self.seed());
        create_parent(&path)?;
        Checkpoint {
            params: params.clone(),
            seed: self.seed(),
            schedule: self.cfg.sl.schedule,
            step,
        }
        .save(&path)?;
        Ok(())
    }

    fn load_checkpoint(&self, exp: &Experiment, stage: &str) -> Result<Option<PolicyParams>, HarnessError> {
        let path = self.dir.checkpoint_path(stage, self.seed());
        if !path.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&path)?;
        ck.expect_shape(exp.shape())?;
        Ok(Some(ck.params))
    }

    pub fn train_sl(&self, exp: &Experiment, ev: &Backend<'_>) -> Result<PolicyParams, HarnessError> {
        let records = self.records(exp, ev)?;
        let (params, report) = exp.train_sl(&records)?;
        self.save_checkpoint("sl", &params, report.best_step)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "train_loss", "val_loss"]).expect("in-memory write");
        for (step, tr, val) in &report.curve {
            w.write_record([step.to_string(), tr.to_string(), val.to_string()])
                .expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        write(&self.dir.log_path("sl_curve", self.seed()), &body)?;
        Ok(params)
    }

    fn sl_params(&self, exp: &Experiment, ev: &Backend<'_>) -> Result<PolicyParams, HarnessError> {
        match self.load_checkpoint(exp, "sl")? {
            Some(p) => Ok(p),
            None => self.train_sl(exp, ev),
        }
    }

    pub fn train_rl(&self, exp: &Experiment, ev: &Backend<'_>) -> Result<PolicyParams, HarnessError> {
        let sl = self.sl_params(exp, ev)?;
        let (params, report) = exp.train_rl(&sl, ev)?;
        self.save_checkpoint("rl", &params, report.best_step)?;
        let path = self.dir.log_path("rl", self.seed());
        create_parent(&path)?;
        report.write_csv(&path)?;
        info!(
            "rl: eval reward {:.4} -> {:.4} (best at step {})",
            report.initial_eval, report.best_eval, report.best_step
        );
        Ok(params)
    }

    /// The RL checkpoint if one exists, else the supervised one; trains whatever is missing.
    fn bridge(&self, exp: &Experiment, ev: &Backend<'_>) -> Result<PolicyParams, HarnessError> {
        match self.load_checkpoint(exp, "rl")? {
            Some(p) => Ok(p),
            None => self.train_rl(exp, ev),
        }
    }

    /// Score the configured systems on `split` and merge the rows into `results.csv`.
    ///
    /// Rows already in the file for the same system, split and seed are replaced.
    pub fn eval(&self, exp: &Experiment, ev: &Backend<'_>, split: &str) -> Result<ResultTable, HarnessError> {
        let needs_bridge = self.cfg.parsed_systems().contains(&super::System::Bgm);
        let bridge = if needs_bridge { Some(self.bridge(exp, ev)?) } else { None };
        let (table, _) = exp.run_systems(ev, bridge.as_ref(), split)?;
        let path = self.dir.results_path();
        let mut merged = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|source| HarnessError::Io {
                path: path.clone(),
                source,
            })?;
            ResultTable::from_csv(&text)?
        } else {
            ResultTable::default()
        };
        merged.rows.retain(|r| {
            !table
                .rows
                .iter()
                .any(|n| n.system == r.system && n.split == r.split && n.seed == r.seed)
        });
        merged.rows.extend(table.rows.iter().cloned());
        create_parent(&path)?;
        emit_report(&merged, ReportFormat::Csv, &path)?;
        Ok(table)
    }

    /// Ranking-vs-selection experiment over every example; writes `gap_report.md`.
    pub fn gap_experiment(&self, exp: &Experiment, ev: &Backend<'_>) -> Result<GapReport, HarnessError> {
        let report = run_gap_experiment(
            &exp.data.examples,
            &exp.retrieved,
            ev,
            self.cfg.gap.n_permutations,
            self.seed(),
        )?;
        write(&self.dir.gap_report_path(), &report.to_markdown())?;
        Ok(report)
    }

    /// Render `results.csv` (and `gap_report.md`, if present) into `report.md`.
    pub fn report(&self) -> Result<String, HarnessError> {
        let path = self.dir.results_path();
        let text = std::fs::read_to_string(&path).map_err(|source| HarnessError::Io {
            path: path.clone(),
            source,
        })?;
        let table = ResultTable::from_csv(&text)?;
        if table.is_empty() {
            return Err(HarnessError::Missing(format!("{}: no result rows", path.display())));
        }
        let mut seeds: Vec<u64> = table.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut body = format!(
            "# Results\n\nExperiment `{}`; cells are percentages averaged over seeds {seeds:?}.\n\n{}",
            self.cfg.name,
            table.to_markdown()
        );
        let gap = self.dir.gap_report_path();
        if gap.exists() {
            let g = std::fs::read_to_string(&gap).map_err(|source| HarnessError::Io { path: gap, source })?;
            body.push('\n');
            body.push_str(&g.replacen("# ", "## ", 1));
        }
        write(&self.dir.report_path(), &body)?;
        Ok(body)
    }
}
