//! Command front end: experiment configs in, artifacts out.
//!
//! `run` executes one task sequence and writes a checkpoint, a results CSV
//! and a JSON summary into the output directory. `orders` repeats a sequence
//! under several task orders and aggregates the per-task disparity metrics.
//! `verify` drives the numerical oracle suites. All three are plain library
//! functions; the binary is a thin argument parser over them.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cl_engine::{run_sequence, ContinualState, RunReport};
use crate::error::{Error, Result};
use crate::metrics::{mopd_aopd, opd, OrderRunSet};
use crate::nn::Shape;
use crate::reg_prune::DEFAULT_PRUNE_TAU;
use crate::tasks::{
    gen_permuted, gen_split, gen_synthetic, load_dataset, pool_to_task, LabeledDataset,
    TaskDataset, TaskOrder,
};
use crate::verify::{run_all, SuiteReport};

pub use config::{check_required, load_config, parse_config, resolve_arch, DataSource, RunConfig};
pub use report::OrdersOutcome;

/// Paths written by `run`.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Assemble the canonical task list and the network input shape.
pub fn build_tasks(cfg: &RunConfig) -> Result<(Vec<TaskDataset>, Shape)> {
    let tasks: Vec<TaskDataset> = match cfg.data {
        DataSource::Synthetic => (0..cfg.tasks)
            .map(|t| {
                let mut d = gen_synthetic(
                    cfg.classes,
                    cfg.dims,
                    cfg.samples_per_class,
                    cfg.noise,
                    cfg.data_seed.wrapping_add(t as u64),
                );
                d.task_id = t;
                d
            })
            .collect(),
        DataSource::Permuted => {
            let base = gen_synthetic(
                cfg.classes,
                cfg.dims,
                cfg.samples_per_class,
                cfg.noise,
                cfg.data_seed,
            );
            gen_permuted(&base, cfg.tasks, cfg.data_seed)
        }
        DataSource::Split => {
            let pool = if cfg.data_files.len() == 1 {
                load_dataset(&cfg.data_files[0])?
            } else if cfg.data_files.is_empty() {
                let d = gen_synthetic(
                    cfg.classes,
                    cfg.dims,
                    cfg.samples_per_class,
                    cfg.noise,
                    cfg.data_seed,
                );
                // Train and test merge into one pool; the splitter re-splits
                // per task.
                let n = d.train.len() + d.test.len();
                let dims = d.train.inputs.cols();
                let mut data = Vec::with_capacity(n * dims);
                let mut labels = Vec::with_capacity(n);
                for (batch, count) in [(&d.train, d.train.len()), (&d.test, d.test.len())] {
                    for row in 0..count {
                        for c in 0..dims {
                            data.push(batch.inputs.get(row, c));
                        }
                        labels.push(batch.labels[row]);
                    }
                }
                LabeledDataset {
                    inputs: crate::linalg::Matrix::from_vec(n, dims, data),
                    labels,
                    class_count: d.class_count,
                }
            } else {
                return Err(Error::ConfigValue(
                    "data = split takes at most one pool file".into(),
                ));
            };
            let groups = pool.class_count / cfg.classes_per_task.max(1);
            gen_split(&pool, cfg.classes_per_task, &TaskOrder::identity(groups))?
        }
        DataSource::Files => {
            let mut tasks = Vec::with_capacity(cfg.data_files.len());
            for (t, path) in cfg.data_files.iter().enumerate() {
                let pool = load_dataset(path)?;
                tasks.push(pool_to_task(&pool, t, path.display().to_string()));
            }
            tasks
        }
    };
    if tasks.is_empty() {
        return Err(Error::ConfigValue("configuration produced no tasks".into()));
    }
    let dims = tasks[0].train.inputs.cols();
    for t in &tasks {
        if t.train.inputs.cols() != dims {
            return Err(Error::ConfigValue(format!(
                "task {} has {} features, expected {dims}",
                t.task_id,
                t.train.inputs.cols()
            )));
        }
    }
    let shape = match cfg.image {
        Some((c, h, w)) => {
            if c * h * w != dims {
                return Err(Error::ConfigValue(format!(
                    "image {c}x{h}x{w} does not cover {dims} features"
                )));
            }
            Shape::Image {
                channels: c,
                height: h,
                width: w,
            }
        }
        None => Shape::Flat(dims),
    };
    Ok((tasks, shape))
}

/// Execute one configured run and write all artifacts.
pub fn run(cfg: &RunConfig) -> Result<(ContinualState, RunReport, RunArtifacts)> {
    check_required(cfg)?;
    let (mut tasks, shape) = build_tasks(cfg)?;
    if let Some(order) = &cfg.order {
        tasks = TaskOrder::explicit(order.clone())?.apply(&tasks)?;
    }
    let specs = resolve_arch(&cfg.arch, shape)?;
    let (state, report) = run_sequence(&cfg.experiment, &specs, shape, &tasks)?;
    let artifacts = write_artifacts(cfg, &state, &report)?;
    Ok((state, report, artifacts))
}

fn write_artifacts(
    cfg: &RunConfig,
    state: &ContinualState,
    report: &RunReport,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(&cfg.out)?;
    let artifacts = RunArtifacts {
        out_dir: cfg.out.clone(),
        checkpoint: cfg.out.join("checkpoint.halrp"),
        results_csv: cfg.out.join("results.csv"),
        summary_json: cfg.out.join("summary.json"),
    };
    checkpoint::save_checkpoint(&artifacts.checkpoint, state, cfg)?;
    std::fs::write(&artifacts.results_csv, report::results_csv(report))?;
    std::fs::write(
        &artifacts.summary_json,
        report::summary_json(&cfg.to_text(), report)?,
    )?;
    Ok(artifacts)
}

/// How the order sweep generates its orders.
#[derive(Debug, Clone)]
pub enum OrdersSpec {
    /// R orders drawn from seeds 0..R.
    Seeded(usize),
    /// Explicit permutations, accepted verbatim.
    Explicit(Vec<Vec<usize>>),
}

/// Run the same configuration under several task orders and aggregate
/// per-task disparities. Each order writes its artifacts under
/// `out/order_<i>/`.
pub fn orders(cfg: &RunConfig, spec: &OrdersSpec) -> Result<(OrdersOutcome, Vec<RunReport>)> {
    check_required(cfg)?;
    let (tasks, shape) = build_tasks(cfg)?;
    let order_list: Vec<TaskOrder> = match spec {
        OrdersSpec::Seeded(r) => (0..*r)
            .map(|seed| TaskOrder::seeded(tasks.len(), seed as u64))
            .collect(),
        OrdersSpec::Explicit(lists) => lists
            .iter()
            .map(|l| TaskOrder::explicit(l.clone()))
            .collect::<Result<_>>()?,
    };
    if order_list.len() < 2 {
        return Err(Error::InvalidInput(
            "order sweeps need at least two orders (seeded or explicit)".into(),
        ));
    }
    let specs = resolve_arch(&cfg.arch, shape)?;

    let mut runs = OrderRunSet::new();
    let mut reports = Vec::with_capacity(order_list.len());
    let mut final_avgs = Vec::with_capacity(order_list.len());
    for (i, order) in order_list.iter().enumerate() {
        let ordered = order.apply(&tasks)?;
        let (state, report) = run_sequence(&cfg.experiment, &specs, shape, &ordered)?;
        // Key final accuracies by canonical identity so "task t" means the
        // same dataset in every run.
        let last_row = state.history.last_row().unwrap();
        let keyed: BTreeMap<usize, f64> = state
            .task_ids
            .iter()
            .zip(last_row)
            .map(|(&id, &acc)| (id, acc))
            .collect();
        runs.add_run(keyed);
        final_avgs.push(report.final_avg_accuracy);

        let sub_cfg = RunConfig {
            out: cfg.out.join(format!("order_{i}")),
            order: Some(order.as_slice().to_vec()),
            ..cfg.clone()
        };
        std::fs::create_dir_all(&sub_cfg.out)?;
        write_artifacts(&sub_cfg, &state, &report)?;
        reports.push(report);
    }
    let per_task = opd(&runs)?;
    let opds: Vec<f64> = per_task.values().copied().collect();
    let (mopd, aopd) = mopd_aopd(&opds);
    let outcome = OrdersOutcome {
        orders: order_list.iter().map(|o| o.as_slice().to_vec()).collect(),
        per_task_opd: per_task,
        mopd,
        aopd,
        final_avg_accuracies: final_avgs,
    };
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("orders.csv"), report::orders_csv(&outcome))?;
    std::fs::write(cfg.out.join("orders.json"), report::orders_json(&outcome)?)?;
    Ok((outcome, reports))
}

/// Run every verification suite; the bool is the overall pass flag.
pub fn verify(seed: u64) -> (Vec<SuiteReport>, bool) {
    let reports = run_all(seed);
    let ok = reports.iter().all(|r| r.passed());
    (reports, ok)
}

// ---------------------------------------------------------------------------
// Flag handling for the binary
// ---------------------------------------------------------------------------

/// Flags that override config keys, as (key, value) pairs in config-file
/// vocabulary.
pub fn flag_to_key(flag: &str) -> Option<&'static str> {
    Some(match flag {
        "--seed" => "seed",
        "--mode" => "mode",
        "--alpha" => "alpha",
        "--warmup-epochs" => "warmup_epochs",
        "--epochs" => "epochs",
        "--lr" => "lr",
        "--lambda0" => "lambda0",
        "--lambda1" => "lambda1",
        "--prune" => "prune",
        "--prune-gamma" => "prune_gamma",
        "--prune-tau" => "prune_tau",
        "--out" => "out",
        _ => return None,
    })
}

/// Apply flag overrides on top of a parsed config. Overrides run through the
/// same key machinery as the file, so validation is identical.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[(String, String)]) -> Result<RunConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    // Re-parse from canonical text with overrides appended; later keys win
    // by replaying them through the same apply path.
    let mut merged: Vec<(String, String)> = Vec::new();
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            merged.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    for (k, v) in overrides {
        merged.retain(|(key, _)| key != k);
        merged.push((k.clone(), v.clone()));
    }
    let text: String = merged.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let mut out = parse_config(&text)?;
    // `to_text` omits unset optional keys; carry non-key state over.
    out.explicit_gamma = out.explicit_gamma || cfg.explicit_gamma;
    Ok(out)
}

/// Load a config file if given, else start from defaults; then apply flags.
pub fn load_with_overrides(
    config_path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let base = match config_path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&base, overrides)
}

/// Default absolute pruning threshold exposed for help text.
pub fn default_prune_tau() -> f64 {
    DEFAULT_PRUNE_TAU
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cl_engine::Mode;

    fn base_cfg_text() -> &'static str {
        "epochs = 6\nwarmup_epochs = 1\nlr = 0.2\nbatch_size = 8\n\
         arch = dense(8) relu\ndata = permuted\ntasks = 2\nclasses = 3\n\
         dims = 12\nsamples_per_class = 8\nnoise = 0.05\ndata_seed = 3\n"
    }

    #[test]
    fn run_writes_all_artifacts_deterministically() {
        let dir = std::env::temp_dir().join("halrp_cli_run_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = parse_config(base_cfg_text()).unwrap();
        cfg.out = dir.join("a");
        let (_, _, art_a) = run(&cfg).unwrap();
        cfg.out = dir.join("b");
        let (_, _, art_b) = run(&cfg).unwrap();
        assert_eq!(
            std::fs::read(&art_a.checkpoint).unwrap(),
            std::fs::read(&art_b.checkpoint).unwrap()
        );
        // CSV and JSON differ only in wall-clock fields; strip them.
        let strip = |p: &Path| -> String {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| {
                    if let Some(pos) = l.rfind(',') {
                        if l.starts_with(|c: char| c.is_ascii_digit()) {
                            return l[..pos].to_string();
                        }
                    }
                    l.to_string()
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&art_a.results_csv), strip(&art_b.results_csv));
    }

    #[test]
    fn overrides_win_over_file_keys() {
        let cfg = parse_config(base_cfg_text()).unwrap();
        let over = vec![
            ("alpha".to_string(), "0.5".to_string()),
            ("mode".to_string(), "stl".to_string()),
            ("prune".to_string(), "percentile".to_string()),
            ("prune_gamma".to_string(), "0.4".to_string()),
        ];
        let merged = apply_overrides(&cfg, &over).unwrap();
        assert_eq!(merged.experiment.alpha, 0.5);
        assert_eq!(merged.experiment.mode, Mode::Stl);
        assert_eq!(merged.experiment.prune.unwrap().gamma, 0.4);
        assert_eq!(merged.tasks, 2);
    }

    #[test]
    fn orders_sweep_identical_orders_have_zero_disparity() {
        let dir = std::env::temp_dir().join("halrp_cli_orders_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = parse_config(base_cfg_text()).unwrap();
        cfg.out = dir;
        let spec = OrdersSpec::Explicit(vec![vec![1, 0], vec![1, 0]]);
        let (outcome, reports) = orders(&cfg, &spec).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(outcome.mopd, 0.0);
        assert_eq!(outcome.aopd, 0.0);
        assert!(cfg_outputs_exist(&cfg.out));
    }

    fn cfg_outputs_exist(out: &Path) -> bool {
        out.join("orders.csv").exists()
            && out.join("orders.json").exists()
            && out.join("order_0/results.csv").exists()
    }

    #[test]
    fn orders_rejects_single_order() {
        let cfg = parse_config(base_cfg_text()).unwrap();
        assert!(orders(&cfg, &OrdersSpec::Seeded(1)).is_err());
    }

    #[test]
    fn files_mode_and_dimension_validation() {
        let dir = std::env::temp_dir().join("halrp_cli_files_test");
        std::fs::create_dir_all(&dir).unwrap();
        let d = gen_synthetic(2, 6, 10, 0.1, 9);
        let pool = LabeledDataset {
            inputs: d.train.inputs.clone(),
            labels: d.train.labels.clone(),
            class_count: 2,
        };
        let p = dir.join("t0.hdset");
        crate::tasks::save_dataset(&p, &pool).unwrap();
        let mut cfg = RunConfig {
            data: DataSource::Files,
            data_files: vec![p],
            ..parse_config(base_cfg_text()).unwrap()
        };
        cfg.arch = config::parse_arch("dense(5) relu").unwrap();
        let (tasks, shape) = build_tasks(&cfg).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(shape, Shape::Flat(6));
    }

    #[test]
    fn flag_names_map_to_keys() {
        assert_eq!(flag_to_key("--warmup-epochs"), Some("warmup_epochs"));
        assert_eq!(flag_to_key("--prune-tau"), Some("prune_tau"));
        assert_eq!(flag_to_key("--bogus"), None);
    }

    #[test]
    fn explicit_order_key_reorders_training() {
        let dir = std::env::temp_dir().join("halrp_cli_order_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = parse_config(base_cfg_text()).unwrap();
        cfg.order = Some(vec![1, 0]);
        cfg.out = dir;
        let (state, report, _) = run(&cfg).unwrap();
        // Canonical dataset 1 is trained first.
        assert_eq!(state.task_ids, vec![1, 0]);
        assert_eq!(report.rows[0].canonical_task_id, 1);
        assert_eq!(report.rows[1].canonical_task_id, 0);
    }
}
