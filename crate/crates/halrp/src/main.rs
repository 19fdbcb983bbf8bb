use std::path::PathBuf;
use std::process::ExitCode;

use halrp::cli::{self, OrdersSpec};
use halrp::error::Result;

const USAGE: &str = "\
halrp - continual learning with low-rank weight perturbations

USAGE:
    halrp run    --config FILE [flags]     train a task sequence, write artifacts
    halrp orders --config FILE [flags]     run several task orders, report OPD/MOPD/AOPD
    halrp verify [--seed N]                run the numerical verification suites

FLAGS (run, orders; override config-file keys):
    --seed N --mode {halrp|stl|seq_finetune} --alpha A
    --warmup-epochs N --epochs N --lr X --lambda0 X --lambda1 X
    --prune {off|absolute|percentile|mixed} --prune-gamma G --prune-tau T
    --out DIR

ORDERS:
    --orders R                 R orders seeded 0..R
    --order-list \"2,0,1;1,0,2\"  explicit orders, ';'-separated
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

struct Parsed {
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    orders: Option<usize>,
    order_list: Option<Vec<Vec<usize>>>,
    seed: u64,
}

fn parse_flags(args: &[String]) -> Result<Parsed> {
    let mut parsed = Parsed {
        config: None,
        overrides: Vec::new(),
        orders: None,
        order_list: None,
        seed: 0,
    };
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || -> Result<&String> {
            it.next().ok_or_else(|| {
                halrp::error::Error::InvalidInput(format!("flag {flag} expects a value"))
            })
        };
        match flag.as_str() {
            "--config" => parsed.config = Some(PathBuf::from(value()?)),
            "--orders" => {
                let v = value()?;
                parsed.orders = Some(v.parse().map_err(|_| {
                    halrp::error::Error::InvalidInput(format!("--orders expects a count, got {v}"))
                })?);
            }
            "--order-list" => {
                let v = value()?;
                let lists = v
                    .split(';')
                    .map(cli::config::parse_order_list)
                    .collect::<Result<Vec<_>>>()?;
                parsed.order_list = Some(lists);
            }
            other => {
                if let Some(key) = cli::flag_to_key(other) {
                    let v = value()?.clone();
                    if key == "seed" {
                        parsed.seed = v.parse().unwrap_or(0);
                    }
                    parsed.overrides.push((key.to_string(), v));
                } else {
                    return Err(halrp::error::Error::InvalidInput(format!(
                        "unknown flag {other} (see --help)"
                    )));
                }
            }
        }
    }
    Ok(parsed)
}

fn dispatch(args: &[String]) -> Result<ExitCode> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Ok(ExitCode::FAILURE);
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{USAGE}");
        return Ok(ExitCode::SUCCESS);
    }
    let parsed = parse_flags(&args[1..])?;
    match command.as_str() {
        "run" => {
            let cfg = cli::load_with_overrides(parsed.config.as_deref(), &parsed.overrides)?;
            let (_, report, artifacts) = cli::run(&cfg)?;
            for row in &report.rows {
                println!(
                    "task {}: avg_accuracy={} bwt={} increment_ratio={}",
                    row.task_index, row.avg_accuracy, row.bwt, row.increment_ratio
                );
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "final: avg_accuracy={} bwt={} increment_ratio={}",
                report.final_avg_accuracy, report.final_bwt, report.cumulative_increment_ratio
            );
            println!("artifacts: {}", artifacts.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        "orders" => {
            let cfg = cli::load_with_overrides(parsed.config.as_deref(), &parsed.overrides)?;
            let spec = match (parsed.order_list, parsed.orders) {
                (Some(lists), _) => OrdersSpec::Explicit(lists),
                (None, Some(r)) => OrdersSpec::Seeded(r),
                (None, None) => {
                    return Err(halrp::error::Error::InvalidInput(
                        "orders needs --orders R or --order-list".into(),
                    ))
                }
            };
            let (outcome, _) = cli::orders(&cfg, &spec)?;
            print!("{}", cli::report::orders_table(&outcome));
            Ok(ExitCode::SUCCESS)
        }
        "verify" => {
            let (reports, ok) = cli::verify(parsed.seed);
            for r in &reports {
                println!("{r}");
                if !r.passed() && !r.detail.is_empty() {
                    println!("    first failure: {}", r.detail);
                }
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        other => {
            eprintln!("unknown command {other:?}\n{USAGE}");
            Ok(ExitCode::FAILURE)
        }
    }
}
