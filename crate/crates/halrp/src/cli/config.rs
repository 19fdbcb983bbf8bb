//! Line-based `key = value` experiment configs.
//!
//! `#` starts a comment, blank lines are ignored, unknown keys are errors so
//! hyperparameter typos fail loudly. Command-line flags override file keys.
//! `to_text` emits the canonical form embedded in checkpoints and echoed in
//! the JSON summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cl_engine::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Shape};
use crate::reg_prune::{PruneMode, PruneSpec, DEFAULT_PRUNE_TAU};

/// Unresolved architecture element; input dims are inferred from the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchToken {
    Dense(usize),
    Conv {
        kernel: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool(usize),
    Flatten,
}

/// Data source for the task sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Independent synthetic tasks (fresh prototypes per task).
    Synthetic,
    /// One synthetic base task plus seeded feature permutations.
    Permuted,
    /// Class-split of a labeled pool (synthetic, or one file).
    Split,
    /// One dataset file per task.
    Files,
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "permuted" => Ok(DataSource::Permuted),
            "split" => Ok(DataSource::Split),
            "files" => Ok(DataSource::Files),
            other => Err(Error::ConfigValue(format!(
                "unknown data source {other:?} (expected synthetic, permuted, split or files)"
            ))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Permuted => "permuted",
            DataSource::Split => "split",
            DataSource::Files => "files",
        }
    }
}

/// Complete run configuration: experiment hyperparameters plus architecture,
/// data recipe and output location.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub arch: Vec<ArchToken>,
    pub data: DataSource,
    pub tasks: usize,
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub image: Option<(usize, usize, usize)>,
    pub classes_per_task: usize,
    pub order: Option<Vec<usize>>,
    pub data_files: Vec<PathBuf>,
    pub out: PathBuf,
    /// Set when `prune_gamma` was given explicitly; otherwise gamma follows
    /// the trigger ratio.
    pub explicit_gamma: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: ExperimentConfig::default(),
            arch: Vec::new(),
            data: DataSource::Permuted,
            tasks: 0,
            classes: 4,
            dims: 16,
            samples_per_class: 50,
            noise: 0.1,
            data_seed: 7,
            image: None,
            classes_per_task: 2,
            order: None,
            data_files: Vec::new(),
            out: PathBuf::from("halrp-out"),
            explicit_gamma: false,
        }
    }
}

/// Keys that must appear either in the file or as flags.
const REQUIRED_KEYS: &[&str] = &["arch", "data", "tasks"];

struct PruneDraft {
    mode: Option<String>,
    tau: f64,
    gamma: Option<f64>,
}

/// Parse config text. Line numbers in errors are 1-based.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = BTreeMap::new();
    let mut prune = PruneDraft {
        mode: None,
        tau: DEFAULT_PRUNE_TAU,
        gamma: None,
    };
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Config {
            line: line_no,
            msg: format!("expected `key = value`, found {line:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if seen.insert(key.to_string(), line_no).is_some() {
            return Err(Error::Config {
                line: line_no,
                msg: format!("duplicate key {key:?}"),
            });
        }
        apply_key(&mut cfg, &mut prune, key, value).map_err(|e| Error::Config {
            line: line_no,
            msg: e.to_string(),
        })?;
    }
    finish_prune(&mut cfg, prune)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Validate presence of required keys once flags have been applied.
pub fn check_required(cfg: &RunConfig) -> Result<()> {
    for key in REQUIRED_KEYS {
        let missing = match *key {
            "arch" => cfg.arch.is_empty() && cfg.data != DataSource::Files,
            "data" => false, // has a default but kept for clarity
            "tasks" => {
                cfg.tasks == 0 && matches!(cfg.data, DataSource::Synthetic | DataSource::Permuted)
            }
            _ => false,
        };
        if missing {
            return Err(Error::ConfigValue(format!("missing required key {key:?}")));
        }
    }
    if cfg.data == DataSource::Files && cfg.data_files.is_empty() {
        return Err(Error::ConfigValue(
            "missing required key \"data_files\" for data = files".into(),
        ));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::ConfigValue(format!("cannot parse {what} from {value:?}")))
}

fn apply_key(cfg: &mut RunConfig, prune: &mut PruneDraft, key: &str, value: &str) -> Result<()> {
    match key {
        "mode" => cfg.experiment.mode = Mode::parse(value)?,
        "epochs" => cfg.experiment.epochs = parse_num(value, "epochs")?,
        "warmup_epochs" => cfg.experiment.warmup_epochs = parse_num(value, "warmup_epochs")?,
        "alpha" => cfg.experiment.alpha = parse_num(value, "alpha")?,
        "lr" => cfg.experiment.lr = parse_num(value, "lr")?,
        "lambda0" => cfg.experiment.lambda0 = parse_num(value, "lambda0")?,
        "lambda1" => cfg.experiment.lambda1 = parse_num(value, "lambda1")?,
        "batch_size" => cfg.experiment.batch_size = parse_num(value, "batch_size")?,
        "seed" => cfg.experiment.seed = parse_num(value, "seed")?,
        "prune" => prune.mode = Some(value.to_string()),
        "prune_tau" => prune.tau = parse_num(value, "prune_tau")?,
        "prune_gamma" => prune.gamma = Some(parse_num(value, "prune_gamma")?),
        "prune_trigger" => cfg.experiment.prune_trigger = parse_num(value, "prune_trigger")?,
        "arch" => cfg.arch = parse_arch(value)?,
        "data" => cfg.data = DataSource::parse(value)?,
        "tasks" => cfg.tasks = parse_num(value, "tasks")?,
        "classes" => cfg.classes = parse_num(value, "classes")?,
        "dims" => cfg.dims = parse_num(value, "dims")?,
        "samples_per_class" => cfg.samples_per_class = parse_num(value, "samples_per_class")?,
        "noise" => cfg.noise = parse_num(value, "noise")?,
        "data_seed" => cfg.data_seed = parse_num(value, "data_seed")?,
        "image" => {
            let dims: Vec<usize> = value
                .split(',')
                .map(|v| parse_num(v.trim(), "image dim"))
                .collect::<Result<_>>()?;
            if dims.len() != 3 {
                return Err(Error::ConfigValue(format!(
                    "image expects C,H,W, found {value:?}"
                )));
            }
            cfg.image = Some((dims[0], dims[1], dims[2]));
        }
        "classes_per_task" => cfg.classes_per_task = parse_num(value, "classes_per_task")?,
        "order" => cfg.order = Some(parse_order_list(value)?),
        "data_files" => {
            cfg.data_files = value.split(',').map(|p| PathBuf::from(p.trim())).collect();
        }
        "out" => cfg.out = PathBuf::from(value),
        other => {
            return Err(Error::ConfigValue(format!("unknown key {other:?}")));
        }
    }
    Ok(())
}

fn finish_prune(cfg: &mut RunConfig, prune: PruneDraft) -> Result<()> {
    cfg.explicit_gamma = prune.gamma.is_some();
    let mode = match prune.mode.as_deref() {
        None | Some("off") => {
            cfg.experiment.prune = None;
            return Ok(());
        }
        Some("absolute") => PruneMode::Absolute,
        Some("percentile") => PruneMode::Percentile,
        Some("mixed") => PruneMode::Mixed,
        Some(other) => {
            return Err(Error::ConfigValue(format!(
                "unknown prune mode {other:?} (expected off, absolute, percentile or mixed)"
            )))
        }
    };
    // Without an explicit gamma the retention target follows the trigger.
    let gamma = prune.gamma.unwrap_or(cfg.experiment.prune_trigger);
    cfg.experiment.prune = Some(PruneSpec {
        mode,
        tau: prune.tau,
        gamma,
    });
    Ok(())
}

/// Accepts orders both as bare comma lists (`2,0,1`) and bracketed lists
/// copied verbatim from papers or notebooks (`[2, 0, 1]`).
pub fn parse_order_list(value: &str) -> Result<Vec<usize>> {
    let trimmed = value.trim().trim_start_matches('[').trim_end_matches(']');
    trimmed
        .split(',')
        .map(|v| parse_num(v.trim(), "order entry"))
        .collect()
}

/// Architecture grammar: whitespace- or comma-separated tokens of
/// `dense(OUT)`, `conv(K,OUT[,STRIDE[,PAD]])`, `relu`, `maxpool(S)`,
/// `flatten`.
pub fn parse_arch(value: &str) -> Result<Vec<ArchToken>> {
    let mut out = Vec::new();
    for token in value
        .split(|c: char| c.is_whitespace())
        .filter(|t| !t.is_empty())
    {
        let token = token.trim_end_matches(',');
        if token.is_empty() {
            continue;
        }
        let parsed = if token == "relu" {
            ArchToken::Relu
        } else if token == "flatten" {
            ArchToken::Flatten
        } else if let Some(args) = token
            .strip_prefix("dense(")
            .and_then(|t| t.strip_suffix(')'))
        {
            ArchToken::Dense(parse_num(args.trim(), "dense width")?)
        } else if let Some(args) = token
            .strip_prefix("maxpool(")
            .and_then(|t| t.strip_suffix(')'))
        {
            ArchToken::MaxPool(parse_num(args.trim(), "pool size")?)
        } else if let Some(args) = token
            .strip_prefix("conv(")
            .and_then(|t| t.strip_suffix(')'))
        {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            if parts.len() < 2 || parts.len() > 4 {
                return Err(Error::ConfigValue(format!(
                    "conv expects (kernel, out[, stride[, padding]]), found {token:?}"
                )));
            }
            ArchToken::Conv {
                kernel: parse_num(parts[0], "conv kernel")?,
                out_channels: parse_num(parts[1], "conv out channels")?,
                stride: if parts.len() > 2 {
                    parse_num(parts[2], "conv stride")?
                } else {
                    1
                },
                padding: if parts.len() > 3 {
                    parse_num(parts[3], "conv padding")?
                } else {
                    0
                },
            }
        } else {
            return Err(Error::ConfigValue(format!("unknown arch token {token:?}")));
        };
        out.push(parsed);
    }
    Ok(out)
}

/// Resolve tokens against the input shape, inferring every in-dimension.
pub fn resolve_arch(tokens: &[ArchToken], input_shape: Shape) -> Result<Vec<LayerSpec>> {
    let mut shape = input_shape;
    let mut specs = Vec::with_capacity(tokens.len());
    for token in tokens {
        let spec = match *token {
            ArchToken::Dense(out_dim) => {
                let spec = LayerSpec::Dense {
                    in_dim: shape.len(),
                    out_dim,
                };
                shape = Shape::Flat(out_dim);
                spec
            }
            ArchToken::Conv {
                kernel,
                out_channels,
                stride,
                padding,
            } => {
                let Shape::Image {
                    channels,
                    height,
                    width,
                } = shape
                else {
                    return Err(Error::ConfigValue(
                        "conv needs an image input; set the `image` key".into(),
                    ));
                };
                let spec = LayerSpec::Conv2d {
                    kernel,
                    in_channels: channels,
                    out_channels,
                    stride,
                    padding,
                };
                let span = |dim: usize| -> Result<usize> {
                    if dim + 2 * padding < kernel
                        || !(dim + 2 * padding - kernel).is_multiple_of(stride)
                    {
                        return Err(Error::ConfigValue(format!(
                            "conv geometry does not tile {height}x{width}"
                        )));
                    }
                    Ok((dim + 2 * padding - kernel) / stride + 1)
                };
                shape = Shape::Image {
                    channels: out_channels,
                    height: span(height)?,
                    width: span(width)?,
                };
                spec
            }
            ArchToken::Relu => LayerSpec::Relu,
            ArchToken::MaxPool(size) => {
                let Shape::Image {
                    channels,
                    height,
                    width,
                } = shape
                else {
                    return Err(Error::ConfigValue("maxpool needs an image input".into()));
                };
                if size == 0 || height % size != 0 || width % size != 0 {
                    return Err(Error::ConfigValue(format!(
                        "pool size {size} does not tile {height}x{width}"
                    )));
                }
                shape = Shape::Image {
                    channels,
                    height: height / size,
                    width: width / size,
                };
                LayerSpec::MaxPool { size }
            }
            ArchToken::Flatten => {
                shape = Shape::Flat(shape.len());
                LayerSpec::Flatten
            }
        };
        specs.push(spec);
    }
    Ok(specs)
}

fn fmt_arch(tokens: &[ArchToken]) -> String {
    tokens
        .iter()
        .map(|t| match t {
            ArchToken::Dense(n) => format!("dense({n})"),
            ArchToken::Conv {
                kernel,
                out_channels,
                stride,
                padding,
            } => format!("conv({kernel},{out_channels},{stride},{padding})"),
            ArchToken::Relu => "relu".to_string(),
            ArchToken::MaxPool(s) => format!("maxpool({s})"),
            ArchToken::Flatten => "flatten".to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl RunConfig {
    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let e = &self.experiment;
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", e.mode.as_str());
        let _ = writeln!(s, "epochs = {}", e.epochs);
        let _ = writeln!(s, "warmup_epochs = {}", e.warmup_epochs);
        let _ = writeln!(s, "alpha = {}", e.alpha);
        let _ = writeln!(s, "lr = {}", e.lr);
        let _ = writeln!(s, "lambda0 = {}", e.lambda0);
        let _ = writeln!(s, "lambda1 = {}", e.lambda1);
        let _ = writeln!(s, "batch_size = {}", e.batch_size);
        let _ = writeln!(s, "seed = {}", e.seed);
        match &e.prune {
            None => {
                let _ = writeln!(s, "prune = off");
            }
            Some(p) => {
                let mode = match p.mode {
                    PruneMode::Absolute => "absolute",
                    PruneMode::Percentile => "percentile",
                    PruneMode::Mixed => "mixed",
                };
                let _ = writeln!(s, "prune = {mode}");
                let _ = writeln!(s, "prune_tau = {}", p.tau);
                let _ = writeln!(s, "prune_gamma = {}", p.gamma);
            }
        }
        let _ = writeln!(s, "prune_trigger = {}", e.prune_trigger);
        let _ = writeln!(s, "arch = {}", fmt_arch(&self.arch));
        let _ = writeln!(s, "data = {}", self.data.as_str());
        let _ = writeln!(s, "tasks = {}", self.tasks);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "dims = {}", self.dims);
        let _ = writeln!(s, "samples_per_class = {}", self.samples_per_class);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        if let Some((c, h, w)) = self.image {
            let _ = writeln!(s, "image = {c},{h},{w}");
        }
        if self.data == DataSource::Split {
            let _ = writeln!(s, "classes_per_task = {}", self.classes_per_task);
        }
        if let Some(order) = &self.order {
            let list = order
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(s, "order = {list}");
        }
        if !self.data_files.is_empty() {
            let list = self
                .data_files
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(s, "data_files = {list}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# training
mode = halrp
epochs = 20
alpha = 0.9          # coverage
arch = dense(16) relu
data = permuted
tasks = 5
dims = 24
";

    #[test]
    fn parses_sample_with_comments() {
        let cfg = parse_config(SAMPLE).unwrap();
        assert_eq!(cfg.experiment.epochs, 20);
        assert_eq!(cfg.tasks, 5);
        assert_eq!(cfg.dims, 24);
        assert_eq!(cfg.arch, vec![ArchToken::Dense(16), ArchToken::Relu]);
        check_required(&cfg).unwrap();
    }

    #[test]
    fn unknown_key_names_line() {
        let err = parse_config("epochs = 5\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("learning_rate"), "{msg}");
            }
            other => panic!("expected line-numbered error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(parse_config("epochs = 5\nepochs = 6\n").is_err());
    }

    #[test]
    fn missing_required_key_named() {
        let cfg = parse_config("data = permuted\narch = dense(8)\n").unwrap();
        let err = check_required(&cfg).unwrap_err();
        assert!(err.to_string().contains("tasks"), "{err}");
    }

    #[test]
    fn prune_defaults_gamma_to_trigger() {
        let cfg = parse_config(
            "prune = percentile\nprune_trigger = 0.3\narch = dense(4)\ndata = permuted\ntasks = 2\n",
        )
        .unwrap();
        let spec = cfg.experiment.prune.unwrap();
        assert_eq!(spec.gamma, 0.3);
        assert!(!cfg.explicit_gamma);

        let cfg = parse_config(
            "prune = mixed\nprune_gamma = 0.5\narch = dense(4)\ndata = permuted\ntasks = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment.prune.unwrap().gamma, 0.5);
        assert!(cfg.explicit_gamma);
    }

    #[test]
    fn arch_grammar() {
        let tokens = parse_arch("conv(3,8,1,1) relu maxpool(2) flatten dense(10)").unwrap();
        assert_eq!(tokens.len(), 5);
        let specs = resolve_arch(
            &tokens,
            Shape::Image {
                channels: 1,
                height: 8,
                width: 8,
            },
        )
        .unwrap();
        assert_eq!(
            specs[0],
            LayerSpec::Conv2d {
                kernel: 3,
                in_channels: 1,
                out_channels: 8,
                stride: 1,
                padding: 1
            }
        );
        assert_eq!(
            specs[4],
            LayerSpec::Dense {
                in_dim: 8 * 4 * 4,
                out_dim: 10
            }
        );
        assert!(parse_arch("densely(4)").is_err());
        assert!(resolve_arch(&parse_arch("conv(3,4)").unwrap(), Shape::Flat(9)).is_err());
    }

    #[test]
    fn order_list_accepts_brackets() {
        assert_eq!(parse_order_list("[2, 0, 1]").unwrap(), vec![2, 0, 1]);
        assert_eq!(parse_order_list("2,0,1").unwrap(), vec![2, 0, 1]);
        assert!(parse_order_list("2,x").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = parse_config(SAMPLE).unwrap();
        cfg.order = Some(vec![2, 0, 1, 3, 4]);
        let text = cfg.to_text();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
