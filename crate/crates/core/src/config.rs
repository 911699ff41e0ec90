//! Line-based `key = value` run configuration. `#` starts a comment; unknown
//! keys are rejected; relative paths resolve against the config file's
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{HgclError, Result};
use crate::polar::RadialMode;
use crate::pretrain::TrainConfig;
use crate::tsne::{HighDimKernel, TsneConfig};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepGrid {
    pub rho: Vec<usize>,
    pub theta: Vec<usize>,
    pub perplexity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Shared by both training stages; `epochs` is the pre-training budget.
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    /// Share of training edges held out for best-epoch selection; 0 disables
    /// selection.
    pub validation_fraction: f64,
    pub tsne: TsneConfig,
    pub rho: usize,
    pub theta: usize,
    pub radial_mode: RadialMode,
    pub topk: usize,
    pub strength_negatives: usize,
    pub strength_bins: usize,
    pub sweep: SweepGrid,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train_path: None,
            test_path: None,
            out_dir: PathBuf::from("run"),
            train: TrainConfig::default(),
            finetune_epochs: 50,
            validation_fraction: 0.05,
            tsne: TsneConfig::default(),
            rho: 1,
            theta: 4,
            radial_mode: RadialMode::Quantile,
            topk: 20,
            strength_negatives: 10,
            strength_bins: 50,
            sweep: SweepGrid::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HgclError::config(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn format_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "train" => self.train_path = Some(base.join(v)),
            "test" => self.test_path = Some(base.join(v)),
            "out" => self.out_dir = base.join(v),
            "d" => t.d = parse_num(key, v)?,
            "layers" => t.layers = parse_num(key, v)?,
            "cl_layer" => t.cl_layer = parse_num(key, v)?,
            "lambda" => t.lambda = parse_num(key, v)?,
            "epsilon" => t.epsilon = parse_num(key, v)?,
            "tau" => t.tau = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "pretrain_epochs" => t.epochs = parse_num(key, v)?,
            "l2" => t.l2_coeff = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "patience" => {
                let p: usize = parse_num(key, v)?;
                t.patience = (p > 0).then_some(p);
            }
            "finetune_epochs" => self.finetune_epochs = parse_num(key, v)?,
            "validation_fraction" => self.validation_fraction = parse_num(key, v)?,
            "perplexity" => self.tsne.perplexity = parse_num(key, v)?,
            "tsne_iters" => self.tsne.iters = parse_num(key, v)?,
            "tsne_learning_rate" => self.tsne.learning_rate = parse_num(key, v)?,
            "tsne_exaggeration" => self.tsne.early_exaggeration = parse_num(key, v)?,
            "tsne_exaggeration_iters" => self.tsne.exaggeration_iters = parse_num(key, v)?,
            "tsne_max_points" => self.tsne.max_points = parse_num(key, v)?,
            "tsne_kernel" => {
                self.tsne.kernel = match v {
                    "gaussian" => HighDimKernel::Gaussian,
                    "student_t" => HighDimKernel::StudentT,
                    _ => return Err(HgclError::config(key, "expected `gaussian` or `student_t`")),
                }
            }
            "rho" => self.rho = parse_num(key, v)?,
            "theta" => self.theta = parse_num(key, v)?,
            "radial_mode" => {
                self.radial_mode = match v {
                    "quantile" => RadialMode::Quantile,
                    "equal_radius" => RadialMode::EqualRadius,
                    _ => return Err(HgclError::config(key, "expected `quantile` or `equal_radius`")),
                }
            }
            "topk" => self.topk = parse_num(key, v)?,
            "strength_negatives" => self.strength_negatives = parse_num(key, v)?,
            "strength_bins" => self.strength_bins = parse_num(key, v)?,
            "sweep_rho" => self.sweep.rho = parse_list(key, v)?,
            "sweep_theta" => self.sweep.theta = parse_list(key, v)?,
            "sweep_perplexity" => self.sweep.perplexity = parse_list(key, v)?,
            _ => return Err(HgclError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |key: &str, msg: &str| Err(HgclError::config(key, msg));
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must lie in [0, 1)");
        }
        if !(self.tsne.perplexity > 1.0) {
            return bad("perplexity", "must be > 1");
        }
        if self.tsne.iters == 0 {
            return bad("tsne_iters", "must be >= 1");
        }
        if !(self.tsne.learning_rate > 0.0) {
            return bad("tsne_learning_rate", "must be > 0");
        }
        if !(self.tsne.early_exaggeration >= 1.0) {
            return bad("tsne_exaggeration", "must be >= 1");
        }
        if self.rho == 0 {
            return bad("rho", "must be >= 1");
        }
        if self.theta == 0 {
            return bad("theta", "must be >= 1");
        }
        if self.topk == 0 {
            return bad("topk", "must be >= 1");
        }
        if self.strength_bins == 0 {
            return bad("strength_bins", "must be >= 1");
        }
        if self.sweep.rho.contains(&0) {
            return bad("sweep_rho", "values must be >= 1");
        }
        if self.sweep.theta.contains(&0) {
            return bad("sweep_theta", "values must be >= 1");
        }
        if self.sweep.perplexity.iter().any(|&p| !(p > 1.0)) {
            return bad("sweep_perplexity", "values must be > 1");
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("train", path(&self.train_path)),
            ("test", path(&self.test_path)),
            ("out", self.out_dir.display().to_string()),
            ("d", t.d.to_string()),
            ("layers", t.layers.to_string()),
            ("cl_layer", t.cl_layer.to_string()),
            ("lambda", t.lambda.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("tau", t.tau.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("pretrain_epochs", t.epochs.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("l2", t.l2_coeff.to_string()),
            ("seed", t.seed.to_string()),
            ("patience", t.patience.unwrap_or(0).to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("perplexity", self.tsne.perplexity.to_string()),
            ("tsne_iters", self.tsne.iters.to_string()),
            ("tsne_learning_rate", self.tsne.learning_rate.to_string()),
            ("tsne_exaggeration", self.tsne.early_exaggeration.to_string()),
            ("tsne_exaggeration_iters", self.tsne.exaggeration_iters.to_string()),
            ("tsne_max_points", self.tsne.max_points.to_string()),
            (
                "tsne_kernel",
                match self.tsne.kernel {
                    HighDimKernel::Gaussian => "gaussian",
                    HighDimKernel::StudentT => "student_t",
                }
                .into(),
            ),
            ("rho", self.rho.to_string()),
            ("theta", self.theta.to_string()),
            (
                "radial_mode",
                match self.radial_mode {
                    RadialMode::Quantile => "quantile",
                    RadialMode::EqualRadius => "equal_radius",
                }
                .into(),
            ),
            ("topk", self.topk.to_string()),
            ("strength_negatives", self.strength_negatives.to_string()),
            ("strength_bins", self.strength_bins.to_string()),
            ("sweep_rho", format_list(&self.sweep.rho)),
            ("sweep_theta", format_list(&self.sweep.theta)),
            ("sweep_perplexity", format_list(&self.sweep.perplexity)),
        ]
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// `key = value` text that parses back to this config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Fine-tuning uses the shared training settings with its own budget.
    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            ..self.train.clone()
        }
    }
}

pub fn parse_config_str(text: &str, base: &Path) -> Result<Config> {
    let mut cfg = Config::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| HgclError::Parse {
            path: base.to_path_buf(),
            line: idx + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        cfg.set(key.trim(), value, base)?;
    }
    cfg.out_dir = base.join(&cfg.out_dir);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| HgclError::io(path, e))?;
    let parent = path.parent().unwrap_or(Path::new("."));
    let base = std::path::absolute(parent).map_err(|e| HgclError::io(parent, e))?;
    parse_config_str(&text, &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Config> {
        parse_config_str(s, Path::new("/cfg"))
    }

    #[test]
    fn empty_is_default() {
        let c = parse("").unwrap();
        assert_eq!(c.out_dir, PathBuf::from("/cfg/run"));
        assert_eq!(
            c,
            Config {
                out_dir: c.out_dir.clone(),
                ..Config::default()
            }
        );
        assert_eq!((c.train.d, c.train.batch_size, c.train.lr), (64, 2048, 1e-4));
    }

    #[test]
    fn rejects_with_key_name() {
        let err = parse("tau = -1").unwrap_err();
        assert!(matches!(&err, HgclError::Config { key, .. } if key == "tau"), "{err}");
        assert!(matches!(parse("bogus = 1"), Err(HgclError::Config { key, .. }) if key == "bogus"));
        assert!(matches!(parse("d = x"), Err(HgclError::Config { key, .. }) if key == "d"));
        assert!(matches!(parse("rho = 0"), Err(HgclError::Config { key, .. }) if key == "rho"));
        assert!(parse("just words").is_err());
    }

    #[test]
    fn lists_paths_and_comments() {
        let c = parse("train = data/t.txt # comment\nsweep_rho = 1, 4\nsweep_perplexity=5,30\n").unwrap();
        assert_eq!(c.train_path, Some(PathBuf::from("/cfg/data/t.txt")));
        assert_eq!(c.sweep.rho, vec![1, 4]);
        assert_eq!(c.sweep.perplexity, vec![5.0, 30.0]);
    }

    #[test]
    fn entries_roundtrip() {
        let c = parse("lambda = 0.05\nrho = 4\ntheta = 8\ntsne_kernel = student_t\nsweep_theta = 2,4\n").unwrap();
        let back = parse_config_str(&c.to_text(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }
}
