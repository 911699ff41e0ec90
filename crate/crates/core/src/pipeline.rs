//! Stage orchestration over a run directory:
//! pretrain → reduce → cluster → finetune → evaluate, plus grid sweeps.
//! Each stage records a fingerprint of its config keys, data files and input
//! artifacts in `manifest.json`; a stage whose fingerprint and outputs are
//! unchanged is skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_blocks, write_checkpoint};
use crate::config::{parse_config, parse_config_str, Config};
use crate::embedding::propagate_clean;
use crate::error::{HgclError, Result};
use crate::eval::{evaluate, strength_stats, DotScorer, EvalReport, StrengthStats};
use crate::finetune::{finetune, init_finetune, HgclModel};
use crate::graph::{build_graph, load_interactions, normalize_adjacency, BipartiteGraph, Split};
use crate::hierarchy::build_user_cluster_graph;
use crate::matrix::Matrix;
use crate::polar::{polar_partition_with, ClusterAssignment};
use crate::pretrain::pretrain;
use crate::rng::{derive_seed, stage_rng};
use crate::tsne::tsne_embed;

pub const PRETRAINED: &str = "pretrained.emb";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const ITEM_COORDS: &str = "item_coords.csv";
pub const CLUSTERS: &str = "clusters.csv";
pub const FINETUNED: &str = "finetuned.emb";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const EVAL_REPORT: &str = "eval_report.csv";
pub const STRENGTH_HIST: &str = "strength_hist.csv";
pub const MANIFEST: &str = "manifest.json";
pub const SWEEP: &str = "sweep.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain,
    Reduce,
    Cluster,
    Finetune,
    Evaluate,
}

const TRAIN_KEYS: &[&str] = &[
    "d",
    "layers",
    "cl_layer",
    "lambda",
    "epsilon",
    "tau",
    "lr",
    "batch_size",
    "l2",
    "seed",
    "patience",
    "validation_fraction",
    "topk",
];

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Pretrain,
        Stage::Reduce,
        Stage::Cluster,
        Stage::Finetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Reduce => "reduce",
            Stage::Cluster => "cluster",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Upstream artifacts and the stage that produces each.
    pub fn inputs(self) -> &'static [(&'static str, Stage)] {
        match self {
            Stage::Pretrain => &[],
            Stage::Reduce => &[(PRETRAINED, Stage::Pretrain)],
            Stage::Cluster => &[(ITEM_COORDS, Stage::Reduce)],
            Stage::Finetune => &[(PRETRAINED, Stage::Pretrain), (CLUSTERS, Stage::Cluster)],
            Stage::Evaluate => &[
                (PRETRAINED, Stage::Pretrain),
                (CLUSTERS, Stage::Cluster),
                (FINETUNED, Stage::Finetune),
            ],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Pretrain => &[PRETRAINED, PRETRAIN_METRICS],
            Stage::Reduce => &[ITEM_COORDS],
            Stage::Cluster => &[CLUSTERS],
            Stage::Finetune => &[FINETUNED, FINETUNE_METRICS],
            Stage::Evaluate => &[EVAL_REPORT, STRENGTH_HIST],
        }
    }

    fn config_keys(self) -> Vec<&'static str> {
        let own: &[&str] = match self {
            Stage::Pretrain => &["pretrain_epochs"],
            Stage::Reduce => &[
                "seed",
                "perplexity",
                "tsne_iters",
                "tsne_learning_rate",
                "tsne_exaggeration",
                "tsne_exaggeration_iters",
                "tsne_max_points",
                "tsne_kernel",
            ],
            Stage::Cluster => &["rho", "theta", "radial_mode"],
            Stage::Finetune => &["finetune_epochs", "rho", "theta"],
            Stage::Evaluate => &["seed", "topk", "rho", "theta", "layers", "strength_negatives", "strength_bins"],
        };
        match self {
            Stage::Pretrain | Stage::Finetune => TRAIN_KEYS.iter().chain(own).copied().collect(),
            _ => own.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| HgclError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HgclError::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("invalid manifest: {e}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| HgclError::io(path, e))
    }

    /// The run configuration recorded in the manifest.
    pub fn to_config(&self) -> Result<Config> {
        let text: String = self
            .config
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        parse_config_str(&text, Path::new("/"))
    }
}

/// Reads a `key = value` config, or the config recorded in a `.json`
/// manifest.
pub fn load_config(path: &Path) -> Result<Config> {
    if path.extension().is_some_and(|e| e == "json") {
        RunManifest::load(path)?.to_config()
    } else {
        parse_config(path)
    }
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| HgclError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HgclError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub force: bool,
    /// Worker count for evaluation; results do not depend on it.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            force: false,
            threads: 1,
        }
    }
}

/// `HGCL_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var("HGCL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

struct Data {
    /// Item keys by dense id; artifact CSVs identify items by key.
    item_keys: Vec<String>,
    train: BipartiteGraph,
    test: Option<BipartiteGraph>,
    /// Training edges minus the validation holdout.
    fit: BipartiteGraph,
    validation: Option<BipartiteGraph>,
    digests: Vec<(String, String)>,
}

fn load_data(cfg: &Config) -> Result<Data> {
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| HgclError::config("train", "no training file configured"))?;
    let train_ds = load_interactions(train_path, Split::Train)?;
    let train = build_graph(&train_ds)?;
    let mut digests = vec![("train".to_string(), digest_file(train_path)?)];
    let test = match &cfg.test_path {
        Some(p) => {
            let ds = load_interactions(p, Split::Test(&train_ds))?;
            if ds.dropped > 0 {
                info!("{} test records with unknown keys dropped", ds.dropped);
            }
            digests.push(("test".to_string(), digest_file(p)?));
            Some(BipartiteGraph::from_pairs(train.m, train.n, &ds.pairs))
        }
        None => None,
    };
    let (fit, validation) = if cfg.validation_fraction > 0.0 {
        let mut rng = stage_rng(cfg.train.seed, "validation");
        let (fit, held) = train.split_holdout(cfg.validation_fraction, &mut rng);
        let val = BipartiteGraph::from_pairs(train.m, train.n, &held);
        (fit, (val.edge_count() > 0).then_some(val))
    } else {
        (train.clone(), None)
    };
    Ok(Data {
        item_keys: train_ds.item_keys,
        train,
        test,
        fit,
        validation,
        digests,
    })
}

/// One row of `eval_report.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub users: usize,
    pub train_pos_mean: f64,
    pub test_pos_mean: f64,
    pub neg_mean: f64,
}

pub fn read_eval_report(path: &Path) -> Result<Vec<EvalRow>> {
    let text = fs::read_to_string(path).map_err(|e| HgclError::io(path, e))?;
    let bad = |line: usize, msg: &str| HgclError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(idx + 1, "expected 8 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(idx + 1, "bad number"));
        rows.push(EvalRow {
            model: f[0].to_string(),
            k: f[1].parse().map_err(|_| bad(idx + 1, "bad k"))?,
            recall: num(f[2])?,
            ndcg: num(f[3])?,
            users: f[4].parse().map_err(|_| bad(idx + 1, "bad user count"))?,
            train_pos_mean: num(f[5])?,
            test_pos_mean: num(f[6])?,
            neg_mean: num(f[7])?,
        });
    }
    Ok(rows)
}

fn read_csv_rows(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| HgclError::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(idx, line)| {
            let f: Vec<String> = line.split(',').map(str::to_string).collect();
            if f.len() == fields {
                Ok(f)
            } else {
                Err(HgclError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("expected {fields} fields"),
                })
            }
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| HgclError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse `{s}`"),
    })
}

pub struct Pipeline {
    cfg: Config,
    opts: RunOptions,
    out: PathBuf,
    /// Read `pretrained.emb` from here instead of the run directory.
    shared_pretrained: Option<PathBuf>,
    data: Option<Data>,
    manifest: RunManifest,
}

impl Pipeline {
    pub fn new(cfg: Config, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| HgclError::io(&out, e))?;
        let mpath = out.join(MANIFEST);
        let manifest = if mpath.exists() {
            RunManifest::load(&mpath).unwrap_or_else(|e| {
                warn!("ignoring unreadable manifest: {e}");
                RunManifest::default()
            })
        } else {
            RunManifest::default()
        };
        Ok(Pipeline {
            cfg,
            opts,
            out,
            shared_pretrained: None,
            data: None,
            manifest,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        match &self.shared_pretrained {
            Some(p) if name == PRETRAINED => p.clone(),
            _ => self.out.join(name),
        }
    }

    fn data(&mut self) -> Result<&Data> {
        if self.data.is_none() {
            self.data = Some(load_data(&self.cfg)?);
        }
        Ok(self.data.as_ref().expect("loaded"))
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.train.seed, label)
    }

    fn fingerprint(&mut self, stage: Stage) -> Result<(String, BTreeMap<String, String>)> {
        let entries: BTreeMap<&str, String> = self.cfg.entries().into_iter().collect();
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        for key in stage.config_keys() {
            h.update(format!("\n{key}={}", entries[key]).as_bytes());
        }
        for (name, digest) in &self.data()?.digests {
            h.update(format!("\n{name}:{digest}").as_bytes());
        }
        let mut inputs = BTreeMap::new();
        for &(name, producer) in stage.inputs() {
            let path = self.artifact(name);
            if !path.exists() {
                return Err(HgclError::MissingArtifact {
                    stage: stage.name().into(),
                    artifact: name.into(),
                    run_first: producer.name().into(),
                });
            }
            let digest = digest_file(&path)?;
            h.update(format!("\n{name}:{digest}").as_bytes());
            inputs.insert(name.to_string(), digest);
        }
        Ok((hex::encode(h.finalize()), inputs))
    }

    fn up_to_date(&self, stage: Stage, fingerprint: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(stage.name()) else {
            return false;
        };
        rec.fingerprint == fingerprint
            && stage.outputs().iter().all(|name| {
                let path = self.out.join(name);
                rec.outputs
                    .get(*name)
                    .is_some_and(|d| digest_file(&path).is_ok_and(|cur| &cur == d))
            })
    }

    /// Runs the given stages in pipeline order.
    pub fn run(&mut self, stages: &[Stage]) -> Result<Vec<(Stage, StageStatus)>> {
        let mut order = stages.to_vec();
        order.sort_unstable();
        order.dedup();
        let mut report = Vec::new();
        for stage in order {
            report.push((stage, self.run_stage(stage)?));
        }
        Ok(report)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<StageStatus> {
        let (fingerprint, inputs) = self.fingerprint(stage)?;
        if !self.opts.force && self.up_to_date(stage, &fingerprint) {
            info!("{}: up to date", stage.name());
            return Ok(StageStatus::Skipped);
        }
        info!("{}: running", stage.name());
        let started = now();
        match stage {
            Stage::Pretrain => self.stage_pretrain()?,
            Stage::Reduce => self.stage_reduce()?,
            Stage::Cluster => self.stage_cluster()?,
            Stage::Finetune => self.stage_finetune()?,
            Stage::Evaluate => self.stage_evaluate()?,
        }
        let mut outputs = BTreeMap::new();
        for name in stage.outputs() {
            outputs.insert(name.to_string(), digest_file(&self.out.join(name))?);
        }
        self.manifest.config = self.cfg.snapshot();
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                fingerprint,
                started,
                finished: now(),
                inputs,
                outputs,
            },
        );
        self.manifest.save(&self.out.join(MANIFEST))?;
        Ok(StageStatus::Ran)
    }

    fn stage_pretrain(&mut self) -> Result<()> {
        let threads = self.opts.threads;
        let k = self.cfg.topk;
        let cfg = self.cfg.train.clone();
        let rng = stage_rng(cfg.seed, "pretrain");
        self.data()?;
        let data = self.data.as_ref().expect("loaded");
        let m = data.train.m;
        let mut csv = String::from("epoch,l_rec,l_cl,l2,total,val_recall,recall,ndcg\n");
        let outcome = pretrain(&data.fit, &cfg, rng, |loss, state| {
            let scorer = DotScorer::from_pooled(&state.pooled, m);
            let val = data
                .validation
                .as_ref()
                .map(|v| evaluate(&scorer, &data.fit, v, k, threads))
                .transpose()?;
            let test = data
                .test
                .as_ref()
                .filter(|t| t.edge_count() > 0)
                .map(|t| evaluate(&scorer, &data.train, t, k, threads))
                .transpose()?;
            let s = &loss.sum;
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                loss.epoch,
                s.rec,
                s.cl,
                s.l2,
                s.total,
                opt(val.as_ref().map(|r| r.recall)),
                opt(test.as_ref().map(|r| r.recall)),
                opt(test.as_ref().map(|r| r.ndcg)),
            )
            .expect("write to string");
            info!("pretrain epoch {} loss {:.6}", loss.epoch, s.total);
            Ok(val.map(|r| r.recall))
        })?;
        info!("pretrain: selected epoch {}", outcome.best_epoch);
        let full = propagate_clean(&normalize_adjacency(&data.train), &outcome.params, cfg.layers)?;
        write_checkpoint(&self.out.join(PRETRAINED), &[&outcome.params, &full.pooled])?;
        write_text(&self.out.join(PRETRAIN_METRICS), &csv)
    }

    fn read_pretrained(&mut self) -> Result<(Matrix, Matrix)> {
        let (m, n) = {
            let d = self.data()?;
            (d.train.m, d.train.n)
        };
        let path = self.artifact(PRETRAINED);
        let mut blocks = read_blocks(&path, 2)?;
        if blocks.iter().any(|b| b.rows() != m + n) {
            return Err(HgclError::Checkpoint {
                path,
                msg: format!("expected {} rows per block", m + n),
            });
        }
        let pooled = blocks.pop().expect("two blocks");
        let params = blocks.pop().expect("two blocks");
        Ok((params, pooled))
    }

    fn stage_reduce(&mut self) -> Result<()> {
        let (_, pooled) = self.read_pretrained()?;
        let m = self.data()?.train.m;
        let items = pooled.slice_rows(m, pooled.rows());
        let mut tsne = self.cfg.tsne.clone();
        tsne.seed = self.seed("reduce");
        let proj = tsne_embed(&items, &tsne)?;
        info!("reduce: KL {:.4} -> {:.4}", proj.initial_kl, proj.final_kl);
        let keys = &self.data()?.item_keys;
        let mut csv = String::from("item_id,x,y\n");
        for (j, key) in keys.iter().enumerate() {
            writeln!(csv, "{key},{},{}", proj.coords[(j, 0)], proj.coords[(j, 1)]).expect("write to string");
        }
        write_text(&self.out.join(ITEM_COORDS), &csv)
    }

    /// Rows of a per-item CSV, checked to list every item key in id order.
    fn read_item_csv(&mut self, name: &str, fields: usize) -> Result<(PathBuf, Vec<Vec<String>>)> {
        let path = self.out.join(name);
        let rows = read_csv_rows(&path, fields)?;
        let keys = &self.data()?.item_keys;
        if rows.len() != keys.len() {
            return Err(HgclError::Dimension(format!(
                "{name} has {} rows, expected {}",
                rows.len(),
                keys.len()
            )));
        }
        if let Some(idx) = rows.iter().zip(keys).position(|(r, k)| &r[0] != k) {
            return Err(HgclError::Parse {
                path,
                line: idx + 2,
                msg: format!("expected item `{}`", keys[idx]),
            });
        }
        Ok((path, rows))
    }

    fn read_coords(&mut self) -> Result<Matrix> {
        let (path, rows) = self.read_item_csv(ITEM_COORDS, 3)?;
        let mut coords = Matrix::zeros(rows.len(), 2);
        for (j, r) in rows.iter().enumerate() {
            coords[(j, 0)] = parse_field(&path, j + 2, &r[1])?;
            coords[(j, 1)] = parse_field(&path, j + 2, &r[2])?;
        }
        Ok(coords)
    }

    fn stage_cluster(&mut self) -> Result<()> {
        let coords = self.read_coords()?;
        let a = polar_partition_with(&coords, self.cfg.rho, self.cfg.theta, self.cfg.radial_mode)?;
        let empty = a.sizes.iter().filter(|&&s| s == 0).count();
        info!("cluster: {} clusters, {empty} empty", a.num_clusters());
        let keys = &self.data()?.item_keys;
        let mut csv = String::from("item_id,cluster_id\n");
        for (key, k) in keys.iter().zip(&a.assign) {
            writeln!(csv, "{key},{k}").expect("write to string");
        }
        write_text(&self.out.join(CLUSTERS), &csv)
    }

    fn read_clusters(&mut self) -> Result<ClusterAssignment> {
        let (path, rows) = self.read_item_csv(CLUSTERS, 2)?;
        let assign = rows
            .iter()
            .enumerate()
            .map(|(idx, r)| parse_field(&path, idx + 2, &r[1]))
            .collect::<Result<Vec<usize>>>()?;
        ClusterAssignment::from_assign(self.cfg.rho, self.cfg.theta, assign)
    }

    fn stage_finetune(&mut self) -> Result<()> {
        let (params, pooled) = self.read_pretrained()?;
        let a = self.read_clusters()?;
        let threads = self.opts.threads;
        let k = self.cfg.topk;
        let cfg = self.cfg.finetune_config();
        let mut init_rng = stage_rng(cfg.seed, "finetune-init");
        let rng = stage_rng(cfg.seed, "finetune");
        let data = self.data()?;
        let model = init_finetune(&params, &pooled, data.train.m, &a, &mut init_rng)?;
        let hier = build_user_cluster_graph(&data.fit, &a)?;
        let mut csv = String::from("epoch,l_rec_ui,l_rec_uc,l_cl,l2,total,val_recall,recall,ndcg\n");
        let outcome = finetune(&data.fit, &hier, model, &cfg, rng, |loss, joint, model| {
            let scorer = DotScorer::from_model(model);
            let val = data
                .validation
                .as_ref()
                .map(|v| evaluate(&scorer, &data.fit, v, k, threads))
                .transpose()?;
            let test = data
                .test
                .as_ref()
                .filter(|t| t.edge_count() > 0)
                .map(|t| evaluate(&scorer, &data.train, t, k, threads))
                .transpose()?;
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                loss.epoch,
                joint.rec_ui,
                joint.rec_uc,
                joint.cl,
                joint.l2,
                joint.total,
                opt(val.as_ref().map(|r| r.recall)),
                opt(test.as_ref().map(|r| r.recall)),
                opt(test.as_ref().map(|r| r.ndcg)),
            )
            .expect("write to string");
            info!("finetune epoch {} loss {:.6}", loss.epoch, joint.total);
            Ok(val.map(|r| r.recall))
        })?;
        info!("finetune: selected epoch {}", outcome.best_epoch);
        let m = &outcome.model;
        write_checkpoint(&self.out.join(FINETUNED), &[&m.user, &m.item, &m.cluster])?;
        write_text(&self.out.join(FINETUNE_METRICS), &csv)
    }

    /// Pre-trained and fine-tuned scorers, both propagated over the full
    /// training graph.
    pub fn load_scorers(&mut self) -> Result<(DotScorer, HgclModel)> {
        let (params, _) = self.read_pretrained()?;
        let a = self.read_clusters()?;
        let layers = self.cfg.train.layers;
        let path = self.artifact(FINETUNED);
        let mut blocks = read_blocks(&path, 3)?;
        let data = self.data()?;
        let (m, n) = (data.train.m, data.train.n);
        let shapes_ok = blocks[0].rows() == m && blocks[1].rows() == n && blocks[2].rows() == a.num_clusters();
        if !shapes_ok {
            return Err(HgclError::Checkpoint {
                path,
                msg: format!("expected blocks of {m}, {n} and {} rows", a.num_clusters()),
            });
        }
        let base_adj = normalize_adjacency(&data.train);
        let pre = propagate_clean(&base_adj, &params, layers)?;
        let pre_scorer = DotScorer::from_pooled(&pre.pooled, m);

        let cluster = blocks.pop().expect("three blocks");
        let item = blocks.pop().expect("three blocks");
        let user = blocks.pop().expect("three blocks");
        let mut model = HgclModel {
            pooled_user: user.clone(),
            pooled_item: item.clone(),
            pooled_cluster: cluster.clone(),
            user,
            item,
            cluster,
            assignment: a,
        };
        let hier = build_user_cluster_graph(&data.train, &model.assignment)?;
        model.refresh(&base_adj, &hier.adj, layers)?;
        Ok((pre_scorer, model))
    }

    fn stage_evaluate(&mut self) -> Result<()> {
        let (pre, model) = self.load_scorers()?;
        let ft = DotScorer::from_model(&model);
        let threads = self.opts.threads;
        let (k, negs, bins) = (self.cfg.topk, self.cfg.strength_negatives, self.cfg.strength_bins);
        let strength_seed = self.seed("strength");
        let data = self.data()?;
        let test = data
            .test
            .as_ref()
            .ok_or_else(|| HgclError::config("test", "evaluation needs a test file"))?;
        let mut report = String::from("model,k,recall,ndcg,users,train_pos_mean,test_pos_mean,neg_mean\n");
        let mut hist = String::from("model,group,bin,lo,hi,count\n");
        for (name, scorer) in [("pretrained", &pre), ("finetuned", &ft)] {
            let r: EvalReport = evaluate(scorer, &data.train, test, k, threads)?;
            let mut rng = ChaCha8Rng::seed_from_u64(strength_seed);
            let s: StrengthStats = strength_stats(scorer, &data.train, Some(test), negs, bins, &mut rng);
            info!("evaluate {name}: recall@{k} {:.5} ndcg@{k} {:.5}", r.recall, r.ndcg);
            writeln!(
                report,
                "{name},{k},{},{},{},{},{},{}",
                r.recall,
                r.ndcg,
                r.per_user.len(),
                s.train_pos.mean,
                s.test_pos.mean,
                s.negatives.mean
            )
            .expect("write to string");
            for (group, summary) in [("train_pos", &s.train_pos), ("test_pos", &s.test_pos), ("negative", &s.negatives)] {
                let h = &summary.hist;
                for (b, c) in h.counts.iter().enumerate() {
                    writeln!(hist, "{name},{group},{b},{},{},{c}", h.edges[b], h.edges[b + 1]).expect("write to string");
                }
            }
        }
        write_text(&self.out.join(EVAL_REPORT), &report)?;
        write_text(&self.out.join(STRENGTH_HIST), &hist)
    }
}

pub fn run_pipeline(cfg: &Config, stages: &[Stage], opts: RunOptions) -> Result<Vec<(Stage, StageStatus)>> {
    Pipeline::new(cfg.clone(), opts)?.run(stages)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rho: usize,
    pub theta: usize,
    pub perplexity: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Directory name of one sweep cell.
pub fn sweep_cell_name(rho: usize, theta: usize, perplexity: f64) -> String {
    format!("rho{rho}_theta{theta}_perp{perplexity}")
}

/// Runs reduce → evaluate for every `(rho, theta, perplexity)` cell of the
/// grid against one shared pre-trained checkpoint. An empty grid axis uses
/// the configured value.
pub fn run_sweep(cfg: &Config, opts: RunOptions) -> Result<Vec<SweepRow>> {
    let mut root = Pipeline::new(cfg.clone(), opts)?;
    root.run(&[Stage::Pretrain])?;
    let shared = root.artifact(PRETRAINED);
    let or_default = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let rhos = or_default(&cfg.sweep.rho, cfg.rho);
    let thetas = or_default(&cfg.sweep.theta, cfg.theta);
    let perps = if cfg.sweep.perplexity.is_empty() {
        vec![cfg.tsne.perplexity]
    } else {
        cfg.sweep.perplexity.clone()
    };
    let mut rows = Vec::new();
    let mut csv = String::from("rho,theta,perplexity,recall,ndcg\n");
    for &rho in &rhos {
        for &theta in &thetas {
            for &perplexity in &perps {
                let mut cell = cfg.clone();
                cell.rho = rho;
                cell.theta = theta;
                cell.tsne.perplexity = perplexity;
                cell.out_dir = cfg.out_dir.join("sweep").join(sweep_cell_name(rho, theta, perplexity));
                let mut p = Pipeline::new(cell, opts)?;
                p.shared_pretrained = Some(shared.clone());
                p.run(&[Stage::Reduce, Stage::Cluster, Stage::Finetune, Stage::Evaluate])?;
                let report = read_eval_report(&p.out.join(EVAL_REPORT))?;
                let ft = report
                    .iter()
                    .find(|r| r.model == "finetuned")
                    .ok_or_else(|| HgclError::Degenerate("eval report lacks a finetuned row".into()))?;
                writeln!(csv, "{rho},{theta},{perplexity},{},{}", ft.recall, ft.ndcg).expect("write to string");
                rows.push(SweepRow {
                    rho,
                    theta,
                    perplexity,
                    recall: ft.recall,
                    ndcg: ft.ndcg,
                });
            }
        }
    }
    write_text(&cfg.out_dir.join(SWEEP), &csv)?;
    Ok(rows)
}
