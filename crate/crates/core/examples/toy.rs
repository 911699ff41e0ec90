//! Generates the planted-cluster toy dataset and runs every stage on it.
//!
//! `cargo run --release --example toy -- <dir> [seed] [key=value ...]`

use std::path::PathBuf;

use hgcl::config::parse_config_str;
use hgcl::pipeline::{read_eval_report, Pipeline, RunOptions, Stage, EVAL_REPORT};
use hgcl::synthetic::{generate, SyntheticSpec};

fn main() -> hgcl::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/toy".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = generate(&SyntheticSpec::toy(seed))?;
    data.write(&dir)?;
    println!("wrote {} train / {} test interactions to {}", data.train.len(), data.test.len(), dir.display());

    let text = include_str!("../../../configs/toy.conf")
        .lines()
        .filter(|l| !l.starts_with("train") && !l.starts_with("test") && !l.starts_with("out"))
        .collect::<Vec<_>>()
        .join("\n");
    let mut cfg = parse_config_str(&text, &dir)?;
    cfg.train_path = Some(dir.join("train.txt"));
    cfg.test_path = Some(dir.join("test.txt"));
    cfg.out_dir = dir.join("run");
    cfg.train.seed = seed;
    for kv in args {
        let (k, v) = kv.split_once('=').expect("overrides are key=value");
        cfg.set(k.trim(), v, &dir)?;
    }
    cfg.validate()?;
    let start = std::time::Instant::now();
    Pipeline::new(cfg.clone(), RunOptions::default())?.run(&Stage::ALL)?;
    for r in read_eval_report(&cfg.out_dir.join(EVAL_REPORT))? {
        println!(
            "{:<10} recall@{} {:.4} ndcg {:.4} strength pos {:.3} neg {:.3}",
            r.model, r.k, r.recall, r.ndcg, r.train_pos_mean, r.neg_mean
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

