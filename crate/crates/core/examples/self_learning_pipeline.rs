//! Full pipeline on a synthetic corpus through the `macd` command surface:
//! ingest, partition, learn, refine, diagnose (zero vs self-learned),
//! consult, evaluate, then replay of every recorded run.
//!
//! cargo run --example self_learning_pipeline -- [WORKDIR] [PER_DISEASE]

use std::fs;
use std::path::PathBuf;

use macd::cli::run_with;
use macd::synthetic::{corpus, oracle_script, OracleOptions};
use serde_json::json;

const MODELS: [&str; 3] = ["llama-3.1-70b", "llama-3.1-8b", "deepseek-r1-distill-llama-70b"];

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("macd-demo"));
    let per_disease: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    if dir.join("store").exists() {
        fs::remove_dir_all(dir.join("store"))?;
    }
    fs::create_dir_all(&dir)?;

    let corpus = corpus(per_disease, 2024);
    let jsonl = |rows: Vec<String>| rows.join("\n") + "\n";
    fs::write(
        dir.join("cases.jsonl"),
        jsonl(corpus.cases.iter().map(|c| serde_json::to_string(c).unwrap()).collect()),
    )?;
    fs::write(
        dir.join("labels.jsonl"),
        jsonl(corpus.labels.iter().map(|l| serde_json::to_string(l).unwrap()).collect()),
    )?;
    let script = oracle_script(&corpus, &OracleOptions::new(&MODELS));
    fs::write(dir.join("script.json"), serde_json::to_vec_pretty(&script)?)?;
    let quota = (per_disease / 3).max(1);
    let agents: Vec<_> = MODELS
        .iter()
        .enumerate()
        .map(|(i, m)| json!({ "agent_id": format!("agent-{}", i + 1), "model_id": m }))
        .collect();
    let config = json!({
        "store": "store",
        "backend": { "kind": "scripted", "script": "script.json" },
        "agents": agents,
        "partition": { "default_quota": quota, "quotas": { "pericarditis": (quota / 4).max(1) } },
    });
    let config_path = dir.join("macd.json");
    fs::write(&config_path, serde_json::to_vec_pretty(&config)?)?;

    let macd = |args: &[&str]| {
        let mut argv = vec!["macd".to_string(), "--config".into(), config_path.display().to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        println!("$ macd {}", args.join(" "));
        let code = run_with(argv);
        anyhow::ensure!(code == 0, "macd {} exited with {code}", args.join(" "));
        Ok(())
    };
    macd(&["ingest", "--cases", "cases.jsonl", "--labels", "labels.jsonl"])?;
    macd(&["partition"])?;
    macd(&["learn"])?;
    macd(&["refine"])?;
    macd(&["diagnose", "--condition", "zero"])?;
    macd(&["diagnose", "--condition", "self-learned"])?;
    macd(&["consult"])?;
    macd(&["evaluate"])?;

    let store = macd::store::Store::open(dir.join("store"))?;
    for run in store.list_runs()? {
        macd(&["replay", "--run", &run])?;
    }
    println!("store: {}", dir.join("store").display());
    Ok(())
}
