mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use common::{config_in, fixture};
use toolplan::cli::{read_fused, run, EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL};
use toolplan::config::EngineConfig;
use toolplan::episode::{read_trajectories, StopReason};
use toolplan::metrics::load_eval_records;
use toolplan::reward::{score_rollout, RolloutReward};
use toolplan::synthesis::read_sft_dataset;

fn toolplan(args: &[&str]) -> i32 {
    let mut argv = vec!["toolplan"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn retrieve(config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let eval = fixture("toy/eval.jsonl");
    let mut args = vec!["-c", s(config), "retrieve", "--eval", s(&eval), "--out", s(out)];
    args.extend_from_slice(extra);
    toolplan(&args)
}

#[test]
fn retrieve_is_deterministic_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("toy/config.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(retrieve(&cfg, &a, &["--parallel", "1"]), EXIT_OK);
    assert_eq!(retrieve(&cfg, &b, &["--parallel", "4"]), EXIT_OK);
    for f in ["trajectories.jsonl", "fused.jsonl", "fused.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let golden = fs::read_to_string(fixture("toy/golden/trajectories.jsonl")).unwrap();
    assert_eq!(fs::read_to_string(a.join("trajectories.jsonl")).unwrap(), golden);
}

#[test]
fn aggregation_and_turn_cap_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("toy/config.toml");
    let out = dir.path().join("rrf");
    assert_eq!(retrieve(&cfg, &out, &["--aggregation", "rrf", "--max-turns", "1"]), EXIT_OK);
    let fused = read_fused(&out.join("fused.jsonl")).unwrap();
    assert_eq!(fused.len(), 10);
    assert!(fused.iter().all(|f| f.list.method.as_str() == "rrf"));
    for t in read_trajectories(out.join("trajectories.jsonl")).unwrap() {
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.stopped, StopReason::TurnCap);
    }
    let tsv = fs::read_to_string(out.join("fused.tsv")).unwrap();
    assert!(tsv.starts_with("query_id\trank\ttool_id\tfused_score\tsource_count\n"));
}

#[test]
fn single_query_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("toy/config.toml");
    let out = dir.path().join("one");
    let code = toolplan(&[
        "-c", s(&cfg), "retrieve", "--query", "weather please", "--query-id", "t2", "--out", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(read_trajectories(out.join("trajectories.jsonl")).unwrap().len(), 1);
}

#[test]
fn broken_script_is_a_partial_failure_with_preserved_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let scripts = fs::read_to_string(fixture("toy/scripts.jsonl")).unwrap();
    let mut lines: Vec<String> = scripts.lines().map(String::from).collect();
    lines[0] = r#"{"query_id":"t1","turns":["<task_breakdown>x</task_breakdown>\n<sub_goals>[\"a\"]</sub_goals>","hotels","done <stop_retrieval>"]}"#.into();
    let script_path = dir.path().join("scripts.jsonl");
    fs::write(&script_path, lines.join("\n")).unwrap();
    let cfg = config_in(dir.path(), "toy", "");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        &format!("{:?}", fixture("toy/scripts.jsonl").display().to_string()),
        &format!("{:?}", script_path.display().to_string()),
    );
    fs::write(&cfg, text).unwrap();

    let out = dir.path().join("out");
    assert_eq!(retrieve(&cfg, &out, &[]), EXIT_PARTIAL);
    let trajs = read_trajectories(out.join("trajectories.jsonl")).unwrap();
    assert_eq!(trajs.len(), 10);
    assert_eq!(trajs[0].stopped, StopReason::Aborted);
    assert!(trajs[0].error.is_some());
    assert_eq!(trajs[0].turns.len(), 1);
    assert_eq!(read_fused(&out.join("fused.jsonl")).unwrap().len(), 9);
}

#[test]
fn eval_k_flag_and_missing_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("toy/config.toml");
    let out = dir.path().join("r");
    assert_eq!(retrieve(&cfg, &out, &[]), EXIT_OK);
    let eval = fixture("toy/eval.jsonl");
    let fused = out.join("fused.jsonl");
    let m = dir.path().join("m");
    assert_eq!(
        toolplan(&["-c", s(&cfg), "eval", "--fused", s(&fused), "--eval", s(&eval), "--k", "5", "--out", s(&m)]),
        EXIT_OK
    );
    let tsv = fs::read_to_string(m.join("metrics.tsv")).unwrap();
    assert!(tsv.lines().next().unwrap().contains("ndcg@5"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(m.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["k"], 5);

    let bare = dir.path().join("bare.toml");
    fs::write(&bare, format!("[corpus]\npath = {:?}\n", fixture("toy/tools.jsonl").display().to_string())).unwrap();
    assert_eq!(
        toolplan(&["-c", s(&bare), "eval", "--fused", s(&fused), "--eval", s(&eval), "--out", s(&m)]),
        EXIT_CONFIG
    );
}

#[test]
fn synthesize_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("toy/config.toml");
    let records = dir.path().join("empty.jsonl");
    fs::write(&records, "").unwrap();
    let out = dir.path().join("s");
    assert_eq!(toolplan(&["-c", s(&cfg), "synthesize", "--records", s(&records), "--out", s(&out)]), EXIT_OK);
    assert_eq!(fs::read_to_string(out.join("sft.jsonl")).unwrap(), "");
    assert_eq!(fs::read_to_string(out.join("audit.tsv")).unwrap().lines().count(), 1);
}

fn synthesize_with_seed(dir: &Path, seed: &str) -> (String, Vec<toolplan::synthesis::SftTranscript>) {
    let cfg = config_in(dir, "toy", "\n[synthesis]\nkeep_failed_prob = 0.5\n");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "[teacher]\nkind = \"scripted\"\n",
        &format!(
            "[teacher]\nkind = \"scripted\"\nscript_path = {:?}\n",
            fixture("toy/teacher_fail_first.json").display().to_string()
        ),
    );
    fs::write(&cfg, text).unwrap();
    let out = dir.join(format!("out{seed}"));
    let records = fixture("toy/records.jsonl");
    assert_eq!(
        toolplan(&["-c", s(&cfg), "--seed", seed, "synthesize", "--records", s(&records), "--out", s(&out)]),
        EXIT_OK
    );
    (
        fs::read_to_string(out.join("audit.tsv")).unwrap(),
        read_sft_dataset(out.join("sft.jsonl")).unwrap(),
    )
}

#[test]
fn seed_change_only_permutes_kept_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (audit_a, sft_a) = synthesize_with_seed(dir.path(), "1");
    let (audit_a2, _) = synthesize_with_seed(dir.path(), "1");
    let (audit_b, sft_b) = synthesize_with_seed(dir.path(), "2");
    assert_eq!(audit_a, audit_a2);
    assert_ne!(audit_a, audit_b);
    let strip = |audit: &str| -> Vec<String> {
        audit
            .lines()
            .map(|l| {
                let mut cols: Vec<&str> = l.split('\t').collect();
                cols.remove(5);
                cols.join("\t")
            })
            .collect()
    };
    assert_eq!(strip(&audit_a), strip(&audit_b));
    // Accepted queries are identical; only the kept failed turns differ.
    let accepted = |sft: &[toolplan::synthesis::SftTranscript]| -> Vec<Vec<String>> {
        sft.iter()
            .map(|t| t.queries().into_iter().filter(|q| q != toolplan::synthesis::DEFAULT_DECOY).collect())
            .collect()
    };
    assert_eq!(accepted(&sft_a), accepted(&sft_b));
}

#[test]
fn index_cache_hit_and_corrupt_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("index.json");
    let cfg_path = config_in(dir.path(), "toy", "");
    let text = fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("[retriever]\n", &format!("[retriever]\ncache_path = {:?}\n", cache.display().to_string()));
    fs::write(&cfg_path, text).unwrap();
    let cfg = EngineConfig::load(&cfg_path).unwrap();
    let corpus = cfg.load_corpus().unwrap();

    use toolplan::config::CacheStatus;
    let status = |cfg: &EngineConfig| cfg.dense_index(&corpus).unwrap().1;
    assert_eq!(status(&cfg), CacheStatus::Built);
    assert_eq!(status(&cfg), CacheStatus::Hit);
    let body = fs::read(&cache).unwrap();
    fs::write(&cache, &body[..body.len() / 2]).unwrap();
    assert_eq!(status(&cfg), CacheStatus::Rebuilt);
    assert_eq!(status(&cfg), CacheStatus::Hit);

    assert_eq!(toolplan(&["-c", s(&cfg_path), "index"]), EXIT_OK);
}

#[test]
fn reward_rows_match_module_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = fixture("toy/config.toml");
    let out = dir.path().join("r");
    assert_eq!(retrieve(&cfg_path, &out, &[]), EXIT_OK);
    let trajectories = out.join("trajectories.jsonl");
    let eval = fixture("toy/eval.jsonl");
    let rewards = dir.path().join("rewards.jsonl");
    assert_eq!(
        toolplan(&["-c", s(&cfg_path), "reward", "--trajectories", s(&trajectories), "--eval", s(&eval), "--out", s(&rewards)]),
        EXIT_OK
    );
    let rows: Vec<RolloutReward> = fs::read_to_string(&rewards)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 10);

    let cfg = EngineConfig::load(&cfg_path).unwrap();
    let corpus = cfg.load_corpus().unwrap();
    let retriever = cfg.retriever(&corpus).unwrap();
    let embedder = cfg.embedder();
    let records: HashMap<String, _> =
        load_eval_records(&eval).unwrap().into_iter().map(|r| (r.query_id.clone(), r)).collect();
    for (t, row) in read_trajectories(&trajectories).unwrap().iter().zip(&rows) {
        let rec = &records[t.query_id.as_deref().unwrap()];
        let again = score_rollout(t, rec, retriever.as_ref(), &corpus, embedder.as_ref(), &cfg.reward).unwrap();
        assert_eq!(&again, row);
        assert!(row.breakdown.satisfies_identity(&cfg.reward.weights));
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_toolplan");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
    let missing = Command::new(bin).args(["-c", "/nonexistent/config.toml", "index"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(EXIT_CONFIG));
    let bad_flag = Command::new(bin).args(["retrieve", "--aggregation", "nope", "--out", "x"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(EXIT_CONFIG));
}
