use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const MANIFEST: &str = "data/synthetic.manifest.json";

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_in(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_compdesc"));
    cmd.args(args).current_dir(dir);
    for var in ["SOURCE_DATE_EPOCH", "COMPDESC_CACHE", "COMPDESC_LLM_URL", "COMPDESC_LLM_TOKEN"] {
        cmd.env_remove(var);
    }
    cmd.env("SOURCE_DATE_EPOCH", "1700000000");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = run_in(dir, args, &[]);
    assert_eq!(r.code, 0, "compdesc {args:?}\nstdout: {}\nstderr: {}", r.stdout, r.stderr);
    r
}

fn with_m<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["-m", MANIFEST, "--out", "out"];
    v.extend_from_slice(args);
    v
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["fixture", "--out", "data"]);
    tmp
}

/// Fixture plus similar map and replayed descriptors.
fn setup_generated() -> tempfile::TempDir {
    let tmp = setup();
    ok(tmp.path(), &with_m(&["similar", "-n", "3"]));
    ok(tmp.path(), &with_m(&["generate", "--replay", "data/replay.jsonl"]));
    tmp
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn kept_sets(bundle: &Value) -> BTreeMap<String, BTreeSet<String>> {
    bundle["outcomes"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(c, o)| {
            let kept = o["kept"].as_array().unwrap().iter().map(|k| k["text"].as_str().unwrap().to_string());
            (c.clone(), kept.collect())
        })
        .collect()
}

#[test]
fn similar_writes_n_neighbors_and_is_repeatable() {
    let tmp = setup();
    let d = tmp.path();
    let r = ok(d, &with_m(&["similar", "-n", "10"]));
    assert!(r.stdout.contains("c00: "), "preview missing: {}", r.stdout);
    let path = d.join("out/synthetic_similar.json");
    let first = std::fs::read(&path).unwrap();
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["n"], 10);
    let neighbors = v["neighbors"].as_object().unwrap();
    assert_eq!(neighbors.len(), 20);
    for (c, list) in neighbors {
        let ids: Vec<&str> = list.as_array().unwrap().iter().map(|n| n["id"].as_str().unwrap()).collect();
        assert_eq!(ids.len(), 10);
        assert!(!ids.contains(&c.as_str()));
    }
    assert_eq!(v["config"]["n"], 10);
    ok(d, &with_m(&["similar", "-n", "10"]));
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn too_many_neighbors_exits_2() {
    let tmp = setup();
    let r = run_in(tmp.path(), &with_m(&["similar", "-n", "20"]), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("neighbors requested"), "{}", r.stderr);
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = setup();
    let d = tmp.path();
    assert_eq!(run_in(d, &["similar", "-m", "data/none.json"], &[]).code, 2);
    assert_eq!(run_in(d, &["similar"], &[]).code, 2);
    assert_eq!(run_in(d, &with_m(&["filter"]), &[]).code, 2);
    assert_eq!(run_in(d, &with_m(&["generate", "--offline"]), &[]).code, 2);
    assert_eq!(run_in(d, &with_m(&["eval", "--protocol", "descriptors"]), &[]).code, 2);
    assert_eq!(run_in(d, &with_m(&["similar", "--bogus"]), &[]).code, 2);
}

#[test]
fn asset_missing_from_manifest_exits_2() {
    let tmp = setup();
    let d = tmp.path();
    std::fs::remove_file(d.join("data/synthetic_images.cdem")).unwrap();
    let r = run_in(d, &with_m(&["similar"]), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("synthetic_images.cdem"), "{}", r.stderr);
}

#[test]
fn generate_resumes_only_missing_classes() {
    let tmp = setup_generated();
    let d = tmp.path();
    let per_class = d.join("out/descriptors/synthetic");
    let bundle = std::fs::read(d.join("out/synthetic_descriptors.json")).unwrap();
    let kept_file = std::fs::read(per_class.join("c00.json")).unwrap();
    for c in ["c03", "c07", "c11"] {
        std::fs::remove_file(per_class.join(format!("{c}.json"))).unwrap();
    }
    let r = ok(d, &with_m(&["generate", "--replay", "data/replay.jsonl"]));
    assert!(r.stdout.contains("generated 3, reused 17, failed 0"), "{}", r.stdout);
    assert_eq!(std::fs::read(per_class.join("c00.json")).unwrap(), kept_file);
    assert_eq!(std::fs::read(d.join("out/synthetic_descriptors.json")).unwrap(), bundle);

    let r = ok(d, &with_m(&["generate", "--replay", "data/replay.jsonl", "--force"]));
    assert!(r.stdout.contains("generated 20, reused 0"), "{}", r.stdout);
}

#[test]
fn primed_cache_completes_offline() {
    let tmp = setup_generated();
    let d = tmp.path();
    let before = json(&d.join("out/synthetic_descriptors.json"));
    std::fs::remove_dir_all(d.join("out/descriptors")).unwrap();
    let r = ok(d, &with_m(&["generate", "--offline"]));
    assert!(r.stdout.contains("generated 20"), "{}", r.stdout);
    let after = json(&d.join("out/synthetic_descriptors.json"));
    assert_eq!(before["sets"], after["sets"]);
}

#[test]
fn partial_failures_are_summarized_and_resumable() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &with_m(&["similar", "-n", "3"]));
    // drop every answer about Species 05 and 06
    let full = std::fs::read_to_string(d.join("data/replay.jsonl")).unwrap();
    let partial: String = full
        .lines()
        .filter(|l| !l.contains("distinguishing a Species 05") && !l.contains("distinguishing a Species 06"))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(partial.len() < full.len());
    std::fs::write(d.join("partial.jsonl"), partial).unwrap();
    let r = ok(d, &with_m(&["generate", "--replay", "partial.jsonl"]));
    assert!(r.stdout.contains("generated 18, reused 0, failed 2"), "{}", r.stdout);
    assert!(r.stdout.contains("failed c05"));
    let r = ok(d, &with_m(&["generate", "--replay", "data/replay.jsonl"]));
    assert!(r.stdout.contains("generated 2, reused 18, failed 0"), "{}", r.stdout);
}

#[test]
fn zero_successes_exit_1() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &with_m(&["similar", "-n", "3"]));
    let r = run_in(d, &with_m(&["generate", "--offline"]), &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stdout.contains("failed 20 of 20"));
}

#[test]
fn token_never_reaches_artifacts() {
    let tmp = setup();
    let d = tmp.path();
    let secret = "sk-test-4f1c2e9a77";
    let env = [("COMPDESC_LLM_TOKEN", secret), ("COMPDESC_LLM_URL", "http://127.0.0.1:9/v1")];
    assert_eq!(run_in(d, &with_m(&["similar", "-n", "3"]), &env).code, 0);
    let r = run_in(d, &with_m(&["generate", "--replay", "data/replay.jsonl"]), &env);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(run_in(d, &with_m(&["filter"]), &env).code, 0);
    for (p, bytes) in files_under(&d.join("out")) {
        assert!(
            !String::from_utf8_lossy(&bytes).contains(secret),
            "{} contains the token",
            p.display()
        );
    }
}

#[test]
fn filter_echoes_policy_and_grows_with_k() {
    let tmp = setup_generated();
    let d = tmp.path();
    let r = ok(d, &with_m(&["filter", "--shots", "1", "--k", "5", "--seed", "7"]));
    assert!(r.stdout.contains("kept "), "{}", r.stdout);
    let small = json(&d.join("out/synthetic_filtered.json"));
    assert_eq!(small["policy"]["k"], 5);
    assert_eq!(small["policy"]["shots"], 1);
    assert_eq!(small["policy"]["rng_seed"], 7);
    assert_eq!(small["config"]["k"], 5);
    assert_eq!(small["config"]["seed"], 7);

    ok(d, &with_m(&["filter", "--shots", "1", "--k", "10", "--seed", "7"]));
    let large = json(&d.join("out/synthetic_filtered.json"));
    let (a, b) = (kept_sets(&small), kept_sets(&large));
    for (c, set) in &a {
        assert!(set.is_subset(&b[c]), "{c}: k=5 set not within k=10 set");
    }
}

#[test]
fn filter_draws_means_from_mean_source() {
    let tmp = setup_generated();
    let d = tmp.path();
    ok(d, &["fixture", "--out", "data", "--dataset", "donor", "--seed", "9"]);
    let mut manifest = json(&d.join(MANIFEST));
    manifest["mean_source"] = Value::from("donor");
    std::fs::write(d.join("data/borrowing.manifest.json"), manifest.to_string()).unwrap();

    ok(d, &with_m(&["filter", "--k", "5"]));
    let own = json(&d.join("out/synthetic_filtered.json"));
    let r = ok(
        d,
        &["-m", "data/borrowing.manifest.json", "--out", "out", "filter", "--k", "5"],
    );
    assert!(r.stdout.contains("mean features from donor"), "{}", r.stdout);
    let borrowed = json(&d.join("out/synthetic_filtered.json"));
    // different image means move every class's lower bound
    let bound = |v: &Value| v["outcomes"]["c00"]["lower_bound"].as_f64().unwrap();
    assert_ne!(bound(&own), bound(&borrowed));
}

#[test]
fn eval_reports_have_protocol_shapes() {
    let tmp = setup_generated();
    let d = tmp.path();
    ok(d, &with_m(&["filter", "--k", "5", "--shots", "8"]));
    let desc = ["--descriptors", "out/synthetic_descriptors.json"];

    ok(d, &with_m(&["eval", "--protocol", "baseline"]));
    let mut args = with_m(&["eval", "--protocol", "descriptors", "--filtered", "out/synthetic_filtered.json"]);
    args.extend_from_slice(&desc);
    ok(d, &args);
    let base = json(&d.join("out/synthetic_baseline_20231114T221320Z.json"));
    let rows = base["reports"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["mode"], "plain");
    let md = std::fs::read_to_string(d.join("out/synthetic_descriptors_20231114T221320Z.md")).unwrap();
    for mode in ["| plain |", "| descriptor_ensemble |", "| descriptor_ensemble_filtered |"] {
        assert!(md.contains(mode), "{mode} missing from\n{md}");
    }
    assert!(md.contains("## Config"));

    let mut args = with_m(&["eval", "--protocol", "few_shot_sweep", "--repeats", "2", "--shot-grid", "1,4,64"]);
    args.extend_from_slice(&desc);
    ok(d, &args);
    let sweep = json(&d.join("out/synthetic_few_shot_sweep_20231114T221320Z.json"));
    let rows = sweep["reports"].as_array().unwrap();
    let shots: Vec<i64> = rows.iter().map(|r| r["shots"].as_i64().unwrap()).collect();
    assert_eq!(shots, [1, 4, 64]);
    assert_eq!(rows[2]["skipped"], true);
    assert_eq!(rows[0]["skipped"], false);
    let md = std::fs::read_to_string(d.join("out/synthetic_few_shot_sweep_20231114T221320Z.md")).unwrap();
    assert!(md.contains("skipped"));

    let mut args = with_m(&["eval", "--protocol", "equal_count_random", "--repeats", "5", "--k", "3"]);
    args.extend_from_slice(&desc);
    ok(d, &args);
    let rand = json(&d.join("out/synthetic_equal_count_random_20231114T221320Z.json"));
    let row = &rand["reports"][0];
    assert_eq!(row["seeds_used"].as_array().unwrap().len(), 5);
    let per_seed: Vec<f64> = row["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["top1"].as_f64().unwrap())
        .collect();
    let mean = per_seed.iter().sum::<f64>() / 5.0;
    assert!((row["top1"].as_f64().unwrap() - mean).abs() < 1e-6);
}

#[test]
fn explain_agrees_with_classify() {
    let tmp = setup_generated();
    let d = tmp.path();
    ok(d, &with_m(&["filter", "--k", "5", "--shots", "8"]));
    let bank = ["--filtered", "out/synthetic_filtered.json"];
    let mut args = with_m(&["classify"]);
    args.extend_from_slice(&bank);
    ok(d, &args);
    let preds = std::fs::read_to_string(d.join("out/synthetic_descriptor_ensemble_predictions.jsonl")).unwrap();
    let sidecar = json(&d.join("out/synthetic_descriptor_ensemble_predictions.config.json"));
    assert_eq!(sidecar["config"]["mode"], "descriptor_ensemble");
    let records: Vec<Value> = preds.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 640);

    for rec in records.iter().step_by(97) {
        let key = rec["image_key"].as_str().unwrap();
        let mut args = with_m(&["explain", key]);
        args.extend_from_slice(&bank);
        ok(d, &args);
        let file = d.join(format!("out/explain/synthetic_{}.json", key.replace('/', "%2F")));
        let e = json(&file);
        assert_eq!(e["decision"], rec["top"][0]["class"], "{key}");
        assert_eq!(e["classes"].as_array().unwrap().len(), 2);
        assert!(file.with_extension("md").exists());
    }
}

#[test]
fn explain_fallback_shows_class_prompt_row() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &with_m(&["explain", "c04/img_002"]));
    let e = json(&d.join("out/explain/synthetic_c04%2Fimg_002.json"));
    for class in e["classes"].as_array().unwrap() {
        let rows = class["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 1);
        let name = class["name"].as_str().unwrap();
        assert_eq!(rows[0]["descriptor"], format!("A photo of a {name}."));
    }
}

#[test]
fn unknown_image_key_exits_2() {
    let tmp = setup();
    let r = run_in(tmp.path(), &with_m(&["explain", "c04/nothing"]), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("unknown image key"));
}

#[test]
fn flags_override_config_file_over_defaults() {
    let tmp = setup_generated();
    let d = tmp.path();
    std::fs::write(d.join("cfg.json"), r#"{"k": 3, "bound_cap": 0.2, "manifest": "data/synthetic.manifest.json", "out": "out"}"#)
        .unwrap();
    ok(d, &["--config", "cfg.json", "filter"]);
    let v = json(&d.join("out/synthetic_filtered.json"));
    assert_eq!(v["policy"]["k"], 3);
    assert_eq!(v["policy"]["bound_cap"], 0.2);
    assert_eq!(v["policy"]["shots"], "all");

    ok(d, &["--config", "cfg.json", "filter", "--k", "4"]);
    let v = json(&d.join("out/synthetic_filtered.json"));
    assert_eq!(v["policy"]["k"], 4);
    assert_eq!(v["policy"]["bound_cap"], 0.2);

    std::fs::write(d.join("bad.json"), r#"{"nope": 1}"#).unwrap();
    assert_eq!(run_in(d, &["--config", "bad.json", "filter"], &[]).code, 2);
}

#[test]
fn inputs_are_not_modified() {
    let tmp = setup();
    let d = tmp.path();
    let before = files_under(&d.join("data"));
    ok(d, &with_m(&["similar", "-n", "3"]));
    ok(d, &with_m(&["generate", "--replay", "data/replay.jsonl"]));
    ok(d, &with_m(&["filter"]));
    ok(d, &with_m(&["eval", "--protocol", "descriptor_only", "--descriptors", "out/synthetic_descriptors.json"]));
    assert_eq!(files_under(&d.join("data")), before);
}
