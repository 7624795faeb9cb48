use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn guiagent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guiagent"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn rollout_into(dir: &Path) -> Output {
    guiagent(&[
        "rollout",
        "--group",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn rollout_bundled_suite_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rollout_into(tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let agg = stdout_json(&out);
    assert_eq!(agg["success_rate"].as_f64(), Some(1.0));
    for f in ["trajectories.jsonl", "metrics.json", "metrics.csv", "groups.json", "manifest.json"] {
        assert!(tmp.path().join(f).exists(), "missing {f}");
    }
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["aggregate"]["metrics"]["sr"].as_f64(), Some(1.0));
    assert_eq!(metrics["aggregate"]["metrics"]["tm"].as_f64(), Some(1.0));
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "rollout");
    assert!(!manifest["seeds"].as_array().unwrap().is_empty());
}

#[test]
fn rollout_is_deterministic_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |d: &Path| {
        guiagent(&[
            "rollout",
            "--tasks",
            "scores_product",
            "--group",
            "3",
            "--seed",
            "11",
            "--out",
            d.to_str().unwrap(),
        ])
    };
    assert_eq!(run(a.path()).status.code(), Some(0));
    assert_eq!(run(b.path()).status.code(), Some(0));
    let strip = |d: &Path| -> Vec<Value> {
        fs::read_to_string(d.join("trajectories.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                let o = v.as_object_mut().unwrap();
                o.remove("started_at");
                o.remove("policy_latency_ms");
                o.remove("copilot_latency_ms");
                v
            })
            .collect()
    };
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("h.toml");
    fs::write(&cfg, "[episode]\ngroup_sise = 4\n").unwrap();
    let out = guiagent(&[
        "rollout",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("group_sise"));
}

#[test]
fn unknown_task_id_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = guiagent(&["rollout", "--tasks", "no_such_task", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_backend_exits_3() {
    // Bind then drop to get a port nobody listens on.
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("h.toml");
    fs::write(
        &cfg,
        format!(
            "[policy]\nkind = \"http\"\nbase_url = \"http://127.0.0.1:{port}\"\nmodel = \"m\"\nmax_retries = 0\n"
        ),
    )
    .unwrap();
    let out = guiagent(&[
        "rollout",
        "--config",
        cfg.to_str().unwrap(),
        "--tasks",
        "settings_open",
        "--group",
        "1",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reward_check_flags_exactly_the_edited_step() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rollout_into(tmp.path()).status.code(), Some(0));
    let log = tmp.path().join("trajectories.jsonl");

    let clean = guiagent(&["reward-check", "--log", log.to_str().unwrap()]);
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stderr));
    let report = stdout_json(&clean);
    assert_eq!(report["mismatch_count"], 0);
    assert!(report["checked"].as_u64().unwrap() > 0);

    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let target = 3;
    let mut v: Value = serde_json::from_str(&lines[target]).unwrap();
    let (task, rollout, step) = (
        v["task_id"].as_str().unwrap().to_string(),
        v["rollout_index"].as_u64().unwrap(),
        v["index"].as_u64().unwrap(),
    );
    v["reward"]["total"] = Value::from(0.5);
    lines[target] = v.to_string();
    let edited = tmp.path().join("edited.jsonl");
    fs::write(&edited, lines.join("\n") + "\n").unwrap();

    let out = guiagent(&["reward-check", "--log", edited.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let report = stdout_json(&out);
    assert_eq!(report["mismatch_count"], 1);
    let m = &report["mismatches"][0];
    assert_eq!(m["task_id"], task.as_str());
    assert_eq!(m["rollout_index"].as_u64(), Some(rollout));
    assert_eq!(m["step"].as_u64(), Some(step));
    assert_eq!(m["line"].as_u64(), Some(target as u64 + 1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn reward_check_against_wrong_pack_reports_without_crashing() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rollout_into(&tmp.path().join("run")).status.code(), Some(0));
    let gen = tmp.path().join("gen");
    let g = guiagent(&[
        "taskgen", "--none", "2", "--retriever", "1", "--calculator", "1", "--out",
        gen.to_str().unwrap(),
    ]);
    assert_eq!(g.status.code(), Some(0));
    let out = guiagent(&[
        "reward-check",
        "--task-pack",
        gen.join("tasks").to_str().unwrap(),
        "--log",
        tmp.path().join("run/trajectories.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let report = stdout_json(&out);
    assert_eq!(report["mismatch_count"], report["checked"]);
}

fn write_batch(path: &Path, tokens: &[(f64, f64, f64, f64)]) {
    let mut s = String::new();
    for (k, (lc, lo, lr, a)) in tokens.iter().enumerate() {
        s += &serde_json::json!({
            "i": 0, "t": 0, "k": k,
            "logp_current": lc, "logp_old": lo, "logp_ref": lr, "A": a,
        })
        .to_string();
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

#[test]
fn objective_matches_hand_computed_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let batch = tmp.path().join("b.jsonl");
    write_batch(
        &batch,
        &[(-0.5, -0.7, -0.6, 1.0), (-1.0, -0.9, -1.2, -0.5), (-2.0, -1.5, -2.0, 2.0)],
    );
    let out = guiagent(&["objective", "--batch", batch.to_str().unwrap(), "--sft"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let close = |key: &str, want: f64| {
        let got = v[key].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-12, "{key}: {got} vs {want}");
    };
    close("surrogate", 0.6535475368024289);
    close("kl", 0.007856057037980499);
    close("total", 0.6534689762320491);
    close("sft_loss", 3.5 / 3.0);
    assert_eq!(v["tokens"], 3);

    let out = guiagent(&["objective", "--batch", batch.to_str().unwrap(), "--beta", "0"]);
    let v = stdout_json(&out);
    assert_eq!(v["total"], v["surrogate"]);
}

#[test]
fn objective_kl_vanishes_when_reference_equals_current() {
    let tmp = tempfile::tempdir().unwrap();
    let batch = tmp.path().join("b.jsonl");
    write_batch(&batch, &[(-0.3, -0.4, -0.3, 0.7), (-1.1, -1.0, -1.1, -1.3)]);
    let v = stdout_json(&guiagent(&["objective", "--batch", batch.to_str().unwrap()]));
    assert_eq!(v["kl"].as_f64(), Some(0.0));
    assert_eq!(v["total"], v["surrogate"]);
}

#[test]
fn objective_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let batch = tmp.path().join("b.jsonl");
    write_batch(&batch, &[(0.5, -0.4, -0.3, 0.7)]);
    let out = guiagent(&["objective", "--batch", batch.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    write_batch(&batch, &[(-0.5, -0.4, -0.3, 0.7)]);
    let out = guiagent(&["objective", "--batch", batch.to_str().unwrap(), "--eps", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

fn label_counts(dir: &Path) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for e in fs::read_dir(dir).unwrap() {
        let v: Value = serde_json::from_str(&fs::read_to_string(e.unwrap().path()).unwrap()).unwrap();
        match v["tool_label"].as_str().unwrap() {
            "None" => c.0 += 1,
            "Retriever" => c.1 += 1,
            "Calculator" => c.2 += 1,
            other => panic!("label {other}"),
        }
    }
    c
}

#[test]
fn taskgen_composition_and_seed_stability() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = guiagent(&["taskgen", "--seed", "5", "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(label_counts(&a.join("tasks")), (350, 170, 80));
    let mut names: Vec<_> = fs::read_dir(a.join("tasks"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in &names {
        assert_eq!(
            fs::read(a.join("tasks").join(n)).unwrap(),
            fs::read(b.join("tasks").join(n)).unwrap()
        );
    }

    let v = guiagent(&["validate", "--task-pack", a.join("tasks").to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(0), "{}", String::from_utf8_lossy(&v.stdout));

    let one = tmp.path().join("one");
    let out = guiagent(&[
        "taskgen", "--none", "0", "--retriever", "0", "--calculator", "1", "--out",
        one.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(label_counts(&one.join("tasks")), (0, 0, 1));
}

#[test]
fn eval_reads_a_rollout_log() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rollout_into(tmp.path()).status.code(), Some(0));
    let csv = tmp.path().join("m.csv");
    let out = guiagent(&[
        "eval",
        "--log",
        tmp.path().join("trajectories.jsonl").to_str().unwrap(),
        "--k",
        "1,2",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["aggregate"]["pass_at"]["2"].as_f64(), Some(1.0));
    assert!(fs::read_to_string(csv).unwrap().contains("ALL"));
}
