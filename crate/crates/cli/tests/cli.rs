use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn rewc(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rewc"));
    cmd.args(args).env("RUST_LOG", "warn");
    match root {
        Some(r) => cmd.env("REWC_OUTPUT_ROOT", r),
        None => cmd.env_remove("REWC_OUTPUT_ROOT"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("seconds");
            map.values_mut().for_each(strip_timings);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

const SYNTHETIC: &str = "\
dataset = synthetic
arch = mlp-8-16-2
tasks = 2
epochs = 3
batch_size = 32
";

#[test]
fn fine_tuning_smoke_run_forgets_the_first_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ft.cfg",
        &format!("{SYNTHETIC}methods = ft\nseeds = 0,1\noutput = out\n"),
    );
    let out = rewc(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let agg = read_json(&dir.path().join("out/aggregate.json"));
    assert_eq!(agg["schema_version"], 1);
    let rec = &agg["records"][0];
    assert_eq!(rec["method_label"], "ft");
    let acc = rec["accuracy_mean"].as_array().unwrap();
    assert_eq!(acc.len(), 2);
    assert_eq!(acc[0].as_array().unwrap().len(), 1);
    assert_eq!(acc[1].as_array().unwrap().len(), 2);
    assert!(acc[1][0].as_f64().unwrap() < acc[0][0].as_f64().unwrap());
    for seed in [0, 1] {
        let run = read_json(&dir.path().join(format!("out/ft_seed{seed}.json")));
        assert_eq!(run["status"], "ok");
    }
}

#[test]
fn identical_configs_give_identical_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let mut payloads = Vec::new();
    for name in ["a", "b"] {
        let cfg = write_config(
            dir.path(),
            &format!("{name}.cfg"),
            &format!("{SYNTHETIC}name = same\nmethods = ewc,rewc\nseeds = 3\noutput = {name}\n"),
        );
        let out = rewc(&["run", cfg.to_str().unwrap()], Some(dir.path()));
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir.path().join(name))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        let mut values: Vec<Value> = files.iter().map(|f| read_json(f)).collect();
        values.iter_mut().for_each(strip_timings);
        payloads.push(values);
    }
    assert_eq!(payloads[0].len(), 3);
    assert_eq!(payloads[0], payloads[1]);
}

#[test]
fn lambda_sweep_yields_one_record_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.cfg",
        &format!(
            "{}methods = ewc\nlambdas = 1,10,100,1000,10000\noutput = sweep\n",
            SYNTHETIC.replace("epochs = 3", "epochs = 1")
        ),
    );
    let out = rewc(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let agg = read_json(&dir.path().join("sweep/aggregate.json"));
    let labels: Vec<&str> = agg["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["method_label"].as_str().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "ewc(l=1)",
            "ewc(l=10)",
            "ewc(l=100)",
            "ewc(l=1000)",
            "ewc(l=10000)"
        ]
    );
}

#[test]
fn bad_config_exits_one_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.cfg",
        "dataset = synthetic\narch = mlp-8-16-2\nepochs = lots\n",
    );
    let out = rewc(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.cfg:3:"), "{stderr}");

    let missing = rewc(
        &["run", dir.path().join("absent.cfg").to_str().unwrap()],
        None,
    );
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(rewc(&["frobnicate"], None).status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_two_and_flushes_failed_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "fail.cfg",
        &format!("{SYNTHETIC}methods = ft\nenergy_layers = 9\noutput = fail\n"),
    );
    let out = rewc(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    let run = read_json(&dir.path().join("fail/ft_seed0.json"));
    assert_eq!(run["status"], "failed");
    assert!(run["error"].as_str().unwrap().contains("energy layer 9"));
    let agg = read_json(&dir.path().join("fail/aggregate.json"));
    assert_eq!(agg["records"][0]["failed_seeds"][0], 0);
}

#[test]
fn plots_and_fim_probe_write_svgs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "plot.cfg",
        &format!(
            "{SYNTHETIC}methods = ewc,rewc\nenergy_layers = 2\ncheckpoints = true\noutput = p\n"
        ),
    );
    let out = rewc(&["run", cfg.to_str().unwrap()], Some(dir.path()));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let p = dir.path().join("p");

    let plot = rewc(
        &[
            "plot",
            p.join("aggregate.json").to_str().unwrap(),
            p.join("rewc-all_no_last-l100_seed0.json").to_str().unwrap(),
            "--out",
            p.join("svg").to_str().unwrap(),
        ],
        None,
    );
    assert!(
        plot.status.success(),
        "{}",
        String::from_utf8_lossy(&plot.stderr)
    );
    let curve = std::fs::read_to_string(p.join("svg/accuracy.svg")).unwrap();
    assert_eq!(curve.matches(r#"class="series""#).count(), 3);
    let heat = std::fs::read_to_string(p.join("svg/rewc-all_no_last-l100_seed0_layer2_before.svg"))
        .unwrap();
    // Layer 2 of mlp-8-16-2 holds 16 x 2 weights.
    assert_eq!(heat.matches(r#"class="cell""#).count(), 32 * 32);

    let ckpt = p.join("checkpoints/rewc-all_no_last-l100_seed0_task2.rckp");
    let probe = rewc(
        &[
            "fim-probe",
            ckpt.to_str().unwrap(),
            "--layer",
            "1",
            "--data",
            p.join("tasks_seed0.rdat").to_str().unwrap(),
            "--task",
            "2",
            "--out",
            p.join("probe").to_str().unwrap(),
        ],
        None,
    );
    assert!(
        probe.status.success(),
        "{}",
        String::from_utf8_lossy(&probe.stderr)
    );
    assert!(String::from_utf8_lossy(&probe.stdout).contains("diagonal energy"));
    let energy = read_json(&p.join("probe/rewc-all_no_last-l100_seed0_task2_layer1_energy.json"));
    assert_eq!(energy["params"], 8 * 16);
    for tag in ["before", "after"] {
        assert!(p
            .join(format!(
                "probe/rewc-all_no_last-l100_seed0_task2_layer1_{tag}.svg"
            ))
            .is_file());
    }

    let bad_layer = rewc(
        &[
            "fim-probe",
            ckpt.to_str().unwrap(),
            "--layer",
            "7",
            "--data",
            p.join("tasks_seed0.rdat").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(bad_layer.status.code(), Some(1));
}
