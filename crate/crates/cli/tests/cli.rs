use std::path::{Path, PathBuf};
use std::process::Command;

use peiv_cli::{cmd_benchmark, cmd_estimate, cmd_simulate, io, ExperimentConfig};
use peiv_core::{smooth_rts, DVector, Method};
use tempfile::TempDir;

const SCALAR: &str = r#"
[model]
f = [[[0.0]], [[1.0]]]
h = [[[1.0]], [[0.0]]]
q = [[0.2]]
r = [[0.09]]

[prior]
kind = "first_measurement"

[theta_prior]
mean = [0.9]
cov = [[0.04]]

[simulate]
theta_true = [0.9]
steps = 10
seed = 7
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn peiv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_peiv"))
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn simulate_row_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", SCALAR);
    let out = dir.path().join("t.csv");
    cmd_simulate(&cfg, Some(7), &out).unwrap();
    let text = read(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,x_1,y_1");
    assert_eq!(lines.len(), 12);
    assert!(lines[1].ends_with(','));
    let with_y = lines[1..].iter().filter(|l| !l.ends_with(',')).count();
    assert_eq!(with_y, 10);
    assert!(io::read_measurements(&out, 1).unwrap().ncols() == 10);
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", SCALAR);
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    cmd_simulate(&cfg, Some(7), &a).unwrap();
    cmd_simulate(&cfg, Some(7), &b).unwrap();
    cmd_simulate(&cfg, Some(8), &c).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn noise_free_measurements_equal_states() {
    let dir = TempDir::new().unwrap();
    let text = SCALAR
        .replace("q = [[0.2]]", "q = [[0.0]]")
        .replace("r = [[0.09]]", "r = [[0.0]]")
        .replace("seed = 7", "seed = 7\nx0 = { mean = [1.5], cov = [[0.0]] }");
    let cfg = write(dir.path(), "c.toml", &text);
    let out = dir.path().join("t.csv");
    cmd_simulate(&cfg, None, &out).unwrap();
    let text = read(&out);
    for line in text.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1], f[2]);
    }
    assert!(text.lines().nth(11).unwrap().contains("5.2301766"));
}

#[test]
fn estimate_output_matches_schema() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", SCALAR);
    let data = dir.path().join("t.csv");
    cmd_simulate(&cfg, None, &data).unwrap();
    let schema: serde_json::Value = serde_json::from_str(&read(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/estimate.schema.json"),
    ))
    .unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for method in Method::ALL {
        let out = dir.path().join(format!("{method}.json"));
        cmd_estimate(&cfg, method, &data, &out).unwrap();
        let value: serde_json::Value = serde_json::from_str(&read(&out)).unwrap();
        let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{method}: {errors:?}");
        assert_eq!(value["method"], method.as_str());
        assert!(Path::new(value["xhat_path"].as_str().unwrap()).exists());
    }
    let bad = serde_json::json!({"method": "peiv"});
    assert!(!validator.is_valid(&bad));
}

#[test]
fn estimate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", SCALAR);
    let data = dir.path().join("t.csv");
    cmd_simulate(&cfg, None, &data).unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    cmd_estimate(&cfg, Method::Peiv, &data, &a).unwrap();
    cmd_estimate(&cfg, Method::Peiv, &data, &b).unwrap();
    let strip = |p: &Path| read(p).replace(&a.with_extension("xhat.csv").display().to_string(), "")
        .replace(&b.with_extension("xhat.csv").display().to_string(), "");
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(read(&a.with_extension("xhat.csv")), read(&b.with_extension("xhat.csv")));
}

#[test]
fn known_parameters_estimate_is_the_smoother() {
    let dir = TempDir::new().unwrap();
    let text = r#"
[model]
f = [[[0.8]]]
h = [[[1.0]]]
q = [[0.2]]
r = [[0.09]]

[prior]
kind = "fixed"
mean = [0.0]
cov = [[1.0]]

[simulate]
theta_true = []
steps = 15
"#;
    let cfg_path = write(dir.path(), "c.toml", text);
    let data = dir.path().join("t.csv");
    cmd_simulate(&cfg_path, None, &data).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let model = cfg.model().unwrap();
    let y = io::read_measurements(&data, 1).unwrap();
    let prior = cfg.state_prior(&model, &y).unwrap();
    let s = smooth_rts(&model, &DVector::zeros(0), &y, &prior).unwrap();
    for method in Method::ALL {
        let out = dir.path().join(format!("{method}.json"));
        let res = cmd_estimate(&cfg_path, method, &data, &out).unwrap();
        assert!(res.theta_hat.is_empty());
        let xhat = io::read_column(&PathBuf::from(&res.xhat_path), "x_1").unwrap();
        for (k, x) in xhat.iter().enumerate() {
            assert!((x - s.means[(0, k)]).abs() < 1e-12, "{method} k={k}");
        }
    }
}

#[test]
fn benchmark_single_row_and_rerun_from_meta() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{SCALAR}\n[benchmark]\nbatch_sizes = [10]\nreplications = 3\nseed = 99\nsigma_theta = [[0.04]]\nmethods = [\"peiv\"]\n"
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let first = dir.path().join("first");
    cmd_benchmark(&cfg, Some(&first)).unwrap();
    let rmse = read(&first.join("rmse.csv"));
    assert_eq!(rmse.lines().count(), 2);
    assert!(rmse.starts_with("method,N,M_effective,rmse_theta,rmse_x0,q05,q95,failures\n"));
    assert!(rmse.lines().nth(1).unwrap().starts_with("peiv,10,3,"));
    let meta: serde_json::Value = serde_json::from_str(&read(&first.join("meta.json"))).unwrap();
    assert_eq!(meta["seed"], 99);
    assert_eq!(meta["sigma_theta"], serde_json::json!([[0.04]]));
    assert_eq!(meta["config"]["benchmark"]["ellipse_batch"], 10);

    let second = dir.path().join("second");
    cmd_benchmark(&first.join("meta.json"), Some(&second)).unwrap();
    assert_eq!(rmse, read(&second.join("rmse.csv")));
    assert_eq!(read(&first.join("ellipse.csv")), read(&second.join("ellipse.csv")));
    assert_eq!(read(&first.join("meta.json")), read(&second.join("meta.json")));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.toml", SCALAR);
    let data = dir.path().join("t.csv");

    let st = peiv().args(["simulate", "missing.toml", "--out"]).arg(&data).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let bad = write(dir.path(), "bad.toml", &format!("{SCALAR}\nunknown_key = 1\n"));
    let st = peiv().arg("simulate").arg(&bad).arg("--out").arg(&data).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = peiv().arg("simulate").arg(&cfg).arg("--out").arg(&data).status().unwrap();
    assert_eq!(st.code(), Some(0));

    let out = peiv()
        .args(["--quiet", "estimate"])
        .arg(&cfg)
        .args(["--method", "peiv", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("e.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stderr.is_empty());
    assert!(String::from_utf8(out.stdout).unwrap().contains("e.json"));

    let st = peiv()
        .arg("estimate")
        .arg(&cfg)
        .args(["--method", "nope", "--data"])
        .arg(&data)
        .args(["--out", "x.json"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    // Two measurement channels against a scalar model.
    let wide = write(dir.path(), "wide.csv", "k,x_1,y_1,y_2\n1,0.1,0.2,0.3\n");
    let st = peiv()
        .arg("estimate")
        .arg(&cfg)
        .args(["--method", "em", "--data"])
        .arg(&wide)
        .arg("--out")
        .arg(dir.path().join("w.json"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    // Explosive dynamics: no stationary covariance for the state prior.
    let unstable = write(dir.path(), "u.toml", &SCALAR.replace("theta_true = [0.9]", "theta_true = [1.5]"));
    let st = peiv()
        .arg("estimate")
        .arg(&unstable)
        .args(["--method", "peiv", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("u.json"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}

#[test]
fn threads_env_fallback() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{SCALAR}\n[benchmark]\nbatch_sizes = [10, 20]\nreplications = 4\nsigma_theta = [[0.04]]\n"
    );
    let cfg = write(dir.path(), "c.toml", &text);
    let mut outputs = Vec::new();
    for (flag, env) in [(Some("1"), None), (None, Some("3"))] {
        let out_dir = dir.path().join(format!("o{}", outputs.len()));
        let mut cmd = peiv();
        if let Some(k) = flag {
            cmd.args(["--threads", k]);
        }
        if let Some(k) = env {
            cmd.env("PEIV_THREADS", k);
        }
        let st = cmd.arg("benchmark").arg(&cfg).arg("--out-dir").arg(&out_dir).status().unwrap();
        assert_eq!(st.code(), Some(0));
        outputs.push(read(&out_dir.join("rmse.csv")));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].lines().count(), 9);
}
