use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn confpose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confpose"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CONFPOSE_OUT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn bad_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    for body in ["sede = 3", "[stream]\ntau_out = \"high\"", "[scene]\nframes = 0", "seed = ["] {
        let config = write_config(tmp.path(), body);
        let out = confpose(&["stream", "--config", &config], tmp.path());
        assert_eq!(out.status.code(), Some(2), "{body}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
    let out = confpose(&["stream", "--config", "missing.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_beat_config_and_default_dir_is_used() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "seed = 4\n[scene]\nframes = 20\n");
    let out = confpose(&["stream", "--config", &config, "--seed", "9"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("runs/stream-9");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["command"], "stream");
    let written = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(written.contains("seed = 9"));
    assert!(written.contains("frames = 20"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("elsewhere");
    let config = write_config(tmp.path(), "[scene]\nframes = 12\n");
    let out = Command::new(env!("CARGO_BIN_EXE_confpose"))
        .args(["stream", "--config", &config, "--seed", "2"])
        .current_dir(tmp.path())
        .env("CONFPOSE_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("stream-2/trajectory.tum").is_file());
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn diag_bins_flag_and_monotone_assertion() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "[diag]\nedges = 2000\n");
    let dir = tmp.path().join("one");
    let out = confpose(
        &["diag", "--config", &config, "--bins", "1", "--out", dir.to_str().unwrap()],
        tmp.path(),
    );
    assert!(out.status.success());
    let rows = fs::read_to_string(dir.join("bins_rotation.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);

    // Heavy confidence jitter with many narrow bins breaks strict ordering.
    let config = write_config(tmp.path(), "[scene]\nconf_jitter = 2.0\n[diag]\nedges = 2000\n");
    let out = confpose(
        &["diag", "--config", &config, "--bins", "200", "--assert-monotone", "--out", "noisy"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(tmp.path().join("noisy/report.json").is_file());
}

#[test]
fn eval_leaves_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "[scene]\nframes = 15\n");
    let run = tmp.path().join("s");
    let out = confpose(&["stream", "--config", &config, "--out", "s"], tmp.path());
    assert!(out.status.success());
    let est = run.join("trajectory.tum");
    let reference = run.join("reference.tum");
    let before = (fs::read(&est).unwrap(), fs::read(&reference).unwrap());
    let out = confpose(
        &["eval", est.to_str().unwrap(), reference.to_str().unwrap(), "--out", "e"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(before, (fs::read(&est).unwrap(), fs::read(&reference).unwrap()));
    assert!(tmp.path().join("e/report.json").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ate_rmse "));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = confpose(&["train"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
