use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], device: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_intersliceboost"));
    cmd.args(args).env("RUST_LOG", "warn");
    match device {
        Some(d) => cmd.env("ISB_DEVICE", d),
        None => cmd.env_remove("ISB_DEVICE"),
    };
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "settings = [1]\n{extra}\n[data]\nnum_patients = 5\n\n[data.phantom]\nnum_slices = 9\nheight = 32\nwidth = 32\nboundary_amplitude_px = 1.0\ndrift_max_px = 1.0\nmin_layer_thickness_px = 2\n"
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let out = cli(&["--help"], None);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "phantom",
        "split",
        "sparsify",
        "train-gen",
        "fill",
        "train-deblur",
        "train-seg",
        "eval",
        "report",
        "run",
    ] {
        assert!(text.contains(sub), "help is missing {sub}");
    }
}

#[test]
fn split_subcommand_stops_after_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = cli(
        &[
            "split",
            "--config",
            &config,
            "--output",
            out_dir.to_str().unwrap(),
            "--seed",
            "3",
        ],
        Some("cpu"),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("phantom") && stdout.contains("split"));
    assert!(out_dir.join("stages/split/assignment.json").exists());
    assert!(!out_dir.join("stages/sparsify-s1").exists());

    let again = cli(
        &[
            "split",
            "--config",
            &config,
            "--output",
            out_dir.to_str().unwrap(),
            "--seed",
            "3",
        ],
        None,
    );
    assert!(String::from_utf8_lossy(&again.stdout).contains("cached"));
}

#[test]
fn rejects_unsupported_device_and_bad_flags() {
    let out = cli(&["phantom"], Some("cuda:0"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ISB_DEVICE"));
    assert!(!cli(&["run", "--setting", "5"], None).status.success());
    let bad_stage = cli(&["run", "--stage", "deploy"], None);
    assert!(!bad_stage.status.success());
    assert!(stderr(&bad_stage).contains("deploy"));
}

#[test]
fn stage_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let config = write_config(dir.path(), &format!("output_dir = {:?}", dir.path().join("out")));
    let text = fs::read_to_string(&config).unwrap().replace(
        "num_patients = 5",
        &format!("num_patients = 5\ndataset_path = {:?}", empty),
    );
    fs::write(&config, text).unwrap();
    let out = cli(&["run", "--config", &config], None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stage phantom failed"), "{}", stderr(&out));
}
