use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use sage::io::archive::read_archive;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn sage(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_sage")).args(args).output().expect("launch sage");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = sage(args);
    assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
    r
}

/// Synthesized world, library and a briefly trained model shared by the tests.
fn workspace() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
        std::fs::write(
            dir.path().join("c.json"),
            r#"{"train": {"iterations": 100}, "eval": {"generated_per_category": 12, "test_per_category": 12}}"#,
        )
        .unwrap();
        ok(&["synth", "--config", &p("c.json"), "--seed", "11", "--out", &p("w.sagl"), "--world-out", &p("world.json"), "--test-out", &p("test.sagl"), "--seen-samples", "12"]);
        ok(&["train", "--archive", &p("w.sagl"), "--world", &p("world.json"), "--config", &p("c.json"), "--seed", "1", "--out", &p("m.sagm")]);
        dir
    })
    .path()
}

fn path(name: &str) -> String {
    workspace().join(name).to_string_lossy().into_owned()
}

fn scratch(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(sage(&["synth", "--no-such-flag"]).code, 2);
    assert_eq!(sage(&["frobnicate"]).code, 2);
    assert_eq!(sage(&[]).code, 2);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(sage(&["--help"]).code, 0);
    assert_eq!(sage(&["--version"]).code, 0);
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"iterationz": 3}}"#).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    let r = sage(&["synth", "--config", &cfg, "--seed", "1", "--out", &scratch(&dir, "w.sagl")]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    std::fs::write(&cfg, r#"{"edit": {"alpha": -1.0}}"#).unwrap();
    assert_eq!(sage(&["synth", "--config", &cfg, "--seed", "1", "--out", &scratch(&dir, "w.sagl")]).code, 3);
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(sage(&["synth", "--config", &cfg, "--seed", "1", "--out", &scratch(&dir, "w.sagl")]).code, 3);
}

#[test]
fn corrupt_or_missing_files_are_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.sagl");
    let mut bytes = std::fs::read(path("w.sagl")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&bad, &bytes).unwrap();
    let bad = bad.to_string_lossy().into_owned();
    let out = scratch(&dir, "g.sagl");
    let gen = |model: &str, archive: &str| {
        sage(&["generate", "--model", model, "--archive", archive, "--method", "age", "--seed", "0", "--out", &out]).code
    };
    assert_eq!(gen(&path("m.sagm"), &bad), 4);
    assert_eq!(gen(&bad, &path("w.sagl")), 4);
    assert_eq!(sage(&["inspect", &scratch(&dir, "missing.sagl")]).code, 4);
    assert_eq!(sage(&["inspect", &bad]).code, 4);
    assert!(!Path::new(&out).exists());
}

#[test]
fn invalid_requests_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = scratch(&dir, "g.sagl");
    let base = ["generate", "--model", &path("m.sagm"), "--archive", &path("w.sagl"), "--method", "sage", "--seed", "0", "--out", &out];
    let with = |extra: &[&str]| {
        let mut v: Vec<&str> = base.to_vec();
        v.extend_from_slice(extra);
        sage(&v).code
    };
    assert_eq!(with(&["--category", "unseen_99"]), 5);
    assert_eq!(with(&["--t-b", "999"]), 5);
    assert_eq!(with(&["--shots", "1000"]), 5);
    assert_eq!(with(&["--count", "0"]), 5);
    let edit = sage(&["edit", "--model", &path("m.sagm"), "--archive", &path("w.sagl"), "--category", "unseen_00", "--direction", "999", "--alpha", "1", "--out", &out]);
    assert_eq!(edit.code, 5);
}

#[test]
fn zero_strength_sage_returns_the_estimated_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let report = scratch(&dir, "embed.json");
    ok(&["embed", "--model", &path("m.sagm"), "--archive", &path("w.sagl"), "--category", "unseen_01", "--shots", "1", "--t-b", "10", "--out", &report]);
    let out = scratch(&dir, "g.sagl");
    ok(&["generate", "--model", &path("m.sagm"), "--archive", &path("w.sagl"), "--method", "sage", "--seed", "3", "--alpha", "0", "--shots", "1", "--t-b", "10", "--count", "4", "--category", "unseen_01", "--out", &out]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let e_hat: Vec<f64> = v["embedding"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|l| l.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()))
        .collect();
    let lib = read_archive(Path::new(&out)).unwrap().library;
    let codes = lib.codes("unseen_01").unwrap();
    assert_eq!(codes.len(), 4);
    for c in codes {
        for (a, b) in c.values().iter().zip(&e_hat) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}

#[test]
fn generated_archive_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = scratch(&dir, "g.sagl");
    ok(&["generate", "--model", &path("m.sagm"), "--archive", &path("w.sagl"), "--config", &path("c.json"), "--method", "sage-multi", "--t-b", "4,8", "--seed", "9", "--out", &out]);
    let ar = read_archive(Path::new(&out)).unwrap();
    let meta = ar.metadata.unwrap();
    assert_eq!(meta["method"], "sage-multi");
    assert_eq!(meta["seed"], 9);
    assert_eq!(meta["t_b"], serde_json::json!([4, 8]));
    for (_, cat) in ar.library.iter() {
        assert_eq!(cat.codes.len(), 12);
    }
    assert_eq!(ar.library.len(), 5);
}

#[test]
fn duplicating_real_samples_leaves_accuracy_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("eval");
    ok(&["eval", "--train", &path("w.sagl"), "--generated", &path("w.sagl"), "--test", &path("test.sagl"), "--world", &path("world.json"), "--metrics", "nas", "--out-dir", &out_dir.to_string_lossy()]);
    let csv = std::fs::read_to_string(out_dir.join("nas.csv")).unwrap();
    let overall = csv.lines().find(|l| l.starts_with("__overall__")).unwrap();
    let f: Vec<&str> = overall.split(',').collect();
    assert_eq!(f[1], f[2], "{csv}");
    assert!(!out_dir.join("pca.csv").exists());
}

#[test]
fn eval_writes_every_requested_table() {
    let dir = tempfile::tempdir().unwrap();
    let gen = scratch(&dir, "g.sagl");
    ok(&["generate", "--model", &path("m.sagm"), "--archive", &path("w.sagl"), "--config", &path("c.json"), "--method", "age", "--seed", "2", "--out", &gen]);
    let out_dir: PathBuf = dir.path().join("eval");
    ok(&["eval", "--train", &path("w.sagl"), "--generated", &gen, "--test", &path("test.sagl"), "--world", &path("world.json"), "--config", &path("c.json"), "--out-dir", &out_dir.to_string_lossy()]);
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,scope,value\n"));
    assert!(metrics.contains("frechet,all,"));
    assert!(metrics.contains("diversity,all,"));
    let pca = std::fs::read_to_string(out_dir.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 5 * (10 + 12 + 12));
    assert_eq!(sage(&["eval", "--train", &path("w.sagl"), "--generated", &gen, "--test", &path("test.sagl"), "--metrics", "bogus", "--out-dir", &out_dir.to_string_lossy()]).code, 5);
}

#[test]
fn inspect_recognizes_each_format() {
    let lib = ok(&["inspect", &path("w.sagl")]).stdout;
    assert!(lib.starts_with("SAGL v1 L=6 D=48 categories=25"), "{lib}");
    assert!(lib.contains("unseen_04 unseen 10"));
    let model = ok(&["inspect", &path("m.sagm")]).stdout;
    assert!(model.starts_with("SAGM v1 L=6 D=48 l=24 G=3 S=20"), "{model}");
    assert!(model.contains("iterations 100"));
    let world = ok(&["inspect", &path("world.json")]).stdout;
    assert!(world.contains("\"seed\":11"));
}

#[test]
fn fusion_commands_write_images() {
    let dir = tempfile::tempdir().unwrap();
    let img = |name: &str, v: u8| {
        let mut bytes = b"P5\n4 3\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(v, 12));
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p.to_string_lossy().into_owned()
    };
    let (real, inv, ed) = (img("r.pgm", 100), img("i.pgm", 100), img("e.pgm", 180));
    for cmd in ["fuse-pixel", "fuse-freq"] {
        let out = scratch(&dir, &format!("{cmd}.pgm"));
        ok(&[cmd, "--real", &real, "--inv", &inv, "--edited", &ed, "--out", &out]);
        let decoded = sage::io::pnm::read_pnm(Path::new(&out)).unwrap();
        assert_eq!(decoded.shape(), (3, 4, 1));
    }
    let small = dir.path().join("s.pgm");
    std::fs::write(&small, b"P5\n2 2\n255\n\0\0\0\0").unwrap();
    let r = sage(&["fuse-pixel", "--real", &small.to_string_lossy(), "--inv", &inv, "--edited", &ed, "--out", &scratch(&dir, "x.pgm")]);
    assert_eq!(r.code, 5, "{}", r.stderr);
}
