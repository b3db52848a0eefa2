use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SPEC: &str = r#"
schema_version = 1

[dataset]
split_seed = 5
split = { fractions = { train = 0.5, validation = 0.25, test = 0.25 } }

[dataset.synthetic]
n_patients = 16
image_size = 16

[student]
init_channels = 4
growth_rate = 2
block_layers = [1, 1]
head = "sigmoid_multilabel"
num_classes = 2

[train]
mode = "transfer_learning"
max_epochs = 2
batch_size = 4
base_lr = 0.001
repetitions = 1

[train.augment]
size = 16

[sweep]
betas = [50.0, 1.0]
sizes = [2, 4]
"#;

fn atx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atx")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_spec(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(atx(&[]).status.code(), Some(1));
    assert_eq!(atx(&["train"]).status.code(), Some(1));
    assert_eq!(atx(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(atx(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = write_spec(dir.path(), "bad.toml", &format!("{SPEC}\nunknown_key = 3\n"));
    let o = atx(&["train", "--spec", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let at = write_spec(dir.path(), "at.toml", &SPEC.replace("\"transfer_learning\"", "\"attention_transfer\"\nbeta = 10.0"));
    let o = atx(&["train", "--spec", s(&at), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("teacher"));
    assert!(!dir.path().join("o").exists(), "no training before the teacher check");
}

#[test]
fn train_teacher_then_search_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", SPEC);
    let tl = dir.path().join("tl");
    let o = atx(&["train", "--spec", s(&spec), "--out", s(&tl), "--reps", "2", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for rep in 0..2 {
        let log = std::fs::read_to_string(tl.join(format!("rep{rep}/epochs.csv"))).unwrap();
        assert_eq!(log.lines().count(), 3, "header plus one line per epoch");
        assert!(tl.join(format!("rep{rep}/best.ckpt")).is_file());
    }
    let summary = std::fs::read_to_string(tl.join("summary.json")).unwrap();
    assert!(summary.contains("\"validation\""));

    // rerun is identical
    let again = dir.path().join("tl_again");
    assert_eq!(atx(&["train", "--spec", s(&spec), "--out", s(&again), "--reps", "2", "--seed", "4"]).status.code(), Some(0));
    for rep in 0..2 {
        let f = format!("rep{rep}/epochs.csv");
        assert_eq!(std::fs::read(tl.join(&f)).unwrap(), std::fs::read(again.join(&f)).unwrap());
    }

    // the trained student serves as a teacher for a beta search
    let teacher = tl.join("rep0/best.ckpt");
    let bs = dir.path().join("beta");
    let o = atx(&["beta-search", "--spec", s(&spec), "--teacher", s(&teacher), "--out", s(&bs)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(bs.join("beta_search.csv")).unwrap();
    assert_eq!(table.lines().collect::<Vec<_>>()[0], "beta,metric");
    assert_eq!(table.lines().count(), 3);

    let cmp = dir.path().join("cmp");
    let o = atx(&["compare", s(&tl), s(&bs.join("beta_1")), "--out", s(&cmp)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["compare.csv", "compare.md", "compare.svg"] {
        assert!(cmp.join(f).is_file(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("late fluctuation"));

    // a truncated log is reported by name
    let broken = dir.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    let log = std::fs::read_to_string(tl.join("rep0/epochs.csv")).unwrap();
    let mut lines: Vec<&str> = log.lines().collect();
    lines.remove(1);
    std::fs::write(broken.join("epochs.csv"), lines.join("\n") + "\n").unwrap();
    let o = atx(&["compare", s(&tl), s(&broken), "--out", s(&cmp)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("broken"), "{}", stderr(&o));
}

#[test]
fn size_sweep_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", SPEC);
    let out = dir.path().join("sweep");
    let o = atx(&["size-sweep", "--spec", s(&spec), "--out", s(&out), "--reps", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("size_sweep_tl.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "size,metric,ci");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("2,") && rows[2].starts_with("4,"));

    let big = write_spec(dir.path(), "big.toml", &SPEC.replace("sizes = [2, 4]", "sizes = [2, 400]"));
    let o = atx(&["size-sweep", "--spec", s(&big), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exceeds"));
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", SPEC);
    let out = dir.path().join("data");
    let o = atx(&["gen-data", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 16 * 2);

    // the written manifest drives training just like the in-memory corpus
    let from_disk = SPEC.replace("[dataset.synthetic]\nn_patients = 16\nimage_size = 16\n", "").replace(
        "[dataset]\n",
        &format!("[dataset]\nmanifest = {:?}\n", out.join("manifest.csv").to_str().unwrap()),
    );
    let spec2 = write_spec(dir.path(), "disk.toml", &from_disk);
    let o = atx(&["train", "--spec", s(&spec2), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn worker_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", SPEC);
    let o = Command::new(env!("CARGO_BIN_EXE_atx"))
        .args(["train", "--spec", s(&spec), "--out", s(&dir.path().join("o"))])
        .env("ATX_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ATX_WORKERS"));
}

#[test]
fn shipped_specs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs");
    for name in ["desk.toml", "teacher.toml"] {
        let spec = atx_core::experiment::ExperimentSpec::from_file(&dir.join(name)).unwrap();
        assert_eq!(spec.train.augment.size, 64, "{name}");
    }
}
