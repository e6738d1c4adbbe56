use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use xmar_core::data::Vocab;
use xmar_core::image::{decode_png, ImageSpec};
use xmar_core::program::{AdversarialProgram, Program};
use xmar_tensor::Tensor;

fn splice_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/splice.data")
}

fn xmar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmar"))
        .args(args)
        .current_dir(dir)
        .env_remove("XMAR_THREADS")
        .env_remove("XMAR_DETERMINISTIC")
        .output()
        .expect("spawn xmar")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn metrics(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

const VICTIM_CFG: &str = "\
# tiny victim
arch = small-cnn
image = 32x32x3
num_labels = 10
epochs = 1
samples_per_epoch = 48
heldout = 40
seed = 3
out_dir = victim
";

fn pretrained(dir: &Path) {
    write(dir, "victim.cfg", VICTIM_CFG);
    ok(&xmar(&["pretrain-victim", "--config", "victim.cfg"], dir));
}

fn splice_run(extra: &str) -> String {
    format!(
        "victim = victim/victim.xmar\ndataset_format = splice\ntrain_path = {}\nsplice_train_size = 48\nsplice_test_size = 24\npatch = 4\neval_every = 20\nout_dir = run\n{extra}",
        splice_path().display()
    )
}

#[test]
fn missing_arch_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "v.cfg", "image = 32x32x3\nout_dir = v\n");
    let out = xmar(&["pretrain-victim", "--config", "v.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("arch"), "{}", stderr(&out));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "v.cfg", &format!("{VICTIM_CFG}colour = blue\n"));
    let out = xmar(&["pretrain-victim", "--config", "v.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_xmar"))
        .args(["bench-timing", "--config", "none.cfg"])
        .current_dir(dir.path())
        .env("XMAR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("XMAR_THREADS"));
}

#[test]
fn pretraining_is_byte_reproducible_and_reports_accuracy() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    pretrained(a.path());
    pretrained(b.path());
    let bytes_a = fs::read(a.path().join("victim/victim.xmar")).unwrap();
    let bytes_b = fs::read(b.path().join("victim/victim.xmar")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    let report = read_json(&a.path().join("victim/pretrain_report.json"));
    let acc = report["heldout_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["config"]["arch"], "small-cnn");
    assert_eq!(report["victim_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn inconsistent_reprogram_configs_are_rejected() {
    let dir = TempDir::new().unwrap();
    pretrained(dir.path());
    for (extra, key) in [
        ("bounded = true\n", "epsilon"),
        ("epsilon = 0.1\n", "epsilon"),
        ("remap_mode = linear\n", "q"),
        ("base_image = x.png\n", "base_image"),
        ("lr = -1\n", "lr"),
    ] {
        write(dir.path(), "r.cfg", &splice_run(&format!("max_steps = 10\n{extra}")));
        let out = xmar(&["reprogram", "--config", "r.cfg"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{extra}");
        assert!(stderr(&out).contains(key), "{extra}: {}", stderr(&out));
    }
}

#[test]
fn missing_victim_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "r.cfg", &splice_run("max_steps = 10\n"));
    let out = xmar(&["reprogram", "--config", "r.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bounded_samples_stay_within_epsilon() {
    let dir = TempDir::new().unwrap();
    pretrained(dir.path());
    write(dir.path(), "r.cfg", &splice_run("max_steps = 40\nbounded = true\nepsilon = 0.1\n"));
    let summary = ok(&xmar(&["reprogram", "--config", "r.cfg"], dir.path()));
    assert_eq!(summary["epsilon"], 0.1);
    let samples: Vec<_> = fs::read_dir(dir.path().join("run/samples")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(samples.len(), 4);
    for path in samples {
        let image = decode_png(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(image.shape(), &[32, 32, 3]);
        // Base image is all zeros.
        let worst = image.data().iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
        assert!(worst <= 0.1 + 1e-6, "{}: {worst}", path.display());
        assert!(worst > 0.0);
    }
}

#[test]
fn resume_continues_from_saved_step() {
    let full = TempDir::new().unwrap();
    let split = TempDir::new().unwrap();
    pretrained(full.path());
    pretrained(split.path());
    let cfg = splice_run("max_steps = 60\ncheckpoint_every = 20\n");
    write(full.path(), "r.cfg", &cfg);
    ok(&xmar(&["reprogram", "--config", "r.cfg"], full.path()));

    write(split.path(), "r.cfg", &splice_run("max_steps = 40\ncheckpoint_every = 20\n"));
    ok(&xmar(&["reprogram", "--config", "r.cfg"], split.path()));
    write(split.path(), "r.cfg", &cfg);
    let summary = ok(&xmar(&["reprogram", "--config", "r.cfg", "--resume", "run/checkpoint.xmar"], split.path()));
    assert_eq!(summary["steps"], 60);
    assert_eq!(summary["resumed"], true);

    let a = metrics(&full.path().join("run/metrics.jsonl"));
    let b = metrics(&split.path().join("run/metrics.jsonl"));
    let steps: Vec<u64> = b.iter().map(|m| m["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, [20, 40, 60]);
    for (x, y) in a.iter().zip(&b) {
        for key in ["step", "train_loss", "train_acc", "test_acc"] {
            assert_eq!(x[key], y[key], "{key}");
        }
    }
    assert_eq!(
        fs::read(full.path().join("run/checkpoint.xmar")).unwrap(),
        fs::read(split.path().join("run/checkpoint.xmar")).unwrap()
    );
}

#[test]
fn eval_and_export_use_the_trained_program() {
    let dir = TempDir::new().unwrap();
    pretrained(dir.path());
    write(dir.path(), "r.cfg", &splice_run("max_steps = 20\n"));
    let summary = ok(&xmar(&["reprogram", "--config", "r.cfg"], dir.path()));
    let report = ok(&xmar(&["eval", "--config", "r.cfg", "--checkpoint", "run/program.xmar"], dir.path()));
    assert_eq!(report["step"], 20);
    assert_eq!(report["test_acc"], summary["final_test_acc"]);
    let out = ok(&xmar(
        &["export-image", "--checkpoint", "run/program.xmar", "--input", "ACGT", "--out", "img/x.png"],
        dir.path(),
    ));
    assert_eq!(out["tokens"], 4);
    let image = decode_png(&fs::read(dir.path().join("img/x.png")).unwrap()).unwrap();
    assert_eq!(image.shape(), &[32, 32, 3]);
}

#[test]
fn export_of_all_pad_input_with_zero_theta_is_mid_gray() {
    let dir = TempDir::new().unwrap();
    let vocab = Vocab::dna();
    let spec = ImageSpec::new(16, 16, 3).unwrap();
    let theta = Tensor::zeros(vec![vocab.len(), 4, 4, 3]).unwrap();
    let program = Program::Plain(AdversarialProgram::from_theta(theta, spec, 4, 0).unwrap());
    let mut ck = program.to_checkpoint();
    ck.set_meta("vocab", vocab.to_json());
    ck.set_meta("tokenizer", "chars");
    ck.save(&dir.path().join("zero.xmar")).unwrap();
    ok(&xmar(&["export-image", "--checkpoint", "zero.xmar", "--input", "", "--out", "gray.png"], dir.path()));
    let bytes = fs::read(dir.path().join("gray.png")).unwrap();
    let image = decode_png(&bytes).unwrap();
    assert_eq!(image.shape(), &[16, 16, 3]);
    let gray = xmar_core::image::from_pixel(128);
    assert!(image.data().iter().all(|&v| v == gray));
}

#[test]
fn linear_head_with_three_accessible_labels_on_fourteen_classes() {
    let dir = TempDir::new().unwrap();
    pretrained(dir.path());
    let mut rows = String::new();
    for i in 0..56 {
        let class = i % 14;
        rows.push_str(&format!("{class},topic{class} word{} filler text\n", i % 5));
    }
    write(dir.path(), "text.csv", &rows);
    write(
        dir.path(),
        "r.cfg",
        "victim = victim/victim.xmar\ndataset_format = text_csv\ntrain_path = text.csv\ntest_fraction = 0.25\n\
         remap_mode = linear\nq = 3\nmax_steps = 20\neval_every = 10\nout_dir = run\n",
    );
    let summary = ok(&xmar(&["reprogram", "--config", "r.cfg"], dir.path()));
    assert_eq!(summary["remap_mode"], "linear");
    assert_eq!(summary["train_config"]["q"], 3);
    let ck = xmar_tensor::Checkpoint::load(&dir.path().join("run/program.xmar")).unwrap();
    let state = xmar_core::train::TrainState::from_checkpoint(&ck).unwrap();
    let head = state.remap.head().expect("linear head");
    assert_eq!(head.q(), 3);
    assert_eq!(head.num_targets(), 14);
    assert_eq!(head.weight().shape(), &[14, 3]);
}

#[test]
fn baseline_reports_unigram_and_selected_n() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "b.cfg",
        &format!(
            "dataset_format = splice\ntrain_path = {}\nsplice_train_size = 200\nsplice_test_size = 100\nout_dir = out\n",
            splice_path().display()
        ),
    );
    let report = ok(&xmar(&["baseline", "--config", "b.cfg"], dir.path()));
    for key in ["unigram_acc", "ngram_acc"] {
        let acc = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{key}");
    }
    assert!((1..=3).contains(&report["selected_n"].as_u64().unwrap()));
    let logged = metrics(&dir.path().join("out/metrics.jsonl"));
    assert_eq!(logged.len(), 1);
    assert_eq!(logged[0]["tag"], "baseline");
}

#[test]
fn bench_timing_reports_ratio_table() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "t.cfg", "sizes = 64, 128\nsamples = 3\ninner = 2\n");
    let report = ok(&xmar(&["bench-timing", "--config", "t.cfg"], dir.path()));
    assert_eq!(report["ratios"].as_array().unwrap().len(), 1);
    assert_eq!(report["points"].as_array().unwrap().len(), 2);
    assert!(report["max_ratio"].as_f64().unwrap() > 0.0);
    assert!(report["within_bound"].is_boolean());
}
