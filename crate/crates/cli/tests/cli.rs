use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bsunet_cli::plot::{ema, read_streams};
use proptest::prelude::*;

fn bsunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsunet"))
        .args(args)
        .env_remove("BSUNET_DATA")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_for_every_subcommand() {
    assert_eq!(code(&bsunet(&["--help"])), 0);
    assert_eq!(code(&bsunet(&["--version"])), 0);
    for sub in [
        "preprocess",
        "weightmap",
        "train-encoder",
        "train-seg",
        "predict",
        "cascade-predict",
        "evaluate",
        "params",
        "plot-losses",
        "pipeline",
        "synth",
    ] {
        let out = bsunet(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(stdout(&out).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&bsunet(&[])), 1);
    assert_eq!(code(&bsunet(&["no-such-command"])), 1);
    assert_eq!(code(&bsunet(&["evaluate", "--pred", "a"])), 1);
    assert_eq!(
        code(&bsunet(&["predict", "--model", "m", "--out", "o"])),
        1,
        "data root missing"
    );
    assert_eq!(
        code(&bsunet(&[
            "evaluate", "--pred", "a", "--truth", "b", "--out", "c", "--label", "3"
        ])),
        1
    );
}

#[test]
fn params_checks_expected_counts() {
    let base = configs().join("base_unet.toml");
    let original = configs().join("original_unet.toml");
    let out = bsunet(&["params", s(&base), "--expect", "6588139"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("6588139"));
    assert_eq!(code(&bsunet(&["params", s(&original), "--expect", "9854434"])), 0);
    assert_eq!(code(&bsunet(&["params", s(&base), "--expect", "1"])), 1);
    assert_eq!(code(&bsunet(&["params", "/no/such/spec.toml"])), 1);
}

#[test]
fn io_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    let out = bsunet(&[
        "synth",
        "--out",
        s(&file.join("sub")),
        "--cases",
        "1",
        "--depth",
        "2",
        "--size",
        "32",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_csv(path: &Path, rows: &[(usize, f64, f64, f64)]) {
    let mut text = String::from("iteration,epoch,lr,dice,weighted_dice,euclidean,total\n");
    for (i, d, e, t) in rows {
        text += &format!("{i},0,0.001,{d},,{e},{t}\n");
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn plot_losses_writes_one_svg_per_stream() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("seg_loss.csv");
    let rows: Vec<_> = (1..=20)
        .map(|i| (i, 1.0 / i as f64, 0.5 / i as f64, 0.75 / i as f64))
        .collect();
    write_csv(&csv, &rows);
    let out_dir = dir.path().join("plots");
    let out = bsunet(&["plot-losses", "--csv", s(&csv), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3, "{names:?}");
    assert!(names.iter().all(|n| n.ends_with(".svg")));
    assert!(names.iter().any(|n| n.ends_with("seg_loss_dice.svg")));
    let svg = std::fs::read_to_string(out_dir.join(&names[0])).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn duplicated_total_is_not_plotted_twice() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("enc_loss.csv");
    std::fs::write(
        &csv,
        "iteration,epoch,lr,dice,weighted_dice,euclidean,total\n1,0,0.1,0.9,,,0.9\n2,0,0.1,0.8,,,0.8\n",
    )
    .unwrap();
    let streams = read_streams(&csv).unwrap();
    let names: Vec<_> = streams.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["dice"]);
    assert_eq!(streams[0].iterations, [1.0, 2.0]);
}

#[test]
fn plot_losses_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x_loss.csv");
    write_csv(&csv, &[(1, 0.5, 0.1, 0.3)]);
    assert_eq!(
        code(&bsunet(&["plot-losses", "--csv", s(&csv), "--smoothing", "1.0"])),
        1
    );
    assert_eq!(
        code(&bsunet(&["plot-losses", "--csv", s(&dir.path().join("missing.csv"))])),
        1
    );
    std::fs::write(&csv, "iteration,epoch,lr,dice\n1,0,0.1,abc\n").unwrap();
    assert_eq!(code(&bsunet(&["plot-losses", "--csv", s(&csv)])), 1);
}

proptest! {
    #[test]
    fn zero_smoothing_is_raw(v in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        prop_assert_eq!(ema(&v, 0.0), v);
    }

    #[test]
    fn smoothing_keeps_monotone_series_monotone(
        steps in prop::collection::vec(0.0f64..1.0, 1..50),
        alpha in 0.0f64..0.99,
    ) {
        let v: Vec<f64> = steps.iter().scan(5.0, |acc, d| { *acc -= d; Some(*acc) }).collect();
        let sm = ema(&v, alpha);
        prop_assert!(sm.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(sm.iter().zip(&v).all(|(s, x)| s >= x));
    }
}

fn synth(dir: &Path, cases: &str, depth: &str, size: &str) {
    let out = bsunet(&[
        "synth",
        "--out",
        s(dir),
        "--cases",
        cases,
        "--depth",
        depth,
        "--size",
        size,
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_scores_reference_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2", "6", "32");
    let csv = dir.path().join("eval.csv");
    for label in ["1", "2"] {
        let out = bsunet(&[
            "evaluate",
            "--pred",
            s(&data),
            "--truth",
            s(&data),
            "--label",
            label,
            "--out",
            s(&csv),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let mut rd = csv::Reader::from_path(&csv).unwrap();
        let header = rd.headers().unwrap().clone();
        assert_eq!(&header[0], "case");
        let dpc = header.iter().position(|h| h == "dpc").unwrap();
        let assd = header.iter().position(|h| h == "assd").unwrap();
        let rows: Vec<_> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 3, "two cases and a summary");
        for r in &rows {
            assert_eq!(r[dpc].parse::<f64>().unwrap(), 1.0);
            assert_eq!(r[assd].parse::<f64>().unwrap(), 0.0);
        }
    }
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(
        code(&bsunet(&[
            "evaluate",
            "--pred",
            s(&empty),
            "--truth",
            s(&data),
            "--out",
            s(&csv)
        ])),
        1
    );
}

#[test]
fn weightmap_writes_volume_and_previews() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1", "6", "32");
    let out_path = dir.path().join("w.nii");
    let previews = dir.path().join("png");
    let out = bsunet(&[
        "weightmap",
        "--labels",
        s(&data.join("segmentation-0.nii")),
        "--out",
        s(&out_path),
        "--preview-dir",
        s(&previews),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ct = bsunet::volume::CtVolume::read(&out_path).unwrap();
    assert_eq!(ct.voxels.dim(), (6, 32, 32));
    assert!(ct.voxels.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(std::fs::read_dir(&previews).unwrap().count() > 0);
    let bad = bsunet(&[
        "weightmap",
        "--labels",
        s(&data.join("segmentation-0.nii")),
        "--out",
        s(&out_path),
        "--sigma",
        "0",
    ]);
    assert_eq!(code(&bad), 1);
}

fn run_config(dir: &Path, data: &Path, seed: u64) -> PathBuf {
    let spec = configs().join("desk_unet.toml").canonicalize().unwrap();
    let text = format!(
        "[network]\nspec = {spec:?}\nseed = {seed}\n\n[data]\nroot = {data:?}\nchannels = 1\n\n[train]\nepochs = 1\n\
         max_iterations = 2\nlr = {{ initial = 1e-3, decay = 0.3, period = 3 }}\nloss_weights = {{ w1 = 0.5, w2 = 0.5 }}\nseed = 1\n"
    );
    let path = dir.join(format!("run{seed}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_runs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1", "6", "64");
    let cfg = run_config(dir.path(), &data, 1);
    let run = dir.path().join("run");
    let out = bsunet(&["pipeline", "--config", s(&cfg), "--run-dir", s(&run)]);
    assert_eq!(
        code(&out),
        0,
        "{}{}",
        stdout(&out),
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "manifest.toml",
        "eval/liver.csv",
        "eval/tumor.csv",
        "liver/encoder.ckpt",
        "tumor/segmenter_loss.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_dir(run.join("plots")).unwrap().count() >= 4);
    let manifest = std::fs::read_to_string(run.join("manifest.toml")).unwrap();
    assert!(manifest.contains("complete = true"));

    let again = bsunet(&["pipeline", "--config", s(&cfg), "--run-dir", s(&run)]);
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("nothing to do"), "{}", stdout(&again));

    std::fs::remove_file(run.join("tumor/segmenter.ckpt")).unwrap();
    let resumed = bsunet(&["pipeline", "--config", s(&cfg), "--run-dir", s(&run)]);
    assert_eq!(code(&resumed), 0, "{}", String::from_utf8_lossy(&resumed.stderr));
    let text = stdout(&resumed);
    assert!(text.contains("step segmenter-tumor"), "{text}");
    assert!(
        !text.contains("step segmenter-liver") && !text.contains("step encoder-tumor"),
        "{text}"
    );
    assert!(run.join("tumor/segmenter.ckpt").exists());

    let other = run_config(dir.path(), &data, 2);
    assert_eq!(
        code(&bsunet(&["pipeline", "--config", s(&other), "--run-dir", s(&run)])),
        1
    );
}

#[test]
fn tumor_stage_needs_a_liver_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1", "4", "64");
    let cfg = run_config(dir.path(), &data, 1);
    let run = dir.path().join("run");
    let out = bsunet(&[
        "pipeline",
        "--config",
        s(&cfg),
        "--run-dir",
        s(&run),
        "--stage",
        "tumor",
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("liver"));
}

#[test]
fn training_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1", "4", "64");
    let cfg = run_config(dir.path(), &data, 1);
    let cache = dir.path().join("liver.bsc");
    let out = Command::new(env!("CARGO_BIN_EXE_bsunet"))
        .args(["preprocess", "--out", s(&cache)])
        .env("BSUNET_DATA", &data)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let enc = dir.path().join("enc.ckpt");
    let out = bsunet(&[
        "train-encoder",
        "--config",
        s(&cfg),
        "--cache",
        s(&cache),
        "--out",
        s(&enc),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("enc_loss.csv").exists());
    let seg = dir.path().join("seg.ckpt");
    let args = ["train-seg", "--config", s(&cfg), "--cache", s(&cache), "--out", s(&seg)];
    assert_eq!(code(&bsunet(&args)), 1, "w2 > 0 without an encoder");
    let mut with_enc = args.to_vec();
    with_enc.extend(["--encoder", s(&enc)]);
    let out = bsunet(&with_enc);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pred = dir.path().join("pred");
    let out = bsunet(&["predict", "--model", s(&seg), "--data", s(&data), "--out", s(&pred)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let labels = bsunet::volume::LabelVolume::read(pred.join("segmentation-0.nii")).unwrap();
    assert_eq!(labels.labels.dim(), (4, 64, 64));
    assert!(labels.labels.iter().all(|&v| v <= 1));
    let out = bsunet(&["predict", "--model", s(&enc), "--data", s(&data), "--out", s(&pred)]);
    assert_eq!(code(&out), 1, "an encoder checkpoint is not a segmenter");
}
