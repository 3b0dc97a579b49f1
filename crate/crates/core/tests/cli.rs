mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::fixtures::{tiny_config, tiny_spec};

fn vidcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidcap"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vidcap(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&vidcap(&[])), 1);
    assert_eq!(code(&vidcap(&["frobnicate"])), 1);
    assert_eq!(code(&vidcap(&["afs", "--video", "x.vvid"])), 1);
    assert_eq!(
        code(&vidcap(&[
            "afs", "--video", "x", "--frames", "4", "--metric", "lpips", "--out", "y"
        ])),
        1
    );
    assert_eq!(code(&vidcap(&["--help"])), 0);
}

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).display().to_string();
    fs::write(
        p("spec.json"),
        serde_json::to_string(&tiny_spec(8, 2)).unwrap(),
    )
    .unwrap();
    fs::write(
        p("config.json"),
        serde_json::to_string(&tiny_config(2, 4)).unwrap(),
    )
    .unwrap();

    ok(&["gen-data", "--spec", &p("spec.json"), "--out", &p("data")]);
    let video = p("data/videos/v0000.vvid");

    ok(&[
        "afs",
        "--video",
        &video,
        "--frames",
        "6",
        "--dedupe",
        "--out",
        &p("sel.json"),
    ]);
    let sel = json(Path::new(&p("sel.json")));
    assert_eq!(sel["m"], 12);
    assert_eq!(sel["n"], 6);
    assert_eq!(sel["indices"].as_array().unwrap().len(), 6);
    assert_eq!(sel["cdf"].as_array().unwrap().len(), 12);

    ok(&[
        "build-vocab",
        "--corpus",
        &p("data/train.jsonl"),
        "--concepts",
        "4",
        "--out",
        &p("vocab.json"),
    ]);
    let vocab = json(Path::new(&p("vocab.json")));
    assert_eq!(vocab["concepts"].as_array().unwrap().len(), 4);
    assert_eq!(vocab["words"][0], "<pad>");

    ok(&[
        "train",
        "--config",
        &p("config.json"),
        "--data",
        &p("data"),
        "--out",
        &p("ckpt"),
    ]);
    assert!(Path::new(&p("ckpt/params.bin")).exists());
    assert_eq!(
        fs::read_to_string(p("ckpt/train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let caption = ok(&[
        "caption",
        "--ckpt",
        &p("ckpt"),
        "--video",
        &video,
        "--decode",
        "beam",
        "--beam",
        "3",
    ]);
    let caption = String::from_utf8(caption.stdout).unwrap();
    assert!(caption.ends_with('\n'));
    let greedy = ok(&[
        "caption",
        "--ckpt",
        &p("ckpt"),
        "--video",
        &video,
        "--decode",
        "greedy",
    ]);
    let beam1 = ok(&[
        "caption",
        "--ckpt",
        &p("ckpt"),
        "--video",
        &video,
        "--beam",
        "1",
    ]);
    assert_eq!(greedy.stdout, beam1.stdout);

    ok(&[
        "evaluate",
        "--ckpt",
        &p("ckpt"),
        "--corpus",
        &p("data/test.jsonl"),
        "--out",
        &p("report.json"),
    ]);
    let report = json(Path::new(&p("report.json")));
    assert!(report["bleu4"].as_f64().unwrap() >= 0.0);
    assert!(Path::new(&p("report.predictions.jsonl")).exists());

    ok(&[
        "score",
        "--preds",
        &p("report.predictions.jsonl"),
        "--refs",
        &p("data/test.jsonl"),
        "--train-corpus",
        &p("data/train.jsonl"),
        "--out",
        &p("rescored.json"),
    ]);
    assert_eq!(json(Path::new(&p("rescored.json"))), report);

    assert_eq!(
        code(&vidcap(&[
            "caption",
            "--ckpt",
            &p("ckpt"),
            "--video",
            &video,
            "--beam",
            "0"
        ])),
        1
    );

    // data errors exit 2
    assert_eq!(
        code(&vidcap(&[
            "caption",
            "--ckpt",
            &p("ckpt"),
            "--video",
            &p("missing.vvid")
        ])),
        2
    );
    fs::remove_file(p("data/videos/v0000.vvid")).unwrap();
    let partial = vidcap(&[
        "evaluate",
        "--ckpt",
        &p("ckpt"),
        "--corpus",
        &p("data/corpus.jsonl"),
        "--out",
        &p("r2.json"),
    ]);
    assert_eq!(code(&partial), 2);
    assert_eq!(json(Path::new(&p("r2.json")))["failed"], 1);

    // configuration errors exit 1
    fs::write(p("bad.json"), "{\"lambda\": 0.1}").unwrap();
    assert_eq!(
        code(&vidcap(&[
            "train",
            "--config",
            &p("bad.json"),
            "--data",
            &p("data"),
            "--out",
            &p("c2")
        ])),
        1
    );
}
