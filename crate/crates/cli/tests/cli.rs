use std::path::Path;
use std::process::{Command, Output};

use idfc::data::io::{read_pfm, write_pfm};
use idfc::data::{load_split, Split};
use idfc::layers::ObservationMask;
use idfc::metrics::Evaluation;
use idfc::tensor::Tensor;
use idfc::train::Checkpoint;

fn idfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idfc"))
        .args(args)
        .output()
        .expect("spawn idfc")
}

fn ok(args: &[&str]) -> String {
    let out = idfc(args);
    assert!(
        out.status.success(),
        "idfc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "synth",
            "--out",
            s(d),
            "--frames",
            "10",
            "--size",
            "32x32",
            "--seed",
            "7",
        ]);
    }
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(fa.len(), 21);
    assert_eq!(fa, fb);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(idfc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(idfc(&["synth", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(idfc(&["eval", "--data", "x"]).status.code(), Some(2));
    assert_eq!(idfc(&["gradcheck", "--module", "nope"]).status.code(), Some(2));
    let out = idfc(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.ckpt");
    let out = idfc(&[
        "eval",
        "--checkpoint",
        s(&missing),
        "--data",
        s(tmp.path()),
        "--samples",
        "5",
        "--report",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "lr = 0.01\nwarp_factor = 9\n").unwrap();
    let out = idfc(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = idfc(&["train", "--override", "lr"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_worst_error() {
    let out = ok(&["gradcheck", "--module", "tensor"]);
    let line = out.lines().find(|l| l.starts_with("worst relative error")).unwrap();
    let worst: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst < 1e-4, "{line}");
}

// Overfit one frame, then check eval and infer against the library.
#[test]
fn train_eval_infer_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--frames",
        "1",
        "--size",
        "32x32",
        "--seed",
        "3",
    ]);
    let ckpt = tmp.path().join("m.ckpt");
    let log = tmp.path().join("loss.tsv");
    let cfg = tmp.path().join("train.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# one-frame overfit\ndataset = {}\ncheckpoint = {}\nloss_log = {}\nepochs = 400\nsamples = 1024\nlr = 0.003\n",
            data.display(),
            ckpt.display(),
            log.display()
        ),
    )
    .unwrap();
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--override",
        "stem_channels=8",
        "--override",
        "context_widths=8,16,32",
        "--override",
        "context_channels=8",
        "--override",
        "depth_channels=8",
    ]);
    let lines: Vec<_> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 400);
    assert!(lines[0].starts_with("0\tcontext\t"));
    assert!(lines[399].starts_with("399\tjoint\t"));
    let restored = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(restored.iteration, 400);

    let report = tmp.path().join("report.jsonl");
    let table = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "train",
        "--samples",
        "1024",
        "--report",
        s(&report),
    ]);
    assert!(table.contains("pooled"));
    let eval = Evaluation::from_records(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(eval.report.pixel_count, 1024);
    assert!(eval.report.delta1 > 95.0, "{:?}", eval.report);

    let frame = &load_split(&data, Split::Train).unwrap()[0];
    let mut sparse = vec![0.0; 1024];
    for i in (0..1024).step_by(37) {
        sparse[i] = frame.depth_gt.data()[i];
    }
    let sparse = Tensor::new(&[1, 1, 32, 32], sparse).unwrap();
    let sparse_path = tmp.path().join("sparse.pfm");
    write_pfm(&sparse_path, &sparse).unwrap();
    let out_path = tmp.path().join("dense.pfm");
    ok(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--rgb",
        s(&data.join("frame_0000.ppm")),
        "--sparse",
        s(&sparse_path),
        "--mask-from-nonzero",
        "--out",
        s(&out_path),
    ]);
    let bits: Vec<bool> = sparse.data().iter().map(|v| *v != 0.0).collect();
    let mask = ObservationMask::from_bools(1, 32, 32, &bits).unwrap();
    let (_, model) = restored.restore().unwrap();
    let expected = model.predict_depth(&frame.rgb, &sparse, &mask).unwrap();
    let got = read_pfm(&out_path).unwrap();
    // PFM stores 32-bit floats.
    for (g, e) in got.data().iter().zip(expected.data()) {
        assert_eq!(*g, *e as f32 as f64);
    }
}

#[test]
fn ablate_rows_cover_grid_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--frames",
        "10",
        "--size",
        "16x16",
        "--seed",
        "1",
    ]);
    let report = tmp.path().join("ablate.tsv");
    ok(&[
        "ablate",
        "--data",
        s(&data),
        "--densities",
        "50,5,20",
        "--variants",
        "inductive,vanilla,context_only",
        "--report",
        s(&report),
        "--override",
        "epochs=1",
        "--override",
        "stem_channels=4",
        "--override",
        "context_widths=4,8,16",
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 9);
    let got: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    let mut expected = Vec::new();
    for v in ["inductive", "vanilla", "context_only"] {
        for d in ["5", "20", "50"] {
            expected.push((v, d));
        }
    }
    assert_eq!(got, expected);
    for r in &rows {
        assert!(r[2].parse::<f64>().unwrap().is_finite());
    }
}
