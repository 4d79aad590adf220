mod common;

use std::path::Path;

use common::{path_str, run, tiny};
use shapegene::evalsuite::EvalConfig;
use shapegene::trainer::TrainConfig;
use shapegene::labelspace::{quantize, Part};
use shapegene::pipeline::FaceModel;
use shapegene::Image;

#[test]
fn usage_errors_exit_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    assert_eq!(run(&["gen-data", "--n", "4", "--bogus", "--out", path_str(&out)]), 2);
    assert_eq!(run(&["gen-data", "--out", path_str(&out)]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["remix", "--checkpoint", "x"]), 2);
    assert!(!out.exists());
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_one() {
    let t = tiny();
    let dir = tempfile::tempdir().unwrap();
    let face = dir.path().join("face.png");
    t.faces(1)[0].save_png(&face).unwrap();
    let out = dir.path().join("out");
    let ckpt = t.ckpt("cyclic");
    let remix = |part: &str, alpha: &str| {
        run(&[
            "remix", "--checkpoint", path_str(&ckpt), "--receptor", path_str(&face), "--donor", path_str(&face),
            "--part", part, "--alpha", alpha, "--out", path_str(&out),
        ])
    };
    assert_eq!(remix("wings", "1"), 1);
    assert_eq!(remix("hair", "1.5"), 1);
    assert!(!out.exists());
    assert_eq!(remix("hair", "1"), 0);

    let missing = dir.path().join("missing.ckpt");
    assert_eq!(run(&["generate", "--checkpoint", path_str(&missing), "--label", path_str(&face), "--cond", path_str(&face), "--out", path_str(&out.join("g.png"))]), 1);
    // a stage-0 config handed to the stage-1 command
    assert_eq!(run(&["train-parsers", "--config", path_str(&t.root.join("stage0.toml"))]), 1);
}

#[test]
fn remix_and_interpolate_agree_at_the_endpoints() {
    let t = tiny();
    let faces = t.faces(2);
    let dir = tempfile::tempdir().unwrap();
    let (rec, don) = (dir.path().join("r.png"), dir.path().join("d.png"));
    faces[0].save_png(&rec).unwrap();
    faces[1].save_png(&don).unwrap();
    let ckpt = t.ckpt("cyclic");
    let model = FaceModel::load(&ckpt).unwrap();

    let mut labels = Vec::new();
    for alpha in ["0", "1"] {
        let out = dir.path().join(format!("remix{alpha}"));
        let code = run(&[
            "remix", "--checkpoint", path_str(&ckpt), "--receptor", path_str(&rec), "--donor", path_str(&don),
            "--part", "eyes", "--alpha", alpha, "--out", path_str(&out),
        ]);
        assert_eq!(code, 0);
        for f in ["remixed_label.png", "remixed_gene.bin", "remixed_face.png", "composited_face.png"] {
            assert!(out.join(f).exists(), "{f}");
        }
        labels.push(quantize(&Image::load_png(&out.join("remixed_label.png")).unwrap()));
    }
    let (own, _) = model.parse(&faces[0]).unwrap();
    assert_eq!(labels[0], own);

    let strip = dir.path().join("strip");
    let code = run(&[
        "interpolate", "--checkpoint", path_str(&ckpt), "--receptor", path_str(&rec), "--donor", path_str(&don),
        "--part", "eyes", "--steps", "4", "--out", path_str(&strip),
    ]);
    assert_eq!(code, 0);
    for k in 0..4 {
        assert!(strip.join(format!("label_{k:02}.png")).exists());
        assert!(strip.join(format!("face_{k:02}.png")).exists());
    }
    let first = quantize(&Image::load_png(&strip.join("label_00.png")).unwrap());
    let last = quantize(&Image::load_png(&strip.join("label_03.png")).unwrap());
    assert_eq!(first, labels[0]);
    assert_eq!(last, labels[1]);
    let direct = model.remix(&faces[0], &faces[1], Part::Eyes, 1.0).unwrap();
    assert_eq!(quantize(direct.label.image()), last);
}

#[test]
fn generate_and_eval_write_outputs() {
    let t = tiny();
    let dir = tempfile::tempdir().unwrap();
    let face = dir.path().join("face.png");
    let faces = t.faces(1);
    faces[0].save_png(&face).unwrap();
    let model = FaceModel::load(&t.ckpt("cyclic")).unwrap();
    let label = dir.path().join("label.png");
    model.parse(&faces[0]).unwrap().0.image().save_png(&label).unwrap();
    let out = dir.path().join("gen/face.png");
    let code = run(&[
        "generate", "--checkpoint", path_str(&t.ckpt("cyclic")), "--label", path_str(&label), "--cond", path_str(&face),
        "--out", path_str(&out),
    ]);
    assert_eq!(code, 0);
    assert_eq!(Image::load_png(&out).unwrap().size(), common::RES);

    let eval_cfg = dir.path().join("eval.toml");
    std::fs::write(
        &eval_cfg,
        format!(
            "manifest = {:?}\nfeatures = {:?}\nleakage_pairs = 2\n",
            path_str(&t.manifest()),
            path_str(&t.ckpt("features"))
        ),
    )
    .unwrap();
    let report = dir.path().join("report/eval.json");
    let spec = format!("ours={}", path_str(&t.ckpt("cyclic")));
    let code = run(&["eval", "--config", path_str(&eval_cfg), "--checkpoints", &spec, "--out", path_str(&report)]);
    assert_eq!(code, 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["rows"][0]["name"], "ours");
    assert!(json["rows"][0]["identity_distance"].is_number());
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["gen-data", "--n", "12", "--seed", "3", "--identity-pool", "4", "--resolution", "32", "--out", path_str(out)]), 0);
    }
    let manifest = shapegene::synthgen::MANIFEST_FILE;
    assert_eq!(std::fs::read(a.join(manifest)).unwrap(), std::fs::read(b.join(manifest)).unwrap());
}

#[test]
fn desk_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk");
    let mut stages = Vec::new();
    for name in ["features", "parsers", "overall", "cyclic", "cyclic_no_id"] {
        let cfg = TrainConfig::load(&dir.join(format!("{name}.toml"))).unwrap();
        cfg.validate().unwrap();
        stages.push(cfg.stage);
    }
    assert_eq!(stages, [0, 1, 2, 3, 3]);
    let eval = EvalConfig::load(&dir.join("eval.toml")).unwrap();
    let names: Vec<&str> = eval.checkpoints.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["overall", "ours", "no_id"]);
}
