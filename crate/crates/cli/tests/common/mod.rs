#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use shapegene::netzoo::{NetConfig, NormKind};
use shapegene::synthgen::{Split, MANIFEST_FILE};
use shapegene::trainer::{Dataset, TrainConfig};
use shapegene::Image;

pub const RES: usize = 32;

/// A tiny dataset and a briefly trained pipeline, built through the CLI.
pub struct Tiny {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
}

impl Tiny {
    pub fn manifest(&self) -> PathBuf {
        self.root.join("data").join(MANIFEST_FILE)
    }

    pub fn ckpt(&self, stage: &str) -> PathBuf {
        self.root.join("run").join(format!("{stage}.ckpt"))
    }

    pub fn faces(&self, n: usize) -> Vec<Image> {
        Dataset::load(&self.manifest(), Split::Test, Some(n))
            .unwrap()
            .samples
            .into_iter()
            .map(|s| s.image)
            .collect()
    }
}

pub fn net() -> NetConfig {
    NetConfig {
        resolution: RES,
        gene_slot_dim: 4,
        width: 4,
        transformer_width: 4,
        disc_width: 4,
        encoder_res_blocks: 1,
        decoder_res_blocks: 1,
        transformer_res_blocks: 1,
        feature_widths: [2, 3, 4, 4, 4],
        identity_widths: [2, 3, 4, 4, 4],
        identity_embedding: 4,
        identity_classes: 10,
        norm: NormKind::Instance,
    }
}

pub fn run(args: &[&str]) -> i32 {
    shapegene_cli::dispatch(std::iter::once("shapegene").chain(args.iter().copied()))
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(root: &Path, stage: u8) -> PathBuf {
    let mut cfg = TrainConfig::new(stage, root.join("data").join(MANIFEST_FILE), root.join("run"));
    cfg.net = net();
    cfg.batch_size = 2;
    cfg.epochs = Some(1);
    cfg.train_limit = Some(8);
    cfg.val_limit = Some(4);
    cfg.features = Some(root.join("run/features.ckpt"));
    cfg.parsers = Some(root.join("run/parsers.ckpt"));
    cfg.overall = Some(root.join("run/overall.ckpt"));
    if stage == 3 {
        cfg.max_iterations = Some(2);
    }
    let path = root.join(format!("stage{stage}.toml"));
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

pub fn tiny() -> &'static Tiny {
    static T: OnceLock<Tiny> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let res = RES.to_string();
        let gen = ["gen-data", "--n", "80", "--seed", "5", "--identity-pool", "10", "--resolution", &res, "--out"];
        assert_eq!(run(&[&gen[..], &[path_str(&data)]].concat()), 0);
        for (stage, cmd) in ["train-features", "train-parsers", "train-overall", "train-cyclic"].iter().enumerate() {
            let cfg = write_config(&root, stage as u8);
            assert_eq!(run(&[cmd, "--config", path_str(&cfg)]), 0, "{cmd}");
        }
        Tiny { _dir: dir, root }
    })
}
