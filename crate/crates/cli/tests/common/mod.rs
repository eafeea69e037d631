#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;
use tunevec_core::activations::{random_checkpoint, Activation, ToyModelSpec};
use tunevec_core::tensorstore::save_checkpoint;
use tunevec_core::{Checkpoint, DType, TensorRecord};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tunevec")
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("TUNEVEC_THREADS")
        .output()
        .expect("spawn tunevec")
}

pub fn spec(layers: usize, d: usize, heads: usize, f: usize) -> ToyModelSpec {
    ToyModelSpec {
        vocab_size: 256,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ff: f,
        activation: Activation::Silu,
        rope_theta: 10000.0,
        rmsnorm_eps: 1e-5,
        tied_embeddings: false,
        eos_token_id: Some(10),
    }
}

/// Every value moved by `scale · N(0,1)`.
pub fn perturb(base: &Checkpoint, seed: u64, scale: f64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Checkpoint::new();
    for rec in base.tensors() {
        let vals: Vec<f64> = rec
            .values::<f64>()
            .into_iter()
            .map(|v| {
                let g: f64 = StandardNormal.sample(&mut rng);
                v + scale * g
            })
            .collect();
        out.insert(TensorRecord::from_values(rec.name(), rec.dtype(), rec.shape().to_vec(), &vals).unwrap())
            .unwrap();
    }
    out
}

pub const TASK: &str = r#"{"id":"q0","prompt":"Q: 2+2? A) 4 B) 5\n","choices":["4","5"],"gold":"A","reference":"four"}
{"id":"q1","prompt":"Q: sky? A) green B) blue\n","choices":["green","blue"],"gold":"B"}
{"id":"q2","prompt":"Q: ice? A) cold B) hot C) warm\n","choices":["cold","hot","warm"],"gold":"A"}
{"id":"q3","prompt":"Q: sun? A) dark B) bright\n","choices":["dark","bright"],"gold":"B","reference":"bright sun"}
{"id":"g0","prompt":"Say hi:","gold":"hi","reference":"hi there"}
"#;

/// A temp directory with a toy pretrained model, two fine-tunes, specs, a
/// corpus and a small task.
pub struct Fixture {
    pub dir: TempDir,
    pub spec: ToyModelSpec,
}

impl Fixture {
    pub fn new() -> Self {
        Self::with_spec(spec(2, 16, 2, 24))
    }

    pub fn with_spec(spec: ToyModelSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let pre = random_checkpoint(&spec, 1, DType::F32).unwrap();
        let ft = perturb(&pre, 2, 0.02);
        let ft2 = perturb(&pre, 3, 0.02);
        let spec_json = serde_json::to_string_pretty(&spec).unwrap();
        for (name, c) in [("pre", &pre), ("ft", &ft), ("ft2", &ft2)] {
            save_checkpoint(c, dir.path().join(format!("{name}.ckpt"))).unwrap();
            std::fs::write(dir.path().join(format!("{name}.spec.json")), &spec_json).unwrap();
        }
        let corpus: String = (0..40)
            .map(|i| format!("token stream line {i} with some text. "))
            .collect();
        std::fs::write(dir.path().join("corpus.txt"), corpus).unwrap();
        std::fs::write(dir.path().join("task.jsonl"), TASK).unwrap();
        Self { dir, spec }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        run_in(self.dir.path(), args)
    }

    /// Run and require success.
    pub fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "tunevec {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    pub fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap()
    }

    pub fn json(&self, name: &str) -> serde_json::Value {
        serde_json::from_slice(&self.read(name)).unwrap()
    }
}

/// The invocations that exercise every subcommand, writing into `prefix`-named
/// outputs. Inputs come from an earlier `diff`/`profile` of the same prefix.
pub fn all_subcommands(prefix: &str) -> Vec<Vec<String>> {
    let o = |s: &str| format!("{prefix}{s}");
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        v(&[
            "diff",
            "--pre",
            "pre.ckpt",
            "--ft",
            "ft.ckpt",
            "--out",
            &o("tv.ckpt"),
            "--report",
            &o("diff.json"),
        ]),
        v(&["diff", "--pre", "pre.ckpt", "--ft", "ft2.ckpt", "--out", &o("tv2.ckpt")]),
        v(&[
            "apply",
            "--base",
            "pre.ckpt",
            "--tv",
            &o("tv.ckpt"),
            "--scale",
            "-0.5",
            "--out",
            &o("applied.ckpt"),
            "--report",
            &o("apply.json"),
        ]),
        v(&[
            "merge",
            "--tv",
            &o("tv.ckpt"),
            "--tv",
            &o("tv2.ckpt"),
            "--weights",
            "1,0.5",
            "--out",
            &o("merged.ckpt"),
            "--report",
            &o("merge.json"),
        ]),
        v(&[
            "cosine",
            "--tv",
            &o("tv.ckpt"),
            "--tv",
            &o("tv2.ckpt"),
            "--tv",
            &o("merged.ckpt"),
            "--label",
            "a",
            "--label",
            "b",
            "--label",
            "m",
            "--granularity",
            "per-component",
            "--out",
            &o("cosine.json"),
        ]),
        v(&["wsim", "--a", "pre.ckpt", "--b", "ft.ckpt", "--out", &o("wsim.json")]),
        v(&[
            "ssa",
            "--pre",
            "pre.ckpt",
            "--tv",
            &o("tv.ckpt"),
            "--eps",
            "0.05",
            "--svd",
            "randomized",
            "--initial-rank",
            "4",
            "--out",
            &o("ssa.json"),
        ]),
        v(&[
            "profile",
            "--model",
            "pre.ckpt",
            "--corpus",
            "corpus.txt",
            "--window",
            "64",
            "--out",
            &o("prof_pre.json"),
        ]),
        v(&[
            "profile",
            "--model",
            "ft.ckpt",
            "--corpus",
            "corpus.txt",
            "--window",
            "64",
            "--out",
            &o("prof_ft.json"),
        ]),
        v(&[
            "editdist",
            "--a",
            &o("prof_pre.json"),
            "--b",
            &o("prof_ft.json"),
            "--out",
            &o("editdist.json"),
        ]),
        v(&[
            "ablate",
            "--model",
            "pre.ckpt",
            "--profile",
            &o("prof_pre.json"),
            "--top-pct",
            "5",
            "--task",
            "task.jsonl",
            "--max-tokens",
            "4",
            "--mc-mode",
            "choice-logit",
            "--set-out",
            &o("set.json"),
            "--out",
            &o("ablate.json"),
        ]),
        v(&[
            "eval",
            "--task",
            "task.jsonl",
            "--model",
            "pre.ckpt",
            "--ablate",
            &o("set.json"),
            "--max-tokens",
            "4",
            "--out",
            &o("eval.json"),
        ]),
        v(&["report", "--input", &o("prof_pre.json"), "--out", &o("profile.csv")]),
        v(&["report", "--input", &o("editdist.json"), "--out", &o("editdist.csv")]),
        v(&[
            "report",
            "--input",
            &o("cosine.json"),
            "--key",
            "Q",
            "--out",
            &o("cosine.csv"),
        ]),
        v(&["report", "--input", &o("ablate.json"), "--out", &o("ablate.csv")]),
    ]
}

/// Report files produced by [`all_subcommands`].
pub const REPORTS: [&str; 20] = [
    "tv.ckpt",
    "diff.json",
    "tv2.ckpt",
    "applied.ckpt",
    "apply.json",
    "merged.ckpt",
    "merge.json",
    "cosine.json",
    "wsim.json",
    "ssa.json",
    "prof_pre.json",
    "prof_ft.json",
    "editdist.json",
    "set.json",
    "ablate.json",
    "eval.json",
    "profile.csv",
    "editdist.csv",
    "cosine.csv",
    "ablate.csv",
];
