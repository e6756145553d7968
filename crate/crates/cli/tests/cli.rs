use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.synthetic.num_users=30",
    "data.synthetic.num_items=10",
    "data.synthetic.planted_patterns=[[1,2,3],[4,5,6]]",
    "data.synthetic.patterns_per_user=[2,3]",
    "miner.window=3",
    "miner.threshold=4",
    "regenerator.embed_dim=8",
    "regenerator.encoder_layers=1",
    "regenerator.decoder_layers=1",
    "regenerator.diversity_k=2",
    "regenerator.max_pattern_len=3",
    "regenerator.max_epochs=2",
    "target.embed_dim=8",
    "target.layers=1",
    "target.max_len=6",
    "target.batch_size=16",
    "target.max_epochs=2",
    "bilevel.t_lower=2",
];

fn seqregen(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqregen"));
    cmd.arg("--out").arg(out).args(["--seed", "5"]);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_upstream_is_an_actionable_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = seqregen(dir.path(), &["regenerate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `pretrain` first"));
}

#[test]
fn bad_override_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = seqregen(dir.path(), &["--set", "target.nope=1", "config"]);
    assert!(!o.status.success());
}

#[test]
fn stages_run_and_repeat_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        for stage in [&["mine"][..], &["pretrain"], &["regenerate"], &["train", "--variant", "dr4sr"], &["evaluate", "--variant", "dr4sr"]] {
            let o = seqregen(dir, stage);
            assert!(o.status.success(), "{stage:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    for f in ["mine/patterns.txt", "regenerate/dataset.txt", "regenerate/provenance.txt", "train/dr4sr/report.txt", "evaluate/dr4sr/ranks.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let echo = a.path().join("mine/config.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_seqregen")).arg("--config").arg(&echo).arg("config").output().unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("seed = 5"));
    let ckpt = a.path().join("train/dr4sr/model.json");
    let o = seqregen(a.path(), &["evaluate", "--variant", "baseline", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("test/ndcg@10"));
}
