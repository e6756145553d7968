use seqregen::pipeline::*;

fn tiny(out: &std::path::Path) -> PipelineConfig {
    PipelineConfig { out: out.to_path_buf(), ..Default::default() }
        .with_overrides(&[
            "data.synthetic.num_users=40",
            "data.synthetic.num_items=12",
            "data.synthetic.planted_patterns=[[1,2,3],[4,5,6]]",
            "data.synthetic.patterns_per_user=[2,3]",
            "miner.window=3",
            "miner.threshold=5",
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
            "target.max_epochs=3",
            "bilevel.t_lower=2",
            "compare.seeds=[1,2]",
        ])
        .unwrap()
}

#[test]
fn stages_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mined = cmd_mine(&cfg).unwrap();
    assert!(mined.num_patterns > 0 && mined.num_pairs >= mined.num_patterns);
    cmd_pretrain(&cfg).unwrap();
    let stats = cmd_regenerate(&cfg).unwrap();
    assert!(stats.patterns > 0 && stats.mean_length >= 2.0);
    let plus = cmd_train(&cfg, Variant::Dr4srPlus).unwrap();
    assert!(plus.mean_weight.unwrap() > 0.0 && plus.outer_steps.unwrap() > 0);
    let report = cmd_evaluate(&cfg, Variant::Dr4srPlus, None).unwrap();
    assert_eq!(report, plus.report);
    for f in [
        "mine/patterns.txt",
        "mine/summary.txt",
        "pretrain/regenerator.json",
        "pretrain/loss_curve.txt",
        "regenerate/dataset.txt",
        "regenerate/provenance.txt",
        "regenerate/stats.txt",
        "train/dr4sr_plus/model.json",
        "train/dr4sr_plus/personalizer.json",
        "train/dr4sr_plus/outer_log.jsonl",
        "train/dr4sr_plus/weights.txt",
        "train/dr4sr_plus/report.txt",
        "evaluate/dr4sr_plus/report.txt",
        "evaluate/dr4sr_plus/ranks.txt",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    // Every stage leaves an echo that loads back to the same config.
    for stage in ["mine", "pretrain", "regenerate", "train/dr4sr_plus", "evaluate/dr4sr_plus"] {
        let echo = PipelineConfig::load(dir.path().join(stage).join("config.toml")).unwrap();
        assert_eq!(echo, cfg);
    }
    let provenance = std::fs::read_to_string(dir.path().join("regenerate/provenance.txt")).unwrap();
    assert_eq!(provenance.lines().count(), stats.patterns);
}

#[test]
fn compare_tabulates_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cmp = cmd_compare(&tiny(dir.path())).unwrap();
    for v in Variant::ALL {
        assert_eq!(cmp.values(v, "test/ndcg@10").len(), 2);
    }
    let table = std::fs::read_to_string(dir.path().join("compare/table.txt")).unwrap();
    assert!(table.contains("dr4sr_plus") && table.contains("test/recall@20"));
    assert!(dir.path().join("compare/seed-2/train/baseline/model.json").is_file());
}
