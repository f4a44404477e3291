use std::path::Path;

use proptest::prelude::*;
use updp::data::SyntheticSpec;
use updp::merge::ExactMode;
use updp::pipeline::{
    run_all, run_stage, stage_seed, DatasetSpec, PipelineConfig, Stage, SubnetSummary, VerifySummary, MERGED_CKPT, SUBNET_CKPT,
    SUPERNET_CKPT,
};
use updp::progressive::ProgressiveConfig;
use updp::search::SearchConfig;
use updp::supernet::SupernetConfig;
use updp::train::OptimConfig;
use updp::zoo::ArchConfig;
use updp::Error;

fn tiny_config(out: &Path) -> PipelineConfig {
    let optim = OptimConfig {
        batch_size: 16,
        ..OptimConfig::default()
    };
    PipelineConfig {
        arch: ArchConfig::new("micro_cnn", 16, 4, updp::zoo::Scale::Tiny).with_blocks(3),
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            classes: 4,
            samples_per_class: 12,
            image_size: 16,
            seed: 3,
        }),
        val_samples: 16,
        supernet: SupernetConfig {
            epochs: 1,
            optim: optim.clone(),
            seed: 0,
        },
        search: SearchConfig {
            population: 4,
            generations: 2,
            elite: 1,
            tournament: 2,
            ..SearchConfig::default()
        },
        subnet: ProgressiveConfig {
            optim,
            ..ProgressiveConfig::new(2.0, 3)
        },
        k: 1,
        seed: 11,
        out_dir: out.to_path_buf(),
        mask: None,
        exact_mode: ExactMode::Interior,
        verify_samples: 4,
        compare_direct: true,
    }
}

fn quiet() -> impl FnMut(&serde_json::Value) {
    |_| {}
}

#[test]
fn config_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let back = PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let mut skip = cfg.clone();
    skip.mask = Some("010".parse().unwrap());
    skip.exact_mode = ExactMode::ExactPad;
    assert_eq!(PipelineConfig::from_json(&skip.to_json().unwrap()).unwrap(), skip);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 2);
}

proptest! {
    #[test]
    fn seeds_and_budgets_round_trip(seed in any::<u64>(), k in 1usize..4, t in 1usize..500, big_k in 1.0f64..8.0) {
        let mut cfg = tiny_config(Path::new("out"));
        cfg.seed = seed;
        cfg.k = k;
        cfg.subnet.schedule.t = t;
        cfg.subnet.schedule.k = big_k;
        cfg.subnet.shrink_milestone = None;
        prop_assert_eq!(PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable(root in any::<u64>()) {
        let labels = ["init", "train-supernet", "search", "train-subnet"];
        let seeds: Vec<u64> = labels.iter().map(|l| stage_seed(root, l)).collect();
        for i in 0..seeds.len() {
            prop_assert_eq!(seeds[i], stage_seed(root, labels[i]));
            for j in 0..i {
                prop_assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}

#[test]
fn stage_names_parse() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert!("train".parse::<Stage>().is_err());
}

#[test]
fn missing_inputs_name_the_required_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cases = [
        (Stage::Search, "train-supernet"),
        (Stage::TrainSubnet, "search"),
        (Stage::Merge, "train-subnet"),
        (Stage::Verify, "train-subnet"),
        (Stage::Report, "verify"),
    ];
    for (stage, producer) in cases {
        let err = run_stage(&cfg, stage, &mut quiet()).unwrap_err();
        let Error::Stage { stage: s, msg } = &err else {
            panic!("{err}")
        };
        assert_eq!(s, stage.name());
        assert!(msg.contains(&format!("`{producer}`")), "{stage}: {msg}");
    }
}

#[test]
fn full_run_is_reproducible_stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut records = Vec::new();
    let outcomes = run_all(&cfg, &mut |r| records.push(r.clone())).unwrap();
    assert_eq!(outcomes.len(), 6);
    assert!(records.iter().all(|r| r["stage"].is_string()));
    for f in ["train-supernet.jsonl", "search.jsonl", "train-subnet.jsonl", "report.json", "report.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train-subnet.jsonl")).unwrap();
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let verify: VerifySummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert!(verify.equivalence.interior_max < 1e-3, "{verify:?}");
    assert!(verify.equivalence.macs_after < verify.equivalence.macs_before);
    let subnet: SubnetSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("subnet.json")).unwrap()).unwrap();
    assert_eq!(subnet.mask.popcount(), 1);
    assert!(subnet.direct_acc.is_some());
    let text = outcomes.last().unwrap().table.clone().unwrap();
    assert!(text.contains("merged accuracy") && text.contains("speedup"));

    for (stage, file) in [(Stage::TrainSupernet, SUPERNET_CKPT), (Stage::TrainSubnet, SUBNET_CKPT), (Stage::Merge, MERGED_CKPT)] {
        let before = std::fs::read(dir.path().join(file)).unwrap();
        run_stage(&cfg, stage, &mut quiet()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(file)).unwrap(), before, "{stage}");
    }
}

#[test]
fn explicit_mask_skips_the_supernet_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.mask = Some("011".parse().unwrap());
    cfg.compare_direct = false;
    run_all(&cfg, &mut quiet()).unwrap();
    assert!(!dir.path().join(SUPERNET_CKPT).exists());
    assert!(!dir.path().join("search.json").exists());
    let subnet: SubnetSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("subnet.json")).unwrap()).unwrap();
    assert!(subnet.explicit_mask);
    assert_eq!(subnet.mask.to_string(), "011");
    assert!(dir.path().join(MERGED_CKPT).exists());
}

#[test]
fn flops_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.arch = ArchConfig::full("resnet34");
    let out = run_stage(&cfg, Stage::Flops, &mut quiet()).unwrap();
    let table = out.table.unwrap();
    assert!(table.contains("3.66G"), "{table}");
    assert!(table.lines().any(|l| l.starts_with("blocks.15")));
}
