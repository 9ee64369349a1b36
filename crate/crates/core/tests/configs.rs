use std::path::PathBuf;

use frametrans_core::config::RunConfig;
use frametrans_core::dataset::DatasetSplit;
use frametrans_core::models::{build, Family};
use frametrans_core::train::init_rng;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_load_and_build() {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|x| x != "toml") {
            continue;
        }
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        let spec = cfg.model_spec().unwrap();
        assert!(cfg.train_config().unwrap().learning_rate > 0.0);
        // The wide model is too large to allocate in a unit test.
        if spec.hidden3 <= 256 {
            build(&spec, &mut init_rng(0)).unwrap();
        }
        names.push(path.file_stem().unwrap().to_string_lossy().into_owned());
    }
    names.sort();
    for row in [
        "stft_no_compress",
        "stft",
        "log_frequencies",
        "cosine_windows",
        "log_windows",
        "three_layer_filterbank",
        "learned_filterbank",
        "three_layer_end_to_end",
        "channel_convolution",
        "ti_baseline",
        "ti_pitch_shift",
        "ti_wide",
    ] {
        assert!(names.iter().any(|n| n == row), "missing config {row}");
    }
}

#[test]
fn row_configs_differ_only_where_intended() {
    let load = |n: &str| RunConfig::load(configs_dir().join(format!("{n}.toml"))).unwrap();
    let (base, shift) = (load("ti_baseline"), load("ti_pitch_shift"));
    assert_ne!(base.augment, shift.augment);
    assert_eq!(base.model, shift.model);
    assert_eq!(base.train, shift.train);
    let wide = load("ti_wide");
    assert_eq!(wide.model_spec().unwrap().hidden3, 4096);
    assert_eq!(load("channel_convolution").family().unwrap(), Family::ChannelConv);
    assert!(!load("stft_no_compress").filterbank_spec().unwrap().compress);
}

#[test]
fn musicnet_splits_parse() {
    let split = DatasetSplit::load(configs_dir().join("splits/musicnet_test.txt")).unwrap();
    assert_eq!(split.test_ids, ["2303", "1819", "2382"]);
    assert!(split.train_ids.is_empty());
    let wide = DatasetSplit::load(configs_dir().join("splits/musicnet_extended.txt")).unwrap();
    assert_eq!(wide.test_ids.len(), 10);
    assert_eq!(wide.test_ids[..3], split.test_ids[..]);
}
