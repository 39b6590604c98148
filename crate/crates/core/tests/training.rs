use std::fs;

use drpan_core::trainer::{read_telemetry, Telemetry, LATEST_CHECKPOINT, TELEMETRY_FILE};
use drpan_core::{
    evaluate, load_paired_dir, make_toy_dataset, train, Checkpoint, Error, PairedDataset, ToyTaskSpec, TrainConfig,
    TrainState,
};

const TINY: &str = "epochs = 2\nbatch_size = 3\n\
    [geometry]\nimage_size = 32\nregion_size = 8\n\
    [generator]\nbase_width = 4\nresidual_blocks = 1\n\
    [discriminator]\nbase_width = 4\n[reviser]\nbase_width = 4\n";

fn toy(n: usize) -> (tempfile::TempDir, PairedDataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToyTaskSpec {
        image_size: 32,
        seed: 5,
        ..ToyTaskSpec::default()
    };
    make_toy_dataset(&spec, n, dir.path()).unwrap();
    let ds = load_paired_dir(dir.path(), 32).unwrap();
    (dir, ds)
}

#[test]
fn telemetry_has_one_finite_row_per_step() {
    let (_data, ds) = toy(7);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::from_toml_str(TINY, &[]).unwrap();
    let state = train(&cfg, &ds, out.path(), None).unwrap();
    // 7 samples in batches of 3: 3 steps per epoch, the last one short
    assert_eq!((state.step, state.epoch), (6, 2));
    let rows = read_telemetry(&out.path().join(TELEMETRY_FILE)).unwrap();
    let header = fs::read_to_string(out.path().join(TELEMETRY_FILE)).unwrap();
    assert_eq!(header.lines().next().unwrap(), Telemetry::HEADER.join(","));
    assert_eq!(rows.len(), 6);
    for (i, (step, epoch, r)) in rows.iter().enumerate() {
        assert_eq!(*step, i as u64 + 1);
        assert_eq!(*epoch, i as u64 / 3 + 1);
        assert!(r.first_non_finite().is_none());
        assert!(r.scoremap_mean > 0.0 && r.scoremap_mean < 1.0);
        assert!(r.l1_full >= 0.0 && r.l1_region >= 0.0 && r.penalty >= 0.0);
    }
    assert_eq!(state.scoremap_history.len(), 2);
    let first: f64 = rows[..3].iter().map(|r| r.2.scoremap_mean).sum::<f64>() / 3.0;
    assert!((state.scoremap_history[0] - first).abs() < 1e-12);
    for f in ["epoch_0001.ckpt", "epoch_0002.ckpt", LATEST_CHECKPOINT] {
        assert!(out.path().join("checkpoints").join(f).exists(), "{f}");
    }
    assert!(out.path().join("samples").join("epoch_0002_grid.png").exists());
    assert!(out.path().join("samples").join("epoch_0002_heatmap.png").exists());
}

#[test]
fn ablation_flags_show_up_in_telemetry() {
    let (_data, ds) = toy(3);
    let run = |overrides: &[&str]| {
        let out = tempfile::tempdir().unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).chain(["epochs=1".to_string()]).collect();
        let cfg = TrainConfig::from_toml_str(TINY, &o).unwrap();
        train(&cfg, &ds, out.path(), None).unwrap();
        read_telemetry(&out.path().join(TELEMETRY_FILE)).unwrap()[0].2
    };
    let patch_only = run(&["variant.use_reviser=false", "variant.use_region_l1=false"]);
    assert_eq!((patch_only.r_loss, patch_only.g_adv_reviser, patch_only.l1_region), (0.0, 0.0, 0.0));
    let with_region = run(&["variant.use_reviser=false"]);
    assert!(with_region.l1_region > 0.0);
    let full = run(&[]);
    assert!(full.r_loss > 0.0 && full.g_adv_reviser > 0.0 && full.penalty >= 0.0);
}

#[test]
fn empty_and_mismatched_datasets_are_rejected() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_paired_dir(empty.path(), 32), Err(Error::EmptyDataset(_))));
    let (_data, ds) = toy(2);
    let cfg = TrainConfig::from_toml_str(TINY, &["geometry.image_size=64".into(), "geometry.region_size=16".into()]).unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(train(&cfg, &ds, out.path(), None), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let (_data, ds) = toy(4);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::from_toml_str(TINY, &["epochs=1".into()]).unwrap();
    train(&cfg, &ds, out.path(), None).unwrap();
    let path = out.path().join("checkpoints").join(LATEST_CHECKPOINT);
    let bytes = fs::read(&path).unwrap();
    let state = TrainState::load(&path, None).unwrap();
    assert_eq!(state.to_checkpoint().encode(), bytes);
    assert_eq!(Checkpoint::decode(&bytes).unwrap().step, 2);
    let before = evaluate(&state, &ds).unwrap();
    let again = evaluate(&TrainState::load(&path, None).unwrap(), &ds).unwrap();
    assert_eq!(before.psnr.per_sample, again.psnr.per_sample);
    assert_eq!(before.ids.len(), ds.len());
}

#[test]
fn architecture_changes_are_refused_on_resume() {
    let (_data, ds) = toy(2);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::from_toml_str(TINY, &["epochs=1".into()]).unwrap();
    train(&cfg, &ds, out.path(), None).unwrap();
    let wider = TrainConfig::from_toml_str(TINY, &["generator.base_width=8".into()]).unwrap();
    let path = out.path().join("checkpoints").join(LATEST_CHECKPOINT);
    assert!(TrainState::load(&path, Some(wider)).is_err());
}
