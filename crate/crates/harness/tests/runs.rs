mod common;

use common::tiny_config;
use scaledp_core::envs::generate_dataset;
use scaledp_core::model::{count_params, Conditioning};
use scaledp_core::training::population_std;
use scaledp_harness::report::{emit_report, max_recompute_error, TrainingLog};
use scaledp_harness::run::{run_scan, run_training, scan_cells, summarize_log, ScanData, Start, LOG_FILE};

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let d = generate_dataset(cfg.env.id, 4, 2).unwrap();
    for name in ["a", "b"] {
        run_training(&cfg, &d, Start::Fresh, &dir.path().join(name)).unwrap();
    }
    for f in [LOG_FILE, "final.sdpc", "ema.sdpc", "best.sdpc"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn logged_std_recomputes_from_block_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.model.layers = 3;
    let d = generate_dataset(cfg.env.id, 4, 2).unwrap();
    let s = run_training(&cfg, &d, Start::Fresh, dir.path()).unwrap();
    let log = TrainingLog::read(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.blocks, 3);
    assert!(max_recompute_error(&log) < 1e-9);
    for r in &log.rows {
        assert!((population_std(&r.block_magnitudes) - r.cross_block_std).abs() < 1e-12);
    }
    let (loss, std, last) = summarize_log(&log);
    assert!((loss - s.mean_loss).abs() < 1e-12 && (std - s.mean_cross_block_std).abs() < 1e-12);
    assert_eq!(last, s.final_success);
    // The report re-emits the log byte for byte.
    let out = emit_report(&log, &dir.path().join("report")).unwrap();
    assert_eq!(std::fs::read(out.csv).unwrap(), std::fs::read(dir.path().join(LOG_FILE)).unwrap());
}

#[test]
fn resumed_run_continues_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.training.steps = 60;
    cfg.eval.episodes = 0;
    let d = generate_dataset(cfg.env.id, 4, 5).unwrap();
    run_training(&cfg, &d, Start::Fresh, &dir.path().join("full")).unwrap();
    let mut half = cfg.clone();
    half.training.steps = 30;
    run_training(&half, &d, Start::Fresh, &dir.path().join("half")).unwrap();
    let (start, saved) = Start::from_checkpoint(&dir.path().join("half/final.sdpc")).unwrap();
    assert_eq!(saved.training.resume_step, 30);
    let s = run_training(&cfg, &d, start, &dir.path().join("rest")).unwrap();
    assert_eq!(s.steps_done, 60);
    let full = TrainingLog::read(&dir.path().join("full").join(LOG_FILE)).unwrap();
    let rest = TrainingLog::read(&dir.path().join("rest").join(LOG_FILE)).unwrap();
    assert_eq!(rest.rows.len(), 30);
    assert_eq!(rest.rows[0].step, 30);
    let (a, b) = (full.rows[30].loss, rest.rows[0].loss);
    assert!((a - b).abs() <= 0.1 * a, "uninterrupted {a}, resumed {b}");
}

#[test]
fn one_cell_scan_matches_train_and_log_stats() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.training.steps = 20;
    cfg.eval.episodes = 2;
    let d = generate_dataset(cfg.env.id, 4, 9).unwrap();
    let cells = scan_cells(&[Conditioning::CrossAttention], &[3], &[4]);
    let rows = run_scan(&cfg, ScanData::Shared(&d), &cells, 1, &dir.path().join("scan")).unwrap();
    assert_eq!(rows.len(), 1);
    let cell_cfg = cells[0].config(&cfg);
    assert!(cell_cfg.model.causal_mask);
    run_training(&cell_cfg, &d, Start::Fresh, &dir.path().join("train")).unwrap();
    let log = TrainingLog::read(&dir.path().join("train").join(LOG_FILE)).unwrap();
    let (loss, std, last) = summarize_log(&log);
    let r = &rows[0];
    assert_eq!(r.params, count_params(&cell_cfg.model));
    assert_eq!((r.mean_loss, r.mean_cross_block_std, r.final_success), (Some(loss), Some(std), last));
    let cell_log = std::fs::read(dir.path().join("scan/cell_cross_attention_3_4").join(LOG_FILE)).unwrap();
    assert_eq!(cell_log, std::fs::read(dir.path().join("train").join(LOG_FILE)).unwrap());
}

#[test]
fn diverging_cell_is_recorded_and_scan_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.training.steps = 30;
    cfg.training.lr = 1e300;
    cfg.training.warmup = 0;
    cfg.training.clip = None;
    cfg.eval.episodes = 0;
    let d = generate_dataset(cfg.env.id, 2, 1).unwrap();
    let cells = scan_cells(&[Conditioning::AdaLn], &[1, 2], &[0]);
    let rows = run_scan(&cfg, ScanData::Shared(&d), &cells, 2, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.status.starts_with("diverged at step"), "{}", r.status);
        assert!(r.mean_loss.is_none());
    }
    // The single-run path surfaces divergence as exit code 3.
    let e = run_training(&cells[0].config(&cfg), &d, Start::Fresh, &dir.path().join("x")).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}
