//! End-to-end checks of the pipeline commands and the binary.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use dqformer::checkpoint::Checkpoint;
use dqformer::commands::{cmd_eval, cmd_infer, cmd_synth, cmd_train, EvalCommand, PLOTS_DIR, PREDICTIONS_DIR, REPORT_FILE};
use dqformer::config::RunConfig;
use dqformer::dataset::Manifest;
use dqformer::evaluation::evaluate_dataset;
use dqformer::formats::{read_cloud, read_prediction, write_cloud};
use dqformer::training::{EpochRecord, LAST_CHECKPOINT, LOG_FILE};
use dqformer::Error;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_dqformer");

fn toy_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

/// The toy grid with a deliberately small network.
fn small_config(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "epochs=2",
        "base_channels=8",
        "embed_dim=8",
        "head_hidden=8",
        "n_queries=8",
        "n_blocks=2",
        "heads=2",
        "ffn_hidden=16",
        "eval_every=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(Some(&toy_path()), &o).unwrap()
}

/// Two synthetic scenes and a checkpoint trained on them for two epochs,
/// shared by the tests below.
struct Fixture {
    dir: TempDir,
    cfg: RunConfig,
}

impl Fixture {
    fn manifest(&self) -> PathBuf {
        self.dir.path().join("data/manifest.json")
    }

    fn run(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn checkpoint(&self) -> PathBuf {
        self.run().join(LAST_CHECKPOINT)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = small_config(&[]);
        cmd_synth(&cfg, 2, &dir.path().join("data")).unwrap();
        cmd_train(&cfg, &dir.path().join("data/manifest.json"), &dir.path().join("run"), None).unwrap();
        Fixture { dir, cfg }
    })
}

fn log_records(run: &Path) -> Vec<EpochRecord> {
    std::fs::read_to_string(run.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_is_byte_deterministic() {
    let cfg = small_config(&[]);
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ma = cmd_synth(&cfg, 3, a.path()).unwrap();
    cmd_synth(&cfg, 3, b.path()).unwrap();
    for i in 0..ma.len() {
        let name = ma.entries[i].path.clone();
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn training_logs_every_epoch_and_resumes() {
    let f = fixture();
    let records = log_records(&f.run());
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert!(records.iter().all(|r| r.l.is_finite() && r.train_pq.is_some()));

    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir(&run).unwrap();
    for name in [LAST_CHECKPOINT, LOG_FILE] {
        std::fs::copy(f.run().join(name), run.join(name)).unwrap();
    }
    let cfg = f.cfg.with_overrides(&["epochs=3".to_string()]).unwrap();
    let out = cmd_train(&cfg, &f.manifest(), &run, Some(&run.join(LAST_CHECKPOINT))).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.progress.epoch, 3);
    assert_eq!(log_records(&run).iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn resume_rejects_a_different_architecture() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = f.cfg.with_overrides(&["embed_dim=16".to_string()]).unwrap();
    let err = cmd_train(&cfg, &f.manifest(), dir.path(), Some(&f.checkpoint())).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let f = fixture();
    let mut bytes = std::fs::read(f.checkpoint()).unwrap();
    let dir = TempDir::new().unwrap();
    let truncated = dir.path().join("t.dqck");
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&truncated, &bytes).unwrap();
    let err = Checkpoint::load(&truncated).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);

    bytes[0] ^= 0xff;
    std::fs::write(&truncated, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&truncated), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn checkpoint_restores_the_model_exactly_up_to_f32() {
    let f = fixture();
    let ck = Checkpoint::load(&f.checkpoint()).unwrap();
    assert_eq!(ck.config, f.cfg);
    let model = ck.model().unwrap();
    let again = Checkpoint::decode(&ck.encode(), Path::new("mem")).unwrap().model().unwrap();
    assert_eq!(model.params.values(), again.params.values());
}

#[test]
fn eval_writes_predictions_report_and_plots() {
    let f = fixture();
    let out = f.dir.path().join("eval_plots");
    let opts = EvalCommand {
        plots: true,
        ..Default::default()
    };
    let report = cmd_eval(&f.checkpoint(), &f.manifest(), &out, &opts).unwrap();
    assert_eq!(report.scenes.len(), 2);
    assert!(out.join(REPORT_FILE).is_file());
    let manifest = Manifest::load(&f.manifest()).unwrap();
    let n_levels = f.cfg.level_scales.len();
    for i in 0..manifest.len() {
        let name = manifest.scene_name(i);
        let pred = read_prediction(&out.join(PREDICTIONS_DIR).join(format!("{name}.dqpr"))).unwrap();
        pred.labeling().validate(pred.cloud.n_thing_classes).unwrap();
        for l in 0..n_levels {
            assert!(out.join(PLOTS_DIR).join(format!("{name}_level{l}.png")).is_file());
        }
    }
    let pngs = std::fs::read_dir(out.join(PLOTS_DIR)).unwrap().count();
    assert_eq!(pngs, 2 * n_levels);

    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join(REPORT_FILE)).unwrap()).unwrap();
    for key in ["pq", "sq", "rq", "pq_dagger", "pq_th", "pq_st"] {
        assert!(json["overall"][key].is_number(), "{key}");
    }
}

#[test]
fn eval_reports_a_missing_prediction_by_scene() {
    let f = fixture();
    let manifest = Manifest::load(&f.manifest()).unwrap();
    let empty = TempDir::new().unwrap();
    let err = evaluate_dataset(empty.path(), &manifest, None).unwrap_err();
    assert!(err.to_string().contains(&manifest.scene_name(0)), "{err}");
}

#[test]
fn infer_is_deterministic_and_valid() {
    let f = fixture();
    let manifest = Manifest::load(&f.manifest()).unwrap();
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.dqpr"), dir.path().join("b.dqpr"));
    cmd_infer(&f.checkpoint(), &manifest.scene_path(0), &a, &[]).unwrap();
    cmd_infer(&f.checkpoint(), &manifest.scene_path(0), &b, &[]).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let pred = read_prediction(&a).unwrap();
    assert_eq!(pred.cloud.positions, read_cloud(&manifest.scene_path(0)).unwrap().positions);
    pred.labeling().validate(pred.cloud.n_thing_classes).unwrap();
}

#[test]
fn infer_rejects_a_foreign_taxonomy() {
    let f = fixture();
    let manifest = Manifest::load(&f.manifest()).unwrap();
    let mut cloud = read_cloud(&manifest.scene_path(0)).unwrap();
    cloud.n_stuff_classes += 1;
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("foreign.dqpc");
    write_cloud(&cloud, &input).unwrap();
    let err = cmd_infer(&f.checkpoint(), &input, &dir.path().join("p.dqpr"), &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn binary_exit_codes() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = |args: &[&str]| Command::new(BIN).args(args).env("RUST_LOG", "error").output().unwrap();

    let missing = dir.path().join("missing.dqpc");
    let out = run(&[
        "infer",
        "--checkpoint",
        f.checkpoint().to_str().unwrap(),
        "--input",
        missing.to_str().unwrap(),
        "--output",
        dir.path().join("p.dqpr").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.dqpc"));

    let out = run(&["synth", "--config", toy_path().to_str().unwrap(), "--set", "nonsense=1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["synth", "--config", toy_path().to_str().unwrap(), "--count", "1", "--out", dir.path().join("a/b").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let data = dir.path().join("data");
    let out = run(&["synth", "--config", toy_path().to_str().unwrap(), "--count", "1", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(Manifest::load(&data.join("manifest.json")).unwrap().len(), 1);
}

#[test]
fn config_round_trips_through_its_dump() {
    let cfg = small_config(&["theta_th=0.8", "aug_rotation=true"]);
    assert_eq!(RunConfig::from_toml(&cfg.dump()).unwrap(), cfg);
    assert_eq!(cfg.theta_th, 0.8);
}
