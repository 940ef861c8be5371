use grabs::*;
use grabs_core::geom::IndexMask;
use grabs_core::labelstore::{FitSummary, LabelStore, MaskRecord};
use grabs_core::policy::PolicyParams;
use grabs_core::prior::Prior;
use grabs_core::sceneforge::{generate_scene, read_scene};
use grabs_core::seeding::derive_seed;
use std::fs;
use std::path::Path;
use std::process::Command;

fn grabs(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_grabs")).args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    grabs(args).status.code().expect("exit code")
}

fn light() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.ppo.trajectories_per_update = 6;
    cfg.ppo.minibatch_size = 16;
    cfg.ppo.update_epochs = 2;
    cfg.schedule.trajectories = 6;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn record(scene: &str, mask: IndexMask, confidence: f64) -> MaskRecord {
    MaskRecord {
        scene_id: scene.into(),
        mask,
        confidence,
        fit: FitSummary {
            template_id: "box".into(),
            yaw: 0.0,
            scale: 1.0,
            residual: 0.0,
            chamfer: 0.0,
        },
        discovered_at: 0,
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["gen", "--count", "0", "--out", "/nonexistent/never"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["train", "--updates", "many"]), 2);
    assert_eq!(code(&["ablate", "--param", "env.step_size", "--scenes", "."]), 2);
    assert_eq!(code(&["discover", "--scenes", "."]), 2);
    assert_eq!(code(&["--workers", "0", "gen", "--count", "1"]), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let m = missing.to_str().unwrap();
    assert_eq!(code(&["train", "--scenes", m, "--out", m]), 1);
    assert_eq!(code(&["--config", m, "gen", "--count", "1"]), 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[env]\nstep_size = -1.0\n").unwrap();
    let out = grabs(&["--config", bad.to_str().unwrap(), "gen", "--count", "1", "--out", m]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(!missing.exists());
}

#[test]
fn gen_is_byte_identical_and_round_trips() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(code(&["gen", "--count", "3", "--seed", "7", "--out", d.path().to_str().unwrap()]), 0);
    }
    let prior = Prior::builtin();
    for k in 0..3 {
        let name = scene_file_name(k);
        let (fa, fb) = (a.path().join(&name), b.path().join(&name));
        assert_eq!(fs::read(&fa).unwrap(), fs::read(&fb).unwrap());
        let direct = generate_scene(&RunConfig::default().scene, &prior, derive_seed(7, k as u64)).unwrap();
        assert_eq!(read_scene(&fa).unwrap(), direct);
    }
}

#[test]
fn config_round_trip_preserves_semantics() {
    let mut cfg = RunConfig::default();
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::parse("").unwrap(), cfg);
    cfg.env.step_size = 0.4;
    cfg.env.chamfer_threshold = 0.16;
    cfg.ppo.learning_rate = 3e-4;
    cfg.scene.n_objects_range = (5, 6);
    cfg.scene.binary_points = true;
    cfg.eval.sweep = vec![0.5, 0.75];
    cfg.seeds.train = 99;
    cfg.schedule.arch.hidden = 32;
    cfg.paths.scenes = Some("data/scenes".into());
    let text = cfg.to_toml();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_toml(), text);
}

#[test]
fn config_load_checks_files_and_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "[prior]\ntemplate_file = \"lib.tpl\"\n").unwrap();
    assert!(RunConfig::load(&path).is_err());
    let text = grabs_core::prior::write_templates(&grabs_core::prior::builtin_templates());
    fs::write(dir.path().join("lib.tpl"), text).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.prior().unwrap().templates().len(), Prior::builtin().templates().len());
    assert!(RunConfig::parse("[ppo]\nclip_ratio = 1.5\n").is_err());
    assert!(RunConfig::parse("[schedule]\ndedup_iou = 0.0\n").is_err());
    assert!(RunConfig::parse("[env]\nno_such_key = 1\n").is_ok());
}

#[test]
fn overrides_target_one_key() {
    let cfg = RunConfig::default();
    let c = cfg.with_override("env.step_size", "0.5").unwrap();
    assert_eq!(c.env.step_size, 0.5);
    assert_eq!(RunConfig { env: cfg.env.clone(), ..c.clone() }, cfg);
    assert_eq!(cfg.with_override("env.max_steps", "4").unwrap().env.max_steps, 4);
    assert!(cfg.with_override("env.nope", "1").unwrap_err().is_usage());
    assert!(cfg.with_override("env.step_size", "abc").unwrap_err().is_usage());
    assert!(!cfg.with_override("env.step_size", "-1").unwrap_err().is_usage());
}

#[test]
fn zero_updates_keep_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let cfg = light();
    cmd_gen(&cfg, &scenes, 1, 5).unwrap();
    let run = cmd_train(&cfg, &scenes, &dir.path().join("t"), 0, 1, None).unwrap();
    assert_eq!(run.checkpoint, init_checkpoint(&cfg));
    assert!(run.log.is_empty());
    let saved = load_checkpoint(&dir.path().join("t").join(POLICY_FILE)).unwrap();
    assert_eq!(saved, run.checkpoint);
}

#[test]
fn training_reproduces_and_resume_continues_the_counter() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let mut cfg = light();
    cfg.ppo.checkpoint_every = 2;
    cmd_gen(&cfg, &scenes, 2, 5).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_train(&cfg, &scenes, &a, 3, 11, None).unwrap();
    cmd_train(&cfg, &scenes, &b, 3, 11, None).unwrap();
    let log_a = fs::read(a.join(LOG_FILE)).unwrap();
    assert_eq!(log_a, fs::read(b.join(LOG_FILE)).unwrap());
    assert_eq!(fs::read(a.join(POLICY_FILE)).unwrap(), fs::read(b.join(POLICY_FILE)).unwrap());
    assert!(a.join("policy_000002.ckpt").is_file());

    let run = cmd_train(&cfg, &scenes, &a, 2, 11, Some(&a.join(POLICY_FILE))).unwrap();
    assert_eq!(run.checkpoint.step, 5);
    assert!(a.join("policy_000004.ckpt").is_file());
    let updates: Vec<u64> = fs::read_to_string(a.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json_update(l))
        .collect();
    assert_eq!(updates, vec![1, 2, 3, 4, 5]);
}

fn serde_json_update(line: &str) -> u64 {
    let key = "\"update\":";
    let rest = &line[line.find(key).expect("update field") + key.len()..];
    rest[..rest.find(',').unwrap()].parse().unwrap()
}

#[test]
fn discovery_is_reproducible_and_grows_with_budget() {
    let dir = tempfile::tempdir().unwrap();
    let scenes_dir = dir.path().join("scenes");
    let cfg = light();
    cmd_gen(&cfg, &scenes_dir, 2, 8).unwrap();
    let ckpt = dir.path().join("init.ckpt");
    save_checkpoint(&init_checkpoint(&cfg), &ckpt).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_discover(&cfg, &scenes_dir, PolicySource::Checkpoint(&ckpt), &a, 12, 4).unwrap();
    cmd_discover(&cfg, &scenes_dir, PolicySource::Checkpoint(&ckpt), &b, 12, 4).unwrap();
    assert_eq!(fs::read(a.join(MASK_FILE)).unwrap(), fs::read(b.join(MASK_FILE)).unwrap());

    let random = cmd_discover(&cfg, &scenes_dir, PolicySource::Random, &b, 12, 4).unwrap();
    let again = LabelStore::read(&b.join(MASK_FILE), 0.5).unwrap();
    assert_eq!(random.len(), again.len());

    let scenes = load_scenes(&scenes_dir).unwrap();
    let prior = cfg.prior().unwrap();
    let stores = discover_budgets(&cfg, &prior, &scenes, &grabs_core::env::UniformActor, &[3, 12, 30], 4);
    let counts: Vec<usize> = stores.iter().map(LabelStore::len).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert_eq!(stores[1].len(), random.len());
    assert_eq!(cmd_discover(&cfg, &scenes_dir, PolicySource::Random, &b, 0, 4).unwrap_err().is_usage(), true);
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let cfg = light();
    cmd_gen(&cfg, &scenes, 1, 2).unwrap();
    let config = write_config(dir.path(), &cfg);
    let s = scenes.to_str().unwrap();
    let mut files = Vec::new();
    for w in ["1", "3"] {
        let out = dir.path().join(format!("w{w}"));
        let o = out.to_str().unwrap();
        let args = ["--config", &config, "--workers", w, "--seed", "6", "--out", o];
        assert_eq!(code(&[&args[..], &["discover", "--random", "--scenes", s, "--trajectories", "20"]].concat()), 0);
        assert_eq!(code(&[&args[..], &["train", "--scenes", s, "--updates", "2"]].concat()), 0);
        files.push((fs::read(out.join(MASK_FILE)).unwrap(), fs::read(out.join(LOG_FILE)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn eval_of_ground_truth_and_of_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let scenes_dir = dir.path().join("scenes");
    let cfg = light();
    cmd_gen(&cfg, &scenes_dir, 2, 3).unwrap();
    let scenes = load_scenes(&scenes_dir).unwrap();

    let mut store = LabelStore::default();
    for (id, s) in &scenes {
        for g in &s.gt_masks {
            store.add(record(id, g.clone(), 1.0));
        }
    }
    let masks = dir.path().join("gt.msk");
    store.write(&masks).unwrap();
    let r = cmd_eval(&cfg, &masks, &scenes_dir, &dir.path().join("r1")).unwrap();
    for v in [r.ap, r.ap50, r.ap25, r.rc, r.rc50, r.rc25, r.pr, r.pr50, r.pr25] {
        assert_eq!(v, 1.0);
    }
    assert!(dir.path().join("r1").join("report.txt").is_file());
    assert!(dir.path().join("r1").join("report.json").is_file());

    let empty = dir.path().join("empty.msk");
    LabelStore::default().write(&empty).unwrap();
    let r = cmd_eval(&cfg, &empty, &scenes_dir, &dir.path().join("r2")).unwrap();
    for v in [r.ap, r.ap50, r.ap25, r.rc, r.rc50, r.rc25, r.pr, r.pr50, r.pr25] {
        assert_eq!(v, 0.0);
    }

    let stray = dir.path().join("stray.msk");
    let mut s = LabelStore::default();
    s.add(record("elsewhere", scenes[0].1.gt_masks[0].clone(), 0.5));
    s.write(&stray).unwrap();
    assert!(cmd_eval(&cfg, &stray, &scenes_dir, dir.path()).is_err());
}

/// Two one-object scenes; ranked predictions hit, miss, hit.
pub fn hand_fixture(dir: &Path) -> (RunConfig, std::path::PathBuf, std::path::PathBuf) {
    let mut cfg = light();
    cfg.scene.n_objects_range = (1, 1);
    let scenes_dir = dir.join("scenes");
    cmd_gen(&cfg, &scenes_dir, 2, 21).unwrap();
    let scenes = load_scenes(&scenes_dir).unwrap();
    let (a, sa) = &scenes[0];
    let (b, sb) = &scenes[1];
    let labels = sb.labels();
    let background: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).take(500).collect();
    let mut store = LabelStore::default();
    store.add(record(a, sa.gt_masks[0].clone(), 0.9));
    store.add(record(b, IndexMask::new(background, labels.len()).unwrap(), 0.8));
    store.add(record(b, sb.gt_masks[0].clone(), 0.7));
    let masks = dir.join("fixture.msk");
    store.write(&masks).unwrap();
    (cfg, masks, scenes_dir)
}

#[test]
fn eval_matches_the_hand_computed_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, masks, scenes) = hand_fixture(dir.path());
    let r = cmd_eval(&cfg, &masks, &scenes, &dir.path().join("r")).unwrap();
    assert_eq!(r.ap50, 0.5 + (2.0 / 3.0) * 0.5);
    assert_eq!((r.rc50, r.pr50), (1.0, 2.0 / 3.0));
}

#[test]
fn ablation_grids_produce_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let mut cfg = light();
    cfg.schedule.updates = 0;
    cfg.schedule.trajectories = 4;
    cmd_gen(&cfg, &scenes, 1, 9).unwrap();
    let grid = |key: &str, values: &[&str]| Grid {
        key: key.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    };
    let out = dir.path().join("ab");
    let steps = cmd_ablate(&cfg, &grid("env.step_size", &["0.2", "0.3", "0.4", "0.5"]), &scenes, None, &out).unwrap();
    assert_eq!(steps.len(), 4);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let chamfer = cmd_ablate(&cfg, &grid("env.chamfer_threshold", &["0.12", "0.14", "0.16"]), &scenes, None, &out).unwrap();
    assert_eq!(chamfer.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["0.12", "0.14", "0.16"]);
    for r in steps.iter().chain(&chamfer) {
        assert!(r.report.ap <= r.report.ap50 && r.report.ap50 <= r.report.ap25);
    }
    assert!(cmd_ablate(&cfg, &grid("env.step_size", &[]), &scenes, None, &out).unwrap_err().is_usage());
}

#[test]
fn init_checkpoint_depends_only_on_the_init_seed() {
    let mut cfg = RunConfig::default();
    let a = init_checkpoint(&cfg);
    cfg.seeds.train += 1;
    assert_eq!(init_checkpoint(&cfg), a);
    cfg.seeds.init += 1;
    assert_ne!(init_checkpoint(&cfg).params, a.params);
    let _: &PolicyParams = &a.params;
}
