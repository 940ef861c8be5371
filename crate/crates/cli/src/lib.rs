//! Command implementations behind the `grabs` binary: run configuration,
//! scene generation, training, discovery, evaluation and ablation grids.

use grabs_core::env::{rollout, Actor, EnvConfig, RolloutSpec, UniformActor};
use grabs_core::eval::{evaluate, EvalConfig, EvalReport, SceneEval};
use grabs_core::labelstore::LabelStore;
use grabs_core::policy::{read_checkpoint, write_checkpoint, Architecture, Checkpoint, PolicyParams};
use grabs_core::ppo::{train, PPOConfig, TrainEvent, TrainSetup, UpdateRecord};
use grabs_core::prior::{Prior, PriorConfig};
use grabs_core::sceneforge::{generate_scene, read_scene, write_scene, SceneGenConfig, SceneSample};
use grabs_core::seeding::{derive_seed, rng_from_seed};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCENE_EXT: &str = "scn";
pub const LOG_FILE: &str = "train.log";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const MASK_FILE: &str = "masks.msk";

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad arguments; the binary exits with status 2.
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scene(#[from] grabs_core::sceneforge::SceneError),
    #[error(transparent)]
    Train(#[from] grabs_core::ppo::PpoError),
    #[error(transparent)]
    Eval(#[from] grabs_core::eval::EvalError),
}

impl HarnessError {
    pub fn is_usage(&self) -> bool {
        matches!(self, HarnessError::Usage(_))
    }

    fn file(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PriorSection {
    /// GRABS-TPL v1 library; the built-in templates when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_file: Option<PathBuf>,
    pub settings: PriorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub gen: u64,
    pub init: u64,
    pub train: u64,
    pub discover: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            gen: 0,
            init: 1,
            train: 2,
            discover: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub updates: usize,
    /// Episodes per scene during discovery (the N of dis-N).
    pub trajectories: usize,
    pub dedup_iou: f64,
    pub arch: Architecture,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            updates: 200,
            trajectories: 300,
            dedup_iou: 0.5,
            arch: Architecture::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Everything a run needs. Missing keys take their defaults, so an empty
/// file is the canonical setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub ppo: PPOConfig,
    pub scene: SceneGenConfig,
    pub prior: PriorSection,
    pub eval: EvalConfig,
    pub schedule: Schedule,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::file(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(t), Some(dir)) = (&cfg.prior.template_file, path.parent()) {
            if t.is_relative() {
                cfg.prior.template_file = Some(dir.join(t));
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |e: &dyn std::fmt::Display| HarnessError::Config(e.to_string());
        self.env.validate().map_err(|e| err(&e))?;
        self.ppo.validate().map_err(|e| err(&e))?;
        self.scene.validate().map_err(|e| err(&e))?;
        self.eval.validate().map_err(|e| err(&e))?;
        if !(self.schedule.dedup_iou > 0.0 && self.schedule.dedup_iou <= 1.0) {
            return Err(HarnessError::Config("schedule.dedup_iou must lie in (0, 1]".into()));
        }
        if self.prior.settings.mc_resolution < 2 || self.prior.settings.recon_points == 0 {
            return Err(HarnessError::Config(
                "prior.settings needs mc_resolution >= 2 and recon_points > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        if let Some(t) = &self.prior.template_file {
            if !t.is_file() {
                return Err(HarnessError::file(t, "template file not found"));
            }
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<Prior> {
        let settings = self.prior.settings.clone();
        match &self.prior.template_file {
            Some(path) => Prior::from_template_file(path, settings).map_err(|e| HarnessError::file(path, e)),
            None => Ok(Prior::with_config(settings)),
        }
    }

    /// Returns a copy with the dotted `key` (e.g. `env.step_size`) set to
    /// `value`, revalidated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| HarnessError::Usage(format!("unknown config key {key:?}")))?;
        }
        *slot = parse_like(slot, value).ok_or_else(|| HarnessError::Usage(format!("bad value {value:?} for {key}")))?;
        let cfg: RunConfig = root.try_into().map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_like(old: &toml::Value, text: &str) -> Option<toml::Value> {
    use toml::Value as V;
    Some(match old {
        V::Float(_) => V::Float(text.parse().ok()?),
        V::Integer(_) => V::Integer(text.parse().ok()?),
        V::Boolean(_) => V::Boolean(text.parse().ok()?),
        V::String(_) => V::String(text.to_string()),
        _ => {
            let doc: toml::Table = toml::from_str(&format!("v = {text}")).ok()?;
            doc.get("v")?.clone()
        }
    })
}

pub fn scene_file_name(k: usize) -> String {
    format!("scene_{k:04}.{SCENE_EXT}")
}

/// Generates `count` scenes; scene `k` uses seed `derive_seed(seed, k)`.
pub fn generate_scenes(cfg: &RunConfig, prior: &Prior, count: usize, seed: u64) -> Result<Vec<(String, SceneSample)>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|k| {
            let scene = generate_scene(&cfg.scene, prior, derive_seed(seed, k as u64))?;
            Ok((format!("scene_{k:04}"), scene))
        })
        .collect()
}

/// `grabs gen`: writes `count` scene files into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if count == 0 {
        return Err(HarnessError::Usage("--count must be at least 1".into()));
    }
    let prior = cfg.prior()?;
    let scenes = generate_scenes(cfg, &prior, count, seed)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(count);
    for (k, (_, scene)) in scenes.iter().enumerate() {
        let path = out.join(scene_file_name(k));
        write_scene(scene, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every scene file in `dir`, sorted by name; ids are file stems.
pub fn load_scenes(dir: &Path) -> Result<Vec<(String, SceneSample)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HarnessError::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SCENE_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::file(dir, "no scene files"));
    }
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, read_scene(&p)?))
        })
        .collect()
}

pub fn init_checkpoint(cfg: &RunConfig) -> Checkpoint {
    Checkpoint {
        params: PolicyParams::init(cfg.schedule.arch, &mut rng_from_seed(cfg.seeds.init)),
        step: 0,
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarnessError::file(path, e))?;
    read_checkpoint(&bytes).map_err(|e| HarnessError::file(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)).map_err(|e| HarnessError::file(path, e))
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<UpdateRecord>,
}

/// Trains in memory from `init`; periodic checkpoints go to `on_checkpoint`.
pub fn run_training(
    cfg: &RunConfig,
    prior: &Prior,
    scenes: &[(String, SceneSample)],
    init: Checkpoint,
    updates: usize,
    seed: u64,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    let setup = TrainSetup {
        scenes,
        env: &cfg.env,
        ppo: &cfg.ppo,
        prior,
        seed,
    };
    let mut failure = None;
    let out = train(init, &setup, updates, &mut |event| {
        if let TrainEvent::Checkpoint(c) = event {
            if failure.is_none() {
                failure = on_checkpoint(c).err();
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainRun {
        checkpoint: out.checkpoint,
        log: out.log,
    })
}

/// `grabs train`: trains on the scenes in `scenes_dir` and writes
/// `policy.ckpt`, periodic `policy_<step>.ckpt` files and appends to
/// `train.log`. With `resume`, training continues from that checkpoint and
/// its update counter.
pub fn cmd_train(
    cfg: &RunConfig,
    scenes_dir: &Path,
    out: &Path,
    updates: usize,
    seed: u64,
    resume: Option<&Path>,
) -> Result<TrainRun> {
    let prior = cfg.prior()?;
    let scenes = load_scenes(scenes_dir)?;
    let init = match resume {
        Some(p) => load_checkpoint(p)?,
        None => init_checkpoint(cfg),
    };
    fs::create_dir_all(out)?;
    let run = run_training(cfg, &prior, &scenes, init, updates, seed, &mut |c| {
        save_checkpoint(c, &out.join(format!("policy_{:06}.ckpt", c.step)))
    })?;
    save_checkpoint(&run.checkpoint, &out.join(POLICY_FILE))?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE))?;
    for r in &run.log {
        writeln!(log, "{}", r.to_json_line())?;
    }
    Ok(run)
}

/// Runs `trajectories` episodes per scene and collects the accepted masks.
/// Scene `k` uses rollout seed `derive_seed(seed, k)`.
pub fn discover(
    cfg: &RunConfig,
    prior: &Prior,
    scenes: &[(String, SceneSample)],
    actor: &dyn Actor,
    trajectories: usize,
    seed: u64,
) -> LabelStore {
    discover_budgets(cfg, prior, scenes, actor, &[trajectories], seed)
        .pop()
        .expect("one budget")
}

/// One store per budget from a single run at the largest budget. Episodes
/// are prefix-consistent, so each store equals a separate run at its budget.
pub fn discover_budgets(
    cfg: &RunConfig,
    prior: &Prior,
    scenes: &[(String, SceneSample)],
    actor: &dyn Actor,
    budgets: &[usize],
    seed: u64,
) -> Vec<LabelStore> {
    let mut stores: Vec<LabelStore> = budgets.iter().map(|_| LabelStore::new(cfg.schedule.dedup_iou)).collect();
    let max = budgets.iter().copied().max().unwrap_or(0);
    for (k, (id, scene)) in scenes.iter().enumerate() {
        let spec = RolloutSpec {
            scene,
            scene_id: id,
            cfg: &cfg.env,
            prior,
            seed: derive_seed(seed, k as u64),
            discovered_at: 0,
        };
        for (episode, m) in rollout(&spec, actor, max).masks {
            for (store, &b) in stores.iter_mut().zip(budgets) {
                if episode < b {
                    store.add(m.clone());
                }
            }
        }
    }
    stores
}

/// Which policy drives discovery.
pub enum PolicySource<'a> {
    Checkpoint(&'a Path),
    Random,
}

/// `grabs discover`: writes `masks.msk` into `out`.
pub fn cmd_discover(
    cfg: &RunConfig,
    scenes_dir: &Path,
    policy: PolicySource<'_>,
    out: &Path,
    trajectories: usize,
    seed: u64,
) -> Result<LabelStore> {
    if trajectories == 0 {
        return Err(HarnessError::Usage("--trajectories must be at least 1".into()));
    }
    let prior = cfg.prior()?;
    let scenes = load_scenes(scenes_dir)?;
    let store = match policy {
        PolicySource::Checkpoint(p) => {
            let ckpt = load_checkpoint(p)?;
            discover(cfg, &prior, &scenes, &ckpt.params, trajectories, seed)
        }
        PolicySource::Random => discover(cfg, &prior, &scenes, &UniformActor, trajectories, seed),
    };
    fs::create_dir_all(out)?;
    let path = out.join(MASK_FILE);
    store.write(&path).map_err(|e| HarnessError::file(&path, e))?;
    Ok(store)
}

/// Pairs the store's final predictions with each scene's ground truth.
pub fn score(cfg: &RunConfig, store: &LabelStore, scenes: &[(String, SceneSample)]) -> Result<EvalReport> {
    let evals: Vec<SceneEval> = scenes
        .iter()
        .map(|(id, s)| SceneEval::new(id.clone(), store.finalize(id), s.gt_masks.clone()))
        .collect();
    Ok(evaluate(&evals, &cfg.eval)?)
}

/// `grabs eval`: writes `report.txt` and `report.json` into `out`.
pub fn cmd_eval(cfg: &RunConfig, masks: &Path, scenes_dir: &Path, out: &Path) -> Result<EvalReport> {
    let store = LabelStore::read(masks, cfg.schedule.dedup_iou).map_err(|e| HarnessError::file(masks, e))?;
    let scenes = load_scenes(scenes_dir)?;
    if let Some(unknown) = store.scene_ids().find(|id| !scenes.iter().any(|(s, _)| s == id)) {
        return Err(HarnessError::file(masks, format!("masks for unknown scene {unknown:?}")));
    }
    let report = score(cfg, &store, &scenes)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.to_table())?;
    fs::write(out.join("report.json"), report.to_json())?;
    Ok(report)
}

/// One axis of an ablation grid.
#[derive(Debug, Clone)]
pub struct Grid {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub value: String,
    pub report: EvalReport,
}

/// Trains (from the same initialization), discovers and evaluates once per
/// grid value. `train_scenes` and `eval_scenes` are shared by every point.
pub fn ablate(
    cfg: &RunConfig,
    grid: &Grid,
    train_scenes: &[(String, SceneSample)],
    eval_scenes: &[(String, SceneSample)],
) -> Result<Vec<AblationRow>> {
    if grid.values.is_empty() {
        return Err(HarnessError::Usage("ablation grid is empty".into()));
    }
    let points: Vec<RunConfig> = grid
        .values
        .iter()
        .map(|v| cfg.with_override(&grid.key, v))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(points.len());
    for (value, point) in grid.values.iter().zip(&points) {
        let prior = point.prior()?;
        let run = run_training(
            point,
            &prior,
            train_scenes,
            init_checkpoint(point),
            point.schedule.updates,
            point.seeds.train,
            &mut |_| Ok(()),
        )?;
        let store = discover(
            point,
            &prior,
            eval_scenes,
            &run.checkpoint.params,
            point.schedule.trajectories,
            point.seeds.discover,
        );
        rows.push(AblationRow {
            value: value.clone(),
            report: score(point, &store, eval_scenes)?,
        });
    }
    Ok(rows)
}

pub fn ablation_table(key: &str, rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.value.len()).chain([key.len()]).max().unwrap_or(0);
    let mut s = format!("{key:<width$}");
    for h in ["AP", "AP50", "AP25", "RC", "RC50", "RC25", "PR", "PR50", "PR25"] {
        s.push_str(&format!(" {h:>6}"));
    }
    s.push('\n');
    for r in rows {
        let m = &r.report;
        s.push_str(&format!("{:<width$}", r.value));
        for v in [m.ap, m.ap50, m.ap25, m.rc, m.rc50, m.rc25, m.pr, m.pr50, m.pr25] {
            s.push_str(&format!(" {:>6.1}", 100.0 * v));
        }
        s.push('\n');
    }
    s
}

/// `grabs ablate`: trains on `train_dir`, evaluates on `eval_dir` (the
/// training scenes when absent) and writes `ablation.txt` into `out`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    grid: &Grid,
    train_dir: &Path,
    eval_dir: Option<&Path>,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if grid.values.is_empty() {
        return Err(HarnessError::Usage("ablation grid is empty".into()));
    }
    let train_scenes = load_scenes(train_dir)?;
    let eval_scenes = match eval_dir {
        Some(d) => load_scenes(d)?,
        None => train_scenes.clone(),
    };
    let rows = ablate(cfg, grid, &train_scenes, &eval_scenes)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.txt"), ablation_table(&grid.key, &rows))?;
    Ok(rows)
}
