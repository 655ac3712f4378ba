//! Run settings: TOML file values overridden by flags.

use std::path::{Path, PathBuf};

use daco::episode::DatasetMode;
use daco::llm::RemoteConfig;
use daco::orchestrator::PlanStyle;
use serde::Deserialize;

use crate::{usage, BackendKind, RunArgs};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scene_dir: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub oracle_script: Option<PathBuf>,
    pub plan_style: Option<String>,
    pub replan: Option<bool>,
    pub mode: Option<String>,
    pub out: Option<PathBuf>,
    pub run_label: Option<String>,
    pub jobs: Option<usize>,
    pub dump_maps: Option<bool>,
    pub templates: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub remote: RemoteSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub max_steps: Option<u32>,
    pub max_replans: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub retries: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub timeout_s: Option<u64>,
}

pub enum Backend {
    Oracle(PathBuf),
    Remote(RemoteConfig),
}

pub struct Settings {
    pub scene_dir: PathBuf,
    pub episodes: PathBuf,
    pub backend: Backend,
    pub plan_style: PlanStyle,
    pub replan: bool,
    pub max_steps: Option<u32>,
    pub max_replans: u32,
    pub mode: DatasetMode,
    pub out: PathBuf,
    pub run_label: String,
    pub jobs: usize,
    pub dump_maps: bool,
    pub templates: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
}

fn load_file(path: &Path) -> anyhow::Result<FileConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn required<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| usage(format!("missing --{flag}")))
}

fn existing(path: PathBuf, what: &str) -> anyhow::Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

impl Settings {
    pub fn resolve(args: RunArgs) -> anyhow::Result<Self> {
        let file = match &args.config {
            Some(path) => load_file(path)?,
            None => FileConfig::default(),
        };
        let plan_style = match args.plan_style.or(file.plan_style) {
            Some(s) => s.parse::<PlanStyle>().map_err(usage)?,
            None => PlanStyle::Dynamic,
        };
        let replan_flag = if args.replan {
            Some(true)
        } else if args.no_replan {
            Some(false)
        } else {
            None
        };
        let replan = match replan_flag.or(file.replan) {
            Some(true) if plan_style == PlanStyle::None => {
                return Err(usage(
                    "replan requires a planner; drop --replan or choose a plan style other than none",
                ))
            }
            Some(v) => v,
            None => plan_style != PlanStyle::None,
        };
        let mode = match args.mode.or(file.mode) {
            Some(s) => s.parse::<DatasetMode>().map_err(usage)?,
            None => DatasetMode::R2r,
        };
        let backend = match args.backend.or(file.backend) {
            Some(BackendKind::Oracle) | None if args.endpoint.is_none() && file.remote.endpoint.is_none() => {
                let script = required(args.oracle_script.or(file.oracle_script), "oracle-script")?;
                Backend::Oracle(existing(script, "oracle script")?)
            }
            Some(BackendKind::Oracle) => return Err(usage("--endpoint given with the oracle backend")),
            Some(BackendKind::Remote) | None => {
                if args.oracle_script.is_some() || file.oracle_script.is_some() {
                    return Err(usage("--oracle-script given with the remote backend"));
                }
                let defaults = RemoteConfig::default();
                Backend::Remote(RemoteConfig {
                    endpoint: args.endpoint.or(file.remote.endpoint).unwrap_or(defaults.endpoint),
                    model: args.model.or(file.remote.model).unwrap_or(defaults.model),
                    retries: file.remote.retries.unwrap_or(defaults.retries),
                    backoff_ms: file.remote.backoff_ms.unwrap_or(defaults.backoff_ms),
                    timeout_s: file.remote.timeout_s.unwrap_or(defaults.timeout_s),
                })
            }
        };
        let max_steps = args.max_steps.or(file.budget.max_steps);
        if max_steps == Some(0) {
            return Err(usage("--max-steps must be positive"));
        }
        let jobs = args.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(usage("--jobs must be positive"));
        }
        Ok(Self {
            scene_dir: existing(
                required(args.scene_dir.or(file.scene_dir), "scene-dir")?,
                "scene directory",
            )?,
            episodes: existing(required(args.episodes.or(file.episodes), "episodes")?, "episode file")?,
            backend,
            plan_style,
            replan,
            max_steps,
            max_replans: args
                .max_replans
                .or(file.budget.max_replans)
                .unwrap_or(daco::episode::DEFAULT_MAX_REPLANS),
            mode,
            out: required(args.out.or(file.out), "out")?,
            run_label: args.run_label.or(file.run_label).unwrap_or_else(|| "run".to_string()),
            jobs,
            dump_maps: args.dump_maps || file.dump_maps.unwrap_or(false),
            templates: args.templates.or(file.templates),
            temperature: file.temperature.unwrap_or(daco::llm::DEFAULT_TEMPERATURE),
            max_tokens: file.max_tokens.unwrap_or(daco::llm::DEFAULT_MAX_TOKENS),
        })
    }
}
