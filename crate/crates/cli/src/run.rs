use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use daco::annotate::{load_floor_maps, FloorImage, MarkedMapSet};
use daco::episode::{load_episodes, Budget, Episode};
use daco::llm::{report_usage, ChatBackend, OracleBackend, RemoteBackend, UsageLedger};
use daco::orchestrator::{Clock, EpisodeConfig, FrozenClock, MapPurpose, MapSink, Navigator, PlanStyle, SystemClock};
use daco::prompts::PromptTemplates;
use daco::scene::{load_scene, SceneGraph};
use daco::trace::EpisodeTrace;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Backend, Settings};
use crate::{usage, RunArgs};

struct Scene {
    graph: SceneGraph,
    floors: Vec<FloorImage>,
}

fn load_scenes(dir: &Path, episodes: &[Episode], with_maps: bool) -> anyhow::Result<BTreeMap<String, Scene>> {
    let mut scenes = BTreeMap::new();
    for ep in episodes {
        if scenes.contains_key(&ep.scan) {
            continue;
        }
        let graph = load_scene(dir.join(format!("{}.json", ep.scan))).map_err(|e| usage(e.to_string()))?;
        let floors = if with_maps {
            let maps =
                load_floor_maps(dir.join(format!("{}.floors.json", ep.scan))).map_err(|e| usage(e.to_string()))?;
            FloorImage::load_all(maps).map_err(|e| usage(e.to_string()))?
        } else {
            Vec::new()
        };
        scenes.insert(ep.scan.clone(), Scene { graph, floors });
    }
    Ok(scenes)
}

struct DumpMaps {
    dir: PathBuf,
}

impl MapSink for DumpMaps {
    fn maps(&self, episode: &str, step: u32, purpose: MapPurpose, maps: &MarkedMapSet) {
        let purpose = match purpose {
            MapPurpose::Planning => "plan",
            MapPurpose::Replan => "replan",
        };
        let dir = self.dir.join(episode);
        let written = std::fs::create_dir_all(&dir).map_err(|e| e.to_string()).and_then(|_| {
            for floor in &maps.floors {
                let png = floor.to_png().map_err(|e| e.to_string())?;
                let name = format!("step{step:02}_{purpose}_floor{}.png", floor.floor);
                std::fs::write(dir.join(name), png).map_err(|e| e.to_string())?;
            }
            Ok(())
        });
        if let Err(e) = written {
            log::warn!("cannot dump maps for {episode} step {step}: {e}");
        }
    }
}

#[derive(Serialize)]
struct RunUsage {
    run_label: String,
    episodes: usize,
    infrastructure_errors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<daco::llm::UsageSummary>,
}

fn trace_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.jsonl")
}

/// Returns the process exit status: 1 when any episode failed to reach its
/// backend, 0 otherwise.
pub fn cmd_run(args: RunArgs) -> anyhow::Result<u8> {
    let s = Settings::resolve(args)?;
    let episodes = load_episodes(&s.episodes, s.mode).map_err(|e| usage(e.to_string()))?;
    if episodes.is_empty() {
        return Err(usage(format!("no episodes in {}", s.episodes.display())));
    }
    let templates = match &s.templates {
        Some(dir) => PromptTemplates::from_dir(dir).map_err(|e| usage(e.to_string()))?,
        None => PromptTemplates::default(),
    };
    let scenes = load_scenes(&s.scene_dir, &episodes, s.plan_style != PlanStyle::None)?;
    for ep in &episodes {
        ep.validate(&scenes[&ep.scan].graph).map_err(|e| usage(e.to_string()))?;
    }
    let config_for = |ep: &Episode| EpisodeConfig {
        plan_style: s.plan_style,
        replan_enabled: s.replan,
        budget: Budget {
            max_steps: s.max_steps.unwrap_or(ep.mode.default_max_steps()),
            max_replans: s.max_replans,
        },
        temperature: s.temperature,
        max_tokens: s.max_tokens,
    };
    for ep in &episodes {
        config_for(ep).validate().map_err(|e| usage(e.to_string()))?;
    }

    let (backend, clock): (Box<dyn ChatBackend>, Box<dyn Clock>) = match &s.backend {
        Backend::Oracle(path) => (
            Box::new(OracleBackend::load(path).map_err(|e| usage(e.to_string()))?),
            Box::new(FrozenClock),
        ),
        Backend::Remote(config) => (
            Box::new(RemoteBackend::from_env(config.clone())?),
            Box::new(SystemClock::default()),
        ),
    };

    let run_dir = s.out.join(&s.run_label);
    std::fs::create_dir_all(&run_dir).with_context(|| format!("cannot create {}", run_dir.display()))?;
    let sink = DumpMaps {
        dir: run_dir.join("maps"),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.jobs).build()?;
    let traces: Vec<EpisodeTrace> = pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| {
                let scene = &scenes[&ep.scan];
                let mut nav = Navigator::new(
                    &scene.graph,
                    &scene.floors,
                    &templates,
                    backend.as_ref(),
                    clock.as_ref(),
                );
                if s.dump_maps {
                    nav = nav.with_map_sink(&sink);
                }
                let trace = nav.run_episode(ep, &config_for(ep), &s.run_label)?;
                log::info!(
                    "{}: {:?} after {} moves",
                    ep.id,
                    trace.summary.termination,
                    trace.summary.moves
                );
                Ok(trace)
            })
            .collect::<Result<_, daco::orchestrator::RunError>>()
    })?;

    let mut ledgers: Vec<UsageLedger> = Vec::new();
    let mut failures = 0;
    for trace in &traces {
        let path = run_dir.join(trace_file_name(&trace.header.episode.id));
        trace.save(&path)?;
        ledgers.push(trace.summary.usage.clone());
        if trace.summary.infrastructure_error {
            failures += 1;
            log::error!(
                "{}: {}",
                trace.header.episode.id,
                trace.summary.error.as_deref().unwrap_or("backend failure")
            );
        }
    }
    let run_usage = RunUsage {
        run_label: s.run_label.clone(),
        episodes: traces.len(),
        infrastructure_errors: failures,
        summary: report_usage(&ledgers).ok(),
    };
    std::fs::write(
        run_dir.join("usage.json"),
        serde_json::to_string_pretty(&run_usage)? + "\n",
    )?;
    eprintln!("wrote {} traces to {}", traces.len(), run_dir.display());
    Ok(u8::from(failures > 0))
}
