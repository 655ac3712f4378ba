//! Small synthetic worlds for tests, examples and the guide.
//!
//! Two scenes: `t5`, five viewpoints on one floor, and `tower`, nine
//! viewpoints over two floors joined by a staircase. Floor maps are generated
//! in memory. [`optimal_script`] writes the oracle answers that walk an
//! episode's reference path and stop at its end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::annotate::{FloorImage, FloorMap};
use crate::episode::{DatasetMode, Episode, PathRecord};
use crate::llm::{CallKind, OracleRecord};
use crate::scene::{apply_move, candidate_actions, AgentPose, SceneGraph};

pub const T5_JSON: &str = r#"{
  "scan": "t5",
  "viewpoints": [
    {"id": "A", "x": 0, "y": 0, "z": 0, "floor": 0},
    {"id": "B", "x": 4, "y": 0, "z": 0, "floor": 0},
    {"id": "C", "x": 8, "y": 0, "z": 0, "floor": 0},
    {"id": "D", "x": 8, "y": 4, "z": 0, "floor": 0},
    {"id": "E", "x": 4, "y": 4, "z": 0, "floor": 0}
  ],
  "edges": [["A", "B"], ["B", "C"], ["C", "D"], ["D", "E"], ["E", "B"]],
  "image_root": "images/t5"
}
"#;

pub const TOWER_JSON: &str = r#"{
  "scan": "tower",
  "viewpoints": [
    {"id": "hall", "x": 0, "y": 0, "z": 0, "floor": 0},
    {"id": "lobby", "x": 3, "y": 0, "z": 0, "floor": 0},
    {"id": "kitchen", "x": 6, "y": 0, "z": 0, "floor": 0},
    {"id": "pantry", "x": 6, "y": 3, "z": 0, "floor": 0},
    {"id": "stairs_low", "x": 0, "y": 3, "z": 0, "floor": 0},
    {"id": "stairs_high", "x": 0, "y": 3, "z": 3, "floor": 1},
    {"id": "landing", "x": 3, "y": 3, "z": 3, "floor": 1},
    {"id": "study", "x": 3, "y": 6, "z": 3, "floor": 1},
    {"id": "bedroom", "x": 6, "y": 6, "z": 3, "floor": 1}
  ],
  "edges": [
    ["hall", "lobby"], ["lobby", "kitchen"], ["kitchen", "pantry"], ["hall", "stairs_low"],
    ["stairs_low", "lobby"], ["stairs_low", "stairs_high"], ["stairs_high", "landing"],
    ["landing", "study"], ["study", "bedroom"], ["landing", "bedroom"]
  ],
  "image_root": "images/tower"
}
"#;

pub const PIXELS_PER_METER: f64 = 40.0;
pub const MAP_MARGIN: i64 = 40;

pub fn t5_scene() -> SceneGraph {
    SceneGraph::from_json_str(T5_JSON).expect("fixture scene")
}

pub fn tower_scene() -> SceneGraph {
    SceneGraph::from_json_str(TOWER_JSON).expect("fixture scene")
}

pub fn scenes() -> Vec<SceneGraph> {
    vec![t5_scene(), tower_scene()]
}

fn scene_json(scan: &str) -> &'static str {
    match scan {
        "t5" => T5_JSON,
        "tower" => TOWER_JSON,
        other => panic!("no fixture scene {other}"),
    }
}

/// Plain floor plans: a light canvas with a one-meter grid, viewpoints mapped
/// north-up at [`PIXELS_PER_METER`].
pub fn floor_images(graph: &SceneGraph) -> Vec<FloorImage> {
    let vps = graph.viewpoints();
    let max_x = vps.iter().map(|v| v.position[0]).fold(0.0, f64::max);
    let max_y = vps.iter().map(|v| v.position[1]).fold(0.0, f64::max);
    let width = (2 * MAP_MARGIN + (max_x * PIXELS_PER_METER).round() as i64) as u32;
    let height = (2 * MAP_MARGIN + (max_y * PIXELS_PER_METER).round() as i64) as u32;
    let mut floors: BTreeMap<i64, BTreeMap<String, (i64, i64)>> = BTreeMap::new();
    for v in vps {
        let px = MAP_MARGIN + (v.position[0] * PIXELS_PER_METER).round() as i64;
        let py = MAP_MARGIN + ((max_y - v.position[1]) * PIXELS_PER_METER).round() as i64;
        floors.entry(v.floor).or_default().insert(v.id.clone(), (px, py));
    }
    floors
        .into_iter()
        .map(|(floor, pixel_coords)| {
            let shade = 236 - 12 * floor.clamp(0, 8) as u8;
            let pixels = RgbImage::from_fn(width, height, |x, y| {
                let on_grid = |p: u32| (p as i64 - MAP_MARGIN).rem_euclid(PIXELS_PER_METER as i64) == 0;
                if on_grid(x) || on_grid(y) {
                    Rgb([200, 200, 200])
                } else {
                    Rgb([shade, shade, 246])
                }
            });
            FloorImage {
                map: FloorMap {
                    floor,
                    image_ref: PathBuf::from(format!("{}_floor{floor}.png", graph.scan())),
                    pixel_coords,
                },
                pixels,
            }
        })
        .collect()
}

fn episode(path_id: &str, scan: &str, heading: f64, path: &[&str], instruction: &str) -> Episode {
    Episode {
        id: format!("{path_id}_0"),
        scan: scan.to_string(),
        instruction: instruction.to_string(),
        heading,
        gt_path: path.iter().map(|s| s.to_string()).collect(),
        mode: DatasetMode::R2r,
    }
}

/// Ten episodes over both scenes. Every reference path is a shortest path,
/// one to four moves long.
pub fn suite() -> Vec<Episode> {
    vec![
        episode(
            "t5-01",
            "t5",
            90.0,
            &["A", "B", "E"],
            "Walk ahead to the junction, then turn left and stop by the window.",
        ),
        episode(
            "t5-02",
            "t5",
            90.0,
            &["A", "B", "C", "D"],
            "Go straight through two rooms and turn left to the corner.",
        ),
        episode(
            "t5-03",
            "t5",
            0.0,
            &["E", "D"],
            "Head right to the next room and wait there.",
        ),
        episode(
            "t5-04",
            "t5",
            270.0,
            &["C", "B", "A"],
            "Walk down the corridor to its far end.",
        ),
        episode(
            "t5-05",
            "t5",
            180.0,
            &["D", "E", "B", "A"],
            "Turn right, pass the junction and stop at the end of the hall.",
        ),
        episode(
            "tower-01",
            "tower",
            90.0,
            &["hall", "lobby", "kitchen"],
            "Cross the lobby into the kitchen.",
        ),
        episode(
            "tower-02",
            "tower",
            0.0,
            &["hall", "stairs_low", "stairs_high", "landing"],
            "Go up the stairs and stop on the landing.",
        ),
        episode(
            "tower-03",
            "tower",
            0.0,
            &["hall", "stairs_low", "stairs_high", "landing", "study"],
            "Climb the stairs, cross the landing and wait in the study.",
        ),
        episode(
            "tower-04",
            "tower",
            180.0,
            &["pantry", "kitchen"],
            "Leave the pantry and stop in the kitchen.",
        ),
        episode(
            "tower-05",
            "tower",
            270.0,
            &["bedroom", "landing", "stairs_high", "stairs_low"],
            "Go back down the stairs.",
        ),
    ]
}

/// The suite in the episode-file layout, one record per path.
pub fn suite_records(episodes: &[Episode]) -> Vec<PathRecord> {
    episodes
        .iter()
        .map(|e| PathRecord {
            path_id: serde_json::Value::String(e.id.trim_end_matches("_0").to_string()),
            scan: e.scan.clone(),
            heading: e.heading.to_radians(),
            path: e.gt_path.clone(),
            instructions: vec![e.instruction.clone()],
            mode: (e.mode != DatasetMode::R2r).then_some(e.mode),
        })
        .collect()
}

pub fn describe_reply(viewpoint: &str) -> String {
    format!("I am at {viewpoint}. There is an open doorway in front of me and a wall behind me.")
}

pub fn plan_reply(subgoals: &[String]) -> String {
    let plan = subgoals
        .iter()
        .enumerate()
        .map(|(i, g)| format!("{}. {g}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    serde_json::json!({ "Thought": "Follow the remaining route.", "New Plan": plan }).to_string()
}

pub fn action_reply(answer: &str) -> String {
    format!("Thought: following the route.\nAction: {answer}")
}

pub fn record(episode: &str, step: u32, kind: CallKind, response: String) -> OracleRecord {
    OracleRecord {
        episode: episode.to_string(),
        step,
        kind,
        replan_ordinal: 0,
        attempt: None,
        response,
    }
}

/// Answers that make every plan style walk the reference path of `episode`
/// and then stop. Planning answers are included for every step; styles that
/// plan less simply leave them unused.
pub fn optimal_script(graph: &SceneGraph, episode: &Episode) -> Vec<OracleRecord> {
    let mut out = Vec::new();
    let mut pose = AgentPose::new(episode.start(), episode.heading);
    for (t, here) in episode.gt_path.iter().enumerate() {
        let step = t as u32;
        let remaining: Vec<String> = episode.gt_path[t + 1..]
            .iter()
            .map(|v| format!("go to {v}"))
            .chain(std::iter::once("stop".to_string()))
            .collect();
        out.push(record(&episode.id, step, CallKind::Describe, describe_reply(here)));
        out.push(record(&episode.id, step, CallKind::Planning, plan_reply(&remaining)));
        let answer = match episode.gt_path.get(t + 1) {
            Some(next) => {
                let space = candidate_actions(graph, &pose).expect("fixture pose");
                let option = space
                    .options
                    .iter()
                    .find(|o| &o.target == next)
                    .unwrap_or_else(|| panic!("{here} is not adjacent to {next}"))
                    .clone();
                pose = apply_move(graph, &pose, &option).expect("adjacent");
                option.label.to_string()
            }
            None => "Stop".to_string(),
        };
        out.push(record(&episode.id, step, CallKind::Action, action_reply(&answer)));
    }
    out
}

/// Writes scenes, floor maps, the episode file and the optimal oracle script
/// for `episodes` under `dir`:
///
/// ```text
/// dir/scenes/<scan>.json
/// dir/scenes/<scan>.floors.json
/// dir/scenes/<scan>_floor<k>.png
/// dir/episodes.json
/// dir/oracle.jsonl
/// ```
pub fn write_suite(dir: impl AsRef<Path>, episodes: &[Episode]) -> std::io::Result<()> {
    let dir = dir.as_ref();
    let scene_dir = dir.join("scenes");
    std::fs::create_dir_all(&scene_dir)?;
    let mut script = Vec::new();
    for graph in scenes() {
        let scan = graph.scan().to_string();
        std::fs::write(scene_dir.join(format!("{scan}.json")), scene_json(&scan))?;
        let floors = floor_images(&graph);
        let mut meta = Vec::new();
        for f in &floors {
            let name = f.map.image_ref.to_string_lossy().to_string();
            f.pixels
                .save(scene_dir.join(&name))
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            meta.push(serde_json::json!({ "floor": f.map.floor, "image": name, "coords": f.map.pixel_coords }));
        }
        let meta = serde_json::json!({ "scan": scan, "floors": meta });
        std::fs::write(
            scene_dir.join(format!("{scan}.floors.json")),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        for e in episodes.iter().filter(|e| e.scan == scan) {
            script.extend(optimal_script(&graph, e));
        }
    }
    std::fs::write(
        dir.join("episodes.json"),
        serde_json::to_string_pretty(&suite_records(episodes))? + "\n",
    )?;
    let mut lines = String::new();
    for r in &script {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("oracle.jsonl"), lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::check_coverage;

    #[test]
    fn suite_is_valid() {
        let graphs = scenes();
        let eps = suite();
        assert_eq!(eps.len(), 10);
        for e in &eps {
            let g = graphs.iter().find(|g| g.scan() == e.scan).unwrap();
            e.validate(g).unwrap();
            for w in e.gt_path.windows(2) {
                g.edge_length(&w[0], &w[1]).unwrap();
            }
            assert_eq!(
                g.path_length(&e.gt_path).unwrap(),
                g.shortest_path_length(e.start(), e.goal()).unwrap()
            );
            assert_eq!(optimal_script(g, e).len(), 3 * e.gt_path.len());
        }
    }

    #[test]
    fn floors_cover_every_viewpoint() {
        for g in scenes() {
            let floors = floor_images(&g);
            check_coverage(&floors, g.viewpoints().iter().map(|v| v.id.as_str())).unwrap();
        }
        assert_eq!(floor_images(&tower_scene()).len(), 2);
    }

    #[test]
    fn records_round_trip_headings() {
        let eps = suite();
        let back = crate::episode::episodes_from_records(&suite_records(&eps), DatasetMode::R2r).unwrap();
        for (a, b) in eps.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert!((a.heading - b.heading).abs() < 1e-9);
        }
    }
}
