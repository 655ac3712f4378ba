use std::path::Path;

use anyhow::Context;
use daco::annotate::{annotate_trajectory, load_floor_maps, FloorImage};
use daco::trace::EpisodeTrace;

use crate::AnnotateArgs;

fn read_trajectory(path: &Path) -> anyhow::Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let trace = EpisodeTrace::load(path)?;
        return Ok(trace.summary.trajectory);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a JSON array of viewpoint ids", path.display()))
}

/// Writes `step<k>_floor<f>.png` for each requested step index `k`, showing
/// the first `k` moves.
pub fn cmd_annotate(args: &AnnotateArgs) -> anyhow::Result<()> {
    let trajectory = read_trajectory(&args.trajectory)?;
    if trajectory.is_empty() {
        anyhow::bail!("{} holds an empty trajectory", args.trajectory.display());
    }
    let maps = load_floor_maps(args.scene_dir.join(format!("{}.floors.json", args.scan)))?;
    let floors = FloorImage::load_all(maps)?;
    let steps: Vec<usize> = if args.steps.is_empty() {
        (0..trajectory.len()).collect()
    } else {
        args.steps.clone()
    };
    std::fs::create_dir_all(&args.out)?;
    for k in steps {
        if k >= trajectory.len() {
            anyhow::bail!(
                "step {k} is past the end of a {}-viewpoint trajectory",
                trajectory.len()
            );
        }
        let set = annotate_trajectory(&floors, &trajectory[..=k], &trajectory[k])?;
        for floor in &set.floors {
            let path = args.out.join(format!("step{k:02}_floor{}.png", floor.floor));
            std::fs::write(&path, floor.to_png()?).with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    Ok(())
}
