//! Navigation metrics.
//!
//! Per episode: navigation error (NE), success within [`SUCCESS_DISTANCE`]
//! of the goal, oracle success anywhere along the visited viewpoints, and the
//! SPL term `S * L / max(L, P)`. Aggregates report SR, OSR and SPL as
//! percentages. Stability statistics use the sample standard deviation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::DatasetMode;
use crate::scene::{SceneError, SceneGraph};
use crate::trace::EpisodeTrace;

/// Meters.
pub const SUCCESS_DISTANCE: f64 = 3.0;

pub const SD_NOTE: &str = "SD is the sample standard deviation (n - 1)";
pub const BUCKET_NOTE: &str = "buckets keyed by ground-truth move count (edges)";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("nothing to aggregate")]
    Empty,
    #[error("stability needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    /// Length of the path walked.
    pub path_length: f64,
    /// Shortest distance from the start to the goal.
    pub shortest: f64,
}

/// Scores a walked viewpoint sequence against `goal`, with the default
/// success distance.
pub fn score_trajectory<S: AsRef<str>>(
    graph: &SceneGraph,
    trajectory: &[S],
    goal: &str,
) -> Result<EpisodeMetrics, MetricsError> {
    score_trajectory_within(graph, trajectory, goal, SUCCESS_DISTANCE)
}

pub fn score_trajectory_within<S: AsRef<str>>(
    graph: &SceneGraph,
    trajectory: &[S],
    goal: &str,
    threshold: f64,
) -> Result<EpisodeMetrics, MetricsError> {
    let start = trajectory.first().ok_or(MetricsError::EmptyTrajectory)?.as_ref();
    let end = trajectory.last().expect("non-empty").as_ref();
    let ne = graph.shortest_path_length(end, goal)?;
    let mut nearest = f64::INFINITY;
    for v in trajectory {
        nearest = nearest.min(graph.shortest_path_length(v.as_ref(), goal)?);
    }
    let path_length = graph.path_length(trajectory)?;
    let shortest = graph.shortest_path_length(start, goal)?;
    let success = ne <= threshold;
    let spl = if !success {
        0.0
    } else if shortest == 0.0 && path_length == 0.0 {
        1.0
    } else {
        shortest / shortest.max(path_length)
    };
    Ok(EpisodeMetrics {
        ne,
        success,
        oracle_success: nearest <= threshold,
        spl,
        path_length,
        shortest,
    })
}

/// Scores a trace against `goal`.
pub fn score_episode(graph: &SceneGraph, trace: &EpisodeTrace, goal: &str) -> Result<EpisodeMetrics, MetricsError> {
    score_trajectory(graph, &trace.summary.trajectory, goal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub episodes: usize,
    pub ne: f64,
    pub osr: f64,
    pub sr: f64,
    pub spl: f64,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

fn percent(flags: impl ExactSizeIterator<Item = bool>) -> f64 {
    let n = flags.len();
    100.0 * flags.filter(|f| *f).count() as f64 / n as f64
}

pub fn aggregate(metrics: &[EpisodeMetrics]) -> Result<AggregateMetrics, MetricsError> {
    if metrics.is_empty() {
        return Err(MetricsError::Empty);
    }
    let agg = AggregateMetrics {
        episodes: metrics.len(),
        ne: mean(metrics.iter().map(|m| m.ne)),
        osr: percent(metrics.iter().map(|m| m.oracle_success)),
        sr: percent(metrics.iter().map(|m| m.success)),
        spl: 100.0 * mean(metrics.iter().map(|m| m.spl)),
    };
    assert!(agg.sr <= agg.osr, "SR {} above OSR {}", agg.sr, agg.osr);
    assert!(agg.spl <= agg.sr + 1e-9, "SPL {} above SR {}", agg.spl, agg.sr);
    Ok(agg)
}

/// Groups `(ground-truth moves, metrics)` pairs by move count.
pub fn bucket_by_gt_steps(scored: &[(usize, EpisodeMetrics)]) -> BTreeMap<usize, AggregateMetrics> {
    let mut groups: BTreeMap<usize, Vec<EpisodeMetrics>> = BTreeMap::new();
    for (steps, m) in scored {
        groups.entry(*steps).or_default().push(*m);
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, aggregate(&v).expect("groups are non-empty")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStability {
    pub mean: f64,
    pub range: f64,
    pub sd: f64,
    /// SD / mean in percent; absent when the mean is not positive.
    pub cv: Option<f64>,
}

pub fn sample_stability(values: &[f64]) -> Result<MetricStability, MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::TooFewRuns(values.len()));
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MetricStability {
        mean: m,
        range: max - min,
        sd,
        cv: (m > 0.0).then(|| 100.0 * sd / m),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub runs: usize,
    pub ne: MetricStability,
    pub osr: MetricStability,
    pub sr: MetricStability,
    pub spl: MetricStability,
}

pub fn stability(runs: &[AggregateMetrics]) -> Result<StabilityStats, MetricsError> {
    let column = |f: fn(&AggregateMetrics) -> f64| sample_stability(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(StabilityStats {
        runs: runs.len(),
        ne: column(|a| a.ne)?,
        osr: column(|a| a.osr)?,
        sr: column(|a| a.sr)?,
        spl: column(|a| a.spl)?,
    })
}

/// One scored episode of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEpisode {
    pub run_label: String,
    pub episode: String,
    pub mode: DatasetMode,
    pub gt_steps: usize,
    pub metrics: EpisodeMetrics,
}

impl ScoredEpisode {
    pub fn from_trace(graph: &SceneGraph, trace: &EpisodeTrace) -> Result<Self, MetricsError> {
        let episode = &trace.header.episode;
        Ok(Self {
            run_label: trace.header.run_label.clone(),
            episode: episode.id.clone(),
            mode: episode.mode,
            gt_steps: episode.gt_steps(),
            metrics: score_episode(graph, trace, episode.goal())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: DatasetMode,
    /// Over every episode of every run.
    pub overall: AggregateMetrics,
    pub runs: BTreeMap<String, AggregateMetrics>,
    pub buckets: BTreeMap<usize, AggregateMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub notes: Vec<String>,
    pub modes: Vec<ModeReport>,
}

/// Groups scored episodes by dataset mode, then by run label; stability is
/// reported for modes with two or more runs.
pub fn build_report(scored: &[ScoredEpisode]) -> MetricsReport {
    let modes: BTreeSet<DatasetMode> = scored.iter().map(|s| s.mode).collect();
    let modes = modes
        .into_iter()
        .map(|mode| {
            let in_mode: Vec<&ScoredEpisode> = scored.iter().filter(|s| s.mode == mode).collect();
            let all: Vec<EpisodeMetrics> = in_mode.iter().map(|s| s.metrics).collect();
            let mut by_run: BTreeMap<String, Vec<EpisodeMetrics>> = BTreeMap::new();
            for s in &in_mode {
                by_run.entry(s.run_label.clone()).or_default().push(s.metrics);
            }
            let runs: BTreeMap<String, AggregateMetrics> = by_run
                .into_iter()
                .map(|(k, v)| (k, aggregate(&v).expect("non-empty")))
                .collect();
            let per_run: Vec<AggregateMetrics> = runs.values().copied().collect();
            let buckets = bucket_by_gt_steps(&in_mode.iter().map(|s| (s.gt_steps, s.metrics)).collect::<Vec<_>>());
            ModeReport {
                mode,
                overall: aggregate(&all).expect("non-empty"),
                stability: stability(&per_run).ok(),
                runs,
                buckets,
            }
        })
        .collect();
    MetricsReport {
        notes: vec![SD_NOTE.to_string(), BUCKET_NOTE.to_string()],
        modes,
    }
}

fn metric_row(out: &mut String, label: &str, a: &AggregateMetrics) {
    let _ = writeln!(
        out,
        "{label:<14}{:>6}{:>8.2}{:>8.2}{:>8.2}{:>8.2}",
        a.episodes, a.ne, a.osr, a.sr, a.spl
    );
}

impl MetricsReport {
    /// Aligned plain-text rendering, columns NE OSR SR SPL.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for mode in &self.modes {
            let _ = writeln!(out, "== {} ==", mode.mode);
            let _ = writeln!(
                out,
                "{:<14}{:>6}{:>8}{:>8}{:>8}{:>8}",
                "", "N", "NE", "OSR", "SR", "SPL"
            );
            metric_row(&mut out, "all", &mode.overall);
            if mode.runs.len() > 1 {
                for (label, a) in &mode.runs {
                    metric_row(&mut out, &format!("run {label}"), a);
                }
            }
            let _ = writeln!(out, "-- by ground-truth moves --");
            for (steps, a) in &mode.buckets {
                metric_row(&mut out, &format!("{steps} moves"), a);
            }
            if let Some(st) = &mode.stability {
                let _ = writeln!(out, "-- stability over {} runs --", st.runs);
                let _ = writeln!(out, "{:<14}{:>8}{:>8}{:>8}{:>8}", "", "Mean", "Range", "SD", "CV (%)");
                for (name, m) in [("NE", st.ne), ("OSR", st.osr), ("SR", st.sr), ("SPL", st.spl)] {
                    let cv = m.cv.map_or_else(|| "-".to_string(), |c| format!("{c:.2}"));
                    let _ = writeln!(out, "{name:<14}{:>8.2}{:>8.2}{:>8.2}{cv:>8}", m.mean, m.range, m.sd);
                }
            }
            out.push('\n');
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t5() -> SceneGraph {
        crate::fixtures::t5_scene()
    }

    fn m(success: bool, oracle: bool, spl: f64, ne: f64) -> EpisodeMetrics {
        EpisodeMetrics {
            ne,
            success,
            oracle_success: oracle,
            spl,
            path_length: 0.0,
            shortest: 0.0,
        }
    }

    #[test]
    fn optimal_path() {
        let s = score_trajectory(&t5(), &["A", "B", "E"], "E").unwrap();
        assert_eq!(
            (s.ne, s.success, s.path_length, s.shortest, s.spl),
            (0.0, true, 8.0, 8.0, 1.0)
        );
    }

    #[test]
    fn detour_halves_spl() {
        let s = score_trajectory(&t5(), &["A", "B", "C", "B", "E"], "E").unwrap();
        assert!(s.success);
        assert_eq!((s.path_length, s.shortest, s.spl), (16.0, 8.0, 0.5));
    }

    #[test]
    fn failures() {
        let g = t5();
        let d = score_trajectory(&g, &["A", "B"], "D").unwrap();
        assert_eq!((d.ne, d.success, d.spl), (8.0, false, 0.0));
        let c = score_trajectory(&g, &["A", "B"], "C").unwrap();
        assert_eq!((c.ne, c.success, c.oracle_success), (4.0, false, false));
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[m(true, true, 1.0, 0.0), m(false, true, 0.0, 6.0)]).unwrap();
        assert_eq!((a.sr, a.osr, a.spl, a.ne), (50.0, 100.0, 50.0, 3.0));
        assert!(matches!(aggregate(&[]), Err(MetricsError::Empty)));
    }

    #[test]
    fn buckets() {
        let x = m(true, true, 1.0, 0.0);
        let b = bucket_by_gt_steps(&[(5, x), (5, x), (7, x)]);
        assert_eq!(b.keys().copied().collect::<Vec<_>>(), vec![5, 7]);
        assert_eq!((b[&5].episodes, b[&7].episodes), (2, 1));
        assert!(bucket_by_gt_steps(&[]).is_empty());
        let one = bucket_by_gt_steps(&[(3, x), (3, m(false, false, 0.0, 9.0))]);
        assert_eq!(one[&3], aggregate(&[x, m(false, false, 0.0, 9.0)]).unwrap());
    }

    #[test]
    fn stability_examples() {
        let s = sample_stability(&[48.0, 50.0, 52.0]).unwrap();
        assert_eq!((s.mean, s.range, s.sd), (50.0, 4.0, 2.0));
        assert_eq!(format!("{:.2}", s.cv.unwrap()), "4.00");
        let flat = sample_stability(&[40.0, 40.0, 40.0]).unwrap();
        assert_eq!((flat.range, flat.sd, flat.cv), (0.0, 0.0, Some(0.0)));
        let two = sample_stability(&[30.0, 32.0]).unwrap();
        assert_eq!((two.mean, two.range), (31.0, 2.0));
        assert!((two.sd - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(sample_stability(&[1.0]), Err(MetricsError::TooFewRuns(1))));
        assert_eq!(sample_stability(&[0.0, 0.0]).unwrap().cv, None);
    }

    #[test]
    fn report_has_stability_only_for_repeated_runs() {
        let ep = |run: &str, mode| ScoredEpisode {
            run_label: run.into(),
            episode: "1_0".into(),
            mode,
            gt_steps: 2,
            metrics: m(true, true, 1.0, 0.0),
        };
        let single = build_report(&[ep("a", DatasetMode::R2r), ep("a", DatasetMode::R4r)]);
        assert_eq!(single.modes.len(), 2);
        assert!(single.modes.iter().all(|m| m.stability.is_none()));
        let triple = build_report(&[
            ep("a", DatasetMode::R2r),
            ep("b", DatasetMode::R2r),
            ep("c", DatasetMode::R2r),
        ]);
        assert_eq!(triple.modes[0].stability.unwrap().runs, 3);
        let table = triple.to_table();
        assert!(table.contains("NE") && table.contains("CV (%)"));
        let header = table.lines().nth(1).unwrap();
        let pos = |c: &str| header.find(c).unwrap();
        assert!(pos(" NE") < pos("OSR") && pos("OSR") < pos(" SR") && pos(" SR") < pos("SPL"));
    }

    proptest! {
        #[test]
        fn aggregate_orderings_hold(flags in prop::collection::vec((any::<bool>(), any::<bool>(), 0.0..=1.0f64), 1..40)) {
            let ms: Vec<EpisodeMetrics> = flags
                .iter()
                .map(|&(s, o, r)| m(s, s || o, if s { r } else { 0.0 }, 0.0))
                .collect();
            let a = aggregate(&ms).unwrap();
            prop_assert!(a.sr <= a.osr);
            prop_assert!(a.spl <= a.sr + 1e-9);
        }
    }
}
