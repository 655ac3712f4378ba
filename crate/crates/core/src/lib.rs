//! Dual-agent vision-language navigation over a discrete viewpoint graph.
//!
//! A global agent reads marked top-down maps and writes step-by-step plans; a
//! local agent reads the panorama at its viewpoint and picks moves. The
//! [`orchestrator`] runs the two against any [`llm::ChatBackend`], writes an
//! [`trace::EpisodeTrace`] per episode, and [`metrics`] scores the traces.

pub mod agents;
pub mod annotate;
pub mod episode;
pub mod fixtures;
pub mod llm;
pub mod metrics;
pub mod orchestrator;
pub mod prompts;
pub mod scene;
pub mod trace;

pub use episode::{Budget, DatasetMode, Episode};
pub use orchestrator::{EpisodeConfig, Navigator, PlanStyle};
pub use scene::{AgentPose, SceneGraph};

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/maps.md")]
    mod maps {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/loop.md")]
    mod collaboration_loop {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
