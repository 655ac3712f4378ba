//! Discrete navigation worlds.
//!
//! A [`SceneGraph`] is a set of viewpoints with 3D positions joined by
//! undirected edges whose length is the Euclidean distance between their
//! endpoints. An agent stands on a viewpoint facing some heading; from there it
//! can see a 36-view panorama and move to any adjacent viewpoint.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of azimuth slots in one panorama ring.
pub const AZIMUTH_SLOTS: usize = 12;
/// Elevations sampled for a panorama, lowest first.
pub const ELEVATIONS: [i32; 3] = [-30, 0, 30];
/// Total views in a full panorama.
pub const PANORAMA_SIZE: usize = AZIMUTH_SLOTS * ELEVATIONS.len();
const SLOT_DEGREES: f64 = 360.0 / AZIMUTH_SLOTS as f64;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read scene file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed scene file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("empty scene")]
    Empty,
    #[error("duplicate viewpoint id {0}")]
    DuplicateViewpoint(String),
    #[error("edge references unknown viewpoint {0}")]
    DanglingEdge(String),
    #[error("edge {0}-{1} has zero length")]
    ZeroLengthEdge(String, String),
    #[error("viewpoint {0} has a negative floor index")]
    NegativeFloor(String),
    #[error("unknown viewpoint {0}")]
    UnknownViewpoint(String),
    #[error("{from} and {to} are not connected")]
    Unreachable { from: String, to: String },
    #[error("{0} and {1} are not adjacent")]
    NotAdjacent(String, String),
    #[error("viewpoint {0} has more neighbors than there are option letters")]
    TooManyNeighbors(String),
    #[error("panorama must contain {PANORAMA_SIZE} views, got {0}")]
    MalformedPanorama(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: String,
    pub position: [f64; 3],
    pub floor: i64,
}

/// Immutable navigation graph for one scan.
#[derive(Debug, Clone)]
pub struct SceneGraph {
    scan: String,
    image_root: PathBuf,
    viewpoints: Vec<Viewpoint>,
    index: BTreeMap<String, usize>,
    // adjacency[i] = (neighbor index, edge length), sorted by neighbor id
    adjacency: Vec<Vec<(usize, f64)>>,
    edge_count: usize,
}

#[derive(Deserialize)]
struct SceneFile {
    #[serde(default)]
    scan: String,
    viewpoints: Vec<ViewpointRecord>,
    #[serde(default)]
    edges: Vec<(String, String)>,
    #[serde(default)]
    image_root: String,
}

#[derive(Deserialize)]
struct ViewpointRecord {
    id: String,
    x: f64,
    y: f64,
    z: f64,
    #[serde(default)]
    floor: i64,
}

/// Loads a scene file. A relative `image_root` is resolved against the
/// directory holding the file.
pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneGraph, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut graph = SceneGraph::from_json_str(&text)?;
    if graph.image_root.is_relative() {
        if let Some(dir) = path.parent() {
            graph.image_root = dir.join(&graph.image_root);
        }
    }
    Ok(graph)
}

impl SceneGraph {
    pub fn from_json_str(text: &str) -> Result<Self, SceneError> {
        let file: SceneFile = serde_json::from_str(text)?;
        let viewpoints = file
            .viewpoints
            .into_iter()
            .map(|r| Viewpoint {
                id: r.id,
                position: [r.x, r.y, r.z],
                floor: r.floor,
            })
            .collect();
        Self::new(file.scan, viewpoints, &file.edges, file.image_root)
    }

    pub fn new(
        scan: impl Into<String>,
        viewpoints: Vec<Viewpoint>,
        edges: &[(String, String)],
        image_root: impl Into<PathBuf>,
    ) -> Result<Self, SceneError> {
        if viewpoints.is_empty() {
            return Err(SceneError::Empty);
        }
        let mut index = BTreeMap::new();
        for (i, vp) in viewpoints.iter().enumerate() {
            if vp.floor < 0 {
                return Err(SceneError::NegativeFloor(vp.id.clone()));
            }
            if index.insert(vp.id.clone(), i).is_some() {
                return Err(SceneError::DuplicateViewpoint(vp.id.clone()));
            }
        }
        let mut adjacency = vec![Vec::new(); viewpoints.len()];
        let mut edge_count = 0;
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| SceneError::DanglingEdge(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| SceneError::DanglingEdge(b.clone()))?;
            let length = euclidean(&viewpoints[ia].position, &viewpoints[ib].position);
            if length <= 0.0 {
                return Err(SceneError::ZeroLengthEdge(a.clone(), b.clone()));
            }
            // Repeated edges collapse into one.
            if adjacency[ia].iter().any(|&(n, _)| n == ib) {
                continue;
            }
            adjacency[ia].push((ib, length));
            adjacency[ib].push((ia, length));
            edge_count += 1;
        }
        for list in &mut adjacency {
            list.sort_by(|x, y| viewpoints[x.0].id.cmp(&viewpoints[y.0].id));
        }
        Ok(Self {
            scan: scan.into(),
            image_root: image_root.into(),
            viewpoints,
            index,
            adjacency,
            edge_count,
        })
    }

    pub fn scan(&self) -> &str {
        &self.scan
    }

    pub fn image_root(&self) -> &Path {
        &self.image_root
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn viewpoints(&self) -> &[Viewpoint] {
        &self.viewpoints
    }

    pub fn viewpoint(&self, id: &str) -> Result<&Viewpoint, SceneError> {
        self.index_of(id).map(|i| &self.viewpoints[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn index_of(&self, id: &str) -> Result<usize, SceneError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| SceneError::UnknownViewpoint(id.to_string()))
    }

    /// Neighbors of `id` with edge lengths, ordered by neighbor id.
    pub fn neighbors(&self, id: &str) -> Result<Vec<(&str, f64)>, SceneError> {
        let i = self.index_of(id)?;
        Ok(self.adjacency[i]
            .iter()
            .map(|&(n, w)| (self.viewpoints[n].id.as_str(), w))
            .collect())
    }

    pub fn edge_length(&self, a: &str, b: &str) -> Result<f64, SceneError> {
        let ia = self.index_of(a)?;
        let ib = self.index_of(b)?;
        self.adjacency[ia]
            .iter()
            .find(|&&(n, _)| n == ib)
            .map(|&(_, w)| w)
            .ok_or_else(|| SceneError::NotAdjacent(a.to_string(), b.to_string()))
    }

    /// Absolute compass bearing of the straight line `from -> to` in degrees,
    /// clockwise from +y.
    pub fn bearing(&self, from: &str, to: &str) -> Result<f64, SceneError> {
        let p = self.viewpoint(from)?.position;
        let q = self.viewpoint(to)?.position;
        Ok(normalize_heading((q[0] - p[0]).atan2(q[1] - p[1]).to_degrees()))
    }

    /// Geodesic distance over edge lengths.
    ///
    /// The search always starts from the endpoint with the smaller id so that
    /// the floating-point accumulation order, and hence the result, is the same
    /// in both directions.
    pub fn shortest_path_length(&self, from: &str, to: &str) -> Result<f64, SceneError> {
        let (a, b) = if from <= to { (from, to) } else { (to, from) };
        let source = self.index_of(a)?;
        let target = self.index_of(b)?;
        if source == target {
            return Ok(0.0);
        }
        let mut dist = vec![f64::INFINITY; self.viewpoints.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Reverse(Entry(0.0, source)));
        while let Some(Reverse(Entry(d, node))) = heap.pop() {
            if node == target {
                return Ok(d);
            }
            if d > dist[node] {
                continue;
            }
            for &(next, w) in &self.adjacency[node] {
                let candidate = d + w;
                if candidate < dist[next] {
                    dist[next] = candidate;
                    heap.push(Reverse(Entry(candidate, next)));
                }
            }
        }
        Err(SceneError::Unreachable {
            from: from.to_string(),
            to: to.to_string(),
        })
    }

    /// Total length of a node sequence whose consecutive entries are adjacent.
    pub fn path_length<S: AsRef<str>>(&self, path: &[S]) -> Result<f64, SceneError> {
        let mut total = 0.0;
        for pair in path.windows(2) {
            total += self.edge_length(pair[0].as_ref(), pair[1].as_ref())?;
        }
        Ok(total)
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Wraps any angle in degrees into `[0, 360)`.
pub fn normalize_heading(degrees: f64) -> f64 {
    let h = degrees.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub viewpoint: String,
    /// Degrees in `[0, 360)`, clockwise from the scene's +y axis.
    pub heading: f64,
}

impl AgentPose {
    pub fn new(viewpoint: impl Into<String>, heading: f64) -> Self {
        Self {
            viewpoint: viewpoint.into(),
            heading: normalize_heading(heading),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    /// Slot relative to the agent's heading; 0 is straight ahead, clockwise.
    pub azimuth_index: usize,
    pub elevation: i32,
    pub image_ref: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOption {
    pub label: char,
    pub target: String,
    /// Degrees clockwise from the current heading, in `[0, 360)`.
    pub relative_bearing: f64,
}

impl ActionOption {
    /// Frontal-ring slot the option is seen through.
    pub fn view_slot(&self) -> usize {
        ((self.relative_bearing / SLOT_DEGREES).round() as usize) % AZIMUTH_SLOTS
    }

    pub fn direction_phrase(&self) -> String {
        let degrees = self.relative_bearing.round() as i64 % 360;
        match Sector::of(self.relative_bearing) {
            Sector::Front if degrees == 0 => "go forward".to_string(),
            Sector::Front => {
                let off = if degrees > 180 { 360 - degrees } else { degrees };
                let side = if degrees > 180 { "left" } else { "right" };
                format!("go forward, slightly {side} ({off} degrees)")
            }
            Sector::Right => format!("turn right {degrees} degrees"),
            Sector::Behind => format!("turn around ({degrees} degrees)"),
            Sector::Left => format!("turn left {} degrees", 360 - degrees),
        }
    }

    /// One-line rendering used in action prompts and navigation history.
    pub fn describe(&self) -> String {
        format!("{} to {}", self.direction_phrase(), self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub viewpoint: String,
    pub options: Vec<ActionOption>,
}

impl ActionSpace {
    /// Stop is implicit and always available.
    pub const INCLUDES_STOP: bool = true;

    pub fn get(&self, label: char) -> Option<&ActionOption> {
        self.options.iter().find(|o| o.label == label)
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }
}

/// Options for every neighbor of the pose's viewpoint, lettered front-first
/// clockwise. Equal bearings are ordered by target id.
pub fn candidate_actions(graph: &SceneGraph, pose: &AgentPose) -> Result<ActionSpace, SceneError> {
    let neighbors = graph.neighbors(&pose.viewpoint)?;
    if neighbors.len() > 26 {
        return Err(SceneError::TooManyNeighbors(pose.viewpoint.clone()));
    }
    let mut options: Vec<ActionOption> = neighbors
        .into_iter()
        .map(|(target, _)| {
            let absolute = graph.bearing(&pose.viewpoint, target)?;
            Ok(ActionOption {
                label: ' ',
                target: target.to_string(),
                relative_bearing: normalize_heading(absolute - pose.heading),
            })
        })
        .collect::<Result<_, SceneError>>()?;
    options.sort_by(|a, b| {
        a.relative_bearing
            .total_cmp(&b.relative_bearing)
            .then_with(|| a.target.cmp(&b.target))
    });
    for (i, option) in options.iter_mut().enumerate() {
        option.label = (b'A' + i as u8) as char;
    }
    Ok(ActionSpace {
        viewpoint: pose.viewpoint.clone(),
        options,
    })
}

/// Pose reached by executing `option`: the agent faces its direction of travel.
pub fn apply_move(graph: &SceneGraph, pose: &AgentPose, option: &ActionOption) -> Result<AgentPose, SceneError> {
    graph.edge_length(&pose.viewpoint, &option.target)?;
    let heading = graph.bearing(&pose.viewpoint, &option.target)?;
    Ok(AgentPose::new(option.target.clone(), heading))
}

/// Absolute image slot that the heading points into.
fn heading_slot(heading: f64) -> usize {
    ((normalize_heading(heading) / SLOT_DEGREES).round() as usize) % AZIMUTH_SLOTS
}

/// Path of a pre-rendered view image.
pub fn view_image_path(root: &Path, viewpoint: &str, elevation: i32, absolute_slot: usize) -> PathBuf {
    root.join(viewpoint).join(format!("{elevation}_{absolute_slot}.jpg"))
}

/// The 36 views around the pose: elevations -30, 0, 30 in that order, each
/// ring starting at the agent's heading and turning clockwise.
pub fn panoramic_observation(graph: &SceneGraph, pose: &AgentPose) -> Result<Vec<ViewDescriptor>, SceneError> {
    graph.viewpoint(&pose.viewpoint)?;
    let offset = heading_slot(pose.heading);
    let mut views = Vec::with_capacity(PANORAMA_SIZE);
    for &elevation in &ELEVATIONS {
        for azimuth_index in 0..AZIMUTH_SLOTS {
            let absolute = (azimuth_index + offset) % AZIMUTH_SLOTS;
            views.push(ViewDescriptor {
                azimuth_index,
                elevation,
                image_ref: view_image_path(graph.image_root(), &pose.viewpoint, elevation, absolute),
                caption: None,
            });
        }
    }
    Ok(views)
}

/// The twelve level views of a panorama, front first and clockwise, each
/// captioned with where it lies relative to the agent.
pub fn frontal_slice(pano: &[ViewDescriptor]) -> Result<Vec<ViewDescriptor>, SceneError> {
    if pano.len() != PANORAMA_SIZE {
        return Err(SceneError::MalformedPanorama(pano.len()));
    }
    let mut level: Vec<ViewDescriptor> = pano.iter().filter(|v| v.elevation == 0).cloned().collect();
    if level.len() != AZIMUTH_SLOTS {
        return Err(SceneError::MalformedPanorama(pano.len()));
    }
    level.sort_by_key(|v| v.azimuth_index);
    for view in &mut level {
        view.caption = Some(orientation_caption(view.azimuth_index));
    }
    Ok(level)
}

/// Caption such as `Image 1 (in front of you)` for a relative azimuth slot.
pub fn orientation_caption(azimuth_index: usize) -> String {
    let bearing = (azimuth_index % AZIMUTH_SLOTS) as f64 * SLOT_DEGREES;
    format!("Image {} ({})", azimuth_index + 1, Sector::of(bearing).phrase())
}

/// Four-way split of relative bearings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sector {
    Front,
    Right,
    Behind,
    Left,
}

impl Sector {
    pub fn of(relative_bearing: f64) -> Self {
        let b = normalize_heading(relative_bearing);
        if !(45.0..315.0).contains(&b) {
            Sector::Front
        } else if b < 135.0 {
            Sector::Right
        } else if b < 225.0 {
            Sector::Behind
        } else {
            Sector::Left
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Sector::Front => "in front of you",
            Sector::Right => "on your right",
            Sector::Behind => "behind you",
            Sector::Left => "on your left",
        }
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}
