//! Trajectory markers on per-floor top-down maps.
//!
//! The start of the trajectory is drawn red, intermediate viewpoints blue with
//! their step number, and the current viewpoint green labelled `now`. Each
//! floor gets its own copy of the source image; the source is never touched.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const START_RGB: [u8; 3] = [255, 0, 0];
pub const INTERMEDIATE_RGB: [u8; 3] = [0, 0, 255];
pub const CURRENT_RGB: [u8; 3] = [0, 255, 0];
pub const OUTLINE_RGB: [u8; 3] = [0, 0, 0];
pub const LABEL_RGB: [u8; 3] = [0, 0, 0];
pub const MARKER_RADIUS: i64 = 8;
pub const OUTLINE_WIDTH: i64 = 2;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed floor-map file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("cannot decode image {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
    #[error("viewpoint {0} has no coordinates on any floor map")]
    MissingCoordinate(String),
    #[error("viewpoint {id} at ({x}, {y}) lies outside the {width}x{height} map of floor {floor}")]
    OutOfBounds {
        id: String,
        floor: i64,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },
    #[error("empty trajectory")]
    EmptyHistory,
    #[error("cannot encode png: {0}")]
    Encode(image::ImageError),
}

/// Metadata for one floor's top-down image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorMap {
    pub floor: i64,
    pub image_ref: PathBuf,
    pub pixel_coords: BTreeMap<String, (i64, i64)>,
}

#[derive(Deserialize)]
struct FloorFile {
    #[serde(default)]
    #[allow(dead_code)]
    scan: String,
    floors: Vec<FloorRecord>,
}

#[derive(Deserialize)]
struct FloorRecord {
    floor: i64,
    image: PathBuf,
    coords: BTreeMap<String, (i64, i64)>,
}

/// Reads floor-map metadata, sorted by floor. Relative image paths are
/// resolved against the metadata file's directory.
pub fn load_floor_maps(path: impl AsRef<Path>) -> Result<Vec<FloorMap>, AnnotateError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| AnnotateError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: FloorFile = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    let mut maps: Vec<FloorMap> = file
        .floors
        .into_iter()
        .map(|r| FloorMap {
            floor: r.floor,
            image_ref: if r.image.is_relative() {
                dir.join(r.image)
            } else {
                r.image
            },
            pixel_coords: r.coords,
        })
        .collect();
    maps.sort_by_key(|m| m.floor);
    Ok(maps)
}

/// A floor map with its source image decoded.
#[derive(Debug, Clone)]
pub struct FloorImage {
    pub map: FloorMap,
    pub pixels: RgbImage,
}

impl FloorImage {
    pub fn load(map: FloorMap) -> Result<Self, AnnotateError> {
        let pixels = image::open(&map.image_ref)
            .map_err(|source| AnnotateError::Decode {
                path: map.image_ref.clone(),
                source,
            })?
            .to_rgb8();
        Ok(Self { map, pixels })
    }

    pub fn load_all(maps: Vec<FloorMap>) -> Result<Vec<Self>, AnnotateError> {
        let mut floors: Vec<Self> = maps.into_iter().map(Self::load).collect::<Result<_, _>>()?;
        floors.sort_by_key(|f| f.map.floor);
        Ok(floors)
    }

    fn locate(&self, id: &str) -> Result<Option<(i64, i64)>, AnnotateError> {
        let Some(&(x, y)) = self.map.pixel_coords.get(id) else {
            return Ok(None);
        };
        let (width, height) = self.pixels.dimensions();
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return Err(AnnotateError::OutOfBounds {
                id: id.to_string(),
                floor: self.map.floor,
                x,
                y,
                width,
                height,
            });
        }
        Ok(Some((x, y)))
    }
}

/// Checks that every id has a marker position on some floor.
pub fn check_coverage<'a>(floors: &[FloorImage], ids: impl IntoIterator<Item = &'a str>) -> Result<(), AnnotateError> {
    for id in ids {
        let mut found = false;
        for floor in floors {
            if floor.locate(id)?.is_some() {
                found = true;
                break;
            }
        }
        if !found {
            return Err(AnnotateError::MissingCoordinate(id.to_string()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerRole {
    Start,
    Intermediate,
    Current,
}

impl MarkerRole {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            MarkerRole::Start => START_RGB,
            MarkerRole::Intermediate => INTERMEDIATE_RGB,
            MarkerRole::Current => CURRENT_RGB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub viewpoint: String,
    pub role: MarkerRole,
    pub label: Option<String>,
    pub pixel: (i64, i64),
}

#[derive(Debug, Clone)]
pub struct MarkedFloor {
    pub floor: i64,
    pub markers: Vec<Marker>,
    pub image: RgbImage,
}

impl MarkedFloor {
    pub fn to_png(&self) -> Result<Vec<u8>, AnnotateError> {
        let mut out = Cursor::new(Vec::new());
        self.image
            .write_to(&mut out, ImageFormat::Png)
            .map_err(AnnotateError::Encode)?;
        Ok(out.into_inner())
    }
}

/// Annotated copies of every floor, ascending by floor.
#[derive(Debug, Clone)]
pub struct MarkedMapSet {
    /// Number of moves made before this rendering.
    pub step_index: usize,
    pub floors: Vec<MarkedFloor>,
}

impl MarkedMapSet {
    pub fn marker_count(&self) -> usize {
        self.floors.iter().map(|f| f.markers.len()).sum()
    }
}

/// Draws the trajectory `history` (oldest first) ending at `current`.
///
/// Each distinct viewpoint gets one marker. The current viewpoint wins over
/// the start, which wins over intermediate visits; an intermediate viewpoint
/// visited more than once carries the number of its latest visit.
pub fn annotate_trajectory<S: AsRef<str>>(
    floors: &[FloorImage],
    history: &[S],
    current: &str,
) -> Result<MarkedMapSet, AnnotateError> {
    if history.is_empty() {
        return Err(AnnotateError::EmptyHistory);
    }
    let start = history[0].as_ref();
    let mut roles: BTreeMap<&str, (MarkerRole, Option<String>)> = BTreeMap::new();
    for (i, id) in history.iter().enumerate().skip(1) {
        roles.insert(id.as_ref(), (MarkerRole::Intermediate, Some(i.to_string())));
    }
    roles.insert(start, (MarkerRole::Start, None));
    roles.insert(current, (MarkerRole::Current, Some("now".to_string())));

    let mut placed: BTreeMap<&str, (usize, (i64, i64))> = BTreeMap::new();
    for &id in roles.keys() {
        let mut hit = None;
        for (fi, floor) in floors.iter().enumerate() {
            if let Some(px) = floor.locate(id)? {
                hit = Some((fi, px));
                break;
            }
        }
        let hit = hit.ok_or_else(|| AnnotateError::MissingCoordinate(id.to_string()))?;
        placed.insert(id, hit);
    }

    let mut marked: Vec<MarkedFloor> = floors
        .iter()
        .map(|f| MarkedFloor {
            floor: f.map.floor,
            markers: Vec::new(),
            image: f.pixels.clone(),
        })
        .collect();
    // Paint order: intermediate, start, current, so the current marker is on top.
    for role in [MarkerRole::Intermediate, MarkerRole::Start, MarkerRole::Current] {
        for (&id, (r, label)) in &roles {
            if *r != role {
                continue;
            }
            let (fi, pixel) = placed[id];
            let target = &mut marked[fi];
            draw_marker(&mut target.image, pixel, role.rgb());
            if let Some(text) = label {
                draw_label(&mut target.image, pixel, text);
            }
            target.markers.push(Marker {
                viewpoint: id.to_string(),
                role,
                label: label.clone(),
                pixel,
            });
        }
    }
    Ok(MarkedMapSet {
        step_index: history.len() - 1,
        floors: marked,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(rgb));
    }
}

fn fill_disc(img: &mut RgbImage, (cx, cy): (i64, i64), radius: i64, rgb: [u8; 3]) {
    let r2 = radius * radius;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= r2 {
                put(img, cx + dx, cy + dy, rgb);
            }
        }
    }
}

fn draw_marker(img: &mut RgbImage, center: (i64, i64), rgb: [u8; 3]) {
    fill_disc(img, center, MARKER_RADIUS + OUTLINE_WIDTH, OUTLINE_RGB);
    fill_disc(img, center, MARKER_RADIUS, rgb);
}

const GLYPH_W: i64 = 5;
const GLYPH_H: i64 = 7;
const GLYPH_SCALE: i64 = 2;

// 5x7 bitmaps, one row per byte, high bit of the low five = leftmost column.
fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        _ => return None,
    })
}

/// Text centred horizontally just above the marker.
fn draw_label(img: &mut RgbImage, (cx, cy): (i64, i64), text: &str) {
    let advance = (GLYPH_W + 1) * GLYPH_SCALE;
    let width = advance * text.chars().count() as i64 - GLYPH_SCALE;
    let left = cx - width / 2;
    let top = cy - MARKER_RADIUS - OUTLINE_WIDTH - 2 - GLYPH_H * GLYPH_SCALE;
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let x0 = left + i as i64 * advance;
        for (row, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                for sy in 0..GLYPH_SCALE {
                    for sx in 0..GLYPH_SCALE {
                        put(
                            img,
                            x0 + col * GLYPH_SCALE + sx,
                            top + row as i64 * GLYPH_SCALE + sy,
                            LABEL_RGB,
                        );
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floor(level: i64, coords: &[(&str, (i64, i64))]) -> FloorImage {
        FloorImage {
            map: FloorMap {
                floor: level,
                image_ref: PathBuf::from(format!("floor{level}.png")),
                pixel_coords: coords.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            },
            pixels: RgbImage::from_pixel(120, 80, Rgb([255, 255, 255])),
        }
    }

    fn rgb_at(f: &MarkedFloor, (x, y): (i64, i64)) -> [u8; 3] {
        f.image.get_pixel(x as u32, y as u32).0
    }

    #[test]
    fn three_point_trajectory_colors() {
        let floors = [floor(0, &[("A", (20, 40)), ("B", (60, 40)), ("C", (100, 40))])];
        let set = annotate_trajectory(&floors, &["A", "B", "C"], "C").unwrap();
        let f = &set.floors[0];
        assert_eq!(rgb_at(f, (20, 40)), START_RGB);
        assert_eq!(rgb_at(f, (60, 40)), INTERMEDIATE_RGB);
        assert_eq!(rgb_at(f, (100, 40)), CURRENT_RGB);
        // outline ring
        assert_eq!(rgb_at(f, (20 + MARKER_RADIUS + 1, 40)), OUTLINE_RGB);
        let b = f.markers.iter().find(|m| m.viewpoint == "B").unwrap();
        assert_eq!(b.label.as_deref(), Some("1"));
        let c = f.markers.iter().find(|m| m.viewpoint == "C").unwrap();
        assert_eq!(c.label.as_deref(), Some("now"));
        assert_eq!(set.step_index, 2);
        // source untouched
        assert_eq!(floors[0].pixels.get_pixel(20, 40).0, [255, 255, 255]);
    }

    #[test]
    fn start_is_green_at_step_zero() {
        let floors = [floor(0, &[("A", (20, 40))])];
        let set = annotate_trajectory(&floors, &["A"], "A").unwrap();
        assert_eq!(set.marker_count(), 1);
        assert_eq!(set.floors[0].markers[0].role, MarkerRole::Current);
        assert_eq!(rgb_at(&set.floors[0], (20, 40)), CURRENT_RGB);
    }

    #[test]
    fn revisits_keep_one_marker_per_viewpoint() {
        let floors = [floor(0, &[("A", (20, 40)), ("B", (60, 40)), ("C", (100, 40))])];
        let set = annotate_trajectory(&floors, &["A", "B", "C", "B", "A"], "A").unwrap();
        assert_eq!(set.marker_count(), 3);
        let b = set.floors[0].markers.iter().find(|m| m.viewpoint == "B").unwrap();
        assert_eq!(b.label.as_deref(), Some("3"));
    }

    #[test]
    fn two_floors_get_their_own_markers() {
        let floors = [
            floor(0, &[("A", (20, 40)), ("B", (60, 40))]),
            floor(1, &[("C", (20, 40)), ("D", (60, 40))]),
        ];
        let set = annotate_trajectory(&floors, &["A", "B", "C", "D"], "D").unwrap();
        let ids = |i: usize| {
            set.floors[i]
                .markers
                .iter()
                .map(|m| m.viewpoint.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(0).len(), 2);
        assert!(ids(0).iter().all(|v| v == "A" || v == "B"));
        assert!(ids(1).iter().all(|v| v == "C" || v == "D"));
        assert_eq!(
            set.floors
                .iter()
                .flat_map(|f| &f.markers)
                .filter(|m| m.role == MarkerRole::Current)
                .count(),
            1
        );
    }

    #[test]
    fn missing_coordinate_names_viewpoint() {
        let floors = [floor(0, &[("A", (20, 40))])];
        let err = annotate_trajectory(&floors, &["A", "Q"], "Q").unwrap_err();
        assert!(matches!(&err, AnnotateError::MissingCoordinate(id) if id == "Q"));
        assert!(check_coverage(&floors, ["A"]).is_ok());
    }

    #[test]
    fn out_of_bounds_coordinate_is_rejected() {
        let floors = [floor(0, &[("A", (500, 40))])];
        assert!(matches!(
            annotate_trajectory(&floors, &["A"], "A"),
            Err(AnnotateError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn labels_are_drawn_above_markers() {
        let floors = [floor(0, &[("A", (20, 40)), ("B", (60, 40))])];
        let set = annotate_trajectory(&floors, &["A", "B"], "B").unwrap();
        let f = &set.floors[0];
        let band =
            (40 - MARKER_RADIUS - OUTLINE_WIDTH - 2 - GLYPH_H * GLYPH_SCALE)..(40 - MARKER_RADIUS - OUTLINE_WIDTH);
        let inked = band
            .flat_map(|y| (30..90).map(move |x| (x, y)))
            .filter(|&p| rgb_at(f, p) == LABEL_RGB)
            .count();
        assert!(inked > 20, "label pixels: {inked}");
    }

    #[test]
    fn rendering_is_byte_identical() {
        let floors = [floor(0, &[("A", (20, 40)), ("B", (60, 40)), ("C", (100, 40))])];
        let a = annotate_trajectory(&floors, &["A", "B", "C"], "C").unwrap();
        let b = annotate_trajectory(&floors, &["A", "B", "C"], "C").unwrap();
        assert_eq!(a.floors[0].to_png().unwrap(), b.floors[0].to_png().unwrap());
    }
}
