//! Procedural scenes of colored shapes with exact box annotations, the
//! train / held-out category split, and the line-delimited dataset file.
//!
//! Dataset file layout (UTF-8, one JSON object per line):
//!
//! ```text
//! {"schema_version":1,"format":"ovdet-scenes","num_scenes":N,"split":{..},"provenance":".."}
//! {"scene_id":0,"seed":..,"width":64,"height":64,"pixels":"<base64 RGB bytes>","annotations":[..]}
//! ...
//! ```
//!
//! Reading fails unless exactly `num_scenes` well-formed scene lines follow
//! the header.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tensor::Tensor;
use crate::textspace::Category;

pub const IMAGE_SIZE: usize = 64;
pub const SCHEMA_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 200;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub train_combos: Vec<Category>,
    pub heldout_combos: Vec<Category>,
}

impl Default for SplitSpec {
    /// Four shapes by four colors; the diagonal pairs are held out so every
    /// shape and every color is still seen in three training pairs.
    fn default() -> Self {
        let shapes: Vec<String> = ["circle", "square", "triangle", "cross"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let colors: Vec<String> = ["red", "green", "blue", "yellow"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut train_combos = Vec::new();
        let mut heldout_combos = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            for (j, c) in colors.iter().enumerate() {
                let cat = Category::new(s, c);
                if i == j {
                    heldout_combos.push(cat);
                } else {
                    train_combos.push(cat);
                }
            }
        }
        Self {
            shapes,
            colors,
            train_combos,
            heldout_combos,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for c in self.train_combos.iter().chain(&self.heldout_combos) {
            if !self.shapes.contains(&c.shape) || !self.colors.contains(&c.color) {
                return Err(Error::UnknownCategory(c.to_string()));
            }
            if shape_kind(&c.shape).is_none() {
                return Err(Error::config("split.shapes", format!("cannot render shape {}", c.shape)));
            }
            if color_rgb(&c.color).is_none() {
                return Err(Error::config("split.colors", format!("cannot render color {}", c.color)));
            }
        }
        let overlap = self.contaminated_with(&self.heldout_combos);
        if !overlap.is_empty() {
            return Err(Error::SplitContamination(overlap));
        }
        for s in &self.shapes {
            if !self.train_combos.iter().any(|c| &c.shape == s) {
                return Err(Error::config("split.train_combos", format!("shape {s} never trained")));
            }
        }
        for col in &self.colors {
            if !self.train_combos.iter().any(|c| &c.color == col) {
                return Err(Error::config("split.train_combos", format!("color {col} never trained")));
            }
        }
        Ok(())
    }

    /// Members of `cats` that are training combos.
    pub fn contaminated_with(&self, cats: &[Category]) -> Vec<String> {
        cats.iter()
            .filter(|c| self.train_combos.contains(c))
            .map(|c| c.to_string())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

fn shape_kind(name: &str) -> Option<ShapeKind> {
    Some(match name {
        "circle" => ShapeKind::Circle,
        "square" => ShapeKind::Square,
        "triangle" => ShapeKind::Triangle,
        "cross" => ShapeKind::Cross,
        _ => return None,
    })
}

fn color_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [0.86, 0.16, 0.16],
        "green" => [0.16, 0.78, 0.24],
        "blue" => [0.16, 0.27, 0.86],
        "yellow" => [0.90, 0.82, 0.16],
        _ => return None,
    })
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        f64::from(self.pixels[(y * self.width + x) * 3 + c]) / 255.0
    }

    /// Non-overlapping `patch × patch` tiles flattened to rows of
    /// `patch * patch * 3` values in `[0, 1]`, tiles in row-major order.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || self.width % patch != 0 || self.height % patch != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image does not tile into {patch}px patches",
                self.width, self.height
            )));
        }
        let (gw, gh) = (self.width / patch, self.height / patch);
        let dim = patch * patch * 3;
        let mut data = Vec::with_capacity(gw * gh * dim);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    for x in 0..patch {
                        for c in 0..3 {
                            data.push(self.value(px * patch + x, py * patch + y, c));
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(gw * gh, dim, data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub scene_id: u64,
    pub seed: u64,
}

/// A shape instance in pixel units. The box is `[cx - r, cy - r, cx + r, cy + r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub category: Category,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl PlacedShape {
    pub fn bbox(&self) -> BBox {
        let s = IMAGE_SIZE as f64;
        BBox::new(
            (self.cx - self.radius) / s,
            (self.cy - self.radius) / s,
            (self.cx + self.radius) / s,
            (self.cy + self.radius) / s,
        )
    }

    fn contains(&self, kind: ShapeKind, x: f64, y: f64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        match kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            ShapeKind::Cross => {
                let t = 0.35 * r;
                (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
            }
        }
    }
}

/// Draws `shapes` in order over a background and returns the quantized image.
/// `noise` is the half-range of the per-pixel background jitter in 8-bit steps.
pub fn rasterize(shapes: &[PlacedShape], noise: u8, rng: &mut impl Rng) -> Image {
    let n = IMAGE_SIZE;
    let mut buf = vec![0.0f64; n * n * 3];
    for v in buf.iter_mut() {
        let jitter = if noise == 0 {
            0
        } else {
            rng.random_range(-i32::from(noise)..=i32::from(noise))
        };
        *v = f64::from(128 + jitter) / 255.0;
    }
    for shape in shapes {
        let kind = shape_kind(&shape.category.shape).expect("validated shape");
        let rgb = color_rgb(&shape.category.color).expect("validated color");
        let x0 = (shape.cx - shape.radius).floor().max(0.0) as usize;
        let y0 = (shape.cy - shape.radius).floor().max(0.0) as usize;
        let x1 = ((shape.cx + shape.radius).ceil() as usize).min(n);
        let y1 = ((shape.cy + shape.radius).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        if shape.contains(kind, px, py) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let px = &mut buf[(y * n + x) * 3..(y * n + x) * 3 + 3];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + rgb[c] * a;
                }
            }
        }
    }
    Image {
        width: n,
        height: n,
        pixels: buf.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
    }
}

/// One scene with 1 to 5 objects drawn from `split`'s combos. Fully
/// determined by `seed`.
pub fn render_scene(spec: &SplitSpec, split: Split, scene_id: u64, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let pool = match split {
        Split::Train => &spec.train_combos,
        Split::Heldout => &spec.heldout_combos,
    };
    if pool.is_empty() {
        return Err(Error::config("split", "no categories to render"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=5usize);
    let mut placed: Vec<PlacedShape> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count {
        if attempts == PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailure {
                objects: count,
                attempts,
            });
        }
        attempts += 1;
        // Radii 5..=11 px in half-pixel steps; centers on whole pixels.
        let radius = 5.0 + 0.5 * f64::from(rng.random_range(0..=12u32));
        let lo = radius.ceil() as u32;
        let hi = IMAGE_SIZE as u32 - lo;
        let cx = f64::from(rng.random_range(lo..=hi));
        let cy = f64::from(rng.random_range(lo..=hi));
        let category = pool[rng.random_range(0..pool.len())].clone();
        let cand = PlacedShape {
            category,
            cx,
            cy,
            radius,
        };
        let b = cand.bbox();
        if placed.iter().all(|p| iou(&p.bbox(), &b) < 0.3) {
            placed.push(cand);
        }
    }
    let image = rasterize(&placed, 12, &mut rng);
    Ok(Scene {
        image,
        annotations: placed
            .iter()
            .map(|p| Annotation {
                bbox: p.bbox(),
                category: p.category.clone(),
            })
            .collect(),
        scene_id,
        seed,
    })
}

/// `count` scenes with per-scene seeds derived from `master_seed`.
pub fn render_dataset(spec: &SplitSpec, split: Split, count: usize, master_seed: u64) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|id| render_scene(spec, split, id, scene_seed(master_seed, split, id)))
        .collect()
}

pub fn scene_seed(master_seed: u64, split: Split, scene_id: u64) -> u64 {
    let tag = match split {
        Split::Train => 0x5452_4149_4e00_0000u64,
        Split::Heldout => 0x4845_4c44_4f55_5400u64,
    };
    splitmix(master_seed ^ tag ^ splitmix(scene_id))
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub format: String,
    pub num_scenes: usize,
    pub split: SplitSpec,
    pub split_kind: Split,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: u64,
    seed: u64,
    width: usize,
    height: usize,
    pixels: String,
    annotations: Vec<Annotation>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<serde_json::Value>,
}

pub fn write_dataset(
    path: &Path,
    scenes: &[Scene],
    split: &SplitSpec,
    split_kind: Split,
    provenance: &str,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        schema_version: SCHEMA_VERSION,
        format: "ovdet-scenes".into(),
        num_scenes: scenes.len(),
        split: split.clone(),
        split_kind,
        provenance: provenance.to_string(),
    };
    serde_json::to_writer(&mut w, &header).map_err(io::Error::other)?;
    w.write_all(b"\n")?;
    for s in scenes {
        let rec = SceneRecord {
            scene_id: s.scene_id,
            seed: s.seed,
            width: s.image.width,
            height: s.image.height,
            pixels: B64.encode(&s.image.pixels),
            annotations: s.annotations.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn invalid(msg: String) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, msg))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "empty dataset file")))??;
    let probe: VersionProbe =
        serde_json::from_str(&first).map_err(|e| invalid(format!("dataset header: {e}")))?;
    match probe.schema_version {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(u64::from(SCHEMA_VERSION)) => {}
        other => {
            return Err(Error::SchemaVersionMismatch {
                expected: SCHEMA_VERSION,
                found: other.map_or_else(|| "missing".to_string(), |v| v.to_string()),
            })
        }
    }
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| invalid(format!("dataset header: {e}")))?;
    let mut scenes = Vec::with_capacity(header.num_scenes);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if i >= header.num_scenes {
            if line.trim().is_empty() {
                continue;
            }
            return Err(invalid(format!("more than {} scene records", header.num_scenes)));
        }
        let rec: SceneRecord =
            serde_json::from_str(&line).map_err(|e| invalid(format!("scene record {i}: {e}")))?;
        let pixels = B64
            .decode(rec.pixels.as_bytes())
            .map_err(|e| invalid(format!("scene record {i}: {e}")))?;
        if pixels.len() != rec.width * rec.height * 3 {
            return Err(invalid(format!("scene record {i}: pixel payload has wrong length")));
        }
        scenes.push(Scene {
            image: Image {
                width: rec.width,
                height: rec.height,
                pixels,
            },
            annotations: rec.annotations,
            scene_id: rec.scene_id,
            seed: rec.seed,
        });
    }
    if scenes.len() != header.num_scenes {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("expected {} scenes, found {}", header.num_scenes, scenes.len()),
        )));
    }
    Ok((header, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_is_well_posed() {
        let s = SplitSpec::default();
        s.validate().unwrap();
        assert_eq!(s.train_combos.len(), 12);
        assert_eq!(s.heldout_combos.len(), 4);
    }

    #[test]
    fn contaminated_split_is_rejected() {
        let mut s = SplitSpec::default();
        s.train_combos.push(s.heldout_combos[0].clone());
        assert!(matches!(s.validate(), Err(Error::SplitContamination(_))));
    }

    #[test]
    fn same_seed_same_scene() {
        let s = SplitSpec::default();
        let a = render_scene(&s, Split::Train, 0, 42).unwrap();
        let b = render_scene(&s, Split::Train, 0, 42).unwrap();
        assert_eq!(a, b);
        assert!((1..=5).contains(&a.annotations.len()));
    }

    #[test]
    fn annotation_invariants_hold() {
        let s = SplitSpec::default();
        for sc in render_dataset(&s, Split::Train, 200, 5).unwrap() {
            for (i, a) in sc.annotations.iter().enumerate() {
                assert!(s.train_combos.contains(&a.category));
                assert!(a.bbox.is_valid());
                for b in &sc.annotations[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) < 0.3);
                }
            }
        }
        for sc in render_dataset(&s, Split::Heldout, 50, 5).unwrap() {
            assert!(sc.annotations.iter().all(|a| s.heldout_combos.contains(&a.category)));
        }
    }

    fn rendered_extent(shape: &PlacedShape) -> [usize; 4] {
        let img = rasterize(std::slice::from_ref(shape), 0, &mut ChaCha8Rng::seed_from_u64(0));
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                let bg = (0..3).all(|c| img.pixels[(y * img.width + x) * 3 + c] == 128);
                if !bg {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        [x0, y0, x1, y1]
    }

    #[test]
    fn boxes_bound_rendered_shapes() {
        let tol = 1.0 / IMAGE_SIZE as f64;
        for shape in ["circle", "square", "triangle", "cross"] {
            for &(cx, cy, r) in &[(20.0, 30.0, 7.0), (40.0, 25.0, 10.5), (12.0, 50.0, 5.0)] {
                let p = PlacedShape {
                    category: Category::new(shape, "blue"),
                    cx,
                    cy,
                    radius: r,
                };
                let ext = rendered_extent(&p);
                let b = p.bbox();
                let got = ext.map(|v| v as f64 / IMAGE_SIZE as f64);
                for (g, w) in got.iter().zip(b.to_array()) {
                    assert!((g - w).abs() <= tol, "{shape} r={r}: extent {got:?} box {b:?}");
                }
            }
        }
    }

    #[test]
    fn patches_tile_the_image() {
        let sc = render_scene(&SplitSpec::default(), Split::Train, 0, 1).unwrap();
        let p = sc.image.patches(8).unwrap();
        assert_eq!(p.shape(), [64, 192]);
        assert_eq!(p.get(9, 0), sc.image.value(8, 8, 0));
        assert!(sc.image.patches(7).is_err());
    }

    #[test]
    fn dataset_round_trip_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SplitSpec::default();
        let scenes = render_dataset(&spec, Split::Train, 100, 11).unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &scenes, &spec, Split::Train, "test").unwrap();
        let (h, back) = read_dataset(&path).unwrap();
        assert_eq!(back, scenes);
        assert_eq!(h.split, spec);

        let empty = dir.path().join("e.jsonl");
        write_dataset(&empty, &[], &spec, Split::Train, "").unwrap();
        assert!(read_dataset(&empty).unwrap().1.is_empty());

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.jsonl");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(&cut), Err(Error::Io(_))));
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&cut, lines[..50].join("\n")).unwrap();
        assert!(matches!(read_dataset(&cut), Err(Error::Io(_))));

        let bad = dir.path().join("v.jsonl");
        std::fs::write(&bad, text.replacen("\"schema_version\":1", "\"schema_version\":2", 1)).unwrap();
        assert!(matches!(read_dataset(&bad), Err(Error::SchemaVersionMismatch { .. })));
    }
}
