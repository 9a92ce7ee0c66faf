//! Dataset manifests and PNG output.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use sdgan_core::synth::{Color, Dataset, Position, Scene, SceneSpec, ShapeKind, Size, RESOLUTIONS};
use sdgan_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: usize,
    pub split: String,
    pub class_id: usize,
    pub shape: String,
    pub fg: String,
    pub bg: String,
    pub size: String,
    pub position: String,
    pub captions: Vec<String>,
    /// Image paths relative to the dataset directory, one per resolution.
    pub images: Vec<String>,
}

impl Record {
    fn of(scene: &Scene, split: &str) -> Self {
        let s = &scene.spec;
        Record {
            id: scene.id,
            split: split.to_string(),
            class_id: s.class_id(),
            shape: s.shape.name().into(),
            fg: s.fg.name().into(),
            bg: s.bg.name().into(),
            size: s.size.name().into(),
            position: s.position.name().into(),
            captions: scene.captions.clone(),
            images: RESOLUTIONS.iter().map(|r| image_path(scene.id, *r)).collect(),
        }
    }

    fn scene(&self) -> std::result::Result<Scene, String> {
        let bad = |what: &str, v: &str| format!("scene {}: unknown {what} `{v}`", self.id);
        let spec = SceneSpec::new(
            ShapeKind::parse(&self.shape).ok_or_else(|| bad("shape", &self.shape))?,
            Color::parse(&self.fg).ok_or_else(|| bad("colour", &self.fg))?,
            Color::parse(&self.bg).ok_or_else(|| bad("colour", &self.bg))?,
            Size::parse(&self.size).ok_or_else(|| bad("size", &self.size))?,
            Position::parse(&self.position).ok_or_else(|| bad("position", &self.position))?,
        )
        .map_err(|e| format!("scene {}: {e}", self.id))?;
        if spec.class_id() != self.class_id {
            return Err(format!("scene {}: class_id {} disagrees with its attributes", self.id, self.class_id));
        }
        if self.captions.len() < 2 {
            return Err(format!("scene {}: fewer than two captions", self.id));
        }
        Ok(Scene {
            id: self.id,
            spec,
            captions: self.captions.clone(),
        })
    }
}

fn image_path(id: usize, res: usize) -> String {
    format!("images/{id:05}_{res}.png")
}

/// Writes the manifest and every render as PNG.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).at(&dir.join("images"))?;
    let path = dir.join(MANIFEST);
    let file = std::fs::File::create(&path).at(&path)?;
    let mut w = BufWriter::new(file);
    let mut scenes: Vec<(&Scene, &str)> = ds.train.iter().map(|s| (s, "train")).chain(ds.test.iter().map(|s| (s, "test"))).collect();
    scenes.sort_by_key(|(s, _)| s.id);
    for (scene, split) in scenes {
        let rec = Record::of(scene, split);
        serde_json::to_writer(&mut w, &rec).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w).at(&path)?;
        for (img, rel) in scene.render_all()?.iter().zip(&rec.images) {
            write_png(img, &dir.join(rel))?;
        }
    }
    w.flush().at(&path)
}

/// Reads a manifest back into a dataset; scenes are rendered from their attributes.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let file = std::fs::File::open(&path).at(&path)?;
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        train_classes: Vec::new(),
        test_classes: Vec::new(),
    };
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.at(&path)?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| CliError::Data(format!("{}: line {}: {m}", path.display(), n + 1));
        let rec: Record = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let scene = rec.scene().map_err(at)?;
        let (scenes, classes) = match rec.split.as_str() {
            "train" => (&mut ds.train, &mut ds.train_classes),
            "test" => (&mut ds.test, &mut ds.test_classes),
            other => return Err(at(format!("unknown split `{other}`"))),
        };
        if !classes.contains(&rec.class_id) {
            classes.push(rec.class_id);
        }
        scenes.push(scene);
    }
    ds.train_classes.sort_unstable();
    ds.test_classes.sort_unstable();
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(CliError::Data(format!("{}: needs both train and test scenes", path.display())));
    }
    Ok(ds)
}

fn to_u8(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// `[3×R×R]` in `[-1, 1]` as 8-bit RGB.
pub fn to_rgb(img: &Tensor) -> image::RgbImage {
    let r = img.shape()[1];
    let d = img.data();
    image::RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let at = |c: usize| to_u8(d[(c * r + y as usize) * r + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    })
}

pub fn save_rgb(img: &image::RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))
}

pub fn write_png(img: &Tensor, path: &Path) -> Result<()> {
    save_rgb(&to_rgb(img), path)
}

/// Tiles rows of images, each upscaled by nearest neighbour to `cell` pixels,
/// with a 2-pixel white gutter.
pub fn grid(rows: &[Vec<Tensor>], cell: u32) -> image::RgbImage {
    let gap = 2;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (w, h) = (cols * (cell + gap) + gap, rows.len() as u32 * (cell + gap) + gap);
    let mut out = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    for (i, row) in rows.iter().enumerate() {
        for (j, img) in row.iter().enumerate() {
            let small = to_rgb(img);
            let k = cell / small.width();
            for y in 0..cell {
                for x in 0..cell {
                    let p = *small.get_pixel((x / k).min(small.width() - 1), (y / k).min(small.height() - 1));
                    out.put_pixel(gap + j as u32 * (cell + gap) + x, gap + i as u32 * (cell + gap) + y, p);
                }
            }
        }
    }
    out
}

pub fn ensure_dir(p: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(p).at(p)?;
    Ok(p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_hits_the_ends() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(7.0), 255);
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sdgan_core::synth::build_dataset(64, 3, 3).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        let img = image::open(dir.path().join(image_path(0, 32))).unwrap().to_rgb8();
        let scene = ds.scenes().find(|s| s.id == 0).unwrap();
        assert_eq!(img, to_rgb(&sdgan_core::synth::render(&scene.spec, 32).unwrap()));
    }
}
