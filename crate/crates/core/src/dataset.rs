//! Directory layouts on disk.
//!
//! Dense and video data use the Sintel layout: `<root>/{clean,albedo,shading}/<scene>/frame_NNNN.png`,
//! with optional `<root>/flow/<scene>/frame_NNNN.flo` (frame N to N+1) and
//! `<root>/occlusions/<scene>/frame_NNNN.png`. Sparse data is a flat directory of
//! `<id>.png` images next to `<id>.json` judgement files.

use std::path::{Path, PathBuf};

use crate::error::{contract, Result};
use crate::imageio::{load_occlusion, read_flo, read_image, write_flo, write_png, ColorSpace, FlowField, Image};
use crate::judgements::JudgementSet;
use crate::refine::{SequenceFrame, Triplet};
use crate::synth::{DenseSample, VideoFrame};

pub const IMAGE_DIR: &str = "clean";
pub const ALBEDO_DIR: &str = "albedo";
pub const SHADING_DIR: &str = "shading";
pub const FLOW_DIR: &str = "flow";
pub const OCCLUSION_DIR: &str = "occlusions";

pub fn frame_stem(t: usize) -> String {
    format!("frame_{:04}", t + 1)
}

#[derive(Clone, Debug)]
pub struct SceneFrame {
    pub stem: String,
    pub image: Image,
    pub albedo: Image,
    pub shading: Image,
    /// Maps this frame onto the next one.
    pub flow: Option<FlowField>,
    /// Per-pixel flow validity (true = visible).
    pub occlusion: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    pub frames: Vec<SceneFrame>,
}

impl Scene {
    pub fn sequence(&self) -> Vec<SequenceFrame> {
        self.frames
            .iter()
            .map(|f| SequenceFrame {
                triplet: Triplet { image: f.image.clone(), albedo: f.albedo.clone(), shading: f.shading.clone() },
                flow: f.flow.clone(),
                occlusion: f.occlusion.clone(),
            })
            .collect()
    }

    pub fn from_video(name: &str, frames: &[VideoFrame]) -> Scene {
        Scene {
            name: name.into(),
            frames: frames
                .iter()
                .enumerate()
                .map(|(t, f)| SceneFrame {
                    stem: frame_stem(t),
                    image: f.sample.image.clone(),
                    albedo: f.sample.albedo.clone(),
                    shading: f.sample.shading.clone(),
                    flow: f.flow.clone(),
                    occlusion: None,
                })
                .collect(),
        }
    }

    pub fn from_sequence(name: &str, frames: &[SequenceFrame]) -> Scene {
        Scene {
            name: name.into(),
            frames: frames
                .iter()
                .enumerate()
                .map(|(t, f)| SceneFrame {
                    stem: frame_stem(t),
                    image: f.triplet.image.clone(),
                    albedo: f.triplet.albedo.clone(),
                    shading: f.triplet.shading.clone(),
                    flow: f.flow.clone(),
                    occlusion: f.occlusion.clone(),
                })
                .collect(),
        }
    }
}

impl SceneFrame {
    /// Dense sample with single-channel shading.
    pub fn dense(&self) -> DenseSample {
        let shading = if self.shading.channels == 1 {
            self.shading.clone()
        } else {
            Image::from_plane(self.shading.width, self.shading.height, self.shading.gray(), self.shading.space).expect("sized")
        };
        DenseSample { image: self.image.to_rgb(), albedo: self.albedo.to_rgb(), shading }
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() == want_dirs {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        return contract(format!("missing directory {}", p.display()));
    }
    Ok(())
}

pub fn load_sintel(root: &Path) -> Result<Vec<Scene>> {
    for d in [IMAGE_DIR, ALBEDO_DIR, SHADING_DIR] {
        require_dir(&root.join(d))?;
    }
    let mut scenes = Vec::new();
    for scene_dir in sorted_entries(&root.join(IMAGE_DIR), true)? {
        let name = scene_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut frames = Vec::new();
        for p in sorted_entries(&scene_dir, false)? {
            if p.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let s = stem(&p);
            let layer = |dir: &str| read_image(&root.join(dir).join(&name).join(format!("{s}.png")));
            let flow_path = root.join(FLOW_DIR).join(&name).join(format!("{s}.flo"));
            let flow = if flow_path.is_file() { Some(read_flo(&flow_path)?) } else { None };
            let occ_path = root.join(OCCLUSION_DIR).join(&name).join(format!("{s}.png"));
            let occlusion = match (&flow, occ_path.is_file()) {
                (Some(f), true) => Some(load_occlusion(&occ_path, Some(f))?),
                _ => None,
            };
            frames.push(SceneFrame { image: read_image(&p)?, albedo: layer(ALBEDO_DIR)?, shading: layer(SHADING_DIR)?, flow, occlusion, stem: s });
        }
        if let Some(f) = frames.last_mut() {
            f.flow = None;
            f.occlusion = None;
        }
        if !frames.is_empty() {
            scenes.push(Scene { name, frames });
        }
    }
    if scenes.is_empty() {
        return contract(format!("no frames under {}", root.join(IMAGE_DIR).display()));
    }
    Ok(scenes)
}

/// Writes layers as 16-bit PNG, flows as .flo and visibility as an 8-bit occlusion PNG.
pub fn write_sintel(root: &Path, scenes: &[Scene]) -> Result<()> {
    for scene in scenes {
        for d in [IMAGE_DIR, ALBEDO_DIR, SHADING_DIR] {
            std::fs::create_dir_all(root.join(d).join(&scene.name))?;
        }
        for f in &scene.frames {
            let file = format!("{}.png", f.stem);
            write_png(&f.image, &root.join(IMAGE_DIR).join(&scene.name).join(&file), 16)?;
            write_png(&f.albedo, &root.join(ALBEDO_DIR).join(&scene.name).join(&file), 16)?;
            write_png(&f.shading, &root.join(SHADING_DIR).join(&scene.name).join(&file), 16)?;
            if let Some(flow) = &f.flow {
                let dir = root.join(FLOW_DIR).join(&scene.name);
                std::fs::create_dir_all(&dir)?;
                write_flo(flow, &dir.join(format!("{}.flo", f.stem)))?;
            }
            if let Some(mask) = &f.occlusion {
                let dir = root.join(OCCLUSION_DIR).join(&scene.name);
                std::fs::create_dir_all(&dir)?;
                let (w, h) = (f.image.width, f.image.height);
                let data = mask.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect();
                write_png(&Image::new(w, h, 1, data, ColorSpace::Srgb)?, &dir.join(&file), 8)?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct JudgedImage {
    pub id: String,
    pub image: Image,
    pub judgements: JudgementSet,
}

/// Every `<id>.png` in `dir` that has a sibling `<id>.json`.
pub fn load_judged_images(dir: &Path) -> Result<Vec<JudgedImage>> {
    require_dir(dir)?;
    let mut out = Vec::new();
    for p in sorted_entries(dir, false)? {
        if p.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let json = p.with_extension("json");
        if json.is_file() {
            out.push(JudgedImage { id: stem(&p), image: read_image(&p)?.to_rgb(), judgements: JudgementSet::load(&json)? });
        }
    }
    if out.is_empty() {
        return contract(format!("no <id>.png / <id>.json pairs in {}", dir.display()));
    }
    Ok(out)
}

pub fn write_judged_images(dir: &Path, items: &[JudgedImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for it in items {
        write_png(&it.image, &dir.join(format!("{}.png", it.id)), 16)?;
        it.judgements.save(&dir.join(format!("{}.json", it.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sintel_sequence, video_sequence};

    #[test]
    fn sintel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sintel_sequence(3, 3, 16, 16);
        let scene = Scene::from_sequence("alley", &seq);
        write_sintel(dir.path(), &[scene.clone(), Scene::from_video("pan", &video_sequence(1, 2, 8, 8))]).unwrap();
        let back = load_sintel(dir.path()).unwrap();
        assert_eq!(back.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["alley", "pan"]);
        let a = &back[0];
        assert_eq!(a.frames.len(), 3);
        for (f, g) in a.frames.iter().zip(&scene.frames) {
            assert_eq!(f.stem, g.stem);
            let err = f.image.data.iter().zip(&g.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 65535.0 + 1e-12);
            assert_eq!(f.occlusion, g.occlusion);
            assert_eq!(f.flow.as_ref().map(|f| f.u.clone()), g.flow.as_ref().map(|f| f.u.clone()));
        }
        assert!(a.frames[2].flow.is_none());
        assert!(back[1].frames[0].occlusion.is_none() && back[1].frames[0].flow.is_some());
    }

    #[test]
    fn missing_layers_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_sintel(dir.path()).is_err());
        assert!(load_judged_images(dir.path()).is_err());
    }
}
