//! Scene bundle directories: one object view with its backgrounds, control
//! points and color model.
//!
//! Layout: `scene.json`, `object.ppm`, `object_mask.ppm`, `controls.txt`,
//! `color_model.txt`, and one or more `background_*.ppm`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackView;
use crate::color::ColorModel;
use crate::compositor::{ProjectionOperands, SceneSpec};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageBuffer};
use crate::tps::{fit_tps, ControlPointSet, TpsModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    /// Object top-left corner in the background, `[x, y]`.
    pub placement: [usize; 2],
    /// Projector image size, `[height, width]`.
    pub patch_size: [usize; 2],
    pub view: String,
    #[serde(default)]
    pub tps_regularization: f64,
}

#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub meta: SceneMeta,
    pub object: ImageBuffer,
    pub object_mask: ImageBuffer,
    pub backgrounds: Vec<ImageBuffer>,
    pub controls: ControlPointSet,
    pub color: ColorModel,
}

fn required(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile { path })
    }
}

impl SceneBundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = required(dir, "scene.json")?;
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.line(), e.to_string()))?;
        let object = load_image(required(dir, "object.ppm")?)?;
        let object_mask = load_image(required(dir, "object_mask.ppm")?)?;
        let controls = ControlPointSet::load(required(dir, "controls.txt")?)?;
        let color = ColorModel::load(required(dir, "color_model.txt")?)?;
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("background_") && n.ends_with(".ppm"))
            })
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::MissingFile {
                path: dir.join("background_*.ppm"),
            });
        }
        let backgrounds = names.iter().map(load_image).collect::<Result<Vec<_>>>()?;
        let bundle = Self {
            meta,
            object,
            object_mask,
            backgrounds,
            controls,
            color,
        };
        bundle.scene(0)?;
        Ok(bundle)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes") + "\n";
        let path = dir.join("scene.json");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
        save_image(&self.object, dir.join("object.ppm"))?;
        save_image(&self.object_mask, dir.join("object_mask.ppm"))?;
        let path = dir.join("controls.txt");
        fs::write(&path, self.controls.to_text()).map_err(|e| Error::io(&path, e))?;
        self.color.save(dir.join("color_model.txt"))?;
        for (i, bg) in self.backgrounds.iter().enumerate() {
            save_image(bg, dir.join(format!("background_{i:02}.ppm")))?;
        }
        Ok(())
    }

    pub fn placement(&self) -> (usize, usize) {
        (self.meta.placement[0], self.meta.placement[1])
    }

    pub fn tps(&self) -> Result<TpsModel> {
        fit_tps(&self.controls, self.meta.tps_regularization)
    }

    /// Operands with a full-frame patch footprint.
    pub fn operands(&self) -> Result<ProjectionOperands> {
        let [h, w] = self.meta.patch_size;
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig("patch size must be positive".into()));
        }
        Ok(ProjectionOperands {
            tps: self.tps()?,
            color: self.color.clone(),
            patch_shape: ImageBuffer::filled(h, w, 1.0),
        })
    }

    pub fn attack_view(&self) -> Result<AttackView> {
        Ok(AttackView {
            label: self.meta.view.clone(),
            object: self.object.clone(),
            object_mask: self.object_mask.clone(),
            placement: self.placement(),
            operands: self.operands()?,
        })
    }

    pub fn scene(&self, background: usize) -> Result<SceneSpec> {
        let bg = self
            .backgrounds
            .get(background)
            .ok_or_else(|| Error::InvalidConfig(format!("bundle has no background {background}")))?;
        SceneSpec::new(self.object.clone(), self.object_mask.clone(), bg.clone(), self.placement())
    }
}

/// Loads every subdirectory of `root` that holds a `scene.json`, in name
/// order.
pub fn load_bundles(root: impl AsRef<Path>) -> Result<Vec<SceneBundle>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingFile {
            path: root.join("*/scene.json"),
        });
    }
    dirs.iter().map(SceneBundle::load).collect()
}
