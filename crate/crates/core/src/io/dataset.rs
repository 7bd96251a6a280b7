//! Datasets on disk.
//!
//! ```text
//! <root>/manifest.txt            id<TAB>image path<TAB>ground-truth id or "-"
//! <root>/images/<id>.png
//! <root>/ground_truth.jsonl      one GtRecord per line
//! <root>/gt/masks/<id>.png
//! <root>/gt/meshes/<mesh id>.obj and <mesh id>.png (texture)
//! ```
//!
//! Training only ever needs [`DatasetDir::load_images`], which reads the
//! manifest and the images and nothing under `gt/` or the sidecar.
//! Ground truth comes from the separate [`DatasetDir::load_ground_truth`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use softmesh_tensor::Array;

use super::png;
use super::synthetic::ShapeKind;
use crate::error::{invalid, Error, Result};
use crate::geometry::{read_obj, write_obj, TriMesh, Vec3};
use crate::model::Pose;

pub const MANIFEST: &str = "manifest.txt";
pub const SIDECAR: &str = "ground_truth.jsonl";
const HEADER: &str = "# softmesh dataset 1";

/// Object-to-camera pose with angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub roll_deg: f64,
    pub scale: Vec3,
    pub translation: Vec3,
}

impl PoseRecord {
    pub fn to_pose(&self) -> Pose {
        Pose {
            scale: self.scale,
            azimuth: self.azimuth_deg.to_radians(),
            elevation: self.elevation_deg.to_radians(),
            roll: self.roll_deg.to_radians(),
            translation: self.translation,
        }
    }

    pub fn from_pose(p: &Pose) -> Self {
        PoseRecord {
            azimuth_deg: p.azimuth.to_degrees(),
            elevation_deg: p.elevation.to_degrees(),
            roll_deg: p.roll.to_degrees(),
            scale: p.scale,
            translation: p.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub id: String,
    pub mesh_id: String,
    pub shape: ShapeKind,
    pub pose: PoseRecord,
}

/// A canonical-frame mesh with its texture.
#[derive(Clone, Debug, PartialEq)]
pub struct GtMesh {
    pub mesh: TriMesh,
    pub texture: Array,
}

/// Equally sized `[H, W, 3]` images with their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    ids: Vec<String>,
    images: Vec<Array>,
}

impl ImageSet {
    pub fn new(ids: Vec<String>, images: Vec<Array>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(invalid(format!("{} ids for {} images", ids.len(), images.len())));
        }
        if let Some(first) = images.first() {
            if first.shape().len() != 3 || first.shape()[2] != 3 {
                return Err(invalid(format!("images must be [H, W, 3], got {:?}", first.shape())));
            }
            if let Some((i, a)) = images.iter().enumerate().find(|(_, a)| a.shape() != first.shape()) {
                return Err(invalid(format!("image {} has shape {:?}, expected {:?}", ids[i], a.shape(), first.shape())));
            }
        }
        Ok(ImageSet { ids, images })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[Array] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Side length of the (square) images, 0 when empty.
    pub fn image_size(&self) -> usize {
        self.images.first().map_or(0, |a| a.shape()[0])
    }
}

/// Per-image records and masks plus the canonical meshes they refer to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    records: Vec<GtRecord>,
    masks: Vec<Array>,
    meshes: BTreeMap<String, GtMesh>,
}

impl GroundTruth {
    pub fn push(&mut self, record: GtRecord, mask: Array) {
        self.records.push(record);
        self.masks.push(mask);
    }

    pub fn insert_mesh(&mut self, id: String, mesh: GtMesh) {
        self.meshes.insert(id, mesh);
    }

    pub fn records(&self) -> &[GtRecord] {
        &self.records
    }

    pub fn masks(&self) -> &[Array] {
        &self.masks
    }

    pub fn meshes(&self) -> &BTreeMap<String, GtMesh> {
        &self.meshes
    }

    pub fn find(&self, id: &str) -> Option<(&GtRecord, &Array)> {
        let i = self.records.iter().position(|r| r.id == id)?;
        Some((&self.records[i], &self.masks[i]))
    }

    pub fn mesh(&self, mesh_id: &str) -> Option<&GtMesh> {
        self.meshes.get(mesh_id)
    }
}

/// Images plus optional ground truth, kept behind separate accessors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: ImageSet,
    ground_truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(images: ImageSet, ground_truth: Option<GroundTruth>) -> Self {
        Dataset { images, ground_truth }
    }

    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root.join("images"))?;
        let mut manifest = format!("{HEADER}\n# id\timage\tground truth\n");
        let gt_ids: Vec<&str> = self
            .ground_truth
            .iter()
            .flat_map(|g| g.records.iter().map(|r| r.id.as_str()))
            .collect();
        for (id, img) in self.images.ids.iter().zip(&self.images.images) {
            check_id(id)?;
            let rel = format!("images/{id}.png");
            png::write_rgb(&root.join(&rel), img)?;
            let gt = if gt_ids.contains(&id.as_str()) { id.as_str() } else { "-" };
            writeln!(manifest, "{id}\t{rel}\t{gt}").unwrap();
        }
        fs::write(root.join(MANIFEST), manifest)?;
        if let Some(gt) = &self.ground_truth {
            fs::create_dir_all(root.join("gt/masks"))?;
            fs::create_dir_all(root.join("gt/meshes"))?;
            let mut lines = String::new();
            for (r, m) in gt.records.iter().zip(&gt.masks) {
                check_id(&r.id)?;
                png::write_gray(&root.join(format!("gt/masks/{}.png", r.id)), m)?;
                lines.push_str(&serde_json::to_string(r).map_err(|e| invalid(e.to_string()))?);
                lines.push('\n');
            }
            fs::write(root.join(SIDECAR), lines)?;
            for (id, m) in &gt.meshes {
                check_id(id)?;
                write_obj(&root.join(format!("gt/meshes/{id}.obj")), &m.mesh)?;
                png::write_rgb(&root.join(format!("gt/meshes/{id}.png")), &m.texture)?;
            }
        }
        Ok(())
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id == "-" || id.contains(['\t', '\n', '/', '\\']) {
        return Err(invalid(format!("unusable id {id:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub image: PathBuf,
    pub ground_truth: Option<String>,
}

/// A dataset directory whose manifest has been read.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let err = |ln: usize, msg: &str| Error::Format {
            path: path.display().to_string(),
            msg: format!("line {ln}: {msg}"),
        };
        if text.lines().next() != Some(HEADER) {
            return Err(err(1, "missing dataset header"));
        }
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err(i + 1, "expected id, image and ground-truth columns"));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                image: PathBuf::from(f[1]),
                ground_truth: (f[2] != "-").then(|| f[2].to_string()),
            });
        }
        Ok(DatasetDir {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn load_images(&self) -> Result<ImageSet> {
        let images = self
            .entries
            .iter()
            .map(|e| png::read_rgb(&self.root.join(&e.image)))
            .collect::<Result<Vec<_>>>()?;
        ImageSet::new(self.entries.iter().map(|e| e.id.clone()).collect(), images)
    }

    /// Reads the sidecar, masks and meshes. For evaluation only.
    pub fn load_ground_truth(&self) -> Result<GroundTruth> {
        let path = self.root.join(SIDECAR);
        let text = fs::read_to_string(&path)?;
        let mut gt = GroundTruth::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: GtRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: {e}", i + 1),
            })?;
            check_id(&r.id)?;
            check_id(&r.mesh_id)?;
            let mask = png::read_gray(&self.root.join(format!("gt/masks/{}.png", r.id)))?;
            if !gt.meshes.contains_key(&r.mesh_id) {
                let mesh = read_obj(&self.root.join(format!("gt/meshes/{}.obj", r.mesh_id)))?;
                let texture = png::read_rgb(&self.root.join(format!("gt/meshes/{}.png", r.mesh_id)))?;
                gt.insert_mesh(r.mesh_id.clone(), GtMesh { mesh, texture });
            }
            gt.push(r, mask);
        }
        for e in &self.entries {
            if let Some(g) = &e.ground_truth {
                if gt.find(g).is_none() {
                    return Err(invalid(format!("manifest entry {} refers to missing ground truth {g}", e.id)));
                }
            }
        }
        Ok(gt)
    }
}
