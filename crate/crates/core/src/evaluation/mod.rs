//! Evaluation protocol: unit-cube normalization, surface sampling, alignment,
//! Chamfer distances and mask IoU.

pub mod chamfer;
pub mod icp;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use softmesh_tensor::Array;

pub use chamfer::{chamfer, nearest_brute_force, ChamferNorm, NearestNeighbors};
pub use icp::{icp_align, rotation_tape, AlignmentParams, IcpOptions, IcpResult};

use crate::error::{invalid, Error, Result};
use crate::geometry::{sample_surface, TriMesh, Vec3};

/// Bounding-box center and largest extent of `points`.
fn box_frame(points: &[Vec3]) -> Result<(Vec3, f64)> {
    if points.is_empty() {
        return Err(invalid("normalizing an empty point set"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 1e-12) {
        return Err(invalid("cannot normalize a zero-extent shape"));
    }
    Ok(([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0], extent))
}

/// Centers the bounding box at the origin and scales uniformly so the
/// largest side is 1.
pub fn normalize_mesh(mesh: &TriMesh) -> Result<TriMesh> {
    let (c, e) = box_frame(mesh.vertices())?;
    Ok(mesh.map_vertices(|p| [(p[0] - c[0]) / e, (p[1] - c[1]) / e, (p[2] - c[2]) / e]))
}

pub fn normalize_points(points: &[Vec3]) -> Result<Vec<Vec3>> {
    let (c, e) = box_frame(points)?;
    Ok(points.iter().map(|p| [(p[0] - c[0]) / e, (p[1] - c[1]) / e, (p[2] - c[2]) / e]).collect())
}

/// Intersection over union after thresholding; two empty masks give 1.
pub fn mask_iou(a: &Array, b: &Array, threshold: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("mask shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= threshold, y >= threshold);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub const CHAMFER_CONVENTION: &str = "0.5 * (mean nn distance pred->gt + mean nn distance gt->pred), unsquared euclidean";

/// One evaluated prediction, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub category: String,
    pub points: usize,
    pub chamfer_l1_pre: f64,
    pub chamfer_l1_post: f64,
    pub chamfer_l2_pre: f64,
    pub chamfer_l2_post: f64,
    pub alignment: AlignmentParams,
    pub mask_iou: Option<f64>,
    pub convention: String,
}

/// Normalizes both meshes, samples `points` on each and aligns the
/// prediction onto the ground truth.
pub fn evaluate_pair(pred: &TriMesh, gt: &TriMesh, points: usize, seed: u64, opts: &IcpOptions) -> Result<PairRecord> {
    let p = sample_surface(&normalize_mesh(pred)?, points, seed)?;
    let g = sample_surface(&normalize_mesh(gt)?, points, seed ^ 0x9e37_79b9)?;
    let l1_pre = chamfer(&p, &g, ChamferNorm::L1)?;
    let l2_pre = chamfer(&p, &g, ChamferNorm::Squared)?;
    let icp = icp_align(&p, &g, opts)?;
    let l1_post = chamfer(&icp.aligned, &g, ChamferNorm::L1)?;
    Ok(PairRecord {
        id: String::new(),
        category: String::new(),
        points,
        chamfer_l1_pre: l1_pre,
        chamfer_l1_post: l1_post,
        chamfer_l2_pre: l2_pre,
        chamfer_l2_post: icp.best,
        alignment: icp.params,
        mask_iou: None,
        convention: CHAMFER_CONVENTION.to_string(),
    })
}

pub fn write_report(path: &Path, records: &[PairRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<PairRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.display().to_string(),
                msg: format!("record {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Category columns plus the mean, one row with and one without alignment.
pub fn summary_table(records: &[PairRecord]) -> String {
    let mut cats: BTreeMap<&str, Vec<&PairRecord>> = BTreeMap::new();
    for r in records {
        cats.entry(if r.category.is_empty() { "all" } else { &r.category }).or_default().push(r);
    }
    let mean = |rs: &[&PairRecord], f: fn(&PairRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len().max(1) as f64;
    let mut s = format!("{:<22}", "Chamfer-L1");
    for c in cats.keys() {
        let _ = write!(s, " {c:>10}");
    }
    let _ = writeln!(s, " {:>10}", "mean");
    let all: Vec<&PairRecord> = records.iter().collect();
    let rows: [(&str, fn(&PairRecord) -> f64); 2] = [
        ("with alignment", |r| r.chamfer_l1_post),
        ("without alignment", |r| r.chamfer_l1_pre),
    ];
    for (name, f) in rows {
        let _ = write!(s, "{name:<22}");
        for rs in cats.values() {
            let _ = write!(s, " {:>10.4}", mean(rs, f));
        }
        let _ = writeln!(s, " {:>10.4}", mean(&all, f));
    }
    let ious: Vec<f64> = records.iter().filter_map(|r| r.mask_iou).collect();
    if !ious.is_empty() {
        let _ = writeln!(s, "mask IoU {:.4} over {} images", ious.iter().sum::<f64>() / ious.len() as f64, ious.len());
    }
    s
}
