//! `softmesh`: data generation, training, reconstruction, rendering,
//! evaluation and self-checks.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when
//! the numerics fail (non-finite losses, failed gradient checks).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use softmesh_core::camera::{Camera, Intrinsics};
use softmesh_core::diagnostics::{all_suites, sr_pathology};
use softmesh_core::evaluation::{evaluate_pair, mask_iou, summary_table, write_report};
use softmesh_core::geometry::{read_obj, write_obj};
use softmesh_core::io::png::{read_rgb, write_gray, write_rgb};
use softmesh_core::io::run::METRICS_FILE;
use softmesh_core::io::{generate_synthetic, DatasetDir, PoseRecord, Preset, Run, RunConfig};
use softmesh_core::model::Decoded;
use softmesh_core::rasterizer::{hard_silhouette, solid_image, RenderSettings, Renderer};
use softmesh_core::Error;

#[derive(Parser)]
#[command(name = "softmesh", version, about = "Differentiable mesh reconstruction from unlabelled images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by the commands that use a run config.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run config; unspecified keys come from its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from when no config file is given.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a config key, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path, &self.set),
            (None, Some(p)) => RunConfig::from_preset(p.parse::<Preset>()?, &self.set),
            (None, None) => RunConfig::from_preset(Preset::Desk, &self.set),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (the `data` section of the config).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on a dataset's images. Ground truth is never read.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run directory; defaults to `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many iterations instead of the full schedule.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconstruct images as OBJ mesh, texture PNG and pose JSON.
    Reconstruct {
        #[arg(long)]
        run: PathBuf,
        /// Dataset holding the images to reconstruct.
        #[arg(long, required_unless_present = "image")]
        data: Option<PathBuf>,
        /// Image ids to reconstruct; all dataset images by default.
        #[arg(long = "id")]
        ids: Vec<String>,
        /// A single image file (encoder runs only).
        #[arg(long, conflicts_with = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an OBJ with a texture and pose to PNG.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        /// Texture PNG; plain gray when omitted.
        #[arg(long)]
        texture: Option<PathBuf>,
        /// Pose JSON written by `reconstruct`; otherwise the angle flags.
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        azimuth: f64,
        #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
        elevation: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        roll: f64,
        #[arg(long, default_value_t = 2.732)]
        distance: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1e-4)]
        sigma: f64,
        /// Focal length; `--fov` takes precedence.
        #[arg(long, default_value_t = 3.732)]
        focal: f64,
        /// Full field of view in degrees.
        #[arg(long)]
        fov: Option<f64>,
        /// Background color as r,g,b in [0, 1].
        #[arg(long, default_value = "1,1,1")]
        background: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the soft mask.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Compare predicted meshes (`<pred>/<id>.obj`) with a dataset's ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// JSON lines report.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run every finite-difference gradient suite.
    GradCheck,
    /// Depth-softmax versus layered compositing on a far triangle.
    RasterizerCompare,
}

/// Pose file written by `reconstruct` and read by `render`.
#[derive(Debug, Serialize, Deserialize)]
struct PoseFile {
    id: String,
    selected: usize,
    probs: Vec<f64>,
    pose: PoseRecord,
    candidates: Vec<PoseRecord>,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Numeric(_) => 2,
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invalid(msg) => eprintln!("error: {msg}"),
                Failure::Numeric(msg) => eprintln!("numeric failure: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData { out, config } => gen_data(&out, &config),
        Command::Train {
            data,
            out,
            iterations,
            log_every,
            config,
        } => train(&data, out, iterations, log_every, &config),
        Command::Reconstruct {
            run,
            data,
            ids,
            image,
            out,
        } => reconstruct(&run, data.as_deref(), ids, image.as_deref(), &out),
        Command::Render {
            mesh,
            texture,
            pose,
            azimuth,
            elevation,
            roll,
            distance,
            size,
            sigma,
            focal,
            fov,
            background,
            out,
            mask,
        } => {
            let pose = match pose {
                Some(p) => read_pose(&p)?.pose,
                None => PoseRecord {
                    azimuth_deg: azimuth,
                    elevation_deg: elevation,
                    roll_deg: roll,
                    scale: [1.0; 3],
                    translation: [0.0, 0.0, distance],
                },
            };
            let intrinsics = fov.map_or(Intrinsics::Focal(focal), Intrinsics::FovDegrees);
            let camera = Camera::new(intrinsics, size, size, 1.0, 100.0)?;
            let renderer = Renderer::new(camera, RenderSettings::default().with_sigma(sigma))?;
            render(&renderer, &mesh, texture.as_deref(), &pose, parse_color(&background)?, &out, mask.as_deref())
        }
        Command::Eval { data, pred, out, config } => eval(&data, &pred, &out, &config),
        Command::GradCheck => grad_check(),
        Command::RasterizerCompare => rasterizer_compare(),
    }
}

fn parse_color(s: &str) -> Result<[f64; 3], Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Invalid(format!("bad color {s:?}, expected r,g,b")))?;
    match v[..] {
        [r, g, b] => Ok([r, g, b]),
        _ => Err(Failure::Invalid(format!("bad color {s:?}, expected r,g,b"))),
    }
}

fn gen_data(out: &Path, config: &ConfigArgs) -> Outcome {
    let cfg = config.load()?;
    let data = generate_synthetic(&cfg.data)?;
    data.save(out)?;
    println!(
        "wrote {} images of {} objects ({:?}) to {}",
        data.images().len(),
        cfg.data.instances,
        cfg.data.family,
        out.display()
    );
    Ok(())
}

fn train(data: &Path, out: Option<PathBuf>, iterations: Option<usize>, log_every: usize, config: &ConfigArgs) -> Outcome {
    let cfg = config.load()?;
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let images = DatasetDir::open(data)?.load_images()?;
    let mut run = Run::new(cfg, &images)?;
    fs::create_dir_all(&out)?;
    let mut metrics = String::new();
    let budget = iterations.unwrap_or(run.trainer.scheduler.total_budget());
    log::info!("training on {} images for {budget} iterations", images.len());
    let result = run.train(&images, iterations, |m| {
        metrics.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        metrics.push('\n');
        if log_every > 0 && (m.iteration + 1) % log_every == 0 {
            log::info!("{}", m.log_line());
        }
    });
    fs::write(out.join(METRICS_FILE), metrics)?;
    result?;
    run.save(&out)?;
    println!("saved run to {}", out.display());
    Ok(())
}

fn write_reconstruction(run: &Run, id: &str, d: &Decoded, out: &Path) -> Outcome {
    write_obj(&out.join(format!("{id}.obj")), &d.mesh)?;
    write_rgb(&out.join(format!("{id}.texture.png")), &d.texture)?;
    let pose = PoseFile {
        id: id.to_string(),
        selected: d.selected,
        probs: d.probs.clone(),
        pose: PoseRecord::from_pose(&d.pose()),
        candidates: d.poses.iter().map(PoseRecord::from_pose).collect(),
    };
    let json = serde_json::to_string_pretty(&pose).expect("pose serializes");
    fs::write(out.join(format!("{id}.pose.json")), json + "\n")?;
    let renderer = Renderer::new(
        run.config.model.camera()?,
        RenderSettings::default().with_sigma(run.config.train.sigma),
    )?;
    let (img, _, _) = renderer.render_mesh(&d.posed_mesh(), &d.texture, &d.background)?;
    write_rgb(&out.join(format!("{id}.render.png")), &img)?;
    Ok(())
}

fn reconstruct(run_dir: &Path, data: Option<&Path>, ids: Vec<String>, image: Option<&Path>, out: &Path) -> Outcome {
    let run = Run::load(run_dir)?;
    fs::create_dir_all(out)?;
    if let Some(path) = image {
        let img = read_rgb(path)?;
        let d = run.reconstruct_images(std::slice::from_ref(&img))?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        write_reconstruction(&run, &id, &d[0], out)?;
        println!("reconstructed {id} into {}", out.display());
        return Ok(());
    }
    let dir = DatasetDir::open(data.expect("clap requires --data or --image"))?;
    let images = dir.load_images()?;
    let ids = if ids.is_empty() { images.ids().to_vec() } else { ids };
    for chunk in ids.chunks(16) {
        let decoded = run.reconstruct_ids(chunk, Some(&images))?;
        for (id, d) in chunk.iter().zip(&decoded) {
            write_reconstruction(&run, id, d, out)?;
        }
    }
    println!("reconstructed {} images into {}", ids.len(), out.display());
    Ok(())
}

fn read_pose(path: &Path) -> Result<PoseFile, Failure> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn render(
    renderer: &Renderer,
    mesh: &Path,
    texture: Option<&Path>,
    pose: &PoseRecord,
    background: [f64; 3],
    out: &Path,
    mask_out: Option<&Path>,
) -> Outcome {
    let mesh = read_obj(mesh)?;
    let texture = match texture {
        Some(p) => read_rgb(p)?,
        None => solid_image(1, 1, [0.7; 3]),
    };
    let cam = renderer.camera;
    let bg = solid_image(cam.height, cam.width, background);
    let (img, mask, diag) = renderer.render_mesh(&pose.to_pose().apply_mesh(&mesh), &texture, &bg)?;
    write_rgb(out, &img)?;
    if let Some(p) = mask_out {
        write_gray(p, &mask)?;
    }
    if diag.degenerate_faces > 0 || diag.truncated_pixels > 0 {
        log::info!(
            "{} degenerate faces skipped, {} pixels with more faces than layers",
            diag.degenerate_faces,
            diag.truncated_pixels
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(data: &Path, pred: &Path, out: &Path, config: &ConfigArgs) -> Outcome {
    let cfg = config.load()?;
    let dir = DatasetDir::open(data)?;
    let gt = dir.load_ground_truth()?;
    let mut records = Vec::new();
    let mut missing = 0;
    for (r, gt_mask) in gt.records().iter().zip(gt.masks()) {
        let obj = pred.join(format!("{}.obj", r.id));
        if !obj.exists() {
            missing += 1;
            continue;
        }
        let pred_mesh = read_obj(&obj)?;
        let gt_mesh = &gt
            .mesh(&r.mesh_id)
            .ok_or_else(|| Failure::Invalid(format!("ground truth mesh {} missing", r.mesh_id)))?
            .mesh;
        // with a predicted pose both shapes are compared in the view's camera
        // frame, since a learned canonical frame is only defined up to a
        // rotation about the vertical axis
        let pose_path = pred.join(format!("{}.pose.json", r.id));
        let pose = if pose_path.exists() { Some(read_pose(&pose_path)?.pose.to_pose()) } else { None };
        let (p, g) = match pose {
            Some(pose) => (pose.apply_mesh(&pred_mesh), r.pose.to_pose().apply_mesh(gt_mesh)),
            None => (pred_mesh, gt_mesh.clone()),
        };
        let mut rec = evaluate_pair(&p, &g, cfg.eval.points, cfg.eval.seed, &cfg.eval.icp)?;
        rec.id = r.id.clone();
        rec.category = serde_json::to_value(r.shape)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        if pose.is_some() {
            let (h, w) = (gt_mask.shape()[0], gt_mask.shape()[1]);
            let cam = cfg.model.camera()?.with_size(w, h);
            let m = hard_silhouette(cam, &p)?;
            rec.mask_iou = Some(mask_iou(&m, gt_mask, 0.5)?);
        }
        log::info!("{}: chamfer-L1 {:.4} (before alignment {:.4})", rec.id, rec.chamfer_l1_post, rec.chamfer_l1_pre);
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Failure::Invalid(format!("no predictions for any ground-truth image in {}", pred.display())));
    }
    if missing > 0 {
        log::warn!("{missing} ground-truth images have no prediction and were skipped");
    }
    write_report(out, &records)?;
    print!("{}", summary_table(&records));
    println!("report: {}", out.display());
    Ok(())
}

fn grad_check() -> Outcome {
    let results = all_suites()?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += !r.passed() as usize;
        println!(
            "{status:<4} {:<9} {:<34} rel err {:.2e} < {:.0e}  ({} components, {:.2}s)",
            r.group, r.name, r.max_rel_err, r.tolerance, r.checked, r.seconds
        );
    }
    println!("{} of {} suites passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient suites failed")));
    }
    Ok(())
}

fn rasterizer_compare() -> Outcome {
    let r = sr_pathology()?;
    println!("face depth {:.3} (normalized {:.0e}), far plane 100", r.depth, r.normalized_depth);
    println!("single layer, occupancy {:.0e}: |C_SR - face color| = {:.3e}", r.occupancy, r.composite_error);
    println!(
        "rendered: min face occupancy {:.3e}, max |C_SR - face color| = {:.3e}",
        r.min_rendered_occupancy, r.render_error
    );
    println!("|dL_pix/dV| layered {:.6e}", r.layered_grad);
    println!("|dL_pix/dV| softras {:.6e}", r.softras_grad);
    println!("ratio layered/softras {:.3e}", r.ratio());
    if r.ratio() >= 1e6 && r.composite_error < 1e-2 && r.render_error < 1e-2 {
        Ok(())
    } else {
        Err(Failure::Numeric("pathology not reproduced".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_errors_map_to_exit_two() {
        let loss = Error::NonFiniteLoss { iteration: 3, stage: 1, sigma: 1e-4, detail: String::new() };
        assert_eq!(Failure::from(loss).exit_code(), 2);
        let near = Error::BehindNearPlane { index: 0, depth: 0.5, near: 1.0 };
        assert_eq!(Failure::from(near).exit_code(), 1);
    }
}
