use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use xmreg_core::dataio::config::{Manifest, ManifestEntry, RunConfig};
use xmreg_core::dataio::image::{read_rgb, resize_bilinear, write_ppm};
use xmreg_core::dataio::{load_maps, read_point_cloud, save_maps, write_point_cloud, DataError};
use xmreg_core::evaluation::{
    ablate_topk, evaluate as run_evaluation, load_frame, run_manifest_text, synthetic_config, write_ablation_table,
    write_frames_csv, write_timing_csv, ABLATION_REPS,
};
use xmreg_core::features::{extract_builtin, extract_lidar, load_features, load_features_masked, luma, save_features};
use xmreg_core::matching::{build_correspondences, match_features, write_correspondences_csv, MatchHeads, PatchSelection};
use xmreg_core::metrics::{write_histograms, TABLE_HEADER};
use xmreg_core::pipeline::{register_with_config, PipelineError};
use xmreg_core::pose::PoseError;
use xmreg_core::projection::{project_to_maps, write_pgm, ProjectionMaps};
use xmreg_core::{Intrinsics64, PointCloud64};

use crate::{viz, ConfigArgs, EXIT_INPUT, EXIT_REGISTRATION};

#[derive(Debug)]
pub enum CliError {
    /// The pipeline ran but found no pose.
    Registration(PoseError),
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Registration(_) => EXIT_REGISTRATION,
            Self::Input(_) => EXIT_INPUT,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Registration(e) => write!(f, "registration failed: {e}"),
            Self::Input(m) => f.write_str(m),
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Input(e.to_string())
            }
        }
    )*};
}

input_error!(
    DataError,
    PipelineError,
    std::io::Error,
    image::ImageError,
    xmreg_core::features::FeatureError,
    xmreg_core::matching::MatchError,
    xmreg_core::projection::ProjectionError,
    xmreg_core::metrics::MetricsError
);

type CliResult = Result<(), CliError>;

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_previews(dir: &Path, maps: &ProjectionMaps<f64>, cfg: &RunConfig) -> CliResult {
    write_pgm(&dir.join("range.pgm"), &maps.range_preview(cfg.range_max))?;
    write_pgm(&dir.join("reflectance.pgm"), &maps.reflectance_preview())?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Scan of little-endian f32 (x, y, z, reflectance) records.
    #[arg(long)]
    cloud: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn project(a: ProjectArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    let cloud: PointCloud64 = read_point_cloud(&a.cloud)?;
    let maps = project_to_maps(&cloud, &cfg.projection())?;
    create_dir(&a.out)?;
    save_maps(&a.out.join("maps.pprt"), &maps)?;
    write_previews(&a.out, &maps, &cfg)?;
    write_text(&a.out.join("run_manifest.txt"), &run_manifest_text("project", &cfg, None))?;
    println!(
        "maps {}x{}, {} points, occupancy {:.1}%",
        maps.width(),
        maps.height(),
        cloud.len(),
        100.0 * maps.occupancy_fraction()
    );
    Ok(())
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false, args = ["image", "cloud"])]
pub struct ExtractArgs {
    /// Camera image (PNG or PPM); resized to the configured image size.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Scan; projected with the configured map size first.
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
    /// Also save the projection maps of `--cloud` here.
    #[arg(long)]
    maps_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn extract(a: ExtractArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    let feats = if let Some(img) = &a.image {
        let img = read_rgb(img)?;
        let img = resize_bilinear(&img, cfg.image_width as u32, cfg.image_height as u32);
        extract_builtin::<f64>(&luma(&img), cfg.d_patch, cfg.d_pixel)?
    } else {
        let cloud: PointCloud64 = read_point_cloud(a.cloud.as_deref().expect("clap group"))?;
        let maps = project_to_maps(&cloud, &cfg.projection())?;
        if let Some(p) = &a.maps_out {
            save_maps(p, &maps)?;
        }
        extract_lidar(&maps, &cfg.projection(), cfg.d_patch, cfg.d_pixel)?
    };
    save_features(&a.out, &feats)?;
    println!(
        "pixel features {}x{}x{}, patch features {}x{}x{}",
        feats.pixel().width(),
        feats.pixel().height(),
        feats.pixel().dim(),
        feats.patch().width(),
        feats.patch().height(),
        feats.patch().dim()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    camera_features: PathBuf,
    #[arg(long)]
    lidar_features: PathBuf,
    /// Scan the LiDAR features were computed from.
    #[arg(long)]
    cloud: PathBuf,
    /// Saved projection maps; recomputed from the scan when omitted.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Output correspondence CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn match_cmd(a: MatchArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    let cloud: PointCloud64 = read_point_cloud(&a.cloud)?;
    let maps = match &a.maps {
        Some(p) => load_maps(p, cloud.len())?,
        None => project_to_maps(&cloud, &cfg.projection())?,
    };
    let camera = load_features::<f64>(&a.camera_features)?;
    let lidar = load_features_masked::<f64>(&a.lidar_features, Some(&maps.occupancy()))?;
    for (name, n) in [("camera", camera.renormalized), ("lidar", lidar.renormalized)] {
        if n > 0 {
            eprintln!("warning: {n} {name} feature vectors re-normalized");
        }
    }
    let heads = MatchHeads::identity_for(&camera.features);
    let out = match_features(&camera.features, &lidar.features, &heads, &PatchSelection::TopK(cfg.top_k))?;
    let set = build_correspondences(&out.pixel_matches, &maps, &cloud)?;
    write_with(&a.out, |w| write_correspondences_csv(w, &set))?;
    println!("{} correspondences ({} on empty LiDAR pixels dropped)", set.len(), set.dropped);
    Ok(())
}

/// Either a synthetic seed or a KITTI-layout file triple.
#[derive(Debug, Args)]
pub struct PairArgs {
    /// Synthetic scene seed.
    #[arg(long, conflicts_with_all = ["cloud", "image", "calib"])]
    synthetic: Option<u64>,
    /// Corrupted patch pairs of the synthetic scene.
    #[arg(long, default_value_t = 0, requires = "synthetic")]
    outliers: usize,
    #[arg(long, requires_all = ["image", "calib"])]
    cloud: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Seed of the applied perturbation.
    #[arg(long, default_value_t = 0)]
    perturb_seed: u64,
}

impl PairArgs {
    fn entry(&self) -> Result<ManifestEntry, CliError> {
        match (self.synthetic, &self.cloud, &self.image, &self.calib) {
            (Some(seed), ..) => Ok(ManifestEntry::Synthetic {
                seed,
                outliers: self.outliers,
            }),
            (None, Some(cloud), Some(image), Some(calib)) => Ok(ManifestEntry::Kitti {
                cloud: cloud.clone(),
                image: image.clone(),
                calib: calib.clone(),
                perturb_seed: self.perturb_seed,
            }),
            _ => Err(CliError::Input(
                "give --synthetic SEED or all of --cloud, --image and --calib".into(),
            )),
        }
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn register(a: RegisterArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    let entry = a.pair.entry()?;
    let inputs = load_frame::<f64>(&entry, &cfg)?;
    let reg = register_with_config(&inputs, &cfg)?;
    create_dir(&a.out)?;
    let manifest = Manifest {
        entries: vec![entry],
    };
    write_text(&a.out.join("run_manifest.txt"), &run_manifest_text("register", &cfg, Some(&manifest)))?;
    write_with(&a.out.join("correspondences.csv"), |w| write_correspondences_csv(w, &reg.correspondences))?;
    write_text(&a.out.join("gt_pose.txt"), &format!("{}\n", inputs.gt_extrinsics))?;
    let mask = reg.estimate.as_ref().map(|e| e.inlier_mask.clone()).unwrap_or_default();
    let canvas = viz::match_canvas(&inputs.image, &inputs.maps, &reg.correspondences, &mask);
    write_ppm(&a.out.join("matches.ppm"), &canvas)?;
    let est = match reg.estimate {
        Ok(ref e) => e,
        Err(ref e) => return Err(CliError::Registration(e.clone())),
    };
    write_text(&a.out.join("pose.txt"), &format!("{est}\n"))?;
    let err = reg.errors(&inputs.gt_extrinsics, &cfg)?;
    println!(
        "{} correspondences, {} inliers, mean reprojection error {:.3e} px",
        reg.correspondences.len(),
        est.inlier_count(),
        est.mean_reprojection_error
    );
    println!("rte {:.6e} m, rre {:.6e} deg, success {}", err.rte, err.rre, err.success);
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Frame list: `synthetic seed=N [outliers=M]` or
    /// `kitti cloud=P image=P calib=P [perturb_seed=N]` per line.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn evaluate(a: EvaluateArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    let manifest = Manifest::load(&a.manifest)?;
    let ev = run_evaluation::<f64>(&manifest, &cfg)?;
    create_dir(&a.out)?;
    write_with(&a.out.join("frames.csv"), |w| write_frames_csv(w, &ev.frames))?;
    write_with(&a.out.join("timing.csv"), |w| write_timing_csv(w, &ev.frames))?;
    let errors: Vec<_> = ev.frames.iter().map(|f| f.errors).collect();
    write_with(&a.out.join("histogram.csv"), |w| write_histograms(w, &errors))?;
    let report = format!("{TABLE_HEADER}\n{}\n", ev.stats.table_row());
    write_text(&a.out.join("report.txt"), &report)?;
    write_text(&a.out.join("run_manifest.txt"), &run_manifest_text("evaluate", &cfg, Some(&manifest)))?;
    print!("{report}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene seed (`--seed` is the RANSAC seed).
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    /// Corrupted patch pairs.
    #[arg(long, default_value_t = 0)]
    outliers: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn synth(a: SynthArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    let scene = synthetic_config(&cfg, a.scene_seed, a.outliers).generate::<f64>()?;
    let d = &a.out;
    create_dir(d)?;
    write_point_cloud(&d.join("cloud.bin"), &scene.cloud)?;
    save_maps(&d.join("maps.pprt"), &scene.maps)?;
    write_previews(d, &scene.maps, &cfg)?;
    write_ppm(&d.join("image.ppm"), &scene.image)?;
    save_features(&d.join("camera_features.pprt"), &scene.camera_features)?;
    save_features(&d.join("lidar_features.pprt"), &scene.lidar_features)?;
    write_text(&d.join("gt_pose.txt"), &format!("{}\n", scene.gt_extrinsics))?;
    write_text(&d.join("calibration.txt"), &format!("{}\n", scene.calibration))?;
    write_text(&d.join("perturbation.txt"), &format!("{}\n", scene.perturbation))?;
    write_text(&d.join("intrinsics.txt"), &intrinsics_line(&scene.intrinsics))?;
    write_with(&d.join("gt_correspondences.csv"), |w| scene.gt.write_csv(w))?;
    let manifest = Manifest {
        entries: vec![ManifestEntry::Synthetic {
            seed: a.scene_seed,
            outliers: a.outliers,
        }],
    };
    write_text(&d.join("run_manifest.txt"), &run_manifest_text("synth", &cfg, Some(&manifest)))?;
    println!(
        "{} points, occupancy {:.1}%, {} ground-truth correspondences, {} corrupted patches",
        scene.cloud.len(),
        100.0 * scene.maps.occupancy_fraction(),
        scene.gt.len(),
        scene.corrupted.len()
    );
    Ok(())
}

fn intrinsics_line(k: &Intrinsics64) -> String {
    format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 200, 300, 400, 500, 600])]
    ks: Vec<usize>,
    /// Timing repetitions per frame and k (minimum kept).
    #[arg(long, default_value_t = ABLATION_REPS)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn ablate(a: AblateArgs) -> CliResult {
    let cfg = a.config.resolve()?;
    let manifest = Manifest::load(&a.manifest)?;
    let rows = ablate_topk::<f64>(&manifest, &cfg, &a.ks, a.reps)?;
    create_dir(&a.out)?;
    let mut table = Vec::new();
    write_ablation_table(&mut table, &rows)?;
    let table = String::from_utf8(table).expect("ascii table");
    write_text(&a.out.join("ablation.txt"), &table)?;
    let mut record = run_manifest_text("ablate-topk", &cfg, Some(&manifest));
    record.push_str(&format!(
        "# ks = {}\n# reps = {}\n",
        a.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        a.reps
    ));
    write_text(&a.out.join("run_manifest.txt"), &record)?;
    print!("{table}");
    Ok(())
}
