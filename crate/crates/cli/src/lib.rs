//! The `geomanifold` command line.
//!
//! Every subcommand is a pure function of its input files, the experiment
//! config and `--seed`; outputs never contain timings or host details, so
//! repeated runs are byte-identical. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 numerical failure. Failures print one JSON object on
//! stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use geomanifold::augment::augment_scan;
use geomanifold::estimators::{
    build_correspondences, normal_from_covariance, pca_covariance, train, Backend, Checkpoint,
};
use geomanifold::harness::{
    covariance_csv, load_cloud, loss_csv, metrics_csv, parse_covariance_csv, save_cloud,
    synth_corridor, synth_scene, CloudFormat, ExperimentConfig, SceneSpec,
};
use geomanifold::manifold::{rotation_distance, Mat3};
use geomanifold::matching::{odometry, pose_success_rate, rpe, Matcher, Trajectory};
use geomanifold::registration::register;
use geomanifold::{Covariance3, CorrespondenceSet, Error, MatchedPairs, PointCloud, PoseSE3, Vec3};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "geomanifold", version, about = "Learn, estimate and use per-point Gaussian geometry of point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for all randomness (overrides the seeds in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for outputs; created if missing.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene (or corridor sequence) with ground truth.
    Synth(SynthArgs),
    /// Learn covariances of the target scan from a scan pair.
    Train(TrainArgs),
    /// Per-point covariances of a cloud from a checkpoint or PCA.
    Estimate(EstimateArgs),
    /// Certifiable registration of two clouds.
    Register(RegisterArgs),
    /// Scan-to-scan odometry over a directory of scans.
    Odometry(OdometryArgs),
    /// Densify a cloud by sampling its per-point Gaussians.
    Augment(AugmentArgs),
    /// Compare an estimated trajectory with a reference.
    Eval(EvalArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The scene described by the config.
    Config,
    /// Floor and two walls.
    Planar,
    /// A scan sequence along a corridor.
    Corridor,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "config")]
    pub preset: Preset,
    /// Translation noise of the observed pose (overrides the config).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Make the source an exact rigid copy of the target.
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Pose file; its observed pose maps the source onto the target.
    #[arg(long)]
    pub poses: PathBuf,
    /// Gradient steps (overrides `train.epochs`).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Direct,
    Mlp,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cloud: PathBuf,
    /// Trained checkpoint; mutually exclusive with `--pca`.
    #[arg(long, conflicts_with = "pca")]
    pub checkpoint: Option<PathBuf>,
    /// Use neighborhood PCA instead of a checkpoint.
    #[arg(long)]
    pub pca: bool,
    /// Append the unit normal of every covariance.
    #[arg(long)]
    pub normals: bool,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Target covariances (CSV); isotropic when omitted.
    #[arg(long)]
    pub target_covariances: Option<PathBuf>,
    /// Correspondences as `source,target` index rows. Without it, equally
    /// sized clouds pair by index and others by nearest neighbor from `--init`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Pose file whose observed pose seeds nearest-neighbor association.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Pose file whose true pose is used to report errors.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OdometryArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of scans, processed in file-name order.
    #[arg(long)]
    pub scans: PathBuf,
    /// Directory of covariance CSVs named after the scans.
    #[arg(long)]
    pub covariances: Option<PathBuf>,
    /// Reference trajectory for RPE.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub matcher: Option<MatcherArg>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MatcherArg {
    P2p,
    P2plane,
    Gicp,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub covariances: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
}

/// Failure of one CLI run.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Run(_) => EXIT_DATA,
        }
    }

    /// Machine-readable description printed on stderr.
    pub fn diagnostics(&self) -> serde_json::Value {
        let mut v = json!({ "exit_code": self.exit_code() });
        match self {
            CliError::Usage(m) => {
                v["error"] = json!("usage");
                v["message"] = json!(m);
            }
            CliError::Run(e) => {
                v["error"] = json!(error_kind(e));
                v["message"] = json!(e.to_string());
                match e {
                    Error::NotTight(f) => {
                        v["optimality_gap"] = json!(f.optimality_gap);
                        v["rank1_ratio"] = json!(f.rank1_ratio);
                        v["candidate_pose"] = json!(PoseRecord::from(&f.candidate));
                    }
                    Error::SdpMaxIterations { iterations, gap, .. } => {
                        v["iterations"] = json!(iterations);
                        v["gap"] = json!(gap);
                    }
                    Error::Odometry { failed_pair, partial, .. } => {
                        v["failed_pair"] = json!(failed_pair);
                        v["poses_before_failure"] = json!(partial.len());
                    }
                    Error::Parse { offset, .. } => v["offset"] = json!(offset),
                    _ => {}
                }
            }
        }
        v
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::LogSingularity { .. } => "log_singularity",
        Error::SingularCovariance => "singular_covariance",
        Error::NotPositiveDefinite(_) => "not_positive_definite",
        Error::AsymmetricWeight(_) => "asymmetric_weight",
        Error::SdpMaxIterations { .. } => "sdp_max_iterations",
        Error::SdpInfeasible(_) => "sdp_infeasible",
        Error::NotTight(_) => "not_tight",
        Error::RankDeficientKkt(_) => "rank_deficient_kkt",
        Error::NoCorrespondences => "no_correspondences",
        Error::InsufficientPoints { .. } => "insufficient_points",
        Error::DegenerateGeometry(_) => "degenerate_geometry",
        Error::Parse { .. } => "parse",
        Error::Odometry { .. } => "odometry",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// A pose as written to JSON files: row-major rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&PoseSE3> for PoseRecord {
    fn from(p: &PoseSE3) -> Self {
        PoseRecord {
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| p.rotation[(r, c)])),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3 {
            rotation: Mat3::from_fn(|r, c| self.rotation[r][c]),
            translation: Vec3::from(self.translation),
        }
    }
}

/// Ground truth of a synthetic pair, written by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosesFile {
    pub true_pose: PoseRecord,
    pub observed_pose: PoseRecord,
    /// Perturbation twist `(rotation, translation)` left-applied to the true pose.
    pub noise_twist: [f64; 6],
}

impl PosesFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Run(Error::Config(format!("{}: {e}", path.display()))))
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.diagnostics());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Estimate(a) => estimate(a),
        Command::Register(a) => register_cmd(a),
        Command::Odometry(a) => odometry_cmd(a),
        Command::Augment(a) => augment(a),
        Command::Eval(a) => eval(a),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    fs::create_dir_all(&common.out_dir)?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_cloud(path: &Path) -> Result<PointCloud, CliError> {
    Ok(load_cloud(path, CloudFormat::from_path(path)?)?)
}

fn read_covariances(path: &Path) -> Result<Vec<Covariance3>, CliError> {
    Ok(parse_covariance_csv(&fs::read_to_string(path)?)?)
}

fn json_text<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value).map_err(Error::from)? + "\n")
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common)?;
    let seed = a.common.seed.unwrap_or(0);
    let out = &a.common.out_dir;
    if a.preset == Preset::Corridor {
        if a.noiseless || a.noise.is_some() {
            return Err(CliError::Usage("--noise and --noiseless do not apply to the corridor".into()));
        }
        let seq = synth_corridor(&cfg.corridor, seed)?;
        let (scans_dir, covs_dir) = (out.join("scans"), out.join("covariances"));
        fs::create_dir_all(&scans_dir)?;
        fs::create_dir_all(&covs_dir)?;
        for (k, (scan, covs)) in seq.scans.iter().zip(&seq.covariances).enumerate() {
            save_cloud(&scans_dir.join(format!("scan_{k:03}.xyz")), scan, CloudFormat::XyzText)?;
            fs::write(covs_dir.join(format!("scan_{k:03}.csv")), covariance_csv(covs, None))?;
        }
        println!("wrote {} scans to {}", seq.scans.len(), scans_dir.display());
        // Reference expressed relative to the first scan, like odometry output.
        let first = seq.poses[0].inverse();
        let reference = Trajectory::from_poses(seq.poses.iter().map(|p| first.compose(p)).collect());
        return write(&out.join("reference.txt"), reference.to_text());
    }

    let mut spec = match a.preset {
        Preset::Planar => SceneSpec::planar(),
        _ => cfg.scene.clone(),
    };
    if let Some(n) = a.noise {
        spec.translation_noise = n;
    }
    let scene = synth_scene(&spec, seed)?;
    let target_covs = scene.target_covariances();
    let target_normals = scene.target_normals();
    let (source, source_covs, pairs) = if a.noiseless {
        let inv = scene.true_pose.inverse();
        let r = scene.true_pose.rotation;
        let covs: Vec<Covariance3> = target_covs.iter().map(|c| r.transpose() * c * r).collect();
        (scene.target.transformed(&inv), covs, CorrespondenceSet::identity(scene.target.len()))
    } else {
        // Each source point pairs with the first target sample of its component.
        let mut first = vec![usize::MAX; scene.components.len()];
        for (j, &c) in scene.target_component.iter().enumerate().rev() {
            first[c] = j;
        }
        let pairs = scene
            .source_component
            .iter()
            .enumerate()
            .filter(|(_, &c)| first[c] != usize::MAX)
            .map(|(i, &c)| (i, first[c]))
            .collect();
        (scene.source.clone(), scene.source_covariances(), CorrespondenceSet::new(pairs))
    };

    save_cloud(&out.join("source.xyz"), &source, CloudFormat::XyzText)?;
    save_cloud(&out.join("target.xyz"), &scene.target, CloudFormat::XyzText)?;
    write(&out.join("target_covariances.csv"), covariance_csv(&target_covs, Some(&target_normals)))?;
    write(&out.join("source_covariances.csv"), covariance_csv(&source_covs, None))?;
    let mut pair_text = String::from("source,target\n");
    for (i, j) in &pairs.pairs {
        pair_text.push_str(&format!("{i},{j}\n"));
    }
    write(&out.join("pairs.csv"), pair_text)?;
    let poses = PosesFile {
        true_pose: (&scene.true_pose).into(),
        observed_pose: (&scene.observed_pose).into(),
        noise_twist: std::array::from_fn(|k| scene.noise_twist.0[k]),
    };
    write(&out.join("poses.json"), json_text(&poses)?)
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    if let Some(seed) = a.common.seed {
        cfg.train.rng_seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.epochs = steps;
    }
    let backend = match a.backend {
        Some(BackendArg::Direct) => Backend::Direct,
        Some(BackendArg::Mlp) => Backend::Mlp,
        None => cfg.backend,
    };
    let source = read_cloud(&a.source)?;
    let target = read_cloud(&a.target)?;
    let observed = PosesFile::load(&a.poses)?.observed_pose.to_pose();
    let gamma = cfg.pose_noise.to_noise()?;
    let report = train(&source, &target, &observed, &gamma, backend, &cfg.train)?;
    let ckpt = Checkpoint::new(&report.params, &cfg.train);
    let out = &a.common.out_dir;
    write(&out.join(&cfg.outputs.checkpoint), ckpt.to_json()?)?;
    write(
        &out.join(&cfg.outputs.losses),
        loss_csv(&report.loss, &report.correspondence_loss, &report.pose_loss),
    )
}

fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    if a.checkpoint.is_some() == a.pca {
        return Err(CliError::Usage("pass exactly one of --checkpoint and --pca".into()));
    }
    let cfg = load_config(&a.common)?;
    let cloud = read_cloud(&a.cloud)?;
    let covs = match (&a.checkpoint, a.pca) {
        (Some(path), _) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.params()?.covariances(&cloud, &ckpt.config)?
        }
        _ => pca_covariance(&cloud, cfg.pca_neighbors)?,
    };
    let normals: Option<Vec<Vec3>> =
        a.normals.then(|| covs.iter().map(|c| normal_from_covariance(c).normal).collect());
    write(&a.common.out_dir.join(&cfg.outputs.covariances), covariance_csv(&covs, normals.as_deref()))
}

fn read_pairs(path: &Path) -> Result<CorrespondenceSet, CliError> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    let mut offset = 0;
    for (k, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim();
        if k > 0 && !body.is_empty() {
            let parsed = body
                .split_once(',')
                .and_then(|(i, j)| Some((i.trim().parse().ok()?, j.trim().parse().ok()?)));
            match parsed {
                Some(p) => pairs.push(p),
                None => {
                    return Err(Error::Parse { offset, message: format!("expected `source,target`, got {body:?}") }.into())
                }
            }
        }
        offset += line.len();
    }
    Ok(CorrespondenceSet::new(pairs))
}

fn register_cmd(a: &RegisterArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common)?;
    let source = read_cloud(&a.source)?;
    let target = read_cloud(&a.target)?;
    let target_covs = match &a.target_covariances {
        Some(p) => {
            let c = read_covariances(p)?;
            if c.len() != target.len() {
                return Err(Error::InvalidInput(format!("{} covariances for {} target points", c.len(), target.len())).into());
            }
            c
        }
        None => vec![Mat3::identity(); target.len()],
    };
    let corr = match (&a.pairs, &a.init) {
        (Some(p), _) => read_pairs(p)?,
        (None, None) if source.len() == target.len() => CorrespondenceSet::identity(source.len()),
        (None, init) => {
            let init = match init {
                Some(p) => PosesFile::load(p)?.observed_pose.to_pose(),
                None => PoseSE3::identity(),
            };
            build_correspondences(&source, &target, &init, cfg.train.correspondence_threshold)?
        }
    };
    let pairs = MatchedPairs::gather(&corr, &source, &target)?;
    let covs: Vec<Covariance3> = corr.pairs.iter().map(|&(_, j)| target_covs[j]).collect();
    let reg = register(&pairs, &covs, false)?;

    let mut doc = json!({
        "pose": PoseRecord::from(&reg.pose),
        "num_pairs": pairs.len(),
        "diagnostics": reg.diagnostics,
    });
    if let Some(p) = &a.reference {
        let truth = PosesFile::load(p)?.true_pose.to_pose();
        doc["rotation_error_rad"] = json!(rotation_distance(&reg.pose.rotation, &truth.rotation));
        doc["translation_error"] = json!((reg.pose.translation - truth.translation).norm());
    }
    write(&a.common.out_dir.join(&cfg.outputs.diagnostics), json_text(&doc)?)
}

fn scan_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && CloudFormat::from_path(p).is_ok());
    files.sort();
    Ok(files)
}

fn odometry_cmd(a: &OdometryArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common)?;
    let files = scan_files(&a.scans)?;
    let scans = files.iter().map(|p| read_cloud(p)).collect::<Result<Vec<_>, _>>()?;
    let covs = match &a.covariances {
        Some(dir) => Some(
            files
                .iter()
                .map(|f| {
                    let stem = f.file_stem().expect("scan files have names");
                    read_covariances(&dir.join(stem).with_extension("csv"))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let mut options = cfg.odometry;
    if let Some(m) = a.matcher {
        options.matcher = match m {
            MatcherArg::P2p => Matcher::PointToPoint,
            MatcherArg::P2plane => Matcher::PointToPlane,
            MatcherArg::Gicp => Matcher::Gicp,
        };
    }
    let out = &a.common.out_dir;
    let trajectory = match odometry(&scans, covs.as_deref(), &options) {
        Ok(t) => t,
        Err(e) => {
            if let Error::Odometry { partial, .. } = &e {
                write(&out.join(&cfg.outputs.trajectory), partial.to_text())?;
            }
            return Err(e.into());
        }
    };
    write(&out.join(&cfg.outputs.trajectory), trajectory.to_text())?;
    if let Some(p) = &a.reference {
        let reference = Trajectory::from_text(&fs::read_to_string(p)?)?;
        let rows = trajectory_metrics(&trajectory, &reference, cfg.rpe_delta)?;
        write(&out.join(&cfg.outputs.metrics), metrics_csv(&rows))?;
    }
    Ok(())
}

/// RPE at `delta` (when the trajectories are long enough), per-pose
/// rotation error and the 10-degree success rate.
pub fn trajectory_metrics(
    estimate: &Trajectory,
    reference: &Trajectory,
    delta: usize,
) -> Result<Vec<(String, f64)>, CliError> {
    if estimate.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "trajectories have {} and {} poses",
            estimate.len(),
            reference.len()
        ))
        .into());
    }
    let est: Vec<PoseSE3> = estimate.poses().copied().collect();
    let reference: Vec<PoseSE3> = reference.poses().copied().collect();
    let mut rows = vec![("poses".to_string(), est.len() as f64)];
    if est.len() > delta {
        let (t, r) = rpe(&Trajectory::from_poses(est.clone()), &Trajectory::from_poses(reference.clone()), delta)?;
        rows.push(("rpe_delta".into(), delta as f64));
        rows.push(("rpe_translation".into(), t));
        rows.push(("rpe_rotation_deg".into(), r.to_degrees()));
    }
    if !est.is_empty() {
        let mean = est.iter().zip(&reference).map(|(e, r)| rotation_distance(&e.rotation, &r.rotation)).sum::<f64>()
            / est.len() as f64;
        rows.push(("mean_rotation_error_deg".into(), mean.to_degrees()));
    }
    rows.push(("success_rate".into(), pose_success_rate(&est, &reference)?));
    Ok(rows)
}

fn augment(a: &AugmentArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common)?;
    let mut spec = cfg.augment;
    if let Some(seed) = a.common.seed {
        spec.rng_seed = seed;
    }
    let cloud = read_cloud(&a.cloud)?;
    let covs = read_covariances(&a.covariances)?;
    let dense = augment_scan(&cloud, &covs, &spec)?;
    let path = a.common.out_dir.join(&cfg.outputs.cloud);
    save_cloud(&path, &dense, CloudFormat::from_path(&path)?)?;
    println!("wrote {} ({} points)", path.display(), dense.len());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common)?;
    let estimate = Trajectory::from_text(&fs::read_to_string(&a.estimate)?)?;
    let reference = Trajectory::from_text(&fs::read_to_string(&a.reference)?)?;
    let rows = trajectory_metrics(&estimate, &reference, cfg.rpe_delta)?;
    write(&a.common.out_dir.join(&cfg.outputs.metrics), metrics_csv(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_record_round_trips() {
        let p = PoseSE3 {
            rotation: geomanifold::manifold::so3_exp(&Vec3::new(0.1, -0.2, 0.3)),
            translation: Vec3::new(1.0, 2.0, 3.0),
        };
        assert_eq!(PoseRecord::from(&p).to_pose(), p);
    }

    #[test]
    fn usage_errors_map_to_exit_one() {
        assert_eq!(run_cli(["geomanifold", "nonsense"]), EXIT_USAGE);
        assert_eq!(run_cli(["geomanifold", "estimate"]), EXIT_USAGE);
    }

    #[test]
    fn numerical_errors_map_to_exit_three() {
        let e = CliError::Run(Error::SingularCovariance);
        assert_eq!(e.exit_code(), EXIT_NUMERICAL);
        assert_eq!(e.diagnostics()["error"], "singular_covariance");
        assert_eq!(CliError::Run(Error::NoCorrespondences).exit_code(), EXIT_DATA);
    }
}
