//! The `pointdiff` command line: `generate`, `train`, `denoise`, `eval` and
//! `schedule`.
//!
//! Every flag can also come from a `key = value` file given with `--config`,
//! keyed by the long flag name without dashes (`L = 5`, `beta-T = 2e-6`).
//! Flags given on the command line win over the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::datagen::{apply_noise, sample_shape, NoisePattern, NoiseSpec, Shape, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::{format_key_values, read_key_values, read_points, write_text, write_xyz};
use crate::metrics::{chamfer, point_to_surface, EvalReport};
use crate::sampler::{denoise, estimate_schedule, iteration_plan, SamplerConfig, SamplerMode};
use crate::schedule::{Calibration, DiffusionSchedule, DEFAULT_BETA_T, DEFAULT_STEPS};
use crate::score::{FeatureFusion, GradientFusion, NetHyper, OracleScore, ScoreNet, ScoreProvider};
use crate::trainer::{train_with, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pointdiff", version, about = "Score-based diffusion denoising for point clouds")]
struct Cli {
    /// `key = value` file with default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic shape and write clean and noisy copies.
    Generate(GenerateArgs),
    /// Train a score network on the point files of a directory.
    Train(TrainArgs),
    /// Denoise a point file with a trained network or an oracle.
    Denoise(DenoiseArgs),
    /// Compare a denoised cloud with a reference cloud or shape.
    Eval(EvalArgs),
    /// Print the matched timestep and iteration schedule for a noise level.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// sphere, plane, cube[:half], torus[:R,r] or two_planes[:gap].
    #[arg(long)]
    shape: Option<Shape>,
    #[arg(long)]
    n: Option<usize>,
    /// gaussian:s, laplace:b, discrete:levels,s, aniso:xx,xy,xz,yy,yz,zz,
    /// unidir:dx,dy,dz,s or uniform:a.
    #[arg(long)]
    noise: Option<NoisePattern>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes `PREFIX_clean.xyz`, `PREFIX_noisy.xyz` and `PREFIX.meta`.
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScheduleFlags {
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long = "beta-T")]
    beta_t: Option<f64>,
}

#[derive(Debug, Args)]
struct NetFlags {
    /// fused, FT, Ft or Fmean.
    #[arg(long)]
    fusion: Option<FeatureFusion>,
    /// weighted, const or k1.
    #[arg(long = "grad-fusion")]
    grad_fusion: Option<GradientFusion>,
    #[arg(long = "k-fusion")]
    k_fusion: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of clean `.xyz`/`.ply` shapes; each is normalized to the unit sphere.
    #[arg(long)]
    data: PathBuf,
    /// Final checkpoint; periodic ones go next to it as `OUT.iterN`.
    #[arg(long)]
    out: PathBuf,
    /// Loss log, `OUT.loss.csv` by default.
    #[arg(long = "loss-csv")]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cosine-decay the learning rate to this value by the last iteration.
    #[arg(long = "final-lr")]
    final_lr: Option<f64>,
    /// Rescale gradients whose global norm exceeds this.
    #[arg(long = "max-grad-norm")]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "patch-size")]
    patch_size: Option<usize>,
    #[arg(long = "mask-size")]
    mask_size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long = "graph-layers")]
    graph_layers: Option<usize>,
    #[arg(long = "graph-k")]
    graph_k: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<usize>,
    #[arg(long = "no-augment")]
    no_augment: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    schedule: ScheduleFlags,
    #[command(flatten)]
    net: NetFlags,
}

#[derive(Debug, Args)]
struct SamplerFlags {
    #[arg(long = "L")]
    levels: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// adaptive, fixed, onestep or gdm.
    #[arg(long)]
    mode: Option<SamplerMode>,
    /// raw or chi3.
    #[arg(long)]
    calibration: Option<Calibration>,
    #[arg(long = "patch-size")]
    patch_size: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ProviderFlags {
    /// Trained network checkpoint.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Clean reference cloud; scores point to its nearest points.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[command(flatten)]
    net: NetFlags,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run report, `OUT.report` by default.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderFlags,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[command(flatten)]
    schedule: ScheduleFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    denoised: PathBuf,
    /// Clean reference cloud for the Chamfer distance.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Analytic shape for the point-to-surface distance.
    #[arg(long)]
    shape: Option<Shape>,
    /// Report written by `denoise`; supplies the noise estimate and `τ̂`.
    #[arg(long = "denoise-report")]
    denoise_report: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Noise standard deviation to match.
    #[arg(long, conflicts_with = "estimate", required_unless_present = "estimate", allow_negative_numbers = true)]
    sigma: Option<f64>,
    /// Noisy cloud whose noise level is estimated with the provider.
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Also write the full `t beta alpha_bar sigma_bar_sq` table.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderFlags,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[command(flatten)]
    schedule: ScheduleFlags,
}

const CONFIG_KEYS: &[&str] = &[
    "shape",
    "n",
    "noise",
    "seed",
    "T",
    "beta-T",
    "fusion",
    "grad-fusion",
    "k-fusion",
    "iterations",
    "lr",
    "final-lr",
    "max-grad-norm",
    "lambda",
    "patch-size",
    "mask-size",
    "width",
    "graph-layers",
    "graph-k",
    "blocks",
    "checkpoint-every",
    "no-augment",
    "L",
    "eta",
    "mode",
    "calibration",
    "jobs",
];

/// Values from a `--config` file.
#[derive(Debug, Default)]
struct Config(BTreeMap<String, String>);

impl Config {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let mut map = BTreeMap::new();
        for (k, v) in read_key_values(path)? {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(Error::invalid(format!("{}: unknown config key `{k}`", path.display())));
            }
            map.insert(k, v);
        }
        Ok(Self(map))
    }

    /// The flag value if given, else the parsed config value.
    fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::invalid(format!("config key `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    fn or<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.pick(None, key)?.unwrap_or(false))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Parse { .. } | Error::Unsupported(_) => EXIT_IO,
        Error::Numerical(_) | Error::Shape { .. } | Error::Coverage { .. } => EXIT_NUMERICAL,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => generate(a, &config),
        Command::Train(a) => train_cmd(a, &config),
        Command::Denoise(a) => denoise_cmd(a, &config),
        Command::Eval(a) => eval(a, &config),
        Command::Schedule(a) => schedule_cmd(a, &config),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn diffusion_schedule(flags: &ScheduleFlags, config: &Config) -> Result<DiffusionSchedule> {
    DiffusionSchedule::linear(
        config.or(flags.steps, "T", DEFAULT_STEPS)?,
        config.or(flags.beta_t, "beta-T", DEFAULT_BETA_T)?,
    )
}

fn sampler_config(flags: &SamplerFlags, config: &Config) -> Result<SamplerConfig> {
    let d = SamplerConfig::default();
    let sc = SamplerConfig {
        levels: config.or(flags.levels, "L", d.levels)?,
        eta: config.or(flags.eta, "eta", d.eta)?,
        mode: config.or(flags.mode, "mode", d.mode)?,
        calibration: config.or(flags.calibration, "calibration", d.calibration)?,
        patch_size: config.or(flags.patch_size, "patch-size", d.patch_size)?,
        jobs: config.pick(flags.jobs, "jobs")?,
        seed: config.or(flags.seed, "seed", d.seed)?,
        ..d
    };
    sc.validate()?;
    Ok(sc)
}

fn apply_net_flags(net: &mut ScoreNet, flags: &NetFlags, config: &Config) -> Result<()> {
    let h = *net.hyper();
    let feature = config.or(flags.fusion, "fusion", h.feature_fusion)?;
    let gradient = config.or(flags.grad_fusion, "grad-fusion", h.gradient_fusion)?;
    net.set_modes(feature, gradient);
    if let Some(k) = config.pick(flags.k_fusion, "k-fusion")? {
        net.set_fusion_k(k)?;
    }
    Ok(())
}

fn load_provider(flags: &ProviderFlags, config: &Config) -> Result<Box<dyn ScoreProvider>> {
    match (&flags.checkpoint, &flags.oracle) {
        (Some(path), _) => {
            let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut net = ScoreNet::read_checkpoint(&mut file)?;
            apply_net_flags(&mut net, &flags.net, config)?;
            Ok(Box::new(net))
        }
        (None, Some(path)) => Ok(Box::new(OracleScore::new(&read_points(path)?))),
        (None, None) => Err(Error::invalid("a score provider is needed: pass --checkpoint or --oracle")),
    }
}

fn generate(a: GenerateArgs, config: &Config) -> Result<()> {
    let shape = config.or(a.shape, "shape", Shape::Sphere)?;
    let n = config.or(a.n, "n", 10_000)?;
    let noise = config.or(a.noise, "noise", NoisePattern::GaussianIso { sigma: 0.02 })?;
    let seed = config.or(a.seed, "seed", 0)?;
    let clean = sample_shape(&ShapeSpec { shape, n, seed })?;
    let noise_seed = seed.wrapping_add(1);
    let noisy = apply_noise(
        &clean,
        &NoiseSpec {
            pattern: noise.clone(),
            seed: noise_seed,
        },
    )?;
    let meta = format_key_values(&[
        ("shape", shape.to_string()),
        ("n", n.to_string()),
        ("noise", noise.to_string()),
        ("seed", seed.to_string()),
        ("noise_seed", noise_seed.to_string()),
    ]);
    let header: Vec<String> = meta.lines().map(str::to_string).collect();
    let clean_path = with_suffix(&a.out, "_clean.xyz");
    let noisy_path = with_suffix(&a.out, "_noisy.xyz");
    write_xyz(&clean_path, &clean, &header)?;
    write_xyz(&noisy_path, &noisy, &header)?;
    write_text(with_suffix(&a.out, ".meta"), &meta)?;
    println!("wrote {} and {}", clean_path.display(), noisy_path.display());
    Ok(())
}

fn read_shapes(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("xyz") || e.eq_ignore_ascii_case("ply"))
    });
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .xyz or .ply files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| read_points(p).map(|c| c.normalize_unit_sphere().0))
        .collect()
}

fn write_checkpoint(path: &Path, net: &ScoreNet, extra: &str) -> Result<()> {
    let mut bytes = Vec::new();
    net.write_checkpoint(extra, &mut bytes).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn train_cmd(a: TrainArgs, config: &Config) -> Result<()> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        steps: config.or(a.schedule.steps, "T", d.steps)?,
        beta_t: config.or(a.schedule.beta_t, "beta-T", d.beta_t)?,
        patch_size: config.or(a.patch_size, "patch-size", d.patch_size)?,
        mask_size: config.or(a.mask_size, "mask-size", d.mask_size)?,
        lambda: config.or(a.lambda, "lambda", d.lambda)?,
        lr: config.or(a.lr, "lr", d.lr)?,
        final_lr: config.pick(a.final_lr, "final-lr")?,
        max_grad_norm: config.pick(a.max_grad_norm, "max-grad-norm")?,
        iterations: config.or(a.iterations, "iterations", d.iterations)?,
        seed: config.or(a.seed, "seed", d.seed)?,
        augment: !config.flag(a.no_augment, "no-augment")?,
        checkpoint_every: config.or(a.checkpoint_every, "checkpoint-every", d.checkpoint_every)?,
        ..d
    };
    tc.validate()?;
    let h = NetHyper::default();
    let hyper = NetHyper {
        width: config.or(a.width, "width", h.width)?,
        graph_layers: config.or(a.graph_layers, "graph-layers", h.graph_layers)?,
        graph_k: config.or(a.graph_k, "graph-k", h.graph_k)?,
        fusion_k: config.or(a.net.k_fusion, "k-fusion", h.fusion_k)?,
        residual_blocks: config.or(a.blocks, "blocks", h.residual_blocks)?,
        feature_fusion: config.or(a.net.fusion, "fusion", h.feature_fusion)?,
        gradient_fusion: config.or(a.net.grad_fusion, "grad-fusion", h.gradient_fusion)?,
    };
    let shapes = read_shapes(&a.data)?;
    let mut net = ScoreNet::new(hyper, tc.seed)?;
    let extra = format_key_values(&[
        ("T", tc.steps.to_string()),
        ("beta_T", tc.beta_t.to_string()),
        ("lambda", tc.lambda.to_string()),
        ("train_seed", tc.seed.to_string()),
    ]);
    let start = Instant::now();
    let history = train_with(&shapes, &mut net, &tc, |iteration, net| {
        let path = if iteration == tc.iterations {
            a.out.clone()
        } else {
            with_suffix(&a.out, &format!(".iter{iteration}"))
        };
        write_checkpoint(&path, net, &extra)?;
        eprintln!("iteration {iteration}: checkpoint {}", path.display());
        Ok(())
    })?;
    let csv_path = a.loss_csv.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write_text(&csv_path, &history.to_csv())?;
    let ema = history.ema(0.98);
    println!(
        "trained {} iterations on {} shapes in {:.1}s; final loss ema {:.6e}",
        tc.iterations,
        shapes.len(),
        start.elapsed().as_secs_f64(),
        ema.last().copied().unwrap_or(f64::NAN)
    );
    println!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(())
}

fn denoise_cmd(a: DenoiseArgs, config: &Config) -> Result<()> {
    let schedule = diffusion_schedule(&a.schedule, config)?;
    let sc = sampler_config(&a.sampler, config)?;
    let provider = load_provider(&a.provider, config)?;
    let noisy = read_points(&a.input)?;
    let start = Instant::now();
    let (out, report) = denoise(&noisy, provider.as_ref(), &schedule, &sc)?;
    eprintln!("denoised {} points in {:.2}s", out.len(), start.elapsed().as_secs_f64());
    write_xyz(&a.out, &out, &[format!("tau_hat = {}", report.tau_hat)])?;
    let report_path = a.report.unwrap_or_else(|| with_suffix(&a.out, ".report"));
    let text = format!("input = {}\npoints = {}\n{report}", a.input.display(), out.len());
    write_text(&report_path, &text)?;
    print!("{report}");
    Ok(())
}

fn report_value<T: FromStr>(pairs: &[(String, String)], key: &str, path: &Path) -> Result<Option<T>> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| {
            v.parse::<T>()
                .map_err(|_| Error::invalid(format!("{}: bad value for `{key}`: `{v}`", path.display())))
        })
        .transpose()
}

fn eval(a: EvalArgs, _config: &Config) -> Result<()> {
    if a.reference.is_none() && a.shape.is_none() {
        return Err(Error::invalid("eval needs --reference and/or --shape"));
    }
    let denoised = read_points(&a.denoised)?;
    let mut report = EvalReport::default();
    if let Some(path) = &a.reference {
        report.chamfer = Some(chamfer(&denoised, &read_points(path)?)?);
    }
    if let Some(shape) = &a.shape {
        report.p2s_mean = Some(point_to_surface(&denoised, shape)?);
    }
    if let Some(path) = &a.denoise_report {
        let pairs = read_key_values(path)?;
        report.sigma_estimated = report_value(&pairs, "sigma_hat_world", path)?;
        report.tau_hat = report_value(&pairs, "tau_hat", path)?;
    }
    print!("{report}");
    if let Some(path) = &a.out {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

fn schedule_cmd(a: ScheduleArgs, config: &Config) -> Result<()> {
    let schedule = diffusion_schedule(&a.schedule, config)?;
    let sc = sampler_config(&a.sampler, config)?;
    let (sigma, tau_hat) = match (a.sigma, &a.estimate) {
        (Some(sigma), _) => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("sigma must be a finite non-negative number, got {sigma}")));
            }
            (sigma, schedule.match_timestep(sigma * sigma))
        }
        (None, Some(path)) => {
            let provider = load_provider(&a.provider, config)?;
            let cloud = read_points(path)?;
            let (est, tau) = estimate_schedule(&cloud, provider.as_ref(), &schedule, &sc)?;
            let scale = if sc.normalize { cloud.normalize_unit_sphere().1.scale } else { 1.0 };
            (est.sigma_bar() * scale, tau)
        }
        (None, None) => return Err(Error::invalid("pass --sigma or --estimate")),
    };
    let plan = iteration_plan(&schedule, tau_hat, sc.mode, sc.levels)?;
    let steps: Vec<String> = plan.iterations().map(|(t, s)| format!("{t}->{s}")).collect();
    println!("sigma = {sigma:.9e}");
    println!("tau_hat = {tau_hat}");
    println!("sigma_bar_tau_hat = {:.9e}", schedule.sigma_bar(tau_hat));
    println!("mode = {}", sc.mode);
    println!("steps = {}", steps.join(" "));
    if let Some(path) = &a.dump {
        write_text(path, &schedule.to_table())?;
    }
    Ok(())
}
