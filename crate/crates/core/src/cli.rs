//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when arguments or configuration are invalid,
//! 2 when the requested work fails. Logs go to stderr as `level key=value`
//! lines; results go to stdout as `key=value` lines.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{load_checkpoint, save_checkpoint, Network, NetworkSpec};
use crate::crfi::{self, CrfiTrainConfig, TrainOutcome};
use crate::crfr;
use crate::error::Error;
use crate::imagecore::{load_image, save_image, Image, ReflectanceMap};
use crate::integrator::{enhance_image, TrajectoryConfig};
use crate::mef::{fuse, FusionParams};
use crate::metrics::{psnr, sequence_metrics, ssim, SsimParams};
use crate::retinex::{decompose, DecompParams};
use crate::selftest::{gradcheck_suite, run_selftest, GRADCHECK_TOLERANCE};
use crate::synthdata::{read_pairs_root, write_pair_dir, NoiseSpec, PairManifest};

#[derive(Debug, Parser)]
#[command(name = "retiflow", version, about = "Retinex decomposition with flow-based illumination enhancement")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// File of `flag=value` lines; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for training and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// One of error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate paired low/normal-light scenes with ground-truth factors.
    Synth(SynthArgs),
    /// Split an image into illumination and reflectance.
    Decompose(DecomposeArgs),
    /// Train the illumination flow on a directory of pairs.
    TrainCrfi(TrainArgs),
    /// Train the reflectance denoiser on a directory of pairs.
    TrainCrfr(TrainArgs),
    /// Denoise a reflectance image in one step.
    Denoise(DenoiseArgs),
    /// Enhance a low-light image, optionally emitting every integration step.
    Enhance(EnhanceArgs),
    /// Fuse a directory of exposures into one image.
    Fuse(FuseArgs),
    /// PSNR and SSIM of one image against a reference.
    Eval(EvalArgs),
    /// PSNR and SSIM of every image of a sequence against a reference.
    EvalSeq(EvalSeqArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck,
    /// Run the invariant suite of every module.
    Selftest,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.25)]
    low_delta: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.1)]
    gaussian_sigma: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
    speckle_sigma: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
    chroma_shift: f64,
}

#[derive(Debug, Args)]
struct DecompArgs {
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.1)]
    lambda1: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.01)]
    lambda2: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = 1e-4)]
    epsilon: f64,
}

impl DecompArgs {
    fn params(&self) -> DecompParams {
        DecompParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            max_iters: self.max_iters,
            tol: self.tol,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Output prefix; defaults to the input file stem.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    decomp: DecompArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 6)]
    d_levels: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = crate::autodiff::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Loss trace destination; defaults to `loss.csv` next to the checkpoint.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self, seed: u64, in_channels: usize) -> CrfiTrainConfig {
        CrfiTrainConfig {
            batch_size: self.batch,
            iterations: self.iters,
            lr: self.lr,
            d_levels: self.d_levels,
            seed,
            patch_size: self.patch,
            network: NetworkSpec {
                in_channels,
                hidden_channels: self.hidden,
                depth: self.depth,
                embed_dim: self.embed_dim,
            },
        }
    }

    fn loss_path(&self) -> PathBuf {
        self.loss_csv.clone().unwrap_or_else(|| {
            self.out
                .parent()
                .map(|p| p.join("loss.csv"))
                .unwrap_or_else(|| PathBuf::from("loss.csv"))
        })
    }
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[arg(long)]
    crfi: PathBuf,
    #[arg(long)]
    crfr: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    t_start: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    t_end: f64,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Directory receiving `step_000.png ... step_N.png` and `times.csv`.
    #[arg(long)]
    emit_all: Option<PathBuf>,
    #[command(flatten)]
    decomp: DecompArgs,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.2)]
    sigma_e: f64,
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Debug, Args)]
struct EvalSeqArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if let Err(msg) = merge_config(&mut args) {
        eprintln!("error config={msg}");
        return 1;
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.log_level);

    let outcome = match cli.workers {
        Some(0) => Err(Failure::Usage("--workers must be >= 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(Failure::Usage(format!("--workers: {e}"))),
        },
        None => run(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            log::error!("kind=usage message={msg:?}");
            1
        }
        Err(Failure::Runtime(e)) => {
            log::error!("kind=runtime message={:?}", e.to_string());
            2
        }
    }
}

fn init_logging(level: log::LevelFilter) {
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .format(|buf, record| {
            writeln!(buf, "{} {}", record.level().as_str().to_lowercase(), record.args())
        })
        .try_init();
    log::set_max_level(level);
}

/// Appends `--key value` for every config-file entry whose flag is absent
/// from `args`.
fn merge_config(args: &mut Vec<OsString>) -> std::result::Result<(), String> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(()) };
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let present: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|s| s.strip_prefix("--"))
        .map(|s| s.split('=').next().unwrap_or(s).to_string())
        .collect();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key == "config" || present.contains(&key) {
            continue;
        }
        args.push(format!("--{key}").into());
        args.push(value.trim().into());
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Decompose(a) => decompose_cmd(a),
        Command::TrainCrfi(a) => train(a, cli.seed, 1),
        Command::TrainCrfr(a) => train(a, cli.seed, 3),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Enhance(a) => enhance(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Eval(a) => eval(a),
        Command::EvalSeq(a) => eval_seq(a),
        Command::Gradcheck => gradcheck(cli.seed),
        Command::Selftest => selftest(cli.seed),
    }
}

/// Creates the parent directory of an output file.
fn ensure_parent(path: &Path) -> crate::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> crate::Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn create_dir(path: &Path) -> crate::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn synth(a: &SynthArgs, seed: u64) -> CliResult {
    let noise = NoiseSpec {
        gaussian_sigma: a.gaussian_sigma,
        speckle_sigma: a.speckle_sigma,
        chroma_shift: a.chroma_shift,
    };
    noise.validate().map_err(usage)?;
    if !(a.low_delta > 0.0 && a.low_delta <= 1.0) {
        return Err(Failure::Usage(format!("--low-delta {} must be in (0, 1]", a.low_delta)));
    }
    if a.height < crate::synthdata::MIN_SCENE_SIZE || a.width < crate::synthdata::MIN_SCENE_SIZE {
        return Err(Failure::Usage("--height and --width must be >= 8".into()));
    }
    for s in seed..seed + a.count {
        let manifest = PairManifest {
            seed: s,
            height: a.height,
            width: a.width,
            low_delta: a.low_delta,
            noise,
        };
        let dir = a.out.join(s.to_string());
        write_pair_dir(&dir, &manifest)?;
        log::info!("event=pair seed={s} dir={}", dir.display());
    }
    println!("pairs={} out={}", a.count, a.out.display());
    Ok(())
}

fn decompose_cmd(a: &DecomposeArgs) -> CliResult {
    let params = a.decomp.params();
    params.validate().map_err(usage)?;
    let name = match &a.name {
        Some(n) => n.clone(),
        None => a
            .input
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Failure::Usage("--in has no usable file name; pass --name".into()))?
            .to_string(),
    };
    let img = load_image(&a.input)?;
    let res = decompose(&img, &params)?;
    create_dir(&a.out_dir)?;
    save_image(res.l.image(), a.out_dir.join(format!("{name}_L.png")))?;
    save_image(res.r.image(), a.out_dir.join(format!("{name}_R.png")))?;
    println!("objective={}", res.final_objective());
    println!("iterations={}", res.iters_used);
    Ok(())
}

fn train(a: &TrainArgs, seed: u64, in_channels: usize) -> CliResult {
    let cfg = a.config(seed, in_channels);
    cfg.validate().map_err(usage)?;
    if in_channels == 3 && cfg.patch_size < SsimParams::default().window {
        return Err(Failure::Usage(format!("--patch must be >= {}", SsimParams::default().window)));
    }
    let pairs = read_pairs_root(&a.pairs)?;
    log::info!(
        "event=train pairs={} iters={} batch={} channels={in_channels}",
        pairs.len(),
        cfg.iterations,
        cfg.batch_size
    );
    let TrainOutcome { net, trace } = if in_channels == 1 {
        crfi::train_crfi(&mut crfi::DatasetSampler::from_training_pairs(&pairs, seed)?, &cfg)?
    } else {
        crfr::train_crfr(&mut crfr::ReflectanceSampler::from_training_pairs(&pairs, seed)?, &cfg)?
    };
    ensure_parent(&a.out)?;
    save_checkpoint(&net, &a.out)?;
    let loss_path = a.loss_path();
    write_text(&loss_path, &trace.to_csv())?;
    let last = trace.rows.last().copied().unwrap_or_default();
    println!("checkpoint={}", a.out.display());
    println!("loss_csv={}", loss_path.display());
    println!("final_cfm_loss={}", last.cfm);
    println!("final_consistency_loss={}", last.consistency);
    if in_channels == 3 {
        println!("final_content_loss={}", last.content);
    }
    Ok(())
}

fn load_net(path: &Path, in_channels: usize, flag: &str) -> std::result::Result<Network, Failure> {
    let net = load_checkpoint(path)?;
    if net.spec().in_channels != in_channels {
        return Err(Failure::Runtime(Error::Checkpoint(format!(
            "{flag} {} has {} input channels, expected {in_channels}",
            path.display(),
            net.spec().in_channels
        ))));
    }
    Ok(net)
}

fn as_rgb(img: Image) -> crate::Result<Image> {
    if img.channels() == 3 {
        return Ok(img);
    }
    let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    Image::new(img.height(), img.width(), 3, data)
}

fn denoise_cmd(a: &DenoiseArgs) -> CliResult {
    let net = load_net(&a.ckpt, 3, "--ckpt")?;
    let r = ReflectanceMap::new(as_rgb(load_image(&a.input)?)?)?;
    let out = crfr::denoise(&net, &r)?;
    ensure_parent(&a.out)?;
    save_image(out.image(), &a.out)?;
    println!("out={}", a.out.display());
    Ok(())
}

fn enhance(a: &EnhanceArgs) -> CliResult {
    let traj = TrajectoryConfig {
        t_start: a.t_start,
        t_end: a.t_end,
        steps: a.steps,
    };
    traj.validate().map_err(usage)?;
    let params = a.decomp.params();
    params.validate().map_err(usage)?;
    let crfi_net = load_net(&a.crfi, 1, "--crfi")?;
    let crfr_net = load_net(&a.crfr, 3, "--crfr")?;
    let img = load_image(&a.input)?;
    let seq = enhance_image(&crfi_net, &crfr_net, &img, &traj, &params)?;
    ensure_parent(&a.out)?;
    save_image(seq.last(), &a.out)?;
    if let Some(dir) = &a.emit_all {
        create_dir(dir)?;
        let mut times = String::from("step,t\n");
        for (i, (frame, t)) in seq.frames.iter().zip(&seq.times).enumerate() {
            save_image(frame, dir.join(format!("step_{i:03}.png")))?;
            times.push_str(&format!("{i},{t}\n"));
        }
        write_text(&dir.join("times.csv"), &times)?;
    }
    println!("out={}", a.out.display());
    println!("frames={}", seq.frames.len());
    Ok(())
}

fn png_files(dir: &Path) -> crate::Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::invalid("dir", format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid("dir", format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

fn fuse_cmd(a: &FuseArgs) -> CliResult {
    let params = FusionParams {
        sigma_e: a.sigma_e,
        pyramid_levels: a.levels,
        ..FusionParams::default()
    };
    params.validate().map_err(usage)?;
    let seq = png_files(&a.dir)?
        .iter()
        .map(load_image)
        .collect::<crate::Result<Vec<_>>>()?;
    let out = fuse(&seq, &params)?;
    ensure_parent(&a.out)?;
    save_image(&out, &a.out)?;
    println!("inputs={}", seq.len());
    println!("out={}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    let reference = load_image(&a.reference)?;
    let test = load_image(&a.test)?;
    let p = psnr(&test, &reference)?;
    let s = ssim(&test, &reference, &SsimParams::default())?;
    println!("psnr={p:.4} ssim={s:.6}");
    Ok(())
}

/// Times from `times.csv` when present and consistent, else the step index.
fn read_times(dir: &Path, n: usize) -> crate::Result<Vec<f64>> {
    let path = dir.join("times.csv");
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok((0..n).map(|i| i as f64).collect());
    };
    let times = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::invalid("times.csv", format!("bad row {l:?}")))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    if times.len() != n {
        return Err(Error::shape(format!("{n} rows in {}", path.display()), times.len()));
    }
    Ok(times)
}

fn eval_seq(a: &EvalSeqArgs) -> CliResult {
    let reference = load_image(&a.reference)?;
    let files = png_files(&a.dir)?;
    let seq = files.iter().map(load_image).collect::<crate::Result<Vec<_>>>()?;
    let times = read_times(&a.dir, seq.len())?;
    let report = sequence_metrics(&seq, &times, &reference, &SsimParams::default())?;
    write_text(&a.out, &report.to_csv())?;
    let best = report.argmax_psnr();
    println!("rows={}", report.rows.len());
    println!("argmax_step={best} argmax_t={}", report.rows[best].t);
    Ok(())
}

fn gradcheck(seed: u64) -> CliResult {
    let suite = gradcheck_suite(seed)?;
    let mut worst: f64 = 0.0;
    for (name, r) in &suite {
        println!("check={name} max_rel_error={:e} entries={}", r.max_rel_error, r.checked);
        worst = worst.max(r.max_rel_error);
    }
    println!("max_rel_error={worst:e}");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::invalid(
            "gradients",
            format!("max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}"),
        )))
    }
}

fn selftest(seed: u64) -> CliResult {
    let checks = run_selftest(seed);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{}", c.line());
    }
    println!("passed={} failed={failed}", checks.len() - failed);
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::invalid("selftest", format!("{failed} checks failed"))))
    }
}
