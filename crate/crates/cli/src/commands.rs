use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use fan_core::assignment::{coverage_csv, coverage_report};
use fan_core::config::{Layer, RunConfig};
use fan_core::data::{save_pgm, Dataset, RgbImage};
use fan_core::inference_eval::{
    attention_maps, detect_dataset, evaluate, multi_scale_detect, pr_svg, ImagePredictions, Subset,
};
use fan_core::model::Model;
use fan_core::trainer::LOG_HEADER;
use fan_core::{gradcheck, AnchorSpec, FanError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::GlobalArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(FanError),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 3,
            CliError::Core(e) => match e {
                FanError::Config(_) => 1,
                FanError::NonFinite { .. } => 3,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(FanError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Defaults, then the config file, then flags, then `FAN_*` variables.
fn load_config(g: &GlobalArgs, flags: &[(&str, &str, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_file(&text)?;
    }
    if let Some(s) = g.seed {
        cfg.set("run", "seed", &s.to_string(), Layer::Flag)?;
    }
    if let Some(t) = g.threads {
        cfg.set("run", "threads", &t.to_string(), Layer::Flag)?;
    }
    for (section, key, value) in flags {
        cfg.set(section, key, value, Layer::Flag)?;
    }
    cfg.apply_env(std::env::vars())?;
    let cfg = cfg.resolve()?;
    eprint!("{}", cfg.echo());
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Image size as WxH.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub occluded_frac: Option<f64>,
    #[arg(long)]
    pub distractor_rate: Option<f64>,
}

pub fn gen_data(g: &GlobalArgs, a: GenDataArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(size) = &a.size {
        let (w, h) = size
            .split_once(['x', 'X'])
            .ok_or_else(|| CliError::Usage(format!("--size: expected WxH, got {size:?}")))?;
        flags.push(("data", "width", w.to_string()));
        flags.push(("data", "height", h.to_string()));
    }
    if let Some(f) = a.occluded_frac {
        flags.push(("data", "occluded_frac", f.to_string()));
    }
    if let Some(r) = a.distractor_rate {
        flags.push(("data", "distractor_rate", r.to_string()));
    }
    let cfg = load_config(g, &flags)?;
    let data = Dataset::generate(a.count, &cfg.data, cfg.seed, cfg.train.threads)?;
    data.save(&a.out)?;
    eprintln!("wrote {} scenes to {}", data.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// `off` trains the baseline without the attention branch.
    #[arg(long, value_enum)]
    pub attention: Option<Switch>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Loss log CSV; defaults to the checkpoint path with `.log.csv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(g: &GlobalArgs, a: TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(e) = a.epochs {
        flags.push(("train", "epochs", e.to_string()));
    }
    if let Some(lr) = a.lr {
        flags.push(("train", "lr", lr.to_string()));
    }
    if let Some(b) = a.batch {
        flags.push(("train", "batch_size", b.to_string()));
    }
    if let Some(s) = a.attention {
        let v = if s == Switch::On { "on" } else { "off" };
        flags.push(("model", "attention", v.to_string()));
        flags.push(("train", "attention", v.to_string()));
    }
    if let Some(l) = a.lambda2 {
        flags.push(("loss", "lambda2", l.to_string()));
    }
    let cfg = load_config(g, &flags)?;
    let data = Dataset::load(&a.data)?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut csv = format!("{LOG_HEADER}\n");
    let start = Instant::now();
    let result = fan_core::trainer::train(&mut model, &data, &cfg.train, |e, steps, m| {
        for s in steps {
            csv.push_str(&s.csv_row());
            csv.push('\n');
        }
        std::fs::write(&log_path, &csv)?;
        m.save(&a.out)?;
        eprintln!(
            "epoch {:>3} lr {:.2e} mean loss {:.5} ({:.0}s)",
            e.epoch,
            e.lr,
            e.mean_total,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    });
    if let Err(e) = result {
        // keep whatever was logged before the failure
        let _ = std::fs::write(&log_path, &csv);
        return Err(e.into());
    }
    eprintln!("checkpoint {} log {}", a.out.display(), log_path.display());
    Ok(())
}

fn parse_scales(s: &Option<String>) -> Vec<(&'static str, &'static str, String)> {
    s.iter().map(|v| ("eval", "scales", v.clone())).collect()
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Shortest-side test scales, e.g. 256,512.
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn detect(g: &GlobalArgs, a: DetectArgs) -> Result<()> {
    let cfg = load_config(g, &parse_scales(&a.scales))?;
    let model = Model::<f32>::load(&a.ckpt)?;
    let image = RgbImage::load_png(&a.image)?;
    let detections = multi_scale_detect(&model, &image, &cfg.eval.scales, cfg.eval.merge_nms_iou, &cfg.decode)?;
    let out = ImagePredictions { image: a.image.display().to_string(), detections };
    write(&a.out, serde_json::to_string_pretty(&out).map_err(FanError::from)?)?;
    eprintln!("{} detections", out.detections.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scales: Option<String>,
    /// Report CSV with columns subset,AP,n_gt,n_det.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pr_csv: Option<PathBuf>,
    #[arg(long)]
    pub pr_svg: Option<PathBuf>,
    /// Also write all detections as JSON lines.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

pub fn eval(g: &GlobalArgs, a: EvalArgs) -> Result<()> {
    let cfg = load_config(g, &parse_scales(&a.scales))?;
    let model = Model::<f32>::load(&a.ckpt)?;
    let data = Dataset::load(&a.data)?;
    let preds = detect_dataset(&model, &data, &cfg.eval.scales, cfg.eval.merge_nms_iou, &cfg.decode, cfg.train.threads)?;
    let anns: Vec<_> = data.samples.iter().map(|s| s.annotation.clone()).collect();
    let report = evaluate(&preds, &anns, cfg.eval.match_iou, &Subset::standard())?;
    write(&a.out, report.report_csv())?;
    if let Some(p) = &a.pr_csv {
        write(p, report.pr_csv())?;
    }
    if let Some(p) = &a.pr_svg {
        write(p, pr_svg(&report))?;
    }
    if let Some(p) = &a.predictions {
        let mut s = String::new();
        for pred in &preds {
            s.push_str(&serde_json::to_string(pred).map_err(FanError::from)?);
            s.push('\n');
        }
        write(p, s)?;
    }
    print!("{}", report.report_csv());
    Ok(())
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    /// Anchor preset name.
    #[arg(long, default_value = "fan")]
    pub spec: String,
    #[arg(long, default_value = "16,32,64,128,256,406")]
    pub sides: String,
    #[arg(long, default_value_t = 10000)]
    pub placements: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn coverage(g: &GlobalArgs, a: CoverageArgs) -> Result<()> {
    let cfg = load_config(g, &[])?;
    let spec = AnchorSpec::preset(&a.spec)?;
    let sides = a
        .sides
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("--sides: bad value {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let rows = coverage_report(&spec, &sides, a.placements, cfg.seed)?;
    let csv = coverage_csv(&rows);
    match &a.out {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn gradcheck(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g, &[])?;
    let start = Instant::now();
    let checks = gradcheck::run_suite(cfg.seed)?;
    let mut failed = 0;
    for c in &checks {
        println!("{c}");
        if !c.passed() {
            println!("    worst: {}", c.worst);
            failed += 1;
        }
    }
    println!("{} checks, {} failed, {:.1}s", checks.len(), failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Square input sides; each must be a multiple of 128.
    #[arg(long, default_value = "128,256,512")]
    pub sizes: String,
    #[arg(long, default_value_t = 20)]
    pub repeat: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(g: &GlobalArgs, a: BenchArgs) -> Result<()> {
    let cfg = load_config(g, &[])?;
    if a.repeat == 0 {
        return Err(CliError::Usage("--repeat must be positive".into()));
    }
    let model = Model::<f32>::load(&a.ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = String::from("size,median_ms,min_ms,repeat\n");
    for s in a.sizes.split(',') {
        let side: usize = s.trim().parse().map_err(|_| CliError::Usage(format!("--sizes: bad value {s:?}")))?;
        let input = Tensor::<f32>::from_fn(&[3, side, side], |_| rng.random_range(-2.0..2.0));
        let mut times: Vec<f64> = (0..a.repeat)
            .map(|_| {
                let t = Instant::now();
                model.predict(&input).map(|_| t.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<std::result::Result<_, _>>()?;
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
        csv.push_str(&format!("{side},{median:.3},{:.3},{n}\n", times[0]));
    }
    match &a.out {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory for `attention_p<level>.pgm`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn export_attention(g: &GlobalArgs, a: ExportAttentionArgs) -> Result<()> {
    load_config(g, &[])?;
    let model = Model::<f32>::load(&a.ckpt)?;
    let image = RgbImage::load_png(&a.image)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for m in attention_maps(&model, &image)? {
        let path = a.out.join(format!("attention_p{}.pgm", m.level));
        save_pgm(&path, m.width, m.height, &m.values)?;
        println!("{}", path.display());
    }
    Ok(())
}
