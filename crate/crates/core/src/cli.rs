//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Every error goes to standard error prefixed with
//! `ERROR <code>:`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{crop_to_bounds, validate_config, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{densify_tally, detection_metrics, DensifyTally, EvalRegion, MetricReport};
use crate::gradcheck;
use crate::io::{list_files, read_boxes, read_cloud_csv, read_dense_csv, read_detections, write_dense_csv, write_detections, write_json};
use crate::lqe::{adaptive_radius, class_counts};
use crate::model::{ablate_radius, detect_dense, forward, AblationRow, Sd4rModel, Trainer, RADIUS_GRID};
use crate::pillars::{pillar_center, pillarize};
use crate::synth::{read_dataset, scene_paths, write_dataset, SceneParams};
use crate::types::{ClassId, PointCloud};

#[derive(Parser, Debug)]
#[command(name = "sd4r", version, about = "Sparse-to-dense radar point cloud densification and detection")]
pub struct Cli {
    /// Flat JSON configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set tau=0.6` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to SD4R_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labelled synthetic dataset.
    SynthGen(SynthGenArgs),
    /// Train on the training split of a dataset.
    Train(TrainArgs),
    /// Densify a cloud (or every cloud in a directory).
    Densify(DensifyArgs),
    /// Detect objects in a dense cloud (or every dense cloud in a directory).
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Re-evaluate a trained model under a list of radius triples.
    AblateRadius(AblateArgs),
    /// Dump intermediate quantities of one cloud as CSV.
    Inspect(InspectArgs),
    /// Finite-difference check of every backward pass.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON scene parameters; defaults otherwise.
    #[arg(long)]
    pub scene_params: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Total epochs (a resumed run continues up to this count).
    #[arg(long)]
    pub epochs: usize,
    /// Continue from a checkpoint, including its optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DensifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of `<scene>.json` detection files.
    #[arg(long)]
    pub dets: PathBuf,
    /// Dataset directory with ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "entire")]
    pub region: EvalRegion,
    /// Directory of `<scene>.csv` dense clouds for densification metrics.
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Semicolon-separated radius triples, e.g. "0.2,0.3,0.4;0.3,0.3,0.3".
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value = "entire")]
    pub region: EvalRegion,
    /// CSV matrix output; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "what")]
pub struct InspectWhat {
    #[arg(long)]
    pub radii: bool,
    #[arg(long)]
    pub pillars: bool,
    #[arg(long)]
    pub foreground: bool,
    #[arg(long)]
    pub votes: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint; a freshly initialised model from the seed otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub what: InspectWhat,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = gradcheck::STEP)]
    pub step: f64,
    #[arg(long, default_value_t = gradcheck::TOLERANCE)]
    pub tolerance: f64,
    /// JSON report output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Provenance record written beside every output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub elapsed_ms: u128,
    pub config: PipelineConfig,
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    let digest = Sha256::digest(cfg.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads the config file (if any), applies `--set` overrides and `--seed`,
/// and validates the result.
pub fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut value = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", p.display())]))?
        }
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig(vec!["configuration must be a JSON object".into()]))?;
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(vec![format!("override `{o}` is not KEY=VALUE")]))?;
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        obj.insert(k.trim().to_string(), parsed);
    }
    let mut cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    validate_config(&cfg).map_err(Error::InvalidConfig)?;
    Ok(cfg)
}

fn thread_count(cli: &Cli) -> Result<Option<usize>> {
    let n = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("SD4R_THREADS") {
            Ok(s) => Some(
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(vec![format!("SD4R_THREADS=`{s}` is not a count")]))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::InvalidConfig(vec!["thread count must be positive".into()]));
    }
    Ok(n)
}

fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run_manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

struct Ctx {
    cfg: PipelineConfig,
    args: Vec<String>,
    start: Instant,
}

impl Ctx {
    fn manifest(&self, command: &str, out: &Path) -> Result<()> {
        let m = RunManifest {
            command: command.to_string(),
            args: self.args.clone(),
            config_hash: config_hash(&self.cfg),
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            elapsed_ms: self.start.elapsed().as_millis(),
            config: self.cfg.clone(),
        };
        write_json(&manifest_path(out), &m)
    }
}

fn load_model(path: &Path, cfg: &PipelineConfig) -> Result<Sd4rModel> {
    let ck = checkpoint::load(path)?;
    ck.model.check(cfg)?;
    Ok(ck.model)
}

/// Parses `"a,b,c;d,e,f"` into radius triples.
pub fn parse_grid(s: &str, classes: usize) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let v = t
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidConfig(vec![format!("grid entry `{t}`: {e}")]))?;
            if v.len() != classes || v.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::InvalidConfig(vec![format!(
                    "grid entry `{t}` needs {classes} positive radii"
                )]));
            }
            Ok(v)
        })
        .collect()
}

/// `(input, output)` pairs: one file, or every file of a directory mapped
/// into an output directory with a new extension.
fn io_pairs(input: &Path, output: &Path, in_ext: &str, out_ext: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !input.is_dir() {
        return Ok(vec![(input.to_path_buf(), output.to_path_buf())]);
    }
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    Ok(list_files(input, in_ext)?
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_owned();
            let mut o = output.join(stem);
            o.set_extension(out_ext);
            (p, o)
        })
        .collect())
}

fn synth_gen(ctx: &Ctx, a: &SynthGenArgs) -> Result<()> {
    let mut params: SceneParams = match &a.scene_params {
        Some(p) => crate::io::read_json(p)?,
        None => SceneParams::default(),
    };
    params.seed = ctx.cfg.seed;
    let m = write_dataset(&params, &ctx.cfg, a.scenes, &a.out)?;
    println!("wrote {} scenes ({} train) to {}", m.scenes.len(), m.train, a.out.display());
    ctx.manifest("synth-gen", &a.out)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let (manifest, scenes) = read_dataset(&a.data, cfg.num_classes)?;
    let train = &scenes[..manifest.train.min(scenes.len())];
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            ck.model.check(cfg)?;
            ck.into_trainer()
        }
        None => Trainer::new(Sd4rModel::init(cfg, cfg.seed)),
    };
    let mut log = String::from("epoch,total,det,seg,vote\n");
    let mut stdout = std::io::stdout().lock();
    trainer.train_until(train, cfg, a.epochs, |r| {
        let l = r.loss;
        log.push_str(&format!("{},{},{},{},{}\n", r.epoch, l.total, l.det, l.seg, l.vote));
        let _ = writeln!(
            stdout,
            "epoch {:4}  total {:.6}  det {:.6}  seg {:.6}  vote {:.6}",
            r.epoch, l.total, l.det, l.seg, l.vote
        );
    })?;
    checkpoint::save(&a.out, &Checkpoint::from(&trainer))?;
    if let Some(p) = &a.log {
        std::fs::write(p, log).map_err(|e| Error::io(p, e))?;
    }
    ctx.manifest("train", &a.out)
}

fn densify(ctx: &Ctx, a: &DensifyArgs) -> Result<()> {
    let model = load_model(&a.model, &ctx.cfg)?;
    let pairs = io_pairs(&a.input, &a.output, "csv", "csv")?;
    for (i, o) in &pairs {
        let cloud = crop_to_bounds(&read_cloud_csv(i)?, &ctx.cfg);
        let tr = forward(&model, &cloud, &ctx.cfg)?;
        write_dense_csv(o, &tr.dense)?;
    }
    ctx.manifest("densify", &a.output)
}

fn detect(ctx: &Ctx, a: &DetectArgs) -> Result<()> {
    let model = load_model(&a.model, &ctx.cfg)?;
    let pairs = io_pairs(&a.input, &a.output, "csv", "json")?;
    for (i, o) in &pairs {
        let dense = read_dense_csv(i)?;
        let dets = detect_dense(&model, &dense, &ctx.cfg)?;
        write_detections(o, &dets)?;
    }
    ctx.manifest("detect", &a.output)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: String,
    pub detections: usize,
    pub gt_boxes: usize,
    pub ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub scenes: Vec<SceneReport>,
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let k = ctx.cfg.num_classes;
    let (manifest, _) = read_dataset(&a.gt, k)?;
    let mut pairs = Vec::new();
    let mut scenes = Vec::new();
    let mut tally = DensifyTally::default();
    for path in list_files(&a.dets, "json")? {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        if stem == "run_manifest" {
            continue;
        }
        let entry = manifest
            .scenes
            .iter()
            .find(|e| e.cloud == format!("{stem}.csv"))
            .ok_or_else(|| Error::Data(format!("{}: no ground truth for scene `{stem}`", path.display())))?;
        let (cloud_path, box_path) = scene_paths(&a.gt, entry);
        let dets = read_detections(&path)?;
        let gts = read_boxes(&box_path)?;
        if let Some(dir) = &a.dense {
            let dense = read_dense_csv(&dir.join(format!("{stem}.csv")))?;
            let raw = read_cloud_csv(&cloud_path)?;
            tally.add(&densify_tally(&dense, &raw, &gts, k));
        }
        let single = detection_metrics(&[(dets.clone(), gts.clone())], a.region, k);
        scenes.push(SceneReport {
            scene: stem,
            detections: dets.len(),
            gt_boxes: gts.len(),
            ap: single.per_class.iter().map(|c| c.ap).collect(),
        });
        pairs.push((dets, gts));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: no detection files", a.dets.display())));
    }
    let det = detection_metrics(&pairs, a.region, k);
    let dens = a.dense.as_ref().map(|_| tally.finish());
    let report = EvalReport {
        metrics: MetricReport::new(det, a.region, dens),
        scenes,
    };
    for c in &report.metrics.per_class {
        println!("{:<10} AP {:>8}  gt {:4}  det {:5}", c.class, fmt_opt(c.ap), c.num_gt, c.num_det);
    }
    println!("mAP {:.6}", report.metrics.map);
    write_json(&a.out, &report)?;
    ctx.manifest("eval", &a.out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

pub fn ablation_csv(rows: &[AblationRow], num_classes: usize) -> String {
    let names: Vec<String> = (0..num_classes - 1).map(|c| ClassId(c).name(num_classes).to_string()).collect();
    let mut s = String::new();
    s.push_str(&names.iter().map(|n| format!("r_{n}")).collect::<Vec<_>>().join(","));
    s.push(',');
    s.push_str(&names.iter().map(|n| format!("ap_{n}")).collect::<Vec<_>>().join(","));
    s.push_str(",map\n");
    for r in rows {
        let radii: Vec<String> = r.weights.iter().map(|w| w.to_string()).collect();
        let aps: Vec<String> = r.per_class.iter().map(|a| a.map_or(String::new(), |v| v.to_string())).collect();
        s.push_str(&format!("{},{},{}\n", radii.join(","), aps.join(","), r.map));
    }
    s
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let model = load_model(&a.model, cfg)?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g, cfg.num_classes - 1)?,
        None => RADIUS_GRID.iter().map(|t| t.to_vec()).collect(),
    };
    let (manifest, scenes) = read_dataset(&a.data, cfg.num_classes)?;
    let test = &scenes[manifest.train.min(scenes.len())..];
    if test.is_empty() {
        return Err(Error::Data("held-out split is empty".into()));
    }
    let rows = ablate_radius(&model, test, cfg, &grid, a.region)?;
    let csv = ablation_csv(&rows, cfg.num_classes);
    print!("{csv}");
    if let Some(p) = &a.out {
        std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
        ctx.manifest("ablate-radius", p)?;
    }
    Ok(())
}

/// CSV text of one inspection table.
pub fn inspect_table(model: &Sd4rModel, cloud: &PointCloud, cfg: &PipelineConfig, what: &InspectWhat) -> Result<String> {
    let cloud = crop_to_bounds(cloud, cfg);
    let tr = forward(model, &cloud, cfg)?;
    let k = cfg.num_classes;
    let mut s = String::new();
    if what.radii || what.pillars {
        let grid = pillarize(&tr.dense, cfg, cfg.max_points_per_pillar)?;
        let counts = class_counts(&grid);
        if what.radii {
            let ra = adaptive_radius(&counts, &cfg.radius_weights, cfg.default_radius);
            let names: Vec<String> = (0..k - 1).map(|c| format!("n_{}", ClassId(c).name(k))).collect();
            s.push_str(&format!("pillar,ix,iy,n_points,n_fore,{},radius\n", names.join(",")));
            for (p, c) in grid.coords.iter().enumerate() {
                let per: Vec<String> = ra.counts[p].iter().map(|n| n.to_string()).collect();
                s.push_str(&format!(
                    "{p},{},{},{},{},{},{}\n",
                    c[0],
                    c[1],
                    grid.members[p].len(),
                    ra.fore[p],
                    per.join(","),
                    ra.radii[p]
                ));
            }
        } else {
            s.push_str("pillar,ix,iy,center_x,center_y,n_points,n_kept,n_virtual,n_fore\n");
            let mut in_cell = vec![0usize; grid.len()];
            for &p in &grid.point_pillar {
                in_cell[p] += 1;
            }
            for (p, c) in grid.coords.iter().enumerate() {
                let ctr = pillar_center(*c, cfg);
                let m = &grid.members[p];
                let virt = m.iter().filter(|&&i| tr.dense.is_virtual[i]).count();
                s.push_str(&format!(
                    "{p},{},{},{},{},{},{},{virt},{}\n",
                    c[0],
                    c[1],
                    ctr[0],
                    ctr[1],
                    in_cell[p],
                    m.len(),
                    counts.fore[p]
                ));
            }
        }
    } else if what.foreground {
        let names: Vec<String> = (0..k).map(|c| format!("p_{}", ClassId(c).name(k))).collect();
        s.push_str(&format!("index,x,y,z,{},confidence,class,kept\n", names.join(",")));
        let pi = crate::fpg::foreground_confidence(&tr.probs);
        for (i, p) in cloud.points.iter().enumerate() {
            let probs: Vec<String> = tr.probs.row(i).iter().map(|v| v.to_string()).collect();
            let kept = tr.foreground.indices.binary_search(&i).is_ok();
            let cls = crate::fpg::argmax_foreground(tr.probs.row(i));
            s.push_str(&format!(
                "{i},{},{},{},{},{},{},{}\n",
                p.x,
                p.y,
                p.z,
                probs.join(","),
                pi[i],
                cls.name(k),
                u8::from(kept)
            ));
        }
    } else {
        s.push_str("source,src_x,src_y,src_z,class,virt_x,virt_y,virt_z\n");
        for (r, prov) in tr.dense.provenance.iter().enumerate() {
            if let crate::fpg::Provenance::Virtual { source, .. } = prov {
                let sp = &cloud.points[*source];
                let v = &tr.dense.points[r];
                let cls = crate::fpg::argmax_foreground(tr.probs.row(*source));
                s.push_str(&format!(
                    "{source},{},{},{},{},{},{},{}\n",
                    sp.x,
                    sp.y,
                    sp.z,
                    cls.name(k),
                    v.x,
                    v.y,
                    v.z
                ));
            }
        }
    }
    Ok(s)
}

fn inspect(ctx: &Ctx, a: &InspectArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => load_model(p, &ctx.cfg)?,
        None => Sd4rModel::init(&ctx.cfg, ctx.cfg.seed),
    };
    let cloud = read_cloud_csv(&a.input)?;
    print!("{}", inspect_table(&model, &cloud, &ctx.cfg, &a.what)?);
    Ok(())
}

fn grad_check(ctx: &Ctx, a: &GradCheckArgs) -> Result<()> {
    let model = a.model.as_ref().map(|p| load_model(p, &ctx.cfg)).transpose()?;
    let rep = gradcheck::run_all(&ctx.cfg, model.as_ref(), ctx.cfg.seed, a.step, a.tolerance)?;
    for r in &rep.results {
        println!(
            "{:<26} max rel error {:.3e}  checked {:4}  skipped {:3}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {:.3e}", rep.max_rel_error());
    if let Some(p) = &a.out {
        write_json(p, &rep)?;
    }
    if rep.passed() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check exceeded tolerance {:.1e} (max {:.3e})",
            a.tolerance,
            rep.max_rel_error()
        )))
    }
}

fn dispatch(cli: &Cli, args: Vec<String>) -> Result<()> {
    let cfg = effective_config(cli)?;
    let ctx = Ctx {
        cfg,
        args,
        start: Instant::now(),
    };
    match &cli.command {
        Command::SynthGen(a) => synth_gen(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Densify(a) => densify(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::AblateRadius(a) => ablate(&ctx, a),
        Command::Inspect(a) => inspect(&ctx, a),
        Command::GradCheck(a) => grad_check(&ctx, a),
    }
}

/// Runs the CLI on `argv` and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
                    eprintln!("ERROR 1: {first}");
                    eprintln!("{}", msg.trim_end());
                    1
                }
            };
        }
    };
    let threads = match thread_count(&cli) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("ERROR 1: {e}");
            return 1;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("ERROR 1: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli, args)) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("ERROR {code}: {e}");
            code
        }
    }
}
