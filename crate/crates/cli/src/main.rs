use std::fs;
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sag_core::checkpoint::load_checkpoint;
use sag_core::data::{generate_synthetic, load_image, save_image, DatasetManifest, LabeledImages, Split, SynthSpec};
use sag_core::eval::{embed_images, evaluate_embeddings, EvalOptions, RerankParams};
use sag_core::pipeline::{
    ablation_row, geometry_label, run_name, train_from_manifest, AblationRow,
    ModelSpec, OutputLayout, ABLATION_HEADER,
};
use sag_core::train::{preprocess, TrainConfig};
use sag_core::viz::{encode_grid_ppm, overlay};
use sag_core::{DepthSet, Model32};

#[derive(Parser)]
#[command(name = "sag", version, about = "Self attention grid re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic Market-style dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval(EvalArgs),
    /// Train and evaluate the eight depth configurations.
    Ablate(AblateArgs),
    /// Export attention grids and overlays.
    Visualize(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data/synth")]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    ids: usize,
    #[arg(long, default_value_t = 2)]
    cams: usize,
    /// Images per identity per camera.
    #[arg(long, default_value_t = 10)]
    per: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.15)]
    camera_shift: f64,
    #[arg(long, default_value_t = 4)]
    jitter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct Hyper {
    /// key=value file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_classifier: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Hyper {
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got {kv:?}"))?;
            c.set(k.trim(), v.trim())?;
        }
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lr_backbone = self.lr.unwrap_or(c.lr_backbone);
        c.lr_classifier = self.lr_classifier.unwrap_or(c.lr_classifier);
        c.momentum = self.momentum.unwrap_or(c.momentum);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.gamma = self.gamma.unwrap_or(c.gamma);
        c.step_size = self.step_size.unwrap_or(c.step_size);
        c.seed = self.seed.unwrap_or(c.seed);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (or manifest file).
    #[arg(long)]
    data: PathBuf,
    /// Comma list of attention depths, or "none" for the baseline.
    #[arg(long, default_value = "4")]
    depths: DepthSet,
    /// Depths whose attention output is L2-normalised (default 1,2,3).
    #[arg(long)]
    l2_depths: Option<DepthSet>,
    #[arg(long, default_value = "16,32,64,128")]
    channels: String,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    rerank: bool,
    #[arg(long, default_value_t = 20)]
    k1: usize,
    #[arg(long, default_value_t = 6)]
    k2: usize,
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    /// Keep same-camera matches of the query identity.
    #[arg(long)]
    no_camera_filter: bool,
    /// Expected depths; a checkpoint built differently is rejected.
    #[arg(long)]
    depths: Option<DepthSet>,
    /// Expected stage channels; a checkpoint built differently is rejected.
    #[arg(long)]
    channels: Option<String>,
    /// Also write the report and embeddings under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    #[arg(long, default_value = "16,32,64,128")]
    channels: String,
    #[arg(long)]
    rerank: bool,
    #[arg(long, default_value_t = 8)]
    k1: usize,
    #[arg(long, default_value_t = 3)]
    k2: usize,
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    /// Run the configurations as parallel child processes (capped by SAG_THREADS).
    #[arg(long)]
    parallel: bool,
    /// Run a single row of the table (0-based); used by --parallel.
    #[arg(long, hide = true)]
    only: Option<usize>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM files or directories of PPM files.
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long, default_value = "runs/viz")]
    out: PathBuf,
}

fn parse_channels(s: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad channel list {s:?}"))?;
    match v.as_slice() {
        &[a, b, c, d] if v.iter().all(|&x| x > 0) => Ok([a, b, c, d]),
        _ => bail!("--channels needs four positive counts, got {s:?}"),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        ids: a.ids,
        per_camera: a.per,
        cameras: a.cams,
        noise: a.noise,
        camera_shift: a.camera_shift,
        jitter: a.jitter,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let m = generate_synthetic(&spec, &a.out)?;
    println!("dataset\t{}", a.out.display());
    println!("identities\t{}", a.ids);
    println!("cameras\t{}", m.num_cameras());
    println!("images\t{}", m.items.len());
    println!("train_ids\t{}\ttrain_images\t{}", m.num_train_ids(), m.count(Split::Train));
    println!(
        "test_ids\t{}\tquery_images\t{}\tgallery_images\t{}",
        m.num_test_ids(),
        m.count(Split::Query),
        m.count(Split::Gallery)
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data).context("loading manifest")?;
    let config = a.hyper.resolve(TrainConfig::default())?;
    let spec = ModelSpec {
        stage_channels: parse_channels(&a.channels)?,
        depths: a.depths,
        l2_depths: a.l2_depths,
    };
    let layout = OutputLayout::create(&a.out)?;
    let name = run_name(a.depths);
    println!("# config {} ({})", a.depths.label(), geometry_label(&spec.backbone(manifest.num_train_ids()), a.depths));
    println!("epoch\tlr\tloss\ttrain_acc\tval_rank1");
    let run = train_from_manifest::<f32>(&manifest, &spec, &config, &layout, &name, |l| println!("{l}"))?;
    println!("# best epoch {}", run.outcome.best_epoch);
    println!("# final checkpoint {}", run.final_checkpoint.display());
    println!("# best checkpoint {}", run.best_checkpoint.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (mut model, meta) = load_checkpoint::<f32>(&a.checkpoint).context("loading checkpoint")?;
    if let Some(d) = a.depths {
        if d != meta.depths {
            bail!("checkpoint depths {} differ from --depths {d}", meta.depths);
        }
    }
    if let Some(c) = &a.channels {
        let want = parse_channels(c)?;
        if want != meta.config.stage_channels {
            bail!("checkpoint channels {:?} differ from --channels {c}", meta.config.stage_channels);
        }
    }
    let manifest = DatasetManifest::load(&a.data).context("loading manifest")?;
    let options = EvalOptions {
        rerank: a.rerank.then_some(RerankParams {
            k1: a.k1,
            k2: a.k2,
            lambda: a.lambda,
        }),
        filter_same_camera: !a.no_camera_filter,
        ..EvalOptions::default()
    };
    let query = LabeledImages::<f32>::load(&manifest, Split::Query)?;
    let gallery = LabeledImages::<f32>::load(&manifest, Split::Gallery)?;
    let q = embed_images(&mut model, &query, meta.mean)?;
    let g = embed_images(&mut model, &gallery, meta.mean)?;
    let report = evaluate_embeddings(&q, &g, &options)?;
    let label = meta.depths.label();
    print!("{}", report.to_tsv(&label));
    if let Some(out) = a.out {
        let layout = OutputLayout::create(&out)?;
        let name = run_name(meta.depths);
        fs::write(layout.reports().join(format!("eval-{name}.tsv")), report.to_tsv(&label))?;
        fs::write(layout.reports().join(format!("eval-{name}.kv")), report.to_kv())?;
        q.save(&layout.reports().join(format!("query-{name}.emb")))?;
        g.save(&layout.reports().join(format!("gallery-{name}.emb")))?;
    }
    Ok(())
}

fn max_workers() -> usize {
    std::env::var("SAG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn row_file(layout: &OutputLayout, i: usize) -> PathBuf {
    layout.reports().join(format!("ablation-row{i}.tsv"))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data).context("loading manifest")?;
    let config = a.hyper.resolve(TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    })?;
    let channels = parse_channels(&a.channels)?;
    let options = EvalOptions {
        rerank: a.rerank.then_some(RerankParams {
            k1: a.k1,
            k2: a.k2,
            lambda: a.lambda,
        }),
        ..EvalOptions::default()
    };
    let layout = OutputLayout::create(&a.out)?;
    let rows = DepthSet::ablation_rows();

    let run_row = |i: usize| -> Result<AblationRow> {
        let depths = rows[i];
        eprintln!("# training {} ({}/{})", depths.label(), i + 1, rows.len());
        let row = ablation_row::<f32>(&manifest, channels, depths, &config, &options, &layout, |l| eprintln!("{l}"))?;
        fs::write(row_file(&layout, i), format!("{}\n", row.line()))?;
        Ok(row)
    };

    if let Some(i) = a.only {
        if i >= rows.len() {
            bail!("--only must be below {}", rows.len());
        }
        run_row(i)?;
        return Ok(());
    }

    let lines: Vec<String> = if a.parallel {
        run_children(&layout, rows.len())?;
        (0..rows.len())
            .map(|i| {
                let p = row_file(&layout, i);
                fs::read_to_string(&p)
                    .with_context(|| format!("reading {}", p.display()))
                    .map(|s| s.trim_end().to_string())
            })
            .collect::<Result<_>>()?
    } else {
        let mut out = Vec::new();
        for i in 0..rows.len() {
            out.push(run_row(i)?.line());
        }
        out
    };
    let mut header = ABLATION_HEADER.to_string();
    if a.rerank {
        header.push_str("\tR1+RR\tmAP+RR");
    }
    let report = format!("{header}\n{}\n", lines.join("\n"));
    fs::write(layout.reports().join("ablation.tsv"), &report)?;
    print!("{report}");
    Ok(())
}

fn run_children(layout: &OutputLayout, n: usize) -> Result<()> {
    let exe = std::env::current_exe()?;
    let passthrough: Vec<String> = std::env::args().skip(2).filter(|s| s != "--parallel").collect();
    let workers = max_workers();
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut next = 0;
    while next < n || !running.is_empty() {
        while next < n && running.len() < workers {
            let child = Command::new(&exe)
                .arg("ablate")
                .args(&passthrough)
                .arg("--only")
                .arg(next.to_string())
                .stdout(std::process::Stdio::null())
                .stderr(fs::File::create(layout.logs().join(format!("ablation-row{next}.stderr")))?)
                .spawn()?;
            running.push((next, child));
            next += 1;
        }
        let (i, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            bail!("ablation row {i} failed ({status}); see {}", layout.logs().display());
        }
    }
    Ok(())
}

fn collect_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|e| e == "ppm"))
                .collect();
            v.sort();
            out.extend(v);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no input images found");
    }
    Ok(out)
}

fn cmd_visualize(a: VizArgs) -> Result<()> {
    let (mut model, meta): (Model32, _) = load_checkpoint(&a.checkpoint).context("loading checkpoint")?;
    if meta.depths.is_empty() {
        bail!("checkpoint has no attention depths to visualise");
    }
    let layout = OutputLayout::create(&a.out)?;
    let (h, w) = (meta.config.input_height, meta.config.input_width);
    for path in collect_images(&a.images)? {
        let image = load_image::<f32>(&path).with_context(|| format!("reading {}", path.display()))?;
        let x = preprocess(&image, meta.mean, h, w)?;
        let batch = x.reshape(&[1, 3, h, w])?;
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        for (depth, grid) in model.attention_grids(&batch)? {
            let (gh, gw) = grid.extent();
            let grid_path = layout.viz().join(format!("{stem}_d{depth}_grid.ppm"));
            fs::write(&grid_path, encode_grid_ppm(grid.sample(0), gh, gw)?)?;
            let over = overlay(&image, grid.sample(0), gh, gw)?;
            save_image(&over, &layout.viz().join(format!("{stem}_d{depth}_overlay.ppm")))?;
            println!("{}\tD{depth}\t{gh}x{gw}\t{}", path.display(), grid_path.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Visualize(a) => cmd_visualize(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: bad arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
