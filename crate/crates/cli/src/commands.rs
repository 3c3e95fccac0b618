use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use tamm_core::config::{RunConfig, SEED_ENV};
use tamm_core::datagen::{heldout_alignment, read_triplets, write_triplets, generate, Split, TripletSet};
use tamm_core::encoders::PointCloud;
use tamm_core::eval::{
    fewshot_eval, linear_probe, probe_features, retrieve, zeroshot_topk, CategoryBank, InferenceMode, ProbeConfig,
    QueryKind, Report, REPORT_HEADER,
};
use tamm_core::gradcheck::{run_gradcheck, GRADCHECK_OPS, GRADCHECK_TOLERANCE};
use tamm_core::numkit::{normalize_rows, Matrix};
use tamm_core::train::{
    append_metrics_csv, load_checkpoint, save_checkpoint, Checkpoint, DualFeatures, Stage, TammModel, Trainer,
    METRICS_HEADER,
};

use crate::table::render;
use crate::{CliError, CliResult, ConfigArgs, Task, EXIT_CHECK, EXIT_CONFIG, EXIT_INCOMPATIBLE, EXIT_MISSING};

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// 1, 2 or joint. Taken from the checkpoint when resuming.
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Stage-1 checkpoint providing the frozen image adapter (stage 2).
    #[arg(long)]
    pub cia: Option<PathBuf>,
    /// Stage 2 against raw image features.
    #[arg(long)]
    pub no_cia: bool,
    /// Use only the first N image views.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, conflicts_with_all = ["stage", "cia", "no_cia", "views", "epochs", "run_id"])]
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many optimizer steps in this run.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Defaults to `<out>.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// both, iaa, taa or all.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(short, long, value_delimiter = ',', default_value = "1,3,5")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    #[arg(long, default_value_t = 10)]
    pub shots: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Image views averaged into retrieval queries (default: all).
    #[arg(long)]
    pub views: Option<usize>,
    /// Episode seed; defaults to the checkpoint's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub probe_epochs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn missing(path: &Path, what: &str) -> CliError {
    CliError::new(EXIT_MISSING, format!("{what} {} not found", path.display()))
}

fn read_data(path: &Path) -> CliResult<TripletSet> {
    if !path.exists() {
        return Err(missing(path, "dataset"));
    }
    Ok(read_triplets(path)?)
}

fn read_ckpt(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(missing(path, "checkpoint"));
    }
    Ok(load_checkpoint(path)?)
}

fn resolve(args: &ConfigArgs, mut extra: Vec<(String, String)>) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("--set expects KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    overrides.append(&mut extra);
    if let Some(p) = &args.config {
        if !p.exists() {
            return Err(missing(p, "config file"));
        }
    }
    let env = std::env::var(SEED_ENV).ok();
    Ok(RunConfig::resolve(args.config.as_deref(), env.as_deref(), &overrides)?)
}

pub fn datagen(cfg: &ConfigArgs, views: Option<usize>, shift: Option<String>, out: &Path) -> CliResult {
    let mut extra = Vec::new();
    if let Some(v) = views {
        extra.push(("views".into(), v.to_string()));
    }
    if let Some(s) = shift {
        extra.push(("shift".into(), s));
    }
    let run = resolve(cfg, extra)?;
    let set = generate(&run.dataset)?;
    write_triplets(&set, out)?;
    let held = set.indices(Split::EvalHeldout);
    let acc = heldout_alignment(&set.images, &set.texts, &held)?;
    let h = &set.header;
    println!(
        "wrote {}: {} samples, {} classes ({} held out), {} views, d={}",
        out.display(),
        set.len(),
        h.classes,
        h.heldout_classes,
        h.views,
        h.feature_dim
    );
    println!("shift strength {:.4}", h.shift_strength);
    println!("held-out image-text accuracy before adaptation {acc:.4}");
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> CliResult {
    let data = read_data(&args.data)?;
    let metrics = args
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.csv", args.out.display())));
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = read_ckpt(path)?;
            info!("resuming stage {} at step {}", ck.stage.name(), ck.step());
            Trainer::resume(&data, ck)?
        }
        None => {
            let stage = args
                .stage
                .as_deref()
                .ok_or_else(|| CliError::new(EXIT_CONFIG, "--stage is required unless resuming"))?;
            let stage = Stage::parse(stage)?;
            let mut extra = Vec::new();
            if let Some(v) = args.views {
                extra.push(("train_views".into(), v.to_string()));
            }
            if let Some(e) = args.epochs {
                extra.push(("epochs".into(), e.to_string()));
            }
            if let Some(r) = &args.run_id {
                extra.push(("run_id".into(), r.clone()));
            }
            if args.no_cia {
                extra.push(("use_cia".into(), "false".into()));
            }
            let mut cfg = resolve(&args.cfg, extra)?.train;
            let mut model = TammModel::init(cfg.model_dims(data.feature_dim()), cfg.seed)?;
            if stage == Stage::Decoupled && cfg.use_cia {
                let path = args.cia.as_deref().ok_or_else(|| {
                    CliError::new(EXIT_MISSING, "stage 2 needs --cia <stage-1 checkpoint> (or --no-cia)")
                })?;
                let ck = read_ckpt(path)?;
                ck.model.check_feature_dim(data.feature_dim())?;
                if ck.model.cia.hidden_dim() != model.cia.hidden_dim() {
                    return Err(CliError::new(
                        EXIT_INCOMPATIBLE,
                        format!(
                            "image adapter hidden width {} in {} differs from configured {}",
                            ck.model.cia.hidden_dim(),
                            path.display(),
                            model.cia.hidden_dim()
                        ),
                    ));
                }
                model.cia = ck.model.cia;
                cfg.alpha = ck.config.alpha;
            } else if args.cia.is_some() {
                warn!("--cia is ignored for stage {}", stage.name());
            }
            if std::fs::metadata(&metrics).is_ok() {
                std::fs::remove_file(&metrics).map_err(tamm_core::TammError::from)?;
            }
            Trainer::new(&data, model, stage, cfg)?
        }
    };
    let budget = args.max_steps.unwrap_or(u64::MAX);
    let mut ran = 0;
    while ran < budget {
        let chunk = trainer.steps_per_epoch().min(budget - ran);
        let n = trainer.run_steps(chunk)?;
        append_metrics_csv(&metrics, &trainer.take_metrics())?;
        ran += n;
        if n < chunk {
            break;
        }
    }
    append_metrics_csv(&metrics, &trainer.take_metrics())?;
    save_checkpoint(&trainer.checkpoint(), &args.out)?;
    println!(
        "stage {}: step {}/{} -> {} (metrics {})",
        trainer.stage().name(),
        trainer.step_count(),
        trainer.total_steps(),
        args.out.display(),
        metrics.display()
    );
    Ok(())
}

fn modes(s: &str) -> CliResult<Vec<InferenceMode>> {
    if s == "all" {
        Ok(InferenceMode::ALL.to_vec())
    } else {
        Ok(vec![InferenceMode::parse(s)?])
    }
}

fn encode(ck: &Checkpoint, data: &TripletSet, idx: &[usize]) -> CliResult<DualFeatures> {
    let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &data.clouds[i]).collect();
    Ok(ck.model.encode_dual(&clouds, ck.config.dual_residual_alpha)?)
}

fn labels_of(data: &TripletSet, idx: &[usize]) -> Vec<u32> {
    idx.iter().map(|&i| data.labels[i]).collect()
}

/// Image queries for `idx`: each view passed through the image adapter (when
/// the model uses one), averaged over the first `views` views.
fn image_queries(ck: &Checkpoint, data: &TripletSet, idx: &[usize], views: usize) -> CliResult<Matrix> {
    let mut sum = Matrix::zeros(idx.len(), data.feature_dim());
    for v in &data.images[..views] {
        let raw = v.select_rows(idx);
        let f = if ck.config.use_cia {
            ck.model.cia.apply(&raw, Some(ck.config.alpha))?
        } else {
            raw
        };
        sum.add_assign(&f)?;
    }
    Ok(normalize_rows(&sum)?.0)
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let ck = read_ckpt(&args.ckpt)?;
    let data = read_data(&args.data)?;
    let (model_d, data_d) = (ck.model.dims().feature_dim, data.feature_dim());
    if model_d != data_d {
        return Err(CliError::new(
            EXIT_INCOMPATIBLE,
            format!("checkpoint feature dim {model_d} does not match dataset feature dim {data_d}"),
        ));
    }
    let modes = modes(&args.mode)?;
    let seed = args.seed.unwrap_or(ck.config.seed);
    let probe = ProbeConfig {
        epochs: args.probe_epochs,
        ..ProbeConfig::default()
    };
    let held = data.indices(Split::EvalHeldout);
    let mut report = Report::default();
    match args.task {
        Task::Zeroshot => {
            let feats = encode(&ck, &data, &held)?;
            let labels = labels_of(&data, &held);
            let bank = CategoryBank::from_dataset(&data, &data.classes_in(&held))?;
            for &m in &modes {
                for (k, acc) in zeroshot_topk(&feats, &labels, &bank, m, &args.k)? {
                    report.push(format!("zeroshot_top{k}"), m.name(), "heldout", acc);
                }
            }
        }
        Task::Linear => {
            let pre = data.indices(Split::Pretrain);
            let seen = data.indices(Split::EvalSeen);
            let (ftr, fte) = (encode(&ck, &data, &pre)?, encode(&ck, &data, &seen)?);
            let (ytr, yte) = (labels_of(&data, &pre), labels_of(&data, &seen));
            for &m in &modes {
                let acc = linear_probe(&probe_features(&ftr, m), &ytr, &probe_features(&fte, m), &yte, &probe)?;
                report.push("linear_probe_acc", m.name(), "seen", acc);
            }
        }
        Task::Fewshot => {
            let feats = encode(&ck, &data, &held)?;
            let labels = labels_of(&data, &held);
            let pool: Vec<usize> = (0..held.len()).collect();
            let tag = format!("{}way{}shot", args.ways, args.shots);
            for &m in &modes {
                let r = fewshot_eval(
                    &probe_features(&feats, m),
                    &labels,
                    &pool,
                    args.ways,
                    args.shots,
                    args.trials,
                    seed,
                    &probe,
                )?;
                report.push(format!("fewshot_{tag}_mean"), m.name(), "heldout", r.mean);
                report.push(format!("fewshot_{tag}_std"), m.name(), "heldout", r.std);
            }
        }
        Task::Retrieve => {
            let views = args.views.unwrap_or(data.views());
            if views == 0 || views > data.views() {
                return Err(CliError::new(
                    EXIT_CONFIG,
                    format!("--views {views} but the dataset has {} views", data.views()),
                ));
            }
            let gallery = encode(&ck, &data, &held)?;
            let labels = labels_of(&data, &held);
            let classes = data.classes_in(&held);
            let queries = image_queries(&ck, &data, &held, views)?;
            for &k in &args.k {
                let precision = |q: &[f64], kind, class: u32| -> CliResult<f64> {
                    let hits = retrieve(q, kind, &gallery, k)?;
                    Ok(hits.iter().filter(|(i, _)| labels[*i] == class).count() as f64 / hits.len() as f64)
                };
                let mut text = 0.0;
                for &c in &classes {
                    text += precision(data.class_bank.row(c as usize), QueryKind::Text, c)?;
                }
                let mut image = 0.0;
                for (r, &l) in labels.iter().enumerate() {
                    image += precision(queries.row(r), QueryKind::Image, l)?;
                }
                report.push(format!("text_to_point_p@{k}"), "taa", "heldout", text / classes.len() as f64);
                report.push(format!("image_to_point_p@{k}"), "iaa", "heldout", image / labels.len() as f64);
            }
        }
    }
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_csv()?).map_err(tamm_core::TammError::from)?;
    }
    Ok(())
}

pub fn gradcheck(corrupt: Option<&str>) -> CliResult {
    if let Some(op) = corrupt {
        if !GRADCHECK_OPS.contains(&op) {
            return Err(CliError::new(
                EXIT_CONFIG,
                format!("unknown op {op:?}; expected one of {}", GRADCHECK_OPS.join(", ")),
            ));
        }
    }
    let rows = run_gradcheck(corrupt)?;
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.op.to_string(),
                r.params.to_string(),
                format!("{:.3e}", r.max_rel_err),
                if r.passed { "ok" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    print!("{}", render(&["op", "params", "max_rel_err", "status"], &cells));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if failed.is_empty() {
        println!("all {} ops within {GRADCHECK_TOLERANCE:e}", rows.len());
        Ok(())
    } else {
        Err(CliError::new(
            EXIT_CHECK,
            format!("gradient check failed for {}", failed.join(", ")),
        ))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::new(EXIT_INCOMPATIBLE, format!("{}: {e}", path.display()))
}

pub fn report(files: &[PathBuf]) -> CliResult {
    let mut evals = Vec::new();
    let mut finals = Vec::new();
    for path in files {
        if !path.exists() {
            return Err(missing(path, "file"));
        }
        let source = path.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().eq(REPORT_HEADER) {
            let text = std::fs::read_to_string(path).map_err(tamm_core::TammError::from)?;
            for r in Report::from_csv(&text)?.rows {
                evals.push(vec![source.clone(), r.metric, r.mode, r.split, format!("{:.4}", r.value)]);
            }
        } else if header.iter().eq(METRICS_HEADER) {
            // Last epoch per (run, stage, metric).
            let mut last: BTreeMap<(String, String, String), (usize, f64)> = BTreeMap::new();
            let mut order = Vec::new();
            for rec in rdr.records() {
                let rec = rec.map_err(|e| csv_error(path, e))?;
                let bad = || CliError::new(EXIT_INCOMPATIBLE, format!("{}: malformed row {rec:?}", path.display()));
                let epoch: usize = rec[2].parse().map_err(|_| bad())?;
                let value: f64 = rec[4].parse().map_err(|_| bad())?;
                let key = (rec[0].to_string(), rec[1].to_string(), rec[3].to_string());
                if !last.contains_key(&key) {
                    order.push(key.clone());
                }
                let e = last.entry(key).or_insert((epoch, value));
                if epoch >= e.0 {
                    *e = (epoch, value);
                }
            }
            for key in order {
                let (epoch, value) = last[&key];
                finals.push(vec![key.0, key.1, epoch.to_string(), key.2, format!("{value:.4}")]);
            }
        } else {
            return Err(CliError::new(
                EXIT_INCOMPATIBLE,
                format!("{}: not a metrics or report CSV (header {header:?})", path.display()),
            ));
        }
    }
    if !finals.is_empty() {
        print!("{}", render(&["run_id", "stage", "epoch", "metric", "value"], &finals));
    }
    if !evals.is_empty() {
        if !finals.is_empty() {
            println!();
        }
        print!("{}", render(&["source", "metric", "mode", "split", "value"], &evals));
    }
    Ok(())
}
