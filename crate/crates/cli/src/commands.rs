//! Subcommand implementations. Every command echoes its effective
//! configuration to `out_dir/config.resolved` before doing any work.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use brainseg::adversarial::AttackConfig;
use brainseg::cascade::PLANS;
use brainseg::dataio::{
    fold_fingerprint, generate_phantom, kfold_split, read_dataset, read_params, training_indices, write_dataset,
    write_params, Sample,
};
use brainseg::labels::{LabelId, NUM_LABELS, NUM_ROIS};
use brainseg::metrics::{csv_header, csv_row, EvalReport, RowKey};
use brainseg::model::{oracle_predictions, report, Model, StageModel};
use brainseg::train::{init_model, stage_datasets, train_model, train_stage, EpochLog};

use crate::config::{RunConfig, Stage};
use crate::render::render_ppm;
use crate::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const LOG_FILE: &str = "train.log";
pub const RESOLVED_FILE: &str = "config.resolved";

/// Which samples of a fold to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Val,
    Train,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Val => "val",
            Split::Train => "train",
        }
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub workers: usize,
}

impl Context {
    pub fn new(cfg: RunConfig, workers: usize) -> Result<Self> {
        cfg.validate()?;
        if workers == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        fs::create_dir_all(&cfg.out_dir).map_err(CliError::io(&cfg.out_dir))?;
        let path = cfg.out_dir.join(RESOLVED_FILE);
        fs::write(&path, cfg.resolved()).map_err(CliError::io(path))?;
        Ok(Self { cfg, workers })
    }

    fn data(&self) -> Result<Vec<Sample>> {
        Ok(read_dataset(&self.cfg.data_path)?)
    }

    fn folds(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        Ok(kfold_split(n, self.cfg.folds, self.cfg.seed)?)
    }
}

pub fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold{fold}"))
}

fn checkpoint_names(cascade: bool) -> Vec<&'static str> {
    if cascade {
        vec!["stage1.segp", "stage2.segp", "stage3.segp"]
    } else {
        vec!["model.segp"]
    }
}

fn select(data: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

fn stage_models(model: &Model) -> Vec<&StageModel> {
    match model {
        Model::Single(m) => vec![m],
        Model::Cascade { stages, .. } => stages.iter().collect(),
    }
}

/// Checkpoints of a trained fold. Only the trained stages are written.
fn save_model(model: &Model, dir: &Path, stages: &[usize]) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let names = checkpoint_names(matches!(model, Model::Cascade { .. }));
    for (i, (m, name)) in stage_models(model).into_iter().zip(names).enumerate() {
        if matches!(model, Model::Single(_)) || stages.contains(&i) {
            write_params(&m.params, dir.join(name))?;
        }
    }
    Ok(())
}

pub fn load_model(cfg: &RunConfig, dir: &Path) -> Result<Model> {
    let arch = cfg.architecture();
    let load = |name: &str, classes: usize| -> Result<StageModel> {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(CliError::MissingCheckpoint(path));
        }
        let params = read_params(&path)?;
        Ok(StageModel::new(arch.spec(classes), params, cfg.class_head, cfg.lambda_cls)?)
    };
    let names = checkpoint_names(cfg.cascade);
    Ok(match cfg.cascade_config() {
        None => Model::Single(load(names[0], NUM_LABELS)?),
        Some(cascade) => Model::Cascade {
            stages: Box::new([
                load(names[0], PLANS[0].classes())?,
                load(names[1], PLANS[1].classes())?,
                load(names[2], PLANS[2].classes())?,
            ]),
            cascade,
        },
    })
}

/// Append-only text log of training progress.
struct RunLog {
    file: File,
    path: PathBuf,
    start: Instant,
}

impl RunLog {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(CliError::io(&path))?;
        Ok(Self {
            file,
            path,
            start: Instant::now(),
        })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text} elapsed_s={:.1}", self.start.elapsed().as_secs_f64())
            .map_err(CliError::io(&self.path))
    }
}

fn epoch_line(cfg: &RunConfig, fold: usize, l: &EpochLog) -> String {
    let val = l.val_dice.map_or("NA".to_string(), |d| format!("{d:.6}"));
    format!(
        "config={} seed={} fold={fold} stage={} epoch={} loss={:.6} val_dice={val}",
        cfg.name(),
        cfg.seed,
        l.stage,
        l.epoch + 1,
        l.loss
    )
}

/// Train fold `fold` of `cfg` and write its checkpoints under `dir`.
fn train_fold(
    cfg: &RunConfig,
    workers: usize,
    data: &[Sample],
    folds: &[Vec<usize>],
    fold: usize,
    dir: &Path,
    log: &mut RunLog,
) -> Result<Model> {
    let train = select(data, &training_indices(folds, fold));
    let val = select(data, &folds[fold]);
    let tcfg = cfg.train(workers);
    let init = init_model(cfg.architecture(), cfg.cascade_config(), &tcfg)?;
    let mut log_err = Ok(());
    let mut on_epoch = |l: &EpochLog| {
        if log_err.is_ok() {
            log_err = log.line(&epoch_line(cfg, fold, l));
        }
    };
    let stages = cfg.stage.indices();
    let model = match init {
        Model::Cascade { mut stages, cascade } if cfg.stage != Stage::All => {
            let tr = stage_datasets(&train, cascade)?;
            let va = stage_datasets(&val, cascade)?;
            for &i in &cfg.stage.indices() {
                let (m, _) = train_stage(stages[i].clone(), i as u8 + 1, &tr[i], &va[i], &tcfg, &mut on_epoch)?;
                stages[i] = m;
            }
            Model::Cascade { stages, cascade }
        }
        m => train_model(m, &train, &val, &tcfg, &mut on_epoch)?.0,
    };
    log_err?;
    save_model(&model, dir, &stages)?;
    Ok(model)
}

fn append_rows(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(CliError::io(path))?;
    let mut text = String::new();
    if f.metadata().map_err(CliError::io(path))?.len() == 0 {
        text.push_str(header);
        text.push('\n');
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(CliError::io(path))?;
    f.flush().map_err(CliError::io(path))
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let samples = generate_phantom(&cfg.phantom())?;
    if let Some(parent) = cfg.data_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    write_dataset(&samples, &cfg.data_path)?;

    let mut pixels = [0usize; NUM_LABELS];
    let mut present = [0usize; NUM_ROIS];
    for s in &samples {
        for (t, c) in pixels.iter_mut().zip(s.labels().histogram(NUM_LABELS)) {
            *t += c;
        }
        for (t, &p) in present.iter_mut().zip(s.presence()) {
            *t += p as usize;
        }
    }
    let mut m = String::new();
    writeln!(m, "seed={}", cfg.seed).unwrap();
    writeln!(m, "n_samples={}", samples.len()).unwrap();
    writeln!(m, "image_size={}", cfg.image_size).unwrap();
    for l in LabelId::ALL {
        writeln!(m, "pixels_{}={}", l.name(), pixels[l as usize]).unwrap();
    }
    for l in LabelId::ROIS {
        writeln!(m, "present_{}={}", l.name(), present[l as usize - 1]).unwrap();
    }
    let path = manifest_path(&cfg.data_path);
    fs::write(&path, m).map_err(CliError::io(&path))?;
    println!("wrote {} samples to {}", samples.len(), cfg.data_path.display());
    Ok(())
}

pub fn manifest_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = ctx.data()?;
    let folds = ctx.folds(data.len())?;
    let mut log = RunLog::open(&cfg.out_dir)?;
    for f in 0..cfg.active_folds() {
        let model = train_fold(cfg, ctx.workers, &data, &folds, f, &fold_dir(&cfg.out_dir, f), &mut log)?;
        let val = select(&data, &folds[f]);
        if cfg.stage == Stage::All {
            let r = model.evaluate(&val, None, ctx.workers)?;
            let d = r.mean_dice.map_or("NA".to_string(), |d| format!("{d:.4}"));
            println!("fold {f}: val mean Dice {d}");
        } else {
            println!("fold {f}: trained stage {}", cfg.stage);
        }
    }
    Ok(())
}

fn row_key(cfg: &RunConfig, config: String, fold: usize, split: String) -> RowKey {
    RowKey {
        config,
        fold: fold.to_string(),
        seed: cfg.seed,
        split,
    }
}

pub fn eval(ctx: &Context, split: Split, oracle: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = ctx.data()?;
    let folds = ctx.folds(data.len())?;
    let mut rows = Vec::new();
    for f in 0..cfg.active_folds() {
        let idx = match split {
            Split::Val => folds[f].clone(),
            Split::Train => training_indices(&folds, f),
        };
        let samples = select(&data, &idx);
        let (name, preds) = if oracle {
            ("Oracle".to_string(), oracle_predictions(&samples))
        } else {
            let model = load_model(cfg, &fold_dir(&cfg.out_dir, f))?;
            (cfg.name(), model.predict_all(&samples, None, ctx.workers)?)
        };
        let r = report(&preds, &samples)?;
        rows.push(csv_row(&row_key(cfg, name, f, split.name().into()), &r));
    }
    for r in &rows {
        println!("{r}");
    }
    append_rows(&cfg.out_dir.join(METRICS_FILE), &csv_header(), &rows)
}

fn attack_split(epsilon: f64) -> String {
    format!("val_fgsm(eps={epsilon})")
}

fn attack_cfg(cfg: &RunConfig, epsilon: f64) -> Result<AttackConfig> {
    let a = AttackConfig {
        epsilon,
        ..cfg.attack()
    };
    a.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(a)
}

pub fn attack_eval(ctx: &Context, epsilons: &[f64]) -> Result<()> {
    let cfg = &ctx.cfg;
    let eps: Vec<f64> = if epsilons.is_empty() { vec![cfg.epsilon] } else { epsilons.to_vec() };
    let attacks = eps.iter().map(|&e| attack_cfg(cfg, e)).collect::<Result<Vec<_>>>()?;
    let data = ctx.data()?;
    let folds = ctx.folds(data.len())?;
    let mut rows = Vec::new();
    for f in 0..cfg.active_folds() {
        let model = load_model(cfg, &fold_dir(&cfg.out_dir, f))?;
        let val = select(&data, &folds[f]);
        let clean = model.evaluate(&val, None, ctx.workers)?;
        rows.push(csv_row(&row_key(cfg, cfg.name(), f, "val".into()), &clean));
        for a in &attacks {
            let r = model.evaluate(&val, Some(a), ctx.workers)?;
            rows.push(csv_row(&row_key(cfg, cfg.name(), f, attack_split(a.epsilon)), &r));
        }
    }
    for r in &rows {
        println!("{r}");
    }
    append_rows(&cfg.out_dir.join(METRICS_FILE), &csv_header(), &rows)
}

pub struct InferInput {
    pub index: usize,
    pub input: Option<PathBuf>,
    pub fold: usize,
    pub oracle: bool,
}

pub const INFER_LABELS: &str = "infer.segv";
pub const INFER_RENDER: &str = "infer.ppm";

pub fn infer(ctx: &Context, req: &InferInput) -> Result<()> {
    let cfg = &ctx.cfg;
    let sample = match &req.input {
        Some(p) => read_dataset(p)?
            .into_iter()
            .next()
            .ok_or_else(|| CliError::Usage(format!("{} holds no samples", p.display())))?,
        None => {
            let data = ctx.data()?;
            let n = data.len();
            data.into_iter()
                .nth(req.index)
                .ok_or_else(|| CliError::Usage(format!("sample index {} out of range (dataset has {n})", req.index)))?
        }
    };
    if req.fold >= cfg.folds {
        return Err(CliError::Usage(format!("fold {} out of range", req.fold)));
    }
    let pred = if req.oracle {
        oracle_predictions(std::slice::from_ref(&sample)).remove(0)
    } else {
        load_model(cfg, &fold_dir(&cfg.out_dir, req.fold))?.predict(&sample, None)?
    };
    let out = Sample::new(sample.image().clone(), pred.labels)?;
    write_dataset(&[out.clone()], cfg.out_dir.join(INFER_LABELS))?;
    let path = cfg.out_dir.join(INFER_RENDER);
    fs::write(&path, render_ppm(out.labels())).map_err(CliError::io(&path))?;
    if let Some(p) = pred.presence {
        let names: Vec<&str> = LabelId::ROIS
            .iter()
            .zip(p)
            .filter(|(_, present)| *present)
            .map(|(l, _)| l.name())
            .collect();
        println!("present: {}", names.join(" "));
    }
    println!("wrote {}", cfg.out_dir.join(INFER_LABELS).display());
    Ok(())
}

/// The configurations compared by `ablate`, as (row kind, config).
pub fn ablation_rows(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let with = |class_head, defense, cascade, epsilon| RunConfig {
        class_head,
        defense,
        cascade,
        epsilon,
        stage: Stage::All,
        ..base.clone()
    };
    let eps = base.epsilon;
    vec![
        ("config", with(false, false, false, eps)),
        ("config", with(true, false, false, eps)),
        ("config", with(true, true, false, eps)),
        ("config", with(true, true, true, eps)),
        ("eps_sweep", with(true, true, false, 0.05)),
        ("eps_sweep", with(true, true, false, 0.1)),
        ("eps_sweep", with(true, true, false, 0.2)),
    ]
}

pub fn ablation_header() -> String {
    let mut s = String::from("row,config,seed,fold_hash,folds_evaluated");
    for roi in LabelId::ROIS {
        write!(s, ",dice_{}", roi.name()).unwrap();
    }
    s.push_str(",dice_mean,acc_presence_mean,attack_epsilon,dice_mean_attacked");
    s
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

struct FoldResult {
    clean: EvalReport,
    attacked: EvalReport,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

pub fn ablate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let attack = attack_cfg(cfg, cfg.epsilon)?;
    let data = ctx.data()?;
    let folds = ctx.folds(data.len())?;
    let hash = fold_fingerprint(&folds);
    let summary_path = cfg.out_dir.join(ABLATION_FILE);
    let _ = fs::remove_file(&summary_path);
    let mut log = RunLog::open(&cfg.out_dir)?;
    let mut done: HashMap<String, Vec<FoldResult>> = HashMap::new();
    for (kind, row_cfg) in ablation_rows(cfg) {
        let name = row_cfg.name();
        if !done.contains_key(&name) {
            let root = cfg.out_dir.join("ablate").join(slug(&name));
            let mut results = Vec::new();
            let mut rows = Vec::new();
            for f in 0..cfg.active_folds() {
                let model = train_fold(&row_cfg, ctx.workers, &data, &folds, f, &fold_dir(&root, f), &mut log)?;
                let val = select(&data, &folds[f]);
                let clean = model.evaluate(&val, None, ctx.workers)?;
                let attacked = model.evaluate(&val, Some(&attack), ctx.workers)?;
                rows.push(csv_row(&row_key(cfg, name.clone(), f, "val".into()), &clean));
                rows.push(csv_row(&row_key(cfg, name.clone(), f, attack_split(attack.epsilon)), &attacked));
                results.push(FoldResult { clean, attacked });
            }
            append_rows(&cfg.out_dir.join(METRICS_FILE), &csv_header(), &rows)?;
            done.insert(name.clone(), results);
        }
        let results = &done[&name];
        let mut line = format!("{kind},{name},{},{hash},{}", cfg.seed, results.len());
        for roi in LabelId::ROIS {
            let k = roi as usize - 1;
            write!(line, ",{}", cell(mean(results.iter().filter_map(|r| r.clean.dice[k])))).unwrap();
        }
        write!(
            line,
            ",{},{},{},{}",
            cell(mean(results.iter().filter_map(|r| r.clean.mean_dice))),
            cell(mean(results.iter().filter_map(|r| r.clean.presence_mean()))),
            attack.epsilon,
            cell(mean(results.iter().filter_map(|r| r.attacked.mean_dice))),
        )
        .unwrap();
        println!("{line}");
        append_rows(&summary_path, &ablation_header(), &[line])?;
    }
    Ok(())
}

pub fn dump_plans() -> String {
    PLANS.iter().map(|p| format!("{p}\n")).collect::<Vec<_>>().join("\n")
}
