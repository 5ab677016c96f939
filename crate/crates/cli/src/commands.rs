use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::ValueEnum;
use log::{info, warn};

use snake_core::dataset::{LabelMap, LabeledDataset, Sample};
use snake_core::diag::{
    check_quadratic, detect_gate_anomaly, evaluate, evaluate_by_source, split_dataset, tower_convergence_check,
    ConvergenceReport, TaskPredictor,
};
use snake_core::expert::{self, ExpertModel};
use snake_core::featfile::{load_features, save_features};
use snake_core::fusion::{configure_fusion, fine_tune, model_kind, FusedModel, FusionMode, FusionOptions, TaskRelation};
use snake_core::ingest::{assemble_flows, extract_features, parse_pcap, read_flow_records, FlowRecord};
use snake_core::nn::{argmax, TrainConfig};
use snake_core::synth::{generate_dataset, read_labels_csv, GeneratorSpec};

use crate::config::RunConfig;
use crate::{ClassifyArgs, ConvergenceArgs, EvalArgs, FuseArgs, GateAnomalyArgs, GenArgs, IngestArgs, TrainExpertArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    All,
    Test,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_merged(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let parts = paths
        .iter()
        .map(|p| load_features(p).with_context(|| format!("loading features {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    Ok(LabeledDataset::merge(&parts.iter().collect::<Vec<_>>())?)
}

pub fn gen(args: &GenArgs, seed: Option<u64>) -> Result<u64> {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: GeneratorSpec = toml::from_str(&text).context("generator spec")?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_dataset(&spec)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut flows = create(&args.out_dir.join("flows.txt"))?;
    data.write_flow_records(&mut flows)?;
    flows.flush()?;
    let mut labels = create(&args.out_dir.join("labels.csv"))?;
    data.write_labels_csv(&mut labels)?;
    labels.flush()?;
    save_features(&data.dataset, args.out_dir.join("features.snkf"))?;
    info!("generated {} flows", data.dataset.len());
    Ok(spec.seed)
}

fn is_pcap(bytes: &[u8]) -> bool {
    const MAGICS: [[u8; 4]; 4] = [
        [0xd4, 0xc3, 0xb2, 0xa1],
        [0xa1, 0xb2, 0xc3, 0xd4],
        [0x4d, 0x3c, 0xb2, 0xa1],
        [0xa1, 0xb2, 0x3c, 0x4d],
    ];
    bytes.len() >= 4 && MAGICS.iter().any(|m| bytes[..4] == m[..])
}

pub fn ingest(args: &IngestArgs, cfg: &RunConfig) -> Result<()> {
    let extraction = cfg.extraction.to_core();
    extraction.validate()?;
    let bytes = fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let source = match &args.source {
        Some(s) => s.clone(),
        None => args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let records: Vec<FlowRecord> = if is_pcap(&bytes) {
        let cap = parse_pcap(&bytes)?;
        let asm = assemble_flows(cap.packets);
        if cap.skipped + asm.skipped > 0 {
            warn!("skipped {} malformed packets", cap.skipped + asm.skipped);
        }
        asm.flows
            .into_iter()
            .enumerate()
            .map(|(i, flow)| FlowRecord {
                id: format!("{source}-{i:05}"),
                flow,
            })
            .collect()
    } else {
        let set = read_flow_records(bytes.as_slice())?;
        if set.skipped > 0 {
            warn!("skipped {} malformed flow records", set.skipped);
        }
        set.records
    };

    let (task_ids, label_maps, table) = match &args.labels {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let t = read_labels_csv(BufReader::new(f))?;
            (t.task_ids.clone(), t.label_maps()?, Some(t))
        }
        None => (Vec::new(), Vec::new(), None),
    };
    let mut samples = Vec::with_capacity(records.len());
    let mut unlabelled = 0;
    for r in records {
        let labels = match &table {
            Some(t) => match t.labels_for(&r.id) {
                Some(l) => l,
                None => {
                    unlabelled += 1;
                    continue;
                }
            },
            None => Vec::new(),
        };
        samples.push(Sample {
            features: extract_features(&r.flow, &extraction)?,
            id: r.id,
            source: source.clone(),
            labels,
        });
    }
    if unlabelled > 0 {
        warn!("dropped {unlabelled} flows without labels for every task");
    }
    ensure!(!samples.is_empty(), "no flows to write");
    let data = LabeledDataset::new(task_ids, label_maps, samples)?;
    save_features(&data, &args.out)?;
    info!("wrote {} feature vectors", data.len());
    Ok(())
}

pub fn train_expert(args: &TrainExpertArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let all = load_features(&args.features)?;
    let mut data = all.single_task(&args.task)?;
    if !args.classes.is_empty() {
        let classes: Vec<&str> = args.classes.iter().map(String::as_str).collect();
        data = data.restrict_classes(&args.task, &classes)?;
    }
    let (train, val, test) = split_dataset(&data, cfg.split.ratios(), seed)?;
    let tc = TrainConfig {
        learning_rate: cfg.expert.learning_rate,
        batch_size: cfg.expert.batch_size,
        epochs: cfg.expert.epochs,
        dropout_rate: cfg.expert.dropout,
        seed,
    };
    let id = args.id.clone().unwrap_or_else(|| args.task.clone());
    let trained = expert::train_expert(&id, &train, (!val.is_empty()).then_some(&val), &tc)?;
    trained.model.save(&args.out)?;
    if let Some(p) = &args.trace {
        let mut w = create(p)?;
        snake_core::trace::write_epoch_csv(&trained.epochs, &mut w)?;
        w.flush()?;
    }
    if !test.is_empty() {
        let m = evaluate(&trained.model, &test, &args.task)?;
        println!("{id}: test accuracy {:.4} on {} flows", m.accuracy, test.len());
    }
    Ok(())
}

/// Fine-class parents by name, or derived from samples labelled on both tasks.
fn nesting(data: &LabeledDataset, coarse_task: &str, fine_task: &str, named: &[String]) -> Result<(LabelMap, LabelMap, Vec<usize>)> {
    let c = data.task_index(coarse_task)?;
    let f = data.task_index(fine_task)?;
    let coarse = data.label_maps[c].clone();
    let fine = data.label_maps[f].clone();
    let parent = if named.is_empty() {
        let mut parent = vec![None; fine.len()];
        for s in &data.samples {
            let slot = &mut parent[s.labels[f]];
            match *slot {
                None => *slot = Some(s.labels[c]),
                Some(p) if p != s.labels[c] => bail!(
                    "fine class {:?} appears under two coarse classes",
                    fine.name(s.labels[f]).unwrap_or("?")
                ),
                Some(_) => {}
            }
        }
        parent
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| anyhow!("fine class {:?} has no samples", fine.name(i).unwrap_or("?"))))
            .collect::<Result<Vec<_>>>()?
    } else {
        ensure!(
            named.len() == fine.len(),
            "fusion.parent lists {} entries for {} fine classes",
            named.len(),
            fine.len()
        );
        named
            .iter()
            .map(|n| coarse.index(n).ok_or_else(|| anyhow!("unknown coarse class {n:?} in fusion.parent")))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((coarse, fine, parent))
}

pub fn fuse(args: &FuseArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let mode: FusionMode = args.mode.parse()?;
    let experts = args
        .experts
        .iter()
        .map(|p| ExpertModel::load(p).with_context(|| format!("loading expert {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let data = load_merged(&args.features)?;
    let all: Vec<usize> = (0..experts.len()).collect();
    let relation = match mode {
        FusionMode::ModeI => TaskRelation::independent(experts.iter().map(|e| e.task_id.clone())),
        FusionMode::ModeII => {
            let task_id = match &cfg.fusion.task {
                Some(t) => t.clone(),
                None => {
                    let t = &experts[0].task_id;
                    ensure!(
                        experts.iter().all(|e| &e.task_id == t),
                        "experts classify different tasks; set fusion.task"
                    );
                    t.clone()
                }
            };
            TaskRelation::Expansion {
                task_id,
                experts: all,
                union: None,
            }
        }
        FusionMode::ModeIII => {
            let coarse_task = cfg.fusion.coarse_task.clone().context("Mode III needs fusion.coarse_task")?;
            let fine_task = cfg.fusion.fine_task.clone().context("Mode III needs fusion.fine_task")?;
            let (coarse, fine, parent) = nesting(&data, &coarse_task, &fine_task, &cfg.fusion.parent)?;
            TaskRelation::Refinement {
                coarse_task,
                coarse,
                fine_task,
                fine,
                parent,
                experts: all,
            }
        }
    };
    let opts = FusionOptions {
        seed,
        tower_dropout: cfg.fusion.tower_dropout,
        loss_weights: cfg.fusion.loss_weights.iter().map(|(k, v)| (k.clone(), *v)).collect(),
    };
    let mut model = configure_fusion(experts, vec![relation], &opts)?;
    let (train, val, _) = split_dataset(&data, cfg.split.ratios(), seed)?;
    let tc = TrainConfig {
        learning_rate: cfg.fusion.learning_rate_for(mode),
        batch_size: cfg.fusion.batch_size,
        epochs: cfg.fusion.epochs_for(mode),
        dropout_rate: cfg.fusion.tower_dropout,
        seed,
    };
    let trace = fine_tune(&mut model, &train, (!val.is_empty()).then_some(&val), &tc, args.unfreeze_experts)?;
    model.save(&args.out)?;
    if let Some(p) = &args.trace {
        let mut w = create(p)?;
        trace.write_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(last) = trace.epochs.last() {
        println!("fused {} tasks; final training loss {:.6}", model.tasks.len(), last.total_loss);
    }
    Ok(())
}

enum AnyModel {
    Expert(ExpertModel),
    Fused(FusedModel),
}

impl AnyModel {
    fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
        Ok(match model_kind(&bytes)?.as_str() {
            "expert" => AnyModel::Expert(ExpertModel::from_bytes(&bytes)?),
            "fused" => AnyModel::Fused(FusedModel::from_bytes(&bytes)?),
            k => bail!("unknown model kind {k:?}"),
        })
    }

    fn task_ids(&self) -> Vec<String> {
        match self {
            AnyModel::Expert(e) => vec![e.task_id.clone()],
            AnyModel::Fused(m) => m.tasks.iter().map(|t| t.task_id.clone()).collect(),
        }
    }

    fn predictor(&self) -> &dyn TaskPredictor {
        match self {
            AnyModel::Expert(e) => e,
            AnyModel::Fused(m) => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainKind {
    Source,
    Task,
}

pub fn classify(args: &ClassifyArgs) -> Result<()> {
    let model = AnyModel::load(&args.model)?;
    let data = load_features(&args.features)?;
    let tasks = model.task_ids();
    let mut w = create(&args.out)?;
    write!(w, "flow_id")?;
    for t in &tasks {
        write!(w, ",{t},{t}_confidence")?;
    }
    writeln!(w)?;
    let p = model.predictor();
    for s in &data.samples {
        write!(w, "{}", s.id)?;
        for t in &tasks {
            let probs = p.predict_task(&s.features, t)?;
            let k = argmax(&probs);
            write!(w, ",{},{}", p.label_map(t)?.name(k).unwrap_or("?"), probs[k])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn eval(args: &EvalArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let model = AnyModel::load(&args.model)?;
    let mut data = load_merged(&args.features)?;
    if args.split == EvalSplit::Test {
        data = split_dataset(&data, cfg.split.ratios(), seed)?.2;
    }
    let tasks = match &args.task {
        Some(t) => vec![t.clone()],
        None => model.task_ids(),
    };
    fs::create_dir_all(&args.out_dir)?;
    for t in &tasks {
        let m = evaluate(model.predictor(), &data, t)?;
        let mut w = create(&args.out_dir.join(format!("metrics_{t}.csv")))?;
        m.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&args.out_dir.join(format!("confusion_{t}.csv")))?;
        m.write_confusion_csv(&mut w)?;
        w.flush()?;
        println!(
            "{t}: accuracy {:.4} macro-F1 {:.4} on {} flows",
            m.accuracy,
            m.macro_f1,
            data.len()
        );
    }
    Ok(())
}

fn write_report(dir: &Path, report: &ConvergenceReport, losses: &[f64]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("convergence.csv"))?;
    report.write_csv(losses, &mut w)?;
    w.flush()?;
    fs::write(dir.join("report.txt"), report.summary())?;
    println!("verdict: {}", report.verdict);
    Ok(())
}

pub fn convergence(args: &ConvergenceArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let steps = args.steps.unwrap_or(cfg.diag.gd_steps);
    if let Some(c) = args.quadratic {
        let alpha = args.alpha.unwrap_or(cfg.diag.alpha_fraction / c);
        let report = check_quadratic(c, alpha, 1.0, steps)?;
        let losses: Vec<f64> = snake_core::diag::quadratic_descent(c, alpha, 1.0, steps).0.losses;
        return write_report(&args.out_dir, &report, &losses);
    }
    let model_path = args.model.as_ref().context("--model or --quadratic required")?;
    let features = args.features.as_ref().context("--features required with --model")?;
    let model = FusedModel::load(model_path)?;
    let mut data = load_features(features)?;
    if cfg.diag.gd_samples > 0 && data.len() > cfg.diag.gd_samples {
        let keep: Vec<usize> = (0..cfg.diag.gd_samples).collect();
        data = data.subset(&keep);
    }
    let task = match &args.task {
        Some(t) => model.task_index(t)?,
        None => 0,
    };
    let prep = model.prepare(&data)?;
    let run = tower_convergence_check(
        &model,
        &prep,
        task,
        steps,
        args.alpha_fraction.unwrap_or(cfg.diag.alpha_fraction),
        seed,
    )?;
    info!("curvature probe {}", run.c_probe);
    write_report(&args.out_dir, &run.report, &run.trace.losses)
}

/// `total_loss` column of a fine-tune trace.
fn read_total_losses(path: &Path) -> Result<Vec<f64>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().context("empty trace")??;
    let col = header
        .split(',')
        .position(|h| h == "total_loss")
        .context("trace has no total_loss column")?;
    lines
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l?;
            let v = l.split(',').nth(col).context("short trace row")?;
            v.parse::<f64>().with_context(|| format!("bad loss {v:?}"))
        })
        .collect()
}

pub fn gate_anomaly(args: &GateAnomalyArgs, cfg: &RunConfig) -> Result<()> {
    let losses = read_total_losses(&args.trace)?;
    let model = FusedModel::load(&args.model)?;
    let data = load_features(&args.features)?;
    let per_domain = match args.by {
        DomainKind::Source => {
            let task = match &args.task {
                Some(t) => t.clone(),
                None => model.tasks[0].task_id.clone(),
            };
            evaluate_by_source(&model, &data, &task)?
        }
        DomainKind::Task => model
            .tasks
            .iter()
            .map(|t| Ok((t.task_id.clone(), evaluate(&model, &data, &t.task_id)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    let report = detect_gate_anomaly(&losses, &per_domain, cfg.diag.grace_epochs, cfg.diag.gap_threshold)?;
    let text = report.summary();
    match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => print!("{text}"),
    }
    if report.flagged {
        println!("gate anomaly flagged");
    }
    Ok(())
}
