use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bke_core::bke::{self, BkeConfig, FinetuneOutput};
use bke_core::data::{self, Dataset, SplitManifest};
use bke_core::gradcheck::{self, GradCheck};
use bke_core::metrics::{self, EpochMetrics};
use bke_core::models::{ModelBundle, ModelSpecs};
use bke_core::ssl;
use bke_core::tensor;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::table;
use crate::{
    BkeFlags, Common, DataArgs, EvalArgs, FinetuneArgs, GradcheckArgs, Grid, Method,
    PretrainArgs, PropagateArgs, SslFlags, SweepArgs, SynthArgs,
};

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn base_config(common: &Common, data: Option<&DataArgs>) -> Result<RunConfig> {
    let mut c = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        c.seed(seed);
    }
    if let Some(d) = data {
        if let Some(p) = &d.data {
            c.paths.data = Some(p.clone());
        }
        if let Some(p) = &d.split {
            c.paths.split = Some(p.clone());
        }
    }
    Ok(c)
}

fn apply_ssl(c: &mut RunConfig, f: &SslFlags) {
    let s = &mut c.ssl;
    s.epochs = f.epochs.unwrap_or(s.epochs);
    s.batch_size = f.batch_size.unwrap_or(s.batch_size);
    s.learning_rate = f.lr.unwrap_or(s.learning_rate);
    s.momentum = f.momentum.unwrap_or(s.momentum);
    s.zeta = f.zeta.unwrap_or(s.zeta);
}

fn apply_method(b: &mut BkeConfig, method: Option<Method>, iters: Option<usize>) -> Result<()> {
    let current_iters = match b.propagation {
        bke::Propagation::Iterative(t) => t,
        bke::Propagation::ClosedForm => 200,
    };
    match method {
        Some(Method::Closed) => b.propagation = config::propagation("closed", 0)?,
        Some(Method::Iter) => {
            b.propagation = config::propagation("iter", iters.unwrap_or(current_iters))?
        }
        None => {
            if let (Some(t), bke::Propagation::Iterative(_)) = (iters, b.propagation) {
                b.propagation = config::propagation("iter", t)?;
            }
        }
    }
    Ok(())
}

fn apply_bke(c: &mut RunConfig, f: &BkeFlags) -> Result<()> {
    let b = &mut c.bke;
    b.omega = f.omega.unwrap_or(b.omega);
    b.batch_size = f.batch_size.unwrap_or(b.batch_size);
    b.lambda = f.lambda.unwrap_or(b.lambda);
    b.tau = f.tau.unwrap_or(b.tau);
    b.epochs = f.epochs.unwrap_or(b.epochs);
    b.learning_rate = f.lr.unwrap_or(b.learning_rate);
    b.momentum = f.momentum.unwrap_or(b.momentum);
    b.positive_class = f.positive_class.unwrap_or(b.positive_class);
    b.eval_window = f.eval_window.unwrap_or(b.eval_window);
    c.fraction = f.fraction.unwrap_or(c.fraction);
    apply_method(b, f.method, f.iters)
}

fn load_data(c: &RunConfig) -> Result<Dataset> {
    let dir = c.data()?;
    data::read_container(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_split(c: &RunConfig, ds: &Dataset) -> Result<Option<SplitManifest>> {
    let Some(path) = &c.paths.split else {
        return Ok(None);
    };
    let split = SplitManifest::read(path).with_context(|| format!("loading split {}", path.display()))?;
    split
        .validate(ds.len())
        .with_context(|| format!("checking split {}", path.display()))?;
    Ok(Some(split))
}

fn load_checkpoint(c: &RunConfig) -> Result<ModelBundle> {
    let path = c.checkpoint()?;
    ModelBundle::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.train_per_class == 0 || a.test_per_class == 0 {
        bail!("--train-per-class and --test-per-class must be >= 1");
    }
    let (train, test) = data::synth_train_test(a.train_per_class, a.test_per_class, a.side, a.seed)?;
    let all = train.concat(&test)?;
    prepare_out(&a.out)?;
    data::write_container(&a.out, &all)?;
    let split = SplitManifest {
        seed: a.seed,
        fraction: 1.0,
        train: (0..train.len()).collect(),
        test: (train.len()..all.len()).collect(),
    };
    split.write(a.out.join("split.json"))?;

    #[derive(Serialize)]
    struct SynthConfig {
        train_per_class: usize,
        test_per_class: usize,
        side: usize,
        seed: u64,
    }
    let echo = SynthConfig {
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        side: a.side,
        seed: a.seed,
    };
    write(&a.out, "config.json", serde_json::to_string_pretty(&echo)? + "\n")?;
    eprintln!(
        "wrote {} images ({} train, {} test) to {}",
        all.len(),
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut c = base_config(&a.common, Some(&a.data))?;
    apply_ssl(&mut c, &a.ssl);
    c.validate()?;
    let ds = load_data(&c)?;
    let indices = match load_split(&c, &ds)? {
        Some(s) => s.train,
        None => (0..ds.len()).collect(),
    };
    let specs = c.model.clone().unwrap_or_else(|| ModelSpecs::desk(ds.height()));
    let out = ssl::pretrain(&ds, &indices, &specs, &c.ssl)?;
    for e in &out.log {
        eprintln!(
            "pretrain epoch {}: loss_cv {:.6} loss_cm {:.6} total {:.6}",
            e.epoch, e.loss_cv, e.loss_cm, e.loss_total
        );
    }
    prepare_out(&a.common.out)?;
    out.bundle.save(a.common.out.join("pretrain.bkec"))?;
    write(&a.common.out, "loss.csv", ssl::loss_csv(&out.log))?;
    c.write(&a.common.out)
}

/// Stratified subset of the split's training images, and its test images.
fn finetune_split(c: &RunConfig, ds: &Dataset) -> Result<SplitManifest> {
    let Some(split) = load_split(c, ds)? else {
        bail!("fine-tuning needs a split manifest (use --split or paths.split)");
    };
    let labels = ds.labels_of(&split.train);
    let picked = data::stratified_subsample(&labels, ds.num_classes(), c.fraction, c.bke.seed)?;
    Ok(SplitManifest {
        seed: c.bke.seed,
        fraction: c.fraction,
        train: picked.into_iter().map(|p| split.train[p]).collect(),
        test: split.test,
    })
}

fn run_finetune(c: &RunConfig, ds: &Dataset, split: &SplitManifest, bundle: ModelBundle) -> Result<FinetuneOutput> {
    Ok(bke::finetune(bundle, ds, &split.train, ds, &split.test, &c.bke)?)
}

fn training_csv(out: &FinetuneOutput) -> String {
    let mut s = String::from("epoch,loss,cross_entropy,kl\n");
    for e in &out.training {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e}",
            e.epoch, e.loss, e.cross_entropy, e.kl
        );
    }
    s
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut c = base_config(&a.common, Some(&a.data))?;
    if let Some(p) = &a.checkpoint {
        c.paths.checkpoint = Some(p.clone());
    }
    apply_bke(&mut c, &a.bke)?;
    c.validate()?;
    let ds = load_data(&c)?;
    let split = finetune_split(&c, &ds)?;
    let bundle = load_checkpoint(&c)?;
    eprintln!(
        "fine-tuning on {} images, evaluating on {}",
        split.train.len(),
        split.test.len()
    );
    let out = run_finetune(&c, &ds, &split, bundle)?;
    for (t, m) in out.training.iter().zip(&out.history) {
        eprintln!(
            "finetune epoch {}: loss {:.6} acc {:.4} hm {:.4} auc {:.4}",
            t.epoch, t.loss, m.acc, m.hm, m.auc
        );
    }
    let dir = &a.common.out;
    prepare_out(dir)?;
    out.bundle.save(dir.join("finetune.bkec"))?;
    write(dir, "metrics.csv", metrics::metrics_csv(&out.history))?;
    write(dir, "train_loss.csv", training_csv(&out))?;
    write(dir, "report.json", serde_json::to_string_pretty(&out.report)? + "\n")?;
    split.write(dir.join("split.json"))?;
    c.write(dir)
}

#[derive(Serialize)]
struct EvalReport {
    images: usize,
    positive_class: usize,
    sen: f64,
    spe: f64,
    hm: f64,
    auc: f64,
    acc: f64,
    /// Rows are true classes, columns predictions.
    confusion: Vec<Vec<u64>>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut c = base_config(&a.common, Some(&a.data))?;
    if let Some(p) = &a.checkpoint {
        c.paths.checkpoint = Some(p.clone());
    }
    c.bke.positive_class = a.positive_class.unwrap_or(c.bke.positive_class);
    c.validate()?;
    let ds = load_data(&c)?;
    let indices = match load_split(&c, &ds)? {
        Some(s) => s.test,
        None => (0..ds.len()).collect(),
    };
    let bundle = load_checkpoint(&c)?;
    let m: EpochMetrics = bke::evaluate(&bundle, &ds, &indices, c.bke.positive_class, 0)?;
    let logits = bke::predict_logits(&bundle, &ds, &indices)?;
    let cm = metrics::confusion(
        &tensor::argmax_rows(&logits),
        &ds.labels_of(&indices),
        ds.num_classes(),
    )?;
    let report = EvalReport {
        images: indices.len(),
        positive_class: c.bke.positive_class,
        sen: m.sen,
        spe: m.spe,
        hm: m.hm,
        auc: m.auc,
        acc: m.acc,
        confusion: cm.rows(),
    };
    eprintln!(
        "{} images: sen {:.4} spe {:.4} hm {:.4} auc {:.4} acc {:.4}",
        report.images, m.sen, m.spe, m.hm, m.auc, m.acc
    );
    prepare_out(&a.common.out)?;
    write(&a.common.out, "eval.json", serde_json::to_string_pretty(&report)? + "\n")?;
    c.write(&a.common.out)
}

pub fn propagate(a: PropagateArgs) -> Result<()> {
    let mut c = base_config(&a.common, None)?;
    c.bke.omega = a.omega.unwrap_or(c.bke.omega);
    c.bke.tau = a.tau.unwrap_or(c.bke.tau);
    apply_method(&mut c.bke, a.method, a.iters)?;
    c.validate()?;
    let features = table::read_matrix(&a.features)?;
    let logits = table::read_matrix(&a.logits)?;
    if features.rows() != logits.rows() {
        bail!(
            "{} has {} rows but {} has {}",
            a.features.display(),
            features.rows(),
            a.logits.display(),
            logits.rows()
        );
    }
    let q = bke::batch_soft_targets(&features, &logits, c.bke.omega, c.bke.tau, c.bke.propagation)?;
    prepare_out(&a.common.out)?;
    write(&a.common.out, "q.csv", table::matrix_csv(&q.values))?;
    c.write(&a.common.out)
}

/// Values studied for each hyperparameter.
pub fn preset(grid: Grid) -> Vec<f64> {
    match grid {
        Grid::Omega => vec![0.1, 0.3, 0.5, 0.7, 0.9],
        Grid::BatchSize => vec![32.0, 64.0, 128.0, 256.0, 512.0],
        Grid::Tau => vec![2.0, 4.0, 8.0, 16.0],
        Grid::Lambda => vec![0.5, 1.0, 2.0, 4.0],
        Grid::All => Vec::new(),
    }
}

fn grid_name(grid: Grid) -> &'static str {
    match grid {
        Grid::Omega => "omega",
        Grid::BatchSize => "batch_size",
        Grid::Tau => "tau",
        Grid::Lambda => "lambda",
        Grid::All => "all",
    }
}

fn with_value(base: &BkeConfig, grid: Grid, value: f64) -> Result<BkeConfig> {
    let mut b = base.clone();
    match grid {
        Grid::Omega => b.omega = value,
        Grid::BatchSize => {
            if value < 1.0 || value.fract() != 0.0 {
                bail!("batch size must be a positive integer, got {value}");
            }
            b.batch_size = value as usize;
        }
        Grid::Tau => b.tau = value,
        Grid::Lambda => b.lambda = value,
        Grid::All => unreachable!("expanded before use"),
    }
    b.validate()?;
    Ok(b)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut c = base_config(&a.common, Some(&a.data))?;
    if let Some(p) = &a.checkpoint {
        c.paths.checkpoint = Some(p.clone());
    }
    apply_bke(&mut c, &a.bke)?;
    c.validate()?;
    let points: Vec<(Grid, f64)> = match (a.grid, &a.values) {
        (Grid::All, Some(_)) => bail!("--values needs a single --grid"),
        (Grid::All, None) => [Grid::Omega, Grid::BatchSize, Grid::Tau, Grid::Lambda]
            .into_iter()
            .flat_map(|g| preset(g).into_iter().map(move |v| (g, v)))
            .collect(),
        (g, Some(vs)) => vs.iter().map(|&v| (g, v)).collect(),
        (g, None) => preset(g).into_iter().map(|v| (g, v)).collect(),
    };
    let configs: Vec<(Grid, f64, BkeConfig)> = points
        .into_iter()
        .map(|(g, v)| Ok((g, v, with_value(&c.bke, g, v)?)))
        .collect::<Result<_>>()?;
    let ds = load_data(&c)?;
    let split = finetune_split(&c, &ds)?;
    let bundle = load_checkpoint(&c)?;
    let results: Vec<(f64, f64)> = configs
        .par_iter()
        .map(|(_, _, b)| {
            let point = RunConfig {
                bke: b.clone(),
                ..c.clone()
            };
            let out = run_finetune(&point, &ds, &split, bundle.clone())?;
            Ok((out.report.hm.mean, out.report.acc.mean))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("param,value,hm,acc\n");
    for ((g, v, _), (hm, acc)) in configs.iter().zip(&results) {
        eprintln!("{} = {v}: hm {hm:.4} acc {acc:.4}", grid_name(*g));
        let _ = writeln!(csv, "{},{v},{hm:.16e},{acc:.16e}", grid_name(*g));
    }
    prepare_out(&a.common.out)?;
    write(&a.common.out, "sweep.csv", csv)?;
    c.write(&a.common.out)
}

#[derive(Serialize)]
struct GradcheckLine {
    loss: &'static str,
    max_rel_error: f64,
    max_abs_error: f64,
    components: usize,
    passed: bool,
}

#[derive(Serialize)]
struct GradcheckReport {
    tolerance: f64,
    losses: Vec<GradcheckLine>,
    target_grad_max_abs: f64,
    soft_target_input_grad_max_abs: f64,
    passed: bool,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let check = GradCheck {
        gradient_offset: a.perturb,
        ..GradCheck::default()
    };
    let mut losses = Vec::new();
    for entry in gradcheck::loss_suite(&check, a.seed)? {
        let r = &entry.report;
        println!(
            "{:<12} max_rel_error {:.3e} max_abs_error {:.3e} components {:>4} {}",
            entry.name,
            r.max_rel_error,
            r.max_abs_error,
            r.components,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        losses.push(GradcheckLine {
            loss: entry.name,
            max_rel_error: r.max_rel_error,
            max_abs_error: r.max_abs_error,
            components: r.components,
            passed: r.passed(),
        });
    }
    let (psi, q_input) = gradcheck::stop_gradient_suite(a.seed)?;
    let stops_ok = psi == 0.0 && q_input == 0.0;
    println!(
        "stop_gradient target {psi:e} soft_target_inputs {q_input:e} {}",
        if stops_ok { "PASS" } else { "FAIL" }
    );
    let passed = stops_ok && losses.iter().all(|l| l.passed);
    let report = GradcheckReport {
        tolerance: check.tolerance,
        losses,
        target_grad_max_abs: psi,
        soft_target_input_grad_max_abs: q_input,
        passed,
    };
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        write(dir, "gradcheck.json", serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if !passed {
        bail!("gradient check failed (tolerance {:e})", check.tolerance);
    }
    Ok(())
}
