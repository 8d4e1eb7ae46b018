//! Command implementations shared by the binary and the integration tests.

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smooth_mil::data::{self, SynthSpec};
use smooth_mil::dirichlet;
use smooth_mil::eval::{
    attention_histogram, auroc, confusion_at, normalize_attention, optimal_threshold_f1,
    MetricReport,
};
use smooth_mil::mil::{
    self, Bag, Model, ModelSpec, TrainSchedule, Variant,
};
use smooth_mil::neural::ParamStore;
use smooth_mil::numerics::DenseMatrix;
use smooth_mil::verify::run_verification;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Marker for configuration/usage problems, mapped to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(anyhow!(UsageError(msg.into())))
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) => return usage(format!("cannot read config {}: {e}", path.display())),
    };
    match serde_json::from_str(&text) {
        Ok(v) => Ok(v),
        Err(e) => usage(format!(
            "malformed config {} at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        )),
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            ));
        }
        if non_empty {
            fs::remove_dir_all(out)?;
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the stored config.json bytes.
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub created_unix_seconds: u64,
    pub outputs: Vec<String>,
}

fn write_manifest(dir: &Path, config_bytes: &[u8], seed: u64, outputs: &[&str]) -> Result<()> {
    let manifest = RunManifest {
        config_hash: hex::encode(Sha256::digest(config_bytes)),
        seed,
        git_describe: git_describe(),
        created_unix_seconds: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn generate(config: &Path, out: &super::CommonOut) -> Result<ExitCode> {
    let mut spec: SynthSpec = read_config(config)?;
    if let Some(seed) = out.seed {
        spec.seed = seed;
    }
    if let Err(e) = spec.validate() {
        return usage(format!("invalid spec: {e}"));
    }
    prepare_out_dir(&out.out, out.force)?;
    let bags = data::generate(&spec)?;
    data::write_dataset(&out.out, &spec, &bags)?;
    let config_bytes = fs::read(out.out.join("spec.json"))?;
    write_manifest(
        &out.out,
        &config_bytes,
        spec.seed,
        &["spec.json", "manifest.jsonl", "graphs.jsonl"],
    )?;
    println!("wrote {} bags to {}", bags.len(), out.out.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn default_fractions() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub model: ModelSpec,
    pub schedule: TrainSchedule,
    #[serde(default = "default_fractions")]
    pub fractions: (f64, f64, f64),
    #[serde(default)]
    pub split_id: u64,
}

pub struct SplitBags {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

pub fn load_splits(cfg: &TrainConfig) -> Result<SplitBags> {
    let (_, bags) = data::read_dataset(&cfg.dataset)
        .with_context(|| format!("cannot read dataset {}", cfg.dataset.display()))?;
    let (tr, va, te) = data::split(&bags, cfg.fractions, cfg.schedule.seed, cfg.split_id)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| bags[i].clone()).collect();
    Ok(SplitBags {
        train: pick(&tr),
        val: pick(&va),
        test: pick(&te),
    })
}

/// Evaluates a trained model: bag metrics at the 0.5 probability threshold,
/// instance metrics with the validation-frozen attention threshold.
pub fn evaluate(model: &Model, val: &[Bag], test: &[Bag]) -> Result<MetricReport> {
    let forward_all = |bags: &[Bag]| -> Result<Vec<_>> {
        bags.iter()
            .map(|b| Ok(model.forward(b)?))
            .collect::<Result<Vec<_>>>()
    };
    let val_out = forward_all(val)?;
    let test_out = forward_all(test)?;

    // instance threshold frozen on validation, normalized attention per bag
    let gather = |bags: &[Bag], outs: &[smooth_mil::mil::ForwardOutput]| {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (bag, out) in bags.iter().zip(outs) {
            if let Some(inst) = &bag.instance_labels {
                scores.extend(normalize_attention(&out.attention_raw));
                labels.extend(inst.iter().copied());
            }
        }
        (scores, labels)
    };
    let (val_scores, val_labels) = gather(val, &val_out);
    let chosen = optimal_threshold_f1(&val_scores, &val_labels).ok();
    let (test_scores, test_labels) = gather(test, &test_out);

    // bag metrics at probability 0.5, i.e. logit 0
    let bag_scores: Vec<f64> = test_out.iter().map(|o| o.bag_logit).collect();
    let bag_labels: Vec<u8> = test.iter().map(|b| b.bag_label).collect();
    let bag_confusion = confusion_at(&bag_scores, &bag_labels, 0.0);

    let mut energy_sum = 0.0;
    let mut energy_count = 0usize;
    for (bag, out) in test.iter().zip(&test_out) {
        let l = model.laplacian_for(bag);
        let f = DenseMatrix::from_vec(bag.n_instances(), 1, out.attention_raw.clone());
        energy_sum += dirichlet::normalized_energy(&f, &bag.graph, &l);
        energy_count += 1;
    }

    let (instance_auroc, instance_f1, instance_confusion, threshold) =
        if let Some((threshold, _)) = chosen {
            let confusion = confusion_at(&test_scores, &test_labels, threshold);
            (
                auroc(&test_scores, &test_labels).ok(),
                Some(confusion.f1()),
                Some(confusion),
                Some(threshold),
            )
        } else {
            (None, None, None, None)
        };

    Ok(MetricReport {
        bag_auroc: auroc(&bag_scores, &bag_labels)?,
        bag_f1: bag_confusion.f1(),
        instance_auroc,
        instance_f1,
        chosen_instance_threshold: threshold,
        normalized_dirichlet_energy: if energy_count > 0 {
            energy_sum / energy_count as f64
        } else {
            f64::NAN
        },
        bag_confusion,
        instance_confusion,
    })
}

/// Runs one training job and writes the run directory. Returns the report.
pub fn run_training(cfg: &TrainConfig, dir: &Path) -> Result<MetricReport> {
    let splits = load_splits(cfg)?;
    let outcome = mil::train(cfg.model.clone(), &splits.train, &splits.val, &cfg.schedule);
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            // preserve whatever we can for diagnosis, then fail
            fs::write(dir.join("FAILED"), e.to_string())?;
            return Err(anyhow!("training failed: {e}"));
        }
    };
    let mut history = fs::File::create(dir.join("history.jsonl"))?;
    for record in &outcome.history {
        writeln!(history, "{}", serde_json::to_string(record)?)?;
    }
    let best = Model::from_params(cfg.model.clone(), outcome.best_params.clone())?;
    let mut ckpt = fs::File::create(dir.join("checkpoint.bin"))?;
    outcome.best_params.save(&mut ckpt)?;
    let report = evaluate(&best, &splits.val, &splits.test)?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

pub fn train(config: &Path, out: &super::CommonOut) -> Result<ExitCode> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(seed) = out.seed {
        cfg.schedule.seed = seed;
    }
    if let Err(e) = cfg.model.validate() {
        let variants: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        return usage(format!("invalid model spec: {e} (variants: {variants:?})"));
    }
    prepare_out_dir(&out.out, out.force)?;
    let config_bytes = serde_json::to_vec_pretty(&cfg)?;
    fs::write(out.out.join("config.json"), &config_bytes)?;
    let report = run_training(&cfg, &out.out)?;
    write_manifest(
        &out.out,
        &config_bytes,
        cfg.schedule.seed,
        &["config.json", "history.jsonl", "checkpoint.bin", "metrics.json"],
    )?;
    println!(
        "bag AUROC {:.4}, instance AUROC {}",
        report.bag_auroc,
        report
            .instance_auroc
            .map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepAxes {
    /// Fixed-point trade-off values, applied through the logit transform.
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub t_steps: Vec<usize>,
    #[serde(default)]
    pub variant: Vec<Variant>,
    #[serde(default)]
    pub spectral_norm: Vec<bool>,
}

fn default_split_ids() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: TrainConfig,
    pub axes: SweepAxes,
    #[serde(default = "default_split_ids")]
    pub split_ids: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub alpha: Option<f64>,
    pub t_steps: Option<usize>,
    pub spectral_norm: Option<bool>,
    pub split_id: u64,
    pub ok: bool,
    pub bag_auroc: f64,
    pub instance_auroc: f64,
    pub instance_f1: f64,
    pub normalized_energy: f64,
}

/// Expands the axes into concrete model specs. Empty axes keep the base
/// value; the cross product covers all declared axes.
pub fn sweep_cells(cfg: &SweepConfig) -> Vec<(ModelSpec, Option<f64>, Option<usize>, Option<bool>)> {
    let one_of = |v: &Vec<f64>| -> Vec<Option<f64>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().copied().map(Some).collect()
        }
    };
    let variants: Vec<Option<Variant>> = if cfg.axes.variant.is_empty() {
        vec![None]
    } else {
        cfg.axes.variant.iter().copied().map(Some).collect()
    };
    let t_axis: Vec<Option<usize>> = if cfg.axes.t_steps.is_empty() {
        vec![None]
    } else {
        cfg.axes.t_steps.iter().copied().map(Some).collect()
    };
    let sn_axis: Vec<Option<bool>> = if cfg.axes.spectral_norm.is_empty() {
        vec![None]
    } else {
        cfg.axes.spectral_norm.iter().copied().map(Some).collect()
    };
    let mut cells = Vec::new();
    for &variant in &variants {
        for alpha in one_of(&cfg.axes.alpha) {
            for &t in &t_axis {
                for &sn in &sn_axis {
                    let mut spec = cfg.base.model.clone();
                    if let Some(v) = variant {
                        spec = ModelSpec {
                            variant: v,
                            transformer: v
                                .uses_transformer()
                                .then(|| spec.transformer.clone().unwrap_or_else(|| {
                                    smooth_mil::neural::TransformerSpec {
                                        model_dim: spec.embed_dim,
                                        ..Default::default()
                                    }
                                })),
                            penalty_weight: if v == Variant::AbmilPenalty {
                                if spec.penalty_weight > 0.0 { spec.penalty_weight } else { 0.1 }
                            } else {
                                0.0
                            },
                            ..spec
                        };
                    }
                    if let Some(a) = alpha {
                        // fix alpha: freeze the trainable parameter at logit(a)
                        spec.smooth.trainable = false;
                        spec.smooth.alpha_param = (a / (1.0 - a)).ln();
                        if a == 0.0 {
                            spec.smooth.use_identity = true;
                        }
                    }
                    if let Some(t) = t {
                        spec.smooth.t_steps = t;
                        if t == 0 {
                            spec.smooth.use_identity = true;
                        }
                    }
                    if let Some(s) = sn {
                        spec.spectral_norm_after_sm = s;
                    }
                    cells.push((spec, alpha, t, sn));
                }
            }
        }
    }
    cells
}

pub fn run_sweep(cfg: &SweepConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(cfg);
    let mut rows = Vec::new();
    for (spec, alpha, t, sn) in &cells {
        for &split_id in &cfg.split_ids {
            let mut cell_cfg = cfg.base.clone();
            cell_cfg.model = spec.clone();
            cell_cfg.split_id = split_id;
            let cell_dir = dir.join(format!(
                "cell_{}_{}_a{}_t{}_s{}",
                spec.variant.name(),
                split_id,
                alpha.map_or("base".into(), |a| format!("{a}")),
                t.map_or("base".into(), |t| format!("{t}")),
                sn.map_or("base".into(), |s| format!("{s}")),
            ));
            fs::create_dir_all(&cell_dir)?;
            let row = match run_training(&cell_cfg, &cell_dir) {
                Ok(report) => SweepRow {
                    variant: spec.variant.name().into(),
                    alpha: *alpha,
                    t_steps: *t,
                    spectral_norm: *sn,
                    split_id,
                    ok: true,
                    bag_auroc: report.bag_auroc,
                    instance_auroc: report.instance_auroc.unwrap_or(f64::NAN),
                    instance_f1: report.instance_f1.unwrap_or(f64::NAN),
                    normalized_energy: report.normalized_dirichlet_energy,
                },
                Err(e) => {
                    eprintln!("cell failed ({}, split {split_id}): {e}", spec.variant.name());
                    SweepRow {
                        variant: spec.variant.name().into(),
                        alpha: *alpha,
                        t_steps: *t,
                        spectral_norm: *sn,
                        split_id,
                        ok: false,
                        bag_auroc: f64::NAN,
                        instance_auroc: f64::NAN,
                        instance_f1: f64::NAN,
                        normalized_energy: f64::NAN,
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "variant,alpha,t_steps,spectral_norm,split_id,ok,bag_auroc,instance_auroc,instance_f1,normalized_energy"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6e}",
            r.variant,
            r.alpha.map_or("".into(), |a| a.to_string()),
            r.t_steps.map_or("".into(), |t| t.to_string()),
            r.spectral_norm.map_or("".into(), |s| s.to_string()),
            r.split_id,
            r.ok,
            r.bag_auroc,
            r.instance_auroc,
            r.instance_f1,
            r.normalized_energy
        )?;
    }
    Ok(())
}

/// Mean/std aggregation over split ids per cell, mirroring
/// mean-and-standard-deviation-over-runs reporting.
pub fn write_sweep_summary(rows: &[SweepRow], path: &Path) -> Result<()> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.ok) {
        let key = format!(
            "{},{},{},{}",
            r.variant,
            r.alpha.map_or("".into(), |a| a.to_string()),
            r.t_steps.map_or("".into(), |t| t.to_string()),
            r.spectral_norm.map_or("".into(), |s| s.to_string())
        );
        groups.entry(key).or_default().push(r);
    }
    let stat = |vals: &[f64]| {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "variant,alpha,t_steps,spectral_norm,n_splits,bag_auroc_mean,bag_auroc_std,instance_auroc_mean,instance_auroc_std,energy_mean"
    )?;
    for (key, rs) in groups {
        let bag: Vec<f64> = rs.iter().map(|r| r.bag_auroc).collect();
        let inst: Vec<f64> = rs.iter().map(|r| r.instance_auroc).collect();
        let energy: Vec<f64> = rs.iter().map(|r| r.normalized_energy).collect();
        let (bm, bs) = stat(&bag);
        let (im, is) = stat(&inst);
        let (em, _) = stat(&energy);
        writeln!(
            f,
            "{key},{},{bm:.6},{bs:.6},{im:.6},{is:.6},{em:.6e}",
            rs.len()
        )?;
    }
    Ok(())
}

pub fn sweep(config: &Path, out: &super::CommonOut) -> Result<ExitCode> {
    let mut cfg: SweepConfig = read_config(config)?;
    if let Some(seed) = out.seed {
        cfg.base.schedule.seed = seed;
    }
    prepare_out_dir(&out.out, out.force)?;
    let config_bytes = serde_json::to_vec_pretty(&cfg)?;
    fs::write(out.out.join("config.json"), &config_bytes)?;
    let rows = run_sweep(&cfg, &out.out)?;
    write_sweep_csv(&rows, &out.out.join("sweep.csv"))?;
    write_sweep_summary(&rows, &out.out.join("summary.csv"))?;
    write_manifest(
        &out.out,
        &config_bytes,
        cfg.base.schedule.seed,
        &["config.json", "sweep.csv", "summary.csv"],
    )?;
    let failures = rows.iter().filter(|r| !r.ok).count();
    println!("{} cells, {failures} failures", rows.len());
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn verify(seed: u64, inject_fault: bool, out: Option<&Path>) -> Result<ExitCode> {
    let report = run_verification(seed, inject_fault);
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => fs::write(path, &json)?,
        None => println!("{json}"),
    }
    for p in &report.properties {
        eprintln!(
            "{} {} ({} cases, {} failures)",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            p.cases,
            p.failures
        );
    }
    Ok(if report.all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

// ---------------------------------------------------------------------------
// export-attention
// ---------------------------------------------------------------------------

pub fn export_attention(run: &Path, dataset: &Path, out: &Path) -> Result<ExitCode> {
    let cfg: TrainConfig = read_config(&run.join("config.json"))?;
    let mut ckpt = fs::File::open(run.join("checkpoint.bin"))
        .with_context(|| format!("no checkpoint in {}", run.display()))?;
    let params = ParamStore::load(&mut ckpt)?;
    let model = Model::from_params(cfg.model.clone(), params)?;
    let (_, bags) = data::read_dataset(dataset)?;
    let mut f = fs::File::create(out)?;
    writeln!(f, "bag,instance,instance_label,f_raw,f_normalized,attention_weight")?;
    let mut hist_input = Vec::new();
    for (bi, bag) in bags.iter().enumerate() {
        let fwd = model.forward(bag)?;
        let normalized = normalize_attention(&fwd.attention_raw);
        let labels = bag
            .instance_labels
            .clone()
            .unwrap_or_else(|| vec![0; bag.n_instances()]);
        for i in 0..bag.n_instances() {
            writeln!(
                f,
                "{bi},{i},{},{:.16e},{:.16e},{:.16e}",
                labels[i], fwd.attention_raw[i], normalized[i], fwd.attention_weights[i]
            )?;
        }
        hist_input.push((fwd.attention_raw.clone(), labels));
    }
    let hist = attention_histogram(&hist_input, 20)?;
    let hist_path = out.with_extension("histogram.csv");
    let mut hf = fs::File::create(&hist_path)?;
    writeln!(hf, "bin,positive_density,negative_density")?;
    for (i, (p, n)) in hist.positive.iter().zip(&hist.negative).enumerate() {
        writeln!(hf, "{i},{p:.16e},{n:.16e}")?;
    }
    println!("wrote {} and {}", out.display(), hist_path.display());
    Ok(ExitCode::SUCCESS)
}
