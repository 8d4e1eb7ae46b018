//! End-to-end acceptance suite.
//!
//! Each numbered check prints exactly one `PASS`/`FAIL` line; the test
//! fails if any check fails. The heavyweight checks (6-8) train on the
//! shared synthetic benchmark through the compiled binary, so this target
//! exercises the CLI surface as well as the library.

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smooth_mil::data::{generate, write_dataset, SynthSpec};
use smooth_mil::eval::{auroc, f1_at, optimal_threshold_f1};
use smooth_mil::graph::build_grid_graph;
use smooth_mil::mil::{Bag, Mode, Model, ModelSpec, Variant};
use smooth_mil::numerics::DenseMatrix;
use smooth_mil::verify::run_verification;

const BIN: &str = env!("CARGO_BIN_EXE_smooth-mil");

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, id: usize, passed: bool, detail: String) {
    println!(
        "criterion {id:02} {} {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    results.push(Outcome { id, passed, detail });
}

fn tiny_spec(variant: Variant) -> ModelSpec {
    let mut spec = ModelSpec::new(variant, 4);
    spec.embed_dim = 8;
    spec.attn_dim = 5;
    spec.smooth.t_steps = 2;
    if let Some(t) = &mut spec.transformer {
        t.n_layers = 1;
        t.n_heads = 2;
        t.qkv_dim = 4;
        t.model_dim = 8;
    }
    spec
}

fn random_bag(seed: u64, label: u8) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = build_grid_graph(2, 3).unwrap();
    let n = g.n_nodes();
    let features =
        DenseMatrix::from_vec(n, 4, (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    Bag {
        features,
        graph: g,
        bag_label: label,
        instance_labels: None,
    }
}

// -------------------------------------------------------------------------
// 1-3: property suites (operator exactness, energy bound, Lipschitz chain)
// -------------------------------------------------------------------------

fn check_properties(results: &mut Vec<Outcome>) {
    let start = Instant::now();
    let report = run_verification(20240, false);
    let elapsed = start.elapsed().as_secs_f64();
    let prop = |name: &str| {
        report
            .properties
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing property {name}"))
    };

    let conv = prop("iterative_convergence");
    record(
        results,
        1,
        conv.passed && elapsed < 30.0,
        format!(
            "iterative vs exact operator: {} graphs, {} failures, suite {elapsed:.1}s (< 30s)",
            conv.cases, conv.failures
        ),
    );

    let bound = prop("energy_decrease_bound");
    let tight = prop("p2_tightness_witness");
    record(
        results,
        2,
        bound.passed && tight.passed && elapsed < 10.0,
        format!(
            "energy bound on {} triples + tightness witness, suite {elapsed:.1}s (< 10s)",
            bound.cases
        ),
    );

    let chain = prop("lipschitz_energy_chain");
    let head = prop("attention_head_specialization");
    record(
        results,
        3,
        chain.passed && head.passed && elapsed < 20.0,
        format!(
            "per-layer + telescoped chain on {} MLPs, attention-head form on {} cases, suite {elapsed:.1}s (< 20s)",
            chain.cases, head.cases
        ),
    );
}

// -------------------------------------------------------------------------
// 4: analytic gradients vs central finite differences, every variant
// -------------------------------------------------------------------------

fn check_gradients(results: &mut Vec<Outcome>) {
    let start = Instant::now();
    let bag = random_bag(105, 1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut failures = String::new();
    for variant in Variant::ALL {
        let model = Model::new(tiny_spec(variant), 19).unwrap();
        let (_, grads) = model.loss_and_grads(&bag, 1.0, Mode::Eval).unwrap();
        for pi in 0..model.params.len() {
            let g = match &grads[pi] {
                Some(g) => g,
                None => continue,
            };
            let count = model.params.get(pi).values().len();
            for k in [0, count / 2, count - 1] {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.params.get_mut(pi).values_mut()[k] += delta;
                    m.loss_and_grads(&bag, 1.0, Mode::Eval).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.values()[k];
                let rel = (an - fd).abs() / fd.abs().max(1e-2);
                worst = worst.max(rel);
                if rel > 1e-4 {
                    let _ = write!(
                        failures,
                        " [{} {} entry {k}: analytic {an:.6e} vs fd {fd:.6e}]",
                        variant.name(),
                        model.params.name(pi)
                    );
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    record(
        results,
        4,
        failures.is_empty() && elapsed < 60.0,
        format!(
            "all variants, worst relative error {worst:.2e} (tol 1e-4), {elapsed:.1}s (< 60s){failures}"
        ),
    );
}

// -------------------------------------------------------------------------
// 5: bitwise collapse with the operator disabled
// -------------------------------------------------------------------------

fn check_collapse(results: &mut Vec<Outcome>) {
    let bag = random_bag(101, 0);
    let mut ok = true;
    let mut detail = String::from("identity collapse:");
    let pairs = [
        (Variant::SmapEarly, Variant::Abmil),
        (Variant::SmapMid, Variant::Abmil),
        (Variant::SmapLate, Variant::Abmil),
        (Variant::SmtSmap, Variant::TAp),
    ];
    for (smooth_variant, plain_variant) in pairs {
        let mut spec = tiny_spec(smooth_variant);
        spec.smooth.use_identity = true;
        let model = Model::new(spec, 9).unwrap();
        let mut plain = Model::new(tiny_spec(plain_variant), 9).unwrap();
        plain.params = model.params.clone();
        let a = model.forward(&bag).unwrap();
        let b = plain.forward(&bag).unwrap();
        let bitwise = a.bag_logit.to_bits() == b.bag_logit.to_bits()
            && a.attention_raw.len() == b.attention_raw.len()
            && a.attention_raw
                .iter()
                .zip(&b.attention_raw)
                .all(|(x, y)| x.to_bits() == y.to_bits());
        ok &= bitwise;
        let _ = write!(
            detail,
            " {}->{} {}",
            smooth_variant.name(),
            plain_variant.name(),
            if bitwise { "bitwise" } else { "MISMATCH" }
        );
    }
    record(results, 5, ok, detail);
}

// -------------------------------------------------------------------------
// 9: metric implementations vs brute-force oracles
// -------------------------------------------------------------------------

fn oracle_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 2;
            if si > sj {
                num += 2;
            } else if si == sj {
                num += 1;
            }
        }
    }
    num as f64 / pairs as f64
}

fn check_metrics(results: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ok = true;
    for case in 0..1000 {
        let n = rng.gen_range(2..40);
        // coarse grid so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..7) as f64 / 3.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let got = auroc(&scores, &labels).unwrap();
        let want = oracle_auroc(&scores, &labels);
        if got.to_bits() != want.to_bits() {
            ok = false;
            eprintln!("auroc mismatch case {case}: {got} vs {want}");
        }
        // exhaustive threshold sweep over every midpoint and the extremes
        let (thr, f1) = optimal_threshold_f1(&scores, &labels).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut candidates = vec![f64::NEG_INFINITY, sorted[n - 1] + 1.0];
        for w in sorted.windows(2) {
            candidates.push((w[0] + w[1]) / 2.0);
        }
        let best = candidates
            .iter()
            .map(|&t| f1_at(&scores, &labels, t))
            .fold(0.0f64, f64::max);
        if f1 != best || f1_at(&scores, &labels, thr) != best {
            ok = false;
            eprintln!("threshold mismatch case {case}: f1 {f1} vs exhaustive {best}");
        }
    }
    record(
        results,
        9,
        ok,
        "AUROC and optimal-threshold F1 match brute-force oracles exactly on 1000 cases".into(),
    );
}

// -------------------------------------------------------------------------
// benchmark harness for 6-8 and 10: drive the compiled binary
// -------------------------------------------------------------------------

fn run_bin(args: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("failed to launch binary")
}

fn assert_ok(out: &std::process::Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct SummaryRow {
    variant: String,
    t_steps: Option<usize>,
    bag_auroc_mean: f64,
    instance_auroc_mean: f64,
    energy_mean: f64,
}

fn read_summary(path: &Path) -> Vec<SummaryRow> {
    let text = std::fs::read_to_string(path).expect("summary.csv");
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        rows.push(SummaryRow {
            variant: cols[0].to_string(),
            t_steps: cols[2].parse().ok(),
            bag_auroc_mean: cols[5].parse().unwrap(),
            instance_auroc_mean: cols[7].parse().unwrap(),
            energy_mean: cols[9].parse().unwrap(),
        });
    }
    rows
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

fn benchmark_sweep_config(dataset: &Path, axes: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "dataset": dataset,
        "model": {
            "variant": "SmAP_early",
            "feature_dim": 32,
            "embed_dim": 64,
            "attn_dim": 32
        },
        "schedule": {
            "epochs": 15,
            "batch_size": 32,
            "lr": 1e-3,
            "seed": 1
        },
        "axes": axes,
        "split_ids": [0, 1, 2, 3, 4]
    })
}

fn check_benchmark(results: &mut Vec<Outcome>, scratch: &Path) {
    let dataset = scratch.join("benchmark");
    let spec = SynthSpec::benchmark(20240);
    let bags = generate(&spec).unwrap();
    write_dataset(&dataset, &spec, &bags).unwrap();

    // 6 + 7: ABMIL vs SmAP_early over five splits.
    let start = Instant::now();
    let cfg_path = scratch.join("variant_sweep.json");
    write_json(
        &cfg_path,
        &benchmark_sweep_config(
            &dataset,
            serde_json::json!({"variant": ["ABMIL", "SmAP_early"]}),
        ),
    );
    let out_dir = scratch.join("variant_sweep");
    let out = run_bin(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "variant sweep");
    let elapsed = start.elapsed().as_secs_f64();
    let rows = read_summary(&out_dir.join("summary.csv"));
    let cell = |name: &str| rows.iter().find(|r| r.variant == name).unwrap();
    let abmil = cell("ABMIL");
    let smap = cell("SmAP_early");
    record(
        results,
        6,
        smap.instance_auroc_mean >= abmil.instance_auroc_mean + 0.02
            && smap.bag_auroc_mean >= abmil.bag_auroc_mean - 0.01
            && elapsed < 900.0,
        format!(
            "instance AUROC {:.4} vs {:.4} (need +0.02), bag AUROC {:.4} vs {:.4} (need -0.01), {elapsed:.0}s (< 900s)",
            smap.instance_auroc_mean,
            abmil.instance_auroc_mean,
            smap.bag_auroc_mean,
            abmil.bag_auroc_mean
        ),
    );
    record(
        results,
        7,
        smap.energy_mean < abmil.energy_mean,
        format!(
            "normalized Dirichlet energy of f: {:.4e} (SmAP_early) < {:.4e} (ABMIL)",
            smap.energy_mean, abmil.energy_mean
        ),
    );

    // 8: T-sweep trend and stabilization.
    let cfg_path = scratch.join("t_sweep.json");
    write_json(
        &cfg_path,
        &benchmark_sweep_config(&dataset, serde_json::json!({"t_steps": [0, 1, 2, 5, 10, 20]})),
    );
    let out_dir = scratch.join("t_sweep");
    let out = run_bin(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "T sweep");
    let rows = read_summary(&out_dir.join("summary.csv"));
    let at = |t: usize| {
        rows.iter()
            .find(|r| r.t_steps == Some(t))
            .unwrap_or_else(|| panic!("missing T={t} cell"))
    };
    let base = at(0);
    let monotone_over_base = [1usize, 2, 5, 10, 20]
        .iter()
        .all(|&t| at(t).instance_auroc_mean >= base.instance_auroc_mean);
    let stable = (at(10).instance_auroc_mean - at(20).instance_auroc_mean).abs() < 0.01
        && (at(10).bag_auroc_mean - at(20).bag_auroc_mean).abs() < 0.01;
    let mut detail = String::from("instance AUROC by T:");
    for t in [0usize, 1, 2, 5, 10, 20] {
        let _ = write!(detail, " T{t}={:.4}", at(t).instance_auroc_mean);
    }
    let _ = write!(
        detail,
        "; |T10-T20| inst {:.4} bag {:.4} (< 0.01)",
        (at(10).instance_auroc_mean - at(20).instance_auroc_mean).abs(),
        (at(10).bag_auroc_mean - at(20).bag_auroc_mean).abs()
    );
    record(results, 8, monotone_over_base && stable, detail);
}

// -------------------------------------------------------------------------
// 10: byte-identical training artifacts across seeds-fixed reruns/threads
// -------------------------------------------------------------------------

fn check_determinism(results: &mut Vec<Outcome>, scratch: &Path) {
    let dataset = scratch.join("small");
    let spec = SynthSpec {
        n_bags: 30,
        ..SynthSpec::benchmark(7)
    };
    let bags = generate(&spec).unwrap();
    write_dataset(&dataset, &spec, &bags).unwrap();
    let cfg_path = scratch.join("det_train.json");
    write_json(
        &cfg_path,
        &serde_json::json!({
            "dataset": dataset,
            "model": {"variant": "SmAP_early", "feature_dim": 32, "embed_dim": 16, "attn_dim": 8},
            "schedule": {"epochs": 3, "batch_size": 8, "lr": 1e-3, "seed": 5},
            "split_id": 0
        }),
    );
    let mut artifacts: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for threads in ["1", "4", "1"] {
        let out_dir = scratch.join(format!("det_run_{}", artifacts.len()));
        let out = run_bin(&[
            "--threads",
            threads,
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_ok(&out, "determinism train run");
        artifacts.push((
            std::fs::read(out_dir.join("history.jsonl")).unwrap(),
            std::fs::read(out_dir.join("checkpoint.bin")).unwrap(),
        ));
    }
    let ok = artifacts.windows(2).all(|w| w[0] == w[1]);
    record(
        results,
        10,
        ok,
        format!(
            "history.jsonl + checkpoint.bin byte-identical across reruns at --threads 1/4/1 ({} bytes checkpoint)",
            artifacts[0].1.len()
        ),
    );
}

#[test]
fn acceptance() {
    let scratch = tempfile::tempdir().unwrap();
    let mut results = Vec::new();

    check_properties(&mut results);
    check_gradients(&mut results);
    check_collapse(&mut results);
    check_metrics(&mut results);
    check_benchmark(&mut results, scratch.path());
    check_determinism(&mut results, scratch.path());

    results.sort_by_key(|r| r.id);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("criterion {:02}: {}", r.id, r.detail))
        .collect();
    assert!(
        failed.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failed.len(),
        failed.join("\n")
    );
}
