//! Self-contained randomized verification suites for the library's
//! analytical guarantees: the energy-decrease bound and its tightness
//! witness, iterative-to-exact convergence, the layerwise Lipschitz energy
//! chain, and the variational optimality of the smoothing objective.

use crate::dirichlet::energy_value;
use crate::graph::{
    build_chain_graph, build_grid_graph, build_laplacian, lambda_star, BagGraph, LaplacianKind,
};
use crate::neural::{mlp_forward, verify_lipschitz_chain, Activation, MlpSpec};
use crate::numerics::{spectral_norm, DenseMatrix};
use crate::smoothing::{smooth_exact, smooth_iterative, verify_energy_bound};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// First failing witness (or a summary witness when everything passed).
    pub witness: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault_injection: bool,
    pub all_passed: bool,
    pub properties: Vec<PropertyResult>,
}

fn random_graph(rng: &mut ChaCha8Rng, max_n: usize) -> BagGraph {
    if rng.gen_bool(0.5) {
        let h = rng.gen_range(1..=(max_n as f64).sqrt() as usize + 1);
        let w = rng.gen_range(2..=(max_n / h).max(2));
        build_grid_graph(h, w).expect("valid grid")
    } else {
        build_chain_graph(rng.gen_range(2..=max_n)).expect("valid chain")
    }
}

fn random_signal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
    DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

/// Eq-style energy-decrease bound over randomized (graph, signal, gamma)
/// triples. `inject_fault` perturbs the smoothed output, which must make
/// the check fail.
fn check_energy_bound(rng: &mut ChaCha8Rng, cases: usize, inject_fault: bool) -> PropertyResult {
    let mut failures = 0;
    let mut witness = json!(null);
    for case in 0..cases {
        let g = random_graph(rng, 64);
        let l = build_laplacian(&g, LaplacianKind::Normalized);
        let d = rng.gen_range(1..4);
        let u = random_signal(rng, g.n_nodes(), d);
        let gamma = rng.gen_range(0.1..10.0);
        let lam = lambda_star(&l, gamma).expect("graphs here have edges");
        let (lhs, rhs, mut holds) = match verify_energy_bound(&u, &g, &l, gamma) {
            Ok(t) => t,
            Err(e) => {
                failures += 1;
                witness = json!({"case": case, "error": e.to_string()});
                continue;
            }
        };
        let (lhs, rhs) = if inject_fault {
            // deliberately violate the bound by inflating the smoothed energy
            let smoothed = smooth_exact(&u, &l, gamma).expect("solvable");
            let mut bad = smoothed.clone();
            for (k, v) in bad.values_mut().iter_mut().enumerate() {
                *v += if k % 2 == 0 { 1.0 } else { -1.0 };
            }
            let bad_lhs = energy_value(&bad, &g, l.kind());
            holds = bad_lhs <= rhs + 1e-9 * rhs.max(1.0);
            (bad_lhs, rhs)
        } else {
            (lhs, rhs)
        };
        if !holds {
            failures += 1;
            if witness.is_null() {
                witness = json!({
                    "case": case, "n": g.n_nodes(), "gamma": gamma,
                    "lambda_star": lam, "lhs": lhs, "rhs": rhs,
                });
            }
        }
    }
    PropertyResult {
        name: "energy_decrease_bound".into(),
        passed: failures == 0,
        cases,
        failures,
        witness,
    }
}

/// The two-node path with gamma = 1: both sides of the bound equal
/// (1/9) * E(u) exactly.
fn check_p2_tightness() -> PropertyResult {
    let g = build_chain_graph(2).expect("P2");
    let l = build_laplacian(&g, LaplacianKind::Normalized);
    let u = DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]);
    let base = energy_value(&u, &g, l.kind());
    let (lhs, rhs, holds) = verify_energy_bound(&u, &g, &l, 1.0).expect("P2 has an edge");
    let target = base / 9.0;
    let tight = (lhs - target).abs() <= 1e-10 && (rhs - target).abs() <= 1e-10;
    PropertyResult {
        name: "p2_tightness_witness".into(),
        passed: holds && tight,
        cases: 1,
        failures: usize::from(!(holds && tight)),
        witness: json!({"lhs": lhs, "rhs": rhs, "expected": target}),
    }
}

/// Iterative recursion converges to the exact resolvent: T = 200 within
/// 1e-8 relative Frobenius error, T = 10 within 1e-2.
fn check_convergence(rng: &mut ChaCha8Rng, cases: usize) -> PropertyResult {
    let mut failures = 0;
    let mut witness = json!(null);
    for case in 0..cases {
        let g = random_graph(rng, 256);
        let l = build_laplacian(&g, LaplacianKind::Normalized);
        let d = rng.gen_range(1..4);
        let u = random_signal(rng, g.n_nodes(), d);
        let alpha = 0.5;
        let gamma = alpha / (1.0 - alpha);
        let exact = smooth_exact(&u, &l, gamma).expect("solvable");
        let norm = exact.frobenius_norm().max(1e-30);
        let at = |t: usize| {
            smooth_iterative(&u, &l, alpha, t)
                .expect("valid")
                .sub(&exact)
                .frobenius_norm()
                / norm
        };
        let (e200, e10) = (at(200), at(10));
        if e200 > 1e-8 || e10 > 1e-2 {
            failures += 1;
            if witness.is_null() {
                witness = json!({"case": case, "n": g.n_nodes(), "err_t200": e200, "err_t10": e10});
            }
        }
    }
    PropertyResult {
        name: "iterative_convergence".into(),
        passed: failures == 0,
        cases,
        failures,
        witness,
    }
}

/// Layerwise energy inequality and telescoped chain on random MLPs, plus
/// the two-step attention-head specialization (tanh then a linear map).
fn check_lipschitz_chain(rng: &mut ChaCha8Rng, cases: usize) -> PropertyResult {
    let mut failures = 0;
    let mut witness = json!(null);
    for case in 0..cases {
        let n_layers = rng.gen_range(1..=4);
        let mut dims = vec![rng.gen_range(2..8)];
        for _ in 0..n_layers {
            dims.push(rng.gen_range(1..8));
        }
        let spec = MlpSpec {
            layer_dims: dims.clone(),
            activations: (0..n_layers)
                .map(|_| match rng.gen_range(0..3) {
                    0 => Activation::Tanh,
                    1 => Activation::Identity,
                    _ => Activation::Relu,
                })
                .collect(),
            weights: (0..n_layers)
                .map(|l| random_signal(rng, dims[l], dims[l + 1]))
                .collect(),
            biases: (0..n_layers).map(|l| random_signal(rng, 1, dims[l + 1])).collect(),
            spectral_normalized: (0..n_layers).map(|_| rng.gen_bool(0.25)).collect(),
        };
        let g = random_graph(rng, 36);
        let l = build_laplacian(&g, LaplacianKind::Unnormalized);
        let y = random_signal(rng, g.n_nodes(), dims[0]);
        match verify_lipschitz_chain(&spec, &y, &g, &l) {
            Ok(report) => {
                if !(report.per_layer.iter().all(|b| b.holds) && report.telescoped.holds) {
                    failures += 1;
                    if witness.is_null() {
                        witness = json!({"case": case, "report": report});
                    }
                }
            }
            Err(e) => {
                failures += 1;
                witness = json!({"case": case, "error": e.to_string()});
            }
        }
    }
    PropertyResult {
        name: "lipschitz_energy_chain".into(),
        passed: failures == 0,
        cases,
        failures,
        witness,
    }
}

/// Attention-head specialization: f = tanh(H W) w satisfies
/// E(f) <= ||w||^2 E(tanh(H W)) <= ||w||^2 ||W||^2 E(H).
fn check_attention_head_chain(rng: &mut ChaCha8Rng, cases: usize) -> PropertyResult {
    let mut failures = 0;
    let mut witness = json!(null);
    for case in 0..cases {
        let g = random_graph(rng, 36);
        let (d, l_dim) = (rng.gen_range(2..8), rng.gen_range(2..6));
        let h = random_signal(rng, g.n_nodes(), d);
        let w_mat = random_signal(rng, d, l_dim);
        let w_vec = random_signal(rng, l_dim, 1);
        let spec = MlpSpec {
            layer_dims: vec![d, l_dim, 1],
            activations: vec![Activation::Tanh, Activation::Identity],
            weights: vec![w_mat.clone(), w_vec.clone()],
            biases: vec![DenseMatrix::zeros(1, l_dim), DenseMatrix::zeros(1, 1)],
            spectral_normalized: vec![false, false],
        };
        let lap = build_laplacian(&g, LaplacianKind::Unnormalized);
        let outputs = mlp_forward(&spec, &h).expect("valid spec");
        let e_h = energy_value(&outputs[0], &g, LaplacianKind::Unnormalized);
        let e_f_mat = energy_value(&outputs[1], &g, LaplacianKind::Unnormalized);
        let e_f = energy_value(&outputs[2], &g, LaplacianKind::Unnormalized);
        let w_norm = spectral_norm(&w_vec, 1e-12, 10_000);
        let wmat_norm = spectral_norm(&w_mat, 1e-12, 10_000);
        let slack = |x: f64| 1e-9 * x.max(1.0);
        let first = e_f <= w_norm * w_norm * e_f_mat + slack(w_norm * w_norm * e_f_mat);
        let full = e_f <= w_norm * w_norm * wmat_norm * wmat_norm * e_h
            + slack(w_norm * w_norm * wmat_norm * wmat_norm * e_h);
        let report = verify_lipschitz_chain(&spec, &h, &g, &lap).expect("valid spec");
        let ok = first && full && report.telescoped.holds;
        if !ok {
            failures += 1;
            if witness.is_null() {
                witness = json!({"case": case, "e_f": e_f, "e_f_mat": e_f_mat, "e_h": e_h});
            }
        }
    }
    PropertyResult {
        name: "attention_head_specialization".into(),
        passed: failures == 0,
        cases,
        failures,
        witness,
    }
}

/// The resolvent output minimizes the variational objective
/// gamma * E(G) + ||U - G||_F^2: random perturbations never do better.
fn check_optimality(rng: &mut ChaCha8Rng, cases: usize) -> PropertyResult {
    let mut failures = 0;
    let mut witness = json!(null);
    for case in 0..cases {
        let g = random_graph(rng, 36);
        let l = build_laplacian(&g, LaplacianKind::Normalized);
        let d = rng.gen_range(1..3);
        let u = random_signal(rng, g.n_nodes(), d);
        let gamma = rng.gen_range(0.2..5.0);
        let smoothed = smooth_exact(&u, &l, gamma).expect("solvable");
        let objective = |m: &DenseMatrix| {
            gamma * energy_value(m, &g, l.kind()) + u.sub(m).frobenius_norm().powi(2)
        };
        let base = objective(&smoothed);
        for _ in 0..20 {
            let scale = rng.gen_range(1e-4..0.5);
            let mut perturbed = smoothed.clone();
            for v in perturbed.values_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
            if objective(&perturbed) < base - 1e-12 {
                failures += 1;
                if witness.is_null() {
                    witness = json!({"case": case, "base": base, "perturbed": objective(&perturbed)});
                }
                break;
            }
        }
    }
    PropertyResult {
        name: "variational_optimality".into(),
        passed: failures == 0,
        cases,
        failures,
        witness,
    }
}

/// Runs every suite with a fixed seed. `inject_fault` deliberately breaks
/// the energy bound so callers can exercise the failure path.
pub fn run_verification(seed: u64, inject_fault: bool) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let properties = vec![
        check_energy_bound(&mut rng, 200, inject_fault),
        check_p2_tightness(),
        check_convergence(&mut rng, 50),
        check_lipschitz_chain(&mut rng, 100),
        check_attention_head_chain(&mut rng, 50),
        check_optimality(&mut rng, 50),
    ];
    let all_passed = properties.iter().all(|p| p.passed);
    VerifyReport {
        seed,
        fault_injection: inject_fault,
        all_passed,
        properties,
    }
}

/// JSON schema for [`VerifyReport`], shipped with the crate so external
/// tooling can validate reports.
pub const REPORT_SCHEMA: &str = include_str!("../schemas/verify_report.schema.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes_everything() {
        let report = run_verification(1234, false);
        assert!(report.all_passed, "report: {}", serde_json::to_string_pretty(&report).unwrap());
        assert_eq!(report.properties.len(), 6);
    }

    #[test]
    fn fault_injection_fails_the_bound() {
        let report = run_verification(1234, true);
        assert!(!report.all_passed);
        let bound = report
            .properties
            .iter()
            .find(|p| p.name == "energy_decrease_bound")
            .unwrap();
        assert!(!bound.passed);
        assert!(bound.failures > 0);
        // the other suites are untouched
        for p in &report.properties {
            if p.name != "energy_decrease_bound" {
                assert!(p.passed, "{} should still pass", p.name);
            }
        }
    }

    #[test]
    fn report_is_deterministic() {
        let a = serde_json::to_string(&run_verification(7, false)).unwrap();
        let b = serde_json::to_string(&run_verification(7, false)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_matches_shipped_schema() {
        let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        let compiled = jsonschema::validator_for(&schema).unwrap();
        let report = serde_json::to_value(run_verification(99, false)).unwrap();
        assert!(compiled.is_valid(&report));
        let faulty = serde_json::to_value(run_verification(99, true)).unwrap();
        assert!(compiled.is_valid(&faulty));
        // a mangled report is rejected
        let bad = json!({"seed": "not-a-number"});
        assert!(!compiled.is_valid(&bad));
    }
}
