//! Synthetic spatially-correlated MIL bags, deterministic splits, and
//! dataset file I/O.
//!
//! Positive bags carry connected positive regions (disk blobs on grids,
//! contiguous runs on chains); features are class-conditional isotropic
//! Gaussians. Everything is a pure function of `(spec, seed)`: each bag has
//! its own counter-derived random stream, so generation order (or
//! parallelism) cannot change the output.
//!
//! ```
//! use smooth_mil::data::{generate, SynthSpec};
//!
//! let spec = SynthSpec { n_bags: 6, ..SynthSpec::benchmark(1) };
//! let bags = generate(&spec).unwrap();
//! assert_eq!(bags.len(), 6);
//! assert!(bags.iter().all(|b| b.n_instances() == 256));
//! ```

use crate::error::{invalid, Result};
use crate::graph::{
    build_chain_graph, build_grid_graph, read_graphs_jsonl, write_graphs_jsonl, BagGraph,
};
use crate::mil::{bag_seed, Bag};
use crate::numerics::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    Grid { height: usize, width: usize },
    Chain { n: usize },
}

impl Layout {
    pub fn n_nodes(&self) -> usize {
        match self {
            Layout::Grid { height, width } => height * width,
            Layout::Chain { n } => *n,
        }
    }

    pub fn build_graph(&self) -> Result<BagGraph> {
        match self {
            Layout::Grid { height, width } => build_grid_graph(*height, *width),
            Layout::Chain { n } => build_chain_graph(*n),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layout: Layout,
    pub n_bags: usize,
    pub positive_fraction: f64,
    #[serde(default = "default_blob_count")]
    pub blob_count_range: [usize; 2],
    /// Disk radius range, grid layouts only.
    #[serde(default = "default_blob_radius")]
    pub blob_radius_range: [f64; 2],
    /// Run length range, chain layouts only.
    #[serde(default = "default_run_length")]
    pub run_length_range: [usize; 2],
    pub feature_dim: usize,
    pub class_mean_separation: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

fn default_blob_count() -> [usize; 2] {
    [1, 2]
}
fn default_blob_radius() -> [f64; 2] {
    [1.5, 2.5]
}
fn default_run_length() -> [usize; 2] {
    [2, 4]
}

impl SynthSpec {
    /// The benchmark configuration: 500 bags on a 16x16 grid, 32 features.
    pub fn benchmark(seed: u64) -> Self {
        SynthSpec {
            layout: Layout::Grid {
                height: 16,
                width: 16,
            },
            n_bags: 500,
            positive_fraction: 0.5,
            blob_count_range: default_blob_count(),
            blob_radius_range: default_blob_radius(),
            run_length_range: default_run_length(),
            feature_dim: 32,
            class_mean_separation: 1.0,
            feature_noise_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bags == 0 || self.feature_dim == 0 {
            return Err(invalid("n_bags and feature_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(invalid("positive_fraction must lie in [0, 1]"));
        }
        if self.layout.n_nodes() == 0 {
            return Err(invalid("layout must contain at least one node"));
        }
        if self.blob_count_range[0] > self.blob_count_range[1]
            || self.blob_count_range[0] == 0
            || self.blob_radius_range[0] > self.blob_radius_range[1]
            || self.run_length_range[0] > self.run_length_range[1]
            || self.run_length_range[0] == 0
        {
            return Err(invalid("malformed blob/run range"));
        }
        if self.class_mean_separation < 0.0 || self.feature_noise_sigma <= 0.0 {
            return Err(invalid("separation must be >= 0, noise sigma > 0"));
        }
        match self.layout {
            Layout::Grid { height, width } => {
                let max_extent = height.max(width) as f64;
                if self.blob_radius_range[1] >= max_extent {
                    return Err(invalid("blob radius exceeds the grid extent"));
                }
            }
            Layout::Chain { n } => {
                if self.run_length_range[1] > n {
                    return Err(invalid("run length exceeds the chain length"));
                }
            }
        }
        Ok(())
    }
}

fn positive_region(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = spec.layout.n_nodes();
    let mut labels = vec![0u8; n];
    let blobs = rng.gen_range(spec.blob_count_range[0]..=spec.blob_count_range[1]);
    match spec.layout {
        Layout::Grid { height, width } => {
            for _ in 0..blobs {
                let cr = rng.gen_range(0..height) as f64;
                let cc = rng.gen_range(0..width) as f64;
                let radius = rng.gen_range(spec.blob_radius_range[0]..=spec.blob_radius_range[1]);
                for r in 0..height {
                    for c in 0..width {
                        let dr = r as f64 - cr;
                        let dc = c as f64 - cc;
                        if (dr * dr + dc * dc).sqrt() <= radius {
                            labels[r * width + c] = 1;
                        }
                    }
                }
            }
        }
        Layout::Chain { n } => {
            for _ in 0..blobs {
                let len = rng.gen_range(spec.run_length_range[0]..=spec.run_length_range[1]);
                let start = rng.gen_range(0..=n - len);
                for l in labels.iter_mut().skip(start).take(len) {
                    *l = 1;
                }
            }
        }
    }
    // a zero-radius blob still marks its center node
    if labels.iter().all(|&l| l == 0) {
        labels[rng.gen_range(0..n)] = 1;
    }
    labels
}

/// Generates the full bag list for a spec. Bitwise reproducible.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Bag>> {
    spec.validate()?;
    let n_pos = (spec.n_bags as f64 * spec.positive_fraction).round() as usize;
    let graph = spec.layout.build_graph()?;
    let n = graph.n_nodes();
    let p = spec.feature_dim;
    let mu_shift = spec.class_mean_separation / (p as f64).sqrt();
    let mut bags = Vec::with_capacity(spec.n_bags);
    for i in 0..spec.n_bags {
        let mut rng = ChaCha8Rng::seed_from_u64(bag_seed(spec.seed, i as u64));
        let bag_label = u8::from(i < n_pos);
        let instance_labels = if bag_label == 1 {
            positive_region(spec, &mut rng)
        } else {
            vec![0u8; n]
        };
        let mut features = DenseMatrix::zeros(n, p);
        for (node, &label) in instance_labels.iter().enumerate() {
            let mu = if label == 1 { mu_shift } else { 0.0 };
            for j in 0..p {
                let noise: f64 = rng.sample(StandardNormal);
                features.set(node, j, mu + spec.feature_noise_sigma * noise);
            }
        }
        let bag = Bag {
            features,
            graph: graph.clone(),
            bag_label,
            instance_labels: Some(instance_labels),
        };
        bag.validate()?;
        bags.push(bag);
    }
    Ok(bags)
}

/// Fraction of graph edges joining same-label instances, the generator's
/// spatial-correlation diagnostic.
pub fn edge_label_agreement(bag: &Bag) -> Option<f64> {
    let labels = bag.instance_labels.as_ref()?;
    let edges = bag.graph.edges();
    if edges.is_empty() {
        return None;
    }
    let same = edges
        .iter()
        .filter(|(i, j, _)| labels[*i] == labels[*j])
        .count();
    Some(same as f64 / edges.len() as f64)
}

/// Stratified deterministic split into (train, val, test) index sets.
/// `split_id` selects one of the resplits for a fixed seed.
pub fn split(
    bags: &[Bag],
    fractions: (f64, f64, f64),
    seed: u64,
    split_id: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(invalid("fractions must be nonnegative and sum to 1"));
    }
    if bags.is_empty() {
        return Err(invalid("no bags to split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(bag_seed(seed, u64::MAX - split_id));
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for stratum_label in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..bags.len())
            .filter(|&i| bags[i].bag_label == stratum_label)
            .collect();
        if idx.is_empty() {
            continue;
        }
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len();
        // largest-remainder allocation
        let targets = [ft * n as f64, fv * n as f64, fe * n as f64];
        let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
        let mut rem: Vec<(usize, f64)> = targets
            .iter()
            .enumerate()
            .map(|(k, t)| (k, t - t.floor()))
            .collect();
        rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut missing = n - counts.iter().sum::<usize>();
        for (k, _) in rem {
            if missing == 0 {
                break;
            }
            counts[k] += 1;
            missing -= 1;
        }
        for (k, frac) in [ft, fv, fe].iter().enumerate() {
            if *frac > 0.0 && counts[k] == 0 {
                return Err(invalid(format!(
                    "fraction {frac} yields an empty stratum (label {stratum_label})"
                )));
            }
        }
        let mut cursor = 0;
        for (k, dest) in [&mut out.0, &mut out.1, &mut out.2].into_iter().enumerate() {
            dest.extend_from_slice(&idx[cursor..cursor + counts[k]]);
            cursor += counts[k];
        }
    }
    out.0.sort_unstable();
    out.1.sort_unstable();
    out.2.sort_unstable();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub bag_label: u8,
    pub layout: Layout,
    pub features_file: String,
    pub labels_file: String,
    pub graph_index: usize,
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one dataset directory: per-bag feature and label CSVs, a shared
/// graph JSONL, and a JSONL manifest. Output is byte-stable.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, bags: &[Bag]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    let graphs: Vec<BagGraph> = bags.iter().map(|b| b.graph.clone()).collect();
    let mut gw = BufWriter::new(fs::File::create(dir.join("graphs.jsonl"))?);
    write_graphs_jsonl(&mut gw, &graphs)?;
    gw.flush()?;
    fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(spec)?)?;
    for (i, bag) in bags.iter().enumerate() {
        let features_file = format!("bag_{i:05}.features.csv");
        let labels_file = format!("bag_{i:05}.labels.csv");
        let mut fw = BufWriter::new(fs::File::create(dir.join(&features_file))?);
        for r in 0..bag.features.rows() {
            let row: Vec<String> = bag.features.row(r).iter().map(|&v| format_float(v)).collect();
            writeln!(fw, "{}", row.join(","))?;
        }
        let mut lw = BufWriter::new(fs::File::create(dir.join(&labels_file))?);
        let labels = bag
            .instance_labels
            .clone()
            .unwrap_or_else(|| vec![0; bag.n_instances()]);
        for l in labels {
            writeln!(lw, "{l}")?;
        }
        let entry = ManifestEntry {
            id: i,
            bag_label: bag.bag_label,
            layout: spec.layout,
            features_file,
            labels_file,
            graph_index: i,
        };
        writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(SynthSpec, Vec<Bag>)> {
    let spec: SynthSpec = serde_json::from_slice(&fs::read(dir.join("spec.json"))?)?;
    let graphs = read_graphs_jsonl(BufReader::new(fs::File::open(dir.join("graphs.jsonl"))?))?;
    let manifest = BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?);
    let mut bags = Vec::new();
    for line in manifest.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)?;
        let graph = graphs
            .get(entry.graph_index)
            .ok_or_else(|| invalid("manifest references a missing graph"))?
            .clone();
        let ftext = fs::read_to_string(dir.join(&entry.features_file))?;
        let mut rows = Vec::new();
        let mut cols = 0;
        for l in ftext.lines() {
            let vals: Vec<f64> = l
                .split(',')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| crate::error::Error::Format(format!("bad float {t:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            cols = vals.len();
            rows.push(vals);
        }
        let n = rows.len();
        let features = DenseMatrix::from_vec(n, cols, rows.into_iter().flatten().collect());
        let ltext = fs::read_to_string(dir.join(&entry.labels_file))?;
        let instance_labels: Vec<u8> = ltext
            .lines()
            .map(|l| {
                l.trim()
                    .parse::<u8>()
                    .map_err(|e| crate::error::Error::Format(format!("bad label {l:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let bag = Bag {
            features,
            graph,
            bag_label: entry.bag_label,
            instance_labels: Some(instance_labels),
        };
        bag.validate()?;
        bags.push(bag);
    }
    Ok((spec, bags))
}
