//! Object features, normalization, scenario splits and the on-disk dataset
//! format.
//!
//! Features are stored flat in object order: 3 per generator (P MW, Q MVAr,
//! V pu), 3 per load (same), 6 per line endpoint (P MW, Q MVAr, V pu,
//! current pu, loading, thermal limit MW). Only P, loading and the limit come
//! from the DC solution; Q is a 0.2 power-factor shadow of P, V is 1.0 and
//! current equals loading.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::SwitchAction;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, NetworkVariant, ObjectKind, TopologyVector};
use crate::powerflow::{FlowSolution, Injections};

pub const DATASET_FORMAT: &str = "busgraph-dataset/1";
pub const REACTIVE_RATIO: f64 = 0.2;
pub const GEN_FEATURES: usize = 3;
pub const LOAD_FEATURES: usize = 3;
pub const ENDPOINT_FEATURES: usize = 6;
/// Pooled statistics: 3 generator, 3 load and 6 endpoint features.
pub const N_STAT_FEATURES: usize = GEN_FEATURES + LOAD_FEATURES + ENDPOINT_FEATURES;

/// Names of the synthesized (not solver-derived) features, kept in metadata.
pub const SYNTHESIZED_FEATURES: [&str; 3] = ["reactive_power", "voltage_magnitude", "current_flow"];

#[derive(Debug, Clone, PartialEq)]
pub struct Datapoint {
    pub scenario_id: usize,
    /// Step within the scenario.
    pub timestep: usize,
    pub variant: NetworkVariant,
    pub topology: TopologyVector,
    pub features: Vec<f64>,
    pub target: SwitchAction,
}

/// Width and offset of an object's slice in the flat feature vector.
pub fn feature_layout(spec: &GridSpec) -> Vec<(usize, usize)> {
    let mut offset = 0;
    spec.objects()
        .iter()
        .map(|o| {
            let w = feature_width(o.kind);
            let r = (offset, w);
            offset += w;
            r
        })
        .collect()
}

pub fn feature_width(kind: ObjectKind) -> usize {
    match kind {
        ObjectKind::Generator => GEN_FEATURES,
        ObjectKind::Load => LOAD_FEATURES,
        ObjectKind::LineOrigin | ObjectKind::LineExtremity => ENDPOINT_FEATURES,
    }
}

pub fn n_features(spec: &GridSpec) -> usize {
    spec.objects().iter().map(|o| feature_width(o.kind)).sum()
}

/// Index of the first pooled statistic used by objects of `kind`.
fn stat_base(kind: ObjectKind) -> usize {
    match kind {
        ObjectKind::Generator => 0,
        ObjectKind::Load => GEN_FEATURES,
        _ => GEN_FEATURES + LOAD_FEATURES,
    }
}

/// Rounds to 9 significant decimal digits, the precision of the text format.
pub fn quantize(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    if !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.8e}")
    }
}

/// Raw features of the observed state, quantized to storage precision.
pub fn extract_features(
    spec: &GridSpec,
    topology: &TopologyVector,
    solution: &FlowSolution<f64>,
    injections: &Injections,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_features(spec));
    for (pos, o) in spec.objects().iter().enumerate() {
        match o.kind {
            ObjectKind::Generator | ObjectKind::Load => {
                let p = if o.kind == ObjectKind::Generator {
                    injections.gen_mw[o.element]
                } else {
                    injections.load_mw[o.element]
                };
                if topology.is_connected(pos) {
                    out.extend([p, REACTIVE_RATIO * p, 1.0]);
                } else {
                    out.extend([0.0; 3]);
                }
            }
            ObjectKind::LineOrigin | ObjectKind::LineExtremity => {
                let l = o.element;
                if !topology.is_connected(pos) || !solution.enabled[l] {
                    out.extend([0.0; ENDPOINT_FEATURES]);
                    continue;
                }
                let sign = if o.kind == ObjectKind::LineOrigin { 1.0 } else { -1.0 };
                let p = sign * solution.line_flows[l];
                let rho = solution.rho[l];
                out.extend([p, REACTIVE_RATIO * p, 1.0, rho, rho, spec.lines[l].thermal_limit]);
            }
        }
    }
    out.into_iter().map(quantize).collect()
}

/// Per-feature z-score statistics pooled over objects of one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Statistics over the given points; zero-imputed (disconnected)
    /// objects are excluded and zero spreads become 1.
    pub fn fit(spec: &GridSpec, points: &[Datapoint]) -> Self {
        let layout = feature_layout(spec);
        let mut sum = vec![0.0f64; N_STAT_FEATURES];
        let mut sq = vec![0.0f64; N_STAT_FEATURES];
        let mut n = vec![0usize; N_STAT_FEATURES];
        for p in points {
            for (pos, o) in spec.objects().iter().enumerate() {
                if !p.topology.is_connected(pos) {
                    continue;
                }
                let (off, w) = layout[pos];
                let base = stat_base(o.kind);
                for j in 0..w {
                    let x = p.features[off + j];
                    sum[base + j] += x;
                    n[base + j] += 1;
                }
            }
        }
        let mean: Vec<f64> = (0..N_STAT_FEATURES)
            .map(|k| if n[k] > 0 { sum[k] / n[k] as f64 } else { 0.0 })
            .collect();
        for p in points {
            for (pos, o) in spec.objects().iter().enumerate() {
                if !p.topology.is_connected(pos) {
                    continue;
                }
                let (off, w) = layout[pos];
                let base = stat_base(o.kind);
                for j in 0..w {
                    let d = p.features[off + j] - mean[base + j];
                    sq[base + j] += d * d;
                }
            }
        }
        let std = (0..N_STAT_FEATURES)
            .map(|k| {
                let s = if n[k] > 0 { (sq[k] / n[k] as f64).sqrt() } else { 0.0 };
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; N_STAT_FEATURES],
            std: vec![1.0; N_STAT_FEATURES],
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# busgraph-norm/1\n");
        for k in 0..N_STAT_FEATURES {
            s.push_str(&format!("{k}\t{:?}\t{:?}\n", self.mean[k], self.std[k]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("# busgraph-norm/1") {
            return Err(Error::parse("normalization", 1, "missing header"));
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::parse("normalization", i + 2, "expected `index mean std`");
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(i) {
                return Err(bad());
            }
            mean.push(f[1].parse().map_err(|_| bad())?);
            std.push(f[2].parse().map_err(|_| bad())?);
        }
        if mean.len() != N_STAT_FEATURES {
            return Err(Error::parse("normalization", 0, "wrong number of features"));
        }
        Ok(Self { mean, std })
    }

    /// Short content hash used as the reference in dataset headers.
    pub fn reference(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Normalized copy of one feature vector; disconnected objects stay 0.
    pub fn apply(&self, spec: &GridSpec, topology: &TopologyVector, features: &[f64]) -> Vec<f64> {
        let layout = feature_layout(spec);
        let mut out = vec![0.0; features.len()];
        for (pos, o) in spec.objects().iter().enumerate() {
            if !topology.is_connected(pos) {
                continue;
            }
            let (off, w) = layout[pos];
            let base = stat_base(o.kind);
            for j in 0..w {
                out[off + j] = (features[off + j] - self.mean[base + j]) / self.std[base + j];
            }
        }
        out
    }
}

pub fn normalize(spec: &GridSpec, points: &[Datapoint], stats: &NormalizationStats) -> Vec<Datapoint> {
    points
        .iter()
        .map(|p| Datapoint {
            features: stats.apply(spec, &p.topology, &p.features),
            ..p.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Datapoint>,
    pub val: Vec<Datapoint>,
    pub test: Vec<Datapoint>,
}

/// Scenario ids of each partition: shuffled with `seed`, cut by `ratios`
/// (percent), every partition getting at least one scenario.
pub fn partition_scenarios(scenarios: &BTreeSet<usize>, ratios: [u32; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if ratios.iter().sum::<u32>() != 100 {
        return Err(Error::Config(format!("split ratios {ratios:?} do not sum to 100")));
    }
    let n = scenarios.len();
    if n < 3 {
        return Err(Error::Config(format!("{n} scenarios cannot fill three partitions")));
    }
    let mut ids: Vec<usize> = scenarios.iter().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = |r: u32| ((n as f64 * r as f64 / 100.0).round() as usize).max(1);
    let n_val = count(ratios[1]);
    let n_test = count(ratios[2]);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::Config(format!("{n} scenarios leave the training partition empty")));
    }
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok([ids, val, test])
}

/// Splits points by scenario so no scenario lands in two partitions.
pub fn split_by_scenario(points: &[Datapoint], ratios: [u32; 3], seed: u64) -> Result<Split> {
    let scenarios: BTreeSet<usize> = points.iter().map(|p| p.scenario_id).collect();
    let [train_ids, val_ids, _] = partition_scenarios(&scenarios, ratios, seed)?;
    let train_ids: HashSet<usize> = train_ids.into_iter().collect();
    let val_ids: HashSet<usize> = val_ids.into_iter().collect();
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for p in points {
        let bucket = if train_ids.contains(&p.scenario_id) {
            &mut split.train
        } else if val_ids.contains(&p.scenario_id) {
            &mut split.val
        } else {
            &mut split.test
        };
        bucket.push(p.clone());
    }
    Ok(split)
}

/// Header of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub spec_hash: String,
    pub variant: NetworkVariant,
    pub norm_ref: String,
}

impl DatasetHeader {
    fn to_line(&self) -> String {
        format!(
            "# {DATASET_FORMAT} spec={} variant={} norm={} synthesized={}",
            self.spec_hash,
            self.variant,
            self.norm_ref,
            SYNTHESIZED_FEATURES.join(",")
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let rest = line
            .strip_prefix(&format!("# {DATASET_FORMAT} "))
            .ok_or_else(|| Error::parse("dataset", 1, "missing or unsupported format header"))?;
        let mut spec_hash = None;
        let mut variant = None;
        let mut norm_ref = None;
        for kv in rest.split(' ') {
            match kv.split_once('=') {
                Some(("spec", v)) => spec_hash = Some(v.to_string()),
                Some(("variant", v)) => variant = Some(v.parse()?),
                Some(("norm", v)) => norm_ref = Some(v.to_string()),
                Some(("synthesized", _)) => {}
                _ => return Err(Error::parse("dataset", 1, format!("unexpected header field {kv:?}"))),
            }
        }
        match (spec_hash, variant, norm_ref) {
            (Some(spec_hash), Some(variant), Some(norm_ref)) => Ok(Self {
                spec_hash,
                variant,
                norm_ref,
            }),
            _ => Err(Error::parse("dataset", 1, "incomplete header")),
        }
    }
}

/// `scenario<TAB>timestep<TAB>topology<TAB>features<TAB>target`, topology and
/// features comma separated, target a 0/1 string.
pub fn format_record(p: &Datapoint) -> String {
    let topo: Vec<String> = p.topology.0.iter().map(|v| v.to_string()).collect();
    let feats: Vec<String> = p.features.iter().map(|&v| format_value(v)).collect();
    format!(
        "{}\t{}\t{}\t{}\t{}",
        p.scenario_id,
        p.timestep,
        topo.join(","),
        feats.join(","),
        p.target.to_bit_string()
    )
}

pub fn parse_record(line: &str, variant: &NetworkVariant, lineno: usize) -> Result<Datapoint> {
    let err = |m: &str| Error::parse("dataset", lineno, m.to_string());
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 {
        return Err(err("expected 5 tab-separated fields"));
    }
    let scenario_id = f[0].parse().map_err(|_| err("bad scenario id"))?;
    let timestep = f[1].parse().map_err(|_| err("bad timestep"))?;
    let topology = f[2]
        .split(',')
        .map(|s| s.parse::<i8>().map_err(|_| err("bad topology entry")))
        .collect::<Result<Vec<_>>>()?;
    let features = f[3]
        .split(',')
        .map(|s| s.parse::<f64>().map_err(|_| err("bad feature value")))
        .collect::<Result<Vec<_>>>()?;
    let target = SwitchAction::from_bit_string(f[4]).ok_or_else(|| err("bad target bits"))?;
    if target.len() != topology.len() {
        return Err(err("target and topology lengths differ"));
    }
    Ok(Datapoint {
        scenario_id,
        timestep,
        variant: variant.clone(),
        topology: TopologyVector(topology),
        features,
        target,
    })
}

/// Writes points of a single variant. Mixed variants are rejected.
pub fn write_dataset(path: &Path, header: &DatasetHeader, points: &[Datapoint]) -> Result<()> {
    if let Some(p) = points.iter().find(|p| p.variant != header.variant) {
        return Err(Error::Config(format!(
            "datapoint of variant {} in a {} file",
            p.variant, header.variant
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.to_line()).map_err(io)?;
    for p in points {
        writeln!(w, "{}", format_record(p)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Datapoint>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse("dataset", 1, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let header = DatasetHeader::parse(&first)?;
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        points.push(parse_record(&line, &header.variant, i + 2)?);
    }
    Ok((header, points))
}

/// Groups points by variant, preserving order within each group.
pub fn group_by_variant(points: &[Datapoint]) -> Vec<(NetworkVariant, Vec<Datapoint>)> {
    let mut groups: Vec<(NetworkVariant, Vec<Datapoint>)> = Vec::new();
    for p in points {
        match groups.iter_mut().find(|(v, _)| *v == p.variant) {
            Some((_, g)) => g.push(p.clone()),
            None => groups.push((p.variant.clone(), vec![p.clone()])),
        }
    }
    groups
}
