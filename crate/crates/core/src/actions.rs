//! Per-substation busbar configurations, switch masks and the projection of
//! continuous model outputs onto legal actions.
//!
//! A configuration is valid when every non-empty busbar holds at least one
//! line endpoint and at least two objects, and the resulting grid stays one
//! connected electrical component. Mirrors are removed by pinning the lowest
//! object of the substation to busbar 1; the unsplit configuration of each
//! substation collapses into the single do-nothing action.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, NetworkVariant, TopologyVector};
use crate::powerflow::{build_electrical_graph, Injections};

/// Binary per-object switch mask; all-zero is do-nothing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SwitchAction(pub Vec<bool>);

impl SwitchAction {
    pub fn do_nothing(n_objects: usize) -> Self {
        Self(vec![false; n_objects])
    }

    pub fn from_bits(n_objects: usize, bits: impl IntoIterator<Item = usize>) -> Self {
        let mut m = vec![false; n_objects];
        for b in bits {
            m[b] = true;
        }
        Self(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_do_nothing(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn set_bits(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Substation touched by the mask, if any. Errors when several are.
    pub fn substation(&self, spec: &GridSpec) -> Result<Option<usize>> {
        let mut sub = None;
        for pos in self.set_bits() {
            let s = spec.object(pos).substation;
            match sub {
                None => sub = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::IllegalAction(format!(
                        "mask touches substations {prev} and {s}"
                    )))
                }
                _ => {}
            }
        }
        Ok(sub)
    }

    /// Single substation, no disconnected objects, right length.
    pub fn check_legal(&self, spec: &GridSpec, topology: &TopologyVector) -> Result<()> {
        if self.len() != spec.n_objects() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries, grid has {} objects",
                self.len(),
                spec.n_objects()
            )));
        }
        self.substation(spec)?;
        if let Some(pos) = self.set_bits().find(|&p| !topology.is_connected(p)) {
            return Err(Error::IllegalAction(format!("object {pos} is disconnected")));
        }
        Ok(())
    }

    /// `0`/`1` string, one character per object.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }
}

/// Target busbar per connected object of one substation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubstationConfig {
    pub substation: usize,
    /// Object positions, ascending.
    pub objects: Vec<usize>,
    /// Busbar (1 or 2) per entry of `objects`.
    pub busbars: Vec<i8>,
}

impl SubstationConfig {
    pub fn assignment_string(&self) -> String {
        self.busbars.iter().map(|b| b.to_string()).collect()
    }

    pub fn apply_to(&self, topology: &TopologyVector) -> TopologyVector {
        let mut t = topology.clone();
        for (&o, &b) in self.objects.iter().zip(&self.busbars) {
            t.0[o] = b;
        }
        t
    }
}

/// Local validity: each non-empty busbar has a line endpoint and at least
/// two objects.
pub fn busbars_valid(spec: &GridSpec, objects: &[usize], busbars: &[i8]) -> bool {
    [1i8, 2].iter().all(|&bar| {
        let mut n = 0;
        let mut has_line = false;
        for (&o, &b) in objects.iter().zip(busbars) {
            if b == bar {
                n += 1;
                has_line |= spec.object(o).kind.is_line_end();
            }
        }
        n == 0 || (has_line && n >= 2)
    })
}

fn stays_connected(spec: &GridSpec, topology: &TopologyVector) -> bool {
    let zero = Injections {
        gen_mw: vec![0.0; spec.generators.len()],
        load_mw: vec![0.0; spec.loads.len()],
    };
    build_electrical_graph::<f64>(spec, topology, &zero).n_components() <= 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    pub variant: NetworkVariant,
    pub configs: Vec<SubstationConfig>,
    n_objects: usize,
}

/// Filtered, mirror-free split configurations for every substation.
pub fn enumerate_actions(spec: &GridSpec, variant: &NetworkVariant) -> Result<ActionSpace> {
    let base = spec.default_topology(variant)?;
    let mut configs = Vec::new();
    for s in 0..spec.n_substations {
        let objects: Vec<usize> = spec
            .substation_objects(s)
            .iter()
            .copied()
            .filter(|&o| base.is_connected(o))
            .collect();
        let n = objects.len();
        if n < 2 {
            continue;
        }
        let mut local = Vec::new();
        // bit i of `free` places objects[i + 1] on busbar 2; objects[0] stays on 1
        for free in 1u32..(1u32 << (n - 1)) {
            let busbars: Vec<i8> = (0..n)
                .map(|i| if i > 0 && free >> (i - 1) & 1 == 1 { 2 } else { 1 })
                .collect();
            if !busbars_valid(spec, &objects, &busbars) {
                continue;
            }
            let cfg = SubstationConfig {
                substation: s,
                objects: objects.clone(),
                busbars,
            };
            if stays_connected(spec, &cfg.apply_to(&base)) {
                local.push(cfg);
            }
        }
        local.sort_by(|a, b| a.busbars.cmp(&b.busbars));
        configs.extend(local);
    }
    Ok(ActionSpace {
        variant: variant.clone(),
        configs,
        n_objects: spec.n_objects(),
    })
}

/// Mask flipping exactly the connected objects whose busbar differs from the
/// target. Disconnected targets are rejected.
pub fn switch_for_target(current: &TopologyVector, target: &SubstationConfig) -> Result<SwitchAction> {
    let mut mask = vec![false; current.len()];
    for (&o, &b) in target.objects.iter().zip(&target.busbars) {
        if !current.is_connected(o) {
            return Err(Error::IllegalAction(format!("target assigns disconnected object {o}")));
        }
        mask[o] = current.0[o] != b;
    }
    Ok(SwitchAction(mask))
}

/// Of a mask and its complement within `objects`, the one with fewer flips;
/// on a tie, the one leaving the lowest object in place.
fn minimal_mask(n_objects: usize, objects: &[usize], flip: &[bool]) -> Option<SwitchAction> {
    let k = flip.iter().filter(|&&f| f).count();
    if k == 0 || k == objects.len() {
        return None;
    }
    let use_complement = 2 * k > objects.len() || (2 * k == objects.len() && flip[0]);
    let mut mask = vec![false; n_objects];
    for (&o, &f) in objects.iter().zip(flip) {
        mask[o] = f != use_complement;
    }
    Some(SwitchAction(mask))
}

impl ActionSpace {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    /// Physically distinct legal masks relative to `current`, do-nothing first.
    ///
    /// Configurations are projected onto the objects still connected (lines
    /// taken out mid-episode drop out) and re-checked for local validity.
    /// Split substations additionally get a mask merging them back onto one
    /// busbar.
    pub fn legal_actions(&self, spec: &GridSpec, current: &TopologyVector) -> Vec<SwitchAction> {
        let n = self.n_objects;
        let mut out = vec![SwitchAction::do_nothing(n)];
        let mut seen: HashSet<SwitchAction> = HashSet::new();
        let mut objs = Vec::new();
        let mut bars = Vec::new();
        let mut flip = Vec::new();
        for cfg in &self.configs {
            objs.clear();
            bars.clear();
            for (&o, &b) in cfg.objects.iter().zip(&cfg.busbars) {
                if current.is_connected(o) {
                    objs.push(o);
                    bars.push(b);
                }
            }
            if objs.len() != cfg.objects.len() && !busbars_valid(spec, &objs, &bars) {
                continue;
            }
            flip.clear();
            flip.extend(objs.iter().zip(&bars).map(|(&o, &b)| current.0[o] != b));
            if let Some(m) = minimal_mask(n, &objs, &flip) {
                if seen.insert(m.clone()) {
                    out.push(m);
                }
            }
        }
        for s in 0..spec.n_substations {
            if !current.substation_is_split(spec, s) {
                continue;
            }
            objs.clear();
            flip.clear();
            for &o in spec.substation_objects(s) {
                if current.is_connected(o) {
                    objs.push(o);
                    flip.push(current.0[o] == 2);
                }
            }
            if let Some(m) = minimal_mask(n, &objs, &flip) {
                if seen.insert(m.clone()) {
                    out.push(m);
                }
            }
        }
        out
    }

    /// Nearest legal action to `p` under L1 distance, or do-nothing when no
    /// entry of `p` exceeds 0.5.
    pub fn nearest_action(&self, spec: &GridSpec, p: &[f64], current: &TopologyVector) -> SwitchAction {
        if predicted_substation(spec, p).is_none() {
            return SwitchAction::do_nothing(self.n_objects);
        }
        nearest_among(p, &self.legal_actions(spec, current))
    }

    /// One configuration per line: `index substation objects assignment`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# busgraph action space variant={} configs={}\n",
            self.variant,
            self.configs.len()
        );
        for (i, c) in self.configs.iter().enumerate() {
            let objs: Vec<String> = c.objects.iter().map(|o| o.to_string()).collect();
            out.push_str(&format!(
                "{i}\t{}\t{}\t{}\n",
                c.substation,
                objs.join(","),
                c.assignment_string()
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Action spaces enumerated on first use, one per network variant.
#[derive(Debug, Clone, Default)]
pub struct ActionSpaces {
    spaces: BTreeMap<NetworkVariant, ActionSpace>,
}

impl ActionSpaces {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, spec: &GridSpec, variant: &NetworkVariant) -> Result<&ActionSpace> {
        if !self.spaces.contains_key(variant) {
            let space = enumerate_actions(spec, variant)?;
            self.spaces.insert(variant.clone(), space);
        }
        Ok(&self.spaces[variant])
    }
}

/// L1-nearest candidate; ties go to the earliest candidate.
pub fn nearest_among(p: &[f64], candidates: &[SwitchAction]) -> SwitchAction {
    let mut best: Option<(f64, &SwitchAction)> = None;
    for c in candidates {
        let d: f64 = p
            .iter()
            .zip(&c.0)
            .map(|(&pi, &m)| (pi - if m { 1.0 } else { 0.0 }).abs())
            .sum();
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c.clone())
        .unwrap_or_else(|| SwitchAction::do_nothing(p.len()))
}

/// Substation maximizing `Σ max(p_i − 0.5, 0)`; `None` when every entry is
/// at most 0.5. Ties go to the lowest substation id.
pub fn predicted_substation(spec: &GridSpec, p: &[f64]) -> Option<usize> {
    let mut scores = vec![0.0f64; spec.n_substations];
    let mut any = false;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.5 {
            any = true;
            scores[spec.object(i).substation] += pi - 0.5;
        }
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for s in 1..scores.len() {
        if scores[s] > scores[best] {
            best = s;
        }
    }
    Some(best)
}

/// Thresholds `p` at 0.5 without projecting onto legal actions.
pub fn threshold_mask(p: &[f64]) -> SwitchAction {
    SwitchAction(p.iter().map(|&x| x > 0.5).collect())
}
