//! Static grid description, object indexing, topology vectors and N-1 variants.
//!
//! Objects are indexed generators first, then loads, then line endpoints
//! (origin before extremity, by line id). That index is the position in the
//! topology vector, in every feature block and in every switch mask.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::SwitchAction;
use crate::error::{Error, Result};
use crate::powerflow::{self, Injections};

pub const GRID_FORMAT: &str = "busgraph-grid/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Solar,
    Wind,
    Nuclear,
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: usize,
    pub substation: usize,
    pub p_max: f64,
    /// Dispatch at the nominal peak, used to size thermal limits.
    pub nominal_mw: f64,
    pub kind: GeneratorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub id: usize,
    pub substation: usize,
    pub nominal_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: usize,
    pub from_substation: usize,
    pub to_substation: usize,
    /// Series reactance, per unit on the system base.
    pub reactance: f64,
    /// MW
    pub thermal_limit: f64,
    #[serde(default)]
    pub transformer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectKind {
    Generator,
    Load,
    LineOrigin,
    LineExtremity,
}

impl ObjectKind {
    pub fn is_line_end(self) -> bool {
        matches!(self, ObjectKind::LineOrigin | ObjectKind::LineExtremity)
    }
}

/// One configurable object: which element it belongs to and where it sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridObject {
    pub kind: ObjectKind,
    /// Generator, load or line id depending on `kind`.
    pub element: usize,
    pub substation: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridHeader {
    name: String,
    n_substations: usize,
    base_mva: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    format: String,
    grid: GridHeader,
    generators: Vec<Generator>,
    loads: Vec<Load>,
    lines: Vec<Line>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub name: String,
    pub n_substations: usize,
    pub base_mva: f64,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub lines: Vec<Line>,
    objects: Vec<GridObject>,
    by_substation: Vec<Vec<usize>>,
}

impl GridSpec {
    pub fn new(
        name: impl Into<String>,
        n_substations: usize,
        base_mva: f64,
        generators: Vec<Generator>,
        loads: Vec<Load>,
        lines: Vec<Line>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if !(base_mva > 0.0) {
            return bad(format!("base_mva must be positive, got {base_mva}"));
        }
        for (i, g) in generators.iter().enumerate() {
            if g.id != i {
                return bad(format!("generator at position {i} has id {}", g.id));
            }
            if g.substation >= n_substations {
                return bad(format!("generator {i} sits at unknown substation {}", g.substation));
            }
            if !(g.p_max > 0.0) {
                return bad(format!("generator {i} has non-positive p_max"));
            }
        }
        for (i, l) in loads.iter().enumerate() {
            if l.id != i {
                return bad(format!("load at position {i} has id {}", l.id));
            }
            if l.substation >= n_substations {
                return bad(format!("load {i} sits at unknown substation {}", l.substation));
            }
        }
        for (i, l) in lines.iter().enumerate() {
            if l.id != i {
                return bad(format!("line at position {i} has id {}", l.id));
            }
            if l.from_substation >= n_substations || l.to_substation >= n_substations {
                return bad(format!("line {i} references an unknown substation"));
            }
            if l.from_substation == l.to_substation {
                return bad(format!("line {i} starts and ends at substation {}", l.from_substation));
            }
            if !(l.reactance > 0.0) {
                return bad(format!("line {i} has non-positive reactance"));
            }
            if !(l.thermal_limit > 0.0) {
                return bad(format!("line {i} has non-positive thermal limit"));
            }
        }

        let mut objects = Vec::with_capacity(generators.len() + loads.len() + 2 * lines.len());
        objects.extend(generators.iter().map(|g| GridObject {
            kind: ObjectKind::Generator,
            element: g.id,
            substation: g.substation,
        }));
        objects.extend(loads.iter().map(|l| GridObject {
            kind: ObjectKind::Load,
            element: l.id,
            substation: l.substation,
        }));
        for l in &lines {
            objects.push(GridObject {
                kind: ObjectKind::LineOrigin,
                element: l.id,
                substation: l.from_substation,
            });
            objects.push(GridObject {
                kind: ObjectKind::LineExtremity,
                element: l.id,
                substation: l.to_substation,
            });
        }
        let mut by_substation = vec![Vec::new(); n_substations];
        for (pos, o) in objects.iter().enumerate() {
            by_substation[o.substation].push(pos);
        }

        Ok(Self {
            name: name.into(),
            n_substations,
            base_mva,
            generators,
            loads,
            lines,
            objects,
            by_substation,
        })
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn objects(&self) -> &[GridObject] {
        &self.objects
    }

    pub fn object(&self, pos: usize) -> GridObject {
        self.objects[pos]
    }

    /// Position of an object in the topology vector.
    pub fn position(&self, kind: ObjectKind, element: usize) -> Option<usize> {
        let (n_gen, n_load, n_line) = (self.generators.len(), self.loads.len(), self.lines.len());
        match kind {
            ObjectKind::Generator if element < n_gen => Some(element),
            ObjectKind::Load if element < n_load => Some(n_gen + element),
            ObjectKind::LineOrigin if element < n_line => Some(n_gen + n_load + 2 * element),
            ObjectKind::LineExtremity if element < n_line => Some(n_gen + n_load + 2 * element + 1),
            _ => None,
        }
    }

    /// Topology-vector positions of a line's (origin, extremity).
    pub fn line_endpoints(&self, line: usize) -> (usize, usize) {
        let base = self.generators.len() + self.loads.len() + 2 * line;
        (base, base + 1)
    }

    pub fn first_endpoint(&self) -> usize {
        self.generators.len() + self.loads.len()
    }

    /// Position of the other end of the line an endpoint belongs to.
    pub fn line_partner(&self, pos: usize) -> Option<usize> {
        let first = self.first_endpoint();
        if pos < first || pos >= self.objects.len() {
            return None;
        }
        Some(if (pos - first) % 2 == 0 { pos + 1 } else { pos - 1 })
    }

    /// Object positions at a substation, ascending.
    pub fn substation_objects(&self, substation: usize) -> &[usize] {
        &self.by_substation[substation]
    }

    pub fn default_topology(&self, variant: &NetworkVariant) -> Result<TopologyVector> {
        variant.validate(self)?;
        let mut t = vec![1i8; self.n_objects()];
        for &l in &variant.disabled_lines {
            let (a, b) = self.line_endpoints(l);
            t[a] = -1;
            t[b] = -1;
        }
        Ok(TopologyVector(t))
    }

    /// Injections at the nominal peak (generators at `nominal_mw`, loads at
    /// `nominal_mw`).
    pub fn nominal_injections(&self) -> Injections {
        Injections {
            gen_mw: self.generators.iter().map(|g| g.nominal_mw).collect(),
            load_mw: self.loads.iter().map(|l| l.nominal_mw).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let file = GridFile {
            format: GRID_FORMAT.to_string(),
            grid: GridHeader {
                name: self.name.clone(),
                n_substations: self.n_substations,
                base_mva: self.base_mva,
            },
            generators: self.generators.clone(),
            loads: self.loads.clone(),
            lines: self.lines.clone(),
        };
        toml::to_string(&file).expect("grid spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let file: GridFile =
            toml::from_str(text).map_err(|e| Error::parse("grid", 0, e.to_string()))?;
        if file.format != GRID_FORMAT {
            return Err(Error::parse("grid", 0, format!("unsupported format {:?}", file.format)));
        }
        Self::new(
            file.grid.name,
            file.grid.n_substations,
            file.grid.base_mva,
            file.generators,
            file.loads,
            file.lines,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// First 16 hex digits of the SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Recomputes thermal limits as a margin over the largest DC flow seen
    /// at the nominal peak on the unsplit full network and on each reference
    /// single-line outage.
    pub fn with_thermal_limits(mut self, policy: &ThermalLimitPolicy) -> Result<Self> {
        let inj = self.nominal_injections();
        let mut observed = vec![0.0f64; self.n_lines()];
        let variants = std::iter::once(NetworkVariant::full())
            .chain(policy.reference_outages.iter().map(|&l| NetworkVariant::n_minus_1(l)));
        for variant in variants {
            let topo = self.default_topology(&variant)?;
            let graph = powerflow::build_electrical_graph::<f64>(&self, &topo, &inj);
            let flows = powerflow::solve_dc(&graph, &self)?;
            for (o, f) in observed.iter_mut().zip(&flows.line_flows) {
                *o = o.max(f.abs());
            }
        }
        for line in &mut self.lines {
            let margin = if line.transformer {
                policy.transformer_margin
            } else {
                policy.line_margin
            };
            line.thermal_limit = (margin * observed[line.id]).max(policy.floor_mw);
        }
        Ok(self)
    }
}

/// How thermal limits are sized from nominal-peak DC flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermalLimitPolicy {
    pub line_margin: f64,
    pub transformer_margin: f64,
    pub floor_mw: f64,
    /// Single-line outages whose nominal flows also bound the limits.
    pub reference_outages: Vec<usize>,
}

impl Default for ThermalLimitPolicy {
    fn default() -> Self {
        Self {
            line_margin: 1.3,
            transformer_margin: 1.0,
            floor_mw: 5.0,
            reference_outages: ID_OUTAGE_LINES.iter().chain(&OOD_OUTAGE_LINES).copied().collect(),
        }
    }
}

/// IEEE 14-bus reactances in per unit on 100 MVA, in line-id order:
/// (from, to, x, transformer). Substations are zero-based bus numbers.
const IEEE14_BRANCHES: [(usize, usize, f64, bool); 20] = [
    (0, 1, 0.05917, false),
    (0, 4, 0.22304, false),
    (8, 9, 0.08450, false),
    (8, 13, 0.27038, false),
    (9, 10, 0.19207, false),
    (11, 12, 0.19988, false),
    (12, 13, 0.34802, false),
    (1, 2, 0.19797, false),
    (1, 3, 0.17632, false),
    (1, 4, 0.17388, false),
    (2, 3, 0.17103, false),
    (3, 4, 0.04211, false),
    (5, 10, 0.19890, false),
    (5, 11, 0.25581, false),
    (5, 12, 0.13027, false),
    (3, 6, 0.20912, true),
    (3, 8, 0.55618, true),
    (4, 5, 0.25202, true),
    (6, 7, 0.17615, true),
    (6, 8, 0.11001, true),
];

/// Standard IEEE 14-bus load placement and MW demand.
const IEEE14_LOADS: [(usize, f64); 11] = [
    (1, 21.7),
    (2, 94.2),
    (3, 47.8),
    (4, 7.6),
    (5, 11.2),
    (8, 29.5),
    (9, 9.0),
    (10, 3.5),
    (11, 6.1),
    (12, 13.5),
    (13, 14.9),
];

/// (substation, p_max, nominal dispatch, kind). The nominal dispatch is an
/// evening peak: no solar, thermal units covering the residual.
const IEEE14_GENERATORS: [(usize, f64, f64, GeneratorKind); 5] = [
    (1, 140.0, 92.0, GeneratorKind::Thermal),
    (2, 60.0, 30.0, GeneratorKind::Wind),
    (5, 40.0, 0.0, GeneratorKind::Solar),
    (7, 20.0, 18.0, GeneratorKind::Thermal),
    (0, 150.0, 119.0, GeneratorKind::Nuclear),
];

/// The 14-substation, 5-generator, 11-load, 20-line grid with limits sized by
/// the default [`ThermalLimitPolicy`].
pub fn build_default_spec() -> GridSpec {
    build_ieee14_spec(&ThermalLimitPolicy::default()).expect("built-in grid is valid")
}

pub fn build_ieee14_spec(policy: &ThermalLimitPolicy) -> Result<GridSpec> {
    let generators = IEEE14_GENERATORS
        .iter()
        .enumerate()
        .map(|(id, &(substation, p_max, nominal_mw, kind))| Generator {
            id,
            substation,
            p_max,
            nominal_mw,
            kind,
        })
        .collect();
    let loads = IEEE14_LOADS
        .iter()
        .enumerate()
        .map(|(id, &(substation, nominal_mw))| Load {
            id,
            substation,
            nominal_mw,
        })
        .collect();
    let lines = IEEE14_BRANCHES
        .iter()
        .enumerate()
        .map(|(id, &(from, to, x, transformer))| Line {
            id,
            from_substation: from,
            to_substation: to,
            reactance: x,
            thermal_limit: 1.0,
            transformer,
        })
        .collect();
    GridSpec::new("ieee14", 14, 100.0, generators, loads, lines)?.with_thermal_limits(policy)
}

/// Busbar assignment per object: 1, 2, or -1 for disconnected.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TopologyVector(pub Vec<i8>);

impl TopologyVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn is_connected(&self, pos: usize) -> bool {
        self.0[pos] > 0
    }

    pub fn line_enabled(&self, spec: &GridSpec, line: usize) -> bool {
        let (a, _) = spec.line_endpoints(line);
        self.0[a] > 0
    }

    /// True when no object sits on busbar 2.
    pub fn is_unsplit(&self) -> bool {
        self.0.iter().all(|&b| b != 2)
    }

    pub fn substation_is_split(&self, spec: &GridSpec, substation: usize) -> bool {
        let objs = spec.substation_objects(substation);
        let on = |bar: i8| objs.iter().any(|&o| self.0[o] == bar);
        on(1) && on(2)
    }

    pub fn disable_line(&mut self, spec: &GridSpec, line: usize) {
        let (a, b) = spec.line_endpoints(line);
        self.0[a] = -1;
        self.0[b] = -1;
    }

    pub fn restore_line(&mut self, spec: &GridSpec, line: usize) {
        let (a, b) = spec.line_endpoints(line);
        self.0[a] = 1;
        self.0[b] = 1;
    }

    pub fn enabled_lines(&self, spec: &GridSpec) -> Vec<usize> {
        (0..spec.n_lines()).filter(|&l| self.line_enabled(spec, l)).collect()
    }

    /// Checks the value domain and the paired-endpoint invariant.
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        if self.0.len() != spec.n_objects() {
            return Err(Error::ShapeMismatch(format!(
                "topology has {} entries, grid has {} objects",
                self.0.len(),
                spec.n_objects()
            )));
        }
        if let Some(v) = self.0.iter().find(|v| !matches!(v, -1 | 1 | 2)) {
            return Err(Error::InvalidSpec(format!("topology value {v} not in {{-1, 1, 2}}")));
        }
        for l in 0..spec.n_lines() {
            let (a, b) = spec.line_endpoints(l);
            if (self.0[a] < 0) != (self.0[b] < 0) {
                return Err(Error::InvalidSpec(format!("line {l} is half disconnected")));
            }
        }
        Ok(())
    }

    /// Flips flagged objects between busbars.
    pub fn apply_switch(&self, action: &SwitchAction) -> Result<TopologyVector> {
        if action.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "action has {} entries, topology has {}",
                action.len(),
                self.len()
            )));
        }
        let mut out = self.0.clone();
        for pos in action.set_bits() {
            out[pos] = match out[pos] {
                1 => 2,
                2 => 1,
                _ => {
                    return Err(Error::IllegalAction(format!(
                        "object {pos} is disconnected and cannot be switched"
                    )))
                }
            };
        }
        Ok(TopologyVector(out))
    }
}

pub fn apply_switch(topology: &TopologyVector, action: &SwitchAction) -> Result<TopologyVector> {
    topology.apply_switch(action)
}

pub fn default_topology(spec: &GridSpec, variant: &NetworkVariant) -> Result<TopologyVector> {
    spec.default_topology(variant)
}

/// The full network, or the network with one line taken out of service.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NetworkVariant {
    pub disabled_lines: BTreeSet<usize>,
}

impl NetworkVariant {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn n_minus_1(line: usize) -> Self {
        Self {
            disabled_lines: BTreeSet::from([line]),
        }
    }

    pub fn is_full(&self) -> bool {
        self.disabled_lines.is_empty()
    }

    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        if let Some(&l) = self.disabled_lines.iter().find(|&&l| l >= spec.n_lines()) {
            return Err(Error::UnknownLine(l));
        }
        if self.disabled_lines.len() > 1 {
            return Err(Error::InvalidSpec("at most one line may be disabled per variant".into()));
        }
        Ok(())
    }

    /// `full` or `l<line>`.
    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.disabled_lines.is_empty() {
            return f.write_str("full");
        }
        let ids: Vec<String> = self.disabled_lines.iter().map(|l| format!("l{l}")).collect();
        f.write_str(&ids.join("+"))
    }
}

impl FromStr for NetworkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::full());
        }
        let mut disabled_lines = BTreeSet::new();
        for part in s.split('+') {
            let id = part
                .strip_prefix('l')
                .and_then(|n| n.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("bad variant id {s:?}")))?;
            disabled_lines.insert(id);
        }
        Ok(Self { disabled_lines })
    }
}

/// Lines disabled in the in-distribution outage variants.
pub const ID_OUTAGE_LINES: [usize; 6] = [0, 2, 4, 5, 6, 12];
/// Lines disabled in the out-of-distribution variants.
pub const OOD_OUTAGE_LINES: [usize; 2] = [1, 3];
