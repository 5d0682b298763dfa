//! DC power flow over the bus graph induced by busbar assignments.
//!
//! A bus is a `(substation, busbar)` pair hosting at least one connected
//! object. Buses are ordered by substation and then by their lowest object
//! index, so relabelling busbars never reorders the system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ObjectKind, TopologyVector};
use crate::linalg::Lu;
use crate::scalar::Scalar;

/// Injections below this magnitude (MW) do not make an island fatal.
pub const ISLAND_INJECTION_TOL: f64 = 1e-9;

/// Generator and load MW for one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    pub gen_mw: Vec<f64>,
    pub load_mw: Vec<f64>,
}

impl Injections {
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            gen_mw: self.gen_mw.iter().map(|g| g * c).collect(),
            load_mw: self.load_mw.iter().map(|l| l * c).collect(),
        }
    }

    pub fn total_generation(&self) -> f64 {
        self.gen_mw.iter().sum()
    }

    pub fn total_load(&self) -> f64 {
        self.load_mw.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bus {
    pub substation: usize,
    pub busbar: i8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch<T> {
    pub line: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    /// 1 / reactance, per unit.
    pub susceptance: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalGraph<T> {
    pub buses: Vec<Bus>,
    /// Bus of every object; `None` for disconnected objects.
    pub object_bus: Vec<Option<usize>>,
    pub branches: Vec<Branch<T>>,
    /// Net MW per bus (generation minus load).
    pub injections: Vec<T>,
    /// Buses hosting a generator or load with non-negligible MW.
    pub active: Vec<bool>,
    /// Best slack candidate per bus: (p_max, -generator id) of its largest unit.
    slack_rank: Vec<Option<(f64, isize)>>,
}

/// Groups connected objects into buses and sums their injections.
pub fn build_electrical_graph<T: Scalar>(
    spec: &GridSpec,
    topology: &TopologyVector,
    injections: &Injections,
) -> ElectricalGraph<T> {
    let n_obj = spec.n_objects();
    debug_assert_eq!(topology.len(), n_obj);

    // slot = 2 * substation + busbar - 1; first object seen claims the key
    let mut first_obj = vec![usize::MAX; 2 * spec.n_substations];
    for (pos, &bar) in topology.as_slice().iter().enumerate() {
        if bar > 0 {
            let slot = 2 * spec.object(pos).substation + bar as usize - 1;
            if first_obj[slot] == usize::MAX {
                first_obj[slot] = pos;
            }
        }
    }
    let mut keys: Vec<(usize, usize, usize)> = first_obj
        .iter()
        .enumerate()
        .filter(|(_, &f)| f != usize::MAX)
        .map(|(slot, &f)| (slot / 2, f, slot))
        .collect();
    keys.sort_unstable();
    let mut slot_bus = vec![usize::MAX; 2 * spec.n_substations];
    let buses: Vec<Bus> = keys
        .iter()
        .enumerate()
        .map(|(i, &(sub, _, slot))| {
            slot_bus[slot] = i;
            Bus {
                substation: sub,
                busbar: (slot % 2 + 1) as i8,
            }
        })
        .collect();

    let mut object_bus = vec![None; n_obj];
    let mut inj = vec![T::zero(); buses.len()];
    let mut active = vec![false; buses.len()];
    let mut slack_rank: Vec<Option<(f64, isize)>> = vec![None; buses.len()];
    for (pos, &bar) in topology.as_slice().iter().enumerate() {
        if bar <= 0 {
            continue;
        }
        let o = spec.object(pos);
        let b = slot_bus[2 * o.substation + bar as usize - 1];
        object_bus[pos] = Some(b);
        match o.kind {
            ObjectKind::Generator => {
                let mw = injections.gen_mw[o.element];
                inj[b] += T::from_f64_lossy(mw);
                active[b] |= mw.abs() > ISLAND_INJECTION_TOL;
                let rank = (spec.generators[o.element].p_max, -(o.element as isize));
                if slack_rank[b].map_or(true, |r| rank > r) {
                    slack_rank[b] = Some(rank);
                }
            }
            ObjectKind::Load => {
                let mw = injections.load_mw[o.element];
                inj[b] -= T::from_f64_lossy(mw);
                active[b] |= mw.abs() > ISLAND_INJECTION_TOL;
            }
            ObjectKind::LineOrigin | ObjectKind::LineExtremity => {}
        }
    }

    let branches = spec
        .lines
        .iter()
        .filter_map(|l| {
            let (a, b) = spec.line_endpoints(l.id);
            Some(Branch {
                line: l.id,
                from_bus: object_bus[a]?,
                to_bus: object_bus[b]?,
                susceptance: T::one() / T::from_f64_lossy(l.reactance),
            })
        })
        .collect();

    ElectricalGraph {
        buses,
        object_bus,
        branches,
        injections: inj,
        active,
        slack_rank,
    }
}

impl<T: Scalar> ElectricalGraph<T> {
    /// Bus hosting the largest-capacity generator (lowest id on ties).
    pub fn slack_bus(&self) -> Option<usize> {
        let mut best: Option<(usize, (f64, isize))> = None;
        for (b, r) in self.slack_rank.iter().enumerate() {
            if let Some(r) = *r {
                if best.map_or(true, |(_, br)| r > br) {
                    best = Some((b, r));
                }
            }
        }
        best.map(|(b, _)| b)
    }

    /// Component label per bus over the branch graph.
    pub fn components(&self) -> Vec<usize> {
        let n = self.buses.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for br in &self.branches {
            let (a, b) = (find(&mut parent, br.from_bus), find(&mut parent, br.to_bus));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        (0..n).map(|x| find(&mut parent, x)).collect()
    }

    pub fn n_components(&self) -> usize {
        let comps = self.components();
        (0..comps.len()).filter(|&i| comps[i] == i).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution<T> {
    /// Voltage angle per bus in radians; dropped orphan buses read 0.
    pub theta: Vec<T>,
    pub slack_bus: Option<usize>,
    /// MW from origin to extremity, per line id; 0 for disabled lines.
    pub line_flows: Vec<T>,
    /// |flow| / thermal limit per line id; 0 for disabled lines.
    pub rho: Vec<T>,
    pub enabled: Vec<bool>,
}

/// Solves the slack-reduced system `B θ = P` and derives line flows.
pub fn solve_dc<T: Scalar>(graph: &ElectricalGraph<T>, spec: &GridSpec) -> Result<FlowSolution<T>> {
    let n_lines = spec.n_lines();
    let mut enabled = vec![false; n_lines];
    for br in &graph.branches {
        enabled[br.line] = true;
    }
    let n_bus = graph.buses.len();
    let Some(slack) = graph.slack_bus() else {
        if let Some(b) = graph.active.iter().position(|&a| a) {
            return Err(Error::IslandedGrid {
                substation: graph.buses[b].substation,
            });
        }
        return Ok(FlowSolution {
            theta: vec![T::zero(); n_bus],
            slack_bus: None,
            line_flows: vec![T::zero(); n_lines],
            rho: vec![T::zero(); n_lines],
            enabled,
        });
    };

    let comps = graph.components();
    let root = comps[slack];
    for b in 0..n_bus {
        if comps[b] != root && graph.active[b] {
            return Err(Error::IslandedGrid {
                substation: graph.buses[b].substation,
            });
        }
    }

    // reduced index of each live non-slack bus
    let mut reduced = vec![usize::MAX; n_bus];
    let mut n = 0;
    for b in 0..n_bus {
        if b != slack && comps[b] == root {
            reduced[b] = n;
            n += 1;
        }
    }
    let base = T::from_f64_lossy(spec.base_mva);
    let mut bmat = vec![T::zero(); n * n];
    for br in &graph.branches {
        if comps[br.from_bus] != root {
            continue;
        }
        let (i, j) = (reduced[br.from_bus], reduced[br.to_bus]);
        let y = br.susceptance;
        if i != usize::MAX {
            bmat[i * n + i] += y;
        }
        if j != usize::MAX {
            bmat[j * n + j] += y;
        }
        if i != usize::MAX && j != usize::MAX {
            bmat[i * n + j] -= y;
            bmat[j * n + i] -= y;
        }
    }
    let mut p = vec![T::zero(); n];
    for b in 0..n_bus {
        if reduced[b] != usize::MAX {
            p[reduced[b]] = graph.injections[b] / base;
        }
    }
    let lu = Lu::factor(n, bmat).map_err(|s| Error::SingularSystem {
        row: s.row,
        pivot: s.pivot,
    })?;
    let x = lu.solve(&p);

    let mut theta = vec![T::zero(); n_bus];
    for b in 0..n_bus {
        if reduced[b] != usize::MAX {
            theta[b] = x[reduced[b]];
        }
    }
    let mut line_flows = vec![T::zero(); n_lines];
    let mut rho = vec![T::zero(); n_lines];
    for br in &graph.branches {
        let f = br.susceptance * (theta[br.from_bus] - theta[br.to_bus]) * base;
        line_flows[br.line] = f;
        rho[br.line] = f.abs() / T::from_f64_lossy(spec.lines[br.line].thermal_limit);
    }
    Ok(FlowSolution {
        theta,
        slack_bus: Some(slack),
        line_flows,
        rho,
        enabled,
    })
}

impl<T: Scalar> FlowSolution<T> {
    pub fn max_loading(&self) -> T {
        max_loading(self)
    }
}

/// Largest loading over enabled lines; 0 when no line is enabled.
pub fn max_loading<T: Scalar>(solution: &FlowSolution<T>) -> T {
    solution
        .rho
        .iter()
        .zip(&solution.enabled)
        .filter(|(_, &e)| e)
        .fold(T::zero(), |m, (&r, _)| if r > m { r } else { m })
}

/// Topology + injections straight to a solution.
pub fn simulate<T: Scalar>(
    spec: &GridSpec,
    topology: &TopologyVector,
    injections: &Injections,
) -> Result<FlowSolution<T>> {
    let graph = build_electrical_graph::<T>(spec, topology, injections);
    solve_dc(&graph, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_default_spec, Generator, GeneratorKind, Line, Load, NetworkVariant};

    /// Buses 0..n as substations, one generator at 0 and the given lines.
    pub(crate) fn toy_spec(n_sub: usize, lines: &[(usize, usize, f64, f64)], loads_at: &[usize]) -> GridSpec {
        let generators = vec![Generator {
            id: 0,
            substation: 0,
            p_max: 100.0,
            nominal_mw: 0.0,
            kind: GeneratorKind::Thermal,
        }];
        let loads = loads_at
            .iter()
            .enumerate()
            .map(|(id, &s)| Load {
                id,
                substation: s,
                nominal_mw: 0.0,
            })
            .collect();
        let lines = lines
            .iter()
            .enumerate()
            .map(|(id, &(f, t, x, lim))| Line {
                id,
                from_substation: f,
                to_substation: t,
                reactance: x,
                thermal_limit: lim,
                transformer: false,
            })
            .collect();
        GridSpec::new("toy", n_sub, 100.0, generators, loads, lines).unwrap()
    }

    #[test]
    fn two_bus_flow_is_forced() {
        let spec = toy_spec(2, &[(0, 1, 0.1, 50.0)], &[1]);
        let topo = spec.default_topology(&NetworkVariant::full()).unwrap();
        let inj = Injections {
            gen_mw: vec![50.0],
            load_mw: vec![50.0],
        };
        let sol = simulate::<f64>(&spec, &topo, &inj).unwrap();
        assert!((sol.line_flows[0] - 50.0).abs() < 1e-9);
        assert!((sol.max_loading() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_splits_60_30_30() {
        // gen at A (90 MW), load at B (90 MW), C passive; equal reactances.
        // Reduced system with slack A: [2 -1; -1 2] [θB θC] = [-0.9 0] gives
        // θB = -0.6, θC = -0.3, so A→B 60, A→C 30, C→B 30.
        let spec = toy_spec(3, &[(0, 1, 0.1, 100.0), (0, 2, 0.1, 100.0), (2, 1, 0.1, 100.0)], &[1]);
        let topo = spec.default_topology(&NetworkVariant::full()).unwrap();
        let inj = Injections {
            gen_mw: vec![90.0],
            load_mw: vec![90.0],
        };
        let sol = simulate::<f64>(&spec, &topo, &inj).unwrap();
        let want = [60.0, 30.0, 30.0];
        for (f, w) in sol.line_flows.iter().zip(want) {
            assert!((f - w).abs() < 1e-9, "{f} vs {w}");
        }
    }

    #[test]
    fn max_loading_conventions() {
        let sol = FlowSolution::<f64> {
            theta: vec![],
            slack_bus: None,
            line_flows: vec![0.0; 3],
            rho: vec![0.3, 0.9, 0.5],
            enabled: vec![true; 3],
        };
        assert_eq!(max_loading(&sol), 0.9);
        let none = FlowSolution::<f64> {
            enabled: vec![false; 3],
            ..sol
        };
        assert_eq!(max_loading(&none), 0.0);
    }

    #[test]
    fn default_topology_has_14_buses_and_balances() {
        let spec = build_default_spec();
        let topo = spec.default_topology(&NetworkVariant::full()).unwrap();
        let inj = spec.nominal_injections();
        let g = build_electrical_graph::<f64>(&spec, &topo, &inj);
        assert_eq!(g.buses.len(), 14);
        let sol = solve_dc(&g, &spec).unwrap();
        let slack = sol.slack_bus.unwrap();
        let mut net = g.injections.clone();
        for br in &g.branches {
            net[br.from_bus] -= sol.line_flows[br.line];
            net[br.to_bus] += sol.line_flows[br.line];
        }
        for (b, r) in net.iter().enumerate() {
            if b != slack {
                assert!(r.abs() < 1e-8, "bus {b} residual {r}");
            }
        }
    }

    #[test]
    fn split_substation_adds_a_bus_and_reattaches_lines() {
        let spec = build_default_spec();
        let mut topo = spec.default_topology(&NetworkVariant::full()).unwrap();
        // substation 1: move line 8's origin and line 9's origin to busbar 2
        let (a8, _) = spec.line_endpoints(8);
        let (a9, _) = spec.line_endpoints(9);
        topo.0[a8] = 2;
        topo.0[a9] = 2;
        let g = build_electrical_graph::<f64>(&spec, &topo, &spec.nominal_injections());
        assert_eq!(g.buses.len(), 15);
        let br = g.branches.iter().find(|b| b.line == 8).unwrap();
        assert_eq!(g.buses[br.from_bus], Bus { substation: 1, busbar: 2 });
    }

    #[test]
    fn islanded_load_is_reported() {
        let spec = toy_spec(3, &[(0, 1, 0.1, 100.0), (1, 2, 0.1, 100.0)], &[2]);
        let mut topo = spec.default_topology(&NetworkVariant::full()).unwrap();
        topo.disable_line(&spec, 1);
        let inj = Injections {
            gen_mw: vec![10.0],
            load_mw: vec![10.0],
        };
        assert!(matches!(
            simulate::<f64>(&spec, &topo, &inj),
            Err(Error::IslandedGrid { substation: 2 })
        ));
        // the same island with zero demand is simply dropped
        let quiet = Injections {
            gen_mw: vec![0.0],
            load_mw: vec![0.0],
        };
        assert!(simulate::<f64>(&spec, &topo, &quiet).is_ok());
    }

    #[test]
    fn relabelled_busbar_gives_identical_flows() {
        let spec = build_default_spec();
        let topo = spec.default_topology(&NetworkVariant::full()).unwrap();
        let mut moved = topo.clone();
        for &o in spec.substation_objects(3) {
            moved.0[o] = 2;
        }
        let inj = spec.nominal_injections();
        let a = simulate::<f64>(&spec, &topo, &inj).unwrap();
        let b = simulate::<f64>(&spec, &moved, &inj).unwrap();
        assert_eq!(a.line_flows, b.line_flows);
    }

    #[test]
    fn f32_solution_tracks_f64() {
        let spec = build_default_spec();
        let topo = spec.default_topology(&NetworkVariant::full()).unwrap();
        let inj = spec.nominal_injections();
        let a = simulate::<f64>(&spec, &topo, &inj).unwrap();
        let b = simulate::<f32>(&spec, &topo, &inj).unwrap();
        for (x, y) in a.line_flows.iter().zip(&b.line_flows) {
            assert!((x - *y as f64).abs() < 1e-3);
        }
    }

    proptest::proptest! {
        #[test]
        fn flows_are_linear_and_balanced(
            gen in proptest::collection::vec(0.0f64..1.0, 5),
            load in proptest::collection::vec(0.2f64..1.8, 11),
            c in 0.1f64..4.0,
        ) {
            let spec = build_default_spec();
            let topo = spec.default_topology(&NetworkVariant::full()).unwrap();
            let inj = Injections {
                gen_mw: spec.generators.iter().zip(&gen).map(|(g, f)| f * g.p_max).collect(),
                load_mw: spec.loads.iter().zip(&load).map(|(l, f)| f * l.nominal_mw).collect(),
            };
            let a = simulate::<f64>(&spec, &topo, &inj).unwrap();
            let b = simulate::<f64>(&spec, &topo, &inj.scaled(c)).unwrap();
            let scale = a.line_flows.iter().fold(1.0f64, |m, f| m.max(f.abs()));
            for (x, y) in a.line_flows.iter().zip(&b.line_flows) {
                proptest::prop_assert!((c * x - y).abs() <= 1e-10 * c * scale);
            }
            let g = build_electrical_graph::<f64>(&spec, &topo, &inj);
            let mut net = g.injections.clone();
            for br in &g.branches {
                net[br.from_bus] -= a.line_flows[br.line];
                net[br.to_bus] += a.line_flows[br.line];
            }
            let slack = a.slack_bus.unwrap();
            for (bus, r) in net.iter().enumerate() {
                if bus != slack {
                    proptest::prop_assert!(r.abs() < 1e-8);
                }
            }
        }
    }
}
