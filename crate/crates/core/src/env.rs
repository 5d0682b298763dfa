//! Day-long episode simulation: synthetic injection chronics, opponent
//! outages, overflow disconnection and game-over detection.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actions::SwitchAction;
use crate::error::{Error, Result};
use crate::grid::{GeneratorKind, GridSpec, NetworkVariant, TopologyVector};
use crate::powerflow::{simulate, FlowSolution, Injections};

pub const STEPS_PER_DAY: usize = 288;
pub const DAYS_PER_SCENARIO: usize = 28;
/// Four hours of five-minute steps.
pub const OUTAGE_STEPS: usize = 48;
/// One hour of five-minute steps.
pub const MIN_OUTAGE_GAP: usize = 12;

/// Derives an independent stream seed from a root seed and a label.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = root ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChronicsConfig {
    pub n_days: usize,
    /// Range of the per-scenario demand level relative to nominal.
    pub level_min: f64,
    pub level_max: f64,
    /// Day-to-day standard deviation of demand.
    pub day_sigma: f64,
    /// Range of the daily clear-sky fraction of solar output.
    pub sun_min: f64,
    pub sun_max: f64,
}

impl Default for ChronicsConfig {
    fn default() -> Self {
        Self {
            n_days: DAYS_PER_SCENARIO,
            level_min: 0.85,
            level_max: 1.1,
            day_sigma: 0.04,
            sun_min: 0.2,
            sun_max: 0.7,
        }
    }
}

/// Injections of one scenario, indexed `[step][element]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioChronics {
    pub scenario_id: usize,
    pub gen_mw: Vec<Vec<f64>>,
    pub load_mw: Vec<Vec<f64>>,
}

impl ScenarioChronics {
    pub fn n_steps(&self) -> usize {
        self.load_mw.len()
    }

    pub fn injections(&self, step: usize) -> Injections {
        Injections {
            gen_mw: self.gen_mw[step].clone(),
            load_mw: self.load_mw[step].clone(),
        }
    }

    /// Header `step,gen_0..,load_0..` then one row per step.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let n_gen = self.gen_mw.first().map_or(0, Vec::len);
        let n_load = self.load_mw.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend((0..n_gen).map(|g| format!("gen_{g}")));
        header.extend((0..n_load).map(|l| format!("load_{l}")));
        writeln!(w, "# scenario {}", self.scenario_id).map_err(io)?;
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for t in 0..self.n_steps() {
            let mut row = vec![t.to_string()];
            row.extend(self.gen_mw[t].iter().map(|v| format!("{v:?}")));
            row.extend(self.load_mw[t].iter().map(|v| format!("{v:?}")));
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let mut next = |n: usize| -> Result<Option<String>> {
            lines
                .next()
                .transpose()
                .map_err(|e| Error::io(path, e))
                .map(|o| o.map(|s| s.trim_end().to_string()))
                .map_err(|e| if n == 0 { e } else { e })
        };
        let first = next(0)?.ok_or_else(|| Error::parse("chronics", 1, "empty file"))?;
        let scenario_id = first
            .strip_prefix("# scenario ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse("chronics", 1, "missing scenario header"))?;
        let header = next(1)?.ok_or_else(|| Error::parse("chronics", 2, "missing column header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n_gen = cols.iter().filter(|c| c.starts_with("gen_")).count();
        let n_load = cols.iter().filter(|c| c.starts_with("load_")).count();
        if cols.first() != Some(&"step") || 1 + n_gen + n_load != cols.len() {
            return Err(Error::parse("chronics", 2, "unexpected columns"));
        }
        let (mut gen_mw, mut load_mw) = (Vec::new(), Vec::new());
        let mut lineno = 2;
        while let Some(row) = next(lineno)? {
            lineno += 1;
            let vals: Vec<&str> = row.split(',').collect();
            if vals.len() != cols.len() {
                return Err(Error::parse("chronics", lineno, "wrong field count"));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::parse("chronics", lineno, format!("bad number {s:?}")))
            };
            gen_mw.push(vals[1..1 + n_gen].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?);
            load_mw.push(vals[1 + n_gen..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self {
            scenario_id,
            gen_mw,
            load_mw,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chronics {
    pub scenarios: Vec<ScenarioChronics>,
}

fn bump(h: f64, mu: f64, sigma: f64) -> f64 {
    let d = h - mu;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Double-peaked (morning, evening) demand shape, maximum near 1.
fn diurnal(h: f64) -> f64 {
    let h = h.rem_euclid(24.0);
    0.55 + 0.3 * bump(h, 8.5, 1.6) + 0.45 * (bump(h, 19.0, 2.0) + bump(h, -5.0, 2.0))
}

fn solar_shape(h: f64) -> f64 {
    if (6.0..=18.0).contains(&h) {
        (PI * (h - 6.0) / 12.0).sin().max(0.0).powf(1.5)
    } else {
        0.0
    }
}

/// Deterministic synthetic chronics; scenario `i` depends only on `(seed, i)`.
pub fn generate_chronics(spec: &GridSpec, n_scenarios: usize, seed: u64, cfg: &ChronicsConfig) -> Chronics {
    let scenarios = (0..n_scenarios.max(1))
        .map(|sid| generate_scenario(spec, sid, seed, cfg))
        .collect();
    Chronics { scenarios }
}

pub fn generate_scenario(spec: &GridSpec, scenario_id: usize, seed: u64, cfg: &ChronicsConfig) -> ScenarioChronics {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, scenario_id as u64));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n_steps = cfg.n_days * STEPS_PER_DAY;
    let n_load = spec.loads.len();

    let level = rng.gen_range(cfg.level_min..=cfg.level_max);
    let phase: Vec<f64> = (0..n_load).map(|_| 0.4 * std_normal.sample(&mut rng)).collect();
    let amp: Vec<f64> = (0..n_load).map(|_| rng.gen_range(0.92..1.08)).collect();
    let mut noise = vec![0.0f64; n_load];

    let wind_mean = rng.gen_range(0.2..0.7);
    let mut wind = wind_mean;
    let nuclear_base = rng.gen_range(0.7..0.85);

    let mut gen_mw = Vec::with_capacity(n_steps);
    let mut load_mw = Vec::with_capacity(n_steps);
    let mut day_level = 1.0;
    let mut cloud = 1.0;
    for t in 0..n_steps {
        if t % STEPS_PER_DAY == 0 {
            let day = t / STEPS_PER_DAY;
            let weekend = if day % 7 >= 5 { 0.93 } else { 1.0 };
            day_level = weekend * (1.0 + cfg.day_sigma * std_normal.sample(&mut rng));
            cloud = rng.gen_range(cfg.sun_min..=cfg.sun_max);
        }
        let h = (t % STEPS_PER_DAY) as f64 * 24.0 / STEPS_PER_DAY as f64;
        let loads: Vec<f64> = spec
            .loads
            .iter()
            .enumerate()
            .map(|(i, l)| {
                noise[i] = 0.97 * noise[i] + 0.006 * std_normal.sample(&mut rng);
                (l.nominal_mw * level * day_level * amp[i] * diurnal(h + phase[i]) * (1.0 + noise[i])).max(0.0)
            })
            .collect();
        let total_load: f64 = loads.iter().sum();

        wind = (wind + 0.02 * (wind_mean - wind) + 0.03 * std_normal.sample(&mut rng)).clamp(0.0, 1.0);
        let mut out = vec![0.0f64; spec.generators.len()];
        let mut thermal_cap = 0.0;
        for (i, g) in spec.generators.iter().enumerate() {
            match g.kind {
                GeneratorKind::Solar => {
                    let jitter = 1.0 + 0.05 * std_normal.sample(&mut rng);
                    out[i] = (g.p_max * cloud * solar_shape(h) * jitter).clamp(0.0, g.p_max);
                }
                GeneratorKind::Wind => out[i] = g.p_max * wind,
                GeneratorKind::Nuclear => out[i] = g.p_max * nuclear_base,
                GeneratorKind::Thermal => thermal_cap += 0.9 * g.p_max,
            }
        }
        // thermal units share the residual in proportion to capacity
        let mut residual = total_load - out.iter().sum::<f64>();
        let share = (residual / thermal_cap).clamp(0.0, 1.0);
        for (i, g) in spec.generators.iter().enumerate() {
            if g.kind == GeneratorKind::Thermal {
                out[i] = 0.9 * g.p_max * share;
                residual -= out[i];
            }
        }
        // nuclear follows what is left, then renewables are curtailed
        for kind in [GeneratorKind::Nuclear, GeneratorKind::Wind, GeneratorKind::Solar] {
            for (i, g) in spec.generators.iter().enumerate() {
                if g.kind != kind || residual.abs() < 1e-12 {
                    continue;
                }
                let floor = if kind == GeneratorKind::Nuclear { 0.4 * g.p_max } else { 0.0 };
                let target = (out[i] + residual).clamp(floor, g.p_max);
                residual -= target - out[i];
                out[i] = target;
            }
        }
        gen_mw.push(out);
        load_mw.push(loads);
    }
    ScenarioChronics {
        scenario_id,
        gen_mw,
        load_mw,
    }
}

/// One day of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct DayEpisode {
    pub scenario_id: usize,
    pub day: usize,
    pub injections: Vec<Injections>,
}

impl DayEpisode {
    pub fn first_step(&self) -> usize {
        self.day * STEPS_PER_DAY
    }
}

/// Cuts each scenario into 288-step days.
pub fn split_days(chronics: &Chronics) -> Result<Vec<DayEpisode>> {
    let mut out = Vec::new();
    for sc in &chronics.scenarios {
        if sc.n_steps() % STEPS_PER_DAY != 0 {
            return Err(Error::ShapeMismatch(format!(
                "scenario {} has {} steps, not a multiple of {STEPS_PER_DAY}",
                sc.scenario_id,
                sc.n_steps()
            )));
        }
        for day in 0..sc.n_steps() / STEPS_PER_DAY {
            out.push(DayEpisode {
                scenario_id: sc.scenario_id,
                day,
                injections: (day * STEPS_PER_DAY..(day + 1) * STEPS_PER_DAY)
                    .map(|t| sc.injections(t))
                    .collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outage {
    pub line: usize,
    pub start: usize,
    pub duration: usize,
}

/// How lines go out of service during an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// No outages.
    FullNetwork,
    /// A line statically out for the whole day.
    PlannedOutage(NetworkVariant),
    /// The opponent takes lines from `pool` out twice a day.
    UnplannedOutage { pool: Vec<usize> },
}

impl Regime {
    pub fn variant(&self) -> NetworkVariant {
        match self {
            Regime::PlannedOutage(v) => v.clone(),
            _ => NetworkVariant::full(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Regime::FullNetwork => "full".into(),
            Regime::PlannedOutage(v) => format!("planned-{v}"),
            Regime::UnplannedOutage { pool } => {
                let ids: Vec<String> = pool.iter().map(|l| l.to_string()).collect();
                format!("opponent-{}", ids.join("_"))
            }
        }
    }
}

/// Two 48-step outages per day on lines drawn uniformly from `pool`, at
/// least 12 steps apart, both inside the day. Empty for an empty pool.
pub fn schedule_opponent(seed: u64, day: u64, pool: &[usize]) -> Vec<Outage> {
    if pool.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0bb0_0000 ^ day));
    let latest = STEPS_PER_DAY - OUTAGE_STEPS;
    let (a, b) = loop {
        let a = rng.gen_range(0..=latest);
        let b = rng.gen_range(0..=latest);
        let (a, b) = (a.min(b), a.max(b));
        if b >= a + OUTAGE_STEPS + MIN_OUTAGE_GAP {
            break (a, b);
        }
    };
    [a, b]
        .into_iter()
        .map(|start| Outage {
            line: pool[rng.gen_range(0..pool.len())],
            start,
            duration: OUTAGE_STEPS,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverflowRules {
    /// Loading above which the consecutive-overload counter advances.
    pub soft_threshold: f64,
    pub soft_steps: u32,
    /// Loading at which a line trips immediately.
    pub hard_threshold: f64,
}

impl Default for OverflowRules {
    fn default() -> Self {
        Self {
            soft_threshold: 1.0,
            soft_steps: 3,
            hard_threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameOverReason {
    Islanded,
    CascadingCollapse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue,
    GameOver(GameOverReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub variant: NetworkVariant,
    pub topology: TopologyVector,
    /// Step within the day of the current observation.
    pub timestep: usize,
    pub overflow_counters: Vec<u32>,
    pub opponent_schedule: Vec<Outage>,
    /// Lines currently held out by the opponent.
    pub opponent_down: Vec<usize>,
    pub injections: Injections,
    pub solution: FlowSolution<f64>,
}

impl EpisodeState {
    /// Default topology of the variant, opponent outages starting at step 0
    /// applied, solved at the first injections.
    pub fn start(
        spec: &GridSpec,
        variant: &NetworkVariant,
        opponent_schedule: Vec<Outage>,
        injections: Injections,
    ) -> Result<Self> {
        let topology = spec.default_topology(variant)?;
        let mut state = Self {
            variant: variant.clone(),
            topology,
            timestep: 0,
            overflow_counters: vec![0; spec.n_lines()],
            opponent_schedule,
            opponent_down: Vec::new(),
            solution: FlowSolution {
                theta: Vec::new(),
                slack_bus: None,
                line_flows: vec![0.0; spec.n_lines()],
                rho: vec![0.0; spec.n_lines()],
                enabled: vec![false; spec.n_lines()],
            },
            injections,
        };
        state.apply_opponent(spec, 0);
        state.solution = simulate(spec, &state.topology, &state.injections)?;
        Ok(state)
    }

    pub fn max_rho(&self) -> f64 {
        self.solution.max_loading()
    }

    fn apply_opponent(&mut self, spec: &GridSpec, t: usize) {
        let ending: Vec<Outage> = self
            .opponent_schedule
            .iter()
            .copied()
            .filter(|o| o.start + o.duration == t)
            .collect();
        for o in ending {
            if let Some(i) = self.opponent_down.iter().position(|&l| l == o.line) {
                self.opponent_down.swap_remove(i);
                self.topology.restore_line(spec, o.line);
            }
        }
        let starting: Vec<Outage> = self
            .opponent_schedule
            .iter()
            .copied()
            .filter(|o| o.start == t)
            .collect();
        for o in starting {
            if self.topology.line_enabled(spec, o.line) {
                self.topology.disable_line(spec, o.line);
                self.overflow_counters[o.line] = 0;
                self.opponent_down.push(o.line);
            }
        }
    }
}

/// Advances one step: action, opponent, DC solve, overflow bookkeeping and
/// the disconnection cascade.
pub fn step(
    spec: &GridSpec,
    state: &mut EpisodeState,
    action: &SwitchAction,
    injections: Injections,
    rules: &OverflowRules,
) -> Result<StepOutcome> {
    action.check_legal(spec, &state.topology)?;
    state.topology = state.topology.apply_switch(action)?;
    let t = state.timestep + 1;
    state.timestep = t;
    state.apply_opponent(spec, t);
    state.injections = injections;

    let mut solution = match simulate(spec, &state.topology, &state.injections) {
        Ok(s) => s,
        Err(Error::IslandedGrid { .. } | Error::SingularSystem { .. }) => {
            return Ok(StepOutcome::GameOver(GameOverReason::Islanded))
        }
        Err(e) => return Err(e),
    };
    for l in 0..spec.n_lines() {
        if solution.enabled[l] && solution.rho[l] > rules.soft_threshold {
            state.overflow_counters[l] += 1;
        } else {
            state.overflow_counters[l] = 0;
        }
    }
    loop {
        let tripped: Vec<usize> = (0..spec.n_lines())
            .filter(|&l| {
                solution.enabled[l]
                    && (state.overflow_counters[l] >= rules.soft_steps
                        || solution.rho[l] >= rules.hard_threshold)
            })
            .collect();
        if tripped.is_empty() {
            break;
        }
        for &l in &tripped {
            state.topology.disable_line(spec, l);
            state.overflow_counters[l] = 0;
        }
        if state.topology.enabled_lines(spec).is_empty() {
            state.solution = solution;
            return Ok(StepOutcome::GameOver(GameOverReason::CascadingCollapse));
        }
        solution = match simulate(spec, &state.topology, &state.injections) {
            Ok(s) => s,
            Err(Error::IslandedGrid { .. } | Error::SingularSystem { .. }) => {
                return Ok(StepOutcome::GameOver(GameOverReason::Islanded))
            }
            Err(e) => return Err(e),
        };
    }
    state.solution = solution;
    Ok(StepOutcome::Continue)
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Switched object positions.
    pub action: Vec<usize>,
    pub max_rho: f64,
    pub outcome: String,
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("trace record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
