//! Simulation-based expert policies and the runs that turn their decisions
//! into imitation datapoints.

use serde::{Deserialize, Serialize};

use crate::actions::{ActionSpace, SwitchAction};
use crate::dataset::{extract_features, Datapoint};
use crate::env::{step, DayEpisode, EpisodeState, OverflowRules, StepOutcome};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, NetworkVariant, TopologyVector};
use crate::powerflow::{simulate, Injections};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Greedy,
    NMinus1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub activity_threshold: f64,
    pub risk_threshold: f64,
    pub kind: ExpertKind,
}

impl ExpertConfig {
    pub fn new(kind: ExpertKind) -> Self {
        Self {
            activity_threshold: 0.97,
            risk_threshold: 1.0,
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.activity_threshold > 0.0 && self.activity_threshold <= self.risk_threshold) {
            return Err(Error::Config(format!(
                "need 0 < activity_threshold ({}) <= risk_threshold ({})",
                self.activity_threshold, self.risk_threshold
            )));
        }
        Ok(())
    }
}

/// Max loading after one solve on `topology`; `+inf` if the grid islands.
pub fn loading_or_inf(spec: &GridSpec, topology: &TopologyVector, inj: &Injections) -> f64 {
    match simulate::<f64>(spec, topology, inj) {
        Ok(s) => s.max_loading(),
        Err(_) => f64::INFINITY,
    }
}

/// One-step look-ahead score of `action` from `current`.
pub fn simulated_max_rho(spec: &GridSpec, current: &TopologyVector, action: &SwitchAction, inj: &Injections) -> f64 {
    match current.apply_switch(action) {
        Ok(t) => loading_or_inf(spec, &t, inj),
        Err(_) => f64::INFINITY,
    }
}

/// Lines whose loss splits the substation-level graph of currently enabled
/// lines. Such radial connections island the grid under any busbar layout,
/// so they cannot discriminate between candidates and are left out of the
/// contingency set.
pub fn structural_bridges(spec: &GridSpec, topology: &TopologyVector) -> Vec<bool> {
    let enabled = topology.enabled_lines(spec);
    let mut bridge = vec![false; spec.n_lines()];
    for &cut in &enabled {
        let mut parent: Vec<usize> = (0..spec.n_substations).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &l in enabled.iter().filter(|&&l| l != cut) {
            let line = &spec.lines[l];
            let (a, b) = (find(&mut parent, line.from_substation), find(&mut parent, line.to_substation));
            parent[a] = b;
        }
        let line = &spec.lines[cut];
        bridge[cut] = find(&mut parent, line.from_substation) != find(&mut parent, line.to_substation);
    }
    bridge
}

/// Ceiling for a secure candidate with an islanding contingency: worse than
/// any finite contingency loading, better than any breaching candidate.
pub const ISLANDING_CONTINGENCY: f64 = 1e8;
/// Offset ranking candidates whose own one-step loading breaches the risk
/// threshold after every secure candidate.
pub const BREACH_OFFSET: f64 = 1e9;

/// N-1 score of `topology`. A topology whose own max loading stays within
/// `theta` scores its worst single-line contingency loading (capped at
/// [`ISLANDING_CONTINGENCY`]); one that breaches `theta` would trip lines
/// before any contingency matters and scores `BREACH_OFFSET + loading`; an
/// islanded topology scores `+inf`.
pub fn n1_score(spec: &GridSpec, topology: &TopologyVector, inj: &Injections, skip: &[bool], theta: f64) -> f64 {
    let base = loading_or_inf(spec, topology, inj);
    if base == f64::INFINITY {
        return f64::INFINITY;
    }
    if base > theta {
        return BREACH_OFFSET + base;
    }
    let mut worst = 0.0f64;
    for l in topology.enabled_lines(spec) {
        if skip[l] {
            continue;
        }
        let mut t = topology.clone();
        t.disable_line(spec, l);
        worst = worst.max(loading_or_inf(spec, &t, inj));
        if worst == f64::INFINITY {
            return ISLANDING_CONTINGENCY;
        }
    }
    worst
}

/// Index of the smallest score: do-nothing (index 0) whenever it ties the
/// best, otherwise the lowest index.
pub fn argmin_score(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// Candidates (do-nothing first) with their scores.
pub fn score_candidates(
    spec: &GridSpec,
    state: &EpisodeState,
    space: &ActionSpace,
    next: &Injections,
    cfg: &ExpertConfig,
) -> (Vec<SwitchAction>, Vec<f64>) {
    let candidates = space.legal_actions(spec, &state.topology);
    let scores = match cfg.kind {
        ExpertKind::Greedy => candidates
            .iter()
            .map(|a| simulated_max_rho(spec, &state.topology, a, next))
            .collect(),
        ExpertKind::NMinus1 => {
            let skip = structural_bridges(spec, &state.topology);
            candidates
                .iter()
                .map(|a| match state.topology.apply_switch(a) {
                    Ok(t) => n1_score(spec, &t, next, &skip, cfg.risk_threshold),
                    Err(_) => f64::INFINITY,
                })
                .collect()
        }
    };
    (candidates, scores)
}

pub fn greedy_act(
    spec: &GridSpec,
    state: &EpisodeState,
    space: &ActionSpace,
    next: &Injections,
    cfg: &ExpertConfig,
) -> SwitchAction {
    expert_act(spec, state, space, next, &ExpertConfig { kind: ExpertKind::Greedy, ..*cfg })
}

pub fn n1_act(
    spec: &GridSpec,
    state: &EpisodeState,
    space: &ActionSpace,
    next: &Injections,
    cfg: &ExpertConfig,
) -> SwitchAction {
    expert_act(spec, state, space, next, &ExpertConfig { kind: ExpertKind::NMinus1, ..*cfg })
}

/// Do-nothing below the activity threshold, otherwise the best-scoring
/// candidate for `cfg.kind`.
pub fn expert_act(
    spec: &GridSpec,
    state: &EpisodeState,
    space: &ActionSpace,
    next: &Injections,
    cfg: &ExpertConfig,
) -> SwitchAction {
    if state.max_rho() < cfg.activity_threshold {
        return SwitchAction::do_nothing(spec.n_objects());
    }
    let (mut candidates, scores) = score_candidates(spec, state, space, next, cfg);
    candidates.swap_remove(argmin_score(&scores))
}

/// One expert run: which expert on which static network variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRun {
    pub variant: NetworkVariant,
    pub kind: ExpertKind,
}

/// In-distribution runs: N-1 expert on the full network, greedy expert on
/// each listed single-outage variant.
pub fn id_runs(outage_lines: &[usize]) -> Vec<ExpertRun> {
    let mut runs = vec![ExpertRun {
        variant: NetworkVariant::full(),
        kind: ExpertKind::NMinus1,
    }];
    runs.extend(outage_lines.iter().map(|&l| ExpertRun {
        variant: NetworkVariant::n_minus_1(l),
        kind: ExpertKind::Greedy,
    }));
    runs
}

/// Out-of-distribution runs: greedy expert on each listed variant.
pub fn ood_runs(outage_lines: &[usize]) -> Vec<ExpertRun> {
    outage_lines
        .iter()
        .map(|&l| ExpertRun {
            variant: NetworkVariant::n_minus_1(l),
            kind: ExpertKind::Greedy,
        })
        .collect()
}

/// Summary of one expert day.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDay {
    pub completed: bool,
    pub points: Vec<Datapoint>,
}

/// Plays one day with an expert on a static variant, collecting a datapoint
/// for every decision taken at or above the activity threshold. A failed day
/// yields no datapoints.
pub fn run_expert_day(
    spec: &GridSpec,
    space: &ActionSpace,
    day: &DayEpisode,
    run: &ExpertRun,
    cfg: &ExpertConfig,
    rules: &OverflowRules,
) -> Result<ExpertDay> {
    let mut state = EpisodeState::start(spec, &run.variant, Vec::new(), day.injections[0].clone())?;
    let mut points = Vec::new();
    for t in 0..day.injections.len() - 1 {
        let next = &day.injections[t + 1];
        let action = if state.max_rho() < cfg.activity_threshold {
            SwitchAction::do_nothing(spec.n_objects())
        } else {
            let a = expert_act(spec, &state, space, next, &ExpertConfig { kind: run.kind, ..*cfg });
            points.push(Datapoint {
                scenario_id: day.scenario_id,
                timestep: day.first_step() + t,
                variant: run.variant.clone(),
                features: extract_features(spec, &state.topology, &state.solution, &state.injections),
                topology: state.topology.clone(),
                target: a.clone(),
            });
            a
        };
        if let StepOutcome::GameOver(_) = step(spec, &mut state, &action, next.clone(), rules)? {
            return Ok(ExpertDay {
                completed: false,
                points: Vec::new(),
            });
        }
    }
    Ok(ExpertDay {
        completed: true,
        points,
    })
}

/// Tally of a dataset-generation pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationStats {
    pub days: usize,
    pub failed_days: usize,
    pub points: usize,
}

/// Runs every expert run over every day and concatenates the surviving
/// datapoints in (run, day) order.
pub fn generate_dataset(
    spec: &GridSpec,
    runs: &[ExpertRun],
    days: &[DayEpisode],
    cfg: &ExpertConfig,
    rules: &OverflowRules,
) -> Result<(Vec<Datapoint>, GenerationStats)> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut stats = GenerationStats::default();
    for run in runs {
        let space = crate::actions::enumerate_actions(spec, &run.variant)?;
        for day in days {
            let d = run_expert_day(spec, &space, day, run, cfg, rules)?;
            stats.days += 1;
            if !d.completed {
                stats.failed_days += 1;
            }
            stats.points += d.points.len();
            out.extend(d.points);
        }
    }
    Ok((out, stats))
}
