//! Deployment agents and the days-completed / decision-time harness.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::actions::{ActionSpace, ActionSpaces, SwitchAction};
use crate::dataset::{extract_features, Datapoint, NormalizationStats};
use crate::env::{schedule_opponent, step, DayEpisode, EpisodeState, GameOverReason, OverflowRules, Regime, StepOutcome};
use crate::error::{Error, Result};
use crate::experts::{expert_act, simulated_max_rho, ExpertConfig, ExpertKind};
use crate::grid::{GridSpec, NetworkVariant, ID_OUTAGE_LINES, OOD_OUTAGE_LINES};
use crate::models::Model;
use crate::powerflow::Injections;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    DoNothing,
    Greedy,
    N1,
    Naive,
    Verify,
    VerifyGreedy,
    VerifyN1,
}

impl AgentKind {
    pub const ALL: [AgentKind; 7] = [
        AgentKind::DoNothing,
        AgentKind::Greedy,
        AgentKind::N1,
        AgentKind::Naive,
        AgentKind::Verify,
        AgentKind::VerifyGreedy,
        AgentKind::VerifyN1,
    ];

    pub fn needs_model(self) -> bool {
        matches!(
            self,
            AgentKind::Naive | AgentKind::Verify | AgentKind::VerifyGreedy | AgentKind::VerifyN1
        )
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::DoNothing => "do_nothing",
            AgentKind::Greedy => "greedy",
            AgentKind::N1 => "n1",
            AgentKind::Naive => "naive",
            AgentKind::Verify => "verify",
            AgentKind::VerifyGreedy => "verify_greedy",
            AgentKind::VerifyN1 => "verify_n1",
        })
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub kind: AgentKind,
    /// η: below this max loading every agent does nothing.
    pub activity_threshold: f64,
    /// θ: loading that counts as a breach.
    pub risk_threshold: f64,
    /// Reject any predicted action whose simulated loading exceeds θ, even
    /// if doing nothing is worse.
    #[serde(default)]
    pub strict_verify: bool,
}

impl AgentConfig {
    pub fn new(kind: AgentKind) -> Self {
        Self {
            kind,
            activity_threshold: 0.97,
            risk_threshold: 1.0,
            strict_verify: false,
        }
    }

    fn expert(&self, kind: ExpertKind) -> ExpertConfig {
        ExpertConfig {
            activity_threshold: self.activity_threshold,
            risk_threshold: self.risk_threshold,
            kind,
        }
    }
}

/// An agent ready to act: its configuration plus, for ML kinds, the model
/// and the normalization it was trained with.
#[derive(Debug, Clone)]
pub struct Agent<'a, T> {
    /// Row label in reports; runs sharing a label are aggregated.
    pub label: String,
    pub config: AgentConfig,
    pub model: Option<(&'a Model<T>, &'a NormalizationStats)>,
}

impl<'a, T: Scalar> Agent<'a, T> {
    pub fn expert(kind: AgentKind) -> Result<Self> {
        if kind.needs_model() {
            return Err(Error::Config(format!("agent {kind} needs a model")));
        }
        Ok(Self {
            label: kind.to_string(),
            config: AgentConfig::new(kind),
            model: None,
        })
    }

    pub fn with_model(config: AgentConfig, model: &'a Model<T>, norm: &'a NormalizationStats) -> Self {
        Self {
            label: format!("{}/{}", config.kind, model.kind()),
            config,
            model: Some((model, norm)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.config.kind.needs_model() && self.model.is_none() {
            return Err(Error::Config(format!("agent {} needs a model checkpoint", self.config.kind)));
        }
        Ok(())
    }

    /// Postprocessed model action for the current state.
    pub fn predicted_action(&self, spec: &GridSpec, state: &EpisodeState, space: &ActionSpace) -> Result<SwitchAction> {
        let (model, norm) = self
            .model
            .ok_or_else(|| Error::Config(format!("agent {} has no model", self.config.kind)))?;
        let raw = extract_features(spec, &state.topology, &state.solution, &state.injections);
        let point = Datapoint {
            scenario_id: 0,
            timestep: state.timestep,
            variant: state.variant.clone(),
            features: norm.apply(spec, &state.topology, &raw),
            topology: state.topology.clone(),
            target: SwitchAction::do_nothing(spec.n_objects()),
        };
        let p = model.predict(spec, &[&point])?;
        Ok(space.nearest_action(spec, &p[0], &state.topology))
    }

    /// Chooses the action for the current state; `next` are the injections
    /// the simulation checks are run against.
    pub fn act(&self, spec: &GridSpec, state: &EpisodeState, space: &ActionSpace, next: &Injections) -> Result<SwitchAction> {
        let cfg = &self.config;
        let nothing = SwitchAction::do_nothing(spec.n_objects());
        let rho = state.max_rho();
        if rho < cfg.activity_threshold {
            return Ok(nothing);
        }
        match cfg.kind {
            AgentKind::DoNothing => Ok(nothing),
            AgentKind::Greedy => Ok(expert_act(spec, state, space, next, &cfg.expert(ExpertKind::Greedy))),
            AgentKind::N1 => Ok(expert_act(spec, state, space, next, &cfg.expert(ExpertKind::NMinus1))),
            AgentKind::Naive => self.predicted_action(spec, state, space),
            AgentKind::VerifyGreedy if rho >= cfg.risk_threshold => {
                Ok(expert_act(spec, state, space, next, &cfg.expert(ExpertKind::Greedy)))
            }
            AgentKind::VerifyN1 if rho >= cfg.risk_threshold => {
                Ok(expert_act(spec, state, space, next, &cfg.expert(ExpertKind::NMinus1)))
            }
            AgentKind::Verify | AgentKind::VerifyGreedy | AgentKind::VerifyN1 => {
                let action = self.predicted_action(spec, state, space)?;
                Ok(verify(spec, state, action, next, cfg))
            }
        }
    }
}

/// Falls back to do-nothing when the simulated loading of `action` breaches
/// θ and (unless strict) is also worse than doing nothing.
pub fn verify(
    spec: &GridSpec,
    state: &EpisodeState,
    action: SwitchAction,
    next: &Injections,
    cfg: &AgentConfig,
) -> SwitchAction {
    if action.is_do_nothing() {
        return action;
    }
    let sim = simulated_max_rho(spec, &state.topology, &action, next);
    if sim <= cfg.risk_threshold {
        return action;
    }
    let nothing = SwitchAction::do_nothing(spec.n_objects());
    if cfg.strict_verify || sim > simulated_max_rho(spec, &state.topology, &nothing, next) {
        nothing
    } else {
        action
    }
}

/// The three evaluation regimes: no outages, opponent on the in-distribution
/// lines, opponent on the out-of-distribution lines.
pub fn standard_regimes() -> Vec<Regime> {
    vec![
        Regime::FullNetwork,
        Regime::UnplannedOutage {
            pool: ID_OUTAGE_LINES.to_vec(),
        },
        Regime::UnplannedOutage {
            pool: OOD_OUTAGE_LINES.to_vec(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDay {
    pub completed: bool,
    pub failure: Option<GameOverReason>,
    /// Steps survived.
    pub steps: usize,
    /// Wall-clock of each decision taken at or above the activity threshold.
    pub decision_us: Vec<f64>,
    pub actions_taken: usize,
}

/// Plays one day. Every executed action is checked for legality first.
pub fn run_agent_day<T: Scalar>(
    spec: &GridSpec,
    agent: &Agent<T>,
    space: &ActionSpace,
    day: &DayEpisode,
    regime: &Regime,
    seed: u64,
    rules: &OverflowRules,
) -> Result<AgentDay> {
    let schedule = match regime {
        Regime::UnplannedOutage { pool } => {
            schedule_opponent(seed, (day.scenario_id * 1000 + day.day) as u64, pool)
        }
        _ => Vec::new(),
    };
    let mut out = AgentDay {
        completed: false,
        failure: None,
        steps: 0,
        decision_us: Vec::new(),
        actions_taken: 0,
    };
    let mut state = match EpisodeState::start(spec, &regime.variant(), schedule, day.injections[0].clone()) {
        Ok(s) => s,
        Err(Error::IslandedGrid { .. } | Error::SingularSystem { .. }) => {
            out.failure = Some(GameOverReason::Islanded);
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    for t in 0..day.injections.len() - 1 {
        let next = &day.injections[t + 1];
        let active = state.max_rho() >= agent.config.activity_threshold;
        let start = Instant::now();
        let action = agent.act(spec, &state, space, next)?;
        if active {
            out.decision_us.push(start.elapsed().as_secs_f64() * 1e6);
        }
        action.check_legal(spec, &state.topology)?;
        out.actions_taken += !action.is_do_nothing() as usize;
        if let StepOutcome::GameOver(reason) = step(spec, &mut state, &action, next.clone(), rules)? {
            out.failure = Some(reason);
            return Ok(out);
        }
        out.steps += 1;
    }
    out.completed = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub label: String,
    pub regime: String,
    pub seed: u64,
    pub attempted: usize,
    pub completed: usize,
    pub failures: BTreeMap<String, usize>,
}

impl RegimeResult {
    pub fn completion(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.completed as f64 / self.attempted as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingStats {
    pub decisions: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
        Self {
            decisions: s.len(),
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
            median_us: at(0.5),
            p95_us: at(0.95),
            max_us: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperationReport {
    pub results: Vec<RegimeResult>,
    /// Decision times per agent label, over all runs.
    pub timing: BTreeMap<String, TimingStats>,
}

impl OperationReport {
    /// Total days completed by `label` in `regime` (all regimes if `None`).
    pub fn completed(&self, label: &str, regime: Option<&str>) -> usize {
        self.results
            .iter()
            .filter(|r| r.label == label && regime.map_or(true, |g| r.regime == g))
            .map(|r| r.completed)
            .sum()
    }

    pub fn attempted(&self, label: &str, regime: Option<&str>) -> usize {
        self.results
            .iter()
            .filter(|r| r.label == label && regime.map_or(true, |g| r.regime == g))
            .map(|r| r.attempted)
            .sum()
    }

    /// Mean and population std of the completion percentage over the runs
    /// (seeds and models) sharing a label, per regime.
    pub fn summary(&self) -> Vec<(String, String, f64, f64, usize)> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.results {
            groups
                .entry((r.label.clone(), r.regime.clone()))
                .or_default()
                .push(100.0 * r.completion());
        }
        groups
            .into_iter()
            .map(|((label, regime), v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                (label, regime, mean, std, v.len())
            })
            .collect()
    }

    pub fn completion_table(&self) -> String {
        let mut s = String::from("agent\tregime\tcompleted_pct_mean\tcompleted_pct_std\truns\n");
        for (label, regime, mean, std, n) in self.summary() {
            let _ = writeln!(s, "{label}\t{regime}\t{mean:.2}\t{std:.2}\t{n}");
        }
        s
    }

    pub fn failure_table(&self) -> String {
        let mut agg: BTreeMap<(String, String), usize> = BTreeMap::new();
        for r in &self.results {
            for (k, v) in &r.failures {
                *agg.entry((r.label.clone(), k.clone())).or_default() += v;
            }
        }
        let mut s = String::from("agent\treason\tcount\n");
        for ((label, reason), n) in agg {
            let _ = writeln!(s, "{label}\t{reason}\t{n}");
        }
        s
    }

    pub fn timing_table(&self) -> String {
        let mut s = String::from("agent\tdecisions\tmean_us\tmedian_us\tp95_us\tmax_us\n");
        for (label, t) in &self.timing {
            let _ = writeln!(
                s,
                "{label}\t{}\t{:.1}\t{:.1}\t{:.1}\t{:.1}",
                t.decisions, t.mean_us, t.median_us, t.p95_us, t.max_us
            );
        }
        s
    }
}

/// Every agent on every day of every regime, once per seed. The seed only
/// drives the opponent schedule.
pub fn run_campaign<T: Scalar>(
    spec: &GridSpec,
    agents: &[Agent<T>],
    regimes: &[Regime],
    days: &[DayEpisode],
    seeds: &[u64],
    rules: &OverflowRules,
) -> Result<OperationReport> {
    for a in agents {
        a.validate()?;
    }
    let mut spaces = ActionSpaces::new();
    let mut report = OperationReport::default();
    let mut times: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for regime in regimes {
        let variant: NetworkVariant = regime.variant();
        let space = spaces.get(spec, &variant)?.clone();
        let seeds: &[u64] = if matches!(regime, Regime::UnplannedOutage { .. }) { seeds } else { &seeds[..1.min(seeds.len())] };
        for &seed in seeds {
            for agent in agents {
                let mut r = RegimeResult {
                    label: agent.label.clone(),
                    regime: regime.name(),
                    seed,
                    attempted: 0,
                    completed: 0,
                    failures: BTreeMap::new(),
                };
                for day in days {
                    let d = run_agent_day(spec, agent, &space, day, regime, seed, rules)?;
                    r.attempted += 1;
                    r.completed += d.completed as usize;
                    if let Some(f) = d.failure {
                        let key = match f {
                            GameOverReason::Islanded => "islanded",
                            GameOverReason::CascadingCollapse => "cascading_collapse",
                        };
                        *r.failures.entry(key.into()).or_default() += 1;
                    }
                    times.entry(agent.label.clone()).or_default().extend(d.decision_us);
                }
                report.results.push(r);
            }
        }
    }
    report.timing = times.iter().map(|(k, v)| (k.clone(), TimingStats::from_samples(v))).collect();
    Ok(report)
}
