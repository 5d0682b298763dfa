//! The run configuration: one TOML file shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use busgraph::agents::AgentKind;
use busgraph::env::{derive_seed, ChronicsConfig, OverflowRules};
use busgraph::experts::ExpertConfig;
use busgraph::experts::ExpertKind;
use busgraph::grid::{ThermalLimitPolicy, ID_OUTAGE_LINES, OOD_OUTAGE_LINES};
use busgraph::models::{ModelConfig, ModelKind, TRAINABLE_INIT_SIGMA};
use busgraph::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub grid: GridSection,
    pub chronics: ChronicsSection,
    pub experts: ExpertsSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub campaign: CampaignSection,
    pub graphs: GraphsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            grid: GridSection::default(),
            chronics: ChronicsSection::default(),
            experts: ExpertsSection::default(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            campaign: CampaignSection::default(),
            graphs: GraphsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Grid file to use instead of the built-in 14-bus grid.
    pub spec_file: Option<PathBuf>,
    pub thermal: ThermalLimitPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChronicsSection {
    pub n_scenarios: usize,
    pub profile: ChronicsConfig,
}

impl Default for ChronicsSection {
    fn default() -> Self {
        Self {
            n_scenarios: 30,
            profile: ChronicsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertsSection {
    pub activity_threshold: f64,
    pub risk_threshold: f64,
    /// Lines whose N-1 variants form the in-distribution dataset.
    pub id_lines: Vec<usize>,
    /// Lines whose N-1 variants form the out-of-distribution dataset.
    pub ood_lines: Vec<usize>,
    pub overflow: OverflowRules,
}

impl Default for ExpertsSection {
    fn default() -> Self {
        let e = ExpertConfig::new(ExpertKind::Greedy);
        Self {
            activity_threshold: e.activity_threshold,
            risk_threshold: e.risk_threshold,
            id_lines: ID_OUTAGE_LINES.to_vec(),
            ood_lines: OOD_OUTAGE_LINES.to_vec(),
            overflow: OverflowRules::default(),
        }
    }
}

impl ExpertsSection {
    pub fn expert(&self, kind: ExpertKind) -> ExpertConfig {
        ExpertConfig {
            activity_threshold: self.activity_threshold,
            risk_threshold: self.risk_threshold,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Train / validation / test percentages over scenarios.
    pub split: [u32; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { split: [70, 10, 20] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kinds: Vec<ModelKind>,
    pub fcnn_layers: usize,
    pub fcnn_dim: usize,
    pub gnn_layers: usize,
    pub gnn_dim: usize,
    pub leaky_slope: f64,
    pub init_sigma: f64,
    pub raw_init: bool,
    pub label_weight: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = ModelConfig::new(ModelKind::Fcnn);
        let g = ModelConfig::new(ModelKind::HetGnn);
        Self {
            kinds: ModelKind::ALL.to_vec(),
            fcnn_layers: f.hidden_layers,
            fcnn_dim: f.hidden_dim,
            gnn_layers: g.hidden_layers,
            gnn_dim: g.hidden_dim,
            leaky_slope: g.leaky_slope,
            // the library default of 5 saturates the deep GNNs
            init_sigma: TRAINABLE_INIT_SIGMA,
            raw_init: g.raw_init,
            label_weight: g.label_weight,
        }
    }
}

impl ModelSection {
    pub fn config(&self, kind: ModelKind) -> ModelConfig {
        let (hidden_layers, hidden_dim) = if kind.is_gnn() {
            (self.gnn_layers, self.gnn_dim)
        } else {
            (self.fcnn_layers, self.fcnn_dim)
        };
        ModelConfig {
            kind,
            hidden_layers,
            hidden_dim,
            leaky_slope: self.leaky_slope,
            init_sigma: self.init_sigma,
            raw_init: self.raw_init,
            label_weight: self.label_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub fcnn_lr: f64,
    pub gnn_lr: f64,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// One training run per seed and model kind.
    pub seeds: Vec<u64>,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        let f = TrainConfig::for_kind(ModelKind::Fcnn);
        let g = TrainConfig::for_kind(ModelKind::HetGnn);
        Self {
            batch_size: f.batch_size,
            fcnn_lr: f.lr,
            gnn_lr: g.lr,
            max_epochs: f.max_epochs,
            eval_every: f.eval_every,
            patience: f.patience,
            seeds: vec![0],
            precision: Precision::F64,
        }
    }
}

impl TrainSection {
    pub fn config(&self, kind: ModelKind, root_seed: u64, run_seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: if kind.is_gnn() { self.gnn_lr } else { self.fcnn_lr },
            max_epochs: self.max_epochs,
            eval_every: self.eval_every,
            patience: self.patience,
            seed: derive_seed(root_seed, STREAM_TRAIN + run_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Write per-class prediction counts next to the accuracy table.
    pub class_tables: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSection {
    pub agents: Vec<AgentKind>,
    /// Models backing the ML agents (one agent per kind and trained seed).
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    /// Days per regime, taken from the test scenarios.
    pub n_days: usize,
    pub strict_verify: bool,
}

impl Default for CampaignSection {
    fn default() -> Self {
        Self {
            agents: AgentKind::ALL.to_vec(),
            models: vec![ModelKind::HetGnn],
            seeds: vec![0],
            n_days: 20,
            strict_verify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphsSection {
    /// Most common topologies analysed per variant.
    pub n_topologies: usize,
    /// Test datapoints averaged for the per-layer MAD.
    pub mad_samples: usize,
}

impl Default for GraphsSection {
    fn default() -> Self {
        Self {
            n_topologies: 25,
            mad_samples: 100,
        }
    }
}

pub const STREAM_CHRONICS: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_GRAD_CHECK: u64 = 3;
pub const STREAM_TRAIN: u64 = 100;
pub const STREAM_CAMPAIGN: u64 = 200;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::missing(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| -> Result<()> { Err(Failure::config(m).into()) };
        if self.chronics.n_scenarios < 3 {
            return fail("chronics.n_scenarios must be at least 3 for a three-way split".into());
        }
        if self.dataset.split.iter().sum::<u32>() != 100 {
            return fail(format!("dataset.split must sum to 100, got {:?}", self.dataset.split));
        }
        if self.train.seeds.is_empty() || self.campaign.seeds.is_empty() {
            return fail("train.seeds and campaign.seeds must be non-empty".into());
        }
        self.experts.expert(ExpertKind::Greedy).validate()?;
        for kind in &self.model.kinds {
            self.model.config(*kind).validate()?;
            self.train.config(*kind, self.seed, 0).validate()?;
        }
        if self
            .campaign
            .agents
            .iter()
            .any(|a| a.needs_model())
            && self.campaign.models.is_empty()
        {
            bail!(Failure::config("ML agents requested without campaign.models".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
