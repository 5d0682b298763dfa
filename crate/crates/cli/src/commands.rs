//! Subcommand implementations. Every stage reads its inputs from and writes
//! its outputs to the configured output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use busgraph::actions::{enumerate_actions, ActionSpaces};
use busgraph::agents::{run_campaign, Agent, AgentConfig, AgentKind};
use busgraph::autodiff::GradCheckConfig;
use busgraph::dataset::{
    group_by_variant, normalize, partition_scenarios, read_dataset, write_dataset, DatasetHeader, Datapoint,
    NormalizationStats,
};
use busgraph::env::{
    derive_seed, generate_chronics, split_days, Chronics, DayEpisode, Regime, ScenarioChronics,
};
use busgraph::experts::{generate_dataset, id_runs, ood_runs, ExpertRun};
use busgraph::graphs::{build_graph, diameter, mad, topology_hash, Representation};
use busgraph::grid::{build_ieee14_spec, GridSpec, NetworkVariant, TopologyVector};
use busgraph::models::{Model, ModelKind};
use busgraph::trainer::{accuracy, write_curves, EvalReport};
use busgraph::Scalar;

use crate::config::{
    Precision, RunConfig, STREAM_CAMPAIGN, STREAM_CHRONICS, STREAM_GRAD_CHECK, STREAM_SPLIT,
};
use crate::Failure;

pub struct Context {
    pub cfg: RunConfig,
    pub spec: GridSpec,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let spec = match &cfg.grid.spec_file {
            Some(path) => GridSpec::load(path)?,
            None => build_ieee14_spec(&cfg.grid.thermal)?,
        };
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let ctx = Self { cfg, spec, out };
        ctx.stamp(&ctx.out)?;
        Ok(ctx)
    }

    /// Creates `self.out/name` and stamps it like the root.
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        self.stamp(&d)?;
        Ok(d)
    }

    fn stamp(&self, dir: &Path) -> Result<()> {
        write(&dir.join("resolved_config.toml"), &self.cfg.to_toml())?;
        write(
            &dir.join("VERSION"),
            &format!("busgraph {}\ngrid {}\n", env!("CARGO_PKG_VERSION"), self.spec.hash()),
        )
    }

    fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Failure::missing(format!("{} not found; run `busgraph {producer}` first", path.display())).into())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn spec_dump(ctx: &Context) -> Result<()> {
    ctx.spec.save(&ctx.out.join("grid.toml"))?;
    let dir = ctx.dir("actions")?;
    let mut summary = String::from("variant\tn_actions\n");
    for variant in variants(&ctx.cfg) {
        let space = enumerate_actions(&ctx.spec, &variant)?;
        space.save(&dir.join(format!("{variant}.txt")))?;
        let _ = writeln!(summary, "{variant}\t{}", space.len());
    }
    write(&dir.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn variants(cfg: &RunConfig) -> Vec<NetworkVariant> {
    std::iter::once(NetworkVariant::full())
        .chain(cfg.experts.id_lines.iter().chain(&cfg.experts.ood_lines).map(|&l| NetworkVariant::n_minus_1(l)))
        .collect()
}

fn scenario_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("scenario_{id:04}.csv"))
}

pub fn gen_chronics(ctx: &Context) -> Result<()> {
    let c = &ctx.cfg.chronics;
    let chronics = generate_chronics(
        &ctx.spec,
        c.n_scenarios,
        derive_seed(ctx.cfg.seed, STREAM_CHRONICS),
        &c.profile,
    );
    let dir = ctx.dir("chronics")?;
    for sc in &chronics.scenarios {
        sc.write_csv(&scenario_path(&dir, sc.scenario_id))?;
    }
    println!("wrote {} scenarios to {}", chronics.scenarios.len(), dir.display());
    Ok(())
}

fn load_chronics(ctx: &Context, ids: &[usize]) -> Result<Chronics> {
    let dir = ctx.out.join("chronics");
    let mut scenarios = Vec::with_capacity(ids.len());
    for &id in ids {
        let path = scenario_path(&dir, id);
        ctx.require(&path, "gen-chronics")?;
        scenarios.push(ScenarioChronics::read_csv(&path)?);
    }
    Ok(Chronics { scenarios })
}

/// Scenario ids of the train, validation and test partitions.
struct Partition {
    ids: [Vec<usize>; 3],
}

impl Partition {
    const NAMES: [&'static str; 3] = ["train", "val", "test"];

    fn compute(cfg: &RunConfig) -> Result<Self> {
        let all: BTreeSet<usize> = (0..cfg.chronics.n_scenarios).collect();
        let ids = partition_scenarios(&all, cfg.dataset.split, derive_seed(cfg.seed, STREAM_SPLIT))?;
        Ok(Self { ids })
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, ids) in Self::NAMES.iter().zip(&self.ids) {
            let ids: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{name}\t{}", ids.join(","));
        }
        s
    }

    fn load(ctx: &Context) -> Result<Self> {
        let path = ctx.out.join("dataset").join("splits.tsv");
        ctx.require(&path, "gen-dataset")?;
        let text = fs::read_to_string(&path)?;
        let mut ids: [Vec<usize>; 3] = Default::default();
        for (i, line) in text.lines().enumerate() {
            let bad = || busgraph::Error::Parse {
                what: "splits",
                line: i + 1,
                msg: format!("unexpected line {line:?}"),
            };
            let (name, list) = line.split_once('\t').ok_or_else(bad)?;
            let slot = Self::NAMES.iter().position(|n| *n == name).ok_or_else(bad)?;
            ids[slot] = list
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?;
        }
        Ok(Self { ids })
    }

    fn slot(&self, scenario: usize) -> Option<usize> {
        self.ids.iter().position(|ids| ids.contains(&scenario))
    }

    fn select(&self, points: &[Datapoint], slot: usize) -> Vec<Datapoint> {
        points.iter().filter(|p| self.slot(p.scenario_id) == Some(slot)).cloned().collect()
    }
}

pub fn gen_dataset(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let ids: Vec<usize> = (0..cfg.chronics.n_scenarios).collect();
    let days = split_days(&load_chronics(ctx, &ids)?)?;
    let partition = Partition::compute(cfg)?;
    let expert = cfg.experts.expert(busgraph::experts::ExpertKind::Greedy);

    let mut log = String::from("set\tvariant\texpert\tdays\tfailed_days\tpoints\n");
    let mut run_all = |set: &str, runs: Vec<ExpertRun>| -> Result<Vec<Datapoint>> {
        let mut all = Vec::new();
        for run in runs {
            let t = Instant::now();
            let (pts, st) =
                generate_dataset(&ctx.spec, std::slice::from_ref(&run), &days, &expert, &cfg.experts.overflow)?;
            println!(
                "{set} {} {:?}: {} points, {}/{} days failed ({:.0}s)",
                run.variant,
                run.kind,
                st.points,
                st.failed_days,
                st.days,
                t.elapsed().as_secs_f64()
            );
            let _ = writeln!(log, "{set}\t{}\t{:?}\t{}\t{}\t{}", run.variant, run.kind, st.days, st.failed_days, st.points);
            all.extend(pts);
        }
        Ok(all)
    };
    let id = run_all("id", id_runs(&cfg.experts.id_lines))?;
    let ood = run_all("ood", ood_runs(&cfg.experts.ood_lines))?;

    // Statistics come from the training scenarios only.
    let norm = NormalizationStats::fit(&ctx.spec, &partition.select(&id, 0));
    let dir = ctx.dir("dataset")?;
    norm.save(&dir.join("norm.txt"))?;
    write(&dir.join("splits.tsv"), &partition.to_text())?;
    write(&dir.join("generation.tsv"), &log)?;
    for (set, points) in [("id", &id), ("ood", &ood)] {
        for (variant, pts) in group_by_variant(&normalize(&ctx.spec, points, &norm)) {
            let header = DatasetHeader {
                spec_hash: ctx.spec.hash(),
                variant: variant.clone(),
                norm_ref: norm.reference(),
            };
            write_dataset(&dir.join(format!("{set}_{variant}.tsv")), &header, &pts)?;
        }
    }
    println!("id {} points, ood {} points", id.len(), ood.len());
    Ok(())
}

/// All normalized points of one set (`id` or `ood`), checked against the
/// grid and the stored normalization.
fn load_set(ctx: &Context, set: &str, norm: &NormalizationStats) -> Result<Vec<Datapoint>> {
    let dir = ctx.out.join("dataset");
    ctx.require(&dir.join("norm.txt"), "gen-dataset")?;
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(&format!("{set}_")) && n.ends_with(".tsv"))
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let (header, pts) = read_dataset(&f)?;
        if header.spec_hash != ctx.spec.hash() {
            return Err(Failure::config(format!(
                "{} was generated for grid {}, current grid is {}",
                f.display(),
                header.spec_hash,
                ctx.spec.hash()
            ))
            .into());
        }
        if header.norm_ref != norm.reference() {
            return Err(Failure::config(format!("{} does not match norm.txt", f.display())).into());
        }
        out.extend(pts);
    }
    Ok(out)
}

fn load_norm(ctx: &Context) -> Result<NormalizationStats> {
    let path = ctx.out.join("dataset").join("norm.txt");
    ctx.require(&path, "gen-dataset")?;
    Ok(NormalizationStats::load(&path)?)
}

fn model_name(kind: ModelKind, seed: u64) -> String {
    format!("{kind}_s{seed}")
}

pub fn train(ctx: &Context) -> Result<()> {
    match ctx.cfg.train.precision {
        Precision::F32 => train_all::<f32>(ctx),
        Precision::F64 => train_all::<f64>(ctx),
    }
}

fn train_all<T: Scalar>(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let norm = load_norm(ctx)?;
    let id = load_set(ctx, "id", &norm)?;
    let partition = Partition::load(ctx)?;
    let (train, val) = (partition.select(&id, 0), partition.select(&id, 1));
    println!("train {} points, validation {} points", train.len(), val.len());
    let models = ctx.dir("models")?;
    let curves = ctx.dir("curves")?;
    let mut spaces = ActionSpaces::new();
    let mut manifest =
        String::from("model\tkind\tseed\tprecision\tbest_iteration\tbest_val_accuracy\titerations\tepochs\tstopped_early\tseconds\n");
    for &kind in &cfg.model.kinds {
        for &seed in &cfg.train.seeds {
            let name = model_name(kind, seed);
            let tc = cfg.train.config(kind, cfg.seed, seed);
            let t = Instant::now();
            let outcome =
                busgraph::trainer::train::<T>(&ctx.spec, cfg.model.config(kind), &tc, &train, &val, &mut spaces)?;
            let secs = t.elapsed().as_secs_f64();
            outcome.model.save(
                &models.join(format!("{name}.ckpt")),
                &[
                    format!("seed {seed}"),
                    format!("precision {}", T::NAME),
                    format!("norm {}", norm.reference()),
                ],
            )?;
            write_curves(&curves.join(format!("{name}.tsv")), &outcome.curves)?;
            println!(
                "{name}: best validation accuracy {:.4} at iteration {} ({} iterations, {:.0}s)",
                outcome.best_val_accuracy, outcome.best_iteration, outcome.iterations, secs
            );
            let _ = writeln!(
                manifest,
                "{name}\t{kind}\t{seed}\t{}\t{}\t{:.6}\t{}\t{}\t{}\t{secs:.1}",
                T::NAME,
                outcome.best_iteration,
                outcome.best_val_accuracy,
                outcome.iterations,
                outcome.epochs,
                outcome.stopped_early
            );
        }
    }
    write(&models.join("manifest.tsv"), &manifest)
}

fn load_model<T: Scalar>(ctx: &Context, kind: ModelKind, seed: u64) -> Result<Model<T>> {
    let path = ctx.out.join("models").join(format!("{}.ckpt", model_name(kind, seed)));
    ctx.require(&path, "train")?;
    let (model, _) = Model::<T>::load(&path, &ctx.spec)?;
    Ok(model)
}

pub fn eval_accuracy(ctx: &Context) -> Result<()> {
    match ctx.cfg.train.precision {
        Precision::F32 => eval_accuracy_t::<f32>(ctx),
        Precision::F64 => eval_accuracy_t::<f64>(ctx),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn eval_accuracy_t<T: Scalar>(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let norm = load_norm(ctx)?;
    let partition = Partition::load(ctx)?;
    let test = partition.select(&load_set(ctx, "id", &norm)?, 2);
    let ood = load_set(ctx, "ood", &norm)?;
    let ood_groups = group_by_variant(&ood);
    let reports = ctx.dir("reports")?;
    let mut spaces = ActionSpaces::new();
    let mut table = format!("model\tkind\tseed\tset\t{}\n", EvalReport::HEADER);
    let mut summary = String::from("kind\tset\tmetric\tmean\tstd\tn_seeds\n");
    for &kind in &cfg.model.kinds {
        let mut per_set: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
        for &seed in &cfg.train.seeds {
            let name = model_name(kind, seed);
            let model = load_model::<T>(ctx, kind, seed)?;
            let mut sets = vec![("test".to_string(), accuracy(&model, &ctx.spec, &test, &mut spaces)?)];
            sets.push(("ood".to_string(), accuracy(&model, &ctx.spec, &ood, &mut spaces)?));
            for (variant, pts) in &ood_groups {
                sets.push((format!("ood_{variant}"), accuracy(&model, &ctx.spec, pts, &mut spaces)?));
            }
            for (set, r) in sets {
                let _ = writeln!(table, "{name}\t{kind}\t{seed}\t{set}\t{}", r.row());
                if cfg.eval.class_tables {
                    write(&reports.join(format!("classes_{name}_{set}.tsv")), &r.class_table())?;
                }
                per_set.entry(set).or_default().push(r);
            }
        }
        for (set, rs) in &per_set {
            type Metric = fn(&EvalReport) -> f64;
            let metrics: [(&str, Metric); 3] = [
                ("accuracy", EvalReport::overall),
                ("default", EvalReport::default_topology),
                ("split", EvalReport::split_topology),
            ];
            for (metric, f) in metrics {
                let xs: Vec<f64> = rs.iter().map(f).collect();
                let (m, s) = mean_std(&xs);
                let _ = writeln!(summary, "{kind}\t{set}\t{metric}\t{m:.4}\t{s:.4}\t{}", xs.len());
            }
        }
    }
    write(&reports.join("accuracy.tsv"), &table)?;
    write(&reports.join("accuracy_summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn eval_agents(ctx: &Context) -> Result<()> {
    match ctx.cfg.train.precision {
        Precision::F32 => eval_agents_t::<f32>(ctx),
        Precision::F64 => eval_agents_t::<f64>(ctx),
    }
}

fn test_days(ctx: &Context, n_days: usize) -> Result<Vec<DayEpisode>> {
    let partition = Partition::load(ctx)?;
    let mut days = split_days(&load_chronics(ctx, &partition.ids[2])?)?;
    days.truncate(n_days);
    Ok(days)
}

fn eval_agents_t<T: Scalar>(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let c = &cfg.campaign;
    let days = test_days(ctx, c.n_days)?;
    let norm = load_norm(ctx)?;
    let needs_models = c.agents.iter().any(|a| a.needs_model());
    let mut models: Vec<(ModelKind, Model<T>)> = Vec::new();
    if needs_models {
        for &kind in &c.models {
            for &seed in &cfg.train.seeds {
                models.push((kind, load_model::<T>(ctx, kind, seed)?));
            }
        }
    }
    let configure = |kind: AgentKind| AgentConfig {
        activity_threshold: cfg.experts.activity_threshold,
        risk_threshold: cfg.experts.risk_threshold,
        strict_verify: c.strict_verify,
        ..AgentConfig::new(kind)
    };
    let mut agents: Vec<Agent<T>> = Vec::new();
    for &kind in &c.agents {
        if kind.needs_model() {
            // Seeds of one model kind share a label and are pooled.
            for (_, model) in &models {
                agents.push(Agent::with_model(configure(kind), model, &norm));
            }
        } else {
            let mut a = Agent::expert(kind)?;
            a.config = configure(kind);
            agents.push(a);
        }
    }
    let regimes = vec![
        Regime::FullNetwork,
        Regime::UnplannedOutage {
            pool: cfg.experts.id_lines.clone(),
        },
        Regime::UnplannedOutage {
            pool: cfg.experts.ood_lines.clone(),
        },
    ];
    let seeds: Vec<u64> = c.seeds.iter().map(|&s| derive_seed(cfg.seed, STREAM_CAMPAIGN + s)).collect();
    println!("{} agents, {} days per regime", agents.len(), days.len());
    let report = run_campaign(&ctx.spec, &agents, &regimes, &days, &seeds, &cfg.experts.overflow)?;
    let dir = ctx.dir("reports")?;
    write(&dir.join("completion.tsv"), &report.completion_table())?;
    write(&dir.join("failures.tsv"), &report.failure_table())?;
    write(&dir.join("timing.tsv"), &report.timing_table())?;
    print!("{}", report.completion_table());
    Ok(())
}

pub fn analyze_graphs(ctx: &Context) -> Result<()> {
    match ctx.cfg.train.precision {
        Precision::F32 => analyze_graphs_t::<f32>(ctx),
        Precision::F64 => analyze_graphs_t::<f64>(ctx),
    }
}

fn analyze_graphs_t<T: Scalar>(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let norm = load_norm(ctx)?;
    let id = load_set(ctx, "id", &norm)?;
    let dir = ctx.dir("reports")?;

    let mut diam = String::from("variant\ttopology\tcount\thom_diameter\thet_diameter\n");
    for (variant, pts) in group_by_variant(&id) {
        let mut counts: BTreeMap<&TopologyVector, usize> = BTreeMap::new();
        for p in &pts {
            *counts.entry(&p.topology).or_default() += 1;
        }
        let mut ranked: Vec<(&TopologyVector, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (topo, count) in ranked.into_iter().take(cfg.graphs.n_topologies) {
            let d = |r| {
                diameter(&build_graph(&ctx.spec, topo, r))
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| "inf".into())
            };
            let _ = writeln!(
                diam,
                "{variant}\t{}\t{count}\t{}\t{}",
                topology_hash(topo),
                d(Representation::Homogeneous),
                d(Representation::Heterogeneous)
            );
        }
    }
    write(&dir.join("diameters.tsv"), &diam)?;

    let partition = Partition::load(ctx)?;
    let test = partition.select(&id, 2);
    let step = (test.len() / cfg.graphs.mad_samples.max(1)).max(1);
    let sample: Vec<&Datapoint> = test.iter().step_by(step).take(cfg.graphs.mad_samples).collect();
    let mut out = String::from("# metric=cosine\nmodel\tlayer\tmad\n");
    for &kind in cfg.model.kinds.iter().filter(|k| k.is_gnn()) {
        let Some(&seed) = cfg.train.seeds.first() else { continue };
        let model = load_model::<T>(ctx, kind, seed)?;
        let repr = kind.representation().expect("gnn kinds have a representation");
        let mut sums: Vec<f64> = Vec::new();
        for p in &sample {
            let graph = build_graph(&ctx.spec, &p.topology, repr);
            let layers = model.layer_embeddings(&ctx.spec, p)?;
            sums.resize(layers.len(), 0.0);
            for (s, emb) in sums.iter_mut().zip(&layers) {
                *s += mad(emb, &graph);
            }
        }
        for (layer, s) in sums.iter().enumerate() {
            let _ = writeln!(out, "{}\t{layer}\t{:.6}", model_name(kind, seed), s / sample.len().max(1) as f64);
        }
    }
    write(&dir.join("mad.tsv"), &out)?;
    print!("{diam}{out}");
    Ok(())
}

pub fn grad_check(ctx: &Context, n_points: usize, gnn_layers: usize, hidden_dim: usize, tolerance: f64) -> Result<()> {
    let cfg = &ctx.cfg;
    let norm = load_norm(ctx)?;
    let id = load_set(ctx, "id", &norm)?;
    if id.len() < n_points {
        return Err(Failure::config(format!("dataset has {} points, {n_points} requested", id.len())).into());
    }
    // Evenly spaced picks, offset by the seed.
    let offset = derive_seed(cfg.seed, STREAM_GRAD_CHECK) as usize % (id.len() / n_points.max(1)).max(1);
    let points: Vec<&Datapoint> = id.iter().skip(offset).step_by((id.len() / n_points.max(1)).max(1)).take(n_points).collect();

    let dir = ctx.dir("reports")?;
    let mut table = String::from("kind\tlayers\thidden_dim\tpoints\tchecked\tskipped_kinks\tmax_rel_error\tworst\tstatus\n");
    let mut failed = Vec::new();
    for &kind in &cfg.model.kinds {
        let mut mc = cfg.model.config(kind);
        mc.hidden_dim = hidden_dim;
        if kind.is_gnn() {
            mc.hidden_layers = gnn_layers;
        }
        let mut model = Model::<f64>::init(mc, &ctx.spec, derive_seed(cfg.seed, STREAM_GRAD_CHECK))?;
        let report = model.check_gradients(&ctx.spec, &points, &GradCheckConfig::default())?;
        let ok = report.max_rel_error < tolerance && report.checked > 0;
        if !ok {
            failed.push(kind.to_string());
        }
        let worst = report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            table,
            "{kind}\t{}\t{hidden_dim}\t{}\t{}\t{}\t{:.3e}\t{worst}\t{}",
            mc.hidden_layers,
            points.len(),
            report.checked,
            report.skipped_kinks,
            report.max_rel_error,
            if ok { "pass" } else { "fail" }
        );
    }
    write(&dir.join("grad_check.tsv"), &table)?;
    print!("{table}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::grad_check(format!("gradient check above {tolerance:e} for {}", failed.join(","))).into())
    }
}
