//! Minibatch training with early stopping on validation accuracy, and the
//! exact-match accuracy report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{threshold_mask, ActionSpaces, SwitchAction};
use crate::autodiff::{AdamConfig, ParamStore, Tape};
use crate::dataset::Datapoint;
use crate::env::derive_seed;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::models::{Batch, Model, ModelConfig, ModelKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Iterations between validation passes.
    pub eval_every: usize,
    /// Validation passes without a new best before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            batch_size: 64,
            lr: if kind.is_gnn() { 2e-4 } else { 7e-4 },
            max_epochs: 100,
            eval_every: 2000,
            patience: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub epoch: usize,
    /// Mean minibatch loss since the previous point.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the evaluation with the highest validation accuracy.
    pub model: Model<T>,
    pub curves: Vec<CurvePoint>,
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
    pub iterations: usize,
    pub epochs: usize,
    pub stopped_early: bool,
}

pub fn train<T: Scalar>(
    spec: &GridSpec,
    model_config: ModelConfig,
    cfg: &TrainConfig,
    train: &[Datapoint],
    val: &[Datapoint],
    spaces: &mut ActionSpaces,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut model = Model::<T>::init(model_config, spec, derive_seed(cfg.seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut track = Tracker {
        best: model.store.clone(),
        best_acc: f64::NEG_INFINITY,
        best_iteration: 0,
        curves: Vec::new(),
        stale: 0,
        loss_sum: 0.0,
        loss_n: 0,
    };
    let mut it = 0;
    let mut epochs = 0;
    let mut stopped_early = false;
    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        epochs = epoch + 1;
        for chunk in order.chunks(cfg.batch_size) {
            let points: Vec<&Datapoint> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(spec, model_config.kind, &points)?;
            let mut tape = Tape::new();
            let (loss, _) = model.loss(&mut tape, spec, &batch, &points)?;
            track.loss_sum += tape.value(loss).data[0].to_f64_lossy();
            track.loss_n += 1;
            let grads = tape.backward(loss);
            tape.accumulate(&grads, &mut model.store);
            model.store.adam_step(&adam);
            it += 1;
            if it % cfg.eval_every == 0 {
                track.evaluate(&model, it, epoch, spec, val, spaces)?;
                if track.stale >= cfg.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if !stopped_early && track.curves.last().map_or(true, |c| c.iteration != it) {
        track.evaluate(&model, it, epochs - 1, spec, val, spaces)?;
    }
    model.store = track.best;
    Ok(TrainOutcome {
        model,
        curves: track.curves,
        best_iteration: track.best_iteration,
        best_val_accuracy: track.best_acc,
        iterations: it,
        epochs,
        stopped_early,
    })
}

struct Tracker<T> {
    best: ParamStore<T>,
    best_acc: f64,
    best_iteration: usize,
    curves: Vec<CurvePoint>,
    /// Evaluations since the last improvement.
    stale: usize,
    loss_sum: f64,
    loss_n: usize,
}

impl<T: Scalar> Tracker<T> {
    fn evaluate(
        &mut self,
        model: &Model<T>,
        iteration: usize,
        epoch: usize,
        spec: &GridSpec,
        val: &[Datapoint],
        spaces: &mut ActionSpaces,
    ) -> Result<()> {
        let acc = accuracy(model, spec, val, spaces)?.overall();
        self.curves.push(CurvePoint {
            iteration,
            epoch,
            train_loss: if self.loss_n > 0 {
                self.loss_sum / self.loss_n as f64
            } else {
                f64::NAN
            },
            val_accuracy: acc,
        });
        self.loss_sum = 0.0;
        self.loss_n = 0;
        if acc > self.best_acc {
            self.best_acc = acc;
            self.best_iteration = iteration;
            self.best.clone_from(&model.store);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(())
    }
}

pub fn write_curves(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("iteration\tepoch\ttrain_loss\tval_accuracy\n");
    for c in curves {
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}", c.iteration, c.epoch, c.train_loss, c.val_accuracy);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Target and predicted counts for one action class (a substation, or
/// do-nothing).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub target: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    /// Correct when thresholding at 0.5 without projection.
    pub raw_correct: usize,
    pub n_default: usize,
    pub default_correct: usize,
    pub n_split: usize,
    pub split_correct: usize,
    pub classes: BTreeMap<String, ClassCount>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class_label(spec: &GridSpec, action: &SwitchAction) -> String {
    match action.substation(spec) {
        Ok(Some(s)) => format!("sub{s}"),
        Ok(None) => "do_nothing".into(),
        Err(_) => "multi".into(),
    }
}

impl EvalReport {
    pub fn overall(&self) -> f64 {
        ratio(self.correct, self.n)
    }

    pub fn raw(&self) -> f64 {
        ratio(self.raw_correct, self.n)
    }

    pub fn default_topology(&self) -> f64 {
        ratio(self.default_correct, self.n_default)
    }

    pub fn split_topology(&self) -> f64 {
        ratio(self.split_correct, self.n_split)
    }

    pub const HEADER: &'static str = "n\taccuracy\traw\tn_default\tdefault\tn_split\tsplit";

    pub fn row(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{}\t{:.4}\t{}\t{:.4}",
            self.n,
            self.overall(),
            self.raw(),
            self.n_default,
            self.default_topology(),
            self.n_split,
            self.split_topology()
        )
    }

    /// `class target predicted correct` lines.
    pub fn class_table(&self) -> String {
        let mut s = String::from("class\ttarget\tpredicted\tcorrect\n");
        for (k, c) in &self.classes {
            let _ = writeln!(s, "{k}\t{}\t{}\t{}", c.target, c.predicted, c.correct);
        }
        s
    }
}

/// Exact-match accuracy of the postprocessed action (and of the raw
/// thresholded mask), split by whether the topology is the variant default.
pub fn accuracy<T: Scalar>(
    model: &Model<T>,
    spec: &GridSpec,
    points: &[Datapoint],
    spaces: &mut ActionSpaces,
) -> Result<EvalReport> {
    let refs: Vec<&Datapoint> = points.iter().collect();
    let preds = model.predict(spec, &refs)?;
    score_predictions(spec, points, &preds, spaces)
}

/// [`accuracy`] on precomputed outputs.
pub fn score_predictions(
    spec: &GridSpec,
    points: &[Datapoint],
    preds: &[Vec<f64>],
    spaces: &mut ActionSpaces,
) -> Result<EvalReport> {
    let mut r = EvalReport::default();
    for (pt, p) in points.iter().zip(preds) {
        let space = spaces.get(spec, &pt.variant)?;
        let action = space.nearest_action(spec, p, &pt.topology);
        let ok = action == pt.target;
        r.n += 1;
        r.correct += ok as usize;
        r.raw_correct += (threshold_mask(p) == pt.target) as usize;
        if pt.topology.is_unsplit() {
            r.n_default += 1;
            r.default_correct += ok as usize;
        } else {
            r.n_split += 1;
            r.split_correct += ok as usize;
        }
        r.classes.entry(class_label(spec, &pt.target)).or_default().target += 1;
        let c = r.classes.entry(class_label(spec, &action)).or_default();
        c.predicted += 1;
        c.correct += ok as usize;
    }
    Ok(r)
}

/// Evaluates models trained on in-distribution data on out-of-distribution
/// points (normalized with the in-distribution statistics). Never updates
/// parameters.
pub fn ood_protocol<T: Scalar>(
    spec: &GridSpec,
    models: &[(String, &Model<T>)],
    ood: &[Datapoint],
    spaces: &mut ActionSpaces,
) -> Result<Vec<(String, EvalReport)>> {
    models
        .iter()
        .map(|(name, m)| Ok((name.clone(), accuracy(*m, spec, ood, spaces)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_default_spec, NetworkVariant};
    use rand::Rng;

    fn points(spec: &GridSpec, n: usize, seed: u64) -> Vec<Datapoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variant = NetworkVariant::full();
        let base = spec.default_topology(&variant).unwrap();
        let mut spaces = ActionSpaces::new();
        let space = spaces.get(spec, &variant).unwrap().clone();
        (0..n)
            .map(|i| {
                let target = if i % 3 == 0 {
                    SwitchAction::do_nothing(spec.n_objects())
                } else {
                    let legal = space.legal_actions(spec, &base);
                    legal[rng.gen_range(1..legal.len())].clone()
                };
                Datapoint {
                    scenario_id: i % 4,
                    timestep: i,
                    variant: variant.clone(),
                    topology: base.clone(),
                    features: (0..crate::dataset::n_features(spec)).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    target,
                }
            })
            .collect()
    }

    #[test]
    fn exact_predictions_score_perfectly() {
        let spec = build_default_spec();
        let pts = points(&spec, 30, 1);
        let preds: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| p.target.0.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect())
            .collect();
        let r = score_predictions(&spec, &pts, &preds, &mut ActionSpaces::new()).unwrap();
        assert_eq!((r.overall(), r.raw(), r.default_topology()), (1.0, 1.0, 1.0));
        assert_eq!(r.n_split, 0);
    }

    #[test]
    fn constant_low_output_is_do_nothing() {
        let spec = build_default_spec();
        let pts: Vec<Datapoint> = points(&spec, 30, 2).into_iter().step_by(3).collect();
        let preds = vec![vec![0.1; 56]; pts.len()];
        let r = score_predictions(&spec, &pts, &preds, &mut ActionSpaces::new()).unwrap();
        assert_eq!(r.overall(), 1.0);
        assert_eq!(r.classes["do_nothing"].predicted, pts.len());
    }

    #[test]
    fn subsets_decompose_overall() {
        let spec = build_default_spec();
        let mut pts = points(&spec, 40, 3);
        let cfg = crate::actions::enumerate_actions(&spec, &NetworkVariant::full()).unwrap().configs[5].clone();
        for p in pts.iter_mut().step_by(2) {
            p.topology = cfg.apply_to(&p.topology);
            p.target = SwitchAction::do_nothing(56);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<Vec<f64>> = pts.iter().map(|_| (0..56).map(|_| rng.gen_range(0.0..0.7)).collect()).collect();
        let r = score_predictions(&spec, &pts, &preds, &mut ActionSpaces::new()).unwrap();
        assert_eq!(r.n_default + r.n_split, r.n);
        let recomposed = (r.n_default as f64 * r.default_topology() + r.n_split as f64 * r.split_topology()) / r.n as f64;
        assert!((recomposed - r.overall()).abs() < 1e-12);
    }

    fn small_fcnn() -> ModelConfig {
        ModelConfig {
            init_sigma: 0.5,
            ..ModelConfig::new(ModelKind::Fcnn)
        }
    }

    #[test]
    fn memorizes_a_small_subset() {
        let spec = build_default_spec();
        let pts = points(&spec, 50, 5);
        let model = Model::<f64>::init(small_fcnn(), &spec, 0).unwrap();
        let refs: Vec<&Datapoint> = pts.iter().collect();
        let loss_of = |m: &Model<f64>| {
            let batch = Batch::new(&spec, ModelKind::Fcnn, &refs).unwrap();
            let mut t = Tape::new();
            let (l, _) = m.loss(&mut t, &spec, &batch, &refs).unwrap();
            t.value(l).data[0]
        };
        let before = loss_of(&model);
        let cfg = TrainConfig {
            max_epochs: 200,
            eval_every: 1000,
            ..TrainConfig::for_kind(ModelKind::Fcnn)
        };
        let out = train::<f64>(&spec, small_fcnn(), &cfg, &pts, &pts, &mut ActionSpaces::new()).unwrap();
        assert!(loss_of(&out.model) < 0.5 * before);
        assert_eq!(out.epochs, 200);
    }

    #[test]
    fn patience_stops_early_and_runs_repeat() {
        let spec = build_default_spec();
        let pts = points(&spec, 40, 6);
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 100,
            eval_every: 1,
            patience: 3,
            ..TrainConfig::for_kind(ModelKind::Fcnn)
        };
        let mut spaces = ActionSpaces::new();
        let a = train::<f64>(&spec, small_fcnn(), &cfg, &pts[..32], &pts[32..], &mut spaces).unwrap();
        assert!(a.stopped_early && a.epochs < 100);
        let best = a.curves.iter().map(|c| c.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, a.best_val_accuracy);
        let val_acc = accuracy(&a.model, &spec, &pts[32..], &mut spaces).unwrap().overall();
        assert_eq!(val_acc, a.best_val_accuracy);
        let b = train::<f64>(&spec, small_fcnn(), &cfg, &pts[..32], &pts[32..], &mut spaces).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.model.store, b.model.store);
    }
}
