//! Behaviour cloning on frozen features and the best-success evaluation
//! protocol.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::canon::{canonical_json, fingerprint};
use crate::dataset::FrameImage;
use crate::encoder::{FrozenEncoder, Head, HeadKind};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::probe::Standardizer;
use crate::scalar::{c, Scalar};
use crate::seed;
use crate::tensor::Tensor;
use crate::toyenv::{collect_demos, reset, step, Demonstration, EnvState, TaskId, TaskSpec, ACTION_DIM};

pub const EVAL_SEEDS: [u64; 3] = [100, 125, 150];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BCConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub n_demos: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub hidden: usize,
    /// Append the effector position to the features.
    pub proprio: bool,
}

impl Default for BCConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 32, lr: 1e-3, n_demos: 5, eval_every: 1_000, eval_episodes: 20, hidden: 256, proprio: false }
    }
}

impl BCConfig {
    /// Shorter runs for desk-scale studies.
    pub fn toy() -> Self {
        Self { steps: 5_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.steps, self.batch, self.n_demos, self.eval_every, self.eval_episodes, self.hidden];
        if all.contains(&0) || !(self.lr > 0.0) {
            return Err(Error::invalid("BC steps, batch, n_demos, eval cadence, episodes, width and lr must be positive"));
        }
        Ok(())
    }
}

/// Maps observations to feature rows.
pub trait Featurizer<T>: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn featurize(&self, frames: &[&FrameImage], states: &[&EnvState]) -> Result<Tensor<T>>;
}

impl<T: Scalar> Featurizer<T> for FrozenEncoder<T> {
    fn id(&self) -> String {
        self.checkpoint().fingerprint.clone()
    }

    fn dim(&self) -> usize {
        self.embedding_dim()
    }

    fn featurize(&self, frames: &[&FrameImage], _states: &[&EnvState]) -> Result<Tensor<T>> {
        let owned: Vec<FrameImage> = frames.iter().map(|f| (*f).clone()).collect();
        self.encode(&owned)
    }
}

/// Ground-truth simulator state in place of an encoder; an upper-bound
/// control.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleFeatures;

const ORACLE_DIM: usize = 5;

impl<T: Scalar> Featurizer<T> for OracleFeatures {
    fn id(&self) -> String {
        "oracle-state".into()
    }

    fn dim(&self) -> usize {
        ORACLE_DIM
    }

    /// Offsets of goal and object from the effector, then the grasp flag.
    fn featurize(&self, _frames: &[&FrameImage], states: &[&EnvState]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(states.len() * ORACLE_DIM);
        for s in states {
            let e = s.effector;
            let mut p: Vec<f64> = s.positions()[2..].chunks(2).flat_map(|q| [q[0] - e[0], q[1] - e[1]]).collect();
            p.resize(ORACLE_DIM - 1, 0.0);
            p.push(if s.grasped { 1.0 } else { 0.0 });
            data.extend(p.into_iter().map(c::<T>));
        }
        Tensor::new(vec![states.len(), ORACLE_DIM], data)
    }
}

/// Two-layer perceptron on standardised features.
#[derive(Debug, Clone)]
pub struct Policy<T> {
    pub params: ParamSet<T>,
    pub norm: Standardizer,
    pub head: Head,
    pub proprio: bool,
}

impl<T: Scalar> Policy<T> {
    fn inputs(&self, feats: Tensor<T>, states: &[&EnvState]) -> Result<Tensor<T>> {
        let x = if self.proprio { append_proprio(feats, states)? } else { feats };
        Ok(self.norm.apply(&x))
    }

    pub fn act(&self, feats: Tensor<T>, states: &[&EnvState]) -> Result<Vec<[f64; 2]>> {
        let x = self.inputs(feats, states)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xv = g.input(x);
        let y = self.head.forward(&mut g, &b, xv)?;
        let yv = g.value(y);
        Ok((0..yv.rows()).map(|i| [yv.row(i)[0].as_f64(), yv.row(i)[1].as_f64()]).collect())
    }
}

fn append_proprio<T: Scalar>(feats: Tensor<T>, states: &[&EnvState]) -> Result<Tensor<T>> {
    let d = feats.cols();
    let mut data = Vec::with_capacity(feats.rows() * (d + 2));
    for (i, s) in states.iter().enumerate() {
        data.extend_from_slice(feats.row(i));
        data.extend(s.effector.iter().map(|&v| c::<T>(v)));
    }
    Tensor::new(vec![feats.rows(), d + 2], data)
}

/// Chooses actions for a batch of live episodes.
pub trait Controller {
    fn act(&self, frames: &[&FrameImage], states: &[&EnvState]) -> Result<Vec<[f64; 2]>>;
}

/// A policy paired with the featurizer it was trained on.
pub struct PolicyController<'a, T> {
    pub policy: &'a Policy<T>,
    pub featurizer: &'a dyn Featurizer<T>,
}

impl<T: Scalar> Controller for PolicyController<'_, T> {
    fn act(&self, frames: &[&FrameImage], states: &[&EnvState]) -> Result<Vec<[f64; 2]>> {
        let f = self.featurizer.featurize(frames, states)?;
        self.policy.act(f, states)
    }
}

/// The scripted expert as a controller.
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&self, _frames: &[&FrameImage], states: &[&EnvState]) -> Result<Vec<[f64; 2]>> {
        Ok(states.iter().map(|s| crate::toyenv::scripted_expert(s)).collect())
    }
}

/// Uniform random actions, seeded per call from the episode states.
pub struct RandomController {
    pub seed: u64,
}

impl Controller for RandomController {
    fn act(&self, _frames: &[&FrameImage], states: &[&EnvState]) -> Result<Vec<[f64; 2]>> {
        Ok(states
            .iter()
            .map(|s| {
                let mut rng = seed::rng(self.seed, &format!("random-{}-{}", s.seed, s.step_count));
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
            })
            .collect())
    }
}

/// Episode `i` starts from `derive_seed(seed, "episode-i")`; all episodes
/// advance in lockstep so observations are featurized in one batch.
pub fn evaluate(controller: &dyn Controller, spec: &TaskSpec, episodes: usize, seed_: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::invalid("need at least one evaluation episode"));
    }
    let mut envs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        envs.push(reset(spec, seed::derive_seed(seed_, &format!("episode-{i}")))?);
    }
    loop {
        let live: Vec<usize> = (0..episodes).filter(|&i| !envs[i].0.done()).collect();
        if live.is_empty() {
            break;
        }
        let frames: Vec<&FrameImage> = live.iter().map(|&i| &envs[i].1).collect();
        let states: Vec<&EnvState> = live.iter().map(|&i| &envs[i].0).collect();
        let actions = controller.act(&frames, &states)?;
        for (&i, a) in live.iter().zip(actions) {
            let (obs, _, _) = step(&mut envs[i].0, &a)?;
            envs[i].1 = obs;
        }
    }
    Ok(envs.iter().filter(|(s, _)| s.success).count() as f64 / episodes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BCTrace {
    pub evals: Vec<TracePoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl BCTrace {
    pub fn best_success(&self) -> f64 {
        self.evals.iter().map(|p| p.success).fold(0.0, f64::max)
    }
}

/// Periodic evaluation target for [`bc_train`].
pub struct EvalPlan<'a> {
    pub spec: &'a TaskSpec,
    pub seed: u64,
}

/// Demo `(observation, action)` pairs with their features, computed once.
struct DemoTable<T> {
    x: Tensor<T>,
    y: Vec<[f64; 2]>,
}

fn demo_table<T: Scalar>(featurizer: &dyn Featurizer<T>, demos: &[Demonstration], proprio: bool) -> Result<DemoTable<T>> {
    let steps: Vec<_> = demos.iter().flat_map(|d| &d.steps).collect();
    if steps.is_empty() {
        return Err(Error::invalid("behaviour cloning needs at least one demonstration step"));
    }
    let frames: Vec<&FrameImage> = steps.iter().map(|s| &s.observation).collect();
    let states: Vec<&EnvState> = steps.iter().map(|s| &s.state).collect();
    let mut x = featurizer.featurize(&frames, &states)?;
    if proprio {
        x = append_proprio(x, &states)?;
    }
    Ok(DemoTable { x, y: steps.iter().map(|s| s.action).collect() })
}

fn gather<T: Scalar>(t: &DemoTable<T>, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
    let d = t.x.cols();
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len() * ACTION_DIM);
    for &i in idx {
        x.extend_from_slice(t.x.row(i));
        y.extend(t.y[i].iter().map(|&v| c::<T>(v)));
    }
    (Tensor::new(vec![idx.len(), d], x).expect("rows"), Tensor::new(vec![idx.len(), ACTION_DIM], y).expect("rows"))
}

fn full_loss<T: Scalar>(policy: &Policy<T>, table: &DemoTable<T>) -> Result<f64> {
    let idx: Vec<usize> = (0..table.y.len()).collect();
    let (x, y) = gather(table, &idx);
    let mut g = Graph::new();
    let b = policy.params.bind(&mut g, false);
    let xv = g.input(policy.norm.apply(&x));
    let out = policy.head.forward(&mut g, &b, xv)?;
    let l = g.mse(out, &y)?;
    Ok(g.value(l).item().as_f64())
}

/// Fit a policy by mean-squared action regression with Adam. The featurizer
/// is only read. With an [`EvalPlan`], success is measured every
/// `eval_every` steps and at the end.
pub fn bc_train<T: Scalar>(
    featurizer: &dyn Featurizer<T>,
    demos: &[Demonstration],
    cfg: &BCConfig,
    seed_: u64,
    eval: Option<EvalPlan<'_>>,
) -> Result<(Policy<T>, BCTrace)> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::invalid("behaviour cloning needs at least one demonstration"));
    }
    let table = demo_table(featurizer, demos, cfg.proprio)?;
    let norm = Standardizer::fit(&table.x);
    let table = DemoTable { x: norm.apply(&table.x), y: table.y };
    let in_dim = table.x.cols();
    let head = Head::new(HeadKind::Policy, "pol", in_dim, cfg.hidden, ACTION_DIM);
    let mut rng = seed::rng(seed_, "bc");
    let mut params = ParamSet::new();
    head.init(&mut params, &mut rng);
    let mut policy = Policy { params, norm: Standardizer { mean: vec![0.0; in_dim], std: vec![1.0; in_dim] }, head, proprio: cfg.proprio };
    let mut opt = Optimizer::adam(&policy.params);
    let initial_loss = full_loss(&policy, &table)?;
    let mut evals = Vec::new();
    let n = table.y.len();
    let mut last_loss = initial_loss;
    for it in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..n)).collect();
        let (x, y) = gather(&table, &idx);
        let mut g = Graph::new();
        let b = policy.params.bind(&mut g, true);
        let xv = g.input(x);
        let out = policy.head.forward(&mut g, &b, xv)?;
        let loss = g.mse(out, &y)?;
        last_loss = g.value(loss).item().as_f64();
        if !last_loss.is_finite() {
            return Err(Error::NonFinite { step: it, snapshot: format!("bc loss {last_loss}, |policy|={:.4e}", policy.params.global_norm()) });
        }
        let mut grads = g.backward(loss)?;
        let grads = policy.params.collect_grads(&b, &mut grads);
        opt.step(&mut policy.params, &grads, cfg.lr);
        if let Some(plan) = &eval {
            if it % cfg.eval_every == 0 || it == cfg.steps {
                let deployed = Policy { norm: norm.clone(), ..policy.clone() };
                let success = evaluate(&PolicyController { policy: &deployed, featurizer }, plan.spec, cfg.eval_episodes, plan.seed)?;
                evals.push(TracePoint { step: it, loss: last_loss, success });
            }
        }
    }
    let final_loss = full_loss(&policy, &table)?;
    let _ = last_loss;
    policy.norm = norm;
    Ok((policy, BCTrace { evals, initial_loss, final_loss }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub task: TaskId,
    pub seed: u64,
    pub best_success: f64,
    pub trace: Vec<TracePoint>,
    /// Where the trace was written, relative to the report, if it was.
    pub trace_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub encoder_fingerprint: String,
    pub algorithm: String,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<EvalCell>,
    pub aggregate: f64,
}

impl EvalReport {
    /// Mean best success over tasks, per seed.
    pub fn per_seed(&self) -> BTreeMap<u64, f64> {
        let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for c in &self.cells {
            let e = sums.entry(c.seed).or_default();
            e.0 += c.best_success;
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean over runs of each run's best periodic success.
pub fn aggregate_best(traces: &[Vec<f64>]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().map(|t| t.iter().copied().fold(0.0, f64::max)).sum::<f64>() / traces.len() as f64
}

/// For every `(task, seed)`: collect demos, train BC, keep the best periodic
/// success; aggregate is the mean over all cells.
pub fn run_protocol<T: Scalar>(featurizer: &dyn Featurizer<T>, tasks: &[TaskSpec], seeds: &[u64], cfg: &BCConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if tasks.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("protocol needs at least one task and one seed"));
    }
    let mut cells = Vec::with_capacity(tasks.len() * seeds.len());
    for spec in tasks {
        for &s in seeds {
            let demos = collect_demos(spec, cfg.n_demos, seed::derive_seed(s, &format!("demos-{}", spec.task_id)))?;
            let plan = EvalPlan { spec, seed: seed::derive_seed(s, &format!("eval-{}", spec.task_id)) };
            let (_, trace) = bc_train(featurizer, &demos, cfg, seed::derive_seed(s, &format!("bc-{}", spec.task_id)), Some(plan))?;
            info!("bc {} seed {s}: best {:.2}", spec.task_id, trace.best_success());
            cells.push(EvalCell { task: spec.task_id, seed: s, best_success: trace.best_success(), trace: trace.evals, trace_path: None });
        }
    }
    let traces: Vec<Vec<f64>> = cells.iter().map(|c| c.trace.iter().map(|p| p.success).collect()).collect();
    #[derive(Serialize)]
    struct Fp<'a> {
        bc: &'a BCConfig,
        tasks: &'a [TaskSpec],
        seeds: &'a [u64],
    }
    Ok(EvalReport {
        encoder_fingerprint: featurizer.id(),
        algorithm: "bc".into(),
        config_fingerprint: fingerprint(&Fp { bc: cfg, tasks, seeds })?,
        seeds: seeds.to_vec(),
        aggregate: aggregate_best(&traces),
        cells,
    })
}
