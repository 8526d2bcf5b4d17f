//! Momentum-contrastive pre-training with a symmetrized InfoNCE objective.
//!
//! The query tower is `encoder → projection → prediction`, the key tower
//! `encoder → projection`, kept as an exponential moving average of the
//! matching query parameters. Negatives are the other rows of the batch.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::canon::fingerprint;
use crate::dataset::{augment_pair, AugmentConfig, ClipManifest, FrameImage, FrameRef, FrameStore};
use crate::encoder::{encoder_forward, frames_to_tensor, init_encoder, Checkpoint, EncoderConfig, Head, HeadKind, Stage};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::optim::{Optimizer, OptimizerKind, WarmupCosine};
use crate::params::{Bound, ParamSet};
use crate::scalar::{c, Scalar};
use crate::seed;
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub tau: f64,
    pub momentum: f64,
    pub lr: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_frac: f64,
    pub optimizer: OptimizerKind,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 10,
            batch: 64,
            max_steps: None,
            tau: 0.2,
            momentum: 0.99,
            lr: 1e-3,
            warmup_frac: 0.1,
            optimizer: OptimizerKind::Adam,
            proj_hidden: 128,
            proj_dim: 32,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch < 2 {
            return Err(Error::invalid("contrastive batch must hold at least 2 frames"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("lr must be positive and warmup_frac in [0, 1)"));
        }
        Ok(())
    }

    fn projection(&self) -> Head {
        Head::new(HeadKind::Projection, "proj", self.encoder.embedding_dim, self.proj_hidden, self.proj_dim)
    }

    fn prediction(&self) -> Head {
        Head::new(HeadKind::Prediction, "pred", self.proj_dim, self.proj_hidden, self.proj_dim)
    }
}

/// InfoNCE value for L2-normalized `queries` and `keys` (`B×d` each).
pub fn info_nce<T: Scalar>(queries: &Tensor<T>, keys: &Tensor<T>, temperature: T) -> Result<T> {
    let mut g = Graph::new();
    let q = g.input(queries.clone());
    let k = g.input(keys.clone());
    let l = g.info_nce(q, k, temperature)?;
    Ok(g.value(l).item())
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every key parameter. The query set may
/// hold extra entries (the prediction head); every key entry must have a
/// same-shaped query counterpart.
pub fn momentum_update<T: Scalar>(key: &mut ParamSet<T>, query: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1], got {m}")));
    }
    for (name, k) in key.iter() {
        match query.get(name) {
            Some(q) if q.shape() == k.shape() => {}
            Some(q) => return Err(Error::shape(format!("{name} {:?}", k.shape()), format!("{:?} in query set", q.shape()))),
            None => return Err(Error::shape(format!("{name} in query set"), "missing")),
        }
    }
    let (mt, one_m) = (c::<T>(m), c::<T>(1.0 - m));
    for (name, k) in key.iter_mut() {
        let q = query.get(name).expect("checked above");
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = mt * *kv + one_m * qv;
        }
    }
    Ok(())
}

/// Matched augmented views; `views_a[i]` and `views_b[i]` come from the
/// same frame.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub views_a: Vec<FrameImage>,
    pub views_b: Vec<FrameImage>,
}

impl ContrastiveBatch {
    pub fn new(views_a: Vec<FrameImage>, views_b: Vec<FrameImage>) -> Result<Self> {
        if views_a.len() != views_b.len() || views_a.len() < 2 {
            return Err(Error::shape("two equal batches of at least 2 views", format!("{} and {}", views_a.len(), views_b.len())));
        }
        if let Some((a, b)) = views_a.iter().zip(&views_b).find(|(a, b)| a.source != b.source) {
            return Err(Error::invalid(format!("unmatched views {:?} / {:?}", a.source, b.source)));
        }
        Ok(Self { views_a, views_b })
    }

    /// Augment each frame into a pair of views, seeding each pair from
    /// `(seed, position)`.
    pub fn from_frames(frames: &[&FrameImage], seed: u64, cfg: &AugmentConfig) -> Result<Self> {
        let mut a = Vec::with_capacity(frames.len());
        let mut b = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let (va, vb) = augment_pair(f, seed::derive_seed(seed, &format!("pair-{i}")), cfg)?;
            a.push(va);
            b.push(vb);
        }
        Self::new(a, b)
    }

    pub fn len(&self) -> usize {
        self.views_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views_a.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    /// Mean cosine similarity of positive query/key pairs.
    pub pos_sim: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastiveState<T> {
    /// `enc.*`, `proj.*` and `pred.*`.
    pub query_params: ParamSet<T>,
    /// `enc.*` and `proj.*` only.
    pub key_params: ParamSet<T>,
    pub temperature: f64,
    pub momentum: f64,
    pub step: usize,
    encoder: EncoderConfig,
    proj: Head,
    pred: Head,
    optimizer: Optimizer<T>,
}

impl<T: Scalar> ContrastiveState<T> {
    /// Query encoder starts from `init`; heads are freshly initialised and
    /// the key tower is a copy of the query tower minus the prediction head.
    pub fn new(init: &Checkpoint<T>, cfg: &ContrastiveConfig) -> Result<Self> {
        cfg.validate()?;
        if init.config != cfg.encoder {
            return Err(Error::invalid("checkpoint encoder config differs from the contrastive config"));
        }
        let mut rng = seed::rng(cfg.seed, "contrastive-heads");
        let (proj, pred) = (cfg.projection(), cfg.prediction());
        let mut query = init.params.clone();
        proj.init(&mut query, &mut rng);
        pred.init(&mut query, &mut rng);
        let key = query.without_prefix("pred.");
        let optimizer = Optimizer::new(cfg.optimizer, &query);
        Ok(Self {
            query_params: query,
            key_params: key,
            temperature: cfg.tau,
            momentum: cfg.momentum,
            step: 0,
            encoder: cfg.encoder,
            proj,
            pred,
            optimizer,
        })
    }

    pub fn encoder_params(&self) -> ParamSet<T> {
        self.query_params.with_prefix("enc.")
    }
}

fn tower<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, proj: &Head, pred: Option<&Head>, x: Var) -> Result<Var> {
    let h = encoder_forward(g, p, cfg, x)?;
    let mut z = proj.forward(g, p, h)?;
    if let Some(pred) = pred {
        z = pred.forward(g, p, z)?;
    }
    g.l2_normalize(z)
}

fn mean_diag<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    (0..a.rows()).map(|i| dot(a.row(i), b.row(i)).as_f64()).sum::<f64>() / a.rows() as f64
}

/// One optimizer update of the query tower on the symmetrized loss
/// `½·(InfoNCE(q_a, k_b) + InfoNCE(q_b, k_a))`, then one momentum update of
/// the key tower. On a non-finite loss the state is left untouched.
pub fn contrastive_step<T: Scalar>(state: &mut ContrastiveState<T>, batch: &ContrastiveBatch, lr: f64) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let qp = state.query_params.bind(&mut g, true);
    let kp = state.key_params.bind(&mut g, false);
    let xa = g.input(frames_to_tensor(&batch.views_a, state.encoder.input_hw)?);
    let xb = g.input(frames_to_tensor(&batch.views_b, state.encoder.input_hw)?);
    let qa = tower(&mut g, &qp, &state.encoder, &state.proj, Some(&state.pred), xa)?;
    let qb = tower(&mut g, &qp, &state.encoder, &state.proj, Some(&state.pred), xb)?;
    let ka = tower(&mut g, &kp, &state.encoder, &state.proj, None, xa)?;
    let kb = tower(&mut g, &kp, &state.encoder, &state.proj, None, xb)?;
    let tau = c::<T>(state.temperature);
    let l1 = g.info_nce(qa, kb, tau)?;
    let l2 = g.info_nce(qb, ka, tau)?;
    let sum = g.add(l1, l2)?;
    let loss = g.scale(sum, c::<T>(0.5));
    let loss_v = g.value(loss).item().as_f64();
    let pos_sim = 0.5 * (mean_diag(g.value(qa), g.value(kb)) + mean_diag(g.value(qb), g.value(ka)));
    if !loss_v.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            snapshot: format!(
                "loss={loss_v} lr={lr} tau={} |query|={:.4e} |key|={:.4e}",
                state.temperature,
                state.query_params.global_norm(),
                state.key_params.global_norm()
            ),
        });
    }
    let mut grads = g.backward(loss)?;
    let grads = state.query_params.collect_grads(&qp, &mut grads);
    state.optimizer.step(&mut state.query_params, &grads, lr);
    momentum_update(&mut state.key_params, &state.query_params, state.momentum)?;
    state.step += 1;
    Ok(StepMetrics { loss: loss_v, pos_sim })
}

/// Frames eligible for contrastive training: every retained frame.
pub fn retained_frames<'a>(manifest: &ClipManifest, store: &'a FrameStore) -> Result<Vec<&'a FrameImage>> {
    let mut out = Vec::with_capacity(manifest.total_retained_frames());
    for clip in &manifest.clips {
        for &fi in &clip.retained_frame_indices {
            out.push(store.frame(&FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi })?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ContrastiveRun<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<MetricsRecord>,
}

pub fn planned_steps(cfg: &ContrastiveConfig, n_frames: usize) -> usize {
    let per_epoch = n_frames / cfg.batch;
    let total = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(total, |m| m.min(total))
}

/// Train from a fresh encoder seeded by `cfg.seed`.
pub fn train_contrastive<T: Scalar>(manifest: &ClipManifest, store: &FrameStore, cfg: &ContrastiveConfig) -> Result<ContrastiveRun<T>> {
    let init = init_encoder::<T>(cfg.encoder, cfg.seed)?;
    train_contrastive_from(&init, manifest, store, cfg)
}

/// Train starting from `init` (stage scratch). Each epoch visits the
/// retained frames in a seed-determined order, dropping the last partial
/// batch; the learning rate warms up linearly then follows a cosine to 0.
pub fn train_contrastive_from<T: Scalar>(init: &Checkpoint<T>, manifest: &ClipManifest, store: &FrameStore, cfg: &ContrastiveConfig) -> Result<ContrastiveRun<T>> {
    if manifest.clips.is_empty() {
        return Err(Error::invalid("contrastive training needs a non-empty manifest"));
    }
    cfg.validate()?;
    let pool = retained_frames(manifest, store)?;
    if pool.len() < cfg.batch {
        return Err(Error::invalid(format!("{} retained frames cannot fill a batch of {}", pool.len(), cfg.batch)));
    }
    let total = planned_steps(cfg, pool.len());
    let sched = WarmupCosine { peak: cfg.lr, warmup: ((total as f64 * cfg.warmup_frac) as usize).max(1), total };
    let mut state = ContrastiveState::new(init, cfg)?;
    let mut metrics = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &format!("contrastive-epoch-{epoch}")));
        for chunk in order.chunks_exact(cfg.batch) {
            if state.step >= total {
                break 'epochs;
            }
            let frames: Vec<&FrameImage> = chunk.iter().map(|&i| pool[i]).collect();
            let batch = ContrastiveBatch::from_frames(&frames, seed::derive_seed(cfg.seed, &format!("views-{}", state.step)), &cfg.augment)?;
            let lr = sched.lr(state.step);
            let step = state.step;
            let m = contrastive_step(&mut state, &batch, lr)?;
            metrics.push(MetricsRecord::new(step, &[("loss", m.loss), ("lr", lr), ("pos_sim", m.pos_sim)]));
            if step % 50 == 0 {
                info!("contrastive step {step}/{total} loss {:.4} pos_sim {:.3}", m.loss, m.pos_sim);
            }
        }
    }
    let tag = format!("contrastive:{}", fingerprint(cfg)?);
    let checkpoint = init.advance(Stage::Contrastive, state.encoder_params(), &tag, false)?;
    Ok(ContrastiveRun { checkpoint, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_corpus, SynthConfig};
    use crate::testutil::{assert_grad_close, central_difference};
    use rand::Rng;

    fn unit_rows(rng: &mut impl Rng, b: usize, d: usize) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = info_nce(&q, &q, 1.0f64).unwrap();
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_rows_give_log_b() {
        for b in [2usize, 5, 16] {
            let row = vec![0.6, 0.8];
            let q = Tensor::from_rows(&vec![row; b]).unwrap();
            let l = info_nce(&q, &q, 0.2f64).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn unnormalized_rows_and_tiny_batches_are_rejected() {
        let q = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        let err = info_nce(&q, &q, 1.0f64).unwrap_err().to_string();
        assert!(err.contains("L2-normalized"), "{err}");
        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(info_nce(&one, &one, 1.0f64).is_err());
        let ok = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(info_nce(&ok, &ok, 0.0f64).is_err());
    }

    #[test]
    fn query_gradient_matches_finite_differences() {
        let mut rng = seed::rng(3, "nce-grad");
        let (b, d) = (6, 10);
        let raw: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys = unit_rows(&mut rng, b, d);
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let q = g.input(Tensor::new(vec![b, d], x.to_vec()).unwrap());
            let qn = g.l2_normalize(q).unwrap();
            let k = g.input(keys.clone());
            let l = g.info_nce(qn, k, 0.3).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let q = g.param(Tensor::new(vec![b, d], raw.clone()).unwrap());
        let qn = g.l2_normalize(q).unwrap();
        let k = g.input(keys.clone());
        let l = g.info_nce(qn, k, 0.3).unwrap();
        let grads = g.backward(l).unwrap();
        assert_grad_close(grads.get(q).unwrap(), &central_difference(&raw, 1e-4, f), 1e-3);
    }

    #[test]
    fn momentum_update_arithmetic() {
        let mut k = ParamSet::new();
        k.insert("a", Tensor::new(vec![2], vec![0.0f64, 4.0]).unwrap());
        let mut q = ParamSet::new();
        q.insert("a", Tensor::new(vec![2], vec![2.0f64, 2.0]).unwrap());
        q.insert("pred.x", Tensor::new(vec![1], vec![9.0]).unwrap());
        let orig = k.clone();
        momentum_update(&mut k, &q, 1.0).unwrap();
        assert_eq!(k, orig);
        momentum_update(&mut k, &q, 0.5).unwrap();
        assert_eq!(k.get("a").unwrap().data(), &[1.0, 3.0]);
        momentum_update(&mut k, &q, 0.0).unwrap();
        assert_eq!(k.get("a").unwrap().data(), &[2.0, 2.0]);

        let mut bad = ParamSet::new();
        bad.insert("a", Tensor::new(vec![3], vec![0.0f64; 3]).unwrap());
        assert!(momentum_update(&mut bad, &q, 0.5).is_err());
        let mut missing = ParamSet::new();
        missing.insert("b", Tensor::new(vec![2], vec![0.0f64; 2]).unwrap());
        assert!(momentum_update(&mut missing, &q, 0.5).is_err());
    }

    fn small_cfg() -> ContrastiveConfig {
        ContrastiveConfig { encoder: EncoderConfig { width: 4, embedding_dim: 16, ..EncoderConfig::default() }, batch: 8, epochs: 1, proj_hidden: 16, proj_dim: 8, ..ContrastiveConfig::default() }
    }

    #[test]
    fn key_tower_has_no_prediction_head_and_only_moves_by_momentum() {
        let cfg = small_cfg();
        let (m, s) = generate_synthetic_corpus(&SynthConfig { n_clips: 8, ..SynthConfig::default() }).unwrap();
        let init = init_encoder::<f32>(cfg.encoder, 0).unwrap();
        let mut st = ContrastiveState::new(&init, &cfg).unwrap();
        assert!(st.key_params.iter().all(|(k, _)| !k.starts_with("pred.")));
        assert!(st.query_params.iter().any(|(k, _)| k.starts_with("pred.")));
        let frames = retained_frames(&m, &s).unwrap();
        let batch = ContrastiveBatch::from_frames(&frames[..8], 1, &cfg.augment).unwrap();
        let before_k = st.key_params.clone();
        let before_q = st.query_params.without_prefix("pred.");
        contrastive_step(&mut st, &batch, 1e-3).unwrap();
        // Recompute the expected EMA from the updated query parameters.
        let mut expect = before_k;
        momentum_update(&mut expect, &st.query_params, cfg.momentum).unwrap();
        assert_eq!(expect, st.key_params);
        assert_ne!(before_q, st.query_params.without_prefix("pred."));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn smoke_run_writes_loadable_checkpoint_and_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = generate_synthetic_corpus(&SynthConfig { n_clips: 4, ..SynthConfig::default() }).unwrap();
        let cfg = ContrastiveConfig { batch: 4, epochs: 1, ..small_cfg() };
        let run = train_contrastive::<f32>(&m, &s, &cfg).unwrap();
        assert_eq!(run.checkpoint.stage, Stage::Contrastive);
        assert_eq!(run.metrics.len(), 3);
        let p = dir.path().join("c.ckpt");
        crate::encoder::save_checkpoint(&run.checkpoint, &p).unwrap();
        assert_eq!(crate::encoder::load_checkpoint::<f32>(&p).unwrap(), run.checkpoint);
        let again = train_contrastive::<f32>(&m, &s, &cfg).unwrap();
        assert_eq!(again.metrics, run.metrics);

        let empty = ClipManifest::empty(m.params());
        assert!(train_contrastive::<f32>(&empty, &s, &cfg).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_without_touching_state() {
        let cfg = small_cfg();
        let (m, s) = generate_synthetic_corpus(&SynthConfig { n_clips: 4, ..SynthConfig::default() }).unwrap();
        let init = init_encoder::<f32>(cfg.encoder, 0).unwrap();
        let mut st = ContrastiveState::new(&init, &cfg).unwrap();
        st.query_params.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = f32::NAN));
        let frames = retained_frames(&m, &s).unwrap();
        let batch = ContrastiveBatch::from_frames(&frames[..4], 1, &cfg.augment).unwrap();
        let before = st.key_params.clone();
        let err = contrastive_step(&mut st, &batch, 1e-3);
        assert!(err.is_err());
        assert_eq!(st.step, 0);
        assert_eq!(st.key_params, before);
    }
}
