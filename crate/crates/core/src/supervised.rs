//! Stage-two fine-tuning: teacher pseudo-label classification plus
//! frame-order prediction, combined as `L = L_vs + λ·L_td`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::canon::fingerprint;
use crate::dataset::{sample_clip_frames, ClipEntry, ClipManifest, FrameImage, FrameRef, FrameStore};
use crate::encoder::{encode, encoder_forward, frames_to_tensor, layer_groups, Checkpoint, EncoderConfig, Head, Stage};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::optim::{Optimizer, WarmupCosine};
use crate::params::{Bound, ParamSet};
use crate::scalar::{c, Scalar};
use crate::seed;
use crate::tensor::{argmax, softmax_into, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelRecord {
    pub clip_id: String,
    pub frame_index: u32,
    pub label: u32,
    pub confidence: f64,
    pub teacher_id: String,
}

impl PseudoLabelRecord {
    pub fn frame_ref(&self) -> FrameRef {
        FrameRef { clip_id: self.clip_id.clone(), frame_index: self.frame_index }
    }
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Source of class scores for frames.
pub trait Teacher {
    fn id(&self) -> String;
    fn n_classes(&self) -> usize;
    /// Frame size the teacher accepts, if fixed.
    fn input_hw(&self) -> Option<(usize, usize)>;
    /// Class probabilities, one row per frame of `clip`.
    fn scores(&self, clip: &ClipEntry, frames: &[FrameImage]) -> Result<Vec<Vec<f64>>>;
}

/// Returns the clip's ground-truth class with full confidence. A fixture for
/// synthetic corpora.
#[derive(Debug, Clone)]
pub struct LabelHintTeacher {
    pub n_classes: usize,
}

impl Teacher for LabelHintTeacher {
    fn id(&self) -> String {
        "label-hint".into()
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn input_hw(&self) -> Option<(usize, usize)> {
        None
    }

    fn scores(&self, clip: &ClipEntry, frames: &[FrameImage]) -> Result<Vec<Vec<f64>>> {
        let label = clip.label_hint.ok_or_else(|| Error::invalid(format!("clip {} has no label hint", clip.clip_id)))? as usize;
        if label >= self.n_classes {
            return Err(Error::invalid(format!("label hint {label} exceeds {} classes", self.n_classes)));
        }
        Ok(frames.iter().map(|_| (0..self.n_classes).map(|k| if k == label { 1.0 } else { 0.0 }).collect()).collect())
    }
}

/// An encoder with a linear softmax head trained on ground-truth labels.
#[derive(Debug, Clone)]
pub struct ClassifierTeacher<T> {
    pub encoder: Checkpoint<T>,
    pub head: ParamSet<T>,
    pub n_classes: usize,
}

impl<T: Scalar> ClassifierTeacher<T> {
    /// Fit encoder and head jointly with cross-entropy on every retained
    /// frame of `manifest`, using `label_hint` as ground truth.
    pub fn train(init: &Checkpoint<T>, manifest: &ClipManifest, store: &FrameStore, n_classes: usize, steps: usize, seed_: u64) -> Result<Self> {
        let mut pool = Vec::new();
        for clip in &manifest.clips {
            let y = clip.label_hint.ok_or_else(|| Error::invalid(format!("clip {} has no label hint", clip.clip_id)))? as usize;
            for &fi in &clip.retained_frame_indices {
                pool.push((store.frame(&FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi })?, y));
            }
        }
        if pool.is_empty() {
            return Err(Error::invalid("teacher training needs frames"));
        }
        let mut rng = seed::rng(seed_, "teacher");
        let mut params = init.params.clone();
        crate::params::init_linear(&mut params, &mut rng, "teacher", init.config.embedding_dim, n_classes, 1.0);
        let mut opt = Optimizer::adam(&params);
        for _ in 0..steps {
            let batch: Vec<_> = (0..32.min(pool.len())).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let frames: Vec<FrameImage> = batch.iter().map(|(f, _)| (*f).clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let x = g.input(frames_to_tensor(&frames, init.config.input_hw)?);
            let h = encoder_forward(&mut g, &b, &init.config, x)?;
            let logits = crate::params::linear(&mut g, &b, "teacher", h)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let mut grads = g.backward(loss)?;
            let grads = params.collect_grads(&b, &mut grads);
            opt.step(&mut params, &grads, 1e-3);
        }
        let head = params.with_prefix("teacher.");
        let encoder = Checkpoint::new(params.with_prefix("enc."), init.config, Stage::Scratch, format!("teacher:{seed_}:{steps}"), seed_)?;
        Ok(Self { encoder, head, n_classes })
    }
}

impl<T: Scalar> Teacher for ClassifierTeacher<T> {
    fn id(&self) -> String {
        format!("classifier-{}", &self.encoder.fingerprint[..12])
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn input_hw(&self) -> Option<(usize, usize)> {
        Some(self.encoder.config.input_hw)
    }

    fn scores(&self, _clip: &ClipEntry, frames: &[FrameImage]) -> Result<Vec<Vec<f64>>> {
        let feats = encode(&self.encoder, frames)?;
        let mut g = Graph::new();
        let b = self.head.bind(&mut g, false);
        let x = g.input(feats);
        let logits = crate::params::linear(&mut g, &b, "teacher", x)?;
        let lv = g.value(logits);
        Ok((0..lv.rows())
            .map(|i| {
                let mut p = vec![T::zero(); lv.cols()];
                softmax_into(lv.row(i), &mut p);
                p.into_iter().map(|v| v.as_f64()).collect()
            })
            .collect())
    }
}

/// One record per retained frame, labelled with the teacher's argmax.
pub fn generate_pseudo_labels(teacher: &dyn Teacher, manifest: &ClipManifest, store: &FrameStore) -> Result<Vec<PseudoLabelRecord>> {
    let id = teacher.id();
    let mut out = Vec::with_capacity(manifest.total_retained_frames());
    for clip in &manifest.clips {
        let frames: Vec<FrameImage> = clip
            .retained_frame_indices
            .iter()
            .map(|&fi| store.frame(&FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi }).cloned())
            .collect::<Result<_>>()?;
        if let (Some((h, w)), Some(f)) = (teacher.input_hw(), frames.first()) {
            if (f.h, f.w) != (h, w) {
                return Err(Error::shape(format!("{h}x{w}x3 frames for teacher {id}"), format!("{}x{}x3 in clip {}", f.h, f.w, clip.clip_id)));
            }
        }
        let scores = teacher.scores(clip, &frames)?;
        for (f, s) in frames.iter().zip(scores) {
            let label = argmax(&s);
            out.push(PseudoLabelRecord {
                clip_id: clip.clip_id.clone(),
                frame_index: f.source.frame_index,
                label: label as u32,
                confidence: s[label],
                teacher_id: id.clone(),
            });
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `labels` under `logits` (`B×C`).
pub fn loss_vs<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    if logits.shape().len() != 2 || logits.cols() < 2 {
        return Err(Error::shape("[B, C >= 2] logits", format!("{:?}", logits.shape())));
    }
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let out = g.cross_entropy(l, labels)?;
    Ok(g.value(out).item())
}

pub(crate) fn check_permutation(labels: &[usize]) -> Result<()> {
    let mut seen = vec![false; labels.len()];
    for &l in labels {
        if l >= labels.len() || std::mem::replace(&mut seen[l], true) {
            return Err(Error::invalid(format!("order labels {labels:?} are not a permutation of 0..{}", labels.len())));
        }
    }
    Ok(())
}

/// Mean per-frame cross-entropy of each frame's original position; `logits`
/// is `N×N` and `labels` a permutation of `0..N`.
pub fn loss_td<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    if logits.shape().len() != 2 || logits.rows() != logits.cols() || logits.rows() != labels.len() {
        return Err(Error::shape(format!("[{n}, {n}] logits", n = labels.len()), format!("{:?}", logits.shape())));
    }
    check_permutation(labels)?;
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let out = g.cross_entropy(l, labels)?;
    Ok(g.value(out).item())
}

pub fn joint_loss<T: Scalar>(l_vs: T, l_td: T, lambda: T) -> T {
    l_vs + lambda * l_td
}

/// Frames of one clip in shuffled order; `labels[i]` is the original
/// position of `frames[i]`.
#[derive(Debug, Clone)]
pub struct OrderSample {
    pub frames: Vec<FrameImage>,
    pub labels: Vec<usize>,
    pub permutation_seed: u64,
}

impl OrderSample {
    /// Frames put back in temporal order.
    pub fn restore(&self) -> Vec<FrameImage> {
        let mut out = self.frames.clone();
        for (f, &l) in self.frames.iter().zip(&self.labels) {
            out[l] = f.clone();
        }
        out
    }
}

pub fn order_permutation(n: usize, seed_: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed_, "order-permutation"));
    perm
}

pub fn make_order_sample(store: &FrameStore, clip: &ClipEntry, n: usize, seed_: u64) -> Result<OrderSample> {
    let frames = sample_clip_frames(store, clip, n)?;
    let labels = order_permutation(n, seed_);
    let frames = labels.iter().map(|&p| frames[p].clone()).collect();
    Ok(OrderSample { frames, labels, permutation_seed: seed_ })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub lambda: f64,
    /// Weight on the semantics loss; 0 leaves only the order term.
    pub vs_weight: f64,
    pub n_frames: usize,
    pub teacher_ref: String,
    /// Width of the semantics head output.
    pub n_classes: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    /// Frames per step for the semantics loss.
    pub batch: usize,
    /// Clips per step for the order loss.
    pub order_batch: usize,
    pub lr: f64,
    pub head_hidden: usize,
    /// Use soft targets built from teacher confidence instead of one-hot.
    pub soft_targets: bool,
    /// The order head sees only the frame itself, without the sequence mean.
    pub single_frame_order: bool,
    /// Leading encoder layer groups kept fixed.
    pub freeze_depth: usize,
    /// Permit fine-tuning a scratch checkpoint (ablation).
    pub allow_scratch: bool,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lambda: 0.33,
            vs_weight: 1.0,
            n_frames: 5,
            teacher_ref: "label-hint".into(),
            n_classes: 8,
            epochs: 20,
            max_steps: None,
            batch: 64,
            order_batch: 8,
            lr: 1e-3,
            head_hidden: 64,
            soft_targets: false,
            single_frame_order: false,
            freeze_depth: 0,
            allow_scratch: false,
            seed: 0,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.vs_weight >= 0.0) || self.vs_weight + self.lambda == 0.0 {
            return Err(Error::invalid("vs_weight must be nonnegative and not both loss weights zero"));
        }
        if self.n_frames < 2 {
            return Err(Error::invalid(format!("n_frames must be at least 2, got {}", self.n_frames)));
        }
        if self.n_classes < 2 || self.batch == 0 || self.order_batch == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid("n_classes >= 2, positive batch sizes and lr required"));
        }
        Ok(())
    }

    pub fn semantics_head(&self, enc: &EncoderConfig) -> Head {
        Head::semantics(enc.embedding_dim, self.head_hidden, self.n_classes)
    }

    pub fn order_head(&self, enc: &EncoderConfig) -> Head {
        let input = if self.single_frame_order { enc.embedding_dim } else { 2 * enc.embedding_dim };
        Head::order(input, self.head_hidden, self.n_frames)
    }
}

fn order_logits<T: Scalar>(g: &mut Graph<T>, b: &Bound, head: &Head, feats: Var, n: usize, single: bool) -> Result<Var> {
    let input = if single {
        feats
    } else {
        let ctx = g.group_mean(feats, n)?;
        g.concat_cols(feats, ctx)?
    };
    head.forward(g, b, input)
}

#[derive(Debug, Clone)]
pub struct SupervisedRun<T> {
    pub checkpoint: Checkpoint<T>,
    /// `h1.*` and `h2.*`; not part of the checkpoint.
    pub heads: ParamSet<T>,
    pub metrics: Vec<MetricsRecord>,
}

type LabelIndex = BTreeMap<FrameRef, PseudoLabelRecord>;

fn index_labels(labels: &[PseudoLabelRecord], n_classes: usize) -> Result<LabelIndex> {
    let mut idx = BTreeMap::new();
    for r in labels {
        if r.label as usize >= n_classes {
            return Err(Error::invalid(format!("pseudo-label {} for {}:{} exceeds {n_classes} classes", r.label, r.clip_id, r.frame_index)));
        }
        if idx.insert(r.frame_ref(), r.clone()).is_some() {
            return Err(Error::invalid(format!("duplicate pseudo-label for {}:{}", r.clip_id, r.frame_index)));
        }
    }
    Ok(idx)
}

fn targets<T: Scalar>(recs: &[&PseudoLabelRecord], n_classes: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(recs.len() * n_classes);
    for r in recs {
        let conf = r.confidence.clamp(1.0 / n_classes as f64, 1.0);
        let rest = (1.0 - conf) / (n_classes - 1) as f64;
        data.extend((0..n_classes).map(|k| c::<T>(if k == r.label as usize { conf } else { rest })));
    }
    Tensor::new(vec![recs.len(), n_classes], data).expect("target shape")
}

/// Fine-tune encoder and both heads. Each step draws `batch` retained
/// frames for the semantics loss and `order_batch` clips for the order loss.
pub fn train_supervised<T: Scalar>(
    ckpt: &Checkpoint<T>,
    manifest: &ClipManifest,
    store: &FrameStore,
    labels: &[PseudoLabelRecord],
    cfg: &JointConfig,
) -> Result<SupervisedRun<T>> {
    cfg.validate()?;
    match ckpt.stage {
        Stage::Contrastive => {}
        Stage::Scratch if cfg.allow_scratch => {}
        other => return Err(Error::Stage { from: other.to_string(), to: Stage::Supervised.to_string() }),
    }
    if manifest.clips.is_empty() {
        return Err(Error::invalid("supervised training needs a non-empty manifest"));
    }
    let index = index_labels(labels, cfg.n_classes)?;
    let mut pool: Vec<(&FrameImage, &PseudoLabelRecord)> = Vec::new();
    for clip in &manifest.clips {
        for &fi in &clip.retained_frame_indices {
            let r = FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi };
            let rec = index.get(&r).ok_or_else(|| Error::invalid(format!("missing pseudo-label for {}:{fi}", clip.clip_id)))?;
            pool.push((store.frame(&r)?, rec));
        }
    }
    let enc = ckpt.config;
    let (h1, h2) = (cfg.semantics_head(&enc), cfg.order_head(&enc));
    let mut rng = seed::rng(cfg.seed, "supervised-heads");
    let mut params = ckpt.params.clone();
    h1.init(&mut params, &mut rng);
    h2.init(&mut params, &mut rng);
    let frozen: Vec<String> = layer_groups(&enc).into_iter().take(cfg.freeze_depth).collect();
    let mut opt = Optimizer::adam(&params);

    let per_epoch = (pool.len() / cfg.batch).max(1);
    let total = cfg.max_steps.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let sched = WarmupCosine { peak: cfg.lr, warmup: (total / 20).max(1), total };
    let lambda = c::<T>(cfg.lambda);
    let mut metrics = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut clip_order: Vec<usize> = (0..manifest.clips.len()).collect();
    let mut clip_cursor = clip_order.len();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &format!("supervised-epoch-{epoch}")));
        for chunk in order.chunks(cfg.batch) {
            if step >= total {
                break 'epochs;
            }
            if chunk.len() < cfg.batch && pool.len() >= cfg.batch {
                continue;
            }
            let vs_frames: Vec<FrameImage> = chunk.iter().map(|&i| pool[i].0.clone()).collect();
            let vs_recs: Vec<&PseudoLabelRecord> = chunk.iter().map(|&i| pool[i].1).collect();

            let mut td_frames = Vec::with_capacity(cfg.order_batch * cfg.n_frames);
            let mut td_labels = Vec::with_capacity(cfg.order_batch * cfg.n_frames);
            for k in 0..cfg.order_batch {
                if clip_cursor == clip_order.len() {
                    clip_order.shuffle(&mut seed::rng(cfg.seed, &format!("supervised-clips-{step}")));
                    clip_cursor = 0;
                }
                let clip = &manifest.clips[clip_order[clip_cursor]];
                clip_cursor += 1;
                let s = make_order_sample(store, clip, cfg.n_frames, seed::derive_seed(cfg.seed, &format!("order-{step}-{k}")))?;
                td_frames.extend(s.frames);
                td_labels.extend(s.labels);
            }

            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let xv = g.input(frames_to_tensor(&vs_frames, enc.input_hw)?);
            let fv = encoder_forward(&mut g, &b, &enc, xv)?;
            let lv = h1.forward(&mut g, &b, fv)?;
            let l_vs = if cfg.soft_targets {
                g.soft_cross_entropy(lv, &targets(&vs_recs, cfg.n_classes))?
            } else {
                let y: Vec<usize> = vs_recs.iter().map(|r| r.label as usize).collect();
                g.cross_entropy(lv, &y)?
            };
            let xt = g.input(frames_to_tensor(&td_frames, enc.input_hw)?);
            let ft = encoder_forward(&mut g, &b, &enc, xt)?;
            let lt = order_logits(&mut g, &b, &h2, ft, cfg.n_frames, cfg.single_frame_order)?;
            let l_td = g.cross_entropy(lt, &td_labels)?;
            let weighted = g.scale(l_td, lambda);
            let vs = g.scale(l_vs, c::<T>(cfg.vs_weight));
            let loss = g.add(vs, weighted)?;
            let (lvs, ltd, lt_v) = (g.value(l_vs).item().as_f64(), g.value(l_td).item().as_f64(), g.value(loss).item().as_f64());
            if !lt_v.is_finite() {
                return Err(Error::NonFinite { step, snapshot: format!("l_vs={lvs} l_td={ltd} |params|={:.4e}", params.global_norm()) });
            }
            let mut grads = g.backward(loss)?;
            let mut grads = params.collect_grads(&b, &mut grads);
            if !frozen.is_empty() {
                grads = grads.without_prefixes(&frozen);
            }
            let lr = sched.lr(step);
            opt.step(&mut params, &grads, lr);
            metrics.push(MetricsRecord::new(step, &[("l_td", ltd), ("l_vs", lvs), ("loss", lt_v), ("lr", lr)]));
            if step % 100 == 0 {
                info!("supervised step {step}/{total} l_vs {lvs:.4} l_td {ltd:.4}");
            }
            step += 1;
        }
    }
    let tag = format!("supervised:{}:{}", fingerprint(cfg)?, &fingerprint(labels)?[..16]);
    let checkpoint = ckpt.advance(Stage::Supervised, params.with_prefix("enc."), &tag, cfg.allow_scratch)?;
    let mut heads = params.with_prefix("h1.");
    heads.merge(params.with_prefix("h2."));
    Ok(SupervisedRun { checkpoint, heads, metrics })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScores {
    /// Fraction of retained frames where the semantics head agrees with the
    /// pseudo-label.
    pub label_agreement: f64,
    /// Fraction of frames whose original position the order head recovers.
    pub order_accuracy: f64,
}

/// Score a trained run on clips it has not seen.
pub fn evaluate_heads<T: Scalar>(
    run: &SupervisedRun<T>,
    cfg: &JointConfig,
    manifest: &ClipManifest,
    store: &FrameStore,
    labels: &[PseudoLabelRecord],
    seed_: u64,
) -> Result<HeldOutScores> {
    let enc = run.checkpoint.config;
    let index = index_labels(labels, cfg.n_classes)?;
    let (h1, h2) = (cfg.semantics_head(&enc), cfg.order_head(&enc));
    let (mut agree, mut total) = (0usize, 0usize);
    let (mut correct, mut frames_seen) = (0usize, 0usize);
    for (ci, clip) in manifest.clips.iter().enumerate() {
        let refs: Vec<FrameRef> = clip.retained_frame_indices.iter().map(|&fi| FrameRef { clip_id: clip.clip_id.clone(), frame_index: fi }).collect();
        let frames: Vec<FrameImage> = refs.iter().map(|r| store.frame(r).cloned()).collect::<Result<_>>()?;
        let s = make_order_sample(store, clip, cfg.n_frames, seed::derive_seed(seed_, &format!("eval-order-{ci}")))?;
        let mut g = Graph::new();
        let b = run.heads.bind(&mut g, false);
        let fv = g.input(encode(&run.checkpoint, &frames)?);
        let lv = h1.forward(&mut g, &b, fv)?;
        for (i, r) in refs.iter().enumerate() {
            let rec = index.get(r).ok_or_else(|| Error::invalid(format!("missing pseudo-label for {}:{}", r.clip_id, r.frame_index)))?;
            agree += (argmax(g.value(lv).row(i)) == rec.label as usize) as usize;
            total += 1;
        }
        let ft = g.input(encode(&run.checkpoint, &s.frames)?);
        let lt = order_logits(&mut g, &b, &h2, ft, cfg.n_frames, cfg.single_frame_order)?;
        for (i, &y) in s.labels.iter().enumerate() {
            correct += (argmax(g.value(lt).row(i)) == y) as usize;
            frames_seen += 1;
        }
    }
    Ok(HeldOutScores { label_agreement: agree as f64 / total.max(1) as f64, order_accuracy: correct as f64 / frames_seen.max(1) as f64 })
}
