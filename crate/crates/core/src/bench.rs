//! Study grids: corpus × architecture × method × demonstration count, each
//! cell pre-trained as needed and scored with the behaviour-cloning protocol.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use log::info;
use serde::{Deserialize, Serialize};

use crate::canon::{canonical_json, fingerprint};
use crate::contrastive::{train_contrastive_from, ContrastiveConfig};
use crate::dataset::{generate_synthetic_corpus, ClipManifest, FrameStore, Motion, SynthConfig};
use crate::encoder::{freeze, init_encoder, load_checkpoint, save_checkpoint, Architecture, Checkpoint, EncoderConfig};
use crate::error::{Error, Result};
use crate::imitation::{run_protocol, BCConfig, EvalReport, EVAL_SEEDS};
use crate::scalar::Scalar;
use crate::supervised::{generate_pseudo_labels, train_supervised, JointConfig, LabelHintTeacher};
use crate::toyenv::{TaskId, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "scratch")]
    Scratch,
    #[serde(rename = "contrastive")]
    Contrastive,
    #[serde(rename = "contrastive+vs")]
    ContrastiveVs,
    #[serde(rename = "contrastive+td")]
    ContrastiveTd,
    #[serde(rename = "viprom-full")]
    Full,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Scratch, Method::Contrastive, Method::ContrastiveVs, Method::ContrastiveTd, Method::Full];
    /// The module ablation rows.
    pub const ABLATION: [Method; 4] = [Method::Contrastive, Method::ContrastiveVs, Method::ContrastiveTd, Method::Full];

    pub fn name(self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::Contrastive => "contrastive",
            Method::ContrastiveVs => "contrastive+vs",
            Method::ContrastiveTd => "contrastive+td",
            Method::Full => "viprom-full",
        }
    }

    /// Loss weights `(vs_weight, lambda)` of the second stage, if any.
    fn supervised_weights(self, lambda: f64) -> Option<(f64, f64)> {
        match self {
            Method::Scratch | Method::Contrastive => None,
            Method::ContrastiveVs => Some((1.0, 0.0)),
            Method::ContrastiveTd => Some((0.0, lambda)),
            Method::Full => Some((1.0, lambda)),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown method {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// Pre-training data for a cell: a generated synthetic corpus in clip or
/// static form, or a corpus directory saved earlier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CorpusSource {
    Synthetic(Motion),
    Stored(PathBuf),
}

impl CorpusSource {
    pub fn name(&self) -> String {
        match self {
            CorpusSource::Synthetic(Motion::Clips) => "clips".into(),
            CorpusSource::Synthetic(Motion::Static) => "static".into(),
            CorpusSource::Stored(p) => format!("dir:{}", p.display()),
        }
    }
}

impl TryFrom<String> for CorpusSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        match s.as_str() {
            "clips" => Ok(CorpusSource::Synthetic(Motion::Clips)),
            "static" => Ok(CorpusSource::Synthetic(Motion::Static)),
            _ => match s.strip_prefix("dir:") {
                Some(p) if !p.is_empty() => Ok(CorpusSource::Stored(PathBuf::from(p))),
                _ => Err(Error::invalid(format!("unknown corpus {s:?} (expected clips, static or dir:PATH)"))),
            },
        }
    }
}

impl From<CorpusSource> for String {
    fn from(c: CorpusSource) -> String {
        c.name()
    }
}

/// Stage budgets shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub n_clips: usize,
    pub n_classes: usize,
    pub corpus_seed: u64,
    pub embedding_dim: usize,
    /// Frames per step in both stages.
    pub batch: usize,
    pub contrastive_steps: usize,
    pub supervised_steps: usize,
    pub lambda: f64,
    pub init_seed: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            n_clips: 200,
            n_classes: 8,
            corpus_seed: 0,
            embedding_dim: 64,
            batch: 64,
            contrastive_steps: 800,
            supervised_steps: 1000,
            lambda: 0.33,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub corpus: Vec<CorpusSource>,
    pub architecture: Vec<Architecture>,
    pub method: Vec<Method>,
    #[serde(default = "default_demos")]
    pub n_demos: Vec<usize>,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskId>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "BCConfig::toy")]
    pub protocol: BCConfig,
    #[serde(default)]
    pub pretrain: PretrainSettings,
}

fn default_demos() -> Vec<usize> {
    vec![5]
}

fn default_tasks() -> Vec<TaskId> {
    TaskId::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    EVAL_SEEDS.to_vec()
}

impl GridSpec {
    pub fn new(corpus: Vec<CorpusSource>, architecture: Vec<Architecture>, method: Vec<Method>) -> Self {
        Self {
            corpus,
            architecture,
            method,
            n_demos: default_demos(),
            tasks: default_tasks(),
            seeds: default_seeds(),
            protocol: BCConfig::toy(),
            pretrain: PretrainSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("corpus", self.corpus.len()),
            ("architecture", self.architecture.len()),
            ("method", self.method.len()),
            ("n_demos", self.n_demos.len()),
            ("tasks", self.tasks.len()),
            ("seeds", self.seeds.len()),
        ];
        if let Some((axis, _)) = sizes.iter().find(|(_, n)| *n == 0) {
            return Err(Error::invalid(format!("grid axis {axis} is empty")));
        }
        self.protocol.validate()
    }

    /// Cells in axis order: corpus, architecture, method, then demos.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for corpus in &self.corpus {
            for &architecture in &self.architecture {
                for &method in &self.method {
                    for &n_demos in &self.n_demos {
                        out.push(Cell { corpus: corpus.clone(), architecture, method, n_demos });
                    }
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub corpus: CorpusSource,
    pub architecture: Architecture,
    pub method: Method,
    pub n_demos: usize,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}/{}/{}/demos-{}", self.corpus.name(), self.architecture, self.method, self.n_demos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub cell_id: String,
    pub cell: Cell,
    /// Hash of everything that determines this row.
    pub fingerprint: String,
    pub encoder_fingerprint: String,
    pub aggregate: f64,
    pub per_seed: BTreeMap<u64, f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_fingerprints: Vec<String>,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub provenance: Provenance,
}

impl BenchResult {
    pub fn empty() -> Self {
        Self { rows: Vec::new(), provenance: Provenance { spec_fingerprints: Vec::new(), code_version: env!("CARGO_PKG_VERSION").into() } }
    }

    pub fn row(&self, cell: &Cell) -> Option<&BenchRow> {
        self.rows.iter().find(|r| &r.cell == cell)
    }

    /// Append rows whose fingerprint is not already present.
    pub fn merge(&mut self, rows: impl IntoIterator<Item = BenchRow>) -> usize {
        let mut added = 0;
        for r in rows {
            if !self.rows.iter().any(|x| x.fingerprint == r.fingerprint) {
                self.rows.push(r);
                added += 1;
            }
        }
        added
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

type Slot<V> = Arc<Mutex<Option<Arc<V>>>>;

/// Fingerprint-keyed memo: concurrent requests for one key wait on a single
/// computation. Failures are not cached.
struct Memo<V> {
    slots: Mutex<BTreeMap<String, Slot<V>>>,
}

impl<V> Memo<V> {
    fn new() -> Self {
        Self { slots: Mutex::new(BTreeMap::new()) }
    }

    fn get_or(&self, key: &str, f: impl FnOnce() -> Result<V>) -> Result<Arc<V>> {
        let slot = self.slots.lock().expect("memo lock").entry(key.to_string()).or_default().clone();
        let mut guard = slot.lock().expect("memo slot lock");
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = Arc::new(f()?);
        *guard = Some(v.clone());
        Ok(v)
    }
}

/// Stage checkpoints keyed by the fingerprint of their inputs, in memory and
/// optionally under `dir`.
pub struct StageCache<T> {
    dir: Option<PathBuf>,
    corpora: Memo<(ClipManifest, FrameStore)>,
    stages: Memo<Checkpoint<T>>,
    computed: AtomicUsize,
}

impl<T: Scalar> StageCache<T> {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, corpora: Memo::new(), stages: Memo::new(), computed: AtomicUsize::new(0) }
    }

    /// Stage checkpoints trained (not loaded) by this cache so far.
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }

    fn stage(&self, key: &str, train: impl FnOnce() -> Result<Checkpoint<T>>) -> Result<Arc<Checkpoint<T>>> {
        self.stages.get_or(key, || {
            let path = self.dir.as_ref().map(|d| d.join(format!("{key}.ckpt")));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                return load_checkpoint(p);
            }
            let ck = train()?;
            self.computed.fetch_add(1, Ordering::SeqCst);
            if let Some(p) = path {
                std::fs::create_dir_all(p.parent().expect("cache dir")).map_err(|e| Error::io(&p, e))?;
                save_checkpoint(&ck, &p)?;
            }
            Ok(ck)
        })
    }
}

fn load_corpus(source: &CorpusSource, pre: &PretrainSettings, cell: &Cell) -> Result<(ClipManifest, FrameStore)> {
    match source {
        CorpusSource::Synthetic(motion) => generate_synthetic_corpus(&SynthConfig {
            seed: pre.corpus_seed,
            n_clips: pre.n_clips,
            n_classes: pre.n_classes,
            motion: *motion,
            ..SynthConfig::default()
        }),
        CorpusSource::Stored(dir) => {
            if !dir.join("manifest.json").exists() {
                return Err(Error::invalid(format!("cell {}: corpus directory {} not found", cell.id(), dir.display())));
            }
            FrameStore::load(dir)
        }
    }
}

/// Encoder checkpoint for a cell, reusing any shared prefix from `cache`.
pub fn cell_encoder<T: Scalar>(cell: &Cell, pre: &PretrainSettings, cache: &StageCache<T>) -> Result<Arc<Checkpoint<T>>> {
    let enc_cfg = EncoderConfig::new(cell.architecture, pre.embedding_dim, (16, 16));
    let init_key = fingerprint(&("init", &enc_cfg, pre.init_seed))?;
    let init = cache.stage(&init_key, || init_encoder(enc_cfg, pre.init_seed))?;
    if cell.method == Method::Scratch {
        return Ok(init);
    }
    let corpus_key = fingerprint(&("corpus", &cell.corpus, pre.n_clips, pre.n_classes, pre.corpus_seed))?;
    let corpus = cache.corpora.get_or(&corpus_key, || load_corpus(&cell.corpus, pre, cell))?;
    let c_cfg = ContrastiveConfig { encoder: enc_cfg, epochs: 1_000_000, batch: pre.batch, max_steps: Some(pre.contrastive_steps), ..ContrastiveConfig::default() };
    let c_key = fingerprint(&("contrastive", &init_key, &corpus_key, &c_cfg))?;
    let contrastive = cache.stage(&c_key, || {
        info!("cell {}: contrastive stage", cell.id());
        Ok(train_contrastive_from(&init, &corpus.0, &corpus.1, &c_cfg)?.checkpoint)
    })?;
    let Some((vs_weight, lambda)) = cell.method.supervised_weights(pre.lambda) else {
        return Ok(contrastive);
    };
    let j_cfg = JointConfig { vs_weight, lambda, n_classes: pre.n_classes, epochs: 1_000_000, batch: pre.batch, max_steps: Some(pre.supervised_steps), ..JointConfig::default() };
    let s_key = fingerprint(&("supervised", &c_key, &j_cfg))?;
    cache.stage(&s_key, || {
        info!("cell {}: supervised stage", cell.id());
        let labels = generate_pseudo_labels(&LabelHintTeacher { n_classes: pre.n_classes }, &corpus.0, &corpus.1)?;
        Ok(train_supervised(&contrastive, &corpus.0, &corpus.1, &labels, &j_cfg)?.checkpoint)
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Result document, per-cell reports and the stage cache live here.
    pub out_dir: Option<PathBuf>,
}

pub const RESULT_FILE: &str = "bench_result.json";

fn row_fingerprint(spec: &GridSpec, cell: &Cell) -> Result<String> {
    fingerprint(&(cell, &spec.tasks, &spec.seeds, &spec.protocol, &spec.pretrain))
}

fn run_cell<T: Scalar>(spec: &GridSpec, cell: &Cell, cache: &StageCache<T>, out_dir: Option<&Path>) -> Result<BenchRow> {
    let ck = cell_encoder(cell, &spec.pretrain, cache)?;
    let enc = freeze((*ck).clone());
    let tasks: Vec<TaskSpec> = spec.tasks.iter().map(|&t| TaskSpec::new(t)).collect();
    let bc = BCConfig { n_demos: cell.n_demos, ..spec.protocol.clone() };
    let mut report = run_protocol(&enc, &tasks, &spec.seeds, &bc)?;
    let fp = row_fingerprint(spec, cell)?;
    if let Some(dir) = out_dir {
        let rel = PathBuf::from("cells").join(&fp[..16]);
        let cdir = dir.join(&rel);
        std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        for c in &mut report.cells {
            let name = format!("trace-{}-{}.json", c.task, c.seed);
            std::fs::write(cdir.join(&name), canonical_json(&c.trace)?).map_err(|e| Error::io(cdir.join(&name), e))?;
            c.trace_path = Some(rel.join(&name).to_string_lossy().replace('\\', "/"));
        }
        report.save(&cdir.join("report.json"))?;
    }
    info!("cell {}: aggregate {:.3}", cell.id(), report.aggregate);
    Ok(BenchRow {
        cell_id: cell.id(),
        cell: cell.clone(),
        fingerprint: fp,
        encoder_fingerprint: report.encoder_fingerprint.clone(),
        aggregate: report.aggregate,
        per_seed: report.per_seed(),
        report,
    })
}

/// Run every cell not already recorded under `out_dir`, on up to
/// `workers` threads, and append the new rows.
pub fn run_grid<T: Scalar>(spec: &GridSpec, opts: &RunOptions) -> Result<BenchResult> {
    let cache = StageCache::<T>::new(opts.out_dir.as_ref().map(|d| d.join("cache")));
    run_grid_with_cache(spec, opts, &cache)
}

/// [`run_grid`] with a caller-owned stage cache, so several grids can share
/// pre-training stages.
pub fn run_grid_with_cache<T: Scalar>(spec: &GridSpec, opts: &RunOptions, cache: &StageCache<T>) -> Result<BenchResult> {
    spec.validate()?;
    let mut result = match &opts.out_dir {
        Some(d) if d.join(RESULT_FILE).exists() => BenchResult::load(&d.join(RESULT_FILE))?,
        _ => BenchResult::empty(),
    };
    let spec_fp = fingerprint(spec)?;
    if !result.provenance.spec_fingerprints.contains(&spec_fp) {
        result.provenance.spec_fingerprints.push(spec_fp);
    }
    let mut todo = Vec::new();
    for cell in spec.cells() {
        let fp = row_fingerprint(spec, &cell)?;
        if !result.rows.iter().any(|r| r.fingerprint == fp) {
            todo.push(cell);
        }
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<BenchRow>>>> = Mutex::new((0..todo.len()).map(|_| None).collect());
    let workers = opts.workers.clamp(1, todo.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= todo.len() {
                    break;
                }
                let r = run_cell(spec, &todo[i], cache, opts.out_dir.as_deref());
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let rows = slots.into_inner().expect("result lock").into_iter().map(|r| r.expect("every cell ran")).collect::<Result<Vec<_>>>()?;
    result.merge(rows);
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        result.save(&d.join(RESULT_FILE))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    Delimited,
    Plot,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table-text" => Ok(ReportFormat::TableText),
            "delimited" => Ok(ReportFormat::Delimited),
            "plot" => Ok(ReportFormat::Plot),
            _ => Err(Error::invalid(format!("unknown report format {s:?} (expected table-text, delimited or plot)"))),
        }
    }
}

pub fn render_table(result: &BenchResult) -> String {
    let seeds: Vec<u64> = result.rows.iter().flat_map(|r| r.per_seed.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let width = result.rows.iter().map(|r| r.cell_id.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>9}", "cell", "aggregate");
    for s in &seeds {
        let _ = write!(out, "  {:>8}", format!("seed {s}"));
    }
    out.push('\n');
    for r in &result.rows {
        let _ = write!(out, "{:<width$}  {:>9.3}", r.cell_id, r.aggregate);
        for s in &seeds {
            match r.per_seed.get(s) {
                Some(v) => write!(out, "  {v:>8.3}"),
                None => write!(out, "  {:>8}", "-"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}

pub const DELIMITED_HEADER: [&str; 7] = ["cell_id", "corpus", "architecture", "method", "n_demos", "aggregate", "fingerprint"];

pub fn render_delimited(result: &BenchResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("delimited report: {e}"));
    w.write_record(DELIMITED_HEADER).map_err(csv_err)?;
    for r in &result.rows {
        w.write_record([
            r.cell_id.clone(),
            r.cell.corpus.name(),
            r.cell.architecture.to_string(),
            r.cell.method.to_string(),
            r.cell.n_demos.to_string(),
            r.aggregate.to_string(),
            r.fingerprint.clone(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("delimited report: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Success against demonstration count, one polyline per
/// corpus/architecture/method series.
pub fn render_plot(result: &BenchResult) -> String {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in &result.rows {
        let key = format!("{}/{}/{}", r.cell.corpus.name(), r.cell.architecture, r.cell.method);
        series.entry(key).or_default().push((r.cell.n_demos, r.aggregate));
    }
    let max_demos = result.rows.iter().map(|r| r.cell.n_demos).max().unwrap_or(1).max(1) as f64;
    let (w, h, m) = (480.0, 320.0, 40.0);
    let px = |d: usize| m + (w - 2.0 * m) * d as f64 / max_demos;
    let py = |s: f64| h - m - (h - 2.0 * m) * s;
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
    let _ = writeln!(svg, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">demonstrations</text>", w / 2.0, h - 8.0);
    let _ = writeln!(svg, "<text x=\"12\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">success</text>", h / 2.0, h / 2.0);
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|p| p.0);
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(d, s)| format!("{:.1},{:.1}", px(d), py(s))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for &(d, s) in &pts {
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", px(d), py(s));
        }
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"{color}\">{name}</text>", m + 6.0, m + 12.0 * i as f64);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write the report in `format` under `dir`; returns the file written.
pub fn emit_report(result: &BenchResult, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    if result.rows.is_empty() {
        return Err(Error::invalid("bench result has no rows"));
    }
    let (name, body) = match format {
        ReportFormat::TableText => ("report.txt", render_table(result)),
        ReportFormat::Delimited => ("report.csv", render_delimited(result)?),
        ReportFormat::Plot => ("report.svg", render_plot(result)),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec(method: Vec<Method>) -> GridSpec {
        GridSpec {
            tasks: vec![TaskId::Reach],
            seeds: vec![100],
            protocol: BCConfig { steps: 40, eval_every: 20, eval_episodes: 2, hidden: 8, n_demos: 1, ..BCConfig::default() },
            pretrain: PretrainSettings { n_clips: 12, n_classes: 3, embedding_dim: 8, batch: 8, contrastive_steps: 2, supervised_steps: 2, ..PretrainSettings::default() },
            ..GridSpec::new(vec![CorpusSource::Synthetic(Motion::Clips)], vec![Architecture::TinyConv], method)
        }
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("moco".parse::<Method>().is_err());
        for s in ["clips", "static", "dir:/data/x"] {
            assert_eq!(CorpusSource::try_from(s.to_string()).unwrap().name(), s);
        }
        assert!(CorpusSource::try_from("imagenet".to_string()).is_err());
        assert!("pdf".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn grid_has_one_cell_per_axis_combination() {
        let mut spec = tiny_spec(Method::ABLATION.to_vec());
        spec.corpus.push(CorpusSource::Synthetic(Motion::Static));
        spec.n_demos = vec![5, 25];
        assert_eq!(spec.cells().len(), 2 * 4 * 2);
        spec.method.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn shared_prefixes_train_once() {
        let spec = tiny_spec(vec![Method::Contrastive, Method::ContrastiveVs, Method::Full]);
        let cache = StageCache::<f32>::new(None);
        let cks: Vec<_> = spec.cells().iter().map(|c| cell_encoder(c, &spec.pretrain, &cache).unwrap()).collect();
        // init, contrastive, then one supervised stage per supervised method.
        assert_eq!(cache.computed(), 4);
        assert_ne!(cks[1].fingerprint, cks[2].fingerprint);
        let again = cell_encoder(&spec.cells()[2], &spec.pretrain, &cache).unwrap();
        assert!(Arc::ptr_eq(&again, &cks[2]));
    }

    #[test]
    fn disk_cache_matches_fresh_computation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(vec![Method::Full]);
        let cell = &spec.cells()[0];
        let fresh = cell_encoder(cell, &spec.pretrain, &StageCache::<f32>::new(Some(dir.path().into()))).unwrap();
        let warm = StageCache::<f32>::new(Some(dir.path().into()));
        let cached = cell_encoder(cell, &spec.pretrain, &warm).unwrap();
        assert_eq!(warm.computed(), 0);
        assert_eq!(cached.params, fresh.params);
        assert_eq!(cached.fingerprint, fresh.fingerprint);
    }

    #[test]
    fn missing_corpus_names_the_cell() {
        let mut spec = tiny_spec(vec![Method::Contrastive]);
        spec.corpus = vec![CorpusSource::Stored("/nonexistent/corpus".into())];
        let err = run_grid::<f32>(&spec, &RunOptions::default()).unwrap_err().to_string();
        assert!(err.contains("dir:/nonexistent/corpus/tiny-conv/contrastive/demos-5"), "{err}");
    }

    #[test]
    fn rerun_is_a_byte_identical_cache_hit() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(vec![Method::Scratch, Method::Full]);
        let opts = RunOptions { workers: 2, out_dir: Some(dir.path().into()) };
        let a = run_grid::<f32>(&spec, &opts).unwrap();
        assert_eq!(a.rows.len(), 2);
        let bytes = std::fs::read(dir.path().join(RESULT_FILE)).unwrap();
        let b = run_grid::<f32>(&spec, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::read(dir.path().join(RESULT_FILE)).unwrap(), bytes);
        let trace = a.rows[0].report.cells[0].trace_path.as_ref().unwrap();
        assert!(dir.path().join(trace).exists());

        let table = render_table(&a);
        for r in &a.rows {
            assert!(table.contains(&r.cell_id) && table.contains(&format!("{:.3}", r.aggregate)));
        }
        let text = render_delimited(&a).unwrap();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let parsed: Vec<(String, f64)> = rd.records().map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[5].parse().unwrap())
        }).collect();
        assert_eq!(parsed, a.rows.iter().map(|r| (r.cell_id.clone(), r.aggregate)).collect::<Vec<_>>());
        let p1 = std::fs::read(emit_report(&a, ReportFormat::Plot, dir.path()).unwrap()).unwrap();
        let p2 = std::fs::read(emit_report(&a, ReportFormat::Plot, dir.path()).unwrap()).unwrap();
        assert!(!p1.is_empty());
        assert_eq!(p1, p2);
        assert!(emit_report(&BenchResult::empty(), ReportFormat::TableText, dir.path()).is_err());
    }
}
