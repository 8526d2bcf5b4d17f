//! A 2-D kinematic manipulation suite rendered to small RGB frames.
//!
//! The workspace is the unit square (y pointing down, as in image rows).
//! Actions are effector velocity commands in `[-1, 1]²`, scaled by
//! [`MAX_SPEED`] per step. Scene entities reuse the synthetic-corpus class
//! appearances: effector = class 0, goal = class 1, block = class 2,
//! slider handle = class 3.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameImage, FrameRef};
use crate::error::{Error, Result};
use crate::render::{class_appearance, Appearance, Canvas};
use crate::seed;

pub const MAX_SPEED: f64 = 0.08;
pub const ACTION_DIM: usize = 2;
const BOUNDS: (f64, f64) = (0.05, 0.95);
const CONTACT: f64 = 0.1;
const GRASP: f64 = 0.06;
const TRACK: (f64, f64) = (0.15, 0.85);
const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.14];
const TRACK_COLOR: [f32; 3] = [0.4, 0.4, 0.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Reach,
    Push,
    OpenSlider,
    CloseSlider,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Reach, TaskId::Push, TaskId::OpenSlider, TaskId::CloseSlider];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::Push => "push",
            TaskId::OpenSlider => "open-slider",
            TaskId::CloseSlider => "close-slider",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?} (expected reach, push, open-slider or close-slider)")))
    }
}

/// Task plus its success tolerance and rendering size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub horizon: usize,
    /// Distance (reach, push) or slider-position threshold.
    pub tolerance: f64,
    pub image_hw: (usize, usize),
}

impl TaskSpec {
    pub fn new(task_id: TaskId) -> Self {
        let (horizon, tolerance) = match task_id {
            TaskId::Reach => (30, 0.08),
            TaskId::Push => (40, 0.07),
            TaskId::OpenSlider => (40, 0.75),
            TaskId::CloseSlider => (40, 0.25),
        };
        Self { task_id, horizon, tolerance, image_hw: (16, 16) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if self.image_hw.0 == 0 || self.image_hw.1 == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        Ok(())
    }

    pub fn all() -> Vec<TaskSpec> {
        TaskId::ALL.into_iter().map(TaskSpec::new).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub spec: TaskSpec,
    pub effector: [f64; 2],
    pub goal: [f64; 2],
    /// Push task only.
    pub block: Option<[f64; 2]>,
    /// Slider tasks only: handle x on a horizontal track at `track_y`.
    pub handle_x: Option<f64>,
    pub track_y: f64,
    pub grasped: bool,
    pub step_count: usize,
    pub success: bool,
    /// Seed the layout was drawn from.
    pub seed: u64,
}

impl EnvState {
    pub fn done(&self) -> bool {
        self.success || self.step_count >= self.spec.horizon
    }

    fn handle(&self) -> Option<[f64; 2]> {
        self.handle_x.map(|x| [x, self.track_y])
    }

    /// Entity positions in a fixed order, for probes: effector, goal, then
    /// block or handle.
    pub fn positions(&self) -> Vec<f64> {
        let mut v = vec![self.effector[0], self.effector[1], self.goal[0], self.goal[1]];
        if let Some(b) = self.block.or(self.handle()) {
            v.extend(b);
        }
        v
    }

    fn check_success(&self) -> bool {
        let t = self.spec.tolerance;
        match self.spec.task_id {
            TaskId::Reach => dist(self.effector, self.goal) < t,
            TaskId::Push => self.block.is_some_and(|b| dist(b, self.goal) < t),
            TaskId::OpenSlider => self.handle_x.is_some_and(|x| x >= t),
            TaskId::CloseSlider => self.handle_x.is_some_and(|x| x <= t),
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn appearance(class: usize, size: f32) -> Appearance {
    Appearance { size, ..class_appearance(class) }
}

pub fn render(state: &EnvState) -> Result<FrameImage> {
    let (h, w) = state.spec.image_hw;
    let mut canvas = Canvas::new(h, w, BACKGROUND);
    let f = |v: f64| v as f32;
    if state.handle_x.is_some() {
        let ty = f(state.track_y);
        canvas.fill_rect(f(TRACK.0), ty - 0.03, f(TRACK.1), ty + 0.03, TRACK_COLOR);
    }
    canvas.draw(&appearance(1, 0.09), f(state.goal[0]), f(state.goal[1]));
    if let Some(b) = state.block {
        canvas.draw(&appearance(2, 0.09), f(b[0]), f(b[1]));
    }
    if let Some(hd) = state.handle() {
        canvas.draw(&appearance(3, 0.08), f(hd[0]), f(hd[1]));
    }
    canvas.draw(&appearance(0, 0.07), f(state.effector[0]), f(state.effector[1]));
    let source = FrameRef { clip_id: format!("{}-{}", state.spec.task_id, state.seed), frame_index: state.step_count as u32 };
    FrameImage::new(h, w, canvas.quantized(), source)
}

/// Seed-determined initial layout and its observation.
pub fn reset(spec: &TaskSpec, seed_: u64) -> Result<(EnvState, FrameImage)> {
    spec.validate()?;
    let mut rng = seed::rng(seed_, &format!("env-{}", spec.task_id));
    let mut state = EnvState {
        spec: *spec,
        effector: [0.5, 0.5],
        goal: [0.5, 0.5],
        block: None,
        handle_x: None,
        track_y: 0.5,
        grasped: false,
        step_count: 0,
        success: false,
        seed: seed_,
    };
    match spec.task_id {
        TaskId::Reach => {
            state.effector = [rng.gen_range(0.15..0.35), rng.gen_range(0.15..0.35)];
            state.goal = [rng.gen_range(0.55..0.85), rng.gen_range(0.55..0.85)];
        }
        TaskId::Push => {
            let block = [rng.gen_range(0.35..0.45), rng.gen_range(0.35..0.65)];
            state.block = Some(block);
            state.goal = [block[0] + rng.gen_range(0.25..0.35), block[1] + rng.gen_range(-0.05..0.05)];
            state.effector = [rng.gen_range(0.1..0.2), rng.gen_range(0.3..0.7)];
        }
        TaskId::OpenSlider | TaskId::CloseSlider => {
            state.track_y = rng.gen_range(0.4..0.6);
            let open = spec.task_id == TaskId::OpenSlider;
            state.handle_x = Some(if open { rng.gen_range(0.2..0.35) } else { rng.gen_range(0.65..0.8) });
            state.goal = [if open { 0.8 } else { 0.2 }, state.track_y];
            let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            state.effector = [rng.gen_range(0.35..0.65), (state.track_y + side * rng.gen_range(0.15..0.25)).clamp(0.1, 0.9)];
        }
    }
    let obs = render(&state)?;
    Ok((state, obs))
}

/// Advance one step. Returns the new observation, success flag, and done
/// flag. Stepping a finished episode is an error.
pub fn step(state: &mut EnvState, action: &[f64]) -> Result<(FrameImage, bool, bool)> {
    if action.len() != ACTION_DIM {
        return Err(Error::shape(format!("{ACTION_DIM}-d action"), format!("{}-d", action.len())));
    }
    if state.done() {
        return Err(Error::invalid("episode already finished"));
    }
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let a = [if a[0].is_nan() { 0.0 } else { a[0] }, if a[1].is_nan() { 0.0 } else { a[1] }];
    let prev = state.effector;
    for i in 0..2 {
        state.effector[i] = (state.effector[i] + MAX_SPEED * a[i]).clamp(BOUNDS.0, BOUNDS.1);
    }
    // A block in contact is carried by the effector's displacement.
    if let Some(b) = state.block {
        if dist(b, state.effector) < CONTACT {
            state.block = Some([
                (b[0] + state.effector[0] - prev[0]).clamp(BOUNDS.0, BOUNDS.1),
                (b[1] + state.effector[1] - prev[1]).clamp(BOUNDS.0, BOUNDS.1),
            ]);
        }
    }
    if let Some(hx) = state.handle_x {
        if !state.grasped && dist([hx, state.track_y], state.effector) < GRASP {
            state.grasped = true;
        }
        if state.grasped {
            state.handle_x = Some(state.effector[0].clamp(TRACK.0, TRACK.1));
        }
    }
    state.step_count += 1;
    state.success = state.check_success();
    Ok((render(state)?, state.success, state.done()))
}

/// Velocity command towards `target`, saturating at full speed.
fn toward(from: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    let d = [(target[0] - from[0]) / MAX_SPEED, (target[1] - from[1]) / MAX_SPEED];
    let n = d[0].abs().max(d[1].abs());
    if n > 1.0 {
        [d[0] / n, d[1] / n]
    } else {
        d
    }
}

/// Greedy geometric controller.
pub fn scripted_expert(state: &EnvState) -> [f64; 2] {
    let e = state.effector;
    match state.spec.task_id {
        TaskId::Reach => toward(e, state.goal),
        TaskId::Push => {
            // Line up behind the block, then drive it onto the goal.
            let b = state.block.expect("push state has a block");
            let d = dist(state.goal, b).max(1e-9);
            let dir = [(state.goal[0] - b[0]) / d, (state.goal[1] - b[1]) / d];
            let rel = [b[0] - e[0], b[1] - e[1]];
            let along = rel[0] * dir[0] + rel[1] * dir[1];
            let lateral = (rel[0] * dir[1] - rel[1] * dir[0]).abs();
            if along > 0.08 && lateral < 0.03 {
                toward(e, [state.goal[0] - rel[0], state.goal[1] - rel[1]])
            } else {
                toward(e, [b[0] - 0.115 * dir[0], b[1] - 0.115 * dir[1]])
            }
        }
        TaskId::OpenSlider | TaskId::CloseSlider => {
            let hx = state.handle_x.expect("slider state has a handle");
            if !state.grasped {
                toward(e, [hx, state.track_y])
            } else {
                let target_x = if state.spec.task_id == TaskId::OpenSlider { state.spec.tolerance + 0.05 } else { state.spec.tolerance - 0.05 };
                toward(e, [target_x, state.track_y])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub observation: FrameImage,
    pub action: [f64; 2],
    /// Simulator state at observation time.
    pub state: EnvState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task_id: TaskId,
    pub seed: u64,
    pub steps: Vec<DemoStep>,
    pub success: bool,
}

/// Roll out the scripted expert from `reset(spec, seed)`.
pub fn expert_rollout(spec: &TaskSpec, seed_: u64) -> Result<Demonstration> {
    let (mut state, mut obs) = reset(spec, seed_)?;
    let mut steps = Vec::with_capacity(spec.horizon);
    while !state.done() {
        let action = scripted_expert(&state);
        let before = state.clone();
        let (next, _, _) = step(&mut state, &action)?;
        steps.push(DemoStep { observation: obs, action, state: before });
        obs = next;
    }
    Ok(Demonstration { task_id: spec.task_id, seed: seed_, steps, success: state.success })
}

/// `n` successful expert demonstrations; demo `i` starts from the layout
/// seeded by `derive_seed(seed, "demo-i")`.
pub fn collect_demos(spec: &TaskSpec, n: usize, seed_: u64) -> Result<Vec<Demonstration>> {
    if n == 0 {
        return Err(Error::invalid("need at least one demonstration"));
    }
    (0..n)
        .map(|i| {
            let s = seed::derive_seed(seed_, &format!("demo-{i}"));
            let d = expert_rollout(spec, s)?;
            if !d.success {
                return Err(Error::ExpertFailure(format!("{} from layout seed {s} did not succeed in {} steps", spec.task_id, spec.horizon)));
            }
            Ok(d)
        })
        .collect()
}

const DEMO_MAGIC: &[u8; 4] = b"VPDM";
const DEMO_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoHeader {
    version: u32,
    spec: TaskSpec,
    demos: Vec<DemoMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoMeta {
    seed: u64,
    success: bool,
    actions: Vec<[f64; 2]>,
    states: Vec<EnvState>,
}

/// Container: magic, version, JSON header (task spec, per-demo actions and
/// simulator states), then each frame as a length-prefixed PNG.
pub fn save_demos(path: &Path, spec: &TaskSpec, demos: &[Demonstration]) -> Result<()> {
    let header = DemoHeader {
        version: DEMO_VERSION,
        spec: *spec,
        demos: demos
            .iter()
            .map(|d| DemoMeta {
                seed: d.seed,
                success: d.success,
                actions: d.steps.iter().map(|s| s.action).collect(),
                states: d.steps.iter().map(|s| s.state.clone()).collect(),
            })
            .collect(),
    };
    let hjson = crate::canon::canonical_json(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(DEMO_MAGIC);
    out.extend_from_slice(&DEMO_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(hjson.as_bytes());
    for d in demos {
        for s in &d.steps {
            let f = &s.observation;
            let bytes: Vec<u8> = f.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
            let mut png = Vec::new();
            RgbImage::from_raw(f.w as u32, f.h as u32, bytes)
                .expect("buffer size")
                .write_to(&mut std::io::Cursor::new(&mut png), image::ImageOutputFormat::Png)?;
            out.extend_from_slice(&(png.len() as u32).to_le_bytes());
            out.extend_from_slice(&png);
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_demos(path: &Path) -> Result<(TaskSpec, Vec<Demonstration>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != DEMO_MAGIC {
        return Err(bad("not a demonstration file"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != DEMO_VERSION {
        return Err(bad("unsupported demonstration file version"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: DemoHeader = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
    let mut off = 12 + hlen;
    let mut demos = Vec::with_capacity(header.demos.len());
    for meta in header.demos {
        if meta.actions.len() != meta.states.len() {
            return Err(bad("action and state lengths differ"));
        }
        let mut steps = Vec::with_capacity(meta.actions.len());
        for (t, (&action, state)) in meta.actions.iter().zip(meta.states).enumerate() {
            let len = bytes.get(off..off + 4).ok_or_else(|| bad("truncated frame table"))?;
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let png = bytes.get(off + 4..off + 4 + len).ok_or_else(|| bad("truncated frame"))?;
            off += 4 + len;
            let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let pixels = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
            let source = FrameRef { clip_id: format!("{}-{}", header.spec.task_id, meta.seed), frame_index: t as u32 };
            steps.push(DemoStep { observation: FrameImage::new(h, w, pixels, source)?, action, state });
        }
        demos.push(Demonstration { task_id: header.spec.task_id, seed: meta.seed, steps, success: meta.success });
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after the last frame"));
    }
    Ok((header.spec, demos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_and_seed_sensitive() {
        for spec in TaskSpec::all() {
            let (a, oa) = reset(&spec, 4).unwrap();
            let (b, ob) = reset(&spec, 4).unwrap();
            assert_eq!(a, b);
            assert_eq!(oa.pixels, ob.pixels);
            assert_eq!((oa.h, oa.w), spec.image_hw);
            let (c, _) = reset(&spec, 5).unwrap();
            assert_ne!(a.positions(), c.positions());
        }
    }

    #[test]
    fn zero_action_keeps_effector_still() {
        let (mut s, _) = reset(&TaskSpec::new(TaskId::Reach), 1).unwrap();
        let before = s.effector;
        step(&mut s, &[0.0, 0.0]).unwrap();
        assert_eq!(s.effector, before);
        assert_eq!(s.step_count, 1);
        assert!(step(&mut s, &[0.0]).is_err());
    }

    #[test]
    fn actions_are_clipped() {
        let (mut s, _) = reset(&TaskSpec::new(TaskId::Reach), 1).unwrap();
        s.effector = [0.5, 0.5];
        step(&mut s, &[5.0, -5.0]).unwrap();
        assert!((s.effector[0] - 0.58).abs() < 1e-12 && (s.effector[1] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn success_ends_the_episode() {
        let spec = TaskSpec::new(TaskId::Reach);
        let (mut s, _) = reset(&spec, 2).unwrap();
        s.effector = [s.goal[0] - 0.05, s.goal[1]];
        let (_, success, done) = step(&mut s, &[0.5, 0.0]).unwrap();
        assert!(success && done);
        assert!(step(&mut s, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn horizon_exhaustion_fails() {
        let spec = TaskSpec { horizon: 3, ..TaskSpec::new(TaskId::Push) };
        let (mut s, _) = reset(&spec, 2).unwrap();
        let mut last = (false, false);
        for _ in 0..3 {
            let (_, a, b) = step(&mut s, &[0.0, 0.0]).unwrap();
            last = (a, b);
        }
        assert_eq!(last, (false, true));
    }

    #[test]
    fn expert_is_idle_at_goal() {
        let (mut s, _) = reset(&TaskSpec::new(TaskId::Reach), 3).unwrap();
        s.effector = s.goal;
        let a = scripted_expert(&s);
        assert!(a[0].hypot(a[1]) < 1e-12);
    }

    #[test]
    fn expert_solves_every_task() {
        for spec in TaskSpec::all() {
            for sd in 0..100 {
                let d = expert_rollout(&spec, sd).unwrap();
                assert!(d.success, "{} seed {sd}", spec.task_id);
                assert!(d.steps.len() <= spec.horizon);
            }
        }
    }

    #[test]
    fn demo_files_round_trip_and_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::new(TaskId::Push);
        let demos = collect_demos(&spec, 5, 11).unwrap();
        assert_eq!(demos.len(), 5);
        assert!(demos.iter().all(|d| d.success));
        let (pa, pb) = (dir.path().join("a.demo"), dir.path().join("b.demo"));
        save_demos(&pa, &spec, &demos).unwrap();
        save_demos(&pb, &spec, &collect_demos(&spec, 5, 11).unwrap()).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        let (spec2, back) = load_demos(&pa).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(back, demos);
        assert!(collect_demos(&spec, 0, 1).is_err());
    }

    #[test]
    fn unknown_task_is_rejected() {
        assert!("stack".parse::<TaskId>().is_err());
        assert_eq!("open-slider".parse::<TaskId>().unwrap(), TaskId::OpenSlider);
    }
}
