//! Kinematic 2D workspace where a robot gathers parts at an assembly point
//! under directives from a planner, one directive per scene snapshot.

use crate::corpus::{Corpus, ConnectionSet, FurnitureItem};
use crate::partviz::{text_width, RasterImage, RenderError};
use crate::planner::{
    build_prompt, complete, extract_object, fill, item_rng, noisy_connections, part_index, templates, ImageAttachment,
    ImageSource, ParseTier, PlannerError, PredictionMethod, PromptBundle, ProviderError, ProviderSpec, Section,
};
use crate::retrieval::{RetrievalContext, RetrievalError};
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

pub const WORKSPACE_SIZE: f64 = 10.0;
pub const ASSEMBLY_POINT: [f64; 2] = [5.0, 5.0];
pub const ROBOT_START: [f64; 2] = [1.0, 1.0];
pub const ROBOT_SPEED: f64 = 0.5;
pub const PART_SIZE: f64 = 0.1;
pub const MIN_PART_SPACING: f64 = 1.0;
pub const MIN_ASSEMBLY_CLEARANCE: f64 = 1.5;
/// Delivered parts sit on a ring of this radius around the assembly point.
pub const DELIVERY_RING: f64 = 1.0;
pub const ASSEMBLY_RADIUS: f64 = 1.2;
const PLACEMENT_MARGIN: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 10_000;
pub const DEFAULT_MAX_INVALID: usize = 3;
const SCENE_PX: u32 = 400;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("item has no parts")]
    NoParts,
    #[error("could not place {part_count} parts with the required spacing")]
    Placement { part_count: u32 },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PlannerError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl Hsv {
    pub fn to_rgb(self) -> [u8; 3] {
        let c = self.v * self.s;
        let hp = (self.h.rem_euclid(360.0)) / 60.0;
        let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
        let (r, g, b) = match hp as u32 {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = self.v - c;
        [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robot {
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub carried: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartState {
    pub id: u32,
    pub label: String,
    pub position: [f64; 2],
    pub color: Hsv,
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub width: f64,
    pub height: f64,
    pub robot: Robot,
    pub parts: Vec<PartState>,
    pub assembly_point: [f64; 2],
    pub tick: u64,
    pub elapsed_s: f64,
    pub delivered_order: Vec<u32>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Seeded initial world: parts scattered with minimum spacing, robot parked
/// in the corner facing +x.
pub fn init_world(item: &FurnitureItem, seed: u64) -> Result<WorldState, SimError> {
    let n = item.part_count;
    if n == 0 {
        return Err(SimError::NoParts);
    }
    let mut rng = item_rng(seed, &item.id);
    let mut placed: Vec<[f64; 2]> = Vec::with_capacity(n as usize);
    let (lo, hi) = (PLACEMENT_MARGIN, WORKSPACE_SIZE - PLACEMENT_MARGIN);
    for _ in 0..n {
        let spot = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let p = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
            let clear = dist(p, ASSEMBLY_POINT) >= MIN_ASSEMBLY_CLEARANCE
                && placed.iter().all(|q| dist(p, *q) >= MIN_PART_SPACING);
            clear.then_some(p)
        });
        placed.push(spot.ok_or(SimError::Placement { part_count: n })?);
    }
    let parts = placed
        .into_iter()
        .enumerate()
        .map(|(i, position)| PartState {
            id: i as u32,
            label: i.to_string(),
            position,
            color: Hsv { h: 360.0 * i as f64 / n as f64, s: 0.8, v: 0.9 },
            delivered: false,
        })
        .collect();
    Ok(WorldState {
        width: WORKSPACE_SIZE,
        height: WORKSPACE_SIZE,
        robot: Robot { position: ROBOT_START, heading: 0.0, speed: ROBOT_SPEED, carried: None },
        parts,
        assembly_point: ASSEMBLY_POINT,
        tick: 0,
        elapsed_s: 0.0,
        delivered_order: Vec::new(),
    })
}

impl WorldState {
    pub fn part_count(&self) -> u32 {
        self.parts.len() as u32
    }

    pub fn delivered_count(&self) -> usize {
        self.delivered_order.len()
    }

    pub fn all_delivered(&self) -> bool {
        self.delivered_order.len() == self.parts.len()
    }

    /// Ring slot for the `index`-th delivered part.
    pub fn slot_position(&self, index: usize) -> [f64; 2] {
        let theta = std::f64::consts::TAU * index as f64 / self.parts.len().max(1) as f64;
        [
            self.assembly_point[0] + DELIVERY_RING * theta.cos(),
            self.assembly_point[1] + DELIVERY_RING * theta.sin(),
        ]
    }

    fn drive_to(&mut self, to: [f64; 2]) -> f64 {
        let from = self.robot.position;
        let d = dist(from, to);
        if d > 0.0 {
            self.robot.heading = (to[1] - from[1]).atan2(to[0] - from[0]);
        }
        self.robot.position = to;
        self.elapsed_s += d / self.robot.speed;
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Directive {
    #[serde(rename = "fetch")]
    FetchPart { part: u32 },
    Complete,
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(self).expect("directive json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "primitive", rename_all = "snake_case")]
pub enum PrimitiveAction {
    NavigateToPart { part: u32, to: [f64; 2], distance: f64 },
    Pick { part: u32 },
    NavigateToAssembly { part: u32, to: [f64; 2], distance: f64 },
    Place { part: u32, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvalidDirective {
    #[error("part {part} was already delivered")]
    AlreadyDelivered { part: u32 },
    #[error("part {part} out of range for {part_count} parts")]
    OutOfRange { part: i64, part_count: u32 },
    #[error("unparsable reply")]
    Unparsable,
}

/// Applies one directive. Invalid directives leave the world untouched.
pub fn step_episode(
    world: &WorldState,
    directive: Directive,
) -> Result<(WorldState, Vec<PrimitiveAction>), InvalidDirective> {
    let part = match directive {
        Directive::Complete => return Ok((world.clone(), Vec::new())),
        Directive::FetchPart { part } => part,
    };
    let state = world.parts.get(part as usize).ok_or(InvalidDirective::OutOfRange {
        part: part as i64,
        part_count: world.part_count(),
    })?;
    if state.delivered {
        return Err(InvalidDirective::AlreadyDelivered { part });
    }
    let mut next = world.clone();
    let target = state.position;
    let slot = next.delivered_order.len();
    let slot_pos = next.slot_position(slot);

    let d1 = next.drive_to(target);
    next.robot.carried = Some(part);
    let d2 = next.drive_to(slot_pos);
    next.robot.carried = None;
    let placed = &mut next.parts[part as usize];
    placed.position = slot_pos;
    placed.delivered = true;
    next.delivered_order.push(part);

    Ok((
        next,
        vec![
            PrimitiveAction::NavigateToPart { part, to: target, distance: d1 },
            PrimitiveAction::Pick { part },
            PrimitiveAction::NavigateToAssembly { part, to: slot_pos, distance: d2 },
            PrimitiveAction::Place { part, slot },
        ],
    ))
}

fn action_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)"?action"?\s*[:=]\s*"?(fetch|complete)"#).expect("regex"))
}

fn part_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)"?part"?\s*[:=]\s*"?(?:part_?)?(-?\d+)"#).expect("regex"))
}

/// Parses a reply into a directive with the same tiered fallback as
/// connection predictions. Range checks against the world happen later.
pub fn parse_directive(raw: &str) -> Result<(ParseTier, Directive), i64> {
    let decode = |m: &serde_json::Map<String, serde_json::Value>| -> Option<Result<Directive, i64>> {
        match m.get("action")?.as_str()?.trim().to_ascii_lowercase().as_str() {
            "complete" => Some(Ok(Directive::Complete)),
            "fetch" => {
                let idx = part_index(m.get("part")?)?;
                Some(u32::try_from(idx).map(|part| Directive::FetchPart { part }).map_err(|_| idx))
            }
            _ => None,
        }
    };
    if let Some((tier, m)) = extract_object(raw, "action", |m| decode(m).is_some()) {
        return decode(&m).expect("accepted").map(|d| (tier, d));
    }
    let action = action_regex().captures(raw).map(|c| c[1].to_ascii_lowercase());
    match action.as_deref() {
        Some("complete") => Ok((ParseTier::Regex, Directive::Complete)),
        Some(_) => {
            let idx: i64 = part_regex()
                .captures(raw)
                .and_then(|c| c[1].parse().ok())
                .ok_or(-1)?;
            u32::try_from(idx).map(|part| (ParseTier::Regex, Directive::FetchPart { part })).map_err(|_| idx)
        }
        None => Err(-1),
    }
}

/// What the planner sees at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSnapshot {
    pub tick: u64,
    pub structured: WorldState,
    pub rendered: Option<RasterImage>,
}

impl SceneSnapshot {
    pub fn capture(world: &WorldState, render: bool) -> Self {
        Self { tick: world.tick, structured: world.clone(), rendered: render.then(|| render_scene(world)) }
    }

    pub fn structured_json(&self) -> String {
        serde_json::to_string_pretty(&self.structured).expect("world json")
    }
}

fn to_px(world: &WorldState, p: [f64; 2]) -> (i64, i64) {
    let s = SCENE_PX as f64 / world.width;
    ((p[0] * s).round() as i64, ((world.height - p[1]) * s).round() as i64)
}

/// Top-down view: colored numbered squares, the assembly ring, and the robot.
/// Squares are drawn larger than the physical parts so labels stay legible.
pub fn render_scene(world: &WorldState) -> RasterImage {
    let mut img = RasterImage::new(SCENE_PX, SCENE_PX, [255, 255, 255]);
    let px_per_m = SCENE_PX as f64 / world.width;
    let (cx, cy) = to_px(world, world.assembly_point);
    let r = ASSEMBLY_RADIUS * px_per_m;
    let ring: Vec<(i64, i64)> = (0..=48)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / 48.0;
            (cx + (r * t.cos()).round() as i64, cy + (r * t.sin()).round() as i64)
        })
        .collect();
    for w in ring.windows(2) {
        img.draw_line(w[0], w[1], [160, 160, 160]);
    }
    for part in &world.parts {
        // delivered parts crowd the ring, so they are drawn smaller
        let half = if part.delivered { 6 } else { 10 };
        let (x, y) = to_px(world, part.position);
        img.fill_rect(x - half, y - half, 2 * half, 2 * half, part.color.to_rgb());
        let tw = text_width(&part.label, 1);
        img.draw_text(x - tw / 2, y - 3, &part.label, 1, [0, 0, 0]);
    }
    let (rx, ry) = to_px(world, world.robot.position);
    img.fill_rect(rx - 6, ry - 6, 12, 12, [20, 20, 20]);
    let h = world.robot.heading;
    img.draw_line((rx, ry), (rx + (14.0 * h.cos()).round() as i64, ry - (14.0 * h.sin()).round() as i64), [20, 20, 20]);
    img
}

/// Breadth-first delivery order over `graph`: components by smallest part,
/// neighbors in ascending order. Always connectivity-prefix feasible.
pub fn plan_order(graph: &ConnectionSet, part_count: u32) -> Vec<u32> {
    let mut adjacency = vec![BTreeSet::new(); part_count as usize];
    for c in graph.iter().filter(|c| c.b() < part_count) {
        adjacency[c.a() as usize].insert(c.b());
        adjacency[c.b() as usize].insert(c.a());
    }
    let mut seen = vec![false; part_count as usize];
    let mut order = Vec::with_capacity(part_count as usize);
    for start in 0..part_count {
        if seen[start as usize] {
            continue;
        }
        seen[start as usize] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            order.push(p);
            for &q in &adjacency[p as usize] {
                if !std::mem::replace(&mut seen[q as usize], true) {
                    queue.push_back(q);
                }
            }
        }
    }
    order
}

fn components(graph: &ConnectionSet, part_count: u32) -> Vec<usize> {
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..part_count as usize).collect();
    for c in graph.iter().filter(|c| c.b() < part_count) {
        let (ra, rb) = (root(&mut parent, c.a() as usize), root(&mut parent, c.b() as usize));
        parent[ra.max(rb)] = ra.min(rb);
    }
    (0..part_count as usize).map(|i| root(&mut parent, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderViolation {
    /// Position in the delivery order.
    pub position: usize,
    pub part: u32,
}

/// Deliveries that attach to nothing already delivered although an earlier
/// delivery belongs to the same connected component of `gt`.
pub fn prefix_violations(order: &[u32], gt: &ConnectionSet, part_count: u32) -> Vec<OrderViolation> {
    let comp = components(gt, part_count);
    let mut delivered = BTreeSet::new();
    let mut started = BTreeSet::new();
    let mut out = Vec::new();
    for (position, &part) in order.iter().enumerate() {
        let Some(&c) = comp.get(part as usize) else { continue };
        let attached = gt.iter().any(|e| e.contains(part) && delivered.contains(&(e.a() + e.b() - part)));
        if started.contains(&c) && !attached {
            out.push(OrderViolation { position, part });
        }
        started.insert(c);
        delivered.insert(part);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Partial { delivered: usize },
    Failure { reason: String },
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => f.write_str("Success"),
            Outcome::Partial { delivered } => write!(f, "Partial ({delivered} delivered)"),
            Outcome::Failure { reason } => write!(f, "Failure ({reason})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Completed,
    BudgetExhausted,
    TooManyInvalid,
    ProviderError { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectiveRecord {
    pub tick: u64,
    pub directive: Directive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidRecord {
    pub tick: u64,
    pub error: InvalidDirective,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveRecord {
    pub tick: u64,
    #[serde(flatten)]
    pub action: PrimitiveAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSize {
    pub tick: u64,
    pub text_bytes: usize,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub item_id: String,
    pub method: PredictionMethod,
    pub seed: u64,
    pub part_count: u32,
    pub directives: Vec<DirectiveRecord>,
    pub invalid: Vec<InvalidRecord>,
    pub primitive_actions: Vec<PrimitiveRecord>,
    pub snapshots: Vec<WorldState>,
    pub prompt_sizes: Vec<PromptSize>,
    pub end_reason: EndReason,
    pub outcome: Outcome,
    pub violations: Vec<OrderViolation>,
}

impl EpisodeLog {
    pub fn delivered_order(&self) -> Vec<u32> {
        self.primitive_actions
            .iter()
            .filter_map(|r| match r.action {
                PrimitiveAction::Place { part, .. } => Some(part),
                _ => None,
            })
            .collect()
    }

    /// One JSON object per line, grouped by tick: snapshot, directive,
    /// invalid-reply notes, primitives. The last line is the summary.
    pub fn to_jsonl(&self) -> String {
        use serde_json::json;
        let mut lines = Vec::new();
        for snap in &self.snapshots {
            let t = snap.tick;
            lines.push(json!({"type": "snapshot", "tick": t, "world": snap}));
            for d in self.directives.iter().filter(|d| d.tick == t) {
                lines.push(json!({"type": "directive", "tick": t, "directive": d.directive}));
            }
            for inv in self.invalid.iter().filter(|d| d.tick == t) {
                lines.push(json!({"type": "invalid", "tick": t, "error": inv.error, "raw_text": inv.raw_text}));
            }
            for p in self.primitive_actions.iter().filter(|p| p.tick == t) {
                lines.push(json!({"type": "primitive", "tick": t, "action": p.action}));
            }
        }
        lines.push(json!({
            "type": "summary",
            "item_id": self.item_id,
            "method": self.method,
            "seed": self.seed,
            "part_count": self.part_count,
            "end_reason": self.end_reason,
            "outcome": self.outcome,
            "violations": self.violations,
            "primitive_count": self.primitive_actions.len(),
            "prompt_sizes": self.prompt_sizes,
        }));
        lines.into_iter().map(|l| l.to_string() + "\n").collect()
    }

    /// Writes one PPM frame per snapshot as `frame_0000.ppm`, ...
    pub fn write_frames(&self, dir: &Path) -> Result<usize, SimError> {
        fs::create_dir_all(dir).map_err(|source| SimError::Io { path: dir.to_path_buf(), source })?;
        for snap in &self.snapshots {
            render_scene(snap).write_ppm(&dir.join(format!("frame_{:04}.ppm", snap.tick)))?;
        }
        Ok(self.snapshots.len())
    }
}

/// Success needs every part delivered in a connectivity-prefix order;
/// any delivery at all short of that is partial.
pub fn classify_outcome(log: &EpisodeLog, item: &FurnitureItem) -> (Outcome, Vec<OrderViolation>) {
    let order = log.delivered_order();
    if order.is_empty() {
        return (Outcome::Failure { reason: "no progress".into() }, Vec::new());
    }
    let violations = prefix_violations(&order, &item.ground_truth, item.part_count);
    let complete = order.len() == item.part_count as usize;
    let outcome = if complete && violations.is_empty() {
        Outcome::Success
    } else {
        Outcome::Partial { delivered: order.len() }
    };
    (outcome, violations)
}

/// Produces the raw reply text for one tick.
pub trait DirectiveSource {
    fn reply(&mut self, item: &FurnitureItem, scene: &SceneSnapshot, prompt: &PromptBundle) -> Result<String, ProviderError>;

    /// Whether the scene image should be rendered and attached.
    fn wants_render(&self) -> bool {
        false
    }
}

/// Replays fixed replies in order, then declares completion.
#[derive(Debug, Clone, Default)]
pub struct ScriptedSource {
    replies: VecDeque<String>,
}

impl ScriptedSource {
    pub fn from_directives(directives: &[Directive]) -> Self {
        Self { replies: directives.iter().map(Directive::to_string).collect() }
    }

    pub fn from_raw<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self { replies: replies.into_iter().map(Into::into).collect() }
    }
}

impl DirectiveSource for ScriptedSource {
    fn reply(&mut self, _: &FurnitureItem, _: &SceneSnapshot, _: &PromptBundle) -> Result<String, ProviderError> {
        Ok(self.replies.pop_front().unwrap_or_else(|| Directive::Complete.to_string()))
    }
}

/// Drives the loop from a configured provider. The mocks plan a
/// breadth-first order over ground truth (or its noisy copy) and fetch the
/// first undelivered part; real providers get the full multimodal prompt.
#[derive(Debug, Clone)]
pub struct ProviderSource {
    pub provider: ProviderSpec,
}

impl DirectiveSource for ProviderSource {
    fn reply(&mut self, item: &FurnitureItem, scene: &SceneSnapshot, prompt: &PromptBundle) -> Result<String, ProviderError> {
        let graph = match &self.provider {
            ProviderSpec::OracleMock => item.ground_truth.clone(),
            ProviderSpec::NoisyMock { drop_rate, add_rate, seed } => {
                noisy_connections(item, *drop_rate, *add_rate, *seed)
            }
            other => return complete(other, prompt, item),
        };
        let world = &scene.structured;
        let next = plan_order(&graph, item.part_count).into_iter().find(|&p| !world.parts[p as usize].delivered);
        Ok(match next {
            Some(part) => Directive::FetchPart { part },
            None => Directive::Complete,
        }
        .to_string())
    }

    fn wants_render(&self) -> bool {
        matches!(self.provider, ProviderSpec::Http(_) | ProviderSpec::Replay { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub seed: u64,
    /// Maximum number of planner replies, valid or not.
    pub budget: usize,
    pub max_consecutive_invalid: usize,
}

impl EpisodeConfig {
    pub fn new(seed: u64, budget: usize) -> Self {
        Self { seed, budget, max_consecutive_invalid: DEFAULT_MAX_INVALID }
    }

    /// Budget that lets a perfect planner fetch every part, declare
    /// completion, and absorb a few bad replies.
    pub fn default_budget(part_count: u32) -> usize {
        2 * part_count as usize + 5
    }
}

/// Execution prompt for one tick: the one-time retrieval material plus the
/// current scene.
fn scene_prompt(base: &PromptBundle, scene: &SceneSnapshot) -> Result<PromptBundle, SimError> {
    let t = &templates().execution;
    let delivered = &scene.structured.delivered_order;
    let delivered = if delivered.is_empty() {
        "none".to_string()
    } else {
        delivered.iter().map(|p| format!("part_{p}")).collect::<Vec<_>>().join(", ")
    };
    let mut sections: Vec<Section> = base.user_sections.iter().filter(|s| s.label != "schema").cloned().collect();
    sections.push(Section {
        label: "scene".into(),
        text: fill(
            &t.scene,
            &[("tick", scene.tick.to_string()), ("scene", scene.structured_json()), ("delivered", delivered)],
        ),
    });
    sections.push(Section { label: "schema".into(), text: fill(&t.schema, &[]) });
    let mut images = base.images.clone();
    if let Some(img) = &scene.rendered {
        images.push(ImageAttachment {
            caption: fill(&t.scene_caption, &[("tick", scene.tick.to_string())]),
            source: ImageSource::Inline { mime: "image/png".into(), data: img.to_png()? },
        });
    }
    Ok(PromptBundle {
        system_text: t.system.trim().to_string(),
        user_sections: sections,
        images,
        decode_params: base.decode_params,
    })
}

/// Runs one closed-loop episode: retrieve once, then alternate scene
/// snapshot, planner reply and execution until completion, budget
/// exhaustion, or too many consecutive invalid replies.
pub fn run_rra_loop(
    item: &FurnitureItem,
    corpus: &Corpus,
    retrieval: &RetrievalContext,
    method: PredictionMethod,
    source: &mut dyn DirectiveSource,
    config: &EpisodeConfig,
) -> Result<EpisodeLog, SimError> {
    let retrieved = retrieval.retrieve_for(method, item, corpus)?;
    let base = build_prompt(item, method, retrieved.as_ref(), corpus)?;
    let mut world = init_world(item, config.seed)?;
    let mut log = EpisodeLog {
        item_id: item.id.clone(),
        method,
        seed: config.seed,
        part_count: item.part_count,
        directives: Vec::new(),
        invalid: Vec::new(),
        primitive_actions: Vec::new(),
        snapshots: Vec::new(),
        prompt_sizes: Vec::new(),
        end_reason: EndReason::BudgetExhausted,
        outcome: Outcome::Failure { reason: "no progress".into() },
        violations: Vec::new(),
    };
    let mut consecutive_invalid = 0;

    for _ in 0..config.budget {
        let scene = SceneSnapshot::capture(&world, source.wants_render());
        let prompt = scene_prompt(&base, &scene)?;
        log.snapshots.push(world.clone());
        log.prompt_sizes.push(PromptSize { tick: world.tick, text_bytes: prompt.text_len(), images: prompt.images.len() });

        let raw = match source.reply(item, &scene, &prompt) {
            Ok(raw) => raw,
            Err(e) => {
                log.end_reason = EndReason::ProviderError { message: e.to_string() };
                break;
            }
        };
        let tick = world.tick;
        world.tick += 1;
        let result = match parse_directive(&raw) {
            Ok((_, directive)) => {
                log.directives.push(DirectiveRecord { tick, directive });
                if directive == Directive::Complete {
                    log.end_reason = EndReason::Completed;
                    break;
                }
                step_episode(&world, directive)
            }
            Err(-1) => Err(InvalidDirective::Unparsable),
            Err(part) => Err(InvalidDirective::OutOfRange { part, part_count: item.part_count }),
        };
        match result {
            Ok((next, actions)) => {
                world = next;
                log.primitive_actions.extend(actions.into_iter().map(|action| PrimitiveRecord { tick, action }));
                consecutive_invalid = 0;
            }
            Err(error) => {
                log.invalid.push(InvalidRecord { tick, error, raw_text: raw });
                consecutive_invalid += 1;
                if consecutive_invalid >= config.max_consecutive_invalid {
                    log.end_reason = EndReason::TooManyInvalid;
                    break;
                }
            }
        }
    }
    log.snapshots.push(world);

    let (outcome, violations) = classify_outcome(&log, item);
    log.violations = violations;
    log.outcome = match &log.end_reason {
        EndReason::ProviderError { .. } => Outcome::Failure { reason: "provider".into() },
        _ => outcome,
    };
    Ok(log)
}
