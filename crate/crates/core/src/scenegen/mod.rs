//! Deterministic synthetic interaction scenes.
//!
//! A scene holds agents (drawn as circles with an orientation tick) and
//! objects (class-keyed shapes). Interaction labels are never sampled
//! independently of geometry: [`relation`] decides the verb of every
//! agent/object pair from positions, sizes, orientation and object class.
//! The generator samples the intended verbs from a [`DifficultyProfile`],
//! places entities so that the intended relations hold, and rejects layouts
//! where any other pair would also relate.

mod io;
mod render;

pub use io::{read_jsonl, write_jsonl, DatasetHeader, SCHEMA};
pub use render::{render, Raster};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point};

pub const OBJECT_CLASSES: [&str; 6] = ["ball", "cup", "bike", "chair", "box", "screen"];
pub const VERBS: [&str; 8] = [
    "hold",
    "ride",
    "sit_on",
    "push",
    "kick",
    "look_at",
    "approach",
    "turn_away",
];
pub const NUM_OBJECT_CLASSES: usize = OBJECT_CLASSES.len();
pub const NUM_VERBS: usize = VERBS.len();

pub mod verb {
    pub const HOLD: usize = 0;
    pub const RIDE: usize = 1;
    pub const SIT_ON: usize = 2;
    pub const PUSH: usize = 3;
    pub const KICK: usize = 4;
    pub const LOOK_AT: usize = 5;
    pub const APPROACH: usize = 6;
    pub const TURN_AWAY: usize = 7;
}

pub mod object {
    pub const BALL: usize = 0;
    pub const CUP: usize = 1;
    pub const BIKE: usize = 2;
    pub const CHAIR: usize = 3;
    pub const BOX: usize = 4;
    pub const SCREEN: usize = 5;
}

/// Verbs decided by orientation and distance alone, without contact.
pub const SUBTLE_VERBS: [usize; 3] = [verb::LOOK_AT, verb::APPROACH, verb::TURN_AWAY];

pub fn is_subtle(v: usize) -> bool {
    SUBTLE_VERBS.contains(&v)
}

/// Object classes a verb can take.
pub fn admissible_objects(v: usize) -> &'static [usize] {
    use object::*;
    const ALL: [usize; 6] = [BALL, CUP, BIKE, CHAIR, BOX, SCREEN];
    match v {
        verb::HOLD => &[BALL, CUP],
        verb::RIDE => &[BIKE],
        verb::SIT_ON => &[CHAIR],
        verb::PUSH => &[BOX, CHAIR],
        verb::KICK => &[BALL],
        _ => &ALL,
    }
}

const FACING_TOLERANCE: f64 = 20.0 * PI / 180.0;
const AWAY_THRESHOLD: f64 = 150.0 * PI / 180.0;
const NEAR: f64 = 0.3;
const FAR: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("scene count must be positive")]
    NoScenes,
    #[error("dataset I/O: {0}")]
    Io(String),
    #[error("dataset format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Agent,
    Object,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    pub class_id: usize,
    pub center: Point,
    /// Width and height in normalized units.
    pub size: [f64; 2],
    /// Facing direction in radians (agents only; `y` grows downward).
    pub orientation: f64,
}

impl Entity {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.center, self.size[0], self.size[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub human_idx: usize,
    pub object_idx: usize,
    pub verb_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Disjoint seed ranges per split.
    fn seed_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub triplets: Vec<HoiTriplet>,
    pub split: Split,
}

/// Supervision target with resolved boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTriplet {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
}

impl SceneRecord {
    pub fn ground_truth(&self) -> Vec<GroundTruthTriplet> {
        self.triplets
            .iter()
            .map(|t| {
                let o = &self.entities[t.object_idx];
                GroundTruthTriplet {
                    human_box: self.entities[t.human_idx].bbox(),
                    object_box: o.bbox(),
                    object_class: o.class_id,
                    verb: t.verb_id,
                }
            })
            .collect()
    }

    pub fn object_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entities
            .iter()
            .filter(|e| e.kind == EntityKind::Object)
            .map(|e| e.class_id)
    }

    /// Checks index validity, verb range and that every box lies in the unit square.
    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.entities.len();
        for t in &self.triplets {
            let ok = t.human_idx < n
                && t.object_idx < n
                && self.entities[t.human_idx].kind == EntityKind::Agent
                && self.entities[t.object_idx].kind == EntityKind::Object
                && t.verb_id < NUM_VERBS;
            if !ok {
                return Err(SceneError::Format(format!("bad triplet {t:?}")));
            }
        }
        for e in &self.entities {
            let b = e.bbox();
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > 1.0 || b.y2 > 1.0 {
                return Err(SceneError::Format(format!("box outside unit square: {b:?}")));
            }
        }
        Ok(())
    }
}

/// Target statistics of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    /// Relative frequency of each verb; normalized on use.
    pub verb_weights: Vec<f64>,
    /// Interacting pairs per scene are drawn uniformly from `1..=max_pairs`.
    pub max_pairs: usize,
    /// Probability of one extra object that takes part in no interaction.
    pub distractor_prob: f64,
    /// Fraction of triplets whose verb is replaced by a different random verb.
    pub label_noise: f64,
}

impl Default for DifficultyProfile {
    fn default() -> Self {
        Self {
            verb_weights: vec![3.0, 3.0, 0.5, 3.0, 0.5, 2.0, 2.0, 2.0],
            max_pairs: 2,
            distractor_prob: 0.3,
            label_noise: 0.0,
        }
    }
}

impl DifficultyProfile {
    /// Default profile with every subtle verb removed.
    pub fn overt_only() -> Self {
        let mut p = Self::default();
        for &v in &SUBTLE_VERBS {
            p.verb_weights[v] = 0.0;
        }
        p
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidProfile(m.to_string()));
        if self.verb_weights.len() != NUM_VERBS {
            return bad("verb_weights must list every verb");
        }
        if self.verb_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("verb weights must be finite and nonnegative");
        }
        if self.verb_weights.iter().sum::<f64>() <= 0.0 {
            return bad("at least one verb weight must be positive");
        }
        if !(1..=3).contains(&self.max_pairs) {
            return bad("max_pairs must be in 1..=3");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || !(0.0..=1.0).contains(&self.label_noise) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn verb_distribution(&self) -> Vec<f64> {
        let total: f64 = self.verb_weights.iter().sum();
        self.verb_weights.iter().map(|w| w / total).collect()
    }

    /// Verbs in the bottom frequency tercile (ties broken by verb id).
    pub fn rare_verbs(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..NUM_VERBS).filter(|&v| self.verb_weights[v] > 0.0).collect();
        order.sort_by(|&a, &b| self.verb_weights[a].total_cmp(&self.verb_weights[b]).then(a.cmp(&b)));
        let k = order.len() / 3;
        let mut rare = order[..k].to_vec();
        rare.sort_unstable();
        rare
    }
}

fn angle_between(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Verb relating `agent` to `obj`, if any. Rules are checked in priority order.
pub fn relation(agent: &Entity, obj: &Entity) -> Option<usize> {
    if agent.kind != EntityKind::Agent || obj.kind != EntityKind::Object {
        return None;
    }
    let (a, o) = (agent.bbox(), obj.bbox());
    let (ca, co) = (agent.center, obj.center);
    let (dx, dy) = (co.x - ca.x, co.y - ca.y);
    let class = obj.class_id;

    if a.intersection_area(&o) > 0.0 {
        let above = ca.y < co.y - 0.25 * o.height() && dx.abs() < o.width() / 2.0;
        let inside = a.contains(co);
        if above && class == object::BIKE {
            return Some(verb::RIDE);
        }
        if above && class == object::CHAIR {
            return Some(verb::SIT_ON);
        }
        if inside && (class == object::BALL || class == object::CUP) {
            return Some(verb::HOLD);
        }
        if !inside && dx.abs() > dy.abs() && (class == object::BOX || class == object::CHAIR) {
            return Some(verb::PUSH);
        }
        if !inside && dy > dx.abs() && class == object::BALL {
            return Some(verb::KICK);
        }
        return None;
    }

    let dist = dx.hypot(dy);
    let off = angle_between(agent.orientation, dy.atan2(dx));
    if off <= FACING_TOLERANCE && dist < NEAR {
        Some(verb::APPROACH)
    } else if off <= FACING_TOLERANCE && dist <= FAR {
        Some(verb::LOOK_AT)
    } else if off >= AWAY_THRESHOLD && dist < NEAR {
        Some(verb::TURN_AWAY)
    } else {
        None
    }
}

/// All relations implied by the layout, in (agent, object) index order.
pub fn relations(entities: &[Entity]) -> Vec<HoiTriplet> {
    let mut out = Vec::new();
    for (i, a) in entities.iter().enumerate() {
        for (j, o) in entities.iter().enumerate() {
            if let Some(v) = relation(a, o) {
                out.push(HoiTriplet {
                    human_idx: i,
                    object_idx: j,
                    verb_id: v,
                });
            }
        }
    }
    out
}

fn object_size(rng: &mut ChaCha8Rng, class: usize) -> [f64; 2] {
    let (w, h) = match class {
        object::BALL => {
            let d = rng.gen_range(0.07..0.10);
            (d, d)
        }
        object::CUP => (rng.gen_range(0.06..0.08), rng.gen_range(0.08..0.10)),
        object::BIKE => (rng.gen_range(0.22..0.28), rng.gen_range(0.12..0.16)),
        object::CHAIR => (rng.gen_range(0.14..0.18), rng.gen_range(0.16..0.20)),
        object::BOX => {
            let d = rng.gen_range(0.14..0.20);
            (d, d)
        }
        _ => (rng.gen_range(0.20..0.26), rng.gen_range(0.12..0.16)),
    };
    [w, h]
}

fn agent_at(center: Point, radius: f64, orientation: f64) -> Entity {
    Entity {
        kind: EntityKind::Agent,
        class_id: 0,
        center,
        size: [2.0 * radius, 2.0 * radius],
        orientation,
    }
}

fn object_at(center: Point, class: usize, size: [f64; 2]) -> Entity {
    Entity {
        kind: EntityKind::Object,
        class_id: class,
        center,
        size,
        orientation: 0.0,
    }
}

/// Proposes an (agent, object) layout intended to realize `v`.
fn place_pair(rng: &mut ChaCha8Rng, v: usize, class: usize) -> (Entity, Entity) {
    let r = rng.gen_range(0.06..0.09);
    let size = object_size(rng, class);
    let (w, h) = (size[0], size[1]);
    let ca = Point::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
    let free_heading = rng.gen_range(-PI..PI);
    let jitter = |rng: &mut ChaCha8Rng, deg: f64| rng.gen_range(-deg..deg) * PI / 180.0;

    match v {
        verb::HOLD => {
            let co = Point::new(ca.x + rng.gen_range(-0.5..0.5) * r, ca.y + rng.gen_range(-0.5..0.5) * r);
            (agent_at(ca, r, free_heading), object_at(co, class, size))
        }
        verb::RIDE | verb::SIT_ON => {
            let overlap = rng.gen_range(0.4..1.0) * r;
            let co = Point::new(ca.x + rng.gen_range(-0.35..0.35) * w, ca.y + r + h / 2.0 - overlap);
            (agent_at(ca, r, free_heading), object_at(co, class, size))
        }
        verb::PUSH => {
            let overlap = rng.gen_range(0.2..0.7) * r.min(w / 2.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let co = Point::new(
                ca.x + side * (r + w / 2.0 - overlap),
                ca.y + rng.gen_range(-0.3..0.3) * r.min(h / 2.0),
            );
            (agent_at(ca, r, free_heading), object_at(co, class, size))
        }
        verb::KICK => {
            let overlap = rng.gen_range(0.2..0.7) * (h / 2.0).min(r);
            let co = Point::new(ca.x + rng.gen_range(-0.3..0.3) * r, ca.y + r + h / 2.0 - overlap);
            (agent_at(ca, r, free_heading), object_at(co, class, size))
        }
        _ => {
            let reach = r + 0.5 * w.hypot(h) + 0.02;
            let (lo, hi) = match v {
                verb::LOOK_AT => (NEAR.max(reach) + 0.02, FAR - 0.05),
                _ => (reach, NEAR - 0.02),
            };
            let dist = rng.gen_range(lo..hi.max(lo + 1e-3));
            let phi = rng.gen_range(-PI..PI);
            let co = Point::new(ca.x + dist * phi.cos(), ca.y + dist * phi.sin());
            let heading = if v == verb::TURN_AWAY {
                phi + PI + jitter(rng, 25.0)
            } else {
                phi + jitter(rng, 15.0)
            };
            (agent_at(ca, r, heading), object_at(co, class, size))
        }
    }
}

fn inside_unit(b: &BBox) -> bool {
    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0
}

/// Boxes of entities that are not an intended pair must be clear of each other.
fn clutter_free(entities: &[Entity], pairs: &[(usize, usize)]) -> bool {
    const MARGIN: f64 = 0.02;
    for i in 0..entities.len() {
        for j in i + 1..entities.len() {
            if pairs.contains(&(i, j)) || pairs.contains(&(j, i)) {
                continue;
            }
            let a = entities[i].bbox();
            let b = entities[j].bbox();
            let grown = BBox::from_center(a.center(), a.width() + 2.0 * MARGIN, a.height() + 2.0 * MARGIN);
            if grown.intersection_area(&b) > 0.0 {
                return false;
            }
        }
    }
    true
}

const MAX_ATTEMPTS: usize = 2000;

/// Generation statistics useful for validating a profile.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationStats {
    /// Scenes whose intended verbs could not all be placed and were reduced.
    pub fallbacks: usize,
}

fn scene_rng(dataset_seed: u64, scene_seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&dataset_seed.to_le_bytes());
    key[8..16].copy_from_slice(&scene_seed.to_le_bytes());
    key[16..24].copy_from_slice(b"hoiscene");
    ChaCha8Rng::from_seed(key)
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn generate_scene(
    dataset_seed: u64,
    scene_seed: u64,
    split: Split,
    profile: &DifficultyProfile,
    stats: &mut GenerationStats,
) -> SceneRecord {
    let mut rng = scene_rng(dataset_seed, scene_seed);
    let probs = profile.verb_distribution();
    let n_pairs = rng.gen_range(1..=profile.max_pairs);
    let mut intended: Vec<(usize, usize)> = (0..n_pairs)
        .map(|_| {
            let v = sample_index(&mut rng, &probs);
            let classes = admissible_objects(v);
            (v, classes[rng.gen_range(0..classes.len())])
        })
        .collect();
    let mut distractor = rng.gen_bool(profile.distractor_prob);

    loop {
        for _ in 0..MAX_ATTEMPTS {
            let mut entities = Vec::new();
            let mut pairs = Vec::new();
            let mut expected = Vec::new();
            for &(v, class) in &intended {
                let (a, o) = place_pair(&mut rng, v, class);
                pairs.push((entities.len(), entities.len() + 1));
                expected.push(HoiTriplet {
                    human_idx: entities.len(),
                    object_idx: entities.len() + 1,
                    verb_id: v,
                });
                entities.push(a);
                entities.push(o);
            }
            if distractor {
                let class = rng.gen_range(0..NUM_OBJECT_CLASSES);
                let size = object_size(&mut rng, class);
                let c = Point::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
                entities.push(object_at(c, class, size));
            }
            let valid = entities.iter().all(|e| inside_unit(&e.bbox()))
                && clutter_free(&entities, &pairs)
                && relations(&entities) == expected;
            if valid {
                let mut triplets = expected;
                for t in &mut triplets {
                    if profile.label_noise > 0.0 && rng.gen_bool(profile.label_noise) {
                        let shift = rng.gen_range(1..NUM_VERBS);
                        t.verb_id = (t.verb_id + shift) % NUM_VERBS;
                    }
                }
                return SceneRecord {
                    seed: scene_seed,
                    entities,
                    triplets,
                    split,
                };
            }
        }
        // Unplaceable combination: shed the last pair, then the distractor.
        stats.fallbacks += 1;
        if intended.len() > 1 {
            intended.pop();
        } else {
            distractor = false;
        }
    }
}

/// Generates `n_scenes` records of one split; deterministic in `dataset_seed`.
pub fn generate(
    dataset_seed: u64,
    n_scenes: usize,
    profile: &DifficultyProfile,
    split: Split,
) -> Result<Vec<SceneRecord>, SceneError> {
    generate_with_stats(dataset_seed, n_scenes, profile, split).map(|(s, _)| s)
}

pub fn generate_with_stats(
    dataset_seed: u64,
    n_scenes: usize,
    profile: &DifficultyProfile,
    split: Split,
) -> Result<(Vec<SceneRecord>, GenerationStats), SceneError> {
    profile.validate()?;
    if n_scenes == 0 {
        return Err(SceneError::NoScenes);
    }
    let mut stats = GenerationStats::default();
    let scenes = (0..n_scenes as u64)
        .map(|i| generate_scene(dataset_seed, split.seed_base() + i, split, profile, &mut stats))
        .collect();
    Ok((scenes, stats))
}

/// Scene counts and resolution of a full benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub resolution: usize,
    pub profile: DifficultyProfile,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            train: 2000,
            val: 200,
            test: 500,
            resolution: 64,
            profile: DifficultyProfile::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

impl Benchmark {
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self, SceneError> {
        Ok(Self {
            train: generate(spec.seed, spec.train, &spec.profile, Split::Train)?,
            val: generate(spec.seed, spec.val, &spec.profile, Split::Val)?,
            test: generate(spec.seed, spec.test, &spec.profile, Split::Test)?,
            spec: spec.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_single_scene() {
        let p = DifficultyProfile::default();
        let a = generate(5, 1, &p, Split::Train).unwrap();
        let b = generate(5, 1, &p, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(6, 1, &p, Split::Train).unwrap());
    }

    #[test]
    fn records_are_valid_and_labels_follow_rules() {
        let p = DifficultyProfile::default();
        for s in generate(1, 300, &p, Split::Train).unwrap() {
            s.validate().unwrap();
            assert_eq!(relations(&s.entities), s.triplets);
            assert!(!s.triplets.is_empty());
            for t in &s.triplets {
                let class = s.entities[t.object_idx].class_id;
                assert!(admissible_objects(t.verb_id).contains(&class));
            }
        }
    }

    #[test]
    fn overt_profile_only_yields_contact() {
        let p = DifficultyProfile::overt_only();
        for s in generate(3, 300, &p, Split::Train).unwrap() {
            for t in &s.triplets {
                let a = s.entities[t.human_idx].bbox();
                let o = s.entities[t.object_idx].bbox();
                assert!(a.intersection_area(&o) > 0.0);
                assert!(!is_subtle(t.verb_id));
            }
        }
    }

    #[test]
    fn splits_have_disjoint_seeds() {
        let p = DifficultyProfile::default();
        let train = generate(1, 50, &p, Split::Train).unwrap();
        let test = generate(1, 50, &p, Split::Test).unwrap();
        assert!(train.iter().all(|a| test.iter().all(|b| a.seed != b.seed)));
        assert_ne!(train[0].entities, test[0].entities);
    }

    #[test]
    fn invalid_profiles_rejected() {
        let mut p = DifficultyProfile::default();
        p.verb_weights.pop();
        assert!(matches!(generate(0, 1, &p, Split::Train), Err(SceneError::InvalidProfile(_))));
        let mut p = DifficultyProfile::default();
        p.verb_weights = vec![0.0; NUM_VERBS];
        assert!(p.validate().is_err());
        let mut p = DifficultyProfile::default();
        p.max_pairs = 0;
        assert!(p.validate().is_err());
        assert!(matches!(
            generate(0, 0, &DifficultyProfile::default(), Split::Train),
            Err(SceneError::NoScenes)
        ));
    }

    #[test]
    fn rare_verbs_are_bottom_tercile() {
        assert_eq!(DifficultyProfile::default().rare_verbs(), vec![verb::SIT_ON, verb::KICK]);
    }

    #[test]
    fn label_noise_flips_some_verbs() {
        let mut p = DifficultyProfile::default();
        p.label_noise = 0.5;
        let scenes = generate(2, 200, &p, Split::Train).unwrap();
        let flipped = scenes
            .iter()
            .filter(|s| relations(&s.entities) != s.triplets)
            .count();
        assert!(flipped > 50 && flipped < 190, "{flipped}");
    }

    #[test]
    fn relation_rules() {
        let agent = agent_at(Point::new(0.5, 0.5), 0.08, 0.0);
        // Facing +x, object straight ahead at distance 0.45.
        let screen = object_at(Point::new(0.95 - 0.1, 0.5), object::SCREEN, [0.1, 0.1]);
        assert_eq!(relation(&agent, &screen), Some(verb::LOOK_AT));
        let near = object_at(Point::new(0.75, 0.5), object::SCREEN, [0.1, 0.1]);
        assert_eq!(relation(&agent, &near), Some(verb::APPROACH));
        let behind = object_at(Point::new(0.25, 0.5), object::SCREEN, [0.1, 0.1]);
        assert_eq!(relation(&agent, &behind), Some(verb::TURN_AWAY));
        let side = object_at(Point::new(0.5, 0.25), object::SCREEN, [0.1, 0.1]);
        assert_eq!(relation(&agent, &side), None);
        let cup = object_at(Point::new(0.52, 0.5), object::CUP, [0.06, 0.08]);
        assert_eq!(relation(&agent, &cup), Some(verb::HOLD));
        let bike = object_at(Point::new(0.5, 0.62), object::BIKE, [0.25, 0.14]);
        assert_eq!(relation(&agent, &bike), Some(verb::RIDE));
        assert_eq!(relation(&bike, &agent), None);
    }
}
