//! Demonstration datasets: expert runs captured as world snapshots at 2
//! frames per second, re-rendered into network samples on demand. Storing
//! snapshots instead of rendered tensors keeps files small and makes
//! rotation augmentation a pose change rather than a second copy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{run_route, Driver, RouteRecord, RouteSpec};
use crate::expert::Expert;
use crate::geom::{wrap_angle, Vec2};
use crate::losses::FrameLabels;
use crate::model::net::Obs;
use crate::sensors::{det_boxes, render_frame};
use crate::world::map::RoadMap;
use crate::world::route::Condition;
use crate::world::scenario::SpawnConfig;
use crate::world::state::{AgentKind, AgentSnapshot, Control, WorldSnapshot, WorldState};

pub const MAGIC: &[u8; 4] = b"MFDS";
pub const VERSION: u32 = 1;
/// Simulation runs at 20 Hz; every 10th tick is stored (2 FPS).
pub const STORE_EVERY: u64 = 10;
pub const FUTURE_STEPS: usize = 4;
/// The conditioning goal rides this far ahead of the ego's route projection.
pub const GOAL_LOOKAHEAD: f64 = 10.0;
pub const AUGMENT_MAX_DEG: f64 = 20.0;

/// One stored demonstration frame: the frozen world plus everything needed
/// to re-derive inputs and labels from any ego yaw.
#[derive(Clone, Debug)]
pub struct Frame {
    pub route_id: u32,
    pub snap: WorldSnapshot,
    pub condition: Condition,
    pub goal_world: Vec2,
    /// Ego positions at the next stored instants, world frame.
    pub future: Vec<Vec2>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("malformed manifest line {0}: {1}")]
    Manifest(usize, String),
}

// ── collection ──

struct Recorder {
    expert: Expert,
    map_id: u32,
    tick: u64,
    snaps: Vec<WorldSnapshot>,
}

impl Driver for Recorder {
    fn control(&mut self, world: &WorldState, map: &RoadMap) -> Control {
        if self.tick % STORE_EVERY == 0 {
            self.snaps.push(WorldSnapshot::of(world, self.map_id));
        }
        self.tick += 1;
        self.expert.control(world, map)
    }
}

/// Drive one route with the expert, recording frames. Frames without a full
/// future horizon (the route tail) are not kept.
pub fn collect_route(spec: &RouteSpec, route_id: u32, spawn: &SpawnConfig) -> (Vec<Frame>, RouteRecord) {
    let (map, route) = spec.build();
    let mut rec = Recorder {
        expert: Expert::new(route.polyline.clone()),
        map_id: map.id,
        tick: 0,
        snaps: Vec::new(),
    };
    let record = run_route(&map, &route, &mut rec, spawn);

    let snaps = rec.snaps;
    let mut frames = Vec::new();
    for i in 0..snaps.len().saturating_sub(FUTURE_STEPS) {
        let ego = snaps[i].agents[0].pose;
        let (s, _) = route.polyline.project(ego.pos);
        let goal_world = route.polyline.point_at((s + GOAL_LOOKAHEAD).min(route.polyline.length()));
        let future = (1..=FUTURE_STEPS).map(|k| snaps[i + k].agents[0].pose.pos).collect();
        frames.push(Frame {
            route_id,
            snap: snaps[i].clone(),
            condition: route.condition,
            goal_world,
            future,
        });
    }
    (frames, record)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub route_id: u32,
    pub frames: usize,
    pub excluded: bool,
}

/// Collect every spec `reps` times. Routes on which the expert commits any
/// infraction contribute no frames and are flagged in the manifest.
pub fn collect_dataset(
    specs: &[RouteSpec],
    reps: usize,
    base_seed: u64,
    density: (usize, usize),
) -> (Vec<Frame>, Vec<ManifestEntry>) {
    let mut frames = Vec::new();
    let mut manifest = Vec::new();
    for rep in 0..reps {
        for (i, spec) in specs.iter().enumerate() {
            let route_id = (rep * specs.len() + i) as u32;
            let spawn = SpawnConfig {
                vehicles: density.0,
                pedestrians: density.1,
                seed: base_seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add((rep * 1000 + i) as u64),
            };
            let (route_frames, record) = collect_route(spec, route_id, &spawn);
            let excluded = record.counts.iter().sum::<usize>() > 0;
            manifest.push(ManifestEntry {
                route_id,
                frames: if excluded { 0 } else { route_frames.len() },
                excluded,
            });
            if !excluded {
                frames.extend(route_frames);
            }
        }
    }
    (frames, manifest)
}

// ── sample synthesis ──

/// Render one frame into a network sample, with the ego yawed by `angle`
/// radians. Labels are recomputed in the rotated frame, so augmentation and
/// the base sample share one code path (`angle == 0`).
pub fn frame_to_sample(frame: &Frame, map: &RoadMap, angle: f64) -> (Obs, FrameLabels) {
    let mut snap = frame.snap.clone();
    snap.agents[0].pose.yaw = wrap_angle(snap.agents[0].pose.yaw + angle);
    let ego = snap.agents[0].pose;
    let rf = render_frame(&snap, map, frame.condition, frame.goal_world);
    let labels = FrameLabels {
        waypoints: frame.future.iter().map(|&w| ego.to_local(w)).collect(),
        depth: rf.camera.depth.clone(),
        semantics: rf.camera.sem.clone(),
        hdmap: rf.hdmap.clone(),
        boxes: det_boxes(&snap),
    };
    let obs = Obs { camera: rf.camera.rgb, bev: rf.bev, speed: rf.speed, goal: rf.goal_local };
    (obs, labels)
}

/// Per-frame augmentation angle, uniform in ±20° and reproducible from
/// (seed, epoch, index) alone.
pub fn augment_angle(seed: u64, epoch: usize, idx: usize) -> f64 {
    let mix = seed ^ ((epoch as u64) << 40) ^ idx as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    rng.gen_range(-AUGMENT_MAX_DEG.to_radians()..AUGMENT_MAX_DEG.to_radians())
}

// ── binary dataset file ──

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u8(r: &mut impl Read) -> Result<u8, DataError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn r_f64(r: &mut impl Read) -> Result<f64, DataError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn save_frames(path: &Path, frames: &[Frame]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_u32(&mut w, frames.len() as u32)?;
    for f in frames {
        w_u32(&mut w, f.route_id)?;
        w_u32(&mut w, f.snap.map_id)?;
        w_f64(&mut w, f.snap.t)?;
        w.write_all(&[f.condition.weather, f.condition.daylight])?;
        w_f64(&mut w, f.goal_world.x)?;
        w_f64(&mut w, f.goal_world.y)?;
        w.write_all(&[f.future.len() as u8])?;
        for p in &f.future {
            w_f64(&mut w, p.x)?;
            w_f64(&mut w, p.y)?;
        }
        w_u32(&mut w, f.snap.agents.len() as u32)?;
        for a in &f.snap.agents {
            w.write_all(&[match a.kind {
                AgentKind::Vehicle => 0u8,
                AgentKind::Pedestrian => 1,
            }])?;
            for v in [a.pose.pos.x, a.pose.pos.y, a.pose.yaw, a.speed, a.half.x, a.half.y] {
                w_f64(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_frames(path: &Path) -> Result<Vec<Frame>, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(DataError::BadVersion(version));
    }
    let count = r_u32(&mut r)? as usize;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let route_id = r_u32(&mut r)?;
        let map_id = r_u32(&mut r)?;
        let t = r_f64(&mut r)?;
        let condition = Condition { weather: r_u8(&mut r)?, daylight: r_u8(&mut r)? };
        let goal_world = Vec2::new(r_f64(&mut r)?, r_f64(&mut r)?);
        let nf = r_u8(&mut r)? as usize;
        let mut future = Vec::with_capacity(nf);
        for _ in 0..nf {
            future.push(Vec2::new(r_f64(&mut r)?, r_f64(&mut r)?));
        }
        let na = r_u32(&mut r)? as usize;
        if na == 0 {
            return Err(DataError::Corrupt("frame with no agents".into()));
        }
        let mut agents = Vec::with_capacity(na);
        for _ in 0..na {
            let kind = match r_u8(&mut r)? {
                0 => AgentKind::Vehicle,
                1 => AgentKind::Pedestrian,
                k => return Err(DataError::Corrupt(format!("unknown agent kind {k}"))),
            };
            let vals: Vec<f64> = (0..6).map(|_| r_f64(&mut r)).collect::<Result<_, _>>()?;
            agents.push(AgentSnapshot {
                kind,
                pose: crate::geom::Pose { pos: Vec2::new(vals[0], vals[1]), yaw: vals[2] },
                speed: vals[3],
                half: Vec2::new(vals[4], vals[5]),
            });
        }
        frames.push(Frame {
            route_id,
            snap: WorldSnapshot { map_id, t, agents },
            condition,
            goal_world,
            future,
        });
    }
    Ok(frames)
}

// ── manifest ──

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("route\tframes\tstatus\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.route_id,
            e.frames,
            if e.excluded { "excluded" } else { "included" }
        ));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, DataError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let err = |m: &str| DataError::Manifest(i + 1, m.to_string());
        if parts.len() != 3 {
            return Err(err("expected 3 tab-separated fields"));
        }
        let route_id = parts[0].parse().map_err(|_| err("bad route id"))?;
        let frames = parts[1].parse().map_err(|_| err("bad frame count"))?;
        let excluded = match parts[2] {
            "excluded" => true,
            "included" => false,
            other => return Err(err(&format!("unknown status {other}"))),
        };
        entries.push(ManifestEntry { route_id, frames, excluded });
    }
    Ok(entries)
}
