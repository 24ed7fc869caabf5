//! Synthetic lidar scenes with exact relative poses, dataset files and ECDF statistics.
//!
//! A scene is a random world of primitives (tiled ground, boxes, vertical
//! cylinders and walls) scanned from two sensor poses by a spinning
//! multi-beam sensor. Each cloud is expressed in its own sensor frame and
//! quantized to `f32` so that it survives the `FREG` format unchanged.
//!
//! Dataset layout: `manifest.jsonl` with one record per pair plus two `FREG`
//! files per pair, named after the scene id.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap_ratio, PointCloud, RigidTransform, Vec3};
use crate::io::{read_freg, write_freg};

/// Distance threshold used for the stored overlap ratio, in meters.
pub const OVERLAP_GAMMA: f64 = 0.3;

pub const MANIFEST: &str = "manifest.jsonl";

const MAX_ATTEMPTS: u64 = 10;

/// Clearance kept between primitives and the sensors, in meters.
const SENSOR_CLEARANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub fans: usize,
    pub fan_min_deg: f64,
    pub fan_max_deg: f64,
    pub horizontal_resolution_deg: f64,
    pub max_range: f64,
    /// Mounting height above the ground plane.
    pub height: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            fans: 64,
            fan_min_deg: -25.0,
            fan_max_deg: 5.0,
            horizontal_resolution_deg: 0.4,
            max_range: 80.0,
            height: 1.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Side length of the square world, in meters.
    pub extent: f64,
    pub ground: bool,
    /// Side length of the ground's albedo tiles.
    pub tile_size: f64,
    pub boxes: usize,
    pub cylinders: usize,
    pub walls: usize,
    pub sensor: SensorModel,
    pub max_sensor_separation: f64,
    /// Relative yaw between the two sensors is uniform in `±max_relative_yaw_deg`.
    pub max_relative_yaw_deg: f64,
    pub occlusion: bool,
    pub noise_sigma: f64,
    /// Clouds with fewer points trigger regeneration.
    pub min_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 120.0,
            ground: true,
            tile_size: 4.0,
            boxes: 60,
            cylinders: 40,
            walls: 12,
            sensor: SensorModel::default(),
            max_sensor_separation: 30.0,
            max_relative_yaw_deg: 180.0,
            occlusion: true,
            noise_sigma: 0.02,
            min_points: 2000,
        }
    }
}

impl SceneConfig {
    /// Smaller world and sparser sensor for quick training runs.
    pub fn compact() -> Self {
        Self {
            extent: 60.0,
            boxes: 30,
            cylinders: 20,
            walls: 6,
            sensor: SensorModel {
                fans: 32,
                fan_min_deg: -25.0,
                fan_max_deg: 5.0,
                horizontal_resolution_deg: 0.8,
                max_range: 30.0,
                height: 1.8,
            },
            max_sensor_separation: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sensor;
        let positive = [
            ("scene.extent", self.extent),
            ("scene.tile_size", self.tile_size),
            ("sensor.horizontal_resolution_deg", s.horizontal_resolution_deg),
            ("sensor.max_range", s.max_range),
            ("sensor.height", s.height),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if s.fans == 0 {
            return Err(Error::Config("sensor.fans must be positive".into()));
        }
        if s.fan_min_deg > s.fan_max_deg || s.fan_min_deg < -90.0 || s.fan_max_deg > 90.0 {
            return Err(Error::Config("sensor fan angles must satisfy -90 <= min <= max <= 90".into()));
        }
        if !(self.max_sensor_separation >= 0.0) || self.max_sensor_separation > self.extent {
            return Err(Error::Config(format!(
                "scene.max_sensor_separation must lie in [0, extent = {}], got {}",
                self.extent, self.max_sensor_separation
            )));
        }
        if !(0.0..=180.0).contains(&self.max_relative_yaw_deg) {
            return Err(Error::Config("scene.max_relative_yaw_deg must lie in [0, 180]".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("scene.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Sensor position (at mounting height) and heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPose {
    pub position: Vec3,
    pub yaw: f64,
}

impl SensorPose {
    /// Sensor frame to world frame.
    pub fn to_world(&self) -> RigidTransform {
        let mut t = RigidTransform::rotation_z(self.yaw);
        t.translation = self.position;
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Primitive {
    /// Yawed box standing on the ground; `half.z` is half the height.
    Box { center: Vec3, half: Vec3, yaw: f64, albedo: f64 },
    Cylinder { center: Vec3, radius: f64, height: f64, albedo: f64 },
}

impl Primitive {
    fn footprint(&self) -> (Vec3, f64) {
        match self {
            Primitive::Box { center, half, .. } => (*center, half.x.hypot(half.y)),
            Primitive::Cylinder { center, radius, .. } => (*center, *radius),
        }
    }

    /// Entry distance along a unit ray, if hit in front of the origin.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        match self {
            Primitive::Box { center, half, yaw, albedo } => {
                let (s, c) = (-yaw).sin_cos();
                let rel = o - Vec3::new(center.x, center.y, half.z);
                let lo = Vec3::new(c * rel.x - s * rel.y, s * rel.x + c * rel.y, rel.z);
                let ld = Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z);
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if ld[a] == 0.0 {
                        if lo[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let (p, q) = ((-half[a] - lo[a]) / ld[a], (half[a] - lo[a]) / ld[a]);
                    t0 = t0.max(p.min(q));
                    t1 = t1.min(p.max(q));
                }
                (t0 <= t1 && t0 > 0.0).then_some((t0, *albedo))
            }
            Primitive::Cylinder { center, radius, height, albedo } => {
                let (px, py) = (o.x - center.x, o.y - center.y);
                let a = d.x * d.x + d.y * d.y;
                let mut best: Option<f64> = None;
                if a > 0.0 {
                    let b = 2.0 * (px * d.x + py * d.y);
                    let c = px * px + py * py - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let z = o.z + t * d.z;
                        if t > 0.0 && (0.0..=*height).contains(&z) {
                            best = Some(t);
                        }
                    }
                }
                if d.z < 0.0 && o.z > *height {
                    let t = (height - o.z) / d.z;
                    let (x, y) = (px + t * d.x, py + t * d.y);
                    if x * x + y * y <= radius * radius && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                }
                best.map(|t| (t, *albedo))
            }
        }
    }
}

/// Random primitive world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    extent: f64,
    ground: bool,
    tile_size: f64,
    tile_seed: u64,
    primitives: Vec<Primitive>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for item `index` of a stream seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

impl World {
    fn generate(cfg: &SceneConfig, sensors: &[SensorPose], rng: &mut ChaCha8Rng) -> Self {
        let half_world = cfg.extent / 2.0;
        let clear = |center: Vec3, reach: f64| {
            sensors
                .iter()
                .all(|s| (s.position.xy() - center.xy()).norm() > reach + SENSOR_CLEARANCE)
        };
        let mut primitives = Vec::new();
        let mut place = |rng: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng, Vec3) -> Primitive| {
            for _ in 0..20 {
                let center = Vec3::new(
                    rng.random_range(-half_world..half_world),
                    rng.random_range(-half_world..half_world),
                    0.0,
                );
                let p = make(rng, center);
                let (c, reach) = p.footprint();
                if clear(c, reach) {
                    primitives.push(p);
                    return;
                }
            }
        };
        for _ in 0..cfg.boxes {
            place(rng, &|rng, center| Primitive::Box {
                center,
                half: Vec3::new(rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)),
                yaw: rng.random_range(0.0..std::f64::consts::PI),
                albedo: rng.random_range(0.1..1.0),
            });
        }
        for _ in 0..cfg.cylinders {
            place(rng, &|rng, center| Primitive::Cylinder {
                center,
                radius: rng.random_range(0.2..1.0),
                height: rng.random_range(1.0..8.0),
                albedo: rng.random_range(0.1..1.0),
            });
        }
        for _ in 0..cfg.walls {
            place(rng, &|rng, center| Primitive::Box {
                center,
                half: Vec3::new(rng.random_range(2.5..10.0), 0.15, rng.random_range(1.0..2.5)),
                yaw: rng.random_range(0.0..std::f64::consts::PI),
                albedo: rng.random_range(0.1..1.0),
            });
        }
        Self {
            extent: cfg.extent,
            ground: cfg.ground,
            tile_size: cfg.tile_size,
            tile_seed: rng.random(),
            primitives,
        }
    }

    fn ground_albedo(&self, x: f64, y: f64) -> f64 {
        let ix = (x / self.tile_size).floor() as i64 as u64;
        let iy = (y / self.tile_size).floor() as i64 as u64;
        let h = splitmix64(self.tile_seed ^ splitmix64(ix ^ splitmix64(iy)));
        0.05 + 0.45 * (h >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Hits along a unit ray within `max_range`: the nearest only when
    /// `occlusion` is set, otherwise every surface entry.
    fn cast(&self, o: &Vec3, d: &Vec3, max_range: f64, occlusion: bool, out: &mut Vec<(f64, f64)>) {
        let start = out.len();
        if self.ground && d.z < 0.0 {
            let t = -o.z / d.z;
            let (x, y) = (o.x + t * d.x, o.y + t * d.y);
            let h = self.extent / 2.0;
            if t <= max_range && x.abs() <= h && y.abs() <= h {
                out.push((t, self.ground_albedo(x, y)));
            }
        }
        for p in &self.primitives {
            if let Some((t, albedo)) = p.intersect(o, d) {
                if t <= max_range {
                    out.push((t, albedo));
                }
            }
        }
        if occlusion && out.len() > start + 1 {
            let nearest = out[start..]
                .iter()
                .copied()
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("non-empty");
            out.truncate(start);
            out.push(nearest);
        }
    }

    /// Scans the world from `pose`. Returns hit points in world coordinates with their albedo.
    pub fn scan(&self, pose: &SensorPose, sensor: &SensorModel, occlusion: bool) -> Vec<(Vec3, f64)> {
        let azimuths = (360.0 / sensor.horizontal_resolution_deg).round().max(1.0) as usize;
        let to_world = pose.to_world();
        let mut hits = Vec::new();
        let mut buf = Vec::new();
        for f in 0..sensor.fans {
            let elev = if sensor.fans == 1 {
                sensor.fan_min_deg
            } else {
                sensor.fan_min_deg + (sensor.fan_max_deg - sensor.fan_min_deg) * f as f64 / (sensor.fans - 1) as f64
            }
            .to_radians();
            for a in 0..azimuths {
                let az = (a as f64 * 360.0 / azimuths as f64).to_radians();
                let local = Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
                let d = to_world.rotation * local;
                buf.clear();
                self.cast(&pose.position, &d, sensor.max_range, occlusion, &mut buf);
                hits.extend(buf.iter().map(|&(t, albedo)| (pose.position + d * t, albedo)));
            }
        }
        hits
    }
}

/// One registration sample: two clouds in their own sensor frames and the
/// exact transform mapping source coordinates into the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub source: PointCloud,
    pub target: PointCloud,
    pub ground_truth: RigidTransform,
    pub overlap: f64,
    pub separation: f64,
}

/// Full description of a generated scene, before scanning.
#[derive(Debug, Clone)]
pub struct SceneLayout {
    pub world: World,
    pub source_pose: SensorPose,
    pub target_pose: SensorPose,
    pub separation: f64,
}

impl SceneLayout {
    pub fn generate(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let quarter = cfg.extent / 4.0;
        let h = cfg.sensor.height;
        let position = Vec3::new(rng.random_range(-quarter..=quarter), rng.random_range(-quarter..=quarter), h);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let separation = rng.random_range(0.0..=cfg.max_sensor_separation);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let dyaw = cfg.max_relative_yaw_deg.to_radians();
        let relative = rng.random_range(-dyaw..=dyaw);
        let source_pose = SensorPose { position, yaw };
        let target_pose = SensorPose {
            position: position + separation * Vec3::new(heading.cos(), heading.sin(), 0.0),
            yaw: yaw + relative,
        };
        let world = World::generate(cfg, &[source_pose, target_pose], rng);
        Self {
            world,
            source_pose,
            target_pose,
            separation,
        }
    }

    /// Source-frame to target-frame transform.
    pub fn ground_truth(&self) -> RigidTransform {
        self.target_pose.to_world().inverse().compose(&self.source_pose.to_world())
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Scan expressed in the sensor frame, with noise and `f32` quantization.
fn sensor_cloud(
    layout: &SceneLayout,
    pose: &SensorPose,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let hits = layout.world.scan(pose, &cfg.sensor, cfg.occlusion);
    let from_world = pose.to_world().inverse();
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("finite sigma"));
    let mut coords = Vec::with_capacity(hits.len());
    let mut intensity = Vec::with_capacity(hits.len());
    for (p, albedo) in hits {
        let mut q = from_world.apply(&p);
        if let Some(n) = &noise {
            q += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        }
        coords.push(q.map(quantize));
        intensity.push(quantize(albedo));
    }
    PointCloud {
        coords,
        intensity: Some(intensity),
    }
}

/// Generates one scene pair; retries with derived seeds when a cloud is too sparse.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, scene_id: impl Into<String>) -> Result<ScenePair> {
    cfg.validate()?;
    let scene_id = scene_id.into();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
        let layout = SceneLayout::generate(cfg, &mut rng);
        let source = sensor_cloud(&layout, &layout.source_pose, cfg, &mut rng);
        let target = sensor_cloud(&layout, &layout.target_pose, cfg, &mut rng);
        if source.len() < cfg.min_points || target.len() < cfg.min_points {
            continue;
        }
        let ground_truth = layout.ground_truth();
        let overlap = overlap_ratio(&source, &target, &ground_truth, OVERLAP_GAMMA)?;
        return Ok(ScenePair {
            scene_id,
            source,
            target,
            ground_truth,
            overlap,
            separation: layout.separation,
        });
    }
    Err(Error::InvalidArgument(format!(
        "scene {scene_id}: fewer than {} points in every one of {MAX_ATTEMPTS} attempts",
        cfg.min_points
    )))
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:06}")
}

/// `count` scenes with per-scene seeds derived from `seed`; generated in parallel.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<ScenePair>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, derive_seed(seed, i as u64), scene_id(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    scene_id: String,
    source: String,
    target: String,
    ground_truth: Vec<f64>,
    overlap: f64,
    separation: f64,
}

pub fn dataset_save(pairs: &[ScenePair], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for p in pairs {
        if p.scene_id.is_empty() || p.scene_id.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!("scene id {:?} is not a plain file stem", p.scene_id)));
        }
        let record = ManifestRecord {
            scene_id: p.scene_id.clone(),
            source: format!("{}_source.freg", p.scene_id),
            target: format!("{}_target.freg", p.scene_id),
            ground_truth: p.ground_truth.to_row_major().to_vec(),
            overlap: p.overlap,
            separation: p.separation,
        };
        write_freg(dir.join(&record.source), &p.source)?;
        write_freg(dir.join(&record.target), &p.target)?;
        manifest.push_str(&serde_json::to_string(&record).expect("record serializes"));
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn dataset_load(dir: impl AsRef<Path>) -> Result<Vec<ScenePair>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
        let ground_truth = RigidTransform::from_row_major(&r.ground_truth)
            .map_err(|e| Error::format(&path, format!("line {}: ground truth: {e}", n + 1)))?;
        let resolve = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::format(&path, format!("line {}: missing file {}", n + 1, p.display())))
            }
        };
        pairs.push(ScenePair {
            source: read_freg(resolve(&r.source)?)?,
            target: read_freg(resolve(&r.target)?)?,
            scene_id: r.scene_id,
            ground_truth,
            overlap: r.overlap,
            separation: r.separation,
        });
    }
    Ok(pairs)
}

/// Empirical CDF as `(value, fraction ≤ value)` rows; tied values collapse to one row.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (i, &x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = frac,
            _ => out.push((x, frac)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStatistics {
    /// Relative sensor distance in meters.
    pub distance: Vec<(f64, f64)>,
    /// Relative rotation angle in degrees.
    pub rotation: Vec<(f64, f64)>,
    pub overlap: Vec<(f64, f64)>,
}

pub fn dataset_statistics(pairs: &[ScenePair]) -> Result<DatasetStatistics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("statistics need at least one pair".into()));
    }
    let collect = |f: &dyn Fn(&ScenePair) -> f64| ecdf(&pairs.iter().map(f).collect::<Vec<_>>());
    Ok(DatasetStatistics {
        distance: collect(&|p| p.ground_truth.translation.norm()),
        rotation: collect(&|p| p.ground_truth.angle_deg()),
        overlap: collect(&|p| p.overlap),
    })
}
