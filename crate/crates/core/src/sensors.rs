//! Raycast vision frames and the proprioceptive observation vector.
//!
//! Cameras are pinholes with square pixels and a 1:1 aspect ratio. The
//! principal point sits at pixel `(N/2, N/2)`, so the ray through that pixel
//! is the optical axis. Terrain is found by ray marching with bracketed
//! refinement; objects are intersected analytically.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, AgentState};
use crate::error::{Result, SimError};
use crate::scene::{PlacedObject, SceneInstance, ShapeKind};
use crate::terrain::{Heightmap, Material};

pub const ALLOWED_RESOLUTIONS: [u32; 4] = [128, 256, 512, 1024];
/// Terrain ray-march step in meters.
pub const MARCH_STEP: f64 = 0.25;
/// Upper bound on refinement iterations once a crossing is bracketed.
pub const REFINE_ITERATIONS: usize = 10;
/// Refinement stops once the bracket is narrower than this, in meters.
const REFINE_WIDTH: f64 = 1e-4;
/// Objects extend this far below their ground contact point so that no gap
/// opens between an object and sloping terrain.
const BURIAL_DEPTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub height_above_ground: f64,
    /// Degrees below horizontal.
    pub tilt_down: f64,
    /// Degrees.
    pub fov_horizontal: f64,
    /// Pixels per side.
    pub resolution: u32,
    pub max_range: f64,
    /// Degrees, counter-clockwise from the agent heading.
    pub relative_yaw: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            height_above_ground: 1.0,
            tilt_down: 10.0,
            fov_horizontal: 90.0,
            resolution: 256,
            max_range: 100.0,
            relative_yaw: 0.0,
        }
    }
}

impl CameraConfig {
    pub fn with_resolution(mut self, resolution: u32) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_horizontal > 0.0 && self.fov_horizontal < 180.0) {
            return Err(SimError::Config(format!("fov must be in (0, 180), got {}", self.fov_horizontal)));
        }
        if !ALLOWED_RESOLUTIONS.contains(&self.resolution) {
            return Err(SimError::Config(format!(
                "resolution must be one of {ALLOWED_RESOLUTIONS:?}, got {}",
                self.resolution
            )));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(SimError::Config("max_range must be positive".into()));
        }
        if !(self.tilt_down.abs() < 90.0 && self.height_above_ground.is_finite()) {
            return Err(SimError::Config("tilt_down must be in (-90, 90)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum SemanticClass {
    Ground = 0,
    Bush = 1,
    Tree = 2,
    Rock = 3,
    Water = 4,
    Debris = 5,
    Artificial = 6,
    Sky = 7,
}

impl SemanticClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        use SemanticClass::*;
        [Ground, Bush, Tree, Rock, Water, Debris, Artificial, Sky].get(v as usize).copied()
    }

    pub fn is_object(self) -> bool {
        use SemanticClass::*;
        matches!(self, Bush | Tree | Rock | Debris | Artificial)
    }

    fn of_object(obj: &PlacedObject) -> Self {
        use crate::scene::ObjectCategory::*;
        match obj.category {
            Bush => SemanticClass::Bush,
            Tree => SemanticClass::Tree,
            Rock => SemanticClass::Rock,
            Debris => SemanticClass::Debris,
            Artificial => SemanticClass::Artificial,
        }
    }

    fn of_material(m: Material) -> Self {
        match m {
            Material::Water | Material::Ice => SemanticClass::Water,
            _ => SemanticClass::Ground,
        }
    }

    /// False-color palette for debug images.
    pub fn color(self) -> [u8; 3] {
        match self {
            SemanticClass::Ground => [120, 160, 80],
            SemanticClass::Bush => [40, 110, 40],
            SemanticClass::Tree => [90, 60, 30],
            SemanticClass::Rock => [128, 128, 128],
            SemanticClass::Water => [40, 90, 200],
            SemanticClass::Debris => [160, 120, 60],
            SemanticClass::Artificial => [220, 40, 200],
            SemanticClass::Sky => [170, 210, 240],
        }
    }
}

/// One capture: depth, semantic and instance channels, row-major, row 0 at
/// the top of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub semantic: Vec<SemanticClass>,
    pub instance: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ChannelId {
    Depth = 1,
    Semantic = 2,
    Instance = 3,
}

pub const FRAME_MAGIC: [u8; 4] = *b"TNFR";
pub const CHANNEL_HEADER_LEN: usize = 16;

impl Frame {
    #[inline]
    pub fn index(&self, row: u32, col: u32) -> usize {
        (row * self.width + col) as usize
    }

    /// Serializes one channel: 16-byte header (magic, channel id, width,
    /// height; little-endian u32s) followed by the row-major payload.
    pub fn encode_channel(&self, channel: ChannelId) -> Vec<u8> {
        let n = (self.width * self.height) as usize;
        let elem = match channel {
            ChannelId::Semantic => 1,
            _ => 4,
        };
        let mut out = Vec::with_capacity(CHANNEL_HEADER_LEN + n * elem);
        out.extend_from_slice(&FRAME_MAGIC);
        out.extend_from_slice(&(channel as u32).to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        match channel {
            ChannelId::Depth => self.depth.iter().for_each(|d| out.extend_from_slice(&d.to_le_bytes())),
            ChannelId::Semantic => out.extend(self.semantic.iter().map(|&s| s as u8)),
            ChannelId::Instance => self.instance.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes())),
        }
        out
    }

    /// Depth, semantic and instance blobs, in that order.
    pub fn encode(&self) -> [Vec<u8>; 3] {
        [
            self.encode_channel(ChannelId::Depth),
            self.encode_channel(ChannelId::Semantic),
            self.encode_channel(ChannelId::Instance),
        ]
    }

    pub fn decode(blobs: &[impl AsRef<[u8]>]) -> Result<Frame> {
        let bad = |msg: String| SimError::MalformedFrame(msg);
        if blobs.len() != 3 {
            return Err(bad(format!("expected 3 channels, got {}", blobs.len())));
        }
        let mut dims = None;
        let mut frame = Frame { width: 0, height: 0, depth: vec![], semantic: vec![], instance: vec![] };
        for blob in blobs {
            let blob = blob.as_ref();
            if blob.len() < CHANNEL_HEADER_LEN || blob[..4] != FRAME_MAGIC {
                return Err(bad("missing channel header".into()));
            }
            let word = |k: usize| u32::from_le_bytes(blob[k..k + 4].try_into().unwrap());
            let (id, w, h) = (word(4), word(8), word(12));
            if *dims.get_or_insert((w, h)) != (w, h) {
                return Err(bad("channel dimensions differ".into()));
            }
            let n = (w as usize) * (h as usize);
            let payload = &blob[CHANNEL_HEADER_LEN..];
            let expect = |elem: usize| {
                if payload.len() == n * elem {
                    Ok(())
                } else {
                    Err(bad(format!("channel {id}: expected {} bytes, got {}", n * elem, payload.len())))
                }
            };
            match id {
                1 => {
                    expect(4)?;
                    frame.depth = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                }
                2 => {
                    expect(1)?;
                    frame.semantic = payload
                        .iter()
                        .map(|&v| SemanticClass::from_u8(v).ok_or_else(|| bad(format!("bad label {v}"))))
                        .collect::<Result<_>>()?;
                }
                3 => {
                    expect(4)?;
                    frame.instance = payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
                }
                other => return Err(bad(format!("unknown channel id {other}"))),
            }
        }
        let (w, h) = dims.unwrap_or((0, 0));
        let n = (w * h) as usize;
        if frame.depth.len() != n || frame.semantic.len() != n || frame.instance.len() != n {
            return Err(bad("missing or duplicated channel".into()));
        }
        frame.width = w;
        frame.height = h;
        Ok(frame)
    }

    /// Binary PPM of the semantic channel in false color.
    pub fn false_color_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for s in &self.semantic {
            out.extend_from_slice(&s.color());
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Vec3 {
    x: f64,
    y: f64,
    z: f64,
}

impl Vec3 {
    fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    fn add_scaled(self, o: Vec3, s: f64) -> Vec3 {
        Vec3::new(self.x + o.x * s, self.y + o.y * s, self.z + o.z * s)
    }

    fn normalized(self) -> Vec3 {
        let n = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Smallest root of `a t^2 + 2 b t + c = 0` above `t_min`, if any.
#[inline]
fn smallest_root(a: f64, b: f64, c: f64, t_min: f64) -> Option<(f64, f64)> {
    let disc = b * b - a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    Some(((-b - sq) / a, (-b + sq) / a)).filter(|&(_, t1)| t1 > t_min)
}

const T_EPS: f64 = 1e-9;

/// Object geometry in the form the intersection tests want, derived once
/// per scene.
#[derive(Debug, Clone, Copy)]
struct ObjGeom {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    bottom: f64,
    top: f64,
    sin_yaw: f64,
    cos_yaw: f64,
}

impl ObjGeom {
    fn of(obj: &PlacedObject) -> Self {
        let [cx, cy, cz] = obj.position;
        let (sin_yaw, cos_yaw) = obj.yaw.to_radians().sin_cos();
        ObjGeom {
            kind: obj.shape,
            cx,
            cy,
            r: obj.footprint_radius,
            bottom: cz - BURIAL_DEPTH,
            top: cz + obj.height,
            sin_yaw,
            cos_yaw,
        }
    }
}

/// Distance along the (unit) ray to the first surface of the object.
fn intersect_object(g: &ObjGeom, o: Vec3, d: Vec3) -> Option<f64> {
    let (cx, cy, r, bottom, top) = (g.cx, g.cy, g.r, g.bottom, g.top);
    match g.kind {
        ShapeKind::Cylinder => {
            let (fx, fy) = (o.x - cx, o.y - cy);
            let mut best = f64::INFINITY;
            let a = d.x * d.x + d.y * d.y;
            if let Some((t0, t1)) = smallest_root(a, fx * d.x + fy * d.y, fx * fx + fy * fy - r * r, T_EPS) {
                for t in [t0, t1] {
                    let z = o.z + t * d.z;
                    if t > T_EPS && z >= bottom && z <= top {
                        best = best.min(t);
                        break;
                    }
                }
            }
            if d.z != 0.0 {
                for plane in [top, bottom] {
                    let t = (plane - o.z) / d.z;
                    if t > T_EPS && t < best {
                        let (px, py) = (fx + t * d.x, fy + t * d.y);
                        if px * px + py * py <= r * r {
                            best = t;
                        }
                    }
                }
            }
            best.is_finite().then_some(best)
        }
        ShapeKind::Sphere => {
            let center_z = top - r;
            let f = Vec3::new(o.x - cx, o.y - cy, o.z - center_z);
            let b = f.x * d.x + f.y * d.y + f.z * d.z;
            let c = f.x * f.x + f.y * f.y + f.z * f.z - r * r;
            smallest_root(1.0, b, c, T_EPS).map(|(t0, t1)| if t0 > T_EPS { t0 } else { t1 })
        }
        ShapeKind::Box => {
            let half = r / std::f64::consts::SQRT_2;
            let (s, c) = (g.sin_yaw, g.cos_yaw);
            // Rotate into the box frame.
            let (fx, fy) = (o.x - cx, o.y - cy);
            let lo = [fx * c + fy * s, -fx * s + fy * c, o.z];
            let ld = [d.x * c + d.y * s, -d.x * s + d.y * c, d.z];
            let mins = [-half, -half, bottom];
            let maxs = [half, half, top];
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if ld[k].abs() < 1e-15 {
                    if lo[k] < mins[k] || lo[k] > maxs[k] {
                        return None;
                    }
                    continue;
                }
                let t1 = (mins[k] - lo[k]) / ld[k];
                let t2 = (maxs[k] - lo[k]) / ld[k];
                t_near = t_near.max(t1.min(t2));
                t_far = t_far.min(t1.max(t2));
            }
            if t_near > t_far || t_far <= T_EPS {
                return None;
            }
            Some(if t_near > T_EPS { t_near } else { t_far })
        }
    }
}

/// Samples per side of a terrain block.
const BLOCK_SAMPLES: usize = 8;

/// Coarse grid of per-block terrain bounds. Bilinear interpolation never
/// exceeds its corner samples and its gradient never exceeds the largest
/// sample difference along each axis, so both bounds hold everywhere inside
/// a block, boundary included.
#[derive(Debug, Clone)]
struct HeightBlocks {
    size: f64,
    inv_size: f64,
    cols: usize,
    rows: usize,
    max: Vec<f64>,
    gradient: Vec<f64>,
}

impl HeightBlocks {
    fn new(hm: &Heightmap) -> Self {
        let (w, h) = (hm.width_cells(), hm.height_cells());
        let cols = (w - 1).div_ceil(BLOCK_SAMPLES);
        let rows = (h - 1).div_ceil(BLOCK_SAMPLES);
        let mut max = vec![f64::NEG_INFINITY; cols * rows];
        let mut dx = vec![0.0f64; cols * rows];
        let mut dy = vec![0.0f64; cols * rows];
        // Walk the lattice cells; each belongs to exactly one block.
        for j in 0..h - 1 {
            for i in 0..w - 1 {
                let k = (j / BLOCK_SAMPLES) * cols + i / BLOCK_SAMPLES;
                let (h00, h10) = (hm.sample(i, j), hm.sample(i + 1, j));
                let (h01, h11) = (hm.sample(i, j + 1), hm.sample(i + 1, j + 1));
                max[k] = max[k].max(h00.max(h10).max(h01).max(h11));
                dx[k] = dx[k].max((h10 - h00).abs()).max((h11 - h01).abs());
                dy[k] = dy[k].max((h01 - h00).abs()).max((h11 - h10).abs());
            }
        }
        let res = hm.cell_resolution();
        let gradient = dx.iter().zip(&dy).map(|(gx, gy)| (gx * gx + gy * gy).sqrt() / res).collect();
        let size = BLOCK_SAMPLES as f64 * res;
        HeightBlocks { size, inv_size: 1.0 / size, cols, rows, max, gradient }
    }
}

/// Locates the crossing inside a bracket `lo` (gap above zero) to `hi` (gap
/// at or below zero) by false position with the Illinois correction, which
/// keeps the bracket like bisection does but is exact on planar patches.
#[inline(always)]
fn refine(gap: impl Fn(f64) -> f64, lo: (f64, f64), hi: (f64, f64)) -> f64 {
    let ((mut a, mut ga), (mut b, mut gb)) = (lo, hi);
    if gb == 0.0 {
        return b;
    }
    let mut side = 0i8;
    for _ in 0..REFINE_ITERATIONS {
        let c = ((a * gb - b * ga) / (gb - ga)).clamp(a, b);
        let gc = gap(c);
        if gc > 0.0 {
            a = c;
            ga = gc;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            gb = gc;
            if gc == 0.0 {
                break;
            }
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
        if b - a < REFINE_WIDTH {
            break;
        }
    }
    if ga.abs() < gb.abs() {
        a
    } else {
        b
    }
}

/// Per-scene acceleration tables for ray casting. Built on first use and
/// cached on the scene.
#[derive(Debug, Clone)]
pub(crate) struct RayAccel {
    blocks: HeightBlocks,
    geoms: Vec<ObjGeom>,
    /// Highest object top per index bucket, row-major; `-inf` when empty.
    bucket_tops: Vec<f64>,
    objects_top: f64,
}

impl RayAccel {
    pub(crate) fn build(scene: &SceneInstance) -> Self {
        let geoms: Vec<ObjGeom> = scene.placed_objects().iter().map(ObjGeom::of).collect();
        let index = scene.object_index();
        let mut bucket_tops = Vec::with_capacity(index.cols() * index.rows());
        for row in 0..index.rows() {
            for col in 0..index.cols() {
                let top = index.bucket(col, row).iter().map(|&k| geoms[k as usize].top).fold(f64::NEG_INFINITY, f64::max);
                bucket_tops.push(top);
            }
        }
        let objects_top = geoms.iter().map(|g| g.top).fold(f64::NEG_INFINITY, f64::max);
        RayAccel { blocks: HeightBlocks::new(scene.heightmap()), geoms, bucket_tops, objects_top }
    }
}

struct RayCaster<'a> {
    scene: &'a SceneInstance,
    hm: &'a Heightmap,
    ext_x: f64,
    ext_y: f64,
    max_gradient: f64,
    max_elevation: f64,
    blocks: &'a HeightBlocks,
    geoms: &'a [ObjGeom],
    bucket_tops: &'a [f64],
    objects_top: f64,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    semantic: SemanticClass,
    instance: u32,
}

impl<'a> RayCaster<'a> {
    fn new(scene: &'a SceneInstance) -> Self {
        let hm = scene.heightmap();
        let accel = scene.ray_accel();
        RayCaster {
            scene,
            hm,
            ext_x: hm.extent_x(),
            ext_y: hm.extent_y(),
            max_gradient: hm.max_gradient(),
            max_elevation: hm.max_elevation(),
            blocks: &accel.blocks,
            geoms: &accel.geoms,
            bucket_tops: &accel.bucket_tops,
            objects_top: accel.objects_top,
        }
    }

    #[inline(always)]
    fn ground(&self, x: f64, y: f64) -> f64 {
        self.hm.height_unchecked(x.max(0.0).min(self.ext_x), y.max(0.0).min(self.ext_y))
    }

    /// Height of the ray above the ground at parameter `t`.
    #[inline(always)]
    fn gap(&self, o: Vec3, d: Vec3, t: f64) -> f64 {
        o.z + t * d.z - self.ground(o.x + t * d.x, o.y + t * d.y)
    }

    /// Ray parameter at which the ray leaves the map footprint.
    fn exit_t(&self, o: Vec3, d: Vec3) -> f64 {
        let axis = |p: f64, v: f64, ext: f64| {
            if v > 0.0 {
                (ext - p) / v
            } else if v < 0.0 {
                -p / v
            } else {
                f64::INFINITY
            }
        };
        axis(o.x, d.x, self.ext_x).min(axis(o.y, d.y, self.ext_y)).max(0.0)
    }

    /// Terrain intersection by marching. Steps are never shorter than
    /// `MARCH_STEP`; they grow when the gradient bound of the block under
    /// the ray proves no crossing is possible before the block is left.
    /// `g0` is the ray origin's height above ground.
    fn march_terrain(&self, o: Vec3, d: Vec3, t_max: f64, g0: f64) -> Option<f64> {
        let t_end = self.exit_t(o, d).min(t_max);
        let gap = |t: f64| self.gap(o, d, t);
        let horizontal = (d.x * d.x + d.y * d.y).sqrt();
        if self.max_gradient * horizontal - d.z <= 0.0 {
            // The ray climbs faster than any slope and starts above ground.
            return (g0 <= 0.0).then_some(T_EPS);
        }
        let blocks = self.blocks;
        let block_exit = |p: f64, v: f64, cell: usize| {
            if v > 0.0 {
                ((cell + 1) as f64 * blocks.size - p) / v
            } else if v < 0.0 {
                (cell as f64 * blocks.size - p) / v
            } else {
                f64::INFINITY
            }
        };
        let mut t = 0.0;
        let mut g = g0;
        if g <= 0.0 {
            return Some(T_EPS);
        }
        loop {
            if d.z >= 0.0 && o.z + t * d.z > self.max_elevation {
                return None;
            }
            let (x, y) = (o.x + t * d.x, o.y + t * d.y);
            let bc = ((x * blocks.inv_size) as i32 as usize).min(blocks.cols - 1);
            let br = ((y * blocks.inv_size) as i32 as usize).min(blocks.rows - 1);
            let k = br * blocks.cols + bc;
            let exit = block_exit(o.x, d.x, bc).min(block_exit(o.y, d.y, br));
            let lowest = o.z + d.z * if d.z < 0.0 { exit.min(t_end) } else { t };
            let closing = blocks.gradient[k] * horizontal - d.z;
            let safe = if lowest > blocks.max[k] || closing <= 0.0 {
                exit - t + 1e-6
            } else {
                (g / closing).min(exit - t + 1e-6)
            };
            let tn = (t + safe.max(MARCH_STEP)).min(t_end);
            let gn = gap(tn);
            if gn <= 0.0 {
                return Some(refine(gap, (t, g), (tn, gn)));
            }
            if tn >= t_end {
                return None;
            }
            t = tn;
            g = gn;
        }
    }

    /// Nearest object hit closer than `t_limit`, walking the object index
    /// along the ray's ground projection.
    fn cast_objects(&self, o: Vec3, d: Vec3, t_limit: f64) -> Option<(f64, usize)> {
        if self.geoms.is_empty() || (d.z >= 0.0 && o.z > self.objects_top) {
            return None;
        }
        let index = self.scene.object_index();
        let size = index.bucket_size();
        let (cols, rows) = (index.cols() as i64, index.rows() as i64);
        let (mut col, mut row) = {
            let (c, r) = index.clamp_bucket(o.x, o.y);
            (c as i64, r as i64)
        };
        let mut best: Option<(f64, usize)> = None;

        let axis = |p: f64, v: f64, cell: i64| -> (i64, f64, f64) {
            if v > 0.0 {
                (1, ((cell + 1) as f64 * size - p) / v, size / v)
            } else if v < 0.0 {
                (-1, (cell as f64 * size - p) / v, -size / v)
            } else {
                (0, f64::INFINITY, f64::INFINITY)
            }
        };
        let (step_c, mut next_c, delta_c) = axis(o.x, d.x, col);
        let (step_r, mut next_r, delta_r) = axis(o.y, d.y, row);
        let mut entry = 0.0f64;
        loop {
            let exit = next_c.min(next_r);
            // Every object is registered in each bucket its footprint
            // touches, so the ray can only meet it while inside the bucket.
            let lowest = o.z + d.z * if d.z < 0.0 { exit.min(t_limit) } else { entry };
            let b = (row * cols + col) as usize;
            if lowest <= self.bucket_tops[b] {
                for &k in index.bucket(col as usize, row as usize) {
                    let k = k as usize;
                    if let Some(t) = intersect_object(&self.geoms[k], o, d) {
                        if t < t_limit && best.is_none_or(|(bt, bk)| t < bt || (t == bt && k < bk)) {
                            best = Some((t, k));
                        }
                    }
                }
            }
            if exit >= t_limit || best.is_some_and(|(bt, _)| bt <= exit) {
                break;
            }
            if d.z >= 0.0 && o.z + d.z * exit > self.objects_top {
                break;
            }
            entry = exit;
            if next_c < next_r {
                col += step_c;
                next_c += delta_c;
            } else {
                row += step_r;
                next_r += delta_r;
            }
            if col < 0 || row < 0 || col >= cols || row >= rows {
                break;
            }
        }
        best
    }

    /// Nearest object hit closer than `t_limit` among `candidates`, whose
    /// centers are relative to `o`. They must be in ascending index order so
    /// ties resolve as in [`Self::cast_objects`].
    fn cast_candidates(&self, o: Vec3, d: Vec3, t_limit: f64, candidates: &[Bound]) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        let horizontal_sq = d.x * d.x + d.y * d.y;
        let horizontal = horizontal_sq.sqrt();
        for b in candidates {
            // Footprint circle against the ray's ground track up to `t_limit`.
            let (cx, cy, r) = (b.center.x, b.center.y, b.footprint);
            let across = cx * d.y - cy * d.x;
            let along = cx * d.x + cy * d.y;
            let reach = r * horizontal;
            if across * across > reach * reach || along + reach < 0.0 || along - reach > t_limit * horizontal_sq {
                continue;
            }
            let k = b.index as usize;
            if let Some(t) = intersect_object(&self.geoms[k], o, d) {
                if t < best.map_or(t_limit, |(bt, _)| bt) {
                    best = Some((t, k));
                }
            }
        }
        best
    }

    /// `g0` is the origin's height above ground, shared by all rays of a
    /// frame. `candidates` restricts the object test to a known superset of
    /// the objects the ray can meet; `None` walks the object index instead.
    fn cast(&self, o: Vec3, g0: f64, d: Vec3, max_range: f64, candidates: Option<&[Bound]>) -> Option<Hit> {
        let terrain = self.march_terrain(o, d, max_range, g0);
        let limit = terrain.unwrap_or(max_range);
        let object = match candidates {
            Some(c) => self.cast_candidates(o, d, limit, c),
            None => self.cast_objects(o, d, limit),
        };
        if let Some((t, k)) = object {
            let obj = &self.scene.placed_objects()[k];
            return Some(Hit { t, semantic: SemanticClass::of_object(obj), instance: obj.instance_id });
        }
        terrain.map(|t| {
            let (x, y) = (o.x + t * d.x, o.y + t * d.y);
            let (i, j) = self.hm.nearest_sample(x, y);
            Hit { t, semantic: SemanticClass::of_material(self.scene.material_map().get(i, j)), instance: 0 }
        })
    }

    /// Bounding spheres of the objects that could be hit within `range` of
    /// `origin`.
    fn nearby_spheres(&self, origin: Vec3, range: f64) -> Vec<Bound> {
        self.geoms
            .iter()
            .enumerate()
            .filter_map(|(k, g)| {
                let (dx, dy) = (g.cx - origin.x, g.cy - origin.y);
                let reach = range + g.r;
                if dx * dx + dy * dy > reach * reach {
                    return None;
                }
                let low = g.bottom.min(g.top - 2.0 * g.r);
                let half_height = (g.top - low) / 2.0;
                let center = Vec3::new(dx, dy, low + half_height - origin.z);
                Some(Bound { index: k as u32, center, radius: g.r.hypot(half_height), footprint: g.r })
            })
            .collect()
    }
}

/// Bounding sphere of one object, centered relative to the camera.
#[derive(Debug, Clone, Copy)]
struct Bound {
    index: u32,
    center: Vec3,
    radius: f64,
    footprint: f64,
}

/// Pixels per side of the tiles used to cull objects before casting.
const TILE: usize = 16;
/// Above this many candidates a tile falls back to walking the object index.
const TILE_CANDIDATES: usize = 12;

/// Objects whose bounding sphere meets the cone spanned by four corner
/// directions (in cyclic order) from the camera.
fn tile_candidates(corners: [Vec3; 4], inside: Vec3, spheres: &[Bound], out: &mut Vec<Bound>) {
    let mut planes = [Vec3::new(0.0, 0.0, 0.0); 4];
    for (i, plane) in planes.iter_mut().enumerate() {
        let n = corners[i].cross(corners[(i + 1) % 4]);
        let len = n.norm();
        if len > 1e-12 {
            let n = n.scale(1.0 / len);
            *plane = if n.dot(inside) < 0.0 { n.scale(-1.0) } else { n };
        }
    }
    out.clear();
    out.extend(spheres.iter().filter(|b| planes.iter().all(|n| n.dot(b.center) >= -b.radius)));
}

/// Renders one frame from a camera mounted on `agent`.
pub fn capture(scene: &SceneInstance, agent: &AgentState, cfg: &CameraConfig) -> Frame {
    capture_columns(scene, agent, cfg, 0..cfg.resolution)
}

/// Renders only the given column range of a frame. Every rendered pixel is
/// identical to the full capture; the rest read as empty sky at
/// `max_range`.
pub fn capture_columns(scene: &SceneInstance, agent: &AgentState, cfg: &CameraConfig, columns: Range<u32>) -> Frame {
    let n = cfg.resolution;
    let (first, end) = (columns.start.min(n) as usize, columns.end.min(n) as usize);
    let caster = RayCaster::new(scene);
    let origin = Vec3::new(agent.x, agent.y, agent.z + cfg.height_above_ground);
    let yaw = agent.heading + cfg.relative_yaw.to_radians();
    let pitch = -cfg.tilt_down.to_radians();
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let forward = Vec3::new(cp * cy, cp * sy, sp);
    let right = Vec3::new(sy, -cy, 0.0);
    let up = Vec3::new(-sp * cy, -sp * sy, cp);
    let half = n as f64 / 2.0;
    let tan_half = (cfg.fov_horizontal.to_radians() / 2.0).tan();
    let max_range = cfg.max_range;

    let spheres = caster.nearby_spheres(origin, max_range);
    let g0 = origin.z - caster.ground(origin.x, origin.y);
    let ray = |a: f64, b: f64| forward.add_scaled(up, b).add_scaled(right, a);
    let a_of = |col: usize| (col as f64 - half) / half * tan_half;
    let b_of = |row: usize| (half - row as f64) / half * tan_half;

    let len = (n * n) as usize;
    let band = TILE * n as usize;
    let mut depth = vec![max_range as f32; len];
    let mut semantic = vec![SemanticClass::Sky; len];
    let mut instance = vec![0u32; len];
    depth
        .par_chunks_mut(band)
        .zip(semantic.par_chunks_mut(band))
        .zip(instance.par_chunks_mut(band))
        .enumerate()
        .for_each(|(tile_row, ((depth_band, sem_band), inst_band))| {
            let rows = depth_band.len() / n as usize;
            let (r0, r1) = (tile_row * TILE, tile_row * TILE + rows - 1);
            let (b0, b1) = (b_of(r0), b_of(r1));
            let mut candidates = Vec::new();
            for c0 in (first..end).step_by(TILE) {
                let c1 = (c0 + TILE).min(end) - 1;
                let (a0, a1) = (a_of(c0), a_of(c1));
                let corners = [ray(a0, b0), ray(a1, b0), ray(a1, b1), ray(a0, b1)];
                let inside = ray((a0 + a1) / 2.0, (b0 + b1) / 2.0);
                tile_candidates(corners, inside, &spheres, &mut candidates);
                let subset = (candidates.len() <= TILE_CANDIDATES).then_some(candidates.as_slice());
                for r in 0..rows {
                    let b = b_of(r0 + r);
                    for col in c0..=c1 {
                        let dir = ray(a_of(col), b).normalized();
                        let px = r * n as usize + col;
                        match caster.cast(origin, g0, dir, max_range, subset) {
                            Some(hit) if hit.t <= max_range => {
                                depth_band[px] = (hit.t as f32).min(max_range as f32);
                                sem_band[px] = hit.semantic;
                                inst_band[px] = hit.instance;
                            }
                            _ => {
                                depth_band[px] = max_range as f32;
                                sem_band[px] = SemanticClass::Sky;
                                inst_band[px] = 0;
                            }
                        }
                    }
                }
            }
        });
    Frame { width: n, height: n, depth, semantic, instance }
}

/// Low-level sensor readings. Angles in radians, counter-clockwise positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proprioception {
    pub position: (f64, f64),
    pub heading: f64,
    pub target_position: (f64, f64),
    pub distance_to_target: f64,
    /// Distance over the map diagonal.
    pub normalized_distance: f64,
    /// Signed bearing of the target relative to the heading.
    pub heading_to_target: f64,
    /// Previous distance minus current distance; positive means progress.
    pub distance_delta: f64,
    pub speed: f64,
    pub acceleration: f64,
    /// `(roll, pitch, yaw)`.
    pub attitude: (f64, f64, f64),
    pub collision_flag: bool,
}

/// Field order of [`Proprioception::to_vector`].
pub const PROPRIOCEPTION_LAYOUT: [&str; 15] = [
    "x",
    "y",
    "heading",
    "target_x",
    "target_y",
    "distance_to_target",
    "normalized_distance",
    "heading_to_target",
    "distance_delta",
    "speed",
    "acceleration",
    "roll",
    "pitch",
    "yaw",
    "collision_flag",
];

impl Proprioception {
    pub fn to_vector(&self) -> [f64; 15] {
        [
            self.position.0,
            self.position.1,
            self.heading,
            self.target_position.0,
            self.target_position.1,
            self.distance_to_target,
            self.normalized_distance,
            self.heading_to_target,
            self.distance_delta,
            self.speed,
            self.acceleration,
            self.attitude.0,
            self.attitude.1,
            self.attitude.2,
            if self.collision_flag { 1.0 } else { 0.0 },
        ]
    }
}

pub fn sense(
    scene: &SceneInstance,
    agent: &AgentState,
    goal: (f64, f64),
    previous_distance: f64,
    collision: bool,
) -> Proprioception {
    let (dx, dy) = (goal.0 - agent.x, goal.1 - agent.y);
    let distance = dx.hypot(dy);
    let diagonal = scene.heightmap().diagonal();
    let bearing = if distance > 0.0 { wrap_angle(dy.atan2(dx) - agent.heading) } else { 0.0 };
    Proprioception {
        position: (agent.x, agent.y),
        heading: agent.heading,
        target_position: goal,
        distance_to_target: distance,
        normalized_distance: (distance / diagonal).min(1.0),
        heading_to_target: bearing,
        distance_delta: previous_distance - distance,
        speed: agent.linear_velocity,
        acceleration: agent.acceleration,
        attitude: (agent.roll, agent.pitch, agent.heading),
        collision_flag: collision,
    }
}
