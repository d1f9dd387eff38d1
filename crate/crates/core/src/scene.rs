//! Scene descriptors and procedural scene generation.
//!
//! A [`SceneDescriptor`] describes a scene type: its base map archetype, the
//! bounds on placement cell size and the objects that may be scattered over
//! it. [`generate_scene`] turns a descriptor plus [`GenerationParams`] into an
//! immutable [`SceneInstance`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Result, SimError};
use crate::rng::{derive_seed, stream, streams};
use crate::sensors::RayAccel;
use crate::terrain::{
    generate_basemap, Heightmap, MaterialMap, SceneType, SceneTypeSpec, DEFAULT_MAP_SIZE,
};

/// Attempts made by [`sample_start_goal`] before giving up.
pub const SPAWN_ATTEMPTS: usize = 10_000;
/// Slope above which terrain is not drivable.
pub const DEFAULT_MAX_TRAVERSABLE_SLOPE: f64 = 35.0;

const INDEX_BUCKET_SIZE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCategory {
    Bush,
    Tree,
    Rock,
    Debris,
    Artificial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Vertical cylinder standing on the ground.
    Cylinder,
    /// Sphere whose top sits `height` above the ground contact point.
    Sphere,
    /// Square prism; `radius` is its circumradius.
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub radius: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObjectDescriptor {
    pub object_id: String,
    pub category: ObjectCategory,
    pub shape: Shape,
    pub size_min: f64,
    pub size_max: f64,
    /// Degrees.
    pub max_inclination: f64,
    /// Degrees.
    pub max_ground_slope: f64,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl WorldObjectDescriptor {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(SimError::Config(format!("object `{}`: {msg}", self.object_id)));
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max.is_finite()) {
            return fail("requires 0 < size_min <= size_max");
        }
        if !(0.0..90.0).contains(&self.max_inclination) {
            return fail("max_inclination must be in [0, 90)");
        }
        if !(0.0..90.0).contains(&self.max_ground_slope) {
            return fail("max_ground_slope must be in [0, 90)");
        }
        if !(self.shape.radius > 0.0 && self.shape.height > 0.0) {
            return fail("shape radius and height must be positive");
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return fail("weight must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub name: String,
    #[serde(deserialize_with = "deserialize_base_map")]
    pub base_map: SceneTypeSpec,
    pub cell_min: f64,
    pub cell_max: f64,
    pub objects: Vec<WorldObjectDescriptor>,
}

/// `base_map` is either `{"scene_type": "<built-in>"}` or a full spec.
#[derive(Deserialize)]
#[serde(untagged)]
enum BaseMapRef {
    BuiltIn(BuiltInRef),
    Custom(SceneTypeSpec),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BuiltInRef {
    scene_type: SceneType,
}

fn deserialize_base_map<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SceneTypeSpec, D::Error> {
    match BaseMapRef::deserialize(d)? {
        BaseMapRef::BuiltIn(r) => SceneTypeSpec::built_in(r.scene_type).ok_or_else(|| {
            serde::de::Error::custom("scene_type `Custom` requires explicit base map parameters")
        }),
        BaseMapRef::Custom(spec) => Ok(spec),
    }
}

impl SceneDescriptor {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_min > 0.0 && self.cell_min <= self.cell_max && self.cell_max.is_finite()) {
            return Err(SimError::Config(format!(
                "scene `{}`: requires 0 < cell_min <= cell_max",
                self.name
            )));
        }
        if self.objects.is_empty() {
            return Err(SimError::Config(format!("scene `{}` has no objects", self.name)));
        }
        self.base_map.validate()?;
        self.objects.iter().try_for_each(WorldObjectDescriptor::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let desc: SceneDescriptor = serde_json::from_str(text)?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn built_in(scene_type: SceneType) -> Option<Self> {
        let base_map = SceneTypeSpec::built_in(scene_type)?;
        let obj = |id: &str, category, kind, radius, height, size: (f64, f64), incl, slope| {
            WorldObjectDescriptor {
                object_id: id.to_string(),
                category,
                shape: Shape { kind, radius, height },
                size_min: size.0,
                size_max: size.1,
                max_inclination: incl,
                max_ground_slope: slope,
                weight: 1.0,
            }
        };
        use ObjectCategory::*;
        use ShapeKind::*;
        let objects = match scene_type {
            SceneType::Meadow => vec![
                obj("small_rock", Rock, Sphere, 0.3, 0.3, (0.7, 1.3), 15.0, 30.0),
                obj("medium_rock", Rock, Sphere, 0.6, 0.6, (0.8, 1.4), 15.0, 25.0),
                obj("bush", Bush, Sphere, 0.6, 0.9, (0.6, 1.2), 10.0, 30.0),
            ],
            SceneType::Forest => vec![
                obj("tree", Tree, Cylinder, 0.35, 8.0, (0.7, 1.5), 20.0, 25.0),
                obj("rock", Rock, Sphere, 0.5, 0.5, (0.7, 1.4), 15.0, 30.0),
                obj("branch_debris", Debris, Box, 0.8, 0.25, (0.6, 1.3), 25.0, 35.0),
                obj("bush", Bush, Sphere, 0.7, 1.0, (0.6, 1.2), 10.0, 30.0),
            ],
            SceneType::VolcanicField => vec![
                obj("small_rock", Rock, Sphere, 0.3, 0.3, (0.7, 1.3), 20.0, 35.0),
                obj("medium_rock", Rock, Sphere, 0.7, 0.7, (0.8, 1.3), 20.0, 30.0),
                obj("large_rock", Rock, Box, 1.2, 1.5, (0.8, 1.2), 15.0, 20.0),
            ],
            SceneType::ArcticGlacier => vec![
                obj("snow_rock", Rock, Sphere, 0.6, 0.6, (0.7, 1.4), 15.0, 30.0),
                obj("ice_slab", Rock, Box, 1.0, 0.4, (0.8, 1.5), 10.0, 20.0),
            ],
            SceneType::Custom => return None,
        };
        Some(SceneDescriptor {
            name: scene_type.name().to_string(),
            base_map,
            cell_min: 2.0,
            cell_max: 10.0,
            objects,
        })
    }
}

/// Named scene descriptors: the four built-ins plus any loaded from disk.
#[derive(Debug, Clone)]
pub struct SceneRegistry {
    descriptors: BTreeMap<String, SceneDescriptor>,
}

impl Default for SceneRegistry {
    fn default() -> Self {
        Self::with_built_ins()
    }
}

impl SceneRegistry {
    pub fn with_built_ins() -> Self {
        let descriptors = SceneType::BUILT_IN
            .iter()
            .filter_map(|&t| SceneDescriptor::built_in(t))
            .map(|d| (d.name.clone(), d))
            .collect();
        SceneRegistry { descriptors }
    }

    pub fn insert(&mut self, desc: SceneDescriptor) -> Result<()> {
        desc.validate()?;
        self.descriptors.insert(desc.name.clone(), desc);
        Ok(())
    }

    /// Loads every `*.json` descriptor in `dir`. Returns how many were added.
    pub fn load_dir(&mut self, dir: impl AsRef<Path>) -> Result<usize> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in &paths {
            let text = std::fs::read_to_string(path)?;
            let desc = SceneDescriptor::from_json(&text).map_err(|e| {
                SimError::Config(format!("{}: {e}", path.display()))
            })?;
            self.insert(desc)?;
        }
        Ok(paths.len())
    }

    /// Looks up by exact name, then case-insensitively.
    pub fn get(&self, name: &str) -> Result<&SceneDescriptor> {
        self.descriptors
            .get(name)
            .or_else(|| {
                self.descriptors
                    .values()
                    .find(|d| d.name.eq_ignore_ascii_case(name))
            })
            .ok_or_else(|| SimError::UnknownScene(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.descriptors.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub difficulty: f64,
    pub grid_resolution: f64,
    pub target_distance: f64,
    pub seed: u64,
    #[serde(default = "default_map_size")]
    pub map_size: f64,
}

fn default_map_size() -> f64 {
    DEFAULT_MAP_SIZE
}

impl GenerationParams {
    /// Difficulty and grid resolution are clamped to `[0, 1]`.
    pub fn new(difficulty: f64, grid_resolution: f64, target_distance: f64, seed: u64) -> Self {
        GenerationParams {
            difficulty,
            grid_resolution,
            target_distance,
            seed,
            map_size: DEFAULT_MAP_SIZE,
        }
        .clamped()
    }

    pub fn with_map_size(mut self, map_size: f64) -> Self {
        self.map_size = map_size;
        self
    }

    pub fn clamped(mut self) -> Self {
        let unit = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        self.difficulty = unit(self.difficulty);
        self.grid_resolution = unit(self.grid_resolution);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_distance > 0.0 && self.target_distance.is_finite()) {
            return Err(SimError::Config(format!(
                "target_distance must be positive, got {}",
                self.target_distance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    /// Unique within a scene; 0 is reserved for terrain and sky.
    pub instance_id: u32,
    pub descriptor: String,
    pub category: ObjectCategory,
    pub shape: ShapeKind,
    /// Ground contact point `(x, y, z)`.
    pub position: [f64; 3],
    /// Degrees.
    pub yaw: f64,
    /// Degrees.
    pub inclination: f64,
    pub scale: f64,
    pub footprint_radius: f64,
    pub height: f64,
}

impl PlacedObject {
    #[inline]
    pub fn xy(&self) -> (f64, f64) {
        (self.position[0], self.position[1])
    }
}

/// Uniform bucket grid over object footprints.
#[derive(Debug, Clone)]
pub struct ObjectIndex {
    bucket_size: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl ObjectIndex {
    fn build(extent_x: f64, extent_y: f64, objects: &[PlacedObject]) -> Self {
        let bucket_size = INDEX_BUCKET_SIZE;
        let cols = ((extent_x / bucket_size).ceil() as usize).max(1);
        let rows = ((extent_y / bucket_size).ceil() as usize).max(1);
        let mut index = ObjectIndex { bucket_size, cols, rows, buckets: vec![Vec::new(); cols * rows] };
        for (k, obj) in objects.iter().enumerate() {
            let (x, y) = obj.xy();
            let r = obj.footprint_radius;
            let (c0, r0) = index.clamp_bucket(x - r, y - r);
            let (c1, r1) = index.clamp_bucket(x + r, y + r);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    index.buckets[row * cols + col].push(k as u32);
                }
            }
        }
        index
    }

    pub fn bucket_size(&self) -> f64 {
        self.bucket_size
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn clamp_bucket(&self, x: f64, y: f64) -> (usize, usize) {
        // Truncation and floor only disagree below zero, where both clamp to 0.
        let c = ((x / self.bucket_size) as i64).clamp(0, self.cols as i64 - 1) as usize;
        let r = ((y / self.bucket_size) as i64).clamp(0, self.rows as i64 - 1) as usize;
        (c, r)
    }

    /// Object indices stored in bucket `(col, row)`.
    #[inline]
    pub fn bucket(&self, col: usize, row: usize) -> &[u32] {
        &self.buckets[row * self.cols + col]
    }

    /// Indices of objects whose footprint may intersect the rectangle,
    /// sorted and deduplicated.
    pub fn query_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64, out: &mut Vec<u32>) {
        out.clear();
        let (c0, r0) = self.clamp_bucket(x0, y0);
        let (c1, r1) = self.clamp_bucket(x1, y1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                out.extend_from_slice(self.bucket(col, row));
            }
        }
        out.sort_unstable();
        out.dedup();
    }
}

/// One generated world. Immutable once built.
#[derive(Debug, Clone)]
pub struct SceneInstance {
    heightmap: Heightmap,
    material_map: MaterialMap,
    placed_objects: Vec<PlacedObject>,
    descriptor: SceneDescriptor,
    params: GenerationParams,
    cell_size_used: f64,
    index: ObjectIndex,
    ray_accel: OnceLock<RayAccel>,
}

impl SceneInstance {
    /// Assembles a scene from already-built parts. Object ids must be
    /// unique and non-zero.
    pub fn from_parts(
        heightmap: Heightmap,
        material_map: MaterialMap,
        placed_objects: Vec<PlacedObject>,
        descriptor: SceneDescriptor,
        params: GenerationParams,
        cell_size_used: f64,
    ) -> Result<Self> {
        if heightmap.width_cells() != material_map.width_cells()
            || heightmap.height_cells() != material_map.height_cells()
        {
            return Err(SimError::Config("heightmap and material map shapes differ".into()));
        }
        let mut ids: Vec<u32> = placed_objects.iter().map(|o| o.instance_id).collect();
        ids.sort_unstable();
        if ids.first() == Some(&0) || ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::Config("object instance ids must be unique and non-zero".into()));
        }
        let index = ObjectIndex::build(heightmap.extent_x(), heightmap.extent_y(), &placed_objects);
        Ok(SceneInstance {
            heightmap,
            material_map,
            placed_objects,
            descriptor,
            params,
            cell_size_used,
            index,
            ray_accel: OnceLock::new(),
        })
    }

    pub fn heightmap(&self) -> &Heightmap {
        &self.heightmap
    }

    pub(crate) fn ray_accel(&self) -> &RayAccel {
        self.ray_accel.get_or_init(|| RayAccel::build(self))
    }

    pub fn material_map(&self) -> &MaterialMap {
        &self.material_map
    }

    pub fn placed_objects(&self) -> &[PlacedObject] {
        &self.placed_objects
    }

    pub fn descriptor(&self) -> &SceneDescriptor {
        &self.descriptor
    }

    pub fn descriptor_name(&self) -> &str {
        &self.descriptor.name
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }

    pub fn cell_size_used(&self) -> f64 {
        self.cell_size_used
    }

    pub fn object_index(&self) -> &ObjectIndex {
        &self.index
    }

    /// Material of the sample nearest to `(x, y)` is traversable.
    pub fn material_traversable_at(&self, x: f64, y: f64) -> bool {
        let (i, j) = self.heightmap.nearest_sample(x, y);
        self.material_map.is_traversable(i, j)
    }

    pub fn to_export(&self, include_heightmap: bool) -> SceneExport {
        SceneExport {
            descriptor: self.descriptor.clone(),
            params: self.params,
            cell_size_used: self.cell_size_used,
            placed_objects: self.placed_objects.clone(),
            heightmap: include_heightmap.then(|| HeightmapExport {
                width_cells: self.heightmap.width_cells(),
                height_cells: self.heightmap.height_cells(),
                cell_resolution: self.heightmap.cell_resolution(),
                elevations: self.heightmap.elevations().to_vec(),
            }),
        }
    }

    /// Rebuilds a scene from an export. The base map is regenerated from
    /// the descriptor and seed; the object list is taken verbatim.
    pub fn from_export(export: &SceneExport) -> Result<Self> {
        let (hm, mm) = generate_basemap(
            &export.descriptor.base_map,
            export.params.map_size,
            derive_seed(export.params.seed, streams::TERRAIN),
        )?;
        Self::from_parts(
            hm,
            mm,
            export.placed_objects.clone(),
            export.descriptor.clone(),
            export.params,
            export.cell_size_used,
        )
    }
}

/// Serialized form of a scene instance, for replay and debugging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneExport {
    pub descriptor: SceneDescriptor,
    pub params: GenerationParams,
    pub cell_size_used: f64,
    pub placed_objects: Vec<PlacedObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heightmap: Option<HeightmapExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightmapExport {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_resolution: f64,
    pub elevations: Vec<f64>,
}

/// Placement cell side: `C_min + G_res * (C_max - C_min)`.
pub fn cell_size(desc: &SceneDescriptor, grid_resolution: f64) -> f64 {
    if grid_resolution == 1.0 {
        // The formula can land one ulp off C_max.
        return desc.cell_max;
    }
    desc.cell_min + grid_resolution * (desc.cell_max - desc.cell_min)
}

/// Generates a scene instance. Each placement cell draws from its own
/// random stream, so the result does not depend on visiting order.
pub fn generate_scene(desc: &SceneDescriptor, params: &GenerationParams) -> Result<SceneInstance> {
    desc.validate()?;
    params.validate()?;
    let params = params.clamped();
    let (hm, mm) = generate_basemap(
        &desc.base_map,
        params.map_size,
        derive_seed(params.seed, streams::TERRAIN),
    )?;
    let objects = place_objects(desc, &params, &hm, &mm)?;
    let cell = cell_size(desc, params.grid_resolution);
    SceneInstance::from_parts(hm, mm, objects, desc.clone(), params, cell)
}

/// Scatters objects over an existing base map.
pub fn place_objects(
    desc: &SceneDescriptor,
    params: &GenerationParams,
    hm: &Heightmap,
    mm: &MaterialMap,
) -> Result<Vec<PlacedObject>> {
    let cell = cell_size(desc, params.grid_resolution);
    let (ext_x, ext_y) = (hm.extent_x(), hm.extent_y());
    let cols = ((ext_x / cell - 1e-9).ceil() as usize).max(1);
    let rows = ((ext_y / cell - 1e-9).ceil() as usize).max(1);
    let total_weight: f64 = desc.objects.iter().map(|o| o.weight).sum();
    let objects_seed = derive_seed(params.seed, streams::OBJECTS);

    let mut placed = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let cell_index = (row * cols + col) as u64;
            let mut rng = stream(objects_seed, cell_index);
            if rng.gen::<f64>() >= params.difficulty {
                continue;
            }
            let x0 = col as f64 * cell;
            let y0 = row as f64 * cell;
            let x = (x0 + rng.gen::<f64>() * cell).min(ext_x);
            let y = (y0 + rng.gen::<f64>() * cell).min(ext_y);

            let mut pick = rng.gen::<f64>() * total_weight;
            let mut chosen = &desc.objects[desc.objects.len() - 1];
            for obj in &desc.objects {
                if pick < obj.weight {
                    chosen = obj;
                    break;
                }
                pick -= obj.weight;
            }
            let scale = chosen.size_min + rng.gen::<f64>() * (chosen.size_max - chosen.size_min);
            let yaw = rng.gen::<f64>() * 360.0;
            let inclination = rng.gen::<f64>() * chosen.max_inclination;

            if hm.slope_at(x, y)? > chosen.max_ground_slope {
                continue;
            }
            let (i, j) = hm.nearest_sample(x, y);
            if !mm.is_traversable(i, j) {
                continue;
            }
            placed.push(PlacedObject {
                instance_id: placed.len() as u32 + 1,
                descriptor: chosen.object_id.clone(),
                category: chosen.category,
                shape: chosen.shape.kind,
                position: [x, y, hm.height_at(x, y)?],
                yaw,
                inclination,
                scale,
                footprint_radius: chosen.shape.radius * scale,
                height: chosen.shape.height * scale,
            });
        }
    }
    Ok(placed)
}

/// Per-sample drivability for an agent of a given radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversabilityGrid {
    pub width_cells: usize,
    pub height_cells: usize,
    pub cell_resolution: f64,
    pub cells: Vec<bool>,
}

impl TraversabilityGrid {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.width_cells + i]
    }

    /// Value at the sample nearest to `(x, y)`; false outside the grid.
    pub fn at_point(&self, x: f64, y: f64) -> bool {
        let ext_x = (self.width_cells - 1) as f64 * self.cell_resolution;
        let ext_y = (self.height_cells - 1) as f64 * self.cell_resolution;
        if !(x >= 0.0 && y >= 0.0 && x <= ext_x && y <= ext_y) {
            return false;
        }
        let i = ((x / self.cell_resolution).round() as usize).min(self.width_cells - 1);
        let j = ((y / self.cell_resolution).round() as usize).min(self.height_cells - 1);
        self.get(i, j)
    }

    pub fn traversable_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// A sample is traversable when its material is, its slope is at most
/// `max_traversable_slope` and it lies strictly outside every object
/// footprint inflated by `agent_radius`.
pub fn traversability_map(
    scene: &SceneInstance,
    agent_radius: f64,
    max_traversable_slope: f64,
) -> TraversabilityGrid {
    let hm = scene.heightmap();
    let (w, h) = (hm.width_cells(), hm.height_cells());
    let res = hm.cell_resolution();
    let mut cells = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let (x, y) = hm.sample_position(i, j);
            let slope_ok = hm.slope_at(x, y).is_ok_and(|s| s <= max_traversable_slope);
            cells.push(scene.material_map().is_traversable(i, j) && slope_ok);
        }
    }
    for obj in scene.placed_objects() {
        let (ox, oy) = obj.xy();
        let reach = obj.footprint_radius + agent_radius;
        let i0 = ((ox - reach) / res).floor().max(0.0) as usize;
        let j0 = ((oy - reach) / res).floor().max(0.0) as usize;
        let i1 = (((ox + reach) / res).ceil() as usize).min(w - 1);
        let j1 = (((oy + reach) / res).ceil() as usize).min(h - 1);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let (x, y) = hm.sample_position(i, j);
                let (dx, dy) = (x - ox, y - oy);
                if dx * dx + dy * dy < reach * reach {
                    cells[j * w + i] = false;
                }
            }
        }
    }
    TraversabilityGrid { width_cells: w, height_cells: h, cell_resolution: res, cells }
}

/// Draws a start sample and a goal point `distance` meters away, both
/// traversable and at least `agent_radius` from the map border.
pub fn sample_start_goal(
    scene: &SceneInstance,
    distance: f64,
    agent_radius: f64,
    seed: u64,
) -> Result<((f64, f64), (f64, f64))> {
    let grid = traversability_map(scene, agent_radius, DEFAULT_MAX_TRAVERSABLE_SLOPE);
    sample_start_goal_in(&grid, distance, agent_radius, seed)
}

pub fn sample_start_goal_in(
    grid: &TraversabilityGrid,
    distance: f64,
    agent_radius: f64,
    seed: u64,
) -> Result<((f64, f64), (f64, f64))> {
    let res = grid.cell_resolution;
    let ext_x = (grid.width_cells - 1) as f64 * res;
    let ext_y = (grid.height_cells - 1) as f64 * res;
    let inside = |x: f64, y: f64| {
        x >= agent_radius && y >= agent_radius && x <= ext_x - agent_radius && y <= ext_y - agent_radius
    };
    let candidates: Vec<(f64, f64)> = (0..grid.height_cells)
        .flat_map(|j| (0..grid.width_cells).map(move |i| (i, j)))
        .filter(|&(i, j)| grid.get(i, j))
        .map(|(i, j)| (i as f64 * res, j as f64 * res))
        .filter(|&(x, y)| inside(x, y))
        .collect();
    if candidates.is_empty() {
        return Err(SimError::UnsatisfiablePlacement { attempts: 0 });
    }
    let mut rng = stream(seed, streams::SPAWN);
    for _ in 0..SPAWN_ATTEMPTS {
        let start = candidates[rng.gen_range(0..candidates.len())];
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let goal = (start.0 + distance * angle.cos(), start.1 + distance * angle.sin());
        if inside(goal.0, goal.1) && grid.at_point(goal.0, goal.1) {
            return Ok((start, goal));
        }
    }
    Err(SimError::UnsatisfiablePlacement { attempts: SPAWN_ATTEMPTS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::Material;

    pub(crate) fn permissive_flat(cell: f64) -> SceneDescriptor {
        SceneDescriptor {
            name: "flat".into(),
            base_map: SceneTypeSpec {
                base_amplitude: 0.0,
                water_fraction: 0.0,
                ..SceneTypeSpec::built_in(SceneType::Meadow).unwrap()
            },
            cell_min: cell,
            cell_max: cell,
            objects: vec![WorldObjectDescriptor {
                object_id: "pebble".into(),
                category: ObjectCategory::Rock,
                shape: Shape { kind: ShapeKind::Sphere, radius: 0.1, height: 0.1 },
                size_min: 1.0,
                size_max: 1.0,
                max_inclination: 0.0,
                max_ground_slope: 89.0,
                weight: 1.0,
            }],
        }
    }

    fn cell_desc(cmin: f64, cmax: f64) -> SceneDescriptor {
        SceneDescriptor { cell_min: cmin, cell_max: cmax, ..permissive_flat(1.0) }
    }

    #[test]
    fn cell_size_interpolates() {
        let d = cell_desc(2.0, 10.0);
        assert_eq!(cell_size(&d, 0.0), 2.0);
        assert_eq!(cell_size(&d, 1.0), 10.0);
        assert_eq!(cell_size(&d, 0.5), 6.0);
    }

    #[test]
    fn zero_difficulty_places_nothing() {
        let desc = SceneDescriptor::built_in(SceneType::Forest).unwrap();
        let scene = generate_scene(&desc, &GenerationParams::new(0.0, 0.0, 10.0, 1)).unwrap();
        assert!(scene.placed_objects().is_empty());
    }

    #[test]
    fn full_difficulty_fills_every_cell_on_flat_ground() {
        let desc = permissive_flat(2.0);
        let scene = generate_scene(&desc, &GenerationParams::new(1.0, 0.0, 10.0, 5)).unwrap();
        assert_eq!(scene.placed_objects().len(), 50 * 50);
        for obj in scene.placed_objects() {
            let col = (obj.position[0] / 2.0).floor().min(49.0) as usize;
            let row = (obj.position[1] / 2.0).floor().min(49.0) as usize;
            assert_eq!(obj.instance_id as usize, row * 50 + col + 1);
        }
    }

    #[test]
    fn half_difficulty_count_is_binomial() {
        let desc = permissive_flat(1.0);
        for seed in 0..5 {
            let scene = generate_scene(&desc, &GenerationParams::new(0.5, 0.0, 10.0, seed)).unwrap();
            let n = scene.placed_objects().len() as f64;
            assert!((n - 5000.0).abs() <= 150.0, "seed {seed}: {n}");
        }
    }

    #[test]
    fn placements_respect_descriptor_limits() {
        let desc = SceneDescriptor::built_in(SceneType::VolcanicField).unwrap();
        let scene = generate_scene(&desc, &GenerationParams::new(1.0, 0.0, 10.0, 77)).unwrap();
        assert!(!scene.placed_objects().is_empty());
        for obj in scene.placed_objects() {
            let d = desc.objects.iter().find(|o| o.object_id == obj.descriptor).unwrap();
            assert!(obj.scale >= d.size_min && obj.scale <= d.size_max);
            assert!(obj.inclination <= d.max_inclination);
            let (x, y) = obj.xy();
            assert!(scene.heightmap().slope_at(x, y).unwrap() <= d.max_ground_slope);
            assert!(scene.material_traversable_at(x, y));
            assert_eq!(obj.position[2], scene.heightmap().height_at(x, y).unwrap());
        }
    }

    #[test]
    fn objects_avoid_water() {
        let desc = SceneDescriptor::built_in(SceneType::Meadow).unwrap();
        let scene = generate_scene(&desc, &GenerationParams::new(1.0, 0.0, 10.0, 3)).unwrap();
        let mm = scene.material_map();
        assert!(mm.materials().contains(&Material::Water));
        for obj in scene.placed_objects() {
            let (i, j) = scene.heightmap().nearest_sample(obj.position[0], obj.position[1]);
            assert_ne!(mm.get(i, j), Material::Water);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let desc = SceneDescriptor::built_in(SceneType::Forest).unwrap();
        let p = GenerationParams::new(0.6, 0.3, 10.0, 123);
        let a = generate_scene(&desc, &p).unwrap();
        let b = generate_scene(&desc, &p).unwrap();
        assert_eq!(a.placed_objects(), b.placed_objects());
        assert_eq!(a.heightmap().elevations(), b.heightmap().elevations());
    }

    #[test]
    fn traversability_on_empty_flat_scene() {
        let desc = permissive_flat(2.0);
        let scene = generate_scene(&desc, &GenerationParams::new(0.0, 0.0, 10.0, 1)).unwrap();
        let grid = traversability_map(&scene, 0.5, 35.0);
        assert!(grid.cells.iter().all(|&c| c));
    }

    #[test]
    fn object_center_is_blocked() {
        let desc = permissive_flat(4.0);
        let scene = generate_scene(&desc, &GenerationParams::new(0.3, 0.0, 10.0, 8)).unwrap();
        let grid = traversability_map(&scene, 0.5, 35.0);
        for obj in scene.placed_objects() {
            assert!(!grid.at_point(obj.position[0], obj.position[1]));
        }
    }

    #[test]
    fn spawn_pair_on_empty_map() {
        let desc = permissive_flat(2.0);
        let scene = generate_scene(&desc, &GenerationParams::new(0.0, 0.0, 10.0, 1)).unwrap();
        let (s, g) = sample_start_goal(&scene, 10.0, 0.5, 4).unwrap();
        let d = (g.0 - s.0).hypot(g.1 - s.1);
        assert!((9.5..=10.5).contains(&d));
        assert_eq!(sample_start_goal(&scene, 10.0, 0.5, 4).unwrap(), (s, g));
    }

    #[test]
    fn spawn_fails_when_nothing_is_traversable() {
        let desc = SceneDescriptor {
            base_map: SceneTypeSpec {
                water_fraction: 1.0,
                ..permissive_flat(2.0).base_map
            },
            ..permissive_flat(2.0)
        };
        let scene = generate_scene(&desc, &GenerationParams::new(0.0, 0.0, 10.0, 1)).unwrap();
        assert!(matches!(
            sample_start_goal(&scene, 10.0, 0.5, 1),
            Err(SimError::UnsatisfiablePlacement { .. })
        ));
        // Separation larger than the map can never be satisfied.
        let open = generate_scene(&permissive_flat(2.0), &GenerationParams::new(0.0, 0.0, 10.0, 1)).unwrap();
        assert!(matches!(
            sample_start_goal(&open, 500.0, 0.5, 1),
            Err(SimError::UnsatisfiablePlacement { attempts: SPAWN_ATTEMPTS })
        ));
    }

    #[test]
    fn descriptor_json_round_trip_and_built_in_reference() {
        let desc = SceneDescriptor::built_in(SceneType::Forest).unwrap();
        let text = desc.to_json().unwrap();
        assert_eq!(SceneDescriptor::from_json(&text).unwrap(), desc);

        let short = r#"{
            "name": "MyMeadow",
            "base_map": {"scene_type": "Meadow"},
            "cell_min": 3, "cell_max": 5,
            "objects": [{"object_id": "stone", "category": "rock",
                         "shape": {"kind": "sphere", "radius": 0.4, "height": 0.4},
                         "size_min": 1, "size_max": 2,
                         "max_inclination": 10, "max_ground_slope": 30}]
        }"#;
        let parsed = SceneDescriptor::from_json(short).unwrap();
        assert_eq!(parsed.base_map, SceneTypeSpec::built_in(SceneType::Meadow).unwrap());
        assert_eq!(parsed.objects[0].weight, 1.0);
    }

    #[test]
    fn invalid_descriptors_are_rejected() {
        let mut d = permissive_flat(2.0);
        d.cell_min = 5.0;
        d.cell_max = 2.0;
        assert!(d.validate().is_err());
        let mut d = permissive_flat(2.0);
        d.objects[0].size_min = 0.0;
        assert!(d.validate().is_err());
        let mut d = permissive_flat(2.0);
        d.objects[0].max_ground_slope = 90.0;
        assert!(d.validate().is_err());
        let mut d = permissive_flat(2.0);
        d.objects.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn export_round_trip_rebuilds_scene() {
        let desc = SceneDescriptor::built_in(SceneType::ArcticGlacier).unwrap();
        let scene = generate_scene(&desc, &GenerationParams::new(0.4, 0.2, 10.0, 9)).unwrap();
        let json = serde_json::to_string(&scene.to_export(false)).unwrap();
        let export: SceneExport = serde_json::from_str(&json).unwrap();
        let rebuilt = SceneInstance::from_export(&export).unwrap();
        assert_eq!(rebuilt.placed_objects(), scene.placed_objects());
        assert_eq!(rebuilt.heightmap().elevations(), scene.heightmap().elevations());
    }

    #[test]
    fn registry_lookup() {
        let reg = SceneRegistry::with_built_ins();
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            vec!["ArcticGlacier", "Forest", "Meadow", "VolcanicField"]
        );
        assert_eq!(reg.get("forest").unwrap().name, "Forest");
        assert!(matches!(reg.get("Swamp"), Err(SimError::UnknownScene(_))));
    }
}
