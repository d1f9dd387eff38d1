//! Base maps: elevation and surface material grids, plus the continuous
//! height and slope queries used by placement, dynamics and sensing.
//!
//! Samples sit on a regular lattice with spacing `cell_resolution`; sample
//! `(i, j)` is located at `(i * res, j * res)` so a map covers
//! `[0, (width - 1) * res] x [0, (height - 1) * res]`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::{derive_seed, mix64};

/// Default spacing between elevation samples.
pub const DEFAULT_CELL_RESOLUTION: f64 = 0.5;
/// Smallest map side accepted by [`generate_basemap`].
pub const MIN_MAP_SIZE: f64 = 20.0;
/// Default map side in meters.
pub const DEFAULT_MAP_SIZE: f64 = 100.0;

#[derive(Debug, Clone, Serialize)]
pub struct Heightmap {
    width_cells: usize,
    height_cells: usize,
    cell_resolution: f64,
    elevations: Vec<f64>,
    #[serde(skip)]
    stats: HeightStats,
}

#[derive(Debug, Clone, Copy, Default)]
struct HeightStats {
    min: f64,
    max: f64,
    /// Upper bound on the gradient magnitude of the interpolated surface.
    max_gradient: f64,
    inv_resolution: f64,
}

impl Heightmap {
    pub fn new(
        width_cells: usize,
        height_cells: usize,
        cell_resolution: f64,
        elevations: Vec<f64>,
    ) -> Result<Self> {
        if width_cells < 2 || height_cells < 2 {
            return Err(SimError::Config(format!(
                "heightmap needs at least 2x2 samples, got {width_cells}x{height_cells}"
            )));
        }
        if !(cell_resolution > 0.0 && cell_resolution.is_finite()) {
            return Err(SimError::Config(format!(
                "cell resolution must be positive, got {cell_resolution}"
            )));
        }
        if elevations.len() != width_cells * height_cells {
            return Err(SimError::Config(format!(
                "expected {} elevations, got {}",
                width_cells * height_cells,
                elevations.len()
            )));
        }
        if elevations.iter().any(|e| !e.is_finite()) {
            return Err(SimError::Config("elevations must be finite".into()));
        }
        let mut hm = Heightmap {
            width_cells,
            height_cells,
            cell_resolution,
            elevations,
            stats: HeightStats::default(),
        };
        hm.stats = hm.compute_stats();
        Ok(hm)
    }

    /// Builds a heightmap by sampling `f(x, y)` at every lattice point.
    pub fn from_fn(
        width_cells: usize,
        height_cells: usize,
        cell_resolution: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut elevations = Vec::with_capacity(width_cells * height_cells);
        for j in 0..height_cells {
            for i in 0..width_cells {
                elevations.push(f(i as f64 * cell_resolution, j as f64 * cell_resolution));
            }
        }
        Self::new(width_cells, height_cells, cell_resolution, elevations)
    }

    fn compute_stats(&self) -> HeightStats {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &e in &self.elevations {
            min = min.min(e);
            max = max.max(e);
        }
        let (mut dx_max, mut dy_max) = (0.0f64, 0.0f64);
        for j in 0..self.height_cells {
            for i in 0..self.width_cells {
                let e = self.sample(i, j);
                if i + 1 < self.width_cells {
                    dx_max = dx_max.max((self.sample(i + 1, j) - e).abs());
                }
                if j + 1 < self.height_cells {
                    dy_max = dy_max.max((self.sample(i, j + 1) - e).abs());
                }
            }
        }
        let max_gradient = dx_max.hypot(dy_max) / self.cell_resolution;
        HeightStats { min, max, max_gradient, inv_resolution: 1.0 / self.cell_resolution }
    }

    pub fn width_cells(&self) -> usize {
        self.width_cells
    }

    pub fn height_cells(&self) -> usize {
        self.height_cells
    }

    pub fn cell_resolution(&self) -> f64 {
        self.cell_resolution
    }

    pub fn elevations(&self) -> &[f64] {
        &self.elevations
    }

    /// Map extent along x in meters.
    pub fn extent_x(&self) -> f64 {
        (self.width_cells - 1) as f64 * self.cell_resolution
    }

    /// Map extent along y in meters.
    pub fn extent_y(&self) -> f64 {
        (self.height_cells - 1) as f64 * self.cell_resolution
    }

    pub fn diagonal(&self) -> f64 {
        self.extent_x().hypot(self.extent_y())
    }

    pub fn min_elevation(&self) -> f64 {
        self.stats.min
    }

    pub fn max_elevation(&self) -> f64 {
        self.stats.max
    }

    /// Lipschitz bound of the bilinear surface (rise per meter).
    pub fn max_gradient(&self) -> f64 {
        self.stats.max_gradient
    }

    #[inline]
    pub fn sample(&self, i: usize, j: usize) -> f64 {
        self.elevations[j * self.width_cells + i]
    }

    /// World position of sample `(i, j)`.
    #[inline]
    pub fn sample_position(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.cell_resolution, j as f64 * self.cell_resolution)
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= self.extent_x() && y <= self.extent_y()
    }

    /// Index of the sample nearest to `(x, y)`, clamped to the grid.
    #[inline]
    pub fn nearest_sample(&self, x: f64, y: f64) -> (usize, usize) {
        let i = (x / self.cell_resolution).round().max(0.0) as usize;
        let j = (y / self.cell_resolution).round().max(0.0) as usize;
        (i.min(self.width_cells - 1), j.min(self.height_cells - 1))
    }

    /// Bilinear elevation at `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64> {
        if !self.contains(x, y) {
            return Err(SimError::OutOfBounds { x, y });
        }
        Ok(self.height_unchecked(x, y))
    }

    /// Bilinear elevation for a point already known to be in bounds.
    #[inline(always)]
    pub(crate) fn height_unchecked(&self, x: f64, y: f64) -> f64 {
        let fx = x * self.stats.inv_resolution;
        let fy = y * self.stats.inv_resolution;
        // Truncation equals floor for the non-negative in-bounds inputs, and
        // the i32 conversion is far cheaper than a saturating usize one.
        let i = (fx as i32 as usize).min(self.width_cells - 2);
        let j = (fy as i32 as usize).min(self.height_cells - 2);
        let tx = fx - i as f64;
        let ty = fy - j as f64;
        let row = j * self.width_cells + i;
        let h00 = self.elevations[row];
        let h10 = self.elevations[row + 1];
        let h01 = self.elevations[row + self.width_cells];
        let h11 = self.elevations[row + self.width_cells + 1];
        let bottom = h00 + (h10 - h00) * tx;
        let top = h01 + (h11 - h01) * tx;
        bottom + (top - bottom) * ty
    }

    /// Surface gradient `(dh/dx, dh/dy)` by central differences at sample
    /// spacing. Within one sample of the border the stencil is clipped to the
    /// map and becomes one-sided.
    pub fn gradient_at(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        if !self.contains(x, y) {
            return Err(SimError::OutOfBounds { x, y });
        }
        let h = self.cell_resolution;
        let (x0, x1) = ((x - h).max(0.0), (x + h).min(self.extent_x()));
        let (y0, y1) = ((y - h).max(0.0), (y + h).min(self.extent_y()));
        let gx = (self.height_unchecked(x1, y) - self.height_unchecked(x0, y)) / (x1 - x0);
        let gy = (self.height_unchecked(x, y1) - self.height_unchecked(x, y0)) / (y1 - y0);
        Ok((gx, gy))
    }

    /// Ground slope in degrees, in `[0, 90)`.
    pub fn slope_at(&self, x: f64, y: f64) -> Result<f64> {
        let (gx, gy) = self.gradient_at(x, y)?;
        Ok(gx.hypot(gy).atan().to_degrees())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Material {
    Ground,
    Water,
    Ice,
    RockyGround,
    Snow,
}

impl Material {
    pub fn is_traversable(self) -> bool {
        !matches!(self, Material::Water | Material::Ice)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MaterialMap {
    width_cells: usize,
    height_cells: usize,
    materials: Vec<Material>,
}

impl MaterialMap {
    pub fn new(width_cells: usize, height_cells: usize, materials: Vec<Material>) -> Result<Self> {
        if materials.len() != width_cells * height_cells {
            return Err(SimError::Config(format!(
                "expected {} materials, got {}",
                width_cells * height_cells,
                materials.len()
            )));
        }
        Ok(MaterialMap { width_cells, height_cells, materials })
    }

    /// A map covered entirely by `material`, shaped like `hm`.
    pub fn uniform(hm: &Heightmap, material: Material) -> Self {
        MaterialMap {
            width_cells: hm.width_cells,
            height_cells: hm.height_cells,
            materials: vec![material; hm.width_cells * hm.height_cells],
        }
    }

    pub fn width_cells(&self) -> usize {
        self.width_cells
    }

    pub fn height_cells(&self) -> usize {
        self.height_cells
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Material {
        self.materials[j * self.width_cells + i]
    }

    pub fn set(&mut self, i: usize, j: usize, material: Material) {
        self.materials[j * self.width_cells + i] = material;
    }

    #[inline]
    pub fn is_traversable(&self, i: usize, j: usize) -> bool {
        self.get(i, j).is_traversable()
    }

    pub fn non_traversable_fraction(&self) -> f64 {
        let blocked = self.materials.iter().filter(|m| !m.is_traversable()).count();
        blocked as f64 / self.materials.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneType {
    Meadow,
    Forest,
    VolcanicField,
    ArcticGlacier,
    Custom,
}

impl SceneType {
    pub const BUILT_IN: [SceneType; 4] = [
        SceneType::Meadow,
        SceneType::Forest,
        SceneType::VolcanicField,
        SceneType::ArcticGlacier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneType::Meadow => "Meadow",
            SceneType::Forest => "Forest",
            SceneType::VolcanicField => "VolcanicField",
            SceneType::ArcticGlacier => "ArcticGlacier",
            SceneType::Custom => "Custom",
        }
    }
}

/// Assigns `material` to samples whose slope and relative elevation fall in
/// the given bands. Relative elevation is elevation divided by the scene type's
/// base amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialRule {
    pub material: Material,
    #[serde(default)]
    pub min_slope: f64,
    #[serde(default = "default_max_slope")]
    pub max_slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_relative_elevation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_relative_elevation: Option<f64>,
}

fn default_max_slope() -> f64 {
    90.0
}

impl MaterialRule {
    fn matches(&self, slope: f64, relative_elevation: f64) -> bool {
        slope >= self.min_slope
            && slope <= self.max_slope
            && self.min_relative_elevation.is_none_or(|lo| relative_elevation >= lo)
            && self.max_relative_elevation.is_none_or(|hi| relative_elevation <= hi)
    }
}

/// Parametric terrain archetype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTypeSpec {
    #[serde(default = "custom_type")]
    pub scene_type: SceneType,
    pub noise_octaves: u32,
    /// Peak elevation magnitude in meters.
    pub base_amplitude: f64,
    /// Octave persistence, in `[0, 1]`.
    pub roughness: f64,
    /// Wavelength of the lowest noise octave in meters.
    #[serde(default = "default_feature_size")]
    pub feature_size: f64,
    /// Fraction of samples flooded with `flood_material`.
    #[serde(default)]
    pub water_fraction: f64,
    #[serde(default = "default_flood")]
    pub flood_material: Material,
    #[serde(default = "default_ground")]
    pub default_material: Material,
    /// First matching rule wins; unmatched samples get `default_material`.
    #[serde(default)]
    pub material_rules: Vec<MaterialRule>,
}

fn custom_type() -> SceneType {
    SceneType::Custom
}
fn default_feature_size() -> f64 {
    32.0
}
fn default_flood() -> Material {
    Material::Water
}
fn default_ground() -> Material {
    Material::Ground
}

impl SceneTypeSpec {
    pub fn built_in(scene_type: SceneType) -> Option<Self> {
        let steep_rock = MaterialRule {
            material: Material::RockyGround,
            min_slope: 25.0,
            max_slope: 90.0,
            min_relative_elevation: None,
            max_relative_elevation: None,
        };
        let spec = match scene_type {
            SceneType::Meadow => SceneTypeSpec {
                scene_type,
                noise_octaves: 5,
                base_amplitude: 1.5,
                roughness: 0.4,
                feature_size: 40.0,
                water_fraction: 0.12,
                flood_material: Material::Water,
                default_material: Material::Ground,
                material_rules: vec![steep_rock],
            },
            SceneType::Forest => SceneTypeSpec {
                scene_type,
                noise_octaves: 5,
                base_amplitude: 2.0,
                roughness: 0.45,
                feature_size: 36.0,
                water_fraction: 0.03,
                flood_material: Material::Water,
                default_material: Material::Ground,
                material_rules: vec![steep_rock],
            },
            SceneType::VolcanicField => SceneTypeSpec {
                scene_type,
                noise_octaves: 6,
                base_amplitude: 3.0,
                roughness: 0.55,
                feature_size: 28.0,
                water_fraction: 0.0,
                flood_material: Material::Water,
                default_material: Material::RockyGround,
                material_rules: Vec::new(),
            },
            SceneType::ArcticGlacier => SceneTypeSpec {
                scene_type,
                noise_octaves: 5,
                base_amplitude: 2.5,
                roughness: 0.4,
                feature_size: 45.0,
                water_fraction: 0.15,
                flood_material: Material::Ice,
                default_material: Material::Snow,
                material_rules: vec![steep_rock],
            },
            SceneType::Custom => return None,
        };
        Some(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.noise_octaves == 0 || self.noise_octaves > 16 {
            return bad(format!("noise_octaves must be in 1..=16, got {}", self.noise_octaves));
        }
        if !(self.base_amplitude >= 0.0 && self.base_amplitude.is_finite()) {
            return bad(format!("base_amplitude must be >= 0, got {}", self.base_amplitude));
        }
        if !(0.0..=1.0).contains(&self.roughness) {
            return bad(format!("roughness must be in [0, 1], got {}", self.roughness));
        }
        if !(self.feature_size > 0.0 && self.feature_size.is_finite()) {
            return bad(format!("feature_size must be positive, got {}", self.feature_size));
        }
        if !(0.0..=1.0).contains(&self.water_fraction) {
            return bad(format!("water_fraction must be in [0, 1], got {}", self.water_fraction));
        }
        if self.water_fraction > 0.0 && self.flood_material.is_traversable() {
            return bad("flood_material must be water or ice".into());
        }
        if !self.default_material.is_traversable() {
            return bad("default_material must be traversable".into());
        }
        Ok(())
    }
}

/// Deterministic lattice value in `[-1, 1]`.
#[inline]
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64((ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64)));
    (h >> 11) as f64 * (2.0 / (1u64 << 53) as f64) - 1.0
}

#[inline]
fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (ix, iy) = (x0 as i64, y0 as i64);
    let tx = quintic(x - x0);
    let ty = quintic(y - y0);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let bottom = a + (b - a) * tx;
    let top = c + (d - c) * tx;
    bottom + (top - bottom) * ty
}

/// Normalized fractal sum in `[-1, 1]`.
fn fractal(spec: &SceneTypeSpec, seed: u64, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut amplitude = 1.0;
    let mut frequency = 1.0 / spec.feature_size;
    for octave in 0..spec.noise_octaves {
        let octave_seed = derive_seed(seed, octave as u64);
        total += amplitude * value_noise(octave_seed, x * frequency, y * frequency);
        norm += amplitude;
        amplitude *= spec.roughness;
        frequency *= 2.0;
    }
    if norm > 0.0 {
        total / norm
    } else {
        0.0
    }
}

/// Generates the elevation and material grids for a square map of side
/// `map_size` meters.
pub fn generate_basemap(
    spec: &SceneTypeSpec,
    map_size: f64,
    seed: u64,
) -> Result<(Heightmap, MaterialMap)> {
    if !(map_size >= MIN_MAP_SIZE && map_size.is_finite()) {
        return Err(SimError::Config(format!(
            "map_size must be at least {MIN_MAP_SIZE} m, got {map_size}"
        )));
    }
    spec.validate()?;
    let res = DEFAULT_CELL_RESOLUTION;
    let n = (map_size / res).round() as usize + 1;

    let mut elevations = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (i as f64 * res, j as f64 * res);
            elevations.push(spec.base_amplitude * fractal(spec, seed, x, y));
        }
    }

    // Flood the lowest samples; the flooded surface is flattened to the
    // flood level.
    let mut flooded = vec![false; n * n];
    let flood_count = (spec.water_fraction * (n * n) as f64).round() as usize;
    if flood_count > 0 {
        let mut order: Vec<usize> = (0..n * n).collect();
        order.sort_by(|&a, &b| elevations[a].total_cmp(&elevations[b]).then(a.cmp(&b)));
        let level = elevations[order[flood_count.min(n * n) - 1]];
        for &idx in &order[..flood_count.min(n * n)] {
            flooded[idx] = true;
            elevations[idx] = level;
        }
    }

    let hm = Heightmap::new(n, n, res, elevations)?;
    let mut materials = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let idx = j * n + i;
            if flooded[idx] {
                materials.push(spec.flood_material);
                continue;
            }
            let (x, y) = hm.sample_position(i, j);
            let slope = hm.slope_at(x, y)?;
            let relative = if spec.base_amplitude > 0.0 {
                hm.sample(i, j) / spec.base_amplitude
            } else {
                0.0
            };
            let material = spec
                .material_rules
                .iter()
                .find(|r| r.matches(slope, relative) && r.material.is_traversable())
                .map_or(spec.default_material, |r| r.material);
            materials.push(material);
        }
    }
    let mm = MaterialMap::new(n, n, materials)?;
    Ok((hm, mm))
}
