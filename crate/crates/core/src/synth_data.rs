//! Synthetic multi-domain place world.
//!
//! Stands in for backbone features over real datasets. Each place has a
//! unit latent `z` supported on a "place" channel block, split into equal
//! segments, one per part. Patch `p` shows a single part `π(p)`:
//!
//! ```text
//! x_p = T_d (a_p J · S_π(p) R_θ z + τ t_π(p) + Σ_j c_pj u_j) + b_d + σ ε_p
//! ```
//!
//! where `S_π` keeps one segment, `t_π` is a part-type signature shared by
//! all places (so queries can specialize by part), `R_θ` rotates channel
//! pairs of the place block by the viewpoint angle, `u_j` are distractor
//! latents shared by every place (each coefficient `c_pj` is an
//! observation-wide offset plus a per-patch draw), `T_d` is the domain's
//! orthogonal appearance transform and `b_d` its bias. `T_d` rotates the
//! place block and moves the distractor block to a domain-specific channel
//! block, so clutter occupies different channels in every domain.
//!
//! Part layout, patch weights, clutter coefficients and the position jitter
//! are a deterministic function of `(world seed, place, domain, viewpoint)`.
//! Only the sensor noise `ε` comes from the caller's generator, so with
//! `σ = 0` a render is fully determined by its scene.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attn_kernels::{dot, Matrix};
use crate::error::{Error, Result};
use crate::qaa_agg::FeatureMap;

/// Largest position offset of an observation from its place, in meters.
pub const POSITION_JITTER_M: f64 = 5.0;

/// Noise level up to which the default world is separable by a
/// nearest-centroid classifier on mean patch features (>90% accuracy).
pub const SEPARABLE_NOISE_SIGMA: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Half-width of the uniform viewpoint distribution, radians.
    pub viewpoint_spread: f64,
    pub noise_sigma: f64,
    /// Places per square kilometer.
    #[serde(default = "default_density")]
    pub sampling_density: f64,
}

fn default_density() -> f64 {
    100.0
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, viewpoint_spread: f64, noise_sigma: f64) -> Self {
        DomainSpec {
            name: name.into(),
            viewpoint_spread,
            noise_sigma,
            sampling_density: default_density(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Uniform rejection sampling in a square sized by sampling density.
    Scattered,
    /// Places on a line `spacing_m` apart; frame index = place index.
    Route { spacing_m: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub num_places: usize,
    pub c_o: usize,
    /// Patch grid side; `P = grid²`.
    pub grid: usize,
    /// Width of the channel block holding place latents.
    pub place_dim: usize,
    /// Parts per place. The place block splits into `parts` equal segments;
    /// each patch shows one segment plus that part's type signature.
    pub parts: usize,
    pub type_scale: f64,
    pub distractors: usize,
    /// Std of per-patch distractor coefficients.
    pub clutter_scale: f64,
    /// Std of the per-observation distractor offset shared by all patches.
    pub shared_clutter: f64,
    pub bias_scale: f64,
    pub min_separation_m: f64,
    pub layout: Layout,
    pub domains: Vec<DomainSpec>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 1,
            num_places: 800,
            c_o: 64,
            grid: 7,
            place_dim: 16,
            parts: 4,
            type_scale: 1.0,
            distractors: 4,
            clutter_scale: 1.5,
            shared_clutter: 0.1,
            bias_scale: 0.5,
            min_separation_m: 50.0,
            layout: Layout::Scattered,
            domains: default_domains(),
        }
    }
}

/// Three domains echoing a sparse street-view set, a front-view driving set
/// and a dense multi-view set.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            name: "streets".into(),
            viewpoint_spread: 0.3,
            noise_sigma: 0.05,
            sampling_density: 60.0,
        },
        DomainSpec {
            name: "frontview".into(),
            viewpoint_spread: 0.05,
            noise_sigma: 0.05,
            sampling_density: 100.0,
        },
        DomainSpec {
            name: "multiview".into(),
            viewpoint_spread: 0.45,
            noise_sigma: 0.05,
            sampling_density: 150.0,
        },
    ]
}

impl WorldSpec {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Width of the part-type block; zero for single-part places.
    pub fn type_dim(&self) -> usize {
        if self.parts > 1 {
            self.parts
        } else {
            0
        }
    }

    /// First channel of the clutter blocks.
    pub fn clutter_start(&self) -> usize {
        self.place_dim + self.type_dim()
    }

    /// Width of each domain's clutter block.
    pub fn clutter_dim(&self) -> usize {
        (self.c_o.saturating_sub(self.clutter_start())) / self.domains.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_places < 2 {
            return Err(Error::Config("num_places must be >= 2".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("world needs at least one domain".into()));
        }
        if self.grid == 0 || self.place_dim == 0 || self.place_dim > self.c_o {
            return Err(Error::Config(format!(
                "need grid >= 1 and 1 <= place_dim <= c_o (grid {}, place_dim {}, c_o {})",
                self.grid, self.place_dim, self.c_o
            )));
        }
        if self.parts == 0 || self.place_dim % self.parts != 0 || self.clutter_start() > self.c_o {
            return Err(Error::Config(format!(
                "place_dim {} must split evenly into {} parts and fit in c_o {} with the type block",
                self.place_dim, self.parts, self.c_o
            )));
        }
        if self.distractors > 0 && self.clutter_dim() == 0 {
            return Err(Error::Config(format!(
                "c_o {} leaves no clutter channels for {} domains after {} place and type channels",
                self.c_o,
                self.domains.len(),
                self.clutter_start()
            )));
        }
        for d in &self.domains {
            if !(d.noise_sigma >= 0.0) || !(d.viewpoint_spread >= 0.0) || !(d.sampling_density > 0.0) {
                return Err(Error::Config(format!("domain {:?} has an invalid profile", d.name)));
            }
        }
        if let Layout::Route { spacing_m } = self.layout {
            if spacing_m < self.min_separation_m {
                return Err(Error::Capacity(format!(
                    "route spacing {spacing_m} m is below the minimum separation {} m",
                    self.min_separation_m
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Place {
    /// Unit vector of length `c_o`, zero outside the place block.
    pub latent: Vec<f64>,
    pub x_m: f64,
    pub y_m: f64,
    pub frame: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainProfile {
    pub name: String,
    pub viewpoint_spread: f64,
    pub noise_sigma: f64,
    pub sampling_density: f64,
    /// Orthogonal `c_o × c_o` appearance transform.
    pub transform: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub places: Vec<Place>,
    pub domains: Vec<DomainProfile>,
    /// Distractor latents in the canonical clutter block.
    pub distractors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct PlaceObservation {
    pub features: FeatureMap,
    pub place_id: usize,
    pub domain_id: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub frame: Option<u64>,
    pub viewpoint: f64,
}

/// Shorthand for [`SyntheticWorld::generate`] with default geometry.
pub fn generate_world(num_places: usize, domains: Vec<DomainSpec>, c_o: usize, seed: u64) -> Result<SyntheticWorld> {
    let spec = WorldSpec {
        seed,
        num_places,
        c_o,
        domains,
        ..WorldSpec::default()
    };
    SyntheticWorld::generate(&spec)
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Haar-ish random orthogonal matrix via modified Gram-Schmidt.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_fn(n, n, |r, c| cols[c][r])
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn scene_seed(world_seed: u64, place: usize, domain: usize, viewpoint: f64) -> u64 {
    let mut h = mix(world_seed ^ 0x5ce4e);
    h = mix(h ^ place as u64);
    h = mix(h ^ (domain as u64).rotate_left(32));
    mix(h ^ viewpoint.to_bits())
}

impl SyntheticWorld {
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let l = spec.place_dim;

        let places_pos = match spec.layout {
            Layout::Route { spacing_m } => (0..spec.num_places)
                .map(|i| (i as f64 * spacing_m, 0.0, Some(i as u64)))
                .collect::<Vec<_>>(),
            Layout::Scattered => scatter(spec, &mut rng)?,
        };

        let places = places_pos
            .into_iter()
            .map(|(x_m, y_m, frame)| {
                let mut latent = vec![0.0; spec.c_o];
                latent[..l].copy_from_slice(&unit_gaussian(l, &mut rng));
                Place { latent, x_m, y_m, frame }
            })
            .collect();

        let b = spec.clutter_dim();
        let c0 = spec.clutter_start();
        let distractors = (0..spec.distractors)
            .map(|_| {
                let mut u = vec![0.0; spec.c_o];
                u[c0..c0 + b].copy_from_slice(&unit_gaussian(b, &mut rng));
                u
            })
            .collect();

        let domains = spec
            .domains
            .iter()
            .enumerate()
            .map(|(d, ds)| {
                let mut t = Matrix::zeros(spec.c_o, spec.c_o);
                let place_rot = random_orthogonal(l, &mut rng);
                for r in 0..l {
                    for c in 0..l {
                        t[(r, c)] = place_rot[(r, c)];
                    }
                }
                // Swap canonical clutter block 0 with block d, rotating the
                // clutter on its way in; everything else stays put.
                let block_start = |k: usize| c0 + k * b;
                let clutter_rot = random_orthogonal(b, &mut rng);
                let mut mapped = vec![false; spec.c_o];
                if b > 0 {
                    for r in 0..b {
                        for c in 0..b {
                            t[(block_start(d) + r, block_start(0) + c)] = clutter_rot[(r, c)];
                        }
                        mapped[block_start(0) + r] = true;
                    }
                    if d != 0 {
                        for i in 0..b {
                            t[(block_start(0) + i, block_start(d) + i)] = 1.0;
                            mapped[block_start(d) + i] = true;
                        }
                    }
                }
                for i in l..spec.c_o {
                    if !mapped[i] {
                        t[(i, i)] = 1.0;
                    }
                }
                let mut bias = vec![0.0; spec.c_o];
                if b > 0 {
                    let dir = unit_gaussian(b, &mut rng);
                    for i in 0..b {
                        bias[block_start(d) + i] = spec.bias_scale * dir[i];
                    }
                }
                DomainProfile {
                    name: ds.name.clone(),
                    viewpoint_spread: ds.viewpoint_spread,
                    noise_sigma: ds.noise_sigma,
                    sampling_density: ds.sampling_density,
                    transform: t,
                    bias,
                }
            })
            .collect();

        Ok(SyntheticWorld {
            spec: spec.clone(),
            places,
            domains,
            distractors,
        })
    }

    pub fn num_places(&self) -> usize {
        self.places.len()
    }

    /// Renders one observation. `rng` drives only the sensor noise.
    pub fn render<R: Rng + ?Sized>(
        &self,
        place_id: usize,
        domain_id: usize,
        viewpoint: f64,
        rng: &mut R,
    ) -> Result<PlaceObservation> {
        let place = self
            .places
            .get(place_id)
            .ok_or_else(|| Error::Index(format!("place {place_id} of {}", self.places.len())))?;
        let domain = self
            .domains
            .get(domain_id)
            .ok_or_else(|| Error::Index(format!("domain {domain_id} of {}", self.domains.len())))?;
        if !viewpoint.is_finite() {
            return Err(Error::Argument("viewpoint must be finite".into()));
        }
        let spec = &self.spec;
        let c_o = spec.c_o;
        let p = spec.patches();
        let mut scene = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, place_id, domain_id, viewpoint));

        let (s, c) = viewpoint.sin_cos();
        let mut rotated = place.latent.clone();
        let mut i = 0;
        while i + 1 < spec.place_dim {
            let (a, b) = (place.latent[i], place.latent[i + 1]);
            rotated[i] = c * a - s * b;
            rotated[i + 1] = s * a + c * b;
            i += 2;
        }

        let parts = spec.parts;
        let seg = spec.place_dim / parts;
        let part_gain = parts as f64;
        let clutter = spec.clutter_scale;
        let coeffs: Vec<f64> = (0..self.distractors.len())
            .map(|_| spec.shared_clutter * scene.sample::<f64, _>(StandardNormal))
            .collect();

        // Parts tile the grid in a fixed cycle whose phase depends on the scene.
        let layout_shift = scene.random_range(0..parts);
        let mut patches = Matrix::zeros(p, c_o);
        let mut canonical = vec![0.0; c_o];
        for r in 0..p {
            let weight: f64 = scene.random_range(0.2..1.0);
            canonical.fill(0.0);
            if parts == 1 {
                for (v, z) in canonical.iter_mut().zip(&rotated) {
                    *v = weight * z;
                }
            } else {
                let j = (r + layout_shift) % parts;
                for k in j * seg..(j + 1) * seg {
                    canonical[k] = weight * part_gain * rotated[k];
                }
                canonical[spec.place_dim + j] = spec.type_scale;
            }
            for (u, &g) in self.distractors.iter().zip(&coeffs) {
                let jitter: f64 = scene.sample(StandardNormal);
                let cpj = g + clutter * jitter;
                for (v, uv) in canonical.iter_mut().zip(u) {
                    *v += cpj * uv;
                }
            }
            let row = patches.row_mut(r);
            for (k, out) in row.iter_mut().enumerate() {
                *out = dot(domain.transform.row(k), &canonical) + domain.bias[k];
            }
        }

        let radius = POSITION_JITTER_M * scene.random_range(0.0f64..1.0).sqrt();
        let angle = scene.random_range(0.0..std::f64::consts::TAU);

        if domain.noise_sigma > 0.0 {
            for v in patches.data_mut() {
                *v += domain.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }

        Ok(PlaceObservation {
            features: FeatureMap::new(patches, format!("d{domain_id}_p{place_id}"))?,
            place_id,
            domain_id,
            x_m: place.x_m + radius * angle.cos(),
            y_m: place.y_m + radius * angle.sin(),
            frame: place.frame,
            viewpoint,
        })
    }

    /// Viewpoint drawn uniformly within the domain's spread.
    pub fn sample_viewpoint<R: Rng + ?Sized>(&self, domain_id: usize, rng: &mut R) -> f64 {
        let spread = self.domains[domain_id].viewpoint_spread;
        if spread > 0.0 {
            rng.random_range(-spread..=spread)
        } else {
            0.0
        }
    }
}

/// Free-function form of [`SyntheticWorld::render`].
pub fn render_observation<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    place_id: usize,
    domain_id: usize,
    viewpoint: f64,
    rng: &mut R,
) -> Result<PlaceObservation> {
    world.render(place_id, domain_id, viewpoint, rng)
}

fn scatter(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64, Option<u64>)>> {
    let min_density = spec
        .domains
        .iter()
        .map(|d| d.sampling_density)
        .fold(f64::INFINITY, f64::min);
    let side = (spec.num_places as f64 / min_density).sqrt() * 1000.0;
    let min_sq = spec.min_separation_m * spec.min_separation_m;
    let max_attempts = 1000 * spec.num_places;
    let mut pts: Vec<(f64, f64, Option<u64>)> = Vec::with_capacity(spec.num_places);
    let mut attempts = 0;
    while pts.len() < spec.num_places {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Capacity(format!(
                "placed {} of {} places {} m apart in a {side:.0} m square",
                pts.len(),
                spec.num_places,
                spec.min_separation_m
            )));
        }
        let x = rng.random_range(0.0..side);
        let y = rng.random_range(0.0..side);
        if pts.iter().all(|(px, py, _)| (px - x).powi(2) + (py - y).powi(2) >= min_sq) {
            pts.push((x, y, None));
        }
    }
    Ok(pts)
}

/// Observations of one domain grouped by place; the training-side view of a
/// dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub domain_id: usize,
    pub places: Vec<Vec<PlaceObservation>>,
}

impl Dataset {
    pub fn render(
        world: &SyntheticWorld,
        domain_id: usize,
        place_ids: &[usize],
        images_per_place: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = world
            .domains
            .get(domain_id)
            .ok_or_else(|| Error::Index(format!("domain {domain_id}")))?
            .name
            .clone();
        let mut places = Vec::with_capacity(place_ids.len());
        for &pid in place_ids {
            let mut obs = Vec::with_capacity(images_per_place);
            for i in 0..images_per_place {
                let vp = world.sample_viewpoint(domain_id, rng);
                let mut o = world.render(pid, domain_id, vp, rng)?;
                o.features.image_id = format!("{name}_p{pid}_i{i}");
                obs.push(o);
            }
            places.push(obs);
        }
        Ok(Dataset { name, domain_id, places })
    }
}

/// Held-out database/query observations for one domain.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub name: String,
    pub domain_id: usize,
    pub database: Vec<PlaceObservation>,
    pub queries: Vec<PlaceObservation>,
}

impl EvalSet {
    /// One database and one query view per place, each at an independent
    /// viewpoint.
    pub fn render(world: &SyntheticWorld, domain_id: usize, place_ids: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let name = world
            .domains
            .get(domain_id)
            .ok_or_else(|| Error::Index(format!("domain {domain_id}")))?
            .name
            .clone();
        let mut database = Vec::with_capacity(place_ids.len());
        let mut queries = Vec::with_capacity(place_ids.len());
        for &pid in place_ids {
            let vp = world.sample_viewpoint(domain_id, rng);
            let mut db = world.render(pid, domain_id, vp, rng)?;
            db.features.image_id = format!("{name}_db_p{pid}");
            database.push(db);
            let vp = world.sample_viewpoint(domain_id, rng);
            let mut q = world.render(pid, domain_id, vp, rng)?;
            q.features.image_id = format!("{name}_q_p{pid}");
            queries.push(q);
        }
        Ok(EvalSet {
            name,
            domain_id,
            database,
            queries,
        })
    }
}

/// Splits place ids into `(train, validation)` with the last `val_places`
/// held out.
pub fn split_places(num_places: usize, val_places: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if val_places == 0 || val_places >= num_places {
        return Err(Error::Config(format!(
            "val_places must be in 1..{num_places}, got {val_places}"
        )));
    }
    let cut = num_places - val_places;
    Ok(((0..cut).collect(), (cut..num_places).collect()))
}

/// Draws `k` distinct indices below `n`.
pub(crate) fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k).into_vec()
}

// ---------------------------------------------------------------------------
// Files: world spec (JSON), feature maps (binary) and observation manifests.

pub fn write_world_spec(path: &Path, spec: &WorldSpec) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(())
}

pub fn read_world_spec(path: &Path) -> Result<WorldSpec> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

const FEATURE_MAGIC: &[u8; 4] = b"CQSF";

/// Feature map file: `"CQSF"`, version `u32`, rows `u32`, cols `u32`, then
/// row-major little-endian `f64` values.
pub fn write_feature_map(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_map(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!("{} is not a feature map file", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(4) != 1 {
        return Err(Error::Format(format!("unsupported feature map version {}", u32_at(4))));
    }
    let (rows, cols) = (u32_at(8), u32_at(12));
    if bytes.len() != 16 + rows * cols * 8 {
        return Err(Error::Format(format!("{} has a truncated body", path.display())));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub place_id: usize,
    pub domain_id: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub frame_idx: Option<u64>,
    /// Relative to the manifest's directory.
    pub feature_path: String,
}

/// Writes feature files under `dir/features/` and a manifest at
/// `dir/<name>.csv`. Returns the manifest path.
pub fn write_observation_manifest(dir: &Path, name: &str, observations: &[PlaceObservation]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    let manifest = dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    for o in observations {
        let rel = format!("features/{}.cqsf", o.features.image_id);
        write_feature_map(&dir.join(&rel), &o.features.patches)?;
        w.serialize(ManifestRow {
            id: o.features.image_id.clone(),
            place_id: o.place_id,
            domain_id: o.domain_id,
            x_m: o.x_m,
            y_m: o.y_m,
            frame_idx: o.frame,
            feature_path: rel,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Loads every observation listed in a manifest.
pub fn load_manifest_observations(path: &Path) -> Result<Vec<PlaceObservation>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|row| {
            let patches = read_feature_map(&base.join(&row.feature_path))?;
            Ok(PlaceObservation {
                features: FeatureMap::new(patches, row.id)?,
                place_id: row.place_id,
                domain_id: row.domain_id,
                x_m: row.x_m,
                y_m: row.y_m,
                frame: row.frame_idx,
                viewpoint: f64::NAN,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
