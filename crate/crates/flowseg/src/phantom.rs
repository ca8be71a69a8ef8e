//! Synthetic lung phantoms with slice-level ground truth.
//!
//! A phantom is a soft-tissue ellipsoid body (~+40 HU) holding two
//! low-intensity lung ellipsoids (~-800 HU), textured with two octaves of
//! smooth value noise, plus zero or more bright nodules: soft spheres or
//! 2-4-lobed sphere unions at +30..+100 HU over the lung background. Nodule
//! edges ramp linearly over one voxel; the ground-truth mask cuts that ramp
//! at 50%, i.e. exactly at the nominal radius.
//!
//! Axial slices are indexed by the third dimension. Everything is a pure
//! function of (config, seed).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AIR_HU: f32 = -1000.0;
pub const BODY_HU: f32 = 40.0;
pub const LUNG_HU: f32 = -800.0;

/// Dense f32 voxel grid. `values` is row-major over `dims`, so the axial
/// index (third dimension) is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub values: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume { dims, spacing, values: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn with_values(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self> {
        let numel = dims[0] * dims[1] * dims[2];
        if values.len() != numel {
            return Err(Error::Invalid(format!(
                "volume dims {:?} want {} voxels, got {}",
                dims,
                numel,
                values.len()
            )));
        }
        Ok(Volume { dims, spacing, values })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Number of axial slices.
    pub fn depth(&self) -> usize {
        self.dims[2]
    }

    /// Copy axial slice `k` as a row-major `[dims0, dims1]` image.
    pub fn axial_slice(&self, k: usize) -> Vec<f32> {
        assert!(k < self.dims[2], "slice {k} out of {} slices", self.dims[2]);
        let mut out = Vec::with_capacity(self.dims[0] * self.dims[1]);
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                out.push(self.at(i, j, k));
            }
        }
        out
    }

    /// View as a single-channel tensor `[1, d0, d1, d2]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![1, self.dims[0], self.dims[1], self.dims[2]],
            self.values.clone(),
        )
        .expect("volume length matches dims")
    }

    /// Rebuild from a `[1, d0, d1, d2]` tensor.
    pub fn from_tensor(t: &Tensor, spacing: [f32; 3]) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::Invalid(format!("expected [1, d0, d1, d2] tensor, got {:?}", s)));
        }
        Volume::with_values([s[1], s[2], s[3]], spacing, t.data().to_vec())
    }

    pub fn bits_eq(&self, other: &Volume) -> bool {
        self.dims == other.dims
            && self.spacing.iter().zip(&other.spacing).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Physical diagonal in mm.
    pub fn diagonal_mm(&self) -> f64 {
        let mut acc = 0.0f64;
        for a in 0..3 {
            let e = self.dims[a] as f64 * self.spacing[a] as f64;
            acc += e * e;
        }
        acc.sqrt()
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Ellipsoid {
    pub center: [f32; 3],
    pub semi: [f32; 3],
}

impl Ellipsoid {
    /// Normalized radius: <=1 inside, >1 outside.
    pub fn rho(&self, p: [f32; 3]) -> f32 {
        let mut acc = 0.0f32;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi[a];
            acc += d * d;
        }
        acc.sqrt()
    }

    pub fn contains(&self, p: [f32; 3]) -> bool {
        self.rho(p) <= 1.0
    }
}

/// Body ellipsoid for a grid of `dims`.
pub fn body_region(dims: [usize; 3]) -> Ellipsoid {
    let c = [dims[0] as f32 / 2.0, dims[1] as f32 / 2.0, dims[2] as f32 / 2.0];
    Ellipsoid {
        center: c,
        semi: [0.46 * dims[0] as f32, 0.46 * dims[1] as f32, 0.48 * dims[2] as f32],
    }
}

/// The two lung ellipsoids, separated along the second axis.
pub fn lung_regions(dims: [usize; 3]) -> [Ellipsoid; 2] {
    let c = [dims[0] as f32 / 2.0, dims[1] as f32 / 2.0, dims[2] as f32 / 2.0];
    let semi = [0.30 * dims[0] as f32, 0.21 * dims[1] as f32, 0.40 * dims[2] as f32];
    let off = 0.24 * dims[1] as f32;
    [
        Ellipsoid { center: [c[0], c[1] - off, c[2]], semi },
        Ellipsoid { center: [c[0], c[1] + off, c[2]], semi },
    ]
}

#[derive(Clone, Debug)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Inclusive range of nodules per phantom.
    pub nodule_count: (usize, usize),
    /// Nodule radius range in mm.
    pub radius_mm: (f32, f32),
    /// Added intensity over the lung background, in HU.
    pub contrast_hu: (f32, f32),
    /// Peak amplitude of the two-octave texture noise, in HU.
    pub noise_amplitude_hu: f32,
    /// Probability that a nodule is a 2-4-lobed union instead of a sphere.
    pub lobed_probability: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            nodule_count: (1, 2),
            radius_mm: (2.0, 3.2),
            contrast_hu: (30.0, 100.0),
            noise_amplitude_hu: 50.0,
            lobed_probability: 0.4,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Config(format!("phantom dims must be >= 16, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.nodule_count.0 > self.nodule_count.1 {
            return Err(Error::Config("nodule count range is inverted".into()));
        }
        if !(self.radius_mm.0 > 0.0) || self.radius_mm.0 > self.radius_mm.1 {
            return Err(Error::Config(format!("bad radius range {:?}", self.radius_mm)));
        }
        if self.contrast_hu.0 > self.contrast_hu.1 {
            return Err(Error::Config("contrast range is inverted".into()));
        }
        Ok(())
    }
}

/// One sphere of a nodule, in mm coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Lobe {
    pub center_mm: [f32; 3],
    pub radius_mm: f32,
}

#[derive(Clone, Debug)]
pub struct Nodule {
    /// Primary center in voxel coordinates.
    pub center_vox: [f32; 3],
    /// Primary sphere radius in mm.
    pub radius_mm: f32,
    /// Added intensity over the lung background, in HU.
    pub contrast_hu: f32,
    /// Full shape: primary sphere first, then any extra lobes.
    pub lobes: Vec<Lobe>,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    /// Raw intensities in HU.
    pub image: Volume,
    /// Voxel ground truth, 1.0 inside a nodule, 0.0 elsewhere.
    pub gt_mask: Volume,
    pub nodules: Vec<Nodule>,
    pub seed: u64,
}

/// Smooth lattice noise: values at a coarse grid, trilinear in between.
struct ValueNoise {
    cell: f32,
    grid: [usize; 3],
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(dims: [usize; 3], cell: f32, rng: &mut ChaCha8Rng) -> Self {
        let grid = [
            (dims[0] as f32 / cell).ceil() as usize + 2,
            (dims[1] as f32 / cell).ceil() as usize + 2,
            (dims[2] as f32 / cell).ceil() as usize + 2,
        ];
        let n = grid[0] * grid[1] * grid[2];
        let values = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        ValueNoise { cell, grid, values }
    }

    fn sample(&self, p: [f32; 3]) -> f32 {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f32; 3];
        for a in 0..3 {
            let x = (p[a] / self.cell).max(0.0);
            let i = (x.floor() as usize).min(self.grid[a] - 2);
            idx[a] = i;
            frac[a] = x - i as f32;
        }
        let g = |di: usize, dj: usize, dk: usize| {
            self.values[((idx[0] + di) * self.grid[1] + idx[1] + dj) * self.grid[2] + idx[2] + dk]
        };
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let c00 = lerp(g(0, 0, 0), g(0, 0, 1), frac[2]);
        let c01 = lerp(g(0, 1, 0), g(0, 1, 1), frac[2]);
        let c10 = lerp(g(1, 0, 0), g(1, 0, 1), frac[2]);
        let c11 = lerp(g(1, 1, 0), g(1, 1, 1), frac[2]);
        let c0 = lerp(c00, c01, frac[1]);
        let c1 = lerp(c10, c11, frac[1]);
        lerp(c0, c1, frac[0])
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Draw one nodule fully inside one of the lungs, or fail after 100 tries.
///
/// A point at normalized lung radius rho <= 1 - m sits at least
/// m * min(semi) mm from the lung boundary, so the center is sampled
/// uniformly from the sub-ellipsoid with that rho bound and the whole soft
/// edge is guaranteed to fit. A draw only fails when the margin for the
/// drawn radius exceeds the lung entirely.
fn place_nodule(
    cfg: &PhantomConfig,
    lungs: &[Ellipsoid; 2],
    rng: &mut ChaCha8Rng,
) -> Result<Nodule> {
    let falloff_mm = (cfg.spacing[0] + cfg.spacing[1] + cfg.spacing[2]) / 3.0;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let radius = rng.gen_range(cfg.radius_mm.0..=cfg.radius_mm.1);
        let lobed = rng.gen_bool(cfg.lobed_probability);
        // Extra lobes keep offset <= 0.4 r and radius <= 0.8 r, so the
        // union stays within 1.2 r of the primary center.
        let reach = if lobed { 1.2 * radius } else { radius };
        let lung = lungs[rng.gen_range(0..2usize)];
        let min_semi_mm = (0..3)
            .map(|a| lung.semi[a] * cfg.spacing[a])
            .fold(f32::INFINITY, f32::min);
        let margin = (reach + falloff_mm + 0.5) / min_semi_mm;
        if margin >= 1.0 {
            continue;
        }
        let u = ball_point(rng);
        let scale = 1.0 - margin;
        let p = [
            lung.center[0] + u[0] * scale * lung.semi[0],
            lung.center[1] + u[1] * scale * lung.semi[1],
            lung.center[2] + u[2] * scale * lung.semi[2],
        ];
        let center_mm = [p[0] * cfg.spacing[0], p[1] * cfg.spacing[1], p[2] * cfg.spacing[2]];
        let mut lobes = vec![Lobe { center_mm, radius_mm: radius }];
        if lobed {
            let extra = rng.gen_range(1..=3usize);
            for _ in 0..extra {
                let dir = unit_vector(rng);
                let dist = rng.gen_range(0.0..=0.4f32) * radius;
                lobes.push(Lobe {
                    center_mm: [
                        center_mm[0] + dir[0] * dist,
                        center_mm[1] + dir[1] * dist,
                        center_mm[2] + dir[2] * dist,
                    ],
                    radius_mm: radius * rng.gen_range(0.6..=0.8),
                });
            }
        }
        let contrast = rng.gen_range(cfg.contrast_hu.0..=cfg.contrast_hu.1);
        return Ok(Nodule { center_vox: p, radius_mm: radius, contrast_hu: contrast, lobes });
    }
    Err(Error::Invalid(format!(
        "could not place a nodule inside the lung after {PLACEMENT_ATTEMPTS} attempts \
         (radius range {:?} mm in dims {:?})",
        cfg.radius_mm, cfg.dims
    )))
}

/// Uniform point in the closed unit ball.
fn ball_point(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        ];
        if v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= 1.0 {
            return v;
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Deterministic phantom synthesis. Identical (cfg, seed) pairs produce
/// bit-identical volumes.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = cfg.dims;
    let body = body_region(dims);
    let lungs = lung_regions(dims);

    // Fixed draw order: noise lattices, nodule count, then per-nodule draws.
    let octave1 = ValueNoise::new(dims, 8.0, &mut rng);
    let octave2 = ValueNoise::new(dims, 4.0, &mut rng);
    let count = if cfg.nodule_count.0 == cfg.nodule_count.1 {
        cfg.nodule_count.0
    } else {
        rng.gen_range(cfg.nodule_count.0..=cfg.nodule_count.1)
    };
    let mut nodules = Vec::with_capacity(count);
    for _ in 0..count {
        nodules.push(place_nodule(cfg, &lungs, &mut rng)?);
    }

    let falloff_mm = (cfg.spacing[0] + cfg.spacing[1] + cfg.spacing[2]) / 3.0;
    let mut image = Volume::zeros(dims, cfg.spacing);
    let mut mask = Volume::zeros(dims, cfg.spacing);
    let amp1 = cfg.noise_amplitude_hu * 2.0 / 3.0;
    let amp2 = cfg.noise_amplitude_hu / 3.0;

    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f32, j as f32, k as f32];
                let idx = image.index(i, j, k);
                if !body.contains(p) {
                    image.values[idx] = AIR_HU;
                    continue;
                }
                let in_lung = lungs[0].contains(p) || lungs[1].contains(p);
                let mut v = if in_lung { LUNG_HU } else { BODY_HU };
                v += amp1 * octave1.sample(p) + amp2 * octave2.sample(p);

                let pm = [
                    p[0] * cfg.spacing[0],
                    p[1] * cfg.spacing[1],
                    p[2] * cfg.spacing[2],
                ];
                let mut factor = 0.0f32;
                let mut inside = false;
                for nod in &nodules {
                    for lobe in &nod.lobes {
                        let d = dist(pm, lobe.center_mm);
                        let t = ((lobe.radius_mm + 0.5 * falloff_mm - d) / falloff_mm)
                            .clamp(0.0, 1.0);
                        if t * nod.contrast_hu > factor {
                            factor = t * nod.contrast_hu;
                        }
                        inside |= d <= lobe.radius_mm;
                    }
                }
                v += factor;
                image.values[idx] = v;
                if inside {
                    mask.values[idx] = 1.0;
                }
            }
        }
    }

    Ok(Phantom { image, gt_mask: mask, nodules, seed })
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Clip HU to [-1000, 1000] and map linearly onto display units [0, 255].
/// Not idempotent: display values re-enter as small positive HU.
pub fn preprocess(v: &Volume) -> Volume {
    let values = v
        .values
        .iter()
        .map(|&hu| (hu.clamp(-1000.0, 1000.0) + 1000.0) * (255.0 / 2000.0))
        .collect();
    Volume { dims: v.dims, spacing: v.spacing, values }
}

/// Per-axial-slice weak labels: true iff the slice holds any mask voxel.
pub fn slice_labels(mask: &Volume) -> Vec<bool> {
    let mut labels = vec![false; mask.dims[2]];
    for i in 0..mask.dims[0] {
        for j in 0..mask.dims[1] {
            for k in 0..mask.dims[2] {
                if mask.at(i, j, k) > 0.5 {
                    labels[k] = true;
                }
            }
        }
    }
    labels
}

/// One cross-validation split: evaluate on `eval`, train on the rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Shuffle `0..n` and split into `k` disjoint eval sets whose sizes differ
/// by at most one (the first `n % k` are larger); train is the complement.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("cannot split {n} volumes into {k} folds (need 2 <= k <= n)")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, explicit so the order is locked down.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0usize;
    for f in 0..k {
        let take = base + usize::from(f < extra);
        let eval: Vec<usize> = ids[at..at + take].to_vec();
        let mut train: Vec<usize> = ids[..at].to_vec();
        train.extend_from_slice(&ids[at + take..]);
        train.sort_unstable();
        folds.push(FoldSplit { train, eval });
        at += take;
    }
    Ok(folds)
}
