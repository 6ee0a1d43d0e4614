//! Simulated minimum-force ground truth under a Coulomb slip model.
//!
//! Two routes compute the same quantity: a closed form
//! (`ceil_grid(max(f_init, m·g/μ))`) and a replay of the slip-triggered
//! tightening loop used when measuring real objects. Synthetic pools are
//! generated from the closed form.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::{save_pool, Category, ExperienceRecord, Pool, PoolError, IMAGES_DIR};

/// Slack applied when snapping onto the grid so that values a few ulps above
/// a grid point are not pushed to the next one.
const GRID_EPS: f64 = 1e-9;

pub const SYNTH_MASS_RANGE_KG: (f64, f64) = (0.01, 1.5);
pub const SYNTH_MU_RANGE: (f64, f64) = (0.8, 4.0);
/// Width of one mass/grip band in natural-log units.
pub const LOG_BAND_WIDTH: f64 = 0.05;
const FRAGILE_FRACTION: f64 = 0.3;
const FRAGILE_LIGHT_LIMIT_KG: f64 = 0.1;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("required force {required_n:.3} N exceeds the {cap_n} N cap")]
    ForceCapExceeded { required_n: f64, cap_n: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObject {
    pub mass_kg: f64,
    /// Effective gripper-object friction coefficient.
    pub mu_eff: f64,
    pub label: String,
    pub category: Category,
}

impl SyntheticObject {
    pub fn new(mass_kg: f64, mu_eff: f64) -> Self {
        Self {
            mass_kg,
            mu_eff,
            label: String::new(),
            category: Category::Cuboids,
        }
    }

    fn validate(&self) -> Result<(), OracleError> {
        if !(self.mass_kg.is_finite() && self.mass_kg > 0.0) {
            return Err(OracleError::InvalidArgument(format!("mass {} kg", self.mass_kg)));
        }
        if !(self.mu_eff.is_finite() && self.mu_eff > 0.0) {
            return Err(OracleError::InvalidArgument(format!("mu_eff {}", self.mu_eff)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub f_init_n: f64,
    pub f_step_n: f64,
    pub grid_n: f64,
    pub g_mps2: f64,
    pub f_max_n: f64,
    /// Std-dev of Gaussian noise on each measured trial. Zero means a single
    /// exact trial; anything positive switches to median-of-`trials`.
    pub noise_sigma_n: f64,
    pub trials: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            f_init_n: 0.25,
            f_step_n: 0.25,
            grid_n: 0.25,
            g_mps2: 9.81,
            f_max_n: 20.0,
            noise_sigma_n: 0.0,
            trials: 3,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        let positive = [
            ("f_init_n", self.f_init_n),
            ("f_step_n", self.f_step_n),
            ("grid_n", self.grid_n),
            ("g_mps2", self.g_mps2),
            ("f_max_n", self.f_max_n),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(OracleError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.f_init_n > self.f_max_n {
            return Err(OracleError::InvalidArgument("f_init_n exceeds f_max_n".into()));
        }
        if !(self.noise_sigma_n.is_finite() && self.noise_sigma_n >= 0.0) {
            return Err(OracleError::InvalidArgument("noise_sigma_n must be >= 0".into()));
        }
        if self.trials == 0 {
            return Err(OracleError::InvalidArgument("trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// Smallest grid multiple not below `value`.
pub fn ceil_to_grid(value: f64, grid: f64) -> f64 {
    let steps = (value / grid - GRID_EPS).ceil();
    steps * grid
}

fn required_force(obj: &SyntheticObject, cfg: &OracleConfig) -> f64 {
    obj.mass_kg * cfg.g_mps2 / obj.mu_eff
}

/// Coulomb slip: the friction the grasp can hold is below the object weight.
fn slips(force: f64, obj: &SyntheticObject, cfg: &OracleConfig) -> bool {
    force < required_force(obj, cfg) - GRID_EPS * cfg.grid_n
}

pub fn closed_form_fstar(obj: &SyntheticObject, cfg: &OracleConfig) -> Result<f64, OracleError> {
    obj.validate()?;
    cfg.validate()?;
    let required = required_force(obj, cfg);
    let force = ceil_to_grid(required.max(cfg.f_init_n), cfg.grid_n);
    if force > cfg.f_max_n + GRID_EPS {
        return Err(OracleError::ForceCapExceeded {
            required_n: required,
            cap_n: cfg.f_max_n,
        });
    }
    Ok(force)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub force_n: f64,
    pub slip_events: u32,
}

/// Replays the lift: start at `f_init_n`, tighten by `f_step_n` after every
/// slip until the object holds.
pub fn adaptive_force_search(
    obj: &SyntheticObject,
    cfg: &OracleConfig,
) -> Result<SearchResult, OracleError> {
    obj.validate()?;
    cfg.validate()?;
    let mut force = cfg.f_init_n;
    let mut slip_events = 0u32;
    while slips(force, obj, cfg) {
        slip_events += 1;
        // step count times step size keeps the force exact on binary grids
        let next = cfg.f_init_n + f64::from(slip_events) * cfg.f_step_n;
        if next > cfg.f_max_n + GRID_EPS {
            return Err(OracleError::ForceCapExceeded {
                required_n: required_force(obj, cfg),
                cap_n: cfg.f_max_n,
            });
        }
        force = next;
    }
    let force_n = ceil_to_grid(force, cfg.grid_n);
    if force_n > cfg.f_max_n + GRID_EPS {
        return Err(OracleError::ForceCapExceeded {
            required_n: required_force(obj, cfg),
            cap_n: cfg.f_max_n,
        });
    }
    Ok(SearchResult {
        force_n,
        slip_events,
    })
}

/// A measured F*: with zero noise this is the adaptive search result; with
/// noise it is the median of `cfg.trials` noisy trials, snapped up to the grid.
pub fn measure_fstar<R: Rng>(
    obj: &SyntheticObject,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<f64, OracleError> {
    let exact = adaptive_force_search(obj, cfg)?.force_n;
    if cfg.noise_sigma_n == 0.0 {
        return Ok(exact);
    }
    let normal = Normal::new(0.0, cfg.noise_sigma_n)
        .map_err(|e| OracleError::InvalidArgument(e.to_string()))?;
    let mut trials: Vec<f64> = (0..cfg.trials).map(|_| exact + normal.sample(rng)).collect();
    trials.sort_by(f64::total_cmp);
    let median = if trials.len() % 2 == 1 {
        trials[trials.len() / 2]
    } else {
        let hi = trials.len() / 2;
        0.5 * (trials[hi - 1] + trials[hi])
    };
    let force = ceil_to_grid(median.max(cfg.f_init_n), cfg.grid_n).min(
        // the cap is a grid multiple in every sane configuration
        ceil_to_grid(cfg.f_max_n, cfg.grid_n),
    );
    Ok(force)
}

/// Mass band index on the log scale, starting at the synthetic mass floor.
pub fn mass_band(mass_kg: f64) -> u32 {
    band_index(mass_kg, SYNTH_MASS_RANGE_KG.0)
}

/// Grip band index on the log scale, starting at the synthetic friction floor.
pub fn grip_band(mu_eff: f64) -> u32 {
    band_index(mu_eff, SYNTH_MU_RANGE.0)
}

fn band_index(value: f64, floor: f64) -> u32 {
    ((value.max(floor) / floor).ln() / LOG_BAND_WIDTH).floor() as u32
}

fn grip_word(mu: f64) -> &'static str {
    match mu {
        m if m < 1.2 => "slick",
        m if m < 2.0 => "smooth",
        m if m < 3.0 => "grippy",
        _ => "tacky",
    }
}

fn shape_word(category: Category) -> &'static str {
    match category {
        Category::Bottles => "bottle",
        Category::Cylinders => "cylinder",
        Category::Cuboids => "box",
        Category::FragileHeavy => "fragile container",
        Category::FragileLight => "fragile item",
        Category::OddShapes => "irregular object",
    }
}

/// Templated description for a synthetic object. Embeds the mass and grip
/// bands so the mock embedding provider can recover them.
pub fn synthetic_description(obj: &SyntheticObject) -> String {
    format!(
        "A {grip} {shape} weighing roughly {grams:.0} g. mass band {mb}; grip band {gb}.",
        grip = grip_word(obj.mu_eff),
        shape = shape_word(obj.category),
        grams = obj.mass_kg * 1000.0,
        mb = mass_band(obj.mass_kg),
        gb = grip_band(obj.mu_eff),
    )
}

/// Draws one object from the synthetic generator distribution.
pub fn sample_object<R: Rng>(rng: &mut R, index: usize) -> SyntheticObject {
    let (lo, hi) = SYNTH_MASS_RANGE_KG;
    let mass_kg = (rng.random_range(lo.ln()..hi.ln())).exp();
    let mu_eff = rng.random_range(SYNTH_MU_RANGE.0..SYNTH_MU_RANGE.1);
    let category = if rng.random_bool(FRAGILE_FRACTION) {
        if mass_kg < FRAGILE_LIGHT_LIMIT_KG {
            Category::FragileLight
        } else {
            Category::FragileHeavy
        }
    } else {
        [
            Category::Bottles,
            Category::Cylinders,
            Category::Cuboids,
            Category::OddShapes,
        ][rng.random_range(0..4)]
    };
    SyntheticObject {
        mass_kg,
        mu_eff,
        label: format!("{}-{index:04}", shape_word(category).replace(' ', "-")),
        category,
    }
}

/// A generated record together with the physical parameters behind it.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub object: SyntheticObject,
    pub record: ExperienceRecord,
    pub image_png: Vec<u8>,
}

/// In-memory generator used by [`generate_synthetic_pool`]. `id_prefix`
/// keeps ids distinct when several batches are combined.
pub fn synthesize(
    n: usize,
    seed: u64,
    cfg: &OracleConfig,
    id_prefix: &str,
) -> Result<Vec<SyntheticSample>, OracleError> {
    if n == 0 {
        return Err(OracleError::InvalidArgument("n must be at least 1".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_fa11);
    (0..n)
        .map(|i| {
            let object = sample_object(&mut rng, i);
            let f_star_n = if cfg.noise_sigma_n > 0.0 {
                measure_fstar(&object, cfg, &mut noise_rng)?
            } else {
                closed_form_fstar(&object, cfg)?
            };
            let id = format!("{id_prefix}{i:04}");
            let color = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
            let record = ExperienceRecord {
                image_ref: format!("{IMAGES_DIR}/{id}.png"),
                name: object.label.clone(),
                mass_kg: object.mass_kg,
                description: synthetic_description(&object),
                f_star_n,
                category: object.category,
                id,
            };
            Ok(SyntheticSample {
                object,
                record,
                image_png: solid_png(color),
            })
        })
        .collect()
}

/// Generates a synthetic pool on disk under `out_dir`.
pub fn generate_synthetic_pool(
    n: usize,
    seed: u64,
    cfg: &OracleConfig,
    out_dir: &Path,
) -> Result<Pool, OracleError> {
    let samples = synthesize(n, seed, cfg, "syn-")?;
    let images = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|source| OracleError::Io {
        path: images.clone(),
        source,
    })?;
    for s in &samples {
        let path = out_dir.join(&s.record.image_ref);
        fs::write(&path, &s.image_png).map_err(|source| OracleError::Io { path, source })?;
    }
    let pool = Pool::new(samples.into_iter().map(|s| s.record).collect()).with_base_dir(out_dir);
    save_pool(&pool, out_dir)?;
    Ok(pool)
}

/// 8x8 single-colour RGB PNG.
pub fn solid_png(rgb: [u8; 3]) -> Vec<u8> {
    const SIDE: u32 = 8;
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, SIDE, SIDE);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("in-memory png header");
        let data: Vec<u8> = rgb.iter().copied().cycle().take((SIDE * SIDE * 3) as usize).collect();
        writer.write_image_data(&data).expect("in-memory png body");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(m: f64, mu: f64) -> SyntheticObject {
        SyntheticObject::new(m, mu)
    }

    #[test]
    fn closed_form_examples() {
        let cfg = OracleConfig::default();
        // 0.1 * 9.81 / 1.0 = 0.981 -> 1.00
        assert_eq!(closed_form_fstar(&obj(0.1, 1.0), &cfg).unwrap(), 1.0);
        assert_eq!(closed_form_fstar(&obj(0.001, 1.0), &cfg).unwrap(), 0.25);
        // 0.236 * 9.81 / 0.6 = 3.8586 -> 4.00
        assert_eq!(closed_form_fstar(&obj(0.236, 0.6), &cfg).unwrap(), 4.0);
    }

    #[test]
    fn exact_grid_value_is_not_bumped() {
        let cfg = OracleConfig::default();
        // 0.5 * 9.81 / 9.81 = 0.5 exactly on the grid (up to rounding)
        assert_eq!(closed_form_fstar(&obj(0.5, 9.81), &cfg).unwrap(), 0.5);
        assert_eq!(adaptive_force_search(&obj(0.5, 9.81), &cfg).unwrap().force_n, 0.5);
    }

    #[test]
    fn adaptive_search_examples() {
        let cfg = OracleConfig::default();
        let r = adaptive_force_search(&obj(0.1, 1.0), &cfg).unwrap();
        assert_eq!(r, SearchResult { force_n: 1.0, slip_events: 3 });
        let r = adaptive_force_search(&obj(0.001, 1.0), &cfg).unwrap();
        assert_eq!(r, SearchResult { force_n: 0.25, slip_events: 0 });
    }

    #[test]
    fn cap_exceeded() {
        let cfg = OracleConfig::default();
        assert!(matches!(
            adaptive_force_search(&obj(10.0, 0.5), &cfg),
            Err(OracleError::ForceCapExceeded { .. })
        ));
        assert!(matches!(
            closed_form_fstar(&obj(10.0, 0.5), &cfg),
            Err(OracleError::ForceCapExceeded { .. })
        ));
        // exactly at the cap is allowed
        let at_cap = obj(20.0 / 9.81, 1.0);
        assert_eq!(closed_form_fstar(&at_cap, &cfg).unwrap(), 20.0);
        assert_eq!(adaptive_force_search(&at_cap, &cfg).unwrap().force_n, 20.0);
    }

    #[test]
    fn coarse_step_overshoots_by_at_most_one_step() {
        let cfg = OracleConfig {
            f_step_n: 0.4,
            ..OracleConfig::default()
        };
        for (m, mu) in [(0.1, 1.0), (0.3, 2.0), (1.2, 0.9)] {
            let closed = closed_form_fstar(&obj(m, mu), &cfg).unwrap();
            let searched = adaptive_force_search(&obj(m, mu), &cfg).unwrap().force_n;
            assert!(searched >= closed && searched - closed <= ceil_to_grid(cfg.f_step_n, cfg.grid_n) + 1e-12);
        }
    }

    #[test]
    fn invalid_inputs() {
        let cfg = OracleConfig::default();
        assert!(closed_form_fstar(&obj(0.0, 1.0), &cfg).is_err());
        assert!(closed_form_fstar(&obj(0.1, -1.0), &cfg).is_err());
        let bad = OracleConfig {
            f_init_n: 30.0,
            ..OracleConfig::default()
        };
        assert!(matches!(bad.validate(), Err(OracleError::InvalidArgument(_))));
    }

    #[test]
    fn noiseless_measurement_matches_search() {
        let cfg = OracleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(measure_fstar(&obj(0.1, 1.0), &cfg, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn noisy_measurement_stays_on_grid() {
        let cfg = OracleConfig {
            noise_sigma_n: 0.2,
            ..OracleConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let f = measure_fstar(&obj(0.3, 1.5), &cfg, &mut rng).unwrap();
            assert!(crate::pool::is_on_force_grid(f));
            assert!((f - 2.0).abs() <= 1.0);
        }
    }

    #[test]
    fn zero_records_rejected() {
        assert!(matches!(
            synthesize(0, 1, &OracleConfig::default(), "x"),
            Err(OracleError::InvalidArgument(_))
        ));
    }

    #[test]
    fn bands_are_monotone() {
        assert_eq!(mass_band(0.01), 0);
        assert!(mass_band(1.5) > mass_band(0.5));
        assert_eq!(grip_band(0.8), 0);
        assert!(grip_band(3.9) > grip_band(1.0));
    }

    #[test]
    fn png_has_signature() {
        let png = solid_png([1, 2, 3]);
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }
}
