//! Synthetic cytology-like images: textured background, one cytoplasm
//! blob per cell and a nucleus that is either large and round (normal)
//! or small and irregular (abnormal).

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::mask::{class, LabelMask};
use crate::tensor::{Shape, Tensor};

const PLACEMENT_TRIES: usize = 200;
const LAYOUT_TRIES: usize = 50;
/// Minimum distance between a nucleus and the image border.
const MARGIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Images are `size x size`.
    pub size: usize,
    /// Cells (one nucleus each) per image.
    pub nuclei: RangeInclusive<usize>,
    /// Major radius of normal nuclei at 64x64; scaled with `size`.
    pub normal_radius: (f64, f64),
    /// Major radius of abnormal nuclei at 64x64; scaled with `size`.
    pub abnormal_radius: (f64, f64),
    /// Probability that a cell is abnormal.
    pub abnormal_fraction: f64,
    /// Texture amplitude and pixel noise standard deviation.
    pub noise: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 200,
            size: 64,
            nuclei: 1..=3,
            normal_radius: (5.5, 7.5),
            abnormal_radius: (2.0, 3.5),
            abnormal_fraction: 0.5,
            noise: 0.05,
            channels: 3,
            seed: 7,
        }
    }
}

/// Cytoplasm radius as a multiple of the nucleus radius.
const NORMAL_CYTO: (f64, f64) = (1.8, 2.3);
const ABNORMAL_CYTO: (f64, f64) = (2.6, 3.4);

const BACKGROUND_RGB: [f64; 3] = [0.93, 0.88, 0.91];
const CYTOPLASM_RGB: [f64; 3] = [0.60, 0.72, 0.82];
const NORMAL_RGB: [f64; 3] = [0.35, 0.28, 0.55];
const ABNORMAL_RGB: [f64; 3] = [0.22, 0.14, 0.42];

impl SynthSpec {
    fn scale(&self) -> f64 {
        self.size as f64 / 64.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("synth_spec", msg));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.size < 16 {
            return bad(format!("size {} is below 16", self.size));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.nuclei.is_empty() || *self.nuclei.start() == 0 {
            return bad(format!("nuclei range {:?} must be non-empty and positive", self.nuclei));
        }
        let (a0, a1) = self.abnormal_radius;
        let (n0, n1) = self.normal_radius;
        if !(0.5 <= a0 && a0 <= a1 && a1 < n0 && n0 <= n1) {
            return bad(format!(
                "radius ranges must satisfy 0.5 <= abnormal <= normal, got abnormal {:?} normal {:?}",
                self.abnormal_radius, self.normal_radius
            ));
        }
        if 2.0 * (n1 * self.scale() + MARGIN) > self.size as f64 {
            return bad(format!("normal radius {n1} does not fit in {}", self.size));
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return bad(format!("abnormal_fraction {} outside [0, 1]", self.abnormal_fraction));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("count", self.count);
        kv.set("size", self.size);
        kv.set("nuclei_min", self.nuclei.start());
        kv.set("nuclei_max", self.nuclei.end());
        kv.set("normal_radius_min", self.normal_radius.0);
        kv.set("normal_radius_max", self.normal_radius.1);
        kv.set("abnormal_radius_min", self.abnormal_radius.0);
        kv.set("abnormal_radius_max", self.abnormal_radius.1);
        kv.set("abnormal_fraction", self.abnormal_fraction);
        kv.set("noise", self.noise);
        kv.set("channels", self.channels);
        kv.set("seed", self.seed);
    }

    /// Read fields present in `kv`, keeping `self`'s values for the rest.
    pub fn overlay_kv(&self, kv: &KeyValues) -> std::result::Result<Self, String> {
        let d = self;
        Ok(SynthSpec {
            count: kv.parsed("count")?.unwrap_or(d.count),
            size: kv.parsed("size")?.unwrap_or(d.size),
            nuclei: kv.parsed("nuclei_min")?.unwrap_or(*d.nuclei.start())
                ..=kv.parsed("nuclei_max")?.unwrap_or(*d.nuclei.end()),
            normal_radius: (
                kv.parsed("normal_radius_min")?.unwrap_or(d.normal_radius.0),
                kv.parsed("normal_radius_max")?.unwrap_or(d.normal_radius.1),
            ),
            abnormal_radius: (
                kv.parsed("abnormal_radius_min")?.unwrap_or(d.abnormal_radius.0),
                kv.parsed("abnormal_radius_max")?.unwrap_or(d.abnormal_radius.1),
            ),
            abnormal_fraction: kv.parsed("abnormal_fraction")?.unwrap_or(d.abnormal_fraction),
            noise: kv.parsed("noise")?.unwrap_or(d.noise),
            channels: kv.parsed("channels")?.unwrap_or(d.channels),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
        })
    }
}

/// A possibly perturbed, rotated ellipse.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    amp: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let rho = (u * u + v * v).sqrt();
        let limit = if self.amp == 0.0 {
            1.0
        } else {
            1.0 + self.amp * (self.lobes * v.atan2(u) + self.phase).sin()
        };
        rho <= limit
    }

    /// Radius of a circle that encloses the blob.
    fn reach(&self) -> f64 {
        self.a.max(self.b) * (1.0 + self.amp)
    }
}

struct Cell {
    nucleus: Blob,
    cytoplasm: Blob,
    abnormal: bool,
    cyto_rgb: [f64; 3],
    nucleus_rgb: [f64; 3],
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let d = uniform(rng, (-amount, amount));
    base.map(|v| v + d + uniform(rng, (-amount, amount)) * 0.3)
}

fn draw_cell(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Cell {
    let s = spec.scale();
    let abnormal = rng.random_bool(spec.abnormal_fraction);
    let (radius, aspect, cyto) = if abnormal {
        (spec.abnormal_radius, (0.55, 0.8), ABNORMAL_CYTO)
    } else {
        (spec.normal_radius, (0.85, 1.0), NORMAL_CYTO)
    };
    let a = uniform(rng, radius) * s;
    let b = a * uniform(rng, aspect);
    let (amp, lobes) = if abnormal {
        (uniform(rng, (0.08, 0.18)), rng.random_range(3..=5) as f64)
    } else {
        (0.0, 0.0)
    };
    let nucleus = Blob {
        cy: 0.0,
        cx: 0.0,
        a,
        b,
        angle: uniform(rng, (0.0, PI)),
        amp,
        lobes,
        phase: uniform(rng, (0.0, 2.0 * PI)),
    };
    let ca = a * uniform(rng, cyto);
    let cytoplasm = Blob {
        cy: 0.0,
        cx: 0.0,
        a: ca,
        b: ca * uniform(rng, (0.75, 1.0)),
        angle: uniform(rng, (0.0, PI)),
        amp: 0.0,
        lobes: 0.0,
        phase: 0.0,
    };
    Cell {
        nucleus,
        cytoplasm,
        abnormal,
        cyto_rgb: jitter(rng, CYTOPLASM_RGB, 0.05),
        nucleus_rgb: jitter(rng, if abnormal { ABNORMAL_RGB } else { NORMAL_RGB }, 0.04),
    }
}

/// Place cells so that enclosing circles of their cytoplasm do not
/// overlap and every nucleus lies inside the image.
fn place_cells(spec: &SynthSpec, rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<Cell>> {
    let size = spec.size as f64;
    let mut cells: Vec<Cell> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cell = draw_cell(spec, rng);
        // The nucleus sits off-centre inside its cytoplasm.
        let slack = (cell.cytoplasm.b - cell.nucleus.reach()).max(0.0) * 0.3;
        let (oy, ox) = (uniform(rng, (-slack, slack)), uniform(rng, (-slack, slack)));
        let lo = cell.nucleus.reach() + MARGIN;
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let cy = uniform(rng, (lo, size - lo));
            let cx = uniform(rng, (lo, size - lo));
            let r = cell.cytoplasm.reach() + slack * 1.5;
            let free = cells.iter().all(|o| {
                let d = ((o.cytoplasm.cy - cy).powi(2) + (o.cytoplasm.cx - cx).powi(2)).sqrt();
                d >= r + o.cytoplasm.reach() + 1.0
            });
            free.then_some((cy, cx))
        })?;
        cell.cytoplasm.cy = placed.0 - oy;
        cell.cytoplasm.cx = placed.1 - ox;
        cell.nucleus.cy = placed.0;
        cell.nucleus.cx = placed.1;
        cells.push(cell);
    }
    Some(cells)
}

fn render(spec: &SynthSpec, rng: &mut ChaCha8Rng, cells: &[Cell]) -> (Tensor<f64>, LabelMask) {
    let n = spec.size;
    let mut labels = vec![class::BACKGROUND; n * n];
    let mut rgb = vec![BACKGROUND_RGB; n * n];
    for cell in cells {
        for y in 0..n {
            for x in 0..n {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let i = y * n + x;
                if cell.nucleus.contains(py, px) {
                    labels[i] = if cell.abnormal {
                        class::ABNORMAL_NUCLEUS
                    } else {
                        class::NORMAL_NUCLEUS
                    };
                    rgb[i] = cell.nucleus_rgb;
                } else if cell.cytoplasm.contains(py, px) && labels[i] == class::BACKGROUND {
                    labels[i] = class::CYTOPLASM;
                    rgb[i] = cell.cyto_rgb;
                }
            }
        }
    }
    // Low-frequency staining texture plus per-pixel noise.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                uniform(rng, (0.05, 0.35)),
                uniform(rng, (0.05, 0.35)),
                uniform(rng, (0.0, 2.0 * PI)),
            )
        })
        .collect();
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let shape = Shape::new(1, spec.channels, n, n);
    let mut image = Tensor::zeros(shape);
    for y in 0..n {
        for x in 0..n {
            let texture: f64 = waves
                .iter()
                .map(|(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            let base = rgb[y * n + x];
            let gray = 0.299 * base[0] + 0.587 * base[1] + 0.114 * base[2];
            for c in 0..spec.channels {
                let v0 = if spec.channels == 1 { gray } else { base[c] };
                let v = if spec.noise > 0.0 {
                    v0 + spec.noise * texture + normal.sample(rng)
                } else {
                    v0
                };
                *image.at_mut(0, c, y, x) = v.clamp(0.0, 1.0);
            }
        }
    }
    let mask = LabelMask::new(n, n, labels).expect("labels are in range");
    (image, mask)
}

/// Generate `spec.count` samples. Sample `i` depends only on the seed
/// and `i`, so a larger count extends a smaller one.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let n = rng.random_range(spec.nuclei.clone());
        let cells = (0..LAYOUT_TRIES)
            .find_map(|_| place_cells(spec, &mut rng, n))
            .ok_or_else(|| {
                Error::Infeasible(format!(
                    "could not place {n} cells in a {0}x{0} image after {LAYOUT_TRIES} layouts",
                    spec.size
                ))
            })?;
        let (image, mask) = render(spec, &mut rng, &cells);
        out.push(Sample::new(format!("synth_{i:04}"), image, mask)?);
    }
    Ok(out)
}
