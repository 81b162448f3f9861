//! Synthetic binaural renderer.
//!
//! Each ear receives the source's spectral signature times its temporal
//! envelope, scaled by a distance attenuation `g = 1/(1+d)` and a sinusoidal
//! level difference: `g_R = g (1 + k sin t)`, `g_L = g (1 - k sin t)`, where
//! `t` is the bearing of the first step of the geodesic path to the source,
//! relative to the agent's heading (positive = right). Channel energy is the
//! sum of squared entries, so with noise off the right/left energy ratio is
//! `((1 + k sin t) / (1 - k sin t))^2` whatever the category.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Array, Scalar};
use crate::world::{AgentPose, Cell, DistanceField, GridMap, Heading};

#[derive(Clone, Debug, PartialEq)]
pub struct SoundCategory {
    pub id: usize,
    /// Per-frequency-bin magnitude, max 1.
    pub signature: Vec<f64>,
    /// Per-frame gain in `[0, 1]`, max 1.
    pub envelope: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticConfig {
    pub bins: usize,
    pub frames: usize,
    pub ild_strength: f64,
    pub noise_std: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        AcousticConfig { bins: 32, frames: 16, ild_strength: 0.6, noise_std: 0.01 }
    }
}

impl AcousticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ild_strength) {
            return Err(Error::Config(format!("ild_strength must lie in [0,1), got {}", self.ild_strength)));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.bins < 4 || self.frames < 1 {
            return Err(Error::Config(format!("spectrogram must be at least 4x1, got {}x{}", self.bins, self.frames)));
        }
        Ok(())
    }
}

/// Coarse arrival direction in the agent's frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bearing {
    Ahead,
    Right,
    Behind,
    Left,
}

impl Bearing {
    /// Bearing of an absolute direction as seen from `heading`.
    pub fn relative(direction: Heading, heading: Heading) -> Bearing {
        match (direction.index() + 4 - heading.index()) % 4 {
            0 => Bearing::Ahead,
            1 => Bearing::Right,
            2 => Bearing::Behind,
            _ => Bearing::Left,
        }
    }

    pub fn angle(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Bearing::Ahead => 0.0,
            Bearing::Right => FRAC_PI_2,
            Bearing::Behind => PI,
            Bearing::Left => -FRAC_PI_2,
        }
    }

    /// `sin(angle)`, exact.
    pub fn sin(self) -> f64 {
        match self {
            Bearing::Right => 1.0,
            Bearing::Left => -1.0,
            Bearing::Ahead | Bearing::Behind => 0.0,
        }
    }

    pub fn mirrored(self) -> Bearing {
        match self {
            Bearing::Right => Bearing::Left,
            Bearing::Left => Bearing::Right,
            b => b,
        }
    }
}

/// Geodesic distance and arrival bearing of `source` from `agent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceGeometry {
    pub distance: u32,
    pub bearing: Bearing,
}

impl SourceGeometry {
    pub fn from_field(map: &GridMap, field: &DistanceField, agent: &AgentPose) -> Result<Self> {
        let distance = field.get(agent.cell).ok_or_else(|| {
            Error::Unreachable(format!("source {:?} unreachable from {:?}", field.target(), agent.cell))
        })?;
        let bearing = field
            .first_step(map, agent.cell)
            .map_or(Bearing::Ahead, |dir| Bearing::relative(dir, agent.heading));
        Ok(SourceGeometry { distance, bearing })
    }

    /// `(g_L, g_R)`.
    pub fn ear_gains(&self, ild_strength: f64) -> (f64, f64) {
        let g = 1.0 / (1.0 + self.distance as f64);
        let s = self.bearing.sin();
        (g * (1.0 - ild_strength * s), g * (1.0 + ild_strength * s))
    }
}

/// Two-channel time-frequency grid: `[2, bins, frames]`, channel 0 = left ear.
#[derive(Clone, Debug, PartialEq)]
pub struct BinauralSpectrogram<T> {
    pub values: Array<T>,
}

impl<T: Scalar> BinauralSpectrogram<T> {
    pub fn channel(&self, ear: usize) -> &[T] {
        let n = self.values.len() / 2;
        &self.values.data()[ear * n..(ear + 1) * n]
    }

    /// Sum of squared entries of one ear's channel.
    pub fn channel_energy(&self, ear: usize) -> f64 {
        self.channel(ear).iter().map(|v| v.to_f64_lossy().powi(2)).sum()
    }

    pub fn left_energy(&self) -> f64 {
        self.channel_energy(0)
    }

    pub fn right_energy(&self) -> f64 {
        self.channel_energy(1)
    }

    pub fn total_energy(&self) -> f64 {
        self.left_energy() + self.right_energy()
    }
}

/// Render from precomputed geometry. Noise is drawn only when `noise_std > 0`.
pub fn render_geometry<T: Scalar, R: Rng + ?Sized>(
    geometry: SourceGeometry,
    category: &SoundCategory,
    cfg: &AcousticConfig,
    rng: &mut R,
) -> Result<BinauralSpectrogram<T>> {
    if category.signature.len() != cfg.bins || category.envelope.len() != cfg.frames {
        return Err(Error::Invalid(format!(
            "category {} is {}x{}, renderer expects {}x{}",
            category.id,
            category.signature.len(),
            category.envelope.len(),
            cfg.bins,
            cfg.frames
        )));
    }
    let (gl, gr) = geometry.ear_gains(cfg.ild_strength);
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut data = Vec::with_capacity(2 * cfg.bins * cfg.frames);
    for gain in [gl, gr] {
        for &s in &category.signature {
            for &e in &category.envelope {
                let mut v = gain * s * e;
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                data.push(T::from_f64_lossy(v.max(0.0)));
            }
        }
    }
    Ok(BinauralSpectrogram { values: Array::new(&[2, cfg.bins, cfg.frames], data)? })
}

pub fn render_binaural<T: Scalar, R: Rng + ?Sized>(
    map: &GridMap,
    agent: &AgentPose,
    source: Cell,
    category: &SoundCategory,
    cfg: &AcousticConfig,
    rng: &mut R,
) -> Result<BinauralSpectrogram<T>> {
    let field = DistanceField::new(map, source);
    let geometry = SourceGeometry::from_field(map, &field, agent)?;
    render_geometry(geometry, category, cfg, rng)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub const MAX_SIGNATURE_COSINE: f64 = 0.8;

fn random_category(id: usize, bins: usize, frames: usize, rng: &mut ChaCha8Rng) -> SoundCategory {
    let bumps = rng.random_range(1..=3);
    let mut signature = vec![0.0; bins];
    for _ in 0..bumps {
        let center = rng.random_range(0.0..bins as f64);
        let width = rng.random_range(0.8..(bins as f64 / 6.0).max(1.0));
        let amp = rng.random_range(0.3..1.0);
        for (f, s) in signature.iter_mut().enumerate() {
            let z = (f as f64 - center) / width;
            *s += amp * (-0.5 * z * z).exp();
        }
    }
    let peak = signature.iter().copied().fold(0.0, f64::max);
    signature.iter_mut().for_each(|s| *s /= peak);

    let freq = rng.random_range(0.5..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let depth = rng.random_range(0.2..0.9);
    let mut envelope: Vec<f64> = (0..frames)
        .map(|t| {
            let x = std::f64::consts::TAU * freq * t as f64 / frames as f64 + phase;
            (1.0 - depth * 0.5 * (1.0 + x.sin())).max(0.0)
        })
        .collect();
    let peak = envelope.iter().copied().fold(0.0, f64::max);
    envelope.iter_mut().for_each(|e| *e /= peak);
    SoundCategory { id, signature, envelope }
}

/// `n` categories whose signatures have pairwise cosine similarity <= 0.8.
pub fn make_category_set(n: usize, bins: usize, frames: usize, seed: u64) -> Result<Vec<SoundCategory>> {
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 categories, got {n}")));
    }
    if bins < 4 || frames == 0 {
        return Err(Error::Invalid(format!("need at least 4 bins and 1 frame, got {bins}x{frames}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SoundCategory> = Vec::with_capacity(n);
    for id in 0..n {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let c = random_category(id, bins, frames, &mut rng);
            if out.iter().all(|o| cosine(&o.signature, &c.signature) <= MAX_SIGNATURE_COSINE) {
                out.push(c);
                break;
            }
            if attempts >= 1000 {
                return Err(Error::Invalid(format!(
                    "could not place category {id} below cosine similarity {MAX_SIGNATURE_COSINE} after 1000 attempts"
                )));
            }
        }
    }
    Ok(out)
}

/// Text manifest: header keys, then one `signature`/`envelope` line per category.
pub fn category_manifest(categories: &[SoundCategory], seed: u64) -> String {
    let mut s = String::new();
    writeln!(s, "seed = {seed}").unwrap();
    writeln!(s, "count = {}", categories.len()).unwrap();
    for c in categories {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        writeln!(s, "category.{}.signature = {}", c.id, join(&c.signature)).unwrap();
        writeln!(s, "category.{}.envelope = {}", c.id, join(&c.envelope)).unwrap();
    }
    s
}

/// Inverse of [`category_manifest`]; returns the categories and the seed.
pub fn parse_category_manifest(text: &str) -> Result<(Vec<SoundCategory>, u64)> {
    let bad = |m: String| Error::Invalid(format!("category manifest: {m}"));
    let mut seed = None;
    let mut count = None;
    let mut sigs: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut envs: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("malformed line {line}")))?;
        let parse_vec = |v: &str| -> Result<Vec<f64>> {
            v.split(',').map(|x| x.parse::<f64>().map_err(|_| bad(format!("bad number {x}")))).collect()
        };
        match k.split('.').collect::<Vec<_>>().as_slice() {
            ["seed"] => seed = Some(v.parse::<u64>().map_err(|_| bad(format!("bad seed {v}")))?),
            ["count"] => count = Some(v.parse::<usize>().map_err(|_| bad(format!("bad count {v}")))?),
            ["category", id, field] => {
                let id = id.parse::<usize>().map_err(|_| bad(format!("bad id {id}")))?;
                match *field {
                    "signature" => sigs.insert(id, parse_vec(v)?),
                    "envelope" => envs.insert(id, parse_vec(v)?),
                    other => return Err(bad(format!("unknown field {other}"))),
                };
            }
            _ => return Err(bad(format!("unknown key {k}"))),
        }
    }
    let count = count.ok_or_else(|| bad("missing count".into()))?;
    let mut out = Vec::with_capacity(count);
    for id in 0..count {
        out.push(SoundCategory {
            id,
            signature: sigs.remove(&id).ok_or_else(|| bad(format!("missing signature for {id}")))?,
            envelope: envs.remove(&id).ok_or_else(|| bad(format!("missing envelope for {id}")))?,
        });
    }
    Ok((out, seed.ok_or_else(|| bad("missing seed".into()))?))
}
