//! What the tracker sees: a masked feature vector or a small first-person
//! RGB raster with randomized colours and lighting.

use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sim::{in_fov, ArenaConfig, RelativeState, WorldState};

/// Distance normaliser for observations and auxiliary targets (cm).
pub const RHO_NORM: f64 = 150.0;
pub const VECTOR_DIM: usize = 4;
/// Minimum L-infinity distance between target and wall colours.
pub const COLOR_SEPARATION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsKind {
    Vector,
    Raster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationMode {
    pub kind: ObsKind,
    pub raster_width: usize,
    pub raster_height: usize,
    pub vector_noise_std: f64,
}

impl Default for ObservationMode {
    fn default() -> Self {
        ObservationMode {
            kind: ObsKind::Vector,
            raster_width: 84,
            raster_height: 84,
            vector_noise_std: 0.0,
        }
    }
}

impl ObservationMode {
    pub fn raster(width: usize, height: usize) -> Self {
        ObservationMode {
            kind: ObsKind::Raster,
            raster_width: width,
            raster_height: height,
            vector_noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kind == ObsKind::Raster && (self.raster_width < 8 || self.raster_height < 8) {
            return Err(format!("raster must be at least 8x8, got {}x{}", self.raster_width, self.raster_height));
        }
        if self.vector_noise_std.is_nan() || self.vector_noise_std < 0.0 {
            return Err("vector_noise_std must be non-negative".into());
        }
        Ok(())
    }

    /// Shape of one observation as fed to the networks.
    pub fn shape(&self) -> Vec<usize> {
        match self.kind {
            ObsKind::Vector => vec![VECTOR_DIM],
            ObsKind::Raster => vec![self.raster_height, self.raster_width, 3],
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }
}

/// One observation. Data is shared so that consecutive transitions can hold
/// the same frame without copying it.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl Observation {
    pub fn features(v: [f32; VECTOR_DIM]) -> Self {
        Observation {
            shape: vec![VECTOR_DIM],
            data: Arc::from(v.as_slice()),
        }
    }

    pub fn raster(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        Observation {
            shape: vec![height, width, 3],
            data: Arc::from(data),
        }
    }

    pub fn zeros(mode: &ObservationMode) -> Self {
        Observation {
            shape: mode.shape(),
            data: vec![0.0; mode.len()].into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_raster(&self) -> bool {
        self.shape.len() == 3
    }

    /// RGB at `(row, col)` of a raster observation.
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let w = self.shape[1];
        let i = (row * w + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneRandomization {
    pub wall_color: [f64; 3],
    pub floor_color: [f64; 3],
    pub target_color: [f64; 3],
    pub light: f64,
}

impl Default for SceneRandomization {
    fn default() -> Self {
        SceneRandomization {
            wall_color: [0.7, 0.7, 0.7],
            floor_color: [0.4, 0.3, 0.2],
            target_color: [0.9, 0.1, 0.1],
            light: 1.0,
        }
    }
}

fn linf(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl SceneRandomization {
    pub fn target_separation(&self) -> f64 {
        linf(&self.target_color, &self.wall_color)
    }
}

pub fn randomize_scene<R: Rng + ?Sized>(rng: &mut R) -> SceneRandomization {
    let color = |rng: &mut R| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let wall_color = color(rng);
    let floor_color = color(rng);
    let target_color = loop {
        let c = color(rng);
        if linf(&c, &wall_color) >= COLOR_SEPARATION {
            break c;
        }
    };
    SceneRandomization {
        wall_color,
        floor_color,
        target_color,
        light: rng.random_range(0.4..=1.0),
    }
}

/// Pixel rectangle covered by the target, rows and columns half-open.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetBlock {
    pub center_col: f64,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Where the target lands in a `width x height` frame, or `None` when out of view.
///
/// Height is `clamp(rho_ref / (4 rho), 0, 1)` of the frame, so a target at the
/// reference distance fills a quarter of the image; width is half the height.
pub fn target_block(rel: &RelativeState, fov: f64, rho_ref: f64, width: usize, height: usize) -> Option<TargetBlock> {
    if !in_fov(rel, fov) {
        return None;
    }
    let center_col = (rel.theta / (fov / 2.0) + 1.0) / 2.0 * width as f64;
    let frac = if rel.rho > 0.0 { (rho_ref / 4.0 / rel.rho).min(1.0) } else { 1.0 };
    let bh = (frac * height as f64).max(1.0);
    let bw = (bh / 2.0).max(1.0);
    let horizon = height as f64 / 2.0;
    let span = |lo: f64, hi: f64, n: usize| {
        let a = lo.round().clamp(0.0, n as f64) as usize;
        let b = hi.round().clamp(0.0, n as f64) as usize;
        // keep at least one pixel when the block is inside the frame
        if a == b && a < n {
            (a, a + 1)
        } else if a == b {
            (n - 1, n)
        } else {
            (a, b)
        }
    };
    Some(TargetBlock {
        center_col,
        rows: span(horizon - bh / 2.0, horizon + bh / 2.0, height),
        cols: span(center_col - bw / 2.0, center_col + bw / 2.0, width),
    })
}

pub fn render_raster(rel: &RelativeState, mode: &ObservationMode, scene: &SceneRandomization, fov: f64, rho_ref: f64) -> Observation {
    let (w, h) = (mode.raster_width, mode.raster_height);
    let lit = |c: &[f64; 3]| c.map(|v| (v * scene.light).clamp(0.0, 1.0) as f32);
    let (wall, floor, target) = (lit(&scene.wall_color), lit(&scene.floor_color), lit(&scene.target_color));
    let mut data = Vec::with_capacity(w * h * 3);
    for row in 0..h {
        let bg = if row < h / 2 { wall } else { floor };
        for _ in 0..w {
            data.extend_from_slice(&bg);
        }
    }
    if let Some(block) = target_block(rel, fov, rho_ref, w, h) {
        for row in block.rows.0..block.rows.1 {
            for col in block.cols.0..block.cols.1 {
                let i = (row * w + col) * 3;
                data[i..i + 3].copy_from_slice(&target);
            }
        }
    }
    Observation::raster(h, w, data)
}

/// Feature vector `[visible, rho_norm, sin theta, cos theta]`, all zero when
/// the target is out of view.
pub fn observe_vector<R: Rng + ?Sized>(rel: &RelativeState, noise_std: f64, fov: f64, rng: &mut R) -> Observation {
    if !in_fov(rel, fov) {
        return Observation::features([0.0; VECTOR_DIM]);
    }
    let mut eps = || {
        if noise_std > 0.0 {
            Normal::new(0.0, noise_std).expect("finite std").sample(rng)
        } else {
            0.0
        }
    };
    let rho = ((rel.rho / RHO_NORM).clamp(0.0, 1.0) + eps()).clamp(0.0, 1.0);
    let s = (rel.theta.sin() + eps()).clamp(-1.0, 1.0);
    let c = (rel.theta.cos() + eps()).clamp(-1.0, 1.0);
    Observation::features([1.0, rho as f32, s as f32, c as f32])
}

/// Observation of the tracker. `rho_ref` sets the apparent-size calibration
/// of the raster renderer (normally the desired tracking distance).
pub fn observe<R: Rng + ?Sized>(
    world: &WorldState,
    mode: &ObservationMode,
    scene: &SceneRandomization,
    cfg: &ArenaConfig,
    rho_ref: f64,
    rng: &mut R,
) -> Observation {
    let rel = world.relative();
    match mode.kind {
        ObsKind::Vector => observe_vector(&rel, mode.vector_noise_std, cfg.fov, rng),
        ObsKind::Raster => render_raster(&rel, mode, scene, cfg.fov, rho_ref),
    }
}

/// Writes a raster observation as a binary PPM (P6) image.
pub fn write_ppm<W: Write>(obs: &Observation, mut out: W) -> io::Result<()> {
    if !obs.is_raster() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "not a raster observation"));
    }
    let (h, w) = (obs.shape()[0], obs.shape()[1]);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = obs.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    out.flush()
}
