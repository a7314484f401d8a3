//! Synthetic greyscale renders of the simulated systems, threshold
//! enhancement and frame stacking.
//!
//! Scenes are composed directly at the target resolution. Each pixel is the
//! box average of a 2x2 supersampled coverage grid and is then quantized to
//! a multiple of 1/255 so frames survive an 8-bit round trip unchanged.

use crate::dynamics::{SystemKind, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::pgm;

pub const BACKGROUND: f64 = 1.0;
const SUPERSAMPLE: usize = 2;

const HILL_SHADE: f64 = 0.5;
const CAR_SHADE: f64 = 0.0;
const TRACK_SHADE: f64 = 0.5;
const CART_SHADE: f64 = 0.0;
const POLE_SHADE: f64 = 0.2;

/// A single `height x width` greyscale image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Mean column of the "ink" (`1 - value`), or `None` for a blank frame.
    pub fn ink_centroid_col(&self) -> Option<f64> {
        let mut mass = 0.0;
        let mut moment = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let ink = 1.0 - self.at(r, c);
                mass += ink;
                moment += ink * c as f64;
            }
        }
        (mass > 1e-12).then(|| moment / mass)
    }
}

/// World-coordinate window shown by the renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Stack depth.
    pub channels: usize,
    pub enhance_threshold: f64,
    pub car_radius_px: f64,
    pub hill_thickness_px: f64,
    pub mountain_samples: usize,
    pub cart_width_px: f64,
    pub cart_height_px: f64,
    pub pole_length_px: f64,
    pub pole_thickness_px: f64,
    /// `None` selects the system's default window.
    pub viewport: Option<Viewport>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            enhance_threshold: 0.8,
            car_radius_px: 2.5,
            hill_thickness_px: 1.0,
            mountain_samples: 64,
            cart_width_px: 6.0,
            cart_height_px: 3.0,
            pole_length_px: 14.0,
            pole_thickness_px: 1.5,
            viewport: None,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "frames must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("stack depth must be >= 1".into()));
        }
        if !(self.enhance_threshold > 0.0 && self.enhance_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "enhance threshold must lie in (0, 1], got {}",
                self.enhance_threshold
            )));
        }
        let sizes = [
            ("car radius", self.car_radius_px),
            ("hill thickness", self.hill_thickness_px),
            ("cart width", self.cart_width_px),
            ("cart height", self.cart_height_px),
            ("pole length", self.pole_length_px),
            ("pole thickness", self.pole_thickness_px),
        ];
        for (what, v) in sizes {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("degenerate geometry: {what} = {v}")));
            }
        }
        if self.mountain_samples < 2 {
            return Err(Error::Config("mountain profile needs >= 2 samples".into()));
        }
        if let Some(vp) = self.viewport {
            if !(vp.x.0 < vp.x.1 && vp.y.0 < vp.y.1) {
                return Err(Error::Config("empty viewport".into()));
            }
        }
        Ok(())
    }
}

fn mountain_height(x: f64) -> f64 {
    0.45 * (3.0 * x).sin() + 0.55
}

/// Maps world coordinates to continuous target-pixel coordinates.
struct Camera {
    vp: Viewport,
    height: f64,
    width: f64,
}

impl Camera {
    fn col(&self, x: f64) -> f64 {
        (x - self.vp.x.0) / (self.vp.x.1 - self.vp.x.0) * self.width
    }
    fn row(&self, y: f64) -> f64 {
        (self.vp.y.1 - y) / (self.vp.y.1 - self.vp.y.0) * self.height
    }
    fn world_x(&self, col: f64) -> f64 {
        self.vp.x.0 + col / self.width * (self.vp.x.1 - self.vp.x.0)
    }
    fn world_y(&self, row: f64) -> f64 {
        self.vp.y.1 - row / self.height * (self.vp.y.1 - self.vp.y.0)
    }
    fn px_per_world_y(&self) -> f64 {
        self.height / (self.vp.y.1 - self.vp.y.0)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders the shade of the object covering the sub-pixel sample at
/// `(row, col)`, or the background.
trait Scene {
    fn shade(&self, row: f64, col: f64) -> f64;
}

struct MountainScene {
    cam: Camera,
    profile_x: Vec<f64>,
    profile_y: Vec<f64>,
    half_thickness_world: f64,
    car: (f64, f64),
    car_radius: f64,
}

impl MountainScene {
    fn new(x: f64, cfg: &RenderConfig, cam: Camera) -> Self {
        let n = cfg.mountain_samples;
        let (lo, hi) = (-1.2, 0.6);
        let profile_x: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let profile_y = profile_x.iter().map(|&x| mountain_height(x)).collect();
        let half_thickness_world = 0.5 * cfg.hill_thickness_px / cam.px_per_world_y();
        let car_row = cam.row(mountain_height(x)) - cfg.car_radius_px;
        let car = (car_row, cam.col(x));
        Self {
            cam,
            profile_x,
            profile_y,
            half_thickness_world,
            car,
            car_radius: cfg.car_radius_px,
        }
    }

    fn profile(&self, x: f64) -> Option<f64> {
        let xs = &self.profile_x;
        if x < xs[0] || x > xs[xs.len() - 1] {
            return None;
        }
        let step = xs[1] - xs[0];
        let i = (((x - xs[0]) / step) as usize).min(xs.len() - 2);
        let t = (x - xs[i]) / step;
        Some(self.profile_y[i] * (1.0 - t) + self.profile_y[i + 1] * t)
    }
}

impl Scene for MountainScene {
    fn shade(&self, row: f64, col: f64) -> f64 {
        let (dr, dc) = (row - self.car.0, col - self.car.1);
        if dr * dr + dc * dc <= self.car_radius * self.car_radius {
            return CAR_SHADE;
        }
        let (wx, wy) = (self.cam.world_x(col), self.cam.world_y(row));
        match self.profile(wx) {
            Some(h) if (wy - h).abs() <= self.half_thickness_world => HILL_SHADE,
            _ => BACKGROUND,
        }
    }
}

struct CartPoleScene {
    track_row: f64,
    cart_col: f64,
    cart_half_width: f64,
    cart_height: f64,
    pole_base: (f64, f64),
    pole_tip: (f64, f64),
    pole_half_thickness: f64,
}

impl CartPoleScene {
    fn new(x: f64, theta: f64, cfg: &RenderConfig, cam: Camera) -> Self {
        let track_row = cam.row(0.0);
        let cart_col = cam.col(x);
        let base = (track_row - cfg.cart_height_px, cart_col);
        let tip = (
            base.0 - cfg.pole_length_px * theta.cos(),
            base.1 + cfg.pole_length_px * theta.sin(),
        );
        Self {
            track_row,
            cart_col,
            cart_half_width: 0.5 * cfg.cart_width_px,
            cart_height: cfg.cart_height_px,
            pole_base: base,
            pole_tip: tip,
            pole_half_thickness: 0.5 * cfg.pole_thickness_px,
        }
    }
}

impl Scene for CartPoleScene {
    fn shade(&self, row: f64, col: f64) -> f64 {
        if segment_distance((row, col), self.pole_base, self.pole_tip) <= self.pole_half_thickness {
            return POLE_SHADE;
        }
        if (col - self.cart_col).abs() <= self.cart_half_width
            && row <= self.track_row
            && row >= self.track_row - self.cart_height
        {
            return CART_SHADE;
        }
        if (row - self.track_row).abs() <= 0.5 {
            return TRACK_SHADE;
        }
        BACKGROUND
    }
}

fn rasterize(scene: &dyn Scene, height: usize, width: usize) -> Frame {
    let s = SUPERSAMPLE as f64;
    let norm = 1.0 / (s * s);
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for i in 0..SUPERSAMPLE {
                for j in 0..SUPERSAMPLE {
                    let row = r as f64 + (i as f64 + 0.5) / s;
                    let col = c as f64 + (j as f64 + 0.5) / s;
                    acc += scene.shade(row, col);
                }
            }
            data.push(pgm::from_byte(pgm::to_byte(acc * norm)));
        }
    }
    Frame { height, width, data }
}

fn default_viewport(kind: SystemKind) -> Viewport {
    match kind {
        SystemKind::MountainCar => Viewport {
            x: (-1.2, 0.6),
            y: (0.0, 1.1),
        },
        _ => Viewport {
            x: (-3.0, 3.0),
            y: (-0.75, 2.25),
        },
    }
}

/// Rasterizes one state of `spec` into a greyscale frame.
pub fn render_frame(state: &[f64], spec: &SystemSpec, cfg: &RenderConfig) -> Result<Frame> {
    cfg.validate()?;
    if state.len() != spec.state_dim() {
        return Err(Error::Shape(format!(
            "state has {} entries, {} expects {}",
            state.len(),
            spec.kind.name(),
            spec.state_dim()
        )));
    }
    let cam = Camera {
        vp: cfg.viewport.unwrap_or_else(|| default_viewport(spec.kind)),
        height: cfg.height as f64,
        width: cfg.width as f64,
    };
    let frame = match spec.kind {
        SystemKind::MountainCar => {
            let scene = MountainScene::new(state[0], cfg, cam);
            rasterize(&scene, cfg.height, cfg.width)
        }
        SystemKind::CartPole => {
            let scene = CartPoleScene::new(state[0], state[2], cfg, cam);
            rasterize(&scene, cfg.height, cfg.width)
        }
        SystemKind::LinearRef => {
            return Err(Error::Config(
                "linear_ref has no pixel scene; use identity frames".into(),
            ))
        }
    };
    Ok(frame)
}

/// Sets every pixel above `threshold` to 1.
pub fn enhance(frame: &Frame, threshold: f64) -> Frame {
    Frame {
        height: frame.height,
        width: frame.width,
        data: frame
            .data
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { v })
            .collect(),
    }
}

/// A stack of `channels` consecutive frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    /// Index of the newest frame in the stack.
    pub frame_index: usize,
}

impl Observation {
    pub fn channel(&self, j: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[j * n..(j + 1) * n]
    }
}

/// Stacks frames `k - c + 1 ..= k`.
pub fn stack_frames(frames: &[Frame], k: usize, channels: usize) -> Result<Observation> {
    if channels == 0 {
        return Err(Error::Config("stack depth must be >= 1".into()));
    }
    if k + 1 < channels {
        return Err(Error::InsufficientHistory {
            needed: channels - 1,
            got: k,
        });
    }
    if k >= frames.len() {
        return Err(Error::TooShort(format!("frame {k} requested from {} frames", frames.len())));
    }
    let first = &frames[k + 1 - channels];
    let (height, width) = (first.height, first.width);
    let mut pixels = Vec::with_capacity(channels * height * width);
    for f in &frames[k + 1 - channels..=k] {
        if (f.height, f.width) != (height, width) {
            return Err(Error::Shape("frames in a stack differ in size".into()));
        }
        pixels.extend_from_slice(&f.data);
    }
    Ok(Observation {
        channels,
        height,
        width,
        pixels,
        frame_index: k,
    })
}

/// Frames of one trajectory plus the actions aligned with its observations.
///
/// Observation `j` stacks frames `j ..= j + c - 1`; `actions[j]` is the
/// control applied between observation `j` and `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub actions: Vec<Vec<f64>>,
    pub channels: usize,
    /// Ground-truth states per frame, when known.
    pub states: Option<Vec<Vec<f64>>>,
}

impl Episode {
    pub fn from_frames(
        frames: Vec<Frame>,
        trajectory_actions: &[Vec<f64>],
        channels: usize,
        states: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("stack depth must be >= 1".into()));
        }
        if frames.len() < channels {
            return Err(Error::TooShort(format!(
                "{} frames cannot fill a stack of {channels}",
                frames.len()
            )));
        }
        if trajectory_actions.len() + 1 != frames.len() {
            return Err(Error::Shape(format!(
                "{} frames need {} actions, got {}",
                frames.len(),
                frames.len() - 1,
                trajectory_actions.len()
            )));
        }
        let actions = trajectory_actions[channels - 1..].to_vec();
        Ok(Self {
            frames,
            actions,
            channels,
            states,
        })
    }

    pub fn num_observations(&self) -> usize {
        self.frames.len() + 1 - self.channels
    }

    pub fn observation(&self, j: usize) -> Result<Observation> {
        stack_frames(&self.frames, j + self.channels - 1, self.channels)
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }
}

/// Renders, enhances and stacks a whole trajectory.
pub fn render_episode(traj: &Trajectory, spec: &SystemSpec, cfg: &RenderConfig) -> Result<Episode> {
    cfg.validate()?;
    if traj.states.len() < cfg.channels {
        return Err(Error::TooShort(format!(
            "trajectory has {} states, stack depth is {}",
            traj.states.len(),
            cfg.channels
        )));
    }
    let frames = traj
        .states
        .iter()
        .map(|s| render_frame(s, spec, cfg).map(|f| enhance(&f, cfg.enhance_threshold)))
        .collect::<Result<Vec<_>>>()?;
    Episode::from_frames(frames, &traj.actions, cfg.channels, Some(traj.states.clone()))
}

/// Uses raw state vectors as `1 x m` frames.
pub fn identity_episode(traj: &Trajectory, channels: usize) -> Result<Episode> {
    let frames = traj
        .states
        .iter()
        .map(|s| Frame {
            height: 1,
            width: s.len(),
            data: s.clone(),
        })
        .collect();
    Episode::from_frames(frames, &traj.actions, channels, Some(traj.states.clone()))
}
