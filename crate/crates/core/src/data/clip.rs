use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Side of the square bounding box every object is drawn in, in pixels.
pub const OBJECT_SIZE: usize = 6;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

word_enum!(ShapeKind { Square => "square", Circle => "circle", Triangle => "triangle" });
word_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
word_enum!(Direction { Left => "left", Right => "right", Up => "up", Down => "down" });

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Direction {
    /// Per-frame (row, col) step of unit speed.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub direction: Direction,
    /// Pixels per frame; zero means the object stays still.
    pub speed: u32,
    /// Top-left corner of the object's bounding box in frame 0, as (row, col).
    pub start: (i64, i64),
}

impl ClipSpec {
    /// Top-left corner of the object in frame `k`.
    pub fn position(&self, k: usize) -> (i64, i64) {
        let (dr, dc) = self.direction.delta();
        let step = i64::from(self.speed) * k as i64;
        (self.start.0 + dr * step, self.start.1 + dc * step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipDims {
    pub const DESK: ClipDims = ClipDims { frames: 3, channels: 3, height: 32, width: 32 };

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.frames * self.frame_len()
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < OBJECT_SIZE || self.width < OBJECT_SIZE {
            return Err(Error::Contract(format!("clip dims {self:?} cannot hold a {OBJECT_SIZE}px object")));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Contract(format!("unsupported channel count {}", self.channels)));
        }
        Ok(())
    }
}

/// A rendered clip: `frames` holds `S x C x H x W` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub spec: ClipSpec,
    pub dims: ClipDims,
    pub frames: Vec<f32>,
}

impl SyntheticClip {
    pub fn frame(&self, k: usize) -> &[f32] {
        let len = self.dims.frame_len();
        &self.frames[k * len..(k + 1) * len]
    }
}

fn covers(shape: ShapeKind, r: usize, c: usize) -> bool {
    let s = OBJECT_SIZE as f64;
    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
    match shape {
        ShapeKind::Square => true,
        ShapeKind::Circle => (y - s / 2.0).powi(2) + (x - s / 2.0).powi(2) <= (s / 2.0).powi(2),
        ShapeKind::Triangle => (x - s / 2.0).abs() <= (r as f64 + 1.0) / 2.0,
    }
}

/// Renders `spec` over `dims.frames` frames on a black background.
///
/// The seed only names the clip; rendering itself is a pure function of the
/// spec, so two specs that differ only in direction share frame 0.
pub fn generate_clip(spec: &ClipSpec, dims: ClipDims, seed: u64) -> Result<SyntheticClip> {
    dims.validate()?;
    let max_row = (dims.height - OBJECT_SIZE) as i64;
    let max_col = (dims.width - OBJECT_SIZE) as i64;
    for k in 0..dims.frames {
        let (row, col) = spec.position(k);
        let violation = if row < 0 {
            Some(format!("row {row} < 0"))
        } else if row > max_row {
            Some(format!("row {row} > {max_row}"))
        } else if col < 0 {
            Some(format!("col {col} < 0"))
        } else if col > max_col {
            Some(format!("col {col} > {max_col}"))
        } else {
            None
        };
        if let Some(v) = violation {
            return Err(Error::SpecRejected(format!("object leaves the frame at frame {k}: {v}")));
        }
    }

    let rgb = spec.color.rgb();
    let gray = rgb.iter().sum::<f32>() / 3.0;
    let plane = dims.height * dims.width;
    let mut frames = vec![0.0f32; dims.numel()];
    for k in 0..dims.frames {
        let (row, col) = spec.position(k);
        let frame = &mut frames[k * dims.frame_len()..(k + 1) * dims.frame_len()];
        for r in 0..OBJECT_SIZE {
            for c in 0..OBJECT_SIZE {
                if !covers(spec.shape, r, c) {
                    continue;
                }
                let pixel = (row as usize + r) * dims.width + col as usize + c;
                if dims.channels == 3 {
                    for (ch, v) in rgb.iter().enumerate() {
                        frame[ch * plane + pixel] = *v;
                    }
                } else {
                    frame[pixel] = gray;
                }
            }
        }
    }
    Ok(SyntheticClip { id: format!("clip-{seed:016x}"), spec: *spec, dims, frames })
}

/// Templated caption: "the <color> <shape> moves <direction>", or
/// "the <color> <shape> stays still" at zero speed.
pub fn render_caption(spec: &ClipSpec) -> String {
    if spec.speed > 0 {
        format!("the {} {} moves {}", spec.color.word(), spec.shape.word(), spec.direction.word())
    } else {
        format!("the {} {} stays still", spec.color.word(), spec.shape.word())
    }
}

/// Draws a spec whose whole trajectory fits in the frame.
///
/// The middle frame's position is drawn from the same range whatever the
/// direction and speed, so no single frame hints at the motion beyond
/// edge effects on the first and last frames.
pub fn sample_spec(rng: &mut SplitMix64, dims: ClipDims, min_speed: u32, max_speed: u32) -> ClipSpec {
    assert!(min_speed <= max_speed);
    let shape = ShapeKind::ALL[rng.index(ShapeKind::ALL.len())];
    let color = Color::ALL[rng.index(Color::ALL.len())];
    let direction = Direction::ALL[rng.index(Direction::ALL.len())];
    let speed = min_speed + rng.below(u64::from(max_speed - min_speed) + 1) as u32;

    let mid = (dims.frames - 1) / 2;
    let tail = dims.frames - 1 - mid;
    let reach_before = i64::from(max_speed) * mid as i64;
    let reach_after = i64::from(max_speed) * tail as i64;
    let (dr, dc) = direction.delta();
    // Both axes draw the middle frame from the same window, which leaves
    // room on both sides, so its position does not reveal the motion axis.
    let mut axis = |extent: usize, step: i64| -> i64 {
        let max = (extent - OBJECT_SIZE) as i64;
        let (lo, hi) = (reach_before.max(reach_after), max - reach_before.max(reach_after));
        let anchor = if lo <= hi { rng.range_inclusive(lo, hi) } else { max / 2 };
        anchor - step * i64::from(speed) * mid as i64
    };
    let row = axis(dims.height, dr);
    let col = axis(dims.width, dc);
    ClipSpec { shape, color, direction, speed, start: (row, col) }
}
