//! Moving-square clips for direction and playback-order tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vision::VideoClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// right / left / up / down.
    Direction4,
    /// forward (motion right or down) / reversed.
    Reversal2,
}

/// Words of the synthetic vocabulary, in id order after the reserved rows.
pub const WORDS: [&str; 8] = ["moving", "right", "left", "up", "down", "playing", "forward", "reversed"];

impl Task {
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Direction4 => &["moving right", "moving left", "moving up", "moving down"],
            Task::Reversal2 => &["playing forward", "playing reversed"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    /// Token ids of every class name; words start at `first_word_id`.
    pub fn class_ids(self, first_word_id: usize) -> Vec<Vec<usize>> {
        self.class_names()
            .iter()
            .map(|name| name.split(' ').map(|w| first_word_id + WORDS.iter().position(|x| *x == w).expect("known word")).collect())
            .collect()
    }

    /// Label implied by a trajectory's velocity.
    pub fn label(self, velocity: (i64, i64)) -> Result<usize> {
        match (self, velocity) {
            (Task::Direction4, (vx, 0)) if vx > 0 => Ok(0),
            (Task::Direction4, (vx, 0)) if vx < 0 => Ok(1),
            (Task::Direction4, (0, vy)) if vy < 0 => Ok(2),
            (Task::Direction4, (0, vy)) if vy > 0 => Ok(3),
            (Task::Reversal2, (vx, 0)) if vx != 0 => Ok(usize::from(vx < 0)),
            (Task::Reversal2, (0, vy)) if vy != 0 => Ok(usize::from(vy < 0)),
            _ => Err(Error::invalid("moving square", format!("velocity {velocity:?} must move along exactly one axis"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareStyle {
    pub size: usize,
    pub intensity: f64,
    /// Background pixels are uniform in `[0, noise)`.
    pub noise: f64,
}

impl Default for SquareStyle {
    fn default() -> Self {
        Self { size: 8, intensity: 1.0, noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip<T> {
    pub clip: VideoClip<T>,
    /// Top-left corner `(column, row)` in frame 0.
    pub start: (i64, i64),
    /// Pixels per frame `(dx, dy)`.
    pub velocity: (i64, i64),
    pub noise_seed: u64,
    pub task: Task,
    pub label: usize,
}

impl<T: Scalar> SyntheticClip<T> {
    /// Square position in frame `t`.
    pub fn position(&self, t: usize) -> (i64, i64) {
        (self.start.0 + self.velocity.0 * t as i64, self.start.1 + self.velocity.1 * t as i64)
    }

    /// The same frames in reverse order, with the trajectory and label that
    /// reversed motion implies.
    pub fn reversed(&self) -> Result<Self> {
        let frames = self.clip.len();
        let per = self.clip.frames.numel() / frames;
        let data: Vec<T> = (0..frames).rev().flat_map(|t| self.clip.frame(t).to_vec()).collect();
        let velocity = (-self.velocity.0, -self.velocity.1);
        let label = self.task.label(velocity)?;
        debug_assert_eq!(data.len(), per * frames);
        Ok(Self {
            clip: VideoClip::new(Tensor::new(self.clip.frames.shape().to_vec(), data)?, Some(label))?,
            start: self.position(frames - 1),
            velocity,
            noise_seed: self.noise_seed,
            task: self.task,
            label,
        })
    }
}

/// Renders a square moving at constant `velocity` over a noise background.
pub fn gen_moving_square<T: Scalar>(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    start: (i64, i64),
    velocity: (i64, i64),
    style: &SquareStyle,
    task: Task,
) -> Result<SyntheticClip<T>> {
    let label = task.label(velocity)?;
    if frames == 0 || style.size == 0 {
        return Err(Error::invalid("moving square", "need at least one frame and a non-empty square"));
    }
    let s = style.size as i64;
    for t in [0, frames - 1] {
        let (x, y) = (start.0 + velocity.0 * t as i64, start.1 + velocity.1 * t as i64);
        if x < 0 || y < 0 || x + s > width as i64 || y + s > height as i64 {
            return Err(Error::invalid("moving square", format!("square at ({x}, {y}) in frame {t} leaves the {width}x{height} grid")));
        }
    }
    let mut rng = SplitMix64::new(seed);
    let mut data = Vec::with_capacity(frames * height * width * 3);
    for t in 0..frames {
        let (x0, y0) = (start.0 + velocity.0 * t as i64, start.1 + velocity.1 * t as i64);
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let inside = x >= x0 && x < x0 + s && y >= y0 && y < y0 + s;
                for _ in 0..3 {
                    let bg = style.noise * rng.uniform();
                    data.push(T::lit(if inside { style.intensity } else { bg }));
                }
            }
        }
    }
    let clip = VideoClip::new(Tensor::new(vec![frames, height, width, 3], data)?, Some(label))?;
    Ok(SyntheticClip { clip, start, velocity, noise_seed: seed, task, label })
}

/// Random clip for `task`; reversal samples always move forward.
pub fn sample_clip<T: Scalar>(rng: &mut SplitMix64, frames: usize, height: usize, width: usize, style: &SquareStyle, task: Task) -> Result<SyntheticClip<T>> {
    let horizontal = rng.below(2) == 0;
    let sign = match task {
        Task::Direction4 => {
            if rng.below(2) == 0 {
                1
            } else {
                -1
            }
        }
        Task::Reversal2 => 1,
    };
    let extent = if horizontal { width } else { height } as i64;
    let travel_room = extent - style.size as i64;
    let steps = frames.saturating_sub(1).max(1) as i64;
    let max_speed = (travel_room / steps).min(3);
    if max_speed < 1 {
        return Err(Error::invalid("moving square", format!("a {}-pixel square cannot move across {extent} pixels in {frames} frames", style.size)));
    }
    let speed = 1 + rng.below(max_speed as u64) as i64;
    let span = speed * (frames as i64 - 1);
    let along = rng.below((travel_room - span + 1) as u64) as i64;
    let across = rng.below((if horizontal { height } else { width } - style.size + 1) as u64) as i64;
    let along = if sign > 0 { along } else { along + span };
    let (start, velocity) = if horizontal { ((along, across), (sign * speed, 0)) } else { ((across, along), (0, sign * speed)) };
    gen_moving_square(rng.next_u64(), frames, height, width, start, velocity, style, task)
}

/// `count` clips for `task`. Reversal clips come in (forward, reversed) pairs.
pub fn dataset<T: Scalar>(seed: u64, count: usize, frames: usize, height: usize, width: usize, style: &SquareStyle, task: Task) -> Result<Vec<SyntheticClip<T>>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = sample_clip(&mut rng, frames, height, width, style, task)?;
        if task == Task::Reversal2 {
            let r = c.reversed()?;
            out.push(c);
            if out.len() < count {
                out.push(r);
            }
        } else {
            out.push(c);
        }
    }
    Ok(out)
}
