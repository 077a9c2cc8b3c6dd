//! Task registry and synthetic degradations.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::drmlp::{Task, TaskPrior};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// A task together with its one-hot prior.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub task: Task,
    pub prior: TaskPrior,
}

impl TaskSpec {
    pub fn new(task: Task, num_tasks: usize) -> Result<Self> {
        Ok(Self {
            task,
            prior: TaskPrior::new(task, num_tasks)?,
        })
    }

    pub fn from_name(name: &str, num_tasks: usize) -> Result<Self> {
        Self::new(name.parse()?, num_tasks)
    }

    pub fn name(&self) -> &'static str {
        self.task.name()
    }
}

/// One concrete corruption with all of its random parameters drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    /// Additive white Gaussian noise with standard deviation `sigma`
    /// (on the `[0, 1]` scale).
    Noise { sigma: f32 },
    /// Bright line segments sharing one orientation (degrees from the
    /// horizontal axis).
    Rain {
        streaks: usize,
        angle_deg: f32,
        intensity: f32,
    },
    /// `x·t + a·(1 − t)`
    Haze { t: f32, a: f32 },
    /// Normalized `k × k` box filter with clamped borders.
    Blur { k: usize },
    /// `scale · x^gamma`
    LowLight { gamma: f32, scale: f32 },
}

impl Degradation {
    /// Draws parameters for `task`; the blind task picks one of the five
    /// specific corruptions uniformly.
    pub fn sample<R: Rng + ?Sized>(task: Task, rng: &mut R) -> Self {
        match task {
            Task::Denoise => Degradation::Noise {
                sigma: *[15.0f32, 25.0, 50.0].choose(rng).unwrap() / 255.0,
            },
            Task::Derain => Degradation::Rain {
                streaks: rng.random_range(5..=20),
                angle_deg: rng.random_range(70.0..=110.0),
                intensity: rng.random_range(0.2..=0.5),
            },
            Task::Dehaze => Degradation::Haze {
                t: rng.random_range(0.3..=0.8),
                a: rng.random_range(0.7..=1.0),
            },
            Task::Deblur => Degradation::Blur {
                k: *[3usize, 5].choose(rng).unwrap(),
            },
            Task::Enhance => Degradation::LowLight {
                gamma: rng.random_range(2.0..=3.0),
                scale: rng.random_range(0.1..=0.4),
            },
            Task::Blind => {
                let pick = *Task::SPECIFIC.choose(rng).unwrap();
                Self::sample(pick, rng)
            }
        }
    }

    /// Applies the corruption to a `[C, H, W]` image and clamps to `[0, 1]`.
    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let &[c, h, w] = x.shape() else {
            return dim_err(format!("degrade: expected [C, H, W], got {:?}", x.shape()));
        };
        let mut out = x.to_vec();
        match *self {
            Degradation::Noise { sigma } => {
                let normal = Normal::new(0.0f32, sigma.max(0.0)).expect("finite sigma");
                for v in &mut out {
                    *v += normal.sample(rng);
                }
            }
            Degradation::Rain {
                streaks,
                angle_deg,
                intensity,
            } => {
                let (dy, dx) = angle_deg.to_radians().sin_cos();
                let extent = h.max(w) as f32;
                for _ in 0..streaks {
                    let (y0, x0) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
                    let len = rng.random_range(extent / 4.0..=extent / 2.0);
                    let mut hit = vec![false; h * w];
                    for s in 0..=(2.0 * len) as usize {
                        let t = s as f32 / 2.0;
                        let (yi, xi) = ((y0 + t * dy).floor(), (x0 + t * dx).floor());
                        if (0.0..h as f32).contains(&yi) && (0.0..w as f32).contains(&xi) {
                            hit[yi as usize * w + xi as usize] = true;
                        }
                    }
                    for (p, _) in hit.iter().enumerate().filter(|(_, &on)| on) {
                        for ch in 0..c {
                            out[ch * h * w + p] += intensity;
                        }
                    }
                }
            }
            Degradation::Haze { t, a } => {
                for v in &mut out {
                    *v = *v * t + a * (1.0 - t);
                }
            }
            Degradation::Blur { k } => {
                let r = (k / 2) as isize;
                let norm = 1.0 / (k * k) as f32;
                let src = x.data();
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = 0.0f32;
                            for di in -r..=r {
                                let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
                                for dj in -r..=r {
                                    let jj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                                    acc += src[(ch * h + ii) * w + jj];
                                }
                            }
                            out[(ch * h + i) * w + j] = acc * norm;
                        }
                    }
                }
            }
            Degradation::LowLight { gamma, scale } => {
                for v in &mut out {
                    *v = scale * v.max(0.0).powf(gamma);
                }
            }
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(x.shape(), out)
    }
}

/// Corrupts `x` according to `task`, with every random choice drawn from
/// `seed`.
pub fn degrade(x: &Tensor, task: &TaskSpec, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Degradation::sample(task.task, &mut rng).apply(x, &mut rng)
}
