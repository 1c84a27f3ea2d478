//! Synthetic datasets with known generating laws.
//!
//! Generated values are rounded to `f32` so that datasets survive the `.swn`
//! round trip bit for bit.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sequence, Sidecar};
use crate::rng::keyed_rng;

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Scalar random walk whose increments follow a persistent sign:
/// `x_t = x_{t-1} + s_t * step + noise`, `s_t = s_{t-1}` with probability
/// `persistence`, `x_0 = 0`, `s_1` uniform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimodalWalk {
    pub step: f64,
    pub persistence: f64,
    pub noise_std: f64,
}

impl Default for BimodalWalk {
    fn default() -> Self {
        BimodalWalk {
            step: 0.5,
            persistence: 0.9,
            noise_std: 0.1,
        }
    }
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl BimodalWalk {
    pub fn generate(&self, n: usize, t: usize, seed: u64) -> Dataset {
        let sequences = (0..n)
            .map(|i| {
                let mut rng = keyed_rng(&[seed, 0xb1, i as u64]);
                let mut x = 0.0;
                let mut sign: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let frames = (0..t)
                    .map(|k| {
                        if k > 0 && !rng.random_bool(self.persistence) {
                            sign = -sign;
                        }
                        let nu: f64 = rng.sample(StandardNormal);
                        x = f32_round(x + sign * self.step + self.noise_std * nu);
                        x
                    })
                    .collect();
                Sequence::new(frames, 1).expect("scalar frames")
            })
            .collect();
        Dataset::new(sequences)
    }

    fn increments(seq: &Sequence) -> Vec<f64> {
        let mut prev = 0.0;
        seq.values()
            .iter()
            .map(|&x| {
                let d = x - prev;
                prev = x;
                d
            })
            .collect()
    }

    /// Sign of the previous increment decides which mode is favoured. A tie
    /// at exactly zero is treated as positive; with noise it has probability 0.
    fn previous_sign(increments: &[f64], k: usize) -> Option<f64> {
        (k > 0).then(|| if increments[k - 1] >= 0.0 { 1.0 } else { -1.0 })
    }

    fn step_var(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    /// Log-likelihood of one sequence under the generator, with the previous
    /// sign read off the previous increment.
    pub fn true_loglik(&self, seq: &Sequence) -> f64 {
        let inc = Self::increments(seq);
        (0..inc.len())
            .map(|k| {
                let (w_same, prev) = match Self::previous_sign(&inc, k) {
                    None => (0.5, 1.0),
                    Some(s) => (self.persistence, s),
                };
                log_add_exp(
                    w_same.ln() + normal_logpdf(inc[k], prev * self.step, self.step_var()),
                    (1.0 - w_same).ln() + normal_logpdf(inc[k], -prev * self.step, self.step_var()),
                )
            })
            .sum()
    }

    /// Moments of the best single Gaussian for the next increment.
    fn unimodal_moments(&self, prev_sign: Option<f64>) -> (f64, f64) {
        let bias = match prev_sign {
            None => 0.0,
            Some(s) => s * (2.0 * self.persistence - 1.0),
        };
        let mean = self.step * bias;
        (mean, self.step_var() + self.step * self.step - mean * mean)
    }

    /// Log-likelihood of one sequence under the moment-matched single Gaussian
    /// for each step: the best unimodal next-step predictor.
    pub fn best_unimodal_loglik(&self, seq: &Sequence) -> f64 {
        let inc = Self::increments(seq);
        (0..inc.len())
            .map(|k| {
                let (m, v) = self.unimodal_moments(Self::previous_sign(&inc, k));
                normal_logpdf(inc[k], m, v)
            })
            .sum()
    }

    /// Expected value of [`Self::best_unimodal_loglik`] for a length-`t` sequence.
    pub fn expected_best_unimodal_loglik(&self, t: usize) -> f64 {
        let per = |v: f64| -0.5 * (2.0 * PI * v).ln() - 0.5;
        if t == 0 {
            return 0.0;
        }
        per(self.unimodal_moments(None).1) + (t - 1) as f64 * per(self.unimodal_moments(Some(1.0)).1)
    }

    pub fn sidecar(&self, n: usize, t: usize, seed: u64) -> Sidecar {
        Sidecar {
            generator: "bimodal".into(),
            n,
            t,
            seed,
            parameters: serde_json::to_value(self).expect("plain struct"),
        }
    }
}

pub fn gen_bimodal_walk(n: usize, t: usize, seed: u64) -> Dataset {
    BimodalWalk::default().generate(n, t, seed)
}

/// Pen trajectories as `(dx, dy, pen)` frames.
///
/// Each stroke draws a geometric number of pen-down steps (mean
/// `mean_stroke_len`) along an arc of constant random curvature, then one
/// pen-up frame (`pen = 1`) jumps rightwards to the next stroke.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeToy {
    pub mean_stroke_len: f64,
    pub speed: f64,
    pub curvature_mean: f64,
    pub curvature_std: f64,
    pub jump: f64,
}

impl Default for StrokeToy {
    fn default() -> Self {
        StrokeToy {
            mean_stroke_len: 8.0,
            speed: 1.0,
            curvature_mean: 0.35,
            curvature_std: 0.15,
            jump: 1.5,
        }
    }
}

impl StrokeToy {
    pub fn generate(&self, n: usize, t: usize, seed: u64) -> Dataset {
        let p_end = 1.0 / self.mean_stroke_len;
        let sequences = (0..n)
            .map(|i| {
                let mut rng = keyed_rng(&[seed, 0x57, i as u64]);
                let mut frames = Vec::with_capacity(t * 3);
                let new_stroke = |rng: &mut rand_chacha::ChaCha8Rng| -> (f64, f64) {
                    let heading = rng.random_range(-PI..PI);
                    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let k: f64 = rng.sample(StandardNormal);
                    (heading, dir * (self.curvature_mean + self.curvature_std * k))
                };
                let (mut heading, mut curvature) = new_stroke(&mut rng);
                while frames.len() < t * 3 {
                    heading += curvature;
                    frames.extend([
                        f32_round(self.speed * heading.cos()),
                        f32_round(self.speed * heading.sin()),
                        0.0,
                    ]);
                    if frames.len() < t * 3 && rng.random_bool(p_end) {
                        let jy: f64 = rng.sample(StandardNormal);
                        frames.extend([f32_round(self.jump), f32_round(0.3 * jy), 1.0]);
                        (heading, curvature) = new_stroke(&mut rng);
                    }
                }
                Sequence::new(frames, 3).expect("three channels")
            })
            .collect();
        Dataset::new(sequences)
    }

    pub fn sidecar(&self, n: usize, t: usize, seed: u64) -> Sidecar {
        Sidecar {
            generator: "stroke".into(),
            n,
            t,
            seed,
            parameters: serde_json::to_value(self).expect("plain struct"),
        }
    }
}

pub fn gen_stroke_toy(n: usize, t: usize, seed: u64) -> Dataset {
    StrokeToy::default().generate(n, t, seed)
}

/// Lengths of completed pen-down runs (those terminated by a pen-up frame).
pub fn stroke_lengths(data: &Dataset) -> Vec<usize> {
    let mut out = Vec::new();
    for s in &data.sequences {
        let mut run = 0;
        for f in s.values().chunks(3) {
            if f[2] > 0.5 {
                if run > 0 {
                    out.push(run);
                }
                run = 0;
            } else {
                run += 1;
            }
        }
    }
    out
}
