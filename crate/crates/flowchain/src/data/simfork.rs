//! Fork-road synthetic dataset: a straight observed segment followed by a
//! left/right branch, every position independently perturbed by isotropic
//! Gaussian noise. The per-step ground-truth density is the analytic
//! two-component Gaussian mixture over the branch skeletons.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::gauss;
use crate::geom::Point2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimforkConfig {
    pub trajectories: usize,
    /// Straight observed segment length in positions.
    pub obs_steps: usize,
    /// Branch segment length in positions.
    pub fut_steps: usize,
    /// Per-step displacement magnitude.
    pub step: f64,
    /// Isotropic noise std applied independently to every position.
    pub noise_std: f64,
    /// Branch deviation from straight, in degrees.
    pub fork_angle_deg: f64,
    /// Probability of the left branch.
    pub branch_prob: f64,
}

impl Default for SimforkConfig {
    fn default() -> Self {
        SimforkConfig {
            trajectories: 1000,
            obs_steps: super::T_OBS,
            fut_steps: super::T_FUT,
            step: 1.0,
            noise_std: 0.1,
            fork_angle_deg: 45.0,
            branch_prob: 0.5,
        }
    }
}

impl SimforkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 || self.obs_steps < 2 || self.fut_steps == 0 {
            return Err(Error::InvalidConfig("simfork: counts must be positive".into()));
        }
        if !(self.step > 0.0) || !(self.noise_std >= 0.0) || !(self.fork_angle_deg > 0.0) {
            return Err(Error::InvalidConfig("simfork: geometry must be positive".into()));
        }
        if !(self.branch_prob > 0.0 && self.branch_prob < 1.0) {
            return Err(Error::InvalidConfig("simfork: branch probability must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Straight-segment skeleton, ending at the origin (the anchor).
    pub fn observed_skeleton(&self) -> Vec<Point2> {
        (0..self.obs_steps)
            .map(|k| Point2::new(0.0, (k as f64 - (self.obs_steps - 1) as f64) * self.step))
            .collect()
    }

    /// Branch skeleton for `left`/right, future steps 1..=fut_steps.
    pub fn branch_skeleton(&self, left: bool) -> Vec<Point2> {
        let base = 90f64.to_radians();
        let dev = self.fork_angle_deg.to_radians();
        let theta = if left { base + dev } else { base - dev };
        (1..=self.fut_steps)
            .map(|k| Point2::new(k as f64 * self.step * theta.cos(), k as f64 * self.step * theta.sin()))
            .collect()
    }
}

/// Two isotropic Gaussians per future step (left mean, right mean).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMixture {
    pub means: [Point2; 2],
    pub std: f64,
    pub weights: [f64; 2],
}

impl StepMixture {
    pub fn pdf(&self, p: Point2) -> f64 {
        self.weights[0] * gauss::normal_iso_pdf(p, self.means[0], self.std)
            + self.weights[1] * gauss::normal_iso_pdf(p, self.means[1], self.std)
    }

    /// Analytic mass inside an axis-aligned rectangle.
    pub fn mass_in_rect(&self, lo: Point2, hi: Point2) -> f64 {
        self.weights[0] * gauss::iso_mass_in_rect(self.means[0], self.std, lo, hi)
            + self.weights[1] * gauss::iso_mass_in_rect(self.means[1], self.std, lo, hi)
    }
}

/// Analytic density of the future position at every prediction step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthDensity {
    /// Index 0 is prediction step 1.
    pub steps: Vec<StepMixture>,
}

impl GroundTruthDensity {
    pub fn from_config(cfg: &SimforkConfig) -> GroundTruthDensity {
        let left = cfg.branch_skeleton(true);
        let right = cfg.branch_skeleton(false);
        let std = cfg.noise_std.max(1e-12);
        let steps = left
            .into_iter()
            .zip(right)
            .map(|(l, r)| StepMixture {
                means: [l, r],
                std,
                weights: [cfg.branch_prob, 1.0 - cfg.branch_prob],
            })
            .collect();
        GroundTruthDensity { steps }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Density at prediction step `n` (1-based).
    pub fn pdf(&self, n: usize, p: Point2) -> f64 {
        self.steps[n - 1].pdf(p)
    }
}

/// Generates scenes plus the analytic per-step ground-truth mixture.
pub fn gen_simfork<R: Rng + ?Sized>(
    cfg: &SimforkConfig,
    rng: &mut R,
) -> Result<(Vec<Scene>, GroundTruthDensity)> {
    cfg.validate()?;
    let observed_skel = cfg.observed_skeleton();
    let left_skel = cfg.branch_skeleton(true);
    let right_skel = cfg.branch_skeleton(false);
    let gt = GroundTruthDensity::from_config(cfg);

    let mut scenes = Vec::with_capacity(cfg.trajectories);
    for _ in 0..cfg.trajectories {
        let left = rng.gen::<f64>() < cfg.branch_prob;
        let skel = if left { &left_skel } else { &right_skel };
        let noisy = |p: &Point2, rng: &mut R| {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            Point2::new(p.x + cfg.noise_std * nx, p.y + cfg.noise_std * ny)
        };
        let observed: Vec<Point2> = observed_skel.iter().map(|p| noisy(p, rng)).collect();
        let future: Vec<Point2> = skel.iter().map(|p| noisy(p, rng)).collect();
        scenes.push(Scene::new(observed, future));
    }
    Ok((scenes, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_lies_exactly_on_the_skeletons() {
        let cfg = SimforkConfig { noise_std: 0.0, trajectories: 50, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (scenes, _) = gen_simfork(&cfg, &mut rng).unwrap();
        let obs_skel = cfg.observed_skeleton();
        let left = cfg.branch_skeleton(true);
        let right = cfg.branch_skeleton(false);
        for s in &scenes {
            for (p, q) in s.observed.iter().zip(&obs_skel) {
                assert_eq!(p, q);
            }
            let on_left = s.future.iter().zip(&left).all(|(p, q)| p == q);
            let on_right = s.future.iter().zip(&right).all(|(p, q)| p == q);
            assert!(on_left || on_right, "future must follow one branch exactly");
        }
    }

    #[test]
    fn branch_fraction_is_binomial() {
        let cfg = SimforkConfig { trajectories: 10_000, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (scenes, _) = gen_simfork(&cfg, &mut rng).unwrap();
        // Left branch has negative final x.
        let lefts = scenes.iter().filter(|s| s.future.last().unwrap().x < 0.0).count() as f64;
        let n = cfg.trajectories as f64;
        let p = lefts / n;
        let se = (0.5 * 0.5 / n).sqrt();
        assert!((p - 0.5).abs() < 3.0 * se, "left fraction {p} outside 3 binomial SEs");
    }

    #[test]
    fn branch_conditioned_covariance_matches_noise() {
        let cfg = SimforkConfig { trajectories: 20_000, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (scenes, _) = gen_simfork(&cfg, &mut rng).unwrap();
        for step in [0usize, 5, 11] {
            let lefts: Vec<Point2> = scenes
                .iter()
                .filter(|s| s.future.last().unwrap().x < 0.0)
                .map(|s| s.future[step])
                .collect();
            let mean = crate::geom::centroid(&lefts);
            let n = lefts.len() as f64;
            let (mut vxx, mut vyy, mut vxy) = (0.0, 0.0, 0.0);
            for p in &lefts {
                vxx += (p.x - mean.x).powi(2) / n;
                vyy += (p.y - mean.y).powi(2) / n;
                vxy += (p.x - mean.x) * (p.y - mean.y) / n;
            }
            let want = cfg.noise_std * cfg.noise_std;
            assert!((vxx - want).abs() / want < 0.05, "step {step}: vxx {vxx} vs {want}");
            assert!((vyy - want).abs() / want < 0.05, "step {step}: vyy {vyy} vs {want}");
            assert!(vxy.abs() / want < 0.05, "step {step}: vxy {vxy} not near 0");
        }
    }

    #[test]
    fn analytic_density_integrates_to_one() {
        let cfg = SimforkConfig::default();
        let gt = GroundTruthDensity::from_config(&cfg);
        // Midpoint quadrature on a wide grid around both branches.
        for n in [1usize, 6, 12] {
            let mix = &gt.steps[n - 1];
            let r = 12.0 * cfg.step + 6.0 * cfg.noise_std;
            let cells = 400;
            let h = 2.0 * r / cells as f64;
            let mut mass = 0.0;
            for i in 0..cells {
                for j in 0..cells {
                    let p = Point2::new(-r + (i as f64 + 0.5) * h, -r + (j as f64 + 0.5) * h);
                    mass += mix.pdf(p) * h * h;
                }
            }
            assert!((mass - 1.0).abs() < 0.01, "step {n}: mass {mass}");
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = SimforkConfig { trajectories: 20, ..Default::default() };
        let (a, _) = gen_simfork(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (b, _) = gen_simfork(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
