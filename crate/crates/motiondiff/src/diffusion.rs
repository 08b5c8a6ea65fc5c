//! Diffusion mathematics: forward noising, the noise-prediction training
//! loss, ancestral reverse sampling, classifier-free guidance, and guided
//! (product-of-experts) interpolation.

use crate::data::ConditioningSequence;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use ndarray::Array2;
use rand::Rng;

/// Anything that predicts the injected noise from a diffused sequence, its
/// conditioning, and the step index. Implemented by the denoiser network and
/// by the closed-form Gaussian oracle.
pub trait EpsilonPredictor {
    fn predict(
        &self,
        x: &Array2<f64>,
        cond: &ConditioningSequence,
        n: usize,
    ) -> Result<Array2<f64>>;
}

/// Per-step loss weights `kappa_n`; the default weighting is all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWeighting {
    pub kappa: Vec<f64>,
}

impl TrainingWeighting {
    pub fn uniform(n_steps: usize) -> Self {
        Self {
            kappa: vec![1.0; n_steps],
        }
    }

    pub fn at(&self, n: usize) -> Result<f64> {
        self.kappa
            .get(n - 1)
            .copied()
            .ok_or_else(|| Error::contract(format!("kappa index {n} out of range")))
    }
}

/// How the noise prediction fed to each reverse step is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Zeroed style span on every call.
    Unconditional,
    /// Single style, no mixing.
    Conditional,
    /// Unconditional plus `gamma` times the (conditional - unconditional) gap.
    Guided,
    /// Barycentric combination of two or more styled predictions.
    Interpolated,
}

/// Full description of a sampling run's guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub gamma: f64,
    pub styles: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Set when the weights were rescaled by `temperature_scale`; relaxes the
    /// sum-to-one check.
    pub temperature_scaled: bool,
}

impl GuidanceSpec {
    pub fn unconditional() -> Self {
        Self {
            mode: GuidanceMode::Unconditional,
            gamma: 0.0,
            styles: Vec::new(),
            weights: Vec::new(),
            temperature_scaled: false,
        }
    }

    pub fn conditional(style: Vec<f64>) -> Self {
        Self {
            mode: GuidanceMode::Conditional,
            gamma: 1.0,
            styles: vec![style],
            weights: Vec::new(),
            temperature_scaled: false,
        }
    }

    /// Classifier-free guidance at strength `gamma` toward the given style.
    /// `gamma` may lie outside `[0, 1]`.
    pub fn guided(style: Vec<f64>, gamma: f64) -> Self {
        Self {
            mode: GuidanceMode::Guided,
            gamma,
            styles: vec![style],
            weights: Vec::new(),
            temperature_scaled: false,
        }
    }

    /// Barycentric interpolation over two or more styles.
    pub fn interpolated(styles: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let spec = Self {
            mode: GuidanceMode::Interpolated,
            gamma: 0.0,
            styles,
            weights,
            temperature_scaled: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two-style interpolation at exponents `(1 - gamma, gamma)`.
    pub fn interpolated_pair(style_a: Vec<f64>, style_b: Vec<f64>, gamma: f64) -> Result<Self> {
        Self::interpolated(vec![style_a, style_b], vec![1.0 - gamma, gamma])
    }

    /// Rescale the interpolation weights by `1 / tau`, marking the spec as
    /// temperature-scaled.
    pub fn with_temperature(mut self, tau: f64) -> Result<Self> {
        self.weights = temperature_scale(&self.weights, tau)?;
        self.temperature_scaled = true;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            GuidanceMode::Unconditional => Ok(()),
            GuidanceMode::Conditional | GuidanceMode::Guided => {
                if self.styles.len() != 1 {
                    return Err(Error::config(format!(
                        "{:?} guidance needs exactly one style, got {}",
                        self.mode,
                        self.styles.len()
                    )));
                }
                Ok(())
            }
            GuidanceMode::Interpolated => {
                if self.styles.len() < 2 {
                    return Err(Error::config("interpolation needs at least two styles"));
                }
                if self.weights.len() != self.styles.len() {
                    return Err(Error::config(format!(
                        "{} weights for {} styles",
                        self.weights.len(),
                        self.styles.len()
                    )));
                }
                if !self.temperature_scaled {
                    let sum: f64 = self.weights.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return Err(Error::config(format!(
                            "interpolation weights sum to {sum}, expected 1"
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Diffuses clean data to step `n`: `alpha_cum_n * x0 + beta_cum_n * eps`.
pub fn forward_sample(
    x0: &Array2<f64>,
    n: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() {
        return Err(Error::contract(format!(
            "noise shape {:?} does not match data shape {:?}",
            eps.dim(),
            x0.dim()
        )));
    }
    let a = sched.alpha_cum_at(n)?;
    let b = sched.beta_cum_at(n)?;
    Ok(x0 * a + eps * b)
}

/// Classifier-free guidance: `eps_uncond + gamma * (eps_cond - eps_uncond)`.
///
/// `gamma = 0` recovers the unconditional prediction exactly and `gamma = 1`
/// the conditional one; values above 1 exaggerate the conditional direction.
pub fn guided_epsilon(
    eps_uncond: &Array2<f64>,
    eps_cond: &Array2<f64>,
    gamma: f64,
) -> Result<Array2<f64>> {
    if eps_uncond.dim() != eps_cond.dim() {
        return Err(Error::contract("guided_epsilon shape mismatch"));
    }
    if gamma == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if gamma == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_uncond + &((eps_cond - eps_uncond) * gamma))
}

/// Barycentric combination of expert predictions. Weights must sum to one
/// within 1e-12 unless the caller marks them temperature-scaled; individual
/// weights may leave `[0, 1]` (extrapolation).
pub fn interpolated_epsilon(eps_list: &[Array2<f64>], weights: &[f64]) -> Result<Array2<f64>> {
    interpolated_epsilon_relaxed(eps_list, weights, false)
}

pub fn interpolated_epsilon_relaxed(
    eps_list: &[Array2<f64>],
    weights: &[f64],
    temperature_scaled: bool,
) -> Result<Array2<f64>> {
    if eps_list.is_empty() || eps_list.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} weights",
            eps_list.len(),
            weights.len()
        )));
    }
    if !temperature_scaled {
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "interpolation weights sum to {sum}, expected 1"
            )));
        }
    }
    // Degenerate weight vectors reproduce the selected expert bitwise.
    if let Some(k) = weights.iter().position(|&w| w == 1.0) {
        if weights.iter().enumerate().all(|(i, &w)| i == k || w == 0.0) {
            return Ok(eps_list[k].clone());
        }
    }
    let shape = eps_list[0].dim();
    let mut out = Array2::zeros(shape);
    for (eps, &w) in eps_list.iter().zip(weights) {
        if eps.dim() != shape {
            return Err(Error::contract("interpolated_epsilon shape mismatch"));
        }
        out.scaled_add(w, eps);
    }
    Ok(out)
}

/// Divides interpolation weights by `tau`, adjusting the Gibbs temperature of
/// sampling. The sum-to-one invariant is deliberately relaxed; callers must
/// mark the result as temperature-scaled.
pub fn temperature_scale(weights: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    Ok(weights.iter().map(|w| w / tau).collect())
}

/// One ancestral reverse step with explicit noise `z` (ignored at `n == 1`,
/// where the step is deterministic).
pub fn reverse_step_with_noise(
    x_n: &Array2<f64>,
    eps_hat: &Array2<f64>,
    n: usize,
    sched: &NoiseSchedule,
    z: &Array2<f64>,
) -> Result<Array2<f64>> {
    if x_n.dim() != eps_hat.dim() {
        return Err(Error::contract("reverse_step shape mismatch"));
    }
    let beta = sched.beta_at(n)?;
    let alpha = sched.alpha_at(n)?;
    let beta_cum = sched.beta_cum_at(n)?;
    let mut mu = x_n - &(eps_hat * (beta / beta_cum));
    mu.mapv_inplace(|v| v / alpha);
    if n == 1 {
        return Ok(mu);
    }
    if z.dim() != x_n.dim() {
        return Err(Error::contract("reverse_step noise shape mismatch"));
    }
    let sigma = sched.sigma_at(n)?;
    Ok(mu + &(z * sigma))
}

/// One ancestral reverse step, drawing the injected noise from `rng`.
pub fn reverse_step<R: Rng>(
    x_n: &Array2<f64>,
    eps_hat: &Array2<f64>,
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (t, d) = x_n.dim();
    let z = if n > 1 {
        rng::normal_matrix(rng, t, d)
    } else {
        Array2::zeros((t, d))
    };
    reverse_step_with_noise(x_n, eps_hat, n, sched, &z)
}

/// Builds the per-call conditioning variants a guidance spec needs.
fn guidance_conditions(
    cond: &ConditioningSequence,
    guidance: &GuidanceSpec,
) -> Result<Vec<ConditioningSequence>> {
    Ok(match guidance.mode {
        GuidanceMode::Unconditional => vec![cond.with_zero_style()],
        GuidanceMode::Conditional => vec![cond.with_style(&guidance.styles[0])?],
        GuidanceMode::Guided => vec![
            cond.with_zero_style(),
            cond.with_style(&guidance.styles[0])?,
        ],
        GuidanceMode::Interpolated => guidance
            .styles
            .iter()
            .map(|s| cond.with_style(s))
            .collect::<Result<_>>()?,
    })
}

fn guided_prediction<P: EpsilonPredictor + ?Sized>(
    predictor: &P,
    x: &Array2<f64>,
    conds: &[ConditioningSequence],
    guidance: &GuidanceSpec,
    n: usize,
) -> Result<Array2<f64>> {
    match guidance.mode {
        GuidanceMode::Unconditional | GuidanceMode::Conditional => {
            predictor.predict(x, &conds[0], n)
        }
        GuidanceMode::Guided => {
            let eps_u = predictor.predict(x, &conds[0], n)?;
            let eps_c = predictor.predict(x, &conds[1], n)?;
            guided_epsilon(&eps_u, &eps_c, guidance.gamma)
        }
        GuidanceMode::Interpolated => {
            let eps: Vec<Array2<f64>> = conds
                .iter()
                .map(|c| predictor.predict(x, c, n))
                .collect::<Result<_>>()?;
            interpolated_epsilon_relaxed(&eps, &guidance.weights, guidance.temperature_scaled)
        }
    }
}

fn run_reverse<P: EpsilonPredictor + ?Sized, R: Rng>(
    predictor: &P,
    conds: &[ConditioningSequence],
    mut x: Array2<f64>,
    sched: &NoiseSchedule,
    guidance: &GuidanceSpec,
    rng: &mut R,
) -> Result<Array2<f64>> {
    for n in (1..=sched.n_steps).rev() {
        let eps_hat = guided_prediction(predictor, &x, conds, guidance, n)?;
        x = reverse_step(&x, &eps_hat, n, sched, rng)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Eval {
                context: format!("non-finite sample state at reverse step {n}"),
            });
        }
    }
    Ok(x)
}

/// Full ancestral sampling loop: starts from standard-normal noise and walks
/// the reverse process from step `N` down to 1, assembling each step's noise
/// prediction according to the guidance spec. Deterministic given
/// (predictor parameters, conditioning, guidance, seed).
pub fn sample<P: EpsilonPredictor + ?Sized>(
    predictor: &P,
    cond: &ConditioningSequence,
    n_frames: usize,
    out_dim: usize,
    sched: &NoiseSchedule,
    guidance: &GuidanceSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    if cond.len() != n_frames {
        return Err(Error::contract(format!(
            "conditioning has {} frames, requested {}",
            cond.len(),
            n_frames
        )));
    }
    guidance.validate()?;
    let conds = guidance_conditions(cond, guidance)?;
    let mut rng = rng::stream(seed);
    let x = rng::normal_matrix(&mut rng, n_frames, out_dim);
    run_reverse(predictor, &conds, x, sched, guidance, &mut rng)
}

/// Like [`sample`] but starts the reverse loop from a caller-supplied state
/// instead of standard-normal noise. Used by verification harnesses that know
/// the exact terminal marginal of their target.
pub fn sample_from<P: EpsilonPredictor + ?Sized>(
    predictor: &P,
    cond: &ConditioningSequence,
    x_init: Array2<f64>,
    sched: &NoiseSchedule,
    guidance: &GuidanceSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    if cond.len() != x_init.nrows() {
        return Err(Error::contract(format!(
            "conditioning has {} frames, initial state {}",
            cond.len(),
            x_init.nrows()
        )));
    }
    guidance.validate()?;
    let conds = guidance_conditions(cond, guidance)?;
    let mut rng = rng::stream(seed);
    run_reverse(predictor, &conds, x_init, sched, guidance, &mut rng)
}

/// The noise and step drawn for one training item.
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub n: usize,
    pub eps: Array2<f64>,
}

/// Draws the step index uniformly on `1..=N` and a standard-normal noise
/// matrix for one item. One draw per sequence; the step index is shared by
/// every frame of the item.
pub fn draw_loss_noise<R: Rng>(rng: &mut R, t: usize, d: usize, n_steps: usize) -> LossDraw {
    let n = rng.gen_range(1..=n_steps);
    LossDraw {
        n,
        eps: rng::normal_matrix(rng, t, d),
    }
}

/// Mean squared error between the drawn and predicted noise.
pub fn eps_mse(eps: &Array2<f64>, eps_hat: &Array2<f64>) -> f64 {
    let diff = eps - eps_hat;
    diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
}

/// Monte-Carlo estimate of the denoising loss over a batch: for each item,
/// diffuse to a uniformly drawn step, predict the injected noise, and return
/// the `kappa`-weighted mean squared error averaged over the batch.
///
/// Per-item randomness comes from substreams of `(seed, step, item)`, so the
/// value is reproducible bitwise and items could be evaluated in parallel.
pub fn training_loss<P: EpsilonPredictor + ?Sized>(
    denoiser: &P,
    batch: &[(Array2<f64>, ConditioningSequence)],
    sched: &NoiseSchedule,
    weighting: &TrainingWeighting,
    seed: u64,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("training_loss on an empty batch"));
    }
    let mut total = 0.0;
    for (i, (x0, cond)) in batch.iter().enumerate() {
        if cond.len() != x0.nrows() {
            return Err(Error::contract(format!(
                "item {i}: conditioning has {} frames, poses {}",
                cond.len(),
                x0.nrows()
            )));
        }
        let mut rng = rng::item_stream(seed, step, i as u64);
        let draw = draw_loss_noise(&mut rng, x0.nrows(), x0.ncols(), sched.n_steps);
        let x_n = forward_sample(x0, draw.n, &draw.eps, sched)?;
        let eps_hat = denoiser.predict(&x_n, cond, draw.n)?;
        let item = weighting.at(draw.n)? * eps_mse(&draw.eps, &eps_hat);
        if !item.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss on batch item {i}"),
            });
        }
        total += item;
    }
    Ok(total / batch.len() as f64)
}
