//! Hidden-space diffusion over social embeddings: noise schedule, forward
//! corruption, the two-layer time-conditioned denoiser, training losses
//! derived from the ELBO, and deterministic iterative reverse inference.
//!
//! The schedule derives its betas from a linear interpolation sequence
//! `s = (1, tau*s_max, ..., tau*s_min)` with `beta_t = 1 - s_t/s_{t-1}`,
//! which telescopes so that `alpha_bar_t = s_t / s_0`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Precomputed beta/alpha/alpha-bar sequences plus the interpolation
/// endpoints and noise-scale factor that generated them.
///
/// Index convention: step t runs 1..=T; `alpha_bar(0) == 1` so the reverse
/// update collapses onto the predictor output at t = 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    s_seq: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    pub s_max: f64,
    pub s_min: f64,
    pub tau: f64,
}

impl NoiseSchedule {
    /// Build a schedule of `t_max` steps from endpoints scaled by `tau`.
    /// Rejects any parameterization whose betas leave (0, 1).
    pub fn build(t_max: usize, s_max: f64, s_min: f64, tau: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(s_max.is_finite() && s_min.is_finite() && tau.is_finite()) {
            return Err(Error::Config("schedule endpoints must be finite".into()));
        }
        let hi = tau * s_max;
        let lo = tau * s_min;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "schedule endpoints must satisfy 0 < tau*s_min <= tau*s_max < 1, got ({lo}, {hi})"
            )));
        }
        let mut s_seq = Vec::with_capacity(t_max + 1);
        s_seq.push(1.0);
        for t in 1..=t_max {
            // linspace(hi, lo, T); a single step sits at hi
            let s = if t_max == 1 {
                hi
            } else {
                hi + (t - 1) as f64 * (lo - hi) / (t_max - 1) as f64
            };
            s_seq.push(s);
        }
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha = vec![0.0; t_max + 1];
        let mut alpha_bar = vec![0.0; t_max + 1];
        alpha_bar[0] = 1.0;
        for t in 1..=t_max {
            beta[t] = 1.0 - s_seq[t] / s_seq[t - 1];
            if !(beta[t] > 0.0 && beta[t] < 1.0) {
                return Err(Error::Config(format!(
                    "schedule produced beta_{t} = {} outside (0, 1)",
                    beta[t]
                )));
            }
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(Self { t_max, s_seq, beta, alpha, alpha_bar, s_max, s_min, tau })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Interpolation value s_t, t in 0..=T.
    pub fn s(&self, t: usize) -> f64 {
        self.s_seq[t]
    }

    /// beta_t, t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta index {t} out of 1..={}", self.t_max);
        self.beta[t]
    }

    /// alpha_t = 1 - beta_t, t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "alpha index {t} out of 1..={}", self.t_max);
        self.alpha[t]
    }

    /// Cumulative product alpha_bar_t, t in 0..=T; alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar index {t} out of 0..={}", self.t_max);
        self.alpha_bar[t]
    }

    /// Denoising-matching weight for t >= 2:
    /// (alpha_bar_{t-1}/(1-alpha_bar_{t-1}) - alpha_bar_t/(1-alpha_bar_t)) / 2.
    pub fn denoise_weight(&self, t: usize) -> f64 {
        assert!((2..=self.t_max).contains(&t), "denoise weight needs t in 2..=T, got {t}");
        let snr = |ab: f64| ab / (1.0 - ab);
        0.5 * (snr(self.alpha_bar[t - 1]) - snr(self.alpha_bar[t]))
    }

    /// Coefficients (on e_t, on the predicted e_0) of the reverse-step mean.
    pub fn reverse_coeffs(&self, t: usize) -> (f64, f64) {
        assert!((1..=self.t_max).contains(&t));
        let ab_prev = self.alpha_bar[t - 1];
        let ab_t = self.alpha_bar[t];
        let a_t = self.alpha[t];
        let c_et = (a_t * (1.0 - ab_prev)).sqrt() / (1.0 - ab_t);
        let c_e0 = ab_prev.sqrt() * (1.0 - a_t) / (1.0 - ab_t);
        (c_et, c_e0)
    }

    /// Posterior variance of the reverse step (used only when stochastic
    /// sampling is enabled at inference).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t));
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }
}

/// Draw a standard-Gaussian tensor of the given shape.
pub fn gaussian_like(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn validate_steps(t: &[usize], rows: usize, sched: &NoiseSchedule) -> Result<()> {
    if t.len() != rows {
        return Err(Error::Shape {
            op: "diffusion step vector",
            detail: format!("{} steps for {} rows", t.len(), rows),
        });
    }
    if let Some(&bad) = t.iter().find(|&&ti| ti < 1 || ti > sched.t_max) {
        return Err(Error::Config(format!(
            "diffusion step {bad} outside 1..={}",
            sched.t_max
        )));
    }
    Ok(())
}

/// Closed-form forward noising: `e_t = sqrt(ab_t) e_0 + sqrt(1-ab_t) n`,
/// rowwise with per-row step t. Differentiable with respect to `e0`.
pub fn forward_closed_form(
    tape: &mut Tape,
    e0: Var,
    t: &[usize],
    noise: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let dim = tape.value(e0).dim();
    validate_steps(t, dim.0, sched)?;
    if noise.dim() != dim {
        return Err(Error::Shape {
            op: "forward_closed_form",
            detail: format!("noise {:?} vs embeddings {:?}", noise.dim(), dim),
        });
    }
    let a: Vec<f64> = t.iter().map(|&ti| sched.alpha_bar(ti).sqrt()).collect();
    let b: Vec<f64> = t.iter().map(|&ti| (1.0 - sched.alpha_bar(ti)).sqrt()).collect();
    let signal = tape.row_scale(e0, a)?;
    let n = tape.constant(noise.clone());
    let scaled_noise = tape.row_scale(n, b)?;
    tape.add(signal, scaled_noise)
}

/// Step-by-step forward reference: applies the single-step transition
/// `e_k = sqrt(1-beta_k) e_{k-1} + sqrt(beta_k) n_k` for k = 1..=t.
/// Test-only oracle for the closed form; all rows share one t here.
pub fn forward_iterative(
    e0: &Array2<f64>,
    t: usize,
    noise_seq: &[Array2<f64>],
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t < 1 || t > sched.t_max {
        return Err(Error::Config(format!("step {t} outside 1..={}", sched.t_max)));
    }
    if noise_seq.len() != t {
        return Err(Error::Config(format!(
            "iterative forward to t={t} needs {t} noise draws, got {}",
            noise_seq.len()
        )));
    }
    let mut e = e0.clone();
    for k in 1..=t {
        let beta = sched.beta(k);
        if noise_seq[k - 1].dim() != e0.dim() {
            return Err(Error::Shape {
                op: "forward_iterative",
                detail: format!("noise draw {k} has shape {:?}", noise_seq[k - 1].dim()),
            });
        }
        e = e * (1.0 - beta).sqrt() + &noise_seq[k - 1] * beta.sqrt();
    }
    Ok(e)
}

/// Time-step conditioning table: learned rows by default, or a fixed
/// sinusoidal table behind the config flag.
#[derive(Debug, Clone)]
pub enum TimeEmbedding {
    Learned(ParamId),
    Sinusoidal(Array2<f64>),
}

/// Build the (T+1) x d' sinusoidal table used when the learned embedding
/// is disabled.
pub fn sinusoidal_table(t_max: usize, d_time: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_max + 1, d_time), |(t, j)| {
        let half = (d_time / 2).max(1);
        let freq = (-(10000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        if j < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Two fully-connected layers realizing the clean-embedding predictor
/// `e0_hat = fc2(act(fc1(e_t || h_t)))`.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub time_emb: TimeEmbedding,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub activation_slope: f64,
}

impl DenoiserNet {
    /// Predict the clean embedding from noisy input `et` at per-row steps `t`.
    pub fn predict_e0(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        et: Var,
        t: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<Var> {
        validate_steps(t, tape.value(et).nrows(), sched)?;
        let table = match &self.time_emb {
            TimeEmbedding::Learned(id) => tape.param(store, *id),
            TimeEmbedding::Sinusoidal(tab) => tape.constant(tab.clone()),
        };
        let h = tape.gather_rows(table, t)?;
        let x = tape.concat_cols(et, h)?;
        let w1 = tape.param(store, self.fc1_w);
        let b1 = tape.param(store, self.fc1_b);
        let z1 = tape.matmul(x, w1)?;
        let z1 = tape.add_row_bias(z1, b1)?;
        let a1 = tape.leaky_relu(z1, self.activation_slope);
        let w2 = tape.param(store, self.fc2_w);
        let b2 = tape.param(store, self.fc2_b);
        let z2 = tape.matmul(a1, w2)?;
        tape.add_row_bias(z2, b2)
    }
}

/// Denoising-matching loss L_t for rows all at t >= 2: batch mean of
/// `denoise_weight(t_i) * ||e0_hat_i - e0_i||^2`.
pub fn loss_denoise_matching(
    tape: &mut Tape,
    e0: Var,
    e0_hat: Var,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Var> {
    validate_steps(t, tape.value(e0).nrows(), sched)?;
    if let Some(&bad) = t.iter().find(|&&ti| ti < 2) {
        return Err(Error::Config(format!(
            "denoising-matching term needs t >= 2, got {bad}; route t = 1 to the reconstruction term"
        )));
    }
    let w: Vec<f64> = t.iter().map(|&ti| sched.denoise_weight(ti)).collect();
    let diff = tape.sub(e0_hat, e0)?;
    let sq = tape.row_sq_norm(diff);
    let weighted = tape.row_scale(sq, w)?;
    Ok(tape.mean(weighted))
}

/// Reconstruction loss L'_t for predictions made at t = 1: batch mean of
/// `||e0_hat_i - e0_i||^2`.
pub fn loss_reconstruction(tape: &mut Tape, e0: Var, e0_hat: Var) -> Result<Var> {
    let diff = tape.sub(e0_hat, e0)?;
    let sq = tape.row_sq_norm(diff);
    Ok(tape.mean(sq))
}

/// How mixed-step batches weigh their diffusion rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionLossMode {
    /// t = 1 rows use the reconstruction term, t >= 2 rows the weighted
    /// denoising-matching term.
    Elbo,
    /// Every row uses the unweighted reconstruction form.
    ReconOnly,
}

/// Diffusion loss over a batch whose rows carry mixed sampled steps.
pub fn diffusion_loss_mixed(
    tape: &mut Tape,
    e0: Var,
    e0_hat: Var,
    t: &[usize],
    sched: &NoiseSchedule,
    mode: DiffusionLossMode,
) -> Result<Var> {
    validate_steps(t, tape.value(e0).nrows(), sched)?;
    let coeffs: Vec<f64> = t
        .iter()
        .map(|&ti| match mode {
            DiffusionLossMode::ReconOnly => 1.0,
            DiffusionLossMode::Elbo => {
                if ti == 1 {
                    1.0
                } else {
                    sched.denoise_weight(ti)
                }
            }
        })
        .collect();
    let diff = tape.sub(e0_hat, e0)?;
    let sq = tape.row_sq_norm(diff);
    let weighted = tape.row_scale(sq, coeffs)?;
    Ok(tape.mean(weighted))
}

/// One reverse-step mean update. At t = 1 the alpha_bar_0 = 1 branch makes
/// the e_t coefficient vanish, so the predictor output is returned as-is.
pub fn reverse_mu(
    tape: &mut Tape,
    et_hat: Var,
    t: usize,
    e0_hat: Var,
    sched: &NoiseSchedule,
) -> Result<Var> {
    if t < 1 || t > sched.t_max {
        return Err(Error::Config(format!("reverse step {t} outside 1..={}", sched.t_max)));
    }
    if t == 1 {
        return Ok(e0_hat);
    }
    let (c_et, c_e0) = sched.reverse_coeffs(t);
    let a = tape.scale(et_hat, c_et);
    let b = tape.scale(e0_hat, c_e0);
    tape.add(a, b)
}

/// Iterative reverse inference: start from the encoded social embeddings
/// and repeatedly apply the reverse mean for t = steps..1. Deterministic
/// unless `stochastic_rng` is supplied, in which case posterior noise is
/// re-injected between steps (never after the final one).
pub fn denoise_inference<R: Rng>(
    tape: &mut Tape,
    store: &ParamStore,
    e_s: Var,
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    steps: usize,
    mut stochastic_rng: Option<&mut R>,
) -> Result<Var> {
    if steps < 1 {
        return Err(Error::Config("inference needs at least one reverse step".into()));
    }
    if steps > sched.t_max {
        return Err(Error::Config(format!(
            "inference steps {steps} exceed schedule length {}",
            sched.t_max
        )));
    }
    let rows = tape.value(e_s).nrows();
    let mut e = e_s;
    for t in (1..=steps).rev() {
        let t_vec = vec![t; rows];
        let e0_hat = net.predict_e0(tape, store, e, &t_vec, sched)?;
        e = reverse_mu(tape, e, t, e0_hat, sched)?;
        if t > 1 {
            if let Some(rng) = stochastic_rng.as_deref_mut() {
                let sigma = sched.posterior_variance(t).sqrt();
                let cols = tape.value(e).ncols();
                let z = gaussian_like(rows, cols, rng) * sigma;
                let zc = tape.constant(z);
                e = tape.add(e, zc)?;
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::linear_init;
    use ndarray::arr2;
    use rand::Rng;

    fn two_step_schedule() -> NoiseSchedule {
        // s_seq = (1, 0.9, 0.8)
        NoiseSchedule::build(2, 0.9, 0.8, 1.0).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::build(1, 0.99, 0.99, 1.0).unwrap();
        assert!((s.beta(1) - 0.01).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule_values() {
        let s = two_step_schedule();
        assert!((s.beta(1) - 0.1).abs() < 1e-15);
        assert!((s.beta(2) - (1.0 - 0.8 / 0.9)).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn telescoping_identity() {
        let mut rng = crate::rng::stream_rng(51, "sched-tele");
        for _ in 0..50 {
            let t_max = rng.random_range(1..=200);
            let hi: f64 = rng.random_range(0.2..0.99);
            let lo: f64 = rng.random_range(0.01..hi);
            let tau: f64 = [1.0, 0.1, 0.01, 0.001][rng.random_range(0..4)];
            let s = match NoiseSchedule::build(t_max, hi, lo, tau) {
                Ok(s) => s,
                Err(_) => continue,
            };
            for t in 0..=t_max {
                assert!((s.alpha_bar(t) - s.s(t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(NoiseSchedule::build(0, 0.9, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::build(10, 1.2, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::build(10, 0.9, 0.0, 1.0).is_err());
        // equal endpoints with T >= 2 produce beta = 0
        assert!(NoiseSchedule::build(2, 0.5, 0.5, 1.0).is_err());
        // increasing sequence produces negative beta
        assert!(NoiseSchedule::build(2, 0.1, 0.9, 1.0).is_err());
    }

    #[test]
    fn denoise_weight_positive_and_snr_decreasing() {
        let s = NoiseSchedule::build(50, 0.99, 0.1, 0.1).unwrap();
        let mut prev_snr = f64::INFINITY;
        for t in 1..=50 {
            let snr = s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
            assert!(snr < prev_snr);
            prev_snr = snr;
            if t >= 2 {
                assert!(s.denoise_weight(t) > 0.0);
            }
        }
    }

    #[test]
    fn denoise_matching_weight_example() {
        // weight = ((0.9/0.1) - (0.8/0.2)) / 2 = 2.5 on a unit-norm residual
        let s = two_step_schedule();
        let mut tape = Tape::new();
        let e0 = tape.constant(arr2(&[[1.0, 0.0]]));
        let e0_hat = tape.constant(arr2(&[[0.0, 0.0]]));
        let l = loss_denoise_matching(&mut tape, e0, e0_hat, &[2], &s).unwrap();
        assert!((tape.scalar(l) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn denoise_matching_rejects_t1() {
        let s = two_step_schedule();
        let mut tape = Tape::new();
        let e0 = tape.constant(arr2(&[[1.0]]));
        let e0_hat = tape.constant(arr2(&[[0.0]]));
        assert!(loss_denoise_matching(&mut tape, e0, e0_hat, &[1], &s).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let mut tape = Tape::new();
        let e0 = tape.constant(arr2(&[[1.0, 0.0]]));
        let same = tape.constant(arr2(&[[1.0, 0.0]]));
        let zero = tape.constant(arr2(&[[0.0, 0.0]]));
        let l0 = loss_reconstruction(&mut tape, e0, same).unwrap();
        assert_eq!(tape.scalar(l0), 0.0);
        let l1 = loss_reconstruction(&mut tape, e0, zero).unwrap();
        assert!((tape.scalar(l1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matching_equals_weighted_reconstruction() {
        let s = two_step_schedule();
        let mut tape = Tape::new();
        let e0 = tape.constant(arr2(&[[0.3, -0.4], [1.0, 2.0]]));
        let e0_hat = tape.constant(arr2(&[[0.0, 0.1], [0.9, 1.5]]));
        let lm = loss_denoise_matching(&mut tape, e0, e0_hat, &[2, 2], &s).unwrap();
        let lr = loss_reconstruction(&mut tape, e0, e0_hat).unwrap();
        let ratio = tape.scalar(lm) / tape.scalar(lr);
        assert!((ratio - s.denoise_weight(2)).abs() < 1e-12);
    }

    #[test]
    fn forward_zero_noise_scales_signal() {
        let s = two_step_schedule();
        let mut tape = Tape::new();
        let e0 = tape.constant(arr2(&[[1.0, -2.0]]));
        let noise = Array2::zeros((1, 2));
        let et = forward_closed_form(&mut tape, e0, &[2], &noise, &s).unwrap();
        let ab = s.alpha_bar(2).sqrt();
        assert!((tape.value(et)[[0, 0]] - ab).abs() < 1e-15);
        assert!((tape.value(et)[[0, 1]] + 2.0 * ab).abs() < 1e-15);
    }

    #[test]
    fn forward_full_noise_limit() {
        // schedule driven close to alpha_bar ~ 0
        let s = NoiseSchedule::build(60, 0.95, 0.05, 0.2).unwrap();
        let t = s.t_max();
        assert!(s.alpha_bar(t) < 0.02);
        let mut tape = Tape::new();
        let e0 = tape.constant(Array2::from_elem((1, 3), 1.0));
        let noise = arr2(&[[0.5, -1.5, 2.0]]);
        let et = forward_closed_form(&mut tape, e0, &[t], &noise, &s).unwrap();
        for (a, n) in tape.value(et).iter().zip(noise.iter()) {
            assert!((a - n).abs() < 0.2, "e_t should be close to the pure noise draw");
        }
    }

    #[test]
    fn forward_rejects_bad_t() {
        let s = two_step_schedule();
        let mut tape = Tape::new();
        let e0 = tape.constant(arr2(&[[1.0]]));
        let noise = Array2::zeros((1, 1));
        assert!(forward_closed_form(&mut tape, e0, &[0], &noise, &s).is_err());
        assert!(forward_closed_form(&mut tape, e0, &[3], &noise, &s).is_err());
    }

    #[test]
    fn iterative_matches_closed_form_zero_noise() {
        let s = NoiseSchedule::build(20, 0.95, 0.2, 0.5).unwrap();
        let e0 = arr2(&[[1.0, -0.5], [0.25, 2.0]]);
        for t in [1, 7, 20] {
            let zeros: Vec<Array2<f64>> = (0..t).map(|_| Array2::zeros((2, 2))).collect();
            let iter = forward_iterative(&e0, t, &zeros, &s).unwrap();
            let mut tape = Tape::new();
            let v = tape.constant(e0.clone());
            let cf = forward_closed_form(&mut tape, v, &[t, t], &Array2::zeros((2, 2)), &s).unwrap();
            for (a, b) in iter.iter().zip(tape.value(cf).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iterative_t1_equals_closed_form_same_draw() {
        let s = two_step_schedule();
        let e0 = arr2(&[[0.7, -0.3]]);
        let draw = arr2(&[[1.3, 0.4]]);
        let iter = forward_iterative(&e0, 1, &[draw.clone()], &s).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(e0);
        let cf = forward_closed_form(&mut tape, v, &[1], &draw, &s).unwrap();
        for (a, b) in iter.iter().zip(tape.value(cf).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_monte_carlo_moments() {
        let s = NoiseSchedule::build(50, 0.99, 0.1, 0.1).unwrap();
        let t = 30;
        let n = 10_000;
        let e0 = arr2(&[[0.8, -1.2]]);
        let mut rng = crate::rng::stream_rng(57, "diff-mc");
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..n {
            let mut tape = Tape::new();
            let v = tape.constant(e0.clone());
            let noise = gaussian_like(1, 2, &mut rng);
            let et = forward_closed_form(&mut tape, v, &[t], &noise, &s).unwrap();
            for c in 0..2 {
                let x = tape.value(et)[[0, c]];
                sum[c] += x;
                sum_sq[c] += x * x;
            }
        }
        let ab = s.alpha_bar(t);
        let var_expected = 1.0 - ab;
        for c in 0..2 {
            let mean = sum[c] / n as f64;
            let var = sum_sq[c] / n as f64 - mean * mean;
            let mean_expected = ab.sqrt() * e0[[0, c]];
            let mean_tol = 4.0 * (var_expected / n as f64).sqrt();
            assert!(
                (mean - mean_expected).abs() < mean_tol,
                "mean {mean} vs {mean_expected} (tol {mean_tol})"
            );
            assert!(
                (var - var_expected).abs() / var_expected < 0.05,
                "variance {var} vs {var_expected}"
            );
        }
    }

    #[test]
    fn reverse_t1_returns_predictor_bitwise() {
        let s = two_step_schedule();
        let mut tape = Tape::new();
        let et = tape.constant(arr2(&[[123.456, -7.0]]));
        let e0_hat = tape.constant(arr2(&[[0.1234567890123, -0.9876543210987]]));
        let out = reverse_mu(&mut tape, et, 1, e0_hat, &s).unwrap();
        let a = tape.value(out);
        let b = tape.value(e0_hat);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // the explicit formula also collapses numerically at t = 1
        let (c_et, c_e0) = s.reverse_coeffs(1);
        assert_eq!(c_et, 0.0);
        assert_eq!(c_e0, 1.0);
    }

    #[test]
    fn reverse_fixed_point_combination() {
        let s = two_step_schedule();
        let (c_et, c_e0) = s.reverse_coeffs(2);
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[0.37]]));
        let out = reverse_mu(&mut tape, x, 2, x, &s).unwrap();
        assert!((tape.scalar(out) - 0.37 * (c_et + c_e0)).abs() < 1e-15);
    }

    #[test]
    fn reverse_plug_in_example() {
        // t=2 on s_seq (1, 0.9, 0.8): coeff on e_t = sqrt(0.8888.. * 0.1)/0.2
        let s = two_step_schedule();
        let mut tape = Tape::new();
        let et = tape.constant(arr2(&[[1.0]]));
        let e0 = tape.constant(arr2(&[[0.0]]));
        let out = reverse_mu(&mut tape, et, 2, e0, &s).unwrap();
        assert!((tape.scalar(out) - 1.49071).abs() < 1e-5);
    }

    fn toy_net(store: &mut ParamStore, d: usize, d_time: usize, t_max: usize) -> DenoiserNet {
        let mut rng = crate::rng::stream_rng(61, "diff-net");
        let h = d;
        DenoiserNet {
            time_emb: TimeEmbedding::Learned(store.add(
                "time_emb",
                crate::params::embedding_init(t_max + 1, d_time, &mut rng),
            )),
            fc1_w: store.add("fc1_w", linear_init(d + d_time, h, &mut rng)),
            fc1_b: store.add("fc1_b", Array2::zeros((1, h))),
            fc2_w: store.add("fc2_w", linear_init(h, d, &mut rng)),
            fc2_b: store.add("fc2_b", Array2::zeros((1, d))),
            activation_slope: 0.2,
        }
    }

    #[test]
    fn zero_weight_net_outputs_zero() {
        let s = two_step_schedule();
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, 3, 2, 2);
        for id in [net.fc1_w, net.fc2_w, net.fc1_b, net.fc2_b] {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let et = tape.constant(arr2(&[[5.0, -4.0, 3.0]]));
        let out = net.predict_e0(&mut tape, &store, et, &[2], &s).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictor_hand_computed_value() {
        // d=2, d'=1, H=2, identity-ish weights set by hand.
        let s = two_step_schedule();
        let mut store = ParamStore::new();
        let time_emb = store.add("h_t", arr2(&[[0.0], [0.5], [1.0]]));
        let fc1_w = store.add("w1", arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]]));
        let fc1_b = store.add("b1", arr2(&[[0.1, -0.1]]));
        let fc2_w = store.add("w2", arr2(&[[2.0, 0.0], [0.0, -1.0]]));
        let fc2_b = store.add("b2", arr2(&[[0.0, 0.25]]));
        let net = DenoiserNet {
            time_emb: TimeEmbedding::Learned(time_emb),
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            activation_slope: 0.2,
        };
        let mut tape = Tape::new();
        let et = tape.constant(arr2(&[[0.4, -0.6]]));
        let out = net.predict_e0(&mut tape, &store, et, &[1], &s).unwrap();
        // x = [0.4, -0.6, 0.5]
        // z1 = [0.4 + 0.5 + 0.1, -0.6 - 0.5 - 0.1] = [1.0, -1.2]
        // a1 = [1.0, -0.24]; out = [2.0, 0.24 + 0.25] = [2.0, 0.49]
        assert!((tape.value(out)[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((tape.value(out)[[0, 1]] - 0.49).abs() < 1e-12);
    }

    #[test]
    fn predictor_grads_match_finite_differences() {
        let s = NoiseSchedule::build(4, 0.9, 0.3, 1.0).unwrap();
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, 3, 2, 4);
        let et_val = arr2(&[[0.5, -0.2, 0.8], [-1.0, 0.3, 0.1]]);
        let t_vec = [2usize, 4];

        let loss_of = |st: &ParamStore| {
            let mut tape = Tape::new();
            let et = tape.constant(et_val.clone());
            let out = net.predict_e0(&mut tape, st, et, &t_vec, &s).unwrap();
            let l = tape.sq_norm(out);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let et = tape.constant(et_val.clone());
        let out = net.predict_e0(&mut tape, &store, et, &t_vec, &s).unwrap();
        let l = tape.sq_norm(out);
        tape.backward(l).unwrap();
        store.zero_grads();
        tape.accumulate_param_grads(&mut store);

        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let dim = store.value(id).dim();
            for i in 0..dim.0 {
                for j in 0..dim.1 {
                    let orig = store.value(id)[[i, j]];
                    let mut st = store.clone();
                    st.value_mut(id)[[i, j]] = orig + h;
                    let lp = loss_of(&st);
                    st.value_mut(id)[[i, j]] = orig - h;
                    let lm = loss_of(&st);
                    let numeric = (lp - lm) / (2.0 * h);
                    let analytic = store.grad(id)[[i, j]];
                    let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                    assert!(
                        (numeric - analytic).abs() / denom < 1e-4,
                        "param {} ({i},{j}): {analytic} vs {numeric}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn inference_single_step_is_predictor() {
        let s = two_step_schedule();
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, 3, 2, 2);
        let e_s = arr2(&[[0.3, 0.1, -0.2]]);
        let mut tape = Tape::new();
        let v = tape.constant(e_s.clone());
        let out =
            denoise_inference::<rand_chacha::ChaCha8Rng>(&mut tape, &store, v, &net, &s, 1, None)
                .unwrap();
        let mut tape2 = Tape::new();
        let v2 = tape2.constant(e_s);
        let direct = net.predict_e0(&mut tape2, &store, v2, &[1], &s).unwrap();
        assert_eq!(tape.value(out), tape2.value(direct));
    }

    #[test]
    fn inference_is_deterministic() {
        let s = NoiseSchedule::build(8, 0.9, 0.2, 0.5).unwrap();
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, 3, 2, 8);
        let e_s = arr2(&[[0.3, 0.1, -0.2], [1.0, -1.0, 0.5]]);
        let run = || {
            let mut tape = Tape::new();
            let v = tape.constant(e_s.clone());
            let out = denoise_inference::<rand_chacha::ChaCha8Rng>(
                &mut tape, &store, v, &net, &s, 8, None,
            )
            .unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_rejects_bad_steps() {
        let s = two_step_schedule();
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, 2, 1, 2);
        let mut tape = Tape::new();
        let v = tape.constant(Array2::zeros((1, 2)));
        assert!(denoise_inference::<rand_chacha::ChaCha8Rng>(
            &mut tape, &store, v, &net, &s, 0, None
        )
        .is_err());
        assert!(denoise_inference::<rand_chacha::ChaCha8Rng>(
            &mut tape, &store, v, &net, &s, 3, None
        )
        .is_err());
    }

    #[test]
    fn sinusoidal_table_shape_and_range() {
        let tab = sinusoidal_table(10, 6);
        assert_eq!(tab.dim(), (11, 6));
        assert!(tab.iter().all(|v| v.abs() <= 1.0));
    }
}
