//! Gradient-level decoupling of noisy pseudo-label depth supervision.
//!
//! The training loss is split into three streams: depth loss on pseudo-labels
//! (`ud`), depth loss on ground truth (`sd`) and everything else (`o`). The
//! reliable streams form the principal gradient `g_p = g_sd + g_o`; whenever
//! `g_ud` points against `g_p` its conflicting component is removed before the
//! update.
//!
//! [`run_toy_experiment`] trains a small linear depth regressor with the three
//! streams so that conflict statistics and the effect of the projection can be
//! measured.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::sample_laplace;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("cosine is undefined for a zero gradient")]
    ZeroGradient,
    #[error("principal gradient is zero")]
    ZeroPrincipalGradient,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("momentum {0} outside [0, 1]")]
    InvalidMomentum(f64),
    #[error("invalid harness config: {0}")]
    InvalidConfig(String),
}

/// Which loss a gradient came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientStream {
    /// Depth loss on pseudo-labels.
    Ud,
    /// Depth loss on ground truth.
    Sd,
    /// All other supervision.
    O,
    /// `g_sd + g_o`.
    Principal,
}

/// A flat parameter-space gradient tagged with its stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub stream: GradientStream,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, stream: GradientStream) -> Self {
        Self { values, stream }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), GradError> {
    if a.len() != b.len() {
        return Err(GradError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Laplacian aleatoric depth loss `sqrt(2)/sigma * |d_gt - d_pred| + ln(sigma)`
/// with its partials `(loss, dL/dd_pred, dL/dsigma)`. The subgradient in
/// `d_pred` is 0 at zero residual.
pub fn laplacian_depth_loss(d_pred: f64, sigma: f64, d_gt: f64) -> Result<(f64, f64, f64), GradError> {
    if !(sigma > 0.0) {
        return Err(GradError::NonPositiveSigma(sigma));
    }
    let residual = d_gt - d_pred;
    let abs = residual.abs();
    let sqrt2 = std::f64::consts::SQRT_2;
    let loss = sqrt2 / sigma * abs + sigma.ln();
    let sign = if residual > 0.0 {
        1.0
    } else if residual < 0.0 {
        -1.0
    } else {
        0.0
    };
    let d_pred_grad = -sqrt2 / sigma * sign;
    let d_sigma_grad = -sqrt2 * abs / (sigma * sigma) + 1.0 / sigma;
    Ok((loss, d_pred_grad, d_sigma_grad))
}

pub fn cosine(a: &GradientVector, b: &GradientVector) -> Result<f64, GradError> {
    check_dims(&a.values, &b.values)?;
    cosine_slices(&a.values, &b.values)
}

fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, GradError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(GradError::ZeroGradient);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Removes the component of `g_ud` along `g_p` when the two conflict
/// (`cos(g_ud, g_p) < 0`); otherwise returns `g_ud` unchanged.
pub fn project_depth_gradient(
    g_ud: &GradientVector,
    g_p: &GradientVector,
) -> Result<GradientVector, GradError> {
    check_dims(&g_ud.values, &g_p.values)?;
    let p = &g_p.values;
    let pp = dot(p, p);
    if pp == 0.0 {
        return Err(GradError::ZeroPrincipalGradient);
    }
    let mut out = g_ud.values.clone();
    if dot(&out, p) >= 0.0 {
        return Ok(GradientVector::new(out, g_ud.stream));
    }
    // Second pass cleans up cancellation error when g_ud is nearly
    // anti-parallel to g_p.
    for _ in 0..2 {
        let d = dot(&out, p);
        if d >= 0.0 {
            break;
        }
        let k = d / pp;
        out.iter_mut().zip(p).for_each(|(o, pi)| *o -= k * pi);
    }
    Ok(GradientVector::new(out, g_ud.stream))
}

/// `g_sd + g_o + project(g_ud, g_sd + g_o)`. A zero principal gradient passes
/// `g_ud` through unprojected.
pub fn combine_step_gradient(
    g_sd: &GradientVector,
    g_o: &GradientVector,
    g_ud: &GradientVector,
) -> Result<GradientVector, GradError> {
    check_dims(&g_sd.values, &g_o.values)?;
    check_dims(&g_sd.values, &g_ud.values)?;
    let principal = GradientVector::new(
        g_sd.values.iter().zip(&g_o.values).map(|(a, b)| a + b).collect(),
        GradientStream::Principal,
    );
    let ud = match project_depth_gradient(g_ud, &principal) {
        Ok(v) => v,
        Err(GradError::ZeroPrincipalGradient) => g_ud.clone(),
        Err(e) => return Err(e),
    };
    Ok(GradientVector::new(
        principal.values.iter().zip(&ud.values).map(|(a, b)| a + b).collect(),
        GradientStream::Principal,
    ))
}

/// `momentum * teacher + (1 - momentum) * student`.
pub fn ema_update(teacher: &[f64], student: &[f64], momentum: f64) -> Result<Vec<f64>, GradError> {
    check_dims(teacher, student)?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(GradError::InvalidMomentum(momentum));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(t, s)| momentum * t + (1.0 - momentum) * s)
        .collect())
}

/// Toy-harness parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Parameter count (one bias plus `dim - 1` feature weights).
    pub dim: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_aux: usize,
    pub lr: f64,
    pub steps: usize,
    /// Weight on the pseudo-label depth loss.
    pub alpha: f64,
    /// Laplace scale of pseudo-label depth noise at zero depth, meters.
    pub pseudo_noise_base: f64,
    /// Growth of the pseudo-label noise scale per meter of true depth.
    pub pseudo_noise_per_meter: f64,
    pub projection: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            n_labeled: 16,
            n_unlabeled: 64,
            n_aux: 16,
            lr: 1e-2,
            steps: 500,
            alpha: 1.0,
            pseudo_noise_base: 2.0,
            pseudo_noise_per_meter: 0.1,
            projection: true,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), GradError> {
        let bad = |m: &str| Err(GradError::InvalidConfig(m.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.n_labeled == 0 || self.n_unlabeled == 0 || self.n_aux == 0 {
            return bad("sample counts must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.pseudo_noise_base >= 0.0) || !(self.pseudo_noise_per_meter >= 0.0) {
            return bad("alpha and noise scales must be non-negative");
        }
        Ok(())
    }
}

/// Linear regressor `y = theta . phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub params: Vec<f64>,
}

impl ToyModel {
    pub fn predict(&self, features: &[f64]) -> f64 {
        dot(&self.params, features)
    }
}

/// A regression set: feature rows and targets.
#[derive(Debug, Clone)]
struct Samples {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Samples {
    /// Mean of `0.5 * residual^2` and its gradient.
    fn loss_and_grad(&self, model: &ToyModel) -> (f64, Vec<f64>) {
        let n = self.targets.len() as f64;
        let mut grad = vec![0.0; model.params.len()];
        let mut loss = 0.0;
        for (phi, y) in self.features.iter().zip(&self.targets) {
            let r = model.predict(phi) - y;
            loss += 0.5 * r * r;
            grad.iter_mut().zip(phi).for_each(|(g, f)| *g += r * f);
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

/// Per-step statistics. Cosines are NaN when a gradient is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub cos_ud_p: f64,
    pub cos_ud_sd: f64,
    pub cos_ud_o: f64,
    pub cos_sd_o: f64,
    pub loss_sd: f64,
    pub loss_ud: f64,
    pub loss_o: f64,
    /// `dot(applied ud component, g_p) / (|ud| |g_p|)`; 0 when either is zero.
    pub applied_ud_cos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictReport {
    pub seed: u64,
    pub projection: bool,
    pub steps: Vec<StepRecord>,
    pub final_loss_sd: f64,
    pub final_loss_ud: f64,
    pub final_loss_o: f64,
}

impl ConflictReport {
    /// Final `sd + o` loss.
    pub fn final_reliable_loss(&self) -> f64 {
        self.final_loss_sd + self.final_loss_o
    }
}

fn uniform_features(rng: &mut ChaCha8Rng, dim: usize, spread: f64) -> Vec<f64> {
    std::iter::once(1.0)
        .chain((1..dim).map(|_| rng.random_range(-spread..spread)))
        .collect()
}

/// Trains a [`ToyModel`] depth regressor from zero by full-batch gradient
/// descent on three streams: `sd` (clean depth labels), `ud` (depth
/// pseudo-labels corrupted with distance-growing Laplace noise, weighted by
/// `alpha`) and `o` (a clean auxiliary target on differently distributed
/// features sharing the same parameters).
pub fn run_toy_experiment(cfg: &ToyConfig, seed: u64) -> Result<ConflictReport, GradError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = cfg.dim;

    // True depth = 30 m + bounded feature contribution, so targets stay positive.
    let weight_bound = 20.0 / (dim - 1) as f64;
    let truth: Vec<f64> = std::iter::once(30.0)
        .chain((1..dim).map(|_| rng.random_range(-weight_bound..weight_bound)))
        .collect();
    let true_model = ToyModel { params: truth };

    let make_set = |n: usize, spread: f64, noisy: bool, rng: &mut ChaCha8Rng| {
        let features: Vec<Vec<f64>> = (0..n).map(|_| uniform_features(rng, dim, spread)).collect();
        let targets = features
            .iter()
            .map(|phi| {
                let y = true_model.predict(phi);
                if noisy {
                    let scale = cfg.pseudo_noise_base + cfg.pseudo_noise_per_meter * y.abs();
                    y + sample_laplace(rng, scale)
                } else {
                    y
                }
            })
            .collect();
        Samples { features, targets }
    };
    let labeled = make_set(cfg.n_labeled, 1.0, false, &mut rng);
    let unlabeled = make_set(cfg.n_unlabeled, 1.0, true, &mut rng);
    let aux = make_set(cfg.n_aux, 1.5, false, &mut rng);

    let mut model = ToyModel { params: vec![0.0; dim] };
    let cos_or_nan = |a: &[f64], b: &[f64]| cosine_slices(a, b).unwrap_or(f64::NAN);
    let mut steps = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (loss_sd, g_sd) = labeled.loss_and_grad(&model);
        let (raw_ud, mut g_ud) = unlabeled.loss_and_grad(&model);
        let (loss_o, g_o) = aux.loss_and_grad(&model);
        let loss_ud = cfg.alpha * raw_ud;
        g_ud.iter_mut().for_each(|g| *g *= cfg.alpha);

        let g_p: Vec<f64> = g_sd.iter().zip(&g_o).map(|(a, b)| a + b).collect();
        let ud_vec = GradientVector::new(g_ud, GradientStream::Ud);
        let p_vec = GradientVector::new(g_p, GradientStream::Principal);

        let applied_ud = if cfg.projection {
            match project_depth_gradient(&ud_vec, &p_vec) {
                Ok(v) => v.values,
                Err(GradError::ZeroPrincipalGradient) => ud_vec.values.clone(),
                Err(e) => return Err(e),
            }
        } else {
            ud_vec.values.clone()
        };

        steps.push(StepRecord {
            step,
            cos_ud_p: cos_or_nan(&ud_vec.values, &p_vec.values),
            cos_ud_sd: cos_or_nan(&ud_vec.values, &g_sd),
            cos_ud_o: cos_or_nan(&ud_vec.values, &g_o),
            cos_sd_o: cos_or_nan(&g_sd, &g_o),
            loss_sd,
            loss_ud,
            loss_o,
            applied_ud_cos: cosine_slices(&applied_ud, &p_vec.values).unwrap_or(0.0),
        });

        for ((theta, p), u) in model.params.iter_mut().zip(&p_vec.values).zip(&applied_ud) {
            *theta -= cfg.lr * (p + u);
        }
    }

    let (final_loss_sd, _) = labeled.loss_and_grad(&model);
    let (final_raw_ud, _) = unlabeled.loss_and_grad(&model);
    let (final_loss_o, _) = aux.loss_and_grad(&model);
    Ok(ConflictReport {
        seed,
        projection: cfg.projection,
        steps,
        final_loss_sd,
        final_loss_ud: cfg.alpha * final_raw_ud,
        final_loss_o,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use GradientStream::*;

    fn g(v: &[f64], s: GradientStream) -> GradientVector {
        GradientVector::new(v.to_vec(), s)
    }

    #[test]
    fn depth_loss_values() {
        let (l, dp, _) = laplacian_depth_loss(10.0, 1.0, 10.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(dp, 0.0);
        let (l, _, _) = laplacian_depth_loss(9.0, 1.0, 10.0).unwrap();
        assert!((l - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!(laplacian_depth_loss(1.0, 0.0, 1.0), Err(GradError::NonPositiveSigma(0.0)));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&g(&[1.0, 2.0], Ud), &g(&[1.0, 2.0], Sd)).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&g(&[1.0, 2.0], Ud), &g(&[-1.0, -2.0], Sd)).unwrap() + 1.0).abs() < 1e-15);
        let c = cosine(&g(&[1.0, 0.0], Ud), &g(&[1.0, 1.0], Sd)).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&g(&[0.0, 0.0], Ud), &g(&[1.0, 1.0], Sd)), Err(GradError::ZeroGradient));
    }

    #[test]
    fn projection_cases() {
        let p = g(&[0.0, 1.0], Principal);
        assert_eq!(project_depth_gradient(&g(&[1.0, 1.0], Ud), &p).unwrap().values, vec![1.0, 1.0]);
        let out = project_depth_gradient(&g(&[-1.0, 0.0], Ud), &g(&[1.0, 0.0], Principal)).unwrap();
        assert_eq!(out.values, vec![0.0, 0.0]);
        assert_eq!(project_depth_gradient(&g(&[1.0, -1.0], Ud), &p).unwrap().values, vec![1.0, 0.0]);
        assert_eq!(
            project_depth_gradient(&g(&[1.0, -1.0], Ud), &g(&[0.0, 0.0], Principal)),
            Err(GradError::ZeroPrincipalGradient)
        );
        // cos = 0 keeps g_ud.
        assert_eq!(project_depth_gradient(&g(&[1.0, 0.0], Ud), &p).unwrap().values, vec![1.0, 0.0]);
    }

    #[test]
    fn combine_cases() {
        let out = combine_step_gradient(&g(&[0.0, 1.0], Sd), &g(&[0.0, 0.0], O), &g(&[1.0, -1.0], Ud)).unwrap();
        assert_eq!(out.values, vec![1.0, 1.0]);
        // Orthogonal: plain sum.
        let out = combine_step_gradient(&g(&[1.0, 0.0], Sd), &g(&[1.0, 0.0], O), &g(&[0.0, 3.0], Ud)).unwrap();
        assert_eq!(out.values, vec![2.0, 3.0]);
        // Fully opposed: only g_p survives.
        let out = combine_step_gradient(&g(&[1.0, 2.0], Sd), &g(&[0.5, 0.0], O), &g(&[-1.5, -2.0], Ud)).unwrap();
        assert_eq!(out.values, vec![1.5, 2.0]);
        // Zero principal gradient passes g_ud through.
        let out = combine_step_gradient(&g(&[1.0, 0.0], Sd), &g(&[-1.0, 0.0], O), &g(&[-4.0, 1.0], Ud)).unwrap();
        assert_eq!(out.values, vec![-4.0, 1.0]);
    }

    #[test]
    fn ema_cases() {
        let t = [1.0, 1.0];
        let s = [0.0, 0.0];
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t.to_vec());
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s.to_vec());
        let out = ema_update(&t, &s, 0.999).unwrap();
        assert!(out.iter().all(|x| (x - 0.999).abs() < 1e-15));
        assert_eq!(ema_update(&t, &[0.0], 0.5), Err(GradError::DimensionMismatch(2, 1)));
        assert!(ema_update(&t, &s, 1.5).is_err());
    }

    #[test]
    fn toy_run_is_deterministic() {
        let cfg = ToyConfig { steps: 50, ..Default::default() };
        assert_eq!(run_toy_experiment(&cfg, 3).unwrap(), run_toy_experiment(&cfg, 3).unwrap());
        assert_ne!(run_toy_experiment(&cfg, 3).unwrap(), run_toy_experiment(&cfg, 4).unwrap());
    }

    #[test]
    fn toy_config_validation() {
        assert!(ToyConfig { dim: 1, ..Default::default() }.validate().is_err());
        assert!(ToyConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
