//! Focal loss and self-balancing focal loss (SBFL) as graph operations.
//!
//! Per pixel, with prediction `p`, label `y`, focusing exponent `gamma` and
//! guard `eps`:
//!
//! ```text
//! S1 = -y       * (1 - p)^gamma * ln(p + eps)        foreground term
//! S0 = -(1 - y) *       p^gamma * ln(1 - p + eps)    background term
//! FL = alpha * S1 + (1 - alpha) * S0
//! ```
//!
//! SBFL replaces the fixed `alpha` by a per-batch weight
//! `beta = 0.4 * sum(S0) / (sum(S0) + sum(S1)) + 0.5`, which stays in
//! `[0.5, 0.9]` and is held constant for differentiation.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Axes, Graph, Real, Var};

/// Below this total the batch carries no usable loss and `beta` falls back to 0.5.
pub const DEGENERATE_TOTAL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Use the background/foreground factors exactly as typeset in the
    /// original SBFL formula (`1 - p` and `p` in place of the label masks).
    pub literal_eq2: bool,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            gamma: 2.0,
            epsilon: 1e-7,
            literal_eq2: false,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// One optimization step's loss decomposition.
///
/// `sum_bg` / `sum_fg` are the unweighted sums of the background and
/// foreground terms; `beta` is the foreground weight that was applied (the
/// fixed `alpha` for plain focal loss).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub sum_bg: f64,
    pub sum_fg: f64,
    pub beta: f64,
    pub total: f64,
    pub pixels: usize,
}

impl LossReport {
    pub fn weighted_fg(&self) -> f64 {
        self.beta * self.sum_fg
    }

    pub fn weighted_bg(&self) -> f64 {
        (1.0 - self.beta) * self.sum_bg
    }

    /// `|beta * sum_fg - (1 - beta) * sum_bg|`, the foreground/background gap.
    pub fn weighted_gap(&self) -> f64 {
        (self.weighted_fg() - self.weighted_bg()).abs()
    }

    /// Total recomputed from the recorded sums: `beta * mean(S1) + (1 - beta) * mean(S0)`.
    pub fn recomposed_total(&self) -> f64 {
        (self.weighted_fg() + self.weighted_bg()) / self.pixels as f64
    }
}

fn check_pair<T: Real>(g: &Graph<T>, y_true: Var, y_pred: Var) -> Result<()> {
    if g.shape(y_true) != g.shape(y_pred) {
        return Err(shape_err!(
            "loss: label shape {:?} differs from prediction shape {:?}",
            g.shape(y_true),
            g.shape(y_pred)
        ));
    }
    Ok(())
}

/// Per-pixel focal loss.
pub fn focal_loss_map<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    cfg: &FocalConfig,
) -> Result<Var> {
    check_pair(g, y_true, y_pred)?;
    let one_minus_p = g.rsub_scalar(1.0, y_pred);
    let one_minus_y = g.rsub_scalar(1.0, y_true);

    let focus_pos = g.pow_scalar(one_minus_p, cfg.gamma);
    let log_pos = g.log_shift(y_pred, cfg.epsilon)?;
    let pos = g.mul(y_true, focus_pos)?;
    let pos = g.mul(pos, log_pos)?;
    let pos = g.mul_scalar(pos, -cfg.alpha);

    let focus_neg = g.pow_scalar(y_pred, cfg.gamma);
    let log_neg = g.log_shift(one_minus_p, cfg.epsilon)?;
    let neg = g.mul(one_minus_y, focus_neg)?;
    let neg = g.mul(neg, log_neg)?;
    let neg = g.mul_scalar(neg, -(1.0 - cfg.alpha));

    g.add(pos, neg)
}

/// Mean focal loss over all pixels.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    cfg: &FocalConfig,
) -> Result<Var> {
    let map = focal_loss_map(g, y_true, y_pred, cfg)?;
    g.mean(map, Axes::All)
}

/// Focal loss plus a report whose sums are the unweighted background and
/// foreground terms and whose `beta` is the fixed `alpha`.
pub fn focal_loss_report<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    cfg: &FocalConfig,
) -> Result<(Var, LossReport)> {
    let masked = FocalConfig {
        literal_eq2: false,
        ..*cfg
    };
    let (s0, s1) = sbfl_components(g, y_true, y_pred, &masked)?;
    let total = focal_loss(g, y_true, y_pred, cfg)?;
    let report = LossReport {
        step: 0,
        sum_bg: g.value(s0).sum_f64(),
        sum_fg: g.value(s1).sum_f64(),
        beta: cfg.alpha,
        total: g.value(total).item().as_f64(),
        pixels: g.value(y_pred).numel(),
    };
    Ok((total, report))
}

/// Per-pixel background (`S0`) and foreground (`S1`) terms without class weight.
pub fn sbfl_components<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    cfg: &FocalConfig,
) -> Result<(Var, Var)> {
    check_pair(g, y_true, y_pred)?;
    let one_minus_p = g.rsub_scalar(1.0, y_pred);
    let (fg_mask, bg_mask) = if cfg.literal_eq2 {
        (y_pred, one_minus_p)
    } else {
        (y_true, g.rsub_scalar(1.0, y_true))
    };

    let focus = g.pow_scalar(one_minus_p, cfg.gamma);
    let log = g.log_shift(y_pred, cfg.epsilon)?;
    let s1 = g.mul(fg_mask, focus)?;
    let s1 = g.mul(s1, log)?;
    let s1 = g.mul_scalar(s1, -1.0);

    let focus = g.pow_scalar(y_pred, cfg.gamma);
    let log = g.log_shift(one_minus_p, cfg.epsilon)?;
    let s0 = g.mul(bg_mask, focus)?;
    let s0 = g.mul(s0, log)?;
    let s0 = g.mul_scalar(s0, -1.0);
    Ok((s0, s1))
}

/// Foreground weight from the background and foreground loss sums.
pub fn balance_beta(sum_bg: f64, sum_fg: f64) -> Result<f64> {
    if !(sum_bg >= 0.0 && sum_fg >= 0.0) {
        return Err(arg_err!(
            "loss sums must be non-negative, got ({sum_bg}, {sum_fg})"
        ));
    }
    let total = sum_bg + sum_fg;
    if total < DEGENERATE_TOTAL {
        return Ok(0.5);
    }
    Ok(0.4 * (sum_bg / total) + 0.5)
}

fn weighted<T: Real>(g: &mut Graph<T>, s0: Var, s1: Var, beta: f64) -> Result<Var> {
    let fg = g.mul_scalar(s1, beta);
    let bg = g.mul_scalar(s0, 1.0 - beta);
    g.add(fg, bg)
}

/// Per-pixel SBFL for a given (constant) `beta`.
pub fn sbfl_map_with_beta<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    cfg: &FocalConfig,
    beta: f64,
) -> Result<Var> {
    let (s0, s1) = sbfl_components(g, y_true, y_pred, cfg)?;
    weighted(g, s0, s1, beta)
}

/// Mean SBFL for a given (constant) `beta`.
pub fn sbfl_with_beta<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    cfg: &FocalConfig,
    beta: f64,
) -> Result<Var> {
    let map = sbfl_map_with_beta(g, y_true, y_pred, cfg, beta)?;
    g.mean(map, Axes::All)
}

/// Mean SBFL with `beta` computed from this batch, and its report.
pub fn sbfl<T: Real>(
    g: &mut Graph<T>,
    y_true: Var,
    y_pred: Var,
    cfg: &FocalConfig,
) -> Result<(Var, LossReport)> {
    let (s0, s1) = sbfl_components(g, y_true, y_pred, cfg)?;
    let sum_bg = g.value(s0).sum_f64();
    let sum_fg = g.value(s1).sum_f64();
    let beta = balance_beta(sum_bg.max(0.0), sum_fg.max(0.0))?;
    let map = weighted(g, s0, s1, beta)?;
    let total = g.mean(map, Axes::All)?;
    let report = LossReport {
        step: 0,
        sum_bg,
        sum_fg,
        beta,
        total: g.value(total).item().as_f64(),
        pixels: g.value(y_pred).numel(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval_map(
        f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
        y: &[f64],
        p: &[f64],
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let t = g.constant(Tensor::from_f64(&[y.len()], y).unwrap());
        let q = g.constant(Tensor::from_f64(&[p.len()], p).unwrap());
        let out = f(&mut g, t, q).unwrap();
        g.value(out).data().to_vec()
    }

    fn no_eps() -> FocalConfig {
        FocalConfig {
            epsilon: 0.0,
            ..FocalConfig::default()
        }
    }

    #[test]
    fn focal_perfect_predictions_are_zero() {
        let cfg = FocalConfig::default();
        let v = eval_map(
            |g, t, p| focal_loss_map(g, t, p, &cfg),
            &[1.0, 0.0],
            &[1.0, 0.0],
        );
        assert!(v.iter().all(|x| x.abs() < 1e-12), "{v:?}");
    }

    #[test]
    fn focal_half_confidence_positive() {
        let cfg = no_eps();
        let v = eval_map(|g, t, p| focal_loss_map(g, t, p, &cfg), &[1.0], &[0.5]);
        let expect = -0.9 * 0.25 * 0.5f64.ln();
        assert!((v[0] - expect).abs() < 1e-12);
        assert!((v[0] - 0.15596).abs() < 1e-5);
    }

    #[test]
    fn background_term_values() {
        let cfg = no_eps();
        let s0 = eval_map(
            |g, t, p| Ok(sbfl_components(g, t, p, &cfg)?.0),
            &[0.0, 1.0],
            &[0.5, 0.3],
        );
        assert!((s0[0] - 0.173_286_795).abs() < 1e-8);
        assert_eq!(s0[1], 0.0);
    }

    #[test]
    fn beta_limits() {
        assert_eq!(balance_beta(3.0, 0.0).unwrap(), 0.9);
        assert_eq!(balance_beta(0.0, 3.0).unwrap(), 0.5);
        assert_eq!(balance_beta(2.0, 2.0).unwrap(), 0.7);
        assert_eq!(balance_beta(0.0, 0.0).unwrap(), 0.5);
        assert!(balance_beta(-1.0, 1.0).is_err());
        assert!(balance_beta(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn all_background_batch() {
        let cfg = no_eps();
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let p = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let (total, report) = sbfl(&mut g, t, p, &cfg).unwrap();
        assert_eq!(report.beta, 0.9);
        assert!((g.value(total).item() - 0.1 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((report.recomposed_total() - report.total).abs() < 1e-15);
    }

    #[test]
    fn perfect_sbfl_is_near_zero() {
        let cfg = FocalConfig::default();
        let mut g = Graph::<f64>::new();
        let y = Tensor::from_f64(&[4], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = g.constant(y.clone());
        let p = g.constant(y);
        let (total, _) = sbfl(&mut g, t, p, &cfg).unwrap();
        assert!(g.value(total).item().abs() < 10.0 * cfg.epsilon);
    }

    #[test]
    fn literal_form_ignores_labels() {
        let cfg = FocalConfig {
            literal_eq2: true,
            ..FocalConfig::default()
        };
        let a = eval_map(
            |g, t, p| Ok(sbfl_components(g, t, p, &cfg)?.1),
            &[0.0, 0.0],
            &[0.3, 0.6],
        );
        let b = eval_map(
            |g, t, p| Ok(sbfl_components(g, t, p, &cfg)?.1),
            &[1.0, 1.0],
            &[0.3, 0.6],
        );
        assert_eq!(a, b);
        // Foreground term is nonzero on background pixels in this form.
        assert!(a.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(&[4]));
        let p = g.constant(Tensor::full(&[2, 2], 0.5));
        assert!(matches!(
            focal_loss(&mut g, t, p, &FocalConfig::default()),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn config_ranges() {
        assert!(FocalConfig::default().validate().is_ok());
        for bad in [
            FocalConfig {
                alpha: 1.0,
                ..FocalConfig::default()
            },
            FocalConfig {
                gamma: -1.0,
                ..FocalConfig::default()
            },
            FocalConfig {
                epsilon: 0.0,
                ..FocalConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
