//! Input-space update directions and the threshold transform.
//!
//! Given a masked image, the classifier's own loss gradient supplies an
//! update `dx = -gamma * grad_x L(M(x), y)`; a quasi-Newton direction is
//! available as a comparator. The threshold transform restricts the update
//! to the masked region, min-max normalizes it there, and optionally
//! binarizes it with Otsu's criterion. `compose_fill` then overlays the
//! thresholded update on the masked image.
//!
//! Everything here is stateless given a model reference; update
//! computations for different masks can run in parallel against one
//! immutable model.

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum UpdateOrder {
    First,
    Bfgs { iters: usize },
}

impl UpdateOrder {
    pub fn label(&self) -> &'static str {
        match self {
            UpdateOrder::First => "first",
            UpdateOrder::Bfgs { .. } => "bfgs",
        }
    }
}

/// An input-space update and its provenance. The thresholded field is
/// filled in by [`threshold_t`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct UpdateField {
    pub raw: Tensor,
    pub order: UpdateOrder,
    pub gamma: f32,
    pub mask: Option<Mask>,
    pub thresholded: Option<Tensor>,
}

/// First-order update `dx = -gamma * grad_x L(masked_image, label)`.
///
/// The scale is folded into the backward seed, so doubling `gamma` doubles
/// the result bit-for-bit.
pub fn first_order_update(
    model: &Model,
    masked_image: &Tensor,
    label: usize,
    gamma: f32,
) -> Result<UpdateField> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Range(format!(
            "step scale gamma must be positive and finite, got {gamma}"
        )));
    }
    let fwd = model.graph().forward(model.params(), masked_image, Some(label))?;
    let grads = model
        .graph()
        .backward_seeded(&fwd, model.params(), -gamma, true, false)?;
    Ok(UpdateField {
        raw: grads.input.expect("input gradient requested"),
        order: UpdateOrder::First,
        gamma,
        mask: None,
        thresholded: None,
    })
}

// ---------------------------------------------------------------------------
// BFGS.
// ---------------------------------------------------------------------------

/// Dense inverse-Hessian approximation `H_t`, kept symmetric positive
/// definite by resetting to the identity whenever the curvature condition
/// `s . y > 0` fails.
#[derive(Debug, Clone)]
pub struct BfgsState {
    h: Vec<f64>,
    n: usize,
    pub iteration: usize,
}

impl BfgsState {
    pub fn identity(n: usize) -> BfgsState {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        BfgsState { h, n, iteration: 0 }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Row-major `H_t`.
    pub fn inverse_hessian(&self) -> &[f64] {
        &self.h
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            self.h[i * self.n + i] = 1.0;
        }
    }

    /// Quasi-Newton direction `p = -H g`; descent whenever `g != 0`.
    pub fn direction(&self, gradient: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut p = vec![0.0; n];
        for i in 0..n {
            let row = &self.h[i * n..][..n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * gradient[j];
            }
            p[i] = -acc;
        }
        p
    }

    /// Apply the BFGS inverse update for a step `s` and gradient change
    /// `y`. Returns false (after resetting to the identity) when the
    /// curvature condition fails; that is recovery, not an error.
    pub fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        let n = self.n;
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(sy > 1e-12 * s_norm.max(1e-300) * y_norm.max(1e-300)) || sy == 0.0 {
            self.reset();
            self.iteration += 1;
            return false;
        }
        let rho = 1.0 / sy;
        // u = H y (H symmetric).
        let mut u = vec![0.0; n];
        for i in 0..n {
            let row = &self.h[i * n..][..n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * y[j];
            }
            u[i] = acc;
        }
        let beta: f64 = y.iter().zip(&u).map(|(a, b)| a * b).sum();
        let coeff = rho * rho * beta + rho;
        for i in 0..n {
            let si = s[i];
            let ui = u[i];
            let row = &mut self.h[i * n..][..n];
            for j in 0..n {
                row[j] += coeff * si * s[j] - rho * (ui * s[j] + si * u[j]);
            }
        }
        self.iteration += 1;
        true
    }
}

pub struct BfgsOutcome {
    /// `p_t` at the final iterate.
    pub direction: Vec<f64>,
    /// Final iterate `x_t`.
    pub point: Vec<f64>,
    /// Gradient at the final iterate.
    pub gradient: Vec<f64>,
    /// Objective at the final iterate.
    pub value: f64,
    pub state: BfgsState,
    /// Curvature-condition resets that occurred.
    pub resets: usize,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: u32 = 40;

/// Run `iters` BFGS iterations with backtracking Armijo line search from
/// `x0`, returning the direction computed at the final iterate.
pub fn bfgs_minimize<F>(mut objective: F, x0: &[f64], iters: usize) -> Result<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if iters == 0 {
        return Err(Error::Config("bfgs iteration count must be >= 1".into()));
    }
    let n = x0.len();
    let mut state = BfgsState::identity(n);
    let mut resets = 0usize;
    let mut x = x0.to_vec();
    let (mut fx, mut g) = objective(&x)?;
    check_finite(fx, &g)?;
    let mut direction = Vec::new();
    for t in 0..iters {
        direction = state.direction(&g);
        if t == iters - 1 {
            break;
        }
        // Backtracking Armijo from a unit step.
        let slope: f64 = g.iter().zip(&direction).map(|(a, b)| a * b).sum();
        let mut alpha = 1.0f64;
        let mut stepped = false;
        let mut next = (0.0, Vec::new(), Vec::new());
        for _ in 0..MAX_HALVINGS {
            let candidate: Vec<f64> = x
                .iter()
                .zip(&direction)
                .map(|(xi, pi)| xi + alpha * pi)
                .collect();
            let (fc, gc) = objective(&candidate)?;
            check_finite(fc, &gc)?;
            if fc <= fx + ARMIJO_C1 * alpha * slope {
                next = (fc, candidate, gc);
                stepped = true;
                break;
            }
            alpha *= 0.5;
        }
        if !stepped {
            // No acceptable step: restart curvature information and keep
            // probing from the same point.
            state.reset();
            resets += 1;
            continue;
        }
        let (fc, xc, gc) = next;
        let s: Vec<f64> = xc.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        if !state.update(&s, &y) {
            resets += 1;
        }
        x = xc;
        fx = fc;
        g = gc;
    }
    Ok(BfgsOutcome {
        direction,
        point: x,
        gradient: g,
        value: fx,
        state,
        resets,
    })
}

fn check_finite(value: f64, gradient: &[f64]) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective value {value} not finite")));
    }
    if gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gradient not finite".into()));
    }
    Ok(())
}

/// BFGS comparator for the input-update direction: run from the masked
/// image and return the final direction `p_t` as the raw update.
pub fn bfgs_direction(
    model: &Model,
    masked_image: &Tensor,
    label: usize,
    iters: usize,
) -> Result<UpdateField> {
    let shape = masked_image.shape().to_vec();
    let x0: Vec<f64> = masked_image.data().iter().map(|&v| v as f64).collect();
    let outcome = bfgs_minimize(
        |x: &[f64]| {
            let image = Tensor::new(shape.clone(), x.iter().map(|&v| v as f32).collect())?;
            let (loss, grad) = model.loss_and_input_gradient(&image, label)?;
            Ok((loss as f64, grad.data().iter().map(|&v| v as f64).collect()))
        },
        &x0,
        iters,
    )?;
    let raw = Tensor::new(
        shape,
        outcome.direction.iter().map(|&v| v as f32).collect(),
    )?;
    Ok(UpdateField {
        raw,
        order: UpdateOrder::Bfgs { iters },
        gamma: 1.0,
        mask: None,
        thresholded: None,
    })
}

// ---------------------------------------------------------------------------
// Threshold transform.
// ---------------------------------------------------------------------------

/// Min-max normalize over masked positions only, mapping them onto [0,1];
/// unmasked positions come out exactly 0. All-equal masked values collapse
/// to zeros rather than dividing by zero.
pub fn normalize_update(masked_update: &Tensor, mask: &Mask) -> Result<Tensor> {
    let shape = masked_update.shape();
    let plane = mask.height() * mask.width();
    if shape.is_empty() || masked_update.len() % plane != 0 {
        return Err(Error::Dimension {
            context: "normalize_update",
            expected: format!("multiple of {plane} elements"),
            found: format!("{shape:?}"),
        });
    }
    let field = mask.field();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (i, &v) in masked_update.data().iter().enumerate() {
        if field[i % plane] == 0 {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let data = masked_update
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if field[i % plane] != 0 || span <= 0.0 {
                0.0
            } else {
                (v - lo) / span
            }
        })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Otsu threshold over a 256-bin histogram: the bin index maximizing
/// between-class variance, computed in exact integer arithmetic (ties fall
/// to the smallest bin). `None` when fewer than two bins are occupied.
pub fn otsu_threshold_bin(values: &[f32]) -> Option<usize> {
    let mut hist = [0u64; 256];
    for &v in values {
        let bin = (v * 255.0).round().clamp(0.0, 255.0) as usize;
        hist[bin] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: u64 = hist.iter().sum();
    let total_moment: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    // variance(t) proportional to (S0*w1 - S1*w0)^2 / (w0*w1); compare the
    // fractions exactly in integers.
    let mut best: Option<(u128, u128, usize)> = None; // (num, den, t)
    let mut w0: u64 = 0;
    let mut s0: u64 = 0;
    for t in 0..256 {
        // Classes split as bins < t vs bins >= t.
        let w1 = total - w0;
        if w0 > 0 && w1 > 0 {
            let s1 = total_moment - s0;
            let cross = (s0 as i128) * (w1 as i128) - (s1 as i128) * (w0 as i128);
            let num = (cross * cross) as u128;
            let den = (w0 as u128) * (w1 as u128);
            let better = match &best {
                None => true,
                Some((bn, bd, _)) => num * bd > bn * den,
            };
            if better {
                best = Some((num, den, t));
            }
        }
        w0 += hist[t];
        s0 += t as u64 * hist[t];
    }
    best.map(|(_, _, t)| t)
}

/// Binarize normalized values over the masked region with the Otsu
/// threshold; unmasked positions stay 0. Degenerate inputs (fewer than two
/// occupied bins) come out all zero.
pub fn otsu_binarize(values: &Tensor, mask: &Mask) -> Result<Tensor> {
    let plane = mask.height() * mask.width();
    if values.len() % plane != 0 {
        return Err(Error::Dimension {
            context: "otsu_binarize",
            expected: format!("multiple of {plane} elements"),
            found: format!("{:?}", values.shape()),
        });
    }
    if let Some((i, &v)) = values
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::Range(format!(
            "otsu_binarize expects normalized values in [0,1]; found {v} at index {i}"
        )));
    }
    let field = mask.field();
    let masked_values: Vec<f32> = values
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| field[i % plane] == 0)
        .map(|(_, &v)| v)
        .collect();
    let out = match otsu_threshold_bin(&masked_values) {
        None => vec![0.0; values.len()],
        Some(t) => values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let bin = (v * 255.0).round().clamp(0.0, 255.0) as usize;
                if field[i % plane] == 0 && bin >= t {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    };
    Ok(Tensor::from_parts(values.shape().to_vec(), out))
}

/// The threshold transform: complement-mask the raw update, normalize over
/// the masked region, and optionally Otsu-binarize. The result (and the
/// source mask) are recorded on the field.
pub fn threshold_t(update: &mut UpdateField, mask: &Mask, binarize: bool) -> Result<Tensor> {
    let retained = mask.complement().apply(&update.raw)?;
    let normalized = normalize_update(&retained, mask)?;
    let out = if binarize {
        otsu_binarize(&normalized, mask)?
    } else {
        normalized
    };
    update.mask = Some(mask.clone());
    update.thresholded = Some(out.clone());
    Ok(out)
}

/// Overlay a thresholded update on the masked image: `M(x) + T(dx)`.
/// Supports must be disjoint; both inputs live in [0,1], so the output
/// does too.
pub fn compose_fill(masked_image: &Tensor, thresholded: &Tensor) -> Result<Tensor> {
    masked_image.check_same_shape(thresholded, "compose_fill")?;
    for (i, (&m, &t)) in masked_image
        .data()
        .iter()
        .zip(thresholded.data())
        .enumerate()
    {
        if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&t) {
            return Err(Error::Range(format!(
                "compose_fill expects [0,1] inputs; found ({m}, {t}) at index {i}"
            )));
        }
        if m != 0.0 && t != 0.0 {
            return Err(Error::Contract(format!(
                "thresholded update overlaps unmasked pixel {i} (image {m}, update {t})"
            )));
        }
    }
    masked_image.add(thresholded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_uniform_mask, Mask};
    use crate::models::{Arch, Model, ModelSpec};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn small_model(seed: u64) -> Model {
        Model::build(ModelSpec::new(Arch::SimpleCnn3, [1, 28, 28], 10).unwrap(), seed).unwrap()
    }

    fn random_image(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(vec![1, 28, 28], (0..784).map(|_| rng.next_f32()).collect()).unwrap()
    }

    #[test]
    fn doubling_gamma_exactly_doubles_the_update() {
        let model = small_model(3);
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 1).unwrap();
        let masked = mask.apply(&random_image(5)).unwrap();
        let u1 = first_order_update(&model, &masked, 3, 1e-2).unwrap();
        let u2 = first_order_update(&model, &masked, 3, 2e-2).unwrap();
        for (a, b) in u1.raw.data().iter().zip(u2.raw.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn zero_gradient_model_gives_zero_update() {
        // Zero weights with a bias-only head: constant output, zero input
        // gradient.
        let mut model = small_model(0);
        let zeroed: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        model.set_params(zeroed).unwrap();
        let update = first_order_update(&model, &random_image(8), 2, 1e-2).unwrap();
        assert!(update.raw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_must_be_positive() {
        let model = small_model(1);
        let img = random_image(1);
        assert!(matches!(
            first_order_update(&model, &img, 0, 0.0),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            first_order_update(&model, &img, 0, -0.5),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn loss_decreases_along_small_first_order_steps() {
        let model = small_model(7);
        let mut ok = 0;
        for seed in 0..20u64 {
            let mask = sample_uniform_mask(28, 28, 0.25, 2, seed).unwrap();
            let masked = mask.apply(&random_image(seed + 100)).unwrap();
            let label = (seed % 10) as usize;
            let before = model.loss(&masked, label).unwrap();
            let mut gamma = 1e-2f32;
            let mut descended = false;
            for _ in 0..6 {
                let update = first_order_update(&model, &masked, label, gamma).unwrap();
                let stepped = masked.add(&update.raw).unwrap();
                if model.loss(&stepped, label).unwrap() < before {
                    descended = true;
                    break;
                }
                gamma *= 0.5;
            }
            if descended {
                ok += 1;
            }
        }
        assert!(ok >= 19, "descent held in only {ok}/20 cases");
    }

    #[test]
    fn bfgs_single_iteration_is_steepest_descent() {
        let model = small_model(4);
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 2).unwrap();
        let masked = mask.apply(&random_image(6)).unwrap();
        let field = bfgs_direction(&model, &masked, 5, 1).unwrap();
        let grad = model.input_gradient(&masked, 5).unwrap();
        for (p, g) in field.raw.data().iter().zip(grad.data()) {
            assert!((p + g).abs() <= 1e-6 * g.abs().max(1.0), "{p} vs -{g}");
        }
    }

    #[test]
    fn bfgs_directions_are_descent_directions() {
        let model = small_model(9);
        for seed in 0..10u64 {
            let mask = sample_uniform_mask(28, 28, 0.25, 2, seed).unwrap();
            let masked = mask.apply(&random_image(seed + 50)).unwrap();
            let label = (seed % 10) as usize;
            let shape = masked.shape().to_vec();
            let outcome = bfgs_minimize(
                |x| {
                    let image =
                        Tensor::new(shape.clone(), x.iter().map(|&v| v as f32).collect())?;
                    let (loss, grad) = model.loss_and_input_gradient(&image, label)?;
                    Ok((loss as f64, grad.data().iter().map(|&v| v as f64).collect()))
                },
                &masked.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                3,
            )
            .unwrap();
            let dot: f64 = outcome
                .direction
                .iter()
                .zip(&outcome.gradient)
                .map(|(p, g)| p * g)
                .sum();
            let gnorm: f64 = outcome.gradient.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm > 0.0 {
                assert!(dot < 0.0, "direction not descent: p.g = {dot}");
            }
        }
    }

    #[test]
    fn bfgs_state_recovers_quadratic_inverse_with_exact_steps() {
        // f(x) = 0.5 (x-a)^T A (x-a); gradient A(x-a). With exact line
        // searches on a 2-D quadratic, two curvature updates reproduce the
        // inverse Hessian, so the next direction is the Newton direction.
        let a_mat = [2.0f64, 0.3, 0.3, 1.0];
        let target = [1.0f64, -2.0];
        let grad = |x: &[f64]| {
            [
                a_mat[0] * (x[0] - target[0]) + a_mat[1] * (x[1] - target[1]),
                a_mat[2] * (x[0] - target[0]) + a_mat[3] * (x[1] - target[1]),
            ]
        };
        let mut state = BfgsState::identity(2);
        let mut x = [5.0f64, 4.0];
        let mut g = grad(&x);
        for _ in 0..2 {
            let p = state.direction(&g[..]);
            // Exact step for a quadratic: alpha = -g.p / (p^T A p).
            let gp = g[0] * p[0] + g[1] * p[1];
            let ap = [
                a_mat[0] * p[0] + a_mat[1] * p[1],
                a_mat[2] * p[0] + a_mat[3] * p[1],
            ];
            let pap = p[0] * ap[0] + p[1] * ap[1];
            let alpha = -gp / pap;
            let xn = [x[0] + alpha * p[0], x[1] + alpha * p[1]];
            let gn = grad(&xn);
            let s = [xn[0] - x[0], xn[1] - x[1]];
            let y = [gn[0] - g[0], gn[1] - g[1]];
            assert!(state.update(&s, &y));
            x = xn;
            g = gn;
        }
        // H should now equal A^{-1}.
        let det = a_mat[0] * a_mat[3] - a_mat[1] * a_mat[2];
        let a_inv = [
            a_mat[3] / det,
            -a_mat[1] / det,
            -a_mat[2] / det,
            a_mat[0] / det,
        ];
        for (h, ai) in state.inverse_hessian().iter().zip(&a_inv) {
            assert!((h - ai).abs() < 1e-4, "H {h} vs A^-1 {ai}");
        }
        // Direction for an arbitrary probe gradient matches Newton.
        let probe = [0.7f64, -1.3];
        let p = state.direction(&probe);
        let newton = [
            -(a_inv[0] * probe[0] + a_inv[1] * probe[1]),
            -(a_inv[2] * probe[0] + a_inv[3] * probe[1]),
        ];
        assert!((p[0] - newton[0]).abs() < 1e-4);
        assert!((p[1] - newton[1]).abs() < 1e-4);
    }

    #[test]
    fn bfgs_curvature_failure_resets_to_identity() {
        let mut state = BfgsState::identity(2);
        assert!(state.update(&[1.0, 0.0], &[2.0, 0.0]));
        assert_ne!(state.inverse_hessian(), BfgsState::identity(2).inverse_hessian());
        // Negative curvature: s.y < 0.
        assert!(!state.update(&[1.0, 0.0], &[-1.0, 0.0]));
        assert_eq!(state.inverse_hessian(), BfgsState::identity(2).inverse_hessian());
    }

    #[test]
    fn bfgs_minimizes_a_convex_quadratic() {
        let outcome = bfgs_minimize(
            |x: &[f64]| {
                let g = vec![2.0 * x[0], 4.0 * x[1]];
                Ok((x[0] * x[0] + 2.0 * x[1] * x[1], g))
            },
            &[3.0, -4.0],
            12,
        )
        .unwrap();
        assert!(outcome.value < 1e-8, "objective {}", outcome.value);
    }

    #[test]
    fn normalize_maps_masked_extremes_to_unit_interval() {
        let mask = Mask::from_field(2, 2, 1, vec![0, 0, 0, 1]).unwrap();
        let update = Tensor::new(vec![1, 2, 2], vec![-2.0, 0.0, 2.0, 0.0]).unwrap();
        let out = normalize_update(&update, &mask).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn normalize_degenerates_to_zeros() {
        let mask = Mask::from_field(2, 2, 1, vec![0, 0, 1, 1]).unwrap();
        let update = Tensor::new(vec![1, 2, 2], vec![0.7, 0.7, 0.0, 0.0]).unwrap();
        let out = normalize_update(&update, &mask).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_scale_invariant() {
        let mask = sample_uniform_mask(8, 8, 0.5, 2, 3).unwrap();
        let mut rng = Rng::new(12);
        let raw = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.next_range(-1.0, 1.0)).collect())
            .unwrap();
        let masked_update = mask.complement().apply(&raw).unwrap();
        let base = normalize_update(&masked_update, &mask).unwrap();
        for c in [2.0f32, 8.0, 64.0] {
            let scaled = normalize_update(&masked_update.scale(c), &mask).unwrap();
            for (a, b) in base.data().iter().zip(scaled.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn otsu_separates_bimodal_values() {
        let mut field = vec![0u8; 100];
        field.iter_mut().skip(98).for_each(|v| *v = 1);
        // 10x10 grid, patch 1: 98 masked, 2 kept.
        let mask = Mask::from_field(10, 10, 1, field).unwrap();
        let mut values = vec![0.0f32; 100];
        for (i, v) in values.iter_mut().enumerate().take(98) {
            *v = if i < 49 { 0.1 } else { 0.9 };
        }
        let out = otsu_binarize(&Tensor::new(vec![1, 10, 10], values.clone()).unwrap(), &mask)
            .unwrap();
        for i in 0..98 {
            let expected = if values[i] > 0.5 { 1.0 } else { 0.0 };
            assert_eq!(out.data()[i], expected, "pixel {i}");
        }
        assert_eq!(out.data()[98], 0.0);
        assert_eq!(out.data()[99], 0.0);
        let t = otsu_threshold_bin(&values[..98]).unwrap();
        assert!(t > 26 && t <= 230, "threshold bin {t} not between the modes");
    }

    #[test]
    fn otsu_threshold_matches_exhaustive_argmax() {
        // Independent oracle: direct per-candidate class statistics.
        fn exhaustive(values: &[f32]) -> Option<usize> {
            let bins: Vec<usize> = values
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as usize)
                .collect();
            let mut distinct = bins.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                return None;
            }
            let mut best_t = None;
            let mut best = (0u128, 1u128);
            for t in 0..256usize {
                let lower: Vec<&usize> = bins.iter().filter(|&&b| b < t).collect();
                let upper: Vec<&usize> = bins.iter().filter(|&&b| b >= t).collect();
                if lower.is_empty() || upper.is_empty() {
                    continue;
                }
                let w0 = lower.len() as i128;
                let w1 = upper.len() as i128;
                let s0: i128 = lower.iter().map(|&&b| b as i128).sum();
                let s1: i128 = upper.iter().map(|&&b| b as i128).sum();
                let cross = s0 * w1 - s1 * w0;
                let num = (cross * cross) as u128;
                let den = (w0 * w1) as u128;
                if best_t.is_none() || num * best.1 > best.0 * den {
                    best = (num, den);
                    best_t = Some(t);
                }
            }
            best_t
        }

        let mut rng = Rng::new(99);
        for case in 0..200 {
            let n = 20 + (case % 300);
            let values: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
            assert_eq!(
                otsu_threshold_bin(&values),
                exhaustive(&values),
                "case {case}"
            );
        }
    }

    #[test]
    fn otsu_all_identical_values_degenerates() {
        let mask = Mask::from_field(2, 2, 1, vec![0, 0, 0, 0]).unwrap();
        let values = Tensor::new(vec![1, 2, 2], vec![0.4; 4]).unwrap();
        let out = otsu_binarize(&values, &mask).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_with_all_kept_mask_is_zero() {
        let mask = Mask::from_field(4, 4, 2, vec![1; 16]).unwrap();
        let mut update = UpdateField {
            raw: Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32 / 8.0 - 1.0).collect())
                .unwrap(),
            order: UpdateOrder::First,
            gamma: 1e-2,
            mask: None,
            thresholded: None,
        };
        let out = threshold_t(&mut update, &mask, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_without_binarize_is_plain_normalization() {
        let mask = sample_uniform_mask(8, 8, 0.5, 2, 5).unwrap();
        let mut rng = Rng::new(2);
        let raw =
            Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.next_range(-1.0, 1.0)).collect())
                .unwrap();
        let mut update = UpdateField {
            raw: raw.clone(),
            order: UpdateOrder::First,
            gamma: 1e-2,
            mask: None,
            thresholded: None,
        };
        let out = threshold_t(&mut update, &mask, false).unwrap();
        let manual = normalize_update(&mask.complement().apply(&raw).unwrap(), &mask).unwrap();
        assert_eq!(out.data(), manual.data());
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn threshold_composition_equals_manual_chain() {
        let mask = sample_uniform_mask(8, 8, 0.5, 2, 6).unwrap();
        let mut rng = Rng::new(14);
        let raw =
            Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.next_range(-3.0, 3.0)).collect())
                .unwrap();
        let mut update = UpdateField {
            raw: raw.clone(),
            order: UpdateOrder::First,
            gamma: 1e-2,
            mask: None,
            thresholded: None,
        };
        let pipeline = threshold_t(&mut update, &mask, true).unwrap();
        let manual = otsu_binarize(
            &normalize_update(&mask.complement().apply(&raw).unwrap(), &mask).unwrap(),
            &mask,
        )
        .unwrap();
        assert_eq!(pipeline.data(), manual.data());
        assert_eq!(update.thresholded.as_ref().unwrap().data(), pipeline.data());
    }

    #[test]
    fn binarization_is_invariant_to_positive_scaling_of_the_update() {
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 7).unwrap();
        let mut rng = Rng::new(15);
        let raw = Tensor::new(
            vec![1, 28, 28],
            (0..784).map(|_| rng.next_range(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let mut base_field = UpdateField {
            raw: raw.clone(),
            order: UpdateOrder::First,
            gamma: 1e-2,
            mask: None,
            thresholded: None,
        };
        let base = threshold_t(&mut base_field, &mask, true).unwrap();
        for c in [0.5f32, 4.0, 1024.0] {
            let mut scaled_field = UpdateField {
                raw: raw.scale(c),
                order: UpdateOrder::First,
                gamma: 1e-2,
                mask: None,
                thresholded: None,
            };
            let scaled = threshold_t(&mut scaled_field, &mask, true).unwrap();
            assert_eq!(base.data(), scaled.data(), "scale {c}");
        }
    }

    #[test]
    fn compose_fill_zero_update_is_identity() {
        let mask = sample_uniform_mask(8, 8, 0.5, 2, 8).unwrap();
        let image = Tensor::new(vec![1, 8, 8], (0..64).map(|v| v as f32 / 64.0).collect()).unwrap();
        let masked = mask.apply(&image).unwrap();
        let out = compose_fill(&masked, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert_eq!(out.data(), masked.data());
    }

    #[test]
    fn compose_fill_reconstructs_partitioned_image() {
        let mask = sample_uniform_mask(28, 28, 0.25, 2, 9).unwrap();
        let image = Tensor::new(
            vec![1, 28, 28],
            (0..784).map(|v| (v % 200) as f32 / 255.0).collect(),
        )
        .unwrap();
        let kept = mask.apply(&image).unwrap();
        let hidden = mask.complement().apply(&image).unwrap();
        let out = compose_fill(&kept, &hidden).unwrap();
        assert_eq!(out.data(), image.data());
        assert!(out.max_abs() <= 1.0);
    }

    #[test]
    fn compose_fill_rejects_overlap() {
        let a = Tensor::new(vec![2], vec![0.5, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, 0.0]).unwrap();
        assert!(matches!(compose_fill(&a, &b), Err(Error::Contract(_))));
    }
}
