//! Imbalance-aware sharpness-aware minimization.
//!
//! The batch loss splits into a head part and a tail part. Only the tail
//! part is evaluated at the adversarially perturbed weights
//! `w + rho * g_tail / ||g_tail||`; the head gradient is taken at `w`.

use crate::nn::{grads_add, grads_norm, Grads, ParamSet, Sgd};
use crate::Result;

/// Loss whose gradient can be split by class group.
pub trait SplitObjective {
    /// Loss and gradient of the whole batch at `params`.
    fn full(&mut self, params: &ParamSet) -> Result<(f64, Grads)>;
    /// Loss with head and tail gradients at `params`.
    fn split(&mut self, params: &ParamSet) -> Result<(f64, Grads, Grads)>;
    /// Tail gradient at (perturbed) `params`.
    fn tail_grad(&mut self, params: &ParamSet) -> Result<Grads>;
    /// Whether the batch carries any tail target mass.
    fn has_tail(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub loss: f64,
    /// Forward/backward passes spent on this step.
    pub grad_evals: usize,
    pub perturbed: bool,
}

/// One optimizer step on the plain gradient.
pub fn plain_step(
    params: &mut ParamSet,
    objective: &mut dyn SplitObjective,
    opt: &mut Sgd,
) -> Result<StepInfo> {
    let (loss, g) = objective.full(params)?;
    opt.step(params, &g);
    Ok(StepInfo {
        loss,
        grad_evals: 1,
        perturbed: false,
    })
}

/// One ImbSAM step. Falls back to [`plain_step`] when `rho == 0` or the
/// batch has no tail mass.
pub fn imbsam_step(
    params: &mut ParamSet,
    objective: &mut dyn SplitObjective,
    rho: f32,
    opt: &mut Sgd,
) -> Result<StepInfo> {
    if rho == 0.0 || !objective.has_tail() {
        return plain_step(params, objective, opt);
    }
    let (loss, mut g_head, g_tail) = objective.split(params)?;
    let norm = grads_norm(&g_tail);
    if norm == 0.0 || !norm.is_finite() {
        log::info!("imbsam: tail gradient norm is {norm}, skipping perturbation");
        grads_add(&mut g_head, &g_tail);
        opt.step(params, &g_head);
        return Ok(StepInfo {
            loss,
            grad_evals: 1,
            perturbed: false,
        });
    }
    let mut perturbed = params.clone();
    perturbed.add_scaled(&g_tail, (rho as f64 / norm) as f32);
    let g_tail_adv = objective.tail_grad(&perturbed)?;
    grads_add(&mut g_head, &g_tail_adv);
    opt.step(params, &g_head);
    Ok(StepInfo {
        loss,
        grad_evals: 2,
        perturbed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NamedTensor, SgdConfig};

    /// `L(w) = a w^2 (head) + b w^2 (tail)` on a single scalar.
    struct Quadratic {
        head: f32,
        tail: f32,
        calls: usize,
    }

    impl Quadratic {
        fn grad(coef: f32, p: &ParamSet) -> Grads {
            vec![vec![2.0 * coef * p.data(0)[0]]]
        }
    }

    impl SplitObjective for Quadratic {
        fn full(&mut self, p: &ParamSet) -> Result<(f64, Grads)> {
            self.calls += 1;
            let w = p.data(0)[0] as f64;
            Ok(((self.head + self.tail) as f64 * w * w, Self::grad(self.head + self.tail, p)))
        }
        fn split(&mut self, p: &ParamSet) -> Result<(f64, Grads, Grads)> {
            self.calls += 1;
            let w = p.data(0)[0] as f64;
            Ok((
                (self.head + self.tail) as f64 * w * w,
                Self::grad(self.head, p),
                Self::grad(self.tail, p),
            ))
        }
        fn tail_grad(&mut self, p: &ParamSet) -> Result<Grads> {
            self.calls += 1;
            Ok(Self::grad(self.tail, p))
        }
        fn has_tail(&self) -> bool {
            self.tail != 0.0
        }
    }

    fn scalar(v: f32) -> ParamSet {
        let mut p = ParamSet::default();
        let mut t = NamedTensor::zeros("w", vec![1]);
        t.data[0] = v;
        p.push(t);
        p
    }

    fn sgd(lr: f32) -> Sgd {
        Sgd::new(SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        })
    }

    #[test]
    fn all_tail_quadratic() {
        // eps = 0.5 * 2 / |2| = 0.5; grad at 1.5 is 3; w = 1 - 0.1 * 3.
        let mut p = scalar(1.0);
        let mut obj = Quadratic { head: 0.0, tail: 1.0, calls: 0 };
        let info = imbsam_step(&mut p, &mut obj, 0.5, &mut sgd(0.1)).unwrap();
        assert_eq!(p.data(0)[0], 0.7f32);
        assert_eq!(info.grad_evals, 2);
        assert!(info.perturbed);
    }

    #[test]
    fn mixed_head_and_tail() {
        // head grad at 1 is 2; tail grad at 1.5 is 3; w = 1 - 0.1 * 5.
        let mut p = scalar(1.0);
        let mut obj = Quadratic { head: 1.0, tail: 1.0, calls: 0 };
        imbsam_step(&mut p, &mut obj, 0.5, &mut sgd(0.1)).unwrap();
        assert!((p.data(0)[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn rho_zero_matches_plain() {
        let mut a = scalar(0.8);
        let mut b = scalar(0.8);
        let mut oa = Quadratic { head: 1.0, tail: 2.0, calls: 0 };
        let mut ob = Quadratic { head: 1.0, tail: 2.0, calls: 0 };
        let info = imbsam_step(&mut a, &mut oa, 0.0, &mut sgd(0.05)).unwrap();
        plain_step(&mut b, &mut ob, &mut sgd(0.05)).unwrap();
        assert_eq!(a.data(0)[0].to_bits(), b.data(0)[0].to_bits());
        assert_eq!(info.grad_evals, 1);
    }

    #[test]
    fn no_tail_matches_plain() {
        let mut a = scalar(0.8);
        let mut b = scalar(0.8);
        let mut oa = Quadratic { head: 1.0, tail: 0.0, calls: 0 };
        let mut ob = Quadratic { head: 1.0, tail: 0.0, calls: 0 };
        imbsam_step(&mut a, &mut oa, 0.3, &mut sgd(0.05)).unwrap();
        plain_step(&mut b, &mut ob, &mut sgd(0.05)).unwrap();
        assert_eq!(a.data(0)[0].to_bits(), b.data(0)[0].to_bits());
        assert_eq!(oa.calls, 1);
    }

    #[test]
    fn zero_tail_gradient_skips_perturbation() {
        let mut p = scalar(0.0);
        let mut obj = Quadratic { head: 1.0, tail: 1.0, calls: 0 };
        let info = imbsam_step(&mut p, &mut obj, 0.5, &mut sgd(0.1)).unwrap();
        assert!(!info.perturbed);
        assert_eq!(info.grad_evals, 1);
        assert_eq!(p.data(0)[0], 0.0);
    }
}
