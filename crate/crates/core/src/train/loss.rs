use edgekd_tensor::{Element, Graph, Tensor, Var};

use super::{Result, TrainError};

fn check(temperature: f64, alpha: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(TrainError::InvalidT(temperature));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::InvalidHyperparams(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `α·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged over the
/// batch. Bind `teacher_logits` as a constant so no gradient reaches it.
pub fn distillation_loss<E: Element>(
    g: &mut Graph<E>,
    teacher_logits: Var,
    student_logits: Var,
    temperature: f64,
    alpha: f64,
) -> Result<Var> {
    check(temperature, alpha)?;
    let t = g.scale(teacher_logits, 1.0 / temperature)?;
    let p = g.softmax(t, 1)?;
    let s = g.scale(student_logits, 1.0 / temperature)?;
    let q = g.softmax(s, 1)?;
    let kl = g.kl_divergence(p, q)?;
    Ok(g.scale(kl, alpha * temperature * temperature)?)
}

/// `(1−α)·CE(student, labels) + distillation_loss(...)`.
pub fn total_loss<E: Element>(
    g: &mut Graph<E>,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    temperature: f64,
    alpha: f64,
) -> Result<Var> {
    check(temperature, alpha)?;
    let ce = g.cross_entropy(student_logits, labels)?;
    let ce = g.scale(ce, 1.0 - alpha)?;
    let kd = distillation_loss(g, teacher_logits, student_logits, temperature, alpha)?;
    Ok(g.add(ce, kd)?)
}

/// Value-only distillation loss for `[N, K]` logit tensors.
pub fn distillation_loss_value(teacher: &Tensor, student: &Tensor, temperature: f64, alpha: f64) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let t = g.constant(teacher.cast::<f64>());
    let s = g.constant(student.cast::<f64>());
    let l = distillation_loss(&mut g, t, s, temperature, alpha)?;
    Ok(g.value(l)?.item().expect("scalar loss"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f32; 2]]) -> Tensor {
        Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn closed_form_example() {
        let teacher = t(&[[2f32.ln(), 0.0]]);
        let student = t(&[[0.0, 0.0]]);
        let l = distillation_loss_value(&teacher, &student, 1.0, 1.0).unwrap();
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((l - expected).abs() < 1e-6, "{l} vs {expected}");
        assert!((l - 0.0566).abs() < 1e-4);
    }

    #[test]
    fn identical_and_alpha_zero() {
        let a = t(&[[1.0, -2.0], [0.5, 3.0]]);
        for temp in [0.5, 1.0, 4.0] {
            assert_eq!(distillation_loss_value(&a, &a, temp, 0.7).unwrap(), 0.0);
        }
        let b = t(&[[-1.0, 2.0], [0.0, 0.0]]);
        assert_eq!(distillation_loss_value(&a, &b, 2.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn temperature_must_be_positive() {
        let a = t(&[[1.0, 0.0]]);
        assert!(matches!(distillation_loss_value(&a, &a, 0.0, 0.5), Err(TrainError::InvalidT(_))));
        assert!(matches!(distillation_loss_value(&a, &a, -1.0, 0.5), Err(TrainError::InvalidT(_))));
        assert!(matches!(distillation_loss_value(&a, &a, 1.0, 1.5), Err(TrainError::InvalidHyperparams(_))));
    }

    #[test]
    fn total_loss_reductions() {
        let student = t(&[[2.0, -1.0], [0.0, 1.5]]);
        let teacher = t(&[[1.0, 0.0], [-1.0, 1.0]]);
        let labels = [0, 1];
        let eval = |alpha: f64| {
            let mut g = Graph::<f64>::inference();
            let s = g.constant(student.cast::<f64>());
            let te = g.constant(teacher.cast::<f64>());
            let l = total_loss(&mut g, s, te, &labels, 2.0, alpha).unwrap();
            g.value(l).unwrap().item().unwrap()
        };
        let mut g = Graph::<f64>::inference();
        let s = g.constant(student.cast::<f64>());
        let ce = g.cross_entropy(s, &labels).unwrap();
        let ce = g.value(ce).unwrap().item().unwrap();
        assert_eq!(eval(0.0), ce);
        let kd = distillation_loss_value(&teacher, &student, 2.0, 1.0).unwrap();
        assert!((eval(1.0) - kd).abs() < 1e-12);

        let perfect = t(&[[40.0, -40.0], [-40.0, 40.0]]);
        let mut g = Graph::<f64>::inference();
        let s = g.constant(perfect.cast::<f64>());
        let te = g.constant(perfect.cast::<f64>());
        let l = total_loss(&mut g, s, te, &labels, 2.0, 0.5).unwrap();
        assert!(g.value(l).unwrap().item().unwrap() < 1e-12);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let mut g = Graph::<f64>::new();
        let s = g.param(t(&[[0.3, -0.2]]).cast::<f64>());
        let te = g.constant(t(&[[1.0, 0.0]]).cast::<f64>());
        let l = total_loss(&mut g, s, te, &[1], 2.0, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(!g.requires_grad(te).unwrap());
        assert!(grads.get(te).is_none());
        assert!(grads.get(s).is_some());
    }
}
