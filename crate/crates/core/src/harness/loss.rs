//! Training objective: a mix of pixelwise cross-entropy and soft Dice.

use crate::error::{shape_err, Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{Session, Tensor, Var};

/// Targets: background is class 0, foreground class 1.
fn one_hot(masks: &[BinaryMask], k: usize) -> Tensor {
    let (h, w) = (masks[0].height(), masks[0].width());
    let plane = h * w;
    let mut t = Tensor::zeros(&[masks.len(), k, h, w]);
    for (n, m) in masks.iter().enumerate() {
        for (i, &fg) in m.data().iter().enumerate() {
            t.data_mut()[(n * k + usize::from(fg)) * plane + i] = 1.0;
        }
    }
    t
}

fn check_targets(shape: &[usize], masks: &[BinaryMask]) -> Result<()> {
    let [b, k, h, w] = *shape else {
        return Err(shape_err("loss", format!("logits must be [B,K,H,W], got {shape:?}")));
    };
    if k < 2 {
        return Err(Error::Config(format!("loss needs at least 2 classes, got {k}")));
    }
    if masks.len() != b || masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(shape_err(
            "loss",
            format!("logits {shape:?} vs {} masks of {:?}", masks.len(), masks.first().map(|m| (m.height(), m.width()))),
        ));
    }
    Ok(())
}

/// Mean cross-entropy over all pixels of the batch.
pub fn cross_entropy(s: &mut Session, logits: Var, masks: &[BinaryMask]) -> Result<Var> {
    let shape = s.tape.shape(logits).to_vec();
    check_targets(&shape, masks)?;
    let log_p = s.tape.log_softmax_channels(logits)?;
    cross_entropy_from_log_probs(s, log_p, masks, &shape)
}

fn cross_entropy_from_log_probs(s: &mut Session, log_p: Var, masks: &[BinaryMask], shape: &[usize]) -> Result<Var> {
    let targets = s.input(one_hot(masks, shape[1]));
    let picked = s.tape.mul(log_p, targets)?;
    let total = s.tape.sum(picked)?;
    let pixels = (shape[0] * shape[2] * shape[3]) as f64;
    s.tape.scale(total, -1.0 / pixels)
}

/// `1 − (2Σpg + 1) / (Σp + Σg + 1)` with `p = 1 − P(class 0)`.
fn soft_dice_from_log_probs(s: &mut Session, log_p: Var, masks: &[BinaryMask]) -> Result<Var> {
    let log_bg = s.tape.narrow(log_p, 1, 0, 1)?;
    let bg = s.tape.exp(log_bg)?;
    let neg = s.tape.scale(bg, -1.0)?;
    let fg = s.tape.add_scalar(neg, 1.0)?;
    let (h, w) = (masks[0].height(), masks[0].width());
    let g: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| if v { 1.0 } else { 0.0 }))
        .collect();
    let g_sum: f64 = g.iter().sum();
    let g = s.input(Tensor::new(&[masks.len(), 1, h, w], g)?);
    let overlap = s.tape.mul(fg, g)?;
    let overlap = s.tape.sum(overlap)?;
    let numer = s.tape.scale(overlap, 2.0)?;
    let numer = s.tape.add_scalar(numer, 1.0)?;
    let p_sum = s.tape.sum(fg)?;
    let denom = s.tape.add_scalar(p_sum, g_sum + 1.0)?;
    let ratio = s.tape.div(numer, denom)?;
    let neg = s.tape.scale(ratio, -1.0)?;
    s.tape.add_scalar(neg, 1.0)
}

pub fn soft_dice_loss(s: &mut Session, logits: Var, masks: &[BinaryMask]) -> Result<Var> {
    let shape = s.tape.shape(logits).to_vec();
    check_targets(&shape, masks)?;
    let log_p = s.tape.log_softmax_channels(logits)?;
    soft_dice_from_log_probs(s, log_p, masks)
}

/// `λ·CE + (1−λ)·soft Dice` as a one-element tensor.
pub fn segmentation_loss(s: &mut Session, logits: Var, masks: &[BinaryMask], lambda: f64) -> Result<Var> {
    let shape = s.tape.shape(logits).to_vec();
    check_targets(&shape, masks)?;
    let log_p = s.tape.log_softmax_channels(logits)?;
    let ce = cross_entropy_from_log_probs(s, log_p, masks, &shape)?;
    let dice = soft_dice_from_log_probs(s, log_p, masks)?;
    let ce = s.tape.scale(ce, lambda)?;
    let dice = s.tape.scale(dice, 1.0 - lambda)?;
    s.tape.add(ce, dice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, store_of, GradCheckOptions};
    use crate::tensor::{seeded_rng, Mode, ParamStore};

    fn masks() -> Vec<BinaryMask> {
        vec![
            BinaryMask::from_fn(2, 3, |r, c| r == c),
            BinaryMask::from_fn(2, 3, |r, _| r == 1),
        ]
    }

    fn confident_logits(masks: &[BinaryMask]) -> Tensor {
        let t = one_hot(masks, 2);
        Tensor::from_fn(t.shape(), |i| if t.data()[i] == 1.0 { 20.0 } else { -20.0 })
    }

    #[test]
    fn perfect_logits_give_small_loss() {
        let m = masks();
        let store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let mut s = Session::new(&store, Mode::Train, &mut rng);
        let x = s.input(confident_logits(&m));
        let l = segmentation_loss(&mut s, x, &m, 0.5).unwrap();
        assert!(s.tape.value(l).item() < 0.01);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let m = masks();
        let store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let mut s = Session::new(&store, Mode::Train, &mut rng);
        for k in [2, 3, 5] {
            let x = s.input(Tensor::full(&[2, k, 2, 3], 0.7));
            let ce = cross_entropy(&mut s, x, &m).unwrap();
            assert!((s.tape.value(ce).item() - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = masks();
        let mut rng = seeded_rng(3);
        let logits = Tensor::from_fn(&[2, 2, 2, 3], |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let (store, ids) = store_of(vec![logits]);
        let report = check_gradients(
            &store,
            |s| {
                let x = s.param(ids[0]);
                segmentation_loss(s, x, &m, 0.3)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn rejects_mismatched_targets() {
        let store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let mut s = Session::new(&store, Mode::Train, &mut rng);
        let x = s.input(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(segmentation_loss(&mut s, x, &masks(), 0.5).is_err());
        let y = s.input(Tensor::zeros(&[2, 1, 2, 3]));
        assert!(segmentation_loss(&mut s, y, &masks(), 0.5).is_err());
    }
}
