use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(p, LOG_FLOOR))`, except that NaN stays NaN so divergence is seen.
pub(crate) fn clamped_log(p: f64) -> f64 {
    if p < LOG_FLOOR { LOG_FLOOR } else { p }.ln()
}

/// −mean over the batch of `w_y · log p_y`, for probabilities `[N, 2]`.
pub fn cross_entropy_loss(tape: &mut Tape, probs: Var, targets: &[u8], class_weights: Option<[f64; 2]>) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
        return Err(Error::Shape(format!("probabilities {shape:?} for {} targets", targets.len())));
    }
    let (n, classes) = (shape[0], shape[1]);
    let w = class_weights.unwrap_or([1.0, 1.0]);
    let mut pick = vec![0.0; n * classes];
    for (i, &t) in targets.iter().enumerate() {
        let t = usize::from(t);
        if t >= classes.min(2) {
            return Err(Error::Shape(format!("target {t} outside {classes} classes")));
        }
        pick[i * classes + t] = -w[t] / n as f64;
    }
    let logp = tape.log_clamped(probs, LOG_FLOOR);
    let mask = tape.constant(Tensor::new(&shape, pick)?);
    let terms = tape.mul(logp, mask)?;
    Ok(tape.sum_all(terms))
}
