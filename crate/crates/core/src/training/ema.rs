use crate::error::{Error, Result};
use crate::model::ModelParams;

/// `shadow <- m * shadow + (1 - m) * online`, elementwise.
pub fn ema_update(online: &ModelParams, shadow: &mut ModelParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum {m} outside [0, 1]")));
    }
    if !online.same_shape(shadow) {
        return Err(Error::invalid("EMA: online and shadow parameter shapes differ"));
    }
    let src = online.tensors();
    for ((_, dst), s) in shadow.tensors_mut().into_iter().zip(src) {
        for (d, &o) in dst.iter_mut().zip(s.data) {
            *d = m * *d + (1.0 - m) * o;
        }
    }
    Ok(())
}
