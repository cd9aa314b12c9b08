use super::NetError;
use crate::ndgrad::Tensor;

/// Share of decoder cross-attention mass on visual keys (`k < boundary`) versus
/// audio keys, averaged over layers, heads and slots, per batch item.
///
/// Returns `(w_vis, w_aud)` with `w_aud = 1 − w_vis`.
pub fn modality_importance(cross: &[Tensor], boundary: usize) -> Result<Vec<(f64, f64)>, NetError> {
    let first = cross
        .first()
        .ok_or_else(|| NetError::Analysis("no decoder cross-attention weights were captured".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 4 || boundary > shape[3] {
        return Err(NetError::Analysis(format!(
            "cross-attention weights {shape:?} incompatible with boundary {boundary}"
        )));
    }
    if cross.iter().any(|w| w.shape() != shape.as_slice()) {
        return Err(NetError::Analysis("cross-attention layers disagree in shape".into()));
    }
    let [batch, heads, tq, tk] = [shape[0], shape[1], shape[2], shape[3]];
    let count = (cross.len() * heads * tq) as f64;
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut total = 0.0;
        for w in cross {
            let block = &w.data()[b * heads * tq * tk..(b + 1) * heads * tq * tk];
            for row in block.chunks(tk) {
                total += row[..boundary].iter().sum::<f64>();
            }
        }
        let w_vis = (total / count).clamp(0.0, 1.0);
        out.push((w_vis, 1.0 - w_vis));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_splits_evenly() {
        let w = Tensor::filled(vec![1, 2, 3, 8], 1.0 / 8.0);
        assert_eq!(modality_importance(&[w], 4).unwrap(), vec![(0.5, 0.5)]);
    }

    #[test]
    fn all_audio_mass() {
        let mut w = Tensor::zeros(vec![1, 1, 2, 4]);
        for r in 0..2 {
            w.data_mut()[r * 4 + 3] = 1.0;
        }
        assert_eq!(modality_importance(&[w], 2).unwrap(), vec![(0.0, 1.0)]);
    }

    #[test]
    fn missing_capture_is_an_error() {
        assert!(matches!(modality_importance(&[], 2), Err(NetError::Analysis(_))));
    }
}
