use super::NetError;

/// Source index for output position `i` along an axis: tiled when the source
/// is short, center-cropped when it is long.
fn axis_source(src: usize, dst: usize, i: usize) -> usize {
    if src >= dst {
        (src - dst) / 2 + i
    } else {
        i % src
    }
}

/// Fits a `F×T×Ch` spectrogram to the `H×W×C` image extents.
///
/// Both spatial axes are tiled or center-cropped and missing channels are zero.
pub fn prep_audio(spec: &[f32], dims: [usize; 3], target: [usize; 3]) -> Result<Vec<f64>, NetError> {
    let [f, t, ch] = dims;
    let [h, w, c] = target;
    if f == 0 || t == 0 || ch == 0 || h == 0 || w == 0 || c == 0 {
        return Err(NetError::Shape(format!("zero extent in audio {dims:?} or target {target:?}")));
    }
    if spec.len() != f * t * ch {
        return Err(NetError::Shape(format!(
            "audio buffer holds {} values, dims {dims:?} need {}",
            spec.len(),
            f * t * ch
        )));
    }
    if ch > c {
        return Err(NetError::Shape(format!("{ch} audio channels exceed {c} target channels")));
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = axis_source(f, h, y);
        for x in 0..w {
            let sx = axis_source(t, w, x);
            let src = &spec[(sy * t + sx) * ch..(sy * t + sx + 1) * ch];
            let dst = &mut out[(y * w + x) * c..(y * w + x) * c + ch];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = f64::from(s);
            }
        }
    }
    Ok(out)
}
