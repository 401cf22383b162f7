//! Channel reduction and nearest-neighbour resampling.

use crate::tensor::Tensor;

/// Per-site maximum over channels; ties resolve to the lowest channel index.
pub(crate) fn max_channels(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.dims4("max_over_channels").expect("checked by caller");
    let plane = h * w;
    let data = x.data();
    let mut out = vec![f64::NEG_INFINITY; n * plane];
    let mut arg = vec![0u32; n * plane];
    for b in 0..n {
        let o = &mut out[b * plane..][..plane];
        let a = &mut arg[b * plane..][..plane];
        for ch in 0..c {
            let src = &data[(b * c + ch) * plane..][..plane];
            for ((o, a), &v) in o.iter_mut().zip(a.iter_mut()).zip(src) {
                if v > *o {
                    *o = v;
                    *a = ch as u32;
                }
            }
        }
    }
    (
        Tensor::new(vec![n, 1, h, w], out).expect("mask shape"),
        arg,
    )
}

pub(crate) fn max_channels_backward(shape: &[usize], argmax: &[u32], g: &[f64]) -> Vec<f64> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut gx = vec![0.0; n * c * plane];
    for b in 0..n {
        for s in 0..plane {
            let ch = argmax[b * plane + s] as usize;
            gx[(b * c + ch) * plane + s] = g[b * plane + s];
        }
    }
    gx
}

pub(crate) fn upsample2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims4("upsample_nearest2x").expect("checked by caller");
    let (h2, w2) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; n * c * h2 * w2];
    for p in 0..n * c {
        let s = &src[p * h * w..][..h * w];
        let d = &mut out[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            let row = &s[(y / 2) * w..][..w];
            for (xo, v) in d[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *v = row[xo / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out).expect("upsample shape")
}

pub(crate) fn upsample2x_backward(shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let w2 = 2 * w;
    let mut gx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &g[p * 4 * h * w..][..4 * h * w];
        let dst = &mut gx[p * h * w..][..h * w];
        for y in 0..2 * h {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    gx
}
