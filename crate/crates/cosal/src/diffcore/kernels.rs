//! Forward and backward kernels for the layer inventory.
//!
//! Conventions shared by every kernel:
//! - activations are rank-3 `[channels, height, width]` row-major tensors,
//!   except for the fully-connected layer which flattens its input;
//! - backward passes take the original *input* (never the output) plus the
//!   upstream gradient, return the input gradient, and accumulate parameter
//!   gradients in place;
//! - shape violations return `ShapeMismatch` naming the layer.

use crate::error::{CosalError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::LayerParams;

fn want_rank3<F: Real>(layer: &str, x: &Tensor<F>) -> Result<()> {
    if x.rank() != 3 {
        return Err(CosalError::shape_mismatch(
            layer,
            "[channels, height, width]",
            x.shape(),
        ));
    }
    Ok(())
}

fn want_channels<F: Real>(layer: &str, x: &Tensor<F>, channels: usize) -> Result<()> {
    want_rank3(layer, x)?;
    if x.dim(0) != channels {
        return Err(CosalError::shape_mismatch(
            layer,
            &format!("[{channels}, height, width]"),
            x.shape(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- conv3x3

/// 3x3 convolution, stride 1, zero padding 1 (spatial extents preserved).
pub fn conv3x3_forward<F: Real>(params: &LayerParams<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (oc, ic) = (params.weights.dim(0), params.weights.dim(1));
    want_channels("conv3x3", x, ic)?;
    let (h, w) = (x.dim(1), x.dim(2));
    let mut y = Tensor::zeros(&[oc, h, w]);
    let wd = params.weights.data();
    let xd = x.data();
    let yd = y.data_mut();
    for o in 0..oc {
        let b = params.bias.data()[o];
        for v in &mut yd[o * h * w..(o + 1) * h * w] {
            *v = b;
        }
        for c in 0..ic {
            for ki in 0..3usize {
                let di = ki as isize - 1;
                for kj in 0..3usize {
                    let dj = kj as isize - 1;
                    let wv = wd[((o * ic + c) * 3 + ki) * 3 + kj];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = ((w as isize - dj).min(w as isize)).max(0) as usize;
                    if j0 >= j1 {
                        continue;
                    }
                    let i0 = (-di).max(0) as usize;
                    let i1 = ((h as isize - di).min(h as isize)).max(0) as usize;
                    for i in i0..i1 {
                        let xi = (i as isize + di) as usize;
                        let yoff = (o * h + i) * w;
                        let xs0 = ((c * h + xi) * w) as isize + dj + j0 as isize;
                        let xs = &xd[xs0 as usize..xs0 as usize + (j1 - j0)];
                        let ys = &mut yd[yoff + j0..yoff + j1];
                        for (yv, xv) in ys.iter_mut().zip(xs) {
                            *yv = *yv + wv * *xv;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv3x3_backward<F: Real>(
    params: &mut LayerParams<F>,
    x: &Tensor<F>,
    gy: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (oc, ic) = (params.weights.dim(0), params.weights.dim(1));
    want_channels("conv3x3", x, ic)?;
    let (h, w) = (x.dim(1), x.dim(2));
    if gy.shape() != [oc, h, w] {
        return Err(CosalError::shape_mismatch(
            "conv3x3",
            &format!("[{oc}, {h}, {w}]"),
            gy.shape(),
        ));
    }
    let mut gx = Tensor::zeros(x.shape());
    let wd = params.weights.data();
    let xd = x.data();
    let gyd = gy.data();
    let gxd = gx.data_mut();
    let gwd = params.weight_grad.data_mut();
    for o in 0..oc {
        let gsum = gyd[o * h * w..(o + 1) * h * w]
            .iter()
            .fold(F::zero(), |a, v| a + *v);
        params.bias_grad.data_mut()[o] += gsum;
        for c in 0..ic {
            for ki in 0..3usize {
                let di = ki as isize - 1;
                for kj in 0..3usize {
                    let dj = kj as isize - 1;
                    let widx = ((o * ic + c) * 3 + ki) * 3 + kj;
                    let wv = wd[widx];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = ((w as isize - dj).min(w as isize)).max(0) as usize;
                    if j0 >= j1 {
                        continue;
                    }
                    let i0 = (-di).max(0) as usize;
                    let i1 = ((h as isize - di).min(h as isize)).max(0) as usize;
                    let mut gw = F::zero();
                    for i in i0..i1 {
                        let xi = (i as isize + di) as usize;
                        let goff = (o * h + i) * w;
                        let xs0 = (((c * h + xi) * w) as isize + dj + j0 as isize) as usize;
                        let gs = &gyd[goff + j0..goff + j1];
                        let xs = &xd[xs0..xs0 + (j1 - j0)];
                        let gxs = &mut gxd[xs0..xs0 + (j1 - j0)];
                        for ((gv, xv), gxv) in gs.iter().zip(xs).zip(gxs.iter_mut()) {
                            gw = gw + *gv * *xv;
                            *gxv = *gxv + wv * *gv;
                        }
                    }
                    gwd[widx] += gw;
                }
            }
        }
    }
    Ok(gx)
}

// ---------------------------------------------------------------- conv1x1

pub fn conv1x1_forward<F: Real>(params: &LayerParams<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (oc, ic) = (params.weights.dim(0), params.weights.dim(1));
    want_channels("conv1x1", x, ic)?;
    let (h, w) = (x.dim(1), x.dim(2));
    let plane = h * w;
    let mut y = Tensor::zeros(&[oc, h, w]);
    let wd = params.weights.data();
    let xd = x.data();
    let yd = y.data_mut();
    for o in 0..oc {
        let b = params.bias.data()[o];
        let ys = &mut yd[o * plane..(o + 1) * plane];
        for v in ys.iter_mut() {
            *v = b;
        }
        for c in 0..ic {
            let wv = wd[o * ic + c];
            let xs = &xd[c * plane..(c + 1) * plane];
            for (yv, xv) in ys.iter_mut().zip(xs) {
                *yv = *yv + wv * *xv;
            }
        }
    }
    Ok(y)
}

pub fn conv1x1_backward<F: Real>(
    params: &mut LayerParams<F>,
    x: &Tensor<F>,
    gy: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (oc, ic) = (params.weights.dim(0), params.weights.dim(1));
    want_channels("conv1x1", x, ic)?;
    let (h, w) = (x.dim(1), x.dim(2));
    if gy.shape() != [oc, h, w] {
        return Err(CosalError::shape_mismatch(
            "conv1x1",
            &format!("[{oc}, {h}, {w}]"),
            gy.shape(),
        ));
    }
    let plane = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let wd = params.weights.data();
    let xd = x.data();
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for o in 0..oc {
        let gs = &gyd[o * plane..(o + 1) * plane];
        params.bias_grad.data_mut()[o] += gs.iter().fold(F::zero(), |a, v| a + *v);
        for c in 0..ic {
            let wv = wd[o * ic + c];
            let xs = &xd[c * plane..(c + 1) * plane];
            let gxs = &mut gxd[c * plane..(c + 1) * plane];
            let mut gw = F::zero();
            for ((gv, xv), gxv) in gs.iter().zip(xs).zip(gxs.iter_mut()) {
                gw = gw + *gv * *xv;
                *gxv = *gxv + wv * *gv;
            }
            params.weight_grad.data_mut()[o * ic + c] += gw;
        }
    }
    Ok(gx)
}

// --------------------------------------------------------- fully connected

/// Flattens the input (any shape) and applies `y = W x + b`.
pub fn fc_forward<F: Real>(params: &LayerParams<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (od, id) = (params.weights.dim(0), params.weights.dim(1));
    if x.len() != id {
        return Err(CosalError::shape_mismatch(
            "fully-connected",
            &format!("{id} elements"),
            x.shape(),
        ));
    }
    let wd = params.weights.data();
    let xd = x.data();
    let mut y = Tensor::zeros(&[od]);
    for o in 0..od {
        let row = &wd[o * id..(o + 1) * id];
        let mut acc = params.bias.data()[o];
        for (wv, xv) in row.iter().zip(xd) {
            acc = acc + *wv * *xv;
        }
        y.data_mut()[o] = acc;
    }
    Ok(y)
}

pub fn fc_backward<F: Real>(
    params: &mut LayerParams<F>,
    x: &Tensor<F>,
    gy: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (od, id) = (params.weights.dim(0), params.weights.dim(1));
    if x.len() != id {
        return Err(CosalError::shape_mismatch(
            "fully-connected",
            &format!("{id} elements"),
            x.shape(),
        ));
    }
    if gy.len() != od {
        return Err(CosalError::shape_mismatch(
            "fully-connected",
            &format!("[{od}]"),
            gy.shape(),
        ));
    }
    let mut gx = Tensor::zeros(x.shape());
    let wd = params.weights.data();
    let xd = x.data();
    let gxd = gx.data_mut();
    let gwd = params.weight_grad.data_mut();
    for o in 0..od {
        let g = gy.data()[o];
        params.bias_grad.data_mut()[o] += g;
        let row = &wd[o * id..(o + 1) * id];
        let grow = &mut gwd[o * id..(o + 1) * id];
        for (((gw, wv), xv), gxv) in grow.iter_mut().zip(row).zip(xd).zip(gxd.iter_mut()) {
            *gw += g * *xv;
            *gxv = *gxv + g * *wv;
        }
    }
    Ok(gx)
}

// ----------------------------------------------------------- activations

pub fn relu_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward<F: Real>(x: &Tensor<F>, gy: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.same_shape(gy) {
        return Err(CosalError::shape_mismatch("relu", x.shape(), gy.shape()));
    }
    let mut gx = Tensor::zeros(x.shape());
    for ((gxv, xv), gv) in gx.data_mut().iter_mut().zip(x.data()).zip(gy.data()) {
        if *xv > F::zero() {
            *gxv = *gv;
        }
    }
    Ok(gx)
}

pub fn sigmoid_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| F::one() / (F::one() + (-v).exp()))
}

pub fn sigmoid_backward<F: Real>(x: &Tensor<F>, gy: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.same_shape(gy) {
        return Err(CosalError::shape_mismatch("sigmoid", x.shape(), gy.shape()));
    }
    let mut gx = Tensor::zeros(x.shape());
    for ((gxv, xv), gv) in gx.data_mut().iter_mut().zip(x.data()).zip(gy.data()) {
        let s = F::one() / (F::one() + (-*xv).exp());
        *gxv = *gv * s * (F::one() - s);
    }
    Ok(gx)
}

// -------------------------------------------------------------- maxpool2

/// 2x2 max pooling with stride 2; extents must be even. Within each window
/// the first maximum in scan order (row-major) wins ties, and backward routes
/// the gradient to exactly that position.
pub fn maxpool2_forward<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    want_rank3("maxpool2", x)?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CosalError::shape_mismatch(
            "maxpool2",
            "even height and width",
            x.shape(),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x.at3(ch, 2 * i, 2 * j);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x.at3(ch, 2 * i + di, 2 * j + dj);
                    if v > best {
                        best = v;
                    }
                }
                y.set3(ch, i, j, best);
            }
        }
    }
    Ok(y)
}

pub fn maxpool2_backward<F: Real>(x: &Tensor<F>, gy: &Tensor<F>) -> Result<Tensor<F>> {
    want_rank3("maxpool2", x)?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if gy.shape() != [c, h / 2, w / 2] {
        return Err(CosalError::shape_mismatch(
            "maxpool2",
            &format!("[{c}, {}, {}]", h / 2, w / 2),
            gy.shape(),
        ));
    }
    let mut gx = Tensor::zeros(x.shape());
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let (mut bi, mut bj) = (2 * i, 2 * j);
                let mut best = x.at3(ch, bi, bj);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x.at3(ch, 2 * i + di, 2 * j + dj);
                    if v > best {
                        best = v;
                        bi = 2 * i + di;
                        bj = 2 * j + dj;
                    }
                }
                let cur = gx.at3(ch, bi, bj);
                gx.set3(ch, bi, bj, cur + gy.at3(ch, i, j));
            }
        }
    }
    Ok(gx)
}

// ------------------------------------------------------------- upsample2

/// Nearest-neighbour upsampling by 2: each input cell becomes a 2x2 block.
pub fn upsample2_forward<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    want_rank3("upsample2", x)?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let mut y = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for i in 0..h {
            let row = x.row3(ch, i).to_vec();
            for a in 0..2 {
                let out = y.row3_mut(ch, 2 * i + a);
                for (j, v) in row.iter().enumerate() {
                    out[2 * j] = *v;
                    out[2 * j + 1] = *v;
                }
            }
        }
    }
    Ok(y)
}

pub fn upsample2_backward<F: Real>(x: &Tensor<F>, gy: &Tensor<F>) -> Result<Tensor<F>> {
    want_rank3("upsample2", x)?;
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    if gy.shape() != [c, 2 * h, 2 * w] {
        return Err(CosalError::shape_mismatch(
            "upsample2",
            &format!("[{c}, {}, {}]", 2 * h, 2 * w),
            gy.shape(),
        ));
    }
    let mut gx = Tensor::zeros(x.shape());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = F::zero();
                for a in 0..2 {
                    for b in 0..2 {
                        acc = acc + gy.at3(ch, 2 * i + a, 2 * j + b);
                    }
                }
                gx.set3(ch, i, j, acc);
            }
        }
    }
    Ok(gx)
}

// ---------------------------------------------------------------- concat

/// Channel concatenation of two maps with matching spatial extents.
pub fn concat_forward<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    want_rank3("concat", a)?;
    want_rank3("concat", b)?;
    if a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2) {
        return Err(CosalError::shape_mismatch("concat", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.dim(0) + b.dim(0), a.dim(1), a.dim(2)], data)
}

pub fn concat_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    gy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    want_rank3("concat", gy)?;
    if gy.len() != a.len() + b.len() || gy.dim(0) != a.dim(0) + b.dim(0) {
        return Err(CosalError::shape_mismatch(
            "concat",
            &format!("[{}, {}, {}]", a.dim(0) + b.dim(0), a.dim(1), a.dim(2)),
            gy.shape(),
        ));
    }
    let ga = Tensor::from_vec(a.shape(), gy.data()[..a.len()].to_vec())?;
    let gb = Tensor::from_vec(b.shape(), gy.data()[a.len()..].to_vec())?;
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv3x3_identity_kernel_passes_through() {
        let mut r = rng(1);
        let mut p = LayerParams::<f64>::conv3x3(1, 1, &mut r);
        for w in p.weights.data_mut() {
            *w = 0.0;
        }
        // centre tap only
        p.weights.data_mut()[4] = 1.0;
        let x = Tensor::from_vec(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = conv3x3_forward(&p, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3x3_zero_pads_the_border() {
        let mut r = rng(1);
        let mut p = LayerParams::<f64>::conv3x3(1, 1, &mut r);
        for w in p.weights.data_mut() {
            *w = 1.0;
        }
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv3x3_forward(&p, &x).unwrap();
        // every output cell sees exactly the four in-bounds ones
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv1x1_is_a_channel_mix() {
        let mut r = rng(2);
        let mut p = LayerParams::<f64>::conv1x1(2, 1, &mut r);
        p.weights.data_mut().copy_from_slice(&[2.0, -1.0]);
        p.bias.data_mut()[0] = 0.5;
        let x = Tensor::from_vec(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = conv1x1_forward(&p, &x).unwrap();
        assert_eq!(y.data(), &[2. - 3. + 0.5, 4. - 4. + 0.5]);
    }

    #[test]
    fn fc_matches_manual_product() {
        let mut r = rng(3);
        let mut p = LayerParams::<f64>::fully_connected(3, 2, &mut r);
        p.weights
            .data_mut()
            .copy_from_slice(&[1., 0., -1., 2., 2., 2.]);
        p.bias.data_mut().copy_from_slice(&[0.0, 1.0]);
        let x = Tensor::from_vec(&[3], vec![1., 2., 3.]).unwrap();
        let y = fc_forward(&p, &x).unwrap();
        assert_eq!(y.data(), &[-2.0, 13.0]);
    }

    #[test]
    fn maxpool_keeps_first_max_on_ties() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let gy = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let gx = maxpool2_backward(&x, &gy).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4]);
        assert!(maxpool2_forward(&x).is_err());
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let up = upsample2_forward(&x).unwrap();
        assert_eq!(up.shape(), &[1, 4, 4]);
        let back = maxpool2_forward(&up).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_splits_back_exactly() {
        let a = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = concat_forward(&a, &b).unwrap();
        assert_eq!(y.shape(), &[3, 1, 2]);
        let (ga, gb) = concat_backward(&a, &b, &y).unwrap();
        assert_eq!(ga.data(), a.data());
        assert_eq!(gb.data(), b.data());
    }

    #[test]
    fn relu_zeroes_negatives_and_their_grads() {
        let x = Tensor::from_vec(&[1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let gy = Tensor::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let gx = relu_backward(&x, &gy).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_midpoint() {
        let x = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let y = sigmoid_forward(&x);
        assert_eq!(y.data(), &[0.5]);
        let gy = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let gx = sigmoid_backward(&x, &gy).unwrap();
        assert!((gx.data()[0] - 0.25).abs() < 1e-15);
    }
}
