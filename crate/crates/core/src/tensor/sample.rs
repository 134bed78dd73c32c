//! Spatial operations: bilinear map sampling and 2-D convolution.
//!
//! Feature maps are laid out channel-major as [C, H, W].

use super::{Inner, Tensor};
use crate::error::{Error, Result};

/// Sample a [C, H, W] map at fractional pixel locations.
///
/// `points` is [P, 2] with each row (x, y) in the map's own pixel
/// coordinates. Locations outside the map blend with zeros, so the result
/// fades smoothly to zero between the border and one pixel beyond it.
///
/// Differentiable in both the map and the locations. The floor-based cell
/// choice makes the location derivative right-sided at integer coordinates,
/// which keeps it consistent with a forward finite difference at knots.
pub fn bilinear_sample(map: &Tensor, points: &Tensor) -> Result<Tensor> {
    let ms = map.shape();
    if ms.len() != 3 {
        return Err(Error::shape(
            "bilinear_sample",
            format!("map must be [C, H, W], got {:?}", ms),
        ));
    }
    let (c, h, w) = (ms[0], ms[1], ms[2]);
    let (p_n, two) = points.rows_cols();
    if two != 2 {
        return Err(Error::shape(
            "bilinear_sample",
            format!("points must be [P, 2], got {:?}", points.shape()),
        ));
    }

    let mv = map.values();
    let pv = points.values();
    let at = |ch: usize, y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mv[ch * h * w + y as usize * w + x as usize]
        }
    };

    let mut values = vec![0.0; p_n * c];
    for p in 0..p_n {
        let x = pv[p * 2];
        let y = pv[p * 2 + 1];
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        for ch in 0..c {
            let m00 = at(ch, yi, xi);
            let m01 = at(ch, yi, xi + 1);
            let m10 = at(ch, yi + 1, xi);
            let m11 = at(ch, yi + 1, xi + 1);
            values[p * c + ch] = (1.0 - fy) * ((1.0 - fx) * m00 + fx * m01)
                + fy * ((1.0 - fx) * m10 + fx * m11);
        }
    }

    Tensor::from_op(
        "bilinear_sample",
        vec![p_n, c],
        values,
        vec![map.clone(), points.clone()],
        Box::new(move |dout, ctx: &Inner| {
            let mv = ctx.parent_values(0);
            let pv = ctx.parent_values(1);
            let at = |ch: usize, y: i64, x: i64| -> f64 {
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    0.0
                } else {
                    mv[ch * h * w + y as usize * w + x as usize]
                }
            };
            let mut gmap = ctx.parent_tracks(0).then(|| vec![0.0; c * h * w]);
            let mut gpts = ctx.parent_tracks(1).then(|| vec![0.0; p_n * 2]);
            for p in 0..p_n {
                let x = pv[p * 2];
                let y = pv[p * 2 + 1];
                let x0 = x.floor();
                let y0 = y.floor();
                let fx = x - x0;
                let fy = y - y0;
                let (xi, yi) = (x0 as i64, y0 as i64);
                let mut dx = 0.0;
                let mut dy = 0.0;
                for ch in 0..c {
                    let d = dout[p * c + ch];
                    if d == 0.0 {
                        continue;
                    }
                    if let Some(g) = gmap.as_mut() {
                        let mut bump = |yc: i64, xc: i64, wgt: f64| {
                            if yc >= 0 && xc >= 0 && yc < h as i64 && xc < w as i64 {
                                g[ch * h * w + yc as usize * w + xc as usize] += d * wgt;
                            }
                        };
                        bump(yi, xi, (1.0 - fy) * (1.0 - fx));
                        bump(yi, xi + 1, (1.0 - fy) * fx);
                        bump(yi + 1, xi, fy * (1.0 - fx));
                        bump(yi + 1, xi + 1, fy * fx);
                    }
                    if gpts.is_some() {
                        let m00 = at(ch, yi, xi);
                        let m01 = at(ch, yi, xi + 1);
                        let m10 = at(ch, yi + 1, xi);
                        let m11 = at(ch, yi + 1, xi + 1);
                        dx += d * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
                        dy += d * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
                    }
                }
                if let Some(g) = gpts.as_mut() {
                    g[p * 2] = dx;
                    g[p * 2 + 1] = dy;
                }
            }
            vec![gmap, gpts]
        }),
    )
}

/// 2-D convolution: input [C_in, H, W], weight [C_out, C_in, kh, kw],
/// bias [C_out], zero padding, square stride.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 3 || ws.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} must be [C,H,W], weight {:?} must be [O,C,kh,kw]", is, ws),
        ));
    }
    let (c_in, h, w) = (is[0], is[1], is[2]);
    let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc_in != c_in || bias.numel() != c_out {
        return Err(Error::shape(
            "conv2d",
            format!("weight {:?} / bias {:?} do not fit input {:?}", ws, bias.shape(), is),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;

    let iv = input.values();
    let wv = weight.values();
    let bv = bias.values();
    let mut values = vec![0.0; c_out * h_out * w_out];
    for co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bv[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - padding as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - padding as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += iv[ci * h * w + iy as usize * w + ix as usize]
                                * wv[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                values[co * h_out * w_out + oy * w_out + ox] = acc;
            }
        }
    }

    Tensor::from_op(
        "conv2d",
        vec![c_out, h_out, w_out],
        values,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |dout, ctx: &Inner| {
            let iv = ctx.parent_values(0);
            let wv = ctx.parent_values(1);
            let mut gi = ctx.parent_tracks(0).then(|| vec![0.0; c_in * h * w]);
            let mut gw = ctx.parent_tracks(1).then(|| vec![0.0; c_out * c_in * kh * kw]);
            let mut gb = ctx.parent_tracks(2).then(|| vec![0.0; c_out]);
            for co in 0..c_out {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let d = dout[co * h_out * w_out + oy * w_out + ox];
                        if d == 0.0 {
                            continue;
                        }
                        if let Some(g) = gb.as_mut() {
                            g[co] += d;
                        }
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as i64 - padding as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as i64 - padding as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let ii = ci * h * w + iy as usize * w + ix as usize;
                                    let wi = ((co * c_in + ci) * kh + ky) * kw + kx;
                                    if let Some(g) = gi.as_mut() {
                                        g[ii] += d * wv[wi];
                                    }
                                    if let Some(g) = gw.as_mut() {
                                        g[wi] += d * iv[ii];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gi, gw, gb]
        }),
    )
}
