//! Raw 2-D cross-correlation kernels and their adjoints.
//!
//! All convolutions here are cross-correlations (no kernel flip) with
//! "same"-style padding of `k / 2` on each side. Grouped convolutions cover
//! the depth-wise case (`groups == channels`).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Circular,
}

/// Static description of a convolution, shared by forward and adjoint passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub pad: PadMode,
    pub stride: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(pad: PadMode, stride: usize) -> Self {
        ConvSpec {
            pad,
            stride,
            groups: 1,
        }
    }

    pub fn depthwise(pad: PadMode, channels: usize) -> Self {
        ConvSpec {
            pad,
            stride: 1,
            groups: channels,
        }
    }
}

/// Output spatial length for input length `n`, kernel `k` and stride `s`.
pub fn out_len(n: usize, k: usize, s: usize) -> usize {
    (n + 2 * (k / 2) - k) / s + 1
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    og: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
    s: usize,
}

fn geometry(x_shape: [usize; 4], k_shape: &[usize], spec: ConvSpec, op: &'static str) -> Result<Geometry> {
    let [n, c, h, w] = x_shape;
    let [o, cg, kh, kw] = match k_shape {
        [a, b, c, d] => [*a, *b, *c, *d],
        _ => return shape_err(op, format!("kernel must be 4-D, got {:?}", k_shape)),
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return shape_err(op, format!("kernel dims must be odd, got {}x{}", kh, kw));
    }
    if spec.stride != 1 && spec.stride != 2 {
        return shape_err(op, format!("stride must be 1 or 2, got {}", spec.stride));
    }
    let g = spec.groups;
    if g == 0 || c % g != 0 || o % g != 0 || cg != c / g {
        return shape_err(
            op,
            format!("channels {} / kernel {:?} incompatible with groups {}", c, k_shape, g),
        );
    }
    if h == 0 || w == 0 {
        return shape_err(op, "empty spatial dims");
    }
    let (ph, pw) = (kh / 2, kw / 2);
    Ok(Geometry {
        n,
        c,
        h,
        w,
        o,
        cg,
        og: o / g,
        kh,
        kw,
        ph,
        pw,
        hp: h + 2 * ph,
        wp: w + 2 * pw,
        ho: out_len(h, kh, spec.stride),
        wo: out_len(w, kw, spec.stride),
        s: spec.stride,
    })
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Copies one `[h, w]` plane into a `[h + 2ph, w + 2pw]` padded buffer.
fn pad_plane(src: &[f64], h: usize, w: usize, ph: usize, pw: usize, mode: PadMode, dst: &mut [f64]) {
    let wp = w + 2 * pw;
    let hp = h + 2 * ph;
    match mode {
        PadMode::Zero => {
            dst.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..h {
                dst[(y + ph) * wp + pw..(y + ph) * wp + pw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        PadMode::Circular => {
            for yp in 0..hp {
                let y = wrap(yp as isize - ph as isize, h);
                for xp in 0..wp {
                    let x = wrap(xp as isize - pw as isize, w);
                    dst[yp * wp + xp] = src[y * w + x];
                }
            }
        }
    }
}

/// Folds a padded buffer back onto the `[h, w]` plane (adjoint of `pad_plane`).
fn unpad_plane_add(src: &[f64], h: usize, w: usize, ph: usize, pw: usize, mode: PadMode, dst: &mut [f64]) {
    let wp = w + 2 * pw;
    let hp = h + 2 * ph;
    match mode {
        PadMode::Zero => {
            for y in 0..h {
                let row = &src[(y + ph) * wp + pw..(y + ph) * wp + pw + w];
                for (d, s) in dst[y * w..(y + 1) * w].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        PadMode::Circular => {
            for yp in 0..hp {
                let y = wrap(yp as isize - ph as isize, h);
                for xp in 0..wp {
                    let x = wrap(xp as isize - pw as isize, w);
                    dst[y * w + x] += src[yp * wp + xp];
                }
            }
        }
    }
}

fn padded_input(x: &Tensor, g: &Geometry, mode: PadMode) -> Vec<f64> {
    let plane = g.h * g.w;
    let pplane = g.hp * g.wp;
    let mut out = vec![0.0; g.n * g.c * pplane];
    for nc in 0..g.n * g.c {
        pad_plane(
            &x.data()[nc * plane..(nc + 1) * plane],
            g.h,
            g.w,
            g.ph,
            g.pw,
            mode,
            &mut out[nc * pplane..(nc + 1) * pplane],
        );
    }
    out
}

#[inline]
fn row_axpy(out: &mut [f64], wgt: f64, src: &[f64], offset: usize, stride: usize) {
    if stride == 1 {
        let n = out.len();
        for (o, v) in out.iter_mut().zip(&src[offset..offset + n]) {
            *o += wgt * v;
        }
    } else {
        for (i, o) in out.iter_mut().enumerate() {
            *o += wgt * src[offset + i * stride];
        }
    }
}

/// Dot product with four independent accumulators, so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cross-correlation `y[n,o] = Σ_c k[o,c] ⋆ x[n,c]`.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = geometry(x.dims4()?, k.shape(), spec, "conv2d")?;
    let xp = padded_input(x, &g, spec.pad);
    let pplane = g.hp * g.wp;
    let oplane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.o * oplane];
    let kd = k.data();
    for n in 0..g.n {
        for o in 0..g.o {
            let grp = o / g.og;
            let obuf = &mut out[(n * g.o + o) * oplane..(n * g.o + o + 1) * oplane];
            for cl in 0..g.cg {
                let c = grp * g.cg + cl;
                let xin = &xp[(n * g.c + c) * pplane..(n * g.c + c + 1) * pplane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wgt = kd[((o * g.cg + cl) * g.kh + ky) * g.kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let iy = oy * g.s + ky;
                            row_axpy(
                                &mut obuf[oy * g.wo..(oy + 1) * g.wo],
                                wgt,
                                &xin[iy * g.wp..(iy + 1) * g.wp],
                                kx,
                                g.s,
                            );
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)
}

/// Exact adjoint of [`conv2d_forward`] with respect to `x`; `in_hw` is the
/// spatial size of the forward input (ambiguous for stride 2).
pub fn conv2d_adjoint(y: &Tensor, k: &Tensor, spec: ConvSpec, in_hw: (usize, usize)) -> Result<Tensor> {
    let [n, o, ho, wo] = y.dims4()?;
    let c = match k.shape() {
        [_, cg, _, _] => cg * spec.groups,
        s => return shape_err("conv2d_transpose", format!("kernel must be 4-D, got {:?}", s)),
    };
    let g = geometry([n, c, in_hw.0, in_hw.1], k.shape(), spec, "conv2d_transpose")?;
    if g.o != o || g.ho != ho || g.wo != wo {
        return shape_err(
            "conv2d_transpose",
            format!(
                "input {:?} inconsistent with kernel {:?} and output size {:?}",
                y.shape(),
                k.shape(),
                in_hw
            ),
        );
    }
    let pplane = g.hp * g.wp;
    let oplane = g.ho * g.wo;
    let plane = g.h * g.w;
    let kd = k.data();
    let yd = y.data();
    let mut out = vec![0.0; g.n * g.c * plane];
    let mut acc = vec![0.0; pplane];
    for n in 0..g.n {
        for c in 0..g.c {
            let grp = c / g.cg;
            let cl = c % g.cg;
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ol in 0..g.og {
                let o = grp * g.og + ol;
                let ybuf = &yd[(n * g.o + o) * oplane..(n * g.o + o + 1) * oplane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wgt = kd[((o * g.cg + cl) * g.kh + ky) * g.kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let iy = oy * g.s + ky;
                            let arow = &mut acc[iy * g.wp..(iy + 1) * g.wp];
                            let yrow = &ybuf[oy * g.wo..(oy + 1) * g.wo];
                            if g.s == 1 {
                                for (a, v) in arow[kx..kx + g.wo].iter_mut().zip(yrow) {
                                    *a += wgt * v;
                                }
                            } else {
                                for (ox, v) in yrow.iter().enumerate() {
                                    arow[kx + ox * g.s] += wgt * v;
                                }
                            }
                        }
                    }
                }
            }
            unpad_plane_add(
                &acc,
                g.h,
                g.w,
                g.ph,
                g.pw,
                spec.pad,
                &mut out[(n * g.c + c) * plane..(n * g.c + c + 1) * plane],
            );
        }
    }
    Tensor::new(vec![g.n, g.c, g.h, g.w], out)
}

/// Gradient of `⟨conv2d(x, k), gy⟩` with respect to `k`.
pub fn conv2d_kernel_grad(x: &Tensor, gy: &Tensor, k_shape: &[usize], spec: ConvSpec) -> Result<Tensor> {
    let g = geometry(x.dims4()?, k_shape, spec, "conv2d_kernel_grad")?;
    let xp = padded_input(x, &g, spec.pad);
    let pplane = g.hp * g.wp;
    let oplane = g.ho * g.wo;
    let gyd = gy.data();
    let mut gk = vec![0.0; g.o * g.cg * g.kh * g.kw];
    for n in 0..g.n {
        for o in 0..g.o {
            let grp = o / g.og;
            let gbuf = &gyd[(n * g.o + o) * oplane..(n * g.o + o + 1) * oplane];
            for cl in 0..g.cg {
                let c = grp * g.cg + cl;
                let xin = &xp[(n * g.c + c) * pplane..(n * g.c + c + 1) * pplane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let iy = oy * g.s + ky;
                            let xrow = &xin[iy * g.wp..(iy + 1) * g.wp];
                            let grow = &gbuf[oy * g.wo..(oy + 1) * g.wo];
                            if g.s == 1 {
                                acc += dot(grow, &xrow[kx..kx + g.wo]);
                            } else {
                                for (ox, gv) in grow.iter().enumerate() {
                                    acc += gv * xrow[kx + ox * g.s];
                                }
                            }
                        }
                        gk[((o * g.cg + cl) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(k_shape.to_vec(), gk)
}
