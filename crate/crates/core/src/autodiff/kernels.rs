//! Convolution kernels. Vertical padding is zero, horizontal padding wraps
//! (the azimuth axis of a range image is periodic).

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeometry {
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if ph < kh || pw < kw || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }
}

/// Padded copy of one `(n, c)` plane.
fn padded_plane(x: &Tensor, n: usize, c: usize, pad: (usize, usize), buf: &mut Vec<f64>) {
    let [_, _, h, w] = x.shape();
    let (py, px) = pad;
    let pw = w + 2 * px;
    buf.clear();
    buf.resize((h + 2 * py) * pw, 0.0);
    let base = x.index(n, c, 0, 0);
    let src = &x.data()[base..base + h * w];
    for r in 0..h {
        let row = &mut buf[(r + py) * pw..(r + py + 1) * pw];
        for (j, out) in row.iter_mut().enumerate() {
            let col = (j as isize - px as isize).rem_euclid(w as isize) as usize;
            *out = src[r * w + col];
        }
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    geo: Conv2dGeometry,
) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, _, kh, kw] = k.shape();
    let (oh, ow) = geo.output_size(h, w, kh, kw).expect("validated by caller");
    let (sy, sx) = geo.stride;
    let pw = w + 2 * geo.pad.1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let mut planes: Vec<Vec<f64>> = vec![Vec::new(); cin];
    let kd = k.data();
    for b in 0..n {
        for (ci, plane) in planes.iter_mut().enumerate() {
            padded_plane(x, b, ci, geo.pad, plane);
        }
        for co in 0..cout {
            let obase = out.index(b, co, 0, 0);
            let o = &mut out.data_mut()[obase..obase + oh * ow];
            if let Some(bias) = bias {
                o.fill(bias.data()[co]);
            }
            for (ci, plane) in planes.iter().enumerate() {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = kd[((co * cin + ci) * kh + dy) * kw + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        for r in 0..oh {
                            let irow = &plane[(r * sy + dy) * pw..];
                            let orow = &mut o[r * ow..(r + 1) * ow];
                            if sx == 1 {
                                for (ov, iv) in orow.iter_mut().zip(&irow[dx..dx + ow]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (c, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * irow[c * sx + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct Conv2dGrads {
    pub x: Tensor,
    pub k: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, k: &Tensor, gout: &Tensor, geo: Conv2dGeometry) -> Conv2dGrads {
    let [n, cin, h, w] = x.shape();
    let [cout, _, kh, kw] = k.shape();
    let [_, _, oh, ow] = gout.shape();
    let (sy, sx) = geo.stride;
    let (py, px) = geo.pad;
    let pw = w + 2 * px;
    let ph = h + 2 * py;
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);
    let kd = k.data();
    let mut planes: Vec<Vec<f64>> = vec![Vec::new(); cin];
    let mut gplanes: Vec<Vec<f64>> = vec![Vec::new(); cin];
    for b in 0..n {
        for ci in 0..cin {
            padded_plane(x, b, ci, geo.pad, &mut planes[ci]);
            gplanes[ci].clear();
            gplanes[ci].resize(ph * pw, 0.0);
        }
        for co in 0..cout {
            let gbase = gout.index(b, co, 0, 0);
            let g = &gout.data()[gbase..gbase + oh * ow];
            gb.data_mut()[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let plane = &planes[ci];
                let gplane = &mut gplanes[ci];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kidx = ((co * cin + ci) * kh + dy) * kw + dx;
                        let wv = kd[kidx];
                        let mut acc = 0.0;
                        for r in 0..oh {
                            let off = (r * sy + dy) * pw + dx;
                            let grow = &g[r * ow..(r + 1) * ow];
                            if sx == 1 {
                                let irow = &plane[off..off + ow];
                                for (gv, iv) in grow.iter().zip(irow) {
                                    acc += gv * iv;
                                }
                                let girow = &mut gplane[off..off + ow];
                                for (gi, gv) in girow.iter_mut().zip(grow) {
                                    *gi += wv * gv;
                                }
                            } else {
                                for (c, gv) in grow.iter().enumerate() {
                                    acc += gv * plane[off + c * sx];
                                    gplane[off + c * sx] += wv * gv;
                                }
                            }
                        }
                        gk.data_mut()[kidx] += acc;
                    }
                }
            }
        }
        // Fold padded gradients back: drop vertical pad rows, wrap horizontal ones.
        for (ci, gplane) in gplanes.iter().enumerate() {
            let base = gx.index(b, ci, 0, 0);
            let dst = &mut gx.data_mut()[base..base + h * w];
            for r in 0..h {
                let row = &gplane[(r + py) * pw..(r + py + 1) * pw];
                for (j, gv) in row.iter().enumerate() {
                    let col = (j as isize - px as isize).rem_euclid(w as isize) as usize;
                    dst[r * w + col] += gv;
                }
            }
        }
    }
    Conv2dGrads {
        x: gx,
        k: gk,
        bias: gb,
    }
}

/// Transposed convolution without padding. Kernel layout `(cin, cout, kh, kw)`.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [_, cout, kh, kw] = k.shape();
    let oh = (h - 1) * stride.0 + kh;
    let ow = (w - 1) * stride.1 + kw;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            let bv = bias.map_or(0.0, |t| t.data()[co]);
            let base = out.index(b, co, 0, 0);
            out.data_mut()[base..base + oh * ow].fill(bv);
            for ci in 0..cin {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = k.at(ci, co, dy, dx);
                        for r in 0..h {
                            for c in 0..w {
                                let xv = x.at(b, ci, r, c);
                                let oi = base + (r * stride.0 + dy) * ow + c * stride.1 + dx;
                                out.data_mut()[oi] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    k: &Tensor,
    gout: &Tensor,
    stride: (usize, usize),
) -> Conv2dGrads {
    let [n, cin, h, w] = x.shape();
    let [_, cout, kh, kw] = k.shape();
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);
    for b in 0..n {
        for co in 0..cout {
            let base = gout.index(b, co, 0, 0);
            let [_, _, oh, ow] = gout.shape();
            gb.data_mut()[co] += gout.data()[base..base + oh * ow].iter().sum::<f64>();
            for ci in 0..cin {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kidx = k.index(ci, co, dy, dx);
                        let wv = k.data()[kidx];
                        let mut acc = 0.0;
                        for r in 0..h {
                            for c in 0..w {
                                let g = gout.data()
                                    [base + (r * stride.0 + dy) * ow + c * stride.1 + dx];
                                let xi = x.index(b, ci, r, c);
                                acc += g * x.data()[xi];
                                gx.data_mut()[xi] += wv * g;
                            }
                        }
                        gk.data_mut()[kidx] += acc;
                    }
                }
            }
        }
    }
    Conv2dGrads {
        x: gx,
        k: gk,
        bias: gb,
    }
}
