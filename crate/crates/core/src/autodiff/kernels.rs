//! Plane-level inner loops shared by convolution and transposed convolution.
//!
//! Both ops relate a "small" plane index `(sy, sx)` to a "big" plane index
//! `(sy * stride + ky - pad, sx * stride + kx - pad)` for every kernel tap.
//! For a convolution the output is small and the input big; for a transposed
//! convolution it is the other way round.

#[derive(Debug, Clone, Copy)]
pub(crate) struct TapGeometry {
    pub small_h: usize,
    pub small_w: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl TapGeometry {
    /// Range of small indices whose big partner lies in `[0, big_len)`.
    fn valid(&self, k: usize, small_len: usize, big_len: usize) -> (usize, usize) {
        let (s, p, k) = (self.stride as i64, self.pad as i64, k as i64);
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi_incl = (big_len as i64 - 1 + p - k).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, small_len as i64);
        (lo.min(hi) as usize, hi as usize)
    }

    fn big_of(&self, small: usize, k: usize) -> usize {
        small * self.stride + k - self.pad
    }
}

/// `small[sy, sx] += w * big[partner]` for one tap.
pub(crate) fn gather(small: &mut [f64], big: &[f64], w: f64, g: &TapGeometry, ky: usize, kx: usize) {
    let (y0, y1) = g.valid(ky, g.small_h, g.big_h);
    let (x0, x1) = g.valid(kx, g.small_w, g.big_w);
    if x0 >= x1 {
        return;
    }
    for sy in y0..y1 {
        let by = g.big_of(sy, ky);
        let srow = &mut small[sy * g.small_w + x0..sy * g.small_w + x1];
        let bstart = by * g.big_w + g.big_of(x0, kx);
        if g.stride == 1 {
            for (d, s) in srow.iter_mut().zip(&big[bstart..bstart + (x1 - x0)]) {
                *d += w * s;
            }
        } else {
            for (i, d) in srow.iter_mut().enumerate() {
                *d += w * big[bstart + i * g.stride];
            }
        }
    }
}

/// `big[partner] += w * small[sy, sx]` for one tap.
pub(crate) fn scatter(big: &mut [f64], small: &[f64], w: f64, g: &TapGeometry, ky: usize, kx: usize) {
    let (y0, y1) = g.valid(ky, g.small_h, g.big_h);
    let (x0, x1) = g.valid(kx, g.small_w, g.big_w);
    if x0 >= x1 {
        return;
    }
    for sy in y0..y1 {
        let by = g.big_of(sy, ky);
        let srow = &small[sy * g.small_w + x0..sy * g.small_w + x1];
        let bstart = by * g.big_w + g.big_of(x0, kx);
        if g.stride == 1 {
            for (d, s) in big[bstart..bstart + (x1 - x0)].iter_mut().zip(srow) {
                *d += w * s;
            }
        } else {
            for (i, s) in srow.iter().enumerate() {
                big[bstart + i * g.stride] += w * s;
            }
        }
    }
}

/// `sum small[sy, sx] * big[partner]` for one tap.
pub(crate) fn dot(small: &[f64], big: &[f64], g: &TapGeometry, ky: usize, kx: usize) -> f64 {
    let (y0, y1) = g.valid(ky, g.small_h, g.big_h);
    let (x0, x1) = g.valid(kx, g.small_w, g.big_w);
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for sy in y0..y1 {
        let by = g.big_of(sy, ky);
        let srow = &small[sy * g.small_w + x0..sy * g.small_w + x1];
        let bstart = by * g.big_w + g.big_of(x0, kx);
        if g.stride == 1 {
            acc += srow.iter().zip(&big[bstart..bstart + (x1 - x0)]).map(|(a, b)| a * b).sum::<f64>();
        } else {
            acc += srow.iter().enumerate().map(|(i, a)| a * big[bstart + i * g.stride]).sum::<f64>();
        }
    }
    acc
}
