//! Direct-loop reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfcn_core::metrics::ContourSet;
use rfcn_core::{Mask, Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Tensor {
    let mut t = Tape::new();
    let (x, k, b) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
    let y = t.conv2d(x, k, b, stride, padding).unwrap();
    t.value(y).clone()
}

pub fn transposed(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (x, k, b) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
    let y = t.transposed_conv2d(x, k, b).unwrap();
    t.value(y).clone()
}

pub fn maxpool(x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let x = t.constant(x.clone());
    let y = t.maxpool2x2(x).unwrap();
    t.value(y).clone()
}

pub fn cross_entropy(logits: &Tensor, target: &[usize]) -> f32 {
    let mut t = Tape::new();
    let x = t.constant(logits.clone());
    let y = t.softmax_cross_entropy(x, target).unwrap();
    t.value(y).data()[0]
}

fn dims(t: &Tensor) -> [usize; 4] {
    t.shape().try_into().expect("rank-4 tensor")
}

/// Cross-correlation with zero padding, one output element at a time.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, cin, h, w] = dims(x);
    let [cout, _, kh, kw] = dims(k);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let xv = |i: usize, c: usize, r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            0.0
        } else {
            x.data()[((i * cin + c) * h + r as usize) * w + col as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for i in 0..n {
        for o in 0..cout {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = b.data()[o] as f64;
                    for ci in 0..cin {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let rr = (r * stride + a) as isize - padding as isize;
                                let cc = (c * stride + bb) as isize - padding as isize;
                                acc += xv(i, ci, rr, cc) * k.data()[((o * cin + ci) * kh + a) * kw + bb] as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, cout, oh, ow], out)
}

/// Window scan keeping the first maximum in row-major order.
pub fn naive_maxpool(x: &Tensor) -> (Vec<f32>, Vec<usize>) {
    let [n, c, h, w] = dims(x);
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for p in 0..n * c {
        for r in 0..h / 2 {
            for col in 0..w / 2 {
                let mut best = (f32::NEG_INFINITY, 0);
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = p * h * w + (2 * r + dr) * w + 2 * col + dc;
                    if x.data()[idx] > best.0 {
                        best = (x.data()[idx], idx);
                    }
                }
                out.push(best.0);
                arg.push(best.1);
            }
        }
    }
    (out, arg)
}

/// Stride-2 transposed convolution with a 2x2 kernel as a direct scatter.
pub fn naive_transposed(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = dims(x);
    let cout = k.shape()[1];
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * cout * oh * ow];
    for i in 0..n {
        for o in 0..cout {
            for v in &mut out[(i * cout + o) * oh * ow..(i * cout + o + 1) * oh * ow] {
                *v = b.data()[o] as f64;
            }
            for ci in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        let xv = x.data()[((i * c + ci) * h + r) * w + col] as f64;
                        for a in 0..2 {
                            for bb in 0..2 {
                                let kv = k.data()[((ci * cout + o) * 2 + a) * 2 + bb] as f64;
                                out[((i * cout + o) * oh + 2 * r + a) * ow + 2 * col + bb] += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean over pixels of `-log(exp(z_t) / sum_k exp(z_k))`, summed directly.
pub fn naive_cross_entropy(logits: &Tensor, target: &[usize]) -> f64 {
    let [n, k, h, w] = dims(logits);
    let plane = h * w;
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..plane {
            let z = |c: usize| logits.data()[(i * k + c) * plane + p] as f64;
            let denom: f64 = (0..k).map(|c| z(c).exp()).sum();
            total -= (z(target[i * plane + p]).exp() / denom).ln();
        }
    }
    total / (n * plane) as f64
}

pub fn random_blob(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let (cr, cc) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let (ry, rx) = (
        rng.random_range(1.0..h as f64 / 2.0),
        rng.random_range(1.0..w as f64 / 2.0),
    );
    let noise = rng.random_range(0.0..0.3);
    let mut m = Mask::from_fn(h, w, |r, c| {
        let dy = (r as f64 - cr) / ry;
        let dx = (c as f64 - cc) / rx;
        dy * dy + dx * dx <= 1.0
    });
    for r in 0..h {
        for c in 0..w {
            if rng.random_bool(noise * 0.1) {
                m.set(r, c, !m.get(r, c));
            }
        }
    }
    m
}

/// Intersection, |a| and |b| by a single pixel scan.
pub fn counts(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut i = 0;
    let (mut na, mut nb) = (0, 0);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            i += usize::from(x && y);
            na += usize::from(x);
            nb += usize::from(y);
        }
    }
    (i, na, nb)
}

/// Foreground pixels that touch the border or a background 4-neighbor.
pub fn naive_contour(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = m.shape();
    let bg =
        |r: isize, c: isize| r < 0 || c < 0 || r >= h as isize || c >= w as isize || !m.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            if m.get(r, c) && (bg(ri - 1, ci) || bg(ri + 1, ci) || bg(ri, ci - 1) || bg(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// All-pairs symmetric mean nearest distance, in mm.
pub fn brute_apd(a: &ContourSet, b: &ContourSet) -> f64 {
    let pa: Vec<(f64, f64)> = a.points().collect();
    let pb: Vec<(f64, f64)> = b.points().collect();
    let one_way = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p.0 - q.0).hypot(p.1 - q.1))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (one_way(&pa, &pb) + one_way(&pb, &pa)) * a.spacing_mm()
}
