//! Double-double re-evaluation of the network for finite differences.
//!
//! A difference quotient `(f(x+h) − f(x−h)) / 2h` computed in f64 carries
//! about `ulp(f) / h` of round-off, which at `h = 1e-6` swamps gradient
//! components a few orders of magnitude smaller than `f`. Evaluating the same
//! network with ~106-bit activations removes that floor without changing the
//! step or the stencil.

use crate::error::Result;
use crate::model::Model;
use crate::tensor::{ConvParams, Tensor, KERNEL_SIZE};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub(crate) fn from_f64(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub(crate) fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let r = fast_two_sum(s, e + t);
        fast_two_sum(r.hi, r.lo + f)
    }

    #[inline]
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    #[inline]
    fn sub(self, b: Dd) -> Dd {
        self.add(b.neg())
    }

    #[inline]
    fn mul_f64(self, b: f64) -> Dd {
        let p = self.hi * b;
        let e = self.hi.mul_add(b, -p);
        fast_two_sum(p, self.lo.mul_add(b, e))
    }

    #[inline]
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        let e = self.hi.mul_add(b.hi, -p);
        fast_two_sum(p, e + self.hi * b.lo + self.lo * b.hi)
    }

    fn is_positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }
}

/// HWC feature map in double-double.
struct Map {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<Dd>,
}

fn conv(x: &Map, p: &ConvParams) -> Map {
    let (h, w, cin, cout) = (x.h, x.w, p.in_channels(), p.out_channels());
    let k = p.kernel();
    let mut data = Vec::with_capacity(h * w * cout);
    let mut acc = vec![Dd::default(); cout];
    for y in 0..h {
        for xx in 0..w {
            for (a, &b) in acc.iter_mut().zip(p.bias()) {
                *a = Dd::from_f64(b);
            }
            for ky in 0..KERNEL_SIZE {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..KERNEL_SIZE {
                    let Some(sx) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let src = &x.data[(sy * w + sx) * cin..][..cin];
                    for (ci, &v) in src.iter().enumerate() {
                        let row = &k[p.kernel_index(ky, kx, ci, 0)..][..cout];
                        for (a, &kv) in acc.iter_mut().zip(row) {
                            *a = a.add(v.mul_f64(kv));
                        }
                    }
                }
            }
            data.extend_from_slice(&acc);
        }
    }
    Map { h, w, c: cout, data }
}

fn concat(parts: &[&Map]) -> Map {
    let (h, w) = (parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|m| m.c).sum();
    let mut data = Vec::with_capacity(h * w * c);
    for px in 0..h * w {
        for m in parts {
            data.extend_from_slice(&m.data[px * m.c..][..m.c]);
        }
    }
    Map { h, w, c, data }
}

/// Scalar function of the network output.
#[derive(Clone, Copy)]
pub(crate) enum Objective<'a> {
    /// `<proj, out>`
    Linear(&'a Tensor),
    /// `mean((out − target)²)`
    Mse(&'a Tensor),
}

/// Objective value, or `None` if the ReLU pattern differs from `pattern`.
pub(crate) fn evaluate(
    model: &Model,
    input: &Tensor,
    objective: Objective<'_>,
    pattern: &[bool],
) -> Result<Option<Dd>> {
    let cfg = model.config();
    let x = Map {
        h: input.height(),
        w: input.width(),
        c: input.channels(),
        data: input.data().iter().map(|&v| Dd::from_f64(v)).collect(),
    };
    let layers = model.layers();
    let mut seen = 0usize;
    let mut prev: Option<Map> = None;
    let mut layer = 0;
    for _ in 0..cfg.num_blocks {
        let mut zs: Vec<Map> = Vec::with_capacity(cfg.convs_per_block);
        for j in 0..cfg.convs_per_block {
            let src = match (j, &prev) {
                (0, None) => &x,
                (0, Some(p)) => p,
                _ => &zs[j - 1],
            };
            let mut z = conv(src, &layers[layer]);
            layer += 1;
            for v in &mut z.data {
                let active = v.is_positive();
                if pattern.get(seen) != Some(&active) {
                    return Ok(None);
                }
                seen += 1;
                if !active {
                    *v = Dd::default();
                }
            }
            zs.push(z);
        }
        let out = {
            let mut parts: Vec<&Map> = Vec::new();
            if cfg.dense_concat {
                parts.extend(zs.iter());
                parts.push(&x);
                if let Some(p) = &prev {
                    parts.push(p);
                }
            } else {
                parts.push(zs.last().expect("convs_per_block >= 1"));
                parts.push(&x);
            }
            concat(&parts)
        };
        prev = Some(out);
    }
    if seen != pattern.len() {
        return Ok(None);
    }
    let mut out = conv(prev.as_ref().expect("num_blocks >= 1"), &layers[layer]);
    if cfg.residual_learning {
        for (o, i) in out.data.iter_mut().zip(&x.data) {
            *o = o.add(*i);
        }
    }
    let value = match objective {
        Objective::Linear(proj) => out
            .data
            .iter()
            .zip(proj.data())
            .fold(Dd::default(), |s, (o, &p)| s.add(o.mul_f64(p))),
        Objective::Mse(target) => {
            let sum = out.data.iter().zip(target.data()).fold(Dd::default(), |s, (o, &t)| {
                let d = o.sub(Dd::from_f64(t));
                s.add(d.mul(d))
            });
            // Division by the element count; exact enough at this precision.
            let m = out.data.len() as f64;
            let q = sum.hi / m;
            let r = sum.sub(Dd::from_f64(m).mul_f64(q));
            fast_two_sum(q, r.to_f64() / m)
        }
    };
    Ok(Some(value))
}

/// What a probe perturbs.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Probe {
    /// Index into [`Model::flat_parameters`].
    Parameter(usize),
    /// Index into the input tensor's data.
    Input(usize),
}

/// Central difference at step `eps`, with the objective evaluated and
/// subtracted in double-double. The f64 step actually taken is used as the
/// denominator.
pub(crate) fn central_difference(
    model: &Model,
    input: &Tensor,
    objective: Objective<'_>,
    pattern: &[bool],
    probe: Probe,
    eps: f64,
) -> Result<Option<f64>> {
    let at = |sign: f64| -> Result<Option<(Dd, f64)>> {
        match probe {
            Probe::Parameter(i) => {
                let mut params = model.flat_parameters();
                let orig = params[i];
                params[i] = orig + sign * eps;
                let step = params[i] - orig;
                let mut m = model.clone();
                m.set_flat_parameters(&params)?;
                Ok(evaluate(&m, input, objective, pattern)?.map(|v| (v, step)))
            }
            Probe::Input(i) => {
                let mut data = input.data().to_vec();
                let orig = data[i];
                data[i] = orig + sign * eps;
                let step = data[i] - orig;
                Ok(evaluate(model, &input.with_data(data), objective, pattern)?.map(|v| (v, step)))
            }
        }
    };
    let (Some((fp, hp)), Some((fm, hm))) = (at(1.0)?, at(-1.0)?) else {
        return Ok(None);
    };
    Ok(Some(fp.sub(fm).to_f64() / (hp - hm)))
}
