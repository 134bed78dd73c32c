//! Finite-difference gradient checking.
//!
//! The numeric oracle is central differences, independent of the backward
//! implementations it verifies. Comparisons use the scale-aware relative
//! error |a - n| / max(1, |a|, |n|) so tiny gradients are compared
//! absolutely and large ones relatively.

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the relative error.
pub const REL_TOL: f64 = 1e-4;

/// Central-difference approximation of the gradient of a scalar function.
pub fn finite_diff_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Result of one named check family.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

/// Compare backward() against finite differences for one case.
///
/// `build` maps a flat input tensor to any output tensor; non-scalar outputs
/// are reduced with a fixed random projection so one backward pass checks
/// the whole Jacobian in a random direction per element. Returns the worst
/// relative error over input elements.
pub fn check_case<B>(x0: &[f64], rng: &mut Rng, build: B) -> Result<f64>
where
    B: Fn(&Tensor) -> Result<Tensor>,
{
    let x = Tensor::param(&[x0.len()], x0.to_vec())?;
    let out = build(&x)?;
    let proj: Vec<f64> = (0..out.numel()).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    let proj_t = Tensor::new(&[out.numel()], proj.clone())?;
    let loss = out.reshape(&[out.numel()])?.mul(&proj_t)?.sum()?;
    loss.backward()?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::invalid("gradcheck", "input received no gradient"))?;

    let numeric = finite_diff_gradient(
        |v| {
            let xt = Tensor::new(&[v.len()], v.to_vec()).expect("perturbed input stays finite");
            let out = build(&xt).expect("forward must succeed near the base point");
            out.values().iter().zip(&proj).map(|(a, b)| a * b).sum()
        },
        x0,
        FD_STEP,
    );

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(rel_err(*a, *n));
    }
    Ok(worst)
}

/// Run `cases` random instances of one family and keep the worst error.
pub fn check_family<G>(name: &str, rng: &mut Rng, cases: usize, mut gen: G) -> Result<CheckOutcome>
where
    G: FnMut(&mut Rng) -> (Vec<f64>, Box<dyn Fn(&Tensor) -> Result<Tensor>>),
{
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (x0, build) = gen(rng);
        worst = worst.max(check_case(&x0, rng, build)?);
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        cases,
        max_rel_err: worst,
        tol: REL_TOL,
    })
}

fn randv(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(lo, hi)).collect()
}

/// Random values with |v| >= margin, for ops with a kink at zero.
fn randv_off_zero(rng: &mut Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.range(margin, margin + 1.5);
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.below(hi - lo + 1) + lo
}

/// Gradient checks for every differentiable tensor operation, `cases`
/// random small shapes each.
pub fn run_numerics_checks(seed: u64, cases: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed).fork_named("numerics-gradcheck");
    let mut out = Vec::new();

    // Binary elementwise on matching random shapes. Division keeps the
    // denominator away from zero; max/min keep the operands separated so
    // the finite-difference step cannot cross the selection boundary.
    out.push(check_family("add", &mut rng, cases, |r| {
        let n = dims(r, 1, 12);
        let x0 = randv(r, 2 * n, -2.0, 2.0);
        (x0, Box::new(move |x| {
            let a = x.slice_cols(0, n)?;
            let b = x.slice_cols(n, 2 * n)?;
            a.add(&b)
        }))
    })?);
    out.push(check_family("sub", &mut rng, cases, |r| {
        let n = dims(r, 1, 12);
        let x0 = randv(r, 2 * n, -2.0, 2.0);
        (x0, Box::new(move |x| {
            x.slice_cols(0, n)?.sub(&x.slice_cols(n, 2 * n)?)
        }))
    })?);
    out.push(check_family("mul", &mut rng, cases, |r| {
        let n = dims(r, 1, 12);
        let x0 = randv(r, 2 * n, -2.0, 2.0);
        (x0, Box::new(move |x| {
            x.slice_cols(0, n)?.mul(&x.slice_cols(n, 2 * n)?)
        }))
    })?);
    out.push(check_family("div", &mut rng, cases, |r| {
        let n = dims(r, 1, 12);
        let mut x0 = randv(r, n, -2.0, 2.0);
        x0.extend(randv_off_zero(r, n, 0.5));
        (x0, Box::new(move |x| {
            x.slice_cols(0, n)?.div(&x.slice_cols(n, 2 * n)?)
        }))
    })?);
    out.push(check_family("maximum", &mut rng, cases, |r| {
        let n = dims(r, 1, 12);
        let a = randv(r, n, -2.0, 2.0);
        let b: Vec<f64> = a
            .iter()
            .map(|&v| {
                if r.uniform() < 0.5 {
                    v + r.range(0.2, 1.0)
                } else {
                    v - r.range(0.2, 1.0)
                }
            })
            .collect();
        let mut x0 = a;
        x0.extend(b);
        (x0, Box::new(move |x| {
            x.slice_cols(0, n)?.maximum(&x.slice_cols(n, 2 * n)?)
        }))
    })?);
    out.push(check_family("minimum", &mut rng, cases, |r| {
        let n = dims(r, 1, 12);
        let a = randv(r, n, -2.0, 2.0);
        let b: Vec<f64> = a
            .iter()
            .map(|&v| {
                if r.uniform() < 0.5 {
                    v + r.range(0.2, 1.0)
                } else {
                    v - r.range(0.2, 1.0)
                }
            })
            .collect();
        let mut x0 = a;
        x0.extend(b);
        (x0, Box::new(move |x| {
            x.slice_cols(0, n)?.minimum(&x.slice_cols(n, 2 * n)?)
        }))
    })?);

    // Unary elementwise, each with a domain that keeps the op smooth.
    out.push(check_family("add_scalar", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        let c = r.range(-2.0, 2.0);
        (randv(r, n, -2.0, 2.0), Box::new(move |x| x.add_scalar(c)))
    })?);
    out.push(check_family("mul_scalar", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        let c = r.range(-2.0, 2.0);
        (randv(r, n, -2.0, 2.0), Box::new(move |x| x.mul_scalar(c)))
    })?);
    out.push(check_family("powf_const", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        let p = [0.5, 1.7, 2.0, 3.0][r.below(4)];
        (randv(r, n, 0.3, 2.0), Box::new(move |x| x.powf_const(p)))
    })?);
    out.push(check_family("relu", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv_off_zero(r, n, 0.2), Box::new(|x| x.relu()))
    })?);
    out.push(check_family("abs", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv_off_zero(r, n, 0.2), Box::new(|x| x.abs()))
    })?);
    out.push(check_family("exp", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv(r, n, -2.0, 2.0), Box::new(|x| x.exp()))
    })?);
    out.push(check_family("ln", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv(r, n, 0.3, 3.0), Box::new(|x| x.ln()))
    })?);
    out.push(check_family("sqrt", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv(r, n, 0.3, 3.0), Box::new(|x| x.sqrt()))
    })?);
    out.push(check_family("sigmoid", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv(r, n, -3.0, 3.0), Box::new(|x| x.sigmoid()))
    })?);
    out.push(check_family("softplus", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv(r, n, -3.0, 3.0), Box::new(|x| x.softplus()))
    })?);

    // Reductions.
    out.push(check_family("sum", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv(r, n, -2.0, 2.0), Box::new(|x| x.sum()))
    })?);
    out.push(check_family("mean", &mut rng, cases, |r| {
        let n = dims(r, 1, 16);
        (randv(r, n, -2.0, 2.0), Box::new(|x| x.mean()))
    })?);
    out.push(check_family("mean_rows", &mut rng, cases, |r| {
        let rows = dims(r, 1, 5);
        let c = dims(r, 1, 5);
        (randv(r, rows * c, -2.0, 2.0), Box::new(move |x| {
            x.reshape(&[rows, c])?.mean_rows()
        }))
    })?);

    // Matrix ops: the flat input packs every operand.
    out.push(check_family("matmul", &mut rng, cases, |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        (randv(r, m * k + k * n, -1.5, 1.5), Box::new(move |x| {
            let a = x.slice_cols(0, m * k)?.reshape(&[m, k])?;
            let b = x.slice_cols(m * k, m * k + k * n)?.reshape(&[k, n])?;
            a.matmul(&b)
        }))
    })?);
    out.push(check_family("matmul_nt", &mut rng, cases, |r| {
        let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        (randv(r, m * k + n * k, -1.5, 1.5), Box::new(move |x| {
            let a = x.slice_cols(0, m * k)?.reshape(&[m, k])?;
            let b = x.slice_cols(m * k, m * k + n * k)?.reshape(&[n, k])?;
            a.matmul_nt(&b)
        }))
    })?);
    out.push(check_family("linear", &mut rng, cases, |r| {
        let (rows, din, dout) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let total = rows * din + dout * din + dout;
        (randv(r, total, -1.5, 1.5), Box::new(move |x| {
            let xs = x.slice_cols(0, rows * din)?.reshape(&[rows, din])?;
            let w = x
                .slice_cols(rows * din, rows * din + dout * din)?
                .reshape(&[dout, din])?;
            let b = x
                .slice_cols(rows * din + dout * din, total)?
                .reshape(&[dout])?;
            xs.linear(&w, &b)
        }))
    })?);

    // Row-structured ops.
    out.push(check_family("layer_norm", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 1, 4), dims(r, 2, 6));
        let total = rows * c + 2 * c;
        (randv(r, total, -2.0, 2.0), Box::new(move |x| {
            let xs = x.slice_cols(0, rows * c)?.reshape(&[rows, c])?;
            let g = x.slice_cols(rows * c, rows * c + c)?.reshape(&[c])?;
            let b = x.slice_cols(rows * c + c, total)?.reshape(&[c])?;
            xs.layer_norm(&g, &b, 1e-5)
        }))
    })?);
    out.push(check_family("softmax_rows", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 1, 4), dims(r, 1, 6));
        (randv(r, rows * c, -3.0, 3.0), Box::new(move |x| {
            x.reshape(&[rows, c])?.softmax_rows()
        }))
    })?);
    out.push(check_family("log_softmax_rows", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 1, 4), dims(r, 1, 6));
        (randv(r, rows * c, -3.0, 3.0), Box::new(move |x| {
            x.reshape(&[rows, c])?.log_softmax_rows()
        }))
    })?);
    out.push(check_family("l2_normalize_rows", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 1, 4), dims(r, 2, 6));
        (randv_off_zero(r, rows * c, 0.5), Box::new(move |x| {
            x.reshape(&[rows, c])?.l2_normalize_rows(1e-12)
        }))
    })?);

    // Shape ops.
    out.push(check_family("transpose", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 1, 5), dims(r, 1, 5));
        (randv(r, rows * c, -2.0, 2.0), Box::new(move |x| {
            x.reshape(&[rows, c])?.transpose()
        }))
    })?);
    out.push(check_family("reshape", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 1, 5), dims(r, 1, 5));
        (randv(r, rows * c, -2.0, 2.0), Box::new(move |x| {
            x.reshape(&[rows, c])
        }))
    })?);
    out.push(check_family("slice_cols", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 1, 4), dims(r, 2, 6));
        let s = r.below(c - 1);
        let e = s + 1 + r.below((c - s - 1).max(1));
        (randv(r, rows * c, -2.0, 2.0), Box::new(move |x| {
            x.reshape(&[rows, c])?.slice_cols(s, e.min(c))
        }))
    })?);
    out.push(check_family("gather_rows", &mut rng, cases, |r| {
        let (rows, c) = (dims(r, 2, 5), dims(r, 1, 4));
        let k = dims(r, 1, 6);
        let idx: Vec<usize> = (0..k).map(|_| r.below(rows)).collect();
        (randv(r, rows * c, -2.0, 2.0), Box::new(move |x| {
            x.reshape(&[rows, c])?.gather_rows(&idx)
        }))
    })?);
    out.push(check_family("concat_rows", &mut rng, cases, |r| {
        let c = dims(r, 1, 4);
        let (r1, r2) = (dims(r, 1, 3), dims(r, 1, 3));
        (randv(r, (r1 + r2) * c, -2.0, 2.0), Box::new(move |x| {
            let a = x.slice_cols(0, r1 * c)?.reshape(&[r1, c])?;
            let b = x.slice_cols(r1 * c, (r1 + r2) * c)?.reshape(&[r2, c])?;
            super::ops::concat_rows(&[a, b])
        }))
    })?);
    out.push(check_family("concat_cols", &mut rng, cases, |r| {
        let rows = dims(r, 1, 3);
        let (c1, c2) = (dims(r, 1, 4), dims(r, 1, 4));
        (randv(r, rows * (c1 + c2), -2.0, 2.0), Box::new(move |x| {
            let a = x.slice_cols(0, rows * c1)?.reshape(&[rows, c1])?;
            let b = x
                .slice_cols(rows * c1, rows * (c1 + c2))?
                .reshape(&[rows, c2])?;
            super::ops::concat_cols(&[a, b])
        }))
    })?);

    // Spatial ops. Sample locations stay at least 0.15 away from integer
    // knots so the finite-difference step never crosses a cell boundary.
    out.push(check_family("bilinear_sample_map", &mut rng, cases, |r| {
        let (c, h, w) = (dims(r, 1, 2), dims(r, 2, 4), dims(r, 2, 4));
        let p = dims(r, 1, 4);
        let pts = off_knot_points(r, p, h, w);
        let x0 = randv(r, c * h * w, -2.0, 2.0);
        (x0, Box::new(move |x| {
            let map = x.reshape(&[c, h, w])?;
            let points = Tensor::new(&[p, 2], pts.clone())?;
            bilinear_sample_impl(&map, &points)
        }))
    })?);
    out.push(check_family("bilinear_sample_points", &mut rng, cases, |r| {
        let (c, h, w) = (dims(r, 1, 2), dims(r, 2, 4), dims(r, 2, 4));
        let p = dims(r, 1, 4);
        let map_vals = randv(r, c * h * w, -2.0, 2.0);
        let x0 = off_knot_points(r, p, h, w);
        (x0, Box::new(move |x| {
            let map = Tensor::new(&[c, h, w], map_vals.clone())?;
            let points = x.reshape(&[p, 2])?;
            bilinear_sample_impl(&map, &points)
        }))
    })?);
    out.push(check_family("bilinear_sample_joint", &mut rng, cases, |r| {
        let (c, h, w) = (1usize, dims(r, 2, 4), dims(r, 2, 4));
        let p = dims(r, 1, 3);
        let mut x0 = randv(r, c * h * w, -2.0, 2.0);
        x0.extend(off_knot_points(r, p, h, w));
        (x0, Box::new(move |x| {
            let map = x.slice_cols(0, c * h * w)?.reshape(&[c, h, w])?;
            let points = x
                .slice_cols(c * h * w, c * h * w + 2 * p)?
                .reshape(&[p, 2])?;
            bilinear_sample_impl(&map, &points)
        }))
    })?);
    out.push(check_family("conv2d", &mut rng, cases, |r| {
        let (ci, co) = (dims(r, 1, 2), dims(r, 1, 2));
        let (h, w) = (dims(r, 3, 5), dims(r, 3, 5));
        let stride = dims(r, 1, 2);
        let total = ci * h * w + co * ci * 9 + co;
        (randv(r, total, -1.0, 1.0), Box::new(move |x| {
            let inp = x.slice_cols(0, ci * h * w)?.reshape(&[ci, h, w])?;
            let wt = x
                .slice_cols(ci * h * w, ci * h * w + co * ci * 9)?
                .reshape(&[co, ci, 3, 3])?;
            let b = x.slice_cols(ci * h * w + co * ci * 9, total)?.reshape(&[co])?;
            super::sample::conv2d(&inp, &wt, &b, stride, 1)
        }))
    })?);

    Ok(out)
}

fn bilinear_sample_impl(map: &Tensor, points: &Tensor) -> Result<Tensor> {
    super::sample::bilinear_sample(map, points)
}

/// Random (x, y) rows with fractional parts in [0.15, 0.85], covering both
/// interior cells and the zero-padding ring just outside the map.
fn off_knot_points(rng: &mut Rng, p: usize, h: usize, w: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(2 * p);
    for _ in 0..p {
        let cx = rng.below(w + 1) as f64 - 1.0;
        let cy = rng.below(h + 1) as f64 - 1.0;
        pts.push(cx + rng.range(0.15, 0.85));
        pts.push(cy + rng.range(0.15, 0.85));
    }
    pts
}
