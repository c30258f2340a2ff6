//! Finite-difference gradient verification. The numeric side never touches
//! the tape: it re-evaluates the forward function at perturbed inputs, so it
//! stays an independent oracle for the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{backward, Tape};
use super::{DType, Result, Tensor};

/// Relative error uses `|a - n| / max(|a|, |n|, floor)` so that near-zero
/// gradient entries do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub entries: usize,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks analytic gradients of `f` w.r.t. every input against central
/// differences with step `h`, in 64-bit. `f` receives one tensor per input;
/// taped on the analytic pass, constant on the numeric passes.
pub fn check_grads(
    name: &str,
    inputs: &[(&[f64], &[usize])],
    h: f64,
    tol: f64,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<CheckResult> {
    let tape = Tape::new();
    let taped: Vec<Tensor> = inputs
        .iter()
        .map(|(data, shape)| Ok(tape.watch(&Tensor::new(data.to_vec(), shape, DType::F64)?)))
        .collect::<Result<_>>()?;
    let loss = f(&taped)?;
    let grads = backward(&loss)?;

    let eval = |bufs: &[Vec<f64>]| -> Result<f64> {
        let consts: Vec<Tensor> = bufs
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| Tensor::new(data.clone(), shape, DType::F64))
            .collect::<Result<_>>()?;
        f(&consts)?.item()
    };

    let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.to_vec()).collect();
    let mut max_rel = 0.0f64;
    let mut entries = 0usize;
    for (ti, t) in taped.iter().enumerate() {
        let analytic = grads
            .wrt(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..analytic.len() {
            let orig = bufs[ti][i];
            bufs[ti][i] = orig + h;
            let up = eval(&bufs)?;
            bufs[ti][i] = orig - h;
            let down = eval(&bufs)?;
            bufs[ti][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[i], numeric));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: max_rel,
        tol,
        entries,
    })
}

fn randu(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..1.5)
        })
        .collect()
}

/// Fixed random linear functional turning a tensor-valued op into a scalar,
/// so the full Jacobian action gets exercised.
fn project(out: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let w = Tensor::new(weights.to_vec(), out.shape(), out.dtype())?;
    out.mul(&w)?.sum_all()
}

/// Gradient checks for every differentiable primitive, at `h = 1e-4` against
/// a `1e-4` relative tolerance in 64-bit.
pub fn primitive_suite() -> Result<Vec<CheckResult>> {
    let h = 1e-4;
    let tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();

    // elementwise binary with broadcasting
    let a = randu(&mut rng, 6, -2.0, 2.0);
    let b = randu(&mut rng, 3, 0.5, 2.0); // positive: shared with div
    let w = randu(&mut rng, 6, -1.0, 1.0);
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        let w = w.clone();
        out.push(check_grads(
            name,
            &[(&a, &[2, 3]), (&b, &[3])],
            h,
            tol,
            move |ts| {
                let r = match op {
                    0 => ts[0].add(&ts[1])?,
                    1 => ts[0].sub(&ts[1])?,
                    2 => ts[0].mul(&ts[1])?,
                    _ => ts[0].div(&ts[1])?,
                };
                project(&r, &w)
            },
        )?);
    }

    // unary activations
    let x_off = rand_off_zero(&mut rng, 8);
    let x_any = randu(&mut rng, 8, -2.0, 2.0);
    let x_pos = randu(&mut rng, 8, 0.3, 3.0);
    let w8 = randu(&mut rng, 8, -1.0, 1.0);
    for (name, which) in [
        ("relu", 0usize),
        ("abs", 1),
        ("sigmoid", 2),
        ("tanh", 3),
        ("sqrt", 4),
        ("scale", 5),
        ("add_scalar", 6),
    ] {
        let w8 = w8.clone();
        let data = match which {
            0 | 1 => &x_off,
            4 => &x_pos,
            _ => &x_any,
        }
        .clone();
        out.push(check_grads(name, &[(&data, &[2, 4])], h, tol, move |ts| {
            let r = match which {
                0 => ts[0].relu()?,
                1 => ts[0].abs()?,
                2 => ts[0].sigmoid()?,
                3 => ts[0].tanh()?,
                4 => ts[0].sqrt()?,
                5 => ts[0].scale(-1.75)?,
                _ => ts[0].add_scalar(0.6)?,
            };
            project(&r, &w8)
        })?);
    }

    // matmul, plain and batch-broadcast
    let ma = randu(&mut rng, 12, -1.0, 1.0);
    let mb = randu(&mut rng, 8, -1.0, 1.0);
    let wmm = randu(&mut rng, 6, -1.0, 1.0);
    {
        let wmm = wmm.clone();
        out.push(check_grads(
            "matmul",
            &[(&ma, &[3, 4]), (&mb, &[4, 2])],
            h,
            tol,
            move |ts| project(&ts[0].matmul(&ts[1])?, &wmm),
        )?);
    }
    let bma = randu(&mut rng, 24, -1.0, 1.0);
    let wb = randu(&mut rng, 12, -1.0, 1.0);
    {
        let wb = wb.clone();
        out.push(check_grads(
            "matmul_batched",
            &[(&bma, &[2, 3, 4]), (&mb, &[4, 2])],
            h,
            tol,
            move |ts| project(&ts[0].matmul(&ts[1])?, &wb),
        )?);
    }
    let ntb = randu(&mut rng, 8, -1.0, 1.0);
    let wnt = randu(&mut rng, 6, -1.0, 1.0);
    {
        let wnt = wnt.clone();
        out.push(check_grads(
            "matmul_nt",
            &[(&ma, &[3, 4]), (&ntb, &[2, 4])],
            h,
            tol,
            move |ts| project(&ts[0].matmul_nt(&ts[1])?, &wnt),
        )?);
    }

    // softmax / layer norm
    let sx = randu(&mut rng, 15, -3.0, 3.0);
    let wsx = randu(&mut rng, 15, -1.0, 1.0);
    {
        let w = wsx.clone();
        out.push(check_grads("softmax_lastdim", &[(&sx, &[3, 5])], h, tol, move |ts| {
            project(&ts[0].softmax_lastdim()?, &w)
        })?);
    }
    let lx = randu(&mut rng, 24, -2.0, 2.0);
    let wlx = randu(&mut rng, 24, -1.0, 1.0);
    {
        let w = wlx.clone();
        out.push(check_grads(
            "layer_norm_lastdim",
            &[(&lx, &[4, 6])],
            h,
            tol,
            move |ts| project(&ts[0].layer_norm_lastdim(1e-6)?, &w),
        )?);
    }

    // reductions
    let rx = randu(&mut rng, 24, -2.0, 2.0);
    let wr = randu(&mut rng, 3, -1.0, 1.0);
    {
        let w = wr.clone();
        out.push(check_grads("sum_axes", &[(&rx, &[2, 3, 4])], h, tol, move |ts| {
            project(&ts[0].sum_axes(&[0, 2], false)?, &w)
        })?);
    }
    {
        let w = wr.clone();
        out.push(check_grads("mean_axes", &[(&rx, &[2, 3, 4])], h, tol, move |ts| {
            project(&ts[0].mean_axes(&[0, 2], false)?, &w)
        })?);
    }

    // shape ops chained: reshape -> permute -> slice -> pad -> concat
    let cx = randu(&mut rng, 24, -2.0, 2.0);
    let wc = randu(&mut rng, 40, -1.0, 1.0);
    {
        let w = wc.clone();
        out.push(check_grads("shape_ops", &[(&cx, &[2, 3, 4])], h, tol, move |ts| {
            let r = ts[0].reshape(&[6, 4])?.permute(&[1, 0])?; // [4,6]
            let s = r.slice(1, 1, 4)?; // [4,4]
            let p = s.pad(&[(1, 0), (0, 1)])?; // [5,5]
            let c = Tensor::concat(1, &[&p, &p.slice(1, 0, 3)?])?; // [5,8]
            project(&c, &w)
        })?);
    }
    let bx = randu(&mut rng, 3, -2.0, 2.0);
    let wbx = randu(&mut rng, 12, -1.0, 1.0);
    {
        let w = wbx.clone();
        out.push(check_grads("broadcast_to", &[(&bx, &[1, 3])], h, tol, move |ts| {
            project(&ts[0].broadcast_to(&[4, 3])?, &w)
        })?);
    }

    // im2col
    let ix = randu(&mut rng, 50, -1.0, 1.0);
    let wi = randu(&mut rng, 2 * 9 * 9, -1.0, 1.0);
    {
        let w = wi.clone();
        out.push(check_grads("im2col", &[(&ix, &[1, 2, 5, 5])], h, tol, move |ts| {
            project(&ts[0].im2col(3, 3, 2, 1)?, &w)
        })?);
    }

    // bilinear sampling: both map and point gradients; fractional parts kept
    // away from the integer lattice where the sampler is non-differentiable
    let map = randu(&mut rng, 2 * 4 * 5, -1.0, 1.0);
    let mut pts = Vec::new();
    for _ in 0..6 {
        pts.push(rng.gen_range(0..4) as f64 + rng.gen_range(0.2..0.8)); // x in [0,5)
        pts.push(rng.gen_range(0..3) as f64 + rng.gen_range(0.2..0.8)); // y in [0,4)
    }
    let wsmp = randu(&mut rng, 6 * 2, -1.0, 1.0);
    {
        let w = wsmp.clone();
        out.push(check_grads(
            "bilinear_sample",
            &[(&map, &[1, 2, 4, 5]), (&pts, &[1, 6, 2])],
            h,
            tol,
            move |ts| project(&ts[0].bilinear_sample(&ts[1])?, &w),
        )?);
    }

    // gather / neighborhoods / positional encoding
    let gx = randu(&mut rng, 24, -1.0, 1.0);
    let wg = randu(&mut rng, 12, -1.0, 1.0);
    {
        let w = wg.clone();
        out.push(check_grads("gather_rows", &[(&gx, &[2, 4, 3])], h, tol, move |ts| {
            project(&ts[0].gather_rows(&[3, 1, 0, 0], 2)?, &w)
        })?);
    }
    let nx = randu(&mut rng, 24, -1.0, 1.0);
    let wn = randu(&mut rng, 24 * 9, -1.0, 1.0);
    {
        let w = wn.clone();
        out.push(check_grads(
            "neighbors_3x3_clamped",
            &[(&nx, &[2, 3, 4])],
            h,
            tol,
            move |ts| project(&ts[0].neighbors_3x3_clamped()?, &w),
        )?);
    }
    let px = randu(&mut rng, 10, 0.3, 7.7);
    let wp = randu(&mut rng, 5 * 8, -1.0, 1.0);
    {
        let w = wp.clone();
        out.push(check_grads("sincos_pe", &[(&px, &[5, 2])], h, tol, move |ts| {
            project(&ts[0].sincos_pe(8)?, &w)
        })?);
    }

    Ok(out)
}
