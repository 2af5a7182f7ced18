use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How [`grad_check`] probes the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckMode {
    /// One central difference per coordinate.
    Coordinates,
    /// Directional derivatives along this many seeded random directions.
    Projections { count: usize, seed: u64 },
    /// At most `count` coordinates chosen by the seed.
    Subset { count: usize, seed: u64 },
}

fn eval<'a, F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let y = f(&mut tape, v)?;
    let out = tape.value(y);
    if out.numel() != 1 {
        return Err(Error::NonScalarRoot(out.shape().to_vec()));
    }
    Ok(out.item())
}

/// Largest relative error between the tape gradient of `f` at `x` and
/// central differences with step `h`.
///
/// Each comparison divides by `max(|analytic|, |numeric|, floor)` where the
/// floor is 1e-3 of the largest analytic magnitude seen, so coordinates whose
/// true derivative vanishes are judged against the gradient's scale rather
/// than against zero.
pub fn grad_check<'a, F>(f: F, x: &Tensor, h: f64, mode: GradCheckMode) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let y = f(&mut tape, v)?;
    let grads = tape.backward(y)?;
    let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let probe = |dir: &[f64]| -> Result<(f64, f64)> {
        let mut xp = x.clone();
        let mut xm = x.clone();
        for ((p, m), d) in xp.data_mut().iter_mut().zip(xm.data_mut().iter_mut()).zip(dir) {
            *p += h * d;
            *m -= h * d;
        }
        let num = (eval(&f, &xp)? - eval(&f, &xm)?) / (2.0 * h);
        let ana: f64 = g.data().iter().zip(dir).map(|(a, b)| a * b).sum();
        Ok((ana, num))
    };
    let n = x.numel();
    let unit = |i: usize| {
        let mut d = alloc::vec![0.0; n];
        d[i] = 1.0;
        d
    };
    match mode {
        GradCheckMode::Coordinates => {
            for i in 0..n {
                pairs.push(probe(&unit(i))?);
            }
        }
        GradCheckMode::Subset { count, seed } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count.min(n) {
                let i = rng.random_range(0..n);
                pairs.push(probe(&unit(i))?);
            }
        }
        GradCheckMode::Projections { count, seed } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                pairs.push(probe(&d)?);
            }
        }
    }
    let scale = pairs.iter().fold(0.0f64, |s, (a, _)| s.max(a.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    Ok(pairs.iter().fold(0.0f64, |worst, (a, n)| worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor))))
}
