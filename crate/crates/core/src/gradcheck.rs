//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates probed per input; `None` probes every coordinate.
    pub coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-5,
            coords_per_input: Some(10),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.coords.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(move |c| c.error >= self.tol)
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.detached())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the reverse-mode gradient of scalar `f` against central
/// differences at a sample of coordinates of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.detached())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inputs.to_vec();
    let mut coords = Vec::new();
    for (ii, t) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match opts.coords_per_input {
            Some(k) if k < t.numel() => {
                let mut s = sample(&mut rng, t.numel(), k).into_vec();
                s.sort_unstable();
                s
            }
            _ => (0..t.numel()).collect(),
        };
        for index in indices {
            let orig = t.data()[index];
            probe[ii].data_mut()[index] = orig + opts.h;
            let plus = eval_scalar(&f, &probe)?;
            probe[ii].data_mut()[index] = orig - opts.h;
            let minus = eval_scalar(&f, &probe)?;
            probe[ii].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[ii][index];
            coords.push(CoordCheck {
                input: ii,
                index,
                analytic: a,
                numeric,
                error: relative_error(a, numeric),
            });
        }
    }
    Ok(GradCheckReport { tol: opts.tol, coords })
}
