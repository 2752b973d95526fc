use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per tensor; tensors at most this large are checked in full.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 12,
            seed: 0,
        }
    }
}

/// Relative error used by the checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences. Returns the maximum relative error over the sampled
/// coordinates.
pub fn finite_diff_check<F>(params: &[Tensor], f: F, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| g.grad(*v).cloned().expect("leaf gradient"))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= opts.coords_per_tensor {
            (0..p.len()).collect()
        } else {
            sample(&mut rng, p.len(), opts.coords_per_tensor).into_vec()
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[pi].data()[c], numeric));
        }
    }
    Ok(worst)
}

/// [`finite_diff_check`] over the trainable tensors of a [`ParamSet`].
pub fn check_param_set<F>(
    params: &ParamSet,
    trainable: impl Fn(&str) -> bool,
    f: F,
    opts: GradCheckOptions,
) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let ids: Vec<_> = params.iter().filter(|(_, n, _)| trainable(n)).map(|(id, _, _)| id).collect();
    let tensors: Vec<Tensor> = ids.iter().map(|&id| params.get(id).clone()).collect();
    finite_diff_check(
        &tensors,
        |g, vars| {
            // checked tensors come from `vars`, everything else is constant
            let bound = params.bind_with(g, &ids, vars);
            f(g, &bound)
        },
        opts,
    )
}

impl ParamSet {
    /// Bind reusing existing graph vars for `ids`; the rest become constants.
    pub(crate) fn bind_with(&self, g: &mut Graph, ids: &[super::params::ParamId], vars: &[Var]) -> Bound {
        let mut out = Vec::with_capacity(self.len());
        for id in self.ids() {
            match ids.iter().position(|x| *x == id) {
                Some(pos) => out.push(vars[pos]),
                None => out.push(g.constant(self.get(id).clone())),
            }
        }
        Bound::from_vars(out)
    }
}
