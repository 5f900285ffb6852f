//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub h: f64,
    pub tol: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub abs_floor: f64,
    /// Probe at most this many coordinates per parameter tensor.
    pub max_coords: Option<usize>,
    /// Clamp inputs closer than this to a bound count as a kink.
    pub kink_margin: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, abs_floor: 1e-6, max_coords: None, kink_margin: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst_coord: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub params: Vec<ParamReport>,
    /// Set when a clamp input sits within `kink_margin` of a bound; the
    /// comparison is then not meaningful and `pass` is not asserted.
    pub kink_proximity: bool,
    pub pass: bool,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval<F>(build: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &vars)?;
    let v = g.value(root);
    if v.len() != 1 || !v.item().is_finite() {
        return Err(Error::NonFinite(format!("loss {:?}", v.data())));
    }
    Ok((g, vars, root))
}

fn loss_at<F>(build: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, root) = eval(build, params)?;
    Ok(g.value(root).item())
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` must be a pure function of the parameter leaves it receives.
pub fn finite_difference_check<F>(build: F, params: &[Tensor], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, root) = eval(&build, params)?;
    let kink_proximity = g.kink_distance() < opts.kink_margin;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < p.len() => sample(&mut rng, p.len(), k).into_vec(),
            _ => (0..p.len()).collect(),
        };
        let mut worst = 0.0;
        let mut worst_coord = None;
        for &c in &coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.h;
            let lp = loss_at(&build, &work)?;
            work[pi].data_mut()[c] = orig - opts.h;
            let lm = loss_at(&build, &work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (lp - lm) / (2.0 * opts.h);
            let a = analytic[pi].data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst || worst_coord.is_none() {
                worst = rel;
                worst_coord = Some(c);
            }
        }
        reports.push(ParamReport {
            index: pi,
            max_rel_error: worst,
            coords_checked: coords.len(),
            worst_coord,
        });
    }
    let pass = !kink_proximity && reports.iter().all(|r| r.max_rel_error < opts.tol);
    Ok(FdReport { params: reports, kink_proximity, pass })
}
