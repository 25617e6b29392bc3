//! Central finite-difference checks of recorded gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitude below which gradients are compared absolutely rather than
/// relatively; central differences at `STEP` carry roundoff around 1e-11.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One compared coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        rel_error(self.analytic, self.numeric)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub probes: Vec<Probe>,
}

impl Report {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, Probe::rel_error)
    }

    pub fn merge(&mut self, other: Report) {
        self.probes.extend(other.probes);
    }
}

/// Compare gradients of the scalar built by `f` against central differences
/// for every element of every input.
pub fn check_fn<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = Report::default();
    let mut work = inputs.to_vec();
    for (k, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.wrt(var, input);
        for i in 0..input.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.probes.push(Probe {
                name: format!("input{k}"),
                index: i,
                analytic: analytic.data()[i],
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(report)
}

/// Check cross-entropy gradients of `model` at `samples` randomly chosen
/// scalar parameters: a parameter tensor is drawn uniformly, then an element
/// of it uniformly.
pub fn check_model(
    model: &Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    samples: usize,
    seed: u64,
    h: f64,
) -> Result<Report> {
    let (_, grads, _) = model.loss_and_grads(images, labels)?;
    let paths: Vec<String> = model.params().paths().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut report = Report::default();
    for _ in 0..samples {
        let path = &paths[rng.gen_range(0..paths.len())];
        let len = model.params().get(path)?.len();
        let index = rng.gen_range(0..len);
        let orig = model.params().get(path)?.data()[index];

        work.params_mut().get_mut(path)?.data_mut()[index] = orig + h;
        let plus = work.loss(images, labels)?;
        work.params_mut().get_mut(path)?.data_mut()[index] = orig - h;
        let minus = work.loss(images, labels)?;
        work.params_mut().get_mut(path)?.data_mut()[index] = orig;

        report.probes.push(Probe {
            name: path.clone(),
            index,
            analytic: grads[path].data()[index],
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(report)
}
