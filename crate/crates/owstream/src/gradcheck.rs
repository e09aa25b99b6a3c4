//! Finite-difference validation of the analytic gradients of the joint
//! objective through the full network, per layer.
//!
//! The triplet set is mined once and frozen so the perturbed loss stays a
//! smooth function of the parameters along each checked coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metric::{mine_triplets, Label, MarginConfig};
use crate::network::{NetworkConfig, NetworkGrads};
use crate::owc::{overall_grads, overall_loss, ConvOwcModel, Head, HeadGrads};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Flat offsets of coordinates over tolerance.
    pub failed_coords: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_layer: Vec<LayerReport>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

struct Harness {
    model: ConvOwcModel,
    xs: Vec<Vec<f64>>,
    labels: Vec<Label>,
    triplets: Vec<crate::metric::Triplet>,
    margin: MarginConfig,
}

impl Harness {
    fn new(seed: u64) -> Result<Harness> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = NetworkConfig::with_input(8, 8);
        cfg.conv_channels = vec![6];
        cfg.hidden_units = 32;
        cfg.embed_dim = 8;
        let mut model = ConvOwcModel::init(cfg, vec![0, 1], &mut rng)?;
        for h in &mut model.heads {
            for w in &mut h.weights {
                *w = rng.gen_range(-1.0..1.0);
            }
            h.bias = rng.gen_range(-0.5..0.5);
        }
        let xs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<Label> = (0..8).map(|i| (i % 2) as Label).collect();
        let margin = MarginConfig { gamma: 1.0, beta: 1.0 };
        let embeddings: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| model.embed(x))
            .collect::<Result<_>>()?;
        let triplets = mine_triplets(&embeddings, &labels, margin.gamma);
        Ok(Harness {
            model,
            xs,
            labels,
            triplets,
            margin,
        })
    }

    fn loss(&self) -> Result<f64> {
        overall_loss(
            &self.model,
            &self.xs,
            &self.labels,
            &self.triplets,
            self.margin,
        )
    }

    fn analytic(&self) -> Result<(NetworkGrads, HeadGrads)> {
        let (_, n, h) = overall_grads(
            &self.model,
            &self.xs,
            &self.labels,
            &self.triplets,
            self.margin,
        )?;
        Ok((n, h))
    }
}

fn layer_names(model: &ConvOwcModel) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..model.phi.convs.len() {
        names.push(format!("conv{}.kernels", i));
        names.push(format!("conv{}.bias", i));
    }
    names.push("hidden.weights".into());
    names.push("hidden.bias".into());
    names.push("embed.weights".into());
    names.push("embed.bias".into());
    for i in 0..model.heads.len() {
        names.push(format!("head{}.weights", i));
        names.push(format!("head{}.bias", i));
    }
    names
}

fn grad_slices<'a>(net: &'a NetworkGrads, heads: &'a HeadGrads) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = net.slices().iter().map(|s| s.to_vec()).collect();
    for h in heads {
        out.push(h.weights.clone());
        out.push(vec![h.bias]);
    }
    out
}

fn param_slices_mut(model: &mut ConvOwcModel) -> Vec<&mut [f64]> {
    let mut v = model.phi.slices_mut();
    for Head { weights, bias } in &mut model.heads {
        v.push(weights);
        v.push(std::slice::from_mut(bias));
    }
    v
}

/// Checks `coords_per_layer` random coordinates of every layer (all
/// coordinates when a layer is smaller than that) against central finite
/// differences.
///
/// `sabotage` is a validation hook: it offsets the analytic gradient of one
/// coordinate so the check must fail.
pub fn run_gradcheck(
    seed: u64,
    coords_per_layer: usize,
    sabotage: Option<f64>,
) -> Result<GradCheckReport> {
    let mut harness = Harness::new(seed)?;
    let (net_g, head_g) = harness.analytic()?;
    let mut analytic = grad_slices(&net_g, &head_g);
    if let Some(delta) = sabotage {
        for v in analytic[0].iter_mut() {
            *v += delta;
        }
    }
    let names = layer_names(&harness.model);
    debug_assert_eq!(names.len(), analytic.len());

    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut per_layer = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut total = 0usize;
    for (li, name) in names.iter().enumerate() {
        let len = analytic[li].len();
        let coords: Vec<usize> = if len <= coords_per_layer {
            (0..len).collect()
        } else {
            (0..coords_per_layer)
                .map(|_| pick_rng.gen_range(0..len))
                .collect()
        };
        let mut layer_max: f64 = 0.0;
        let mut failed = Vec::new();
        for &ci in &coords {
            let numeric = {
                let orig = param_slices_mut(&mut harness.model)[li][ci];
                param_slices_mut(&mut harness.model)[li][ci] = orig + FD_STEP;
                let plus = harness.loss()?;
                param_slices_mut(&mut harness.model)[li][ci] = orig - FD_STEP;
                let minus = harness.loss()?;
                param_slices_mut(&mut harness.model)[li][ci] = orig;
                (plus - minus) / (2.0 * FD_STEP)
            };
            let a = analytic[li][ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > REL_TOL {
                failed.push(ci);
            }
            layer_max = layer_max.max(rel);
            total += 1;
        }
        max_rel_err = max_rel_err.max(layer_max);
        per_layer.push(LayerReport {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: layer_max,
            failed_coords: failed,
        });
    }
    let pass = per_layer.iter().all(|l| l.failed_coords.is_empty());
    Ok(GradCheckReport {
        per_layer,
        max_rel_err,
        coords_checked: total,
        pass,
    })
}
