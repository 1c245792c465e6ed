//! Named finite-difference checks of every differentiable building
//! block, at double precision.
//!
//! Each check reduces the op's output to a scalar through a fixed random
//! probe, `f = sum(out * probe)`, so every output coordinate contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GradCheck, Graph, Var};
use crate::blocks::{DenseBlock, DenseBlockConfig, DenseLayer, TransitionDown, TransitionUp};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const THRESHOLD: f64 = 1e-4;

/// Every check, in the order `all` runs them.
pub const CHECKS: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "relu",
    "concat",
    "softmax",
    "cross_entropy",
    "bilinear_sample",
    "deformable_conv2d",
    "dense_layer",
    "dense_layer_deformable",
    "dense_block",
    "dense_block_deformable",
    "transition_down",
    "transition_up",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

/// Render outcomes as an aligned table with a PASS/FAIL column.
pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let mut out = format!("{:<24} {:>12} {:>8}  result\n", "op", "max_rel_err", "coords");
    for o in outcomes {
        out.push_str(&format!(
            "{:<24} {:>12.3e} {:>8}  {}\n",
            o.name,
            o.max_rel_error,
            o.coordinates,
            if o.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}

struct Ctx {
    rng: ChaCha8Rng,
}

impl Ctx {
    fn new(name: &str) -> Self {
        let seed = name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        Ctx {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| self.rng.random_range(lo..hi))
    }

    /// Magnitudes in `[0.1, 1)` with random sign, away from ReLU's kink.
    fn signed(&mut self, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| {
            let m = self.rng.random_range(0.1..1.0);
            if self.rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    /// Fractional part in `[0.1, 0.9]`, integer part in `lo..=hi`.
    fn fractional(&mut self, shape: Shape, lo: i32, hi: i32) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| {
            self.rng.random_range(lo..=hi) as f64 + self.rng.random_range(0.1..0.9)
        })
    }

    /// Fill a parameter store. Offset predictors get tiny weights and
    /// biases near one half, so sampling stays well inside grid cells.
    fn fill<T: crate::Scalar>(&mut self, store: &mut ParamStore<T>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let kind = store.kind(id);
            let is_bias = store.name(id).ends_with(".bias");
            let t = store.get_mut(id);
            for v in t.data_mut() {
                let x = match (kind, is_bias) {
                    (ParamKind::Offset, true) => 0.5 + self.rng.random_range(-0.1..0.1),
                    (ParamKind::Offset, false) => self.rng.random_range(-0.003..0.003),
                    (_, true) => self.rng.random_range(-0.2..0.2),
                    _ => self.rng.random_range(-0.5..0.5),
                };
                *v = T::from_f64_lossy(x);
            }
        }
    }
}

/// `sum(out * probe)` with `probe` a fixed random tensor.
fn probe(g: &mut Graph<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p)?;
    g.sum(prod)
}

fn check<F>(name: &'static str, tamper: f64, f: F, inputs: &[Tensor<f64>]) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = GradCheck { step: STEP, tamper }.run(f, inputs)?;
    Ok(CheckOutcome {
        name,
        max_rel_error: r.max_rel_error,
        coordinates: r.coordinates,
    })
}

/// Check a parameterized module: inputs are `x` followed by every
/// parameter of `store`.
fn check_module<M>(
    name: &'static str,
    tamper: f64,
    ctx: &mut Ctx,
    x: Tensor<f64>,
    store: ParamStore<f64>,
    out_shape: Shape,
    forward: M,
) -> Result<CheckOutcome>
where
    M: Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>,
{
    let pr = ctx.uniform(out_shape, -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    check(
        name,
        tamper,
        |g, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let y = forward(g, &bound, v[0])?;
            probe(g, y, &pr)
        },
        &inputs,
    )
}

/// Run one named check. `tamper` scales analytic gradients by
/// `1 + tamper`; any nonzero value must make the check fail.
pub fn run_check(name: &str, tamper: f64) -> Result<CheckOutcome> {
    let Some(&name) = CHECKS.iter().find(|&&c| c == name) else {
        return Err(Error::invalid(
            "gradcheck",
            format!("unknown op '{name}'; known: all, {}", CHECKS.join(", ")),
        ));
    };
    let mut ctx = Ctx::new(name);
    let c = &mut ctx;
    match name {
        "conv2d" => {
            let x = c.uniform(Shape::new(2, 3, 6, 5), -1.0, 1.0);
            let w = c.uniform(Shape::new(4, 3, 3, 3), -1.0, 1.0);
            let b = c.uniform(Shape::bias(4), -1.0, 1.0);
            let p1 = c.uniform(Shape::new(2, 4, 6, 5), -1.0, 1.0);
            let p2 = c.uniform(Shape::new(2, 4, 2, 2), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y1 = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    let y2 = g.conv2d(v[0], v[1], None, 2, 0)?;
                    let a = probe(g, y1, &p1)?;
                    let b = probe(g, y2, &p2)?;
                    g.add(a, b)
                },
                &[x, w, b],
            )
        }
        "conv_transpose2d" => {
            let x = c.uniform(Shape::new(2, 3, 3, 4), -1.0, 1.0);
            let w = c.uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0);
            let b = c.uniform(Shape::bias(2), -1.0, 1.0);
            let pr = c.uniform(Shape::new(2, 2, 6, 8), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)?;
                    probe(g, y, &pr)
                },
                &[x, w, b],
            )
        }
        "max_pool2d" => {
            let x = c.uniform(Shape::new(2, 3, 4, 6), -1.0, 1.0);
            let pr = c.uniform(Shape::new(2, 3, 2, 3), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y = g.max_pool2d(v[0], 2, 2)?;
                    probe(g, y, &pr)
                },
                &[x],
            )
        }
        "relu" => {
            let x = c.signed(Shape::new(2, 3, 4, 4));
            let pr = c.uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y = g.relu(v[0])?;
                    probe(g, y, &pr)
                },
                &[x],
            )
        }
        "concat" => {
            let a = c.uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0);
            let b = c.uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0);
            let pr = c.uniform(Shape::new(2, 7, 3, 3), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y = g.concat_channels(&[v[0], v[1], v[0]])?;
                    probe(g, y, &pr)
                },
                &[a, b],
            )
        }
        "softmax" => {
            let x = c.uniform(Shape::new(2, 4, 3, 3), -2.0, 2.0);
            let pr = c.uniform(Shape::new(2, 4, 3, 3), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y = g.softmax_channels(v[0])?;
                    probe(g, y, &pr)
                },
                &[x],
            )
        }
        "cross_entropy" => {
            let x = c.uniform(Shape::new(2, 4, 3, 3), -2.0, 2.0);
            let target: Vec<u8> = (0..18).map(|_| c.rng.random_range(0..4)).collect();
            let weights = [0.5, 1.0, 2.0, 1.5];
            check(name, tamper, |g, v| g.cross_entropy(v[0], &target, &weights), &[x])
        }
        "bilinear_sample" => {
            let x = c.uniform(Shape::new(2, 2, 5, 6), -1.0, 1.0);
            // Includes positions partly outside the image.
            let pos = c.fractional(Shape::new(2, 2, 3, 4), -1, 5);
            let pr = c.uniform(Shape::new(2, 2, 3, 4), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y = g.bilinear_sample(v[0], v[1])?;
                    probe(g, y, &pr)
                },
                &[x, pos],
            )
        }
        "deformable_conv2d" => {
            let x = c.uniform(Shape::new(2, 3, 5, 5), -1.0, 1.0);
            let w = c.uniform(Shape::new(4, 3, 3, 3), -1.0, 1.0);
            let b = c.uniform(Shape::bias(4), -1.0, 1.0);
            let off = c.fractional(Shape::new(2, 18, 5, 5), -2, 1);
            let pr = c.uniform(Shape::new(2, 4, 5, 5), -1.0, 1.0);
            check(
                name,
                tamper,
                |g, v| {
                    let y = g.deformable_conv2d(v[0], v[1], Some(v[2]), v[3], 1)?;
                    probe(g, y, &pr)
                },
                &[x, w, b, off],
            )
        }
        "dense_layer" | "dense_layer_deformable" => {
            let cfg = DenseBlockConfig {
                num_layers: 1,
                growth_rate: 3,
                deformable: name == "dense_layer_deformable",
            };
            let mut store = ParamStore::new();
            let layer = DenseLayer::new(&mut store, "layer", 3, &cfg);
            c.fill(&mut store);
            let x = c.signed(Shape::new(2, 3, 5, 5));
            check_module(name, tamper, c, x, store, Shape::new(2, 3, 5, 5), |g, p, x| {
                layer.forward(g, p, x)
            })
        }
        "dense_block" | "dense_block_deformable" => {
            let cfg = DenseBlockConfig {
                num_layers: 2,
                growth_rate: 2,
                deformable: name == "dense_block_deformable",
            };
            let mut store = ParamStore::new();
            let block = DenseBlock::new(&mut store, "block", 2, cfg)?;
            c.fill(&mut store);
            let x = c.signed(Shape::new(1, 2, 4, 5));
            check_module(name, tamper, c, x, store, Shape::new(1, 6, 4, 5), |g, p, x| {
                block.forward(g, p, x)
            })
        }
        "transition_down" => {
            let mut store = ParamStore::new();
            let td = TransitionDown::new(&mut store, "td", 3);
            c.fill(&mut store);
            let x = c.uniform(Shape::new(2, 3, 4, 6), -1.0, 1.0);
            check_module(name, tamper, c, x, store, Shape::new(2, 3, 2, 3), |g, p, x| {
                td.forward(g, p, x)
            })
        }
        "transition_up" => {
            let mut store = ParamStore::new();
            let tu = TransitionUp::new(&mut store, "tu", 3, 2);
            c.fill(&mut store);
            let x = c.uniform(Shape::new(2, 3, 3, 2), -1.0, 1.0);
            check_module(name, tamper, c, x, store, Shape::new(2, 2, 6, 4), |g, p, x| {
                tu.forward(g, p, x)
            })
        }
        _ => unreachable!("every listed check is handled"),
    }
}

/// Run `name`, or every check for `"all"`.
pub fn run(name: &str, tamper: f64) -> Result<Vec<CheckOutcome>> {
    if name == "all" {
        CHECKS.iter().map(|c| run_check(c, tamper)).collect()
    } else {
        Ok(vec![run_check(name, tamper)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_rejected() {
        assert!(run("nope", 0.0).is_err());
    }

    #[test]
    fn cheap_checks_pass() {
        for name in ["relu", "softmax", "cross_entropy", "max_pool2d", "concat"] {
            let o = run_check(name, 0.0).unwrap();
            assert!(o.passed(), "{o:?}");
        }
    }

    #[test]
    fn every_check_passes() {
        for o in run("all", 0.0).unwrap() {
            assert!(o.passed(), "{o:?}");
        }
    }

    #[test]
    fn tampering_is_caught() {
        let o = run_check("conv2d", 1e-3).unwrap();
        assert!(!o.passed(), "{o:?}");
    }
}
