//! Finite-difference gradient verification. The numeric side rebuilds the
//! graph at perturbed inputs, so it stays independent of the analytic
//! backward rules it checks.

use crate::error::Result;
use crate::numerics::tape::{Graph, NodeId, Tensor};

/// Outcome of checking one graph: the max relative error per input leaf.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_err <= rtol
    }
}

const FD_EPS: f64 = 1e-5;

/// Compare analytic gradients against central finite differences for every
/// element of every input. `build` receives leaves for the given inputs and
/// returns the scalar loss node.
pub fn grad_check<F>(inputs: &[Tensor], build: F, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        g.scalar_value(loss)
    };

    // analytic pass
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
        })
        .collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for ei in 0..t.numel() {
            let orig = work[ti].data[ei];
            work[ti].data[ei] = orig + FD_EPS;
            let up = eval(&work);
            work[ti].data[ei] = orig - FD_EPS;
            let down = eval(&work);
            work[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_input.push(worst);
        let _ = rtol;
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { per_input, max_rel_err })
}

/// Run `trials` randomized finite-difference checks against every primitive
/// op, returning (op name, worst relative error) pairs.
pub fn check_primitive_ops(trials: usize, seed: u64) -> Vec<(String, f64)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(String, f64)> = Vec::new();

    let mut run = |name: &str,
                   rng: &mut rand_chacha::ChaCha8Rng,
                   make: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)| {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (inputs, build) = make(rng);
            let report = grad_check(&inputs, |g, ids| build(g, ids), 1e-4).expect("grad check");
            worst = worst.max(report.max_rel_err);
        }
        results.push((name.to_string(), worst));
    };

    fn rand_t(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..r * c).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::matrix(r, c, data)
    }
    // keep relu inputs away from the kink where FD is meaningless
    fn rand_off_zero(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c)
            .map(|_| {
                let mut v: f64 = rng.gen_range(-2.0..2.0);
                while v.abs() < 5e-3 {
                    v = rng.gen_range(-2.0..2.0);
                }
                v
            })
            .collect();
        Tensor::matrix(r, c, data)
    }
    // weighted reduction so per-element grads are non-uniform
    fn weighted(g: &mut Graph, x: NodeId, weights: &Tensor) -> NodeId {
        let w = g.constant(weights.clone());
        let p = g.mul(x, w);
        g.sum_all(p)
    }

    macro_rules! check {
        ($name:expr, $body:expr) => {
            run($name, &mut rng, &mut $body);
        };
    }

    check!("add", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 4, -2.0, 2.0);
        let b = rand_t(rng, 3, 4, -2.0, 2.0);
        let w = rand_t(rng, 3, 4, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.add(ids[0], ids[1]);
            weighted(g, s, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("sub", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 4, -2.0, 2.0);
        let b = rand_t(rng, 3, 4, -2.0, 2.0);
        let w = rand_t(rng, 3, 4, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.sub(ids[0], ids[1]);
            weighted(g, s, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("mul", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 4, -2.0, 2.0);
        let b = rand_t(rng, 3, 4, -2.0, 2.0);
        let w = rand_t(rng, 3, 4, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.mul(ids[0], ids[1]);
            weighted(g, s, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("add_bias", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 4, -2.0, 2.0);
        let b = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = rand_t(rng, 3, 4, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.add_bias(ids[0], ids[1]);
            weighted(g, s, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("add_channel", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 4, 5, -2.0, 2.0);
        let b = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = rand_t(rng, 4, 5, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.add_channel(ids[0], ids[1]);
            weighted(g, s, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("mul_channel", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 4, 5, -2.0, 2.0);
        let b = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = rand_t(rng, 4, 5, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.mul_channel(ids[0], ids[1]);
            weighted(g, s, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("mul_scalar_node", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 4, -2.0, 2.0);
        let s = Tensor::scalar(rng.gen_range(0.2..2.0));
        let w = rand_t(rng, 3, 4, -1.0, 1.0);
        (vec![a, s], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let p = g.mul_scalar_node(ids[0], ids[1]);
            weighted(g, p, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("scale_add_const", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 4, -2.0, 2.0);
        let w = rand_t(rng, 3, 4, -1.0, 1.0);
        (vec![a], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let s = g.scale(ids[0], 1.7);
            let s = g.add_const(s, 0.3);
            weighted(g, s, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("matmul", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 5, -1.0, 1.0);
        let b = rand_t(rng, 5, 2, -1.0, 1.0);
        let w = rand_t(rng, 3, 2, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let m = g.matmul(ids[0], ids[1]);
            weighted(g, m, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("transpose_reshape", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 4, -1.0, 1.0);
        let w = rand_t(rng, 2, 6, -1.0, 1.0);
        (vec![a], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let t = g.transpose(ids[0]);
            let r = g.reshape(t, vec![2, 6]);
            weighted(g, r, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    for (name, apply) in [
        ("relu", 0usize),
        ("gelu", 1),
        ("silu", 2),
        ("tanh", 3),
        ("sigmoid", 4),
    ] {
        check!(name, |rng: &mut rand_chacha::ChaCha8Rng| {
            let a = rand_off_zero(rng, 3, 4);
            let w = rand_t(rng, 3, 4, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
                let y = match apply {
                    0 => g.relu(ids[0]),
                    1 => g.gelu(ids[0]),
                    2 => g.silu(ids[0]),
                    3 => g.tanh(ids[0]),
                    _ => g.sigmoid(ids[0]),
                };
                weighted(g, y, &w)
            }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
        });
    }
    for (name, apply) in [("exp", 0usize), ("ln", 1), ("sqrt", 2), ("rsqrt", 3)] {
        check!(name, |rng: &mut rand_chacha::ChaCha8Rng| {
            let a = rand_t(rng, 3, 4, 0.5, 2.0);
            let w = rand_t(rng, 3, 4, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
                let y = match apply {
                    0 => g.exp(ids[0]),
                    1 => g.ln(ids[0]),
                    2 => g.sqrt(ids[0]),
                    _ => g.rsqrt(ids[0]),
                };
                weighted(g, y, &w)
            }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
        });
    }
    check!("softmax", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 5, -2.0, 2.0);
        let w = rand_t(rng, 3, 5, -1.0, 1.0);
        (vec![a], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.softmax(ids[0]);
            weighted(g, y, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("layer_norm", |rng: &mut rand_chacha::ChaCha8Rng| {
        let x = rand_t(rng, 3, 6, -2.0, 2.0);
        let gamma = Tensor::vector((0..6).map(|_| rng.gen_range(0.5..1.5)).collect());
        let beta = Tensor::vector((0..6).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let w = rand_t(rng, 3, 6, -1.0, 1.0);
        (vec![x, gamma, beta], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            weighted(g, y, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("group_norm", |rng: &mut rand_chacha::ChaCha8Rng| {
        let x = rand_t(rng, 6, 4, -2.0, 2.0);
        let w = rand_t(rng, 6, 4, -1.0, 1.0);
        (vec![x], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.group_norm(ids[0], 3, 1e-5);
            weighted(g, y, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("conv1d", |rng: &mut rand_chacha::ChaCha8Rng| {
        let x = rand_t(rng, 3, 7, -1.0, 1.0);
        let wt = Tensor::new(vec![2, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::vector((0..2).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let w = rand_t(rng, 2, 4, -1.0, 1.0);
        (vec![x, wt, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.conv1d(ids[0], ids[1], ids[2], 2, 1);
            weighted(g, y, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("upsample", |rng: &mut rand_chacha::ChaCha8Rng| {
        let x = rand_t(rng, 3, 4, -1.0, 1.0);
        let w = rand_t(rng, 3, 8, -1.0, 1.0);
        (vec![x], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let y = g.upsample(ids[0], 2);
            weighted(g, y, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("embed", |rng: &mut rand_chacha::ChaCha8Rng| {
        let table = rand_t(rng, 5, 3, -1.0, 1.0);
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let w = rand_t(rng, 4, 3, -1.0, 1.0);
        (vec![table], Box::new(move |g: &mut Graph, nids: &[NodeId]| {
            let y = g.embed(nids[0], &ids);
            weighted(g, y, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("concat_slice_rows", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 2, 3, -1.0, 1.0);
        let b = rand_t(rng, 3, 3, -1.0, 1.0);
        let w = rand_t(rng, 3, 3, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let cat = g.concat_rows(&[ids[0], ids[1]]);
            let sl = g.slice_rows(cat, 1, 3);
            weighted(g, sl, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("concat_slice_cols", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 3, 2, -1.0, 1.0);
        let b = rand_t(rng, 3, 3, -1.0, 1.0);
        let w = rand_t(rng, 3, 3, -1.0, 1.0);
        (vec![a, b], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let cat = g.concat_cols(&[ids[0], ids[1]]);
            let sl = g.slice_cols(cat, 1, 3);
            weighted(g, sl, &w)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("reductions", |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rand_t(rng, 4, 3, -1.0, 1.0);
        let w = rand_t(rng, 1, 3, -1.0, 1.0);
        (vec![a], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            let mr = g.mean_rows(ids[0]);
            let wsum = weighted(g, mr, &w);
            let ma = g.mean_all(ids[0]);
            let sa = g.sum_all(ids[0]);
            let t = g.add(ma, sa);
            g.add(wsum, t)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });
    check!("masked_cross_entropy", |rng: &mut rand_chacha::ChaCha8Rng| {
        let logits = rand_t(rng, 4, 5, -2.0, 2.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let mask: Vec<bool> = (0..4).map(|i| i != 2).collect();
        (vec![logits], Box::new(move |g: &mut Graph, ids: &[NodeId]| {
            g.masked_cross_entropy(ids[0], &targets, &mask)
        }) as Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>)
    });

    results
}
