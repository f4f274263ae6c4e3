//! Built-in graph motifs with seeded parameters.
//!
//! These desk-scale graphs reproduce the dominant structures of the large
//! CNN families: plain chains (`mlp`), a producer feeding two consumers
//! (`fanout`), chained residual adds (`residual`), multi-branch concatenation
//! (`inception_mini`), chained concatenation with heavy reuse (`dense_mini`)
//! and a combination with a flatten boundary (`mixed`).

use thiserror::Error;

use crate::graph::{Graph, GraphMeta, GraphSpec, NodeKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MotifError {
    #[error("unknown motif '{0}' (expected one of {1})")]
    Unknown(String, String),
}

pub fn motif_names() -> &'static [&'static str] {
    &[
        "mlp",
        "fanout",
        "residual",
        "inception_mini",
        "dense_mini",
        "mixed",
    ]
}

/// BatchNorm epsilon used by the motif generators. Kept tiny so that the
/// running-stat compensation of scaling camouflage stays inside the
/// function-preservation budget (the compensation is exact only at eps = 0).
const MOTIF_BN_EPS: f64 = 1e-12;

struct Builder {
    nodes: Vec<NodeKind>,
    edges: Vec<(usize, usize, usize)>,
    rng: Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            nodes: Vec::new(),
            edges: Vec::new(),
            rng: Rng::new(seed),
        }
    }

    fn push(&mut self, kind: NodeKind, inputs: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(kind);
        for (port, &src) in inputs.iter().enumerate() {
            self.edges.push((src, id, port));
        }
        id
    }

    fn input(&mut self, shape: &[usize]) -> usize {
        self.push(
            NodeKind::Input {
                shape: shape.to_vec(),
            },
            &[],
        )
    }

    fn tensor(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform(-scale, scale)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn conv(&mut self, from: usize, c_in: usize, c_out: usize, k: usize, padding: usize) -> usize {
        let scale = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = self.tensor(&[c_out, c_in, k, k], scale);
        let bias = self.tensor(&[c_out], scale);
        self.push(
            NodeKind::Conv2d {
                weight,
                bias,
                groups: 1,
                stride: 1,
                padding,
            },
            &[from],
        )
    }

    fn linear(&mut self, from: usize, n_in: usize, n_out: usize) -> usize {
        let scale = 1.0 / (n_in as f64).sqrt();
        let weight = self.tensor(&[n_out, n_in], scale);
        let bias = self.tensor(&[n_out], scale);
        self.push(NodeKind::Linear { weight, bias }, &[from])
    }

    fn bn(&mut self, from: usize, c: usize) -> usize {
        let gamma = {
            let data = (0..c).map(|_| self.rng.uniform(0.8, 1.2)).collect();
            Tensor::new(vec![c], data).unwrap()
        };
        let beta = self.tensor(&[c], 0.1);
        let running_mean = self.tensor(&[c], 0.2);
        let running_var = {
            let data = (0..c).map(|_| self.rng.uniform(0.5, 1.5)).collect();
            Tensor::new(vec![c], data).unwrap()
        };
        self.push(
            NodeKind::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps: MOTIF_BN_EPS,
            },
            &[from],
        )
    }

    fn relu(&mut self, from: usize) -> usize {
        self.push(NodeKind::ReLU, &[from])
    }

    /// conv -> bn -> relu block; returns the relu node.
    fn cbr(&mut self, from: usize, c_in: usize, c_out: usize, k: usize, padding: usize) -> usize {
        let c = self.conv(from, c_in, c_out, k, padding);
        let b = self.bn(c, c_out);
        self.relu(b)
    }

    fn finish(self, motif: &str, seed: u64) -> Graph {
        Graph::build(GraphSpec {
            nodes: self.nodes,
            edges: self.edges,
            meta: GraphMeta {
                seed,
                motif: motif.to_string(),
            },
        })
        .expect("motif graphs are valid by construction")
    }
}

pub fn generate(name: &str, seed: u64) -> Result<Graph, MotifError> {
    // Offset the parameter stream by the motif name so different motifs with
    // the same seed do not share weights.
    let label = name
        .bytes()
        .fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    let seed_stream = Rng::new(seed).split(label).next_u64();
    match name {
        "mlp" => Ok(mlp(seed, seed_stream)),
        "fanout" => Ok(fanout(seed, seed_stream)),
        "residual" => Ok(residual(seed, seed_stream)),
        "inception_mini" => Ok(inception_mini(seed, seed_stream)),
        "dense_mini" => Ok(dense_mini(seed, seed_stream)),
        "mixed" => Ok(mixed(seed, seed_stream)),
        other => Err(MotifError::Unknown(
            other.to_string(),
            motif_names().join(", "),
        )),
    }
}

fn mlp(seed: u64, stream: u64) -> Graph {
    let mut b = Builder::new(stream);
    let x = b.input(&[12]);
    let l1 = b.linear(x, 12, 16);
    let r = b.relu(l1);
    let l2 = b.linear(r, 16, 8);
    b.push(NodeKind::Output, &[l2]);
    b.finish("mlp", seed)
}

fn fanout(seed: u64, stream: u64) -> Graph {
    let mut b = Builder::new(stream);
    let x = b.input(&[3, 4, 4]);
    let trunk = b.cbr(x, 3, 8, 3, 1);
    let left = b.cbr(trunk, 8, 6, 3, 1);
    let right = b.cbr(trunk, 8, 6, 3, 1);
    let cat = b.push(NodeKind::Cat, &[left, right]);
    let pool = b.push(NodeKind::AvgPoolGlobal, &[cat]);
    let head = b.linear(pool, 12, 5);
    b.push(NodeKind::Output, &[head]);
    b.finish("fanout", seed)
}

fn residual(seed: u64, stream: u64) -> Graph {
    let mut b = Builder::new(stream);
    let x = b.input(&[3, 4, 4]);
    let stem = b.cbr(x, 3, 8, 3, 1);

    let c1 = b.cbr(stem, 8, 8, 3, 1);
    let c2 = b.conv(c1, 8, 8, 3, 1);
    let bn2 = b.bn(c2, 8);
    let add1 = b.push(NodeKind::Add, &[bn2, stem]);
    let r1 = b.relu(add1);

    let c3 = b.cbr(r1, 8, 8, 3, 1);
    let c4 = b.conv(c3, 8, 8, 3, 1);
    let bn4 = b.bn(c4, 8);
    let add2 = b.push(NodeKind::Add, &[bn4, r1]);
    let r2 = b.relu(add2);

    let pool = b.push(NodeKind::AvgPoolGlobal, &[r2]);
    let head = b.linear(pool, 8, 5);
    b.push(NodeKind::Output, &[head]);
    b.finish("residual", seed)
}

fn inception_mini(seed: u64, stream: u64) -> Graph {
    let mut b = Builder::new(stream);
    let x = b.input(&[3, 4, 4]);
    let trunk = b.cbr(x, 3, 8, 3, 1);
    let bx = b.cbr(trunk, 8, 5, 3, 1);
    let by = b.cbr(trunk, 8, 7, 1, 0);
    let cat = b.push(NodeKind::Cat, &[bx, by]);
    let fuse = b.cbr(cat, 12, 8, 1, 0);
    let pool = b.push(NodeKind::AvgPoolGlobal, &[fuse]);
    let head = b.linear(pool, 8, 5);
    b.push(NodeKind::Output, &[head]);
    b.finish("inception_mini", seed)
}

fn dense_mini(seed: u64, stream: u64) -> Graph {
    let mut b = Builder::new(stream);
    let x = b.input(&[3, 4, 4]);
    let x0 = b.cbr(x, 3, 6, 3, 1);
    let y1 = b.cbr(x0, 6, 4, 3, 1);
    let cat1 = b.push(NodeKind::Cat, &[x0, y1]);
    let y2 = b.cbr(cat1, 10, 4, 3, 1);
    let cat2 = b.push(NodeKind::Cat, &[cat1, y2]);
    let fuse = b.cbr(cat2, 14, 8, 1, 0);
    let pool = b.push(NodeKind::AvgPoolGlobal, &[fuse]);
    let head = b.linear(pool, 8, 5);
    b.push(NodeKind::Output, &[head]);
    b.finish("dense_mini", seed)
}

fn mixed(seed: u64, stream: u64) -> Graph {
    let mut b = Builder::new(stream);
    let x = b.input(&[3, 4, 4]);
    let stem = b.cbr(x, 3, 8, 3, 1);

    let c1 = b.cbr(stem, 8, 8, 3, 1);
    let c2 = b.conv(c1, 8, 8, 3, 1);
    let bn2 = b.bn(c2, 8);
    let add = b.push(NodeKind::Add, &[bn2, stem]);
    let r = b.relu(add);

    let left = b.cbr(r, 8, 5, 3, 1);
    let right = b.cbr(r, 8, 5, 3, 1);
    let cat = b.push(NodeKind::Cat, &[left, right]);
    let fuse = b.cbr(cat, 10, 6, 1, 0);
    let flat = b.push(NodeKind::Flatten, &[fuse]);
    let head = b.linear(flat, 6 * 4 * 4, 5);
    b.push(NodeKind::Output, &[head]);
    b.finish("mixed", seed)
}
