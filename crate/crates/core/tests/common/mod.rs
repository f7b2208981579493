#![allow(dead_code)]

use fedbio_core::dataset::TabularDataset;
use fedbio_core::numerics::DenseMatrix;
use fedbio_core::problems::{FairFlClient, FairFlSpec};
use fedbio_core::{RngStream, Vector};

/// Random two-group dataset with `per_group` rows per group and `d` features.
pub fn random_dataset(per_group: usize, d: usize, rng: &mut RngStream) -> TabularDataset {
    let n = 2 * per_group;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        rows.push(rng.normal_vector(d, 1.0).into_inner());
        labels.push(((i / 2) % 2) as u8);
        groups.push(i % 2);
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let names = (0..d).map(|j| format!("f{j}")).collect();
    TabularDataset::new(DenseMatrix::from_rows(&refs), labels, groups, 2, names).unwrap()
}

/// Single-client fairness spec with `train_per_group` training rows and one
/// validation row per group.
pub fn tiny_fair_spec(train_per_group: usize, d: usize, lambda: f64, seed: u64) -> FairFlSpec {
    let mut rng = RngStream::new(seed, 99);
    FairFlSpec {
        clients: vec![FairFlClient {
            train: random_dataset(train_per_group, d, &mut rng),
            validation: random_dataset(1, d, &mut rng),
        }],
        lambda,
        num_groups: 2,
    }
}

/// Central differences of a scalar function.
pub fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    let mut g = Vector::zeros(x.dim());
    for i in 0..x.dim() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.as_mut_slice()[i] += h;
        m.as_mut_slice()[i] -= h;
        g.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

/// Central differences of a vector function along coordinate directions; column `i` is `∂F/∂x_i`.
pub fn fd_jacobian_columns(f: impl Fn(&Vector) -> Vector, x: &Vector, h: f64) -> Vec<Vector> {
    (0..x.dim())
        .map(|i| {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_mut_slice()[i] += h;
            m.as_mut_slice()[i] -= h;
            f(&p).sub(&f(&m)).scaled(0.5 / h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &Vector, b: &Vector, floor: f64) -> f64 {
    a.sub(b).norm() / b.norm().max(floor)
}

/// Every index tuple of length `k` over `0..n`.
pub fn index_tuples(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..n).map(move |i| {
                    let mut t = t.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}
