//! Random datasets shared by the model unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Column, Dataset, Table};
use crate::simplex::{Composition, CompositionSample};

pub(crate) fn parts(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("p{i}")).collect()
}

fn random_composition(rng: &mut ChaCha8Rng, dim: usize) -> Composition {
    let logs: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Composition::from_logs(&logs, 1.0).unwrap()
}

/// Columns `x1`, `x2` (uniform), `f` (factor a/b/c) and `g` (groups 1..=4).
pub(crate) fn small(n: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<Composition> = (0..n).map(|_| random_composition(&mut rng, dim)).collect();
    let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let f: Vec<String> = (0..n).map(|i| ["a", "b", "c"][i % 3].to_string()).collect();
    let g: Vec<f64> = (0..n).map(|i| (i % 4 + 1) as f64).collect();
    let table = Table::new()
        .with("x1", Column::Numeric(x1))
        .unwrap()
        .with("x2", Column::Numeric(x2))
        .unwrap()
        .with("f", Column::Categorical(f))
        .unwrap()
        .with("g", Column::Numeric(g))
        .unwrap();
    Dataset::new(parts(dim), CompositionSample::new(comps).unwrap(), table).unwrap()
}

/// Soil-like covariates: `Lit` (13 levels), `Year`, `Elev`, `Slope`, `Lon`, `Lat`.
pub(crate) fn soil(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<Composition> = (0..n).map(|_| random_composition(&mut rng, 3)).collect();
    let lit: Vec<f64> = (0..n).map(|i| (i % 13 + 1) as f64).collect();
    let year: Vec<f64> = (0..n).map(|i| (2000 + i % 5) as f64).collect();
    let mut uniform = |lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
    };
    let elev = uniform(100.0, 900.0);
    let slope = uniform(0.0, 30.0);
    let lon = uniform(-3.0, -1.0);
    let lat = uniform(42.0, 43.5);
    let table = Table::new()
        .with("Lit", Column::Numeric(lit))
        .unwrap()
        .with("Year", Column::Numeric(year))
        .unwrap()
        .with("Elev", Column::Numeric(elev))
        .unwrap()
        .with("Slope", Column::Numeric(slope))
        .unwrap()
        .with("Lon", Column::Numeric(lon))
        .unwrap()
        .with("Lat", Column::Numeric(lat))
        .unwrap();
    Dataset::new(
        vec!["sand".into(), "silt".into(), "clay".into()],
        CompositionSample::new(comps).unwrap(),
        table,
    )
    .unwrap()
}

pub(crate) fn random_theta(total: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..total)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
