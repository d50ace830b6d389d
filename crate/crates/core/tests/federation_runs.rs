#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::Path;

use fedinstruct_core::checkpoint::read_checkpoint;
use fedinstruct_core::config::FederationConfig;
use fedinstruct_core::corpus_io::GeneratedDataset;
use fedinstruct_core::federation::{checkpoint_name, run_federation, Quadratic, SimulatedTrainer};
use fedinstruct_core::rng::seeded_rng;
use fedinstruct_core::tensor::ShapeSpec;
use fedinstruct_core::InstructionPair;

fn dataset(id: &str, n: usize) -> GeneratedDataset {
    GeneratedDataset {
        client_id: id.to_string(),
        pairs: (0..n)
            .map(|i| InstructionPair::new(format!("q{i}"), format!("a{i}"), format!("{id}-{i}")))
            .collect(),
    }
}

struct Problem {
    rows: usize,
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn problems(m: usize, rows: usize, dim: usize) -> Vec<Problem> {
    let mut rng = seeded_rng(99, "quadratics");
    (0..m)
        .map(|_| Problem {
            rows,
            dim,
            a: (0..rows * dim).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            b: (0..rows).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        })
        .collect()
}

/// ∇ of the mean of ½‖A_m w − b_m‖² over clients.
fn mean_gradient(ps: &[Problem], w: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for p in ps {
        for r in 0..p.rows {
            let mut res = -p.b[r];
            for c in 0..p.dim {
                res += p.a[r * p.dim + c] * w[c];
            }
            for c in 0..p.dim {
                g[c] += p.a[r * p.dim + c] * res / ps.len() as f64;
            }
        }
    }
    g
}

#[test]
fn fedavg_tracks_centralized_gradient_descent() {
    let (m, rows, dim, lr, rounds) = (4, 8, 6, 0.3f32, 100);
    let ps = problems(m, rows, dim);
    let ids: Vec<String> = (0..m).map(|i| format!("client{i}")).collect();
    let trainer = SimulatedTrainer::new(
        ids.iter()
            .zip(&ps)
            .map(|(id, p)| (id.clone(), Quadratic::new(p.rows, p.dim, p.a.clone(), p.b.clone()).unwrap()))
            .collect::<BTreeMap<_, _>>(),
    );
    let clients: Vec<_> = ids.iter().map(|id| dataset(id, 5)).collect();
    let init = "a=2x2,b=2".parse::<ShapeSpec>().unwrap().zeros().unwrap();
    let config = FederationConfig {
        num_clients: m,
        clients_per_round: m,
        rounds,
        learning_rate: lr,
        local_steps: 1,
        checkpoint_interval: 1,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    run_federation(&config, &clients, &init, &trainer, Some(dir.path())).unwrap();

    let mut w = vec![0f64; dim];
    let mut worst = 0f64;
    for t in 1..=rounds {
        let g = mean_gradient(&ps, &w);
        for (x, gi) in w.iter_mut().zip(g) {
            *x -= f64::from(lr) * gi;
        }
        let (params, meta) = read_checkpoint(&dir.path().join(checkpoint_name(t))).unwrap();
        assert_eq!(meta.round, Some(t as u64));
        for (got, want) in params.flatten().iter().zip(&w) {
            worst = worst.max((f64::from(*got) - want).abs());
        }
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn seeded_runs_are_bit_identical() {
    let ids = ["a", "b", "c", "d", "e"];
    let clients: Vec<_> = ids.iter().enumerate().map(|(i, id)| dataset(id, 3 + i)).collect();
    let init = "w=4x4".parse::<ShapeSpec>().unwrap().zeros().unwrap();
    let config = FederationConfig {
        rounds: 10,
        learning_rate: 0.1,
        local_steps: 3,
        checkpoint_interval: 5,
        seed: 1234,
        ..Default::default()
    };
    let run = || {
        let trainer = SimulatedTrainer::seeded(config.seed, ids, 16, 16);
        let dir = tempfile::tempdir().unwrap();
        let out = run_federation(&config, &clients, &init, &trainer, Some(dir.path())).unwrap();
        (files(dir.path()), out.records)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.keys().collect::<Vec<_>>(), ["round_00005.ftp1", "round_00010.ftp1", "rounds.jsonl"]);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    for r in &ra {
        assert_eq!(r.sampled_client_ids.len(), 2);
        let total: f32 = r.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
