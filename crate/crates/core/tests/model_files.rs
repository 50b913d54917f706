use std::io::Write;

use ccmppi::gp::{GpModel, KernelParams, TerrainGpEnsemble};
use ccmppi::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> GpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs: Vec<[f64; 4]> = (0..25).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let outputs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| vec![0.1 * x[0] - 0.05 * x[2], 0.2 * x[1] * x[3]])
        .collect();
    let k = |s: f64| KernelParams {
        signal_var: s,
        lengthscales: [0.9, 1.1, 1.0, 1.3],
        noise_var: 1e-4,
    };
    GpModel::fit(&inputs, &outputs, &[k(0.02), k(0.05)]).unwrap()
}

#[test]
fn save_then_load_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gp");
    let model = small_model();
    model.save(&path).unwrap();
    let back = GpModel::load(&path).unwrap();
    assert_eq!(back.alphas(), model.alphas());
    assert_eq!(back.kernels(), model.kernels());
    for q in [[0.0; 4], [0.3, -0.2, 0.9, -1.4]] {
        assert_eq!(back.predict(&q), model.predict(&q));
    }
    assert_eq!(back.log_marginal_likelihood().to_bits(), model.log_marginal_likelihood().to_bits());
}

#[test]
fn ensemble_roundtrip_keeps_terrain_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.gp");
    let ens = TerrainGpEnsemble::new(small_model()).unwrap();
    ens.save(&path).unwrap();
    assert_eq!(TerrainGpEnsemble::load(&path).unwrap().terrain_count(), 1);
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad_magic = dir.path().join("bad.gp");
    std::fs::write(&bad_magic, b"NOTAGPMODELFILE!").unwrap();
    assert!(matches!(GpModel::load(&bad_magic), Err(Error::ModelFormat(_))));

    let good = dir.path().join("good.gp");
    small_model().save(&good).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    let truncated = dir.path().join("short.gp");
    std::fs::File::create(&truncated)
        .unwrap()
        .write_all(&bytes[..bytes.len() / 2])
        .unwrap();
    assert!(GpModel::load(&truncated).is_err());
    assert!(matches!(GpModel::load(&dir.path().join("missing.gp")), Err(Error::Io(_))));
}
