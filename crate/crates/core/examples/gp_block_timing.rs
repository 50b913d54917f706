//! Times the blocked GP correction kernel on a 300-point, 3-terrain model.
use std::time::Instant;

use ccmppi::gp::{PredictScratch, TerrainGpEnsemble, HyperGrid, LANES};
use ccmppi::dynamics::{generate_shared_training_data, ExcitationConfig, NominalParams, TerrainProfile};
use ccmppi::types::{GaussianCorrection, TerrainWeights};
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let profiles = [TerrainProfile::tile(), TerrainProfile::asphalt(), TerrainProfile::grass()];
    let data = generate_shared_training_data(&profiles, &NominalParams::default(), &ExcitationConfig::default(), 300, &mut rng).unwrap();
    let gp = TerrainGpEnsemble::train(&data.inputs, &data.outputs, &HyperGrid::default()).unwrap();
    let w = TerrainWeights::uniform(3);
    let we = gp.weighted(&w);
    let queries: Vec<[f64; 4]> = data.inputs.iter().cycle().take(LANES).copied().collect();
    let mut scratch = PredictScratch::default();
    let mut out = vec![GaussianCorrection::zero(); LANES];
    let blocks = 3840;
    for var in [false, true] {
        let t = Instant::now();
        for _ in 0..blocks {
            we.correction_block(&queries, var, &mut scratch, &mut out);
        }
        println!("variance={var}: {:.1} ms per 30720 queries", t.elapsed().as_secs_f64() * 1e3);
    }
}
