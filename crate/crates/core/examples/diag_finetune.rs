//! Throwaway diagnostic: fast meta-training settings for paired-seed
//! comparisons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volscreen_core::config::ExperimentConfig;
use volscreen_core::meta::{
    fine_tune, meta_train, recalibrate_buffers, screening_auc, FineTuneConfig, MetaTrainConfig,
};
use volscreen_core::nn::presets::densenet_classifier;
use volscreen_core::nn::Network;
use volscreen_core::phantom::{read_dataset, BreastSample, SplitKind};

fn main() -> volscreen_core::error::Result<()> {
    let cfg = ExperimentConfig::default();
    let ds = read_dataset(std::path::Path::new("/tmp/run1b/data"))?;
    let train = ds.of_split(SplitKind::Train);
    let val = ds.of_split(SplitKind::Validation);
    let test = ds.of_split(SplitKind::Test);
    let owned: Vec<BreastSample> = train.iter().map(|&s| s.clone()).collect();

    for seed in [1u64, 2, 3] {
        for (iters, tb, beta) in [(150usize, 2usize, 0.02f64)] {
            let spec = densenet_classifier(&cfg.posthoc.arch);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Network::<f32>::init(spec.clone(), &mut rng)?;
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut scratch = Network::<f32>::init(spec, &mut rng2)?;

            let mut mc = MetaTrainConfig {
                meta_iterations: iters,
                task_batch: tb,
                seed: seed.wrapping_mul(97),
                ..Default::default()
            };
            mc.hyper.beta = beta;
            mc.hyper.first_order = false;
            let t0 = std::time::Instant::now();
            meta_train(&mut net, &owned, &mc)?;
            recalibrate_buffers(&mut net, &train, 8, 5, seed ^ 7)?;
            let secs = t0.elapsed().as_secs_f64();
            let init_auc = screening_auc(&net, &val)?;

            let ft = FineTuneConfig { epochs: 4, lr: 0.003, seed: seed ^ 3, ..Default::default() };
            let rm = fine_tune(&mut net, &train, &val, &ft)?;
            let rs = fine_tune(&mut scratch, &train, &val, &ft)?;
            let meta_test = screening_auc(&net, &test)?;
            let scratch_test = screening_auc(&scratch, &test)?;
            println!(
                "seed {seed} iters {iters} tb {tb} beta {beta}: {secs:.0}s init {init_auc:.2} | meta val {:.2} test {meta_test:.2} | scratch val {:.2} test {scratch_test:.2}",
                rm.best_val_auc, rs.best_val_auc
            );
        }
    }
    Ok(())
}
