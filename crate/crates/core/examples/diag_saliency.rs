//! Throwaway diagnostic: where saliency mask mass sits vs the lesions.

use volscreen_core::nn::load_checkpoint;
use volscreen_core::phantom::{read_dataset, ScanLabel, SplitKind};
use volscreen_core::saliency::{mask_components, SaliencyModel};
use volscreen_core::volume::Volume;

fn main() -> volscreen_core::error::Result<()> {
    let ds = read_dataset(std::path::Path::new("/tmp/run2/data"))?;
    let cfg = volscreen_core::config::ExperimentConfig::load(std::path::Path::new(
        "/tmp/run2/config.toml",
    ))?;
    let (spec, params) = load_checkpoint::<f32>(std::path::Path::new("/tmp/run2/saliency.ck"))?;
    let net = volscreen_core::nn::Network::from_parts(spec, params);
    let model = SaliencyModel::from_parts(cfg.posthoc.arch.clone(), cfg.saliency.decoder.clone(), net);

    for s in ds.of_split(SplitKind::Test).iter().take(12) {
        if s.label != ScanLabel::Malignant {
            continue;
        }
        let mask: Volume = model.mask_volume(&s.volume)?;
        let mut inside = 0.0f64;
        let mut outside = 0.0f64;
        let mut n_in = 0usize;
        let mut peak = (0.0f32, [0usize; 3]);
        for z in 0..mask.dims[2] {
            for y in 0..mask.dims[1] {
                for x in 0..mask.dims[0] {
                    let i = mask.idx(x, y, z);
                    let v = mask.data[i];
                    if v > peak.0 {
                        peak = (v, [x, y, z]);
                    }
                    let lesioned = s.lesions.iter().any(|l| l.mask.data[i]);
                    if lesioned {
                        inside += f64::from(v);
                        n_in += 1;
                    } else {
                        outside += f64::from(v);
                    }
                }
            }
        }
        let total = mask.data.len();
        println!(
            "{}-{}: lesion vox {n_in}, mean inside {:.3}, mean outside {:.3}, peak {:.2}@{:?}",
            s.patient.0,
            s.side.as_str(),
            inside / n_in.max(1) as f64,
            outside / (total - n_in) as f64,
            peak.0,
            peak.1
        );
        for zeta in [0.6, 0.7, 0.8] {
            for c in mask_components(&mask, zeta, cfg.saliency.min_voxels) {
                let hits = c.voxels.iter().filter(|&&i| s.lesions.iter().any(|l| l.mask.data[i])).count();
                let best = s
                    .lesions
                    .iter()
                    .map(|l| {
                        let inter = c.voxels.iter().filter(|&&i| l.mask.data[i]).count();
                        2.0 * inter as f64 / (c.voxels.len() + l.mask.data.iter().filter(|&&b| b).count()) as f64
                    })
                    .fold(0.0f64, f64::max);
                println!(
                    "  z {zeta}: comp {:?} vox {} mean {:.2} on-lesion {hits} dice {best:.2}",
                    c.bv, c.voxels.len(), c.mean
                );
            }
        }
        let centers: Vec<[f64; 3]> = s.lesions.iter().map(|l| l.spec.center).collect();
        println!("  lesion centers {centers:?}");
    }
    Ok(())
}
