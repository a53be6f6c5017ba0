//! Trains a small diffusion model on healthy slices, samples from it and applies the
//! memorisation filter.

use uad::dataset::extract_slices;
use uad::phantom::{make_phantom_corpus, LesionKind};
use uad::ssim::SsimConfig;
use uad::synthgen::{ddpm_sample, ddpm_train, filter_report_csv, memorization_filter, DdpmConfig};
use uad::volume::Slice2D;

fn main() -> uad::Result<()> {
    let mut real: Vec<Slice2D> = Vec::new();
    for c in make_phantom_corpus(4, 5, LesionKind::None)? {
        real.extend(extract_slices(&c.volume, 96)?);
    }
    let cfg = DdpmConfig { train_steps: 40, ..DdpmConfig::default() };
    let (model, report) = ddpm_train(&real, &cfg, 1)?;
    println!("validation loss {:.4} -> {:.4}", report.initial_validation_loss, report.final_validation_loss);
    let samples = ddpm_sample(&model, 4, 2)?;
    let out = memorization_filter(&samples, &real, 0.35, &SsimConfig::default())?;
    print!("{}", filter_report_csv(&out.report));
    Ok(())
}
