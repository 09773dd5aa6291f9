//! Overfits a narrow model on a handful of fixture images and compares its
//! PSNR with the bicubic baseline.
//!
//! ```text
//! cargo run --release --example overfit -- [steps] [images] [seed]
//! ```

use std::path::Path;
use std::time::Instant;

use fcgan::data::{list_images, load_records};
use fcgan::eval::mean_psnr_on_records;
use fcgan::train::{train_step, BatchSchedule, TrainState, TrainingBatch};
use fcgan::{TrainConfig, WidthMultiplier};

fn main() -> fcgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(200, |s| s.parse().expect("steps"));
    let n_images: usize = args.next().map_or(8, |s| s.parse().expect("images"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/faces");
    let ids: Vec<String> = list_images(&corpus)?
        .into_iter()
        .take(n_images)
        .map(|(id, _)| id)
        .collect();
    let cfg = TrainConfig {
        width_multiplier: WidthMultiplier::new(1, 8)?,
        batch_size: 4,
        max_steps: steps,
        seed,
        ..Default::default()
    };
    let records = load_records(&corpus, &ids, cfg.image_size)?;
    let schedule = BatchSchedule::new(cfg.seed, records.len(), cfg.batch_size)?;
    let mut state = TrainState::init(&cfg)?;

    let (bicubic, before) = mean_psnr_on_records(&cfg.generator_spec(), &state.g.params, &records)?;
    println!("bicubic {bicubic:.3} dB, untrained generator {before:.3} dB");

    let started = Instant::now();
    let mut first = None;
    for step in 1..=steps {
        let picked: Vec<_> = schedule.indices(step).iter().map(|&i| &records[i]).collect();
        let mut batch = TrainingBatch::from_records(&picked)?;
        let r = train_step(&mut batch, &mut state, &cfg)?;
        first.get_or_insert(r.l_g);
        if step % 500 == 0 {
            let (_, now) = mean_psnr_on_records(&cfg.generator_spec(), &state.g.params, &records)?;
            println!("step {step:>5}  generator {now:.3} dB");
        }
        if step == 1 || step % 100 == 0 || step == steps {
            println!(
                "step {step:>5}  l_g {:.4}  l_dr {:.4}  l_df {:.4}  k {:.5}  m_c {:.4}  {:.1}s",
                r.l_g,
                r.l_dr,
                r.l_df,
                r.k,
                r.m_c,
                started.elapsed().as_secs_f64()
            );
        }
    }
    let (_, after) = mean_psnr_on_records(&cfg.generator_spec(), &state.g.params, &records)?;
    println!(
        "after {steps} steps: generator {after:.3} dB vs bicubic {bicubic:.3} dB (first l_g {:.4})",
        first.unwrap_or(f64::NAN)
    );
    Ok(())
}
