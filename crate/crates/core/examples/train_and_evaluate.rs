//! Trains a narrow model on the fixtures through the full driver (manifest,
//! metrics, checkpoints), evaluates it and renders a comparison grid.
//!
//! ```text
//! cargo run --release --example train_and_evaluate -- [steps] [out dir]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use fcgan::checkpoint::load_checkpoint;
use fcgan::data::load_records;
use fcgan::eval::{emit_grid, evaluate, generate};
use fcgan::{fit, Split, TrainConfig, WidthMultiplier};

fn main() -> fcgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(100, |s| s.parse().expect("steps"));
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("fcgan-train"), PathBuf::from);
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/faces");

    let cfg = TrainConfig {
        width_multiplier: WidthMultiplier::new(1, 8)?,
        batch_size: 4,
        max_steps: steps,
        checkpoint_every: 50,
        fractions: "0.6,0.2,0.2".parse()?,
        corpus_dir: Some(corpus.clone()),
        output_dir: Some(out.clone()),
        ..Default::default()
    };
    fs::create_dir_all(&out).map_err(|e| fcgan::Error::io(&out, e))?;
    fs::write(out.join("train.cfg"), cfg.to_text()).map_err(|e| fcgan::Error::io(&out, e))?;

    let outputs = fit(&cfg)?;
    let metrics = fs::read_to_string(&outputs.metrics).unwrap_or_default();
    for line in metrics.lines().step_by((steps as usize / 5).max(1)) {
        println!("{line}");
    }
    print!(
        "{}",
        fs::read_to_string(&outputs.validation).unwrap_or_default()
    );

    let ckpt = load_checkpoint(&outputs.final_checkpoint)?;
    let manifest = fcgan::SplitManifest::load(&outputs.manifest)?;
    let table = evaluate(&ckpt, &manifest, Split::Test, &corpus, &[])?;
    print!("{}", table.to_csv());

    let records = load_records(&corpus, manifest.ids(Split::Test), cfg.image_size)?;
    let conditions: Vec<_> = records.iter().map(|r| &r.bhr).collect();
    let generated = generate(&cfg.generator_spec(), &ckpt.state.g.params, &conditions)?;
    let grid = out.join("grid.png");
    emit_grid(&records, &generated, &grid)?;
    println!("grid: {}", grid.display());
    Ok(())
}
