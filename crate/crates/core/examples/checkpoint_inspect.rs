//! Lists the entries of a checkpoint file, or of a freshly initialized one
//! when no path is given.
//!
//! ```text
//! cargo run --example checkpoint_inspect -- [path/to/file.fcgn]
//! ```

use fcgan::checkpoint::{Entry, EntryTable};
use fcgan::{Checkpoint, TrainConfig, TrainState, WidthMultiplier};

fn main() -> fcgan::Result<()> {
    let bytes = match std::env::args().nth(1) {
        Some(path) => std::fs::read(&path).map_err(|e| fcgan::Error::io(&path, e))?,
        None => {
            let config = TrainConfig {
                width_multiplier: WidthMultiplier::new(1, 16)?,
                ..Default::default()
            };
            let state = TrainState::init(&config)?;
            Checkpoint { config, state }.to_bytes()
        }
    };
    let table = EntryTable::from_bytes(&bytes)?;
    println!("{} bytes, {} entries", bytes.len(), table.entries.len());
    for (name, entry) in &table.entries {
        match entry {
            Entry::F32(t) => println!("  {name:<24} f32 {:?}", t.shape()),
            Entry::F64(v) => println!("  {name:<24} f64 {v:?}"),
            Entry::U64(v) => println!("  {name:<24} u64 {v:?}"),
            Entry::Text(s) => {
                println!("  {name:<24} text");
                for line in s.lines() {
                    println!("      {line}");
                }
            }
        }
    }
    let ckpt = Checkpoint::from_table(&table)?;
    println!("step {}, k {}", ckpt.state.step, ckpt.state.eq.k);
    Ok(())
}
