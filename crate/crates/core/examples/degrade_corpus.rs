//! Builds HR/LR/BHR triples from the fixture corpus, writes them to disk,
//! checks they are recomputable and reports the bicubic baseline PSNR.
//!
//! ```text
//! cargo run --example degrade_corpus -- [out dir]
//! ```

use std::path::{Path, PathBuf};

use fcgan::data::{denormalize, list_images, load_records, materialize, verify_materialized};
use fcgan::eval::{format_psnr, psnr};

fn main() -> fcgan::Result<()> {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/faces");
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("fcgan-degrade"), PathBuf::from);

    let ids = materialize(&corpus, &out, 128)?;
    println!("wrote {} triples under {}", ids.len(), out.join("derived").display());
    let bad = verify_materialized(&out)?;
    println!("recomputed from stored HR: {} mismatches", bad.len());

    let listing = list_images(&corpus)?;
    let ids: Vec<String> = listing.into_iter().map(|(id, _)| id).collect();
    for r in load_records(&corpus, &ids, 128)? {
        let db = psnr(&denormalize(&r.bhr), &denormalize(&r.hr))?;
        println!(
            "  {:<16} LR {:?}  bicubic {} dB",
            r.id,
            &r.lr.shape()[1..],
            format_psnr(db)
        );
    }
    Ok(())
}
