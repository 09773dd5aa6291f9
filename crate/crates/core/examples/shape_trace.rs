//! Prints the feature-map trace and parameter counts of both networks.
//!
//! ```text
//! cargo run --example shape_trace -- [width, e.g. 1/8] [image size]
//! ```

use fcgan::model::format_trace;
use fcgan::{DiscriminatorSpec, GeneratorSpec, WidthMultiplier};

fn main() -> fcgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let width: WidthMultiplier = args.next().as_deref().unwrap_or("1").parse()?;
    let size: usize = args.next().map_or(128, |s| s.parse().expect("image size"));

    let g = GeneratorSpec {
        width,
        image_size: size,
        ..Default::default()
    }
    .layout();
    let d = DiscriminatorSpec {
        width,
        image_size: size,
        ..Default::default()
    }
    .layout();

    for net in [&g, &d] {
        println!("{} (width {width}, {size}px)", net.name);
        println!("  {}", format_trace(&net.shape_trace(size)?));
        println!(
            "  {} conv layers, {} parameters",
            net.conv_layer_count(),
            net.param_count()
        );
        for (name, spec) in net.layers() {
            println!(
                "    {name:<5} {:?} {:>4} -> {:<4} {:>9} params",
                spec.direction,
                spec.in_channels,
                spec.out_channels,
                spec.param_count()
            );
        }
    }
    Ok(())
}
