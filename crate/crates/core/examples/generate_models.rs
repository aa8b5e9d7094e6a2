//! Writes the bundled model files: `cargo run -p pdmp-core --example generate_models -- models`.

use std::path::PathBuf;

use pdmp_core::fixtures;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "models".into()));
    std::fs::create_dir_all(&dir)?;
    let models = [
        ("ctmdp_toy", fixtures::dominated_ctmdp(0.5)),
        ("drift_boundary", fixtures::drift_model(64)),
        ("boundary_cycle", fixtures::boundary_cycle(2.0, 16)),
        ("contracting", fixtures::contracting_model(33)),
        ("constant_cost", fixtures::trivial_constant(1.5, 2.0, 5)),
    ];
    for (name, model) in models {
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, model.to_json() + "\n")?;
        println!("{}", path.display());
    }
    Ok(())
}
