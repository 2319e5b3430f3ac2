//! Regenerates the bundled fixture: `cargo run --example write_fixture -- crates/core/fixtures`.

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "fixtures".into());
    evsforge::fixture::write_fixture(std::path::Path::new(&dir))
}
