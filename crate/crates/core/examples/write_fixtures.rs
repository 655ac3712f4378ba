//! Writes the synthetic scenes, episode file and optimal oracle script.
//!
//! ```text
//! cargo run -p daco-core --example write_fixtures -- fixtures/suite
//! ```

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "fixtures/suite".to_string());
    daco::fixtures::write_suite(&dir, &daco::fixtures::suite())?;
    println!("wrote {dir}");
    Ok(())
}
