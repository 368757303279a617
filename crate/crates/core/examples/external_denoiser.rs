//! Drives a denoiser living in another process. The child here is a shell
//! loop that returns its input, i.e. the identity denoiser.

use grainfield::diffusion::{Denoiser, ExternalDenoiser};
use grainfield::{Dims, Field3};

const IDENTITY: &str = r#"while IFS="$(printf '\t')" read -r input sigma output; do cp "$input" "$output"; echo ok; done"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = Dims::new(4, 4, 2)?;
    let den = ExternalDenoiser::spawn("sh", &["-c".into(), IDENTITY.into()], d, 3)?;
    let x = Field3::from_fn(d, 3, |c, x, y, z| ((c + x + 2 * y + 3 * z) as f64).sin())?;
    let y = den.denoise(&x, 0.7)?;
    println!("round trip exact: {}", y == x);
    Ok(())
}
