//! Reading and writing the binary field format.

use grainfield::pmf::{decode, decode_header, encode, read_field, write_field, Dtype};
use grainfield::{Dims, Field3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = Field3::from_fn(Dims::new(5, 4, 3)?, 2, |c, x, y, z| (c * 60 + x + 5 * y + 20 * z) as f64 / 120.0 - 0.5)?;
    let bytes = encode(&f, Dtype::F64)?;
    println!("{} bytes, header {:?}", bytes.len(), decode_header(&bytes)?);
    assert_eq!(decode(&bytes)?, f);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("field.pmf");
    write_field(&path, &f, Dtype::F32)?;
    let back = read_field(&path)?;
    let err = back.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("f32 storage error {err:.2e}");
    Ok(())
}
