//! Image-wise and object-wise 5-fold splits of a synthetic dataset in which
//! every object appears in three images.

use hrgnet::data::synthetic::{generate, SyntheticConfig};
use hrgnet::data::{split, SplitMode};

fn main() -> hrgnet::Result<()> {
    let mut data = generate(&SyntheticConfig {
        size: 64,
        count: 23,
        ..Default::default()
    })?;
    for (i, s) in data.samples.iter_mut().enumerate() {
        s.object_id = format!("object{}", i / 3);
    }
    for mode in [SplitMode::ImageWise, SplitMode::ObjectWise] {
        println!("{mode}");
        for (i, f) in split(&data, mode, 5, 42)?.iter().enumerate() {
            let objects: std::collections::BTreeSet<&str> =
                f.test.iter().map(|&j| data.samples[j].object_id.as_str()).collect();
            println!("  fold {i}: train {:2}  test {:2}  test objects {}", f.train.len(), f.test.len(), objects.len());
        }
    }
    Ok(())
}
