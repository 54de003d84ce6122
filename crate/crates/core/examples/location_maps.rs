//! Encodes points into a location map, decodes them back with each threshold
//! preset and stores the map as a 16-bit PGM.

use fsol::locmap::{decode_peaks, encode_location_map, read_pgm16, write_pgm16, DecoderConfig, GtEncoder};
use fsol::metrics::Point;

fn main() -> fsol::Result<()> {
    let pts = vec![Point::new(10.0, 12.0), Point::new(30.0, 40.0), Point::new(50.0, 20.0), Point::new(36.0, 40.0)];
    let map = encode_location_map(&pts, (64, 64), &GtEncoder::default())?;
    println!("value at a point {:.3}, one pixel away {:.3}", map.get(10, 12), map.get(11, 12));

    for (name, cfg) in [
        ("default", DecoderConfig::default()),
        ("dense", DecoderConfig::dense()),
        ("sparse", DecoderConfig::sparse()),
    ] {
        let found = decode_peaks(&map, &cfg);
        println!("{name:<8} T_a {:.4}  {} peaks  {:?}", cfg.threshold, found.len(), found);
    }

    let path = std::env::temp_dir().join("fsol_example_map.pgm");
    write_pgm16(&map, &path)?;
    let back = read_pgm16(&path)?;
    let err = map.values().iter().zip(back.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("wrote {}  16-bit quantization error {err:.2e}", path.display());
    Ok(())
}
