//! Write a gallery of synthetic scenes across the degradation presets so
//! the weather operators can be inspected by eye: PPM images next to PGM
//! ground-truth masks.
//!
//! ```bash
//! cargo run --release --example scene_gallery
//! ```

use duoseg::nets::ModelDims;
use duoseg::synthdata::{generate_scene, write_pgm, write_ppm, WeatherConfig};

fn main() {
    let dims = ModelDims::default();
    let dir = std::env::temp_dir().join("duoseg_gallery");
    std::fs::create_dir_all(&dir).expect("create gallery dir");

    let presets = [
        ("clean", WeatherConfig::clean()),
        ("soft", WeatherConfig::soft()),
        ("medium", WeatherConfig::medium()),
        ("hard", WeatherConfig::hard()),
        ("hard_night", WeatherConfig::hard().with_night()),
        ("fog_only", WeatherConfig {
            fog_y: 0.9,
            ..WeatherConfig::clean()
        }),
        ("rain_only", WeatherConfig {
            rain_x: 0.9,
            ..WeatherConfig::clean()
        }),
    ];
    for seed in [3u64, 11] {
        for (name, weather) in &presets {
            let (image, mask) = generate_scene(&dims, weather, seed);
            let ppm = dir.join(format!("seed{seed}_{name}.ppm"));
            let pgm = dir.join(format!("seed{seed}_{name}.pgm"));
            write_ppm(&ppm, &image).expect("write image");
            write_pgm(&pgm, &mask, dims.width, dims.classes).expect("write mask");
            println!("{}", ppm.display());
        }
    }
    println!("\ngallery in {} (same seed shares one mask)", dir.display());
}
