//! Prints the nearest-centroid accuracy of the default generator.

use e3bm::episode::{centroid_oracle, GeneratorConfig, Split, TaskGenerator};

fn main() {
    let gen = TaskGenerator::new(GeneratorConfig::default()).expect("default generator");
    let n = 1000;
    for split in Split::ALL {
        let mean: f64 = (0..n)
            .map(|s| centroid_oracle(&gen.sample_episode(split, 5, 1, 15, s).expect("episode")))
            .sum::<f64>()
            / n as f64;
        println!("{split}: mean nearest-centroid accuracy over {n} 5-way 1-shot episodes = {mean:.6}");
    }
}
