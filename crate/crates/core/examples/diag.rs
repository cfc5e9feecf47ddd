//! Developer diagnostic: summarize a distilled set and its training signal.
//! Usage: cargo run -p dodkit-core --example diag -- <distill-stage-dir>

use dodkit_core::experiments::{load_artifact, Artifact, ArtifactKind};
use ndarray::Axis;

fn main() {
    let dir = std::env::args().nth(1).expect("distill stage dir");
    let dod = match load_artifact::<f32>(
        std::path::Path::new(&dir).join("dod").as_path(),
        ArtifactKind::Dod,
    )
    .expect("load dod")
    {
        Artifact::Dod(d) => d,
        _ => unreachable!(),
    };
    println!("n={} classes={:?}", dod.len(), dod.class_ids);
    for i in 0..dod.len() {
        let img = dod.images.index_axis(Axis(0), i);
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        let sd = (img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / img.len() as f64)
            .sqrt();
        let row: Vec<f32> = dod.soft_labels.row(i).to_vec();
        println!(
            "{:02} class={} mean={:.3} sd={:.3} soft={:?}",
            i, dod.class_ids[i], mean, sd, row
        );
    }
}
