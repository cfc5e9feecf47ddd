//! Developer diagnostic: evaluate the clean-distilled control against a
//! transporter from an existing run.
//! Usage: cargo run --example clean_ctrl -- <osmosis-stage-dir>

use dodkit_core::experiments::{clean_control, ExperimentConfig};
use dodkit_core::transporter::Transporter;

fn main() {
    env_logger::init();
    let dir = std::env::args().nth(1).expect("osmosis stage dir");
    let (mut t, _, _) =
        Transporter::<f32>::load(std::path::Path::new(&dir).join("transporter").as_path())
            .expect("load transporter");
    let cfg = ExperimentConfig::default();
    let report = clean_control(&cfg, &mut t).expect("clean control");
    println!("clean utility={} asr={}", report.utility, report.asr);
    println!("{:?}", report.utility_breakdown.per_class);
}
