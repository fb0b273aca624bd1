use bevsan::detector::*;
use bevsan::scenes::{default_profiles, generate_dataset, SceneGenOptions};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let which = args.get(2).map(|s| s.as_str()).unwrap_or("tab4");

    let setup = PipelineSetup::default();
    let profiles = default_profiles();
    let (scenes, _) = generate_dataset(1000, 250, &profiles, &setup.grid, &SceneGenOptions::default());
    let names: Vec<String> = profiles.iter().map(|p| p.name.clone()).collect();

    let base = TrainConfig { lr, ..TrainConfig::default() };
    let configs: Vec<TrainConfig> = match which {
        "tab4" => vec![
            TrainConfig { variant: Variant::BaselineFlat, ..base.clone() },
            TrainConfig { variant: Variant::LocalOnly, fusion: FusionKind::Se, ..base.clone() },
            TrainConfig { variant: Variant::GlobalOnly, fusion: FusionKind::Se, ..base.clone() },
            TrainConfig { variant: Variant::FullSan, fusion: FusionKind::SeTrans, ..base.clone() },
        ],
        "tab5" => vec![
            TrainConfig { variant: Variant::LocalOnly, fusion: FusionKind::Mean, ..base.clone() },
            TrainConfig { variant: Variant::LocalOnly, fusion: FusionKind::Se, ..base.clone() },
            TrainConfig { variant: Variant::FullSan, fusion: FusionKind::SeMean, ..base.clone() },
            TrainConfig { variant: Variant::FullSan, fusion: FusionKind::SeSe, ..base.clone() },
            TrainConfig { variant: Variant::FullSan, fusion: FusionKind::SeTrans, ..base.clone() },
        ],
        "tab1" => vec![
            TrainConfig { variant: Variant::Band { lower: -2.0, upper: -1.0 }, ..base.clone() },
            TrainConfig { variant: Variant::Band { lower: 0.0, upper: 2.0 }, ..base.clone() },
        ],
        other => panic!("unknown matrix {other}"),
    };
    let t0 = Instant::now();
    let report = run_ablation(&configs, &[1, 2, 3], &scenes, &setup, &names).unwrap();
    println!("matrix {which} lr={lr}: {:.1}s total", t0.elapsed().as_secs_f64());
    for row in &report.rows {
        println!("  {:24} seed {} {:6} {:.3}", row.variant, row.seed, row.class, row.score);
    }
    for s in &report.summaries {
        println!("{:24} mean {:.3} +- {:.3}", s.variant, s.mean, s.stddev);
    }
}
