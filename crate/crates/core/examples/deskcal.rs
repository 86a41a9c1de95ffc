// calibration harness for the desk-scale directional experiment
use torsd::analysis::separability_report;
use torsd::backbone::BackboneKind;
use torsd::checkpoint::load_checkpoint;
use torsd::config::{default_paper_config, OptimConfig, Scheduler};
use torsd::data::make_synthetic;
use torsd::trainer::train;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |k: &str, d: f64| -> f64 {
        args.iter().position(|a| a == k).map(|i| args[i + 1].parse().unwrap()).unwrap_or(d)
    };
    let classes = get("--classes", 3.0) as usize;
    let per_class = get("--per-class", 150.0) as usize;
    let test_per_class = get("--test-per-class", 100.0) as usize;
    let noise = get("--noise", 0.35);
    let epochs = get("--epochs", 10.0) as usize;
    let batch = get("--batch", 30.0) as usize;
    let peak = get("--peak", 0.1);
    let embed = get("--embed", 16.0) as usize;
    let dseed = get("--dseed", 0.0) as u64;

    println!("classes={classes} per_class={per_class} noise={noise} epochs={epochs} batch={batch} peak={peak} embed={embed}");

    // one generation, split per class: shared prototypes, disjoint samples
    let full = make_synthetic(classes, per_class + test_per_class, 32, 32, 3, noise, 1000 + dseed);
    let (train_ds, test_ds) = full.split_per_class(per_class).unwrap();

    let mut deltas = Vec::new();
    let mut wins = 0;
    for seed in [0u64, 1, 2] {
        let t0 = std::time::Instant::now();
        let mut results = Vec::new();
        for torsd_on in [false, true] {
            let mut cfg = default_paper_config();
            cfg.embed_dim = embed;
            cfg.seed = seed;
            if !torsd_on {
                cfg.enable_rn = false;
                cfg.enable_ac = false;
                cfg.enable_ld = false;
            }
            let mut opt = OptimConfig::default();
            opt.epochs = epochs;
            opt.batch_size = batch;
            opt.peak_lr = peak;
            opt.scheduler = Scheduler::OneCycle;
            let out = std::env::temp_dir().join(format!("deskcal_{seed}_{torsd_on}"));
            let _ = std::fs::remove_dir_all(&out);
            let outcome = train::<f32>(
                &train_ds, Some(&test_ds), &BackboneKind::toy(), &cfg, &opt, "synth", &out, None,
            ).unwrap();
            let loaded = load_checkpoint::<f32>(&outcome.final_checkpoint).unwrap();
            let mut bundle = loaded.bundle;
            let sep = separability_report(&mut bundle, &test_ds).unwrap();
            let ratios: Vec<f64> = sep.iter().map(|r| r.ratio).collect();
            results.push((outcome.final_eval.top1, ratios));
        }
        let (bl_acc, bl_r) = &results[0];
        let (to_acc, to_r) = &results[1];
        let delta = to_acc - bl_acc;
        deltas.push(delta);
        if to_acc >= bl_acc { wins += 1; }
        println!(
            "seed {seed}: BL {bl_acc:.4} vs TORSD {to_acc:.4} (d={delta:+.4})  ratios BL {:?} TORSD {:?}  [{:?}]",
            bl_r.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            to_r.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            t0.elapsed()
        );
    }
    let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;
    println!("wins {wins}/3, mean improvement {mean:+.4}");
}
