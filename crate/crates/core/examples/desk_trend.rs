//! Runs every policy on the synthetic desk task and prints the per-epoch
//! mean validation BLEU.
//!
//!     cargo run --release -p boostnmt-core --example desk_trend -- [key=value ...]

use boostnmt_core::policy::PolicyKind;
use boostnmt_core::synth::desk_task;
use boostnmt_core::trainer::{train, TrainConfig, TrainData};

fn main() -> boostnmt_core::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let task = desk_task(3000, 200, 7)?;
    for kind in PolicyKind::ALL {
        let mut cfg = TrainConfig::default();
        cfg.seeds = vec![1, 2, 3];
        cfg.batch_size = 16;
        cfg.decay_factor = 0.9;
        for o in &overrides {
            let (k, v) = o.split_once('=').expect("key=value");
            cfg.set(k, v)?;
        }
        cfg.policy.kind = kind;
        cfg.bleu = true;
        let mut data = TrainData::new(&task.train, &task.valid);
        data.bleu_corpus = Some(&task.valid);
        let t = std::time::Instant::now();
        let out = train(&cfg, data, None, &mut Default::default())?;
        let bleu: Vec<String> = out
            .mean
            .iter()
            .map(|m| format!("{:.1}", m.bleu.unwrap_or(0.0)))
            .collect();
        let units: f64 = out.mean.iter().map(|m| m.data_units).sum();
        println!(
            "{kind:9} units={units:.0} ppl={:.3} bleu=[{}] ({:.0}s)",
            out.mean.last().map_or(0.0, |m| m.valid_ppl),
            bleu.join(" "),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
