//! Runs the four ablation variants on synthetic corpora and prints GZSL H,
//! prototype recovery and mismatch weighting statistics.
//!
//! Usage: cargo run --release --example ablation -- [seeds] [key=json ...]

use std::time::Instant;

use clzsl_core::synth::{generate, SynthConfig};
use clzsl_core::trainer::{self, StepDiagnostics, TrainObserver};
use clzsl_core::data::Batch;
use clzsl_core::{Result, TrainConfig};

struct MismatchProbe<'a> {
    last_epoch: usize,
    dropped: &'a dyn Fn(usize) -> bool,
    sum: f64,
    count: usize,
}

impl TrainObserver for MismatchProbe<'_> {
    fn on_step(&mut self, epoch: usize, _bi: usize, batch: &Batch, diag: &StepDiagnostics) -> Result<()> {
        if epoch == self.last_epoch {
            let b = batch.len() as f64;
            for (&i, &w) in batch.indices.iter().zip(&diag.weights) {
                if (self.dropped)(i) {
                    self.sum += w * b;
                    self.count += 1;
                }
            }
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut base = TrainConfig::preset("synthetic")?;
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').expect("key=value");
        base.set_field(k, serde_json::from_str(v).expect("json value"))?;
    }
    let start = Instant::now();
    let variants = [("baseline", false, false), ("pcl", true, false), ("pup", false, true), ("full", true, true)];
    let mut h = [0.0; 4];
    let mut recovery = 0.0;
    let mut below = 0;
    for seed in 0..seeds {
        let s = generate(&SynthConfig { seed, ..Default::default() })?;
        let dropped = |i: usize| s.truth.dropped_fraction(i, s.corpus.samples()[i].class_id) >= 0.5;
        for (v, &(name, pcl, pup)) in variants.iter().enumerate() {
            let config = TrainConfig {
                seed,
                use_pcl: pcl,
                use_pup: pup,
                ..base.clone()
            };
            let mut probe = MismatchProbe {
                last_epoch: config.epochs,
                dropped: &dropped,
                sum: 0.0,
                count: 0,
            };
            let out = trainer::run_with(&s.corpus, &s.space, &config, &mut probe)?;
            let m = out.history.last().and_then(|r| r.metrics).expect("metrics");
            h[v] += m.harmonic / seeds as f64;
            print!("seed {seed} {name:8} U {:5.1} S {:5.1} H {:5.1} czsl {:5.1}", m.acc_unseen, m.acc_seen, m.harmonic, m.acc_czsl);
            if pup {
                let z = out.state.store.current();
                let better = (0..z.rows())
                    .filter(|&c| {
                        cosine(z.row(c), s.truth.prototypes.row(c)) > cosine(s.space.prototypes().row(c), s.truth.prototypes.row(c))
                    })
                    .count() as f64
                    / z.rows() as f64;
                print!("  recovered {:.2}", better);
                if name == "full" {
                    recovery += better / seeds as f64;
                }
            }
            if pcl {
                let mean = probe.sum / probe.count.max(1) as f64;
                print!("  dropped mean ω·b {:.3} (n={})", mean, probe.count);
                if name == "full" && mean < 1.0 {
                    below += 1;
                }
            }
            println!();
        }
    }
    println!(
        "mean H: baseline {:.2} pcl {:.2} pup {:.2} full {:.2}; recovery {:.2}; ω below uniform {below}/{seeds}; {:.1}s",
        h[0],
        h[1],
        h[2],
        h[3],
        recovery,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
