//! Trains the full-size model on a few synthetic materials and reports loss and RelAE.
//! Usage: micro_overfit [epochs] [report_every]

use std::collections::BTreeMap;
use std::time::Instant;

use latentbrdf::checkpoint::Checkpoint;
use latentbrdf::metrics::evaluate_code;
use latentbrdf::preprocess::{select_slices, to_network_input, NormConfig};
use latentbrdf::synthetic::merl_family;
use latentbrdf::training::{encode_all, TrainConfig, Trainer};
use latentbrdf::vae_model::ModelConfig;

fn main() {
    let norm = NormConfig::default();
    let brdfs = merl_family(5, 7);
    let inputs: Vec<_> = brdfs.iter().map(|b| to_network_input(b, &norm).unwrap()).collect();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let every: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(epochs);
    let cfg = TrainConfig { epochs, seed: 1, ..Default::default() };
    let mut trainer = Trainer::new(&inputs, cfg, ModelConfig::default()).unwrap();
    let start = Instant::now();
    let mut first = None;
    for e in 1..=epochs {
        let r = trainer.run_epoch().unwrap();
        let first_total = *first.get_or_insert(r.total);
        if e % every == 0 {
            let stats = encode_all(&trainer.vae, &inputs).unwrap();
            let ck = Checkpoint {
                model: trainer.vae.clone(),
                norm,
                slice_indices: select_slices(),
                latent_table: BTreeMap::new(),
            };
            let rel: Vec<f64> = brdfs
                .iter()
                .zip(&inputs)
                .zip(&stats)
                .map(|((b, i), s)| evaluate_code(&ck, &s.mean_code(), b, &i.mask).unwrap().rel_ae_ratio)
                .collect();
            println!(
                "epoch {e} total {:.2} ratio {:.3} relae {:.3?} ({:.0}s)",
                r.total,
                r.total / first_total,
                rel,
                start.elapsed().as_secs_f64()
            );
        }
    }
}
