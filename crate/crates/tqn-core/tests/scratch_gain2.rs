//! Temporary calibration sweep; deleted before release.
use tqn_core::factorization::bundled;
use tqn_core::synth::{gen_dataset, GeneratorConfig};

#[test]
fn sweep_probe_accuracy_fine() {
    let schema = bundled::synthetic().unwrap();
    for gain in [1.6, 1.7, 1.75, 1.8, 1.9] {
        let cfg = GeneratorConfig {
            template_gain: gain,
            train_count: 600,
            test_count: 1,
            ..GeneratorConfig::default()
        };
        let ds = gen_dataset(&cfg, &schema, 23).unwrap();
        let templates = ds.templates().unwrap();
        let ids: Vec<u32> = ds
            .schema
            .queries()
            .iter()
            .flat_map(|q| q.attributes.iter().map(|a| a.id))
            .collect();
        let mut hits = 0usize;
        let mut total = 0usize;
        for seq in ds.train() {
            for event in &seq.events {
                let mut mean = vec![0.0f64; cfg.input_dim];
                for f in 0..cfg.clip_len {
                    let row = seq.frames.row(event.start_clip * cfg.clip_len + f);
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += x / cfg.clip_len as f64;
                    }
                }
                let best = ids
                    .iter()
                    .map(|&id| {
                        let u = templates.get(id).unwrap();
                        mean.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| ids[i])
                    .unwrap();
                hits += usize::from(best == event.attribute_id);
                total += 1;
            }
        }
        println!("gain {gain}: probe acc {:.4} ({hits}/{total})", hits as f64 / total as f64);
    }
}
