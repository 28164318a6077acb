//! Train the LSTM on a cyclic toy language, then save and reload it.
//!
//! cargo run --example lstm_cycle

use mobpred::neuralseq::{accuracy_on, fit, read_checkpoint, write_checkpoint, LstmClassifier, LstmConfig, SeqExample, TrainConfig};
use mobpred::rng::rng_from_seed;
use rand::Rng as _;

const CYCLE: [u32; 4] = [2, 0, 3, 1];

fn sample(n: usize, seed: u64) -> Vec<SeqExample> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let start = rng.random_range(0..CYCLE.len());
            let len = rng.random_range(1..12);
            let at = |i: usize| CYCLE[(start + i) % CYCLE.len()];
            SeqExample {
                tokens: (0..len).map(at).collect(),
                target: at(len),
            }
        })
        .collect()
}

fn main() -> mobpred::Result<()> {
    let (train, val, test) = (sample(800, 1), sample(200, 2), sample(200, 3));
    let model = LstmClassifier::new(4, &LstmConfig::default(), 5)?;
    println!("untrained accuracy {:.3}", accuracy_on(&model, &test));

    let (model, history) = fit(model, &train, &val, &TrainConfig::default())?;
    for e in &history.epochs {
        println!("epoch {:>2}: loss {:.4}, val accuracy {:.3}", e.epoch, e.train_loss, e.val_accuracy);
    }
    println!("held-out accuracy {:.3} (best epoch {:?})", accuracy_on(&model, &test), history.best_epoch);

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model.to_checkpoint(5))?;
    let restored = LstmClassifier::from_checkpoint(&read_checkpoint(bytes.as_slice())?)?;
    let (next, probs) = restored.predict(&[2, 0, 3])?;
    println!("checkpoint is {} bytes; after 2,0,3 it predicts {next} with p={:.3}", bytes.len(), probs[next as usize]);
    Ok(())
}
