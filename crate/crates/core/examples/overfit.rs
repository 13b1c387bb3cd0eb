//! Overfits a small synthetic corpus and reports F1 every ten epochs.
//!
//! `cargo run --release --example overfit -- [size] [epochs]`

use std::time::Instant;

use jointie::config::Config;
use jointie::corpus::{generate_corpus, GrammarSpec};
use jointie::model::{build_vocab, ExtractOptions, JointModel, Schema};
use jointie::training::{train_stage, Control};

fn main() -> jointie::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let grammar = GrammarSpec::default_grammar();
    let data = generate_corpus(&grammar, size)?;

    let mut config = Config::desk();
    config.stage2.batch_size = 2;
    config.stage2.encoder_lr = 3e-4;
    config.stage2.head_lr = 1e-3;
    config.stage2.epochs = epochs;

    let schema = Schema::new(grammar.entity_labels(), grammar.relation_labels());
    let paraphrased = Schema::new(grammar.entity_labels(), grammar.relation_paraphrases());
    let vocab = build_vocab(&data, &schema, &config);
    let mut model = JointModel::new(config.clone(), vocab, schema.clone())?;
    let opts = ExtractOptions::from_config(&config);
    let start = Instant::now();
    let trace = train_stage(&mut model, &data, &config.stage2, 2, config.training.seed, &mut |_, epoch, m| {
        if (epoch + 1) % 10 != 0 {
            return Ok(Control::Continue);
        }
        let base = m.evaluate(&data, &schema, &schema, &opts, false)?;
        let swap = m.evaluate(&data, &paraphrased, &schema, &opts, false)?;
        eprintln!(
            "epoch {:>3}  {:>6.1}s  entity {:.3}  relation {:.3}  paraphrased {:.3}",
            epoch + 1,
            start.elapsed().as_secs_f64(),
            base.entities.micro_f1,
            base.relations.micro_f1,
            swap.relations.micro_f1
        );
        Ok(Control::Continue)
    })?;
    eprintln!("final loss {:.5}", trace.last().map_or(f64::NAN, |r| r.total));
    Ok(())
}
