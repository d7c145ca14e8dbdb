//! Checkpoint container round trip.
//!
//! Checkpoints are a single binary blob: magic, version, a JSON header
//! describing config, live layers, vocabulary, and tensor offsets, then raw
//! little-endian f32 data. Serialization is canonical — the same model
//! always gives the same bytes — which is what lets a socket transfer be
//! checked against a local run with a plain byte compare.

use fedslim::evalkit::{TaskFamily, ToyWorld};
use fedslim::model::{checkpoint_bytes, init_model, parse_checkpoint, CheckpointExtra, CHECKPOINT_MAGIC};
use fedslim::vocab::Vocab;

fn main() -> fedslim::Result<()> {
    let world = ToyWorld::new(TaskFamily::KeyValueLookup, 6, 4, 1);
    let vocab = Vocab::new(world.vocab_words());
    let shape = fedslim::config::ModelShape { d_model: 32, n_layers: 3, n_heads: 2, d_ff: 64, max_seq_len: 48 };
    let model = init_model::<f32>(shape.to_model_config(vocab.len()), 77)?;

    let mut extra = CheckpointExtra::new();
    extra.insert("phase".into(), "demo".into());
    let bytes = checkpoint_bytes(&model, Some(&vocab), extra)?;
    println!("serialized {} bytes (magic {:?})", bytes.len(), &bytes[..CHECKPOINT_MAGIC.len()]);

    let (restored, restored_vocab, extra) = parse_checkpoint(&bytes)?;
    assert_eq!(restored.layer_ids, model.layer_ids);
    assert_eq!(restored_vocab.as_ref().map(Vocab::len), Some(vocab.len()));
    println!("restored: {} layers, {} params, extra {:?}", restored.layer_ids.len(), restored.param_count(), extra);

    // Canonical bytes: re-serializing the restored model reproduces the blob.
    let again = checkpoint_bytes(&restored, restored_vocab.as_ref(), extra)?;
    assert_eq!(bytes, again);
    println!("round trip is byte-identical");
    Ok(())
}
