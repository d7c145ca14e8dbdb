//! Whole-layer removal. Surviving layers keep their original indices (and
//! hence their tensor names) and their weights bit-exactly; only the block
//! list shrinks.

use super::TransformerModel;
use crate::error::{Error, Result};
use crate::num::Real;
use std::collections::BTreeSet;

/// Remove the listed layers (by original index) from the model.
pub fn remove_layers<R: Real>(
    model: &TransformerModel<R>,
    remove: &[usize],
) -> Result<TransformerModel<R>> {
    let drop: BTreeSet<usize> = remove.iter().copied().collect();
    for &id in &drop {
        if !model.layer_ids.contains(&id) {
            return Err(Error::Data(format!(
                "remove_layers: layer {id} not present (live layers: {:?})",
                model.layer_ids
            )));
        }
    }
    if drop.len() >= model.layers.len() {
        return Err(Error::Data(format!(
            "remove_layers: removing {} of {} layers would leave none",
            drop.len(),
            model.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(model.layers.len() - drop.len());
    let mut layer_ids = Vec::with_capacity(layers.capacity());
    for (layer, &id) in model.layers.iter().zip(model.layer_ids.iter()) {
        if !drop.contains(&id) {
            layers.push(layer.clone());
            layer_ids.push(id);
        }
    }
    Ok(TransformerModel {
        config: model.config,
        tok_emb: model.tok_emb.clone(),
        pos_emb: model.pos_emb.clone(),
        layers,
        layer_ids,
        ln_f_g: model.ln_f_g.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model, ModelConfig};

    fn cfg(n_layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 12,
        }
    }

    #[test]
    fn empty_removal_is_identity() {
        let m = init_model::<f32>(cfg(4), 1).unwrap();
        let out = remove_layers(&m, &[]).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn survivors_keep_order_ids_and_exact_weights() {
        let m = init_model::<f32>(cfg(8), 2).unwrap();
        let out = remove_layers(&m, &[2, 5]).unwrap();
        assert_eq!(out.layer_ids, vec![0, 1, 3, 4, 6, 7]);
        assert_eq!(out.layers.len(), 6);
        for &id in &out.layer_ids {
            let name = format!("layers.{id}.wq");
            assert_eq!(out.param(&name).unwrap(), m.param(&name).unwrap());
        }
        // Named access still works after renumbering-free removal.
        assert!(out.param("layers.2.wq").is_none());
        assert!(out.param("layers.5.w2").is_none());
    }

    #[test]
    fn param_count_drops_by_exact_per_layer_amount() {
        let m = init_model::<f32>(cfg(8), 3).unwrap();
        let out = remove_layers(&m, &[1, 4, 6]).unwrap();
        let expected = m.param_count() - 3 * m.config.per_layer_params();
        assert_eq!(out.param_count(), expected);
        let actual: usize = out
            .param_names()
            .iter()
            .map(|n| out.param(n).unwrap().len())
            .sum();
        assert_eq!(actual, expected);
    }

    #[test]
    fn pruned_model_still_runs_forward() {
        let m = init_model::<f32>(cfg(8), 4).unwrap();
        let out = remove_layers(&m, &[0, 3, 7]).unwrap();
        let trace = forward(&out, &[1, 2, 3, 4], true).unwrap();
        assert_eq!(trace.hidden.unwrap().len(), 6); // 5 live layers + 1
    }

    #[test]
    fn invalid_removals_are_rejected() {
        let m = init_model::<f32>(cfg(4), 5).unwrap();
        assert!(remove_layers(&m, &[9]).is_err());
        assert!(remove_layers(&m, &[0, 1, 2, 3]).is_err());
        // Removing from an already-pruned model by a stale id fails too.
        let once = remove_layers(&m, &[2]).unwrap();
        assert!(remove_layers(&once, &[2]).is_err());
        // Duplicate mentions collapse to one removal.
        let dup = remove_layers(&m, &[1, 1]).unwrap();
        assert_eq!(dup.layer_ids, vec![0, 2, 3]);
    }
}
