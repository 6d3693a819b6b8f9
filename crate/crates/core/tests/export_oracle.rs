//! Log-probabilities of a fixed toy model, checked against values recomputed
//! outside the crate from the exported weight file.

use dxalign::policy::{logprob, Arch, PolicyModel, Tokenizer};
use dxalign::text::Scheme;

fn toy() -> PolicyModel<f64> {
    let tok = Tokenizer::build(["a b c d e f g h i j k l m n"], Scheme::Word);
    let arch = Arch { vocab: 0, d_model: 8, n_layers: 2, n_heads: 2, d_mlp: 12, context: 16 };
    PolicyModel::new(arch, tok, 42).unwrap()
}

// (context, target, log-probability from the numpy recomputation)
const FROZEN: &[(&[u32], &[u32], f64)] = &[
    (&[1, 6, 7, 8], &[9, 10, 2], -11.845291186659527),
    (&[1], &[6], -4.3073552435766524),
    (&[1, 4, 6, 6, 6, 5], &[11, 12, 13, 14, 15, 19, 2], -24.141367531466393),
];

#[test]
fn logprob_matches_exported_weight_recomputation() {
    let m = toy();
    if let Ok(p) = std::env::var("DXALIGN_EXPORT") {
        m.export_tensors(std::path::Path::new(&p)).unwrap();
    }
    for &(ctx, tgt, want) in FROZEN {
        let got = logprob(&m, ctx, tgt).unwrap();
        assert!((got - want).abs() < 1e-9, "{ctx:?} -> {tgt:?}: {got} vs {want}");
    }
}

#[test]
fn export_lists_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.json");
    let m = toy();
    m.export_tensors(&p).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    let tensors = doc["tensors"].as_object().unwrap();
    assert_eq!(tensors.len(), 2 + 2 * 10 + 3);
    let total: usize = tensors.values().map(|t| t["data"].as_array().unwrap().len()).sum();
    assert_eq!(total, m.param_count());
}
