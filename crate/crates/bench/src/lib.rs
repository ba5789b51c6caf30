//! Shared fixtures for the criterion benches under `benches/`.

use factrace_core::model::{encode_example, EncodedExample, ModelConfig, Transformer, Vocab};
use factrace_core::synthgen::{build_bundle, DatasetBundle, GenConfig};

/// A bundle of roughly 2,000 attribution examples.
pub fn bundle() -> DatasetBundle {
    build_bundle(&GenConfig {
        n_entities: 100,
        n_facts: 500,
        pairings_per_fact: 4,
        maskings_per_sentence: 2,
        n_query_facts: 20,
        query_variants: 2,
        novel_entities: 10,
        lexical_variation: true,
        seed: 1,
    })
    .expect("bench bundle")
}

/// Desk-size model over the bundle vocabulary with every example encoded
/// (attribution first, then queries).
pub fn model(bundle: &DatasetBundle) -> (Transformer, Vec<EncodedExample>) {
    let vocab = Vocab::from_bundle(bundle);
    let model = Transformer::new(ModelConfig::desk(vocab.len(), 1)).expect("desk model");
    let examples = bundle
        .attribution
        .iter()
        .chain(&bundle.queries)
        .map(|e| encode_example(&vocab, e, false).expect("encodable"))
        .collect();
    (model, examples)
}
