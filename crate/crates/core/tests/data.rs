use proptest::prelude::*;

use asymrec::data::{
    frequency_bin_assign, load_embeddings, load_interactions, save_embeddings, save_interactions, synth_dataset,
    EmbeddingTable, FrequencyBins, Split, SynthConfig,
};
use asymrec::numerics::Matrix;
use asymrec::Error;

proptest! {
    #[test]
    fn embeddings_round_trip(rows in 1usize..12, cols in 1usize..9, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((seed.wrapping_mul(31).wrapping_add(i as u64) % 2001) as f64 - 1000.0) / 64.0)
            .collect();
        let table = EmbeddingTable::new(Matrix::from_vec(rows, cols, data).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.aemb");
        save_embeddings(&table, &p).unwrap();
        prop_assert_eq!(load_embeddings(&p).unwrap(), table);
    }

    #[test]
    fn bins_cover_every_count(bounds in prop::collection::btree_set(1usize..100, 1..5), count in 0usize..200) {
        let bins = FrequencyBins::new(bounds.into_iter().collect()).unwrap();
        let b = bins.bin_of(count);
        let (lo, hi) = bins.range(b);
        prop_assert!(count >= lo);
        prop_assert!(hi.is_none_or(|h| count <= h));
        prop_assert!(b == 0 || count > bins.boundaries()[b - 1]);
    }
}

#[test]
fn synthetic_corpus_is_seeded_and_round_trips() {
    let cfg = SynthConfig { n_items: 60, dim: 8, n_users: 40, cluster_count: 5, ..Default::default() };
    let a = synth_dataset(&cfg).unwrap();
    let b = synth_dataset(&cfg).unwrap();
    assert_eq!(a.embeddings, b.embeddings);
    assert_eq!(a.dataset, b.dataset);
    let c = synth_dataset(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.embeddings, c.embeddings);

    let dir = tempfile::tempdir().unwrap();
    let (e, i) = (dir.path().join("e.aemb"), dir.path().join("i.tsv"));
    save_embeddings(&a.embeddings, &e).unwrap();
    save_interactions(&a.dataset, &i).unwrap();
    assert_eq!(load_embeddings(&e).unwrap(), a.embeddings);
    assert_eq!(load_interactions(&i, 60).unwrap(), a.dataset);

    for u in a.dataset.users() {
        assert!(u.items.len() >= 3);
        let (ctx, t) = u.context(Split::Test).unwrap();
        assert_eq!(ctx.len() + 1, u.items.len());
        assert_eq!(t, u.test());
    }
    let bins = FrequencyBins::default();
    let assigned = frequency_bin_assign(&a.dataset, &bins);
    assert_eq!(assigned.len(), 60);
}

#[test]
fn malformed_inputs_name_their_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i.tsv");
    std::fs::write(&p, "1\t0 1 2\n2\t0 x 1\n").unwrap();
    match load_interactions(&p, 5) {
        Err(Error::Ingest { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected an ingest error, got {other:?}"),
    }
    std::fs::write(&p, "1\t0 1 2\n\n2\t0 9 1\n").unwrap();
    assert!(matches!(load_interactions(&p, 5), Err(Error::Ingest { line: 3, .. })));

    let e = dir.path().join("e.aemb");
    std::fs::write(&e, b"AEMB\x01").unwrap();
    assert!(matches!(load_embeddings(&e), Err(Error::Format { .. })));
    assert!(matches!(load_embeddings(dir.path().join("missing")), Err(Error::Io { .. })));
}
