//! Patched binaries behave exactly like the originals.

mod common;

use bcov_core::Policy;

#[test]
fn leaf_node_patched_corpus_matches_originals() {
    assert!(common::pipeline::transparency(Policy::LeafNode) >= 20);
}

#[test]
fn any_node_patched_corpus_matches_originals() {
    assert!(common::pipeline::transparency(Policy::AnyNode) >= 20);
}

#[test]
fn patched_library_is_the_one_loaded() {
    // the executable resolves its dependency next to itself
    let corpus = common::corpus();
    let dir = tempfile::tempdir().unwrap();
    common::patch_corpus(&corpus, Policy::AnyNode, dir.path());
    let rt = common::runtime();
    let fx = corpus.iter().find(|f| !f.spec.depends.is_empty()).expect("fixture with a dependency");
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    common::run(&dir.path().join(fx.spec.file_name()), &fx.spec.runs[0], dir.path(), &[("LD_PRELOAD", &rt), ("BCOV_OUT", &out)]);
    for name in common::modules_of(fx, &corpus) {
        assert_eq!(common::dumps_for(&out, &name).len(), 1, "{name}");
    }
}
